//! Deterministic text-generation and label metrics.
//!
//! BLEU is corpus-level with pooled clipped n-gram counts and the standard
//! brevity penalty; ROUGE-1/2/L are macro-averaged over pairs; label
//! precision/recall/F1 is support-weighted over per-label confusion counts.
//! The corpus evaluation follows the no-penalty protocol: category sections
//! present in exactly one of prediction/reference are excluded from the
//! text-overlap pairing but still count in the label metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::report::{Category, StructuredReport};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("max_n must be in 1..=4, got {0}")]
    BadOrder(usize),
    #[error("empty gold corpus: metric undefined")]
    EmptyGold,
    #[error("corpora differ in length: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),
}

/// Lowercases and splits on whitespace after detaching leading/trailing
/// ASCII punctuation into separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && chars[start].is_ascii_punctuation() {
            start += 1;
        }
        while end > start && chars[end - 1].is_ascii_punctuation() {
            end -= 1;
        }
        for &c in &chars[..start] {
            out.push(c.to_string());
        }
        if start < end {
            out.push(chars[start..end].iter().collect::<String>().to_lowercase());
        }
        for &c in &chars[end..] {
            out.push(c.to_string());
        }
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU over (hypothesis, reference) token-list pairs:
/// geometric mean of pooled clipped n-gram precisions for n = 1..=max_n,
/// times the brevity penalty exp(1 - r/c) when c <= r. With smoothing off a
/// zero match count at any order gives 0; add-1 smoothing (orders >= 2 only)
/// is available for sentence-level use.
pub fn bleu_corpus(
    pairs: &[(Vec<String>, Vec<String>)],
    max_n: usize,
    smoothing: bool,
) -> Result<f64, MetricsError> {
    if !(1..=4).contains(&max_n) {
        return Err(MetricsError::BadOrder(max_n));
    }
    let hyp_len: usize = pairs.iter().map(|(h, _)| h.len()).sum();
    let ref_len: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let mut matched = 0u64;
        let mut total = 0u64;
        for (hyp, reference) in pairs {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &c) in &hyp_counts {
                total += c;
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched += c.min(clip);
            }
        }
        let (num, den) = if smoothing && n >= 2 {
            (matched + 1, total + 1)
        } else {
            (matched, total)
        };
        if num == 0 || den == 0 {
            return Ok(0.0);
        }
        log_sum += (num as f64 / den as f64).ln();
    }
    let precision_term = (log_sum / max_n as f64).exp();
    let bp = if hyp_len <= ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * precision_term)
}

/// Sentence-level BLEU for one pair.
pub fn bleu(hyp: &[String], reference: &[String], max_n: usize) -> Result<f64, MetricsError> {
    bleu_corpus(&[(hyp.to_vec(), reference.to_vec())], max_n, false)
}

/// Precision/recall/F1 triple; F1 is 0 when both components are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(matched: f64, hyp_total: f64, ref_total: f64) -> Prf {
        let precision = if hyp_total > 0.0 {
            matched / hyp_total
        } else {
            0.0
        };
        let recall = if ref_total > 0.0 {
            matched / ref_total
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

/// ROUGE-N from n-gram overlap counts.
pub fn rouge_n(hyp: &[String], reference: &[String], n: usize) -> Prf {
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts = ngram_counts(reference, n);
    let mut matched = 0u64;
    for (gram, &c) in &hyp_counts {
        matched += c.min(ref_counts.get(gram).copied().unwrap_or(0));
    }
    let hyp_total: u64 = hyp_counts.values().sum();
    let ref_total: u64 = ref_counts.values().sum();
    Prf::from_counts(matched as f64, hyp_total as f64, ref_total as f64)
}

/// Longest common subsequence length.
pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L from the LCS length.
pub fn rouge_l(hyp: &[String], reference: &[String]) -> Prf {
    let lcs = lcs_length(hyp, reference) as f64;
    Prf::from_counts(lcs, hyp.len() as f64, reference.len() as f64)
}

/// Support-weighted label precision/recall/F1. Each example carries a
/// multiset of labels; per-label confusion counts aggregate across the
/// corpus and average weighted by gold support. Labels with zero gold
/// support are excluded.
pub fn label_prf(pred: &[Vec<String>], gold: &[Vec<String>]) -> Result<Prf, MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gold.len()));
    }
    if gold.is_empty() || gold.iter().all(|g| g.is_empty()) {
        return Err(MetricsError::EmptyGold);
    }
    #[derive(Default)]
    struct Confusion {
        tp: u64,
        fp: u64,
        fn_: u64,
    }
    let mut per_label: BTreeMap<String, Confusion> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        let mut p_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for l in p {
            *p_counts.entry(l).or_insert(0) += 1;
        }
        let mut g_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for l in g {
            *g_counts.entry(l).or_insert(0) += 1;
        }
        for (&label, &pc) in &p_counts {
            let gc = g_counts.get(label).copied().unwrap_or(0);
            let entry = per_label.entry(label.to_string()).or_default();
            entry.tp += pc.min(gc);
            entry.fp += pc.saturating_sub(gc);
        }
        for (&label, &gc) in &g_counts {
            let pc = p_counts.get(label).copied().unwrap_or(0);
            let entry = per_label.entry(label.to_string()).or_default();
            entry.fn_ += gc.saturating_sub(pc);
        }
    }
    let mut weighted = Prf::default();
    let mut support_total = 0.0;
    for conf in per_label.values() {
        let support = (conf.tp + conf.fn_) as f64;
        if support == 0.0 {
            continue;
        }
        let prf = Prf {
            precision: if conf.tp + conf.fp > 0 {
                conf.tp as f64 / (conf.tp + conf.fp) as f64
            } else {
                0.0
            },
            recall: conf.tp as f64 / support,
            f1: 0.0,
        };
        let f1 = if prf.precision + prf.recall > 0.0 {
            2.0 * prf.precision * prf.recall / (prf.precision + prf.recall)
        } else {
            0.0
        };
        weighted.precision += support * prf.precision;
        weighted.recall += support * prf.recall;
        weighted.f1 += support * f1;
        support_total += support;
    }
    weighted.precision /= support_total;
    weighted.recall /= support_total;
    weighted.f1 /= support_total;
    Ok(weighted)
}

/// Per-example label sets. The default extractor labels each observation by
/// its exact string, qualified by category; a learned labeler can be
/// plugged in instead.
pub type LabelExtractor = fn(&StructuredReport) -> Vec<String>;

pub fn exact_observation_labels(report: &StructuredReport) -> Vec<String> {
    let mut labels = Vec::new();
    for category in report.present() {
        for obs in report.observations(category) {
            labels.push(format!("{}: {}", category.header(), obs));
        }
    }
    labels
}

/// All metric values for one evaluation run.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_1: Prf,
    pub rouge_2: Prf,
    pub rouge_l: Prf,
    pub labels: Prf,
    pub per_category: BTreeMap<Category, CategoryMetrics>,
}

#[derive(Debug, Clone, Default)]
pub struct CategoryMetrics {
    pub bleu_1: f64,
    pub rouge_l: Prf,
    pub pairs: usize,
}

impl MetricReport {
    /// Flat key=value rendering.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.bleu.iter().enumerate() {
            writeln!(out, "bleu_{}={:?}", i + 1, v).expect("string write");
        }
        writeln!(out, "rouge_1_f1={:?}", self.rouge_1.f1).expect("string write");
        writeln!(out, "rouge_2_f1={:?}", self.rouge_2.f1).expect("string write");
        writeln!(out, "rouge_l_f1={:?}", self.rouge_l.f1).expect("string write");
        writeln!(out, "label_precision={:?}", self.labels.precision).expect("string write");
        writeln!(out, "label_recall={:?}", self.labels.recall).expect("string write");
        writeln!(out, "label_f1={:?}", self.labels.f1).expect("string write");
        out
    }

    /// Per-category CSV rendering.
    pub fn per_category_csv(&self) -> String {
        let mut out = String::from("category,pairs,bleu_1,rouge_l_f1\n");
        for (category, m) in &self.per_category {
            writeln!(
                out,
                "{},{},{:?},{:?}",
                category.header(),
                m.pairs,
                m.bleu_1,
                m.rouge_l.f1
            )
            .expect("string write");
        }
        out
    }
}

/// A (hypothesis, reference) token-list pair.
pub type TokenPair = (Vec<String>, Vec<String>);

/// Corpus evaluation under the no-penalty protocol. Predictions and
/// references must be aligned index-by-index (callers align by example id).
pub fn evaluate_corpus(
    preds: &[StructuredReport],
    refs: &[StructuredReport],
    label_extractor: LabelExtractor,
) -> Result<MetricReport, MetricsError> {
    if preds.len() != refs.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), refs.len()));
    }
    // Matched-category text pairs for the NLG metrics.
    let mut pairs: Vec<TokenPair> = Vec::new();
    let mut per_category_pairs: BTreeMap<Category, Vec<TokenPair>> = BTreeMap::new();
    for (pred, reference) in preds.iter().zip(refs) {
        let mut hyp_text = String::new();
        let mut ref_text = String::new();
        for category in Category::ALL {
            if pred.is_present(category) && reference.is_present(category) {
                let h = section_text(pred, category);
                let r = section_text(reference, category);
                hyp_text.push_str(&h);
                hyp_text.push(' ');
                ref_text.push_str(&r);
                ref_text.push(' ');
                per_category_pairs
                    .entry(category)
                    .or_default()
                    .push((tokenize(&h), tokenize(&r)));
            }
        }
        pairs.push((tokenize(&hyp_text), tokenize(&ref_text)));
    }

    let mut report = MetricReport::default();
    for n in 1..=4 {
        report.bleu[n - 1] = bleu_corpus(&pairs, n, false)?;
    }
    report.rouge_1 = mean_prf(pairs.iter().map(|(h, r)| rouge_n(h, r, 1)));
    report.rouge_2 = mean_prf(pairs.iter().map(|(h, r)| rouge_n(h, r, 2)));
    report.rouge_l = mean_prf(pairs.iter().map(|(h, r)| rouge_l(h, r)));

    let pred_labels: Vec<Vec<String>> = preds.iter().map(label_extractor).collect();
    let gold_labels: Vec<Vec<String>> = refs.iter().map(label_extractor).collect();
    report.labels = label_prf(&pred_labels, &gold_labels)?;

    for (category, cat_pairs) in per_category_pairs {
        let bleu_1 = bleu_corpus(&cat_pairs, 1, false)?;
        let rl = mean_prf(cat_pairs.iter().map(|(h, r)| rouge_l(h, r)));
        report.per_category.insert(
            category,
            CategoryMetrics {
                bleu_1,
                rouge_l: rl,
                pairs: cat_pairs.len(),
            },
        );
    }
    Ok(report)
}

fn section_text(report: &StructuredReport, category: Category) -> String {
    report.observations(category).join(" ")
}

fn mean_prf<I: Iterator<Item = Prf>>(prfs: I) -> Prf {
    let mut sum = Prf::default();
    let mut n = 0usize;
    for p in prfs {
        sum.precision += p.precision;
        sum.recall += p.recall;
        sum.f1 += p.f1;
        n += 1;
    }
    if n == 0 {
        return Prf::default();
    }
    Prf {
        precision: sum.precision / n as f64,
        recall: sum.recall / n as f64,
        f1: sum.f1 / n as f64,
    }
}
