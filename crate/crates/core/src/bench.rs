//! Synthetic co-occurrence benchmark.
//!
//! Plants a textual co-occurrence bias between two findings: finding A
//! (an enlarged cardiac silhouette, Cardiovascular) is always present, and
//! the report mentions finding B (pulmonary edema, Lungs and Airways) far
//! more often than the image actually carries evidence for it. A model fit
//! on such reports emits B from the co-occurrence prior alone; contrasting
//! against a masked forward pass, whose out-of-distribution feature falls
//! back to the pooled prior, suppresses exactly those prior-driven
//! mentions.
//!
//! Everything is seeded and table-driven so an independent oracle can
//! recompute each decode by direct lookup.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::decode::{
    decode_contrastive, decode_greedy, DecodeConfig, DecodeError, DecodeMode, DecodeTrace, VpMode,
};
use crate::image::{
    image_feature_thresholds, mask_image, summarize_features, BoundingBox, CategoryBoxSet,
    GrayImage, ImageError,
};
use crate::metrics::{evaluate_corpus, exact_observation_labels, MetricReport, MetricsError};
use crate::model::{tabular_fit, CategoryModels, MissingAdapterPolicy, ModelError, TabularLm};
use crate::report::{assemble, parse_structured, Category, ReportError, StructuredReport};
use crate::rng::SplitMix64;
use crate::vocab::{TokenSequence, VocabError, Vocabulary, BOS, EOS, NEWLINE_SURFACE};

pub const FINDING_A_CATEGORY: Category = Category::Cardiovascular;
pub const FINDING_B_CATEGORY: Category = Category::LungsAndAirways;
pub const FINDING_A_OBSERVATION: &str = "Enlarged cardiac silhouette.";
pub const SEVERITY_VARIANTS: [&str; 3] = ["Mild", "Moderate", "Severe"];
pub const FINDING_B_SUFFIX: &str = "pulmonary edema.";
/// The token whose emission marks a finding-B mention.
pub const FINDING_B_TOKEN: &str = "edema.";

/// Region visibility read: means above this count as unmasked.
pub const VISIBILITY_THRESHOLD: f64 = 16.0;
/// Evidence read: means above this count as a bright finding.
pub const EVIDENCE_THRESHOLD: f64 = 128.0;

const BACKGROUND_LEVEL: u8 = 40;
const TISSUE_LEVEL: u8 = 90;
const EVIDENCE_LEVEL: u8 = 200;
const JITTER: i32 = 10;

const SINGLE_PASS_ORDER: usize = 4;
const CATEGORY_ORDER: usize = 2;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench spec: {0}")]
    Spec(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("example {id}: decoded output failed to parse: {detail}")]
    MalformedOutput { id: String, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub n: usize,
    pub image_size: usize,
    /// P(report mentions B | A present).
    pub p_text: f64,
    /// P(image carries B evidence | A present); must not exceed `p_text`.
    pub p_img: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            n: 200,
            image_size: 64,
            p_text: 0.9,
            p_img: 0.5,
            seed: 7,
            train_fraction: 0.8,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.n < 2 {
            return Err(BenchError::Spec("need at least 2 examples".to_string()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(BenchError::Spec(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        for (name, p) in [("p_text", self.p_text), ("p_img", self.p_img)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(BenchError::Spec(format!(
                    "{name} must be in [0, 1], got {p}"
                )));
            }
        }
        if self.p_img > self.p_text {
            return Err(BenchError::Spec(format!(
                "p_img ({}) must not exceed p_text ({}): imaged findings are always mentioned",
                self.p_img, self.p_text
            )));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(BenchError::Spec(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BenchExample {
    pub id: String,
    pub image: GrayImage,
    pub report: StructuredReport,
    pub mention_b: bool,
    pub evidence_b: bool,
}

#[derive(Debug, Clone)]
pub struct BenchCorpus {
    pub spec: BenchSpec,
    pub examples: Vec<BenchExample>,
    pub boxes: CategoryBoxSet,
    /// Indices into `examples`.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// The shared box layout for a given image size.
pub fn bench_boxes(image_size: usize) -> CategoryBoxSet {
    let s = image_size;
    let mut boxes = CategoryBoxSet::new();
    boxes.insert(
        FINDING_A_CATEGORY,
        BoundingBox::new(s / 8, s * 9 / 16, s * 7 / 16, s * 7 / 8),
    );
    boxes.insert(
        FINDING_B_CATEGORY,
        BoundingBox::new(s * 9 / 16, s / 8, s * 7 / 8, s * 7 / 16),
    );
    boxes
}

fn fill_region(img: &mut GrayImage, bbox: &BoundingBox, level: u8, rng: &mut SplitMix64) {
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            let jitter = rng.next_below(2 * JITTER as u64 + 1) as i32 - JITTER;
            let v = (level as i32 + jitter).clamp(0, 255) as u8;
            img.set(x, y, v);
        }
    }
}

/// Deterministically generates the planted-bias corpus. One uniform draw u
/// per example couples the two events: the report mentions B iff u < p_text
/// and the image carries B evidence iff u < p_img, so every imaged finding
/// is also mentioned.
pub fn gen_corpus(spec: &BenchSpec) -> Result<BenchCorpus, BenchError> {
    spec.validate()?;
    let boxes = bench_boxes(spec.image_size);
    let mut root = SplitMix64::new(spec.seed);
    let mut rng_draw = root.fork(1);
    let mut rng_severity = root.fork(2);
    let mut rng_pixels = root.fork(3);
    let mut rng_split = root.fork(4);

    let mut examples = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let u = rng_draw.next_f64();
        let mention_b = u < spec.p_text;
        let evidence_b = u < spec.p_img;

        let mut image = GrayImage::filled(spec.image_size, spec.image_size, 0)?;
        for y in 0..spec.image_size {
            for x in 0..spec.image_size {
                let jitter = rng_pixels.next_below(2 * JITTER as u64 + 1) as i32 - JITTER;
                image.set(x, y, (BACKGROUND_LEVEL as i32 + jitter).clamp(0, 255) as u8);
            }
        }
        for bbox in boxes.boxes_for(FINDING_A_CATEGORY) {
            fill_region(&mut image, bbox, EVIDENCE_LEVEL, &mut rng_pixels);
        }
        let b_level = if evidence_b {
            EVIDENCE_LEVEL
        } else {
            TISSUE_LEVEL
        };
        for bbox in boxes.boxes_for(FINDING_B_CATEGORY) {
            fill_region(&mut image, bbox, b_level, &mut rng_pixels);
        }

        let mut report = StructuredReport::new();
        report.add_observation(FINDING_A_CATEGORY, FINDING_A_OBSERVATION)?;
        if mention_b {
            let severity = SEVERITY_VARIANTS[rng_severity.next_below(3) as usize];
            report.add_observation(FINDING_B_CATEGORY, format!("{severity} {FINDING_B_SUFFIX}"))?;
        }

        examples.push(BenchExample {
            id: format!("ex{i:04}"),
            image,
            report,
            mention_b,
            evidence_b,
        });
    }

    let mut order: Vec<usize> = (0..spec.n).collect();
    rng_split.shuffle(&mut order);
    let train_len = ((spec.n as f64) * spec.train_fraction).round() as usize;
    let train_len = train_len.clamp(1, spec.n - 1);
    let mut train = order[..train_len].to_vec();
    let mut test = order[train_len..].to_vec();
    train.sort_unstable();
    test.sort_unstable();

    Ok(BenchCorpus {
        spec: spec.clone(),
        examples,
        boxes,
        train,
        test,
    })
}

/// Conditioning feature string for an image: per box-carrying category, a
/// visibility read and an evidence read (two summary-op calls at the two
/// thresholds), e.g. `lungs=v-;cardio=ve`. `h` marks a hidden (masked-out)
/// region, `e` a bright evidence read.
pub fn image_feature(img: &GrayImage, regions: &CategoryBoxSet) -> Result<String, ImageError> {
    image_feature_thresholds(img, regions, VISIBILITY_THRESHOLD, EVIDENCE_THRESHOLD)
}

/// All feature strings the reads can produce for this box layout
/// (`ve`, `v-`, `h-` per category). Pre-declaring them in the vocabulary
/// lets masked-image features resolve at decode time even though they never
/// occur in training.
pub fn enumerate_features(regions: &CategoryBoxSet) -> Vec<String> {
    let codes = ["v-", "ve", "h-"];
    let categories: Vec<Category> = regions.categories().collect();
    let mut combos: Vec<String> = vec![String::new()];
    for (i, category) in categories.iter().enumerate() {
        let mut next = Vec::with_capacity(combos.len() * codes.len());
        for prefix in &combos {
            for code in codes {
                let part = format!("{}={}", category.short_name(), code);
                if i == 0 {
                    next.push(part);
                } else {
                    next.push(format!("{prefix};{part}"));
                }
            }
        }
        combos = next;
    }
    combos
}

/// Fixed word list covering everything the bench grammar can emit.
fn bench_words() -> Vec<&'static str> {
    vec![
        "Lungs",
        "and",
        "Airways:",
        "Cardiovascular:",
        NEWLINE_SURFACE,
        "-",
        "Mild",
        "Moderate",
        "Severe",
        "pulmonary",
        "edema.",
        "Enlarged",
        "cardiac",
        "silhouette.",
        "None.",
    ]
}

/// The bench vocabulary: grammar words plus the enumerated feature tokens.
pub fn bench_vocabulary(regions: &CategoryBoxSet) -> Result<Vocabulary, VocabError> {
    Vocabulary::new(bench_words())?.with_feature_tokens(enumerate_features(regions))
}

/// Serialized-report tokens for the single-pass model: per line, its
/// whitespace words followed by the newline token; BOS/EOS framed.
pub fn report_tokens(
    vocab: &Vocabulary,
    report: &StructuredReport,
) -> Result<TokenSequence, VocabError> {
    let mut seq = vec![BOS];
    for line in crate::report::serialize_structured(report).lines() {
        for word in line.split_whitespace() {
            seq.push(vocab.require(word)?);
        }
        seq.push(vocab.require(NEWLINE_SURFACE)?);
    }
    seq.push(EOS);
    Ok(seq)
}

/// Per-category section tokens: observation words with newline tokens
/// between observations, or the no-findings sentinel; BOS/EOS framed.
pub fn section_tokens(
    vocab: &Vocabulary,
    report: &StructuredReport,
    category: Category,
) -> Result<TokenSequence, VocabError> {
    let mut seq = vec![BOS];
    let observations = report.observations(category);
    if !report.is_present(category) || observations.is_empty() {
        seq.push(vocab.require(crate::report::NO_FINDINGS_SENTINEL)?);
    } else {
        for (i, obs) in observations.iter().enumerate() {
            if i > 0 {
                seq.push(vocab.require(NEWLINE_SURFACE)?);
            }
            for word in obs.split_whitespace() {
                seq.push(vocab.require(word)?);
            }
        }
    }
    seq.push(EOS);
    Ok(seq)
}

/// The fitted model family: a single-pass table model plus per-category
/// table sets.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub vocab: Vocabulary,
    pub single_pass: TabularLm,
    pub per_category: Option<CategoryModels<TabularLm>>,
}

/// Fits all tables on the training split, smoothing 0 (exact count ratios).
pub fn fit_models(corpus: &BenchCorpus) -> Result<FittedModels, BenchError> {
    let vocab = bench_vocabulary(&corpus.boxes)?;
    let mut single_corpus: Vec<(String, TokenSequence)> = Vec::new();
    let mut category_corpora: BTreeMap<Category, Vec<(String, TokenSequence)>> = BTreeMap::new();
    for &i in &corpus.train {
        let ex = &corpus.examples[i];
        let feature = image_feature(&ex.image, &corpus.boxes)?;
        single_corpus.push((feature.clone(), report_tokens(&vocab, &ex.report)?));
        for category in Category::ALL {
            category_corpora.entry(category).or_default().push((
                feature.clone(),
                section_tokens(&vocab, &ex.report, category)?,
            ));
        }
    }
    let single_pass = tabular_fit(&vocab, &single_corpus, SINGLE_PASS_ORDER, 0.0)?;
    let mut set = CategoryModels::new(single_pass.clone(), MissingAdapterPolicy::PassThrough);
    for (category, cat_corpus) in category_corpora {
        set.insert(
            category,
            tabular_fit(&vocab, &cat_corpus, CATEGORY_ORDER, 0.0)?,
        );
    }
    Ok(FittedModels {
        vocab,
        single_pass,
        per_category: Some(set),
    })
}

/// Masked-region selection for the configured visual-prompt mode.
fn masked_boxes(
    regions: &CategoryBoxSet,
    vp_mode: VpMode,
    category: Option<Category>,
) -> Vec<BoundingBox> {
    match vp_mode {
        VpMode::None => Vec::new(),
        VpMode::All => regions.all_boxes(),
        VpMode::Category => match category {
            Some(c) => regions.boxes_for(c).to_vec(),
            // single-pass decoding has no current category: mask everything
            None => regions.all_boxes(),
        },
    }
}

/// Decodes one image into a structured report under the given config,
/// returning the per-stream traces alongside. This is the path both the
/// benchmark and the decode command run.
pub fn decode_report(
    models: &FittedModels,
    image: &GrayImage,
    regions: &CategoryBoxSet,
    cfg: &DecodeConfig,
    id: &str,
) -> Result<(StructuredReport, Vec<(String, DecodeTrace)>), BenchError> {
    cfg.validate()?;
    let base_feature = image_feature(image, regions)?;
    let mut traces = Vec::new();

    if !cfg.mode.is_category_wise() {
        let model = &models.single_pass;
        let visual_base = model.feature_tokens(&base_feature)?;
        let (seq, trace) = if cfg.mode.is_contrastive() {
            let masked = mask_image(image, &masked_boxes(regions, cfg.vp_mode, None))?;
            let masked_feature = image_feature(&masked, regions)?;
            let visual_masked = model.feature_tokens(&masked_feature)?;
            decode_contrastive(model, &visual_base, &visual_masked, &[BOS], cfg)?
        } else {
            decode_greedy(model, &visual_base, &[BOS], cfg)?
        };
        let text = models.vocab.detokenize(&seq)?;
        let report = parse_structured(&text).map_err(|e| BenchError::MalformedOutput {
            id: id.to_string(),
            detail: e.to_string(),
        })?;
        traces.push(("full".to_string(), trace));
        return Ok((report, traces));
    }

    let set = models
        .per_category
        .as_ref()
        .ok_or_else(|| BenchError::Config("category-wise mode needs per-category tables".into()))?;
    let mut outputs: BTreeMap<Category, TokenSequence> = BTreeMap::new();
    for category in Category::ALL {
        let model = set.model_for(category)?;
        let visual_base = model.feature_tokens(&base_feature)?;
        let (seq, trace) = if cfg.mode.is_contrastive() {
            let masked = mask_image(image, &masked_boxes(regions, cfg.vp_mode, Some(category)))?;
            let masked_feature = image_feature(&masked, regions)?;
            let visual_masked = model.feature_tokens(&masked_feature)?;
            decode_contrastive(model, &visual_base, &visual_masked, &[BOS], cfg)?
        } else {
            decode_greedy(model, &visual_base, &[BOS], cfg)?
        };
        traces.push((category.short_name().to_string(), trace));
        outputs.insert(category, seq);
    }
    let report = assemble(&outputs, &models.vocab)?;
    Ok((report, traces))
}

/// True when any observation in the report contains the finding-B token.
pub fn mentions_finding_b(report: &StructuredReport) -> bool {
    report.present().any(|category| {
        report
            .observations(category)
            .iter()
            .any(|obs| obs.split_whitespace().any(|w| w == FINDING_B_TOKEN))
    })
}

/// True when the evidence read of finding B's region is "absent".
pub fn evidence_b_absent(image: &GrayImage, regions: &CategoryBoxSet) -> Result<bool, ImageError> {
    let summary = summarize_features(image, regions, EVIDENCE_THRESHOLD)?;
    Ok(summary[&FINDING_B_CATEGORY] == "absent")
}

/// Ground-truth spurious count over a set of examples, recomputed from
/// (image, report) pairs alone.
pub fn ground_truth_spurious(corpus: &BenchCorpus, indices: &[usize]) -> Result<usize, BenchError> {
    let mut count = 0;
    for &i in indices {
        let ex = &corpus.examples[i];
        if mentions_finding_b(&ex.report) && evidence_b_absent(&ex.image, &corpus.boxes)? {
            count += 1;
        }
    }
    Ok(count)
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub label: String,
    pub config: DecodeConfig,
    pub examples: usize,
    pub spurious_count: usize,
    pub spurious_rate: f64,
    pub mean_v_sub: f64,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, Default)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
}

impl BenchResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,mode,vp_mode,alpha,beta,subselection,examples,spurious_count,spurious_rate,mean_v_sub,bleu_1,bleu_4,rouge_l_f1,label_precision,label_recall,label_f1\n",
        );
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{},{:?},{:?},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                row.label,
                row.config.mode.name(),
                row.config.vp_mode.name(),
                row.config.alpha,
                row.config.beta,
                row.config.subselection_enabled,
                row.examples,
                row.spurious_count,
                row.spurious_rate,
                row.mean_v_sub,
                row.metrics.bleu[0],
                row.metrics.bleu[3],
                row.metrics.rouge_l.f1,
                row.metrics.labels.precision,
                row.metrics.labels.recall,
                row.metrics.labels.f1,
            )
            .expect("string write");
        }
        out
    }

    pub fn to_summary(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            writeln!(
                out,
                "{:<24} spurious {:>3}/{:<3} ({:.3})  bleu-1 {:.3}  rouge-l {:.3}  label-p {:.3}",
                row.label,
                row.spurious_count,
                row.examples,
                row.spurious_rate,
                row.metrics.bleu[0],
                row.metrics.rouge_l.f1,
                row.metrics.labels.precision,
            )
            .expect("string write");
        }
        out
    }
}

/// The ablation grid: plain greedy, contrastive single-pass, category-wise
/// greedy, and the category-wise contrastive variants.
pub fn table_grid() -> Vec<(String, DecodeConfig)> {
    let base = DecodeConfig::default();
    vec![
        (
            "greedy".to_string(),
            DecodeConfig {
                mode: DecodeMode::Greedy,
                vp_mode: VpMode::None,
                ..base.clone()
            },
        ),
        (
            "cd+vs".to_string(),
            DecodeConfig {
                mode: DecodeMode::Cd,
                vp_mode: VpMode::All,
                ..base.clone()
            },
        ),
        (
            "cw".to_string(),
            DecodeConfig {
                mode: DecodeMode::Cw,
                vp_mode: VpMode::None,
                ..base.clone()
            },
        ),
        (
            "cwcd-no-vs".to_string(),
            DecodeConfig {
                mode: DecodeMode::Cwcd,
                vp_mode: VpMode::Category,
                subselection_enabled: false,
                ..base.clone()
            },
        ),
        (
            "cwcd-all-vp".to_string(),
            DecodeConfig {
                mode: DecodeMode::Cwcd,
                vp_mode: VpMode::All,
                ..base.clone()
            },
        ),
        (
            "cwcd-category-vp".to_string(),
            DecodeConfig {
                mode: DecodeMode::Cwcd,
                vp_mode: VpMode::Category,
                ..base
            },
        ),
    ]
}

/// Runs every config over the test split and scores spurious rates and
/// metrics. Rows are a pure function of (corpus, config, fitted models).
pub fn run_bench(
    corpus: &BenchCorpus,
    models: &FittedModels,
    grid: &[(String, DecodeConfig)],
) -> Result<BenchResult, BenchError> {
    let mut result = BenchResult::default();
    for (label, cfg) in grid {
        if cfg.mode.is_category_wise() && models.per_category.is_none() {
            return Err(BenchError::Config(format!(
                "grid entry {label:?} is category-wise but no per-category tables are fitted"
            )));
        }
        let mut preds = Vec::with_capacity(corpus.test.len());
        let mut refs = Vec::with_capacity(corpus.test.len());
        let mut spurious = 0usize;
        let mut v_sub_sum = 0.0;
        let mut v_sub_steps = 0usize;
        for &i in &corpus.test {
            let ex = &corpus.examples[i];
            let (pred, traces) = decode_report(models, &ex.image, &corpus.boxes, cfg, &ex.id)?;
            if mentions_finding_b(&pred) && evidence_b_absent(&ex.image, &corpus.boxes)? {
                spurious += 1;
            }
            for (_, trace) in &traces {
                for step in &trace.steps {
                    v_sub_sum += step.v_sub_size as f64;
                    v_sub_steps += 1;
                }
            }
            preds.push(pred);
            refs.push(ex.report.clone());
        }
        let metrics = evaluate_corpus(&preds, &refs, exact_observation_labels)?;
        result.rows.push(BenchRow {
            label: label.clone(),
            config: cfg.clone(),
            examples: corpus.test.len(),
            spurious_count: spurious,
            spurious_rate: spurious as f64 / corpus.test.len() as f64,
            mean_v_sub: if v_sub_steps == 0 {
                0.0
            } else {
                v_sub_sum / v_sub_steps as f64
            },
            metrics,
        });
    }
    Ok(result)
}

/// Runs the full category-wise contrastive config at each beta.
pub fn beta_sweep(
    corpus: &BenchCorpus,
    models: &FittedModels,
    betas: &[f64],
) -> Result<BenchResult, BenchError> {
    let grid: Vec<(String, DecodeConfig)> = betas
        .iter()
        .map(|&beta| {
            (
                format!("beta={beta:.2}"),
                DecodeConfig {
                    beta,
                    mode: DecodeMode::Cwcd,
                    vp_mode: VpMode::Category,
                    ..DecodeConfig::default()
                },
            )
        })
        .collect();
    run_bench(corpus, models, &grid)
}

/// The sweep values used by the benchmark command.
pub const BETA_SWEEP: [f64; 7] = [0.0, 0.01, 0.10, 0.25, 0.50, 0.75, 0.90];
