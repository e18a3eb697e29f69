//! Exact tabular conditional language model.
//!
//! Probabilities come straight out of count tables keyed by a discrete
//! image-summary feature and the last-k context tokens, so every decode
//! outcome is reproducible by direct table lookup. Resolution backs off
//! over shorter context suffixes within the conditioning feature, then over
//! the feature-pooled tables (the model's language prior — this is what an
//! out-of-distribution masked input falls back to), and finally to uniform.

use std::collections::BTreeMap;

use crate::logprob::PROB_FLOOR;
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

use super::{ConditionalLm, ModelError, ModelOutput, VisualTokens};

/// Rows for one conditioning feature: context suffix -> probability row.
type ContextTable = BTreeMap<Vec<TokenId>, Vec<f64>>;

/// Feature name reserved for the pooled (feature-marginal) tables in the
/// serialized form.
pub const POOLED_FEATURE: &str = "*";

#[derive(Debug, Clone)]
pub struct TabularLm {
    vocab: Vocabulary,
    order: usize,
    smoothing: f64,
    tables: BTreeMap<String, ContextTable>,
    pooled: ContextTable,
    uniform: Vec<f64>,
}

impl TabularLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// Features with trained tables, sorted.
    pub fn trained_features(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    /// Wraps a feature string as the model's single-token visual stream.
    /// The feature must have a `<img:...>` token in the vocabulary; it does
    /// not need a trained table (unseen features resolve via the pooled
    /// prior).
    pub fn feature_tokens(&self, feature: &str) -> Result<VisualTokens, ModelError> {
        let id = self
            .vocab
            .feature_token(feature)
            .map_err(|_| ModelError::UnknownFeature(feature.to_string()))?;
        Ok(VisualTokens::single(id))
    }

    /// Probability row for (feature, context), after back-off. The returned
    /// slice has one entry per vocabulary token and is exactly the stored
    /// row — no arithmetic happens on the lookup path.
    pub fn lookup(&self, feature: &str, context: &[TokenId]) -> &[f64] {
        if let Some(table) = self.tables.get(feature) {
            if let Some(row) = Self::resolve(table, context, self.order) {
                return row;
            }
        }
        if let Some(row) = Self::resolve(&self.pooled, context, self.order) {
            return row;
        }
        &self.uniform
    }

    fn resolve<'a>(
        table: &'a ContextTable,
        context: &[TokenId],
        order: usize,
    ) -> Option<&'a Vec<f64>> {
        let max_len = order.min(context.len());
        for len in (0..=max_len).rev() {
            if let Some(row) = table.get(&context[context.len() - len..]) {
                return Some(row);
            }
        }
        None
    }

    /// Serializes to the text document format: k, smoothing, feature
    /// alphabet, vocabulary, then one `feature | context -> token:prob, ...`
    /// row per table entry (`*` is the pooled table).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("kind=tabular\n");
        out.push_str(&format!("k={}\n", self.order));
        out.push_str(&format!("smoothing={:?}\n", self.smoothing));
        out.push_str(&format!(
            "features={}\n",
            self.tables.keys().cloned().collect::<Vec<_>>().join("\t")
        ));
        out.push_str(&format!("vocab={}\n", self.vocab.surfaces().join(" ")));
        let emit_rows = |feature: &str, table: &ContextTable, out: &mut String| {
            for (ctx, row) in table {
                let ctx_text = ctx
                    .iter()
                    .map(|&t| self.vocab.surface(t).expect("ctx token in vocab"))
                    .collect::<Vec<_>>()
                    .join(" ");
                let entries = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(i, &p)| {
                        format!(
                            "{}:{:?}",
                            self.vocab.surface(TokenId(i as u32)).expect("token"),
                            p
                        )
                    })
                    .collect::<Vec<_>>()
                    .join(", ");
                out.push_str(&format!("{feature} | {ctx_text} -> {entries}\n"));
            }
        };
        for (feature, table) in &self.tables {
            emit_rows(feature, table, &mut out);
        }
        emit_rows(POOLED_FEATURE, &self.pooled, &mut out);
        out
    }

    /// Parses the text document format.
    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines();
        let mut order = None;
        let mut smoothing = None;
        let mut vocab = None;
        let mut feature_names: Vec<String> = Vec::new();
        let mut rows: Vec<(String, String, String)> = Vec::new();
        let bad = |msg: &str| ModelError::Serialization(msg.to_string());

        for line in lines.by_ref() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("kind=") {
                if v != "tabular" {
                    return Err(bad(&format!("kind {v:?} is not tabular")));
                }
            } else if let Some(v) = line.strip_prefix("k=") {
                order = Some(v.parse::<usize>().map_err(|_| bad("bad k"))?);
            } else if let Some(v) = line.strip_prefix("smoothing=") {
                smoothing = Some(v.parse::<f64>().map_err(|_| bad("bad smoothing"))?);
            } else if let Some(v) = line.strip_prefix("features=") {
                feature_names = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split('\t').map(str::to_string).collect()
                };
            } else if let Some(v) = line.strip_prefix("vocab=") {
                vocab = Some(
                    Vocabulary::from_surfaces(v.split(' '))
                        .map_err(|e| bad(&format!("vocab: {e}")))?,
                );
            } else {
                let (feature, rest) = line
                    .split_once(" | ")
                    .ok_or_else(|| bad(&format!("row missing ' | ': {line:?}")))?;
                let (ctx, entries) = rest
                    .split_once(" -> ")
                    .ok_or_else(|| bad(&format!("row missing ' -> ': {line:?}")))?;
                rows.push((feature.to_string(), ctx.to_string(), entries.to_string()));
            }
        }

        let vocab = vocab.ok_or_else(|| bad("missing vocab line"))?;
        let order = order.ok_or_else(|| bad("missing k line"))?;
        let smoothing = smoothing.ok_or_else(|| bad("missing smoothing line"))?;
        let mut tables: BTreeMap<String, ContextTable> = BTreeMap::new();
        for name in &feature_names {
            tables.insert(name.clone(), ContextTable::new());
        }
        let mut pooled = ContextTable::new();

        for (feature, ctx_text, entries) in rows {
            let ctx: Vec<TokenId> = if ctx_text.is_empty() {
                Vec::new()
            } else {
                ctx_text
                    .split(' ')
                    .map(|w| vocab.require(w))
                    .collect::<Result<_, _>>()?
            };
            let mut row = vec![0.0; vocab.len()];
            for entry in entries.split(", ") {
                if entry.is_empty() {
                    continue;
                }
                let (token, prob) = entry
                    .rsplit_once(':')
                    .ok_or_else(|| bad(&format!("bad row entry {entry:?}")))?;
                let id = vocab.require(token)?;
                row[id.index()] = prob
                    .parse::<f64>()
                    .map_err(|_| bad(&format!("bad probability {prob:?}")))?;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(bad(&format!("row sums to {sum}, not 1")));
            }
            if feature == POOLED_FEATURE {
                pooled.insert(ctx, row);
            } else {
                tables
                    .get_mut(&feature)
                    .ok_or_else(|| bad(&format!("row for undeclared feature {feature:?}")))?
                    .insert(ctx, row);
            }
        }

        let uniform = vec![1.0 / vocab.len() as f64; vocab.len()];
        Ok(TabularLm {
            vocab,
            order,
            smoothing,
            tables,
            pooled,
            uniform,
        })
    }
}

impl ConditionalLm for TabularLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn forward(
        &self,
        visual: &VisualTokens,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<ModelOutput, ModelError> {
        if visual.len() != 1 {
            return Err(ModelError::FeatureTokenCount(visual.len()));
        }
        let id = visual.ids()[0];
        let feature = self
            .vocab
            .feature_of(id)
            .ok_or(ModelError::NotAFeatureToken(id))?;
        let mut context: Vec<TokenId> = Vec::with_capacity(prompt.len() + prefix.len());
        context.extend_from_slice(prompt);
        context.extend_from_slice(prefix);
        let row = self.lookup(feature, &context);
        let logits = row.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect();
        Ok(ModelOutput {
            logits,
            attention: None,
        })
    }
}

/// Fits count tables with additive smoothing from `(feature, sequence)`
/// pairs. Sequences should carry their own BOS/EOS framing. Every feature in
/// the corpus must have a `<img:...>` token in `vocab`; the vocabulary may
/// declare additional features that then resolve through the pooled prior.
pub fn tabular_fit(
    vocab: &Vocabulary,
    corpus: &[(String, TokenSequence)],
    order: usize,
    smoothing: f64,
) -> Result<TabularLm, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Fit("empty corpus".to_string()));
    }
    if order == 0 {
        return Err(ModelError::Fit("context order must be >= 1".to_string()));
    }
    if smoothing < 0.0 {
        return Err(ModelError::Fit("negative smoothing".to_string()));
    }

    type Counts = BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>;
    let mut per_feature: BTreeMap<String, Counts> = BTreeMap::new();
    let mut pooled_counts: Counts = Counts::new();

    for (feature, seq) in corpus {
        if feature.contains(['\t', '\n', '|']) || feature == POOLED_FEATURE {
            return Err(ModelError::Fit(format!(
                "feature {feature:?} contains reserved characters"
            )));
        }
        vocab
            .feature_token(feature)
            .map_err(|_| ModelError::UnknownFeature(feature.clone()))?;
        if seq.len() < 2 {
            return Err(ModelError::Fit(format!(
                "sequence for feature {feature:?} needs at least two tokens"
            )));
        }
        let counts = per_feature.entry(feature.clone()).or_default();
        for t in 1..seq.len() {
            let next = seq[t];
            let max_len = order.min(t);
            for len in 0..=max_len {
                let ctx = seq[t - len..t].to_vec();
                *counts
                    .entry(ctx.clone())
                    .or_default()
                    .entry(next)
                    .or_insert(0) += 1;
                *pooled_counts
                    .entry(ctx)
                    .or_default()
                    .entry(next)
                    .or_insert(0) += 1;
            }
        }
    }

    let materialize = |counts: &Counts| -> ContextTable {
        let v = vocab.len() as f64;
        counts
            .iter()
            .map(|(ctx, next_counts)| {
                let total: u64 = next_counts.values().sum();
                let denom = total as f64 + smoothing * v;
                let mut row = vec![smoothing / denom; vocab.len()];
                if smoothing == 0.0 {
                    row.iter_mut().for_each(|p| *p = 0.0);
                }
                for (&tok, &c) in next_counts {
                    row[tok.index()] = (c as f64 + smoothing) / denom;
                }
                (ctx.clone(), row)
            })
            .collect()
    };

    let tables: BTreeMap<String, ContextTable> = per_feature
        .iter()
        .map(|(f, c)| (f.clone(), materialize(c)))
        .collect();
    let pooled = materialize(&pooled_counts);
    let uniform = vec![1.0 / vocab.len() as f64; vocab.len()];

    Ok(TabularLm {
        vocab: vocab.clone(),
        order,
        smoothing,
        tables,
        pooled,
        uniform,
    })
}
