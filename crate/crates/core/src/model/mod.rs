//! The conditional language-model contract and its desk-scale
//! implementations.

mod category;
mod lora;
mod matrix;
mod scripted;
mod tabular;
mod toy;

pub use category::{CategoryModels, MissingAdapterPolicy};
pub use lora::{apply_lora, LoraDelta};
pub use matrix::Matrix;
pub use scripted::{ScriptedLm, ScriptedStep};
pub use tabular::{tabular_fit, TabularLm, POOLED_FEATURE};
pub use toy::ToyTransformer;

use thiserror::Error;

use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("context overflow: visual {visual} + prompt {prompt} + prefix {prefix} exceeds limit {limit}")]
    ContextOverflow {
        visual: usize,
        prompt: usize,
        prefix: usize,
        limit: usize,
    },
    #[error("visual token {0:?} is not a feature token of this model")]
    NotAFeatureToken(TokenId),
    #[error("expected exactly one visual feature token, got {0}")]
    FeatureTokenCount(usize),
    #[error("unknown conditioning feature {0:?}")]
    UnknownFeature(String),
    #[error("unknown adapter target matrix {0:?}")]
    UnknownTarget(String),
    #[error("adapter shape mismatch for {target:?}: delta is {got_rows}x{got_cols}, matrix is {want_rows}x{want_cols}")]
    AdapterShape {
        target: String,
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("no adapter registered for category {0} (strict mode)")]
    MissingAdapter(crate::report::Category),
    #[error("model fit: {0}")]
    Fit(String),
    #[error("model file: {0}")]
    Serialization(String),
    #[error("vocabulary: {0}")]
    Vocab(#[from] crate::vocab::VocabError),
    #[error("scripted model exhausted after {0} steps")]
    ScriptExhausted(usize),
}

/// Per-step attention: `rows[layer][head]` is the current generation step's
/// attention row over all `n_positions` input positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    rows: Vec<Vec<Vec<f64>>>,
}

impl AttentionTensor {
    pub fn new(rows: Vec<Vec<Vec<f64>>>) -> Self {
        Self { rows }
    }

    pub fn layers(&self) -> usize {
        self.rows.len()
    }

    pub fn heads(&self) -> usize {
        self.rows.first().map(Vec::len).unwrap_or(0)
    }

    pub fn positions(&self) -> usize {
        self.rows
            .first()
            .and_then(|l| l.first())
            .map(Vec::len)
            .unwrap_or(0)
    }

    pub fn row(&self, layer: usize, head: usize) -> &[f64] {
        &self.rows[layer][head]
    }
}

/// Result of one forward pass: next-token logits over the full vocabulary,
/// plus the attention rows when the model exposes them.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Vec<f64>,
    pub attention: Option<AttentionTensor>,
}

/// Visual input to a forward pass: token ids from the visual sub-vocabulary
/// plus the grid coordinates of their source patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualTokens {
    ids: Vec<TokenId>,
    positions: Vec<(u32, u32)>,
}

impl VisualTokens {
    pub fn new(ids: Vec<TokenId>, positions: Vec<(u32, u32)>) -> Self {
        debug_assert_eq!(ids.len(), positions.len());
        Self { ids, positions }
    }

    /// A single-token stream; used for discrete feature conditioning.
    pub fn single(id: TokenId) -> Self {
        Self {
            ids: vec![id],
            positions: vec![(0, 0)],
        }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn positions(&self) -> &[(u32, u32)] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Abstract conditional language model. Input ordering is always visual
/// tokens, then prompt, then the generated prefix. Implementations are
/// immutable after construction; concurrent read-only forwards are safe.
pub trait ConditionalLm {
    fn vocab(&self) -> &Vocabulary;

    /// Next-token logits (and attention, when exposed) for the concatenated
    /// input `visual ++ prompt ++ prefix`.
    fn forward(
        &self,
        visual: &VisualTokens,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<ModelOutput, ModelError>;

    /// Whether [`ModelOutput::attention`] is populated.
    fn exposes_attention(&self) -> bool {
        false
    }
}

impl<M: ConditionalLm + ?Sized> ConditionalLm for &M {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }

    fn forward(
        &self,
        visual: &VisualTokens,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<ModelOutput, ModelError> {
        (**self).forward(visual, prompt, prefix)
    }

    fn exposes_attention(&self) -> bool {
        (**self).exposes_attention()
    }
}
