//! Scripted model fixture: replays pre-built logits and attention rows.
//!
//! Lets tests drive the decode loop and the attention diagnostics with
//! hand-constructed oracle values. Step selection keys off the prefix
//! length, so the two streams of a contrastive decode can be scripted
//! independently of what gets appended.

use crate::vocab::{TokenId, Vocabulary};

use super::{AttentionTensor, ConditionalLm, ModelError, ModelOutput, VisualTokens};

#[derive(Debug, Clone)]
pub struct ScriptedStep {
    pub logits: Vec<f64>,
    pub attention: Option<AttentionTensor>,
}

#[derive(Debug, Clone)]
pub struct ScriptedLm {
    vocab: Vocabulary,
    steps: Vec<ScriptedStep>,
}

impl ScriptedLm {
    pub fn new(vocab: Vocabulary, steps: Vec<ScriptedStep>) -> Self {
        Self { vocab, steps }
    }

    /// Scripts logits only; the model then exposes no attention.
    pub fn from_logits(vocab: Vocabulary, per_step: Vec<Vec<f64>>) -> Self {
        let steps = per_step
            .into_iter()
            .map(|logits| ScriptedStep {
                logits,
                attention: None,
            })
            .collect();
        Self::new(vocab, steps)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl ConditionalLm for ScriptedLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn forward(
        &self,
        _visual: &VisualTokens,
        _prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<ModelOutput, ModelError> {
        let step = self
            .steps
            .get(prefix.len())
            .ok_or(ModelError::ScriptExhausted(prefix.len()))?;
        Ok(ModelOutput {
            logits: step.logits.clone(),
            attention: step.attention.clone(),
        })
    }

    fn exposes_attention(&self) -> bool {
        self.steps.iter().all(|s| s.attention.is_some()) && !self.steps.is_empty()
    }
}
