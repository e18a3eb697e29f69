//! Layer-averaged max attention diagnostics.
//!
//! For a generation step with per-layer per-head attention rows over the N
//! input positions, the score over a position subset S is the mean over
//! layers of the per-layer maximum over heads of the attention mass inside
//! S. Computed over the visual positions it tracks how much of the model's
//! attention still lands on the image as generation proceeds.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::decode::{DecodeConfig, PositionSet};
use crate::model::{AttentionTensor, ConditionalLm, ModelError, VisualTokens};
use crate::vocab::{TokenId, EOS};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("position {0} out of range for {1} input positions")]
    PositionOutOfRange(u32, usize),
    #[error("model does not expose attention")]
    UnsupportedModel,
    #[error("forward failed at step {step}: {source}")]
    Forward {
        step: usize,
        #[source]
        source: ModelError,
    },
    #[error("forward returned no attention at step {0}")]
    MissingAttention(usize),
    #[error("logits at step {step}: {source}")]
    Logits {
        step: usize,
        #[source]
        source: crate::logprob::LogProbError,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean over layers of the per-layer max over heads of the attention mass
/// on `s`. Result lies in [0, 1]; the empty set scores 0 and the full
/// position set scores exactly 1.
pub fn lama_step(att: &AttentionTensor, s: &PositionSet) -> Result<f64, AttentionError> {
    let n = att.positions();
    for p in s.iter() {
        if p as usize >= n {
            return Err(AttentionError::PositionOutOfRange(p, n));
        }
    }
    if att.layers() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for layer in 0..att.layers() {
        let mut best = 0.0f64;
        for head in 0..att.heads() {
            let row = att.row(layer, head);
            let mass: f64 = s.iter().map(|p| row[p as usize]).sum();
            best = best.max(mass);
        }
        total += best;
    }
    Ok(total / att.layers() as f64)
}

/// Per-step attention-concentration scores for one decoded sequence.
#[derive(Debug, Clone)]
pub struct LamaTrace {
    pub sequence_id: String,
    /// Score over the visual positions at each generation step.
    pub visual: Vec<f64>,
    /// Score over the prompt-plus-generated positions at each step.
    pub text: Vec<f64>,
}

/// Greedy-decodes one sequence, recording the score over the visual
/// positions and over the text positions (prompt plus previously generated
/// tokens) at every step.
pub fn lama_trace<M: ConditionalLm>(
    model: &M,
    visual: &VisualTokens,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    sequence_id: impl Into<String>,
) -> Result<LamaTrace, AttentionError> {
    if !model.exposes_attention() {
        return Err(AttentionError::UnsupportedModel);
    }
    let mut trace = LamaTrace {
        sequence_id: sequence_id.into(),
        visual: Vec::new(),
        text: Vec::new(),
    };
    let mut prefix: Vec<TokenId> = Vec::new();
    for step in 0..cfg.max_tokens {
        let out = model
            .forward(visual, prompt, &prefix)
            .map_err(|source| AttentionError::Forward { step, source })?;
        let att = out
            .attention
            .as_ref()
            .ok_or(AttentionError::MissingAttention(step))?;
        let n = att.positions();
        let s_vis = PositionSet::from_members(0..visual.len() as u32);
        let s_text = PositionSet::from_members(visual.len() as u32..n as u32);
        trace.visual.push(lama_step(att, &s_vis)?);
        trace.text.push(lama_step(att, &s_text)?);

        let lp = crate::logprob::log_softmax(&out.logits)
            .map_err(|source| AttentionError::Logits { step, source })?;
        let chosen = TokenId(lp.argmax() as u32);
        prefix.push(chosen);
        if chosen == EOS {
            break;
        }
    }
    Ok(trace)
}

/// Renders traces as CSV: header, one row per (sequence, step), then
/// per-step mean rows with sequence id `MEAN`.
pub fn render_trace_csv(traces: &[LamaTrace]) -> String {
    let mut out = String::from("sequence_id,step,lama_visual,lama_text\n");
    for t in traces {
        for (step, (v, x)) in t.visual.iter().zip(&t.text).enumerate() {
            writeln!(out, "{},{},{:?},{:?}", t.sequence_id, step, v, x).expect("string write");
        }
    }
    let max_len = traces.iter().map(|t| t.visual.len()).max().unwrap_or(0);
    for step in 0..max_len {
        let at_step: Vec<(f64, f64)> = traces
            .iter()
            .filter(|t| step < t.visual.len())
            .map(|t| (t.visual[step], t.text[step]))
            .collect();
        let n = at_step.len() as f64;
        let mean_v: f64 = at_step.iter().map(|p| p.0).sum::<f64>() / n;
        let mean_x: f64 = at_step.iter().map(|p| p.1).sum::<f64>() / n;
        writeln!(out, "MEAN,{},{:?},{:?}", step, mean_v, mean_x).expect("string write");
    }
    out
}

/// Writes [`render_trace_csv`] output to a file.
pub fn emit_trace_csv(traces: &[LamaTrace], path: &Path) -> Result<(), AttentionError> {
    Ok(std::fs::write(path, render_trace_csv(traces))?)
}
