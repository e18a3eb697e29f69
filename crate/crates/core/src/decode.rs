//! Contrastive scoring, plausibility subselection, and the decode loops.
//!
//! The dual-stream decoder contrasts a base forward pass (full image) with a
//! masked forward pass (category regions blacked out). Per step the next
//! token scores as `(1+alpha)*base - alpha*masked` in log space, restricted
//! to the plausibility-subselected vocabulary computed from the base stream,
//! and the argmax is appended to both streams' prefixes.
//!
//! The plausibility constraint is applied in probability space,
//! `P(t) >= beta * max P`, which keeps the argmax token a member for every
//! beta in [0, 1]. A literal log-space reading of the threshold would
//! exclude even the argmax once log-probabilities go negative.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::logprob::{log_softmax, Distribution, LogProbError, LogProbVector};
use crate::model::{ConditionalLm, ModelError, VisualTokens};
use crate::vocab::{TokenId, TokenSequence, EOS};

/// How many log-probabilities per stream a trace step keeps.
const TRACE_TOP_K: usize = 8;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("config: {0}")]
    Config(String),
    #[error("model forward failed at step {step}: {source}")]
    Forward {
        step: usize,
        #[source]
        source: ModelError,
    },
    #[error("logits at step {step}: {source}")]
    Logits {
        step: usize,
        #[source]
        source: LogProbError,
    },
    #[error("empty vocabulary subselection (unreachable via the plausibility mask)")]
    DegenerateSubselection,
    #[error("stream desynchronization: base prefix {0} vs masked prefix {1}")]
    StreamDesync(usize, usize),
}

/// Decoding strategy. `Greedy` and `Cd` decode the whole report in one
/// stream; `Cw` and `Cwcd` decode per category. `Cd` and `Cwcd` contrast
/// against a masked stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Cd,
    Cw,
    Cwcd,
}

impl DecodeMode {
    pub fn is_contrastive(self) -> bool {
        matches!(self, DecodeMode::Cd | DecodeMode::Cwcd)
    }

    pub fn is_category_wise(self) -> bool {
        matches!(self, DecodeMode::Cw | DecodeMode::Cwcd)
    }

    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Cd => "cd",
            DecodeMode::Cw => "cw",
            DecodeMode::Cwcd => "cwcd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "greedy" => Some(DecodeMode::Greedy),
            "cd" => Some(DecodeMode::Cd),
            "cw" => Some(DecodeMode::Cw),
            "cwcd" => Some(DecodeMode::Cwcd),
            _ => None,
        }
    }
}

/// Which boxes feed the masked stream: none, all boxes, or the decode
/// category's own boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VpMode {
    None,
    All,
    Category,
}

impl VpMode {
    pub fn name(self) -> &'static str {
        match self {
            VpMode::None => "none",
            VpMode::All => "all",
            VpMode::Category => "category",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(VpMode::None),
            "all" => Some(VpMode::All),
            "category" => Some(VpMode::Category),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub max_tokens: usize,
    pub mode: DecodeMode,
    pub vp_mode: VpMode,
    pub subselection_enabled: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            max_tokens: 128,
            mode: DecodeMode::Cwcd,
            vp_mode: VpMode::Category,
            subselection_enabled: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(0.0..=1.0).contains(&self.beta) || self.beta.is_nan() {
            return Err(DecodeError::Config(format!(
                "beta must be in [0, 1], got {}",
                self.beta
            )));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(DecodeError::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.max_tokens == 0 {
            return Err(DecodeError::Config("max_tokens must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Sorted set of token ids (or, for attention use, input positions).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PositionSet {
    members: BTreeSet<u32>,
}

impl PositionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn full(n: usize) -> Self {
        Self {
            members: (0..n as u32).collect(),
        }
    }

    pub fn from_members<I: IntoIterator<Item = u32>>(members: I) -> Self {
        Self {
            members: members.into_iter().collect(),
        }
    }

    pub fn contains(&self, index: u32) -> bool {
        self.members.contains(&index)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.members.iter().copied()
    }

    pub fn is_subset(&self, other: &PositionSet) -> bool {
        self.members.is_subset(&other.members)
    }
}

impl FromIterator<u32> for PositionSet {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        Self::from_members(iter)
    }
}

/// Tokens whose probability reaches `beta` times the maximum probability of
/// the step, computed on the base stream. At beta = 0 every positive-mass
/// token qualifies; at beta = 1 exactly the argmax ties remain. The argmax
/// is always a member, so the result is never empty.
pub fn plausibility_mask(base: &LogProbVector, beta: f64) -> Result<PositionSet, DecodeError> {
    if !(0.0..=1.0).contains(&beta) || beta.is_nan() {
        return Err(DecodeError::Config(format!(
            "beta must be in [0, 1], got {beta}"
        )));
    }
    let max = base
        .values()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let members = base
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &lp)| {
            if lp == f64::NEG_INFINITY {
                return false;
            }
            // P(t)/maxP >= beta, evaluated as exp(lp - max)
            (lp - max).exp() >= beta
        })
        .map(|(i, _)| i as u32)
        .collect();
    Ok(PositionSet { members })
}

/// The contrastive objective: score_t = (1+alpha)*base_t - alpha*masked_t
/// for members of `v_sub`, -inf elsewhere; returns the softmax, normalized
/// over `v_sub` only (excluded tokens carry exactly zero mass).
pub fn contrastive_scores(
    base: &LogProbVector,
    masked: &LogProbVector,
    alpha: f64,
    v_sub: &PositionSet,
) -> Result<Distribution, DecodeError> {
    if v_sub.is_empty() {
        return Err(DecodeError::DegenerateSubselection);
    }
    debug_assert_eq!(base.len(), masked.len());
    let scores: Vec<(usize, f64)> = v_sub
        .iter()
        .map(|i| {
            let i = i as usize;
            let s = (1.0 + alpha) * base.values()[i] - alpha * masked.values()[i];
            (i, s)
        })
        .collect();
    let max = scores
        .iter()
        .map(|&(_, s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut values = vec![0.0; base.len()];
    let mut sum = 0.0;
    for &(i, s) in &scores {
        let e = (s - max).exp();
        values[i] = e;
        sum += e;
    }
    for v in &mut values {
        *v /= sum;
    }
    Distribution::new(values).map_err(|e| DecodeError::Logits { step: 0, source: e })
}

/// Argmax token; ties break to the lowest id.
pub fn greedy_select(dist: &Distribution) -> TokenId {
    let mut best = 0usize;
    for (i, &p) in dist.values().iter().enumerate().skip(1) {
        if p > dist.values()[best] {
            best = i;
        }
    }
    TokenId(best as u32)
}

/// One decode step's diagnostics: the chosen token, sparse log-probs of both
/// streams (top-k plus the chosen token), the subselection size and the
/// contrastive score of the chosen token.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub chosen: TokenId,
    pub base_top: Vec<(TokenId, f64)>,
    pub masked_top: Option<Vec<(TokenId, f64)>>,
    pub v_sub_size: usize,
    pub chosen_score: f64,
}

/// Per-step records for one decoded sequence.
#[derive(Debug, Clone, Default)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn mean_v_sub(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.v_sub_size as f64).sum::<f64>() / self.steps.len() as f64
    }
}

fn sparse_top(lp: &LogProbVector, chosen: TokenId) -> Vec<(TokenId, f64)> {
    let mut indexed: Vec<(usize, f64)> = lp.values().iter().copied().enumerate().collect();
    indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut top: Vec<(TokenId, f64)> = indexed
        .into_iter()
        .take(TRACE_TOP_K)
        .map(|(i, v)| (TokenId(i as u32), v))
        .collect();
    if !top.iter().any(|&(t, _)| t == chosen) {
        top.push((chosen, lp.values()[chosen.index()]));
    }
    top
}

/// Single-stream greedy decoding: repeated forward, log-softmax, argmax.
/// Stops at EOS or after `max_tokens` emissions; the returned sequence
/// includes the terminating EOS when one was emitted.
pub fn decode_greedy<M: ConditionalLm>(
    model: &M,
    visual: &VisualTokens,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<(TokenSequence, DecodeTrace), DecodeError> {
    cfg.validate()?;
    let mut prefix: TokenSequence = Vec::new();
    let mut trace = DecodeTrace::default();
    for step in 0..cfg.max_tokens {
        let out = model
            .forward(visual, prompt, &prefix)
            .map_err(|source| DecodeError::Forward { step, source })?;
        let lp = log_softmax(&out.logits).map_err(|source| DecodeError::Logits { step, source })?;
        let dist = lp.to_distribution();
        let chosen = greedy_select(&dist);
        trace.steps.push(StepRecord {
            chosen,
            base_top: sparse_top(&lp, chosen),
            masked_top: None,
            v_sub_size: lp.len(),
            chosen_score: dist.values()[chosen.index()],
        });
        prefix.push(chosen);
        if chosen == EOS {
            break;
        }
    }
    Ok((prefix, trace))
}

/// Dual-stream contrastive decoding. Per step: forward both streams,
/// subselect on the base stream (full vocabulary when subselection is off),
/// contrast, pick greedily, and append the token to both prefixes.
pub fn decode_contrastive<M: ConditionalLm>(
    model: &M,
    visual_base: &VisualTokens,
    visual_masked: &VisualTokens,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<(TokenSequence, DecodeTrace), DecodeError> {
    cfg.validate()?;
    let mut base_prefix: TokenSequence = Vec::new();
    let mut masked_prefix: TokenSequence = Vec::new();
    let mut trace = DecodeTrace::default();
    for step in 0..cfg.max_tokens {
        if base_prefix.len() != masked_prefix.len() {
            return Err(DecodeError::StreamDesync(
                base_prefix.len(),
                masked_prefix.len(),
            ));
        }
        let out_base = model
            .forward(visual_base, prompt, &base_prefix)
            .map_err(|source| DecodeError::Forward { step, source })?;
        let out_masked = model
            .forward(visual_masked, prompt, &masked_prefix)
            .map_err(|source| DecodeError::Forward { step, source })?;
        let lp_base =
            log_softmax(&out_base.logits).map_err(|source| DecodeError::Logits { step, source })?;
        let lp_masked = log_softmax(&out_masked.logits)
            .map_err(|source| DecodeError::Logits { step, source })?;
        let v_sub = if cfg.subselection_enabled {
            plausibility_mask(&lp_base, cfg.beta)?
        } else {
            PositionSet::full(lp_base.len())
        };
        let dist = contrastive_scores(&lp_base, &lp_masked, cfg.alpha, &v_sub)?;
        let chosen = greedy_select(&dist);
        debug_assert!(v_sub.contains(chosen.0));
        trace.steps.push(StepRecord {
            chosen,
            base_top: sparse_top(&lp_base, chosen),
            masked_top: Some(sparse_top(&lp_masked, chosen)),
            v_sub_size: v_sub.len(),
            chosen_score: dist.values()[chosen.index()],
        });
        base_prefix.push(chosen);
        masked_prefix.push(chosen);
        if chosen == EOS {
            break;
        }
    }
    Ok((base_prefix, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScriptedLm;
    use crate::vocab::{Vocabulary, BOS};

    fn lp(probs: &[f64]) -> LogProbVector {
        LogProbVector::from_probs(probs).unwrap()
    }

    #[test]
    fn plausibility_hand_case() {
        let v = plausibility_mask(&lp(&[0.5, 0.3, 0.15, 0.05]), 0.5).unwrap();
        assert_eq!(v.iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn plausibility_beta_zero_keeps_positive_mass() {
        let v = plausibility_mask(&lp(&[0.5, 0.3, 0.15, 0.05]), 0.0).unwrap();
        assert_eq!(v.len(), 4);
        // a genuinely zero-mass token stays out
        let values = vec![0.5f64.ln(), 0.5f64.ln(), f64::NEG_INFINITY];
        let lpv = LogProbVector::new(values).unwrap();
        let v = plausibility_mask(&lpv, 0.0).unwrap();
        assert_eq!(v.iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn plausibility_beta_one_keeps_argmax_ties() {
        let values = vec![0.4f64.ln(), 0.4f64.ln(), 0.2f64.ln()];
        let lpv = LogProbVector::new(values).unwrap();
        let v = plausibility_mask(&lpv, 1.0).unwrap();
        assert_eq!(v.iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn plausibility_rejects_bad_beta() {
        assert!(plausibility_mask(&lp(&[1.0]), -0.1).is_err());
        assert!(plausibility_mask(&lp(&[1.0]), 1.1).is_err());
    }

    #[test]
    fn contrastive_alpha_zero_is_base() {
        let base = lp(&[0.6, 0.4]);
        let masked = lp(&[0.1, 0.9]);
        let dist = contrastive_scores(&base, &masked, 0.0, &PositionSet::full(2)).unwrap();
        assert!((dist.values()[0] - 0.6).abs() < 1e-12);
        assert!((dist.values()[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn contrastive_identical_streams_cancel() {
        let base = lp(&[0.25, 0.75]);
        let dist = contrastive_scores(&base, &base, 2.5, &PositionSet::full(2)).unwrap();
        assert!((dist.values()[0] - 0.25).abs() < 1e-9);
        assert!((dist.values()[1] - 0.75).abs() < 1e-9);
    }

    #[test]
    fn contrastive_hand_case() {
        let base = lp(&[0.6, 0.4]);
        let masked = lp(&[0.4, 0.6]);
        let dist = contrastive_scores(&base, &masked, 1.0, &PositionSet::full(2)).unwrap();
        assert!(
            (dist.values()[0] - 0.7714).abs() < 1e-4,
            "{}",
            dist.values()[0]
        );
        assert!((dist.values()[1] - 0.2286).abs() < 1e-4);
        assert_eq!(greedy_select(&dist), TokenId(0));
    }

    #[test]
    fn contrastive_excluded_tokens_have_zero_mass() {
        let base = lp(&[0.5, 0.3, 0.2]);
        let masked = lp(&[0.2, 0.3, 0.5]);
        let v_sub = PositionSet::from_members([0u32, 1]);
        let dist = contrastive_scores(&base, &masked, 1.0, &v_sub).unwrap();
        assert_eq!(dist.values()[2], 0.0);
        let sum: f64 = dist.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn contrastive_empty_subselection_errors() {
        let base = lp(&[1.0]);
        assert!(matches!(
            contrastive_scores(&base, &base, 1.0, &PositionSet::new()),
            Err(DecodeError::DegenerateSubselection)
        ));
    }

    #[test]
    fn greedy_select_tie_breaks_low() {
        let dist = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(greedy_select(&dist), TokenId(0));
        let dist = Distribution::new(vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(greedy_select(&dist), TokenId(1));
    }

    #[test]
    fn decode_greedy_stops_at_eos_and_budget() {
        let vocab = Vocabulary::new(["a"]).unwrap();
        let a = vocab.id_of("a").unwrap();
        // always prefers "a": budget 1 cuts it off
        let lm = ScriptedLm::from_logits(vocab.clone(), vec![vec![0.0, 0.0, 0.0, 9.0]; 4]);
        let cfg = DecodeConfig {
            max_tokens: 1,
            mode: DecodeMode::Greedy,
            ..DecodeConfig::default()
        };
        let (seq, trace) =
            decode_greedy(&lm, &VisualTokens::new(vec![], vec![]), &[BOS], &cfg).unwrap();
        assert_eq!(seq, vec![a]);
        assert_eq!(trace.len(), 1);

        // immediate EOS ends with an empty body
        let lm = ScriptedLm::from_logits(vocab.clone(), vec![vec![0.0, 9.0, 0.0, 0.0]; 2]);
        let cfg = DecodeConfig {
            max_tokens: 8,
            mode: DecodeMode::Greedy,
            ..DecodeConfig::default()
        };
        let (seq, _) =
            decode_greedy(&lm, &VisualTokens::new(vec![], vec![]), &[BOS], &cfg).unwrap();
        assert_eq!(seq, vec![EOS]);
    }

    #[test]
    fn contrastive_identical_visuals_match_greedy() {
        let vocab = Vocabulary::new(["a", "b"]).unwrap();
        let steps = vec![
            vec![0.0, -1.0, -9.0, 2.0, 1.0],
            vec![0.0, -1.0, -9.0, 0.5, 2.0],
            vec![0.0, 5.0, -9.0, 0.0, 0.0],
        ];
        let lm = ScriptedLm::from_logits(vocab, steps);
        let vis = VisualTokens::new(vec![], vec![]);
        let cfg = DecodeConfig::default();
        let (g, _) = decode_greedy(&lm, &vis, &[BOS], &cfg).unwrap();
        let (c, trace) = decode_contrastive(&lm, &vis, &vis, &[BOS], &cfg).unwrap();
        assert_eq!(g, c);
        for s in &trace.steps {
            assert!(s.v_sub_size >= 1);
        }
    }

    #[test]
    fn trace_chosen_has_contrastive_score() {
        let vocab = Vocabulary::new(["a", "b"]).unwrap();
        let lm = ScriptedLm::from_logits(vocab, vec![vec![0.0, 3.0, -9.0, 1.0, 0.0]]);
        let vis = VisualTokens::new(vec![], vec![]);
        let cfg = DecodeConfig {
            max_tokens: 1,
            ..DecodeConfig::default()
        };
        let (_, trace) = decode_contrastive(&lm, &vis, &vis, &[BOS], &cfg).unwrap();
        assert!(trace.steps[0].chosen_score > 0.0);
        assert!(trace.steps[0].masked_top.is_some());
    }
}
