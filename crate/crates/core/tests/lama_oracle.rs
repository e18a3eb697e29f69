//! Attention-diagnostics oracle: a scripted model emits hand-constructed
//! attention tensors whose score over the visual positions follows the
//! closed form 0.9 - 0.01*t, and the recorded trace must reproduce it.
//! The CSV rendering is pinned byte-exact against a committed golden file.

use std::path::Path;

use cwcd_core::attention::{lama_trace, render_trace_csv, AttentionError, LamaTrace};
use cwcd_core::decode::{DecodeConfig, DecodeMode};
use cwcd_core::model::{AttentionTensor, ScriptedLm, ScriptedStep, TabularLm, VisualTokens};
use cwcd_core::vocab::{TokenId, Vocabulary, BOS};

const STEPS: usize = 10;
const VISUAL_POSITIONS: usize = 2;

fn visual_mass(step: usize) -> f64 {
    0.9 - 0.01 * step as f64
}

/// L=2, H=2 tensor at a given step: head 0 puts `v` on the visual
/// positions, head 1 puts `v/2`; remainders spread evenly over the text
/// positions. Per layer the head max over the visual set is `v`, so the
/// layer mean is exactly `v`; over the text set the max is `1 - v/2`.
fn decaying_tensor(step: usize, n: usize) -> AttentionTensor {
    let v = visual_mass(step);
    let text_positions = n - VISUAL_POSITIONS;
    let head_row = |vis: f64| -> Vec<f64> {
        let mut row = vec![vis / VISUAL_POSITIONS as f64; VISUAL_POSITIONS];
        row.extend(std::iter::repeat_n(
            (1.0 - vis) / text_positions as f64,
            text_positions,
        ));
        row
    };
    let layer = vec![head_row(v), head_row(v / 2.0)];
    AttentionTensor::new(vec![layer.clone(), layer])
}

fn oracle_model() -> (ScriptedLm, VisualTokens) {
    let vocab = Vocabulary::new(["tok"])
        .unwrap()
        .with_visual_bins(2)
        .unwrap();
    let tok = vocab.id_of("tok").unwrap();
    let visual = VisualTokens::new(
        vec![vocab.visual_bin(0).unwrap(), vocab.visual_bin(1).unwrap()],
        vec![(0, 0), (1, 0)],
    );
    let mut steps = Vec::with_capacity(STEPS);
    for step in 0..STEPS {
        // input = 2 visual + 1 prompt + step generated so far
        let n = VISUAL_POSITIONS + 1 + step;
        let mut logits = vec![-10.0; vocab.len()];
        if step == STEPS - 1 {
            logits[cwcd_core::vocab::EOS.index()] = 10.0;
        } else {
            logits[tok.index()] = 10.0;
        }
        steps.push(ScriptedStep {
            logits,
            attention: Some(decaying_tensor(step, n)),
        });
    }
    (ScriptedLm::new(vocab, steps), visual)
}

fn oracle_trace(id: &str) -> LamaTrace {
    let (model, visual) = oracle_model();
    lama_trace(
        &model,
        &visual,
        &[BOS],
        &DecodeConfig {
            mode: DecodeMode::Greedy,
            max_tokens: 32,
            ..DecodeConfig::default()
        },
        id,
    )
    .unwrap()
}

#[test]
fn trace_matches_closed_form() {
    let trace = oracle_trace("oracle");
    assert_eq!(trace.visual.len(), STEPS);
    for (t, (&vis, &text)) in trace.visual.iter().zip(&trace.text).enumerate() {
        let v = visual_mass(t);
        assert!((vis - v).abs() < 1e-9, "step {t}: visual {vis} vs {v}");
        assert!(
            (text - (1.0 - v / 2.0)).abs() < 1e-9,
            "step {t}: text {text} vs {}",
            1.0 - v / 2.0
        );
    }
}

#[test]
fn single_step_trace_has_length_one() {
    let (model, visual) = oracle_model();
    let trace = lama_trace(
        &model,
        &visual,
        &[BOS],
        &DecodeConfig {
            mode: DecodeMode::Greedy,
            max_tokens: 1,
            ..DecodeConfig::default()
        },
        "one",
    )
    .unwrap();
    assert_eq!(trace.visual.len(), 1);
    assert_eq!(trace.text.len(), 1);
}

#[test]
fn attention_less_model_is_rejected() {
    let text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/t1.tlm"),
    )
    .unwrap();
    let tabular = TabularLm::from_text(&text).unwrap();
    let visual = tabular.feature_tokens("A-present").unwrap();
    let err = lama_trace(&tabular, &visual, &[BOS], &DecodeConfig::default(), "t1").unwrap_err();
    assert!(matches!(err, AttentionError::UnsupportedModel));
}

#[test]
fn golden_csv_is_byte_exact() {
    let traces = vec![oracle_trace("seq0"), oracle_trace("seq1")];
    let rendered = render_trace_csv(&traces);
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/lama_golden.csv");
    if std::env::var_os("REGEN_GOLDEN").is_some() {
        std::fs::write(&golden_path, &rendered).unwrap();
    }
    let golden = std::fs::read_to_string(&golden_path).unwrap();
    assert_eq!(
        rendered, golden,
        "CSV drifted from the committed golden file"
    );
}

#[test]
fn chosen_tokens_follow_script() {
    // the scripted logits drive the greedy path inside lama_trace
    let (model, visual) = oracle_model();
    use cwcd_core::model::ConditionalLm;
    let out = model.forward(&visual, &[BOS], &[]).unwrap();
    let argmax = out
        .logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert_eq!(TokenId(argmax as u32), model.vocab().id_of("tok").unwrap());
}
