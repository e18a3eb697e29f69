//! Acceptance suite: one test per criterion, each printing a pass line.
//!
//! Decode-side checks run against independent reimplementations that work
//! straight off probability arithmetic and serialized table documents —
//! never through the engine's scoring or decoding code. Expected benchmark
//! rates were computed by the oracle first and frozen here.
//!
//! Run with `cargo test -p cwcd-cli --test acceptance -- --nocapture` to
//! see the per-criterion lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cwcd_core::attention::{lama_step, lama_trace, render_trace_csv};
use cwcd_core::bench::{
    self, beta_sweep, fit_models, gen_corpus, run_bench, table_grid, BenchSpec, BETA_SWEEP,
};
use cwcd_core::decode::{
    contrastive_scores, decode_contrastive, decode_greedy, greedy_select, plausibility_mask,
    DecodeConfig, DecodeMode, PositionSet, VpMode,
};
use cwcd_core::image::{mask_image, BoundingBox, GrayImage};
use cwcd_core::logprob::LogProbVector;
use cwcd_core::metrics::{bleu, label_prf, rouge_l, tokenize};
use cwcd_core::model::{
    apply_lora, AttentionTensor, CategoryModels, ConditionalLm, LoraDelta, Matrix,
    MissingAdapterPolicy, ScriptedLm, ScriptedStep, TabularLm, ToyTransformer, VisualTokens,
};
use cwcd_core::report::{parse_structured, serialize_structured, Category, StructuredReport};
use cwcd_core::rng::SplitMix64;
use cwcd_core::vocab::{TokenId, Vocabulary, BOS};

const PROB_FLOOR: f64 = 1e-12;

fn budget(name: &str, start: Instant, limit: Duration) {
    let elapsed = start.elapsed();
    assert!(
        elapsed <= limit,
        "{name}: runtime {elapsed:?} exceeded budget {limit:?}"
    );
}

fn pass(line: &str) {
    println!("[PASS] {line}");
}

// =======================================================================
// Independent simulator: parses serialized table documents and decodes by
// plain probability arithmetic. No engine scoring/decoding code.
// =======================================================================

struct SimTables {
    vocab: Vec<String>,
    order: usize,
    rows: BTreeMap<(String, Vec<String>), Vec<f64>>,
    features: Vec<String>,
}

fn parse_sim_tables(text: &str) -> SimTables {
    let mut vocab: Vec<String> = Vec::new();
    let mut order = 0usize;
    let mut rows = BTreeMap::new();
    let mut features = Vec::new();
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("k=") {
            order = v.parse().unwrap();
        } else if let Some(v) = line.strip_prefix("vocab=") {
            vocab = v.split(' ').map(str::to_string).collect();
        } else if let Some(v) = line.strip_prefix("features=") {
            features = v.split('\t').map(str::to_string).collect();
        } else if line.starts_with("kind=") || line.starts_with("smoothing=") || line.is_empty() {
            continue;
        } else {
            let (feature, rest) = line.split_once(" | ").unwrap();
            let (ctx, entries) = rest.split_once(" -> ").unwrap();
            let ctx_words: Vec<String> = if ctx.is_empty() {
                Vec::new()
            } else {
                ctx.split(' ').map(str::to_string).collect()
            };
            let mut row = vec![0.0; vocab.len()];
            for entry in entries.split(", ") {
                let (token, prob) = entry.rsplit_once(':').unwrap();
                let idx = vocab.iter().position(|w| w == token).unwrap();
                row[idx] = prob.parse().unwrap();
            }
            rows.insert((feature.to_string(), ctx_words), row);
        }
    }
    SimTables {
        vocab,
        order,
        rows,
        features,
    }
}

impl SimTables {
    fn eos(&self) -> usize {
        self.vocab.iter().position(|w| w == "<eos>").unwrap()
    }

    fn row(&self, feature: &str, context: &[String]) -> Vec<f64> {
        for name in [feature, "*"] {
            let max_len = self.order.min(context.len());
            for len in (0..=max_len).rev() {
                let suffix = context[context.len() - len..].to_vec();
                if let Some(row) = self.rows.get(&(name.to_string(), suffix)) {
                    return row.clone();
                }
            }
        }
        vec![1.0 / self.vocab.len() as f64; self.vocab.len()]
    }
}

fn sim_argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn sim_greedy(tables: &SimTables, feature: &str, max_tokens: usize) -> Vec<usize> {
    let mut context = vec!["<bos>".to_string()];
    let mut out = Vec::new();
    for _ in 0..max_tokens {
        let chosen = sim_argmax(&tables.row(feature, &context));
        out.push(chosen);
        context.push(tables.vocab[chosen].clone());
        if chosen == tables.eos() {
            break;
        }
    }
    out
}

fn sim_contrastive(
    tables: &SimTables,
    base_feature: &str,
    masked_feature: &str,
    cfg: &DecodeConfig,
) -> Vec<usize> {
    let mut context = vec!["<bos>".to_string()];
    let mut out = Vec::new();
    for _ in 0..cfg.max_tokens {
        let base: Vec<f64> = tables
            .row(base_feature, &context)
            .iter()
            .map(|&p| p.max(PROB_FLOOR))
            .collect();
        let masked: Vec<f64> = tables
            .row(masked_feature, &context)
            .iter()
            .map(|&p| p.max(PROB_FLOOR))
            .collect();
        let max_p = base.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scores: Vec<f64> = base
            .iter()
            .zip(&masked)
            .map(|(&pb, &pm)| {
                if cfg.subselection_enabled && pb < cfg.beta * max_p {
                    f64::NEG_INFINITY
                } else {
                    pb.powf(1.0 + cfg.alpha) / pm.powf(cfg.alpha)
                }
            })
            .collect();
        let chosen = sim_argmax(&scores);
        out.push(chosen);
        context.push(tables.vocab[chosen].clone());
        if chosen == tables.eos() {
            break;
        }
    }
    out
}

fn random_distribution(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.next_f64() + 0.01).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn random_table_text(rng: &mut SplitMix64) -> String {
    let n_words = 2 + rng.next_below(6) as usize;
    let words: Vec<String> = (0..n_words).map(|i| format!("w{i}")).collect();
    let n_features = 1 + rng.next_below(3) as usize;
    let features: Vec<String> = (0..n_features).map(|i| format!("f{i}")).collect();
    let vocab_line = {
        let mut all = vec![
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<pad>".to_string(),
        ];
        all.extend(words.iter().cloned());
        all.extend(features.iter().map(|f| format!("<img:{f}>")));
        all.join(" ")
    };
    let mut text = format!(
        "kind=tabular\nk=1\nsmoothing=0\nfeatures={}\nvocab={}\n",
        features.join("\t"),
        vocab_line
    );
    let mut contexts = vec!["<bos>".to_string()];
    contexts.extend(words.iter().cloned());
    let support: Vec<String> = std::iter::once("<eos>".to_string())
        .chain(words.iter().cloned())
        .collect();
    let emit = |feature: &str, ctx: &str, rng: &mut SplitMix64, text: &mut String| {
        let raw: Vec<f64> = support.iter().map(|_| rng.next_f64() + 0.05).collect();
        let sum: f64 = raw.iter().sum();
        let entries: Vec<String> = support
            .iter()
            .zip(&raw)
            .map(|(w, &v)| format!("{w}:{:?}", v / sum))
            .collect();
        text.push_str(&format!("{feature} | {ctx} -> {}\n", entries.join(", ")));
    };
    for f in &features {
        for ctx in &contexts {
            emit(f, ctx, rng, &mut text);
        }
    }
    for ctx in &contexts {
        emit("*", ctx, rng, &mut text);
    }
    text
}

// =======================================================================
// Criterion 1: reduction equivalences
// =======================================================================

#[test]
fn criterion_01_reduction_equivalences() {
    let start = Instant::now();
    let mut rng = SplitMix64::new(0xacce5501);
    for trial in 0..100 {
        let text = random_table_text(&mut rng);
        let engine = TabularLm::from_text(&text).unwrap();
        let features: Vec<String> = engine.trained_features().map(str::to_string).collect();
        let base_f = &features[rng.next_below(features.len() as u64) as usize];
        let other_f = &features[rng.next_below(features.len() as u64) as usize];
        let visual_base = engine.feature_tokens(base_f).unwrap();
        let visual_other = engine.feature_tokens(other_f).unwrap();

        let greedy_cfg = DecodeConfig {
            mode: DecodeMode::Greedy,
            max_tokens: 24,
            ..DecodeConfig::default()
        };
        let (g, _) = decode_greedy(&engine, &visual_base, &[BOS], &greedy_cfg).unwrap();

        // (a) alpha = 0, subselection off, arbitrary masked stream
        let cfg_a = DecodeConfig {
            alpha: 0.0,
            subselection_enabled: false,
            max_tokens: 24,
            ..DecodeConfig::default()
        };
        let (a, _) =
            decode_contrastive(&engine, &visual_base, &visual_other, &[BOS], &cfg_a).unwrap();
        assert_eq!(g, a, "trial {trial}: alpha=0 reduction failed");

        // (b) masked image = base image across the (alpha, beta) grid
        for &alpha in &[0.5, 1.0, 2.0] {
            for &beta in &[0.0, 0.5, 1.0] {
                let cfg_b = DecodeConfig {
                    alpha,
                    beta,
                    max_tokens: 24,
                    ..DecodeConfig::default()
                };
                let (b, _) =
                    decode_contrastive(&engine, &visual_base, &visual_base, &[BOS], &cfg_b)
                        .unwrap();
                assert_eq!(
                    g, b,
                    "trial {trial}: identical-stream reduction failed (alpha={alpha}, beta={beta})"
                );
            }
        }
    }
    budget("criterion 1", start, Duration::from_secs(10));
    pass("criterion 1: reduction equivalences token-exact over 100 random table models");
}

// =======================================================================
// Criterion 2: contrastive arithmetic oracle
// =======================================================================

#[test]
fn criterion_02_contrastive_arithmetic_oracle() {
    let start = Instant::now();
    let mut rng = SplitMix64::new(0xacce5502);
    for trial in 0..1000 {
        let n = 2 + rng.next_below(30) as usize;
        let base = random_distribution(&mut rng, n);
        let masked = random_distribution(&mut rng, n);
        let alpha = rng.next_f64() * 4.0;
        let beta = rng.next_f64();

        let lp_base = LogProbVector::from_probs(&base).unwrap();
        let lp_masked = LogProbVector::from_probs(&masked).unwrap();
        let v_sub = plausibility_mask(&lp_base, beta).unwrap();
        let engine = contrastive_scores(&lp_base, &lp_masked, alpha, &v_sub).unwrap();

        // ratio form p_b^(1+alpha) / p_m^alpha normalized over V_sub
        let max_p = base.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = base
            .iter()
            .zip(&masked)
            .map(|(&pb, &pm)| {
                if pb / max_p >= beta {
                    pb.powf(1.0 + alpha) / pm.powf(alpha)
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for (i, (&e, &r)) in engine.values().iter().zip(&raw).enumerate() {
            let expected = r / total;
            assert!(
                (e - expected).abs() < 1e-9,
                "trial {trial} index {i}: engine {e} vs oracle {expected}"
            );
        }
    }

    // the hand case
    let base = LogProbVector::from_probs(&[0.6, 0.4]).unwrap();
    let masked = LogProbVector::from_probs(&[0.4, 0.6]).unwrap();
    let dist = contrastive_scores(&base, &masked, 1.0, &PositionSet::full(2)).unwrap();
    assert!((dist.values()[0] - 0.7714).abs() < 1e-4);
    assert!((dist.values()[1] - 0.2286).abs() < 1e-4);
    assert_eq!(greedy_select(&dist), TokenId(0));

    budget("criterion 2", start, Duration::from_secs(5));
    pass("criterion 2: contrastive scores match the ratio-form oracle on 1000 tuples (<=1e-9)");
}

// =======================================================================
// Criterion 3: plausibility constraint
// =======================================================================

#[test]
fn criterion_03_plausibility_constraint() {
    let start = Instant::now();
    let mut rng = SplitMix64::new(0xacce5503);
    let betas = [0.0, 0.25, 0.5, 0.75, 1.0];
    for _ in 0..10_000 {
        let n = 2 + rng.next_below(30) as usize;
        let probs = random_distribution(&mut rng, n);
        let lp = LogProbVector::from_probs(&probs).unwrap();
        let argmax = lp.argmax() as u32;
        let max_p = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut previous = usize::MAX;
        for &beta in &betas {
            let v_sub = plausibility_mask(&lp, beta).unwrap();
            assert!(v_sub.contains(argmax), "argmax dropped at beta={beta}");
            assert!(v_sub.len() <= previous, "|V_sub| grew in beta");
            previous = v_sub.len();
            if beta == 0.0 {
                assert_eq!(v_sub.len(), n, "beta=0 must keep all positive-mass tokens");
            }
            if beta == 1.0 {
                let ties: Vec<u32> = probs
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p == max_p)
                    .map(|(i, _)| i as u32)
                    .collect();
                assert_eq!(v_sub.iter().collect::<Vec<_>>(), ties);
            }
        }
    }
    // exact ties at beta=1 and zero-mass exclusion at beta=0
    let tied = LogProbVector::new(vec![0.4f64.ln(), 0.4f64.ln(), 0.2f64.ln()]).unwrap();
    assert_eq!(
        plausibility_mask(&tied, 1.0)
            .unwrap()
            .iter()
            .collect::<Vec<_>>(),
        vec![0, 1]
    );
    let with_zero = LogProbVector::new(vec![0.5f64.ln(), 0.5f64.ln(), f64::NEG_INFINITY]).unwrap();
    assert_eq!(plausibility_mask(&with_zero, 0.0).unwrap().len(), 2);

    budget("criterion 3", start, Duration::from_secs(5));
    pass("criterion 3: plausibility constraint verified on 10000 random distributions");
}

// =======================================================================
// Criterion 4: layer-averaged max attention
// =======================================================================

fn random_attention(
    rng: &mut SplitMix64,
    layers: usize,
    heads: usize,
    n: usize,
) -> AttentionTensor {
    let rows = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| random_distribution(rng, n))
                .collect::<Vec<_>>()
        })
        .collect();
    AttentionTensor::new(rows)
}

#[test]
fn criterion_04_lama() {
    let start = Instant::now();
    let mut rng = SplitMix64::new(0xacce5504);
    for _ in 0..1000 {
        let layers = 1 + rng.next_below(3) as usize;
        let heads = 1 + rng.next_below(3) as usize;
        let n = 2 + rng.next_below(14) as usize;
        let att = random_attention(&mut rng, layers, heads, n);
        let full = lama_step(&att, &PositionSet::full(n)).unwrap();
        assert!((full - 1.0).abs() < 1e-9, "full-set score {full}");
        // monotone under adding a position
        let k = rng.next_below(n as u64) as u32;
        let small = PositionSet::from_members((0..n as u32).filter(|&p| p < k));
        let bigger = PositionSet::from_members((0..n as u32).filter(|&p| p <= k));
        let a = lama_step(&att, &small).unwrap();
        let b = lama_step(&att, &bigger).unwrap();
        assert!(a <= b + 1e-12, "monotonicity violated: {a} > {b}");
        assert!((0.0..=1.0 + 1e-9).contains(&a));
    }

    // constructed decaying oracle reproduces its closed form
    let vocab = Vocabulary::new(["tok"])
        .unwrap()
        .with_visual_bins(2)
        .unwrap();
    let tok = vocab.id_of("tok").unwrap();
    let visual = VisualTokens::new(
        vec![vocab.visual_bin(0).unwrap(), vocab.visual_bin(1).unwrap()],
        vec![(0, 0), (1, 0)],
    );
    let steps: Vec<ScriptedStep> = (0..10)
        .map(|step| {
            let v: f64 = 0.9 - 0.01 * step as f64;
            let n = 3 + step;
            let head_row = |vis: f64| {
                let mut row = vec![vis / 2.0; 2];
                row.extend(std::iter::repeat_n((1.0 - vis) / (n - 2) as f64, n - 2));
                row
            };
            let layer = vec![head_row(v), head_row(v / 2.0)];
            let mut logits = vec![-10.0; vocab.len()];
            if step == 9 {
                logits[cwcd_core::vocab::EOS.index()] = 10.0;
            } else {
                logits[tok.index()] = 10.0;
            }
            ScriptedStep {
                logits,
                attention: Some(AttentionTensor::new(vec![layer.clone(), layer])),
            }
        })
        .collect();
    let model = ScriptedLm::new(vocab, steps);
    let trace = lama_trace(
        &model,
        &visual,
        &[BOS],
        &DecodeConfig {
            mode: DecodeMode::Greedy,
            max_tokens: 32,
            ..DecodeConfig::default()
        },
        "seq0",
    )
    .unwrap();
    for (t, &v) in trace.visual.iter().enumerate() {
        let expected = 0.9 - 0.01 * t as f64;
        assert!((v - expected).abs() < 1e-9, "step {t}: {v} vs {expected}");
    }

    // golden CSV byte-exact
    let mut second = trace.clone();
    second.sequence_id = "seq1".to_string();
    let rendered = render_trace_csv(&[trace, second]);
    let golden_path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/lama_golden.csv");
    let golden = std::fs::read_to_string(golden_path).unwrap();
    assert_eq!(rendered, golden, "golden CSV drifted");

    budget("criterion 4", start, Duration::from_secs(5));
    pass("criterion 4: attention score verified on 1000 random tensors and the decaying oracle");
}

// =======================================================================
// Criterion 5: fixture decode oracle across the config grid
// =======================================================================

fn fixture_text(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name);
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn criterion_05_fixture_decode_oracle() {
    let start = Instant::now();
    for name in ["t1.tlm", "t2.tlm"] {
        let text = fixture_text(name);
        let engine = TabularLm::from_text(&text).unwrap();
        let sim = parse_sim_tables(&text);
        for base_feature in &sim.features {
            let visual_base = engine.feature_tokens(base_feature).unwrap();
            let greedy_cfg = DecodeConfig {
                mode: DecodeMode::Greedy,
                max_tokens: 16,
                ..DecodeConfig::default()
            };
            let (g, _) = decode_greedy(&engine, &visual_base, &[BOS], &greedy_cfg).unwrap();
            assert_eq!(
                g.iter().map(|t| t.index()).collect::<Vec<_>>(),
                sim_greedy(&sim, base_feature, 16),
                "{name}: greedy mismatch for {base_feature}"
            );
            for masked_feature in &sim.features {
                let visual_masked = engine.feature_tokens(masked_feature).unwrap();
                for &alpha in &[0.5, 1.0, 2.0] {
                    for &beta in &[0.0, 0.5, 1.0] {
                        for &subselection in &[true, false] {
                            let cfg = DecodeConfig {
                                alpha,
                                beta,
                                max_tokens: 16,
                                mode: DecodeMode::Cwcd,
                                vp_mode: VpMode::Category,
                                subselection_enabled: subselection,
                            };
                            let (c, _) = decode_contrastive(
                                &engine,
                                &visual_base,
                                &visual_masked,
                                &[BOS],
                                &cfg,
                            )
                            .unwrap();
                            assert_eq!(
                                c.iter().map(|t| t.index()).collect::<Vec<_>>(),
                                sim_contrastive(&sim, base_feature, masked_feature, &cfg),
                                "{name}: mismatch base={base_feature} masked={masked_feature} \
                                 alpha={alpha} beta={beta} vs={subselection}"
                            );
                        }
                    }
                }
            }
        }
    }

    // the planted fixture suppresses the co-occurrence token under masking
    let engine = TabularLm::from_text(&fixture_text("t2.tlm")).unwrap();
    let b = engine.vocab().id_of("b").unwrap();
    let none = engine.vocab().id_of("none").unwrap();
    let base = engine.feature_tokens("B-absent").unwrap();
    let masked = engine.feature_tokens("B-masked").unwrap();
    let greedy_cfg = DecodeConfig {
        mode: DecodeMode::Greedy,
        ..DecodeConfig::default()
    };
    let (g, _) = decode_greedy(&engine, &base, &[BOS], &greedy_cfg).unwrap();
    assert_eq!(g[0], b);
    let (c, _) =
        decode_contrastive(&engine, &base, &masked, &[BOS], &DecodeConfig::default()).unwrap();
    assert_eq!(c[0], none);

    budget("criterion 5", start, Duration::from_secs(10));
    pass("criterion 5: T1/T2 decodes match the independent simulator across the config grid");
}

// =======================================================================
// Criterion 6: spurious co-occurrence suppression at the pinned spec
// =======================================================================

/// Oracle decode of one test image: simulator tables + feature reads.
fn oracle_mentions_b(
    sims: &BTreeMap<Category, SimTables>,
    single: &SimTables,
    corpus: &bench::BenchCorpus,
    image: &GrayImage,
    cfg: &DecodeConfig,
) -> bool {
    let base_feature = bench::image_feature(image, &corpus.boxes).unwrap();
    let emitted: Vec<String> = if cfg.mode.is_category_wise() {
        let mut all = Vec::new();
        for category in Category::ALL {
            let sim = &sims[&category];
            let ids = if cfg.mode.is_contrastive() {
                let boxes = match cfg.vp_mode {
                    VpMode::None => Vec::new(),
                    VpMode::All => corpus.boxes.all_boxes(),
                    VpMode::Category => corpus.boxes.boxes_for(category).to_vec(),
                };
                let masked_img = mask_image(image, &boxes).unwrap();
                let masked_feature = bench::image_feature(&masked_img, &corpus.boxes).unwrap();
                sim_contrastive(sim, &base_feature, &masked_feature, cfg)
            } else {
                sim_greedy(sim, &base_feature, cfg.max_tokens)
            };
            all.extend(ids.into_iter().map(|i| sim.vocab[i].clone()));
        }
        all
    } else {
        let ids = if cfg.mode.is_contrastive() {
            let masked_img = mask_image(image, &corpus.boxes.all_boxes()).unwrap();
            let masked_feature = bench::image_feature(&masked_img, &corpus.boxes).unwrap();
            sim_contrastive(single, &base_feature, &masked_feature, cfg)
        } else {
            sim_greedy(single, &base_feature, cfg.max_tokens)
        };
        ids.into_iter().map(|i| single.vocab[i].clone()).collect()
    };
    emitted.iter().any(|w| w == bench::FINDING_B_TOKEN)
}

#[test]
fn criterion_06_spurious_cooccurrence_suppression() {
    let start = Instant::now();
    let spec = BenchSpec {
        n: 200,
        p_text: 0.9,
        p_img: 0.5,
        seed: 7,
        ..BenchSpec::default()
    };
    let corpus = gen_corpus(&spec).unwrap();
    let models = fit_models(&corpus).unwrap();

    // brute-force oracle rates from the serialized fitted tables
    let single_sim = parse_sim_tables(&models.single_pass.to_text());
    let set = models.per_category.as_ref().unwrap();
    let sims: BTreeMap<Category, SimTables> = Category::ALL
        .into_iter()
        .map(|c| (c, parse_sim_tables(&set.model_for(c).unwrap().to_text())))
        .collect();

    let greedy_cfg = DecodeConfig {
        mode: DecodeMode::Greedy,
        vp_mode: VpMode::None,
        ..DecodeConfig::default()
    };
    let cwcd_cfg = DecodeConfig {
        mode: DecodeMode::Cwcd,
        vp_mode: VpMode::Category,
        ..DecodeConfig::default()
    };
    let mut oracle_greedy = 0usize;
    let mut oracle_cwcd = 0usize;
    for &i in &corpus.test {
        let example = &corpus.examples[i];
        let absent = bench::evidence_b_absent(&example.image, &corpus.boxes).unwrap();
        if absent && oracle_mentions_b(&sims, &single_sim, &corpus, &example.image, &greedy_cfg) {
            oracle_greedy += 1;
        }
        if absent && oracle_mentions_b(&sims, &single_sim, &corpus, &example.image, &cwcd_cfg) {
            oracle_cwcd += 1;
        }
    }

    // engine rates over the same split
    let grid = vec![
        ("greedy".to_string(), greedy_cfg),
        ("cwcd".to_string(), cwcd_cfg),
    ];
    let result = run_bench(&corpus, &models, &grid).unwrap();
    let engine_greedy = result.rows[0].spurious_count;
    let engine_cwcd = result.rows[1].spurious_count;

    assert_eq!(
        engine_greedy, oracle_greedy,
        "greedy spurious count: engine vs oracle"
    );
    assert_eq!(
        engine_cwcd, oracle_cwcd,
        "cwcd spurious count: engine vs oracle"
    );
    // rates computed by the oracle and frozen: greedy 16/40, cwcd 0/40
    assert_eq!(corpus.test.len(), 40);
    assert_eq!(engine_greedy, 16, "frozen greedy spurious count drifted");
    assert_eq!(engine_cwcd, 0, "frozen cwcd spurious count drifted");
    assert!(
        result.rows[1].spurious_rate < result.rows[0].spurious_rate,
        "cwcd must be strictly below greedy"
    );

    // full ablation grid and beta sweep run deterministically end-to-end
    let full_a = run_bench(&corpus, &models, &table_grid()).unwrap();
    let full_b = run_bench(&corpus, &models, &table_grid()).unwrap();
    assert_eq!(full_a.to_csv(), full_b.to_csv(), "grid rerun differs");
    let sweep_a = beta_sweep(&corpus, &models, &BETA_SWEEP).unwrap();
    let sweep_b = beta_sweep(&corpus, &models, &BETA_SWEEP).unwrap();
    assert_eq!(sweep_a.to_csv(), sweep_b.to_csv(), "sweep rerun differs");
    // mean |V_sub| non-increasing across the sweep
    for pair in sweep_a.rows.windows(2) {
        assert!(
            pair[1].mean_v_sub <= pair[0].mean_v_sub + 1e-12,
            "mean |V_sub| grew from {} to {}",
            pair[0].mean_v_sub,
            pair[1].mean_v_sub
        );
    }
    // beta=0 row equals the no-subselection config row
    let no_vs = run_bench(
        &corpus,
        &models,
        &[(
            "no-vs".to_string(),
            DecodeConfig {
                subselection_enabled: false,
                mode: DecodeMode::Cwcd,
                vp_mode: VpMode::Category,
                ..DecodeConfig::default()
            },
        )],
    )
    .unwrap();
    assert_eq!(
        sweep_a.rows[0].spurious_count, no_vs.rows[0].spurious_count,
        "beta=0 differs from subselection-off"
    );
    assert_eq!(sweep_a.rows[0].metrics.bleu, no_vs.rows[0].metrics.bleu);

    budget("criterion 6", start, Duration::from_secs(120));
    pass(
        "criterion 6: spurious rate cwcd 0/40 < greedy 16/40 (oracle-confirmed); grid and sweep deterministic",
    );
}

// =======================================================================
// Criterion 7: metrics fixtures
// =======================================================================

#[test]
fn criterion_07_metrics_fixtures() {
    let start = Instant::now();
    let b = bleu(&tokenize("the the the"), &tokenize("the cat"), 1).unwrap();
    assert!((b - 1.0 / 3.0).abs() < 1e-9);

    let same = tokenize("no acute cardiopulmonary process");
    for n in 1..=4 {
        assert!((bleu(&same, &same, n).unwrap() - 1.0).abs() < 1e-9);
    }
    let identical = rouge_l(&same, &same);
    assert!((identical.f1 - 1.0).abs() < 1e-9);

    let rl = rouge_l(&tokenize("a b c d"), &tokenize("a c d e"));
    assert!((rl.precision - 0.75).abs() < 1e-9);
    assert!((rl.recall - 0.75).abs() < 1e-9);
    assert!((rl.f1 - 0.75).abs() < 1e-9);

    // label A: TP=2 FP=1 FN=1 (support 3); label B: TP=1 FP=0 FN=1 (support 2)
    let pred = vec![vec!["A".into(), "A".into(), "A".into(), "B".into()], vec![]];
    let gold = vec![
        vec!["A".into(), "A".into(), "B".into(), "B".into()],
        vec!["A".into()],
    ];
    let prf = label_prf(&pred, &gold).unwrap();
    assert!((prf.precision - 0.8).abs() < 1e-9);

    budget("criterion 7", start, Duration::from_secs(1));
    pass("criterion 7: metric hand fixtures exact (BLEU 1/3, ROUGE-L 0.75, weighted P 0.8)");
}

// =======================================================================
// Criterion 8: format round-trips
// =======================================================================

#[test]
fn criterion_08_format_round_trips() {
    let start = Instant::now();
    let mut rng = SplitMix64::new(0xacce5508);
    let words = [
        "clear",
        "mild",
        "opacity",
        "effusion",
        "stable",
        "degenerative",
    ];
    for _ in 0..1000 {
        let mut report = StructuredReport::new();
        let mask = rng.next_below(256) as u8;
        for (i, category) in Category::ALL.into_iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            report.mark_present(category);
            let n_obs = rng.next_below(3);
            for _ in 0..n_obs {
                let w1 = words[rng.next_below(words.len() as u64) as usize];
                let w2 = words[rng.next_below(words.len() as u64) as usize];
                report
                    .add_observation(category, format!("{w1} {w2}."))
                    .unwrap();
            }
        }
        let text = serialize_structured(&report);
        let back = parse_structured(&text).unwrap();
        assert_eq!(back, report, "report round-trip failed for {text:?}");
    }

    for _ in 0..100 {
        let w = 2 + rng.next_below(30) as usize;
        let h = 2 + rng.next_below(30) as usize;
        let pixels: Vec<u8> = (0..w * h).map(|_| rng.next_below(256) as u8).collect();
        let img = GrayImage::new(w, h, pixels).unwrap();
        // PGM round-trip bit-exact
        let encoded = cwcd_core::pgm::encode_pgm(&img);
        let back = cwcd_core::pgm::parse_pgm(&encoded).unwrap();
        assert_eq!(back, img);
        assert_eq!(cwcd_core::pgm::encode_pgm(&back), encoded);
        // masking: idempotent, outside pixels preserved
        let n_boxes = rng.next_below(4) as usize;
        let boxes: Vec<BoundingBox> = (0..n_boxes)
            .filter_map(|_| {
                let x0 = rng.next_below(w as u64) as usize;
                let y0 = rng.next_below(h as u64) as usize;
                let x1 = (x0 + 1 + rng.next_below(8) as usize).min(w);
                let y1 = (y0 + 1 + rng.next_below(8) as usize).min(h);
                (x0 < x1 && y0 < y1).then_some(BoundingBox::new(x0, y0, x1, y1))
            })
            .collect();
        let masked = mask_image(&img, &boxes).unwrap();
        assert_eq!(mask_image(&masked, &boxes).unwrap(), masked);
        for y in 0..h {
            for x in 0..w {
                let inside = boxes
                    .iter()
                    .any(|b| x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1);
                if inside {
                    assert_eq!(masked.get(x, y), 0);
                } else {
                    assert_eq!(masked.get(x, y), img.get(x, y));
                }
            }
        }
    }
    budget("criterion 8", start, Duration::from_secs(5));
    pass("criterion 8: report/PGM round-trips and masking invariants hold (1000/100 cases)");
}

// =======================================================================
// Criterion 9: adapter algebra
// =======================================================================

#[test]
fn criterion_09_adapter_algebra() {
    let start = Instant::now();
    let vocab = Vocabulary::new(["a", "b"])
        .unwrap()
        .with_visual_bins(2)
        .unwrap();
    let base = ToyTransformer::new(vocab.clone(), 17, 2, 2, 8, 32).unwrap();
    let probe = |m: &ToyTransformer| -> Vec<f64> {
        let vis = VisualTokens::single(m.vocab().visual_bin(0).unwrap());
        m.forward(&vis, &[BOS], &[]).unwrap().logits
    };
    let baseline = probe(&base);

    // zero delta is the identity
    let zero = LoraDelta::new(
        "head",
        Matrix::zeros(8, 1),
        Matrix::zeros(1, vocab.len()),
        1.0,
    );
    assert_eq!(probe(&apply_lora(&base, &zero).unwrap()), baseline);

    // delta then negation restores forwards within 1e-9
    let delta = LoraDelta::seeded("head", 8, vocab.len(), 1, 0.9, 1234);
    let adapted = apply_lora(&base, &delta).unwrap();
    assert_ne!(probe(&adapted), baseline);
    let restored = apply_lora(&adapted, &delta.negated()).unwrap();
    for (x, y) in baseline.iter().zip(probe(&restored)) {
        assert!((x - y).abs() < 1e-9);
    }

    // hand case: W + B*A with B=[[1],[0]], A=[[0,2]] adds exactly [[0,2],[0,0]]
    let square = ToyTransformer::new(vocab.clone(), 3, 1, 1, 2, 8).unwrap();
    let hand = LoraDelta::new(
        "wo:0",
        Matrix::from_rows(vec![vec![1.0], vec![0.0]]),
        Matrix::from_rows(vec![vec![0.0, 2.0]]),
        1.0,
    );
    let patched = apply_lora(&square, &hand).unwrap();
    let w = square.target_matrix("wo:0").unwrap();
    let w2 = patched.target_matrix("wo:0").unwrap();
    assert_eq!(w2.get(0, 0), w.get(0, 0));
    assert_eq!(w2.get(0, 1), w.get(0, 1) + 2.0);
    assert_eq!(w2.get(1, 0), w.get(1, 0));
    assert_eq!(w2.get(1, 1), w.get(1, 1));

    // pass-through semantics for categories without adapters
    let set =
        CategoryModels::from_adapters(base, &BTreeMap::new(), MissingAdapterPolicy::PassThrough)
            .unwrap();
    for category in Category::ALL {
        assert_eq!(probe(set.model_for(category).unwrap()), baseline);
    }

    budget("criterion 9", start, Duration::from_secs(1));
    pass("criterion 9: adapter algebra (zero identity, negation, hand case, pass-through)");
}

// =======================================================================
// Criterion 10: command determinism across reruns and parallelism
// =======================================================================

#[test]
fn criterion_10_command_determinism() {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_cwcd");
    let dir = std::env::temp_dir().join(format!("cwcd-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let spec_path = dir.join("bench.spec");
    std::fs::write(
        &spec_path,
        "n=80\nimage_size=32\np_text=0.9\np_img=0.5\nseed=7\ntrain_fraction=0.8\n",
    )
    .unwrap();

    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().expect("binary runs");
        assert!(
            out.status.success(),
            "command {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };

    let bench_dirs: Vec<PathBuf> = (0..3).map(|i| dir.join(format!("bench{i}"))).collect();
    for (i, out_dir) in bench_dirs.iter().enumerate() {
        let jobs = if i == 2 { "4" } else { "1" };
        run(&[
            "bench",
            "--spec",
            spec_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--jobs",
            jobs,
        ]);
    }
    for artifact in ["grid.csv", "sweep.csv", "summary.txt", "corpus.tsv"] {
        let a = std::fs::read(bench_dirs[0].join(artifact)).unwrap();
        assert_eq!(a, std::fs::read(bench_dirs[1].join(artifact)).unwrap());
        assert_eq!(a, std::fs::read(bench_dirs[2].join(artifact)).unwrap());
    }

    let decode_dirs: Vec<PathBuf> = (0..3).map(|i| dir.join(format!("dec{i}"))).collect();
    for (i, out_dir) in decode_dirs.iter().enumerate() {
        let jobs = if i == 2 { "4" } else { "1" };
        run(&[
            "decode",
            "--corpus",
            bench_dirs[0].join("corpus_test.tsv").to_str().unwrap(),
            "--config",
            bench_dirs[0].join("decode.cfg").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--jobs",
            jobs,
        ]);
    }
    let a = std::fs::read(decode_dirs[0].join("predictions.tsv")).unwrap();
    assert_eq!(
        a,
        std::fs::read(decode_dirs[1].join("predictions.tsv")).unwrap()
    );
    assert_eq!(
        a,
        std::fs::read(decode_dirs[2].join("predictions.tsv")).unwrap()
    );

    budget("criterion 10", start, Duration::from_secs(60));
    pass("criterion 10: bench and decode byte-identical across reruns and jobs 1/4");
}

// =======================================================================
// Cross-module consistency: the decode command reproduces run_bench rows
// =======================================================================

#[test]
fn decode_command_matches_run_bench_outputs() {
    let spec = BenchSpec {
        n: 80,
        image_size: 32,
        seed: 7,
        ..BenchSpec::default()
    };
    let corpus = gen_corpus(&spec).unwrap();
    let models = fit_models(&corpus).unwrap();
    let cfg = DecodeConfig {
        mode: DecodeMode::Cwcd,
        vp_mode: VpMode::Category,
        ..DecodeConfig::default()
    };

    // library-side decode of the test split
    let mut library: Vec<(String, String)> = Vec::new();
    for &i in &corpus.test {
        let example = &corpus.examples[i];
        let (report, _) =
            bench::decode_report(&models, &example.image, &corpus.boxes, &cfg, &example.id)
                .unwrap();
        library.push((example.id.clone(), serialize_structured(&report)));
    }

    // command-side decode via bench artifacts
    let bin = env!("CARGO_BIN_EXE_cwcd");
    let dir = std::env::temp_dir().join(format!("cwcd-crosscheck-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let spec_path = dir.join("bench.spec");
    std::fs::write(
        &spec_path,
        "n=80\nimage_size=32\np_text=0.9\np_img=0.5\nseed=7\ntrain_fraction=0.8\n",
    )
    .unwrap();
    let bench_dir = dir.join("bench");
    let decode_dir = dir.join("decoded");
    for args in [
        vec![
            "bench",
            "--spec",
            spec_path.to_str().unwrap(),
            "--out",
            bench_dir.to_str().unwrap(),
        ],
        vec![
            "decode",
            "--corpus",
            bench_dir.join("corpus_test.tsv").to_str().unwrap(),
            "--config",
            bench_dir.join("decode.cfg").to_str().unwrap(),
            "--out",
            decode_dir.to_str().unwrap(),
        ],
    ] {
        let out = Command::new(bin).args(&args).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    for (id, expected) in &library {
        let written = std::fs::read_to_string(decode_dir.join(format!("{id}.txt"))).unwrap();
        assert_eq!(&written, expected, "decode command diverged on {id}");
    }
}
