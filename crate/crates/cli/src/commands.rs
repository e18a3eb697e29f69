//! The five pipeline commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use cwcd_core::attention::{emit_trace_csv, lama_trace};
use cwcd_core::bench::{
    beta_sweep, decode_report, fit_models, gen_corpus, run_bench, table_grid, BenchResult,
    BenchSpec, FittedModels, BETA_SWEEP,
};
use cwcd_core::decode::{decode_contrastive, decode_greedy, DecodeConfig, DecodeTrace, VpMode};
use cwcd_core::image::{image_to_visual_tokens, mask_image, CategoryBoxSet, GrayImage};
use cwcd_core::model::{
    CategoryModels, ConditionalLm, LoraDelta, MissingAdapterPolicy, TabularLm, ToyTransformer,
};
use cwcd_core::pgm::{load_pgm, save_pgm};
use cwcd_core::report::{
    assemble, parse_structured, serialize_structured, Category, StructuredReport,
};
use cwcd_core::vocab::{TokenSequence, BOS};

use crate::config::{ModelKind, RunConfig};
use crate::corpus::{parse_box_list, reports_by_id, CorpusDocument, CorpusRecord};

/// Index-preserving parallel map: items are dealt round-robin to `jobs`
/// scoped threads and results merged back in input order, so output is
/// independent of the parallelism degree.
pub fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut per_worker: Vec<Vec<(usize, R)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|worker| {
                let f = &f;
                scope.spawn(move || {
                    let mut acc = Vec::new();
                    let mut idx = worker;
                    while idx < items.len() {
                        acc.push((idx, f(idx, &items[idx])));
                        idx += jobs;
                    }
                    acc
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    for acc in per_worker.drain(..) {
        for (idx, r) in acc {
            slots[idx] = Some(r);
        }
    }
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

/// The model family a decode run drives: fitted tables or the toy
/// transformer with per-category adapters.
pub enum ModelFamily {
    Tabular(FittedModels),
    Toy {
        set: CategoryModels<ToyTransformer>,
        patch: usize,
        levels: usize,
    },
}

fn load_tabular_family(cfg: &RunConfig) -> Result<FittedModels> {
    let model_path = cfg
        .model
        .as_ref()
        .ok_or_else(|| anyhow!("config: tabular runs need model=<path>"))?;
    let text = std::fs::read_to_string(model_path)
        .with_context(|| format!("reading model {}", model_path.display()))?;
    let single_pass = TabularLm::from_text(&text)?;
    let vocab = single_pass.vocab().clone();
    let per_category = match &cfg.category_models {
        None => None,
        Some(map_path) => {
            let map_text = std::fs::read_to_string(map_path)
                .with_context(|| format!("reading category model map {}", map_path.display()))?;
            let dir = map_path.parent().unwrap_or(Path::new("."));
            let mut set =
                CategoryModels::new(single_pass.clone(), MissingAdapterPolicy::PassThrough);
            for (lineno, line) in map_text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (name, rel) = line.split_once('\t').ok_or_else(|| {
                    anyhow!("model map line {}: expected category<TAB>path", lineno + 1)
                })?;
                let category = Category::from_short_name(name)
                    .or_else(|| Category::from_header(name))
                    .ok_or_else(|| {
                        anyhow!("model map line {}: unknown category {name:?}", lineno + 1)
                    })?;
                let cat_text = std::fs::read_to_string(dir.join(rel))
                    .with_context(|| format!("reading category model {rel}"))?;
                set.insert(category, TabularLm::from_text(&cat_text)?);
            }
            Some(set)
        }
    };
    Ok(FittedModels {
        vocab,
        single_pass,
        per_category,
    })
}

fn load_toy_family(cfg: &RunConfig) -> Result<(CategoryModels<ToyTransformer>, usize, usize)> {
    let model_path = cfg
        .model
        .as_ref()
        .ok_or_else(|| anyhow!("config: toy runs need model=<path>"))?;
    let text = std::fs::read_to_string(model_path)
        .with_context(|| format!("reading model {}", model_path.display()))?;
    let base = ToyTransformer::from_text(&text)?;
    let mut adapters: BTreeMap<Category, LoraDelta> = BTreeMap::new();
    if let Some(adapter_path) = &cfg.adapters {
        let adapter_text = std::fs::read_to_string(adapter_path)
            .with_context(|| format!("reading adapters {}", adapter_path.display()))?;
        for (lineno, line) in adapter_text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 5 {
                bail!(
                    "adapters line {}: expected category<TAB>target<TAB>rank<TAB>scale<TAB>seed",
                    lineno + 1
                );
            }
            let category = Category::from_short_name(parts[0])
                .or_else(|| Category::from_header(parts[0]))
                .ok_or_else(|| {
                    anyhow!(
                        "adapters line {}: unknown category {:?}",
                        lineno + 1,
                        parts[0]
                    )
                })?;
            let target = parts[1].to_string();
            let rank: usize = parts[2].parse().context("adapter rank")?;
            let scale: f64 = parts[3].parse().context("adapter scale")?;
            let seed: u64 = parts[4].parse().context("adapter seed")?;
            let matrix = base.target_matrix(&target)?;
            adapters.insert(
                category,
                LoraDelta::seeded(target, matrix.rows(), matrix.cols(), rank, scale, seed),
            );
        }
    }
    let set = CategoryModels::from_adapters(base, &adapters, MissingAdapterPolicy::PassThrough)?;
    Ok((set, cfg.patch, cfg.levels))
}

impl ModelFamily {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match cfg.model_kind {
            ModelKind::Tabular => Ok(ModelFamily::Tabular(load_tabular_family(cfg)?)),
            ModelKind::Toy => {
                let (set, patch, levels) = load_toy_family(cfg)?;
                Ok(ModelFamily::Toy { set, patch, levels })
            }
        }
    }

    /// Decodes one example into a structured report plus per-stream traces.
    pub fn decode_example(
        &self,
        image: &GrayImage,
        boxes: &CategoryBoxSet,
        cfg: &DecodeConfig,
        id: &str,
    ) -> Result<(StructuredReport, Vec<(String, DecodeTrace)>)> {
        match self {
            ModelFamily::Tabular(models) => Ok(decode_report(models, image, boxes, cfg, id)?),
            ModelFamily::Toy { set, patch, levels } => {
                toy_decode(set, *patch, *levels, image, boxes, cfg)
            }
        }
    }
}

fn toy_masked_boxes(
    boxes: &CategoryBoxSet,
    vp_mode: VpMode,
    category: Option<Category>,
) -> Vec<cwcd_core::image::BoundingBox> {
    match vp_mode {
        VpMode::None => Vec::new(),
        VpMode::All => boxes.all_boxes(),
        VpMode::Category => match category {
            Some(c) => boxes.boxes_for(c).to_vec(),
            None => boxes.all_boxes(),
        },
    }
}

fn toy_decode(
    set: &CategoryModels<ToyTransformer>,
    patch: usize,
    levels: usize,
    image: &GrayImage,
    boxes: &CategoryBoxSet,
    cfg: &DecodeConfig,
) -> Result<(StructuredReport, Vec<(String, DecodeTrace)>)> {
    let mut traces = Vec::new();
    if !cfg.mode.is_category_wise() {
        let model = set.base();
        let visual = image_to_visual_tokens(image, model.vocab(), patch, levels)?;
        let (seq, trace) = if cfg.mode.is_contrastive() {
            let masked = mask_image(image, &toy_masked_boxes(boxes, cfg.vp_mode, None))?;
            let visual_masked = image_to_visual_tokens(&masked, model.vocab(), patch, levels)?;
            decode_contrastive(model, &visual, &visual_masked, &[BOS], cfg)?
        } else {
            decode_greedy(model, &visual, &[BOS], cfg)?
        };
        traces.push(("full".to_string(), trace));
        let text = model.vocab().detokenize(&seq)?;
        let report =
            parse_structured(&text).map_err(|e| anyhow!("decoded output failed to parse: {e}"))?;
        return Ok((report, traces));
    }
    let mut outputs: BTreeMap<Category, TokenSequence> = BTreeMap::new();
    for category in Category::ALL {
        let model = set.model_for(category)?;
        let visual = image_to_visual_tokens(image, model.vocab(), patch, levels)?;
        let (seq, trace) = if cfg.mode.is_contrastive() {
            let masked = mask_image(image, &toy_masked_boxes(boxes, cfg.vp_mode, Some(category)))?;
            let visual_masked = image_to_visual_tokens(&masked, model.vocab(), patch, levels)?;
            decode_contrastive(model, &visual, &visual_masked, &[BOS], cfg)?
        } else {
            decode_greedy(model, &visual, &[BOS], cfg)?
        };
        traces.push((category.short_name().to_string(), trace));
        outputs.insert(category, seq);
    }
    let report = assemble(&outputs, set.base().vocab())?;
    Ok((report, traces))
}

fn render_traces(vocab: &cwcd_core::vocab::Vocabulary, traces: &[(String, DecodeTrace)]) -> String {
    let mut out = String::from("stream\tstep\ttoken\tv_sub_size\tcd_score\n");
    for (stream, trace) in traces {
        for (step, record) in trace.steps.iter().enumerate() {
            let surface = vocab.surface(record.chosen).unwrap_or("?");
            writeln!(
                out,
                "{stream}\t{step}\t{surface}\t{}\t{:?}",
                record.v_sub_size, record.chosen_score
            )
            .expect("string write");
        }
    }
    out
}

/// Decodes every corpus example. Per-example failures are recorded and the
/// run continues; the returned count is the number of failed examples.
pub fn cmd_decode(
    corpus_path: &Path,
    config_path: &Path,
    out_dir: &Path,
    write_traces: bool,
    jobs: usize,
) -> Result<usize> {
    let config = RunConfig::load(config_path)?;
    let corpus = CorpusDocument::load(corpus_path)?;
    let family = ModelFamily::from_config(&config)?;
    std::fs::create_dir_all(out_dir)?;

    let results: Vec<Result<(String, String)>> =
        par_map(&corpus.records, jobs, |_, record: &CorpusRecord| {
            let image_path = record
                .image
                .as_ref()
                .ok_or_else(|| anyhow!("record {} has no image", record.id))?;
            let image = load_pgm(image_path)?;
            let (report, traces) =
                family.decode_example(&image, &record.boxes, &config.decode, &record.id)?;
            let trace_text = if write_traces {
                let vocab = match &family {
                    ModelFamily::Tabular(m) => &m.vocab,
                    ModelFamily::Toy { set, .. } => set.base().vocab(),
                };
                Some(render_traces(vocab, &traces))
            } else {
                None
            };
            let report_text = serialize_structured(&report);
            if let Some(trace_text) = trace_text {
                std::fs::write(out_dir.join(format!("{}.trace.tsv", record.id)), trace_text)?;
            }
            Ok((record.id.clone(), report_text))
        });

    let mut predictions = String::new();
    let mut errors = 0usize;
    for (record, result) in corpus.records.iter().zip(results) {
        match result {
            Ok((id, report_text)) => {
                std::fs::write(out_dir.join(format!("{id}.txt")), &report_text)?;
                writeln!(
                    predictions,
                    "id={}\treport={}",
                    id,
                    crate::corpus::escape_text(&report_text)
                )
                .expect("string write");
            }
            Err(e) => {
                errors += 1;
                eprintln!("error: example {}: {e:#}", record.id);
            }
        }
    }
    std::fs::write(out_dir.join("predictions.tsv"), predictions)?;
    Ok(errors)
}

/// Writes the attention-concentration trace CSV for every corpus example.
pub fn cmd_lama(corpus_path: &Path, config_path: &Path, out_path: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    if config.model_kind != ModelKind::Toy {
        bail!("lama needs an attention-exposing model; configure model_kind=toy");
    }
    let (set, patch, levels) = load_toy_family(&config)?;
    let model = set.base();
    let corpus = CorpusDocument::load(corpus_path)?;
    let mut traces = Vec::new();
    for record in &corpus.records {
        let image_path = record
            .image
            .as_ref()
            .ok_or_else(|| anyhow!("record {} has no image", record.id))?;
        let image = load_pgm(image_path)?;
        let visual = image_to_visual_tokens(&image, model.vocab(), patch, levels)?;
        traces.push(lama_trace(
            model,
            &visual,
            &[BOS],
            &config.decode,
            record.id.clone(),
        )?);
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    emit_trace_csv(&traces, out_path)?;
    Ok(())
}

/// Scores predictions against references; id sets must match exactly.
pub fn cmd_eval(pred_path: &Path, ref_path: &Path, out_dir: &Path) -> Result<String> {
    let pred_doc = CorpusDocument::load(pred_path)?;
    let ref_doc = CorpusDocument::load(ref_path)?;
    let mut preds = reports_by_id(&pred_doc)?;
    let mut refs = reports_by_id(&ref_doc)?;
    preds.sort_by(|a, b| a.0.cmp(&b.0));
    refs.sort_by(|a, b| a.0.cmp(&b.0));

    let pred_ids: Vec<&String> = preds.iter().map(|(id, _)| id).collect();
    let ref_ids: Vec<&String> = refs.iter().map(|(id, _)| id).collect();
    if pred_ids != ref_ids {
        let missing: Vec<&&String> = ref_ids.iter().filter(|id| !pred_ids.contains(id)).collect();
        let extra: Vec<&&String> = pred_ids.iter().filter(|id| !ref_ids.contains(id)).collect();
        bail!("id mismatch between corpora: missing from predictions {missing:?}, unmatched predictions {extra:?}");
    }

    let pred_reports: Vec<StructuredReport> = preds.into_iter().map(|(_, r)| r).collect();
    let ref_reports: Vec<StructuredReport> = refs.into_iter().map(|(_, r)| r).collect();
    let report = cwcd_core::metrics::evaluate_corpus(
        &pred_reports,
        &ref_reports,
        cwcd_core::metrics::exact_observation_labels,
    )?;

    std::fs::create_dir_all(out_dir)?;
    let key_values = report.to_key_values();
    std::fs::write(out_dir.join("metrics.txt"), &key_values)?;
    std::fs::write(out_dir.join("per_category.csv"), report.per_category_csv())?;
    Ok(key_values)
}

fn write_bench_artifacts(
    out_dir: &Path,
    corpus: &cwcd_core::bench::BenchCorpus,
    models: &FittedModels,
) -> Result<()> {
    let images_dir = out_dir.join("images");
    let models_dir = out_dir.join("models");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&models_dir)?;

    let mut records = Vec::new();
    for example in &corpus.examples {
        let image_path = images_dir.join(format!("{}.pgm", example.id));
        save_pgm(&example.image, &image_path)?;
        records.push(CorpusRecord {
            id: example.id.clone(),
            image: Some(image_path),
            boxes: corpus.boxes.clone(),
            report: Some(example.report.clone()),
        });
    }
    let doc = CorpusDocument { records };
    std::fs::write(out_dir.join("corpus.tsv"), doc.render(out_dir))?;

    // test-split-only view, for decode/eval runs against the bench rows
    let test_records: Vec<CorpusRecord> = corpus
        .test
        .iter()
        .map(|&i| {
            let example = &corpus.examples[i];
            CorpusRecord {
                id: example.id.clone(),
                image: Some(images_dir.join(format!("{}.pgm", example.id))),
                boxes: corpus.boxes.clone(),
                report: Some(example.report.clone()),
            }
        })
        .collect();
    let test_doc = CorpusDocument {
        records: test_records,
    };
    std::fs::write(out_dir.join("corpus_test.tsv"), test_doc.render(out_dir))?;

    std::fs::write(models_dir.join("single.tlm"), models.single_pass.to_text())?;
    let mut map_lines = String::new();
    if let Some(set) = &models.per_category {
        for category in Category::ALL {
            let name = format!("cat_{}.tlm", category.short_name());
            std::fs::write(
                models_dir.join(&name),
                set.model_for(category)
                    .map_err(|e| anyhow!("{e}"))?
                    .to_text(),
            )?;
            writeln!(map_lines, "{}\t{}", category.short_name(), name).expect("string write");
        }
    }
    std::fs::write(models_dir.join("map.tsv"), map_lines)?;

    let config_text = format!(
        "seed={}\nmodel_kind=tabular\nmodel=models/single.tlm\ncategory_models=models/map.tsv\n\
         mode=cwcd\nvp_mode=category\nalpha=1.0\nbeta=0.5\nmax_tokens=128\nsubselection=true\n",
        corpus.spec.seed
    );
    std::fs::write(out_dir.join("decode.cfg"), config_text)?;
    Ok(())
}

/// Generates the planted-bias corpus, fits tables, runs the ablation grid
/// and the beta sweep, and writes corpus/model artifacts for downstream
/// decode/eval runs.
pub fn cmd_bench(spec_path: &Path, out_dir: &Path, jobs: usize) -> Result<String> {
    let spec = crate::config::load_bench_spec(spec_path)?;
    bench_to_dir(&spec, out_dir, jobs)
}

pub fn bench_to_dir(spec: &BenchSpec, out_dir: &Path, jobs: usize) -> Result<String> {
    let corpus = gen_corpus(spec)?;
    let models = fit_models(&corpus)?;
    std::fs::create_dir_all(out_dir)?;
    write_bench_artifacts(out_dir, &corpus, &models)?;

    let grid = table_grid();
    let grid_rows: Vec<Result<BenchResult>> = par_map(&grid, jobs, |_, entry| {
        Ok(run_bench(&corpus, &models, std::slice::from_ref(entry))?)
    });
    let mut grid_result = BenchResult::default();
    for rows in grid_rows {
        grid_result.rows.extend(rows?.rows);
    }

    let betas: Vec<f64> = BETA_SWEEP.to_vec();
    let sweep_rows: Vec<Result<BenchResult>> = par_map(&betas, jobs, |_, &beta| {
        Ok(beta_sweep(&corpus, &models, &[beta])?)
    });
    let mut sweep_result = BenchResult::default();
    for rows in sweep_rows {
        sweep_result.rows.extend(rows?.rows);
    }

    std::fs::write(out_dir.join("grid.csv"), grid_result.to_csv())?;
    std::fs::write(out_dir.join("sweep.csv"), sweep_result.to_csv())?;
    let summary = format!(
        "ablation grid\n{}\nbeta sweep\n{}",
        grid_result.to_summary(),
        sweep_result.to_summary()
    );
    std::fs::write(out_dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

/// Masks the given boxes out of a PGM image.
pub fn cmd_mask(image_path: &Path, boxes: &str, out_path: &Path) -> Result<()> {
    let image = load_pgm(image_path)?;
    let box_list = parse_box_list(boxes)?;
    let masked = mask_image(&image, &box_list)?;
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_pgm(&masked, out_path)?;
    Ok(())
}
