//! Flat key=value config files. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cwcd_core::bench::BenchSpec;
use cwcd_core::decode::{DecodeConfig, DecodeMode, VpMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Tabular,
    Toy,
}

/// Run configuration for the decode and lama commands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub decode: DecodeConfig,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub model: Option<PathBuf>,
    /// Map file `category<TAB>path` of per-category table models.
    pub category_models: Option<PathBuf>,
    /// Adapter list `category<TAB>target<TAB>rank<TAB>scale<TAB>seed` for
    /// the toy transformer.
    pub adapters: Option<PathBuf>,
    pub patch: usize,
    pub levels: usize,
}

fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key=value, got {line:?}", lineno + 1))?;
        if map
            .insert(key.trim().to_string(), value.trim().to_string())
            .is_some()
        {
            bail!("line {}: duplicate key {key:?}", lineno + 1);
        }
    }
    Ok(map)
}

fn take_parse<T: std::str::FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match map.remove(key) {
        None => Ok(default),
        Some(v) => v
            .parse::<T>()
            .map_err(|e| anyhow!("config key {key}: {e} (value {v:?})")),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut map = parse_key_values(&text)?;

        let mode = match map.remove("mode") {
            None => DecodeMode::Cwcd,
            Some(v) => DecodeMode::parse(&v)
                .ok_or_else(|| anyhow!("config key mode: expected greedy|cd|cw|cwcd, got {v:?}"))?,
        };
        let vp_mode = match map.remove("vp_mode") {
            None => VpMode::Category,
            Some(v) => VpMode::parse(&v).ok_or_else(|| {
                anyhow!("config key vp_mode: expected none|all|category, got {v:?}")
            })?,
        };
        let decode = DecodeConfig {
            alpha: take_parse(&mut map, "alpha", 1.0)?,
            beta: take_parse(&mut map, "beta", 0.5)?,
            max_tokens: take_parse(&mut map, "max_tokens", 128)?,
            mode,
            vp_mode,
            subselection_enabled: take_parse(&mut map, "subselection", true)?,
        };
        decode.validate().map_err(|e| anyhow!("config: {e}"))?;

        let seed = match map.remove("seed") {
            Some(v) => v
                .parse::<u64>()
                .map_err(|e| anyhow!("config key seed: {e}"))?,
            None => bail!("config: seed must be explicit"),
        };
        let model_kind = match map.remove("model_kind").as_deref() {
            None | Some("tabular") => ModelKind::Tabular,
            Some("toy") => ModelKind::Toy,
            Some(v) => bail!("config key model_kind: expected tabular|toy, got {v:?}"),
        };
        let path_of = |v: Option<String>| v.map(|p| dir.join(p));
        let model = path_of(map.remove("model"));
        let category_models = path_of(map.remove("category_models"));
        let adapters = path_of(map.remove("adapters"));
        let patch = take_parse(&mut map, "patch", 8usize)?;
        let levels = take_parse(&mut map, "levels", 8usize)?;

        if let Some(key) = map.keys().next() {
            bail!("config: unknown key {key:?}");
        }
        Ok(Self {
            decode,
            seed,
            model_kind,
            model,
            category_models,
            adapters,
            patch,
            levels,
        })
    }
}

/// Bench spec file: n, image_size, p_text, p_img, seed, train_fraction.
pub fn load_bench_spec(path: &Path) -> Result<BenchSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading bench spec {}", path.display()))?;
    let mut map = parse_key_values(&text)?;
    let defaults = BenchSpec::default();
    let spec = BenchSpec {
        n: take_parse(&mut map, "n", defaults.n)?,
        image_size: take_parse(&mut map, "image_size", defaults.image_size)?,
        p_text: take_parse(&mut map, "p_text", defaults.p_text)?,
        p_img: take_parse(&mut map, "p_img", defaults.p_img)?,
        seed: take_parse(&mut map, "seed", defaults.seed)?,
        train_fraction: take_parse(&mut map, "train_fraction", defaults.train_fraction)?,
    };
    if let Some(key) = map.keys().next() {
        bail!("bench spec: unknown key {key:?}");
    }
    Ok(spec)
}
