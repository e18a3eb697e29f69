//! Tiny deterministic attention transformer.
//!
//! Small enough for sub-second tests, structured enough to expose per-layer
//! per-head attention rows for the diagnostics module. Weights regenerate
//! from (seed, dimensions); nothing else is serialized.

use crate::rng::SplitMix64;
use crate::vocab::{TokenId, Vocabulary};

use super::matrix::Matrix;
use super::{AttentionTensor, ConditionalLm, ModelError, ModelOutput, VisualTokens};

pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_HEADS: usize = 2;
pub const DEFAULT_DIM: usize = 32;
pub const DEFAULT_MAX_POSITIONS: usize = 128;

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    vocab: Vocabulary,
    seed: u64,
    layers: usize,
    heads: usize,
    dim: usize,
    max_positions: usize,
    token_emb: Matrix,
    pos_emb: Matrix,
    // indexed [layer][head]
    wq: Vec<Vec<Matrix>>,
    wk: Vec<Vec<Matrix>>,
    wv: Vec<Vec<Matrix>>,
    // indexed [layer]
    wo: Vec<Matrix>,
    head_w: Matrix,
}

fn init_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, (rng.next_f64() * 2.0 - 1.0) * scale);
        }
    }
    m
}

impl ToyTransformer {
    pub fn new(
        vocab: Vocabulary,
        seed: u64,
        layers: usize,
        heads: usize,
        dim: usize,
        max_positions: usize,
    ) -> Result<Self, ModelError> {
        if layers == 0 || heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(ModelError::Fit(format!(
                "bad transformer shape: layers={layers} heads={heads} dim={dim}"
            )));
        }
        let head_dim = dim / heads;
        let scale = 1.0 / (dim as f64).sqrt();
        let mut rng = SplitMix64::new(seed);
        let token_emb = init_matrix(&mut rng, vocab.len(), dim, scale);
        let pos_emb = init_matrix(&mut rng, max_positions, dim, scale);
        let mut wq = Vec::with_capacity(layers);
        let mut wk = Vec::with_capacity(layers);
        let mut wv = Vec::with_capacity(layers);
        let mut wo = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut lq = Vec::with_capacity(heads);
            let mut lk = Vec::with_capacity(heads);
            let mut lv = Vec::with_capacity(heads);
            for _ in 0..heads {
                lq.push(init_matrix(&mut rng, dim, head_dim, scale));
                lk.push(init_matrix(&mut rng, dim, head_dim, scale));
                lv.push(init_matrix(&mut rng, dim, head_dim, scale));
            }
            wq.push(lq);
            wk.push(lk);
            wv.push(lv);
            wo.push(init_matrix(&mut rng, dim, dim, scale));
        }
        let head_w = init_matrix(&mut rng, dim, vocab.len(), scale);
        Ok(Self {
            vocab,
            seed,
            layers,
            heads,
            dim,
            max_positions,
            token_emb,
            pos_emb,
            wq,
            wk,
            wv,
            wo,
            head_w,
        })
    }

    pub fn with_defaults(vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        Self::new(
            vocab,
            seed,
            DEFAULT_LAYERS,
            DEFAULT_HEADS,
            DEFAULT_DIM,
            DEFAULT_MAX_POSITIONS,
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Borrow of a named weight matrix. Targets: `head`, `wo:<layer>`,
    /// `wq:<layer>:<head>`, `wk:<layer>:<head>`, `wv:<layer>:<head>`.
    pub fn target_matrix(&self, target: &str) -> Result<&Matrix, ModelError> {
        let unknown = || ModelError::UnknownTarget(target.to_string());
        if target == "head" {
            return Ok(&self.head_w);
        }
        let mut parts = target.split(':');
        let kind = parts.next().ok_or_else(unknown)?;
        let layer: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(unknown)?;
        if layer >= self.layers {
            return Err(unknown());
        }
        match kind {
            "wo" => {
                if parts.next().is_some() {
                    return Err(unknown());
                }
                Ok(&self.wo[layer])
            }
            "wq" | "wk" | "wv" => {
                let head: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(unknown)?;
                if head >= self.heads || parts.next().is_some() {
                    return Err(unknown());
                }
                Ok(match kind {
                    "wq" => &self.wq[layer][head],
                    "wk" => &self.wk[layer][head],
                    _ => &self.wv[layer][head],
                })
            }
            _ => Err(unknown()),
        }
    }

    pub(super) fn target_matrix_mut(&mut self, target: &str) -> Result<&mut Matrix, ModelError> {
        // Resolve first through the shared read path to keep the name
        // grammar in one place.
        self.target_matrix(target)?;
        if target == "head" {
            return Ok(&mut self.head_w);
        }
        let mut parts = target.split(':');
        let kind = parts.next().unwrap();
        let layer: usize = parts.next().unwrap().parse().unwrap();
        match kind {
            "wo" => Ok(&mut self.wo[layer]),
            _ => {
                let head: usize = parts.next().unwrap().parse().unwrap();
                Ok(match kind {
                    "wq" => &mut self.wq[layer][head],
                    "wk" => &mut self.wk[layer][head],
                    _ => &mut self.wv[layer][head],
                })
            }
        }
    }

    /// Serialized form carries seed and dimensions only.
    pub fn to_text(&self) -> String {
        format!(
            "kind=toy\nseed={}\nlayers={}\nheads={}\ndim={}\nmax_positions={}\nvocab={}\n",
            self.seed,
            self.layers,
            self.heads,
            self.dim,
            self.max_positions,
            self.vocab.surfaces().join(" ")
        )
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let bad = |msg: &str| ModelError::Serialization(msg.to_string());
        let mut seed = None;
        let mut layers = None;
        let mut heads = None;
        let mut dim = None;
        let mut max_positions = None;
        let mut vocab = None;
        for line in text.lines() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("kind=") {
                if v != "toy" {
                    return Err(bad(&format!("kind {v:?} is not toy")));
                }
            } else if let Some(v) = line.strip_prefix("seed=") {
                seed = Some(v.parse().map_err(|_| bad("bad seed"))?);
            } else if let Some(v) = line.strip_prefix("layers=") {
                layers = Some(v.parse().map_err(|_| bad("bad layers"))?);
            } else if let Some(v) = line.strip_prefix("heads=") {
                heads = Some(v.parse().map_err(|_| bad("bad heads"))?);
            } else if let Some(v) = line.strip_prefix("dim=") {
                dim = Some(v.parse().map_err(|_| bad("bad dim"))?);
            } else if let Some(v) = line.strip_prefix("max_positions=") {
                max_positions = Some(v.parse().map_err(|_| bad("bad max_positions"))?);
            } else if let Some(v) = line.strip_prefix("vocab=") {
                vocab = Some(
                    Vocabulary::from_surfaces(v.split(' '))
                        .map_err(|e| bad(&format!("vocab: {e}")))?,
                );
            } else {
                return Err(bad(&format!("unexpected line {line:?}")));
            }
        }
        Self::new(
            vocab.ok_or_else(|| bad("missing vocab"))?,
            seed.ok_or_else(|| bad("missing seed"))?,
            layers.ok_or_else(|| bad("missing layers"))?,
            heads.ok_or_else(|| bad("missing heads"))?,
            dim.ok_or_else(|| bad("missing dim"))?,
            max_positions.ok_or_else(|| bad("missing max_positions"))?,
        )
    }
}

fn softmax_row(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

impl ConditionalLm for ToyTransformer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn forward(
        &self,
        visual: &VisualTokens,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<ModelOutput, ModelError> {
        let n = visual.len() + prompt.len() + prefix.len();
        if n == 0 || n > self.max_positions {
            return Err(ModelError::ContextOverflow {
                visual: visual.len(),
                prompt: prompt.len(),
                prefix: prefix.len(),
                limit: self.max_positions,
            });
        }
        let ids: Vec<TokenId> = visual
            .ids()
            .iter()
            .chain(prompt)
            .chain(prefix)
            .copied()
            .collect();

        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut x: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (pos, id) in ids.iter().enumerate() {
            if id.index() >= self.vocab.len() {
                return Err(ModelError::Vocab(crate::vocab::VocabError::OutOfBounds(
                    id.0,
                    self.vocab.len(),
                )));
            }
            let mut row = Vec::with_capacity(self.dim);
            for c in 0..self.dim {
                row.push(self.token_emb.get(id.index(), c) + self.pos_emb.get(pos, c));
            }
            x.push(row);
        }

        let mut attention_rows: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers);
        for layer in 0..self.layers {
            let mut layer_rows: Vec<Vec<f64>> = Vec::with_capacity(self.heads);
            let mut mixed: Vec<Vec<f64>> = vec![vec![0.0; self.dim]; n];
            for head in 0..self.heads {
                let q: Vec<Vec<f64>> = x.iter().map(|xi| self.wq[layer][head].vecmul(xi)).collect();
                let k: Vec<Vec<f64>> = x.iter().map(|xi| self.wk[layer][head].vecmul(xi)).collect();
                let v: Vec<Vec<f64>> = x.iter().map(|xi| self.wv[layer][head].vecmul(xi)).collect();
                for i in 0..n {
                    // causal: position i attends to 0..=i
                    let mut att: Vec<f64> = (0..=i)
                        .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                        .collect();
                    softmax_row(&mut att);
                    for (j, &w) in att.iter().enumerate() {
                        for c in 0..head_dim {
                            mixed[i][head * head_dim + c] += w * v[j][c];
                        }
                    }
                    if i == n - 1 {
                        // current generation step's row, padded over all N
                        let mut full = att;
                        full.resize(n, 0.0);
                        layer_rows.push(full);
                    }
                }
            }
            for i in 0..n {
                let projected = self.wo[layer].vecmul(&mixed[i]);
                for c in 0..self.dim {
                    x[i][c] += projected[c];
                }
            }
            attention_rows.push(layer_rows);
        }

        let logits = self.head_w.vecmul(&x[n - 1]);
        Ok(ModelOutput {
            logits,
            attention: Some(AttentionTensor::new(attention_rows)),
        })
    }

    fn exposes_attention(&self) -> bool {
        true
    }
}
