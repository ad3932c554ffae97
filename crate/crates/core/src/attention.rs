//! Multi-head scaled dot-product attention, full and banded.
//!
//! The window is a symmetric, non-causal band: query `i` sees keys `j` with
//! `|i - j| <= (w - 1) / 2`, clipped to the sequence. A window of at least the
//! sequence length is full attention. Banded attention only loops over the
//! band, so the work done matches what `cost_model` counts.

use std::ops::Range;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{softmax_in_place, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    /// Total band width in tokens.
    pub window: usize,
}

impl AttentionConfig {
    /// Config with the default window, an eighth of the sequence.
    pub fn new(num_heads: usize, head_dim: usize, seq_len: usize) -> Result<Self> {
        let cfg = Self {
            num_heads,
            head_dim,
            seq_len,
            window: Self::default_window(seq_len),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_window(mut self, window: usize) -> Result<Self> {
        self.window = window;
        self.validate()?;
        Ok(self)
    }

    pub fn default_window(seq_len: usize) -> usize {
        (seq_len / 8).max(1)
    }

    /// `max(1, floor(seq_len * frac))`.
    pub fn window_from_frac(seq_len: usize, frac: f64) -> usize {
        ((seq_len as f64 * frac).floor() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config(format!(
                "attention extents must be positive: heads={} head_dim={} seq_len={}",
                self.num_heads, self.head_dim, self.seq_len
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_full_window(&self) -> bool {
        self.window >= self.seq_len
    }

    /// Keys visible to query `i` under the window.
    pub fn band(&self, i: usize) -> Range<usize> {
        if self.is_full_window() {
            return 0..self.seq_len;
        }
        let half = (self.window - 1) / 2;
        i.saturating_sub(half)..(i + half + 1).min(self.seq_len)
    }

    /// Total number of (query, key) pairs inside the band.
    pub fn band_pairs(&self) -> u64 {
        (0..self.seq_len).map(|i| self.band(i).len() as u64).sum()
    }

    fn scale(&self) -> f32 {
        1.0 / (self.head_dim as f32).sqrt()
    }
}

/// Per-head queries, keys and values, each `[heads × seq_len × head_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl Qkv {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Self {
        Self { q, k, v }
    }

    pub fn random(cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        let shape = vec![cfg.num_heads, cfg.seq_len, cfg.head_dim];
        Self {
            q: Tensor::randn(shape.clone(), 1.0, rng),
            k: Tensor::randn(shape.clone(), 1.0, rng),
            v: Tensor::randn(shape, 1.0, rng),
        }
    }

    fn check(&self, cfg: &AttentionConfig, op: &'static str) -> Result<()> {
        cfg.validate()?;
        let want = [cfg.num_heads, cfg.seq_len, cfg.head_dim];
        for (name, t) in [("q", &self.q), ("k", &self.k), ("v", &self.v)] {
            if t.shape() != want {
                return Err(dim_err(
                    op,
                    format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Softmax weights of query `i` in head `h` over keys `keys`, in key order.
fn row_weights(
    qkv: &Qkv,
    cfg: &AttentionConfig,
    h: usize,
    i: usize,
    keys: Range<usize>,
) -> Vec<f32> {
    let (l, d) = (cfg.seq_len, cfg.head_dim);
    let base = h * l * d;
    let q = &qkv.q.data()[base + i * d..base + (i + 1) * d];
    let scale = cfg.scale();
    let mut scores: Vec<f32> = keys
        .map(|j| {
            let k = &qkv.k.data()[base + j * d..base + (j + 1) * d];
            let mut dot = 0.0f32;
            for (a, b) in q.iter().zip(k) {
                dot += a * b;
            }
            dot * scale
        })
        .collect();
    softmax_in_place(&mut scores);
    scores
}

fn attend(
    qkv: &Qkv,
    cfg: &AttentionConfig,
    band: impl Fn(usize) -> Range<usize>,
) -> Result<Tensor> {
    let (h_n, l, d) = (cfg.num_heads, cfg.seq_len, cfg.head_dim);
    let mut out = vec![0.0f32; h_n * l * d];
    let v = qkv.v.data();
    for h in 0..h_n {
        let base = h * l * d;
        for i in 0..l {
            let keys = band(i);
            let weights = row_weights(qkv, cfg, h, i, keys.clone());
            let o = &mut out[base + i * d..base + (i + 1) * d];
            for (j, w) in keys.zip(weights) {
                let vr = &v[base + j * d..base + (j + 1) * d];
                for (acc, &x) in o.iter_mut().zip(vr) {
                    *acc += w * x;
                }
            }
        }
    }
    Tensor::new(vec![h_n, l, d], out)
}

/// `softmax(QKᵀ/√d)·V` per head.
pub fn full_attention(qkv: &Qkv, cfg: &AttentionConfig) -> Result<Tensor> {
    qkv.check(cfg, "full_attention")?;
    let l = cfg.seq_len;
    attend(qkv, cfg, |_| 0..l)
}

/// Attention restricted to the band of each query, renormalised inside it.
pub fn window_attention(qkv: &Qkv, cfg: &AttentionConfig) -> Result<Tensor> {
    qkv.check(cfg, "window_attention")?;
    attend(qkv, cfg, |i| cfg.band(i))
}

/// Dense `[heads × L × L]` probability matrix implied by either operation.
pub fn attention_weights(qkv: &Qkv, cfg: &AttentionConfig, windowed: bool) -> Result<Tensor> {
    qkv.check(cfg, "attention_weights")?;
    let (h_n, l) = (cfg.num_heads, cfg.seq_len);
    let mut out = vec![0.0f32; h_n * l * l];
    for h in 0..h_n {
        for i in 0..l {
            let keys = if windowed { cfg.band(i) } else { 0..l };
            let w = row_weights(qkv, cfg, h, i, keys.clone());
            for (j, p) in keys.zip(w) {
                out[(h * l + i) * l + j] = p;
            }
        }
    }
    Tensor::new(vec![h_n, l, l], out)
}
