//! Dense `f32` tensors and the handful of kernels the toy transformer needs.
//!
//! Every loop runs in a fixed order with no reduction reordering, so results
//! are bitwise reproducible. Fallible operations refuse to hand back NaN or
//! infinite values.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};

/// Row-major dense tensor of 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(Tensor { shape, data })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        checked("Tensor::new", shape, data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(dim_err(
                "dims2",
                format!("expected rank 2, got {:?}", self.shape),
            )),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(dim_err(
                "dims3",
                format!("expected rank 3, got {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let n = *self.shape.last().unwrap_or(&0);
        &self.data[i * n..(i + 1) * n]
    }

    /// `self · other` for rank-2 operands, accumulated in ascending `k` order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("inner extents differ: {m}x{k} · {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        checked("matmul", vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        checked(op, self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| v * s).collect();
        checked("scale", self.shape.clone(), data)
    }

    /// Adds `row` to every row of a rank-2 tensor.
    pub fn add_row(&self, row: &[f32]) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if row.len() != n {
            return Err(dim_err(
                "add_row",
                format!("row of {} for width {n}", row.len()),
            ));
        }
        let mut data = self.data.clone();
        for i in 0..m {
            for (d, &r) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                *d += r;
            }
        }
        checked("add_row", self.shape.clone(), data)
    }

    /// Per-row layer normalisation with affine `gain` and `bias`.
    pub fn layer_norm(&self, gain: &[f32], bias: &[f32], eps: f32) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if gain.len() != n || bias.len() != n {
            return Err(dim_err("layer_norm", "gain/bias width mismatch"));
        }
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let x = &self.data[i * n..(i + 1) * n];
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = x
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for (j, o) in data[i * n..(i + 1) * n].iter_mut().enumerate() {
                *o = ((x[j] as f64 - mean) * inv) as f32 * gain[j] + bias[j];
            }
        }
        checked("layer_norm", self.shape.clone(), data)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        let data = self
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh()))
            .collect();
        checked("gelu", self.shape.clone(), data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(dim_err(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Boolean allow-mask of shape `rows × cols`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(dim_err("Mask::new", "length does not match rows*cols"));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|x| f(x / cols, x % cols)).collect();
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

/// Stable softmax over `scores` in place: max subtraction, `f64` normaliser.
pub(crate) fn softmax_in_place(scores: &mut [f32]) {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut exps = Vec::with_capacity(scores.len());
    let mut sum = 0.0f64;
    for &s in scores.iter() {
        let e = ((s - max) as f64).exp();
        sum += e;
        exps.push(e);
    }
    for (s, e) in scores.iter_mut().zip(exps) {
        *s = (e / sum) as f32;
    }
}

/// Row-wise softmax; masked-out positions come back as exactly zero.
pub fn row_softmax(x: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if let Some(mask) = mask {
        if mask.rows != m || mask.cols != n {
            return Err(dim_err(
                "row_softmax",
                format!("mask {}x{} for input {m}x{n}", mask.rows, mask.cols),
            ));
        }
    }
    let mut out = vec![0.0f32; m * n];
    let mut buf = Vec::with_capacity(n);
    for i in 0..m {
        let row = x.row(i);
        buf.clear();
        let cols: Vec<usize> = (0..n)
            .filter(|&j| mask.is_none_or(|mk| mk.allows(i, j)))
            .collect();
        if cols.is_empty() {
            return Err(Error::InvalidMask { row: i });
        }
        buf.extend(cols.iter().map(|&j| row[j]));
        softmax_in_place(&mut buf);
        for (&j, &p) in cols.iter().zip(&buf) {
            out[i * n + j] = p;
        }
    }
    checked("row_softmax", vec![m, n], out)
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Weights,
    Latent,
    Other(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Weights => 1,
            Stream::Latent => 2,
            Stream::Other(id) => 1 << 32 | id,
        }
    }
}

/// Seeded ChaCha8 generator. A seed plus a stream id fixes the output
/// sequence on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn for_stream(seed: u64, stream: Stream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream.id());
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    pub fn normal(&mut self) -> f32 {
        self.inner.sample::<f32, _>(StandardNormal)
    }
}
