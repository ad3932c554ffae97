//! Calibration loss and attention-output similarity.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::StepTrace;
use crate::numerics::Tensor;
use crate::sharing::Branch;

pub const MRAE_EPS: f64 = 1e-6;
pub const MRAE_CLIP: f64 = 10.0;

/// Mean relative absolute error:
/// `mean_i clip(|o_i - o'_i| / (max(|o_i|, |o'_i|) + ε), 0, 10)`.
///
/// On finite inputs every term is below 2, so the result lies in `[0, 2)`.
pub fn mrae(o: &Tensor, o_prime: &Tensor) -> Result<f64> {
    if o.shape() != o_prime.shape() {
        return Err(dim_err(
            "mrae",
            format!("{:?} vs {:?}", o.shape(), o_prime.shape()),
        ));
    }
    if o.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = o
        .data()
        .iter()
        .zip(o_prime.data())
        .map(|(&a, &b)| {
            let (a, b) = (a as f64, b as f64);
            ((a - b).abs() / (a.abs().max(b.abs()) + MRAE_EPS)).clamp(0.0, MRAE_CLIP)
        })
        .sum();
    Ok(sum / o.len() as f64)
}

/// Cosine similarity of the flattened tensors.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err(
            "cosine_similarity",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity("zero-norm input".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Conditional attention output at step `i` against step `j`.
    StepWise,
    /// Conditional against unconditional attention output, per step.
    CfgWise,
}

/// One layer's similarities. Step-wise reports are `T × T`, CFG-wise reports
/// are `1 × T`; columns are labelled by step index.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub layer: usize,
    pub mode: SimilarityMode,
    pub steps: Vec<usize>,
    pub rows: usize,
    pub values: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn cols(&self) -> usize {
        self.steps.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.cols() + j]
    }

    /// Header row of step indices, then one line per matrix row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.steps.iter().map(|s| s.to_string()))?;
        for r in 0..self.rows {
            w.write_record((0..self.cols()).map(|c| format!("{:.6}", self.get(r, c))))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn similarity_report(
    traces: &[StepTrace],
    mode: SimilarityMode,
) -> Result<Vec<SimilarityMatrix>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::MissingTrace("no steps were traced".into()))?;
    let layers = first.attn.len();
    if traces.iter().any(|t| t.attn.len() != layers) {
        return Err(Error::MissingTrace("traces disagree on layer count".into()));
    }
    let steps: Vec<usize> = traces.iter().map(|t| t.step).collect();
    let n = traces.len();
    (0..layers)
        .map(|layer| {
            let (rows, values) = match mode {
                SimilarityMode::StepWise => {
                    let mut v = vec![0.0f32; n * n];
                    for i in 0..n {
                        v[i * n + i] = 1.0;
                        for j in i + 1..n {
                            let s = cosine_similarity(
                                traces[i].attention(layer, Branch::Cond),
                                traces[j].attention(layer, Branch::Cond),
                            )? as f32;
                            v[i * n + j] = s;
                            v[j * n + i] = s;
                        }
                    }
                    (n, v)
                }
                SimilarityMode::CfgWise => {
                    let v = traces
                        .iter()
                        .map(|t| {
                            cosine_similarity(
                                t.attention(layer, Branch::Cond),
                                t.attention(layer, Branch::Uncond),
                            )
                            .map(|s| s as f32)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (1, v)
                }
            };
            Ok(SimilarityMatrix {
                layer,
                mode,
                steps: steps.clone(),
                rows,
                values,
            })
        })
        .collect()
}
