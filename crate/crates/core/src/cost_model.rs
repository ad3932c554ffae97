//! Analytic attention FLOPs.
//!
//! Only the quadratic part is counted: `QKᵀ` and `A·V`, two FLOPs per
//! multiply-add. Projections and the softmax are excluded because no strategy
//! changes them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::Result;
use crate::model::ModelConfig;
use crate::plan_search::{CompressionPlan, LayerOp, Schedule};
use crate::sharing::{AttnOp, Branch, Strategy};

/// `4·h·L²·d`.
pub fn full_flops(cfg: &AttentionConfig) -> u64 {
    4 * (cfg.num_heads * cfg.head_dim) as u64 * (cfg.seq_len * cfg.seq_len) as u64
}

/// `4·h·d·Σᵢ|bandᵢ|`.
pub fn window_flops(cfg: &AttentionConfig) -> u64 {
    4 * (cfg.num_heads * cfg.head_dim) as u64 * cfg.band_pairs()
}

pub fn op_flops(op: AttnOp, cfg: &AttentionConfig) -> u64 {
    match op {
        AttnOp::Full => full_flops(cfg),
        AttnOp::Refresh => full_flops(cfg) + window_flops(cfg),
        AttnOp::WarsReuse => window_flops(cfg),
        AttnOp::AstReuse | AttnOp::AscReuse => 0,
    }
}

/// FLOPs of `strategy` on one branch; `refresh` selects the residual-refresh
/// variant for full and window strategies.
pub fn attn_flops(strategy: Strategy, branch: Branch, cfg: &AttentionConfig, refresh: bool) -> u64 {
    op_flops(strategy.resolve(branch, refresh, true), cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub step: usize,
    pub layer: usize,
    pub branch: Branch,
    pub strategy: Strategy,
    pub op: AttnOp,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Full-attention FLOPs of a single (step, layer, branch).
    pub unit_flops: u64,
    pub total_flops: u64,
    pub baseline_flops: u64,
    /// `total / baseline`, rounded to four decimals.
    pub fraction: f64,
    pub per_strategy: BTreeMap<Strategy, u64>,
    pub entries: Vec<CostEntry>,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

impl CostReport {
    pub fn from_ops(
        ops: impl IntoIterator<Item = (usize, usize, Branch, LayerOp)>,
        cfg: &AttentionConfig,
    ) -> Self {
        let entries = ops
            .into_iter()
            .map(|(step, layer, branch, lop)| CostEntry {
                step,
                layer,
                branch,
                strategy: lop.strategy,
                op: lop.op,
                flops: op_flops(lop.op, cfg),
            })
            .collect();
        Self::from_entries(entries, full_flops(cfg))
    }

    fn from_entries(entries: Vec<CostEntry>, unit_flops: u64) -> Self {
        let total_flops = entries.iter().map(|e| e.flops).sum();
        let baseline_flops = unit_flops * entries.len() as u64;
        let mut per_strategy = BTreeMap::new();
        for e in &entries {
            *per_strategy.entry(e.strategy).or_insert(0) += e.flops;
        }
        let mut report = Self {
            unit_flops,
            total_flops,
            baseline_flops,
            fraction: 0.0,
            per_strategy,
            entries,
        };
        report.fraction = round4(report.exact_fraction());
        report
    }

    /// Unrounded `total / baseline`; 1 for an empty report.
    pub fn exact_fraction(&self) -> f64 {
        if self.baseline_flops == 0 {
            1.0
        } else {
            self.total_flops as f64 / self.baseline_flops as f64
        }
    }

    /// `(total, baseline)` FLOPs of one step.
    pub fn step_totals(&self, step: usize) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.step == step)
            .fold((0, 0), |(t, b), e| (t + e.flops, b + self.unit_flops))
    }

    /// Concatenates two reports over disjoint cells of the same config.
    pub fn merge(&self, other: &CostReport) -> CostReport {
        assert_eq!(
            self.unit_flops, other.unit_flops,
            "merging reports of different configs"
        );
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().cloned());
        entries.sort_by_key(|e| (e.step, e.layer, e.branch));
        Self::from_entries(entries, self.unit_flops)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Fixed-width table of every cell followed by per-strategy subtotals and
    /// the overall fraction.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>7} {:>9} {:>9} {:>14} {:>9}",
            "step", "layer", "branch", "strategy", "op", "flops", "fraction"
        );
        for e in &self.entries {
            let frac = e.flops as f64 / self.unit_flops.max(1) as f64;
            let _ = writeln!(
                s,
                "{:>5} {:>5} {:>7} {:>9} {:>9} {:>14} {:>9.4}",
                e.step,
                e.layer,
                e.branch.to_string(),
                e.strategy.token(),
                op_token(e.op),
                e.flops,
                frac
            );
        }
        let _ = writeln!(s);
        for (strategy, flops) in &self.per_strategy {
            let _ = writeln!(s, "{:<9} {:>14}", strategy.token(), flops);
        }
        let _ = writeln!(s, "total_flops: {}", self.total_flops);
        let _ = writeln!(s, "baseline_flops: {}", self.baseline_flops);
        let _ = writeln!(s, "fraction: {:.4}", self.fraction);
        s
    }
}

fn op_token(op: AttnOp) -> &'static str {
    match op {
        AttnOp::Full => "full",
        AttnOp::Refresh => "refresh",
        AttnOp::WarsReuse => "window",
        AttnOp::AstReuse => "step_ref",
        AttnOp::AscReuse => "cfg_ref",
    }
}

/// FLOPs of every (step, layer, branch) that `plan` implies.
pub fn aggregate(plan: &CompressionPlan, cfg: &ModelConfig) -> Result<CostReport> {
    aggregate_steps(plan, cfg, 0..cfg.num_steps)
}

/// Like [`aggregate`], restricted to `steps`. Refresh decisions still look at
/// the whole plan.
pub fn aggregate_steps(
    plan: &CompressionPlan,
    cfg: &ModelConfig,
    steps: Range<usize>,
) -> Result<CostReport> {
    let schedule = Schedule::build(plan, cfg)?;
    let cells = steps.flat_map(|t| {
        let schedule = &schedule;
        (0..cfg.num_layers).flat_map(move |i| {
            Branch::BOTH
                .into_iter()
                .map(move |b| (t, i, b, schedule.get(t, i, b)))
        })
    });
    Ok(CostReport::from_ops(cells, &cfg.attention()))
}
