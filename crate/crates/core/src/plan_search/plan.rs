use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sharing::{AttnOp, Branch, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMeta {
    pub delta: f64,
    pub seed: u64,
    pub steps: usize,
    pub layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub strategy: Strategy,
    /// Recompute the window residual at this entry instead of reusing it.
    pub refresh: bool,
}

impl From<Strategy> for PlanEntry {
    fn from(strategy: Strategy) -> Self {
        Self {
            strategy,
            refresh: false,
        }
    }
}

const FULL: PlanEntry = PlanEntry {
    strategy: Strategy::Full,
    refresh: false,
};

/// `(step, layer) -> strategy`. Anything not listed runs full attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanFile", into = "PlanFile")]
pub struct CompressionPlan {
    pub meta: PlanMeta,
    entries: BTreeMap<(usize, usize), PlanEntry>,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    meta: PlanMeta,
    entries: Vec<EntryRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct EntryRecord {
    step: usize,
    layer: usize,
    strategy: Strategy,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    refresh: bool,
}

impl TryFrom<PlanFile> for CompressionPlan {
    type Error = String;

    fn try_from(file: PlanFile) -> std::result::Result<Self, String> {
        let mut plan = CompressionPlan::new(file.meta);
        for r in file.entries {
            if plan.entries.contains_key(&(r.step, r.layer)) {
                return Err(format!(
                    "duplicate entry for step {} layer {}",
                    r.step, r.layer
                ));
            }
            plan.set_entry(
                r.step,
                r.layer,
                PlanEntry {
                    strategy: r.strategy,
                    refresh: r.refresh,
                },
            );
        }
        Ok(plan)
    }
}

impl From<CompressionPlan> for PlanFile {
    fn from(plan: CompressionPlan) -> Self {
        PlanFile {
            entries: plan.records(),
            meta: plan.meta,
        }
    }
}

impl CompressionPlan {
    pub fn new(meta: PlanMeta) -> Self {
        Self {
            meta,
            entries: BTreeMap::new(),
        }
    }

    /// Empty plan sized for `cfg`.
    pub fn full_for(cfg: &ModelConfig) -> Self {
        Self::new(PlanMeta {
            delta: 0.0,
            seed: cfg.seed,
            steps: cfg.num_steps,
            layers: cfg.num_layers,
            config_hash: Some(cfg.config_hash()),
        })
    }

    pub fn set(&mut self, step: usize, layer: usize, strategy: Strategy) {
        self.set_entry(step, layer, strategy.into());
    }

    pub fn set_entry(&mut self, step: usize, layer: usize, entry: PlanEntry) {
        if entry == FULL {
            self.entries.remove(&(step, layer));
        } else {
            self.entries.insert((step, layer), entry);
        }
    }

    pub fn entry(&self, step: usize, layer: usize) -> PlanEntry {
        self.entries.get(&(step, layer)).copied().unwrap_or(FULL)
    }

    pub fn strategy(&self, step: usize, layer: usize) -> Strategy {
        self.entry(step, layer).strategy
    }

    /// Explicit (non-default) entries in `(step, layer)` order.
    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize), PlanEntry)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn records(&self) -> Vec<EntryRecord> {
        self.entries
            .iter()
            .map(|(&(step, layer), e)| EntryRecord {
                step,
                layer,
                strategy: e.strategy,
                refresh: e.refresh,
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 over the entry list only, so equal assignments hash equally
    /// whatever their provenance.
    pub fn entries_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.records()).expect("entry records serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Rows are layers, columns are steps, cells are strategy tokens.
    pub fn heatmap_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer".to_string()];
        header.extend((0..self.meta.steps).map(|t| t.to_string()));
        w.write_record(&header)?;
        for layer in 0..self.meta.layers {
            let mut row = vec![layer.to_string()];
            row.extend((0..self.meta.steps).map(|t| self.strategy(t, layer).token().to_string()));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Copy holding only entries whose step lies in `steps`.
    pub fn restrict_steps(&self, steps: std::ops::Range<usize>) -> Self {
        let mut out = Self::new(self.meta.clone());
        for ((t, i), e) in self.entries() {
            if steps.contains(&t) {
                out.set_entry(t, i, e);
            }
        }
        out
    }
}

/// One infeasible or malformed plan entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub step: Option<usize>,
    pub layer: Option<usize>,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.step, self.layer) {
            (Some(t), Some(i)) => write!(f, "step {t} layer {i}: {}", self.reason),
            _ => f.write_str(&self.reason),
        }
    }
}

/// Whether `strategy` can run at `step` at all. Step sharing needs an output
/// from an earlier step; every other strategy is self-sufficient.
pub fn is_feasible(strategy: Strategy, step: usize) -> bool {
    !(strategy == Strategy::Ast && step == 0)
}

pub fn validate_plan(
    plan: &CompressionPlan,
    cfg: &ModelConfig,
) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let global = |reason: String| Violation {
        step: None,
        layer: None,
        reason,
    };
    if plan.meta.steps != cfg.num_steps {
        out.push(global(format!(
            "plan has {} steps, model config has {}",
            plan.meta.steps, cfg.num_steps
        )));
    }
    if plan.meta.layers != cfg.num_layers {
        out.push(global(format!(
            "plan has {} layers, model config has {}",
            plan.meta.layers, cfg.num_layers
        )));
    }
    for ((t, i), e) in plan.entries() {
        let mut bad = |reason: &str| {
            out.push(Violation {
                step: Some(t),
                layer: Some(i),
                reason: reason.to_string(),
            })
        };
        if t >= cfg.num_steps || i >= cfg.num_layers {
            bad("entry outside the step/layer grid");
            continue;
        }
        if !is_feasible(e.strategy, t) {
            bad("no cached output");
        }
        if e.refresh && !e.strategy.uses_window(Branch::Cond) {
            bad("refresh is only meaningful for wars and wars_asc");
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Resolved operation of one branch of one layer at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOp {
    pub strategy: Strategy,
    pub op: AttnOp,
}

impl LayerOp {
    pub const FULL: LayerOp = LayerOp {
        strategy: Strategy::Full,
        op: AttnOp::Full,
    };
}

/// The per-(step, layer, branch) operations a plan implies.
///
/// A full-attention entry also refreshes the window residual of a branch when
/// the next entry on that layer that computes either full or window attention
/// for the branch is a window entry that reuses the residual. Window entries
/// refresh when flagged or when no residual exists yet.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    ops: Vec<Vec<[LayerOp; 2]>>,
}

impl Schedule {
    #[allow(clippy::needless_range_loop)]
    pub fn build(plan: &CompressionPlan, cfg: &ModelConfig) -> Result<Self> {
        validate_plan(plan, cfg).map_err(Error::InfeasiblePlan)?;
        let (steps, layers) = (cfg.num_steps, cfg.num_layers);
        let mut ops = vec![vec![[LayerOp::FULL; 2]; layers]; steps];
        for layer in 0..layers {
            for branch in Branch::BOTH {
                let mut available = false;
                for t in 0..steps {
                    let e = plan.entry(t, layer);
                    let refresh = if e.strategy == Strategy::Full {
                        next_window_consumer(plan, t, layer, branch, steps)
                    } else {
                        e.refresh
                    };
                    let op = e.strategy.resolve(branch, refresh, available);
                    if op == AttnOp::Refresh {
                        available = true;
                    }
                    ops[t][layer][branch.index()] = LayerOp {
                        strategy: e.strategy,
                        op,
                    };
                }
            }
        }
        Ok(Self { ops })
    }

    pub fn num_steps(&self) -> usize {
        self.ops.len()
    }

    pub fn step(&self, t: usize) -> &[[LayerOp; 2]] {
        &self.ops[t]
    }

    pub fn get(&self, t: usize, layer: usize, branch: Branch) -> LayerOp {
        self.ops[t][layer][branch.index()]
    }
}

fn next_window_consumer(
    plan: &CompressionPlan,
    t: usize,
    layer: usize,
    branch: Branch,
    steps: usize,
) -> bool {
    for t2 in t + 1..steps {
        let e = plan.entry(t2, layer);
        if e.strategy == Strategy::Full {
            return false;
        }
        if e.strategy.uses_window(branch) {
            return !e.refresh;
        }
    }
    false
}
