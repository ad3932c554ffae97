//! Attention-output caches and the three reuse mechanisms.
//!
//! * Residual sharing: at a refresh step `r` the cache keeps
//!   `R_r = full(Q,K,V) - window(Q,K,V)`; later steps return
//!   `window(Q_k,K_k,V_k) + R_r`.
//! * Step sharing: a layer returns the attention output stored at an earlier
//!   step, with no attention arithmetic.
//! * CFG sharing: within one step the unconditional pass returns the
//!   conditional pass's attention output.
//!
//! Residual and step caches are kept per CFG branch. All slots hold one value
//! and a new store overwrites the old one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{full_attention, window_attention, AttentionConfig, Qkv};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Cond,
    Uncond,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Cond, Branch::Uncond];

    pub fn index(self) -> usize {
        match self {
            Branch::Cond => 0,
            Branch::Uncond => 1,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Cond => "cond",
            Branch::Uncond => "uncond",
        })
    }
}

/// Per-(step, layer) compression choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Full,
    Ast,
    Wars,
    Asc,
    WarsAsc,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Full,
        Strategy::Ast,
        Strategy::Wars,
        Strategy::Asc,
        Strategy::WarsAsc,
    ];

    /// Candidate order for plan search, most compressive first.
    pub const SEARCH_ORDER: [Strategy; 4] = [
        Strategy::Ast,
        Strategy::WarsAsc,
        Strategy::Wars,
        Strategy::Asc,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Ast => "ast",
            Strategy::Wars => "wars",
            Strategy::Asc => "asc",
            Strategy::WarsAsc => "wars_asc",
        }
    }

    /// Whether the conditional branch uses window attention with a residual.
    pub fn uses_window(self, branch: Branch) -> bool {
        match self {
            Strategy::Wars => true,
            Strategy::WarsAsc => branch == Branch::Cond,
            _ => false,
        }
    }

    /// Whether the unconditional branch reuses the conditional output.
    pub fn shares_cfg(self) -> bool {
        matches!(self, Strategy::Asc | Strategy::WarsAsc)
    }

    /// Concrete attention operation for one branch.
    ///
    /// `refresh` forces a residual refresh where the branch computes full or
    /// window attention; window strategies also refresh when no residual is
    /// available yet.
    pub fn resolve(self, branch: Branch, refresh: bool, residual_available: bool) -> AttnOp {
        match (self, branch) {
            (Strategy::Full, _) | (Strategy::Asc, Branch::Cond) => {
                if refresh && self == Strategy::Full {
                    AttnOp::Refresh
                } else {
                    AttnOp::Full
                }
            }
            (Strategy::Ast, _) => AttnOp::AstReuse,
            (Strategy::Asc | Strategy::WarsAsc, Branch::Uncond) => AttnOp::AscReuse,
            (Strategy::Wars, _) | (Strategy::WarsAsc, Branch::Cond) => {
                if refresh || !residual_available {
                    AttnOp::Refresh
                } else {
                    AttnOp::WarsReuse
                }
            }
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.token() == s)
            .ok_or_else(|| Error::Plan(format!("unknown strategy token `{s}`")))
    }
}

/// What one branch of one layer actually computes at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnOp {
    /// Full attention.
    Full,
    /// Full and window attention; stores the residual, returns full.
    Refresh,
    /// Window attention plus the cached residual.
    WarsReuse,
    /// Output cached at an earlier step.
    AstReuse,
    /// Conditional output of the current step.
    AscReuse,
}

#[derive(Debug, Clone)]
struct Stamped {
    step: usize,
    value: Tensor,
}

#[derive(Debug, Clone, Default)]
struct BranchSlots {
    residual: Option<Stamped>,
    output: Option<Stamped>,
}

/// Cached tensors for every layer. Cloning gives an independent snapshot.
#[derive(Debug, Clone)]
pub struct CacheState {
    slots: Vec<[BranchSlots; 2]>,
    cond: Vec<Option<Stamped>>,
}

impl CacheState {
    pub fn new(num_layers: usize) -> Self {
        Self {
            slots: vec![Default::default(); num_layers],
            cond: vec![None; num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    fn slot(&self, layer: usize, branch: Branch) -> Result<&BranchSlots> {
        self.slots
            .get(layer)
            .map(|s| &s[branch.index()])
            .ok_or_else(|| self.layer_err(layer))
    }

    fn slot_mut(&mut self, layer: usize, branch: Branch) -> Result<&mut BranchSlots> {
        let err = self.layer_err(layer);
        self.slots
            .get_mut(layer)
            .map(|s| &mut s[branch.index()])
            .ok_or(err)
    }

    fn layer_err(&self, layer: usize) -> Error {
        Error::Config(format!(
            "layer {layer} out of range for cache with {} layers",
            self.slots.len()
        ))
    }

    pub fn residual_step(&self, layer: usize, branch: Branch) -> Option<usize> {
        self.slot(layer, branch)
            .ok()?
            .residual
            .as_ref()
            .map(|s| s.step)
    }

    pub fn residual(&self, layer: usize, branch: Branch) -> Option<&Tensor> {
        self.slot(layer, branch)
            .ok()?
            .residual
            .as_ref()
            .map(|s| &s.value)
    }

    pub fn output_step(&self, layer: usize, branch: Branch) -> Option<usize> {
        self.slot(layer, branch)
            .ok()?
            .output
            .as_ref()
            .map(|s| s.step)
    }

    pub fn cond_output_step(&self, layer: usize) -> Option<usize> {
        self.cond.get(layer)?.as_ref().map(|s| s.step)
    }

    /// Drops the conditional outputs recorded for `step`.
    pub fn end_step(&mut self, step: usize) {
        for slot in &mut self.cond {
            if slot.as_ref().is_some_and(|s| s.step == step) {
                *slot = None;
            }
        }
    }
}

/// Computes full attention and caches `full - window` as the residual for
/// `(layer, branch)`, stamped with `step`. Returns the full output.
pub fn wars_refresh(
    qkv: &Qkv,
    cfg: &AttentionConfig,
    cache: &mut CacheState,
    layer: usize,
    branch: Branch,
    step: usize,
) -> Result<Tensor> {
    let full = full_attention(qkv, cfg)?;
    let window = window_attention(qkv, cfg)?;
    let residual = full.sub(&window)?;
    cache.slot_mut(layer, branch)?.residual = Some(Stamped {
        step,
        value: residual,
    });
    Ok(full)
}

/// Window attention plus the cached residual. Leaves the cache untouched.
pub fn wars_reuse(
    qkv: &Qkv,
    cfg: &AttentionConfig,
    cache: &CacheState,
    layer: usize,
    branch: Branch,
    step: usize,
) -> Result<Tensor> {
    let cached = cache
        .slot(layer, branch)?
        .residual
        .as_ref()
        .ok_or(Error::CacheMiss {
            kind: "window residual",
            layer,
            branch,
        })?;
    if cached.step >= step {
        return Err(Error::Ordering {
            layer,
            step,
            detail: format!("residual was stored at step {}", cached.step),
        });
    }
    window_attention(qkv, cfg)?.add(&cached.value)
}

pub fn ast_store(
    cache: &mut CacheState,
    layer: usize,
    branch: Branch,
    step: usize,
    output: &Tensor,
) -> Result<()> {
    cache.slot_mut(layer, branch)?.output = Some(Stamped {
        step,
        value: output.clone(),
    });
    Ok(())
}

/// Attention output stored at an earlier step for `(layer, branch)`.
pub fn ast_reuse(cache: &CacheState, layer: usize, branch: Branch, step: usize) -> Result<Tensor> {
    let cached = cache
        .slot(layer, branch)?
        .output
        .as_ref()
        .ok_or(Error::CacheMiss {
            kind: "attention output",
            layer,
            branch,
        })?;
    if cached.step >= step {
        return Err(Error::Ordering {
            layer,
            step,
            detail: format!("output was stored at step {}", cached.step),
        });
    }
    Ok(cached.value.clone())
}

pub fn asc_store(cache: &mut CacheState, layer: usize, step: usize, output: &Tensor) -> Result<()> {
    let err = cache.layer_err(layer);
    *cache.cond.get_mut(layer).ok_or(err)? = Some(Stamped {
        step,
        value: output.clone(),
    });
    Ok(())
}

/// The conditional branch's output for `(layer, step)`. Only valid within the
/// step that stored it.
pub fn asc_reuse(cache: &CacheState, layer: usize, step: usize) -> Result<Tensor> {
    let slot = cache
        .cond
        .get(layer)
        .ok_or_else(|| cache.layer_err(layer))?;
    match slot {
        Some(s) if s.step == step => Ok(s.value.clone()),
        Some(s) => Err(Error::Ordering {
            layer,
            step,
            detail: format!("conditional output belongs to step {}", s.step),
        }),
        None => Err(Error::Ordering {
            layer,
            step,
            detail: "conditional pass has not run for this step".into(),
        }),
    }
}
