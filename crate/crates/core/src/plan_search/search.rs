use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::cost_model::{full_flops, op_flops};
use crate::error::{Error, Result};
use crate::metrics::mrae;
use crate::model::{advance, ModelConfig, ToyDit};
use crate::numerics::Tensor;
use crate::sharing::{Branch, CacheState, Strategy};

use super::plan::{is_feasible, CompressionPlan, LayerOp, PlanMeta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Loss budget; layer `i` (1-based) of `M` accepts a strategy whose loss is
    /// strictly below `i / M * delta`.
    pub delta: f64,
    /// Candidates, most compressive first.
    pub strategies: Vec<Strategy>,
    pub class_id: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self::with_delta(0.05)
    }
}

impl SearchConfig {
    pub fn with_delta(delta: f64) -> Self {
        Self {
            delta,
            strategies: Strategy::SEARCH_ORDER.to_vec(),
            class_id: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::Config(format!(
                "delta must be finite and >= 0, got {}",
                self.delta
            )));
        }
        // Must be a subsequence of the canonical order, which is sorted by
        // retained attention FLOPs.
        let mut rank = Strategy::SEARCH_ORDER.iter();
        for s in &self.strategies {
            if !rank.any(|r| r == s) {
                return Err(Error::Config(format!(
                    "strategy list must be an ordered subset of {:?}, got {:?}",
                    Strategy::SEARCH_ORDER,
                    self.strategies
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub plan: CompressionPlan,
    /// Latent reached by the compressed trajectory the search followed.
    pub latent: Tensor,
    pub candidate_evaluations: usize,
    pub wall_time: Duration,
}

/// Ops for one candidate forward at `step`. Caches written by trial passes
/// are thrown away, so full layers skip the residual refresh there.
fn step_ops(strategies: &[Strategy], cache: &CacheState, commit: bool) -> Vec<[LayerOp; 2]> {
    strategies
        .iter()
        .enumerate()
        .map(|(layer, &strategy)| {
            Branch::BOTH.map(|b| {
                let refresh = commit && strategy == Strategy::Full;
                LayerOp {
                    strategy,
                    op: strategy.resolve(b, refresh, cache.residual_step(layer, b).is_some()),
                }
            })
        })
        .collect()
}

/// Whether a layer's ops spend less attention than running it in full. A
/// window strategy that has to refresh its residual spends more.
fn saves_flops(pair: &[LayerOp; 2], cfg: &AttentionConfig) -> bool {
    pair.iter().map(|o| op_flops(o.op, cfg)).sum::<u64>() < 2 * full_flops(cfg)
}

/// Greedy per-step, per-layer plan search.
///
/// At each step the reference is the uncompressed model's guided noise
/// prediction at the current latent. Layers are visited in order; each tries
/// the candidates in order on top of the strategies already chosen for
/// earlier layers of this step and keeps the first whose loss is strictly
/// below the layer's threshold. Candidates that are infeasible at the step, or
/// that would not reduce the layer's attention FLOPs, are skipped without
/// evaluation. Every candidate runs on a copy of the cache.
/// The chosen strategies are then replayed on the real cache and the latent
/// advances with that compressed prediction.
pub fn search(model: &ToyDit, cfg: &ModelConfig, scfg: &SearchConfig) -> Result<SearchOutcome> {
    scfg.validate()?;
    cfg.validate()?;
    if model.config().config_hash() != cfg.config_hash() {
        return Err(Error::Config(
            "search config does not match the model".into(),
        ));
    }
    let started = Instant::now();
    let attn_cfg = cfg.attention();
    let layers = cfg.num_layers;
    let mut plan = CompressionPlan::new(PlanMeta {
        delta: scfg.delta,
        seed: cfg.seed,
        steps: cfg.num_steps,
        layers,
        config_hash: Some(cfg.config_hash()),
    });
    let full_ops = vec![[LayerOp::FULL; 2]; layers];
    let mut cache = CacheState::new(layers);
    let mut latent = model.initial_latent();
    let mut evaluations = 0;

    for t in 0..cfg.num_steps {
        let mut scratch = CacheState::new(layers);
        let reference = model
            .step(
                &latent,
                t,
                scfg.class_id,
                &full_ops,
                &mut scratch,
                cfg.guidance_scale,
                None,
            )?
            .eps;

        let mut chosen = vec![Strategy::Full; layers];
        for layer in 0..layers {
            let threshold = (layer + 1) as f64 / layers as f64 * scfg.delta;
            for &candidate in &scfg.strategies {
                if !is_feasible(candidate, t) {
                    continue;
                }
                let mut trial = chosen.clone();
                trial[layer] = candidate;
                let ops = step_ops(&trial, &cache, false);
                if !saves_flops(&ops[layer], &attn_cfg) {
                    continue;
                }
                let mut trial_cache = cache.clone();
                let out = model.step(
                    &latent,
                    t,
                    scfg.class_id,
                    &ops,
                    &mut trial_cache,
                    cfg.guidance_scale,
                    None,
                )?;
                evaluations += 1;
                if mrae(&reference, &out.eps)? < threshold {
                    chosen[layer] = candidate;
                    break;
                }
            }
        }

        let ops = step_ops(&chosen, &cache, true);
        let out = model.step(
            &latent,
            t,
            scfg.class_id,
            &ops,
            &mut cache,
            cfg.guidance_scale,
            None,
        )?;
        latent = advance(&latent, &out.eps, cfg.num_steps)?;
        for (layer, &s) in chosen.iter().enumerate() {
            plan.set(t, layer, s);
        }
    }

    Ok(SearchOutcome {
        plan,
        latent,
        candidate_evaluations: evaluations,
        wall_time: started.elapsed(),
    })
}
