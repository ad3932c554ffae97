//! A small diffusion transformer and a deterministic CFG sampler.
//!
//! Tokens are latent rows projected to the model width, plus a timestep
//! embedding and a class embedding (the last class row is the null class used
//! by the unconditional branch). Each block is pre-norm attention followed by
//! a pre-norm GELU MLP, both with residual connections. The sampler updates
//! `x <- x - eps / T` with `eps = eps_u + s (eps_c - eps_u)`, evaluating the
//! conditional branch before the unconditional one at every step.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{full_attention, AttentionConfig, Qkv};
use crate::cost_model::CostReport;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Stream, Tensor};
use crate::plan_search::{CompressionPlan, LayerOp, Schedule};
use crate::sharing::{self, AttnOp, Branch, CacheState};

pub const NUM_CLASSES: usize = 10;
pub const LATENT_CHANNELS: usize = 4;
const INIT_STD: f32 = 0.02;
const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_steps: usize,
    pub seq_len: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    /// Window attention band width in tokens.
    pub window: usize,
    pub guidance_scale: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let seq_len = 256;
        Self {
            num_layers: 8,
            num_steps: 16,
            seq_len,
            num_heads: 4,
            head_dim: 16,
            mlp_ratio: 4,
            window: AttentionConfig::default_window(seq_len),
            guidance_scale: 4.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A fast configuration for tests.
    pub fn small() -> Self {
        Self {
            num_layers: 2,
            num_steps: 4,
            seq_len: 16,
            num_heads: 2,
            head_dim: 4,
            mlp_ratio: 2,
            window: 2,
            guidance_scale: 4.0,
            seed: 0,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            seq_len: self.seq_len,
            window: self.window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("num_layers", self.num_layers),
            ("num_steps", self.num_steps),
            ("seq_len", self.seq_len),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("window", self.window),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::Config(
                "guidance_scale must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Hash of every field except the guidance scale, which does not affect
    /// weights or latents.
    pub fn config_hash(&self) -> String {
        let key = Self {
            guidance_scale: 0.0,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&key).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn same_architecture(&self, other: &Self) -> bool {
        self.config_hash() == other.config_hash()
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1_gain: Vec<f32>,
    ln1_bias: Vec<f32>,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_gain: Vec<f32>,
    ln2_bias: Vec<f32>,
    w_up: Tensor,
    w_down: Tensor,
}

/// Attention outputs of every layer and branch at one step, plus both noise
/// predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    /// `attn[layer][branch.index()]`, shape `[seq_len × model_dim]`.
    pub attn: Vec<[Tensor; 2]>,
    pub eps: [Tensor; 2],
}

impl StepTrace {
    pub fn attention(&self, layer: usize, branch: Branch) -> &Tensor {
        &self.attn[layer][branch.index()]
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub eps_cond: Tensor,
    pub eps_uncond: Tensor,
    /// Guided noise prediction.
    pub eps: Tensor,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latent: Tensor,
    pub traces: Option<Vec<StepTrace>>,
    pub cost: CostReport,
}

#[derive(Debug, Clone)]
pub struct ToyDit {
    cfg: ModelConfig,
    w_in: Tensor,
    time_emb: Tensor,
    class_emb: Tensor,
    blocks: Vec<Block>,
    lnf_gain: Vec<f32>,
    lnf_bias: Vec<f32>,
    w_out: Tensor,
}

impl ToyDit {
    /// Draws every weight from the seed's weight stream: `N(0, 0.02²)` for
    /// projections and embeddings, unit gains and zero biases for norms.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::for_stream(cfg.seed, Stream::Weights);
        let d = cfg.model_dim();
        let hidden = d * cfg.mlp_ratio;
        let mut randn = |r, c| Tensor::randn(vec![r, c], INIT_STD, &mut rng);
        let w_in = randn(LATENT_CHANNELS, d);
        let time_emb = randn(cfg.num_steps, d);
        let class_emb = randn(NUM_CLASSES + 1, d);
        let blocks = (0..cfg.num_layers)
            .map(|_| Block {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                wq: randn(d, d),
                wk: randn(d, d),
                wv: randn(d, d),
                wo: randn(d, d),
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                w_up: randn(d, hidden),
                w_down: randn(hidden, d),
            })
            .collect();
        let w_out = randn(d, LATENT_CHANNELS);
        Ok(Self {
            cfg: cfg.clone(),
            w_in,
            time_emb,
            class_emb,
            blocks,
            lnf_gain: vec![1.0; d],
            lnf_bias: vec![0.0; d],
            w_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Starting latent `[seq_len × LATENT_CHANNELS]` from the latent stream.
    pub fn initial_latent(&self) -> Tensor {
        let mut rng = Rng::for_stream(self.cfg.seed, Stream::Latent);
        Tensor::randn(vec![self.cfg.seq_len, LATENT_CHANNELS], 1.0, &mut rng)
    }

    /// Makes the timestep embedding identical for every step.
    pub fn clear_time_embedding(&mut self) {
        self.time_emb = Tensor::zeros(self.time_emb.shape().to_vec());
    }

    fn embed(
        &self,
        latent: &Tensor,
        step: usize,
        branch: Branch,
        class_id: usize,
    ) -> Result<Tensor> {
        let class_row = match branch {
            Branch::Cond => class_id,
            Branch::Uncond => NUM_CLASSES,
        };
        latent
            .matmul(&self.w_in)?
            .add_row(self.time_emb.row(step))?
            .add_row(self.class_emb.row(class_row))
    }

    /// `[L × D]` to `[heads × L × head_dim]`.
    fn split_heads(&self, x: &Tensor) -> Tensor {
        let (l, h, hd) = (self.cfg.seq_len, self.cfg.num_heads, self.cfg.head_dim);
        let d = h * hd;
        let mut out = vec![0.0f32; l * d];
        for head in 0..h {
            for i in 0..l {
                let src = &x.data()[i * d + head * hd..i * d + (head + 1) * hd];
                out[(head * l + i) * hd..(head * l + i + 1) * hd].copy_from_slice(src);
            }
        }
        Tensor::new(vec![h, l, hd], out).expect("split preserves values")
    }

    fn merge_heads(&self, x: &Tensor) -> Tensor {
        let (l, h, hd) = (self.cfg.seq_len, self.cfg.num_heads, self.cfg.head_dim);
        let d = h * hd;
        let mut out = vec![0.0f32; l * d];
        for head in 0..h {
            for i in 0..l {
                let src = &x.data()[(head * l + i) * hd..(head * l + i + 1) * hd];
                out[i * d + head * hd..i * d + (head + 1) * hd].copy_from_slice(src);
            }
        }
        Tensor::new(vec![l, d], out).expect("merge preserves values")
    }

    fn attention(
        &self,
        normed: &Tensor,
        layer: usize,
        step: usize,
        branch: Branch,
        lop: LayerOp,
        cache: &mut CacheState,
    ) -> Result<Tensor> {
        let block = &self.blocks[layer];
        let qkv = |normed: &Tensor| -> Result<Qkv> {
            Ok(Qkv::new(
                self.split_heads(&normed.matmul(&block.wq)?),
                self.split_heads(&normed.matmul(&block.wk)?),
                self.split_heads(&normed.matmul(&block.wv)?),
            ))
        };
        let cfg = self.cfg.attention();
        let out = match lop.op {
            AttnOp::Full => full_attention(&qkv(normed)?, &cfg)?,
            AttnOp::Refresh => {
                sharing::wars_refresh(&qkv(normed)?, &cfg, cache, layer, branch, step)?
            }
            AttnOp::WarsReuse => {
                sharing::wars_reuse(&qkv(normed)?, &cfg, cache, layer, branch, step)?
            }
            AttnOp::AstReuse => sharing::ast_reuse(cache, layer, branch, step)?,
            AttnOp::AscReuse => {
                if branch == Branch::Cond {
                    return Err(Error::Plan(format!(
                        "CFG sharing requested on the conditional branch (layer {layer}, step {step})"
                    )));
                }
                sharing::asc_reuse(cache, layer, step)?
            }
        };
        if lop.op != AttnOp::AstReuse {
            sharing::ast_store(cache, layer, branch, step, &out)?;
        }
        if branch == Branch::Cond && lop.strategy.shares_cfg() {
            sharing::asc_store(cache, layer, step, &out)?;
        }
        Ok(out)
    }

    /// One transformer block. Returns the new hidden state and the block's
    /// attention output (heads merged, before the output projection).
    pub fn block_forward(
        &self,
        x: &Tensor,
        layer: usize,
        step: usize,
        branch: Branch,
        lop: LayerOp,
        cache: &mut CacheState,
    ) -> Result<(Tensor, Tensor)> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} out of range")))?;
        let normed = x.layer_norm(&block.ln1_gain, &block.ln1_bias, LN_EPS)?;
        let attn = self.merge_heads(&self.attention(&normed, layer, step, branch, lop, cache)?);
        let x = x.add(&attn.matmul(&block.wo)?)?;
        let normed = x.layer_norm(&block.ln2_gain, &block.ln2_bias, LN_EPS)?;
        let mlp = normed.matmul(&block.w_up)?.gelu()?.matmul(&block.w_down)?;
        Ok((x.add(&mlp)?, attn))
    }

    /// Noise prediction of one branch. `ops[layer][branch]` selects the
    /// attention operation per layer.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        latent: &Tensor,
        step: usize,
        branch: Branch,
        class_id: usize,
        ops: &[[LayerOp; 2]],
        cache: &mut CacheState,
        mut record: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        if step >= self.cfg.num_steps {
            return Err(Error::Config(format!("step {step} out of range")));
        }
        if class_id >= NUM_CLASSES {
            return Err(Error::Config(format!(
                "class id {class_id} >= {NUM_CLASSES}"
            )));
        }
        if ops.len() != self.cfg.num_layers {
            return Err(Error::Plan(format!(
                "{} layer ops for {} layers",
                ops.len(),
                self.cfg.num_layers
            )));
        }
        let mut h = self.embed(latent, step, branch, class_id)?;
        for (layer, op) in ops.iter().enumerate() {
            let (next, attn) =
                self.block_forward(&h, layer, step, branch, op[branch.index()], cache)?;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(attn);
            }
            h = next;
        }
        h.layer_norm(&self.lnf_gain, &self.lnf_bias, LN_EPS)?
            .matmul(&self.w_out)
    }

    /// Both CFG branches at `step`, conditional first, then closes the step's
    /// CFG-sharing scope in `cache`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        latent: &Tensor,
        step: usize,
        class_id: usize,
        ops: &[[LayerOp; 2]],
        cache: &mut CacheState,
        guidance_scale: f32,
        trace: Option<&mut Vec<StepTrace>>,
    ) -> Result<StepOutput> {
        let mut rec_c = trace.is_some().then(Vec::new);
        let mut rec_u = trace.is_some().then(Vec::new);
        let eps_cond = self.forward(
            latent,
            step,
            Branch::Cond,
            class_id,
            ops,
            cache,
            rec_c.as_mut(),
        )?;
        let eps_uncond = self.forward(
            latent,
            step,
            Branch::Uncond,
            class_id,
            ops,
            cache,
            rec_u.as_mut(),
        )?;
        cache.end_step(step);
        let eps = cfg_combine(&eps_cond, &eps_uncond, guidance_scale)?;
        if let (Some(traces), Some(c), Some(u)) = (trace, rec_c, rec_u) {
            traces.push(StepTrace {
                step,
                attn: c.into_iter().zip(u).map(|(c, u)| [c, u]).collect(),
                eps: [eps_cond.clone(), eps_uncond.clone()],
            });
        }
        Ok(StepOutput {
            eps_cond,
            eps_uncond,
            eps,
        })
    }
}

/// `eps_u + s * (eps_c - eps_u)`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f32) -> Result<Tensor> {
    eps_uncond.add(&eps_cond.sub(eps_uncond)?.scale(scale)?)
}

/// One denoising update with step size `1 / num_steps`.
pub fn advance(latent: &Tensor, eps: &Tensor, num_steps: usize) -> Result<Tensor> {
    latent.sub(&eps.scale(1.0 / num_steps as f32)?)
}

/// Runs the full sampling loop under `plan`.
pub fn sample(
    model: &ToyDit,
    cfg: &ModelConfig,
    plan: &CompressionPlan,
    class_id: usize,
    trace: bool,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if !model.cfg.same_architecture(cfg) {
        return Err(Error::Config(
            "sampling config does not match the model's architecture or seed".into(),
        ));
    }
    let schedule = Schedule::build(plan, cfg)?;
    let mut cache = CacheState::new(cfg.num_layers);
    let mut latent = model.initial_latent();
    let mut traces = trace.then(Vec::new);
    let mut executed = Vec::with_capacity(cfg.num_steps * cfg.num_layers * 2);
    for t in 0..cfg.num_steps {
        let ops = schedule.step(t);
        let out = model.step(
            &latent,
            t,
            class_id,
            ops,
            &mut cache,
            cfg.guidance_scale,
            traces.as_mut(),
        )?;
        for (layer, pair) in ops.iter().enumerate() {
            for branch in Branch::BOTH {
                executed.push((t, layer, branch, pair[branch.index()]));
            }
        }
        latent = advance(&latent, &out.eps, cfg.num_steps)?;
    }
    Ok(SampleOutput {
        latent,
        traces,
        cost: CostReport::from_ops(executed, &cfg.attention()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::Strategy;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::small();
        let a = ToyDit::new(&cfg).unwrap();
        let b = ToyDit::new(&cfg).unwrap();
        assert!(a.w_in.bit_eq(&b.w_in));
        assert!(a.blocks[1].w_down.bit_eq(&b.blocks[1].w_down));
        assert!(a.initial_latent().bit_eq(&b.initial_latent()));
    }

    #[test]
    fn split_merge_round_trip() {
        let cfg = ModelConfig::small();
        let m = ToyDit::new(&cfg).unwrap();
        let x = Tensor::randn(vec![cfg.seq_len, cfg.model_dim()], 1.0, &mut Rng::new(1));
        assert!(m.merge_heads(&m.split_heads(&x)).bit_eq(&x));
    }

    #[test]
    fn asc_on_conditional_branch_is_a_plan_error() {
        let cfg = ModelConfig::small();
        let m = ToyDit::new(&cfg).unwrap();
        let mut cache = CacheState::new(cfg.num_layers);
        let x = Tensor::zeros(vec![cfg.seq_len, cfg.model_dim()]);
        let lop = LayerOp {
            strategy: Strategy::Asc,
            op: AttnOp::AscReuse,
        };
        let err = m
            .block_forward(&x, 0, 0, Branch::Cond, lop, &mut cache)
            .unwrap_err();
        assert!(matches!(err, Error::Plan(_)));
    }

    #[test]
    fn ast_reuse_without_history_is_a_hard_error() {
        let cfg = ModelConfig::small();
        let m = ToyDit::new(&cfg).unwrap();
        let mut cache = CacheState::new(cfg.num_layers);
        let x = Tensor::zeros(vec![cfg.seq_len, cfg.model_dim()]);
        let lop = LayerOp {
            strategy: Strategy::Ast,
            op: AttnOp::AstReuse,
        };
        let err = m
            .block_forward(&x, 0, 1, Branch::Cond, lop, &mut cache)
            .unwrap_err();
        assert!(matches!(err, Error::CacheMiss { .. }));
    }

    #[test]
    fn infeasible_plan_rejected_before_compute() {
        let cfg = ModelConfig::small();
        let m = ToyDit::new(&cfg).unwrap();
        let mut plan = CompressionPlan::full_for(&cfg);
        plan.set(0, 0, Strategy::Ast);
        assert!(matches!(
            sample(&m, &cfg, &plan, 0, false),
            Err(Error::InfeasiblePlan(_))
        ));
    }

    #[test]
    fn mismatched_config_rejected() {
        let cfg = ModelConfig::small();
        let m = ToyDit::new(&cfg).unwrap();
        let other = ModelConfig {
            seed: 9,
            ..cfg.clone()
        };
        let plan = CompressionPlan::full_for(&other);
        assert!(sample(&m, &other, &plan, 0, false).is_err());
    }

    #[test]
    fn cfg_combine_endpoints() {
        let mut rng = Rng::new(3);
        let c = Tensor::randn(vec![4, 4], 1.0, &mut rng);
        let u = Tensor::randn(vec![4, 4], 1.0, &mut rng);
        assert!(cfg_combine(&c, &u, 0.0).unwrap().bit_eq(&u));
        assert!(cfg_combine(&c, &u, 1.0).unwrap().max_abs_diff(&c).unwrap() < 1e-6);
    }
}
