use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use dit_compress::cost_model::aggregate;
use dit_compress::metrics::{similarity_report, SimilarityMode};
use dit_compress::model::{sample, ModelConfig, ToyDit};
use dit_compress::plan_search::{self, validate_plan, CompressionPlan, SearchConfig};

use crate::artifacts::{self, Manifest, COST, HEATMAP, LATENT, PLAN};
use crate::ModelArgs;

fn out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn read_plan(path: &Path) -> Result<CompressionPlan> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    CompressionPlan::from_json(&text).with_context(|| format!("parsing plan {}", path.display()))
}

/// Model config for `plan`: explicit flags win, otherwise the plan's own grid.
fn config_for_plan(model: &ModelArgs, plan: &CompressionPlan) -> ModelConfig {
    let cfg = model.config_with(
        model.layers.unwrap_or(plan.meta.layers),
        model.steps.unwrap_or(plan.meta.steps),
    );
    if let Some(hash) = &plan.meta.config_hash {
        if *hash != cfg.config_hash() {
            eprintln!("warning: plan was searched on a different model configuration");
        }
    }
    cfg
}

fn check_plan(plan: &CompressionPlan, cfg: &ModelConfig) -> Result<()> {
    if let Err(violations) = validate_plan(plan, cfg) {
        let list: Vec<String> = violations.iter().map(|v| format!("  {v}")).collect();
        bail!(
            "plan does not fit the model configuration:\n{}",
            list.join("\n")
        );
    }
    Ok(())
}

pub fn search(model: &ModelArgs, delta: f64, out: &Path) -> Result<()> {
    let cfg = model.config();
    let scfg = SearchConfig {
        class_id: model.class_id,
        ..SearchConfig::with_delta(delta)
    };
    let dit = ToyDit::new(&cfg)?;
    let outcome = plan_search::search(&dit, &cfg, &scfg)?;
    let started = Instant::now();
    let cost = aggregate(&outcome.plan, &cfg)?;
    let aggregate_time = started.elapsed();

    out_dir(out)?;
    artifacts::write(out, PLAN, outcome.plan.to_json()?)?;
    artifacts::write(out, COST, cost.to_json()?)?;
    artifacts::write(out, HEATMAP, outcome.plan.heatmap_csv()?)?;

    let mut manifest = Manifest::new("search", &cfg, model.class_id);
    manifest.search = Some(scfg);
    manifest.plan_hash = Some(outcome.plan.entries_hash());
    for (kind, name) in [("plan", PLAN), ("cost", COST), ("heatmap", HEATMAP)] {
        manifest.artifacts.insert(kind, name.to_string());
    }
    manifest
        .wall_time_s
        .insert("search", outcome.wall_time.as_secs_f64());
    manifest
        .wall_time_s
        .insert("cost", aggregate_time.as_secs_f64());
    manifest.cost_fraction = Some(cost.fraction);
    manifest.total_flops = Some(cost.total_flops);
    manifest.baseline_flops = Some(cost.baseline_flops);
    manifest.write(out)?;

    println!(
        "{} compressed entries over {} steps x {} layers ({} candidate evaluations)",
        outcome.plan.len(),
        cfg.num_steps,
        cfg.num_layers,
        outcome.candidate_evaluations
    );
    println!("fraction: {:.4}", cost.fraction);
    Ok(())
}

pub fn generate(model: &ModelArgs, plan_path: Option<&Path>, out: &Path) -> Result<()> {
    let (cfg, plan) = match plan_path {
        Some(path) => {
            let plan = read_plan(path)?;
            (config_for_plan(model, &plan), plan)
        }
        None => {
            let cfg = model.config();
            let plan = CompressionPlan::full_for(&cfg);
            (cfg, plan)
        }
    };
    check_plan(&plan, &cfg)?;
    let dit = ToyDit::new(&cfg)?;
    let started = Instant::now();
    let result = sample(&dit, &cfg, &plan, model.class_id, false)?;
    let generate_time = started.elapsed();
    let plan_hash = plan.entries_hash();

    out_dir(out)?;
    artifacts::write(
        out,
        LATENT,
        artifacts::latent_bytes(&result.latent, cfg.seed, &plan_hash)?,
    )?;
    artifacts::write(out, COST, result.cost.to_json()?)?;

    let mut manifest = Manifest::new("generate", &cfg, model.class_id);
    manifest.plan_source = plan_path.map(|p| p.display().to_string());
    manifest.plan_hash = Some(plan_hash);
    manifest.artifacts.insert("latent", LATENT.to_string());
    manifest.artifacts.insert("cost", COST.to_string());
    manifest
        .wall_time_s
        .insert("generate", generate_time.as_secs_f64());
    manifest.cost_fraction = Some(result.cost.fraction);
    manifest.total_flops = Some(result.cost.total_flops);
    manifest.baseline_flops = Some(result.cost.baseline_flops);
    manifest.write(out)?;

    println!("fraction: {:.4}", result.cost.fraction);
    Ok(())
}

pub fn analyze(model: &ModelArgs, out: &Path) -> Result<()> {
    let cfg = model.config();
    let dit = ToyDit::new(&cfg)?;
    let started = Instant::now();
    let traces = sample(
        &dit,
        &cfg,
        &CompressionPlan::full_for(&cfg),
        model.class_id,
        true,
    )?
    .traces
    .context("traced generation returned no traces")?;
    let generate_time = started.elapsed();

    let started = Instant::now();
    out_dir(out)?;
    let mut manifest = Manifest::new("analyze", &cfg, model.class_id);
    for (mode, prefix) in [
        (SimilarityMode::StepWise, "sim_step"),
        (SimilarityMode::CfgWise, "sim_cfg"),
    ] {
        for m in similarity_report(&traces, mode)? {
            let name = format!("{prefix}_layer{}.csv", m.layer);
            artifacts::write(out, &name, m.to_csv()?)?;
            manifest
                .artifacts
                .insert(prefix, format!("{prefix}_layer<i>.csv"));
        }
    }
    manifest
        .wall_time_s
        .insert("generate", generate_time.as_secs_f64());
    manifest
        .wall_time_s
        .insert("analyze", started.elapsed().as_secs_f64());
    manifest.write(out)?;

    println!(
        "wrote step-wise and CFG-wise similarity for {} layers to {}",
        cfg.num_layers,
        out.display()
    );
    Ok(())
}

pub fn cost(model: &ModelArgs, plan_path: &Path, out: Option<&Path>) -> Result<()> {
    let plan = read_plan(plan_path)?;
    let cfg = config_for_plan(model, &plan);
    check_plan(&plan, &cfg)?;
    let report = aggregate(&plan, &cfg)?;
    if let Some(out) = out {
        out_dir(out)?;
        artifacts::write(out, COST, report.to_json()?)?;
    }
    print!("{}", report.to_table());
    Ok(())
}
