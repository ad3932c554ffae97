//! On-disk formats: the latent dump and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use dit_compress::model::ModelConfig;
use dit_compress::numerics::Tensor;
use dit_compress::plan_search::SearchConfig;

pub const PLAN: &str = "plan.json";
pub const COST: &str = "cost.json";
pub const HEATMAP: &str = "heatmap.csv";
pub const LATENT: &str = "latent.bin";
pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct LatentHeader<'a> {
    shape: &'a [usize],
    seed: u64,
    plan_hash: &'a str,
}

/// One JSON header line, then the values as little-endian `f32`.
pub fn latent_bytes(latent: &Tensor, seed: u64, plan_hash: &str) -> Result<Vec<u8>> {
    let header = LatentHeader {
        shape: latent.shape(),
        seed,
        plan_hash,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(latent.len() * 4);
    for v in latent.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: ModelConfig,
    pub config_hash: String,
    pub class_id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan_source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan_hash: Option<String>,
    /// Artifact kind to file name, relative to the manifest.
    pub artifacts: BTreeMap<&'static str, String>,
    pub wall_time_s: BTreeMap<&'static str, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_flops: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_flops: Option<u64>,
}

impl Manifest {
    pub fn new(command: &'static str, config: &ModelConfig, class_id: usize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: config.clone(),
            config_hash: config.config_hash(),
            class_id,
            search: None,
            plan_source: None,
            plan_hash: None,
            artifacts: BTreeMap::new(),
            wall_time_s: BTreeMap::new(),
            cost_fraction: None,
            total_flops: None,
            baseline_flops: None,
        }
    }

    /// Writes `manifest.json` via a temporary file in the same directory, so
    /// readers never observe a partial manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(dir)
            .with_context(|| format!("creating temporary manifest in {}", dir.display()))?;
        serde_json::to_writer_pretty(&mut tmp, self)?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;
        let path = dir.join(MANIFEST);
        tmp.persist(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
