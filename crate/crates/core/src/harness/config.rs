//! Typed experiment configuration and run manifests.

use crate::agent::{EvalMode, PpoConfig};
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{MaskConfig, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "MVFUSE_OUT";

/// One experiment: nested component configs plus the run schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name under the output root.
    pub name: String,
    pub seeds: Vec<u64>,
    /// Training budget in environment steps, rounded up to whole updates.
    pub total_steps: u64,
    /// Environment steps between evaluations; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_modes: Vec<EvalMode>,
    /// State pairs sampled for the representation correlation.
    pub spearman_pairs: usize,
    /// Updates between checkpoints; 0 checkpoints only at the end.
    pub checkpoint_every: u64,
    /// Output root; falls back to `$MVFUSE_OUT`, then `runs`.
    pub output_dir: Option<PathBuf>,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub weights: LossWeights,
    pub ppo: PpoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            total_steps: 100_000,
            eval_every: 0,
            eval_modes: vec![EvalMode::Full],
            spearman_pairs: 500,
            checkpoint_every: 0,
            output_dir: None,
            env: EnvConfig::default(),
            model: ModelConfig::default(),
            mask: MaskConfig::default(),
            weights: LossWeights::default(),
            ppo: PpoConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text`, applies `key.path=value` overrides, then validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad("name must be a plain directory name".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.spearman_pairs == 0 {
            return bad("spearman_pairs must be positive".into());
        }
        let nested = |r: Result<()>| {
            r.map_err(|e| match e {
                Error::InvalidArgument(m) | Error::Config(m) => Error::Config(m),
                other => other,
            })
        };
        nested(self.env.validate())?;
        nested(self.model.validate())?;
        nested(self.mask.validate(self.env.view_size))?;
        nested(self.weights.validate())?;
        nested(self.ppo.validate())?;
        let k = self.env.n_views();
        for m in &self.eval_modes {
            if let EvalMode::MissingView { view } | EvalMode::NoisyView { view } = m {
                if *view >= k {
                    return bad(format!("eval_modes: {m} needs a view index below {k}"));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.name)
    }

    pub fn updates(&self) -> u64 {
        let per = (self.ppo.rollout_len * self.ppo.workers) as u64;
        self.total_steps.div_ceil(per)
    }
}

/// Sets `a.b.c = value` inside `table`; the value is parsed as a TOML value,
/// falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' must look like key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override '{spec}' has an empty key")));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override '{spec}': {k} is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    /// Relative to the run directory.
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub curve: PathBuf,
    pub checkpoint: PathBuf,
    pub status: RunStatus,
    pub wall_clock_secs: f64,
    pub updates_done: u64,
}

/// Everything needed to reproduce a run, written before training starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub config_hash: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedRecord>,
    pub status: RunStatus,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        let seeds = config
            .seeds
            .iter()
            .map(|&seed| {
                let dir = PathBuf::from(format!("seed-{seed}"));
                SeedRecord {
                    seed,
                    metrics: dir.join("metrics.jsonl"),
                    curve: dir.join("curve.csv"),
                    checkpoint: dir.join("checkpoint.bin"),
                    dir,
                    status: RunStatus::Pending,
                    wall_clock_secs: 0.0,
                    updates_done: 0,
                }
            })
            .collect();
        Self {
            schema: 1,
            config_hash: config.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds,
            status: RunStatus::Pending,
        }
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        write_atomic(&run_dir.join("manifest.json"), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(run_dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
