//! Flag parsing and three-level option resolution (flags > TOML file >
//! defaults), plus the `run_config.json` echo written into every output
//! directory.

use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a multi-fidelity PDE dataset.
    Generate(GenerateArgs),
    /// Train a surrogate model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Evaluate a checkpoint across a grid of fidelities against a
    /// reference dataset.
    SweepFidelity(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// TOML file supplying defaults for any omitted flag
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// PDE family: poisson | heat | burgers
    #[arg(long)]
    pub pde: Option<String>,
    /// Comma-separated training mesh sizes, ascending (e.g. 8,16,32,64)
    #[arg(long)]
    pub meshes: Option<String>,
    /// Comma-separated example counts per mesh (e.g. 100,50,20,5)
    #[arg(long)]
    pub counts: Option<String>,
    /// Number of test examples (generated at the highest mesh)
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model kind: ifc-ode2 | ifc-gpode | sf | pca-gp | drc
    #[arg(long)]
    pub model: Option<String>,
    /// Dataset directory produced by `generate`
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Latent output dimension K
    #[arg(long)]
    pub k: Option<usize>,
    /// Hidden width of every network component
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Adam learning rate (accepted range [1e-3, 1e-2])
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs (max 5000)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// RK4 steps per unit fidelity
    #[arg(long)]
    pub rk4_steps: Option<usize>,
    /// Output-space folding R for ifc-gpode (0 = automatic)
    #[arg(long)]
    pub fold: Option<usize>,
    /// Adam iterations per GP hyperparameter fit (pca-gp, drc)
    #[arg(long)]
    pub gp_iters: Option<usize>,
    /// Compute test nRMSE every n epochs (0 = never)
    #[arg(long)]
    pub val_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint file or the directory containing model.ckpt
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset directory whose test split is evaluated
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint file or the directory containing model.ckpt
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Fidelity grid, either start:stop:step (stop included) or a comma list
    #[arg(long)]
    pub m: Option<String>,
    /// Reference dataset directory (gold-standard fields in its test split)
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Fully resolved run configuration, echoed into every output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pde: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meshes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_grid: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rk4_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gp_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_every: Option<usize>,
    pub seed: u64,
    pub out: String,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Echo the resolved configuration (and its hash) into the output
    /// directory; re-running with this file's values reproduces the run.
    pub fn write_echo(&self, dir: &Path) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Echo<'a> {
            config_hash: String,
            #[serde(flatten)]
            config: &'a RunConfig,
        }
        std::fs::create_dir_all(dir)?;
        let echo = Echo { config_hash: self.hash(), config: self };
        std::fs::write(dir.join("run_config.json"), serde_json::to_string_pretty(&echo).unwrap())
    }
}

/// TOML config file wrapper: a flat table keyed by the long flag names.
pub struct FileConfig(Option<toml::Table>);

impl FileConfig {
    pub fn load(path: &Option<PathBuf>) -> Result<Self, String> {
        match path {
            None => Ok(FileConfig(None)),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                let table: toml::Table = text.parse().map_err(|e| format!("bad TOML in {}: {e}", p.display()))?;
                Ok(FileConfig(Some(table)))
            }
        }
    }

    pub fn str_field(&self, key: &str) -> Option<String> {
        self.0.as_ref()?.get(key)?.as_str().map(|s| s.to_string())
    }

    pub fn usize_field(&self, key: &str) -> Option<usize> {
        self.0.as_ref()?.get(key)?.as_integer().map(|v| v as usize)
    }

    pub fn u64_field(&self, key: &str) -> Option<u64> {
        self.0.as_ref()?.get(key)?.as_integer().map(|v| v as u64)
    }

    pub fn f64_field(&self, key: &str) -> Option<f64> {
        let v = self.0.as_ref()?.get(key)?;
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
    }
}

pub fn parse_usize_list(text: &str, what: &str) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("bad {what} entry {t:?}: {e}")))
        .collect()
}

/// Fidelity grid: `start:stop:step` (inclusive of stop) or a comma list.
pub fn parse_m_grid(text: &str) -> Result<Vec<f64>, String> {
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected start:stop:step, got {text:?}"));
        }
        let start: f64 = parts[0].trim().parse().map_err(|e| format!("bad start: {e}"))?;
        let stop: f64 = parts[1].trim().parse().map_err(|e| format!("bad stop: {e}"))?;
        let step: f64 = parts[2].trim().parse().map_err(|e| format!("bad step: {e}"))?;
        if step <= 0.0 || stop < start {
            return Err(format!("need step > 0 and stop >= start in {text:?}"));
        }
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let v = start + k as f64 * step;
            if v > stop + 1e-12 {
                break;
            }
            out.push(v);
            k += 1;
        }
        if let Some(&last) = out.last() {
            if last < stop - 1e-12 {
                out.push(stop);
            }
        }
        Ok(out)
    } else {
        text.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad m value {t:?}: {e}")))
            .collect()
    }
}
