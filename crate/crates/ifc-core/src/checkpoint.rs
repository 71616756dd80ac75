//! Model checkpoints: a one-line JSON header describing the architecture and
//! run metadata, a newline, then every parameter as little-endian f64.

use crate::baselines::{DrcModel, GpRegressor, PcaGpModel};
use crate::gpode::{GpodeModel, SeKernel, TensorGaussianPosterior};
use crate::ifc::{IfcOde2Model, ModelError, SfModel};
use crate::nn::Mlp;
use crate::pdegen::{FidelityMap, PdeKind};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("gp reconstruction: {0}")]
    Gp(String),
}

/// Run-level metadata every checkpoint carries so `eval` and
/// `sweep-fidelity` can interpret the model without the training dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub dataset_kind: PdeKind,
    pub fidelity_map: Option<FidelityMap>,
    pub d: usize,
    pub input_dim: usize,
    pub seed: u64,
    pub config_hash: String,
    pub steps_per_unit: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelHeader {
    IfcOde2 {
        k: usize,
        phi_widths: Vec<usize>,
        beta_widths: Vec<usize>,
        gamma_widths: Vec<usize>,
    },
    IfcGpode {
        k: usize,
        phi_widths: Vec<usize>,
        beta_widths: Vec<usize>,
        mode_sizes: Vec<usize>,
        fidelities: Vec<f64>,
        jitter: f64,
    },
    Sf {
        k: usize,
        h0_widths: Vec<usize>,
    },
    PcaGp {
        k: usize,
        n_train: usize,
    },
    Drc {
        k: usize,
        layer_ks: Vec<usize>,
        layer_ns: Vec<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub meta: RunMeta,
    pub model: ModelHeader,
    pub blob_len: usize,
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, blob: &[f64]) -> Result<(), CheckpointError> {
    debug_assert_eq!(header.blob_len, blob.len());
    let mut buf = serde_json::to_string(header)?.into_bytes();
    buf.push(b'\n');
    buf.reserve(blob.len() * 8);
    for v in blob {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Corrupt("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    let payload = &bytes[nl + 1..];
    if payload.len() != header.blob_len * 8 {
        return Err(CheckpointError::Corrupt(format!(
            "blob is {} bytes, header says {}",
            payload.len(),
            header.blob_len * 8
        )));
    }
    let blob: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, blob))
}

/// Any trained model, with a uniform prediction surface.
pub enum TrainedModel {
    IfcOde2(IfcOde2Model),
    IfcGpode(GpodeModel),
    Sf(SfModel),
    PcaGp(PcaGpModel),
    Drc(DrcModel),
}

fn pca_gp_blob(m: &PcaGpModel, blob: &mut Vec<f64>) {
    blob.extend_from_slice(&m.mean);
    blob.extend_from_slice(&m.components);
    for gp in &m.gps {
        blob.push(gp.log_lengthscale);
        blob.push(gp.log_variance);
        blob.push(gp.log_noise);
    }
    // inputs are shared across the per-score GPs
    for x in &m.gps[0].inputs {
        blob.extend_from_slice(x);
    }
    for gp in &m.gps {
        blob.extend_from_slice(&gp.targets);
    }
}

fn pca_gp_from_blob(
    blob: &[f64],
    off: &mut usize,
    d: usize,
    k: usize,
    n: usize,
    input_dim: usize,
) -> Result<PcaGpModel, CheckpointError> {
    let take = |len: usize, off: &mut usize| -> Vec<f64> {
        let v = blob[*off..*off + len].to_vec();
        *off += len;
        v
    };
    let mean = take(d, off);
    let components = take(d * k, off);
    let hypers: Vec<[f64; 3]> = (0..k)
        .map(|_| {
            let h = take(3, off);
            [h[0], h[1], h[2]]
        })
        .collect();
    let flat_inputs = take(n * input_dim, off);
    let inputs: Vec<Vec<f64>> = flat_inputs.chunks(input_dim).map(|c| c.to_vec()).collect();
    let mut gps = Vec::with_capacity(k);
    for h in hypers {
        let targets = take(n, off);
        let gp = GpRegressor::from_parts(inputs.clone(), targets, h[0], h[1], h[2])
            .map_err(|e| CheckpointError::Gp(e.to_string()))?;
        gps.push(gp);
    }
    Ok(PcaGpModel { mean, components, gps, d, k })
}

impl TrainedModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TrainedModel::IfcOde2(_) => "ifc-ode2",
            TrainedModel::IfcGpode(_) => "ifc-gpode",
            TrainedModel::Sf(_) => "sf",
            TrainedModel::PcaGp(_) => "pca-gp",
            TrainedModel::Drc(_) => "drc",
        }
    }

    pub fn to_checkpoint(&self, meta: RunMeta) -> (CheckpointHeader, Vec<f64>) {
        let (model, blob) = match self {
            TrainedModel::IfcOde2(m) => (
                ModelHeader::IfcOde2 {
                    k: m.latent_k,
                    phi_widths: m.phi.widths().to_vec(),
                    beta_widths: m.beta.widths().to_vec(),
                    gamma_widths: m.gamma.widths().to_vec(),
                },
                m.params(),
            ),
            TrainedModel::IfcGpode(m) => (
                ModelHeader::IfcGpode {
                    k: m.latent_k,
                    phi_widths: m.phi.widths().to_vec(),
                    beta_widths: m.beta.widths().to_vec(),
                    mode_sizes: m.posterior.mode_sizes.clone(),
                    fidelities: m.fidelities.clone(),
                    jitter: m.jitter,
                },
                m.params(),
            ),
            TrainedModel::Sf(m) => (
                ModelHeader::Sf { k: m.latent_k, h0_widths: m.h0.widths().to_vec() },
                m.params(),
            ),
            TrainedModel::PcaGp(m) => {
                let mut blob = Vec::new();
                pca_gp_blob(m, &mut blob);
                (ModelHeader::PcaGp { k: m.k, n_train: m.gps[0].inputs.len() }, blob)
            }
            TrainedModel::Drc(m) => {
                let mut blob = Vec::new();
                for layer in &m.layers {
                    pca_gp_blob(layer, &mut blob);
                }
                (
                    ModelHeader::Drc {
                        k: m.layers.iter().map(|l| l.k).max().unwrap_or(0),
                        layer_ks: m.layers.iter().map(|l| l.k).collect(),
                        layer_ns: m.layers.iter().map(|l| l.gps[0].inputs.len()).collect(),
                    },
                    blob,
                )
            }
        };
        let blob_len = blob.len();
        (CheckpointHeader { meta, model, blob_len }, blob)
    }

    pub fn from_checkpoint(header: &CheckpointHeader, blob: &[f64]) -> Result<Self, CheckpointError> {
        let meta = &header.meta;
        match &header.model {
            ModelHeader::IfcOde2 { k, phi_widths, beta_widths, gamma_widths } => {
                let mut m = IfcOde2Model {
                    phi: Mlp::zeros(phi_widths),
                    beta: Mlp::zeros(beta_widths),
                    gamma: Mlp::zeros(gamma_widths),
                    nu: vec![0.0; meta.d * k],
                    log_sigma2: 0.0,
                    d: meta.d,
                    latent_k: *k,
                    input_dim: meta.input_dim,
                };
                if blob.len() != m.param_count() {
                    return Err(CheckpointError::Corrupt("parameter count mismatch".into()));
                }
                m.set_params(blob);
                Ok(TrainedModel::IfcOde2(m))
            }
            ModelHeader::IfcGpode { k, phi_widths, beta_widths, mode_sizes, fidelities, jitter } => {
                let total: usize = mode_sizes.iter().product();
                let mut m = GpodeModel {
                    phi: Mlp::zeros(phi_widths),
                    beta: Mlp::zeros(beta_widths),
                    kernel: SeKernel::new(1.0, 1.0),
                    posterior: TensorGaussianPosterior::init(mode_sizes, vec![0.0; total], 1.0),
                    fidelities: fidelities.clone(),
                    log_sigma2: 0.0,
                    d: meta.d,
                    latent_k: *k,
                    input_dim: meta.input_dim,
                    jitter: *jitter,
                };
                if blob.len() != m.param_count() {
                    return Err(CheckpointError::Corrupt("parameter count mismatch".into()));
                }
                m.set_params(blob);
                Ok(TrainedModel::IfcGpode(m))
            }
            ModelHeader::Sf { k, h0_widths } => {
                let mut m = SfModel {
                    h0: Mlp::zeros(h0_widths),
                    b0: vec![0.0; meta.d * k],
                    log_sigma2: 0.0,
                    d: meta.d,
                    latent_k: *k,
                    input_dim: meta.input_dim,
                };
                if blob.len() != m.param_count() {
                    return Err(CheckpointError::Corrupt("parameter count mismatch".into()));
                }
                m.set_params(blob);
                Ok(TrainedModel::Sf(m))
            }
            ModelHeader::PcaGp { k, n_train } => {
                let mut off = 0;
                let m = pca_gp_from_blob(blob, &mut off, meta.d, *k, *n_train, meta.input_dim)?;
                Ok(TrainedModel::PcaGp(m))
            }
            ModelHeader::Drc { layer_ks, layer_ns, .. } => {
                let mut off = 0;
                let mut layers = Vec::with_capacity(layer_ks.len());
                for (k, n) in layer_ks.iter().zip(layer_ns) {
                    layers.push(pca_gp_from_blob(blob, &mut off, meta.d, *k, *n, meta.input_dim)?);
                }
                Ok(TrainedModel::Drc(DrcModel { layers }))
            }
        }
    }

    /// Prediction at fidelity `m`; the baselines are fidelity-blind.
    pub fn predict(&self, x: &[f64], m: f64, steps_per_unit: usize) -> Result<Vec<f64>, ModelError> {
        match self {
            TrainedModel::IfcOde2(model) => model.predict(x, m, steps_per_unit),
            TrainedModel::IfcGpode(model) => model.predict(x, m, steps_per_unit),
            TrainedModel::Sf(model) => Ok(model.predict(x)),
            TrainedModel::PcaGp(model) => Ok(model.predict(x)),
            TrainedModel::Drc(model) => Ok(model.predict(x)),
        }
    }

    /// Batched prediction at one fidelity (fidelity ODE work is shared).
    pub fn predict_many(&self, xs: &[Vec<f64>], m: f64, steps_per_unit: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        match self {
            TrainedModel::IfcOde2(model) => model.predict_many(xs, m, steps_per_unit),
            TrainedModel::IfcGpode(model) => model.predict_many(xs, m, steps_per_unit),
            _ => xs.iter().map(|x| self.predict(x, m, steps_per_unit)).collect(),
        }
    }
}
