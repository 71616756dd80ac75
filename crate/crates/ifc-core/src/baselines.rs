//! GP baselines: single-output GP regression with marginal-likelihood
//! training, PCA-GP, and deep residual coregionalization (DRC). The original
//! DRC uses L-BFGS for the latent functions; here everything shares the
//! repo-wide Adam optimizer.

use crate::autodiff::Tape;
use crate::linalg::{self, cholesky_with_retry, chol_solve, pca_basis, Matrix};
use crate::trainer::AdamState;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("need at least 2 examples, got {0}")]
    TooFewExamples(usize),
    #[error("rank {k} exceeds min(N={n}, d={d})")]
    RankTooLarge { k: usize, n: usize, d: usize },
    #[error("kernel matrix is not positive definite even after jitter")]
    IllConditionedKernel(#[from] linalg::LinalgError),
    #[error("training failure: {0}")]
    Training(String),
}

/// Single-output GP with an SE kernel (one shared lengthscale across input
/// dimensions) and Gaussian noise, hyperparameters in log domain.
#[derive(Debug, Clone)]
pub struct GpRegressor {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub log_lengthscale: f64,
    pub log_variance: f64,
    pub log_noise: f64,
    /// (K + σ²I)⁻¹ y for the current hyperparameters.
    alpha: Vec<f64>,
}

const GP_JITTER: f64 = 1e-8;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl GpRegressor {
    /// Negative log marginal likelihood and its gradient w.r.t.
    /// [log_lengthscale, log_variance, log_noise], via the tape.
    fn nlml_grad(inputs: &[Vec<f64>], targets: &[f64], hyper: &[f64]) -> Result<(f64, Vec<f64>), GpError> {
        let n = inputs.len();
        let mut dhalf = vec![0.0; n * n];
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                dhalf[i * n + j] = -0.5 * sq_dist(&inputs[i], &inputs[j]);
            }
            eye[i * n + i] = 1.0;
        }
        let mut tape = Tape::new();
        let leaf = tape.leaf(&[3], hyper);
        let log_ls = tape.slice(leaf, 0, &[]);
        let log_var = tape.slice(leaf, 1, &[]);
        let log_noise = tape.slice(leaf, 2, &[]);
        let dhalf_c = tape.constant(&[n, n], &dhalf);
        let eye_c = tape.constant(&[n, n], &eye);
        let y_c = tape.constant(&[n], targets);

        let neg2ls = tape.scale(log_ls, -2.0);
        let inv_ls2 = tape.exp(neg2ls);
        let scaled = tape.scalar_mul(inv_ls2, dhalf_c);
        let corr = tape.exp(scaled);
        let variance = tape.exp(log_var);
        let k = tape.scalar_mul(variance, corr);
        let noise = tape.exp(log_noise);
        let noise = tape.offset(noise, GP_JITTER);
        let noise_mat = tape.scalar_mul(noise, eye_c);
        let ks = tape.add(k, noise_mat);

        let kinv = tape.inverse_spd(ks).map_err(|e| GpError::Training(e.to_string()))?;
        let alpha = tape.matvec(kinv, y_c);
        let fit = tape.dot(y_c, alpha);
        let fit = tape.scale(fit, 0.5);
        let ld = tape.logdet_spd(ks).map_err(|e| GpError::Training(e.to_string()))?;
        let ld = tape.scale(ld, 0.5);
        let s = tape.add(fit, ld);
        let nlml = tape.offset(s, n as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln());

        let value = tape.scalar_value(nlml);
        let grads = tape.backward(nlml).map_err(|e| GpError::Training(e.to_string()))?;
        Ok((value, grads.to_vec(&tape, leaf)))
    }

    fn refresh_alpha(&mut self) -> Result<(), GpError> {
        let n = self.inputs.len();
        let variance = self.log_variance.exp();
        let ls2 = (2.0 * self.log_lengthscale).exp();
        let noise = self.log_noise.exp() + GP_JITTER;
        let mut ks = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut v = variance * (-sq_dist(&self.inputs[i], &self.inputs[j]) / (2.0 * ls2)).exp();
                if i == j {
                    v += noise;
                }
                ks.set(i, j, v);
            }
        }
        let (l, _) = cholesky_with_retry(&ks)?;
        self.alpha = chol_solve(&l, &self.targets);
        Ok(())
    }

    /// Fit hyperparameters by Adam on the NLML; the best iterate wins, so
    /// the final NLML never exceeds the initial one.
    pub fn fit(inputs: Vec<Vec<f64>>, targets: Vec<f64>, iters: usize) -> Result<Self, GpError> {
        if inputs.len() < 2 {
            return Err(GpError::TooFewExamples(inputs.len()));
        }
        let target_var = {
            let mean: f64 = targets.iter().sum::<f64>() / targets.len() as f64;
            (targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / targets.len() as f64).max(1e-8)
        };
        let mut hyper = vec![0.0, target_var.ln(), (0.01 * target_var).ln()];
        let mut best = hyper.clone();
        let mut best_val = f64::INFINITY;
        let mut adam = AdamState::new(3, 0.05);
        for _ in 0..iters {
            let (val, grads) = Self::nlml_grad(&inputs, &targets, &hyper)?;
            if val < best_val {
                best_val = val;
                best.copy_from_slice(&hyper);
            }
            adam.step(&mut hyper, &grads).map_err(|e| GpError::Training(e.to_string()))?;
        }
        // the last iterate also counts
        if iters > 0 {
            let (val, _) = Self::nlml_grad(&inputs, &targets, &hyper)?;
            if val < best_val {
                best.copy_from_slice(&hyper);
            }
        }
        let mut gp = GpRegressor {
            inputs,
            targets,
            log_lengthscale: best[0],
            log_variance: best[1],
            log_noise: best[2],
            alpha: Vec::new(),
        };
        gp.refresh_alpha()?;
        Ok(gp)
    }

    /// Rebuild a regressor from stored hyperparameters and training data.
    pub fn from_parts(
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        log_lengthscale: f64,
        log_variance: f64,
        log_noise: f64,
    ) -> Result<Self, GpError> {
        let mut gp = GpRegressor {
            inputs,
            targets,
            log_lengthscale,
            log_variance,
            log_noise,
            alpha: Vec::new(),
        };
        gp.refresh_alpha()?;
        Ok(gp)
    }

    pub fn nlml(&self) -> Result<f64, GpError> {
        let hyper = [self.log_lengthscale, self.log_variance, self.log_noise];
        Ok(Self::nlml_grad(&self.inputs, &self.targets, &hyper)?.0)
    }

    /// Posterior predictive mean at `x`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let variance = self.log_variance.exp();
        let ls2 = (2.0 * self.log_lengthscale).exp();
        self.inputs
            .iter()
            .zip(&self.alpha)
            .map(|(xi, a)| a * variance * (-sq_dist(x, xi) / (2.0 * ls2)).exp())
            .sum()
    }
}

/// PCA basis plus one GP per principal-score coordinate.
#[derive(Debug, Clone)]
pub struct PcaGpModel {
    /// Output mean, length d (centering applied before the SVD).
    pub mean: Vec<f64>,
    /// d×K orthonormal components, row-major.
    pub components: Vec<f64>,
    pub gps: Vec<GpRegressor>,
    pub d: usize,
    pub k: usize,
}

impl PcaGpModel {
    pub fn fit(inputs: &[Vec<f64>], outputs: &[Vec<f64>], k: usize, gp_iters: usize) -> Result<Self, GpError> {
        let n = inputs.len();
        if n < 2 {
            return Err(GpError::TooFewExamples(n));
        }
        let d = outputs[0].len();
        if k > n.min(d) {
            return Err(GpError::RankTooLarge { k, n, d });
        }
        let pca = pca_basis(outputs, k).map_err(GpError::IllConditionedKernel)?;
        // scores: projections of centered outputs on each component
        let mut gps = Vec::with_capacity(k);
        for j in 0..k {
            let scores: Vec<f64> = outputs
                .iter()
                .map(|y| {
                    y.iter()
                        .enumerate()
                        .map(|(t, v)| (v - pca.mean[t]) * pca.components[t * k + j])
                        .sum()
                })
                .collect();
            gps.push(GpRegressor::fit(inputs.to_vec(), scores, gp_iters)?);
        }
        Ok(PcaGpModel { mean: pca.mean, components: pca.components, gps, d, k })
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = self.gps.iter().map(|g| g.predict(x)).collect();
        let mut out = self.mean.clone();
        for t in 0..self.d {
            for (j, s) in scores.iter().enumerate() {
                out[t] += self.components[t * self.k + j] * s;
            }
        }
        out
    }
}

/// Deep residual coregionalization: one PCA-GP per fidelity, each fit to the
/// residual of the lower-fidelity predictions; predictions sum across layers.
#[derive(Debug, Clone)]
pub struct DrcModel {
    pub layers: Vec<PcaGpModel>,
}

impl DrcModel {
    /// `groups` are per-fidelity (inputs, outputs), lowest fidelity first,
    /// all outputs at a common dimension. The per-layer PCA rank is clipped
    /// to the layer's example count.
    pub fn fit(groups: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)], k: usize, gp_iters: usize) -> Result<Self, GpError> {
        let mut layers: Vec<PcaGpModel> = Vec::with_capacity(groups.len());
        for (inputs, outputs) in groups {
            let mut residuals = outputs.clone();
            for (x, r) in inputs.iter().zip(residuals.iter_mut()) {
                for layer in &layers {
                    let pred = layer.predict(x);
                    for (ri, pi) in r.iter_mut().zip(&pred) {
                        *ri -= pi;
                    }
                }
            }
            let k_layer = k.min(inputs.len()).min(outputs[0].len());
            layers.push(PcaGpModel::fit(inputs, &residuals, k_layer, gp_iters)?);
        }
        Ok(DrcModel { layers })
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let d = self.layers[0].d;
        let mut out = vec![0.0; d];
        for layer in &self.layers {
            let p = layer.predict(x);
            for (o, v) in out.iter_mut().zip(&p) {
                *o += v;
            }
        }
        out
    }
}
