//! Full-batch training loop: Adam with bias correction, reduce-on-plateau
//! learning-rate scheduling, nRMSE metrics, and CSV/JSON report output.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("truth is identically zero, nRMSE undefined")]
    AllZeroTruth,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("objective failure: {0}")]
    Objective(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Adam moment buffers for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// Bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "adam buffers {} vs params {} vs grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// ReduceLROnPlateau: halve the rate after `patience` epochs without a loss
/// improvement of at least `threshold`, never below `min_lr`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
    lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler {
            factor: 0.5,
            patience,
            min_lr,
            threshold: 1e-6,
            lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch loss; returns the learning rate to use next.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// nRMSE over row-aligned prediction/truth pairs: RMS(error)/RMS(truth).
pub fn nrmse(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64, TrainError> {
    if preds.len() != truths.len() {
        return Err(TrainError::ShapeMismatch(format!("{} preds vs {} truths", preds.len(), truths.len())));
    }
    let mut se = 0.0;
    let mut st = 0.0;
    let mut n = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(TrainError::ShapeMismatch(format!("row {} vs {}", p.len(), t.len())));
        }
        for (a, b) in p.iter().zip(t) {
            se += (a - b) * (a - b);
            st += b * b;
            n += 1;
        }
    }
    let _ = n;
    if st == 0.0 {
        return Err(TrainError::AllZeroTruth);
    }
    Ok((se / st).sqrt())
}

/// nRMSE of two flat arrays of equal length.
pub fn nrmse_flat(pred: &[f64], truth: &[f64]) -> Result<f64, TrainError> {
    nrmse(&[pred.to_vec()], &[truth.to_vec()])
}

/// A differentiable training objective over one flat parameter vector.
pub trait Objective {
    fn value_grad(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>), TrainError>;
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TrainError>,
{
    fn value_grad(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
        self(params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub config_hash: String,
    /// Evaluate the validation callback every n epochs (0 = never).
    pub val_every: usize,
}

impl FitConfig {
    pub fn new(lr: f64, epochs: usize, seed: u64) -> Self {
        FitConfig {
            lr,
            epochs,
            patience: 100,
            min_lr: 1e-5,
            seed,
            config_hash: String::new(),
            val_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_nrmse: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Completed,
    /// Hit a non-finite loss; parameters roll back to the last finite epoch.
    AbortedNonFinite,
}

/// Per-epoch history plus final metrics of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_loss: Option<f64>,
    pub final_test_nrmse: Option<f64>,
    pub wall_secs: f64,
    pub seed: u64,
    pub config_hash: String,
    pub status: FitStatus,
}

impl TrainReport {
    /// Deterministic CSV: header plus one row per epoch. Wall time stays out
    /// of the CSV so identical runs produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,lr,val_nrmse\n");
        for r in &self.epochs {
            let val = r.val_nrmse.map(|v| format!("{v:.17e}")).unwrap_or_default();
            s.push_str(&format!("{},{:.17e},{:.17e},{}\n", r.epoch, r.loss, r.lr, val));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Final metrics as JSON (this is where wall time lives).
    pub fn write_metrics_json(&self, path: &Path) -> Result<(), TrainError> {
        #[derive(Serialize)]
        struct Metrics<'a> {
            final_loss: Option<f64>,
            final_test_nrmse: Option<f64>,
            epochs_run: usize,
            wall_secs: f64,
            seed: u64,
            config_hash: &'a str,
            status: FitStatus,
        }
        let m = Metrics {
            final_loss: self.final_loss,
            final_test_nrmse: self.final_test_nrmse,
            epochs_run: self.epochs.len(),
            wall_secs: self.wall_secs,
            seed: self.seed,
            config_hash: &self.config_hash,
            status: self.status,
        };
        std::fs::write(path, serde_json::to_string_pretty(&m).unwrap())?;
        Ok(())
    }
}

/// Full-batch Adam descent with plateau scheduling. Returns the parameters
/// of the best-loss epoch (full-batch loss, so this needs no held-out data
/// and keeps a late instability spike from shipping) along with the report;
/// on a non-finite loss the best parameters seen so far are returned with
/// `AbortedNonFinite` status.
pub fn fit(
    obj: &mut dyn Objective,
    init_params: Vec<f64>,
    cfg: &FitConfig,
    mut validate: Option<&mut (dyn FnMut(&[f64]) -> Option<f64> + '_)>,
) -> Result<(Vec<f64>, TrainReport), TrainError> {
    let start = std::time::Instant::now();
    let mut params = init_params;
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.patience, cfg.min_lr);
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        final_loss: None,
        final_test_nrmse: None,
        wall_secs: 0.0,
        seed: cfg.seed,
        config_hash: cfg.config_hash.clone(),
        status: FitStatus::Completed,
    };
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;

    for epoch in 1..=cfg.epochs {
        let (loss, grads) = obj.value_grad(&params)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            report.status = FitStatus::AbortedNonFinite;
            report.wall_secs = start.elapsed().as_secs_f64();
            return Ok((best, report));
        }
        if loss < best_loss {
            best_loss = loss;
            best.copy_from_slice(&params);
        }
        adam.step(&mut params, &grads)?;
        let lr_used = adam.lr;
        adam.lr = sched.step(loss);

        let val_nrmse = match (&mut validate, cfg.val_every) {
            (Some(v), every) if every > 0 && (epoch % every == 0 || epoch == cfg.epochs) => v(&params),
            _ => None,
        };
        report.epochs.push(EpochRecord { epoch, loss, lr: lr_used, val_nrmse });
        report.final_loss = Some(loss);
    }
    report.wall_secs = start.elapsed().as_secs_f64();
    Ok((best, report))
}
