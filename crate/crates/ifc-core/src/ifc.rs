//! The latent-ODE surrogate with ODE bases, and its single-fidelity
//! degeneration.
//!
//! The latent output h(m, x) starts at β(x) and evolves over the fidelity
//! coordinate as dh/dm = φ(m, h, x). The d×K basis matrix starts at ν and
//! every element follows the shared scalar dynamics db/dm = γ(b, m). A
//! prediction at fidelity m is B(m)·h(m, x), observed under isotropic
//! Gaussian noise with trainable variance σ² = exp(log_sigma2).

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::linalg::svd_basis;
use crate::nn::{Mlp, MlpVars};
use crate::odeint::{rk4_integrate, OdeError};
use crate::pdegen::Example;
use crate::trainer::{Objective, TrainError};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("fidelity {m} is not one of the training fidelities")]
    UnknownFidelity { m: f64 },
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Objective(e.to_string())
    }
}

/// RK4 steps for integrating [0, m] at `per_unit` steps per unit fidelity;
/// extrapolation past m = 1 scales the count proportionally.
pub fn steps_for(m: f64, per_unit: usize) -> usize {
    ((m * per_unit as f64).ceil() as usize).max(1)
}

fn zero_last_layer(net: &mut Mlp) {
    if let Some(w) = net.weights.last_mut() {
        w.iter_mut().for_each(|v| *v = 0.0);
    }
    if let Some(b) = net.biases.last_mut() {
        b.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// IFC-ODE²: latent neural ODE plus element-wise basis ODE.
#[derive(Debug, Clone)]
pub struct IfcOde2Model {
    /// dynamics of the latent output: (m ⊕ h ⊕ x) → K
    pub phi: Mlp,
    /// latent output at m = 0: x → K
    pub beta: Mlp,
    /// shared element-wise basis dynamics: (b ⊕ m) → 1
    pub gamma: Mlp,
    /// basis initial values, d×K row-major
    pub nu: Vec<f64>,
    pub log_sigma2: f64,
    pub d: usize,
    pub latent_k: usize,
    pub input_dim: usize,
}

/// Tape views of the model parameters, sliced from one flat leaf.
pub struct Ode2Vars {
    pub phi: MlpVars,
    pub beta: MlpVars,
    pub gamma: MlpVars,
    pub nu: Var,
    pub log_sigma2: Var,
}

impl IfcOde2Model {
    /// Fresh model. When training outputs are given, ν warm-starts from
    /// their top-K principal components scaled by singular values.
    pub fn init(
        input_dim: usize,
        d: usize,
        k: usize,
        hidden: usize,
        rng: &mut ChaCha12Rng,
        warm_start: Option<&[Vec<f64>]>,
    ) -> Result<Self, ModelError> {
        if k == 0 || d == 0 || hidden == 0 {
            return Err(ModelError::BadConfig("dims must be positive".into()));
        }
        // zero dynamics at init: the fidelity flow starts at identity and
        // the corrections grow from the data
        let mut phi = Mlp::init(&[1 + k + input_dim, hidden, hidden, k], rng);
        zero_last_layer(&mut phi);
        let beta = Mlp::init(&[input_dim, hidden, hidden, k], rng);
        let mut gamma = Mlp::init(&[2, hidden, hidden, 1], rng);
        zero_last_layer(&mut gamma);
        let nu = match warm_start {
            Some(rows) if rows.len() >= k => {
                let pca = svd_basis(rows, k).map_err(|e| ModelError::BadConfig(e.to_string()))?;
                pca.scaled_components(rows.len())
            }
            _ => {
                use rand::Rng;
                (0..d * k).map(|_| rng.gen_range(-0.05..0.05)).collect()
            }
        };
        Ok(IfcOde2Model {
            phi,
            beta,
            gamma,
            nu,
            log_sigma2: (0.01f64).ln(),
            d,
            latent_k: k,
            input_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        self.phi.param_count() + self.beta.param_count() + self.gamma.param_count() + self.nu.len() + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.phi.flatten_into(&mut out);
        self.beta.flatten_into(&mut out);
        self.gamma.flatten_into(&mut out);
        out.extend_from_slice(&self.nu);
        out.push(self.log_sigma2);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter count mismatch");
        let mut off = self.phi.read_from(flat, 0);
        off = self.beta.read_from(flat, off);
        off = self.gamma.read_from(flat, off);
        let n = self.nu.len();
        self.nu.copy_from_slice(&flat[off..off + n]);
        off += n;
        self.log_sigma2 = flat[off];
    }

    pub fn slice_vars(&self, tape: &mut Tape, leaf: Var) -> Ode2Vars {
        let mut off = 0;
        let phi = self.phi.slice_vars(tape, leaf, &mut off);
        let beta = self.beta.slice_vars(tape, leaf, &mut off);
        let gamma = self.gamma.slice_vars(tape, leaf, &mut off);
        let nu = tape.slice(leaf, off, &[self.d * self.latent_k]);
        off += self.nu.len();
        let log_sigma2 = tape.slice(leaf, off, &[]);
        Ode2Vars { phi, beta, gamma, nu, log_sigma2 }
    }

    /// h(m, x): integrate dh/dm = φ(v, h, x) from β(x). At m = 0 this is
    /// β(x) exactly.
    pub fn latent_h(
        &self,
        tape: &mut Tape,
        vars: &Ode2Vars,
        x: &[f64],
        m: f64,
        steps: usize,
    ) -> Result<Var, ModelError> {
        latent_state(tape, &self.phi, &vars.phi, &self.beta, &vars.beta, x, m, steps)
    }

    /// B(m): all dK basis elements integrated as one batch under the shared
    /// scalar dynamics γ. Returns a d×K matrix var; at m = 0 it is ν exactly.
    pub fn basis_at(&self, tape: &mut Tape, vars: &Ode2Vars, m: f64, steps: usize) -> Result<Var, ModelError> {
        let n = self.d * self.latent_k;
        if m == 0.0 {
            return Ok(tape.reshape(vars.nu, &[self.d, self.latent_k]));
        }
        let out = rk4_integrate(
            tape,
            |t, mm, state| {
                let m_row = t.constant(&[n], &vec![mm; n]);
                let stacked = t.concat(&[state, m_row]);
                let batch = t.reshape(stacked, &[2, n]);
                let dyn_out = self.gamma.forward_batch(t, &vars.gamma, batch);
                t.reshape(dyn_out, &[n])
            },
            vars.nu,
            (0.0, m),
            steps,
        )?;
        Ok(tape.reshape(out, &[self.d, self.latent_k]))
    }

    /// B(m)·h(m, x) on an existing tape.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        vars: &Ode2Vars,
        x: &[f64],
        m: f64,
        steps: usize,
    ) -> Result<Var, ModelError> {
        let basis = self.basis_at(tape, vars, m, steps)?;
        let h = self.latent_h(tape, vars, x, m, steps)?;
        Ok(tape.matvec(basis, h))
    }

    /// Plain-value prediction at fidelity m (m > 1 extrapolates).
    pub fn predict(&self, x: &[f64], m: f64, steps_per_unit: usize) -> Result<Vec<f64>, ModelError> {
        Ok(self.predict_many(std::slice::from_ref(&x.to_vec()), m, steps_per_unit)?.remove(0))
    }

    /// Predictions for many inputs at one fidelity; the basis ODE is solved
    /// once and shared.
    pub fn predict_many(&self, xs: &[Vec<f64>], m: f64, steps_per_unit: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let flat = self.params();
        let leaf = tape.constant(&[flat.len()], &flat);
        let vars = self.slice_vars(&mut tape, leaf);
        let steps = steps_for(m, steps_per_unit);
        let basis = self.basis_at(&mut tape, &vars, m, steps)?;
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let h = self.latent_h(&mut tape, &vars, x, m, steps)?;
            let pred = tape.matvec(basis, h);
            out.push(tape.value(pred).to_vec());
        }
        Ok(out)
    }

    /// Negative log joint likelihood of the batch:
    /// Σ_n [d/2·log(2πσ²) + ‖y_n − B(m_n)h(m_n, x_n)‖²/(2σ²)].
    pub fn nll_loss(
        &self,
        tape: &mut Tape,
        vars: &Ode2Vars,
        batch: &[Example],
        steps_per_unit: usize,
    ) -> Result<Var, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        // one basis solve per distinct fidelity
        let mut fidelities: Vec<f64> = Vec::new();
        for e in batch {
            if !fidelities.contains(&e.m) {
                fidelities.push(e.m);
            }
        }
        fidelities.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut bases = Vec::with_capacity(fidelities.len());
        for &m in &fidelities {
            bases.push(self.basis_at(tape, vars, m, steps_for(m, steps_per_unit))?);
        }

        let mut residuals = Vec::with_capacity(batch.len());
        for e in batch {
            let fi = fidelities.iter().position(|&m| m == e.m).unwrap();
            let h = self.latent_h(tape, vars, &e.x, e.m, steps_for(e.m, steps_per_unit))?;
            let pred = tape.matvec(bases[fi], h);
            let y = tape.constant(&[self.d], &e.y);
            let r = tape.sub(y, pred);
            residuals.push(tape.dot(r, r));
        }
        let all = tape.concat(&residuals);
        let sum_sq = tape.sum(all);
        gaussian_nll(tape, vars.log_sigma2, sum_sq, batch.len(), self.d)
    }
}

/// Latent ODE state shared by both model families: integrate
/// dh/dm = φ(v, h, x) from h(0) = β(x).
pub(crate) fn latent_state(
    tape: &mut Tape,
    phi: &Mlp,
    phi_vars: &MlpVars,
    beta: &Mlp,
    beta_vars: &MlpVars,
    x: &[f64],
    m: f64,
    steps: usize,
) -> Result<Var, ModelError> {
    let x_const = tape.constant(&[x.len()], x);
    let h0 = beta.forward(tape, beta_vars, x_const);
    if m == 0.0 {
        return Ok(h0);
    }
    let out = rk4_integrate(
        tape,
        |t, mm, state| {
            let m_node = t.constant(&[1], &[mm]);
            let input = t.concat(&[m_node, state, x_const]);
            phi.forward(t, phi_vars, input)
        },
        h0,
        (0.0, m),
        steps,
    )?;
    Ok(out)
}

/// Assemble Σ_n d/2·log(2πσ²) + sum_sq/(2σ²) from the log-variance node.
fn gaussian_nll(tape: &mut Tape, log_sigma2: Var, sum_sq: Var, n: usize, d: usize) -> Result<Var, ModelError> {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let log_term = tape.offset(log_sigma2, ln2pi);
    let log_term = tape.scale(log_term, n as f64 * d as f64 / 2.0);
    let neg_ls2 = tape.neg(log_sigma2);
    let inv_sigma2 = tape.exp(neg_ls2);
    let half_inv = tape.scale(inv_sigma2, 0.5);
    let quad = tape.mul(sum_sq, half_inv);
    Ok(tape.add(log_term, quad))
}

/// Single-fidelity degeneration: f(x) = B₀·h₀(x) with a static basis.
#[derive(Debug, Clone)]
pub struct SfModel {
    pub h0: Mlp,
    /// d×K row-major static basis.
    pub b0: Vec<f64>,
    pub log_sigma2: f64,
    pub d: usize,
    pub latent_k: usize,
    pub input_dim: usize,
}

pub struct SfVars {
    pub h0: MlpVars,
    pub b0: Var,
    pub log_sigma2: Var,
}

impl SfModel {
    pub fn init(
        input_dim: usize,
        d: usize,
        k: usize,
        hidden: usize,
        rng: &mut ChaCha12Rng,
        warm_start: Option<&[Vec<f64>]>,
    ) -> Result<Self, ModelError> {
        let h0 = Mlp::init(&[input_dim, hidden, hidden, k], rng);
        let b0 = match warm_start {
            Some(rows) if rows.len() >= k => {
                let pca = svd_basis(rows, k).map_err(|e| ModelError::BadConfig(e.to_string()))?;
                pca.scaled_components(rows.len())
            }
            _ => {
                use rand::Rng;
                (0..d * k).map(|_| rng.gen_range(-0.05..0.05)).collect()
            }
        };
        Ok(SfModel { h0, b0, log_sigma2: (0.01f64).ln(), d, latent_k: k, input_dim })
    }

    pub fn param_count(&self) -> usize {
        self.h0.param_count() + self.b0.len() + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.h0.flatten_into(&mut out);
        out.extend_from_slice(&self.b0);
        out.push(self.log_sigma2);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = self.h0.read_from(flat, 0);
        let n = self.b0.len();
        self.b0.copy_from_slice(&flat[off..off + n]);
        off += n;
        self.log_sigma2 = flat[off];
    }

    pub fn slice_vars(&self, tape: &mut Tape, leaf: Var) -> SfVars {
        let mut off = 0;
        let h0 = self.h0.slice_vars(tape, leaf, &mut off);
        let b0 = tape.slice(leaf, off, &[self.d, self.latent_k]);
        off += self.b0.len();
        let log_sigma2 = tape.slice(leaf, off, &[]);
        SfVars { h0, b0, log_sigma2 }
    }

    /// Prediction is independent of fidelity by construction.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let flat = self.params();
        let leaf = tape.constant(&[flat.len()], &flat);
        let vars = self.slice_vars(&mut tape, leaf);
        let x_const = tape.constant(&[self.input_dim], x);
        let h = self.h0.forward(&mut tape, &vars.h0, x_const);
        let pred = tape.matvec(vars.b0, h);
        tape.value(pred).to_vec()
    }

    pub fn nll_loss(&self, tape: &mut Tape, vars: &SfVars, batch: &[Example]) -> Result<Var, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut residuals = Vec::with_capacity(batch.len());
        for e in batch {
            let x_const = tape.constant(&[self.input_dim], &e.x);
            let h = self.h0.forward(tape, &vars.h0, x_const);
            let pred = tape.matvec(vars.b0, h);
            let y = tape.constant(&[self.d], &e.y);
            let r = tape.sub(y, pred);
            residuals.push(tape.dot(r, r));
        }
        let all = tape.concat(&residuals);
        let sum_sq = tape.sum(all);
        gaussian_nll(tape, vars.log_sigma2, sum_sq, batch.len(), self.d)
    }
}

/// Full-batch NLL objective for [`IfcOde2Model`].
pub struct Ode2Objective<'a> {
    pub model: &'a IfcOde2Model,
    pub data: &'a [Example],
    pub steps_per_unit: usize,
}

impl Objective for Ode2Objective<'_> {
    fn value_grad(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(&[params.len()], params);
        let vars = self.model.slice_vars(&mut tape, leaf);
        let loss = self
            .model
            .nll_loss(&mut tape, &vars, self.data, self.steps_per_unit)
            .map_err(TrainError::from)?;
        let value = tape.scalar_value(loss);
        let grads = tape.backward(loss).map_err(|e| TrainError::Objective(e.to_string()))?;
        Ok((value, grads.to_vec(&tape, leaf)))
    }
}

/// Full-batch NLL objective for [`SfModel`].
pub struct SfObjective<'a> {
    pub model: &'a SfModel,
    pub data: &'a [Example],
}

impl Objective for SfObjective<'_> {
    fn value_grad(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(&[params.len()], params);
        let vars = self.model.slice_vars(&mut tape, leaf);
        let loss = self.model.nll_loss(&mut tape, &vars, self.data).map_err(TrainError::from)?;
        let value = tape.scalar_value(loss);
        let grads = tape.backward(loss).map_err(|e| TrainError::Objective(e.to_string()))?;
        Ok((value, grads.to_vec(&tape, leaf)))
    }
}
