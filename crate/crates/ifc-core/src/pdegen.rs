//! Finite-difference corpora for multi-fidelity learning: Poisson, Heat and
//! Burgers solvers on uniform meshes, the mesh-size → fidelity map, bilinear
//! field resampling, and dataset generation.
//!
//! Mesh size s means s×s output values. For the time-dependent problems the
//! field is s spatial nodes × s time levels stored time-major (row j is time
//! level j). Poisson fields are stored row-major over the (y, x) grid.

use crate::linalg::{cholesky, chol_solve, Matrix};
use crate::rng::RngStreams;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdeError {
    #[error("solver failed to converge after {iters} iterations (residual {residual:.3e})")]
    NonConvergence { iters: usize, residual: f64 },
    #[error("invalid input: {0}")]
    BadInput(String),
}

/// Which benchmark equation a dataset comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdeKind {
    Poisson,
    Heat,
    Burgers,
}

impl PdeKind {
    pub fn input_dim(&self) -> usize {
        match self {
            PdeKind::Poisson => 5,
            PdeKind::Heat => 3,
            PdeKind::Burgers => 1,
        }
    }

    /// Uniform sampling ranges per input dimension.
    pub fn ranges(&self) -> Vec<(f64, f64)> {
        match self {
            // four Dirichlet boundary constants and the source strength β
            PdeKind::Poisson => vec![(0.1, 0.9); 5],
            // left influx, right influx, conductivity α
            PdeKind::Heat => vec![(0.0, 1.0), (-1.0, 0.0), (0.01, 0.1)],
            // viscosity
            PdeKind::Burgers => vec![(0.001, 0.1)],
        }
    }
}

/// Problem statement for data generation.
#[derive(Debug, Clone, Copy)]
pub struct PdeSpec {
    pub kind: PdeKind,
}

impl PdeSpec {
    pub fn new(kind: PdeKind) -> Self {
        PdeSpec { kind }
    }

    /// Solve at mesh size `s`; the bool flags a CFL warning (Burgers only).
    pub fn solve(&self, x: &[f64], s: usize) -> Result<(Vec<f64>, bool), PdeError> {
        match self.kind {
            PdeKind::Poisson => solve_poisson(x, s).map(|f| (f, false)),
            PdeKind::Heat => solve_heat(x, s).map(|f| (f, false)),
            PdeKind::Burgers => solve_burgers(x, s),
        }
    }
}

/// Linear map between mesh size and the fidelity coordinate:
/// m(s) = (s − s0)/(s1 − s0), so the coarsest training mesh is m = 0 and the
/// finest is m = 1; denser meshes extrapolate past 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityMap {
    pub s0: usize,
    pub s1: usize,
}

impl FidelityMap {
    pub fn new(s0: usize, s1: usize) -> Result<Self, PdeError> {
        if s0 < 2 || s1 <= s0 {
            return Err(PdeError::BadInput(format!(
                "fidelity map needs s1 > s0 >= 2, got s0={s0}, s1={s1}"
            )));
        }
        Ok(FidelityMap { s0, s1 })
    }

    pub fn fidelity_of_mesh(&self, s: usize) -> f64 {
        (s as f64 - self.s0 as f64) / (self.s1 as f64 - self.s0 as f64)
    }

    /// Real-valued mesh size corresponding to fidelity m.
    pub fn mesh_of_fidelity(&self, m: f64) -> f64 {
        self.s0 as f64 + m * (self.s1 as f64 - self.s0 as f64)
    }
}

/// Solve Δu = β δ(x − c) on the unit square with Dirichlet boundaries.
///
/// `x` = [bottom, top, left, right, β]; 5-point Laplacian on an s×s grid with
/// the Dirac source discretized as β/h² at the node nearest (0.5, 0.5); SOR
/// sweeps until the scaled residual (neighbor sum − 4u − h²f) drops below
/// 1e-13 in max norm.
pub fn solve_poisson(x: &[f64], s: usize) -> Result<Vec<f64>, PdeError> {
    if x.len() != 5 {
        return Err(PdeError::BadInput(format!("poisson expects 5 inputs, got {}", x.len())));
    }
    if s < 3 {
        return Err(PdeError::BadInput(format!("poisson mesh must be >= 3, got {s}")));
    }
    let (bottom, top, left, right, beta) = (x[0], x[1], x[2], x[3], x[4]);
    let h = 1.0 / (s - 1) as f64;
    let mut u = vec![0.0; s * s];

    for j in 0..s {
        u[j] = bottom; // i = 0 row (y = 0)
        u[(s - 1) * s + j] = top;
    }
    for i in 0..s {
        u[i * s] = left;
        u[i * s + s - 1] = right;
    }
    u[0] = 0.5 * (bottom + left);
    u[s - 1] = 0.5 * (bottom + right);
    u[(s - 1) * s] = 0.5 * (top + left);
    u[s * s - 1] = 0.5 * (top + right);

    let interior_guess = 0.25 * (bottom + top + left + right);
    for i in 1..s - 1 {
        for j in 1..s - 1 {
            u[i * s + j] = interior_guess;
        }
    }

    // scaled source: h² · (β/h²) = β at the node nearest the center
    let ci = (0.5 * (s - 1) as f64).round() as usize;
    let src = ci * s + ci;

    let omega = 2.0 / (1.0 + (std::f64::consts::PI * h).sin());
    let tol = 1e-13;
    let max_iters = 200_000;
    let mut residual = f64::INFINITY;
    for _it in 0..max_iters {
        residual = 0.0;
        for i in 1..s - 1 {
            for j in 1..s - 1 {
                let idx = i * s + j;
                let f = if idx == src { beta } else { 0.0 };
                let r = u[idx - s] + u[idx + s] + u[idx - 1] + u[idx + 1] - 4.0 * u[idx] - f;
                u[idx] += omega * 0.25 * r;
                residual = residual.max(r.abs());
            }
        }
        if residual <= tol {
            return Ok(u);
        }
    }
    Err(PdeError::NonConvergence { iters: max_iters, residual })
}

/// Tridiagonal solve (Thomas algorithm); `a` sub-, `b` main, `c` super-diagonal.
fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

fn heaviside(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// 1-D diffusion u_t = α u_xx on x ∈ [0,1], t ∈ [0,5], backward Euler in
/// time, with prescribed boundary influxes q_L (left) and q_R (right) and
/// initial condition H(x−0.25) − H(x−0.75).
///
/// `x` = [q_L, q_R, α]. Output has s time levels × s spatial nodes
/// (time-major). The boundary rows are written so the plain node sum
/// telescopes step to step: with q_L = q_R = 0 the spatial mean is conserved
/// exactly.
///
/// Sign convention, deliberately: this solves the dissipative form
/// u_t = α·u_xx. The same problem is sometimes written u_t + αΔu = 0, which
/// with α > 0 is the ill-posed backward equation; the forward form is what a
/// conductivity parameter α ∈ [0.01, 0.1] physically means here.
pub fn solve_heat(x: &[f64], s: usize) -> Result<Vec<f64>, PdeError> {
    if x.len() != 3 {
        return Err(PdeError::BadInput(format!("heat expects 3 inputs, got {}", x.len())));
    }
    if s < 3 {
        return Err(PdeError::BadInput(format!("heat mesh must be >= 3, got {s}")));
    }
    let (q_left, q_right, alpha) = (x[0], x[1], x[2]);
    let h = 1.0 / (s - 1) as f64;
    let dt = 5.0 / (s - 1) as f64;
    let mu = alpha * dt / (h * h);

    let mut u: Vec<f64> = (0..s)
        .map(|i| {
            let xi = i as f64 / (s - 1) as f64;
            heaviside(xi - 0.25) - heaviside(xi - 0.75)
        })
        .collect();
    let mut field = Vec::with_capacity(s * s);
    field.extend_from_slice(&u);

    let mut sub = vec![-mu; s];
    let mut main = vec![1.0 + 2.0 * mu; s];
    let mut sup = vec![-mu; s];
    // boundary rows: single-neighbor coupling keeps the column sums balanced
    sub[0] = 0.0;
    main[0] = 1.0 + mu;
    main[s - 1] = 1.0 + mu;
    sup[s - 1] = 0.0;

    for _lvl in 1..s {
        let mut rhs = u.clone();
        rhs[0] += dt * q_left / h;
        rhs[s - 1] += dt * q_right / h;
        u = thomas(&sub, &main, &sup, &rhs);
        field.extend_from_slice(&u);
    }
    Ok(field)
}

/// Viscous Burgers u_t + u u_x = v u_xx on x ∈ [0,1], t ∈ [0,3], with
/// u(x,0) = sin(πx/2) and homogeneous Dirichlet boundaries for t > 0.
///
/// Semi-implicit: central diffusion solved implicitly, first-order upwind
/// convection taken explicitly with the velocity lagged from the previous
/// level. Returns the time-major field and whether any level exceeded the
/// explicit convection CFL bound (the solve still completes).
pub fn solve_burgers(x: &[f64], s: usize) -> Result<(Vec<f64>, bool), PdeError> {
    if x.len() != 1 {
        return Err(PdeError::BadInput(format!("burgers expects 1 input, got {}", x.len())));
    }
    if s < 3 {
        return Err(PdeError::BadInput(format!("burgers mesh must be >= 3, got {s}")));
    }
    let v = x[0];
    let h = 1.0 / (s - 1) as f64;
    let dt = 3.0 / (s - 1) as f64;
    let mu = v * dt / (h * h);

    let mut u: Vec<f64> = (0..s)
        .map(|i| (std::f64::consts::PI * (i as f64 / (s - 1) as f64) / 2.0).sin())
        .collect();
    let mut field = Vec::with_capacity(s * s);
    field.extend_from_slice(&u);
    let mut cfl_warning = false;

    let mut sub = vec![-mu; s];
    let mut main = vec![1.0 + 2.0 * mu; s];
    let mut sup = vec![-mu; s];
    sub[0] = 0.0;
    sup[0] = 0.0;
    main[0] = 1.0;
    sub[s - 1] = 0.0;
    sup[s - 1] = 0.0;
    main[s - 1] = 1.0;

    for _lvl in 1..s {
        let umax = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if umax * dt / h > 1.0 {
            cfl_warning = true;
        }
        let mut rhs = vec![0.0; s];
        for i in 1..s - 1 {
            let du = if u[i] >= 0.0 { (u[i] - u[i - 1]) / h } else { (u[i + 1] - u[i]) / h };
            rhs[i] = u[i] - dt * u[i] * du;
        }
        // homogeneous Dirichlet for t > 0
        rhs[0] = 0.0;
        rhs[s - 1] = 0.0;
        u = thomas(&sub, &main, &sup, &rhs);
        field.extend_from_slice(&u);
    }
    Ok((field, cfl_warning))
}

/// Bilinear resampling of an s×s field to target×target on the unit square.
/// Nested-lerp evaluation maps constant fields to constant fields exactly.
pub fn resample_field(y: &[f64], s: usize, target: usize) -> Vec<f64> {
    assert_eq!(y.len(), s * s, "field is not s×s");
    assert!(s >= 2 && target >= 2, "meshes must have at least 2 nodes");
    if s == target {
        return y.to_vec();
    }
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let mut out = vec![0.0; target * target];
    let scale = (s - 1) as f64 / (target - 1) as f64;
    for i in 0..target {
        let fi = i as f64 * scale;
        let i0 = (fi.floor() as usize).min(s - 2);
        let ti = fi - i0 as f64;
        for j in 0..target {
            let fj = j as f64 * scale;
            let j0 = (fj.floor() as usize).min(s - 2);
            let tj = fj - j0 as f64;
            let f00 = y[i0 * s + j0];
            let f01 = y[i0 * s + j0 + 1];
            let f10 = y[(i0 + 1) * s + j0];
            let f11 = y[(i0 + 1) * s + j0 + 1];
            out[i * target + j] = lerp(lerp(f00, f01, tj), lerp(f10, f11, tj), ti);
        }
    }
    out
}

/// One fidelity-tagged training or test example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub m: f64,
    pub y: Vec<f64>,
    pub native_s: usize,
}

/// Dataset descriptor shared by the in-memory and on-disk forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: PdeKind,
    pub input_ranges: Vec<(f64, f64)>,
    pub mesh_sizes: Vec<usize>,
    pub counts: Vec<usize>,
    pub test_count: usize,
    pub seed: u64,
    pub fidelity_map: Option<FidelityMap>,
    /// Common output dimension: (highest mesh)².
    pub d: usize,
    pub input_dim: usize,
    #[serde(default)]
    pub cfl_warnings: usize,
}

impl DatasetMeta {
    pub fn fidelity_of_mesh(&self, s: usize) -> f64 {
        match self.fidelity_map {
            Some(map) => map.fidelity_of_mesh(s),
            None => 0.0, // single-mesh datasets sit at m = 0 by convention
        }
    }
}

/// Fidelity-tagged examples plus everything needed to interpret them.
#[derive(Debug, Clone)]
pub struct FidelityDataset {
    pub meta: DatasetMeta,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl FidelityDataset {
    /// Distinct training fidelities, ascending.
    pub fn train_fidelities(&self) -> Vec<f64> {
        let mut ms: Vec<f64> = Vec::new();
        for e in &self.train {
            if !ms.contains(&e.m) {
                ms.push(e.m);
            }
        }
        ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ms
    }
}

fn parallelism_cap() -> Option<usize> {
    std::env::var("IFC_NUM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0)
}

fn solve_many(spec: &PdeSpec, jobs: &[(Vec<f64>, usize)]) -> Result<(Vec<Vec<f64>>, usize), PdeError> {
    use rayon::prelude::*;
    let run = || -> Result<Vec<(Vec<f64>, bool)>, PdeError> {
        jobs.par_iter().map(|(x, s)| spec.solve(x, *s)).collect()
    };
    let solved = match parallelism_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| PdeError::BadInput(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }?;
    let warnings = solved.iter().filter(|(_, w)| *w).count();
    Ok((solved.into_iter().map(|(f, _)| f).collect(), warnings))
}

/// Generate a multi-fidelity dataset: `counts[i]` training examples at mesh
/// `mesh_sizes[i]`, plus `test_count` test examples at the highest mesh. All
/// outputs are resampled up to d = (highest mesh)². Training and test inputs
/// are disjoint (rejection sampling, min L∞ distance 1e-6). Deterministic in
/// `seed`.
pub fn generate_dataset(
    spec: &PdeSpec,
    mesh_sizes: &[usize],
    counts: &[usize],
    test_count: usize,
    seed: u64,
) -> Result<FidelityDataset, PdeError> {
    if mesh_sizes.is_empty() {
        return Err(PdeError::BadInput("empty mesh list".into()));
    }
    if mesh_sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PdeError::BadInput(format!("mesh sizes must be ascending: {mesh_sizes:?}")));
    }
    if counts.len() != mesh_sizes.len() {
        return Err(PdeError::BadInput(format!(
            "{} counts for {} meshes",
            counts.len(),
            mesh_sizes.len()
        )));
    }
    let s_max = *mesh_sizes.last().unwrap();
    let d = s_max * s_max;
    let fidelity_map = if mesh_sizes.len() >= 2 {
        Some(FidelityMap::new(mesh_sizes[0], s_max)?)
    } else {
        None
    };
    let ranges = spec.kind.ranges();
    let input_dim = spec.kind.input_dim();

    let streams = RngStreams::new(seed);
    let mut rng = streams.stream("data");
    let sample_input = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<f64> {
        ranges.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)).collect()
    };

    let mut train_jobs: Vec<(Vec<f64>, usize)> = Vec::new();
    for (&s, &count) in mesh_sizes.iter().zip(counts) {
        for _ in 0..count {
            train_jobs.push((sample_input(&mut rng), s));
        }
    }

    let disjoint = |x: &[f64], others: &[(Vec<f64>, usize)]| {
        others.iter().all(|(o, _)| {
            x.iter().zip(o).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max) > 1e-6
        })
    };
    let mut test_jobs: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut rejections = 0usize;
    while test_jobs.len() < test_count {
        let x = sample_input(&mut rng);
        if disjoint(&x, &train_jobs) && disjoint(&x, &test_jobs) {
            test_jobs.push((x, s_max));
        } else {
            rejections += 1;
            if rejections > 10_000 {
                return Err(PdeError::BadInput("cannot sample disjoint test inputs".into()));
            }
        }
    }

    let (train_fields, warn_train) = solve_many(spec, &train_jobs)?;
    let (test_fields, warn_test) = solve_many(spec, &test_jobs)?;

    let fid_of = |s: usize| match fidelity_map {
        Some(map) => map.fidelity_of_mesh(s),
        None => 0.0,
    };
    let train: Vec<Example> = train_jobs
        .into_iter()
        .zip(train_fields)
        .map(|((x, s), field)| Example {
            m: fid_of(s),
            y: resample_field(&field, s, s_max),
            native_s: s,
            x,
        })
        .collect();
    let test: Vec<Example> = test_jobs
        .into_iter()
        .zip(test_fields)
        .map(|((x, s), field)| Example { m: fid_of(s), y: field, native_s: s, x })
        .collect();

    Ok(FidelityDataset {
        meta: DatasetMeta {
            kind: spec.kind,
            input_ranges: ranges,
            mesh_sizes: mesh_sizes.to_vec(),
            counts: counts.to_vec(),
            test_count,
            seed,
            fidelity_map,
            d,
            input_dim,
            cfl_warnings: warn_train + warn_test,
        },
        train,
        test,
    })
}

/// Dense oracle for small Poisson systems, used by tests: assemble the
/// interior 5-point system and solve it directly.
pub fn solve_poisson_dense_oracle(x: &[f64], s: usize) -> Vec<f64> {
    let (bottom, top, left, right, beta) = (x[0], x[1], x[2], x[3], x[4]);
    let n = (s - 2) * (s - 2);
    let idx = |i: usize, j: usize| (i - 1) * (s - 2) + (j - 1);
    // -Δ is SPD; assemble 4u - Σ neighbors = -h² f  + boundary terms
    let mut a = Matrix::zeros(n, n);
    let mut b = vec![0.0; n];
    let ci = (0.5 * (s - 1) as f64).round() as usize;
    for i in 1..s - 1 {
        for j in 1..s - 1 {
            let r = idx(i, j);
            a.set(r, r, 4.0);
            if i == ci && j == ci {
                b[r] -= beta;
            }
            let mut neighbor = |ii: usize, jj: usize| {
                if ii == 0 {
                    b[r] += bottom;
                } else if ii == s - 1 {
                    b[r] += top;
                } else if jj == 0 {
                    b[r] += left;
                } else if jj == s - 1 {
                    b[r] += right;
                } else {
                    a.set(r, idx(ii, jj), -1.0);
                }
            };
            neighbor(i - 1, j);
            neighbor(i + 1, j);
            neighbor(i, j - 1);
            neighbor(i, j + 1);
        }
    }
    let l = cholesky(&a, 0.0).expect("interior Laplacian is SPD");
    let sol = chol_solve(&l, &b);
    let mut full = solve_poisson(x, s).unwrap();
    for i in 1..s - 1 {
        for j in 1..s - 1 {
            full[i * s + j] = sol[idx(i, j)];
        }
    }
    full
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::nrmse_flat;

    #[test]
    fn poisson_constant_boundary_is_exact() {
        let u = solve_poisson(&[0.5, 0.5, 0.5, 0.5, 0.0], 16).unwrap();
        assert!(u.iter().all(|&v| (v - 0.5).abs() < 1e-10));
    }

    #[test]
    fn poisson_max_principle_without_source() {
        let u = solve_poisson(&[0.1, 0.9, 0.1, 0.9, 0.0], 17).unwrap();
        for i in 1..16 {
            for j in 1..16 {
                let v = u[i * 17 + j];
                assert!(v > 0.1 && v < 0.9, "interior value {v} escapes the boundary range");
            }
        }
    }

    #[test]
    fn poisson_matches_dense_oracle() {
        let x = [0.1, 0.1, 0.1, 0.1, 0.5];
        let sor = solve_poisson(&x, 5).unwrap();
        let dense = solve_poisson_dense_oracle(&x, 5);
        for (a, b) in sor.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn poisson_rejects_bad_input() {
        assert!(solve_poisson(&[0.5; 4], 8).is_err());
        assert!(solve_poisson(&[0.5; 5], 2).is_err());
    }

    #[test]
    fn heat_initial_row_is_square_pulse() {
        let s = 21;
        let field = solve_heat(&[0.3, -0.2, 0.05], s).unwrap();
        for i in 0..s {
            let x = i as f64 / (s - 1) as f64;
            let expect = heaviside(x - 0.25) - heaviside(x - 0.75);
            assert_eq!(field[i], expect);
        }
    }

    #[test]
    fn heat_zero_flux_conserves_mean() {
        for s in [9, 16, 33] {
            let field = solve_heat(&[0.0, 0.0, 0.07], s).unwrap();
            let mean0: f64 = field[..s].iter().sum::<f64>() / s as f64;
            for lvl in 1..s {
                let m: f64 = field[lvl * s..(lvl + 1) * s].iter().sum::<f64>() / s as f64;
                assert!((m - mean0).abs() < 1e-8, "level {lvl}: {m} vs {mean0}");
            }
        }
    }

    #[test]
    fn heat_diffuses_to_uniform_mean() {
        let s = 64;
        let field = solve_heat(&[0.0, 0.0, 0.1], s).unwrap();
        let mean0: f64 = field[..s].iter().sum::<f64>() / s as f64;
        let last = &field[(s - 1) * s..];
        let dev = last.iter().fold(0.0f64, |m, v| m.max((v - mean0).abs()));
        assert!(dev < 1e-3, "max deviation {dev}");
    }

    #[test]
    fn burgers_initial_row() {
        let s = 16;
        let (field, _) = solve_burgers(&[0.05], s).unwrap();
        for i in 0..s {
            let x = i as f64 / (s - 1) as f64;
            assert_eq!(field[i], (std::f64::consts::PI * x / 2.0).sin());
        }
    }

    #[test]
    fn burgers_dissipates() {
        let s = 32;
        let (field, _) = solve_burgers(&[0.1], s).unwrap();
        let max0 = field[..s].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_t = field[(s - 1) * s..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_t < max0, "{max_t} !< {max0}");
    }

    #[test]
    fn burgers_grid_convergence() {
        let x = [0.01];
        let (ref128, _) = solve_burgers(&x, 128).unwrap();
        let (s8, _) = solve_burgers(&x, 8).unwrap();
        let (s16, _) = solve_burgers(&x, 16).unwrap();
        let e8 = nrmse_flat(&resample_field(&s8, 8, 128), &ref128).unwrap();
        let e16 = nrmse_flat(&resample_field(&s16, 16, 128), &ref128).unwrap();
        assert!(e16 < e8, "{e16} !< {e8}");
    }

    #[test]
    fn fidelity_map_protocol_values() {
        let map = FidelityMap::new(8, 64).unwrap();
        assert_eq!(map.fidelity_of_mesh(8), 0.0);
        assert_eq!(map.fidelity_of_mesh(64), 1.0);
        assert!((map.fidelity_of_mesh(128) - 2.142857142857143).abs() < 1e-15);
        assert_eq!(map.fidelity_of_mesh(36), 0.5);
        assert!(FidelityMap::new(8, 8).is_err());
    }

    #[test]
    fn resample_preserves_constants_exactly() {
        let y = vec![0.7; 9];
        for target in [2, 3, 5, 64] {
            let r = resample_field(&y, 3, target);
            assert!(r.iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn resample_bilinear_center() {
        let y = vec![0.0, 1.0, 1.0, 2.0];
        let r = resample_field(&y, 2, 3);
        assert_eq!(r[4], 1.0);
    }

    #[test]
    fn resample_roundtrip_on_bilinear_field() {
        // seed field: bilinear interpolation of a 4×4 grid is piecewise
        // bilinear with kinks on the 16- and 64-grids, so the roundtrip is exact
        let seed: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let y16 = resample_field(&seed, 4, 16);
        let up = resample_field(&y16, 16, 64);
        let back = resample_field(&up, 64, 16);
        for (a, b) in back.iter().zip(&y16) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn generate_dataset_protocol_shapes() {
        let spec = PdeSpec::new(PdeKind::Burgers);
        let ds = generate_dataset(&spec, &[8, 12, 16], &[6, 4, 2], 5, 1).unwrap();
        assert_eq!(ds.train.len(), 12);
        assert_eq!(ds.test.len(), 5);
        assert_eq!(ds.meta.d, 256);
        assert!(ds.train.iter().all(|e| e.y.len() == 256));
        assert!(ds.test.iter().all(|e| e.y.len() == 256 && e.native_s == 16));
        assert_eq!(ds.train_fidelities(), vec![0.0, 0.5, 1.0]);
        // train/test inputs disjoint
        for te in &ds.test {
            for tr in &ds.train {
                let dist = te.x.iter().zip(&tr.x).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
                assert!(dist > 1e-6);
            }
        }
    }

    #[test]
    fn generate_dataset_is_deterministic() {
        let spec = PdeSpec::new(PdeKind::Heat);
        let a = generate_dataset(&spec, &[6, 9], &[3, 2], 2, 7).unwrap();
        let b = generate_dataset(&spec, &[6, 9], &[3, 2], 2, 7).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn generate_dataset_single_mesh_convention() {
        let spec = PdeSpec::new(PdeKind::Burgers);
        let ds = generate_dataset(&spec, &[8], &[3], 2, 1).unwrap();
        assert!(ds.meta.fidelity_map.is_none());
        assert!(ds.train.iter().all(|e| e.m == 0.0));
    }

    #[test]
    fn generate_dataset_rejects_bad_args() {
        let spec = PdeSpec::new(PdeKind::Poisson);
        assert!(generate_dataset(&spec, &[], &[], 1, 0).is_err());
        assert!(generate_dataset(&spec, &[8, 8], &[1, 1], 1, 0).is_err());
        assert!(generate_dataset(&spec, &[8, 16], &[1], 1, 0).is_err());
    }
}
