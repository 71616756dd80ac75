//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! The tape records tensor-valued primitives (elementwise math, matrix
//! products, reductions, slicing/gather, and SPD inverse/log-det) during the
//! forward pass and replays them in reverse id order to accumulate gradients.
//! A tape is rebuilt for every loss evaluation; replaying identical inputs
//! yields bit-identical values and gradients.
//!
//! A tape is confined to one thread; independent tapes may run in parallel.

use crate::linalg::{self, Matrix};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("linear algebra failure on tape: {0}")]
    Linalg(#[from] linalg::LinalgError),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sum(usize),
    Dot(usize, usize),
    Trace(usize),
    MatVec(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    /// matrix + column vector broadcast down the columns
    AddColVec(usize, usize),
    /// scalar node × tensor node
    ScalarMul(usize, usize),
    Concat(Vec<usize>),
    Slice {
        src: usize,
        start: usize,
    },
    /// out[i] = map[i] >= 0 ? src[map[i]] : 0
    Gather {
        src: usize,
        map: Arc<Vec<i64>>,
    },
    Reshape(usize),
    InverseSpd(usize),
    LogDetSpd(usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Append-only record of the forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward output w.r.t. `v`, or `None` if `v` was
    /// unreachable (treat as zero).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as an owned vector, zero-filled when unreachable.
    pub fn to_vec(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; tape.nodes[v.0].data.len()],
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { op, shape, data });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, shape: &[usize], data: &[f64]) -> Var {
        self.push(Op::Leaf, shape.to_vec(), data.to_vec())
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], data: &[f64]) -> Var {
        self.push(Op::Constant, shape.to_vec(), data.to_vec())
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.push(Op::Constant, vec![], vec![x])
    }

    fn binary_elementwise(&mut self, op: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64, a: Var, b: Var) -> Var {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "elementwise op shape mismatch"
        );
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(op(a.0, b.0), shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(Op::Add, |x, y| x + y, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(Op::Sub, |x, y| x - y, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(Op::Mul, |x, y| x * y, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(Op::Div, |x, y| x / y, a, b)
    }

    fn unary(&mut self, op: impl Fn(usize) -> Op, f: impl Fn(f64) -> f64, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| f(*x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(op(a.0), shape, data)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg, |x| -x, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh, f64::tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp, f64::exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Op::Ln, f64::ln, a)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(|i| Op::Scale(i, c), |x| c * x, a)
    }

    /// Add a compile-time constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Offset, |x| x + c, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(Op::Sum(a.0), vec![], vec![s])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].data.len(), self.nodes[b.0].data.len(), "dot length mismatch");
        let s: f64 = self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a.0, b.0), vec![], vec![s])
    }

    pub fn trace(&mut self, a: Var) -> Var {
        let sh = &self.nodes[a.0].shape;
        assert!(sh.len() == 2 && sh[0] == sh[1], "trace needs a square matrix");
        let n = sh[0];
        let s: f64 = (0..n).map(|i| self.nodes[a.0].data[i * n + i]).sum();
        self.push(Op::Trace(a.0), vec![], vec![s])
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        let (r, c) = self.matrix_dims(m);
        assert_eq!(self.nodes[v.0].data.len(), c, "matvec shape mismatch");
        let mut out = vec![0.0; r];
        let md = &self.nodes[m.0].data;
        let vd = &self.nodes[v.0].data;
        for i in 0..r {
            let row = &md[i * c..(i + 1) * c];
            out[i] = row.iter().zip(vd).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVec(m.0, v.0), vec![r], out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.matrix_dims(a);
        let (br, bc) = self.matrix_dims(b);
        assert_eq!(ac, br, "matmul shape mismatch");
        let mut out = vec![0.0; ar * bc];
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        for i in 0..ar {
            for k in 0..ac {
                let av = ad[i * ac + k];
                if av == 0.0 {
                    continue;
                }
                let src = &bd[k * bc..(k + 1) * bc];
                let dst = &mut out[i * bc..(i + 1) * bc];
                for j in 0..bc {
                    dst[j] += av * src[j];
                }
            }
        }
        self.push(Op::MatMul(a.0, b.0), vec![ar, bc], out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.matrix_dims(a);
        let mut out = vec![0.0; r * c];
        let ad = &self.nodes[a.0].data;
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        self.push(Op::Transpose(a.0), vec![c, r], out)
    }

    /// out[i,j] = m[i,j] + v[i] — bias broadcast across batch columns.
    pub fn add_col_vec(&mut self, m: Var, v: Var) -> Var {
        let (r, c) = self.matrix_dims(m);
        assert_eq!(self.nodes[v.0].data.len(), r, "add_col_vec shape mismatch");
        let mut out = self.nodes[m.0].data.clone();
        let vd = &self.nodes[v.0].data;
        for i in 0..r {
            let b = vd[i];
            for x in &mut out[i * c..(i + 1) * c] {
                *x += b;
            }
        }
        self.push(Op::AddColVec(m.0, v.0), vec![r, c], out)
    }

    /// Scalar node times tensor node.
    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Var {
        assert_eq!(self.nodes[s.0].data.len(), 1, "scalar_mul needs a scalar");
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| sv * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::ScalarMul(s.0, a.0), shape, data)
    }

    /// Concatenate 1-D (or flattened) values into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let n = data.len();
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), vec![n], data)
    }

    /// Contiguous sub-range of the flattened source, reinterpreted as `shape`.
    pub fn slice(&mut self, src: Var, start: usize, shape: &[usize]) -> Var {
        let len = numel(shape);
        assert!(start + len <= self.nodes[src.0].data.len(), "slice out of range");
        let data = self.nodes[src.0].data[start..start + len].to_vec();
        self.push(Op::Slice { src: src.0, start }, shape.to_vec(), data)
    }

    /// Strided/scattered read: out[i] = src[map[i]] with -1 entries reading 0.
    pub fn gather(&mut self, src: Var, map: Arc<Vec<i64>>, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), map.len(), "gather map/shape mismatch");
        let sd = &self.nodes[src.0].data;
        let data: Vec<f64> = map
            .iter()
            .map(|&i| if i >= 0 { sd[i as usize] } else { 0.0 })
            .collect();
        self.push(Op::Gather { src: src.0, map }, shape.to_vec(), data)
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), self.nodes[a.0].data.len(), "reshape length mismatch");
        let data = self.nodes[a.0].data.clone();
        self.push(Op::Reshape(a.0), shape.to_vec(), data)
    }

    /// Inverse of a symmetric positive-definite matrix node.
    pub fn inverse_spd(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.matrix_dims(a);
        let m = Matrix { rows: r, cols: c, data: self.nodes[a.0].data.clone() };
        let inv = linalg::spd_inverse(&m, 0.0)?;
        Ok(self.push(Op::InverseSpd(a.0), vec![r, c], inv.data))
    }

    /// log det of a symmetric positive-definite matrix node.
    pub fn logdet_spd(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.matrix_dims(a);
        let m = Matrix { rows: r, cols: c, data: self.nodes[a.0].data.clone() };
        let l = linalg::cholesky(&m, 0.0)?;
        let v = linalg::logdet_from_cholesky(&l);
        Ok(self.push(Op::LogDetSpd(a.0), vec![], vec![v]))
    }

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let sh = &self.nodes[v.0].shape;
        assert_eq!(sh.len(), 2, "expected a matrix, got shape {sh:?}");
        (sh[0], sh[1])
    }

    /// Reverse sweep from a scalar `output`; returns ∂output/∂node for every
    /// node reachable from it. Unreachable nodes report no gradient (zero).
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        if !self.nodes[output.0].shape.is_empty() && self.nodes[output.0].data.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(self.nodes[output.0].shape.clone()));
        }

        // mark the subgraph feeding the output
        let mut needed = vec![false; self.nodes.len()];
        needed[output.0] = true;
        for id in (0..=output.0).rev() {
            if !needed[id] {
                continue;
            }
            self.for_each_input(id, |src| needed[src] = true);
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            if !needed[id] || grads[id].is_none() {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn for_each_input(&self, id: usize, mut f: impl FnMut(usize)) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Dot(a, b)
            | Op::MatVec(a, b) | Op::MatMul(a, b) | Op::AddColVec(a, b) | Op::ScalarMul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Neg(a) | Op::Scale(a, _) | Op::Offset(a) | Op::Tanh(a) | Op::Exp(a)
            | Op::Ln(a) | Op::Sum(a) | Op::Trace(a) | Op::Transpose(a) | Op::Reshape(a)
            | Op::InverseSpd(a) | Op::LogDetSpd(a) => f(*a),
            Op::Concat(parts) => parts.iter().for_each(|p| f(*p)),
            Op::Slice { src, .. } | Op::Gather { src, .. } => f(*src),
        }
    }

    fn grad_buf(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<(), AutodiffError> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                let ga = Self::grad_buf(grads, *a, g.len());
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
                let gb = Self::grad_buf(grads, *b, g.len());
                for (x, gi) in gb.iter_mut().zip(g) {
                    *x += gi;
                }
            }
            Op::Sub(a, b) => {
                let ga = Self::grad_buf(grads, *a, g.len());
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
                let gb = Self::grad_buf(grads, *b, g.len());
                for (x, gi) in gb.iter_mut().zip(g) {
                    *x -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (bd, ad) = (&self.nodes[*b].data, &self.nodes[*a].data);
                let ga = Self::grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bd[i];
                }
                let gb = Self::grad_buf(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
            Op::Div(a, b) => {
                let bd = &self.nodes[*b].data;
                let out = &node.data;
                let ga = Self::grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] / bd[i];
                }
                let gb = Self::grad_buf(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] -= g[i] * out[i] / bd[i];
                }
            }
            Op::Neg(a) => {
                let ga = Self::grad_buf(grads, *a, g.len());
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x -= gi;
                }
            }
            Op::Scale(a, c) => {
                let ga = Self::grad_buf(grads, *a, g.len());
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += c * gi;
                }
            }
            Op::Offset(a) => {
                let ga = Self::grad_buf(grads, *a, g.len());
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }
            Op::Tanh(a) => {
                let out = &node.data;
                let ga = Self::grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }
            Op::Exp(a) => {
                let out = &node.data;
                let ga = Self::grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }
            Op::Ln(a) => {
                let ad = &self.nodes[*a].data;
                let ga = Self::grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] / ad[i];
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].data.len();
                let ga = Self::grad_buf(grads, *a, n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                let ga = Self::grad_buf(grads, *a, ad.len());
                for i in 0..ga.len() {
                    ga[i] += g[0] * bd[i];
                }
                let gb = Self::grad_buf(grads, *b, bd.len());
                for i in 0..gb.len() {
                    gb[i] += g[0] * ad[i];
                }
            }
            Op::Trace(a) => {
                let n = self.nodes[*a].shape[0];
                let ga = Self::grad_buf(grads, *a, n * n);
                for i in 0..n {
                    ga[i * n + i] += g[0];
                }
            }
            Op::MatVec(m, v) => {
                let (r, c) = (self.nodes[*m].shape[0], self.nodes[*m].shape[1]);
                let (md, vd) = (&self.nodes[*m].data, &self.nodes[*v].data);
                let gm = Self::grad_buf(grads, *m, r * c);
                for i in 0..r {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let dst = &mut gm[i * c..(i + 1) * c];
                    for j in 0..c {
                        dst[j] += gi * vd[j];
                    }
                }
                let gv = Self::grad_buf(grads, *v, c);
                for i in 0..r {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = &md[i * c..(i + 1) * c];
                    for j in 0..c {
                        gv[j] += gi * row[j];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ar, ac) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let bc = self.nodes[*b].shape[1];
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                // gA += G Bᵀ
                let ga = Self::grad_buf(grads, *a, ar * ac);
                for i in 0..ar {
                    let grow = &g[i * bc..(i + 1) * bc];
                    for k in 0..ac {
                        let brow = &bd[k * bc..(k + 1) * bc];
                        let mut s = 0.0;
                        for j in 0..bc {
                            s += grow[j] * brow[j];
                        }
                        ga[i * ac + k] += s;
                    }
                }
                // gB += Aᵀ G
                let gb = Self::grad_buf(grads, *b, ac * bc);
                for i in 0..ar {
                    let grow = &g[i * bc..(i + 1) * bc];
                    for k in 0..ac {
                        let av = ad[i * ac + k];
                        if av == 0.0 {
                            continue;
                        }
                        let dst = &mut gb[k * bc..(k + 1) * bc];
                        for j in 0..bc {
                            dst[j] += av * grow[j];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let ga = Self::grad_buf(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::AddColVec(m, v) => {
                let (r, c) = (self.nodes[*m].shape[0], self.nodes[*m].shape[1]);
                let gm = Self::grad_buf(grads, *m, r * c);
                for (x, gi) in gm.iter_mut().zip(g) {
                    *x += gi;
                }
                let gv = Self::grad_buf(grads, *v, r);
                for i in 0..r {
                    gv[i] += g[i * c..(i + 1) * c].iter().sum::<f64>();
                }
            }
            Op::ScalarMul(s, a) => {
                let sv = self.nodes[*s].data[0];
                let ad = &self.nodes[*a].data;
                let gs = Self::grad_buf(grads, *s, 1);
                gs[0] += g.iter().zip(ad).map(|(gi, x)| gi * x).sum::<f64>();
                let ga = Self::grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += sv * g[i];
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[*p].data.len();
                    let gp = Self::grad_buf(grads, *p, n);
                    for (x, gi) in gp.iter_mut().zip(&g[off..off + n]) {
                        *x += gi;
                    }
                    off += n;
                }
            }
            Op::Slice { src, start } => {
                let n = self.nodes[*src].data.len();
                let gs = Self::grad_buf(grads, *src, n);
                for (x, gi) in gs[*start..*start + g.len()].iter_mut().zip(g) {
                    *x += gi;
                }
            }
            Op::Gather { src, map } => {
                let n = self.nodes[*src].data.len();
                let gs = Self::grad_buf(grads, *src, n);
                for (i, &m) in map.iter().enumerate() {
                    if m >= 0 {
                        gs[m as usize] += g[i];
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = Self::grad_buf(grads, *a, g.len());
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }
            Op::InverseSpd(a) => {
                // Y = A⁻¹ symmetric: gA -= Y G Y
                let n = node.shape[0];
                let y = Matrix { rows: n, cols: n, data: node.data.clone() };
                let gm = Matrix { rows: n, cols: n, data: g.to_vec() };
                let ygy = y.matmul(&gm).matmul(&y);
                let ga = Self::grad_buf(grads, *a, n * n);
                for i in 0..n * n {
                    ga[i] -= ygy.data[i];
                }
            }
            Op::LogDetSpd(a) => {
                // gA += g · A⁻¹ (A symmetric)
                let n = self.nodes[*a].shape[0];
                let m = Matrix { rows: n, cols: n, data: self.nodes[*a].data.clone() };
                let inv = linalg::spd_inverse(&m, 0.0)?;
                let ga = Self::grad_buf(grads, *a, n * n);
                for i in 0..n * n {
                    ga[i] += g[0] * inv.data[i];
                }
            }
        }
        Ok(())
    }
}

/// Max relative disagreement between the taped gradient and central finite
/// differences of the same scalar function, over every coordinate of `theta`.
///
/// `f` must build a scalar output from a single flat parameter leaf.
pub fn grad_check<F>(f: &mut F, theta: &[f64], step: f64) -> Result<f64, AutodiffError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    assert!(step > 0.0, "grad_check step must be positive");
    let mut tape = Tape::new();
    let leaf = tape.leaf(&[theta.len()], theta);
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let auto = grads.to_vec(&tape, leaf);

    let mut eval = |t: &[f64]| -> Result<f64, AutodiffError> {
        let mut scratch = Tape::new();
        let l = scratch.leaf(&[t.len()], t);
        let o = f(&mut scratch, l)?;
        Ok(scratch.scalar_value(o))
    };

    let mut worst = 0.0f64;
    let mut perturbed = theta.to_vec();
    for i in 0..theta.len() {
        perturbed[i] = theta[i] + step;
        let plus = eval(&perturbed)?;
        perturbed[i] = theta[i] - step;
        let minus = eval(&perturbed)?;
        perturbed[i] = theta[i];
        let fd = (plus - minus) / (2.0 * step);
        let rel = (auto[i] - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
