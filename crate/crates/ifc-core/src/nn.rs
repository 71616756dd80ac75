//! Feed-forward networks with tanh hidden activations and a linear output
//! layer. These house the ODE dynamics, initial-state, and basis-dynamics
//! maps, so every forward pass runs on an autodiff tape.

use crate::autodiff::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// A small MLP: tanh on hidden layers, identity on the output layer.
/// Parameters live in plain buffers; [`Mlp::slice_vars`] views them from a
/// flat parameter leaf during a taped evaluation.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    /// Per layer: row-major (out × in) weight matrix.
    pub weights: Vec<Vec<f64>>,
    /// Per layer: bias of length `out`.
    pub biases: Vec<Vec<f64>>,
}

/// Tape handles for one MLP's parameters, sliced from a flat leaf.
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, deterministic in the rng state.
    pub fn init(widths: &[usize], rng: &mut ChaCha12Rng) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        assert!(widths.iter().all(|&w| w > 0), "widths must be positive");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Mlp { widths: widths.to_vec(), weights, biases }
    }

    /// All-zero parameters (forward is identically zero).
    pub fn zeros(widths: &[usize]) -> Self {
        let mut m = Mlp {
            widths: widths.to_vec(),
            weights: Vec::new(),
            biases: Vec::new(),
        };
        for l in 0..widths.len() - 1 {
            m.weights.push(vec![0.0; widths[l] * widths[l + 1]]);
            m.biases.push(vec![0.0; widths[l + 1]]);
        }
        m
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }

    /// Read parameters back from `flat[offset..]`, returning the new offset.
    pub fn read_from(&mut self, flat: &[f64], mut offset: usize) -> usize {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let wl = w.len();
            w.copy_from_slice(&flat[offset..offset + wl]);
            offset += wl;
            let bl = b.len();
            b.copy_from_slice(&flat[offset..offset + bl]);
            offset += bl;
        }
        offset
    }

    /// Slice weight/bias views out of a flat parameter leaf, advancing `offset`.
    pub fn slice_vars(&self, tape: &mut Tape, leaf: Var, offset: &mut usize) -> MlpVars {
        let mut vars = MlpVars { weights: Vec::new(), biases: Vec::new() };
        for l in 0..self.widths.len() - 1 {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            vars.weights.push(tape.slice(leaf, *offset, &[fan_out, fan_in]));
            *offset += fan_in * fan_out;
            vars.biases.push(tape.slice(leaf, *offset, &[fan_out]));
            *offset += fan_out;
        }
        vars
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Var {
        assert_eq!(tape.value(input).len(), self.widths[0], "input width mismatch");
        let last = self.widths.len() - 2;
        let mut h = input;
        for l in 0..=last {
            let a = tape.matvec(vars.weights[l], h);
            let a = tape.add(a, vars.biases[l]);
            h = if l < last { tape.tanh(a) } else { a };
        }
        h
    }

    /// Forward pass for a batch laid out as an (input_dim × n) matrix;
    /// returns (output_dim × n).
    pub fn forward_batch(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Var {
        assert_eq!(tape.shape(input)[0], self.widths[0], "batch input width mismatch");
        let last = self.widths.len() - 2;
        let mut h = input;
        for l in 0..=last {
            let a = tape.matmul(vars.weights[l], h);
            let a = tape.add_col_vec(a, vars.biases[l]);
            h = if l < last { tape.tanh(a) } else { a };
        }
        h
    }

    /// Convenience: run the network on plain values via a scratch tape.
    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut flat = Vec::with_capacity(self.param_count());
        self.flatten_into(&mut flat);
        let leaf = tape.constant(&[flat.len()], &flat);
        let mut off = 0;
        let vars = self.slice_vars(&mut tape, leaf, &mut off);
        let x = tape.constant(&[input.len()], input);
        let out = self.forward(&mut tape, &vars, x);
        tape.value(out).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStreams;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 8, 8, 2]);
        let y = net.eval(&[0.7, -0.3, 2.0]);
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_identity() {
        let mut net = Mlp::zeros(&[2, 2]);
        net.weights[0] = vec![1.0, 0.0, 0.0, 1.0];
        let y = net.eval(&[0.4, -1.5]);
        assert_eq!(y, vec![0.4, -1.5]);
    }

    #[test]
    fn hand_evaluated_1_2_1() {
        // W1 = [[1],[−1]], b1 = 0, W2 = [[0.5, 0.5]], b2 = 0, input 0.3
        // output = 0.5(tanh 0.3 + tanh −0.3) = 0
        let mut net = Mlp::zeros(&[1, 2, 1]);
        net.weights[0] = vec![1.0, -1.0];
        net.weights[1] = vec![0.5, 0.5];
        let y = net.eval(&[0.3]);
        assert!(y[0].abs() < 1e-16, "{}", y[0]);
    }

    #[test]
    fn init_is_deterministic_and_counts_params() {
        let streams = RngStreams::new(11);
        let a = Mlp::init(&[3, 10, 10, 5], &mut streams.stream("init"));
        let b = Mlp::init(&[3, 10, 10, 5], &mut streams.stream("init"));
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.biases, b.biases);
        assert_eq!(a.param_count(), 3 * 10 + 10 + 10 * 10 + 10 + 10 * 5 + 5);
    }

    #[test]
    fn init_respects_glorot_bound() {
        let streams = RngStreams::new(5);
        let net = Mlp::init(&[4, 7, 2], &mut streams.stream("init"));
        for (l, w) in net.weights.iter().enumerate() {
            let (fan_in, fan_out) = (net.widths[l], net.widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            assert!(w.iter().all(|x| x.abs() <= bound));
        }
        assert!(net.biases.iter().all(|b| b.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn hidden_activations_bounded_by_tanh() {
        let streams = RngStreams::new(9);
        let net = Mlp::init(&[2, 16, 16, 3], &mut streams.stream("init"));
        let mut tape = Tape::new();
        let mut flat = Vec::new();
        net.flatten_into(&mut flat);
        let leaf = tape.leaf(&[flat.len()], &flat);
        let mut off = 0;
        let vars = net.slice_vars(&mut tape, leaf, &mut off);
        let x = tape.constant(&[2], &[3.0, -8.0]);
        // first hidden layer
        let a = tape.matvec(vars.weights[0], x);
        let a = tape.add(a, vars.biases[0]);
        let h = tape.tanh(a);
        assert!(tape.value(h).iter().all(|v| v.abs() < 1.0));
        let _ = vars;
    }

    #[test]
    fn batch_forward_matches_single() {
        let streams = RngStreams::new(21);
        let net = Mlp::init(&[3, 6, 6, 2], &mut streams.stream("init"));
        let xs = [[0.1, 0.5, -0.2], [1.0, -1.0, 0.3]];
        let singles: Vec<Vec<f64>> = xs.iter().map(|x| net.eval(x)).collect();

        let mut tape = Tape::new();
        let mut flat = Vec::new();
        net.flatten_into(&mut flat);
        let leaf = tape.constant(&[flat.len()], &flat);
        let mut off = 0;
        let vars = net.slice_vars(&mut tape, leaf, &mut off);
        // batch as (3 × 2): column j is example j
        let batch = tape.constant(&[3, 2], &[0.1, 1.0, 0.5, -1.0, -0.2, 0.3]);
        let out = net.forward_batch(&mut tape, &vars, batch);
        let od = tape.value(out);
        for j in 0..2 {
            for i in 0..2 {
                assert!((od[i * 2 + j] - singles[j][i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_lipschitz_composability() {
        // ‖f(x) − f(y)‖ ≤ Π‖W_l‖_op · ‖x − y‖; bound ‖W‖_op by its Frobenius norm
        let streams = RngStreams::new(33);
        let net = Mlp::init(&[2, 12, 12, 2], &mut streams.stream("init"));
        let lip: f64 = net
            .weights
            .iter()
            .map(|w| w.iter().map(|x| x * x).sum::<f64>().sqrt())
            .product();
        let mut rng = streams.stream("pairs");
        use rand::Rng;
        for _ in 0..20 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fx = net.eval(&x);
            let fy = net.eval(&y);
            let dio: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let dout: f64 = fx.iter().zip(&fy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(dout <= lip * dio + 1e-12);
        }
    }
}
