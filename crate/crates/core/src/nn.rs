//! Dense layers, the LSTM cell and its bi-directional wrapper, attention
//! pooling, and the MLP policy head.
//!
//! Every layer comes in two halves: a `*Params` struct that owns tensors and
//! a bound struct of tape handles produced by `bind`. Binding registers the
//! tensors on the tape in the order returned by `tensors()`, which is also
//! the order gradients come back in.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn uniform_fan_in(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// `[out×in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: Var,
    pub bias: Var,
}

impl DenseParams {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: uniform_fan_in(rng, &[fan_out, fan_in], fan_in),
            bias: uniform_fan_in(rng, &[fan_out], fan_in),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_out, fan_in]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Dense {
        Dense {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }
}

impl Dense {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// LSTM weights over the concatenated `[input, previous hidden]` vector.
///
/// Rows of `weight` and `bias` are four blocks of width `H` in the order
/// input gate, forget gate, output gate, candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `[4H × (in + H)]`
    pub weight: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub weight: Var,
    pub bias: Var,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init(rng: &mut impl Rng, input_dim: usize, hidden: usize) -> Self {
        let fan_in = input_dim + hidden;
        Self {
            weight: uniform_fan_in(rng, &[4 * hidden, fan_in], fan_in),
            bias: uniform_fan_in(rng, &[4 * hidden], fan_in),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[4 * hidden, input_dim + hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.weight.shape()[0] / 4
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1] - self.hidden()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Lstm {
        Lstm {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
            input_dim: self.input_dim(),
            hidden: self.hidden(),
        }
    }
}

/// One LSTM step: returns the new `(h, c)`.
pub fn lstm_cell_step(
    tape: &mut Tape<'_>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &Lstm,
) -> Result<(Var, Var)> {
    let hd = p.hidden;
    for (v, want) in [(x, p.input_dim), (h_prev, hd), (c_prev, hd)] {
        let got = tape.value(v);
        if got.rank() != 1 || got.len() != want {
            return Err(Error::shape("lstm_cell_step", got.shape(), &[want]));
        }
    }
    let xh = tape.concat(&[x, h_prev])?;
    let gates = tape.linear(xh, p.weight, p.bias)?;
    let i = tape.slice(gates, 0, hd)?;
    let f = tape.slice(gates, hd, hd)?;
    let o = tape.slice(gates, 2 * hd, hd)?;
    let g = tape.slice(gates, 3 * hd, hd)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let o = tape.sigmoid(o)?;
    let g = tape.tanh(g)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c)?;
    let h = tape.mul(o, squashed)?;
    Ok((h, c))
}

fn run_direction(tape: &mut Tape<'_>, inputs: &[Var], p: &Lstm, reverse: bool) -> Result<Vec<Var>> {
    let mut h = tape.constant(Tensor::zeros(&[p.hidden]));
    let mut c = h;
    let mut out = vec![h; inputs.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..inputs.len()).rev())
    } else {
        Box::new(0..inputs.len())
    };
    for t in order {
        (h, c) = lstm_cell_step(tape, inputs[t], h, c, p)?;
        out[t] = h;
    }
    Ok(out)
}

/// Runs a forward and a backward LSTM from zero states and sums their hidden
/// states per time step.
pub fn bilstm_encode(tape: &mut Tape<'_>, inputs: &[Var], fwd: &Lstm, bwd: &Lstm) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Err(Error::Contract("bilstm_encode needs at least one step".into()));
    }
    if fwd.hidden != bwd.hidden {
        return Err(Error::shape("bilstm_encode", &[fwd.hidden], &[bwd.hidden]));
    }
    let forward = run_direction(tape, inputs, fwd, false)?;
    let backward = run_direction(tape, inputs, bwd, true)?;
    forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| tape.add(f, b))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub projection: DenseParams,
    /// Learned query vector, length equal to the projection width.
    pub query: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub projection: Dense,
    pub query: Var,
}

impl AttentionParams {
    pub fn init(rng: &mut impl Rng, hidden: usize, dim: usize) -> Self {
        let query = (0..dim)
            .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Self {
            projection: DenseParams::init(rng, hidden, dim),
            query: Tensor::vector(query),
        }
    }

    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self {
            projection: DenseParams::zeros(hidden, dim),
            query: Tensor::zeros(&[dim]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.projection.tensors();
        v.push(&self.query);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.projection.tensors_mut();
        v.push(&mut self.query);
        v
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Attention {
        Attention {
            projection: self.projection.bind(tape),
            query: tape.param(&self.query),
        }
    }
}

/// Scores each hidden state against the learned query and returns the
/// softmax-weighted sum `r` together with the weights `α`.
pub fn attention_pool(tape: &mut Tape<'_>, hs: &[Var], p: &Attention) -> Result<(Var, Var)> {
    if hs.is_empty() {
        return Err(Error::Contract("attention_pool needs at least one state".into()));
    }
    let stacked = tape.stack_rows(hs)?;
    let u = p.projection.forward(tape, stacked)?;
    let u = tape.tanh(u)?;
    let scores = tape.matmul(u, p.query)?;
    let alpha = tape.softmax(scores)?;
    let r = tape.matmul(alpha, stacked)?;
    Ok((r, alpha))
}

/// MLP with `tanh` hidden activations and a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub layers: Vec<DenseParams>,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub layers: Vec<Dense>,
}

impl PolicyParams {
    /// `widths` lists every layer width including input and output.
    pub fn init(rng: &mut impl Rng, widths: &[usize]) -> Self {
        Self {
            layers: widths
                .windows(2)
                .map(|w| DenseParams::init(rng, w[0], w[1]))
                .collect(),
        }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Self {
            layers: widths
                .windows(2)
                .map(|w| DenseParams::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty policy").fan_out()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(DenseParams::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(DenseParams::tensors_mut).collect()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Policy {
        Policy {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }
}

impl Policy {
    /// Applies the MLP to `[in]` or row-wise to `[T×in]`.
    pub fn forward(&self, tape: &mut Tape<'_>, input: Var) -> Result<Var> {
        let mut x = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < last {
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }
}

/// Action mean for a single state conditioned on latent `z`.
pub fn policy_forward(tape: &mut Tape<'_>, s: Var, z: Var, p: &Policy) -> Result<Var> {
    let input = tape.concat(&[s, z])?;
    p.forward(tape, input)
}

/// Action means for every row of `states` (`[T×state_dim]`), all conditioned
/// on the same `z`.
pub fn policy_forward_rows(tape: &mut Tape<'_>, states: Var, z: Var, p: &Policy) -> Result<Var> {
    let rows = tape.value(states).rows_cols().0;
    let zs = tape.repeat_rows(z, rows)?;
    let input = tape.concat_cols(states, zs)?;
    p.forward(tape, input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_lstm_gives_zero_state() {
        let p = LstmParams::zeros(3, 4);
        let mut tape = Tape::new();
        let lstm = p.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[3]));
        let h0 = tape.constant(Tensor::zeros(&[4]));
        let (h, c) = lstm_cell_step(&mut tape, x, h0, h0, &lstm).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0; 4]);
        assert_eq!(tape.value(c).data(), &[0.0; 4]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut p = LstmParams::zeros(2, 3);
        let hd = 3;
        for j in 0..hd {
            p.bias.data_mut()[j] = -50.0; // input gate closed
            p.bias.data_mut()[hd + j] = 50.0; // forget gate open
        }
        let mut tape = Tape::new();
        let lstm = p.bind(&mut tape);
        let x = tape.constant(Tensor::vector(vec![0.4, -0.9]));
        let h0 = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let c_prev = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let c0 = tape.constant(c_prev.clone());
        let (_, c) = lstm_cell_step(&mut tape, x, h0, c0, &lstm).unwrap();
        for (a, b) in tape.value(c).data().iter().zip(c_prev.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_rejects_width_mismatch() {
        let p = LstmParams::zeros(3, 4);
        let mut tape = Tape::new();
        let lstm = p.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2]));
        let h0 = tape.constant(Tensor::zeros(&[4]));
        assert!(lstm_cell_step(&mut tape, x, h0, h0, &lstm).is_err());
    }

    #[test]
    fn bilstm_single_step_is_sum_of_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fwd = LstmParams::init(&mut rng, 2, 3);
        let bwd = LstmParams::init(&mut rng, 2, 3);
        let mut tape = Tape::new();
        let (f, b) = (fwd.bind(&mut tape), bwd.bind(&mut tape));
        let x = tape.constant(Tensor::vector(vec![0.3, -0.2]));
        let out = bilstm_encode(&mut tape, &[x], &f, &b).unwrap();
        let zero = tape.constant(Tensor::zeros(&[3]));
        let (hf, _) = lstm_cell_step(&mut tape, x, zero, zero, &f).unwrap();
        let (hb, _) = lstm_cell_step(&mut tape, x, zero, zero, &b).unwrap();
        let expected: Vec<f64> = tape
            .value(hf)
            .data()
            .iter()
            .zip(tape.value(hb).data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(tape.value(out[0]).data(), expected.as_slice());
    }

    #[test]
    fn bilstm_rejects_empty() {
        let p = LstmParams::zeros(2, 3);
        let mut tape = Tape::new();
        let l = p.bind(&mut tape);
        assert!(bilstm_encode(&mut tape, &[], &l, &l).is_err());
    }

    #[test]
    fn attention_single_and_identical_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::init(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let att = p.bind(&mut tape);
        let h = Tensor::vector(vec![0.2, -0.4, 0.9]);
        let h1 = tape.constant(h.clone());
        let (r, a) = attention_pool(&mut tape, &[h1], &att).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0]);
        assert_eq!(tape.value(r).data(), h.data());

        let hs = vec![tape.constant(h.clone()); 4];
        let (r, a) = attention_pool(&mut tape, &hs, &att).unwrap();
        for &w in tape.value(a).data() {
            assert!((w - 0.25).abs() < 1e-15);
        }
        for (x, y) in tape.value(r).data().iter().zip(h.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_policy_outputs_zero() {
        let p = PolicyParams::zeros(&[4, 8, 8, 2]);
        let mut tape = Tape::new();
        let pol = p.bind(&mut tape);
        let s = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        let z = tape.constant(Tensor::one_hot(2, 1));
        let a = policy_forward(&mut tape, s, z, &pol).unwrap();
        assert_eq!(tape.value(a).data(), &[0.0, 0.0]);
    }

    #[test]
    fn row_policy_matches_single_state_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = PolicyParams::init(&mut rng, &[5, 6, 2]);
        let states = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]]).unwrap();
        let zt = Tensor::vector(vec![0.0, 1.0]);
        let mut tape = Tape::new();
        let pol = p.bind(&mut tape);
        let z = tape.constant_ref(&zt);
        let sm = tape.constant_ref(&states);
        let batch = policy_forward_rows(&mut tape, sm, z, &pol).unwrap();
        for r in 0..2 {
            let s = tape.constant(Tensor::vector(states.row(r).to_vec()));
            let a = policy_forward(&mut tape, s, z, &pol).unwrap();
            assert_eq!(tape.value(a).data(), tape.value(batch).row(r));
        }
    }
}
