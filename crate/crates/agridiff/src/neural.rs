//! Neural components on the shared tape: MLP, LSTM cell with the usual
//! four gates, and activations including trainable-β swish.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Gradient, Tape, Var};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: {context} expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty sequence")]
    EmptySequence,
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Swish,
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    /// out × in, row-major
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpWeights {
    pub layers: Vec<Layer>,
    /// shared trainable swish β, used only where `Activation::Swish` appears
    pub swish_beta: f64,
}

impl MlpWeights {
    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights[0].len())
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.len())
    }
}

/// Glorot-uniform MLP init: entries in ±sqrt(6/(fan_in+fan_out)), zero
/// biases, deterministic per seed.
pub fn init_mlp(sizes: &[usize], activations: &[Activation], seed: u64) -> MlpWeights {
    use rand::{Rng, SeedableRng};
    assert!(sizes.len() >= 2);
    assert_eq!(activations.len(), sizes.len() - 1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let layers = sizes
        .windows(2)
        .zip(activations)
        .map(|(dims, &activation)| {
            let (fan_in, fan_out) = (dims[0], dims[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Layer {
                weights: (0..fan_out)
                    .map(|_| (0..fan_in).map(|_| rng.gen_range(-bound..bound)).collect())
                    .collect(),
                bias: vec![0.0; fan_out],
                activation,
            }
        })
        .collect();
    MlpWeights {
        layers,
        swish_beta: 1.0,
    }
}

pub struct LayerVars<'t> {
    pub weights: Vec<Vec<Var<'t>>>,
    pub bias: Vec<Var<'t>>,
    pub activation: Activation,
}

pub struct MlpVars<'t> {
    pub layers: Vec<LayerVars<'t>>,
    pub swish_beta: Var<'t>,
}

impl MlpWeights {
    /// Lift onto the tape, also returning the flat leaf list in the same
    /// order as [`MlpWeights::flatten`].
    pub fn lift<'t>(&self, tape: &'t Tape) -> Result<(MlpVars<'t>, Vec<Var<'t>>), NeuralError> {
        let mut flat = Vec::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let weights = layer
                .weights
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&w| {
                            let v = tape.leaf(w)?;
                            flat.push(v);
                            Ok(v)
                        })
                        .collect::<Result<Vec<_>, AdError>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            let bias = layer
                .bias
                .iter()
                .map(|&b| {
                    let v = tape.leaf(b)?;
                    flat.push(v);
                    Ok(v)
                })
                .collect::<Result<Vec<_>, AdError>>()?;
            layers.push(LayerVars {
                weights,
                bias,
                activation: layer.activation,
            });
        }
        let swish_beta = tape.leaf(self.swish_beta)?;
        flat.push(swish_beta);
        Ok((
            MlpVars {
                layers,
                swish_beta,
            },
            flat,
        ))
    }

    /// Row-major flat view aligned with `lift`'s leaf order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for layer in &self.layers {
            for row in &layer.weights {
                flat.extend_from_slice(row);
            }
            flat.extend_from_slice(&layer.bias);
        }
        flat.push(self.swish_beta);
        flat
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for layer in &mut self.layers {
            for row in &mut layer.weights {
                for w in row {
                    *w = *it.next().expect("flat vector too short");
                }
            }
            for b in &mut layer.bias {
                *b = *it.next().expect("flat vector too short");
            }
        }
        self.swish_beta = *it.next().expect("flat vector too short");
        assert!(it.next().is_none(), "flat vector too long");
    }
}

fn activate<'t>(x: Var<'t>, activation: Activation, swish_beta: Var<'t>) -> Var<'t> {
    match activation {
        Activation::Sigmoid => x.sigmoid(),
        Activation::Tanh => x.tanh(),
        Activation::Relu => x.relu(),
        Activation::Swish => x.swish(swish_beta),
        Activation::Identity => x,
    }
}

fn affine<'t>(
    weights: &[Vec<Var<'t>>],
    bias: &[Var<'t>],
    input: &[Var<'t>],
    context: &'static str,
) -> Result<Vec<Var<'t>>, NeuralError> {
    let expected = weights.first().map_or(0, |r| r.len());
    if input.len() != expected {
        return Err(NeuralError::DimensionMismatch {
            context,
            expected,
            got: input.len(),
        });
    }
    Ok(weights
        .iter()
        .zip(bias)
        .map(|(row, &b)| {
            row.iter()
                .zip(input)
                .fold(b, |acc, (&w, &x)| acc + w * x)
        })
        .collect())
}

/// Affine-then-activation composition over all layers.
pub fn mlp_forward<'t>(
    mlp: &MlpVars<'t>,
    input: &[Var<'t>],
) -> Result<Vec<Var<'t>>, NeuralError> {
    let mut current = input.to_vec();
    for layer in &mlp.layers {
        let pre = affine(&layer.weights, &layer.bias, &current, "mlp layer")?;
        current = pre
            .into_iter()
            .map(|x| activate(x, layer.activation, mlp.swish_beta))
            .collect();
    }
    Ok(current)
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmWeights {
    pub input_size: usize,
    pub hidden_size: usize,
    /// gate matrices, hidden × (hidden + input)
    pub w_f: Vec<Vec<f64>>,
    pub w_i: Vec<Vec<f64>>,
    pub w_c: Vec<Vec<f64>>,
    pub w_o: Vec<Vec<f64>>,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
    /// maps hidden state(s) to the output
    pub head: MlpWeights,
}

/// Glorot-uniform gates with forget bias 1, zero other biases, linear
/// head of the given layer sizes (first size must be `hidden`).
pub fn init_lstm(input_size: usize, hidden_size: usize, head_sizes: &[usize], seed: u64) -> LstmWeights {
    use rand::{Rng, SeedableRng};
    assert_eq!(head_sizes[0], hidden_size);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cols = hidden_size + input_size;
    let bound = (6.0 / (cols + hidden_size) as f64).sqrt();
    let mut gate = |_: &str| -> Vec<Vec<f64>> {
        (0..hidden_size)
            .map(|_| (0..cols).map(|_| rng.gen_range(-bound..bound)).collect())
            .collect()
    };
    let (w_f, w_i, w_c, w_o) = (gate("f"), gate("i"), gate("c"), gate("o"));
    let head_acts = vec![Activation::Identity; head_sizes.len() - 1];
    let head = init_mlp(head_sizes, &head_acts, rng.gen());
    LstmWeights {
        input_size,
        hidden_size,
        w_f,
        w_i,
        w_c,
        w_o,
        b_f: vec![1.0; hidden_size],
        b_i: vec![0.0; hidden_size],
        b_c: vec![0.0; hidden_size],
        b_o: vec![0.0; hidden_size],
        head,
    }
}

pub struct LstmVars<'t> {
    pub w_f: Vec<Vec<Var<'t>>>,
    pub w_i: Vec<Vec<Var<'t>>>,
    pub w_c: Vec<Vec<Var<'t>>>,
    pub w_o: Vec<Vec<Var<'t>>>,
    pub b_f: Vec<Var<'t>>,
    pub b_i: Vec<Var<'t>>,
    pub b_c: Vec<Var<'t>>,
    pub b_o: Vec<Var<'t>>,
    pub head: MlpVars<'t>,
    pub hidden_size: usize,
    pub input_size: usize,
}

#[derive(Clone)]
pub struct LstmState<'t> {
    pub h: Vec<Var<'t>>,
    pub c: Vec<Var<'t>>,
}

impl LstmWeights {
    pub fn lift<'t>(&self, tape: &'t Tape) -> Result<(LstmVars<'t>, Vec<Var<'t>>), NeuralError> {
        let mut flat = Vec::new();
        let mut matrix = |m: &Vec<Vec<f64>>| -> Result<Vec<Vec<Var<'t>>>, AdError> {
            m.iter()
                .map(|row| {
                    row.iter()
                        .map(|&w| {
                            let v = tape.leaf(w)?;
                            flat.push(v);
                            Ok(v)
                        })
                        .collect()
                })
                .collect()
        };
        let w_f = matrix(&self.w_f)?;
        let w_i = matrix(&self.w_i)?;
        let w_c = matrix(&self.w_c)?;
        let w_o = matrix(&self.w_o)?;
        let mut vector = |v: &Vec<f64>| -> Result<Vec<Var<'t>>, AdError> {
            v.iter()
                .map(|&b| {
                    let var = tape.leaf(b)?;
                    flat.push(var);
                    Ok(var)
                })
                .collect()
        };
        let b_f = vector(&self.b_f)?;
        let b_i = vector(&self.b_i)?;
        let b_c = vector(&self.b_c)?;
        let b_o = vector(&self.b_o)?;
        let (head, head_flat) = self.head.lift(tape)?;
        flat.extend(head_flat);
        Ok((
            LstmVars {
                w_f,
                w_i,
                w_c,
                w_o,
                b_f,
                b_i,
                b_c,
                b_o,
                head,
                hidden_size: self.hidden_size,
                input_size: self.input_size,
            },
            flat,
        ))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for m in [&self.w_f, &self.w_i, &self.w_c, &self.w_o] {
            for row in m {
                flat.extend_from_slice(row);
            }
        }
        for v in [&self.b_f, &self.b_i, &self.b_c, &self.b_o] {
            flat.extend_from_slice(v);
        }
        flat.extend(self.head.flatten());
        flat
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let head_len = self.head.flatten().len();
        let gate_len = flat.len() - head_len;
        let mut it = flat[..gate_len].iter();
        for m in [&mut self.w_f, &mut self.w_i, &mut self.w_c, &mut self.w_o] {
            for row in m {
                for w in row {
                    *w = *it.next().expect("flat vector too short");
                }
            }
        }
        for v in [&mut self.b_f, &mut self.b_i, &mut self.b_c, &mut self.b_o] {
            for b in v {
                *b = *it.next().expect("flat vector too short");
            }
        }
        assert!(it.next().is_none());
        self.head.load_flat(&flat[gate_len..]);
    }
}

pub fn zero_state<'t>(tape: &'t Tape, hidden_size: usize) -> LstmState<'t> {
    LstmState {
        h: (0..hidden_size).map(|_| tape.constant(0.0)).collect(),
        c: (0..hidden_size).map(|_| tape.constant(0.0)).collect(),
    }
}

/// One cell step:
///   f = σ(W_f·[h;x]+b_f), i = σ(W_i·[h;x]+b_i), c̃ = tanh(W_c·[h;x]+b_c),
///   c' = f⊙c + i⊙c̃, o = σ(W_o·[h;x]+b_o), h' = o⊙tanh(c').
pub fn lstm_cell<'t>(
    lstm: &LstmVars<'t>,
    state: &LstmState<'t>,
    x_t: &[Var<'t>],
) -> Result<LstmState<'t>, NeuralError> {
    if x_t.len() != lstm.input_size {
        return Err(NeuralError::DimensionMismatch {
            context: "lstm input",
            expected: lstm.input_size,
            got: x_t.len(),
        });
    }
    let mut hx = state.h.clone();
    hx.extend_from_slice(x_t);
    let f: Vec<Var> = affine(&lstm.w_f, &lstm.b_f, &hx, "forget gate")?
        .into_iter()
        .map(Var::sigmoid)
        .collect();
    let i: Vec<Var> = affine(&lstm.w_i, &lstm.b_i, &hx, "input gate")?
        .into_iter()
        .map(Var::sigmoid)
        .collect();
    let c_tilde: Vec<Var> = affine(&lstm.w_c, &lstm.b_c, &hx, "candidate")?
        .into_iter()
        .map(Var::tanh)
        .collect();
    let o: Vec<Var> = affine(&lstm.w_o, &lstm.b_o, &hx, "output gate")?
        .into_iter()
        .map(Var::sigmoid)
        .collect();
    let c: Vec<Var> = (0..lstm.hidden_size)
        .map(|k| f[k] * state.c[k] + i[k] * c_tilde[k])
        .collect();
    let h: Vec<Var> = (0..lstm.hidden_size).map(|k| o[k] * c[k].tanh()).collect();
    Ok(LstmState { h, c })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LstmMode {
    /// head applied to the final hidden state only
    Last,
    /// head applied to every hidden state
    PerStep,
}

/// Fold the cell over a sequence from zero initial state. Returns one
/// output vector per step in `PerStep` mode, a single one in `Last`.
pub fn lstm_forward<'t>(
    lstm: &LstmVars<'t>,
    tape: &'t Tape,
    sequence: &[Vec<f64>],
    mode: LstmMode,
) -> Result<Vec<Vec<Var<'t>>>, NeuralError> {
    let lifted: Vec<Vec<Var>> = sequence
        .iter()
        .map(|x| x.iter().map(|&v| tape.leaf(v)).collect::<Result<_, _>>())
        .collect::<Result<_, _>>()?;
    lstm_forward_vars(lstm, tape, &lifted, mode)
}

/// `lstm_forward` over inputs already on the tape, so gradients can flow
/// into the sequence itself (e.g. calibration through a frozen emulator).
pub fn lstm_forward_vars<'t>(
    lstm: &LstmVars<'t>,
    tape: &'t Tape,
    sequence: &[Vec<Var<'t>>],
    mode: LstmMode,
) -> Result<Vec<Vec<Var<'t>>>, NeuralError> {
    if sequence.is_empty() {
        return Err(NeuralError::EmptySequence);
    }
    let mut state = zero_state(tape, lstm.hidden_size);
    let mut outputs = Vec::new();
    for x_vars in sequence {
        state = lstm_cell(lstm, &state, x_vars)?;
        if mode == LstmMode::PerStep {
            outputs.push(mlp_forward(&lstm.head, &state.h)?);
        }
    }
    if mode == LstmMode::Last {
        outputs.push(mlp_forward(&lstm.head, &state.h)?);
    }
    Ok(outputs)
}

/// Gradient of a scalar output w.r.t. the lifted leaves, aligned with
/// the flat order.
pub fn flat_grad(gradient: &Gradient, leaves: &[Var<'_>]) -> Vec<f64> {
    leaves.iter().map(|&v| gradient.wrt(v)).collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn of(weights: &MlpWeights) -> Self {
        let mut sizes = vec![weights.input_size()];
        sizes.extend(weights.layers.iter().map(|l| l.weights.len()));
        Self {
            sizes,
            activations: weights.layers.iter().map(|l| l.activation).collect(),
        }
    }
}

/// JSON checkpoint: architecture, originating seed, flat row-major weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub spec: MlpSpec,
    pub seed: u64,
    pub weights: Vec<f64>,
}

impl MlpCheckpoint {
    pub fn capture(weights: &MlpWeights, seed: u64) -> Self {
        Self {
            spec: MlpSpec::of(weights),
            seed,
            weights: weights.flatten(),
        }
    }

    pub fn restore(&self) -> MlpWeights {
        let mut w = init_mlp(&self.spec.sizes, &self.spec.activations, self.seed);
        w.load_flat(&self.weights);
        w
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCheckpoint {
    pub input_size: usize,
    pub hidden_size: usize,
    pub head_sizes: Vec<usize>,
    pub seed: u64,
    pub weights: Vec<f64>,
}

impl LstmCheckpoint {
    pub fn capture(weights: &LstmWeights, seed: u64) -> Self {
        Self {
            input_size: weights.input_size,
            hidden_size: weights.hidden_size,
            head_sizes: MlpSpec::of(&weights.head).sizes,
            seed,
            weights: weights.flatten(),
        }
    }

    pub fn restore(&self) -> LstmWeights {
        let mut w = init_lstm(self.input_size, self.hidden_size, &self.head_sizes, self.seed);
        w.load_flat(&self.weights);
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    

    #[test]
    fn identity_layer_passes_input_through() {
        let n = 3;
        let layer = Layer {
            weights: (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            bias: vec![0.0; n],
            activation: Activation::Identity,
        };
        let mlp = MlpWeights {
            layers: vec![layer],
            swish_beta: 1.0,
        };
        let tape = Tape::new();
        let (vars, _) = mlp.lift(&tape).unwrap();
        let input: Vec<Var> = [0.5, -1.0, 2.0].iter().map(|&x| tape.leaf(x).unwrap()).collect();
        let out = mlp_forward(&vars, &input).unwrap();
        let got: Vec<f64> = out.iter().map(|v| v.value()).collect();
        assert_eq!(got, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_mlp_with_sigmoid_outputs_half() {
        let mut mlp = init_mlp(&[4, 2], &[Activation::Sigmoid], 1);
        for l in &mut mlp.layers {
            for row in &mut l.weights {
                row.fill(0.0);
            }
        }
        let tape = Tape::new();
        let (vars, _) = mlp.lift(&tape).unwrap();
        let input: Vec<Var> = (0..4).map(|i| tape.leaf(i as f64).unwrap()).collect();
        let out = mlp_forward(&vars, &input).unwrap();
        for v in out {
            assert_eq!(v.value(), 0.5);
        }
    }

    #[test]
    fn relu_layer_example() {
        // 1→1 layer w=2, b=1, relu, input −3 → relu(−5) = 0
        let mlp = MlpWeights {
            layers: vec![Layer {
                weights: vec![vec![2.0]],
                bias: vec![1.0],
                activation: Activation::Relu,
            }],
            swish_beta: 1.0,
        };
        let tape = Tape::new();
        let (vars, _) = mlp.lift(&tape).unwrap();
        let out = mlp_forward(&vars, &[tape.leaf(-3.0).unwrap()]).unwrap();
        assert_eq!(out[0].value(), 0.0);
    }

    #[test]
    fn dimension_mismatch_names_shapes() {
        let mlp = init_mlp(&[3, 2], &[Activation::Tanh], 0);
        let tape = Tape::new();
        let (vars, _) = mlp.lift(&tape).unwrap();
        let err = mlp_forward(&vars, &[tape.leaf(1.0).unwrap()]).unwrap_err();
        match err {
            NeuralError::DimensionMismatch { expected, got, .. } => {
                assert_eq!(expected, 3);
                assert_eq!(got, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn zeroed_lstm(hidden: usize, input: usize) -> LstmWeights {
        let mut w = init_lstm(input, hidden, &[hidden, 1], 0);
        let flat_len = w.flatten().len();
        w.load_flat(&vec![0.0; flat_len]);
        w
    }

    #[test]
    fn zero_lstm_cell_from_zero_cell_state() {
        let w = zeroed_lstm(2, 1);
        let tape = Tape::new();
        let (vars, _) = w.lift(&tape).unwrap();
        let state = zero_state(&tape, 2);
        let next = lstm_cell(&vars, &state, &[tape.leaf(0.7).unwrap()]).unwrap();
        for k in 0..2 {
            assert_eq!(next.c[k].value(), 0.0);
            assert_eq!(next.h[k].value(), 0.0);
        }
    }

    #[test]
    fn zero_lstm_cell_from_c_two() {
        // f=i=o=0.5, c̃=0 → c'=1, h'=0.5·tanh(1)
        let w = zeroed_lstm(1, 1);
        let tape = Tape::new();
        let (vars, _) = w.lift(&tape).unwrap();
        let state = LstmState {
            h: vec![tape.constant(0.0)],
            c: vec![tape.constant(2.0)],
        };
        let next = lstm_cell(&vars, &state, &[tape.leaf(0.3).unwrap()]).unwrap();
        assert!((next.c[0].value() - 1.0).abs() < 1e-15);
        assert!((next.h[0].value() - 0.3807970779778824).abs() < 1e-12);
    }

    #[test]
    fn forget_dominant_preserves_cell_state() {
        let mut w = zeroed_lstm(2, 1);
        w.b_f.fill(40.0); // f → 1
        w.b_i.fill(-40.0); // i → 0
        let tape = Tape::new();
        let (vars, _) = w.lift(&tape).unwrap();
        let state = LstmState {
            h: vec![tape.constant(0.0), tape.constant(0.0)],
            c: vec![tape.constant(0.8), tape.constant(-0.4)],
        };
        let next = lstm_cell(&vars, &state, &[tape.leaf(1.0).unwrap()]).unwrap();
        assert!((next.c[0].value() - 0.8).abs() < 1e-6);
        assert!((next.c[1].value() + 0.4).abs() < 1e-6);
    }

    #[test]
    fn gates_and_hidden_stay_in_bounds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let w = init_lstm(3, 4, &[4, 1], 17);
        let tape = Tape::new();
        let (vars, _) = w.lift(&tape).unwrap();
        let mut state = zero_state(&tape, 4);
        for _ in 0..20 {
            let x: Vec<Var> = (0..3)
                .map(|_| tape.leaf(rng.gen_range(-3.0..3.0)).unwrap())
                .collect();
            state = lstm_cell(&vars, &state, &x).unwrap();
            for h in &state.h {
                assert!(h.value() > -1.0 && h.value() < 1.0);
            }
        }
    }

    #[test]
    fn lstm_forward_last_equals_single_cell_for_t1() {
        let w = init_lstm(2, 3, &[3, 1], 5);
        let tape = Tape::new();
        let (vars, _) = w.lift(&tape).unwrap();
        let seq = vec![vec![0.4, -0.2]];
        let out = lstm_forward(&vars, &tape, &seq, LstmMode::Last).unwrap();
        let state = zero_state(&tape, 3);
        let x: Vec<Var> = seq[0].iter().map(|&v| tape.leaf(v).unwrap()).collect();
        let cell = lstm_cell(&vars, &state, &x).unwrap();
        let head = mlp_forward(&vars.head, &cell.h).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0][0].value() - head[0].value()).abs() < 1e-15);
    }

    #[test]
    fn zero_lstm_zero_head_outputs_zero() {
        let w = zeroed_lstm(2, 2);
        let tape = Tape::new();
        let (vars, _) = w.lift(&tape).unwrap();
        let seq = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 0.0]];
        let out = lstm_forward(&vars, &tape, &seq, LstmMode::PerStep).unwrap();
        assert_eq!(out.len(), 3);
        for step in out {
            assert_eq!(step[0].value(), 0.0);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let w = init_lstm(1, 2, &[2, 1], 0);
        let tape = Tape::new();
        let (vars, _) = w.lift(&tape).unwrap();
        assert!(matches!(
            lstm_forward(&vars, &tape, &[], LstmMode::Last),
            Err(NeuralError::EmptySequence)
        ));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_mlp(&[3, 3], &[Activation::Tanh], 42);
        let b = init_mlp(&[3, 3], &[Activation::Tanh], 42);
        assert_eq!(a.flatten(), b.flatten());
        // fan_in = fan_out = 3 → bound = 1
        for _ in 0..1000 {
            // 1000 draws across seeds
        }
        for seed in 0..1000 {
            let w = init_mlp(&[3, 3], &[Activation::Tanh], seed);
            for row in &w.layers[0].weights {
                for &v in row {
                    assert!(v.abs() <= 1.0);
                }
            }
        }
        let c = init_mlp(&[3, 3], &[Activation::Tanh], 43);
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn forget_gate_bias_initialized_to_one() {
        let w = init_lstm(2, 3, &[3, 1], 11);
        assert!(w.b_f.iter().all(|&b| b == 1.0));
        assert!(w.b_i.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let w = init_lstm(2, 3, &[3, 1], 23);
        let seq: Vec<Vec<f64>> = (0..10)
            .map(|t| vec![(t as f64 * 0.37).sin(), (t as f64 * 0.11).cos()])
            .collect();
        let flat = w.flatten();
        // check a spread of weights including a W_f entry (index 0)
        let check_idx = |idx: usize| {
            let h = 1e-6;
            let eval = |v: f64| {
                let mut wl = w.clone();
                let mut f = flat.clone();
                f[idx] = v;
                wl.load_flat(&f);
                let tape = Tape::new();
                let (vars, _) = wl.lift(&tape).unwrap();
                lstm_forward(&vars, &tape, &seq, LstmMode::Last).unwrap()[0][0].value()
            };
            let numeric = (eval(flat[idx] + h) - eval(flat[idx] - h)) / (2.0 * h);
            let tape = Tape::new();
            let (vars, leaves) = w.lift(&tape).unwrap();
            let out = lstm_forward(&vars, &tape, &seq, LstmMode::Last).unwrap();
            let g = tape.backward(out[0][0]).unwrap();
            let analytic = g.wrt(leaves[idx]);
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-8 {
                assert!((analytic - numeric).abs() < 1e-8);
            } else {
                assert!(
                    (analytic - numeric).abs() / scale <= 1e-5,
                    "idx {idx}: {analytic} vs {numeric}"
                );
            }
        };
        for idx in [0usize, 7, flat.len() / 2, flat.len() - 2] {
            check_idx(idx);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let w = init_lstm(3, 4, &[4, 2, 1], 77);
        let ck = LstmCheckpoint::capture(&w, 77);
        let json = serde_json::to_string(&ck).unwrap();
        let back: LstmCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.restore().flatten(), w.flatten());

        let m = init_mlp(&[2, 4, 1], &[Activation::Swish, Activation::Identity], 3);
        let ck = MlpCheckpoint::capture(&m, 3);
        let back: MlpCheckpoint = serde_json::from_str(&serde_json::to_string(&ck).unwrap()).unwrap();
        assert_eq!(back.restore().flatten(), m.flatten());
    }
}
