//! Bidirectional LSTM encoder over precomputed frame features.
//!
//! Raw per-frame vectors (4096-d VGG features at full scale, anything for
//! synthetic data) are run through a forward and a backward LSTM; the
//! per-frame outputs are concatenated into the attention-ready feature
//! matrix. Standard cell, no peepholes: sigmoid input/forget/output gates,
//! tanh candidate, zero initial states.

use rand::rngs::StdRng;

use crate::rng::uniform_init;
use crate::tensor::{Tape, Tensor, TensorError, Value};

/// Init range for all weights; forget biases start at 1.0 instead so early
/// training keeps memory open.
pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS_INIT: f64 = 1.0;

/// At-rest gate tensors for one LSTM direction. Each weight is
/// `[hidden x (input + hidden)]` and is applied to `concat(x, h_prev)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDir {
    pub w_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub w_g: Tensor,
    pub b_g: Tensor,
}

impl LstmDir {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut StdRng) -> Self {
        let cols = input_dim + hidden;
        let mut mat = || {
            let data = (0..hidden * cols)
                .map(|_| uniform_init(rng, INIT_RANGE))
                .collect();
            Tensor::matrix(hidden, cols, data).expect("init shape")
        };
        let w_i = mat();
        let w_f = mat();
        let w_o = mat();
        let w_g = mat();
        let mut vec_ = || Tensor::vector((0..hidden).map(|_| uniform_init(rng, INIT_RANGE)).collect());
        let b_i = vec_();
        let mut b_f = vec_();
        b_f.data_mut().iter_mut().for_each(|x| *x = FORGET_BIAS_INIT);
        let b_o = vec_();
        let b_g = vec_();
        LstmDir {
            w_i,
            b_i,
            w_f,
            b_f,
            w_o,
            b_o,
            w_g,
            b_g,
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let cols = input_dim + hidden;
        LstmDir {
            w_i: Tensor::zeros(&[hidden, cols]),
            b_i: Tensor::zeros(&[hidden]),
            w_f: Tensor::zeros(&[hidden, cols]),
            b_f: Tensor::zeros(&[hidden]),
            w_o: Tensor::zeros(&[hidden, cols]),
            b_o: Tensor::zeros(&[hidden]),
            w_g: Tensor::zeros(&[hidden, cols]),
            b_g: Tensor::zeros(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_i.numel()
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.shape()[1] - self.hidden()
    }

    /// Registers all gates on a tape for one traced forward pass.
    pub fn register(&self, tape: &mut Tape) -> LstmGates {
        LstmGates {
            w_i: tape.param(&self.w_i),
            b_i: tape.param(&self.b_i),
            w_f: tape.param(&self.w_f),
            b_f: tape.param(&self.b_f),
            w_o: tape.param(&self.w_o),
            b_o: tape.param(&self.b_o),
            w_g: tape.param(&self.w_g),
            b_g: tape.param(&self.b_g),
        }
    }

    /// Gate tensors in a stable order, for optimizers and checkpoints.
    pub fn entries(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("w_i", &self.w_i),
            ("b_i", &self.b_i),
            ("w_f", &self.w_f),
            ("b_f", &self.b_f),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("w_g", &self.w_g),
            ("b_g", &self.b_g),
        ]
    }

    pub fn entries_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("w_i", &mut self.w_i),
            ("b_i", &mut self.b_i),
            ("w_f", &mut self.w_f),
            ("b_f", &mut self.b_f),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("w_g", &mut self.w_g),
            ("b_g", &mut self.b_g),
        ]
    }
}

/// Bidirectional encoder parameters; output dimensionality is
/// `2 * hidden_per_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub fwd: LstmDir,
    pub bwd: LstmDir,
}

impl LstmParams {
    pub fn init(input_dim: usize, hidden_per_dir: usize, rng: &mut StdRng) -> Self {
        LstmParams {
            fwd: LstmDir::init(input_dim, hidden_per_dir, rng),
            bwd: LstmDir::init(input_dim, hidden_per_dir, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden()
    }
}

/// Tape handles for one direction's gates during a traced pass.
#[derive(Debug, Clone, Copy)]
pub struct LstmGates {
    pub w_i: Value,
    pub b_i: Value,
    pub w_f: Value,
    pub b_f: Value,
    pub w_o: Value,
    pub b_o: Value,
    pub w_g: Value,
    pub b_g: Value,
}

/// One LSTM step: gates over `concat(x, h_prev)`, then
/// `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn lstm_cell(
    tape: &mut Tape,
    x: Value,
    h_prev: Value,
    c_prev: Value,
    gates: &LstmGates,
) -> Result<(Value, Value), TensorError> {
    let z = tape.concat(x, h_prev)?;
    let gate = |tape: &mut Tape, w: Value, b: Value| -> Result<Value, TensorError> {
        let a = tape.matvec(w, z)?;
        tape.add(a, b)
    };
    let i_pre = gate(tape, gates.w_i, gates.b_i)?;
    let f_pre = gate(tape, gates.w_f, gates.b_f)?;
    let o_pre = gate(tape, gates.w_o, gates.b_o)?;
    let g_pre = gate(tape, gates.w_g, gates.b_g)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let o = tape.sigmoid(o_pre);
    let g = tape.tanh(g_pre);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs a unidirectional LSTM over a token/frame sequence from zero states,
/// returning the hidden state after each step.
pub fn run_lstm(
    tape: &mut Tape,
    inputs: &[Value],
    gates: &LstmGates,
    hidden: usize,
) -> Result<Vec<Value>, TensorError> {
    let mut h = tape.vector_input(&vec![0.0; hidden]);
    let mut c = tape.vector_input(&vec![0.0; hidden]);
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let (nh, nc) = lstm_cell(tape, x, h, c, gates)?;
        h = nh;
        c = nc;
        states.push(h);
    }
    Ok(states)
}

/// Encodes `raw [T x D]` frames into `[T x 2H]`: row t is the forward
/// hidden state at t concatenated with the backward hidden state at t.
pub fn encode_video(
    tape: &mut Tape,
    raw: &Tensor,
    params_fwd: &LstmGates,
    params_bwd: &LstmGates,
    hidden_per_dir: usize,
) -> Result<Value, TensorError> {
    let (t_frames, d) = match raw.shape() {
        &[t, d] => (t, d),
        other => {
            return Err(TensorError::ShapeMismatch {
                op: "encode_video",
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            });
        }
    };
    if t_frames == 0 {
        return Err(TensorError::Empty { op: "encode_video" });
    }
    let rows: Vec<Value> = (0..t_frames)
        .map(|t| tape.vector_input(&raw.data()[t * d..(t + 1) * d]))
        .collect();

    let fwd_states = run_lstm(tape, &rows, params_fwd, hidden_per_dir)?;
    let rev_rows: Vec<Value> = rows.iter().rev().copied().collect();
    let bwd_states_rev = run_lstm(tape, &rev_rows, params_bwd, hidden_per_dir)?;

    let mut out_rows = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let b = bwd_states_rev[t_frames - 1 - t];
        out_rows.push(tape.concat(fwd_states[t], b)?);
    }
    tape.stack_rows(&out_rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut StdRng, scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| uniform_init(rng, scale)).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_states() {
        let dir = LstmDir::zeros(3, 2);
        let mut tape = Tape::new();
        let gates = dir.register(&mut tape);
        let x = tape.vector_input(&[1.0, -2.0, 0.5]);
        let h0 = tape.vector_input(&[0.0, 0.0]);
        let c0 = tape.vector_input(&[0.0, 0.0]);
        let (h, c) = lstm_cell(&mut tape, x, h0, c0, &gates).unwrap();
        assert_eq!(tape.value(h), &[0.0, 0.0]);
        assert_eq!(tape.value(c), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_gates_pass_memory_through() {
        // forget bias very positive, input bias very negative: c stays c_prev
        let mut dir = LstmDir::zeros(2, 2);
        dir.b_f.data_mut().iter_mut().for_each(|x| *x = 30.0);
        dir.b_i.data_mut().iter_mut().for_each(|x| *x = -30.0);
        let mut tape = Tape::new();
        let gates = dir.register(&mut tape);
        let x = tape.vector_input(&[5.0, -3.0]);
        let h0 = tape.vector_input(&[0.0, 0.0]);
        let c0 = tape.vector_input(&[0.7, -0.4]);
        let (_, c) = lstm_cell(&mut tape, x, h0, c0, &gates).unwrap();
        for (got, want) in tape.value(c).iter().zip(&[0.7, -0.4]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    // Plain-vector evaluation of the gate formulas, independent of the tape.
    fn naive_cell(
        dir: &LstmDir,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hidden = dir.hidden();
        let z: Vec<f64> = x.iter().chain(h_prev.iter()).copied().collect();
        let affine = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            let cols = z.len();
            (0..hidden)
                .map(|r| {
                    b.data()[r]
                        + w.data()[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(&z)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect()
        };
        let sig = |v: Vec<f64>| -> Vec<f64> { v.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect() };
        let i = sig(affine(&dir.w_i, &dir.b_i));
        let f = sig(affine(&dir.w_f, &dir.b_f));
        let o = sig(affine(&dir.w_o, &dir.b_o));
        let g: Vec<f64> = affine(&dir.w_g, &dir.b_g).iter().map(|x| x.tanh()).collect();
        let c: Vec<f64> = (0..hidden)
            .map(|k| f[k] * c_prev[k] + i[k] * g[k])
            .collect();
        let h: Vec<f64> = (0..hidden).map(|k| o[k] * c[k].tanh()).collect();
        (h, c)
    }

    #[test]
    fn cell_matches_gate_formula_oracle() {
        let mut rng = substream(21, "lstm-oracle");
        for _ in 0..10 {
            let dir = LstmDir::init(3, 2, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hp: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cp: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut tape = Tape::new();
            let gates = dir.register(&mut tape);
            let xv = tape.vector_input(&x);
            let hv = tape.vector_input(&hp);
            let cv = tape.vector_input(&cp);
            let (h, c) = lstm_cell(&mut tape, xv, hv, cv, &gates).unwrap();

            let (he, ce) = naive_cell(&dir, &x, &hp, &cp);
            for (a, b) in tape.value(h).iter().zip(&he) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in tape.value(c).iter().zip(&ce) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn encode(raw: &Tensor, params: &LstmParams) -> Vec<f64> {
        let mut tape = Tape::new();
        let f = params.fwd.register(&mut tape);
        let b = params.bwd.register(&mut tape);
        let v = encode_video(&mut tape, raw, &f, &b, params.fwd.hidden()).unwrap();
        tape.value(v).to_vec()
    }

    #[test]
    fn single_frame_and_zero_params() {
        let mut rng = substream(22, "lstm-t1");
        let params = LstmParams::init(3, 2, &mut rng);
        let raw = rand_tensor(&[1, 3], &mut rng, 1.0);
        let out = encode(&raw, &params);
        assert_eq!(out.len(), 4);

        let zeros = LstmParams {
            fwd: LstmDir::zeros(3, 2),
            bwd: LstmDir::zeros(3, 2),
        };
        let raw = rand_tensor(&[4, 3], &mut rng, 1.0);
        assert!(encode(&raw, &zeros).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_shape_is_t_by_2h() {
        let mut rng = substream(23, "lstm-shapes");
        let params = LstmParams::init(5, 3, &mut rng);
        for t in [1usize, 2, 7] {
            let raw = rand_tensor(&[t, 5], &mut rng, 1.0);
            let mut tape = Tape::new();
            let f = params.fwd.register(&mut tape);
            let b = params.bwd.register(&mut tape);
            let v = encode_video(&mut tape, &raw, &f, &b, 3).unwrap();
            assert_eq!(tape.shape(v), &[t, 6]);
        }
    }

    #[test]
    fn reversing_frames_swaps_direction_roles() {
        // encode(reverse(raw), swap_dirs(params)) == reverse(swap_halves(encode(raw, params))),
        // and with tied directions the parameter swap is a no-op, so
        // encode(reverse(raw)) == reverse(swap_halves(encode(raw))) directly.
        let mut rng = substream(24, "lstm-reverse");
        for (tied, &t) in [false, true, false, true, false, true]
            .iter()
            .zip(&[2usize, 2, 5, 5, 8, 8])
        {
            let params = {
                let p = LstmParams::init(4, 3, &mut rng);
                if *tied {
                    LstmParams {
                        fwd: p.fwd.clone(),
                        bwd: p.fwd,
                    }
                } else {
                    p
                }
            };
            let swapped_params = LstmParams {
                fwd: params.bwd.clone(),
                bwd: params.fwd.clone(),
            };
            let raw = rand_tensor(&[t, 4], &mut rng, 1.0);
            let rev_data: Vec<f64> = (0..t)
                .rev()
                .flat_map(|i| raw.data()[i * 4..(i + 1) * 4].to_vec())
                .collect();
            let rev = Tensor::matrix(t, 4, rev_data).unwrap();

            let a = encode(&rev, &swapped_params);
            let base = encode(&raw, &params);
            let h2 = 6;
            for ti in 0..t {
                let src = &base[(t - 1 - ti) * h2..(t - ti) * h2];
                let swapped: Vec<f64> = src[3..6].iter().chain(&src[0..3]).copied().collect();
                for (x, y) in a[ti * h2..(ti + 1) * h2].iter().zip(&swapped) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_3_steps() {
        let mut rng = substream(25, "lstm-fd");
        let params = LstmParams::init(2, 2, &mut rng);
        let raw = rand_tensor(&[3, 2], &mut rng, 1.0);

        let eval = |p: &LstmParams| -> f64 {
            let mut tape = Tape::new();
            let f = p.fwd.register(&mut tape);
            let b = p.bwd.register(&mut tape);
            let v = encode_video(&mut tape, &raw, &f, &b, 2).unwrap();
            let s = tape.sum(v);
            tape.value(s)[0]
        };

        // analytic gradients
        let mut tape = Tape::new();
        let f = params.fwd.register(&mut tape);
        let b = params.bwd.register(&mut tape);
        let v = encode_video(&mut tape, &raw, &f, &b, 2).unwrap();
        let s = tape.sum(v);
        tape.backward(s).unwrap();

        let handles = [
            (f.w_i, "fwd.w_i"),
            (f.b_f, "fwd.b_f"),
            (f.w_g, "fwd.w_g"),
            (b.w_o, "bwd.w_o"),
            (b.b_g, "bwd.b_g"),
        ];
        fn target<'a>(p: &'a mut LstmParams, name: &str) -> &'a mut Tensor {
            match name {
                "fwd.w_i" => &mut p.fwd.w_i,
                "fwd.b_f" => &mut p.fwd.b_f,
                "fwd.w_g" => &mut p.fwd.w_g,
                "bwd.w_o" => &mut p.bwd.w_o,
                "bwd.b_g" => &mut p.bwd.b_g,
                _ => unreachable!(),
            }
        }
        let h = 1e-6;
        for (val, name) in handles {
            let analytic = tape.grad(val).to_vec();
            for idx in 0..analytic.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                target(&mut plus, name).data_mut()[idx] += h;
                target(&mut minus, name).data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = analytic[idx].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic[idx] - numeric).abs() / denom < 1e-4,
                    "{name}[{idx}]: analytic {} numeric {}",
                    analytic[idx],
                    numeric
                );
            }
        }
    }
}
