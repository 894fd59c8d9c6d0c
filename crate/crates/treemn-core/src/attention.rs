//! Temporal soft attention over encoded video frames.
//!
//! One scoring head serves every attention site in a model: frame j gets
//! `a_j = tanh(W_Q h + W_V v_j + b_V)`, a scalar score `w_P . a_j`, and the
//! softmax-normalized scores mix the frame features into the attended
//! vector. Scoring by a shared vector keeps the module independent of the
//! frame count, so videos of any length work with one parameter set.

use rand::rngs::StdRng;

use crate::rng::uniform_init;
use crate::tensor::{Tape, Tensor, TensorError, Value};
use crate::video::INIT_RANGE;

/// At-rest attention parameters. `n` is the query/state width, `m` the
/// encoded frame width (equal in practice: both are the hidden size).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[n x n]` transform of the query state.
    pub w_q: Tensor,
    /// `[n x m]` transform of each frame.
    pub w_v: Tensor,
    /// `[n]` bias inside the tanh.
    pub b_v: Tensor,
    /// `[n]` scoring vector.
    pub w_p: Tensor,
}

impl AttentionParams {
    pub fn init(n: usize, m: usize, rng: &mut StdRng) -> Self {
        let rand_t = |shape: &[usize], rng: &mut StdRng| {
            let count: usize = shape.iter().product();
            Tensor::from_vec(
                shape,
                (0..count).map(|_| uniform_init(rng, INIT_RANGE)).collect(),
            )
            .expect("init shape")
        };
        AttentionParams {
            w_q: rand_t(&[n, n], rng),
            w_v: rand_t(&[n, m], rng),
            b_v: rand_t(&[n], rng),
            w_p: rand_t(&[n], rng),
        }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        AttentionParams {
            w_q: Tensor::zeros(&[n, n]),
            w_v: Tensor::zeros(&[n, m]),
            b_v: Tensor::zeros(&[n]),
            w_p: Tensor::zeros(&[n]),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> AttentionHandles {
        AttentionHandles {
            w_q: tape.param(&self.w_q),
            w_v: tape.param(&self.w_v),
            b_v: tape.param(&self.b_v),
            w_p: tape.param(&self.w_p),
        }
    }

    pub fn entries(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_q", &self.w_q),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_p", &self.w_p),
        ]
    }

    pub fn entries_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w_q", &mut self.w_q),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_p", &mut self.w_p),
        ]
    }
}

/// Tape handles for one traced pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionHandles {
    pub w_q: Value,
    pub w_v: Value,
    pub b_v: Value,
    pub w_p: Value,
}

/// Result of one attention call: the attended feature vector and the
/// per-frame weight distribution (kept for attention inspection dumps).
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub att: Value,
    pub weights: Value,
}

/// Attends over frame matrix `v [T x m]` guided by state `h [n]`.
pub fn attend(
    tape: &mut Tape,
    params: &AttentionHandles,
    h: Value,
    v: Value,
) -> Result<Attended, TensorError> {
    if tape.shape(v).first() == Some(&0) {
        return Err(TensorError::Empty { op: "attend" });
    }
    let qh = tape.matvec(params.w_q, h)?;
    let qb = tape.add(qh, params.b_v)?;
    let vr = tape.matvec_rows(params.w_v, v)?;
    let pre = tape.add_rows(vr, qb)?;
    let a = tape.tanh(pre);
    let scores = tape.matvec(a, params.w_p)?;
    let weights = tape.softmax(scores)?;
    let att = tape.weighted_row_sum(weights, v)?;
    Ok(Attended { att, weights })
}
