//! Central finite-difference verification of model gradients.
//!
//! The checker perturbs each parameter scalar by a small step, reruns the
//! forward pass, and compares the numeric derivative against the tape's
//! analytic gradient. It never touches the backward machinery it audits:
//! only forward evaluations enter the numeric side.

use crate::model::{ModelError, ModelParams, SampleInput};
use crate::tensor::Tape;

/// Outcome of one model-wide check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Scalars compared.
    pub checked: usize,
    pub worst_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Relative error with an absolute floor. Central differences at step 1e-6
/// resolve a derivative of an O(1) loss to roughly 1e-9 absolute, so for
/// gradients below the floor the comparison is effectively absolute:
/// |a - n| < 1e-4 * 1e-5.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-5);
    (analytic - numeric).abs() / denom
}

fn loss_of(model: &ModelParams, input: &SampleInput, answer: usize) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let fwd = model.forward_traced(&mut tape, input)?;
    let loss = tape.cross_entropy_logits(fwd.logits, answer)?;
    Ok(tape.value(loss)[0])
}

/// Checks every registered parameter of a single forward pass (with
/// cross-entropy loss at `answer`) against central finite differences of
/// the given step. Returns the worst relative error over all scalars.
pub fn check_model_gradients(
    model: &ModelParams,
    input: &SampleInput,
    answer: usize,
    step: f64,
) -> Result<GradCheckReport, ModelError> {
    let mut tape = Tape::new();
    let fwd = model.forward_traced(&mut tape, input)?;
    let loss = tape.cross_entropy_logits(fwd.logits, answer)?;
    tape.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = fwd
        .params
        .iter()
        .map(|(name, handle)| (name.clone(), tape.grad(*handle).to_vec()))
        .collect();
    drop(tape);

    let mut work = model.clone();
    let mut report = GradCheckReport {
        checked: 0,
        worst_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };

    for (name, grads) in &analytic {
        for (i, &a) in grads.iter().enumerate() {
            nudge(&mut work, name, i, step);
            let f_plus = loss_of(&work, input, answer)?;
            nudge(&mut work, name, i, -2.0 * step);
            let f_minus = loss_of(&work, input, answer)?;
            nudge(&mut work, name, i, step);

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.worst_rel_error {
                report.worst_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn nudge(model: &mut ModelParams, name: &str, index: usize, delta: f64) {
    for (n, t) in model.visit_mut() {
        if n == name {
            t.data_mut()[index] += delta;
            return;
        }
    }
    panic!("parameter {name} not found");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, Variant};
    use crate::rng::substream;
    use crate::tensor::Tensor;
    use crate::tree::{label_tree, parse_bracketed, ConcretenessLexicon};
    use rand::Rng;

    #[test]
    fn small_treemn_passes_the_check() {
        let mut rng = substream(81, "gradcheck");
        let dims = ModelDims {
            hidden: 4,
            video_dim: 3,
            embed_dim: 2,
            num_answers: 3,
        };
        let vocab = vec!["a".into(), "b".into(), "c".into()];
        let model = ModelParams::new(Variant::TreeMn, dims, vocab, &mut rng).unwrap();

        let mut tree = parse_bracketed("(ROOT (NP (DT the) (NN dog)))").unwrap();
        let mut ratings = std::collections::HashMap::new();
        ratings.insert("dog".to_string(), 0.9);
        let lex = ConcretenessLexicon::with_builtin_function_words(ratings);
        label_tree(&mut tree, &lex).unwrap();
        let words = vec!["the".to_string(), "dog".to_string()];
        let vecs: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let video = Tensor::matrix(
            2,
            3,
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let input = SampleInput {
            tree: Some(&tree),
            token_words: &words,
            token_vecs: &vecs,
            video: &video,
        };
        let report = check_model_gradients(&model, &input, 1, 1e-6).unwrap();
        assert!(report.checked > 100);
        assert!(
            report.worst_rel_error < 1e-4,
            "worst {} at {}[{}]",
            report.worst_rel_error,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn a_corrupted_gradient_would_be_caught() {
        // sanity check on the checker itself: numeric vs analytic disagree
        // when the compared gradient is wrong
        assert!(relative_error(1.0, 1.2) > 1e-4);
        assert!(relative_error(0.0, 0.0) == 0.0);
        assert!(relative_error(1e-9, -1e-9) < 1e-2);
    }
}
