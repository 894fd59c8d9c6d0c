//! Adam training with gradient clipping, mini-batches, and early stopping.
//!
//! Trees rule out cross-sample tensor batching, so a batch is gradient
//! accumulation over independent per-sample tapes, averaged, clipped to a
//! global norm, and applied with Adam. Validation accuracy gates early
//! stopping; the best-validation parameters are returned.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use crate::data::PreparedSample;
use crate::model::{ModelError, ModelParams};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};

/// Gradient buffers keyed by parameter name, the merge target for a batch.
pub type GradStore = BTreeMap<String, Vec<f64>>;

#[derive(Debug)]
pub enum TrainError {
    /// A gradient came back NaN or infinite; training aborts.
    NonFiniteGradient { name: String },
    EmptyDataset(&'static str),
    AnswerIndexOutOfRange { id: String, index: usize, k: usize },
    Model(ModelError),
    Io(std::io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NonFiniteGradient { name } => {
                write!(f, "non-finite gradient in parameter {name}")
            }
            TrainError::EmptyDataset(which) => write!(f, "{which} dataset is empty"),
            TrainError::AnswerIndexOutOfRange { id, index, k } => {
                write!(f, "sample {id}: answer index {index} >= K = {k}")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

/// Hyperparameters. Defaults are the reference training regimen: batch 64,
/// learning rate 1e-4, clip norm 10, patience 10.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Worker threads for within-batch parallelism; 1 is the reproducible
    /// default (results are identical for any value, merge order is fixed).
    pub threads: usize,
    /// Stop as soon as validation accuracy reaches this value.
    pub stop_at_val_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
            patience: 10,
            max_epochs: 50,
            seed: 1,
            threads: 1,
            stop_at_val_accuracy: None,
        }
    }
}

/// Adam moment estimates per parameter, plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: usize,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> usize {
        self.t
    }
}

/// One Adam update over named tensors. Parameters without a gradient entry
/// are treated as having zero gradient (their moments still decay).
pub fn adam_step_named(
    params: Vec<(String, &mut Tensor)>,
    grads: &GradStore,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let zero: Vec<f64> = Vec::new();
    for (name, tensor) in params {
        let g = grads.get(&name).unwrap_or(&zero);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient { name });
        }
        let n = tensor.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name).or_insert_with(|| vec![0.0; n]);
        let data = tensor.data_mut();
        for i in 0..n {
            let gi = g.get(i).copied().unwrap_or(0.0);
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Adam update for a whole model.
pub fn adam_step(
    model: &mut ModelParams,
    grads: &GradStore,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    adam_step_named(model.visit_mut(), grads, state, config)
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut GradStore, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub struct TrainResult {
    /// Parameters from the best-validation epoch.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Writes the history CSV: `epoch,train_loss,val_accuracy`.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    let mut out = String::from("epoch,train_loss,val_accuracy\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.6},{:.6}\n",
            r.epoch, r.train_loss, r.val_accuracy
        ));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())
}

/// Per-sample loss and gradients, computed on a private tape.
fn sample_pass(
    model: &ModelParams,
    sample: &PreparedSample,
) -> Result<(f64, Vec<(String, Vec<f64>)>), TrainError> {
    let mut tape = Tape::new();
    let fwd = model.forward_traced(&mut tape, &sample.input())?;
    let loss = tape
        .cross_entropy_logits(fwd.logits, sample.answer_index)
        .map_err(ModelError::from)?;
    tape.backward(loss).map_err(ModelError::from)?;
    let loss_val = tape.value(loss)[0];
    let grads = fwd
        .params
        .iter()
        .map(|(name, handle)| (name.clone(), tape.grad(*handle).to_vec()))
        .collect();
    Ok((loss_val, grads))
}

/// Accumulates per-sample gradients (already ordered by sample position)
/// into the batch store with a `1/batch_len` factor: the batch mean.
fn merge_grads(
    into: &mut GradStore,
    per_sample: Vec<Vec<(String, Vec<f64>)>>,
    batch_len: usize,
) {
    let inv = 1.0 / batch_len as f64;
    for grads in per_sample {
        for (name, g) in grads {
            let acc = into.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, x) in acc.iter_mut().zip(&g) {
                *a += inv * x;
            }
        }
    }
}

/// Forward/backward over a batch, optionally across threads. Results merge
/// in sample order, so the outcome is identical for any thread count.
fn batch_pass(
    model: &ModelParams,
    samples: &[&PreparedSample],
    threads: usize,
) -> Result<(f64, GradStore), TrainError> {
    let mut per_sample: Vec<Option<(f64, Vec<(String, Vec<f64>)>)>> = Vec::new();
    per_sample.resize_with(samples.len(), || None);

    if threads <= 1 || samples.len() <= 1 {
        for (slot, sample) in per_sample.iter_mut().zip(samples) {
            *slot = Some(sample_pass(model, sample)?);
        }
    } else {
        let chunk = samples.len().div_ceil(threads);
        let results: Vec<Result<Vec<(usize, (f64, Vec<(String, Vec<f64>)>))>, TrainError>> =
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for (ci, chunk_samples) in samples.chunks(chunk).enumerate() {
                    let base = ci * chunk;
                    handles.push(scope.spawn(move || {
                        let mut out = Vec::with_capacity(chunk_samples.len());
                        for (off, sample) in chunk_samples.iter().enumerate() {
                            out.push((base + off, sample_pass(model, sample)?));
                        }
                        Ok(out)
                    }));
                }
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect()
            });
        for r in results {
            for (pos, val) in r? {
                per_sample[pos] = Some(val);
            }
        }
    }

    let mut loss_sum = 0.0;
    let mut ordered = Vec::with_capacity(samples.len());
    for slot in per_sample {
        let (loss, grads) = slot.expect("every sample computed");
        loss_sum += loss;
        ordered.push(grads);
    }
    let mut store = GradStore::new();
    merge_grads(&mut store, ordered, samples.len());
    Ok((loss_sum / samples.len() as f64, store))
}

/// Validation accuracy by argmax; parallel-safe because the reduction is a
/// count.
fn validation_accuracy(
    model: &ModelParams,
    samples: &[PreparedSample],
    threads: usize,
) -> Result<f64, TrainError> {
    let predict = |s: &PreparedSample| -> Result<bool, TrainError> {
        let dist = model.forward(&s.input())?;
        Ok(dist.argmax() == s.answer_index)
    };
    let correct: usize = if threads <= 1 || samples.len() <= 1 {
        let mut c = 0;
        for s in samples {
            if predict(s)? {
                c += 1;
            }
        }
        c
    } else {
        let chunk = samples.len().div_ceil(threads);
        let counts: Vec<Result<usize, TrainError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        let mut c = 0;
                        for s in part {
                            if predict(s)? {
                                c += 1;
                            }
                        }
                        Ok(c)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        let mut c = 0;
        for r in counts {
            c += r?;
        }
        c
    };
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains until early stopping or `max_epochs`, returning the checkpoint of
/// the best-validation epoch and the per-epoch history.
pub fn train(
    mut model: ModelParams,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    config: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let k = model.dims.num_answers;
    for s in train_set.iter().chain(val_set) {
        if s.answer_index >= k {
            return Err(TrainError::AnswerIndexOutOfRange {
                id: s.video_id.clone(),
                index: s.answer_index,
                k,
            });
        }
    }

    let mut shuffle_rng = substream(config.seed, "shuffle");
    let mut adam = AdamState::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut epochs_since_improvement = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch_idx in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&PreparedSample> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_pass(&model, &batch, config.threads)?;
            clip_gradients(&mut grads, config.clip_norm);
            adam_step(&mut model, &grads, &mut adam, config)?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;

        let val_accuracy = validation_accuracy(&model, val_set, config.threads)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });

        // improvement means strictly greater than the best seen
        let improved = best.as_ref().map(|(b, _, _)| val_accuracy > *b).unwrap_or(true);
        if improved {
            best = Some((val_accuracy, epoch, model.clone()));
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
        }

        if let Some(target) = config.stop_at_val_accuracy {
            if val_accuracy >= target {
                break;
            }
        }
        if epochs_since_improvement >= config.patience {
            break;
        }
    }

    let (best_val_accuracy, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainResult {
        best,
        best_epoch,
        best_val_accuracy,
        history,
    })
}
