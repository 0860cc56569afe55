//! Adam, the mini-batch training loop and evaluation metrics.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Targets, Var};
use crate::data::{augment_with, make_input, AugmentConfig, Dataset, GestureSample, Split};
use crate::distill::soften;
use crate::exec::{map_range, Parallelism};
use crate::models::ModelParams;
use crate::nn::Mode;
use crate::{Error, Result, Tensor};

// ── Adam ────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: IndexMap<String, Tensor<f32>>,
    pub v: IndexMap<String, Tensor<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
/// Gradients are checked for NaN/Inf before anything is modified.
pub fn adam_step(
    params: &mut IndexMap<String, Tensor<f32>>,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(format!(
                "gradient of {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name} contains {bad}; step {} aborted",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
    let corr1 = (1.0 - c.beta1.powi(t)) as f32;
    let corr2 = (1.0 - c.beta2.powi(t)) as f32;
    let (lr, eps) = (c.lr as f32, c.epsilon as f32);
    for (name, p) in params.iter_mut() {
        let g = &grads[name.as_str()];
        let m = state.m.entry(name.clone()).or_insert_with(|| p.zeros_like());
        let v = state.v.entry(name.clone()).or_insert_with(|| p.zeros_like());
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Hard,
    Distill {
        temperature: f64,
        alpha: f64,
        /// Multiply the soft term by `T²`.
        t_squared: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossMode,
    pub shuffle: bool,
    pub augment: Option<AugmentConfig>,
    pub clip_norm: Option<f64>,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossMode::Hard,
            shuffle: true,
            augment: None,
            clip_norm: None,
            parallelism: Parallelism::Sequential,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate {} must be positive",
                self.adam.lr
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip norm must be positive"));
            }
        }
        if let LossMode::Distill { temperature, alpha, .. } = self.loss {
            crate::distill::check_hyper(temperature, alpha)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the best validation accuracy (later epochs win ties).
    pub model: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub optimizer: AdamState,
}

// ── Training loop ───────────────────────────────────────────────────────

/// Where soft targets come from during distillation.
pub(crate) enum Teacher<'a> {
    Live(&'a ModelParams),
    Cached(&'a HashMap<u32, Tensor<f32>>),
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SHUFFLE_STREAM: u64 = 1 << 62;
const AUGMENT_STREAM: u64 = 1 << 61;

/// Inputs of one batch, augmented deterministically per `(seed, epoch, id)`.
fn batch_samples(batch: &[&GestureSample], config: &TrainConfig, epoch: usize) -> Vec<GestureSample> {
    match &config.augment {
        None => batch.iter().map(|&s| s.clone()).collect(),
        Some(aug) => map_range(config.parallelism, batch.len(), |i| {
            let s = batch[i];
            let mut rng = rng_for(config.seed, AUGMENT_STREAM | ((epoch as u64) << 32) | s.id as u64);
            augment_with(s, aug, &mut rng)
        }),
    }
}

fn videos_for(model: &ModelParams, samples: &[GestureSample], par: Parallelism) -> Result<Vec<Tensor<f32>>> {
    map_range(par, samples.len(), |i| make_input(&samples[i], model.spec.input_mode))
        .into_iter()
        .collect()
}

fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let c = t.shape()[1];
    (0..t.shape()[0])
        .map(|r| Tensor::new(vec![c], t.row(r).to_vec()).expect("row").argmax())
        .collect()
}

pub(crate) fn fit(
    mut model: ModelParams,
    dataset: &Dataset,
    config: &TrainConfig,
    teacher: Option<Teacher<'_>>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    if model.spec.class_count < dataset.class_count() {
        return Err(Error::invalid(format!(
            "model has {} classes, dataset needs {}",
            model.spec.class_count,
            dataset.class_count()
        )));
    }
    let distill = match (config.loss, &teacher) {
        (LossMode::Hard, _) => None,
        (
            LossMode::Distill {
                temperature,
                alpha,
                t_squared,
            },
            Some(_),
        ) => Some((temperature, alpha, t_squared)),
        (LossMode::Distill { .. }, None) => {
            return Err(Error::invalid("distillation loss needs a teacher"));
        }
    };

    let mut optimizer = AdamState::new(config.adam);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let par = config.parallelism;

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.sort_unstable();
            order.shuffle(&mut rng_for(config.seed, SHUFFLE_STREAM | epoch as u64));
        }
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in order.chunks(config.batch_size) {
            let picked: Vec<&GestureSample> = idx.iter().map(|&i| &train[i]).collect();
            let samples = batch_samples(&picked, config, epoch);
            let labels: Vec<usize> = samples.iter().map(GestureSample::label).collect();
            let input = model.spec.prepare(&videos_for(&model, &samples, par)?)?;

            let mut tape = Tape::with_parallelism(par);
            let bound = model.bind(&mut tape, true)?;
            let out = model.forward(&mut tape, &bound, &input, Mode::Train)?;
            let hard_targets = Targets::Classes(labels.clone());

            let loss: Var = match distill {
                Some((temperature, alpha, t_squared)) if alpha > 0.0 => {
                    let teacher_logits = match teacher.as_ref().expect("checked") {
                        Teacher::Live(t) => t.logits(&videos_for(t, &samples, par)?)?,
                        Teacher::Cached(cache) => {
                            let rows: Vec<&Tensor<f32>> = samples
                                .iter()
                                .map(|s| {
                                    cache.get(&s.id).ok_or_else(|| {
                                        Error::invalid(format!("no cached teacher logits for sample {}", s.id))
                                    })
                                })
                                .collect::<Result<_>>()?;
                            let c = rows[0].len();
                            Tensor::new(
                                vec![rows.len(), c],
                                rows.iter().flat_map(|r| r.data()).copied().collect(),
                            )?
                        }
                    };
                    let c = teacher_logits.shape()[1];
                    let mut soft = Vec::with_capacity(teacher_logits.len());
                    for r in 0..samples.len() {
                        let z = Tensor::new(vec![c], teacher_logits.row(r).to_vec())?;
                        soft.extend_from_slice(soften(&z, temperature)?.probs().data());
                    }
                    let soft = Targets::Distribution(Tensor::new(vec![samples.len(), c], soft)?);
                    let l_soft = tape.cross_entropy(out.logits, &soft, temperature as f32)?;
                    let k = if t_squared {
                        alpha * temperature * temperature
                    } else {
                        alpha
                    };
                    if alpha < 1.0 {
                        let l_hard = tape.cross_entropy(out.logits, &hard_targets, 1.0)?;
                        tape.weighted_sum(&[(l_soft, k as f32), (l_hard, (1.0 - alpha) as f32)])?
                    } else if t_squared {
                        tape.weighted_sum(&[(l_soft, k as f32)])?
                    } else {
                        l_soft
                    }
                }
                _ => tape.cross_entropy(out.logits, &hard_targets, 1.0)?,
            };
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let predictions = argmax_rows(tape.value(out.logits));
            correct += predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
            loss_sum += loss_value as f64 * samples.len() as f64;

            let mut grads = tape.backward(loss)?;
            let mut named = IndexMap::with_capacity(model.params.len());
            for name in model.params.keys() {
                let g = grads
                    .take_param(name)
                    .ok_or_else(|| Error::Autodiff(format!("no gradient for {name}")))?;
                named.insert(name.clone(), g);
            }
            if let Some(c) = config.clip_norm {
                clip_grad_norm(&mut named, c);
            }
            adam_step(&mut model.params, &named, &mut optimizer)?;
            model.apply_bn_stats(&out.bn_stats);
        }

        let val_accuracy = if val.is_empty() {
            0.0
        } else {
            evaluate_with(&model, val, par)?.accuracy
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy >= *acc) {
            best = Some((val_accuracy, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        optimizer,
    })
}

/// Supervised training from `model`'s current weights.
pub fn train(model: ModelParams, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    fit(model, dataset, config, None, &mut |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    model: ModelParams,
    dataset: &Dataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    fit(model, dataset, config, None, on_epoch)
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Anything that maps samples to class predictions.
pub trait Classifier {
    fn class_count(&self) -> usize;
    fn predict(&self, samples: &[GestureSample]) -> Result<Vec<usize>>;
}

pub const EVAL_BATCH: usize = 16;

impl ModelParams {
    /// Eval-mode predictions, `EVAL_BATCH` samples per forward pass.
    pub fn predict_with(&self, samples: &[GestureSample], par: Parallelism) -> Result<Vec<usize>> {
        Ok(self.sample_logits(samples, par)?.iter().map(Tensor::argmax).collect())
    }

    /// Eval-mode logits per sample.
    pub fn sample_logits(&self, samples: &[GestureSample], par: Parallelism) -> Result<Vec<Tensor<f32>>> {
        let chunks: Vec<&[GestureSample]> = samples.chunks(EVAL_BATCH).collect();
        let per_chunk = map_range(par, chunks.len(), |i| -> Result<Tensor<f32>> {
            let videos = videos_for(self, chunks[i], Parallelism::Sequential)?;
            self.logits(&videos)
        });
        let mut out = Vec::with_capacity(samples.len());
        for t in per_chunk {
            let t = t?;
            let c = t.shape()[1];
            for r in 0..t.shape()[0] {
                out.push(Tensor::new(vec![c], t.row(r).to_vec())?);
            }
        }
        Ok(out)
    }
}

impl Classifier for ModelParams {
    fn class_count(&self) -> usize {
        self.spec.class_count
    }

    fn predict(&self, samples: &[GestureSample]) -> Result<Vec<usize>> {
        self.predict_with(samples, Parallelism::Sequential)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    /// Fraction of correct argmax predictions.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate_predictions(
    predictions: &[usize],
    samples: &[GestureSample],
    class_count: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut confusion = vec![vec![0; class_count]; class_count];
    for (s, &p) in samples.iter().zip(predictions) {
        if s.label() >= class_count || p >= class_count {
            return Err(Error::invalid(format!(
                "sample {} label {} or prediction {p} out of range",
                s.id, s.label
            )));
        }
        confusion[s.label()][p] += 1;
    }
    let correct = (0..class_count).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / samples.len() as f64,
        correct,
        total: samples.len(),
        confusion,
    })
}

/// Accuracy and confusion matrix of `classifier` over `samples`.
pub fn evaluate<C: Classifier + ?Sized>(classifier: &C, samples: &[GestureSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let predictions = classifier.predict(samples)?;
    evaluate_predictions(&predictions, samples, classifier.class_count())
}

/// [`evaluate`] for a model with explicit parallelism.
pub fn evaluate_with(model: &ModelParams, samples: &[GestureSample], par: Parallelism) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    evaluate_predictions(&model.predict_with(samples, par)?, samples, model.spec.class_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(name: &str, v: f32) -> IndexMap<String, Tensor<f32>> {
        IndexMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one("w", 1.0);
        let mut s = AdamState::new(AdamConfig::default());
        adam_step(&mut p, &one("w", 0.5), &mut s).unwrap();
        assert!((p["w"].data()[0] - 0.999).abs() < 1e-6);
        assert_eq!(s.step, 1);
        assert_eq!(s.m["w"].shape(), p["w"].shape());
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = one("w", 0.25);
        let mut s = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut p, &one("w", 0.0), &mut s).unwrap();
        }
        assert_eq!(p["w"].data()[0], 0.25);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = one("w", 1.0);
        let mut s = AdamState::new(AdamConfig::default());
        let err = adam_step(&mut p, &one("w", f32::NAN), &mut s).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains('w')));
        assert_eq!((p["w"].data()[0], s.step), (1.0, 0));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = IndexMap::from([("a".to_string(), Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap())]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-6);
    }

    struct Oracle;

    impl Classifier for Oracle {
        fn class_count(&self) -> usize {
            8
        }

        fn predict(&self, samples: &[GestureSample]) -> Result<Vec<usize>> {
            Ok(samples.iter().map(GestureSample::label).collect())
        }
    }

    fn stub_samples(n: usize) -> Vec<GestureSample> {
        (0..n)
            .map(|i| GestureSample::new(i as u32, (i % 8) as u16, vec![], vec![0; crate::data::FRAME_BYTES]).unwrap())
            .collect()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let samples = stub_samples(24);
        let e = evaluate(&Oracle, &samples).unwrap();
        assert_eq!(e.accuracy, 1.0);
        for (i, row) in e.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), 3);
            assert_eq!(row[i], 3);
        }
        assert!(evaluate(&Oracle, &[]).is_err());
    }

    proptest! {
        #[test]
        fn adam_updates_are_elementwise(g in -10f32..10f32, w in -1f32..1f32, steps in 1usize..5) {
            let mut p = IndexMap::from([
                ("a".to_string(), Tensor::scalar(w)),
                ("b".to_string(), Tensor::scalar(w)),
            ]);
            let grads = IndexMap::from([
                ("a".to_string(), Tensor::scalar(g)),
                ("b".to_string(), Tensor::scalar(g)),
            ]);
            let mut s = AdamState::new(AdamConfig::default());
            for _ in 0..steps {
                adam_step(&mut p, &grads, &mut s).unwrap();
            }
            prop_assert_eq!(p["a"].data()[0], p["b"].data()[0]);
            prop_assert!(s.v.values().all(|v| v.data().iter().all(|&x| x >= 0.0)));
            prop_assert_eq!(s.step as usize, steps);
        }

        #[test]
        fn confusion_sums_to_total(preds in proptest::collection::vec(0usize..8, 1..60)) {
            let samples = stub_samples(preds.len());
            let e = evaluate_predictions(&preds, &samples, 8).unwrap();
            prop_assert_eq!(e.confusion.iter().flatten().sum::<usize>(), samples.len());
            prop_assert!((0.0..=1.0).contains(&e.accuracy));
        }
    }
}
