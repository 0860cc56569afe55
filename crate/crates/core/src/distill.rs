//! Knowledge distillation: temperature-softened teacher targets and the
//! `α·soft + (1−α)·hard` student loss.

use std::collections::HashMap;

use crate::data::{Dataset, GestureSample};
use crate::exec::Parallelism;
use crate::kernels::{softmax_row, LOG_FLOOR};
use crate::models::{build_model, ArchSpec, ModelParams};
use crate::nn::{self, Target};
use crate::train::{fit, EpochRecord, LossMode, Teacher, TrainConfig, TrainOutcome};
use crate::{Error, Result, Scalar, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 2.0;
pub const DEFAULT_ALPHA: f64 = 0.5;

pub(crate) fn check_hyper(temperature: f64, alpha: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} must lie in [0, 1]")));
    }
    Ok(())
}

/// Probability vector produced by [`soften`].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets<T: Scalar = f32>(Tensor<T>);

impl<T: Scalar> SoftTargets<T> {
    pub fn probs(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_inner(self) -> Tensor<T> {
        self.0
    }

    pub fn entropy(&self) -> T {
        self.0
            .data()
            .iter()
            .filter(|&&p| p > T::zero())
            .fold(T::zero(), |h, &p| h - p * p.ln())
    }
}

/// `softmax(z / T)`.
pub fn soften<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<SoftTargets<T>> {
    check_hyper(temperature, 0.0)?;
    if logits.rank() != 1 {
        return Err(Error::shape(format!(
            "soften expects a vector, got {:?}",
            logits.shape()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("teacher logits".into()));
    }
    let p = softmax_row(logits.data(), T::lit(temperature));
    Ok(SoftTargets(Tensor::new(vec![p.len()], p)?))
}

/// `α·CE(soften(student), soften(teacher)) + (1−α)·CE(student, label)`
/// without `T²` rescaling.
pub fn distill_loss<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    label: usize,
    temperature: f64,
    alpha: f64,
) -> Result<T> {
    check_hyper(temperature, alpha)?;
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::shape(format!(
            "student logits {:?} vs teacher {:?}",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    let target = soften(teacher_logits, temperature)?;
    let student = soften(student_logits, temperature)?;
    let floor = T::lit(LOG_FLOOR);
    let soft = target
        .probs()
        .data()
        .iter()
        .zip(student.probs().data())
        .fold(T::zero(), |acc, (&t, &p)| acc - t * p.max(floor).ln());
    let hard = nn::cross_entropy(student_logits, Target::Class(label))?;
    Ok(T::lit(alpha) * soft + T::lit(1.0 - alpha) * hard)
}

/// Frozen teacher and the student to train against it.
#[derive(Clone, Debug)]
pub struct DistillConfig {
    pub teacher: ModelParams,
    pub student_spec: ArchSpec,
    pub temperature: f64,
    pub alpha: f64,
    /// Scale the soft term by `T²`.
    pub t_squared: bool,
    /// Precompute teacher logits once per sample instead of every batch.
    pub cache_teacher: bool,
}

impl DistillConfig {
    pub fn new(teacher: ModelParams, student_spec: ArchSpec) -> Self {
        DistillConfig {
            teacher,
            student_spec,
            temperature: DEFAULT_TEMPERATURE,
            alpha: DEFAULT_ALPHA,
            t_squared: false,
            cache_teacher: false,
        }
    }

    fn validate(&self) -> Result<()> {
        check_hyper(self.temperature, self.alpha)?;
        if self.teacher.spec.class_count != self.student_spec.class_count {
            return Err(Error::invalid(format!(
                "teacher has {} classes, student {}",
                self.teacher.spec.class_count, self.student_spec.class_count
            )));
        }
        self.student_spec.validate()
    }

    fn loss_mode(&self) -> LossMode {
        LossMode::Distill {
            temperature: self.temperature,
            alpha: self.alpha,
            t_squared: self.t_squared,
        }
    }
}

/// Teacher eval-mode logits keyed by sample id.
#[derive(Clone, Debug, Default)]
pub struct TeacherCache {
    logits: HashMap<u32, Tensor<f32>>,
}

impl TeacherCache {
    pub fn build(teacher: &ModelParams, samples: &[GestureSample], par: Parallelism) -> Result<Self> {
        let rows = teacher.sample_logits(samples, par)?;
        Ok(TeacherCache {
            logits: samples.iter().map(|s| s.id).zip(rows).collect(),
        })
    }

    pub fn get(&self, id: u32) -> Option<&Tensor<f32>> {
        self.logits.get(&id)
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// Trains a freshly initialized student (seeded by `train_config.seed`)
/// against the teacher. The teacher is only read.
pub fn distill_train(config: &DistillConfig, dataset: &Dataset, train_config: &TrainConfig) -> Result<TrainOutcome> {
    distill_train_with_progress(config, dataset, train_config, &mut |_| {})
}

pub fn distill_train_with_progress(
    config: &DistillConfig,
    dataset: &Dataset,
    train_config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.cache_teacher && config.alpha > 0.0 {
        let cache = TeacherCache::build(
            &config.teacher,
            dataset.split(crate::data::Split::Train),
            train_config.parallelism,
        )?;
        return distill_train_cached(config, &cache, dataset, train_config, on_epoch);
    }
    let student = build_model(config.student_spec, train_config.seed)?;
    let tc = TrainConfig {
        loss: config.loss_mode(),
        ..train_config.clone()
    };
    fit(student, dataset, &tc, Some(Teacher::Live(&config.teacher)), on_epoch)
}

/// Distillation from precomputed teacher logits, which may be shared across
/// runs with the same teacher and corpus.
pub fn distill_train_cached(
    config: &DistillConfig,
    cache: &TeacherCache,
    dataset: &Dataset,
    train_config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let student = build_model(config.student_spec, train_config.seed)?;
    let tc = TrainConfig {
        loss: config.loss_mode(),
        ..train_config.clone()
    };
    fit(student, dataset, &tc, Some(Teacher::Cached(&cache.logits)), on_epoch)
}
