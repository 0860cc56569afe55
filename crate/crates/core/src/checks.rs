//! Finite-difference gradient checks of every tape operation and of each
//! model family, evaluated in `f64` on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_sampled, BnMode, GradCheckReport, Tape, Targets, Var};
use crate::kernels::ConvGeometry;
use crate::models::{build_model, classification_loss, ArchSpec, Family, WidthScale};
use crate::nn::{Mode, BN_EPSILON};
use crate::{Result, Tensor};

/// Central-difference step.
pub const EPSILON: f64 = 1e-5;
/// Elements checked per tensor in the full-model checks.
pub const MODEL_SAMPLES: usize = 16;
/// Spatial size of full-model check inputs.
pub const MODEL_FRAME_SIZE: usize = 8;
pub const MODEL_CLASSES: usize = 8;

/// One named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(random(&mut rng, &shape, 1.0)?);
    let m = tape.mul(y, r)?;
    tape.sum(m)
}

type Check = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
type Case = (String, Check, Vec<Tensor<f64>>);

fn layer_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases: Vec<Case> = Vec::new();

    let geometries = [
        ("same3", ConvGeometry::same3()),
        ("down4", ConvGeometry::down4()),
        (
            "mixed",
            ConvGeometry {
                kernel: [3, 2, 3],
                stride: [1, 2, 2],
                pad: [0, 1, 1],
            },
        ),
    ];
    for (name, geom) in geometries {
        let x = random(rng, &[2, 2, 4, 5, 5], 1.0)?;
        let k = geom.kernel;
        let w = random(rng, &[3, 2, k[0], k[1], k[2]], 0.5)?;
        let b = random(rng, &[3], 0.5)?;
        cases.push((
            format!("conv3d/{name}"),
            Box::new(move |t, v| {
                let y = t.conv3d(v[0], v[1], v[2], geom)?;
                project(t, y, 1)
            }),
            vec![x, w, b],
        ));
    }

    let x = random(rng, &[3, 2, 2, 3, 3], 1.0)?;
    let gamma = random(rng, &[2], 1.0)?;
    let beta = random(rng, &[2], 1.0)?;
    cases.push((
        "batch_norm/train".into(),
        Box::new(|t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BN_EPSILON, BnMode::Train)?;
            project(t, y, 2)
        }),
        vec![x.clone(), gamma.clone(), beta.clone()],
    ));
    let running_mean = random(rng, &[2], 0.5)?;
    let running_var = random(rng, &[2], 0.5)?.map(|v| v + 1.0);
    cases.push((
        "batch_norm/eval".into(),
        Box::new(move |t, v| {
            let mode = BnMode::Eval {
                running_mean: &running_mean,
                running_var: &running_var,
            };
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BN_EPSILON, mode)?;
            project(t, y, 3)
        }),
        vec![x, gamma, beta],
    ));

    cases.push((
        "relu".into(),
        Box::new(|t, v| {
            let y = t.relu(v[0])?;
            project(t, y, 4)
        }),
        vec![random(rng, &[4, 5], 1.0)?],
    ));

    cases.push((
        "linear".into(),
        Box::new(|t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            project(t, y, 5)
        }),
        vec![
            random(rng, &[3, 4], 1.0)?,
            random(rng, &[5, 4], 1.0)?,
            random(rng, &[5], 1.0)?,
        ],
    ));

    let mut lstm = || -> Result<Vec<Tensor<f64>>> {
        Ok(vec![
            random(rng, &[1, 3], 1.0)?,
            random(rng, &[8, 3], 0.5)?,
            random(rng, &[8, 2], 0.5)?,
            random(rng, &[8], 0.5)?,
        ])
    };
    let (first, mut second, unrolled) = (lstm()?, lstm()?, lstm()?);
    cases.push((
        "lstm_cell/zero_state".into(),
        Box::new(|t, v| {
            let y = t.lstm_cell(v[0], None, v[1], v[2], v[3])?;
            project(t, y, 6)
        }),
        first,
    ));
    second.push(random(rng, &[1, 4], 1.0)?);
    cases.push((
        "lstm_cell/with_state".into(),
        Box::new(|t, v| {
            let y = t.lstm_cell(v[0], Some(v[4]), v[1], v[2], v[3])?;
            project(t, y, 7)
        }),
        second,
    ));
    cases.push((
        "lstm_cell/unrolled".into(),
        Box::new(|t, v| {
            let mut s = None;
            for _ in 0..3 {
                s = Some(t.lstm_cell(v[0], s, v[1], v[2], v[3])?);
            }
            let h = t.slice_cols(s.expect("three steps"), 0, 2)?;
            project(t, h, 8)
        }),
        unrolled,
    ));

    cases.push((
        "cross_entropy/classes".into(),
        Box::new(|t, v| t.cross_entropy(v[0], &Targets::Classes(vec![2, 0, 4]), 1.0)),
        vec![random(rng, &[3, 5], 2.0)?],
    ));
    let soft = random(rng, &[3, 5], 1.0)?;
    let soft = Tensor::new(
        vec![3, 5],
        soft.data()
            .chunks(5)
            .flat_map(|row| {
                let e: Vec<f64> = row.iter().map(|x| x.exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |x| x / s)
            })
            .collect(),
    )?;
    cases.push((
        "cross_entropy/soft_t2".into(),
        Box::new(move |t, v| t.cross_entropy(v[0], &Targets::Distribution(soft.clone()), 2.0)),
        vec![random(rng, &[3, 5], 2.0)?],
    ));

    cases.push((
        "weighted_sum".into(),
        Box::new(|t, v| {
            let y = t.weighted_sum(&[(v[0], 0.3), (v[1], -1.7)])?;
            project(t, y, 9)
        }),
        vec![random(rng, &[2, 3], 1.0)?, random(rng, &[2, 3], 1.0)?],
    ));

    cases.push((
        "reshape_narrow_concat".into(),
        Box::new(|t, v| {
            let r = t.reshape(v[0], vec![6, 2])?;
            let a = t.narrow_rows(r, 1, 2)?;
            let b = t.narrow_rows(r, 4, 2)?;
            let c = t.concat_rows(&[b, a, b])?;
            let s = t.slice_cols(c, 1, 1)?;
            project(t, s, 10)
        }),
        vec![random(rng, &[3, 4], 1.0)?],
    ));

    Ok(cases)
}

/// Exhaustive checks of every tape operation.
pub fn layer_gradients(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layer_cases(&mut rng)?
        .into_iter()
        .map(|(name, f, params)| {
            let report = grad_check(f, &params, EPSILON)?;
            Ok(CheckResult { name, report })
        })
        .collect()
}

/// Sampled checks of a whole width-1/4 model on two reduced-size videos,
/// in train mode so batch normalization uses batch statistics.
pub fn model_gradients(family: Family, seed: u64) -> Result<CheckResult> {
    let spec = ArchSpec::new(family, WidthScale::QUARTER)
        .with_classes(MODEL_CLASSES)
        .with_frame_size(MODEL_FRAME_SIZE);
    let model = build_model(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let c = spec.input_channels;
    let s = MODEL_FRAME_SIZE;
    let videos = vec![
        random(&mut rng, &[c, 12, s, s], 1.0)?,
        random(&mut rng, &[c, 7, s, s], 1.0)?,
    ];
    let input = spec.prepare(&videos)?;
    let labels = vec![3, 5];
    let params: Vec<Tensor<f64>> = model.params.values().map(Tensor::cast).collect();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let bound = model.bind_vars(vars)?;
        let out = model.forward(tape, &bound, &input, Mode::Train)?;
        classification_loss(tape, out.logits, &labels)
    };
    let report = grad_check_sampled(f, &params, EPSILON, MODEL_SAMPLES, seed)?;
    Ok(CheckResult {
        name: format!("model/{family}"),
        report,
    })
}
