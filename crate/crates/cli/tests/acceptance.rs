//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The process exits 0 once every criterion has been evaluated, whatever
//! the verdicts; a harness crash exits 101. Set `GKD_ACCEPTANCE_STRICT=1`
//! to also exit 1 when any criterion fails, and `GKD_ACCEPTANCE_ONLY=3,9`
//! to run a subset.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use gkd_cli::run_with;
use gkd_core::checks::{layer_gradients, model_gradients};
use gkd_core::compression::{
    prune, save_model, serialize, threshold_from_exp, CompressedModel, StoredTensor, DEFAULT_PRUNE_EXP,
};
use gkd_core::data::{
    center_window_32, chunk4, decode_dataset, encode_dataset, synth_generate, Dataset, InputMode, Split, SplitCounts,
};
use gkd_core::distill::{distill_train_cached, DistillConfig, TeacherCache};
use gkd_core::models::{build_model, ArchSpec, Family, ModelParams, WidthScale};
use gkd_core::train::{evaluate_with, train, train_with_progress, AdamConfig, TrainConfig};
use gkd_core::{Parallelism, Tensor};

const CLASSES: usize = 8;
const CORPUS_SEED: u64 = 2024;
const COUNTS: SplitCounts = SplitCounts {
    train: 800,
    val: 100,
    test: 200,
};
const SEEDS: [u64; 3] = [1, 2, 3];
const STUDENT_EPOCHS: usize = 6;
const TEACHER_EPOCHS: usize = 2;
const TEACHER_LR: f64 = 1e-3;
const TEMPERATURE: f64 = 2.0;
const ALPHA: f64 = 0.5;
const GRAD_TOLERANCE: f64 = 1e-3;
const PAR: Parallelism = Parallelism::Parallel;

type Outcome = Result<(bool, String), String>;

/// One experiment arm: family, input mode, distillation weight (`None` for
/// label-only training).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct Arm {
    family: Family,
    input: InputMode,
    alpha_milli: Option<u32>,
}

impl Arm {
    fn plain(family: Family, input: InputMode) -> Self {
        Arm {
            family,
            input,
            alpha_milli: None,
        }
    }

    fn label(&self) -> String {
        match self.alpha_milli {
            Some(a) => format!("{}/{} alpha={}", self.family, self.input, a as f64 / 1000.0),
            None => format!("{}/{}", self.family, self.input),
        }
    }
}

struct Run {
    model: ModelParams,
    test_accuracy: f64,
}

/// Corpus, teacher and trained arms, built on first use and shared by
/// every criterion.
struct Lab {
    corpus: Option<Dataset>,
    teacher: Option<ModelParams>,
    cache: Option<TeacherCache>,
    runs: HashMap<(Arm, u64), Run>,
}

fn student_spec(family: Family, input: InputMode) -> ArchSpec {
    ArchSpec::new(family, WidthScale::QUARTER)
        .with_classes(CLASSES)
        .with_input_mode(input)
}

fn student_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: STUDENT_EPOCHS,
        batch_size: 16,
        seed,
        parallelism: PAR,
        ..TrainConfig::default()
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl Lab {
    fn new() -> Self {
        Lab {
            corpus: None,
            teacher: None,
            cache: None,
            runs: HashMap::new(),
        }
    }

    fn corpus(&mut self) -> Result<&Dataset, String> {
        if self.corpus.is_none() {
            let t = Instant::now();
            let d = synth_generate(CLASSES, COUNTS, CORPUS_SEED, PAR).map_err(err)?;
            eprintln!("  corpus: {} samples in {:.0?}", d.samples.len(), t.elapsed());
            self.corpus = Some(d);
        }
        Ok(self.corpus.as_ref().expect("set"))
    }

    fn teacher(&mut self) -> Result<&ModelParams, String> {
        if self.teacher.is_none() {
            let corpus = self.corpus()?.clone();
            let spec = ArchSpec::new(Family::BaselineCnn3d, WidthScale::FULL).with_classes(CLASSES);
            let config = TrainConfig {
                epochs: TEACHER_EPOCHS,
                adam: AdamConfig {
                    lr: TEACHER_LR,
                    ..AdamConfig::default()
                },
                ..student_config(0)
            };
            let t = Instant::now();
            let out = train_with_progress(build_model(spec, 0).map_err(err)?, &corpus, &config, &mut |r| {
                eprintln!(
                    "  teacher epoch {}: loss {:.4} val {:.3} ({:.0?})",
                    r.epoch,
                    r.train_loss,
                    r.val_accuracy,
                    t.elapsed()
                )
            })
            .map_err(err)?;
            let acc = evaluate_with(&out.model, corpus.split(Split::Test), PAR)
                .map_err(err)?
                .accuracy;
            eprintln!("  teacher test accuracy {:.2}%", 100.0 * acc);
            let t = Instant::now();
            let cache = TeacherCache::build(&out.model, corpus.split(Split::Train), PAR).map_err(err)?;
            eprintln!("  teacher logits cached in {:.0?}", t.elapsed());
            self.cache = Some(cache);
            self.teacher = Some(out.model);
        }
        Ok(self.teacher.as_ref().expect("set"))
    }

    fn run(&mut self, arm: Arm, seed: u64) -> Result<&Run, String> {
        if !self.runs.contains_key(&(arm, seed)) {
            let corpus = self.corpus()?.clone();
            let spec = student_spec(arm.family, arm.input);
            let config = student_config(seed);
            if arm.alpha_milli.is_some() {
                self.teacher()?;
            }
            let t = Instant::now();
            let outcome = match arm.alpha_milli {
                None => train(build_model(spec, seed).map_err(err)?, &corpus, &config),
                Some(a) => {
                    let teacher = self.teacher()?.clone();
                    let mut dc = DistillConfig::new(teacher, spec);
                    dc.temperature = TEMPERATURE;
                    dc.alpha = a as f64 / 1000.0;
                    distill_train_cached(
                        &dc,
                        self.cache.as_ref().expect("built with teacher"),
                        &corpus,
                        &config,
                        &mut |_| {},
                    )
                }
            }
            .map_err(err)?;
            let test_accuracy = evaluate_with(&outcome.model, corpus.split(Split::Test), PAR)
                .map_err(err)?
                .accuracy;
            eprintln!(
                "  {} seed {seed}: test {:.2}% (best epoch {}, {:.0?})",
                arm.label(),
                100.0 * test_accuracy,
                outcome.best_epoch,
                t.elapsed()
            );
            self.runs.insert(
                (arm, seed),
                Run {
                    model: outcome.model,
                    test_accuracy,
                },
            );
        }
        Ok(&self.runs[&(arm, seed)])
    }

    /// Test accuracies (percent) over [`SEEDS`].
    fn accuracies(&mut self, arm: Arm) -> Result<Vec<f64>, String> {
        SEEDS
            .iter()
            .map(|&s| self.run(arm, s).map(|r| 100.0 * r.test_accuracy))
            .collect()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt_accs(xs: &[f64]) -> String {
    let v: Vec<String> = xs.iter().map(|x| format!("{x:.2}")).collect();
    format!("[{}] mean {:.2}", v.join(", "), mean(xs))
}

// ── Criteria ────────────────────────────────────────────────────────────

fn param_count_reconstruction(_: &mut Lab) -> Outcome {
    const EXPECTED: usize = 18_823_284;
    let spec = ArchSpec::new(Family::BaselineCnn3d, WidthScale::FULL);
    let closed = spec.param_count().map_err(err)?;
    let model = build_model(spec, 0).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("cnn3d_w1.gkdm");
    save_model(&CompressedModel::dense(&model), &path).map_err(err)?;
    let (mut out, mut stderr) = (Vec::new(), Vec::new());
    let code = run_with(
        ["gkd", "inspect", "--model", path.to_str().ok_or("path")?],
        &mut out,
        &mut stderr,
    );
    let text = String::from_utf8_lossy(&out);
    let inspected: Option<usize> = text
        .lines()
        .find_map(|l| l.strip_prefix("param_count="))
        .and_then(|v| v.trim().parse().ok());
    let millions = format!("{:.2}", closed as f64 / 1e6);
    let ok = closed == EXPECTED
        && model.param_count() == EXPECTED
        && code == 0
        && inspected == Some(EXPECTED)
        && millions == "18.82";
    Ok((
        ok,
        format!(
            "closed form {closed}, built {}, inspect {inspected:?} (exit {code}), {millions}M",
            model.param_count()
        ),
    ))
}

fn scaling_ratios(_: &mut Lab) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for family in Family::ALL {
        let count = |w| ArchSpec::new(family, w).param_count().map_err(err);
        let full = count(WidthScale::FULL)? as f64;
        let half = count(WidthScale::HALF)? as f64 / full;
        let quarter = count(WidthScale::QUARTER)? as f64 / full;
        let good = (0.23..=0.27).contains(&half) && (0.055..=0.075).contains(&quarter);
        ok &= good;
        parts.push(format!(
            "{family} 1/2={half:.4} 1/4={quarter:.4}{}",
            if good { "" } else { " (out of range)" }
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn gradient_suite(_: &mut Lab) -> Outcome {
    let t = Instant::now();
    let mut results = layer_gradients(7).map_err(err)?;
    for family in Family::ALL {
        results.push(model_gradients(family, 3).map_err(err)?);
    }
    let worst = results
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .ok_or("no checks")?;
    let failing: Vec<&str> = results
        .iter()
        .filter(|r| r.report.max_rel_error.is_nan() || r.report.max_rel_error >= GRAD_TOLERANCE)
        .map(|r| r.name.as_str())
        .collect();
    let elapsed = t.elapsed();
    let ok = failing.is_empty() && elapsed.as_secs() < 120;
    Ok((
        ok,
        format!(
            "{} checks, worst {} rel err {:.2e}, failing {failing:?}, {:.1?}",
            results.len(),
            worst.name,
            worst.report.max_rel_error,
            elapsed
        ),
    ))
}

fn distillation_direction(lab: &mut Lab) -> Outcome {
    let body = InputMode::UpperBody;
    let soft = lab.accuracies(Arm {
        alpha_milli: Some((ALPHA * 1000.0) as u32),
        ..Arm::plain(Family::Joint, body)
    })?;
    let hard = lab.accuracies(Arm::plain(Family::Joint, body))?;
    let wins = soft.iter().zip(&hard).filter(|(s, h)| s >= h).count();
    let ok = mean(&soft) >= mean(&hard) && wins >= 2;
    Ok((
        ok,
        format!(
            "alpha={ALPHA} T={TEMPERATURE} {} vs alpha=0 {}; gap >= 0 in {wins}/3 seeds",
            fmt_accs(&soft),
            fmt_accs(&hard)
        ),
    ))
}

fn architecture_ordering(lab: &mut Lab) -> Outcome {
    let body = InputMode::UpperBody;
    let lstm = lab.accuracies(Arm::plain(Family::BaselineLstm, body))?;
    let cnn = lab.accuracies(Arm::plain(Family::BaselineCnn3d, body))?;
    let joint = lab.accuracies(Arm::plain(Family::Joint, body))?;
    let (l, c, j) = (mean(&lstm), mean(&cnn), mean(&joint));
    let ok = c - l >= -2.0 && j - c >= -2.0 && j - l >= -2.0;
    Ok((
        ok,
        format!(
            "lstm {}, cnn3d {}, joint {}",
            fmt_accs(&lstm),
            fmt_accs(&cnn),
            fmt_accs(&joint)
        ),
    ))
}

fn input_mode_direction(lab: &mut Lab) -> Outcome {
    let cnn = Family::BaselineCnn3d;
    let hand = lab.accuracies(Arm::plain(cnn, InputMode::Hand))?;
    let body = lab.accuracies(Arm::plain(cnn, InputMode::UpperBody))?;
    let combined = lab.accuracies(Arm::plain(cnn, InputMode::Combined))?;
    let ok = mean(&combined) >= mean(&hand).max(mean(&body)) - 2.0;
    Ok((
        ok,
        format!(
            "combined {}, hand {}, upper_body {}",
            fmt_accs(&combined),
            fmt_accs(&hand),
            fmt_accs(&body)
        ),
    ))
}

/// Trained models already in the lab, or a fresh short run when the suite
/// runs this criterion alone.
fn trained_models(lab: &mut Lab) -> Result<Vec<(String, ModelParams)>, String> {
    if lab.runs.is_empty() {
        lab.run(Arm::plain(Family::Joint, InputMode::UpperBody), SEEDS[0])?;
    }
    let mut models: Vec<(String, ModelParams)> = lab
        .runs
        .iter()
        .filter(|((_, seed), _)| *seed == SEEDS[0])
        .map(|((arm, seed), r)| (format!("{} seed {seed}", arm.label()), r.model.clone()))
        .collect();
    models.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(t) = &lab.teacher {
        models.push(("teacher".into(), t.clone()));
    }
    Ok(models)
}

fn max_logit_deviation(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
}

fn argmax(t: &Tensor<f32>) -> usize {
    t.argmax()
}

fn pruning_fidelity(lab: &mut Lab) -> Outcome {
    let threshold = threshold_from_exp(DEFAULT_PRUNE_EXP).map_err(err)?;
    let models = trained_models(lab)?;
    let test = lab.corpus()?.split(Split::Test).to_vec();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, model) in &models {
        let (pruned, stats) = prune(model, threshold).map_err(err)?;
        let dense = serialize(&CompressedModel::dense(model)).map_err(err)?.len();
        let sparse = serialize(&pruned).map_err(err)?.len();
        let mut sizes_ok = sparse <= dense;
        // forcing most tensors sparse must not grow the file either
        for exp in [-12, -6, -2] {
            let (p, _) = prune(model, threshold_from_exp(exp).map_err(err)?).map_err(err)?;
            sizes_ok &= serialize(&p).map_err(err)?.len() <= dense;
        }
        ok &= sizes_ok;
        if name == "teacher" {
            parts.push(format!("{name}: removed {}, sizes ok {sizes_ok}", stats.removed));
            continue;
        }
        let restored = pruned.to_model().map_err(err)?;
        let before = model.sample_logits(&test, PAR).map_err(err)?;
        let after = restored.sample_logits(&test, PAR).map_err(err)?;
        let same = before.iter().zip(&after).all(|(a, b)| argmax(a) == argmax(b));
        let dev = max_logit_deviation(&before, &after);
        ok &= same && dev < 1e-6;
        parts.push(format!(
            "{name}: removed {}, argmax identical {same}, max |dlogit| {dev:.1e}, file {sparse} <= {dense} {sizes_ok}",
            stats.removed
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn half_precision_sizing(lab: &mut Lab) -> Outcome {
    let models = trained_models(lab)?;
    let test = lab.corpus()?.split(Split::Test).to_vec();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, model) in &models {
        let dense = CompressedModel::dense(model);
        let (half, _) = dense.to_half();
        let exact = half.payload_bytes() * 2 == dense.payload_bytes()
            && half
                .tensors
                .values()
                .all(|t| matches!(t, StoredTensor::DenseF16 { .. }));
        ok &= exact;
        if name == "teacher" {
            parts.push(format!(
                "{name}: payload {} -> {}",
                dense.payload_bytes(),
                half.payload_bytes()
            ));
            continue;
        }
        let restored = gkd_core::compression::deserialize(&serialize(&half).map_err(err)?)
            .and_then(|m| m.to_model())
            .map_err(err)?;
        let before = 100.0 * evaluate_with(model, &test, PAR).map_err(err)?.accuracy;
        let after = 100.0 * evaluate_with(&restored, &test, PAR).map_err(err)?.accuracy;
        ok &= before - after <= 1.0;
        parts.push(format!(
            "{name}: payload {} -> {}, accuracy {before:.2} -> {after:.2}",
            dense.payload_bytes(),
            half.payload_bytes()
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn numbered_video(t: usize) -> Tensor<f32> {
    Tensor::new(vec![1, t, 1, 1], (1..=t).map(|f| f as f32).collect()).expect("video")
}

fn frames(v: &Tensor<f32>) -> Vec<f32> {
    v.data().to_vec()
}

fn pipeline_examples() -> Result<Vec<String>, String> {
    let mut failures = Vec::new();
    let expect = |name: &str, got: Vec<f32>, want: Vec<f32>| (got != want).then(|| format!("{name}: got {got:?}"));
    let w40 = center_window_32(&numbered_video(40)).map_err(err)?;
    failures.extend(expect(
        "window T=40",
        frames(&w40),
        (5..=36).map(|f| f as f32).collect(),
    ));
    let w32 = center_window_32(&numbered_video(32)).map_err(err)?;
    failures.extend(expect("window T=32", frames(&w32), frames(&numbered_video(32))));
    let w20 = center_window_32(&numbered_video(20)).map_err(err)?;
    let mut padded = vec![0.0; 6];
    padded.extend((1..=20).map(|f| f as f32));
    padded.extend([0.0; 6]);
    failures.extend(expect("window T=20", frames(&w20), padded));
    for (t, blocks, last) in [
        (12, 3, vec![9.0, 10.0, 11.0, 12.0]),
        (10, 3, vec![9.0, 10.0, 0.0, 0.0]),
        (1, 1, vec![1.0, 0.0, 0.0, 0.0]),
    ] {
        let c = chunk4(&numbered_video(t)).map_err(err)?;
        if c.len() != blocks {
            failures.push(format!("chunk4 T={t}: {} blocks", c.len()));
        }
        failures.extend(expect(
            &format!("chunk4 T={t} last block"),
            frames(c.last().ok_or("no blocks")?),
            last,
        ));
    }
    for t in [1, 7, 31, 32, 33, 48, 90] {
        let n = chunk4(&center_window_32(&numbered_video(t)).map_err(err)?)
            .map_err(err)?
            .len();
        if n != 8 {
            failures.push(format!("chunk4(window) T={t}: {n} blocks"));
        }
    }
    Ok(failures)
}

fn serialization_invariants(lab: &mut Lab) -> Outcome {
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;

    let small = synth_generate(
        CLASSES,
        SplitCounts {
            train: 24,
            val: 8,
            test: 8,
        },
        99,
        PAR,
    )
    .map_err(err)?;
    let bytes = encode_dataset(&small).map_err(err)?;
    let data_ok = encode_dataset(&decode_dataset(&bytes).map_err(err)?).map_err(err)? == bytes;
    ok &= data_ok;
    parts.push(format!("dataset roundtrip {data_ok}"));

    let mut models = vec![(
        "fresh joint 1/4".to_string(),
        build_model(student_spec(Family::Joint, InputMode::Combined), 5).map_err(err)?,
    )];
    models.extend(
        lab.runs
            .iter()
            .min_by_key(|((arm, seed), _)| (arm.label(), *seed))
            .map(|((arm, _), r)| (arm.label(), r.model.clone())),
    );
    for (name, model) in &models {
        let bytes = serialize(&CompressedModel::dense(model)).map_err(err)?;
        let back = gkd_core::compression::deserialize(&bytes).map_err(err)?;
        let model_ok = serialize(&back).map_err(err)? == bytes
            && back
                .to_model()
                .map_err(err)?
                .tensors()
                .zip(model.tensors())
                .all(|((n1, a), (n2, b))| {
                    n1 == n2
                        && a.data()
                            .iter()
                            .map(|v| v.to_bits())
                            .eq(b.data().iter().map(|v| v.to_bits()))
                });
        ok &= model_ok;
        parts.push(format!("{name} model roundtrip {model_ok}"));
    }

    let failures = pipeline_examples()?;
    ok &= failures.is_empty();
    parts.push(if failures.is_empty() {
        "window/chunk examples hold".into()
    } else {
        format!("window/chunk failures {failures:?}")
    });

    let config = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 11,
        parallelism: Parallelism::Sequential,
        ..TrainConfig::default()
    };
    let spec = student_spec(Family::BaselineLstm, InputMode::UpperBody);
    let bits = |m: &ModelParams| -> Vec<u32> {
        m.tensors()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let a = train(build_model(spec, 11).map_err(err)?, &small, &config).map_err(err)?;
    let b = train(build_model(spec, 11).map_err(err)?, &small, &config).map_err(err)?;
    let repro = a.history == b.history && bits(&a.model) == bits(&b.model);
    ok &= repro;
    parts.push(format!("same-seed training bit-identical {repro}"));

    let elapsed = t.elapsed();
    ok &= elapsed.as_secs() < 60;
    parts.push(format!("{elapsed:.1?}"));
    Ok((ok, parts.join("; ")))
}

// ── Driver ──────────────────────────────────────────────────────────────

type Criterion = (usize, &'static str, fn(&mut Lab) -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, "parameter-count reconstruction", param_count_reconstruction),
    (2, "width scaling ratios", scaling_ratios),
    (3, "gradient suite", gradient_suite),
    (4, "distillation direction", distillation_direction),
    (5, "architecture ordering", architecture_ordering),
    (6, "input-mode direction", input_mode_direction),
    (7, "pruning fidelity", pruning_fidelity),
    (8, "half-precision sizing", half_precision_sizing),
    (9, "serialization and pipeline invariants", serialization_invariants),
];

fn selected() -> Option<Vec<usize>> {
    let only = std::env::var("GKD_ACCEPTANCE_ONLY").ok()?;
    Some(only.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let strict = std::env::var("GKD_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only = selected();
    let mut lab = Lab::new();
    let (mut passed, mut failed, mut crashed) = (0, 0, 0);
    let start = Instant::now();
    for (n, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        eprintln!("criterion {n}: {name} ...");
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut lab)));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(Ok((true, detail))) => {
                passed += 1;
                println!("PASS  {n}. {name}: {detail} [{secs:.1}s]");
            }
            Ok(Ok((false, detail))) => {
                failed += 1;
                println!("FAIL  {n}. {name}: {detail} [{secs:.1}s]");
            }
            Ok(Err(e)) => {
                crashed += 1;
                println!("FAIL  {n}. {name}: harness error: {e} [{secs:.1}s]");
            }
            Err(_) => {
                crashed += 1;
                println!("FAIL  {n}. {name}: harness panicked [{secs:.1}s]");
            }
        }
    }
    println!(
        "acceptance: {passed} passed, {} failed ({crashed} harness errors) in {:.0}s",
        failed + crashed,
        start.elapsed().as_secs_f64()
    );
    if crashed > 0 {
        std::process::exit(101);
    }
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
