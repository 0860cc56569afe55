//! The three classifier families and their width-scaled variants.
//!
//! * `BaselineCnn3d`: six conv→BN→ReLU blocks over a 32-frame clip, then two
//!   fully-connected layers.
//! * `BaselineLstm`: each 4-frame block is flattened, projected by a linear
//!   layer with ReLU and fed to an LSTM.
//! * `Joint`: the conv stack encodes each 4-frame block, a linear layer with
//!   ReLU projects it, and an LSTM consumes the block sequence.
//!
//! Recurrent heads classify from the hidden state after the last block.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Tape, Targets, Var};
use crate::data::{center_window, chunk_blocks, InputMode, CHUNK_FRAMES, CLIP_FRAMES};
use crate::exec::{map_range, Parallelism};
use crate::kernels::{BatchStats, ConvGeometry};
use crate::nn::{self, Mode, BN_EPSILON, BN_MOMENTUM};
use crate::{Error, Result, Scalar, Tensor};

pub const DEFAULT_CLASSES: usize = 20;
pub const DEFAULT_FRAME_SIZE: usize = 64;

const CONV_CHANNELS: [usize; 6] = [32, 64, 64, 128, 128, 128];
const FEATURE_WIDTH: usize = 512;
const LSTM_UNITS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BaselineCnn3d,
    BaselineLstm,
    Joint,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::BaselineCnn3d, Family::BaselineLstm, Family::Joint];

    pub fn is_recurrent(self) -> bool {
        !matches!(self, Family::BaselineCnn3d)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::BaselineCnn3d => "cnn3d",
            Family::BaselineLstm => "lstm",
            Family::Joint => "joint",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn3d" | "baseline_cnn3d" => Ok(Family::BaselineCnn3d),
            "lstm" | "baseline_lstm" => Ok(Family::BaselineLstm),
            "joint" => Ok(Family::Joint),
            _ => Err(Error::invalid(format!(
                "unknown architecture {s:?} (expected cnn3d, lstm or joint)"
            ))),
        }
    }
}

/// Rational width multiplier applied to every channel/unit count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WidthScale {
    pub numerator: u32,
    pub denominator: u32,
}

impl WidthScale {
    pub const FULL: WidthScale = WidthScale {
        numerator: 1,
        denominator: 1,
    };
    pub const HALF: WidthScale = WidthScale {
        numerator: 1,
        denominator: 2,
    };
    pub const QUARTER: WidthScale = WidthScale {
        numerator: 1,
        denominator: 4,
    };

    pub fn new(numerator: u32, denominator: u32) -> Result<Self> {
        if numerator == 0 || denominator == 0 {
            return Err(Error::invalid(format!(
                "width scale {numerator}/{denominator} must be positive"
            )));
        }
        Ok(WidthScale { numerator, denominator })
    }

    /// `round(base·scale)`, halves rounding up; errors below 1.
    pub fn apply(self, base: usize) -> Result<usize> {
        let (n, d) = (self.numerator as usize, self.denominator as usize);
        let scaled = (2 * base * n + d) / (2 * d);
        if scaled < 1 {
            return Err(Error::invalid(format!(
                "width {self} rounds layer width {base} to zero"
            )));
        }
        Ok(scaled)
    }

    pub fn as_f64(self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

impl fmt::Display for WidthScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denominator == 1 {
            write!(f, "{}", self.numerator)
        } else {
            write!(f, "{}/{}", self.numerator, self.denominator)
        }
    }
}

impl FromStr for WidthScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("width {s:?} is not a rational like 1, 1/2 or 1/4"));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        WidthScale::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

/// Architecture descriptor: family, width, class count and input geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: Family,
    pub width: WidthScale,
    pub class_count: usize,
    pub input_channels: usize,
    pub input_mode: InputMode,
    /// Spatial side of the square input frames.
    pub frame_size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
}

/// Fully resolved layer sizes of an [`ArchSpec`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTable {
    pub convs: Vec<ConvLayer>,
    /// Frames per model input unit: 32-frame clip or 4-frame block.
    pub frames: usize,
    /// Per-layer output dims (T, H, W) of the conv stack.
    pub conv_outputs: Vec<[usize; 3]>,
    /// Width of the flattened tensor entering `fc1`.
    pub flatten: usize,
    pub fc1_out: usize,
    pub lstm_units: Option<usize>,
    pub classes: usize,
}

impl ArchSpec {
    /// Width-scaled family with 20 classes over two-channel 64×64 frames.
    pub fn new(family: Family, width: WidthScale) -> Self {
        ArchSpec {
            family,
            width,
            class_count: DEFAULT_CLASSES,
            input_channels: InputMode::UpperBody.channels(),
            input_mode: InputMode::UpperBody,
            frame_size: DEFAULT_FRAME_SIZE,
        }
    }

    pub fn with_classes(mut self, class_count: usize) -> Self {
        self.class_count = class_count;
        self
    }

    pub fn with_input_mode(mut self, mode: InputMode) -> Self {
        self.input_mode = mode;
        self.input_channels = mode.channels();
        self
    }

    pub fn with_frame_size(mut self, frame_size: usize) -> Self {
        self.frame_size = frame_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_table().map(|_| ())
    }

    pub fn layer_table(&self) -> Result<LayerTable> {
        if self.class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        if self.input_channels != self.input_mode.channels() {
            return Err(Error::invalid(format!(
                "input mode {} needs {} channels, spec has {}",
                self.input_mode,
                self.input_mode.channels(),
                self.input_channels
            )));
        }
        if self.frame_size == 0 {
            return Err(Error::invalid("frame_size must be positive"));
        }
        let frames = match self.family {
            Family::BaselineCnn3d => CLIP_FRAMES,
            _ => CHUNK_FRAMES,
        };
        let fc1_out = self.width.apply(FEATURE_WIDTH)?;
        let lstm_units = if self.family.is_recurrent() {
            Some(self.width.apply(LSTM_UNITS)?)
        } else {
            None
        };
        let mut convs = Vec::new();
        let mut conv_outputs = Vec::new();
        let flatten = if self.family == Family::BaselineLstm {
            self.input_channels * frames * self.frame_size * self.frame_size
        } else {
            let mut dims = [frames, self.frame_size, self.frame_size];
            let mut in_ch = self.input_channels;
            for (i, &base) in CONV_CHANNELS.iter().enumerate() {
                let out_ch = self.width.apply(base)?;
                let mut geometry = if i % 2 == 0 {
                    ConvGeometry::down4()
                } else {
                    ConvGeometry::same3()
                };
                if self.family == Family::Joint && i == 4 {
                    // a 4-frame block only has room for two temporal halvings
                    geometry.kernel[0] = 3;
                    geometry.stride[0] = 1;
                }
                dims = geometry.output_dims(dims)?;
                convs.push(ConvLayer {
                    in_channels: in_ch,
                    out_channels: out_ch,
                    geometry,
                });
                conv_outputs.push(dims);
                in_ch = out_ch;
            }
            in_ch * dims.iter().product::<usize>()
        };
        Ok(LayerTable {
            convs,
            frames,
            conv_outputs,
            flatten,
            fc1_out,
            lstm_units,
            classes: self.class_count,
        })
    }

    /// Canonical `(name, shape)` list of trainable tensors.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let t = self.layer_table()?;
        let mut out = Vec::new();
        for (i, c) in t.convs.iter().enumerate() {
            let k = c.geometry.kernel;
            let l = i + 1;
            out.push((
                format!("conv{l}.weight"),
                vec![c.out_channels, c.in_channels, k[0], k[1], k[2]],
            ));
            out.push((format!("conv{l}.bias"), vec![c.out_channels]));
            out.push((format!("bn{l}.gamma"), vec![c.out_channels]));
            out.push((format!("bn{l}.beta"), vec![c.out_channels]));
        }
        out.push(("fc1.weight".into(), vec![t.fc1_out, t.flatten]));
        out.push(("fc1.bias".into(), vec![t.fc1_out]));
        let head_in = match t.lstm_units {
            Some(h) => {
                out.push(("lstm.w_ih".into(), vec![4 * h, t.fc1_out]));
                out.push(("lstm.w_hh".into(), vec![4 * h, h]));
                out.push(("lstm.bias".into(), vec![4 * h]));
                h
            }
            None => t.fc1_out,
        };
        out.push(("fc2.weight".into(), vec![t.classes, head_in]));
        out.push(("fc2.bias".into(), vec![t.classes]));
        Ok(out)
    }

    /// Canonical `(name, shape)` list of batch-norm running statistics.
    pub fn buffer_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let t = self.layer_table()?;
        Ok(t.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("bn{}.running_mean", i + 1), vec![c.out_channels]),
                    (format!("bn{}.running_var", i + 1), vec![c.out_channels]),
                ]
            })
            .collect())
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }

    /// Converts raw videos (C×T×S×S) into this family's model input.
    pub fn prepare<T: Scalar>(&self, videos: &[Tensor<T>]) -> Result<ModelInput<T>> {
        if videos.is_empty() {
            return Err(Error::Empty("no videos in batch".into()));
        }
        for v in videos {
            let s = v.shape();
            if s.len() != 4 || s[0] != self.input_channels || s[2] != self.frame_size || s[3] != self.frame_size {
                return Err(Error::shape(format!(
                    "video {s:?} does not match {}×T×{}×{}",
                    self.input_channels, self.frame_size, self.frame_size
                )));
            }
        }
        let frame = self.input_channels * self.frame_size * self.frame_size;
        match self.family {
            Family::BaselineCnn3d => {
                let mut data = Vec::with_capacity(videos.len() * frame * CLIP_FRAMES);
                for v in videos {
                    data.extend_from_slice(center_window(v, CLIP_FRAMES)?.data());
                }
                Ok(ModelInput::Clips(Tensor::new(
                    vec![
                        videos.len(),
                        self.input_channels,
                        CLIP_FRAMES,
                        self.frame_size,
                        self.frame_size,
                    ],
                    data,
                )?))
            }
            _ => {
                let mut data = Vec::new();
                let mut lengths = Vec::with_capacity(videos.len());
                for v in videos {
                    let blocks = chunk_blocks(v, CHUNK_FRAMES)?;
                    lengths.push(blocks.len());
                    for b in blocks {
                        data.extend_from_slice(b.data());
                    }
                }
                let total = lengths.iter().sum();
                Ok(ModelInput::Blocks {
                    blocks: Tensor::new(
                        vec![
                            total,
                            self.input_channels,
                            CHUNK_FRAMES,
                            self.frame_size,
                            self.frame_size,
                        ],
                        data,
                    )?,
                    lengths,
                })
            }
        }
    }
}

/// Batched model input.
#[derive(Clone, Debug)]
pub enum ModelInput<T: Scalar = f32> {
    /// N×C×32×S×S windows for the 3D-CNN.
    Clips(Tensor<T>),
    /// All 4-frame blocks of all videos stacked (B×C×4×S×S) with per-video block counts.
    Blocks { blocks: Tensor<T>, lengths: Vec<usize> },
}

impl<T: Scalar> ModelInput<T> {
    pub fn batch_len(&self) -> usize {
        match self {
            ModelInput::Clips(t) => t.shape()[0],
            ModelInput::Blocks { lengths, .. } => lengths.len(),
        }
    }
}

/// Trainable tensors and batch-norm statistics of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: ArchSpec,
    pub params: IndexMap<String, Tensor<f32>>,
    pub buffers: IndexMap<String, Tensor<f32>>,
}

/// Randomly initialized model; identical for identical `(spec, seed)`.
pub fn build_model(spec: ArchSpec, seed: u64) -> Result<ModelParams> {
    let shapes = spec.param_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::new();
    for (name, shape) in shapes {
        let t = match name.rsplit_once('.').map(|(_, k)| k) {
            Some("weight") | Some("w_ih") | Some("w_hh") => {
                let fan_in = shape[1..].iter().product();
                nn::init_uniform(shape, fan_in, &mut rng)?
            }
            Some("gamma") => Tensor::ones(shape)?,
            Some("bias") if name.starts_with("lstm") => nn::lstm_bias_init(shape[0] / 4)?,
            _ => Tensor::zeros(shape)?,
        };
        params.insert(name, t);
    }
    let mut buffers = IndexMap::new();
    for (name, shape) in spec.buffer_shapes()? {
        let t = if name.ends_with("running_var") {
            Tensor::ones(shape)?
        } else {
            Tensor::zeros(shape)?
        };
        buffers.insert(name, t);
    }
    Ok(ModelParams { spec, params, buffers })
}

/// Parameters bound to a tape for one forward pass.
pub struct BoundParams<T: Scalar> {
    vars: IndexMap<String, Var>,
    running: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> BoundParams<T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }
}

pub struct ForwardOutput<T: Scalar> {
    /// N×classes
    pub logits: Var,
    /// Batch statistics per BN layer in train mode (empty in eval mode).
    pub bn_stats: Vec<BatchStats<T>>,
}

impl ModelParams {
    /// Assembles a model from named tensors, requiring exactly the canonical
    /// name set and shapes of `spec`.
    pub fn from_named(spec: ArchSpec, tensors: impl IntoIterator<Item = (String, Tensor<f32>)>) -> Result<Self> {
        let mut given: IndexMap<String, Tensor<f32>> = tensors.into_iter().collect();
        let mut take = |shapes: Vec<(String, Vec<usize>)>| -> Result<IndexMap<String, Tensor<f32>>> {
            let mut out = IndexMap::new();
            for (name, shape) in shapes {
                let t = given
                    .shift_remove(&name)
                    .ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                out.insert(name, t);
            }
            Ok(out)
        };
        let params = take(spec.param_shapes()?)?;
        let buffers = take(spec.buffer_shapes()?)?;
        if let Some(extra) = given.keys().next() {
            return Err(Error::invalid(format!("unexpected tensor {extra}")));
        }
        Ok(ModelParams { spec, params, buffers })
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Params then buffers, in canonical order.
    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.params.iter().chain(self.buffers.iter())
    }

    /// Registers parameters on `tape` (as trainable leaves when `trainable`).
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundParams<T>> {
        let mut vars = IndexMap::new();
        for (name, t) in &self.params {
            let v = if trainable {
                tape.param(name, t.cast())
            } else {
                tape.constant(t.cast())
            };
            vars.insert(name.clone(), v);
        }
        Ok(BoundParams {
            vars,
            running: self.running_stats(),
        })
    }

    /// Binds variables the caller already registered, one per parameter in
    /// canonical order.
    pub fn bind_vars<T: Scalar>(&self, vars: &[Var]) -> Result<BoundParams<T>> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(BoundParams {
            vars: self.params.keys().cloned().zip(vars.iter().copied()).collect(),
            running: self.running_stats(),
        })
    }

    fn running_stats<T: Scalar>(&self) -> Vec<(Tensor<T>, Tensor<T>)> {
        (1..=self.buffers.len() / 2)
            .map(|l| {
                let m = &self.buffers[format!("bn{l}.running_mean").as_str()];
                let v = &self.buffers[format!("bn{l}.running_var").as_str()];
                (m.cast(), v.cast())
            })
            .collect()
    }

    /// Records a forward pass on `tape`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams<T>,
        input: &ModelInput<T>,
        mode: Mode,
    ) -> Result<ForwardOutput<T>> {
        forward_spec(&self.spec, tape, bound, input, mode)
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_stats(&mut self, stats: &[BatchStats<f32>]) {
        for (i, s) in stats.iter().enumerate() {
            let l = i + 1;
            let mean_key = format!("bn{l}.running_mean");
            let var_key = format!("bn{l}.running_var");
            let mut mean = self.buffers[mean_key.as_str()].clone();
            let mut var = self.buffers[var_key.as_str()].clone();
            nn::update_running_stats(&mut mean, &mut var, s, BN_MOMENTUM);
            self.buffers[mean_key.as_str()] = mean;
            self.buffers[var_key.as_str()] = var;
        }
    }

    /// Eval-mode logits (N×classes) for a batch of videos.
    pub fn logits(&self, videos: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let input = self.spec.prepare(videos)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &bound, &input, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Eval-mode logits over many videos, `batch` at a time; batches may run
    /// concurrently and are concatenated in order.
    pub fn logits_batched(&self, videos: &[Tensor<f32>], batch: usize, par: Parallelism) -> Result<Vec<Tensor<f32>>> {
        let batch = batch.max(1);
        let chunks: Vec<&[Tensor<f32>]> = videos.chunks(batch).collect();
        let results = map_range(par, chunks.len(), |i| self.logits(chunks[i]));
        let mut rows = Vec::with_capacity(videos.len());
        for r in results {
            let t = r?;
            let c = t.shape()[1];
            for i in 0..t.shape()[0] {
                rows.push(Tensor::new(vec![c], t.row(i).to_vec())?);
            }
        }
        Ok(rows)
    }
}

fn bn_mode<T: Scalar>(bound: &BoundParams<T>, layer: usize, mode: Mode) -> BnMode<'_, T> {
    match mode {
        Mode::Train => BnMode::Train,
        Mode::Eval => BnMode::Eval {
            running_mean: &bound.running[layer].0,
            running_var: &bound.running[layer].1,
        },
    }
}

fn conv_stack<T: Scalar>(
    table: &LayerTable,
    tape: &mut Tape<T>,
    bound: &BoundParams<T>,
    mut x: Var,
    mode: Mode,
    stats: &mut Vec<BatchStats<T>>,
) -> Result<Var> {
    for (i, layer) in table.convs.iter().enumerate() {
        let l = i + 1;
        let w = bound.var(&format!("conv{l}.weight"))?;
        let b = bound.var(&format!("conv{l}.bias"))?;
        let y = tape.conv3d(x, w, b, layer.geometry)?;
        let g = bound.var(&format!("bn{l}.gamma"))?;
        let bt = bound.var(&format!("bn{l}.beta"))?;
        let (z, s) = tape.batch_norm(y, g, bt, BN_EPSILON, bn_mode(bound, i, mode))?;
        stats.extend(s);
        x = tape.relu(z)?;
    }
    Ok(x)
}

fn forward_spec<T: Scalar>(
    spec: &ArchSpec,
    tape: &mut Tape<T>,
    bound: &BoundParams<T>,
    input: &ModelInput<T>,
    mode: Mode,
) -> Result<ForwardOutput<T>> {
    let table = spec.layer_table()?;
    let mut stats = Vec::new();
    let fc = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var> {
        let w = bound.var(&format!("{name}.weight"))?;
        let b = bound.var(&format!("{name}.bias"))?;
        tape.linear(x, w, b)
    };

    let logits = match (spec.family, input) {
        (Family::BaselineCnn3d, ModelInput::Clips(clips)) => {
            let n = clips.shape()[0];
            let x = tape.constant(clips.clone());
            let h = conv_stack(&table, tape, bound, x, mode, &mut stats)?;
            let flat = tape.reshape(h, vec![n, table.flatten])?;
            let f1 = fc(tape, flat, "fc1")?;
            let a1 = tape.relu(f1)?;
            fc(tape, a1, "fc2")?
        }
        (Family::BaselineLstm | Family::Joint, ModelInput::Blocks { blocks, lengths }) => {
            let total = blocks.shape()[0];
            let x = tape.constant(blocks.clone());
            let enc = if spec.family == Family::Joint {
                conv_stack(&table, tape, bound, x, mode, &mut stats)?
            } else {
                x
            };
            let flat = tape.reshape(enc, vec![total, table.flatten])?;
            let f1 = fc(tape, flat, "fc1")?;
            let features = tape.relu(f1)?;
            let units = table.lstm_units.expect("recurrent family");
            let (w_ih, w_hh, b) = (
                bound.var("lstm.w_ih")?,
                bound.var("lstm.w_hh")?,
                bound.var("lstm.bias")?,
            );
            let mut finals = Vec::with_capacity(lengths.len());
            let mut offset = 0;
            for &len in lengths {
                let mut state = None;
                for step in 0..len {
                    let xt = tape.narrow_rows(features, offset + step, 1)?;
                    state = Some(tape.lstm_cell(xt, state, w_ih, w_hh, b)?);
                }
                offset += len;
                let state = state.ok_or_else(|| Error::Empty("video with zero blocks".into()))?;
                finals.push(tape.slice_cols(state, 0, units)?);
            }
            let hidden = tape.concat_rows(&finals)?;
            fc(tape, hidden, "fc2")?
        }
        _ => {
            return Err(Error::invalid(format!(
                "input kind does not match family {}",
                spec.family
            )))
        }
    };
    Ok(ForwardOutput {
        logits,
        bn_stats: stats,
    })
}

fn single_logits(model: &ModelParams, input: ModelInput<f32>, mode: Mode) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let out = model.forward(&mut tape, &bound, &input, mode)?;
    let l = tape.value(out.logits);
    Tensor::new(vec![l.len()], l.data().to_vec())
}

fn expect_family(model: &ModelParams, family: Family) -> Result<()> {
    if model.spec.family != family {
        return Err(Error::invalid(format!(
            "model is {}, expected {family}",
            model.spec.family
        )));
    }
    Ok(())
}

/// Logits of the 3D-CNN for one C×32×S×S clip. In train mode batch
/// statistics of the clip are used and then discarded.
pub fn forward_baseline_cnn(model: &ModelParams, clip: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
    expect_family(model, Family::BaselineCnn3d)?;
    let s = &model.spec;
    let want = [s.input_channels, CLIP_FRAMES, s.frame_size, s.frame_size];
    if clip.shape() != want {
        return Err(Error::shape(format!("clip {:?} must be {want:?}", clip.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&want);
    single_logits(model, ModelInput::Clips(clip.clone().reshape(shape)?), mode)
}

/// Logits of the baseline LSTM for one variable-length video.
pub fn forward_baseline_lstm(model: &ModelParams, video: &Tensor<f32>) -> Result<Tensor<f32>> {
    expect_family(model, Family::BaselineLstm)?;
    let input = model.spec.prepare(std::slice::from_ref(video))?;
    single_logits(model, input, Mode::Eval)
}

/// Logits of the joint model for one variable-length video.
pub fn forward_joint(model: &ModelParams, video: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
    expect_family(model, Family::Joint)?;
    let input = model.spec.prepare(std::slice::from_ref(video))?;
    single_logits(model, input, mode)
}

/// Mean hard-label cross-entropy of a batch, recorded on `tape`.
pub fn classification_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, &Targets::Classes(labels.to_vec()), T::one())
}
