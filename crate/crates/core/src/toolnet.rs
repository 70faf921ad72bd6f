//! The forward model f(s_current, t, u) → s_predicted: twin convolutional
//! encoders for the task and tool images, concatenation with the trajectory,
//! a fully connected trunk, and a deconvolutional decoder. Also training and
//! checkpoint I/O.

use std::fs;
use std::path::Path;

use nn::{Adam, AdamConfig, BatchNormMode, BnRunning, ConvGeom, NnError, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EpisodeRecord, ToolTrajectory};
use crate::error::{io_err, Error, Result};
use crate::imgcore::{add_noise_to_tool, blur, BinaryImage, GrayImage};

const KERNEL: usize = 3;
/// Initial output intensity; blurred task images are mostly background.
pub const OUTPUT_PRIOR: f64 = 0.03;

/// Layer widths. The standard network halves 64×64 inputs five times down to
/// 64×2×2 = 256 encoder features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_joints: usize,
    pub image_size: usize,
    /// Encoder channel plan starting with the single input channel; the
    /// decoder mirrors it.
    pub channels: Vec<usize>,
    /// Width each encoder's features are compressed to.
    pub compress: usize,
    pub trunk_hidden: Vec<usize>,
}

impl Architecture {
    pub fn standard(n_joints: usize) -> Self {
        Self {
            n_joints,
            image_size: 64,
            channels: vec![1, 4, 8, 16, 32, 64],
            compress: 128,
            trunk_hidden: vec![128, 128, 128],
        }
    }

    /// Small variant for finite-difference checks.
    pub fn tiny(n_joints: usize) -> Self {
        Self {
            n_joints,
            image_size: 16,
            channels: vec![1, 2, 4],
            compress: 8,
            trunk_hidden: vec![8],
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn bottleneck(&self) -> usize {
        self.image_size >> self.stages()
    }

    pub fn encoder_features(&self) -> usize {
        self.channels[self.stages()] * self.bottleneck() * self.bottleneck()
    }

    pub fn trunk_input(&self) -> usize {
        2 * self.compress + 2 * self.n_joints
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Architecture(m.to_string()));
        if self.n_joints == 0 {
            return bad("n_joints must be at least 1");
        }
        if self.channels.len() < 2 || self.channels[0] != 1 || self.channels.contains(&0) {
            return bad("channel plan must start at 1 and have at least one stage");
        }
        if self.stages() >= usize::BITS as usize || self.bottleneck() == 0 || self.bottleneck() << self.stages() != self.image_size {
            return bad("image size must be a multiple of 2^stages");
        }
        if self.compress == 0 || self.trunk_hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    /// Names and shapes of all learnable tensors, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.channels;
        let s = self.stages();
        let mut out = Vec::new();
        for enc in ["enc_s", "enc_t"] {
            for i in 0..s {
                out.push((format!("{enc}.{i}.w"), vec![c[i + 1], c[i], KERNEL, KERNEL]));
                out.push((format!("{enc}.{i}.b"), vec![c[i + 1]]));
                out.push((format!("{enc}.{i}.gamma"), vec![c[i + 1]]));
                out.push((format!("{enc}.{i}.beta"), vec![c[i + 1]]));
            }
        }
        for comp in ["comp_s", "comp_t"] {
            out.push((format!("{comp}.w"), vec![self.compress, self.encoder_features()]));
            out.push((format!("{comp}.b"), vec![self.compress]));
        }
        for (i, (a, b)) in self.trunk_widths().into_iter().enumerate() {
            out.push((format!("trunk.{i}.w"), vec![b, a]));
            out.push((format!("trunk.{i}.b"), vec![b]));
        }
        for i in 0..s {
            let (cin, cout) = (c[s - i], c[s - i - 1]);
            out.push((format!("dec.{i}.w"), vec![cin, cout, KERNEL, KERNEL]));
            out.push((format!("dec.{i}.b"), vec![cout]));
            if i + 1 < s {
                out.push((format!("dec.{i}.gamma"), vec![cout]));
                out.push((format!("dec.{i}.beta"), vec![cout]));
            }
        }
        out
    }

    /// Names and channel counts of the batch-norm layers, in storage order.
    pub fn bn_layout(&self) -> Vec<(String, usize)> {
        let c = &self.channels;
        let s = self.stages();
        let mut out = Vec::new();
        for enc in ["enc_s", "enc_t"] {
            for i in 0..s {
                out.push((format!("{enc}.{i}"), c[i + 1]));
            }
        }
        for i in 0..s - 1 {
            out.push((format!("dec.{i}"), c[s - i - 1]));
        }
        out
    }

    fn trunk_widths(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.trunk_input()];
        widths.extend(&self.trunk_hidden);
        widths.push(self.encoder_features());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// All weights and batch-norm statistics of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolNetParams<T = f32> {
    pub arch: Architecture,
    pub params: Vec<Tensor<T>>,
    pub running: Vec<BnRunning<T>>,
}

impl<T: Scalar> ToolNetParams<T> {
    /// He-uniform weights, zero biases, unit BN scale.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let output_bias = format!("dec.{}.b", arch.stages() - 1);
        let params = arch
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".w") {
                    let fan_in = if name.starts_with("dec.") {
                        shape[0] * shape[2] * shape[3]
                    } else {
                        shape[1..].iter().product()
                    };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound)))
                } else if name.ends_with(".gamma") {
                    Tensor::full(&shape, T::one())
                } else if name == output_bias {
                    // start the sigmoid near the background level
                    let logit = (OUTPUT_PRIOR / (1.0 - OUTPUT_PRIOR)).ln();
                    Tensor::full(&shape, T::lit(logit))
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        let running = arch.bn_layout().into_iter().map(|(_, c)| BnRunning::new(c)).collect();
        Ok(Self { arch, params, running })
    }

    pub fn cast<U: Scalar>(&self) -> ToolNetParams<U> {
        ToolNetParams {
            arch: self.arch.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self.running.iter().map(BnRunning::cast).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}

/// Builds the standard network for `n_joints`.
pub fn build(n_joints: usize, seed: u64) -> Result<ToolNetParams<f32>> {
    ToolNetParams::init(Architecture::standard(n_joints), seed)
}

/// Which leaves of the graph receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradFlags {
    pub params: bool,
    pub s: bool,
    pub t: bool,
    pub u: bool,
}

impl GradFlags {
    pub const NONE: Self = Self { params: false, s: false, t: false, u: false };
    pub const PARAMS: Self = Self { params: true, s: false, t: false, u: false };
    pub const TOOL_AND_TRAJECTORY: Self = Self { params: false, s: false, t: true, u: true };
}

/// Handles into a recorded forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    /// `[n, 1, size, size]` in (0, 1).
    pub output: Var,
    pub params: Vec<Var>,
    pub s: Var,
    pub t: Var,
    pub u: Var,
    /// Updated running statistics (train mode only).
    pub running: Vec<BnRunning<T>>,
}

fn leaf<T: Scalar>(tape: &mut Tape<T>, value: Tensor<T>, grad: bool) -> Var {
    if grad {
        tape.param(value)
    } else {
        tape.constant(value)
    }
}

/// Records the forward pass on `tape`. `s` and `t` are `[n, 1, size, size]`,
/// `u` is `[n, 2·n_joints]`.
pub fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    net: &ToolNetParams<T>,
    s: Tensor<T>,
    t: Tensor<T>,
    u: Tensor<T>,
    mode: BatchNormMode,
    flags: GradFlags,
) -> Result<Graph<T>> {
    let arch = &net.arch;
    let size = arch.image_size;
    let n = s.shape().first().copied().unwrap_or(0);
    for (name, x) in [("s", &s), ("t", &t)] {
        if x.shape() != [n, 1, size, size] {
            return Err(Error::Nn(NnError::Shape {
                op: "toolnet_forward",
                detail: format!("{name} has shape {:?}, expected [{n}, 1, {size}, {size}]", x.shape()),
            }));
        }
    }
    if u.shape() != [n, 2 * arch.n_joints] {
        return Err(Error::Nn(NnError::Shape {
            op: "toolnet_forward",
            detail: format!("u has shape {:?}, expected [{n}, {}]", u.shape(), 2 * arch.n_joints),
        }));
    }
    let params: Vec<Var> = net.params.iter().map(|p| leaf(tape, p.clone(), flags.params)).collect();
    let s = leaf(tape, s, flags.s);
    let t = leaf(tape, t, flags.t);
    let u = leaf(tape, u, flags.u);

    let stages = arch.stages();
    let mut p = params.iter().copied();
    let mut next = || p.next().expect("parameter layout matches the architecture");
    let mut bn_index = 0;
    let mut updated = Vec::new();
    let mut norm = |tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var| -> Result<Var> {
        let (y, upd) = tape.batch_norm(x, gamma, beta, &net.running[bn_index], mode)?;
        updated.extend(upd);
        bn_index += 1;
        Ok(tape.relu(y)?)
    };

    let mut encoded = Vec::with_capacity(2);
    for input in [s, t] {
        let mut x = input;
        for _ in 0..stages {
            let (w, b, g, be) = (next(), next(), next(), next());
            x = tape.conv2d(x, w, b, ConvGeom::HALVING)?;
            x = norm(tape, x, g, be)?;
        }
        encoded.push(tape.reshape(x, &[n, arch.encoder_features()])?);
    }
    let mut parts = Vec::with_capacity(3);
    for x in encoded {
        let (w, b) = (next(), next());
        let h = tape.linear(x, w, b)?;
        parts.push(tape.relu(h)?);
    }
    parts.push(u);
    let mut h = tape.concat(&parts)?;
    for _ in 0..arch.trunk_hidden.len() + 1 {
        let (w, b) = (next(), next());
        h = tape.linear(h, w, b)?;
        h = tape.relu(h)?;
    }
    let side = arch.bottleneck();
    let mut x = tape.reshape(h, &[n, arch.channels[stages], side, side])?;
    for i in 0..stages {
        let (w, b) = (next(), next());
        x = tape.deconv2d(x, w, b, ConvGeom::HALVING)?;
        if i + 1 < stages {
            let (g, be) = (next(), next());
            x = norm(tape, x, g, be)?;
        } else {
            x = tape.sigmoid(x)?;
        }
    }
    Ok(Graph {
        output: x,
        params,
        s,
        t,
        u,
        running: updated,
    })
}

/// Stacks binary images into `[n, 1, h, w]`.
pub fn image_batch<T: Scalar>(imgs: &[&BinaryImage]) -> Tensor<T> {
    let (h, w) = imgs.first().map_or((0, 0), |i| (i.height(), i.width()));
    let data = imgs
        .iter()
        .flat_map(|i| i.pixels().iter().map(|&p| if p != 0 { T::one() } else { T::zero() }))
        .collect();
    Tensor::new(vec![imgs.len(), 1, h, w], data).expect("images share a size")
}

pub fn gray_batch<T: Scalar>(imgs: &[&GrayImage]) -> Tensor<T> {
    let (h, w) = imgs.first().map_or((0, 0), |i| (i.height, i.width));
    let data = imgs.iter().flat_map(|i| i.values.iter().map(|&v| T::lit(v))).collect();
    Tensor::new(vec![imgs.len(), 1, h, w], data).expect("images share a size")
}

pub fn trajectory_batch<T: Scalar>(us: &[&ToolTrajectory]) -> Tensor<T> {
    let width = us.first().map_or(0, |u| 2 * u.n_joints());
    let data = us.iter().flat_map(|u| u.to_vec().into_iter().map(T::lit)).collect();
    Tensor::new(vec![us.len(), width], data).expect("trajectories share a joint count")
}

/// Eval-mode prediction of the next task state.
pub fn predict<T: Scalar>(net: &ToolNetParams<T>, s: &BinaryImage, t: &BinaryImage, u: &ToolTrajectory) -> Result<GrayImage> {
    let mut tape = Tape::new();
    let g = forward_graph(
        &mut tape,
        net,
        image_batch(&[s]),
        image_batch(&[t]),
        trajectory_batch(&[u]),
        BatchNormMode::Eval,
        GradFlags::NONE,
    )?;
    let out = tape.value(g.output);
    Ok(GrayImage {
        width: s.width(),
        height: s.height(),
        values: out.data().iter().map(|v| v.as_f64()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub c_blur: f64,
    pub c_noise_add: usize,
    pub c_noise_del: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            c_blur: 0.2,
            c_noise_add: 30,
            c_noise_del: 30,
            batch: 100,
            epochs: 300,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config("training batch must be at least 2 (batch norm)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot taken at the end of the epoch with the lowest mean loss.
    pub best: ToolNetParams<f32>,
    pub best_epoch: usize,
    pub best_loss: f64,
    /// Mean batch loss of every epoch, in order.
    pub curve: Vec<f64>,
}

/// One optimizer step on a batch; returns the batch loss.
fn train_batch(
    net: &mut ToolNetParams<f32>,
    adam: &mut Adam<f32>,
    batch: &[&EpisodeRecord],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let noisy: Vec<BinaryImage> = batch
        .iter()
        .map(|r| add_noise_to_tool(&r.t, cfg.c_noise_add, cfg.c_noise_del, rng))
        .collect();
    let targets: Vec<GrayImage> = batch.iter().map(|r| blur(&r.s_final, cfg.c_blur)).collect();
    let s: Vec<&BinaryImage> = batch.iter().map(|r| &r.s_initial).collect();
    let t: Vec<&BinaryImage> = noisy.iter().collect();
    let u: Vec<&ToolTrajectory> = batch.iter().map(|r| &r.u).collect();
    let target: Vec<&GrayImage> = targets.iter().collect();

    let mut tape = Tape::new();
    let g = forward_graph(
        &mut tape,
        net,
        image_batch(&s),
        image_batch(&t),
        trajectory_batch(&u),
        BatchNormMode::Train,
        GradFlags::PARAMS,
    )?;
    let target = tape.constant(gray_batch(&target));
    let loss = tape.mse(g.output, target)?;
    let value = tape.value(loss).data()[0] as f64;
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor<f32>> = g
        .params
        .iter()
        .zip(&net.params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    adam.step(&mut net.params, &grads)?;
    net.running = g.running;
    Ok(value)
}

/// Trains with shuffled minibatches, fresh tool noise per visit and blurred
/// targets; keeps the parameters of the epoch with the lowest mean loss.
/// A trailing batch smaller than 2 is skipped (batch norm needs two samples).
pub fn train(
    net: ToolNetParams<f32>,
    data: &[EpisodeRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Config("training needs at least 2 records".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = net;
    let mut adam = Adam::new(cfg.adam(), &net.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ToolNetParams<f32>)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&EpisodeRecord> = chunk.iter().map(|&i| &data[i]).collect();
            let loss = match train_batch(&mut net, &mut adam, &batch, cfg, &mut rng) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(Error::Diverged { epoch, batch: bi, loss: l }),
                Err(Error::Nn(NnError::NonFinite { .. })) => {
                    return Err(Error::Diverged { epoch, batch: bi, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = sum / count as f64;
        curve.push(mean);
        on_epoch(epoch, mean);
        if best.as_ref().is_none_or(|(_, l, _)| mean < *l) {
            best = Some((epoch, mean, net.clone()));
        }
    }
    let (best_epoch, best_loss, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_loss,
        curve,
    })
}

/// Mean per-record MSE of an eval-mode net against blurred targets.
pub fn evaluate_loss(net: &ToolNetParams<f32>, data: &[EpisodeRecord], c_blur: f64, batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in data.chunks(batch.max(1)) {
        let s: Vec<&BinaryImage> = chunk.iter().map(|r| &r.s_initial).collect();
        let t: Vec<&BinaryImage> = chunk.iter().map(|r| &r.t).collect();
        let u: Vec<&ToolTrajectory> = chunk.iter().map(|r| &r.u).collect();
        let targets: Vec<GrayImage> = chunk.iter().map(|r| blur(&r.s_final, c_blur)).collect();
        let target: Vec<&GrayImage> = targets.iter().collect();
        let mut tape = Tape::new();
        let g = forward_graph(
            &mut tape,
            net,
            image_batch(&s),
            image_batch(&t),
            trajectory_batch(&u),
            BatchNormMode::Eval,
            GradFlags::NONE,
        )?;
        let target = tape.constant(gray_batch(&target));
        let loss = tape.mse(g.output, target)?;
        sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(sum / data.len().max(1) as f64)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TLNETCK1";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_u16(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u16).to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    put_u16(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u16(out, shape.len());
    for &d in shape {
        put_u32(out, d);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(net: &ToolNetParams<f32>) -> Vec<u8> {
    let arch = &net.arch;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u16(&mut out, CHECKPOINT_VERSION as usize);
    put_u16(&mut out, arch.n_joints);
    put_u32(&mut out, arch.image_size);
    put_u16(&mut out, arch.channels.len());
    for &c in &arch.channels {
        put_u32(&mut out, c);
    }
    put_u32(&mut out, arch.compress);
    put_u16(&mut out, arch.trunk_hidden.len());
    for &w in &arch.trunk_hidden {
        put_u32(&mut out, w);
    }
    let layout = arch.param_layout();
    let bn = arch.bn_layout();
    put_u32(&mut out, layout.len() + 2 * bn.len());
    for ((name, shape), p) in layout.iter().zip(&net.params) {
        put_blob(&mut out, name, shape, p.data().iter().copied());
    }
    for ((name, c), r) in bn.iter().zip(&net.running) {
        put_blob(&mut out, &format!("{name}.running_mean"), &[*c], r.mean.iter().copied());
        put_blob(&mut out, &format!("{name}.running_var"), &[*c], r.var.iter().copied());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    blob: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                what: "checkpoint",
                record: self.blob,
                offset: self.pos as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<usize> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]) as usize)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn format(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    /// Reads one blob, checking it against the expected name and shape.
    fn blob(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let len = self.u16()?;
        let found = String::from_utf8_lossy(self.take(len)?).into_owned();
        if found != name {
            return Err(Error::Architecture(format!("expected blob {name}, found {found}")));
        }
        let ndim = self.u16()?;
        let dims = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::Architecture(format!("blob {name} has shape {dims:?}, expected {shape:?}")));
        }
        let count: usize = shape.iter().product();
        let data = self.take(4 * count)?;
        let values: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(self.format(format!("blob {name} holds non-finite values")));
        }
        self.blob += 1;
        Ok(values)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToolNetParams<f32>> {
    let mut r = Reader { bytes, pos: 0, blob: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format { what: "checkpoint", offset: 0, detail: "bad magic".into() });
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format { what: "checkpoint", offset: 8, detail: format!("unsupported version {version}") });
    }
    let n_joints = r.u16()?;
    let image_size = r.u32()?;
    let nc = r.u16()?;
    let channels = (0..nc).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let compress = r.u32()?;
    let nt = r.u16()?;
    let trunk_hidden = (0..nt).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let arch = Architecture {
        n_joints,
        image_size,
        channels,
        compress,
        trunk_hidden,
    };
    arch.validate()?;
    let layout = arch.param_layout();
    let bn = arch.bn_layout();
    let blobs = r.u32()?;
    if blobs != layout.len() + 2 * bn.len() {
        return Err(Error::Architecture(format!("{blobs} blobs, expected {}", layout.len() + 2 * bn.len())));
    }
    let mut params = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let data = r.blob(name, shape)?;
        params.push(Tensor::new(shape.clone(), data)?);
    }
    let mut running = Vec::with_capacity(bn.len());
    for (name, c) in &bn {
        let mean = r.blob(&format!("{name}.running_mean"), &[*c])?;
        let var = r.blob(&format!("{name}.running_var"), &[*c])?;
        running.push(BnRunning { mean, var });
    }
    if r.pos != bytes.len() {
        return Err(r.format("trailing bytes"));
    }
    Ok(ToolNetParams { arch, params, running })
}

pub fn save_checkpoint(net: &ToolNetParams<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(net)).map_err(io_err(path))
}

/// Loads a checkpoint; with `n_joints` given, a mismatching network is rejected.
pub fn load_checkpoint(path: &Path, n_joints: Option<usize>) -> Result<ToolNetParams<f32>> {
    let net = decode_checkpoint(&fs::read(path).map_err(io_err(path))?)?;
    if let Some(n) = n_joints {
        if net.arch.n_joints != n {
            return Err(Error::Architecture(format!(
                "checkpoint was trained for {} joints, run uses {n}",
                net.arch.n_joints
            )));
        }
    }
    Ok(net)
}

/// Epoch loss curve as CSV.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{},{l:.9}\n", i + 1));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim2d::ToolTrajectory;

    fn random_image(size: usize, rng: &mut ChaCha8Rng) -> BinaryImage {
        let px = (0..size * size).map(|_| rng.random_bool(0.3) as u8).collect();
        BinaryImage::from_pixels(size, size, px).unwrap()
    }

    fn random_u(rng: &mut ChaCha8Rng) -> ToolTrajectory {
        ToolTrajectory::from_slice(&(0..4).map(|_| rng.random_range(-0.7..0.7)).collect::<Vec<_>>())
    }

    #[test]
    fn standard_widths() {
        let a = Architecture::standard(2);
        assert_eq!(a.encoder_features(), 256);
        assert_eq!(a.trunk_input(), 260);
        assert_eq!(a.bottleneck(), 2);
        let trunk: Vec<_> = a.param_layout().into_iter().filter(|(n, _)| n.starts_with("trunk") && n.ends_with(".w")).collect();
        let shapes: Vec<Vec<usize>> = trunk.into_iter().map(|(_, s)| s).collect();
        assert_eq!(shapes, vec![vec![128, 260], vec![128, 128], vec![128, 128], vec![256, 128]]);
        assert_eq!(a.bn_layout().len(), 14);
        assert!(Architecture::standard(0).validate().is_err());
        assert!(Architecture { image_size: 48, ..Architecture::standard(2) }.validate().is_err());
    }

    #[test]
    fn parameter_count_is_a_function_of_joint_count() {
        let a = build(2, 1).unwrap();
        let b = build(2, 2).unwrap();
        let c = build(3, 1).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(c.param_count(), a.param_count() + 2 * 128);
        assert_eq!(build(2, 1).unwrap(), a);
        assert_ne!(a, b);
    }

    #[test]
    fn forward_output_shape_and_range() {
        let net = build(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let out = predict(&net, &random_image(64, &mut rng), &random_image(64, &mut rng), &random_u(&mut rng)).unwrap();
            assert_eq!((out.width, out.height), (64, 64));
            assert!(out.values.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let bad = predict(&net, &random_image(32, &mut rng), &random_image(64, &mut rng), &random_u(&mut rng));
        assert!(bad.is_err());
    }

    /// Whole-network gradient check against central differences on the tiny
    /// variant, for inputs t and u and every parameter tensor.
    fn gradcheck_tiny(mode: BatchNormMode, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::tiny(2);
        let mut net: ToolNetParams<f64> = ToolNetParams::init(arch, seed).unwrap();
        for p in net.params.iter_mut() {
            for v in p.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        for r in net.running.iter_mut() {
            for (m, v) in r.mean.iter_mut().zip(r.var.iter_mut()) {
                *m = rng.random_range(-0.2..0.2);
                *v = rng.random_range(0.5..1.5);
            }
        }
        let n = 2;
        let s = Tensor::from_fn(&[n, 1, 16, 16], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let t = Tensor::from_fn(&[n, 1, 16, 16], |_| rng.random_range(0.0..1.0));
        let u = Tensor::from_fn(&[n, 4], |_| rng.random_range(-0.7..0.7));
        let target = Tensor::from_fn(&[n, 1, 16, 16], |_| rng.random_range(0.0..1.0));
        let flags = GradFlags { params: true, s: false, t: true, u: true };

        let loss_of = |net: &ToolNetParams<f64>, t: &Tensor<f64>, u: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let g = forward_graph(&mut tape, net, s.clone(), t.clone(), u.clone(), mode, GradFlags::NONE).unwrap();
            let tg = tape.constant(target.clone());
            let l = tape.mse(g.output, tg).unwrap();
            tape.value(l).data()[0]
        };
        let mut tape = Tape::new();
        let g = forward_graph(&mut tape, &net, s.clone(), t.clone(), u.clone(), mode, flags).unwrap();
        let tg = tape.constant(target.clone());
        let l = tape.mse(g.output, tg).unwrap();
        let grads = tape.backward(l).unwrap();

        let h = 1e-6;
        let check = |analytic: &[f64], numeric: &[f64], what: &str| {
            let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
            // conv biases feeding train-mode batch norm have an exactly zero
            // gradient; there only finite-difference round-off remains
            let rel = diff / scale.max(1e-12);
            assert!(rel <= 1e-4 || diff <= 1e-9, "{what}: rel err {rel} (seed {seed}, {mode:?})");
        };
        let numeric_input = |which: usize| -> Vec<f64> {
            let base = if which == 0 { t.clone() } else { u.clone() };
            (0..base.len())
                .map(|i| {
                    let (mut a, mut b) = (base.clone(), base.clone());
                    a.data_mut()[i] += h;
                    b.data_mut()[i] -= h;
                    let (la, lb) = if which == 0 {
                        (loss_of(&net, &a, &u), loss_of(&net, &b, &u))
                    } else {
                        (loss_of(&net, &t, &a), loss_of(&net, &t, &b))
                    };
                    (la - lb) / (2.0 * h)
                })
                .collect()
        };
        check(grads.get(g.t).unwrap().data(), &numeric_input(0), "dL/dt");
        check(grads.get(g.u).unwrap().data(), &numeric_input(1), "dL/du");
        let names = net.arch.param_layout();
        for k in 0..net.params.len() {
            let numeric: Vec<f64> = (0..net.params[k].len())
                .map(|i| {
                    let mut a = net.clone();
                    a.params[k].data_mut()[i] += h;
                    let mut b = net.clone();
                    b.params[k].data_mut()[i] -= h;
                    (loss_of(&a, &t, &u) - loss_of(&b, &t, &u)) / (2.0 * h)
                })
                .collect();
            check(grads.get(g.params[k]).unwrap().data(), &numeric, &names[k].0);
        }
        net.params.clear();
    }

    #[test]
    fn tiny_network_gradients_match_finite_differences() {
        for seed in 0..5 {
            gradcheck_tiny(BatchNormMode::Eval, seed);
            gradcheck_tiny(BatchNormMode::Train, seed);
        }
    }

    fn toy_records(count: usize, seed: u64) -> Vec<EpisodeRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let s = random_image(64, &mut rng);
                EpisodeRecord {
                    s_final: s.clone(),
                    s_initial: s,
                    t: random_image(64, &mut rng),
                    u: random_u(&mut rng),
                }
            })
            .collect()
    }

    #[test]
    fn one_epoch_smoke_and_determinism() {
        let data = toy_records(200, 5);
        let cfg = TrainConfig { epochs: 1, batch: 50, seed: 9, ..Default::default() };
        let a = train(build(2, 1).unwrap(), &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(a.curve.len(), 1);
        assert!(a.curve[0].is_finite());
        let b = train(build(2, 1).unwrap(), &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.best, b.best);
        assert!(a.best_loss <= a.curve[0]);
    }

    #[test]
    fn best_snapshot_has_minimal_loss() {
        let data = toy_records(40, 6);
        let cfg = TrainConfig { epochs: 4, batch: 20, seed: 1, ..Default::default() };
        let out = train(build(2, 2).unwrap(), &data, &cfg, |_, _| {}).unwrap();
        assert!(out.curve.iter().all(|&l| out.best_loss <= l));
        assert_eq!(out.curve[out.best_epoch], out.best_loss);
        assert!(train(build(2, 2).unwrap(), &data[..1], &cfg, |_, _| {}).is_err());
        assert!(train(build(2, 2).unwrap(), &data, &TrainConfig { batch: 1, ..cfg }, |_, _| {}).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let mut net = build(2, 7).unwrap();
        net.running[3].mean[1] = 0.25;
        net.running[3].var[1] = 2.5;
        let bytes = encode_checkpoint(&net);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, net);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (s, t, u) = (random_image(64, &mut rng), random_image(64, &mut rng), random_u(&mut rng));
        assert_eq!(predict(&net, &s, &t, &u).unwrap(), predict(&back, &s, &t, &u).unwrap());

        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { .. })));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n3.ckpt");
        save_checkpoint(&build(3, 1).unwrap(), &path).unwrap();
        assert!(matches!(load_checkpoint(&path, Some(2)), Err(Error::Architecture(_))));
        assert_eq!(load_checkpoint(&path, Some(3)).unwrap().arch.n_joints, 3);
    }

    #[test]
    fn loss_csv_format() {
        assert_eq!(loss_curve_csv(&[0.5, 0.25]), "epoch,mean_loss\n1,0.500000000\n2,0.250000000\n");
    }
}
