//! Classifier and generator architectures with split forward passes.
//!
//! Three architectures are registered:
//!
//! * `tiny_cnn`: four conv-BN-ReLU blocks, global average pooling and a
//!   linear head. Layer ids `block1` .. `block4`.
//! * `resnet_small`: a conv stem plus eight basic residual blocks. Layer ids
//!   `stem`, `res1` .. `res8`.
//! * `generator_cond`: class-conditional generator. A latent (128) and a
//!   label embedding are concatenated, projected to a low-resolution feature
//!   map and upsampled by two transposed-conv/BN/ReLU stages to the image
//!   size, squashed to `[0, 1]` with a sigmoid.
//!
//! Classifier forwards can be cut after any layer ([`Model::forward_with_probe`])
//! and resumed from that layer's activation ([`Model::resume_from_layer`]).

pub(crate) mod checkpoint;
mod teacher;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use teacher::{train_robust_teacher, EpochLog, TeacherTrainConfig};

use ferd_autograd::{channel_means, channel_vars, Graph, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FerdError, Result};
use crate::rng::{self, Rng};

pub const LATENT_DIM: usize = 128;
pub const LABEL_EMBED_DIM: usize = 32;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const TINY_WIDTHS: [usize; 4] = [16, 32, 32, 64];
const TINY_STRIDES: [usize; 4] = [1, 2, 1, 2];
const RES_WIDTHS: [usize; 8] = [16, 16, 32, 32, 64, 64, 64, 64];
const RES_STRIDES: [usize; 8] = [1, 1, 2, 1, 2, 1, 1, 1];
const GEN_WIDTHS: [usize; 3] = [64, 32, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    TinyCnn,
    ResnetSmall,
    GeneratorCond,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::TinyCnn, Arch::ResnetSmall, Arch::GeneratorCond];

    pub fn id(self) -> &'static str {
        match self {
            Arch::TinyCnn => "tiny_cnn",
            Arch::ResnetSmall => "resnet_small",
            Arch::GeneratorCond => "generator_cond",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.id() == id)
            .ok_or_else(|| FerdError::Config(format!("unknown arch_id `{id}` (expected tiny_cnn, resnet_small or generator_cond)")))
    }

    pub fn is_classifier(self) -> bool {
        !matches!(self, Arch::GeneratorCond)
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// BN behaviour: `Train` normalizes with batch statistics, `Eval` with the
/// stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
struct BnLayer {
    name: String,
    gamma: usize,
    beta: usize,
    running_mean: Tensor,
    running_var: Tensor,
}

/// Stored statistics of one BatchNorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStatistics {
    pub layer_id: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Intermediate activation captured by [`Model::forward_with_probe`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerProbe {
    pub layer_id: String,
    pub activation: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    w: usize,
    bn: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
enum Stage {
    Plain(ConvBn),
    Residual {
        a: ConvBn,
        b: ConvBn,
        shortcut: Option<ConvBn>,
    },
}

#[derive(Clone, Debug)]
struct StageInfo {
    id: String,
    stage: Stage,
    /// Output (channels, height, width).
    out: [usize; 3],
}

#[derive(Clone, Debug)]
struct ClassifierLayout {
    stages: Vec<StageInfo>,
    fc_w: usize,
    fc_b: usize,
}

#[derive(Clone, Debug)]
struct GeneratorLayout {
    embed: usize,
    fc_w: usize,
    fc_b: usize,
    bn0: usize,
    ups: Vec<(usize, usize)>,
    out_w: usize,
    out_b: usize,
    init: [usize; 3],
}

#[derive(Clone, Debug)]
enum Layout {
    Classifier(ClassifierLayout),
    Generator(GeneratorLayout),
}

/// A classifier or generator with its parameters, BN buffers and mode.
#[derive(Clone, Debug)]
pub struct Model {
    arch: Arch,
    num_classes: usize,
    input_shape: [usize; 3],
    params: Vec<Param>,
    bn: Vec<BnLayer>,
    layout: Layout,
    mode: Mode,
}

/// Parameter leaves of one model on a graph, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    pub mode: Mode,
    /// Record differentiable batch mean/variance at every BN input, even in
    /// eval mode.
    pub collect_bn: bool,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, collect_bn: false }
    }

    pub fn train() -> Self {
        Self { mode: Mode::Train, collect_bn: false }
    }

    pub fn with_bn_taps(mut self) -> Self {
        self.collect_bn = true;
        self
    }
}

/// Batch statistics observed at a BN layer's input during a forward.
#[derive(Clone, Copy, Debug)]
pub struct BnTap {
    pub layer: usize,
    pub batch_mean: Var,
    pub batch_var: Var,
    pub count: usize,
}

struct Builder {
    params: Vec<Param>,
    bn: Vec<BnLayer>,
    rng: Rng,
}

impl Builder {
    fn add(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        rng::normal_tensor(&mut self.rng, shape).map(|v| v * std)
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> usize {
        let w = self.normal(&[cout, cin, k, k], (2.0 / (cin * k * k) as f64).sqrt());
        self.add(format!("{name}.weight"), w)
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> usize {
        let w = self.normal(&[cin, cout, k, k], (2.0 / (cin * k * k) as f64).sqrt() * 2.0);
        self.add(format!("{name}.weight"), w)
    }

    fn linear(&mut self, name: &str, fout: usize, fin: usize) -> (usize, usize) {
        let bound = 1.0 / (fin as f64).sqrt();
        let w = rng::uniform_tensor(&mut self.rng, &[fout, fin], -bound, bound);
        let b = Tensor::from_fn(&[fout], |_| self.rng.random_range(-bound..=bound));
        (self.add(format!("{name}.weight"), w), self.add(format!("{name}.bias"), b))
    }

    fn batch_norm(&mut self, name: &str, ch: usize) -> usize {
        let gamma = self.add(format!("{name}.gamma"), Tensor::ones(&[ch]));
        let beta = self.add(format!("{name}.beta"), Tensor::zeros(&[ch]));
        self.bn.push(BnLayer {
            name: name.to_string(),
            gamma,
            beta,
            running_mean: Tensor::zeros(&[ch]),
            running_var: Tensor::ones(&[ch]),
        });
        self.bn.len() - 1
    }

    fn conv_bn(&mut self, name: &str, cout: usize, cin: usize, k: usize, stride: usize) -> ConvBn {
        let w = self.conv(&format!("{name}.conv"), cout, cin, k);
        let bn = self.batch_norm(&format!("{name}.bn"), cout);
        ConvBn { w, bn, stride, pad: k / 2 }
    }
}

fn conv_out(size: usize, stride: usize) -> usize {
    // 3x3 kernels with padding 1 (and 1x1 with padding 0) both give this.
    (size - 1) / stride + 1
}

/// Build a freshly initialized model. Initialization is a pure function of
/// `(arch, num_classes, input_shape, seed)`.
pub fn build_model(arch: Arch, num_classes: usize, input_shape: [usize; 3], seed: u64) -> Result<Model> {
    if num_classes < 2 {
        return Err(FerdError::Config(format!("num_classes must be >= 2, got {num_classes}")));
    }
    let [c, h, w] = input_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(FerdError::Config(format!("degenerate input_shape {input_shape:?}")));
    }
    let mut b = Builder {
        params: Vec::new(),
        bn: Vec::new(),
        rng: rng::derive(seed, &[0x6d6f_64656c, arch as u64]),
    };
    let layout = match arch {
        Arch::TinyCnn => {
            let mut stages = Vec::new();
            let (mut cin, mut hh, mut ww) = (c, h, w);
            for (i, (&width, &stride)) in TINY_WIDTHS.iter().zip(&TINY_STRIDES).enumerate() {
                let id = format!("block{}", i + 1);
                let cb = b.conv_bn(&id, width, cin, 3, stride);
                hh = conv_out(hh, stride);
                ww = conv_out(ww, stride);
                cin = width;
                stages.push(StageInfo { id, stage: Stage::Plain(cb), out: [cin, hh, ww] });
            }
            let (fc_w, fc_b) = b.linear("fc", num_classes, cin);
            Layout::Classifier(ClassifierLayout { stages, fc_w, fc_b })
        }
        Arch::ResnetSmall => {
            let mut stages = Vec::new();
            let stem = b.conv_bn("stem", RES_WIDTHS[0], c, 3, 1);
            let (mut cin, mut hh, mut ww) = (RES_WIDTHS[0], h, w);
            stages.push(StageInfo { id: "stem".into(), stage: Stage::Plain(stem), out: [cin, hh, ww] });
            for (i, (&width, &stride)) in RES_WIDTHS.iter().zip(&RES_STRIDES).enumerate() {
                let id = format!("res{}", i + 1);
                let a = b.conv_bn(&format!("{id}.a"), width, cin, 3, stride);
                let bb = b.conv_bn(&format!("{id}.b"), width, width, 3, 1);
                let shortcut = (stride != 1 || cin != width).then(|| b.conv_bn(&format!("{id}.short"), width, cin, 1, stride));
                hh = conv_out(hh, stride);
                ww = conv_out(ww, stride);
                cin = width;
                stages.push(StageInfo { id, stage: Stage::Residual { a, b: bb, shortcut }, out: [cin, hh, ww] });
            }
            let (fc_w, fc_b) = b.linear("fc", num_classes, cin);
            Layout::Classifier(ClassifierLayout { stages, fc_w, fc_b })
        }
        Arch::GeneratorCond => {
            if h % 4 != 0 || w % 4 != 0 {
                return Err(FerdError::Config(format!(
                    "generator_cond needs image sides divisible by 4, got {h}x{w}"
                )));
            }
            let table = rng::normal_tensor(&mut b.rng, &[num_classes, LABEL_EMBED_DIM]);
            let embed = b.add("embed.weight".into(), table);
            let init = [GEN_WIDTHS[0], h / 4, w / 4];
            let (fc_w, fc_b) = b.linear("fc", init.iter().product(), LATENT_DIM + LABEL_EMBED_DIM);
            let bn0 = b.batch_norm("bn0", GEN_WIDTHS[0]);
            let mut ups = Vec::new();
            for i in 0..2 {
                let name = format!("up{}", i + 1);
                let wt = b.conv_t(&format!("{name}.deconv"), GEN_WIDTHS[i], GEN_WIDTHS[i + 1], 4);
                let bn = b.batch_norm(&format!("{name}.bn"), GEN_WIDTHS[i + 1]);
                ups.push((wt, bn));
            }
            let out_w = b.conv("out", c, GEN_WIDTHS[2], 3);
            let out_b = b.add("out.bias".into(), Tensor::zeros(&[c]));
            Layout::Generator(GeneratorLayout { embed, fc_w, fc_b, bn0, ups, out_w, out_b, init })
        }
    };
    Ok(Model {
        arch,
        num_classes,
        input_shape,
        params: b.params,
        bn: b.bn,
        layout,
        mode: Mode::Train,
    })
}

impl Model {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(channels, height, width)` of classifier inputs / generator outputs.
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// True when parameters and BN buffers are bit-identical.
    pub fn same_state(&self, other: &Model) -> bool {
        self.arch == other.arch
            && self.params == other.params
            && self.bn.iter().zip(&other.bn).all(|(a, b)| {
                a.running_mean == b.running_mean && a.running_var == b.running_var
            })
    }

    fn classifier(&self) -> Result<&ClassifierLayout> {
        match &self.layout {
            Layout::Classifier(c) => Ok(c),
            Layout::Generator(_) => Err(FerdError::Config(format!("{} is not a classifier", self.arch))),
        }
    }

    fn generator(&self) -> Result<&GeneratorLayout> {
        match &self.layout {
            Layout::Generator(g) => Ok(g),
            Layout::Classifier(_) => Err(FerdError::Config(format!("{} is not a generator", self.arch))),
        }
    }

    /// Probe-able layer ids, input to output.
    pub fn layer_ids(&self) -> Vec<String> {
        match &self.layout {
            Layout::Classifier(c) => c.stages.iter().map(|s| s.id.clone()).collect(),
            Layout::Generator(_) => Vec::new(),
        }
    }

    /// Output of the final conv block before global pooling.
    pub fn last_conv_layer(&self) -> Result<String> {
        Ok(self.classifier()?.stages.last().expect("classifier has stages").id.clone())
    }

    pub fn layer_index(&self, layer_id: &str) -> Result<usize> {
        self.classifier()?
            .stages
            .iter()
            .position(|s| s.id == layer_id)
            .ok_or_else(|| FerdError::Config(format!("unknown layer_id `{layer_id}` for {}", self.arch)))
    }

    /// `(channels, height, width)` of a layer's activation.
    pub fn layer_shape(&self, layer_id: &str) -> Result<[usize; 3]> {
        let idx = self.layer_index(layer_id)?;
        Ok(self.classifier()?.stages[idx].out)
    }

    pub fn bn_statistics(&self) -> Vec<BnStatistics> {
        self.bn
            .iter()
            .map(|l| BnStatistics {
                layer_id: l.name.clone(),
                running_mean: l.running_mean.data().to_vec(),
                running_var: l.running_var.data().to_vec(),
            })
            .collect()
    }

    pub fn num_bn_layers(&self) -> usize {
        self.bn.len()
    }

    pub(crate) fn bn_running(&self, layer: usize) -> (&Tensor, &Tensor) {
        let l = &self.bn[layer];
        (&l.running_mean, &l.running_var)
    }

    pub(crate) fn bn_buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut Tensor)> {
        self.bn
            .iter_mut()
            .map(|l| (l.name.as_str(), &mut l.running_mean, &mut l.running_var))
    }

    /// Put every parameter on `g`, as gradient-tracked leaves when
    /// `trainable`, constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| if trainable { g.param(p.value.clone()) } else { g.constant(p.value.clone()) })
                .collect(),
        )
    }

    /// Fold batch statistics from a train-mode forward into the running
    /// estimates (momentum 0.1, unbiased variance).
    pub fn commit_bn_stats(&mut self, g: &Graph, taps: &[BnTap]) {
        for tap in taps {
            let n = tap.count as f64;
            let unbias = if tap.count > 1 { n / (n - 1.0) } else { 1.0 };
            let layer = &mut self.bn[tap.layer];
            let mean = g.value(tap.batch_mean);
            let var = g.value(tap.batch_var);
            for (r, &m) in layer.running_mean.data_mut().iter_mut().zip(mean.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, &v) in layer.running_var.data_mut().iter_mut().zip(var.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    pub(crate) fn check_images(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape || s[0] == 0 {
            return Err(FerdError::Input(format!(
                "expected batch of shape (B>0, {}, {}, {}), got {s:?}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        Ok(())
    }

    fn batch_norm(&self, g: &mut Graph, bound: &Bound, x: Var, layer: usize, opts: ForwardOpts, taps: &mut Vec<BnTap>) -> Var {
        let l = &self.bn[layer];
        let (gamma, beta) = (bound.0[l.gamma], bound.0[l.beta]);
        let batch = if opts.mode == Mode::Train || opts.collect_bn {
            let s = g.shape(x);
            let count = s[0] * s[2..].iter().product::<usize>();
            let batch_mean = g.channel_mean(x);
            let batch_var = g.channel_var(x);
            taps.push(BnTap { layer, batch_mean, batch_var, count });
            Some((batch_mean, batch_var))
        } else {
            None
        };
        let (mean, var) = match (opts.mode, batch) {
            (Mode::Train, Some(mv)) => mv,
            _ => (g.constant(l.running_mean.clone()), g.constant(l.running_var.clone())),
        };
        let var_eps = g.add_scalar(var, BN_EPS);
        let std = g.sqrt(var_eps);
        let scale = g.div(gamma, std);
        let shifted = g.mul(mean, scale);
        let shift = g.sub(beta, shifted);
        g.channel_affine(x, scale, shift)
    }

    fn conv_bn(&self, g: &mut Graph, bound: &Bound, x: Var, cb: ConvBn, opts: ForwardOpts, taps: &mut Vec<BnTap>) -> Var {
        let y = g.conv2d(x, bound.0[cb.w], cb.stride, cb.pad);
        self.batch_norm(g, bound, y, cb.bn, opts, taps)
    }

    fn stage(&self, g: &mut Graph, bound: &Bound, x: Var, stage: &Stage, opts: ForwardOpts, taps: &mut Vec<BnTap>) -> Var {
        match stage {
            Stage::Plain(cb) => {
                let y = self.conv_bn(g, bound, x, *cb, opts, taps);
                g.relu(y)
            }
            Stage::Residual { a, b, shortcut } => {
                let h = self.conv_bn(g, bound, x, *a, opts, taps);
                let h = g.relu(h);
                let h = self.conv_bn(g, bound, h, *b, opts, taps);
                let s = match shortcut {
                    Some(sc) => self.conv_bn(g, bound, x, *sc, opts, taps),
                    None => x,
                };
                let y = g.add(h, s);
                g.relu(y)
            }
        }
    }

    /// Run classifier stages `0..=layer` and return that layer's activation.
    pub fn forward_until(&self, g: &mut Graph, bound: &Bound, x: Var, layer: usize, opts: ForwardOpts, taps: &mut Vec<BnTap>) -> Result<Var> {
        let c = self.classifier()?;
        if layer >= c.stages.len() {
            return Err(FerdError::Config(format!("layer index {layer} out of range")));
        }
        let mut h = x;
        for s in &c.stages[..=layer] {
            h = self.stage(g, bound, h, &s.stage, opts, taps);
        }
        Ok(h)
    }

    /// Run classifier stages after `layer` plus the head, returning logits.
    pub fn forward_from(&self, g: &mut Graph, bound: &Bound, z: Var, layer: usize, opts: ForwardOpts, taps: &mut Vec<BnTap>) -> Result<Var> {
        let c = self.classifier()?;
        if layer >= c.stages.len() {
            return Err(FerdError::Config(format!("layer index {layer} out of range")));
        }
        let mut h = z;
        for s in &c.stages[layer + 1..] {
            h = self.stage(g, bound, h, &s.stage, opts, taps);
        }
        let pooled = g.global_avg_pool(h);
        Ok(g.linear(pooled, bound.0[c.fc_w], Some(bound.0[c.fc_b])))
    }

    /// Full classifier forward on the graph; returns logits and BN taps.
    pub fn forward_graph(&self, g: &mut Graph, bound: &Bound, x: Var, opts: ForwardOpts) -> Result<(Var, Vec<BnTap>)> {
        let last = self.classifier()?.stages.len() - 1;
        let mut taps = Vec::new();
        let z = self.forward_until(g, bound, x, last, opts, &mut taps)?;
        let logits = self.forward_from(g, bound, z, last, opts, &mut taps)?;
        Ok((logits, taps))
    }

    /// Generator forward: latents `(B, 128)` and labels to images in `[0, 1]`.
    pub fn generate_graph(&self, g: &mut Graph, bound: &Bound, z: Var, labels: &[usize], opts: ForwardOpts) -> Result<(Var, Vec<BnTap>)> {
        let gl = self.generator()?;
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != LATENT_DIM || zs[0] != labels.len() {
            return Err(FerdError::Input(format!(
                "latents must be ({}, {LATENT_DIM}), got {zs:?}",
                labels.len()
            )));
        }
        self.check_labels(labels)?;
        let mut taps = Vec::new();
        let emb = g.embedding(bound.0[gl.embed], labels);
        let input = g.concat_cols(z, emb);
        let h = g.linear(input, bound.0[gl.fc_w], Some(bound.0[gl.fc_b]));
        let h = g.reshape(h, &[labels.len(), gl.init[0], gl.init[1], gl.init[2]]);
        let mut h = self.batch_norm(g, bound, h, gl.bn0, opts, &mut taps);
        for &(wt, bn) in &gl.ups {
            h = g.relu(h);
            h = g.conv_transpose2d(h, bound.0[wt], 2, 1);
            h = self.batch_norm(g, bound, h, bn, opts, &mut taps);
        }
        let h = g.relu(h);
        let h = g.conv2d(h, bound.0[gl.out_w], 1, 1);
        let h = g.add_channel(h, bound.0[gl.out_b]);
        Ok((g.sigmoid(h), taps))
    }

    pub(crate) fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(FerdError::Input(format!("label {bad} out of range for {} classes", self.num_classes)));
        }
        Ok(())
    }

    fn opts(&self) -> ForwardOpts {
        ForwardOpts { mode: self.mode, collect_bn: false }
    }

    /// Logits for a batch in the current mode. Never touches running stats.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (logits, _) = self.forward_graph(&mut g, &bound, xv, self.opts())?;
        Ok(g.value(logits).clone())
    }

    /// Like [`Model::forward`], but a train-mode pass also updates the BN
    /// running statistics.
    pub fn forward_tracking(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (logits, taps) = self.forward_graph(&mut g, &bound, xv, self.opts())?;
        if self.mode == Mode::Train {
            self.commit_bn_stats(&g, &taps);
        }
        Ok(g.value(logits).clone())
    }

    /// Forward pass that also returns the activation at `layer_id`.
    pub fn forward_with_probe(&self, x: &Tensor, layer_id: &str) -> Result<(Tensor, LayerProbe)> {
        let layer = self.layer_index(layer_id)?;
        self.check_images(x)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut taps = Vec::new();
        let z = self.forward_until(&mut g, &bound, xv, layer, self.opts(), &mut taps)?;
        let logits = self.forward_from(&mut g, &bound, z, layer, self.opts(), &mut taps)?;
        Ok((
            g.value(logits).clone(),
            LayerProbe { layer_id: layer_id.to_string(), activation: g.value(z).clone() },
        ))
    }

    /// Logits from an activation at `layer_id` (the `f_{l+}` half).
    pub fn resume_from_layer(&self, activation: &Tensor, layer_id: &str) -> Result<Tensor> {
        let layer = self.layer_index(layer_id)?;
        self.check_activation(activation, layer_id)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let zv = g.constant(activation.clone());
        let mut taps = Vec::new();
        let logits = self.forward_from(&mut g, &bound, zv, layer, self.opts(), &mut taps)?;
        Ok(g.value(logits).clone())
    }

    pub(crate) fn check_activation(&self, activation: &Tensor, layer_id: &str) -> Result<()> {
        let expected = self.layer_shape(layer_id)?;
        let s = activation.shape();
        if s.len() != 4 || s[1..] != expected || s[0] == 0 {
            return Err(FerdError::Input(format!(
                "activation for {layer_id} must be (B, {}, {}, {}), got {s:?}",
                expected[0], expected[1], expected[2]
            )));
        }
        Ok(())
    }

    /// Generate images from explicit latents in the current mode.
    pub fn generate(&self, latents: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let z = g.constant(latents.clone());
        let (x, _) = self.generate_graph(&mut g, &bound, z, labels, self.opts())?;
        Ok(g.value(x).clone())
    }
}

/// Batch statistics of a plain tensor, matching what a BN layer would see.
pub fn batch_channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    (channel_means(x), channel_vars(x))
}
