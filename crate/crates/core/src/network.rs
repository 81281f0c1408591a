//! Block networks built from CNN or CNMF layers, optional 1×1 mixing
//! convolutions, batch norm and ReLU, plus the composite classification loss.
//!
//! A block is `main → [BN] → ReLU → [mix 1×1 → [BN] → ReLU]`. The last layer
//! of the last block emits raw logits, so it has no ReLU.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{
    cnmf_backward, cnmf_unrolled_backward, cnmf_unrolled_forward, CnmfTape, GradMode,
    UNROLLED_BUDGET_BYTES,
};
use crate::error::{Error, Result};
use crate::layer::{cnmf_forward, CnmfState, Linearization, NmfParams, DEFAULT_EPSILON, DEFAULT_ITERS};
use crate::tensor::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, conv2d_backward, global_reshape,
    relu, relu_backward, softmax, unfold, BatchNormCache, ConvSpec, Real, Tensor, BN_EPS,
    BN_MOMENTUM,
};

/// Floor applied inside the cross-entropy logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Cnn,
    Cnmf,
}

/// One processing block. `out_channels` is the width-×1 count; the last
/// block always emits `class_count` channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub mix_1x1: bool,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups_main: usize,
    pub groups_mix: usize,
    pub batch_norm: bool,
    #[serde(default = "default_iters")]
    pub nmf_iters: usize,
    #[serde(default = "default_epsilon")]
    pub nmf_epsilon: f64,
}

fn default_iters() -> usize {
    DEFAULT_ITERS
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// How NMF layers are differentiated during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmfBackward {
    /// One-step rule at the retained state.
    #[default]
    Approx,
    /// Exact reverse sweep over all iterations.
    Unrolled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub blocks: Vec<BlockConfig>,
    pub width_multiplier: usize,
    /// `(C, H, W)`.
    pub input_shape: (usize, usize, usize),
    pub class_count: usize,
    #[serde(default)]
    pub linearization: Linearization,
    #[serde(default)]
    pub grad_mode: GradMode,
    #[serde(default)]
    pub nmf_backward: NmfBackward,
}

/// The four named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Cnn,
    Cnmf,
    CnnMix,
    CnmfMix,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Cnn, Preset::Cnmf, Preset::CnnMix, Preset::CnmfMix];

    pub fn kind(self) -> BlockKind {
        match self {
            Preset::Cnn | Preset::CnnMix => BlockKind::Cnn,
            Preset::Cnmf | Preset::CnmfMix => BlockKind::Cnmf,
        }
    }

    pub fn mix(self) -> bool {
        matches!(self, Preset::CnnMix | Preset::CnmfMix)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Preset::Cnn),
            "cnmf" => Ok(Preset::Cnmf),
            "cnn_mix" => Ok(Preset::CnnMix),
            "cnmf_mix" => Ok(Preset::CnmfMix),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (expected cnn, cnmf, cnn_mix or cnmf_mix)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Cnn => "cnn",
            Preset::Cnmf => "cnmf",
            Preset::CnnMix => "cnn_mix",
            Preset::CnmfMix => "cnmf_mix",
        })
    }
}

/// `(channels, kernel, stride, padding)` of the four blocks; 28 → 14 → 7 → 3 → 1.
const GEOMETRY: [(usize, usize, usize, usize); 4] =
    [(32, 5, 2, 2), (64, 5, 2, 2), (96, 5, 2, 1), (10, 3, 1, 0)];

impl NetworkConfig {
    /// Preset topology. `groups` applies to the main layers of blocks 2–3 and
    /// the mix layers of blocks 1–3; block 1's main layer and block 4 are
    /// ungrouped. Batch norm is on in blocks 1–2.
    pub fn preset(preset: Preset, width: usize, groups: usize) -> Self {
        let blocks = GEOMETRY
            .iter()
            .enumerate()
            .map(|(idx, &(c, k, stride, padding))| {
                let inner = idx > 0 && idx < 3;
                BlockConfig {
                    kind: preset.kind(),
                    mix_1x1: preset.mix(),
                    out_channels: c,
                    kernel: (k, k),
                    stride,
                    padding,
                    groups_main: if inner { groups } else { 1 },
                    groups_mix: if idx < 3 { groups } else { 1 },
                    batch_norm: idx < 2,
                    nmf_iters: DEFAULT_ITERS,
                    nmf_epsilon: DEFAULT_EPSILON,
                }
            })
            .collect();
        NetworkConfig {
            blocks,
            width_multiplier: width,
            input_shape: (3, 28, 28),
            class_count: 10,
            linearization: Linearization::default(),
            grad_mode: GradMode::default(),
            nmf_backward: NmfBackward::default(),
        }
    }

    /// Effective output channels of block `idx`.
    pub fn block_channels(&self, idx: usize) -> usize {
        if idx + 1 == self.blocks.len() {
            self.class_count
        } else {
            self.blocks[idx].out_channels * self.width_multiplier
        }
    }

    pub fn set_nmf_iters(&mut self, n: usize) {
        self.blocks.iter_mut().for_each(|b| b.nmf_iters = n);
    }

    /// Checks channel/group divisibility and that the spatial path ends at 1×1.
    /// Returns the per-block `(main, mix)` conv specs.
    pub fn specs(&self) -> Result<Vec<(ConvSpec, Option<ConvSpec>)>> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("network needs at least one block"));
        }
        if self.width_multiplier == 0 || self.class_count == 0 {
            return Err(Error::invalid("width multiplier and class count must be positive"));
        }
        let (mut c, mut h, mut w) = self.input_shape;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (idx, b) in self.blocks.iter().enumerate() {
            let oc = self.block_channels(idx);
            let ctx = |e: Error| Error::invalid(format!("block {}: {e}", idx + 1));
            let main = ConvSpec::new(c, oc, b.kernel, b.stride, b.padding, b.groups_main).map_err(ctx)?;
            let (oh, ow) = main.output_hw(h, w).map_err(ctx)?;
            let mix = if b.mix_1x1 {
                Some(ConvSpec::pointwise(oc, oc, b.groups_mix).map_err(ctx)?)
            } else {
                None
            };
            if b.kind == BlockKind::Cnmf && (b.nmf_iters == 0 || !(b.nmf_epsilon > 0.0)) {
                return Err(Error::invalid(format!(
                    "block {}: NMF needs at least one iteration and a positive step",
                    idx + 1
                )));
            }
            out.push((main, mix));
            (c, h, w) = (oc, oh, ow);
        }
        if (h, w) != (1, 1) {
            return Err(Error::invalid(format!(
                "block {}: spatial output is {h}×{w}, expected 1×1",
                self.blocks.len()
            )));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T: Real = f64> {
    /// Bias-free grouped convolution, weight `[outC, inC/g, kh, kw]`.
    Conv { spec: ConvSpec, weight: Tensor<T> },
    Nmf {
        spec: ConvSpec,
        params: Vec<NmfParams<T>>,
        n_iters: usize,
        epsilon: T,
    },
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Relu,
}

#[derive(Clone, Debug)]
pub struct NamedLayer<T: Real = f64> {
    pub name: String,
    pub layer: Layer<T>,
    /// Frozen layers still pass errors backward but their parameters are not updated.
    pub frozen: bool,
}

enum Cache<T: Real> {
    Conv { cols: Tensor<T>, input_hw: (usize, usize) },
    Nmf(CnmfState<T>),
    NmfTape(CnmfTape<T>),
    BatchNorm(BatchNormCache<T>),
    Relu(Tensor<T>),
}

/// A built network. Training forward caches per-layer state for `backward`;
/// eval forward takes `&self` and is safe to share across threads.
pub struct Model<T: Real = f64> {
    config: NetworkConfig,
    layers: Vec<NamedLayer<T>>,
    cache: Option<Vec<Cache<T>>>,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            layers: self.layers.clone(),
            cache: None,
        }
    }
}

impl<T: Real> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("layers", &self.layers.iter().map(|l| &l.name).collect::<Vec<_>>())
            .field("params", &self.param_count())
            .finish()
    }
}

fn kaiming_uniform<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

fn batch_norm_layer<T: Real>(c: usize) -> Layer<T> {
    Layer::BatchNorm {
        gamma: Tensor::full(vec![c], T::one()),
        beta: Tensor::zeros(vec![c]),
        running_mean: Tensor::zeros(vec![c]),
        running_var: Tensor::full(vec![c], T::one()),
    }
}

fn main_layer<T: Real>(b: &BlockConfig, spec: ConvSpec, rng: &mut impl Rng) -> Layer<T> {
    match b.kind {
        BlockKind::Cnn => Layer::Conv {
            spec,
            weight: kaiming_uniform(
                vec![spec.out_channels, spec.group_in(), spec.kernel_h, spec.kernel_w],
                spec.group_patch_len(),
                rng,
            ),
        },
        BlockKind::Cnmf => Layer::Nmf {
            spec,
            params: (0..spec.groups)
                .map(|_| {
                    let p = NmfParams::<f64>::init(spec.group_patch_len(), spec.group_out(), rng);
                    NmfParams { u: p.u.cast() }
                })
                .collect(),
            n_iters: b.nmf_iters,
            epsilon: T::lit(b.nmf_epsilon),
        },
    }
}

/// Builds a seeded model from a configuration.
pub fn build<T: Real>(config: &NetworkConfig, seed: u64) -> Result<Model<T>> {
    let specs = config.specs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let last = config.blocks.len() - 1;
    let mut push = |name: String, layer: Layer<T>| {
        layers.push(NamedLayer {
            name,
            layer,
            frozen: false,
        })
    };
    for (idx, (b, (main, mix))) in config.blocks.iter().zip(&specs).enumerate() {
        let p = format!("block{}", idx + 1);
        let oc = main.out_channels;
        push(format!("{p}.main"), main_layer(b, *main, &mut rng));
        let main_is_last = idx == last && mix.is_none();
        if b.batch_norm && !main_is_last {
            push(format!("{p}.bn1"), batch_norm_layer(oc));
        }
        if !main_is_last {
            push(format!("{p}.relu1"), Layer::Relu);
        }
        if let Some(mix) = mix {
            push(
                format!("{p}.mix"),
                Layer::Conv {
                    spec: *mix,
                    weight: kaiming_uniform(vec![oc, mix.group_in(), 1, 1], mix.group_in(), &mut rng),
                },
            );
            if idx != last {
                if b.batch_norm {
                    push(format!("{p}.bn2"), batch_norm_layer(oc));
                }
                push(format!("{p}.relu2"), Layer::Relu);
            }
        }
    }
    Ok(Model {
        config: config.clone(),
        layers,
        cache: None,
    })
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[NamedLayer<T>] {
        &self.layers
    }

    /// Direct layer access; drops any cached training state.
    pub fn layers_mut(&mut self) -> &mut [NamedLayer<T>] {
        self.cache = None;
        &mut self.layers
    }

    /// Freezes every NMF layer (used by the local-learning baseline).
    pub fn freeze_nmf(&mut self) {
        for l in &mut self.layers {
            if matches!(l.layer, Layer::Nmf { .. }) {
                l.frozen = true;
            }
        }
    }

    /// Trainable tensors in a fixed order with stable names.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match &l.layer {
                Layer::Conv { weight, .. } => out.push((format!("{}.weight", l.name), weight)),
                Layer::Nmf { params, .. } => {
                    for (g, p) in params.iter().enumerate() {
                        out.push((format!("{}.u{g}", l.name), &p.u));
                    }
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("{}.gamma", l.name), gamma));
                    out.push((format!("{}.beta", l.name), beta));
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Same order as [`Model::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match &mut l.layer {
                Layer::Conv { weight, .. } => out.push(weight),
                Layer::Nmf { params, .. } => out.extend(params.iter_mut().map(|p| &mut p.u)),
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Whether each entry of [`Model::parameters`] should be updated.
    pub fn trainable(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for l in &self.layers {
            let n = match &l.layer {
                Layer::Conv { .. } => 1,
                Layer::Nmf { params, .. } => params.len(),
                Layer::BatchNorm { .. } => 2,
                Layer::Relu => 0,
            };
            out.extend(std::iter::repeat_n(!l.frozen, n));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters plus batch-norm running statistics, keyed by name.
    pub fn state_dict(&self) -> BTreeMap<String, &Tensor<T>> {
        let mut out: BTreeMap<String, &Tensor<T>> = self.parameters().into_iter().collect();
        for l in &self.layers {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = &l.layer
            {
                out.insert(format!("{}.running_mean", l.name), running_mean);
                out.insert(format!("{}.running_var", l.name), running_var);
            }
        }
        out
    }

    /// Overwrites every tensor of [`Model::state_dict`]; all names must be present
    /// with matching shapes and no extras are allowed.
    pub fn load_state(&mut self, mut state: BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut take = |name: String, dst: &mut Tensor<T>| -> Result<()> {
            let t = state
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t;
            Ok(())
        };
        for l in &mut self.layers {
            let n = &l.name;
            match &mut l.layer {
                Layer::Conv { weight, .. } => take(format!("{n}.weight"), weight)?,
                Layer::Nmf { params, .. } => {
                    for (g, p) in params.iter_mut().enumerate() {
                        take(format!("{n}.u{g}"), &mut p.u)?;
                    }
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    take(format!("{n}.gamma"), gamma)?;
                    take(format!("{n}.beta"), beta)?;
                    take(format!("{n}.running_mean"), running_mean)?;
                    take(format!("{n}.running_var"), running_var)?;
                }
                Layer::Relu => {}
            }
        }
        if let Some(extra) = state.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        self.cache = None;
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.config.input_shape;
        if x.rank() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::shape(format!(
                "model expects [B, {c}, {h}, {w}], got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Inference with batch-norm running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        global_reshape(self.forward_prefix(x, self.layers.len())?)
    }

    /// Eval-mode output of the first `upto` layers, `[B, C, H, W]`.
    pub fn forward_prefix(&self, x: &Tensor<T>, upto: usize) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let lin = self.config.linearization;
        let mut cur = x.clone();
        for l in &self.layers[..upto.min(self.layers.len())] {
            cur = match &l.layer {
                Layer::Conv { spec, weight } => crate::tensor::conv2d(&cur, weight, spec)?,
                Layer::Nmf {
                    spec,
                    params,
                    n_iters,
                    epsilon,
                } => {
                    debug_assert!(cur.min_value() >= T::zero(), "negative input to {}", l.name);
                    cnmf_forward(&cur, params, spec, *n_iters, *epsilon, lin)?.0
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => batch_norm_eval(
                    &cur,
                    gamma.data(),
                    beta.data(),
                    running_mean.data(),
                    running_var.data(),
                    T::lit(BN_EPS),
                )?,
                Layer::Relu => relu(&cur),
            };
            cur.check_finite(&l.name)?;
        }
        Ok(cur)
    }

    /// Training forward: batch statistics, running-stat updates and caches
    /// for [`Model::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.cache = None;
        let lin = self.config.linearization;
        let unrolled = self.config.nmf_backward == NmfBackward::Unrolled;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let momentum = T::lit(BN_MOMENTUM);
        for l in &mut self.layers {
            let (next, cache) = match &mut l.layer {
                Layer::Conv { spec, weight } => {
                    let (h, w) = (cur.dim(2), cur.dim(3));
                    let (oh, ow) = spec.output_hw(h, w)?;
                    let cols = unfold(&cur, spec)?;
                    let y = crate::tensor::conv_from_cols(&cols, weight, spec, cur.dim(0), oh, ow);
                    (y, Cache::Conv { cols, input_hw: (h, w) })
                }
                Layer::Nmf {
                    spec,
                    params,
                    n_iters,
                    epsilon,
                } => {
                    debug_assert!(cur.min_value() >= T::zero(), "negative input to {}", l.name);
                    if unrolled {
                        let (y, tape) = cnmf_unrolled_forward(
                            &cur,
                            params,
                            spec,
                            *n_iters,
                            *epsilon,
                            UNROLLED_BUDGET_BYTES,
                        )?;
                        (y, Cache::NmfTape(tape))
                    } else {
                        let (y, st) = cnmf_forward(&cur, params, spec, *n_iters, *epsilon, lin)?;
                        (y, Cache::Nmf(st))
                    }
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let (y, c) = batch_norm_train(&cur, gamma.data(), beta.data(), T::lit(BN_EPS))?;
                    let n = cur.len() / cur.dim(1);
                    let unbias = if n > 1 {
                        T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap()
                    } else {
                        T::one()
                    };
                    for (rm, &m) in running_mean.data_mut().iter_mut().zip(&c.mean) {
                        *rm = (T::one() - momentum) * *rm + momentum * m;
                    }
                    for (rv, &v) in running_var.data_mut().iter_mut().zip(&c.var) {
                        *rv = (T::one() - momentum) * *rv + momentum * v * unbias;
                    }
                    (y, Cache::BatchNorm(c))
                }
                Layer::Relu => {
                    let y = relu(&cur);
                    (y.clone(), Cache::Relu(y))
                }
            };
            next.check_finite(&l.name)?;
            caches.push(cache);
            cur = next;
        }
        self.cache = Some(caches);
        global_reshape(cur)
    }

    /// Gradients of the loss with respect to [`Model::parameters`], given
    /// `dL/dlogits`. Consumes the state of the preceding training forward.
    pub fn backward(&mut self, phi_logits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let caches = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("backward called without a preceding training forward"))?;
        if phi_logits.rank() != 2 || phi_logits.dim(1) != self.config.class_count {
            return Err(Error::shape(format!(
                "logit error {:?} for {} classes",
                phi_logits.shape(),
                self.config.class_count
            )));
        }
        let mode = self.config.grad_mode;
        let (b, k) = (phi_logits.dim(0), phi_logits.dim(1));
        let mut g = phi_logits.clone().reshape(vec![b, k, 1, 1])?;
        let mut grads: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        for (l, cache) in self.layers.iter().zip(caches).rev() {
            let (next, pg) = match (&l.layer, cache) {
                (Layer::Conv { spec, weight }, Cache::Conv { cols, input_hw }) => {
                    let (gx, gw) = conv2d_backward(&cols, weight, &g, spec, input_hw)?;
                    (gx, vec![gw])
                }
                (Layer::Nmf { params, .. }, Cache::Nmf(st)) => cnmf_backward(&g, &st, params, mode)?,
                (Layer::Nmf { params, .. }, Cache::NmfTape(tape)) => {
                    cnmf_unrolled_backward(&g, &tape, params)?
                }
                (Layer::BatchNorm { gamma, .. }, Cache::BatchNorm(c)) => {
                    let (gx, gg, gb) = batch_norm_backward(&g, &c, gamma.data())?;
                    let c = gg.len();
                    (
                        gx,
                        vec![
                            Tensor::from_parts_unchecked(vec![c], gg),
                            Tensor::from_parts_unchecked(vec![c], gb),
                        ],
                    )
                }
                (Layer::Relu, Cache::Relu(y)) => (relu_backward(&y, &g)?, vec![]),
                _ => return Err(Error::invalid(format!("stale cache for {}", l.name))),
            };
            next.check_finite(&l.name)?;
            g = next;
            grads.push(pg);
        }
        Ok(grads.into_iter().rev().flatten().collect())
    }

    /// Arg-max class per row of the eval-mode logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward_eval(x)?))
    }
}

pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.dim(logits.rank() - 1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// One-hot targets `[B, K]`.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::invalid("no labels"));
    }
    let mut data = vec![T::zero(); labels.len() * classes];
    for (row, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} outside {classes} classes")));
        }
        data[row * classes + y] = T::one();
    }
    Ok(Tensor::from_parts_unchecked(vec![labels.len(), classes], data))
}

fn check_targets<T: Real>(logits: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<()> {
    if logits.rank() != 2 || logits.shape() != y.shape() {
        return Err(Error::shape(format!(
            "logits {:?} and targets {:?}",
            logits.shape(),
            y.shape()
        )));
    }
    if !(cfg.alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be non-negative, got {}", cfg.alpha)));
    }
    Ok(())
}

/// `−Σ y log ŷ + α Σ (y − ŷ)²` with `ŷ = softmax(logits)`, averaged over rows.
pub fn loss_one_hot<T: Real>(logits: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    check_targets(logits, y, cfg)?;
    let p = softmax(logits)?;
    let alpha = T::lit(cfg.alpha);
    let clamp = T::lit(LOG_CLAMP);
    let mut total = T::zero();
    for (&pv, &yv) in p.data().iter().zip(y.data()) {
        if yv != T::zero() {
            total -= yv * pv.max(clamp).ln();
        }
        let d = yv - pv;
        total += alpha * d * d;
    }
    Ok(total / T::from_usize(logits.dim(0)).unwrap())
}

/// Analytic gradient of [`loss_one_hot`] with respect to the logits.
pub fn loss_grad_one_hot<T: Real>(logits: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    check_targets(logits, y, cfg)?;
    let p = softmax(logits)?;
    let k = logits.dim(1);
    let alpha = T::lit(cfg.alpha);
    let clamp = T::lit(LOG_CLAMP);
    let two = T::lit(2.0);
    let inv_b = T::one() / T::from_usize(logits.dim(0)).unwrap();
    let mut out = vec![T::zero(); p.len()];
    let mut dp = vec![T::zero(); k];
    for ((prow, yrow), orow) in p.data().chunks(k).zip(y.data().chunks(k)).zip(out.chunks_mut(k)) {
        for j in 0..k {
            let ce = if yrow[j] != T::zero() && prow[j] >= clamp {
                -yrow[j] / prow[j]
            } else {
                T::zero()
            };
            dp[j] = ce - two * alpha * (yrow[j] - prow[j]);
        }
        let proj = dp.iter().zip(prow).fold(T::zero(), |a, (&d, &pv)| a + d * pv);
        for j in 0..k {
            orow[j] = prow[j] * (dp[j] - proj) * inv_b;
        }
    }
    Ok(Tensor::from_parts_unchecked(logits.shape().to_vec(), out))
}

pub fn loss<T: Real>(logits: &Tensor<T>, labels: &[usize], cfg: &LossConfig) -> Result<T> {
    loss_one_hot(logits, &one_hot(labels, *logits.shape().last().unwrap_or(&0))?, cfg)
}

pub fn loss_grad<T: Real>(logits: &Tensor<T>, labels: &[usize], cfg: &LossConfig) -> Result<Tensor<T>> {
    loss_grad_one_hot(logits, &one_hot(labels, *logits.shape().last().unwrap_or(&0))?, cfg)
}
