//! Densely connected classification networks.
//!
//! Two presets are provided: [`DcnConfig::dcn1`] for histology tiles and
//! [`DcnConfig::dcn2`] for MRI slices. Composite layers are pre-activation
//! (BN → ReLU → conv); every dense layer is a 1×1 bottleneck followed by a
//! 3×3 convolution producing `growth_rate` new feature maps.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, conv_out_dim};
use crate::tensor::{Graph, RunningStats, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcnConfig {
    /// Number of dense layers in each block.
    pub block_config: Vec<usize>,
    /// Feature maps added by every dense layer.
    pub growth_rate: usize,
    /// Output channels of the stem convolution.
    pub init_features: usize,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck_factor: usize,
    pub dropout: f64,
    /// Channel fraction kept by each transition, in (0, 1].
    pub compression: f64,
    pub num_classes: usize,
    /// Side length of the square network input, in pixels.
    pub input_size: usize,
    pub in_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "DCN1")]
    Dcn1,
    #[serde(rename = "DCN2")]
    Dcn2,
}

impl Preset {
    pub fn config(self) -> DcnConfig {
        match self {
            Preset::Dcn1 => DcnConfig::dcn1(),
            Preset::Dcn2 => DcnConfig::dcn2(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Dcn1 => "DCN1",
            Preset::Dcn2 => "DCN2",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preset> {
        match s.trim().to_ascii_uppercase().as_str() {
            "DCN1" => Ok(Preset::Dcn1),
            "DCN2" => Ok(Preset::Dcn2),
            _ => Err(Error::InvalidArgument(format!("unknown preset {s:?}"))),
        }
    }
}

/// Channel counts through the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    pub stem: usize,
    /// (channels in, channels out) per dense block.
    pub blocks: Vec<(usize, usize)>,
    /// Output channels of each transition (one fewer than blocks).
    pub transitions: Vec<usize>,
    pub classifier_in: usize,
}

impl DcnConfig {
    /// Histology network.
    pub fn dcn1() -> Self {
        DcnConfig {
            block_config: vec![2, 2, 2, 2],
            growth_rate: 32,
            init_features: 64,
            bottleneck_factor: 4,
            dropout: 0.0,
            compression: 0.5,
            num_classes: 4,
            input_size: 224,
            in_channels: 3,
        }
    }

    /// Radiology network.
    pub fn dcn2() -> Self {
        DcnConfig {
            block_config: vec![6, 12, 36, 24],
            growth_rate: 24,
            init_features: 48,
            bottleneck_factor: 4,
            dropout: 0.0,
            compression: 0.5,
            num_classes: 4,
            input_size: 224,
            in_channels: 1,
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_in_channels(mut self, channels: usize) -> Self {
        self.in_channels = channels;
        self
    }

    pub fn channel_plan(&self) -> ChannelPlan {
        let mut blocks = Vec::with_capacity(self.block_config.len());
        let mut transitions = Vec::new();
        let mut c = self.init_features;
        for (i, &layers) in self.block_config.iter().enumerate() {
            let out = c + layers * self.growth_rate;
            blocks.push((c, out));
            c = out;
            if i + 1 < self.block_config.len() {
                c = ((c as f64) * self.compression).floor() as usize;
                transitions.push(c);
            }
        }
        ChannelPlan {
            stem: self.init_features,
            blocks,
            transitions,
            classifier_in: c,
        }
    }

    /// Spatial side length entering each dense block.
    pub fn spatial_plan(&self) -> Result<Vec<usize>> {
        let too_small = || {
            Error::InvalidConfig(format!(
                "input size {} collapses before the last dense block",
                self.input_size
            ))
        };
        let s = conv_out_dim(self.input_size, 7, 2, 3).ok_or_else(too_small)?;
        let mut s = conv_out_dim(s, 3, 2, 1).ok_or_else(too_small)?;
        let mut plan = vec![s];
        for _ in 1..self.block_config.len() {
            if s < 2 {
                return Err(too_small());
            }
            s /= 2;
            plan.push(s);
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.block_config.is_empty() {
            return bad("block_config is empty".into());
        }
        if let Some(i) = self.block_config.iter().position(|&l| l == 0) {
            return bad(format!("dense block {i} has zero layers"));
        }
        if self.growth_rate == 0 || self.init_features == 0 || self.bottleneck_factor == 0 {
            return bad("growth rate, initial features and bottleneck factor must be positive".into());
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression {} outside (0, 1]", self.compression));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.channel_plan().transitions.contains(&0) {
            return bad("compression removes every channel".into());
        }
        self.spatial_plan()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct BnRef {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct DenseLayerRef {
    in_channels: usize,
    norm1: BnRef,
    conv1: usize,
    norm2: BnRef,
    conv2: usize,
}

#[derive(Clone, Copy, Debug)]
struct TransitionRef {
    norm: BnRef,
    conv: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    conv0: usize,
    norm0: BnRef,
    blocks: Vec<Vec<DenseLayerRef>>,
    transitions: Vec<TransitionRef>,
    norm_final: BnRef,
    fc_weight: usize,
    fc_bias: usize,
}

/// An instantiated network: named parameters, batch-norm running
/// statistics and the current train/eval mode.
#[derive(Clone, Debug)]
pub struct DcnModel {
    config: DcnConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
    layout: Layout,
    training: bool,
    dropout_rng: ChaCha8Rng,
}

/// The tape handles produced by one recorded forward pass.
pub struct Recorded {
    pub logits: Var,
    /// Leaf handle of every parameter, in [`DcnModel::parameters`] order.
    pub params: Vec<Var>,
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t.with_requires_grad(true));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> usize {
        let fan_in = (inp * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let data = (0..out * inp * k * k)
            .map(|_| normal.sample(&mut self.rng) as f32)
            .collect();
        let t = Tensor::new(&[out, inp, k, k], data).expect("shape");
        self.push(format!("{name}.weight"), t)
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnRef {
        let gamma = self.push(format!("{name}.weight"), Tensor::full(&[channels], 1.0));
        let beta = self.push(format!("{name}.bias"), Tensor::zeros(&[channels]));
        self.stat_names.push(name.to_string());
        self.stats.push(RunningStats::new(channels));
        BnRef {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }
}

/// Instantiates `config` with He-normal convolution weights drawn from `seed`.
pub fn build_dcn(config: &DcnConfig, seed: u64) -> Result<DcnModel> {
    config.validate()?;
    let plan = config.channel_plan();
    let mut b = Builder {
        names: Vec::new(),
        params: Vec::new(),
        stat_names: Vec::new(),
        stats: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let conv0 = b.conv("features.conv0", config.init_features, config.in_channels, 7);
    let norm0 = b.bn("features.norm0", config.init_features);
    let bottleneck = config.bottleneck_factor * config.growth_rate;
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    for (bi, &layers) in config.block_config.iter().enumerate() {
        let (c_in, c_out) = plan.blocks[bi];
        let mut block = Vec::with_capacity(layers);
        for li in 0..layers {
            let prefix = format!("features.denseblock{}.denselayer{}", bi + 1, li + 1);
            let c = c_in + li * config.growth_rate;
            let norm1 = b.bn(&format!("{prefix}.norm1"), c);
            let conv1 = b.conv(&format!("{prefix}.conv1"), bottleneck, c, 1);
            let norm2 = b.bn(&format!("{prefix}.norm2"), bottleneck);
            let conv2 = b.conv(&format!("{prefix}.conv2"), config.growth_rate, bottleneck, 3);
            block.push(DenseLayerRef {
                in_channels: c,
                norm1,
                conv1,
                norm2,
                conv2,
            });
        }
        blocks.push(block);
        if bi + 1 < config.block_config.len() {
            let prefix = format!("features.transition{}", bi + 1);
            let norm = b.bn(&format!("{prefix}.norm"), c_out);
            let conv = b.conv(&format!("{prefix}.conv"), plan.transitions[bi], c_out, 1);
            transitions.push(TransitionRef { norm, conv });
        }
    }
    let norm_final = b.bn("features.norm_final", plan.classifier_in);
    let bound = 1.0 / (plan.classifier_in as f64).sqrt();
    let uniform = Uniform::new_inclusive(-bound, bound);
    let fc_data = (0..plan.classifier_in * config.num_classes)
        .map(|_| uniform.sample(&mut b.rng) as f32)
        .collect();
    let fc_weight = b.push(
        "classifier.weight".into(),
        Tensor::new(&[plan.classifier_in, config.num_classes], fc_data)?,
    );
    let fc_bias = b.push("classifier.bias".into(), Tensor::zeros(&[config.num_classes]));
    let dropout_rng = ChaCha8Rng::seed_from_u64(b.rng.gen());
    Ok(DcnModel {
        config: config.clone(),
        names: b.names,
        params: b.params,
        stat_names: b.stat_names,
        stats: b.stats,
        layout: Layout {
            conv0,
            norm0,
            blocks,
            transitions,
            norm_final,
            fc_weight,
            fc_bias,
        },
        training: true,
        dropout_rng,
    })
}

impl DcnModel {
    pub fn config(&self) -> &DcnConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Batch-norm layer names and their running statistics.
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stat_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn train_mode(&mut self) {
        self.training = true;
    }

    pub fn eval_mode(&mut self) {
        self.training = false;
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Channels entering the final classifier.
    pub fn classifier_width(&self) -> usize {
        self.params[self.layout.fc_weight].shape()[0]
    }

    /// (in, out) channel counts of every dense block, read off the
    /// instantiated parameters rather than the configuration.
    pub fn block_channels(&self) -> Vec<(usize, usize)> {
        self.layout
            .blocks
            .iter()
            .enumerate()
            .map(|(bi, block)| {
                let c_in = block[0].in_channels;
                let added: usize = block.iter().map(|l| self.params[l.conv2].shape()[0]).sum();
                let c_out = match self.layout.transitions.get(bi) {
                    Some(t) => self.params[t.conv].shape()[1],
                    None => self.classifier_width(),
                };
                debug_assert_eq!(c_in + added, c_out);
                (c_in, c_in + added)
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            &[n, ch, h, w] if n >= 1 && ch == c.in_channels && h == c.input_size && w == c.input_size => Ok(()),
            _ => Err(Error::shape(
                "forward",
                shape,
                &[
                    shape.first().copied().unwrap_or(0),
                    c.in_channels,
                    c.input_size,
                    c.input_size,
                ],
            )),
        }
    }

    /// Adds a leaf for every parameter.
    pub fn register_params(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p)).collect()
    }

    fn bn(&mut self, g: &mut Graph, pv: &[Var], r: BnRef, x: Var) -> Result<Var> {
        let training = self.training;
        g.batch_norm2d(x, pv[r.gamma], pv[r.beta], &mut self.stats[r.stats], training)
    }

    /// One composite dense layer; returns only the `growth_rate` new maps.
    pub fn dense_layer_forward(
        &mut self,
        g: &mut Graph,
        pv: &[Var],
        block: usize,
        layer: usize,
        x: Var,
    ) -> Result<Var> {
        let l = *self
            .layout
            .blocks
            .get(block)
            .and_then(|b| b.get(layer))
            .ok_or_else(|| Error::InvalidArgument(format!("no dense layer {block}.{layer}")))?;
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != l.in_channels {
            return Err(Error::shape("dense_layer_forward", &shape, &[0, l.in_channels, 0, 0]));
        }
        let h = self.bn(g, pv, l.norm1, x)?;
        let h = g.relu(h);
        let h = g.conv2d(h, pv[l.conv1], 1, 0)?;
        let h = self.bn(g, pv, l.norm2, h)?;
        let h = g.relu(h);
        let mut h = g.conv2d(h, pv[l.conv2], 1, 1)?;
        if self.training && self.config.dropout > 0.0 {
            let keep = 1.0 - self.config.dropout;
            let t = g.value(h);
            let mask: Vec<f32> = (0..t.numel())
                .map(|_| {
                    if self.dropout_rng.gen::<f64>() < keep {
                        (1.0 / keep) as f32
                    } else {
                        0.0
                    }
                })
                .collect();
            let mask = g.constant(&Tensor::new(t.shape(), mask)?);
            h = g.mul(h, mask)?;
        }
        Ok(h)
    }

    /// Records a forward pass of `batch` (N×C×S×S) and returns N×classes
    /// logits. In training mode batch-norm running statistics are updated.
    pub fn forward(&mut self, g: &mut Graph, batch: Var) -> Result<Recorded> {
        self.check_input(g.value(batch).shape())?;
        let pv = self.register_params(g);
        let lay = self.layout.clone();
        let mut x = g.conv2d(batch, pv[lay.conv0], 2, 3)?;
        x = self.bn(g, &pv, lay.norm0, x)?;
        x = g.relu(x);
        x = g.max_pool2d(x, 3, 2, 1)?;
        for (bi, block) in lay.blocks.iter().enumerate() {
            for li in 0..block.len() {
                let new = self.dense_layer_forward(g, &pv, bi, li, x)?;
                x = g.concat_channels(&[x, new])?;
            }
            if let Some(t) = lay.transitions.get(bi) {
                x = self.bn(g, &pv, t.norm, x)?;
                x = g.relu(x);
                x = g.conv2d(x, pv[t.conv], 1, 0)?;
                x = g.avg_pool2d(x, 2, 2)?;
            }
        }
        x = self.bn(g, &pv, lay.norm_final, x)?;
        x = g.relu(x);
        x = g.global_avg_pool(x)?;
        let logits = g.linear(x, pv[lay.fc_weight], pv[lay.fc_bias])?;
        Ok(Recorded { logits, params: pv })
    }

    /// Adds the tape gradients of a recorded pass into the parameters.
    pub fn accumulate_grads(&mut self, g: &Graph, rec: &Recorded) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&rec.params) {
            if let Some(grad) = g.grad(v) {
                p.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    fn bn_eval(&self, r: BnRef, x: &Tensor) -> Result<Tensor> {
        let mut stats = self.stats[r.stats].clone();
        ops::batch_norm2d(x, &self.params[r.gamma], &self.params[r.beta], &mut stats, false)
    }

    /// Tape-free eval-mode forward pass. Uses running statistics regardless
    /// of the current mode and never mutates the model.
    pub fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        let p = &self.params;
        let lay = &self.layout;
        let mut x = ops::conv2d(batch, &p[lay.conv0], 2, 3)?;
        x = ops::relu(&self.bn_eval(lay.norm0, &x)?);
        x = ops::max_pool2d(&x, 3, 2, 1)?;
        for (bi, block) in lay.blocks.iter().enumerate() {
            for l in block {
                let h = ops::relu(&self.bn_eval(l.norm1, &x)?);
                let h = ops::conv2d(&h, &p[l.conv1], 1, 0)?;
                let h = ops::relu(&self.bn_eval(l.norm2, &h)?);
                let h = ops::conv2d(&h, &p[l.conv2], 1, 1)?;
                x = ops::concat_channels(&[&x, &h])?;
            }
            if let Some(t) = lay.transitions.get(bi) {
                x = ops::relu(&self.bn_eval(t.norm, &x)?);
                x = ops::conv2d(&x, &p[t.conv], 1, 0)?;
                x = ops::avg_pool2d(&x, 2, 2)?;
            }
        }
        x = ops::relu(&self.bn_eval(lay.norm_final, &x)?);
        x = ops::global_avg_pool(&x)?;
        ops::linear(&x, &p[lay.fc_weight], &p[lay.fc_bias])
    }

    pub(crate) fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub(crate) fn stat_index(&self, name: &str) -> Option<usize> {
        self.stat_names.iter().position(|n| n == name)
    }

    pub(crate) fn stats_at_mut(&mut self, i: usize) -> &mut RunningStats {
        &mut self.stats[i]
    }
}
