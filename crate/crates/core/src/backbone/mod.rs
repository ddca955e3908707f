//! Compact 3D encoder-decoder segmentation network.
//!
//! The network is a fixed graph of convolution, batch-norm, ReLU, nearest
//! upsampling and additive skip nodes. Its parameters are split into two
//! groups: the per-channel affine parameters of every batch-norm layer
//! (`norm_affine`) and everything else (`other`). Test-time adaptation only
//! ever touches the first group.
//!
//! Layout for `depth = 3`, base width `b`:
//!
//! ```text
//! enc0  conv3 S→b                         full res   ─┐ skip
//! enc1  conv3/2 b→2b                      1/2        ─┤
//! enc2  conv3/2 2b→4b, conv3 4b→4b        1/4        ─┤
//! enc3  conv3/2 4b→8b, conv3 8b→8b        1/8         │
//! dec2  conv1 8b→4b, up×2, +skip, conv3   1/4        ◄┤
//! dec1  conv1 4b→2b, up×2, +skip, conv3   1/2        ◄┤
//! dec0  conv1 2b→b,  up×2, +skip, conv1   full res   ◄┘
//! head  conv1 b→C (logits)
//! ```
//!
//! Every conv except the decoder reductions and the head is followed by
//! batch norm and ReLU.

mod layers;
pub mod optim;
pub mod train;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Container;
use crate::volume::{LogitMap, MultiSequenceVolume};

use layers::{relu, relu_backward, upsample2, upsample2_backward, BatchNorm3d, Conv3d, Feat, NormStats};

pub use optim::Adam;
pub use train::{pretrain_source, PretrainOptions, PretrainReport, Pretrainer};

/// Substring present in the name of every normalization-layer parameter.
pub const NORM_TAG: &str = ".bn";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { in_channels: 4, out_channels: 3, depth: 3, base_channels: 8, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels must be >= 4, got {}", self.base_channels)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("in/out channels must be positive".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    NormAffine,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamLoc {
    ConvWeight(usize),
    ConvBias(usize),
    Gamma(usize),
    Beta(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct ParamSpec {
    name: String,
    group: ParamGroup,
    loc: ParamLoc,
}

/// Which batch-norm statistics a forward pass normalises with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Stored running statistics (eval / teacher forwards).
    Running,
    /// Statistics of the current volume (train-mode forwards).
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Input,
    Conv { layer: usize, src: usize },
    Norm { layer: usize, src: usize },
    Relu { src: usize },
    Upsample { src: usize },
    Add { a: usize, b: usize },
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Flat, deterministically ordered copy of model parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSnapshot {
    pub entries: Vec<NamedTensor>,
}

impl ParameterSnapshot {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|t| t.name.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|t| t.data.len()).sum()
    }

    /// Largest absolute elementwise difference over the entries whose
    /// names pass `filter`. Both snapshots must share ordering.
    pub fn max_abs_diff(&self, other: &Self, filter: impl Fn(&str) -> bool) -> f32 {
        self.entries
            .iter()
            .zip(&other.entries)
            .filter(|(a, _)| filter(&a.name))
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f32::max)
    }
}

/// Parameter gradients indexed like the model's parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub(crate) Vec<Option<Vec<f32>>>);

impl Gradients {
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().flatten().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().flatten().flatten().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn get(&self, index: usize) -> Option<&[f32]> {
        self.0.get(index).and_then(|g| g.as_deref())
    }
}

/// Which parameters an optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableMode {
    BnAffineOnly,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSelection {
    pub mode: TrainableMode,
    pub indices: Vec<usize>,
    pub names: Vec<String>,
}

impl ParamSelection {
    fn mask(&self, total: usize) -> Vec<bool> {
        let mut m = vec![false; total];
        self.indices.iter().for_each(|&i| m[i] = true);
        m
    }
}

/// Values and normalisation statistics recorded by a traced forward pass.
pub struct Trace {
    values: Vec<Feat>,
    stats: Vec<Option<NormStats>>,
    output: usize,
}

impl Trace {
    pub fn logits(&self) -> Array4<f32> {
        feat_to_array(&self.values[self.output])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    config: ModelConfig,
    convs: Vec<Conv3d>,
    conv_names: Vec<String>,
    norms: Vec<BatchNorm3d>,
    norm_names: Vec<String>,
    nodes: Vec<Op>,
    output: usize,
    params: Vec<ParamSpec>,
}

struct Builder {
    model: SegmentationModel,
    rng: ChaCha8Rng,
}

impl Builder {
    fn node(&mut self, op: Op) -> usize {
        self.model.nodes.push(op);
        self.model.nodes.len() - 1
    }

    fn conv(&mut self, name: String, src: usize, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> usize {
        let layer = self.model.convs.len();
        self.model.convs.push(Conv3d::new(cin, cout, k, stride, bias, &mut self.rng));
        self.model.params.push(ParamSpec {
            name: format!("{name}.weight"),
            group: ParamGroup::Other,
            loc: ParamLoc::ConvWeight(layer),
        });
        if bias {
            self.model.params.push(ParamSpec {
                name: format!("{name}.bias"),
                group: ParamGroup::Other,
                loc: ParamLoc::ConvBias(layer),
            });
        }
        self.model.conv_names.push(name);
        self.node(Op::Conv { layer, src })
    }

    /// conv → batch norm → ReLU
    fn block(&mut self, prefix: &str, src: usize, cin: usize, cout: usize, k: usize, stride: usize) -> usize {
        let c = self.conv(format!("{prefix}.conv"), src, cin, cout, k, stride, false);
        let layer = self.model.norms.len();
        self.model.norms.push(BatchNorm3d::new(cout));
        let name = format!("{prefix}{NORM_TAG}");
        for (suffix, loc) in [("weight", ParamLoc::Gamma(layer)), ("bias", ParamLoc::Beta(layer))] {
            self.model.params.push(ParamSpec {
                name: format!("{name}.{suffix}"),
                group: ParamGroup::NormAffine,
                loc,
            });
        }
        self.model.norm_names.push(name);
        let n = self.node(Op::Norm { layer, src: c });
        self.node(Op::Relu { src: n })
    }
}

impl SegmentationModel {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            model: Self {
                config,
                convs: Vec::new(),
                conv_names: Vec::new(),
                norms: Vec::new(),
                norm_names: Vec::new(),
                nodes: Vec::new(),
                output: 0,
                params: Vec::new(),
            },
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let input = b.node(Op::Input);
        let mut skips = Vec::with_capacity(config.depth + 1);
        let mut h = b.block("enc0.0", input, config.in_channels, config.width(0), 3, 1);
        skips.push(h);
        for level in 1..=config.depth {
            h = b.block(&format!("enc{level}.0"), h, config.width(level - 1), config.width(level), 3, 2);
            if level >= 2 {
                h = b.block(&format!("enc{level}.1"), h, config.width(level), config.width(level), 3, 1);
            }
            skips.push(h);
        }
        for level in (0..config.depth).rev() {
            let (hi, lo) = (config.width(level + 1), config.width(level));
            let r = b.conv(format!("dec{level}.reduce"), h, hi, lo, 1, 1, true);
            let u = b.node(Op::Upsample { src: r });
            let a = b.node(Op::Add { a: u, b: skips[level] });
            let k = if level == 0 { 1 } else { 3 };
            h = b.block(&format!("dec{level}.0"), a, lo, lo, k, 1);
        }
        let out = b.conv("head".into(), h, config.width(0), config.out_channels, 1, 1, true);
        b.model.output = out;
        Ok(b.model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| self.param(p.loc).len()).sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn param_group(&self, index: usize) -> ParamGroup {
        self.params[index].group
    }

    fn param(&self, loc: ParamLoc) -> &[f32] {
        match loc {
            ParamLoc::ConvWeight(l) => &self.convs[l].weight,
            ParamLoc::ConvBias(l) => self.convs[l].bias.as_deref().expect("bias registered"),
            ParamLoc::Gamma(l) => &self.norms[l].gamma,
            ParamLoc::Beta(l) => &self.norms[l].beta,
        }
    }

    fn param_mut(&mut self, loc: ParamLoc) -> &mut [f32] {
        match loc {
            ParamLoc::ConvWeight(l) => &mut self.convs[l].weight,
            ParamLoc::ConvBias(l) => self.convs[l].bias.as_deref_mut().expect("bias registered"),
            ParamLoc::Gamma(l) => &mut self.norms[l].gamma,
            ParamLoc::Beta(l) => &mut self.norms[l].beta,
        }
    }

    pub(crate) fn param_at(&self, index: usize) -> &[f32] {
        self.param(self.params[index].loc)
    }

    pub(crate) fn param_at_mut(&mut self, index: usize) -> &mut [f32] {
        let loc = self.params[index].loc;
        self.param_mut(loc)
    }

    pub(crate) fn num_param_tensors(&self) -> usize {
        self.params.len()
    }

    fn param_shape(&self, loc: ParamLoc) -> Vec<usize> {
        match loc {
            ParamLoc::ConvWeight(l) => {
                let c = &self.convs[l];
                vec![c.cout, c.cin, c.kernel, c.kernel, c.kernel]
            }
            other => vec![self.param(other).len()],
        }
    }

    pub fn trainable_parameters(&self, mode: TrainableMode) -> ParamSelection {
        let indices: Vec<usize> = self
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| mode == TrainableMode::All || p.group == ParamGroup::NormAffine)
            .map(|(i, _)| i)
            .collect();
        let names = indices.iter().map(|&i| self.params[i].name.clone()).collect();
        ParamSelection { mode, indices, names }
    }

    pub fn snapshot(&self) -> ParameterSnapshot {
        ParameterSnapshot {
            entries: self
                .params
                .iter()
                .map(|p| NamedTensor { name: p.name.clone(), shape: self.param_shape(p.loc), data: self.param(p.loc).to_vec() })
                .collect(),
        }
    }

    /// Batch-norm running statistics (buffers, not parameters).
    pub fn buffers(&self) -> Vec<NamedTensor> {
        self.norms
            .iter()
            .zip(&self.norm_names)
            .flat_map(|(n, name)| {
                [
                    NamedTensor { name: format!("{name}.running_mean"), shape: vec![n.running_mean.len()], data: n.running_mean.clone() },
                    NamedTensor { name: format!("{name}.running_var"), shape: vec![n.running_var.len()], data: n.running_var.clone() },
                ]
            })
            .collect()
    }

    pub fn restore(&mut self, snapshot: &ParameterSnapshot) -> Result<()> {
        if snapshot.entries.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "snapshot has {} tensors, model has {}",
                snapshot.entries.len(),
                self.params.len()
            )));
        }
        for i in 0..self.params.len() {
            let (name, loc) = (self.params[i].name.clone(), self.params[i].loc);
            let entry = &snapshot.entries[i];
            if entry.name != name || entry.data.len() != self.param(loc).len() {
                return Err(Error::CheckpointMismatch(format!("tensor `{}` does not match `{name}`", entry.name)));
            }
            self.param_mut(loc).copy_from_slice(&entry.data);
        }
        Ok(())
    }

    fn restore_buffers(&mut self, buffers: &[NamedTensor]) -> Result<()> {
        for (l, name) in self.norm_names.clone().iter().enumerate() {
            for (suffix, is_mean) in [("running_mean", true), ("running_var", false)] {
                let key = format!("{name}.{suffix}");
                let t = buffers
                    .iter()
                    .find(|t| t.name == key)
                    .ok_or_else(|| Error::CheckpointMismatch(format!("missing buffer `{key}`")))?;
                let dst = if is_mean { &mut self.norms[l].running_mean } else { &mut self.norms[l].running_var };
                if t.data.len() != dst.len() {
                    return Err(Error::CheckpointMismatch(format!("buffer `{key}` has wrong length")));
                }
                dst.copy_from_slice(&t.data);
            }
        }
        Ok(())
    }

    /// Copies parameters and buffers from a model of identical architecture.
    pub fn copy_from(&mut self, other: &SegmentationModel) -> Result<()> {
        if other.config != self.config {
            return Err(Error::CheckpointMismatch("architectures differ".into()));
        }
        self.convs.clone_from(&other.convs);
        self.norms.clone_from(&other.norms);
        Ok(())
    }

    /// Blends running statistics: `self ← α·self + (1−α)·other`.
    pub(crate) fn blend_buffers(&mut self, other: &SegmentationModel, alpha: f64) {
        for (a, b) in self.norms.iter_mut().zip(&other.norms) {
            for (x, y) in a.running_mean.iter_mut().zip(&b.running_mean).chain(a.running_var.iter_mut().zip(&b.running_var)) {
                *x = (*x as f64 + (1.0 - alpha) * (*y as f64 - *x as f64)) as f32;
            }
        }
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let s = x.shape();
        if s[0] != self.config.in_channels {
            return Err(Error::shape(format!("model expects {} sequences, got {}", self.config.in_channels, s[0])));
        }
        let m = 1usize << self.config.depth;
        if let Some(d) = s[1..].iter().find(|&&d| d % m != 0) {
            return Err(Error::Config(format!("spatial dim {d} is not divisible by 2^depth = {m}")));
        }
        Ok(())
    }

    /// `z = f(x)`. `train_mode` normalises with the statistics of `vol`
    /// itself; running statistics are never modified here.
    pub fn forward(&self, vol: &MultiSequenceVolume, train_mode: bool) -> Result<LogitMap> {
        let mode = if train_mode { NormMode::Batch } else { NormMode::Running };
        let trace = self.forward_traced(vol.data(), mode)?;
        LogitMap::new(trace.logits())
    }

    pub fn forward_traced(&self, x: &Array4<f32>, mode: NormMode) -> Result<Trace> {
        self.check_input(x)?;
        let s = x.shape();
        let input = Feat { c: s[0], dims: [s[1], s[2], s[3]], data: x.iter().copied().collect() };
        let mut scratch = Vec::new();
        let mut values: Vec<Feat> = Vec::with_capacity(self.nodes.len());
        let mut stats = vec![None; self.nodes.len()];
        let mut input = Some(input);
        for (i, op) in self.nodes.iter().enumerate() {
            let v = match *op {
                Op::Input => input.take().expect("single input node"),
                Op::Conv { layer, src } => self.convs[layer].forward(&values[src], &mut scratch),
                Op::Norm { layer, src } => {
                    let (y, st) = self.norms[layer].forward(&values[src], mode == NormMode::Batch);
                    stats[i] = Some(st);
                    y
                }
                Op::Relu { src } => relu(&values[src]),
                Op::Upsample { src } => upsample2(&values[src]),
                Op::Add { a, b } => {
                    let mut y = values[a].clone();
                    y.add_assign(&values[b]);
                    y
                }
            };
            values.push(v);
        }
        Ok(Trace { values, stats, output: self.output })
    }

    /// Backpropagates `grad_logits` through a traced forward pass. Only
    /// parameters in `selection` receive gradients.
    pub fn backward(&self, trace: &Trace, grad_logits: &Array4<f32>, selection: &ParamSelection) -> Gradients {
        let mask = selection.mask(self.params.len());
        let mut conv_idx = vec![(None, None); self.convs.len()];
        let mut norm_idx = vec![(None, None); self.norms.len()];
        for (i, p) in self.params.iter().enumerate() {
            if !mask[i] {
                continue;
            }
            match p.loc {
                ParamLoc::ConvWeight(l) => conv_idx[l].0 = Some(i),
                ParamLoc::ConvBias(l) => conv_idx[l].1 = Some(i),
                ParamLoc::Gamma(l) => norm_idx[l].0 = Some(i),
                ParamLoc::Beta(l) => norm_idx[l].1 = Some(i),
            }
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.params.len()];
        for &i in &selection.indices {
            grads[i] = Some(vec![0.0; self.param_at(i).len()]);
        }

        let out = &trace.values[self.output];
        let mut node_grads: Vec<Option<Feat>> = vec![None; self.nodes.len()];
        node_grads[self.output] = Some(Feat { c: out.c, dims: out.dims, data: grad_logits.iter().copied().collect() });
        let mut scratch = Vec::new();

        let push = |node_grads: &mut Vec<Option<Feat>>, idx: usize, g: Feat| match node_grads[idx].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => node_grads[idx] = Some(g),
        };

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = node_grads[i].take() else { continue };
            match self.nodes[i] {
                Op::Input => {}
                Op::Conv { layer, src } => {
                    let need_dx = !matches!(self.nodes[src], Op::Input);
                    let (wi, bi) = conv_idx[layer];
                    let (gw, gb) = split_two(&mut grads, wi, bi);
                    if let Some(gx) = self.convs[layer].backward(&trace.values[src], &g, need_dx, gw, gb, &mut scratch) {
                        push(&mut node_grads, src, gx);
                    }
                }
                Op::Norm { layer, src } => {
                    let (gi, bi) = norm_idx[layer];
                    let (gg, gb) = split_two(&mut grads, gi, bi);
                    let st = trace.stats[i].as_ref().expect("norm stats recorded");
                    if let Some(gx) = self.norms[layer].backward(&trace.values[src], &g, st, true, gg, gb) {
                        push(&mut node_grads, src, gx);
                    }
                }
                Op::Relu { src } => {
                    let gx = relu_backward(&trace.values[i], &g);
                    push(&mut node_grads, src, gx);
                }
                Op::Upsample { src } => push(&mut node_grads, src, upsample2_backward(&g)),
                Op::Add { a, b } => {
                    push(&mut node_grads, b, g.clone());
                    push(&mut node_grads, a, g);
                }
            }
        }
        Gradients(grads)
    }

    /// Folds the batch statistics of a traced train-mode pass into the
    /// running statistics.
    pub fn update_running_stats(&mut self, trace: &Trace, momentum: f32) {
        for (i, op) in self.nodes.iter().enumerate() {
            if let (Op::Norm { layer, .. }, Some(st)) = (op, trace.stats[i].as_ref()) {
                self.norms[*layer].update_running(st, momentum);
            }
        }
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new("checkpoint");
        let mut header_meta = serde_json::json!({ "model": self.config });
        if let (Some(dst), serde_json::Value::Object(extra)) = (header_meta.as_object_mut(), meta) {
            dst.extend(extra);
        }
        c.header.meta = header_meta;
        for t in self.snapshot().entries.into_iter().chain(self.buffers()) {
            c.push(t.name, &t.shape, t.data);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("checkpoint")?;
        let config: ModelConfig = serde_json::from_value(c.header.meta.get("model").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        let mut model = Self::build(config)?;
        model.load_tensors(c)?;
        Ok(model)
    }

    /// Loads a checkpoint and insists it was produced for `expected`.
    pub fn from_container_expecting(c: &Container, expected: &ModelConfig) -> Result<Self> {
        let model = Self::from_container(c)?;
        let got = model.config;
        let same_arch = got.in_channels == expected.in_channels
            && got.out_channels == expected.out_channels
            && got.depth == expected.depth
            && got.base_channels == expected.base_channels;
        if !same_arch {
            return Err(Error::CheckpointMismatch(format!("checkpoint architecture {got:?}, expected {expected:?}")));
        }
        Ok(model)
    }

    fn load_tensors(&mut self, c: &Container) -> Result<()> {
        let mut snap = self.snapshot();
        for t in &mut snap.entries {
            let (entry, data) = c
                .get(&t.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor `{}`", t.name)))?;
            if entry.shape != t.shape {
                return Err(Error::CheckpointMismatch(format!("tensor `{}` has shape {:?}, expected {:?}", t.name, entry.shape, t.shape)));
            }
            t.data.copy_from_slice(data);
        }
        self.restore(&snap)?;
        let buffers: Vec<NamedTensor> = c
            .header
            .tensors
            .iter()
            .zip(&c.payloads)
            .filter(|(t, _)| t.name.ends_with(".running_mean") || t.name.ends_with(".running_var"))
            .map(|(t, d)| NamedTensor { name: t.name.clone(), shape: t.shape.clone(), data: d.clone() })
            .collect();
        self.restore_buffers(&buffers)
    }
}

fn split_two(grads: &mut [Option<Vec<f32>>], a: Option<usize>, b: Option<usize>) -> (Option<&mut [f32]>, Option<&mut [f32]>) {
    match (a, b) {
        (Some(i), Some(j)) => {
            debug_assert!(i < j);
            let (lo, hi) = grads.split_at_mut(j);
            (lo[i].as_deref_mut(), hi[0].as_deref_mut())
        }
        (Some(i), None) => (grads[i].as_deref_mut(), None),
        (None, Some(j)) => (None, grads[j].as_deref_mut()),
        (None, None) => (None, None),
    }
}

fn feat_to_array(f: &Feat) -> Array4<f32> {
    Array4::from_shape_vec((f.c, f.dims[0], f.dims[1], f.dims[2]), f.data.clone()).expect("consistent feature shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn random_input(s: usize, d: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((s, d, d, d), |_| rng.random_range(-1.0f32..1.0))
    }

    fn small() -> ModelConfig {
        ModelConfig { in_channels: 4, out_channels: 3, depth: 3, base_channels: 4, seed: 11 }
    }

    #[test]
    fn output_shape_matches_contract() {
        let model = SegmentationModel::build(ModelConfig { base_channels: 8, ..small() }).unwrap();
        let vol = MultiSequenceVolume::from_array(random_input(4, 32, 1)).unwrap();
        let z = model.forward(&vol, false).unwrap();
        assert_eq!(z.data().shape(), &[3, 32, 32, 32]);
        let vol16 = MultiSequenceVolume::from_array(random_input(4, 16, 1)).unwrap();
        assert_eq!(model.forward(&vol16, true).unwrap().data().shape(), &[3, 16, 16, 16]);
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let model = SegmentationModel::build(small()).unwrap();
        let vol = MultiSequenceVolume::from_array(random_input(4, 12, 1)).unwrap();
        assert!(matches!(model.forward(&vol, false), Err(Error::Config(_))));
        let wrong = MultiSequenceVolume::from_array(random_input(3, 16, 1)).unwrap();
        assert!(matches!(model.forward(&wrong, false), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SegmentationModel::build(ModelConfig { depth: 1, ..small() }).is_err());
        assert!(SegmentationModel::build(ModelConfig { base_channels: 2, ..small() }).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = SegmentationModel::build(small()).unwrap().snapshot();
        let b = SegmentationModel::build(small()).unwrap().snapshot();
        assert_eq!(a, b);
        let c = SegmentationModel::build(ModelConfig { seed: 12, ..small() }).unwrap().snapshot();
        assert_ne!(a, c);
    }

    #[test]
    fn eval_forward_is_bitwise_repeatable() {
        let model = SegmentationModel::build(small()).unwrap();
        let vol = MultiSequenceVolume::from_array(random_input(4, 16, 2)).unwrap();
        assert_eq!(model.forward(&vol, false).unwrap(), model.forward(&vol, false).unwrap());
        let scaled = MultiSequenceVolume::from_array(vol.data() * 2.0).unwrap();
        assert_ne!(model.forward(&vol, false).unwrap(), model.forward(&scaled, false).unwrap());
    }

    #[test]
    fn parameter_groups_partition_the_model() {
        let model = SegmentationModel::build(small()).unwrap();
        let affine = model.trainable_parameters(TrainableMode::BnAffineOnly);
        let all = model.trainable_parameters(TrainableMode::All);
        assert!(affine.names.iter().all(|n| n.contains(NORM_TAG)));
        assert_eq!(all.names, model.snapshot().names().map(String::from).collect::<Vec<_>>());
        assert!(affine.indices.len() < all.indices.len());
        let other: Vec<_> = (0..model.num_param_tensors()).filter(|&i| model.param_group(i) == ParamGroup::Other).collect();
        assert_eq!(affine.indices.len() + other.len(), all.indices.len());
        assert!(other.iter().all(|i| !affine.indices.contains(i)));
        assert!(other.iter().all(|&i| !model.param_names()[i].contains(NORM_TAG)));
    }

    /// Finite-difference check of the full backward pass on a scalar
    /// projection of the logits, in both normalisation modes.
    #[test]
    fn backward_matches_finite_differences() {
        let mut model = SegmentationModel::build(small()).unwrap();
        let x = random_input(4, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proj = Array::from_shape_fn((3, 16, 16, 16), |_| rng.random_range(-1.0f32..1.0));
        let all = model.trainable_parameters(TrainableMode::All);
        for mode in [NormMode::Batch, NormMode::Running] {
            let objective = |m: &SegmentationModel| -> f64 {
                let z = m.forward_traced(&x, mode).unwrap().logits();
                z.iter().zip(proj.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
            };
            let trace = model.forward_traced(&x, mode).unwrap();
            let grads = model.backward(&trace, &proj, &all);
            let names = model.param_names();
            for probe in ["enc0.0.bn.weight", "enc2.1.bn.bias", "dec1.0.bn.weight", "enc1.0.conv.weight", "head.bias"] {
                let idx = names.iter().position(|n| n == probe).unwrap();
                let analytic = grads.get(idx).unwrap()[0] as f64;
                let h = 2e-3f32;
                let orig = model.param_at(idx)[0];
                model.param_at_mut(idx)[0] = orig + h;
                let up = objective(&model);
                model.param_at_mut(idx)[0] = orig - h;
                let down = objective(&model);
                model.param_at_mut(idx)[0] = orig;
                let fd = (up - down) / (2.0 * h as f64);
                // ReLU kinks and f32 accumulation limit the attainable agreement;
                // wiring mistakes show up as order-one discrepancies.
                let tol = 0.06 * analytic.abs() + 0.3;
                assert!((fd - analytic).abs() < tol, "{mode:?} {probe}: fd {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn bn_affine_selection_leaves_other_group_without_gradients() {
        let model = SegmentationModel::build(small()).unwrap();
        let sel = model.trainable_parameters(TrainableMode::BnAffineOnly);
        let x = random_input(4, 8, 5);
        let trace = model.forward_traced(&x, NormMode::Batch).unwrap();
        let g = model.backward(&trace, &Array4::from_elem((3, 8, 8, 8), 1.0), &sel);
        for i in 0..model.num_param_tensors() {
            assert_eq!(g.get(i).is_some(), model.param_group(i) == ParamGroup::NormAffine);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let model = SegmentationModel::build(small()).unwrap();
        let c = model.to_container(serde_json::json!({ "epoch": 3 }));
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let loaded = SegmentationModel::from_container(&back).unwrap();
        assert_eq!(loaded, model);
        let other = ModelConfig { base_channels: 8, ..small() };
        assert!(matches!(
            SegmentationModel::from_container_expecting(&back, &other),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
