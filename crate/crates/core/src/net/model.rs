use super::{ChannelPlan, DenseNetConfig, MetadataSpec, NetError, Result, Stage};
use crate::tensor::{BatchNormMode, BatchStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    /// Trainable weight.
    Parameter,
    /// Running statistic updated outside the optimizer.
    Buffer,
}

/// A stored model tensor. Values are kept in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(&self.shape, &self.data).expect("stored tensor shape is consistent")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Norm,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub backbone: Vec<String>,
    pub head: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Batch statistics in normalization layers and active dropout.
    pub train: bool,
    /// Seed for dropout masks when training.
    pub dropout_seed: u64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self { train: true, dropout_seed }
    }
}

/// Tape variables for the parameters of one model.
#[derive(Debug, Clone)]
pub struct Bound {
    by_tensor: Vec<Option<Var>>,
    params: Vec<(usize, Var)>,
}

impl Bound {
    /// Parameter variables in model order.
    pub fn param_vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.params.iter().map(|&(_, v)| v)
    }

    /// `(tensor index in the model, variable)` per parameter.
    pub fn entries(&self) -> &[(usize, Var)] {
        &self.params
    }
}

/// Result of one forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub probs: Var,
    /// Head input: pooled image features, plus metadata when fused.
    pub features: Var,
    /// Output of every convolution, keyed by layer name.
    pub activations: Vec<(String, Var)>,
    /// Batch statistics per normalization layer (train mode only).
    pub batch_stats: Vec<(String, BatchStats)>,
}

impl Forward {
    pub fn activation(&self, layer: &str) -> Option<Var> {
        self.activations.iter().find(|(n, _)| n == layer).map(|&(_, v)| v)
    }
}

/// A built DenseNet with named tensors.
#[derive(Debug, Clone)]
pub struct Model {
    config: DenseNetConfig,
    plan: ChannelPlan,
    tensors: Vec<NamedTensor>,
    index: HashMap<String, usize>,
    metadata: Option<MetadataSpec>,
}

struct Builder {
    rng: ChaCha8Rng,
    spatial_dims: usize,
    tensors: Vec<NamedTensor>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, role: TensorRole, data: Vec<f32>) {
        self.tensors.push(NamedTensor { name, shape, role, data });
    }

    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        let mut shape = vec![c_out, c_in];
        shape.extend(std::iter::repeat_n(k, self.spatial_dims));
        let fan_in = c_in * k.pow(self.spatial_dims as u32);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        self.push(format!("{name}.weight"), shape, TensorRole::Parameter, data);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.weight"), vec![c], TensorRole::Parameter, vec![1.0; c]);
        self.push(format!("{name}.bias"), vec![c], TensorRole::Parameter, vec![0.0; c]);
        self.push(format!("{name}.running_mean"), vec![c], TensorRole::Buffer, vec![0.0; c]);
        self.push(format!("{name}.running_var"), vec![c], TensorRole::Buffer, vec![1.0; c]);
    }

    fn uniform(&mut self, n: usize, fan_in: usize) -> Vec<f32> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect()
    }

    fn linear(&mut self, name: &str, f: usize, k: usize) {
        let w = self.uniform(f * k, f);
        let b = self.uniform(k, f);
        self.push(format!("{name}.weight"), vec![f, k], TensorRole::Parameter, w);
        self.push(format!("{name}.bias"), vec![k], TensorRole::Parameter, b);
    }
}

fn index_of(tensors: &[NamedTensor]) -> HashMap<String, usize> {
    tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect()
}

impl Model {
    /// Builds and initializes a model. Convolutions draw from
    /// `N(0, 2/fan_in)`, the head from `U(±1/√fan_in)`; normalization starts
    /// at identity.
    pub fn build(config: DenseNetConfig, seed: u64) -> Result<Self> {
        let plan = config.plan()?;
        let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), spatial_dims: config.spatial_dims, tensors: vec![] };
        let k = config.growth_rate;
        let bottleneck = config.bn_size * k;
        b.conv("stem.conv", config.init_channels, config.in_channels, 7);
        b.norm("stem.norm", config.init_channels);
        for stage in &plan.stages {
            match stage {
                Stage::Stem { .. } => {}
                Stage::Block { index, layers, in_channels, .. } => {
                    for l in 0..*layers {
                        let p = format!("block{index}.layer{}", l + 1);
                        let c = in_channels + l * k;
                        b.norm(&format!("{p}.norm1"), c);
                        b.conv(&format!("{p}.conv1"), bottleneck, c, 1);
                        b.norm(&format!("{p}.norm2"), bottleneck);
                        b.conv(&format!("{p}.conv2"), k, bottleneck, 3);
                    }
                }
                Stage::Transition { index, in_channels, out_channels, .. } => {
                    b.norm(&format!("transition{index}.norm"), *in_channels);
                    b.conv(&format!("transition{index}.conv"), *out_channels, *in_channels, 1);
                }
            }
        }
        b.norm("final.norm", plan.feature_width);
        b.linear("head", plan.feature_width, config.num_classes);
        let tensors = b.tensors;
        let index = index_of(&tensors);
        debug_assert_eq!(index.len(), tensors.len());
        Ok(Self { config, plan, tensors, index, metadata: None })
    }

    /// Rebuilds a model from stored tensors. Every tensor of the
    /// architecture must be supplied exactly once with the right shape.
    pub fn from_tensors(
        config: DenseNetConfig,
        metadata: Option<MetadataSpec>,
        tensors: Vec<NamedTensor>,
    ) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        if let Some(spec) = metadata {
            model = model.fuse_metadata(spec, 0)?;
        }
        let mut seen = vec![false; model.tensors.len()];
        for t in tensors {
            let &i = model.index.get(&t.name).ok_or_else(|| NetError::UnknownTensorName(t.name.clone()))?;
            let slot = &mut model.tensors[i];
            if slot.shape != t.shape || slot.role != t.role || t.data.len() != slot.data.len() {
                return Err(NetError::ShapeMismatch(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    t.name, t.shape, slot.shape
                )));
            }
            slot.data = t.data;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(NetError::ShapeMismatch(format!("tensor '{}' missing", model.tensors[i].name)));
        }
        Ok(model)
    }

    pub fn config(&self) -> &DenseNetConfig {
        &self.config
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.plan
    }

    pub fn metadata_spec(&self) -> Option<&MetadataSpec> {
        self.metadata.as_ref()
    }

    pub fn is_fused(&self) -> bool {
        self.metadata.is_some()
    }

    pub fn head_input_width(&self) -> usize {
        self.plan.feature_width + self.metadata.as_ref().map_or(0, |m| m.dim())
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub(crate) fn metadata_spec_mut(&mut self) -> Option<&mut MetadataSpec> {
        self.metadata.as_mut()
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| NetError::UnknownTensorName(name.to_string()))
    }

    /// Replaces the values of a named tensor, e.g. with externally supplied weights.
    pub fn set_tensor(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let &i = self.index.get(name).ok_or_else(|| NetError::UnknownTensorName(name.to_string()))?;
        if data.len() != self.tensors[i].data.len() {
            return Err(NetError::ShapeMismatch(format!(
                "tensor '{name}' holds {} values, got {}",
                self.tensors[i].data.len(),
                data.len()
            )));
        }
        self.tensors[i].data = data;
        Ok(())
    }

    pub fn parameter_names(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| t.role == TensorRole::Parameter).map(|t| t.name.as_str()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.role == TensorRole::Parameter).map(|t| t.data.len()).sum()
    }

    /// Kind of a named layer (tensor names without the trailing field).
    pub fn layer_kind(&self, layer: &str) -> Option<LayerKind> {
        if !self.index.contains_key(&format!("{layer}.weight")) {
            return None;
        }
        Some(if layer == "head" {
            LayerKind::Linear
        } else if self.index.contains_key(&format!("{layer}.running_mean")) {
            LayerKind::Norm
        } else {
            LayerKind::Conv
        })
    }

    /// Convolution layer names in forward order.
    pub fn conv_layer_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter_map(|t| t.name.strip_suffix(".weight"))
            .filter(|l| self.layer_kind(l) == Some(LayerKind::Conv))
            .map(str::to_string)
            .collect()
    }

    /// Last convolution of the last dense block.
    pub fn last_conv_layer(&self) -> String {
        let b = self.config.block_layers.len();
        format!("block{b}.layer{}.conv2", self.config.block_layers[b - 1])
    }

    pub fn param_partition(&self) -> ParamPartition {
        let (head, backbone): (Vec<String>, Vec<String>) =
            self.parameter_names().into_iter().map(str::to_string).partition(|n| n.starts_with("head."));
        ParamPartition { backbone, head }
    }

    /// Widens the head to take `[features, metadata]`. Existing head weights
    /// for the image features are kept; metadata rows start from the
    /// uniform head initialization.
    pub fn fuse_metadata(&self, spec: MetadataSpec, seed: u64) -> Result<Self> {
        if self.metadata.is_some() {
            return Err(NetError::AlreadyFused);
        }
        let f = self.plan.feature_width;
        let m = spec.dim();
        let k = self.config.num_classes;
        let mut out = self.clone();
        let i = self.index["head.weight"];
        let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), spatial_dims: 0, tensors: vec![] };
        let mut w = self.tensors[i].data.clone();
        w.extend(b.uniform(m * k, f + m));
        out.tensors[i].shape = vec![f + m, k];
        out.tensors[i].data = w;
        out.metadata = Some(spec);
        Ok(out)
    }

    /// Creates tape leaves for every parameter; `trainable` decides which
    /// of them require gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut by_tensor = vec![None; self.tensors.len()];
        let mut params = Vec::new();
        for (i, t) in self.tensors.iter().enumerate() {
            if t.role == TensorRole::Parameter {
                let v = tape.leaf(t.to_tensor(), trainable(&t.name));
                by_tensor[i] = Some(v);
                params.push((i, v));
            }
        }
        Bound { by_tensor, params }
    }

    /// Binds caller-supplied double-precision parameter values, given in
    /// [`Model::parameter_names`] order.
    pub fn bind_values(&self, tape: &mut Tape, values: &[Tensor], requires_grad: bool) -> Result<Bound> {
        let mut by_tensor = vec![None; self.tensors.len()];
        let mut params = Vec::new();
        let mut it = values.iter();
        for (i, t) in self.tensors.iter().enumerate() {
            if t.role == TensorRole::Parameter {
                let v = it.next().ok_or_else(|| NetError::ShapeMismatch("too few parameter values".into()))?;
                if v.shape() != t.shape.as_slice() {
                    return Err(NetError::ShapeMismatch(format!("value for '{}' has shape {:?}", t.name, v.shape())));
                }
                let var = tape.leaf(v.clone(), requires_grad);
                by_tensor[i] = Some(var);
                params.push((i, var));
            }
        }
        if it.next().is_some() {
            return Err(NetError::ShapeMismatch("too many parameter values".into()));
        }
        Ok(Bound { by_tensor, params })
    }

    /// Uses existing tape variables as the parameters, in
    /// [`Model::parameter_names`] order.
    pub fn bind_vars(&self, tape: &Tape, vars: &[Var]) -> Result<Bound> {
        let mut by_tensor = vec![None; self.tensors.len()];
        let mut params = Vec::new();
        let mut it = vars.iter();
        for (i, t) in self.tensors.iter().enumerate() {
            if t.role == TensorRole::Parameter {
                let &v = it.next().ok_or_else(|| NetError::ShapeMismatch("too few parameter variables".into()))?;
                if tape.shape(v) != t.shape.as_slice() {
                    return Err(NetError::ShapeMismatch(format!("variable for '{}' has shape {:?}", t.name, tape.shape(v))));
                }
                by_tensor[i] = Some(v);
                params.push((i, v));
            }
        }
        if it.next().is_some() {
            return Err(NetError::ShapeMismatch("too many parameter variables".into()));
        }
        Ok(Bound { by_tensor, params })
    }

    /// Expected batch shape for `n` samples.
    pub fn input_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n, self.config.in_channels];
        s.extend(&self.config.input_shape);
        s
    }

    /// Records a forward pass on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        metadata: Option<Var>,
        opts: ForwardOptions,
    ) -> Result<Forward> {
        let n = tape.shape(x)[0];
        if tape.shape(x) != self.input_shape(n).as_slice() {
            return Err(NetError::ShapeMismatch(format!(
                "batch {:?} does not match input {:?}",
                tape.shape(x),
                self.input_shape(n)
            )));
        }
        match (&self.metadata, metadata) {
            (Some(_), None) => return Err(NetError::MetadataMissing),
            (None, Some(_)) => return Err(NetError::MetadataUnexpected),
            (Some(spec), Some(m)) if tape.shape(m) != [n, spec.dim()] => {
                return Err(NetError::ShapeMismatch(format!(
                    "metadata {:?}, expected [{n}, {}]",
                    tape.shape(m),
                    spec.dim()
                )));
            }
            _ => {}
        }
        let mut cx = Ctx::new(self, tape, bound, opts);
        let sd = self.config.spatial_dims;
        let mut h = cx.conv("stem.conv", x, 2, 3)?;
        h = cx.bn_relu("stem.norm", h)?;
        h = cx.tape.max_pool(h, &vec![3; sd], &vec![2; sd], &vec![1; sd])?;
        for stage in &self.plan.stages {
            match stage {
                Stage::Stem { .. } => {}
                Stage::Block { index, layers, .. } => h = cx.dense_block(*index, *layers, h)?,
                Stage::Transition { index, .. } => h = cx.transition(*index, h)?,
            }
        }
        h = cx.bn_relu("final.norm", h)?;
        let pooled = cx.tape.global_avg_pool(h)?;
        let features = match metadata {
            Some(m) => cx.tape.concat_channels(&[pooled, m])?,
            None => pooled,
        };
        let (w, b) = (cx.param("head.weight")?, cx.param("head.bias")?);
        let logits = cx.tape.linear(features, w, Some(b))?;
        let probs = cx.tape.softmax(logits)?;
        Ok(Forward { logits, probs, features, activations: cx.activations, batch_stats: cx.stats })
    }

    /// Eval-mode class probabilities `[N, num_classes]`.
    pub fn forward(&self, batch: &Tensor, metadata: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let x = tape.leaf(batch.clone(), false);
        let m = metadata.map(|m| tape.leaf(m.clone(), false));
        let out = self.forward_on(&mut tape, &bound, x, m, ForwardOptions::eval())?;
        Ok(tape.value(out.probs).clone())
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        let momentum = self.config.bn_momentum;
        for (layer, s) in stats {
            let mi = *self
                .index
                .get(&format!("{layer}.running_mean"))
                .ok_or_else(|| NetError::UnknownTensorName(format!("{layer}.running_mean")))?;
            let vi = self.index[&format!("{layer}.running_var")];
            let mut mean: Vec<f64> = self.tensors[mi].data.iter().map(|&v| v as f64).collect();
            let mut var: Vec<f64> = self.tensors[vi].data.iter().map(|&v| v as f64).collect();
            s.update_running(momentum, &mut mean, &mut var);
            self.tensors[mi].data = mean.iter().map(|&v| v as f32).collect();
            self.tensors[vi].data = var.iter().map(|&v| v as f32).collect();
        }
        Ok(())
    }
}

struct Ctx<'a> {
    model: &'a Model,
    tape: &'a mut Tape,
    bound: &'a Bound,
    opts: ForwardOptions,
    rng: ChaCha8Rng,
    activations: Vec<(String, Var)>,
    stats: Vec<(String, BatchStats)>,
}

impl<'a> Ctx<'a> {
    fn new(model: &'a Model, tape: &'a mut Tape, bound: &'a Bound, opts: ForwardOptions) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
        Self { model, tape, bound, opts, rng, activations: vec![], stats: vec![] }
    }

    fn param(&self, name: &str) -> Result<Var> {
        self.model
            .index
            .get(name)
            .and_then(|&i| self.bound.by_tensor[i])
            .ok_or_else(|| NetError::UnknownTensorName(name.to_string()))
    }

    fn buffer(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.model.tensor(name)?.data.iter().map(|&v| v as f64).collect())
    }

    fn bn_relu(&mut self, layer: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{layer}.weight"))?;
        let beta = self.param(&format!("{layer}.bias"))?;
        let eps = self.model.config.bn_eps;
        let y = if self.opts.train {
            let (y, s) = self.tape.batch_norm(x, gamma, beta, BatchNormMode::Train { eps })?;
            self.stats.push((layer.to_string(), s.expect("train mode returns statistics")));
            y
        } else {
            let mean = self.buffer(&format!("{layer}.running_mean"))?;
            let var = self.buffer(&format!("{layer}.running_var"))?;
            self.tape.batch_norm(x, gamma, beta, BatchNormMode::Eval { mean: &mean, var: &var, eps })?.0
        };
        Ok(self.tape.relu(y))
    }

    fn conv(&mut self, layer: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{layer}.weight"))?;
        let sd = self.model.config.spatial_dims;
        let y = self.tape.conv(x, w, None, &vec![stride; sd], &vec![pad; sd])?;
        self.activations.push((layer.to_string(), y));
        Ok(y)
    }

    fn dense_block(&mut self, block: usize, layers: usize, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        for l in 1..=layers {
            let p = format!("block{block}.layer{l}");
            let input = if feats.len() == 1 { x } else { self.tape.concat_channels(&feats)? };
            let mut h = self.bn_relu(&format!("{p}.norm1"), input)?;
            h = self.conv(&format!("{p}.conv1"), h, 1, 0)?;
            h = self.bn_relu(&format!("{p}.norm2"), h)?;
            h = self.conv(&format!("{p}.conv2"), h, 1, 1)?;
            let rate = self.model.config.dropout_rate;
            if self.opts.train && rate > 0.0 {
                let keep: Vec<bool> = (0..self.tape.value(h).numel()).map(|_| self.rng.random::<f64>() >= rate).collect();
                h = self.tape.dropout(h, &keep, rate)?;
            }
            feats.push(h);
        }
        if feats.len() == 1 {
            Ok(x)
        } else {
            Ok(self.tape.concat_channels(&feats)?)
        }
    }

    fn transition(&mut self, index: usize, x: Var) -> Result<Var> {
        let spatial = self.tape.shape(x)[2..].to_vec();
        if spatial.iter().any(|&s| s < 2) {
            return Err(NetError::SpatialTooSmall(spatial));
        }
        let h = self.bn_relu(&format!("transition{index}.norm"), x)?;
        let h = self.conv(&format!("transition{index}.conv"), h, 1, 0)?;
        let sd = spatial.len();
        Ok(self.tape.avg_pool(h, &vec![2; sd], &vec![2; sd])?)
    }
}
