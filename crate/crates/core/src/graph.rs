//! Layer-graph models: a small residual classifier with strided-conv
//! downsampling, an interpreter that executes it either on a tape (for
//! gradients) or directly (for cheap inference), and structural queries used
//! by the artifact-removal strategies.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng;
use crate::tape::{RollSet, Tape, ValueId, PHASE_ROLLS};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    /// Eval-mode batchnorm folded to a learnable per-channel affine.
    FrozenBn { channels: usize },
    Relu,
    ResidualAdd,
    MaxPool2x,
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    BilinearDown2x,
}

impl LayerKind {
    /// Parameter keys this layer owns, suffixes of "<id>.<name>".
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            LayerKind::Conv { bias: true, .. } => &["weight", "bias"],
            LayerKind::Conv { bias: false, .. } => &["weight"],
            LayerKind::Linear { bias: true, .. } => &["weight", "bias"],
            LayerKind::Linear { bias: false, .. } => &["weight"],
            LayerKind::FrozenBn { .. } => &["scale", "shift"],
            _ => &[],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
    /// Indices of producer layers, each strictly less than this layer's own.
    pub inputs: Vec<usize>,
}

/// How the interpreter treats one downsampling conv during a run.
#[derive(Debug, Clone)]
pub enum ConvBehavior<T: Element> {
    /// Unmodified forward; the gradient hook averages rolled copies of the
    /// input-gradient during backprop.
    GradHook(RollSet),
    /// Forward pass averages the conv over the four rolled inputs.
    ForwardAvg,
    /// Forward pass replaced by conv_pre -> bilinear down2x -> conv_post.
    Surrogate {
        pre_weight: Tensor<T>,
        pre_bias: Tensor<T>,
        post_weight: Tensor<T>,
        post_bias: Tensor<T>,
    },
}

/// Per-conv behavior overrides; convs not listed run unmodified.
#[derive(Debug, Clone, Default)]
pub struct ExecPlan<T: Element> {
    pub conv: BTreeMap<String, ConvBehavior<T>>,
    /// Reference inputs for the rescale rule, keyed by relu layer id: those
    /// relus backpropagate (relu(x) - relu(x_ref)) / (x - x_ref) instead of
    /// the step function. Forward values are unchanged.
    pub relu_refs: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ExecPlan<T> {
    pub fn original() -> Self {
        ExecPlan { conv: BTreeMap::new(), relu_refs: BTreeMap::new() }
    }
}

/// Rescale-rule multiplier: difference ratio where the input moved more
/// than 1e-7 from the reference, the local relu gradient elsewhere. The
/// reference covers one sample and is recycled across the batch.
fn rescale_multiplier<T: Element>(x: &Tensor<T>, xref: &Tensor<T>) -> Result<Tensor<T>> {
    if x.numel() % xref.numel() != 0 || x.shape()[1..] != xref.shape()[1..] {
        return Err(Error::shape(format!(
            "rescale reference shape {:?} does not tile value shape {:?}",
            xref.shape(),
            x.shape()
        )));
    }
    let rn = xref.numel();
    let rd = xref.data();
    let data: Vec<T> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let r = rd[i % rn];
            let dx = v - r;
            if dx.to_f64().abs() > 1e-7 {
                (relu_scalar(v) - relu_scalar(r)) / dx
            } else if v > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

fn relu_scalar<T: Element>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// Result of a taped forward: handles into the tape for the logits, the
/// model input, any captured activations, and (when trainable) parameters.
pub struct TapeRun<T: Element> {
    pub input: ValueId,
    pub logits: ValueId,
    pub captured: BTreeMap<String, ValueId>,
    pub param_ids: BTreeMap<String, ValueId>,
    _marker: std::marker::PhantomData<T>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph<T: Element> {
    pub layers: Vec<Layer>,
    pub params: BTreeMap<String, Tensor<T>>,
    pub input_channels: usize,
    pub image_size: usize,
    pub classes: usize,
    index: BTreeMap<String, usize>,
    aliases: BTreeMap<String, String>,
}

/// Configuration for the residual classifier builder.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
pub struct MiniResnetCfg {
    pub input_channels: usize,
    pub image_size: usize,
    pub classes: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for MiniResnetCfg {
    fn default() -> Self {
        MiniResnetCfg {
            input_channels: 3,
            image_size: 64,
            classes: 4,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
        }
    }
}

/// Kaiming-uniform fan-in bound for relu networks: sqrt(6 / fan_in).
fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl<T: Element> ModelGraph<T> {
    pub fn empty(input_channels: usize, image_size: usize, classes: usize) -> Self {
        let mut g = ModelGraph {
            layers: Vec::new(),
            params: BTreeMap::new(),
            input_channels,
            image_size,
            classes,
            index: BTreeMap::new(),
            aliases: BTreeMap::new(),
        };
        g.push_layer("input", LayerKind::Input, vec![]).expect("fresh graph");
        g
    }

    /// Append a layer; inputs must reference existing layers.
    pub fn push_layer(
        &mut self,
        id: &str,
        kind: LayerKind,
        inputs: Vec<usize>,
    ) -> Result<usize> {
        if self.index.contains_key(id) {
            return Err(Error::config(format!("duplicate layer id {id:?}")));
        }
        let idx = self.layers.len();
        for &i in &inputs {
            if i >= idx {
                return Err(Error::config(format!(
                    "layer {id:?}: input index {i} not yet defined"
                )));
            }
        }
        let arity = match kind {
            LayerKind::Input => 0,
            LayerKind::ResidualAdd => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::config(format!(
                "layer {id:?}: expected {arity} inputs, got {}",
                inputs.len()
            )));
        }
        self.index.insert(id.to_string(), idx);
        self.layers.push(Layer { id: id.to_string(), kind, inputs });
        Ok(idx)
    }

    pub fn set_param(&mut self, key: &str, value: Tensor<T>) {
        self.params.insert(key.to_string(), value);
    }

    pub fn add_alias(&mut self, alias: &str, target: &str) -> Result<()> {
        if !self.index.contains_key(target) {
            return Err(Error::config(format!(
                "alias {alias:?} points at unknown layer {target:?}"
            )));
        }
        self.aliases.insert(alias.to_string(), target.to_string());
        Ok(())
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    /// Resolve a user-facing layer name (id, alias, or "input") to an index.
    pub fn resolve(&self, name: &str) -> Result<usize> {
        let canon = if name.eq_ignore_ascii_case("input") { "input" } else { name };
        let target = self.aliases.get(canon).map(String::as_str).unwrap_or(canon);
        self.index
            .get(target)
            .copied()
            .ok_or_else(|| Error::usage(format!("unknown layer {name:?}")))
    }

    pub fn layer_id(&self, idx: usize) -> &str {
        &self.layers[idx].id
    }

    fn param(&self, id: &str, name: &str) -> Result<&Tensor<T>> {
        let key = format!("{id}.{name}");
        self.params
            .get(&key)
            .ok_or_else(|| Error::config(format!("missing parameter {key:?}")))
    }

    /// Initialize parameters for every layer from per-layer named streams:
    /// Kaiming-uniform weights, zero biases, identity affine.
    pub fn init_params(&mut self, seed: u64) {
        let mut fresh = BTreeMap::new();
        for layer in &self.layers {
            init_layer_params::<T>(layer, seed, &mut fresh);
        }
        self.params = fresh;
    }

    /// Downsampling convs (stride 2) in forward order. The first is the stem
    /// and is never modified; `eligible` additionally requires the conv to
    /// halve even spatial extents exactly.
    pub fn downsampling_convs(&self) -> Vec<DownsamplingConv> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let LayerKind::Conv { kernel, stride: 2, padding, .. } = layer.kind {
                let first = out.is_empty();
                out.push(DownsamplingConv {
                    id: layer.id.clone(),
                    excluded: first,
                    eligible: !first && halves_exactly(kernel, padding),
                });
            }
        }
        out
    }

    /// Layer ids feeding each conv (by conv id), for activation harvesting.
    pub fn conv_input_id(&self, conv_id: &str) -> Result<String> {
        let idx = self.resolve(conv_id)?;
        let layer = &self.layers[idx];
        if !matches!(layer.kind, LayerKind::Conv { .. }) {
            return Err(Error::usage(format!("{conv_id:?} is not a conv layer")));
        }
        Ok(self.layers[layer.inputs[0]].id.clone())
    }

    /// Re-initialize the parameters of `upto` and every later parameterized
    /// layer; earlier layers keep their trained values bit-identically.
    pub fn randomize_from_end(&self, upto: &str, seed: u64) -> Result<Self> {
        let cut = self.resolve(upto)?;
        if self.layers[cut].kind.param_names().is_empty() {
            return Err(Error::usage(format!(
                "layer {upto:?} has no parameters to randomize"
            )));
        }
        let mut copy = self.clone();
        for layer in &self.layers[cut..] {
            if !layer.kind.param_names().is_empty() {
                init_layer_params::<T>(layer, seed, &mut copy.params);
            }
        }
        Ok(copy)
    }

    /// Forward on a tape starting from the model input.
    pub fn forward_tape(
        &self,
        tape: &Tape<T>,
        input: &Tensor<T>,
        plan: &ExecPlan<T>,
        capture: &[String],
        train_params: bool,
    ) -> Result<TapeRun<T>> {
        let input_id = tape.leaf(input.clone());
        self.run_tape(tape, 0, input_id, plan, capture, train_params)
    }

    /// Resume a taped forward from a mid-graph activation. Valid only at cut
    /// points that later layers depend on exclusively (stage outputs).
    pub fn forward_tape_from(
        &self,
        tape: &Tape<T>,
        layer: &str,
        activation: &Tensor<T>,
        plan: &ExecPlan<T>,
        capture: &[String],
    ) -> Result<TapeRun<T>> {
        let cut = self.resolve(layer)?;
        let act_id = tape.leaf(activation.clone());
        self.run_tape(tape, cut, act_id, plan, capture, false)
    }

    fn run_tape(
        &self,
        tape: &Tape<T>,
        start: usize,
        start_value: ValueId,
        plan: &ExecPlan<T>,
        capture: &[String],
        train_params: bool,
    ) -> Result<TapeRun<T>> {
        let mut values: Vec<Option<ValueId>> = vec![None; self.layers.len()];
        values[start] = Some(start_value);
        let mut param_ids = BTreeMap::new();
        let param_of = |tape: &Tape<T>,
                            params: &BTreeMap<String, Tensor<T>>,
                            ids: &mut BTreeMap<String, ValueId>,
                            id: &str,
                            name: &str|
         -> Result<ValueId> {
            let key = format!("{id}.{name}");
            if let Some(&v) = ids.get(&key) {
                return Ok(v);
            }
            let t = params
                .get(&key)
                .ok_or_else(|| Error::config(format!("missing parameter {key:?}")))?;
            let v = if train_params { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
            ids.insert(key, v);
            Ok(v)
        };

        for idx in start + 1..self.layers.len() {
            let layer = &self.layers[idx];
            let fetch = |values: &Vec<Option<ValueId>>, i: usize| -> Result<ValueId> {
                values[i].ok_or_else(|| {
                    Error::usage(format!(
                        "layer {:?} depends on {:?}, which is upstream of the cut point",
                        layer.id, self.layers[i].id
                    ))
                })
            };
            let out = match &layer.kind {
                LayerKind::Input => unreachable!("input is always layer 0"),
                LayerKind::Conv { stride, padding, bias, .. } => {
                    let x = fetch(&values, layer.inputs[0])?;
                    let behavior = plan.conv.get(&layer.id);
                    match behavior {
                        Some(ConvBehavior::Surrogate {
                            pre_weight,
                            pre_bias,
                            post_weight,
                            post_bias,
                        }) => {
                            let pw = tape.constant(pre_weight.clone());
                            let pb = tape.constant(pre_bias.clone());
                            let qw = tape.constant(post_weight.clone());
                            let qb = tape.constant(post_bias.clone());
                            let a = tape.conv2d(x, pw, Some(pb), 1, 1, None)?;
                            let d = tape.bilinear_down2x(a)?;
                            tape.conv2d(d, qw, Some(qb), 1, 1, None)?
                        }
                        Some(ConvBehavior::ForwardAvg) => {
                            let w = param_of(tape, &self.params, &mut param_ids, &layer.id, "weight")?;
                            let b = if *bias {
                                Some(param_of(tape, &self.params, &mut param_ids, &layer.id, "bias")?)
                            } else {
                                None
                            };
                            let mut acc: Option<ValueId> = None;
                            for (dy, dx) in PHASE_ROLLS {
                                let rolled = tape.roll2d(x, dy, dx)?;
                                let c = tape.conv2d(rolled, w, b, *stride, *padding, None)?;
                                acc = Some(match acc {
                                    None => c,
                                    Some(a) => tape.add(a, c)?,
                                });
                            }
                            tape.scale(acc.expect("four rolls"), 0.25)?
                        }
                        other => {
                            let hook = match other {
                                Some(ConvBehavior::GradHook(rolls)) => Some(*rolls),
                                _ => None,
                            };
                            let w = param_of(tape, &self.params, &mut param_ids, &layer.id, "weight")?;
                            let b = if *bias {
                                Some(param_of(tape, &self.params, &mut param_ids, &layer.id, "bias")?)
                            } else {
                                None
                            };
                            tape.conv2d(x, w, b, *stride, *padding, hook)?
                        }
                    }
                }
                LayerKind::FrozenBn { .. } => {
                    let x = fetch(&values, layer.inputs[0])?;
                    let s = param_of(tape, &self.params, &mut param_ids, &layer.id, "scale")?;
                    let h = param_of(tape, &self.params, &mut param_ids, &layer.id, "shift")?;
                    tape.channel_affine(x, s, h)?
                }
                LayerKind::Relu => {
                    let x = fetch(&values, layer.inputs[0])?;
                    match plan.relu_refs.get(&layer.id) {
                        Some(xref) => {
                            let mult = rescale_multiplier(&tape.value(x)?, xref)?;
                            tape.relu_rescale(x, mult)?
                        }
                        None => tape.relu(x)?,
                    }
                }
                LayerKind::ResidualAdd => {
                    let a = fetch(&values, layer.inputs[0])?;
                    let b = fetch(&values, layer.inputs[1])?;
                    tape.add(a, b)?
                }
                LayerKind::MaxPool2x => tape.max_pool2x(fetch(&values, layer.inputs[0])?)?,
                LayerKind::GlobalAvgPool => {
                    tape.global_avg_pool(fetch(&values, layer.inputs[0])?)?
                }
                LayerKind::Linear { bias, .. } => {
                    let x = fetch(&values, layer.inputs[0])?;
                    let w = param_of(tape, &self.params, &mut param_ids, &layer.id, "weight")?;
                    let b = if *bias {
                        Some(param_of(tape, &self.params, &mut param_ids, &layer.id, "bias")?)
                    } else {
                        None
                    };
                    tape.linear(x, w, b)?
                }
                LayerKind::BilinearDown2x => {
                    tape.bilinear_down2x(fetch(&values, layer.inputs[0])?)?
                }
            };
            values[idx] = Some(out);
        }

        let logits = values[self.layers.len() - 1].ok_or_else(|| {
            Error::usage("graph produced no output (cut point at the end?)".to_string())
        })?;
        let mut captured = BTreeMap::new();
        for name in capture {
            let idx = self.resolve(name)?;
            let v = values[idx].ok_or_else(|| {
                Error::usage(format!("capture {name:?} is upstream of the cut point"))
            })?;
            captured.insert(name.clone(), v);
        }
        Ok(TapeRun {
            input: start_value,
            logits,
            captured,
            param_ids,
            _marker: std::marker::PhantomData,
        })
    }

    /// Tape-free forward for inference, optionally capturing activations.
    pub fn infer_captured(
        &self,
        input: &Tensor<T>,
        plan: &ExecPlan<T>,
        capture: &[String],
    ) -> Result<(Tensor<T>, BTreeMap<String, Tensor<T>>)> {
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.layers.len()];
        values[0] = Some(input.clone());
        for idx in 1..self.layers.len() {
            let layer = &self.layers[idx];
            let arg = |values: &Vec<Option<Tensor<T>>>, i: usize| -> Tensor<T> {
                values[i].clone().expect("forward order")
            };
            let out = match &layer.kind {
                LayerKind::Input => unreachable!(),
                LayerKind::Conv { stride, padding, bias, .. } => {
                    let x = arg(&values, layer.inputs[0]);
                    match plan.conv.get(&layer.id) {
                        Some(ConvBehavior::Surrogate {
                            pre_weight,
                            pre_bias,
                            post_weight,
                            post_bias,
                        }) => {
                            let a = kernels::conv2d_forward(&x, pre_weight, Some(pre_bias), 1, 1)?;
                            let d = kernels::bilinear_down2x(&a)?;
                            kernels::conv2d_forward(&d, post_weight, Some(post_bias), 1, 1)?
                        }
                        Some(ConvBehavior::ForwardAvg) => {
                            let w = self.param(&layer.id, "weight")?;
                            let b = bias.then(|| self.param(&layer.id, "bias")).transpose()?;
                            let mut acc: Option<Tensor<T>> = None;
                            for (dy, dx) in PHASE_ROLLS {
                                let rolled = kernels::roll2d(&x, dy, dx)?;
                                let c =
                                    kernels::conv2d_forward(&rolled, w, b, *stride, *padding)?;
                                acc = Some(match acc {
                                    None => c,
                                    Some(a) => {
                                        let sum: Vec<T> = a
                                            .data()
                                            .iter()
                                            .zip(c.data().iter())
                                            .map(|(&p, &q)| p + q)
                                            .collect();
                                        Tensor::from_vec(a.shape().to_vec(), sum)?
                                    }
                                });
                            }
                            let q = T::from_f64(0.25);
                            acc.expect("four rolls").map(|v| v * q)
                        }
                        _ => {
                            let w = self.param(&layer.id, "weight")?;
                            let b = bias.then(|| self.param(&layer.id, "bias")).transpose()?;
                            kernels::conv2d_forward(&x, w, b, *stride, *padding)?
                        }
                    }
                }
                LayerKind::FrozenBn { .. } => kernels::channel_affine_forward(
                    &arg(&values, layer.inputs[0]),
                    self.param(&layer.id, "scale")?,
                    self.param(&layer.id, "shift")?,
                )?,
                LayerKind::Relu => kernels::relu(&arg(&values, layer.inputs[0])),
                LayerKind::ResidualAdd => {
                    let a = arg(&values, layer.inputs[0]);
                    let b = arg(&values, layer.inputs[1]);
                    if a.shape() != b.shape() {
                        return Err(Error::shape(format!(
                            "residual add {:?}: {:?} vs {:?}",
                            layer.id,
                            a.shape(),
                            b.shape()
                        )));
                    }
                    let sum: Vec<T> = a
                        .data()
                        .iter()
                        .zip(b.data().iter())
                        .map(|(&p, &q)| p + q)
                        .collect();
                    Tensor::from_vec(a.shape().to_vec(), sum)?
                }
                LayerKind::MaxPool2x => kernels::max_pool2x(&arg(&values, layer.inputs[0]))?.0,
                LayerKind::GlobalAvgPool => {
                    kernels::global_avg_pool(&arg(&values, layer.inputs[0]))?
                }
                LayerKind::Linear { bias, .. } => kernels::linear_forward(
                    &arg(&values, layer.inputs[0]),
                    self.param(&layer.id, "weight")?,
                    bias.then(|| self.param(&layer.id, "bias")).transpose()?,
                )?,
                LayerKind::BilinearDown2x => {
                    kernels::bilinear_down2x(&arg(&values, layer.inputs[0]))?
                }
            };
            values[idx] = Some(out);
        }
        let logits = values[self.layers.len() - 1].clone().expect("graph has layers");
        let mut captured = BTreeMap::new();
        for name in capture {
            let idx = self.resolve(name)?;
            captured.insert(name.clone(), values[idx].clone().expect("forward order"));
        }
        Ok((logits, captured))
    }

    pub fn infer(&self, input: &Tensor<T>, plan: &ExecPlan<T>) -> Result<Tensor<T>> {
        Ok(self.infer_captured(input, plan, &[])?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownsamplingConv {
    pub id: String,
    /// The stem: never modified by any mode.
    pub excluded: bool,
    /// Non-stem stride-2 conv that exactly halves even spatial extents.
    pub eligible: bool,
}

/// A stride-2 conv halves even extents exactly iff kernel - 2*padding is
/// 1 or 2: output = (H + 2p - k)/2 + 1 = H/2.
pub fn halves_exactly(kernel: usize, padding: usize) -> bool {
    kernel > 2 * padding && (1..=2).contains(&(kernel - 2 * padding))
}

fn init_layer_params<T: Element>(
    layer: &Layer,
    seed: u64,
    params: &mut BTreeMap<String, Tensor<T>>,
) {
    let mut stream = rng::stream(seed, &format!("init/{}", layer.id));
    match &layer.kind {
        LayerKind::Conv { in_ch, out_ch, kernel, bias, .. } => {
            let fan_in = in_ch * kernel * kernel;
            let bound = kaiming_bound(fan_in);
            let n = out_ch * in_ch * kernel * kernel;
            let w = rng::uniform_vec::<T>(&mut stream, n, -bound, bound);
            params.insert(
                format!("{}.weight", layer.id),
                Tensor::from_vec(vec![*out_ch, *in_ch, *kernel, *kernel], w)
                    .expect("init shape"),
            );
            if *bias {
                params.insert(format!("{}.bias", layer.id), Tensor::zeros(vec![*out_ch]));
            }
        }
        LayerKind::Linear { in_features, out_features, bias } => {
            let bound = kaiming_bound(*in_features);
            let n = out_features * in_features;
            let w = rng::uniform_vec::<T>(&mut stream, n, -bound, bound);
            params.insert(
                format!("{}.weight", layer.id),
                Tensor::from_vec(vec![*out_features, *in_features], w).expect("init shape"),
            );
            if *bias {
                params.insert(format!("{}.bias", layer.id), Tensor::zeros(vec![*out_features]));
            }
        }
        LayerKind::FrozenBn { channels } => {
            params.insert(format!("{}.scale", layer.id), Tensor::ones(vec![*channels]));
            params.insert(format!("{}.shift", layer.id), Tensor::zeros(vec![*channels]));
        }
        _ => {}
    }
}

/// Residual classifier: stem stride-2 conv, then one stride-2 entry block
/// plus identity blocks per stage, global average pooling, linear head.
/// Skip branches downsample with maxpool + 1x1 stride-1 conv so the only
/// stride-2 convs are the stem and the stage entries.
pub fn build_mini_resnet<T: Element>(cfg: &MiniResnetCfg, seed: u64) -> Result<ModelGraph<T>> {
    if cfg.input_channels == 0 || cfg.classes == 0 {
        return Err(Error::config("channels and classes must be positive".to_string()));
    }
    if cfg.stage_widths.is_empty() || cfg.blocks_per_stage == 0 {
        return Err(Error::config("need at least one stage and one block".to_string()));
    }
    let reductions = 1 + cfg.stage_widths.len();
    if cfg.image_size % (1 << reductions) != 0 {
        return Err(Error::config(format!(
            "image size {} not divisible by 2^{reductions}",
            cfg.image_size
        )));
    }

    let mut g = ModelGraph::empty(cfg.input_channels, cfg.image_size, cfg.classes);
    let w0 = cfg.stage_widths[0];
    let stem_conv = g.push_layer(
        "stem.conv",
        LayerKind::Conv {
            in_ch: cfg.input_channels,
            out_ch: w0,
            kernel: 3,
            stride: 2,
            padding: 1,
            bias: false,
        },
        vec![0],
    )?;
    let stem_bn = g.push_layer("stem.bn", LayerKind::FrozenBn { channels: w0 }, vec![stem_conv])?;
    let mut prev = g.push_layer("stem.relu", LayerKind::Relu, vec![stem_bn])?;
    let mut prev_ch = w0;

    for (si, &width) in cfg.stage_widths.iter().enumerate() {
        let stage = si + 1;
        for block in 1..=cfg.blocks_per_stage {
            let p = format!("stage{stage}.block{block}");
            let entry = block == 1;
            let stride = if entry { 2 } else { 1 };
            let in_ch = if entry { prev_ch } else { width };

            let conv1 = g.push_layer(
                &format!("{p}.conv1"),
                LayerKind::Conv {
                    in_ch,
                    out_ch: width,
                    kernel: 3,
                    stride,
                    padding: 1,
                    bias: false,
                },
                vec![prev],
            )?;
            let bn1 = g.push_layer(
                &format!("{p}.bn1"),
                LayerKind::FrozenBn { channels: width },
                vec![conv1],
            )?;
            let relu1 = g.push_layer(&format!("{p}.relu1"), LayerKind::Relu, vec![bn1])?;
            let conv2 = g.push_layer(
                &format!("{p}.conv2"),
                LayerKind::Conv {
                    in_ch: width,
                    out_ch: width,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    bias: false,
                },
                vec![relu1],
            )?;
            let bn2 = g.push_layer(
                &format!("{p}.bn2"),
                LayerKind::FrozenBn { channels: width },
                vec![conv2],
            )?;

            let skip = if entry {
                let pool =
                    g.push_layer(&format!("{p}.skip.pool"), LayerKind::MaxPool2x, vec![prev])?;
                let sconv = g.push_layer(
                    &format!("{p}.skip.conv"),
                    LayerKind::Conv {
                        in_ch,
                        out_ch: width,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        bias: false,
                    },
                    vec![pool],
                )?;
                g.push_layer(
                    &format!("{p}.skip.bn"),
                    LayerKind::FrozenBn { channels: width },
                    vec![sconv],
                )?
            } else {
                prev
            };

            let add = g.push_layer(
                &format!("{p}.add"),
                LayerKind::ResidualAdd,
                vec![bn2, skip],
            )?;
            prev = g.push_layer(&format!("{p}.relu2"), LayerKind::Relu, vec![add])?;
            prev_ch = width;
        }
        let last_block = cfg.blocks_per_stage;
        g.add_alias(
            &format!("stage{stage}.out"),
            &format!("stage{stage}.block{last_block}.relu2"),
        )?;
    }

    let gap = g.push_layer("gap", LayerKind::GlobalAvgPool, vec![prev])?;
    g.push_layer(
        "fc",
        LayerKind::Linear {
            in_features: prev_ch,
            out_features: cfg.classes,
            bias: true,
        },
        vec![gap],
    )?;
    g.init_params(seed);
    Ok(g)
}

/// Report-axis display names: stage outputs shorten to "stage_block".
pub fn display_name(graph_id: &str) -> String {
    if let Some(rest) = graph_id.strip_prefix("stage") {
        let mut parts = rest.split('.');
        if let (Some(stage), Some(block)) = (parts.next(), parts.next()) {
            if let Some(b) = block.strip_prefix("block") {
                return format!("{stage}_{b}");
            }
        }
    }
    graph_id.to_string()
}
