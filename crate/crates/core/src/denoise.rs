//! The three strategies for removing grid artifacts that strided
//! downsampling convs imprint on input gradients:
//!
//! * backward hook: roll-average the conv's input-gradient (forward
//!   unchanged);
//! * forward hook: average the conv over four rolled inputs (gradients
//!   follow by autodiff);
//! * bilinear surrogate: swap the conv for conv 3x3 s1 -> bilinear half ->
//!   conv 3x3 s1, distilled from the frozen model with L1.
//!
//! All of them leave the first downsampling conv alone.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_json, write_json, TensorEntry};
use crate::error::{Error, Result};
use crate::graph::{halves_exactly, ConvBehavior, ExecPlan, LayerKind, ModelGraph};
use crate::kernels;
use crate::rng;
use crate::stns;
use crate::tape::{RollSet, Tape};
use crate::tensor::{Element, Tensor};
use crate::train::{gather_batch, Adam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HookMode {
    Original,
    Backward,
    Forward,
    Surrogate,
}

impl HookMode {
    pub const ALL: [HookMode; 4] =
        [HookMode::Original, HookMode::Backward, HookMode::Forward, HookMode::Surrogate];
}

impl fmt::Display for HookMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HookMode::Original => "original",
            HookMode::Backward => "backward",
            HookMode::Forward => "forward",
            HookMode::Surrogate => "surrogate",
        };
        write!(f, "{s}")
    }
}

impl FromStr for HookMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(HookMode::Original),
            "backward" => Ok(HookMode::Backward),
            "forward" => Ok(HookMode::Forward),
            "surrogate" => Ok(HookMode::Surrogate),
            other => Err(Error::usage(format!(
                "unknown mode {other:?} (original|backward|forward|surrogate)"
            ))),
        }
    }
}

/// Trained replacement for one downsampling conv.
#[derive(Debug, Clone)]
pub struct SurrogatePath<T: Element> {
    pub target: String,
    pub pre_weight: Tensor<T>,
    pub pre_bias: Tensor<T>,
    pub post_weight: Tensor<T>,
    pub post_bias: Tensor<T>,
}

impl<T: Element> SurrogatePath<T> {
    fn behavior(&self) -> ConvBehavior<T> {
        ConvBehavior::Surrogate {
            pre_weight: self.pre_weight.clone(),
            pre_bias: self.pre_bias.clone(),
            post_weight: self.post_weight.clone(),
            post_bias: self.post_bias.clone(),
        }
    }
}

/// conv_post(bilinear_down2x(conv_pre(x))) without a tape.
pub fn surrogate_forward<T: Element>(
    path: &SurrogatePath<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let a = kernels::conv2d_forward(input, &path.pre_weight, Some(&path.pre_bias), 1, 1)?;
    let d = kernels::bilinear_down2x(&a)?;
    kernels::conv2d_forward(&d, &path.post_weight, Some(&path.post_bias), 1, 1)
}

/// Ids of the convs the strategies act on: every stride-2 conv except the
/// first, restricted to geometries that halve even extents exactly.
pub fn eligible_convs<T: Element>(model: &ModelGraph<T>) -> Vec<String> {
    model
        .downsampling_convs()
        .into_iter()
        .filter(|d| d.eligible)
        .map(|d| d.id)
        .collect()
}

struct ConvFacts {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    has_bias: bool,
}

fn conv_facts<T: Element>(model: &ModelGraph<T>, id: &str) -> Result<ConvFacts> {
    let idx = model.resolve(id)?;
    match model.layers[idx].kind {
        LayerKind::Conv { in_ch, out_ch, kernel, stride, padding, bias } => {
            if stride != 2 || !halves_exactly(kernel, padding) {
                return Err(Error::config(format!(
                    "{id:?} ({kernel}x{kernel} stride {stride} padding {padding}) does not \
                     halve even inputs exactly, so the bilinear surrogate cannot match its \
                     output geometry"
                )));
            }
            Ok(ConvFacts { in_ch, out_ch, kernel, has_bias: bias })
        }
        _ => Err(Error::config(format!("{id:?} is not a conv layer"))),
    }
}

/// Build the per-conv behavior plan for a mode. Surrogate mode requires a
/// trained path for every eligible conv.
pub fn attach<T: Element>(
    model: &ModelGraph<T>,
    mode: HookMode,
    surrogates: Option<&BTreeMap<String, SurrogatePath<T>>>,
    rolls: RollSet,
) -> Result<ExecPlan<T>> {
    let mut plan = ExecPlan::original();
    match mode {
        HookMode::Original => {}
        HookMode::Backward => {
            for id in eligible_convs(model) {
                plan.conv.insert(id, ConvBehavior::GradHook(rolls));
            }
        }
        HookMode::Forward => {
            for id in eligible_convs(model) {
                plan.conv.insert(id, ConvBehavior::ForwardAvg);
            }
        }
        HookMode::Surrogate => {
            let paths = surrogates.ok_or_else(|| {
                Error::config("surrogate mode requires trained surrogates".to_string())
            })?;
            for id in eligible_convs(model) {
                let path = paths.get(&id).ok_or_else(|| {
                    Error::config(format!(
                        "no surrogate for eligible conv {id:?}; train surrogates first"
                    ))
                })?;
                plan.conv.insert(id, path.behavior());
            }
        }
    }
    Ok(plan)
}

/// Dirac (identity) 3x3 kernel, channels x channels.
fn dirac_kernel<T: Element>(channels: usize) -> Vec<T> {
    let mut w = vec![T::zero(); channels * channels * 9];
    for c in 0..channels {
        w[(c * channels + c) * 9 + 4] = T::one();
    }
    w
}

/// Initial surrogate: conv_pre = Dirac + sigma 0.01 noise; conv_post = the
/// replaced conv's central 3x3 crop when its kernel is at least 3x3, else
/// Kaiming-uniform.
pub fn init_surrogate<T: Element>(
    model: &ModelGraph<T>,
    conv_id: &str,
    seed: u64,
) -> Result<SurrogatePath<T>> {
    let facts = conv_facts(model, conv_id)?;
    let mut stream = rng::stream(seed, &format!("surrogate-init/{conv_id}"));

    let mut pre = dirac_kernel::<T>(facts.in_ch);
    for (w, n) in pre
        .iter_mut()
        .zip(rng::normal_vec::<T>(&mut stream, facts.in_ch * facts.in_ch * 9, 0.01))
    {
        *w += n;
    }
    let pre_weight = Tensor::from_vec(vec![facts.in_ch, facts.in_ch, 3, 3], pre)?;

    let post_weight = if facts.kernel >= 3 {
        let orig = &model.params[&format!("{conv_id}.weight")];
        let k = facts.kernel;
        let crop = (k - 3) / 2;
        let mut w = Vec::with_capacity(facts.out_ch * facts.in_ch * 9);
        for o in 0..facts.out_ch {
            for c in 0..facts.in_ch {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let idx = ((o * facts.in_ch + c) * k + crop + ki) * k + crop + kj;
                        w.push(orig.data()[idx]);
                    }
                }
            }
        }
        Tensor::from_vec(vec![facts.out_ch, facts.in_ch, 3, 3], w)?
    } else {
        let bound = (6.0 / (facts.in_ch * 9) as f64).sqrt();
        let w = rng::uniform_vec::<T>(&mut stream, facts.out_ch * facts.in_ch * 9, -bound, bound);
        Tensor::from_vec(vec![facts.out_ch, facts.in_ch, 3, 3], w)?
    };

    let post_bias = if facts.has_bias {
        model.params[&format!("{conv_id}.bias")].clone()
    } else {
        Tensor::zeros(vec![facts.out_ch])
    };

    Ok(SurrogatePath {
        target: conv_id.to_string(),
        pre_weight,
        pre_bias: Tensor::zeros(vec![facts.in_ch]),
        post_weight,
        post_bias,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SurrogateTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Target layer override for tests; defaults to the eligible convs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<String>>,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        SurrogateTrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            layers: None,
        }
    }
}

pub struct SurrogateTrainResult<T: Element> {
    pub paths: BTreeMap<String, SurrogatePath<T>>,
    /// Mean L1 per epoch, one curve per layer: epochs x layers entries.
    pub loss_curve: BTreeMap<String, Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Distill one surrogate per eligible conv from the frozen model.
///
/// Pairs (conv input -> conv output) are harvested per batch from forwards
/// of the unmodified model and consumed immediately, never written out.
pub fn train_surrogates<T: Element>(
    model: &ModelGraph<T>,
    images: &Tensor<T>,
    cfg: &SurrogateTrainConfig,
    mut progress: impl FnMut(usize, &str, f64),
) -> Result<SurrogateTrainResult<T>> {
    let layers = match &cfg.layers {
        Some(list) => list.clone(),
        None => eligible_convs(model),
    };
    if layers.is_empty() {
        return Err(Error::config("no eligible downsampling convs to replace".to_string()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("epochs and batch size must be positive".to_string()));
    }

    // What to capture in each harvesting forward: every conv's input layer
    // output, plus the conv's own output.
    let mut capture = Vec::new();
    let mut feeds = BTreeMap::new();
    for id in &layers {
        conv_facts(model, id)?;
        let feed = model.conv_input_id(id)?;
        capture.push(feed.clone());
        capture.push(id.clone());
        feeds.insert(id.clone(), feed);
    }
    capture.sort();
    capture.dedup();

    let mut paths = BTreeMap::new();
    let mut adams: BTreeMap<String, Adam<T>> = BTreeMap::new();
    for id in &layers {
        paths.insert(id.clone(), init_surrogate(model, id, cfg.seed)?);
        adams.insert(id.clone(), Adam::new(cfg.learning_rate));
    }

    let n = images.shape()[0];
    let plan = ExecPlan::original();
    let mut data_rng = rng::stream(cfg.seed, "surrogate-data");
    let mut loss_curve: BTreeMap<String, Vec<f64>> =
        layers.iter().map(|l| (l.clone(), Vec::new())).collect();
    let mut first_epoch_first: BTreeMap<String, f64> = BTreeMap::new();
    let mut first_epoch_last: BTreeMap<String, f64> = BTreeMap::new();

    for epoch in 0..cfg.epochs {
        let order = rng::shuffled_indices(&mut data_rng, n);
        let mut epoch_loss: BTreeMap<&str, f64> = layers.iter().map(|l| (l.as_str(), 0.0)).collect();

        for chunk in order.chunks(cfg.batch_size) {
            let x = gather_batch(images, chunk)?;
            let (_, acts) = model.infer_captured(&x, &plan, &capture)?;

            for id in &layers {
                let input_act = &acts[&feeds[id]];
                let target = &acts[id];
                let path = paths.get_mut(id).expect("initialized above");

                let tape = Tape::new();
                let xin = tape.constant(input_act.clone());
                let pw = tape.leaf(path.pre_weight.clone());
                let pb = tape.leaf(path.pre_bias.clone());
                let qw = tape.leaf(path.post_weight.clone());
                let qb = tape.leaf(path.post_bias.clone());
                let a = tape.conv2d(xin, pw, Some(pb), 1, 1, None)?;
                let d = tape.bilinear_down2x(a)?;
                let y = tape.conv2d(d, qw, Some(qb), 1, 1, None)?;
                let loss_id = tape.l1_mean(y, target)?;
                let loss = tape.value(loss_id)?.scalar_value().to_f64();
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        message: format!("surrogate for {id:?} produced non-finite loss"),
                    });
                }
                *epoch_loss.get_mut(id.as_str()).expect("seeded") += loss * chunk.len() as f64;
                if epoch == 0 {
                    first_epoch_first.entry(id.clone()).or_insert(loss);
                    first_epoch_last.insert(id.clone(), loss);
                }

                let grads = tape.backward(loss_id)?;
                let adam = adams.get_mut(id).expect("initialized above");
                adam.begin_step();
                let mut step = |param: &mut Tensor<T>, vid, name: &str| -> Result<()> {
                    if let Some(g) = grads.get(vid)? {
                        *param = adam.update(&format!("{id}.{name}"), param, g)?;
                    }
                    Ok(())
                };
                step(&mut path.pre_weight, pw, "pre.weight")?;
                step(&mut path.pre_bias, pb, "pre.bias")?;
                step(&mut path.post_weight, qw, "post.weight")?;
                step(&mut path.post_bias, qb, "post.bias")?;
            }
        }

        for id in &layers {
            let mean = epoch_loss[id.as_str()] / n as f64;
            loss_curve.get_mut(id).expect("seeded").push(mean);
            progress(epoch, id, mean);
        }
    }

    let mut warnings = Vec::new();
    for id in &layers {
        let (first, last) = (first_epoch_first[id], first_epoch_last[id]);
        if last >= first {
            warnings.push(format!(
                "surrogate for {id:?}: loss did not decrease over the first epoch \
                 ({first:.6} -> {last:.6})"
            ));
        }
    }

    Ok(SurrogateTrainResult { paths, loss_curve, warnings })
}

/// Mean L1 between a trained path and the conv it replaces, over a dataset.
/// This is the distillation loss of the finished surrogate, free of the
/// within-epoch averaging the training curve carries.
pub fn surrogate_eval_l1<T: Element>(
    model: &ModelGraph<T>,
    path: &SurrogatePath<T>,
    images: &Tensor<T>,
) -> Result<f64> {
    let feed = model.conv_input_id(&path.target)?;
    let capture = vec![feed.clone(), path.target.clone()];
    let plan = ExecPlan::original();
    let n = images.shape()[0];
    let mut total = 0.0;
    for start in (0..n).step_by(32) {
        let indices: Vec<usize> = (start..(start + 32).min(n)).collect();
        let x = gather_batch(images, &indices)?;
        let (_, acts) = model.infer_captured(&x, &plan, &capture)?;
        let got = surrogate_forward(path, &acts[&feed])?;
        let want = &acts[&path.target];
        if got.shape() != want.shape() {
            return Err(Error::shape(format!(
                "surrogate for {:?} produced {:?}, conv produced {:?}",
                path.target,
                got.shape(),
                want.shape()
            )));
        }
        let sum: f64 = got
            .data()
            .iter()
            .zip(want.data().iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .sum();
        total += sum / (want.numel() / indices.len()) as f64;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SurrogateManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub target_layer: String,
    pub training: SurrogateTrainConfig,
    pub loss_curve: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

pub const SURROGATE_FORMAT: &str = "surrogate-checkpoint";

/// Save each path under `<model_dir>/surrogates/<layer-id>/`, mirroring the
/// model checkpoint layout.
pub fn save_surrogates<T: Element>(
    model_dir: &Path,
    result: &SurrogateTrainResult<T>,
    cfg: &SurrogateTrainConfig,
) -> Result<()> {
    for (id, path) in &result.paths {
        let dir = model_dir.join("surrogates").join(id);
        std::fs::create_dir_all(dir.join("tensors"))?;
        let parts: [(&str, &Tensor<T>); 4] = [
            ("pre.weight", &path.pre_weight),
            ("pre.bias", &path.pre_bias),
            ("post.weight", &path.post_weight),
            ("post.bias", &path.post_bias),
        ];
        let mut tensors = Vec::new();
        for (name, tensor) in parts {
            let file = format!("tensors/{name}.stns");
            stns::write_file(&dir.join(&file), tensor)?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                file,
                shape: tensor.shape().to_vec(),
            });
        }
        let manifest = SurrogateManifest {
            format: SURROGATE_FORMAT.to_string(),
            version: 1,
            dtype: T::DTYPE.to_string(),
            target_layer: id.clone(),
            training: cfg.clone(),
            loss_curve: result.loss_curve.get(id).cloned().unwrap_or_default(),
            tensors,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
    }
    Ok(())
}

/// Load every surrogate present under `<model_dir>/surrogates/`. Coverage
/// of the eligible convs is checked by `attach`, not here.
pub fn load_surrogates<T: Element>(
    model_dir: &Path,
) -> Result<BTreeMap<String, SurrogatePath<T>>> {
    let root = model_dir.join("surrogates");
    let mut out = BTreeMap::new();
    if !root.is_dir() {
        return Ok(out);
    }
    let mut dirs: Vec<_> = std::fs::read_dir(&root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let manifest: SurrogateManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format != SURROGATE_FORMAT {
            return Err(Error::format(format!(
                "{}: expected a {SURROGATE_FORMAT} manifest",
                dir.display()
            )));
        }
        if manifest.dtype != T::DTYPE.to_string() {
            return Err(Error::format(format!(
                "{}: surrogate stores {} tensors, caller wants {}",
                dir.display(),
                manifest.dtype,
                T::DTYPE
            )));
        }
        let tensor_of = |name: &str| -> Result<Tensor<T>> {
            let entry = manifest
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| {
                    Error::format(format!("{}: missing tensor {name:?}", dir.display()))
                })?;
            stns::read_file::<T>(&dir.join(&entry.file))
        };
        let path = SurrogatePath {
            target: manifest.target_layer.clone(),
            pre_weight: tensor_of("pre.weight")?,
            pre_bias: tensor_of("pre.bias")?,
            post_weight: tensor_of("post.weight")?,
            post_bias: tensor_of("post.bias")?,
        };
        out.insert(manifest.target_layer, path);
    }
    Ok(out)
}
