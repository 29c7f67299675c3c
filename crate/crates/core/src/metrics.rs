//! Evaluation: normalized total variation of attribution maps, the
//! period-2 phase-spread diagnostic, insertion/deletion faithfulness
//! curves, prediction difference after softmax, accuracy, and the
//! weight-randomization harness.

use serde::{Deserialize, Serialize};

use crate::denoise::HookMode;
use crate::error::{Error, Result};
use crate::graph::{ExecPlan, ModelGraph};
use crate::kernels;
use crate::rng;
use crate::saliency::{self, AttributionRequest, Method};
use crate::tensor::{Element, Tensor};
use crate::train::argmax_rows;

pub const EPS: f64 = 1e-6;

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per channel: subtract the channel mean, divide by max(mean|.|, eps),
/// then take the mean absolute difference over all horizontal and vertical
/// neighbor pairs; average over channels. Dividing by the pair count keeps
/// values comparable across layer resolutions.
pub fn total_variation<T: Element>(raw: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = match raw.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("total_variation: need [C,h,w], got {s:?}"))),
    };
    if h < 2 || w < 2 {
        return Err(Error::shape(format!(
            "total_variation: need at least 2x2 spatial extent, got {h}x{w}"
        )));
    }
    let plane = h * w;
    let pairs = (h * (w - 1) + (h - 1) * w) as f64;
    let mut acc = 0.0;
    for ch in 0..c {
        let z = &raw.data()[ch * plane..(ch + 1) * plane];
        let mu = z.iter().map(|&v| v.to_f64()).sum::<f64>() / plane as f64;
        let centered: Vec<f64> = z.iter().map(|&v| v.to_f64() - mu).collect();
        let scale = (centered.iter().map(|v| v.abs()).sum::<f64>() / plane as f64).max(EPS);
        let mut tv = 0.0;
        for i in 0..h {
            for j in 0..w - 1 {
                tv += (centered[i * w + j] - centered[i * w + j + 1]).abs();
            }
        }
        for i in 0..h - 1 {
            for j in 0..w {
                tv += (centered[i * w + j] - centered[(i + 1) * w + j]).abs();
            }
        }
        acc += tv / scale / pairs;
    }
    Ok(acc / c as f64)
}

/// Spread of the four interleaved-grid means, normalized by the map's mean
/// magnitude: a period-2 checkerboard scores about 2, smooth maps near 0.
pub fn phase_spread<T: Element>(map: &Tensor<T>) -> Result<f64> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::shape(format!("phase_spread: need [h,w], got {s:?}"))),
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "phase_spread: spatial extents must be even, got {h}x{w}"
        )));
    }
    let mut sums = [0.0f64; 4];
    let mut mag = 0.0;
    for i in 0..h {
        for j in 0..w {
            let v = map.data()[i * w + j].to_f64();
            sums[(i % 2) * 2 + (j % 2)] += v;
            mag += v.abs();
        }
    }
    let quarter = (h * w / 4) as f64;
    let means = sums.map(|s| s / quarter);
    let spread = means.iter().cloned().fold(f64::MIN, f64::max)
        - means.iter().cloned().fold(f64::MAX, f64::min);
    Ok(spread / (mag / (h * w) as f64 + EPS))
}

/// Softmax probabilities per row; the sigmoid for one-logit heads.
pub fn prob_rows<T: Element>(
    model: &ModelGraph<T>,
    plan: &ExecPlan<T>,
    images: &Tensor<T>,
) -> Result<Vec<Vec<f64>>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(32) {
        let stop = (start + 32).min(n);
        let batch = Tensor::stack_batch(
            &(start..stop).map(|i| images.sample(i)).collect::<Result<Vec<_>>>()?,
        )?;
        let logits = model.infer(&batch, plan)?;
        let probs = if model.classes == 1 {
            kernels::sigmoid(&logits)
        } else {
            kernels::softmax_rows(&logits)?
        };
        let k = probs.shape()[1];
        for r in 0..stop - start {
            out.push(probs.data()[r * k..(r + 1) * k].iter().map(|&v| v.to_f64()).collect());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsDelCfg {
    pub steps: usize,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
}

impl Default for InsDelCfg {
    fn default() -> Self {
        InsDelCfg { steps: 100, blur_kernel: 11, blur_sigma: 5.0 }
    }
}

/// One perturbation curve: x = fraction of pixels changed (monotone, 0 to
/// 1 inclusive), y = probability of the target class, plus the trapezoid
/// area under it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreCurve {
    pub fractions: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub auc: f64,
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) * 0.5)
        .sum()
}

/// Pixel order: descending saliency, ties broken row-major.
fn saliency_order<T: Element>(rendered: &Tensor<T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rendered.numel()).collect();
    order.sort_by(|&i, &j| {
        rendered.data()[j]
            .to_f64()
            .total_cmp(&rendered.data()[i].to_f64())
            .then(i.cmp(&j))
    });
    order
}

fn check_rendered<T: Element>(input: &Tensor<T>, rendered: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, _, h, w) = input.nchw()?;
    if n != 1 {
        return Err(Error::usage("perturbation curves run one sample at a time".to_string()));
    }
    if rendered.shape() != [h, w] {
        return Err(Error::shape(format!(
            "saliency {:?} does not cover the {h}x{w} input",
            rendered.shape()
        )));
    }
    Ok((h, w))
}

/// Walk from `start` toward `input` (or the reverse), copying whole pixel
/// columns (all channels) in saliency order, evaluating the target
/// probability after each step.
fn perturbation_curve<T: Element>(
    model: &ModelGraph<T>,
    plan: &ExecPlan<T>,
    input: &Tensor<T>,
    start: Tensor<T>,
    rendered: &Tensor<T>,
    target: usize,
    steps: usize,
) -> Result<ScoreCurve> {
    let (h, w) = check_rendered(input, rendered)?;
    if target >= model.classes {
        return Err(Error::usage(format!(
            "target class {target} out of range for {} outputs",
            model.classes
        )));
    }
    let total = h * w;
    if steps == 0 || steps > total {
        return Err(Error::config(format!(
            "step count {steps} must be in 1..={total} for a {h}x{w} input"
        )));
    }
    let order = saliency_order(rendered);
    let c = input.shape()[1];

    // The first frame is `start` untouched; every later frame copies the
    // next chunk of target pixels (all channels) from `input`.
    let chunk = total / steps;
    let mut frames = Vec::with_capacity(steps + 1);
    let mut fractions = Vec::with_capacity(steps + 1);
    let mut current = start.data().to_vec();
    frames.push(start.clone());
    fractions.push(0.0);
    let mut done = 0usize;
    for s in 0..steps {
        let take = if s + 1 == steps { total - done } else { chunk };
        for &pix in &order[done..done + take] {
            for ch in 0..c {
                current[ch * total + pix] = input.data()[ch * total + pix];
            }
        }
        done += take;
        frames.push(Tensor::from_vec(input.shape().to_vec(), current.clone())?);
        fractions.push(done as f64 / total as f64);
    }

    let stacked = Tensor::stack_batch(&frames)?;
    let probs = prob_rows(model, plan, &stacked)?;
    let col = if model.classes == 1 { 0 } else { target };
    let probabilities: Vec<f64> = probs.iter().map(|row| row[col]).collect();
    let auc = trapezoid(&fractions, &probabilities);
    Ok(ScoreCurve { fractions, probabilities, auc })
}

/// Remove pixels in saliency order, replacing them with the attribution
/// baseline (zeros in normalized space). Lower area is better.
pub fn deletion_score<T: Element>(
    model: &ModelGraph<T>,
    plan: &ExecPlan<T>,
    input: &Tensor<T>,
    rendered: &Tensor<T>,
    target: usize,
    cfg: &InsDelCfg,
) -> Result<ScoreCurve> {
    // Same walk with the roles swapped: start at the intact input and
    // copy baseline pixels in, highest saliency first.
    perturbation_curve(
        model,
        plan,
        &Tensor::zeros(input.shape().to_vec()),
        input.clone(),
        rendered,
        target,
        cfg.steps,
    )
}

/// Re-insert original pixels into a blurred copy in saliency order. Higher
/// area is better.
pub fn insertion_score<T: Element>(
    model: &ModelGraph<T>,
    plan: &ExecPlan<T>,
    input: &Tensor<T>,
    rendered: &Tensor<T>,
    target: usize,
    cfg: &InsDelCfg,
) -> Result<ScoreCurve> {
    let start = kernels::gaussian_blur2d(input, cfg.blur_kernel, cfg.blur_sigma)?;
    perturbation_curve(model, plan, input, start, rendered, target, cfg.steps)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredDiffReport {
    /// Per-sample sum over classes of |softmax difference|, times 100.
    pub all_classes: Vec<f64>,
    /// Per-sample |softmax difference at the target|, times 100.
    pub target_class: Vec<f64>,
    pub all_mean: f64,
    pub all_std: f64,
    pub target_mean: f64,
    pub target_std: f64,
}

/// Softmax-space disagreement between two views of the same task.
pub fn prediction_difference<T: Element>(
    orig_model: &ModelGraph<T>,
    orig_plan: &ExecPlan<T>,
    var_model: &ModelGraph<T>,
    var_plan: &ExecPlan<T>,
    images: &Tensor<T>,
    targets: &[usize],
) -> Result<PredDiffReport> {
    if orig_model.classes != var_model.classes {
        return Err(Error::config(format!(
            "views disagree on the class space: {} vs {}",
            orig_model.classes, var_model.classes
        )));
    }
    let n = images.shape()[0];
    if targets.len() != n {
        return Err(Error::config(format!("{} targets for {n} samples", targets.len())));
    }
    let p = prob_rows(orig_model, orig_plan, images)?;
    let q = prob_rows(var_model, var_plan, images)?;
    let mut all_classes = Vec::with_capacity(n);
    let mut target_class = Vec::with_capacity(n);
    for i in 0..n {
        let all: f64 = p[i].iter().zip(q[i].iter()).map(|(a, b)| (a - b).abs()).sum();
        let col = if orig_model.classes == 1 { 0 } else { targets[i] };
        if col >= p[i].len() {
            return Err(Error::usage(format!("target {col} out of range")));
        }
        all_classes.push(all * 100.0);
        target_class.push((p[i][col] - q[i][col]).abs() * 100.0);
    }
    let (all_mean, all_std) = mean_std(&all_classes);
    let (target_mean, target_std) = mean_std(&target_class);
    Ok(PredDiffReport { all_classes, target_class, all_mean, all_std, target_mean, target_std })
}

/// Fraction of samples whose arg-max logit (lowest index on ties) matches
/// the label.
pub fn accuracy<T: Element>(
    model: &ModelGraph<T>,
    plan: &ExecPlan<T>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::config(format!("{} labels for {n} samples", labels.len())));
    }
    if n == 0 {
        return Err(Error::config("empty dataset".to_string()));
    }
    let mut hits = 0usize;
    for start in (0..n).step_by(32) {
        let stop = (start + 32).min(n);
        let batch = Tensor::stack_batch(
            &(start..stop).map(|i| images.sample(i)).collect::<Result<Vec<_>>>()?,
        )?;
        let logits = model.infer(&batch, plan)?;
        for (row, pred) in argmax_rows(&logits)?.into_iter().enumerate() {
            if pred == labels[start + row] {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Per-sample summary of one evaluation batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TVReport {
    pub layer: String,
    pub method: Method,
    pub mode: HookMode,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl TVReport {
    pub fn from_values(layer: String, method: Method, mode: HookMode, values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        TVReport { layer, method, mode, values, mean, std }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomizationCfg {
    /// Layers to randomize from, ordered head to stem; each row re-inits
    /// that layer and everything after it.
    pub cuts: Vec<String>,
    pub request: AttributionRequest,
    pub insdel: InsDelCfg,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomizationRow {
    /// "none", a cut layer id, or "noise-baseline".
    pub cut: String,
    pub insertion: Vec<f64>,
    pub deletion: Vec<f64>,
    pub insertion_mean: f64,
    pub deletion_mean: f64,
}

fn randomization_row<T: Element>(
    eval_model: &ModelGraph<T>,
    attr_model: &ModelGraph<T>,
    plan: &ExecPlan<T>,
    images: &Tensor<T>,
    targets: &[usize],
    cfg: &RandomizationCfg,
    cut: &str,
) -> Result<RandomizationRow> {
    let mut insertion = Vec::new();
    let mut deletion = Vec::new();
    for i in 0..images.shape()[0] {
        let x = images.sample(i)?;
        let mut req = cfg.request.clone();
        req.target = targets[i];
        let map = saliency::attribute(attr_model, plan, &x, &req)?;
        insertion
            .push(insertion_score(eval_model, plan, &x, &map.rendered, targets[i], &cfg.insdel)?.auc);
        deletion
            .push(deletion_score(eval_model, plan, &x, &map.rendered, targets[i], &cfg.insdel)?.auc);
    }
    let (insertion_mean, _) = mean_std(&insertion);
    let (deletion_mean, _) = mean_std(&deletion);
    Ok(RandomizationRow {
        cut: cut.to_string(),
        insertion,
        deletion,
        insertion_mean,
        deletion_mean,
    })
}

/// Sanity harness: re-initialize the trained model from the head backwards,
/// recompute attributions on each partly-random model, and score them with
/// insertion/deletion against the trained model. The last row swaps the
/// attribution for plain gaussian noise drawn at the attribution layer's
/// resolution and upscaled.
pub fn randomization_suite<T: Element>(
    model: &ModelGraph<T>,
    plan: &ExecPlan<T>,
    images: &Tensor<T>,
    targets: &[usize],
    cfg: &RandomizationCfg,
) -> Result<Vec<RandomizationRow>> {
    let n = images.shape()[0];
    if targets.len() != n || n == 0 {
        return Err(Error::config(format!("{} targets for {n} samples", targets.len())));
    }
    let mut rows = Vec::with_capacity(cfg.cuts.len() + 2);
    rows.push(randomization_row(model, model, plan, images, targets, cfg, "none")?);
    for cut in &cfg.cuts {
        let randomized = model.randomize_from_end(cut, cfg.seed)?;
        rows.push(randomization_row(model, &randomized, plan, images, targets, cfg, cut)?);
    }

    // Noise-saliency baseline: gaussian noise at the attribution layer's
    // spatial size, upscaled to input size, fresh draw per sample.
    let (h, w) = if cfg.request.layer.eq_ignore_ascii_case(saliency::INPUT_LAYER) {
        (model.image_size, model.image_size)
    } else {
        let x0 = images.sample(0)?;
        let (_, acts) = model.infer_captured(&x0, plan, &[cfg.request.layer.clone()])?;
        let s = acts[&cfg.request.layer].shape();
        (s[2], s[3])
    };
    let mut stream = rng::stream(cfg.seed, "noise-baseline");
    let mut insertion = Vec::new();
    let mut deletion = Vec::new();
    for i in 0..n {
        let x = images.sample(i)?;
        let noise = Tensor::from_vec(
            vec![1, 1, h, w],
            rng::normal_vec::<T>(&mut stream, h * w, 1.0),
        )?;
        let rendered = kernels::bilinear_resize(&noise, model.image_size, model.image_size)?
            .reshape(vec![model.image_size, model.image_size])?;
        insertion.push(insertion_score(model, plan, &x, &rendered, targets[i], &cfg.insdel)?.auc);
        deletion.push(deletion_score(model, plan, &x, &rendered, targets[i], &cfg.insdel)?.auc);
    }
    let (insertion_mean, _) = mean_std(&insertion);
    let (deletion_mean, _) = mean_std(&deletion);
    rows.push(RandomizationRow {
        cut: "noise-baseline".to_string(),
        insertion,
        deletion,
        insertion_mean,
        deletion_mean,
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_mini_resnet, LayerKind, MiniResnetCfg};
    use crate::tape::RollSet;
    use proptest::prelude::*;

    fn checkerboard(h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|i| if (i / w + i % w) % 2 == 0 { 1.0 } else { -1.0 })
            .collect()
    }

    #[test]
    fn constant_map_has_zero_tv() {
        let t = Tensor::full(vec![3, 5, 5], 7.25f64);
        assert_eq!(total_variation(&t).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_tv_is_two() {
        let t = Tensor::from_vec(vec![1, 8, 8], checkerboard(8, 8)).unwrap();
        assert!((total_variation(&t).unwrap() - 2.0).abs() < 1e-12);
        // Same per channel, so the channel mean does not move it.
        let three =
            Tensor::from_vec(vec![3, 8, 8], checkerboard(8, 8).repeat(3)).unwrap();
        assert!((total_variation(&three).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tv_ignores_constant_offsets() {
        let mut r = rng::stream(1, "tv");
        let vals = rng::uniform_vec::<f64>(&mut r, 2 * 6 * 6, -1.0, 1.0);
        let a = Tensor::from_vec(vec![2, 6, 6], vals.clone()).unwrap();
        let b = Tensor::from_vec(vec![2, 6, 6], vals.iter().map(|v| v + 5.0).collect())
            .unwrap();
        let (ta, tb) = (total_variation(&a).unwrap(), total_variation(&b).unwrap());
        assert!((ta - tb).abs() < 1e-12, "{ta} vs {tb}");
    }

    proptest! {
        #[test]
        fn tv_is_scale_invariant(
            vals in proptest::collection::vec(-1.0f64..1.0, 16),
            c in 0.01f64..100.0,
        ) {
            let spread = vals.iter().cloned().fold(f64::MIN, f64::max)
                - vals.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 0.1);
            let map = Tensor::from_vec(vec![1, 4, 4], vals.clone()).unwrap();
            let scaled =
                Tensor::from_vec(vec![1, 4, 4], vals.iter().map(|v| v * c).collect()).unwrap();
            let (a, b) = (total_variation(&map).unwrap(), total_variation(&scaled).unwrap());
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn phase_spread_of_a_checkerboard_is_two() {
        let t = Tensor::from_vec(vec![8, 8], checkerboard(8, 8)).unwrap();
        let v = phase_spread(&t).unwrap();
        assert!((v - 2.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn phase_spread_of_constants_and_roll_averages_is_zero() {
        let c = Tensor::full(vec![6, 6], 3.0f64);
        assert_eq!(phase_spread(&c).unwrap(), 0.0);
        // Roll-averaging a checkerboard yields a uniform map, the same
        // cancellation the backward hook performs on conv artifacts.
        let board = Tensor::from_vec(vec![1, 1, 8, 8], checkerboard(8, 8)).unwrap();
        let averaged = RollSet::adjoint().average(&board).unwrap();
        let flat = averaged.reshape(vec![8, 8]).unwrap();
        assert_eq!(phase_spread(&flat).unwrap(), 0.0);
    }

    #[test]
    fn odd_extents_are_rejected() {
        let odd = Tensor::<f64>::ones(vec![5, 6]);
        assert!(phase_spread(&odd).unwrap_err().to_string().contains("even"));
        assert!(total_variation(&Tensor::<f64>::ones(vec![1, 1, 4])).is_err());
    }

    fn small_resnet(seed: u64) -> ModelGraph<f64> {
        let cfg = MiniResnetCfg {
            input_channels: 3,
            image_size: 32,
            classes: 2,
            stage_widths: vec![4, 8],
            blocks_per_stage: 1,
        };
        let mut model = build_mini_resnet(&cfg, seed).unwrap();
        let mut r = rng::stream(seed, "test-shift");
        let keys: Vec<String> =
            model.params.keys().filter(|k| k.ends_with(".shift")).cloned().collect();
        for key in keys {
            let shape = model.params[&key].shape().to_vec();
            let n = shape.iter().product();
            model.set_param(
                &key,
                Tensor::from_vec(shape, rng::normal_vec::<f64>(&mut r, n, 0.3)).unwrap(),
            );
        }
        model
    }

    fn random_images(n: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "metrics-test");
        Tensor::from_vec(
            vec![n, 3, hw, hw],
            rng::normal_vec::<f64>(&mut r, n * 3 * hw * hw, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn gradient_artifacts_show_up_as_phase_spread_and_hooks_reduce_it() {
        // stage1.out feeds stage2's strided conv, so its gradient carries
        // the period-2 pattern; the roll-averaging backward hook cancels
        // the conv's share of it.
        let model = small_resnet(3);
        let x = random_images(1, 32, 4);
        let req = AttributionRequest::new(Method::Grad, "stage1.out", 0);
        let orig = saliency::attribute(&model, &ExecPlan::original(), &x, &req).unwrap();
        let hooked = crate::denoise::attach(&model, HookMode::Backward, None, RollSet::adjoint())
            .unwrap();
        let smooth = saliency::attribute(&model, &hooked, &x, &req).unwrap();
        let s_orig = phase_spread(&orig.reduced).unwrap();
        let s_hooked = phase_spread(&smooth.reduced).unwrap();
        assert!(s_orig > 0.0);
        assert!(s_hooked < s_orig, "hooked {s_hooked} vs original {s_orig}");
    }

    /// Head with zero weights: logits equal the bias, whatever the input.
    fn constant_model(bias: Vec<f64>) -> ModelGraph<f64> {
        let classes = bias.len();
        let mut g = ModelGraph::<f64>::empty(1, 4, classes);
        let gap = g.push_layer("gap", LayerKind::GlobalAvgPool, vec![0]).unwrap();
        g.push_layer(
            "fc",
            LayerKind::Linear { in_features: 1, out_features: classes, bias: true },
            vec![gap],
        )
        .unwrap();
        g.set_param("fc.weight", Tensor::zeros(vec![classes, 1]));
        g.set_param("fc.bias", Tensor::from_vec(vec![classes], bias).unwrap());
        g
    }

    #[test]
    fn constant_model_gives_a_flat_deletion_curve() {
        let model = constant_model(vec![1.0, -0.5]);
        let x = Tensor::ones(vec![1, 1, 4, 4]);
        let map = Tensor::ones(vec![4, 4]);
        let cfg = InsDelCfg { steps: 8, ..InsDelCfg::default() };
        let curve = deletion_score(&model, &ExecPlan::original(), &x, &map, 0, &cfg).unwrap();
        let p = curve.probabilities[0];
        assert!(curve.probabilities.iter().all(|&q| q == p));
        assert!((curve.auc - p).abs() < 1e-12);
        // x runs 0..1 monotonically.
        assert_eq!(curve.fractions.first(), Some(&0.0));
        assert_eq!(curve.fractions.last(), Some(&1.0));
        assert!(curve.fractions.windows(2).all(|w| w[0] < w[1]));
    }

    /// Single-logit model reading exactly the top-left pixel: conv kernel
    /// as large as the image with a lone 1.
    fn one_pixel_model(hw: usize) -> ModelGraph<f64> {
        let mut g = ModelGraph::<f64>::empty(1, hw, 1);
        let conv = g
            .push_layer(
                "read",
                LayerKind::Conv {
                    in_ch: 1,
                    out_ch: 1,
                    kernel: hw,
                    stride: 1,
                    padding: 0,
                    bias: false,
                },
                vec![0],
            )
            .unwrap();
        let gap = g.push_layer("gap", LayerKind::GlobalAvgPool, vec![conv]).unwrap();
        g.push_layer(
            "fc",
            LayerKind::Linear { in_features: 1, out_features: 1, bias: false },
            vec![gap],
        )
        .unwrap();
        let mut w = vec![0.0; hw * hw];
        w[0] = 1.0;
        g.set_param("read.weight", Tensor::from_vec(vec![1, 1, hw, hw], w).unwrap());
        g.set_param("fc.weight", Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap());
        g
    }

    #[test]
    fn deleting_the_only_pixel_that_matters_collapses_the_curve() {
        let model = one_pixel_model(4);
        let mut img = vec![0.0; 16];
        img[0] = 3.0;
        let x = Tensor::from_vec(vec![1, 1, 4, 4], img).unwrap();
        // Rank pixel 0 first.
        let mut sal = vec![0.0; 16];
        sal[0] = 1.0;
        let map = Tensor::from_vec(vec![4, 4], sal).unwrap();
        let cfg = InsDelCfg { steps: 4, ..InsDelCfg::default() };
        let curve = deletion_score(&model, &ExecPlan::original(), &x, &map, 0, &cfg).unwrap();

        let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
        let p0 = sigmoid(3.0);
        let flat = sigmoid(0.0);
        assert!((curve.probabilities[0] - p0).abs() < 1e-12);
        for &p in &curve.probabilities[1..] {
            assert!((p - flat).abs() < 1e-12);
        }
        let want_auc = 0.25 * (p0 + flat) * 0.5 + 0.75 * flat;
        assert!((curve.auc - want_auc).abs() < 1e-12);
    }

    #[test]
    fn curve_endpoints_equal_the_unmodified_probability() {
        let model = small_resnet(7);
        let images = random_images(1, 32, 8);
        let x = images.sample(0).unwrap();
        let p = prob_rows(&model, &ExecPlan::original(), &x).unwrap()[0][1];
        let req = AttributionRequest::new(Method::Grad, saliency::INPUT_LAYER, 1);
        let map = saliency::attribute(&model, &ExecPlan::original(), &x, &req).unwrap();
        let cfg = InsDelCfg { steps: 16, ..InsDelCfg::default() };

        let del = deletion_score(&model, &ExecPlan::original(), &x, &map.rendered, 1, &cfg).unwrap();
        assert_eq!(del.probabilities[0], p);

        let ins =
            insertion_score(&model, &ExecPlan::original(), &x, &map.rendered, 1, &cfg).unwrap();
        assert_eq!(*ins.probabilities.last().unwrap(), p);
        assert!(ins.auc >= 0.0 && ins.auc <= 1.0);
        assert!(del.auc >= 0.0 && del.auc <= 1.0);
    }

    #[test]
    fn tied_saliency_breaks_row_major() {
        let model = one_pixel_model(4);
        let mut img = vec![0.0; 16];
        img[0] = 2.0;
        let x = Tensor::from_vec(vec![1, 1, 4, 4], img).unwrap();
        let flat = Tensor::ones(vec![4, 4]);
        // Explicit row-major ranking: strictly decreasing values.
        let explicit =
            Tensor::from_vec(vec![4, 4], (0..16).map(|i| 16.0 - i as f64).collect()).unwrap();
        let cfg = InsDelCfg { steps: 4, ..InsDelCfg::default() };
        let a = deletion_score(&model, &ExecPlan::original(), &x, &flat, 0, &cfg).unwrap();
        let b = deletion_score(&model, &ExecPlan::original(), &x, &explicit, 0, &cfg).unwrap();
        assert_eq!(a.probabilities, b.probabilities);
    }

    #[test]
    fn identical_views_have_zero_prediction_difference() {
        let model = small_resnet(9);
        let images = random_images(4, 32, 10);
        let plan = ExecPlan::original();
        let report =
            prediction_difference(&model, &plan, &model, &plan, &images, &[0, 1, 0, 1]).unwrap();
        assert_eq!(report.all_mean, 0.0);
        assert_eq!(report.all_std, 0.0);
        assert_eq!(report.target_mean, 0.0);
    }

    #[test]
    fn prediction_difference_arithmetic() {
        // softmax(l) = (0.6, 0.4) needs l = (ln 0.6, ln 0.4).
        let a = constant_model(vec![0.6f64.ln(), 0.4f64.ln()]);
        let b = constant_model(vec![0.0, 0.0]);
        let images = Tensor::ones(vec![2, 1, 4, 4]);
        let report = prediction_difference(
            &a,
            &ExecPlan::original(),
            &b,
            &ExecPlan::original(),
            &images,
            &[0, 0],
        )
        .unwrap();
        assert!((report.all_mean - 20.0).abs() < 1e-9, "{}", report.all_mean);
        assert!((report.target_mean - 10.0).abs() < 1e-9, "{}", report.target_mean);
        assert_eq!(report.all_std, 0.0);
        // all-classes >= target-class >= 0 per sample.
        for (all, tgt) in report.all_classes.iter().zip(report.target_class.iter()) {
            assert!(all >= tgt && *tgt >= 0.0);
        }
    }

    #[test]
    fn sigmoid_heads_collapse_the_two_aggregations() {
        // One logit: the only class IS the target class.
        let mut a = one_pixel_model(4);
        a.set_param("fc.weight", Tensor::from_vec(vec![1, 1], vec![0.7]).unwrap());
        let b = one_pixel_model(4);
        let mut r = rng::stream(12, "sigmoid");
        let images =
            Tensor::from_vec(vec![3, 1, 4, 4], rng::normal_vec::<f64>(&mut r, 48, 1.0)).unwrap();
        let report = prediction_difference(
            &a,
            &ExecPlan::original(),
            &b,
            &ExecPlan::original(),
            &images,
            &[0, 0, 0],
        )
        .unwrap();
        assert_eq!(report.all_classes, report.target_class);
        assert!(report.all_mean > 0.0);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let model = constant_model(vec![0.2, 0.9]);
        let images = Tensor::ones(vec![4, 1, 4, 4]);
        let plan = ExecPlan::original();
        assert_eq!(accuracy(&model, &plan, &images, &[1, 1, 1, 1]).unwrap(), 1.0);
        // Complement under label swap on a balanced set.
        let half = accuracy(&model, &plan, &images, &[0, 1, 0, 1]).unwrap();
        let swapped = accuracy(&model, &plan, &images, &[1, 0, 1, 0]).unwrap();
        assert_eq!(half + swapped, 1.0);
        // Equal logits: ties go to the lowest class index.
        let tied = constant_model(vec![0.5, 0.5]);
        assert_eq!(accuracy(&tied, &plan, &images, &[0, 0, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn randomization_suite_baseline_row_matches_plain_evaluation() {
        let model = small_resnet(13);
        let images = random_images(2, 32, 14);
        let targets = vec![0, 1];
        let cfg = RandomizationCfg {
            cuts: vec!["fc".to_string()],
            request: AttributionRequest::new(Method::Grad, saliency::INPUT_LAYER, 0),
            insdel: InsDelCfg { steps: 16, ..InsDelCfg::default() },
            seed: 5,
        };
        let plan = ExecPlan::original();
        let rows = randomization_suite(&model, &plan, &images, &targets, &cfg).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].cut, "none");
        assert_eq!(rows[2].cut, "noise-baseline");

        // Row "none" is exactly the plain evaluation.
        for (i, t) in targets.iter().enumerate() {
            let x = images.sample(i).unwrap();
            let mut req = cfg.request.clone();
            req.target = *t;
            let map = saliency::attribute(&model, &plan, &x, &req).unwrap();
            let ins = insertion_score(&model, &plan, &x, &map.rendered, *t, &cfg.insdel).unwrap();
            assert_eq!(ins.auc, rows[0].insertion[i]);
        }

        // Deterministic, including the noise row.
        let again = randomization_suite(&model, &plan, &images, &targets, &cfg).unwrap();
        assert_eq!(rows[2].insertion, again[2].insertion);
        assert_eq!(rows[1].deletion, again[1].deletion);
    }
}
