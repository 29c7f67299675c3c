//! The three batch evaluations: the total-variation reduction table, the
//! insertion/deletion faithfulness curves, and the prediction-difference
//! comparison of the hook modes against the original model.

use std::collections::BTreeMap;

use degrid_core::denoise::HookMode;
use degrid_core::error::Result;
use degrid_core::metrics::{
    accuracy, deletion_score, insertion_score, mean_std, prediction_difference, total_variation,
};
use degrid_core::report::{float_cell, CsvTable, Summary};
use degrid_core::saliency;
use degrid_core::train::gather_batch;

use crate::{ensure_dir, plan_for, ExperimentConfig, Workbench};

/// TV of the raw attribution under every hook mode, plus the percentage
/// reduction each mode buys relative to the original model.
pub fn run_tv(cfg: &ExperimentConfig) -> Result<()> {
    let wb = Workbench::load(cfg)?;
    let modes =
        [HookMode::Original, HookMode::Backward, HookMode::Forward, HookMode::Surrogate];
    let mut plans = Vec::with_capacity(modes.len());
    for mode in modes {
        plans.push((mode, plan_for(cfg, &wb.model, mode)?));
    }
    let slice = wb.eval_slice(cfg);
    ensure_dir(&cfg.out)?;

    let mut per_sample = CsvTable::new(["layer", "display", "mode", "sample", "tv"]);
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for layer in &cfg.layers {
        for (mode, plan) in &plans {
            for &(i, label) in &slice {
                let x = wb.images.sample(i)?;
                let req = cfg.request(layer, cfg.target.unwrap_or(label));
                let map = saliency::attribute(&wb.model, plan, &x, &req)?;
                let tv = total_variation(&map.raw)?;
                per_sample.push(vec![
                    layer.clone(),
                    wb.axis_name(layer),
                    mode.to_string(),
                    i.to_string(),
                    float_cell(tv),
                ])?;
                values.entry((layer.clone(), mode.to_string())).or_default().push(tv);
            }
        }
    }
    per_sample.write(&cfg.out.join("per_sample.csv"))?;

    let mut reduction =
        CsvTable::new(["layer", "display", "mode", "mean_tv", "std_tv", "reduction_pct"]);
    let mut stats = serde_json::Map::new();
    for layer in &cfg.layers {
        let (orig_mean, _) =
            mean_std(&values[&(layer.clone(), HookMode::Original.to_string())]);
        let mut layer_stats = serde_json::Map::new();
        for (mode, _) in &plans {
            let (mean, std) = mean_std(&values[&(layer.clone(), mode.to_string())]);
            let pct = if *mode == HookMode::Original {
                0.0
            } else {
                100.0 * (orig_mean - mean) / orig_mean.max(1e-12)
            };
            reduction.push(vec![
                layer.clone(),
                wb.axis_name(layer),
                mode.to_string(),
                float_cell(mean),
                float_cell(std),
                float_cell(pct),
            ])?;
            layer_stats.insert(
                mode.to_string(),
                serde_json::json!({"mean": mean, "std": std, "reduction_pct": pct}),
            );
        }
        stats.insert(layer.clone(), layer_stats.into());
    }
    reduction.write(&cfg.out.join("reduction.csv"))?;

    let mut summary = Summary::new(cfg.seed, cfg)?;
    for layer in &cfg.layers {
        summary = summary.layer_named(layer, wb.axis_name(layer));
    }
    summary
        .stat("samples", slice.len())?
        .stat("tv", stats)?
        .write(&cfg.out.join("summary.json"))?;
    cfg.save(&cfg.out)?;
    println!("TV table over {} samples written to {}", slice.len(), cfg.out.display());
    Ok(())
}

/// Insertion/deletion AUC per sample per layer, plus the pointwise mean
/// curves for plotting.
pub fn run_insdel(cfg: &ExperimentConfig) -> Result<()> {
    let wb = Workbench::load(cfg)?;
    let plan = plan_for(cfg, &wb.model, cfg.mode)?;
    let slice = wb.eval_slice(cfg);
    let insdel = cfg.insdel();
    ensure_dir(&cfg.out)?;

    let mut per_sample = CsvTable::new([
        "layer",
        "display",
        "sample",
        "target",
        "insertion_auc",
        "deletion_auc",
    ]);
    let mut curves = CsvTable::new([
        "layer",
        "fraction",
        "insertion_prob_mean",
        "deletion_prob_mean",
    ]);
    let mut stats = serde_json::Map::new();
    for layer in &cfg.layers {
        let mut ins_auc = Vec::with_capacity(slice.len());
        let mut del_auc = Vec::with_capacity(slice.len());
        let mut ins_curve: Vec<f64> = Vec::new();
        let mut del_curve: Vec<f64> = Vec::new();
        let mut fractions: Vec<f64> = Vec::new();
        for &(i, label) in &slice {
            let x = wb.images.sample(i)?;
            let target = cfg.target.unwrap_or(label);
            let req = cfg.request(layer, target);
            let map = saliency::attribute(&wb.model, &plan, &x, &req)?;
            let ins = insertion_score(&wb.model, &plan, &x, &map.rendered, target, &insdel)?;
            let del = deletion_score(&wb.model, &plan, &x, &map.rendered, target, &insdel)?;
            if fractions.is_empty() {
                fractions = ins.fractions.clone();
                ins_curve = vec![0.0; fractions.len()];
                del_curve = vec![0.0; fractions.len()];
            }
            for (acc, p) in ins_curve.iter_mut().zip(&ins.probabilities) {
                *acc += p;
            }
            for (acc, p) in del_curve.iter_mut().zip(&del.probabilities) {
                *acc += p;
            }
            per_sample.push(vec![
                layer.clone(),
                wb.axis_name(layer),
                i.to_string(),
                target.to_string(),
                float_cell(ins.auc),
                float_cell(del.auc),
            ])?;
            ins_auc.push(ins.auc);
            del_auc.push(del.auc);
        }
        let n = slice.len() as f64;
        for (j, f) in fractions.iter().enumerate() {
            curves.push(vec![
                layer.clone(),
                float_cell(*f),
                float_cell(ins_curve[j] / n),
                float_cell(del_curve[j] / n),
            ])?;
        }
        let (im, is) = mean_std(&ins_auc);
        let (dm, ds) = mean_std(&del_auc);
        stats.insert(
            layer.clone(),
            serde_json::json!({
                "insertion": {"mean": im, "std": is},
                "deletion": {"mean": dm, "std": ds},
            }),
        );
    }
    per_sample.write(&cfg.out.join("per_sample.csv"))?;
    curves.write(&cfg.out.join("curves.csv"))?;

    let mut summary = Summary::new(cfg.seed, cfg)?;
    for layer in &cfg.layers {
        summary = summary.layer_named(layer, wb.axis_name(layer));
    }
    summary
        .stat("samples", slice.len())?
        .stat("auc", stats)?
        .write(&cfg.out.join("summary.json"))?;
    cfg.save(&cfg.out)?;
    println!(
        "insertion/deletion over {} samples written to {}",
        slice.len(),
        cfg.out.display()
    );
    Ok(())
}

/// Softmax disagreement of each hook mode against the original model,
/// with accuracies side by side.
pub fn run_preddiff(cfg: &ExperimentConfig) -> Result<()> {
    let wb = Workbench::load(cfg)?;
    let slice = wb.eval_slice(cfg);
    let indices: Vec<usize> = slice.iter().map(|&(i, _)| i).collect();
    let labels: Vec<usize> = slice.iter().map(|&(_, l)| l).collect();
    let targets: Vec<usize> =
        slice.iter().map(|&(_, l)| cfg.target.unwrap_or(l)).collect();
    let images = gather_batch(&wb.images, &indices)?;
    let original = plan_for(cfg, &wb.model, HookMode::Original)?;
    ensure_dir(&cfg.out)?;

    let mut per_sample =
        CsvTable::new(["mode", "sample", "all_classes", "target_class"]);
    let mut stats = serde_json::Map::new();
    stats.insert(
        "original_accuracy".to_string(),
        serde_json::json!(accuracy(&wb.model, &original, &images, &labels)?),
    );
    for mode in [HookMode::Backward, HookMode::Forward, HookMode::Surrogate] {
        let plan = plan_for(cfg, &wb.model, mode)?;
        let report = prediction_difference(
            &wb.model, &original, &wb.model, &plan, &images, &targets,
        )?;
        for (row, &(i, _)) in slice.iter().enumerate() {
            per_sample.push(vec![
                mode.to_string(),
                i.to_string(),
                float_cell(report.all_classes[row]),
                float_cell(report.target_class[row]),
            ])?;
        }
        let acc = accuracy(&wb.model, &plan, &images, &labels)?;
        println!(
            "{mode}: all-classes {:.3} ± {:.3}, target {:.3} ± {:.3}, accuracy {:.4}",
            report.all_mean, report.all_std, report.target_mean, report.target_std, acc
        );
        stats.insert(
            mode.to_string(),
            serde_json::json!({
                "all_mean": report.all_mean,
                "all_std": report.all_std,
                "target_mean": report.target_mean,
                "target_std": report.target_std,
                "accuracy": acc,
            }),
        );
    }
    per_sample.write(&cfg.out.join("per_sample.csv"))?;
    Summary::new(cfg.seed, cfg)?
        .stat("samples", slice.len())?
        .stat("prediction_difference", stats)?
        .write(&cfg.out.join("summary.json"))?;
    cfg.save(&cfg.out)?;
    println!("prediction differences written to {}", cfg.out.display());
    Ok(())
}
