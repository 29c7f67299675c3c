//! Weight-randomization sanity check: re-initialize the model head-first,
//! recompute the saliency on each partly random model, and score it with
//! insertion/deletion against the trained model.

use degrid_core::denoise::{eligible_convs, HookMode};
use degrid_core::error::{Error, Result};
use degrid_core::metrics::{randomization_suite, RandomizationCfg};
use degrid_core::report::{float_cell, CsvTable, Summary};
use degrid_core::train::gather_batch;

use crate::{ensure_dir, plan_for, ExperimentConfig, Workbench};

/// Head-to-stem default cuts: the classifier head, each eligible
/// downsampling conv from deepest to shallowest, then the stem (a fully
/// random model).
fn default_cuts(wb: &Workbench) -> Vec<String> {
    let mut cuts = vec!["fc".to_string()];
    let mut convs = eligible_convs(&wb.model);
    convs.reverse();
    cuts.extend(convs);
    cuts.push("stem.conv".to_string());
    cuts
}

pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.mode == HookMode::Surrogate {
        return Err(Error::config(
            "surrogate mode cannot be randomized: the distilled paths imitate the trained \
             convs and would be stale on re-initialized weights"
                .to_string(),
        ));
    }
    let wb = Workbench::load(cfg)?;
    let plan = plan_for(cfg, &wb.model, cfg.mode)?;
    let slice = wb.eval_slice(cfg);
    let indices: Vec<usize> = slice.iter().map(|&(i, _)| i).collect();
    let targets: Vec<usize> = slice.iter().map(|&(_, l)| cfg.target.unwrap_or(l)).collect();
    let images = gather_batch(&wb.images, &indices)?;

    let cuts = cfg.cuts.clone().unwrap_or_else(|| default_cuts(&wb));
    let rcfg = RandomizationCfg {
        cuts,
        request: cfg.request(&cfg.layers[0], 0),
        insdel: cfg.insdel(),
        seed: cfg.seed,
    };
    let rows = randomization_suite(&wb.model, &plan, &images, &targets, &rcfg)?;
    ensure_dir(&cfg.out)?;

    let mut per_sample =
        CsvTable::new(["cut", "sample", "insertion_auc", "deletion_auc"]);
    let mut curve = CsvTable::new(["cut", "insertion_mean", "deletion_mean"]);
    let mut stats = serde_json::Map::new();
    for row in &rows {
        for (j, &(i, _)) in slice.iter().enumerate() {
            per_sample.push(vec![
                row.cut.clone(),
                i.to_string(),
                float_cell(row.insertion[j]),
                float_cell(row.deletion[j]),
            ])?;
        }
        curve.push(vec![
            row.cut.clone(),
            float_cell(row.insertion_mean),
            float_cell(row.deletion_mean),
        ])?;
        println!(
            "{:<24} insertion {:.4}  deletion {:.4}",
            row.cut, row.insertion_mean, row.deletion_mean
        );
        stats.insert(
            row.cut.clone(),
            serde_json::json!({
                "insertion_mean": row.insertion_mean,
                "deletion_mean": row.deletion_mean,
            }),
        );
    }
    per_sample.write(&cfg.out.join("per_sample.csv"))?;
    curve.write(&cfg.out.join("curve.csv"))?;
    Summary::new(cfg.seed, cfg)?
        .layer_named(&cfg.layers[0], wb.axis_name(&cfg.layers[0]))
        .stat("samples", slice.len())?
        .stat("rows", stats)?
        .write(&cfg.out.join("summary.json"))?;
    cfg.save(&cfg.out)?;
    println!("randomization rows written to {}", cfg.out.display());
    Ok(())
}
