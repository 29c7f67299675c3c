//! Saliency map emission: raw tensor, grayscale PGM, signed-colormap PNG,
//! and the alpha overlay on the de-normalized input — per sample, per
//! requested layer.

use degrid_core::dataset::denormalize;
use degrid_core::error::Result;
use degrid_core::metrics::{mean_std, phase_spread, total_variation};
use degrid_core::render::{write_overlay_png, write_pgm, write_signed_png};
use degrid_core::report::{float_cell, CsvTable, Summary};
use degrid_core::saliency;
use degrid_core::stns;

use crate::{ensure_dir, plan_for, ExperimentConfig, Workbench};

pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    let wb = Workbench::load(cfg)?;
    let plan = plan_for(cfg, &wb.model, cfg.mode)?;
    ensure_dir(&cfg.out)?;

    let mut table =
        CsvTable::new(["sample", "layer", "display", "target", "tv", "phase_spread"]);
    let mut tvs: Vec<f64> = Vec::new();
    for (i, label) in wb.eval_slice(cfg) {
        let x = wb.images.sample(i)?;
        let shown = denormalize(&x, &wb.dataset.manifest)?;
        let target = cfg.target.unwrap_or(label);
        for layer in &cfg.layers {
            let req = cfg.request(layer, target);
            let map = saliency::attribute(&wb.model, &plan, &x, &req)?;
            let stem = format!("s{i:03}_{layer}");
            stns::write_file(cfg.out.join(format!("{stem}.stns")), &map.raw)?;
            write_pgm(&cfg.out.join(format!("{stem}.pgm")), &map.rendered)?;
            write_signed_png(&cfg.out.join(format!("{stem}.png")), &map.rendered)?;
            write_overlay_png(
                &cfg.out.join(format!("{stem}_overlay.png")),
                &shown,
                &map.rendered,
                cfg.alpha,
            )?;
            let tv = total_variation(&map.raw)?;
            tvs.push(tv);
            table.push(vec![
                i.to_string(),
                layer.clone(),
                wb.axis_name(layer),
                target.to_string(),
                float_cell(tv),
                float_cell(phase_spread(&map.reduced)?),
            ])?;
        }
    }
    table.write(&cfg.out.join("report.csv"))?;

    let (mean, std) = mean_std(&tvs);
    let mut summary = Summary::new(cfg.seed, cfg)?;
    for layer in &cfg.layers {
        summary = summary.layer_named(layer, wb.axis_name(layer));
    }
    summary
        .stat("maps_written", table.len())?
        .stat("tv_mean", mean)?
        .stat("tv_std", std)?
        .write(&cfg.out.join("summary.json"))?;
    cfg.save(&cfg.out)?;
    println!("{} maps written to {}", table.len(), cfg.out.display());
    Ok(())
}
