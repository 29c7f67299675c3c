//! Classifier training and surrogate distillation.

use degrid_core::checkpoint::{load_model, save_model, TrainingMeta};
use degrid_core::dataset;
use degrid_core::denoise::{self, SurrogateTrainConfig};
use degrid_core::error::{Error, Result};
use degrid_core::graph::build_mini_resnet;
use degrid_core::graph::MiniResnetCfg;
use degrid_core::report::{float_cell, CsvTable, Summary};
use degrid_core::train::{self, TrainConfig};

use crate::{ensure_dir, ExperimentConfig};

pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    let data_dir = cfg.require_dataset()?;
    let ds = dataset::load(data_dir)?;
    let images = ds.images.cast::<f64>();

    let arch = MiniResnetCfg {
        input_channels: ds.manifest.channels,
        image_size: ds.manifest.image_size,
        classes: ds.manifest.classes,
        stage_widths: cfg.train.stage_widths.clone(),
        blocks_per_stage: cfg.train.blocks_per_stage,
    };
    let mut model = build_mini_resnet::<f64>(&arch, cfg.seed)?;

    let tc = TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        seed: cfg.seed,
    };
    let log = train::train(&mut model, &images, &ds.labels, &tc, |s| {
        println!("epoch {:>3}  loss {:.4}  accuracy {:.4}", s.epoch, s.loss, s.accuracy);
    })?;
    let last = log.last().ok_or_else(|| Error::config("zero epochs".to_string()))?;

    ensure_dir(&cfg.out)?;
    save_model(
        &cfg.out,
        &model,
        &arch,
        cfg.seed,
        Some(TrainingMeta {
            dataset: data_dir.display().to_string(),
            seed: cfg.seed,
            epochs: tc.epochs,
            batch_size: tc.batch_size,
            learning_rate: tc.learning_rate,
            final_loss: last.loss,
            final_accuracy: last.accuracy,
        }),
    )?;

    let mut table = CsvTable::new(["epoch", "loss", "accuracy"]);
    for s in &log {
        table.push(vec![s.epoch.to_string(), float_cell(s.loss), float_cell(s.accuracy)])?;
    }
    table.write(&cfg.out.join("training_log.csv"))?;

    Summary::new(cfg.seed, cfg)?
        .stat("final_loss", last.loss)?
        .stat("final_accuracy", last.accuracy)?
        .stat("epochs", log.len())?
        .write(&cfg.out.join("summary.json"))?;
    cfg.save(&cfg.out)?;
    println!("checkpoint written to {}", cfg.out.display());
    Ok(())
}

pub fn run_surrogate(cfg: &ExperimentConfig) -> Result<()> {
    let model_dir = cfg.require_model()?;
    let data_dir = cfg.require_dataset()?;
    let (model, _) = load_model::<f64>(model_dir)?;
    let ds = dataset::load(data_dir)?;
    let images = ds.images.cast::<f64>();

    let sc = SurrogateTrainConfig {
        epochs: cfg.surrogate.epochs,
        batch_size: cfg.surrogate.batch_size,
        learning_rate: cfg.surrogate.learning_rate,
        seed: cfg.seed,
        layers: cfg.surrogate.layers.clone(),
    };
    let result = denoise::train_surrogates(&model, &images, &sc, |epoch, layer, loss| {
        println!("epoch {:>3}  {layer}  loss {loss:.6}", epoch);
    })?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    denoise::save_surrogates(model_dir, &result, &sc)?;

    ensure_dir(&cfg.out)?;
    let mut curve = CsvTable::new(["layer", "epoch", "loss"]);
    for (layer, losses) in &result.loss_curve {
        for (epoch, loss) in losses.iter().enumerate() {
            curve.push(vec![layer.clone(), (epoch + 1).to_string(), float_cell(*loss)])?;
        }
    }
    curve.write(&cfg.out.join("loss_curve.csv"))?;

    // Converged quality, measured after the last update rather than as a
    // running mean over the final epoch.
    let probe = 256.min(images.shape()[0]);
    let probe_images = train::gather_batch(&images, &(0..probe).collect::<Vec<_>>())?;
    let mut eval = serde_json::Map::new();
    let mut summary = Summary::new(cfg.seed, cfg)?;
    for (layer, path) in &result.paths {
        let l1 = denoise::surrogate_eval_l1(&model, path, &probe_images)?;
        println!("{layer}: post-training L1 {l1:.6}");
        eval.insert(layer.clone(), serde_json::json!(l1));
        summary = summary.layer(layer);
    }
    summary
        .stat("post_training_l1", eval)?
        .stat("warnings", &result.warnings)?
        .write(&cfg.out.join("summary.json"))?;
    cfg.save(&cfg.out)?;
    println!("surrogates written into {}", model_dir.join("surrogates").display());
    Ok(())
}
