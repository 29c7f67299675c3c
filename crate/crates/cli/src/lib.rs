//! `degrid` command line: dataset generation, training, surrogate
//! distillation, attribution rendering, and the evaluation commands. All
//! state flows through declared files; no environment variables.

use std::ffi::OsString;
use std::path::Path;

use clap::{Parser, Subcommand};

use degrid_core::checkpoint::{self, ModelManifest};
use degrid_core::dataset::{self, Dataset};
use degrid_core::denoise::{self, HookMode, SurrogatePath};
use degrid_core::error::{Error, Result};
use degrid_core::graph::{ExecPlan, ModelGraph};
use degrid_core::tape::RollSet;
use degrid_core::tensor::Tensor;

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "degrid", version, about = "Checkerboard-free saliency maps for strided CNNs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Emit the stride-2 gradient checkerboard and its hooked versions.
    DemoCheckerboard {
        /// Image side length (even).
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value = "demo-out")]
        out: std::path::PathBuf,
    },
    /// Generate the synthetic shapes classification dataset.
    GenDataset {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "dataset")]
        out: std::path::PathBuf,
    },
    /// Train the classifier and write a checkpoint.
    Train {
        #[command(flatten)]
        io: config::IoOpts,
        #[command(flatten)]
        data: config::DataOpts,
        #[command(flatten)]
        fit: config::FitOpts,
        /// Stage widths, comma-separated.
        #[arg(long)]
        widths: Option<String>,
        /// Residual blocks per stage.
        #[arg(long)]
        blocks: Option<usize>,
    },
    /// Distill bilinear surrogates for the eligible downsampling convs.
    TrainSurrogate {
        #[command(flatten)]
        io: config::IoOpts,
        #[command(flatten)]
        data: config::DataOpts,
        #[command(flatten)]
        fit: config::FitOpts,
        /// Subset of conv layer ids to distill, comma-separated.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Write saliency maps (tensor, PGM, PNG, overlay) per sample per layer.
    Attribute {
        #[command(flatten)]
        io: config::IoOpts,
        #[command(flatten)]
        data: config::DataOpts,
        #[command(flatten)]
        saliency: config::SaliencyOpts,
        #[command(flatten)]
        metrics: config::MetricOpts,
        /// Overlay blend weight in 0..=1.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Total-variation table across all hook modes.
    EvalTv {
        #[command(flatten)]
        io: config::IoOpts,
        #[command(flatten)]
        data: config::DataOpts,
        #[command(flatten)]
        saliency: config::SaliencyOpts,
        #[command(flatten)]
        metrics: config::MetricOpts,
    },
    /// Insertion/deletion faithfulness curves.
    EvalInsdel {
        #[command(flatten)]
        io: config::IoOpts,
        #[command(flatten)]
        data: config::DataOpts,
        #[command(flatten)]
        saliency: config::SaliencyOpts,
        #[command(flatten)]
        metrics: config::MetricOpts,
    },
    /// Softmax prediction difference and accuracy, original vs each mode.
    EvalPreddiff {
        #[command(flatten)]
        io: config::IoOpts,
        #[command(flatten)]
        data: config::DataOpts,
        #[command(flatten)]
        metrics: config::MetricOpts,
    },
    /// Weight-randomization sanity check with the noise-saliency baseline.
    RandomizeTest {
        #[command(flatten)]
        io: config::IoOpts,
        #[command(flatten)]
        data: config::DataOpts,
        #[command(flatten)]
        saliency: config::SaliencyOpts,
        #[command(flatten)]
        metrics: config::MetricOpts,
        /// Cut points head to stem, comma-separated.
        #[arg(long)]
        cuts: Option<String>,
    },
}

/// Parse and run; returns the process exit code. Domain failures (missing
/// checkpoint, bad config) exit 2, like clap's own usage errors.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::DemoCheckerboard { size, out } => commands::demo::run(size, &out),
        Cmd::GenDataset { classes, count, image_size, seed, out } => {
            commands::gen::run(classes, count, image_size, seed, &out)
        }
        Cmd::Train { io, data, fit, widths, blocks } => {
            let mut cfg = ExperimentConfig::load(&io)?;
            cfg.apply_data(&data);
            cfg.apply_fit_to_train(&fit);
            if let Some(w) = &widths {
                cfg.train.stage_widths = parse_widths(w)?;
            }
            if let Some(b) = blocks {
                cfg.train.blocks_per_stage = b;
            }
            commands::train::run(&cfg)
        }
        Cmd::TrainSurrogate { io, data, fit, layers } => {
            let mut cfg = ExperimentConfig::load(&io)?;
            cfg.apply_data(&data);
            cfg.apply_fit_to_surrogate(&fit);
            if let Some(l) = &layers {
                cfg.surrogate.layers =
                    Some(l.split(',').map(|s| s.trim().to_string()).collect());
            }
            commands::train::run_surrogate(&cfg)
        }
        Cmd::Attribute { io, data, saliency, metrics, alpha } => {
            let mut cfg = ExperimentConfig::load(&io)?;
            cfg.apply_data(&data);
            cfg.apply_saliency(&saliency)?;
            cfg.apply_metrics(&metrics);
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            commands::attribute::run(&cfg)
        }
        Cmd::EvalTv { io, data, saliency, metrics } => {
            let mut cfg = ExperimentConfig::load(&io)?;
            cfg.apply_data(&data);
            cfg.apply_saliency(&saliency)?;
            cfg.apply_metrics(&metrics);
            commands::evals::run_tv(&cfg)
        }
        Cmd::EvalInsdel { io, data, saliency, metrics } => {
            let mut cfg = ExperimentConfig::load(&io)?;
            cfg.apply_data(&data);
            cfg.apply_saliency(&saliency)?;
            cfg.apply_metrics(&metrics);
            commands::evals::run_insdel(&cfg)
        }
        Cmd::EvalPreddiff { io, data, metrics } => {
            let mut cfg = ExperimentConfig::load(&io)?;
            cfg.apply_data(&data);
            cfg.apply_metrics(&metrics);
            commands::evals::run_preddiff(&cfg)
        }
        Cmd::RandomizeTest { io, data, saliency, metrics, cuts } => {
            let mut cfg = ExperimentConfig::load(&io)?;
            cfg.apply_data(&data);
            cfg.apply_saliency(&saliency)?;
            cfg.apply_metrics(&metrics);
            if let Some(c) = &cuts {
                cfg.cuts = Some(c.split(',').map(|s| s.trim().to_string()).collect());
            }
            commands::randomize::run(&cfg)
        }
    }
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad width {p:?} in --widths")))
        })
        .collect()
}

/// Everything the evaluation commands share: the checkpoint, the dataset
/// cast to f64, and the labels.
pub struct Workbench {
    pub model: ModelGraph<f64>,
    pub manifest: ModelManifest,
    pub dataset: Dataset,
    pub images: Tensor<f64>,
}

impl Workbench {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let model_dir = cfg.require_model()?;
        let data_dir = cfg.require_dataset()?;
        let (model, manifest) = checkpoint::load_model::<f64>(model_dir)?;
        let dataset = dataset::load(data_dir)?;
        if dataset.manifest.classes != model.classes
            || dataset.manifest.image_size != model.image_size
            || dataset.manifest.channels != model.input_channels
        {
            return Err(Error::config(format!(
                "model expects {} classes / {}px / {} channels, dataset provides {} / {} / {}",
                model.classes,
                model.image_size,
                model.input_channels,
                dataset.manifest.classes,
                dataset.manifest.image_size,
                dataset.manifest.channels,
            )));
        }
        let images = dataset.images.cast::<f64>();
        Ok(Workbench { model, manifest, dataset, images })
    }

    /// First `cfg.samples` samples (clamped), as (index, label) pairs.
    pub fn eval_slice(&self, cfg: &ExperimentConfig) -> Vec<(usize, usize)> {
        let n = cfg.samples.min(self.dataset.len());
        (0..n).map(|i| (i, self.dataset.labels[i])).collect()
    }

    /// Report-axis name for a layer: aliases resolve to the layer they
    /// point at, so "stage1.out" labels as its block ("1_2").
    pub fn axis_name(&self, layer: &str) -> String {
        match self.model.resolve(layer) {
            Ok(idx) => degrid_core::graph::display_name(self.model.layer_id(idx)),
            Err(_) => layer.to_string(),
        }
    }
}

pub fn rolls(cfg: &ExperimentConfig) -> RollSet {
    if cfg.literal_paper_rolls {
        RollSet::literal()
    } else {
        RollSet::adjoint()
    }
}

/// Execution plan for the configured mode; surrogate mode loads the
/// distilled paths stored inside the checkpoint directory.
pub fn plan_for(
    cfg: &ExperimentConfig,
    model: &ModelGraph<f64>,
    mode: HookMode,
) -> Result<ExecPlan<f64>> {
    let surrogates = if mode == HookMode::Surrogate {
        Some(load_surrogates(cfg, model)?)
    } else {
        None
    };
    denoise::attach(model, mode, surrogates.as_ref(), rolls(cfg))
}

pub fn load_surrogates(
    cfg: &ExperimentConfig,
    model: &ModelGraph<f64>,
) -> Result<std::collections::BTreeMap<String, SurrogatePath<f64>>> {
    let model_dir = cfg.require_model()?;
    let loaded = denoise::load_surrogates::<f64>(model_dir)?;
    if loaded.is_empty() {
        return Err(Error::config(format!(
            "no surrogates under {}; run train-surrogate first",
            model_dir.display()
        )));
    }
    let _ = model;
    Ok(loaded)
}

/// `create_dir_all` with the path in the error message.
pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", path.display())))
}
