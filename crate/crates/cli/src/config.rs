//! One experiment config covers every command: a JSON file provides the
//! base values, command-line flags override single fields, and the fully
//! resolved struct is written back into the output directory so the run
//! can be repeated bit-for-bit from that file alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use degrid_core::checkpoint::{read_json, write_json};
use degrid_core::denoise::HookMode;
use degrid_core::error::{Error, Result};
use degrid_core::metrics::InsDelCfg;
use degrid_core::saliency::{AttributionRequest, Method, SmoothGradCfg};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// None trains every eligible downsampling conv.
    pub layers: Option<Vec<String>>,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        SurrogateSection { epochs: 10, batch_size: 32, learning_rate: 1e-3, layers: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub mode: HookMode,
    pub method: Method,
    pub layers: Vec<String>,
    /// None attributes each sample's own label.
    pub target: Option<usize>,
    pub ig_steps: usize,
    /// 0 disables the smoothing wrapper.
    pub smoothgrad_n: usize,
    pub smoothgrad_sigma: f64,
    /// Evaluation sample budget; clamped to the dataset size.
    pub samples: usize,
    /// Overlay blend weight for attribute outputs.
    pub alpha: f64,
    pub steps: usize,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub literal_paper_rolls: bool,
    /// Randomization cut points, head to stem; None derives them from the
    /// model (fc, eligible convs in reverse, stem).
    pub cuts: Option<Vec<String>>,
    pub train: TrainSection,
    pub surrogate: SurrogateSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: None,
            dataset: None,
            out: PathBuf::from("out"),
            seed: 0,
            mode: HookMode::Original,
            method: Method::Grad,
            layers: vec!["input".to_string()],
            target: None,
            ig_steps: 32,
            smoothgrad_n: 0,
            smoothgrad_sigma: 0.2,
            samples: 100,
            alpha: 0.5,
            steps: 100,
            blur_kernel: 11,
            blur_sigma: 5.0,
            literal_paper_rolls: false,
            cuts: None,
            train: TrainSection::default(),
            surrogate: SurrogateSection::default(),
        }
    }
}

/// Flag values as typed by the user; `None` keeps the config file (or
/// default) value. Commands flatten the groups they understand.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct IoOpts {
    /// Base config file; flags override individual fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for reports and artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed for every random stream in the run.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct DataOpts {
    /// Model checkpoint directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct SaliencyOpts {
    /// Hook mode: original | backward | forward | surrogate.
    #[arg(long)]
    pub mode: Option<String>,
    /// Attribution method: grad | ig | deeplift | gradcam.
    #[arg(long)]
    pub method: Option<String>,
    /// Layer id(s) to attribute at, comma-separated ("input" for the image).
    #[arg(long)]
    pub layer: Option<String>,
    /// Fixed target class; omitted = each sample's label.
    #[arg(long)]
    pub target: Option<usize>,
    /// Riemann steps for integrated gradients.
    #[arg(long)]
    pub ig_steps: Option<usize>,
    /// SmoothGrad sample count; 0 disables smoothing.
    #[arg(long)]
    pub smoothgrad_n: Option<usize>,
    /// SmoothGrad noise sigma.
    #[arg(long)]
    pub smoothgrad_sigma: Option<f64>,
    /// Use the published roll offsets instead of their adjoint.
    #[arg(long)]
    pub literal_paper_rolls: bool,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct MetricOpts {
    /// Number of samples to evaluate.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Insertion/deletion perturbation steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct FitOpts {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

fn parse_list(s: &str) -> Vec<String> {
    s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

impl ExperimentConfig {
    /// File config when given, built-in defaults otherwise.
    pub fn load(io: &IoOpts) -> Result<Self> {
        let mut cfg = match &io.config {
            Some(path) => read_json::<ExperimentConfig>(path)
                .map_err(|e| Error::config(format!("config {}: {e}", path.display())))?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &io.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = io.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    pub fn apply_data(&mut self, opts: &DataOpts) {
        if let Some(m) = &opts.model {
            self.model = Some(m.clone());
        }
        if let Some(d) = &opts.dataset {
            self.dataset = Some(d.clone());
        }
    }

    pub fn apply_saliency(&mut self, opts: &SaliencyOpts) -> Result<()> {
        if let Some(mode) = &opts.mode {
            self.mode = mode.parse()?;
        }
        if let Some(method) = &opts.method {
            self.method = method.parse()?;
        }
        if let Some(layer) = &opts.layer {
            let layers = parse_list(layer);
            if layers.is_empty() {
                return Err(Error::config("--layer given but empty".to_string()));
            }
            self.layers = layers;
        }
        if let Some(t) = opts.target {
            self.target = Some(t);
        }
        if let Some(m) = opts.ig_steps {
            self.ig_steps = m;
        }
        if let Some(n) = opts.smoothgrad_n {
            self.smoothgrad_n = n;
        }
        if let Some(s) = opts.smoothgrad_sigma {
            self.smoothgrad_sigma = s;
        }
        if opts.literal_paper_rolls {
            self.literal_paper_rolls = true;
        }
        Ok(())
    }

    pub fn apply_metrics(&mut self, opts: &MetricOpts) {
        if let Some(n) = opts.samples {
            self.samples = n;
        }
        if let Some(s) = opts.steps {
            self.steps = s;
        }
    }

    pub fn apply_fit_to_train(&mut self, opts: &FitOpts) {
        if let Some(e) = opts.epochs {
            self.train.epochs = e;
        }
        if let Some(b) = opts.batch_size {
            self.train.batch_size = b;
        }
        if let Some(lr) = opts.lr {
            self.train.learning_rate = lr;
        }
    }

    pub fn apply_fit_to_surrogate(&mut self, opts: &FitOpts) {
        if let Some(e) = opts.epochs {
            self.surrogate.epochs = e;
        }
        if let Some(b) = opts.batch_size {
            self.surrogate.batch_size = b;
        }
        if let Some(lr) = opts.lr {
            self.surrogate.learning_rate = lr;
        }
    }

    pub fn require_model(&self) -> Result<&Path> {
        let path =
            self.model.as_deref().ok_or_else(|| Error::config("no --model given".to_string()))?;
        if !path.join("manifest.json").is_file() {
            return Err(Error::config(format!(
                "model checkpoint not found at {}",
                path.display()
            )));
        }
        Ok(path)
    }

    pub fn require_dataset(&self) -> Result<&Path> {
        let path = self
            .dataset
            .as_deref()
            .ok_or_else(|| Error::config("no --dataset given".to_string()))?;
        if !path.join("manifest.json").is_file() {
            return Err(Error::config(format!("dataset not found at {}", path.display())));
        }
        Ok(path)
    }

    pub fn insdel(&self) -> InsDelCfg {
        InsDelCfg { steps: self.steps, blur_kernel: self.blur_kernel, blur_sigma: self.blur_sigma }
    }

    /// Attribution request for one layer; the target is filled per sample.
    pub fn request(&self, layer: &str, target: usize) -> AttributionRequest {
        let mut req = AttributionRequest::new(self.method, layer, target);
        req.ig_steps = self.ig_steps;
        if self.smoothgrad_n > 0 {
            req.smoothgrad = Some(SmoothGradCfg {
                n: self.smoothgrad_n,
                sigma: self.smoothgrad_sigma,
                seed: self.seed,
            });
        }
        req
    }

    /// Persist the resolved config next to the outputs it produced.
    pub fn save(&self, out_dir: &Path) -> Result<()> {
        write_json(&out_dir.join("config.json"), self)
    }
}
