//! Command-line front end. All logic lives in the library
//! ([`cogo::harness`]); this binary only parses flags, applies them over an
//! optional JSON config file, and dispatches.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use cogo::attack::{AttackConfig, AttackMethod};
use cogo::error::Result;
use cogo::freq::CeConfig;
use cogo::harness::{
    cmd_ablate, cmd_analyze, cmd_attack, cmd_gen_data, cmd_train, output_root, AblateRunConfig,
    AnalyzeMode, AnalyzeRunConfig, AttackRunConfig, DatasetSource, SweepAxis, TrainRunConfig,
};
use cogo::suppress::{ThresholdMode, TokenScaleMode};
use cogo::train::TrainConfig;

#[derive(Parser)]
#[command(
    name = "cogo",
    about = "Adversarial-transferability lab for tiny vision transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural shape/texture dataset (train/val/eval).
    GenData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Samples per class in each split.
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        /// Output directory (defaults to $COGO_OUT_ROOT/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model variant and write a checkpoint.
    Train {
        /// vit_tiny, deit_tiny or hybrid_tiny.
        #[arg(long)]
        variant: String,
        /// Dataset directory from gen-data (procedural fallback if omitted).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Output checkpoint path (defaults to $COGO_OUT_ROOT/ckpts/<variant>.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attack the eval split on a surrogate and evaluate targets on the
    /// resulting adversarial images.
    Attack {
        #[arg(long)]
        surrogate: PathBuf,
        /// Comma-separated target checkpoints (surrogate itself is always
        /// included as the white-box target).
        #[arg(long, value_delimiter = ',')]
        targets: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Cap on eval images (0 = all).
        #[arg(long, default_value_t = 0)]
        n_images: usize,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// mim disables the spectral transform and suppression outright.
        #[arg(long, default_value = "cogo")]
        method: String,
        #[arg(long)]
        save_images: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON file with a full AttackConfig to start from.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        attack: AttackFlags,
    },
    /// Sweep one hyperparameter axis and aggregate transfer ASR per value.
    Ablate {
        /// gamma | n_pairs | thresholds | c | lambda | hook_site | iterations | ce_is_toggle
        #[arg(long)]
        axis: String,
        /// Comma-separated sweep values (axis-specific syntax, e.g. 0.5:0.7
        /// for thresholds, qkv+proj for hook_site, both/ce/is/neither for
        /// ce_is_toggle).
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long, value_delimiter = ',')]
        targets: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        n_images: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        attack: AttackFlags,
    },
    /// Emit gradient-dispersion profiles or sensitivity-map PNGs.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// dispersion | sensitivity
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 100)]
        n_images: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        attack: AttackFlags,
    },
}

/// Attack hyperparameter overrides, named after the usual symbols.
#[derive(Args)]
struct AttackFlags {
    /// l-inf budget (image range 0..1).
    #[arg(long)]
    epsilon: Option<f32>,
    /// Iteration count T.
    #[arg(long)]
    iterations: Option<usize>,
    /// Step-size constant lambda (step = lambda * epsilon / T).
    #[arg(long)]
    lambda: Option<f32>,
    /// Momentum decay mu.
    #[arg(long)]
    mu: Option<f32>,
    /// Spectral samples per iteration.
    #[arg(long)]
    samples: Option<usize>,
    /// Enhancement coefficient gamma.
    #[arg(long)]
    gamma: Option<f32>,
    /// Spectral-noise standard deviation.
    #[arg(long)]
    noise_std: Option<f32>,
    /// Mask half-width rho.
    #[arg(long)]
    rho: Option<f32>,
    /// Disable the spectral (commonality-enhancement) transform.
    #[arg(long)]
    no_ce: bool,
    /// Disable gradient suppression.
    #[arg(long)]
    no_is: bool,
    /// Suppression reduction factor alpha.
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    beta_mi: Option<f32>,
    #[arg(long)]
    beta_corr: Option<f32>,
    /// Sampled channel pairs per gradient tensor.
    #[arg(long)]
    n_pairs: Option<usize>,
    /// Fixed mutual-information threshold (switches threshold mode to fixed;
    /// requires --tau-corr).
    #[arg(long)]
    tau_mi: Option<f32>,
    #[arg(long)]
    tau_corr: Option<f32>,
    /// adaptive, or a fixed scale value like 0.1.
    #[arg(long)]
    c_mode: Option<String>,
}

impl AttackFlags {
    fn apply(&self, mut cfg: AttackConfig) -> Result<AttackConfig> {
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda_step = v;
        }
        if let Some(v) = self.mu {
            cfg.momentum_mu = v;
        }
        if let Some(v) = self.samples {
            cfg.spectral_samples = v;
        }
        if let Some(v) = self.gamma {
            cfg.ce.gamma = v;
        }
        if let Some(v) = self.noise_std {
            cfg.ce.noise_std = v;
        }
        if let Some(v) = self.rho {
            cfg.ce.rho = v;
        }
        if self.no_ce {
            cfg.ce = CeConfig::disabled();
            cfg.spectral_samples = 1;
        }
        if self.no_is {
            cfg.is = None;
        } else {
            let needs_is = self.alpha.is_some()
                || self.beta_mi.is_some()
                || self.beta_corr.is_some()
                || self.n_pairs.is_some()
                || self.tau_mi.is_some()
                || self.c_mode.is_some();
            if needs_is || cfg.is.is_some() {
                let mut is = cfg.is.take().unwrap_or_default();
                if let Some(v) = self.alpha {
                    is.alpha = v;
                }
                if let Some(v) = self.beta_mi {
                    is.beta_mi = v;
                }
                if let Some(v) = self.beta_corr {
                    is.beta_corr = v;
                }
                if let Some(v) = self.n_pairs {
                    is.n_pairs = v;
                }
                if let (Some(tau_mi), Some(tau_corr)) = (self.tau_mi, self.tau_corr) {
                    is.threshold_mode = ThresholdMode::Fixed { tau_mi, tau_corr };
                }
                if let Some(mode) = &self.c_mode {
                    is.token_scale_mode = if mode == "adaptive" {
                        TokenScaleMode::AdaptiveSigmoid
                    } else {
                        TokenScaleMode::Fixed {
                            c: mode.parse().map_err(|_| {
                                cogo::error::CogoError::InvalidConfig(format!(
                                    "--c-mode expects 'adaptive' or a number, got '{mode}'"
                                ))
                            })?,
                        }
                    };
                }
                cfg.is = Some(is);
            }
        }
        Ok(cfg)
    }
}

fn dataset_source(data: Option<PathBuf>) -> DatasetSource {
    match data {
        Some(path) => DatasetSource::Directory { path },
        None => DatasetSource::Procedural {
            seed: 7,
            n_per_class: 200,
        },
    }
}

fn base_attack(config: Option<&PathBuf>) -> Result<AttackConfig> {
    match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(AttackConfig::default()),
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            seed,
            n_per_class,
            out,
        } => {
            let out = out.unwrap_or_else(|| output_root().join("dataset"));
            cmd_gen_data(seed, n_per_class, &out)?;
            println!("dataset written to {}", out.display());
        }
        Command::Train {
            variant,
            data,
            epochs,
            seed,
            lr,
            batch_size,
            out,
        } => {
            let out =
                out.unwrap_or_else(|| output_root().join("ckpts").join(format!("{variant}.ckpt")));
            let mut train = TrainConfig {
                epochs,
                seed,
                ..Default::default()
            };
            if let Some(lr) = lr {
                train.lr = lr;
            }
            if let Some(bs) = batch_size {
                train.batch_size = bs;
            }
            let ckpt = cmd_train(&TrainRunConfig {
                variant,
                dataset: dataset_source(data),
                train,
                out_ckpt: out.clone(),
            })?;
            println!(
                "checkpoint {} (val accuracy {:.1}%)",
                out.display(),
                ckpt.meta.final_accuracy * 100.0
            );
        }
        Command::Attack {
            surrogate,
            targets,
            data,
            n_images,
            seeds,
            method,
            save_images,
            out,
            config,
            attack,
        } => {
            let method = match method.as_str() {
                "cogo" => AttackMethod::Cogo,
                "mim" => AttackMethod::Mim,
                other => {
                    return Err(cogo::error::CogoError::InvalidConfig(format!(
                        "unknown method '{other}'; valid: cogo, mim"
                    )))
                }
            };
            let out = out.unwrap_or_else(|| output_root().join("attack"));
            let cfg = AttackRunConfig {
                surrogate_ckpt: surrogate,
                target_ckpts: targets,
                dataset: dataset_source(data),
                n_images,
                attack: attack.apply(base_attack(config.as_ref())?)?,
                method,
                seeds,
                output_dir: out.clone(),
                save_images,
            };
            let reports = cmd_attack(&cfg)?;
            for report in &reports {
                for row in &report.rows {
                    println!(
                        "seed {} {} -> {}: ASR {:.1}% ({} images)",
                        report.seed, report.surrogate, row.target, row.asr_percent, row.n_images
                    );
                }
            }
            println!("reports in {}", out.display());
        }
        Command::Ablate {
            axis,
            values,
            surrogate,
            targets,
            data,
            n_images,
            seeds,
            out,
            config,
            attack,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let out = out.unwrap_or_else(|| output_root().join(format!("ablate-{axis}")));
            let cfg = AblateRunConfig {
                surrogate_ckpt: surrogate,
                target_ckpts: targets,
                dataset: dataset_source(data),
                n_images,
                base_attack: attack.apply(base_attack(config.as_ref())?)?,
                axis,
                values,
                seeds,
                output_dir: out.clone(),
            };
            let sweep = cmd_ablate(&cfg)?;
            for point in &sweep.points {
                println!(
                    "{axis}={}: mean transfer ASR {:.2}% (std {:.2})",
                    point.value, point.mean_asr, point.std_asr
                );
            }
            println!("sweep reports in {}", out.display());
        }
        Command::Analyze {
            ckpt,
            data,
            mode,
            n_images,
            out,
            attack,
        } => {
            let mode: AnalyzeMode = mode.parse()?;
            let out = out.unwrap_or_else(|| output_root().join("analyze"));
            let cfg = AnalyzeRunConfig {
                ckpt,
                dataset: dataset_source(data),
                mode,
                n_images,
                attack: attack.apply(AttackConfig::default())?,
                output_dir: out.clone(),
            };
            let profile = cmd_analyze(&cfg)?;
            if let Some(profile) = profile {
                println!("block  plain    cogo");
                for (i, (p, c)) in profile.plain.iter().zip(&profile.cogo).enumerate() {
                    println!("{i:5}  {p:.4}  {c:.4}");
                }
            }
            println!("artifacts in {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
