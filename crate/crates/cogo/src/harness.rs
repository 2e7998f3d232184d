//! Experiment orchestration: dataset sourcing, training runs, attack and
//! transfer evaluations, ablation sweeps and analysis artifacts. The `cogo`
//! binary is a thin argument parser over these functions; the runnable
//! examples call them directly.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    dispersion_profile, transfer_run, DispersionProfile, TransferReport,
};
use crate::attack::{AttackConfig, AttackMethod};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{
    load_split, procedural_splits, save_gray_png, save_rgb_png, save_splits, Dataset, Split,
};
use crate::error::{CogoError, Result};
use crate::freq::CeConfig;
use crate::report::{
    mean_std, write_config_snapshot, write_sweep_csv, write_sweep_json, write_transfer_csv,
    write_transfer_json, SweepPoint, SweepReport, SweepTargetStat,
};
use crate::suppress::{SuppressionConfig, ThresholdMode, TokenScaleMode};
use crate::train::{train_model, TrainConfig};
use crate::vit::{Model, ModelSpec, SiteKind, Variant};

/// Default output root; overridden by the `COGO_OUT_ROOT` environment
/// variable.
pub fn output_root() -> PathBuf {
    std::env::var_os("COGO_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("cogo-out"))
}

/// Where experiment data comes from: the procedural renderer or an image
/// directory with train/val/eval subdirectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Procedural { seed: u64, n_per_class: usize },
    Directory { path: PathBuf },
}

impl DatasetSource {
    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self {
            DatasetSource::Procedural { seed, n_per_class } => {
                Ok(crate::data::render_split(*seed, split, *n_per_class))
            }
            DatasetSource::Directory { path } => load_split(path.join(split.dir_name())),
        }
    }
}

/// Full experiment description; every command can be driven from a JSON file
/// of this shape with CLI flags overriding individual fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub attack: AttackConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Gamma,
    NPairs,
    Thresholds,
    C,
    Lambda,
    HookSite,
    Iterations,
    CeIsToggle,
}

pub const VALID_AXES: &str =
    "gamma, n_pairs, thresholds, c, lambda, hook_site, iterations, ce_is_toggle";

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Gamma => "gamma",
            SweepAxis::NPairs => "n_pairs",
            SweepAxis::Thresholds => "thresholds",
            SweepAxis::C => "c",
            SweepAxis::Lambda => "lambda",
            SweepAxis::HookSite => "hook_site",
            SweepAxis::Iterations => "iterations",
            SweepAxis::CeIsToggle => "ce_is_toggle",
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = CogoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepAxis::Gamma),
            "n_pairs" | "n-pairs" => Ok(SweepAxis::NPairs),
            "thresholds" => Ok(SweepAxis::Thresholds),
            "c" => Ok(SweepAxis::C),
            "lambda" => Ok(SweepAxis::Lambda),
            "hook_site" | "hook-site" => Ok(SweepAxis::HookSite),
            "iterations" => Ok(SweepAxis::Iterations),
            "ce_is_toggle" | "ce-is-toggle" => Ok(SweepAxis::CeIsToggle),
            other => Err(CogoError::UnknownAxis {
                got: other.to_string(),
                valid: VALID_AXES,
            }),
        }
    }
}

fn parse_f32(axis: SweepAxis, value: &str) -> Result<f32> {
    value.parse().map_err(|_| {
        CogoError::InvalidConfig(format!("axis {axis}: cannot parse '{value}' as a number"))
    })
}

fn parse_usize(axis: SweepAxis, value: &str) -> Result<usize> {
    value.parse().map_err(|_| {
        CogoError::InvalidConfig(format!("axis {axis}: cannot parse '{value}' as an integer"))
    })
}

fn parse_site_combo(value: &str) -> Result<Vec<SiteKind>> {
    value
        .split('+')
        .map(|part| match part.trim() {
            "dropout" => Ok(SiteKind::AttnDropout),
            other => other.parse(),
        })
        .collect()
}

/// Produce the attack config for one sweep point.
pub fn apply_axis_value(
    base: &AttackConfig,
    axis: SweepAxis,
    value: &str,
) -> Result<AttackConfig> {
    let mut cfg = base.clone();
    let default_is = SuppressionConfig::default;
    match axis {
        SweepAxis::Gamma => {
            cfg.ce.gamma = parse_f32(axis, value)?;
        }
        SweepAxis::NPairs => {
            let mut is = cfg.is.unwrap_or_else(default_is);
            is.n_pairs = parse_usize(axis, value)?;
            cfg.is = Some(is);
        }
        SweepAxis::Thresholds => {
            let mut is = cfg.is.unwrap_or_else(default_is);
            if value == "adaptive" {
                is.threshold_mode = ThresholdMode::Adaptive;
            } else {
                let parts: Vec<&str> = value.split(':').collect();
                if parts.len() != 2 {
                    return Err(CogoError::InvalidConfig(format!(
                        "axis thresholds: expected 'tau_mi:tau_corr' or 'adaptive', got '{value}'"
                    )));
                }
                is.threshold_mode = ThresholdMode::Fixed {
                    tau_mi: parse_f32(axis, parts[0])?,
                    tau_corr: parse_f32(axis, parts[1])?,
                };
            }
            cfg.is = Some(is);
        }
        SweepAxis::C => {
            let mut is = cfg.is.unwrap_or_else(default_is);
            if value == "adaptive" {
                is.token_scale_mode = TokenScaleMode::AdaptiveSigmoid;
            } else {
                is.token_scale_mode = TokenScaleMode::Fixed {
                    c: parse_f32(axis, value)?,
                };
            }
            cfg.is = Some(is);
        }
        SweepAxis::Lambda => {
            cfg.lambda_step = parse_f32(axis, value)?;
        }
        SweepAxis::HookSite => {
            cfg.is_sites = parse_site_combo(value)?;
            if cfg.is.is_none() {
                cfg.is = Some(default_is());
            }
        }
        SweepAxis::Iterations => {
            cfg.iterations = parse_usize(axis, value)?;
        }
        SweepAxis::CeIsToggle => match value {
            "neither" => {
                cfg.ce = CeConfig::disabled();
                cfg.is = None;
                cfg.spectral_samples = 1;
            }
            "ce" => {
                if cfg.ce.is_disabled() {
                    cfg.ce = CeConfig::default();
                }
                cfg.is = None;
            }
            "is" => {
                cfg.ce = CeConfig::disabled();
                cfg.spectral_samples = 1;
                if cfg.is.is_none() {
                    cfg.is = Some(default_is());
                }
            }
            "both" => {
                if cfg.ce.is_disabled() {
                    cfg.ce = CeConfig::default();
                }
                if cfg.is.is_none() {
                    cfg.is = Some(default_is());
                }
            }
            other => {
                return Err(CogoError::InvalidConfig(format!(
                    "axis ce_is_toggle: expected neither|ce|is|both, got '{other}'"
                )))
            }
        },
    }
    Ok(cfg)
}

/// A checkpoint-backed model with a display name (the file stem).
pub struct LoadedModel {
    pub name: String,
    pub model: Model,
    pub checkpoint: Checkpoint,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let path = path.as_ref();
    let checkpoint = load_checkpoint(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| checkpoint.meta.spec.variant.to_string());
    let model = checkpoint.clone().into_model()?;
    Ok(LoadedModel {
        name,
        model,
        checkpoint,
    })
}

// ---- commands -------------------------------------------------------------

/// Generate the procedural dataset on disk (train/val/eval, each with
/// `n_per_class` samples per class and a labels.csv manifest).
pub fn cmd_gen_data(seed: u64, n_per_class: usize, out_dir: impl AsRef<Path>) -> Result<()> {
    if n_per_class < 10 {
        return Err(CogoError::InvalidConfig(format!(
            "n_per_class must be >= 10, got {n_per_class}"
        )));
    }
    let out_dir = out_dir.as_ref();
    let splits = procedural_splits(seed, n_per_class);
    save_splits(out_dir, &splits)?;
    #[derive(Serialize)]
    struct GenConfig {
        seed: u64,
        n_per_class: usize,
    }
    write_config_snapshot(out_dir, &GenConfig { seed, n_per_class })?;
    log::info!(
        "wrote {} images per split to {}",
        splits.train.len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub variant: String,
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub out_ckpt: PathBuf,
}

/// Train one variant and write its checkpoint (plus a config snapshot next
/// to it).
pub fn cmd_train(cfg: &TrainRunConfig) -> Result<Checkpoint> {
    let variant: Variant = cfg.variant.parse()?;
    let spec = ModelSpec::tiny(variant);
    let train_data = cfg.dataset.load(Split::Train)?;
    let val_data = cfg.dataset.load(Split::Val)?;
    let (_, ckpt) = train_model(&spec, &train_data, &val_data, &cfg.train)?;
    if let Some(parent) = cfg.out_ckpt.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_checkpoint(&cfg.out_ckpt, &ckpt)?;
    if let Some(dir) = cfg.out_ckpt.parent() {
        write_config_snapshot(dir, cfg)?;
    }
    log::info!(
        "trained {} to {:.1}% val accuracy ({} epochs), checkpoint at {}",
        cfg.variant,
        ckpt.meta.final_accuracy * 100.0,
        cfg.train.epochs,
        cfg.out_ckpt.display()
    );
    Ok(ckpt)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRunConfig {
    pub surrogate_ckpt: PathBuf,
    pub target_ckpts: Vec<PathBuf>,
    pub dataset: DatasetSource,
    /// Evaluate at most this many images from the eval split (0 = all).
    #[serde(default)]
    pub n_images: usize,
    pub attack: AttackConfig,
    pub method: AttackMethod,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub save_images: bool,
}

/// Attack the eval split on the surrogate and evaluate all targets on the
/// same adversarial images; writes transfer.csv / transfer.json and
/// optionally the adversarial PNGs.
pub fn cmd_attack(cfg: &AttackRunConfig) -> Result<Vec<TransferReport>> {
    let surrogate = load_model(&cfg.surrogate_ckpt)?;
    let mut targets: Vec<(String, Model)> = vec![(surrogate.name.clone(), {
        // fresh copy so the surrogate also appears as the white-box target
        surrogate.checkpoint.clone().into_model()?
    })];
    for path in &cfg.target_ckpts {
        let loaded = load_model(path)?;
        targets.push((loaded.name, loaded.model));
    }
    let mut data = cfg.dataset.load(Split::Eval)?;
    if cfg.n_images > 0 {
        data = data.take(cfg.n_images);
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_config_snapshot(&cfg.output_dir, cfg)?;

    let target_refs: Vec<(String, &Model)> = targets
        .iter()
        .map(|(name, model)| (name.clone(), model))
        .collect();
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let attack_cfg = AttackConfig {
            seed,
            ..cfg.attack.clone()
        };
        let run = transfer_run(
            (surrogate.name.as_str(), &surrogate.model),
            &target_refs,
            &data,
            &attack_cfg,
            cfg.method,
        )?;
        if cfg.save_images {
            let img_dir = cfg.output_dir.join(format!("adv_seed{seed}"));
            std::fs::create_dir_all(&img_dir)?;
            for (i, x_adv) in run.x_adv.iter().enumerate() {
                save_rgb_png(img_dir.join(format!("adv_{i:05}.png")), x_adv)?;
            }
        }
        reports.push(run.report);
    }
    write_transfer_csv(cfg.output_dir.join("transfer.csv"), &reports)?;
    write_transfer_json(cfg.output_dir.join("transfer.json"), &reports)?;
    Ok(reports)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRunConfig {
    pub surrogate_ckpt: PathBuf,
    pub target_ckpts: Vec<PathBuf>,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub n_images: usize,
    pub base_attack: AttackConfig,
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

/// One transfer evaluation per (value, seed); aggregates mean and std of the
/// over-targets mean ASR.
pub fn cmd_ablate(cfg: &AblateRunConfig) -> Result<SweepReport> {
    if cfg.values.is_empty() {
        return Err(CogoError::InvalidConfig(
            "sweep values must be nonempty".into(),
        ));
    }
    let surrogate = load_model(&cfg.surrogate_ckpt)?;
    let mut targets: Vec<(String, Model)> = Vec::new();
    for path in &cfg.target_ckpts {
        let loaded = load_model(path)?;
        targets.push((loaded.name, loaded.model));
    }
    if targets.is_empty() {
        return Err(CogoError::InvalidConfig(
            "ablation needs at least one target checkpoint".into(),
        ));
    }
    let mut data = cfg.dataset.load(Split::Eval)?;
    if cfg.n_images > 0 {
        data = data.take(cfg.n_images);
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_config_snapshot(&cfg.output_dir, cfg)?;
    let target_refs: Vec<(String, &Model)> = targets
        .iter()
        .map(|(name, model)| (name.clone(), model))
        .collect();

    let mut points = Vec::with_capacity(cfg.values.len());
    for value in &cfg.values {
        let point_cfg = apply_axis_value(&cfg.base_attack, cfg.axis, value)?;
        let mut per_seed_mean = Vec::with_capacity(cfg.seeds.len());
        let mut per_target_values: Vec<Vec<f32>> = vec![Vec::new(); target_refs.len()];
        for &seed in &cfg.seeds {
            let seeded = AttackConfig {
                seed,
                ..point_cfg.clone()
            };
            let run = transfer_run(
                (surrogate.name.as_str(), &surrogate.model),
                &target_refs,
                &data,
                &seeded,
                AttackMethod::Cogo,
            )?;
            let mean_over_targets = run
                .report
                .rows
                .iter()
                .map(|r| r.asr_percent)
                .sum::<f32>()
                / run.report.rows.len() as f32;
            per_seed_mean.push(mean_over_targets);
            for (slot, row) in per_target_values.iter_mut().zip(&run.report.rows) {
                slot.push(row.asr_percent);
            }
        }
        let (mean_asr, std_asr) = mean_std(&per_seed_mean);
        let per_target = target_refs
            .iter()
            .zip(&per_target_values)
            .map(|((name, _), values)| {
                let (m, s) = mean_std(values);
                SweepTargetStat {
                    target: name.clone(),
                    mean_asr: m,
                    std_asr: s,
                }
            })
            .collect();
        log::info!(
            "ablate {}={}: mean transfer ASR {:.2} (std {:.2})",
            cfg.axis,
            value,
            mean_asr,
            std_asr
        );
        points.push(SweepPoint {
            value: value.clone(),
            per_seed_mean_asr: per_seed_mean,
            mean_asr,
            std_asr,
            per_target,
        });
    }
    let sweep = SweepReport {
        schema_version: crate::analysis::REPORT_SCHEMA_VERSION,
        axis: cfg.axis.to_string(),
        seeds: cfg.seeds.clone(),
        points,
    };
    write_sweep_csv(cfg.output_dir.join("sweep.csv"), &sweep)?;
    write_sweep_json(cfg.output_dir.join("sweep.json"), &sweep)?;
    Ok(sweep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzeMode {
    Dispersion,
    Sensitivity,
}

impl FromStr for AnalyzeMode {
    type Err = CogoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dispersion" => Ok(AnalyzeMode::Dispersion),
            "sensitivity" => Ok(AnalyzeMode::Sensitivity),
            other => Err(CogoError::InvalidConfig(format!(
                "unknown analyze mode '{other}'; valid: dispersion, sensitivity"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeRunConfig {
    pub ckpt: PathBuf,
    pub dataset: DatasetSource,
    pub mode: AnalyzeMode,
    #[serde(default)]
    pub n_images: usize,
    pub attack: AttackConfig,
    pub output_dir: PathBuf,
}

/// Emit dispersion CSV (depth rows, plain/cogo columns) or per-image
/// sensitivity heatmap PNGs.
pub fn cmd_analyze(cfg: &AnalyzeRunConfig) -> Result<Option<DispersionProfile>> {
    let loaded = load_model(&cfg.ckpt)?;
    let mut data = cfg.dataset.load(Split::Eval)?;
    if cfg.n_images > 0 {
        data = data.take(cfg.n_images);
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_config_snapshot(&cfg.output_dir, cfg)?;
    match cfg.mode {
        AnalyzeMode::Dispersion => {
            let profile = dispersion_profile(&loaded.model, &data, &cfg.attack)?;
            let mut writer = csv::Writer::from_path(cfg.output_dir.join("dispersion.csv"))?;
            writer.write_record(["plain", "cogo"])?;
            for (p, c) in profile.plain.iter().zip(&profile.cogo) {
                writer.write_record([format!("{p:.6}"), format!("{c:.6}")])?;
            }
            writer.flush()?;
            std::fs::write(
                cfg.output_dir.join("dispersion.json"),
                serde_json::to_string_pretty(&profile)?,
            )?;
            Ok(Some(profile))
        }
        AnalyzeMode::Sensitivity => {
            for (i, (image, &label)) in data.images.iter().zip(&data.labels).enumerate() {
                let map = crate::analysis::sensitivity_map(&loaded.model, image, label)?;
                save_gray_png(
                    cfg.output_dir.join(format!("sensitivity_{i:05}.png")),
                    &map,
                )?;
            }
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_rejects_unknown() {
        assert!("gamma".parse::<SweepAxis>().is_ok());
        let err = "bogus".parse::<SweepAxis>().unwrap_err();
        assert!(err.to_string().contains("ce_is_toggle"), "{err}");
    }

    #[test]
    fn toggle_axis_produces_the_four_arms() {
        let base = AttackConfig::default();
        let neither = apply_axis_value(&base, SweepAxis::CeIsToggle, "neither").unwrap();
        assert!(neither.ce.is_disabled() && neither.is.is_none());
        assert_eq!(neither.spectral_samples, 1);
        let ce = apply_axis_value(&base, SweepAxis::CeIsToggle, "ce").unwrap();
        assert!(!ce.ce.is_disabled() && ce.is.is_none());
        let is = apply_axis_value(&base, SweepAxis::CeIsToggle, "is").unwrap();
        assert!(is.ce.is_disabled() && is.is.is_some());
        let both = apply_axis_value(&base, SweepAxis::CeIsToggle, "both").unwrap();
        assert!(!both.ce.is_disabled() && both.is.is_some());
        assert!(apply_axis_value(&base, SweepAxis::CeIsToggle, "zzz").is_err());
    }

    #[test]
    fn gamma_and_threshold_axes_modify_config() {
        let base = AttackConfig::default();
        let g = apply_axis_value(&base, SweepAxis::Gamma, "0.5").unwrap();
        assert_eq!(g.ce.gamma, 0.5);
        let t = apply_axis_value(&base, SweepAxis::Thresholds, "0.5:0.7").unwrap();
        match t.is.unwrap().threshold_mode {
            ThresholdMode::Fixed { tau_mi, tau_corr } => {
                assert_eq!(tau_mi, 0.5);
                assert_eq!(tau_corr, 0.7);
            }
            other => panic!("unexpected mode {other:?}"),
        }
        assert!(apply_axis_value(&base, SweepAxis::Thresholds, "07").is_err());
    }

    #[test]
    fn hook_site_combo_parses_aliases() {
        let sites = parse_site_combo("qkv+dropout").unwrap();
        assert_eq!(sites, vec![SiteKind::Qkv, SiteKind::AttnDropout]);
        assert!(parse_site_combo("qkv+warp").is_err());
    }
}
