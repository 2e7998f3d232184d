//! Report files: transfer CSV/JSON pairs, sweep aggregates and config
//! snapshots.
//!
//! Every JSON artifact carries `schema_version`; loaders reject versions they
//! do not understand, so silently misread reports cannot happen. The CSV is
//! the compact tabular view (one row per surrogate-target pair); the JSON
//! mirror carries the full config snapshot and the secondary
//! clean-correct-restricted rate.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::analysis::{TransferReport, REPORT_SCHEMA_VERSION};
use crate::error::{CogoError, Result};

/// One row per surrogate-target pair: surrogate,target,asr,n,seed.
pub fn write_transfer_csv(path: impl AsRef<Path>, reports: &[TransferReport]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["surrogate", "target", "asr", "n", "seed"])?;
    for report in reports {
        for row in &report.rows {
            writer.write_record([
                report.surrogate.as_str(),
                row.target.as_str(),
                &format!("{:.4}", row.asr_percent),
                &row.n_images.to_string(),
                &report.seed.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TransferFile {
    schema_version: u32,
    reports: Vec<TransferReport>,
}

pub fn write_transfer_json(path: impl AsRef<Path>, reports: &[TransferReport]) -> Result<()> {
    let file = TransferFile {
        schema_version: REPORT_SCHEMA_VERSION,
        reports: reports.to_vec(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_transfer_json(path: impl AsRef<Path>) -> Result<Vec<TransferReport>> {
    let file: TransferFile = read_versioned(path)?;
    Ok(file.reports)
}

/// Aggregated ablation results along one axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub axis: String,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    /// Mean transfer ASR over targets, one entry per seed.
    pub per_seed_mean_asr: Vec<f32>,
    pub mean_asr: f32,
    pub std_asr: f32,
    pub per_target: Vec<SweepTargetStat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTargetStat {
    pub target: String,
    pub mean_asr: f32,
    pub std_asr: f32,
}

pub fn mean_std(values: &[f32]) -> (f32, f32) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / n;
    (mean as f32, var.sqrt() as f32)
}

pub fn write_sweep_json(path: impl AsRef<Path>, sweep: &SweepReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(sweep)?)?;
    Ok(())
}

pub fn load_sweep_json(path: impl AsRef<Path>) -> Result<SweepReport> {
    read_versioned(path)
}

/// axis,value,target,mean_asr,std_asr,n_seeds rows, with an `all-targets`
/// aggregate row per point.
pub fn write_sweep_csv(path: impl AsRef<Path>, sweep: &SweepReport) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["axis", "value", "target", "mean_asr", "std_asr", "n_seeds"])?;
    let seeds = sweep.seeds.len().to_string();
    for point in &sweep.points {
        writer.write_record([
            sweep.axis.as_str(),
            point.value.as_str(),
            "all-targets",
            &format!("{:.4}", point.mean_asr),
            &format!("{:.4}", point.std_asr),
            &seeds,
        ])?;
        for stat in &point.per_target {
            writer.write_record([
                sweep.axis.as_str(),
                point.value.as_str(),
                stat.target.as_str(),
                &format!("{:.4}", stat.mean_asr),
                &format!("{:.4}", stat.std_asr),
                &seeds,
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Resolved-config snapshot every command drops next to its outputs, so any
/// run can be reproduced from its output directory alone.
pub fn write_config_snapshot<T: Serialize>(
    dir: impl AsRef<Path>,
    config: &T,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    #[derive(Serialize)]
    struct Snapshot<'a, T> {
        schema_version: u32,
        config: &'a T,
    }
    let snap = Snapshot {
        schema_version: REPORT_SCHEMA_VERSION,
        config,
    };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&snap)?)?;
    Ok(())
}

fn read_versioned<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    #[derive(Deserialize)]
    struct VersionProbe {
        schema_version: u32,
    }
    let probe: VersionProbe = serde_json::from_str(&text)?;
    if probe.schema_version != REPORT_SCHEMA_VERSION {
        return Err(CogoError::SchemaVersion {
            got: probe.schema_version,
            expected: REPORT_SCHEMA_VERSION,
        });
    }
    Ok(serde_json::from_str(&text)?)
}
