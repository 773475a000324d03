//! The experiment report: generative quality per slice axis (Table-1
//! shape) and segmentation Dice for real vs real+synthetic training
//! (Table-2 shape), as JSON and markdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::{read_json, task_name, PipelineStage, RunDir};
use crate::autoencoder::Autoencoder;
use crate::controlnet::ControlNet;
use crate::diffusion::DiffusionModel;
use crate::duo::{generate_pair, DuoModels};
use crate::error::{Error, Result};
use crate::io::Split;
use crate::metrics::{fid_report, FidReport};
use crate::rng::derive_seed;
use crate::segmentation::{SegTask, Variant};
use crate::volume::Volume;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationStats {
    pub synthetic_count: usize,
    pub non_degenerate: usize,
    pub non_degenerate_fraction: f64,
    /// Mean organ-minus-background intensity over non-degenerate pairs.
    pub synthetic_contrast: Option<f64>,
    /// The same statistic on the real training pairs.
    pub real_contrast: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationResult {
    pub variant: Variant,
    pub task: SegTask,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_dice: f64,
    pub test_dice: f64,
    pub train_real: usize,
    pub train_synthetic: usize,
    pub checkpoint: String,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidTable {
    /// Real training volumes vs the Duo generator's volumes.
    pub synthetic: FidReport,
    /// Real training volumes vs held-out real volumes (lower bound).
    pub real_holdout: FidReport,
    /// Real training volumes vs samples of the untrained generator.
    pub untrained: FidReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiceRow {
    /// Variant name, or `"overall"` for the per-task mean.
    pub model: String,
    pub task: SegTask,
    pub real: f64,
    pub mixed: f64,
    /// `(mixed − real) / real · 100`.
    pub improvement_percent: f64,
    /// `(mixed − real) · 100`.
    pub delta_points: f64,
}

impl DiceRow {
    pub fn new(model: String, task: SegTask, real: f64, mixed: f64) -> Self {
        DiceRow {
            model,
            task,
            real,
            mixed,
            improvement_percent: improvement_percent(real, mixed),
            delta_points: (mixed - real) * 100.0,
        }
    }
}

/// Relative change in percent; 0 when `real` is 0.
pub fn improvement_percent(real: f64, mixed: f64) -> f64 {
    if real == 0.0 {
        0.0
    } else {
        (mixed - real) / real * 100.0
    }
}

/// `+0.67%` / `-0.08%`.
pub fn format_improvement(p: f64) -> String {
    let p = if p.abs() < 0.005 { 0.0 } else { p };
    format!("{}{:.2}%", if p >= 0.0 { "+" } else { "-" }, p.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMetadata {
    pub synthetic_ratio: f64,
    /// How synthetic pairs enter training.
    pub mixing: String,
    pub real_train: usize,
    pub synthetic_train: usize,
    pub phantom_seeds: [u64; 2],
    pub generator_lineage: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub format_version: u32,
    pub name: String,
    pub fid: FidTable,
    pub generation: GenerationStats,
    pub segmentation: Vec<DiceRow>,
    pub overall: Vec<DiceRow>,
    pub runs: Vec<SegmentationResult>,
    pub metadata: ReportMetadata,
}

fn check_fid(name: &str, r: &FidReport) -> Result<()> {
    let vals = [r.axial, r.sagittal, r.coronal, r.average];
    if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(format!("{name} FID values must be finite and ≥ 0")));
    }
    if (r.average - (r.axial + r.sagittal + r.coronal) / 3.0).abs() > 1e-9 * (1.0 + r.average) {
        return Err(Error::Validation(format!(
            "{name} FID average is not the mean of the axes"
        )));
    }
    Ok(())
}

fn check_row(r: &DiceRow) -> Result<()> {
    if !(0.0..=1.0).contains(&r.real) || !(0.0..=1.0).contains(&r.mixed) {
        return Err(Error::Validation(format!("{} Dice outside [0, 1]", r.model)));
    }
    let tol = 1e-9;
    if (r.improvement_percent - improvement_percent(r.real, r.mixed)).abs() > tol
        || (r.delta_points - (r.mixed - r.real) * 100.0).abs() > tol
    {
        return Err(Error::Validation(format!(
            "{} improvement inconsistent with Dice values",
            r.model
        )));
    }
    Ok(())
}

impl Report {
    /// Structural and arithmetic consistency of a report.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != REPORT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported report version {}",
                self.format_version
            )));
        }
        check_fid("synthetic", &self.fid.synthetic)?;
        check_fid("real_holdout", &self.fid.real_holdout)?;
        check_fid("untrained", &self.fid.untrained)?;
        if self.segmentation.is_empty() || self.overall.is_empty() {
            return Err(Error::Validation("report has no segmentation rows".into()));
        }
        for r in self.segmentation.iter().chain(&self.overall) {
            check_row(r)?;
        }
        for o in &self.overall {
            let rows: Vec<_> = self.segmentation.iter().filter(|r| r.task == o.task).collect();
            let n = rows.len() as f64;
            let real = rows.iter().map(|r| r.real).sum::<f64>() / n;
            let mixed = rows.iter().map(|r| r.mixed).sum::<f64>() / n;
            if rows.is_empty() || (real - o.real).abs() > 1e-12 || (mixed - o.mixed).abs() > 1e-12 {
                return Err(Error::Validation(format!(
                    "overall {:?} row is not the mean of its task",
                    o.task
                )));
            }
        }
        let g = &self.generation;
        if g.non_degenerate > g.synthetic_count {
            return Err(Error::Validation("more non-degenerate labels than samples".into()));
        }
        Ok(())
    }

    /// Parse and validate report JSON.
    pub fn from_json(text: &str) -> Result<Report> {
        let r: Report = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Experiment report: {}\n", self.name);
        let _ = writeln!(s, "## Generative model performance (slice-wise FID, lower is better)\n");
        let _ = writeln!(s, "| Comparison | FID (Ax.) | FID (Sag.) | FID (Cor.) | FID (Avg.) |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for (name, r) in [
            ("Real vs real holdout", &self.fid.real_holdout),
            ("Real vs Duo-Diffusion", &self.fid.synthetic),
            ("Real vs untrained generator", &self.fid.untrained),
        ] {
            let _ = writeln!(
                s,
                "| {name} | {:.4} | {:.4} | {:.4} | {:.4} |",
                r.axial, r.sagittal, r.coronal, r.average
            );
        }
        let g = &self.generation;
        let _ = writeln!(
            s,
            "\nSynthetic labels: {}/{} non-degenerate ({:.1}%).",
            g.non_degenerate,
            g.synthetic_count,
            100.0 * g.non_degenerate_fraction
        );
        if let (Some(a), Some(b)) = (g.synthetic_contrast, g.real_contrast) {
            let _ = writeln!(s, "Organ − background intensity: synthetic {a:.4}, real {b:.4}.");
        }
        let _ = writeln!(s, "\n## Segmentation performance (test Dice)\n");
        let _ = writeln!(
            s,
            "| CNN Model | Segmentation | Real | Real + Synthesis | Improvement | Δ (points) |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for r in self.segmentation.iter().chain(&self.overall) {
            let model = if r.model == "overall" {
                "Overall Mean DICE".to_string()
            } else {
                Variant::ALL
                    .iter()
                    .find(|v| v.name() == r.model)
                    .map_or(r.model.clone(), |v| v.display_name().to_string())
            };
            let task = match r.task {
                SegTask::LiverOnly => "Liver-Only",
                SegTask::MultiClass => "Multi-Class",
            };
            let _ = writeln!(
                s,
                "| {model} | {task} | {:.4} | {:.4} | {} | {:+.2} |",
                r.real,
                r.mixed,
                format_improvement(r.improvement_percent),
                r.delta_points
            );
        }
        let m = &self.metadata;
        let _ = writeln!(
            s,
            "\nTraining data: {} real + {} synthetic pairs (ratio {}, {} mixing).",
            m.real_train, m.synthetic_train, m.synthetic_ratio, m.mixing
        );
        s
    }

    pub fn save(&self, json_path: &Path, md_path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        fs::write(md_path, self.to_markdown()).map_err(|e| Error::io(md_path, e))
    }
}

/// The generator at initialization, for the FID upper reference.
fn untrained_generator(c: &ExperimentConfig) -> Result<DuoModels> {
    let s = |tag| derive_seed(c.seed, tag);
    let image_diffusion = DiffusionModel::new(c.image_diffusion.model.clone(), 1.0, s(0xB1))?;
    Ok(DuoModels {
        label_vae: Autoencoder::new(c.label_vae.model.clone(), s(0xB2))?,
        label_diffusion: DiffusionModel::new(c.label_diffusion.model.clone(), 1.0, s(0xB3))?,
        image_vae: Autoencoder::new(c.image_vae.model.clone(), s(0xB4))?,
        controlnet: ControlNet::from_base(c.controlnet.model.clone(), &image_diffusion.denoiser, s(0xB5))?,
        image_diffusion,
        lineage: BTreeMap::new(),
    })
}

fn volumes(pairs: Vec<(Volume, crate::volume::LabelMap)>) -> Vec<Volume> {
    pairs.into_iter().map(|(v, _)| v).collect()
}

/// Assemble the report from a completed run directory.
pub fn build_report(c: &ExperimentConfig, dir: &RunDir) -> Result<Report> {
    let real = dir.real()?;
    let syn = dir.synthetic()?;
    let reference = volumes(real.pairs(Split::Train)?);
    let mut holdout = volumes(real.pairs(Split::Val)?);
    holdout.extend(volumes(real.pairs(Split::Test)?));
    let generated = volumes(syn.pairs(Split::Train)?);
    let untrained_models = untrained_generator(c)?;
    let untrained = (0..generated.len().max(2))
        .map(|i| {
            generate_pair(
                &untrained_models,
                c.roi_shape(),
                c.spacing(),
                c.generate.seed.wrapping_add(i as u64),
            )
            .map(|p| p.volume)
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = &c.evaluation.fid;
    let fid = FidTable {
        synthetic: fid_report(&reference, &generated, spec)?,
        real_holdout: fid_report(&reference, &holdout, spec)?,
        untrained: fid_report(&reference, &untrained, spec)?,
    };

    let seg_real: Vec<SegmentationResult> = read_json(&dir.artifact(PipelineStage::SegReal))?;
    let seg_mixed: Vec<SegmentationResult> = read_json(&dir.artifact(PipelineStage::SegMixed))?;
    let mut rows = Vec::new();
    let mut overall = Vec::new();
    for &task in &c.segmentation.tasks {
        let mut task_rows = Vec::new();
        for &variant in &c.segmentation.variants {
            let find = |rs: &[SegmentationResult], what: &str| {
                rs.iter()
                    .find(|r| r.variant == variant && r.task == task)
                    .map(|r| r.test_dice)
                    .ok_or_else(|| {
                        Error::Validation(format!(
                            "missing {what} result for {} / {}",
                            variant.name(),
                            task_name(task)
                        ))
                    })
            };
            task_rows.push(DiceRow::new(
                variant.name().to_string(),
                task,
                find(&seg_real, "seg_real")?,
                find(&seg_mixed, "seg_mixed")?,
            ));
        }
        let n = task_rows.len() as f64;
        let r = task_rows.iter().map(|r| r.real).sum::<f64>() / n;
        let m = task_rows.iter().map(|r| r.mixed).sum::<f64>() / n;
        overall.push(DiceRow::new("overall".into(), task, r, m));
        rows.extend(task_rows);
    }
    let generation: GenerationStats = read_json(&dir.generation_stats_path())?;
    let seeds = real.manifest.records.iter().map(|r| r.seed);
    let metadata = ReportMetadata {
        synthetic_ratio: c.generate.synthetic_ratio,
        mixing: "uniform".into(),
        real_train: real.manifest.split_count(Split::Train),
        synthetic_train: seg_mixed.first().map_or(0, |r| r.train_synthetic),
        phantom_seeds: [seeds.clone().min().unwrap_or(0), seeds.max().unwrap_or(0)],
        generator_lineage: dir.generator_checkpoints()?.lineage(),
    };
    let mut runs = seg_real;
    runs.extend(seg_mixed);
    let report = Report {
        format_version: REPORT_VERSION,
        name: c.name.clone(),
        fid,
        generation,
        segmentation: rows,
        overall,
        runs,
        metadata,
    };
    report.validate()?;
    Ok(report)
}
