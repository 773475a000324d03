//! Resumable experiment pipeline. Each stage writes its artifacts under the
//! run directory and then a marker keyed by a hash of its configuration and
//! of its dependencies' keys; a stage whose marker key still matches is
//! skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::report::{build_report, GenerationStats, SegmentationResult};
use crate::autoencoder::{stage_input, train_vae, Autoencoder, Stage};
use crate::controlnet::{train_controlnet, ConditioningContext};
use crate::diffusion::{train_diffusion, DiffusionModel};
use crate::duo::{load_synthetic_pair, synthesize_dataset, DuoCheckpoints, DuoModels};
use crate::error::{Error, Result};
use crate::io::manifest::FLAG_DEGENERATE_LABEL;
use crate::io::{Checkpoint, ManifestSource, Split};
use crate::metrics::mean_foreground_dice;
use crate::phantom::generate_phantom_dataset;
use crate::segmentation::{predict_mask, train_segmenter, SegTask};
use crate::volume::{LabelMap, Volume, BACKGROUND};

const MARKER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Phantom,
    VaeLabel,
    VaeImage,
    DiffLabel,
    DiffImage,
    Controlnet,
    Generate,
    SegReal,
    SegMixed,
    Report,
}

use PipelineStage as S;

impl PipelineStage {
    /// Every stage in execution order.
    pub const ALL: [PipelineStage; 10] = [
        S::Phantom,
        S::VaeLabel,
        S::VaeImage,
        S::DiffLabel,
        S::DiffImage,
        S::Controlnet,
        S::Generate,
        S::SegReal,
        S::SegMixed,
        S::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            S::Phantom => "phantom",
            S::VaeLabel => "vae_label",
            S::VaeImage => "vae_image",
            S::DiffLabel => "diff_label",
            S::DiffImage => "diff_image",
            S::Controlnet => "controlnet",
            S::Generate => "generate",
            S::SegReal => "seg_real",
            S::SegMixed => "seg_mixed",
            S::Report => "report",
        }
    }

    pub fn dependencies(self) -> &'static [PipelineStage] {
        match self {
            S::Phantom => &[],
            S::VaeLabel | S::VaeImage | S::SegReal => &[S::Phantom],
            S::DiffLabel => &[S::Phantom, S::VaeLabel],
            S::DiffImage => &[S::Phantom, S::VaeImage],
            S::Controlnet => &[S::Phantom, S::VaeLabel, S::VaeImage, S::DiffLabel, S::DiffImage],
            S::Generate => &[S::VaeLabel, S::DiffLabel, S::VaeImage, S::DiffImage, S::Controlnet],
            S::SegMixed => &[S::Phantom, S::Generate],
            S::Report => &[S::Phantom, S::Generate, S::SegReal, S::SegMixed],
        }
    }

    /// The artifact a dependent stage needs, relative to the run directory.
    pub fn primary_artifact(self) -> &'static str {
        match self {
            S::Phantom => "data/real/manifest.json",
            S::VaeLabel => "checkpoints/label_vae.ckpt",
            S::VaeImage => "checkpoints/image_vae.ckpt",
            S::DiffLabel => "checkpoints/label_diffusion.ckpt",
            S::DiffImage => "checkpoints/image_diffusion.ckpt",
            S::Controlnet => "checkpoints/controlnet.ckpt",
            S::Generate => "data/synthetic/manifest.json",
            S::SegReal => "results/seg_real.json",
            S::SegMixed => "results/seg_mixed.json",
            S::Report => "report.json",
        }
    }

    fn config_fragment(self, c: &ExperimentConfig) -> Value {
        match self {
            S::Phantom => json!({
                "seed": c.seed,
                "roi": c.roi,
                "count": c.phantom.count,
                "splits": c.phantom.splits,
                "params": c.phantom_params(),
            }),
            S::VaeLabel => json!(c.label_vae),
            S::VaeImage => json!(c.image_vae),
            S::DiffLabel => json!(c.label_diffusion),
            S::DiffImage => json!(c.image_diffusion),
            S::Controlnet => json!(c.controlnet),
            S::Generate => json!({
                "generate": c.generate,
                "count": c.synthetic_count(),
                "roi": c.roi,
                "spacing": c.spacing(),
            }),
            S::SegReal | S::SegMixed => json!(c.segmentation),
            S::Report => json!({ "name": c.name, "evaluation": c.evaluation }),
        }
    }
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        S::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let names: Vec<_> = S::ALL.iter().map(|s| s.name()).collect();
            Error::Config(format!("unknown stage `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Marker {
    format_version: u32,
    stage: PipelineStage,
    key: String,
    /// Content hashes of the checkpoints the stage wrote.
    #[serde(default)]
    outputs: BTreeMap<String, String>,
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn artifact(&self, stage: PipelineStage) -> PathBuf {
        self.path(stage.primary_artifact())
    }

    fn marker_path(&self, stage: PipelineStage) -> PathBuf {
        self.path(&format!("stages/{}.json", stage.name()))
    }

    fn marker(&self, stage: PipelineStage) -> Result<Option<Marker>> {
        let p = self.marker_path(stage);
        if !p.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn real_dir(&self) -> PathBuf {
        self.path("data/real")
    }

    pub fn synthetic_dir(&self) -> PathBuf {
        self.path("data/synthetic")
    }

    pub fn checkpoint(&self, stage: PipelineStage) -> Result<Checkpoint> {
        Checkpoint::load(&self.artifact(stage))
    }

    pub fn real(&self) -> Result<ManifestSource> {
        ManifestSource::load(&self.artifact(S::Phantom))
    }

    pub fn synthetic(&self) -> Result<ManifestSource> {
        ManifestSource::load(&self.artifact(S::Generate))
    }

    pub fn generator_checkpoints(&self) -> Result<DuoCheckpoints> {
        Ok(DuoCheckpoints {
            label_vae: self.checkpoint(S::VaeLabel)?,
            label_diffusion: self.checkpoint(S::DiffLabel)?,
            image_vae: self.checkpoint(S::VaeImage)?,
            image_diffusion: self.checkpoint(S::DiffImage)?,
            controlnet: self.checkpoint(S::Controlnet)?,
        })
    }

    pub fn generation_stats_path(&self) -> PathBuf {
        self.path("results/generation.json")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineRun {
    pub executed: Vec<PipelineStage>,
    pub skipped: Vec<PipelineStage>,
}

fn hash_key(stage: PipelineStage, fragment: &Value, deps: &[(PipelineStage, String)]) -> String {
    let mut h = Sha256::new();
    h.update(stage.name().as_bytes());
    h.update(fragment.to_string().as_bytes());
    for (d, k) in deps {
        h.update(d.name().as_bytes());
        h.update(k.as_bytes());
    }
    hex::encode(h.finalize())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Run the requested `stages` (in dependency order) under `run_dir`.
///
/// Stages are not pulled in implicitly: a requested stage whose dependency
/// has never completed fails with [`Error::MissingDependency`].
pub fn run_pipeline(config: &ExperimentConfig, stages: &[PipelineStage], run_dir: &Path) -> Result<PipelineRun> {
    config.validate()?;
    let dir = RunDir::new(run_dir);
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let snapshot = run_dir.join("config.toml");
    fs::write(&snapshot, config.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;

    let mut wanted = stages.to_vec();
    wanted.sort();
    wanted.dedup();
    let mut run = PipelineRun::default();
    for stage in wanted {
        let mut deps = Vec::new();
        for &d in stage.dependencies() {
            match dir.marker(d)? {
                Some(m) => deps.push((d, m.key)),
                None => {
                    return Err(Error::MissingDependency {
                        stage: stage.name().into(),
                        missing: format!("{} (produced by stage `{d}`)", d.primary_artifact()),
                    })
                }
            }
        }
        let key = hash_key(stage, &stage.config_fragment(config), &deps);
        if dir.marker(stage)?.is_some_and(|m| m.key == key) && dir.artifact(stage).is_file() {
            log::info!("stage {stage}: up to date, skipped");
            run.skipped.push(stage);
            continue;
        }
        log::info!("stage {stage}: running");
        let outputs = execute(stage, config, &dir).map_err(|e| Error::Stage {
            stage: stage.name().into(),
            source: Box::new(e),
        })?;
        write_json(
            &dir.marker_path(stage),
            &Marker {
                format_version: MARKER_VERSION,
                stage,
                key,
                outputs,
            },
        )?;
        run.executed.push(stage);
    }
    Ok(run)
}

fn save_checkpoint(dir: &RunDir, stage: PipelineStage, c: &Checkpoint) -> Result<BTreeMap<String, String>> {
    c.save(&dir.artifact(stage))?;
    Ok(BTreeMap::from([(
        stage.primary_artifact().to_string(),
        c.content_hash(),
    )]))
}

fn stage_inputs(pairs: &[(Volume, LabelMap)], stage: Stage) -> Result<Vec<crate::tensor::Tensor>> {
    pairs.iter().map(|(v, l)| stage_input(stage, v, l)).collect()
}

fn execute(stage: PipelineStage, c: &ExperimentConfig, dir: &RunDir) -> Result<BTreeMap<String, String>> {
    match stage {
        S::Phantom => {
            let real = dir.real_dir();
            let m = generate_phantom_dataset(c.phantom.count, c.seed, &c.phantom_params(), c.phantom.splits, &real)?;
            m.validate(&real)?;
            m.save(&dir.artifact(S::Phantom))?;
            Ok(BTreeMap::new())
        }
        S::VaeLabel | S::VaeImage => {
            let (st, kind) = if stage == S::VaeLabel {
                (&c.label_vae, Stage::Label)
            } else {
                (&c.image_vae, Stage::Image)
            };
            let pairs = dir.real()?.pairs(Split::Train)?;
            let out = train_vae(&st.model, &stage_inputs(&pairs, kind)?, &st.schedule, &st.optimizer)?;
            save_checkpoint(dir, stage, &out.model.to_checkpoint(out.history)?)
        }
        S::DiffLabel | S::DiffImage => {
            let (st, vae_stage, kind) = if stage == S::DiffLabel {
                (&c.label_diffusion, S::VaeLabel, Stage::Label)
            } else {
                (&c.image_diffusion, S::VaeImage, Stage::Image)
            };
            let vae_ckpt = dir.checkpoint(vae_stage)?;
            let vae = Autoencoder::from_checkpoint(&vae_ckpt)?;
            let pairs = dir.real()?.pairs(Split::Train)?;
            let out = train_diffusion(
                &st.model,
                &vae,
                &stage_inputs(&pairs, kind)?,
                &st.schedule,
                &st.optimizer,
            )?;
            let mut ck = out.model.to_checkpoint(out.history)?;
            let key = if kind == Stage::Label { "label_vae" } else { "image_vae" };
            ck.references.insert(key.into(), vae_ckpt.content_hash());
            save_checkpoint(dir, stage, &ck)
        }
        S::Controlnet => {
            let lv = dir.checkpoint(S::VaeLabel)?;
            let iv = dir.checkpoint(S::VaeImage)?;
            let ld = dir.checkpoint(S::DiffLabel)?;
            let id = dir.checkpoint(S::DiffImage)?;
            let (label_vae, image_vae) = (Autoencoder::from_checkpoint(&lv)?, Autoencoder::from_checkpoint(&iv)?);
            let label_diffusion = DiffusionModel::from_checkpoint(&ld)?;
            let base = DiffusionModel::from_checkpoint(&id)?;
            let ctx = ConditioningContext {
                image_vae: &image_vae,
                label_vae: &label_vae,
                base: &base,
                label_scale: label_diffusion.scale_factor,
            };
            let pairs = dir.real()?.pairs(Split::Train)?;
            let out = train_controlnet(
                &c.controlnet.model,
                &ctx,
                &pairs,
                &c.controlnet.schedule,
                &c.controlnet.optimizer,
            )?;
            let refs = BTreeMap::from([
                ("label_vae".to_string(), lv.content_hash()),
                ("label_diffusion".to_string(), ld.content_hash()),
                ("image_vae".to_string(), iv.content_hash()),
                ("image_diffusion".to_string(), id.content_hash()),
            ]);
            save_checkpoint(dir, stage, &out.model.to_checkpoint(out.history, refs)?)
        }
        S::Generate => {
            let ckpts = dir.generator_checkpoints()?;
            let models = DuoModels::load(&ckpts)?;
            let syn = dir.synthetic_dir();
            let m = synthesize_dataset(
                c.synthetic_count(),
                c.generate.seed,
                &models,
                c.roi_shape(),
                c.spacing(),
                &syn,
            )?;
            m.validate(&syn)?;
            let stats = generation_stats(
                &ManifestSource {
                    base: syn.clone(),
                    manifest: m.clone(),
                },
                &dir.real()?,
            )?;
            m.save(&dir.artifact(S::Generate))?;
            write_json(&dir.generation_stats_path(), &stats)?;
            Ok(models.lineage)
        }
        S::SegReal | S::SegMixed => {
            let real = dir.real()?;
            let mut train = real.pairs(Split::Train)?;
            let val = real.pairs(Split::Val)?;
            let test = real.pairs(Split::Test)?;
            let mut synthetic_used = 0;
            if stage == S::SegMixed {
                let extra = usable_synthetic(dir)?;
                synthetic_used = extra.len();
                train.extend(extra);
            }
            let sub = if stage == S::SegReal { "real" } else { "mixed" };
            let mut rows = Vec::new();
            let mut outputs = BTreeMap::new();
            let seg = &c.segmentation;
            for &variant in &seg.variants {
                for &task in &seg.tasks {
                    let out = train_segmenter(&seg.model(variant, task), &train, &val, &seg.settings(task))?;
                    let ck = out.to_checkpoint()?;
                    let rel = format!("segmentation/{sub}/{}_{}.ckpt", variant.name(), task_name(task));
                    ck.save(&dir.path(&rel))?;
                    outputs.insert(rel.clone(), ck.content_hash());
                    rows.push(SegmentationResult {
                        variant,
                        task,
                        best_epoch: out.best_epoch,
                        epochs_run: out.epochs_run,
                        val_dice: out.best_val_dice,
                        test_dice: test_dice(&out.model, &test, task)?,
                        train_real: real.manifest.split_count(Split::Train),
                        train_synthetic: synthetic_used,
                        checkpoint: rel,
                        checkpoint_hash: ck.content_hash(),
                    });
                }
            }
            write_json(&dir.artifact(stage), &rows)?;
            Ok(outputs)
        }
        S::Report => {
            let report = build_report(c, dir)?;
            report.save(&dir.artifact(S::Report), &dir.path("report.md"))?;
            Ok(BTreeMap::new())
        }
    }
}

pub(crate) fn task_name(task: SegTask) -> &'static str {
    match task {
        SegTask::LiverOnly => "liver_only",
        SegTask::MultiClass => "multi_class",
    }
}

/// Non-degenerate synthetic training pairs, lineage-checked against the
/// run's generator checkpoints.
pub fn usable_synthetic(dir: &RunDir) -> Result<Vec<(Volume, LabelMap)>> {
    let lineage = dir.generator_checkpoints()?.lineage();
    let syn = dir.synthetic()?;
    syn.manifest
        .records
        .iter()
        .filter(|r| !r.has_flag(FLAG_DEGENERATE_LABEL))
        .map(|r| load_synthetic_pair(&syn.base, r, &lineage))
        .collect()
}

fn test_dice(model: &crate::segmentation::Segmenter, test: &[(Volume, LabelMap)], task: SegTask) -> Result<f64> {
    let mut total = 0.0;
    for (v, g) in test {
        total += mean_foreground_dice(&predict_mask(model, v)?, &task.target(g)?, task.num_classes() as u8)?;
    }
    Ok(total / test.len() as f64)
}

/// Mean intensity inside the organ mask minus mean outside it, or `None`
/// when either region is empty.
pub fn intensity_contrast(v: &Volume, l: &LabelMap) -> Option<f64> {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&x, &c) in v.data().iter().zip(l.data()) {
        if c == BACKGROUND {
            so += x as f64;
            no += 1;
        } else {
            si += x as f64;
            ni += 1;
        }
    }
    (ni > 0 && no > 0).then(|| si / ni as f64 - so / no as f64)
}

fn mean_contrast(pairs: &[(Volume, LabelMap)]) -> Option<f64> {
    let c: Vec<f64> = pairs.iter().filter_map(|(v, l)| intensity_contrast(v, l)).collect();
    (!c.is_empty()).then(|| c.iter().sum::<f64>() / c.len() as f64)
}

fn generation_stats(syn: &ManifestSource, real: &ManifestSource) -> Result<GenerationStats> {
    let total = syn.manifest.len();
    let non_degenerate = syn
        .manifest
        .records
        .iter()
        .filter(|r| !r.has_flag(FLAG_DEGENERATE_LABEL))
        .count();
    let pairs = syn
        .manifest
        .records
        .iter()
        .filter(|r| !r.has_flag(FLAG_DEGENERATE_LABEL))
        .map(|r| crate::io::manifest::load_pair(&syn.base, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(GenerationStats {
        synthetic_count: total,
        non_degenerate,
        non_degenerate_fraction: if total == 0 {
            0.0
        } else {
            non_degenerate as f64 / total as f64
        },
        synthetic_contrast: mean_contrast(&pairs),
        real_contrast: mean_contrast(&real.pairs(Split::Train)?),
    })
}
