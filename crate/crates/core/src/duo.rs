//! Two-stage generation: a label from the label LDM, then a paired volume
//! from the ControlNet-conditioned image LDM.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autoencoder::Autoencoder;
use crate::controlnet::{conditional_sample_with, encode_condition, ControlNet};
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::io::manifest::{load_pair, FLAG_DEGENERATE_LABEL};
use crate::io::{write_label, write_volume, Checkpoint, DatasetManifest, ManifestRecord, Provenance, Split};
use crate::volume::{argmax_decode, minmax_normalize, LabelMap, Volume, VolumeShape, LIVER};

/// Offset between a pair's label seed and its volume seed.
pub const VOLUME_SEED_OFFSET: u64 = 1 << 31;

/// Lineage keys, in the order models are used.
pub const LINEAGE_KEYS: [&str; 5] = [
    "label_vae",
    "label_diffusion",
    "image_vae",
    "image_diffusion",
    "controlnet",
];

/// The five frozen checkpoints used for generation.
#[derive(Debug, Clone)]
pub struct DuoCheckpoints {
    pub label_vae: Checkpoint,
    pub label_diffusion: Checkpoint,
    pub image_vae: Checkpoint,
    pub image_diffusion: Checkpoint,
    pub controlnet: Checkpoint,
}

impl DuoCheckpoints {
    pub fn lineage(&self) -> BTreeMap<String, String> {
        [
            &self.label_vae,
            &self.label_diffusion,
            &self.image_vae,
            &self.image_diffusion,
            &self.controlnet,
        ]
        .iter()
        .zip(LINEAGE_KEYS)
        .map(|(c, k)| (k.to_string(), c.content_hash()))
        .collect()
    }
}

/// Loaded generator models plus their lineage hashes.
#[derive(Debug, Clone)]
pub struct DuoModels {
    pub label_vae: Autoencoder,
    pub label_diffusion: DiffusionModel,
    pub image_vae: Autoencoder,
    pub image_diffusion: DiffusionModel,
    pub controlnet: ControlNet,
    pub lineage: BTreeMap<String, String>,
}

impl DuoModels {
    /// Rebuild every model; the ControlNet's recorded references must match
    /// the supplied checkpoints.
    pub fn load(c: &DuoCheckpoints) -> Result<Self> {
        let lineage = c.lineage();
        for (key, hash) in &c.controlnet.references {
            match lineage.get(key) {
                Some(h) if h == hash => {}
                Some(h) => {
                    return Err(Error::Checkpoint(format!(
                        "controlnet was trained against {key} {hash}, but {h} was supplied"
                    )))
                }
                None => return Err(Error::Checkpoint(format!("unknown controlnet reference `{key}`"))),
            }
        }
        Ok(DuoModels {
            label_vae: Autoencoder::from_checkpoint(&c.label_vae)?,
            label_diffusion: DiffusionModel::from_checkpoint(&c.label_diffusion)?,
            image_vae: Autoencoder::from_checkpoint(&c.image_vae)?,
            image_diffusion: DiffusionModel::from_checkpoint(&c.image_diffusion)?,
            controlnet: ControlNet::from_checkpoint(&c.controlnet)?,
            lineage,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub volume: Volume,
    pub label: LabelMap,
    pub label_seed: u64,
    pub volume_seed: u64,
    pub lineage: BTreeMap<String, String>,
}

/// `sample_latent → label decoder → argmax` for an ROI.
pub fn generate_synthetic_label(models: &DuoModels, roi: VolumeShape, seed: u64) -> Result<LabelMap> {
    let cfg = models.label_vae.config();
    let shape = VolumeShape::new(roi.height, roi.width, roi.depth).with_channels(cfg.in_channels);
    cfg.check_input(&[1, shape.channels, roi.depth, roi.height, roi.width])?;
    let [c, d, h, w] = cfg.latent_shape(roi.dims());
    let z = models.label_diffusion.sample(&[1, c, d, h, w], seed)?;
    let soft = models.label_vae.decode(&z)?;
    argmax_decode(&soft)
}

/// Sample a volume conditioned on `label` and min–max normalize it.
pub fn generate_paired_volume(label: &LabelMap, models: &DuoModels, spacing: [f64; 3], seed: u64) -> Result<Volume> {
    let cond = encode_condition(label, &models.label_vae, models.label_diffusion.scale_factor)?;
    let base = &models.image_diffusion;
    let z = conditional_sample_with(
        &base.denoiser,
        &models.controlnet,
        &cond,
        &base.schedule,
        base.config.variance,
        seed,
    )?
    .scale(1.0 / base.scale_factor);
    let x = models.image_vae.decode(&z)?;
    let v = Volume::from_tensor_clamped(&x, spacing)?;
    minmax_normalize(&v)
}

pub fn generate_pair(
    models: &DuoModels,
    roi: VolumeShape,
    spacing: [f64; 3],
    label_seed: u64,
) -> Result<SyntheticPair> {
    let volume_seed = label_seed.wrapping_add(VOLUME_SEED_OFFSET);
    let label = generate_synthetic_label(models, roi, label_seed)?;
    let volume = generate_paired_volume(&label, models, spacing, volume_seed)?;
    label.same_grid(&volume)?;
    Ok(SyntheticPair {
        volume,
        label,
        label_seed,
        volume_seed,
        lineage: models.lineage.clone(),
    })
}

pub fn is_degenerate(label: &LabelMap) -> bool {
    label.count(LIVER) == 0
}

/// Generate `count` pairs with label seeds `base_seed + i` into `dir`.
/// Records carry provenance `synthetic`, split `train`, the lineage hashes
/// and, for labels without liver voxels, the degenerate-label flag.
pub fn synthesize_dataset(
    count: usize,
    base_seed: u64,
    models: &DuoModels,
    roi: VolumeShape,
    spacing: [f64; 3],
    dir: &Path,
) -> Result<DatasetManifest> {
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let pair = generate_pair(models, roi, spacing, base_seed.wrapping_add(i as u64))?;
        let id = format!("synthetic_{i:05}");
        let volume_path = format!("{id}.vol.fvol");
        let label_path = format!("{id}.label.fvol");
        write_volume(&dir.join(&volume_path), &pair.volume)?;
        write_label(&dir.join(&label_path), &pair.label, spacing)?;
        records.push(ManifestRecord {
            id,
            volume_path,
            label_path,
            provenance: Provenance::Synthetic,
            split: Split::Train,
            seed: pair.label_seed,
            flags: if is_degenerate(&pair.label) {
                vec![FLAG_DEGENERATE_LABEL.to_string()]
            } else {
                vec![]
            },
            lineage: pair.lineage,
        });
    }
    Ok(DatasetManifest::new(records))
}

/// Load a synthetic pair, rejecting it if its lineage differs from `expected`.
pub fn load_synthetic_pair(
    base: &Path,
    record: &ManifestRecord,
    expected: &BTreeMap<String, String>,
) -> Result<(Volume, LabelMap)> {
    if record.provenance == Provenance::Synthetic && &record.lineage != expected {
        return Err(Error::Checkpoint(format!(
            "record {} was generated by different checkpoints than supplied",
            record.id
        )));
    }
    load_pair(base, record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{AutoencoderConfig, Stage};
    use crate::controlnet::ControlNetConfig;
    use crate::diffusion::{DenoiserConfig, DiffusionConfig, ScheduleKind, VarianceKind};
    use crate::phantom::{generate_phantom_dataset, PhantomParams, SplitCounts};
    use crate::train::History;

    const ROI: VolumeShape = VolumeShape {
        height: 16,
        width: 16,
        depth: 8,
        channels: 1,
    };

    fn checkpoints() -> DuoCheckpoints {
        let vae = |stage| {
            let cfg = AutoencoderConfig {
                base_width: 4,
                latent_channels: 2,
                ..AutoencoderConfig::for_stage(stage)
            };
            Autoencoder::new(cfg, 1).unwrap().to_checkpoint(History::new()).unwrap()
        };
        let dcfg = DiffusionConfig {
            denoiser: DenoiserConfig {
                latent_channels: 2,
                base_width: 4,
                num_levels: 2,
                time_embedding_dim: 8,
                attention_levels: vec![],
            },
            timesteps: 4,
            beta_start: 1e-3,
            beta_end: 0.2,
            schedule_kind: ScheduleKind::Linear,
            variance: VarianceKind::Posterior,
        };
        let label_diffusion = DiffusionModel::new(dcfg.clone(), 1.0, 2).unwrap();
        let image_diffusion = DiffusionModel::new(dcfg.clone(), 1.5, 3).unwrap();
        let ccfg = ControlNetConfig {
            base: dcfg.denoiser.clone(),
            condition_channels: 2,
            zero_init: false,
        };
        let control = ControlNet::from_base(ccfg, &image_diffusion.denoiser, 4).unwrap();
        let mut c = DuoCheckpoints {
            label_vae: vae(Stage::Label),
            label_diffusion: label_diffusion.to_checkpoint(History::new()).unwrap(),
            image_vae: vae(Stage::Image),
            image_diffusion: image_diffusion.to_checkpoint(History::new()).unwrap(),
            controlnet: control.to_checkpoint(History::new(), BTreeMap::new()).unwrap(),
        };
        let mut refs = c.lineage();
        refs.remove("controlnet");
        c.controlnet.references = refs;
        c
    }

    #[test]
    fn label_generation_is_deterministic_and_valid() {
        let m = DuoModels::load(&checkpoints()).unwrap();
        let a = generate_synthetic_label(&m, ROI, 3).unwrap();
        assert_eq!(a, generate_synthetic_label(&m, ROI, 3).unwrap());
        assert_eq!(a.shape(), ROI);
        assert!(a.data().iter().all(|&v| v < 5));
        let v = generate_paired_volume(&a, &m, [1.0, 1.0, 2.5], 9).unwrap();
        assert_eq!(v.shape(), ROI);
        assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn dataset_lineage_and_reruns() {
        let c = checkpoints();
        let m = DuoModels::load(&c).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = synthesize_dataset(5, 100, &m, ROI, [1.0, 1.0, 2.5], a.path()).unwrap();
        let mb = synthesize_dataset(5, 100, &m, ROI, [1.0, 1.0, 2.5], b.path()).unwrap();
        assert_eq!(ma.len(), 5);
        assert_eq!(ma.to_json().unwrap(), mb.to_json().unwrap());
        for r in &ma.records {
            assert_eq!(r.lineage, c.lineage());
            assert_eq!(r.provenance, Provenance::Synthetic);
            for f in [&r.volume_path, &r.label_path] {
                assert_eq!(
                    std::fs::read(a.path().join(f)).unwrap(),
                    std::fs::read(b.path().join(f)).unwrap()
                );
            }
            let (_, l) = load_synthetic_pair(a.path(), r, &m.lineage).unwrap();
            assert_eq!(r.has_flag(FLAG_DEGENERATE_LABEL), is_degenerate(&l));
        }
        assert_eq!(ma.records[2].seed, 102);

        let mut wrong = m.lineage.clone();
        wrong.insert("image_vae".into(), "00".into());
        assert!(load_synthetic_pair(a.path(), &ma.records[0], &wrong).is_err());

        let real = generate_phantom_dataset(
            8,
            0,
            &PhantomParams::for_roi(ROI),
            SplitCounts {
                train: 6,
                val: 1,
                test: 1,
            },
            b.path(),
        )
        .unwrap();
        let merged = real.merged(&ma).unwrap();
        assert_eq!(merged.len(), 13);
        assert_eq!(merged.provenance_count(Provenance::Phantom), 8);
        assert_eq!(merged.provenance_count(Provenance::Synthetic), 5);
    }

    #[test]
    fn mismatched_checkpoint_rejected() {
        let mut c = checkpoints();
        let other = Autoencoder::new(
            AutoencoderConfig {
                base_width: 4,
                latent_channels: 2,
                ..AutoencoderConfig::for_stage(Stage::Image)
            },
            99,
        )
        .unwrap();
        c.image_vae = other.to_checkpoint(History::new()).unwrap();
        let err = DuoModels::load(&c).unwrap_err().to_string();
        assert!(err.contains("image_vae"), "{err}");
    }
}
