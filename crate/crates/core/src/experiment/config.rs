//! Experiment configuration, read from TOML.
//!
//! ```toml
//! name = "smoke"
//! seed = 7
//! roi = [32, 32, 16]            # height, width, depth
//!
//! [phantom]
//! count = 10
//! splits = { train = 6, val = 2, test = 2 }
//!
//! [label_vae.model]             # AutoencoderConfig
//! [label_vae.schedule]          # epochs, batch_size, seed
//! [label_vae.optimizer]         # learning_rate, beta1, beta2, eps, weight_decay
//! # image_vae, label_diffusion, image_diffusion and controlnet follow the
//! # same model/schedule/optimizer layout.
//!
//! [generate]
//! synthetic_ratio = 1.0
//! seed = 1000
//!
//! [segmentation]
//! variants = ["unet", "resunet", "wideresunet", "dynunet", "vnet"]
//! tasks = ["liver_only", "multi_class"]
//! [segmentation.schedule]
//! [segmentation.optimizer]
//!
//! [evaluation.fid]              # input_slice_size, output_dim, seed
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderConfig, Stage};
use crate::controlnet::ControlNetConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::metrics::FeatureExtractorSpec;
use crate::nn::OptimizerSettings;
use crate::phantom::{PhantomParams, SplitCounts};
use crate::segmentation::{
    DiceLossConfig, LossMix, SegTask, SegTrainSettings, SegmenterConfig, Variant, UNET_DEFAULT_WIDTH,
};
use crate::train::TrainSchedule;
use crate::volume::{VolumeShape, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// `(height, width, depth)` of every volume.
    pub roi: [usize; 3],
    pub phantom: PhantomStage,
    pub label_vae: StageTraining<AutoencoderConfig>,
    pub image_vae: StageTraining<AutoencoderConfig>,
    pub label_diffusion: StageTraining<DiffusionConfig>,
    pub image_diffusion: StageTraining<DiffusionConfig>,
    pub controlnet: StageTraining<ControlNetConfig>,
    pub generate: GenerateStage,
    pub segmentation: SegmentationStage,
    #[serde(default)]
    pub evaluation: EvaluationStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomStage {
    pub count: usize,
    pub splits: SplitCounts,
    /// Generator parameters; defaults to `PhantomParams::for_roi(roi)`.
    #[serde(default)]
    pub params: Option<PhantomParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTraining<M> {
    pub model: M,
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateStage {
    /// Synthetic pairs generated per real training pair.
    #[serde(default = "one")]
    pub synthetic_ratio: f64,
    /// First label seed; pair `i` uses `seed + i`.
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationStage {
    pub variants: Vec<Variant>,
    pub tasks: Vec<SegTask>,
    /// U-Net base width; WideResUNet uses twice this.
    #[serde(default = "default_seg_width")]
    pub base_width: usize,
    #[serde(default = "default_seg_levels")]
    pub num_levels: usize,
    #[serde(default)]
    pub loss_mix: LossMix,
    #[serde(default)]
    pub dice: DiceLossConfig,
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_seg_width() -> usize {
    UNET_DEFAULT_WIDTH
}
fn default_seg_levels() -> usize {
    3
}
fn default_patience() -> usize {
    10
}

impl SegmentationStage {
    pub fn model(&self, variant: Variant, task: SegTask) -> SegmenterConfig {
        let mut c = SegmenterConfig::for_variant(variant, task.num_classes());
        c.base_width = if variant == Variant::Wideresunet {
            2 * self.base_width.max(UNET_DEFAULT_WIDTH)
        } else {
            self.base_width
        };
        c.num_levels = self.num_levels;
        c
    }

    pub fn settings(&self, task: SegTask) -> SegTrainSettings {
        SegTrainSettings {
            task,
            loss_mix: self.loss_mix,
            dice: self.dice,
            schedule: self.schedule,
            optimizer: self.optimizer,
            patience: self.patience,
            target_dice: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationStage {
    #[serde(default)]
    pub fid: FeatureExtractorSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn roi_shape(&self) -> VolumeShape {
        VolumeShape::new(self.roi[0], self.roi[1], self.roi[2])
    }

    pub fn phantom_params(&self) -> PhantomParams {
        self.phantom
            .params
            .clone()
            .unwrap_or_else(|| PhantomParams::for_roi(self.roi_shape()))
    }

    /// Spacing written into every generated volume.
    pub fn spacing(&self) -> [f64; 3] {
        self.phantom_params().spacing
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.roi_shape().validate()?;
        let p = self.phantom_params();
        p.validate()?;
        if p.roi_shape.dims() != self.roi_shape().dims() {
            return bad(format!(
                "phantom roi_shape {:?} differs from roi {:?}",
                p.roi_shape, self.roi
            ));
        }
        if self.phantom.splits.total() != self.phantom.count {
            return bad(format!(
                "phantom splits {:?} do not sum to count {}",
                self.phantom.splits, self.phantom.count
            ));
        }
        let s = self.phantom.splits;
        if s.train == 0 || s.val == 0 || s.test == 0 {
            return bad("every phantom split needs at least one volume".into());
        }
        if s.val + s.test < 2 {
            return bad("the FID holdout (val + test) needs at least two volumes".into());
        }
        for (name, ae, stage) in [
            ("label_vae", &self.label_vae, Stage::Label),
            ("image_vae", &self.image_vae, Stage::Image),
        ] {
            ae.model.validate()?;
            if ae.model.stage != stage {
                return bad(format!("{name}.model.stage must be {stage:?}"));
            }
            ae.model
                .check_input(&[1, ae.model.in_channels, self.roi[2], self.roi[0], self.roi[1]])?;
        }
        if self.label_vae.model.in_channels != NUM_CLASSES as usize {
            return bad(format!("label_vae needs {NUM_CLASSES} input channels"));
        }
        for (name, d, ae) in [
            ("label_diffusion", &self.label_diffusion, &self.label_vae),
            ("image_diffusion", &self.image_diffusion, &self.image_vae),
        ] {
            if d.model.denoiser.latent_channels != ae.model.latent_channels {
                return bad(format!("{name} latent_channels must match its autoencoder"));
            }
            d.model.denoiser.validate()?;
            d.model.schedule()?;
            let [c, ld, lh, lw] = ae.model.latent_shape([self.roi[2], self.roi[0], self.roi[1]]);
            d.model.denoiser.check_latent(&[1, c, ld, lh, lw])?;
        }
        if self.controlnet.model.base != self.image_diffusion.model.denoiser {
            return bad("controlnet.model.base must equal image_diffusion.model.denoiser".into());
        }
        if self.controlnet.model.condition_channels != self.label_vae.model.latent_channels {
            return bad("controlnet condition_channels must equal the label latent channels".into());
        }
        if self.label_vae.model.downsample_factor != self.image_vae.model.downsample_factor {
            return bad("label and image latents must share a grid (equal downsample_factor)".into());
        }
        if !(self.generate.synthetic_ratio > 0.0) {
            return bad("generate.synthetic_ratio must be positive".into());
        }
        let seg = &self.segmentation;
        if seg.variants.is_empty() || seg.tasks.is_empty() {
            return bad("segmentation needs at least one variant and one task".into());
        }
        for &v in &seg.variants {
            for &t in &seg.tasks {
                let m = seg.model(v, t);
                m.validate()?;
                if v != Variant::Dynunet {
                    crate::segmentation::check_divisible(self.roi_shape(), m.num_levels)?;
                }
            }
        }
        for sched in [
            &self.label_vae.schedule,
            &self.image_vae.schedule,
            &self.label_diffusion.schedule,
            &self.image_diffusion.schedule,
            &self.controlnet.schedule,
            &seg.schedule,
        ] {
            sched.validate()?;
        }
        for opt in [
            &self.label_vae.optimizer,
            &self.image_vae.optimizer,
            &self.label_diffusion.optimizer,
            &self.image_diffusion.optimizer,
            &self.controlnet.optimizer,
            &seg.optimizer,
        ] {
            opt.validate()?;
        }
        seg.dice.validate()?;
        self.evaluation.fid.validate()?;
        Ok(())
    }

    /// Number of synthetic pairs the generate stage produces.
    pub fn synthetic_count(&self) -> usize {
        (self.generate.synthetic_ratio * self.phantom.splits.train as f64).round() as usize
    }
}
