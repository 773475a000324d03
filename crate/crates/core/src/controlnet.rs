//! Label-conditioned ControlNet branch for the image-stage denoiser.
//!
//! The branch is a trainable copy of the base denoiser's encoder half. The
//! condition latent enters through a zero-initialized 1×1×1 projection added
//! after `conv_in`; per-level zero-initialized projections add the branch's
//! features to the frozen base's skip connections and middle output. At
//! initialization every projection outputs exactly zero, so conditional and
//! unconditional predictions agree bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::diffusion::denoiser::EncoderHalf;
use crate::diffusion::{
    q_sample_batch, sample_latent_with, training_draw, ControlResiduals, Denoiser, DenoiserConfig, DiffusionModel,
    NoisePredictor, NoiseSchedule, VarianceKind,
};
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::nn::{AdamW, Bound, Conv3d, OptimizerSettings, ParamStore, Tape, Var};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use crate::train::{at_step, optimize_step, push, History, TrainSchedule};
use crate::volume::{one_hot_encode, LabelMap, Volume};

pub const CHECKPOINT_KIND: &str = "controlnet";
const PREFIX: &str = "ctrl.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlNetConfig {
    pub base: DenoiserConfig,
    pub condition_channels: usize,
    #[serde(default = "yes")]
    pub zero_init: bool,
}

fn yes() -> bool {
    true
}

/// Scaled label-latent posterior mean, `[N, C, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTensor {
    pub data: Tensor,
}

/// `one_hot → label encoder → posterior mean → × scale`. Deterministic.
pub fn encode_condition(label: &LabelMap, label_vae: &Autoencoder, scale: f64) -> Result<ConditionTensor> {
    let x = one_hot_encode(label)?.batched();
    let g = label_vae.encode(&x)?;
    let data = g.mean.scale(scale);
    if !data.all_finite() {
        return Err(Error::NonFinite("condition latent".into()));
    }
    Ok(ConditionTensor { data })
}

#[derive(Debug, Clone)]
pub struct ControlNetNet {
    pub config: ControlNetConfig,
    encoder: EncoderHalf,
    cond_in: Conv3d,
    skip_proj: Vec<Conv3d>,
    mid_proj: Conv3d,
}

#[derive(Debug, Clone)]
pub struct ControlNet {
    pub store: ParamStore,
    pub net: ControlNetNet,
}

impl ControlNet {
    /// Build the branch and copy the base encoder-half weights into it.
    pub fn from_base(config: ControlNetConfig, base: &Denoiser, seed: u64) -> Result<Self> {
        if config.base != base.net.config {
            return Err(Error::Validation(
                "controlnet base config differs from the supplied denoiser".into(),
            ));
        }
        let mut c = Self::untrained(config, seed)?;
        let lookup: BTreeMap<&str, &Tensor> = base.store.iter().collect();
        for id in c.store.ids().collect::<Vec<_>>() {
            let name = c.store.name(id).to_string();
            if let Some(base_name) = name.strip_prefix(PREFIX) {
                let src = lookup
                    .get(base_name)
                    .ok_or_else(|| Error::Validation(format!("base denoiser lacks `{base_name}`")))?;
                *c.store.get_mut(id) = (*src).clone();
            }
        }
        Ok(c)
    }

    /// Structure with fresh (non-copied) encoder weights; used when loading.
    fn untrained(config: ControlNetConfig, seed: u64) -> Result<Self> {
        config.base.validate()?;
        if config.condition_channels == 0 {
            return Err(Error::Validation("condition_channels must be positive".into()));
        }
        let mut rng = rng_from_seed(seed);
        let r = &mut rng;
        let mut s = ParamStore::new();
        let encoder = EncoderHalf::new(&mut s, r, PREFIX, &config.base);
        let w0 = config.base.width(0);
        let proj = |s: &mut ParamStore, r: &mut _, name: &str, cin: usize, cout: usize| {
            if config.zero_init {
                Conv3d::zero(s, name, cin, cout)
            } else {
                Conv3d::pointwise(s, r, name, cin, cout)
            }
        };
        let cond_in = proj(&mut s, r, "cond_in", config.condition_channels, w0);
        let skip_proj = (0..config.base.num_levels)
            .map(|l| {
                proj(
                    &mut s,
                    r,
                    &format!("zero{l}"),
                    config.base.width(l),
                    config.base.width(l),
                )
            })
            .collect();
        let top = config.base.width(config.base.num_levels - 1);
        let mid_proj = proj(&mut s, r, "zero_mid", top, top);
        Ok(ControlNet {
            store: s,
            net: ControlNetNet {
                config,
                encoder,
                cond_in,
                skip_proj,
                mid_proj,
            },
        })
    }

    pub fn to_checkpoint(&self, history: History, references: BTreeMap<String, String>) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(&self.net.config)?, &self.store);
        c.history = history;
        c.references = references;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let mut m = Self::untrained(c.config_as()?, 0)?;
        c.load_into(&mut m.store)?;
        Ok(m)
    }
}

impl ControlNetNet {
    /// Residuals for the base denoiser given `z_t`, timesteps and condition.
    pub fn residuals_on(&self, t: &mut Tape, p: &Bound, z: Var, ts: &[usize], cond: Var) -> Result<ControlResiduals> {
        let zs = t.value(z).shape().to_vec();
        let cs = t.value(cond).shape().to_vec();
        if cs.len() != 5 || cs[0] != zs[0] || cs[2..] != zs[2..] || cs[1] != self.config.condition_channels {
            return Err(Error::Shape(format!(
                "condition {cs:?} incompatible with latent {zs:?} ({} condition channels expected)",
                self.config.condition_channels
            )));
        }
        let inject = self.cond_in.forward(t, p, cond)?;
        let feats = self
            .encoder
            .forward(t, p, z, ts, self.config.base.time_embedding_dim, Some(inject))?;
        let skips = feats
            .skips
            .iter()
            .zip(&self.skip_proj)
            .map(|(s, proj)| proj.forward(t, p, *s))
            .collect::<Result<Vec<_>>>()?;
        let mid = self.mid_proj.forward(t, p, feats.mid)?;
        Ok(ControlResiduals { skips, mid })
    }
}

/// Repeat a batch-1 condition to batch `n`.
fn broadcast_condition(cond: &ConditionTensor, n: usize) -> Result<Tensor> {
    match cond.data.batch() {
        b if b == n => Ok(cond.data.clone()),
        1 => Tensor::stack(&vec![cond.data.clone(); n]),
        b => Err(Error::Shape(format!("condition batch {b} vs latent batch {n}"))),
    }
}

/// ε_θ(z_t, t, c): frozen base plus control residuals.
pub fn conditioned_predict_noise(
    base: &Denoiser,
    control: &ControlNet,
    z_t: &Tensor,
    ts: &[usize],
    cond: &ConditionTensor,
) -> Result<Tensor> {
    let mut t = Tape::new();
    let pb = base.store.bind(&mut t, false);
    let pc = control.store.bind(&mut t, false);
    let z = t.constant(z_t.clone());
    let c = t.constant(broadcast_condition(cond, z_t.batch())?);
    let res = control.net.residuals_on(&mut t, &pc, z, ts, c)?;
    let out = base.net.forward_on(&mut t, &pb, z, ts, Some(&res))?;
    Ok(t.value(out).clone())
}

/// A base denoiser steered by a ControlNet under a fixed condition.
pub struct ConditionedDenoiser<'a> {
    pub base: &'a Denoiser,
    pub control: &'a ControlNet,
    pub cond: &'a ConditionTensor,
}

impl NoisePredictor for ConditionedDenoiser<'_> {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        conditioned_predict_noise(self.base, self.control, z_t, ts, self.cond)
    }
}

pub fn conditional_sample_with(
    base: &Denoiser,
    control: &ControlNet,
    cond: &ConditionTensor,
    schedule: &NoiseSchedule,
    variance: VarianceKind,
    seed: u64,
) -> Result<Tensor> {
    let mut shape = cond.data.shape().to_vec();
    shape[1] = base.net.config.latent_channels;
    let model = ConditionedDenoiser { base, control, cond };
    sample_latent_with(&model, schedule, &shape, variance, seed)
}

pub fn conditional_sample(
    base: &Denoiser,
    control: &ControlNet,
    cond: &ConditionTensor,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    conditional_sample_with(base, control, cond, schedule, VarianceKind::Posterior, seed)
}

/// Frozen models the ControlNet is trained and sampled against.
pub struct ConditioningContext<'a> {
    pub image_vae: &'a Autoencoder,
    pub label_vae: &'a Autoencoder,
    pub base: &'a DiffusionModel,
    /// Scale applied to label latents (the label diffusion's factor).
    pub label_scale: f64,
}

impl ConditioningContext<'_> {
    /// Scaled image latent and condition for one pair.
    pub fn prepare(&self, x: &Volume, label: &LabelMap) -> Result<(Tensor, ConditionTensor)> {
        label.same_grid(x)?;
        let z0 = self
            .image_vae
            .encode(&x.to_tensor())?
            .mean
            .scale(self.base.scale_factor);
        let cond = encode_condition(label, self.label_vae, self.label_scale)?;
        Ok((z0, cond))
    }
}

/// Conditioned noise-prediction loss for one pair at explicit `(t, noise)`.
pub fn controlnet_loss(
    ctx: &ConditioningContext,
    control: &ControlNet,
    x: &Volume,
    label: &LabelMap,
    t: usize,
    noise: &Tensor,
) -> Result<f64> {
    let (z0, cond) = ctx.prepare(x, label)?;
    let model = ConditionedDenoiser {
        base: &ctx.base.denoiser,
        control,
        cond: &cond,
    };
    crate::diffusion::diffusion_loss(&model, &z0, &[t], noise, &ctx.base.schedule)
}

/// Tape version of the conditioned MSE; only `control` receives gradients.
pub fn controlnet_loss_on(
    t: &mut Tape,
    base: &Denoiser,
    control_net: &ControlNetNet,
    pc: &Bound,
    z_t: &Tensor,
    ts: &[usize],
    cond: &Tensor,
    noise: &Tensor,
) -> Result<Var> {
    let pb = base.store.bind(t, false);
    let z = t.constant(z_t.clone());
    let c = t.constant(cond.clone());
    let res = control_net.residuals_on(t, pc, z, ts, c)?;
    let pred = base.net.forward_on(t, &pb, z, ts, Some(&res))?;
    let target = t.constant(noise.clone());
    t.mse(pred, target)
}

#[derive(Debug, Clone)]
pub struct ControlNetTraining {
    pub model: ControlNet,
    pub history: History,
}

/// Train a ControlNet on paired data with every other model frozen.
pub fn train_controlnet(
    config: &ControlNetConfig,
    ctx: &ConditioningContext,
    pairs: &[(Volume, LabelMap)],
    schedule: &TrainSchedule,
    optimizer: &OptimizerSettings,
) -> Result<ControlNetTraining> {
    if pairs.is_empty() {
        return Err(Error::Validation("train_controlnet needs at least one pair".into()));
    }
    schedule.validate()?;
    optimizer.validate()?;
    let base = &ctx.base.denoiser;
    let base_digest = base.store.digest();
    let prepared = pairs
        .iter()
        .map(|(x, l)| ctx.prepare(x, l))
        .collect::<Result<Vec<_>>>()?;
    let mut control = ControlNet::from_base(config.clone(), base, derive_seed(schedule.seed, 0xC7))?;
    let mut opt = AdamW::new(*optimizer, &control.store);
    let mut history = History::new();
    let mut step = 0u64;
    for epoch in 0..schedule.epochs {
        let (mut total, mut nb) = (0.0, 0.0);
        for (bi, batch) in schedule.batches(prepared.len(), epoch).into_iter().enumerate() {
            let z0 = Tensor::stack(&batch.iter().map(|&i| prepared[i].0.clone()).collect::<Vec<_>>())?;
            let cond = Tensor::stack(&batch.iter().map(|&i| prepared[i].1.data.clone()).collect::<Vec<_>>())?;
            let (ts, noise) = training_draw(schedule, step, z0.shape(), ctx.base.schedule.timesteps())?;
            let z_t = q_sample_batch(&z0, &ts, &noise, &ctx.base.schedule)?;
            let net = &control.net;
            let (loss, ()) = optimize_step(&mut control.store, &mut opt, |t, pc| {
                Ok((controlnet_loss_on(t, base, net, pc, &z_t, &ts, &cond, &noise)?, ()))
            })
            .map_err(|e| at_step(e, "controlnet", epoch, bi))?;
            total += loss;
            nb += 1.0;
            step += 1;
        }
        push(&mut history, "loss", total / nb);
    }
    if base.store.digest() != base_digest {
        return Err(Error::Validation(
            "base denoiser weights changed during ControlNet training".into(),
        ));
    }
    Ok(ControlNetTraining {
        model: control,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{AutoencoderConfig, Stage};
    use crate::diffusion::{diffusion_loss, sample_latent_with, DiffusionConfig, ScheduleKind};
    use crate::nn::gradcheck::check_gradients;
    use crate::phantom::{generate_phantom, PhantomParams};
    use crate::rng::normal_vec;
    use crate::volume::VolumeShape;
    use rand::Rng;

    struct Fixture {
        image_vae: Autoencoder,
        label_vae: Autoencoder,
        base: DiffusionModel,
        pairs: Vec<(Volume, LabelMap)>,
    }

    fn fixture() -> Fixture {
        let vae = |stage| {
            let cfg = AutoencoderConfig {
                base_width: 4,
                latent_channels: 2,
                ..AutoencoderConfig::for_stage(stage)
            };
            Autoencoder::new(cfg, 1).unwrap()
        };
        let cfg = DiffusionConfig {
            denoiser: DenoiserConfig {
                latent_channels: 2,
                base_width: 4,
                num_levels: 2,
                time_embedding_dim: 8,
                attention_levels: vec![],
            },
            timesteps: 6,
            beta_start: 1e-3,
            beta_end: 0.2,
            schedule_kind: ScheduleKind::Linear,
            variance: VarianceKind::Posterior,
        };
        let params = PhantomParams::for_roi(VolumeShape::new(16, 16, 8));
        let pairs = (0..3)
            .map(|s| {
                let p = generate_phantom(s, &params).unwrap();
                (p.volume, p.label)
            })
            .collect();
        Fixture {
            image_vae: vae(Stage::Image),
            label_vae: vae(Stage::Label),
            base: DiffusionModel::new(cfg, 1.3, 2).unwrap(),
            pairs,
        }
    }

    impl Fixture {
        fn ctx(&self) -> ConditioningContext<'_> {
            ConditioningContext {
                image_vae: &self.image_vae,
                label_vae: &self.label_vae,
                base: &self.base,
                label_scale: 0.8,
            }
        }

        fn control_config(&self) -> ControlNetConfig {
            ControlNetConfig {
                base: self.base.config.denoiser.clone(),
                condition_channels: 2,
                zero_init: true,
            }
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::from_vec(shape, normal_vec(&mut rng_from_seed(seed), shape.iter().product())).unwrap()
    }

    #[test]
    fn condition_contracts() {
        let f = fixture();
        let (x, l) = &f.pairs[0];
        let a = encode_condition(l, &f.label_vae, 0.8).unwrap();
        assert_eq!(a, encode_condition(l, &f.label_vae, 0.8).unwrap());
        let (z0, _) = f.ctx().prepare(x, l).unwrap();
        assert_eq!(a.data.shape()[2..], z0.shape()[2..]);
        let bg = LabelMap::background(l.shape(), 5).unwrap();
        let reference = f
            .label_vae
            .encode(&one_hot_encode(&bg).unwrap().batched())
            .unwrap()
            .mean
            .scale(0.8);
        assert_eq!(encode_condition(&bg, &f.label_vae, 0.8).unwrap().data, reference);
    }

    #[test]
    fn zero_init_identity_for_random_inputs() {
        let f = fixture();
        let control = ControlNet::from_base(f.control_config(), &f.base.denoiser, 3).unwrap();
        let mut rng = rng_from_seed(4);
        for i in 0..10 {
            let z = randn(&[1, 2, 2, 4, 4], 100 + i);
            let cond = ConditionTensor {
                data: randn(&[1, 2, 2, 4, 4], 200 + i),
            };
            let t = rng.random_range(1..=6);
            let cond_pred = conditioned_predict_noise(&f.base.denoiser, &control, &z, &[t], &cond).unwrap();
            let base_pred = f.base.denoiser.predict(&z, &[t]).unwrap();
            assert_eq!(cond_pred.data(), base_pred.data());
        }
        let cond = ConditionTensor {
            data: randn(&[1, 2, 2, 4, 4], 9),
        };
        let c = conditional_sample(&f.base.denoiser, &control, &cond, &f.base.schedule, 5).unwrap();
        let u = sample_latent_with(
            &f.base.denoiser,
            &f.base.schedule,
            &[1, 2, 2, 4, 4],
            VarianceKind::Posterior,
            5,
        )
        .unwrap();
        assert_eq!(c, u);
    }

    #[test]
    fn zero_init_loss_equals_base_loss() {
        let f = fixture();
        let control = ControlNet::from_base(f.control_config(), &f.base.denoiser, 3).unwrap();
        let (x, l) = &f.pairs[1];
        let noise = randn(&[1, 2, 2, 4, 4], 7);
        let cl = controlnet_loss(&f.ctx(), &control, x, l, 4, &noise).unwrap();
        let (z0, _) = f.ctx().prepare(x, l).unwrap();
        let bl = diffusion_loss(&f.base.denoiser, &z0, &[4], &noise, &f.base.schedule).unwrap();
        assert_eq!(cl, bl);
        let mismatched = LabelMap::background(VolumeShape::new(8, 8, 8), 5).unwrap();
        assert!(controlnet_loss(&f.ctx(), &control, x, &mismatched, 4, &noise).is_err());
    }

    #[test]
    fn gradients_restricted_to_control_branch() {
        let f = fixture();
        let mut control = ControlNet::from_base(f.control_config(), &f.base.denoiser, 3).unwrap();
        // move off the zero-initialized point so every branch weight matters
        let mut rng = rng_from_seed(8);
        for id in control.store.ids().collect::<Vec<_>>() {
            for v in control.store.get_mut(id).data_mut() {
                *v += 0.1 * rng.random_range(-1.0..1.0);
            }
        }
        let z_t = randn(&[2, 2, 2, 4, 4], 1);
        let cond = randn(&[2, 2, 2, 4, 4], 2);
        let noise = randn(&[2, 2, 2, 4, 4], 3);
        let net = control.net.clone();
        let base = &f.base.denoiser;
        let report = check_gradients(
            &mut control.store,
            |s, t| {
                let pc = s.bind(t, true);
                Ok((
                    controlnet_loss_on(t, base, &net, &pc, &z_t, &[2, 5], &cond, &noise)?,
                    pc,
                ))
            },
            100,
            1e-5,
            4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn training_freezes_base_and_breaks_identity() {
        let f = fixture();
        let before = f.base.denoiser.store.digest();
        let sched = TrainSchedule::new(10, 3, 6);
        let opt = OptimizerSettings::with_lr(1e-2);
        let out = train_controlnet(&f.control_config(), &f.ctx(), &f.pairs, &sched, &opt).unwrap();
        assert_eq!(f.base.denoiser.store.digest(), before);
        let again = train_controlnet(&f.control_config(), &f.ctx(), &f.pairs, &sched, &opt).unwrap();
        assert_eq!(out.history, again.history);
        assert_eq!(out.model.store.digest(), again.model.store.digest());

        let z = randn(&[1, 2, 2, 4, 4], 1);
        let zeros = ConditionTensor {
            data: Tensor::zeros(&[1, 2, 2, 4, 4]),
        };
        let cp = conditioned_predict_noise(&f.base.denoiser, &out.model, &z, &[3], &zeros).unwrap();
        let bp = f.base.denoiser.predict(&z, &[3]).unwrap();
        assert!(cp.zip_map(&bp, |a, b| (a - b).abs()).unwrap().max_abs() > 0.0);

        let c1 = encode_condition(&f.pairs[0].1, &f.label_vae, 0.8).unwrap();
        let c2 = encode_condition(&f.pairs[1].1, &f.label_vae, 0.8).unwrap();
        let s1 = conditional_sample(&f.base.denoiser, &out.model, &c1, &f.base.schedule, 9).unwrap();
        let s2 = conditional_sample(&f.base.denoiser, &out.model, &c2, &f.base.schedule, 9).unwrap();
        assert_ne!(s1, s2);
        assert_eq!(
            s1,
            conditional_sample(&f.base.denoiser, &out.model, &c1, &f.base.schedule, 9).unwrap()
        );

        let ckpt = out.model.to_checkpoint(out.history.clone(), BTreeMap::new()).unwrap();
        let back = ControlNet::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.store.digest(), out.model.store.digest());
    }
}
