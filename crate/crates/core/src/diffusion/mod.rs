//! Latent DDPM: schedule, ε-prediction loss, ancestral sampling and
//! training of the denoiser on autoencoder latents.

pub mod denoiser;
pub mod schedule;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use denoiser::{timestep_embedding, ControlResiduals, Denoiser, DenoiserConfig, DenoiserNet};
pub use schedule::{
    build_schedule, q_sample, q_sample_batch, q_sample_with_alpha_bar, NoiseSchedule, ScheduleKind, VarianceKind,
};

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::nn::{AdamW, OptimizerSettings, Tape};
use crate::rng::{derive_seed, normal_vec, rng_from_seed, DetRng};
use crate::tensor::Tensor;
use crate::train::{at_step, optimize_step, push, History, TrainSchedule};

pub const CHECKPOINT_KIND: &str = "diffusion";
pub const SCALE_FACTOR_KEY: &str = "latent_scale_factor";

/// Anything that predicts the noise in `z_t` at per-sample timesteps.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize]) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.predict(z_t, ts)
    }
}

impl<F: Fn(&Tensor, &[usize]) -> Result<Tensor>> NoisePredictor for F {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self(z_t, ts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub denoiser: DenoiserConfig,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule_kind: ScheduleKind,
    #[serde(default)]
    pub variance: VarianceKind,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            denoiser: DenoiserConfig::default(),
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule_kind: ScheduleKind::Linear,
            variance: VarianceKind::Posterior,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.timesteps, self.beta_start, self.beta_end, self.schedule_kind)
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.zip_map(b, |x, y| (x - y) * (x - y))?.mean())
}

/// `‖ε − ε̂(q_sample(z0, t, ε), t)‖²`, averaged over elements.
pub fn diffusion_loss(
    model: &impl NoisePredictor,
    z0: &Tensor,
    ts: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let z_t = q_sample_batch(z0, ts, noise, schedule)?;
    let pred = model.predict_noise(&z_t, ts)?;
    let loss = mse(noise, &pred)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("diffusion loss {loss}")));
    }
    Ok(loss)
}

/// Posterior mean `μ = (z_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t`.
fn posterior_mean(z_t: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    let c = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / schedule.alpha(t).sqrt();
    z_t.zip_map(eps, |z, e| inv * (z - c * e))
}

/// One ancestral step `z_t → z_{t−1}` with σ² chosen by `variance`; no
/// noise is added at `t = 1`.
pub fn ddpm_step_with(
    model: &impl NoisePredictor,
    z_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    variance: VarianceKind,
    seed: u64,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ts = vec![t; z_t.batch()];
    let eps = model.predict_noise(z_t, &ts)?;
    if eps.shape() != z_t.shape() {
        return Err(Error::Shape(format!(
            "predicted noise {:?} vs z_t {:?}",
            eps.shape(),
            z_t.shape()
        )));
    }
    let mu = posterior_mean(z_t, &eps, t, schedule)?;
    if t == 1 {
        return Ok(mu);
    }
    let sigma = schedule.sigma_squared(t, variance).sqrt();
    let eta = normal_vec(&mut rng_from_seed(seed), mu.numel());
    let data = mu.data().iter().zip(eta).map(|(m, e)| m + sigma * e).collect();
    Tensor::from_vec(mu.shape(), data)
}

pub fn ddpm_step(
    model: &impl NoisePredictor,
    z_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    ddpm_step_with(model, z_t, t, schedule, VarianceKind::Posterior, seed)
}

/// Full reverse chain from `z_T ~ N(0, I)`; step `t` draws its noise from
/// `derive_seed(seed, t)`.
pub fn sample_latent_with(
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    variance: VarianceKind,
    seed: u64,
) -> Result<Tensor> {
    let n = shape.iter().product();
    let mut z = Tensor::from_vec(shape, normal_vec(&mut rng_from_seed(derive_seed(seed, 0)), n))?;
    for t in (1..=schedule.timesteps()).rev() {
        z = ddpm_step_with(model, &z, t, schedule, variance, derive_seed(seed, t as u64))?;
    }
    if !z.all_finite() {
        return Err(Error::NonFinite("sampled latent".into()));
    }
    Ok(z)
}

pub fn sample_latent(
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor> {
    sample_latent_with(model, schedule, shape, VarianceKind::Posterior, seed)
}

/// Uniform timesteps in `[1, T]`.
pub fn sample_timesteps(rng: &mut DetRng, n: usize, timesteps: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=timesteps)).collect()
}

/// Timesteps and noise consumed by training step `step` for a batch of
/// `shape`; exposed so evaluation can replay a training trajectory.
pub fn training_draw(
    schedule: &TrainSchedule,
    step: u64,
    shape: &[usize],
    timesteps: usize,
) -> Result<(Vec<usize>, Tensor)> {
    let mut rng = rng_from_seed(schedule.step_seed(step));
    let ts = sample_timesteps(&mut rng, shape[0], timesteps);
    let n = shape.iter().product();
    Ok((ts, Tensor::from_vec(shape, normal_vec(&mut rng, n))?))
}

/// Posterior means of `inputs` (each `[1, C, D, H, W]`) under a frozen
/// autoencoder.
pub fn encode_latents(vae: &Autoencoder, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    inputs.iter().map(|x| Ok(vae.encode(x)?.mean)).collect()
}

/// `1 / std` over every element of `latents`.
pub fn latent_scale_factor(latents: &[Tensor]) -> Result<f64> {
    let n: usize = latents.iter().map(Tensor::numel).sum();
    if n < 2 {
        return Err(Error::Validation(
            "need at least two latent elements for a scale factor".into(),
        ));
    }
    let mean = latents.iter().map(Tensor::sum).sum::<f64>() / n as f64;
    let var = latents
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    if !(var > 1e-24) {
        return Err(Error::Validation(
            "latents have zero variance; scale factor undefined".into(),
        ));
    }
    Ok(1.0 / var.sqrt())
}

/// Trained denoiser together with everything needed to sample from it.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    /// Multiplier applied to autoencoder latents before diffusion.
    pub scale_factor: f64,
}

impl DiffusionModel {
    pub fn new(config: DiffusionConfig, scale_factor: f64, seed: u64) -> Result<Self> {
        let schedule = config.schedule()?;
        let denoiser = Denoiser::new(config.denoiser.clone(), seed)?;
        Ok(DiffusionModel {
            config,
            denoiser,
            schedule,
            scale_factor,
        })
    }

    /// Sample a latent in autoencoder units (scale factor removed).
    pub fn sample(&self, shape: &[usize], seed: u64) -> Result<Tensor> {
        let z = sample_latent_with(&self.denoiser, &self.schedule, shape, self.config.variance, seed)?;
        Ok(z.scale(1.0 / self.scale_factor))
    }

    pub fn to_checkpoint(&self, history: History) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config)?,
            &self.denoiser.store,
        );
        c.history = history;
        c.constants.insert(SCALE_FACTOR_KEY.into(), self.scale_factor);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let mut m = DiffusionModel::new(c.config_as()?, c.constant(SCALE_FACTOR_KEY)?, 0)?;
        c.load_into(&mut m.denoiser.store)?;
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionTraining {
    pub model: DiffusionModel,
    /// `loss` per epoch (mean over batches, before each update).
    pub history: History,
}

/// Train a denoiser on already-scaled latents (each `[1, C, D, H, W]`).
pub fn train_denoiser(
    config: &DiffusionConfig,
    latents: &[Tensor],
    scale_factor: f64,
    schedule: &TrainSchedule,
    optimizer: &OptimizerSettings,
) -> Result<DiffusionTraining> {
    if latents.is_empty() {
        return Err(Error::Validation("train_denoiser needs at least one latent".into()));
    }
    schedule.validate()?;
    optimizer.validate()?;
    let mut model = DiffusionModel::new(config.clone(), scale_factor, derive_seed(schedule.seed, 0xD1F))?;
    let mut opt = AdamW::new(*optimizer, &model.denoiser.store);
    let mut history = History::new();
    let mut step = 0u64;
    for epoch in 0..schedule.epochs {
        let (mut total, mut nb) = (0.0, 0.0);
        for (bi, batch) in schedule.batches(latents.len(), epoch).into_iter().enumerate() {
            let z0 = Tensor::stack(&batch.iter().map(|&i| latents[i].clone()).collect::<Vec<_>>())?;
            let (ts, noise) = training_draw(schedule, step, z0.shape(), config.timesteps)?;
            let z_t = q_sample_batch(&z0, &ts, &noise, &model.schedule)?;
            let net = &model.denoiser.net;
            let (loss, ()) = optimize_step(&mut model.denoiser.store, &mut opt, |t: &mut Tape, p| {
                let z = t.constant(z_t);
                let pred = net.forward_on(t, p, z, &ts, None)?;
                let target = t.constant(noise);
                Ok((t.mse(pred, target)?, ()))
            })
            .map_err(|e| at_step(e, "diffusion", epoch, bi))?;
            total += loss;
            nb += 1.0;
            step += 1;
        }
        push(&mut history, "loss", total / nb);
    }
    Ok(DiffusionTraining { model, history })
}

/// Encode `inputs` with the frozen autoencoder, fix the latent scale factor
/// from them, and train the denoiser.
pub fn train_diffusion(
    config: &DiffusionConfig,
    vae: &Autoencoder,
    inputs: &[Tensor],
    schedule: &TrainSchedule,
    optimizer: &OptimizerSettings,
) -> Result<DiffusionTraining> {
    let latents = encode_latents(vae, inputs)?;
    let scale = latent_scale_factor(&latents)?;
    let scaled: Vec<Tensor> = latents.iter().map(|z| z.scale(scale)).collect();
    train_denoiser(config, &scaled, scale, schedule, optimizer)
}

#[cfg(test)]
mod tests;
