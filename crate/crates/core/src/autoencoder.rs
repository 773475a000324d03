//! 3D variational autoencoder mapping volumes (1 channel) or one-hot labels
//! (one channel per class) to a Gaussian latent at `1/downsample_factor`
//! resolution, and back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::nn::{AdamW, Bound, Conv3d, ConvTranspose3d, GroupNorm, OptimizerSettings, ParamStore, Tape, Var};
use crate::rng::{derive_seed, normal_vec, rng_from_seed};
use crate::tensor::Tensor;
use crate::train::{at_step, optimize_step, push, History, TrainSchedule};
use crate::volume::{one_hot_encode, LabelMap, Volume, NUM_CLASSES};

pub const CHECKPOINT_KIND: &str = "autoencoder";
pub const LOG_VARIANCE_MIN: f64 = -30.0;
pub const LOG_VARIANCE_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Label,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionLoss {
    #[default]
    Mse,
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub in_channels: usize,
    #[serde(default = "default_latent")]
    pub latent_channels: usize,
    #[serde(default = "default_factor")]
    pub downsample_factor: usize,
    #[serde(default = "default_width")]
    pub base_width: usize,
    #[serde(default = "default_kl")]
    pub kl_weight: f64,
    pub stage: Stage,
    #[serde(default)]
    pub reconstruction_loss: ReconstructionLoss,
}

fn default_latent() -> usize {
    4
}
fn default_factor() -> usize {
    4
}
fn default_width() -> usize {
    16
}
fn default_kl() -> f64 {
    1e-7
}

impl AutoencoderConfig {
    /// Defaults for a stage: 1 input channel for images, one per class for
    /// labels.
    pub fn for_stage(stage: Stage) -> Self {
        AutoencoderConfig {
            in_channels: match stage {
                Stage::Image => 1,
                Stage::Label => NUM_CLASSES as usize,
            },
            latent_channels: default_latent(),
            downsample_factor: default_factor(),
            base_width: default_width(),
            kl_weight: default_kl(),
            stage,
            reconstruction_loss: ReconstructionLoss::Mse,
        }
    }

    pub fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if self.in_channels == 0 || self.latent_channels == 0 || self.base_width == 0 {
            return Err(Error::Validation("autoencoder channel counts must be positive".into()));
        }
        if f == 0 || !f.is_power_of_two() {
            return Err(Error::Validation(format!(
                "downsample_factor {f} is not a power of two"
            )));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Validation("kl_weight must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Check an input `[N, C, D, H, W]` shape, naming the offending axis.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(Error::Shape(format!("expected [N, C, D, H, W] input, got {shape:?}")));
        }
        if shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "channels: got {}, autoencoder expects {}",
                shape[1], self.in_channels
            )));
        }
        for (axis, &n) in ["depth", "height", "width"].iter().zip(&shape[2..]) {
            if n % self.downsample_factor != 0 {
                return Err(Error::Shape(format!(
                    "{axis} {n} is not divisible by downsample factor {}",
                    self.downsample_factor
                )));
            }
        }
        Ok(())
    }

    /// Latent shape `[C, D, H, W]` for spatial input dims `[D, H, W]`.
    pub fn latent_shape(&self, dims: [usize; 3]) -> [usize; 4] {
        let f = self.downsample_factor;
        [self.latent_channels, dims[0] / f, dims[1] / f, dims[2] / f]
    }
}

/// Diagonal Gaussian posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

impl GaussianLatent {
    pub fn validate(&self) -> Result<()> {
        if self.mean.shape() != self.log_variance.shape() {
            return Err(Error::Shape(format!(
                "mean {:?} vs log_variance {:?}",
                self.mean.shape(),
                self.log_variance.shape()
            )));
        }
        if !self.mean.all_finite() || !self.log_variance.all_finite() {
            return Err(Error::NonFinite("latent posterior".into()));
        }
        Ok(())
    }
}

/// `z = mean + exp(log_variance / 2) · η`, η ~ N(0, I) drawn from `seed`.
pub fn reparameterize(g: &GaussianLatent, seed: u64) -> Result<Tensor> {
    g.validate()?;
    let eta = normal_vec(&mut rng_from_seed(seed), g.mean.numel());
    let data = g
        .mean
        .data()
        .iter()
        .zip(g.log_variance.data())
        .zip(eta)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::from_vec(g.mean.shape(), data)
}

/// Mean over elements of `0.5·(μ² + e^{lv} − 1 − lv)`.
pub fn kl_divergence(g: &GaussianLatent) -> Result<f64> {
    g.validate()?;
    let n = g.mean.numel().max(1) as f64;
    let sum: f64 = g
        .mean
        .data()
        .iter()
        .zip(g.log_variance.data())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum();
    let kl = sum / n;
    if !kl.is_finite() {
        return Err(Error::NonFinite(format!("kl divergence {kl}")));
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Mean-squared reconstruction error plus `kl_weight · KL`.
pub fn vae_loss(v: &Tensor, reconstruction: &Tensor, g: &GaussianLatent, kl_weight: f64) -> Result<VaeLoss> {
    if v.shape() != reconstruction.shape() {
        return Err(Error::Shape(format!(
            "input {:?} vs reconstruction {:?}",
            v.shape(),
            reconstruction.shape()
        )));
    }
    let mse = v.zip_map(reconstruction, |a, b| (a - b) * (a - b))?.mean();
    let kl = kl_divergence(g)?;
    Ok(VaeLoss {
        total: mse + kl_weight * kl,
        reconstruction: mse,
        kl,
    })
}

#[derive(Debug, Clone)]
struct Block {
    norm: GroupNorm,
    conv: Conv3d,
}

impl Block {
    fn new(store: &mut ParamStore, rng: &mut crate::rng::DetRng, name: &str, c: usize) -> Self {
        Block {
            norm: GroupNorm::new(store, &format!("{name}.norm"), c),
            conv: Conv3d::same(store, rng, &format!("{name}.conv"), c, c),
        }
    }

    /// `x + conv(silu(norm(x)))`
    fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(t, p, x)?;
        let h = t.silu(h);
        let h = self.conv.forward(t, p, h)?;
        t.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct Layers {
    enc_in: Conv3d,
    enc_down: Vec<(GroupNorm, Conv3d)>,
    enc_blocks: Vec<Block>,
    enc_head_norm: GroupNorm,
    enc_head: Conv3d,
    dec_in: Conv3d,
    dec_blocks: Vec<Block>,
    dec_up: Vec<(GroupNorm, ConvTranspose3d)>,
    dec_out_norm: GroupNorm,
    dec_out: Conv3d,
}

/// Network structure; weights live in the owning [`Autoencoder`]'s store.
#[derive(Debug, Clone)]
pub struct AutoencoderNet {
    pub config: AutoencoderConfig,
    layers: Layers,
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub store: ParamStore,
    pub net: AutoencoderNet,
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let r = &mut rng;
        let mut s = ParamStore::new();
        let levels = config.levels();
        let w = |l| config.width(l);
        let enc_in = Conv3d::same(&mut s, r, "enc.in", config.in_channels, w(0));
        let mut enc_down = Vec::new();
        let mut enc_blocks = Vec::new();
        for l in 0..levels {
            let norm = GroupNorm::new(&mut s, &format!("enc.down{l}.norm"), w(l));
            let conv = Conv3d::down(&mut s, r, &format!("enc.down{l}.conv"), w(l), w(l + 1));
            enc_down.push((norm, conv));
            enc_blocks.push(Block::new(&mut s, r, &format!("enc.block{}", l + 1), w(l + 1)));
        }
        let enc_head_norm = GroupNorm::new(&mut s, "enc.head.norm", w(levels));
        let enc_head = Conv3d::pointwise(&mut s, r, "enc.head.conv", w(levels), 2 * config.latent_channels);
        let dec_in = Conv3d::pointwise(&mut s, r, "dec.in", config.latent_channels, w(levels));
        let mut dec_blocks = Vec::new();
        let mut dec_up = Vec::new();
        for l in (0..levels).rev() {
            dec_blocks.push(Block::new(&mut s, r, &format!("dec.block{}", l + 1), w(l + 1)));
            let norm = GroupNorm::new(&mut s, &format!("dec.up{l}.norm"), w(l + 1));
            let up = ConvTranspose3d::new(&mut s, r, &format!("dec.up{l}.conv"), w(l + 1), w(l));
            dec_up.push((norm, up));
        }
        let dec_out_norm = GroupNorm::new(&mut s, "dec.out.norm", w(0));
        let dec_out = Conv3d::same(&mut s, r, "dec.out.conv", w(0), config.in_channels);
        Ok(Autoencoder {
            store: s,
            net: AutoencoderNet {
                config,
                layers: Layers {
                    enc_in,
                    enc_down,
                    enc_blocks,
                    enc_head_norm,
                    enc_head,
                    dec_in,
                    dec_blocks,
                    dec_up,
                    dec_out_norm,
                    dec_out,
                },
            },
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.net.config
    }

    /// Posterior parameters for a batch `[N, C, D, H, W]`.
    pub fn encode(&self, x: &Tensor) -> Result<GaussianLatent> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let (m, lv) = self.net.encode_on(&mut t, &p, xv)?;
        let g = GaussianLatent {
            mean: t.value(m).clone(),
            log_variance: t.value(lv).clone(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let zv = t.constant(z.clone());
        let out = self.net.decode_on(&mut t, &p, zv)?;
        Ok(t.value(out).clone())
    }

    pub fn to_checkpoint(&self, history: History) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(&self.net.config)?, &self.store);
        c.history = history;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let mut m = Autoencoder::new(c.config_as()?, 0)?;
        c.load_into(&mut m.store)?;
        Ok(m)
    }
}

impl AutoencoderNet {
    /// Encoder on a tape: returns `(mean, clamped log-variance)`.
    pub fn encode_on(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        self.config.check_input(t.value(x).shape())?;
        let l = &self.layers;
        let mut h = l.enc_in.forward(t, p, x)?;
        for ((norm, down), block) in l.enc_down.iter().zip(&l.enc_blocks) {
            let a = norm.forward(t, p, h)?;
            let a = t.silu(a);
            h = down.forward(t, p, a)?;
            h = block.forward(t, p, h)?;
        }
        let a = l.enc_head_norm.forward(t, p, h)?;
        let a = t.silu(a);
        let moments = l.enc_head.forward(t, p, a)?;
        let c = self.config.latent_channels;
        let mean = t.slice_channels(moments, 0, c)?;
        let lv = t.slice_channels(moments, c, c)?;
        let lv = t.clamp(lv, LOG_VARIANCE_MIN, LOG_VARIANCE_MAX);
        Ok((mean, lv))
    }

    pub fn decode_on(&self, t: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let shape = t.value(z).shape().to_vec();
        if shape.len() != 5 || shape[1] != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent {shape:?} does not have {} channels in [N, C, D, H, W] layout",
                self.config.latent_channels
            )));
        }
        let l = &self.layers;
        let mut h = l.dec_in.forward(t, p, z)?;
        for (block, (norm, up)) in l.dec_blocks.iter().zip(&l.dec_up) {
            h = block.forward(t, p, h)?;
            let a = norm.forward(t, p, h)?;
            let a = t.silu(a);
            h = up.forward(t, p, a)?;
        }
        let a = l.dec_out_norm.forward(t, p, h)?;
        let a = t.silu(a);
        let out = l.dec_out.forward(t, p, a)?;
        Ok(match self.config.stage {
            Stage::Image => t.sigmoid(out),
            Stage::Label => out,
        })
    }

    /// Training objective on a tape with a fixed reparameterization noise
    /// `eta` (same shape as the latent). Returns `(total, reconstruction, kl)`.
    pub fn loss_on(&self, t: &mut Tape, p: &Bound, x: &Tensor, eta: &Tensor) -> Result<(Var, Var, Var)> {
        let xv = t.constant(x.clone());
        let (mean, lv) = self.encode_on(t, p, xv)?;
        let half = t.scale(lv, 0.5);
        let std = t.exp(half);
        let e = t.constant(eta.clone());
        let noise = t.mul(std, e)?;
        let z = t.add(mean, noise)?;
        let recon = self.decode_on(t, p, z)?;
        let rec = match self.config.reconstruction_loss {
            ReconstructionLoss::Mse => t.mse(recon, xv)?,
            ReconstructionLoss::L1 => t.l1(recon, xv)?,
        };
        // 0.5·mean(μ² + e^{lv} − 1 − lv)
        let m2 = t.square(mean);
        let ev = t.exp(lv);
        let s = t.add(m2, ev)?;
        let s = t.sub(s, lv)?;
        let s = t.add_scalar(s, -1.0);
        let kl = t.mean(s);
        let kl = t.scale(kl, 0.5);
        let wkl = t.scale(kl, self.config.kl_weight);
        let total = t.add(rec, wkl)?;
        Ok((total, rec, kl))
    }
}

/// Stage-appropriate network input `[1, C, D, H, W]` for one pair.
pub fn stage_input(stage: Stage, volume: &Volume, label: &LabelMap) -> Result<Tensor> {
    Ok(match stage {
        Stage::Image => volume.to_tensor(),
        Stage::Label => one_hot_encode(label)?.batched(),
    })
}

#[derive(Debug, Clone)]
pub struct VaeTraining {
    pub model: Autoencoder,
    /// `loss`, `reconstruction` and `kl`, one entry per epoch (mean over
    /// that epoch's batches, measured before each update).
    pub history: History,
}

/// Fit an autoencoder on `samples` (each `[1, C, D, H, W]`).
pub fn train_vae(
    config: &AutoencoderConfig,
    samples: &[Tensor],
    schedule: &TrainSchedule,
    optimizer: &OptimizerSettings,
) -> Result<VaeTraining> {
    if samples.is_empty() {
        return Err(Error::Validation("train_vae needs at least one sample".into()));
    }
    schedule.validate()?;
    optimizer.validate()?;
    let mut model = Autoencoder::new(config.clone(), derive_seed(schedule.seed, 0xAE))?;
    let mut opt = AdamW::new(*optimizer, &model.store);
    let mut history = History::new();
    let mut step = 0u64;
    for epoch in 0..schedule.epochs {
        let (mut tot, mut rec, mut kl, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for (bi, batch) in schedule.batches(samples.len(), epoch).into_iter().enumerate() {
            let x = Tensor::stack(&batch.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>())?;
            let [c, d, h, w]: [usize; 4] = config.latent_shape([x.shape()[2], x.shape()[3], x.shape()[4]]);
            let n = x.shape()[0] * c * d * h * w;
            let eta = Tensor::from_vec(
                &[x.shape()[0], c, d, h, w],
                normal_vec(&mut rng_from_seed(schedule.step_seed(step)), n),
            )?;
            let net = &model.net;
            let (loss, (r, k)) = optimize_step(&mut model.store, &mut opt, |t, p| {
                let (total, r, k) = net.loss_on(t, p, &x, &eta)?;
                Ok((total, (t.value(r).item(), t.value(k).item())))
            })
            .map_err(|e| at_step(e, "autoencoder", epoch, bi))?;
            tot += loss;
            rec += r;
            kl += k;
            nb += 1.0;
            step += 1;
        }
        push(&mut history, "loss", tot / nb);
        push(&mut history, "reconstruction", rec / nb);
        push(&mut history, "kl", kl / nb);
    }
    Ok(VaeTraining { model, history })
}
