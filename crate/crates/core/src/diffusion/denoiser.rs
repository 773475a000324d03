//! Time-conditioned 3D U-Net predicting the noise in a latent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv3d, ConvTranspose3d, GroupNorm, Linear, ParamStore, Tape, Var};
use crate::rng::{rng_from_seed, DetRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub num_levels: usize,
    pub time_embedding_dim: usize,
    /// Levels with self-attention. Only the empty list is supported.
    #[serde(default)]
    pub attention_levels: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            base_width: 32,
            num_levels: 2,
            time_embedding_dim: 32,
            attention_levels: vec![],
        }
    }
}

impl DenoiserConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.base_width == 0 || self.num_levels == 0 {
            return Err(Error::Validation(
                "denoiser widths and num_levels must be positive".into(),
            ));
        }
        if self.time_embedding_dim < 2 || self.time_embedding_dim % 2 != 0 {
            return Err(Error::Validation("time_embedding_dim must be even and ≥ 2".into()));
        }
        if !self.attention_levels.is_empty() {
            return Err(Error::Validation(
                "attention_levels is not supported by this denoiser; use an empty list".into(),
            ));
        }
        Ok(())
    }

    /// Check a latent batch `[N, C, D, H, W]`.
    pub fn check_latent(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.latent_channels {
            return Err(Error::Shape(format!(
                "latent {shape:?} is not [N, {}, D, H, W]",
                self.latent_channels
            )));
        }
        let f = 1usize << (self.num_levels - 1);
        for (axis, &n) in ["depth", "height", "width"].iter().zip(&shape[2..]) {
            if n % f != 0 {
                return Err(Error::Shape(format!(
                    "latent {axis} {n} is not divisible by 2^(num_levels−1) = {f}"
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding `[N, dim]`: sines then cosines over geometric
/// frequencies `10000^(−i/half)`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let f: Vec<f64> = freqs.collect();
        data.extend(f.iter().map(|a| a.sin()));
        data.extend(f.iter().map(|a| a.cos()));
    }
    Tensor::from_vec(&[ts.len(), dim], data).expect("embedding shape")
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv3d,
    shortcut: Option<Conv3d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut DetRng, name: &str, cin: usize, cout: usize, temb: usize) -> Self {
        ResBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv3d::same(store, rng, &format!("{name}.conv1"), cin, cout),
            time: Linear::new(store, rng, &format!("{name}.time"), temb, cout),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv3d::same(store, rng, &format!("{name}.conv2"), cout, cout),
            shortcut: (cin != cout).then(|| Conv3d::pointwise(store, rng, &format!("{name}.skip"), cin, cout)),
        }
    }

    /// `temb` is the already-activated time embedding `[N, E]`.
    fn forward(&self, t: &mut Tape, p: &Bound, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(t, p, x)?;
        let h = t.silu(h);
        let h = self.conv1.forward(t, p, h)?;
        let te = self.time.forward(t, p, temb)?;
        let h = t.add_channel(h, te)?;
        let h = self.norm2.forward(t, p, h)?;
        let h = t.silu(h);
        let h = self.conv2.forward(t, p, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(t, p, x)?,
            None => x,
        };
        t.add(s, h)
    }
}

/// Input projection, encoder levels and middle block; shared in structure
/// (and, at initialization, in weights) by the denoiser and its ControlNet.
#[derive(Debug, Clone)]
pub(crate) struct EncoderHalf {
    time1: Linear,
    time2: Linear,
    conv_in: Conv3d,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv3d>,
    mid: ResBlock,
}

/// Intermediate activations of the encoder half.
pub(crate) struct EncoderFeatures {
    pub temb: Var,
    pub skips: Vec<Var>,
    pub mid: Var,
}

impl EncoderHalf {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut DetRng, prefix: &str, cfg: &DenoiserConfig) -> Self {
        let e = cfg.time_embedding_dim;
        let time1 = Linear::new(store, rng, &format!("{prefix}time.fc1"), e, e);
        let time2 = Linear::new(store, rng, &format!("{prefix}time.fc2"), e, e);
        let conv_in = Conv3d::same(
            store,
            rng,
            &format!("{prefix}conv_in"),
            cfg.latent_channels,
            cfg.width(0),
        );
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 0..cfg.num_levels {
            let cin = if l == 0 { cfg.width(0) } else { cfg.width(l - 1) };
            blocks.push(ResBlock::new(
                store,
                rng,
                &format!("{prefix}enc{l}"),
                cin,
                cfg.width(l),
                e,
            ));
            if l + 1 < cfg.num_levels {
                downs.push(Conv3d::down(
                    store,
                    rng,
                    &format!("{prefix}down{l}"),
                    cfg.width(l),
                    cfg.width(l),
                ));
            }
        }
        let top = cfg.width(cfg.num_levels - 1);
        let mid = ResBlock::new(store, rng, &format!("{prefix}mid"), top, top, e);
        EncoderHalf {
            time1,
            time2,
            conv_in,
            blocks,
            downs,
            mid,
        }
    }

    pub(crate) fn time_embedding(&self, t: &mut Tape, p: &Bound, ts: &[usize], dim: usize) -> Result<Var> {
        let emb = t.constant(timestep_embedding(ts, dim));
        let h = self.time1.forward(t, p, emb)?;
        let h = t.silu(h);
        let h = self.time2.forward(t, p, h)?;
        Ok(t.silu(h))
    }

    /// Run the encoder half. `inject` is added right after `conv_in`.
    pub(crate) fn forward(
        &self,
        t: &mut Tape,
        p: &Bound,
        z: Var,
        ts: &[usize],
        dim: usize,
        inject: Option<Var>,
    ) -> Result<EncoderFeatures> {
        let temb = self.time_embedding(t, p, ts, dim)?;
        let mut h = self.conv_in.forward(t, p, z)?;
        if let Some(c) = inject {
            h = t.add(h, c)?;
        }
        let mut skips = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            h = block.forward(t, p, h, temb)?;
            skips.push(h);
            if let Some(down) = self.downs.get(l) {
                h = down.forward(t, p, h)?;
            }
        }
        let mid = self.mid.forward(t, p, h, temb)?;
        Ok(EncoderFeatures { temb, skips, mid })
    }
}

/// Network structure of the denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    pub(crate) encoder: EncoderHalf,
    dec_blocks: Vec<ResBlock>,
    ups: Vec<ConvTranspose3d>,
    out_norm: GroupNorm,
    out_conv: Conv3d,
}

/// Residuals added to the denoiser's skip features and middle output.
pub struct ControlResiduals {
    pub skips: Vec<Var>,
    pub mid: Var,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub store: ParamStore,
    pub net: DenoiserNet,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let r = &mut rng;
        let mut s = ParamStore::new();
        let encoder = EncoderHalf::new(&mut s, r, "", &config);
        let e = config.time_embedding_dim;
        let mut dec_blocks = Vec::new();
        let mut ups = Vec::new();
        for l in (0..config.num_levels).rev() {
            let w = config.width(l);
            dec_blocks.push(ResBlock::new(&mut s, r, &format!("dec{l}"), 2 * w, w, e));
            if l > 0 {
                ups.push(ConvTranspose3d::new(
                    &mut s,
                    r,
                    &format!("up{l}"),
                    w,
                    config.width(l - 1),
                ));
            }
        }
        let out_norm = GroupNorm::new(&mut s, "out.norm", config.width(0));
        let out_conv = Conv3d::same(&mut s, r, "out.conv", config.width(0), config.latent_channels);
        Ok(Denoiser {
            store: s,
            net: DenoiserNet {
                config,
                encoder,
                dec_blocks,
                ups,
                out_norm,
                out_conv,
            },
        })
    }

    /// ε̂(z_t, t) for a batch, evaluated without gradients.
    pub fn predict(&self, z_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let z = t.constant(z_t.clone());
        let out = self.net.forward_on(&mut t, &p, z, ts, None)?;
        Ok(t.value(out).clone())
    }
}

impl DenoiserNet {
    pub fn forward_on(
        &self,
        t: &mut Tape,
        p: &Bound,
        z: Var,
        ts: &[usize],
        control: Option<&ControlResiduals>,
    ) -> Result<Var> {
        let shape = t.value(z).shape().to_vec();
        self.config.check_latent(&shape)?;
        if ts.len() != shape[0] {
            return Err(Error::Shape(format!(
                "{} timesteps for batch of {}",
                ts.len(),
                shape[0]
            )));
        }
        let feats = self
            .encoder
            .forward(t, p, z, ts, self.config.time_embedding_dim, None)?;
        let mut skips = feats.skips;
        let mut h = feats.mid;
        if let Some(c) = control {
            if c.skips.len() != skips.len() {
                return Err(Error::Shape("control residual count does not match levels".into()));
            }
            for (s, r) in skips.iter_mut().zip(&c.skips) {
                *s = t.add(*s, *r)?;
            }
            h = t.add(h, c.mid)?;
        }
        let levels = self.config.num_levels;
        for (i, block) in self.dec_blocks.iter().enumerate() {
            let l = levels - 1 - i;
            let cat = t.concat_channels(h, skips[l])?;
            h = block.forward(t, p, cat, feats.temb)?;
            if l > 0 {
                h = self.ups[i].forward(t, p, h)?;
            }
        }
        let h = self.out_norm.forward(t, p, h)?;
        let h = t.silu(h);
        self.out_conv.forward(t, p, h)
    }
}
