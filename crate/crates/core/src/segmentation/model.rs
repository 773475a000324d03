//! The 3D U-Net family: U-Net, ResUNet, WideResUNet, DynUNet and VNet share
//! one encoder–decoder skeleton (stride-2 downsampling, k2s2 transposed-conv
//! upsampling, skip concatenation) and differ in their blocks, widths,
//! downsampling kernel and depth rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::nn::{Activation, Bound, Conv3d, ConvTranspose3d, GroupNorm, ParamStore, Tape, Var};
use crate::rng::{rng_from_seed, DetRng};
use crate::tensor::Tensor;
use crate::volume::VolumeShape;

pub const CHECKPOINT_KIND: &str = "segmenter";

/// Desk-scale U-Net base width; WideResUNet must use at least twice this.
pub const UNET_DEFAULT_WIDTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unet,
    Resunet,
    Wideresunet,
    Dynunet,
    Vnet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Unet,
        Variant::Resunet,
        Variant::Wideresunet,
        Variant::Dynunet,
        Variant::Vnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::Resunet => "resunet",
            Variant::Wideresunet => "wideresunet",
            Variant::Dynunet => "dynunet",
            Variant::Vnet => "vnet",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Unet => "U-Net",
            Variant::Resunet => "ResUNet",
            Variant::Wideresunet => "WideResUNet",
            Variant::Dynunet => "DynUNet",
            Variant::Vnet => "VNet",
        }
    }

    fn residual(self) -> bool {
        matches!(self, Variant::Resunet | Variant::Wideresunet | Variant::Vnet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Prelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub variant: Variant,
    #[serde(default = "one")]
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Ignored by DynUNet, whose depth is derived from the input shape.
    pub num_levels: usize,
    pub activation: ActivationKind,
}

fn one() -> usize {
    1
}

impl SegmenterConfig {
    /// Desk-scale defaults for a variant.
    pub fn for_variant(variant: Variant, num_classes: usize) -> Self {
        SegmenterConfig {
            variant,
            in_channels: 1,
            num_classes,
            base_width: if variant == Variant::Wideresunet {
                2 * UNET_DEFAULT_WIDTH
            } else {
                UNET_DEFAULT_WIDTH
            },
            num_levels: 3,
            activation: if variant == Variant::Vnet {
                ActivationKind::Prelu
            } else {
                ActivationKind::Relu
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if self.in_channels == 0 || self.base_width == 0 || self.num_levels == 0 {
            return bad("segmenter channels and levels must be positive");
        }
        if self.num_classes < 2 {
            return bad("segmenter needs at least 2 classes");
        }
        if self.variant == Variant::Vnet && self.activation != ActivationKind::Prelu {
            return bad("vnet requires prelu activations");
        }
        if self.variant == Variant::Wideresunet && self.base_width < 2 * UNET_DEFAULT_WIDTH {
            return Err(Error::Validation(format!(
                "wideresunet base_width must be ≥ {}",
                2 * UNET_DEFAULT_WIDTH
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// DynUNet depth: keep halving while the smallest spatial dim is ≥ 8.
pub fn dynunet_levels(shape: VolumeShape) -> usize {
    let mut dims = shape.dims();
    let mut levels = 1;
    while dims.iter().all(|&d| d >= 8 && d % 2 == 0) {
        dims = dims.map(|d| d / 2);
        levels += 1;
    }
    levels
}

/// Check `[D, H, W]` divisibility by `2^(levels−1)`, naming the axis.
pub fn check_divisible(shape: VolumeShape, levels: usize) -> Result<()> {
    let f = 1usize << (levels - 1);
    for (axis, n) in [("height", shape.height), ("width", shape.width), ("depth", shape.depth)] {
        if n % f != 0 {
            return Err(Error::Shape(format!(
                "{axis} {n} is not divisible by 2^(num_levels−1) = {f}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Unit {
    conv: Conv3d,
    norm: GroupNorm,
    act: Activation,
}

#[derive(Debug, Clone)]
enum Shortcut {
    Identity,
    Project(Conv3d),
}

#[derive(Debug, Clone)]
struct Block {
    units: Vec<Unit>,
    /// Residual blocks skip the last unit's activation, add the shortcut,
    /// then apply `out_act`.
    residual: Option<(Shortcut, Activation)>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: DetRng,
    activation: ActivationKind,
}

impl Builder<'_> {
    fn act(&mut self, name: &str, c: usize) -> Activation {
        match self.activation {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Prelu => Activation::prelu(self.store, name, c),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, convs: usize, residual: bool) -> Block {
        let mut units = Vec::new();
        for i in 0..convs {
            let c_in = if i == 0 { cin } else { cout };
            units.push(Unit {
                conv: Conv3d::same(self.store, &mut self.rng, &format!("{name}.conv{i}"), c_in, cout),
                norm: GroupNorm::new(self.store, &format!("{name}.norm{i}"), cout),
                act: self.act(&format!("{name}.act{i}"), cout),
            });
        }
        let residual = residual.then(|| {
            let s = if cin == cout {
                Shortcut::Identity
            } else {
                Shortcut::Project(Conv3d::pointwise(
                    self.store,
                    &mut self.rng,
                    &format!("{name}.skip"),
                    cin,
                    cout,
                ))
            };
            (s, self.act(&format!("{name}.out_act"), cout))
        });
        Block { units, residual }
    }
}

impl Block {
    fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.units.len() - 1;
        for (i, u) in self.units.iter().enumerate() {
            h = u.conv.forward(t, p, h)?;
            h = u.norm.forward(t, p, h)?;
            if i < last || self.residual.is_none() {
                h = u.act.forward(t, p, h)?;
            }
        }
        if let Some((shortcut, act)) = &self.residual {
            let s = match shortcut {
                Shortcut::Identity => x,
                Shortcut::Project(c) => c.forward(t, p, x)?,
            };
            h = t.add(h, s)?;
            h = act.forward(t, p, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct SegmenterNet {
    pub config: SegmenterConfig,
    pub input_shape: VolumeShape,
    enc: Vec<Block>,
    downs: Vec<Conv3d>,
    ups: Vec<ConvTranspose3d>,
    dec: Vec<Block>,
    head: Conv3d,
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    pub store: ParamStore,
    pub net: SegmenterNet,
}

impl Segmenter {
    /// Build for inputs of spatial `shape`. DynUNet's depth is derived here
    /// and recorded in the stored config.
    pub fn new(mut config: SegmenterConfig, shape: VolumeShape, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.variant == Variant::Dynunet {
            config.num_levels = dynunet_levels(shape);
        }
        check_divisible(shape, config.num_levels)?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: rng_from_seed(seed),
            activation: config.activation,
        };
        let residual = config.variant.residual();
        let convs = |l: usize| match config.variant {
            Variant::Vnet => (l + 1).min(3),
            _ => 2,
        };
        let levels = config.num_levels;
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for l in 0..levels {
            let cin = if l == 0 { config.in_channels } else { config.width(l) };
            enc.push(b.block(&format!("enc{l}"), cin, config.width(l), convs(l), residual));
            if l + 1 < levels {
                let (name, cin, cout) = (format!("down{l}"), config.width(l), config.width(l + 1));
                downs.push(match config.variant {
                    // nnU-Net style: strided 3×3×3 convolution
                    Variant::Dynunet => Conv3d::new(b.store, &mut b.rng, &name, cin, cout, 3, 2, 1),
                    _ => Conv3d::down(b.store, &mut b.rng, &name, cin, cout),
                });
            }
        }
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for l in (0..levels - 1).rev() {
            ups.push(ConvTranspose3d::new(
                b.store,
                &mut b.rng,
                &format!("up{l}"),
                config.width(l + 1),
                config.width(l),
            ));
            dec.push(b.block(
                &format!("dec{l}"),
                2 * config.width(l),
                config.width(l),
                convs(l),
                residual,
            ));
        }
        let head = Conv3d::pointwise(b.store, &mut b.rng, "head", config.width(0), config.num_classes);
        Ok(Segmenter {
            store,
            net: SegmenterNet {
                config,
                input_shape: shape.with_channels(1),
                enc,
                downs,
                ups,
                dec,
                head,
            },
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.net.config
    }

    /// Per-voxel class probabilities `[N, classes, D, H, W]`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let logits = self.net.forward_on(&mut t, &p, xv)?;
        let probs = t.softmax_channels(logits);
        Ok(t.value(probs).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(&self.net.config)?, &self.store);
        let s = self.net.input_shape;
        c.constants.insert("input_height".into(), s.height as f64);
        c.constants.insert("input_width".into(), s.width as f64);
        c.constants.insert("input_depth".into(), s.depth as f64);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let dim = |k: &str| c.constant(k).map(|v| v as usize);
        let shape = VolumeShape::new(dim("input_height")?, dim("input_width")?, dim("input_depth")?);
        let mut m = Segmenter::new(c.config_as()?, shape, 0)?;
        c.load_into(&mut m.store)?;
        Ok(m)
    }
}

impl SegmenterNet {
    /// Logits `[N, classes, D, H, W]`.
    pub fn forward_on(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = t.value(x).shape().to_vec();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "segmenter input {shape:?} is not [N, {}, D, H, W]",
                self.config.in_channels
            )));
        }
        check_divisible(VolumeShape::new(shape[3], shape[4], shape[2]), self.config.num_levels)?;
        let mut skips = Vec::new();
        let mut h = x;
        for (l, block) in self.enc.iter().enumerate() {
            h = block.forward(t, p, h)?;
            if let Some(down) = self.downs.get(l) {
                skips.push(h);
                h = down.forward(t, p, h)?;
            }
        }
        for (up, block) in self.ups.iter().zip(&self.dec) {
            let u = up.forward(t, p, h)?;
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = t.concat_channels(u, skip)?;
            h = block.forward(t, p, cat)?;
        }
        self.head.forward(t, p, h)
    }
}
