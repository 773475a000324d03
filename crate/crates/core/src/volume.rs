//! Volumetric data model: intensity volumes, label maps, one-hot encodings,
//! and the preprocessing steps applied before anything is learned.
//!
//! Spatial data is stored depth-major (`[D, H, W]`, width fastest) while
//! shapes and coordinates are written in `(height, width, depth)` order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of classes in the full label set: background, liver, portal vein,
/// hepatic vein, tumor.
pub const NUM_CLASSES: u8 = 5;
pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const PORTAL_VEIN: u8 = 2;
pub const HEPATIC_VEIN: u8 = 3;
pub const TUMOR: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VolumeShape {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub channels: usize,
}

impl VolumeShape {
    /// Single-channel shape.
    pub fn new(height: usize, width: usize, depth: usize) -> Self {
        VolumeShape {
            height,
            width,
            depth,
            channels: 1,
        }
    }

    pub fn with_channels(self, channels: usize) -> Self {
        VolumeShape { channels, ..self }
    }

    /// Storage order `[D, H, W]`.
    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn from_dims([d, h, w]: [usize; 3]) -> Self {
        Self::new(h, w, d)
    }

    pub fn voxels(&self) -> usize {
        self.height * self.width * self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.depth == 0 || self.channels == 0 {
            return Err(Error::Validation(format!("all dimensions must be ≥ 1: {self:?}")));
        }
        Ok(())
    }

    /// Every spatial axis must be divisible by `factor`.
    pub fn check_divisible(&self, factor: usize) -> Result<()> {
        for (axis, len) in [("height", self.height), ("width", self.width), ("depth", self.depth)] {
            if factor == 0 || len % factor != 0 {
                return Err(Error::Shape(format!("{axis} {len} is not divisible by {factor}")));
            }
        }
        Ok(())
    }

    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (d * self.height + h) * self.width + w
    }
}

/// Single-channel intensity volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    data: Vec<f32>,
    shape: VolumeShape,
    /// Voxel spacing in mm along (x, y, z) = (width, height, depth).
    pub spacing: [f64; 3],
    pub normalized: bool,
}

impl Volume {
    pub fn new(shape: VolumeShape, data: Vec<f32>, spacing: [f64; 3]) -> Result<Self> {
        shape.validate()?;
        if shape.channels != 1 || data.len() != shape.voxels() {
            return Err(Error::Shape(format!(
                "volume data length {} does not match {shape:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite voxel at index {i}")));
        }
        if spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Validation(format!("spacing must be positive: {spacing:?}")));
        }
        Ok(Volume {
            data,
            shape,
            spacing,
            normalized: false,
        })
    }

    /// Wrap data already known to lie in `[0, 1]`.
    pub fn new_normalized(shape: VolumeShape, data: Vec<f32>, spacing: [f64; 3]) -> Result<Self> {
        let mut v = Self::new(shape, data, spacing)?;
        if v.data.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Validation("normalized volume has values outside [0, 1]".into()));
        }
        v.normalized = true;
        Ok(v)
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> f32 {
        self.data[self.shape.index(h, w, d)]
    }

    /// `[1, 1, D, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.shape.dims();
        Tensor::from_vec(&[1, 1, d, h, w], self.data.iter().map(|&v| v as f64).collect()).expect("volume tensor shape")
    }

    /// Build a normalized volume from a `[1, 1, D, H, W]` (or `[1, D, H, W]`)
    /// tensor, clamping into `[0, 1]`.
    pub fn from_tensor_clamped(t: &Tensor, spacing: [f64; 3]) -> Result<Self> {
        let dims = spatial_of(t.shape(), 1)?;
        let data = t.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        Self::new_normalized(VolumeShape::from_dims(dims), data, spacing)
    }
}

/// Integer class map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    data: Vec<u8>,
    shape: VolumeShape,
    pub num_classes: u8,
}

impl LabelMap {
    pub fn new(shape: VolumeShape, data: Vec<u8>, num_classes: u8) -> Result<Self> {
        shape.validate()?;
        if shape.channels != 1 || data.len() != shape.voxels() {
            return Err(Error::Shape(format!(
                "label data length {} does not match {shape:?}",
                data.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Validation("num_classes must be positive".into()));
        }
        if let Some(v) = data.iter().find(|&&v| v >= num_classes) {
            return Err(Error::Validation(format!("label value {v} outside [0, {num_classes})")));
        }
        Ok(LabelMap {
            data,
            shape,
            num_classes,
        })
    }

    pub fn background(shape: VolumeShape, num_classes: u8) -> Result<Self> {
        Self::new(shape, vec![0; shape.voxels()], num_classes)
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u8 {
        self.data[self.shape.index(h, w, d)]
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn contains(&self, class: u8) -> bool {
        self.data.contains(&class)
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes as usize];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    pub fn same_grid(&self, v: &Volume) -> Result<()> {
        if self.shape != v.shape() {
            return Err(Error::Shape(format!(
                "label {:?} and volume {:?} differ",
                self.shape,
                v.shape()
            )));
        }
        Ok(())
    }
}

/// One indicator channel per class, `[C, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotLabel {
    pub data: Tensor,
}

impl OneHotLabel {
    pub fn num_classes(&self) -> usize {
        self.data.shape()[0]
    }

    /// `[1, C, D, H, W]` view for the networks.
    pub fn batched(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.data.shape());
        self.data.clone().reshape(&shape).expect("one-hot reshape")
    }
}

fn spatial_of(shape: &[usize], channels: usize) -> Result<[usize; 3]> {
    match shape {
        [1, c, d, h, w] | [c, d, h, w] if *c == channels => Ok([*d, *h, *w]),
        _ => Err(Error::Shape(format!(
            "expected {channels} channel(s) over 3 spatial axes, got {shape:?}"
        ))),
    }
}

/// `(x − min)/(max − min)`; a constant volume maps to all zeros.
pub fn minmax_normalize(v: &Volume) -> Result<Volume> {
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("cannot normalize non-finite volume".into()));
    }
    let (lo, hi) = v.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    let range = hi as f64 - lo as f64;
    let data = if range > 0.0 {
        v.data
            .iter()
            .map(|&x| (((x as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Ok(Volume {
        data,
        shape: v.shape,
        spacing: v.spacing,
        normalized: true,
    })
}

/// Start index of an extent-`len` window centered at `center`, shifted inward
/// to stay inside `[0, size)`.
fn window_start(center: usize, len: usize, size: usize) -> usize {
    let start = center.saturating_sub(len / 2);
    start.min(size - len)
}

fn crop_raw<T: Copy>(
    data: &[T],
    shape: VolumeShape,
    center: [usize; 3],
    roi: VolumeShape,
) -> Result<(Vec<T>, VolumeShape)> {
    roi.validate()?;
    for (axis, r, s) in [
        ("height", roi.height, shape.height),
        ("width", roi.width, shape.width),
        ("depth", roi.depth, shape.depth),
    ] {
        if r > s {
            return Err(Error::Validation(format!("roi {axis} {r} exceeds volume {axis} {s}")));
        }
    }
    let h0 = window_start(center[0], roi.height, shape.height);
    let w0 = window_start(center[1], roi.width, shape.width);
    let d0 = window_start(center[2], roi.depth, shape.depth);
    let mut out = Vec::with_capacity(roi.voxels());
    for d in d0..d0 + roi.depth {
        for h in h0..h0 + roi.height {
            let base = shape.index(h, w0, d);
            out.extend_from_slice(&data[base..base + roi.width]);
        }
    }
    Ok((out, VolumeShape::new(roi.height, roi.width, roi.depth)))
}

/// Axis-aligned crop of extent `roi` centered at `center` (height, width,
/// depth). Boxes overrunning a border are shifted inward.
pub fn crop_roi(v: &Volume, center: [usize; 3], roi: VolumeShape) -> Result<Volume> {
    let (data, shape) = crop_raw(&v.data, v.shape, center, roi)?;
    Ok(Volume {
        data,
        shape,
        spacing: v.spacing,
        normalized: v.normalized,
    })
}

/// Same crop as [`crop_roi`] applied to a label map.
pub fn crop_label(l: &LabelMap, center: [usize; 3], roi: VolumeShape) -> Result<LabelMap> {
    let (data, shape) = crop_raw(&l.data, l.shape, center, roi)?;
    LabelMap::new(shape, data, l.num_classes)
}

pub fn one_hot_encode(l: &LabelMap) -> Result<OneHotLabel> {
    let c = l.num_classes as usize;
    let n = l.shape.voxels();
    let mut data = vec![0.0; c * n];
    for (i, &v) in l.data.iter().enumerate() {
        if v >= l.num_classes {
            return Err(Error::Validation(format!("label value {v} outside [0, {c})")));
        }
        data[v as usize * n + i] = 1.0;
    }
    let [d, h, w] = l.shape.dims();
    Ok(OneHotLabel {
        data: Tensor::from_vec(&[c, d, h, w], data)?,
    })
}

/// Per-voxel argmax over channels; ties go to the lowest class index.
/// Accepts `[C, D, H, W]` or `[1, C, D, H, W]`.
pub fn argmax_decode(o: &Tensor) -> Result<LabelMap> {
    let (c, dims) = match o.shape() {
        [1, c, d, h, w] | [c, d, h, w] => (*c, [*d, *h, *w]),
        s => return Err(Error::Shape(format!("cannot decode tensor of shape {s:?}"))),
    };
    if c == 0 || c > u8::MAX as usize {
        return Err(Error::Shape(format!("unsupported class count {c}")));
    }
    let n: usize = dims.iter().product();
    let od = o.data();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if od[ch * n + i] > od[best * n + i] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(VolumeShape::from_dims(dims), data, c as u8)
}
