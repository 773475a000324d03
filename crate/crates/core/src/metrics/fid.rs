//! Slice-wise Fréchet distance between sets of volumes.
//!
//! A frozen, seeded random 2D CNN stands in for Inception: every slice along
//! an axis is bilinearly resized to a fixed square, embedded, and the
//! embeddings are summarized by a Gaussian per set.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, rng_from_seed};
use crate::volume::Volume;

/// Negative eigenvalues above `-EIG_TOLERANCE · max(1, λ_max)` are treated
/// as rounding noise and clipped to zero.
pub const EIG_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    /// Fixed depth; slices are `H × W`.
    Axial,
    /// Fixed width; slices are `H × D`.
    Sagittal,
    /// Fixed height; slices are `W × D`.
    Coronal,
}

impl SliceAxis {
    pub const ALL: [SliceAxis; 3] = [SliceAxis::Axial, SliceAxis::Sagittal, SliceAxis::Coronal];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureExtractorSpec {
    pub input_slice_size: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        FeatureExtractorSpec {
            input_slice_size: 32,
            output_dim: 64,
            seed: 0x00F1D,
        }
    }
}

impl FeatureExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_slice_size < 8 || self.output_dim == 0 {
            return Err(Error::Validation(
                "feature extractor needs input_slice_size ≥ 8 and output_dim ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

struct Conv2d {
    cin: usize,
    cout: usize,
    /// `[cout, cin, 3, 3]`
    w: Vec<f64>,
}

impl Conv2d {
    /// 3×3, stride 2, zero padding 1, followed by ReLU.
    fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, usize) {
        let m = n.div_ceil(2);
        let mut out = vec![0.0; self.cout * m * m];
        for co in 0..self.cout {
            let o = &mut out[co * m * m..(co + 1) * m * m];
            for ci in 0..self.cin {
                let xi = &x[ci * n * n..(ci + 1) * n * n];
                let k = &self.w[(co * self.cin + ci) * 9..][..9];
                for r in 0..m {
                    for c in 0..m {
                        let mut acc = 0.0;
                        for kr in 0..3 {
                            let y = (2 * r + kr) as isize - 1;
                            if y < 0 || y >= n as isize {
                                continue;
                            }
                            for kc in 0..3 {
                                let z = (2 * c + kc) as isize - 1;
                                if z >= 0 && z < n as isize {
                                    acc += k[kr * 3 + kc] * xi[y as usize * n + z as usize];
                                }
                            }
                        }
                        o[r * m + c] += acc;
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        (out, m)
    }
}

/// The frozen embedding network: three stride-2 conv+ReLU layers, global
/// average pooling, then a fixed linear projection to `output_dim`.
pub struct FeatureExtractor {
    spec: FeatureExtractorSpec,
    convs: Vec<Conv2d>,
    proj: DMatrix<f64>,
}

impl FeatureExtractor {
    pub fn new(spec: FeatureExtractorSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from_seed(spec.seed);
        let widths = [1, 16, 32, 64];
        let convs = widths
            .windows(2)
            .map(|w| {
                let std = (2.0 / (9 * w[0]) as f64).sqrt();
                Conv2d {
                    cin: w[0],
                    cout: w[1],
                    w: normal_vec(&mut rng, w[1] * w[0] * 9)
                        .into_iter()
                        .map(|v| v * std)
                        .collect(),
                }
            })
            .collect();
        let last = widths[widths.len() - 1];
        let std = (1.0 / last as f64).sqrt();
        let proj = DMatrix::from_vec(
            spec.output_dim,
            last,
            normal_vec(&mut rng, spec.output_dim * last)
                .into_iter()
                .map(|v| v * std)
                .collect(),
        );
        Ok(FeatureExtractor { spec, convs, proj })
    }

    pub fn spec(&self) -> &FeatureExtractorSpec {
        &self.spec
    }

    /// Embed one `rows × cols` slice (row-major).
    pub fn embed(&self, slice: &[f64], rows: usize, cols: usize) -> DVector<f64> {
        let s = self.spec.input_slice_size;
        let (mut x, mut n) = (resize_bilinear(slice, rows, cols, s), s);
        for conv in &self.convs {
            (x, n) = conv.forward(&x, n);
        }
        let c = x.len() / (n * n);
        let pooled = DVector::from_iterator(c, x.chunks(n * n).map(|ch| ch.iter().sum::<f64>() / (n * n) as f64));
        &self.proj * pooled
    }
}

/// Half-pixel-centred bilinear resize to `size × size` with edge clamping.
pub fn resize_bilinear(src: &[f64], rows: usize, cols: usize, size: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let (r0, r1, fr) = coord(r, rows);
        for c in 0..size {
            let (c0, c1, fc) = coord(c, cols);
            let top = src[r0 * cols + c0] * (1.0 - fc) + src[r0 * cols + c1] * fc;
            let bot = src[r1 * cols + c0] * (1.0 - fc) + src[r1 * cols + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

/// Every slice of `v` along `axis` as `(rows, cols, data)`.
fn slices(v: &Volume, axis: SliceAxis) -> Vec<(usize, usize, Vec<f64>)> {
    let s = v.shape();
    let at = |h, w, d| v.get(h, w, d) as f64;
    match axis {
        SliceAxis::Axial => (0..s.depth)
            .map(|d| {
                (
                    s.height,
                    s.width,
                    (0..s.height)
                        .flat_map(|h| (0..s.width).map(move |w| at(h, w, d)))
                        .collect(),
                )
            })
            .collect(),
        SliceAxis::Sagittal => (0..s.width)
            .map(|w| {
                (
                    s.height,
                    s.depth,
                    (0..s.height)
                        .flat_map(|h| (0..s.depth).map(move |d| at(h, w, d)))
                        .collect(),
                )
            })
            .collect(),
        SliceAxis::Coronal => (0..s.height)
            .map(|h| {
                (
                    s.width,
                    s.depth,
                    (0..s.width)
                        .flat_map(|w| (0..s.depth).map(move |d| at(h, w, d)))
                        .collect(),
                )
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features`.
pub fn gaussian_stats(features: &[DVector<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Validation(format!("covariance needs ≥ 2 samples, got {n}")));
    }
    let dim = features[0].len();
    let mut mean = DVector::zeros(dim);
    for f in features {
        if f.len() != dim {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        mean += f;
    }
    mean /= n as f64;
    // Shifted by the first sample so that identical features give an
    // exactly zero covariance.
    let origin = &features[0];
    let mut cov = DMatrix::zeros(dim, dim);
    let mut shift = DVector::zeros(dim);
    for f in features {
        let d = f - origin;
        cov += &d * d.transpose();
        shift += d;
    }
    shift /= n as f64;
    cov -= &shift * shift.transpose() * n as f64;
    cov /= (n - 1) as f64;
    Ok(GaussianStats {
        mean,
        covariance: cov,
        count: n,
    })
}

/// Gaussian summary of the embeddings of every slice along `axis`.
pub fn extract_slice_features(
    volumes: &[Volume],
    axis: SliceAxis,
    extractor: &FeatureExtractor,
) -> Result<GaussianStats> {
    if volumes.len() < 2 {
        return Err(Error::Validation(format!(
            "slice statistics need ≥ 2 volumes, got {}",
            volumes.len()
        )));
    }
    let feats: Vec<DVector<f64>> = volumes
        .iter()
        .flat_map(|v| slices(v, axis))
        .map(|(r, c, data)| extractor.embed(&data, r, c))
        .collect();
    gaussian_stats(&feats)
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Shape("sqrtm of a non-square matrix".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = EIG_TOLERANCE * top.max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for l in roots.iter_mut() {
        if !l.is_finite() || *l < -tol {
            return Err(Error::NonFinite(format!(
                "matrix square root: eigenvalue {l} below −{tol:e}"
            )));
        }
        *l = l.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.covariance.nrows() != b.covariance.nrows() {
        return Err(Error::Shape(format!(
            "Gaussian dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let d = (&a.mean - &b.mean).norm_squared();
    let s1 = sqrtm_psd(&a.covariance)?;
    let cross = sqrtm_psd(&(&s1 * &b.covariance * &s1))?;
    let fd = d + a.covariance.trace() + b.covariance.trace() - 2.0 * cross.trace();
    if !fd.is_finite() {
        return Err(Error::NonFinite(format!("Fréchet distance = {fd}")));
    }
    Ok(fd.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub axial: f64,
    pub sagittal: f64,
    pub coronal: f64,
    pub average: f64,
}

pub fn fid_report(real: &[Volume], synthetic: &[Volume], spec: &FeatureExtractorSpec) -> Result<FidReport> {
    let ex = FeatureExtractor::new(*spec)?;
    let mut v = [0.0; 3];
    for (slot, axis) in v.iter_mut().zip(SliceAxis::ALL) {
        let a = extract_slice_features(real, axis, &ex)?;
        let b = extract_slice_features(synthetic, axis, &ex)?;
        *slot = frechet_distance(&a, &b)?;
    }
    Ok(FidReport {
        axial: v[0],
        sagittal: v[1],
        coronal: v[2],
        average: (v[0] + v[1] + v[2]) / 3.0,
    })
}
