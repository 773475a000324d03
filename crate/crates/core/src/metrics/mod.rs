//! Evaluation metrics: overlap (Dice) for segmentations and slice-wise
//! Fréchet distances for generated volumes.

mod fid;

pub use fid::{
    extract_slice_features, fid_report, frechet_distance, gaussian_stats, sqrtm_psd, FeatureExtractor,
    FeatureExtractorSpec, FidReport, GaussianStats, SliceAxis,
};

use crate::error::{Error, Result};
use crate::volume::LabelMap;

/// `2|A∩B| / (|A|+|B|)` for the voxels equal to `class`; 1 when both
/// masks are empty.
pub fn dice_coefficient(a: &LabelMap, b: &LabelMap, class: u8) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "dice over different grids {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == class, y == class);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mean of the per-class Dice over the foreground classes `1..classes`.
pub fn mean_foreground_dice(pred: &LabelMap, truth: &LabelMap, classes: u8) -> Result<f64> {
    if classes < 2 {
        return Err(Error::Validation("need at least one foreground class".into()));
    }
    let mut total = 0.0;
    for c in 1..classes {
        total += dice_coefficient(pred, truth, c)?;
    }
    Ok(total / (classes - 1) as f64)
}
