//! Procedural abdominal phantoms: paired intensity volumes and 5-class label
//! maps built constructively from a seed.
//!
//! Construction order: deformed-ellipsoid liver (largest 6-connected piece
//! kept), portal and hepatic vessel trees swept as tubes and clipped to the
//! liver, an optional tumor ball placed wholly inside the liver, then the
//! intensity image from per-class means, a smooth multiplicative bias field
//! and Gaussian noise, min–max normalized.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fvol::{write_label, write_volume};
use crate::io::manifest::{DatasetManifest, ManifestRecord, Provenance, Split, FLAG_TUMOR};
use crate::rng::{derive_seed, rng_from_seed, standard_normal, uniform, DetRng};
use crate::volume::{
    minmax_normalize, LabelMap, Volume, VolumeShape, BACKGROUND, HEPATIC_VEIN, LIVER, NUM_CLASSES, PORTAL_VEIN, TUMOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T: PartialOrd + Copy> Range<T> {
    pub fn new(min: T, max: T) -> Self {
        Range { min, max }
    }

    fn is_valid(&self) -> bool {
        self.min <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    pub roi_shape: VolumeShape,
    /// Liver semi-axes in voxels along (height, width, depth).
    pub liver_axes_range: Range<[f64; 3]>,
    /// Number of vessel trees drawn for each of the two vessel classes.
    pub vessel_count_range: Range<u32>,
    pub tumor_probability: f64,
    pub tumor_radius_range: Range<f64>,
    /// Mean intensity per class, indexed by class id.
    pub intensity_means: [f64; NUM_CLASSES as usize],
    pub noise_sigma: f64,
    pub bias_field_amplitude: f64,
    /// Voxel spacing (x, y, z) in mm.
    pub spacing: [f64; 3],
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self::for_roi(VolumeShape::new(32, 32, 16))
    }
}

/// Maximum radial deformation applied to the liver ellipsoid.
const MAX_DEFORM: f64 = 0.2;

impl PhantomParams {
    /// Defaults scaled to the given region of interest.
    pub fn for_roi(roi: VolumeShape) -> Self {
        let dims = [roi.height as f64, roi.width as f64, roi.depth as f64];
        PhantomParams {
            roi_shape: roi.with_channels(1),
            liver_axes_range: Range::new(
                [0.25 * dims[0], 0.28 * dims[1], 0.28 * dims[2]],
                [0.33 * dims[0], 0.36 * dims[1], 0.36 * dims[2]],
            ),
            vessel_count_range: Range::new(1, 2),
            tumor_probability: 0.5,
            tumor_radius_range: Range::new(0.06 * dims[0].min(dims[1]), 0.1 * dims[0].min(dims[1])),
            intensity_means: [0.05, 0.55, 0.75, 0.70, 0.30],
            noise_sigma: 0.03,
            bias_field_amplitude: 0.1,
            spacing: [1.0, 1.0, 2.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        self.roi_shape.validate()?;
        if !self.vessel_count_range.is_valid() || !self.tumor_radius_range.is_valid() {
            return bad("empty vessel or tumor range".into());
        }
        let dims = [self.roi_shape.height, self.roi_shape.width, self.roi_shape.depth];
        for a in 0..3 {
            let (lo, hi) = (self.liver_axes_range.min[a], self.liver_axes_range.max[a]);
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("liver axis {a} range [{lo}, {hi}] is empty"));
            }
            if 2.0 * hi * (1.0 + MAX_DEFORM) > dims[a] as f64 {
                return bad(format!("liver semi-axis {hi} does not fit ROI extent {}", dims[a]));
            }
        }
        if !(0.0..=1.0).contains(&self.tumor_probability) {
            return bad("tumor_probability must lie in [0, 1]".into());
        }
        if self.tumor_radius_range.min <= 0.0 {
            return bad("tumor radius must be positive".into());
        }
        if self.noise_sigma < 0.0 || self.bias_field_amplitude < 0.0 || self.bias_field_amplitude >= 1.0 {
            return bad("noise_sigma ≥ 0 and bias amplitude in [0, 1) required".into());
        }
        let m = &self.intensity_means;
        if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("intensity means must lie in [0, 1]".into());
        }
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                if (m[i] - m[j]).abs() < 0.05 {
                    return bad(format!("intensity means of classes {i} and {j} closer than 0.05"));
                }
            }
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return bad("spacing must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub volume: Volume,
    pub label: LabelMap,
    pub seed: u64,
    pub has_tumor: bool,
}

struct Grid {
    shape: VolumeShape,
}

impl Grid {
    fn idx(&self, p: [usize; 3]) -> usize {
        self.shape.index(p[0], p[1], p[2])
    }

    fn coords(&self, i: usize) -> [usize; 3] {
        let (h, w) = (self.shape.height, self.shape.width);
        [(i / w) % h, i % w, i / (w * h)]
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let p = self.coords(i);
        let lim = [self.shape.height, self.shape.width, self.shape.depth];
        (0..6).filter_map(move |k| {
            let axis = k / 2;
            let mut q = p;
            if k % 2 == 0 {
                q[axis] = q[axis].checked_sub(1)?;
            } else {
                q[axis] += 1;
                if q[axis] >= lim[axis] {
                    return None;
                }
            }
            Some(self.idx(q))
        })
    }

    /// 6-connected components of `mask`, as lists of voxel indices.
    fn components(&self, mask: &[bool]) -> Vec<Vec<usize>> {
        let mut seen = vec![false; mask.len()];
        let mut out = Vec::new();
        for start in 0..mask.len() {
            if !mask[start] || seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                comp.push(i);
                for j in self.neighbors(i) {
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    /// Visit every voxel within `radius` of the continuous point `c`.
    fn ball(&self, c: [f64; 3], radius: f64, mut f: impl FnMut(usize)) {
        let lim = [self.shape.height, self.shape.width, self.shape.depth];
        let lo: Vec<usize> = (0..3).map(|a| (c[a] - radius).ceil().max(0.0) as usize).collect();
        let hi: Vec<isize> = (0..3)
            .map(|a| ((c[a] + radius).floor() as isize).min(lim[a] as isize - 1))
            .collect();
        for h in lo[0] as isize..=hi[0] {
            for w in lo[1] as isize..=hi[1] {
                for d in lo[2] as isize..=hi[2] {
                    let p = [h as f64, w as f64, d as f64];
                    let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                    if r2 <= radius * radius {
                        f(self.idx([h as usize, w as usize, d as usize]));
                    }
                }
            }
        }
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.map(|x| x / n)
}

fn random_dir(rng: &mut DetRng) -> [f64; 3] {
    unit([standard_normal(rng), standard_normal(rng), standard_normal(rng)])
}

/// Liver as a deformed ellipsoid; returns the mask and the center.
fn build_liver(grid: &Grid, params: &PhantomParams, rng: &mut DetRng) -> (Vec<bool>, [f64; 3]) {
    let dims = [grid.shape.height, grid.shape.width, grid.shape.depth].map(|v| v as f64);
    let axes: [f64; 3] =
        std::array::from_fn(|a| uniform(rng, params.liver_axes_range.min[a], params.liver_axes_range.max[a]));
    let center: [f64; 3] = std::array::from_fn(|a| {
        let half = (dims[a] - 1.0) / 2.0;
        let slack = (half - axes[a] * (1.0 + MAX_DEFORM)).clamp(0.0, 0.1 * dims[a]);
        half + uniform(rng, -slack, slack)
    });
    // Low-order angular deformation of the radius.
    let coef: [f64; 7] = std::array::from_fn(|_| uniform(rng, -0.1, 0.1));
    let mut mask = vec![false; grid.shape.voxels()];
    for (i, m) in mask.iter_mut().enumerate() {
        let p = grid.coords(i).map(|v| v as f64);
        let q: [f64; 3] = std::array::from_fn(|a| (p[a] - center[a]) / axes[a]);
        let rho = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u = unit(q);
        let deform = coef[0] * u[0]
            + coef[1] * u[1]
            + coef[2] * u[2]
            + coef[3] * u[0] * u[1]
            + coef[4] * u[1] * u[2]
            + coef[5] * u[0] * u[2]
            + coef[6] * (u[0] * u[0] - u[1] * u[1]);
        *m = rho <= 1.0 + deform.clamp(-MAX_DEFORM, MAX_DEFORM);
    }
    // Keep the component holding the most voxels.
    let comps = grid.components(&mask);
    let mut keep = vec![false; mask.len()];
    if let Some(best) = comps.iter().max_by_key(|c| c.len()) {
        for &i in best {
            keep[i] = true;
        }
    }
    (keep, center)
}

/// Sweep a branching tube from `start`, painting `class` inside `organ`.
fn sweep_vessel(
    grid: &Grid,
    organ: &[bool],
    labels: &mut [u8],
    class: u8,
    start: [f64; 3],
    heading: [f64; 3],
    rng: &mut DetRng,
) {
    let mut stack = vec![(start, heading, 1.2_f64, 0u32)];
    while let Some((mut p, mut dir, radius, depth)) = stack.pop() {
        let steps = (uniform(rng, 6.0, 14.0) / (depth + 1) as f64).ceil() as usize + 2;
        let branch_at = (steps / 2).max(1);
        for s in 0..steps {
            let inside = {
                let q = p.map(|v| v.round());
                let lim = [grid.shape.height, grid.shape.width, grid.shape.depth];
                (0..3).all(|a| q[a] >= 0.0 && (q[a] as usize) < lim[a]) && organ[grid.idx(q.map(|v| v as usize))]
            };
            if !inside && s > 0 {
                break;
            }
            grid.ball(p, radius, |i| {
                if organ[i] {
                    labels[i] = class;
                }
            });
            if s == branch_at && depth < 2 {
                let jitter = random_dir(rng);
                let child = unit(std::array::from_fn(|a| dir[a] + 0.9 * jitter[a]));
                stack.push((p, child, (radius * 0.75).max(0.7), depth + 1));
            }
            let wiggle = random_dir(rng);
            dir = unit(std::array::from_fn(|a| dir[a] + 0.25 * wiggle[a]));
            p = std::array::from_fn(|a| p[a] + dir[a]);
        }
    }
}

fn place_tumor(grid: &Grid, organ: &[bool], labels: &mut [u8], params: &PhantomParams, rng: &mut DetRng) -> bool {
    let candidates: Vec<usize> = (0..organ.len()).filter(|&i| organ[i]).collect();
    if candidates.is_empty() {
        return false;
    }
    let mut radius = uniform(rng, params.tumor_radius_range.min, params.tumor_radius_range.max);
    loop {
        for _ in 0..64 {
            let c = candidates[rand::Rng::random_range(rng, 0..candidates.len())];
            let center = grid.coords(c).map(|v| v as f64);
            let mut fits = true;
            // Require a one-voxel organ margin around the ball so that no
            // tumor voxel borders background or the ROI edge.
            let lim = [grid.shape.height, grid.shape.width, grid.shape.depth];
            if (0..3).any(|a| center[a] - radius < 1.0 || center[a] + radius > (lim[a] - 2) as f64) {
                continue;
            }
            grid.ball(center, radius + 1.0, |i| fits &= organ[i]);
            if fits {
                grid.ball(center, radius, |i| labels[i] = TUMOR);
                return true;
            }
        }
        if radius <= 1.0 {
            return false;
        }
        radius = (radius - 0.5).max(1.0);
    }
}

/// Reassign liver-class fragments cut off by vessels/tumor so that the liver
/// class is one 6-connected component.
fn merge_liver_fragments(grid: &Grid, labels: &mut [u8]) {
    let mask: Vec<bool> = labels.iter().map(|&v| v == LIVER).collect();
    let mut comps = grid.components(&mask);
    if comps.len() <= 1 {
        return;
    }
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    for comp in comps.into_iter().skip(1) {
        let mut votes = [0usize; NUM_CLASSES as usize];
        for &i in &comp {
            for j in grid.neighbors(i) {
                votes[labels[j] as usize] += 1;
            }
        }
        // Vessel classes only: growing the tumor would break its margin.
        let class = if votes[HEPATIC_VEIN as usize] > votes[PORTAL_VEIN as usize] {
            HEPATIC_VEIN
        } else {
            PORTAL_VEIN
        };
        for i in comp {
            labels[i] = class;
        }
    }
}

fn bias_field(grid: &Grid, amplitude: f64, rng: &mut DetRng) -> Vec<f64> {
    let coef: [f64; 9] = std::array::from_fn(|_| uniform(rng, -1.0, 1.0));
    let dims = [grid.shape.height, grid.shape.width, grid.shape.depth].map(|v| v as f64);
    (0..grid.shape.voxels())
        .map(|i| {
            let p = grid.coords(i);
            let [x, y, z]: [f64; 3] = std::array::from_fn(|a| {
                if dims[a] > 1.0 {
                    2.0 * p[a] as f64 / (dims[a] - 1.0) - 1.0
                } else {
                    0.0
                }
            });
            let poly = coef[0] * x
                + coef[1] * y
                + coef[2] * z
                + coef[3] * x * y
                + coef[4] * y * z
                + coef[5] * x * z
                + coef[6] * (x * x - 1.0 / 3.0)
                + coef[7] * (y * y - 1.0 / 3.0)
                + coef[8] * (z * z - 1.0 / 3.0);
            1.0 + amplitude * (poly / 3.0).clamp(-1.0, 1.0)
        })
        .collect()
}

pub fn generate_phantom(seed: u64, params: &PhantomParams) -> Result<PhantomSample> {
    params.validate()?;
    let grid = Grid {
        shape: params.roi_shape.with_channels(1),
    };
    let mut geo = rng_from_seed(derive_seed(seed, 1));
    let (organ, center) = build_liver(&grid, params, &mut geo);
    let mut labels: Vec<u8> = organ.iter().map(|&m| if m { LIVER } else { BACKGROUND }).collect();

    let dims = [grid.shape.height, grid.shape.width, grid.shape.depth].map(|v| v as f64);
    for (class, side) in [(PORTAL_VEIN, -1.0), (HEPATIC_VEIN, 1.0)] {
        let n = rand::Rng::random_range(&mut geo, params.vessel_count_range.min..=params.vessel_count_range.max);
        for _ in 0..n {
            // Portal trees enter from the lower half, hepatic trees from the upper.
            let start: [f64; 3] = std::array::from_fn(|a| {
                let offset = if a == 0 { side * 0.25 * dims[0] * 0.5 } else { 0.0 };
                center[a] + offset + uniform(&mut geo, -1.5, 1.5)
            });
            let mut heading = random_dir(&mut geo);
            heading[0] = -side * heading[0].abs();
            sweep_vessel(&grid, &organ, &mut labels, class, start, unit(heading), &mut geo);
        }
    }

    let wants_tumor = uniform(&mut geo, 0.0, 1.0) < params.tumor_probability;
    if wants_tumor {
        place_tumor(&grid, &organ, &mut labels, params, &mut geo);
    }
    merge_liver_fragments(&grid, &mut labels);
    let has_tumor = labels.contains(&TUMOR);

    let mut noise_rng = rng_from_seed(derive_seed(seed, 2));
    let bias = bias_field(&grid, params.bias_field_amplitude, &mut noise_rng);
    let raw: Vec<f32> = labels
        .iter()
        .zip(&bias)
        .map(|(&c, &b)| {
            let mean = params.intensity_means[c as usize];
            (mean * b + params.noise_sigma * standard_normal(&mut noise_rng)) as f32
        })
        .collect();
    let volume = minmax_normalize(&Volume::new(grid.shape, raw, params.spacing)?)?;
    let label = LabelMap::new(grid.shape, labels, NUM_CLASSES)?;
    Ok(PhantomSample {
        volume,
        label,
        seed,
        has_tumor,
    })
}

/// Split sizes `(train, val, test)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Split assignment of the `i`-th record in seed order.
    pub fn assign(&self, i: usize) -> Split {
        if i < self.train {
            Split::Train
        } else if i < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Generate `count` phantoms with seeds `base_seed..base_seed + count` into
/// `dir` and return the manifest (not yet written).
pub fn generate_phantom_dataset(
    count: usize,
    base_seed: u64,
    params: &PhantomParams,
    splits: SplitCounts,
    dir: &Path,
) -> Result<DatasetManifest> {
    if splits.total() != count || count == 0 {
        return Err(Error::Validation(format!(
            "split counts {splits:?} must sum to count {count}"
        )));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let seed = base_seed.wrapping_add(i as u64);
        let sample = generate_phantom(seed, params)?;
        let id = format!("phantom_{i:05}");
        let volume_path = format!("{id}.vol.fvol");
        let label_path = format!("{id}.label.fvol");
        write_volume(&dir.join(&volume_path), &sample.volume)?;
        write_label(&dir.join(&label_path), &sample.label, params.spacing)?;
        records.push(ManifestRecord {
            id,
            volume_path,
            label_path,
            provenance: Provenance::Phantom,
            split: splits.assign(i),
            seed,
            flags: if sample.has_tumor {
                vec![FLAG_TUMOR.to_string()]
            } else {
                vec![]
            },
            lineage: Default::default(),
        });
    }
    Ok(DatasetManifest::new(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn organ_mask(l: &LabelMap) -> Vec<bool> {
        l.data().iter().map(|&v| v != BACKGROUND).collect()
    }

    #[test]
    fn deterministic_per_seed() {
        let p = PhantomParams::default();
        assert_eq!(generate_phantom(11, &p).unwrap(), generate_phantom(11, &p).unwrap());
        assert_ne!(
            generate_phantom(11, &p).unwrap().label,
            generate_phantom(12, &p).unwrap().label
        );
    }

    #[test]
    fn no_tumor_when_probability_zero() {
        let p = PhantomParams {
            tumor_probability: 0.0,
            ..Default::default()
        };
        for seed in 0..10 {
            let s = generate_phantom(seed, &p).unwrap();
            assert!(!s.has_tumor);
            assert_eq!(s.label.count(TUMOR), 0);
        }
    }

    #[test]
    fn structural_invariants_hold() {
        let p = PhantomParams {
            tumor_probability: 0.8,
            ..Default::default()
        };
        for seed in 0..30 {
            let s = generate_phantom(seed, &p).unwrap();
            let grid = Grid { shape: s.label.shape() };
            let l = s.label.data();
            // liver class is a single 6-connected component
            let liver: Vec<bool> = l.iter().map(|&v| v == LIVER).collect();
            assert_eq!(grid.components(&liver).len(), 1, "seed {seed}");
            // the organ (all foreground) is also one piece, so vessels and
            // tumor lie inside it
            assert_eq!(grid.components(&organ_mask(&s.label)).len(), 1, "seed {seed}");
            assert_eq!(s.has_tumor, s.label.contains(TUMOR));
            let vmin = s.volume.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let vmax = s.volume.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!((vmin, vmax), (0.0, 1.0));
        }
    }

    #[test]
    fn tumor_enclosed_by_organ() {
        let p = PhantomParams {
            tumor_probability: 1.0,
            ..Default::default()
        };
        let mut with_tumor = 0;
        for seed in 0..20 {
            let s = generate_phantom(seed, &p).unwrap();
            let grid = Grid { shape: s.label.shape() };
            let l = s.label.data();
            for i in (0..l.len()).filter(|&i| l[i] == TUMOR) {
                assert_eq!(grid.neighbors(i).count(), 6, "seed {seed}: tumor on ROI edge");
                assert!(grid.neighbors(i).all(|j| l[j] != BACKGROUND), "seed {seed}");
            }
            with_tumor += s.has_tumor as usize;
        }
        assert!(with_tumor >= 15, "only {with_tumor}/20 phantoms received a tumor");
    }

    #[test]
    fn liver_fraction_within_calibrated_range() {
        // Observed over seeds 0..99 with default params: [0.0811, 0.1554].
        let p = PhantomParams::default();
        for seed in 0..100 {
            let s = generate_phantom(seed, &p).unwrap();
            let frac = s.label.count(LIVER) as f64 / s.label.shape().voxels() as f64;
            assert!((0.08..=0.16).contains(&frac), "seed {seed}: liver fraction {frac}");
        }
    }

    #[test]
    fn dataset_splits_and_byte_identical_reruns() {
        let p = PhantomParams::for_roi(VolumeShape::new(16, 16, 8));
        let splits = SplitCounts {
            train: 7,
            val: 1,
            test: 2,
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_phantom_dataset(10, 42, &p, splits, a.path()).unwrap();
        let mb = generate_phantom_dataset(10, 42, &p, splits, b.path()).unwrap();
        assert_eq!(ma.to_json().unwrap(), mb.to_json().unwrap());
        assert_eq!(
            [Split::Train, Split::Val, Split::Test].map(|s| ma.split_count(s)),
            [7, 1, 2]
        );
        assert!(ma.records.iter().all(|r| r.provenance == Provenance::Phantom));
        for r in &ma.records {
            for f in [&r.volume_path, &r.label_path] {
                assert_eq!(
                    std::fs::read(a.path().join(f)).unwrap(),
                    std::fs::read(b.path().join(f)).unwrap()
                );
            }
        }
        ma.validate(a.path()).unwrap();
        assert!(generate_phantom_dataset(
            10,
            42,
            &p,
            SplitCounts {
                train: 7,
                val: 1,
                test: 1
            },
            a.path()
        )
        .is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = PhantomParams::default();
        p.intensity_means[3] = 0.73;
        assert!(p.validate().is_err());
        let mut p = PhantomParams::default();
        p.liver_axes_range.max[0] = 40.0;
        assert!(p.validate().is_err());
    }
}
