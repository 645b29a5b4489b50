//! Synthetic ellipsoid phantoms, dataset splits and the two-view perturbation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid3};
use crate::rng::{derive_seed, rng_for, stream};
use crate::sdm::signed_distance_map;

/// Intensity volume with voxel spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    voxels: Grid3<f64>,
    spacing: [f64; 3],
}

impl Volume {
    pub fn new(voxels: Grid3<f64>, spacing: [f64; 3]) -> Result<Self> {
        let dims = voxels.dims();
        if let Some(axis) = (0..3).find(|&a| dims[a] < 2) {
            return Err(Error::InvalidShape(format!(
                "volume axis {axis} has size {} (< 2)",
                dims[axis]
            )));
        }
        if !voxels.is_finite() {
            return Err(Error::NonFinite("volume voxels".into()));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self { voxels, spacing })
    }

    pub fn voxels(&self) -> &Grid3<f64> {
        &self.voxels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dims(&self) -> Dims {
        self.voxels.dims()
    }

    /// Population mean and standard deviation.
    pub fn stats(&self) -> (f64, f64) {
        let n = self.voxels.len() as f64;
        let mean = self.voxels.as_slice().iter().sum::<f64>() / n;
        let var = self
            .voxels
            .as_slice()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    /// Zero mean, unit variance. Constant volumes are an error.
    pub fn normalize(&self) -> Result<Volume> {
        let (mean, std) = self.stats();
        if !(std > 0.0) || std < 1e-12 * mean.abs().max(1.0) {
            return Err(Error::ConstantVolume);
        }
        Ok(Volume {
            voxels: self.voxels.map(|v| (v - mean) / std),
            spacing: self.spacing,
        })
    }
}

/// A labeled volume: intensities, binary mask and ground-truth SDM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedCase {
    pub id: usize,
    pub volume: Volume,
    pub mask: Grid3<u8>,
    pub sdm: Grid3<f64>,
}

impl AnnotatedCase {
    pub fn new(id: usize, volume: Volume, mask: Grid3<u8>) -> Result<Self> {
        volume.voxels().ensure_same_dims(&mask)?;
        if mask.as_slice().iter().any(|&m| m > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        let sdm = signed_distance_map(&mask, volume.spacing())?.into_grid();
        Ok(Self {
            id,
            volume,
            mask,
            sdm,
        })
    }

    pub fn dims(&self) -> Dims {
        self.volume.dims()
    }
}

/// Volume with its case identifier, annotation stripped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledCase {
    pub id: usize,
    pub volume: Volume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<AnnotatedCase>,
    pub unlabeled: Vec<UnlabeledCase>,
    pub test: Vec<AnnotatedCase>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn ids(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        (
            self.labeled.iter().map(|c| c.id).collect(),
            self.unlabeled.iter().map(|c| c.id).collect(),
            self.test.iter().map(|c| c.id).collect(),
        )
    }
}

/// Parameters of the ellipsoid-union phantom family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub object_level: f64,
    pub object_level_jitter: f64,
    pub background_level: f64,
    pub noise_sd: f64,
    pub spacing: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 2,
            min_radius: 5.0,
            max_radius: 10.0,
            object_level: 1.0,
            object_level_jitter: 0.3,
            background_level: 0.0,
            noise_sd: 0.6,
            spacing: [1.0; 3],
        }
    }
}

const MIN_PHANTOM_DIM: usize = 8;

/// One random phantom. Deterministic in `(shape, seed, spec)`.
pub fn generate_phantom(shape: Dims, seed: u64, spec: &PhantomSpec) -> Result<AnnotatedCase> {
    for (axis, &n) in shape.iter().enumerate() {
        if n < MIN_PHANTOM_DIM {
            return Err(Error::Generation(format!(
                "axis {axis} has size {n}, need at least {MIN_PHANTOM_DIM}"
            )));
        }
        let needed = (2.0 * spec.min_radius).ceil() as usize + 1;
        if n < needed {
            return Err(Error::Generation(format!(
                "axis {axis} has size {n}, the minimal ellipsoid (radius {}) needs {needed}",
                spec.min_radius
            )));
        }
    }
    if spec.min_objects == 0 || spec.min_objects > spec.max_objects {
        return Err(Error::Generation(format!(
            "object count range {}..={} must contain a positive count",
            spec.min_objects, spec.max_objects
        )));
    }
    if !(spec.min_radius >= 1.0) || spec.min_radius > spec.max_radius {
        return Err(Error::Generation(format!(
            "radius range {}..{} is invalid (min radius must be >= 1)",
            spec.min_radius, spec.max_radius
        )));
    }

    let mut rng = rng_for(seed, &[stream::PHANTOM]);
    let min_dim = *shape.iter().min().unwrap();
    let max_r = spec.max_radius.min((min_dim as f64 - 1.0) / 2.0 - 0.5).max(spec.min_radius);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);

    let mut mask = Grid3::filled(shape, 0u8);
    let mut level = Grid3::filled(shape, spec.background_level);
    for _ in 0..count {
        let radii = [
            rng.gen_range(spec.min_radius..=max_r),
            rng.gen_range(spec.min_radius..=max_r),
            rng.gen_range(spec.min_radius..=max_r),
        ];
        let bound = radii.iter().cloned().fold(0.0, f64::max);
        let mut center = [0.0; 3];
        for a in 0..3 {
            let lo = bound;
            let hi = shape[a] as f64 - 1.0 - bound;
            center[a] = if hi > lo { rng.gen_range(lo..=hi) } else { (shape[a] as f64 - 1.0) / 2.0 };
        }
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin, cos) = angle.sin_cos();
        let obj_level =
            spec.object_level + rng.gen_range(-spec.object_level_jitter..=spec.object_level_jitter);
        for h in 0..shape[0] {
            for w in 0..shape[1] {
                for d in 0..shape[2] {
                    let dh = h as f64 - center[0];
                    let dw = w as f64 - center[1];
                    let dd = d as f64 - center[2];
                    let u = cos * dh - sin * dw;
                    let v = sin * dh + cos * dw;
                    let q = (u / radii[0]).powi(2) + (v / radii[1]).powi(2) + (dd / radii[2]).powi(2);
                    if q <= 1.0 {
                        mask.set(h, w, d, 1);
                        level.set(h, w, d, spec.background_level + obj_level);
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sd.max(0.0))
        .map_err(|e| Error::Generation(e.to_string()))?;
    let voxels = level.map(|v| v + noise.sample(&mut rng));
    let volume = Volume::new(voxels, spec.spacing)?.normalize()?;
    AnnotatedCase::new(0, volume, mask)
}

/// `n` phantoms; case `i` uses a seed derived from `(seed, i)` and gets id `i`.
pub fn generate_cases(
    n: usize,
    shape: Dims,
    seed: u64,
    spec: &PhantomSpec,
) -> Result<Vec<AnnotatedCase>> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut case = generate_phantom(shape, derive_seed(seed, &[stream::PHANTOM, i as u64]), spec)?;
            case.id = i;
            Ok(case)
        })
        .collect()
}

/// Shared geometric transform of a two-view draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub offset: Dims,
    pub size: Dims,
    pub flips: [bool; 3],
}

impl CropRecord {
    pub fn random(volume_dims: Dims, size: Dims, rng: &mut impl Rng) -> Result<Self> {
        for a in 0..3 {
            if size[a] > volume_dims[a] || size[a] == 0 {
                return Err(Error::InvalidShape(format!(
                    "crop {size:?} does not fit volume {volume_dims:?}"
                )));
            }
        }
        let mut offset = [0; 3];
        for a in 0..3 {
            offset[a] = rng.gen_range(0..=volume_dims[a] - size[a]);
        }
        let flips = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
        Ok(Self {
            offset,
            size,
            flips,
        })
    }

    pub fn apply<T: Copy>(&self, grid: &Grid3<T>) -> Result<Grid3<T>> {
        Ok(grid.crop(self.offset, self.size)?.flipped(self.flips))
    }
}

/// Draws one crop/flip shared by both views, then adds independent Gaussian noise
/// fields to each.
pub fn two_view(
    volume: &Volume,
    seed: u64,
    noise_scale: f64,
    crop: Dims,
) -> Result<(Volume, Volume, CropRecord)> {
    if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be >= 0, got {noise_scale}"
        )));
    }
    let mut geo_rng = rng_for(seed, &[stream::DATA]);
    let record = CropRecord::random(volume.dims(), crop, &mut geo_rng)?;
    let base = record.apply(volume.voxels())?;
    let view = |tag: u64| -> Result<Volume> {
        if noise_scale == 0.0 {
            return Volume::new(base.clone(), volume.spacing());
        }
        let mut rng = rng_for(seed, &[stream::NOISE, tag]);
        let normal = Normal::new(0.0, noise_scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Volume::new(base.map(|v| v + normal.sample(&mut rng)), volume.spacing())
    };
    Ok((view(0)?, view(1)?, record))
}

/// Seed-deterministic disjoint partition. Unlabeled cases lose mask and SDM.
pub fn make_split(
    cases: Vec<AnnotatedCase>,
    n_labeled: usize,
    n_unlabeled: usize,
    n_test: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if n_labeled == 0 {
        return Err(Error::InvalidArgument("at least one labeled case is required".into()));
    }
    let required = n_labeled + n_unlabeled + n_test;
    if required > cases.len() {
        return Err(Error::InsufficientCases {
            required,
            available: cases.len(),
        });
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SPLIT]));
    let mut slots: Vec<Option<AnnotatedCase>> = cases.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<AnnotatedCase> {
        order[range]
            .iter()
            .map(|&i| slots[i].take().expect("each index drawn once"))
            .collect()
    };
    let labeled = take(0..n_labeled);
    let unlabeled = take(n_labeled..n_labeled + n_unlabeled)
        .into_iter()
        .map(|c| UnlabeledCase {
            id: c.id,
            volume: c.volume,
        })
        .collect();
    let test = take(n_labeled + n_unlabeled..required);
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        test,
        seed,
    })
}
