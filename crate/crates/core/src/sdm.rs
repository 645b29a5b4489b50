//! Signed distance maps and boundary-aware features.

use serde::{Deserialize, Serialize};

use crate::edt::squared_edt;
use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::synth::Volume;

/// Sign carried by voxels inside the object. Outside voxels carry the opposite sign.
pub const INSIDE_SIGN: f64 = -1.0;

/// Per-volume normalized signed distance map with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedDistanceMap(pub Grid3<f64>);

impl SignedDistanceMap {
    pub fn values(&self) -> &Grid3<f64> {
        &self.0
    }

    pub fn into_grid(self) -> Grid3<f64> {
        self.0
    }
}

/// Unnormalized signed distances: Euclidean distance from each voxel center to the
/// nearest voxel center of the opposite class, negative inside the object.
pub fn raw_signed_distance(mask: &Grid3<u8>, spacing: [f64; 3]) -> Grid3<f64> {
    let inside = mask.map(|m| m != 0);
    let outside = mask.map(|m| m == 0);
    let to_object = squared_edt(&inside, spacing);
    let to_background = squared_edt(&outside, spacing);
    Grid3::from_fn(mask.dims(), |h, w, d| {
        let i = mask.index(h, w, d);
        if inside.as_slice()[i] {
            INSIDE_SIGN * to_background.as_slice()[i].sqrt()
        } else {
            -INSIDE_SIGN * to_object.as_slice()[i].sqrt()
        }
    })
}

/// Ground-truth SDM: raw signed distances with each sign class divided by its own
/// maximum magnitude. An empty object maps to uniform `+1`, a full one to uniform `-1`.
pub fn signed_distance_map(mask: &Grid3<u8>, spacing: [f64; 3]) -> Result<SignedDistanceMap> {
    if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spacing must be positive, got {spacing:?}"
        )));
    }
    let ones = mask.count_ones();
    if ones == 0 {
        return Ok(SignedDistanceMap(Grid3::filled(mask.dims(), -INSIDE_SIGN)));
    }
    if ones == mask.len() {
        return Ok(SignedDistanceMap(Grid3::filled(mask.dims(), INSIDE_SIGN)));
    }
    let raw = raw_signed_distance(mask, spacing);
    let mut max_in: f64 = 0.0;
    let mut max_out: f64 = 0.0;
    for (&m, &r) in mask.as_slice().iter().zip(raw.as_slice()) {
        if m != 0 {
            max_in = max_in.max(r.abs());
        } else {
            max_out = max_out.max(r.abs());
        }
    }
    let values = Grid3::from_fn(mask.dims(), |h, w, d| {
        let i = mask.index(h, w, d);
        let r = raw.as_slice()[i];
        if mask.as_slice()[i] != 0 {
            r / max_in
        } else {
            r / max_out
        }
    });
    Ok(SignedDistanceMap(values))
}

/// Intensity volume plus predicted SDM, voxel by voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryAwareFeature(pub Grid3<f64>);

impl BoundaryAwareFeature {
    pub fn values(&self) -> &Grid3<f64> {
        &self.0
    }
}

pub fn boundary_aware_feature(x: &Volume, q_sdm: &Grid3<f64>) -> Result<BoundaryAwareFeature> {
    let sum = x.voxels().add(q_sdm)?;
    if !sum.is_finite() {
        return Err(Error::NonFinite("boundary-aware feature".into()));
    }
    Ok(BoundaryAwareFeature(sum))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_masks_use_uniform_conventions() {
        let empty = Grid3::filled([3, 4, 5], 0u8);
        let full = Grid3::filled([3, 4, 5], 1u8);
        let e = signed_distance_map(&empty, [1.0; 3]).unwrap();
        let f = signed_distance_map(&full, [1.0; 3]).unwrap();
        assert!(e.values().as_slice().iter().all(|&v| v == 1.0));
        assert!(f.values().as_slice().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn center_voxel_cube() {
        let mut mask = Grid3::filled([3, 3, 3], 0u8);
        mask.set(1, 1, 1, 1);
        let sdm = signed_distance_map(&mask, [1.0; 3]).unwrap();
        let v = sdm.values();
        assert_eq!(v.get(1, 1, 1), -1.0);
        assert_eq!(v.get(0, 1, 1), 1.0 / 3f64.sqrt());
        assert_eq!(v.get(0, 0, 1), 2f64.sqrt() / 3f64.sqrt());
        assert_eq!(v.get(0, 0, 0), 1.0);
    }

    #[test]
    fn rejects_nonpositive_spacing() {
        let mask = Grid3::filled([2, 2, 2], 0u8);
        assert!(signed_distance_map(&mask, [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn feature_shape_mismatch_names_both_shapes() {
        let x = Volume::new(Grid3::zeros([2, 2, 2]), [1.0; 3]).unwrap();
        let err = boundary_aware_feature(&x, &Grid3::zeros([2, 2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2, 2]") && msg.contains("[2, 2, 3]"), "{msg}");
    }
}
