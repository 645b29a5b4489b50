//! Dense 3D grids stored row-major as `[h][w][d]` (depth varies fastest).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn filled(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidShape(format!(
                "{} values do not fill a {:?} grid ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    data.push(f(h, w, d));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> T {
        self.data[self.index(h, w, d)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, d: usize, value: T) {
        let i = self.index(h, w, d);
        self.data[i] = value;
    }

    pub fn coords(&self, flat: usize) -> [usize; 3] {
        let d = flat % self.dims[2];
        let rest = flat / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], d]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_same_dims<U>(&self, other: &Grid3<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(&self.dims, &other.dims));
        }
        Ok(())
    }

    /// Copies the sub-block starting at `offset` with extent `size`.
    pub fn crop(&self, offset: Dims, size: Dims) -> Result<Self> {
        for a in 0..3 {
            if offset[a] + size[a] > self.dims[a] {
                return Err(Error::InvalidShape(format!(
                    "crop {:?}+{:?} exceeds grid {:?} on axis {}",
                    offset, size, self.dims, a
                )));
            }
        }
        Ok(Self::from_fn(size, |h, w, d| {
            self.get(offset[0] + h, offset[1] + w, offset[2] + d)
        }))
    }

    /// Mirrors the grid along every axis whose flag is set.
    pub fn flipped(&self, flips: [bool; 3]) -> Self {
        let [nh, nw, nd] = self.dims;
        Self::from_fn(self.dims, |h, w, d| {
            let sh = if flips[0] { nh - 1 - h } else { h };
            let sw = if flips[1] { nw - 1 - w } else { w };
            let sd = if flips[2] { nd - 1 - d } else { d };
            self.get(sh, sw, sd)
        })
    }

    /// Depth slice `d` as a row-major `h * w` buffer.
    pub fn slice_depth(&self, d: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.dims[0] * self.dims[1]);
        for h in 0..self.dims[0] {
            for w in 0..self.dims[1] {
                out.push(self.get(h, w, d));
            }
        }
        out
    }
}

impl Grid3<f64> {
    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Grid3<f64>) -> Result<Grid3<f64>> {
        self.ensure_same_dims(other)?;
        Ok(Grid3 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

impl Grid3<u8> {
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_coords_agree() {
        let g = Grid3::from_fn([3, 4, 5], |h, w, d| (h * 100 + w * 10 + d) as u32);
        for flat in 0..g.len() {
            let [h, w, d] = g.coords(flat);
            assert_eq!(g.index(h, w, d), flat);
            assert_eq!(g.get(h, w, d), (h * 100 + w * 10 + d) as u32);
        }
    }

    #[test]
    fn crop_out_of_bounds_is_rejected() {
        let g = Grid3::filled([4, 4, 4], 0u8);
        assert!(g.crop([1, 0, 0], [4, 4, 4]).is_err());
        assert_eq!(g.crop([0, 0, 0], [4, 4, 4]).unwrap(), g);
    }

    #[test]
    fn double_flip_is_identity() {
        let g = Grid3::from_fn([3, 2, 4], |h, w, d| (h * 8 + w * 4 + d) as f64);
        assert_eq!(g.flipped([true, false, true]).flipped([true, false, true]), g);
    }
}
