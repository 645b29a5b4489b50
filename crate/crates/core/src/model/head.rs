//! Projection head: alpha dropout on the boundary-aware volume, per-slice adaptive
//! average pooling, and a 3-layer MLP giving one embedding per depth slice.
//!
//! Pooling is linear, so it is folded into the first MLP layer: for an `h x w`
//! slice the layer `fc1 . pool` is materialized once per call as an
//! `(hidden, h*w)` matrix. [`adaptive_avg_pool2d`] is the explicit form.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{leaky, leaky_grad};
use super::params::{Layout, ParamSet};
use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::rng::rng_for;

/// SELU negative saturation value, `-lambda * alpha`.
pub const ALPHA_PRIME: f64 = -1.758_099_340_847_376_6;

/// Seed and rate of one alpha-dropout draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub seed: u64,
    pub p: f64,
}

impl DropoutMask {
    pub fn new(seed: u64, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {p}")));
        }
        Ok(Self { seed, p })
    }

    /// Keep flags for `n` elements; all true when `p == 0`.
    pub fn keep_flags(&self, n: usize) -> Vec<bool> {
        if self.p == 0.0 {
            return vec![true; n];
        }
        let mut rng = rng_for(self.seed, &[0xD0]);
        (0..n).map(|_| rng.gen::<f64>() >= self.p).collect()
    }

    /// Affine correction `(a, b)` that restores zero mean and unit variance.
    pub fn affine(&self) -> (f64, f64) {
        let p = self.p;
        let a = ((1.0 - p) * (1.0 + p * ALPHA_PRIME * ALPHA_PRIME)).powf(-0.5);
        (a, -a * ALPHA_PRIME * p)
    }
}

pub fn alpha_dropout(x: &Grid3<f64>, mask: &DropoutMask) -> (Grid3<f64>, Vec<bool>) {
    let keep = mask.keep_flags(x.len());
    if mask.p == 0.0 {
        return (x.clone(), keep);
    }
    let (a, b) = mask.affine();
    let data = x
        .as_slice()
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| a * if k { v } else { ALPHA_PRIME } + b)
        .collect();
    (Grid3::from_vec(x.dims(), data).unwrap(), keep)
}

/// Bin `[start, end)` of each output cell, using floor/ceil bin edges.
pub fn pool_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = (i * input) / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

/// Explicit adaptive average pooling of a row-major `h x w` slice to `out x out`.
pub fn adaptive_avg_pool2d(slice: &[f64], h: usize, w: usize, out: usize) -> Vec<f64> {
    let bh = pool_bins(h, out);
    let bw = pool_bins(w, out);
    let mut res = Vec::with_capacity(out * out);
    for &(h0, h1) in &bh {
        for &(w0, w1) in &bw {
            let mut acc = 0.0;
            for r in h0..h1 {
                for c in w0..w1 {
                    acc += slice[r * w + c];
                }
            }
            res.push(acc / ((h1 - h0) * (w1 - w0)) as f64);
        }
    }
    res
}

/// One embedding row per depth slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceEmbeddingMatrix {
    pub rows: Array2<f64>,
}

/// Head weights specialized to one slice size.
pub struct PreparedHead<'a> {
    params: &'a ParamSet,
    layout: Layout,
    h: usize,
    w: usize,
    fused: Array2<f64>,
}

pub struct HeadCache {
    dims: [usize; 3],
    keep: Vec<bool>,
    slices: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
}

/// Accumulated head gradients; `fused` is folded back into `fc1` by [`HeadGrads::finish`].
pub struct HeadGrads {
    fused: Array2<f64>,
    b1: Vec<f64>,
    w2: Array2<f64>,
    b2: Vec<f64>,
    w3: Array2<f64>,
    b3: Vec<f64>,
}

fn fold_pool(fc1: &Array2<f64>, pool: usize, h: usize, w: usize) -> Array2<f64> {
    let hidden = fc1.nrows();
    let bh = pool_bins(h, pool);
    let bw = pool_bins(w, pool);
    let mut fused = Array2::<f64>::zeros((hidden, h * w));
    for o in 0..hidden {
        let src = fc1.row(o);
        let mut dst = fused.row_mut(o);
        for (a, &(h0, h1)) in bh.iter().enumerate() {
            for (b, &(w0, w1)) in bw.iter().enumerate() {
                let v = src[a * pool + b] / ((h1 - h0) * (w1 - w0)) as f64;
                for r in h0..h1 {
                    for c in w0..w1 {
                        dst[r * w + c] += v;
                    }
                }
            }
        }
    }
    fused
}

/// Adjoint of [`fold_pool`].
fn unfold_pool(d_fused: &Array2<f64>, pool: usize, h: usize, w: usize) -> Array2<f64> {
    let hidden = d_fused.nrows();
    let bh = pool_bins(h, pool);
    let bw = pool_bins(w, pool);
    let mut d_fc1 = Array2::<f64>::zeros((hidden, pool * pool));
    for o in 0..hidden {
        let src = d_fused.row(o);
        let mut dst = d_fc1.row_mut(o);
        for (a, &(h0, h1)) in bh.iter().enumerate() {
            for (b, &(w0, w1)) in bw.iter().enumerate() {
                let mut acc = 0.0;
                for r in h0..h1 {
                    for c in w0..w1 {
                        acc += src[r * w + c];
                    }
                }
                dst[a * pool + b] = acc / ((h1 - h0) * (w1 - w0)) as f64;
            }
        }
    }
    d_fc1
}

impl<'a> PreparedHead<'a> {
    pub fn new(params: &'a ParamSet, h: usize, w: usize) -> Self {
        let layout = params.layout();
        let fc1 = params.tensors[layout.fc[0].w].matrix().to_owned();
        let fused = fold_pool(&fc1, params.arch.pool_size, h, w);
        Self {
            params,
            layout,
            h,
            w,
            fused,
        }
    }

    pub fn forward(&self, q_ba: &Grid3<f64>, mask: &DropoutMask) -> Result<(SliceEmbeddingMatrix, HeadCache)> {
        let dims = q_ba.dims();
        if dims[0] != self.h || dims[1] != self.w {
            return Err(Error::InvalidShape(format!(
                "head prepared for {}x{} slices, got {:?}",
                self.h, self.w, dims
            )));
        }
        if q_ba.is_empty() {
            return Err(Error::InvalidShape("empty boundary-aware feature".into()));
        }
        let (dropped, keep) = alpha_dropout(q_ba, mask);
        let hw = dims[0] * dims[1];
        let mut slices = Array2::<f64>::zeros((dims[2], hw));
        for (i, &v) in dropped.as_slice().iter().enumerate() {
            slices[[i % dims[2], i / dims[2]]] = v;
        }
        let t = &self.params.tensors;
        let [l1, l2, l3] = self.layout.fc;
        let mut z1 = slices.dot(&self.fused.t());
        add_row_bias(&mut z1, &t[l1.b].data);
        let a1 = z1.mapv(leaky);
        let mut z2 = a1.dot(&t[l2.w].matrix().t());
        add_row_bias(&mut z2, &t[l2.b].data);
        let a2 = z2.mapv(leaky);
        let mut out = a2.dot(&t[l3.w].matrix().t());
        add_row_bias(&mut out, &t[l3.b].data);
        Ok((
            SliceEmbeddingMatrix { rows: out },
            HeadCache {
                dims,
                keep,
                slices,
                z1,
                a1,
                z2,
                a2,
            },
        ))
    }

    pub fn zero_grads(&self) -> HeadGrads {
        let t = &self.params.tensors;
        let [l1, l2, l3] = self.layout.fc;
        HeadGrads {
            fused: Array2::zeros(self.fused.raw_dim()),
            b1: vec![0.0; t[l1.b].data.len()],
            w2: Array2::zeros(t[l2.w].matrix().raw_dim()),
            b2: vec![0.0; t[l2.b].data.len()],
            w3: Array2::zeros(t[l3.w].matrix().raw_dim()),
            b3: vec![0.0; t[l3.b].data.len()],
        }
    }

    /// Returns the gradient with respect to the head input.
    pub fn backward(&self, cache: &HeadCache, d_out: &Array2<f64>, mask: &DropoutMask, acc: &mut HeadGrads) -> Grid3<f64> {
        let t = &self.params.tensors;
        let [_, l2, l3] = self.layout.fc;
        acc.w3 += &d_out.t().dot(&cache.a2);
        add_col_sums(&mut acc.b3, d_out);
        let mut dz2 = d_out.dot(&t[l3.w].matrix());
        dz2.zip_mut_with(&cache.z2, |g, &z| *g *= leaky_grad(z));
        acc.w2 += &dz2.t().dot(&cache.a1);
        add_col_sums(&mut acc.b2, &dz2);
        let mut dz1 = dz2.dot(&t[l2.w].matrix());
        dz1.zip_mut_with(&cache.z1, |g, &z| *g *= leaky_grad(z));
        acc.fused += &dz1.t().dot(&cache.slices);
        add_col_sums(&mut acc.b1, &dz1);
        let d_slices = dz1.dot(&self.fused);
        let (a, _) = if mask.p == 0.0 { (1.0, 0.0) } else { mask.affine() };
        let nd = cache.dims[2];
        let data = (0..cache.keep.len())
            .map(|i| {
                if cache.keep[i] {
                    a * d_slices[[i % nd, i / nd]]
                } else {
                    0.0
                }
            })
            .collect();
        Grid3::from_vec(cache.dims, data).unwrap()
    }
}

impl HeadGrads {
    pub fn finish(self, params: &ParamSet, h: usize, w: usize, grads: &mut ParamSet) {
        let layout = params.layout();
        let [l1, l2, l3] = layout.fc;
        let d_fc1 = unfold_pool(&self.fused, params.arch.pool_size, h, w);
        grads.add_to(l1.w, d_fc1.as_slice().unwrap());
        grads.add_to(l1.b, &self.b1);
        grads.add_to(l2.w, self.w2.as_slice().unwrap());
        grads.add_to(l2.b, &self.b2);
        grads.add_to(l3.w, self.w3.as_slice().unwrap());
        grads.add_to(l3.b, &self.b3);
    }
}

fn add_row_bias(m: &mut Array2<f64>, bias: &[f64]) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn add_col_sums(acc: &mut [f64], m: &Array2<f64>) {
    for row in m.axis_iter(Axis(0)) {
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
}

/// Embeds every depth slice of `q_ba`. Randomness enters only through `mask`.
pub fn project(q_ba: &Grid3<f64>, mask: &DropoutMask, params: &ParamSet) -> Result<SliceEmbeddingMatrix> {
    let dims = q_ba.dims();
    let head = PreparedHead::new(params, dims[0], dims[1]);
    Ok(head.forward(q_ba, mask)?.0)
}
