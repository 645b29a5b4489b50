//! Exact Euclidean distance transform on voxel centers (separable lower-envelope
//! method), with per-axis spacing.

use crate::grid::{Dims, Grid3};

/// Squared distance from every voxel to the nearest voxel where `feature` is true.
/// Voxels have `f64::INFINITY` when the feature set is empty.
pub fn squared_edt(feature: &Grid3<bool>, spacing: [f64; 3]) -> Grid3<f64> {
    let dims = feature.dims();
    let mut g: Vec<f64> = feature
        .as_slice()
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in 0..3 {
        transform_axis(&mut g, dims, axis, spacing[axis]);
    }
    Grid3::from_vec(dims, g).expect("edt preserves shape")
}

fn transform_axis(g: &mut [f64], dims: Dims, axis: usize, spacing: f64) {
    let n = dims[axis];
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let (o1, o2) = match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0], dims[1]),
    };
    for a in 0..o1 {
        for b in 0..o2 {
            let base = match axis {
                0 => a * dims[2] + b,
                1 => a * dims[1] * dims[2] + b,
                _ => (a * dims[1] + b) * dims[2],
            };
            for (i, slot) in line.iter_mut().enumerate() {
                *slot = g[base + i * stride];
            }
            envelope_1d(&line, spacing, &mut out, &mut v, &mut z);
            for (i, value) in out.iter().enumerate() {
                g[base + i * stride] = *value;
            }
        }
    }
}

fn envelope_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * s;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = pos(q);
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let xp = pos(p);
            let inter = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if inter <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = inter;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        let xq = pos(q);
        while z[j + 1] < xq {
            j += 1;
        }
        let p = v[j];
        let d = xq - pos(p);
        *o = d * d + f[p];
    }
}
