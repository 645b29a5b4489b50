//! Independent brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdistill::synth::{generate_cases, make_split, DatasetSplit, PhantomSpec};
use voxdistill::Grid3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(rng: &mut impl Rng, dims: [usize; 3], density: f64) -> Grid3<u8> {
    Grid3::from_fn(dims, |_, _, _| rng.gen_bool(density) as u8)
}

pub fn random_grid(rng: &mut impl Rng, dims: [usize; 3], lo: f64, hi: f64) -> Grid3<f64> {
    Grid3::from_fn(dims, |_, _, _| rng.gen_range(lo..hi))
}

fn dist(a: [usize; 3], b: [usize; 3], sp: [f64; 3]) -> f64 {
    (0..3)
        .map(|k| {
            let d = (a[k] as f64 - b[k] as f64) * sp[k];
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn voxels_where(mask: &Grid3<u8>, f: impl Fn(u8) -> bool) -> Vec<[usize; 3]> {
    (0..mask.len()).filter(|&i| f(mask.as_slice()[i])).map(|i| mask.coords(i)).collect()
}

/// O(V^2) nearest-opposite-voxel scan with per-sign normalization.
pub fn brute_sdm(mask: &Grid3<u8>, sp: [f64; 3]) -> Grid3<f64> {
    let inside = voxels_where(mask, |m| m != 0);
    let outside = voxels_where(mask, |m| m == 0);
    if inside.is_empty() {
        return Grid3::filled(mask.dims(), 1.0);
    }
    if outside.is_empty() {
        return Grid3::filled(mask.dims(), -1.0);
    }
    let raw: Vec<f64> = (0..mask.len())
        .map(|i| {
            let p = mask.coords(i);
            let others = if mask.as_slice()[i] != 0 { &outside } else { &inside };
            others.iter().map(|&q| dist(p, q, sp)).fold(f64::INFINITY, f64::min)
        })
        .collect();
    let max_of = |want: bool| {
        (0..mask.len())
            .filter(|&i| (mask.as_slice()[i] != 0) == want)
            .map(|i| raw[i])
            .fold(0.0, f64::max)
    };
    let (mi, mo) = (max_of(true), max_of(false));
    let data = (0..mask.len())
        .map(|i| if mask.as_slice()[i] != 0 { -raw[i] / mi } else { raw[i] / mo })
        .collect();
    Grid3::from_vec(mask.dims(), data).unwrap()
}

pub fn brute_surface(mask: &Grid3<u8>) -> Vec<[usize; 3]> {
    let dims = mask.dims();
    let mut out = Vec::new();
    for i in 0..mask.len() {
        if mask.as_slice()[i] == 0 {
            continue;
        }
        let p = mask.coords(i);
        let mut boundary = false;
        for axis in 0..3 {
            for step in [-1i64, 1] {
                let q = p[axis] as i64 + step;
                if q < 0 || q >= dims[axis] as i64 {
                    boundary = true;
                } else {
                    let mut n = p;
                    n[axis] = q as usize;
                    if mask.get(n[0], n[1], n[2]) == 0 {
                        boundary = true;
                    }
                }
            }
        }
        if boundary {
            out.push(p);
        }
    }
    out
}

/// O(S^2) pooled symmetric surface distances: (mean, 95th percentile).
pub fn brute_surface_distances(a: &Grid3<u8>, b: &Grid3<u8>, sp: [f64; 3]) -> (f64, f64) {
    let sa = brute_surface(a);
    let sb = brute_surface(b);
    let nearest = |p: [usize; 3], set: &[[usize; 3]]| set.iter().map(|&q| dist(p, q, sp)).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = sa.iter().map(|&p| nearest(p, &sb)).collect();
    all.extend(sb.iter().map(|&p| nearest(p, &sa)));
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let pos = 0.95 * (all.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let p95 = all[lo] + (all[hi] - all[lo]) * (pos - lo as f64);
    (mean, p95)
}

/// Solid axis-aligned ellipsoid.
pub fn ellipsoid(dims: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> Grid3<u8> {
    Grid3::from_fn(dims, |h, w, d| {
        let p = [h as f64, w as f64, d as f64];
        let q: f64 = (0..3).map(|k| ((p[k] - center[k]) / radii[k]).powi(2)).sum();
        (q <= 1.0) as u8
    })
}

pub fn random_ellipsoid(rng: &mut impl Rng, dims: [usize; 3]) -> Grid3<u8> {
    let mut center = [0.0; 3];
    let mut radii = [0.0; 3];
    for k in 0..3 {
        let n = dims[k] as f64;
        radii[k] = rng.gen_range(0.15 * n..0.35 * n);
        center[k] = rng.gen_range(radii[k]..n - 1.0 - radii[k]);
    }
    ellipsoid(dims, center, radii)
}

/// Max over entries of `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Phantom split used by the end-to-end tests.
pub fn phantom_split(shape: [usize; 3], n_labeled: usize, n_unlabeled: usize, n_test: usize, seed: u64) -> DatasetSplit {
    let cases = generate_cases(n_labeled + n_unlabeled + n_test, shape, seed, &PhantomSpec::default()).unwrap();
    make_split(cases, n_labeled, n_unlabeled, n_test, seed).unwrap()
}
