//! Sliding-window inference, overlap and surface-distance metrics, and the paired
//! one-sided t-test used to compare methods.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::edt::squared_edt;
use crate::error::{Error, Result};
use crate::grid::{Dims, Grid3};
use crate::model::{forward, ParamSet};
use crate::synth::{AnnotatedCase, Volume};

/// Column headers of the per-case metrics CSV.
pub const METRIC_COLUMNS: [&str; 4] = ["Dice[%]", "Jaccard[%]", "ASD[voxel]", "95HD[voxel]"];

/// Window origins along one axis; the last window is clamped to the boundary.
pub fn window_starts(n: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window < n {
        starts.push(s);
        s += stride;
    }
    starts.push(n - window);
    starts.dedup();
    starts
}

fn check_tiling(dims: Dims, window: Dims, stride: Dims) -> Result<()> {
    for a in 0..3 {
        if window[a] == 0 || window[a] > dims[a] {
            return Err(Error::InvalidShape(format!(
                "window {window:?} does not fit volume {dims:?} (axis {a})"
            )));
        }
        if stride[a] == 0 {
            return Err(Error::InvalidArgument(format!("stride {stride:?} must be >= 1 on every axis")));
        }
    }
    Ok(())
}

/// Every window origin, in `h`-major order.
pub fn window_origins(dims: Dims, window: Dims, stride: Dims) -> Result<Vec<Dims>> {
    check_tiling(dims, window, stride)?;
    let per: Vec<Vec<usize>> = (0..3).map(|a| window_starts(dims[a], window[a], stride[a])).collect();
    let mut out = Vec::new();
    for &h in &per[0] {
        for &w in &per[1] {
            for &d in &per[2] {
                out.push([h, w, d]);
            }
        }
    }
    Ok(out)
}

/// Number of windows covering each voxel.
pub fn coverage_counts(dims: Dims, window: Dims, stride: Dims) -> Result<Grid3<u32>> {
    let mut counts = Grid3::filled(dims, 0u32);
    for o in window_origins(dims, window, stride)? {
        for h in o[0]..o[0] + window[0] {
            for w in o[1]..o[1] + window[1] {
                for d in o[2]..o[2] + window[2] {
                    let i = counts.index(h, w, d);
                    counts.as_mut_slice()[i] += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Voxel-wise mean of the probability predictions of overlapping windows.
pub fn sliding_window_infer(params: &ParamSet, volume: &Volume, window: Dims, stride: Dims) -> Result<Grid3<f64>> {
    let dims = volume.dims();
    let origins = window_origins(dims, window, stride)?;
    let preds: Vec<Grid3<f64>> = origins
        .par_iter()
        .map(|&o| Ok(forward(params, &volume.voxels().crop(o, window)?)?.0.prob))
        .collect::<Result<_>>()?;
    let mut sum = Grid3::zeros(dims);
    let mut count = Grid3::filled(dims, 0u32);
    for (o, p) in origins.iter().zip(&preds) {
        for h in 0..window[0] {
            for w in 0..window[1] {
                for d in 0..window[2] {
                    let i = sum.index(o[0] + h, o[1] + w, o[2] + d);
                    sum.as_mut_slice()[i] += p.get(h, w, d);
                    count.as_mut_slice()[i] += 1;
                }
            }
        }
    }
    let data = sum
        .as_slice()
        .iter()
        .zip(count.as_slice())
        .map(|(s, &c)| s / c as f64)
        .collect();
    Grid3::from_vec(dims, data)
}

pub fn threshold(prob: &Grid3<f64>) -> Grid3<u8> {
    prob.map(|p| (p >= 0.5) as u8)
}

/// Dice and Jaccard in percent; both masks empty scores `(100, 100)`.
pub fn dice_jaccard(pred: &Grid3<u8>, truth: &Grid3<u8>) -> Result<(f64, f64)> {
    pred.ensure_same_dims(truth)?;
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
        let (p, t) = (p != 0, t != 0);
        inter += (p && t) as usize;
        np += p as usize;
        nt += t as usize;
    }
    if np + nt == 0 {
        return Ok((100.0, 100.0));
    }
    let union = np + nt - inter;
    Ok((
        200.0 * inter as f64 / (np + nt) as f64,
        100.0 * inter as f64 / union as f64,
    ))
}

/// Mask voxels with at least one face neighbour outside the mask. Voxels on the
/// grid border count as touching background.
pub fn surface_mask(mask: &Grid3<u8>) -> Grid3<bool> {
    let [nh, nw, nd] = mask.dims();
    Grid3::from_fn(mask.dims(), |h, w, d| {
        if mask.get(h, w, d) == 0 {
            return false;
        }
        let outside = |hh: isize, ww: isize, dd: isize| {
            hh < 0
                || ww < 0
                || dd < 0
                || hh >= nh as isize
                || ww >= nw as isize
                || dd >= nd as isize
                || mask.get(hh as usize, ww as usize, dd as usize) == 0
        };
        let (h, w, d) = (h as isize, w as isize, d as isize);
        outside(h - 1, w, d)
            || outside(h + 1, w, d)
            || outside(h, w - 1, d)
            || outside(h, w + 1, d)
            || outside(h, w, d - 1)
            || outside(h, w, d + 1)
    })
}

/// Linear interpolation between order statistics at rank `q * (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn directed(from: &Grid3<bool>, to: &Grid3<bool>, spacing: [f64; 3]) -> Vec<f64> {
    let dist = squared_edt(to, spacing);
    from.as_slice()
        .iter()
        .zip(dist.as_slice())
        .filter(|(&s, _)| s)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// Pooled symmetric surface distances: `(ASD, 95HD)` in units of `spacing`.
pub fn surface_distances(pred: &Grid3<u8>, truth: &Grid3<u8>, spacing: [f64; 3]) -> Result<(f64, f64)> {
    pred.ensure_same_dims(truth)?;
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    let empty_p = pred.count_ones() == 0;
    let empty_t = truth.count_ones() == 0;
    if empty_p || empty_t {
        let side = match (empty_p, empty_t) {
            (true, true) => "both prediction and ground truth are",
            (true, false) => "prediction is",
            _ => "ground truth is",
        };
        return Err(Error::Degenerate(format!("surface distance undefined: {side} empty")));
    }
    let sp = surface_mask(pred);
    let st = surface_mask(truth);
    let mut all = directed(&sp, &st, spacing);
    all.extend(directed(&st, &sp, spacing));
    let asd = all.iter().sum::<f64>() / all.len() as f64;
    all.sort_by(|a, b| a.total_cmp(b));
    Ok((asd, percentile(&all, 0.95)))
}

/// One-sided paired t-test p-value for the alternative `mean(a - b) > 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(&[a.len()], &[b.len()]));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("paired t-test needs >= 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired t-test scores".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(1.0 - dist.cdf(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: usize,
    pub dice: f64,
    pub jaccard: f64,
    /// `NaN` when either mask is empty.
    pub asd: f64,
    pub hd95: f64,
}

/// Case means; surface metrics average only the cases where they are defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub jaccard: f64,
    pub asd: f64,
    pub hd95: f64,
    pub surface_defined_cases: usize,
    pub per_case: Vec<CaseMetrics>,
}

pub fn case_metrics(id: usize, pred: &Grid3<u8>, truth: &Grid3<u8>, spacing: [f64; 3]) -> Result<CaseMetrics> {
    let (dice, jaccard) = dice_jaccard(pred, truth)?;
    let (asd, hd95) = match surface_distances(pred, truth, spacing) {
        Ok(v) => v,
        Err(Error::Degenerate(_)) => (f64::NAN, f64::NAN),
        Err(e) => return Err(e),
    };
    Ok(CaseMetrics {
        id,
        dice,
        jaccard,
        asd,
        hd95,
    })
}

impl MetricsReport {
    pub fn from_cases(per_case: Vec<CaseMetrics>) -> Result<Self> {
        if per_case.is_empty() {
            return Err(Error::InvalidArgument("no cases to aggregate".into()));
        }
        let n = per_case.len() as f64;
        let defined: Vec<_> = per_case.iter().filter(|c| c.asd.is_finite()).collect();
        let k = defined.len();
        let mean_of = |f: &dyn Fn(&CaseMetrics) -> f64| -> f64 {
            if k == 0 {
                f64::NAN
            } else {
                defined.iter().map(|c| f(c)).sum::<f64>() / k as f64
            }
        };
        Ok(Self {
            dice: per_case.iter().map(|c| c.dice).sum::<f64>() / n,
            jaccard: per_case.iter().map(|c| c.jaccard).sum::<f64>() / n,
            asd: mean_of(&|c| c.asd),
            hd95: mean_of(&|c| c.hd95),
            surface_defined_cases: k,
            per_case,
        })
    }

    pub fn dice_scores(&self) -> Vec<f64> {
        self.per_case.iter().map(|c| c.dice).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("case,{}\n", METRIC_COLUMNS.join(","));
        for c in &self.per_case {
            out.push_str(&format!("{},{},{},{},{}\n", c.id, c.dice, c.jaccard, c.asd, c.hd95));
        }
        out
    }

    /// Aggregate JSON keyed by the metric column names.
    pub fn to_json(&self) -> serde_json::Value {
        let num = |v: f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::Value::Null };
        serde_json::json!({
            METRIC_COLUMNS[0]: num(self.dice),
            METRIC_COLUMNS[1]: num(self.jaccard),
            METRIC_COLUMNS[2]: num(self.asd),
            METRIC_COLUMNS[3]: num(self.hd95),
            "cases": self.per_case.len(),
            "surface_defined_cases": self.surface_defined_cases,
        })
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv())?;
        std::fs::write(json_path, serde_json::to_string_pretty(&self.to_json())? + "\n")?;
        Ok(())
    }
}

/// Sliding-window prediction, thresholding at 0.5 and all four metrics per case.
pub fn evaluate_cases(params: &ParamSet, cases: &[AnnotatedCase], window: Dims, stride: Dims) -> Result<MetricsReport> {
    let per_case = cases
        .iter()
        .map(|c| {
            let prob = sliding_window_infer(params, &c.volume, window, stride)?;
            case_metrics(c.id, &threshold(&prob), &c.mask, [1.0; 3])
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_cases(per_case)
}
