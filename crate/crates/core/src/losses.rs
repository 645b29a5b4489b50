//! Objective terms. Each `*_with_grad` returns the value together with analytic
//! gradients for every differentiable input; the plain functions return the value.

use std::sync::Once;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::model::{DualOutput, HiddenPattern, SliceEmbeddingMatrix};
use crate::rng::{rng_for, stream};
use crate::synth::AnnotatedCase;

/// Probability clamp used by the cross-entropy and Dice terms.
pub const PROB_EPS: f64 = 1e-7;
/// Norm floor for embedding normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// SDM regression weight inside the supervised loss.
    pub alpha: f64,
    /// Boundary-aware contrastive weight.
    pub lambda: f64,
    /// Pair-wise distillation weight.
    pub beta: f64,
    /// Consistency weight.
    pub gamma: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub ema_decay: f64,
    pub dropout_p: f64,
    /// Slices per InfoNCE denominator; `None` uses every slice in the mini-batch.
    pub batch_slices: Option<usize>,
    pub d_h: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda: 0.5,
            beta: 0.1,
            gamma: 0.1,
            tau: 0.5,
            ema_decay: 0.999,
            dropout_p: 0.1,
            batch_slices: None,
            d_h: 128,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [("alpha", self.alpha), ("lambda", self.lambda), ("beta", self.beta), ("gamma", self.gamma)];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative weight, got {w}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must be in [0, 1], got {}", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        if self.batch_slices == Some(0) || self.batch_slices == Some(1) || self.d_h == 0 {
            return Err(Error::Config("batch_slices must be >= 2 and d_h positive".into()));
        }
        Ok(())
    }
}

/// One iteration's loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sup: f64,
    pub contrast: f64,
    pub pd: f64,
    pub con: f64,
    pub total: f64,
    pub rampup: f64,
}

/// Unweighted inputs to [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub sup: f64,
    pub contrast: f64,
    pub pd: f64,
    pub con: f64,
}

#[inline]
fn clamp_prob(q: f64) -> (f64, bool) {
    if q < PROB_EPS {
        (PROB_EPS, false)
    } else if q > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, false)
    } else {
        (q, true)
    }
}

/// `0.5 * (soft Dice loss + mean binary cross-entropy)`.
pub fn seg_loss(q: &Grid3<f64>, y: &Grid3<u8>) -> Result<f64> {
    Ok(seg_loss_with_grad(q, y)?.0)
}

pub fn seg_loss_with_grad(q: &Grid3<f64>, y: &Grid3<u8>) -> Result<(f64, Grid3<f64>)> {
    q.ensure_same_dims(y)?;
    let n = q.len() as f64;
    let mut inter = 0.0;
    let mut sum_q = 0.0;
    let mut sum_y = 0.0;
    let mut bce = 0.0;
    for (&qv, &yv) in q.as_slice().iter().zip(y.as_slice()) {
        let (qc, _) = clamp_prob(qv);
        let yf = yv as f64;
        inter += qc * yf;
        sum_q += qc;
        sum_y += yf;
        bce -= yf * qc.ln() + (1.0 - yf) * (1.0 - qc).ln();
    }
    let s = sum_q + sum_y;
    let dice = 1.0 - 2.0 * inter / s;
    let value = 0.5 * (dice + bce / n);
    let grad = q
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&qv, &yv)| {
            let (qc, live) = clamp_prob(qv);
            if !live {
                return 0.0;
            }
            let yf = yv as f64;
            let d_dice = -2.0 * (yf * s - inter) / (s * s);
            let d_bce = -(yf / qc - (1.0 - yf) / (1.0 - qc)) / n;
            0.5 * (d_dice + d_bce)
        })
        .collect();
    Ok((value, Grid3::from_vec(q.dims(), grad)?))
}

pub fn mse(a: &Grid3<f64>, b: &Grid3<f64>) -> Result<f64> {
    a.ensure_same_dims(b)?;
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Gradients of the supervised loss for one case.
#[derive(Debug, Clone)]
pub struct SupervisedGrad {
    pub d_prob: Grid3<f64>,
    pub d_sdm: Grid3<f64>,
}

/// Batch mean of the segmentation loss plus `alpha` times the batch mean SDM MSE.
pub fn supervised_loss(outputs: &[DualOutput], labels: &[AnnotatedCase], alpha: f64) -> Result<f64> {
    Ok(supervised_loss_with_grad(outputs, labels, alpha)?.0)
}

pub fn supervised_loss_with_grad(
    outputs: &[DualOutput],
    labels: &[AnnotatedCase],
    alpha: f64,
) -> Result<(f64, Vec<SupervisedGrad>)> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("supervised loss needs a nonempty labeled batch".into()));
    }
    if outputs.len() != labels.len() {
        return Err(Error::shape(&[outputs.len()], &[labels.len()]));
    }
    let nb = outputs.len() as f64;
    let mut seg_sum = 0.0;
    let mut mse_sum = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (out, case) in outputs.iter().zip(labels) {
        let (seg, mut d_prob) = seg_loss_with_grad(&out.prob, &case.mask)?;
        out.sdm.ensure_same_dims(&case.sdm)?;
        let v = out.sdm.len() as f64;
        let mut sq = 0.0;
        let d_sdm: Vec<f64> = out
            .sdm
            .as_slice()
            .iter()
            .zip(case.sdm.as_slice())
            .map(|(p, t)| {
                sq += (p - t) * (p - t);
                alpha * 2.0 * (p - t) / (v * nb)
            })
            .collect();
        seg_sum += seg;
        mse_sum += sq / v;
        d_prob.as_mut_slice().iter_mut().for_each(|g| *g /= nb);
        grads.push(SupervisedGrad {
            d_prob,
            d_sdm: Grid3::from_vec(out.sdm.dims(), d_sdm)?,
        });
    }
    Ok((seg_sum / nb + alpha * mse_sum / nb, grads))
}

fn normalize_rows(m: &Array2<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = m.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect();
    let mut out = m.clone();
    for (mut row, &n) in out.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        let d = n.max(eps);
        row.mapv_inplace(|v| v / d);
    }
    (out, norms)
}

/// Pulls `d_unit` (gradient wrt normalized rows) back to the raw rows.
fn normalize_rows_backward(unit: &Array2<f64>, norms: &Array1<f64>, d_unit: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut out = d_unit.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = norms[i];
        if n > eps {
            let u = unit.row(i);
            let proj = u.dot(&d_unit.row(i));
            row.zip_mut_with(&u, |g, &uv| *g = (*g - uv * proj) / n);
        } else {
            row.mapv_inplace(|g| g / eps);
        }
    }
    out
}

/// `-log softmax` of the positive logit, with logits `anchor . pool_k / tau` on unit
/// vectors. Returns the value and the gradient wrt every logit.
fn nce_logits(anchor: ArrayView1<f64>, pool: &[ArrayView1<f64>], positive: usize, tau: f64) -> (f64, Vec<f64>) {
    let logits: Vec<f64> = pool.iter().map(|p| anchor.dot(p) / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let value = -(logits[positive] - max) + z.ln();
    let mut d: Vec<f64> = exps.iter().map(|e| e / z).collect();
    d[positive] -= 1.0;
    (value, d)
}

/// InfoNCE of `anchor` against `pool`, where `pool[positive]` is the positive.
/// Vectors are L2-normalized before the dot product.
#[derive(Debug, Clone)]
pub struct InfoNceGrad {
    pub value: f64,
    pub d_anchor: Array1<f64>,
    pub d_pool: Array2<f64>,
}

pub fn info_nce_indexed(anchor: &Array1<f64>, pool: &Array2<f64>, positive: usize, tau: f64) -> Result<InfoNceGrad> {
    if pool.nrows() < 2 {
        return Err(Error::InvalidArgument(format!("InfoNCE pool needs at least 2 vectors, got {}", pool.nrows())));
    }
    if positive >= pool.nrows() {
        return Err(Error::InvalidArgument("InfoNCE pool does not contain the positive".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if anchor.len() != pool.ncols() {
        return Err(Error::shape(&[anchor.len()], &[pool.ncols()]));
    }
    if anchor.iter().chain(pool.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("InfoNCE inputs".into()));
    }
    let a2 = anchor.clone().insert_axis(Axis(0));
    let (ua, na) = normalize_rows(&a2, NORM_EPS);
    let (up, np) = normalize_rows(pool, NORM_EPS);
    let views: Vec<_> = up.axis_iter(Axis(0)).collect();
    let (value, dl) = nce_logits(ua.row(0), &views, positive, tau);
    let mut d_ua = Array2::<f64>::zeros(ua.raw_dim());
    let mut d_up = Array2::<f64>::zeros(up.raw_dim());
    for (k, &g) in dl.iter().enumerate() {
        d_ua.row_mut(0).scaled_add(g / tau, &up.row(k));
        d_up.row_mut(k).scaled_add(g / tau, &ua.row(0));
    }
    Ok(InfoNceGrad {
        value,
        d_anchor: normalize_rows_backward(&ua, &na, &d_ua, NORM_EPS).row(0).to_owned(),
        d_pool: normalize_rows_backward(&up, &np, &d_up, NORM_EPS),
    })
}

/// InfoNCE with the positive identified by value; errors if the pool lacks it.
pub fn info_nce(anchor: &[f64], positive: &[f64], pool: &[Vec<f64>], tau: f64) -> Result<f64> {
    let idx = pool
        .iter()
        .position(|p| p.as_slice() == positive)
        .ok_or_else(|| Error::InvalidArgument("InfoNCE pool does not contain the positive".into()))?;
    let dim = anchor.len();
    if pool.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidArgument("InfoNCE vectors differ in length".into()));
    }
    let pool = Array2::from_shape_vec((pool.len(), dim), pool.concat()).unwrap();
    Ok(info_nce_indexed(&Array1::from(anchor.to_vec()), &pool, idx, tau)?.value)
}

#[derive(Debug, Clone)]
pub struct ContrastGrad {
    pub value: f64,
    pub d_teacher: Vec<Array2<f64>>,
    pub d_student: Vec<Array2<f64>>,
}

/// Denominator pools: for each global slice index, `b` indices including itself.
pub fn sample_pools(total: usize, b: usize, seed: u64) -> Vec<Vec<usize>> {
    if b >= total {
        return (0..total).map(|_| (0..total).collect()).collect();
    }
    let mut rng = rng_for(seed, &[stream::NEGATIVES]);
    (0..total)
        .map(|g| {
            let mut pool = vec![g];
            for i in sample(&mut rng, total - 1, b - 1).into_iter() {
                pool.push(if i >= g { i + 1 } else { i });
            }
            pool
        })
        .collect()
}

/// Symmetric boundary-aware contrastive loss over every (case, slice) positive pair.
/// Both directions of an anchor share one sampled pool of `b` slices.
pub fn boundary_contrast_loss(
    h_t: &[SliceEmbeddingMatrix],
    h_s: &[SliceEmbeddingMatrix],
    tau: f64,
    b: usize,
    seed: u64,
) -> Result<f64> {
    let t: Vec<_> = h_t.iter().map(|h| h.rows.clone()).collect();
    let s: Vec<_> = h_s.iter().map(|h| h.rows.clone()).collect();
    Ok(boundary_contrast_with_grad(&t, &s, tau, b, seed)?.value)
}

pub fn boundary_contrast_with_grad(
    h_t: &[Array2<f64>],
    h_s: &[Array2<f64>],
    tau: f64,
    b: usize,
    seed: u64,
) -> Result<ContrastGrad> {
    if h_t.len() != h_s.len() {
        return Err(Error::shape(&[h_t.len()], &[h_s.len()]));
    }
    for (a, c) in h_t.iter().zip(h_s) {
        if a.dim() != c.dim() {
            return Err(Error::shape(&[a.nrows(), a.ncols()], &[c.nrows(), c.ncols()]));
        }
    }
    let total: usize = h_t.iter().map(|h| h.nrows()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no positive slice pairs".into()));
    }
    let width = h_t[0].ncols();
    if h_t.iter().any(|h| h.ncols() != width) {
        return Err(Error::InvalidArgument("embedding widths differ across cases".into()));
    }
    if b < 2 || b > total {
        return Err(Error::InvalidArgument(format!("pool size {b} must be in [2, {total}]")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let stack = |hs: &[Array2<f64>]| {
        let views: Vec<_> = hs.iter().map(|h| h.view()).collect();
        ndarray::concatenate(Axis(0), &views).unwrap()
    };
    let all_t = stack(h_t);
    let all_s = stack(h_s);
    if all_t.iter().chain(all_s.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("slice embeddings".into()));
    }
    let (ut, nt) = normalize_rows(&all_t, NORM_EPS);
    let (us, ns) = normalize_rows(&all_s, NORM_EPS);
    let pools = sample_pools(total, b, seed);
    let mut d_ut = Array2::<f64>::zeros(ut.raw_dim());
    let mut d_us = Array2::<f64>::zeros(us.raw_dim());
    let scale = 1.0 / total as f64;
    let mut value = 0.0;
    for (g, pool) in pools.iter().enumerate() {
        // teacher anchor against student pool, then student anchor against teacher pool
        let sv: Vec<_> = pool.iter().map(|&k| us.row(k)).collect();
        let (l1, d1) = nce_logits(ut.row(g), &sv, 0, tau);
        let tv: Vec<_> = pool.iter().map(|&k| ut.row(k)).collect();
        let (l2, d2) = nce_logits(us.row(g), &tv, 0, tau);
        value += l1 + l2;
        for (i, &k) in pool.iter().enumerate() {
            let g1 = d1[i] * scale / tau;
            let g2 = d2[i] * scale / tau;
            d_ut.row_mut(g).scaled_add(g1, &us.row(k));
            d_us.row_mut(k).scaled_add(g1, &ut.row(g));
            d_us.row_mut(g).scaled_add(g2, &ut.row(k));
            d_ut.row_mut(k).scaled_add(g2, &us.row(g));
        }
    }
    let d_t = normalize_rows_backward(&ut, &nt, &d_ut, NORM_EPS);
    let d_s = normalize_rows_backward(&us, &ns, &d_us, NORM_EPS);
    let mut d_teacher = Vec::with_capacity(h_t.len());
    let mut d_student = Vec::with_capacity(h_t.len());
    let mut start = 0;
    for h in h_t {
        let r = h.nrows();
        d_teacher.push(d_t.slice(ndarray::s![start..start + r, ..]).to_owned());
        d_student.push(d_s.slice(ndarray::s![start..start + r, ..]).to_owned());
        start += r;
    }
    Ok(ContrastGrad {
        value: value * scale,
        d_teacher,
        d_student,
    })
}

#[derive(Debug, Clone)]
pub struct DistillGrad {
    pub value: f64,
    pub d_student: Vec<Array2<f64>>,
    pub d_teacher: Vec<Array2<f64>>,
}

/// Pair-wise distillation: per case, row `j` of the student is classified against
/// all teacher rows by cosine similarity; summed over rows, averaged over cases.
pub fn pairwise_distill_loss(v_s: &[HiddenPattern], v_t: &[HiddenPattern]) -> Result<f64> {
    let s: Vec<_> = v_s.iter().map(|v| v.rows.clone()).collect();
    let t: Vec<_> = v_t.iter().map(|v| v.rows.clone()).collect();
    Ok(pairwise_distill_with_grad(&s, &t)?.value)
}

pub fn pairwise_distill_with_grad(v_s: &[Array2<f64>], v_t: &[Array2<f64>]) -> Result<DistillGrad> {
    if v_s.is_empty() {
        return Err(Error::InvalidArgument("pair-wise distillation needs at least one case".into()));
    }
    if v_s.len() != v_t.len() {
        return Err(Error::shape(&[v_s.len()], &[v_t.len()]));
    }
    let m = v_s.len() as f64;
    let mut value = 0.0;
    let mut d_student = Vec::with_capacity(v_s.len());
    let mut d_teacher = Vec::with_capacity(v_s.len());
    for (case, (vs, vt)) in v_s.iter().zip(v_t).enumerate() {
        if vs.dim() != vt.dim() {
            return Err(Error::shape(&[vs.nrows(), vs.ncols()], &[vt.nrows(), vt.ncols()]));
        }
        let (us, ns) = normalize_rows(vs, 0.0);
        let (ut, nt) = normalize_rows(vt, 0.0);
        if let Some(j) = ns.iter().chain(nt.iter()).position(|&n| !(n > 0.0) || !n.is_finite()) {
            return Err(Error::Degenerate(format!(
                "zero or non-finite hidden row {} in case {case}; cosine similarity is undefined",
                j % vs.nrows()
            )));
        }
        let sim = us.dot(&ut.t());
        let mut d_sim = Array2::<f64>::zeros(sim.raw_dim());
        for (j, row) in sim.axis_iter(Axis(0)).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            value += -(row[j] - max) + z.ln();
            let mut drow = d_sim.row_mut(j);
            for (k, v) in row.iter().enumerate() {
                drow[k] = (v - max).exp() / z / m;
            }
            drow[j] -= 1.0 / m;
        }
        let d_us = d_sim.dot(&ut);
        let d_ut = d_sim.t().dot(&us);
        d_student.push(normalize_rows_backward(&us, &ns, &d_us, 0.0));
        d_teacher.push(normalize_rows_backward(&ut, &nt, &d_ut, 0.0));
    }
    Ok(DistillGrad {
        value: value / m,
        d_student,
        d_teacher,
    })
}

#[derive(Debug, Clone)]
pub struct ConsistencyGrad {
    pub value: f64,
    pub d_student: Vec<Grid3<f64>>,
    pub d_teacher: Vec<Grid3<f64>>,
}

/// Case-mean of the voxel-mean squared difference of probability maps.
pub fn consistency_loss(out_s: &[DualOutput], out_t: &[DualOutput]) -> Result<f64> {
    let s: Vec<_> = out_s.iter().map(|o| &o.prob).collect();
    let t: Vec<_> = out_t.iter().map(|o| &o.prob).collect();
    Ok(consistency_with_grad(&s, &t)?.value)
}

pub fn consistency_with_grad(prob_s: &[&Grid3<f64>], prob_t: &[&Grid3<f64>]) -> Result<ConsistencyGrad> {
    if prob_s.is_empty() {
        return Err(Error::InvalidArgument("consistency loss needs a nonempty unlabeled batch".into()));
    }
    if prob_s.len() != prob_t.len() {
        return Err(Error::shape(&[prob_s.len()], &[prob_t.len()]));
    }
    let m = prob_s.len() as f64;
    let mut value = 0.0;
    let mut d_student = Vec::with_capacity(prob_s.len());
    let mut d_teacher = Vec::with_capacity(prob_s.len());
    for (ps, pt) in prob_s.iter().zip(prob_t) {
        ps.ensure_same_dims(pt)?;
        let v = ps.len() as f64;
        let diff: Vec<f64> = ps.as_slice().iter().zip(pt.as_slice()).map(|(a, b)| a - b).collect();
        value += diff.iter().map(|d| d * d).sum::<f64>() / v;
        let g: Vec<f64> = diff.iter().map(|d| 2.0 * d / (v * m)).collect();
        d_teacher.push(Grid3::from_vec(ps.dims(), g.iter().map(|x| -x).collect())?);
        d_student.push(Grid3::from_vec(ps.dims(), g)?);
    }
    Ok(ConsistencyGrad {
        value: value / m,
        d_student,
        d_teacher,
    })
}

static RAMPUP_CLAMP: Once = Once::new();

/// Gaussian warm-up `exp(-5 (1 - t/t_max)^2)`; `t` is clamped to `[0, t_max]`.
pub fn rampup(t: usize, t_max: usize) -> f64 {
    if t_max == 0 {
        return 1.0;
    }
    let tc = if t > t_max {
        RAMPUP_CLAMP.call_once(|| log::warn!("rampup: t={t} exceeds t_max={t_max}; clamping"));
        t_max
    } else {
        t
    };
    let phase = 1.0 - tc as f64 / t_max as f64;
    (-5.0 * phase * phase).exp()
}

/// `sup + rampup(t) * (lambda*contrast + beta*pd + gamma*con)`.
pub fn total_loss(parts: LossParts, hp: &HyperParams, t: usize, t_max: usize) -> Result<LossReport> {
    for (name, v) in [("sup", parts.sup), ("contrast", parts.contrast), ("pd", parts.pd), ("con", parts.con)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term `{name}` = {v}")));
        }
    }
    let ramp = rampup(t, t_max);
    let unsup = hp.lambda * parts.contrast + hp.beta * parts.pd + hp.gamma * parts.con;
    Ok(LossReport {
        sup: parts.sup,
        contrast: parts.contrast,
        pd: parts.pd,
        con: parts.con,
        total: parts.sup + ramp * unsup,
        rampup: ramp,
    })
}

/// Partial derivatives of the total wrt `(sup, contrast, pd, con)`.
pub fn total_loss_grad(hp: &HyperParams, t: usize, t_max: usize) -> [f64; 4] {
    let ramp = rampup(t, t_max);
    [1.0, ramp * hp.lambda, ramp * hp.beta, ramp * hp.gamma]
}
