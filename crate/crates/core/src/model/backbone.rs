//! V-Net-style residual encoder-decoder with a sigmoid probability head and a
//! tanh SDM head sharing the decoder trunk.

use ndarray::Array2;

use super::layers::*;
use super::params::{Layout, ParamSet};
use crate::error::{Error, Result};
use crate::grid::{Dims, Grid3};

/// Probability map in `(0, 1)` and SDM map in `(-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualOutput {
    pub prob: Grid3<f64>,
    pub sdm: Grid3<f64>,
}

/// Bottleneck features flattened over space: one row per encoder cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenPattern {
    pub rows: Array2<f64>,
}

impl HiddenPattern {
    pub fn num_rows(&self) -> usize {
        self.rows.nrows()
    }
}

struct EncLevel {
    z_down: Array2<f64>,
    d: Array2<f64>,
    z_conv: Array2<f64>,
}

struct DecLevel {
    g_in: Array2<f64>,
    z_up: Array2<f64>,
    u: Array2<f64>,
    z_conv: Array2<f64>,
}

/// Activations kept for the backward pass.
pub struct BackboneCache {
    dims: Vec<Dims>,
    x: Array2<f64>,
    z0: Array2<f64>,
    enc_out: Vec<Array2<f64>>,
    enc: Vec<EncLevel>,
    dec: Vec<DecLevel>,
    g: Array2<f64>,
    prob: Vec<f64>,
    sdm: Vec<f64>,
}

fn check_input(params: &ParamSet, x: &Grid3<f64>) -> Result<Vec<Dims>> {
    let dims = x.dims();
    let f = params.arch.downsampling();
    if let Some(axis) = (0..3).find(|&a| dims[a] % f != 0 || dims[a] == 0) {
        return Err(Error::InvalidShape(format!(
            "input {dims:?}: axis {axis} must be a positive multiple of {f} (2^{} levels)",
            params.arch.levels
        )));
    }
    if params.arch.in_channels != 1 {
        return Err(Error::InvalidShape("backbone expects single-channel volumes".into()));
    }
    let mut all = vec![dims];
    for _ in 0..params.arch.levels {
        all.push(half_dims(*all.last().unwrap()));
    }
    Ok(all)
}

fn run(params: &ParamSet, layout: &Layout, x: &Grid3<f64>) -> Result<BackboneCache> {
    let dims = check_input(params, x)?;
    let t = &params.tensors;
    let n = x.len();
    let xin = Array2::from_shape_vec((1, n), x.as_slice().to_vec()).unwrap();
    let z0 = conv3_forward(&xin, dims[0], t[layout.enc0.w].matrix(), &t[layout.enc0.b].data);
    let mut enc_out = vec![leaky_map(&z0)];
    let mut enc = Vec::with_capacity(params.arch.levels);
    for l in 1..=params.arch.levels {
        let (dl, el) = (layout.down[l - 1], layout.enc[l - 1]);
        let prev = enc_out.last().unwrap();
        let z_down = down_forward(prev, dims[l - 1], t[dl.w].matrix(), &t[dl.b].data);
        let d = leaky_map(&z_down);
        let z_conv = conv3_forward(&d, dims[l], t[el.w].matrix(), &t[el.b].data);
        let e = leaky_map(&z_conv) + &d;
        enc.push(EncLevel { z_down, d, z_conv });
        enc_out.push(e);
    }
    let mut g = enc_out.last().unwrap().clone();
    let mut dec = Vec::with_capacity(params.arch.levels);
    for (step, l) in (0..params.arch.levels).rev().enumerate() {
        let (ul, cl) = (layout.up[step], layout.dec[step]);
        let z_up = up_forward(&g, dims[l + 1], t[ul.w].matrix(), &t[ul.b].data);
        let u = leaky_map(&z_up) + &enc_out[l];
        let z_conv = conv3_forward(&u, dims[l], t[cl.w].matrix(), &t[cl.b].data);
        let g_out = leaky_map(&z_conv) + &u;
        dec.push(DecLevel {
            g_in: g,
            z_up,
            u,
            z_conv,
        });
        g = g_out;
    }
    let zp = point_forward(&g, t[layout.prob.w].matrix(), &t[layout.prob.b].data);
    let zs = point_forward(&g, t[layout.sdm.w].matrix(), &t[layout.sdm.b].data);
    let prob = zp.iter().map(|&z| sigmoid(z)).collect();
    let sdm = zs.iter().map(|&z| z.tanh()).collect();
    Ok(BackboneCache {
        dims,
        x: xin,
        z0,
        enc_out,
        enc,
        dec,
        g,
        prob,
        sdm,
    })
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl BackboneCache {
    pub fn output(&self) -> DualOutput {
        let d = self.dims[0];
        DualOutput {
            prob: Grid3::from_vec(d, self.prob.clone()).unwrap(),
            sdm: Grid3::from_vec(d, self.sdm.clone()).unwrap(),
        }
    }

    pub fn hidden(&self) -> HiddenPattern {
        HiddenPattern {
            rows: self.enc_out.last().unwrap().t().to_owned(),
        }
    }
}

/// Deterministic inference pass.
pub fn forward(params: &ParamSet, x: &Grid3<f64>) -> Result<(DualOutput, HiddenPattern)> {
    let cache = run(params, &params.layout(), x)?;
    Ok((cache.output(), cache.hidden()))
}

/// Forward pass that keeps what [`backward`] needs.
pub fn forward_train(params: &ParamSet, layout: &Layout, x: &Grid3<f64>) -> Result<BackboneCache> {
    run(params, layout, x)
}

/// Upstream gradients for one case. Missing entries count as zero.
#[derive(Default)]
pub struct BackboneGrad<'a> {
    pub d_prob: Option<&'a [f64]>,
    pub d_sdm: Option<&'a [f64]>,
    pub d_hidden: Option<&'a Array2<f64>>,
}

/// Accumulates parameter gradients of one case into `grads`.
pub fn backward(params: &ParamSet, layout: &Layout, cache: &BackboneCache, up: &BackboneGrad, grads: &mut ParamSet) {
    let t = &params.tensors;
    let n = cache.prob.len();
    let c0 = cache.g.nrows();
    let mut dg = Array2::<f64>::zeros((c0, n));
    if let Some(dp) = up.d_prob {
        let dz: Vec<f64> = dp.iter().zip(&cache.prob).map(|(g, p)| g * p * (1.0 - p)).collect();
        let dz = Array2::from_shape_vec((1, n), dz).unwrap();
        let gr = point_backward(&cache.g, t[layout.prob.w].matrix(), &dz);
        grads.add_to(layout.prob.w, gr.dw.as_slice().unwrap());
        grads.add_to(layout.prob.b, &gr.db);
        dg += &gr.dx;
    }
    if let Some(ds) = up.d_sdm {
        let dz: Vec<f64> = ds.iter().zip(&cache.sdm).map(|(g, s)| g * (1.0 - s * s)).collect();
        let dz = Array2::from_shape_vec((1, n), dz).unwrap();
        let gr = point_backward(&cache.g, t[layout.sdm.w].matrix(), &dz);
        grads.add_to(layout.sdm.w, gr.dw.as_slice().unwrap());
        grads.add_to(layout.sdm.b, &gr.db);
        dg += &gr.dx;
    }

    let levels = params.arch.levels;
    let mut d_enc: Vec<Option<Array2<f64>>> = vec![None; levels + 1];
    for (step, l) in (0..levels).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
        let lvl = &cache.dec[step];
        let (ul, cl) = (layout.up[step], layout.dec[step]);
        // g_out = leaky(z_conv) + u
        let dz = leaky_backward(&lvl.z_conv, &dg);
        let gr = conv3_backward(&lvl.u, cache.dims[l], t[cl.w].matrix(), &dz);
        grads.add_to(cl.w, gr.dw.as_slice().unwrap());
        grads.add_to(cl.b, &gr.db);
        let du = dg + &gr.dx;
        // u = leaky(z_up) + enc_out[l]
        d_enc[l] = Some(du.clone());
        let dz = leaky_backward(&lvl.z_up, &du);
        let gr = up_backward(&lvl.g_in, cache.dims[l + 1], t[ul.w].matrix(), &dz);
        grads.add_to(ul.w, gr.dw.as_slice().unwrap());
        grads.add_to(ul.b, &gr.db);
        dg = gr.dx;
    }

    let mut de = dg;
    if let Some(dh) = up.d_hidden {
        de += &dh.t();
    }
    for l in (1..=levels).rev() {
        let lvl = &cache.enc[l - 1];
        let (dl, el) = (layout.down[l - 1], layout.enc[l - 1]);
        // e_l = leaky(z_conv) + d
        let dz = leaky_backward(&lvl.z_conv, &de);
        let gr = conv3_backward(&lvl.d, cache.dims[l], t[el.w].matrix(), &dz);
        grads.add_to(el.w, gr.dw.as_slice().unwrap());
        grads.add_to(el.b, &gr.db);
        let dd = de + &gr.dx;
        let dz = leaky_backward(&lvl.z_down, &dd);
        let gr = down_backward(&cache.enc_out[l - 1], cache.dims[l - 1], t[dl.w].matrix(), &dz);
        grads.add_to(dl.w, gr.dw.as_slice().unwrap());
        grads.add_to(dl.b, &gr.db);
        de = gr.dx;
        if let Some(skip) = d_enc[l - 1].take() {
            de += &skip;
        }
    }
    let dz = leaky_backward(&cache.z0, &de);
    let gr = conv3_backward(&cache.x, cache.dims[0], t[layout.enc0.w].matrix(), &dz);
    grads.add_to(layout.enc0.w, gr.dw.as_slice().unwrap());
    grads.add_to(layout.enc0.b, &gr.db);
}
