//! 3D convolution primitives on channel-major feature maps `(C, H*W*D)`.
//!
//! Every forward has a matching backward that returns input and parameter
//! gradients; nothing here keeps state between calls.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};

use crate::grid::Dims;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Upper bound on im2col buffer entries per chunk.
const IM2COL_BUDGET: usize = 1 << 21;

#[inline]
pub fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

#[inline]
pub fn leaky_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn leaky_map(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(leaky)
}

/// `dz = dy * leaky'(z)`.
pub fn leaky_backward(z: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dz = dy.clone();
    dz.zip_mut_with(z, |g, &zv| *g *= leaky_grad(zv));
    dz
}

fn add_bias(y: &mut Array2<f64>, bias: &[f64]) {
    for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bias) {
        row.mapv_inplace(|v| v + b);
    }
}

fn bias_grad(dy: &Array2<f64>) -> Vec<f64> {
    dy.axis_iter(Axis(0)).map(|r| r.sum()).collect()
}

fn planes_per_chunk(rows: usize, dims: Dims) -> usize {
    let plane = dims[1] * dims[2];
    (IM2COL_BUDGET / (rows * plane).max(1)).clamp(1, dims[0])
}

/// Fills `cols` (rows `ci*27 + k`) for output planes `h0..h1` of a 3x3x3 same-padded conv.
fn im2col3(x: &[f64], cin: usize, dims: Dims, h0: usize, h1: usize, cols: &mut [f64]) {
    let [nh, nw, nd] = dims;
    let n = nh * nw * nd;
    let nc = (h1 - h0) * nw * nd;
    for ci in 0..cin {
        let xs = &x[ci * n..(ci + 1) * n];
        for kh in 0..3 {
            for kw in 0..3 {
                for kd in 0..3 {
                    let row = ci * 27 + (kh * 3 + kw) * 3 + kd;
                    let dst_row = &mut cols[row * nc..(row + 1) * nc];
                    for h in h0..h1 {
                        let sh = h as isize + kh as isize - 1;
                        for w in 0..nw {
                            let sw = w as isize + kw as isize - 1;
                            let dst = &mut dst_row[((h - h0) * nw + w) * nd..((h - h0) * nw + w + 1) * nd];
                            if sh < 0 || sh >= nh as isize || sw < 0 || sw >= nw as isize {
                                dst.fill(0.0);
                                continue;
                            }
                            let src = &xs[(sh as usize * nw + sw as usize) * nd..(sh as usize * nw + sw as usize + 1) * nd];
                            match kd {
                                0 => {
                                    dst[0] = 0.0;
                                    dst[1..].copy_from_slice(&src[..nd - 1]);
                                }
                                1 => dst.copy_from_slice(src),
                                _ => {
                                    dst[..nd - 1].copy_from_slice(&src[1..]);
                                    dst[nd - 1] = 0.0;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates `cols` back into `dx`.
fn col2im3(cols: &[f64], cin: usize, dims: Dims, h0: usize, h1: usize, dx: &mut [f64]) {
    let [nh, nw, nd] = dims;
    let n = nh * nw * nd;
    let nc = (h1 - h0) * nw * nd;
    for ci in 0..cin {
        let xs = &mut dx[ci * n..(ci + 1) * n];
        for kh in 0..3 {
            for kw in 0..3 {
                for kd in 0..3 {
                    let row = ci * 27 + (kh * 3 + kw) * 3 + kd;
                    let src_row = &cols[row * nc..(row + 1) * nc];
                    for h in h0..h1 {
                        let sh = h as isize + kh as isize - 1;
                        if sh < 0 || sh >= nh as isize {
                            continue;
                        }
                        for w in 0..nw {
                            let sw = w as isize + kw as isize - 1;
                            if sw < 0 || sw >= nw as isize {
                                continue;
                            }
                            let src = &src_row[((h - h0) * nw + w) * nd..((h - h0) * nw + w + 1) * nd];
                            let base = (sh as usize * nw + sw as usize) * nd;
                            let dst = &mut xs[base..base + nd];
                            match kd {
                                0 => {
                                    for (o, v) in dst[..nd - 1].iter_mut().zip(&src[1..]) {
                                        *o += v;
                                    }
                                }
                                1 => {
                                    for (o, v) in dst.iter_mut().zip(src) {
                                        *o += v;
                                    }
                                }
                                _ => {
                                    for (o, v) in dst[1..].iter_mut().zip(&src[..nd - 1]) {
                                        *o += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3x3 convolution, stride 1, zero padding 1. `w` is `(cout, cin*27)`.
pub fn conv3_forward(x: &Array2<f64>, dims: Dims, w: ArrayView2<f64>, bias: &[f64]) -> Array2<f64> {
    let cin = x.nrows();
    let cout = w.nrows();
    let n = x.ncols();
    let xs = x.as_slice().expect("standard layout");
    let plane = dims[1] * dims[2];
    let step = planes_per_chunk(cin * 27, dims);
    let mut y = Array2::<f64>::zeros((cout, n));
    let mut buf = vec![0.0; cin * 27 * step * plane];
    let mut h0 = 0;
    while h0 < dims[0] {
        let h1 = (h0 + step).min(dims[0]);
        let nc = (h1 - h0) * plane;
        let cols_slice = &mut buf[..cin * 27 * nc];
        im2col3(xs, cin, dims, h0, h1, cols_slice);
        let cols = ArrayView2::from_shape((cin * 27, nc), &*cols_slice).unwrap();
        let mut yc = y.slice_mut(s![.., h0 * plane..h1 * plane]);
        general_mat_mul(1.0, &w, &cols, 0.0, &mut yc);
        h0 = h1;
    }
    add_bias(&mut y, bias);
    y
}

pub struct ConvGrads {
    pub dx: Array2<f64>,
    pub dw: Array2<f64>,
    pub db: Vec<f64>,
}

pub fn conv3_backward(x: &Array2<f64>, dims: Dims, w: ArrayView2<f64>, dy: &Array2<f64>) -> ConvGrads {
    let cin = x.nrows();
    let n = x.ncols();
    let xs = x.as_slice().expect("standard layout");
    let plane = dims[1] * dims[2];
    let step = planes_per_chunk(cin * 27, dims);
    let mut dx = vec![0.0; cin * n];
    let mut dw = Array2::<f64>::zeros(w.raw_dim());
    let mut buf = vec![0.0; cin * 27 * step * plane];
    let mut dbuf = vec![0.0; cin * 27 * step * plane];
    let mut h0 = 0;
    while h0 < dims[0] {
        let h1 = (h0 + step).min(dims[0]);
        let nc = (h1 - h0) * plane;
        let cols_slice = &mut buf[..cin * 27 * nc];
        im2col3(xs, cin, dims, h0, h1, cols_slice);
        let cols = ArrayView2::from_shape((cin * 27, nc), &*cols_slice).unwrap();
        let dyc = dy.slice(s![.., h0 * plane..h1 * plane]);
        general_mat_mul(1.0, &dyc, &cols.t(), 1.0, &mut dw);
        {
            let dcols_slice = &mut dbuf[..cin * 27 * nc];
            let mut dcols = ndarray::ArrayViewMut2::from_shape((cin * 27, nc), dcols_slice).unwrap();
            general_mat_mul(1.0, &w.t(), &dyc, 0.0, &mut dcols);
        }
        col2im3(&dbuf[..cin * 27 * nc], cin, dims, h0, h1, &mut dx);
        h0 = h1;
    }
    ConvGrads {
        dx: Array2::from_shape_vec((cin, n), dx).unwrap(),
        dw,
        db: bias_grad(dy),
    }
}

pub fn half_dims(dims: Dims) -> Dims {
    [dims[0] / 2, dims[1] / 2, dims[2] / 2]
}

/// Gathers non-overlapping 2x2x2 blocks: row `ci*8 + k`, column = output voxel.
fn block_gather(x: &Array2<f64>, dims: Dims) -> Array2<f64> {
    let cin = x.nrows();
    let od = half_dims(dims);
    let no = od[0] * od[1] * od[2];
    let mut cols = Array2::<f64>::zeros((cin * 8, no));
    for ci in 0..cin {
        let xr = x.row(ci);
        for k in 0..8 {
            let (a, b, c) = (k >> 2, (k >> 1) & 1, k & 1);
            let mut row = cols.row_mut(ci * 8 + k);
            let mut o = 0;
            for h in 0..od[0] {
                for w in 0..od[1] {
                    for d in 0..od[2] {
                        row[o] = xr[((2 * h + a) * dims[1] + 2 * w + b) * dims[2] + 2 * d + c];
                        o += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`block_gather`].
fn block_scatter(cols: &Array2<f64>, channels: usize, dims: Dims) -> Array2<f64> {
    let od = half_dims(dims);
    let n = dims[0] * dims[1] * dims[2];
    let mut x = Array2::<f64>::zeros((channels, n));
    for ci in 0..channels {
        let mut xr = x.row_mut(ci);
        for k in 0..8 {
            let (a, b, c) = (k >> 2, (k >> 1) & 1, k & 1);
            let row = cols.row(ci * 8 + k);
            let mut o = 0;
            for h in 0..od[0] {
                for w in 0..od[1] {
                    for d in 0..od[2] {
                        xr[((2 * h + a) * dims[1] + 2 * w + b) * dims[2] + 2 * d + c] = row[o];
                        o += 1;
                    }
                }
            }
        }
    }
    x
}

/// 2x2x2 convolution with stride 2 (halves every axis). `w` is `(cout, cin*8)`.
pub fn down_forward(x: &Array2<f64>, dims: Dims, w: ArrayView2<f64>, bias: &[f64]) -> Array2<f64> {
    let cols = block_gather(x, dims);
    let mut y = w.dot(&cols);
    add_bias(&mut y, bias);
    y
}

pub fn down_backward(x: &Array2<f64>, dims: Dims, w: ArrayView2<f64>, dy: &Array2<f64>) -> ConvGrads {
    let cols = block_gather(x, dims);
    let dw = dy.dot(&cols.t());
    let dcols = w.t().dot(dy);
    ConvGrads {
        dx: block_scatter(&dcols, x.nrows(), dims),
        dw,
        db: bias_grad(dy),
    }
}

/// 2x2x2 transposed convolution with stride 2 (doubles every axis).
/// `w` is `(cout*8, cin)`; `dims` are the input dims.
pub fn up_forward(x: &Array2<f64>, dims: Dims, w: ArrayView2<f64>, bias: &[f64]) -> Array2<f64> {
    let cout = w.nrows() / 8;
    let cols = w.dot(x);
    let big = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    let mut y = block_scatter(&cols, cout, big);
    add_bias(&mut y, bias);
    y
}

pub fn up_backward(x: &Array2<f64>, dims: Dims, w: ArrayView2<f64>, dy: &Array2<f64>) -> ConvGrads {
    let big = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    let dcols = block_gather(dy, big);
    ConvGrads {
        dw: dcols.dot(&x.t()),
        dx: w.t().dot(&dcols),
        db: bias_grad(dy),
    }
}

/// Pointwise (1x1x1) convolution. `w` is `(cout, cin)`.
pub fn point_forward(x: &Array2<f64>, w: ArrayView2<f64>, bias: &[f64]) -> Array2<f64> {
    let mut y = w.dot(x);
    add_bias(&mut y, bias);
    y
}

pub fn point_backward(x: &Array2<f64>, w: ArrayView2<f64>, dy: &Array2<f64>) -> ConvGrads {
    ConvGrads {
        dx: w.t().dot(dy),
        dw: dy.dot(&x.t()),
        db: bias_grad(dy),
    }
}
