//! Layer kernels with analytic gradients.
//!
//! Each kernel is a pure function: forward takes parameters and input,
//! backward takes whatever the forward saved plus the output cotangent and
//! returns input and parameter cotangents. Batched throughout; the leading
//! axis is always the batch.
//!
//! Parallel sections (the convolution batch loops) write disjoint outputs
//! and reduce over a fixed number of chunks in index order, so results are
//! bitwise identical whether or not a thread pool is in use.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

/// Number of gradient-reduction chunks for batched reductions. Fixed (never
/// derived from the core count) so that summation order is machine-independent.
pub const REDUCE_CHUNKS: usize = 8;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Toggle batch-level parallelism. Results are bitwise identical either way;
/// this only controls whether rayon is used for the convolution batch loops.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// `y = x W + b` with `x: (n, in)`, `W: (in, out)`.
pub fn dense_forward(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    for mut row in y.rows_mut() {
        row += b;
    }
    y
}

pub fn dense_backward(
    x: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    dy: &ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Per-row statistics saved for backward.
pub struct LayerNormTape {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layernorm_forward(
    x: &ArrayView2<f64>,
    gain: &ArrayView1<f64>,
    bias: &ArrayView1<f64>,
) -> (Array2<f64>, LayerNormTape) {
    let n = x.nrows();
    let d = x.ncols();
    let mut x_hat = Array2::<f64>::zeros((n, d));
    let mut inv_std = Array1::<f64>::zeros(n);
    let mut y = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let mut var = 0.0;
        for &v in row.iter() {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            x_hat[(i, j)] = xh;
            y[(i, j)] = gain[j] * xh + bias[j];
        }
    }
    (y, LayerNormTape { x_hat, inv_std })
}

pub fn layernorm_backward(
    tape: &LayerNormTape,
    gain: &ArrayView1<f64>,
    dy: &ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = dy.nrows();
    let d = dy.ncols();
    let mut dx = Array2::<f64>::zeros((n, d));
    let mut dgain = Array1::<f64>::zeros(d);
    let mut dbias = Array1::<f64>::zeros(d);
    for i in 0..n {
        let inv = tape.inv_std[i];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dy[(i, j)] * gain[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * tape.x_hat[(i, j)];
            dgain[j] += dy[(i, j)] * tape.x_hat[(i, j)];
            dbias[j] += dy[(i, j)];
        }
        let dn = d as f64;
        for j in 0..d {
            let dxh = dy[(i, j)] * gain[j];
            dx[(i, j)] =
                inv * (dxh - sum_dxhat / dn - tape.x_hat[(i, j)] * sum_dxhat_xhat / dn);
        }
    }
    (dx, dgain, dbias)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `0.5 x (1 + erf(x / sqrt(2)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// 2-D convolution (also used for temporal convolutions with height 1)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        assert!(h + 2 * ph >= kh && w + 2 * pw >= kw, "kernel larger than padded input");
        ((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1)
    }

    pub fn weight_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel.0 * self.kernel.1
    }
}

fn im2col(x: &ArrayView3<f64>, spec: &Conv2dSpec, oh: usize, ow: usize) -> Array2<f64> {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let h = x.shape()[1];
    let w = x.shape()[2];
    let mut cols = Array2::<f64>::zeros((spec.in_ch * kh * kw, oh * ow));
    for ci in 0..spec.in_ch {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(r, oy * ow + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, spec: &Conv2dSpec, h: usize, w: usize, oh: usize, ow: usize) -> Array3<f64> {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let mut x = Array3::<f64>::zeros((spec.in_ch, h, w));
    for ci in 0..spec.in_ch {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += cols[(r, oy * ow + ox)];
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution. `x: (n, ci, h, w)`, weights as `(co, ci*kh*kw)`.
pub fn conv2d_forward(
    x: &Array4<f64>,
    w: &ArrayView2<f64>,
    b: &ArrayView1<f64>,
    spec: &Conv2dSpec,
) -> Array4<f64> {
    let n = x.shape()[0];
    let (h, wd) = (x.shape()[2], x.shape()[3]);
    let (oh, ow) = spec.out_hw(h, wd);
    let per_sample = |i: usize| -> Array2<f64> {
        let cols = im2col(&x.index_axis(Axis(0), i), spec, oh, ow);
        let mut out = w.dot(&cols);
        for (mut row, &bias) in out.rows_mut().into_iter().zip(b.iter()) {
            row += bias;
        }
        out
    };
    let outs: Vec<Array2<f64>> = if parallel_enabled() {
        (0..n).into_par_iter().map(per_sample).collect()
    } else {
        (0..n).map(per_sample).collect()
    };
    let mut y = Array4::<f64>::zeros((n, spec.out_ch, oh, ow));
    for (i, out) in outs.into_iter().enumerate() {
        let reshaped = out
            .into_shape_with_order((spec.out_ch, oh, ow))
            .expect("conv output reshape");
        y.index_axis_mut(Axis(0), i).assign(&reshaped);
    }
    y
}

/// Backward convolution: returns `(dx, dw, db)` with `dw` shaped `(co, ci*kh*kw)`.
pub fn conv2d_backward(
    x: &Array4<f64>,
    w: &ArrayView2<f64>,
    dy: &Array4<f64>,
    spec: &Conv2dSpec,
) -> (Array4<f64>, Array2<f64>, Array1<f64>) {
    let n = x.shape()[0];
    let (h, wd) = (x.shape()[2], x.shape()[3]);
    let (oh, ow) = spec.out_hw(h, wd);
    let kdim = spec.in_ch * spec.kernel.0 * spec.kernel.1;

    // db: plain index-order sum.
    let mut db = Array1::<f64>::zeros(spec.out_ch);
    for i in 0..n {
        for co in 0..spec.out_ch {
            let mut s = 0.0;
            let plane = dy.index_axis(Axis(0), i);
            let plane = plane.index_axis(Axis(0), co);
            for v in plane.iter() {
                s += v;
            }
            db[co] += s;
        }
    }

    // dx per sample: disjoint outputs, freely parallel.
    let per_sample_dx = |i: usize| -> Array3<f64> {
        let dy_mat = dy
            .index_axis(Axis(0), i)
            .into_shape_with_order((spec.out_ch, oh * ow))
            .expect("dy reshape");
        let dcols = w.t().dot(&dy_mat);
        col2im(&dcols, spec, h, wd, oh, ow)
    };
    let dxs: Vec<Array3<f64>> = if parallel_enabled() {
        (0..n).into_par_iter().map(per_sample_dx).collect()
    } else {
        (0..n).map(per_sample_dx).collect()
    };
    let mut dx = Array4::<f64>::zeros((n, spec.in_ch, h, wd));
    for (i, d) in dxs.into_iter().enumerate() {
        dx.index_axis_mut(Axis(0), i).assign(&d);
    }

    // dw: chunked reduction in fixed order.
    let chunk_len = n.div_ceil(REDUCE_CHUNKS).max(1);
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(chunk_len)
        .map(|s| (s, (s + chunk_len).min(n)))
        .collect();
    let partial = |&(start, end): &(usize, usize)| -> Array2<f64> {
        let mut acc = Array2::<f64>::zeros((spec.out_ch, kdim));
        for i in start..end {
            let cols = im2col(&x.index_axis(Axis(0), i), spec, oh, ow);
            let dy_mat = dy
                .index_axis(Axis(0), i)
                .into_shape_with_order((spec.out_ch, oh * ow))
                .expect("dy reshape");
            acc += &dy_mat.dot(&cols.t());
        }
        acc
    };
    let partials: Vec<Array2<f64>> = if parallel_enabled() {
        ranges.par_iter().map(partial).collect()
    } else {
        ranges.iter().map(partial).collect()
    };
    let mut dw = Array2::<f64>::zeros((spec.out_ch, kdim));
    for p in partials {
        dw += &p;
    }

    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Single-head self-attention
// ---------------------------------------------------------------------------

/// Intermediate values saved by the attention forward pass.
pub struct AttentionTape {
    pub q: Array3<f64>,
    pub k: Array3<f64>,
    pub v: Array3<f64>,
    pub attn: Array3<f64>,
    pub ctx: Array3<f64>,
}

/// Attention parameter views: `(wq, bq, wk, bk, wv, bv, wo, bo)`.
pub struct AttentionParams<'a> {
    pub wq: ArrayView2<'a, f64>,
    pub bq: ArrayView1<'a, f64>,
    pub wk: ArrayView2<'a, f64>,
    pub bk: ArrayView1<'a, f64>,
    pub wv: ArrayView2<'a, f64>,
    pub bv: ArrayView1<'a, f64>,
    pub wo: ArrayView2<'a, f64>,
    pub bo: ArrayView1<'a, f64>,
}

fn project(x: &Array3<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array3<f64> {
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let flat = x
        .view()
        .into_shape_with_order((n * t, d))
        .expect("attention reshape");
    let y = dense_forward(&flat, w, b);
    y.into_shape_with_order((n, t, w.ncols()))
        .expect("attention reshape back")
}

/// Self-attention over `(n, t, d)` token sequences, softmax over keys,
/// followed by an output projection.
pub fn attention_forward(x: &Array3<f64>, p: &AttentionParams) -> (Array3<f64>, AttentionTape) {
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let scale = 1.0 / (d as f64).sqrt();
    let q = project(x, &p.wq, &p.bq);
    let k = project(x, &p.wk, &p.bk);
    let v = project(x, &p.wv, &p.bv);
    let mut attn = Array3::<f64>::zeros((n, t, t));
    let mut ctx = Array3::<f64>::zeros((n, t, d));
    for i in 0..n {
        for a in 0..t {
            // scores for query token a
            let mut row = vec![0.0; t];
            let mut max = f64::NEG_INFINITY;
            for btok in 0..t {
                let mut s = 0.0;
                for j in 0..d {
                    s += q[(i, a, j)] * k[(i, btok, j)];
                }
                let s = s * scale;
                row[btok] = s;
                max = max.max(s);
            }
            let mut denom = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                denom += *r;
            }
            for btok in 0..t {
                let a_ij = row[btok] / denom;
                attn[(i, a, btok)] = a_ij;
                for j in 0..d {
                    ctx[(i, a, j)] += a_ij * v[(i, btok, j)];
                }
            }
        }
    }
    let y = project(&ctx, &p.wo, &p.bo);
    (y, AttentionTape { q, k, v, attn, ctx })
}

pub struct AttentionGrads {
    pub dwq: Array2<f64>,
    pub dbq: Array1<f64>,
    pub dwk: Array2<f64>,
    pub dbk: Array1<f64>,
    pub dwv: Array2<f64>,
    pub dbv: Array1<f64>,
    pub dwo: Array2<f64>,
    pub dbo: Array1<f64>,
}

pub fn attention_backward(
    x: &Array3<f64>,
    p: &AttentionParams,
    tape: &AttentionTape,
    dy: &Array3<f64>,
) -> (Array3<f64>, AttentionGrads) {
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let scale = 1.0 / (d as f64).sqrt();

    // Output projection.
    let dy_flat = dy
        .view()
        .into_shape_with_order((n * t, d))
        .expect("reshape");
    let ctx_flat = tape
        .ctx
        .view()
        .into_shape_with_order((n * t, d))
        .expect("reshape");
    let (dctx_flat, dwo, dbo) = dense_backward(&ctx_flat, &p.wo, &dy_flat);
    let dctx = dctx_flat
        .into_shape_with_order((n, t, d))
        .expect("reshape");

    let mut dq = Array3::<f64>::zeros((n, t, d));
    let mut dk = Array3::<f64>::zeros((n, t, d));
    let mut dv = Array3::<f64>::zeros((n, t, d));
    for i in 0..n {
        // dattn and dv
        let mut dattn = Array2::<f64>::zeros((t, t));
        for a in 0..t {
            for btok in 0..t {
                let mut s = 0.0;
                for j in 0..d {
                    s += dctx[(i, a, j)] * tape.v[(i, btok, j)];
                }
                dattn[(a, btok)] = s;
                let a_ij = tape.attn[(i, a, btok)];
                for j in 0..d {
                    dv[(i, btok, j)] += a_ij * dctx[(i, a, j)];
                }
            }
        }
        // softmax backward, then score gradients into q and k.
        for a in 0..t {
            let mut dot = 0.0;
            for btok in 0..t {
                dot += dattn[(a, btok)] * tape.attn[(i, a, btok)];
            }
            for btok in 0..t {
                let ds = tape.attn[(i, a, btok)] * (dattn[(a, btok)] - dot) * scale;
                for j in 0..d {
                    dq[(i, a, j)] += ds * tape.k[(i, btok, j)];
                    dk[(i, btok, j)] += ds * tape.q[(i, a, j)];
                }
            }
        }
    }

    let x_flat = x
        .view()
        .into_shape_with_order((n * t, d))
        .expect("reshape");
    let dq_flat = dq.into_shape_with_order((n * t, d)).expect("reshape");
    let dk_flat = dk.into_shape_with_order((n * t, d)).expect("reshape");
    let dv_flat = dv.into_shape_with_order((n * t, d)).expect("reshape");
    let (dx_q, dwq, dbq) = dense_backward(&x_flat, &p.wq, &dq_flat.view());
    let (dx_k, dwk, dbk) = dense_backward(&x_flat, &p.wk, &dk_flat.view());
    let (dx_v, dwv, dbv) = dense_backward(&x_flat, &p.wv, &dv_flat.view());
    let dx_flat = dx_q + dx_k + dx_v;
    let dx = dx_flat.into_shape_with_order((n, t, d)).expect("reshape");
    (
        dx,
        AttentionGrads {
            dwq,
            dbq,
            dwk,
            dbk,
            dwv,
            dbv,
            dwo,
            dbo,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn activation_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((gelu(1.0) - 0.841344746068543).abs() < 1e-12);
        assert!(sigmoid(-20.0) < 1e-8);
        assert!(sigmoid(20.0) > 1.0 - 1e-8);
    }

    #[test]
    fn dense_zero_weights_returns_bias() {
        let x = array![[1.0, 2.0], [3.0, -4.0]];
        let w = Array2::<f64>::zeros((2, 3));
        let b = array![0.5, -1.0, 2.0];
        let y = dense_forward(&x.view(), &w.view(), &b.view());
        for i in 0..2 {
            assert_eq!(y.row(i).to_vec(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn dense_backward_outer_product() {
        // y = Wx + b, dy = e_0 -> dW = x e_0^T layout (in, out).
        let x = array![[1.5, -2.0, 0.5]];
        let w = Array2::<f64>::zeros((3, 2));
        let dy = array![[1.0, 0.0]];
        let (_, dw, db) = dense_backward(&x.view(), &w.view(), &dy.view());
        assert_eq!(dw[(0, 0)], 1.5);
        assert_eq!(dw[(1, 0)], -2.0);
        assert_eq!(dw[(2, 0)], 0.5);
        assert_eq!(dw.column(1).sum(), 0.0);
        assert_eq!(db.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn layernorm_constant_row_is_zero_pre_affine() {
        let x = array![[3.0, 3.0, 3.0, 3.0]];
        let gain = Array1::ones(4);
        let bias = Array1::zeros(4);
        let (y, _) = layernorm_forward(&x.view(), &gain.view(), &bias.view());
        for v in y.iter() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn conv_shapes_and_identity_kernel() {
        let spec = Conv2dSpec {
            in_ch: 1,
            out_ch: 1,
            kernel: (1, 1),
            stride: (1, 1),
            pad: (0, 0),
        };
        let x = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f64);
        let w = array![[1.0]];
        let b = array![0.0];
        let y = conv2d_forward(&x, &w.view(), &b.view(), &spec);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride_two_shape() {
        let spec = Conv2dSpec {
            in_ch: 2,
            out_ch: 3,
            kernel: (3, 3),
            stride: (2, 2),
            pad: (1, 1),
        };
        assert_eq!(spec.out_hw(8, 8), (4, 4));
    }

    #[test]
    fn attention_single_token_is_value_projection() {
        // With one token the softmax is 1, so ctx == v and the layer reduces
        // to two chained dense maps.
        let d = 4;
        let x = Array3::from_shape_fn((2, 1, d), |(n, _, j)| (n as f64 + 1.0) * (j as f64 - 1.5));
        let mut rng = crate::seeding::rng_for(3, "layers/attn1");
        use rand::Rng;
        let mk_w = |rng: &mut rand_chacha::ChaCha8Rng| {
            Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.5..0.5))
        };
        let wq = mk_w(&mut rng);
        let wk = mk_w(&mut rng);
        let wv = mk_w(&mut rng);
        let wo = mk_w(&mut rng);
        let bq = Array1::zeros(d);
        let bv = Array1::from_shape_fn(d, |j| j as f64 * 0.1);
        let bo = Array1::from_shape_fn(d, |j| -(j as f64) * 0.2);
        let p = AttentionParams {
            wq: wq.view(),
            bq: bq.view(),
            wk: wk.view(),
            bk: bq.view(),
            wv: wv.view(),
            bv: bv.view(),
            wo: wo.view(),
            bo: bo.view(),
        };
        let (y, tape) = attention_forward(&x, &p);
        assert_eq!(tape.attn[(0, 0, 0)], 1.0);
        let flat = x.view().into_shape_with_order((2, d)).unwrap();
        let v = dense_forward(&flat, &wv.view(), &bv.view());
        let expect = dense_forward(&v.view(), &wo.view(), &bo.view());
        let y_flat = y.view().into_shape_with_order((2, d)).unwrap();
        for (a, b) in y_flat.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
