//! Minimal differentiable network kernels.
//!
//! The building blocks are deliberately small: dense, layer normalization,
//! GELU/ReLU/sigmoid, 2-D convolution and single-head self-attention, each
//! with an analytic backward pass. Sequential compositions go through
//! [`Stack`]; models with branching topologies (the encoders, the denoiser)
//! wire these kernels together and chain the cotangents by hand. Everything
//! is `f64` and checked against central finite differences.

pub mod adamw;
pub mod checkpoint;
pub mod layers;
pub mod params;

pub use adamw::AdamW;
pub use layers::{parallel_enabled, set_parallel, Conv2dSpec};
pub use params::{ParamStore, ParamStoreBuilder, Segment};

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView1, ArrayView2, Dimension, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use layers::{
    attention_backward, attention_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, gelu, gelu_derivative, layernorm_backward, layernorm_forward, sigmoid,
    AttentionParams, AttentionTape, LayerNormTape,
};

/// Dynamic-rank tensor; the leading axis is always the batch.
pub type Tensor = ArrayD<f64>;

/// One layer of a sequential stack.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    LayerNorm { dim: usize },
    Gelu,
    Relu,
    Sigmoid,
    Conv2d(Conv2dSpec),
    /// Single-head self-attention over `(batch, tokens, dim)` sequences.
    Attention { dim: usize },
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Dense { in_dim, out_dim } => in_dim * out_dim + out_dim,
            LayerSpec::LayerNorm { dim } => 2 * dim,
            LayerSpec::Gelu | LayerSpec::Relu | LayerSpec::Sigmoid => 0,
            LayerSpec::Conv2d(spec) => spec.weight_count() + spec.out_ch,
            LayerSpec::Attention { dim } => 4 * (dim * dim + dim),
        }
    }

    /// Initialize this layer's parameters in place.
    ///
    /// Dense/conv/attention weights are uniform in +-sqrt(6/(fan_in+fan_out))
    /// with zero biases; layer norm starts as the identity affine.
    pub fn init_into<R: Rng>(&self, slice: &mut [f64], rng: &mut R) {
        debug_assert_eq!(slice.len(), self.param_count());
        match self {
            LayerSpec::Dense { in_dim, out_dim } => {
                let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
                for v in slice[..in_dim * out_dim].iter_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
                for v in slice[in_dim * out_dim..].iter_mut() {
                    *v = 0.0;
                }
            }
            LayerSpec::LayerNorm { dim } => {
                for v in slice[..*dim].iter_mut() {
                    *v = 1.0;
                }
                for v in slice[*dim..].iter_mut() {
                    *v = 0.0;
                }
            }
            LayerSpec::Gelu | LayerSpec::Relu | LayerSpec::Sigmoid => {}
            LayerSpec::Conv2d(spec) => {
                let fan_in = spec.in_ch * spec.kernel.0 * spec.kernel.1;
                let fan_out = spec.out_ch * spec.kernel.0 * spec.kernel.1;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let wc = spec.weight_count();
                for v in slice[..wc].iter_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
                for v in slice[wc..].iter_mut() {
                    *v = 0.0;
                }
            }
            LayerSpec::Attention { dim } => {
                let bound = (6.0 / (2 * dim) as f64).sqrt();
                let block = dim * dim + dim;
                for p in 0..4 {
                    let s = &mut slice[p * block..(p + 1) * block];
                    for v in s[..dim * dim].iter_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                    for v in s[dim * dim..].iter_mut() {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

/// Saved activations for one layer.
enum LayerTape {
    Dense { x2: Array2<f64>, in_shape: IxDyn },
    LayerNorm { t: LayerNormTape, in_shape: IxDyn },
    Gelu { x: Tensor },
    Relu { x: Tensor },
    Sigmoid { y: Tensor },
    Conv2d { x: Array4<f64> },
    Attention { x: Array3<f64>, t: AttentionTape },
}

/// Activation record of one stack forward pass.
pub struct StackTape {
    entries: Vec<LayerTape>,
}

/// A sequential stack of layers acting on one flat parameter slice.
#[derive(Debug, Clone)]
pub struct Stack {
    layers: Vec<LayerSpec>,
}

fn flatten_last(x: &Tensor, last: usize, context: &'static str) -> Result<Array2<f64>> {
    let shape = x.shape();
    let got = *shape.last().unwrap_or(&0);
    if got != last || x.ndim() < 2 {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("(.., {last})"),
            got: format!("{shape:?}"),
        });
    }
    let rows = x.len() / last;
    Ok(x.view()
        .into_shape_with_order((rows, last))
        .expect("standard layout")
        .to_owned())
}

fn unflatten_like(y: Array2<f64>, reference: &IxDyn, last: usize) -> Tensor {
    let mut shape: Vec<usize> = reference.slice().to_vec();
    *shape.last_mut().unwrap() = last;
    y.into_shape_with_order(IxDyn(&shape))
        .expect("standard layout")
}

fn attention_views<'a>(slice: &'a [f64], dim: usize) -> AttentionParams<'a> {
    let block = dim * dim + dim;
    let part = |p: usize| -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let s = &slice[p * block..(p + 1) * block];
        (
            ArrayView2::from_shape((dim, dim), &s[..dim * dim]).unwrap(),
            ArrayView1::from_shape(dim, &s[dim * dim..]).unwrap(),
        )
    };
    let (wq, bq) = part(0);
    let (wk, bk) = part(1);
    let (wv, bv) = part(2);
    let (wo, bo) = part(3);
    AttentionParams {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

impl Stack {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn init_into<R: Rng>(&self, slice: &mut [f64], rng: &mut R) {
        let mut offset = 0;
        for layer in &self.layers {
            let n = layer.param_count();
            layer.init_into(&mut slice[offset..offset + n], rng);
            offset += n;
        }
    }

    /// Forward pass; the returned tape is sufficient for [`Stack::backward`].
    pub fn forward(&self, params: &[f64], x: &Tensor) -> Result<(Tensor, StackTape)> {
        debug_assert_eq!(params.len(), self.param_count());
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let mut offset = 0;
        for layer in &self.layers {
            let n = layer.param_count();
            let slice = &params[offset..offset + n];
            offset += n;
            cur = match layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let x2 = flatten_last(&cur, *in_dim, "dense")?;
                    let w = ArrayView2::from_shape((*in_dim, *out_dim), &slice[..in_dim * out_dim])
                        .unwrap();
                    let b = ArrayView1::from_shape(*out_dim, &slice[in_dim * out_dim..]).unwrap();
                    let y = dense_forward(&x2.view(), &w, &b);
                    let in_shape = cur.raw_dim();
                    entries.push(LayerTape::Dense { x2, in_shape });
                    unflatten_like(y, &cur.raw_dim(), *out_dim)
                }
                LayerSpec::LayerNorm { dim } => {
                    let x2 = flatten_last(&cur, *dim, "layernorm")?;
                    let gain = ArrayView1::from_shape(*dim, &slice[..*dim]).unwrap();
                    let bias = ArrayView1::from_shape(*dim, &slice[*dim..]).unwrap();
                    let (y, t) = layernorm_forward(&x2.view(), &gain, &bias);
                    let in_shape = cur.raw_dim();
                    entries.push(LayerTape::LayerNorm { t, in_shape });
                    unflatten_like(y, &cur.raw_dim(), *dim)
                }
                LayerSpec::Gelu => {
                    let y = cur.mapv(gelu);
                    entries.push(LayerTape::Gelu { x: cur });
                    y
                }
                LayerSpec::Relu => {
                    let y = cur.mapv(|v| v.max(0.0));
                    entries.push(LayerTape::Relu { x: cur });
                    y
                }
                LayerSpec::Sigmoid => {
                    let y = cur.mapv(sigmoid);
                    entries.push(LayerTape::Sigmoid { y: y.clone() });
                    y
                }
                LayerSpec::Conv2d(spec) => {
                    let x4 = cur
                        .view()
                        .into_dimensionality::<ndarray::Ix4>()
                        .map_err(|_| Error::ShapeMismatch {
                            context: "conv2d",
                            expected: "(n, c, h, w)".into(),
                            got: format!("{:?}", cur.shape()),
                        })?
                        .to_owned();
                    if x4.shape()[1] != spec.in_ch {
                        return Err(Error::ShapeMismatch {
                            context: "conv2d channels",
                            expected: format!("{}", spec.in_ch),
                            got: format!("{}", x4.shape()[1]),
                        });
                    }
                    let w = ArrayView2::from_shape(
                        (spec.out_ch, spec.weight_count() / spec.out_ch),
                        &slice[..spec.weight_count()],
                    )
                    .unwrap();
                    let b =
                        ArrayView1::from_shape(spec.out_ch, &slice[spec.weight_count()..]).unwrap();
                    let y = conv2d_forward(&x4, &w, &b, spec);
                    entries.push(LayerTape::Conv2d { x: x4 });
                    y.into_dyn()
                }
                LayerSpec::Attention { dim } => {
                    let x3 = cur
                        .view()
                        .into_dimensionality::<ndarray::Ix3>()
                        .map_err(|_| Error::ShapeMismatch {
                            context: "attention",
                            expected: "(n, t, d)".into(),
                            got: format!("{:?}", cur.shape()),
                        })?
                        .to_owned();
                    if x3.shape()[2] != *dim {
                        return Err(Error::ShapeMismatch {
                            context: "attention dim",
                            expected: format!("{dim}"),
                            got: format!("{}", x3.shape()[2]),
                        });
                    }
                    let p = attention_views(slice, *dim);
                    let (y, t) = attention_forward(&x3, &p);
                    entries.push(LayerTape::Attention { x: x3, t });
                    y.into_dyn()
                }
            };
        }
        Ok((cur, StackTape { entries }))
    }

    /// Backward pass for the scalar whose differential is `<dy, y>`.
    ///
    /// Returns the input cotangent and the flat parameter gradient.
    pub fn backward(&self, params: &[f64], tape: &StackTape, dy: &Tensor) -> (Tensor, Vec<f64>) {
        assert_eq!(tape.entries.len(), self.layers.len(), "stale tape");
        let mut dparams = vec![0.0; self.param_count()];
        let mut cur = dy.clone();
        let mut offset = self.param_count();
        for (layer, entry) in self.layers.iter().zip(tape.entries.iter()).rev() {
            let n = layer.param_count();
            offset -= n;
            let pslice = &params[offset..offset + n];
            let gslice = &mut dparams[offset..offset + n];
            cur = match (layer, entry) {
                (LayerSpec::Dense { in_dim, out_dim }, LayerTape::Dense { x2, in_shape }) => {
                    let dy2 = flatten_last(&cur, *out_dim, "dense backward").expect("tape shape");
                    let w = ArrayView2::from_shape((*in_dim, *out_dim), &pslice[..in_dim * out_dim])
                        .unwrap();
                    let (dx, dw, db) = dense_backward(&x2.view(), &w, &dy2.view());
                    gslice[..in_dim * out_dim].copy_from_slice(dw.as_slice().unwrap());
                    gslice[in_dim * out_dim..].copy_from_slice(db.as_slice().unwrap());
                    unflatten_like(dx, in_shape, *in_dim)
                }
                (LayerSpec::LayerNorm { dim }, LayerTape::LayerNorm { t, in_shape }) => {
                    let dy2 = flatten_last(&cur, *dim, "layernorm backward").expect("tape shape");
                    let gain = ArrayView1::from_shape(*dim, &pslice[..*dim]).unwrap();
                    let (dx, dg, dbta) = layernorm_backward(t, &gain, &dy2.view());
                    gslice[..*dim].copy_from_slice(dg.as_slice().unwrap());
                    gslice[*dim..].copy_from_slice(dbta.as_slice().unwrap());
                    unflatten_like(dx, in_shape, *dim)
                }
                (LayerSpec::Gelu, LayerTape::Gelu { x }) => {
                    let mut dx = cur;
                    dx.zip_mut_with(x, |d, &xv| *d *= gelu_derivative(xv));
                    dx
                }
                (LayerSpec::Relu, LayerTape::Relu { x }) => {
                    let mut dx = cur;
                    dx.zip_mut_with(x, |d, &xv| {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    dx
                }
                (LayerSpec::Sigmoid, LayerTape::Sigmoid { y }) => {
                    let mut dx = cur;
                    dx.zip_mut_with(y, |d, &yv| *d *= yv * (1.0 - yv));
                    dx
                }
                (LayerSpec::Conv2d(spec), LayerTape::Conv2d { x }) => {
                    let dy4 = cur
                        .view()
                        .into_dimensionality::<ndarray::Ix4>()
                        .expect("tape shape")
                        .to_owned();
                    let w = ArrayView2::from_shape(
                        (spec.out_ch, spec.weight_count() / spec.out_ch),
                        &pslice[..spec.weight_count()],
                    )
                    .unwrap();
                    let (dx, dw, db) = conv2d_backward(x, &w, &dy4, spec);
                    gslice[..spec.weight_count()].copy_from_slice(dw.as_slice().unwrap());
                    gslice[spec.weight_count()..].copy_from_slice(db.as_slice().unwrap());
                    dx.into_dyn()
                }
                (LayerSpec::Attention { dim }, LayerTape::Attention { x, t }) => {
                    let dy3 = cur
                        .view()
                        .into_dimensionality::<ndarray::Ix3>()
                        .expect("tape shape")
                        .to_owned();
                    let p = attention_views(pslice, *dim);
                    let (dx, g) = attention_backward(x, &p, t, &dy3);
                    let block = dim * dim + dim;
                    let write = |gs: &mut [f64], p: usize, w: &Array2<f64>, b: &Array1<f64>| {
                        gs[p * block..p * block + dim * dim]
                            .copy_from_slice(w.as_slice().unwrap());
                        gs[p * block + dim * dim..(p + 1) * block]
                            .copy_from_slice(b.as_slice().unwrap());
                    };
                    write(gslice, 0, &g.dwq, &g.dbq);
                    write(gslice, 1, &g.dwk, &g.dbk);
                    write(gslice, 2, &g.dwv, &g.dbv);
                    write(gslice, 3, &g.dwo, &g.dbo);
                    dx.into_dyn()
                }
                _ => unreachable!("tape does not match stack"),
            };
        }
        (cur, dparams)
    }
}

/// A named, stack-backed model component bound to a [`ParamStore`] segment.
///
/// Components are the unit from which the encoders and the denoiser are
/// assembled; backward accumulates (`+=`) into the gradient store so that
/// shared components (e.g. a shared CNN trunk applied to two inputs) can be
/// traversed more than once per step.
#[derive(Debug, Clone)]
pub struct Component {
    name: String,
    stack: Stack,
}

impl Component {
    pub fn new(name: impl Into<String>, stack: Stack) -> Self {
        Self {
            name: name.into(),
            stack,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }

    pub fn register(&self, builder: &mut ParamStoreBuilder) {
        builder.register(&self.name, self.stack.param_count());
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.stack.init_into(store.slice_mut(&self.name), rng);
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, StackTape)> {
        self.stack.forward(store.slice(&self.name), x)
    }

    /// Backward pass; parameter gradients accumulate into `grads`.
    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &StackTape,
        dy: &Tensor,
        grads: &mut ParamStore,
    ) -> Tensor {
        let (dx, dp) = self.stack.backward(store.slice(&self.name), tape, dy);
        for (g, d) in grads.slice_mut(&self.name).iter_mut().zip(dp) {
            *g += d;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn pass(&self, tol: f64) -> bool {
        self.checked == 0 || self.max_rel_err <= tol
    }
}

/// Central finite-difference step used by the checkers.
pub const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Compare an analytic gradient against central differences of `f` at a
/// subset of parameter indices.
pub fn grad_check_fn<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    step: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut probe = params.to_vec();
    let mut max_rel_err: f64 = 0.0;
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        max_rel_err = max_rel_err.max(rel_err(analytic[i], numeric));
    }
    GradCheckReport {
        max_rel_err,
        checked: indices.len(),
    }
}

/// Pick `samples` distinct parameter indices (all of them when fewer exist).
pub fn sample_indices(count: usize, samples: usize, seed: u64) -> Vec<usize> {
    if count <= samples {
        return (0..count).collect();
    }
    let mut rng = crate::seeding::rng_for(seed, "grad_check/indices");
    let mut picked = rand::seq::index::sample(&mut rng, count, samples).into_vec();
    picked.sort_unstable();
    picked
}

/// Gradient check of a stack under the scalar loss `0.5 * sum(y^2)`.
///
/// Checks up to `samples` randomly chosen parameters, comparing the analytic
/// backward pass against central finite differences.
pub fn grad_check_stack(
    stack: &Stack,
    params: &[f64],
    x: &Tensor,
    samples: usize,
    seed: u64,
) -> GradCheckReport {
    let (y, tape) = stack.forward(params, x).expect("grad_check forward");
    let (_, analytic) = stack.backward(params, &tape, &y);
    let indices = sample_indices(params.len(), samples, seed);
    grad_check_fn(
        |p| {
            let (y, _) = stack.forward(p, x).expect("grad_check forward");
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        },
        params,
        &analytic,
        &indices,
        FD_STEP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::seeding::rng_for(seed, "net/test_input");
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn init_stack(stack: &Stack, seed: u64) -> Vec<f64> {
        let mut rng = crate::seeding::rng_for(seed, "net/test_init");
        let mut params = vec![0.0; stack.param_count()];
        stack.init_into(&mut params, &mut rng);
        params
    }

    #[test]
    fn zero_parameter_stack_vacuous_pass() {
        let stack = Stack::new(vec![LayerSpec::Gelu]);
        let x = random_input(&[4, 3], 1);
        let report = grad_check_stack(&stack, &[], &x, 16, 0);
        assert_eq!(report.checked, 0);
        assert!(report.pass(1e-4));
    }

    #[test]
    fn backward_zero_dy_gives_zero_grads() {
        let stack = Stack::new(vec![LayerSpec::Dense {
            in_dim: 3,
            out_dim: 2,
        }]);
        let params = init_stack(&stack, 2);
        let x = random_input(&[5, 3], 3);
        let (y, tape) = stack.forward(&params, &x).unwrap();
        let dy = Tensor::zeros(y.raw_dim());
        let (dx, dparams) = stack.backward(&params, &tape, &dy);
        assert!(dx.iter().all(|v| *v == 0.0));
        assert!(dparams.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_check_dense_gelu() {
        let stack = Stack::new(vec![
            LayerSpec::Dense {
                in_dim: 6,
                out_dim: 8,
            },
            LayerSpec::Gelu,
            LayerSpec::Dense {
                in_dim: 8,
                out_dim: 4,
            },
        ]);
        let params = init_stack(&stack, 4);
        let x = random_input(&[7, 6], 5);
        let report = grad_check_stack(&stack, &params, &x, 64, 6);
        assert!(report.pass(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_layernorm_relu_sigmoid() {
        let stack = Stack::new(vec![
            LayerSpec::Dense {
                in_dim: 5,
                out_dim: 6,
            },
            LayerSpec::LayerNorm { dim: 6 },
            LayerSpec::Relu,
            LayerSpec::Dense {
                in_dim: 6,
                out_dim: 3,
            },
            LayerSpec::Sigmoid,
        ]);
        let params = init_stack(&stack, 7);
        let x = random_input(&[6, 5], 8);
        let report = grad_check_stack(&stack, &params, &x, 64, 9);
        assert!(report.pass(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_conv2d() {
        let stack = Stack::new(vec![
            LayerSpec::Conv2d(Conv2dSpec {
                in_ch: 2,
                out_ch: 3,
                kernel: (3, 3),
                stride: (2, 2),
                pad: (1, 1),
            }),
            LayerSpec::Gelu,
            LayerSpec::Conv2d(Conv2dSpec {
                in_ch: 3,
                out_ch: 2,
                kernel: (3, 3),
                stride: (1, 1),
                pad: (1, 1),
            }),
        ]);
        let params = init_stack(&stack, 10);
        let x = random_input(&[2, 2, 6, 6], 11);
        let report = grad_check_stack(&stack, &params, &x, 96, 12);
        assert!(report.pass(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_attention() {
        let stack = Stack::new(vec![LayerSpec::Attention { dim: 4 }]);
        let params = init_stack(&stack, 13);
        let x = random_input(&[3, 2, 4], 14);
        let report = grad_check_stack(&stack, &params, &x, 96, 15);
        assert!(report.pass(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_input_cotangent() {
        // dx should also match finite differences over the input.
        let stack = Stack::new(vec![
            LayerSpec::Dense {
                in_dim: 4,
                out_dim: 5,
            },
            LayerSpec::LayerNorm { dim: 5 },
            LayerSpec::Gelu,
        ]);
        let params = init_stack(&stack, 16);
        let x = random_input(&[3, 4], 17);
        let (y, tape) = stack.forward(&params, &x).unwrap();
        let (dx, _) = stack.backward(&params, &tape, &y);

        let loss = |xp: &Tensor| -> f64 {
            let (y, _) = stack.forward(&params, xp).unwrap();
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let mut max_err: f64 = 0.0;
        let mut probe = x.clone();
        for idx in 0..x.len() {
            let flat = probe.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + FD_STEP;
            let plus = loss(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig - FD_STEP;
            let minus = loss(&probe);
            probe.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(dx.as_slice().unwrap()[idx], numeric));
        }
        assert!(max_err < 1e-4, "input grad err {max_err}");
    }

    #[test]
    fn deterministic_init() {
        let stack = Stack::new(vec![
            LayerSpec::Dense {
                in_dim: 10,
                out_dim: 10,
            },
            LayerSpec::Attention { dim: 10 },
        ]);
        let a = init_stack(&stack, 42);
        let b = init_stack(&stack, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let stack = Stack::new(vec![LayerSpec::Dense {
            in_dim: 4,
            out_dim: 2,
        }]);
        let params = init_stack(&stack, 18);
        let x = random_input(&[3, 5], 19);
        assert!(matches!(
            stack.forward(&params, &x),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
