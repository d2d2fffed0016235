//! Pose encoders.
//!
//! The disentangled encoder runs separate translation and rotation branches
//! (three dense layers each, with layer norm and GELU), treats the two
//! 64-dimensional branch features as a 2-token sequence, applies one
//! self-attention layer with a residual connection, and projects the
//! flattened result to the 128-dimensional pose feature. The ablation
//! baseline replaces all of that with a single 3-layer MLP over the raw
//! 9-vector.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::net::{Component, LayerSpec, ParamStore, ParamStoreBuilder, Stack, StackTape, Tensor};
use crate::se3::ActionVec9;

/// Which encoder to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseEncoderKind {
    /// Disentangled branches + attention.
    Dpe,
    /// Plain MLP over the 9-vector.
    Mlp,
}

/// How the attention stage treats the branch features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// `(F_t, F_r)` as a 2-token sequence of width 64.
    TwoToken,
    /// The concatenated 128-vector as a single token.
    OneToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DpeConfig {
    pub kind: PoseEncoderKind,
    /// Hidden width of the branch MLPs.
    pub branch_hidden: usize,
    /// Output width of each branch.
    pub branch_out: usize,
    /// Final pose feature width.
    pub feature_dim: usize,
    pub attention: AttentionMode,
}

impl Default for DpeConfig {
    fn default() -> Self {
        Self {
            kind: PoseEncoderKind::Dpe,
            branch_hidden: 128,
            branch_out: 64,
            feature_dim: 128,
            attention: AttentionMode::TwoToken,
        }
    }
}

impl DpeConfig {
    fn validate(&self) -> Result<()> {
        if 2 * self.branch_out != self.feature_dim {
            return Err(Error::InvalidConfig(format!(
                "branch outputs ({} each) must sum to the feature dim ({})",
                self.branch_out, self.feature_dim
            )));
        }
        Ok(())
    }

    /// Canonical config lines for hashing.
    pub fn canonical(&self) -> String {
        format!(
            "pose_encoder.kind={:?}\npose_encoder.branch_hidden={}\npose_encoder.branch_out={}\npose_encoder.feature_dim={}\npose_encoder.attention={:?}\n",
            self.kind, self.branch_hidden, self.branch_out, self.feature_dim, self.attention
        )
    }
}

fn branch_stack(in_dim: usize, hidden: usize, out_dim: usize) -> Stack {
    Stack::new(vec![
        LayerSpec::Dense {
            in_dim,
            out_dim: hidden,
        },
        LayerSpec::LayerNorm { dim: hidden },
        LayerSpec::Gelu,
        LayerSpec::Dense {
            in_dim: hidden,
            out_dim: hidden,
        },
        LayerSpec::LayerNorm { dim: hidden },
        LayerSpec::Gelu,
        LayerSpec::Dense {
            in_dim: hidden,
            out_dim,
        },
    ])
}

enum Body {
    Dpe {
        t_branch: Component,
        r_branch: Component,
        attn: Component,
        proj: Component,
    },
    Mlp {
        mlp: Component,
    },
}

enum TapeKind {
    Dpe {
        t_tape: StackTape,
        r_tape: StackTape,
        tokens: Array3<f64>,
        attn_tape: StackTape,
        proj_tape: StackTape,
    },
    Mlp {
        tape: StackTape,
    },
}

/// Saved activations of one encoder forward pass.
pub struct PoseTape {
    batch: usize,
    kind: TapeKind,
}

pub struct PoseEncoder {
    cfg: DpeConfig,
    body: Body,
}

impl PoseEncoder {
    pub fn new(cfg: DpeConfig) -> Result<Self> {
        cfg.validate()?;
        let body = match cfg.kind {
            PoseEncoderKind::Dpe => {
                let attn_dim = match cfg.attention {
                    AttentionMode::TwoToken => cfg.branch_out,
                    AttentionMode::OneToken => cfg.feature_dim,
                };
                Body::Dpe {
                    t_branch: Component::new(
                        "pose.t_branch",
                        branch_stack(3, cfg.branch_hidden, cfg.branch_out),
                    ),
                    r_branch: Component::new(
                        "pose.r_branch",
                        branch_stack(6, cfg.branch_hidden, cfg.branch_out),
                    ),
                    attn: Component::new(
                        "pose.attn",
                        Stack::new(vec![LayerSpec::Attention { dim: attn_dim }]),
                    ),
                    proj: Component::new(
                        "pose.proj",
                        Stack::new(vec![LayerSpec::Dense {
                            in_dim: cfg.feature_dim,
                            out_dim: cfg.feature_dim,
                        }]),
                    ),
                }
            }
            PoseEncoderKind::Mlp => Body::Mlp {
                mlp: Component::new(
                    "pose.mlp",
                    branch_stack(9, cfg.branch_hidden, cfg.feature_dim),
                ),
            },
        };
        Ok(Self { cfg, body })
    }

    pub fn config(&self) -> &DpeConfig {
        &self.cfg
    }

    pub fn register(&self, builder: &mut ParamStoreBuilder) {
        match &self.body {
            Body::Dpe {
                t_branch,
                r_branch,
                attn,
                proj,
            } => {
                t_branch.register(builder);
                r_branch.register(builder);
                attn.register(builder);
                proj.register(builder);
            }
            Body::Mlp { mlp } => mlp.register(builder),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        match &self.body {
            Body::Dpe {
                t_branch,
                r_branch,
                attn,
                proj,
            } => {
                t_branch.init(store, rng);
                r_branch.init(store, rng);
                attn.init(store, rng);
                proj.init(store, rng);
            }
            Body::Mlp { mlp } => mlp.init(store, rng),
        }
    }

    /// Branch features before attention, for the disentanglement checks.
    /// Only meaningful for the DPE variant.
    pub fn branch_features(
        &self,
        store: &ParamStore,
        x: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        match &self.body {
            Body::Dpe {
                t_branch, r_branch, ..
            } => {
                let (t_in, r_in) = split_input(x);
                let (ft, _) = t_branch.forward(store, &t_in)?;
                let (fr, _) = r_branch.forward(store, &r_in)?;
                Ok((
                    ft.into_dimensionality().expect("2d"),
                    fr.into_dimensionality().expect("2d"),
                ))
            }
            Body::Mlp { .. } => Err(Error::InvalidConfig(
                "branch features only exist for the DPE variant".into(),
            )),
        }
    }

    /// Encode a batch of 9-vectors `(n, 9)` into pose features `(n, feature_dim)`.
    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> Result<(Array2<f64>, PoseTape)> {
        if x.ncols() != 9 {
            return Err(Error::ShapeMismatch {
                context: "pose encoder input",
                expected: "(n, 9)".into(),
                got: format!("{:?}", x.shape()),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite pose encoder input".into()));
        }
        let n = x.nrows();
        match &self.body {
            Body::Dpe {
                t_branch,
                r_branch,
                attn,
                proj,
            } => {
                let (t_in, r_in) = split_input(x);
                let (ft, t_tape) = t_branch.forward(store, &t_in)?;
                let (fr, r_tape) = r_branch.forward(store, &r_in)?;
                let ft: Array2<f64> = ft.into_dimensionality().expect("2d");
                let fr: Array2<f64> = fr.into_dimensionality().expect("2d");
                let tokens = self.make_tokens(&ft, &fr);
                let (attn_out, attn_tape) = attn.forward(store, &tokens.clone().into_dyn())?;
                // Residual connection around the attention layer.
                let resid = &attn_out + &tokens.clone().into_dyn();
                let flat = resid
                    .into_shape_with_order(ndarray::IxDyn(&[n, self.cfg.feature_dim]))
                    .expect("flatten");
                let (f, proj_tape) = proj.forward(store, &flat)?;
                Ok((
                    f.into_dimensionality().expect("2d"),
                    PoseTape {
                        batch: n,
                        kind: TapeKind::Dpe {
                            t_tape,
                            r_tape,
                            tokens,
                            attn_tape,
                            proj_tape,
                        },
                    },
                ))
            }
            Body::Mlp { mlp } => {
                let (f, tape) = mlp.forward(store, &x.clone().into_dyn())?;
                Ok((
                    f.into_dimensionality().expect("2d"),
                    PoseTape {
                        batch: n,
                        kind: TapeKind::Mlp { tape },
                    },
                ))
            }
        }
    }

    fn make_tokens(&self, ft: &Array2<f64>, fr: &Array2<f64>) -> Array3<f64> {
        let n = ft.nrows();
        match self.cfg.attention {
            AttentionMode::TwoToken => {
                let mut tok = Array3::<f64>::zeros((n, 2, self.cfg.branch_out));
                tok.index_axis_mut(Axis(1), 0).assign(ft);
                tok.index_axis_mut(Axis(1), 1).assign(fr);
                tok
            }
            AttentionMode::OneToken => {
                let b = self.cfg.branch_out;
                let mut tok = Array3::<f64>::zeros((n, 1, self.cfg.feature_dim));
                for i in 0..n {
                    for j in 0..b {
                        tok[(i, 0, j)] = ft[(i, j)];
                        tok[(i, 0, b + j)] = fr[(i, j)];
                    }
                }
                tok
            }
        }
    }

    /// Backward pass; accumulates parameter gradients into `grads` and
    /// returns the input cotangent `(n, 9)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &PoseTape,
        dy: &Array2<f64>,
        grads: &mut ParamStore,
    ) -> Array2<f64> {
        let n = tape.batch;
        match (&self.body, &tape.kind) {
            (
                Body::Dpe {
                    t_branch,
                    r_branch,
                    attn,
                    proj,
                },
                TapeKind::Dpe {
                    t_tape,
                    r_tape,
                    tokens,
                    attn_tape,
                    proj_tape,
                },
            ) => {
                let dflat = proj.backward(store, proj_tape, &dy.clone().into_dyn(), grads);
                let shape: Vec<usize> = tokens.shape().to_vec();
                let dresid = dflat
                    .into_shape_with_order(ndarray::IxDyn(&shape))
                    .expect("reshape");
                let dtokens_attn = attn.backward(store, attn_tape, &dresid, grads);
                let dtokens = &dtokens_attn + &dresid; // residual path
                let d3 = dtokens
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("3d")
                    .to_owned();
                let b = self.cfg.branch_out;
                let (dft, dfr): (Array2<f64>, Array2<f64>) = match self.cfg.attention {
                    AttentionMode::TwoToken => (
                        d3.index_axis(Axis(1), 0).to_owned(),
                        d3.index_axis(Axis(1), 1).to_owned(),
                    ),
                    AttentionMode::OneToken => {
                        let mut dft = Array2::<f64>::zeros((n, b));
                        let mut dfr = Array2::<f64>::zeros((n, b));
                        for i in 0..n {
                            for j in 0..b {
                                dft[(i, j)] = d3[(i, 0, j)];
                                dfr[(i, j)] = d3[(i, 0, b + j)];
                            }
                        }
                        (dft, dfr)
                    }
                };
                let dt = t_branch.backward(store, t_tape, &dft.into_dyn(), grads);
                let dr = r_branch.backward(store, r_tape, &dfr.into_dyn(), grads);
                let dt: Array2<f64> = dt.into_dimensionality().expect("2d");
                let dr: Array2<f64> = dr.into_dimensionality().expect("2d");
                let mut dx = Array2::<f64>::zeros((n, 9));
                for i in 0..n {
                    for j in 0..3 {
                        dx[(i, j)] = dt[(i, j)];
                    }
                    for j in 0..6 {
                        dx[(i, 3 + j)] = dr[(i, j)];
                    }
                }
                dx
            }
            (Body::Mlp { mlp }, TapeKind::Mlp { tape }) => {
                let dx = mlp.backward(store, tape, &dy.clone().into_dyn(), grads);
                dx.into_dimensionality().expect("2d")
            }
            _ => unreachable!("tape does not match encoder"),
        }
    }
}

fn split_input(x: &Array2<f64>) -> (Tensor, Tensor) {
    let n = x.nrows();
    let mut t = Array2::<f64>::zeros((n, 3));
    let mut r = Array2::<f64>::zeros((n, 6));
    for i in 0..n {
        for j in 0..3 {
            t[(i, j)] = x[(i, j)];
        }
        for j in 0..6 {
            r[(i, j)] = x[(i, 3 + j)];
        }
    }
    (t.into_dyn(), r.into_dyn())
}

/// Encode a single action vector; convenience wrapper over the batched path.
pub fn encode_pose(
    encoder: &PoseEncoder,
    store: &ParamStore,
    pose_action: &ActionVec9,
) -> Result<Vec<f64>> {
    let arr = pose_action.to_array();
    let x = Array2::from_shape_vec((1, 9), arr.to_vec()).expect("shape");
    let (f, _) = encoder.forward(store, &x)?;
    Ok(f.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{grad_check_fn, sample_indices, FD_STEP};
    use rand::Rng;

    fn build(kind: PoseEncoderKind, seed: u64) -> (PoseEncoder, ParamStore) {
        let cfg = DpeConfig {
            kind,
            branch_hidden: 16,
            branch_out: 8,
            feature_dim: 16,
            ..Default::default()
        };
        let enc = PoseEncoder::new(cfg).unwrap();
        let mut builder = ParamStore::builder();
        enc.register(&mut builder);
        let mut store = builder.build_zeroed();
        let mut rng = crate::seeding::rng_for(seed, "pose_encoder/init");
        enc.init(&mut store, &mut rng);
        (enc, store)
    }

    fn random_batch(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::seeding::rng_for(seed, "pose_encoder/batch");
        Array2::from_shape_fn((n, 9), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_params_constant_output() {
        let cfg = DpeConfig::default();
        let enc = PoseEncoder::new(cfg).unwrap();
        let mut builder = ParamStore::builder();
        enc.register(&mut builder);
        let store = builder.build_zeroed();
        let a = random_batch(1, 1);
        let b = random_batch(1, 2);
        let (fa, _) = enc.forward(&store, &a).unwrap();
        let (fb, _) = enc.forward(&store, &b).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(fa.ncols(), 128);
    }

    #[test]
    fn translation_feature_ignores_rotation() {
        let (enc, store) = build(PoseEncoderKind::Dpe, 3);
        let mut a = random_batch(1, 4);
        let mut b = a.clone();
        // Same translation, different rotation encodings.
        for j in 3..9 {
            b[(0, j)] = a[(0, j)] + 0.25;
        }
        let (ft_a, fr_a) = enc.branch_features(&store, &a).unwrap();
        let (ft_b, fr_b) = enc.branch_features(&store, &b).unwrap();
        assert_eq!(ft_a, ft_b, "translation branch must not see rotation");
        assert_ne!(fr_a, fr_b);

        // And the other way around.
        for j in 0..3 {
            a[(0, j)] += 0.5;
        }
        let (_, fr_c) = enc.branch_features(&store, &a).unwrap();
        assert_eq!(fr_b.shape(), fr_c.shape());
    }

    #[test]
    fn branch_jacobian_sparsity() {
        // Finite differences of pre-attention features: translation features
        // have exactly zero sensitivity to the rotation inputs.
        let (enc, store) = build(PoseEncoderKind::Dpe, 5);
        let x = random_batch(1, 6);
        let (ft0, fr0) = enc.branch_features(&store, &x).unwrap();
        for j in 3..9 {
            let mut xp = x.clone();
            xp[(0, j)] += 1e-4;
            let (ft1, _) = enc.branch_features(&store, &xp).unwrap();
            assert_eq!(ft0, ft1);
        }
        for j in 0..3 {
            let mut xp = x.clone();
            xp[(0, j)] += 1e-4;
            let (_, fr1) = enc.branch_features(&store, &xp).unwrap();
            assert_eq!(fr0, fr1);
        }
    }

    #[test]
    fn output_dim_is_128_by_default() {
        let enc = PoseEncoder::new(DpeConfig::default()).unwrap();
        let mut builder = ParamStore::builder();
        enc.register(&mut builder);
        let mut store = builder.build_zeroed();
        let mut rng = crate::seeding::rng_for(7, "pose_encoder/init");
        enc.init(&mut store, &mut rng);
        let (f, _) = enc.forward(&store, &random_batch(3, 8)).unwrap();
        assert_eq!(f.shape(), &[3, 128]);
    }

    #[test]
    fn rejects_non_finite_input() {
        let (enc, store) = build(PoseEncoderKind::Dpe, 9);
        let mut x = random_batch(1, 10);
        x[(0, 4)] = f64::NAN;
        assert!(enc.forward(&store, &x).is_err());
    }

    #[test]
    fn mismatched_branch_dims_rejected() {
        let cfg = DpeConfig {
            branch_out: 60,
            feature_dim: 128,
            ..Default::default()
        };
        assert!(PoseEncoder::new(cfg).is_err());
    }

    fn grad_check_variant(kind: PoseEncoderKind, mode: AttentionMode, seed: u64) {
        let cfg = DpeConfig {
            kind,
            branch_hidden: 12,
            branch_out: 6,
            feature_dim: 12,
            attention: mode,
        };
        let enc = PoseEncoder::new(cfg).unwrap();
        let mut builder = ParamStore::builder();
        enc.register(&mut builder);
        let mut store = builder.build_zeroed();
        let mut rng = crate::seeding::rng_for(seed, "pose_encoder/gc");
        enc.init(&mut store, &mut rng);
        let x = random_batch(4, seed + 1);

        let (f, tape) = enc.forward(&store, &x).unwrap();
        let mut grads = store.zeros_like();
        enc.backward(&store, &tape, &f, &mut grads);

        let indices = sample_indices(store.len(), 80, seed + 2);
        let report = grad_check_fn(
            |p| {
                let mut probe = store.clone();
                probe.data_mut().copy_from_slice(p);
                let (f, _) = enc.forward(&probe, &x).unwrap();
                0.5 * f.iter().map(|v| v * v).sum::<f64>()
            },
            store.data(),
            grads.data(),
            &indices,
            FD_STEP,
        );
        assert!(report.pass(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_dpe_two_token() {
        grad_check_variant(PoseEncoderKind::Dpe, AttentionMode::TwoToken, 11);
    }

    #[test]
    fn grad_check_dpe_one_token() {
        grad_check_variant(PoseEncoderKind::Dpe, AttentionMode::OneToken, 13);
    }

    #[test]
    fn grad_check_mlp() {
        grad_check_variant(PoseEncoderKind::Mlp, AttentionMode::TwoToken, 15);
    }

    #[test]
    fn deterministic_for_fixed_params() {
        let (enc, store) = build(PoseEncoderKind::Dpe, 17);
        let x = random_batch(5, 18);
        let (a, _) = enc.forward(&store, &x).unwrap();
        let (b, _) = enc.forward(&store, &x).unwrap();
        assert_eq!(a, b);
    }
}
