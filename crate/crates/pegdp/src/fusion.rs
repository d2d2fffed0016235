//! Pose-guided residual gated fusion.
//!
//! Image features are compressed to the pose-feature width, gated by weights
//! computed from the pose features alone, and added residually:
//! `f_fusion = f_pose + W_g (*) f'_img` with `W_g = sigmoid(linear(f_pose))`.
//! The gate input is never the image feature, so visual cues intervene only
//! as modulated corrections on top of the geometric backbone. The ablation
//! baseline concatenates `[f_pose || f'_img]` and projects back down.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::net::{Component, LayerSpec, ParamStore, ParamStoreBuilder, Stack, StackTape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Pose-guided residual gated fusion.
    Prgf,
    /// Concatenate and project.
    Concat,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionMode::Prgf => f.write_str("prgf"),
            FusionMode::Concat => f.write_str("cat"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Raw image feature width coming out of the RGBD encoder.
    pub image_feature_dim: usize,
    /// Pose feature width; also the fused feature width.
    pub feature_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Prgf,
            image_feature_dim: 1200,
            feature_dim: 128,
        }
    }
}

impl FusionConfig {
    pub fn canonical(&self) -> String {
        format!(
            "fusion.mode={}\nfusion.image_feature_dim={}\nfusion.feature_dim={}\n",
            self.mode, self.image_feature_dim, self.feature_dim
        )
    }
}

/// Per-batch-row gate statistics, logged during closed-loop evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Pure arithmetic of the residual gated fusion.
pub fn fuse_prgf(f_pose: &Array2<f64>, f_img_c: &Array2<f64>, w_g: &Array2<f64>) -> Array2<f64> {
    let mut out = f_pose.clone();
    out.zip_mut_with(&(f_img_c * w_g), |o, &v| *o += v);
    out
}

pub struct FusionTape {
    compress_tape: StackTape,
    kind: TapeKind,
}

enum TapeKind {
    Prgf {
        gate_tape: StackTape,
        w_g: Array2<f64>,
        f_img_c: Array2<f64>,
    },
    Concat {
        proj_tape: StackTape,
    },
}

pub struct FusionModule {
    cfg: FusionConfig,
    compress: Component,
    gate: Option<Component>,
    cat_proj: Option<Component>,
}

impl FusionModule {
    pub fn new(cfg: FusionConfig) -> Self {
        let compress = Component::new(
            "fusion.compress",
            Stack::new(vec![
                LayerSpec::Dense {
                    in_dim: cfg.image_feature_dim,
                    out_dim: cfg.feature_dim,
                },
                LayerSpec::LayerNorm {
                    dim: cfg.feature_dim,
                },
                LayerSpec::Relu,
            ]),
        );
        let (gate, cat_proj) = match cfg.mode {
            FusionMode::Prgf => (
                Some(Component::new(
                    "fusion.gate",
                    Stack::new(vec![
                        LayerSpec::Dense {
                            in_dim: cfg.feature_dim,
                            out_dim: cfg.feature_dim,
                        },
                        LayerSpec::Sigmoid,
                    ]),
                )),
                None,
            ),
            FusionMode::Concat => (
                None,
                Some(Component::new(
                    "fusion.cat_proj",
                    Stack::new(vec![LayerSpec::Dense {
                        in_dim: 2 * cfg.feature_dim,
                        out_dim: cfg.feature_dim,
                    }]),
                )),
            ),
        };
        Self {
            cfg,
            compress,
            gate,
            cat_proj,
        }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn register(&self, builder: &mut ParamStoreBuilder) {
        self.compress.register(builder);
        if let Some(g) = &self.gate {
            g.register(builder);
        }
        if let Some(p) = &self.cat_proj {
            p.register(builder);
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.compress.init(store, rng);
        if let Some(g) = &self.gate {
            g.init(store, rng);
        }
        if let Some(p) = &self.cat_proj {
            p.init(store, rng);
        }
    }

    /// Compress a raw image feature to the pose-feature width (ReLU output,
    /// so entries are nonnegative).
    pub fn compress_image_feature(
        &self,
        store: &ParamStore,
        f_img: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_img(f_img)?;
        let (y, _) = self.compress.forward(store, &f_img.clone().into_dyn())?;
        Ok(y.into_dimensionality().expect("2d"))
    }

    /// Gate weights from pose features; all entries in (0, 1).
    pub fn gate(&self, store: &ParamStore, f_pose: &Array2<f64>) -> Result<Array2<f64>> {
        let gate = self
            .gate
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("gate only exists in prgf mode".into()))?;
        let (y, _) = gate.forward(store, &f_pose.clone().into_dyn())?;
        Ok(y.into_dimensionality().expect("2d"))
    }

    /// Full fusion forward: `(f_fusion, gate stats per row, tape)`.
    ///
    /// Gate stats are only present in PRGF mode.
    pub fn forward(
        &self,
        store: &ParamStore,
        f_pose: &Array2<f64>,
        f_img: &Array2<f64>,
    ) -> Result<(Array2<f64>, Option<Vec<GateStats>>, FusionTape)> {
        self.check_img(f_img)?;
        if f_pose.ncols() != self.cfg.feature_dim {
            return Err(Error::ShapeMismatch {
                context: "fusion pose feature",
                expected: format!("(n, {})", self.cfg.feature_dim),
                got: format!("{:?}", f_pose.shape()),
            });
        }
        let (f_img_c, compress_tape) = self.compress.forward(store, &f_img.clone().into_dyn())?;
        let f_img_c: Array2<f64> = f_img_c.into_dimensionality().expect("2d");
        match self.cfg.mode {
            FusionMode::Prgf => {
                let gate = self.gate.as_ref().expect("prgf has a gate");
                let (w_g, gate_tape) = gate.forward(store, &f_pose.clone().into_dyn())?;
                let w_g: Array2<f64> = w_g.into_dimensionality().expect("2d");
                let fused = fuse_prgf(f_pose, &f_img_c, &w_g);
                let stats = w_g
                    .rows()
                    .into_iter()
                    .map(|row| {
                        let mut min = f64::INFINITY;
                        let mut max = f64::NEG_INFINITY;
                        let mut sum = 0.0;
                        for &v in row.iter() {
                            min = min.min(v);
                            max = max.max(v);
                            sum += v;
                        }
                        GateStats {
                            mean: sum / row.len() as f64,
                            min,
                            max,
                        }
                    })
                    .collect();
                Ok((
                    fused,
                    Some(stats),
                    FusionTape {
                        compress_tape,
                        kind: TapeKind::Prgf {
                            gate_tape,
                            w_g,
                            f_img_c,
                        },
                    },
                ))
            }
            FusionMode::Concat => {
                let n = f_pose.nrows();
                let d = self.cfg.feature_dim;
                let mut cat = Array2::<f64>::zeros((n, 2 * d));
                for i in 0..n {
                    for j in 0..d {
                        cat[(i, j)] = f_pose[(i, j)];
                        cat[(i, d + j)] = f_img_c[(i, j)];
                    }
                }
                let proj = self.cat_proj.as_ref().expect("concat has a projection");
                let (fused, proj_tape) = proj.forward(store, &cat.into_dyn())?;
                Ok((
                    fused.into_dimensionality().expect("2d"),
                    None,
                    FusionTape {
                        compress_tape,
                        kind: TapeKind::Concat { proj_tape },
                    },
                ))
            }
        }
    }

    /// Backward pass; returns `(d_f_pose, d_f_img)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &FusionTape,
        dy: &Array2<f64>,
        grads: &mut ParamStore,
    ) -> (Array2<f64>, Array2<f64>) {
        match &tape.kind {
            TapeKind::Prgf {
                gate_tape,
                w_g,
                f_img_c,
            } => {
                // f = f_pose + w_g (*) f_img_c
                let d_f_img_c = dy * w_g;
                let d_w_g = dy * f_img_c;
                let gate = self.gate.as_ref().expect("prgf has a gate");
                let d_pose_gate = gate.backward(store, gate_tape, &d_w_g.into_dyn(), grads);
                let d_pose_gate: Array2<f64> = d_pose_gate.into_dimensionality().expect("2d");
                let d_f_img =
                    self.compress
                        .backward(store, &tape.compress_tape, &d_f_img_c.into_dyn(), grads);
                let d_f_pose = dy + &d_pose_gate;
                (d_f_pose, d_f_img.into_dimensionality().expect("2d"))
            }
            TapeKind::Concat { proj_tape } => {
                let proj = self.cat_proj.as_ref().expect("concat has a projection");
                let dcat = proj.backward(store, proj_tape, &dy.clone().into_dyn(), grads);
                let dcat: Array2<f64> = dcat.into_dimensionality().expect("2d");
                let n = dcat.nrows();
                let d = self.cfg.feature_dim;
                let mut d_pose = Array2::<f64>::zeros((n, d));
                let mut d_img_c = Array2::<f64>::zeros((n, d));
                for i in 0..n {
                    for j in 0..d {
                        d_pose[(i, j)] = dcat[(i, j)];
                        d_img_c[(i, j)] = dcat[(i, d + j)];
                    }
                }
                let d_f_img =
                    self.compress
                        .backward(store, &tape.compress_tape, &d_img_c.into_dyn(), grads);
                (d_pose, d_f_img.into_dimensionality().expect("2d"))
            }
        }
    }

    fn check_img(&self, f_img: &Array2<f64>) -> Result<()> {
        if f_img.ncols() != self.cfg.image_feature_dim {
            return Err(Error::ShapeMismatch {
                context: "fusion image feature",
                expected: format!("(n, {})", self.cfg.image_feature_dim),
                got: format!("{:?}", f_img.shape()),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{grad_check_fn, sample_indices, FD_STEP};
    use proptest::prelude::*;
    use rand::Rng;

    fn build(mode: FusionMode, seed: u64) -> (FusionModule, ParamStore) {
        let cfg = FusionConfig {
            mode,
            image_feature_dim: 20,
            feature_dim: 8,
        };
        let m = FusionModule::new(cfg);
        let mut builder = ParamStore::builder();
        m.register(&mut builder);
        let mut store = builder.build_zeroed();
        let mut rng = crate::seeding::rng_for(seed, "fusion/init");
        m.init(&mut store, &mut rng);
        (m, store)
    }

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::seeding::rng_for(seed, "fusion/batch");
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn fuse_arithmetic() {
        // f_pose = 1s, f'_img = 2s, W_g = 0.5 -> 2s per entry.
        let f_pose = Array2::from_elem((1, 4), 1.0);
        let f_img = Array2::from_elem((1, 4), 2.0);
        let w_g = Array2::from_elem((1, 4), 0.5);
        let out = fuse_prgf(&f_pose, &f_img, &w_g);
        for v in out.iter() {
            assert_eq!(*v, 2.0);
        }
    }

    #[test]
    fn zero_image_feature_recovers_pose() {
        let f_pose = random(3, 4, 1);
        let f_img = Array2::zeros((3, 4));
        let w_g = random(3, 4, 2).mapv(crate::net::layers::sigmoid);
        let out = fuse_prgf(&f_pose, &f_img, &w_g);
        assert_eq!(out, f_pose);
    }

    #[test]
    fn gate_zero_params_is_half() {
        let cfg = FusionConfig {
            mode: FusionMode::Prgf,
            image_feature_dim: 20,
            feature_dim: 8,
        };
        let m = FusionModule::new(cfg);
        let mut builder = ParamStore::builder();
        m.register(&mut builder);
        let store = builder.build_zeroed();
        let w = m.gate(&store, &random(2, 8, 3)).unwrap();
        for v in w.iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn gate_saturation() {
        let (m, mut store) = build(FusionMode::Prgf, 4);
        // Zero weights, bias -20: entries below 1e-8.
        let dense_len = 8 * 8;
        {
            let gate_params = store.slice_mut("fusion.gate");
            for v in gate_params.iter_mut() {
                *v = 0.0;
            }
            for v in gate_params[dense_len..].iter_mut() {
                *v = -20.0;
            }
        }
        let w = m.gate(&store, &random(1, 8, 5)).unwrap();
        for v in w.iter() {
            assert!(*v < 1e-8);
        }
        {
            let gate_params = store.slice_mut("fusion.gate");
            for v in gate_params[dense_len..].iter_mut() {
                *v = 20.0;
            }
        }
        let w = m.gate(&store, &random(1, 8, 6)).unwrap();
        for v in w.iter() {
            assert!(*v > 1.0 - 1e-8);
        }
    }

    #[test]
    fn compressed_feature_is_nonnegative() {
        let (m, store) = build(FusionMode::Prgf, 7);
        let f = m.compress_image_feature(&store, &random(6, 20, 8)).unwrap();
        for v in f.iter() {
            assert!(*v >= 0.0);
        }
    }

    #[test]
    fn pose_dominance_bound() {
        let (m, store) = build(FusionMode::Prgf, 9);
        let f_pose = random(4, 8, 10);
        let f_img = random(4, 20, 11);
        let (fused, stats, _) = m.forward(&store, &f_pose, &f_img).unwrap();
        let f_img_c = m.compress_image_feature(&store, &f_img).unwrap();
        let stats = stats.unwrap();
        for i in 0..4 {
            let mut diff: f64 = 0.0;
            let mut img_inf: f64 = 0.0;
            for j in 0..8 {
                diff = diff.max((fused[(i, j)] - f_pose[(i, j)]).abs());
                img_inf = img_inf.max(f_img_c[(i, j)].abs());
            }
            assert!(diff <= stats[i].max * img_inf + 1e-12);
        }
    }

    #[test]
    fn grad_check_both_modes() {
        for (mode, seed) in [(FusionMode::Prgf, 12u64), (FusionMode::Concat, 13)] {
            let (m, store) = build(mode, seed);
            let f_pose = random(3, 8, seed + 1);
            let f_img = random(3, 20, seed + 2);
            let (fused, _, tape) = m.forward(&store, &f_pose, &f_img).unwrap();
            let mut grads = store.zeros_like();
            m.backward(&store, &tape, &fused, &mut grads);
            let indices = sample_indices(store.len(), 80, seed + 3);
            let report = grad_check_fn(
                |p| {
                    let mut probe = store.clone();
                    probe.data_mut().copy_from_slice(p);
                    let (f, _, _) = m.forward(&probe, &f_pose, &f_img).unwrap();
                    0.5 * f.iter().map(|v| v * v).sum::<f64>()
                },
                store.data(),
                grads.data(),
                &indices,
                FD_STEP,
            );
            assert!(
                report.pass(1e-4),
                "mode {mode}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    proptest! {
        #[test]
        fn gate_range_is_open_unit_interval(seed in 0u64..500) {
            let (m, store) = build(FusionMode::Prgf, 100);
            let f_pose = random(2, 8, seed);
            let w = m.gate(&store, &f_pose).unwrap();
            for v in w.iter() {
                prop_assert!(*v > 0.0 && *v < 1.0);
            }
        }
    }
}
