//! FiLM-conditioned temporal convolutional denoiser.
//!
//! The noisy action chunk enters as a `(batch, action_dim, 1, horizon)`
//! map and passes through three temporal convolutions. After the first two,
//! the activations are modulated per-channel by feature-wise linear
//! transforms computed from the conditioning vector (observation feature
//! concatenated with a sinusoidal embedding of the diffusion step index).
//! The network regresses the clean chunk directly (sample prediction).

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::error::Result;
use crate::net::layers::{gelu, gelu_derivative};
use crate::net::{
    Component, Conv2dSpec, LayerSpec, ParamStore, ParamStoreBuilder, Stack, StackTape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub horizon: usize,
    pub action_dim: usize,
    /// Hidden channel count of the temporal convolutions.
    pub channels: usize,
    /// Width of the conditioning feature (pose or fused feature).
    pub cond_dim: usize,
    /// Sinusoidal step-embedding width (must be even).
    pub k_emb_dim: usize,
    /// Hidden width of the conditioning trunk.
    pub cond_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            action_dim: 9,
            channels: 64,
            cond_dim: 128,
            k_emb_dim: 64,
            cond_hidden: 128,
        }
    }
}

impl DenoiserConfig {
    pub fn canonical(&self) -> String {
        format!(
            "denoiser.horizon={}\ndenoiser.action_dim={}\ndenoiser.channels={}\ndenoiser.cond_dim={}\ndenoiser.k_emb_dim={}\ndenoiser.cond_hidden={}\n",
            self.horizon, self.action_dim, self.channels, self.cond_dim, self.k_emb_dim, self.cond_hidden
        )
    }
}

pub struct DenoiserTape {
    kmlp_tape: StackTape,
    cond_tape: StackTape,
    film1_tape: StackTape,
    film2_tape: StackTape,
    conv1_tape: StackTape,
    conv2_tape: StackTape,
    conv3_tape: StackTape,
    y1: Array4<f64>,
    y1f: Array4<f64>,
    scale1: Array2<f64>,
    y2: Array4<f64>,
    y2f: Array4<f64>,
    scale2: Array2<f64>,
    batch: usize,
}

pub struct Denoiser {
    cfg: DenoiserConfig,
    kmlp: Component,
    cond: Component,
    film1: Component,
    film2: Component,
    conv1: Component,
    conv2: Component,
    conv3: Component,
}

fn temporal_conv(name: &str, in_ch: usize, out_ch: usize) -> Component {
    Component::new(
        name,
        Stack::new(vec![LayerSpec::Conv2d(Conv2dSpec {
            in_ch,
            out_ch,
            kernel: (1, 3),
            stride: (1, 1),
            pad: (0, 1),
        })]),
    )
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Self {
        assert!(cfg.k_emb_dim % 2 == 0, "sinusoidal embedding needs even width");
        Self {
            kmlp: Component::new(
                "den.kmlp",
                Stack::new(vec![
                    LayerSpec::Dense {
                        in_dim: cfg.k_emb_dim,
                        out_dim: cfg.k_emb_dim,
                    },
                    LayerSpec::Gelu,
                ]),
            ),
            cond: Component::new(
                "den.cond",
                Stack::new(vec![
                    LayerSpec::Dense {
                        in_dim: cfg.cond_dim + cfg.k_emb_dim,
                        out_dim: cfg.cond_hidden,
                    },
                    LayerSpec::Gelu,
                ]),
            ),
            film1: Component::new(
                "den.film1",
                Stack::new(vec![LayerSpec::Dense {
                    in_dim: cfg.cond_hidden,
                    out_dim: 2 * cfg.channels,
                }]),
            ),
            film2: Component::new(
                "den.film2",
                Stack::new(vec![LayerSpec::Dense {
                    in_dim: cfg.cond_hidden,
                    out_dim: 2 * cfg.channels,
                }]),
            ),
            conv1: temporal_conv("den.conv1", cfg.action_dim, cfg.channels),
            conv2: temporal_conv("den.conv2", cfg.channels, cfg.channels),
            conv3: temporal_conv("den.conv3", cfg.channels, cfg.action_dim),
            cfg,
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn register(&self, builder: &mut ParamStoreBuilder) {
        self.kmlp.register(builder);
        self.cond.register(builder);
        self.film1.register(builder);
        self.film2.register(builder);
        self.conv1.register(builder);
        self.conv2.register(builder);
        self.conv3.register(builder);
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.kmlp.init(store, rng);
        self.cond.init(store, rng);
        self.film1.init(store, rng);
        self.film2.init(store, rng);
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        self.conv3.init(store, rng);
    }

    /// Sinusoidal embedding of diffusion step indices.
    pub fn k_embedding(&self, ks: &[usize]) -> Array2<f64> {
        let d = self.cfg.k_emb_dim;
        let half = d / 2;
        let mut out = Array2::<f64>::zeros((ks.len(), d));
        for (i, &k) in ks.iter().enumerate() {
            for j in 0..half {
                let freq = (10_000f64).powf(-(j as f64) / half as f64);
                let angle = k as f64 * freq;
                out[(i, 2 * j)] = angle.sin();
                out[(i, 2 * j + 1)] = angle.cos();
            }
        }
        out
    }

    /// Predict the clean chunk from a noisy one.
    ///
    /// `chunks`: `(n, horizon, action_dim)`, `ks`: per-sample step index,
    /// `feat`: `(n, cond_dim)` conditioning features.
    pub fn forward(
        &self,
        store: &ParamStore,
        chunks: &Array2<f64>,
        ks: &[usize],
        feat: &Array2<f64>,
    ) -> Result<(Array2<f64>, DenoiserTape)> {
        // `chunks` arrives flattened as (n, horizon * action_dim).
        let n = chunks.nrows();
        let h = self.cfg.horizon;
        let a = self.cfg.action_dim;
        let c = self.cfg.channels;
        debug_assert_eq!(chunks.ncols(), h * a);
        debug_assert_eq!(ks.len(), n);

        // (n, h*a) -> (n, a, 1, h): channels-first temporal layout.
        let mut x = Array4::<f64>::zeros((n, a, 1, h));
        for i in 0..n {
            for t in 0..h {
                for j in 0..a {
                    x[(i, j, 0, t)] = chunks[(i, t * a + j)];
                }
            }
        }

        // Conditioning vector.
        let k_emb = self.k_embedding(ks);
        let (kf, kmlp_tape) = self.kmlp.forward(store, &k_emb.into_dyn())?;
        let kf: Array2<f64> = kf.into_dimensionality().expect("2d");
        let mut cond_in = Array2::<f64>::zeros((n, self.cfg.cond_dim + self.cfg.k_emb_dim));
        for i in 0..n {
            for j in 0..self.cfg.cond_dim {
                cond_in[(i, j)] = feat[(i, j)];
            }
            for j in 0..self.cfg.k_emb_dim {
                cond_in[(i, self.cfg.cond_dim + j)] = kf[(i, j)];
            }
        }
        let (cvec, cond_tape) = self.cond.forward(store, &cond_in.into_dyn())?;
        let (g1, film1_tape) = self.film1.forward(store, &cvec)?;
        let (g2, film2_tape) = self.film2.forward(store, &cvec)?;
        let g1: Array2<f64> = g1.into_dimensionality().expect("2d");
        let g2: Array2<f64> = g2.into_dimensionality().expect("2d");

        // Block 1: conv -> FiLM -> GELU.
        let (y1, conv1_tape) = self.conv1.forward(store, &x.into_dyn())?;
        let y1: Array4<f64> = y1.into_dimensionality().expect("4d");
        let scale1 = g1.slice(ndarray::s![.., ..c]).to_owned();
        let mut y1f = y1.clone();
        for i in 0..n {
            for ch in 0..c {
                let s = 1.0 + scale1[(i, ch)];
                let b = g1[(i, c + ch)];
                for t in 0..h {
                    y1f[(i, ch, 0, t)] = y1[(i, ch, 0, t)] * s + b;
                }
            }
        }
        let a1 = y1f.mapv(gelu);

        // Block 2.
        let (y2, conv2_tape) = self.conv2.forward(store, &a1.into_dyn())?;
        let y2: Array4<f64> = y2.into_dimensionality().expect("4d");
        let scale2 = g2.slice(ndarray::s![.., ..c]).to_owned();
        let mut y2f = y2.clone();
        for i in 0..n {
            for ch in 0..c {
                let s = 1.0 + scale2[(i, ch)];
                let b = g2[(i, c + ch)];
                for t in 0..h {
                    y2f[(i, ch, 0, t)] = y2[(i, ch, 0, t)] * s + b;
                }
            }
        }
        let a2 = y2f.mapv(gelu);

        let (out, conv3_tape) = self.conv3.forward(store, &a2.into_dyn())?;
        let out: Array4<f64> = out.into_dimensionality().expect("4d");
        let mut pred = Array2::<f64>::zeros((n, h * a));
        for i in 0..n {
            for t in 0..h {
                for j in 0..a {
                    pred[(i, t * a + j)] = out[(i, j, 0, t)];
                }
            }
        }
        Ok((
            pred,
            DenoiserTape {
                kmlp_tape,
                cond_tape,
                film1_tape,
                film2_tape,
                conv1_tape,
                conv2_tape,
                conv3_tape,
                y1,
                y1f,
                scale1,
                y2,
                y2f,
                scale2,
                batch: n,
            },
        ))
    }

    /// Backward pass. Returns the conditioning-feature cotangent `(n, cond_dim)`;
    /// gradients with respect to the noisy chunk are not needed by training
    /// and are dropped.
    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &DenoiserTape,
        dpred: &Array2<f64>,
        grads: &mut ParamStore,
    ) -> Array2<f64> {
        let n = tape.batch;
        let h = self.cfg.horizon;
        let a = self.cfg.action_dim;
        let c = self.cfg.channels;

        let mut dout = Array4::<f64>::zeros((n, a, 1, h));
        for i in 0..n {
            for t in 0..h {
                for j in 0..a {
                    dout[(i, j, 0, t)] = dpred[(i, t * a + j)];
                }
            }
        }
        let da2 = self
            .conv3
            .backward(store, &tape.conv3_tape, &dout.into_dyn(), grads);
        let da2: Array4<f64> = da2.into_dimensionality().expect("4d");

        // GELU + FiLM 2.
        let mut dy2f = da2;
        dy2f.zip_mut_with(&tape.y2f, |d, &p| *d *= gelu_derivative(p));
        let mut dy2 = Array4::<f64>::zeros((n, c, 1, h));
        let mut dg2 = Array2::<f64>::zeros((n, 2 * c));
        for i in 0..n {
            for ch in 0..c {
                let s = 1.0 + tape.scale2[(i, ch)];
                let mut ds = 0.0;
                let mut db = 0.0;
                for t in 0..h {
                    let d = dy2f[(i, ch, 0, t)];
                    dy2[(i, ch, 0, t)] = d * s;
                    ds += d * tape.y2[(i, ch, 0, t)];
                    db += d;
                }
                dg2[(i, ch)] = ds;
                dg2[(i, c + ch)] = db;
            }
        }
        let da1 = self
            .conv2
            .backward(store, &tape.conv2_tape, &dy2.into_dyn(), grads);
        let da1: Array4<f64> = da1.into_dimensionality().expect("4d");

        // GELU + FiLM 1.
        let mut dy1f = da1;
        dy1f.zip_mut_with(&tape.y1f, |d, &p| *d *= gelu_derivative(p));
        let mut dy1 = Array4::<f64>::zeros((n, c, 1, h));
        let mut dg1 = Array2::<f64>::zeros((n, 2 * c));
        for i in 0..n {
            for ch in 0..c {
                let s = 1.0 + tape.scale1[(i, ch)];
                let mut ds = 0.0;
                let mut db = 0.0;
                for t in 0..h {
                    let d = dy1f[(i, ch, 0, t)];
                    dy1[(i, ch, 0, t)] = d * s;
                    ds += d * tape.y1[(i, ch, 0, t)];
                    db += d;
                }
                dg1[(i, ch)] = ds;
                dg1[(i, c + ch)] = db;
            }
        }
        self.conv1
            .backward(store, &tape.conv1_tape, &dy1.into_dyn(), grads);

        // Conditioning trunk.
        let dc1 = self
            .film1
            .backward(store, &tape.film1_tape, &dg1.into_dyn(), grads);
        let dc2 = self
            .film2
            .backward(store, &tape.film2_tape, &dg2.into_dyn(), grads);
        let dcvec = &dc1 + &dc2;
        let dcond_in = self.cond.backward(store, &tape.cond_tape, &dcvec, grads);
        let dcond_in: Array2<f64> = dcond_in.into_dimensionality().expect("2d");

        let mut dfeat = Array2::<f64>::zeros((n, self.cfg.cond_dim));
        let mut dkf = Array2::<f64>::zeros((n, self.cfg.k_emb_dim));
        for i in 0..n {
            for j in 0..self.cfg.cond_dim {
                dfeat[(i, j)] = dcond_in[(i, j)];
            }
            for j in 0..self.cfg.k_emb_dim {
                dkf[(i, j)] = dcond_in[(i, self.cfg.cond_dim + j)];
            }
        }
        // The sinusoidal embedding has no parameters; stop after the MLP.
        self.kmlp
            .backward(store, &tape.kmlp_tape, &dkf.into_dyn(), grads);
        dfeat
    }
}
