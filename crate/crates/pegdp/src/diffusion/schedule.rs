//! Diffusion noise schedules.
//!
//! A schedule holds the cumulative signal coefficients `alpha_bar[k]` for
//! `k = 0..=K`, where `k = 0` is the clean end (`alpha_bar[0] == 1` exactly)
//! and `k = K` the noisy end (`alpha_bar[K]` near zero). `beta_hat[k] =
//! sqrt(1 - alpha_bar[k])` is stored alongside; `alpha_bar` is re-derived
//! from it so that `beta_hat^2 + alpha_bar == 1` holds exactly in `f64`.

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Squared-cosine schedule (offset 0.008, betas clipped at 0.999).
    SquaredCosine,
    /// Linear beta ramp, scaled so the noisy end stays near zero signal
    /// for any step count.
    Linear,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::SquaredCosine => f.write_str("squared-cosine"),
            ScheduleKind::Linear => f.write_str("linear"),
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared-cosine" => Ok(ScheduleKind::SquaredCosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::InvalidConfig(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Noise schedule over `K` diffusion steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    kind: ScheduleKind,
    /// `alpha_bar[k]`, `k = 0..=K`; index 0 is exactly 1.
    alpha_bar: Vec<f64>,
    /// `beta_hat[k] = sqrt(1 - alpha_bar[k])`; index 0 is exactly 0.
    beta_hat: Vec<f64>,
    /// Default sub-sequencing stride for DDIM (a hint; samplers may pass an
    /// explicit step count instead).
    sampler_stride: usize,
}

/// Default number of DDIM inference steps.
pub const DEFAULT_DDIM_STEPS: usize = 16;

/// Build a schedule with `K >= 1` steps.
pub fn make_schedule(k_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if k_steps == 0 {
        return Err(Error::InvalidConfig("schedule needs at least one step".into()));
    }
    let raw: Vec<f64> = match kind {
        ScheduleKind::SquaredCosine => {
            let s = 0.008;
            let f = |k: f64| {
                let x = (k / k_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            let f0 = f(0.0);
            let mut alpha_bar = Vec::with_capacity(k_steps);
            let mut prev = 1.0;
            for k in 1..=k_steps {
                let beta = (1.0 - f(k as f64) / f((k - 1) as f64)).min(0.999);
                prev *= 1.0 - beta;
                let _ = f0;
                alpha_bar.push(prev);
            }
            alpha_bar
        }
        ScheduleKind::Linear => {
            // Classic 1e-4..2e-2 ramp defined at 1000 steps, rescaled so the
            // total injected noise is step-count independent.
            let scale = 1000.0 / k_steps as f64;
            let beta_start = 1e-4 * scale;
            let beta_end = 2e-2 * scale;
            let mut alpha_bar = Vec::with_capacity(k_steps);
            let mut prev = 1.0;
            for k in 0..k_steps {
                let frac = if k_steps == 1 {
                    0.5
                } else {
                    k as f64 / (k_steps - 1) as f64
                };
                let beta = (beta_start + frac * (beta_end - beta_start)).min(0.999);
                prev *= 1.0 - beta;
                alpha_bar.push(prev);
            }
            alpha_bar
        }
    };

    // Store beta_hat = sqrt(1 - raw) and re-derive alpha_bar = 1 - beta_hat^2
    // so the definitional identity holds bit-exactly. alpha_bar is floored
    // away from zero (values below ~1e-16 would round beta_hat to exactly 1)
    // and kept strictly decreasing through the floored region.
    const ALPHA_BAR_MIN: f64 = 1e-8;
    let mut alpha_bar = Vec::with_capacity(k_steps + 1);
    let mut beta_hat = Vec::with_capacity(k_steps + 1);
    alpha_bar.push(1.0);
    beta_hat.push(0.0);
    let mut prev = 1.0;
    for &raw_a in &raw {
        let mut a = raw_a.max(ALPHA_BAR_MIN).min(prev);
        loop {
            let b = (1.0 - a).sqrt();
            let stored = 1.0 - b * b;
            if stored < prev {
                beta_hat.push(b);
                alpha_bar.push(stored);
                prev = stored;
                break;
            }
            a *= 1.0 - 1e-5;
        }
    }

    let sched = NoiseSchedule {
        steps: k_steps,
        kind,
        alpha_bar,
        beta_hat,
        sampler_stride: (k_steps / DEFAULT_DDIM_STEPS).max(1),
    };
    sched.validate()?;
    Ok(sched)
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn sampler_stride(&self) -> usize {
        self.sampler_stride
    }

    /// `alpha_bar[k]` for `k = 0..=K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    /// `beta_hat[k] = sqrt(1 - alpha_bar[k])`.
    pub fn beta_hat(&self, k: usize) -> f64 {
        self.beta_hat[k]
    }

    fn validate(&self) -> Result<()> {
        for k in 1..=self.steps {
            let a = self.alpha_bar[k];
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "alpha_bar[{k}] = {a} out of (0, 1]"
                )));
            }
            if a >= self.alpha_bar[k - 1] {
                return Err(Error::InvalidConfig(format!(
                    "alpha_bar not strictly decreasing at {k}"
                )));
            }
        }
        Ok(())
    }

    /// Descending DDIM sub-sequence: `steps` indices ending at the noisy end,
    /// evenly spaced, with an implicit terminal step 0 (the clean end).
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(Error::InvalidConfig("ddim needs at least one step".into()));
        }
        if steps > self.steps {
            return Err(Error::InvalidConfig(format!(
                "ddim steps {steps} exceed schedule length {}",
                self.steps
            )));
        }
        let mut ts: Vec<usize> = (1..=steps).map(|i| i * self.steps / steps).collect();
        ts.reverse();
        Ok(ts)
    }
}

/// One forward noising step with explicit coefficients:
/// `sqrt(alpha_bar) * a0 + sqrt(1 - alpha_bar) * eps`, with the noise weight
/// supplied directly as `beta_hat`.
pub fn add_noise_affine(alpha_bar: f64, beta_hat: f64, a0: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    let signal = alpha_bar.sqrt();
    let mut out = a0 * signal;
    out.zip_mut_with(eps, |o, &e| *o += beta_hat * e);
    out
}

/// Forward noising at schedule step `k` (in `1..=K`).
pub fn add_noise(
    sched: &NoiseSchedule,
    a0: &Array2<f64>,
    k: usize,
    eps: &Array2<f64>,
) -> Array2<f64> {
    assert!(k >= 1 && k <= sched.steps, "k out of range");
    add_noise_affine(sched.alpha_bar(k), sched.beta_hat(k), a0, eps)
}
