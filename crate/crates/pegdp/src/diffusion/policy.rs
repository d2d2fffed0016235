//! Policy variants: encoders + denoiser + DDIM sampling.
//!
//! Four variants cover the ablation grid: `posedp-mlp` and `posedp-dpe`
//! condition the denoiser on pose features alone; `rpdp-cat` and
//! `rpdp-prgf` add the goal-conditioned RGBD encoder, fused by plain
//! concatenation or by pose-guided residual gating.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::ActionNorm;
use crate::diffusion::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::schedule::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode, FusionModule, FusionTape, GateStats};
use crate::net::checkpoint::{config_hash, read_checkpoint, write_checkpoint, Checkpoint};
use crate::net::{ParamStore, Tensor};
use crate::pose_encoder::{AttentionMode, DpeConfig, PoseEncoder, PoseEncoderKind, PoseTape};
use crate::rgbd::encoder::{GieConfig, GoalConditionedEncoder, GieTape};
use crate::rgbd::RgbdPatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    PoseDpMlp,
    PoseDpDpe,
    RpdpCat,
    RpdpPrgf,
}

impl Variant {
    pub fn needs_patches(&self) -> bool {
        matches!(self, Variant::RpdpCat | Variant::RpdpPrgf)
    }

    fn encoder_kind(&self) -> PoseEncoderKind {
        match self {
            Variant::PoseDpMlp => PoseEncoderKind::Mlp,
            _ => PoseEncoderKind::Dpe,
        }
    }

    fn fusion_mode(&self) -> Option<FusionMode> {
        match self {
            Variant::RpdpCat => Some(FusionMode::Concat),
            Variant::RpdpPrgf => Some(FusionMode::Prgf),
            _ => None,
        }
    }

    pub const ALL: [Variant; 4] = [
        Variant::PoseDpMlp,
        Variant::PoseDpDpe,
        Variant::RpdpCat,
        Variant::RpdpPrgf,
    ];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::PoseDpMlp => "posedp-mlp",
            Variant::PoseDpDpe => "posedp-dpe",
            Variant::RpdpCat => "rpdp-cat",
            Variant::RpdpPrgf => "rpdp-prgf",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posedp-mlp" => Ok(Variant::PoseDpMlp),
            "posedp-dpe" => Ok(Variant::PoseDpDpe),
            "rpdp-cat" => Ok(Variant::RpdpCat),
            "rpdp-prgf" => Ok(Variant::RpdpPrgf),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub variant: Variant,
    /// Prediction horizon (action chunk length).
    pub horizon: usize,
    /// Steps executed per inference before re-planning.
    pub exec_steps: usize,
    /// Diffusion training steps K.
    pub k_steps: usize,
    /// Default DDIM inference steps.
    pub ddim_steps: usize,
    pub schedule: ScheduleKind,
    pub feature_dim: usize,
    pub dpe: DpeConfig,
    pub gie: GieConfig,
    pub denoiser_channels: usize,
}

impl PolicyConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            horizon: 16,
            exec_steps: 8,
            k_steps: 100,
            ddim_steps: 16,
            schedule: ScheduleKind::SquaredCosine,
            feature_dim: 128,
            dpe: DpeConfig {
                kind: variant.encoder_kind(),
                ..Default::default()
            },
            gie: GieConfig::default(),
            denoiser_channels: 64,
        }
    }

    fn fusion_config(&self) -> Option<FusionConfig> {
        self.variant.fusion_mode().map(|mode| FusionConfig {
            mode,
            image_feature_dim: self.gie.image_feature_dim,
            feature_dim: self.feature_dim,
        })
    }

    fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            horizon: self.horizon,
            action_dim: 9,
            channels: self.denoiser_channels,
            cond_dim: self.feature_dim,
            ..Default::default()
        }
    }

    /// Canonical `key=value` lines; hashed into the checkpoint header.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("variant={}\n", self.variant));
        s.push_str(&format!("horizon={}\n", self.horizon));
        s.push_str(&format!("exec_steps={}\n", self.exec_steps));
        s.push_str(&format!("k_steps={}\n", self.k_steps));
        s.push_str(&format!("ddim_steps={}\n", self.ddim_steps));
        s.push_str(&format!("schedule={}\n", self.schedule));
        s.push_str(&format!("feature_dim={}\n", self.feature_dim));
        s.push_str(&format!("denoiser.channels={}\n", self.denoiser_channels));
        s.push_str(&self.dpe.canonical());
        if self.variant.needs_patches() {
            s.push_str(&self.gie.canonical());
            if let Some(f) = self.fusion_config() {
                s.push_str(&f.canonical());
            }
        }
        s
    }

    fn from_meta(meta: &BTreeMap<String, String>, path: &Path) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            meta.get(k).ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("missing config key {k}"),
            })
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                reason: format!("invalid {k}"),
            })
        };
        let variant: Variant = get("variant")?.parse()?;
        let mut cfg = PolicyConfig::for_variant(variant);
        cfg.horizon = parse_usize("horizon")?;
        cfg.exec_steps = parse_usize("exec_steps")?;
        cfg.k_steps = parse_usize("k_steps")?;
        cfg.ddim_steps = parse_usize("ddim_steps")?;
        cfg.schedule = get("schedule")?.parse()?;
        cfg.feature_dim = parse_usize("feature_dim")?;
        cfg.denoiser_channels = parse_usize("denoiser.channels")?;
        cfg.dpe = DpeConfig {
            kind: variant.encoder_kind(),
            branch_hidden: parse_usize("pose_encoder.branch_hidden")?,
            branch_out: parse_usize("pose_encoder.branch_out")?,
            feature_dim: parse_usize("pose_encoder.feature_dim")?,
            attention: match get("pose_encoder.attention")?.as_str() {
                "TwoToken" => AttentionMode::TwoToken,
                "OneToken" => AttentionMode::OneToken,
                other => {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        reason: format!("unknown attention mode {other}"),
                    })
                }
            },
        };
        if variant.needs_patches() {
            cfg.gie = GieConfig {
                patch_size: parse_usize("gie.patch_size")?,
                trunk_ch1: parse_usize("gie.trunk_ch1")?,
                trunk_ch2: parse_usize("gie.trunk_ch2")?,
                token_patch: parse_usize("gie.token_patch")?,
                token_dim: parse_usize("gie.token_dim")?,
                image_feature_dim: parse_usize("gie.image_feature_dim")?,
                depth_scale: get("gie.depth_scale")?.parse().map_err(|_| Error::Format {
                    path: path.display().to_string(),
                    reason: "invalid gie.depth_scale".into(),
                })?,
            };
        }
        Ok(cfg)
    }
}

/// A batch of observations ready for the feature path.
pub struct ObsBatch {
    /// Normalized relative-pose 9-vectors, `(n, 9)`.
    pub pose: Array2<f64>,
    /// Current and goal image tensors `(n, 4, s, s)`, for RPDP variants.
    pub images: Option<(Array4<f64>, Array4<f64>)>,
}

pub struct FeatTape {
    pose_tape: PoseTape,
    gie_tape: Option<GieTape>,
    fusion_tape: Option<FusionTape>,
}

/// A trainable (or trained) policy.
pub struct Policy {
    pub cfg: PolicyConfig,
    pub params: ParamStore,
    pub sched: NoiseSchedule,
    pub norm: ActionNorm,
    /// Frozen per-dataset goal patch (RPDP variants).
    pub goal_patch: Option<RgbdPatch>,
    /// Longest expert episode seen at training time; drives eval step caps.
    pub expert_len: usize,
    pose_encoder: PoseEncoder,
    gie: Option<GoalConditionedEncoder>,
    fusion: Option<FusionModule>,
    denoiser: Denoiser,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, norm: ActionNorm, seed: u64) -> Result<Self> {
        let pose_encoder = PoseEncoder::new(cfg.dpe)?;
        let gie = if cfg.variant.needs_patches() {
            Some(GoalConditionedEncoder::new(cfg.gie)?)
        } else {
            None
        };
        let fusion = cfg.fusion_config().map(FusionModule::new);
        let denoiser = Denoiser::new(cfg.denoiser_config());

        let mut builder = ParamStore::builder();
        pose_encoder.register(&mut builder);
        if let Some(g) = &gie {
            g.register(&mut builder);
        }
        if let Some(f) = &fusion {
            f.register(&mut builder);
        }
        denoiser.register(&mut builder);
        let mut params = builder.build_zeroed();

        let mut rng = crate::seeding::rng_for(seed, "policy/init");
        pose_encoder.init(&mut params, &mut rng);
        if let Some(g) = &gie {
            g.init(&mut params, &mut rng);
        }
        if let Some(f) = &fusion {
            f.init(&mut params, &mut rng);
        }
        denoiser.init(&mut params, &mut rng);

        let sched = make_schedule(cfg.k_steps, cfg.schedule)?;
        Ok(Self {
            cfg,
            params,
            sched,
            norm,
            goal_patch: None,
            expert_len: 0,
            pose_encoder,
            gie,
            fusion,
            denoiser,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Observation features for the denoiser; gate stats are returned for
    /// the PRGF variant.
    pub fn features(
        &self,
        obs: &ObsBatch,
    ) -> Result<(Array2<f64>, FeatTape, Option<Vec<GateStats>>)> {
        let (f_pose, pose_tape) = self.pose_encoder.forward(&self.params, &obs.pose)?;
        match (&self.gie, &self.fusion) {
            (Some(gie), Some(fusion)) => {
                let (cur, goal) = obs.images.as_ref().ok_or_else(|| {
                    Error::MissingPatches(self.cfg.variant.to_string())
                })?;
                let (f_img, gie_tape) = gie.forward(&self.params, cur, goal)?;
                let (fused, stats, fusion_tape) = fusion.forward(&self.params, &f_pose, &f_img)?;
                Ok((
                    fused,
                    FeatTape {
                        pose_tape,
                        gie_tape: Some(gie_tape),
                        fusion_tape: Some(fusion_tape),
                    },
                    stats,
                ))
            }
            _ => Ok((
                f_pose,
                FeatTape {
                    pose_tape,
                    gie_tape: None,
                    fusion_tape: None,
                },
                None,
            )),
        }
    }

    fn features_backward(&self, tape: &FeatTape, dfeat: &Array2<f64>, grads: &mut ParamStore) {
        match (&self.gie, &self.fusion, &tape.gie_tape, &tape.fusion_tape) {
            (Some(gie), Some(fusion), Some(gie_tape), Some(fusion_tape)) => {
                let (d_pose, d_img) = fusion.backward(&self.params, fusion_tape, dfeat, grads);
                gie.backward(&self.params, gie_tape, &d_img, grads);
                self.pose_encoder
                    .backward(&self.params, &tape.pose_tape, &d_pose, grads);
            }
            _ => {
                self.pose_encoder
                    .backward(&self.params, &tape.pose_tape, dfeat, grads);
            }
        }
    }

    /// One training objective evaluation over a batch.
    ///
    /// Per sample: draw `k` uniform in `[1, K]` and Gaussian noise, form the
    /// noised chunk, predict the clean chunk, and take the mean squared
    /// error against the clean target. Returns the loss and parameter
    /// gradients. Deterministic for a given RNG state.
    pub fn training_loss<R: Rng>(
        &self,
        obs: &ObsBatch,
        chunks: &Array2<f64>,
        rng: &mut R,
    ) -> Result<(f64, ParamStore)> {
        let n = chunks.nrows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let width = self.cfg.horizon * 9;
        debug_assert_eq!(chunks.ncols(), width);

        let ks: Vec<usize> = (0..n)
            .map(|_| rng.gen_range(1..=self.cfg.k_steps))
            .collect();
        let eps = Array2::<f64>::from_shape_fn((n, width), |_| rng.sample(StandardNormal));

        let mut noisy = Array2::<f64>::zeros((n, width));
        for i in 0..n {
            let a = self.sched.alpha_bar(ks[i]);
            let b = self.sched.beta_hat(ks[i]);
            let signal = a.sqrt();
            for j in 0..width {
                noisy[(i, j)] = signal * chunks[(i, j)] + b * eps[(i, j)];
            }
        }

        let (feat, feat_tape, _) = self.features(obs)?;
        let (pred, den_tape) = self.denoiser.forward(&self.params, &noisy, &ks, &feat)?;

        let count = (n * width) as f64;
        let mut loss = 0.0;
        let mut dpred = Array2::<f64>::zeros((n, width));
        for i in 0..n {
            for j in 0..width {
                let diff = pred[(i, j)] - chunks[(i, j)];
                loss += diff * diff;
                dpred[(i, j)] = 2.0 * diff / count;
            }
        }
        loss /= count;

        let mut grads = self.params.zeros_like();
        let dfeat = self
            .denoiser
            .backward(&self.params, &den_tape, &dpred, &mut grads);
        self.features_backward(&feat_tape, &dfeat, &mut grads);
        Ok((loss, grads))
    }

    /// Loss-only evaluation (no gradients), for logging.
    pub fn eval_loss<R: Rng>(&self, obs: &ObsBatch, chunks: &Array2<f64>, rng: &mut R) -> Result<f64> {
        let (loss, _) = self.training_loss(obs, chunks, rng)?;
        Ok(loss)
    }

    /// Deterministic DDIM sampling (eta = 0) with sample prediction.
    ///
    /// The initial Gaussian draw is the only randomness; everything after is
    /// a pure function of it. Returns the flattened normalized chunk and the
    /// gate statistics of the conditioning pass (PRGF only).
    pub fn ddim_sample<R: Rng>(
        &self,
        obs: &ObsBatch,
        steps: usize,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Option<GateStats>)> {
        let n = obs.pose.nrows();
        if n != 1 {
            return Err(Error::InvalidConfig("ddim_sample expects a single observation".into()));
        }
        let width = self.cfg.horizon * 9;
        let (feat, _, stats) = self.features(obs)?;
        let gate = stats.and_then(|s| s.first().copied());

        let mut a_k = Array2::<f64>::from_shape_fn((1, width), |_| rng.sample(StandardNormal));
        let timesteps = self.sched.ddim_timesteps(steps)?;
        for (i, &k) in timesteps.iter().enumerate() {
            let k_prev = if i + 1 < timesteps.len() {
                timesteps[i + 1]
            } else {
                0
            };
            let (pred, _) = self.denoiser.forward(&self.params, &a_k, &[k], &feat)?;
            let alpha = self.sched.alpha_bar(k);
            let beta = self.sched.beta_hat(k);
            let signal = alpha.sqrt();
            let alpha_prev = self.sched.alpha_bar(k_prev);
            let beta_prev = self.sched.beta_hat(k_prev);
            let signal_prev = alpha_prev.sqrt();
            for j in 0..width {
                let eps_hat = (a_k[(0, j)] - signal * pred[(0, j)]) / beta;
                a_k[(0, j)] = signal_prev * pred[(0, j)] + beta_prev * eps_hat;
            }
        }
        if a_k.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite sample".into()));
        }
        Ok((a_k.into_raw_vec_and_offset().0, gate))
    }

    // -- checkpointing -----------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let canonical = self.cfg.canonical();
        let mut meta: BTreeMap<String, String> = BTreeMap::new();
        for line in canonical.lines() {
            if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        meta.insert("config_hash".to_string(), config_hash(&canonical));
        meta.insert("expert_len".to_string(), format!("{}", self.expert_len));
        for (k, v) in self.norm.to_meta() {
            meta.insert(k, v);
        }
        let mut blobs = Vec::new();
        if let Some(patch) = &self.goal_patch {
            let mut bytes = Vec::with_capacity(4 + patch.data().len() * 4);
            bytes.extend_from_slice(&(patch.size as u32).to_le_bytes());
            for v in patch.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            blobs.push(("goal_patch".to_string(), bytes));
        }
        write_checkpoint(path, &meta, &self.params, &blobs)
    }

    pub fn load(path: &Path) -> Result<Policy> {
        let Checkpoint { meta, params, blobs } = read_checkpoint(path)?;
        let cfg = PolicyConfig::from_meta(&meta, path)?;
        let canonical = cfg.canonical();
        let stored_hash = meta.get("config_hash").cloned().unwrap_or_default();
        if config_hash(&canonical) != stored_hash {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "config hash mismatch".to_string(),
            });
        }
        let norm = ActionNorm::from_meta(&meta)?;
        let expert_len = meta
            .get("expert_len")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        let mut policy = Policy::new(cfg, norm, 0)?;
        if policy.params.len() != params.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!(
                    "parameter count mismatch: config wants {}, blob has {}",
                    policy.params.len(),
                    params.len()
                ),
            });
        }
        policy.params = params;
        policy.expert_len = expert_len;
        for (name, bytes) in blobs {
            if name == "goal_patch" {
                if bytes.len() < 4 {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        reason: "truncated goal patch".to_string(),
                    });
                }
                let size = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
                let mut data = Vec::with_capacity(size * size * 4);
                for c in bytes[4..].chunks_exact(4) {
                    data.push(f32::from_le_bytes(c.try_into().unwrap()));
                }
                policy.goal_patch = Some(RgbdPatch::from_data(size, data)?);
            }
        }
        Ok(policy)
    }
}

/// Suppress unused-import warning for Tensor re-export used in docs.
#[allow(dead_code)]
fn _doc_types(_: Tensor) {}
