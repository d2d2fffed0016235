//! Task specifications: geometry, sampling regions, noise model, control
//! limits, camera intrinsics. Serialized as plain `key = value` text.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::sha256_hex;
use crate::error::{Error, Result};

/// Full description of one insertion task.
///
/// Lengths are millimeters, angles radians. The target block sits on the
/// table with the hole mouth at its top face; the peg is a rectangular
/// prism grasped tip-down. Sampling regions: the target pose is drawn in a
/// box around the workspace center, the start pose in a box *relative to
/// the hole*, so that canonicalized demonstrations transfer across target
/// placements.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,

    // Geometry.
    pub peg_half_x: f64,
    pub peg_half_y: f64,
    pub hole_half_x: f64,
    pub hole_half_y: f64,
    pub hole_depth: f64,
    pub peg_len: f64,
    pub block_half: f64,
    pub block_height: f64,

    // Sampling.
    pub target_region_xy: f64,
    pub target_region_yaw: f64,
    pub start_offset_xy: f64,
    pub start_height_min: f64,
    pub start_height_max: f64,
    pub start_yaw: f64,
    pub grasp_jitter_t: f64,
    pub grasp_jitter_yaw: f64,

    // Pose-estimation noise (per object).
    pub source_sigma_t: f64,
    pub source_sigma_r: f64,
    pub target_sigma_t: f64,
    pub target_sigma_r: f64,

    // Control.
    pub rate_hz: f64,
    pub max_step_t: f64,
    pub max_step_r: f64,

    // Camera.
    pub frame_px: usize,
    pub px_per_mm: f64,
    pub camera_height: f64,
    pub patch_size: usize,
}

impl TaskSpec {
    /// Loose-clearance preset.
    pub fn easy() -> Self {
        Self {
            name: "easy".to_string(),
            peg_half_x: 3.0,
            peg_half_y: 2.0,
            hole_half_x: 3.5,
            hole_half_y: 2.5,
            hole_depth: 6.0,
            peg_len: 20.0,
            block_half: 12.0,
            block_height: 8.0,
            target_region_xy: 3.0,
            target_region_yaw: 0.1,
            start_offset_xy: 8.0,
            start_height_min: 18.0,
            start_height_max: 24.0,
            start_yaw: 0.2,
            grasp_jitter_t: 0.3,
            grasp_jitter_yaw: 0.01,
            source_sigma_t: 0.0,
            source_sigma_r: 0.0,
            target_sigma_t: 0.0,
            target_sigma_r: 0.0,
            rate_hz: 30.0,
            max_step_t: 2.0,
            max_step_r: 0.05,
            frame_px: 256,
            px_per_mm: 4.0,
            camera_height: 400.0,
            patch_size: 64,
        }
    }

    /// Tight-clearance preset with a tighter grasp.
    pub fn hard() -> Self {
        Self {
            name: "hard".to_string(),
            hole_half_x: 3.05,
            hole_half_y: 2.05,
            grasp_jitter_t: 0.1,
            grasp_jitter_yaw: 0.003,
            ..Self::easy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "easy" => Ok(Self::easy()),
            "hard" => Ok(Self::hard()),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }

    /// Smallest per-axis gap between hole and peg at zero yaw.
    pub fn clearance(&self) -> f64 {
        (self.hole_half_x - self.peg_half_x).min(self.hole_half_y - self.peg_half_y)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clearance() <= 0.0 {
            return Err(Error::InvalidConfig("clearance must be positive".into()));
        }
        if self.hole_depth <= 0.0 || self.peg_len <= self.hole_depth {
            return Err(Error::InvalidConfig(
                "need positive hole depth and a peg longer than the hole".into(),
            ));
        }
        if self.block_half <= self.hole_half_x.max(self.hole_half_y) {
            return Err(Error::InvalidConfig("block must contain the hole".into()));
        }
        if self.start_height_min > self.start_height_max || self.start_height_min <= 0.0 {
            return Err(Error::InvalidConfig("bad start height range".into()));
        }
        if self.frame_px == 0 || self.px_per_mm <= 0.0 || self.patch_size == 0 {
            return Err(Error::InvalidConfig("bad camera config".into()));
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("name", self.name.clone()),
            ("peg_half_x", format!("{:?}", self.peg_half_x)),
            ("peg_half_y", format!("{:?}", self.peg_half_y)),
            ("hole_half_x", format!("{:?}", self.hole_half_x)),
            ("hole_half_y", format!("{:?}", self.hole_half_y)),
            ("hole_depth", format!("{:?}", self.hole_depth)),
            ("peg_len", format!("{:?}", self.peg_len)),
            ("block_half", format!("{:?}", self.block_half)),
            ("block_height", format!("{:?}", self.block_height)),
            ("target_region_xy", format!("{:?}", self.target_region_xy)),
            ("target_region_yaw", format!("{:?}", self.target_region_yaw)),
            ("start_offset_xy", format!("{:?}", self.start_offset_xy)),
            ("start_height_min", format!("{:?}", self.start_height_min)),
            ("start_height_max", format!("{:?}", self.start_height_max)),
            ("start_yaw", format!("{:?}", self.start_yaw)),
            ("grasp_jitter_t", format!("{:?}", self.grasp_jitter_t)),
            ("grasp_jitter_yaw", format!("{:?}", self.grasp_jitter_yaw)),
            ("source_sigma_t", format!("{:?}", self.source_sigma_t)),
            ("source_sigma_r", format!("{:?}", self.source_sigma_r)),
            ("target_sigma_t", format!("{:?}", self.target_sigma_t)),
            ("target_sigma_r", format!("{:?}", self.target_sigma_r)),
            ("rate_hz", format!("{:?}", self.rate_hz)),
            ("max_step_t", format!("{:?}", self.max_step_t)),
            ("max_step_r", format!("{:?}", self.max_step_r)),
            ("frame_px", format!("{}", self.frame_px)),
            ("px_per_mm", format!("{:?}", self.px_per_mm)),
            ("camera_height", format!("{:?}", self.camera_height)),
            ("patch_size", format!("{}", self.patch_size)),
        ]
    }

    /// Canonical text form; also the hashing input.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.canonical())?;
        Ok(())
    }

    /// Parse `key = value` text. Unknown keys are rejected; missing keys
    /// fall back to the `easy` preset (or to the preset named by `name`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let base = match map.get("name").map(|s| s.as_str()) {
            Some("hard") => Self::hard(),
            _ => Self::easy(),
        };
        let mut spec = base;
        let known: Vec<&'static str> = spec.entries().iter().map(|(k, _)| *k).collect();
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::InvalidConfig(format!("unknown task key {key:?}")));
            }
        }
        let f = |key: &str, default: f64| -> Result<f64> {
            match map.get(key) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("invalid {key}"))),
                None => Ok(default),
            }
        };
        let u = |key: &str, default: usize| -> Result<usize> {
            match map.get(key) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("invalid {key}"))),
                None => Ok(default),
            }
        };
        if let Some(name) = map.get("name") {
            spec.name = name.clone();
        }
        spec.peg_half_x = f("peg_half_x", spec.peg_half_x)?;
        spec.peg_half_y = f("peg_half_y", spec.peg_half_y)?;
        spec.hole_half_x = f("hole_half_x", spec.hole_half_x)?;
        spec.hole_half_y = f("hole_half_y", spec.hole_half_y)?;
        spec.hole_depth = f("hole_depth", spec.hole_depth)?;
        spec.peg_len = f("peg_len", spec.peg_len)?;
        spec.block_half = f("block_half", spec.block_half)?;
        spec.block_height = f("block_height", spec.block_height)?;
        spec.target_region_xy = f("target_region_xy", spec.target_region_xy)?;
        spec.target_region_yaw = f("target_region_yaw", spec.target_region_yaw)?;
        spec.start_offset_xy = f("start_offset_xy", spec.start_offset_xy)?;
        spec.start_height_min = f("start_height_min", spec.start_height_min)?;
        spec.start_height_max = f("start_height_max", spec.start_height_max)?;
        spec.start_yaw = f("start_yaw", spec.start_yaw)?;
        spec.grasp_jitter_t = f("grasp_jitter_t", spec.grasp_jitter_t)?;
        spec.grasp_jitter_yaw = f("grasp_jitter_yaw", spec.grasp_jitter_yaw)?;
        spec.source_sigma_t = f("source_sigma_t", spec.source_sigma_t)?;
        spec.source_sigma_r = f("source_sigma_r", spec.source_sigma_r)?;
        spec.target_sigma_t = f("target_sigma_t", spec.target_sigma_t)?;
        spec.target_sigma_r = f("target_sigma_r", spec.target_sigma_r)?;
        spec.rate_hz = f("rate_hz", spec.rate_hz)?;
        spec.max_step_t = f("max_step_t", spec.max_step_t)?;
        spec.max_step_r = f("max_step_r", spec.max_step_r)?;
        spec.frame_px = u("frame_px", spec.frame_px)?;
        spec.px_per_mm = f("px_per_mm", spec.px_per_mm)?;
        spec.camera_height = f("camera_height", spec.camera_height)?;
        spec.patch_size = u("patch_size", spec.patch_size)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Copy with both objects' translation noise set to `sigma`.
    pub fn with_sigma_t(&self, sigma: f64) -> Self {
        Self {
            source_sigma_t: sigma,
            target_sigma_t: sigma,
            ..self.clone()
        }
    }
}
