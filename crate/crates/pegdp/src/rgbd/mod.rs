//! RGBD patches: bounding boxes, cropping, resizing, and the
//! goal-conditioned encoder.
//!
//! Frames and patches are stored channel-last (`H x W x 4`) as `f32`, the
//! same layout they have on disk inside episode files: RGB in `[0, 1]`,
//! depth in meters.

pub mod encoder;

pub use encoder::{GieConfig, GoalConditionedEncoder};

use crate::error::{Error, Result};

/// Axis-aligned bounding box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Clamp the box into `[0, w] x [0, h]`.
    pub fn clamped(&self, w: usize, h: usize) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w as f64),
            y1: self.y1.clamp(0.0, h as f64),
            x2: self.x2.clamp(0.0, w as f64),
            y2: self.y2.clamp(0.0, h as f64),
        }
    }
}

/// Union of two boxes: min/max over all eight coordinates.
pub fn union_bbox(b_s: &BBox, b_t: &BBox) -> BBox {
    BBox {
        x1: b_s.x1.min(b_t.x1),
        y1: b_s.y1.min(b_t.y1),
        x2: b_s.x2.max(b_t.x2),
        y2: b_s.y2.max(b_t.y2),
    }
}

pub const CHANNELS: usize = 4;

/// Full camera frame, channel-last `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub width: usize,
    pub height: usize,
    data: Vec<f32>,
}

impl RgbdFrame {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * CHANNELS],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Square RGBD patch, channel-last `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdPatch {
    pub size: usize,
    data: Vec<f32>,
}

impl RgbdPatch {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; size * size * CHANNELS],
        }
    }

    pub fn from_data(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * CHANNELS {
            return Err(Error::InvalidConfig(format!(
                "patch data length {} does not match size {size}",
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.size + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.size + x) * CHANNELS + c] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Current + goal observation patches, identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub current: RgbdPatch,
    pub goal: RgbdPatch,
}

impl PatchPair {
    pub fn new(current: RgbdPatch, goal: RgbdPatch) -> Result<Self> {
        if current.size != goal.size {
            return Err(Error::ShapeMismatch {
                context: "patch pair",
                expected: format!("{}", current.size),
                got: format!("{}", goal.size),
            });
        }
        Ok(Self { current, goal })
    }
}

/// Crop `box_` out of `frame` and resize to a `size x size` patch.
///
/// RGB channels are sampled bilinearly; depth uses the nearest source pixel
/// so no phantom depth values appear at object boundaries. The box is
/// clamped to the frame first; a zero-area result is an error.
pub fn crop_and_resize(frame: &RgbdFrame, box_: &BBox, size: usize) -> Result<RgbdPatch> {
    if size == 0 {
        return Err(Error::InvalidConfig("patch size must be positive".into()));
    }
    let b = box_.clamped(frame.width, frame.height);
    let (bw, bh) = (b.width(), b.height());
    if bw <= 0.0 || bh <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "zero-area crop box ({:.1},{:.1})-({:.1},{:.1})",
            b.x1, b.y1, b.x2, b.y2
        )));
    }
    let mut patch = RgbdPatch::new(size);
    let max_x = frame.width - 1;
    let max_y = frame.height - 1;
    for oy in 0..size {
        // Continuous source coordinate of this output pixel's center.
        let sy = b.y1 + (oy as f64 + 0.5) * bh / size as f64;
        let py = sy - 0.5;
        let y0 = py.floor();
        let fy = py - y0;
        let y0i = (y0 as isize).clamp(0, max_y as isize) as usize;
        let y1i = (y0 as isize + 1).clamp(0, max_y as isize) as usize;
        let ny = (sy.floor() as isize).clamp(0, max_y as isize) as usize;
        for ox in 0..size {
            let sx = b.x1 + (ox as f64 + 0.5) * bw / size as f64;
            let px = sx - 0.5;
            let x0 = px.floor();
            let fx = px - x0;
            let x0i = (x0 as isize).clamp(0, max_x as isize) as usize;
            let x1i = (x0 as isize + 1).clamp(0, max_x as isize) as usize;
            for c in 0..3 {
                let v00 = frame.get(x0i, y0i, c) as f64;
                let v10 = frame.get(x1i, y0i, c) as f64;
                let v01 = frame.get(x0i, y1i, c) as f64;
                let v11 = frame.get(x1i, y1i, c) as f64;
                let v = v00 * (1.0 - fx) * (1.0 - fy)
                    + v10 * fx * (1.0 - fy)
                    + v01 * (1.0 - fx) * fy
                    + v11 * fx * fy;
                patch.set(ox, oy, c, v as f32);
            }
            let nx = (sx.floor() as isize).clamp(0, max_x as isize) as usize;
            patch.set(ox, oy, 3, frame.get(nx, ny, 3));
        }
    }
    Ok(patch)
}
