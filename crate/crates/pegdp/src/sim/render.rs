//! Synthetic top-down RGBD rendering.
//!
//! The scene is rendered orthographically from the fixed overhead camera:
//! table, target block top, hole interior and the peg top face as
//! flat-shaded rectangles. RGB edges are antialiased by 4x4 supersampling
//! (sub-pixel object motion changes boundary intensities smoothly); the
//! depth channel samples the nearest surface at the pixel center, so each
//! depth value is an exact surface distance.

use crate::rgbd::{crop_and_resize, union_bbox, BBox, RgbdFrame, RgbdPatch};
use crate::se3::yaw_of;
use crate::sim::state::SimState;
use crate::sim::task::TaskSpec;

const COLOR_TABLE: [f32; 3] = [0.25, 0.25, 0.27];
const COLOR_BLOCK: [f32; 3] = [0.55, 0.55, 0.60];
const COLOR_HOLE: [f32; 3] = [0.08, 0.08, 0.10];
const COLOR_PEG: [f32; 3] = [0.85, 0.30, 0.20];

/// Millimeters to meters for the stored depth channel.
const MM_TO_M: f64 = 1e-3;

/// A yawed rectangle on the table plane.
#[derive(Debug, Clone, Copy)]
struct YawRect {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    half_x: f64,
    half_y: f64,
}

impl YawRect {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        u.abs() <= self.half_x && v.abs() <= self.half_y
    }

    fn corners(&self) -> [(f64, f64); 4] {
        let mut out = [(0.0, 0.0); 4];
        for (i, (sx, sy)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
            .iter()
            .enumerate()
        {
            let u = self.half_x * sx;
            let v = self.half_y * sy;
            out[i] = (
                self.cx + self.cos * u - self.sin * v,
                self.cy + self.sin * u + self.cos * v,
            );
        }
        out
    }
}

/// Scene geometry extracted from the true state, in base-frame coordinates.
struct Scene {
    block: YawRect,
    hole: YawRect,
    peg: YawRect,
    block_top_z: f64,
    hole_bottom_z: f64,
    peg_top_z: f64,
}

fn scene_of(state: &SimState, spec: &TaskSpec) -> Scene {
    let t = state.t_b_t.translation();
    let tyaw = yaw_of(state.t_b_t.rotation());
    let s = state.t_b_s();
    let st = s.translation();
    let syaw = yaw_of(s.rotation());
    Scene {
        block: YawRect {
            cx: t[0],
            cy: t[1],
            cos: tyaw.cos(),
            sin: tyaw.sin(),
            half_x: spec.block_half,
            half_y: spec.block_half,
        },
        hole: YawRect {
            cx: t[0],
            cy: t[1],
            cos: tyaw.cos(),
            sin: tyaw.sin(),
            half_x: spec.hole_half_x,
            half_y: spec.hole_half_y,
        },
        peg: YawRect {
            cx: st[0],
            cy: st[1],
            cos: syaw.cos(),
            sin: syaw.sin(),
            half_x: spec.peg_half_x,
            half_y: spec.peg_half_y,
        },
        block_top_z: t[2],
        hole_bottom_z: t[2] - spec.hole_depth,
        peg_top_z: st[2] + spec.peg_len,
    }
}

/// Top surface visible at a base-frame table point: `(color, height z_b)`.
fn surface_at(scene: &Scene, x: f64, y: f64) -> ([f32; 3], f64) {
    // The peg top face is the highest surface wherever the peg footprint is.
    if scene.peg.contains(x, y) {
        return (COLOR_PEG, scene.peg_top_z);
    }
    if scene.hole.contains(x, y) {
        return (COLOR_HOLE, scene.hole_bottom_z);
    }
    if scene.block.contains(x, y) {
        return (COLOR_BLOCK, scene.block_top_z);
    }
    (COLOR_TABLE, 0.0)
}

/// Pixel center to base-frame table coordinates. The straight-down camera
/// maps base x to +u and base y to -v.
fn pixel_to_base(spec: &TaskSpec, u: f64, v: f64) -> (f64, f64) {
    let c = spec.frame_px as f64 / 2.0;
    ((u - c) / spec.px_per_mm, -((v - c) / spec.px_per_mm))
}

fn base_to_pixel(spec: &TaskSpec, x: f64, y: f64) -> (f64, f64) {
    let c = spec.frame_px as f64 / 2.0;
    (c + x * spec.px_per_mm, c - y * spec.px_per_mm)
}

/// Render the full camera frame.
pub fn render_frame(state: &SimState, spec: &TaskSpec) -> RgbdFrame {
    let scene = scene_of(state, spec);
    let n = spec.frame_px;
    let mut frame = RgbdFrame::new(n, n);
    const SS: usize = 4;
    let inv = 1.0 / (SS as f64);
    for py in 0..n {
        for px in 0..n {
            // RGB: supersampled coverage.
            let mut acc = [0.0f64; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let u = px as f64 + (sx as f64 + 0.5) * inv;
                    let v = py as f64 + (sy as f64 + 0.5) * inv;
                    let (x, y) = pixel_to_base(spec, u, v);
                    let (color, _) = surface_at(&scene, x, y);
                    for c in 0..3 {
                        acc[c] += color[c] as f64;
                    }
                }
            }
            for c in 0..3 {
                frame.set(px, py, c, (acc[c] / (SS * SS) as f64) as f32);
            }
            // Depth: nearest surface at the pixel center, in meters.
            let (x, y) = pixel_to_base(spec, px as f64 + 0.5, py as f64 + 0.5);
            let (_, z) = surface_at(&scene, x, y);
            let depth = (spec.camera_height - z) * MM_TO_M;
            frame.set(px, py, 3, depth as f32);
        }
    }
    frame
}

/// Distance from the camera plane to the nearest surface along the viewing
/// ray through one pixel center. Independent per-pixel computation used as
/// the oracle for the renderer's depth buffer.
pub fn depth_ray(state: &SimState, spec: &TaskSpec, px: usize, py: usize) -> f64 {
    let scene = scene_of(state, spec);
    let (x, y) = pixel_to_base(spec, px as f64 + 0.5, py as f64 + 0.5);
    // Candidate surfaces along the downward ray, nearest (highest z) first.
    let mut best = 0.0f64; // table
    if scene.peg.contains(x, y) {
        best = best.max(scene.peg_top_z);
    }
    if scene.block.contains(x, y) {
        if scene.hole.contains(x, y) {
            best = best.max(scene.hole_bottom_z);
        } else {
            best = best.max(scene.block_top_z);
        }
    }
    (spec.camera_height - best) * MM_TO_M
}

/// Integer-pixel bounding boxes of the projected source and target objects.
///
/// Boxes come from the true geometry (a stand-in for an object detector) and
/// are rounded outward to whole pixels.
pub fn object_bboxes(state: &SimState, spec: &TaskSpec) -> (BBox, BBox) {
    let scene = scene_of(state, spec);
    let project = |rect: &YawRect| -> BBox {
        let mut x1 = f64::INFINITY;
        let mut y1 = f64::INFINITY;
        let mut x2 = f64::NEG_INFINITY;
        let mut y2 = f64::NEG_INFINITY;
        for (x, y) in rect.corners() {
            let (u, v) = base_to_pixel(spec, x, y);
            x1 = x1.min(u);
            y1 = y1.min(v);
            x2 = x2.max(u);
            y2 = y2.max(v);
        }
        BBox::new(x1.floor(), y1.floor(), x2.ceil(), y2.ceil())
            .clamped(spec.frame_px, spec.frame_px)
    };
    (project(&scene.peg), project(&scene.block))
}

/// Render the observation patch: frame, union box over both objects, crop
/// and resize. Returns the patch and the union box used.
pub fn render_patch(state: &SimState, spec: &TaskSpec) -> crate::error::Result<(RgbdPatch, BBox)> {
    let frame = render_frame(state, spec);
    let (b_s, b_t) = object_bboxes(state, spec);
    let union = union_bbox(&b_s, &b_t);
    let patch = crop_and_resize(&frame, &union, spec.patch_size)?;
    Ok((patch, union))
}
