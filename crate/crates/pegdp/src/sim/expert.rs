//! Scripted demonstration expert.
//!
//! The expert sees the true state and drives the peg in three phases:
//! straight-line approach to a hover point above the hole, an archimedean
//! spiral search pressed against the mouth plane (spiral style only), and
//! axial insertion once the peg has dropped in. The hover point carries a
//! seeded offset of one to two clearances, mimicking the placement
//! imprecision that makes a search phase necessary in the first place; the
//! direct style hovers exactly over the hole and skips the search.

use rand::Rng;

use crate::error::{Error, Result};
use crate::se3::{rot_z, Frame, Pose};
use crate::sim::state::{command_from_relative, SimState};
use crate::sim::task::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertStyle {
    Direct,
    Spiral,
}

impl std::fmt::Display for ExpertStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExpertStyle::Direct => f.write_str("direct"),
            ExpertStyle::Spiral => f.write_str("spiral"),
        }
    }
}

impl std::str::FromStr for ExpertStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(ExpertStyle::Direct),
            "spiral" => Ok(ExpertStyle::Spiral),
            other => Err(Error::InvalidConfig(format!("unknown expert style {other:?}"))),
        }
    }
}

/// Hover height above the mouth plane (mm).
const Z_HOVER: f64 = 2.0;
/// Straight-line approach speed (mm per step).
const APPROACH_SPEED: f64 = 1.2;
/// Axial insertion speed (mm per step).
const INSERT_SPEED: f64 = 0.4;
/// Downward press target during the spiral search (mm below the mouth).
const PRESS: f64 = 0.8;
/// Arrival tolerance for the approach phase (mm).
const ARRIVE_TOL: f64 = 0.1;

/// Which phase the expert is currently executing, exposed for trace tagging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertPhase {
    Approach,
    Search,
    Insert,
}

pub struct ExpertController {
    style: ExpertStyle,
    /// Hover offset from the hole center (seeded imprecision).
    hover: (f64, f64),
    spiral_phi: f64,
    spiral_start: f64,
    pitch: f64,
    arc_step: f64,
    max_radius: f64,
}

impl ExpertController {
    pub fn new<R: Rng>(spec: &TaskSpec, style: ExpertStyle, rng: &mut R) -> Self {
        let c = spec.clearance();
        let hover = match style {
            ExpertStyle::Direct => (0.0, 0.0),
            ExpertStyle::Spiral => {
                let r = c * rng.gen_range(1.0..2.0);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                (r * theta.cos(), r * theta.sin())
            }
        };
        let spiral_start = rng.gen_range(0.0..std::f64::consts::TAU);
        let hover_norm = (hover.0 * hover.0 + hover.1 * hover.1).sqrt();
        Self {
            style,
            hover,
            spiral_phi: 0.0,
            spiral_start,
            pitch: 0.6 * c,
            arc_step: 0.3 * c,
            max_radius: hover_norm + 3.0 * c,
        }
    }

    /// Current phase given the true state.
    pub fn phase(&self, state: &SimState) -> ExpertPhase {
        let (tip, _) = state.tip_in_target();
        if state.depth > 0.0 {
            ExpertPhase::Insert
        } else if tip[2] > Z_HOVER + ARRIVE_TOL {
            ExpertPhase::Approach
        } else {
            ExpertPhase::Search
        }
    }

    /// Next commanded end-effector pose.
    pub fn command(&mut self, state: &SimState, spec: &TaskSpec) -> Pose {
        let (tip, _) = state.tip_in_target();
        let (x, y, z) = (tip[0], tip[1], tip[2]);

        let (tx, ty, tz) = if state.depth > 0.0 {
            // Insertion: hold lateral position, descend.
            (x, y, z - INSERT_SPEED)
        } else if z > Z_HOVER + ARRIVE_TOL
            || (self.style == ExpertStyle::Direct
                && ((x - self.hover.0).powi(2) + (y - self.hover.1).powi(2)).sqrt() > ARRIVE_TOL)
        {
            // Approach: straight line to the hover point.
            let goal = (self.hover.0, self.hover.1, Z_HOVER);
            let d = (goal.0 - x, goal.1 - y, goal.2 - z);
            let dist = (d.0 * d.0 + d.1 * d.1 + d.2 * d.2).sqrt();
            let f = if dist > APPROACH_SPEED {
                APPROACH_SPEED / dist
            } else {
                1.0
            };
            (x + d.0 * f, y + d.1 * f, z + d.2 * f)
        } else {
            match self.style {
                ExpertStyle::Direct => {
                    // Aligned by construction: descend into the hole.
                    (self.hover.0, self.hover.1, z - INSERT_SPEED)
                }
                ExpertStyle::Spiral => {
                    // Press down and walk the spiral until the peg drops in.
                    let radius = self.pitch * self.spiral_phi / std::f64::consts::TAU;
                    let angle = self.spiral_start + self.spiral_phi;
                    let px = self.hover.0 + radius * angle.cos();
                    let py = self.hover.1 + radius * angle.sin();
                    let dphi = self.arc_step / radius.max(self.pitch / std::f64::consts::TAU);
                    self.spiral_phi += dphi;
                    if self.pitch * self.spiral_phi / std::f64::consts::TAU > self.max_radius {
                        self.spiral_phi = 0.0; // restart the sweep
                    }
                    (px, py, -PRESS)
                }
            }
        };

        let rel = Pose::new_projected(
            rot_z(0.0),
            nalgebra::Vector3::new(tx, ty, tz),
            Frame::Target,
            Frame::Source,
        )
        .expect("valid command pose");
        command_from_relative(state, &rel)
    }
}

/// Upper bound on expert steps before declaring the task unsolvable.
pub const EXPERT_STEP_CAP: usize = 3000;

/// Drive the simulator to success, returning every visited state (the reset
/// state first, the success state last).
pub fn run_to_success(
    state: &mut SimState,
    spec: &TaskSpec,
    controller: &mut ExpertController,
) -> Result<Vec<SimState>> {
    let mut states = vec![state.clone()];
    for _ in 0..EXPERT_STEP_CAP {
        if crate::sim::state::success(state, spec) {
            return Ok(states);
        }
        let cmd = controller.command(state, spec);
        crate::sim::state::step(state, spec, &cmd)?;
        states.push(state.clone());
    }
    if crate::sim::state::success(state, spec) {
        return Ok(states);
    }
    Err(Error::ExpertFailure(format!(
        "no success within {EXPERT_STEP_CAP} steps (final depth {:.3} mm)",
        state.depth
    )))
}
