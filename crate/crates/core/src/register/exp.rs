//! Group exponential of a stationary velocity field by scaling and squaring.

use serde::{Deserialize, Serialize};

use crate::field::{DisplacementField, VectorField};

/// Target size of the first (scaled-down) displacement, in units of the
/// smallest voxel spacing.
const SMALL_STEP: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Inverse => -1.0,
        }
    }
}

/// Number of squarings so that `max_norm / 2^N < 0.4 * min_spacing`,
/// but at least `min_steps`.
pub fn squaring_steps(max_norm: f64, min_spacing: f64, min_steps: u32) -> u32 {
    let ratio = max_norm / (SMALL_STEP * min_spacing);
    let needed = if ratio > 1.0 { ratio.log2().ceil() as u32 } else { 0 };
    needed.max(min_steps)
}

/// `exp(±v)` as a displacement on the velocity's grid, together with the
/// number of squarings used.
pub fn exp_velocity(v: &VectorField, direction: Direction, min_steps: u32) -> (DisplacementField, u32) {
    let n = squaring_steps(v.max_norm(), v.grid().min_spacing(), min_steps);
    let mut u = v.scaled(direction.sign() / 2f64.powi(n as i32));
    for _ in 0..n {
        u = u.compose(&u).expect("same grid");
    }
    (u, n)
}
