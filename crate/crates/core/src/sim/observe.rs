//! Panoramic occupancy observations.
//!
//! The neighbourhood around the agent is split into four 90° wedges, one per
//! compass direction, each listed in its own forward/lateral frame. Stored in
//! N, E, S, W order the panorama does not depend on heading; rotating the
//! wedge order to start at the heading gives the egocentric view.

use serde::{Deserialize, Serialize};

use super::motion::{AgentPose, Heading};
use super::world::{Cell, GridWorld};

pub const FREE: f64 = 0.0;
pub const BLOCKED: f64 = 1.0;
pub const UNKNOWN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserveConfig {
    /// Neighbourhood radius in cells.
    pub radius: usize,
    /// One-hot bands per axis for the absolute position code.
    pub position_bands: usize,
}

impl Default for ObserveConfig {
    fn default() -> Self {
        Self {
            radius: 4,
            position_bands: 5,
        }
    }
}

impl ObserveConfig {
    pub fn wedge_len(&self) -> usize {
        self.radius * (self.radius + 2)
    }

    pub fn patch_len(&self) -> usize {
        4 * self.wedge_len()
    }

    pub fn position_len(&self) -> usize {
        2 * self.position_bands
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    /// Wedges in canonical N, E, S, W order.
    pub wedges: [Vec<f64>; 4],
    /// Concatenated one-hot x band and y band.
    pub position: Vec<f64>,
    pub heading: Heading,
    pub cell: Cell,
}

impl Panorama {
    /// Heading-invariant flattening: wedges N, E, S, W.
    pub fn canonical_patch(&self) -> Vec<f64> {
        self.wedges.concat()
    }

    /// Wedges front, right, back, left relative to the heading.
    pub fn egocentric_patch(&self) -> Vec<f64> {
        let h = self.heading.index();
        (0..4).flat_map(|k| self.wedges[(h + k) % 4].iter().copied()).collect()
    }
}

pub fn observe(world: &GridWorld, pose: AgentPose, cfg: &ObserveConfig) -> Panorama {
    let centre = pose.cell();
    let r = cfg.radius as i64;
    let wedges = Heading::ALL.map(|dir| {
        let (fx, fy) = dir.delta();
        let (rx, ry) = dir.right().delta();
        let mut w = Vec::with_capacity(cfg.wedge_len());
        for k in 1..=r {
            for l in -k..=k {
                let dx = k * fx + l * rx;
                let dy = k * fy + l * ry;
                w.push(visible_value(world, centre, dx, dy));
            }
        }
        w
    });
    let mut position = vec![0.0; cfg.position_len()];
    position[band(pose.x, world.width(), cfg.position_bands)] = 1.0;
    position[cfg.position_bands + band(pose.y, world.height(), cfg.position_bands)] = 1.0;
    Panorama {
        wedges,
        position,
        heading: pose.heading,
        cell: centre,
    }
}

fn band(coord: usize, extent: usize, bands: usize) -> usize {
    (coord * bands / extent.max(1)).min(bands - 1)
}

/// Occupancy at offset `(dx, dy)`, or UNKNOWN when the straight ray from the
/// agent passes through a blocked cell first.
fn visible_value(world: &GridWorld, centre: Cell, dx: i64, dy: i64) -> f64 {
    let Some(target) = centre.offset(dx, dy).filter(|&c| world.in_bounds(c)) else {
        return UNKNOWN;
    };
    let n = dx.abs().max(dy.abs());
    for i in 1..n {
        let t = i as f64 / n as f64;
        let sx = (dx as f64 * t).round() as i64;
        let sy = (dy as f64 * t).round() as i64;
        match centre.offset(sx, sy) {
            Some(c) if world.is_free(c) => {}
            _ => return UNKNOWN,
        }
    }
    if world.is_blocked(target) {
        BLOCKED
    } else {
        FREE
    }
}
