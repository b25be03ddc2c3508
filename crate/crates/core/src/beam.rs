//! Acquisition geometry of a motorized end-fire probe.
//!
//! The imaged region is a spherical sector around the scan apex: a transducer
//! fan of half-angle `fan_half_angle` swept by a motor through
//! `sweep_half_angle`, bounded radially by `[r_min, r_max]`. Voxels outside
//! this sector carry no information and are excluded from every metric.

use crate::transform::RigidTransform;
use crate::volume::Grid;
use crate::{par, Error, Result};
use serde::{Deserialize, Serialize};

/// Probe-frame convention: the apex sits at the origin, the beam axis is +z,
/// the transducer fan opens in the x-z plane and the motor sweeps it about
/// the x axis. Angles in radians, radii in millimetres.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BeamGeometry {
    pub fan_half_angle: f64,
    pub sweep_half_angle: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl BeamGeometry {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fan_half_angle > 0.0
            && self.fan_half_angle < std::f64::consts::FRAC_PI_2
            && self.sweep_half_angle > 0.0
            && self.sweep_half_angle < std::f64::consts::FRAC_PI_2
            && self.r_min >= 0.0
            && self.r_max > self.r_min;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid beam geometry: {self:?}")))
        }
    }

    /// True when probe-frame point `p` lies inside the imaged sector.
    ///
    /// Points behind the apex fail the angular bounds (their sweep angle
    /// exceeds 90 degrees), so they are never inside.
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        if r2 < self.r_min * self.r_min || r2 > self.r_max * self.r_max {
            return false;
        }
        let sweep = p[1].atan2(p[2]);
        if sweep.abs() > self.sweep_half_angle {
            return false;
        }
        // After undoing the sweep about x, the point lies in the fan plane at
        // depth sqrt(y^2 + z^2).
        let fan = p[0].atan2((p[1] * p[1] + p[2] * p[2]).sqrt());
        fan.abs() <= self.fan_half_angle
    }
}

/// True when world point `p` is imaged by a probe posed at `pose`
/// (probe frame -> world).
pub fn beam_contains_world(geom: &BeamGeometry, pose: &RigidTransform, p: [f64; 3]) -> bool {
    geom.contains(pose.inverse().apply(p))
}

/// Rasterizes the sector onto `grid`: mask is 1 exactly for voxel centers
/// inside the sector of a probe posed at `pose`.
pub fn make_beam_mask(grid: &Grid, geom: &BeamGeometry, pose: &RigidTransform) -> Vec<u8> {
    let inv = pose.inverse();
    let (r, b) = inv.as_affine();
    let mut mask = vec![0u8; grid.len()];
    par::for_each_chunk_mut(&mut mask, grid.slab_len(), |z, chunk| {
        for y in 0..grid.dims[1] {
            for x in 0..grid.dims[0] {
                let p = grid.voxel_center(x, y, z);
                let q = r * nalgebra::Vector3::from(p) + b;
                chunk[grid.index(x, y, 0)] = geom.contains([q[0], q[1], q[2]]) as u8;
            }
        }
    });
    mask
}
