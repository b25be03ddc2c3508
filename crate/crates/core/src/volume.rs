//! Masked scalar volumes on regular grids, with trilinear sampling,
//! masked gradients and rigid resampling.

use crate::field::VecField3;
use crate::par;
use crate::transform::RigidTransform;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Snap tolerance for sample coordinates that fall within rounding error of a
/// voxel center, so that grid-aligned resampling reproduces node values.
const NODE_SNAP: f64 = 1e-9;

/// Regular voxel grid. `origin` is the world position of the center of voxel
/// (0,0,0); `spacing` is in millimetres per voxel along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "grid dims must be positive");
        assert!(spacing.iter().all(|&s| s > 0.0), "grid spacing must be positive");
        Self { dims, spacing, origin }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of voxels in one z-slab; slabs are the unit of parallel work.
    pub fn slab_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let y = (i / self.dims[0]) % self.dims[1];
        let z = i / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// World position to continuous voxel coordinates.
    #[inline]
    pub fn world_to_continuous(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Errors unless `other` has identical dims, spacing and origin.
    pub fn require_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )))
        }
    }
}

/// Resolves a continuous coordinate along one axis to an interpolation cell.
/// Returns `(base_index, fraction)` with `fraction == 0` when the coordinate
/// sits on a node, or `None` when it lies outside `[0, dim-1]`.
#[inline]
fn resolve_axis(c: f64, dim: usize) -> Option<(usize, f64)> {
    let maxc = (dim - 1) as f64;
    if c < -NODE_SNAP || c > maxc + NODE_SNAP {
        return None;
    }
    let x = c.clamp(0.0, maxc);
    let mut i = x.floor();
    let mut f = x - i;
    if f < NODE_SNAP {
        f = 0.0;
    } else if f > 1.0 - NODE_SNAP {
        i += 1.0;
        f = 0.0;
    }
    Some((i as usize, f))
}

/// Scalar volume with a validity mask (1 = the voxel carries image
/// information, 0 = outside the imaged region).
#[derive(Clone, Debug)]
pub struct Volume {
    pub grid: Grid,
    pub voxels: Vec<f32>,
    pub mask: Vec<u8>,
}

impl Volume {
    pub fn filled(grid: Grid, value: f32, masked: bool) -> Self {
        let n = grid.len();
        Self {
            grid,
            voxels: vec![value; n],
            mask: vec![masked as u8; n],
        }
    }

    pub fn from_parts(grid: Grid, voxels: Vec<f32>, mask: Vec<u8>) -> Self {
        assert_eq!(voxels.len(), grid.len(), "voxel buffer length mismatch");
        assert_eq!(mask.len(), grid.len(), "mask buffer length mismatch");
        Self { grid, voxels, mask }
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.n_masked() as f64 / self.grid.len() as f64
    }

    /// Trilinear interpolation at world position `p`.
    ///
    /// The sample is valid only when every interpolation corner with nonzero
    /// weight lies inside the grid and is masked; otherwise `None`.
    pub fn trilinear_sample(&self, p: [f64; 3]) -> Option<f64> {
        let c = self.grid.world_to_continuous(p);
        let (bx, fx) = resolve_axis(c[0], self.grid.dims[0])?;
        let (by, fy) = resolve_axis(c[1], self.grid.dims[1])?;
        let (bz, fz) = resolve_axis(c[2], self.grid.dims[2])?;
        let base = [bx, by, bz];
        let frac = [fx, fy, fz];
        let mut val = 0.0f64;
        for corner in 0..8usize {
            let mut w = 1.0f64;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                let wa = if hi { frac[a] } else { 1.0 - frac[a] };
                if wa == 0.0 {
                    w = 0.0;
                    break;
                }
                w *= wa;
                idx[a] = base[a] + hi as usize;
            }
            if w == 0.0 {
                continue;
            }
            let li = self.grid.index(idx[0], idx[1], idx[2]);
            if self.mask[li] == 0 {
                return None;
            }
            val += w * self.voxels[li] as f64;
        }
        Some(val)
    }

    /// Intensity gradient in world units (per mm) at masked voxels.
    ///
    /// Central differences where both axis neighbours are masked, one-sided at
    /// mask borders, zero along axes with no masked neighbour pair and at
    /// unmasked voxels.
    pub fn gradient(&self) -> VecField3 {
        let grid = self.grid;
        let mut data = vec![[0.0f64; 3]; grid.len()];
        let slab = grid.slab_len();
        par::for_each_chunk_mut(&mut data, slab, |z, out| {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    let li = grid.index(x, y, z);
                    if self.mask[li] == 0 {
                        continue;
                    }
                    let here = [x, y, z];
                    let mut g = [0.0f64; 3];
                    for a in 0..3 {
                        let h = grid.spacing[a];
                        let lo = if here[a] > 0 {
                            let mut c = here;
                            c[a] -= 1;
                            let i = grid.index(c[0], c[1], c[2]);
                            (self.mask[i] != 0).then_some(i)
                        } else {
                            None
                        };
                        let hi = if here[a] + 1 < grid.dims[a] {
                            let mut c = here;
                            c[a] += 1;
                            let i = grid.index(c[0], c[1], c[2]);
                            (self.mask[i] != 0).then_some(i)
                        } else {
                            None
                        };
                        g[a] = match (lo, hi) {
                            (Some(l), Some(u)) => {
                                (self.voxels[u] as f64 - self.voxels[l] as f64) / (2.0 * h)
                            }
                            (None, Some(u)) => (self.voxels[u] as f64 - self.voxels[li] as f64) / h,
                            (Some(l), None) => (self.voxels[li] as f64 - self.voxels[l] as f64) / h,
                            (None, None) => 0.0,
                        };
                    }
                    out[grid.index(x, y, 0)] = g;
                }
            }
        });
        VecField3 { grid, data }
    }

    /// Resamples this volume onto `target`, sampling at `map(center(v))`.
    ///
    /// `map` takes target-grid world coordinates into this volume's world
    /// coordinates. Output voxels whose sample is invalid are unmasked zeros,
    /// so a masked output voxel never draws on unmasked input.
    pub fn resample_rigid(&self, map: &RigidTransform, target: &Grid) -> Volume {
        let (r, b) = map.as_affine();
        let mut cells = vec![(0.0f32, 0u8); target.len()];
        let slab = target.slab_len();
        par::for_each_chunk_mut(&mut cells, slab, |z, chunk| {
            for y in 0..target.dims[1] {
                for x in 0..target.dims[0] {
                    let p = target.voxel_center(x, y, z);
                    let q = r * nalgebra::Vector3::from(p) + b;
                    if let Some(v) = self.trilinear_sample([q[0], q[1], q[2]]) {
                        chunk[target.index(x, y, 0)] = (v as f32, 1);
                    }
                }
            }
        });
        let (voxels, mask) = cells.into_iter().unzip();
        Volume {
            grid: *target,
            voxels,
            mask,
        }
    }

    /// Resamples this volume through a displacement field: output voxel `x`
    /// (on the field's grid) holds the sample at `x + u(x)`.
    pub fn resample_displaced(&self, field: &VecField3) -> Volume {
        let target = field.grid;
        let mut cells = vec![(0.0f32, 0u8); target.len()];
        let slab = target.slab_len();
        par::for_each_chunk_mut(&mut cells, slab, |z, chunk| {
            for y in 0..target.dims[1] {
                for x in 0..target.dims[0] {
                    let li = target.index(x, y, z);
                    let p = target.voxel_center(x, y, z);
                    let u = field.data[li];
                    if let Some(v) =
                        self.trilinear_sample([p[0] + u[0], p[1] + u[1], p[2] + u[2]])
                    {
                        chunk[target.index(x, y, 0)] = (v as f32, 1);
                    }
                }
            }
        });
        let (voxels, mask) = cells.into_iter().unzip();
        Volume {
            grid: target,
            voxels,
            mask,
        }
    }
}
