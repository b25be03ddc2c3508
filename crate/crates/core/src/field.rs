//! Dense 3-vector fields on a grid: displacement fields, force fields and
//! image gradients. Displacements are stored in millimetres, so transferring
//! a field between pyramid levels is plain trilinear interpolation.

use crate::par;
use crate::volume::Grid;

#[derive(Clone, Debug)]
pub struct VecField3 {
    pub grid: Grid,
    pub data: Vec<[f64; 3]>,
}

/// Per-voxel Jacobians `J[i][j] = d f_i / d x_j` of a vector field.
#[derive(Clone, Debug)]
pub struct JacField {
    pub grid: Grid,
    pub data: Vec<[[f64; 3]; 3]>,
}

impl VecField3 {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![[0.0; 3]; grid.len()],
        }
    }

    /// The point map of a displacement field at voxel index `i`: `x + u(x)`.
    #[inline]
    pub fn warp_at(&self, i: usize) -> [f64; 3] {
        let c = self.grid.coords(i);
        let p = self.grid.voxel_center(c[0], c[1], c[2]);
        let u = self.data[i];
        [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
    }

    /// Trilinear sample; `None` outside the grid.
    pub fn sample(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let c = self.grid.world_to_continuous(p);
        for a in 0..3 {
            let maxc = (self.grid.dims[a] - 1) as f64;
            if c[a] < -1e-9 || c[a] > maxc + 1e-9 {
                return None;
            }
        }
        Some(self.sample_continuous_clamped(c))
    }

    /// Trilinear sample with the query point clamped onto the grid. Used for
    /// compositions like `psi(phi(x))` where `phi(x)` may step outside.
    pub fn sample_clamped(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.grid.world_to_continuous(p);
        self.sample_continuous_clamped(c)
    }

    fn sample_continuous_clamped(&self, c: [f64; 3]) -> [f64; 3] {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let d = self.grid.dims[a];
            let x = c[a].clamp(0.0, (d - 1) as f64);
            let i = (x.floor() as usize).min(d.saturating_sub(2));
            base[a] = i;
            frac[a] = (x - i as f64).clamp(0.0, 1.0);
        }
        let mut out = [0.0f64; 3];
        for corner in 0..8usize {
            let mut w = 1.0f64;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                let wa = if hi { frac[a] } else { 1.0 - frac[a] };
                w *= wa;
                idx[a] = (base[a] + hi as usize).min(self.grid.dims[a] - 1);
            }
            if w == 0.0 {
                continue;
            }
            let v = self.data[self.grid.index(idx[0], idx[1], idx[2])];
            for k in 0..3 {
                out[k] += w * v[k];
            }
        }
        out
    }

    /// Jacobian of the stored vectors by central differences in world units,
    /// one-sided at the grid faces.
    pub fn jacobian(&self) -> JacField {
        let grid = self.grid;
        let mut data = vec![[[0.0f64; 3]; 3]; grid.len()];
        let slab = grid.slab_len();
        par::for_each_chunk_mut(&mut data, slab, |z, out| {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    let here = [x, y, z];
                    let mut j = [[0.0f64; 3]; 3];
                    for axis in 0..3 {
                        let h = grid.spacing[axis];
                        let (lo, hi, denom) = if here[axis] == 0 {
                            (0, 1, h)
                        } else if here[axis] + 1 == grid.dims[axis] {
                            (grid.dims[axis] - 2, grid.dims[axis] - 1, h)
                        } else {
                            (here[axis] - 1, here[axis] + 1, 2.0 * h)
                        };
                        let mut cl = here;
                        cl[axis] = lo;
                        let mut ch = here;
                        ch[axis] = hi;
                        let vl = self.data[grid.index(cl[0], cl[1], cl[2])];
                        let vh = self.data[grid.index(ch[0], ch[1], ch[2])];
                        for comp in 0..3 {
                            j[comp][axis] = (vh[comp] - vl[comp]) / denom;
                        }
                    }
                    out[grid.index(x, y, 0)] = j;
                }
            }
        });
        JacField { grid, data }
    }

    /// Resamples the field onto another grid (clamped trilinear, mm units).
    /// Serves both as prolongation to a finer level and restriction to a
    /// coarser one.
    pub fn sample_onto(&self, target: &Grid) -> VecField3 {
        let mut out = VecField3::zeros(*target);
        let slab = target.slab_len();
        par::for_each_chunk_mut(&mut out.data, slab, |z, chunk| {
            for y in 0..target.dims[1] {
                for x in 0..target.dims[0] {
                    let p = target.voxel_center(x, y, z);
                    chunk[target.index(x, y, 0)] = self.sample_clamped(p);
                }
            }
        });
        out
    }

    /// `self = base + c * dir`, reusing this field's storage.
    pub fn assign_add_scaled(&mut self, base: &VecField3, dir: &VecField3, c: f64) {
        debug_assert_eq!(self.data.len(), base.data.len());
        debug_assert_eq!(self.data.len(), dir.data.len());
        let n = self.data.len();
        let slab = self.grid.slab_len().max(1);
        let (b, d) = (&base.data, &dir.data);
        par::for_each_chunk_mut(&mut self.data, slab, |ci, chunk| {
            let off = ci * slab;
            for (k, v) in chunk.iter_mut().enumerate() {
                let i = off + k;
                if i >= n {
                    break;
                }
                for a in 0..3 {
                    v[a] = b[i][a] + c * d[i][a];
                }
            }
        });
    }

    /// Voxelwise sum of two fields.
    pub fn add(&self, other: &VecField3) -> VecField3 {
        debug_assert_eq!(self.data.len(), other.data.len());
        let mut out = self.clone();
        for (v, o) in out.data.iter_mut().zip(&other.data) {
            for a in 0..3 {
                v[a] += o[a];
            }
        }
        out
    }

    /// Euclidean norm over all voxels, folded in slab order.
    pub fn l2_norm(&self) -> f64 {
        let slab = self.grid.slab_len().max(1);
        let nz = self.data.len().div_ceil(slab);
        let sum = par::fold_indexed(
            nz,
            |z| {
                let lo = z * slab;
                let hi = (lo + slab).min(self.data.len());
                let mut s = 0.0f64;
                for v in &self.data[lo..hi] {
                    s += v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                }
                s
            },
            0.0,
            |a, b| a + b,
        );
        sum.sqrt()
    }

    /// Largest per-voxel Euclidean norm.
    pub fn max_norm(&self) -> f64 {
        let slab = self.grid.slab_len().max(1);
        let nz = self.data.len().div_ceil(slab);
        par::fold_indexed(
            nz,
            |z| {
                let lo = z * slab;
                let hi = (lo + slab).min(self.data.len());
                let mut m = 0.0f64;
                for v in &self.data[lo..hi] {
                    let n = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                    if n > m {
                        m = n;
                    }
                }
                m
            },
            0.0,
            f64::max,
        )
        .sqrt()
    }
}

impl JacField {
    /// Clamped trilinear sample of the nine Jacobian entries.
    pub fn sample_clamped(&self, p: [f64; 3]) -> [[f64; 3]; 3] {
        let c = self.grid.world_to_continuous(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let d = self.grid.dims[a];
            let x = c[a].clamp(0.0, (d - 1) as f64);
            let i = (x.floor() as usize).min(d.saturating_sub(2));
            base[a] = i;
            frac[a] = (x - i as f64).clamp(0.0, 1.0);
        }
        let mut out = [[0.0f64; 3]; 3];
        for corner in 0..8usize {
            let mut w = 1.0f64;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                let wa = if hi { frac[a] } else { 1.0 - frac[a] };
                w *= wa;
                idx[a] = (base[a] + hi as usize).min(self.grid.dims[a] - 1);
            }
            if w == 0.0 {
                continue;
            }
            let j = self.data[self.grid.index(idx[0], idx[1], idx[2])];
            for r in 0..3 {
                for cdx in 0..3 {
                    out[r][cdx] += w * j[r][cdx];
                }
            }
        }
        out
    }
}
