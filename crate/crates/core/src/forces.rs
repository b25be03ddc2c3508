//! Driving forces for the elastic solver.
//!
//! Each force field returned here is half the gradient of the energy it
//! belongs to, taken with the slowly varying parts frozen: the intensity
//! shift map of the image term and the opposing displacement field of the
//! consistency term are treated as constants during differentiation. The
//! solver therefore steps along the negated field, with a step size chosen
//! by line search rather than trusted from the gradient magnitude.
//!
//! Conventions: a displacement field `u` on the fixed grid defines the map
//! `phi(x) = x + u(x)`; the moving image and its gradient are pulled back
//! through `phi`. Energies are sums (not means) over the supporting voxels,
//! so a finite difference of the frozen energy equals twice the force.

use crate::field::{JacField, VecField3};
use crate::filter::masked_blur;
use crate::par;
use crate::volume::Volume;

/// A force field with the energy and voxel support it was derived from.
#[derive(Clone, Debug)]
pub struct ForceTerm {
    pub field: VecField3,
    /// Sum of squared residuals over the support.
    pub energy: f64,
    /// Number of voxels with a valid residual.
    pub support: usize,
}

/// Residual `fixed(x) - moving(phi(x))` on the fixed grid, with its validity
/// mask: a voxel participates when it is masked in `fixed` and the pulled
/// back sample lands in the masked region of `moving`.
pub fn warped_residual(fixed: &Volume, moving: &Volume, u: &VecField3) -> (Vec<f64>, Vec<u8>) {
    let grid = fixed.grid;
    let len = grid.len();
    let slab = grid.slab_len();
    let mut r = vec![0.0f64; len];
    let mut m = vec![0u8; len];
    par::for_each_chunk_mut(&mut r, slab, |z, chunk| {
        for y in 0..grid.dims[1] {
            for x in 0..grid.dims[0] {
                let k = grid.index(x, y, 0);
                let i = z * slab + k;
                if fixed.mask[i] == 0 {
                    continue;
                }
                if let Some(v) = moving.trilinear_sample(u.warp_at(i)) {
                    chunk[k] = fixed.voxels[i] as f64 - v;
                }
            }
        }
    });
    par::for_each_chunk_mut(&mut m, slab, |z, chunk| {
        for y in 0..grid.dims[1] {
            for x in 0..grid.dims[0] {
                let k = grid.index(x, y, 0);
                let i = z * slab + k;
                if fixed.mask[i] == 0 {
                    continue;
                }
                if moving
                    .trilinear_sample(u.warp_at(i))
                    .is_some()
                {
                    chunk[k] = 1;
                }
            }
        }
    });
    (r, m)
}

/// Mask-normalized blur of the residual, the intensity shift map. With
/// `sigma_vox = None` the shift map is identically zero and the image term
/// degrades to plain squared differences.
pub fn shift_map(
    residual: &[f64],
    mask: &[u8],
    dims: [usize; 3],
    sigma_vox: Option<[f64; 3]>,
) -> Vec<f64> {
    match sigma_vox {
        Some(s) => masked_blur(residual, mask, dims, s),
        None => vec![0.0; residual.len()],
    }
}

/// Shift-corrected image force: `-(r - beta) grad_moving(phi(x))` on the
/// fixed grid, where `r` is the warped residual and `beta` its shift map at
/// scale `sigma_mm` (world units; `None` keeps the plain squared-difference
/// force). `grad_moving` is the central-difference gradient of the moving
/// image on its own grid.
pub fn dsc_force(
    fixed: &Volume,
    moving: &Volume,
    grad_moving: &VecField3,
    u: &VecField3,
    sigma_mm: Option<f64>,
) -> ForceTerm {
    let grid = fixed.grid;
    let slab = grid.slab_len();
    let (r, m) = warped_residual(fixed, moving, u);
    let sigma_vox = sigma_mm.map(|s| crate::filter::sigma_vox_from_mm(grid.spacing, s));
    let beta = shift_map(&r, &m, grid.dims, sigma_vox);

    let mut field = VecField3::zeros(grid);
    par::for_each_chunk_mut(&mut field.data, slab, |z, chunk| {
        for y in 0..grid.dims[1] {
            for x in 0..grid.dims[0] {
                let k = grid.index(x, y, 0);
                let i = z * slab + k;
                if m[i] == 0 {
                    continue;
                }
                let g = grad_moving.sample_clamped(u.warp_at(i));
                let w = r[i] - beta[i];
                chunk[k] = [-w * g[0], -w * g[1], -w * g[2]];
            }
        }
    });
    let (energy, support) = par::fold_indexed(
        grid.dims[2],
        |z| {
            let lo = z * slab;
            let mut acc = (0.0f64, 0usize);
            for i in lo..lo + slab {
                if m[i] != 0 {
                    let w = r[i] - beta[i];
                    acc.0 += w * w;
                    acc.1 += 1;
                }
            }
            acc
        },
        (0.0f64, 0usize),
        |t, p| (t.0 + p.0, t.1 + p.1),
    );
    ForceTerm {
        field,
        energy,
        support,
    }
}

/// Image energy with an externally fixed shift map and support mask, for
/// derivative checks: only the residual varies with `u`.
pub fn frozen_image_energy(
    fixed: &Volume,
    moving: &Volume,
    u: &VecField3,
    beta: &[f64],
    mask: &[u8],
) -> f64 {
    let grid = fixed.grid;
    let slab = grid.slab_len();
    par::fold_indexed(
        grid.dims[2],
        |z| {
            let mut acc = 0.0f64;
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    let i = z * slab + grid.index(x, y, 0);
                    if mask[i] == 0 {
                        continue;
                    }
                    let v = moving
                        .trilinear_sample(u.warp_at(i))
                        .expect("frozen energy mask must stay inside the valid sample region");
                    let w = fixed.voxels[i] as f64 - v - beta[i];
                    acc += w * w;
                }
            }
            acc
        },
        0.0,
        |t, p| t + p,
    )
}

/// Inverse-consistency force on the grid of `u`: with `phi(x) = x + u(x)`
/// and the opposing map `psi(y) = y + v(y)`, the residual `g = psi(phi(x)) - x`
/// is pushed through the transposed Jacobian of `psi`, `f = (I + Dv)^T g`.
/// `grad_v` is the precomputed Jacobian of `v`; both are sampled with
/// clamping at `phi(x)`. Support is restricted to `mask` on the `u` grid.
pub fn ic_force(
    u: &VecField3,
    v: &VecField3,
    grad_v: &JacField,
    mask: &[u8],
) -> ForceTerm {
    let grid = u.grid;
    let slab = grid.slab_len();
    let mut field = VecField3::zeros(grid);
    par::for_each_chunk_mut(&mut field.data, slab, |z, chunk| {
        for y in 0..grid.dims[1] {
            for x in 0..grid.dims[0] {
                let k = grid.index(x, y, 0);
                let i = z * slab + k;
                if mask[i] == 0 {
                    continue;
                }
                let phi = u.warp_at(i);
                let vv = v.sample_clamped(phi);
                let dv = grad_v.sample_clamped(phi);
                let ui = u.data[i];
                let g = [ui[0] + vv[0], ui[1] + vv[1], ui[2] + vv[2]];
                let mut f = [0.0f64; 3];
                for a in 0..3 {
                    // (I + Dv)^T g: row index of Dv is the component of v,
                    // column index the derivative direction.
                    f[a] = g[a] + dv[0][a] * g[0] + dv[1][a] * g[1] + dv[2][a] * g[2];
                }
                chunk[k] = f;
            }
        }
    });
    let (energy, support) = par::fold_indexed(
        grid.dims[2],
        |z| {
            let mut acc = (0.0f64, 0usize);
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    let i = z * slab + grid.index(x, y, 0);
                    if mask[i] == 0 {
                        continue;
                    }
                    let phi = u.warp_at(i);
                    let vv = v.sample_clamped(phi);
                    let ui = u.data[i];
                    let g = [ui[0] + vv[0], ui[1] + vv[1], ui[2] + vv[2]];
                    acc.0 += g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
                    acc.1 += 1;
                }
            }
            acc
        },
        (0.0f64, 0usize),
        |t, p| (t.0 + p.0, t.1 + p.1),
    );
    ForceTerm {
        field,
        energy,
        support,
    }
}

/// Consistency energy with `v` held fixed, for derivative checks.
pub fn frozen_consistency_energy(u: &VecField3, v: &VecField3, mask: &[u8]) -> f64 {
    let grid = u.grid;
    let slab = grid.slab_len();
    par::fold_indexed(
        grid.dims[2],
        |z| {
            let mut acc = 0.0f64;
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    let i = z * slab + grid.index(x, y, 0);
                    if mask[i] == 0 {
                        continue;
                    }
                    let vv = v.sample_clamped(u.warp_at(i));
                    let ui = u.data[i];
                    let g = [ui[0] + vv[0], ui[1] + vv[1], ui[2] + vv[2]];
                    acc += g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
                }
            }
            acc
        },
        0.0,
        |t, p| t + p,
    )
}
