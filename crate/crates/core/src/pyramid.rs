//! Gaussian multi-resolution pyramid for masked volumes.
//!
//! Plain decimation of a masked volume erodes the valid region a little at
//! every level; after a few reductions most of the imaged sector is gone.
//! Before each reduction the mask border is therefore extrapolated outward by
//! one voxel ring with a first-order scheme: for an unmasked voxel `p` and a
//! masked 26-neighbour `q` whose opposite voxel `2q - p` is also masked, the
//! linear extension `2 I(q) - I(2q - p)` predicts `I(p)`; the voxel takes the
//! mean over all computable directions and joins the mask. Voxels supported
//! by fewer than a third of the 26 directions stay unmasked.

use crate::filter::masked_blur;
use crate::par;
use crate::volume::{Grid, Volume};
use crate::{Error, Result};

/// Minimum number of computable directions for an extrapolated voxel:
/// a third of the 26-neighbourhood, rounded up.
const MIN_DIRECTIONS: usize = 9;

/// Extends the mask border outward `rings` times. Each pass treats voxels
/// extrapolated by earlier passes as sources.
pub fn extrapolate_border(vol: &Volume, rings: usize) -> Volume {
    let grid = vol.grid;
    let dims = grid.dims;
    let mut out = vol.clone();
    for _ in 0..rings {
        // Synchronous update: candidates are computed against the current
        // mask, then applied at once.
        let updates: Vec<Vec<(usize, f32)>> = par::map_indexed(dims[2], |z| {
            let mut row = Vec::new();
            for y in 0..dims[1] {
                'voxel: for x in 0..dims[0] {
                    let li = grid.index(x, y, z);
                    if out.mask[li] != 0 {
                        continue;
                    }
                    let mut sum = 0.0f64;
                    let mut count = 0usize;
                    let mut remaining = 26usize;
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                if dx == 0 && dy == 0 && dz == 0 {
                                    continue;
                                }
                                remaining -= 1;
                                let qx = x as i64 + dx;
                                let qy = y as i64 + dy;
                                let qz = z as i64 + dz;
                                let rx = x as i64 + 2 * dx;
                                let ry = y as i64 + 2 * dy;
                                let rz = z as i64 + 2 * dz;
                                if rx < 0
                                    || ry < 0
                                    || rz < 0
                                    || rx >= dims[0] as i64
                                    || ry >= dims[1] as i64
                                    || rz >= dims[2] as i64
                                {
                                    // 2q - p out of bounds implies nothing
                                    // about q; only this direction is lost.
                                    if count + remaining < MIN_DIRECTIONS {
                                        continue 'voxel;
                                    }
                                    continue;
                                }
                                let qi = grid.index(qx as usize, qy as usize, qz as usize);
                                let ri = grid.index(rx as usize, ry as usize, rz as usize);
                                if out.mask[qi] != 0 && out.mask[ri] != 0 {
                                    sum += 2.0 * out.voxels[qi] as f64 - out.voxels[ri] as f64;
                                    count += 1;
                                } else if count + remaining < MIN_DIRECTIONS {
                                    continue 'voxel;
                                }
                            }
                        }
                    }
                    if count >= MIN_DIRECTIONS {
                        row.push((li, (sum / count as f64) as f32));
                    }
                }
            }
            row
        });
        let mut any = false;
        for row in updates {
            for (li, v) in row {
                out.voxels[li] = v;
                out.mask[li] = 1;
                any = true;
            }
        }
        if !any {
            break;
        }
    }
    out
}

/// One pyramid reduction: extrapolate one ring, blur with a mask-normalized
/// Gaussian of `sigma_vox` voxels, then keep every second voxel per axis.
/// Output dims are the ceiling halves, spacing doubles, the origin (the
/// center of voxel (0,0,0)) is unchanged.
pub fn downsample_level(vol: &Volume, sigma_vox: f64) -> Volume {
    let e = extrapolate_border(vol, 1);
    let dims = e.grid.dims;
    let vals: Vec<f64> = e.voxels.iter().map(|&v| v as f64).collect();
    let blurred = masked_blur(&vals, &e.mask, dims, [sigma_vox; 3]);

    let out_dims = [
        dims[0].div_ceil(2),
        dims[1].div_ceil(2),
        dims[2].div_ceil(2),
    ];
    let out_grid = Grid::new(
        out_dims,
        [
            vol.grid.spacing[0] * 2.0,
            vol.grid.spacing[1] * 2.0,
            vol.grid.spacing[2] * 2.0,
        ],
        vol.grid.origin,
    );
    let mut out = Volume::filled(out_grid, 0.0, false);
    let slab = out_grid.slab_len();
    let (vox, mask) = (&mut out.voxels, &mut out.mask);
    par::for_each_chunk_mut(vox, slab, |z, chunk| {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let src = e.grid.index(2 * x, 2 * y, 2 * z);
                chunk[out_grid.index(x, y, 0)] = blurred[src] as f32;
            }
        }
    });
    par::for_each_chunk_mut(mask, slab, |z, chunk| {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                chunk[out_grid.index(x, y, 0)] = e.mask[e.grid.index(2 * x, 2 * y, 2 * z)];
            }
        }
    });
    out
}

/// Multi-resolution pyramid; `levels[0]` is the input volume itself.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<Volume>,
}

impl Pyramid {
    pub fn coarsest(&self) -> &Volume {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Builds an `n_levels` pyramid. Fails if any level loses every masked voxel.
pub fn build_pyramid(vol: &Volume, n_levels: usize, sigma_vox: f64) -> Result<Pyramid> {
    assert!(n_levels >= 1, "a pyramid needs at least one level");
    if vol.n_masked() == 0 {
        return Err(Error::PyramidDegenerate { level: 0 });
    }
    let mut levels = Vec::with_capacity(n_levels);
    levels.push(vol.clone());
    for level in 1..n_levels {
        let next = downsample_level(&levels[level - 1], sigma_vox);
        if next.n_masked() == 0 {
            return Err(Error::PyramidDegenerate { level });
        }
        levels.push(next);
    }
    Ok(Pyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::{make_beam_mask, BeamGeometry};
    use crate::transform::RigidTransform;
    use approx::assert_relative_eq;

    /// Half-space mask with a linear profile along x: the nine computable
    /// directions all predict 2*10 - 8 = 12 for a voxel one step outside.
    #[test]
    fn linear_extension_of_values_ten_and_eight_gives_twelve() {
        let grid = Grid::new([7, 5, 5], [1.0; 3], [0.0; 3]);
        let mut v = Volume::filled(grid, 0.0, false);
        for z in 0..5 {
            for y in 0..5 {
                for x in 3..7 {
                    let i = grid.index(x, y, z);
                    v.mask[i] = 1;
                    v.voxels[i] = 10.0 - 2.0 * (x as f32 - 3.0); // 10, 8, 6, 4
                }
            }
        }
        let e = extrapolate_border(&v, 1);
        let p = grid.index(2, 2, 2);
        assert_eq!(e.mask[p], 1);
        assert_relative_eq!(e.voxels[p] as f64, 12.0, epsilon = 1e-6);
        // Two steps out stays unmasked after a single ring.
        assert_eq!(e.mask[grid.index(1, 2, 2)], 0);
    }

    #[test]
    fn nine_computable_directions_is_the_acceptance_threshold() {
        let grid = Grid::new([7, 5, 5], [1.0; 3], [0.0; 3]);
        let mut v = Volume::filled(grid, 1.0, false);
        for z in 0..5 {
            for y in 0..5 {
                for x in 3..7 {
                    v.mask[grid.index(x, y, z)] = 1;
                }
            }
        }
        // For p = (2,2,2) exactly the 9 directions with dx = +1 are computable.
        let e = extrapolate_border(&v, 1);
        assert_eq!(e.mask[grid.index(2, 2, 2)], 1);

        // Dropping one source voxel leaves 8 directions: below a third of 26.
        let mut v8 = v.clone();
        v8.mask[grid.index(3, 2, 3)] = 0; // kills the (dx=1,dy=0,dz=1) pair...
        // also kills directions that pass through (3,2,3) as q for p=(2,2,2)? q candidates are
        // at distance 1: (3,1..3,1..3). (3,2,3) is one of them.
        let e8 = extrapolate_border(&v8, 1);
        assert_eq!(e8.mask[grid.index(2, 2, 2)], 0);
    }

    #[test]
    fn extrapolation_is_exact_for_globally_linear_fields() {
        let grid = Grid::new([8, 8, 8], [1.0; 3], [0.0; 3]);
        let mut v = Volume::filled(grid, 0.0, false);
        let f = |p: [f64; 3]| 1.5 * p[0] - 0.75 * p[1] + 0.25 * p[2] + 2.0;
        for z in 0..8 {
            for y in 0..8 {
                for x in 2..8 {
                    let i = grid.index(x, y, z);
                    v.mask[i] = 1;
                    v.voxels[i] = f(grid.voxel_center(x, y, z)) as f32;
                }
            }
        }
        let e = extrapolate_border(&v, 2);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..2 {
                    let i = grid.index(x, y, z);
                    if e.mask[i] != 0 {
                        let expect = f(grid.voxel_center(x, y, z)) as f32;
                        assert!(
                            (e.voxels[i] - expect).abs() < 1e-4,
                            "at {x},{y},{z}: {} vs {}",
                            e.voxels[i],
                            expect
                        );
                    }
                }
            }
        }
        // The ring directly adjacent to the original mask must be filled.
        assert_eq!(e.mask[grid.index(1, 4, 4)], 1);
    }

    #[test]
    fn downsample_halves_dims_with_ceiling_and_doubles_spacing() {
        let grid = Grid::new([9, 10, 11], [1.0, 1.5, 2.0], [3.0, -1.0, 0.5]);
        let v = Volume::filled(grid, 1.0, true);
        let d = downsample_level(&v, 1.0);
        assert_eq!(d.grid.dims, [5, 5, 6]);
        assert_eq!(d.grid.spacing, [2.0, 3.0, 4.0]);
        assert_eq!(d.grid.origin, grid.origin);
        // Constant volume stays constant.
        for i in 0..d.grid.len() {
            assert_relative_eq!(d.voxels[i] as f64, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn five_levels_from_199_end_at_13() {
        let grid = Grid::new([199, 199, 199], [0.5; 3], [0.0; 3]);
        let v = Volume::filled(grid, 1.0, true);
        let p = build_pyramid(&v, 5, 1.0).unwrap();
        let dims: Vec<[usize; 3]> = p.levels.iter().map(|l| l.grid.dims).collect();
        assert_eq!(
            dims,
            vec![[199; 3], [100; 3], [50; 3], [25; 3], [13; 3]]
        );
    }

    #[test]
    fn empty_mask_is_a_degenerate_pyramid() {
        let grid = Grid::new([16, 16, 16], [1.0; 3], [0.0; 3]);
        let v = Volume::filled(grid, 1.0, false);
        match build_pyramid(&v, 3, 1.0) {
            Err(Error::PyramidDegenerate { level: 0 }) => {}
            other => panic!("expected degenerate pyramid, got {other:?}"),
        }
    }

    #[test]
    fn extrapolation_preserves_sector_coverage_across_levels() {
        let geom = BeamGeometry {
            fan_half_angle: 35f64.to_radians(),
            sweep_half_angle: 30f64.to_radians(),
            r_min: 4.0,
            r_max: 55.0,
        };
        let grid = Grid::new([64, 64, 64], [1.0; 3], [-31.5, -31.5, -4.0]);
        let mask = make_beam_mask(&grid, &geom, &RigidTransform::identity());
        let mut v = Volume::from_parts(grid, vec![0.0; grid.len()], mask);
        for z in 0..64 {
            for y in 0..64 {
                for x in 0..64 {
                    let p = grid.voxel_center(x, y, z);
                    v.voxels[grid.index(x, y, z)] =
                        ((0.1 * p[0]).sin() + (0.12 * p[2]).cos()) as f32;
                }
            }
        }
        let with = build_pyramid(&v, 4, 1.0).unwrap();
        let f0 = with.levels[0].masked_fraction();
        let f3 = with.levels[3].masked_fraction();

        // The same cascade without border extrapolation, for contrast.
        let mut plain = v.clone();
        let mut frac_plain = 0.0;
        for _ in 0..3 {
            let vals: Vec<f64> = plain.voxels.iter().map(|&x| x as f64).collect();
            let blurred = masked_blur(&vals, &plain.mask, plain.grid.dims, [1.0; 3]);
            let nd = [
                plain.grid.dims[0].div_ceil(2),
                plain.grid.dims[1].div_ceil(2),
                plain.grid.dims[2].div_ceil(2),
            ];
            let ng = Grid::new(
                nd,
                [
                    plain.grid.spacing[0] * 2.0,
                    plain.grid.spacing[1] * 2.0,
                    plain.grid.spacing[2] * 2.0,
                ],
                plain.grid.origin,
            );
            let mut nv = Volume::filled(ng, 0.0, false);
            for z in 0..nd[2] {
                for y in 0..nd[1] {
                    for x in 0..nd[0] {
                        let src = plain.grid.index(2 * x, 2 * y, 2 * z);
                        // Without extrapolation, decimation keeps a voxel
                        // only when its full blur support was masked.
                        let c = [2 * x, 2 * y, 2 * z];
                        let mut ok = plain.mask[src] != 0;
                        if ok {
                            // require the 6-neighbourhood masked, the minimal
                            // support of the blur kernel
                            for a in 0..3 {
                                let mut m = c;
                                if m[a] + 1 < plain.grid.dims[a] {
                                    m[a] += 1;
                                    ok &= plain.mask[plain.grid.index(m[0], m[1], m[2])] != 0;
                                }
                                let mut m = c;
                                if m[a] >= 1 {
                                    m[a] -= 1;
                                    ok &= plain.mask[plain.grid.index(m[0], m[1], m[2])] != 0;
                                }
                            }
                        }
                        if ok {
                            let i = ng.index(x, y, z);
                            nv.voxels[i] = blurred[src] as f32;
                            nv.mask[i] = 1;
                        }
                    }
                }
            }
            plain = nv;
            frac_plain = plain.masked_fraction();
        }

        assert!(
            f3 >= 0.7 * f0,
            "retention {:.3} of {:.3} too low with extrapolation",
            f3,
            f0
        );
        assert!(
            frac_plain < f3,
            "plain cascade {:.3} should lose more than extrapolated {:.3}",
            frac_plain,
            f3
        );
    }
}
