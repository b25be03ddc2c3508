//! Similarity metrics over the joint mask of two volumes.
//!
//! All statistics are accumulated in f64 and reduced in a fixed slab order so
//! results do not depend on the number of worker threads. Correlation uses a
//! two-pass (centered) formulation: the single-pass raw-moment identity loses
//! digits exactly in the situation the affine-invariance guarantee cares
//! about, a bright image with a large constant offset.

use crate::par;
use crate::transform::RigidTransform;
use crate::volume::Volume;
use crate::{Error, Result};

/// A metric value together with the overlap that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSample {
    pub value: f64,
    pub overlap: usize,
}

fn require_overlap(found: usize, min: usize) -> Result<()> {
    if found < min {
        return Err(Error::InsufficientOverlap { found, min });
    }
    Ok(())
}

/// Pearson correlation coefficient over voxels masked in both volumes.
///
/// Fails with `DegenerateMetric` when either image is constant on the joint
/// mask. Invariant under affine intensity maps of either argument up to
/// floating-point rounding.
pub fn pearson_cc(a: &Volume, b: &Volume, min_overlap: usize) -> Result<MetricSample> {
    a.grid.require_same(&b.grid, "metric operands")?;
    let slab = a.grid.slab_len();
    let nz = a.grid.dims[2];

    let (n, sa, sb) = par::fold_indexed(
        nz,
        |z| {
            let lo = z * slab;
            let mut acc = (0usize, 0.0f64, 0.0f64);
            for i in lo..lo + slab {
                if a.mask[i] != 0 && b.mask[i] != 0 {
                    acc.0 += 1;
                    acc.1 += a.voxels[i] as f64;
                    acc.2 += b.voxels[i] as f64;
                }
            }
            acc
        },
        (0usize, 0.0f64, 0.0f64),
        |t, p| (t.0 + p.0, t.1 + p.1, t.2 + p.2),
    );
    require_overlap(n, min_overlap)?;
    let (ma, mb) = (sa / n as f64, sb / n as f64);

    let (saa, sbb, sab) = par::fold_indexed(
        nz,
        |z| {
            let lo = z * slab;
            let mut acc = (0.0f64, 0.0f64, 0.0f64);
            for i in lo..lo + slab {
                if a.mask[i] != 0 && b.mask[i] != 0 {
                    let da = a.voxels[i] as f64 - ma;
                    let db = b.voxels[i] as f64 - mb;
                    acc.0 += da * da;
                    acc.1 += db * db;
                    acc.2 += da * db;
                }
            }
            acc
        },
        (0.0f64, 0.0f64, 0.0f64),
        |t, p| (t.0 + p.0, t.1 + p.1, t.2 + p.2),
    );
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::DegenerateMetric);
    }
    Ok(MetricSample {
        value: sab / (saa * sbb).sqrt(),
        overlap: n,
    })
}

/// Mean squared intensity difference over the joint mask.
pub fn ssd(a: &Volume, b: &Volume, min_overlap: usize) -> Result<MetricSample> {
    a.grid.require_same(&b.grid, "metric operands")?;
    let slab = a.grid.slab_len();
    let (n, s) = par::fold_indexed(
        a.grid.dims[2],
        |z| {
            let lo = z * slab;
            let mut acc = (0usize, 0.0f64);
            for i in lo..lo + slab {
                if a.mask[i] != 0 && b.mask[i] != 0 {
                    let d = a.voxels[i] as f64 - b.voxels[i] as f64;
                    acc.0 += 1;
                    acc.1 += d * d;
                }
            }
            acc
        },
        (0usize, 0.0f64),
        |t, p| (t.0 + p.0, t.1 + p.1),
    );
    require_overlap(n, min_overlap)?;
    Ok(MetricSample {
        value: s / n as f64,
        overlap: n,
    })
}

/// Shift-corrected squared difference: the mean square of the difference
/// image minus its own mask-normalized Gaussian blur (`sigma_mm` in world
/// units, converted per axis). Slowly varying intensity disagreement lives in
/// the blurred part and cancels; genuine structural misalignment survives.
pub fn shift_correlation(
    a: &Volume,
    b: &Volume,
    sigma_mm: f64,
    min_overlap: usize,
) -> Result<MetricSample> {
    a.grid.require_same(&b.grid, "metric operands")?;
    let len = a.grid.len();
    let mut joint = vec![0u8; len];
    let mut d = vec![0.0f64; len];
    let slab = a.grid.slab_len();
    par::for_each_chunk_mut(&mut joint, slab, |z, chunk| {
        let lo = z * slab;
        for (k, m) in chunk.iter_mut().enumerate() {
            let i = lo + k;
            *m = (a.mask[i] != 0 && b.mask[i] != 0) as u8;
        }
    });
    par::for_each_chunk_mut(&mut d, slab, |z, chunk| {
        let lo = z * slab;
        for (k, v) in chunk.iter_mut().enumerate() {
            let i = lo + k;
            if joint[i] != 0 {
                *v = a.voxels[i] as f64 - b.voxels[i] as f64;
            }
        }
    });
    let shift = crate::filter::masked_blur(
        &d,
        &joint,
        a.grid.dims,
        crate::filter::sigma_vox_from_mm(a.grid.spacing, sigma_mm),
    );
    let (n, s) = par::fold_indexed(
        a.grid.dims[2],
        |z| {
            let lo = z * slab;
            let mut acc = (0usize, 0.0f64);
            for i in lo..lo + slab {
                if joint[i] != 0 {
                    let r = d[i] - shift[i];
                    acc.0 += 1;
                    acc.1 += r * r;
                }
            }
            acc
        },
        (0usize, 0.0f64),
        |t, p| (t.0 + p.0, t.1 + p.1),
    );
    require_overlap(n, min_overlap)?;
    Ok(MetricSample {
        value: s / n as f64,
        overlap: n,
    })
}

/// Correlation between `reference` and `moving` pulled back through a rigid
/// map, evaluated on the reference grid. `map` sends reference-grid points
/// into the coordinate frame of `moving` (a sampling map). Voxels whose
/// pulled-back sample leaves the moving mask drop out of the statistic.
pub fn cc_under_transform(
    reference: &Volume,
    moving: &Volume,
    map: &RigidTransform,
    min_overlap: usize,
) -> Result<MetricSample> {
    let grid = reference.grid;
    let (rot, shift) = map.as_affine();
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(reference.n_masked());
    for z in 0..grid.dims[2] {
        for y in 0..grid.dims[1] {
            for x in 0..grid.dims[0] {
                let i = grid.index(x, y, z);
                if reference.mask[i] == 0 {
                    continue;
                }
                let p = grid.voxel_center(x, y, z);
                let q = rot * nalgebra::Vector3::new(p[0], p[1], p[2]) + shift;
                if let Some(v) = moving.trilinear_sample([q.x, q.y, q.z]) {
                    pairs.push((reference.voxels[i] as f64, v));
                }
            }
        }
    }
    require_overlap(pairs.len(), min_overlap)?;
    let n = pairs.len() as f64;
    let (mut sa, mut sb) = (0.0f64, 0.0f64);
    for &(a, b) in &pairs {
        sa += a;
        sb += b;
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut saa, mut sbb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
    for &(a, b) in &pairs {
        let (da, db) = (a - ma, b - mb);
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::DegenerateMetric);
    }
    Ok(MetricSample {
        value: sab / (saa * sbb).sqrt(),
        overlap: pairs.len(),
    })
}
