//! Separable Gaussian filtering normalized over a validity mask.
//!
//! The masked blur is the quotient of two plain convolutions,
//! `S(v * m) / S(m)`, so missing voxels neither bleed zeros into the result
//! nor shrink the valid region.

use crate::par;

/// Symmetric 1-D Gaussian taps truncated at 3 sigma, normalized to sum 1.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = ((3.0 * sigma).floor() as usize).max(1);
    let mut taps = Vec::with_capacity(2 * radius + 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in -(radius as isize)..=(radius as isize) {
        taps.push((-(i * i) as f64 * inv).exp());
    }
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// One separable blur pass along `axis` with zero padding outside the grid.
fn blur_axis(input: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> Vec<f64> {
    let radius = (taps.len() - 1) as isize / 2;
    let stride: isize = match axis {
        0 => 1,
        1 => dims[0] as isize,
        _ => (dims[0] * dims[1]) as isize,
    };
    let extent = dims[axis] as isize;
    let mut out = vec![0.0f64; input.len()];
    let slab = dims[0] * dims[1];
    par::for_each_chunk_mut(&mut out, slab, |z, chunk| {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let coord = [x as isize, y as isize, z as isize];
                let li = x + dims[0] * (y + dims[1] * z);
                let pos = coord[axis];
                let mut acc = 0.0;
                let lo = (-radius).max(-pos);
                let hi = radius.min(extent - 1 - pos);
                for o in lo..=hi {
                    acc += taps[(o + radius) as usize] * input[(li as isize + o * stride) as usize];
                }
                chunk[x + dims[0] * y] = acc;
            }
        }
    });
    out
}

/// Convert an isotropic world-unit sigma into per-axis voxel sigmas.
pub fn sigma_vox_from_mm(spacing: [f64; 3], sigma_mm: f64) -> [f64; 3] {
    [
        sigma_mm / spacing[0],
        sigma_mm / spacing[1],
        sigma_mm / spacing[2],
    ]
}

/// Plain separable Gaussian blur (zero padding), one sigma per axis in voxels.
pub fn separable_blur(input: &[f64], dims: [usize; 3], sigma_vox: [f64; 3]) -> Vec<f64> {
    let mut buf = input.to_vec();
    for axis in 0..3 {
        if dims[axis] > 1 {
            let taps = gaussian_taps(sigma_vox[axis]);
            buf = blur_axis(&buf, dims, axis, &taps);
        }
    }
    buf
}

/// Mask-normalized Gaussian blur. Output voxels outside the mask are zero;
/// masked voxels hold the Gaussian average of masked values only.
pub fn masked_blur(values: &[f64], mask: &[u8], dims: [usize; 3], sigma_vox: [f64; 3]) -> Vec<f64> {
    assert_eq!(values.len(), mask.len());
    let n = values.len();
    let mut weighted = vec![0.0f64; n];
    let mut weight = vec![0.0f64; n];
    for i in 0..n {
        if mask[i] != 0 {
            weighted[i] = values[i];
            weight[i] = 1.0;
        }
    }
    let weighted = separable_blur(&weighted, dims, sigma_vox);
    let weight = separable_blur(&weight, dims, sigma_vox);
    let mut out = vec![0.0f64; n];
    let slab = dims[0] * dims[1];
    par::for_each_chunk_mut(&mut out, slab, |z, chunk| {
        let off = z * slab;
        for k in 0..chunk.len() {
            let i = off + k;
            if mask[i] != 0 && weight[i] > 0.0 {
                chunk[k] = weighted[i] / weight[i];
            }
        }
    });
    out
}
