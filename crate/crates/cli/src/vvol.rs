//! The VVOL/1 volume file format.
//!
//! A short ASCII header, a blank line, then raw little-endian f32 voxels and
//! an optional mask byte per voxel:
//!
//! ```text
//! vvol 1
//! dims dx dy dz
//! spacing sx sy sz
//! origin ox oy oz
//! dtype f32le
//! mask 0|1
//! <blank line>
//! <dx*dy*dz little-endian f32> [<dx*dy*dz mask bytes>]
//! ```
//!
//! Spacing and origin use shortest round-trip decimal formatting, so a
//! write-read cycle reproduces every field bit for bit.

use sonoreg_core::volume::{Grid, Volume};
use sonoreg_core::{Error, Result};
use std::io::Write;
use std::path::Path;

fn fail(path: &Path, msg: String) -> Error {
    Error::FileFormat {
        path: path.display().to_string(),
        msg,
    }
}

/// Writes `vol` with its mask (header `mask 1`).
pub fn write_vvol(path: &Path, vol: &Volume) -> Result<()> {
    write_vvol_impl(path, vol, true)
}

/// Writes only the voxel payload (header `mask 0`); reading yields a fully
/// masked volume. Used for exported fields, where a mask has no meaning.
pub fn write_vvol_unmasked(path: &Path, vol: &Volume) -> Result<()> {
    write_vvol_impl(path, vol, false)
}

fn write_vvol_impl(path: &Path, vol: &Volume, with_mask: bool) -> Result<()> {
    let g = &vol.grid;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(
        w,
        "vvol 1\ndims {} {} {}\nspacing {} {} {}\norigin {} {} {}\ndtype f32le\nmask {}\n\n",
        g.dims[0],
        g.dims[1],
        g.dims[2],
        g.spacing[0],
        g.spacing[1],
        g.spacing[2],
        g.origin[0],
        g.origin[1],
        g.origin[2],
        with_mask as u8
    )?;
    let mut bytes = Vec::with_capacity(vol.voxels.len() * 4);
    for v in &vol.voxels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    if with_mask {
        w.write_all(&vol.mask)?;
    }
    Ok(())
}

/// Reads a VVOL/1 file. Parse errors carry the byte offset of the problem;
/// truncation errors name the missing byte count.
pub fn read_vvol(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path)?;

    // The header ends at the first blank line.
    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| fail(path, "no blank line terminating the header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| fail(path, format!("header is not UTF-8: {e}")))?;
    let payload_at = header_end + 2;

    let mut lines = header.lines();
    let mut offset = 0usize; // byte offset of the line being parsed
    let mut next_line = |what: &str| -> Result<(&str, usize)> {
        let line = lines
            .next()
            .ok_or_else(|| fail(path, format!("missing {what} line at byte {offset}")))?;
        let at = offset;
        offset += line.len() + 1;
        Ok((line, at))
    };

    let (magic, at) = next_line("magic")?;
    if magic != "vvol 1" {
        return Err(fail(path, format!("bad magic {magic:?} at byte {at}")));
    }

    let mut fields = |name: &str, n: usize| -> Result<Vec<String>> {
        let (line, at) = next_line(name)?;
        let mut it = line.split_whitespace();
        if it.next() != Some(name) {
            return Err(fail(path, format!("expected `{name}` at byte {at}, got {line:?}")));
        }
        let vals: Vec<String> = it.map(str::to_string).collect();
        if vals.len() != n {
            return Err(fail(
                path,
                format!("`{name}` wants {n} values, got {} at byte {at}", vals.len()),
            ));
        }
        Ok(vals)
    };

    let mut dims = [0usize; 3];
    for (d, s) in dims.iter_mut().zip(fields("dims", 3)?) {
        *d = s
            .parse::<usize>()
            .map_err(|e| fail(path, format!("dims: {e}")))?;
        if *d == 0 {
            return Err(fail(path, "dims must be positive".into()));
        }
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .and_then(|p| p.checked_mul(4).map(|_| p))
        .ok_or_else(|| fail(path, format!("dims {dims:?} overflow")))?;

    let mut spacing = [0f64; 3];
    for (d, s) in spacing.iter_mut().zip(fields("spacing", 3)?) {
        *d = s
            .parse::<f64>()
            .map_err(|e| fail(path, format!("spacing: {e}")))?;
        if !(*d > 0.0) {
            return Err(fail(path, format!("spacing must be positive, got {d}")));
        }
    }
    let mut origin = [0f64; 3];
    for (d, s) in origin.iter_mut().zip(fields("origin", 3)?) {
        *d = s
            .parse::<f64>()
            .map_err(|e| fail(path, format!("origin: {e}")))?;
        if !d.is_finite() {
            return Err(fail(path, format!("origin must be finite, got {d}")));
        }
    }
    let dtype = fields("dtype", 1)?;
    if dtype[0] != "f32le" {
        return Err(fail(path, format!("unsupported dtype {:?}", dtype[0])));
    }
    let mask_flag = match fields("mask", 1)?[0].as_str() {
        "0" => false,
        "1" => true,
        other => return Err(fail(path, format!("mask must be 0 or 1, got {other:?}"))),
    };
    if lines.next().is_some() {
        return Err(fail(path, "unexpected extra header line".into()));
    }

    let voxel_bytes = n * 4;
    let want = payload_at + voxel_bytes + if mask_flag { n } else { 0 };
    if bytes.len() < want {
        return Err(fail(
            path,
            format!(
                "truncated payload: need {want} bytes, file has {} ({} missing)",
                bytes.len(),
                want - bytes.len()
            ),
        ));
    }
    if bytes.len() > want {
        return Err(fail(
            path,
            format!("{} trailing bytes after the payload", bytes.len() - want),
        ));
    }

    let mut voxels = Vec::with_capacity(n);
    for c in bytes[payload_at..payload_at + voxel_bytes].chunks_exact(4) {
        voxels.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    }
    let mask = if mask_flag {
        let m = &bytes[payload_at + voxel_bytes..];
        if let Some(bad) = m.iter().position(|b| *b > 1) {
            return Err(fail(
                path,
                format!(
                    "mask byte {} at byte {} is neither 0 nor 1",
                    m[bad],
                    payload_at + voxel_bytes + bad
                ),
            ));
        }
        m.to_vec()
    } else {
        vec![1u8; n]
    };

    Ok(Volume::from_parts(
        Grid::new(dims, spacing, origin),
        voxels,
        mask,
    ))
}
