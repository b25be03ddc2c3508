//! Accuracy metrics for registration results: fiducial target registration
//! error, decile statistics, and a six-point probe-head transform distance.
//!
//! All positions are in millimetres. Fiducial sets pair across volumes by id,
//! so set order never matters.

use crate::transform::RigidTransform;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// A labelled marker position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fiducial {
    pub id: u32,
    pub pos: [f64; 3],
}

/// Markers of one volume; ids are unique and identify correspondences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FiducialSet {
    pub points: Vec<Fiducial>,
}

impl FiducialSet {
    pub fn new(points: Vec<Fiducial>) -> Result<Self> {
        let set = Self { points };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.points {
            if !seen.insert(f.id) {
                return Err(Error::Correspondence(format!("duplicate id {}", f.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn by_id(&self) -> BTreeMap<u32, [f64; 3]> {
        self.points.iter().map(|f| (f.id, f.pos)).collect()
    }
}

/// Writes a fiducial set as CSV with the header `id,x_mm,y_mm,z_mm`.
pub fn write_fiducials_csv(path: &Path, set: &FiducialSet) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "id,x_mm,y_mm,z_mm")?;
    for f in &set.points {
        writeln!(w, "{},{},{},{}", f.id, f.pos[0], f.pos[1], f.pos[2])?;
    }
    Ok(())
}

/// Reads a fiducial set written by [`write_fiducials_csv`].
pub fn read_fiducials_csv(path: &Path) -> Result<FiducialSet> {
    let fail = |msg: String| Error::FileFormat {
        path: path.display().to_string(),
        msg,
    };
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "id,x_mm,y_mm,z_mm" => {}
        Some(Ok(h)) => return Err(fail(format!("bad header {h:?}"))),
        Some(Err(e)) => return Err(e.into()),
        None => return Err(fail("empty file".into())),
    }
    let mut points = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(fail(format!("line {}: expected 4 columns", n + 2)));
        }
        let id = cols[0]
            .trim()
            .parse::<u32>()
            .map_err(|e| fail(format!("line {}: id: {e}", n + 2)))?;
        let mut pos = [0.0; 3];
        for (a, c) in pos.iter_mut().zip(&cols[1..]) {
            *a = c
                .trim()
                .parse::<f64>()
                .map_err(|e| fail(format!("line {}: coordinate: {e}", n + 2)))?;
        }
        points.push(Fiducial { id, pos });
    }
    FiducialSet::new(points)
}

/// Per-fiducial target registration errors plus summary statistics.
#[derive(Clone, Debug, Serialize)]
pub struct TreStats {
    /// (id, error mm), ascending by id.
    pub per_fiducial: Vec<(u32, f64)>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub rms: f64,
}

/// Target registration error of a mapping from tracking space into reference
/// space: for each id, the distance between the reference marker and the
/// mapped tracking marker.
pub fn tre(
    ref_fids: &FiducialSet,
    trk_fids: &FiducialSet,
    map: impl Fn([f64; 3]) -> [f64; 3],
) -> Result<TreStats> {
    ref_fids.validate()?;
    trk_fids.validate()?;
    let r = ref_fids.by_id();
    let t = trk_fids.by_id();
    if r.len() != t.len() {
        return Err(Error::Correspondence(format!(
            "{} reference vs {} tracking fiducials",
            r.len(),
            t.len()
        )));
    }
    if r.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut per_fiducial = Vec::with_capacity(r.len());
    for (id, p) in &r {
        let q = t
            .get(id)
            .ok_or_else(|| Error::Correspondence(format!("id {id} missing from tracking set")))?;
        let m = map(*q);
        let d = [p[0] - m[0], p[1] - m[1], p[2] - m[2]];
        per_fiducial.push((*id, (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()));
    }
    let n = per_fiducial.len() as f64;
    let mean = per_fiducial.iter().map(|(_, e)| e).sum::<f64>() / n;
    let var = per_fiducial.iter().map(|(_, e)| (e - mean) * (e - mean)).sum::<f64>() / n;
    let rms = (per_fiducial.iter().map(|(_, e)| e * e).sum::<f64>() / n).sqrt();
    Ok(TreStats {
        per_fiducial,
        mean,
        std: var.sqrt(),
        rms,
    })
}

/// Means of the ten equal-count bins of the ascending-sorted errors. When the
/// count is not divisible by ten, the remainder goes to the last bins, so the
/// "worst decile" (bin 10) is never smaller than the others.
pub fn decile_stats(errors: &[f64]) -> Result<[f64; 10]> {
    if errors.len() < 10 {
        return Err(Error::InsufficientData {
            needed: 10,
            got: errors.len(),
        });
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("errors must be finite"));
    let q = sorted.len() / 10;
    let r = sorted.len() % 10;
    let mut out = [0.0; 10];
    let mut at = 0;
    for (i, m) in out.iter_mut().enumerate() {
        let size = if i >= 10 - r { q + 1 } else { q };
        let bin = &sorted[at..at + size];
        *m = bin.iter().sum::<f64>() / size as f64;
        at += size;
    }
    debug_assert_eq!(at, sorted.len());
    Ok(out)
}

/// RMS distance between the images of the six probe-head surface points
/// (±r, 0, 0), (0, ±r, 0), (0, 0, ±r) under the two transforms. The points
/// live in the probe frame, centered on the transducer origin.
pub fn transform_distance(t1: &RigidTransform, t2: &RigidTransform, probe_head_radius: f64) -> f64 {
    assert!(probe_head_radius > 0.0, "probe head radius must be positive");
    let r = probe_head_radius;
    let pts = [
        [r, 0.0, 0.0],
        [-r, 0.0, 0.0],
        [0.0, r, 0.0],
        [0.0, -r, 0.0],
        [0.0, 0.0, r],
        [0.0, 0.0, -r],
    ];
    let mut sum = 0.0;
    for p in pts {
        let a = t1.apply(p);
        let b = t2.apply(p);
        let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        sum += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    }
    (sum / 6.0).sqrt()
}

/// Plain Pearson correlation between two equal-length samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Config(format!(
            "pearson needs equal nonempty samples, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateMetric);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// One row of a results table: a labelled error distribution plus wall time.
#[derive(Clone, Debug, Serialize)]
pub struct ResultsRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub rms: f64,
    pub worst_decile_mean: f64,
    pub seconds: f64,
}

impl ResultsRow {
    /// Summarizes an error sample (needs at least 10 values for the decile).
    pub fn from_errors(label: &str, errors: &[f64], seconds: f64) -> Result<Self> {
        let deciles = decile_stats(errors)?;
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        let rms = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        Ok(Self {
            label: label.to_string(),
            mean,
            std: var.sqrt(),
            rms,
            worst_decile_mean: deciles[9],
            seconds,
        })
    }
}

/// A set of result rows renderable as JSON or an aligned text table.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultsRow>,
}

impl ResultsTable {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(std::iter::once("case".len()))
            .max()
            .unwrap_or(4);
        s.push_str(&format!(
            "{:<label_w$}  {:>16}  {:>8}  {:>12}  {:>8}\n",
            "case", "mean+/-std [mm]", "RMS [mm]", "worst10 [mm]", "time [s]"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<label_w$}  {:>16}  {:>8.2}  {:>12.2}  {:>8.1}\n",
                r.label,
                format!("{:.2}+/-{:.2}", r.mean, r.std),
                r.rms,
                r.worst_decile_mean,
                r.seconds
            ));
        }
        s
    }
}
