//! The staged registration pipeline: systematic pose search, multi-start
//! rigid refinement, and elastic correction, with every artifact written to
//! the output directory and wall-clock timing per stage.

use crate::config::{Mode, RunConfig};
use crate::vvol;
use serde::Serialize;
use sonoreg_core::elastic::{elastic_register, ElasticResult};
use sonoreg_core::eval::{read_fiducials_csv, tre, FiducialSet, TreStats};
use sonoreg_core::field::VecField3;
use sonoreg_core::kinematics::{systematic_search, PoseCandidate, SearchOutcome};
use sonoreg_core::pyramid::build_pyramid;
use sonoreg_core::rigid::{rigid_register, RigidResult};
use sonoreg_core::transform::RigidTransform;
use sonoreg_core::volume::Volume;
use sonoreg_core::{Error, Result};
use std::path::Path;
use std::time::Instant;

/// Wall-clock seconds spent in one named stage.
#[derive(Clone, Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Serializable snapshot of a completed pose search.
#[derive(Clone, Debug, Serialize)]
pub struct SearchSummary {
    pub candidates: Vec<PoseCandidate>,
    pub evaluated: usize,
    pub rejected: usize,
    pub total: usize,
}

impl SearchSummary {
    fn from_outcome(o: &SearchOutcome) -> Self {
        Self {
            candidates: o.candidates.clone(),
            evaluated: o.evaluated,
            rejected: o.rejected,
            total: o.total,
        }
    }
}

/// Compact elastic record for the report; the full per-level history goes to
/// `diagnostics.json`.
#[derive(Clone, Debug, Serialize)]
pub struct ElasticSummary {
    pub converged: bool,
    pub levels_run: usize,
    /// Mean forward/reverse composition error at the last level, mm.
    pub final_consistency: f64,
}

/// Everything a run produced, written to `report.json`.
#[derive(Debug, Serialize)]
pub struct RegistrationReport {
    pub mode: String,
    /// Rigid estimate the run settled on (stage 2, or stage 1's best
    /// candidate in kinematic mode, or the supplied seed in elastic mode).
    pub transform: RigidTransform,
    pub search: Option<SearchSummary>,
    pub rigid: Option<RigidResult>,
    pub elastic: Option<ElasticSummary>,
    pub timings: Vec<StageTiming>,
    /// Fiducial error under the rigid transform alone, when markers given.
    pub tre_rigid: Option<TreStats>,
    /// Fiducial error with the elastic correction applied on top.
    pub tre_elastic: Option<TreStats>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::FileFormat {
        path: path.display().to_string(),
        msg: format!("serialization: {e}"),
    })?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a rigid transform from its JSON file.
pub fn read_transform_json(path: &Path) -> Result<RigidTransform> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::FileFormat {
        path: path.display().to_string(),
        msg: format!("transform: {e}"),
    })
}

/// Writes `field` as one unmasked VVOL per component: `<stem>_x.vvol` etc.
pub fn write_field_vvol(dir: &Path, stem: &str, field: &VecField3) -> Result<()> {
    for (axis, suffix) in ["x", "y", "z"].iter().enumerate() {
        let vox: Vec<f32> = field.data.iter().map(|v| v[axis] as f32).collect();
        let vol = Volume::from_parts(field.grid, vox, vec![1u8; field.grid.len()]);
        vvol::write_vvol_unmasked(&dir.join(format!("{stem}_{suffix}.vvol")), &vol)?;
    }
    Ok(())
}

/// Reads a field written by [`write_field_vvol`] back from its three
/// component files.
pub fn read_field_vvol(dir: &Path, stem: &str) -> Result<VecField3> {
    let mut parts = Vec::with_capacity(3);
    for suffix in ["x", "y", "z"] {
        parts.push(vvol::read_vvol(&dir.join(format!("{stem}_{suffix}.vvol")))?);
    }
    parts[1].grid.require_same(&parts[0].grid, "field components")?;
    parts[2].grid.require_same(&parts[0].grid, "field components")?;
    let mut field = VecField3::zeros(parts[0].grid);
    for (i, slot) in field.data.iter_mut().enumerate() {
        *slot = [
            parts[0].voxels[i] as f64,
            parts[1].voxels[i] as f64,
            parts[2].voxels[i] as f64,
        ];
    }
    Ok(field)
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Kinematic => "kinematic",
        Mode::Rigid => "rigid",
        Mode::Elastic => "elastic",
        Mode::Full => "full",
    }
}

struct Fiducials {
    reference: FiducialSet,
    tracking: FiducialSet,
}

/// Runs the configured stages and writes all artifacts into
/// `cfg.output_dir`: `search.json`, `rigid.json`, `transform.json`,
/// displacement fields, `diagnostics.json`, and `report.json`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RegistrationReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;

    let reference = vvol::read_vvol(cfg.reference.as_ref().unwrap())?;
    let tracking = vvol::read_vvol(cfg.tracking.as_ref().unwrap())?;
    let fiducials = match (&cfg.fiducials_reference, &cfg.fiducials_tracking) {
        (Some(r), Some(t)) => Some(Fiducials {
            reference: read_fiducials_csv(r)?,
            tracking: read_fiducials_csv(t)?,
        }),
        _ => None,
    };

    let ref_pyr = build_pyramid(&reference, cfg.pyramid_levels, cfg.pyramid_sigma_vox)?;
    let mut timings = Vec::new();
    let mut search_summary = None;
    let mut rigid_result: Option<RigidResult> = None;

    // Stages 1 and 2 share the tracking pyramid in its own frame.
    let transform = if cfg.mode == Mode::Elastic {
        match &cfg.initial_transform {
            Some(path) => read_transform_json(path)?,
            None => RigidTransform::identity(),
        }
    } else {
        let trk_pyr = build_pyramid(&tracking, cfg.pyramid_levels, cfg.pyramid_sigma_vox)?;

        let t0 = Instant::now();
        let outcome = systematic_search(&cfg.model(), &ref_pyr, &trk_pyr, &cfg.search_params())?;
        timings.push(StageTiming {
            stage: "search".into(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        let summary = SearchSummary::from_outcome(&outcome);
        write_json(&out.join("search.json"), &summary)?;
        let best = outcome.candidates[0].transform;
        search_summary = Some(summary);

        if cfg.mode == Mode::Kinematic {
            best
        } else {
            let seeds: Vec<RigidTransform> =
                outcome.candidates.iter().map(|c| c.transform).collect();
            let t0 = Instant::now();
            let result = rigid_register(&ref_pyr, &trk_pyr, &seeds, &cfg.rigid_params())?;
            timings.push(StageTiming {
                stage: "rigid".into(),
                seconds: t0.elapsed().as_secs_f64(),
            });
            write_json(&out.join("rigid.json"), &result)?;
            let t = result.transform;
            rigid_result = Some(result);
            t
        }
    };
    write_json(&out.join("transform.json"), &transform)?;

    // Stage 3: resample tracking into the reference frame, then run elastic.
    let elastic_result: Option<ElasticResult> =
        if matches!(cfg.mode, Mode::Elastic | Mode::Full) {
            let t0 = Instant::now();
            let aligned = tracking.resample_rigid(&transform.inverse(), &reference.grid);
            let aligned_pyr = build_pyramid(&aligned, cfg.pyramid_levels, cfg.pyramid_sigma_vox)?;
            let result = elastic_register(&ref_pyr, &aligned_pyr, &cfg.elastic_params())?;
            timings.push(StageTiming {
                stage: "elastic".into(),
                seconds: t0.elapsed().as_secs_f64(),
            });
            write_json(&out.join("diagnostics.json"), &result.diagnostics)?;
            write_field_vvol(out, "forward", &result.forward)?;
            write_field_vvol(out, "reverse", &result.reverse)?;
            Some(result)
        } else {
            None
        };

    let tre_rigid = match &fiducials {
        Some(f) => Some(tre(&f.reference, &f.tracking, |q| transform.apply(q))?),
        None => None,
    };
    let tre_elastic = match (&fiducials, &elastic_result) {
        (Some(f), Some(e)) => Some(tre(&f.reference, &f.tracking, |q| {
            let y = transform.apply(q);
            let v = e.reverse.sample_clamped(y);
            [y[0] + v[0], y[1] + v[1], y[2] + v[2]]
        })?),
        _ => None,
    };

    let report = RegistrationReport {
        mode: mode_name(cfg.mode).into(),
        transform,
        search: search_summary,
        rigid: rigid_result,
        elastic: elastic_result.as_ref().map(|e| ElasticSummary {
            converged: e.diagnostics.converged,
            levels_run: e.diagnostics.levels.len(),
            final_consistency: e
                .diagnostics
                .levels
                .last()
                .map_or(0.0, |l| l.final_consistency),
        }),
        timings,
        tre_rigid,
        tre_elastic,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}
