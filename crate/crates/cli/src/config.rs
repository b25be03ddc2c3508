//! Run configuration: a flat `key = value` text file plus `--set` overrides.
//!
//! Every tunable has an explicit default here; the file only needs the keys
//! that differ. Unknown keys are errors, not warnings, so typos cannot
//! silently fall back to defaults.

use sonoreg_core::elastic::{ElasticParams, ImageMetric};
use sonoreg_core::kinematics::{Ellipsoid, KinematicModel, SearchGrid, SearchParams};
use sonoreg_core::multigrid::SolveParams;
use sonoreg_core::rigid::RigidParams;
use sonoreg_core::{Error, Result};
use std::path::PathBuf;

/// Which stages to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Stage 1 only: systematic pose search.
    Kinematic,
    /// Stages 1 and 2: search, then multi-start rigid refinement.
    Rigid,
    /// Stage 3 only, starting from `initial_transform` (default identity).
    Elastic,
    /// All three stages.
    Full,
}

impl Mode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "kinematic" => Ok(Mode::Kinematic),
            "rigid" => Ok(Mode::Rigid),
            "elastic" => Ok(Mode::Elastic),
            "full" => Ok(Mode::Full),
            other => Err(Error::Config(format!(
                "mode must be kinematic|rigid|elastic|full, got {other:?}"
            ))),
        }
    }
}

/// Everything a pipeline run needs, resolved to concrete values.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub mode: Mode,
    pub reference: Option<PathBuf>,
    pub tracking: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub fiducials_reference: Option<PathBuf>,
    pub fiducials_tracking: Option<PathBuf>,
    /// Rigid transform JSON seeding stage 3 when mode = elastic.
    pub initial_transform: Option<PathBuf>,

    pub gland_center: [f64; 3],
    pub gland_semi_axes: [f64; 3],
    pub fixed_point: [f64; 3],
    pub probe_head_radius: f64,
    pub depth_offsets: Vec<f64>,
    pub tilt_limit_deg: f64,
    pub chart_up: [f64; 3],

    pub search_n_alpha: usize,
    pub search_n_beta: usize,
    pub search_n_lambda: usize,
    pub search_top_k: usize,
    pub search_suppression_mm: f64,
    pub min_overlap: usize,

    pub pyramid_levels: usize,
    pub pyramid_sigma_vox: f64,
    pub rigid_level: usize,
    /// Overlap fraction below which a rigid pose is treated as lost.
    pub rigid_min_overlap_frac: f64,

    pub elastic_metric: ImageMetric,
    pub elastic_inverse_consistency: bool,
    pub elastic_levels: Vec<usize>,
    /// `None` picks 2 voxels at each level.
    pub elastic_sigma_mm: Option<f64>,
    pub elastic_eps: f64,
    pub elastic_max_iters: usize,

    pub solver_dt: f64,
    pub solver_tol: f64,
    pub solver_max_cycles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let search = SearchParams::default();
        let elastic = ElasticParams::default();
        let solver = SolveParams::default();
        Self {
            mode: Mode::Full,
            reference: None,
            tracking: None,
            output_dir: PathBuf::from("out"),
            fiducials_reference: None,
            fiducials_tracking: None,
            initial_transform: None,
            gland_center: [0.0, 0.0, 16.0],
            gland_semi_axes: [20.0, 17.0, 16.0],
            fixed_point: [0.0, 0.0, -10.0],
            probe_head_radius: 4.0,
            depth_offsets: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            tilt_limit_deg: 30.0,
            chart_up: [0.0, 1.0, 0.0],
            search_n_alpha: SearchGrid::default().n_alpha,
            search_n_beta: SearchGrid::default().n_beta,
            search_n_lambda: SearchGrid::default().n_lambda,
            search_top_k: search.top_k,
            search_suppression_mm: search.suppression_radius_mm,
            min_overlap: search.min_overlap,
            pyramid_levels: 5,
            pyramid_sigma_vox: 1.0,
            rigid_level: 2,
            rigid_min_overlap_frac: RigidParams::for_gland([0.0; 3], [1.0; 3]).min_overlap_frac,
            elastic_metric: elastic.metric,
            elastic_inverse_consistency: elastic.inverse_consistency,
            elastic_levels: elastic.levels,
            elastic_sigma_mm: elastic.sigma_sc_mm,
            elastic_eps: elastic.convergence_eps,
            elastic_max_iters: elastic.max_outer_iters,
            solver_dt: solver.dt,
            solver_tol: solver.tol,
            solver_max_cycles: solver.max_cycles,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v
        .split_whitespace()
        .map(|p| parse_num(key, p))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<f64>| Error::Config(format!("{key}: wants 3 values, got {}", p.len())))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "{key}: expected true or false, got {other:?}"
        ))),
    }
}

impl RunConfig {
    /// Parses a config file: one `key = value` per line, `#` comments.
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), ln + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override, as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "reference" => self.reference = Some(PathBuf::from(value)),
            "tracking" => self.tracking = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "fiducials_reference" => self.fiducials_reference = Some(PathBuf::from(value)),
            "fiducials_tracking" => self.fiducials_tracking = Some(PathBuf::from(value)),
            "initial_transform" => self.initial_transform = Some(PathBuf::from(value)),
            "gland_center" => self.gland_center = parse_triple(key, value)?,
            "gland_semi_axes" => self.gland_semi_axes = parse_triple(key, value)?,
            "fixed_point" => self.fixed_point = parse_triple(key, value)?,
            "probe_head_radius" => self.probe_head_radius = parse_num(key, value)?,
            "depth_offsets" => {
                self.depth_offsets = value
                    .split_whitespace()
                    .map(|p| parse_num(key, p))
                    .collect::<Result<_>>()?;
            }
            "tilt_limit_deg" => self.tilt_limit_deg = parse_num(key, value)?,
            "chart_up" => self.chart_up = parse_triple(key, value)?,
            "search_n_alpha" => self.search_n_alpha = parse_num(key, value)?,
            "search_n_beta" => self.search_n_beta = parse_num(key, value)?,
            "search_n_lambda" => self.search_n_lambda = parse_num(key, value)?,
            "search_top_k" => self.search_top_k = parse_num(key, value)?,
            "search_suppression_mm" => self.search_suppression_mm = parse_num(key, value)?,
            "min_overlap" => self.min_overlap = parse_num(key, value)?,
            "pyramid_levels" => self.pyramid_levels = parse_num(key, value)?,
            "pyramid_sigma_vox" => self.pyramid_sigma_vox = parse_num(key, value)?,
            "rigid_level" => self.rigid_level = parse_num(key, value)?,
            "rigid_min_overlap_frac" => self.rigid_min_overlap_frac = parse_num(key, value)?,
            "elastic_metric" => {
                self.elastic_metric = match value {
                    "dsc" => ImageMetric::ShiftCorrelation,
                    "ssd" => ImageMetric::Ssd,
                    other => {
                        return Err(Error::Config(format!(
                            "elastic_metric must be dsc or ssd, got {other:?}"
                        )))
                    }
                }
            }
            "elastic_inverse_consistency" => {
                self.elastic_inverse_consistency = parse_bool(key, value)?
            }
            "elastic_levels" => {
                self.elastic_levels = value
                    .split_whitespace()
                    .map(|p| parse_num(key, p))
                    .collect::<Result<_>>()?;
            }
            "elastic_sigma_mm" => {
                self.elastic_sigma_mm = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "elastic_eps" => self.elastic_eps = parse_num(key, value)?,
            "elastic_max_iters" => self.elastic_max_iters = parse_num(key, value)?,
            "solver_dt" => self.solver_dt = parse_num(key, value)?,
            "solver_tol" => self.solver_tol = parse_num(key, value)?,
            "solver_max_cycles" => self.solver_max_cycles = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Checks mode-required paths and numeric ranges.
    pub fn validate(&self) -> Result<()> {
        if self.reference.is_none() {
            return Err(Error::Config("reference volume path is required".into()));
        }
        if self.tracking.is_none() {
            return Err(Error::Config("tracking volume path is required".into()));
        }
        if self.fiducials_reference.is_some() != self.fiducials_tracking.is_some() {
            return Err(Error::Config(
                "fiducials_reference and fiducials_tracking must be given together".into(),
            ));
        }
        if self.gland_semi_axes.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Config(format!(
                "gland_semi_axes must be positive, got {:?}",
                self.gland_semi_axes
            )));
        }
        if !(self.probe_head_radius > 0.0) {
            return Err(Error::Config("probe_head_radius must be positive".into()));
        }
        if self.depth_offsets.is_empty() {
            return Err(Error::Config("depth_offsets must not be empty".into()));
        }
        if !(self.tilt_limit_deg > 0.0 && self.tilt_limit_deg < 90.0) {
            return Err(Error::Config(format!(
                "tilt_limit_deg must be in (0, 90), got {}",
                self.tilt_limit_deg
            )));
        }
        for (name, n) in [
            ("search_n_alpha", self.search_n_alpha),
            ("search_n_beta", self.search_n_beta),
            ("search_n_lambda", self.search_n_lambda),
            ("search_top_k", self.search_top_k),
            ("min_overlap", self.min_overlap),
            ("pyramid_levels", self.pyramid_levels),
            ("elastic_max_iters", self.elastic_max_iters),
            ("solver_max_cycles", self.solver_max_cycles),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.search_suppression_mm >= 0.0) {
            return Err(Error::Config("search_suppression_mm must be >= 0".into()));
        }
        if !(self.pyramid_sigma_vox > 0.0) {
            return Err(Error::Config("pyramid_sigma_vox must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rigid_min_overlap_frac) {
            return Err(Error::Config(format!(
                "rigid_min_overlap_frac must be in [0, 1), got {}",
                self.rigid_min_overlap_frac
            )));
        }
        let runs_rigid = matches!(self.mode, Mode::Rigid | Mode::Full);
        let runs_elastic = matches!(self.mode, Mode::Elastic | Mode::Full);
        if runs_rigid && self.rigid_level >= self.pyramid_levels {
            return Err(Error::Config(format!(
                "rigid_level {} is outside the {}-level pyramid",
                self.rigid_level, self.pyramid_levels
            )));
        }
        if runs_elastic {
            if self.elastic_levels.is_empty() {
                return Err(Error::Config("elastic_levels must not be empty".into()));
            }
            if let Some(&l) = self.elastic_levels.iter().find(|l| **l >= self.pyramid_levels) {
                return Err(Error::Config(format!(
                    "elastic level {l} is outside the {}-level pyramid",
                    self.pyramid_levels
                )));
            }
        }
        if let Some(s) = self.elastic_sigma_mm {
            if !(s > 0.0) {
                return Err(Error::Config("elastic_sigma_mm must be positive".into()));
            }
        }
        for (name, v) in [
            ("elastic_eps", self.elastic_eps),
            ("solver_dt", self.solver_dt),
            ("solver_tol", self.solver_tol),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Kinematic model assembled from the gland and probe keys.
    pub fn model(&self) -> KinematicModel {
        KinematicModel {
            ellipsoid: Ellipsoid::axis_aligned(self.gland_center, self.gland_semi_axes),
            fixed_point: self.fixed_point,
            probe_head_radius: self.probe_head_radius,
            depth_offsets: self.depth_offsets.clone(),
            tilt_limit: self.tilt_limit_deg.to_radians(),
            chart_up: self.chart_up,
        }
    }

    pub fn search_params(&self) -> SearchParams {
        SearchParams {
            grid: SearchGrid {
                n_alpha: self.search_n_alpha,
                n_beta: self.search_n_beta,
                n_lambda: self.search_n_lambda,
            },
            top_k: self.search_top_k,
            suppression_radius_mm: self.search_suppression_mm,
            min_overlap: self.min_overlap,
        }
    }

    pub fn rigid_params(&self) -> RigidParams {
        let mut p = RigidParams::for_gland(self.gland_center, self.gland_semi_axes);
        p.level = self.rigid_level;
        p.min_overlap = self.min_overlap;
        p.min_overlap_frac = self.rigid_min_overlap_frac;
        p
    }

    pub fn elastic_params(&self) -> ElasticParams {
        ElasticParams {
            sigma_sc_mm: self.elastic_sigma_mm,
            metric: self.elastic_metric,
            inverse_consistency: self.elastic_inverse_consistency,
            convergence_eps: self.elastic_eps,
            max_outer_iters: self.elastic_max_iters,
            levels: self.elastic_levels.clone(),
            solver: SolveParams {
                dt: self.solver_dt,
                tol: self.solver_tol,
                max_cycles: self.solver_max_cycles,
                ..SolveParams::default()
            },
            ..ElasticParams::default()
        }
    }
}
