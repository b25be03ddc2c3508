//! Multi-start local rigid registration.
//!
//! Each kinematic candidate seeds a 6-DOF Powell minimization of negative
//! Pearson correlation on one (fairly coarse) pyramid level. Rotations pivot
//! about the gland center so the six parameters are commensurate: the three
//! Euler angles are scaled by the mean gland semi-axis, putting "one unit"
//! near one millimeter of displacement at the gland surface for every
//! coordinate. The best converged start wins; ties break toward the earlier
//! seed so results never depend on thread scheduling.

use crate::metrics::cc_under_transform;
use crate::powell::{powell_brent_minimize, PowellParams, PowellResult};
use crate::pyramid::Pyramid;
use crate::transform::RigidTransform;
use crate::volume::Volume;
use crate::{Error, Result};

/// Objective value substituted when a pose loses image overlap entirely;
/// sits above the worst possible negative correlation, so the optimizer
/// backs away from such poses instead of aborting.
pub const OVERLAP_PENALTY: f64 = 2.0;

/// Settings of the rigid stage.
#[derive(Clone, Copy, Debug)]
pub struct RigidParams {
    /// Pyramid index to register on (0 = finest).
    pub level: usize,
    /// Rotation pivot, normally the gland-model center, in mm.
    pub rotation_origin: [f64; 3],
    /// Lever arm converting radians to parameter units, normally the mean
    /// gland semi-axis, in mm.
    pub lever_mm: f64,
    pub min_overlap: usize,
    /// Fraction of the reference-level mask that must stay in overlap.
    /// Poses below the floor are penalized: plain correlation otherwise
    /// rewards shrinking the overlap onto any well-matching fragment.
    pub min_overlap_frac: f64,
    pub powell: PowellParams,
}

impl RigidParams {
    pub fn for_gland(center: [f64; 3], semi_axes: [f64; 3]) -> Self {
        Self {
            level: 2,
            rotation_origin: center,
            lever_mm: (semi_axes[0] + semi_axes[1] + semi_axes[2]) / 3.0,
            min_overlap: 100,
            min_overlap_frac: 0.25,
            powell: PowellParams::default(),
        }
    }
}

/// Outcome of the winning start.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RigidResult {
    /// Map from the tracking probe frame into reference space.
    pub transform: RigidTransform,
    /// Final objective value (negative correlation).
    pub score: f64,
    /// Pearson correlation at the optimum.
    pub correlation: f64,
    /// Index of the seed that produced this result.
    pub start_index: usize,
    /// Objective evaluations summed over all starts.
    pub n_evaluations: usize,
    /// Powell sweeps the winning start used.
    pub sweeps: usize,
    pub converged: bool,
}

fn params_to_transform(x: &[f64], origin: [f64; 3], lever: f64) -> RigidTransform {
    RigidTransform {
        origin,
        euler: [x[3] / lever, x[4] / lever, x[5] / lever],
        translation: [x[0], x[1], x[2]],
    }
}

/// Re-expresses `seed` (any origin convention) as parameters around the
/// configured pivot: same map, different decomposition.
fn seed_to_params(seed: &RigidTransform, origin: [f64; 3], lever: f64) -> [f64; 6] {
    let (rot, shift) = seed.as_affine();
    // x -> R x + shift equals R (x - o) + o + t with t = shift + R o - o.
    let o = nalgebra::Vector3::new(origin[0], origin[1], origin[2]);
    let t = shift + rot * o - o;
    let (ex, ey, ez) = rot.euler_angles();
    [t.x, t.y, t.z, ex * lever, ey * lever, ez * lever]
}

fn objective(
    reference: &Volume,
    tracking: &Volume,
    params: &RigidParams,
    overlap_floor: usize,
    x: &[f64],
) -> f64 {
    let t = params_to_transform(x, params.rotation_origin, params.lever_mm);
    // t maps tracking frame to reference space; sampling goes the other way.
    match cc_under_transform(reference, tracking, &t.inverse(), overlap_floor) {
        Ok(s) => -s.value,
        Err(_) => OVERLAP_PENALTY,
    }
}

/// Runs one Powell start per seed and returns the best result by
/// (score, seed index).
pub fn rigid_register(
    reference: &Pyramid,
    tracking: &Pyramid,
    seeds: &[RigidTransform],
    params: &RigidParams,
) -> Result<RigidResult> {
    if seeds.is_empty() {
        return Err(Error::RegistrationFailed { seeds: 0 });
    }
    if params.level >= reference.n_levels() || params.level >= tracking.n_levels() {
        return Err(Error::Config(format!(
            "rigid level {} exceeds pyramid depth {}",
            params.level,
            reference.n_levels().min(tracking.n_levels())
        )));
    }
    let ref_level = &reference.levels[params.level];
    let trk_level = &tracking.levels[params.level];
    let overlap_floor = params
        .min_overlap
        .max((params.min_overlap_frac * ref_level.n_masked() as f64).ceil() as usize);

    let mut best: Option<(PowellResult, usize)> = None;
    let mut total_evals = 0usize;
    for (idx, seed) in seeds.iter().enumerate() {
        let x0 = seed_to_params(seed, params.rotation_origin, params.lever_mm);
        let mut f = |x: &[f64]| objective(ref_level, trk_level, params, overlap_floor, x);
        let run = powell_brent_minimize(&mut f, &x0, &params.powell)?;
        total_evals += run.n_evaluations;
        let better = match &best {
            None => true,
            Some((b, _)) => run.value < b.value,
        };
        if better {
            best = Some((run, idx));
        }
    }
    let (run, start_index) = best.expect("at least one seed ran");
    if run.value >= OVERLAP_PENALTY {
        return Err(Error::RegistrationFailed {
            seeds: seeds.len(),
        });
    }
    Ok(RigidResult {
        transform: params_to_transform(&run.x, params.rotation_origin, params.lever_mm),
        score: run.value,
        correlation: -run.value,
        start_index,
        n_evaluations: total_evals,
        sweeps: run.sweeps,
        converged: run.converged,
    })
}
