//! Kinematic model of endorectal probe motion and the systematic pose search.
//!
//! The probe head slides on an ellipsoidal surface approximating the gland
//! while its axis stays pinned to a rectal fixed point `R` behind it. A pose
//! has four coordinates: spherical offsets `alpha` and `beta` of the contact
//! point on the surface, a roll `lambda` about the probe axis, and a discrete
//! insertion-depth offset along the axis. The global search scores every pose
//! of a fixed grid with Pearson correlation at the coarsest pyramid level and
//! keeps the best few mutually separated candidates as seeds for local rigid
//! refinement.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::metrics::cc_under_transform;
use crate::par;
use crate::pyramid::Pyramid;
use crate::transform::RigidTransform;
use crate::{Error, Result};

/// Axis-aligned-by-default ellipsoid; `orientation` is an intrinsic Z-Y-X
/// Euler triple in radians, matching the rigid-transform convention.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub orientation: [f64; 3],
}

impl Ellipsoid {
    pub fn axis_aligned(center: [f64; 3], semi_axes: [f64; 3]) -> Self {
        Self {
            center,
            semi_axes,
            orientation: [0.0; 3],
        }
    }

    fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(
            self.orientation[0],
            self.orientation[1],
            self.orientation[2],
        )
    }

    /// Maps a world point to the unit-sphere preimage frame.
    pub fn to_sphere(&self, p: [f64; 3]) -> Vector3<f64> {
        let q = self.rotation().inverse()
            * Vector3::new(
                p[0] - self.center[0],
                p[1] - self.center[1],
                p[2] - self.center[2],
            );
        Vector3::new(
            q.x / self.semi_axes[0],
            q.y / self.semi_axes[1],
            q.z / self.semi_axes[2],
        )
    }

    /// Maps a unit-sphere point back onto the ellipsoid surface.
    pub fn from_sphere(&self, s: Vector3<f64>) -> [f64; 3] {
        let q = Vector3::new(
            s.x * self.semi_axes[0],
            s.y * self.semi_axes[1],
            s.z * self.semi_axes[2],
        );
        let w = self.rotation() * q;
        [
            w.x + self.center[0],
            w.y + self.center[1],
            w.z + self.center[2],
        ]
    }

    /// Value of the implicit surface equation; 1 on the surface, < 1 inside.
    pub fn implicit(&self, p: [f64; 3]) -> f64 {
        self.to_sphere(p).norm_squared()
    }
}

/// Probe motion model: contact ellipsoid, rectal fixed point, and the
/// discrete depth offsets explored by the search.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct KinematicModel {
    pub ellipsoid: Ellipsoid,
    /// Point the probe axis always passes through, behind the gland.
    pub fixed_point: [f64; 3],
    /// Radius of the probe head; informs the near cutoff of the beam.
    pub probe_head_radius: f64,
    /// Depth offsets along the probe axis, sorted ascending, in mm.
    pub depth_offsets: Vec<f64>,
    /// Maximum angle between a pose's probe axis and the rest axis.
    pub tilt_limit: f64,
    /// Up reference defining the (alpha, beta) chart on the preimage sphere.
    pub chart_up: [f64; 3],
}

impl KinematicModel {
    pub fn validate(&self) -> Result<()> {
        for a in self.ellipsoid.semi_axes {
            if !(a > 0.0) {
                return Err(Error::ModelInvalid(format!(
                    "semi-axes must be positive, got {:?}",
                    self.ellipsoid.semi_axes
                )));
            }
        }
        if self.ellipsoid.implicit(self.fixed_point) <= 1.0 {
            return Err(Error::ModelInvalid(
                "fixed point must lie outside the ellipsoid".into(),
            ));
        }
        if self.depth_offsets.is_empty() {
            return Err(Error::ModelInvalid("no depth offsets".into()));
        }
        if self.depth_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::ModelInvalid(
                "depth offsets must be sorted ascending".into(),
            ));
        }
        Ok(())
    }

    /// Chart frame on the preimage sphere: `s0` is the preimage of the rest
    /// contact point, `e1` the pole direction (projected up axis), `e2`
    /// completes a right-handed basis.
    fn chart(&self) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
        let o = self.ellipsoid.to_sphere(self.fixed_point);
        if o.norm() <= 1.0 {
            return Err(Error::ModelInvalid(
                "fixed point inside the ellipsoid; the ray to the center has no near intersection"
                    .into(),
            ));
        }
        // The ray from the fixed point to the center passes through the
        // center of the preimage sphere, so the near intersection is simply
        // the unit vector toward the fixed point.
        let s0 = o.normalize();
        let up = Vector3::new(self.chart_up[0], self.chart_up[1], self.chart_up[2]);
        let mut e1 = up - s0 * up.dot(&s0);
        if e1.norm() < 1e-9 {
            let alt = Vector3::new(1.0, 0.0, 0.0);
            e1 = alt - s0 * alt.dot(&s0);
        }
        if e1.norm() < 1e-9 {
            let alt = Vector3::new(0.0, 0.0, 1.0);
            e1 = alt - s0 * alt.dot(&s0);
        }
        let e1 = e1.normalize();
        let e2 = s0.cross(&e1);
        Ok((s0, e1, e2))
    }

    /// Contact point `S(alpha, beta)` on the ellipsoid surface.
    pub fn surface_point(&self, alpha: f64, beta: f64) -> Result<[f64; 3]> {
        let (s0, e1, e2) = self.chart()?;
        let s = Rotation3::from_axis_angle(&Unit::new_normalize(e1), beta)
            * Rotation3::from_axis_angle(&Unit::new_normalize(e2), alpha)
            * s0;
        Ok(self.ellipsoid.from_sphere(s))
    }

    /// Angle between the probe axis of `(alpha, beta)` and the rest axis.
    pub fn tilt_of(&self, alpha: f64, beta: f64) -> Result<f64> {
        let s00 = self.surface_point(0.0, 0.0)?;
        let s = self.surface_point(alpha, beta)?;
        let r = Vector3::from(self.fixed_point);
        let a0 = (Vector3::from(s00) - r).normalize();
        let a = (Vector3::from(s) - r).normalize();
        Ok(a0.dot(&a).clamp(-1.0, 1.0).acos())
    }

    /// Largest chart offsets along alpha and beta alone that keep the axis
    /// tilt within the limit. Chart angle and axis tilt differ: the fixed
    /// point sits well behind the surface, so a surface excursion moves the
    /// axis by much less than the chart angle. Found by bisection; capped at
    /// a quarter turn.
    pub fn chart_spans(&self) -> Result<(f64, f64)> {
        let span = |along_alpha: bool| -> Result<f64> {
            let tilt = |t: f64| {
                if along_alpha {
                    self.tilt_of(t, 0.0)
                } else {
                    self.tilt_of(0.0, t)
                }
            };
            let hi = std::f64::consts::FRAC_PI_2;
            if tilt(hi)? <= self.tilt_limit {
                return Ok(hi);
            }
            let (mut lo, mut hi) = (0.0f64, hi);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if tilt(mid)? <= self.tilt_limit {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(lo)
        };
        Ok((span(true)?, span(false)?))
    }

    /// Rigid map from the probe frame of a tracking volume into reference
    /// space for the given pose. The probe frame has its apex at the origin
    /// with the beam along +z; the pose places the apex at the surface point
    /// (displaced by the depth offset along the axis), aims +z along the
    /// axis away from the fixed point, and rolls by `lambda` about it.
    pub fn pose_to_transform(&self, pose: &KinematicPose) -> Result<RigidTransform> {
        let tilt = self.tilt_of(pose.alpha, pose.beta)?;
        if tilt > self.tilt_limit + 1e-12 {
            return Err(Error::PoseRejected {
                tilt_deg: tilt.to_degrees(),
                limit_deg: self.tilt_limit.to_degrees(),
            });
        }
        let s = Vector3::from(self.surface_point(pose.alpha, pose.beta)?);
        let r = Vector3::from(self.fixed_point);
        let axis = (s - r).normalize();
        let depth = self.depth_offsets[pose.depth_index];
        let origin = s + axis * depth;

        // Roll reference: world +x projected off the axis, +y as fallback.
        let mut x0 = Vector3::new(1.0, 0.0, 0.0);
        x0 -= axis * x0.dot(&axis);
        if x0.norm() < 1e-9 {
            x0 = Vector3::new(0.0, 1.0, 0.0);
            x0 -= axis * x0.dot(&axis);
        }
        let x0 = x0.normalize();
        let x_axis =
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), pose.lambda_roll) * x0;
        let y_axis = axis.cross(&x_axis);
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[
            x_axis, y_axis, axis,
        ]));
        Ok(RigidTransform::from_rotation(
            &rot,
            [0.0; 3],
            [origin.x, origin.y, origin.z],
        ))
    }
}

/// One point of the pose search space.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct KinematicPose {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_roll: f64,
    pub depth_index: usize,
}

/// Pose grid resolution; depth count comes from the model.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SearchGrid {
    pub n_alpha: usize,
    pub n_beta: usize,
    pub n_lambda: usize,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            n_alpha: 16,
            n_beta: 16,
            n_lambda: 24,
        }
    }
}

/// Search settings beyond the grid itself.
#[derive(Clone, Copy, Debug)]
pub struct SearchParams {
    pub grid: SearchGrid,
    pub top_k: usize,
    /// Minimum probe-origin distance between reported candidates, mm.
    pub suppression_radius_mm: f64,
    pub min_overlap: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            grid: SearchGrid::default(),
            top_k: 5,
            suppression_radius_mm: 8.0,
            min_overlap: 100,
        }
    }
}

/// A scored pose surviving non-maximum suppression.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PoseCandidate {
    pub pose: KinematicPose,
    pub transform: RigidTransform,
    pub correlation: f64,
    pub overlap: usize,
    /// Lexicographic index in the search grid, the deterministic tie-break.
    pub grid_index: usize,
}

/// Result of a completed systematic search.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Best candidates, descending correlation, mutually separated.
    pub candidates: Vec<PoseCandidate>,
    /// Poses scored with a metric (valid or not), i.e. total minus rejected.
    pub evaluated: usize,
    /// Poses rejected by the tilt limit before any metric evaluation.
    pub rejected: usize,
    pub total: usize,
}

/// The pose at a lexicographic grid index: alpha varies slowest, then beta,
/// lambda, and depth fastest. Alpha and beta span the closed intervals given
/// by `spans` (see [`KinematicModel::chart_spans`]); grid corners combine
/// both offsets, exceed the tilt limit, and get rejected downstream. Lambda
/// covers `[0, 2*pi)`.
pub fn pose_for_index(
    model: &KinematicModel,
    grid: &SearchGrid,
    spans: (f64, f64),
    index: usize,
) -> KinematicPose {
    let nd = model.depth_offsets.len();
    let id = index % nd;
    let il = (index / nd) % grid.n_lambda;
    let ib = (index / (nd * grid.n_lambda)) % grid.n_beta;
    let ia = index / (nd * grid.n_lambda * grid.n_beta);
    let on_span = |i: usize, n: usize, s: f64| {
        if n <= 1 {
            0.0
        } else {
            -s + 2.0 * s * i as f64 / (n - 1) as f64
        }
    };
    KinematicPose {
        alpha: on_span(ia, grid.n_alpha, spans.0),
        beta: on_span(ib, grid.n_beta, spans.1),
        lambda_roll: 2.0 * std::f64::consts::PI * il as f64 / grid.n_lambda as f64,
        depth_index: id,
    }
}

enum PoseEval {
    Rejected,
    NoScore,
    Scored {
        correlation: f64,
        overlap: usize,
        transform: RigidTransform,
        pose: KinematicPose,
    },
}

/// Scores every grid pose with coarse-level correlation and returns the top
/// candidates after non-maximum suppression on probe-origin distance.
pub fn systematic_search(
    model: &KinematicModel,
    reference: &Pyramid,
    tracking: &Pyramid,
    params: &SearchParams,
) -> Result<SearchOutcome> {
    model.validate()?;
    let ref_c = reference.coarsest();
    let trk_c = tracking.coarsest();
    for a in 0..3 {
        if (ref_c.grid.spacing[a] - trk_c.grid.spacing[a]).abs() > 1e-9 {
            return Err(Error::GridMismatch(format!(
                "coarse pyramid levels disagree in spacing: {:?} vs {:?}",
                ref_c.grid.spacing, trk_c.grid.spacing
            )));
        }
    }
    let grid = params.grid;
    let spans = model.chart_spans()?;
    let total = grid.n_alpha * grid.n_beta * grid.n_lambda * model.depth_offsets.len();

    let evals: Vec<PoseEval> = par::map_indexed(total, |idx| {
        let pose = pose_for_index(model, &grid, spans, idx);
        let transform = match model.pose_to_transform(&pose) {
            Ok(t) => t,
            Err(Error::PoseRejected { .. }) => return PoseEval::Rejected,
            Err(_) => return PoseEval::NoScore,
        };
        // The transform maps tracking frame into reference space; sampling
        // goes the other way.
        let map = transform.inverse();
        match cc_under_transform(ref_c, trk_c, &map, params.min_overlap) {
            Ok(s) => PoseEval::Scored {
                correlation: s.value,
                overlap: s.overlap,
                transform,
                pose,
            },
            Err(_) => PoseEval::NoScore,
        }
    });

    let mut rejected = 0usize;
    let mut scored: Vec<PoseCandidate> = Vec::new();
    for (idx, e) in evals.into_iter().enumerate() {
        match e {
            PoseEval::Rejected => rejected += 1,
            PoseEval::NoScore => {}
            PoseEval::Scored {
                correlation,
                overlap,
                transform,
                pose,
            } => scored.push(PoseCandidate {
                pose,
                transform,
                correlation,
                overlap,
                grid_index: idx,
            }),
        }
    }
    let evaluated = total - rejected;
    if scored.is_empty() {
        return Err(Error::SearchFailed { evaluated });
    }
    scored.sort_by(|a, b| {
        b.correlation
            .partial_cmp(&a.correlation)
            .expect("correlations are finite")
            .then(a.grid_index.cmp(&b.grid_index))
    });

    let mut candidates: Vec<PoseCandidate> = Vec::new();
    let r2 = params.suppression_radius_mm * params.suppression_radius_mm;
    for c in scored {
        if candidates.len() >= params.top_k {
            break;
        }
        let o = c.transform.apply([0.0; 3]);
        let far_enough = candidates.iter().all(|k| {
            let p = k.transform.apply([0.0; 3]);
            let d = [o[0] - p[0], o[1] - p[1], o[2] - p[2]];
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2] >= r2
        });
        if far_enough {
            candidates.push(c);
        }
    }
    Ok(SearchOutcome {
        candidates,
        evaluated,
        rejected,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::build_pyramid;
    use crate::volume::{Grid, Volume};
    use approx::assert_relative_eq;

    /// Geometry in which the rest pose is exactly the probe frame: apex at
    /// the world origin, probe axis along +z.
    fn canonical_model() -> KinematicModel {
        KinematicModel {
            ellipsoid: Ellipsoid::axis_aligned([0.0, 0.0, 16.0], [20.0, 17.0, 16.0]),
            fixed_point: [0.0, 0.0, -10.0],
            probe_head_radius: 4.0,
            depth_offsets: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            tilt_limit: 30f64.to_radians(),
            chart_up: [0.0, 1.0, 0.0],
        }
    }

    #[test]
    fn rest_contact_point_is_collinear_with_fixed_point_and_center() {
        let m = canonical_model();
        m.validate().unwrap();
        let s = m.surface_point(0.0, 0.0).unwrap();
        assert_relative_eq!(s[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(s[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(s[2], 0.0, epsilon = 1e-12);
        assert!((m.ellipsoid.implicit(s) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn surface_points_satisfy_the_implicit_equation_for_oriented_ellipsoids() {
        let m = KinematicModel {
            ellipsoid: Ellipsoid {
                center: [3.0, -2.0, 10.0],
                semi_axes: [18.0, 14.0, 12.0],
                orientation: [0.3, -0.2, 0.5],
            },
            fixed_point: [1.0, 0.5, -50.0],
            probe_head_radius: 4.0,
            depth_offsets: vec![0.0],
            tilt_limit: 30f64.to_radians(),
            chart_up: [0.0, 1.0, 0.0],
        };
        m.validate().unwrap();
        for i in -3..=3 {
            for j in -3..=3 {
                let (a, b) = (0.17 * i as f64, 0.15 * j as f64);
                let s = m.surface_point(a, b).unwrap();
                assert!(
                    (m.ellipsoid.implicit(s) - 1.0).abs() < 1e-10,
                    "alpha {a}, beta {b}: implicit {}",
                    m.ellipsoid.implicit(s)
                );
            }
        }
    }

    #[test]
    fn quarter_arc_on_a_sphere_lands_ninety_degrees_toward_the_pole() {
        let m = KinematicModel {
            ellipsoid: Ellipsoid::axis_aligned([0.0, 0.0, 20.0], [15.0; 3]),
            fixed_point: [0.0, 0.0, -30.0],
            probe_head_radius: 4.0,
            depth_offsets: vec![0.0],
            tilt_limit: std::f64::consts::PI,
            chart_up: [0.0, 1.0, 0.0],
        };
        let s00 = m.surface_point(0.0, 0.0).unwrap();
        let s = m.surface_point(std::f64::consts::FRAC_PI_2, 0.0).unwrap();
        let c = m.ellipsoid.center;
        let v0 = Vector3::new(s00[0] - c[0], s00[1] - c[1], s00[2] - c[2]);
        let v1 = Vector3::new(s[0] - c[0], s[1] - c[1], s[2] - c[2]);
        assert_relative_eq!(v0.dot(&v1), 0.0, epsilon = 1e-10);
        // Pole is the projected up axis (+y here): the point moved toward it
        // along the great circle through the pole, so x stays zero.
        assert_relative_eq!(s[0], 0.0, epsilon = 1e-10);
        assert_relative_eq!(s[1], 15.0, epsilon = 1e-10);
    }

    #[test]
    fn full_roll_turn_reproduces_the_zero_roll_transform() {
        let m = canonical_model();
        let base = KinematicPose {
            alpha: 0.2,
            beta: -0.15,
            lambda_roll: 0.0,
            depth_index: 3,
        };
        let turned = KinematicPose {
            lambda_roll: 2.0 * std::f64::consts::PI,
            ..base
        };
        let t0 = m.pose_to_transform(&base).unwrap();
        let t1 = m.pose_to_transform(&turned).unwrap();
        for p in [[0.0; 3], [10.0, -4.0, 25.0], [-7.0, 3.0, 40.0]] {
            let (a, b) = (t0.apply(p), t1.apply(p));
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth_offsets_translate_along_the_probe_axis() {
        let m = canonical_model();
        let at = |d: usize| {
            m.pose_to_transform(&KinematicPose {
                alpha: 0.1,
                beta: 0.2,
                lambda_roll: 1.0,
                depth_index: d,
            })
            .unwrap()
        };
        let (t1, t2) = (at(1), at(2)); // -5 mm and 0 mm
        let s = m.surface_point(0.1, 0.2).unwrap();
        let r = m.fixed_point;
        let axis = Vector3::new(s[0] - r[0], s[1] - r[1], s[2] - r[2]).normalize();
        for p in [[0.0; 3], [5.0, 5.0, 30.0]] {
            let (a, b) = (t1.apply(p), t2.apply(p));
            for k in 0..3 {
                assert_relative_eq!(b[k] - a[k], 5.0 * axis[k], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn canonical_rest_pose_is_the_identity_transform() {
        let m = canonical_model();
        let t = m
            .pose_to_transform(&KinematicPose {
                alpha: 0.0,
                beta: 0.0,
                lambda_roll: 0.0,
                depth_index: 2,
            })
            .unwrap();
        for p in [[0.0; 3], [12.0, -8.0, 30.0], [-3.0, 14.0, 50.0]] {
            let q = t.apply(p);
            for k in 0..3 {
                assert!((q[k] - p[k]).abs() < 1e-10, "{q:?} vs {p:?}");
            }
        }
    }

    #[test]
    fn tilt_beyond_the_limit_rejects_the_pose() {
        let m = canonical_model();
        let (sa, sb) = m.chart_spans().unwrap();
        // Span endpoints alone stay legal; the combined corner does not.
        assert!((m.tilt_of(sa, 0.0).unwrap() - m.tilt_limit).abs() < 1e-9);
        assert!((m.tilt_of(0.0, sb).unwrap() - m.tilt_limit).abs() < 1e-9);
        m.pose_to_transform(&KinematicPose {
            alpha: 0.999 * sa,
            beta: 0.0,
            lambda_roll: 0.0,
            depth_index: 2,
        })
        .unwrap();
        let corner = KinematicPose {
            alpha: sa,
            beta: sb,
            lambda_roll: 0.0,
            depth_index: 2,
        };
        match m.pose_to_transform(&corner) {
            Err(Error::PoseRejected { .. }) => {}
            other => panic!("expected pose rejection, got {other:?}"),
        }
    }

    fn blob_volume(grid: Grid) -> Volume {
        let mut v = Volume::filled(grid, 0.0, true);
        let blobs = [
            ([0.0, 0.0, 16.0], 9.0, 1.0),
            ([6.0, -4.0, 22.0], 5.0, 0.8),
            ([-7.0, 5.0, 12.0], 4.0, 0.6),
            ([2.0, 7.0, 26.0], 6.0, 0.9),
            ([-4.0, -6.0, 19.0], 3.5, 0.7),
        ];
        for z in 0..grid.dims[2] {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    let p = grid.voxel_center(x, y, z);
                    let mut val = 0.0f64;
                    for (c, r, a) in blobs {
                        let d2 = (p[0] - c[0]).powi(2)
                            + (p[1] - c[1]).powi(2)
                            + (p[2] - c[2]).powi(2);
                        val += a * (-d2 / (2.0 * r * r)).exp();
                    }
                    v.voxels[grid.index(x, y, z)] = val as f32;
                }
            }
        }
        v
    }

    #[test]
    fn search_recovers_a_grid_pose_used_to_render_the_tracking_volume() {
        let m = canonical_model();
        let grid = Grid::new([40, 40, 40], [2.0; 3], [-39.0, -39.0, -10.0]);
        let reference = blob_volume(grid);

        let params = SearchParams {
            grid: SearchGrid {
                n_alpha: 5,
                n_beta: 5,
                n_lambda: 8,
            },
            top_k: 3,
            suppression_radius_mm: 8.0,
            min_overlap: 100,
        };
        // True pose on a grid node: alpha at half span, beta centered,
        // lambda = 45 deg, depth 0 mm.
        let spans = m.chart_spans().unwrap();
        let nd = m.depth_offsets.len();
        let true_index = ((3 * 5 + 2) * 8 + 1) * nd + 2;
        let true_pose = pose_for_index(&m, &params.grid, spans, true_index);
        let t_true = m.pose_to_transform(&true_pose).unwrap();
        let tracking = reference.resample_rigid(&t_true, &grid);

        let ref_pyr = build_pyramid(&reference, 2, 1.0).unwrap();
        let trk_pyr = build_pyramid(&tracking, 2, 1.0).unwrap();
        let out = systematic_search(&m, &ref_pyr, &trk_pyr, &params).unwrap();

        assert_eq!(out.total, 5 * 5 * 8 * nd);
        assert_eq!(out.evaluated + out.rejected, out.total);
        assert!(out.rejected > 0, "grid corners should exceed the tilt limit");
        assert!(!out.candidates.is_empty());

        let best = &out.candidates[0];
        let o_best = best.transform.apply([0.0; 3]);
        let o_true = t_true.apply([0.0; 3]);
        let d = ((o_best[0] - o_true[0]).powi(2)
            + (o_best[1] - o_true[1]).powi(2)
            + (o_best[2] - o_true[2]).powi(2))
        .sqrt();
        assert!(
            d < 5.0,
            "best origin {o_best:?} is {d:.2} mm from truth {o_true:?}"
        );
        let za = best.transform.rotation() * Vector3::z();
        let zt = t_true.rotation() * Vector3::z();
        let angle = za.dot(&zt).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 15.0, "axis off by {angle:.1} deg");
        assert_eq!(best.grid_index, true_index, "exact node should win");

        // Candidates are sorted and mutually separated.
        for w in out.candidates.windows(2) {
            assert!(w[0].correlation >= w[1].correlation);
        }
        for i in 0..out.candidates.len() {
            for j in i + 1..out.candidates.len() {
                let a = out.candidates[i].transform.apply([0.0; 3]);
                let b = out.candidates[j].transform.apply([0.0; 3]);
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                    .sqrt();
                assert!(d >= params.suppression_radius_mm - 1e-9);
            }
        }
    }

    #[test]
    fn featureless_tracking_volume_fails_the_search() {
        let m = canonical_model();
        let grid = Grid::new([24, 24, 24], [2.0; 3], [-23.0, -23.0, -6.0]);
        let reference = blob_volume(grid);
        let flat = Volume::filled(grid, 0.0, true);
        let ref_pyr = build_pyramid(&reference, 2, 1.0).unwrap();
        let trk_pyr = build_pyramid(&flat, 2, 1.0).unwrap();
        let params = SearchParams {
            grid: SearchGrid {
                n_alpha: 3,
                n_beta: 3,
                n_lambda: 4,
            },
            ..SearchParams::default()
        };
        match systematic_search(&m, &ref_pyr, &trk_pyr, &params) {
            Err(Error::SearchFailed { evaluated }) => assert!(evaluated > 0),
            other => panic!("expected search failure, got {other:?}"),
        }
    }
}
