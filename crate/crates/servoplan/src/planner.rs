//! Velocity trajectory planning under kinematic limits.
//!
//! Each planning cycle maps the filtered normalized command to per-axis
//! target velocity / acceleration / jerk values scaled by the robot's
//! limits, then fits one quintic velocity polynomial per axis between the
//! previous cycle's end state and the new targets. Six boundary
//! conditions (value, first and second derivative at both ends) determine
//! the six coefficients through a 6x6 linear system. Sampling the
//! polynomial at the controller period yields the command stream for one
//! detection interval.
//!
//! Since the boundary values are products of limits and a command with
//! magnitude at most 1, the segment *endpoints* can never violate the
//! limits. Between the endpoints the quintic may still overshoot;
//! [`check_limits`] measures that and provides an elementwise clamped
//! copy so the guarantee holds for every emitted sample.

use nalgebra::{Matrix6, Vector2, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-robot kinematic maxima. Translational limits apply to each
/// Cartesian axis, radial limits to the rotation about the tool axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicLimits {
    /// Max translational velocity, m/s.
    pub v_max: f64,
    /// Max translational acceleration, m/s^2.
    pub a_max: f64,
    /// Max translational jerk, m/s^3.
    pub j_max: f64,
    /// Max rotational velocity, rad/s.
    pub omega_max: f64,
    /// Max rotational acceleration, rad/s^2.
    pub alpha_max: f64,
    /// Max rotational jerk, rad/s^3.
    pub zeta_max: f64,
}

impl KinematicLimits {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("v_max", self.v_max),
            ("a_max", self.a_max),
            ("j_max", self.j_max),
            ("omega_max", self.omega_max),
            ("alpha_max", self.alpha_max),
            ("zeta_max", self.zeta_max),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!(
                    "{name} must be finite and strictly positive, got {v}"
                ));
            }
        }
        Ok(())
    }
}

/// Cycle times of the two loops and the derived per-cycle sample count.
///
/// `k = floor(t_d / t_r)` samples bridge one detection interval; when the
/// ratio is non-integral the final sample is held until the next cycle
/// begins, so no command is ever emitted past the planning horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    t_d: f64,
    t_r: f64,
    k: usize,
}

impl Timing {
    /// Builds a timing from the detection period `t_d` and controller
    /// period `t_r`. Requires `t_d >= 2 * t_r` so at least two samples
    /// fit in a cycle.
    pub fn new(t_d: f64, t_r: f64) -> Result<Self, PlanError> {
        if !(t_r.is_finite() && t_r > 0.0 && t_d.is_finite() && t_d >= 2.0 * t_r) {
            return Err(PlanError::InvalidTiming { t_d, t_r });
        }
        // Guard against float quotients like 4.999999999 for exact ratios.
        let k = ((t_d / t_r) + 1e-9).floor() as usize;
        Ok(Self { t_d, t_r, k })
    }

    #[inline]
    pub fn detection_period(&self) -> f64 {
        self.t_d
    }

    #[inline]
    pub fn control_period(&self) -> f64 {
        self.t_r
    }

    /// Number of trajectory points per planning cycle.
    #[inline]
    pub fn samples_per_cycle(&self) -> usize {
        self.k
    }
}

/// Velocity, acceleration, and jerk at one end of a segment, for one axis.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoundaryState {
    pub v: f64,
    pub a: f64,
    pub j: f64,
}

impl BoundaryState {
    pub const ZERO: Self = Self {
        v: 0.0,
        a: 0.0,
        j: 0.0,
    };
}

/// Boundary states for the three planned axes (x, y, rotation).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AxisStates {
    pub x: BoundaryState,
    pub y: BoundaryState,
    pub rot: BoundaryState,
}

/// One quintic velocity polynomial `v(t) = a0 + a1 t + ... + a5 t^5`
/// valid on `[t_start, t_end]`, in the same time variable the system was
/// built with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuinticSegment {
    pub coeffs: [f64; 6],
    pub t_start: f64,
    pub t_end: f64,
}

impl QuinticSegment {
    /// Velocity at time `t`.
    pub fn value(&self, t: f64) -> f64 {
        let c = &self.coeffs;
        // Horner form
        ((((c[5] * t + c[4]) * t + c[3]) * t + c[2]) * t + c[1]) * t + c[0]
    }

    /// First derivative (acceleration) at time `t`.
    pub fn derivative(&self, t: f64) -> f64 {
        let c = &self.coeffs;
        (((5.0 * c[5] * t + 4.0 * c[4]) * t + 3.0 * c[3]) * t + 2.0 * c[2]) * t + c[1]
    }

    /// Second derivative (jerk) at time `t`.
    pub fn second_derivative(&self, t: f64) -> f64 {
        let c = &self.coeffs;
        ((20.0 * c[5] * t + 12.0 * c[4]) * t + 6.0 * c[3]) * t + 2.0 * c[2]
    }
}

/// The three per-axis segments of one planning cycle. All share the same
/// time interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisSegments {
    pub x: QuinticSegment,
    pub y: QuinticSegment,
    pub rot: QuinticSegment,
}

impl AxisSegments {
    pub fn new(
        x: QuinticSegment,
        y: QuinticSegment,
        rot: QuinticSegment,
    ) -> Result<Self, PlanError> {
        if x.t_start != y.t_start
            || x.t_start != rot.t_start
            || x.t_end != y.t_end
            || x.t_end != rot.t_end
        {
            return Err(PlanError::MismatchedIntervals);
        }
        Ok(Self { x, y, rot })
    }
}

/// One velocity sample for the 3-DoF task: Cartesian x/y in m/s and
/// rotation about the tool axis in rad/s.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwistSample {
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
}

/// The sampled velocity trajectory of one planning cycle: exactly K
/// samples spaced `dt` apart.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityTrajectory {
    pub samples: Vec<TwistSample>,
    pub dt: f64,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid timing: t_d={t_d}, t_r={t_r} (need 0 < t_r and t_d >= 2*t_r)")]
    InvalidTiming { t_d: f64, t_r: f64 },
    #[error("degenerate segment interval: t_start={t_start} >= t_end={t_end}")]
    DegenerateInterval { t_start: f64, t_end: f64 },
    #[error("filtered command violates normalization contract: |r|={norm}")]
    CommandOutOfRange { norm: f64 },
    #[error("quintic system numerically unsolvable on [{t_start}, {t_end}] (condition estimate {condition:.3e})")]
    NumericalFailure {
        t_start: f64,
        t_end: f64,
        condition: f64,
    },
    #[error("per-axis segments do not share the same time interval")]
    MismatchedIntervals,
}

const COMMAND_TOLERANCE: f64 = 1e-9;

/// Scales the filtered command into per-axis target boundary states:
/// each translational axis gets `(v_max, a_max, j_max) * r_i`, the
/// rotational axis `(omega_max, alpha_max, zeta_max) * phi`. With command
/// magnitudes at most 1 the targets cannot exceed the limits.
///
/// Rejects commands with magnitude beyond `1 + 1e-9`; that signals a
/// broken normalization or filter upstream, not a plannable input.
pub fn map_targets(
    direction: Vector2<f64>,
    rotation: f64,
    limits: &KinematicLimits,
) -> Result<AxisStates, PlanError> {
    let norm = direction.norm();
    if norm > 1.0 + COMMAND_TOLERANCE {
        return Err(PlanError::CommandOutOfRange { norm });
    }
    if rotation.abs() > 1.0 + COMMAND_TOLERANCE {
        return Err(PlanError::CommandOutOfRange {
            norm: rotation.abs(),
        });
    }
    let axis = |r: f64| BoundaryState {
        v: limits.v_max * r,
        a: limits.a_max * r,
        j: limits.j_max * r,
    };
    Ok(AxisStates {
        x: axis(direction.x),
        y: axis(direction.y),
        rot: BoundaryState {
            v: limits.omega_max * rotation,
            a: limits.alpha_max * rotation,
            j: limits.zeta_max * rotation,
        },
    })
}

/// Builds the 6x6 boundary-condition system for one axis: rows are the
/// quintic and its first two derivatives evaluated at `t_s` and `t_t`,
/// the right-hand side stacks the start and target boundary values.
pub fn build_system(
    start: &BoundaryState,
    target: &BoundaryState,
    t_s: f64,
    t_t: f64,
) -> Result<(Matrix6<f64>, Vector6<f64>), PlanError> {
    if t_t <= t_s || !(t_s.is_finite() && t_t.is_finite()) {
        return Err(PlanError::DegenerateInterval {
            t_start: t_s,
            t_end: t_t,
        });
    }
    let row_block = |t: f64| {
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let t5 = t4 * t;
        [
            [1.0, t, t2, t3, t4, t5],
            [0.0, 1.0, 2.0 * t, 3.0 * t2, 4.0 * t3, 5.0 * t4],
            [0.0, 0.0, 2.0, 6.0 * t, 12.0 * t2, 20.0 * t3],
        ]
    };
    let s = row_block(t_s);
    let t = row_block(t_t);
    #[rustfmt::skip]
    let m = Matrix6::from_row_slice(&[
        s[0][0], s[0][1], s[0][2], s[0][3], s[0][4], s[0][5],
        s[1][0], s[1][1], s[1][2], s[1][3], s[1][4], s[1][5],
        s[2][0], s[2][1], s[2][2], s[2][3], s[2][4], s[2][5],
        t[0][0], t[0][1], t[0][2], t[0][3], t[0][4], t[0][5],
        t[1][0], t[1][1], t[1][2], t[1][3], t[1][4], t[1][5],
        t[2][0], t[2][1], t[2][2], t[2][3], t[2][4], t[2][5],
    ]);
    let b = Vector6::new(start.v, start.a, start.j, target.v, target.a, target.j);
    Ok((m, b))
}

const CONDITION_LIMIT: f64 = 1e12;
const RESIDUAL_TOLERANCE: f64 = 1e-9;

/// A factored boundary-condition matrix for a fixed `[t_s, t_t]`.
///
/// Every planning cycle runs on the same interval, so the matrix is
/// decomposed once and each axis costs only a back-substitution.
#[derive(Clone, Debug)]
pub struct QuinticSolver {
    matrix: Matrix6<f64>,
    lu: nalgebra::LU<f64, nalgebra::U6, nalgebra::U6>,
    condition: f64,
    t_start: f64,
    t_end: f64,
}

impl QuinticSolver {
    /// Factors the system matrix for the interval `[t_s, t_t]` and
    /// estimates its condition number; intervals conditioned worse than
    /// 1e12 are rejected up front.
    pub fn new(t_s: f64, t_t: f64) -> Result<Self, PlanError> {
        let (matrix, _) = build_system(&BoundaryState::ZERO, &BoundaryState::ZERO, t_s, t_t)?;
        let svd = matrix.svd(false, false);
        let sigma_max = svd.singular_values.max();
        let sigma_min = svd.singular_values.min();
        let condition = if sigma_min > 0.0 {
            sigma_max / sigma_min
        } else {
            f64::INFINITY
        };
        if !condition.is_finite() || condition > CONDITION_LIMIT {
            return Err(PlanError::NumericalFailure {
                t_start: t_s,
                t_end: t_t,
                condition,
            });
        }
        let lu = matrix.lu();
        Ok(Self {
            matrix,
            lu,
            condition,
            t_start: t_s,
            t_end: t_t,
        })
    }

    #[inline]
    pub fn interval(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    #[inline]
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Solves for the coefficients of one axis and verifies the residual
    /// against `1e-9 * max(1, |b|_inf)`.
    pub fn solve(
        &self,
        start: &BoundaryState,
        target: &BoundaryState,
    ) -> Result<QuinticSegment, PlanError> {
        let b = Vector6::new(start.v, start.a, start.j, target.v, target.a, target.j);
        let q = self.lu.solve(&b).ok_or(PlanError::NumericalFailure {
            t_start: self.t_start,
            t_end: self.t_end,
            condition: self.condition,
        })?;
        let residual = (self.matrix * q - b).amax();
        if residual > RESIDUAL_TOLERANCE * b.amax().max(1.0) {
            return Err(PlanError::NumericalFailure {
                t_start: self.t_start,
                t_end: self.t_end,
                condition: self.condition,
            });
        }
        Ok(QuinticSegment {
            coeffs: [q[0], q[1], q[2], q[3], q[4], q[5]],
            t_start: self.t_start,
            t_end: self.t_end,
        })
    }
}

/// One-shot coefficient solve for an explicit system. The error, if any,
/// names the interval read back from the matrix rows.
pub fn solve_coefficients(m: &Matrix6<f64>, b: &Vector6<f64>) -> Result<[f64; 6], PlanError> {
    // rows 0 and 3 are [1, t, t^2, ...] at t_s and t_t
    let t_s = m[(0, 1)];
    let t_t = m[(3, 1)];
    let fail = |condition: f64| PlanError::NumericalFailure {
        t_start: t_s,
        t_end: t_t,
        condition,
    };

    let svd = m.svd(false, false);
    let sigma_max = svd.singular_values.max();
    let sigma_min = svd.singular_values.min();
    let condition = if sigma_min > 0.0 {
        sigma_max / sigma_min
    } else {
        f64::INFINITY
    };
    if !condition.is_finite() || condition > CONDITION_LIMIT {
        return Err(fail(condition));
    }
    let q = m.lu().solve(b).ok_or_else(|| fail(condition))?;
    let residual = (m * q - b).amax();
    if residual > RESIDUAL_TOLERANCE * b.amax().max(1.0) {
        return Err(fail(condition));
    }
    Ok([q[0], q[1], q[2], q[3], q[4], q[5]])
}

/// Samples the per-axis segments at `t_s + i * t_r` for `i` in `[0, K)`.
/// The segment endpoint is never sampled; its value becomes the next
/// cycle's start state analytically.
pub fn evaluate_trajectory(segments: &AxisSegments, timing: &Timing) -> VelocityTrajectory {
    let k = timing.samples_per_cycle();
    let t_r = timing.control_period();
    let t0 = segments.x.t_start;
    let samples = (0..k)
        .map(|i| {
            let t = t0 + i as f64 * t_r;
            TwistSample {
                v_x: segments.x.value(t),
                v_y: segments.y.value(t),
                omega: segments.rot.value(t),
            }
        })
        .collect();
    VelocityTrajectory { samples, dt: t_r }
}

/// Overshoot report for one sampled trajectory: the max ratio of sample
/// magnitude to the respective limit, per axis, plus an elementwise
/// clamped copy.
#[derive(Clone, Debug)]
pub struct LimitReport {
    pub ratio_x: f64,
    pub ratio_y: f64,
    pub ratio_rot: f64,
    pub clamped: VelocityTrajectory,
}

impl LimitReport {
    /// Largest per-axis overshoot ratio.
    pub fn max_ratio(&self) -> f64 {
        self.ratio_x.max(self.ratio_y).max(self.ratio_rot)
    }

    /// True if any sample exceeded its limit.
    pub fn exceeds(&self) -> bool {
        self.max_ratio() > 1.0
    }
}

/// Measures per-axis overshoot of the sampled trajectory against the
/// limits and produces the clamped variant. Boundary values cannot
/// overshoot by construction; interior samples of a quintic can.
pub fn check_limits(traj: &VelocityTrajectory, limits: &KinematicLimits) -> LimitReport {
    let mut max_x: f64 = 0.0;
    let mut max_y: f64 = 0.0;
    let mut max_rot: f64 = 0.0;
    for s in &traj.samples {
        max_x = max_x.max(s.v_x.abs());
        max_y = max_y.max(s.v_y.abs());
        max_rot = max_rot.max(s.omega.abs());
    }
    let clamped = VelocityTrajectory {
        samples: traj
            .samples
            .iter()
            .map(|s| TwistSample {
                v_x: s.v_x.clamp(-limits.v_max, limits.v_max),
                v_y: s.v_y.clamp(-limits.v_max, limits.v_max),
                omega: s.omega.clamp(-limits.omega_max, limits.omega_max),
            })
            .collect(),
        dt: traj.dt,
    };
    LimitReport {
        ratio_x: max_x / limits.v_max,
        ratio_y: max_y / limits.v_max,
        ratio_rot: max_rot / limits.omega_max,
        clamped,
    }
}
