//! Image-space types and the normalization of direction and rotation.
//!
//! The detector reports an oriented bounding box; the servo error is the
//! pixel direction from the box center to the target point plus the box
//! orientation. Both are normalized into dimensionless commands in
//! [-1, 1]: full magnitude far away, linearly damped inside a vicinity
//! band, and zero once aligned within a small threshold.

use nalgebra::Vector2;

use std::f64::consts::PI;

/// A point in image coordinates, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagePoint {
    pub x: f64,
    pub y: f64,
}

impl ImagePoint {
    #[inline]
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// An oriented bounding box detection in image space: center, extent,
/// rotation, and the capture time of the frame it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObbDetection {
    /// Box center, pixels.
    pub center: ImagePoint,
    /// Box width, pixels. Strictly positive.
    pub width: f64,
    /// Box height, pixels. Strictly positive.
    pub height: f64,
    /// Box orientation, radians, wrapped to (-pi, pi].
    pub phi: f64,
    /// Capture timestamp, seconds.
    pub timestamp: f64,
}

impl ObbDetection {
    pub fn new(center: ImagePoint, width: f64, height: f64, phi: f64, timestamp: f64) -> Self {
        Self {
            center,
            width,
            height,
            phi: wrap_angle(phi),
            timestamp,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.center.is_finite()
            && self.width > 0.0
            && self.height > 0.0
            && self.phi.is_finite()
            && self.phi > -PI
            && self.phi <= PI
            && self.timestamp.is_finite()
    }
}

/// Parameters for direction/orientation normalization.
///
/// `u_r`/`u_phi` are the vicinities at which the command magnitude starts
/// scaling down linearly; `eps_r`/`eps_phi` are the aligned thresholds
/// below which the command is exactly zero so the loop terminates instead
/// of chattering around the target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationParams {
    /// Direction vicinity, pixels.
    pub u_r: f64,
    /// Orientation vicinity, radians.
    pub u_phi: f64,
    /// Aligned threshold for translation, pixels.
    pub eps_r: f64,
    /// Aligned threshold for rotation, radians.
    pub eps_phi: f64,
}

impl NormalizationParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.u_r.is_finite()
            && self.u_phi.is_finite()
            && self.eps_r.is_finite()
            && self.eps_phi.is_finite())
        {
            return Err("normalization parameters must be finite".into());
        }
        if !(self.eps_r >= 0.0 && self.u_r > self.eps_r) {
            return Err(format!(
                "require u_r > eps_r >= 0, got u_r={} eps_r={}",
                self.u_r, self.eps_r
            ));
        }
        if !(self.eps_phi >= 0.0 && self.u_phi > self.eps_phi) {
            return Err(format!(
                "require u_phi > eps_phi >= 0, got u_phi={} eps_phi={}",
                self.u_phi, self.eps_phi
            ));
        }
        Ok(())
    }
}

impl Default for NormalizationParams {
    /// Vicinity of 50 px / 10 degrees, aligned within 1 px / 1 degree.
    fn default() -> Self {
        Self {
            u_r: 50.0,
            u_phi: 10.0_f64.to_radians(),
            eps_r: 1.0,
            eps_phi: 1.0_f64.to_radians(),
        }
    }
}

/// A normalized servo command: damped unit direction and orientation,
/// both dimensionless with magnitude at most 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedCommand {
    pub direction: Vector2<f64>,
    pub rotation: f64,
    /// Timestamp of the detection this command came from, seconds.
    pub timestamp: f64,
}

impl NormalizedCommand {
    pub fn zero(timestamp: f64) -> Self {
        Self {
            direction: Vector2::zeros(),
            rotation: 0.0,
            timestamp,
        }
    }
}

/// Pixel direction from the detected center to the target point.
#[inline]
pub fn direction_to_target(target: ImagePoint, center: ImagePoint) -> Vector2<f64> {
    target.as_vector() - center.as_vector()
}

/// Normalizes a pixel direction: unit vector beyond the vicinity `u_r`,
/// scaled by `1/u_r` inside it (continuous at the boundary), and exactly
/// zero once within the aligned threshold `eps_r`.
pub fn normalize_direction(r: Vector2<f64>, params: &NormalizationParams) -> Vector2<f64> {
    let norm = r.norm();
    if norm <= params.eps_r {
        Vector2::zeros()
    } else if norm >= params.u_r {
        r / norm
    } else {
        r / params.u_r
    }
}

/// Normalizes an orientation error in radians: `sign(phi)` beyond the
/// vicinity `u_phi`, `phi / u_phi` inside it, zero within `eps_phi`.
///
/// The input must already be wrapped to (-pi, pi]; otherwise the sign
/// branch acts on the unwrapped value.
pub fn normalize_orientation(phi: f64, params: &NormalizationParams) -> f64 {
    let mag = phi.abs();
    if mag <= params.eps_phi {
        0.0
    } else if mag >= params.u_phi {
        phi.signum()
    } else {
        phi / params.u_phi
    }
}

/// Wraps an angle to (-pi, pi], preserving its value modulo 2*pi.
#[inline]
pub fn wrap_angle(phi: f64) -> f64 {
    let wrapped = phi.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> NormalizationParams {
        NormalizationParams::default()
    }

    #[test]
    fn direction_is_componentwise_difference() {
        let d = direction_to_target(ImagePoint::new(320.0, 240.0), ImagePoint::new(320.0, 240.0));
        assert_eq!(d, Vector2::new(0.0, 0.0));

        let d = direction_to_target(ImagePoint::new(320.0, 240.0), ImagePoint::new(220.0, 240.0));
        assert_eq!(d, Vector2::new(100.0, 0.0));

        let d = direction_to_target(ImagePoint::new(0.0, 0.0), ImagePoint::new(30.0, -40.0));
        assert_eq!(d, Vector2::new(-30.0, 40.0));
    }

    #[test]
    fn normalize_direction_branches() {
        let p = params();
        // beyond the vicinity: unit vector
        let n = normalize_direction(Vector2::new(100.0, 0.0), &p);
        assert!((n - Vector2::new(1.0, 0.0)).norm() < 1e-12);
        // 3-4-5 triangle exactly at the boundary: both branches agree
        let n = normalize_direction(Vector2::new(30.0, 40.0), &p);
        assert!((n - Vector2::new(0.6, 0.8)).norm() < 1e-12);
        // inside the vicinity: r / u_r
        let n = normalize_direction(Vector2::new(25.0, 0.0), &p);
        assert!((n - Vector2::new(0.5, 0.0)).norm() < 1e-12);
        // aligned
        let n = normalize_direction(Vector2::new(0.5, 0.0), &p);
        assert_eq!(n, Vector2::new(0.0, 0.0));
    }

    #[test]
    fn normalize_orientation_branches() {
        let p = NormalizationParams {
            u_phi: 0.2,
            ..params()
        };
        assert_eq!(normalize_orientation(0.5, &p), 1.0);
        assert!((normalize_orientation(-0.1, &p) - (-0.5)).abs() < 1e-12);
        assert_eq!(normalize_orientation(0.0, &p), 0.0);
    }

    #[test]
    fn wrap_angle_cases() {
        assert!((wrap_angle(3.0 * PI / 2.0) - (-PI / 2.0)).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-3.0 * PI) - PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn params_validation() {
        assert!(params().validate().is_ok());
        let bad = NormalizationParams {
            u_r: 1.0,
            eps_r: 2.0,
            ..params()
        };
        assert!(bad.validate().is_err());
        let bad = NormalizationParams {
            eps_phi: -0.1,
            ..params()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn unit_norm_beyond_vicinity(x in -1000.0..1000.0f64, y in -1000.0..1000.0f64) {
            let p = params();
            let r = Vector2::new(x, y);
            prop_assume!(r.norm() >= p.u_r);
            let n = normalize_direction(r, &p);
            prop_assert!((n.norm() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn linear_norm_inside_vicinity(x in -50.0..50.0f64, y in -50.0..50.0f64) {
            let p = params();
            let r = Vector2::new(x, y);
            prop_assume!(r.norm() > p.eps_r && r.norm() < p.u_r);
            let n = normalize_direction(r, &p);
            prop_assert!((n.norm() - r.norm() / p.u_r).abs() <= 1e-12);
        }

        #[test]
        fn direction_preserved(x in -1000.0..1000.0f64, y in -1000.0..1000.0f64) {
            let p = params();
            let r = Vector2::new(x, y);
            let n = normalize_direction(r, &p);
            prop_assume!(n.norm() > 0.0);
            // output is a nonnegative scalar multiple of the input
            let scale = n.norm() / r.norm();
            prop_assert!(scale > 0.0);
            prop_assert!((n - r * scale).norm() <= 1e-12);
        }

        #[test]
        fn orientation_is_odd(phi in -3.1f64..3.1f64) {
            let p = params();
            prop_assert_eq!(
                normalize_orientation(-phi, &p),
                -normalize_orientation(phi, &p)
            );
        }

        #[test]
        fn wrap_is_idempotent(phi in -100.0..100.0f64) {
            let w = wrap_angle(phi);
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w), w);
            // equal to the input modulo 2*pi
            let k = ((phi - w) / (2.0 * PI)).round();
            prop_assert!((phi - w - k * 2.0 * PI).abs() < 1e-9);
        }
    }
}
