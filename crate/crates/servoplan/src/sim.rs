//! Deterministic kinematic stand-in for the physical setup.
//!
//! A 3-DoF Cartesian robot integrates velocity commands at the controller
//! period, and a virtual eye-in-hand camera produces oriented-bounding-box
//! detections of a static planar object at the detection period. The
//! camera is a fixed-scale orthographic projection (constant depth), with
//! Gaussian center/orientation noise and optional clutter outliers that
//! displace the detected center, all driven by a seeded RNG.
//!
//! Sign convention: image axes are co-aligned with the robot axes and the
//! camera is rigid on the end effector, so moving the robot +x shifts the
//! object's image by -x, and rotating the robot by +phi rotates the
//! object's image by -phi. The detected orientation is therefore already
//! the signed rotation correction, while the detected center offset is
//! the negated translation correction.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, ImagePoint, ObbDetection};

/// Millimeters per meter; robot state is in mm, commands in m/s.
pub const MM_PER_M: f64 = 1000.0;

/// Synthetic OBB extent reported by the virtual detector, pixels. The
/// servo path only consumes center and orientation; the extent matters
/// only for the wire format.
pub const DETECTION_WIDTH_PX: f64 = 120.0;
pub const DETECTION_HEIGHT_PX: f64 = 60.0;

/// End-effector pose relative to the aligned pose, plus simulated time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotState {
    /// Offset along x, mm.
    pub x: f64,
    /// Offset along y, mm.
    pub y: f64,
    /// Yaw offset about the tool axis, radians in (-pi, pi].
    pub phi: f64,
    /// Simulated time, seconds.
    pub t: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Self {
            x,
            y,
            phi: wrap_angle(phi),
            t: 0.0,
        }
    }

    /// Planar distance from the aligned pose, mm.
    pub fn position_error_mm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Orthographic eye-in-hand camera: constant depth, fixed pixels-per-mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    /// Projection scale, px/mm.
    pub scale: f64,
    /// Image width, px.
    pub image_width: f64,
    /// Image height, px.
    pub image_height: f64,
    /// Target point in the image (where the object should appear), px.
    pub target: [f64; 2],
    /// Flip the x component of the image-to-Cartesian velocity map, to
    /// emulate a miscalibrated mount. Normal servoing leaves this false.
    #[serde(default)]
    pub flip_x: bool,
    /// Same for the y component.
    #[serde(default)]
    pub flip_y: bool,
}

impl CameraModel {
    pub fn target_point(&self) -> ImagePoint {
        ImagePoint::new(self.target[0], self.target[1])
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(format!("camera scale must be positive, got {}", self.scale));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err("image dimensions must be positive".into());
        }
        let [tx, ty] = self.target;
        if !(tx >= 0.0 && tx <= self.image_width && ty >= 0.0 && ty <= self.image_height) {
            return Err(format!("target ({tx}, {ty}) outside image bounds"));
        }
        Ok(())
    }
}

/// Detector imprecision model: Gaussian noise on center and orientation
/// plus a per-frame probability of a clutter outlier that displaces the
/// center by a uniformly drawn offset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Std dev of the center error, px.
    pub sigma_center: f64,
    /// Std dev of the orientation error, radians.
    pub sigma_phi: f64,
    /// Probability per frame of a clutter misdetection.
    pub outlier_prob: f64,
    /// Max magnitude of an outlier displacement, px.
    pub outlier_radius: f64,
    /// RNG seed for the detection stream.
    pub seed: u64,
}

impl NoiseModel {
    /// Noise-free detections (the zero-noise experimental condition).
    pub fn zero(seed: u64) -> Self {
        Self {
            sigma_center: 0.0,
            sigma_phi: 0.0,
            outlier_prob: 0.0,
            outlier_radius: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.sigma_center < 0.0 || self.sigma_phi < 0.0 || self.outlier_radius < 0.0 {
            return Err("noise magnitudes must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(format!(
                "outlier_prob must be in [0,1], got {}",
                self.outlier_prob
            ));
        }
        Ok(())
    }
}

/// Full simulator configuration for one episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub camera: CameraModel,
    pub noise: NoiseModel,
    /// Detection cycle time, seconds.
    pub detection_period: f64,
    /// Controller cycle time, seconds.
    pub control_period: f64,
    /// Delay between capturing a frame and its detection being usable.
    pub detection_latency: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.camera.validate()?;
        self.noise.validate()?;
        if !(self.detection_period > 0.0 && self.control_period > 0.0) {
            return Err("cycle periods must be positive".into());
        }
        if self.detection_latency < 0.0 {
            return Err("detection latency must be nonnegative".into());
        }
        Ok(())
    }
}

/// Explicit Euler integration of the commanded Cartesian twist over `dt`.
pub fn robot_step(state: &RobotState, v_x: f64, v_y: f64, omega: f64, dt: f64) -> RobotState {
    debug_assert!(dt > 0.0);
    RobotState {
        x: state.x + v_x * MM_PER_M * dt,
        y: state.y + v_y * MM_PER_M * dt,
        phi: wrap_angle(state.phi + omega * dt),
        t: state.t + dt,
    }
}

/// Projects the object into the image for the given robot pose and emits
/// a noisy detection, or `None` when the object's true image position
/// falls outside the frame (detection lost).
pub fn camera_observe<R: Rng>(
    state: &RobotState,
    config: &SimConfig,
    rng: &mut R,
) -> Option<ObbDetection> {
    let cam = &config.camera;
    let true_x = cam.target[0] - cam.scale * state.x;
    let true_y = cam.target[1] - cam.scale * state.y;
    if true_x < 0.0 || true_x > cam.image_width || true_y < 0.0 || true_y > cam.image_height {
        return None;
    }
    let noise = &config.noise;
    let mut cx = true_x;
    let mut cy = true_y;
    let mut phi = -state.phi;
    if noise.sigma_center > 0.0 {
        let dist = Normal::new(0.0, noise.sigma_center).expect("validated sigma");
        cx += dist.sample(rng);
        cy += dist.sample(rng);
    }
    if noise.sigma_phi > 0.0 {
        let dist = Normal::new(0.0, noise.sigma_phi).expect("validated sigma");
        phi += dist.sample(rng);
    }
    if noise.outlier_prob > 0.0 && rng.gen::<f64>() < noise.outlier_prob {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let magnitude = rng.gen_range(0.0..=noise.outlier_radius);
        cx += magnitude * angle.cos();
        cy += magnitude * angle.sin();
    }
    Some(ObbDetection::new(
        ImagePoint::new(cx, cy),
        DETECTION_WIDTH_PX,
        DETECTION_HEIGHT_PX,
        phi,
        state.t,
    ))
}

/// The true (noise-free) pixel error for a robot pose: distance between
/// the object's projected center and the target point.
pub fn true_pixel_error(state: &RobotState, camera: &CameraModel) -> f64 {
    camera.scale * state.position_error_mm()
}
