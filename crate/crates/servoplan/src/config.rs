//! Configuration files and the reproducibility manifest.
//!
//! A profile file is TOML with `[limits]`, `[timing]`, and `[camera]`
//! sections plus optional `[noise]`, `[grid]`, and `[servo]` overrides.
//! Unknown keys are rejected. Units follow the library conventions:
//! seconds, meters per second (and derivatives), pixels, radians --
//! except fields explicitly suffixed `_mm` or `_deg`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::NormalizationParams;
use crate::harness::{ExperimentGrid, RobotProfile, SuiteOptions};
use crate::planner::{KinematicLimits, Timing};
use crate::sim::{CameraModel, NoiseModel};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse profile file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    /// Detection cycle time T_D, seconds.
    pub detection_period: f64,
    /// Controller cycle time T_R, seconds.
    pub control_period: f64,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Std dev of the detected center, px.
    pub sigma_center: Option<f64>,
    /// Std dev of the detected orientation, radians.
    pub sigma_phi: Option<f64>,
    pub outlier_prob: Option<f64>,
    /// Max outlier displacement, px.
    pub outlier_radius: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub radius_mm: f64,
    pub angle_errors_deg: Vec<f64>,
    /// Positions on the circle; defaults to the number of angle errors.
    pub positions: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServoSection {
    /// Moving-average filter size N.
    pub filter_size: Option<usize>,
    /// Direction vicinity, px.
    pub u_r: Option<f64>,
    /// Orientation vicinity, radians.
    pub u_phi: Option<f64>,
    /// Aligned threshold, px.
    pub eps_r: Option<f64>,
    /// Aligned threshold, radians.
    pub eps_phi: Option<f64>,
    pub clamp_overshoot: Option<bool>,
    pub hold_cycles: Option<u32>,
    /// Detection latency, seconds; defaults to one detection period.
    pub detection_latency: Option<f64>,
}

/// On-disk profile schema.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub name: String,
    pub limits: KinematicLimits,
    pub timing: TimingSection,
    pub camera: CameraModel,
    pub noise: Option<NoiseSection>,
    pub grid: Option<GridSection>,
    pub servo: Option<ServoSection>,
}

/// A fully validated profile plus any file-level overrides.
#[derive(Clone, Debug)]
pub struct ResolvedProfile {
    pub profile: RobotProfile,
    pub noise: Option<NoiseSection>,
    pub grid: Option<ExperimentGrid>,
    pub servo: ServoSection,
}

pub fn load_profile_file(path: &Path) -> Result<ResolvedProfile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ProfileFile = toml::from_str(&text)?;
    resolve_profile(file)
}

pub fn resolve_profile(file: ProfileFile) -> Result<ResolvedProfile, ConfigError> {
    file.limits.validate().map_err(ConfigError::Invalid)?;
    file.camera.validate().map_err(ConfigError::Invalid)?;
    let timing = Timing::new(file.timing.detection_period, file.timing.control_period)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let grid = file
        .grid
        .map(|g| {
            let grid = ExperimentGrid {
                radius_mm: g.radius_mm,
                positions: g.positions.unwrap_or(g.angle_errors_deg.len()),
                angle_errors_deg: g.angle_errors_deg,
            };
            grid.validate().map_err(ConfigError::Invalid)?;
            Ok::<_, ConfigError>(grid)
        })
        .transpose()?;
    if let Some(n) = &file.noise {
        let probe = NoiseModel {
            sigma_center: n.sigma_center.unwrap_or(0.0),
            sigma_phi: n.sigma_phi.unwrap_or(0.0),
            outlier_prob: n.outlier_prob.unwrap_or(0.0),
            outlier_radius: n.outlier_radius.unwrap_or(0.0),
            seed: 0,
        };
        probe.validate().map_err(ConfigError::Invalid)?;
    }
    let servo = file.servo.unwrap_or_default();
    let norm = apply_servo_norm(&servo, NormalizationParams::default());
    norm.validate().map_err(ConfigError::Invalid)?;
    if servo.filter_size == Some(0) {
        return Err(ConfigError::Invalid(
            "filter_size must be at least 1".into(),
        ));
    }
    if let Some(l) = servo.detection_latency {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "detection_latency must be nonnegative, got {l}"
            )));
        }
    }
    Ok(ResolvedProfile {
        profile: RobotProfile {
            name: file.name,
            limits: file.limits,
            timing,
            camera: file.camera,
        },
        noise: file.noise,
        grid,
        servo,
    })
}

fn apply_servo_norm(servo: &ServoSection, mut norm: NormalizationParams) -> NormalizationParams {
    if let Some(v) = servo.u_r {
        norm.u_r = v;
    }
    if let Some(v) = servo.u_phi {
        norm.u_phi = v;
    }
    if let Some(v) = servo.eps_r {
        norm.eps_r = v;
    }
    if let Some(v) = servo.eps_phi {
        norm.eps_phi = v;
    }
    norm
}

/// Merges file-level servo overrides into suite options.
pub fn apply_servo_overrides(servo: &ServoSection, opts: &mut SuiteOptions) {
    if let Some(n) = servo.filter_size {
        opts.filter_size = n;
    }
    if let Some(c) = servo.clamp_overshoot {
        opts.clamp_overshoot = c;
    }
    if let Some(h) = servo.hold_cycles {
        opts.hold_cycles = h;
    }
    if let Some(l) = servo.detection_latency {
        opts.detection_latency = Some(l);
    }
    opts.norm = apply_servo_norm(servo, opts.norm);
}

/// Merges file-level noise overrides into a scene noise model.
pub fn apply_noise_overrides(section: &NoiseSection, mut noise: NoiseModel) -> NoiseModel {
    if let Some(v) = section.sigma_center {
        noise.sigma_center = v;
    }
    if let Some(v) = section.sigma_phi {
        noise.sigma_phi = v;
    }
    if let Some(v) = section.outlier_prob {
        noise.outlier_prob = v;
    }
    if let Some(v) = section.outlier_radius {
        noise.outlier_radius = v;
    }
    noise
}

/// Everything that determines a run's outputs, serialized canonically
/// for hashing and recorded next to the results.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub profile_name: String,
    pub scene: String,
    pub grid: String,
    pub seed: u64,
    pub duration_s: f64,
    pub episodes: usize,
    pub cross_product: bool,
    pub first_crossing: bool,
    pub config_sha256: String,
}

/// Canonical description of the resolved configuration; its TOML
/// serialization is what gets hashed.
#[derive(Clone, Debug, Serialize)]
pub struct CanonicalConfig {
    pub profile_name: String,
    pub limits: KinematicLimits,
    pub detection_period: f64,
    pub control_period: f64,
    pub camera: CameraModel,
    pub noise: NoiseModel,
    pub grid_radius_mm: f64,
    pub grid_angles_deg: Vec<f64>,
    pub grid_positions: usize,
    pub filter_size: usize,
    pub u_r: f64,
    pub u_phi: f64,
    pub eps_r: f64,
    pub eps_phi: f64,
    pub clamp_overshoot: bool,
    pub hold_cycles: u32,
    pub detection_latency: f64,
    pub duration_s: f64,
    pub seed: u64,
}

pub fn config_hash(config: &CanonicalConfig) -> String {
    let text = toml::to_string(config).expect("canonical config serializes");
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, json + "\n")
}
