//! Experiment harness: initial-error grids, scenes, bundled robot
//! profiles, per-episode metrics, and the suite runner behind the CLI.
//!
//! The protocol places the robot on a circle of initial position errors,
//! pairs each position with one rotation error, and runs a fixed-length
//! episode per state in a normal scene (sensor noise only) or a clutter
//! scene (noise plus detection outliers). Swapping the robot profile
//! changes only data, never code.

use std::io::{self, Write};
use std::path::Path;

use crate::planner::{KinematicLimits, PlanError, Timing};
use crate::record::{opt_field, EpisodeRecord, EpisodeRow, EpisodeSummary};
use crate::servo_loop::{run_episode, LoopConfig};
use crate::sim::{CameraModel, NoiseModel, RobotState, SimConfig};

/// A complete robot-camera system description. The planner and geometry
/// code paths are identical for every profile; transferability means
/// only this data changes.
#[derive(Clone, Debug)]
pub struct RobotProfile {
    pub name: String,
    pub limits: KinematicLimits,
    pub timing: Timing,
    pub camera: CameraModel,
}

fn bundled_camera() -> CameraModel {
    CameraModel {
        scale: 10.0,
        image_width: 2048.0,
        image_height: 1536.0,
        target: [1024.0, 768.0],
        flip_x: false,
        flip_y: false,
    }
}

/// Fast bundled profile: 60 fps detection, 500 Hz control.
///
/// The limits are desk-scale placeholders, not manufacturer data. They
/// are sized so the closed loop is stable against the bundled camera
/// scale and filter delay: the in-band loop gain
/// `v_max * scale * 1000 * T_D / u_r` must stay well below 1 per
/// detection cycle or the latency plus filter memory turns the approach
/// into a sustained oscillation around the target.
pub fn fast_profile() -> RobotProfile {
    RobotProfile {
        name: "fast".to_string(),
        limits: KinematicLimits {
            v_max: 0.02,
            a_max: 0.08,
            j_max: 2.0,
            omega_max: 0.2,
            alpha_max: 0.8,
            zeta_max: 25.0,
        },
        timing: Timing::new(1.0 / 60.0, 1.0 / 500.0).expect("valid bundled timing"),
        camera: bundled_camera(),
    }
}

/// Slow bundled profile: 30 fps detection, 250 Hz control, limits at 40%
/// of the fast profile.
pub fn slow_profile() -> RobotProfile {
    RobotProfile {
        name: "slow".to_string(),
        limits: KinematicLimits {
            v_max: 0.008,
            a_max: 0.032,
            j_max: 0.8,
            omega_max: 0.08,
            alpha_max: 0.32,
            zeta_max: 10.0,
        },
        timing: Timing::new(1.0 / 30.0, 1.0 / 250.0).expect("valid bundled timing"),
        camera: bundled_camera(),
    }
}

/// Initial-error grid: a circle of position errors, one rotation error
/// per position (or the full cross product behind a flag).
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub radius_mm: f64,
    pub angle_errors_deg: Vec<f64>,
    pub positions: usize,
}

impl ExperimentGrid {
    /// Small initial error: 35 mm circle, rotation errors -15..15 deg in
    /// 3 deg steps.
    pub fn small() -> Self {
        let angles: Vec<f64> = (-5..=5).map(|i| i as f64 * 3.0).collect();
        Self {
            radius_mm: 35.0,
            positions: angles.len(),
            angle_errors_deg: angles,
        }
    }

    /// Large initial error: 70 mm circle, rotation errors -25..25 deg in
    /// 5 deg steps.
    pub fn large() -> Self {
        let angles: Vec<f64> = (-5..=5).map(|i| i as f64 * 5.0).collect();
        Self {
            radius_mm: 70.0,
            positions: angles.len(),
            angle_errors_deg: angles,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.radius_mm.is_finite() && self.radius_mm >= 0.0) {
            return Err(format!(
                "grid radius must be nonnegative, got {}",
                self.radius_mm
            ));
        }
        if self.angle_errors_deg.is_empty() || self.positions == 0 {
            return Err("grid must have at least one position and angle".into());
        }
        for &a in &self.angle_errors_deg {
            if !self.angle_errors_deg.iter().any(|&b| (a + b).abs() < 1e-9) {
                return Err(format!(
                    "angle error list must be symmetric around 0; {a} has no mirror"
                ));
            }
        }
        Ok(())
    }
}

/// Expands a grid into initial robot states: positions evenly spaced on
/// the circle and, in pairing mode, the i-th angle error assigned to the
/// i-th position. With `cross_product` every position is combined with
/// every angle error.
pub fn generate_grid(grid: &ExperimentGrid, cross_product: bool) -> Vec<RobotState> {
    let position = |i: usize, n: usize| {
        let theta = std::f64::consts::TAU * i as f64 / n as f64;
        (grid.radius_mm * theta.cos(), grid.radius_mm * theta.sin())
    };
    if cross_product {
        let mut states = Vec::with_capacity(grid.positions * grid.angle_errors_deg.len());
        for i in 0..grid.positions {
            let (x, y) = position(i, grid.positions);
            for &a in &grid.angle_errors_deg {
                states.push(RobotState::new(x, y, a.to_radians()));
            }
        }
        states
    } else {
        let n = grid.positions.min(grid.angle_errors_deg.len());
        (0..n)
            .map(|i| {
                let (x, y) = position(i, n);
                RobotState::new(x, y, grid.angle_errors_deg[i].to_radians())
            })
            .collect()
    }
}

/// Scene selection: normal has only sensor noise, clutter adds detection
/// outliers from distractor objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scene {
    Normal,
    Clutter,
}

impl Scene {
    /// Default noise model for the scene. Magnitudes are plausible
    /// stand-ins for detector imprecision, not published values.
    pub fn noise(&self, seed: u64) -> NoiseModel {
        let mut noise = NoiseModel {
            sigma_center: 2.0,
            sigma_phi: 1.0_f64.to_radians(),
            outlier_prob: 0.0,
            outlier_radius: 0.0,
            seed,
        };
        if let Scene::Clutter = self {
            noise.outlier_prob = 0.05;
            noise.outlier_radius = 100.0;
        }
        noise
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Scene::Normal => "normal",
            Scene::Clutter => "clutter",
        }
    }
}

/// Convergence thresholds and the settling definition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConfig {
    /// Translational threshold, px.
    pub threshold_px: f64,
    /// Rotational threshold, degrees.
    pub threshold_deg: f64,
    /// Report the first threshold crossing instead of the time after
    /// which the error stays below for the rest of the episode.
    pub first_crossing: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            threshold_px: 1.0,
            threshold_deg: 1.0,
            first_crossing: false,
        }
    }
}

/// Reduces an episode trace to its summary metrics.
///
/// `t_r` is the first time after which the pixel error stays below the
/// threshold for the rest of the episode (measured from the final
/// crossing), `t_phi` the same for orientation. Never-settling errors
/// yield absent times and `converged = false`. Mean absolute errors are
/// taken over the tail from `max(t_r, t_phi)`; mean speeds over
/// `[0, t_r]` and `[0, t_phi]` respectively.
pub fn compute_metrics(rows: &[EpisodeRow], cfg: &MetricConfig) -> EpisodeSummary {
    assert!(!rows.is_empty(), "cannot summarize an empty episode");
    let settle = |error: &dyn Fn(&EpisodeRow) -> f64, threshold: f64| -> Option<f64> {
        if cfg.first_crossing {
            rows.iter().find(|r| error(r) < threshold).map(|r| r.t)
        } else {
            match rows.iter().rposition(|r| error(r) >= threshold) {
                None => Some(rows[0].t),
                Some(i) if i + 1 < rows.len() => Some(rows[i + 1].t),
                Some(_) => None,
            }
        }
    };
    let t_r = settle(&|r: &EpisodeRow| r.pixel_error, cfg.threshold_px);
    let t_phi = settle(&|r: &EpisodeRow| r.err_phi_deg.abs(), cfg.threshold_deg);
    let converged = t_r.is_some() && t_phi.is_some();

    let mean = |values: &mut dyn Iterator<Item = f64>| -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for v in values {
            sum += v;
            count += 1;
        }
        (count > 0).then(|| sum / count as f64)
    };

    let (mae_x_mm, mae_y_mm, mae_phi_deg) = if converged {
        let tail_start = t_r.unwrap().max(t_phi.unwrap());
        let tail = || rows.iter().filter(move |r| r.t >= tail_start);
        (
            mean(&mut tail().map(|r| r.err_x_mm.abs())),
            mean(&mut tail().map(|r| r.err_y_mm.abs())),
            mean(&mut tail().map(|r| r.err_phi_deg.abs())),
        )
    } else {
        (None, None, None)
    };

    let mean_speed_mm_s = t_r.and_then(|tr| {
        mean(
            &mut rows
                .iter()
                .filter(|r| r.t <= tr)
                .map(|r| r.v_x.hypot(r.v_y) * 1000.0),
        )
    });
    let mean_speed_rad_s =
        t_phi.and_then(|tp| mean(&mut rows.iter().filter(|r| r.t <= tp).map(|r| r.omega.abs())));

    let max_overshoot_ratio = rows
        .iter()
        .map(|r| r.overshoot_ratio)
        .fold(0.0_f64, f64::max);

    EpisodeSummary {
        t_r,
        t_phi,
        converged,
        mae_x_mm,
        mae_y_mm,
        mae_phi_deg,
        max_overshoot_ratio,
        solver_fallbacks: 0,
        mean_speed_mm_s,
        mean_speed_rad_s,
    }
}

/// Options shared by suite and sweep runs.
#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Episode length, seconds.
    pub duration: f64,
    /// Run every position against every angle error.
    pub cross_product: bool,
    pub metric: MetricConfig,
    /// Moving-average filter size N.
    pub filter_size: usize,
    pub norm: crate::geometry::NormalizationParams,
    pub clamp_overshoot: bool,
    pub hold_cycles: u32,
    /// Detection latency; `None` defaults to one detection period.
    pub detection_latency: Option<f64>,
    /// Replaces the scene's noise model entirely (seed still derived
    /// per episode). Used for zero-noise reference runs and sweeps.
    pub noise_override: Option<NoiseModel>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            duration: 20.0,
            cross_product: false,
            metric: MetricConfig::default(),
            filter_size: 5,
            norm: crate::geometry::NormalizationParams::default(),
            clamp_overshoot: true,
            hold_cycles: 3,
            detection_latency: None,
            noise_override: None,
        }
    }
}

/// One episode of a suite with its initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEpisode {
    pub index: usize,
    pub initial: RobotState,
    pub record: EpisodeRecord,
}

/// Aggregate over the converged episodes of a suite, mirroring the
/// results-table layout (mean absolute errors and settle times).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteAggregate {
    pub episodes: usize,
    pub converged: usize,
    pub mean_t_r: Option<f64>,
    pub mean_t_phi: Option<f64>,
    pub mean_mae_x_mm: Option<f64>,
    pub mean_mae_y_mm: Option<f64>,
    pub mean_mae_phi_deg: Option<f64>,
    pub max_overshoot_ratio: f64,
    pub solver_fallbacks: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub episodes: Vec<SuiteEpisode>,
    pub aggregate: SuiteAggregate,
}

/// Per-episode RNG seed: decorrelates episodes while keeping the whole
/// suite a pure function of the master seed.
pub fn episode_seed(master: u64, index: usize) -> u64 {
    master.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Builds the simulator configuration for one episode of a suite.
pub fn episode_sim(profile: &RobotProfile, noise: NoiseModel, latency: Option<f64>) -> SimConfig {
    SimConfig {
        camera: profile.camera,
        noise,
        detection_period: profile.timing.detection_period(),
        control_period: profile.timing.control_period(),
        detection_latency: latency.unwrap_or_else(|| profile.timing.detection_period()),
    }
}

/// Runs one episode per grid state and aggregates the summaries.
/// Deterministic for a given master seed.
pub fn run_suite(
    profile: &RobotProfile,
    grid: &ExperimentGrid,
    scene: Scene,
    seed: u64,
    opts: &SuiteOptions,
) -> Result<SuiteResult, PlanError> {
    let states = generate_grid(grid, opts.cross_product);
    let mut episodes = Vec::with_capacity(states.len());
    for (index, initial) in states.into_iter().enumerate() {
        let mut noise = opts.noise_override.unwrap_or_else(|| scene.noise(0));
        noise.seed = episode_seed(seed, index);
        let sim = episode_sim(profile, noise, opts.detection_latency);
        let loop_cfg = LoopConfig {
            limits: profile.limits,
            timing: profile.timing,
            norm: opts.norm,
            filter_size: opts.filter_size,
            clamp_overshoot: opts.clamp_overshoot,
            hold_cycles: opts.hold_cycles,
        };
        let mut record = run_episode(&sim, &loop_cfg, initial, opts.duration)?;
        let fallbacks = record.summary.solver_fallbacks;
        record.summary = compute_metrics(&record.rows, &opts.metric);
        record.summary.solver_fallbacks = fallbacks;
        episodes.push(SuiteEpisode {
            index,
            initial,
            record,
        });
    }
    let aggregate = aggregate(&episodes);
    Ok(SuiteResult {
        episodes,
        aggregate,
    })
}

fn aggregate(episodes: &[SuiteEpisode]) -> SuiteAggregate {
    let mut agg = SuiteAggregate {
        episodes: episodes.len(),
        ..Default::default()
    };
    let mean_of = |values: Vec<f64>| -> Option<f64> {
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    };
    agg.converged = episodes
        .iter()
        .filter(|e| e.record.summary.converged)
        .count();
    agg.mean_t_r = mean_of(
        episodes
            .iter()
            .filter_map(|e| e.record.summary.t_r)
            .collect(),
    );
    agg.mean_t_phi = mean_of(
        episodes
            .iter()
            .filter_map(|e| e.record.summary.t_phi)
            .collect(),
    );
    agg.mean_mae_x_mm = mean_of(
        episodes
            .iter()
            .filter_map(|e| e.record.summary.mae_x_mm)
            .collect(),
    );
    agg.mean_mae_y_mm = mean_of(
        episodes
            .iter()
            .filter_map(|e| e.record.summary.mae_y_mm)
            .collect(),
    );
    agg.mean_mae_phi_deg = mean_of(
        episodes
            .iter()
            .filter_map(|e| e.record.summary.mae_phi_deg)
            .collect(),
    );
    agg.max_overshoot_ratio = episodes
        .iter()
        .map(|e| e.record.summary.max_overshoot_ratio)
        .fold(0.0, f64::max);
    agg.solver_fallbacks = episodes
        .iter()
        .map(|e| e.record.summary.solver_fallbacks)
        .sum();
    agg
}

pub const EPISODES_HEADER: &str = "index,x0_mm,y0_mm,phi0_deg,converged,t_r,t_phi,mae_x_mm,mae_y_mm,mae_phi_deg,max_overshoot_ratio,solver_fallbacks,mean_speed_mm_s,mean_speed_rad_s";

/// Writes the per-episode summary table.
pub fn write_episodes_csv<W: Write>(result: &SuiteResult, mut out: W) -> io::Result<()> {
    writeln!(out, "{EPISODES_HEADER}")?;
    for e in &result.episodes {
        let s = &e.record.summary;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.index,
            e.initial.x,
            e.initial.y,
            e.initial.phi.to_degrees(),
            s.converged,
            opt_field(s.t_r),
            opt_field(s.t_phi),
            opt_field(s.mae_x_mm),
            opt_field(s.mae_y_mm),
            opt_field(s.mae_phi_deg),
            s.max_overshoot_ratio,
            s.solver_fallbacks,
            opt_field(s.mean_speed_mm_s),
            opt_field(s.mean_speed_rad_s),
        )?;
    }
    Ok(())
}

/// Writes the aggregate table (one metric per row).
pub fn write_summary_csv<W: Write>(result: &SuiteResult, mut out: W) -> io::Result<()> {
    let a = &result.aggregate;
    writeln!(out, "metric,value")?;
    writeln!(out, "episodes,{}", a.episodes)?;
    writeln!(out, "converged,{}", a.converged)?;
    writeln!(out, "delta_x_mm,{}", opt_field(a.mean_mae_x_mm))?;
    writeln!(out, "delta_y_mm,{}", opt_field(a.mean_mae_y_mm))?;
    writeln!(out, "delta_phi_deg,{}", opt_field(a.mean_mae_phi_deg))?;
    writeln!(out, "t_r_s,{}", opt_field(a.mean_t_r))?;
    writeln!(out, "t_phi_s,{}", opt_field(a.mean_t_phi))?;
    writeln!(out, "max_overshoot_ratio,{}", a.max_overshoot_ratio)?;
    writeln!(out, "solver_fallbacks,{}", a.solver_fallbacks)?;
    Ok(())
}

/// Writes episodes.csv, summary.csv, and one full trace per episode into
/// `dir`, creating it if needed.
pub fn write_suite_outputs(dir: &Path, result: &SuiteResult) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let episodes = std::fs::File::create(dir.join("episodes.csv"))?;
    write_episodes_csv(result, io::BufWriter::new(episodes))?;
    let summary = std::fs::File::create(dir.join("summary.csv"))?;
    write_summary_csv(result, io::BufWriter::new(summary))?;
    for e in &result.episodes {
        let file = std::fs::File::create(dir.join(format!("episode_{:03}.csv", e.index)))?;
        e.record.write_rows_csv(io::BufWriter::new(file))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, pixel_error: f64, err_phi_deg: f64) -> EpisodeRow {
        EpisodeRow {
            t,
            r_n_x: 0.0,
            r_n_y: 0.0,
            phi_n: 0.0,
            pixel_error,
            err_x_mm: pixel_error / 10.0,
            err_y_mm: 0.0,
            err_phi_deg,
            v_x: 0.01,
            v_y: 0.0,
            omega: 0.01,
            overshoot_ratio: 0.0,
            cmd_age_s: 0.0,
        }
    }

    #[test]
    fn small_grid_matches_protocol() {
        let grid = ExperimentGrid::small();
        assert_eq!(grid.radius_mm, 35.0);
        assert_eq!(grid.angle_errors_deg.len(), 11);
        assert_eq!(grid.angle_errors_deg[0], -15.0);
        assert_eq!(*grid.angle_errors_deg.last().unwrap(), 15.0);
        assert!(grid.validate().is_ok());

        let states = generate_grid(&grid, false);
        assert_eq!(states.len(), 11);
        for s in &states {
            assert!((s.position_error_mm() - 35.0).abs() < 1e-9);
        }
    }

    #[test]
    fn large_grid_matches_protocol() {
        let grid = ExperimentGrid::large();
        assert_eq!(grid.radius_mm, 70.0);
        assert_eq!(
            grid.angle_errors_deg,
            vec![-25.0, -20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0]
        );
        let states = generate_grid(&grid, false);
        assert_eq!(states.len(), 11);
        for s in &states {
            assert!((s.position_error_mm() - 70.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_radius_keeps_rotation_errors() {
        let grid = ExperimentGrid {
            radius_mm: 0.0,
            angle_errors_deg: vec![-10.0, 0.0, 10.0],
            positions: 3,
        };
        let states = generate_grid(&grid, false);
        assert_eq!(states.len(), 3);
        for s in &states {
            assert_eq!(s.position_error_mm(), 0.0);
        }
        assert!((states[0].phi.to_degrees() + 10.0).abs() < 1e-9);
    }

    #[test]
    fn cross_product_expands_fully() {
        let states = generate_grid(&ExperimentGrid::small(), true);
        assert_eq!(states.len(), 121);
    }

    #[test]
    fn asymmetric_angles_rejected() {
        let grid = ExperimentGrid {
            radius_mm: 35.0,
            angle_errors_deg: vec![-10.0, 5.0],
            positions: 2,
        };
        assert!(grid.validate().is_err());
    }

    #[test]
    fn metrics_zero_error() {
        let rows: Vec<_> = (0..10).map(|i| row(i as f64 * 0.1, 0.0, 0.0)).collect();
        let s = compute_metrics(&rows, &MetricConfig::default());
        assert_eq!(s.t_r, Some(0.0));
        assert_eq!(s.t_phi, Some(0.0));
        assert!(s.converged);
        assert_eq!(s.mae_x_mm, Some(0.0));
    }

    #[test]
    fn settle_time_measured_from_final_crossing() {
        // error dips below threshold, rises above again, then settles
        let profile = [5.0, 0.5, 3.0, 0.8, 0.4, 0.2];
        let rows: Vec<_> = profile
            .iter()
            .enumerate()
            .map(|(i, &e)| row(i as f64, e, 0.0))
            .collect();
        let s = compute_metrics(&rows, &MetricConfig::default());
        assert_eq!(s.t_r, Some(3.0));

        let first = compute_metrics(
            &rows,
            &MetricConfig {
                first_crossing: true,
                ..Default::default()
            },
        );
        assert_eq!(first.t_r, Some(1.0));
    }

    #[test]
    fn never_settling_reports_absent() {
        let rows: Vec<_> = (0..5).map(|i| row(i as f64, 10.0, 0.0)).collect();
        let s = compute_metrics(&rows, &MetricConfig::default());
        assert_eq!(s.t_r, None);
        assert!(!s.converged);
        assert_eq!(s.mae_x_mm, None);
    }

    #[test]
    fn summary_is_recomputable_from_rows() {
        let profile = fast_profile();
        let grid = ExperimentGrid::small();
        let opts = SuiteOptions {
            duration: 3.0,
            ..Default::default()
        };
        let result = run_suite(&profile, &grid, Scene::Normal, 5, &opts).unwrap();
        for e in &result.episodes {
            let mut recomputed = compute_metrics(&e.record.rows, &opts.metric);
            recomputed.solver_fallbacks = e.record.summary.solver_fallbacks;
            assert_eq!(recomputed, e.record.summary);
        }
    }

    #[test]
    fn suite_is_deterministic_in_memory() {
        let profile = fast_profile();
        let grid = ExperimentGrid {
            radius_mm: 35.0,
            angle_errors_deg: vec![-3.0, 0.0, 3.0],
            positions: 3,
        };
        let opts = SuiteOptions {
            duration: 2.0,
            ..Default::default()
        };
        let a = run_suite(&profile, &grid, Scene::Clutter, 11, &opts).unwrap();
        let b = run_suite(&profile, &grid, Scene::Clutter, 11, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_writers_emit_headers() {
        let profile = fast_profile();
        let grid = ExperimentGrid {
            radius_mm: 35.0,
            angle_errors_deg: vec![0.0],
            positions: 1,
        };
        let opts = SuiteOptions {
            duration: 1.0,
            ..Default::default()
        };
        let result = run_suite(&profile, &grid, Scene::Normal, 1, &opts).unwrap();
        let mut buf = Vec::new();
        write_episodes_csv(&result, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with(EPISODES_HEADER));
        let mut buf = Vec::new();
        write_summary_csv(&result, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("delta_x_mm,"));
        assert!(text.contains("t_r_s,"));
    }
}
