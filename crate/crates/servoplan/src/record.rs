//! Time-stamped episode traces and their summaries.
//!
//! One row is written per emitted control sample. The summary is always
//! recomputable from the rows; `harness::compute_metrics` is the single
//! implementation of that reduction.

use std::io::{self, Write};

/// One control tick of an episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRow {
    /// Simulated time of the emission, seconds.
    pub t: f64,
    /// Normalized direction command in effect this cycle.
    pub r_n_x: f64,
    pub r_n_y: f64,
    /// Normalized rotation command in effect this cycle.
    pub phi_n: f64,
    /// True pixel error between projected object center and target.
    pub pixel_error: f64,
    /// True position error components, mm (signed).
    pub err_x_mm: f64,
    pub err_y_mm: f64,
    /// True orientation error, degrees (signed).
    pub err_phi_deg: f64,
    /// Emitted (post-clamp, robot-frame) velocity command.
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
    /// Pre-clamp overshoot ratio of the cycle this sample belongs to.
    pub overshoot_ratio: f64,
    /// Age of the command used by this cycle, seconds. Before the first
    /// detection arrives this measures against the initial zero command
    /// stamped at episode start.
    pub cmd_age_s: f64,
}

impl EpisodeRow {
    pub fn position_error_mm(&self) -> f64 {
        self.err_x_mm.hypot(self.err_y_mm)
    }
}

/// Per-episode metrics over the converged tail, plus diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeSummary {
    /// First time after which the pixel error stays below threshold for
    /// the rest of the episode. Absent if the episode never settles.
    pub t_r: Option<f64>,
    /// Same for the orientation error.
    pub t_phi: Option<f64>,
    /// Both thresholds reached and held until the end.
    pub converged: bool,
    /// Mean absolute errors over the converged tail.
    pub mae_x_mm: Option<f64>,
    pub mae_y_mm: Option<f64>,
    pub mae_phi_deg: Option<f64>,
    /// Largest pre-clamp overshoot ratio seen in the episode.
    pub max_overshoot_ratio: f64,
    /// Number of planning cycles that fell back to the safety ramp.
    pub solver_fallbacks: u64,
    /// Mean translational speed from episode start to t_r, mm/s.
    pub mean_speed_mm_s: Option<f64>,
    /// Mean rotational speed from episode start to t_phi, rad/s.
    pub mean_speed_rad_s: Option<f64>,
}

/// A complete episode: the raw trace and its summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub rows: Vec<EpisodeRow>,
    pub summary: EpisodeSummary,
}

pub const ROW_HEADER: &str = "t,r_n_x,r_n_y,phi_n,pixel_error,pos_err_mm,err_x_mm,err_y_mm,err_phi_deg,v_x,v_y,omega,overshoot_ratio,cmd_age_s";

/// Formats an optional value, empty when absent.
pub fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EpisodeRecord {
    /// Writes the per-tick rows as CSV. Floats use shortest round-trip
    /// formatting so rewriting the same record is byte-identical.
    pub fn write_rows_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{ROW_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.r_n_x,
                r.r_n_y,
                r.phi_n,
                r.pixel_error,
                r.position_error_mm(),
                r.err_x_mm,
                r.err_y_mm,
                r.err_phi_deg,
                r.v_x,
                r.v_y,
                r.omega,
                r.overshoot_ratio,
                r.cmd_age_s
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_are_reproducible() {
        let record = EpisodeRecord {
            rows: vec![EpisodeRow {
                t: 0.002,
                r_n_x: 1.0,
                r_n_y: 0.0,
                phi_n: -0.5,
                pixel_error: 350.0,
                err_x_mm: 35.0,
                err_y_mm: 0.0,
                err_phi_deg: 10.0,
                v_x: 0.05,
                v_y: 0.0,
                omega: -0.1,
                overshoot_ratio: 0.98,
                cmd_age_s: 1.0 / 60.0,
            }],
            summary: EpisodeSummary::default(),
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        record.write_rows_csv(&mut a).unwrap();
        record.write_rows_csv(&mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("t,"));
        assert!(text.contains("0.002,1,0,-0.5,350,35,35,0,10,0.05,0,-0.1,0.98,"));
    }

    #[test]
    fn optional_fields_render_empty() {
        assert_eq!(opt_field(None), "");
        assert_eq!(opt_field(Some(2.49)), "2.49");
    }
}
