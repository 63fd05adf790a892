//! Line-delimited streaming interface for external detectors, plus the
//! optional wall-clock loop runner.
//!
//! # Wire format
//!
//! One detection per line, six fields separated by ASCII whitespace:
//!
//! ```text
//! <timestamp_s> <cx_px> <cy_px> <width_px> <height_px> <phi_rad>
//! ```
//!
//! Fields are decimal text with `.` as the separator, parsed
//! locale-independently; `1,5` is rejected, `1.5e-3` is accepted. Width
//! and height must be strictly positive, every field finite. The
//! orientation is wrapped to (-pi, pi] on ingest.
//!
//! Emitted velocity samples use the same conventions, four fields:
//!
//! ```text
//! <timestamp_s> <v_x_m_per_s> <v_y_m_per_s> <omega_rad_per_s>
//! ```

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::geometry::{ImagePoint, NormalizedCommand, ObbDetection};
use crate::planner::TwistSample;
use crate::servo_loop::{detection_tick, LoopConfig, ServoLoop};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("expected 6 fields, got {got}")]
    FieldCount { got: usize },
    #[error("field {field} ({name}) is not a valid decimal number: {value:?}")]
    Parse {
        field: usize,
        name: &'static str,
        value: String,
    },
    #[error("invalid detection: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

const FIELD_NAMES: [&str; 6] = ["timestamp", "cx", "cy", "width", "height", "phi"];

/// Parses one detection line. Whitespace-separated, dot decimal
/// separator, no locale dependence.
pub fn parse_detection_line(line: &str) -> Result<ObbDetection, StreamError> {
    let fields: Vec<&str> = line.split_ascii_whitespace().collect();
    if fields.len() != 6 {
        return Err(StreamError::FieldCount { got: fields.len() });
    }
    let mut values = [0.0f64; 6];
    for (i, raw) in fields.iter().enumerate() {
        let v: f64 = raw.parse().map_err(|_| StreamError::Parse {
            field: i,
            name: FIELD_NAMES[i],
            value: (*raw).to_string(),
        })?;
        if !v.is_finite() {
            return Err(StreamError::Parse {
                field: i,
                name: FIELD_NAMES[i],
                value: (*raw).to_string(),
            });
        }
        values[i] = v;
    }
    let [timestamp, cx, cy, width, height, phi] = values;
    if width <= 0.0 || height <= 0.0 {
        return Err(StreamError::Invalid(format!(
            "width and height must be positive, got {width} x {height}"
        )));
    }
    Ok(ObbDetection::new(
        ImagePoint::new(cx, cy),
        width,
        height,
        phi,
        timestamp,
    ))
}

/// Formats a detection in the wire format (shortest round-trip floats).
pub fn format_detection_line(det: &ObbDetection) -> String {
    format!(
        "{} {} {} {} {} {}",
        det.timestamp, det.center.x, det.center.y, det.width, det.height, det.phi
    )
}

/// Formats one emitted velocity sample.
pub fn format_sample_line(timestamp: f64, sample: &TwistSample) -> String {
    format!(
        "{} {} {} {}",
        timestamp, sample.v_x, sample.v_y, sample.omega
    )
}

/// Latest-value exchange between the detection task and the planner
/// task: single producer, single consumer, overwrite on publish.
#[derive(Debug, Default)]
pub struct CommandSlot {
    slot: Mutex<Option<NormalizedCommand>>,
    closed: AtomicBool,
}

impl CommandSlot {
    pub fn new() -> Self {
        Self::default()
    }

    /// Publishes a command, replacing any unconsumed one.
    pub fn publish(&self, cmd: NormalizedCommand) {
        *self.slot.lock().expect("slot poisoned") = Some(cmd);
    }

    /// Takes the newest command since the last take, if any.
    pub fn take(&self) -> Option<NormalizedCommand> {
        self.slot.lock().expect("slot poisoned").take()
    }

    /// Marks the producer as finished.
    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }
}

/// Options for the wall-clock runner.
pub struct RealtimeOptions {
    pub loop_cfg: LoopConfig,
    /// Target point detections are servoed towards.
    pub target: ImagePoint,
}

/// Runs the planning task on wall-clock timers against a line-delimited
/// detection stream, writing velocity sample lines to `output` until the
/// input closes and the command stream has rung down. Parse failures and
/// cycle overruns are reported on stderr; a cycle overrun repeats the
/// previous sample timing rather than bursting.
///
/// Only the wiring is wall-clock here; all verification of the loop
/// itself runs in deterministic simulated time.
pub fn run_realtime<R, W>(input: R, mut output: W, opts: RealtimeOptions) -> Result<(), StreamError>
where
    R: BufRead + Send + 'static,
    W: Write,
{
    let slot = std::sync::Arc::new(CommandSlot::new());
    let producer = slot.clone();
    let target = opts.target;
    let norm = opts.loop_cfg.norm;
    let reader = std::thread::spawn(move || {
        for line in input.lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            match parse_detection_line(&line) {
                Ok(det) => producer.publish(detection_tick(&det, target, &norm)),
                Err(e) => eprintln!("servoplan: ignoring detection line: {e}"),
            }
        }
        producer.close();
    });

    let timing = opts.loop_cfg.timing;
    let t_r = timing.control_period();
    let mut servo =
        ServoLoop::new(opts.loop_cfg).map_err(|e| StreamError::Invalid(e.to_string()))?;
    let start = Instant::now();
    let mut next_cycle = start;
    let mut drain_cycles_left: Option<u32> = None;
    loop {
        if slot.is_closed() && drain_cycles_left.is_none() {
            // ring down: enough cycles for the hold policy plus filter drain
            drain_cycles_left =
                Some(servo.config().hold_cycles + servo.config().filter_size as u32 + 1);
        }
        if let Some(0) = drain_cycles_left {
            break;
        }
        servo.ingest(slot.take(), start.elapsed().as_secs_f64());
        let out = servo.control_cycle();
        let cycle_start = next_cycle;
        for (i, sample) in out.trajectory.samples.iter().enumerate() {
            let deadline = cycle_start + Duration::from_secs_f64(i as f64 * t_r);
            let now = Instant::now();
            if now < deadline {
                std::thread::sleep(deadline - now);
            } else if now > deadline + Duration::from_secs_f64(t_r) {
                eprintln!(
                    "servoplan: cycle overrun at t={:.4}s",
                    start.elapsed().as_secs_f64()
                );
            }
            let t = (deadline - start).as_secs_f64();
            writeln!(output, "{}", format_sample_line(t, sample))?;
        }
        output.flush()?;
        next_cycle = cycle_start + Duration::from_secs_f64(timing.detection_period());
        if let Some(n) = drain_cycles_left.as_mut() {
            *n -= 1;
        }
    }
    let _ = reader.join();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_valid_line() {
        let det = parse_detection_line("0.25 1024.5 768.25 120 60 -0.1").unwrap();
        assert_eq!(det.timestamp, 0.25);
        assert_eq!(det.center.x, 1024.5);
        assert_eq!(det.center.y, 768.25);
        assert_eq!(det.width, 120.0);
        assert_eq!(det.height, 60.0);
        assert!((det.phi - (-0.1)).abs() < 1e-15);
        // scientific notation and extra whitespace are fine
        assert!(parse_detection_line(" 1e-2  10 20 5 5 0 ").is_ok());
    }

    #[test]
    fn wraps_orientation_on_ingest() {
        let det = parse_detection_line("0 10 20 5 5 4.71238898038469").unwrap();
        assert!(det.phi <= std::f64::consts::PI);
        assert!((det.phi - (-std::f64::consts::FRAC_PI_2)).abs() < 1e-12);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            parse_detection_line("1 2 3 4 5"),
            Err(StreamError::FieldCount { got: 5 })
        ));
        assert!(matches!(
            parse_detection_line("1 2 3 4 5 6 7"),
            Err(StreamError::FieldCount { got: 7 })
        ));
        // comma decimal separator is not accepted
        assert!(matches!(
            parse_detection_line("0,5 10 20 5 5 0"),
            Err(StreamError::Parse { field: 0, .. })
        ));
        assert!(matches!(
            parse_detection_line("0 10 20 5 5 nan"),
            Err(StreamError::Parse { field: 5, .. })
        ));
        assert!(matches!(
            parse_detection_line("0 10 20 5 5 inf"),
            Err(StreamError::Parse { .. })
        ));
        // non-positive extent
        assert!(matches!(
            parse_detection_line("0 10 20 0 5 0"),
            Err(StreamError::Invalid(_))
        ));
    }

    #[test]
    fn format_round_trips() {
        let det = ObbDetection::new(
            ImagePoint::new(1024.125, 768.0625),
            120.5,
            60.25,
            std::f64::consts::FRAC_PI_4,
            1.5,
        );
        let parsed = parse_detection_line(&format_detection_line(&det)).unwrap();
        assert_eq!(parsed, det);
    }

    #[test]
    fn sample_line_format() {
        let s = TwistSample {
            v_x: 0.25,
            v_y: -0.1,
            omega: 0.5,
        };
        assert_eq!(format_sample_line(0.002, &s), "0.002 0.25 -0.1 0.5");
    }

    #[test]
    fn slot_keeps_latest_only() {
        let slot = CommandSlot::new();
        assert!(slot.take().is_none());
        slot.publish(NormalizedCommand::zero(1.0));
        slot.publish(NormalizedCommand::zero(2.0));
        let got = slot.take().unwrap();
        assert_eq!(got.timestamp, 2.0);
        assert!(slot.take().is_none());
        assert!(!slot.is_closed());
        slot.close();
        assert!(slot.is_closed());
    }

    #[test]
    fn realtime_runner_emits_samples() {
        use crate::planner::{KinematicLimits, Timing};
        let limits = KinematicLimits {
            v_max: 0.25,
            a_max: 1.0,
            j_max: 5.0,
            omega_max: 1.0,
            alpha_max: 4.0,
            zeta_max: 20.0,
        };
        // coarse timing keeps the wall-clock portion of this test short
        let timing = Timing::new(0.02, 0.01).unwrap();
        let mut cfg = LoopConfig::new(limits, timing);
        cfg.filter_size = 2;
        cfg.hold_cycles = 0;
        let input = std::io::Cursor::new("0.0 924.0 768.0 120 60 0.0\n".to_string());
        let mut output = Vec::new();
        run_realtime(
            input,
            &mut output,
            RealtimeOptions {
                loop_cfg: cfg,
                target: ImagePoint::new(1024.0, 768.0),
            },
        )
        .unwrap();
        let text = String::from_utf8(output).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(!lines.is_empty());
        for line in &lines {
            assert_eq!(line.split_ascii_whitespace().count(), 4);
        }
        // the detection (100 px off in +x) must have produced some motion
        assert!(lines.iter().any(|l| {
            let v: f64 = l.split_ascii_whitespace().nth(1).unwrap().parse().unwrap();
            v != 0.0
        }));
    }
}
