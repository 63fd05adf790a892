use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use servoplan::config::{
    self, apply_noise_overrides, apply_servo_overrides, CanonicalConfig, ResolvedProfile,
    RunManifest, ServoSection,
};
use servoplan::harness::{
    self, write_suite_outputs, ExperimentGrid, RobotProfile, Scene, SuiteOptions,
};
use servoplan::record::opt_field;
use servoplan::servo_loop::{run_episode, LoopConfig};
use servoplan::sim::{NoiseModel, RobotState};
use servoplan::stream::{run_realtime, RealtimeOptions};

#[derive(Parser)]
#[command(
    name = "servoplan",
    version,
    about = "Visual servoing trajectory planner: closed-loop simulation and experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single episode and write its trace
    Run(RunArgs),
    /// Run one episode per initial-error grid state and aggregate
    Suite(SuiteArgs),
    /// Sweep detector noise settings over the grid
    Sweep(SweepArgs),
    /// Plan in wall-clock time against detection lines on stdin
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SceneArg {
    Normal,
    Clutter,
}

impl From<SceneArg> for Scene {
    fn from(value: SceneArg) -> Self {
        match value {
            SceneArg::Normal => Scene::Normal,
            SceneArg::Clutter => Scene::Clutter,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GridArg {
    Small,
    Large,
}

impl GridArg {
    fn to_grid(self) -> ExperimentGrid {
        match self {
            GridArg::Small => ExperimentGrid::small(),
            GridArg::Large => ExperimentGrid::large(),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            GridArg::Small => "small",
            GridArg::Large => "large",
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// Robot profile: "fast", "slow", or a path to a profile TOML file
    #[arg(long, default_value = "fast")]
    profile: String,
    /// Scene: sensor noise only (normal) or noise plus outliers (clutter)
    #[arg(long, value_enum, default_value_t = SceneArg::Normal)]
    scene: SceneArg,
    /// Master RNG seed
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Episode duration, seconds
    #[arg(long, default_value_t = 20.0)]
    duration: f64,
    /// Report first threshold crossings instead of final settling times
    #[arg(long)]
    first_crossing: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Initial x error, mm
    #[arg(long, default_value_t = 35.0, allow_negative_numbers = true)]
    x0_mm: f64,
    /// Initial y error, mm
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    y0_mm: f64,
    /// Initial rotation error, degrees
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    phi0_deg: f64,
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Initial-error grid
    #[arg(long, value_enum, default_value_t = GridArg::Small)]
    grid: GridArg,
    /// Run every circle position against every rotation error
    #[arg(long)]
    cross_product: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Initial-error grid
    #[arg(long, value_enum, default_value_t = GridArg::Small)]
    grid: GridArg,
}

#[derive(Args)]
struct ServeArgs {
    /// Robot profile: "fast", "slow", or a path to a profile TOML file
    #[arg(long, default_value = "fast")]
    profile: String,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Suite(args) => cmd_suite(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Serve(args) => cmd_serve(args),
    }
}

fn load_profile(selector: &str) -> Result<ResolvedProfile> {
    match selector {
        "fast" => Ok(ResolvedProfile {
            profile: harness::fast_profile(),
            noise: None,
            grid: None,
            servo: ServoSection::default(),
        }),
        "slow" => Ok(ResolvedProfile {
            profile: harness::slow_profile(),
            noise: None,
            grid: None,
            servo: ServoSection::default(),
        }),
        path => config::load_profile_file(Path::new(path))
            .with_context(|| format!("loading profile {path}")),
    }
}

fn build_options(common: &CommonArgs, resolved: &ResolvedProfile) -> SuiteOptions {
    let mut opts = SuiteOptions {
        duration: common.duration,
        ..Default::default()
    };
    opts.metric.first_crossing = common.first_crossing;
    apply_servo_overrides(&resolved.servo, &mut opts);
    opts
}

fn scene_noise(common: &CommonArgs, resolved: &ResolvedProfile) -> NoiseModel {
    let noise = Scene::from(common.scene).noise(common.seed);
    match &resolved.noise {
        Some(section) => apply_noise_overrides(section, noise),
        None => noise,
    }
}

#[allow(clippy::too_many_arguments)]
fn manifest(
    command: &str,
    common: &CommonArgs,
    profile: &RobotProfile,
    grid: &ExperimentGrid,
    grid_name: &str,
    noise: &NoiseModel,
    opts: &SuiteOptions,
    episodes: usize,
) -> RunManifest {
    let canonical = CanonicalConfig {
        profile_name: profile.name.clone(),
        limits: profile.limits,
        detection_period: profile.timing.detection_period(),
        control_period: profile.timing.control_period(),
        camera: profile.camera,
        noise: *noise,
        grid_radius_mm: grid.radius_mm,
        grid_angles_deg: grid.angle_errors_deg.clone(),
        grid_positions: grid.positions,
        filter_size: opts.filter_size,
        u_r: opts.norm.u_r,
        u_phi: opts.norm.u_phi,
        eps_r: opts.norm.eps_r,
        eps_phi: opts.norm.eps_phi,
        clamp_overshoot: opts.clamp_overshoot,
        hold_cycles: opts.hold_cycles,
        detection_latency: opts
            .detection_latency
            .unwrap_or_else(|| profile.timing.detection_period()),
        duration_s: opts.duration,
        seed: common.seed,
    };
    RunManifest {
        tool: format!("servoplan {}", env!("CARGO_PKG_VERSION")),
        command: command.to_string(),
        profile_name: profile.name.clone(),
        scene: Scene::from(common.scene).as_str().to_string(),
        grid: grid_name.to_string(),
        seed: common.seed,
        duration_s: opts.duration,
        episodes,
        cross_product: opts.cross_product,
        first_crossing: opts.metric.first_crossing,
        config_sha256: config::config_hash(&canonical),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let resolved = load_profile(&args.common.profile)?;
    let opts = build_options(&args.common, &resolved);
    let mut noise = scene_noise(&args.common, &resolved);
    noise.seed = args.common.seed;
    let sim = harness::episode_sim(&resolved.profile, noise, opts.detection_latency);
    let loop_cfg = LoopConfig {
        limits: resolved.profile.limits,
        timing: resolved.profile.timing,
        norm: opts.norm,
        filter_size: opts.filter_size,
        clamp_overshoot: opts.clamp_overshoot,
        hold_cycles: opts.hold_cycles,
    };
    let initial = RobotState::new(args.x0_mm, args.y0_mm, args.phi0_deg.to_radians());
    let mut record =
        run_episode(&sim, &loop_cfg, initial, args.common.duration).context("running episode")?;
    let fallbacks = record.summary.solver_fallbacks;
    record.summary = harness::compute_metrics(&record.rows, &opts.metric);
    record.summary.solver_fallbacks = fallbacks;

    std::fs::create_dir_all(&args.common.out)?;
    let file = std::fs::File::create(args.common.out.join("episode.csv"))?;
    record.write_rows_csv(std::io::BufWriter::new(file))?;
    let single_grid = ExperimentGrid {
        radius_mm: args.x0_mm.hypot(args.y0_mm),
        angle_errors_deg: vec![args.phi0_deg, -args.phi0_deg],
        positions: 1,
    };
    let m = manifest(
        "run",
        &args.common,
        &resolved.profile,
        &single_grid,
        "single",
        &noise,
        &opts,
        1,
    );
    config::write_manifest(&args.common.out.join("manifest.json"), &m)?;

    let s = &record.summary;
    println!(
        "episode: profile={} scene={} seed={}",
        resolved.profile.name,
        Scene::from(args.common.scene).as_str(),
        args.common.seed
    );
    println!(
        "  initial error: {:.1} mm, {:.1} deg",
        initial.position_error_mm(),
        args.phi0_deg
    );
    println!("  converged: {}", s.converged);
    println!(
        "  t_r: {} s   t_phi: {} s",
        display_opt(s.t_r),
        display_opt(s.t_phi)
    );
    println!(
        "  MAE: x={} mm  y={} mm  phi={} deg",
        display_opt(s.mae_x_mm),
        display_opt(s.mae_y_mm),
        display_opt(s.mae_phi_deg)
    );
    println!("  max overshoot ratio: {:.4}", s.max_overshoot_ratio);
    println!("wrote {}", args.common.out.join("episode.csv").display());
    Ok(())
}

fn cmd_suite(args: SuiteArgs) -> Result<()> {
    let resolved = load_profile(&args.common.profile)?;
    let mut opts = build_options(&args.common, &resolved);
    opts.cross_product = args.cross_product;
    let grid = resolved.grid.clone().unwrap_or_else(|| args.grid.to_grid());
    let noise = scene_noise(&args.common, &resolved);
    opts.noise_override = Some(noise);

    let result = harness::run_suite(
        &resolved.profile,
        &grid,
        Scene::from(args.common.scene),
        args.common.seed,
        &opts,
    )
    .context("running suite")?;

    write_suite_outputs(&args.common.out, &result)?;
    let m = manifest(
        "suite",
        &args.common,
        &resolved.profile,
        &grid,
        args.grid.as_str(),
        &noise,
        &opts,
        result.episodes.len(),
    );
    config::write_manifest(&args.common.out.join("manifest.json"), &m)?;

    let a = &result.aggregate;
    println!(
        "suite: profile={} grid={} scene={} seed={}",
        resolved.profile.name,
        args.grid.as_str(),
        Scene::from(args.common.scene).as_str(),
        args.common.seed
    );
    println!("  episodes: {}  converged: {}", a.episodes, a.converged);
    println!(
        "  mean MAE: x={} mm  y={} mm  phi={} deg",
        display_opt(a.mean_mae_x_mm),
        display_opt(a.mean_mae_y_mm),
        display_opt(a.mean_mae_phi_deg)
    );
    println!(
        "  mean t_r: {} s  mean t_phi: {} s",
        display_opt(a.mean_t_r),
        display_opt(a.mean_t_phi)
    );
    println!("  max overshoot ratio: {:.4}", a.max_overshoot_ratio);
    println!("wrote {}", args.common.out.display());
    Ok(())
}

const SWEEP_SIGMAS: [f64; 4] = [0.0, 1.0, 2.0, 4.0];
const SWEEP_OUTLIER_PROBS: [f64; 3] = [0.0, 0.05, 0.1];

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let resolved = load_profile(&args.common.profile)?;
    let opts_base = build_options(&args.common, &resolved);
    let grid = resolved.grid.clone().unwrap_or_else(|| args.grid.to_grid());
    std::fs::create_dir_all(&args.common.out)?;
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(args.common.out.join("sweep.csv"))?);
    writeln!(
        out,
        "sigma_center_px,outlier_prob,episodes,converged,mean_mae_x_mm,mean_mae_y_mm,mean_mae_phi_deg,mean_t_r,mean_t_phi"
    )?;
    println!(
        "sweep: profile={} grid={} seed={}",
        resolved.profile.name,
        args.grid.as_str(),
        args.common.seed
    );
    let mut last_noise = NoiseModel::zero(args.common.seed);
    for sigma in SWEEP_SIGMAS {
        for prob in SWEEP_OUTLIER_PROBS {
            let mut opts = opts_base.clone();
            let base = Scene::from(args.common.scene).noise(args.common.seed);
            let noise = NoiseModel {
                sigma_center: sigma,
                sigma_phi: base.sigma_phi,
                outlier_prob: prob,
                outlier_radius: 100.0,
                seed: args.common.seed,
            };
            opts.noise_override = Some(noise);
            last_noise = noise;
            let result = harness::run_suite(
                &resolved.profile,
                &grid,
                Scene::from(args.common.scene),
                args.common.seed,
                &opts,
            )?;
            let a = &result.aggregate;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                sigma,
                prob,
                a.episodes,
                a.converged,
                opt_field(a.mean_mae_x_mm),
                opt_field(a.mean_mae_y_mm),
                opt_field(a.mean_mae_phi_deg),
                opt_field(a.mean_t_r),
                opt_field(a.mean_t_phi),
            )?;
            println!(
                "  sigma={sigma:>3} px  outliers={prob:<4}  converged {}/{}  mae_x={} mm",
                a.converged,
                a.episodes,
                display_opt(a.mean_mae_x_mm)
            );
        }
    }
    drop(out);
    let m = manifest(
        "sweep",
        &args.common,
        &resolved.profile,
        &grid,
        args.grid.as_str(),
        &last_noise,
        &opts_base,
        SWEEP_SIGMAS.len() * SWEEP_OUTLIER_PROBS.len(),
    );
    config::write_manifest(&args.common.out.join("manifest.json"), &m)?;
    println!("wrote {}", args.common.out.join("sweep.csv").display());
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let resolved = load_profile(&args.profile)?;
    let mut opts = SuiteOptions::default();
    apply_servo_overrides(&resolved.servo, &mut opts);
    let loop_cfg = LoopConfig {
        limits: resolved.profile.limits,
        timing: resolved.profile.timing,
        norm: opts.norm,
        filter_size: opts.filter_size,
        clamp_overshoot: opts.clamp_overshoot,
        hold_cycles: opts.hold_cycles,
    };
    let target = resolved.profile.camera.target_point();
    let stdin = std::io::BufReader::new(std::io::stdin());
    let stdout = std::io::stdout();
    if let Err(e) = run_realtime(stdin, stdout.lock(), RealtimeOptions { loop_cfg, target }) {
        bail!("realtime loop failed: {e}");
    }
    Ok(())
}

fn display_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}"))
        .unwrap_or_else(|| "-".to_string())
}
