//! `graspcue`: evaluate, differentiate and optimize grasp poses over a
//! post-grasp path, run guided/unguided experiments, serve the explorer.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use graspcue_core::experiment::{emit_report, run_experiment, ExperimentOptions, ReportError, ReportFormat};
use graspcue_core::haptics::{run_virtual_operator, DescentTrace, OperatorMode, Termination};
use graspcue_core::kinematics::{ChainModel, KinematicsError};
use graspcue_core::path::PathError;
use graspcue_core::scenario::{ModelRef, Scenario, ScenarioError};
use graspcue_core::se3::{Pose, UnitQuaternion};
use graspcue_core::tov::{TovError, TovGradient};
use graspcue_service::{ServiceConfig, DEFAULT_PORT, DEFAULT_TICK_HZ};
use nalgebra::Vector3;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "graspcue", version, about = "Task-oriented velocity manipulability of grasp poses")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Built-in scenario name or scenario JSON file.
    #[arg(long, global = true, default_value = "planar-halfcircle")]
    scenario: String,
    /// Chain model JSON replacing the scenario's model.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Path samples N.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Randomization seed; required by `experiment`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cost H, mean radius and joint-velocity integral at a grasp pose.
    Eval(PoseArg),
    /// Analytic gradient of H, checked against central differences.
    Grad {
        #[command(flatten)]
        pose: PoseArg,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-6)]
        fd_step: f64,
    },
    /// Run the virtual operator and emit its trace (JSON lines or CSV).
    Descend {
        #[command(flatten)]
        pose: PoseArg,
        #[arg(long, value_enum)]
        mode: Option<DescentMode>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Initial step rate.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Guided and/or unguided runs from seeded random initial grasps.
    Experiment {
        #[arg(long, value_enum, default_value = "both")]
        mode: ExperimentMode,
        #[arg(long, default_value_t = 6)]
        runs: usize,
        /// Record wall time per run (makes reports non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Start the explorer service.
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Directory of extra scenario files.
        #[arg(long)]
        scenario_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TICK_HZ)]
        tick_hz: f64,
        /// Idle session lifetime in seconds.
        #[arg(long, default_value_t = 1800)]
        idle_timeout: u64,
    },
}

#[derive(Debug, Args)]
struct PoseArg {
    /// Grasp pose `x,y,z,w,qx,qy,qz` in the object frame; the scenario's grasp by default.
    #[arg(long, allow_hyphen_values = true)]
    pose: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DescentMode {
    FirstOrder,
    SecondOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExperimentMode {
    Guided,
    Unguided,
    Both,
}

/// Failures split by exit code.
#[derive(Debug)]
enum Failure {
    /// Bad input, files or options: exit 2.
    Validation(String),
    /// Singular or unreachable configurations: exit 3.
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Numerical(m) => m,
        }
    }
}

fn kinematics_failure(e: KinematicsError) -> Failure {
    match e {
        KinematicsError::DimensionMismatch { .. } | KinematicsError::InvalidModel(_) => Failure::Validation(e.to_string()),
        _ => Failure::Numerical(e.to_string()),
    }
}

fn path_failure(e: PathError) -> Failure {
    match e {
        PathError::OutOfRange(_) | PathError::Invalid(_) => Failure::Validation(e.to_string()),
        PathError::Kinematics(k) => kinematics_failure(k),
        PathError::Ik { .. } => Failure::Numerical(e.to_string()),
    }
}

impl From<TovError> for Failure {
    fn from(e: TovError) -> Self {
        match e {
            TovError::Path(p) => path_failure(p),
            TovError::Kinematics(k) => kinematics_failure(k),
            TovError::InvalidOptions(_) => Failure::Validation(e.to_string()),
            TovError::NearSingular { .. } | TovError::NonUnitDirection(_) => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Kinematics(k) => kinematics_failure(k),
            ScenarioError::Path(p) => path_failure(p),
            ScenarioError::Tov(t) => t.into(),
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("graspcue: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_scenario(common: &Common) -> Result<Scenario, Failure> {
    let mut scenario = Scenario::resolve(&common.scenario)?;
    if let Some(file) = &common.model {
        let model = ChainModel::load(file).map_err(|e| Failure::Validation(format!("{}: {e}", file.display())))?;
        scenario.model = ModelRef::Inline(model);
    }
    if let Some(n) = common.samples {
        scenario.samples = n;
    }
    if common.model.is_some() || common.samples.is_some() {
        scenario.validate()?;
    }
    Ok(scenario)
}

fn parse_pose(text: &str) -> Result<Pose, Failure> {
    let bad = |why: &str| Failure::Validation(format!("--pose '{text}': {why}"));
    let v: Vec<f64> = text
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("expected seven comma-separated numbers"))?;
    let [x, y, z, w, qx, qy, qz] = v[..] else { return Err(bad("expected seven comma-separated numbers")) };
    let q = UnitQuaternion::try_from([w, qx, qy, qz]).map_err(|e| bad(&e.to_string()))?;
    Ok(Pose::new(Vector3::new(x, y, z), q))
}

fn grasp(scenario: &Scenario, arg: &PoseArg) -> Result<Pose, Failure> {
    arg.pose.as_deref().map_or(Ok(scenario.grasp), parse_pose)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Validation(format!("cannot write {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn pose_fields(p: &Pose) -> [f64; 7] {
    let (t, q) = (p.translation, p.rotation.coords());
    [t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
}

const POSE_COLUMNS: [&str; 7] = ["t_x", "t_y", "t_z", "q_w", "q_x", "q_y", "q_z"];

#[derive(Serialize)]
struct EvalOutput<'a> {
    scenario: &'a str,
    pose: Pose,
    #[serde(rename = "H")]
    cost: f64,
    mean_a: f64,
    excluded: usize,
    jv_integral: f64,
    s: &'a [f64],
    a: &'a [Option<f64>],
    h: &'a [Option<f64>],
}

#[derive(Serialize)]
struct GradOutput<'a> {
    scenario: &'a str,
    pose: Pose,
    #[serde(rename = "H")]
    cost: f64,
    /// Raw `∂H/∂(t, ρ)`.
    gradient: [f64; 7],
    /// With the radial quaternion component removed, as compared below.
    tangent_gradient: [f64; 7],
    fd_gradient: [f64; 7],
    fd_step: f64,
    relative_error: f64,
}

fn seven(g: &TovGradient) -> [f64; 7] {
    let c = g.combined();
    std::array::from_fn(|i| c[i])
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    if let Command::Serve { port, host, scenario_dir, tick_hz, idle_timeout } = &cli.command {
        return serve(SocketAddr::new(*host, *port), scenario_dir.as_deref(), *tick_hz, *idle_timeout);
    }
    let scenario = load_scenario(common)?;
    let problem = scenario.problem()?;
    let mut out = output(common.out.as_deref())?;
    match &cli.command {
        Command::Eval(arg) => {
            let pose = grasp(&scenario, arg)?;
            let e = problem.evaluate(&pose, false)?;
            match common.format {
                Format::Json => {
                    let v = &e.value;
                    let o = EvalOutput {
                        scenario: &scenario.name,
                        pose,
                        cost: v.cost,
                        mean_a: v.mean_radius,
                        excluded: v.excluded,
                        jv_integral: e.jv_integral,
                        s: &v.s,
                        a: &v.a,
                        h: &v.h,
                    };
                    serde_json::to_writer_pretty(&mut out, &o).map_err(io::Error::from)?;
                    writeln!(out)?;
                }
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(&mut out);
                    w.write_record(["s", "a", "h"]).map_err(io::Error::from)?;
                    for ((s, a), h) in e.value.s.iter().zip(&e.value.a).zip(&e.value.h) {
                        let cell = |x: &Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                        w.write_record([s.to_string(), cell(a), cell(h)]).map_err(io::Error::from)?;
                    }
                    w.flush()?;
                }
            }
        }
        Command::Grad { pose, fd_step } => {
            if !(fd_step.is_finite() && *fd_step > 0.0) {
                return Err(Failure::Validation("--fd-step must be positive".into()));
            }
            let pose = grasp(&scenario, pose)?;
            let (value, g) = problem.gradient(&pose)?;
            let fd = problem.fd_gradient(&pose, *fd_step)?;
            let tangent = g.tangent(&pose.rotation);
            let o = GradOutput {
                scenario: &scenario.name,
                pose,
                cost: value.cost,
                gradient: seven(&g),
                tangent_gradient: seven(&tangent),
                fd_gradient: seven(&fd),
                fd_step: *fd_step,
                relative_error: tangent.relative_error(&fd),
            };
            match common.format {
                Format::Json => {
                    serde_json::to_writer_pretty(&mut out, &o).map_err(io::Error::from)?;
                    writeln!(out)?;
                }
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(&mut out);
                    w.write_record(["component", "gradient", "tangent_gradient", "fd_gradient"]).map_err(io::Error::from)?;
                    for (i, name) in POSE_COLUMNS.iter().enumerate() {
                        w.write_record([
                            name.to_string(),
                            o.gradient[i].to_string(),
                            o.tangent_gradient[i].to_string(),
                            o.fd_gradient[i].to_string(),
                        ])
                        .map_err(io::Error::from)?;
                    }
                    w.flush()?;
                }
            }
        }
        Command::Descend { pose, mode, max_steps, rate } => {
            let start = grasp(&scenario, pose)?;
            let mut cue = scenario.cue;
            if let Some(r) = rate {
                cue.rate = *r;
            }
            let mut settings = scenario.descent;
            if let Some(n) = max_steps {
                settings.max_steps = *n;
            }
            if let Some(m) = mode {
                settings.mode = match m {
                    DescentMode::FirstOrder => OperatorMode::FirstOrder,
                    DescentMode::SecondOrder => OperatorMode::SecondOrder,
                };
            }
            let trace = run_virtual_operator(&problem, start, cue, settings)?;
            write_trace(&trace, common.format, &mut out)?;
            let (first, last) = (&trace.records[0], trace.last());
            eprintln!(
                "{}: {} steps, H {:.6} -> {:.6}, {}",
                scenario.name,
                last.step,
                first.cost,
                last.cost,
                match &trace.termination {
                    Termination::Converged => "converged".to_string(),
                    Termination::StepLimit => "step limit".to_string(),
                    Termination::Stalled { message } => format!("stalled: {message}"),
                }
            );
        }
        Command::Experiment { mode, runs, timing } => {
            let seed = common.seed.ok_or_else(|| Failure::Validation("experiment needs --seed".into()))?;
            let opts = ExperimentOptions {
                runs: *runs,
                seed,
                guided: *mode != ExperimentMode::Unguided,
                unguided: *mode != ExperimentMode::Guided,
                timing: *timing,
            };
            let report = run_experiment(&scenario, &opts)?;
            let format = match common.format {
                Format::Json => ReportFormat::Json,
                Format::Csv => ReportFormat::Csv,
            };
            drop(out);
            emit_report(&report, format, common.out.as_deref())?;
            return Ok(());
        }
        Command::Serve { .. } => unreachable!("handled above"),
    }
    out.flush()?;
    Ok(())
}

fn write_trace(trace: &DescentTrace, format: Format, out: &mut dyn Write) -> Result<(), Failure> {
    match format {
        Format::Json => trace.write_jsonl(out)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let mut header = vec!["step", "H", "grad_norm", "jv_integral"];
            header.extend(POSE_COLUMNS);
            header.extend(["f_x", "f_y", "f_z", "tau_x", "tau_y", "tau_z"]);
            w.write_record(&header).map_err(io::Error::from)?;
            for r in &trace.records {
                let mut row = vec![r.step.to_string(), r.cost.to_string(), r.grad_norm.to_string(), r.jv_integral.to_string()];
                row.extend(pose_fields(&r.pose).iter().map(f64::to_string));
                row.extend(r.f.iter().map(f64::to_string));
                w.write_record(&row).map_err(io::Error::from)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn serve(addr: SocketAddr, scenario_dir: Option<&Path>, tick_hz: f64, idle_timeout: u64) -> Result<(), Failure> {
    if !(tick_hz.is_finite() && tick_hz > 0.0) {
        return Err(Failure::Validation("--tick-hz must be positive".into()));
    }
    let scenario_dir = scenario_dir.map(graspcue_service::scenario_dir).transpose()?;
    let config = ServiceConfig {
        scenario_dir,
        tick_hz,
        idle_timeout: Duration::from_secs(idle_timeout),
        ..ServiceConfig::default()
    };
    tracing_subscriber::fmt().with_writer(io::stderr).init();
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(graspcue_service::serve(addr, config))?;
    Ok(())
}
