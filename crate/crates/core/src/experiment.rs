//! Batch runs of the virtual operator and their reports.
//!
//! Initial grasps are drawn sequentially from one seeded generator, so a
//! scenario and a seed fix every number in the report. Runs themselves are
//! independent and may execute in parallel.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::haptics::{run_virtual_operator, Termination};
use crate::scenario::{Scenario, ScenarioError};
use crate::se3::Pose;
use crate::tov::TovProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// The virtual operator descends from the initial grasp.
    Guided,
    /// The initial grasp is kept as is.
    Unguided,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Guided => "guided",
            RunMode::Unguided => "unguided",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: RunMode,
    pub run: usize,
    pub initial_pose: Pose,
    pub final_pose: Pose,
    #[serde(rename = "H")]
    pub cost: f64,
    pub mean_a: f64,
    pub jv_integral: f64,
    pub steps: usize,
    pub termination: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

/// Mean and sample variance (`n − 1` denominator, 0 for a single run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: RunMode,
    pub runs: usize,
    #[serde(rename = "H_mean")]
    pub cost_mean: f64,
    #[serde(rename = "H_var")]
    pub cost_var: f64,
    pub mean_a_mean: f64,
    pub mean_a_var: f64,
    pub jv_mean: f64,
    pub jv_var: f64,
    pub steps_mean: f64,
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

impl Aggregate {
    pub fn from_runs(mode: RunMode, runs: &[&RunRecord]) -> Option<Self> {
        if runs.is_empty() {
            return None;
        }
        let col = |f: fn(&RunRecord) -> f64| mean_var(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (cost_mean, cost_var) = col(|r| r.cost);
        let (mean_a_mean, mean_a_var) = col(|r| r.mean_a);
        let (jv_mean, jv_var) = col(|r| r.jv_integral);
        let (steps_mean, _) = col(|r| r.steps as f64);
        Some(Self { mode, runs: runs.len(), cost_mean, cost_var, mean_a_mean, mean_a_var, jv_mean, jv_var, steps_mean })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub seed: u64,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn new(scenario: impl Into<String>, seed: u64, runs: Vec<RunRecord>) -> Self {
        let aggregates = [RunMode::Guided, RunMode::Unguided]
            .into_iter()
            .filter_map(|m| Aggregate::from_runs(m, &runs.iter().filter(|r| r.mode == m).collect::<Vec<_>>()))
            .collect();
        Self { scenario: scenario.into(), seed, runs, aggregates }
    }

    pub fn aggregate(&self, mode: RunMode) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.mode == mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExperimentOptions {
    pub runs: usize,
    pub seed: u64,
    pub guided: bool,
    pub unguided: bool,
    /// Record wall time per run; off by default so reports are reproducible.
    pub timing: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { runs: 6, seed: 0, guided: true, unguided: true, timing: false }
    }
}

/// The `runs` initial grasps for `seed`.
pub fn initial_grasps(scenario: &Scenario, problem: &TovProblem, runs: usize, seed: u64) -> Result<Vec<Pose>, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..runs).map(|_| scenario.random_grasp(problem, &mut rng)).collect()
}

fn termination_label(t: &Termination) -> String {
    match t {
        Termination::Converged => "converged".into(),
        Termination::StepLimit => "step-limit".into(),
        Termination::Stalled { message } => format!("stalled: {message}"),
    }
}

fn single_run(
    scenario: &Scenario,
    problem: &TovProblem,
    mode: RunMode,
    run: usize,
    initial: Pose,
    timing: bool,
) -> Result<RunRecord, ScenarioError> {
    let clock = Instant::now();
    let (final_pose, eval, steps, termination) = match mode {
        RunMode::Guided => {
            let trace = run_virtual_operator(problem, initial, scenario.cue, scenario.descent)?;
            let last = trace.last();
            let eval = problem.evaluate(&last.pose, false)?;
            (last.pose, eval, last.step, termination_label(&trace.termination))
        }
        RunMode::Unguided => (initial, problem.evaluate(&initial, false)?, 0, "fixed".into()),
    };
    Ok(RunRecord {
        mode,
        run,
        initial_pose: initial,
        final_pose,
        cost: eval.value.cost,
        mean_a: eval.value.mean_radius,
        jv_integral: eval.jv_integral,
        steps,
        termination,
        wall_time_ms: timing.then(|| clock.elapsed().as_secs_f64() * 1e3),
    })
}

pub fn run_experiment(scenario: &Scenario, opts: &ExperimentOptions) -> Result<ExperimentReport, ScenarioError> {
    let problem = scenario.problem()?;
    let grasps = initial_grasps(scenario, &problem, opts.runs, opts.seed)?;
    let mut jobs = Vec::new();
    for mode in [RunMode::Guided, RunMode::Unguided] {
        if (mode == RunMode::Guided && opts.guided) || (mode == RunMode::Unguided && opts.unguided) {
            jobs.extend(grasps.iter().enumerate().map(|(i, g)| (mode, i, *g)));
        }
    }
    let job = |&(mode, i, g): &(RunMode, usize, Pose)| single_run(scenario, &problem, mode, i, g, opts.timing);
    #[cfg(feature = "parallel")]
    let runs: Result<Vec<_>, _> = {
        use rayon::prelude::*;
        jobs.par_iter().map(job).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Result<Vec<_>, _> = jobs.iter().map(job).collect();
    Ok(ExperimentReport::new(scenario.name.clone(), opts.seed, runs?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot encode report: {0}")]
    Csv(#[from] csv::Error),
}

/// CSV columns, in order. Run rows leave the `*_var` columns empty;
/// aggregate rows put the means in the plain columns and leave `run` empty.
pub const CSV_HEADER: [&str; 26] = [
    "row", "mode", "run", "H", "H_var", "mean_a", "mean_a_var", "jv_integral", "jv_integral_var", "steps",
    "termination", "init_tx", "init_ty", "init_tz", "init_qw", "init_qx", "init_qy", "init_qz", "final_tx",
    "final_ty", "final_tz", "final_qw", "final_qx", "final_qy", "final_qz", "wall_time_ms",
];

fn pose_fields(p: &Pose) -> [String; 7] {
    let q = p.rotation.coords();
    let t = p.translation;
    [t.x, t.y, t.z, q[0], q[1], q[2], q[3]].map(|v| v.to_string())
}

pub fn write_csv(report: &ExperimentReport, out: impl Write) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in &report.runs {
        let mut row = vec![
            "run".to_string(),
            r.mode.as_str().into(),
            r.run.to_string(),
            r.cost.to_string(),
            String::new(),
            r.mean_a.to_string(),
            String::new(),
            r.jv_integral.to_string(),
            String::new(),
            r.steps.to_string(),
            r.termination.clone(),
        ];
        row.extend(pose_fields(&r.initial_pose));
        row.extend(pose_fields(&r.final_pose));
        row.push(r.wall_time_ms.map(|t| t.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    for a in &report.aggregates {
        let mut row = vec![
            "aggregate".to_string(),
            a.mode.as_str().into(),
            String::new(),
            a.cost_mean.to_string(),
            a.cost_var.to_string(),
            a.mean_a_mean.to_string(),
            a.mean_a_var.to_string(),
            a.jv_mean.to_string(),
            a.jv_var.to_string(),
            a.steps_mean.to_string(),
            format!("{} runs", a.runs),
        ];
        row.extend(std::iter::repeat_n(String::new(), 15));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report(report: &ExperimentReport, format: ReportFormat, mut out: impl Write) -> Result<(), ReportError> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, report).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            Ok(())
        }
        ReportFormat::Csv => write_csv(report, out),
    }
}

/// Writes the report to `path`, or to stdout when `path` is `None`.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: Option<&Path>) -> Result<(), ReportError> {
    match path {
        Some(p) => {
            let mut file = std::io::BufWriter::new(std::fs::File::create(p)?);
            write_report(report, format, &mut file)?;
            file.flush()?;
            Ok(())
        }
        None => write_report(report, format, std::io::stdout().lock()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn record(mode: RunMode, run: usize, cost: f64) -> RunRecord {
        RunRecord {
            mode,
            run,
            initial_pose: Pose::from_translation(Vector3::new(0.1, 0.2, 0.3)),
            final_pose: Pose::identity(),
            cost,
            mean_a: 1.0 / cost.sqrt(),
            jv_integral: 2.0 * cost,
            steps: run,
            termination: "converged".into(),
            wall_time_ms: None,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&ExperimentReport::new("x", 1, vec![]), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("row,mode,run,H,H_var"));
    }

    #[test]
    fn six_runs_give_six_rows_and_one_aggregate() {
        let runs = (0..6).map(|i| record(RunMode::Guided, i, 1.0 + i as f64)).collect();
        let report = ExperimentReport::new("x", 1, runs);
        let mut buf = Vec::new();
        write_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert_eq!(text.lines().filter(|l| l.starts_with("aggregate")).count(), 1);
        let a = report.aggregate(RunMode::Guided).unwrap();
        assert_eq!(a.cost_mean, 3.5);
        assert!((a.cost_var - 3.5).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let runs = vec![record(RunMode::Guided, 0, 1.3), record(RunMode::Unguided, 0, 2.0 / 3.0)];
        let report = ExperimentReport::new("traj2", 7, runs);
        let mut buf = Vec::new();
        write_report(&report, ReportFormat::Json, &mut buf).unwrap();
        let back: ExperimentReport = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, report);
    }
}
