//! Acceptance suite: prints one PASS/FAIL line per criterion and fails the
//! run if any criterion misses its tolerance or its time budget.

use std::f64::consts::PI;
use std::process::Command;
use std::time::{Duration, Instant};

use graspcue_core::experiment::{run_experiment, ExperimentOptions, RunMode};
use graspcue_core::haptics::run_virtual_operator;
use graspcue_core::kinematics::{ChainModel, JacobianFrame, JointVector};
use graspcue_core::path::ObjectPath;
use graspcue_core::scenario::{builtin_scenario, BUILTIN_NAMES};
use graspcue_core::se3::Pose;
use graspcue_core::tov::{ellipsoid_radius, TovError, TovOptions, TovProblem, DEFAULT_CONDITION_LIMIT};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn max_condition(problem: &TovProblem, grasp: &Pose) -> Result<f64, TovError> {
    let disc = problem.discretize(grasp)?;
    let mut worst: f64 = 0.0;
    for s in &disc.samples {
        let sv = problem.model.task_jacobian(&s.q)?.singular_values();
        worst = worst.max((sv.max() / sv.min()).powi(2));
    }
    Ok(worst)
}

fn gradient_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scenarios: Vec<_> = BUILTIN_NAMES.iter().map(|n| builtin_scenario(n).unwrap()).collect();
    let problems: Vec<_> = scenarios.iter().map(|s| s.problem().unwrap()).collect();
    let (mut pairs, mut worst, mut worst_plain, mut draws) = (0, 0.0f64, 0.0f64, 0);
    while pairs < 100 {
        draws += 1;
        if draws > 1000 {
            return Err(format!("only {pairs} well-conditioned pairs in {draws} draws"));
        }
        let k = draws % scenarios.len();
        let Ok(grasp) = scenarios[k].random_grasp(&problems[k], &mut rng) else { continue };
        if !matches!(max_condition(&problems[k], &grasp), Ok(c) if c < 1e6) {
            continue;
        }
        let (_, g) = problems[k].gradient(&grasp).map_err(|e| e.to_string())?;
        // plain central differences at 1e-6 carry O(h²) truncation error that
        // reaches 1e-4 on the sharply curved traj2 pairs; extrapolation removes it
        let fd = problems[k].fd_gradient_extrapolated(&grasp, 1e-6).map_err(|e| e.to_string())?;
        let plain = problems[k].fd_gradient(&grasp, 1e-6).map_err(|e| e.to_string())?;
        let err = g.tangent(&grasp.rotation).relative_error(&fd);
        worst = worst.max(err);
        worst_plain = worst_plain.max(g.tangent(&grasp.rotation).relative_error(&plain));
        if err >= 1e-4 {
            return Err(format!("{} relative error {err:.2e}", scenarios[k].name));
        }
        pairs += 1;
    }
    Ok(format!("{pairs} pairs, worst relative error {worst:.2e} (plain differences {worst_plain:.2e})"))
}

/// Radius of the image of the unit joint-velocity circle along `dir`, found
/// by sweeping 10⁴ joint velocities and interpolating where the image crosses `dir`.
fn brute_force_radius(j: &DMatrix<f64>, dir: &Vector2<f64>) -> Option<f64> {
    let n = 10_000;
    let image = |k: usize| {
        let phi = 2.0 * PI * k as f64 / n as f64;
        let v = j * DVector::from_vec(vec![phi.cos(), phi.sin()]);
        Vector2::new(v[0], v[1])
    };
    let cross = |v: &Vector2<f64>| dir.x * v.y - dir.y * v.x;
    let mut best: Option<f64> = None;
    for k in 0..n {
        let (a, b) = (image(k), image(k + 1));
        let (ca, cb) = (cross(&a), cross(&b));
        if ca * cb <= 0.0 && ca != cb {
            let p = a + (b - a) * (ca / (ca - cb));
            if p.dot(dir) > 0.0 {
                best = Some(best.map_or(p.norm(), |r: f64| r.max(p.norm())));
            }
        }
    }
    best
}

fn radius_oracle() -> Verdict {
    let model = ChainModel::planar2();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut count, mut worst) = (0, 0.0f64);
    while count < 50 {
        let q = JointVector::from_vec(vec![rng.random_range(-PI..PI), rng.random_range(-PI..PI)]);
        if q[1].sin().abs() < 0.2 {
            continue;
        }
        let j = model.task_jacobian(&q).map_err(|e| e.to_string())?;
        let phi: f64 = rng.random_range(-PI..PI);
        let dir = Vector2::new(phi.cos(), phi.sin());
        let analytic = ellipsoid_radius(&j, &DVector::from_vec(vec![dir.x, dir.y]), DEFAULT_CONDITION_LIMIT)
            .map_err(|e| e.to_string())?;
        let oracle = brute_force_radius(&j, &dir).ok_or("no crossing found")?;
        let err = (analytic - oracle).abs() / oracle;
        worst = worst.max(err);
        if err >= 1e-3 {
            return Err(format!("q = {q:?}: {analytic} vs {oracle}"));
        }
        count += 1;
    }
    Ok(format!("{count} configurations, worst relative error {worst:.2e}"))
}

fn grid_correspondence() -> Verdict {
    let s = builtin_scenario("planar-halfcircle").unwrap();
    let p = s.problem().unwrap();
    let grid = s.grasp_grid.as_ref().ok_or("no grasp grid")?.poses();
    let mut rows = vec![];
    for g in &grid {
        let e = p.evaluate(g, false).map_err(|e| e.to_string())?;
        rows.push((e.value.cost, e.jv_integral, e.value.mean_radius));
    }
    let arg = |key: &dyn Fn(&(f64, f64, f64)) -> f64| {
        (0..rows.len()).min_by(|&a, &b| key(&rows[a]).total_cmp(&key(&rows[b]))).unwrap()
    };
    let (h, jv, a) = (arg(&|r| r.0), arg(&|r| r.1), arg(&|r| -r.2));
    let detail = format!("{} grid points: argmin H {h}, argmin jv {jv}, argmax mean a {a}", grid.len());
    if grid.len() == 20 && h == jv && jv == a {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn monotone_descent() -> Verdict {
    let mut details = vec![];
    for name in ["planar-halfcircle", "traj2"] {
        let s = builtin_scenario(name).unwrap();
        let p = s.problem().unwrap();
        let t = run_virtual_operator(&p, s.grasp, s.cue, s.descent).map_err(|e| e.to_string())?;
        for w in t.records.windows(2) {
            if w[1].cost > w[0].cost * (1.0 + 1e-9) {
                return Err(format!("{name}: H rose at step {} ({} -> {})", w[1].step, w[0].cost, w[1].cost));
            }
        }
        let (first, last) = (&t.records[0], t.last());
        if last.jv_integral > first.jv_integral {
            return Err(format!("{name}: jv rose {} -> {}", first.jv_integral, last.jv_integral));
        }
        details.push(format!(
            "{name} H {:.4} -> {:.4}, jv {:.4} -> {:.4} in {} steps",
            first.cost, last.cost, first.jv_integral, last.jv_integral, last.step
        ));
    }
    Ok(details.join("; "))
}

fn guided_vs_unguided() -> Verdict {
    let opts = ExperimentOptions { runs: 6, seed: 7, ..Default::default() };
    let ratios = |name: &str| -> Result<(f64, f64), String> {
        let r = run_experiment(&builtin_scenario(name).unwrap(), &opts).map_err(|e| e.to_string())?;
        let (g, u) = (r.aggregate(RunMode::Guided).unwrap(), r.aggregate(RunMode::Unguided).unwrap());
        Ok((g.cost_mean / u.cost_mean, g.jv_mean / u.jv_mean))
    };
    let (h2, j2) = ratios("traj2")?;
    let (h3, j3) = ratios("traj3")?;
    let detail = format!("traj2 guided/unguided H {h2:.3}, jv {j2:.3}; traj3 H {h3:.3}, jv {j3:.3}");
    let near = |r: f64| (r - 1.0).abs() <= 0.1;
    if h2 <= 0.5 && j2 <= 0.7 && near(h3) && near(j3) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn singularity_divergence() -> Verdict {
    // horizontal lines y = δ pass ever closer to the base, where the folded arm is singular
    let model = ChainModel::planar2();
    let mut costs = vec![];
    for delta in [0.4, 0.2, 0.05, 0.0125, 0.003125] {
        let start = Pose::from_translation(Vector3::new(-0.5, delta, 0.0));
        let end = Pose::from_translation(Vector3::new(0.5, delta, 0.0));
        let q2 = ((0.25 + delta * delta - 2.0) / 2.0f64).acos();
        let q1 = delta.atan2(-0.5) - q2.sin().atan2(1.0 + q2.cos());
        let options = TovOptions { samples: 2001, ..TovOptions::default() };
        let p = TovProblem::new(model.clone(), ObjectPath::straight(start, end), DVector::from_vec(vec![q1, q2]), options)
            .map_err(|e| e.to_string())?;
        costs.push(p.cost(&Pose::identity()).map_err(|e| e.to_string())?.cost);
    }
    let detail = format!("H = {}", costs.iter().map(|c| format!("{c:.3e}")).collect::<Vec<_>>().join(", "));
    let tail = &costs[costs.len() - 4..];
    if tail.windows(2).all(|w| w[1] >= 2.0 * w[0]) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = vec![];
    for format in ["json", "csv"] {
        for k in 0..2 {
            let out = dir.path().join(format!("report-{k}.{format}"));
            let status = Command::new(env!("CARGO_BIN_EXE_graspcue"))
                .args(["experiment", "--scenario", "traj2", "--seed", "7", "--format", format, "--out"])
                .arg(&out)
                .status()
                .map_err(|e| e.to_string())?;
            if !status.success() {
                return Err(format!("experiment exited with {status}"));
            }
            outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
        }
    }
    if outputs[0] == outputs[1] && outputs[2] == outputs[3] && !outputs[0].is_empty() {
        Ok(format!("json {} bytes, csv {} bytes, identical across runs", outputs[0].len(), outputs[2].len()))
    } else {
        Err("reports differ between identical runs".into())
    }
}

fn kinematics_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = 1e-6;
    let (mut worst_j, mut worst_dj, mut worst_r) = (0.0f64, 0.0f64, 0.0f64);
    for model in [ChainModel::planar2(), ChainModel::generic6r()] {
        let n = model.dof();
        for _ in 0..25 {
            let q = JointVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let fk = model.forward_kinematics(&q).map_err(|e| e.to_string())?;
            let r = *fk.rotation.to_rotation().matrix();
            worst_r = worst_r.max((r.transpose() * r - nalgebra::Matrix3::identity()).norm()).max((r.determinant() - 1.0).abs());
            let j = model.geometric_jacobian(&q, JacobianFrame::Base).map_err(|e| e.to_string())?.full;
            let dj = model.jacobian_joint_partials(&q, JacobianFrame::Base).map_err(|e| e.to_string())?;
            for k in 0..n {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                let (fp, fm) = (model.forward_kinematics(&qp).unwrap(), model.forward_kinematics(&qm).unwrap());
                let v = (fp.translation - fm.translation) / (2.0 * h);
                let w = (fp.rotation * fm.rotation.conjugate()).rotation_vector() / (2.0 * h);
                let col = j.column(k);
                let e = (col.fixed_rows::<3>(0) - v).norm() + (col.fixed_rows::<3>(3) - w).norm();
                worst_j = worst_j.max(e);
                let jp = model.geometric_jacobian(&qp, JacobianFrame::Base).unwrap().full;
                let jm = model.geometric_jacobian(&qm, JacobianFrame::Base).unwrap().full;
                worst_dj = worst_dj.max(((jp - jm) / (2.0 * h) - &dj[k]).amax());
            }
        }
    }
    let mut worst_ik = 0.0f64;
    for name in BUILTIN_NAMES {
        let s = builtin_scenario(name).unwrap();
        let p = s.problem().map_err(|e| e.to_string())?;
        let disc = p.discretize(&s.grasp).map_err(|e| e.to_string())?;
        let task = p.model.task();
        for sample in &disc.samples {
            let fk = p.model.forward_kinematics(&sample.q).unwrap();
            let mut e = nalgebra::Vector6::zeros();
            e.fixed_rows_mut::<3>(0).copy_from(&(sample.ee_pose.translation - fk.translation));
            let rot = sample.ee_pose.rotation.to_rotation() * fk.rotation.to_rotation().transpose();
            e.fixed_rows_mut::<3>(3).copy_from(&rot.log());
            worst_ik = worst_ik.max(task.select(&e).norm());
        }
    }
    let detail = format!(
        "rotation orthonormality {worst_r:.1e}, J vs FD {worst_j:.1e}, dJ vs FD {worst_dj:.1e}, IK residual {worst_ik:.1e}"
    );
    if worst_r < 1e-12 && worst_j < 1e-6 && worst_dj < 1e-6 && worst_ik < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

type Criterion = (&'static str, Duration, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", Duration::from_secs(60), gradient_correctness),
        ("ellipsoid radius oracle", Duration::from_secs(10), radius_oracle),
        ("grid correspondence", Duration::from_secs(30), grid_correspondence),
        ("monotone descent", Duration::from_secs(60), monotone_descent),
        ("guided vs unguided", Duration::from_secs(300), guided_vs_unguided),
        ("singularity divergence", Duration::from_secs(10), singularity_divergence),
        ("determinism", Duration::from_secs(300), determinism),
        ("kinematics suite", Duration::from_secs(60), kinematics_suite),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let clock = Instant::now();
        let verdict = check();
        let took = clock.elapsed();
        let (pass, detail) = match verdict {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the time budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "{} {name}: {detail} ({:.1} s of {} s)",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
