use graspcue_core::kinematics::{ChainModel, JointSpec, JointVector};
use graspcue_core::path::ObjectPath;
use graspcue_core::se3::{Pose, UnitQuaternion};
use graspcue_core::tov::{IkSensitivity, TovError, TovOptions, TovProblem};
use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> UnitQuaternion {
    UnitQuaternion::from_axis_angle(&random_unit(rng), rng.random_range(0.0..max_angle))
}

/// Object path whose start puts the arm at `q_home` for `grasp`.
fn spatial_problem(rng: &mut impl Rng, options: TovOptions) -> (TovProblem, Pose) {
    let model = ChainModel::generic6r();
    let q_home = JointVector::from_vec(vec![
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.2..0.4),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.8..0.8),
        rng.random_range(0.6..1.4) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        rng.random_range(-1.0..1.0),
    ]);
    let grasp = Pose::new(
        Vector3::from_fn(|_, _| rng.random_range(-0.12..0.12)),
        random_rotation(rng, 2.5),
    );
    let start = model.forward_kinematics(&q_home).unwrap() * grasp.inverse();
    let shift = Vector3::from_fn(|_, _| rng.random_range(-0.12..0.12));
    let turn = random_rotation(rng, 1.2);
    let end = Pose::new(start.translation + shift, turn * start.rotation);
    let problem = TovProblem::new(model, ObjectPath::straight(start, end), q_home, options).unwrap();
    (problem, grasp)
}

fn max_condition(problem: &TovProblem, grasp: &Pose) -> Result<f64, TovError> {
    let disc = problem.discretize(grasp)?;
    let mut worst: f64 = 0.0;
    for s in &disc.samples {
        let j = problem.model.task_jacobian(&s.q)?;
        let sv = j.singular_values();
        worst = worst.max((sv.max() / sv.min()).powi(2));
    }
    Ok(worst)
}

#[test]
fn spatial_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let options = TovOptions { samples: 41, ..TovOptions::default() };
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 30 {
        attempts += 1;
        assert!(attempts < 300, "too few well-conditioned random problems");
        let (problem, grasp) = spatial_problem(&mut rng, options);
        match max_condition(&problem, &grasp) {
            Ok(c) if c < 1e6 => {}
            _ => continue,
        }
        let Ok((_, analytic)) = problem.gradient(&grasp) else { continue };
        let fd = problem.fd_gradient(&grasp, 1e-6).unwrap();
        let err = analytic.tangent(&grasp.rotation).relative_error(&fd);
        assert!(err < 1e-4, "relative error {err:e} at attempt {attempts}");
        checked += 1;
    }
}

#[test]
fn block_pseudo_inverse_sensitivity_deviates_from_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let exact = TovOptions { samples: 21, ..TovOptions::default() };
    let block = TovOptions { sensitivity: IkSensitivity::BlockPseudoInverse, ..exact };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 5 {
        let (mut problem, grasp) = spatial_problem(&mut rng, exact);
        if !matches!(max_condition(&problem, &grasp), Ok(c) if c < 1e6) {
            continue;
        }
        let fd = problem.fd_gradient(&grasp, 1e-6).unwrap();
        problem.options = block;
        let (_, g) = problem.gradient(&grasp).unwrap();
        worst = worst.max(g.tangent(&grasp.rotation).relative_error(&fd));
        checked += 1;
    }
    assert!(worst > 1e-2, "block pseudo-inverses unexpectedly exact: {worst:e}");
}

fn planar_problem(path: ObjectPath, q0: [f64; 2]) -> TovProblem {
    TovProblem::new(ChainModel::planar2(), path, DVector::from_row_slice(&q0), TovOptions::default()).unwrap()
}

#[test]
fn planar_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut checked = 0;
    while checked < 30 {
        let q0 = [rng.random_range(-1.0..1.0), rng.random_range(0.6..2.2)];
        let grasp = Pose::new(
            Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0),
            UnitQuaternion::from_axis_angle(&Vector3::z(), rng.random_range(-3.0..3.0)),
        );
        let model = ChainModel::planar2();
        let start = model.forward_kinematics(&DVector::from_row_slice(&q0)).unwrap() * grasp.inverse();
        let end = Pose::new(
            start.translation + Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0),
            UnitQuaternion::from_axis_angle(&Vector3::z(), rng.random_range(-1.0..1.0)) * start.rotation,
        );
        let problem = planar_problem(ObjectPath::straight(start, end), q0);
        if !matches!(max_condition(&problem, &grasp), Ok(c) if c < 1e6) {
            continue;
        }
        let (_, analytic) = problem.gradient(&grasp).unwrap();
        let fd = problem.fd_gradient(&grasp, 1e-6).unwrap();
        let err = analytic.tangent(&grasp.rotation).relative_error(&fd);
        assert!(err < 1e-4, "relative error {err:e}");
        // the planar position task ignores the grasp orientation
        assert!(analytic.quaternion.norm() < 1e-12);
        checked += 1;
    }
}

#[test]
fn translation_gradient_on_pure_translation_comes_from_the_jacobian_alone() {
    // with ω_o = 0 the task velocity does not depend on the grasp translation,
    // so the whole translation block flows through ∂(JJᵀ)⁻¹
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (problem, grasp) = spatial_problem(&mut rng, TovOptions { samples: 21, ..TovOptions::default() });
    let start = problem.path.pose_at(0.0).unwrap();
    let end = Pose::new(start.translation + Vector3::new(0.0, 0.1, 0.05), start.rotation);
    let translating = TovProblem { path: ObjectPath::straight(start, end), ..problem };
    let disc = translating.discretize(&grasp).unwrap();
    let u0 = disc.samples[0].task_velocity.clone();
    let mut shifted = grasp;
    shifted.translation += Vector3::new(0.03, -0.02, 0.01);
    let u1 = translating.discretize(&shifted).unwrap().samples[0].task_velocity.clone();
    assert!((u0 - u1).norm() < 1e-14);

    let (_, g) = translating.gradient(&grasp).unwrap();
    let fd = translating.fd_gradient(&grasp, 1e-6).unwrap();
    assert!((g.translation - fd.translation).norm() < 1e-4 * fd.translation.norm());
    assert!(g.translation.norm() > 1e-6);
}

#[test]
fn fd_step_sensitivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut checked = 0;
    while checked < 5 {
        let (problem, grasp) = spatial_problem(&mut rng, TovOptions { samples: 21, ..TovOptions::default() });
        if !matches!(max_condition(&problem, &grasp), Ok(c) if c < 1e6) {
            continue;
        }
        let coarse = problem.fd_gradient(&grasp, 1e-5).unwrap();
        let fine = problem.fd_gradient(&grasp, 1e-7).unwrap();
        assert!(fine.relative_error(&coarse) < 1e-4);
        checked += 1;
    }
}

#[test]
fn isotropic_chain_has_unit_cost() {
    // a 2R arm with l1 = √2·l2 and q2 = 3π/4 has JJᵀ = l2²·I; the path keeps
    // q2 fixed by spinning the whole arm about the base
    let l2 = 1.0;
    let link = |a: f64| JointSpec { a, alpha: 0.0, d: 0.0, theta0: 0.0, limits: [-7.0, 7.0] };
    let model = ChainModel::new("isotropic", vec![link(2f64.sqrt() * l2), link(l2)]).unwrap();
    let q0 = DVector::from_vec(vec![0.0, 3.0 * std::f64::consts::FRAC_PI_4]);
    let tip = model.forward_kinematics(&q0).unwrap().translation;
    let start = Pose::identity();
    let end = Pose::new(Vector3::zeros(), UnitQuaternion::from_axis_angle(&Vector3::z(), 0.8));
    let problem = TovProblem::new(model, ObjectPath::straight(start, end), q0, TovOptions::default()).unwrap();
    let value = problem.cost(&Pose::from_translation(tip)).unwrap();
    assert!((value.cost - 1.0).abs() < 1e-9, "H = {}", value.cost);
    assert_eq!(value.excluded, 0);
}

#[test]
fn cost_is_independent_of_path_speed() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let (problem, grasp) = spatial_problem(&mut rng, TovOptions::default());
    let start = problem.path.pose_at(0.0).unwrap();
    let end = problem.path.pose_at(1.0).unwrap();
    // same geometry with the midpoint keyframe moved in s
    let mid = problem.path.pose_at(0.5).unwrap();
    let h1 = problem.cost(&grasp).unwrap().cost;
    let split = TovProblem {
        path: ObjectPath::new(vec![
            graspcue_core::path::Keyframe { s: 0.0, pose: start },
            graspcue_core::path::Keyframe { s: 0.5, pose: mid },
            graspcue_core::path::Keyframe { s: 1.0, pose: end },
        ])
        .unwrap(),
        ..problem.clone()
    };
    let h2 = split.cost(&grasp).unwrap().cost;
    assert!((h1 - h2).abs() < 1e-9 * h1);
}

#[test]
fn cost_grows_without_bound_towards_a_singularity() {
    // lines y = δ sweep past the base, where the folded arm (q2 = π) is singular
    let model = ChainModel::planar2();
    let mut costs = Vec::new();
    for delta in [0.2, 0.05, 0.0125, 0.003125] {
        let start = Pose::from_translation(Vector3::new(-0.5, delta, 0.0));
        let end = Pose::from_translation(Vector3::new(0.5, delta, 0.0));
        let r2: f64 = 0.25 + delta * delta;
        let q2 = ((r2 - 2.0) / 2.0).acos();
        let q1 = delta.atan2(-0.5) - q2.sin().atan2(1.0 + q2.cos());
        let options = TovOptions { samples: 2001, ..TovOptions::default() };
        let problem =
            TovProblem::new(model.clone(), ObjectPath::straight(start, end), DVector::from_vec(vec![q1, q2]), options)
                .unwrap();
        costs.push(problem.cost(&Pose::identity()).unwrap().cost);
    }
    for w in costs.windows(2) {
        assert!(w[1] > 2.0 * w[0], "{costs:?}");
    }
}

#[test]
fn extrapolated_differences_beat_plain_ones_near_a_singularity() {
    // error of plain central differences scales with h², the extrapolated one far below
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let options = TovOptions { samples: 41, ..TovOptions::default() };
    let mut checked = 0;
    while checked < 5 {
        let (problem, grasp) = spatial_problem(&mut rng, options);
        if !matches!(max_condition(&problem, &grasp), Ok(c) if c < 1e6) {
            continue;
        }
        let (_, g) = problem.gradient(&grasp).unwrap();
        let g = g.tangent(&grasp.rotation);
        let plain = g.relative_error(&problem.fd_gradient(&grasp, 1e-4).unwrap());
        let extrapolated = g.relative_error(&problem.fd_gradient_extrapolated(&grasp, 1e-4).unwrap());
        assert!(extrapolated < plain, "{extrapolated:e} vs {plain:e}");
        checked += 1;
    }
}
