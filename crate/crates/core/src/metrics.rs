//! Joint-velocity integral `∫₀¹ ‖dq/ds‖ ds` along the IK solution.

use crate::kinematics::solve_pose;
use crate::path::grasp_composed_pose;
use crate::se3::Pose;
use crate::tov::{trapezoid_weights, TovError, TovProblem};

/// Parameter step of [`joint_velocity_integral_fd`].
pub const FD_STEP: f64 = 1e-6;

/// `‖dq/ds‖ = ‖J⁻¹ u‖` integrated with the trapezoidal rule.
pub fn joint_velocity_integral(problem: &TovProblem, grasp: &Pose) -> Result<f64, TovError> {
    let disc = problem.discretize(grasp)?;
    let speeds = problem.joint_speeds(&disc)?;
    Ok(speeds.iter().zip(trapezoid_weights(disc.len())).map(|(v, w)| v * w).sum())
}

/// Same integral with `dq/ds` from extra IK solves at `s + ε` and `s + 2ε`
/// (second-order one-sided differences, backwards at `s = 1`).
pub fn joint_velocity_integral_fd(problem: &TovProblem, grasp: &Pose, eps: f64) -> Result<f64, TovError> {
    let disc = problem.discretize(grasp)?;
    let weights = trapezoid_weights(disc.len());
    let mut total = 0.0;
    for (sample, w) in disc.samples.iter().zip(weights) {
        let h = if sample.s + 2.0 * eps <= 1.0 { eps } else { -eps };
        let solve = |s: f64| -> Result<_, TovError> {
            let target = grasp_composed_pose(&problem.path, s, grasp)?;
            Ok(solve_pose(&problem.model, &target, &sample.q, &problem.options.ik)?)
        };
        let q1 = solve(sample.s + h)?;
        let q2 = solve(sample.s + 2.0 * h)?;
        let dq = (&q1 * 4.0 - &sample.q * 3.0 - q2) / (2.0 * h);
        total += w * dq.norm();
    }
    Ok(total)
}
