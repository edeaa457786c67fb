//! Task-oriented velocity manipulability.
//!
//! For a grasp pose `x = (ᵒt_g, ᵒρ_g)` the end-effector follows
//! `ʳx_o(s) ∘ x`, the joints follow the IK solution `q(s)` and the cost is
//!
//! ```text
//! H(x) = ∫₀¹ ūᵀ (J Jᵀ)⁻¹ ū ds = ∫₀¹ 1 / a(s)² ds
//! ```
//!
//! with `ū` the unit task velocity and `a(s)` the ellipsoid radius along it.
//! The integral uses the trapezoidal rule on a uniform grid; samples whose
//! task velocity vanishes are dropped and the remaining weights rescaled.
//!
//! The gradient differentiates the integrand as
//! `2 (∂ū/∂x)ᵀ A ū + ūᵀ (∂A/∂x) ū` with `A = (J Jᵀ)⁻¹`,
//! `∂A = −A (∂J Jᵀ + J ∂Jᵀ) A` and `∂J/∂x = Σ_k ∂J/∂q_k ∂q_k/∂x`.
//! The quaternion part is the raw 4-vector; only its projection onto the
//! tangent space of S³ is meaningful.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::kinematics::{
    pseudo_inverse_blocks, ChainModel, IkOptions, JacobianFrame, JointVector, KinematicsError, TaskSpace,
    DEFAULT_SIGMA_MIN,
};
use crate::path::{discretize, DiscretizedTaskPath, ObjectPath, PathError, PathSample};
use crate::se3::{skew, Pose, Twist, UnitQuaternion};

pub type Matrix3x7 = SMatrix<f64, 3, 7>;
pub type Vector7 = SVector<f64, 7>;

/// Condition number of `J Jᵀ` at which evaluation stops.
pub const DEFAULT_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TovError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("near-singular configuration at s = {s:.4}: cond(JJᵀ) = {condition:.3e}")]
    NearSingular { s: f64, condition: f64 },
    #[error("direction is not unit (norm {0})")]
    NonUnitDirection(f64),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

impl TovError {
    /// Condition number carried by a singularity failure.
    pub fn condition(&self) -> Option<f64> {
        match self {
            TovError::NearSingular { condition, .. } => Some(*condition),
            TovError::Kinematics(KinematicsError::RankDeficient { .. }) => Some(f64::INFINITY),
            _ => None,
        }
    }
}

/// How `∂q/∂x` is obtained from the Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IkSensitivity {
    /// Solve `J ∂q = [ᵍR_o ; ᵍR_o T†] ∂x` with the square task Jacobian.
    #[default]
    Exact,
    /// `∂q/∂t = J_v† ᵒR_gᵀ`, `∂q/∂ρ = J_ω† ᵒR_gᵀ T†` with block pseudo-inverses.
    /// Only defined for spatial tasks; planar tasks fall back to [`IkSensitivity::Exact`].
    BlockPseudoInverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TovOptions {
    pub samples: usize,
    /// `λ` in `(J Jᵀ + λ² I)⁻¹`; non-zero values bias `H` and are reported.
    pub damping: f64,
    pub condition_limit: f64,
    pub sensitivity: IkSensitivity,
    pub ik: IkOptions,
}

impl Default for TovOptions {
    fn default() -> Self {
        Self {
            samples: 101,
            damping: 0.0,
            condition_limit: DEFAULT_CONDITION_LIMIT,
            sensitivity: IkSensitivity::Exact,
            ik: IkOptions::default(),
        }
    }
}

/// Cost with its per-sample breakdown; excluded samples carry `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TovValue {
    #[serde(rename = "H")]
    pub cost: f64,
    #[serde(rename = "mean_a")]
    pub mean_radius: f64,
    pub excluded: usize,
    pub damping: f64,
    pub s: Vec<f64>,
    pub a: Vec<Option<f64>>,
    pub h: Vec<Option<f64>>,
}

/// `∂H/∂ᵒx_g` split into translation and raw quaternion parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TovGradient {
    pub translation: Vector3<f64>,
    pub quaternion: Vector4<f64>,
}

impl TovGradient {
    pub fn zero() -> Self {
        Self { translation: Vector3::zeros(), quaternion: Vector4::zeros() }
    }

    pub fn combined(&self) -> Vector7 {
        Vector7::from_iterator(self.translation.iter().chain(self.quaternion.iter()).cloned())
    }

    pub fn from_combined(v: &Vector7) -> Self {
        Self {
            translation: v.fixed_rows::<3>(0).into_owned(),
            quaternion: v.fixed_rows::<4>(3).into_owned(),
        }
    }

    /// Removes the radial quaternion component at `rho`.
    pub fn tangent(&self, rho: &UnitQuaternion) -> Self {
        let c = rho.coords();
        Self { translation: self.translation, quaternion: self.quaternion - c * c.dot(&self.quaternion) }
    }

    pub fn norm(&self) -> f64 {
        self.combined().norm()
    }

    /// `‖self − reference‖ / ‖reference‖`.
    pub fn relative_error(&self, reference: &TovGradient) -> f64 {
        let d = (self.combined() - reference.combined()).norm();
        let r = reference.norm();
        if r == 0.0 {
            d
        } else {
            d / r
        }
    }
}

/// Everything the haptic loop and the explorer need about one grasp pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub value: TovValue,
    pub gradient: Option<TovGradient>,
    pub jv_integral: f64,
}

/// `∂v_g/∂x` and `∂ω_g/∂x` (columns `t_x, t_y, t_z, w, x, y, z`) in the gripper frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwistPartials {
    pub linear: Matrix3x7,
    pub angular: Matrix3x7,
}

/// Derivatives of the gripper-frame twist w.r.t. the grasp pose for a given object twist.
pub fn twist_grasp_partials(object_twist: &Twist, grasp: &Pose) -> TwistPartials {
    let r_t = grasp.rotation.to_rotation().matrix().transpose();
    let omega = object_twist.angular;
    let lever = object_twist.linear + omega.cross(&grasp.translation);
    let mut linear = Matrix3x7::zeros();
    let mut angular = Matrix3x7::zeros();
    linear.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r_t * skew(&omega)));
    for (i, dr) in grasp.rotation.rotation_partials().iter().enumerate() {
        let dr_t = dr.transpose();
        linear.fixed_view_mut::<3, 1>(0, 3 + i).copy_from(&(dr_t * lever));
        angular.fixed_view_mut::<3, 1>(0, 3 + i).copy_from(&(dr_t * omega));
    }
    TwistPartials { linear, angular }
}

fn condition_of_gram(j: &DMatrix<f64>, damping: f64) -> f64 {
    let sv = j.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    let lam2 = damping * damping;
    (max * max + lam2) / (min * min + lam2)
}

/// `(J Jᵀ + λ² I)⁻¹` with its condition number, rejecting near-singular cases.
fn inverse_gram(
    j: &DMatrix<f64>,
    damping: f64,
    condition_limit: f64,
    s: f64,
) -> Result<(DMatrix<f64>, f64), TovError> {
    let condition = condition_of_gram(j, damping);
    if condition.is_nan() || condition >= condition_limit {
        return Err(TovError::NearSingular { s, condition });
    }
    let m = j.nrows();
    let gram = j * j.transpose() + DMatrix::identity(m, m) * (damping * damping);
    let inv = gram
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(TovError::NearSingular { s, condition: f64::INFINITY })?;
    Ok((inv, condition))
}

/// Ellipsoid radius `a = (ūᵀ (J Jᵀ)⁻¹ ū)^(−1/2)` along the unit direction `ū`.
pub fn ellipsoid_radius(j: &DMatrix<f64>, direction: &DVector<f64>, condition_limit: f64) -> Result<f64, TovError> {
    let n = direction.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(TovError::NonUnitDirection(n));
    }
    let (inv, _) = inverse_gram(j, 0.0, condition_limit, f64::NAN)?;
    Ok(1.0 / direction.dot(&(inv * direction)).sqrt())
}

/// `∂(J Jᵀ)⁻¹/∂x_i` for each of the seven grasp coordinates.
///
/// `jacobian_partials[k] = ∂J/∂q_k`; `joint_sensitivity` is `∂q/∂x` (n×7).
pub fn jacobian_grasp_partials(
    jacobian: &DMatrix<f64>,
    jacobian_partials: &[DMatrix<f64>],
    joint_sensitivity: &DMatrix<f64>,
    inverse_gram: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    (0..joint_sensitivity.ncols())
        .map(|i| {
            let mut dj = DMatrix::zeros(jacobian.nrows(), jacobian.ncols());
            for (k, djk) in jacobian_partials.iter().enumerate() {
                dj += djk * joint_sensitivity[(k, i)];
            }
            let dgram = &dj * jacobian.transpose() + jacobian * dj.transpose();
            -(inverse_gram * dgram * inverse_gram)
        })
        .collect()
}

/// Trapezoidal weights on `n` uniform samples of `[0, 1]`.
pub fn trapezoid_weights(n: usize) -> Vec<f64> {
    let step = 1.0 / (n - 1) as f64;
    (0..n).map(|k| if k == 0 || k + 1 == n { 0.5 * step } else { step }).collect()
}

struct SampleTerms {
    h: Option<f64>,
    grad: Option<Vector7>,
    jv: f64,
}

/// A fixed robot, object path and IK seed; the grasp pose is the free variable.
#[derive(Debug, Clone, PartialEq)]
pub struct TovProblem {
    pub model: ChainModel,
    pub path: ObjectPath,
    pub q0: JointVector,
    pub options: TovOptions,
}

impl TovProblem {
    pub fn new(model: ChainModel, path: ObjectPath, q0: JointVector, options: TovOptions) -> Result<Self, TovError> {
        model.validate()?;
        if q0.len() != model.dof() {
            return Err(KinematicsError::DimensionMismatch { expected: model.dof(), got: q0.len() }.into());
        }
        if options.samples < 2 {
            return Err(TovError::InvalidOptions(format!("sample count {} below 2", options.samples)));
        }
        if options.damping.is_nan() || options.damping < 0.0 {
            return Err(TovError::InvalidOptions("damping must be non-negative".into()));
        }
        Ok(Self { model, path, q0, options })
    }

    pub fn discretize(&self, grasp: &Pose) -> Result<DiscretizedTaskPath, TovError> {
        Ok(discretize(&self.path, grasp, &self.model, self.options.samples, &self.q0, &self.options.ik)?)
    }

    pub fn cost(&self, grasp: &Pose) -> Result<TovValue, TovError> {
        Ok(self.evaluate(grasp, false)?.value)
    }

    pub fn gradient(&self, grasp: &Pose) -> Result<(TovValue, TovGradient), TovError> {
        let e = self.evaluate(grasp, true)?;
        Ok((e.value, e.gradient.expect("gradient requested")))
    }

    /// Central differences of [`TovProblem::cost`]; see [`fd_gradient_of`].
    pub fn fd_gradient(&self, grasp: &Pose, step: f64) -> Result<TovGradient, TovError> {
        fd_gradient_of(|g| self.cost(g).map(|v| v.cost), grasp, step)
    }

    /// Richardson extrapolation `(4 D(h/2) − D(h)) / 3` of central differences,
    /// accurate to `O(h⁴)` where `H` curves sharply near singularities.
    pub fn fd_gradient_extrapolated(&self, grasp: &Pose, step: f64) -> Result<TovGradient, TovError> {
        let coarse = self.fd_gradient(grasp, step)?.combined();
        let fine = self.fd_gradient(grasp, 0.5 * step)?.combined();
        Ok(TovGradient::from_combined(&((fine * 4.0 - coarse) / 3.0)))
    }

    /// Cost, joint-velocity integral and, optionally, the analytic gradient.
    pub fn evaluate(&self, grasp: &Pose, with_gradient: bool) -> Result<Evaluation, TovError> {
        let disc = self.discretize(grasp)?;
        let terms = self.sample_terms(&disc, grasp, with_gradient)?;
        let weights = trapezoid_weights(disc.len());

        let valid_weight: f64 = terms.iter().zip(&weights).filter(|(t, _)| t.h.is_some()).map(|(_, w)| w).sum();
        let scale = if valid_weight > 0.0 { 1.0 / valid_weight } else { 0.0 };
        let mut cost = 0.0;
        let mut mean_radius = 0.0;
        let mut grad = Vector7::zeros();
        let mut jv = 0.0;
        for (t, w) in terms.iter().zip(&weights) {
            jv += w * t.jv;
            if let Some(h) = t.h {
                cost += w * scale * h;
                mean_radius += w * scale / h.sqrt();
            }
            if let Some(g) = &t.grad {
                grad += g * (w * scale);
            }
        }
        let value = TovValue {
            cost,
            mean_radius,
            excluded: terms.iter().filter(|t| t.h.is_none()).count(),
            damping: self.options.damping,
            s: disc.samples.iter().map(|s| s.s).collect(),
            a: terms.iter().map(|t| t.h.map(|h| 1.0 / h.sqrt())).collect(),
            h: terms.iter().map(|t| t.h).collect(),
        };
        Ok(Evaluation {
            value,
            gradient: with_gradient.then(|| TovGradient::from_combined(&grad)),
            jv_integral: jv,
        })
    }

    /// `‖dq/ds‖` at every sample, from `J⁻¹ u`.
    pub fn joint_speeds(&self, disc: &DiscretizedTaskPath) -> Result<Vec<f64>, TovError> {
        disc.samples
            .iter()
            .map(|sample| {
                let j = self.model.task_jacobian(&sample.q)?;
                self.solve_jacobian(&j, &DMatrix::from_column_slice(sample.task_velocity.len(), 1, sample.task_velocity.as_slice()), sample.s)
                    .map(|dq| dq.norm())
            })
            .collect()
    }

    fn sample_terms(
        &self,
        disc: &DiscretizedTaskPath,
        grasp: &Pose,
        with_gradient: bool,
    ) -> Result<Vec<SampleTerms>, TovError> {
        let f = |sample: &PathSample| self.sample(disc.task, sample, grasp, with_gradient);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            disc.samples.par_iter().map(f).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            disc.samples.iter().map(f).collect()
        }
    }

    fn solve_jacobian(&self, j: &DMatrix<f64>, rhs: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>, TovError> {
        j.clone().lu().solve(rhs).ok_or(TovError::NearSingular { s, condition: f64::INFINITY })
    }

    fn sample(
        &self,
        task: TaskSpace,
        sample: &PathSample,
        grasp: &Pose,
        with_gradient: bool,
    ) -> Result<SampleTerms, TovError> {
        if !sample.valid {
            return Ok(SampleTerms { h: None, grad: None, jv: 0.0 });
        }
        let j = self.model.task_jacobian(&sample.q)?;
        let (inv_gram, _) = inverse_gram(&j, self.options.damping, self.options.condition_limit, sample.s)?;
        let u = &sample.task_velocity;
        let speed = u.norm();
        let ubar = u / speed;
        let a_ubar = &inv_gram * &ubar;
        let h = ubar.dot(&a_ubar);
        let jv = self
            .solve_jacobian(&j, &DMatrix::from_column_slice(u.len(), 1, u.as_slice()), sample.s)?
            .norm();
        if !with_gradient {
            return Ok(SampleTerms { h: Some(h), grad: None, jv });
        }

        let du = task_velocity_partials(task, sample, grasp);
        let m = u.len();
        let proj = (DMatrix::identity(m, m) - &ubar * ubar.transpose()) / speed;
        let dubar = proj * du;
        let dq = self.joint_sensitivity(task, sample, grasp, &j)?;
        let dj = self.model.task_jacobian_partials(&sample.q)?;
        let dinv = jacobian_grasp_partials(&j, &dj, &dq, &inv_gram);
        let grad = Vector7::from_fn(|i, _| {
            2.0 * dubar.column(i).dot(&a_ubar) + ubar.dot(&(&dinv[i] * &ubar))
        });
        Ok(SampleTerms { h: Some(h), grad: Some(grad), jv })
    }

    /// `∂q/∂x` (n×7) at one sample.
    fn joint_sensitivity(
        &self,
        task: TaskSpace,
        sample: &PathSample,
        grasp: &Pose,
        j: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, TovError> {
        // rotation from the object frame into the task frame
        let to_task: Matrix3<f64> = match task {
            TaskSpace::Spatial => grasp.rotation.to_rotation().matrix().transpose(),
            _ => *sample.object_pose.rotation.to_rotation().matrix(),
        };
        let t_pinv = grasp.rotation.rate_map_pinv();
        if task == TaskSpace::Spatial && self.options.sensitivity == IkSensitivity::BlockPseudoInverse {
            let blocks = self.model.geometric_jacobian(&sample.q, JacobianFrame::EndEffector)?;
            let (jv_pinv, jw_pinv) = pseudo_inverse_blocks(&blocks, DEFAULT_SIGMA_MIN)?;
            let n = self.model.dof();
            let mut dq = DMatrix::zeros(n, 7);
            dq.view_mut((0, 0), (n, 3)).copy_from(&(jv_pinv * to_task));
            dq.view_mut((0, 3), (n, 4)).copy_from(&(jw_pinv * to_task * t_pinv));
            return Ok(dq);
        }
        let mut rhs6 = SMatrix::<f64, 6, 7>::zeros();
        rhs6.fixed_view_mut::<3, 3>(0, 0).copy_from(&to_task);
        rhs6.fixed_view_mut::<3, 4>(3, 3).copy_from(&(to_task * t_pinv));
        let rows = task.rows();
        let rhs = DMatrix::from_fn(rows.len(), 7, |i, c| rhs6[(rows[i], c)]);
        self.solve_jacobian(j, &rhs, sample.s)
    }
}

/// `∂u/∂x` (m×7) for the task velocity stored on `sample`.
fn task_velocity_partials(task: TaskSpace, sample: &PathSample, grasp: &Pose) -> DMatrix<f64> {
    let mut full = SMatrix::<f64, 6, 7>::zeros();
    match task {
        TaskSpace::Spatial => {
            let p = twist_grasp_partials(&sample.object_twist, grasp);
            full.fixed_view_mut::<3, 7>(0, 0).copy_from(&p.linear);
            full.fixed_view_mut::<3, 7>(3, 0).copy_from(&p.angular);
        }
        TaskSpace::PlanarPosition | TaskSpace::PlanarPose => {
            let r_o = sample.object_pose.rotation.to_rotation();
            full.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r_o.matrix() * skew(&sample.object_twist.angular)));
        }
    }
    let rows = task.rows();
    DMatrix::from_fn(rows.len(), 7, |i, c| full[(rows[i], c)])
}

/// Central differences of `f` around `grasp`.
///
/// Translation coordinates are perturbed directly. Quaternion coordinates are
/// perturbed on the raw 4-vector and renormalized, which yields the tangent
/// projection of the gradient.
pub fn fd_gradient_of<E>(
    f: impl Fn(&Pose) -> Result<f64, E>,
    grasp: &Pose,
    step: f64,
) -> Result<TovGradient, E> {
    let mut g = TovGradient::zero();
    for i in 0..3 {
        let mut plus = *grasp;
        let mut minus = *grasp;
        plus.translation[i] += step;
        minus.translation[i] -= step;
        g.translation[i] = (f(&plus)? - f(&minus)?) / (2.0 * step);
    }
    let c = grasp.rotation.coords();
    for i in 0..4 {
        let e = Vector4::ith(i, step);
        let plus = Pose::new(grasp.translation, UnitQuaternion::normalize(c + e).expect("small step"));
        let minus = Pose::new(grasp.translation, UnitQuaternion::normalize(c - e).expect("small step"));
        g.quaternion[i] = (f(&plus)? - f(&minus)?) / (2.0 * step);
    }
    Ok(g)
}
