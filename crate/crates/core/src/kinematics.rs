//! Serial revolute chains described by standard Denavit–Hartenberg parameters:
//! forward kinematics, the geometric Jacobian in base or end-effector frame,
//! its analytic joint partials, block pseudo-inverses, and damped
//! least-squares path tracking.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Matrix6xX, MatrixXx3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::se3::{Pose, Rotation, UnitQuaternion};

pub type JointVector = DVector<f64>;

/// Smallest singular value accepted by [`pseudo_inverse_blocks`].
pub const DEFAULT_SIGMA_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KinematicsError {
    #[error("joint vector has length {got}, model has {expected} joints")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Jacobian block is rank deficient (smallest singular value {sigma:.3e})")]
    RankDeficient { sigma: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("path sample {index} unreachable (position error {position_error:.3e} m, orientation error {orientation_error:.3e} rad)")]
    Unreachable { index: usize, position_error: f64, orientation_error: f64 },
    #[error("path sample {index}: joint {joint} at {value:.4} rad leaves its limits")]
    JointLimit { index: usize, joint: usize, value: f64 },
    #[error("path sample {index}: joint step {step:.4} rad exceeds the continuity bound")]
    BranchJump { index: usize, step: f64 },
}

/// One revolute joint: `Rz(θ0 + q) · Tz(d) · Tx(a) · Rx(α)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta0: f64,
    pub limits: [f64; 2],
}

impl JointSpec {
    fn transform(&self, q: f64) -> (Matrix3<f64>, Vector3<f64>) {
        let (st, ct) = (self.theta0 + q).sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        let r = Matrix3::new(ct, -st * ca, st * sa, st, ct * ca, -ct * sa, 0.0, sa, ca);
        (r, Vector3::new(self.a * ct, self.a * st, self.d))
    }
}

/// Which end-effector velocity components the task constrains.
///
/// Planar tasks are expressed in the base frame; the spatial task uses the
/// end-effector frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSpace {
    /// Full twist `(v, ω)`, 6 rows.
    Spatial,
    /// `(v_x, v_y)` in the base frame.
    PlanarPosition,
    /// `(v_x, v_y, ω_z)` in the base frame.
    PlanarPose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianFrame {
    Base,
    EndEffector,
}

impl TaskSpace {
    pub fn rows(&self) -> &'static [usize] {
        match self {
            TaskSpace::Spatial => &[0, 1, 2, 3, 4, 5],
            TaskSpace::PlanarPosition => &[0, 1],
            TaskSpace::PlanarPose => &[0, 1, 5],
        }
    }

    pub fn dim(&self) -> usize {
        self.rows().len()
    }

    pub fn frame(&self) -> JacobianFrame {
        match self {
            TaskSpace::Spatial => JacobianFrame::EndEffector,
            _ => JacobianFrame::Base,
        }
    }

    fn for_joint_count(n: usize) -> Option<Self> {
        match n {
            2 => Some(TaskSpace::PlanarPosition),
            3 => Some(TaskSpace::PlanarPose),
            6 => Some(TaskSpace::Spatial),
            _ => None,
        }
    }

    /// Picks the task rows out of a stacked 6-vector.
    pub fn select(&self, v: &Vector6<f64>) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.rows().iter().map(|&r| v[r]))
    }

    /// Picks the task rows out of a 6×k matrix.
    pub fn select_rows(&self, m: &Matrix6xX<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim(), m.ncols(), |i, j| m[(self.rows()[i], j)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainModel {
    pub name: String,
    pub joints: Vec<JointSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task: Option<TaskSpace>,
}

/// Geometric Jacobian `[J_v; J_ω]` with the frame it is expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlocks {
    pub full: Matrix6xX<f64>,
    pub frame: JacobianFrame,
}

impl JacobianBlocks {
    pub fn linear(&self) -> Matrix3xX<f64> {
        self.full.fixed_rows::<3>(0).into_owned()
    }

    pub fn angular(&self) -> Matrix3xX<f64> {
        self.full.fixed_rows::<3>(3).into_owned()
    }
}

impl ChainModel {
    pub fn new(name: impl Into<String>, joints: Vec<JointSpec>) -> Result<Self, KinematicsError> {
        let model = Self { name: name.into(), joints, task: None };
        model.validate()?;
        Ok(model)
    }

    pub fn with_task(mut self, task: TaskSpace) -> Result<Self, KinematicsError> {
        self.task = Some(task);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let n = self.joints.len();
        if !(2..=6).contains(&n) {
            return Err(KinematicsError::InvalidModel(format!("joint count {n} outside [2, 6]")));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let finite = [j.a, j.alpha, j.d, j.theta0, j.limits[0], j.limits[1]].iter().all(|v| v.is_finite());
            if !finite {
                return Err(KinematicsError::InvalidModel(format!("joint {i} has non-finite parameters")));
            }
            if j.limits[0] >= j.limits[1] {
                return Err(KinematicsError::InvalidModel(format!("joint {i} limits are not ordered")));
            }
        }
        match self.task {
            Some(t) if t.dim() != n => Err(KinematicsError::InvalidModel(format!(
                "task dimension {} differs from joint count {n}",
                t.dim()
            ))),
            None if TaskSpace::for_joint_count(n).is_none() => Err(KinematicsError::InvalidModel(format!(
                "no non-redundant task space for {n} joints"
            ))),
            _ => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let model: ChainModel =
            serde_json::from_str(text).map_err(|e| KinematicsError::InvalidModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KinematicsError::InvalidModel(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Built-in models: `planar2` and `generic6r`.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "planar2" => Some(Self::planar2()),
            "generic6r" => Some(Self::generic6r()),
            _ => None,
        }
    }

    /// Two unit links, both joints about the base z axis.
    pub fn planar2() -> Self {
        let link = JointSpec { a: 1.0, alpha: 0.0, d: 0.0, theta0: 0.0, limits: [-PI, PI] };
        Self { name: "planar2".into(), joints: vec![link; 2], task: None }
    }

    /// Anthropomorphic 6R arm with a spherical wrist.
    ///
    /// | joint | a (m) | α (rad) | d (m) | θ0 (rad) |
    /// |-------|-------|---------|-------|----------|
    /// | 1     | 0.075 | −π/2    | 0.335 | 0        |
    /// | 2     | 0.365 | 0       | 0     | −π/2     |
    /// | 3     | 0.090 | −π/2    | 0     | 0        |
    /// | 4     | 0     | π/2     | 0.405 | 0        |
    /// | 5     | 0     | −π/2    | 0     | 0        |
    /// | 6     | 0     | 0       | 0.080 | 0        |
    pub fn generic6r() -> Self {
        let j = |a: f64, alpha: f64, d: f64, theta0: f64, lo: f64, hi: f64| JointSpec {
            a,
            alpha,
            d,
            theta0,
            limits: [lo, hi],
        };
        Self {
            name: "generic6r".into(),
            joints: vec![
                j(0.075, -FRAC_PI_2, 0.335, 0.0, -PI, PI),
                j(0.365, 0.0, 0.0, -FRAC_PI_2, -PI, PI),
                j(0.090, -FRAC_PI_2, 0.0, 0.0, -PI, PI),
                j(0.0, FRAC_PI_2, 0.405, 0.0, -2.0 * PI, 2.0 * PI),
                j(0.0, -FRAC_PI_2, 0.0, 0.0, -2.5, 2.5),
                j(0.0, 0.0, 0.080, 0.0, -2.0 * PI, 2.0 * PI),
            ],
            task: None,
        }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn task(&self) -> TaskSpace {
        self.task
            .or_else(|| TaskSpace::for_joint_count(self.dof()))
            .expect("validated model has a task space")
    }

    fn check(&self, q: &JointVector) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch { expected: self.dof(), got: q.len() });
        }
        Ok(())
    }

    /// Frames `0..=n` in the base frame; frame 0 is the base itself.
    fn frames(&self, q: &JointVector) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
        let mut out = Vec::with_capacity(self.dof() + 1);
        let (mut r, mut p) = (Matrix3::identity(), Vector3::zeros());
        out.push((r, p));
        for (spec, &qi) in self.joints.iter().zip(q.iter()) {
            let (ri, pi) = spec.transform(qi);
            p += r * pi;
            r *= ri;
            out.push((r, p));
        }
        out
    }

    /// Origins of every link frame, base first, end effector last.
    pub fn joint_positions(&self, q: &JointVector) -> Result<Vec<Vector3<f64>>, KinematicsError> {
        self.check(q)?;
        Ok(self.frames(q).into_iter().map(|(_, p)| p).collect())
    }

    /// End-effector pose in the base frame.
    pub fn forward_kinematics(&self, q: &JointVector) -> Result<Pose, KinematicsError> {
        self.check(q)?;
        let (r, p) = *self.frames(q).last().expect("at least the base frame");
        Ok(Pose::new(p, UnitQuaternion::from_rotation(&Rotation::from_matrix_unchecked(r))))
    }

    fn base_jacobian(frames: &[(Matrix3<f64>, Vector3<f64>)]) -> Matrix6xX<f64> {
        let n = frames.len() - 1;
        let pe = frames[n].1;
        let mut j = Matrix6xX::zeros(n);
        for (i, (r, p)) in frames[..n].iter().enumerate() {
            let z = r.column(2).into_owned();
            j.fixed_view_mut::<3, 1>(0, i).copy_from(&z.cross(&(pe - p)));
            j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        j
    }

    fn rotate_blocks(r_t: &Matrix3<f64>, j: &Matrix6xX<f64>) -> Matrix6xX<f64> {
        let mut out = Matrix6xX::zeros(j.ncols());
        out.fixed_rows_mut::<3>(0).copy_from(&(r_t * j.fixed_rows::<3>(0)));
        out.fixed_rows_mut::<3>(3).copy_from(&(r_t * j.fixed_rows::<3>(3)));
        out
    }

    /// Geometric Jacobian mapping joint rates to the end-effector twist in `frame`.
    pub fn geometric_jacobian(&self, q: &JointVector, frame: JacobianFrame) -> Result<JacobianBlocks, KinematicsError> {
        self.check(q)?;
        let frames = self.frames(q);
        let jb = Self::base_jacobian(&frames);
        let full = match frame {
            JacobianFrame::Base => jb,
            JacobianFrame::EndEffector => Self::rotate_blocks(&frames[self.dof()].0.transpose(), &jb),
        };
        Ok(JacobianBlocks { full, frame })
    }

    /// `∂J/∂q_k` for every joint `k`, computed from the chain geometry.
    pub fn jacobian_joint_partials(
        &self,
        q: &JointVector,
        frame: JacobianFrame,
    ) -> Result<Vec<Matrix6xX<f64>>, KinematicsError> {
        self.check(q)?;
        let n = self.dof();
        let frames = self.frames(q);
        let pe = frames[n].1;
        let axes: Vec<Vector3<f64>> = frames[..n].iter().map(|(r, _)| r.column(2).into_owned()).collect();
        let origins: Vec<Vector3<f64>> = frames[..n].iter().map(|(_, p)| *p).collect();

        let mut base = vec![Matrix6xX::zeros(n); n];
        for (k, dk) in base.iter_mut().enumerate() {
            let zk = axes[k];
            for i in 0..n {
                let zi = axes[i];
                let (dv, dw) = if k < i {
                    let dz = zk.cross(&zi);
                    let lever = pe - origins[i];
                    (dz.cross(&lever) + zi.cross(&zk.cross(&lever)), dz)
                } else {
                    (zi.cross(&zk.cross(&(pe - origins[k]))), Vector3::zeros())
                };
                dk.fixed_view_mut::<3, 1>(0, i).copy_from(&dv);
                dk.fixed_view_mut::<3, 1>(3, i).copy_from(&dw);
            }
        }
        if frame == JacobianFrame::Base {
            return Ok(base);
        }

        // J_ee = blkdiag(Rᵀ) J_b with ∂Rᵀ/∂q_k = −Rᵀ [z_k]×
        let r_t = frames[n].0.transpose();
        let jb = Self::base_jacobian(&frames);
        Ok(base
            .iter()
            .zip(axes.iter())
            .map(|(dk, zk)| {
                let dr_t = -r_t * crate::se3::skew(zk);
                Self::rotate_blocks(&r_t, dk) + Self::rotate_blocks(&dr_t, &jb)
            })
            .collect())
    }

    /// Task-row Jacobian in the task's frame (square for valid models).
    pub fn task_jacobian(&self, q: &JointVector) -> Result<DMatrix<f64>, KinematicsError> {
        let task = self.task();
        let jb = self.geometric_jacobian(q, task.frame())?;
        Ok(task.select_rows(&jb.full))
    }

    /// `∂J_task/∂q_k` for every joint.
    pub fn task_jacobian_partials(&self, q: &JointVector) -> Result<Vec<DMatrix<f64>>, KinematicsError> {
        let task = self.task();
        Ok(self
            .jacobian_joint_partials(q, task.frame())?
            .iter()
            .map(|d| task.select_rows(d))
            .collect())
    }

    pub fn within_limits(&self, q: &JointVector) -> Option<usize> {
        self.joints
            .iter()
            .zip(q.iter())
            .position(|(j, &v)| v < j.limits[0] || v > j.limits[1])
    }
}

/// Right pseudo-inverses `(J_v†, J_ω†)` of the two 3×n Jacobian blocks.
pub fn pseudo_inverse_blocks(
    j: &JacobianBlocks,
    sigma_min: f64,
) -> Result<(MatrixXx3<f64>, MatrixXx3<f64>), KinematicsError> {
    let pinv = |block: Matrix3xX<f64>| -> Result<MatrixXx3<f64>, KinematicsError> {
        let block = DMatrix::from_column_slice(3, block.ncols(), block.as_slice());
        let svd = block.clone().svd(true, true);
        let sigma = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        if block.ncols() < 3 || sigma < sigma_min {
            return Err(KinematicsError::RankDeficient { sigma: if block.ncols() < 3 { 0.0 } else { sigma } });
        }
        let p = svd.pseudo_inverse(0.0).expect("svd computed with both factors");
        Ok(MatrixXx3::from_fn(p.nrows(), |r, c| p[(r, c)]))
    };
    Ok((pinv(j.linear())?, pinv(j.angular())?))
}

/// Settings for damped least-squares path tracking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkOptions {
    pub damping: f64,
    pub max_iterations: usize,
    pub position_tolerance: f64,
    pub orientation_tolerance: f64,
    /// Largest joint-space step (∞-norm, rad) allowed between consecutive samples.
    pub max_joint_step: f64,
    /// Largest joint update inside one iteration.
    pub max_iteration_step: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            damping: 1e-3,
            max_iterations: 500,
            position_tolerance: 1e-6,
            orientation_tolerance: 1e-5,
            max_joint_step: 0.5,
            max_iteration_step: 0.2,
        }
    }
}

/// Task-space pose error `(p_t − p, log(R_t Rᵀ))` in the base frame.
fn pose_error(target: &Pose, current: &Pose) -> Vector6<f64> {
    let mut e = Vector6::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&(target.translation - current.translation));
    let dr = target.rotation * current.rotation.conjugate();
    e.fixed_rows_mut::<3>(3).copy_from(&dr.rotation_vector());
    e
}

fn split_error(task: TaskSpace, e: &Vector6<f64>) -> (f64, f64) {
    let rows = task.rows();
    let pos = rows.iter().filter(|&&r| r < 3).map(|&r| e[r] * e[r]).sum::<f64>().sqrt();
    let rot = rows.iter().filter(|&&r| r >= 3).map(|&r| e[r] * e[r]).sum::<f64>().sqrt();
    (pos, rot)
}

/// Converges `seed` onto `target`: damped steps far away, undamped Newton
/// steps once close, so the result is accurate to rounding.
pub fn solve_pose(
    model: &ChainModel,
    target: &Pose,
    seed: &JointVector,
    opts: &IkOptions,
) -> Result<JointVector, KinematicsError> {
    model.check(seed)?;
    let task = model.task();
    let mut q = seed.clone();
    let residual = |q: &JointVector| -> Result<Vector6<f64>, KinematicsError> {
        Ok(pose_error(target, &model.forward_kinematics(q)?))
    };
    let mut e = residual(&q)?;
    let mut err = task.select(&e).norm();
    let mut polishing_stalls = 0;
    for _ in 0..opts.max_iterations {
        if err < 1e-15 {
            break;
        }
        let j = task.select_rows(&model.geometric_jacobian(&q, JacobianFrame::Base)?.full);
        let lambda = if err < 1e-5 { 0.0 } else { opts.damping };
        let m = task.dim();
        let jjt = &j * j.transpose() + DMatrix::identity(m, m) * (lambda * lambda);
        let Some(sol) = jjt.lu().solve(&task.select(&e)) else { break };
        let mut dq = j.transpose() * sol;
        let step = dq.amax();
        if step > opts.max_iteration_step {
            dq *= opts.max_iteration_step / step;
        }
        let candidate = &q + dq;
        let e_new = residual(&candidate)?;
        let err_new = task.select(&e_new).norm();
        if err_new < err || lambda > 0.0 {
            q = candidate;
            e = e_new;
            if err < 1e-5 && err_new >= 0.5 * err {
                polishing_stalls += 1;
            }
            err = err_new;
        } else {
            polishing_stalls += 1;
        }
        if polishing_stalls >= 3 {
            break;
        }
    }
    let (position_error, orientation_error) = split_error(task, &e);
    if position_error > opts.position_tolerance || orientation_error > opts.orientation_tolerance {
        return Err(KinematicsError::Unreachable { index: 0, position_error, orientation_error });
    }
    Ok(q)
}

/// Tracks `ee_path` sample by sample, seeding each solve with the previous one.
pub fn solve_path_ik(
    model: &ChainModel,
    ee_path: &[Pose],
    q0: &JointVector,
    opts: &IkOptions,
) -> Result<Vec<JointVector>, KinematicsError> {
    model.check(q0)?;
    let mut out: Vec<JointVector> = Vec::with_capacity(ee_path.len());
    for (index, target) in ee_path.iter().enumerate() {
        let seed = out.last().unwrap_or(q0);
        let q = solve_pose(model, target, seed, opts).map_err(|e| match e {
            KinematicsError::Unreachable { position_error, orientation_error, .. } => {
                KinematicsError::Unreachable { index, position_error, orientation_error }
            }
            other => other,
        })?;
        if let Some(prev) = out.last() {
            let step = (&q - prev).amax();
            if step > opts.max_joint_step {
                return Err(KinematicsError::BranchJump { index, step });
            }
        }
        if let Some(joint) = model.within_limits(&q) {
            return Err(KinematicsError::JointLimit { index, joint, value: q[joint] });
        }
        out.push(q);
    }
    Ok(out)
}
