//! Object paths in the robot base frame, the end-effector path induced by a
//! grasp pose, path twists, and the uniform discretization consumed by the
//! TOV integral.
//!
//! Between keyframes translation is interpolated linearly and rotation by
//! slerp, so both the linear velocity in the base frame and the body angular
//! velocity are constant on each segment. Derivatives at an interior keyframe
//! are taken from the segment that starts there; at `s = 1` from the last one.

use std::path::Path;

use nalgebra::{DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::kinematics::{solve_path_ik, ChainModel, IkOptions, JointVector, KinematicsError, TaskSpace};
use crate::se3::{Frame, Pose, Twist, UnitQuaternion};

/// Samples whose task velocity is shorter than this are excluded from the integral.
pub const DEGENERATE_TWIST: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PathError {
    #[error("path parameter {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid path: {0}")]
    Invalid(String),
    #[error("inverse kinematics failed at s = {s:.4}: {source}")]
    Ik { s: f64, source: KinematicsError },
    #[error("kinematics: {0}")]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KeyframeRepr", into = "KeyframeRepr")]
pub struct Keyframe {
    pub s: f64,
    pub pose: Pose,
}

#[derive(Serialize, Deserialize)]
struct KeyframeRepr {
    s: f64,
    t: [f64; 3],
    q: [f64; 4],
}

impl TryFrom<KeyframeRepr> for Keyframe {
    type Error = crate::se3::Se3Error;
    fn try_from(r: KeyframeRepr) -> Result<Self, Self::Error> {
        if !r.t.iter().all(|c| c.is_finite()) {
            return Err(crate::se3::Se3Error::NonFinite("keyframe translation"));
        }
        let pose = Pose::new(r.t.into(), UnitQuaternion::try_from(r.q)?);
        Ok(Keyframe { s: r.s, pose })
    }
}

impl From<Keyframe> for KeyframeRepr {
    fn from(k: Keyframe) -> Self {
        KeyframeRepr { s: k.s, t: k.pose.translation.into(), q: k.pose.rotation.into() }
    }
}

/// Object path `ʳx_o(s)`, `s ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Keyframe>", into = "Vec<Keyframe>")]
pub struct ObjectPath {
    keyframes: Vec<Keyframe>,
}

impl TryFrom<Vec<Keyframe>> for ObjectPath {
    type Error = PathError;
    fn try_from(k: Vec<Keyframe>) -> Result<Self, PathError> {
        ObjectPath::new(k)
    }
}

impl From<ObjectPath> for Vec<Keyframe> {
    fn from(p: ObjectPath) -> Self {
        p.keyframes
    }
}

impl ObjectPath {
    pub fn new(keyframes: Vec<Keyframe>) -> Result<Self, PathError> {
        if keyframes.len() < 2 {
            return Err(PathError::Invalid("at least two keyframes are required".into()));
        }
        if keyframes[0].s != 0.0 || keyframes[keyframes.len() - 1].s != 1.0 {
            return Err(PathError::Invalid("keyframe parameters must start at 0 and end at 1".into()));
        }
        if keyframes.windows(2).any(|w| w[1].s.is_nan() || w[1].s <= w[0].s) {
            return Err(PathError::Invalid("keyframe parameters must be strictly increasing".into()));
        }
        Ok(Self { keyframes })
    }

    /// Keyframes evenly spaced in `s`.
    pub fn uniform(poses: Vec<Pose>) -> Result<Self, PathError> {
        let n = poses.len();
        if n < 2 {
            return Err(PathError::Invalid("at least two keyframes are required".into()));
        }
        let last = (n - 1) as f64;
        Self::new(
            poses
                .into_iter()
                .enumerate()
                .map(|(i, pose)| Keyframe { s: if i + 1 == n { 1.0 } else { i as f64 / last }, pose })
                .collect(),
        )
    }

    pub fn straight(start: Pose, end: Pose) -> Self {
        Self::uniform(vec![start, end]).expect("two keyframes")
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn from_json(text: &str) -> Result<Self, PathError> {
        serde_json::from_str(text).map_err(|e| PathError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PathError> {
        let text = std::fs::read_to_string(path).map_err(|e| PathError::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn segment(&self, s: f64) -> Result<(usize, f64), PathError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(PathError::OutOfRange(s));
        }
        let last = self.keyframes.len() - 2;
        let i = self.keyframes[1..=last].partition_point(|k| k.s <= s).min(last);
        let (a, b) = (&self.keyframes[i], &self.keyframes[i + 1]);
        Ok((i, (s - a.s) / (b.s - a.s)))
    }

    /// Body rotation vector from keyframe `i` to `i + 1`, taking the short way round.
    fn segment_rotation(&self, i: usize) -> Vector3<f64> {
        let (a, b) = (self.keyframes[i].pose.rotation, self.keyframes[i + 1].pose.rotation);
        let b = if a.dot(&b) < 0.0 { -b } else { b };
        (a.conjugate() * b).rotation_vector()
    }

    pub fn pose_at(&self, s: f64) -> Result<Pose, PathError> {
        let (i, tau) = self.segment(s)?;
        let (a, b) = (&self.keyframes[i].pose, &self.keyframes[i + 1].pose);
        if tau == 0.0 {
            return Ok(*a);
        }
        if tau == 1.0 {
            return Ok(*b);
        }
        let t = a.translation + (b.translation - a.translation) * tau;
        let r = a.rotation * UnitQuaternion::from_rotation_vector(&(self.segment_rotation(i) * tau));
        Ok(Pose::new(t, r))
    }

    /// `(ᵒv_o, ᵒω_o)`: derivative of the object pose w.r.t. `s` in the object frame.
    pub fn twist_at(&self, s: f64) -> Result<Twist, PathError> {
        let (i, _) = self.segment(s)?;
        let ds = self.keyframes[i + 1].s - self.keyframes[i].s;
        let pose = self.pose_at(s)?;
        let rate = (self.keyframes[i + 1].pose.translation - self.keyframes[i].pose.translation) / ds;
        let linear = pose.rotation.conjugate().rotate(&rate);
        Ok(Twist::new(linear, self.segment_rotation(i) / ds, Frame::Object))
    }
}

/// `ʳx_g(s) = ʳx_o(s) ∘ ᵒx_g`.
pub fn grasp_composed_pose(path: &ObjectPath, s: f64, grasp: &Pose) -> Result<Pose, PathError> {
    Ok(path.pose_at(s)?.compose(grasp))
}

/// `(v_o + ω_o × ᵒt_g, ω_o)` in the object frame: gripper velocity before rotation into `F_g`.
fn gripper_velocity_in_object(object_twist: &Twist, grasp: &Pose) -> (Vector3<f64>, Vector3<f64>) {
    (
        object_twist.linear + object_twist.angular.cross(&grasp.translation),
        object_twist.angular,
    )
}

/// End-effector twist `u = (v_g, ω_g)` in the gripper frame for a rigid grasp.
pub fn ee_twist_at(path: &ObjectPath, s: f64, grasp: &Pose) -> Result<Twist, PathError> {
    let object_twist = path.twist_at(s)?;
    let (v, w) = gripper_velocity_in_object(&object_twist, grasp);
    let g_r_o = grasp.rotation.conjugate();
    Ok(Twist::new(g_r_o.rotate(&v), g_r_o.rotate(&w), Frame::Gripper))
}

/// One grid point of a discretized path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub s: f64,
    pub object_pose: Pose,
    pub ee_pose: Pose,
    /// `(ᵒv_o, ᵒω_o)`.
    pub object_twist: Twist,
    /// `u(s)` in the gripper frame.
    pub ee_twist: Twist,
    /// End-effector velocity restricted to the model's task rows and frame.
    pub task_velocity: DVector<f64>,
    pub q: JointVector,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedTaskPath {
    pub task: TaskSpace,
    pub samples: Vec<PathSample>,
}

impl DiscretizedTaskPath {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn step(&self) -> f64 {
        1.0 / (self.samples.len() - 1) as f64
    }
}

/// Task velocity of the gripper for `task`, expressed in the task frame.
pub fn task_velocity(task: TaskSpace, object_pose: &Pose, object_twist: &Twist, grasp: &Pose) -> DVector<f64> {
    let (v, w) = gripper_velocity_in_object(object_twist, grasp);
    let r = match task {
        TaskSpace::Spatial => grasp.rotation.conjugate(),
        TaskSpace::PlanarPosition | TaskSpace::PlanarPose => object_pose.rotation,
    };
    let mut full = Vector6::zeros();
    full.fixed_rows_mut::<3>(0).copy_from(&r.rotate(&v));
    full.fixed_rows_mut::<3>(3).copy_from(&r.rotate(&w));
    task.select(&full)
}

/// Uniform grid `s_k = k / (N − 1)` with every per-sample quantity filled in.
pub fn discretize(
    path: &ObjectPath,
    grasp: &Pose,
    model: &ChainModel,
    n: usize,
    q0: &JointVector,
    ik: &IkOptions,
) -> Result<DiscretizedTaskPath, PathError> {
    if n < 2 {
        return Err(PathError::Invalid(format!("sample count {n} below 2")));
    }
    let task = model.task();
    let grid: Vec<f64> = (0..n).map(|k| if k + 1 == n { 1.0 } else { k as f64 / (n - 1) as f64 }).collect();
    let mut object_poses = Vec::with_capacity(n);
    let mut ee_poses = Vec::with_capacity(n);
    for &s in &grid {
        let o = path.pose_at(s)?;
        ee_poses.push(o.compose(grasp));
        object_poses.push(o);
    }
    let qs = solve_path_ik(model, &ee_poses, q0, ik).map_err(|e| match e {
        KinematicsError::Unreachable { index, .. }
        | KinematicsError::JointLimit { index, .. }
        | KinematicsError::BranchJump { index, .. } => PathError::Ik { s: grid[index], source: e },
        other => PathError::Kinematics(other),
    })?;
    let mut samples = Vec::with_capacity(n);
    for (k, q) in qs.into_iter().enumerate() {
        let s = grid[k];
        let object_twist = path.twist_at(s)?;
        let ee_twist = ee_twist_at(path, s, grasp)?;
        let task_velocity = task_velocity(task, &object_poses[k], &object_twist, grasp);
        let valid = task_velocity.norm() >= DEGENERATE_TWIST;
        samples.push(PathSample {
            s,
            object_pose: object_poses[k],
            ee_pose: ee_poses[k],
            object_twist,
            ee_twist,
            task_velocity,
            q,
            valid,
        });
    }
    Ok(DiscretizedTaskPath { task, samples })
}
