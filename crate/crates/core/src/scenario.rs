//! Scenario files and the built-in scenarios.
//!
//! A scenario bundles a robot, an object path, a nominal grasp, the IK seed
//! and the cue/descent settings. Files are JSON; `model` is either the name
//! of a built-in chain or an inline model object.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use nalgebra::{DVector, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::haptics::{CueConfig, DescentSettings};
use crate::kinematics::{solve_pose, ChainModel, KinematicsError};
use crate::path::{grasp_composed_pose, Keyframe, ObjectPath, PathError};
use crate::se3::{Pose, UnitQuaternion};
use crate::tov::{TovError, TovOptions, TovProblem};

pub const BUILTIN_NAMES: [&str; 5] = ["planar-line", "planar-halfcircle", "traj1", "traj2", "traj3"];

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown scenario '{0}'")]
    Unknown(String),
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Tov(#[from] TovError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Builtin(String),
    Inline(ChainModel),
}

impl ModelRef {
    pub fn resolve(&self) -> Result<ChainModel, ScenarioError> {
        let model = match self {
            ModelRef::Builtin(name) => {
                ChainModel::builtin(name).ok_or_else(|| ScenarioError::UnknownModel(name.clone()))?
            }
            ModelRef::Inline(model) => model.clone(),
        };
        model.validate()?;
        Ok(model)
    }
}

/// Spread of the randomized initial grasps around the nominal one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Randomization {
    /// Half-width of the uniform translation offset per axis (m).
    pub translation: f64,
    /// Largest rotation angle about a uniformly drawn axis (rad).
    pub rotation: f64,
    pub max_attempts: usize,
}

impl Default for Randomization {
    fn default() -> Self {
        Self { translation: 0.02, rotation: 0.2, max_attempts: 200 }
    }
}

/// A straight segment of grasp candidates, e.g. along the top edge of an object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspGrid {
    pub start: Pose,
    pub end: Pose,
    pub count: usize,
}

impl GraspGrid {
    pub fn poses(&self) -> Vec<Pose> {
        let path = ObjectPath::straight(self.start, self.end);
        (0..self.count)
            .map(|k| {
                let s = if self.count > 1 { k as f64 / (self.count - 1) as f64 } else { 0.0 };
                path.pose_at(s).expect("s in range")
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub model: ModelRef,
    pub path: ObjectPath,
    /// Nominal grasp `ᵒx_g`.
    pub grasp: Pose,
    /// IK seed at `s = 0`.
    pub q0: Vec<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub cue: CueConfig,
    #[serde(default)]
    pub descent: DescentSettings,
    #[serde(default)]
    pub randomization: Randomization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp_grid: Option<GraspGrid>,
    /// Options for the cost beyond the sample count.
    #[serde(default)]
    pub tov: TovOptions,
}

fn default_samples() -> usize {
    TovOptions::default().samples
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// A built-in name, or otherwise a path to a scenario file.
    pub fn resolve(name_or_file: &str) -> Result<Self, ScenarioError> {
        if let Some(s) = builtin_scenario(name_or_file) {
            return Ok(s);
        }
        let path = Path::new(name_or_file);
        if path.extension().is_some_and(|e| e == "json") || path.exists() {
            return Self::load(path);
        }
        Err(ScenarioError::Unknown(name_or_file.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn options(&self) -> TovOptions {
        TovOptions { samples: self.samples, ..self.tov }
    }

    pub fn problem(&self) -> Result<TovProblem, ScenarioError> {
        Ok(TovProblem::new(self.model.resolve()?, self.path.clone(), DVector::from_vec(self.q0.clone()), self.options())?)
    }

    /// Checks every component and that IK converges at `s = 0` for the nominal grasp.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let model = self.model.resolve()?;
        if self.q0.len() != model.dof() {
            return Err(ScenarioError::Invalid(format!("q0 has {} entries, model has {} joints", self.q0.len(), model.dof())));
        }
        if self.samples < 2 {
            return Err(ScenarioError::Invalid("samples must be at least 2".into()));
        }
        self.cue.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.randomization.translation < 0.0 || self.randomization.rotation < 0.0 {
            return Err(ScenarioError::Invalid("randomization spread must be non-negative".into()));
        }
        let target = grasp_composed_pose(&self.path, 0.0, &self.grasp)?;
        solve_pose(&model, &target, &DVector::from_vec(self.q0.clone()), &self.tov.ik)?;
        Ok(())
    }

    /// Draws a grasp near the nominal one whose cost can be evaluated.
    pub fn random_grasp(&self, problem: &TovProblem, rng: &mut impl Rng) -> Result<Pose, ScenarioError> {
        let r = &self.randomization;
        let mut last = None;
        for _ in 0..r.max_attempts.max(1) {
            let candidate = perturb(&self.grasp, r, &self.descent.dof_mask, rng);
            match problem.cost(&candidate) {
                Ok(_) => return Ok(candidate),
                Err(e) => last = Some(e),
            }
        }
        Err(match last {
            Some(e) => ScenarioError::Tov(e),
            None => ScenarioError::Invalid("no feasible grasp drawn".into()),
        })
    }
}

/// Uniform offset on the free axes of `mask`.
fn perturb(grasp: &Pose, r: &Randomization, mask: &[bool; 6], rng: &mut impl Rng) -> Pose {
    let t = Vector3::from_fn(|i, _| if mask[i] && r.translation > 0.0 { rng.random_range(-r.translation..=r.translation) } else { 0.0 });
    let axis = loop {
        let v = Vector3::from_fn(|i, _| if mask[3 + i] { rng.random_range(-1.0..1.0) } else { 0.0 });
        let n = v.norm();
        if n <= 1.0 && (n > 1e-3 || !mask[3..].iter().any(|&m| m)) {
            break v;
        }
    };
    let angle = if r.rotation > 0.0 { rng.random_range(0.0..=r.rotation) } else { 0.0 };
    let rotation = if axis.norm() > 0.0 { UnitQuaternion::from_axis_angle(&axis, angle) } else { UnitQuaternion::identity() };
    Pose::new(grasp.translation + t, rotation * grasp.rotation)
}

pub fn builtin_scenario(name: &str) -> Option<Scenario> {
    match name {
        "planar-line" => Some(planar_line()),
        "planar-halfcircle" => Some(planar_halfcircle()),
        "traj1" => Some(spatial("traj1", Vector3::new(0.0, 0.35, 0.15), None, Randomization::default())),
        "traj2" => Some(spatial(
            "traj2",
            Vector3::new(0.0, 0.25, 0.15),
            Some((Vector3::y(), -FRAC_PI_2)),
            Randomization { translation: 0.03, rotation: 0.25, ..Randomization::default() },
        )),
        "traj3" => {
            let mut s = spatial(
                "traj3",
                Vector3::new(0.05, 0.25, 0.15),
                Some((Vector3::z(), FRAC_PI_2)),
                Randomization { translation: 0.005, rotation: 0.025, ..Randomization::default() },
            );
            // a side grasp that is already close to the best one for this transfer
            let [x, y, z, qw, qx, qy, qz] = TRAJ3_GRASP;
            let grasp = Pose::new(Vector3::new(x, y, z), UnitQuaternion::normalize(Vector4::new(qw, qx, qy, qz)).expect("nonzero"));
            s.q0 = seeded_q0(&ChainModel::generic6r(), &s.path, &grasp, &s.q0);
            s.grasp = grasp;
            Some(s)
        }
        _ => None,
    }
}

fn seeded_q0(model: &ChainModel, path: &ObjectPath, grasp: &Pose, guess: &[f64]) -> Vec<f64> {
    let target = grasp_composed_pose(path, 0.0, grasp).expect("s = 0 in range");
    let q = solve_pose(model, &target, &DVector::from_row_slice(guess), &Default::default())
        .expect("built-in scenarios start at a reachable pose");
    q.iter().cloned().collect()
}

/// Planar arm carrying a point up a vertical line.
fn planar_line() -> Scenario {
    let model = ChainModel::planar2();
    let path = ObjectPath::straight(
        Pose::from_translation(Vector3::new(1.0, -0.8, 0.0)),
        Pose::from_translation(Vector3::new(1.0, 0.8, 0.0)),
    );
    let grasp = Pose::identity();
    let q0 = seeded_q0(&model, &path, &grasp, &[-1.2, 1.8]);
    Scenario {
        name: "planar-line".into(),
        model: ModelRef::Builtin("planar2".into()),
        path,
        grasp,
        q0,
        samples: 101,
        cue: CueConfig::default(),
        descent: DescentSettings { dof_mask: [true, true, false, false, false, false], ..DescentSettings::default() },
        randomization: Randomization { translation: 0.1, rotation: 0.0, ..Randomization::default() },
        grasp_grid: None,
        tov: TovOptions::default(),
    }
}

pub const HALFCIRCLE_CENTER: [f64; 2] = [0.7, 0.2];
pub const HALFCIRCLE_RADIUS: f64 = 0.75;
pub const HALFCIRCLE_EDGE: [f64; 2] = [-0.3, 0.3];
pub const HALFCIRCLE_EDGE_HEIGHT: f64 = 0.05;

/// Object carried over a half circle, grasped from its top edge.
fn planar_halfcircle() -> Scenario {
    halfcircle_scenario(HALFCIRCLE_CENTER, HALFCIRCLE_RADIUS, HALFCIRCLE_EDGE_HEIGHT)
}

/// The half-circle scenario for another circle or edge height.
pub fn halfcircle_scenario(center: [f64; 2], radius: f64, edge_height: f64) -> Scenario {
    let model = ChainModel::planar2();
    let [cx, cy] = center;
    let keys = (0..=24)
        .map(|k| {
            let th = PI * (1.0 - k as f64 / 24.0);
            Pose::from_translation(Vector3::new(cx + radius * th.cos(), cy + radius * th.sin(), 0.0))
        })
        .collect();
    let path = ObjectPath::uniform(keys).expect("increasing keyframes");
    // gripper x axis pointing down onto the edge
    let down = UnitQuaternion::from_axis_angle(&Vector3::z(), -FRAC_PI_2);
    let edge = |x: f64| Pose::new(Vector3::new(x, edge_height, 0.0), down);
    let grasp = edge(0.8 * HALFCIRCLE_EDGE[0]);
    let q0 = seeded_q0(&model, &path, &grasp, &[-0.5, 1.8]);
    Scenario {
        name: "planar-halfcircle".into(),
        model: ModelRef::Builtin("planar2".into()),
        path,
        grasp,
        q0,
        samples: 101,
        cue: CueConfig::default(),
        descent: DescentSettings { dof_mask: [true, false, false, false, false, false], ..DescentSettings::default() },
        randomization: Randomization { translation: 0.3, rotation: 0.0, ..Randomization::default() },
        grasp_grid: Some(GraspGrid { start: edge(HALFCIRCLE_EDGE[0]), end: edge(HALFCIRCLE_EDGE[1]), count: 20 }),
        tov: TovOptions::default(),
    }
}

/// Object start for the 6R scenarios: a box on the table in front of the robot.
pub const OBJECT_START: [f64; 3] = [0.65, -0.2, 0.0];
/// Nominal grasp height above the object frame.
pub const TOP_GRASP_HEIGHT: f64 = 0.05;

/// Near-optimal grasp of `traj3` as `[x, y, z, w, qx, qy, qz]` in the object frame.
pub const TRAJ3_GRASP: [f64; 7] = [0.0654, -0.0895, -0.0601, 0.0207, 0.9618, -0.0755, 0.2625];

fn spatial(name: &str, shift: Vector3<f64>, turn: Option<(Vector3<f64>, f64)>, randomization: Randomization) -> Scenario {
    spatial_scenario(name, Vector3::from(OBJECT_START), shift, turn, randomization)
}

/// A 6R pick-and-place scenario: the object starts at `object_start`, moves
/// by `shift` and turns by `turn = (axis, angle)` about its own origin.
pub fn spatial_scenario(
    name: &str,
    object_start: Vector3<f64>,
    shift: Vector3<f64>,
    turn: Option<(Vector3<f64>, f64)>,
    randomization: Randomization,
) -> Scenario {
    let model = ChainModel::generic6r();
    let start = Pose::from_translation(object_start);
    // rotations act about the object frame origin, which sits at its centre of gravity
    let end_rotation = match turn {
        Some((axis, angle)) => UnitQuaternion::from_axis_angle(&axis, angle),
        None => UnitQuaternion::identity(),
    };
    let end = Pose::new(start.translation + shift, end_rotation * start.rotation);
    let path = ObjectPath::new(vec![Keyframe { s: 0.0, pose: start }, Keyframe { s: 1.0, pose: end }]).expect("two keyframes");
    // approach axis z_g pointing down onto the top face
    let grasp = Pose::new(
        Vector3::new(0.0, 0.0, TOP_GRASP_HEIGHT),
        UnitQuaternion::from_axis_angle(&Vector3::x(), PI),
    );
    let q0 = seeded_q0(&model, &path, &grasp, &[-0.4, 0.3, 0.3, 0.0, 1.0, 0.0]);
    Scenario {
        name: name.into(),
        model: ModelRef::Builtin("generic6r".into()),
        path,
        grasp,
        q0,
        samples: 101,
        cue: CueConfig::default(),
        descent: DescentSettings::default(),
        randomization,
        grasp_grid: None,
        tov: TovOptions::default(),
    }
}
