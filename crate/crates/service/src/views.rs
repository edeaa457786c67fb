//! JSON payloads of the HTTP and stream interface. `docs/service-api.md` has
//! the schemas with examples.

use graspcue_core::haptics::{cue_force, CueConfig};
use graspcue_core::scenario::Scenario;
use graspcue_core::se3::Pose;
use graspcue_core::tov::{Evaluation, TovError, TovProblem};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

/// Cue as a master-frame 6-vector `(fx, fy, fz, τx, τy, τz)` plus its unit
/// direction (all zero when the cue vanishes) and magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueView {
    pub vector: [f64; 6],
    pub direction: [f64; 6],
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationView {
    #[serde(rename = "H")]
    pub cost: f64,
    pub mean_a: f64,
    /// `∂H/∂(t_x, t_y, t_z, w, x, y, z)`.
    pub gradient: [f64; 7],
    pub gradient_norm: f64,
    pub cue: CueView,
    pub s: Vec<f64>,
    /// Ellipsoid radius per sample, `null` where the sample was excluded.
    pub a: Vec<Option<f64>>,
    pub excluded: usize,
    pub jv_integral: f64,
}

/// Numerical trouble reported inside a normal response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub kind: String,
    pub message: String,
    pub s: Option<f64>,
    /// `null` for an exactly rank-deficient Jacobian.
    pub condition: Option<f64>,
}

impl Warning {
    pub fn near_singular(err: &TovError) -> Option<Self> {
        let condition = err.condition()?;
        let s = match err {
            TovError::NearSingular { s, .. } => Some(*s),
            _ => None,
        };
        Some(Self {
            kind: "near-singular".into(),
            message: err.to_string(),
            s,
            condition: condition.is_finite().then_some(condition),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentStatus {
    pub running: bool,
    /// Accepted steps of the current or last descent.
    pub steps: usize,
    pub rate: f64,
    /// Why the last descent ended: `converged`, `step-limit`, `stopped` or `stalled: …`.
    pub termination: Option<String>,
}

/// Session state as returned by `GET /sessions/{id}` and pushed on the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub session: String,
    pub scenario: String,
    pub revision: u64,
    pub pose: Pose,
    pub evaluation: Option<EvaluationView>,
    pub warning: Option<Warning>,
    pub descent: DescentStatus,
}

/// Reply of `POST /sessions/{id}/evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub pose: Pose,
    pub evaluation: Option<EvaluationView>,
    pub warning: Option<Warning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    /// Built-in name, or a file name inside the scenario directory.
    pub scenario: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub pose: Pose,
}

/// A master-frame displacement `(dx, dy, dz, rx, ry, rz)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub delta: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentRequest {
    pub on: bool,
    /// Initial step rate; the scenario's cue rate when absent.
    #[serde(default)]
    pub rate: Option<f64>,
    /// Step budget; the scenario's when absent.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentAck {
    pub running: bool,
    /// `started`, `already running`, `stopped` or `not running`.
    pub status: String,
    pub revision: u64,
}

/// Per-message limits on a pose delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaCap {
    /// Metres.
    pub translation: f64,
    /// Radians.
    pub rotation: f64,
}

impl Default for DeltaCap {
    fn default() -> Self {
        Self { translation: 0.05, rotation: 0.2 }
    }
}

/// Stream message; `type` is `state` or `closed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StreamEvent {
    State(Box<StateView>),
    Closed { reason: String },
}

/// Everything needed to evaluate a pose for one session, shared read-only.
#[derive(Debug)]
pub struct EvalContext {
    pub scenario: Scenario,
    pub problem: TovProblem,
    pub master_from_object: Matrix3<f64>,
}

impl EvalContext {
    pub fn new(scenario: Scenario, problem: TovProblem) -> Result<Self, TovError> {
        let object = problem.path.pose_at(0.0)?;
        Ok(Self { master_from_object: scenario.cue.master_from_object(&object.rotation), scenario, problem })
    }

    pub fn cue(&self) -> &CueConfig {
        &self.scenario.cue
    }

    /// Full evaluation; singular poses come back as a warning, anything else as an error.
    pub fn evaluate(&self, pose: &Pose) -> Result<(Option<Evaluation>, Option<Warning>), TovError> {
        match self.problem.evaluate(pose, true) {
            Ok(e) => Ok((Some(e), None)),
            Err(err) => match Warning::near_singular(&err) {
                Some(w) => Ok((None, Some(w))),
                None => Err(err),
            },
        }
    }

    pub fn view(&self, pose: &Pose, eval: &Evaluation) -> EvaluationView {
        let grad = eval.gradient.expect("session evaluations carry gradients");
        let f = cue_force(&grad, pose, &self.master_from_object, self.cue());
        let combined = grad.combined();
        EvaluationView {
            cost: eval.value.cost,
            mean_a: eval.value.mean_radius,
            gradient: std::array::from_fn(|i| combined[i]),
            gradient_norm: grad.norm(),
            cue: CueView {
                vector: std::array::from_fn(|i| f.to_vector()[i]),
                direction: std::array::from_fn(|i| f.direction()[i]),
                magnitude: f.magnitude(),
            },
            s: eval.value.s.clone(),
            a: eval.value.a.clone(),
            excluded: eval.value.excluded,
            jv_integral: eval.jv_integral,
        }
    }
}
