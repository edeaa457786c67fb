//! Cue forces, the simulated master device and the virtual operator that
//! follows the cues.
//!
//! The cue is `f = −K_m Q ∂H/∂x` with
//! `Q = blockdiag(ᵐR_o, ᵐR_o T†(ᵒρ_g))`, so the translation gradient is
//! rotated into the master frame and the quaternion gradient is first turned
//! into an angular direction. The master is a unit mass with damping `B_m`;
//! the slave moves the grasp with `Λ` times the master twist.

use std::io::Write;

use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::se3::{Frame, Pose, Twist, UnitQuaternion};
use crate::tov::{Evaluation, TovError, TovGradient, TovProblem};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HapticsError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("time step {0} outside (0, 0.01]")]
    InvalidStep(f64),
    #[error("invalid cue configuration: {0}")]
    InvalidConfig(String),
}

/// Gains of the cue and master/slave loop; diagonals are per axis
/// `(x, y, z, rx, ry, rz)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CueConfig {
    /// `K_m`.
    pub gain: [f64; 6],
    /// `B_m`.
    pub damping: [f64; 6],
    /// `Λ`.
    pub coupling: [f64; 6],
    /// `ᵐR_r`.
    pub master_rotation: UnitQuaternion,
    /// Master integration step (s).
    pub dt: f64,
    /// First-order descent rate `γ`.
    pub rate: f64,
}

impl Default for CueConfig {
    fn default() -> Self {
        Self {
            gain: [1.0; 6],
            damping: [5.0; 6],
            coupling: [1.0; 6],
            master_rotation: UnitQuaternion::identity(),
            dt: 1e-3,
            rate: 1e-2,
        }
    }
}

impl CueConfig {
    pub fn validate(&self) -> Result<(), HapticsError> {
        for (name, diag) in [("gain", &self.gain), ("damping", &self.damping), ("coupling", &self.coupling)] {
            if !diag.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(HapticsError::InvalidConfig(format!("{name} entries must be positive")));
            }
        }
        if !(self.dt > 0.0 && self.dt <= 0.01) {
            return Err(HapticsError::InvalidStep(self.dt));
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(HapticsError::InvalidConfig("rate must be positive".into()));
        }
        Ok(())
    }

    /// `ᵐR_o = ᵐR_r ʳR_o` for the object orientation `object_rotation`.
    pub fn master_from_object(&self, object_rotation: &UnitQuaternion) -> Matrix3<f64> {
        *(self.master_rotation * *object_rotation).to_rotation().matrix()
    }
}

/// Cue force and torque in the master frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueForce {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl CueForce {
    pub fn zero() -> Self {
        Self { force: Vector3::zeros(), torque: Vector3::zeros() }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.force.x, self.force.y, self.force.z, self.torque.x, self.torque.y, self.torque.z)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self { force: v.fixed_rows::<3>(0).into_owned(), torque: v.fixed_rows::<3>(3).into_owned() }
    }

    pub fn magnitude(&self) -> f64 {
        self.to_vector().norm()
    }

    /// Unit direction, zero when the cue vanishes.
    pub fn direction(&self) -> Vector6<f64> {
        let m = self.magnitude();
        if m > 0.0 {
            self.to_vector() / m
        } else {
            Vector6::zeros()
        }
    }
}

/// `Q ∂H/∂x`: the gradient as a master-frame 6-vector.
pub fn mapped_gradient(grad: &TovGradient, grasp: &Pose, master_from_object: &Matrix3<f64>) -> Vector6<f64> {
    let lin = master_from_object * grad.translation;
    let ang = master_from_object * (grasp.rotation.rate_map_pinv() * grad.quaternion);
    Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
}

pub fn cue_force(grad: &TovGradient, grasp: &Pose, master_from_object: &Matrix3<f64>, cfg: &CueConfig) -> CueForce {
    let g = mapped_gradient(grad, grasp, master_from_object);
    CueForce::from_vector(&-Vector6::from_fn(|i, _| cfg.gain[i] * g[i]))
}

/// Simulated master device: pose in the master base frame and its twist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MasterState {
    pub pose: Pose,
    /// `(v, ω)` in the master base frame.
    pub velocity: Vector6<f64>,
    pub time: f64,
}

impl Default for MasterState {
    fn default() -> Self {
        Self { pose: Pose::identity(), velocity: Vector6::zeros(), time: 0.0 }
    }
}

impl MasterState {
    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.velocity.norm_squared()
    }
}

/// `τ = −B_m ẋ + f`.
pub fn feedback_torque(state: &MasterState, f: &CueForce, cfg: &CueConfig) -> Vector6<f64> {
    f.to_vector() - Vector6::from_fn(|i, _| cfg.damping[i] * state.velocity[i])
}

/// One semi-implicit Euler step of `ẍ = τ + τ_h` (unit mass, no Coriolis term).
pub fn master_step(
    state: &MasterState,
    tau: &Vector6<f64>,
    tau_h: &Vector6<f64>,
    dt: f64,
) -> Result<MasterState, HapticsError> {
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(HapticsError::InvalidStep(dt));
    }
    if !tau.iter().chain(tau_h.iter()).all(|v| v.is_finite()) {
        return Err(HapticsError::NonFinite("master torque"));
    }
    let velocity = state.velocity + (tau + tau_h) * dt;
    let v = velocity.fixed_rows::<3>(0).into_owned();
    let w = velocity.fixed_rows::<3>(3).into_owned();
    let pose = Pose::new(
        state.pose.translation + v * dt,
        UnitQuaternion::from_rotation_vector(&(w * dt)) * state.pose.rotation,
    );
    Ok(MasterState { pose, velocity, time: state.time + dt })
}

/// `(ʳv_g, ʳω_g) = Λ (ᵐv_M, ᵐω_M)`.
pub fn slave_coupling(master_twist: &Twist, cfg: &CueConfig) -> Twist {
    let v = master_twist.to_vector();
    Twist::from_vector(&Vector6::from_fn(|i, _| cfg.coupling[i] * v[i]), Frame::Base)
}

/// Applies a small object-frame displacement `(dt, dθ)` to the grasp pose.
pub fn displace_grasp(grasp: &Pose, delta: &Vector6<f64>) -> Pose {
    let lin = delta.fixed_rows::<3>(0).into_owned();
    let ang = delta.fixed_rows::<3>(3).into_owned();
    Pose::new(grasp.translation + lin, grasp.rotation.integrate(&ang, 1.0))
}

/// Maps a master-frame 6-vector into the object frame, applying the mask.
pub fn master_to_object(v: &Vector6<f64>, master_from_object: &Matrix3<f64>, mask: &[bool; 6]) -> Vector6<f64> {
    let back = master_from_object.transpose();
    let lin = back * v.fixed_rows::<3>(0);
    let ang = back * v.fixed_rows::<3>(3);
    Vector6::from_fn(|i, _| if mask[i] { if i < 3 { lin[i] } else { ang[i - 3] } } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorMode {
    /// Grasp moves by `γ` times the cue each step, with backtracking.
    #[default]
    FirstOrder,
    /// Grasp follows the simulated master under cue force and damping.
    SecondOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescentSettings {
    pub mode: OperatorMode,
    pub max_steps: usize,
    /// Stop once the masked gradient norm falls below this.
    pub gradient_tolerance: f64,
    /// Stop once a step lowers `H` by less than this fraction.
    pub cost_tolerance: f64,
    pub max_backtracks: usize,
    /// Factor applied to the rate after an accepted first-order step.
    pub rate_growth: f64,
    /// Upper bound on the adapted rate, as a multiple of `CueConfig::rate`.
    pub max_rate_factor: f64,
    /// Which object-frame axes `(x, y, z, rx, ry, rz)` the grasp may move along.
    pub dof_mask: [bool; 6],
    /// Master steps per cue update in second-order mode.
    pub cue_period: usize,
}

impl Default for DescentSettings {
    fn default() -> Self {
        Self {
            mode: OperatorMode::FirstOrder,
            max_steps: 200,
            gradient_tolerance: 1e-6,
            cost_tolerance: 1e-12,
            max_backtracks: 40,
            rate_growth: 1.5,
            max_rate_factor: 1e3,
            dof_mask: [true; 6],
            cue_period: 10,
        }
    }
}

/// One line of a descent trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    #[serde(rename = "H")]
    pub cost: f64,
    pub grad_norm: f64,
    pub pose: Pose,
    pub jv_integral: f64,
    pub f: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    StepLimit,
    /// No acceptable step was found; `message` carries the last failure.
    Stalled { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentTrace {
    pub records: Vec<TraceRecord>,
    pub termination: Termination,
}

impl DescentTrace {
    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("trace holds the initial record")
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Moved,
    Converged,
    Stalled(String),
}

/// Virtual operator state, advanced one cue update at a time.
#[derive(Debug, Clone)]
pub struct VirtualOperator {
    pub cue: CueConfig,
    pub settings: DescentSettings,
    master_from_object: Matrix3<f64>,
    grasp: Pose,
    current: Evaluation,
    rate: f64,
    master: MasterState,
    step: usize,
}

impl VirtualOperator {
    pub fn new(problem: &TovProblem, grasp: Pose, cue: CueConfig, settings: DescentSettings) -> Result<Self, TovError> {
        cue.validate().map_err(|e| TovError::InvalidOptions(e.to_string()))?;
        let current = problem.evaluate(&grasp, true)?;
        let object = problem.path.pose_at(0.0)?;
        Ok(Self {
            master_from_object: cue.master_from_object(&object.rotation),
            rate: cue.rate,
            cue,
            settings,
            grasp,
            current,
            master: MasterState::default(),
            step: 0,
        })
    }

    pub fn grasp(&self) -> &Pose {
        &self.grasp
    }

    pub fn evaluation(&self) -> &Evaluation {
        &self.current
    }

    /// Accepted steps so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn master(&self) -> &MasterState {
        &self.master
    }

    pub fn master_from_object(&self) -> &Matrix3<f64> {
        &self.master_from_object
    }

    pub fn gradient(&self) -> TovGradient {
        self.current.gradient.expect("operator evaluations carry gradients")
    }

    pub fn cue_force(&self) -> CueForce {
        cue_force(&self.gradient(), &self.grasp, &self.master_from_object, &self.cue)
    }

    /// Norm of the gradient along the unmasked axes, as an object-frame 6-vector.
    pub fn gradient_norm(&self) -> f64 {
        let g = mapped_gradient(&self.gradient(), &self.grasp, &self.master_from_object);
        master_to_object(&g, &self.master_from_object, &self.settings.dof_mask).norm()
    }

    pub fn record(&self) -> TraceRecord {
        let f = self.cue_force().to_vector();
        TraceRecord {
            step: self.step,
            cost: self.current.value.cost,
            grad_norm: self.gradient_norm(),
            pose: self.grasp,
            jv_integral: self.current.jv_integral,
            f: [f[0], f[1], f[2], f[3], f[4], f[5]],
        }
    }

    /// Moves the grasp from outside the loop, e.g. a human correction.
    pub fn set_grasp(&mut self, problem: &TovProblem, grasp: Pose) -> Result<(), TovError> {
        self.current = problem.evaluate(&grasp, true)?;
        self.grasp = grasp;
        self.master.velocity = Vector6::zeros();
        Ok(())
    }

    pub fn step(&mut self, problem: &TovProblem) -> StepOutcome {
        if self.gradient_norm() < self.settings.gradient_tolerance {
            return StepOutcome::Converged;
        }
        match self.settings.mode {
            OperatorMode::FirstOrder => self.first_order_step(problem),
            OperatorMode::SecondOrder => self.second_order_step(problem),
        }
    }

    fn first_order_step(&mut self, problem: &TovProblem) -> StepOutcome {
        let direction = master_to_object(&self.cue_force().to_vector(), &self.master_from_object, &self.settings.dof_mask);
        let h0 = self.current.value.cost;
        let mut last_failure = String::from("cost did not decrease");
        for _ in 0..=self.settings.max_backtracks {
            let trial = displace_grasp(&self.grasp, &(direction * self.rate));
            match problem.evaluate(&trial, true) {
                Ok(e) if e.value.cost <= h0 => {
                    let decrease = h0 - e.value.cost;
                    self.grasp = trial;
                    self.current = e;
                    self.step += 1;
                    self.rate = (self.rate * self.settings.rate_growth).min(self.cue.rate * self.settings.max_rate_factor);
                    if decrease <= self.settings.cost_tolerance * h0 {
                        return StepOutcome::Converged;
                    }
                    return StepOutcome::Moved;
                }
                Ok(_) => {}
                Err(err) => last_failure = err.to_string(),
            }
            self.rate *= 0.5;
        }
        StepOutcome::Stalled(last_failure)
    }

    fn second_order_step(&mut self, problem: &TovProblem) -> StepOutcome {
        let f = self.cue_force();
        let mut grasp = self.grasp;
        let mut master = self.master;
        for _ in 0..self.settings.cue_period.max(1) {
            let tau = feedback_torque(&master, &f, &self.cue);
            master = match master_step(&master, &tau, &Vector6::zeros(), self.cue.dt) {
                Ok(m) => m,
                Err(e) => return StepOutcome::Stalled(e.to_string()),
            };
            let slave = slave_coupling(&Twist::from_vector(&master.velocity, Frame::Master), &self.cue).to_vector();
            grasp = displace_grasp(&grasp, &(master_to_object(&slave, &self.master_from_object, &self.settings.dof_mask) * self.cue.dt));
        }
        match problem.evaluate(&grasp, true) {
            Ok(e) => {
                self.grasp = grasp;
                self.current = e;
                self.master = master;
                self.step += 1;
                StepOutcome::Moved
            }
            Err(err) => StepOutcome::Stalled(err.to_string()),
        }
    }

    /// Steps until convergence, stall or `max_steps`, recording every accepted state.
    pub fn run(&mut self, problem: &TovProblem) -> DescentTrace {
        let mut records = vec![self.record()];
        let termination = loop {
            if self.step >= self.settings.max_steps {
                break Termination::StepLimit;
            }
            match self.step(problem) {
                StepOutcome::Moved => records.push(self.record()),
                StepOutcome::Converged => {
                    if records.last().map(|r| r.step) != Some(self.step) {
                        records.push(self.record());
                    }
                    break Termination::Converged;
                }
                StepOutcome::Stalled(message) => break Termination::Stalled { message },
            }
        };
        DescentTrace { records, termination }
    }
}

/// Runs the virtual operator from `grasp` and returns its trace.
pub fn run_virtual_operator(
    problem: &TovProblem,
    grasp: Pose,
    cue: CueConfig,
    settings: DescentSettings,
) -> Result<DescentTrace, TovError> {
    Ok(VirtualOperator::new(problem, grasp, cue, settings)?.run(problem))
}
