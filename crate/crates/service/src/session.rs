//! One actor task per session owns its state; handlers talk to it by message.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use graspcue_core::haptics::{displace_grasp, master_to_object, StepOutcome, Termination, VirtualOperator};
use graspcue_core::se3::Pose;
use graspcue_core::tov::Evaluation;
use nalgebra::Vector6;
use tokio::sync::{broadcast, mpsc, oneshot, watch};

use crate::error::ApiError;
use crate::views::{DeltaCap, DescentAck, DescentRequest, DescentStatus, EvalContext, StateView, Warning};

/// Events buffered per subscriber before it counts as lagging.
const EVENT_BUFFER: usize = 1024;

pub(crate) enum Command {
    PoseDelta { delta: [f64; 6], reply: oneshot::Sender<Result<StateView, ApiError>> },
    Descent { request: DescentRequest, reply: oneshot::Sender<Result<DescentAck, ApiError>> },
}

/// What the router keeps per session. Dropping it stops the actor.
pub(crate) struct SessionHandle {
    pub context: Arc<EvalContext>,
    pub commands: mpsc::Sender<Command>,
    pub state: watch::Receiver<StateView>,
    events: broadcast::Receiver<StateView>,
    pub last_active: Mutex<Instant>,
}

impl SessionHandle {
    pub fn touch(&self) {
        *self.last_active.lock().expect("clock lock") = Instant::now();
    }

    pub fn idle_for(&self) -> Duration {
        self.last_active.lock().expect("clock lock").elapsed()
    }

    /// Receiver for revisions after now, plus the current state.
    pub fn subscribe(&self) -> (broadcast::Receiver<StateView>, StateView) {
        let rx = self.events.resubscribe();
        let current = self.state.borrow().clone();
        (rx, current)
    }
}

struct Core {
    id: String,
    context: Arc<EvalContext>,
    grasp: Pose,
    current: Option<Evaluation>,
    warning: Option<Warning>,
    operator: Option<VirtualOperator>,
    descent: DescentStatus,
    revision: u64,
}

impl Core {
    fn view(&self) -> StateView {
        StateView {
            session: self.id.clone(),
            scenario: self.context.scenario.name.clone(),
            revision: self.revision,
            pose: self.grasp,
            evaluation: self.current.as_ref().map(|e| self.context.view(&self.grasp, e)),
            warning: self.warning.clone(),
            descent: self.descent.clone(),
        }
    }

    fn stop(&mut self, termination: impl Into<String>) {
        self.operator = None;
        self.descent.running = false;
        self.descent.termination = Some(termination.into());
    }

    fn apply_delta(&mut self, delta: [f64; 6], cap: DeltaCap) -> Result<(), ApiError> {
        let d = Vector6::from_row_slice(&delta);
        if !d.iter().all(|v| v.is_finite()) {
            return Err(ApiError::bad_request("delta must be finite"));
        }
        let lin = d.fixed_rows::<3>(0).norm();
        let ang = d.fixed_rows::<3>(3).norm();
        if lin > cap.translation || ang > cap.rotation {
            return Err(ApiError::over_cap(cap, lin, ang));
        }
        let step = master_to_object(&d, &self.context.master_from_object, &[true; 6]);
        let grasp = displace_grasp(&self.grasp, &step);
        let (current, warning) = match self.operator.as_mut() {
            // the running descent continues from the displaced pose
            Some(op) => match op.set_grasp(&self.context.problem, grasp) {
                Ok(()) => (Some(op.evaluation().clone()), None),
                Err(err) => {
                    let warning = Warning::near_singular(&err).ok_or_else(|| ApiError::numerical(err))?;
                    self.stop("stalled: moved into a near-singular pose");
                    (None, Some(warning))
                }
            },
            None => self.context.evaluate(&grasp).map_err(ApiError::numerical)?,
        };
        self.grasp = grasp;
        self.current = current;
        self.warning = warning;
        Ok(())
    }

    fn start_descent(&mut self, rate: Option<f64>, max_steps: Option<usize>) -> Result<(), ApiError> {
        if self.current.is_none() {
            return Err(ApiError::unprocessable("cannot descend from a near-singular pose"));
        }
        let mut cue = *self.context.cue();
        if let Some(r) = rate {
            if !(r.is_finite() && r > 0.0) {
                return Err(ApiError::bad_request("rate must be positive"));
            }
            cue.rate = r;
        }
        let mut settings = self.context.scenario.descent;
        if let Some(n) = max_steps {
            settings.max_steps = n;
        }
        let op = VirtualOperator::new(&self.context.problem, self.grasp, cue, settings).map_err(ApiError::numerical)?;
        self.operator = Some(op);
        self.descent = DescentStatus { running: true, steps: 0, rate: cue.rate, termination: None };
        Ok(())
    }

    fn descent_step(&mut self) {
        let Some(op) = self.operator.as_mut() else { return };
        if op.steps() >= op.settings.max_steps {
            self.stop(label(&Termination::StepLimit));
            return;
        }
        let outcome = op.step(&self.context.problem);
        self.grasp = *op.grasp();
        self.current = Some(op.evaluation().clone());
        self.warning = None;
        self.descent.steps = op.steps();
        match outcome {
            StepOutcome::Moved => {}
            StepOutcome::Converged => self.stop(label(&Termination::Converged)),
            StepOutcome::Stalled(message) => self.stop(label(&Termination::Stalled { message })),
        }
    }
}

fn label(t: &Termination) -> String {
    match t {
        Termination::Converged => "converged".into(),
        Termination::StepLimit => "step-limit".into(),
        Termination::Stalled { message } => format!("stalled: {message}"),
    }
}

/// Runs `f` on the blocking pool with the core moved in and back out.
async fn blocking<T: Send + 'static>(mut core: Box<Core>, f: impl FnOnce(&mut Core) -> T + Send + 'static) -> (Box<Core>, T) {
    tokio::task::spawn_blocking(move || {
        let out = f(&mut core);
        (core, out)
    })
    .await
    .expect("session computation panicked")
}

pub(crate) struct Spawned {
    pub handle: SessionHandle,
    pub initial: StateView,
}

/// Evaluates the initial grasp and starts the actor.
pub(crate) async fn spawn(id: String, context: Arc<EvalContext>, tick: Duration, cap: DeltaCap) -> Result<Spawned, ApiError> {
    let ctx = context.clone();
    let grasp = context.scenario.grasp;
    let (current, warning) = tokio::task::spawn_blocking(move || ctx.evaluate(&grasp))
        .await
        .expect("evaluation panicked")
        .map_err(ApiError::numerical)?;
    let core = Box::new(Core {
        id,
        grasp,
        current,
        warning,
        operator: None,
        descent: DescentStatus { running: false, steps: 0, rate: context.cue().rate, termination: None },
        revision: 1,
        context: context.clone(),
    });
    let initial = core.view();
    let (state_tx, state_rx) = watch::channel(initial.clone());
    let (events_tx, events_rx) = broadcast::channel(EVENT_BUFFER);
    let (cmd_tx, cmd_rx) = mpsc::channel(64);
    tokio::spawn(run(core, cmd_rx, state_tx, events_tx, tick, cap));
    Ok(Spawned {
        handle: SessionHandle {
            context,
            commands: cmd_tx,
            state: state_rx,
            events: events_rx,
            last_active: Mutex::new(Instant::now()),
        },
        initial,
    })
}

async fn run(
    mut core: Box<Core>,
    mut commands: mpsc::Receiver<Command>,
    state: watch::Sender<StateView>,
    events: broadcast::Sender<StateView>,
    tick: Duration,
    cap: DeltaCap,
) {
    let publish = |core: &mut Core| -> StateView {
        core.revision += 1;
        let view = core.view();
        state.send_replace(view.clone());
        let _ = events.send(view.clone());
        view
    };
    let mut ticker = tokio::time::interval(tick);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            biased;
            cmd = commands.recv() => {
                let Some(cmd) = cmd else { break };
                match cmd {
                    Command::PoseDelta { delta, reply } => {
                        let (c, result) = blocking(core, move |c| c.apply_delta(delta, cap)).await;
                        core = c;
                        let _ = reply.send(result.map(|_| publish(&mut core)));
                    }
                    Command::Descent { request, reply } => {
                        let ack = |core: &Core, status: &str| DescentAck {
                            running: core.descent.running,
                            status: status.into(),
                            revision: core.revision,
                        };
                        let result = match (request.on, core.descent.running) {
                            (true, true) => Ok(ack(&core, "already running")),
                            (false, false) => Ok(ack(&core, "not running")),
                            (false, true) => {
                                core.stop("stopped");
                                publish(&mut core);
                                Ok(ack(&core, "stopped"))
                            }
                            (true, false) => {
                                let (c, started) =
                                    blocking(core, move |c| c.start_descent(request.rate, request.max_steps)).await;
                                core = c;
                                started.map(|_| {
                                    publish(&mut core);
                                    ticker.reset();
                                    ack(&core, "started")
                                })
                            }
                        };
                        let _ = reply.send(result);
                    }
                }
            }
            _ = ticker.tick(), if core.descent.running => {
                let (c, _) = blocking(core, |c| c.descent_step()).await;
                core = c;
                publish(&mut core);
            }
        }
    }
}
