//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export takes plain numbers and strings and returns a JSON string. The
//! `*_json` functions are the same operations for native callers and tests.

use graspcue_core::haptics::{run_virtual_operator, DescentTrace};
use graspcue_core::scenario::{builtin_scenario, GraspGrid, Scenario};
use graspcue_core::se3::Pose;
use graspcue_core::tov::TovProblem;
use nalgebra::DVector;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn planar(name: &str) -> Result<(Scenario, TovProblem), String> {
    let s = builtin_scenario(name).ok_or_else(|| format!("unknown scenario '{name}'"))?;
    if s.q0.len() != 2 {
        return Err(format!("'{name}' is not a planar scenario"));
    }
    let p = s.problem().map_err(|e| e.to_string())?;
    Ok((s, p))
}

/// The scenario grasp slid by `offset` along the object's x axis.
fn offset_grasp(s: &Scenario, offset: f64) -> Pose {
    let mut g = s.grasp;
    g.translation.x = offset;
    g
}

#[derive(Serialize)]
struct SweepPoint {
    offset: f64,
    #[serde(rename = "H")]
    cost: Option<f64>,
    jv_integral: Option<f64>,
    mean_a: Option<f64>,
}

#[derive(Serialize)]
struct Sweep {
    scenario: String,
    points: Vec<SweepPoint>,
    argmin_h: Option<usize>,
    argmin_jv: Option<usize>,
    argmax_mean_a: Option<usize>,
}

fn arg_best(points: &[SweepPoint], key: impl Fn(&SweepPoint) -> Option<f64>) -> Option<usize> {
    (0..points.len())
        .filter_map(|i| key(&points[i]).map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

/// `H`, joint-velocity integral and mean radius at `count` grasp offsets
/// across the scenario's grasp grid (or ±0.3 m around the nominal grasp).
pub fn grasp_sweep_json(scenario: &str, count: usize) -> Result<String, String> {
    let (s, p) = planar(scenario)?;
    if count < 2 {
        return Err("need at least two grasp offsets".into());
    }
    let grid = match &s.grasp_grid {
        Some(g) => GraspGrid { count, ..*g },
        None => GraspGrid { start: offset_grasp(&s, s.grasp.translation.x - 0.3), end: offset_grasp(&s, s.grasp.translation.x + 0.3), count },
    };
    let points: Vec<SweepPoint> = grid
        .poses()
        .iter()
        .map(|g| match p.evaluate(g, false) {
            Ok(e) => SweepPoint { offset: g.translation.x, cost: Some(e.value.cost), jv_integral: Some(e.jv_integral), mean_a: Some(e.value.mean_radius) },
            Err(_) => SweepPoint { offset: g.translation.x, cost: None, jv_integral: None, mean_a: None },
        })
        .collect();
    let sweep = Sweep {
        scenario: s.name.clone(),
        argmin_h: arg_best(&points, |p| p.cost),
        argmin_jv: arg_best(&points, |p| p.jv_integral),
        argmax_mean_a: arg_best(&points, |p| p.mean_a.map(|a| -a)),
        points,
    };
    Ok(serde_json::to_string(&sweep).expect("sweep serializes"))
}

#[derive(Serialize)]
struct Snapshot {
    s: f64,
    /// Base, elbow and tip positions.
    joints: Vec<[f64; 2]>,
    q: Vec<f64>,
    object: [f64; 2],
    /// Semi-axes `σᵢ uᵢ` of the velocity ellipse at the tip.
    ellipse_axes: [[f64; 2]; 2],
    /// Unit tip velocity direction, zero where the path stands still.
    direction: [f64; 2],
    /// Ellipse radius along `direction`; `null` where excluded.
    a: Option<f64>,
    object_path: Vec<[f64; 2]>,
    tip_path: Vec<[f64; 2]>,
    #[serde(rename = "H")]
    cost: f64,
}

/// Arm, ellipse and paths at path parameter `s` for a grasp at `offset`.
pub fn planar_snapshot_json(scenario: &str, offset: f64, s: f64) -> Result<String, String> {
    let (sc, p) = planar(scenario)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(format!("s = {s} outside [0, 1]"));
    }
    let grasp = offset_grasp(&sc, offset);
    let disc = p.discretize(&grasp).map_err(|e| e.to_string())?;
    let eval = p.evaluate(&grasp, false).map_err(|e| e.to_string())?;
    let k = (s * (disc.len() - 1) as f64).round() as usize;
    let sample = &disc.samples[k];
    let joints = p.model.joint_positions(&sample.q).map_err(|e| e.to_string())?;
    let j = p.model.task_jacobian(&sample.q).map_err(|e| e.to_string())?;
    let svd = j.clone().svd(true, false);
    let u = svd.u.expect("requested");
    let axis = |i: usize| [u[(0, i)] * svd.singular_values[i], u[(1, i)] * svd.singular_values[i]];
    let v = &sample.task_velocity;
    let n = v.norm();
    let xy = |p: &Pose| [p.translation.x, p.translation.y];
    let snapshot = Snapshot {
        s: sample.s,
        joints: joints.iter().map(|p| [p.x, p.y]).collect(),
        q: sample.q.iter().cloned().collect(),
        object: xy(&sample.object_pose),
        ellipse_axes: [axis(0), axis(1)],
        direction: if n > 0.0 { [v[0] / n, v[1] / n] } else { [0.0, 0.0] },
        a: eval.value.a[k],
        object_path: disc.samples.iter().map(|x| xy(&x.object_pose)).collect(),
        tip_path: disc.samples.iter().map(|x| xy(&x.ee_pose)).collect(),
        cost: eval.value.cost,
    };
    Ok(serde_json::to_string(&snapshot).expect("snapshot serializes"))
}

/// Virtual-operator trace from a grasp at `offset`, at most `max_steps` steps.
pub fn descent_trace_json(scenario: &str, offset: f64, max_steps: usize) -> Result<String, String> {
    let (sc, p) = planar(scenario)?;
    let settings = graspcue_core::haptics::DescentSettings { max_steps, ..sc.descent };
    let trace: DescentTrace = run_virtual_operator(&p, offset_grasp(&sc, offset), sc.cue, settings).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&trace).expect("trace serializes"))
}

/// Nominal grasp offset and joint count, for initializing the page.
pub fn scenario_info_json(scenario: &str) -> Result<String, String> {
    let (sc, p) = planar(scenario)?;
    let range = sc.grasp_grid.as_ref().map(|g| [g.start.translation.x, g.end.translation.x]);
    let q0 = DVector::from_vec(sc.q0.clone());
    let reach: f64 = p.model.joint_positions(&q0).map_err(|e| e.to_string())?.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    Ok(serde_json::json!({ "name": sc.name, "offset": sc.grasp.translation.x, "range": range, "reach": reach }).to_string())
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn grasp_sweep(scenario: &str, count: usize) -> Result<String, JsError> {
    js(grasp_sweep_json(scenario, count))
}

#[wasm_bindgen]
pub fn planar_snapshot(scenario: &str, offset: f64, s: f64) -> Result<String, JsError> {
    js(planar_snapshot_json(scenario, offset, s))
}

#[wasm_bindgen]
pub fn descent_trace(scenario: &str, offset: f64, max_steps: usize) -> Result<String, JsError> {
    js(descent_trace_json(scenario, offset, max_steps))
}

#[wasm_bindgen]
pub fn scenario_info(scenario: &str) -> Result<String, JsError> {
    js(scenario_info_json(scenario))
}
