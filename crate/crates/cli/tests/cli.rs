use std::process::{Command, Output};

fn graspcue(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graspcue")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn eval_prints_the_cost_breakdown() {
    let o = graspcue(&["eval", "--scenario", "planar-line", "--samples", "11"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["H"].as_f64().unwrap() > 0.0);
    assert_eq!(v["s"].as_array().unwrap().len(), 11);
    assert_eq!(v["a"].as_array().unwrap().len(), 11);

    let o = graspcue(&["eval", "--scenario", "planar-line", "--samples", "11", "--format", "csv"]);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("s,a,h"));
    assert_eq!(lines.count(), 11);
}

#[test]
fn eval_at_an_explicit_pose() {
    let o = graspcue(&["eval", "--scenario", "planar-line", "--pose", "-0.1,0.05,0,1,0,0,0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["pose"]["t"], serde_json::json!([-0.1, 0.05, 0.0]));

    // typed quaternions are rounded; they are normalized, not rejected
    let o = graspcue(&["eval", "--pose", "-0.24,0.05,0,0.7071068,0,0,-0.7071068"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = graspcue(&["eval", "--pose", "0,0,0,1,1,0,0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grad_agrees_with_differences() {
    let o = graspcue(&["grad", "--scenario", "planar-halfcircle"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["relative_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["gradient"].as_array().unwrap().len(), 7);

    let o = graspcue(&["grad", "--scenario", "planar-halfcircle", "--format", "csv"]);
    assert_eq!(stdout(&o).lines().count(), 8);
}

#[test]
fn descend_emits_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.jsonl");
    let o = graspcue(&["descend", "--scenario", "planar-halfcircle", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.len() > 2);
    for (k, r) in records.iter().enumerate() {
        assert_eq!(r["step"], k);
        for key in ["H", "grad_norm", "pose", "jv_integral", "f"] {
            assert!(!r[key].is_null(), "{key}");
        }
    }
    assert!(String::from_utf8_lossy(&o.stderr).contains("converged"));

    let o = graspcue(&["descend", "--scenario", "planar-line", "--max-steps", "3", "--mode", "second-order", "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("step,H,grad_norm,jv_integral,t_x"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn experiment_reports() {
    let o = graspcue(&["experiment", "--scenario", "planar-halfcircle", "--seed", "3", "--runs", "2", "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 26);
    // two runs per mode plus one aggregate row per mode
    assert_eq!(text.lines().count(), 1 + 2 * 3);

    let o = graspcue(&["experiment", "--scenario", "planar-halfcircle", "--seed", "3", "--runs", "2", "--mode", "guided"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["seed"], 3);
    assert_eq!(v["runs"].as_array().unwrap().len(), 2);
    assert!(v["runs"][0]["wall_time_ms"].is_null());
}

#[test]
fn validation_errors_exit_with_two() {
    for args in [
        vec!["eval", "--scenario", "nosuch"],
        vec!["experiment", "--scenario", "planar-line"],
        vec!["eval", "--pose", "1,2,3"],
        vec!["eval", "--pose", "0,0,0,2,0,0,0"],
        vec!["eval", "--samples", "1"],
        vec!["eval", "--format", "xml"],
        vec!["eval", "--out", "/nonexistent/dir/x.json"],
        vec!["grad", "--fd-step", "0"],
    ] {
        let o = graspcue(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn model_override() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("six.json");
    let six = serde_json::to_string(&graspcue_core::kinematics::ChainModel::generic6r()).unwrap();
    std::fs::write(&model, six).unwrap();
    let o = graspcue(&["eval", "--scenario", "planar-line", "--model", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "q0 no longer matches the joint count");

    let planar = dir.path().join("planar.json");
    std::fs::write(&planar, serde_json::to_string(&graspcue_core::kinematics::ChainModel::planar2()).unwrap()).unwrap();
    let o = graspcue(&["eval", "--scenario", "planar-line", "--model", planar.to_str().unwrap()]);
    assert!(o.status.success());
}

#[test]
fn unreachable_poses_exit_with_three() {
    let o = graspcue(&["eval", "--scenario", "planar-line", "--pose", "1.5,0,0,1,0,0,0"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
