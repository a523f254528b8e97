use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

const HETJOB: &str = r#"{
    "version": 1,
    "classical": {"nodes": 10, "walltime_ticks": 600},
    "quantum": {"gres": {"kind": "qc:QC", "count": 1}, "walltime_ticks": 600},
    "mode": "simultaneous",
    "pattern": "high_q_low_c"
}"#;

fn free_endpoint() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

fn qbridge(ep: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qbridge"))
        .arg("--endpoint")
        .arg(ep)
        .args(args)
        .env_remove("QBRIDGE_ENDPOINT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Tears the gateway down even when an assertion fails.
struct Running(String);

impl Drop for Running {
    fn drop(&mut self) {
        let _ = qbridge(&self.0, &["teardown"]);
    }
}

fn setup(ep: &str, extra: &[&str]) -> Running {
    let mut args = vec!["setup", "--tick-ms", "1"];
    args.extend_from_slice(extra);
    let o = qbridge(ep, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Running(ep.to_string())
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn setup_submit_run_report_teardown() {
    let dir = tempfile::tempdir().unwrap();
    let ep = free_endpoint();
    let gw = setup(&ep, &[]);

    let spec = write(dir.path(), "hetjob.json", HETJOB);
    let o = qbridge(&ep, &["submit", &spec]);
    assert_eq!(code(&o), 0);
    let job: u64 = stdout(&o).trim().parse().expect("job id on stdout");

    let env_file = dir.path().join("env.txt");
    let script = format!(
        "echo \"$QBRIDGE_ENDPOINT $QBRIDGE_JOB_ID $QBRIDGE_SESSION_TOKEN\" > {}",
        env_file.display()
    );
    let o = qbridge(&ep, &["run", &job.to_string(), "--", "sh", "-c", &script]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let seen = std::fs::read_to_string(&env_file).unwrap();
    let parts: Vec<&str> = seen.split_whitespace().collect();
    assert_eq!(parts.len(), 3, "{seen}");
    assert_eq!(parts[0], ep);
    assert_eq!(parts[1], job.to_string());
    assert!(!parts[2].is_empty());

    let o = qbridge(&ep, &["run", &job.to_string(), "--", "sh", "-c", "exit 7"]);
    assert_eq!(code(&o), 7, "the command's status is passed through");

    let o = qbridge(&ep, &["report"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("quantum utilization"));
    let o = qbridge(&ep, &["report", &job.to_string(), "--json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["jobs"][0]["job_id"], job);

    let o = qbridge(&ep, &["status"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["devices"].as_array().unwrap().len(), 2);

    drop(gw);
    let o = qbridge(&ep, &["status"]);
    assert_eq!(code(&o), 2, "gateway is gone after teardown");
}

#[test]
fn teardown_exits_zero() {
    let ep = free_endpoint();
    let gw = setup(&ep, &["--manual"]);
    let o = qbridge(&ep, &["teardown"]);
    assert_eq!(code(&o), 0);
    std::mem::forget(gw);
    assert_eq!(code(&qbridge(&ep, &["teardown"])), 2);
}

#[test]
fn manifest_and_node_override_are_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write(
        dir.path(),
        "devices.json",
        r#"{"classical_nodes": 4, "devices": [
            {"device_id": "ion0", "modality": "simulator", "gres": "qc:QC",
             "target": {"native_gates": ["rz", "rx", "cx"], "num_qubits": 2, "connectivity": [[0, 1]], "max_shots": 1000}}
        ]}"#,
    );
    let ep = free_endpoint();
    let _gw = setup(&ep, &["--manual", "--manifest", &manifest, "--nodes", "12"]);
    let spec = write(dir.path(), "hetjob.json", HETJOB);
    let o = qbridge(&ep, &["submit", &spec]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = qbridge(&ep, &["status"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["devices"][0]["device_id"], "ion0");
}

#[test]
fn bad_manifest_fails_setup_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write(dir.path(), "dup.json", r#"{"devices": []}"#);
    let ep = free_endpoint();
    assert_eq!(code(&qbridge(&ep, &["setup", "--manifest", &manifest])), 3);
}

#[test]
fn malformed_spec_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let ep = free_endpoint();
    let bad = write(dir.path(), "bad.json", "{\"version\": 1, \"classical\": ");
    assert_eq!(code(&qbridge(&ep, &["submit", &bad])), 3);
    let wrong = write(dir.path(), "wrong.json", r#"{"version": 1, "classical": {"nodes": 0, "walltime_ticks": 1}}"#);
    assert_eq!(code(&qbridge(&ep, &["submit", &wrong])), 3);
}

#[test]
fn unreachable_gateway_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let ep = free_endpoint();
    let spec = write(dir.path(), "hetjob.json", HETJOB);
    assert_eq!(code(&qbridge(&ep, &["submit", &spec])), 2);
    assert_eq!(code(&qbridge(&ep, &["status"])), 2);
    assert_eq!(code(&qbridge(&ep, &["report"])), 2);
}

#[test]
fn unknown_job_exits_four() {
    let ep = free_endpoint();
    let _gw = setup(&ep, &["--manual"]);
    assert_eq!(code(&qbridge(&ep, &["report", "999"])), 4);
    assert_eq!(code(&qbridge(&ep, &["run", "999", "--", "true"])), 4);
}

#[test]
fn usage_errors_exit_sixty_four() {
    let ep = free_endpoint();
    assert_eq!(code(&qbridge(&ep, &["frobnicate"])), 64);
    assert_eq!(code(&qbridge(&ep, &["run", "1"])), 64);
    assert_eq!(code(&qbridge(&ep, &["report", "not-a-number"])), 64);
    assert_eq!(code(&qbridge(&ep, &["--help"])), 0);
}

#[test]
fn transpile_runs_locally() {
    let dir = tempfile::tempdir().unwrap();
    let circuit = write(
        dir.path(),
        "bell.qasm",
        "OPENQASM 2.0;\ninclude \"qelib1.inc\";\nqreg q[2];\ncreg c[2];\nh q[0];\nx q[1];\nx q[1];\ncx q[0],q[1];\nmeasure q[0] -> c[0];\nmeasure q[1] -> c[1];\n",
    );
    let pipeline = write(
        dir.path(),
        "p.json",
        r#"{"version": 1, "passes": [{"name": "cancel_inverse_pairs"}, {"name": "decompose_to_target"}],
            "target": {"native_gates": ["rz", "rx", "cx"], "num_qubits": 2, "connectivity": [[0, 1]], "max_shots": 1000}}"#,
    );
    let o = qbridge(&free_endpoint(), &["transpile", &circuit, "--pipeline", &pipeline]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("qreg q[2];\n"), "{out}");
    assert!(!out.contains("\nh ") && !out.contains("\nx "), "{out}");
    let bad = write(dir.path(), "bad.json", r#"{"passes": [{"name": "nope"}]}"#);
    assert_eq!(code(&qbridge(&free_endpoint(), &["transpile", &circuit, "--pipeline", &bad])), 3);
}
