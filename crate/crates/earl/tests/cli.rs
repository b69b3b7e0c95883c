//! End-to-end checks of the command-line surface: exit codes, file
//! outputs, and a small multi-process TCP session.

use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const EXIT_CONFIG: i32 = 2;
const EXIT_RESOURCE: i32 = 3;
const EXIT_DATA: i32 = 4;

fn earl(dir: &TempDir, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_earl"))
        .current_dir(dir.path())
        .args(args)
        .output()
        .unwrap()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process must exit, not die on a signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> String {
    fs::write(dir.path().join(name), body).unwrap();
    name.to_string()
}

/// Steep noise-free workload in fixed TP4xDP4 mode; the policy variant
/// flips one key.
const STEEP_FIXED: &str = r#"schema_version = 1

[run]
mode = "fixed"
fixed = { tensor_parallel = 4, data_parallel = 4 }
steps = 30

[workload]
episodes_per_step = 128
turns_per_episode = 3.0
turn_len_initial = 1500
turn_len_growth = 400.0
prompt_len = 192
context_limit = 32768
length_noise = 0.0
seed = 7
"#;

fn trace_lines(dir: &TempDir, name: &str) -> Vec<serde_json::Value> {
    let text = fs::read_to_string(dir.path().join(name)).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn a_missing_config_file_exits_with_the_config_code_and_names_the_path() {
    let dir = TempDir::new().unwrap();
    let out = earl(&dir, &["run", "--config", "nope.toml"]);
    assert_eq!(exit_code(&out), EXIT_CONFIG);
    assert!(stderr(&out).contains("nope.toml"), "{}", stderr(&out));
}

#[test]
fn broken_toml_and_unknown_keys_exit_with_the_config_code() {
    let dir = TempDir::new().unwrap();
    let broken = write_config(&dir, "broken.toml", "schema_version = [oops\n");
    let out = earl(&dir, &["run", "--config", &broken]);
    assert_eq!(exit_code(&out), EXIT_CONFIG);

    let unknown = write_config(
        &dir,
        "unknown.toml",
        "schema_version = 1\n\n[run]\nstepz = 3\n",
    );
    let out = earl(&dir, &["run", "--config", &unknown]);
    assert_eq!(exit_code(&out), EXIT_CONFIG);
    assert!(stderr(&out).contains("stepz"), "{}", stderr(&out));
}

#[test]
fn profile_writes_the_probed_table() {
    let dir = TempDir::new().unwrap();
    let out = earl(&dir, &["profile", "--out", "profile.json"]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("profile.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed["schema_version"], 1);
    assert_eq!(parsed["entries"].as_array().unwrap().len(), 8);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("wrote profile.json"), "{stdout}");
}

#[test]
fn a_policy_run_switches_once_and_completes() {
    let dir = TempDir::new().unwrap();
    let steep = STEEP_FIXED.replace("mode = \"fixed\"", "mode = \"policy\"");
    let config = write_config(&dir, "steep.toml", &steep);
    let out = earl(&dir, &["run", "--config", &config, "--out", "trace.jsonl"]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let rows = trace_lines(&dir, "trace.jsonl");
    assert_eq!(rows.len(), 30);
    let switches: Vec<u64> = rows
        .iter()
        .filter(|r| r["switched"].as_bool().unwrap())
        .map(|r| r["step_id"].as_u64().unwrap())
        .collect();
    assert_eq!(switches, vec![11]);
    assert!(rows.iter().all(|r| !r["oom_event"].as_bool().unwrap()));
}

#[test]
fn a_fixed_run_aborts_with_the_resource_code_after_flushing_the_trace() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "steep.toml", STEEP_FIXED);
    let out = earl(&dir, &["run", "--config", &config, "--out", "trace.jsonl"]);
    assert_eq!(exit_code(&out), EXIT_RESOURCE, "{}", stderr(&out));
    assert!(stderr(&out).contains("out-of-memory"), "{}", stderr(&out));
    let rows = trace_lines(&dir, "trace.jsonl");
    assert_eq!(rows.len(), 24);
    assert!(rows.last().unwrap()["oom_event"].as_bool().unwrap());
}

#[test]
fn report_summarizes_a_trace_into_csvs() {
    let dir = TempDir::new().unwrap();
    let out = earl(&dir, &["run", "--out", "trace.jsonl"]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let out = earl(&dir, &["report", "--trace", "trace.jsonl"]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("steps: 30"), "{stdout}");
    let steps = fs::read_to_string(dir.path().join("steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 31, "header plus one row per step");
    let aggregate = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert!(aggregate.lines().count() >= 2);
    assert!(aggregate.starts_with("strategy,context_ceiling"));
}

#[test]
fn a_corrupt_trace_line_exits_with_the_data_code_and_line_number() {
    let dir = TempDir::new().unwrap();
    let out = earl(&dir, &["run", "--out", "trace.jsonl"]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let path = dir.path().join("trace.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    let second_line_start = text.find('\n').unwrap() + 1;
    text.insert_str(second_line_start, "{not json}\n");
    fs::write(&path, text).unwrap();
    let out = earl(&dir, &["report", "--trace", "trace.jsonl"]);
    assert_eq!(exit_code(&out), EXIT_DATA);
    assert!(stderr(&out).contains("trace.jsonl:2"), "{}", stderr(&out));
}

#[test]
fn the_simulated_bench_reports_direct_routing_ahead() {
    let dir = TempDir::new().unwrap();
    let out = earl(&dir, &["dispatch-bench", "--out", "bench.csv"]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "payload_mib,gather_scatter_s,all_to_all_s,speedup"
    );
    for line in lines {
        let speedup: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(speedup > 1.0, "{line}");
    }
}

#[test]
fn a_worker_id_outside_the_peer_list_exits_with_the_config_code() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        &dir,
        "three.toml",
        "schema_version = 1\n\n[transport]\npeers = [\"127.0.0.1:1\", \"127.0.0.1:2\", \"127.0.0.1:3\"]\n",
    );
    let out = earl(&dir, &["worker", "--config", &config, "--id", "9"]);
    assert_eq!(exit_code(&out), EXIT_CONFIG);
    assert!(stderr(&out).contains("worker id 9"), "{}", stderr(&out));
}

/// Grabs `n` distinct free loopback ports. The sockets are closed again
/// before the session starts, which leaves a tiny reuse window; the
/// connect retry loop absorbs it.
fn free_ports(n: usize) -> Vec<u16> {
    let holds: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0").unwrap())
        .collect();
    holds.iter().map(|l| l.local_addr().unwrap().port()).collect()
}

fn tcp_session_config(ports: &[u16]) -> String {
    let peers: Vec<String> = ports.iter().map(|p| format!("\"127.0.0.1:{p}\"")).collect();
    format!(
        r#"schema_version = 1

[cluster]
worker_count = 3
memory_capacity_bytes = 80000000000
link_bandwidth_bps = 25000000000
controller_bandwidth_bps = 25000000000
per_message_latency_s = 0.00001
controller_id = 0

[model]
weight_bytes = 1000000000
kv_bytes_per_token = 1024
activation_linear_bytes_per_token = 1000.0
activation_quadratic_bytes_per_token2 = 0.01

[run]
backend = "tcp"
mode = "policy"
steps = 3
initial = {{ tensor_parallel = 1, data_parallel = 2 }}

[selector]
candidates = [
  {{ tensor_parallel = 1, data_parallel = 2 }},
  {{ tensor_parallel = 2, data_parallel = 1 }},
]
bucket_edges = [0, 16384]

[profile]
mode = "table"
table = [
  {{ tensor_parallel = 1, data_parallel = 2, lower = 0, upper = 16384, oom = false, tgs = 100.0 }},
  {{ tensor_parallel = 2, data_parallel = 1, lower = 0, upper = 16384, oom = false, tgs = 90.0 }},
]

[workload]
episodes_per_step = 4
turns_per_episode = 1.0
turn_len_initial = 100
turn_len_growth = 10.0
prompt_len = 32
context_limit = 8192
length_noise = 0.0
seed = 1

[transport]
peers = [{peers}]
connect_timeout_s = 20.0
io_timeout_s = 30.0
barrier_timeout_s = 30.0
"#,
        peers = peers.join(", ")
    )
}

#[test]
fn a_three_process_tcp_session_completes_and_writes_the_trace() {
    let dir = TempDir::new().unwrap();
    let ports = free_ports(3);
    let config_path = dir.path().join("tcp.toml");
    fs::write(&config_path, tcp_session_config(&ports)).unwrap();

    let spawn_worker = |id: &str| {
        Command::new(env!("CARGO_BIN_EXE_earl"))
            .current_dir(dir.path())
            .args(["worker", "--config"])
            .arg(&config_path)
            .args(["--id", id])
            .stdout(std::process::Stdio::null())
            .spawn()
            .unwrap()
    };
    let mut workers = vec![spawn_worker("1"), spawn_worker("2")];

    let out = Command::new(env!("CARGO_BIN_EXE_earl"))
        .current_dir(dir.path())
        .args(["run", "--config"])
        .arg(&config_path)
        .args(["--out", "trace.jsonl"])
        .output()
        .unwrap();
    let worker_status: Vec<_> = workers.iter_mut().map(|w| w.wait().unwrap()).collect();
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    for (i, status) in worker_status.iter().enumerate() {
        assert!(status.success(), "worker {} exited with {status}", i + 1);
    }
    let rows = trace_lines(&dir, "trace.jsonl");
    assert_eq!(rows.len(), 3);
    assert!(rows
        .iter()
        .all(|r| r["dispatch_latency_s"].as_f64().unwrap() > 0.0));
}

#[test]
fn run_can_load_a_previously_saved_profile() {
    let dir = TempDir::new().unwrap();
    let out = earl(&dir, &["profile", "--out", "saved.json"]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let config = write_config(
        &dir,
        "with_profile.toml",
        "schema_version = 1\n\n[run]\nsteps = 5\n\n[profile]\npath = \"saved.json\"\n",
    );
    let out = earl(&dir, &["run", "--config", &config, "--out", "t.jsonl"]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    assert_eq!(trace_lines(&dir, "t.jsonl").len(), 5);
}

fn assert_config_roundtrip(path: &Path) {
    let text = fs::read_to_string(path).unwrap();
    let parsed: toml::Value = toml::from_str(&text).unwrap();
    let rewritten = toml::to_string(&parsed).unwrap();
    let reparsed: toml::Value = toml::from_str(&rewritten).unwrap();
    assert_eq!(parsed, reparsed);
}

#[test]
fn the_steep_config_survives_a_toml_roundtrip() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "steep.toml", STEEP_FIXED);
    assert_config_roundtrip(&dir.path().join(config));
}
