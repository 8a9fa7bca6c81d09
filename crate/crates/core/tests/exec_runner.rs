//! Process-level tests of the execution orchestrator with a fake runner.
#![cfg(target_os = "linux")]

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use testgenie_core::exec_orchestrator::{ExecOrchestrator, Outcome, RunnerConfig, ALLOWLIST_FILE};
use testgenie_core::prompt_forge::EnvVarDescriptor;

// The "script" handed to this runner is a directive: a JSON object with
// passed/failed counts and messages, or one of SLEEP, SYNTAX, ENV.
const FAKE_RUNNER: &str = r#"
import json, sys, time
src = open(sys.argv[1]).read()
if src.startswith("SLEEP"):
    import subprocess
    subprocess.Popen(["sleep", "30"])
    time.sleep(30)
elif src.startswith("SYNTAX"):
    sys.stderr.write("SyntaxError: Unexpected token\n")
    sys.exit(1)
elif src.startswith("ENV"):
    raw = open("/proc/self/environ", "rb").read().decode()
    env = dict(kv.split("=", 1) for kv in raw.split("\0") if kv)
    print(json.dumps({"numTotalTests": 1, "numPassedTests": 1, "numFailedTests": 0,
                      "testResults": [{"message": json.dumps(env)}]}))
else:
    spec = json.loads(src)
    msgs = spec.get("messages", [])
    print("log line before the report")
    print(json.dumps({"numTotalTests": spec["passed"] + spec["failed"],
                      "numPassedTests": spec["passed"], "numFailedTests": spec["failed"],
                      "success": spec["failed"] == 0,
                      "testResults": [{"message": m} for m in msgs] + [{"message": "", "echo": src}]}))
    sys.exit(1 if spec["failed"] else 0)
"#;

fn sandbox() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("runner.py"), FAKE_RUNNER).unwrap();
    dir
}

fn runner(timeout: f64) -> RunnerConfig {
    RunnerConfig {
        program: "python3".into(),
        args: vec!["runner.py".into(), "{file}".into()],
        timeout_seconds: timeout,
        ..RunnerConfig::default()
    }
}

fn orchestrator(dir: &Path) -> ExecOrchestrator {
    ExecOrchestrator::new(dir, runner(30.0))
}

#[test]
fn passing_script_is_run() {
    let dir = sandbox();
    let r = orchestrator(dir.path()).execute(r#"{"passed": 2, "failed": 0}"#).unwrap();
    assert_eq!(r.outcome, Outcome::Run);
    assert_eq!((r.total, r.passed, r.failed), (2, 2, 0));
    assert!(r.failure_messages.is_empty());
    assert!(r.raw_report.is_some());
}

#[test]
fn failing_assertion_is_run_with_message() {
    let dir = sandbox();
    let r = orchestrator(dir.path())
        .execute(r#"{"passed": 1, "failed": 1, "messages": ["expect(received).toBe(expected)"]}"#)
        .unwrap();
    assert_eq!(r.outcome, Outcome::Run);
    assert_eq!((r.total, r.passed, r.failed), (2, 1, 1));
    assert_eq!(r.failure_messages, ["expect(received).toBe(expected)"]);
}

#[test]
fn broken_script_is_error_with_stderr() {
    let dir = sandbox();
    let r = orchestrator(dir.path()).execute("SYNTAX ;;;").unwrap();
    assert_eq!(r.outcome, Outcome::Error);
    assert_eq!((r.total, r.passed, r.failed), (0, 0, 0));
    assert!(r.failure_messages[0].contains("SyntaxError"));
}

#[test]
fn timeout_is_error() {
    let dir = sandbox();
    let started = Instant::now();
    let r = ExecOrchestrator::new(dir.path(), runner(0.5)).execute("SLEEP").unwrap();
    // the grandchild holds the output pipes; killing only the direct child
    // would leave them open
    assert!(started.elapsed() < Duration::from_secs(10));
    assert_eq!(r.outcome, Outcome::Error);
    assert_eq!(r.failure_messages, ["timeout after 0.5 s"]);
}

#[test]
fn spawn_failure_is_error() {
    let dir = sandbox();
    let cfg = RunnerConfig {
        program: "/nonexistent/runner".into(),
        ..runner(5.0)
    };
    let r = ExecOrchestrator::new(dir.path(), cfg).execute("{}").unwrap();
    assert_eq!(r.outcome, Outcome::Error);
    assert!(r.failure_messages[0].contains("failed to start"));
}

#[test]
fn missing_sandbox_is_reported() {
    let err = orchestrator(Path::new("/nonexistent/sandbox")).execute("X").unwrap_err();
    assert!(err.to_string().contains("/nonexistent/sandbox"));
}

#[test]
fn child_sees_only_allowlist_and_baseline() {
    let dir = sandbox();
    std::fs::write(
        dir.path().join(ALLOWLIST_FILE),
        "CATFACT_BASE_ENDPOINT: base url of cat facts API\nUNSET_BUT_ALLOWED: never set\n",
    )
    .unwrap();
    std::env::set_var("TESTGENIE_OUTSIDE_SECRET", "leak");
    let values = HashMap::from([("CATFACT_BASE_ENDPOINT".to_string(), "http://127.0.0.1:1".to_string())]);
    let r = orchestrator(dir.path()).with_env_values(values).execute("ENV").unwrap();
    let env: HashMap<String, String> = serde_json::from_str(&r.failure_messages[0]).unwrap();
    let baseline = RunnerConfig::default().baseline_env;
    for key in env.keys() {
        assert!(
            key == "CATFACT_BASE_ENDPOINT" || key == "UNSET_BUT_ALLOWED" || baseline.contains(key),
            "unexpected variable {key}"
        );
    }
    assert_eq!(env["CATFACT_BASE_ENDPOINT"], "http://127.0.0.1:1");
    assert!(!env.contains_key("TESTGENIE_OUTSIDE_SECRET"));
    assert!(env.contains_key("PATH"));
    let allow: Vec<EnvVarDescriptor> = orchestrator(dir.path()).allowlist().unwrap();
    assert_eq!(allow.len(), 2);
}

#[test]
fn repeated_runs_are_deterministic() {
    let dir = sandbox();
    let o = orchestrator(dir.path());
    let code = r#"{"passed": 2, "failed": 1, "messages": ["m"]}"#;
    let counts: Vec<(u32, u32, u32)> = (0..3)
        .map(|_| {
            let r = o.execute(code).unwrap();
            (r.total, r.passed, r.failed)
        })
        .collect();
    assert!(counts.iter().all(|c| *c == (3, 2, 1)));
}

#[test]
fn concurrent_runs_do_not_share_files() {
    let dir = sandbox();
    let o = orchestrator(dir.path());
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4u32)
            .map(|i| {
                let o = &o;
                s.spawn(move || {
                    let code = format!(r#"{{"passed": {i}, "failed": 0, "id": {i}}}"#);
                    let r = o.execute(&code).unwrap();
                    let echoed = r.raw_report.unwrap()["testResults"]
                        .as_array()
                        .unwrap()
                        .last()
                        .unwrap()["echo"]
                        .as_str()
                        .unwrap()
                        .to_string();
                    (code, echoed, r.passed)
                })
            })
            .collect();
        for (i, h) in handles.into_iter().enumerate() {
            let (code, echoed, passed) = h.join().unwrap();
            assert_eq!(code, echoed);
            assert_eq!(passed, i as u32);
        }
    });
    let leftovers = std::fs::read_dir(dir.path().join(".runs")).unwrap().count();
    assert_eq!(leftovers, 0, "run directories are removed");
}
