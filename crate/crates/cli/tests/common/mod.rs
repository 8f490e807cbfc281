#![allow(dead_code)]

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use cvr_core::model::{CrashReport, Patch, ScanMode};
use serde_json::{json, Value};

pub const DIFF: &str = "--- a/src/parse.c\n+++ b/src/parse.c\n@@ -10,3 +10,4 @@\n+  if (len < 4) return -1;\n";

pub fn cvr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cvr"))
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn cvr");
    assert!(
        out.status.success(),
        "cvr failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub struct Server {
    child: Child,
    pub base: String,
}

impl Server {
    pub fn start(config: &Path) -> Self {
        let mut child = cvr()
            .arg("serve")
            .arg("--config")
            .arg(config)
            .env("CVR_LISTEN_ADDR", "127.0.0.1:0")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_owned();
        Server {
            child,
            base: format!("http://{addr}"),
        }
    }

    pub fn get(&self, path: &str) -> Value {
        reqwest::blocking::get(format!("{}{path}", self.base))
            .unwrap()
            .json()
            .unwrap()
    }

    pub fn post(&self, path: &str, body: &Value) -> reqwest::blocking::Response {
        reqwest::blocking::Client::new()
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .unwrap()
    }

    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn crash(pov: &[u8]) -> CrashReport {
    CrashReport::new("libfoo", "fuzz_parse", pov.to_vec(), "asan:heap-buffer-overflow", ScanMode::Full, 0).unwrap()
}

pub fn submission(pov: &[u8]) -> Value {
    use base64::Engine;
    json!({
        "project_id": "libfoo",
        "harness_id": "fuzz_parse",
        "pov_blob": base64::engine::general_purpose::STANDARD.encode(pov),
        "sanitizer_signature": "asan:heap-buffer-overflow",
    })
}

/// Service config whose single agent prints `DIFF`; the simulated backend
/// says that patch fixes both PoVs.
pub fn write_config(dir: &Path) -> PathBuf {
    let (a, b) = (crash(b"AAAA"), crash(b"BBBB"));
    let patch = Patch::derive_id(&a.crash_id, "patcher", DIFF);
    let command = format!("printf -- '{}'", DIFF.replace('\n', "\\n"));
    let config = json!({
        "schema_version": 1,
        "num_lanes": 1,
        "agents": [{
            "agent_name": "patcher",
            "provider_id": "local",
            "preference_rank": 1,
            "timeout_ms": 60000,
            "command": command,
        }],
        "validation": { "backend": { "kind": "simulated", "matrix": {
            "resolves": { patch.as_str(): [a.crash_id.as_str(), b.crash_id.as_str()] }
        } } },
        "log_path": "events.jsonl",
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}
