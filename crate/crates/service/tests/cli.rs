use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn concept_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn write_config(dir: &Path) -> PathBuf {
    let fixture = concept_dir().join("concepts.replay.jsonl");
    let config = format!(
        "data_dir = \"data\"\n\n[provider]\nkind = \"replay\"\nfixture_path = {:?}\n\n[toolchain]\nkind = \"mock\"\n",
        fixture.to_str().unwrap()
    );
    let path = dir.join("sketchsmith.toml");
    std::fs::write(&path, config).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sketchsmith"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn chat_knobs_compile_upload_replay() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let concept = concept_dir().join("concepts/fit_fit");
    let prompt = std::fs::read_to_string(concept.join("prompt.txt")).unwrap();

    let out = run(
        &config,
        &[
            "chat",
            "--manifest",
            concept.join("manifest.json").to_str().unwrap(),
            "--instruction",
            &prompt,
        ],
    );
    let sketch = stdout(&out);
    assert!(sketch.contains("const int PAW_TARGET = 50;"));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let id = stderr
        .lines()
        .find_map(|l| l.strip_prefix("session "))
        .unwrap()
        .trim()
        .to_owned();

    let knobs: serde_json::Value =
        serde_json::from_str(&stdout(&run(&config, &["knobs", "list", "--session", &id]))).unwrap();
    assert!(knobs["knobs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|k| k["id"] == "PAW_TARGET"));

    // The first reply fails to compile; the recorded repair turn fixes it.
    assert_eq!(
        stdout(&run(&config, &["compile", "--session", &id])).trim(),
        "succeeded"
    );
    let patched = stdout(&run(
        &config,
        &["knobs", "set", "--session", &id, "PAW_TARGET", "30"],
    ));
    assert!(patched.contains("const int PAW_TARGET = 30;"));
    assert_eq!(
        stdout(&run(&config, &["compile", "--session", &id])).trim(),
        "succeeded"
    );
    assert!(stdout(&run(
        &config,
        &["upload", "--session", &id, "--port", "MOCK0"]
    ))
    .contains("MOCK0"));

    let failed = run(&config, &["upload", "--session", &id, "--port", "COM7"]);
    assert!(!failed.status.success());

    let replayed: serde_json::Value =
        serde_json::from_str(&stdout(&run(&config, &["replay", "--session", &id]))).unwrap();
    assert_eq!(replayed["id"], id.as_str());
    assert_eq!(replayed["sketch_versions"].as_array().unwrap().len(), 3);

    let ports: serde_json::Value =
        serde_json::from_str(&stdout(&run(&config, &["ports"]))).unwrap();
    assert_eq!(ports[0]["port"], "MOCK0");
}

#[test]
fn missing_config_is_an_error() {
    let out = run(Path::new("/nonexistent/sketchsmith.toml"), &["ports"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/sketchsmith.toml"));
}

fn get(addr: &str, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(addr).ok()?;
    write!(
        stream,
        "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .ok()?;
    let mut response = String::new();
    stream.read_to_string(&mut response).ok()?;
    Some(response)
}

#[test]
fn serve_answers_http() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let addr = {
        let probe = TcpListener::bind("127.0.0.1:0").unwrap();
        probe.local_addr().unwrap().to_string()
    };
    let mut child = Command::new(env!("CARGO_BIN_EXE_sketchsmith"))
        .arg("--config")
        .arg(&config)
        .args(["serve", "--bind", &addr])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let response = loop {
        if let Some(r) = get(&addr, "/api/ports") {
            break r;
        }
        assert!(Instant::now() < deadline, "server did not come up");
        std::thread::sleep(Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"MOCK0\""));
}
