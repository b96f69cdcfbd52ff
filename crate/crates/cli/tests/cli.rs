use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::sync::mpsc::{channel, Receiver};
use std::time::Duration;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cryptocam"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn json_lines(out: &Output) -> Vec<Value> {
    text(&out.stdout)
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

/// A long-running subcommand whose stdout lines arrive on a channel.
struct Daemon {
    child: Child,
    lines: Receiver<String>,
}

impl Daemon {
    fn start(args: &[&str]) -> Self {
        let mut child = bin()
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap();
        let out = child.stdout.take().unwrap();
        let (tx, lines) = channel();
        std::thread::spawn(move || {
            for line in BufReader::new(out).lines().map_while(Result::ok) {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Daemon { child, lines }
    }

    /// Next JSON line whose "event" field equals `event`.
    fn expect(&self, event: &str) -> Value {
        loop {
            let line = self
                .lines
                .recv_timeout(Duration::from_secs(20))
                .unwrap_or_else(|_| panic!("no {event:?} line"));
            if let Ok(v) = serde_json::from_str::<Value>(&line) {
                if v["event"] == event {
                    return v;
                }
            }
        }
    }

    /// Waits up to five seconds for the process to exit on its own.
    fn exited_ok(&mut self) -> bool {
        for _ in 0..50 {
            if let Some(s) = self.child.try_wait().unwrap() {
                return s.success();
            }
            std::thread::sleep(Duration::from_millis(100));
        }
        false
    }

    fn terminate(mut self) -> std::process::ExitStatus {
        unsafe {
            libc::kill(self.child.id() as libc::pid_t, libc::SIGTERM);
        }
        self.child.wait().unwrap()
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.child.kill();
    }
}

fn camera_toml(dir: &Path, store: &str, url_base: &str, mode: &str, limit: Option<u64>) -> std::path::PathBuf {
    let limit = limit.map(|l| format!("limit_bytes = {l}\n")).unwrap_or_default();
    let body = format!(
        r#"camera_id = "0a0b0c0d0e0f1011"
segment_interval_s = 1
advert_interval_ms = 100
mode = "{mode}"
store = "{store}"

[descriptor]
name = "Test bench"
location = {{ lat = 51.5, lon = -0.12 }}
url_template = "{url_base}/{{id}}.mp4"

[source]
kind = "synthetic"
seed = 9
rate_bytes_per_s = 300
{limit}"#
    );
    let path = dir.join(format!("{mode}.toml"));
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn keypacket_decode_prints_fields() {
    let hex = format!("{}05003c0102030405060708{}", "11".repeat(32), "aa".repeat(21));
    let out = run(&["keypacket", "decode", &hex]);
    assert!(out.status.success());
    let s = text(&out.stdout);
    assert!(s.contains(&format!("key: {}", "11".repeat(32))));
    assert!(s.contains("seq: 5"));
    assert!(s.contains("reconnect_interval_s: 60"));
    assert!(s.contains("video_id: 0102030405060708"));
}

#[test]
fn domain_errors_exit_one_with_a_single_line() {
    let out = run(&["keypacket", "decode", "abcd"]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: "));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["client", "fetch"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn offline_camera_run_then_verify_chain() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    std::fs::create_dir(&store).unwrap();
    let cfg = camera_toml(dir.path(), store.to_str().unwrap(), "http://127.0.0.1:1", "auto", Some(1000));
    let out = run(&["camera", "run", "--config", cfg.to_str().unwrap(), "--virtual-clock"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let rotations: Vec<Value> = json_lines(&out).into_iter().filter(|v| v["event"] == "rotation").collect();
    assert_eq!(rotations.len(), 4);
    assert!(text(&out.stdout).lines().all(|l| !l.contains("\"key\"")));

    let ok = run(&["verify-chain", store.to_str().unwrap()]);
    assert!(ok.status.success(), "{}", text(&ok.stderr));
    assert!(text(&ok.stdout).contains("all ok"));

    let victim = store.join(format!("{}.mp4", rotations[1]["video_id"].as_str().unwrap()));
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    let bad = run(&["verify-chain", store.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    let report = json_lines(&bad).remove(0);
    assert_eq!(report["mismatched"], serde_json::json!([rotations[1]["video_id"]]));
}

#[test]
fn live_store_camera_and_client() {
    let dir = tempfile::tempdir().unwrap();
    let store_dir = dir.path().join("srv");
    let req_log = dir.path().join("requests.jsonl");
    let wallet = dir.path().join("wallet.octw");
    let store = Daemon::start(&[
        "store", "serve", "--dir", store_dir.to_str().unwrap(), "--bind", "127.0.0.1:0",
        "--request-log", req_log.to_str().unwrap(),
    ]);
    let url = store.expect("serving")["url"].as_str().unwrap().to_string();

    let cfg = camera_toml(dir.path(), &url, &url, "auto", Some(900));
    let mut camera = Daemon::start(&["camera", "run", "--config", cfg.to_str().unwrap()]);
    let link = camera.expect("listening")["link"].as_str().unwrap().to_string();
    let listen = run(&[
        "client", "listen", "--camera", &link, "--wallet", wallet.to_str().unwrap(), "--duration-s", "4.5",
    ]);
    assert!(listen.status.success(), "{}", text(&listen.stderr));
    let keys: Vec<Value> = json_lines(&listen).into_iter().filter(|v| v["event"] == "key").collect();
    assert_eq!(keys.len(), 3, "{}", text(&listen.stdout));
    assert!(camera.exited_ok());

    let sessions = json_lines(&run(&["client", "sessions", "--wallet", wallet.to_str().unwrap()]));
    assert_eq!(sessions.len(), 1);
    assert_eq!(sessions[0]["video_ids"].as_array().unwrap().len(), 3);

    let mut footage = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        let id = k["video_id"].as_str().unwrap();
        let out_file = dir.path().join(format!("{id}.raw"));
        let f = run(&["client", "fetch", id, "--wallet", wallet.to_str().unwrap(), "--out", out_file.to_str().unwrap()]);
        assert!(f.status.success(), "{}", text(&f.stderr));
        let summary = json_lines(&f).remove(0);
        assert_eq!(summary["chain"], if i < 2 { "confirmed" } else { "no-successor" });
        footage.extend(std::fs::read(&out_file).unwrap());
    }
    assert_eq!(footage.len(), 900);

    let exported = dir.path().join("export.octw");
    let other = dir.path().join("other.octw");
    assert!(run(&["client", "export", "--wallet", wallet.to_str().unwrap(), "--out", exported.to_str().unwrap()]).status.success());
    let imp = run(&["client", "import", exported.to_str().unwrap(), "--wallet", other.to_str().unwrap()]);
    assert!(imp.status.success());
    assert_eq!(json_lines(&imp)[0]["added"], 3);
    let again = run(&["client", "import", exported.to_str().unwrap(), "--wallet", other.to_str().unwrap()]);
    assert_eq!(json_lines(&again)[0]["added"], 0);

    let verify = run(&["verify-chain", store_dir.to_str().unwrap(), "--wallet", other.to_str().unwrap()]);
    assert!(verify.status.success(), "{}", text(&verify.stderr));

    let status = store.terminate();
    assert!(status.success());
    let log = std::fs::read_to_string(&req_log).unwrap();
    assert!(log.lines().filter(|l| l.contains("\"PUT\"")).count() == 3);
    let records = std::fs::read_to_string(&wallet).unwrap();
    for line in records.lines().skip(1) {
        let v: Value = serde_json::from_str(line.split_once(' ').unwrap().1).unwrap();
        if let Some(key) = v["key"].as_str() {
            assert!(!log.contains(key));
        }
    }
}

#[test]
fn manual_camera_releases_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    std::fs::create_dir(&store).unwrap();
    let cfg = camera_toml(dir.path(), store.to_str().unwrap(), "http://127.0.0.1:1", "manual", None);
    let camera = Daemon::start(&["camera", "run", "--config", cfg.to_str().unwrap()]);
    let control = camera.expect("listening")["control"].as_str().unwrap().to_string();
    let first = camera.expect("rotation")["video_id"].as_str().unwrap().to_string();
    camera.expect("withheld");
    assert_eq!(std::fs::read_dir(&store).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "mp4")
    }).count(), 0);

    let ok = run(&["camera", "release", &first, "--control", &control]);
    assert!(ok.status.success(), "{}", text(&ok.stderr));
    assert!(store.join(format!("{first}.mp4")).exists());
    let twice = run(&["camera", "release", &first, "--control", &control]);
    assert_eq!(twice.status.code(), Some(1));

    assert!(camera.terminate().success());
}

#[test]
fn sim_run_and_compare_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario.toml");
    std::fs::write(
        &scenario,
        r#"duration_s = 120
default_radio = { radius_m = 10.0 }

[[cameras]]
name = "kitchen"
position = [0.0, 0.0]
orientation_deg = 90.0
fov_deg = 90.0
view_depth_m = 5.0
segment_interval_s = 60

[[subjects]]
name = "cook"
waypoints = [[0.0, 0.0, 3.0]]

[[subjects]]
name = "upstairs"
waypoints = [[0.0, 0.0, -6.0]]

[[subjects]]
name = "visitor"
waypoints = [[0.0, 0.0, 50.0], [39.0, 0.0, 50.0], [40.0, 0.0, 3.0], [49.0, 0.0, 3.0], [50.0, 0.0, 50.0]]
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let r = run(&["sim", "run", scenario.to_str().unwrap(), "--seed", "3", "--out-dir", out_dir.to_str().unwrap()]);
    assert!(r.status.success(), "{}", text(&r.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let upstairs = report["subjects"].as_array().unwrap().iter().find(|s| s["name"] == "upstairs").unwrap();
    assert_eq!(upstairs["bleed"], 2);
    let csv = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("bleed"));
    assert!(out_dir.join("deliveries.jsonl").exists());

    let c = run(&["sim", "compare", scenario.to_str().unwrap(), "--interval-s", "60", "--chunks", "60"]);
    assert!(c.status.success(), "{}", text(&c.stderr));
    let cmp = json_lines(&c).remove(0);
    assert_eq!(cmp["chunk_count"], 60);
    assert!(cmp["chunked"]["totals"]["over_share_s"].as_f64().unwrap() < cmp["coarse"]["totals"]["over_share_s"].as_f64().unwrap());

    let missing = run(&["sim", "run", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn store_expires_old_objects_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let object = dir.path().join("0102030405060708.mp4");
    std::fs::write(&object, b"ciphertext").unwrap();
    std::thread::sleep(Duration::from_millis(1100));
    let store = Daemon::start(&[
        "store", "serve", "--dir", dir.path().to_str().unwrap(), "--bind", "127.0.0.1:0", "--max-age-s", "1",
    ]);
    store.expect("serving");
    assert_eq!(store.expect("expired")["object"], "0102030405060708.mp4");
    assert!(!object.exists());
    assert!(store.terminate().success());
}
