use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use anyhow::Context;
use clap::Subcommand;
use serde_json::json;

use cryptocam::store::{FsStore, ServeOptions, StoreServer};

use crate::{emit, install_signal_handlers, STOP};

#[derive(Subcommand)]
pub enum StoreCmd {
    /// Serve footage over HTTP: GET/HEAD for everyone, PUT from loopback only.
    Serve {
        /// Directory holding the footage.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Refuse uploads.
        #[arg(long)]
        read_only: bool,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Write the request log (JSON lines) here on shutdown.
        #[arg(long)]
        request_log: Option<PathBuf>,
        /// Delete objects older than this many seconds (checked once a second).
        #[arg(long)]
        max_age_s: Option<u64>,
    },
}

pub fn run(cmd: StoreCmd) -> anyhow::Result<()> {
    let StoreCmd::Serve {
        dir,
        bind,
        read_only,
        workers,
        request_log,
        max_age_s,
    } = cmd;
    let store = FsStore::open(&dir)?;
    let server = StoreServer::start(
        store.clone(),
        &bind,
        ServeOptions {
            allow_put: !read_only,
            workers: workers.max(1),
        },
    )?;
    install_signal_handlers();
    emit(&json!({"event": "serving", "url": server.base_url(), "dir": dir}));
    let mut last_sweep = Instant::now();
    while !STOP.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
        if let Some(age) = max_age_s {
            if last_sweep.elapsed() >= Duration::from_secs(1) {
                last_sweep = Instant::now();
                for key in store.sweep_older_than(Duration::from_secs(age))? {
                    emit(&json!({"event": "expired", "object": key.file_name()}));
                }
            }
        }
    }
    let log = server.request_log();
    drop(server);
    if let Some(path) = request_log {
        let mut f = std::fs::File::create(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        for entry in &log {
            writeln!(f, "{}", serde_json::to_string(entry)?)?;
        }
    }
    emit(&json!({"event": "stopped", "requests": log.len()}));
    Ok(())
}
