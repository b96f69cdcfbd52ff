use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::Subcommand;
use serde_json::json;

use cryptocam::camera::{Clock, SystemClock};
use cryptocam::client::{
    export_wallet, fetch_and_decrypt, group_sessions, import_wallet, ChainCheck, GapRule,
    Listener, Wallet,
};
use cryptocam::protocol::VideoId;
use cryptocam::store::{Fetcher, FsStore, HttpFetcher};
use cryptocam::transport::udp::UdpScanner;
use cryptocam::transport::Address;

use crate::{emit, install_signal_handlers, STOP};

#[derive(Subcommand)]
pub enum ClientCmd {
    /// Listen to one or more cameras and add their keys to the wallet.
    Listen {
        /// Camera link address (repeatable).
        #[arg(long = "camera", required = true)]
        cameras: Vec<SocketAddr>,
        #[arg(long)]
        wallet: PathBuf,
        /// Stop after this many seconds instead of waiting for a signal.
        #[arg(long)]
        duration_s: Option<f64>,
    },
    /// Group wallet records into sessions (one JSON line each).
    Sessions {
        #[arg(long)]
        wallet: PathBuf,
        #[arg(long, default_value_t = 2)]
        ri_multiplier: u32,
        #[arg(long, default_value_t = 90)]
        min_gap_s: u64,
        #[arg(long, default_value_t = 25.0)]
        merge_radius_m: f64,
    },
    /// Download and decrypt one segment.
    Fetch {
        /// Video id (16 hex characters).
        video_id: String,
        #[arg(long)]
        wallet: PathBuf,
        /// Write the decrypted footage here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Read footage from a local store directory instead of its URL.
        #[arg(long)]
        store_dir: Option<PathBuf>,
    },
    /// Export records received in a time range to a standalone wallet file.
    Export {
        #[arg(long)]
        wallet: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        from_ms: u64,
        #[arg(long, default_value_t = u64::MAX)]
        to_ms: u64,
    },
    /// Merge an exported wallet file into the wallet.
    Import {
        file: PathBuf,
        #[arg(long)]
        wallet: PathBuf,
    },
}

pub fn run(cmd: ClientCmd) -> anyhow::Result<()> {
    match cmd {
        ClientCmd::Listen {
            cameras,
            wallet,
            duration_s,
        } => listen(&cameras, wallet, duration_s),
        ClientCmd::Sessions {
            wallet,
            ri_multiplier,
            min_gap_s,
            merge_radius_m,
        } => {
            let w = Wallet::load(&wallet)?;
            let rule = GapRule {
                ri_multiplier,
                min_gap_s,
                merge_radius_m,
            };
            for (i, s) in group_sessions(&w, &rule).iter().enumerate() {
                emit(&json!({
                    "session": i + 1,
                    "start_ms": s.start_ms,
                    "end_ms": s.end_ms,
                    "cameras": s.cameras,
                    "camera_names": s.camera_names,
                    "video_ids": s.video_ids,
                }));
            }
            Ok(())
        }
        ClientCmd::Fetch {
            video_id,
            wallet,
            out,
            store_dir,
        } => {
            let id: VideoId = video_id.parse()?;
            let fetcher: Box<dyn Fetcher> = match store_dir {
                Some(d) => Box::new(FsStore::open(d)?),
                None => Box::new(HttpFetcher::default()),
            };
            fetch(id, &Wallet::load(&wallet)?, fetcher.as_ref(), out)
        }
        ClientCmd::Export {
            wallet,
            out,
            from_ms,
            to_ms,
        } => {
            let w = Wallet::load(&wallet)?;
            let f = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            export_wallet(&w, from_ms, to_ms, f)?;
            Ok(())
        }
        ClientCmd::Import { file, wallet } => {
            let f = std::fs::File::open(&file).with_context(|| format!("opening {}", file.display()))?;
            let incoming = import_wallet(f).with_context(|| format!("importing {}", file.display()))?;
            let mut w = Wallet::load(&wallet)?;
            let added = w.merge(incoming);
            w.save(&wallet)?;
            emit(&json!({"event": "imported", "added": added, "records": w.len()}));
            Ok(())
        }
    }
}

fn listen(cameras: &[SocketAddr], path: PathBuf, duration_s: Option<f64>) -> anyhow::Result<()> {
    let mut wallet = Wallet::load(&path)?;
    let own = Address([0x1E, 0x57, 0xE0, 0, 0, std::process::id() as u8]);
    let mut listeners = cameras
        .iter()
        .map(|c| Ok(Listener::new(UdpScanner::connect(*c, own)?, Wallet::new())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    install_signal_handlers();
    let started = Instant::now();
    let clock = SystemClock;
    emit(&json!({"event": "listening", "cameras": cameras}));
    loop {
        let now = clock.now_ms();
        let mut changed = false;
        for l in &mut listeners {
            l.poll(now);
            let fresh = l.take_wallet();
            for r in fresh.records() {
                if wallet.ingest(r.clone()) {
                    changed = true;
                    emit(&json!({
                        "event": "key",
                        "camera": r.camera_address,
                        "camera_name": r.camera_name,
                        "seq": r.seq,
                        "video_id": r.video_id,
                        "tier": r.tier,
                    }));
                }
            }
            for t in fresh.tokens() {
                changed |= wallet.ingest_token(t.token.clone(), t.received_at_ms);
            }
        }
        if changed {
            wallet.save(&path)?;
        }
        let expired = duration_s.is_some_and(|d| started.elapsed() >= Duration::from_secs_f64(d));
        if STOP.load(Ordering::SeqCst) || expired {
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    wallet.save(&path)?;
    emit(&json!({"event": "stopped", "records": wallet.len()}));
    Ok(())
}

fn fetch(id: VideoId, wallet: &Wallet, fetcher: &dyn Fetcher, out: Option<PathBuf>) -> anyhow::Result<()> {
    let Some(record) = wallet.find(&id) else {
        bail!("no key for {id} in wallet");
    };
    let tokens = wallet.tokens_for(&id);
    let decrypted = fetch_and_decrypt(record, &tokens, fetcher, wallet.successor_of(record))?;
    let plaintext = decrypted.footage.plaintext();
    if let Some(path) = &out {
        std::fs::write(path, &plaintext).with_context(|| format!("writing {}", path.display()))?;
    }
    emit(&json!({
        "video_id": id,
        "chain": decrypted.chain,
        "stored_bytes": decrypted.stored_bytes,
        "plaintext_bytes": plaintext.len(),
        "locked_chunks": decrypted.footage.locked_chunks(),
    }));
    if decrypted.chain == ChainCheck::Mismatch {
        bail!("{id} does not match the hash announced by its successor");
    }
    Ok(())
}
