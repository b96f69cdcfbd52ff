use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Subcommand};
use serde_json::json;

use cryptocam::camera::{
    run_camera_with, Camera, CameraConfig, CameraEvent, Clock, StoreTarget, SystemClock,
    VirtualClock,
};
use cryptocam::protocol::VideoId;
use cryptocam::store::ObjectStore;
use cryptocam::transport::udp::UdpCameraLink;
use cryptocam::transport::Broadcaster;

use crate::{emit, install_signal_handlers, STOP};

#[derive(Subcommand)]
pub enum CameraCmd {
    /// Record, encrypt and broadcast keys until stopped or the source ends.
    Run(RunArgs),
    /// Release a withheld segment of a running manual-mode camera.
    Release {
        /// Video id (16 hex characters).
        video_id: String,
        /// Control address printed by `camera run`.
        #[arg(long)]
        control: SocketAddr,
    },
}

#[derive(Args)]
pub struct RunArgs {
    /// Camera configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// UDP address listeners connect to.
    #[arg(long, default_value = "127.0.0.1:0")]
    link: SocketAddr,
    /// TCP address accepting release requests.
    #[arg(long, default_value = "127.0.0.1:0")]
    control: SocketAddr,
    /// Chain manifest path; defaults to chain.jsonl inside a directory store.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run on a simulated clock that jumps between deadlines (offline generation).
    #[arg(long)]
    virtual_clock: bool,
}

pub fn run(cmd: CameraCmd) -> anyhow::Result<()> {
    match cmd {
        CameraCmd::Run(args) => run_daemon(args),
        CameraCmd::Release { video_id, control } => release(&video_id, control),
    }
}

fn release(video_id: &str, control: SocketAddr) -> anyhow::Result<()> {
    let id: VideoId = video_id.parse()?;
    let mut stream = TcpStream::connect_timeout(&control, Duration::from_secs(5))
        .with_context(|| format!("connecting to camera control {control}"))?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    writeln!(stream, "release {id}")?;
    let mut reply = String::new();
    BufReader::new(stream).read_line(&mut reply)?;
    match reply.trim().strip_prefix("ok") {
        Some(_) => {
            emit(&json!({"event": "released", "video_id": id}));
            Ok(())
        }
        None => bail!("{}", reply.trim().trim_start_matches("error: ")),
    }
}

fn serve_control<B: Broadcaster, O: ObjectStore>(listener: &TcpListener, camera: &mut Camera<B, O>, now: u64) {
    while let Ok((stream, _)) = listener.accept() {
        let _ = stream.set_nonblocking(false);
        let _ = stream.set_read_timeout(Some(Duration::from_secs(2)));
        let mut line = String::new();
        let mut reader = BufReader::new(&stream);
        if reader.read_line(&mut line).is_err() {
            continue;
        }
        let reply = match line.trim().split_once(' ') {
            Some(("release", id)) => match id.parse::<VideoId>() {
                Ok(id) => match camera.release_segment(id, now) {
                    Ok(()) => "ok".to_string(),
                    Err(e) => format!("error: {e}"),
                },
                Err(e) => format!("error: {e}"),
            },
            _ => "error: unknown request".to_string(),
        };
        let _ = writeln!(&stream, "{reply}");
    }
}

fn run_daemon(args: RunArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let config = CameraConfig::from_toml(&text)?;
    let source = config.source.open()?;
    let store = config.store_target.open()?;
    let manifest_path = args.manifest.clone().or_else(|| match &config.store_target {
        StoreTarget::Directory(d) => Some(d.join("chain.jsonl")),
        StoreTarget::Http(_) => None,
    });
    let mut manifest: Option<File> = match &manifest_path {
        Some(p) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening manifest {}", p.display()))?,
        ),
        None => None,
    };

    let link = UdpCameraLink::bind(args.link, config.address())?;
    let control = TcpListener::bind(args.control).context("binding control socket")?;
    control.set_nonblocking(true)?;
    emit(&json!({
        "event": "listening",
        "link": link.local_addr()?.to_string(),
        "control": control.local_addr()?.to_string(),
        "address": config.address().to_string(),
        "mode": config.mode,
    }));

    install_signal_handlers();
    let mut camera = Camera::new(config, source, link, store)?;
    let system = SystemClock;
    let virtual_clock = VirtualClock::new(system.now_ms());
    let clock: &dyn Clock = if args.virtual_clock { &virtual_clock } else { &system };

    let mut write_error = None;
    run_camera_with(&mut camera, clock, &STOP, 50, |cam, now| {
        serve_control(&control, cam, now);
        for event in cam.take_events() {
            if let (CameraEvent::Rotation { .. }, Some(m)) = (&event, manifest.as_mut()) {
                let line = serde_json::to_string(&event).expect("events serialize");
                if let Err(e) = writeln!(m, "{line}").and_then(|_| m.flush()) {
                    write_error.get_or_insert(e);
                }
            }
            emit(&event);
        }
    })?;
    if let Some(e) = write_error {
        bail!("writing chain manifest: {e}");
    }
    Ok(())
}
