mod camera;
mod client;
mod sim;
mod store;
mod verify;

use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Parser, Subcommand};

use cryptocam::protocol::decode_key_packet;

/// Set by SIGINT/SIGTERM; long-running commands poll it and shut down cleanly.
pub static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

pub fn install_signal_handlers() {
    let handler = on_signal as extern "C" fn(libc::c_int);
    // SAFETY: the handler only stores to an atomic, which is async-signal-safe.
    unsafe {
        libc::signal(libc::SIGINT, handler as libc::sighandler_t);
        libc::signal(libc::SIGTERM, handler as libc::sighandler_t);
    }
}

/// Prints one JSON value per line to stdout and flushes.
pub fn emit<T: serde::Serialize>(value: &T) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = serde_json::to_writer(&mut out, value);
    let _ = writeln!(out);
    let _ = out.flush();
}

#[derive(Parser)]
#[command(name = "cryptocam", version, about = "Encrypted camera segments with proximity key broadcast")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run or control a camera daemon.
    #[command(subcommand)]
    Camera(camera::CameraCmd),
    /// Serve a directory of encrypted footage over HTTP.
    #[command(subcommand)]
    Store(store::StoreCmd),
    /// Collect keys, browse sessions and fetch footage.
    #[command(subcommand)]
    Client(client::ClientCmd),
    /// Check the hash chain of a camera's stored footage.
    VerifyChain(verify::VerifyArgs),
    /// Run leakage simulations.
    #[command(subcommand)]
    Sim(sim::SimCmd),
    /// Inspect key packets.
    #[command(subcommand)]
    Keypacket(KeypacketCmd),
}

#[derive(Subcommand)]
enum KeypacketCmd {
    /// Decode a 64-byte key packet given as hex.
    Decode { hex: String },
}

fn keypacket(cmd: KeypacketCmd) -> anyhow::Result<()> {
    match cmd {
        KeypacketCmd::Decode { hex: text } => {
            let bytes = hex::decode(text.trim()).map_err(|e| anyhow::anyhow!("invalid hex: {e}"))?;
            let p = decode_key_packet(&bytes)?;
            println!("key: {}", hex::encode(p.key));
            println!("seq: {}", p.seq);
            println!("reconnect_interval_s: {}", p.reconnect_interval_s);
            println!("video_id: {}", p.video_id);
            println!("prev_hash_prefix: {}", hex::encode(p.prev_hash_prefix));
            Ok(())
        }
    }
}

fn one_line(s: &str) -> String {
    s.split('\n').map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" | ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                return ExitCode::from(2);
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid usage");
            eprintln!("usage error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Camera(c) => camera::run(c),
        Command::Store(c) => store::run(c),
        Command::Client(c) => client::run(c),
        Command::VerifyChain(a) => verify::run(a),
        Command::Sim(c) => sim::run(c),
        Command::Keypacket(c) => keypacket(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::from(1)
        }
    }
}
