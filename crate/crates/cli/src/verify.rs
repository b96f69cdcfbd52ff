use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde::Deserialize;
use serde_json::json;

use cryptocam::client::Wallet;
use cryptocam::crypto::{verify_links, ChainLink, HashChainReport, LinkStatus};
use cryptocam::protocol::{VideoId, HASH_PREFIX_LEN};
use cryptocam::store::{FsStore, ObjectKey, StoreError};

use crate::emit;

#[derive(Args)]
pub struct VerifyArgs {
    /// Directory holding the camera's stored footage.
    dir: PathBuf,
    /// Chain manifest written by the camera (default: DIR/chain.jsonl).
    #[arg(long, conflicts_with = "wallet")]
    manifest: Option<PathBuf>,
    /// Check the chains announced by the key packets in a wallet instead.
    #[arg(long)]
    wallet: Option<PathBuf>,
}

#[derive(Deserialize)]
struct ManifestLine {
    event: String,
    tier: String,
    video_id: VideoId,
    prev_hash_prefix: String,
    url: String,
}

struct Segment {
    video_id: VideoId,
    key: ObjectKey,
    prev_hash_prefix: [u8; HASH_PREFIX_LEN],
}

fn prefix(hex_str: &str, line: usize) -> anyhow::Result<[u8; HASH_PREFIX_LEN]> {
    let mut out = [0u8; HASH_PREFIX_LEN];
    hex::decode_to_slice(hex_str, &mut out).with_context(|| format!("manifest line {line}: bad hash prefix"))?;
    Ok(out)
}

fn chains_from_manifest(path: &Path) -> anyhow::Result<BTreeMap<String, Vec<Segment>>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening manifest {}", path.display()))?;
    let mut chains: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine =
            serde_json::from_str(&line).with_context(|| format!("manifest line {}", i + 1))?;
        if m.event != "rotation" {
            continue;
        }
        chains.entry(m.tier).or_default().push(Segment {
            video_id: m.video_id,
            key: ObjectKey::from_url(&m.url)?,
            prev_hash_prefix: prefix(&m.prev_hash_prefix, i + 1)?,
        });
    }
    Ok(chains)
}

fn chains_from_wallet(path: &Path) -> anyhow::Result<BTreeMap<String, Vec<Segment>>> {
    let wallet = Wallet::load(path)?;
    let mut records: Vec<_> = wallet.records().iter().collect();
    records.sort_by_key(|r| (r.camera_address, r.tier as u8, r.received_at_ms, r.seq));
    let mut chains: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for r in records {
        let tier = serde_json::to_value(r.tier)?;
        let name = format!("{} {}", r.camera_address, tier.as_str().unwrap_or("full"));
        chains.entry(name).or_default().push(Segment {
            video_id: r.video_id,
            key: ObjectKey::from_url(&r.url()?)?,
            prev_hash_prefix: r.prev_hash_prefix,
        });
    }
    Ok(chains)
}

fn report_chain(name: &str, segments: &[Segment], files: &[Option<Vec<u8>>], report: &HashChainReport) -> bool {
    let mismatched: Vec<VideoId> = report
        .mismatched_files()
        .into_iter()
        .map(|i| segments[i].video_id)
        .collect();
    let missing: Vec<VideoId> = segments
        .iter()
        .zip(files)
        .filter(|(_, f)| f.is_none())
        .map(|(s, _)| s.video_id)
        .collect();
    // the last file has no successor in range, so only its presence is checked
    let ok = report.first_mismatch.is_none()
        && !report.statuses.contains(&LinkStatus::Unavailable)
        && missing.is_empty();
    emit(&json!({
        "chain": name,
        "segments": segments.len(),
        "ok": ok,
        "statuses": report.statuses,
        "mismatched": mismatched,
        "missing": missing,
    }));
    ok
}

pub fn run(args: VerifyArgs) -> anyhow::Result<()> {
    let store = FsStore::open(&args.dir)?;
    let chains = match &args.wallet {
        Some(w) => chains_from_wallet(w)?,
        None => chains_from_manifest(&args.manifest.clone().unwrap_or_else(|| args.dir.join("chain.jsonl")))?,
    };
    if chains.is_empty() {
        bail!("no segments to verify");
    }
    let mut all_ok = true;
    for (name, segments) in &chains {
        let files: Vec<Option<Vec<u8>>> = segments
            .iter()
            .map(|s| match store.get(&s.key) {
                Ok(b) => Ok(Some(b)),
                Err(StoreError::NotFound(_)) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_, _>>()?;
        let links: Vec<ChainLink<'_>> = segments
            .iter()
            .zip(&files)
            .map(|(s, f)| ChainLink {
                stored_file: f.as_deref(),
                prev_hash_prefix: s.prev_hash_prefix,
            })
            .collect();
        all_ok &= report_chain(name, segments, &files, &verify_links(&links));
    }
    if !all_ok {
        bail!("hash chain verification failed");
    }
    println!("all ok");
    Ok(())
}
