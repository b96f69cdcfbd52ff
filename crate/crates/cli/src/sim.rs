use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Subcommand;
use serde_json::json;

use cryptocam::simharness::{compare_granularity, run_scenario_with, Scenario};

use crate::emit;

#[derive(Subcommand)]
pub enum SimCmd {
    /// Run a scenario and write report.json, report.csv and deliveries.jsonl.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Skip the per-delivery log.
        #[arg(long)]
        no_deliveries: bool,
    },
    /// Run a scenario with single-key segments and again with chunk tokens.
    Compare {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        interval_s: u32,
        #[arg(long, default_value_t = 60)]
        chunks: u16,
        /// Write the paired report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> anyhow::Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Scenario::from_toml(&text)?)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn run(cmd: SimCmd) -> anyhow::Result<()> {
    match cmd {
        SimCmd::Run {
            scenario,
            seed,
            out_dir,
            no_deliveries,
        } => {
            let sc = load(&scenario)?;
            let outcome = run_scenario_with(&sc, seed, !no_deliveries)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut j = create(&out_dir.join("report.json"))?;
            outcome.report.write_json(&mut j)?;
            j.flush()?;
            let mut c = create(&out_dir.join("report.csv"))?;
            outcome.report.write_csv(&mut c)?;
            c.flush()?;
            if !no_deliveries {
                let mut d = create(&out_dir.join("deliveries.jsonl"))?;
                for rec in &outcome.deliveries {
                    serde_json::to_writer(&mut d, rec)?;
                    writeln!(d)?;
                }
                d.flush()?;
            }
            emit(&json!({"event": "report", "totals": outcome.report.totals, "out_dir": out_dir}));
            Ok(())
        }
        SimCmd::Compare {
            scenario,
            seed,
            interval_s,
            chunks,
            out,
        } => {
            let sc = load(&scenario)?;
            let cmp = compare_granularity(&sc, seed, interval_s, chunks)?;
            match out {
                Some(p) => {
                    let mut f = create(&p)?;
                    serde_json::to_writer_pretty(&mut f, &cmp)?;
                    writeln!(f)?;
                    f.flush()?;
                    emit(&json!({
                        "event": "comparison",
                        "coarse_over_share_s": cmp.coarse.totals.over_share_s,
                        "chunked_over_share_s": cmp.chunked.totals.over_share_s,
                    }));
                }
                None => emit(&cmp),
            }
            Ok(())
        }
    }
}
