use std::fs::File;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use kvtier_bench::{report_compare, run_scenario, BenchConfig, RunReport, Scenario, WorkloadSpec};

#[derive(Parser)]
#[command(
    name = "kvbench",
    about = "Run serving scenarios and compare their reports"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its report.
    Run {
        #[arg(long)]
        scenario: Scenario,
        /// Workload spec (JSON); defaults to the multi-round QA workload.
        #[arg(long)]
        workload: Option<PathBuf>,
        /// Tier topology and cost model (TOML, or JSON by extension).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Also write per-query rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Override the workload seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Paired deltas of two reports' TTFT/ITL aggregates.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Run {
            scenario,
            workload,
            config,
            out,
            csv,
            seed,
        } => {
            let mut w: WorkloadSpec = match workload {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", p.display()))?
                }
                None => WorkloadSpec::default(),
            };
            if let Some(s) = seed {
                w.seed = s;
            }
            let cfg = match config {
                Some(p) => BenchConfig::load(&p)?,
                None => BenchConfig::default(),
            };
            let report = run_scenario(scenario, &w, &cfg)?;
            report.save(&out)?;
            if let Some(p) = csv {
                report.write_csv(File::create(&p)?)?;
            }
            let g = &report.aggregates;
            println!(
                "{scenario}: {} queries, ttft mean {:.3} ms p99 {:.3} ms, itl mean {:.3} ms, hit ratio {:.3}, equivalence {:?}",
                g.queries, g.ttft.mean_ms, g.ttft.p99_ms, g.itl.mean_ms, g.hit_ratio, report.equivalence.status
            );
            println!("report written to {}", out.display());
        }
        Cmd::Compare { a, b, json } => {
            let c = report_compare(&RunReport::load(&a)?, &RunReport::load(&b)?);
            if json {
                println!("{}", serde_json::to_string_pretty(&c)?);
            } else {
                print!("{}", c.table());
            }
        }
    }
    Ok(())
}
