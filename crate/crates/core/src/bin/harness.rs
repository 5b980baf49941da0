use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use soaguard::harness::{default_scenarios, run_all, RunConfig, Scenario, ScenarioName, Target};

#[derive(Parser)]
#[command(name = "harness", version, about = "Replay attack scenarios against a gateway")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario or `all`.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Scenario name, or `all`.
    #[arg(long, default_value = "all")]
    scenario: String,
    /// `host:port`, a URL, or `inproc` for a private in-process gateway.
    #[arg(long, default_value = "inproc")]
    target: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Requests per second per client (overrides scenario defaults).
    #[arg(long)]
    rate: Option<f64>,
    /// Seconds of traffic (overrides scenario defaults).
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    /// Payload corpus file for the selected scenario.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Write the JSON report here and the text report to `<path>.txt`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Send simulated timestamps instead of pacing in real time.
    #[arg(long)]
    sim_clock: bool,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long)]
    admin_token: Option<String>,
    #[arg(long)]
    admin_token_file: Option<PathBuf>,
    /// Store file of the target, for the at-rest scan and isolation checks.
    #[arg(long)]
    store_path: Option<PathBuf>,
    #[arg(long, default_value = "alice")]
    user: String,
    #[arg(long, default_value = "alice-password")]
    password: String,
    /// In-process target only: start gateways with an empty ruleset.
    #[arg(long)]
    empty_rules: bool,
}

fn main() -> Result<()> {
    let Cmd::Run(args) = Cli::parse().cmd;
    let admin_token = match (&args.admin_token, &args.admin_token_file) {
        (Some(t), _) => Some(t.clone()),
        (None, Some(p)) => Some(
            std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .trim()
                .to_string(),
        ),
        (None, None) => None,
    };
    let mut target = Target::parse(&args.target, admin_token, args.store_path.clone())?;
    if let Target::InProcess(t) = &mut target {
        t.empty_rules = args.empty_rules;
    } else if args.empty_rules {
        anyhow::bail!("--empty-rules applies to the in-process target only");
    }

    let mut scenarios = if args.scenario == "all" {
        default_scenarios()
    } else {
        vec![Scenario::new(args.scenario.parse::<ScenarioName>()?)]
    };
    for s in &mut scenarios {
        if let Some(r) = args.rate {
            s.rate = r;
        }
        if let Some(d) = args.duration {
            s.duration = d;
        }
        if let Some(c) = args.clients {
            if s.name != ScenarioName::DosSingle {
                s.clients = c;
            }
        }
        if args.corpus.is_some() {
            s.corpus = args.corpus.clone();
        }
    }

    let mut cfg = RunConfig::new(target);
    cfg.seed = args.seed;
    cfg.workers = args.workers;
    cfg.sim_clock = args.sim_clock;
    cfg.user = args.user;
    cfg.password = args.password;

    let report = run_all(&cfg, &scenarios)?;
    print!("{}", report.to_text());
    if let Some(path) = &args.report {
        report
            .write(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    std::process::exit(report.exit_code());
}
