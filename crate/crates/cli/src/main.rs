use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Parser;
use log::info;
use rulenet_core::connection::VerifierOptions;
use rulenet_core::metrics::TraceSink;
use rulenet_core::plan::{route_report, static_check};
use rulenet_core::scenario::Scenario;
use rulenet_core::sim::{SimOptions, Simulation};
use rulenet_core::{Fidelity, SimTime};

/// Simulate RuleSet-driven quantum repeater networks.
#[derive(Parser, Debug)]
#[command(name = "rulenet", version)]
struct Args {
    /// Topology file; merged with the scenario file when both are given.
    #[arg(long, value_name = "PATH")]
    topology: Option<PathBuf>,

    /// Scenario file with simulation settings and connections.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,

    /// Override the run seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Override the simulated duration.
    #[arg(long, value_name = "SECONDS")]
    duration: Option<f64>,

    /// Directory for metrics.jsonl, trace.log and verifier.json.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,

    /// Record every event to trace.log.
    #[arg(long)]
    trace: bool,

    /// Route and statically check every connection without simulating.
    #[arg(long, conflicts_with = "route")]
    verify_only: bool,

    /// Print the cheapest path between two nodes and exit.
    #[arg(long, num_args = 2, value_names = ["SRC", "DST"], requires = "index_fidelity")]
    route: Option<Vec<String>>,

    /// Fidelity the route must be able to reach.
    #[arg(long, value_name = "F", requires = "route")]
    index_fidelity: Option<f64>,

    /// Exit zero even if faults or findings were reported.
    #[arg(long)]
    allow_faults: bool,
}

/// Exit codes: 1 faults, 2 bad input or no route.
const EXIT_FAULTS: u8 = 1;
const EXIT_INPUT: u8 = 2;

fn load(args: &Args) -> Result<Scenario> {
    let paths: Vec<&Path> = args.topology.iter().chain(&args.scenario).map(|p| p.as_path()).collect();
    if paths.is_empty() {
        bail!("give --topology, --scenario or both");
    }
    let mut s = Scenario::load(&paths).map_err(|e| anyhow::anyhow!("{e}"))?;
    if let Some(seed) = args.seed {
        s.settings.seed = seed;
    }
    if let Some(d) = args.duration {
        if !(d > 0.0 && d.is_finite()) {
            bail!("--duration must be a positive number of seconds");
        }
        s.settings.duration = SimTime::from_secs(d);
    }
    Ok(s)
}

fn output_file(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn route(s: &Scenario, names: &[String], f: f64) -> Result<ExitCode> {
    let node = |n: &str| s.topology.lookup(n).with_context(|| format!("unknown node {n:?}"));
    let (src, dst) = (node(&names[0])?, node(&names[1])?);
    let index = Fidelity::new(f).map_err(|e| anyhow::anyhow!("--index-fidelity: {e}"))?;
    let Some(r) = route_report(s, src, dst, index) else {
        eprintln!("no route from {} to {} at fidelity {f}", names[0], names[1]);
        return Ok(ExitCode::from(EXIT_INPUT));
    };
    let mut out = io::stdout().lock();
    writeln!(out, "network {}", r.network)?;
    writeln!(out, "index_fidelity {}", r.index_fidelity)?;
    writeln!(out, "path {}", r.path.join(" "))?;
    for h in &r.hops {
        writeln!(out, "hop {} {} {} {:.9}", h.from, h.to, h.edge, h.seconds_per_pair)?;
    }
    writeln!(out, "total {:.9}", r.total_seconds_per_pair)?;
    Ok(ExitCode::SUCCESS)
}

fn verify(s: &Scenario, args: &Args) -> Result<ExitCode> {
    let checks = static_check(s, &VerifierOptions::default());
    let text = serde_json::to_string_pretty(&checks)?;
    match &args.output {
        Some(dir) => {
            let mut w = output_file(dir, "verifier.json")?;
            writeln!(w, "{text}")?;
            w.flush()?;
        }
        None => writeln!(io::stdout().lock(), "{text}")?,
    }
    let bad = checks.iter().filter(|c| !c.is_clean()).count();
    eprintln!("{} checks, {bad} with findings", checks.len());
    Ok(if bad > 0 && !args.allow_faults {
        ExitCode::from(EXIT_FAULTS)
    } else {
        ExitCode::SUCCESS
    })
}

fn simulate(s: Scenario, args: &Args) -> Result<ExitCode> {
    let trace = match (&args.output, args.trace) {
        (_, false) => None,
        (Some(dir), true) => Some(TraceSink::Writer(Box::new(output_file(dir, "trace.log")?))),
        (None, true) => Some(TraceSink::Writer(Box::new(BufWriter::new(io::stderr())))),
    };
    let opts = SimOptions {
        trace,
        ..SimOptions::default()
    };
    info!(
        "{} nodes, {} links, {} connections, seed {}",
        s.topology.nodes.len(),
        s.topology.links.len(),
        s.connections.len(),
        s.settings.seed
    );
    let started = Instant::now();
    let mut sim = Simulation::with_options(s, opts);
    let metrics = sim.run();
    let wall = started.elapsed().as_secs_f64();
    if let Some(mut t) = sim.take_trace() {
        t.flush();
    }
    match &args.output {
        Some(dir) => metrics.write_jsonl(output_file(dir, "metrics.jsonl")?)?,
        None => metrics.write_jsonl(io::stdout().lock())?,
    }
    let g = metrics.global().expect("metrics end with a global record");
    let delivered: u64 = metrics.connections().filter(|c| c.parent.is_none()).map(|c| c.delivered).sum();
    eprintln!(
        "events {} delivered {delivered} faults {} wall_clock_s {wall:.3}",
        g.events, g.faults
    );
    Ok(if g.faults > 0 && !args.allow_faults {
        ExitCode::from(EXIT_FAULTS)
    } else {
        ExitCode::SUCCESS
    })
}

fn run(args: Args) -> Result<ExitCode> {
    let s = load(&args)?;
    if let Some(dir) = &args.output {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    if let Some(names) = &args.route {
        return route(&s, names, args.index_fidelity.expect("clap requires it"));
    }
    if args.verify_only {
        return verify(&s, &args);
    }
    simulate(s, &args)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
