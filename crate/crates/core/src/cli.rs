//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, Kind};
use crate::config::{IntOrWord, RunConfig};
use crate::env::oracle_best;
use crate::error::{Error, Result};
use crate::forest::{check_unit_condition, depth_for_units, optimal_unit_exponent, unit_capacity, ShardPolicy};
use crate::harness::{
    accuracy_table, diameter_audit, run_experiment_state, table_rounds, theoretical_exponent, write_csv,
    ExperimentOutput, Simulation,
};
use crate::ingest::{build_store, parse_items, unit_sizes};
use crate::items::ItemStore;
use crate::partition::{compute_slicing_number, PartitionConfig};

#[derive(Debug, Parser)]
#[command(name = "rht", version, about = "Contextual tree bandits: experiments and tooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run seeded experiments and write a CSV of regret checkpoints.
    Run(RunArgs),
    /// Validate an item file and write a store artifact.
    Ingest(IngestArgs),
    /// Print the derived parameters for a planned run.
    Params(ParamsArgs),
    /// Describe the synthetic environment and its per-cell oracle.
    EnvDescribe(EnvArgs),
    /// Check the tree invariants stored in a checkpoint.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<u64>,
    /// Comma-separated policy names.
    #[arg(long, value_delimiter = ',')]
    pub policy: Option<Vec<String>>,
    /// "auto" or an integer.
    #[arg(long = "n-t")]
    pub n_t: Option<String>,
    /// "auto-min", "auto-optimal" or an integer.
    #[arg(long)]
    pub z: Option<String>,
    /// "fill" or an integer.
    #[arg(long)]
    pub units: Option<String>,
    #[arg(long)]
    pub shard: Option<ShardPolicy>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicas: Option<u32>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the accuracy grid after the run.
    #[arg(long)]
    pub emit_table: bool,
    /// New items per 1000 rounds.
    #[arg(long)]
    pub arrive_rate: Option<f64>,
    /// Save the final state of the first replica.
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub file: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Feature dimension; inferred from the first item when omitted.
    #[arg(long = "d-c")]
    pub d_c: Option<usize>,
    #[arg(long)]
    pub shard: Option<ShardPolicy>,
    /// Number of storage units used by `--shard`.
    #[arg(long, default_value_t = 1)]
    pub units: u32,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub horizon: u64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long = "d-x", default_value_t = 2)]
    pub d_x: usize,
    #[arg(long = "d-c", default_value_t = 3)]
    pub d_c: usize,
    /// Unit counts to check; defaults to a spread around the capacity.
    #[arg(long, value_delimiter = ',')]
    pub units: Option<Vec<u32>>,
}

#[derive(Debug, Args)]
pub struct EnvArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<u64>,
    #[arg(long = "n-t")]
    pub n_t: Option<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub checkpoint: PathBuf,
}

fn int_or_word(s: &str) -> IntOrWord {
    s.parse().map(IntOrWord::Int).unwrap_or_else(|_| IntOrWord::Word(s.to_string()))
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn echo_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

pub fn cmd_run(args: &RunArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(h) = args.horizon {
        cfg.run.horizon = h;
    }
    if let Some(p) = &args.policy {
        cfg.run.policies = p.clone();
    }
    if let Some(n) = &args.n_t {
        cfg.partition.n_t = Some(int_or_word(n));
    }
    if let Some(z) = &args.z {
        cfg.engine.z = Some(int_or_word(z));
    }
    if let Some(u) = &args.units {
        cfg.engine.units = Some(int_or_word(u));
    }
    if let Some(s) = args.shard {
        cfg.engine.shard = s;
    }
    if let Some(s) = args.seed {
        cfg.run.seed = s;
        cfg.run.seeds = None;
    }
    if let Some(r) = args.replicas {
        cfg.run.replicas = r;
        cfg.run.seeds = None;
    }
    if let Some(j) = args.jobs {
        cfg.run.jobs = j;
    }
    if let Some(o) = &args.out {
        cfg.run.out = Some(o.clone());
    }
    if let Some(r) = args.arrive_rate {
        cfg.env.arrival_rate = r;
    }
    let plan = cfg.plan()?;
    let out = cfg.run.out.clone().unwrap_or_else(|| PathBuf::from("results.csv"));

    let mut outputs: Vec<ExperimentOutput> = Vec::new();
    let mut states = Vec::new();
    for p in &plan.policies {
        log::info!("running {} over seeds {:?}", p.name, plan.experiment.seeds);
        let (o, mut s) = run_experiment_state(p, &plan.env, &plan.experiment)?;
        outputs.push(o);
        states.push(s.swap_remove(0));
    }

    let mut csv = Vec::new();
    write_csv(&mut csv, &outputs)?;
    write_file(&out, &csv)?;
    let resolved: Vec<_> = outputs.iter().map(|o| o.summary.policy.clone()).collect();
    let reference = outputs[0].summary.reference_n_t;
    write_file(&echo_path(&out), cfg.echo(&resolved, reference)?.as_bytes())?;

    if let Some(path) = &args.checkpoint_out {
        for (i, s) in states.iter().enumerate() {
            let target = if states.len() == 1 {
                path.clone()
            } else {
                let mut p = path.as_os_str().to_owned();
                p.push(format!(".{}", plan.policies[i].name));
                PathBuf::from(p)
            };
            write_file(&target, &s.to_checkpoint()?)?;
        }
    }

    let io = |e: std::io::Error| Error::Io(e.to_string());
    writeln!(
        stdout,
        "horizon {}  seeds {:?}  reference n_T {}  theoretical exponent {:.4}",
        plan.experiment.horizon,
        plan.experiment.seeds,
        reference,
        theoretical_exponent(plan.env.alpha, plan.env.d_x, plan.env.d_c)
    )
    .map_err(io)?;
    for o in &outputs {
        let s = &o.summary;
        let last = s.checkpoints.last().expect("horizon checkpoint");
        let slope = s.slope.as_ref().map_or("-".to_string(), |f| format!("{:.4}", f.slope));
        writeln!(
            stdout,
            "{:<16} n_T {:<4} z {:<4} cum_regret {:>12.3}  accuracy {:.4}  final-window {:.4}/{:.4}  slope {}  nodes {}",
            s.policy.name,
            s.policy.n_t.map_or("-".into(), |v| v.to_string()),
            s.policy.z.map_or("-".into(), |v| v.to_string()),
            last.cum_regret,
            last.accuracy,
            s.final_window_accuracy,
            s.final_window_oracle,
            slope,
            last.nodes
        )
        .map_err(io)?;
    }
    if args.emit_table {
        let mut with_rounds = plan.experiment.clone();
        with_rounds.extra_checkpoints = table_rounds(plan.experiment.horizon);
        let rounds = table_rounds(plan.experiment.horizon);
        if rounds.iter().all(|t| outputs[0].summary.at(*t).is_some()) {
            write!(stdout, "{}", accuracy_table(&outputs, &rounds)).map_err(io)?;
        } else {
            writeln!(
                stdout,
                "accuracy table needs checkpoints at {rounds:?}; add them to run.checkpoints"
            )
            .map_err(io)?;
        }
    }
    writeln!(stdout, "wrote {} and {}", out.display(), echo_path(&out).display()).map_err(io)?;
    Ok(())
}

pub fn cmd_ingest(args: &IngestArgs, stdout: &mut dyn Write) -> Result<()> {
    let text = std::fs::read_to_string(&args.file)
        .map_err(|e| Error::Io(format!("{}: {e}", args.file.display())))?;
    let lines = parse_items(&text, args.d_c)?;
    let d_c = match (args.d_c, lines.first()) {
        (Some(d), _) => d,
        (None, Some(l)) => l.item.features.len(),
        (None, None) => return Err(Error::NoItems),
    };
    if args.units == 0 {
        return Err(Error::InvalidConfig("--units must be at least 1".into()));
    }
    let shard = args.shard.map(|p| (p, args.units));
    let store = build_store(lines, d_c, shard)?;
    let io = |e: std::io::Error| Error::Io(e.to_string());
    writeln!(stdout, "{} items, d_C = {d_c}", store.len()).map_err(io)?;
    if shard.is_some() || store.keys().any(|k| store.unit_of(k).is_some()) {
        let units = args.units.max(store.keys().filter_map(|k| store.unit_of(k)).max().unwrap_or(1));
        for (i, n) in unit_sizes(&store, units).iter().enumerate() {
            writeln!(stdout, "unit {}: {n} items", i + 1).map_err(io)?;
        }
    }
    if let Some(out) = &args.out {
        write_file(out, &checkpoint::save_store(&store)?)?;
        writeln!(stdout, "wrote {}", out.display()).map_err(io)?;
    }
    Ok(())
}

const DEFAULT_UNIT_CHECKS: [u32; 6] = [1, 2, 8, 64, 65, 1024];

pub fn cmd_params(args: &ParamsArgs, stdout: &mut dyn Write) -> Result<()> {
    let (t, a, dx, dc) = (args.horizon, args.alpha, args.d_x, args.d_c);
    let n_t = compute_slicing_number(t, a, dx, dc)?;
    let partition = PartitionConfig::new(dx, n_t, a, 1.0)?;
    let cap = unit_capacity(t, a, dx, dc)?;
    let z = optimal_unit_exponent(t, a, dx, dc)?;
    let io = |e: std::io::Error| Error::Io(e.to_string());
    let mut out = String::new();
    out += &format!("T = {t}  alpha = {a}  d_X = {dx}  d_C = {dc}\n");
    out += &format!("n_T = {n_t}\n");
    out += &format!("cells = {}\n", partition.cell_count());
    out += &format!("context gap (L_X = 1) = {:.6}\n", partition.context_gap());
    out += &format!("gamma = {:.6}\n", theoretical_exponent(a, dx, dc));
    out += &format!("unit capacity = {cap:.6}\n");
    out += &format!("z* = {z}\n");
    out += &format!("{:>8} {:>6} {:>10}  condition\n", "units", "depth", "2^depth");
    for &d in args.units.as_deref().unwrap_or(&DEFAULT_UNIT_CHECKS) {
        let depth = depth_for_units(d)?;
        let verdict = if check_unit_condition(d, t, a, dx, dc) {
            "satisfied"
        } else {
            "violated"
        };
        out += &format!("{d:>8} {depth:>6} {:>10}  {verdict}\n", 1u64 << depth);
    }
    stdout.write_all(out.as_bytes()).map_err(io)
}

pub fn cmd_env_describe(args: &EnvArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(h) = args.horizon {
        cfg.run.horizon = h;
    }
    if let Some(n) = &args.n_t {
        cfg.partition.reference_n_t = int_or_word(n);
    }
    let plan = cfg.plan()?;
    let env = &plan.env;
    let model = env.model()?;
    let sim = Simulation::new(&crate::harness::baseline("uniform-random")?, env, &plan.experiment, 0)?;
    let partition = sim.reference();
    let mut store = ItemStore::new(env.d_c)?;
    for it in env.universe() {
        store.insert(it, None)?;
    }
    let io = |e: std::io::Error| Error::Io(e.to_string());
    let mut out = String::new();
    out += &format!(
        "family {:?}  d_X {}  d_C {}  sigma {}  sharpness {}  L_X {}  alpha {}  items {}  seed {}\n",
        env.family,
        env.d_x,
        env.d_c,
        env.sigma,
        env.sharpness,
        env.l_x,
        env.alpha,
        store.len(),
        env.seed
    );
    out += &format!(
        "reference partition n_T {} ({} cells)\n",
        partition.n_t(),
        partition.cell_count()
    );
    out += &format!("{:<16} {:<28} {:>8} {:>10}\n", "cell", "ideal point", "best id", "value");
    for cell in partition.cells() {
        let center = partition.cell_center(&cell);
        let g = model.ideal_point(center.coords());
        let (key, v) = oracle_best(&model, partition, &cell, &store)?;
        let g: Vec<String> = g.iter().map(|x| format!("{x:.3}")).collect();
        out += &format!(
            "{:<16} {:<28} {:>8} {:>10.6}\n",
            cell.to_string(),
            g.join(" "),
            store.get(key).id,
            v
        );
    }
    let audit = diameter_audit(&store, 10)?;
    out += "region diameter by depth:";
    for (h, d) in &audit.per_depth {
        out += &format!(" {h}:{d:.4}");
    }
    out += &format!("\nfitted envelope k1 = {:.4}, m = {:.4}\n", audit.k1, audit.m);
    stdout.write_all(out.as_bytes()).map_err(io)
}

pub fn cmd_verify(args: &VerifyArgs, stdout: &mut dyn Write) -> Result<()> {
    let bytes = std::fs::read(&args.checkpoint)
        .map_err(|e| Error::Io(format!("{}: {e}", args.checkpoint.display())))?;
    let io = |e: std::io::Error| Error::Io(e.to_string());
    let engine = match checkpoint::peek_kind(&bytes)? {
        Kind::Store => {
            let store = checkpoint::load_store(&bytes)?;
            writeln!(stdout, "item store: {} items, d_C = {}", store.len(), store.d_c()).map_err(io)?;
            return Ok(());
        }
        Kind::Engine => checkpoint::load_engine(&bytes)?,
        Kind::Simulation => {
            let sim = Simulation::from_checkpoint(&bytes)?;
            writeln!(stdout, "simulation: policy {}  seed {}  round {}", sim.policy(), sim.seed(), sim.round())
                .map_err(io)?;
            match sim.engine() {
                Some(e) => e.clone(),
                None => {
                    writeln!(stdout, "no tree state to verify").map_err(io)?;
                    return Ok(());
                }
            }
        }
    };
    engine.check_invariants()?;
    let s = engine.storage();
    writeln!(stdout, "cells {}  nodes {}  items {}", s.per_cell.len(), s.nodes, s.items).map_err(io)?;
    writeln!(stdout, "invariants: ok").map_err(io)
}

pub fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, stdout),
        Command::Ingest(a) => cmd_ingest(a, stdout),
        Command::Params(a) => cmd_params(a, stdout),
        Command::EnvDescribe(a) => cmd_env_describe(a, stdout),
        Command::Verify(a) => cmd_verify(a, stdout),
    }
}
