//! Command-line front end: parse arguments, run the requested analysis, and
//! write CSV/JSON artifacts plus a run manifest.
//!
//! Every run resolves its full configuration (including the network file
//! contents and all seeds) into a manifest written next to the outputs.
//! `laplab rerun --manifest <file>` replays the recorded configuration and
//! reproduces the data artifacts byte for byte.
//!
//! Exit codes: 0 on success, 2 on validation failures (the violation list
//! goes to standard error) and on usage errors, 1 on runtime errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use laplab::experiments::{
    fit_tightness_exponent, lyapunov_drift_check, run_scaling_sweep, ScalingConfig,
};
use laplab::fluid::{integrate_fluid, FluidState};
use laplab::model::{check_crp, compute_duals, solve_spp, ModelError, Network};
use laplab::oracle::solve_ctmc_oracle;
use laplab::priority::{
    assign_priorities, check_assumption3, compute_equilibrium, PriorityOrder, TieBreak,
};
use laplab::scalelimits::{
    decay_constants, integrate_hydro, integrate_lfm, lfm_matrix, DeviationState,
};
use laplab::simulator::{estimate_stationary, simulate_horizon, InitialState, SimConfig};
use laplab::StepControl;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "laplab",
    version,
    about = "Planning, simulation, and scaling analysis of multi-class service systems under leaf-activity priorities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum TieBreakArg {
    #[default]
    Lowest,
    Highest,
}

impl From<TieBreakArg> for TieBreak {
    fn from(v: TieBreakArg) -> TieBreak {
        match v {
            TieBreakArg::Lowest => TieBreak::LowestIndex,
            TieBreakArg::Highest => TieBreak::HighestIndex,
        }
    }
}

fn tie_break_name(tb: TieBreak) -> String {
    match tb {
        TieBreak::LowestIndex => "lowest".to_string(),
        TieBreak::HighestIndex => "highest".to_string(),
    }
}

fn tie_break_from_name(name: &str) -> Result<TieBreak, CliError> {
    match name {
        "lowest" => Ok(TieBreak::LowestIndex),
        "highest" => Ok(TieBreak::HighestIndex),
        other => Err(CliError::Runtime(format!(
            "unknown tie-break rule `{other}`"
        ))),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the planning LP, duals, priorities, and equilibrium.
    Analyze {
        #[arg(long)]
        net: PathBuf,
        #[arg(long, value_enum, default_value_t = TieBreakArg::Lowest)]
        tie_break: TieBreakArg,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Integrate the fluid model and write the trajectory.
    Fluid {
        #[arg(long)]
        net: PathBuf,
        /// Initial state file; defaults to the empty state.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        /// Output sampling interval for the trajectory CSV.
        #[arg(long, default_value_t = 0.01)]
        interval: f64,
        #[arg(long, value_enum, default_value_t = TieBreakArg::Lowest)]
        tie_break: TieBreakArg,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Integrate the hydrodynamic deviation model.
    Hydro {
        #[arg(long)]
        net: PathBuf,
        /// Initial deviation file with `u` and `w` components.
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.01)]
        interval: f64,
        #[arg(long, value_enum, default_value_t = TieBreakArg::Lowest)]
        tie_break: TieBreakArg,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Emit the deviation maps, decay constants, and optionally a
    /// local-fluid trajectory.
    Lfm {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.05)]
        dt: f64,
        #[arg(long, value_enum, default_value_t = TieBreakArg::Lowest)]
        tie_break: TieBreakArg,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the scaled chain once; write a trace and a summary.
    Simulate {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        r: u64,
        /// Seed; falls back to LAPLAB_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200.0)]
        horizon: f64,
        #[arg(long, default_value_t = 20.0)]
        warmup: f64,
        #[arg(long, default_value_t = 1.0)]
        interval: f64,
        /// `empty` or `equilibrium`.
        #[arg(long, default_value = "equilibrium")]
        init: String,
        #[arg(long, value_enum, default_value_t = TieBreakArg::Lowest)]
        tie_break: TieBreakArg,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Scaling sweep of stationary deviation norms with an exponent fit.
    Sweep {
        #[arg(long)]
        net: PathBuf,
        /// Comma-separated increasing scales, e.g. 25,50,100,200,400.
        #[arg(long, value_delimiter = ',')]
        r: Vec<u64>,
        #[arg(long, default_value_t = 0.25)]
        eps: f64,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 40.0)]
        horizon_mult: f64,
        #[arg(long, default_value_t = 0.25)]
        warmup_frac: f64,
        #[arg(long, default_value_t = 8)]
        batches: usize,
        #[arg(long, value_enum, default_value_t = TieBreakArg::Lowest)]
        tie_break: TieBreakArg,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Workload drift estimate from a padded-queue start.
    Lyapunov {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        r: u64,
        #[arg(long, default_value_t = 5.0)]
        level: f64,
        #[arg(long, default_value_t = 20.0)]
        window: f64,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = TieBreakArg::Lowest)]
        tie_break: TieBreakArg,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Exact stationary moments of the truncated chain on a tiny instance.
    Oracle {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        r: u64,
        #[arg(long, default_value_t = 200)]
        queue_cap: u64,
        #[arg(long, value_enum, default_value_t = TieBreakArg::Lowest)]
        tie_break: TieBreakArg,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Replay a recorded run from its manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Network invariant violations: listed on stderr, exit code 2.
    Validation(Vec<String>),
    /// Anything else: one-line message, exit code 1.
    Runtime(String),
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidNetwork(violations) => CliError::Validation(violations),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),* $(,)?) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    laplab::simulator::SimError,
    laplab::fluid::FluidError,
    laplab::scalelimits::ScaleError,
    laplab::experiments::ExperimentError,
    std::io::Error,
);

/// Everything a run needs to be replayed: the command, the full resolved
/// configuration (network contents included), and the artifacts written.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Input file paths as given on the command line.
    pub inputs: Vec<String>,
    pub base_seed: u64,
    /// Fully resolved configuration; sufficient to reproduce the outputs.
    pub config: Value,
    /// Output file names, relative to the output directory.
    pub outputs: Vec<String>,
}

/// Parse `argv` and run; returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap usage errors (unknown subcommand, bad flags) exit 2 by
            // convention; --help and --version report success.
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(outputs) => {
            for path in outputs {
                println!("wrote {}", path.display());
            }
            0
        }
        Err(CliError::Validation(violations)) => {
            for v in violations {
                eprintln!("{v}");
            }
            2
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("{message}");
            1
        }
    }
}

fn run(command: Command) -> Result<Vec<PathBuf>, CliError> {
    match command {
        Command::Analyze {
            net,
            tie_break,
            out_dir,
        } => {
            let cfg = AnalyzeConfig {
                network: read_network(&net)?,
                tie_break: tie_break_name(tie_break.into()),
            };
            execute_analyze(&cfg, &out_dir, &[display(&net)])
        }
        Command::Fluid {
            net,
            init,
            horizon,
            step,
            interval,
            tie_break,
            out_dir,
        } => {
            let mut inputs = vec![display(&net)];
            let init_value = match &init {
                Some(path) => {
                    inputs.push(display(path));
                    Some(read_json(path)?)
                }
                None => None,
            };
            let cfg = FluidCmdConfig {
                network: read_network(&net)?,
                init: init_value,
                horizon,
                step,
                interval,
                tie_break: tie_break_name(tie_break.into()),
            };
            execute_fluid(&cfg, &out_dir, &inputs)
        }
        Command::Hydro {
            net,
            init,
            horizon,
            interval,
            tie_break,
            out_dir,
        } => {
            let cfg = HydroCmdConfig {
                network: read_network(&net)?,
                init: read_json(&init)?,
                horizon,
                interval,
                tie_break: tie_break_name(tie_break.into()),
            };
            execute_hydro(&cfg, &out_dir, &[display(&net), display(&init)])
        }
        Command::Lfm {
            net,
            init,
            horizon,
            dt,
            tie_break,
            out_dir,
        } => {
            let mut inputs = vec![display(&net)];
            let init_value = match &init {
                Some(path) => {
                    inputs.push(display(path));
                    Some(read_json(path)?)
                }
                None => None,
            };
            let cfg = LfmCmdConfig {
                network: read_network(&net)?,
                init: init_value,
                horizon,
                dt,
                tie_break: tie_break_name(tie_break.into()),
            };
            execute_lfm(&cfg, &out_dir, &inputs)
        }
        Command::Simulate {
            net,
            r,
            seed,
            horizon,
            warmup,
            interval,
            init,
            tie_break,
            out_dir,
        } => {
            let cfg = SimulateCmdConfig {
                network: read_network(&net)?,
                r,
                seed: resolve_seed(seed),
                horizon,
                warmup,
                interval,
                init,
                tie_break: tie_break_name(tie_break.into()),
            };
            execute_simulate(&cfg, &out_dir, &[display(&net)])
        }
        Command::Sweep {
            net,
            r,
            eps,
            reps,
            seed,
            horizon_mult,
            warmup_frac,
            batches,
            tie_break,
            out_dir,
        } => {
            let cfg = SweepCmdConfig {
                network: read_network(&net)?,
                r_values: r,
                epsilon: eps,
                replications: reps,
                base_seed: resolve_seed(seed),
                horizon_multiplier: horizon_mult,
                warmup_fraction: warmup_frac,
                batches,
                tie_break: tie_break_name(tie_break.into()),
            };
            execute_sweep(&cfg, &out_dir, &[display(&net)])
        }
        Command::Lyapunov {
            net,
            r,
            level,
            window,
            reps,
            seed,
            tie_break,
            out_dir,
        } => {
            let cfg = LyapunovCmdConfig {
                network: read_network(&net)?,
                r,
                level,
                window,
                replications: reps,
                base_seed: resolve_seed(seed),
                tie_break: tie_break_name(tie_break.into()),
            };
            execute_lyapunov(&cfg, &out_dir, &[display(&net)])
        }
        Command::Oracle {
            net,
            r,
            queue_cap,
            tie_break,
            out_dir,
        } => {
            let cfg = OracleCmdConfig {
                network: read_network(&net)?,
                r,
                queue_cap,
                tie_break: tie_break_name(tie_break.into()),
            };
            execute_oracle(&cfg, &out_dir, &[display(&net)])
        }
        Command::Rerun { manifest, out_dir } => rerun(&manifest, &out_dir),
    }
}

/// Replay the manifest's command with its recorded configuration.
pub fn rerun(manifest_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| {
        CliError::Runtime(format!(
            "cannot read manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("malformed manifest: {e}")))?;
    let inputs = manifest.inputs.clone();
    let cfg = manifest.config;
    match manifest.command.as_str() {
        "analyze" => execute_analyze(&from_value(cfg)?, out_dir, &inputs),
        "fluid" => execute_fluid(&from_value(cfg)?, out_dir, &inputs),
        "hydro" => execute_hydro(&from_value(cfg)?, out_dir, &inputs),
        "lfm" => execute_lfm(&from_value(cfg)?, out_dir, &inputs),
        "simulate" => execute_simulate(&from_value(cfg)?, out_dir, &inputs),
        "sweep" => execute_sweep(&from_value(cfg)?, out_dir, &inputs),
        "lyapunov" => execute_lyapunov(&from_value(cfg)?, out_dir, &inputs),
        "oracle" => execute_oracle(&from_value(cfg)?, out_dir, &inputs),
        other => Err(CliError::Runtime(format!(
            "manifest records unknown command `{other}`"
        ))),
    }
}

fn from_value<T: for<'de> Deserialize<'de>>(value: Value) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| {
        CliError::Runtime(format!("manifest config does not match its command: {e}"))
    })
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("LAPLAB_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn read_network(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Runtime(format!("cannot read network file {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Runtime(format!("malformed network file {}: {e}", path.display()))
    })
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read file {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("malformed JSON in {}: {e}", path.display())))
}

/// Parse the embedded network value and check its invariants.
fn network_from_value(value: &Value) -> Result<Network, CliError> {
    let net = Network::from_json(&value.to_string())
        .map_err(|e| CliError::Runtime(format!("malformed network: {e}")))?;
    let report = net.validate();
    if !report.is_empty() {
        return Err(CliError::Validation(report));
    }
    Ok(net)
}

fn priorities(net: &Network, tie_break: &str) -> Result<PriorityOrder, CliError> {
    Ok(assign_priorities(net, tie_break_from_name(tie_break)?)?)
}

fn write_file(out_dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    inputs: &[String],
    base_seed: u64,
    config: Value,
    outputs: &[String],
) -> Result<PathBuf, CliError> {
    let manifest = RunManifest {
        command: command.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
        base_seed,
        config,
        outputs: outputs.to_vec(),
    };
    let text =
        serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail");
    write_file(out_dir, &format!("{command}_manifest.json"), &text)
}

// ---------------------------------------------------------------------------
// Per-command configurations and handlers
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AnalyzeConfig {
    network: Value,
    tie_break: String,
}

fn execute_analyze(
    cfg: &AnalyzeConfig,
    out_dir: &Path,
    inputs: &[String],
) -> Result<Vec<PathBuf>, CliError> {
    let net = network_from_value(&cfg.network)?;
    let po = priorities(&net, &cfg.tie_break)?;
    let spp = solve_spp(&net)?;
    let crp = check_crp(&spp, &net);
    let duals = compute_duals(&net)?;
    let eq = compute_equilibrium(&net, &po);
    let a3 = check_assumption3(&net, &po, &eq);

    #[derive(Serialize)]
    struct ActivityRow {
        class: usize,
        pool: usize,
        mu: f64,
        spp_rate: f64,
        lap_rate: f64,
        psi_star: f64,
        rank: usize,
    }
    #[derive(Serialize)]
    struct Analysis {
        rho: f64,
        crp_holds: bool,
        crp_diagnostic: String,
        nu: Vec<f64>,
        alpha: Vec<f64>,
        class_rank: Vec<usize>,
        activities: Vec<ActivityRow>,
        pool_occupancy: Vec<f64>,
        lowest_priority_pool: usize,
        assumption3_holds: bool,
        assumption3_diagnostic: String,
    }
    let analysis = Analysis {
        rho: spp.rho,
        crp_holds: crp.holds,
        crp_diagnostic: crp.diagnostic,
        nu: duals.nu.clone(),
        alpha: duals.alpha.clone(),
        class_rank: (0..net.num_classes()).map(|i| po.class_rank(i)).collect(),
        activities: net
            .activities()
            .iter()
            .enumerate()
            .map(|(k, a)| ActivityRow {
                class: a.class + 1,
                pool: a.pool + 1,
                mu: a.mu,
                spp_rate: spp.routing_rates[k],
                lap_rate: eq.lap_rates[k],
                psi_star: eq.psi_star[k],
                rank: po.activity_rank(k),
            })
            .collect(),
        pool_occupancy: (0..net.num_pools())
            .map(|j| eq.pool_occupancy(&net, j))
            .collect(),
        lowest_priority_pool: po.lowest_priority_pool(&net) + 1,
        assumption3_holds: a3.holds,
        assumption3_diagnostic: a3.diagnostic,
    };
    let json = serde_json::to_string_pretty(&analysis).expect("analysis serialization");
    println!("{json}");
    let mut outputs = vec![
        write_file(out_dir, "analysis.json", &json)?,
        write_file(out_dir, "priority_order.json", &po.to_json(&net))?,
    ];
    let names = vec![
        "analysis.json".to_string(),
        "priority_order.json".to_string(),
    ];
    outputs.push(write_manifest(
        out_dir,
        "analyze",
        inputs,
        0,
        serde_json::to_value(cfg).unwrap(),
        &names,
    )?);
    Ok(outputs)
}

#[derive(Serialize, Deserialize)]
struct FluidCmdConfig {
    network: Value,
    init: Option<Value>,
    horizon: f64,
    step: f64,
    interval: f64,
    tie_break: String,
}

/// Initial fluid state file: 1-based `[class, pool, value]` occupancy
/// triples plus per-class queues.
#[derive(Serialize, Deserialize)]
struct FluidInitFile {
    psi: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
}

fn fluid_state_from_value(value: &Value, net: &Network) -> Result<FluidState, CliError> {
    let file: FluidInitFile = serde_json::from_value(value.clone())
        .map_err(|e| CliError::Runtime(format!("malformed fluid initial state: {e}")))?;
    let mut state = FluidState::empty(net);
    for (i, j, v) in file.psi {
        let k = net
            .activity_index(i.wrapping_sub(1), j.wrapping_sub(1))
            .ok_or_else(|| {
                CliError::Runtime(format!("unknown activity ({i}, {j}) in initial state"))
            })?;
        state.psi[k] = v;
    }
    if file.q.len() != net.num_classes() {
        return Err(CliError::Runtime(
            "initial queue vector length does not match the network".to_string(),
        ));
    }
    state.q = file.q;
    Ok(state)
}

fn execute_fluid(
    cfg: &FluidCmdConfig,
    out_dir: &Path,
    inputs: &[String],
) -> Result<Vec<PathBuf>, CliError> {
    let net = network_from_value(&cfg.network)?;
    let po = priorities(&net, &cfg.tie_break)?;
    let eq = compute_equilibrium(&net, &po);
    let initial = match &cfg.init {
        Some(value) => fluid_state_from_value(value, &net)?,
        None => FluidState::empty(&net),
    };
    let ctrl = StepControl {
        step: cfg.step,
        ..StepControl::default()
    };
    let traj = integrate_fluid(&initial, &net, &po, cfg.horizon, ctrl)?;
    let csv = traj.to_csv(&net, &eq, cfg.interval);
    let mut outputs = vec![write_file(out_dir, "fluid_trajectory.csv", &csv)?];
    let names = vec!["fluid_trajectory.csv".to_string()];
    outputs.push(write_manifest(
        out_dir,
        "fluid",
        inputs,
        0,
        serde_json::to_value(cfg).unwrap(),
        &names,
    )?);
    Ok(outputs)
}

#[derive(Serialize, Deserialize)]
struct HydroCmdConfig {
    network: Value,
    init: Value,
    horizon: f64,
    interval: f64,
    tie_break: String,
}

/// Deviation state file: 1-based `[class, pool, value]` occupancy-deviation
/// triples plus per-class queue components.
#[derive(Serialize, Deserialize)]
struct DeviationFile {
    u: Vec<(usize, usize, f64)>,
    w: Vec<f64>,
}

fn deviation_from_value(value: &Value, net: &Network) -> Result<DeviationState, CliError> {
    let file: DeviationFile = serde_json::from_value(value.clone())
        .map_err(|e| CliError::Runtime(format!("malformed deviation state: {e}")))?;
    let mut dev = DeviationState::zero(net);
    for (i, j, v) in file.u {
        let k = net
            .activity_index(i.wrapping_sub(1), j.wrapping_sub(1))
            .ok_or_else(|| {
                CliError::Runtime(format!("unknown activity ({i}, {j}) in deviation state"))
            })?;
        dev.u[k] = v;
    }
    if file.w.len() != net.num_classes() {
        return Err(CliError::Runtime(
            "deviation queue vector length does not match the network".to_string(),
        ));
    }
    dev.w = file.w;
    Ok(dev)
}

fn deviation_csv(times: &[f64], states: &[DeviationState], net: &Network) -> String {
    let mut out = String::from("t");
    for a in net.activities() {
        out.push_str(&format!(",u_{}_{}", a.class + 1, a.pool + 1));
    }
    for i in 0..net.num_classes() {
        out.push_str(&format!(",w_{}", i + 1));
    }
    out.push_str(",norm\n");
    for (t, dev) in times.iter().zip(states) {
        out.push_str(&format!("{t}"));
        for v in dev.u.iter().chain(dev.w.iter()) {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", dev.norm()));
    }
    out
}

fn execute_hydro(
    cfg: &HydroCmdConfig,
    out_dir: &Path,
    inputs: &[String],
) -> Result<Vec<PathBuf>, CliError> {
    let net = network_from_value(&cfg.network)?;
    let po = priorities(&net, &cfg.tie_break)?;
    let initial = deviation_from_value(&cfg.init, &net)?;
    let traj = integrate_hydro(&initial, &net, &po, cfg.horizon, StepControl::default())?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    let t_end = *traj.times.last().unwrap();
    let mut t = 0.0;
    while t <= t_end + 1e-12 {
        times.push(t.min(t_end));
        states.push(traj.sample(t.min(t_end)));
        t += cfg.interval;
    }
    let csv = deviation_csv(&times, &states, &net);
    let mut outputs = vec![write_file(out_dir, "hydro_trajectory.csv", &csv)?];
    let names = vec!["hydro_trajectory.csv".to_string()];
    outputs.push(write_manifest(
        out_dir,
        "hydro",
        inputs,
        0,
        serde_json::to_value(cfg).unwrap(),
        &names,
    )?);
    Ok(outputs)
}

#[derive(Serialize, Deserialize)]
struct LfmCmdConfig {
    network: Value,
    init: Option<Value>,
    horizon: f64,
    dt: f64,
    tie_break: String,
}

fn execute_lfm(
    cfg: &LfmCmdConfig,
    out_dir: &Path,
    inputs: &[String],
) -> Result<Vec<PathBuf>, CliError> {
    let net = network_from_value(&cfg.network)?;
    let po = priorities(&net, &cfg.tie_break)?;
    let maps = lfm_matrix(&net, &po)?;
    let dc = decay_constants(&maps, &net)?;

    let mut maps_value: Value = serde_json::from_str(&maps.to_json(&net)).unwrap();
    maps_value["decay_c1"] = serde_json::json!(dc.c1);
    maps_value["decay_c2"] = serde_json::json!(dc.c2);
    let text = serde_json::to_string_pretty(&maps_value).unwrap();
    let mut outputs = vec![write_file(out_dir, "lfm_maps.json", &text)?];
    let mut names = vec!["lfm_maps.json".to_string()];

    if let Some(init_value) = &cfg.init {
        let initial = deviation_from_value(init_value, &net)?;
        let traj = integrate_lfm(&initial, &maps, &net, cfg.horizon, cfg.dt);
        let states: Vec<DeviationState> = (0..traj.times.len())
            .map(|idx| traj.state(idx, &net))
            .collect();
        let csv = deviation_csv(&traj.times, &states, &net);
        outputs.push(write_file(out_dir, "lfm_trajectory.csv", &csv)?);
        names.push("lfm_trajectory.csv".to_string());
    }
    outputs.push(write_manifest(
        out_dir,
        "lfm",
        inputs,
        0,
        serde_json::to_value(cfg).unwrap(),
        &names,
    )?);
    Ok(outputs)
}

#[derive(Serialize, Deserialize)]
struct SimulateCmdConfig {
    network: Value,
    r: u64,
    seed: u64,
    horizon: f64,
    warmup: f64,
    interval: f64,
    init: String,
    tie_break: String,
}

fn execute_simulate(
    cfg: &SimulateCmdConfig,
    out_dir: &Path,
    inputs: &[String],
) -> Result<Vec<PathBuf>, CliError> {
    let net = network_from_value(&cfg.network)?;
    let po = priorities(&net, &cfg.tie_break)?;
    let eq = compute_equilibrium(&net, &po);
    let initial = match cfg.init.as_str() {
        "empty" => InitialState::Empty,
        "equilibrium" => InitialState::EquilibriumRounded,
        other => {
            return Err(CliError::Runtime(format!(
                "unknown initial state `{other}`; use `empty` or `equilibrium`"
            )))
        }
    };
    let sim_cfg = SimConfig {
        seed: cfg.seed,
        horizon: cfg.horizon,
        warmup: cfg.warmup,
        initial,
        sample_interval: cfg.interval,
    };
    let (trace, _) = simulate_horizon(&net, &po, &eq, cfg.r, &sim_cfg)?;
    let estimate = estimate_stationary(&net, &po, &eq, cfg.r, &sim_cfg, 8)?;
    let summary = serde_json::to_string_pretty(&estimate).unwrap();
    let mut outputs = vec![
        write_file(out_dir, "trace.csv", &trace.to_csv(&net))?,
        write_file(out_dir, "summary.json", &summary)?,
    ];
    let names = vec!["trace.csv".to_string(), "summary.json".to_string()];
    outputs.push(write_manifest(
        out_dir,
        "simulate",
        inputs,
        cfg.seed,
        serde_json::to_value(cfg).unwrap(),
        &names,
    )?);
    Ok(outputs)
}

#[derive(Serialize, Deserialize)]
struct SweepCmdConfig {
    network: Value,
    r_values: Vec<u64>,
    epsilon: f64,
    replications: usize,
    base_seed: u64,
    horizon_multiplier: f64,
    warmup_fraction: f64,
    batches: usize,
    tie_break: String,
}

fn execute_sweep(
    cfg: &SweepCmdConfig,
    out_dir: &Path,
    inputs: &[String],
) -> Result<Vec<PathBuf>, CliError> {
    let net = network_from_value(&cfg.network)?;
    let po = priorities(&net, &cfg.tie_break)?;
    let eq = compute_equilibrium(&net, &po);
    let sweep_cfg = ScalingConfig {
        r_values: cfg.r_values.clone(),
        epsilon: cfg.epsilon,
        horizon_multiplier: cfg.horizon_multiplier,
        warmup_fraction: cfg.warmup_fraction,
        replications: cfg.replications,
        batches: cfg.batches,
        base_seed: cfg.base_seed,
    };
    let result = run_scaling_sweep(&net, &po, &eq, &sweep_cfg)?;
    let fit = fit_tightness_exponent(&result)?;

    #[derive(Serialize)]
    struct SweepSummary<'a> {
        config: &'a ScalingConfig,
        per_scale: &'a [laplab::experiments::PerScaleSummary],
        fitted_slope: f64,
        fitted_intercept: f64,
        slope_stderr: f64,
    }
    let summary = serde_json::to_string_pretty(&SweepSummary {
        config: &result.config,
        per_scale: &result.per_scale,
        fitted_slope: fit.slope,
        fitted_intercept: fit.intercept,
        slope_stderr: fit.slope_stderr,
    })
    .unwrap();

    let mut outputs = vec![
        write_file(out_dir, "sweep.csv", &result.to_csv())?,
        write_file(out_dir, "sweep_summary.json", &summary)?,
    ];
    let names = vec!["sweep.csv".to_string(), "sweep_summary.json".to_string()];
    outputs.push(write_manifest(
        out_dir,
        "sweep",
        inputs,
        cfg.base_seed,
        serde_json::to_value(cfg).unwrap(),
        &names,
    )?);
    Ok(outputs)
}

#[derive(Serialize, Deserialize)]
struct LyapunovCmdConfig {
    network: Value,
    r: u64,
    level: f64,
    window: f64,
    replications: usize,
    base_seed: u64,
    tie_break: String,
}

fn execute_lyapunov(
    cfg: &LyapunovCmdConfig,
    out_dir: &Path,
    inputs: &[String],
) -> Result<Vec<PathBuf>, CliError> {
    let net = network_from_value(&cfg.network)?;
    let po = priorities(&net, &cfg.tie_break)?;
    let eq = compute_equilibrium(&net, &po);
    let duals = compute_duals(&net)?;
    let estimate = lyapunov_drift_check(
        &net,
        &po,
        &eq,
        &duals,
        cfg.r,
        cfg.window,
        cfg.level,
        cfg.replications,
        cfg.base_seed,
    )?;
    let text = serde_json::to_string_pretty(&estimate).unwrap();
    let mut outputs = vec![write_file(out_dir, "lyapunov.json", &text)?];
    let names = vec!["lyapunov.json".to_string()];
    outputs.push(write_manifest(
        out_dir,
        "lyapunov",
        inputs,
        cfg.base_seed,
        serde_json::to_value(cfg).unwrap(),
        &names,
    )?);
    Ok(outputs)
}

#[derive(Serialize, Deserialize)]
struct OracleCmdConfig {
    network: Value,
    r: u64,
    queue_cap: u64,
    tie_break: String,
}

fn execute_oracle(
    cfg: &OracleCmdConfig,
    out_dir: &Path,
    inputs: &[String],
) -> Result<Vec<PathBuf>, CliError> {
    let net = network_from_value(&cfg.network)?;
    let po = priorities(&net, &cfg.tie_break)?;
    let solution = solve_ctmc_oracle(&net, &po, cfg.r, cfg.queue_cap)?;

    #[derive(Serialize)]
    struct OracleOut {
        num_states: usize,
        mean_psi: Vec<f64>,
        mean_q: Vec<f64>,
        mean_total: f64,
        mean_norm1: f64,
        mean_norm2: f64,
        prob_all_busy: f64,
    }
    let text = serde_json::to_string_pretty(&OracleOut {
        num_states: solution.num_states,
        mean_psi: solution.mean_psi,
        mean_q: solution.mean_q,
        mean_total: solution.mean_total,
        mean_norm1: solution.mean_norm1,
        mean_norm2: solution.mean_norm2,
        prob_all_busy: solution.prob_all_busy,
    })
    .unwrap();
    let mut outputs = vec![write_file(out_dir, "oracle.json", &text)?];
    let names = vec!["oracle.json".to_string()];
    outputs.push(write_manifest(
        out_dir,
        "oracle",
        inputs,
        0,
        serde_json::to_value(cfg).unwrap(),
        &names,
    )?);
    Ok(outputs)
}
