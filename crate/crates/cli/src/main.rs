use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use kvcarbon::perfmodel::{self, ModelScale, SynthConfig};
use kvcarbon::planner::{self, KnapsackInstance};
use kvcarbon::sim::{self, PlannerMode, PolicyBenchConfig, SimulationConfig};
use kvcarbon::workload::TaskKind;

#[derive(Parser)]
#[command(name = "kvcarbon", version, about = "Carbon-aware KV-cache sizing for LLM serving")]
struct Cli {
    /// Seed overriding the one in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; results go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a day of serving and write requests.jsonl, windows.csv and summary.json.
    Simulate {
        /// Override the config's mode: adaptive, full, none or fixed:<TB>.
        #[arg(long)]
        mode: Option<PlannerMode>,
        #[arg(long)]
        label: Option<String>,
    },
    /// Solve one planning horizon from the config's true traces and write plan.json.
    Plan,
    /// Token hit rate of FIFO, LRU and LCS across cache sizes (policy_bench.csv).
    PolicyBench,
    /// Calibrate a synthetic profile grid (profile.csv).
    ProfileSynth {
        #[arg(long, default_value = "multiturn", value_parser = parse_task)]
        task: TaskKind,
        #[arg(long, default_value = "70b", value_parser = parse_model)]
        model: ModelScale,
    },
    /// Map a knapsack instance to a planning instance and decide it (reduction.json).
    ReduceKnapsack,
    /// Compare finished runs given their output directories (comparison.json).
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
    },
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "multiturn" => Ok(TaskKind::MultiTurn),
        "doccomp" => Ok(TaskKind::DocComp),
        _ => Err(format!("unknown task `{s}` (expected multiturn or doccomp)")),
    }
}

fn parse_model(s: &str) -> Result<ModelScale, String> {
    match s.to_ascii_lowercase().as_str() {
        "70b" => Ok(ModelScale::Large),
        "8b" => Ok(ModelScale::Small),
        _ => Err(format!("unknown model `{s}` (expected 70b or 8b)")),
    }
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_toml)
}

/// Write `text` to `out/name`, or to stdout without `--out`.
fn emit(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    let out = cli.out.as_deref();
    match cli.command {
        Command::Simulate { mode, label } => {
            let mut cfg: SimulationConfig = config_or_default(config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            if let Some(label) = label {
                cfg.label = label;
            }
            let report = sim::run_simulation(&cfg)?;
            let s = &report.summary;
            eprintln!(
                "{}: {} requests, {:.1} gCO2e, TTFT attainment {:.3}, TPOT attainment {:.3}{}",
                s.label,
                s.requests,
                s.carbon.total.value(),
                s.ttft_attainment,
                s.tpot_attainment,
                if s.slo_met { "" } else { " (SLO violated)" }
            );
            match out {
                Some(dir) => report.write(dir)?,
                None => print!("{}", report.summary_json()?),
            }
        }
        Command::Plan => {
            let cfg: SimulationConfig = config_or_default(config)?;
            let grid = sim::resolve_profile(&cfg)?;
            let instance = sim::oracle_instance(&cfg, &grid)?;
            let (plan, wall) = planner::solve_timed(&instance)?;
            if !plan.feasible {
                eprintln!("no plan meets the SLO; reporting the highest-attainment plan");
            }
            let export = planner::export_plan(&instance, &plan, wall)?;
            emit(out, "plan.json", &(serde_json::to_string_pretty(&export)? + "\n"))?;
        }
        Command::PolicyBench => {
            let mut cfg: PolicyBenchConfig = config_or_default(config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let rows = sim::policy_bench(&cfg)?;
            let mut text = String::from("policy,size,token_hit_rate\n");
            for r in rows {
                text += &format!("{},{},{}\n", r.policy, r.size_tb, r.token_hit_rate);
            }
            emit(out, "policy_bench.csv", &text)?;
        }
        Command::ProfileSynth { task, model } => {
            let mut cfg = match config {
                Some(path) => read_toml::<SynthConfig>(path)?,
                None => SynthConfig::preset(task, model),
            };
            if let Some(seed) = cli.seed {
                cfg.workload.seed = seed;
            }
            let grid = perfmodel::synth_profile(&cfg)?;
            emit(out, "profile.csv", &grid.to_csv())?;
        }
        Command::ReduceKnapsack => {
            let Some(path) = config else {
                bail!("reduce-knapsack needs --config with weights, values, budget and target");
            };
            let k: KnapsackInstance = read_toml(path)?;
            let reduction = planner::knapsack_reduce(&k)?;
            let plan = planner::solve_exact(&reduction.instance)?;
            let report = serde_json::json!({
                "knapsack": k,
                "plan": plan,
                "budget": reduction.budget,
                "plan_within_budget": reduction.accepts(&plan),
                "knapsack_feasible": (k.weights.len() < 32).then(|| k.brute_force()),
            });
            emit(out, "reduction.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        Command::Compare { runs } => {
            let summaries = runs
                .iter()
                .map(|d| sim::read_summary(&d.join("summary.json")))
                .collect::<Result<Vec<_>, _>>()?;
            let cmp = sim::compare_runs(&summaries)?;
            for label in &cmp.slo_violated {
                eprintln!("{label}: SLO violated");
            }
            emit(out, "comparison.json", &(serde_json::to_string_pretty(&cmp)? + "\n"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
