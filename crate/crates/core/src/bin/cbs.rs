use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use cbs_core::harness::{self, compare_methods, run_experiment, write_jsonl, RewardSpec, RunContext, TaskSpec};
use cbs_core::soft::{solve, SoftMDPSpec};
use cbs_core::{Error, Result, TabularLM};

#[derive(Parser)]
#[command(name = "cbs", version, about = "Guided decoding by chunk-level beam search")]
struct Cli {
    /// Task configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory for cached remote responses.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Prompts run concurrently (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    parallelism: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant checks on the bundled fixtures.
    Verify {
        /// Shift one tuned-policy logit by this much first (the checks should fail).
        #[arg(long)]
        perturb: Option<f64>,
    },
    /// Run the configured method over every prompt; writes JSONL records.
    Run,
    /// Run the configured method and its `compare` list; writes a JSON report.
    Compare,
    /// Print soft values and the partition function for a tabular instance.
    Oracle {
        /// Fixture file, or a builtin name (w2s-ref, uniform27, ...).
        #[arg(long)]
        model: String,
        /// Prompt text under the model's vocabulary.
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Defaults to the model's horizon cap.
        #[arg(long)]
        horizon: Option<usize>,
        /// `count_symbol:SYM:W`, `contains:SYM:V` or `constant:V`.
        #[arg(long, default_value = "constant:0")]
        reward: String,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn load_task(cli: &Cli) -> Result<(TaskSpec, RunContext)> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut spec = TaskSpec::load(path)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let ctx = RunContext {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        cache_dir: cli.cache_dir.clone(),
        parallelism: cli.parallelism,
    };
    Ok((spec, ctx))
}

fn parse_reward(s: &str) -> Result<RewardSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |v: &str| v.parse::<f64>().map_err(|e| Error::Config(format!("bad number {v:?}: {e}")));
    match parts.as_slice() {
        ["count_symbol", sym, w] => Ok(RewardSpec::CountSymbol { symbol: sym.to_string(), weight: num(w)? }),
        ["contains", sym, v] => Ok(RewardSpec::Contains { symbol: sym.to_string(), value: num(v)? }),
        ["constant", v] => Ok(RewardSpec::Constant { value: num(v)? }),
        _ => Err(Error::Config(format!("unrecognized reward {s:?}"))),
    }
}

#[derive(Serialize)]
struct OracleState {
    prefix: Vec<String>,
    v: f64,
    q: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct OracleReport {
    prompt: String,
    beta: f64,
    horizon: usize,
    log_z: f64,
    log_z_recursive: f64,
    states: Vec<OracleState>,
}

fn oracle(model: &str, prompt: &str, beta: f64, horizon: Option<usize>, reward: &str, out: &mut dyn Write) -> Result<()> {
    let lm = if Path::new(model).exists() { TabularLM::load(model)? } else { harness::fixtures::builtin_model(model)? };
    let vocab = cbs_core::LanguageModel::vocab(&lm).clone();
    let x = vocab.encode(prompt)?;
    let reward = parse_reward(reward)?.build(&vocab)?;
    let spec = SoftMDPSpec::new(&lm, reward, beta, x, horizon.unwrap_or(lm.horizon_cap()))?;
    let (tables, _) = solve(&spec)?;
    let symbols = |ids: &[u32]| ids.iter().map(|&t| vocab.symbol(t).unwrap_or("?").to_string()).collect();
    let states = tables
        .states()
        .into_iter()
        .map(|s| OracleState {
            prefix: symbols(s),
            v: tables.v(s).unwrap_or(f64::NAN),
            q: tables.q_row(s).unwrap_or(&[]).iter().map(|q| q.is_finite().then_some(*q)).collect(),
        })
        .collect();
    let report = OracleReport {
        prompt: prompt.to_string(),
        beta,
        horizon: spec.horizon(),
        log_z: tables.log_z(),
        log_z_recursive: tables.log_z_recursive(),
        states,
    };
    serde_json::to_writer_pretty(&mut *out, &report)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let mut out = output(cli.out.as_deref())?;
    match &cli.command {
        Command::Verify { perturb } => {
            let mut fixtures = harness::bundled_fixtures()?;
            if let Some(delta) = perturb {
                fixtures = fixtures.iter().map(|f| harness::verify::perturbed(f, *delta)).collect::<Result<_>>()?;
            }
            let report = harness::verify(&fixtures, cli.seed.unwrap_or(0));
            for c in &report.checks {
                eprintln!(
                    "{} {:<16} {:<24} max_error={:.3e} tol={:.0e} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.fixture,
                    c.max_error,
                    c.tolerance,
                    c.detail
                );
            }
            serde_json::to_writer_pretty(&mut out, &report)?;
            writeln!(out)?;
            Ok(report.all_passed())
        }
        Command::Run => {
            let (spec, ctx) = load_task(cli)?;
            let records = run_experiment(&spec, &ctx)?;
            write_jsonl(&mut out, &records)?;
            let failed = records.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} of {} prompts failed", records.len());
            }
            Ok(true)
        }
        Command::Compare => {
            let (spec, ctx) = load_task(cli)?;
            let (report, _) = compare_methods(&spec, &ctx)?;
            writeln!(out, "{}", report.to_json()?)?;
            Ok(true)
        }
        Command::Oracle { model, prompt, beta, horizon, reward } => {
            oracle(model, prompt, *beta, *horizon, reward, &mut out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
