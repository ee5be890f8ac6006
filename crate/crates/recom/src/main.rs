use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recom::error::{RunError, RunResult};
use recom::harness;
use recom::{checkpoint, RunConfig};
use recom_core::gradcheck;

#[derive(Parser)]
#[command(name = "recom", version, about = "Dual-recurrence multi-agent communication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents and write metrics, comm matrix, manifest and parameters.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Noise-free evaluation of a finished run directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the evaluation trace and comm matrix here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the communication-count matrix from a trace file.
    CommMatrix {
        #[arg(long)]
        trace: PathBuf,
        /// Number of agents; inferred from the trace when absent.
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per agent sequence: identity plus `perms` random ones.
    PermStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        perms: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every backward rule.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the version.
    Version,
}

fn load_config(path: &Path, seed: Option<u64>) -> RunResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_matrix(m: &[Vec<u64>]) {
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
        println!("{}", cells.join(""));
    }
}

fn run(cli: Cli) -> RunResult<()> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let outcome = harness::train(&cfg, Some(&out))?;
            let m = &outcome.metrics;
            match (m.first(), m.last()) {
                (Some(a), Some(b)) => println!(
                    "trained {} episodes: eval reward {:.4} -> {:.4} (agent std {:.4})",
                    cfg.episodes, a.mean_reward, b.mean_reward, b.reward_std
                ),
                _ => println!("no episodes run"),
            }
            println!("artifacts in {}", out.display());
        }
        Command::Eval { checkpoint: dir, out } => {
            let (manifest, agents) = checkpoint::load(&dir)?;
            let ev = harness::evaluate(&agents, &manifest.config)?;
            println!(
                "{} episodes: mean reward {:.4}, agent std {:.4}",
                manifest.config.eval_episodes, ev.mean, ev.std
            );
            for (i, r) in ev.per_agent.iter().enumerate() {
                println!("  agent {i}: {r:.4}");
            }
            if let Some(out) = out {
                std::fs::create_dir_all(&out).map_err(RunError::io(&out))?;
                let matrix = harness::trace_matrix(&ev.trace, manifest.config.n_agents())?;
                harness::write_comm_matrix(&out.join("comm_matrix.csv"), &matrix)?;
                harness::write_trace(&out.join("trace.jsonl"), &ev.trace)?;
            }
        }
        Command::CommMatrix { trace, agents, out } => {
            let lines = harness::read_trace(&trace)?;
            let n = agents
                .or_else(|| lines.first().map(|l| l.observed.len()))
                .ok_or_else(|| RunError::Config(format!("{} holds no rounds; pass --agents", trace.display())))?;
            let m = harness::trace_matrix(&lines, n)?;
            print_matrix(&m);
            if let Some(out) = out {
                std::fs::create_dir_all(&out).map_err(RunError::io(&out))?;
                harness::write_comm_matrix(&out.join("comm_matrix.csv"), &m)?;
            }
        }
        Command::PermStudy { config, perms, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(5);
            let sequences = harness::random_permutations(cfg.n_agents(), perms, &mut rng);
            let table = harness::permutation_study(&cfg, &sequences, out.as_deref())?;
            for r in &table.rows {
                println!("{:?}: {:.4}", r.sequence, r.final_reward);
            }
            println!("spread {:.4}", table.spread);
        }
        Command::Gradcheck { width, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reports = gradcheck::run_suite(width, &mut rng)?;
            for r in &reports {
                println!("{:<16} {:>5} entries  max rel err {:.3e}", r.name, r.entries, r.max_rel_err);
            }
            println!("max rel err {:.3e}", gradcheck::max_rel_err(&reports));
        }
        Command::Version => println!("recom {}", env!("CARGO_PKG_VERSION")),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RECOM_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
