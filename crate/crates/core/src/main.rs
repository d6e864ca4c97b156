use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfgnet::cli::{cmd_evaluate, cmd_fv_check, cmd_train, cmd_trajectories, load_checkpoint, ratio_text, RunConfig};
use mfgnet::error::MfgError;

#[derive(Parser)]
#[command(name = "mfgnet", version, about = "Mean field games with neural potentials and characteristics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a potential and write logs, checkpoints and a summary.
    Train(Common),
    /// Objective of a checkpoint on the validation batch.
    Evaluate(WithCheckpoint),
    /// Forward and backward characteristics of a checkpoint.
    Trajectories(WithCheckpoint),
    /// Finite-volume re-evaluation of a d=2 checkpoint.
    FvCheck(WithCheckpoint),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Defaults to theta.txt in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn resolve(c: &Common) -> Result<RunConfig, MfgError> {
    let mut cfg = RunConfig::from_file(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if c.workers == 0 {
        return Err(MfgError::Config("--workers must be >= 1".into()));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), MfgError> {
    let (common, checkpoint) = match &cli.command {
        Command::Train(c) => (c, None),
        Command::Evaluate(w) | Command::Trajectories(w) | Command::FvCheck(w) => (&w.common, Some(&w.checkpoint)),
    };
    let cfg = resolve(common)?;
    if common.dry_run {
        print!("# {}\n{}", cfg.header(), cfg.echo());
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.workers)
        .build_global()
        .map_err(|e| MfgError::Config(format!("thread pool: {e}")))?;
    let theta = match checkpoint {
        Some(p) => Some(load_checkpoint(&p.clone().unwrap_or_else(|| cfg.out.join("theta.txt")), &cfg)?),
        None => None,
    };
    let prob = cfg.problem_spec()?;
    match &cli.command {
        Command::Train(_) => {
            let out = cmd_train(&cfg)?;
            let v = &out.final_row.val;
            println!(
                "{:?}: iter {} J={:.6e} L={:.6e} F={:.6e} G={:.6e} C_HJB={:.6e}",
                out.status, out.final_row.iter, v.mfg(), v.l, v.f, v.g, out.final_row.c_hjb
            );
            println!("outputs in {}", cfg.out.display());
        }
        Command::Evaluate(_) => {
            let b = cmd_evaluate(&cfg, theta.as_ref().expect("checkpoint loaded"))?;
            println!("# {}", cfg.header());
            println!("J,J_MFG,L,F,G,C1,C2,C_HJB");
            println!(
                "{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
                b.total,
                b.mfg(),
                b.l,
                b.f,
                b.g,
                b.c1,
                b.c2,
                b.hjb(prob.alpha1, prob.alpha2)
            );
        }
        Command::Trajectories(_) => {
            let s = cmd_trajectories(&cfg, theta.as_ref().expect("checkpoint loaded"))?;
            println!(
                "{} paths, {} steps: round-trip median {:.3e} max {:.3e}, straightness median {:.3e}",
                s.n_samples, s.n_t_plot, s.roundtrip_median, s.roundtrip_max, s.straightness_median
            );
        }
        Command::FvCheck(_) => {
            let c = cmd_fv_check(&cfg, theta.as_ref().expect("checkpoint loaded"))?;
            println!("term       grid        lagrangian  ratio");
            for (name, g, l) in [
                ("J", c.grid.mfg(), c.lagrangian.mfg()),
                ("L", c.grid.l, c.lagrangian.l),
                ("F", c.grid.f, c.lagrangian.f),
                ("G", c.grid.g, c.lagrangian.g),
            ] {
                println!("{name:<10} {g:<11.4e} {l:<11.4e} {}", ratio_text(g, l));
            }
            println!("mass drift {:.2e}, min density {:.2e}, escaped {:.2e}", c.mass_drift, c.min_density, c.escaped);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                MfgError::Config(_) | MfgError::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
