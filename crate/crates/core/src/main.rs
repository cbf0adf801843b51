use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rigidswim::cli::{domain_sweep, parse_list, refinement_csv, refinement_sweep, run_scenario, simulate, verification_report};
use rigidswim::config::Config;
use rigidswim::Error;

#[derive(Parser)]
#[command(name = "rigidswim", version, about = "Self-propelled rigid body in a nonhomogeneous fluid with Navier slip")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML, dotted keys).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Abort on the first invariant breach.
    #[arg(long)]
    hard_invariants: bool,
    /// Seed for the random verification tests; overrides verify.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Single run with trajectory, ledger, diagnostics, density and report.
    Run(Common),
    /// Same scenario on several outer radii.
    SweepDomain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "3,4,6")]
        radii: String,
    },
    /// Basis sizes times time steps.
    SweepRefine {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "10,20")]
        n: String,
        #[arg(long, default_value = "0.01,0.005")]
        dt: String,
    },
    /// Run and write only the verification report; fails if a check fails.
    Verify(Common),
}

fn execute(cli: Cli) -> rigidswim::Result<bool> {
    let load = |c: &Common| -> rigidswim::Result<(Config, u64)> {
        let cfg = Config::from_file(&c.config)?;
        let seed = c.seed.unwrap_or(cfg.seed);
        std::fs::create_dir_all(&c.out_dir)?;
        Ok((cfg, seed))
    };
    match cli.command {
        Command::Run(c) => {
            let (cfg, seed) = load(&c)?;
            let s = run_scenario(&cfg, &c.out_dir, c.hard_invariants, seed)?;
            println!(
                "steps {} final energy {:.6e} min slack {:.3e} mass change {:.3e} density [{:.6}, {:.6}] verification {}",
                s.steps,
                s.final_energy,
                s.min_slack,
                s.max_mass_error,
                s.density_range.0,
                s.density_range.1,
                if s.verification_passed { "pass" } else { "fail" }
            );
            for v in &s.violations {
                eprintln!("{v}");
            }
            Ok(true)
        }
        Command::SweepDomain { common, radii } => {
            let (cfg, _) = load(&common)?;
            let rep = domain_sweep(&cfg, &parse_list::<f64>(&radii)?)?;
            std::fs::write(common.out_dir.join("domain_sweep.csv"), rep.to_csv())?;
            print!("{}", rep.to_csv());
            Ok(true)
        }
        Command::SweepRefine { common, n, dt } => {
            let (cfg, _) = load(&common)?;
            let rows = refinement_sweep(&cfg, &parse_list::<usize>(&n)?, &parse_list::<f64>(&dt)?)?;
            std::fs::write(common.out_dir.join("refinement_sweep.csv"), refinement_csv(&rows))?;
            print!("{}", refinement_csv(&rows));
            Ok(true)
        }
        Command::Verify(c) => {
            let (cfg, seed) = load(&c)?;
            let sim = simulate(&cfg, c.hard_invariants, true)?;
            let rep = verification_report(&cfg, &sim, seed)?;
            std::fs::write(c.out_dir.join("verification.csv"), rep.to_csv())?;
            print!("{}", rep.to_csv());
            Ok(rep.all_pass())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::InvariantBreach { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
