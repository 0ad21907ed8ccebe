use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ioda_cli::server::{self, AppState};
use ioda_cli::{parse_on_off, Category, Overrides};
use ioda_core::experiment::{cmd_collect, cmd_eval, cmd_run};
use ioda_core::session::DEFAULT_TICK_HZ;

#[derive(Parser)]
#[command(
    name = "ioda",
    version,
    about = "Shared-control navigation with imaginary out-of-distribution actions"
)]
struct Cli {
    /// Scenario config file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for run and eval results.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Turn the imagined-state projection on or off.
    #[arg(long, global = true, value_name = "on|off", value_parser = parse_on_off)]
    ioda: Option<bool>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect the observation set and calibrate the detector.
    Collect,
    /// Run one seeded episode with the simulated user.
    Run,
    /// Run seeds `seed .. seed + n` under both loop modes and aggregate.
    Eval {
        #[arg(long, default_value_t = 50)]
        seeds: usize,
    },
    /// Start the live teleoperation server.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of `*.conf` scenarios offered to clients.
        #[arg(long, default_value = "scenarios")]
        scenarios: PathBuf,
        /// Static UI bundle to serve.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TICK_HZ)]
        tick_hz: f64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        ioda: cli.ioda,
    };
    match cli.cmd {
        Cmd::Collect => {
            let cfg = overrides.resolve()?;
            let r = cmd_collect(&cfg)?;
            println!(
                "wrote {} ({} rollouts, {} states), epsilon {:.6}",
                r.rollout_path.display(),
                r.summary.n_rollouts,
                r.summary.n_states,
                r.summary.epsilon
            );
            println!("calibration: {}", r.calibration_path.display());
        }
        Cmd::Run => {
            let cfg = overrides.resolve()?;
            let run = cmd_run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&run.metrics)?);
            println!(
                "trajectory: {}",
                cfg.out_dir.join("trajectory.jsonl").display()
            );
        }
        Cmd::Eval { seeds } => {
            let cfg = overrides.resolve()?;
            let rows = cmd_eval(&cfg, seeds)?;
            println!(
                "{:<9} {:>7} {:>8} {:>9} {:>8} {:>9}",
                "mode", "success", "subgoals", "steps", "gap", "ood_steps"
            );
            for r in &rows {
                println!(
                    "{:<9} {:>7.2} {:>8.2} {:>9.1} {:>8.4} {:>9.1}",
                    r.condition.as_str(),
                    r.success_rate,
                    r.mean_subgoals_reached,
                    r.mean_steps,
                    r.mean_gap,
                    r.mean_ood_steps
                );
            }
            println!("table: {}", cfg.out_dir.join("eval.csv").display());
        }
        Cmd::Serve {
            addr,
            scenarios,
            static_dir,
            tick_hz,
        } => {
            if !(tick_hz.is_finite() && tick_hz > 0.0) {
                bail!(ioda_core::Error::Config(
                    "--tick-hz must be positive".into()
                ));
            }
            let state = Arc::new(AppState::new(
                scenarios,
                Duration::from_secs_f64(1.0 / tick_hz),
            ));
            let app = server::router(state, static_dir.as_deref());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                tracing::info!("listening on http://{}", listener.local_addr()?);
                server::serve(listener, app).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = Category::of(&e);
            eprintln!("error[{}]: {e:#}", cat.as_str());
            ExitCode::from(cat as u8)
        }
    }
}
