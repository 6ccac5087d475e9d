use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lifeline_cli::api::{self, AppState};
use lifeline_cli::{default_until, drive, frames, inspect_node, load_world};
use lifeline_core::sim::{read_jsonl, summarize, write_jsonl};
use lifeline_core::{NodeId, Session, SimTime};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "lifeline",
    version,
    about = "Emergency ad hoc network simulator and station service"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its event log.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds to run.
        #[arg(long)]
        until: Option<f64>,
        /// Event log destination (JSONL); stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Serve the station API on this address and run in real time.
        #[arg(long)]
        serve: Option<SocketAddr>,
        /// Simulated seconds per wall-clock second in served mode.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Accept raw frames over TCP (served mode only).
        #[arg(long, num_args = 0..=1, default_missing_value = "127.0.0.1:33333")]
        frames: Option<SocketAddr>,
        /// Node receiving frames from the TCP listener; the first station by default.
        #[arg(long)]
        frames_node: Option<NodeId>,
    },
    /// Dump one node's protocol state at a given time.
    Inspect {
        scenario: PathBuf,
        #[arg(long)]
        node: NodeId,
        #[arg(long)]
        at: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check an event log and print a summary.
    Replay { log: PathBuf },
}

fn secs(s: f64) -> Result<SimTime> {
    if !(s.is_finite() && s >= 0.0) {
        bail!("time must be a non-negative number of seconds");
    }
    Ok(SimTime::from_secs_f64(s))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::Run {
            scenario,
            seed,
            until,
            log,
            serve,
            speed,
            frames,
            frames_node,
        } => {
            let world = load_world(&scenario, seed)?;
            let until = match until {
                Some(u) => secs(u)?,
                None => default_until(&scenario)?,
            };
            match serve {
                None => {
                    if frames.is_some() {
                        bail!("--frames needs --serve");
                    }
                    run_batch(world, until, log)
                }
                Some(addr) => {
                    let node = match frames_node {
                        Some(n) => n,
                        None => world
                            .nodes()
                            .values()
                            .find(|n| n.kind == lifeline_core::sim::NodeKind::Station)
                            .map(|n| n.id.clone())
                            .context("scenario has no station for --frames")?,
                    };
                    let rt = tokio::runtime::Runtime::new()?;
                    let state = AppState::new(Session::new(world));
                    rt.block_on(serve_mode(state.clone(), addr, speed, until, frames, node))?;
                    let session = rt.block_on(state.session.lock_owned());
                    if let Some(path) = log {
                        let f = BufWriter::new(File::create(&path)?);
                        write_jsonl(f, session.world().log())?;
                    }
                    Ok(())
                }
            }
        }
        Cmd::Inspect {
            scenario,
            node,
            at,
            seed,
        } => {
            let mut world = load_world(&scenario, seed)?;
            world.run_until(secs(at)?);
            let dump = inspect_node(&world, &node)?;
            println!("{}", serde_json::to_string_pretty(&dump)?);
            Ok(())
        }
        Cmd::Replay { log } => {
            let f = File::open(&log).with_context(|| format!("opening {}", log.display()))?;
            let records = read_jsonl(BufReader::new(f))?;
            println!("{}", serde_json::to_string_pretty(&summarize(&records))?);
            Ok(())
        }
    }
}

fn run_batch(world: lifeline_core::World, until: SimTime, log: Option<PathBuf>) -> Result<()> {
    let mut session = Session::new(world);
    session.run_until(until);
    let world = session.world();
    match log {
        Some(path) => {
            let f = BufWriter::new(
                File::create(&path).with_context(|| format!("creating {}", path.display()))?,
            );
            write_jsonl(f, world.log())?;
        }
        None => {
            let out = io::stdout().lock();
            let mut out = BufWriter::new(out);
            write_jsonl(&mut out, world.log())?;
            out.flush()?;
        }
    }
    let summary = summarize(world.log());
    tracing::info!(
        records = summary.records,
        delivered = summary.delivered.len(),
        victims = session.victims().len(),
        sha256 = %summary.sha256,
        "run complete at t={}",
        world.clock()
    );
    Ok(())
}

async fn serve_mode(
    state: AppState,
    addr: SocketAddr,
    speed: f64,
    until: SimTime,
    frames_addr: Option<SocketAddr>,
    frames_node: NodeId,
) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "station API listening");
    let state_for_api = state.clone();
    if let Some(fa) = frames_addr {
        let st = state.clone();
        tokio::spawn(async move {
            if let Err(e) = frames::listen(fa, frames_node, st).await {
                tracing::error!("frame listener: {e}");
            }
        });
    }
    tokio::spawn(async move {
        drive(state.clone(), speed, Some(until)).await;
        tracing::info!("simulation reached t={until}; still serving");
    });
    let server = axum::serve(listener, api::router(state_for_api));
    tokio::select! {
        r = server => r?,
        _ = tokio::signal::ctrl_c() => tracing::info!("interrupted"),
    }
    Ok(())
}
