use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use tandem::bench::{sweep, write_artifacts, write_sweep_csv, Knob, MetricsReport, Prepared, Scenario};
use tandem::choice::stream_rng;
use tandem::clock::{Clock, SimClock, WallClock};
use tandem::cloud::{serve, CloudRuntime, ServeOptions};
use tandem::device::{run_session, DeviceSession};
use tandem::transport::TcpCarrier;
use tandem::types::SessionId;

#[derive(Parser)]
#[command(version, about = "Device-cloud speculative serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML file.
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario> {
        let mut s = Scenario::load(&self.scenario)?;
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        Ok(s)
    }

    fn prepare(&self) -> Result<Prepared> {
        Ok(Prepared::new(self.load()?)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Profile the draft/target pair and write thresholds as JSON.
    Profile {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Number of synthetic prompts.
        #[arg(long, default_value_t = 32)]
        prompts: usize,
        #[arg(short, long, default_value = "profile.json")]
        out: PathBuf,
    },
    /// Run the scenario in simulated time and write per-token artifacts.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Artifact directory.
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-run the scenario over values of one knob; one CSV row per value.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_enum)]
        knob: Knob,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(short, long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Serve verification over TCP with the scenario's target model.
    Serve {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Sleep for the cost model's iteration time.
        #[arg(long)]
        emulate_cost: bool,
        /// Exit after this many connections have closed.
        #[arg(long)]
        max_connections: Option<usize>,
        /// Rewritten with scheduler counters after every iteration.
        #[arg(long)]
        status: Option<PathBuf>,
    },
    /// Run one device session against a `serve` instance.
    Device {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Session index; picks the prompt and importance stream.
        #[arg(long, default_value_t = 0)]
        session: u64,
        /// Use wall time and sleep for the device cost model.
        #[arg(long)]
        wall: bool,
        /// Writes tokens.csv and summary.json here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Profile { scenario, prompts, out } => {
            if prompts == 0 {
                bail!("--prompts must be positive");
            }
            let p = scenario.prepare()?;
            let result = p.run_profile(prompts)?;
            result.save(&out)?;
            info!(
                "c_th {:.4}, alpha {:.4}, {} chunks; wrote {}",
                result.c_th,
                result.alpha,
                result.chunks,
                out.display()
            );
        }
        Command::Run { scenario, out } => {
            let run = scenario.prepare()?.run()?;
            write_artifacts(&out, &run)?;
            print_report(&run.report);
            info!("artifacts in {}", out.display());
        }
        Command::Sweep {
            scenario,
            knob,
            values,
            out,
        } => {
            let rows = sweep(&scenario.prepare()?, knob, &values)?;
            for r in &rows {
                println!(
                    "{knob:?}={}: tbt {:.4}s, offload {:.3}, cost {:.5}, latency {:.3}s",
                    r.value, r.report.mean_tbt, r.report.offload_fraction, r.report.cost, r.report.mean_latency
                );
            }
            write_sweep_csv(&out, &rows)?;
            info!("wrote {}", out.display());
        }
        Command::Serve {
            scenario,
            addr,
            emulate_cost,
            max_connections,
            status,
        } => {
            let p = scenario.prepare()?;
            let s = &p.scenario;
            let runtime = CloudRuntime::new(p.target.clone(), s.cloud.clone(), stream_rng(s.seed, 0xc10d))?;
            let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
            info!("serving on {}", listener.local_addr()?);
            let options = ServeOptions {
                emulate_cost,
                max_connections,
                status_path: status,
            };
            let status = serve(listener, runtime, options)?;
            println!("{}", serde_json::to_string_pretty(&status)?);
        }
        Command::Device {
            scenario,
            addr,
            session,
            wall,
            out,
        } => {
            let p = scenario.prepare()?;
            let s = &p.scenario;
            let mut device = DeviceSession::seeded(
                SessionId(session),
                p.prompt(session as usize),
                s.session_config(),
                p.policy()?,
                s.device_options()?,
                p.draft.clone(),
                p.importance(session),
            )?;
            let mut carrier = TcpCarrier::connect(&addr).with_context(|| format!("connecting to {addr}"))?;
            let mut clock: Box<dyn Clock> = if wall {
                Box::new(WallClock::new(true))
            } else {
                Box::new(SimClock::default())
            };
            run_session(&mut device, &mut carrier, clock.as_mut())?;
            carrier.shutdown();
            let summary = device.summary();
            println!("{}", serde_json::to_string_pretty(summary)?);
            if let Some(dir) = out {
                write_device(&dir, &device)?;
            }
        }
    }
    Ok(())
}

fn print_report(r: &MetricsReport) {
    println!("scenario        {}", r.scenario);
    println!("sessions        {} ({} tokens)", r.sessions, r.tokens);
    println!("mean tbt        {:.4}s", r.mean_tbt);
    println!(
        "offload         {:.3} of tokens, {:.3} of chunks",
        r.offload_fraction, r.decision_rate
    );
    println!("acceptance      {:.3}", r.acceptance_rate);
    println!("hit rate        {:.3} (adopted {:.3})", r.hit_rate, r.adoption_rate);
    println!("fallbacks       {}", r.fallback_count);
    println!("cost            {:.5}", r.cost);
    println!("cloud latency   mean {:.3}s p99 {:.3}s", r.mean_latency, r.latency_p99);
}

fn write_device<R: tandem::choice::ChoiceSource>(dir: &Path, device: &DeviceSession<R>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("tokens.csv"))?;
    for r in device.records() {
        w.serialize(r)?;
    }
    w.flush()?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(device.summary())? + "\n",
    )?;
    Ok(())
}
