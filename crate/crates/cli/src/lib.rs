//! `speedlab` command line: run, schedule, report, servers, simulate, serve.

pub mod commands;
pub mod error;
pub mod linkspec;
pub mod record;
pub mod registry;
pub mod report;
pub mod scheduler;
pub mod store;

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use speedlab_core::coordinator::{Schedule, ServerDescriptor};
use speedlab_core::engine::Direction;

use crate::commands::{Context, Format, RunOptions, ServersAction, SimulateOptions};
use crate::error::{exit, CliError, Result};
use crate::record::Origin;
use crate::registry::RegistryFile;
use crate::report::Filters;
use crate::scheduler::{Clock, SystemClock};
use crate::store::Store;

#[derive(Debug, Parser)]
#[command(name = "speedlab", version, about = "Parallel-connection speed tests with disclosed methodology")]
pub struct Cli {
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Human)]
    pub format: FormatArg,
    /// Result store (newline-delimited records).
    #[arg(long, global = true, env = "SPEEDLAB_STORE", default_value = "speedlab-results.jsonl")]
    pub store: PathBuf,
    /// Server registry file.
    #[arg(long, global = true, env = "SPEEDLAB_REGISTRY", default_value = "speedlab-servers.json")]
    pub registry: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Human,
    Machine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Download,
    Upload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OriginArg {
    Scheduled,
    User,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one test and store the result.
    Run(RunArgs),
    /// Run tests at randomized daily times.
    Schedule(ScheduleArgs),
    /// Summarize stored results.
    Report(ReportArgs),
    /// Manage and probe the server registry.
    Servers {
        #[command(subcommand)]
        action: ServersCommand,
    },
    /// Print model traces as data columns.
    Simulate(SimulateArgs),
    /// Run a measurement responder.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Server address or registry id; skips selection.
    #[arg(long)]
    pub server: Option<String>,
    /// Region label used to narrow the candidate pool.
    #[arg(long, default_value = "")]
    pub region: String,
    #[arg(long, default_value_t = 5)]
    pub candidates: usize,
    /// Latency probes per candidate and before the test.
    #[arg(long, default_value_t = 10)]
    pub probes: u32,
    #[arg(long, value_enum, default_value_t = DirectionArg::Download)]
    pub direction: DirectionArg,
    #[arg(long, default_value_t = 4)]
    pub connections: u16,
    /// Test duration in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    /// Sample interval in milliseconds.
    #[arg(long, default_value_t = 100)]
    pub interval: u64,
    /// Run against the flow model instead, e.g. link=200mbps,rtt=20ms,loss=0
    #[arg(long)]
    pub simulate: Option<String>,
    /// Seconds of cross-traffic observation before the test.
    #[arg(long, default_value_t = 2.0)]
    pub cross_traffic_window: f64,
    /// Print the result without storing it.
    #[arg(long)]
    pub no_store: bool,
}

impl RunArgs {
    pub fn options(&self) -> RunOptions {
        RunOptions {
            server: self.server.clone(),
            region: self.region.clone(),
            candidates: self.candidates,
            probes: self.probes,
            direction: match self.direction {
                DirectionArg::Download => Direction::Download,
                DirectionArg::Upload => Direction::Upload,
            },
            connections: self.connections,
            duration_s: self.duration,
            interval_ms: self.interval,
            simulate: self.simulate.clone(),
            cross_traffic_window_s: self.cross_traffic_window,
            store: !self.no_store,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 4)]
    pub tests_per_day: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub fraction_peak: f64,
    /// Local start of the peak window, HH:MM.
    #[arg(long, default_value = "19:00")]
    pub peak_start: String,
    #[arg(long, default_value = "23:00")]
    pub peak_end: String,
    /// Stop after this many days.
    #[arg(long)]
    pub days: Option<u32>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_enum)]
    pub origin: Option<OriginArg>,
    #[arg(long)]
    pub server_id: Option<String>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    /// RFC 3339 lower bound on result time.
    #[arg(long)]
    pub since: Option<DateTime<Utc>>,
    #[arg(long)]
    pub until: Option<DateTime<Utc>>,
    /// Recompute every stored report from its raw trace first.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Subcommand)]
pub enum ServersCommand {
    List,
    Add {
        #[arg(long)]
        id: String,
        #[arg(long)]
        address: String,
        #[arg(long, default_value = "")]
        location: String,
        #[arg(long, default_value = "")]
        network: String,
        /// Capacity such as 10gbps.
        #[arg(long)]
        capacity_hint: Option<String>,
    },
    Remove {
        #[arg(long)]
        id: String,
    },
    /// Probe servers and record the outcome in their health.
    Probe {
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = 10)]
        count: u32,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Bottleneck link; repeat for a multi-destination run.
    #[arg(long, required = true)]
    pub link: Vec<String>,
    /// Shared access link capacity for multi-destination runs.
    #[arg(long)]
    pub access: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub connections: u16,
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 100)]
    pub interval: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "0.0.0.0:7777")]
    pub listen: SocketAddr,
    #[arg(long)]
    pub max_tests: Option<u32>,
    /// Server capacity such as 10gbps; sizes admission when --max-tests is absent.
    #[arg(long)]
    pub capacity_hint: Option<String>,
}

/// Parses `args` and runs the command, writing to `out`. Returns the exit
/// code.
pub fn run<I, T>(args: I, out: &mut dyn Write, clock: &mut dyn Clock) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, out, clock) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("speedlab: {e}");
            e.exit_code()
        }
    }
}

pub fn run_system<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run(args, out, &mut SystemClock)
}

fn dispatch(cli: Cli, out: &mut dyn Write, clock: &mut dyn Clock) -> Result<()> {
    let ctx = Context {
        store: Store::new(cli.store),
        registry: RegistryFile::new(cli.registry),
        format: match cli.format {
            FormatArg::Human => Format::Human,
            FormatArg::Machine => Format::Machine,
        },
    };
    match cli.command {
        Command::Run(args) => {
            let result = commands::cmd_run(&ctx, &args.options(), Origin::User)?;
            commands::print_result(out, ctx.format, &result)
        }
        Command::Schedule(args) => {
            let schedule = Schedule {
                tests_per_day: args.tests_per_day,
                peak_start: commands::parse_time_of_day(&args.peak_start)?,
                peak_end: commands::parse_time_of_day(&args.peak_end)?,
                fraction_peak: args.fraction_peak,
                seed: args.seed,
                test_duration_s: args.run.duration.ceil().max(1.0) as u32,
            };
            let log = commands::cmd_schedule(&ctx, &schedule, &args.run.options(), args.days, clock, out)?;
            if ctx.format == Format::Human {
                writeln!(
                    out,
                    "{} fired, {} missed, {} failed",
                    log.fired.len(),
                    log.missed.len(),
                    log.failed.len()
                )?;
            }
            Ok(())
        }
        Command::Report(args) => {
            let filters = Filters {
                origin: args.origin.map(|o| match o {
                    OriginArg::Scheduled => Origin::Scheduled,
                    OriginArg::User => Origin::User,
                }),
                server_id: args.server_id,
                direction: args.direction.map(|d| match d {
                    DirectionArg::Download => Direction::Download,
                    DirectionArg::Upload => Direction::Upload,
                }),
                since: args.since,
                until: args.until,
            };
            commands::cmd_report(&ctx, &filters, args.verify, out)
        }
        Command::Servers { action } => {
            let action = match action {
                ServersCommand::List => ServersAction::List,
                ServersCommand::Add {
                    id,
                    address,
                    location,
                    network,
                    capacity_hint,
                } => {
                    let mut s = ServerDescriptor::new(id, address, location);
                    s.network = network;
                    s.capacity_hint_bps = capacity_hint.as_deref().map(linkspec::parse_rate).transpose()?;
                    ServersAction::Add(s)
                }
                ServersCommand::Remove { id } => ServersAction::Remove(id),
                ServersCommand::Probe { id, count } => ServersAction::Probe { id, count },
            };
            commands::cmd_servers(&ctx, action, out)
        }
        Command::Simulate(args) => {
            let opts = SimulateOptions {
                links: args.link,
                access: args.access,
                connections: args.connections,
                duration_s: args.duration,
                interval_ms: args.interval,
            };
            commands::cmd_simulate(&opts, ctx.format, out)
        }
        Command::Serve(args) => {
            if args.max_tests == Some(0) {
                return Err(CliError::Config("--max-tests must be at least 1".into()));
            }
            commands::cmd_serve(args.listen, args.max_tests, args.capacity_hint.as_deref())
        }
    }
}
