//! Command implementations. Each writes its output to the given writer.

use std::io::Write;
use std::net::SocketAddr;

use chrono::{NaiveTime, Utc};
use log::{info, warn};
use speedlab_core::coordinator::{
    select_server, simulate_multi_destination, HealthEvent, MultiDestConfig, Outcome, Prober, Schedule,
    ServerDescriptor,
};
use speedlab_core::engine::{
    Direction, Engine, EngineConfig, Flag, RawTestRecord, TargetRef, TestSpec,
};
use speedlab_core::flowmodel::{simulate_connections, FlowParams, PathLoad};
use speedlab_core::metrics::{estimate_throughput, interval_rates, EstimationMethod};
use speedlab_core::responder::{Responder, ResponderConfig};

use crate::error::{CliError, Result};
use crate::linkspec::{parse_link, parse_rate};
use crate::record::{MeasurementResult, Methodology, Origin, SimulationSetup};
use crate::registry::RegistryFile;
use crate::report::{aggregate, Filters};
use crate::scheduler::{run_schedule, Clock, ScheduleLog};
use crate::store::Store;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Human,
    Machine,
}

pub struct Context {
    pub store: Store,
    pub registry: RegistryFile,
    pub format: Format,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub server: Option<String>,
    pub region: String,
    pub candidates: usize,
    pub probes: u32,
    pub direction: Direction,
    pub connections: u16,
    pub duration_s: f64,
    pub interval_ms: u64,
    pub simulate: Option<String>,
    pub cross_traffic_window_s: f64,
    pub store: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            server: None,
            region: String::new(),
            candidates: 5,
            probes: 10,
            direction: Direction::Download,
            connections: 4,
            duration_s: 10.0,
            interval_ms: 100,
            simulate: None,
            cross_traffic_window_s: 2.0,
            store: true,
        }
    }
}

impl RunOptions {
    fn duration_ms(&self) -> Result<u64> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(CliError::Config(format!("bad duration {} s", self.duration_s)));
        }
        Ok((self.duration_s * 1000.0).round() as u64)
    }

    fn spec(&self, target: TargetRef) -> Result<TestSpec> {
        let mut spec = TestSpec::new(self.direction, target);
        spec.duration_ms = self.duration_ms()?;
        spec.n_connections = self.connections;
        spec.sample_interval_ms = self.interval_ms;
        spec.validate()?;
        Ok(spec)
    }

    fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            probe_count: self.probes.max(speedlab_core::engine::MIN_PROBES),
            cross_traffic_window_ms: (self.cross_traffic_window_s * 1000.0).round().max(0.0) as u64,
            ..EngineConfig::default()
        }
    }
}

fn target_of(s: &ServerDescriptor) -> TargetRef {
    TargetRef {
        server_id: s.id.clone(),
        address: s.address.clone(),
        capacity_hint_bps: s.capacity_hint_bps,
    }
}

fn simulated_result(opts: &RunOptions, link_text: &str, origin: Origin) -> Result<MeasurementResult> {
    let link = parse_link(link_text)?;
    let server = ServerDescriptor::new("simulated", "simulated", "model");
    let spec = opts.spec(target_of(&server))?;
    let flow = FlowParams::default();
    let sim = simulate_connections(&link, spec.n_connections, spec.duration_ms as f64 / 1000.0, spec.sample_interval_ms as f64, flow)?;
    let raw = RawTestRecord::simulated(spec, Utc::now(), sim.per_connection, sim.aggregate);
    let methodology = Methodology {
        simulation: Some(SimulationSetup { link, flow }),
        ..Methodology::standard()
    };
    Ok(MeasurementResult::build(Utc::now(), origin, raw, server, methodology)?)
}

/// Outcome recorded against a server for a finished test.
fn health_outcome(raw: &RawTestRecord) -> Outcome {
    if raw.flags.contains(&Flag::DegenerateTrace) {
        Outcome::Underperformed
    } else {
        Outcome::Ok
    }
}

fn record_health(ctx: &Context, id: &str, outcome: Outcome) -> Result<()> {
    let mut registry = ctx.registry.load()?;
    if registry.get(id).is_none() {
        return Ok(());
    }
    let removed = registry.update_health(id, outcome)?;
    if removed {
        warn!("server {id} is now removed from candidate pools");
    }
    ctx.registry.save(&registry)?;
    ctx.registry.log_outcome(&HealthEvent {
        at: Utc::now(),
        server_id: id.to_string(),
        outcome,
    })
}

fn measured_result(ctx: &Context, opts: &RunOptions, origin: Origin) -> Result<MeasurementResult> {
    let config = opts.engine_config();
    let mut engine = Engine::new(config.clone());
    let registry = ctx.registry.load()?;
    let server = match &opts.server {
        Some(s) => registry
            .servers
            .iter()
            .find(|d| &d.id == s || &d.address == s)
            .cloned()
            .unwrap_or_else(|| ServerDescriptor::new(s.clone(), s.clone(), "unspecified")),
        None => {
            let pool = registry.candidate_pool(&opts.region, opts.candidates)?;
            let selection = select_server(&pool, opts.probes.max(3), &mut engine)?;
            info!("selected {} at {:.2} ms median RTT", selection.server.id, selection.median_rtt_ms);
            for (id, r) in &selection.probes {
                if r.is_err() {
                    record_health(ctx, id, Outcome::Unreachable)?;
                }
            }
            selection.server
        }
    };
    let spec = opts.spec(target_of(&server))?;
    let raw = match engine.run_test(&spec) {
        Ok(raw) => raw,
        Err(e) => {
            record_health(ctx, &server.id, Outcome::Unreachable)?;
            return Err(e.into());
        }
    };
    record_health(ctx, &server.id, health_outcome(&raw))?;
    let methodology = Methodology {
        engine: Some(config),
        ..Methodology::standard()
    };
    Ok(MeasurementResult::build(Utc::now(), origin, raw, server, methodology)?)
}

fn fmt_bps(v: f64) -> String {
    format!("{:.2} Mbps", v / 1e6)
}

pub fn print_result(out: &mut dyn Write, format: Format, r: &MeasurementResult) -> Result<()> {
    if format == Format::Machine {
        writeln!(out, "{}", r.to_line()?)?;
        return Ok(());
    }
    writeln!(out, "server      {} ({})", r.server.id, r.server.address)?;
    writeln!(
        out,
        "test        {}, {} connections, {:.1} s",
        r.spec.direction,
        r.spec.n_connections,
        r.spec.duration_ms as f64 / 1000.0
    )?;
    if let Some(bps) = r.headline_bps() {
        writeln!(out, "headline    {} ({})", fmt_bps(bps), r.report.method)?;
    }
    for e in &r.estimates {
        writeln!(out, "  {:<12} {}", e.method.label(), fmt_bps(e.bps))?;
    }
    if let (Some(lat), Some(jit), Some(loss)) = (r.report.latency_ms, r.report.jitter_ms, r.report.loss_rate) {
        writeln!(out, "latency     {lat:.3} ms median, jitter {jit:.3} ms, loss {:.1}%", loss * 100.0)?;
    }
    if !r.flags.is_empty() {
        let flags: Vec<&str> = r.flags.iter().map(|f| f.as_str()).collect();
        writeln!(out, "flags       {}", flags.join(", "))?;
    }
    Ok(())
}

/// Full pipeline for one test: select, measure, estimate, persist.
pub fn cmd_run(ctx: &Context, opts: &RunOptions, origin: Origin) -> Result<MeasurementResult> {
    let result = match &opts.simulate {
        Some(link) => simulated_result(opts, link, origin)?,
        None => measured_result(ctx, opts, origin)?,
    };
    if opts.store {
        ctx.store.append(&result)?;
    }
    Ok(result)
}

pub fn cmd_schedule(
    ctx: &Context,
    schedule: &Schedule,
    opts: &RunOptions,
    days: Option<u32>,
    clock: &mut dyn Clock,
    out: &mut dyn Write,
) -> Result<ScheduleLog> {
    let mut fire = |_: &speedlab_core::coordinator::ScheduledTest| -> Result<()> {
        let r = cmd_run(ctx, opts, Origin::Scheduled)?;
        if ctx.format == Format::Machine {
            print_result(out, ctx.format, &r)?;
        } else if let Some(bps) = r.headline_bps() {
            writeln!(out, "{} {} {}", r.timestamp.to_rfc3339(), r.server.id, fmt_bps(bps))?;
        }
        Ok(())
    };
    run_schedule(schedule, days, clock, &mut fire)
}

pub fn cmd_report(ctx: &Context, filters: &Filters, verify: bool, out: &mut dyn Write) -> Result<()> {
    let contents = ctx.store.read()?;
    if !contents.skipped.is_empty() {
        warn!("{} unreadable line(s) skipped", contents.skipped.len());
    }
    if verify {
        for r in &contents.records {
            if let Err(e) = r.verify() {
                return Err(CliError::Config(format!("record {} at {}: {e}", r.spec.nonce, r.timestamp)));
            }
        }
    }
    let report = aggregate(&contents.records, filters);
    match ctx.format {
        Format::Machine => writeln!(out, "{}", serde_json::to_string(&report).expect("report serializes"))?,
        Format::Human => write!(out, "{}", report.render_human())?,
    }
    Ok(())
}

pub enum ServersAction {
    List,
    Add(ServerDescriptor),
    Remove(String),
    Probe { id: Option<String>, count: u32 },
}

pub fn cmd_servers(ctx: &Context, action: ServersAction, out: &mut dyn Write) -> Result<()> {
    let mut registry = ctx.registry.load()?;
    match action {
        ServersAction::List => match ctx.format {
            Format::Machine => writeln!(out, "{}", serde_json::to_string(&registry.servers).expect("serializes"))?,
            Format::Human => {
                for s in &registry.servers {
                    let state = if s.health.removed { "removed" } else { "active" };
                    writeln!(
                        out,
                        "{:<16} {:<24} {:<20} {:<8} health {:.2}",
                        s.id,
                        s.address,
                        s.declared_location,
                        state,
                        s.health.score()
                    )?;
                }
            }
        },
        ServersAction::Add(server) => {
            let id = server.id.clone();
            registry.add(server)?;
            ctx.registry.save(&registry)?;
            writeln!(out, "added {id}")?;
        }
        ServersAction::Remove(id) => {
            registry.remove(&id)?;
            ctx.registry.save(&registry)?;
            writeln!(out, "removed {id}")?;
        }
        ServersAction::Probe { id, count } => {
            let targets: Vec<ServerDescriptor> = match &id {
                Some(id) => vec![registry
                    .get(id)
                    .cloned()
                    .ok_or_else(|| speedlab_core::coordinator::CoordinatorError::UnknownServer(id.clone()))?],
                None => registry.servers.clone(),
            };
            let mut engine = Engine::with_counters(EngineConfig::default(), None);
            for s in targets {
                let outcome = match engine.probe(&s, count) {
                    Ok(stats) => {
                        let median = stats.median_ms();
                        match median {
                            Some(m) => writeln!(out, "{:<16} {m:.3} ms median, {}/{} replies", s.id, stats.received, stats.sent)?,
                            None => writeln!(out, "{:<16} no replies", s.id)?,
                        }
                        if median.is_some() { Outcome::Ok } else { Outcome::Unreachable }
                    }
                    Err(e) => {
                        writeln!(out, "{:<16} unreachable: {e}", s.id)?;
                        Outcome::Unreachable
                    }
                };
                registry.update_health(&s.id, outcome)?;
                ctx.registry.log_outcome(&HealthEvent {
                    at: Utc::now(),
                    server_id: s.id.clone(),
                    outcome,
                })?;
            }
            ctx.registry.save(&registry)?;
        }
    }
    Ok(())
}

pub struct SimulateOptions {
    pub links: Vec<String>,
    pub access: Option<String>,
    pub connections: u16,
    pub duration_s: f64,
    pub interval_ms: u64,
}

/// Prints model traces as whitespace-separated columns. Several links run
/// as a multi-destination test behind the optional access link.
pub fn cmd_simulate(opts: &SimulateOptions, format: Format, out: &mut dyn Write) -> Result<()> {
    let links = opts.links.iter().map(|l| parse_link(l)).collect::<Result<Vec<_>>>()?;
    let duration_s = opts.duration_s;
    let interval = opts.interval_ms as f64;
    if links.is_empty() {
        return Err(CliError::Config("at least one --link is required".into()));
    }
    if links.len() == 1 && opts.access.is_none() {
        let sim = simulate_connections(&links[0], opts.connections, duration_s, interval, FlowParams::default())?;
        let rates = interval_rates(&sim.aggregate)?;
        let header: Vec<String> = (0..sim.per_connection.len()).map(|i| format!("conn{i}_bytes")).collect();
        writeln!(out, "# t_ms aggregate_bytes rate_bps {}", header.join(" "))?;
        for (k, s) in sim.aggregate.samples.iter().enumerate() {
            let rate = if k == 0 { 0.0 } else { rates[k - 1].bps };
            let per: Vec<String> = sim.per_connection.iter().map(|t| format!("{}", t.samples[k].bytes())).collect();
            writeln!(out, "{} {} {} {}", s.t_ms(), s.bytes(), rate, per.join(" "))?;
        }
        for m in EstimationMethod::all_defaults() {
            let v = estimate_throughput(&sim.aggregate, &m)?;
            match format {
                Format::Human => writeln!(out, "# {:<12} {}", m.label(), fmt_bps(v))?,
                Format::Machine => writeln!(out, "# {} {}", m.label(), v)?,
            }
        }
        return Ok(());
    }
    let access = opts.access.as_deref().map(parse_rate).transpose()?;
    let specs: Vec<TestSpec> = (0..links.len())
        .map(|i| {
            let mut s = TestSpec::new(Direction::Download, TargetRef::new(format!("dest{i}"), "simulated"));
            s.duration_ms = (duration_s * 1000.0).round() as u64;
            s.n_connections = opts.connections;
            s.sample_interval_ms = opts.interval_ms;
            s
        })
        .collect();
    let paths: Vec<PathLoad> = links
        .iter()
        .map(|l| PathLoad { link: *l, n_connections: opts.connections })
        .collect();
    let result = simulate_multi_destination(&specs, &paths, access, FlowParams::default(), &MultiDestConfig::default())?;
    if format == Format::Machine {
        writeln!(out, "{}", serde_json::to_string(&result).expect("serializes"))?;
        return Ok(());
    }
    writeln!(out, "# t_ms aggregate_bytes")?;
    for s in &result.aggregate_trace.samples {
        writeln!(out, "{} {}", s.t_ms(), s.bytes())?;
    }
    for d in &result.per_destination {
        if let Some(bps) = d.report.as_ref().and_then(|r| r.download_bps) {
            writeln!(out, "# {:<12} {}", d.server_id, fmt_bps(bps))?;
        }
    }
    writeln!(out, "# aggregate    {}", fmt_bps(result.aggregate_bps))?;
    Ok(())
}

pub fn cmd_serve(listen: SocketAddr, max_tests: Option<u32>, capacity_hint: Option<&str>) -> Result<()> {
    let hint = capacity_hint.map(parse_rate).transpose()?;
    let config = match (max_tests, hint) {
        (Some(n), hint) => ResponderConfig {
            capacity_hint_bps: hint,
            ..ResponderConfig::new(listen, n)
        },
        (None, Some(h)) => ResponderConfig::from_capacity_hint(listen, h),
        (None, None) => ResponderConfig::new(listen, 4),
    };
    let responder = Responder::bind(config).map_err(|e| CliError::Config(format!("cannot listen on {listen}: {e}")))?;
    responder.run()?;
    Ok(())
}

/// Parses `HH:MM` local times.
pub fn parse_time_of_day(s: &str) -> Result<NaiveTime> {
    NaiveTime::parse_from_str(s, "%H:%M").map_err(|e| CliError::Config(format!("bad time {s:?}: {e}")))
}

