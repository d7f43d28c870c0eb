//! Command-line front end.

use crate::kernel::{parse_config, SchedulerMode, SystemConfig};
use crate::report::{emit_reports, Format, ReportFile};
use crate::scenarios::{scenario, SCENARIOS};
use crate::sim::{RunStatus, Simulator};
use clap::{ArgGroup, Parser};
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

pub const EXIT_OK: u8 = 0;
/// Unexpected failure (I/O, internal error).
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_LOCKED: u8 = 3;
pub const EXIT_FAULT: u8 = 4;

/// Horizon for `--config` runs without `--horizon`: one second at 40 MHz.
pub const DEFAULT_HORIZON: u64 = 40_000_000;

#[derive(Debug, Parser)]
#[command(name = "worldsim", version, about = "Multi-world TrustZone-M kernel simulator")]
#[command(group(ArgGroup::new("input").required(true).args(["config", "scenario"])))]
pub struct CliArgs {
    /// System configuration file (JSON).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Bundled scenario: refapp, bench or latency.
    #[arg(long, value_name = "NAME")]
    pub scenario: Option<String>,
    /// Cycles to simulate after kick-off.
    #[arg(long, value_name = "N")]
    pub horizon: Option<u64>,
    /// Report destination; standard output when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Comma-separated tick lengths, e.g. "0.5ms,1ms,10ms".
    #[arg(long, value_name = "LIST", value_delimiter = ',', value_parser = parse_tick)]
    pub sweep: Option<Vec<f64>>,
    /// Scheduler override: round_robin or priority_preemptive.
    #[arg(long, value_name = "MODE", value_parser = parse_mode)]
    pub mode: Option<SchedulerMode>,
}

fn parse_mode(s: &str) -> Result<SchedulerMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown scheduler mode {s:?} (round_robin, priority_preemptive)"))
}

/// Parses a duration with a unit (`us`, `ms`, `s`) into microseconds.
pub fn parse_tick(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let split = s.find(|c: char| c.is_ascii_alphabetic()).ok_or_else(|| format!("{s:?} needs a unit (us, ms, s)"))?;
    let (num, unit) = s.split_at(split);
    let value: f64 = num.parse().map_err(|_| format!("bad number in {s:?}"))?;
    let scale = match unit {
        "us" => 1.0,
        "ms" => 1e3,
        "s" => 1e6,
        _ => return Err(format!("unknown unit {unit:?} in {s:?}")),
    };
    if !(value.is_finite() && value > 0.0) {
        return Err(format!("tick {s:?} must be positive"));
    }
    Ok(value * scale)
}

fn load(args: &CliArgs) -> Result<(SystemConfig, u64), String> {
    let (mut config, horizon) = match (&args.config, &args.scenario) {
        (Some(path), _) => {
            let text = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let config = parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            (config, DEFAULT_HORIZON)
        }
        (None, Some(name)) => {
            scenario(name).ok_or_else(|| format!("unknown scenario {name:?} ({})", SCENARIOS.join(", ")))?
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    if let Some(mode) = args.mode {
        config.scheduler_mode = mode;
    }
    Ok((config, args.horizon.unwrap_or(horizon)))
}

/// One simulation; the report and its exit code.
fn simulate(config: SystemConfig, horizon: u64) -> Result<(ReportFile, u8), String> {
    let mut sim = Simulator::from_config(config, horizon).map_err(|e| e.to_string())?;
    sim.run().map_err(|e| format!("internal error: {e}"))?;
    let code = match sim.status() {
        RunStatus::Locked => EXIT_LOCKED,
        RunStatus::Aborted { .. } => EXIT_CONFIG,
        _ if !sim.faults().is_empty() => EXIT_FAULT,
        _ => EXIT_OK,
    };
    Ok((ReportFile::new(&sim), code))
}

fn diagnose(report: &ReportFile, err: &mut impl Write) {
    let tick = report.config.tick_us;
    match &report.metrics.outcome {
        RunStatus::Locked => {
            let _ = writeln!(err, "tick {tick} us: boot image digest mismatch; kernel locked");
        }
        RunStatus::Aborted { reason } => {
            let _ = writeln!(err, "tick {tick} us: partitioning failed: {reason}");
        }
        _ => {}
    }
    for f in &report.metrics.faults {
        let at = f.addr.map(|a| format!(" at {a}")).unwrap_or_default();
        let _ = writeln!(err, "cycle {}: world {} faulted ({}){at}", f.cycle, f.world, f.cause);
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run(args: CliArgs, stdout: &mut impl Write, stderr: &mut impl Write) -> u8 {
    let (config, horizon) = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let ticks = args.sweep.clone().unwrap_or_else(|| vec![config.tick_us]);
    let runs: Vec<Result<(ReportFile, u8), String>> = std::thread::scope(|s| {
        let handles: Vec<_> = ticks
            .iter()
            .map(|&tick_us| {
                let mut c = config.clone();
                c.tick_us = tick_us;
                s.spawn(move || simulate(c, horizon))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("simulation thread panicked".into()))).collect()
    });

    let mut reports = Vec::new();
    let mut code = EXIT_OK;
    for r in runs {
        match r {
            Ok((report, c)) => {
                diagnose(&report, stderr);
                code = code.max(c);
                reports.push(report);
            }
            Err(e) => {
                let _ = writeln!(stderr, "config error: {e}");
                return if e.starts_with("internal error") { EXIT_INTERNAL } else { EXIT_CONFIG };
            }
        }
    }
    let bytes = emit_reports(&reports, args.format);
    let written = match &args.out {
        Some(path) => std::fs::write(path, &bytes).map_err(|e| format!("{}: {e}", path.display())),
        None => stdout.write_all(&bytes).map_err(|e| e.to_string()),
    };
    if let Err(e) = written {
        let _ = writeln!(stderr, "cannot write report: {e}");
        return EXIT_INTERNAL;
    }
    code
}

pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match CliArgs::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    run(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_units() {
        assert_eq!(parse_tick("0.5ms").unwrap(), 500.0);
        assert_eq!(parse_tick("250us").unwrap(), 250.0);
        assert_eq!(parse_tick("1s").unwrap(), 1e6);
        assert!(parse_tick("10").is_err());
        assert!(parse_tick("-1ms").is_err());
        assert!(parse_tick("3h").is_err());
        let a = CliArgs::try_parse_from(["worldsim", "--scenario", "bench", "--sweep", "0.5ms,1ms,2ms,10ms"]).unwrap();
        assert_eq!(a.sweep, Some(vec![500.0, 1000.0, 2000.0, 10_000.0]));
    }

    #[test]
    fn modes() {
        assert_eq!(parse_mode("priority_preemptive").unwrap(), SchedulerMode::PriorityPreemptive);
        assert!(parse_mode("fifo").is_err());
    }

    #[test]
    fn exactly_one_input() {
        assert!(CliArgs::try_parse_from(["worldsim"]).is_err());
        assert!(CliArgs::try_parse_from(["worldsim", "--config", "a", "--scenario", "bench"]).is_err());
        assert!(CliArgs::try_parse_from(["worldsim", "--scenario", "bench"]).is_ok());
    }
}
