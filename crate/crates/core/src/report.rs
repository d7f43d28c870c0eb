//! Machine-readable run reports.

use crate::hw::{AccessOutcome, Address};
use crate::kernel::SystemConfig;
use crate::sim::{
    latency_histogram, latency_samples, measurement, CostModel, CycleAccount, Ratio, RunStatus, Simulator,
};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use std::collections::BTreeSet;
use std::fmt;

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fixed-point decimal with six fractional digits, written as a bare JSON
/// number (`1.000538`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Decimal6 {
    pub micros: u64,
}

impl From<Ratio> for Decimal6 {
    fn from(r: Ratio) -> Self {
        let micros = (r.num as u128 * 2_000_000 + r.den as u128) / (2 * r.den as u128);
        Decimal6 { micros: micros as u64 }
    }
}

impl fmt::Display for Decimal6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.micros / 1_000_000, self.micros % 1_000_000)
    }
}

impl std::str::FromStr for Decimal6 {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected a decimal with 6 fractional digits, got {s:?}");
        let (int, frac) = s.split_once('.').ok_or_else(bad)?;
        if frac.len() != 6 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u64 = int.parse().map_err(|_| bad())?;
        let frac: u64 = frac.parse().map_err(|_| bad())?;
        Ok(Decimal6 { micros: int * 1_000_000 + frac })
    }
}

impl Serialize for Decimal6 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(self.to_string()).map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Decimal6 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw: Box<RawValue> = Deserialize::deserialize(deserializer)?;
        raw.get().parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadMetrics {
    pub world: String,
    pub workload: String,
    pub native_cycles: u64,
    pub measured_cycles: u64,
    pub overhead_ratio: Decimal6,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyBin {
    pub cycles: u64,
    pub count: u64,
    pub frequency: Decimal6,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrqMetrics {
    pub irq: u16,
    pub world: Option<String>,
    pub min: u64,
    pub max: u64,
    pub samples: Vec<u64>,
    pub histogram: Vec<LatencyBin>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultMetrics {
    pub cycle: u64,
    pub world: String,
    pub outcome: AccessOutcome,
    pub cause: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub addr: Option<Address>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub outcome: RunStatus,
    pub worlds: usize,
    pub tick_cycles: u64,
    pub kickoff_cycle: Option<u64>,
    pub end_cycle: u64,
    pub switch_count: u64,
    /// Kernel cycles, boot included.
    pub privileged_cycles: u64,
    pub cycles: CycleAccount,
    pub workloads: Vec<WorkloadMetrics>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub latency: Vec<IrqMetrics>,
    pub faults: Vec<FaultMetrics>,
}

impl MetricsReport {
    pub fn from_run(sim: &Simulator) -> Self {
        let config = sim.config();
        let trace = sim.trace();
        let name = |w: usize| config.worlds[w].name.clone();
        let workloads = (0..config.worlds.len())
            .filter_map(|w| {
                let m = measurement(trace, w).ok()?;
                Some(WorkloadMetrics {
                    world: name(w),
                    workload: config.worlds[w].workload.name.clone(),
                    native_cycles: m.native_cycles,
                    measured_cycles: m.measured_cycles,
                    overhead_ratio: m.ratio().into(),
                })
            })
            .collect();
        let irqs: BTreeSet<u16> = latency_samples(trace).iter().map(|s| s.irq).collect();
        let latency = irqs
            .into_iter()
            .filter_map(|irq| {
                let h = latency_histogram(trace, irq).ok()?;
                Some(IrqMetrics {
                    irq,
                    world: sim.kernel().owner_of_irq(irq).map(name),
                    min: h.min(),
                    max: h.max(),
                    samples: latency_samples(trace).iter().filter(|s| s.irq == irq).map(|s| s.latency).collect(),
                    histogram: h
                        .bins
                        .iter()
                        .map(|(&cycles, &count)| LatencyBin { cycles, count, frequency: h.frequency(cycles).into() })
                        .collect(),
                })
            })
            .collect();
        MetricsReport {
            outcome: sim.status().clone(),
            worlds: config.worlds.len(),
            tick_cycles: config.tick_reload(),
            kickoff_cycle: sim.kickoff_cycle(),
            end_cycle: sim.now(),
            switch_count: trace.switch_count() as u64,
            privileged_cycles: sim.account().kernel,
            cycles: sim.account(),
            workloads,
            latency,
            faults: sim
                .faults()
                .iter()
                .map(|f| FaultMetrics {
                    cycle: f.cycle,
                    world: name(f.world),
                    outcome: f.outcome,
                    cause: f.cause.clone(),
                    addr: f.addr,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub tool: String,
    pub version: String,
    pub cost_model: CostModel,
    pub config: SystemConfig,
    pub metrics: MetricsReport,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl ReportFile {
    pub fn new(sim: &Simulator) -> Self {
        let metrics = MetricsReport::from_run(sim);
        let cost = sim.cost();
        let mut notes = Vec::new();
        if metrics.worlds == 1 && !metrics.workloads.is_empty() {
            let floor = Ratio::new(cost.world_switch_cycles, metrics.tick_cycles);
            notes.push(format!(
                "single-world switch overhead {}/{} = {}%",
                cost.world_switch_cycles,
                metrics.tick_cycles,
                Ratio::new(floor.num * 100, floor.den).to_fixed(4)
            ));
        }
        ReportFile {
            tool: TOOL.into(),
            version: VERSION.into(),
            cost_model: cost,
            config: sim.config().clone(),
            metrics,
            notes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    tick_us: f64,
    section: &'a str,
    world: Option<&'a str>,
    irq: Option<u16>,
    metric: String,
    value: String,
    frequency: Option<String>,
}

fn csv_rows(report: &ReportFile) -> Vec<CsvRow<'_>> {
    let m = &report.metrics;
    let tick_us = report.config.tick_us;
    let run = |metric: &str, value: String| CsvRow {
        tick_us,
        section: "run",
        world: None,
        irq: None,
        metric: metric.into(),
        value,
        frequency: None,
    };
    let mut rows = vec![
        run("worlds", m.worlds.to_string()),
        run("tick_cycles", m.tick_cycles.to_string()),
        run("end_cycle", m.end_cycle.to_string()),
        run("switch_count", m.switch_count.to_string()),
        run("privileged_cycles", m.privileged_cycles.to_string()),
        run("faults", m.faults.len().to_string()),
    ];
    for w in &m.workloads {
        for (metric, value) in [
            ("native_cycles", w.native_cycles.to_string()),
            ("measured_cycles", w.measured_cycles.to_string()),
            ("overhead_ratio", w.overhead_ratio.to_string()),
        ] {
            rows.push(CsvRow {
                tick_us,
                section: "workload",
                world: Some(&w.world),
                irq: None,
                metric: metric.into(),
                value,
                frequency: None,
            });
        }
    }
    for l in &m.latency {
        for b in &l.histogram {
            rows.push(CsvRow {
                tick_us,
                section: "latency_bin",
                world: l.world.as_deref(),
                irq: Some(l.irq),
                metric: b.cycles.to_string(),
                value: b.count.to_string(),
                frequency: Some(b.frequency.to_string()),
            });
        }
    }
    rows
}

/// Serialises one or more reports. Several JSON reports become an array;
/// CSV rows are concatenated under one header.
pub fn emit_reports(reports: &[ReportFile], format: Format) -> Vec<u8> {
    match format {
        Format::Json => {
            let mut out =
                if let [one] = reports { serde_json::to_vec_pretty(one) } else { serde_json::to_vec_pretty(reports) }
                    .expect("reports serialise");
            out.push(b'\n');
            out
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in reports {
                for row in csv_rows(r) {
                    w.serialize(row).expect("csv rows serialise");
                }
            }
            w.into_inner().expect("in-memory writer")
        }
    }
}

pub fn emit_report(report: &ReportFile, format: Format) -> Vec<u8> {
    emit_reports(std::slice::from_ref(report), format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{bench_config, latency_config, latency_horizon};

    fn report(config: SystemConfig, horizon: u64) -> ReportFile {
        let mut sim = Simulator::from_config(config, horizon).unwrap();
        sim.run().unwrap();
        ReportFile::new(&sim)
    }

    #[test]
    fn decimal_rounding_and_parsing() {
        assert_eq!(Decimal6::from(Ratio::new(10_005_375, 10_000_000)).to_string(), "1.000538");
        assert_eq!("2.500000".parse::<Decimal6>().unwrap().micros, 2_500_000);
        assert!("2.5".parse::<Decimal6>().is_err());
        assert!("x.000000".parse::<Decimal6>().is_err());
    }

    #[test]
    fn floor_ratio_is_written_with_six_digits() {
        let r = report(bench_config(1, 10_000.0, 40_000_000, 0, 0), u64::MAX / 2);
        let text = String::from_utf8(emit_report(&r, Format::Json)).unwrap();
        assert!(text.contains("\"overhead_ratio\": 1.000538"), "{text}");
    }

    #[test]
    fn json_round_trips() {
        let r = report(latency_config(3, 500.0, 400_000), latency_horizon(400_000, 20));
        let bytes = emit_report(&r, Format::Json);
        let back: ReportFile = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back, r);
        assert_eq!(emit_report(&back, Format::Json), bytes);
    }

    #[test]
    fn no_samples_means_no_histogram() {
        let r = report(bench_config(2, 500.0, 100_000, 0, 0), 1_000_000);
        assert!(r.metrics.latency.is_empty());
        let json = String::from_utf8(emit_report(&r, Format::Json)).unwrap();
        assert!(!json.contains("\"latency\""));
        let csv = String::from_utf8(emit_report(&r, Format::Csv)).unwrap();
        assert!(!csv.contains("latency_bin"));
        assert!(csv.contains("workload,w0,,overhead_ratio,"));
    }

    #[test]
    fn identical_runs_give_identical_bytes() {
        let a = report(latency_config(2, 500.0, 400_000), latency_horizon(400_000, 10));
        let b = report(latency_config(2, 500.0, 400_000), latency_horizon(400_000, 10));
        assert_eq!(emit_report(&a, Format::Json), emit_report(&b, Format::Json));
        assert_eq!(emit_report(&a, Format::Csv), emit_report(&b, Format::Csv));
    }

    #[test]
    fn csv_has_a_row_per_bin() {
        let r = report(latency_config(3, 500.0, 400_000), latency_horizon(400_000, 30));
        let bins: usize = r.metrics.latency.iter().map(|l| l.histogram.len()).sum();
        let csv = String::from_utf8(emit_report(&r, Format::Csv)).unwrap();
        assert_eq!(csv.lines().filter(|l| l.contains(",latency_bin,")).count(), bins);
        assert!(csv.starts_with("tick_us,section,world,irq,metric,value,frequency\n"));
    }
}
