//! Measurements derived from a trace.

use super::trace::{Trace, TraceKind};
use crate::kernel::WorldId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("world {0} has no MarkStart/MarkEnd pair")]
    MissingMarks(WorldId),
    #[error("no latency samples for irq {0}")]
    NoSamples(u16),
}

/// Exact non-negative rational. Equality is by value, so `2/4 == 1/2`.
#[derive(Debug, Clone, Copy)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        Ratio { num, den }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Decimal with `digits` fractional digits, rounding half up.
    pub fn to_fixed(self, digits: u32) -> String {
        let scale = 10u128.pow(digits);
        let scaled = (self.num as u128 * scale * 2 + self.den as u128) / (2 * self.den as u128);
        let int = scaled / scale;
        let frac = scaled % scale;
        if digits == 0 {
            int.to_string()
        } else {
            format!("{int}.{frac:0width$}", width = digits as usize)
        }
    }

    /// `self - 1` for ratios >= 1.
    pub fn minus_one(self) -> Ratio {
        Ratio::new(self.num.saturating_sub(self.den), self.den)
    }
}

impl PartialEq for Ratio {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for Ratio {}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_fixed(6))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    pub native_cycles: u64,
    pub measured_cycles: u64,
    pub start: u64,
    pub end: u64,
}

impl Measurement {
    pub fn ratio(&self) -> Ratio {
        Ratio::new(self.measured_cycles, self.native_cycles.max(1))
    }
}

pub fn measurement(trace: &Trace, world: WorldId) -> Result<Measurement, MetricsError> {
    let mine = || trace.iter().filter(|r| r.world == Some(world));
    let start = mine().find(|r| r.kind == TraceKind::MarkStart).ok_or(MetricsError::MissingMarks(world))?.cycle;
    let (end, native) = mine()
        .find_map(|r| match r.kind {
            TraceKind::MarkEnd { native } => Some((r.cycle, native)),
            _ => None,
        })
        .ok_or(MetricsError::MissingMarks(world))?;
    Ok(Measurement { native_cycles: native, measured_cycles: end - start, start, end })
}

/// (MarkEnd - MarkStart) / native cycles.
pub fn overhead_ratio(trace: &Trace, world: WorldId) -> Result<Ratio, MetricsError> {
    measurement(trace, world).map(|m| m.ratio())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub irq: u16,
    pub world: Option<WorldId>,
    pub raised_cycle: u64,
    pub entered_cycle: u64,
    pub latency: u64,
}

pub fn latency_samples(trace: &Trace) -> Vec<LatencySample> {
    trace
        .iter()
        .filter_map(|r| match r.kind {
            TraceKind::IrqEntered { irq, raised } => Some(LatencySample {
                irq,
                world: r.world,
                raised_cycle: raised,
                entered_cycle: r.cycle,
                latency: r.cycle - raised,
            }),
            _ => None,
        })
        .collect()
}

/// Samples binned by exact cycle value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub irq: u16,
    pub total: u64,
    pub bins: BTreeMap<u64, u64>,
}

impl Histogram {
    pub fn frequency(&self, latency: u64) -> Ratio {
        Ratio::new(self.bins.get(&latency).copied().unwrap_or(0), self.total)
    }

    pub fn max(&self) -> u64 {
        self.bins.keys().next_back().copied().unwrap_or(0)
    }

    pub fn min(&self) -> u64 {
        self.bins.keys().next().copied().unwrap_or(0)
    }
}

pub fn latency_histogram(trace: &Trace, irq: u16) -> Result<Histogram, MetricsError> {
    let mut bins = BTreeMap::new();
    let mut total = 0;
    for s in latency_samples(trace).into_iter().filter(|s| s.irq == irq) {
        *bins.entry(s.latency).or_insert(0) += 1;
        total += 1;
    }
    if total == 0 {
        return Err(MetricsError::NoSamples(irq));
    }
    Ok(Histogram { irq, total, bins })
}

/// Longest wait of a world's interrupt under round-robin scheduling:
/// every other world's quantum plus one scheduling pass. Units are the
/// caller's (cycles, nanoseconds, ...).
pub fn worst_case_latency(n_worlds: u64, tick: u64, sched_time: u64) -> u64 {
    assert!(n_worlds >= 1, "at least one world");
    (n_worlds - 1) * tick + sched_time
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point_rounding() {
        assert_eq!(Ratio::new(10_005_375, 10_000_000).to_fixed(6), "1.000538");
        assert_eq!(Ratio::new(1, 3).to_fixed(6), "0.333333");
        assert_eq!(Ratio::new(2, 3).to_fixed(6), "0.666667");
        assert_eq!(Ratio::new(5, 1).to_fixed(6), "5.000000");
        assert_eq!(Ratio::new(1, 2_000_000).to_fixed(6), "0.000001");
        assert_eq!(Ratio::new(1, 2_000_001).to_fixed(6), "0.000000");
    }

    #[test]
    fn ordering_is_exact() {
        assert!(Ratio::new(1, 3) < Ratio::new(334, 1000));
        assert_eq!(Ratio::new(2, 4).cmp(&Ratio::new(1, 2)), std::cmp::Ordering::Equal);
        assert_eq!(Ratio::new(21_500, 40_000_000), Ratio::new(215, 400_000));
    }

    #[test]
    fn worst_case_formula() {
        assert_eq!(worst_case_latency(1, 20_000, 215), 215);
        // nanoseconds: 500 us tick, 215 cycles at 40 MHz
        assert_eq!(worst_case_latency(3, 500_000, 5_375), 1_005_375);
        assert_eq!(worst_case_latency(2, 10_000_000, 5_375), 10_005_375);
    }

    #[test]
    fn histogram_and_marks() {
        let mut t = Trace::default();
        t.push(10, Some(0), TraceKind::MarkStart);
        t.push(100, Some(0), TraceKind::IrqEntered { irq: 3, raised: 76 });
        t.push(200, Some(0), TraceKind::IrqEntered { irq: 3, raised: 176 });
        t.push(300, Some(0), TraceKind::IrqEntered { irq: 3, raised: 200 });
        t.push(410, Some(0), TraceKind::MarkEnd { native: 200 });
        assert_eq!(overhead_ratio(&t, 0).unwrap(), Ratio::new(400, 200));
        assert_eq!(overhead_ratio(&t, 1), Err(MetricsError::MissingMarks(1)));
        let h = latency_histogram(&t, 3).unwrap();
        assert_eq!(h.total, 3);
        assert_eq!(h.frequency(24), Ratio::new(2, 3));
        assert_eq!(h.max(), 100);
        assert_eq!(latency_histogram(&t, 4), Err(MetricsError::NoSamples(4)));
    }
}
