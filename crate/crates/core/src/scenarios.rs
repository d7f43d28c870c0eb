//! Bundled system layouts on the reference platform.

use crate::hw::{Address, PlatformDesc};
use crate::kernel::{IrqSpec, MemRegionSpec, RegionKind, SchedulerMode, SystemConfig, WorkloadSpec, WorldConfig};
use crate::sim::CostModel;
use serde_json::{json, Map, Value};

pub const CPU_HZ: u64 = 40_000_000;
const CODE_BASE: u32 = 0x1000_0000;
const CODE_SIZE: u32 = 0x4_0000;
const DATA_BASE: u32 = 0x3000_0000;
const DATA_SIZE: u32 = 0x1_0000;
/// The flash below the gateway fits seven code slots.
pub const MAX_STANDARD_WORLDS: usize = 7;

/// Timer interrupt used by the latency and reference scenarios.
pub const TIMER_IRQ: u16 = 3;
pub const LATENCY_OFFSET: u64 = 1000;
pub const LATENCY_HANDLER: u64 = 100;

pub fn code_region(index: usize) -> MemRegionSpec {
    MemRegionSpec::new(CODE_BASE + index as u32 * CODE_SIZE, CODE_SIZE, RegionKind::Code)
}

pub fn data_region(index: usize) -> MemRegionSpec {
    MemRegionSpec::new(DATA_BASE + index as u32 * DATA_SIZE, DATA_SIZE, RegionKind::Data)
}

pub fn workload(name: &str, params: Value) -> WorkloadSpec {
    let params: Map<String, Value> = match params {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    WorkloadSpec { name: name.into(), params }
}

/// World `index` with its own code and data slot.
pub fn standard_world(index: usize, name: &str, workload: WorkloadSpec) -> WorldConfig {
    assert!(index < MAX_STANDARD_WORLDS, "standard layout holds {MAX_STANDARD_WORLDS} worlds");
    let code = code_region(index);
    WorldConfig {
        name: name.into(),
        priority: 0,
        entry: code.base,
        regions: vec![code, data_region(index)],
        devices: vec![],
        irqs: vec![],
        workload,
    }
}

pub fn system(tick_us: f64, worlds: Vec<WorldConfig>) -> SystemConfig {
    SystemConfig {
        tick_us,
        cpu_hz: CPU_HZ,
        scheduler_mode: SchedulerMode::RoundRobin,
        platform: PlatformDesc::reference(),
        cost_model: CostModel::default(),
        boot_digest: None,
        worlds,
    }
}

fn busy(index: usize) -> WorldConfig {
    standard_world(index, &format!("w{index}"), WorkloadSpec::default())
}

/// `n` worlds; `bench_world` runs the benchmark and the rest spin.
pub fn bench_config(n: usize, tick_us: f64, cycles: u64, warmup: u64, bench_world: usize) -> SystemConfig {
    let worlds = (0..n)
        .map(|i| {
            if i == bench_world {
                standard_world(i, &format!("w{i}"), workload("bench", json!({"cycles": cycles, "warmup": warmup})))
            } else {
                busy(i)
            }
        })
        .collect();
    system(tick_us, worlds)
}

/// World hosting the timer in the latency setup.
pub fn latency_world(n: usize) -> usize {
    usize::from(n > 1)
}

/// `n` worlds; one runs a periodic timer of `period` cycles on
/// [`TIMER_IRQ`], the others spin.
pub fn latency_config(n: usize, tick_us: f64, period: u64) -> SystemConfig {
    let host = latency_world(n);
    let worlds = (0..n)
        .map(|i| {
            if i != host {
                return busy(i);
            }
            let mut w = standard_world(
                i,
                &format!("w{i}"),
                workload(
                    "timer_blinker",
                    json!({"period": period, "irq": TIMER_IRQ, "handler": LATENCY_HANDLER, "offset": LATENCY_OFFSET}),
                ),
            );
            w.devices = vec!["timer0".into()];
            w.irqs = vec![IrqSpec { id: TIMER_IRQ, priority: 0x40 }];
            w
        })
        .collect();
    system(tick_us, worlds)
}

/// Horizon that yields `samples` timer interrupts in the latency setup.
pub fn latency_horizon(period: u64, samples: u64) -> u64 {
    samples * period + period / 2
}

fn peripheral(name: &str) -> String {
    let desc = PlatformDesc::reference();
    let e = desc.entry(name).expect("reference peripheral");
    format!("{}", Address(e.base.0))
}

/// Four-block reference application: an RTOS driving a servo, a console
/// talking to a network stack, and a blinking LED.
pub fn refapp_config() -> SystemConfig {
    let mut servo = standard_world(0, "rtos", workload("rtos_servo", json!({"pwm": peripheral("pwm0")})));
    servo.devices = vec!["pwm0".into()];
    let mut console = standard_world(1, "console", workload("console", json!({"peer": "net", "servo": "rtos"})));
    console.devices = vec!["uart0".into()];
    let mut blinker = standard_world(
        2,
        "blinker",
        workload("timer_blinker", json!({"period": 400_000, "irq": TIMER_IRQ, "led": peripheral("gpio0")})),
    );
    blinker.devices = vec!["timer0".into(), "gpio0".into()];
    blinker.irqs = vec![IrqSpec { id: TIMER_IRQ, priority: 0x40 }];
    let mut net = standard_world(3, "net", workload("echo_net", json!({"peer": "console"})));
    net.devices = vec!["eth0".into()];
    system(1000.0, vec![servo, console, blinker, net])
}

pub const SCENARIOS: &[&str] = &["refapp", "bench", "latency"];

/// Native length of the bundled benchmark.
pub const BENCH_CYCLES: u64 = 5_328_800;
pub const LATENCY_PERIOD: u64 = 400_000;

/// Named scenario and its default horizon in cycles after kick-off.
pub fn scenario(name: &str) -> Option<(SystemConfig, u64)> {
    match name {
        "refapp" => Some((refapp_config(), 40_000_000)),
        "bench" => Some((bench_config(1, 10_000.0, BENCH_CYCLES, 0, 0), 4 * BENCH_CYCLES)),
        "latency" => Some((latency_config(3, 500.0, LATENCY_PERIOD), latency_horizon(LATENCY_PERIOD, 1000))),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_validate() {
        for name in SCENARIOS {
            let (c, _) = scenario(name).unwrap();
            c.validate().unwrap();
            crate::kernel::sp_validate(&c).unwrap();
        }
        for n in 1..=MAX_STANDARD_WORLDS {
            bench_config(n, 500.0, 1000, 0, 0).validate().unwrap();
            crate::kernel::sp_validate(&latency_config(n, 500.0, 400_000)).unwrap();
        }
    }
}
