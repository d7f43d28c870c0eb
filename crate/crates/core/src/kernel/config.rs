//! System configuration file: schema and validation.

use crate::hw::{Address, MemoryKind, PlatformDesc, IRQ_LINES, SAU_GRANULE, SAU_REGIONS, SYSTICK_MAX_RELOAD};
use crate::sim::CostModel;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Private SAU slots available to a world; one slot holds the gateway.
pub const MAX_WORLD_REGIONS: usize = SAU_REGIONS - 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    #[default]
    RoundRobin,
    PriorityPreemptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Code,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemRegionSpec {
    pub base: Address,
    pub size: u32,
    pub kind: RegionKind,
}

impl MemRegionSpec {
    pub fn new(base: u32, size: u32, kind: RegionKind) -> Self {
        MemRegionSpec { base: Address(base), size, kind }
    }

    pub fn end(&self) -> u64 {
        self.base.0 as u64 + self.size as u64
    }

    pub fn contains(&self, addr: Address) -> bool {
        addr >= self.base && (addr.0 as u64) < self.end()
    }

    pub fn overlaps(&self, other: &MemRegionSpec) -> bool {
        (self.base.0 as u64) < other.end() && (other.base.0 as u64) < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrqSpec {
    pub id: u16,
    pub priority: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec { name: "busyloop".into(), params: Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub name: String,
    /// Lower number = more urgent. Only consulted in preemptive mode.
    #[serde(default)]
    pub priority: u8,
    pub entry: Address,
    pub regions: Vec<MemRegionSpec>,
    #[serde(default)]
    pub devices: Vec<String>,
    #[serde(default)]
    pub irqs: Vec<IrqSpec>,
    #[serde(default)]
    pub workload: WorkloadSpec,
}

impl WorldConfig {
    pub fn data_regions(&self) -> impl Iterator<Item = &MemRegionSpec> {
        self.regions.iter().filter(|r| r.kind == RegionKind::Data)
    }

    /// Initial main stack pointer: top of the first data region.
    pub fn stack_top(&self) -> u32 {
        self.data_regions().next().map(|r| (r.end() - 8) as u32 & !7).unwrap_or(0)
    }

    pub fn owns_irq(&self, irq: u16) -> bool {
        self.irqs.iter().any(|i| i.id == irq)
    }
}

fn reference_platform() -> PlatformDesc {
    PlatformDesc::reference()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub tick_us: f64,
    pub cpu_hz: u64,
    #[serde(default)]
    pub scheduler_mode: SchedulerMode,
    #[serde(default = "reference_platform")]
    pub platform: PlatformDesc,
    #[serde(default)]
    pub cost_model: CostModel,
    /// Hex SHA-512 of the boot image. Absent means the image is signed
    /// with its own digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boot_digest: Option<String>,
    pub worlds: Vec<WorldConfig>,
}

impl SystemConfig {
    /// Quantum length in CPU cycles.
    pub fn tick_reload(&self) -> u64 {
        (self.tick_us * self.cpu_hz as f64 / 1e6).round() as u64
    }

    pub fn world_index(&self, name: &str) -> Option<usize> {
        self.worlds.iter().position(|w| w.name == name)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tick_us.is_finite() && self.tick_us > 0.0) {
            return Err(ConfigError::new("tick_us", "must be > 0"));
        }
        if self.cpu_hz == 0 {
            return Err(ConfigError::new("cpu_hz", "must be > 0"));
        }
        let exact = self.tick_us * self.cpu_hz as f64 / 1e6;
        let reload = self.tick_reload();
        if (exact - reload as f64).abs() > 1e-6 {
            return Err(ConfigError::new("tick_us", format!("{} us is not a whole number of cycles", self.tick_us)));
        }
        if reload < 2 || reload - 1 > SYSTICK_MAX_RELOAD as u64 {
            return Err(ConfigError::new("tick_us", format!("{reload} cycles does not fit the 24-bit tick timer")));
        }
        self.platform.validate().map_err(|m| ConfigError::new("platform", m))?;
        if self.worlds.is_empty() {
            return Err(ConfigError::new("worlds", "at least one world is required"));
        }
        if let Some(d) = &self.boot_digest {
            match hex::decode(d) {
                Ok(bytes) if bytes.len() == 64 => {}
                _ => return Err(ConfigError::new("boot_digest", "expected 128 hex digits (SHA-512)")),
            }
        }

        let mut names = BTreeSet::new();
        let mut irq_owner: BTreeMap<u16, usize> = BTreeMap::new();
        let mut dev_owner: BTreeMap<&str, usize> = BTreeMap::new();
        for (wi, w) in self.worlds.iter().enumerate() {
            let at = |field: &str| format!("worlds[{wi}].{field}");
            if w.name.is_empty() || w.name.contains(char::is_whitespace) {
                return Err(ConfigError::new(at("name"), "must be a non-empty word"));
            }
            if !names.insert(w.name.as_str()) {
                return Err(ConfigError::new(at("name"), format!("world {} declared twice", w.name)));
            }
            if w.regions.len() > MAX_WORLD_REGIONS {
                return Err(ConfigError::new(at("regions"), format!("region capacity; {MAX_WORLD_REGIONS} max")));
            }
            if w.regions.len() + w.devices.len() > MAX_WORLD_REGIONS {
                return Err(ConfigError::new(
                    at("devices"),
                    format!(
                        "region capacity; {MAX_WORLD_REGIONS} max ({} regions + {} device windows)",
                        w.regions.len(),
                        w.devices.len()
                    ),
                ));
            }
            for (ri, r) in w.regions.iter().enumerate() {
                let path = at(&format!("regions[{ri}]"));
                if r.size == 0 {
                    return Err(ConfigError::new(path, "size must be > 0"));
                }
                if r.end() > 1 << 32 {
                    return Err(ConfigError::new(path, "region wraps the address space"));
                }
                if r.base.0 % SAU_GRANULE != 0 || r.size % SAU_GRANULE != 0 {
                    return Err(ConfigError::new(path, format!("base and size must be multiples of {SAU_GRANULE}")));
                }
            }
            if w.data_regions().next().is_none() {
                return Err(ConfigError::new(at("regions"), "a data region is required for the stack"));
            }
            if !w.regions.iter().any(|r| r.kind == RegionKind::Code && r.contains(w.entry)) {
                return Err(ConfigError::new(at("entry"), format!("{} is not inside a code region", w.entry)));
            }
            for (di, d) in w.devices.iter().enumerate() {
                let path = at(&format!("devices[{di}]"));
                match self.platform.entry(d) {
                    Some(e) if e.kind == MemoryKind::Peripheral => {}
                    _ => return Err(ConfigError::new(path, format!("unknown peripheral {d}"))),
                }
                if dev_owner.insert(d, wi).is_some() {
                    return Err(ConfigError::new(path, format!("device {d} assigned twice")));
                }
            }
            for (ii, irq) in w.irqs.iter().enumerate() {
                let path = at(&format!("irqs[{ii}]"));
                if irq.id as usize >= IRQ_LINES {
                    return Err(ConfigError::new(path, format!("irq {} out of range (0..{IRQ_LINES})", irq.id)));
                }
                if irq_owner.insert(irq.id, wi).is_some() {
                    return Err(ConfigError::new(path, format!("irq {} assigned twice", irq.id)));
                }
            }
        }
        Ok(())
    }
}

/// Parses and fully validates a configuration file. Unknown keys are
/// rejected.
pub fn parse_config(text: &[u8]) -> Result<SystemConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_slice(text);
    let config: SystemConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(if path == "." { "$".to_string() } else { path }, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(tick: &str) -> String {
        format!(
            r#"{{"tick_us": {tick}, "cpu_hz": 40000000, "worlds": [
                {{"name": "w1", "entry": "0x10000000",
                  "regions": [{{"base": "0x10000000", "size": 16384, "kind": "code"}},
                              {{"base": "0x30000000", "size": 16384, "kind": "data"}}]}}]}}"#
        )
    }

    fn with_world(extra: &str) -> String {
        format!(
            r#"{{"tick_us": 500, "cpu_hz": 40000000, "worlds": [
                {{"name": "w1", "entry": "0x10000000", "irqs": [{{"id": 7, "priority": 64}}],
                  "regions": [{{"base": "0x10000000", "size": 16384, "kind": "code"}},
                              {{"base": "0x30000000", "size": 16384, "kind": "data"}}]}},
                {extra}]}}"#
        )
    }

    #[test]
    fn minimal_file() {
        let c = parse_config(minimal("10000").as_bytes()).unwrap();
        assert_eq!(c.tick_us, 10000.0);
        assert_eq!(c.tick_reload(), 400_000);
        assert_eq!(c.scheduler_mode, SchedulerMode::RoundRobin);
        assert_eq!(c.worlds[0].workload.name, "busyloop");
        assert_eq!(c.worlds[0].stack_top(), 0x3000_3ff8);
    }

    #[test]
    fn half_millisecond_tick() {
        assert_eq!(parse_config(minimal("500").as_bytes()).unwrap().tick_reload(), 20_000);
        assert!(parse_config(minimal("0").as_bytes()).is_err());
        assert!(parse_config(minimal("0.01").as_bytes()).is_err());
    }

    #[test]
    fn duplicate_irq() {
        let text = with_world(
            r#"{"name": "w2", "entry": "0x10004000", "irqs": [{"id": 7, "priority": 0}],
                "regions": [{"base": "0x10004000", "size": 16384, "kind": "code"},
                            {"base": "0x30004000", "size": 16384, "kind": "data"}]}"#,
        );
        let e = parse_config(text.as_bytes()).unwrap_err();
        assert_eq!(e.message, "irq 7 assigned twice");
        assert_eq!(e.path, "worlds[1].irqs[0]");
    }

    #[test]
    fn region_capacity() {
        let regions: Vec<String> = (0..8)
            .map(|i| {
                let kind = if i == 0 { "code" } else { "data" };
                format!(r#"{{"base": "{:#x}", "size": 16384, "kind": "{kind}"}}"#, 0x1000_0000 + i * 0x4000)
            })
            .collect();
        let text = format!(
            r#"{{"tick_us": 500, "cpu_hz": 40000000, "worlds": [{{"name": "w1", "entry": "0x10000000", "regions": [{}]}}]}}"#,
            regions.join(",")
        );
        let e = parse_config(text.as_bytes()).unwrap_err();
        assert_eq!(e.message, "region capacity; 7 max");
    }

    #[test]
    fn unknown_key_reports_path() {
        let text = minimal("500").replace(r#""kind": "code""#, r#""kind": "code", "colour": 1"#);
        let e = parse_config(text.as_bytes()).unwrap_err();
        assert!(e.path.starts_with("worlds[0].regions[0]"), "{e}");
        assert!(e.message.contains("colour"));
    }

    #[test]
    fn entry_must_be_code() {
        let text = minimal("500").replace(r#""entry": "0x10000000""#, r#""entry": "0x30000000""#);
        assert_eq!(parse_config(text.as_bytes()).unwrap_err().path, "worlds[0].entry");
    }

    #[test]
    fn unknown_device() {
        let text = minimal("500").replace(r#""name": "w1","#, r#""name": "w1", "devices": ["uart9"],"#);
        assert!(parse_config(text.as_bytes()).unwrap_err().message.contains("uart9"));
    }

    #[test]
    fn roundtrip() {
        let c = parse_config(minimal("500").as_bytes()).unwrap();
        let text = serde_json::to_vec(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }
}
