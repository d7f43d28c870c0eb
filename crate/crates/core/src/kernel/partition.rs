//! System partitioner: boot-time validation of the memory layout and the
//! one-time programming of the security gates.

use super::config::{MemRegionSpec, RegionKind, SystemConfig, WorldConfig};
use crate::hw::{
    Address, MemoryKind, MpcState, PlatformDesc, PlatformState, SauRegion, SecurityAttribution, SAU_REGIONS,
};
use std::fmt;
use thiserror::Error;

/// Size of the shared non-secure-callable gateway.
pub const GATEWAY_SIZE: u32 = 1024;

/// A world region, named for diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionRef {
    pub owner: String,
    pub region: MemRegionSpec,
}

impl fmt::Display for RegionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}, +{:#x})", self.owner, self.region.base, self.region.size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PartitionError {
    #[error("overlap: {0} and {1}")]
    Overlap(RegionRef, RegionRef),
    #[error("unmapped: {0} is not inside a platform memory")]
    Unmapped(RegionRef),
    #[error("{0} lies in secure-only memory")]
    SecureMemory(RegionRef),
    #[error("no non-secure memory to hold the gateway")]
    NoGateway,
    #[error("region capacity; {max} max: world {world} needs {needed} slots")]
    Capacity { world: String, needed: usize, max: usize },
    #[error("granularity: {region} is not aligned to {block_size:#x}-byte blocks of {memory}")]
    Granularity { region: RegionRef, memory: String, block_size: u32 },
}

/// The gateway occupies the last `GATEWAY_SIZE` bytes of the first memory
/// the IDAU attributes non-secure.
pub fn gateway_region(desc: &PlatformDesc) -> Option<MemRegionSpec> {
    desc.memories
        .iter()
        .filter(|m| m.kind == MemoryKind::Memory && m.size >= GATEWAY_SIZE)
        .find(|m| desc.idau.lookup(m.base) == SecurityAttribution::NonSecure)
        .map(|m| MemRegionSpec::new(m.base.0 + (m.size - GATEWAY_SIZE), GATEWAY_SIZE, RegionKind::Code))
}

fn world_regions(config: &SystemConfig) -> Vec<RegionRef> {
    config
        .worlds
        .iter()
        .flat_map(|w| {
            w.regions
                .iter()
                .enumerate()
                .map(move |(i, r)| RegionRef { owner: format!("{}.regions[{i}]", w.name), region: *r })
        })
        .collect()
}

/// All regions pairwise disjoint (gateway included), and each inside one
/// memory that the IDAU leaves non-secure.
pub fn sp_validate(config: &SystemConfig) -> Result<(), PartitionError> {
    let desc = &config.platform;
    let gateway = RegionRef { owner: "gateway".into(), region: gateway_region(desc).ok_or(PartitionError::NoGateway)? };
    let regions = world_regions(config);
    for r in &regions {
        if !desc.memories.iter().any(|m| m.kind == MemoryKind::Memory && m.covers(r.region.base, r.region.size)) {
            return Err(PartitionError::Unmapped(r.clone()));
        }
        let last = Address((r.region.end() - 1) as u32);
        if desc.idau.lookup(r.region.base) != SecurityAttribution::NonSecure
            || desc.idau.lookup(last) != SecurityAttribution::NonSecure
        {
            return Err(PartitionError::SecureMemory(r.clone()));
        }
    }
    let all: Vec<&RegionRef> = std::iter::once(&gateway).chain(regions.iter()).collect();
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            if a.region.overlaps(&b.region) {
                return Err(PartitionError::Overlap((*a).clone(), (*b).clone()));
            }
        }
    }
    Ok(())
}

/// SAU table for one world: its regions and device windows non-secure, the
/// gateway non-secure-callable, unused slots disabled.
pub fn sp_build_sau_table(
    world: &WorldConfig,
    desc: &PlatformDesc,
    gateway: &MemRegionSpec,
) -> Result<[SauRegion; SAU_REGIONS], PartitionError> {
    let needed = world.regions.len() + world.devices.len() + 1;
    if needed > SAU_REGIONS {
        return Err(PartitionError::Capacity { world: world.name.clone(), needed, max: SAU_REGIONS - 1 });
    }
    let mut table = [SauRegion::default(); SAU_REGIONS];
    let windows = world
        .regions
        .iter()
        .map(|r| (r.base, r.size))
        .chain(world.devices.iter().filter_map(|d| desc.entry(d)).map(|e| (e.base, e.size)));
    let mut slot = 0;
    for (base, size) in windows {
        table[slot] = SauRegion::covering(base, size, false);
        slot += 1;
    }
    table[slot] = SauRegion::covering(gateway.base, gateway.size, true);
    Ok(table)
}

/// MPC contents for one memory: blocks holding world regions non-secure,
/// everything else secure.
pub fn sp_build_mpc(config: &SystemConfig, skeleton: &MpcState) -> Result<MpcState, PartitionError> {
    let mut mpc = skeleton.clone();
    mpc.blocks.iter_mut().for_each(|b| *b = true);
    let bs = mpc.block_size as u64;
    for r in world_regions(config) {
        if !mpc.contains(r.region.base) {
            continue;
        }
        let start = r.region.base.0 as u64 - mpc.base.0 as u64;
        let end = r.region.end() - mpc.base.0 as u64;
        if !start.is_multiple_of(bs) || !end.is_multiple_of(bs) || end > mpc.size() {
            return Err(PartitionError::Granularity {
                region: r,
                memory: mpc.memory_id.clone(),
                block_size: mpc.block_size,
            });
        }
        for b in (start / bs)..(end / bs) {
            mpc.blocks[b as usize] = false;
        }
    }
    Ok(mpc)
}

/// One-time gate setup: every MPC, the PPC (assigned devices
/// non-secure), interrupt priorities, and ITNS for the first world only.
pub fn sp_apply_static(config: &SystemConfig, platform: &mut PlatformState) -> Result<(), PartitionError> {
    let mpcs = platform.mpcs.iter().map(|m| sp_build_mpc(config, m)).collect::<Result<Vec<_>, _>>()?;
    platform.mpcs = mpcs;
    for w in &config.worlds {
        for d in &w.devices {
            platform.ppc.set(d.clone(), false);
        }
    }
    platform.nvic.secure_priority_boost = true;
    for (wi, w) in config.worlds.iter().enumerate() {
        for irq in &w.irqs {
            let line = platform.nvic.line_mut(irq.id);
            line.priority = irq.priority;
            line.itns = wi == 0;
            line.enabled = wi == 0;
            line.pending = false;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::config::{IrqSpec, SchedulerMode, WorkloadSpec};
    use crate::sim::CostModel;

    fn world(name: &str, regions: Vec<MemRegionSpec>) -> WorldConfig {
        WorldConfig {
            name: name.into(),
            priority: 0,
            entry: regions[0].base,
            regions,
            devices: vec![],
            irqs: vec![],
            workload: WorkloadSpec::default(),
        }
    }

    fn config(worlds: Vec<WorldConfig>) -> SystemConfig {
        SystemConfig {
            tick_us: 500.0,
            cpu_hz: 40_000_000,
            scheduler_mode: SchedulerMode::RoundRobin,
            platform: PlatformDesc::reference(),
            cost_model: CostModel::default(),
            boot_digest: None,
            worlds,
        }
    }

    fn data(base: u32, size: u32) -> MemRegionSpec {
        MemRegionSpec::new(base, size, RegionKind::Data)
    }

    #[test]
    fn disjoint_regions_pass() {
        let c =
            config(vec![world("a", vec![data(0x3000_0000, 0x1_0000)]), world("b", vec![data(0x3001_0000, 0x1_0000)])]);
        sp_validate(&c).unwrap();
    }

    #[test]
    fn overlap_names_both() {
        let c =
            config(vec![world("a", vec![data(0x3000_0000, 0x1_0000)]), world("b", vec![data(0x3000_8000, 0x1_0000)])]);
        let e = sp_validate(&c).unwrap_err();
        let text = e.to_string();
        assert!(text.contains("a.regions[0]") && text.contains("b.regions[0]"), "{text}");
    }

    #[test]
    fn region_outside_memory() {
        let c = config(vec![world("a", vec![data(0x3100_0000, 0x4000)])]);
        assert!(sp_validate(&c).unwrap_err().to_string().starts_with("unmapped"));
        // straddling the end of sram
        let c = config(vec![world("a", vec![data(0x3007_c000, 0x8000)])]);
        assert!(matches!(sp_validate(&c), Err(PartitionError::Unmapped(_))));
    }

    #[test]
    fn secure_alias_rejected() {
        let c = config(vec![world("a", vec![data(0x2000_0000, 0x4000)])]);
        assert!(matches!(sp_validate(&c), Err(PartitionError::SecureMemory(_))));
    }

    #[test]
    fn gateway_is_reserved() {
        let gw = gateway_region(&PlatformDesc::reference()).unwrap();
        assert_eq!(gw.base, Address(0x101f_fc00));
        let c = config(vec![world("a", vec![MemRegionSpec::new(0x101f_c000, 0x4000, RegionKind::Code)])]);
        assert!(matches!(sp_validate(&c), Err(PartitionError::Overlap(..))));
    }

    #[test]
    fn sau_table_slots() {
        let desc = PlatformDesc::reference();
        let gw = gateway_region(&desc).unwrap();
        let w = world("a", vec![MemRegionSpec::new(0x1000_0000, 0x4000, RegionKind::Code), data(0x3000_0000, 0x4000)]);
        let t = sp_build_sau_table(&w, &desc, &gw).unwrap();
        assert_eq!(t.iter().filter(|r| r.enabled).count(), 3);
        assert!(t[2].nsc && t[2].enabled);

        let seven: Vec<_> = (0..7).map(|i| data(0x3000_0000 + i * 0x4000, 0x4000)).collect();
        let t = sp_build_sau_table(&world("a", seven), &desc, &gw).unwrap();
        assert!(t.iter().all(|r| r.enabled));

        let eight: Vec<_> = (0..8).map(|i| data(0x3000_0000 + i * 0x4000, 0x4000)).collect();
        assert!(matches!(
            sp_build_sau_table(&world("a", eight), &desc, &gw),
            Err(PartitionError::Capacity { needed: 9, .. })
        ));
    }

    #[test]
    fn device_windows_use_slots() {
        let desc = PlatformDesc::reference();
        let gw = gateway_region(&desc).unwrap();
        let mut w = world("a", vec![data(0x3000_0000, 0x4000)]);
        w.devices = vec!["uart0".into()];
        let t = sp_build_sau_table(&w, &desc, &gw).unwrap();
        assert_eq!(t[1].base, Address(0x5010_1000));
        assert!(!t[1].nsc);
    }

    // per-block oracle: a block is non-secure iff some region byte falls in it
    fn oracle(config: &SystemConfig, mpc: &MpcState) -> Vec<bool> {
        (0..mpc.blocks.len())
            .map(|b| {
                let lo = mpc.base.0 as u64 + b as u64 * mpc.block_size as u64;
                let hi = lo + mpc.block_size as u64;
                !config.worlds.iter().flat_map(|w| &w.regions).any(|r| (r.base.0 as u64) < hi && lo < r.end())
            })
            .collect()
    }

    #[test]
    fn mpc_blocks_follow_regions() {
        let skeleton = MpcState::new("m", Address(0), 0x2_0000, 0x4000).unwrap();
        let mut c = config(vec![world("a", vec![data(0x4000, 0x8000)])]);
        let mpc = sp_build_mpc(&c, &skeleton).unwrap();
        assert_eq!(mpc.non_secure_blocks().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(mpc.blocks, oracle(&c, &skeleton));

        c.worlds[0].regions = vec![data(0x4000, 0x2000)];
        assert!(matches!(sp_build_mpc(&c, &skeleton), Err(PartitionError::Granularity { .. })));

        c.worlds.clear();
        assert!(sp_build_mpc(&c, &skeleton).unwrap().blocks.iter().all(|b| *b));
    }

    #[test]
    fn static_gates() {
        let mut a = world("a", vec![data(0x3000_0000, 0x4000)]);
        a.irqs = vec![IrqSpec { id: 3, priority: 0x20 }];
        let mut b = world("b", vec![data(0x3000_4000, 0x4000)]);
        b.devices = vec!["uart0".into()];
        b.irqs = vec![IrqSpec { id: 4, priority: 0x40 }];
        let c = config(vec![a, b]);
        let mut p = PlatformState::new(c.platform.clone()).unwrap();
        sp_apply_static(&c, &mut p).unwrap();
        assert!(!p.ppc.is_secure("uart0"));
        assert!(p.ppc.is_secure("eth0"));
        assert!(p.nvic.line(3).itns && !p.nvic.line(4).itns);
        assert!(p.nvic.secure_priority_boost);
        let sram = p.mpcs.iter().find(|m| m.memory_id == "sram").unwrap();
        assert_eq!(sram.non_secure_blocks().collect::<Vec<_>>(), vec![0, 1]);
    }
}
