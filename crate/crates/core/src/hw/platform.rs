//! SoC description, the assembled platform state and the bus-side access
//! check.

use super::attribution::{attribute_address, IdauMap, SauState};
use super::cpu::{security_transition, CpuState, Transition, TransitionFault};
use super::gates::{MpcState, PpcState};
use super::nvic::NvicState;
use super::systick::SysTickState;
use super::{Address, SecurityAttribution, SecurityState};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_MPC_BLOCK_SIZE: u32 = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Memory,
    Peripheral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryMapEntry {
    pub name: String,
    pub base: Address,
    pub size: u32,
    pub kind: MemoryKind,
}

impl MemoryMapEntry {
    pub fn new(name: &str, base: u32, size: u32, kind: MemoryKind) -> Self {
        MemoryMapEntry { name: name.to_string(), base: Address(base), size, kind }
    }

    pub fn end(&self) -> u64 {
        self.base.0 as u64 + self.size as u64
    }

    pub fn contains(&self, addr: Address) -> bool {
        addr >= self.base && (addr.0 as u64) < self.end()
    }

    /// Whether `[base, base + size)` lies inside this entry.
    pub fn covers(&self, base: Address, size: u32) -> bool {
        base >= self.base && base.0 as u64 + size as u64 <= self.end()
    }
}

fn default_block_size() -> u32 {
    DEFAULT_MPC_BLOCK_SIZE
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformDesc {
    pub memories: Vec<MemoryMapEntry>,
    pub idau: IdauMap,
    #[serde(default = "default_block_size")]
    pub mpc_block_size: u32,
}

impl PlatformDesc {
    /// Reference SoC: secure and non-secure aliases of flash and SRAM
    /// selected by address bit 28, and a bank of 4 KiB peripherals behind
    /// the non-secure alias.
    pub fn reference() -> Self {
        use MemoryKind::*;
        let periph = 0x1000;
        PlatformDesc {
            memories: vec![
                MemoryMapEntry::new("flash_s", 0x0000_0000, 0x0020_0000, Memory),
                MemoryMapEntry::new("flash", 0x1000_0000, 0x0020_0000, Memory),
                MemoryMapEntry::new("sram_s", 0x2000_0000, 0x0002_0000, Memory),
                MemoryMapEntry::new("sram", 0x3000_0000, 0x0008_0000, Memory),
                MemoryMapEntry::new("timer0", 0x5000_0000, periph, Peripheral),
                MemoryMapEntry::new("timer1", 0x5000_1000, periph, Peripheral),
                MemoryMapEntry::new("timer2", 0x5000_2000, periph, Peripheral),
                MemoryMapEntry::new("uart0", 0x5010_1000, periph, Peripheral),
                MemoryMapEntry::new("uart1", 0x5010_2000, periph, Peripheral),
                MemoryMapEntry::new("spi0", 0x5010_3000, periph, Peripheral),
                MemoryMapEntry::new("gpio0", 0x5010_4000, periph, Peripheral),
                MemoryMapEntry::new("pwm0", 0x5010_5000, periph, Peripheral),
                MemoryMapEntry::new("eth0", 0x5020_0000, periph, Peripheral),
            ],
            idau: IdauMap::bit28(),
            mpc_block_size: DEFAULT_MPC_BLOCK_SIZE,
        }
    }

    pub fn find(&self, addr: Address) -> Option<&MemoryMapEntry> {
        self.memories.iter().find(|m| m.contains(addr))
    }

    pub fn entry(&self, name: &str) -> Option<&MemoryMapEntry> {
        self.memories.iter().find(|m| m.name == name)
    }

    pub fn validate(&self) -> Result<(), String> {
        let bs = self.mpc_block_size;
        if bs < 32 || !bs.is_power_of_two() {
            return Err(format!("mpc_block_size {bs} must be a power of two >= 32"));
        }
        for (i, m) in self.memories.iter().enumerate() {
            if m.size == 0 {
                return Err(format!("memory {} has zero size", m.name));
            }
            if m.end() > 1 << 32 {
                return Err(format!("memory {} wraps the address space", m.name));
            }
            if m.kind == MemoryKind::Memory && m.size % bs != 0 {
                return Err(format!("memory {} size {:#x} is not a multiple of the MPC block size", m.name, m.size));
            }
            for other in &self.memories[..i] {
                if other.name == m.name {
                    return Err(format!("memory {} declared twice", m.name));
                }
                if (m.base.0 as u64) < other.end() && (other.base.0 as u64) < m.end() {
                    return Err(format!("memories {} and {} overlap", other.name, m.name));
                }
            }
        }
        self.idau.validate()
    }
}

/// Sparse word-addressed memory contents. Unwritten words read zero.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WordMemory(BTreeMap<u32, u32>);

impl WordMemory {
    pub fn read(&self, addr: u32) -> u32 {
        self.0.get(&(addr & !3)).copied().unwrap_or(0)
    }

    pub fn write(&mut self, addr: u32, value: u32) {
        self.0.insert(addr & !3, value);
    }
}

/// The whole simulated SoC.
#[derive(Debug, Clone)]
pub struct PlatformState {
    pub desc: PlatformDesc,
    pub sau: SauState,
    pub mpcs: Vec<MpcState>,
    pub ppc: PpcState,
    pub nvic: NvicState,
    pub systick: SysTickState,
    pub cpu: CpuState,
    pub memory: WordMemory,
}

impl PlatformState {
    /// Reset state: SAU disabled with everything Secure, every MPC block
    /// and PPC entry Secure.
    pub fn new(desc: PlatformDesc) -> Result<Self, String> {
        desc.validate()?;
        let mut mpcs = Vec::new();
        let mut ppc = PpcState::default();
        for m in &desc.memories {
            match m.kind {
                MemoryKind::Memory => mpcs.push(
                    MpcState::new(m.name.clone(), m.base, m.size, desc.mpc_block_size)
                        .ok_or_else(|| format!("memory {} has invalid MPC geometry", m.name))?,
                ),
                MemoryKind::Peripheral => ppc.set(m.name.clone(), true),
            }
        }
        Ok(PlatformState {
            desc,
            sau: SauState::default(),
            mpcs,
            ppc,
            nvic: NvicState::default(),
            systick: SysTickState::new(0, SecurityState::Secure),
            cpu: CpuState::default(),
            memory: WordMemory::default(),
        })
    }

    pub fn attribute(&self, addr: Address) -> SecurityAttribution {
        attribute_address(&self.sau, &self.desc.idau, addr)
    }

    pub fn mpc_for(&self, addr: Address) -> Option<&MpcState> {
        self.mpcs.iter().find(|m| m.contains(addr))
    }

    pub fn transition(&mut self, kind: Transition, target: Address) -> Result<(), TransitionFault> {
        security_transition(&mut self.cpu, kind, target, &self.sau, &self.desc.idau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
    Exec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub origin: SecurityState,
    pub addr: Address,
    pub kind: AccessKind,
    /// Peripheral select; defaults to the map entry holding `addr`.
    pub peripheral: Option<String>,
}

impl Transaction {
    pub fn new(origin: SecurityState, addr: Address, kind: AccessKind) -> Self {
        Transaction { origin, addr, kind, peripheral: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessOutcome {
    Allowed,
    SecurityFault,
    BusFault,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessResult {
    pub outcome: AccessOutcome,
    pub cause: String,
}

impl AccessResult {
    fn new(outcome: AccessOutcome, cause: &str) -> Self {
        AccessResult { outcome, cause: cause.to_string() }
    }

    pub fn allowed(&self) -> bool {
        self.outcome == AccessOutcome::Allowed
    }
}

/// Checks one bus transaction against attribution and the gates.
///
/// The transaction leaves the core non-secure whenever the address
/// attributes NonSecure (even from secure code, as with the non-secure
/// alias), so the gate must then be non-secure too.
pub fn check_access(platform: &PlatformState, txn: &Transaction) -> AccessResult {
    let Some(entry) = platform.desc.find(txn.addr) else {
        return AccessResult::new(AccessOutcome::BusFault, "unmapped");
    };
    let attr = platform.attribute(txn.addr);
    if txn.origin == SecurityState::NonSecure && attr != SecurityAttribution::NonSecure {
        return AccessResult::new(AccessOutcome::SecurityFault, "attribution");
    }
    let txn_secure = attr != SecurityAttribution::NonSecure;
    match entry.kind {
        MemoryKind::Memory => {
            let gate_secure = platform.mpc_for(txn.addr).and_then(|m| m.is_secure(txn.addr)).unwrap_or(true);
            if gate_secure != txn_secure {
                return AccessResult::new(AccessOutcome::SecurityFault, "mpc");
            }
        }
        MemoryKind::Peripheral => {
            let name = txn.peripheral.as_deref().unwrap_or(&entry.name);
            if platform.ppc.is_secure(name) != txn_secure {
                return AccessResult::new(AccessOutcome::SecurityFault, "ppc");
            }
        }
    }
    AccessResult::new(AccessOutcome::Allowed, "")
}
