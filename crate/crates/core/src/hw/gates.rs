//! Bus-side security gates: block-based MPC and select-based PPC.

use super::Address;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Block-based memory protection controller in front of one memory.
/// `blocks[i]` is true when block `i` is Secure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpcState {
    pub memory_id: String,
    pub base: Address,
    pub block_size: u32,
    pub blocks: Vec<bool>,
}

impl MpcState {
    /// All-secure MPC covering `size` bytes. Returns `None` when the
    /// geometry is invalid (block size not a power of two, below 32 bytes,
    /// or not dividing the memory size).
    pub fn new(memory_id: impl Into<String>, base: Address, size: u32, block_size: u32) -> Option<MpcState> {
        if block_size < 32 || !block_size.is_power_of_two() || size == 0 || !size.is_multiple_of(block_size) {
            return None;
        }
        Some(MpcState {
            memory_id: memory_id.into(),
            base,
            block_size,
            blocks: vec![true; (size / block_size) as usize],
        })
    }

    pub fn size(&self) -> u64 {
        self.block_size as u64 * self.blocks.len() as u64
    }

    pub fn contains(&self, addr: Address) -> bool {
        addr >= self.base && ((addr.0 - self.base.0) as u64) < self.size()
    }

    pub fn block_index(&self, addr: Address) -> Option<usize> {
        self.contains(addr).then(|| ((addr.0 - self.base.0) / self.block_size) as usize)
    }

    /// Security bit of the block holding `addr`.
    pub fn is_secure(&self, addr: Address) -> Option<bool> {
        self.block_index(addr).map(|i| self.blocks[i])
    }

    pub fn non_secure_blocks(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().enumerate().filter(|(_, s)| !**s).map(|(i, _)| i)
    }
}

/// Select-based peripheral protection controller: one security bit per
/// peripheral, keyed by name. Peripherals without an entry are Secure.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PpcState {
    pub peripherals: BTreeMap<String, bool>,
}

impl PpcState {
    pub fn is_secure(&self, peripheral: &str) -> bool {
        self.peripherals.get(peripheral).copied().unwrap_or(true)
    }

    pub fn set(&mut self, peripheral: impl Into<String>, secure: bool) {
        self.peripherals.insert(peripheral.into(), secure);
    }
}
