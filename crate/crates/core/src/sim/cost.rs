use serde::{Deserialize, Serialize};

/// Fixed cycle charges for kernel work. Kernel code runs from
/// tightly-coupled memory, so every charge is a constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub world_switch_cycles: u64,
    pub irq_entry_cycles: u64,
    pub boot_base_cycles: u64,
    pub boot_per_world_cycles: u64,
    pub wcc_gateway_cycles: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            world_switch_cycles: 215,
            irq_entry_cycles: 24,
            boot_base_cycles: 7749,
            boot_per_world_cycles: 1236,
            wcc_gateway_cycles: 0,
        }
    }
}

impl CostModel {
    /// Secure boot plus partitioning for `worlds` worlds.
    pub fn boot_cycles(&self, worlds: usize) -> u64 {
        self.boot_base_cycles + self.boot_per_world_cycles * worlds.saturating_sub(1) as u64
    }
}
