//! Event-level model of the TrustZone-M security hardware.
//!
//! Nothing here decodes instructions. The kernel programs these blocks and
//! the simulator drives them with semantic events (memory transactions,
//! interrupt lines, timer cycles).

mod attribution;
mod cpu;
mod gates;
mod nvic;
mod platform;
mod systick;

pub use attribution::{
    attribute_address, combine_attribution, IdauMap, IdauRegion, SauRegion, SauState, SAU_GRANULE, SAU_REGIONS,
};
pub use cpu::{
    security_transition, ActiveException, CpuState, ExceptionFrame, Mode, ScbSubset, SpecialRegs, Transition,
    TransitionFault, EXC_RETURN_NS_HANDLER, EXC_RETURN_NS_THREAD_MSP, EXC_RETURN_NS_THREAD_PSP, FNC_RETURN,
};
pub use gates::{MpcState, PpcState};
pub use nvic::{
    arbitrate, arbitrate_and_enter_exception, AliasField, AliasOp, ExceptionEntry, ExceptionSource, IrqLine, NvicState,
    PendingException, PriorityKey, IRQ_LINES, SECURE_FAULT_EXCEPTION, SYSTICK_EXCEPTION,
};
pub use platform::{
    check_access, AccessKind, AccessOutcome, AccessResult, MemoryKind, MemoryMapEntry, PlatformDesc, PlatformState,
    Transaction, WordMemory, DEFAULT_MPC_BLOCK_SIZE,
};
pub use systick::{SysTickState, SYSTICK_MAX_RELOAD};

use serde::{Deserialize, Serialize};
use std::fmt;

/// A 32-bit byte address on the system bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub u32);

impl Address {
    pub const fn new(value: u32) -> Self {
        Address(value)
    }

    pub const fn value(self) -> u32 {
        self.0
    }

    pub fn checked_add(self, offset: u32) -> Option<Address> {
        self.0.checked_add(offset).map(Address)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

impl From<u32> for Address {
    fn from(value: u32) -> Self {
        Address(value)
    }
}

impl Serialize for Address {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format!("{:#010x}", self.0))
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_hex_u32(&text)
            .map(Address)
            .ok_or_else(|| serde::de::Error::custom(format!("expected \"0x\"-prefixed hex address, got {text:?}")))
    }
}

/// Parses a `0x`-prefixed hexadecimal 32-bit value.
pub fn parse_hex_u32(text: &str) -> Option<u32> {
    let digits = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X"))?;
    let digits: String = digits.chars().filter(|c| *c != '_').collect();
    if digits.is_empty() {
        return None;
    }
    u32::from_str_radix(&digits, 16).ok()
}

/// Security attribution of an address, ordered so that `max` gives the
/// combined (more secure) result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityAttribution {
    NonSecure,
    SecureNsc,
    Secure,
}

/// CPU or transaction security state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityState {
    Secure,
    NonSecure,
}

impl SecurityState {
    pub(crate) fn bank(self) -> usize {
        match self {
            SecurityState::Secure => 0,
            SecurityState::NonSecure => 1,
        }
    }
}
