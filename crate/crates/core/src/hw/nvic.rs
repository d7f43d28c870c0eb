//! Interrupt controller with ITNS targeting, banked aliases and the
//! secure-first arbitration rule.

use super::cpu::CpuState;
use super::platform::WordMemory;
use super::SecurityState;
use serde::{Deserialize, Serialize};

pub const IRQ_LINES: usize = 64;
/// Exception number of SysTick.
pub const SYSTICK_EXCEPTION: u16 = 15;
pub const SECURE_FAULT_EXCEPTION: u16 = 7;
const IRQ_BASE: u16 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IrqLine {
    /// true = targets the non-secure state.
    pub itns: bool,
    pub enabled: bool,
    pub pending: bool,
    pub priority: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AliasField {
    Itns,
    Iser,
    Ispr,
    Ipr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AliasOp {
    Read,
    Write(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExceptionSource {
    SecureFault,
    SysTick,
    Irq(u16),
}

impl ExceptionSource {
    pub fn number(self) -> u16 {
        match self {
            ExceptionSource::SecureFault => SECURE_FAULT_EXCEPTION,
            ExceptionSource::SysTick => SYSTICK_EXCEPTION,
            ExceptionSource::Irq(n) => IRQ_BASE + n,
        }
    }
}

/// Arbitration key; the smallest key wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PriorityKey {
    /// 0 for secure targets under the boost rule, 1 for non-secure ones.
    pub group: u8,
    pub priority: u8,
    pub exception: u16,
}

impl PriorityKey {
    pub fn new(group: u8, priority: u8, exception: u16) -> Self {
        PriorityKey { group, priority, exception }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingException {
    pub source: ExceptionSource,
    pub target: SecurityState,
    pub key: PriorityKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExceptionEntry {
    pub source: ExceptionSource,
    pub target: SecurityState,
    pub key: PriorityKey,
    pub exc_return: u32,
    /// r0-r12 were erased because a non-secure handler preempted secure code.
    pub erased: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NvicState {
    pub lines: Vec<IrqLine>,
    pub secure_priority_boost: bool,
    /// SysTick is the secure instance and always targets the secure state.
    pub systick_pending: bool,
    pub systick_priority: u8,
}

impl Default for NvicState {
    fn default() -> Self {
        NvicState {
            lines: vec![IrqLine::default(); IRQ_LINES],
            secure_priority_boost: false,
            systick_pending: false,
            systick_priority: 0,
        }
    }
}

impl NvicState {
    pub fn line(&self, irq: u16) -> &IrqLine {
        &self.lines[irq as usize]
    }

    pub fn line_mut(&mut self, irq: u16) -> &mut IrqLine {
        &mut self.lines[irq as usize]
    }

    /// Raises an interrupt line (sets its pending bit).
    pub fn raise(&mut self, irq: u16) {
        self.line_mut(irq).pending = true;
    }

    pub fn target(&self, irq: u16) -> SecurityState {
        if self.line(irq).itns {
            SecurityState::NonSecure
        } else {
            SecurityState::Secure
        }
    }

    /// Register access through the secure or non-secure alias. The
    /// non-secure alias of a secure-targeted line is read-as-zero and
    /// write-ignored, and ITNS is only visible to the secure view.
    pub fn alias_access(&mut self, view: SecurityState, field: AliasField, irq: u16, op: AliasOp) -> u32 {
        if view == SecurityState::NonSecure && (field == AliasField::Itns || !self.line(irq).itns) {
            return 0;
        }
        let line = self.line_mut(irq);
        match op {
            AliasOp::Read => match field {
                AliasField::Itns => line.itns as u32,
                AliasField::Iser => line.enabled as u32,
                AliasField::Ispr => line.pending as u32,
                AliasField::Ipr => line.priority as u32,
            },
            AliasOp::Write(value) => {
                match field {
                    AliasField::Itns => line.itns = value != 0,
                    AliasField::Iser => line.enabled = value != 0,
                    AliasField::Ispr => line.pending = value != 0,
                    AliasField::Ipr => line.priority = value as u8,
                }
                0
            }
        }
    }

    pub fn key(&self, target: SecurityState, priority: u8, source: ExceptionSource) -> PriorityKey {
        let group = u8::from(self.secure_priority_boost && target == SecurityState::NonSecure);
        PriorityKey::new(group, priority, source.number())
    }

    /// Every pending and enabled exception, unmasked or not.
    pub fn pending(&self) -> impl Iterator<Item = PendingException> + '_ {
        let systick = self.systick_pending.then(|| PendingException {
            source: ExceptionSource::SysTick,
            target: SecurityState::Secure,
            key: self.key(SecurityState::Secure, self.systick_priority, ExceptionSource::SysTick),
        });
        let irqs = self.lines.iter().enumerate().filter(|(_, l)| l.pending && l.enabled).map(|(i, l)| {
            let source = ExceptionSource::Irq(i as u16);
            let target = if l.itns { SecurityState::NonSecure } else { SecurityState::Secure };
            PendingException { source, target, key: self.key(target, l.priority, source) }
        });
        systick.into_iter().chain(irqs)
    }

    fn clear_pending(&mut self, source: ExceptionSource) {
        match source {
            ExceptionSource::SecureFault => {}
            ExceptionSource::SysTick => self.systick_pending = false,
            ExceptionSource::Irq(n) => self.line_mut(n).pending = false,
        }
    }
}

fn masked(cpu: &CpuState, p: &PendingException) -> bool {
    let bank = cpu.bank(p.target);
    if bank.primask & 1 != 0 || bank.faultmask & 1 != 0 {
        return true;
    }
    bank.basepri != 0 && u32::from(p.key.priority) >= bank.basepri
}

/// The exception that would be taken now, if any.
pub fn arbitrate(cpu: &CpuState, nvic: &NvicState) -> Option<PendingException> {
    let current = cpu.execution_priority();
    nvic.pending().filter(|p| !masked(cpu, p)).filter(|p| current.is_none_or(|c| p.key < c)).min_by_key(|p| p.key)
}

/// Arbitrates and, when something is takeable, performs hardware entry.
pub fn arbitrate_and_enter_exception(
    cpu: &mut CpuState,
    nvic: &mut NvicState,
    mem: &mut WordMemory,
) -> Option<ExceptionEntry> {
    let p = arbitrate(cpu, nvic)?;
    nvic.clear_pending(p.source);
    let (exc_return, erased) = cpu.enter_exception(p.target, p.source, p.key, mem);
    Some(ExceptionEntry { source: p.source, target: p.target, key: p.key, exc_return, erased })
}
