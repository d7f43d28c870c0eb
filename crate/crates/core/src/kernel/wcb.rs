//! World control blocks: everything the kernel keeps for a suspended world.

use crate::hw::{
    ActiveException, CpuState, ExceptionSource, NvicState, SauRegion, ScbSubset, SecurityState, SpecialRegs,
    SAU_REGIONS,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type WorldId = usize;

pub const MESSAGE_LEN: usize = 12;

/// Saved interrupt state of one line owned by a world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrqDescriptor {
    pub iser: bool,
    pub ispr: bool,
    pub ipr: u8,
    pub itns: bool,
    /// The world was inside this line's handler when suspended.
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub payload: [u8; MESSAGE_LEN],
    pub sender: WorldId,
    pub receiver: WorldId,
}

/// Packs 12 bytes into the three message registers, little-endian.
pub fn payload_to_words(payload: &[u8; MESSAGE_LEN]) -> [u32; 3] {
    let mut w = [0u32; 3];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        w[i] = u32::from_le_bytes(chunk.try_into().unwrap());
    }
    w
}

pub fn words_to_payload(words: [u32; 3]) -> [u8; MESSAGE_LEN] {
    let mut p = [0u8; MESSAGE_LEN];
    for (i, w) in words.iter().enumerate() {
        p[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockedOn {
    SendTo(WorldId),
    Recv,
}

/// How a suspended world gets back onto the core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResumePoint {
    /// Never ran: start at the entry point.
    Fresh,
    /// Preempted by an exception; its frame is on its own stack.
    Exception,
    /// Blocked inside the gateway; continue at `ret` in thread mode.
    Gateway { ret: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wcb {
    /// r4-r14.
    pub general: [u32; 11],
    pub specials: SpecialRegs,
    pub scb: ScbSubset,
    pub sau_table: [SauRegion; SAU_REGIONS],
    pub irqs: BTreeMap<u16, IrqDescriptor>,
    pub inbox: Option<Message>,
    pub blocked_on: Option<BlockedOn>,
    pub resume: ResumePoint,
    pub halted: bool,
    pub entry: u32,
}

impl Wcb {
    pub fn runnable(&self) -> bool {
        !self.halted && self.blocked_on.is_none()
    }

    /// r4-r14 plus the non-secure banked specials and SCB subset.
    pub fn save_context(&mut self, cpu: &CpuState) {
        self.general.copy_from_slice(&cpu.regs[4..15]);
        self.specials = *cpu.bank(SecurityState::NonSecure);
        self.scb = cpu.scb[SecurityState::NonSecure.bank()];
    }

    pub fn restore_context(&self, cpu: &mut CpuState) {
        cpu.regs[4..15].copy_from_slice(&self.general);
        *cpu.bank_mut(SecurityState::NonSecure) = self.specials;
        cpu.scb[SecurityState::NonSecure.bank()] = self.scb;
        cpu.refresh_sp();
    }

    /// Records this world's lines and hands them to the secure side:
    /// secure-targeted, enabled only when `keep_enabled`, pending kept.
    /// Handlers the world was inside are lifted off the active stack.
    pub fn bank_irqs(&mut self, nvic: &mut NvicState, cpu: &mut CpuState, keep_enabled: bool) {
        for (&irq, d) in self.irqs.iter_mut() {
            let line = nvic.line_mut(irq);
            d.iser = line.enabled;
            d.ispr = line.pending;
            d.ipr = line.priority;
            d.itns = line.itns;
            d.active = false;
            line.itns = false;
            line.enabled = keep_enabled && d.iser;
        }
        let irqs = &mut self.irqs;
        cpu.active.retain(|a| match a.source {
            ExceptionSource::Irq(n) => match irqs.get_mut(&n) {
                Some(d) => {
                    d.active = true;
                    false
                }
                None => true,
            },
            _ => true,
        });
    }

    /// Gives the lines back, or-ing in any request that pended meanwhile,
    /// and puts interrupted handlers back under the secure entries.
    pub fn restore_irqs(&mut self, nvic: &mut NvicState, cpu: &mut CpuState) {
        let mut resumed: Vec<ActiveException> = Vec::new();
        for (&irq, d) in self.irqs.iter_mut() {
            let line = nvic.line_mut(irq);
            line.itns = d.itns;
            line.enabled = d.iser;
            line.priority = d.ipr;
            line.pending |= d.ispr;
            d.ispr = false;
            if d.active {
                let source = ExceptionSource::Irq(irq);
                let target = if d.itns { SecurityState::NonSecure } else { SecurityState::Secure };
                resumed.push(ActiveException { source, key: nvic.key(target, d.ipr, source) });
                d.active = false;
            }
        }
        // least urgent at the bottom of the stack
        resumed.sort_by_key(|d| std::cmp::Reverse(d.key));
        cpu.active.splice(0..0, resumed);
    }

    /// Leaves the lines secure-targeted and disabled for good.
    pub fn disable_irqs(&mut self, nvic: &mut NvicState, cpu: &mut CpuState) {
        self.bank_irqs(nvic, cpu, false);
        for d in self.irqs.values_mut() {
            d.iser = false;
            d.active = false;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::{Mode, PriorityKey};
    use proptest::prelude::*;

    fn wcb(irqs: &[u16]) -> Wcb {
        Wcb {
            general: [0; 11],
            specials: SpecialRegs::default(),
            scb: ScbSubset::default(),
            sau_table: [SauRegion::default(); SAU_REGIONS],
            irqs: irqs
                .iter()
                .map(|&i| (i, IrqDescriptor { iser: true, ispr: false, ipr: 0x40, itns: true, active: false }))
                .collect(),
            inbox: None,
            blocked_on: None,
            resume: ResumePoint::Fresh,
            halted: false,
            entry: 0,
        }
    }

    #[test]
    fn payload_words_roundtrip() {
        let p: [u8; 12] = core::array::from_fn(|i| i as u8 + 1);
        let w = payload_to_words(&p);
        assert_eq!(w[0], 0x0403_0201);
        assert_eq!(words_to_payload(w), p);
    }

    #[test]
    fn banking_keeps_pending_and_hides_line() {
        let mut nvic = NvicState { secure_priority_boost: true, ..Default::default() };
        let mut cpu = CpuState::default();
        let mut w = wcb(&[3]);
        w.restore_irqs(&mut nvic, &mut cpu);
        assert!(nvic.line(3).itns && nvic.line(3).enabled);
        w.bank_irqs(&mut nvic, &mut cpu, false);
        assert!(!nvic.line(3).itns && !nvic.line(3).enabled);
        nvic.raise(3);
        w.restore_irqs(&mut nvic, &mut cpu);
        assert!(nvic.line(3).pending && nvic.line(3).enabled && nvic.line(3).itns);
    }

    #[test]
    fn active_handlers_travel_with_the_world() {
        let mut nvic = NvicState { secure_priority_boost: true, ..Default::default() };
        let mut cpu = CpuState { mode: Mode::Handler, ..Default::default() };
        let mut w = wcb(&[3]);
        w.restore_irqs(&mut nvic, &mut cpu);
        let irq_key = nvic.key(SecurityState::NonSecure, 0x40, ExceptionSource::Irq(3));
        let tick = ActiveException { source: ExceptionSource::SysTick, key: PriorityKey::new(0, 0, 15) };
        cpu.active = vec![ActiveException { source: ExceptionSource::Irq(3), key: irq_key }, tick];
        w.bank_irqs(&mut nvic, &mut cpu, false);
        assert_eq!(cpu.active, vec![tick]);
        assert!(w.irqs[&3].active);
        w.restore_irqs(&mut nvic, &mut cpu);
        assert_eq!(cpu.active[0].source, ExceptionSource::Irq(3));
        assert_eq!(cpu.active[1], tick);
    }

    proptest! {
        #[test]
        fn context_save_restore_is_identity(regs in proptest::array::uniform16(any::<u32>()),
                                            sp in proptest::array::uniform8(any::<u32>()),
                                            vtor in any::<u32>(), scr in any::<u32>()) {
            let mut cpu = CpuState { regs, ..Default::default() };
            let s = cpu.bank_mut(SecurityState::NonSecure);
            *s = SpecialRegs { msp: sp[0], psp: sp[1], msp_lim: sp[2], psp_lim: sp[3], basepri: sp[4], primask: sp[5], faultmask: sp[6], control: sp[7] };
            cpu.scb[1] = ScbSubset { vtor, scr };
            cpu.refresh_sp();
            let before = cpu.clone();
            let mut w = wcb(&[]);
            w.save_context(&cpu);
            let mut other = CpuState { regs: before.regs, ..Default::default() };
            other.regs[4..15].fill(0xdead_beef);
            w.restore_context(&mut other);
            prop_assert_eq!(&other.regs[4..15], &before.regs[4..15]);
            prop_assert_eq!(other.bank(SecurityState::NonSecure), before.bank(SecurityState::NonSecure));
            prop_assert_eq!(other.scb[1], before.scb[1]);
        }
    }
}
