//! Core register state, exception stacking and the security-state
//! transition instructions (SG, BLXNS, BXNS).

use super::attribution::{attribute_address, IdauMap, SauState};
use super::nvic::{ExceptionSource, PriorityKey};
use super::platform::WordMemory;
use super::{Address, SecurityAttribution, SecurityState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Return value left in LR by BLXNS.
pub const FNC_RETURN: u32 = 0xfeff_ffff;
/// EXC_RETURN of a secure exception returning to non-secure thread mode on MSP.
pub const EXC_RETURN_NS_THREAD_MSP: u32 = 0xffff_ffb9;
/// Same, returning on PSP.
pub const EXC_RETURN_NS_THREAD_PSP: u32 = 0xffff_ffbd;
/// Secure exception returning to a non-secure handler.
pub const EXC_RETURN_NS_HANDLER: u32 = 0xffff_ffb1;

const EXC_ES: u32 = 1 << 0;
const EXC_SPSEL: u32 = 1 << 2;
const EXC_MODE: u32 = 1 << 3;
const EXC_FTYPE: u32 = 1 << 4;
const EXC_DCRS: u32 = 1 << 5;
const EXC_S: u32 = 1 << 6;
const EXC_PREFIX: u32 = 0xffff_ff80;

const CONTROL_SPSEL: u32 = 1 << 1;
const XPSR_THUMB: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Thread,
    Handler,
}

/// Banked special-purpose registers of one security state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SpecialRegs {
    pub msp: u32,
    pub psp: u32,
    pub msp_lim: u32,
    pub psp_lim: u32,
    pub basepri: u32,
    pub primask: u32,
    pub faultmask: u32,
    pub control: u32,
}

/// The System Control Block registers a world owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScbSubset {
    pub vtor: u32,
    pub scr: u32,
}

/// Standard 8-word exception frame, in stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExceptionFrame {
    pub r0: u32,
    pub r1: u32,
    pub r2: u32,
    pub r3: u32,
    pub r12: u32,
    pub lr: u32,
    pub pc: u32,
    pub xpsr: u32,
}

impl ExceptionFrame {
    pub const WORDS: u32 = 8;

    fn words(&self) -> [u32; 8] {
        [self.r0, self.r1, self.r2, self.r3, self.r12, self.lr, self.pc, self.xpsr]
    }

    fn from_words(w: [u32; 8]) -> Self {
        ExceptionFrame { r0: w[0], r1: w[1], r2: w[2], r3: w[3], r12: w[4], lr: w[5], pc: w[6], xpsr: w[7] }
    }

    /// Frame that starts a thread at `entry` with every register zero.
    pub fn entry(entry: u32) -> Self {
        ExceptionFrame { lr: 0xffff_ffff, pc: entry & !1, xpsr: XPSR_THUMB, ..Default::default() }
    }

    pub fn write(&self, mem: &mut WordMemory, sp: u32) {
        for (i, w) in self.words().iter().enumerate() {
            mem.write(sp.wrapping_add(4 * i as u32), *w);
        }
    }

    pub fn read(mem: &WordMemory, sp: u32) -> Self {
        let mut w = [0u32; 8];
        for (i, slot) in w.iter_mut().enumerate() {
            *slot = mem.read(sp.wrapping_add(4 * i as u32));
        }
        Self::from_words(w)
    }
}

/// An exception currently active on the core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveException {
    pub source: ExceptionSource,
    pub key: PriorityKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuState {
    pub security: SecurityState,
    pub mode: Mode,
    pub privileged: bool,
    /// r0-r15. r13 mirrors the active banked stack pointer.
    pub regs: [u32; 16],
    /// Indexed by security state: `[Secure, NonSecure]`.
    pub specials: [SpecialRegs; 2],
    pub scb: [ScbSubset; 2],
    pub xpsr: u32,
    /// Active exceptions, least urgent first.
    pub active: Vec<ActiveException>,
}

impl Default for CpuState {
    fn default() -> Self {
        CpuState {
            security: SecurityState::Secure,
            mode: Mode::Thread,
            privileged: true,
            regs: [0; 16],
            specials: [SpecialRegs::default(); 2],
            scb: [ScbSubset::default(); 2],
            xpsr: XPSR_THUMB,
            active: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitionFault {
    #[error("security fault: {0}")]
    SecurityFault(String),
    #[error("invalid exception return {0:#010x}")]
    InvalidExcReturn(u32),
}

/// Security-state transition instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    /// Non-secure branch onto an SG instruction.
    SgEntry,
    /// BLXNS from secure code. The first `args` registers (r0..) carry
    /// arguments and survive; every other general register is cleared.
    BlxnsCall { args: u8 },
    /// BXNS return to non-secure code.
    BxnsReturn,
}

impl CpuState {
    pub fn bank(&self, security: SecurityState) -> &SpecialRegs {
        &self.specials[security.bank()]
    }

    pub fn bank_mut(&mut self, security: SecurityState) -> &mut SpecialRegs {
        &mut self.specials[security.bank()]
    }

    fn uses_psp(&self, security: SecurityState, mode: Mode) -> bool {
        mode == Mode::Thread && self.bank(security).control & CONTROL_SPSEL != 0
    }

    /// Stack pointer selected by the current security state and mode.
    pub fn active_sp(&self) -> u32 {
        let bank = self.bank(self.security);
        if self.uses_psp(self.security, self.mode) {
            bank.psp
        } else {
            bank.msp
        }
    }

    fn set_sp(&mut self, security: SecurityState, psp: bool, value: u32) {
        let bank = self.bank_mut(security);
        if psp {
            bank.psp = value;
        } else {
            bank.msp = value;
        }
    }

    /// Re-synchronises r13 with the banked stack pointer.
    pub fn refresh_sp(&mut self) {
        self.regs[13] = self.active_sp();
    }

    pub fn execution_priority(&self) -> Option<PriorityKey> {
        self.active.last().map(|a| a.key)
    }

    pub fn general(&self) -> &[u32; 16] {
        &self.regs
    }

    /// Clears r0-r12 except the first `keep` registers.
    pub fn clear_general(&mut self, keep: usize) {
        for r in self.regs.iter_mut().take(13).skip(keep) {
            *r = 0;
        }
    }

    /// Hardware exception entry: stacks the caller frame on the current
    /// stack and switches to handler mode in `target` state. Entering a
    /// non-secure handler from secure code also stacks r4-r11 and erases
    /// r0-r12. Returns the EXC_RETURN value placed in LR and whether the
    /// erase happened.
    pub fn enter_exception(
        &mut self,
        target: SecurityState,
        source: ExceptionSource,
        key: PriorityKey,
        mem: &mut WordMemory,
    ) -> (u32, bool) {
        let from = self.security;
        let from_mode = self.mode;
        let psp = self.uses_psp(from, from_mode);
        let mut sp = self.active_sp();
        let erase = from == SecurityState::Secure && target == SecurityState::NonSecure;
        if erase {
            // additional state context: r4-r11 below the standard frame
            sp = sp.wrapping_sub(4 * 8);
            for (i, r) in (4..12).enumerate() {
                mem.write(sp.wrapping_add(4 * i as u32), self.regs[r]);
            }
        }
        let frame = ExceptionFrame {
            r0: self.regs[0],
            r1: self.regs[1],
            r2: self.regs[2],
            r3: self.regs[3],
            r12: self.regs[12],
            lr: self.regs[14],
            pc: self.regs[15],
            xpsr: self.xpsr,
        };
        sp = sp.wrapping_sub(4 * ExceptionFrame::WORDS);
        frame.write(mem, sp);
        self.set_sp(from, psp, sp);
        if erase {
            self.clear_general(0);
        }

        let mut exc_return = EXC_PREFIX | EXC_FTYPE | EXC_DCRS;
        if target == SecurityState::Secure {
            exc_return |= EXC_ES;
        }
        if from == SecurityState::Secure {
            exc_return |= EXC_S;
        }
        if from_mode == Mode::Thread {
            exc_return |= EXC_MODE;
        }
        if psp {
            exc_return |= EXC_SPSEL;
        }

        self.security = target;
        self.mode = Mode::Handler;
        self.privileged = true;
        self.regs[14] = exc_return;
        let number = source.number();
        self.regs[15] = self.scb[target.bank()].vtor.wrapping_add(4 * number as u32);
        self.xpsr = (self.xpsr & !0x1ff) | number as u32;
        self.active.push(ActiveException { source, key });
        self.refresh_sp();
        (exc_return, erase)
    }

    /// Exception return through the EXC_RETURN value in LR: unstacks the
    /// frame from the stack it names and resumes in the encoded state.
    pub fn exception_return(&mut self, mem: &WordMemory) -> Result<(), TransitionFault> {
        let exc = self.regs[14];
        if exc & EXC_PREFIX != EXC_PREFIX {
            return Err(TransitionFault::InvalidExcReturn(exc));
        }
        let to_security = if exc & EXC_S != 0 { SecurityState::Secure } else { SecurityState::NonSecure };
        let to_mode = if exc & EXC_MODE != 0 { Mode::Thread } else { Mode::Handler };
        let psp = exc & EXC_SPSEL != 0;
        if to_mode == Mode::Handler && psp {
            return Err(TransitionFault::InvalidExcReturn(exc));
        }
        let additional = to_security == SecurityState::Secure && exc & EXC_ES == 0;

        let bank = self.bank(to_security);
        let mut sp = if psp { bank.psp } else { bank.msp };
        let frame = ExceptionFrame::read(mem, sp);
        sp = sp.wrapping_add(4 * ExceptionFrame::WORDS);
        if additional {
            for (i, r) in (4..12).enumerate() {
                self.regs[r] = mem.read(sp.wrapping_add(4 * i as u32));
            }
            sp = sp.wrapping_add(4 * 8);
        }
        self.set_sp(to_security, psp, sp);

        self.regs[0] = frame.r0;
        self.regs[1] = frame.r1;
        self.regs[2] = frame.r2;
        self.regs[3] = frame.r3;
        self.regs[12] = frame.r12;
        self.regs[14] = frame.lr;
        self.regs[15] = frame.pc;
        self.xpsr = frame.xpsr;
        // the kernel also leaves its gateway (thread mode) this way
        if self.mode == Mode::Handler {
            self.active.pop();
        }
        self.security = to_security;
        self.mode = to_mode;
        self.privileged = to_mode == Mode::Handler || self.bank(to_security).control & 1 == 0;
        self.refresh_sp();
        Ok(())
    }
}

/// Applies a security-state transition instruction.
pub fn security_transition(
    cpu: &mut CpuState,
    kind: Transition,
    target: Address,
    sau: &SauState,
    idau: &IdauMap,
) -> Result<(), TransitionFault> {
    let attr = attribute_address(sau, idau, target);
    match kind {
        Transition::SgEntry => {
            if cpu.security != SecurityState::NonSecure {
                return Err(TransitionFault::SecurityFault("SG entry from secure state".into()));
            }
            match attr {
                SecurityAttribution::SecureNsc => {
                    cpu.security = SecurityState::Secure;
                    // LR[0] cleared marks a non-secure return address
                    cpu.regs[14] &= !1;
                    cpu.regs[15] = target.0;
                    cpu.refresh_sp();
                    Ok(())
                }
                SecurityAttribution::Secure => Err(TransitionFault::SecurityFault(format!(
                    "non-secure branch to secure address {target} outside NSC"
                ))),
                SecurityAttribution::NonSecure => {
                    Err(TransitionFault::SecurityFault(format!("SG at non-secure address {target}")))
                }
            }
        }
        Transition::BlxnsCall { args } => {
            if cpu.security != SecurityState::Secure {
                return Err(TransitionFault::SecurityFault("BLXNS from non-secure state".into()));
            }
            if attr != SecurityAttribution::NonSecure {
                return Err(TransitionFault::SecurityFault(format!("BLXNS target {target} is not non-secure")));
            }
            cpu.clear_general(args.min(13) as usize);
            cpu.regs[14] = FNC_RETURN;
            cpu.regs[15] = target.0 & !1;
            cpu.security = SecurityState::NonSecure;
            cpu.refresh_sp();
            Ok(())
        }
        Transition::BxnsReturn => {
            if cpu.security != SecurityState::Secure {
                return Err(TransitionFault::SecurityFault("BXNS from non-secure state".into()));
            }
            if attr != SecurityAttribution::NonSecure {
                return Err(TransitionFault::SecurityFault(format!("BXNS target {target} is not non-secure")));
            }
            cpu.regs[15] = target.0 & !1;
            cpu.security = SecurityState::NonSecure;
            cpu.refresh_sp();
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::attribution::SauRegion;
    use proptest::prelude::*;

    fn layout() -> (SauState, IdauMap) {
        let mut sau = SauState::default();
        sau.program_region(0, SauRegion::covering(Address(0x1000_0000), 0x1_0000, false)).unwrap();
        sau.program_region(1, SauRegion::covering(Address(0x1010_0000), 0x400, true)).unwrap();
        sau.enabled = true;
        (sau, IdauMap::bit28())
    }

    fn ns_cpu() -> CpuState {
        let mut cpu = CpuState { security: SecurityState::NonSecure, ..Default::default() };
        cpu.bank_mut(SecurityState::NonSecure).msp = 0x3000_1000;
        cpu.bank_mut(SecurityState::Secure).msp = 0x2000_1000;
        cpu.refresh_sp();
        cpu
    }

    #[test]
    fn sg_into_nsc_enters_secure() {
        let (sau, idau) = layout();
        let mut cpu = ns_cpu();
        cpu.regs[14] = 0x1000_0101;
        security_transition(&mut cpu, Transition::SgEntry, Address(0x1010_0000), &sau, &idau).unwrap();
        assert_eq!(cpu.security, SecurityState::Secure);
        assert_eq!(cpu.regs[14] & 1, 0);
        assert_eq!(cpu.regs[13], 0x2000_1000);
    }

    #[test]
    fn direct_branch_to_secure_faults() {
        let (sau, idau) = layout();
        let mut cpu = ns_cpu();
        let err = security_transition(&mut cpu, Transition::SgEntry, Address(0x0000_0100), &sau, &idau).unwrap_err();
        assert!(matches!(err, TransitionFault::SecurityFault(_)));
        assert_eq!(cpu.security, SecurityState::NonSecure);
        // an SG target inside plain non-secure memory is not a gateway either
        assert!(security_transition(&mut cpu, Transition::SgEntry, Address(0x1000_0100), &sau, &idau).is_err());
    }

    #[test]
    fn blxns_clears_all_but_arguments() {
        let (sau, idau) = layout();
        let mut cpu = CpuState::default();
        cpu.bank_mut(SecurityState::NonSecure).msp = 0x3000_1000;
        for (i, r) in cpu.regs.iter_mut().enumerate().take(13) {
            *r = 0xdead_0000 | i as u32;
        }
        security_transition(&mut cpu, Transition::BlxnsCall { args: 2 }, Address(0x1000_0040), &sau, &idau).unwrap();
        assert_eq!(cpu.security, SecurityState::NonSecure);
        assert_eq!(cpu.regs[0], 0xdead_0000);
        assert_eq!(cpu.regs[1], 0xdead_0001);
        assert!(cpu.regs[2..13].iter().all(|r| *r == 0));
        assert_eq!(cpu.regs[14], FNC_RETURN);
        assert_eq!(cpu.regs[13], 0x3000_1000);
        assert_eq!(cpu.regs[15], 0x1000_0040);
    }

    #[test]
    fn bxns_requires_secure_and_ns_target() {
        let (sau, idau) = layout();
        let mut cpu = ns_cpu();
        assert!(security_transition(&mut cpu, Transition::BxnsReturn, Address(0x1000_0000), &sau, &idau).is_err());
        cpu.security = SecurityState::Secure;
        assert!(security_transition(&mut cpu, Transition::BxnsReturn, Address(0x0000_0000), &sau, &idau).is_err());
        security_transition(&mut cpu, Transition::BxnsReturn, Address(0x1000_0000), &sau, &idau).unwrap();
        assert_eq!(cpu.security, SecurityState::NonSecure);
    }

    #[test]
    fn stack_and_return_roundtrip() {
        let mut mem = WordMemory::default();
        let mut cpu = ns_cpu();
        for (i, r) in cpu.regs.iter_mut().enumerate().take(13) {
            *r = 0x1111_0000 + i as u32;
        }
        cpu.regs[14] = 0x1000_0201;
        cpu.regs[15] = 0x1000_0300;
        let before = cpu.clone();
        let key = PriorityKey::new(0, 0, 15);
        let (exc, erased) = cpu.enter_exception(SecurityState::Secure, ExceptionSource::SysTick, key, &mut mem);
        assert!(!erased);
        assert_eq!(exc, EXC_RETURN_NS_THREAD_MSP);
        assert_eq!(cpu.mode, Mode::Handler);
        assert_eq!(cpu.security, SecurityState::Secure);
        assert_eq!(cpu.bank(SecurityState::NonSecure).msp, 0x3000_1000 - 32);
        cpu.exception_return(&mem).unwrap();
        assert_eq!(cpu, before);
    }

    #[test]
    fn secure_to_ns_handler_erases() {
        let mut mem = WordMemory::default();
        let mut cpu = ns_cpu();
        cpu.security = SecurityState::Secure;
        cpu.refresh_sp();
        for (i, r) in cpu.regs.iter_mut().enumerate().take(13) {
            *r = 0x5ec0_0000 + i as u32;
        }
        let before = cpu.clone();
        let (_, erased) = cpu.enter_exception(
            SecurityState::NonSecure,
            ExceptionSource::Irq(3),
            PriorityKey::new(1, 0x40, 19),
            &mut mem,
        );
        assert!(erased);
        assert!(cpu.regs[..13].iter().all(|r| *r == 0));
        assert_eq!(cpu.security, SecurityState::NonSecure);
        // everything comes back on return, taken from the secure stack
        cpu.exception_return(&mem).unwrap();
        assert_eq!(cpu, before);
    }

    #[test]
    fn rejects_garbage_exc_return() {
        let mut cpu = ns_cpu();
        cpu.regs[14] = 0x1234_5678;
        assert!(matches!(cpu.exception_return(&WordMemory::default()), Err(TransitionFault::InvalidExcReturn(_))));
    }

    proptest! {
        #[test]
        fn r13_tracks_stack_selection(msp in any::<u32>(), psp in any::<u32>(), spsel in any::<bool>(), sec in any::<bool>(), handler in any::<bool>()) {
            let mut cpu = CpuState {
                security: if sec { SecurityState::Secure } else { SecurityState::NonSecure },
                mode: if handler { Mode::Handler } else { Mode::Thread },
                ..Default::default()
            };
            let bank = cpu.bank_mut(cpu.security);
            bank.msp = msp;
            bank.psp = psp;
            bank.control = if spsel { CONTROL_SPSEL } else { 0 };
            cpu.refresh_sp();
            let expect = if !handler && spsel { psp } else { msp };
            prop_assert_eq!(cpu.regs[13], expect);
        }
    }
}
