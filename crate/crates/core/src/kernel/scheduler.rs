//! Kernel life cycle and the worlds scheduler.

use super::boot::{BootImage, BootOutcome};
use super::config::{MemRegionSpec, SchedulerMode, SystemConfig};
use super::partition::{gateway_region, sp_apply_static, sp_build_sau_table, sp_validate, PartitionError};
use super::wcb::{BlockedOn, IrqDescriptor, ResumePoint, Wcb, WorldId};
use crate::hw::{
    Address, ExceptionFrame, MemoryKind, Mode, PlatformState, SauRegion, ScbSubset, SecurityAttribution, SecurityState,
    SpecialRegs, SysTickState, Transition, TransitionFault, EXC_RETURN_NS_THREAD_MSP, EXC_RETURN_NS_THREAD_PSP,
    SAU_REGIONS,
};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootPhase {
    Reset,
    Partitioned,
    Running,
    Locked,
    Aborted,
}

impl fmt::Display for BootPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BootPhase::Reset => "reset",
            BootPhase::Partitioned => "partitioned",
            BootPhase::Running => "running",
            BootPhase::Locked => "locked",
            BootPhase::Aborted => "aborted",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("kernel is locked until reset")]
    Locked,
    #[error("{op} is not allowed in phase {phase}")]
    Phase { op: &'static str, phase: BootPhase },
    #[error("boot image has not been verified")]
    NotVerified,
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Transition(#[from] TransitionFault),
}

/// Result of a scheduling decision. `to == None` means the kernel idles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchOutcome {
    pub from: Option<WorldId>,
    pub to: Option<WorldId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulingAction {
    SwitchTo(WorldId),
    /// The owner may not preempt; the request stays pending for its slot.
    Deferred,
}

#[derive(Debug, Clone)]
pub struct Kernel {
    config: SystemConfig,
    phase: BootPhase,
    image_verified: bool,
    pub(crate) wcbs: Vec<Wcb>,
    running: Option<WorldId>,
    /// Round-robin anchor: the world most recently given the core.
    last_scheduled: WorldId,
    tick_reload: u64,
    gateway: MemRegionSpec,
    secure_stack_top: u32,
}

fn secure_stack_top(platform: &PlatformState) -> u32 {
    platform
        .desc
        .memories
        .iter()
        .filter(|m| m.kind == MemoryKind::Memory)
        .filter(|m| platform.desc.idau.lookup(m.base) == SecurityAttribution::Secure)
        .map(|m| (m.end() - 8) as u32)
        .max()
        .unwrap_or(0)
}

impl Kernel {
    pub fn new(config: SystemConfig) -> Kernel {
        let tick_reload = config.tick_reload();
        let gateway =
            gateway_region(&config.platform).unwrap_or(MemRegionSpec::new(0, 0, super::config::RegionKind::Code));
        Kernel {
            config,
            phase: BootPhase::Reset,
            image_verified: false,
            wcbs: Vec::new(),
            running: None,
            last_scheduled: 0,
            tick_reload,
            gateway,
            secure_stack_top: 0,
        }
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn phase(&self) -> BootPhase {
        self.phase
    }

    pub fn running(&self) -> Option<WorldId> {
        self.running
    }

    pub fn wcb(&self, world: WorldId) -> &Wcb {
        &self.wcbs[world]
    }

    pub fn wcbs(&self) -> &[Wcb] {
        &self.wcbs
    }

    pub fn tick_reload(&self) -> u64 {
        self.tick_reload
    }

    pub fn gateway(&self) -> MemRegionSpec {
        self.gateway
    }

    pub fn world_count(&self) -> usize {
        self.config.worlds.len()
    }

    pub fn owner_of_irq(&self, irq: u16) -> Option<WorldId> {
        self.config.worlds.iter().position(|w| w.owns_irq(irq))
    }

    fn require(&self, op: &'static str, phase: BootPhase) -> Result<(), KernelError> {
        match self.phase {
            BootPhase::Locked => Err(KernelError::Locked),
            p if p == phase => Ok(()),
            p => Err(KernelError::Phase { op, phase: p }),
        }
    }

    /// Explicit reset: the only way out of Locked or Aborted.
    pub fn reset(&mut self, platform: &mut PlatformState) {
        *platform = PlatformState::new(platform.desc.clone()).expect("platform was valid at construction");
        self.phase = BootPhase::Reset;
        self.image_verified = false;
        self.wcbs.clear();
        self.running = None;
        self.last_scheduled = 0;
    }

    /// Verifies the boot image digest. A mismatch locks the kernel.
    pub fn secure_boot(&mut self, image: &BootImage) -> Result<BootOutcome, KernelError> {
        self.require("secure_boot", BootPhase::Reset)?;
        if image.verify() {
            self.image_verified = true;
            Ok(BootOutcome::Proceed)
        } else {
            self.phase = BootPhase::Locked;
            Ok(BootOutcome::Locked)
        }
    }

    /// Validates the layout and programs the gates once. Any failure
    /// aborts the boot.
    pub fn partition(&mut self, platform: &mut PlatformState) -> Result<(), KernelError> {
        self.require("partition", BootPhase::Reset)?;
        if !self.image_verified {
            return Err(KernelError::NotVerified);
        }
        let result = sp_validate(&self.config)
            .and_then(|_| {
                for w in &self.config.worlds {
                    sp_build_sau_table(w, &self.config.platform, &self.gateway)?;
                }
                Ok(())
            })
            .and_then(|_| sp_apply_static(&self.config, platform));
        match result {
            Ok(()) => {
                self.phase = BootPhase::Partitioned;
                Ok(())
            }
            Err(e) => {
                self.phase = BootPhase::Aborted;
                Err(e.into())
            }
        }
    }

    /// Fills the world control blocks and programs the tick timer.
    pub fn init(&mut self, platform: &mut PlatformState) -> Result<(), KernelError> {
        self.require("init", BootPhase::Partitioned)?;
        let mut wcbs = Vec::with_capacity(self.config.worlds.len());
        for w in &self.config.worlds {
            let sau_table = sp_build_sau_table(w, &self.config.platform, &self.gateway)?;
            wcbs.push(Wcb {
                general: [0; 11],
                specials: SpecialRegs { msp: w.stack_top(), ..Default::default() },
                scb: ScbSubset { vtor: w.entry.0, scr: 0 },
                sau_table,
                irqs: w
                    .irqs
                    .iter()
                    .map(|i| {
                        let d = IrqDescriptor { iser: true, ispr: false, ipr: i.priority, itns: true, active: false };
                        (i.id, d)
                    })
                    .collect(),
                inbox: None,
                blocked_on: None,
                resume: ResumePoint::Fresh,
                halted: false,
                entry: w.entry.0,
            });
        }
        self.wcbs = wcbs;
        self.secure_stack_top = secure_stack_top(platform);
        let cpu = &mut platform.cpu;
        cpu.bank_mut(SecurityState::Secure).msp = self.secure_stack_top;
        cpu.refresh_sp();
        platform.nvic.secure_priority_boost = true;
        platform.systick = SysTickState::new((self.tick_reload - 1) as u32, SecurityState::Secure);
        Ok(())
    }

    /// Loads world 0 and leaves the kernel with BLXNS to its entry point.
    pub fn kick_off(&mut self, platform: &mut PlatformState) -> Result<(), KernelError> {
        self.require("kick_off", BootPhase::Partitioned)?;
        if self.wcbs.is_empty() {
            return Err(KernelError::Phase { op: "kick_off before init", phase: self.phase });
        }
        self.load_sau(platform, Some(0));
        let w = &mut self.wcbs[0];
        *platform.cpu.bank_mut(SecurityState::NonSecure) = w.specials;
        platform.cpu.scb[SecurityState::NonSecure.bank()] = w.scb;
        w.restore_irqs(&mut platform.nvic, &mut platform.cpu);
        w.resume = ResumePoint::Exception;
        platform.systick.clear();
        platform.systick.enabled = true;
        let entry = w.entry;
        platform.transition(Transition::BlxnsCall { args: 0 }, Address(entry))?;
        self.running = Some(0);
        self.last_scheduled = 0;
        self.phase = BootPhase::Running;
        self.apply_suspended_gating(platform);
        Ok(())
    }

    fn load_sau(&self, platform: &mut PlatformState, world: Option<WorldId>) {
        let table = match world {
            Some(w) => self.wcbs[w].sau_table,
            None => [SauRegion::default(); SAU_REGIONS],
        };
        platform.sau.load_table(&table).expect("tables were validated at partition time");
        platform.sau.enabled = true;
    }

    /// Next runnable world after the anchor, wrapping around to it last.
    pub fn successor(&self) -> Option<WorldId> {
        let n = self.wcbs.len();
        (1..=n).map(|k| (self.last_scheduled + k) % n).find(|&w| self.wcbs[w].runnable())
    }

    fn preempts(&self, candidate: WorldId, running: Option<WorldId>) -> bool {
        self.config.scheduler_mode == SchedulerMode::PriorityPreemptive
            && match running {
                Some(r) => self.config.worlds[candidate].priority < self.config.worlds[r].priority,
                None => true,
            }
    }

    /// In preemptive mode, suspended worlds that outrank the running one
    /// keep their (secure-targeted) lines enabled.
    fn apply_suspended_gating(&self, platform: &mut PlatformState) {
        for (w, wcb) in self.wcbs.iter().enumerate() {
            if Some(w) == self.running {
                continue;
            }
            let enable = wcb.runnable() && self.preempts(w, self.running);
            for (&irq, d) in &wcb.irqs {
                platform.nvic.line_mut(irq).enabled = enable && d.iser;
            }
        }
    }

    /// Saves the live world into its WCB and hands its lines to the
    /// secure side.
    pub(crate) fn suspend(&mut self, platform: &mut PlatformState, resume: ResumePoint) -> Option<WorldId> {
        let w = self.running.take()?;
        let wcb = &mut self.wcbs[w];
        wcb.save_context(&platform.cpu);
        wcb.resume = resume;
        wcb.bank_irqs(&mut platform.nvic, &mut platform.cpu, false);
        Some(w)
    }

    /// Restores `world` and leaves the kernel through an exception return
    /// into it. With `None`, the kernel idles in secure thread mode. A
    /// handoff runs the world inside someone else's slot, so the
    /// round-robin anchor stays put.
    pub(crate) fn resume(
        &mut self,
        platform: &mut PlatformState,
        world: Option<WorldId>,
        handoff: bool,
    ) -> Result<(), KernelError> {
        self.load_sau(platform, world);
        let Some(w) = world else {
            let cpu = &mut platform.cpu;
            cpu.active.clear();
            cpu.security = SecurityState::Secure;
            cpu.mode = Mode::Thread;
            cpu.privileged = true;
            cpu.clear_general(0);
            cpu.bank_mut(SecurityState::Secure).msp = self.secure_stack_top;
            cpu.refresh_sp();
            self.running = None;
            self.apply_suspended_gating(platform);
            return Ok(());
        };
        let wcb = &mut self.wcbs[w];
        wcb.restore_irqs(&mut platform.nvic, &mut platform.cpu);
        wcb.restore_context(&mut platform.cpu);
        let psp = wcb.specials.control & 0b10 != 0;
        let frame = match wcb.resume {
            ResumePoint::Fresh => Some(ExceptionFrame::entry(wcb.entry)),
            ResumePoint::Gateway { ret } => Some(ExceptionFrame { lr: ret | 1, ..ExceptionFrame::entry(ret) }),
            ResumePoint::Exception => None,
        };
        if let Some(frame) = frame {
            let cpu = &mut platform.cpu;
            let bank = cpu.bank_mut(SecurityState::NonSecure);
            let sp = if psp { &mut bank.psp } else { &mut bank.msp };
            *sp -= 4 * ExceptionFrame::WORDS;
            frame.write(&mut platform.memory, *sp);
            cpu.regs[14] = if psp { EXC_RETURN_NS_THREAD_PSP } else { EXC_RETURN_NS_THREAD_MSP };
            if wcb.resume == ResumePoint::Fresh {
                cpu.regs[4..12].fill(0);
            }
        }
        wcb.resume = ResumePoint::Exception;
        platform.cpu.exception_return(&platform.memory)?;
        platform.cpu.bank_mut(SecurityState::Secure).msp = self.secure_stack_top;
        self.running = Some(w);
        if !handoff {
            self.last_scheduled = w;
        }
        self.apply_suspended_gating(platform);
        Ok(())
    }

    fn switch(
        &mut self,
        platform: &mut PlatformState,
        resume: ResumePoint,
        handoff: bool,
        pick: impl FnOnce(&Self) -> Option<WorldId>,
    ) -> Result<SwitchOutcome, KernelError> {
        let from = self.suspend(platform, resume);
        let to = pick(self);
        self.resume(platform, to, handoff)?;
        Ok(SwitchOutcome { from, to })
    }

    /// Secure SysTick handler body: save, pick the round-robin successor,
    /// reprogram the SAU, restore. Must run inside the SysTick exception.
    pub fn ws_tick(&mut self, platform: &mut PlatformState) -> Result<SwitchOutcome, KernelError> {
        self.require("ws_tick", BootPhase::Running)?;
        self.switch(platform, ResumePoint::Exception, false, |k| k.successor())
    }

    /// Secure handler for a suspended world's line in preemptive mode.
    pub fn preemptive_route(
        &mut self,
        platform: &mut PlatformState,
        irq: u16,
    ) -> Result<SchedulingAction, KernelError> {
        self.require("preemptive_route", BootPhase::Running)?;
        let owner = self.owner_of_irq(irq);
        let Some(owner) =
            owner.filter(|&o| self.wcbs[o].runnable() && Some(o) != self.running && self.preempts(o, self.running))
        else {
            let line = platform.nvic.line_mut(irq);
            line.pending = true;
            line.enabled = false;
            return Ok(SchedulingAction::Deferred);
        };
        if let Some(d) = self.wcbs[owner].irqs.get_mut(&irq) {
            d.ispr = true;
        }
        self.switch(platform, ResumePoint::Exception, false, |_| Some(owner))?;
        platform.systick.clear();
        Ok(SchedulingAction::SwitchTo(owner))
    }

    /// Secure fault handler: halts the running world, silences its lines,
    /// and gives the core to the next runnable world.
    pub fn fault_halt(&mut self, platform: &mut PlatformState) -> Result<SwitchOutcome, KernelError> {
        self.require("fault_halt", BootPhase::Running)?;
        let from = self.running.take();
        if let Some(w) = from {
            let wcb = &mut self.wcbs[w];
            wcb.halted = true;
            wcb.save_context(&platform.cpu);
            wcb.disable_irqs(&mut platform.nvic, &mut platform.cpu);
            // drop anything it left in flight towards others
            for other in self.wcbs.iter_mut() {
                if other.blocked_on == Some(BlockedOn::SendTo(w)) {
                    other.blocked_on = None;
                    other.general[..3].fill(0);
                }
            }
        }
        let to = self.successor();
        self.resume(platform, to, false)?;
        platform.systick.clear();
        Ok(SwitchOutcome { from, to })
    }

    /// Switch requested by the running world. An explicit target is a
    /// handoff of the rest of the slot.
    pub(crate) fn forced_switch(
        &mut self,
        platform: &mut PlatformState,
        resume: ResumePoint,
        to: Option<WorldId>,
    ) -> Result<SwitchOutcome, KernelError> {
        let out = self.switch(platform, resume, to.is_some(), |k| to.or_else(|| k.successor()))?;
        platform.systick.clear();
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::hw::{arbitrate_and_enter_exception, AliasField, AliasOp};
    use crate::kernel::IrqSpec;
    use crate::scenarios::bench_config;

    pub(crate) fn booted(n: usize) -> (Kernel, PlatformState) {
        let mut config = bench_config(n, 500.0, 1000, 0, 0);
        config.worlds[0].irqs = vec![IrqSpec { id: 3, priority: 0x40 }];
        booted_with(config)
    }

    pub(crate) fn booted_with(config: SystemConfig) -> (Kernel, PlatformState) {
        let mut platform = PlatformState::new(config.platform.clone()).unwrap();
        let image = BootImage::for_config(&config);
        let mut k = Kernel::new(config);
        assert_eq!(k.secure_boot(&image).unwrap(), BootOutcome::Proceed);
        k.partition(&mut platform).unwrap();
        k.init(&mut platform).unwrap();
        k.kick_off(&mut platform).unwrap();
        (k, platform)
    }

    pub(crate) fn tick(k: &mut Kernel, p: &mut PlatformState) -> SwitchOutcome {
        p.nvic.systick_pending = true;
        arbitrate_and_enter_exception(&mut p.cpu, &mut p.nvic, &mut p.memory).unwrap();
        k.ws_tick(p).unwrap()
    }

    #[test]
    fn locked_refuses_everything_until_reset() {
        let config = bench_config(2, 500.0, 1000, 0, 0);
        let mut p = PlatformState::new(config.platform.clone()).unwrap();
        let mut image = BootImage::for_config(&config);
        image.flip_bit(3);
        let mut k = Kernel::new(config.clone());
        assert_eq!(k.secure_boot(&image).unwrap(), BootOutcome::Locked);
        assert_eq!(k.phase(), BootPhase::Locked);
        assert_eq!(k.partition(&mut p), Err(KernelError::Locked));
        assert_eq!(k.init(&mut p), Err(KernelError::Locked));
        assert_eq!(k.kick_off(&mut p), Err(KernelError::Locked));
        assert_eq!(k.secure_boot(&BootImage::for_config(&config)), Err(KernelError::Locked));
        k.reset(&mut p);
        assert_eq!(k.phase(), BootPhase::Reset);
        assert_eq!(k.secure_boot(&BootImage::for_config(&config)).unwrap(), BootOutcome::Proceed);
    }

    #[test]
    fn partition_needs_a_verified_image() {
        let config = bench_config(1, 500.0, 1000, 0, 0);
        let mut p = PlatformState::new(config.platform.clone()).unwrap();
        let mut k = Kernel::new(config);
        assert_eq!(k.partition(&mut p), Err(KernelError::NotVerified));
    }

    #[test]
    fn kick_off_enters_world_zero_clean() {
        let (k, p) = booted(3);
        assert_eq!(k.running(), Some(0));
        assert_eq!(p.cpu.security, SecurityState::NonSecure);
        assert_eq!(p.cpu.mode, Mode::Thread);
        assert_eq!(p.cpu.regs[15], k.wcb(0).entry);
        assert!(p.cpu.regs[..13].iter().all(|&r| r == 0));
        assert_eq!(p.cpu.regs[13], k.config().worlds[0].stack_top());
        assert_eq!(p.systick.reload as u64, k.tick_reload() - 1);
        assert!(p.systick.enabled);
    }

    #[test]
    fn round_robin_visits_each_world_once_per_round() {
        let (mut k, mut p) = booted(4);
        let order: Vec<_> = (0..8).map(|_| tick(&mut k, &mut p).to.unwrap()).collect();
        assert_eq!(order, vec![1, 2, 3, 0, 1, 2, 3, 0]);
    }

    #[test]
    fn single_world_is_rescheduled_every_tick() {
        let (mut k, mut p) = booted(1);
        assert_eq!(tick(&mut k, &mut p), SwitchOutcome { from: Some(0), to: Some(0) });
        assert_eq!(p.cpu.security, SecurityState::NonSecure);
        assert!(p.cpu.active.is_empty());
    }

    #[test]
    fn suspended_lines_are_banked_and_opaque() {
        let (mut k, mut p) = booted(2);
        assert!(p.nvic.line(3).itns && p.nvic.line(3).enabled);
        tick(&mut k, &mut p);
        assert_eq!(k.running(), Some(1));
        p.nvic.raise(3);
        let line = *p.nvic.line(3);
        assert!(!line.itns && !line.enabled && line.pending);
        for f in [AliasField::Itns, AliasField::Iser, AliasField::Ispr, AliasField::Ipr] {
            assert_eq!(p.nvic.alias_access(SecurityState::NonSecure, f, 3, AliasOp::Read), 0);
            p.nvic.alias_access(SecurityState::NonSecure, f, 3, AliasOp::Write(0));
        }
        assert_eq!(*p.nvic.line(3), line);
        tick(&mut k, &mut p);
        let line = *p.nvic.line(3);
        assert!(line.itns && line.enabled && line.pending);
        assert_eq!(line.priority, 0x40);
    }

    #[test]
    fn blocked_and_halted_worlds_are_skipped() {
        let (mut k, mut p) = booted(4);
        k.wcbs[1].blocked_on = Some(BlockedOn::Recv);
        k.wcbs[2].halted = true;
        let order: Vec<_> = (0..4).map(|_| tick(&mut k, &mut p).to.unwrap()).collect();
        assert_eq!(order, vec![3, 0, 3, 0]);
    }

    #[test]
    fn nothing_runnable_idles_secure() {
        let (mut k, mut p) = booted(2);
        for w in &mut k.wcbs {
            w.blocked_on = Some(BlockedOn::Recv);
        }
        let out = tick(&mut k, &mut p);
        assert_eq!(out.to, None);
        assert_eq!(p.cpu.security, SecurityState::Secure);
        assert_eq!(p.cpu.mode, Mode::Thread);
        assert!(p.cpu.regs[..13].iter().all(|&r| r == 0));
        assert!(p.sau.regions.iter().all(|r| !r.enabled));
    }

    #[test]
    fn gates_are_never_reprogrammed() {
        let (mut k, mut p) = booted(3);
        let (mpcs, ppc) = (p.mpcs.clone(), p.ppc.clone());
        for _ in 0..10 {
            tick(&mut k, &mut p);
        }
        assert_eq!(p.mpcs, mpcs);
        assert_eq!(p.ppc, ppc);
    }

    #[test]
    fn fault_halt_retires_the_world() {
        let (mut k, mut p) = booted(3);
        tick(&mut k, &mut p);
        let key = p.nvic.key(SecurityState::Secure, 0, crate::hw::ExceptionSource::SecureFault);
        p.cpu.enter_exception(SecurityState::Secure, crate::hw::ExceptionSource::SecureFault, key, &mut p.memory);
        let out = k.fault_halt(&mut p).unwrap();
        assert_eq!(out, SwitchOutcome { from: Some(1), to: Some(2) });
        assert!(k.wcb(1).halted);
        let order: Vec<_> = (0..4).map(|_| tick(&mut k, &mut p).to.unwrap()).collect();
        assert_eq!(order, vec![0, 2, 0, 2]);
    }
}
