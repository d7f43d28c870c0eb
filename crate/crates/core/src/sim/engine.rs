//! Discrete-event engine: drives guests, the kernel and the hardware model
//! on one cycle clock.

use super::trace::{Trace, TraceKind};
use super::CostModel;
use crate::guest::{builtin_workload, GuestError, GuestEvent, WorkloadProgram};
use crate::hw::{
    arbitrate, arbitrate_and_enter_exception, check_access, AccessKind, AccessOutcome, AccessResult, Address,
    ExceptionSource, Mode, PendingException, PlatformState, SecurityState, Transaction, Transition, IRQ_LINES,
};
use crate::kernel::{
    payload_to_words, words_to_payload, BootImage, BootOutcome, ConfigError, Kernel, KernelError, SchedulingAction,
    SystemConfig, WccApi, WccError, WccOutcome, WorldId, MESSAGE_LEN,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("world {world}: {source}")]
    Guest { world: String, source: GuestError },
    #[error("platform: {0}")]
    Platform(String),
    #[error("expected {expected} workloads, got {got}")]
    WorkloadCount { expected: usize, got: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Where the run stands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Reset,
    Booted,
    Running,
    Finished,
    Locked,
    Aborted { reason: String },
}

/// Cycles by who spent them. The categories always sum to the clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CycleAccount {
    pub guest: u64,
    pub kernel: u64,
    pub irq_entry: u64,
    pub idle: u64,
}

impl CycleAccount {
    pub fn total(&self) -> u64 {
        self.guest + self.kernel + self.irq_entry + self.idle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Spend {
    Guest,
    Kernel,
    IrqEntry,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub cycle: u64,
    pub world: WorldId,
    pub outcome: AccessOutcome,
    pub cause: String,
    pub addr: Option<Address>,
}

/// What one [`Simulator::step`] did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Checkpoint {
    Booted,
    Locked,
    Aborted,
    KickedOff,
    Switched {
        from: Option<WorldId>,
        to: Option<WorldId>,
    },
    IrqEntered {
        world: WorldId,
        irq: u16,
    },
    /// A suspended world's request was parked until its slot.
    IrqDeferred {
        irq: u16,
    },
    HandlerReturned {
        world: WorldId,
    },
    Advanced {
        world: Option<WorldId>,
        cycles: u64,
    },
    Event {
        world: WorldId,
        event: GuestEvent,
    },
    WccReturned {
        world: WorldId,
        api: WccApi,
        result: Result<Option<[u8; MESSAGE_LEN]>, WccError>,
    },
    Faulted {
        world: WorldId,
        to: Option<WorldId>,
    },
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Timer {
    irq: u16,
    period: u64,
    next: u64,
}

#[derive(Debug, Clone, Default)]
struct GuestState {
    cursor: usize,
    compute_left: u64,
    handler_cost: u64,
    /// Remaining cycles of each nested handler, innermost last.
    handlers: Vec<u64>,
    waiting: Option<u16>,
    serviced: BTreeSet<u16>,
    ended: bool,
    marked_end: bool,
    /// Call parked in the gateway until the world runs again.
    pending_wcc: Option<(WccApi, Option<WorldId>)>,
    last_received: [u8; MESSAGE_LEN],
    scribble: u32,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    platform: PlatformState,
    kernel: Kernel,
    image: BootImage,
    programs: Vec<WorkloadProgram>,
    guests: Vec<GuestState>,
    cost: CostModel,
    status: RunStatus,
    now: u64,
    kickoff: Option<u64>,
    horizon: u64,
    timers: Vec<Timer>,
    stimuli: BTreeMap<u64, Vec<u16>>,
    raised_at: Vec<Option<u64>>,
    trace: Trace,
    account: CycleAccount,
    faults: Vec<FaultRecord>,
}

/// Builds each world's program from its configured workload.
pub fn workloads_for(config: &SystemConfig) -> Result<Vec<WorkloadProgram>, SimError> {
    config
        .worlds
        .iter()
        .map(|w| {
            builtin_workload(&w.workload.name, &w.workload.params)
                .map_err(|source| SimError::Guest { world: w.name.clone(), source })
        })
        .collect()
}

impl Simulator {
    /// `horizon` counts cycles from kick-off.
    pub fn new(config: SystemConfig, programs: Vec<WorkloadProgram>, horizon: u64) -> Result<Self, SimError> {
        config.validate()?;
        if programs.len() != config.worlds.len() {
            return Err(SimError::WorkloadCount { expected: config.worlds.len(), got: programs.len() });
        }
        let platform = PlatformState::new(config.platform.clone()).map_err(SimError::Platform)?;
        let image = BootImage::for_config(&config);
        let cost = config.cost_model;
        let guests = vec![GuestState::default(); programs.len()];
        Ok(Simulator {
            platform,
            kernel: Kernel::new(config),
            image,
            programs,
            guests,
            cost,
            status: RunStatus::Reset,
            now: 0,
            kickoff: None,
            horizon,
            timers: Vec::new(),
            stimuli: BTreeMap::new(),
            raised_at: vec![None; IRQ_LINES],
            trace: Trace::default(),
            account: CycleAccount::default(),
            faults: Vec::new(),
        })
    }

    pub fn from_config(config: SystemConfig, horizon: u64) -> Result<Self, SimError> {
        let programs = workloads_for(&config)?;
        Self::new(config, programs, horizon)
    }

    /// Replaces the boot image; only meaningful before the first step.
    pub fn set_image(&mut self, image: BootImage) {
        self.image = image;
    }

    pub fn image(&self) -> &BootImage {
        &self.image
    }

    pub fn platform(&self) -> &PlatformState {
        &self.platform
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn config(&self) -> &SystemConfig {
        self.kernel.config()
    }

    pub fn programs(&self) -> &[WorkloadProgram] {
        &self.programs
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn kickoff_cycle(&self) -> Option<u64> {
        self.kickoff
    }

    pub fn status(&self) -> &RunStatus {
        &self.status
    }

    pub fn account(&self) -> CycleAccount {
        self.account
    }

    pub fn faults(&self) -> &[FaultRecord] {
        &self.faults
    }

    pub fn cost(&self) -> CostModel {
        self.cost
    }

    /// Raises `irq` at absolute cycle `cycle` (now, if already past).
    pub fn raise_irq_at(&mut self, cycle: u64, irq: u16) {
        if cycle <= self.now {
            self.raise(irq, self.now);
        } else {
            self.stimuli.entry(cycle).or_default().push(irq);
        }
    }

    /// What a non-secure access would do right now, without performing it.
    pub fn probe(&self, addr: Address, kind: AccessKind) -> AccessResult {
        check_access(&self.platform, &Transaction::new(SecurityState::NonSecure, addr, kind))
    }

    fn horizon_end(&self) -> u64 {
        self.kickoff.unwrap_or(self.now) + self.horizon
    }

    pub fn is_done(&self) -> bool {
        !matches!(self.status, RunStatus::Reset | RunStatus::Booted | RunStatus::Running)
    }

    /// Runs to completion.
    pub fn run(&mut self) -> Result<&Trace, SimError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(&self.trace)
    }

    pub fn step(&mut self) -> Result<Checkpoint, SimError> {
        match self.status {
            RunStatus::Reset => self.boot(),
            RunStatus::Booted => {
                self.kernel.kick_off(&mut self.platform)?;
                self.kickoff = Some(self.now);
                self.trace.push(self.now, Some(0), TraceKind::KickOff);
                self.status = RunStatus::Running;
                Ok(Checkpoint::KickedOff)
            }
            RunStatus::Running => self.run_once(),
            _ => Ok(Checkpoint::Finished),
        }
    }

    fn boot(&mut self) -> Result<Checkpoint, SimError> {
        if self.kernel.secure_boot(&self.image)? == BootOutcome::Locked {
            self.trace.push(self.now, None, TraceKind::BootLocked);
            self.status = RunStatus::Locked;
            return Ok(Checkpoint::Locked);
        }
        if let Err(e) = self.kernel.partition(&mut self.platform) {
            let reason = e.to_string();
            self.trace.push(self.now, None, TraceKind::BootAborted { reason: reason.clone() });
            self.status = RunStatus::Aborted { reason };
            return Ok(Checkpoint::Aborted);
        }
        self.kernel.init(&mut self.platform)?;
        self.trace.push(self.now, None, TraceKind::Boot);
        self.advance(self.cost.boot_cycles(self.programs.len()), Spend::Kernel);
        self.status = RunStatus::Booted;
        Ok(Checkpoint::Booted)
    }

    fn all_finite_done(&self) -> bool {
        let mut finite = self.programs.iter().enumerate().filter(|(_, p)| p.is_finite()).peekable();
        finite.peek().is_some() && finite.all(|(w, _)| self.guests[w].marked_end || self.kernel.wcb(w).halted)
    }

    fn in_ns_handler(&self) -> bool {
        self.platform.cpu.security == SecurityState::NonSecure && self.platform.cpu.mode == Mode::Handler
    }

    fn run_once(&mut self) -> Result<Checkpoint, SimError> {
        if let Some(cp) = self.finish_parked_wcc() {
            return Ok(cp);
        }
        if let Some(p) = arbitrate(&self.platform.cpu, &self.platform.nvic) {
            return self.take_exception(p);
        }
        if self.now >= self.horizon_end() || self.all_finite_done() {
            self.status = RunStatus::Finished;
            return Ok(Checkpoint::Finished);
        }
        let budget = self.budget();
        let Some(w) = self.kernel.running() else {
            self.advance(budget, Spend::Idle);
            return Ok(Checkpoint::Advanced { world: None, cycles: budget });
        };

        if self.in_ns_handler() {
            let left = self.guests[w].handlers.last().copied().unwrap_or(0);
            if left == 0 {
                self.guests[w].handlers.pop();
                self.platform.cpu.exception_return(&self.platform.memory).map_err(KernelError::from)?;
                return Ok(Checkpoint::HandlerReturned { world: w });
            }
            let d = left.min(budget);
            if let Some(top) = self.guests[w].handlers.last_mut() {
                *top -= d;
            }
            self.advance(d, Spend::Guest);
            return Ok(Checkpoint::Advanced { world: Some(w), cycles: d });
        }

        let g = &mut self.guests[w];
        if let Some(irq) = g.waiting {
            if g.serviced.remove(&irq) {
                g.waiting = None;
            } else {
                self.advance(budget, Spend::Idle);
                return Ok(Checkpoint::Advanced { world: Some(w), cycles: budget });
            }
        }
        if g.compute_left > 0 {
            let d = g.compute_left.min(budget);
            g.compute_left -= d;
            self.advance(d, Spend::Guest);
            return Ok(Checkpoint::Advanced { world: Some(w), cycles: d });
        }
        if g.ended {
            self.advance(budget, Spend::Idle);
            return Ok(Checkpoint::Advanced { world: Some(w), cycles: budget });
        }
        match self.programs[w].step(g.cursor, self.kernel.tick_reload()) {
            Ok((event, next)) => {
                self.guests[w].cursor = next;
                self.execute(w, event)
            }
            Err(GuestError::EndOfProgram) => {
                self.guests[w].ended = true;
                Ok(Checkpoint::Advanced { world: Some(w), cycles: 0 })
            }
            Err(source) => Err(SimError::Guest { world: self.config().worlds[w].name.clone(), source }),
        }
    }

    /// Cycles until the next thing that can change the picture.
    fn budget(&self) -> u64 {
        let mut d = self.horizon_end().saturating_sub(self.now).max(1);
        if self.platform.systick.enabled {
            d = d.min(self.platform.systick.cycles_to_fire());
        }
        for t in &self.timers {
            d = d.min(t.next - self.now);
        }
        if let Some((&c, _)) = self.stimuli.first_key_value() {
            d = d.min(c - self.now);
        }
        d.max(1)
    }

    fn raise(&mut self, irq: u16, cycle: u64) {
        let world = self.kernel.owner_of_irq(irq);
        self.trace.push(cycle, world, TraceKind::IrqRaised { irq });
        // requests coalesce until serviced; latency counts from the first
        self.raised_at[irq as usize].get_or_insert(cycle);
        self.platform.nvic.raise(irq);
    }

    /// Moves the clock by `d`, raising every timer and stimulus that falls
    /// inside the window.
    fn advance(&mut self, d: u64, spend: Spend) {
        if d == 0 {
            return;
        }
        let end = self.now + d;
        let mut fired: Vec<(u64, u16)> = Vec::new();
        for t in &mut self.timers {
            while t.next <= end {
                fired.push((t.next, t.irq));
                t.next += t.period;
            }
        }
        while let Some(entry) = self.stimuli.first_entry() {
            if *entry.key() > end {
                break;
            }
            let (c, irqs) = entry.remove_entry();
            fired.extend(irqs.into_iter().map(|i| (c, i)));
        }
        fired.sort();
        for (c, irq) in fired {
            self.raise(irq, c);
        }
        if self.platform.systick.advance(d) > 0 {
            self.platform.nvic.systick_pending = true;
        }
        self.now = end;
        let slot = match spend {
            Spend::Guest => &mut self.account.guest,
            Spend::Kernel => &mut self.account.kernel,
            Spend::IrqEntry => &mut self.account.irq_entry,
            Spend::Idle => &mut self.account.idle,
        };
        *slot += d;
    }

    /// Charges a world switch as one atomic block between trace marks.
    fn charge_switch(&mut self, from: Option<WorldId>, to: Option<WorldId>, extra: u64) {
        self.trace.push(self.now, from, TraceKind::SwitchBegin);
        self.advance(self.cost.world_switch_cycles + extra, Spend::Kernel);
        self.trace.push(self.now, to, TraceKind::SwitchEnd { to });
    }

    fn take_exception(&mut self, p: PendingException) -> Result<Checkpoint, SimError> {
        let from = self.kernel.running();
        let platform = &mut self.platform;
        arbitrate_and_enter_exception(&mut platform.cpu, &mut platform.nvic, &mut platform.memory);
        match p.source {
            ExceptionSource::SysTick => {
                let out = self.kernel.ws_tick(&mut self.platform)?;
                self.charge_switch(out.from, out.to, 0);
                Ok(Checkpoint::Switched { from: out.from, to: out.to })
            }
            ExceptionSource::Irq(irq) if p.target == SecurityState::NonSecure => {
                let w = from.expect("non-secure lines are live only while their world runs");
                self.advance(self.cost.irq_entry_cycles, Spend::IrqEntry);
                let raised = self.raised_at[irq as usize].take().unwrap_or(self.now - self.cost.irq_entry_cycles);
                self.trace.push(self.now, Some(w), TraceKind::IrqEntered { irq, raised });
                let g = &mut self.guests[w];
                g.handlers.push(g.handler_cost);
                g.serviced.insert(irq);
                let tag = self.next_tag(w);
                let regs = &mut self.platform.cpu.regs;
                regs[..4].fill(tag);
                regs[12] = tag;
                Ok(Checkpoint::IrqEntered { world: w, irq })
            }
            ExceptionSource::Irq(irq) => {
                self.advance(self.cost.irq_entry_cycles, Spend::IrqEntry);
                match self.kernel.preemptive_route(&mut self.platform, irq)? {
                    SchedulingAction::SwitchTo(to) => {
                        self.charge_switch(from, Some(to), 0);
                        Ok(Checkpoint::Switched { from, to: Some(to) })
                    }
                    SchedulingAction::Deferred => {
                        self.platform.cpu.exception_return(&self.platform.memory).map_err(KernelError::from)?;
                        Ok(Checkpoint::IrqDeferred { irq })
                    }
                }
            }
            ExceptionSource::SecureFault => unreachable!("faults are raised synchronously"),
        }
    }

    fn next_tag(&mut self, w: WorldId) -> u32 {
        let g = &mut self.guests[w];
        g.scribble = g.scribble.wrapping_add(1);
        0xA000_0000 | ((w as u32 + 1) & 0xf) << 20 | (g.scribble & 0xffff)
    }

    /// Register values a guest leaves behind. The world index is encoded
    /// so leaks into other worlds are recognisable.
    pub fn is_tag_of(value: u32, world: WorldId) -> bool {
        value & 0xfff0_0000 == 0xA000_0000 | ((world as u32 + 1) & 0xf) << 20
    }

    fn fault(
        &mut self,
        w: WorldId,
        outcome: AccessOutcome,
        cause: String,
        addr: Option<Address>,
    ) -> Result<Checkpoint, SimError> {
        self.trace.push(self.now, Some(w), TraceKind::Fault { cause: cause.clone(), addr: addr.map(|a| a.0) });
        self.faults.push(FaultRecord { cycle: self.now, world: w, outcome, cause, addr });
        let key = self.platform.nvic.key(SecurityState::Secure, 0, ExceptionSource::SecureFault);
        let platform = &mut self.platform;
        platform.cpu.enter_exception(SecurityState::Secure, ExceptionSource::SecureFault, key, &mut platform.memory);
        let out = self.kernel.fault_halt(&mut self.platform)?;
        self.timers.retain(|t| self.kernel.owner_of_irq(t.irq) != Some(w));
        self.charge_switch(Some(w), out.to, 0);
        Ok(Checkpoint::Faulted { world: w, to: out.to })
    }

    fn execute(&mut self, w: WorldId, event: GuestEvent) -> Result<Checkpoint, SimError> {
        match &event {
            GuestEvent::Compute(c) => {
                let tag = self.next_tag(w);
                self.platform.cpu.regs[..13].fill(tag);
                self.guests[w].compute_left = *c;
            }
            GuestEvent::Read(addr) | GuestEvent::Write(addr, _) => {
                let kind = match event {
                    GuestEvent::Read(_) => AccessKind::Read,
                    _ => AccessKind::Write,
                };
                let result = self.probe(*addr, kind);
                if !result.allowed() {
                    return self.fault(w, result.outcome, result.cause, Some(*addr));
                }
                match event {
                    GuestEvent::Write(a, v) => self.platform.memory.write(a.0, v),
                    _ => self.platform.cpu.regs[0] = self.platform.memory.read(addr.0),
                }
            }
            GuestEvent::ConfigureTimer { period, irq } => {
                if !self.config().worlds[w].owns_irq(*irq) {
                    return self.fault(w, AccessOutcome::SecurityFault, format!("irq {irq} not owned"), None);
                }
                self.timers.retain(|t| t.irq != *irq);
                self.timers.push(Timer { irq: *irq, period: *period, next: self.now + period });
            }
            GuestEvent::WaitIrq(irq) => {
                let g = &mut self.guests[w];
                if !g.serviced.remove(irq) {
                    g.waiting = Some(*irq);
                }
            }
            GuestEvent::IrqHandlerBody(c) => self.guests[w].handler_cost = *c,
            GuestEvent::MarkStart => self.trace.push(self.now, Some(w), TraceKind::MarkStart),
            GuestEvent::MarkEnd => {
                let native = self.programs[w].native_cycles().unwrap_or(0);
                self.trace.push(self.now, Some(w), TraceKind::MarkEnd { native });
                self.guests[w].marked_end = true;
            }
            GuestEvent::WccCall { api, peer, payload } => {
                let peer = peer.as_ref().map(|name| self.config().world_index(name).unwrap_or(usize::MAX));
                return self.wcc(w, *api, peer, *payload);
            }
            GuestEvent::LoopForever => unreachable!("stepping turns LoopForever into Compute"),
        }
        Ok(Checkpoint::Event { world: w, event })
    }

    fn wcc(
        &mut self,
        w: WorldId,
        api: WccApi,
        peer: Option<WorldId>,
        payload: Option<[u8; MESSAGE_LEN]>,
    ) -> Result<Checkpoint, SimError> {
        let cpu = &mut self.platform.cpu;
        if api.is_send() {
            let bytes = payload.unwrap_or(self.guests[w].last_received);
            cpu.regs[4..7].copy_from_slice(&payload_to_words(&bytes));
        }
        cpu.regs[14] = cpu.regs[15] | 1;
        let gateway = self.kernel.gateway().base;
        self.platform.transition(Transition::SgEntry, gateway).map_err(KernelError::from)?;
        let traced_peer = peer.filter(|&p| p < self.programs.len());
        match self.kernel.wcc_call(&mut self.platform, api, peer)? {
            WccOutcome::Returned(result) => {
                self.advance(self.cost.wcc_gateway_cycles, Spend::Kernel);
                if let Ok(Some(p)) = result {
                    self.guests[w].last_received = p;
                }
                self.trace.push(
                    self.now,
                    Some(w),
                    TraceKind::Wcc { api, peer: traced_peer, result: Some(result.map(|_| ())) },
                );
                Ok(Checkpoint::WccReturned { world: w, api, result })
            }
            WccOutcome::Blocked(out) => {
                self.guests[w].pending_wcc = Some((api, traced_peer));
                self.trace.push(self.now, Some(w), TraceKind::Wcc { api, peer: traced_peer, result: None });
                self.charge_switch(Some(w), out.to, self.cost.wcc_gateway_cycles);
                Ok(Checkpoint::Switched { from: Some(w), to: out.to })
            }
        }
    }

    /// A world that blocked in the gateway is back: its call returns with
    /// the message registers the kernel filled in.
    fn finish_parked_wcc(&mut self) -> Option<Checkpoint> {
        let w = self.kernel.running()?;
        if self.platform.cpu.security != SecurityState::NonSecure || self.platform.cpu.mode != Mode::Thread {
            return None;
        }
        let (api, peer) = self.guests[w].pending_wcc.take()?;
        let regs = &self.platform.cpu.regs;
        let payload = words_to_payload([regs[4], regs[5], regs[6]]);
        self.guests[w].last_received = payload;
        self.trace.push(self.now, Some(w), TraceKind::Wcc { api, peer, result: Some(Ok(())) });
        Some(Checkpoint::WccReturned { world: w, api, result: Ok(Some(payload)) })
    }
}
