//! Worlds communication channel: fixed 12-byte messages through the
//! non-secure-callable gateway, carried in r4-r6.

use super::scheduler::{Kernel, KernelError, SwitchOutcome};
use super::wcb::{payload_to_words, words_to_payload, BlockedOn, Message, ResumePoint, WorldId, MESSAGE_LEN};
use crate::hw::{Address, PlatformState, SecurityState, Transition};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WccApi {
    SendBlocking,
    SendNonblocking,
    RecvBlocking,
    RecvNonblocking,
}

impl WccApi {
    pub fn is_send(self) -> bool {
        matches!(self, WccApi::SendBlocking | WccApi::SendNonblocking)
    }
}

impl fmt::Display for WccApi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WccApi::SendBlocking => "send_blocking",
            WccApi::SendNonblocking => "send_nonblocking",
            WccApi::RecvBlocking => "recv_blocking",
            WccApi::RecvNonblocking => "recv_nonblocking",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WccError {
    #[error("inbox full")]
    InboxFull,
    #[error("inbox empty")]
    Empty,
    #[error("bad peer")]
    BadPeer,
    #[error("call did not enter through the gateway")]
    GatewayFault,
    #[error("deadlock")]
    Deadlock,
}

/// What the kernel did with a call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WccOutcome {
    /// Returned to the caller. Receives carry the payload.
    Returned(Result<Option<[u8; MESSAGE_LEN]>, WccError>),
    /// The caller blocked; the core went elsewhere.
    Blocked(SwitchOutcome),
}

impl Kernel {
    fn in_gateway(&self, platform: &PlatformState) -> bool {
        platform.cpu.security == SecurityState::Secure && self.gateway().contains(Address(platform.cpu.regs[15]))
    }

    /// Whether `from` is (transitively) waiting on a send to `target`.
    fn waits_on(&self, mut from: WorldId, target: WorldId) -> bool {
        for _ in 0..self.wcbs.len() {
            match self.wcbs[from].blocked_on {
                Some(BlockedOn::SendTo(next)) if next == target => return true,
                Some(BlockedOn::SendTo(next)) => from = next,
                _ => return false,
            }
        }
        false
    }

    /// Hands a message straight to a world parked in the gateway.
    fn deliver_to_blocked(&mut self, to: WorldId, msg: &Message) {
        let words = payload_to_words(&msg.payload);
        let wcb = &mut self.wcbs[to];
        wcb.general[..3].copy_from_slice(&words);
        wcb.blocked_on = None;
    }

    /// Scrubs every register but r4-r6 and returns to the caller with BXNS.
    fn gateway_return(&self, platform: &mut PlatformState, message: Option<[u32; 3]>) -> Result<(), KernelError> {
        let cpu = &mut platform.cpu;
        let ret = cpu.regs[14];
        if let Some(words) = message {
            cpu.regs[4..7].copy_from_slice(&words);
        }
        cpu.regs[..4].fill(0);
        cpu.regs[7..13].fill(0);
        platform.transition(Transition::BxnsReturn, Address(ret & !1))?;
        Ok(())
    }

    /// Parks the caller in the gateway and switches to `to` (or the next
    /// runnable world).
    fn block(
        &mut self,
        platform: &mut PlatformState,
        caller: WorldId,
        on: BlockedOn,
        to: Option<WorldId>,
    ) -> Result<SwitchOutcome, KernelError> {
        let cpu = &mut platform.cpu;
        let ret = cpu.regs[14] & !1;
        cpu.regs[..4].fill(0);
        cpu.regs[7..13].fill(0);
        if on == BlockedOn::Recv {
            cpu.regs[4..7].fill(0);
        }
        self.wcbs[caller].blocked_on = Some(on);
        let to = to.filter(|&t| self.wcbs[t].runnable());
        self.forced_switch(platform, ResumePoint::Gateway { ret }, to)
    }

    /// Services a call made by the running world. The caller has already
    /// entered the gateway with SG; sends carry their payload in r4-r6.
    pub fn wcc_call(
        &mut self,
        platform: &mut PlatformState,
        api: WccApi,
        peer: Option<WorldId>,
    ) -> Result<WccOutcome, KernelError> {
        if self.phase() == super::scheduler::BootPhase::Locked {
            return Err(KernelError::Locked);
        }
        let caller = match self.running() {
            Some(c) if self.in_gateway(platform) => c,
            _ => return Ok(WccOutcome::Returned(Err(WccError::GatewayFault))),
        };
        let fail = |k: &Self, platform: &mut PlatformState, e: WccError| {
            k.gateway_return(platform, None).map(|_| WccOutcome::Returned(Err(e)))
        };

        if api.is_send() {
            let Some(peer) = peer.filter(|&p| p < self.wcbs.len() && p != caller && !self.wcbs[p].halted) else {
                let e = if peer == Some(caller) && api == WccApi::SendBlocking {
                    WccError::Deadlock
                } else {
                    WccError::BadPeer
                };
                return fail(self, platform, e);
            };
            if api == WccApi::SendBlocking && self.waits_on(peer, caller) {
                return fail(self, platform, WccError::Deadlock);
            }
            let words = [platform.cpu.regs[4], platform.cpu.regs[5], platform.cpu.regs[6]];
            let msg = Message { payload: words_to_payload(words), sender: caller, receiver: peer };
            let direct = match self.wcbs[peer].blocked_on {
                Some(BlockedOn::Recv) => true,
                // a response to a blocking send goes straight to the sender
                Some(BlockedOn::SendTo(to)) => to == caller && api == WccApi::SendNonblocking,
                None => false,
            };
            if direct {
                self.deliver_to_blocked(peer, &msg);
            } else if self.wcbs[peer].inbox.is_none() {
                self.wcbs[peer].inbox = Some(msg);
            } else {
                return fail(self, platform, WccError::InboxFull);
            }
            if api == WccApi::SendNonblocking {
                self.gateway_return(platform, None)?;
                return Ok(WccOutcome::Returned(Ok(None)));
            }
            let out = self.block(platform, caller, BlockedOn::SendTo(peer), Some(peer))?;
            return Ok(WccOutcome::Blocked(out));
        }

        if let Some(msg) = self.wcbs[caller].inbox.take() {
            self.gateway_return(platform, Some(payload_to_words(&msg.payload)))?;
            return Ok(WccOutcome::Returned(Ok(Some(msg.payload))));
        }
        match api {
            WccApi::RecvNonblocking => {
                self.gateway_return(platform, Some([0; 3]))?;
                Ok(WccOutcome::Returned(Err(WccError::Empty)))
            }
            _ => {
                let out = self.block(platform, caller, BlockedOn::Recv, None)?;
                Ok(WccOutcome::Blocked(out))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::scheduler::tests::{booted, tick};

    /// The running world enters the gateway with `payload` in r4-r6.
    fn call(
        k: &mut Kernel,
        p: &mut PlatformState,
        api: WccApi,
        peer: Option<WorldId>,
        payload: [u8; 12],
    ) -> WccOutcome {
        p.cpu.regs.iter_mut().take(13).for_each(|r| *r = 0xdead_beef);
        p.cpu.regs[4..7].copy_from_slice(&payload_to_words(&payload));
        p.cpu.regs[14] = p.cpu.regs[15] | 1;
        p.transition(Transition::SgEntry, k.gateway().base).unwrap();
        k.wcc_call(p, api, peer).unwrap()
    }

    const MSG: [u8; 12] = *b"hello world!";

    fn scrubbed(p: &PlatformState) -> bool {
        p.cpu.regs[..4].iter().chain(&p.cpu.regs[7..13]).all(|&r| r == 0)
    }

    #[test]
    fn nonblocking_send_then_receive() {
        let (mut k, mut p) = booted(2);
        assert_eq!(call(&mut k, &mut p, WccApi::SendNonblocking, Some(1), MSG), WccOutcome::Returned(Ok(None)));
        assert!(scrubbed(&p));
        assert_eq!(p.cpu.security, SecurityState::NonSecure);
        tick(&mut k, &mut p);
        assert_eq!(call(&mut k, &mut p, WccApi::RecvNonblocking, None, [0; 12]), WccOutcome::Returned(Ok(Some(MSG))));
        assert_eq!(words_to_payload([p.cpu.regs[4], p.cpu.regs[5], p.cpu.regs[6]]), MSG);
        assert!(scrubbed(&p));
        // delivered once
        assert_eq!(
            call(&mut k, &mut p, WccApi::RecvNonblocking, None, [0; 12]),
            WccOutcome::Returned(Err(WccError::Empty))
        );
        assert_eq!(&p.cpu.regs[4..7], &[0, 0, 0]);
    }

    #[test]
    fn full_inbox_is_reported() {
        let (mut k, mut p) = booted(2);
        call(&mut k, &mut p, WccApi::SendNonblocking, Some(1), MSG);
        assert_eq!(
            call(&mut k, &mut p, WccApi::SendNonblocking, Some(1), [7; 12]),
            WccOutcome::Returned(Err(WccError::InboxFull))
        );
        assert_eq!(k.wcb(1).inbox.unwrap().payload, MSG);
    }

    #[test]
    fn bad_peers() {
        let (mut k, mut p) = booted(2);
        for (api, peer, e) in [
            (WccApi::SendNonblocking, Some(0), WccError::BadPeer),
            (WccApi::SendNonblocking, Some(5), WccError::BadPeer),
            (WccApi::SendBlocking, Some(0), WccError::Deadlock),
        ] {
            assert_eq!(call(&mut k, &mut p, api, peer, MSG), WccOutcome::Returned(Err(e)));
        }
        k.wcbs[1].halted = true;
        assert_eq!(
            call(&mut k, &mut p, WccApi::SendNonblocking, Some(1), MSG),
            WccOutcome::Returned(Err(WccError::BadPeer))
        );
    }

    #[test]
    fn calls_must_come_through_the_gateway() {
        let (mut k, mut p) = booted(2);
        assert_eq!(
            k.wcc_call(&mut p, WccApi::SendNonblocking, Some(1)).unwrap(),
            WccOutcome::Returned(Err(WccError::GatewayFault))
        );
    }

    #[test]
    fn blocking_send_hands_over_to_the_callee() {
        let (mut k, mut p) = booted(3);
        let out = call(&mut k, &mut p, WccApi::SendBlocking, Some(2), MSG);
        assert_eq!(out, WccOutcome::Blocked(SwitchOutcome { from: Some(0), to: Some(2) }));
        assert_eq!(k.running(), Some(2));
        assert_eq!(k.wcb(0).blocked_on, Some(BlockedOn::SendTo(2)));
        // callee answers; the reply lands straight in the caller's registers
        call(&mut k, &mut p, WccApi::RecvNonblocking, None, [0; 12]);
        let reply = *b"reply bytes.";
        assert_eq!(call(&mut k, &mut p, WccApi::SendNonblocking, Some(0), reply), WccOutcome::Returned(Ok(None)));
        assert!(k.wcb(0).runnable());
        assert_eq!(words_to_payload(k.wcb(0).general[..3].try_into().unwrap()), reply);
        // the handoff left the round-robin anchor at the caller
        assert_eq!(tick(&mut k, &mut p).to, Some(1));
    }

    #[test]
    fn blocking_receive_waits_for_a_sender() {
        let (mut k, mut p) = booted(2);
        let out = call(&mut k, &mut p, WccApi::RecvBlocking, None, [0; 12]);
        assert_eq!(out, WccOutcome::Blocked(SwitchOutcome { from: Some(0), to: Some(1) }));
        call(&mut k, &mut p, WccApi::SendNonblocking, Some(0), MSG);
        assert!(k.wcb(0).runnable());
        let out = tick(&mut k, &mut p);
        assert_eq!(out.to, Some(0));
        assert_eq!(words_to_payload([p.cpu.regs[4], p.cpu.regs[5], p.cpu.regs[6]]), MSG);
        assert!(scrubbed(&p));
        assert_eq!(p.cpu.security, SecurityState::NonSecure);
    }

    #[test]
    fn mutual_blocking_is_a_deadlock() {
        let (mut k, mut p) = booted(2);
        call(&mut k, &mut p, WccApi::SendBlocking, Some(1), MSG);
        assert_eq!(k.running(), Some(1));
        assert_eq!(
            call(&mut k, &mut p, WccApi::SendBlocking, Some(0), MSG),
            WccOutcome::Returned(Err(WccError::Deadlock))
        );
        assert_eq!(k.running(), Some(1));
    }

    #[test]
    fn transitive_cycle_is_a_deadlock() {
        let (mut k, mut p) = booted(3);
        call(&mut k, &mut p, WccApi::SendBlocking, Some(1), MSG);
        call(&mut k, &mut p, WccApi::SendBlocking, Some(2), MSG);
        assert_eq!(k.running(), Some(2));
        assert_eq!(
            call(&mut k, &mut p, WccApi::SendBlocking, Some(0), MSG),
            WccOutcome::Returned(Err(WccError::Deadlock))
        );
    }
}
