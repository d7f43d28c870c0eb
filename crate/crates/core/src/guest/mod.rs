//! Scripted guest workloads. A guest is a list of semantic events; the
//! simulator executes them on behalf of a world.

mod builtins;
mod script;

pub use builtins::{builtin_workload, BUILTIN_NAMES};
pub use script::parse_script;

use crate::hw::Address;
use crate::kernel::{WccApi, MESSAGE_LEN};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuestEvent {
    Compute(u64),
    Read(Address),
    Write(Address, u32),
    /// Starts a periodic timer raising `irq` every `period` cycles.
    ConfigureTimer {
        period: u64,
        irq: u16,
    },
    /// Sleeps until `irq` has been serviced.
    WaitIrq(u16),
    /// Cost of this world's interrupt handlers from here on.
    IrqHandlerBody(u64),
    /// A send without a payload echoes the last message received.
    WccCall {
        api: WccApi,
        peer: Option<String>,
        payload: Option<[u8; MESSAGE_LEN]>,
    },
    MarkStart,
    MarkEnd,
    LoopForever,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GuestError {
    #[error("end of program")]
    EndOfProgram,
    #[error("unknown workload {0}")]
    UnknownWorkload(String),
    #[error("workload {workload}: parameter {param}: {message}")]
    BadParam { workload: String, param: String, message: String },
    #[error("line {line}: {message}")]
    Script { line: usize, message: String },
    #[error("invalid program: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadProgram {
    pub name: String,
    pub events: Vec<GuestEvent>,
    /// Compute cycles ahead of MarkStart.
    pub warmup_cycles: u64,
    /// Stepping past the last event continues here.
    pub loop_from: Option<usize>,
}

impl WorkloadProgram {
    pub fn new(name: impl Into<String>, events: Vec<GuestEvent>, loop_from: Option<usize>) -> Result<Self, GuestError> {
        let name = name.into();
        for e in &events {
            match e {
                GuestEvent::Compute(0) | GuestEvent::ConfigureTimer { period: 0, .. } => {
                    return Err(GuestError::Invalid(format!("{name}: zero-length {e:?}")))
                }
                GuestEvent::WccCall { api, payload: Some(_), .. } if !api.is_send() => {
                    return Err(GuestError::Invalid(format!("{name}: {api} takes no payload")))
                }
                GuestEvent::WccCall { api, peer: None, .. } if api.is_send() => {
                    return Err(GuestError::Invalid(format!("{name}: {api} needs a peer")))
                }
                _ => {}
            }
        }
        let start = events.iter().position(|e| *e == GuestEvent::MarkStart);
        let end = events.iter().position(|e| *e == GuestEvent::MarkEnd);
        match (start, end) {
            (Some(s), Some(e)) if s > e => {
                return Err(GuestError::Invalid(format!("{name}: mark_end before mark_start")))
            }
            (None, Some(_)) => return Err(GuestError::Invalid(format!("{name}: mark_end without mark_start"))),
            _ => {}
        }
        if loop_from.is_some_and(|l| l >= events.len()) {
            return Err(GuestError::Invalid(format!("{name}: loop point past the end")));
        }
        let warmup_cycles = events[..start.unwrap_or(0)]
            .iter()
            .map(|e| match e {
                GuestEvent::Compute(c) => *c,
                _ => 0,
            })
            .sum();
        Ok(WorkloadProgram { name, events, warmup_cycles, loop_from })
    }

    /// Event at `cursor` and the cursor after it. `LoopForever` yields
    /// quantum-sized computes without moving.
    pub fn step(&self, cursor: usize, quantum: u64) -> Result<(GuestEvent, usize), GuestError> {
        let event = self.events.get(cursor).ok_or(GuestError::EndOfProgram)?;
        if *event == GuestEvent::LoopForever {
            return Ok((GuestEvent::Compute(quantum.max(1)), cursor));
        }
        let mut next = cursor + 1;
        if next == self.events.len() {
            if let Some(l) = self.loop_from {
                next = l;
            }
        }
        Ok((event.clone(), next))
    }

    /// Compute cycles between the marks: the native run time.
    pub fn native_cycles(&self) -> Option<u64> {
        let s = self.events.iter().position(|e| *e == GuestEvent::MarkStart)?;
        let e = self.events.iter().position(|e| *e == GuestEvent::MarkEnd)?;
        Some(
            self.events[s..e]
                .iter()
                .map(|e| match e {
                    GuestEvent::Compute(c) => *c,
                    _ => 0,
                })
                .sum(),
        )
    }

    /// Finite workloads end with a measurement.
    pub fn is_finite(&self) -> bool {
        self.events.contains(&GuestEvent::MarkEnd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_is_lookup() {
        let p = WorkloadProgram::new("p", vec![GuestEvent::Compute(10), GuestEvent::MarkStart], None).unwrap();
        assert_eq!(p.step(0, 5).unwrap(), (GuestEvent::Compute(10), 1));
        assert_eq!(p.step(1, 5).unwrap(), (GuestEvent::MarkStart, 2));
        assert_eq!(p.step(2, 5), Err(GuestError::EndOfProgram));
    }

    #[test]
    fn loop_forever_never_ends() {
        let p = WorkloadProgram::new("p", vec![GuestEvent::LoopForever], None).unwrap();
        let mut c = 0;
        for _ in 0..100 {
            let (e, n) = p.step(c, 20_000).unwrap();
            assert_eq!(e, GuestEvent::Compute(20_000));
            c = n;
        }
    }

    #[test]
    fn loop_point_wraps() {
        let p = WorkloadProgram::new(
            "p",
            vec![GuestEvent::Compute(1), GuestEvent::WaitIrq(3), GuestEvent::Compute(2)],
            Some(1),
        )
        .unwrap();
        assert_eq!(p.step(2, 1).unwrap().1, 1);
    }

    #[test]
    fn marks_and_native_cycles() {
        let p = WorkloadProgram::new(
            "b",
            vec![
                GuestEvent::Compute(7),
                GuestEvent::MarkStart,
                GuestEvent::Compute(100),
                GuestEvent::Compute(5),
                GuestEvent::MarkEnd,
            ],
            None,
        )
        .unwrap();
        assert_eq!(p.warmup_cycles, 7);
        assert_eq!(p.native_cycles(), Some(105));
        assert!(p.is_finite());
        assert!(WorkloadProgram::new("b", vec![GuestEvent::MarkEnd, GuestEvent::MarkStart], None).is_err());
        assert!(WorkloadProgram::new("b", vec![GuestEvent::Compute(0)], None).is_err());
    }
}
