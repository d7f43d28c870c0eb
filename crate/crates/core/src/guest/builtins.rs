use super::{parse_script, GuestError, GuestEvent, WorkloadProgram};
use crate::hw::{parse_hex_u32, Address};
use crate::kernel::WccApi;
use serde_json::{Map, Value};

pub const BUILTIN_NAMES: &[&str] =
    &["busyloop", "bench", "timer_blinker", "console", "echo_net", "rtos_servo", "script"];

struct Params<'a> {
    workload: &'a str,
    map: &'a Map<String, Value>,
}

impl Params<'_> {
    fn bad(&self, param: &str, message: impl Into<String>) -> GuestError {
        GuestError::BadParam { workload: self.workload.into(), param: param.into(), message: message.into() }
    }

    fn u64(&self, key: &str, default: Option<u64>) -> Result<u64, GuestError> {
        match self.map.get(key) {
            None => default.ok_or_else(|| self.bad(key, "required")),
            Some(v) => v.as_u64().ok_or_else(|| self.bad(key, "expected a non-negative integer")),
        }
    }

    fn irq(&self, key: &str) -> Result<u16, GuestError> {
        u16::try_from(self.u64(key, None)?).map_err(|_| self.bad(key, "out of range"))
    }

    fn str(&self, key: &str) -> Result<Option<&str>, GuestError> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.as_str().map(Some).ok_or_else(|| self.bad(key, "expected a string")),
        }
    }

    fn address(&self, key: &str) -> Result<Option<Address>, GuestError> {
        self.str(key)?
            .map(|s| parse_hex_u32(s).map(Address).ok_or_else(|| self.bad(key, "expected a 0x-prefixed address")))
            .transpose()
    }

    fn reject_unknown(&self, known: &[&str]) -> Result<(), GuestError> {
        match self.map.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(self.bad(k, "unknown parameter")),
            None => Ok(()),
        }
    }
}

fn compute(c: u64) -> Option<GuestEvent> {
    (c > 0).then_some(GuestEvent::Compute(c))
}

fn wcc(api: WccApi, peer: Option<&str>, payload: Option<[u8; 12]>) -> GuestEvent {
    GuestEvent::WccCall { api, peer: peer.map(str::to_string), payload }
}

/// Looped program: `prefix` runs once, `body` forever.
fn looped(name: &str, prefix: Vec<GuestEvent>, body: Vec<GuestEvent>) -> Result<WorkloadProgram, GuestError> {
    let from = prefix.len();
    let mut events = prefix;
    events.extend(body);
    WorkloadProgram::new(name, events, Some(from))
}

/// Builds a named workload. Cycle parameters are CPU cycles.
///
/// * `busyloop` - spins forever.
/// * `bench {cycles, warmup=0}` - MarkStart, compute, MarkEnd.
/// * `timer_blinker {period, irq, handler=100, offset=0, work=0, led?}` -
///   arms a periodic timer and toggles on every interrupt.
/// * `console {peer, work=2000, servo?}` - blocking requests to `peer`,
///   optional non-blocking commands to `servo`.
/// * `echo_net {peer, work=1500}` - receives and echoes back to `peer`.
/// * `rtos_servo {work=4000, pwm?}` - polls its inbox and drives the PWM.
/// * `script {text}` - the line format of [`parse_script`].
pub fn builtin_workload(name: &str, params: &Map<String, Value>) -> Result<WorkloadProgram, GuestError> {
    let p = Params { workload: name, map: params };
    match name {
        "busyloop" => {
            p.reject_unknown(&[])?;
            WorkloadProgram::new(name, vec![GuestEvent::LoopForever], None)
        }
        "bench" => {
            p.reject_unknown(&["cycles", "warmup"])?;
            let cycles = p.u64("cycles", None)?;
            if cycles == 0 {
                return Err(p.bad("cycles", "must be > 0"));
            }
            let mut events: Vec<_> = compute(p.u64("warmup", Some(0))?).into_iter().collect();
            events.extend([GuestEvent::MarkStart, GuestEvent::Compute(cycles), GuestEvent::MarkEnd]);
            WorkloadProgram::new(name, events, None)
        }
        "timer_blinker" => {
            p.reject_unknown(&["period", "irq", "handler", "offset", "work", "led"])?;
            let period = p.u64("period", None)?;
            let irq = p.irq("irq")?;
            let mut prefix: Vec<_> = compute(p.u64("offset", Some(0))?).into_iter().collect();
            prefix.push(GuestEvent::IrqHandlerBody(p.u64("handler", Some(100))?));
            prefix.push(GuestEvent::ConfigureTimer { period, irq });
            let mut body = vec![GuestEvent::WaitIrq(irq)];
            body.extend(compute(p.u64("work", Some(0))?));
            if let Some(led) = p.address("led")? {
                body.push(GuestEvent::Write(led, 1));
            }
            looped(name, prefix, body)
        }
        "console" => {
            p.reject_unknown(&["peer", "work", "servo"])?;
            let peer = p.str("peer")?.ok_or_else(|| p.bad("peer", "required"))?;
            let work = p.u64("work", Some(2000))?;
            let mut body: Vec<_> = compute(work).into_iter().collect();
            body.push(wcc(WccApi::SendBlocking, Some(peer), Some(*b"console:ping")));
            if let Some(servo) = p.str("servo")? {
                body.extend(compute(work));
                body.push(wcc(WccApi::SendNonblocking, Some(servo), Some(*b"servo:angle+")));
            }
            looped(name, vec![], body)
        }
        "echo_net" => {
            p.reject_unknown(&["peer", "work"])?;
            let peer = p.str("peer")?.ok_or_else(|| p.bad("peer", "required"))?;
            let mut body = vec![wcc(WccApi::RecvBlocking, None, None)];
            body.extend(compute(p.u64("work", Some(1500))?));
            body.push(wcc(WccApi::SendNonblocking, Some(peer), None));
            looped(name, vec![], body)
        }
        "rtos_servo" => {
            p.reject_unknown(&["work", "pwm"])?;
            let mut body = vec![wcc(WccApi::RecvNonblocking, None, None)];
            body.extend(compute(p.u64("work", Some(4000))?));
            if let Some(pwm) = p.address("pwm")? {
                body.push(GuestEvent::Write(pwm, 0x5a));
            }
            looped(name, vec![], body)
        }
        "script" => {
            p.reject_unknown(&["text"])?;
            let text = p.str("text")?.ok_or_else(|| p.bad("text", "required"))?;
            parse_script(name, text)
        }
        other => Err(GuestError::UnknownWorkload(other.to_string())),
    }
}
