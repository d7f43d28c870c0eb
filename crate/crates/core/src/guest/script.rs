use super::{GuestError, GuestEvent, WorkloadProgram};
use crate::hw::{parse_hex_u32, Address};
use crate::kernel::{WccApi, MESSAGE_LEN};

fn err(line: usize, message: impl Into<String>) -> GuestError {
    GuestError::Script { line, message: message.into() }
}

fn number(line: usize, word: Option<&str>, what: &str) -> Result<u64, GuestError> {
    let w = word.ok_or_else(|| err(line, format!("missing {what}")))?;
    if w.starts_with("0x") { parse_hex_u32(w).map(u64::from) } else { w.replace('_', "").parse().ok() }
        .ok_or_else(|| err(line, format!("bad {what} {w:?}")))
}

fn address(line: usize, word: Option<&str>) -> Result<Address, GuestError> {
    word.and_then(parse_hex_u32).map(Address).ok_or_else(|| err(line, "expected a 0x-prefixed address"))
}

/// Parses the line-oriented workload format:
///
/// ```text
/// # comment
/// compute 175600
/// read 0x30000000
/// write 0x30000000 7
/// timer 400000 3          # period, irq
/// handler 200             # handler body cost
/// wait_irq 3
/// wcc send_nb net 0102030405060708090a0b0c
/// wcc recv_b
/// mark_start
/// mark_end
/// loop                    # the rest repeats
/// loop_forever
/// ```
pub fn parse_script(name: &str, text: &str) -> Result<WorkloadProgram, GuestError> {
    let mut events = Vec::new();
    let mut loop_from = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        let mut words = body.split_whitespace();
        let Some(op) = words.next() else { continue };
        let event = match op {
            "compute" => {
                let c = number(line, words.next(), "cycle count")?;
                if c == 0 {
                    return Err(err(line, "compute needs at least one cycle"));
                }
                GuestEvent::Compute(c)
            }
            "read" => GuestEvent::Read(address(line, words.next())?),
            "write" => {
                let a = address(line, words.next())?;
                let v = number(line, words.next(), "value")?;
                GuestEvent::Write(a, u32::try_from(v).map_err(|_| err(line, "value exceeds 32 bits"))?)
            }
            "timer" => {
                let period = number(line, words.next(), "period")?;
                let irq = number(line, words.next(), "irq")?;
                if period == 0 {
                    return Err(err(line, "timer period must be > 0"));
                }
                GuestEvent::ConfigureTimer {
                    period,
                    irq: u16::try_from(irq).map_err(|_| err(line, "irq out of range"))?,
                }
            }
            "wait_irq" => {
                let irq = number(line, words.next(), "irq")?;
                GuestEvent::WaitIrq(u16::try_from(irq).map_err(|_| err(line, "irq out of range"))?)
            }
            "handler" => GuestEvent::IrqHandlerBody(number(line, words.next(), "cycle count")?),
            "wcc" => {
                let api = match words.next() {
                    Some("send_b") => WccApi::SendBlocking,
                    Some("send_nb") => WccApi::SendNonblocking,
                    Some("recv_b") => WccApi::RecvBlocking,
                    Some("recv_nb") => WccApi::RecvNonblocking,
                    other => return Err(err(line, format!("unknown wcc api {other:?}"))),
                };
                let (peer, payload) = if api.is_send() {
                    let peer = words.next().ok_or_else(|| err(line, "missing peer"))?;
                    let payload = match words.next() {
                        None => None,
                        Some(h) => {
                            let bytes = hex::decode(h).map_err(|_| err(line, "payload is not hex"))?;
                            Some(
                                <[u8; MESSAGE_LEN]>::try_from(bytes)
                                    .map_err(|_| err(line, "payload must be exactly 12 bytes"))?,
                            )
                        }
                    };
                    (Some(peer.to_string()), payload)
                } else {
                    (None, None)
                };
                GuestEvent::WccCall { api, peer, payload }
            }
            "mark_start" => GuestEvent::MarkStart,
            "mark_end" => GuestEvent::MarkEnd,
            "loop_forever" => GuestEvent::LoopForever,
            "loop" => {
                if loop_from.is_some() {
                    return Err(err(line, "only one loop point allowed"));
                }
                loop_from = Some(events.len());
                continue;
            }
            other => return Err(err(line, format!("unknown event {other:?}"))),
        };
        if let Some(extra) = words.next() {
            return Err(err(line, format!("unexpected {extra:?}")));
        }
        events.push(event);
    }
    if loop_from == Some(events.len()) {
        return Err(err(text.lines().count(), "loop with nothing after it"));
    }
    WorkloadProgram::new(name, events, loop_from)
}
