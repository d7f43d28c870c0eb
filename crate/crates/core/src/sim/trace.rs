use crate::kernel::{WccApi, WccError, WorldId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceKind {
    Boot,
    BootLocked,
    BootAborted {
        reason: String,
    },
    KickOff,
    SwitchBegin,
    SwitchEnd {
        to: Option<WorldId>,
    },
    IrqRaised {
        irq: u16,
    },
    IrqEntered {
        irq: u16,
        raised: u64,
    },
    MarkStart,
    MarkEnd {
        native: u64,
    },
    Fault {
        cause: String,
        addr: Option<u32>,
    },
    Wcc {
        api: WccApi,
        peer: Option<WorldId>,
        /// `None` while the caller is parked in the gateway.
        result: Option<Result<(), WccError>>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub world: Option<WorldId>,
    #[serde(flatten)]
    pub kind: TraceKind,
}

/// Cycle-stamped event log. Stamps never decrease.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, cycle: u64, world: Option<WorldId>, kind: TraceKind) {
        debug_assert!(self.records.last().is_none_or(|r| r.cycle <= cycle));
        self.records.push(TraceRecord { cycle, world, kind });
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    pub fn count(&self, pred: impl Fn(&TraceKind) -> bool) -> usize {
        self.records.iter().filter(|r| pred(&r.kind)).count()
    }

    pub fn switch_count(&self) -> usize {
        self.count(|k| matches!(k, TraceKind::SwitchBegin))
    }

    pub fn is_monotone(&self) -> bool {
        self.records.windows(2).all(|w| w[0].cycle <= w[1].cycle)
    }
}
