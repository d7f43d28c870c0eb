//! The multi-world TEE kernel: configuration, secure boot, the system
//! partitioner, the worlds scheduler and the communication channel. Every
//! operation acts on a [`PlatformState`](crate::hw::PlatformState).

mod boot;
mod config;
mod partition;
mod scheduler;
mod wcb;
mod wcc;

pub use boot::{canonical_payload, sha512, BootImage, BootOutcome, DIGEST_LEN};
pub use config::{
    parse_config, ConfigError, IrqSpec, MemRegionSpec, RegionKind, SchedulerMode, SystemConfig, WorkloadSpec,
    WorldConfig, MAX_WORLD_REGIONS,
};
pub use partition::{
    gateway_region, sp_apply_static, sp_build_mpc, sp_build_sau_table, sp_validate, PartitionError, RegionRef,
    GATEWAY_SIZE,
};
pub use scheduler::{BootPhase, Kernel, KernelError, SchedulingAction, SwitchOutcome};
pub use wcb::{
    payload_to_words, words_to_payload, BlockedOn, IrqDescriptor, Message, ResumePoint, Wcb, WorldId, MESSAGE_LEN,
};
pub use wcc::{WccApi, WccError, WccOutcome};
