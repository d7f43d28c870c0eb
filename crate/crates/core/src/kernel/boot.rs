//! Secure boot: SHA-512 check of the boot image against a stored digest.

use super::config::SystemConfig;
use sha2::{Digest, Sha512};

pub const DIGEST_LEN: usize = 64;

/// Kernel plus world images. At this level of modelling the payload is
/// opaque bytes; scenarios use the canonical configuration serialisation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootImage {
    pub payload: Vec<u8>,
    pub stored_digest: [u8; DIGEST_LEN],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootOutcome {
    Proceed,
    Locked,
}

pub fn sha512(bytes: &[u8]) -> [u8; DIGEST_LEN] {
    Sha512::digest(bytes).into()
}

impl BootImage {
    /// Image whose stored digest matches its payload.
    pub fn signed(payload: Vec<u8>) -> Self {
        let stored_digest = sha512(&payload);
        BootImage { payload, stored_digest }
    }

    /// Image built from a configuration. The digest comes from the
    /// config's `boot_digest` when present.
    pub fn for_config(config: &SystemConfig) -> Self {
        let payload = canonical_payload(config);
        let stored_digest = config
            .boot_digest
            .as_deref()
            .and_then(|d| hex::decode(d).ok())
            .and_then(|b| <[u8; DIGEST_LEN]>::try_from(b).ok())
            .unwrap_or_else(|| sha512(&payload));
        BootImage { payload, stored_digest }
    }

    pub fn verify(&self) -> bool {
        sha512(&self.payload) == self.stored_digest
    }

    pub fn flip_bit(&mut self, bit: usize) {
        self.payload[bit / 8] ^= 1 << (bit % 8);
    }
}

/// Serialised configuration without its digest field.
pub fn canonical_payload(config: &SystemConfig) -> Vec<u8> {
    let mut unsigned = config.clone();
    unsigned.boot_digest = None;
    serde_json::to_vec(&unsigned).expect("configuration serialises")
}
