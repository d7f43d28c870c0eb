//! Security attribution: the SAU, the IDAU, and how they combine.

use super::{Address, SecurityAttribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of SAU region slots on the modelled core.
pub const SAU_REGIONS: usize = 8;
/// SAU base/limit granularity in bytes.
pub const SAU_GRANULE: u32 = 32;

/// Combines the SAU and IDAU answers: the more secure attribution wins.
pub fn combine_attribution(sau_attr: SecurityAttribution, idau_attr: SecurityAttribution) -> SecurityAttribution {
    sau_attr.max(idau_attr)
}

/// One SAU region. `limit` is inclusive, so a region covering 32 bytes at
/// `0x100` has `limit = 0x11f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SauRegion {
    pub base: Address,
    pub limit: Address,
    pub nsc: bool,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SauError {
    #[error("SAU region {0} out of range")]
    BadRegionNumber(usize),
    #[error("SAU region {base}..={limit} is not 32-byte aligned")]
    Misaligned { base: Address, limit: Address },
    #[error("SAU region {base}..={limit} has base above limit")]
    Inverted { base: Address, limit: Address },
    #[error("SAU region {0} overlaps enabled region {1}")]
    Overlap(usize, usize),
}

impl SauRegion {
    /// Region covering `size` bytes starting at `base`.
    pub fn covering(base: Address, size: u32, nsc: bool) -> SauRegion {
        SauRegion { base, limit: Address(base.0.wrapping_add(size).wrapping_sub(1)), nsc, enabled: true }
    }

    pub fn contains(&self, addr: Address) -> bool {
        self.enabled && self.base <= addr && addr <= self.limit
    }

    fn validate(&self) -> Result<(), SauError> {
        if self.base > self.limit {
            return Err(SauError::Inverted { base: self.base, limit: self.limit });
        }
        if !self.base.0.is_multiple_of(SAU_GRANULE) || !(self.limit.0 as u64 + 1).is_multiple_of(SAU_GRANULE as u64) {
            return Err(SauError::Misaligned { base: self.base, limit: self.limit });
        }
        Ok(())
    }

    fn overlaps(&self, other: &SauRegion) -> bool {
        self.enabled && other.enabled && self.base <= other.limit && other.base <= self.limit
    }
}

/// The programmable attribution unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SauState {
    pub enabled: bool,
    pub regions: [SauRegion; SAU_REGIONS],
    /// SAU_CTRL.ALLNS: attribution when the SAU is disabled.
    pub all_non_secure_when_disabled: bool,
}

impl Default for SauState {
    fn default() -> Self {
        SauState { enabled: false, regions: [SauRegion::default(); SAU_REGIONS], all_non_secure_when_disabled: false }
    }
}

impl SauState {
    /// Programs one slot through the RNR/RBAR/RLAR sequence. Disabled
    /// regions are accepted without checks.
    pub fn program_region(&mut self, rnr: usize, region: SauRegion) -> Result<(), SauError> {
        if rnr >= SAU_REGIONS {
            return Err(SauError::BadRegionNumber(rnr));
        }
        if region.enabled {
            region.validate()?;
            for (i, other) in self.regions.iter().enumerate() {
                if i != rnr && region.overlaps(other) {
                    return Err(SauError::Overlap(rnr, i));
                }
            }
        }
        self.regions[rnr] = region;
        Ok(())
    }

    /// Disables the SAU, programs all eight slots in order and re-enables it.
    pub fn load_table(&mut self, table: &[SauRegion; SAU_REGIONS]) -> Result<(), SauError> {
        self.enabled = false;
        self.regions = [SauRegion::default(); SAU_REGIONS];
        for (rnr, region) in table.iter().enumerate() {
            self.program_region(rnr, *region)?;
        }
        self.enabled = true;
        Ok(())
    }

    /// SAU-side attribution of `addr`.
    pub fn lookup(&self, addr: Address) -> SecurityAttribution {
        if !self.enabled {
            return if self.all_non_secure_when_disabled {
                SecurityAttribution::NonSecure
            } else {
                SecurityAttribution::Secure
            };
        }
        match self.regions.iter().find(|r| r.contains(addr)) {
            Some(r) if r.nsc => SecurityAttribution::SecureNsc,
            Some(_) => SecurityAttribution::NonSecure,
            None => SecurityAttribution::Secure,
        }
    }

    pub fn enabled_regions(&self) -> usize {
        self.regions.iter().filter(|r| r.enabled).count()
    }
}

/// A static IDAU region, inclusive limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdauRegion {
    pub base: Address,
    pub limit: Address,
    pub security: SecurityAttribution,
}

/// The implementation-defined attribution unit. Immutable once the platform
/// is built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IdauMap {
    /// Address bit 28 set selects the non-secure alias.
    Bit28(Bit28Tag),
    /// Explicit table; addresses outside every region get `default`.
    Table { regions: Vec<IdauRegion>, default: SecurityAttribution },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bit28Tag {
    Bit28,
}

/// Hardware limit on IDAU region count.
pub const IDAU_MAX_REGIONS: usize = 256;

impl Default for IdauMap {
    fn default() -> Self {
        IdauMap::Bit28(Bit28Tag::Bit28)
    }
}

impl IdauMap {
    pub fn bit28() -> Self {
        IdauMap::default()
    }

    pub fn lookup(&self, addr: Address) -> SecurityAttribution {
        match self {
            IdauMap::Bit28(_) => {
                if addr.0 & (1 << 28) != 0 {
                    SecurityAttribution::NonSecure
                } else {
                    SecurityAttribution::Secure
                }
            }
            IdauMap::Table { regions, default } => {
                regions.iter().find(|r| r.base <= addr && addr <= r.limit).map(|r| r.security).unwrap_or(*default)
            }
        }
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        if let IdauMap::Table { regions, .. } = self {
            if regions.len() > IDAU_MAX_REGIONS {
                return Err(format!("idau table has {} regions; {IDAU_MAX_REGIONS} max", regions.len()));
            }
            for (i, a) in regions.iter().enumerate() {
                if a.base > a.limit {
                    return Err(format!("idau region {i} has base above limit"));
                }
                for (j, b) in regions.iter().enumerate().skip(i + 1) {
                    if a.base <= b.limit && b.base <= a.limit {
                        return Err(format!("idau regions {i} and {j} overlap"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Final attribution of `addr`: SAU answer combined with the IDAU answer.
pub fn attribute_address(sau: &SauState, idau: &IdauMap, addr: Address) -> SecurityAttribution {
    combine_attribution(sau.lookup(addr), idau.lookup(addr))
}
