//! Application identity, declared interests and capabilities, and the
//! per-key production directives the coordinator hands back.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::key::{is_key_char, DataKey, KeyPattern};

pub const MAX_APP_ID_LEN: usize = 64;

/// Application id: one key segment (lowercase alphanumerics, `_`, `-`).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AppId(String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid application id {0:?}: expected 1-64 chars of [a-z0-9_-]")]
pub struct InvalidAppId(pub String);

impl AppId {
    pub fn new(id: &str) -> Result<Self, InvalidAppId> {
        if id.is_empty() || id.len() > MAX_APP_ID_LEN || !id.bytes().all(is_key_char) {
            return Err(InvalidAppId(id.into()));
        }
        Ok(Self(id.into()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AppId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for AppId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AppId({})", self.0)
    }
}

impl FromStr for AppId {
    type Err = InvalidAppId;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

/// Per-process instance UUID. Rendered in the hyphenated lowercase form, which
/// is also a legal key segment.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct InstanceId(pub u128);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid instance id {0:?}")]
pub struct InvalidInstanceId(pub String);

impl InstanceId {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(u128::from_be_bytes(bytes))
    }

    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.0;
        write!(
            f,
            "{:08x}-{:04x}-{:04x}-{:04x}-{:012x}",
            (v >> 96) as u32,
            (v >> 80) as u16,
            (v >> 64) as u16,
            (v >> 48) as u16,
            v & 0xffff_ffff_ffff
        )
    }
}

impl fmt::Debug for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "InstanceId({self})")
    }
}

impl FromStr for InstanceId {
    type Err = InvalidInstanceId;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let hex: String = s.chars().filter(|c| *c != '-').collect();
        let shape_ok = s.len() == 36
            && s.char_indices()
                .all(|(i, c)| matches!(i, 8 | 13 | 18 | 23) == (c == '-'));
        if !shape_ok || hex.len() != 32 {
            return Err(InvalidInstanceId(s.into()));
        }
        u128::from_str_radix(&hex, 16)
            .map(Self)
            .map_err(|_| InvalidInstanceId(s.into()))
    }
}

/// Producer / consumer role bits carried in the handshake.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Roles(u8);

impl Roles {
    pub const NONE: Roles = Roles(0);
    pub const PRODUCER: Roles = Roles(1);
    pub const CONSUMER: Roles = Roles(2);
    pub const BOTH: Roles = Roles(3);

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits & !3 == 0).then_some(Roles(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, other: Roles) -> bool {
        self.0 & other.0 == other.0
    }
}

impl core::ops::BitOr for Roles {
    type Output = Roles;
    fn bitor(self, rhs: Roles) -> Roles {
        Roles(self.0 | rhs.0)
    }
}

impl fmt::Debug for Roles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => f.write_str("NONE"),
            1 => f.write_str("PRODUCER"),
            2 => f.write_str("CONSUMER"),
            _ => f.write_str("PRODUCER|CONSUMER"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppIdentity {
    pub app_id: AppId,
    pub instance: InstanceId,
    pub roles: Roles,
}

/// A strictly positive, finite rate in hertz.
#[derive(Clone, Copy, PartialEq)]
pub struct Frequency(f64);

impl Frequency {
    pub fn new(hz: f64) -> Option<Self> {
        (hz.is_finite() && hz > 0.0).then_some(Self(hz))
    }

    pub fn hz(self) -> f64 {
        self.0
    }
}

impl fmt::Debug for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Hz", self.0)
    }
}

impl Eq for Frequency {}

impl Ord for Frequency {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for Frequency {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Assigned production rate for one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rate {
    Hz(Frequency),
    Unbounded,
}

impl Rate {
    pub fn hz(self) -> Option<f64> {
        match self {
            Rate::Hz(f) => Some(f.hz()),
            Rate::Unbounded => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Interest {
    pub pattern: KeyPattern,
    pub desired_hz: Option<Frequency>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Capability {
    pub key: DataKey,
    pub max_hz: Option<Frequency>,
    /// Ask the archive to keep a per-key index for this key.
    pub index: bool,
}

/// What an application wants to consume and what it can produce.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Manifest {
    pub interests: Vec<Interest>,
    pub capabilities: Vec<Capability>,
}

/// Namespace owned by the framework itself.
pub const RESERVED_SEGMENT: &str = "sdnator";

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn interest(mut self, pattern: KeyPattern, desired_hz: Option<f64>) -> Self {
        self.interests.push(Interest {
            pattern,
            desired_hz: desired_hz.and_then(Frequency::new),
        });
        self
    }

    pub fn capability(mut self, key: DataKey, max_hz: Option<f64>, index: bool) -> Self {
        self.capabilities.push(Capability {
            key,
            max_hz: max_hz.and_then(Frequency::new),
            index,
        });
        self
    }

    /// First capability declared under the reserved `sdnator.**` namespace.
    pub fn reserved_capability(&self) -> Option<&DataKey> {
        self.capabilities
            .iter()
            .map(|c| &c.key)
            .find(|k| k.starts_with_segment(RESERVED_SEGMENT))
    }

    pub fn capability_for(&self, key: &DataKey) -> Option<&Capability> {
        self.capabilities.iter().find(|c| &c.key == key)
    }
}

/// Per-key production directives for one producer.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct AssignmentSet {
    pub entries: BTreeMap<DataKey, Rate>,
}

impl AssignmentSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, key: &DataKey) -> Option<Rate> {
        self.entries.get(key).copied()
    }

    pub fn insert(&mut self, key: DataKey, rate: Rate) {
        self.entries.insert(key, rate);
    }
}

/// Options for a single `write`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteFlags {
    /// Publish on the bus only; skip the archive.
    pub pub_only: bool,
    /// Flush the buffers right after this write instead of waiting for batch or linger.
    pub no_wait: bool,
}

impl WriteFlags {
    pub const NONE: WriteFlags = WriteFlags {
        pub_only: false,
        no_wait: false,
    };
    pub const PUB_ONLY: WriteFlags = WriteFlags {
        pub_only: true,
        no_wait: false,
    };
    pub const NO_WAIT: WriteFlags = WriteFlags {
        pub_only: false,
        no_wait: true,
    };
}
