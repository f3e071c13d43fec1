//! Payloads carried on the reserved `sdnator.*` keys.
//!
//! Every payload starts with a one-byte format version followed by its fields
//! in declaration order, using the same primitives as wire frames:
//! little-endian integers, u16-prefixed UTF-8 strings (keys, patterns, app
//! ids), 16-byte big-endian instance ids, and optional floats as a flag byte
//! plus an f64.
//!
//! | key | payload |
//! |-----|---------|
//! | `sdnator.register.request` | [`RegisterRequest`] |
//! | `sdnator.register.reply.<instance>` | [`RegisterReply`] |
//! | `sdnator.assignment.<app>` | [`AssignmentMsg`] |
//! | `sdnator.heartbeat.<app>.<instance>` | [`Heartbeat`] |
//! | `sdnator.status.request` | [`StatusRequest`] |
//! | `sdnator.status.reply.<instance>` | [`StatusReply`] |
//! | `sdnator.status.event` | [`StatusEvent`] (archived only) |
//! | `sdnator.status.lost.<app>.<instance>` | empty, published by the bus |
//!
//! Manifest: u16 interest count, then per interest the pattern and an
//! optional desired rate; u16 capability count, then per capability the key,
//! an optional max rate and an index flag. Assignment set: u32 count, then per
//! entry the key, a kind byte (0 unbounded, 1 rate) and, for rates, an f64.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::consolidate::UnmetReason;
use crate::coordinator::{
    AppStatus, AssignmentMsg, HeartbeatStatus, InstanceRecord, InstanceStatus, StatusEvent,
};
use crate::key::DataKey;
use crate::manifest::{
    AppId, AppIdentity, AssignmentSet, Capability, Frequency, InstanceId, Interest, Manifest, Rate,
    Roles,
};
use crate::wire::{Reader, WireError, Writer};

pub const PAYLOAD_VERSION: u8 = 1;

pub const REGISTER_REQUEST_KEY: &str = "sdnator.register.request";
pub const STATUS_REQUEST_KEY: &str = "sdnator.status.request";
pub const STATUS_EVENT_KEY: &str = "sdnator.status.event";

fn reserved(parts: &[&str]) -> DataKey {
    let mut segs = alloc::vec!["sdnator"];
    segs.extend_from_slice(parts);
    DataKey::from_parts(&segs, &[]).expect("reserved keys are built from valid segments")
}

pub fn register_request_key() -> DataKey {
    reserved(&["register", "request"])
}

pub fn register_reply_key(instance: InstanceId) -> DataKey {
    reserved(&["register", "reply", &format!("{instance}")])
}

pub fn assignment_key(app: &AppId) -> DataKey {
    reserved(&["assignment", app.as_str()])
}

pub fn heartbeat_key(app: &AppId, instance: InstanceId) -> DataKey {
    reserved(&["heartbeat", app.as_str(), &format!("{instance}")])
}

pub fn status_request_key() -> DataKey {
    reserved(&["status", "request"])
}

pub fn status_reply_key(instance: InstanceId) -> DataKey {
    reserved(&["status", "reply", &format!("{instance}")])
}

pub fn status_event_key() -> DataKey {
    reserved(&["status", "event"])
}

pub fn lost_key(app: &AppId, instance: InstanceId) -> DataKey {
    reserved(&["status", "lost", app.as_str(), &format!("{instance}")])
}

/// Splits `sdnator.<kind>.<app>.<instance>` keys (heartbeat, lost notices).
pub fn parse_instance_key(key: &DataKey, kind: &[&str]) -> Option<(AppId, InstanceId)> {
    let segs: Vec<&str> = key.segments().collect();
    if segs.len() != kind.len() + 3 || segs[0] != "sdnator" || segs[1..=kind.len()] != *kind {
        return None;
    }
    let app = AppId::new(segs[kind.len() + 1]).ok()?;
    let instance = segs[kind.len() + 2].parse().ok()?;
    Some((app, instance))
}

pub trait Payload: Sized {
    fn write(&self, w: &mut Writer<'_>);
    fn read(r: &mut Reader<'_>) -> Result<Self, WireError>;

    fn to_payload(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let mut w = Writer::new(&mut buf);
        w.u8(PAYLOAD_VERSION);
        self.write(&mut w);
        buf
    }

    fn from_payload(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        if r.u8()? != PAYLOAD_VERSION {
            return Err(WireError::Invalid("payload version"));
        }
        let v = Self::read(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

fn write_identity(w: &mut Writer<'_>, id: &AppIdentity) {
    w.str(id.app_id.as_str()).instance(id.instance).u8(id.roles.bits());
}

fn read_identity(r: &mut Reader<'_>) -> Result<AppIdentity, WireError> {
    Ok(AppIdentity {
        app_id: r.app_id()?,
        instance: r.instance()?,
        roles: Roles::from_bits(r.u8()?).ok_or(WireError::Invalid("role bits"))?,
    })
}

fn read_freq(r: &mut Reader<'_>) -> Result<Option<Frequency>, WireError> {
    match r.opt_f64()? {
        None => Ok(None),
        Some(x) => Frequency::new(x).map(Some).ok_or(WireError::Invalid("frequency")),
    }
}

impl Payload for Manifest {
    fn write(&self, w: &mut Writer<'_>) {
        w.u16(self.interests.len() as u16);
        for i in &self.interests {
            w.str(i.pattern.as_str()).opt_f64(i.desired_hz.map(Frequency::hz));
        }
        w.u16(self.capabilities.len() as u16);
        for c in &self.capabilities {
            w.str(c.key.as_str())
                .opt_f64(c.max_hz.map(Frequency::hz))
                .bool(c.index);
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let mut m = Manifest::new();
        for _ in 0..r.u16()? {
            m.interests.push(Interest {
                pattern: r.pattern()?,
                desired_hz: read_freq(r)?,
            });
        }
        for _ in 0..r.u16()? {
            m.capabilities.push(Capability {
                key: r.key()?,
                max_hz: read_freq(r)?,
                index: r.bool()?,
            });
        }
        Ok(m)
    }
}

impl Payload for AssignmentSet {
    fn write(&self, w: &mut Writer<'_>) {
        w.u32(self.entries.len() as u32);
        for (key, rate) in &self.entries {
            w.str(key.as_str());
            match rate {
                Rate::Unbounded => w.u8(0),
                Rate::Hz(f) => w.u8(1).f64(f.hz()),
            };
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let mut set = AssignmentSet::new();
        for _ in 0..r.u32()? {
            let key = r.key()?;
            let rate = match r.u8()? {
                0 => Rate::Unbounded,
                1 => Rate::Hz(Frequency::new(r.f64()?).ok_or(WireError::Invalid("frequency"))?),
                b => return Err(WireError::BadFlag(b)),
            };
            set.insert(key, rate);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterRequest {
    pub identity: AppIdentity,
    pub manifest: Manifest,
    pub reply_key: DataKey,
}

impl Payload for RegisterRequest {
    fn write(&self, w: &mut Writer<'_>) {
        write_identity(w, &self.identity);
        self.manifest.write(w);
        w.str(self.reply_key.as_str());
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            identity: read_identity(r)?,
            manifest: Manifest::read(r)?,
            reply_key: r.key()?,
        })
    }
}

pub const REJECT_RESERVED_NAMESPACE: u16 = 1;
pub const REJECT_DUPLICATE_INSTANCE: u16 = 2;

/// Tag byte: 0 accepted, 1 rejected, 2 please register again.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegisterReply {
    Accepted {
        active: bool,
        epoch: u64,
        assignments: AssignmentSet,
    },
    Rejected {
        code: u16,
        message: String,
    },
    /// Sent when the coordinator hears from an instance it holds no manifest for.
    Reregister,
}

impl Payload for RegisterReply {
    fn write(&self, w: &mut Writer<'_>) {
        match self {
            RegisterReply::Accepted {
                active,
                epoch,
                assignments,
            } => {
                w.u8(0).bool(*active).u64(*epoch);
                assignments.write(w);
            }
            RegisterReply::Rejected { code, message } => {
                w.u8(1).u16(*code).str(message);
            }
            RegisterReply::Reregister => {
                w.u8(2);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            0 => RegisterReply::Accepted {
                active: r.bool()?,
                epoch: r.u64()?,
                assignments: AssignmentSet::read(r)?,
            },
            1 => RegisterReply::Rejected {
                code: r.u16()?,
                message: r.string()?,
            },
            2 => RegisterReply::Reregister,
            b => return Err(WireError::BadFlag(b)),
        })
    }
}

impl Payload for AssignmentMsg {
    fn write(&self, w: &mut Writer<'_>) {
        w.str(self.app_id.as_str()).instance(self.target).u64(self.epoch);
        self.assignments.write(w);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            app_id: r.app_id()?,
            target: r.instance()?,
            epoch: r.u64()?,
            assignments: AssignmentSet::read(r)?,
        })
    }
}

/// Status byte: 0 online, 1 idle, 3 offline (the instance-status codes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heartbeat {
    pub status: HeartbeatStatus,
    pub uptime_us: u64,
    pub writes: u64,
    pub paced: u64,
    pub delivered: u64,
}

impl Payload for Heartbeat {
    fn write(&self, w: &mut Writer<'_>) {
        w.u8(InstanceStatus::from(self.status).code())
            .u64(self.uptime_us)
            .u64(self.writes)
            .u64(self.paced)
            .u64(self.delivered);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let status = match InstanceStatus::from_code(r.u8()?) {
            Some(InstanceStatus::Online) => HeartbeatStatus::Online,
            Some(InstanceStatus::Idle) => HeartbeatStatus::Idle,
            Some(InstanceStatus::Offline) => HeartbeatStatus::Offline,
            _ => return Err(WireError::Invalid("heartbeat status")),
        };
        Ok(Self {
            status,
            uptime_us: r.u64()?,
            writes: r.u64()?,
            paced: r.u64()?,
            delivered: r.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusRequest {
    pub request_id: u64,
    pub filter: Option<AppId>,
    pub reply_key: DataKey,
}

impl Payload for StatusRequest {
    fn write(&self, w: &mut Writer<'_>) {
        w.u64(self.request_id);
        match &self.filter {
            Some(app) => w.u8(1).str(app.as_str()),
            None => w.u8(0),
        };
        w.str(self.reply_key.as_str());
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            request_id: r.u64()?,
            filter: if r.bool()? { Some(r.app_id()?) } else { None },
            reply_key: r.key()?,
        })
    }
}

fn write_unmet_reason(w: &mut Writer<'_>, reason: UnmetReason) {
    w.u8(match reason {
        UnmetReason::NoProducer => 0,
        UnmetReason::FrequencyExceedsCapacity => 1,
    });
}

fn read_unmet_reason(r: &mut Reader<'_>) -> Result<UnmetReason, WireError> {
    match r.u8()? {
        0 => Ok(UnmetReason::NoProducer),
        1 => Ok(UnmetReason::FrequencyExceedsCapacity),
        b => Err(WireError::BadFlag(b)),
    }
}

fn read_status(r: &mut Reader<'_>) -> Result<InstanceStatus, WireError> {
    InstanceStatus::from_code(r.u8()?).ok_or(WireError::Invalid("instance status"))
}

impl Payload for AppStatus {
    fn write(&self, w: &mut Writer<'_>) {
        w.str(self.app_id.as_str());
        match self.active {
            Some(id) => w.u8(1).instance(id),
            None => w.u8(0),
        };
        w.u16(self.instances.len() as u16);
        for (id, rec) in &self.instances {
            w.instance(*id).u8(rec.status.code()).u64(rec.last_heartbeat_us);
            match &rec.manifest {
                Some(m) => {
                    w.u8(1);
                    m.write(w);
                }
                None => {
                    w.u8(0);
                }
            }
        }
        w.u16(self.unmet.len() as u16);
        for (pattern, reason) in &self.unmet {
            w.str(pattern.as_str());
            write_unmet_reason(w, *reason);
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let app_id = r.app_id()?;
        let active = if r.bool()? { Some(r.instance()?) } else { None };
        let mut instances = Vec::new();
        for _ in 0..r.u16()? {
            let id = r.instance()?;
            let status = read_status(r)?;
            let last_heartbeat_us = r.u64()?;
            let manifest = if r.bool()? { Some(Manifest::read(r)?) } else { None };
            instances.push((
                id,
                InstanceRecord {
                    status,
                    last_heartbeat_us,
                    manifest,
                },
            ));
        }
        let mut unmet = Vec::new();
        for _ in 0..r.u16()? {
            unmet.push((r.pattern()?, read_unmet_reason(r)?));
        }
        Ok(Self {
            app_id,
            active,
            instances,
            unmet,
        })
    }
}

/// Tag byte 0 carries the app list, 1 an unknown-app error message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusReply {
    pub request_id: u64,
    pub result: Result<Vec<AppStatus>, String>,
}

impl Payload for StatusReply {
    fn write(&self, w: &mut Writer<'_>) {
        w.u64(self.request_id);
        match &self.result {
            Ok(apps) => {
                w.u8(0).u32(apps.len() as u32);
                for a in apps {
                    a.write(w);
                }
            }
            Err(msg) => {
                w.u8(1).str(msg);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let request_id = r.u64()?;
        let result = match r.u8()? {
            0 => {
                let n = r.u32()?;
                let mut apps = Vec::new();
                for _ in 0..n {
                    apps.push(AppStatus::read(r)?);
                }
                Ok(apps)
            }
            1 => Err(r.string()?),
            b => return Err(WireError::BadFlag(b)),
        };
        Ok(Self { request_id, result })
    }
}

/// Tag byte: 0 registered, 1 transition, 2 published.
impl Payload for StatusEvent {
    fn write(&self, w: &mut Writer<'_>) {
        match self {
            StatusEvent::Registered {
                identity,
                manifest,
                at_us,
            } => {
                w.u8(0).u64(*at_us);
                write_identity(w, identity);
                manifest.write(w);
            }
            StatusEvent::Transition {
                app_id,
                instance,
                status,
                at_us,
            } => {
                w.u8(1)
                    .u64(*at_us)
                    .str(app_id.as_str())
                    .instance(*instance)
                    .u8(status.code());
            }
            StatusEvent::Published(msg) => {
                w.u8(2);
                msg.write(w);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            0 => {
                let at_us = r.u64()?;
                StatusEvent::Registered {
                    identity: read_identity(r)?,
                    manifest: Manifest::read(r)?,
                    at_us,
                }
            }
            1 => StatusEvent::Transition {
                at_us: r.u64()?,
                app_id: r.app_id()?,
                instance: r.instance()?,
                status: read_status(r)?,
            },
            2 => StatusEvent::Published(AssignmentMsg::read(r)?),
            b => return Err(WireError::BadFlag(b)),
        })
    }
}
