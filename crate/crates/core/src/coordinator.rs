//! Coordinator state machine: registrations, liveness, failover and the
//! assignment publications that follow from consolidation.
//!
//! The machine is driven entirely by its caller. Each entry point takes the
//! current time in microseconds and returns the [`Effect`]s the service must
//! carry out: assignment messages to publish, re-registration prompts, and
//! checkpoint events to archive. Replaying the archived events through
//! [`Coordinator::recover`] rebuilds the state.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng;

use crate::consolidate::{consolidate, Unmet, UnmetReason};
use crate::key::{DataKey, KeyPattern};
use crate::manifest::{AppId, AppIdentity, AssignmentSet, InstanceId, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InstanceStatus {
    Online,
    Idle,
    Unresponsive,
    Offline,
}

impl InstanceStatus {
    pub fn is_healthy(self) -> bool {
        matches!(self, InstanceStatus::Online | InstanceStatus::Idle)
    }

    pub fn code(self) -> u8 {
        match self {
            InstanceStatus::Online => 0,
            InstanceStatus::Idle => 1,
            InstanceStatus::Unresponsive => 2,
            InstanceStatus::Offline => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => InstanceStatus::Online,
            1 => InstanceStatus::Idle,
            2 => InstanceStatus::Unresponsive,
            3 => InstanceStatus::Offline,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceStatus::Online => "ONLINE",
            InstanceStatus::Idle => "IDLE",
            InstanceStatus::Unresponsive => "UNRESPONSIVE",
            InstanceStatus::Offline => "OFFLINE",
        }
    }
}

/// What an instance reports about itself in a heartbeat.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeartbeatStatus {
    Online,
    Idle,
    Offline,
}

impl From<HeartbeatStatus> for InstanceStatus {
    fn from(s: HeartbeatStatus) -> Self {
        match s {
            HeartbeatStatus::Online => InstanceStatus::Online,
            HeartbeatStatus::Idle => InstanceStatus::Idle,
            HeartbeatStatus::Offline => InstanceStatus::Offline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceRecord {
    pub status: InstanceStatus,
    pub last_heartbeat_us: u64,
    /// `None` until the instance registers; heartbeats alone do not carry one.
    pub manifest: Option<Manifest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppRecord {
    pub app_id: AppId,
    pub instances: BTreeMap<InstanceId, InstanceRecord>,
    pub active: Option<InstanceId>,
}

impl AppRecord {
    fn new(app_id: AppId) -> Self {
        Self {
            app_id,
            instances: BTreeMap::new(),
            active: None,
        }
    }

    fn active_manifest(&self) -> Option<&Manifest> {
        let id = self.active?;
        self.instances.get(&id)?.manifest.as_ref()
    }

    fn candidates(&self) -> Vec<InstanceId> {
        self.instances
            .iter()
            .filter(|(_, r)| r.status.is_healthy() && r.manifest.is_some())
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Assignments addressed to one instance of an application. Every instance
/// of the app receives it on the app's assignment key; instances other than
/// `target` drop whatever assignments they held.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMsg {
    pub app_id: AppId,
    pub target: InstanceId,
    /// Strictly increasing across publications; receivers ignore older epochs.
    pub epoch: u64,
    pub assignments: AssignmentSet,
}

/// Checkpoint events. Archiving every one of them is enough to rebuild the
/// coordinator after a restart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatusEvent {
    Registered {
        identity: AppIdentity,
        manifest: Manifest,
        at_us: u64,
    },
    Transition {
        app_id: AppId,
        instance: InstanceId,
        status: InstanceStatus,
        at_us: u64,
    },
    Published(AssignmentMsg),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Publish(AssignmentMsg),
    /// The instance is alive but the coordinator holds no manifest for it.
    RequestRegistration { app_id: AppId, instance: InstanceId },
    Checkpoint(StatusEvent),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoordinatorError {
    #[error("capability {0} lies in the reserved sdnator namespace")]
    ReservedNamespace(DataKey),
    #[error("instance {instance} is already registered under application {owner}")]
    DuplicateInstanceId { instance: InstanceId, owner: AppId },
    #[error("unknown application {0}")]
    UnknownApp(AppId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordinatorConfig {
    pub heartbeat_interval_us: u64,
    pub timeout_multiplier: u32,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval_us: 1_000_000,
            timeout_multiplier: 3,
        }
    }
}

impl CoordinatorConfig {
    pub fn timeout_us(&self) -> u64 {
        self.heartbeat_interval_us * self.timeout_multiplier as u64
    }
}

/// Reply to a successful registration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registration {
    /// Whether the registrant is the app's active instance.
    pub active: bool,
    /// The registrant's assignments; empty for standby instances.
    pub assignments: AssignmentSet,
    pub epoch: u64,
}

/// Snapshot of one application for status queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppStatus {
    pub app_id: AppId,
    pub active: Option<InstanceId>,
    pub instances: Vec<(InstanceId, InstanceRecord)>,
    /// Interests of this app the current consolidation could not satisfy.
    pub unmet: Vec<(KeyPattern, UnmetReason)>,
}

#[derive(Debug, Clone, Default)]
pub struct Coordinator {
    config: CoordinatorConfig,
    apps: BTreeMap<AppId, AppRecord>,
    owners: BTreeMap<InstanceId, AppId>,
    published: BTreeMap<AppId, AssignmentMsg>,
    unmet: Vec<Unmet>,
    last_epoch: u64,
}

impl Coordinator {
    pub fn new(config: CoordinatorConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    pub fn app(&self, app: &AppId) -> Option<&AppRecord> {
        self.apps.get(app)
    }

    pub fn apps(&self) -> impl Iterator<Item = &AppRecord> {
        self.apps.values()
    }

    pub fn unmet(&self) -> &[Unmet] {
        &self.unmet
    }

    /// Last assignment message published for `app`, if its instance is still active.
    pub fn published(&self, app: &AppId) -> Option<&AssignmentMsg> {
        self.published.get(app)
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        identity: &AppIdentity,
        manifest: &Manifest,
        now_us: u64,
        rng: &mut R,
    ) -> Result<(Registration, Vec<Effect>), CoordinatorError> {
        if let Some(key) = manifest.reserved_capability() {
            return Err(CoordinatorError::ReservedNamespace(key.clone()));
        }
        if let Some(owner) = self.owners.get(&identity.instance) {
            if owner != &identity.app_id {
                return Err(CoordinatorError::DuplicateInstanceId {
                    instance: identity.instance,
                    owner: owner.clone(),
                });
            }
        }
        let mut effects = Vec::new();
        effects.push(Effect::Checkpoint(StatusEvent::Registered {
            identity: identity.clone(),
            manifest: manifest.clone(),
            at_us: now_us,
        }));
        self.apply_registration(&identity.app_id, identity.instance, manifest.clone(), now_us);
        let app = &identity.app_id;
        self.set_status(app, identity.instance, InstanceStatus::Online, now_us, &mut effects);
        let record = self.apps.get_mut(app).expect("just inserted");
        let active_healthy = record
            .active
            .and_then(|a| record.instances.get(&a))
            .is_some_and(|r| r.status.is_healthy() && r.manifest.is_some());
        if !active_healthy {
            self.failover(app, rng);
        }
        // The manifest of the active instance may have changed.
        self.reconcile(now_us, &mut effects);

        let record = &self.apps[app];
        let active = record.active == Some(identity.instance);
        let (assignments, epoch) = match self.published.get(app) {
            Some(msg) if active => (msg.assignments.clone(), msg.epoch),
            _ => (AssignmentSet::new(), self.last_epoch),
        };
        Ok((
            Registration {
                active,
                assignments,
                epoch,
            },
            effects,
        ))
    }

    fn apply_registration(&mut self, app: &AppId, instance: InstanceId, manifest: Manifest, now_us: u64) {
        self.owners.insert(instance, app.clone());
        let record = self
            .apps
            .entry(app.clone())
            .or_insert_with(|| AppRecord::new(app.clone()));
        let inst = record.instances.entry(instance).or_insert(InstanceRecord {
            status: InstanceStatus::Online,
            last_heartbeat_us: now_us,
            manifest: None,
        });
        inst.manifest = Some(manifest);
        inst.last_heartbeat_us = now_us;
    }

    pub fn on_heartbeat<R: Rng + ?Sized>(
        &mut self,
        app: &AppId,
        instance: InstanceId,
        status: HeartbeatStatus,
        now_us: u64,
        rng: &mut R,
    ) -> Vec<Effect> {
        let mut effects = Vec::new();
        match self.owners.get(&instance) {
            Some(owner) if owner != app => return effects,
            Some(_) => {}
            None => {
                self.owners.insert(instance, app.clone());
                self.apps
                    .entry(app.clone())
                    .or_insert_with(|| AppRecord::new(app.clone()))
                    .instances
                    .insert(
                        instance,
                        InstanceRecord {
                            status: InstanceStatus::Online,
                            last_heartbeat_us: now_us,
                            manifest: None,
                        },
                    );
                effects.push(Effect::Checkpoint(StatusEvent::Transition {
                    app_id: app.clone(),
                    instance,
                    status: InstanceStatus::Online,
                    at_us: now_us,
                }));
            }
        }
        let record = self.apps.get_mut(app).expect("owner implies record");
        let inst = record.instances.get_mut(&instance).expect("owner implies instance");
        inst.last_heartbeat_us = inst.last_heartbeat_us.max(now_us);
        let registered = inst.manifest.is_some();
        self.set_status(app, instance, status.into(), now_us, &mut effects);

        let record = &self.apps[app];
        if status == HeartbeatStatus::Offline {
            if record.active == Some(instance) {
                self.failover(app, rng);
                self.reconcile(now_us, &mut effects);
            }
        } else if !registered {
            effects.push(Effect::RequestRegistration {
                app_id: app.clone(),
                instance,
            });
        } else if record.active.is_none() {
            self.failover(app, rng);
            self.reconcile(now_us, &mut effects);
        }
        effects
    }

    /// The transport to `instance` broke without an OFFLINE heartbeat.
    pub fn on_connection_lost<R: Rng + ?Sized>(
        &mut self,
        app: &AppId,
        instance: InstanceId,
        now_us: u64,
        rng: &mut R,
    ) -> Vec<Effect> {
        let mut effects = Vec::new();
        if self.owners.get(&instance) != Some(app) {
            return effects;
        }
        self.mark_unresponsive(app, instance, now_us, rng, &mut effects);
        effects
    }

    /// Marks healthy instances whose last heartbeat is older than the timeout.
    pub fn sweep<R: Rng + ?Sized>(&mut self, now_us: u64, rng: &mut R) -> Vec<Effect> {
        let timeout = self.config.timeout_us();
        let stale: Vec<(AppId, InstanceId)> = self
            .apps
            .values()
            .flat_map(|a| {
                a.instances
                    .iter()
                    .filter(|(_, r)| {
                        r.status.is_healthy() && now_us.saturating_sub(r.last_heartbeat_us) > timeout
                    })
                    .map(|(id, _)| (a.app_id.clone(), *id))
            })
            .collect();
        let mut effects = Vec::new();
        for (app, instance) in stale {
            self.mark_unresponsive(&app, instance, now_us, rng, &mut effects);
        }
        effects
    }

    fn mark_unresponsive<R: Rng + ?Sized>(
        &mut self,
        app: &AppId,
        instance: InstanceId,
        now_us: u64,
        rng: &mut R,
        effects: &mut Vec<Effect>,
    ) {
        let Some(record) = self.apps.get(app) else { return };
        let Some(inst) = record.instances.get(&instance) else { return };
        if !inst.status.is_healthy() {
            return;
        }
        let was_active = record.active == Some(instance);
        self.set_status(app, instance, InstanceStatus::Unresponsive, now_us, effects);
        if was_active {
            self.failover(app, rng);
            self.reconcile(now_us, effects);
        }
    }

    fn set_status(
        &mut self,
        app: &AppId,
        instance: InstanceId,
        status: InstanceStatus,
        now_us: u64,
        effects: &mut Vec<Effect>,
    ) {
        let Some(inst) = self
            .apps
            .get_mut(app)
            .and_then(|a| a.instances.get_mut(&instance))
        else {
            return;
        };
        if inst.status != status {
            inst.status = status;
            effects.push(Effect::Checkpoint(StatusEvent::Transition {
                app_id: app.clone(),
                instance,
                status,
                at_us: now_us,
            }));
        }
    }

    /// Picks a uniformly random healthy, registered instance as the app's
    /// active one, or clears the active slot when none is left. Does not
    /// publish; callers follow up with [`Self::reconcile`].
    fn failover<R: Rng + ?Sized>(&mut self, app: &AppId, rng: &mut R) -> Option<InstanceId> {
        let record = self.apps.get_mut(app)?;
        let candidates = record.candidates();
        record.active = if candidates.is_empty() {
            None
        } else {
            Some(candidates[rng.gen_range(0..candidates.len())])
        };
        record.active
    }

    /// Re-runs consolidation over the active instances and publishes every
    /// (target, assignment set) pair that differs from what was last sent.
    pub fn reconcile(&mut self, now_us: u64, effects: &mut Vec<Effect>) {
        let inputs: Vec<(AppId, Manifest)> = self
            .apps
            .values()
            .filter_map(|a| a.active_manifest().map(|m| (a.app_id.clone(), m.clone())))
            .collect();
        let result = consolidate(&inputs);
        self.unmet = result.unmet;

        let mut retired: Vec<AppId> = Vec::new();
        for (app, record) in &self.apps {
            if record.active.is_none() && self.published.contains_key(app) {
                retired.push(app.clone());
            }
        }
        for app in retired {
            self.published.remove(&app);
        }

        for (app, set) in result.per_app {
            let target = self.apps[&app].active.expect("inputs come from active instances");
            let unchanged = self
                .published
                .get(&app)
                .is_some_and(|m| m.target == target && m.assignments == set);
            if unchanged {
                continue;
            }
            self.last_epoch = now_us.max(self.last_epoch + 1);
            let msg = AssignmentMsg {
                app_id: app.clone(),
                target,
                epoch: self.last_epoch,
                assignments: set,
            };
            effects.push(Effect::Publish(msg.clone()));
            effects.push(Effect::Checkpoint(StatusEvent::Published(msg.clone())));
            self.published.insert(app, msg);
        }
    }

    pub fn status(&self, filter: Option<&AppId>) -> Result<Vec<AppStatus>, CoordinatorError> {
        let records: Vec<&AppRecord> = match filter {
            Some(app) => alloc::vec![self
                .apps
                .get(app)
                .ok_or_else(|| CoordinatorError::UnknownApp(app.clone()))?],
            None => self.apps.values().collect(),
        };
        Ok(records
            .into_iter()
            .map(|r| AppStatus {
                app_id: r.app_id.clone(),
                active: r.active,
                instances: r.instances.iter().map(|(id, i)| (*id, i.clone())).collect(),
                unmet: self
                    .unmet
                    .iter()
                    .filter(|u| u.app_id == r.app_id)
                    .map(|u| (u.pattern.clone(), u.reason))
                    .collect(),
            })
            .collect())
    }

    /// Rebuilds state from archived checkpoint events, oldest first.
    ///
    /// Instances come back with their last recorded status and a fresh
    /// heartbeat stamp of `now_us`, so live instances are not swept before
    /// their next heartbeat arrives. The last published assignment of every
    /// app is restored too: if consolidation over the recovered state yields
    /// the same sets, nothing is re-published and producers see no change.
    pub fn recover<R: Rng + ?Sized>(
        config: CoordinatorConfig,
        events: impl IntoIterator<Item = StatusEvent>,
        now_us: u64,
        rng: &mut R,
    ) -> (Self, Vec<Effect>) {
        let mut c = Coordinator::new(config);
        for event in events {
            match event {
                StatusEvent::Registered {
                    identity, manifest, ..
                } => {
                    if c.owners.get(&identity.instance).is_some_and(|o| o != &identity.app_id) {
                        continue;
                    }
                    c.apply_registration(&identity.app_id, identity.instance, manifest, now_us);
                    if let Some(inst) = c
                        .apps
                        .get_mut(&identity.app_id)
                        .and_then(|a| a.instances.get_mut(&identity.instance))
                    {
                        inst.status = InstanceStatus::Online;
                    }
                }
                StatusEvent::Transition {
                    app_id,
                    instance,
                    status,
                    ..
                } => {
                    if c.owners.get(&instance).is_some_and(|o| o != &app_id) {
                        continue;
                    }
                    c.owners.insert(instance, app_id.clone());
                    let record = c
                        .apps
                        .entry(app_id.clone())
                        .or_insert_with(|| AppRecord::new(app_id.clone()));
                    record
                        .instances
                        .entry(instance)
                        .or_insert(InstanceRecord {
                            status,
                            last_heartbeat_us: now_us,
                            manifest: None,
                        })
                        .status = status;
                }
                StatusEvent::Published(msg) => {
                    c.last_epoch = c.last_epoch.max(msg.epoch);
                    if let Some(record) = c.apps.get_mut(&msg.app_id) {
                        record.active = Some(msg.target);
                    }
                    c.published.insert(msg.app_id.clone(), msg);
                }
            }
        }
        for record in c.apps.values_mut() {
            for inst in record.instances.values_mut() {
                inst.last_heartbeat_us = now_us;
            }
        }
        let mut effects = Vec::new();
        let apps: Vec<AppId> = c.apps.keys().cloned().collect();
        for app in apps {
            let record = &c.apps[&app];
            let active_ok = record
                .active
                .and_then(|a| record.instances.get(&a))
                .is_some_and(|r| r.status.is_healthy() && r.manifest.is_some());
            if !active_ok {
                c.failover(&app, rng);
            }
        }
        c.reconcile(now_us, &mut effects);
        (c, effects)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{Frequency, Rate, Roles};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn app(s: &str) -> AppId {
        AppId::new(s).unwrap()
    }

    fn ident(a: &str, id: u128) -> AppIdentity {
        AppIdentity {
            app_id: app(a),
            instance: InstanceId(id),
            roles: Roles::BOTH,
        }
    }

    fn producer() -> Manifest {
        Manifest::new().capability(DataKey::parse("fleet.k").unwrap(), Some(20.0), false)
    }

    fn consumer(hz: f64) -> Manifest {
        Manifest::new().interest(KeyPattern::parse("fleet.k").unwrap(), Some(hz))
    }

    fn publishes(effects: &[Effect]) -> Vec<&AssignmentMsg> {
        effects
            .iter()
            .filter_map(|e| match e {
                Effect::Publish(m) => Some(m),
                _ => None,
            })
            .collect()
    }

    fn rng() -> StdRng {
        StdRng::seed_from_u64(7)
    }

    #[test]
    fn registration_drives_assignments() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let mut r = rng();
        let (reg, fx) = c.register(&ident("p", 1), &producer(), 10, &mut r).unwrap();
        assert!(reg.active);
        assert!(reg.assignments.is_empty());
        // empty set published once so the producer learns it is active
        assert_eq!(publishes(&fx).len(), 1);

        c.register(&ident("x", 2), &consumer(10.0), 20, &mut r).unwrap();
        let (_, fx) = c.register(&ident("y", 3), &consumer(5.0), 30, &mut r).unwrap();
        // only y's own empty set is new; p's set stays at 10 Hz from x
        let p_msgs: Vec<_> = publishes(&fx).into_iter().filter(|m| m.app_id == app("p")).collect();
        assert!(p_msgs.is_empty());
        let p = c.published(&app("p")).unwrap();
        assert_eq!(
            p.assignments.get(&DataKey::parse("fleet.k").unwrap()),
            Some(Rate::Hz(Frequency::new(10.0).unwrap()))
        );
    }

    #[test]
    fn reserved_and_duplicate_rejected() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let mut r = rng();
        let bad = Manifest::new().capability(DataKey::parse("sdnator.assignment.p").unwrap(), None, false);
        assert!(matches!(
            c.register(&ident("p", 1), &bad, 0, &mut r),
            Err(CoordinatorError::ReservedNamespace(_))
        ));
        c.register(&ident("p", 1), &producer(), 0, &mut r).unwrap();
        assert!(matches!(
            c.register(&ident("q", 1), &producer(), 0, &mut r),
            Err(CoordinatorError::DuplicateInstanceId { .. })
        ));
        // re-registering the same instance is fine
        c.register(&ident("p", 1), &producer(), 1, &mut r).unwrap();
    }

    #[test]
    fn second_instance_stays_standby() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let mut r = rng();
        c.register(&ident("x", 9), &consumer(1.0), 0, &mut r).unwrap();
        let (first, _) = c.register(&ident("p", 1), &producer(), 0, &mut r).unwrap();
        let (second, _) = c.register(&ident("p", 2), &producer(), 0, &mut r).unwrap();
        assert!(first.active);
        assert!(!second.active);
        assert!(second.assignments.is_empty());
        assert_eq!(c.app(&app("p")).unwrap().active, Some(InstanceId(1)));
    }

    #[test]
    fn offline_heartbeat_fails_over_immediately() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let mut r = rng();
        c.register(&ident("x", 9), &consumer(1.0), 0, &mut r).unwrap();
        c.register(&ident("p", 1), &producer(), 0, &mut r).unwrap();
        c.register(&ident("p", 2), &producer(), 0, &mut r).unwrap();
        let fx = c.on_heartbeat(&app("p"), InstanceId(1), HeartbeatStatus::Offline, 5, &mut r);
        let msgs = publishes(&fx);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].target, InstanceId(2));
        assert!(!msgs[0].assignments.is_empty());
        assert_eq!(c.app(&app("p")).unwrap().active, Some(InstanceId(2)));
    }

    #[test]
    fn idle_is_healthy() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let mut r = rng();
        c.register(&ident("p", 1), &producer(), 0, &mut r).unwrap();
        c.register(&ident("p", 2), &producer(), 0, &mut r).unwrap();
        let fx = c.on_heartbeat(&app("p"), InstanceId(1), HeartbeatStatus::Idle, 10, &mut r);
        assert!(publishes(&fx).is_empty());
        assert_eq!(c.app(&app("p")).unwrap().active, Some(InstanceId(1)));
    }

    #[test]
    fn sweep_with_simulated_clock() {
        let cfg = CoordinatorConfig {
            heartbeat_interval_us: 1_000,
            timeout_multiplier: 3,
        };
        let mut c = Coordinator::new(cfg);
        let mut r = rng();
        c.register(&ident("x", 9), &consumer(1.0), 0, &mut r).unwrap();
        c.register(&ident("p", 1), &producer(), 0, &mut r).unwrap();
        c.register(&ident("p", 2), &producer(), 0, &mut r).unwrap();
        // instance 2 and the consumer keep beating every interval, instance 1 goes silent
        let mut failed_over_at = None;
        for t in (1_000..=10_000).step_by(1_000) {
            c.on_heartbeat(&app("p"), InstanceId(2), HeartbeatStatus::Online, t, &mut r);
            c.on_heartbeat(&app("x"), InstanceId(9), HeartbeatStatus::Idle, t, &mut r);
            let fx = c.sweep(t, &mut r);
            if failed_over_at.is_none() && !publishes(&fx).is_empty() {
                failed_over_at = Some(t);
            }
        }
        // silent since t=0: stale once now - 0 > 3000
        assert_eq!(failed_over_at, Some(4_000));
        let p = c.app(&app("p")).unwrap();
        assert_eq!(p.instances[&InstanceId(1)].status, InstanceStatus::Unresponsive);
        assert_eq!(p.active, Some(InstanceId(2)));
        assert_eq!(c.app(&app("x")).unwrap().instances[&InstanceId(9)].status, InstanceStatus::Idle);
    }

    #[test]
    fn reference_timeout_oracle() {
        // Each instance beats at a random subset of ticks; an instance must be
        // UNRESPONSIVE at tick t iff its last beat is older than the timeout
        // (and it never reported offline).
        use rand::Rng as _;
        let cfg = CoordinatorConfig {
            heartbeat_interval_us: 100,
            timeout_multiplier: 3,
        };
        for seed in 0..50 {
            let mut r = StdRng::seed_from_u64(seed);
            let mut c = Coordinator::new(cfg);
            let n = 4u128;
            for i in 0..n {
                c.register(&ident("p", i), &producer(), 0, &mut r).unwrap();
            }
            let mut last = [0u64; 4];
            let mut dead = [false; 4];
            for tick in 1..60u64 {
                let now = tick * 100;
                for i in 0..n as usize {
                    if r.gen_bool(0.6) {
                        c.on_heartbeat(&app("p"), InstanceId(i as u128), HeartbeatStatus::Online, now, &mut r);
                        last[i] = now;
                        dead[i] = false;
                    }
                }
                c.sweep(now, &mut r);
                for i in 0..n as usize {
                    if now - last[i] > cfg.timeout_us() {
                        dead[i] = true;
                    }
                    let status = c.app(&app("p")).unwrap().instances[&InstanceId(i as u128)].status;
                    assert_eq!(status == InstanceStatus::Unresponsive, dead[i], "seed {seed} tick {tick}");
                }
                let active = c.app(&app("p")).unwrap().active;
                if let Some(a) = active {
                    assert!(!dead[a.0 as usize]);
                } else {
                    assert!(dead.iter().all(|d| *d));
                }
            }
        }
    }

    #[test]
    fn random_failover_is_spread() {
        let mut counts = [0u32; 3];
        let mut r = StdRng::seed_from_u64(2024);
        for _ in 0..300 {
            let mut c = Coordinator::new(CoordinatorConfig::default());
            c.register(&ident("p", 100), &producer(), 0, &mut r).unwrap();
            for i in 0..3 {
                c.register(&ident("p", i), &producer(), 0, &mut r).unwrap();
            }
            c.on_heartbeat(&app("p"), InstanceId(100), HeartbeatStatus::Offline, 1, &mut r);
            let a = c.app(&app("p")).unwrap().active.unwrap();
            counts[a.0 as usize] += 1;
        }
        assert!(counts.iter().all(|&n| n >= 50), "{counts:?}");
    }

    #[test]
    fn last_instance_lost_makes_interest_unmet() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let mut r = rng();
        c.register(&ident("x", 9), &consumer(1.0), 0, &mut r).unwrap();
        c.register(&ident("p", 1), &producer(), 0, &mut r).unwrap();
        assert!(c.unmet().is_empty());
        c.on_connection_lost(&app("p"), InstanceId(1), 5, &mut r);
        assert_eq!(c.app(&app("p")).unwrap().active, None);
        let s = c.status(Some(&app("x"))).unwrap();
        assert_eq!(s[0].unmet, alloc::vec![(KeyPattern::parse("fleet.k").unwrap(), UnmetReason::NoProducer)]);
        assert!(matches!(c.status(Some(&app("nope"))), Err(CoordinatorError::UnknownApp(_))));
    }

    #[test]
    fn offline_requires_fresh_heartbeat_to_return() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let mut r = rng();
        c.register(&ident("p", 1), &producer(), 0, &mut r).unwrap();
        c.on_heartbeat(&app("p"), InstanceId(1), HeartbeatStatus::Offline, 1, &mut r);
        c.sweep(10_000_000, &mut r);
        c.on_connection_lost(&app("p"), InstanceId(1), 10_000_001, &mut r);
        assert_eq!(c.app(&app("p")).unwrap().instances[&InstanceId(1)].status, InstanceStatus::Offline);
        c.on_heartbeat(&app("p"), InstanceId(1), HeartbeatStatus::Online, 10_000_002, &mut r);
        let p = c.app(&app("p")).unwrap();
        assert_eq!(p.instances[&InstanceId(1)].status, InstanceStatus::Online);
        assert_eq!(p.active, Some(InstanceId(1)));
    }

    #[test]
    fn unknown_heartbeat_is_recorded_and_prompted() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let mut r = rng();
        let fx = c.on_heartbeat(&app("z"), InstanceId(4), HeartbeatStatus::Online, 3, &mut r);
        assert!(fx.iter().any(|e| matches!(e, Effect::RequestRegistration { .. })));
        let z = c.app(&app("z")).unwrap();
        assert_eq!(z.instances[&InstanceId(4)].manifest, None);
        assert_eq!(z.active, None);
    }

    #[test]
    fn epochs_strictly_increase() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let mut r = rng();
        let mut epochs = Vec::new();
        for i in 0..5u128 {
            let (_, fx) = c.register(&ident("p", i), &producer(), 0, &mut r).unwrap();
            epochs.extend(publishes(&fx).iter().map(|m| m.epoch));
            let (_, fx) = c
                .register(&ident(&alloc::format!("c{i}"), 100 + i), &consumer(1.0 + i as f64), 0, &mut r)
                .unwrap();
            epochs.extend(publishes(&fx).iter().map(|m| m.epoch));
        }
        assert!(epochs.windows(2).all(|w| w[0] < w[1]), "{epochs:?}");
    }

    #[test]
    fn recovery_replays_to_same_state_without_republishing() {
        let mut c = Coordinator::new(CoordinatorConfig::default());
        let mut r = rng();
        let mut log = Vec::new();
        let mut keep = |fx: Vec<Effect>| {
            for e in fx {
                if let Effect::Checkpoint(ev) = e {
                    log.push(ev);
                }
            }
        };
        keep(c.register(&ident("x", 9), &consumer(4.0), 0, &mut r).unwrap().1);
        keep(c.register(&ident("p", 1), &producer(), 1, &mut r).unwrap().1);
        keep(c.register(&ident("p", 2), &producer(), 2, &mut r).unwrap().1);
        keep(c.on_heartbeat(&app("p"), InstanceId(1), HeartbeatStatus::Offline, 3, &mut r));
        keep(c.on_heartbeat(&app("x"), InstanceId(9), HeartbeatStatus::Idle, 4, &mut r));

        let (back, fx) = Coordinator::recover(CoordinatorConfig::default(), log, 100, &mut r);
        assert!(publishes(&fx).is_empty(), "{fx:?}");
        let strip = |v: Vec<AppStatus>| -> Vec<(AppId, Option<InstanceId>, Vec<(InstanceId, InstanceStatus)>)> {
            v.into_iter()
                .map(|a| (a.app_id, a.active, a.instances.into_iter().map(|(i, r)| (i, r.status)).collect()))
                .collect()
        };
        assert_eq!(strip(back.status(None).unwrap()), strip(c.status(None).unwrap()));
        assert_eq!(back.published(&app("p")), c.published(&app("p")));
    }

    #[test]
    fn recovery_from_nothing_is_empty() {
        let (c, fx) = Coordinator::recover(CoordinatorConfig::default(), Vec::new(), 5, &mut rng());
        assert!(fx.is_empty());
        assert!(c.status(None).unwrap().is_empty());
    }
}
