//! Failure scenarios shared by the coordinator tests and the acceptance run.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use sdnator::due::{Session, WriteOutcome};
use sdnator_core::key::{DataKey, KeyPattern};
use sdnator_core::manifest::{Manifest, Roles, WriteFlags};
use sdnator_core::wire::Envelope;

use super::{wait_until, Stack};

type Arrival = (Instant, Vec<u8>);

/// Arrival time and value of every delivery.
#[derive(Clone, Default)]
pub struct Timeline(pub Arc<Mutex<Vec<Arrival>>>);

impl Timeline {
    pub fn push(&self) -> impl FnMut(&Envelope) + Send + 'static {
        let v = self.0.clone();
        move |e: &Envelope| v.lock().unwrap().push((Instant::now(), e.value.clone()))
    }

    pub fn count_between(&self, from: Instant, to: Instant) -> usize {
        self.0.lock().unwrap().iter().filter(|(t, _)| *t >= from && *t < to).count()
    }

    pub fn first_after(&self, after: Instant, tag: u8) -> Option<Instant> {
        self.0
            .lock()
            .unwrap()
            .iter()
            .find(|(t, v)| *t > after && v.first() == Some(&tag))
            .map(|(t, _)| *t)
    }
}

/// A writer thread offering `hz` writes per second, catching up after
/// stalls, until stopped or its session closes. Values start with `tag`.
pub struct Writer {
    stop: Arc<AtomicBool>,
    handle: Option<thread::JoinHandle<u64>>,
}

impl Writer {
    pub fn start(session: Session, key: DataKey, tag: u8, hz: f64, flags: WriteFlags) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let s = stop.clone();
        let handle = thread::spawn(move || {
            let start = Instant::now();
            let mut n = 0u64;
            let mut accepted = 0u64;
            while !s.load(Ordering::Relaxed) {
                let mut v = vec![tag];
                v.extend_from_slice(&n.to_le_bytes());
                match session.write(&key, &v, flags) {
                    Ok(WriteOutcome::Accepted) => accepted += 1,
                    Ok(_) => {}
                    Err(_) => break,
                }
                n += 1;
                let next = start + Duration::from_secs_f64(n as f64 / hz);
                if let Some(wait) = next.checked_duration_since(Instant::now()) {
                    thread::sleep(wait);
                }
            }
            accepted
        });
        Writer {
            stop,
            handle: Some(handle),
        }
    }

    /// Stops the thread; returns the accepted write count.
    pub fn finish(mut self) -> u64 {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.take().unwrap().join().unwrap()
    }
}

impl Drop for Writer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

pub struct Failover {
    /// From the abort of the active instance to the first delivery from the
    /// standby; `None` if the stream never resumed.
    pub gap: Option<Duration>,
    pub heartbeat: Duration,
}

/// Two instances of one producer app write the same key; the active one is
/// aborted and the consumer waits for the standby's values.
pub fn failover(stack: &Stack) -> Failover {
    let k = DataKey::parse("line.sensor.temp").unwrap();
    let consumer = stack.session(
        "monitor",
        Roles::CONSUMER,
        Manifest::new().interest(KeyPattern::parse("line.sensor.*").unwrap(), None),
    );
    let timeline = Timeline::default();
    let obs = consumer.observe(KeyPattern::parse("line.sensor.temp").unwrap()).unwrap();
    obs.on_data(timeline.push());
    let manifest = Manifest::new().capability(k.clone(), None, false);
    let instances = [
        stack.session("sensor", Roles::PRODUCER, manifest.clone()),
        stack.session("sensor", Roles::PRODUCER, manifest),
    ];
    assert!(
        wait_until(Duration::from_secs(5), || instances.iter().any(|s| s.is_assigned(&k))),
        "no instance was assigned"
    );
    let writers: Vec<Writer> = instances
        .iter()
        .enumerate()
        .map(|(i, s)| Writer::start(s.clone(), k.clone(), i as u8, 200.0, WriteFlags::PUB_ONLY))
        .collect();
    thread::sleep(Duration::from_millis(500));
    let active = instances.iter().position(|s| s.is_assigned(&k)).unwrap();
    let standby = 1 - active;
    let killed_at = Instant::now();
    instances[active].abort();
    let deadline = killed_at + Duration::from_secs(10);
    let mut resumed = None;
    while Instant::now() < deadline && resumed.is_none() {
        resumed = timeline.first_after(killed_at, standby as u8);
        thread::sleep(Duration::from_millis(2));
    }
    drop(writers);
    Failover {
        gap: resumed.map(|t| t - killed_at),
        heartbeat: stack.heartbeat,
    }
}

pub struct RestartDip {
    pub before: usize,
    pub during: usize,
    pub recovered: bool,
}

impl RestartDip {
    /// Fractional drop in deliveries across the restart window.
    pub fn dip(&self) -> f64 {
        if self.before == 0 {
            return 1.0;
        }
        (1.0 - self.during as f64 / self.before as f64).max(0.0)
    }
}

/// Steady production while the coordinator is killed and restarted; compares
/// deliveries in the window around the restart with the window before it.
pub fn coordinator_restart(stack: &mut Stack, window: Duration, outage: Duration) -> RestartDip {
    let k = DataKey::parse("line.press.force").unwrap();
    let consumer = stack.session(
        "monitor",
        Roles::CONSUMER,
        Manifest::new().interest(KeyPattern::parse("line.press.force").unwrap(), None),
    );
    let timeline = Timeline::default();
    let obs = consumer.observe(KeyPattern::parse("line.press.force").unwrap()).unwrap();
    obs.on_data(timeline.push());
    let producer = stack.session("press", Roles::PRODUCER, Manifest::new().capability(k.clone(), None, false));
    assert!(producer.wait_assigned(&k, Duration::from_secs(5)));
    let writer = Writer::start(producer.clone(), k, 0, 500.0, WriteFlags::NONE);
    thread::sleep(Duration::from_millis(300));

    let t0 = Instant::now();
    thread::sleep(window);
    let t1 = Instant::now();
    stack.coordinator.take().unwrap().kill();
    thread::sleep(outage);
    stack.start_coordinator();
    let recovered = stack.coordinator.as_ref().unwrap().recovered();
    let rest = window.saturating_sub(t1.elapsed());
    thread::sleep(rest);
    let t2 = Instant::now();
    thread::sleep(Duration::from_millis(100));
    writer.finish();
    RestartDip {
        before: timeline.count_between(t0, t1),
        during: timeline.count_between(t1, t2),
        recovered,
    }
}
