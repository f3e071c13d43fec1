//! Archived records and the query shape the archive store answers.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::key::{DataKey, KeyPattern};
use crate::manifest::InstanceId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveRecord {
    pub key: DataKey,
    pub value: Vec<u8>,
    /// Microseconds since the Unix epoch, stamped by the producing client.
    pub timestamp_us: u64,
    pub producer_app: String,
    pub producer_instance: InstanceId,
}

/// Half-open `[lo, hi)` interval in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeRange {
    lo: u64,
    hi: u64,
}

impl TimeRange {
    /// `None` unless `lo < hi`.
    pub fn new(lo: u64, hi: u64) -> Option<Self> {
        (lo < hi).then_some(Self { lo, hi })
    }

    pub fn lo(self) -> u64 {
        self.lo
    }

    pub fn hi(self) -> u64 {
        self.hi
    }

    pub fn contains(self, ts: u64) -> bool {
        self.lo <= ts && ts < self.hi
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SortOrder {
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveQuery {
    pub pattern: KeyPattern,
    pub time_range: Option<TimeRange>,
    pub producer_app: Option<String>,
    pub limit: Option<u32>,
    pub order: SortOrder,
}

impl ArchiveQuery {
    pub fn new(pattern: KeyPattern) -> Self {
        Self {
            pattern,
            time_range: None,
            producer_app: None,
            limit: None,
            order: SortOrder::Ascending,
        }
    }

    /// Every record ever appended under `key`, oldest first.
    pub fn exact(key: &DataKey) -> Self {
        Self::new(KeyPattern::exact(key))
    }

    pub fn range(mut self, range: TimeRange) -> Self {
        self.time_range = Some(range);
        self
    }

    pub fn producer(mut self, app: &str) -> Self {
        self.producer_app = Some(app.into());
        self
    }

    pub fn limit(mut self, limit: u32) -> Self {
        self.limit = Some(limit);
        self
    }

    pub fn descending(mut self) -> Self {
        self.order = SortOrder::Descending;
        self
    }

    /// A pattern written with specs (`a.b:f=1`) selects only keys carrying
    /// exactly those specs; one written without specs selects every spec
    /// variant of the matching segments.
    pub fn accepts(&self, key: &DataKey, timestamp_us: u64, producer_app: &str) -> bool {
        self.pattern.matches(key)
            && self.pattern.spec_text().is_none_or(|s| key.spec_text() == Some(s))
            && self.time_range.is_none_or(|r| r.contains(timestamp_us))
            && self.producer_app.as_deref().is_none_or(|p| p == producer_app)
    }

    /// Result order between two accepted records given their append positions.
    /// Ties on the timestamp fall back to append order in both directions.
    pub fn compare(&self, a: (u64, u64), b: (u64, u64)) -> Ordering {
        let by_time = a.0.cmp(&b.0);
        let by_time = match self.order {
            SortOrder::Ascending => by_time,
            SortOrder::Descending => by_time.reverse(),
        };
        by_time.then(a.1.cmp(&b.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_range_is_half_open() {
        let r = TimeRange::new(10, 20).unwrap();
        assert!(r.contains(10));
        assert!(r.contains(19));
        assert!(!r.contains(20));
        assert!(TimeRange::new(5, 5).is_none());
        assert!(TimeRange::new(6, 5).is_none());
    }

    #[test]
    fn accepts_applies_all_filters() {
        let key = DataKey::parse("app.x.temp").unwrap();
        let q = ArchiveQuery::new(KeyPattern::parse("app.**").unwrap())
            .range(TimeRange::new(100, 200).unwrap())
            .producer("sensor");
        assert!(q.accepts(&key, 150, "sensor"));
        assert!(!q.accepts(&key, 200, "sensor"));
        assert!(!q.accepts(&key, 150, "other"));
        assert!(!q.accepts(&DataKey::parse("other.x").unwrap(), 150, "sensor"));
    }

    #[test]
    fn specs_in_a_query_pattern_select_that_variant() {
        let plain = DataKey::parse("a.b").unwrap();
        let syn = DataKey::parse("a.b:flag=syn").unwrap();
        let q = ArchiveQuery::exact(&syn);
        assert!(q.accepts(&syn, 1, "p"));
        assert!(!q.accepts(&plain, 1, "p"));
        let q = ArchiveQuery::exact(&plain);
        assert!(q.accepts(&syn, 1, "p"));
        assert!(q.accepts(&plain, 1, "p"));
    }

    #[test]
    fn ties_keep_append_order_both_ways() {
        let asc = ArchiveQuery::new(KeyPattern::parse("a.b").unwrap());
        let desc = asc.clone().descending();
        assert_eq!(asc.compare((5, 1), (5, 2)), Ordering::Less);
        assert_eq!(desc.compare((5, 1), (5, 2)), Ordering::Less);
        assert_eq!(desc.compare((6, 9), (5, 1)), Ordering::Less);
    }
}
