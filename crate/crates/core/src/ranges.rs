use serde::{Deserialize, Serialize};

/// A sorted set of disjoint, non-adjacent half-open byte ranges.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeSet {
    ranges: Vec<(u64, u64)>,
}

impl RangeSet {
    pub fn new() -> Self {
        RangeSet::default()
    }

    /// Builds a set from arbitrary ranges, merging overlaps. Empty ranges are dropped.
    pub fn from_ranges(iter: impl IntoIterator<Item = (u64, u64)>) -> Self {
        let mut set = RangeSet::new();
        for (s, e) in iter {
            set.insert(s, e);
        }
        set
    }

    pub fn full(len: u64) -> Self {
        RangeSet::from_ranges([(0, len)])
    }

    pub fn ranges(&self) -> &[(u64, u64)] {
        &self.ranges
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn insert(&mut self, start: u64, end: u64) {
        if start >= end {
            return;
        }
        let (mut s, mut e) = (start, end);
        // Ranges that overlap or touch [s, e) get merged.
        let first = self.ranges.partition_point(|&(_, re)| re < s);
        let mut last = first;
        while last < self.ranges.len() && self.ranges[last].0 <= e {
            s = s.min(self.ranges[last].0);
            e = e.max(self.ranges[last].1);
            last += 1;
        }
        self.ranges.splice(first..last, [(s, e)]);
    }

    /// End of the contiguous run starting at zero (0 when nothing at offset 0).
    pub fn prefix_end(&self) -> u64 {
        match self.ranges.first() {
            Some(&(0, e)) => e,
            _ => 0,
        }
    }

    pub fn covers(&self, len: u64) -> bool {
        len == 0 || self.prefix_end() >= len
    }

    pub fn total(&self) -> u64 {
        self.ranges.iter().map(|(s, e)| e - s).sum()
    }

    pub fn contains_range(&self, start: u64, end: u64) -> bool {
        start >= end || self.ranges.iter().any(|&(s, e)| s <= start && end <= e)
    }

    /// Keeps only `[0, end)`.
    pub fn truncate(&mut self, end: u64) {
        self.ranges.retain(|&(s, _)| s < end);
        if let Some(last) = self.ranges.last_mut() {
            last.1 = last.1.min(end);
        }
    }
}
