use std::cell::Cell;
use std::collections::BTreeMap;

use serde::Serialize;

/// Batch sizes `lower..=upper` that share the partition count `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GranRange {
    pub lower: u64,
    pub upper: u64,
    pub n: u64,
}

impl GranRange {
    pub fn contains(&self, tokens: u64) -> bool {
        self.lower <= tokens && tokens <= self.upper
    }
}

/// What [`GranularityIndex::record`] did with a search result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordOutcome {
    Inserted,
    /// The range for `n` grew to cover the batch, possibly clipped.
    Extended { clipped: bool },
    /// Kept in the exact cache only; a range would break the ordering.
    CacheOnly,
}

/// Disjoint batch-size ranges ordered by lower bound, each mapped to a
/// partition count, plus an exact cache. Lookups are binary searches whose
/// comparisons are counted.
#[derive(Debug, Clone, Default)]
pub struct GranularityIndex {
    ranges: Vec<GranRange>,
    cache: BTreeMap<u64, u64>,
    comparisons: Cell<u64>,
    conflicts: u64,
}

impl GranularityIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ranges(&self) -> &[GranRange] {
        &self.ranges
    }

    pub fn cache(&self) -> &BTreeMap<u64, u64> {
        &self.cache
    }

    pub fn cached(&self, tokens: u64) -> Option<u64> {
        self.cache.get(&tokens).copied()
    }

    /// Key comparisons made by lookups and inserts so far.
    pub fn comparisons(&self) -> u64 {
        self.comparisons.get()
    }

    /// Range updates that were clipped or dropped to keep the ordering.
    pub fn conflicts(&self) -> u64 {
        self.conflicts
    }

    /// Number of ranges starting at or below `tokens`.
    fn position(&self, tokens: u64) -> usize {
        let counter = &self.comparisons;
        self.ranges.partition_point(|r| {
            counter.set(counter.get() + 1);
            r.lower <= tokens
        })
    }

    /// The range containing `tokens`, if any.
    pub fn find(&self, tokens: u64) -> Option<GranRange> {
        let pos = self.position(tokens);
        let candidate = self.ranges[..pos].last()?;
        candidate.contains(tokens).then_some(*candidate)
    }

    /// Caches a batch size already covered by a range.
    pub fn remember(&mut self, tokens: u64, n: u64) {
        self.cache.insert(tokens, n);
    }

    /// Stores a search result for a batch size no range covers: the range
    /// for `n` is extended to reach `tokens`, or a singleton range is added.
    /// Either way `tokens -> n` enters the cache.
    pub fn record(&mut self, tokens: u64, n: u64) -> RecordOutcome {
        debug_assert!(self.find(tokens).is_none());
        self.cache.insert(tokens, n);
        if let Some(idx) = self.ranges.iter().position(|r| r.n == n) {
            return self.extend(idx, tokens);
        }
        let pos = self.position(tokens);
        let prev_ok = pos == 0 || self.ranges[pos - 1].n <= n;
        let next_ok = pos == self.ranges.len() || self.ranges[pos].n >= n;
        if prev_ok && next_ok {
            self.ranges.insert(
                pos,
                GranRange {
                    lower: tokens,
                    upper: tokens,
                    n,
                },
            );
            RecordOutcome::Inserted
        } else {
            self.conflicts += 1;
            RecordOutcome::CacheOnly
        }
    }

    fn extend(&mut self, idx: usize, tokens: u64) -> RecordOutcome {
        let r = self.ranges[idx];
        let n = r.n;
        let mut clipped = false;
        if tokens < r.lower {
            let mut floor = if idx > 0 { self.ranges[idx - 1].upper + 1 } else { 0 };
            if let Some((&b, _)) = self.cache.range(floor..r.lower).rev().find(|(_, &m)| m != n) {
                floor = b + 1;
            }
            let lower = tokens.max(floor);
            clipped = lower != tokens;
            self.ranges[idx].lower = lower.min(r.lower);
        } else {
            let mut ceil = self.ranges.get(idx + 1).map_or(u64::MAX, |next| next.lower - 1);
            if ceil > r.upper {
                if let Some((&b, _)) = self.cache.range(r.upper + 1..=ceil).find(|(_, &m)| m != n) {
                    ceil = b - 1;
                }
            }
            let upper = tokens.min(ceil);
            clipped = clipped || upper != tokens;
            self.ranges[idx].upper = upper.max(r.upper);
        }
        if clipped {
            self.conflicts += 1;
        }
        RecordOutcome::Extended { clipped }
    }

    /// Ranges are disjoint and sorted, their partition counts never
    /// decrease, and every cached batch inside a range maps to its count.
    pub fn is_consistent(&self) -> bool {
        let sorted = self
            .ranges
            .windows(2)
            .all(|w| w[0].upper < w[1].lower && w[0].n <= w[1].n);
        let well_formed = self.ranges.iter().all(|r| r.lower <= r.upper);
        let cache_agrees = self
            .cache
            .iter()
            .all(|(&b, &n)| self.ranges.iter().filter(|r| r.contains(b)).all(|r| r.n == n));
        sorted && well_formed && cache_agrees
    }
}
