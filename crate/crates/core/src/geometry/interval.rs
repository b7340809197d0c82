use std::cmp::Ordering;

/// Intervals separated by a gap no larger than this are merged.
pub const MERGE_EPS: f64 = 1e-6;

/// A non-empty ray-parameter segment `[s, t]` with `s < t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    s: f64,
    t: f64,
}

impl Interval {
    /// `None` unless `s < t` and both ends are finite.
    pub fn new(s: f64, t: f64) -> Option<Self> {
        (s.is_finite() && t.is_finite() && s < t).then_some(Self { s, t })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn len(&self) -> f64 {
        self.t - self.s
    }

    pub fn contains(&self, x: f64) -> bool {
        self.s <= x && x <= self.t
    }

    fn order(&self, other: &Self) -> Ordering {
        self.s.total_cmp(&other.s).then(self.t.total_cmp(&other.t))
    }
}

/// Sorted, strictly disjoint segments: the minimal cover of a union of intervals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntervalSet {
    segments: Vec<Interval>,
}

impl IntervalSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(interval: Interval) -> Self {
        Self {
            segments: vec![interval],
        }
    }

    pub fn segments(&self) -> &[Interval] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(Interval::len).sum()
    }

    /// Index of the segment containing `x`, if any.
    pub fn segment_of(&self, x: f64) -> Option<usize> {
        // first segment whose end is >= x
        let idx = self.segments.partition_point(|iv| iv.t < x);
        (idx < self.segments.len() && self.segments[idx].s <= x).then_some(idx)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.segment_of(x).is_some()
    }

    /// Midpoints of the gaps between consecutive segments.
    pub fn gap_midpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments.windows(2).map(|w| 0.5 * (w[0].t + w[1].s))
    }
}

/// Merges `raw` into its minimal disjoint cover. Segments whose gap is at most
/// [`MERGE_EPS`] are joined. The result does not depend on the input order.
pub fn interval_union(raw: impl IntoIterator<Item = Interval>) -> IntervalSet {
    let mut raw: Vec<Interval> = raw.into_iter().collect();
    raw.sort_unstable_by(Interval::order);
    let mut segments: Vec<Interval> = Vec::with_capacity(raw.len());
    for iv in raw {
        match segments.last_mut() {
            Some(last) if iv.s - last.t <= MERGE_EPS => last.t = last.t.max(iv.t),
            _ => segments.push(iv),
        }
    }
    IntervalSet { segments }
}
