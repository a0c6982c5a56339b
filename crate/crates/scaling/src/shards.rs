//! Parameter key space, shard ownership and best-fit rebalancing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type PsId = u32;

/// Half-open interval `[start, end)` of parameter ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyRange {
    pub start: u64,
    pub end: u64,
}

impl KeyRange {
    pub const fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub const fn len(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub const fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl fmt::Display for KeyRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Disjoint ranges held by one node, adjacent ranges merged.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeySet {
    ranges: BTreeMap<u64, u64>,
}

impl KeySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ranges(ranges: impl IntoIterator<Item = KeyRange>) -> Option<Self> {
        let mut s = Self::new();
        for r in ranges {
            if !s.insert(r) {
                return None;
            }
        }
        Some(s)
    }

    pub fn len(&self) -> u64 {
        self.ranges.iter().map(|(s, e)| e - s).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn ranges(&self) -> impl Iterator<Item = KeyRange> + '_ {
        self.ranges.iter().map(|(s, e)| KeyRange::new(*s, *e))
    }

    /// Whether every key of `r` is held.
    pub fn contains(&self, r: KeyRange) -> bool {
        if r.is_empty() {
            return true;
        }
        self.ranges.range(..=r.start).next_back().is_some_and(|(_, e)| *e >= r.end)
    }

    /// Whether any key of `r` is held.
    pub fn overlaps(&self, r: KeyRange) -> bool {
        !r.is_empty()
            && (self.ranges.range(..=r.start).next_back().is_some_and(|(_, e)| *e > r.start)
                || self.ranges.range(r.start..r.end).next().is_some())
    }

    /// Adds `r`; returns false (and changes nothing) if any key is already held.
    pub fn insert(&mut self, r: KeyRange) -> bool {
        if r.is_empty() {
            return true;
        }
        if self.overlaps(r) {
            return false;
        }
        let (mut start, mut end) = (r.start, r.end);
        if let Some((&s, &e)) = self.ranges.range(..start).next_back() {
            if e == start {
                self.ranges.remove(&s);
                start = s;
            }
        }
        if let Some(e) = self.ranges.remove(&end) {
            end = e;
        }
        self.ranges.insert(start, end);
        true
    }

    /// Removes `r`; returns false (and changes nothing) unless all of it is held.
    pub fn remove(&mut self, r: KeyRange) -> bool {
        if r.is_empty() {
            return true;
        }
        if !self.contains(r) {
            return false;
        }
        let (&s, &e) = self.ranges.range(..=r.start).next_back().expect("contained");
        self.ranges.remove(&s);
        if s < r.start {
            self.ranges.insert(s, r.start);
        }
        if r.end < e {
            self.ranges.insert(r.end, e);
        }
        true
    }

    /// Splits `amount` keys off the top of the set, highest ranges first.
    fn take_top(&mut self, mut amount: u64) -> Vec<KeyRange> {
        let mut out = Vec::new();
        while amount > 0 {
            let Some((&s, &e)) = self.ranges.iter().next_back() else { break };
            let take = amount.min(e - s);
            let r = KeyRange::new(e - take, e);
            self.remove(r);
            out.push(r);
            amount -= take;
        }
        out.reverse();
        out
    }
}

/// One contiguous range of parameters held by a PS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterShard {
    pub owner: PsId,
    pub range: KeyRange,
}

/// Ownership of the key space `[0, total)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardMap {
    total: u64,
    owners: BTreeMap<PsId, KeySet>,
}

/// Transfer of `range` from one PS to another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Move {
    pub from: PsId,
    pub to: PsId,
    pub range: KeyRange,
}

impl ShardMap {
    /// Contiguous split of `[0, total)` over `ps` in id order, following
    /// [`target_loads`].
    pub fn even(total: u64, ps: &BTreeSet<PsId>) -> Result<Self> {
        let targets = target_loads(total, ps)?;
        let mut start = 0;
        let mut owners = BTreeMap::new();
        for (p, n) in targets {
            let mut set = KeySet::new();
            set.insert(KeyRange::new(start, start + n));
            owners.insert(p, set);
            start += n;
        }
        Ok(Self { total, owners })
    }

    /// Validates that `shards` partition `[0, total)`.
    pub fn from_shards(total: u64, shards: &[ParameterShard]) -> Result<Self> {
        let mut owners: BTreeMap<PsId, KeySet> = BTreeMap::new();
        let mut all = KeySet::new();
        for s in shards {
            if !all.insert(s.range) {
                return Err(Error::Partition(format!("range {} is owned twice", s.range)));
            }
            owners.entry(s.owner).or_default().insert(s.range);
        }
        let map = Self { total, owners };
        map.check_partition()?;
        Ok(map)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn ps(&self) -> impl Iterator<Item = PsId> + '_ {
        self.owners.keys().copied()
    }

    pub fn shards(&self) -> Vec<ParameterShard> {
        let mut v: Vec<ParameterShard> =
            self.owners.iter().flat_map(|(p, s)| s.ranges().map(|range| ParameterShard { owner: *p, range })).collect();
        v.sort_by_key(|s| s.range.start);
        v
    }

    pub fn keys_of(&self, ps: PsId) -> KeySet {
        self.owners.get(&ps).cloned().unwrap_or_default()
    }

    pub fn ranges_of(&self, ps: PsId) -> Vec<KeyRange> {
        self.owners.get(&ps).map(|s| s.ranges().collect()).unwrap_or_default()
    }

    pub fn owner_of(&self, key: u64) -> Option<PsId> {
        self.owners.iter().find(|(_, s)| s.contains(KeyRange::new(key, key + 1))).map(|(p, _)| *p)
    }

    pub fn load(&self, ps: PsId) -> u64 {
        self.owners.get(&ps).map_or(0, KeySet::len)
    }

    pub fn loads(&self) -> BTreeMap<PsId, u64> {
        self.owners.iter().map(|(p, s)| (*p, s.len())).collect()
    }

    pub fn check_partition(&self) -> Result<()> {
        let mut next = 0;
        for s in self.shards() {
            if s.range.start != next {
                return Err(Error::Partition(format!("keys [{next}, {}) have no owner or two", s.range.start.max(next))));
            }
            next = s.range.end;
        }
        if next != self.total {
            return Err(Error::Partition(format!("keys [{next}, {}) have no owner", self.total)));
        }
        Ok(())
    }

    /// Applies `moves`; each range must be held by its `from` PS at that point.
    pub fn apply(&self, moves: &[Move]) -> Result<ShardMap> {
        let mut next = self.clone();
        for m in moves {
            let removed = next.owners.get_mut(&m.from).is_some_and(|s| s.remove(m.range));
            if !removed {
                return Err(Error::Partition(format!("PS {} does not own {}", m.from, m.range)));
            }
            if !next.owners.entry(m.to).or_default().insert(m.range) {
                return Err(Error::Partition(format!("PS {} already owns part of {}", m.to, m.range)));
            }
        }
        next.owners.retain(|_, s| !s.is_empty());
        Ok(next)
    }
}

/// Per-PS target loads: `total / n` each, with the remainder going one key
/// apiece to the lowest ids.
pub fn target_loads(total: u64, ps: &BTreeSet<PsId>) -> Result<BTreeMap<PsId, u64>> {
    let n = ps.len() as u64;
    if n == 0 {
        return Err(Error::NoServers);
    }
    let (base, extra) = (total / n, total % n);
    Ok(ps.iter().enumerate().map(|(i, p)| (*p, base + u64::from((i as u64) < extra))).collect())
}

/// Least number of keys any plan reaching [`target_loads`] must move.
pub fn movement_lower_bound(map: &ShardMap, ps: &BTreeSet<PsId>) -> Result<u64> {
    let targets = target_loads(map.total(), ps)?;
    Ok(map.loads().iter().map(|(p, l)| l.saturating_sub(targets.get(p).copied().unwrap_or(0))).sum())
}

/// Moves that take `map` to the target loads of `ps`. Surplus keys go from
/// the most loaded PS to the most underloaded one until both sides balance;
/// only surplus keys move.
pub fn best_fit_assign(map: &ShardMap, ps: &BTreeSet<PsId>) -> Result<Vec<Move>> {
    let targets = target_loads(map.total(), ps)?;
    let mut surplus: BTreeMap<PsId, u64> = BTreeMap::new();
    let mut deficit: BTreeMap<PsId, u64> = BTreeMap::new();
    for p in map.ps().chain(ps.iter().copied()).collect::<BTreeSet<_>>() {
        let (load, target) = (map.load(p), targets.get(&p).copied().unwrap_or(0));
        if load > target {
            surplus.insert(p, load - target);
        } else if target > load {
            deficit.insert(p, target - load);
        }
    }
    let mut keys: BTreeMap<PsId, KeySet> = surplus.keys().map(|p| (*p, map.keys_of(*p))).collect();
    let largest = |m: &BTreeMap<PsId, u64>| m.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(p, n)| (*p, *n));
    let mut moves = Vec::new();
    while let (Some((from, s)), Some((to, d))) = (largest(&surplus), largest(&deficit)) {
        let amount = s.min(d);
        let ranges = keys.get_mut(&from).expect("donor keys").take_top(amount);
        moves.extend(ranges.into_iter().map(|range| Move { from, to, range }));
        for (m, p, left) in [(&mut surplus, from, s - amount), (&mut deficit, to, d - amount)] {
            if left == 0 {
                m.remove(&p);
            } else {
                m.insert(p, left);
            }
        }
    }
    Ok(moves)
}

pub fn moved_volume(moves: &[Move]) -> u64 {
    moves.iter().map(|m| m.range.len()).sum()
}
