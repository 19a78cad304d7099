//! Near-line maintenance of per-user top-n candidate lists.
//!
//! A daily [`fully_update`] rebuilds every active user's list from the
//! untruncated candidate set. Between refreshes, [`DeltaWindow`] collects the
//! changes reported by [`TargetingIndex::apply`], fans advertiser changes out
//! to member users through the crowd→user map, and [`DeltaWindow::flush`]
//! reconciles only the touched pairs against the current index.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::baseline::{match_optimal, top_by, CostMeter};
use crate::codec::{Reader, Writer};
use crate::domain::{
    rank_order, AdCrowdPair, AdId, CrowdId, Scorer, Timestamp, UserId, ValuedPair,
};
use crate::error::{Error, IoContext, Result};
use crate::index::{Applied, TargetingIndex};

/// One visit in the traffic log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Visit {
    pub at: Timestamp,
    pub user: UserId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    /// Replaced wholesale; readers holding the old `Arc` keep a consistent list.
    pub list: Arc<Vec<ValuedPair>>,
    pub last_full_refresh: Timestamp,
    pub last_delta: Option<Timestamp>,
}

impl CacheEntry {
    pub fn last_update(&self) -> Timestamp {
        self.last_delta.unwrap_or(0).max(self.last_full_refresh)
    }
}

/// Per-user top-n lists, sorted by [`rank_order`], no duplicate pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TopNCache {
    n: usize,
    entries: BTreeMap<UserId, CacheEntry>,
}

impl TopNCache {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: BTreeMap::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, user: UserId) -> bool {
        self.entries.contains_key(&user)
    }

    pub fn get(&self, user: UserId) -> Option<&CacheEntry> {
        self.entries.get(&user)
    }

    pub fn list(&self, user: UserId) -> Option<Arc<Vec<ValuedPair>>> {
        self.entries.get(&user).map(|e| Arc::clone(&e.list))
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.entries.keys().copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (UserId, &CacheEntry)> + '_ {
        self.entries.iter().map(|(u, e)| (*u, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CACHE_MAGIC, CACHE_FORMAT);
        w.len(self.n);
        w.section(SEC_ENTRIES, |w| {
            w.len(self.entries.len());
            for (user, e) in &self.entries {
                w.u64(user.0);
                w.u64(e.last_full_refresh);
                match e.last_delta {
                    Some(t) => {
                        w.u8(1);
                        w.u64(t);
                    }
                    None => w.u8(0),
                }
                w.len(e.list.len());
                for v in e.list.iter() {
                    w.u64(v.pair.ad.0);
                    w.u64(v.pair.crowd.0);
                    w.f64(v.score);
                    w.u64(v.scored_at);
                }
            }
        });
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CACHE_MAGIC, CACHE_FORMAT)?;
        let n = r.u64()? as usize;
        let mut cache = TopNCache::new(n);
        let mut s = r.section(SEC_ENTRIES)?;
        for _ in 0..s.len(25)? {
            let user = UserId(s.u64()?);
            let last_full_refresh = s.u64()?;
            let last_delta = match s.u8()? {
                0 => None,
                1 => Some(s.u64()?),
                t => return Err(Error::Integrity(format!("bad option tag {t}"))),
            };
            let mut list = Vec::new();
            for _ in 0..s.len(32)? {
                list.push(ValuedPair {
                    pair: AdCrowdPair::new(AdId(s.u64()?), CrowdId(s.u64()?)),
                    score: s.f64()?,
                    scored_at: s.u64()?,
                });
            }
            if list.len() > n || !list.windows(2).all(|w| rank_order(&w[0], &w[1]).is_lt()) {
                return Err(Error::Integrity(format!("cache list for {user} is not a sorted top-{n}")));
            }
            cache.entries.insert(
                user,
                CacheEntry {
                    list: Arc::new(list),
                    last_full_refresh,
                    last_delta,
                },
            );
        }
        s.expect_end()?;
        r.expect_end()?;
        Ok(cache)
    }

    pub fn snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).io_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).io_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"TFMSCCH\0";
const CACHE_FORMAT: u32 = 1;
const SEC_ENTRIES: u8 = 1;

/// Rebuilds the cache for `active_users` at the current index version.
///
/// Users are split into `parallelism` disjoint shards, each processed as a
/// stream by its own worker. The result does not depend on the worker count.
pub fn fully_update(
    index: &TargetingIndex,
    scorer: &Scorer,
    active_users: &BTreeSet<UserId>,
    n: usize,
    parallelism: usize,
    at: Timestamp,
    meter: &CostMeter,
) -> TopNCache {
    let users: Vec<UserId> = active_users.iter().copied().collect();
    let workers = parallelism.max(1).min(users.len().max(1));
    let shard_len = users.len().div_ceil(workers).max(1);

    let shards: Vec<Vec<(UserId, Vec<ValuedPair>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = users
            .chunks(shard_len)
            .map(|shard| {
                scope.spawn(move || {
                    shard
                        .iter()
                        .map(|&u| (u, match_optimal(index, scorer, u, n, at, meter)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("fully update worker panicked"))
            .collect()
    });

    let mut cache = TopNCache::new(n);
    for (user, list) in shards.into_iter().flatten() {
        cache.entries.insert(
            user,
            CacheEntry {
                list: Arc::new(list),
                last_full_refresh: at,
                last_delta: None,
            },
        );
    }
    cache
}

/// Users with at least one visit in `[refresh_at - lookback, refresh_at)`.
pub fn select_active_users(
    traffic: &[Visit],
    refresh_at: Timestamp,
    lookback: Timestamp,
) -> BTreeSet<UserId> {
    let from = refresh_at.saturating_sub(lookback);
    let start = traffic.partition_point(|v| v.at < from);
    traffic[start..]
        .iter()
        .take_while(|v| v.at < refresh_at)
        .map(|v| v.user)
        .collect()
}

/// The pending work for one user within a window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserDelta {
    /// Pairs to reconcile against the index.
    pub pairs: BTreeSet<AdCrowdPair>,
    /// Crowds whose membership changed for this user.
    pub crowds: BTreeSet<CrowdId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlushStats {
    pub users: usize,
    pub pairs_rescored: usize,
    pub pairs_removed: usize,
    /// Entries pushed past position n by the merge.
    pub evicted: usize,
    /// Re-scored pairs whose score went down.
    pub downward_rescores: usize,
    pub invalidations_seen: usize,
}

/// Aggregates index changes for one window. Each user appears at most once
/// in the work-list.
#[derive(Debug, Clone)]
pub struct DeltaWindow {
    length: Timestamp,
    opened_at: Timestamp,
    events: usize,
    invalidations: usize,
    affected: BTreeMap<UserId, UserDelta>,
}

impl DeltaWindow {
    pub fn new(length: Timestamp, opened_at: Timestamp) -> Self {
        Self {
            length,
            opened_at,
            events: 0,
            invalidations: 0,
            affected: BTreeMap::new(),
        }
    }

    pub fn length(&self) -> Timestamp {
        self.length
    }

    pub fn opened_at(&self) -> Timestamp {
        self.opened_at
    }

    pub fn closes_at(&self) -> Timestamp {
        self.opened_at + self.length
    }

    pub fn is_due(&self, now: Timestamp) -> bool {
        now >= self.closes_at()
    }

    pub fn buffered_events(&self) -> usize {
        self.events
    }

    pub fn affected(&self) -> &BTreeMap<UserId, UserDelta> {
        &self.affected
    }

    /// Records the effect of an event that has already been applied to
    /// `index`. Users without a cache entry are skipped.
    pub fn ingest(&mut self, applied: &Applied, index: &TargetingIndex, cache: &TopNCache) {
        self.events += 1;
        if applied.invalidated.is_some() {
            self.invalidations += 1;
        }
        if let Some(delta) = &applied.user {
            if cache.contains(delta.user) {
                let entry = self.affected.entry(delta.user).or_default();
                entry.crowds.extend(delta.joined.iter().chain(&delta.left).copied());
            }
        }
        let mut by_crowd: BTreeMap<CrowdId, Vec<AdCrowdPair>> = BTreeMap::new();
        for p in &applied.pairs {
            by_crowd.entry(p.crowd).or_default().push(*p);
        }
        for (crowd, pairs) in by_crowd {
            for user in index.users_of(crowd) {
                if cache.contains(user) {
                    self.affected
                        .entry(user)
                        .or_default()
                        .pairs
                        .extend(pairs.iter().copied());
                }
            }
        }
    }

    /// Applies the window to `cache` and reopens it at `at`.
    pub fn flush(
        &mut self,
        cache: &mut TopNCache,
        index: &TargetingIndex,
        scorer: &Scorer,
        at: Timestamp,
        meter: &CostMeter,
    ) -> FlushStats {
        let mut stats = FlushStats {
            invalidations_seen: self.invalidations,
            ..Default::default()
        };
        let n = cache.n;
        for (user, delta) in std::mem::take(&mut self.affected) {
            let Some(entry) = cache.entries.get_mut(&user) else {
                continue;
            };
            stats.users += 1;
            let mut current: BTreeMap<AdCrowdPair, ValuedPair> =
                entry.list.iter().map(|v| (v.pair, *v)).collect();
            let mut touched = delta.pairs;

            for crowd in delta.crowds {
                if index.is_member(user, crowd) {
                    if let Some(ads) = index.ad_map(crowd) {
                        touched.extend(ads.keys().map(|&a| AdCrowdPair::new(a, crowd)));
                    }
                } else {
                    let gone: Vec<_> = current.keys().filter(|p| p.crowd == crowd).copied().collect();
                    for p in gone {
                        current.remove(&p);
                        stats.pairs_removed += 1;
                    }
                }
            }

            let mut scored = 0;
            for pair in touched {
                match reconcile(index, user, pair) {
                    Reconcile::Upsert(bid) => {
                        scored += 1;
                        let v = scorer.value(user, pair, bid, at);
                        if let Some(old) = current.insert(pair, v) {
                            if v.score < old.score {
                                stats.downward_rescores += 1;
                            }
                        }
                        stats.pairs_rescored += 1;
                    }
                    Reconcile::Keep => {}
                    Reconcile::Remove => {
                        if current.remove(&pair).is_some() {
                            stats.pairs_removed += 1;
                        }
                    }
                }
            }
            meter.add_scored(scored);

            let mut list: Vec<ValuedPair> = current.into_values().collect();
            stats.evicted += list.len().saturating_sub(n);
            top_by(&mut list, n, rank_order);
            entry.list = Arc::new(list);
            entry.last_delta = Some(at);
        }
        self.events = 0;
        self.invalidations = 0;
        self.opened_at = at;
        stats
    }
}

enum Reconcile {
    Upsert(f64),
    /// The targeting exists but the campaign is not serving; validity is
    /// checked at fetch time.
    Keep,
    Remove,
}

fn reconcile(index: &TargetingIndex, user: UserId, pair: AdCrowdPair) -> Reconcile {
    if !index.is_member(user, pair.crowd) {
        return Reconcile::Remove;
    }
    if let Some(bid) = index.published_bid(pair) {
        return Reconcile::Upsert(bid);
    }
    match index.campaign_for_ad(pair.ad) {
        Some(c) if c.targeting(pair.crowd).is_some() => Reconcile::Keep,
        _ => Reconcile::Remove,
    }
}
