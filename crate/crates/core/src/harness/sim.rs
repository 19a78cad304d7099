//! Chronological replay of a workload against the selected matchers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::cost::{cost_model, CostInputs};
use super::report::{Distribution, MatcherReport, NearlineReport, ServingReport, SimReport};
use super::workload::{Item, Workload};
use crate::baseline::{match_optimal, CostCounts, CostMeter, Limit, RuleScores, TruncationConfig, TwoStageMatcher};
use crate::domain::{rank_order, AdCrowdPair, CampaignStatus, Scorer, TargetingType, Timestamp, UserId, ValuedPair, DAY, HOUR, MINUTE};
use crate::error::{Error, Result};
use crate::index::TargetingIndex;
use crate::nearline::{fully_update, select_active_users, DeltaWindow, TopNCache, Visit};
use crate::serving::fetch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherKind {
    Oracle,
    Truncated,
    Tfms,
}

impl MatcherKind {
    pub const ALL: [MatcherKind; 3] = [MatcherKind::Oracle, MatcherKind::Truncated, MatcherKind::Tfms];

    pub fn as_str(self) -> &'static str {
        match self {
            MatcherKind::Oracle => "oracle",
            MatcherKind::Truncated => "truncated",
            MatcherKind::Tfms => "tfms",
        }
    }
}

impl fmt::Display for MatcherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatcherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MatcherKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown matcher {s:?}; expected oracle, truncated or tfms")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TfmsConfig {
    /// Cached list length.
    pub n: usize,
    /// Delta window length. 0 flushes after every event.
    pub window_mins: u64,
    /// Visit lookback for choosing the users to refresh.
    pub lookback_hours: u64,
    /// Serve the truncated matcher's list on a cache miss.
    pub fallback: bool,
    pub parallelism: usize,
}

impl Default for TfmsConfig {
    fn default() -> Self {
        Self {
            n: 200,
            window_mins: 5,
            lookback_hours: 168,
            fallback: true,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Seeds the value measure and the rule scores.
    pub seed: u64,
    /// Days replayed before measurement starts. They build the world and the
    /// visit history the first refresh draws on.
    pub warmup_days: u64,
    pub matchers: Vec<MatcherKind>,
    pub truncation: TruncationConfig,
    pub tfms: TfmsConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            warmup_days: 7,
            matchers: MatcherKind::ALL.to_vec(),
            truncation: TruncationConfig {
                m: Limit::At(6),
                k: Limit::At(300),
                n: 50,
            },
            tfms: TfmsConfig::default(),
        }
    }
}

impl SimConfig {
    /// Parses and validates a TOML config; omitted keys take defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.truncation.validate()?;
        if self.matchers.is_empty() {
            return Err(Error::InvalidConfig("at least one matcher must be selected".into()));
        }
        if self.tfms.n == 0 {
            return Err(Error::InvalidConfig("tfms.n must be >= 1".into()));
        }
        if self.tfms.lookback_hours == 0 {
            return Err(Error::InvalidConfig("tfms.lookback_hours must be >= 1".into()));
        }
        Ok(())
    }

    pub fn scorer(&self) -> Scorer {
        Scorer::new(self.seed)
    }

    pub fn truncated_matcher(&self) -> TwoStageMatcher {
        TwoStageMatcher::new(self.scorer(), RuleScores::new(self.seed), self.truncation)
    }

    fn selected(&self, m: MatcherKind) -> bool {
        self.matchers.contains(&m)
    }
}

#[derive(Default)]
struct Acc {
    requests: u64,
    impressions: u64,
    revenue: f64,
    recall_sum: f64,
    recall_count: u64,
    crowds_total: u64,
    crowds_kept: u64,
    crowd_ads_total: u64,
    crowd_ads_kept: u64,
    wins: BTreeMap<TargetingType, u64>,
    ineligible: u64,
    online: CostCounts,
}

impl Acc {
    fn finish(self, serving: Option<ServingReport>) -> MatcherReport {
        let per = |x: u64| if self.requests == 0 { 0.0 } else { x as f64 / self.requests as f64 };
        let dropped = |total: u64, kept: u64| {
            if total == 0 {
                0.0
            } else {
                (total - kept) as f64 / total as f64 * 100.0
            }
        };
        MatcherReport {
            requests: self.requests,
            impressions: self.impressions,
            revenue: self.revenue,
            rpm: if self.requests == 0 { 0.0 } else { self.revenue / self.requests as f64 },
            pairs_scored: self.online.user_ad_pairs_scored,
            user_crowd_pairs: self.online.user_crowd_pairs_examined,
            pairs_scored_per_request: per(self.online.user_ad_pairs_scored),
            user_crowd_pairs_per_request: per(self.online.user_crowd_pairs_examined),
            recall_at_n: if self.recall_count == 0 { 1.0 } else { self.recall_sum / self.recall_count as f64 },
            truncated_user_crowd_pct: dropped(self.crowds_total, self.crowds_kept),
            truncated_crowd_ad_pct: dropped(self.crowd_ads_total, self.crowd_ads_kept),
            winning_impressions: TargetingType::ALL
                .iter()
                .map(|k| (k.as_str().to_owned(), self.wins.get(k).copied().unwrap_or(0)))
                .collect(),
            ineligible_served: self.ineligible,
            serving,
        }
    }

    /// Single-slot auction: re-values every served pair at the current bid
    /// and takes the argmax. Pairs no longer in `O(u)` cannot win.
    fn auction(&mut self, index: &TargetingIndex, scorer: &Scorer, user: UserId, served: &[ValuedPair], at: Timestamp) {
        self.requests += 1;
        let crowds = index.crowd_map(user);
        let mut best: Option<(ValuedPair, TargetingType)> = None;
        for v in served {
            let kind = crowds.and_then(|c| c.get(&v.pair.crowd)).copied();
            let (Some(kind), Some(bid)) = (kind, index.published_bid(v.pair)) else {
                self.ineligible += 1;
                continue;
            };
            let now = scorer.value(user, v.pair, bid, at);
            if best.is_none_or(|(b, _)| rank_order(&now, &b).is_lt()) {
                best = Some((now, kind));
            }
        }
        if let Some((v, kind)) = best {
            self.impressions += 1;
            self.revenue += v.score;
            *self.wins.entry(kind).or_default() += 1;
        }
    }

    fn recall(&mut self, oracle: &[ValuedPair], served: &[ValuedPair], n: usize) {
        if oracle.is_empty() {
            return;
        }
        let top: BTreeSet<AdCrowdPair> = oracle.iter().take(n).map(|v| v.pair).collect();
        let hit = served.iter().take(n).filter(|v| top.contains(&v.pair)).count();
        self.recall_sum += hit as f64 / top.len() as f64;
        self.recall_count += 1;
    }
}

fn add(a: &mut CostCounts, before: CostCounts, after: CostCounts) {
    a.user_crowd_pairs_examined += after.user_crowd_pairs_examined - before.user_crowd_pairs_examined;
    a.user_ad_pairs_scored += after.user_ad_pairs_scored - before.user_ad_pairs_scored;
}

/// Independent restatement of the validity rule.
fn still_valid(index: &TargetingIndex, pair: AdCrowdPair) -> bool {
    index.campaign_for_ad(pair.ad).is_some_and(|c| {
        c.status == CampaignStatus::Active
            && c.budget_remaining > 0.0
            && c.targetings.iter().any(|t| t.crowd == pair.crowd)
    })
}

struct Nearline {
    cache: TopNCache,
    window: DeltaWindow,
    next_refresh: Timestamp,
    full_meter: CostMeter,
    delta_meter: CostMeter,
    report: NearlineReport,
    serving: ServingReport,
    shortfall: Vec<u64>,
    staleness: Vec<u64>,
}

impl Nearline {
    /// Runs every refresh and window flush scheduled strictly before or at
    /// `now`, in time order.
    fn catch_up(&mut self, now: Timestamp, cfg: &TfmsConfig, index: &TargetingIndex, scorer: &Scorer, visits: &[Visit]) {
        loop {
            let flush_at = (cfg.window_mins > 0).then(|| self.window.closes_at());
            if self.next_refresh <= now && flush_at.is_none_or(|f| self.next_refresh <= f) {
                let at = self.next_refresh;
                let active = select_active_users(visits, at, cfg.lookback_hours * HOUR);
                self.cache = fully_update(index, scorer, &active, cfg.n, cfg.parallelism, at, &self.full_meter);
                self.report.fully_updates += 1;
                self.report.users_refreshed += active.len() as u64;
                // the refresh supersedes anything buffered
                self.window = DeltaWindow::new(cfg.window_mins * MINUTE, at);
                self.next_refresh += DAY;
            } else if let Some(f) = flush_at.filter(|&f| f <= now) {
                let stats = if self.window.buffered_events() > 0 {
                    self.window.flush(&mut self.cache, index, scorer, f, &self.delta_meter)
                } else {
                    self.window = DeltaWindow::new(cfg.window_mins * MINUTE, f);
                    continue;
                };
                self.report.add_flush(&stats);
            } else {
                return;
            }
        }
    }
}

/// Replays `workload` and measures every visit after the warm-up days.
///
/// The oracle and truncated lists are computed for every measured visit
/// (recall and fallback need them); reports are produced only for the
/// selected matchers.
pub fn run(workload: &Workload, config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let measure_from = config.warmup_days * DAY;
    let scorer = config.scorer();
    let truncated = config.truncated_matcher();
    let visits = workload.visits();
    let n = config.truncation.n;
    let tfms_on = config.selected(MatcherKind::Tfms);

    let mut index = TargetingIndex::new();
    let mut rejected = 0u64;
    let mut oracle_acc = Acc::default();
    let mut trunc_acc = Acc::default();
    let mut tfms_acc = Acc::default();
    let oracle_meter = CostMeter::new();
    let trunc_meter = CostMeter::new();
    let mut active_days: BTreeSet<(u64, UserId)> = BTreeSet::new();
    let mut nl = Nearline {
        cache: TopNCache::new(config.tfms.n),
        window: DeltaWindow::new(config.tfms.window_mins * MINUTE, measure_from),
        next_refresh: measure_from,
        full_meter: CostMeter::new(),
        delta_meter: CostMeter::new(),
        report: NearlineReport::default(),
        serving: ServingReport::default(),
        shortfall: Vec::new(),
        staleness: Vec::new(),
    };
    let mut last_at = 0;

    for item in workload.replay_order() {
        let now = match item {
            Item::Event(e) => e.event.at,
            Item::Visit(t) => t.at,
        };
        last_at = now;
        if tfms_on {
            nl.catch_up(now, &config.tfms, &index, &scorer, &visits);
        }
        match item {
            Item::Event(e) => {
                let Ok(applied) = index.apply(&e.event) else {
                    rejected += 1;
                    continue;
                };
                if tfms_on && !nl.cache.is_empty() {
                    nl.window.ingest(&applied, &index, &nl.cache);
                    if config.tfms.window_mins == 0 {
                        let stats = nl.window.flush(&mut nl.cache, &index, &scorer, now, &nl.delta_meter);
                        nl.report.add_flush(&stats);
                    }
                }
            }
            Item::Visit(t) if t.at >= measure_from => {
                let Visit { at, user } = t.visit();
                active_days.insert((at / DAY, user));

                let before = oracle_meter.counts();
                let oracle = match_optimal(&index, &scorer, user, n, at, &oracle_meter);
                add(&mut oracle_acc.online, before, oracle_meter.counts());

                let before = trunc_meter.counts();
                let (trunc, stats) = truncated.match_with_stats(&index, user, at, &trunc_meter);
                let trunc_cost = {
                    let mut c = CostCounts::default();
                    add(&mut c, before, trunc_meter.counts());
                    c
                };
                add(&mut trunc_acc.online, CostCounts::default(), trunc_cost);
                trunc_acc.crowds_total += stats.crowds_total as u64;
                trunc_acc.crowds_kept += stats.crowds_kept as u64;
                trunc_acc.crowd_ads_total += stats.crowd_ads_total as u64;
                trunc_acc.crowd_ads_kept += stats.crowd_ads_kept as u64;

                oracle_acc.recall(&oracle, &oracle, n);
                oracle_acc.auction(&index, &scorer, user, &oracle, at);
                trunc_acc.recall(&oracle, &trunc, n);
                trunc_acc.auction(&index, &scorer, user, &trunc, at);

                if tfms_on {
                    let reads = index.read_count();
                    let fetched = fetch(user, &nl.cache, &index, at);
                    nl.serving.fetch_index_reads += index.read_count() - reads;
                    let served: &[ValuedPair] = if fetched.cache_miss {
                        nl.serving.cache_misses += 1;
                        if config.tfms.fallback {
                            nl.serving.fallback_requests += 1;
                            add(&mut tfms_acc.online, CostCounts::default(), trunc_cost);
                            &trunc
                        } else {
                            &[]
                        }
                    } else {
                        let cached = nl.cache.get(user).map_or(0, |e| e.list.len());
                        nl.serving.cache_hits += 1;
                        nl.serving.cached_pairs_read += cached as u64;
                        nl.serving.dropped_invalid += fetched.dropped_invalid as u64;
                        if fetched.served.len() + fetched.dropped_invalid != cached {
                            nl.serving.accounting_violations += 1;
                        }
                        nl.serving.invalid_served +=
                            fetched.served.iter().filter(|v| !still_valid(&index, v.pair)).count() as u64;
                        nl.shortfall.push(config.tfms.n.saturating_sub(fetched.served.len()) as u64);
                        nl.staleness.push(fetched.staleness);
                        &fetched.served
                    };
                    tfms_acc.recall(&oracle, served, n);
                    tfms_acc.auction(&index, &scorer, user, served, at);
                }
            }
            Item::Visit(_) => {}
        }
    }

    let cost_inputs = CostInputs {
        requests: trunc_acc.requests,
        active_user_days: active_days.len() as u64,
        truncated_pairs: trunc_acc.online.user_ad_pairs_scored,
        untruncated_pairs: oracle_acc.online.user_ad_pairs_scored,
        full_update_pairs: nl.full_meter.counts().user_ad_pairs_scored,
        delta_pairs: nl.delta_meter.counts().user_ad_pairs_scored,
    };
    let mut matchers = BTreeMap::new();
    if config.selected(MatcherKind::Oracle) {
        matchers.insert(MatcherKind::Oracle.to_string(), oracle_acc.finish(None));
    }
    if config.selected(MatcherKind::Truncated) {
        matchers.insert(MatcherKind::Truncated.to_string(), trunc_acc.finish(None));
    }
    let nearline = tfms_on.then(|| {
        let full = nl.full_meter.counts();
        NearlineReport {
            full_pairs_scored: full.user_ad_pairs_scored,
            full_user_crowd_pairs: full.user_crowd_pairs_examined,
            delta_pairs_scored: nl.delta_meter.counts().user_ad_pairs_scored,
            ..nl.report.clone()
        }
    });
    if tfms_on {
        let serving = ServingReport {
            shortfall: Distribution::from_samples(std::mem::take(&mut nl.shortfall)),
            staleness: Distribution::from_samples(std::mem::take(&mut nl.staleness)),
            ..nl.serving.clone()
        };
        matchers.insert(MatcherKind::Tfms.to_string(), tfms_acc.finish(Some(serving)));
    }

    Ok(SimReport {
        workload_checksum: workload.checksum(),
        config: config.clone(),
        measured_from: measure_from,
        measured_until: last_at,
        rejected_events: rejected,
        matchers,
        nearline,
        cost_inputs,
        cost: cost_model(&cost_inputs, cost_inputs.avg_visits()),
    })
}
