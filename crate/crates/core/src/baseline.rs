//! The truncated two-stage online matcher and the exhaustive optimal matcher.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::domain::{
    mix64, rank_order, AdCrowdPair, AdId, CrowdId, Scorer, TargetingType, Timestamp, UserId,
    ValuedPair,
};
use crate::error::{Error, Result};
use crate::index::TargetingIndex;

/// A truncation threshold. `Unbounded` disables truncation at that stage.
///
/// Serialized as a positive integer or the string `"unbounded"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Limit {
    At(usize),
    Unbounded,
}

impl Limit {
    pub fn get(self) -> usize {
        match self {
            Limit::At(n) => n,
            Limit::Unbounded => usize::MAX,
        }
    }
}

impl fmt::Display for Limit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Limit::At(n) => write!(f, "{n}"),
            Limit::Unbounded => f.write_str("unbounded"),
        }
    }
}

impl Serialize for Limit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Limit::At(n) => s.serialize_u64(*n as u64),
            Limit::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Limit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Limit::At(n as usize)),
            Raw::S(s) if s == "unbounded" => Ok(Limit::Unbounded),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "expected a positive integer or \"unbounded\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    /// Max crowds per user, per targeting channel.
    pub m: Limit,
    /// Max ads per crowd.
    pub k: Limit,
    /// Final candidate count.
    pub n: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            m: Limit::At(100),
            k: Limit::At(2000),
            n: 50,
        }
    }
}

impl TruncationConfig {
    pub fn unbounded(n: usize) -> Self {
        Self {
            m: Limit::Unbounded,
            k: Limit::Unbounded,
            n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == Limit::At(0) || self.k == Limit::At(0) || self.n == 0 {
            return Err(Error::InvalidConfig(format!(
                "m, k and n must be >= 1 (m={}, k={}, n={})",
                self.m, self.k, self.n
            )));
        }
        Ok(())
    }
}

/// Exact computation-cost counters.
#[derive(Debug, Default)]
pub struct CostMeter {
    user_crowd_pairs_examined: AtomicU64,
    user_ad_pairs_scored: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounts {
    pub user_crowd_pairs_examined: u64,
    pub user_ad_pairs_scored: u64,
}

impl CostMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_crowds(&self, n: usize) {
        self.user_crowd_pairs_examined
            .fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn add_scored(&self, n: usize) {
        self.user_ad_pairs_scored.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn counts(&self) -> CostCounts {
        CostCounts {
            user_crowd_pairs_examined: self.user_crowd_pairs_examined.load(Ordering::Relaxed),
            user_ad_pairs_scored: self.user_ad_pairs_scored.load(Ordering::Relaxed),
        }
    }
}

const CROWD_SALT: u64 = 0x082e_fa98_ec4e_6c89;
const AD_RULE_SALT: u64 = 0x4528_21e6_38d0_1377;

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Rule-based truncation statistics. Both are seeded per-entity draws that
/// know nothing about the value measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleScores {
    pub seed: u64,
}

impl RuleScores {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// `s_u(c)`. Depends on the crowd only.
    pub fn crowd_score(&self, _user: UserId, crowd: CrowdId) -> f64 {
        unit(mix64(self.seed ^ CROWD_SALT ^ mix64(crowd.0)))
    }

    /// `s_u(a)`: a stand-in for the ad's trailing 7-day CTR.
    pub fn ad_score(&self, ad: AdId) -> f64 {
        unit(mix64(self.seed ^ AD_RULE_SALT ^ mix64(ad.0)))
    }
}

/// Per-request truncation accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TruncationStats {
    pub crowds_total: usize,
    pub crowds_kept: usize,
    /// Crowd-ad pairs over every crowd in `C(u)`.
    pub crowd_ads_total: usize,
    /// Of those, pairs surviving the per-crowd `k` cut.
    pub crowd_ads_kept: usize,
}

/// The truncated two-stage matcher `f1`.
#[derive(Debug, Clone, Copy)]
pub struct TwoStageMatcher {
    pub scorer: Scorer,
    pub rules: RuleScores,
    pub config: TruncationConfig,
}

impl TwoStageMatcher {
    pub fn new(scorer: Scorer, rules: RuleScores, config: TruncationConfig) -> Self {
        Self {
            scorer,
            rules,
            config,
        }
    }

    pub fn match_truncated(
        &self,
        index: &TargetingIndex,
        user: UserId,
        at: Timestamp,
        meter: &CostMeter,
    ) -> Vec<ValuedPair> {
        self.match_with_stats(index, user, at, meter).0
    }

    pub fn match_with_stats(
        &self,
        index: &TargetingIndex,
        user: UserId,
        at: Timestamp,
        meter: &CostMeter,
    ) -> (Vec<ValuedPair>, TruncationStats) {
        let mut stats = TruncationStats::default();
        let Some(crowds) = index.crowd_map(user) else {
            return (Vec::new(), stats);
        };
        stats.crowds_total = crowds.len();

        // user -> crowd: top-m per channel by rule score
        let mut channels: BTreeMap<TargetingType, Vec<(f64, CrowdId)>> = BTreeMap::new();
        for (&crowd, &kind) in crowds {
            channels
                .entry(kind)
                .or_default()
                .push((self.rules.crowd_score(user, crowd), crowd));
        }
        let m = self.config.m.get();
        let mut kept_crowds = Vec::new();
        for mut ranked in channels.into_values() {
            top_by(&mut ranked, m, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            kept_crowds.extend(ranked.into_iter().map(|(_, c)| c));
        }
        kept_crowds.sort_unstable();
        stats.crowds_kept = kept_crowds.len();
        meter.add_crowds(kept_crowds.len());

        let k = self.config.k.get();
        for &crowd in crowds.keys() {
            let len = index.ad_map(crowd).map_or(0, |a| a.len());
            stats.crowd_ads_total += len;
            stats.crowd_ads_kept += len.min(k);
        }

        // crowd -> ad: top-k per crowd by ad rule score, then score the join
        let mut scored = Vec::new();
        for crowd in kept_crowds {
            let Some(ads) = index.ad_map(crowd) else {
                continue;
            };
            if ads.len() <= k {
                scored.extend(
                    ads.iter()
                        .map(|(&ad, &bid)| self.scorer.value(user, AdCrowdPair::new(ad, crowd), bid, at)),
                );
            } else {
                let mut ranked: Vec<(f64, AdId, f64)> = ads
                    .iter()
                    .map(|(&ad, &bid)| (self.rules.ad_score(ad), ad, bid))
                    .collect();
                top_by(&mut ranked, k, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                scored.extend(
                    ranked
                        .into_iter()
                        .map(|(_, ad, bid)| self.scorer.value(user, AdCrowdPair::new(ad, crowd), bid, at)),
                );
            }
        }
        meter.add_scored(scored.len());
        top_by(&mut scored, self.config.n, rank_order);
        (scored, stats)
    }
}

/// `f_opt`: scores every pair of `O(u)` and keeps the best `n`.
pub fn match_optimal(
    index: &TargetingIndex,
    scorer: &Scorer,
    user: UserId,
    n: usize,
    at: Timestamp,
    meter: &CostMeter,
) -> Vec<ValuedPair> {
    let Some(crowds) = index.crowd_map(user) else {
        return Vec::new();
    };
    meter.add_crowds(crowds.len());
    let mut scored = Vec::new();
    for &crowd in crowds.keys() {
        if let Some(ads) = index.ad_map(crowd) {
            scored.extend(
                ads.iter()
                    .map(|(&ad, &bid)| scorer.value(user, AdCrowdPair::new(ad, crowd), bid, at)),
            );
        }
    }
    meter.add_scored(scored.len());
    top_by(&mut scored, n, rank_order);
    scored
}

/// Keeps the `n` smallest elements under `cmp`, sorted.
pub(crate) fn top_by<T>(v: &mut Vec<T>, n: usize, mut cmp: impl FnMut(&T, &T) -> std::cmp::Ordering) {
    if n == 0 {
        v.clear();
        return;
    }
    if v.len() > n {
        v.select_nth_unstable_by(n - 1, &mut cmp);
        v.truncate(n);
    }
    v.sort_unstable_by(cmp);
}

/// Mean score of a matched list, `R(f(u))` with the list size as divisor.
pub fn averaged_reward(list: &[ValuedPair], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    list.iter().map(|v| v.score).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Campaign, CampaignId, CampaignStatus, Targeting};
    use crate::index::{EventBody, Membership, MutationEvent};
    use rand::{Rng, SeedableRng};

    fn upsert(idx: &mut TargetingIndex, id: u64, crowds: &[(u64, TargetingType, f64)]) {
        idx.apply(&MutationEvent {
            at: 0,
            body: EventBody::CampaignUpserted {
                campaign: Campaign {
                    id: CampaignId(id),
                    ad: AdId(id),
                    status: CampaignStatus::Active,
                    budget_remaining: 1.0,
                    targetings: crowds
                        .iter()
                        .map(|&(c, kind, bid)| Targeting { crowd: CrowdId(c), kind, bid })
                        .collect(),
                },
            },
        })
        .unwrap();
    }

    fn join(idx: &mut TargetingIndex, user: u64, crowds: &[(u64, TargetingType)]) {
        idx.apply(&MutationEvent {
            at: 0,
            body: EventBody::UserCrowdsChanged {
                user: UserId(user),
                added: crowds.iter().map(|&(c, kind)| Membership { crowd: CrowdId(c), kind }).collect(),
                removed: vec![],
            },
        })
        .unwrap();
    }

    fn random_index(seed: u64, users: u64, crowds: u64, campaigns: u64) -> TargetingIndex {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut idx = TargetingIndex::new();
        let kind = |c: u64| TargetingType::ALL[(c % 3) as usize];
        for u in 0..users {
            let cs: Vec<_> = (0..rng.random_range(0..8))
                .map(|_| rng.random_range(0..crowds))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .map(|c| (c, kind(c)))
                .collect();
            join(&mut idx, u, &cs);
        }
        for a in 0..campaigns {
            let cs: Vec<_> = (0..rng.random_range(1..6))
                .map(|_| rng.random_range(0..crowds))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .map(|c| (c, kind(c), rng.random_range(0.1..5.0)))
                .collect();
            upsert(&mut idx, a, &cs);
        }
        idx
    }

    #[test]
    fn rule_scores_are_deterministic_and_context_free() {
        let r = RuleScores::new(3);
        assert_eq!(r.crowd_score(UserId(1), CrowdId(5)), r.crowd_score(UserId(2), CrowdId(5)));
        assert_eq!(r.ad_score(AdId(9)), r.ad_score(AdId(9)));
    }

    #[test]
    fn no_crowds_no_candidates() {
        let idx = TargetingIndex::new();
        let m = TwoStageMatcher::new(Scorer::default(), RuleScores::new(0), TruncationConfig::default());
        let meter = CostMeter::new();
        assert!(m.match_truncated(&idx, UserId(1), 0, &meter).is_empty());
        assert!(match_optimal(&idx, &Scorer::default(), UserId(1), 5, 0, &meter).is_empty());
        assert_eq!(meter.counts(), CostCounts::default());
    }

    #[test]
    fn small_candidate_set_returned_whole_and_sorted() {
        let idx = random_index(1, 20, 10, 15);
        let s = Scorer::default();
        for u in 0..20 {
            let all = idx.candidates(UserId(u));
            let got = match_optimal(&idx, &s, UserId(u), all.len() + 3, 0, &CostMeter::new());
            assert_eq!(got.len(), all.len());
            assert!(got.windows(2).all(|w| rank_order(&w[0], &w[1]).is_lt()));
        }
    }

    #[test]
    fn optimal_agrees_with_sort_oracle() {
        let idx = random_index(2, 500, 40, 120);
        let s = Scorer::new(11);
        for u in 0..500 {
            let user = UserId(u);
            // independent oracle: score everything, stable sort by the tie-break key, take prefix
            let mut full: Vec<(f64, u64, u64)> = idx
                .candidates(user)
                .into_iter()
                .map(|(p, bid)| (s.pctr(user, p.ad) * bid * 1000.0, p.ad.0, p.crowd.0))
                .collect();
            full.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            full.truncate(7);
            let got: Vec<_> = match_optimal(&idx, &s, user, 7, 0, &CostMeter::new())
                .into_iter()
                .map(|v| (v.score, v.pair.ad.0, v.pair.crowd.0))
                .collect();
            assert_eq!(got, full);
        }
    }

    #[test]
    fn unbounded_truncation_equals_optimal() {
        let idx = random_index(3, 300, 30, 100);
        let s = Scorer::new(5);
        let m = TwoStageMatcher::new(s, RuleScores::new(5), TruncationConfig::unbounded(10));
        for u in 0..300 {
            let meter = CostMeter::new();
            assert_eq!(
                m.match_truncated(&idx, UserId(u), 0, &meter),
                match_optimal(&idx, &s, UserId(u), 10, 0, &CostMeter::new())
            );
        }
    }

    #[test]
    fn cost_meter_counts_pairs_exactly() {
        let idx = random_index(4, 200, 25, 90);
        let s = Scorer::default();
        let cfg = TruncationConfig { m: Limit::At(1), k: Limit::At(2), n: 5 };
        let m = TwoStageMatcher::new(s, RuleScores::new(1), cfg);
        for u in 0..200 {
            let user = UserId(u);
            let meter = CostMeter::new();
            match_optimal(&idx, &s, user, 5, 0, &meter);
            assert_eq!(meter.counts().user_ad_pairs_scored as usize, idx.candidates(user).len());
            assert_eq!(meter.counts().user_crowd_pairs_examined as usize, idx.crowds_of(user).len());

            let meter = CostMeter::new();
            let (out, stats) = m.match_with_stats(&idx, user, 0, &meter);
            let scored = meter.counts().user_ad_pairs_scored as usize;
            assert!(scored <= idx.candidates(user).len());
            assert!(scored <= 3 * 2);
            assert_eq!(stats.crowds_kept as u64, meter.counts().user_crowd_pairs_examined);
            let all: std::collections::BTreeSet<_> =
                idx.candidates(user).into_iter().map(|(p, _)| p).collect();
            assert!(out.iter().all(|v| all.contains(&v.pair)));
        }
    }

    #[test]
    fn dominance_over_random_worlds() {
        let idx = random_index(5, 400, 30, 150);
        let s = Scorer::default();
        let cfg = TruncationConfig { m: Limit::At(1), k: Limit::At(2), n: 4 };
        let m = TwoStageMatcher::new(s, RuleScores::new(9), cfg);
        let mut strict = 0;
        for u in 0..400 {
            let t = m.match_truncated(&idx, UserId(u), 0, &CostMeter::new());
            let o = match_optimal(&idx, &s, UserId(u), 4, 0, &CostMeter::new());
            let (rt, ro) = (averaged_reward(&t, 4), averaged_reward(&o, 4));
            assert!(ro >= rt);
            // position-wise the oracle dominates as well
            for (a, b) in o.iter().zip(&t) {
                assert!(a.score >= b.score);
            }
            if ro > rt {
                strict += 1;
            }
        }
        assert!(strict > 0, "tight truncation should lose value somewhere");
    }

    /// Best ad sits in the lowest rule-scored crowd: truncation to m crowds drops it.
    #[test]
    fn crowd_truncation_hides_best_pair() {
        let rules = RuleScores::new(77);
        let s = Scorer::default();
        let user = UserId(1);
        let mut crowds: Vec<u64> = (0..4).collect();
        crowds.sort_by(|a, b| rules.crowd_score(user, CrowdId(*b)).total_cmp(&rules.crowd_score(user, CrowdId(*a))));
        let worst = *crowds.last().unwrap();

        let mut idx = TargetingIndex::new();
        join(&mut idx, 1, &crowds.iter().map(|&c| (c, TargetingType::Keywords)).collect::<Vec<_>>());
        for (i, &c) in crowds.iter().enumerate() {
            let bid = if c == worst { 50.0 } else { 0.01 };
            upsert(&mut idx, 100 + i as u64, &[(c, TargetingType::Keywords, bid)]);
        }
        let cfg = TruncationConfig { m: Limit::At(3), k: Limit::Unbounded, n: 1 };
        let t = TwoStageMatcher::new(s, rules, cfg).match_truncated(&idx, user, 0, &CostMeter::new());
        let o = match_optimal(&idx, &s, user, 1, 0, &CostMeter::new());
        assert_eq!(o[0].pair.crowd, CrowdId(worst));
        assert!(t.iter().all(|v| v.pair.crowd != CrowdId(worst)));
        assert!(averaged_reward(&t, 1) < averaged_reward(&o, 1));
    }

    /// Best ad has the lowest ad rule score in its crowd: the k cut drops it.
    #[test]
    fn ad_truncation_hides_best_pair() {
        let rules = RuleScores::new(78);
        let s = Scorer::default();
        let user = UserId(2);
        let mut ads: Vec<u64> = (10..16).collect();
        ads.sort_by(|a, b| rules.ad_score(AdId(*b)).total_cmp(&rules.ad_score(AdId(*a))));
        let worst = *ads.last().unwrap();
        let mut idx = TargetingIndex::new();
        join(&mut idx, 2, &[(0, TargetingType::Demographic)]);
        for &a in &ads {
            upsert(&mut idx, a, &[(0, TargetingType::Demographic, if a == worst { 80.0 } else { 0.02 })]);
        }
        let cfg = TruncationConfig { m: Limit::Unbounded, k: Limit::At(5), n: 1 };
        let t = TwoStageMatcher::new(s, rules, cfg).match_truncated(&idx, user, 0, &CostMeter::new());
        let o = match_optimal(&idx, &s, user, 1, 0, &CostMeter::new());
        assert_eq!(o[0].pair.ad, AdId(worst));
        assert_ne!(t[0].pair.ad, AdId(worst));
    }

    #[test]
    fn per_channel_truncation() {
        let idx = random_index(6, 50, 60, 100);
        let cfg = TruncationConfig { m: Limit::At(1), k: Limit::Unbounded, n: 100 };
        let m = TwoStageMatcher::new(Scorer::default(), RuleScores::new(2), cfg);
        for u in 0..50 {
            let user = UserId(u);
            let channels: std::collections::BTreeSet<_> = idx.crowds_of(user).into_iter().map(|(_, k)| k).collect();
            let (_, stats) = m.match_with_stats(&idx, user, 0, &CostMeter::new());
            assert_eq!(stats.crowds_kept, channels.len());
        }
    }

    #[test]
    fn limit_serde() {
        #[derive(Deserialize)]
        struct W {
            m: Limit,
        }
        assert_eq!(toml::from_str::<W>("m = 4").unwrap().m, Limit::At(4));
        assert_eq!(toml::from_str::<W>("m = \"unbounded\"").unwrap().m, Limit::Unbounded);
        assert!(toml::from_str::<W>("m = \"lots\"").is_err());
    }
}
