//! Online fetch of precomputed candidates with validity filtering.

use crate::domain::{is_valid, AdId, Campaign, Timestamp, UserId, ValuedPair};
use crate::index::TargetingIndex;
use crate::nearline::TopNCache;

/// Campaign state as seen by the online module.
pub trait CampaignDirectory {
    fn campaign_for_ad(&self, ad: AdId) -> Option<&Campaign>;
}

impl CampaignDirectory for TargetingIndex {
    fn campaign_for_ad(&self, ad: AdId) -> Option<&Campaign> {
        TargetingIndex::campaign_for_ad(self, ad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchResult {
    /// Cached pairs that are still valid, in cache order.
    pub served: Vec<ValuedPair>,
    pub dropped_invalid: usize,
    pub cache_miss: bool,
    /// Time since the entry was last written by either pipeline.
    pub staleness: Timestamp,
}

impl FetchResult {
    fn miss() -> Self {
        Self {
            served: Vec::new(),
            dropped_invalid: 0,
            cache_miss: true,
            staleness: 0,
        }
    }
}

/// Reads the user's cached list and drops pairs whose campaign is no longer
/// Active, has run out of budget, or no longer targets the crowd. Scores are
/// served as cached.
pub fn fetch(
    user: UserId,
    cache: &TopNCache,
    campaigns: &impl CampaignDirectory,
    at: Timestamp,
) -> FetchResult {
    let Some(entry) = cache.get(user) else {
        return FetchResult::miss();
    };
    let mut served = Vec::with_capacity(entry.list.len());
    let mut dropped_invalid = 0;
    for v in entry.list.iter() {
        let ok = campaigns
            .campaign_for_ad(v.pair.ad)
            .is_some_and(|c| is_valid(c, v.pair).unwrap_or(false));
        if ok {
            served.push(*v);
        } else {
            dropped_invalid += 1;
        }
    }
    FetchResult {
        served,
        dropped_invalid,
        cache_miss: false,
        staleness: at.saturating_sub(entry.last_update()),
    }
}
