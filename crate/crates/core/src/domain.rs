//! Identities, campaigns, targeting semantics and the value measure shared by
//! every matcher.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulated time in seconds since the start of the workload.
pub type Timestamp = u64;

pub const MINUTE: Timestamp = 60;
pub const HOUR: Timestamp = 60 * MINUTE;
pub const DAY: Timestamp = 24 * HOUR;

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident, $prefix:literal) => {
        $(#[$doc])*
        #[derive(
            Debug, Default, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl From<u64> for $name {
            fn from(v: u64) -> Self {
                Self(v)
            }
        }
    };
}

id_type!(/// A visiting user.
    UserId, "u");
id_type!(/// A crowd: a targetable set of users.
    CrowdId, "c");
id_type!(/// An ad creative. Each ad is owned by exactly one campaign.
    AdId, "a");
id_type!(CampaignId, "camp");

/// Targeting tool that produced a crowd. Automatic targeting is not part of
/// the truncation-free path and has no variant here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TargetingType {
    Retargeting,
    Keywords,
    Demographic,
}

impl TargetingType {
    pub const ALL: [TargetingType; 3] = [
        TargetingType::Retargeting,
        TargetingType::Keywords,
        TargetingType::Demographic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetingType::Retargeting => "retargeting",
            TargetingType::Keywords => "keywords",
            TargetingType::Demographic => "demographic",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            TargetingType::Retargeting => 0,
            TargetingType::Keywords => 1,
            TargetingType::Demographic => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for TargetingType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CampaignStatus {
    Active,
    Paused,
    Canceled,
}

impl CampaignStatus {
    pub(crate) fn code(self) -> u8 {
        match self {
            CampaignStatus::Active => 0,
            CampaignStatus::Paused => 1,
            CampaignStatus::Canceled => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CampaignStatus::Active),
            1 => Some(CampaignStatus::Paused),
            2 => Some(CampaignStatus::Canceled),
            _ => None,
        }
    }
}

/// One (crowd, bid) entry of a campaign. The bid is money per click.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Targeting {
    pub crowd: CrowdId,
    pub kind: TargetingType,
    pub bid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub id: CampaignId,
    pub ad: AdId,
    pub status: CampaignStatus,
    pub budget_remaining: f64,
    pub targetings: Vec<Targeting>,
}

impl Campaign {
    /// Checks the structural invariants: unique crowds, positive bids,
    /// non-negative budget.
    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidCampaign {
            campaign: self.id,
            reason,
        };
        if !(self.budget_remaining.is_finite() && self.budget_remaining >= 0.0) {
            return Err(invalid(format!(
                "budget_remaining must be >= 0, got {}",
                self.budget_remaining
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.targetings {
            if !seen.insert(t.crowd) {
                return Err(invalid(format!("crowd {} targeted twice", t.crowd)));
            }
            if !(t.bid.is_finite() && t.bid > 0.0) {
                return Err(invalid(format!("bid on {} must be > 0, got {}", t.crowd, t.bid)));
            }
        }
        Ok(())
    }

    /// Whether the campaign may currently win traffic at all.
    pub fn is_serving(&self) -> bool {
        self.status == CampaignStatus::Active && self.budget_remaining > 0.0
    }

    pub fn targeting(&self, crowd: CrowdId) -> Option<&Targeting> {
        self.targetings.iter().find(|t| t.crowd == crowd)
    }
}

/// The atomic matchable unit `(a, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AdCrowdPair {
    pub ad: AdId,
    pub crowd: CrowdId,
}

impl AdCrowdPair {
    pub fn new(ad: AdId, crowd: CrowdId) -> Self {
        Self { ad, crowd }
    }
}

/// A pair together with its eCPM score for one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValuedPair {
    pub pair: AdCrowdPair,
    pub score: f64,
    pub scored_at: Timestamp,
}

/// The global total order used by every matcher and the cache:
/// score descending, then `AdId` ascending, then `CrowdId` ascending.
pub fn rank_order(a: &ValuedPair, b: &ValuedPair) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.pair.ad.cmp(&b.pair.ad))
        .then_with(|| a.pair.crowd.cmp(&b.pair.crowd))
}

/// eCPM of a click-billed impression: `pctr * bid * 1000`.
pub fn ecpm(pctr: f64, bid: f64) -> f64 {
    pctr * bid * 1000.0
}

pub const PCTR_MIN: f64 = 0.001;
pub const PCTR_MAX: f64 = 0.1;

const USER_SALT: u64 = 0x243f_6a88_85a3_08d3;
const AD_SALT: u64 = 0x1319_8a2e_0370_7344;
const PAIR_SALT: u64 = 0xa409_3822_299f_31d0;

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Maps a hash to `[-1, 1)`.
pub(crate) fn signed_unit(h: u64) -> f64 {
    ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

/// Deterministic synthetic click model standing in for a learned CTR
/// predictor. Every matcher shares one instance so their scores agree
/// bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scorer {
    pub seed: u64,
}

impl Scorer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Predicted click-through rate for `(user, ad)`, in `[0.001, 0.1]`.
    pub fn pctr(&self, user: UserId, ad: AdId) -> f64 {
        let ad_h = mix64(self.seed ^ AD_SALT ^ mix64(ad.0));
        let user_h = mix64(self.seed ^ USER_SALT ^ mix64(user.0));
        let pair_h = mix64(mix64(self.seed ^ PAIR_SALT ^ user.0).wrapping_add(ad.0));
        // ad quality dominates, user propensity and pair affinity perturb it
        let z = 2.5 * signed_unit(ad_h) + 1.0 * signed_unit(user_h) + 1.5 * signed_unit(pair_h);
        let squashed = 1.0 / (1.0 + (-z).exp());
        (PCTR_MIN + (PCTR_MAX - PCTR_MIN) * squashed).clamp(PCTR_MIN, PCTR_MAX)
    }

    /// `r_u(a, c)`: eCPM of showing `pair.ad` to `user` at `bid`.
    pub fn value_measure(&self, user: UserId, pair: AdCrowdPair, bid: f64) -> f64 {
        debug_assert!(bid >= 0.0, "negative bid {bid}");
        ecpm(self.pctr(user, pair.ad), bid)
    }

    pub fn value(&self, user: UserId, pair: AdCrowdPair, bid: f64, at: Timestamp) -> ValuedPair {
        ValuedPair {
            pair,
            score: self.value_measure(user, pair, bid),
            scored_at: at,
        }
    }
}

impl Default for Scorer {
    fn default() -> Self {
        Self::new(0x7f4a_7c15)
    }
}

/// True iff the campaign is Active, has budget left, and still targets
/// `pair.crowd`. The campaign passed in is the state as of the check.
pub fn is_valid(campaign: &Campaign, pair: AdCrowdPair) -> Result<bool> {
    if pair.ad != campaign.ad {
        return Err(Error::AdMismatch {
            campaign: campaign.id,
            campaign_ad: campaign.ad,
            pair_ad: pair.ad,
        });
    }
    Ok(campaign.is_serving() && campaign.targeting(pair.crowd).is_some())
}
