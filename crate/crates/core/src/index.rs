//! The three targeting maps: user→crowds, crowd→ads (with bids) and the
//! inverted crowd→users map used to fan advertiser operations out to users.
//!
//! All maps are `BTreeMap`s so iteration order, snapshots, and therefore every
//! downstream computation are deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::domain::{
    AdCrowdPair, AdId, Campaign, CampaignId, CampaignStatus, CrowdId, Targeting, TargetingType,
    Timestamp, UserId,
};
use crate::error::{Error, IoContext, Result};

/// A user's membership in one crowd.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    pub crowd: CrowdId,
    pub kind: TargetingType,
}

/// A user action or an advertiser operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    /// Removals are applied before additions.
    UserCrowdsChanged {
        user: UserId,
        added: Vec<Membership>,
        removed: Vec<CrowdId>,
    },
    CampaignUpserted {
        campaign: Campaign,
    },
    CampaignStatusChanged {
        campaign: CampaignId,
        status: CampaignStatus,
    },
    BidChanged {
        campaign: CampaignId,
        crowd: CrowdId,
        bid: f64,
    },
    BudgetChanged {
        campaign: CampaignId,
        remaining: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationEvent {
    pub at: Timestamp,
    #[serde(flatten)]
    pub body: EventBody,
}

/// What an applied event changed, in the terms the delta pipeline needs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Applied {
    pub version: u64,
    pub at: Timestamp,
    /// `(ad, crowd)` pairs whose presence or bid may have changed. Every user
    /// in `crowd` must reconcile them.
    pub pairs: BTreeSet<AdCrowdPair>,
    /// Membership change of a single user.
    pub user: Option<MembershipDelta>,
    /// A campaign stopped serving; cached pairs are filtered at fetch time.
    pub invalidated: Option<CampaignId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MembershipDelta {
    pub user: UserId,
    pub joined: BTreeSet<CrowdId>,
    pub left: BTreeSet<CrowdId>,
}

#[derive(Debug, Default)]
struct AccessCounter(AtomicU64);

impl AccessCounter {
    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for AccessCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.0.load(Ordering::Relaxed)))
    }
}

/// Targeting index. Readers share `&TargetingIndex`; `apply` takes `&mut self`
/// so a reader can never observe a half-applied event.
#[derive(Debug, Clone, Default)]
pub struct TargetingIndex {
    user_crowds: BTreeMap<UserId, BTreeMap<CrowdId, TargetingType>>,
    /// Only campaigns that are Active with budget left are published here.
    crowd_ads: BTreeMap<CrowdId, BTreeMap<AdId, f64>>,
    crowd_users: BTreeMap<CrowdId, BTreeSet<UserId>>,
    campaigns: BTreeMap<CampaignId, Campaign>,
    ad_owner: BTreeMap<AdId, CampaignId>,
    version: u64,
    reads: AccessCounter,
}

impl PartialEq for TargetingIndex {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.user_crowds == other.user_crowds
            && self.crowd_users == other.crowd_users
            && self.campaigns == other.campaigns
            && self.ad_owner == other.ad_owner
            && self.crowd_ads.len() == other.crowd_ads.len()
            && self.crowd_ads.iter().zip(&other.crowd_ads).all(|(a, b)| {
                a.0 == b.0
                    && a.1.len() == b.1.len()
                    && a.1
                        .iter()
                        .zip(b.1)
                        .all(|(x, y)| x.0 == y.0 && x.1.to_bits() == y.1.to_bits())
            })
    }
}

impl TargetingIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Number of crowd/ad map lookups served so far.
    pub fn read_count(&self) -> u64 {
        self.reads.0.load(Ordering::Relaxed)
    }

    /// `C(u)`, untruncated. Empty for unknown users.
    pub fn crowds_of(&self, user: UserId) -> Vec<(CrowdId, TargetingType)> {
        self.crowd_map(user)
            .map(|m| m.iter().map(|(&c, &k)| (c, k)).collect())
            .unwrap_or_default()
    }

    /// `A(c)` with current bids, untruncated.
    pub fn ads_of(&self, crowd: CrowdId) -> Vec<(AdId, f64)> {
        self.ad_map(crowd)
            .map(|m| m.iter().map(|(&a, &b)| (a, b)).collect())
            .unwrap_or_default()
    }

    pub fn users_of(&self, crowd: CrowdId) -> Vec<UserId> {
        self.reads.bump();
        self.crowd_users
            .get(&crowd)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    /// `O(u)`: the join of `C(u)` and `A(c)`. No truncation and no validity
    /// filtering beyond what the index publishes.
    pub fn candidates(&self, user: UserId) -> Vec<(AdCrowdPair, f64)> {
        let mut out = Vec::new();
        if let Some(crowds) = self.crowd_map(user) {
            for &crowd in crowds.keys() {
                if let Some(ads) = self.ad_map(crowd) {
                    out.extend(ads.iter().map(|(&ad, &bid)| (AdCrowdPair::new(ad, crowd), bid)));
                }
            }
        }
        out
    }

    pub(crate) fn crowd_map(&self, user: UserId) -> Option<&BTreeMap<CrowdId, TargetingType>> {
        self.reads.bump();
        self.user_crowds.get(&user)
    }

    pub(crate) fn ad_map(&self, crowd: CrowdId) -> Option<&BTreeMap<AdId, f64>> {
        self.reads.bump();
        self.crowd_ads.get(&crowd)
    }

    pub(crate) fn is_member(&self, user: UserId, crowd: CrowdId) -> bool {
        self.user_crowds
            .get(&user)
            .is_some_and(|m| m.contains_key(&crowd))
    }

    /// Current bid of a published pair.
    pub(crate) fn published_bid(&self, pair: AdCrowdPair) -> Option<f64> {
        self.crowd_ads.get(&pair.crowd)?.get(&pair.ad).copied()
    }

    pub fn campaign(&self, id: CampaignId) -> Option<&Campaign> {
        self.campaigns.get(&id)
    }

    pub fn campaign_for_ad(&self, ad: AdId) -> Option<&Campaign> {
        self.ad_owner.get(&ad).and_then(|id| self.campaigns.get(id))
    }

    pub fn campaigns(&self) -> impl Iterator<Item = &Campaign> {
        self.campaigns.values()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.user_crowds.keys().copied()
    }

    pub fn crowds(&self) -> impl Iterator<Item = CrowdId> + '_ {
        self.crowd_users.keys().chain(self.crowd_ads.keys()).copied().collect::<BTreeSet<_>>().into_iter()
    }

    /// Applies one event. On error the index is unchanged.
    pub fn apply(&mut self, event: &MutationEvent) -> Result<Applied> {
        let mut applied = Applied {
            at: event.at,
            ..Applied::default()
        };
        match &event.body {
            EventBody::UserCrowdsChanged {
                user,
                added,
                removed,
            } => {
                let mut delta = MembershipDelta {
                    user: *user,
                    ..Default::default()
                };
                for &crowd in removed {
                    if self.leave(*user, crowd) {
                        delta.left.insert(crowd);
                    }
                }
                for m in added {
                    if self.join(*user, m.crowd, m.kind) {
                        delta.left.remove(&m.crowd);
                        delta.joined.insert(m.crowd);
                    }
                }
                applied.user = Some(delta);
            }
            EventBody::CampaignUpserted { campaign } => {
                campaign.validate()?;
                if let Some(&owner) = self.ad_owner.get(&campaign.ad) {
                    if owner != campaign.id {
                        return Err(Error::AdOwnedElsewhere {
                            ad: campaign.ad,
                            owner,
                        });
                    }
                }
                if let Some(old) = self.campaigns.remove(&campaign.id) {
                    self.unpublish(&old);
                    self.ad_owner.remove(&old.ad);
                    applied.pairs.extend(pairs_of(&old));
                    if old.is_serving() && !campaign.is_serving() {
                        applied.invalidated = Some(old.id);
                    }
                }
                applied.pairs.extend(pairs_of(campaign));
                self.publish(campaign);
                self.ad_owner.insert(campaign.ad, campaign.id);
                self.campaigns.insert(campaign.id, campaign.clone());
            }
            EventBody::CampaignStatusChanged { campaign, status } => {
                let status = *status;
                self.update_campaign(*campaign, &mut applied, |c| {
                    c.status = status;
                    Ok(())
                })?;
            }
            EventBody::BudgetChanged {
                campaign,
                remaining,
            } => {
                let remaining = *remaining;
                self.update_campaign(*campaign, &mut applied, |c| {
                    if !(remaining.is_finite() && remaining >= 0.0) {
                        return Err(Error::InvalidCampaign {
                            campaign: c.id,
                            reason: format!("budget must be >= 0, got {remaining}"),
                        });
                    }
                    c.budget_remaining = remaining;
                    Ok(())
                })?;
            }
            EventBody::BidChanged {
                campaign,
                crowd,
                bid,
            } => {
                let (crowd, bid) = (*crowd, *bid);
                self.update_campaign(*campaign, &mut applied, |c| {
                    if !(bid.is_finite() && bid > 0.0) {
                        return Err(Error::InvalidCampaign {
                            campaign: c.id,
                            reason: format!("bid must be > 0, got {bid}"),
                        });
                    }
                    let t = c
                        .targetings
                        .iter_mut()
                        .find(|t| t.crowd == crowd)
                        .ok_or(Error::UnknownTargeting {
                            campaign: c.id,
                            crowd,
                        })?;
                    t.bid = bid;
                    Ok(())
                })?;
                let ad = self.campaigns[campaign].ad;
                applied.pairs.insert(AdCrowdPair::new(ad, crowd));
            }
        }
        self.version += 1;
        applied.version = self.version;
        Ok(applied)
    }

    /// Validates and applies `edit` on a copy, then republishes the campaign.
    /// A change in serving state reports all of its pairs (on resume) or an
    /// invalidation (on stop).
    fn update_campaign(
        &mut self,
        id: CampaignId,
        applied: &mut Applied,
        edit: impl FnOnce(&mut Campaign) -> Result<()>,
    ) -> Result<()> {
        let old = self.campaigns.get(&id).ok_or(Error::UnknownCampaign(id))?;
        let mut new = old.clone();
        edit(&mut new)?;
        let old = self.campaigns.insert(id, new.clone()).expect("present");
        self.unpublish(&old);
        self.publish(&new);
        match (old.is_serving(), new.is_serving()) {
            (false, true) => applied.pairs.extend(pairs_of(&new)),
            (true, false) => applied.invalidated = Some(id),
            _ => {}
        }
        Ok(())
    }

    fn publish(&mut self, campaign: &Campaign) {
        if !campaign.is_serving() {
            return;
        }
        for t in &campaign.targetings {
            self.crowd_ads
                .entry(t.crowd)
                .or_default()
                .insert(campaign.ad, t.bid);
        }
    }

    fn unpublish(&mut self, campaign: &Campaign) {
        for t in &campaign.targetings {
            if let Some(ads) = self.crowd_ads.get_mut(&t.crowd) {
                ads.remove(&campaign.ad);
                if ads.is_empty() {
                    self.crowd_ads.remove(&t.crowd);
                }
            }
        }
    }

    fn join(&mut self, user: UserId, crowd: CrowdId, kind: TargetingType) -> bool {
        let fresh = self
            .user_crowds
            .entry(user)
            .or_default()
            .insert(crowd, kind)
            .is_none();
        self.crowd_users.entry(crowd).or_default().insert(user);
        fresh
    }

    fn leave(&mut self, user: UserId, crowd: CrowdId) -> bool {
        let Some(crowds) = self.user_crowds.get_mut(&user) else {
            return false;
        };
        let was = crowds.remove(&crowd).is_some();
        if crowds.is_empty() {
            self.user_crowds.remove(&user);
        }
        if let Some(users) = self.crowd_users.get_mut(&crowd) {
            users.remove(&user);
            if users.is_empty() {
                self.crowd_users.remove(&crowd);
            }
        }
        was
    }

    /// Full-scan check of the structural invariants. Returns a description of
    /// the first violation.
    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        for (user, crowds) in &self.user_crowds {
            if crowds.is_empty() {
                return Err(format!("{user} has an empty crowd map"));
            }
            for crowd in crowds.keys() {
                if !self.crowd_users.get(crowd).is_some_and(|s| s.contains(user)) {
                    return Err(format!("{user} in {crowd} but missing from crowd_users"));
                }
            }
        }
        for (crowd, users) in &self.crowd_users {
            if users.is_empty() {
                return Err(format!("{crowd} has an empty user set"));
            }
            for user in users {
                if !self.is_member(*user, *crowd) {
                    return Err(format!("crowd_users lists {user} in {crowd} but user_crowds does not"));
                }
            }
        }
        let mut expected: BTreeMap<CrowdId, BTreeMap<AdId, f64>> = BTreeMap::new();
        for c in self.campaigns.values() {
            if self.ad_owner.get(&c.ad) != Some(&c.id) {
                return Err(format!("ad owner map disagrees for {}", c.id));
            }
            if c.is_serving() {
                for t in &c.targetings {
                    expected.entry(t.crowd).or_default().insert(c.ad, t.bid);
                }
            }
        }
        if self.ad_owner.len() != self.campaigns.len() {
            return Err("ad owner map has stale entries".into());
        }
        let bits = |m: &BTreeMap<CrowdId, BTreeMap<AdId, f64>>| -> Vec<(CrowdId, AdId, u64)> {
            m.iter()
                .flat_map(|(c, ads)| ads.iter().map(move |(a, b)| (*c, *a, b.to_bits())))
                .collect()
        };
        if bits(&expected) != bits(&self.crowd_ads) {
            return Err("crowd_ads disagrees with campaign targetings".into());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(INDEX_MAGIC, INDEX_FORMAT);
        w.u64(self.version);
        w.section(SEC_CAMPAIGNS, |w| {
            w.len(self.campaigns.len());
            for c in self.campaigns.values() {
                w.u64(c.id.0);
                w.u64(c.ad.0);
                w.u8(c.status.code());
                w.f64(c.budget_remaining);
                w.len(c.targetings.len());
                for t in &c.targetings {
                    w.u64(t.crowd.0);
                    w.u8(t.kind.code());
                    w.f64(t.bid);
                }
            }
        });
        w.section(SEC_USER_CROWDS, |w| {
            w.len(self.user_crowds.len());
            for (user, crowds) in &self.user_crowds {
                w.u64(user.0);
                w.len(crowds.len());
                for (crowd, kind) in crowds {
                    w.u64(crowd.0);
                    w.u8(kind.code());
                }
            }
        });
        w.section(SEC_CROWD_ADS, |w| {
            w.len(self.crowd_ads.len());
            for (crowd, ads) in &self.crowd_ads {
                w.u64(crowd.0);
                w.len(ads.len());
                for (ad, bid) in ads {
                    w.u64(ad.0);
                    w.f64(*bid);
                }
            }
        });
        w.section(SEC_CROWD_USERS, |w| {
            w.len(self.crowd_users.len());
            for (crowd, users) in &self.crowd_users {
                w.u64(crowd.0);
                w.len(users.len());
                for user in users {
                    w.u64(user.0);
                }
            }
        });
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, INDEX_MAGIC, INDEX_FORMAT)?;
        let bad = |what: &str| Error::Integrity(format!("invalid {what}"));
        let mut index = TargetingIndex {
            version: r.u64()?,
            ..Default::default()
        };

        let mut s = r.section(SEC_CAMPAIGNS)?;
        for _ in 0..s.len(33)? {
            let id = CampaignId(s.u64()?);
            let ad = AdId(s.u64()?);
            let status = CampaignStatus::from_code(s.u8()?).ok_or_else(|| bad("status"))?;
            let budget_remaining = s.f64()?;
            let mut targetings = Vec::new();
            for _ in 0..s.len(17)? {
                let crowd = CrowdId(s.u64()?);
                let kind = TargetingType::from_code(s.u8()?).ok_or_else(|| bad("targeting type"))?;
                targetings.push(Targeting {
                    crowd,
                    kind,
                    bid: s.f64()?,
                });
            }
            let c = Campaign {
                id,
                ad,
                status,
                budget_remaining,
                targetings,
            };
            c.validate().map_err(|e| Error::Integrity(e.to_string()))?;
            index.ad_owner.insert(ad, id);
            index.campaigns.insert(id, c);
        }
        s.expect_end()?;

        let mut s = r.section(SEC_USER_CROWDS)?;
        for _ in 0..s.len(16)? {
            let user = UserId(s.u64()?);
            let mut crowds = BTreeMap::new();
            for _ in 0..s.len(9)? {
                let crowd = CrowdId(s.u64()?);
                let kind = TargetingType::from_code(s.u8()?).ok_or_else(|| bad("targeting type"))?;
                crowds.insert(crowd, kind);
            }
            index.user_crowds.insert(user, crowds);
        }
        s.expect_end()?;

        let mut s = r.section(SEC_CROWD_ADS)?;
        for _ in 0..s.len(16)? {
            let crowd = CrowdId(s.u64()?);
            let mut ads = BTreeMap::new();
            for _ in 0..s.len(16)? {
                let ad = AdId(s.u64()?);
                ads.insert(ad, s.f64()?);
            }
            index.crowd_ads.insert(crowd, ads);
        }
        s.expect_end()?;

        let mut s = r.section(SEC_CROWD_USERS)?;
        for _ in 0..s.len(16)? {
            let crowd = CrowdId(s.u64()?);
            let mut users = BTreeSet::new();
            for _ in 0..s.len(8)? {
                users.insert(UserId(s.u64()?));
            }
            index.crowd_users.insert(crowd, users);
        }
        s.expect_end()?;
        r.expect_end()?;

        index.check_consistency().map_err(Error::Integrity)?;
        Ok(index)
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

const INDEX_MAGIC: &[u8; 8] = b"TFMSIDX\0";
const INDEX_FORMAT: u32 = 1;
const SEC_CAMPAIGNS: u8 = 1;
const SEC_USER_CROWDS: u8 = 2;
const SEC_CROWD_ADS: u8 = 3;
const SEC_CROWD_USERS: u8 = 4;

fn pairs_of(c: &Campaign) -> impl Iterator<Item = AdCrowdPair> + '_ {
    c.targetings.iter().map(move |t| AdCrowdPair::new(c.ad, t.crowd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(body: EventBody) -> MutationEvent {
        MutationEvent { at: 0, body }
    }

    fn member(crowd: u64) -> Membership {
        Membership {
            crowd: CrowdId(crowd),
            kind: TargetingType::Keywords,
        }
    }

    fn campaign(id: u64, crowds: &[(u64, f64)]) -> Campaign {
        Campaign {
            id: CampaignId(id),
            ad: AdId(id * 10),
            status: CampaignStatus::Active,
            budget_remaining: 100.0,
            targetings: crowds
                .iter()
                .map(|&(c, bid)| Targeting {
                    crowd: CrowdId(c),
                    kind: TargetingType::Keywords,
                    bid,
                })
                .collect(),
        }
    }

    fn join(user: u64, crowds: &[u64]) -> MutationEvent {
        ev(EventBody::UserCrowdsChanged {
            user: UserId(user),
            added: crowds.iter().map(|&c| member(c)).collect(),
            removed: vec![],
        })
    }

    #[test]
    fn empty_lookups() {
        let idx = TargetingIndex::new();
        assert!(idx.crowds_of(UserId(1)).is_empty());
        assert!(idx.ads_of(CrowdId(1)).is_empty());
        assert!(idx.users_of(CrowdId(1)).is_empty());
        assert!(idx.candidates(UserId(1)).is_empty());
    }

    #[test]
    fn crowds_after_join() {
        let mut idx = TargetingIndex::new();
        idx.apply(&join(1, &[1, 2])).unwrap();
        assert_eq!(
            idx.crowds_of(UserId(1)),
            vec![(CrowdId(1), TargetingType::Keywords), (CrowdId(2), TargetingType::Keywords)]
        );
    }

    #[test]
    fn candidates_join_by_hand() {
        let mut idx = TargetingIndex::new();
        idx.apply(&join(1, &[1, 2])).unwrap();
        // campaign 1 owns ad 10 on c1; campaign 2 owns ad 20 on c1 and c2
        idx.apply(&ev(EventBody::CampaignUpserted { campaign: campaign(1, &[(1, 1.0)]) })).unwrap();
        idx.apply(&ev(EventBody::CampaignUpserted { campaign: campaign(2, &[(1, 1.0), (2, 2.0)]) }))
            .unwrap();
        let got: BTreeSet<_> = idx.candidates(UserId(1)).into_iter().map(|(p, _)| p).collect();
        let want: BTreeSet<_> = [(10, 1), (20, 1), (20, 2)]
            .into_iter()
            .map(|(a, c)| AdCrowdPair::new(AdId(a), CrowdId(c)))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn bid_change_is_last_write_wins() {
        let mut idx = TargetingIndex::new();
        idx.apply(&ev(EventBody::CampaignUpserted { campaign: campaign(1, &[(1, 1.0)]) })).unwrap();
        let applied = idx
            .apply(&ev(EventBody::BidChanged {
                campaign: CampaignId(1),
                crowd: CrowdId(1),
                bid: 2.0,
            }))
            .unwrap();
        assert_eq!(idx.ads_of(CrowdId(1)), vec![(AdId(10), 2.0)]);
        assert!(applied.pairs.contains(&AdCrowdPair::new(AdId(10), CrowdId(1))));
    }

    #[test]
    fn cancel_unpublishes() {
        let mut idx = TargetingIndex::new();
        idx.apply(&ev(EventBody::CampaignUpserted { campaign: campaign(1, &[(1, 1.0)]) })).unwrap();
        let applied = idx
            .apply(&ev(EventBody::CampaignStatusChanged {
                campaign: CampaignId(1),
                status: CampaignStatus::Canceled,
            }))
            .unwrap();
        assert!(idx.ads_of(CrowdId(1)).is_empty());
        assert_eq!(applied.invalidated, Some(CampaignId(1)));
        idx.check_consistency().unwrap();
    }

    #[test]
    fn budget_exhaustion_unpublishes_and_refill_republishes() {
        let mut idx = TargetingIndex::new();
        idx.apply(&ev(EventBody::CampaignUpserted { campaign: campaign(1, &[(1, 1.0)]) })).unwrap();
        idx.apply(&ev(EventBody::BudgetChanged { campaign: CampaignId(1), remaining: 0.0 })).unwrap();
        assert!(idx.ads_of(CrowdId(1)).is_empty());
        let applied = idx
            .apply(&ev(EventBody::BudgetChanged { campaign: CampaignId(1), remaining: 5.0 }))
            .unwrap();
        assert_eq!(idx.ads_of(CrowdId(1)).len(), 1);
        assert_eq!(applied.pairs.len(), 1);
    }

    #[test]
    fn add_then_remove_restores_state() {
        let mut idx = TargetingIndex::new();
        idx.apply(&join(1, &[1])).unwrap();
        let before = idx.clone();
        idx.apply(&join(1, &[7])).unwrap();
        idx.apply(&ev(EventBody::UserCrowdsChanged {
            user: UserId(1),
            added: vec![],
            removed: vec![CrowdId(7)],
        }))
        .unwrap();
        assert_eq!(idx.version(), before.version() + 2);
        let mut rewound = idx.clone();
        rewound.version = before.version;
        assert_eq!(rewound, before);
    }

    #[test]
    fn unknown_campaign_rejected_without_change() {
        let mut idx = TargetingIndex::new();
        idx.apply(&join(1, &[1])).unwrap();
        let before = idx.clone();
        for body in [
            EventBody::CampaignStatusChanged { campaign: CampaignId(9), status: CampaignStatus::Paused },
            EventBody::BidChanged { campaign: CampaignId(9), crowd: CrowdId(1), bid: 1.0 },
            EventBody::BudgetChanged { campaign: CampaignId(9), remaining: 1.0 },
        ] {
            let err = idx.apply(&ev(body)).unwrap_err();
            assert!(err.to_string().contains("camp9"), "{err}");
        }
        assert_eq!(idx, before);
    }

    #[test]
    fn bid_on_untargeted_crowd_rejected() {
        let mut idx = TargetingIndex::new();
        idx.apply(&ev(EventBody::CampaignUpserted { campaign: campaign(1, &[(1, 1.0)]) })).unwrap();
        let before = idx.clone();
        assert!(idx
            .apply(&ev(EventBody::BidChanged { campaign: CampaignId(1), crowd: CrowdId(2), bid: 1.0 }))
            .is_err());
        assert_eq!(idx, before);
    }

    #[test]
    fn ad_cannot_change_owner() {
        let mut idx = TargetingIndex::new();
        idx.apply(&ev(EventBody::CampaignUpserted { campaign: campaign(1, &[(1, 1.0)]) })).unwrap();
        let mut thief = campaign(2, &[(1, 1.0)]);
        thief.ad = AdId(10);
        assert!(matches!(
            idx.apply(&ev(EventBody::CampaignUpserted { campaign: thief })),
            Err(Error::AdOwnedElsewhere { .. })
        ));
    }

    #[test]
    fn upsert_reports_removed_targetings() {
        let mut idx = TargetingIndex::new();
        idx.apply(&ev(EventBody::CampaignUpserted { campaign: campaign(1, &[(1, 1.0), (2, 1.0)]) }))
            .unwrap();
        let applied = idx
            .apply(&ev(EventBody::CampaignUpserted { campaign: campaign(1, &[(2, 3.0)]) }))
            .unwrap();
        assert!(applied.pairs.contains(&AdCrowdPair::new(AdId(10), CrowdId(1))));
        assert!(idx.ads_of(CrowdId(1)).is_empty());
        assert_eq!(idx.ads_of(CrowdId(2)), vec![(AdId(10), 3.0)]);
    }

    #[test]
    fn snapshot_roundtrip_and_corruption() {
        let mut idx = TargetingIndex::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        idx.snapshot(&path).unwrap();
        assert_eq!(TargetingIndex::load(&path).unwrap(), idx);

        idx.apply(&join(1, &[1, 2])).unwrap();
        idx.apply(&ev(EventBody::CampaignUpserted { campaign: campaign(1, &[(1, 0.5)]) })).unwrap();
        idx.snapshot(&path).unwrap();
        let back = TargetingIndex::load(&path).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.version(), 2);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] ^= 0x01;
        assert!(matches!(TargetingIndex::from_bytes(&bytes), Err(Error::Integrity(_))));
        bytes[20] ^= 0x01;
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(TargetingIndex::from_bytes(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn event_json_shape() {
        let e = MutationEvent {
            at: 30,
            body: EventBody::BidChanged { campaign: CampaignId(1), crowd: CrowdId(2), bid: 1.25 },
        };
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["kind"], "BidChanged");
        assert_eq!(v["payload"]["crowd"], 2);
        let back: MutationEvent = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }

    fn arb_event() -> impl Strategy<Value = EventBody> {
        let crowds = proptest::collection::vec(0u64..12, 0..4);
        prop_oneof![
            (0u64..20, crowds.clone(), crowds.clone()).prop_map(|(u, add, rem)| EventBody::UserCrowdsChanged {
                user: UserId(u),
                added: add.into_iter().map(member).collect(),
                removed: rem.into_iter().map(CrowdId).collect(),
            }),
            (0u64..6, proptest::collection::btree_set(0u64..12, 0..4), 0.1f64..5.0).prop_map(|(id, cs, bid)| {
                let cs: Vec<_> = cs.into_iter().map(|c| (c, bid)).collect();
                EventBody::CampaignUpserted { campaign: campaign(id, &cs) }
            }),
            (0u64..6, 0u8..3).prop_map(|(id, s)| EventBody::CampaignStatusChanged {
                campaign: CampaignId(id),
                status: CampaignStatus::from_code(s).unwrap(),
            }),
            (0u64..6, 0u64..12, 0.1f64..5.0).prop_map(|(id, c, bid)| EventBody::BidChanged {
                campaign: CampaignId(id),
                crowd: CrowdId(c),
                bid,
            }),
            (0u64..6, prop_oneof![Just(0.0), 0.0f64..10.0]).prop_map(|(id, b)| EventBody::BudgetChanged {
                campaign: CampaignId(id),
                remaining: b,
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mutation_fuzz_preserves_invariants(events in proptest::collection::vec(arb_event(), 1..200)) {
            let mut idx = TargetingIndex::new();
            let mut last = 0;
            for (i, body) in events.into_iter().enumerate() {
                if let Ok(a) = idx.apply(&MutationEvent { at: i as u64, body }) {
                    prop_assert!(a.version > last);
                    last = a.version;
                }
                prop_assert_eq!(idx.check_consistency(), Ok(()));
            }
            for crowd in 0..12 {
                let scan: Vec<UserId> = idx.users().filter(|u| idx.is_member(*u, CrowdId(crowd))).collect();
                prop_assert_eq!(idx.users_of(CrowdId(crowd)), scan);
            }
            prop_assert_eq!(TargetingIndex::from_bytes(&idx.to_bytes()).unwrap(), idx);
        }
    }
}
