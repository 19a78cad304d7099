//! Deterministic long-tail world and traffic generation, plus the JSONL log
//! format shared with the CLI.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::codec::checksum;
use crate::domain::{
    mix64, AdId, Campaign, CampaignId, CampaignStatus, CrowdId, Targeting, TargetingType,
    Timestamp, UserId, DAY, HOUR,
};
use crate::error::{Error, IoContext, Result};
use crate::index::{EventBody, Membership, MutationEvent};
use crate::nearline::Visit;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const TRAFFIC_FILE: &str = "traffic.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub users: u64,
    pub crowds: u64,
    pub campaigns: u64,
    /// Zipf exponent over crowd popularity ranks. Sets both the crowd size
    /// distribution and how targetings concentrate on popular crowds.
    pub crowd_size_exponent: f64,
    pub crowds_per_user_exponent: f64,
    pub max_crowds_per_user: u64,
    pub targetings_per_campaign_exponent: f64,
    pub max_targetings_per_campaign: u64,
    /// Mean visits per active user per day.
    pub mean_visits_per_day: f64,
    /// Share of users who show up almost every day.
    pub regular_user_share: f64,
    pub regular_daily_activity: f64,
    pub occasional_daily_activity: f64,
    pub advertiser_events_per_hour: f64,
    pub user_events_per_hour: f64,
    /// Days of traffic before the measured horizon, used as visit history.
    pub history_days: u64,
    /// Measured days.
    pub days: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            users: 2_000,
            crowds: 600,
            campaigns: 4_000,
            crowd_size_exponent: 1.05,
            crowds_per_user_exponent: 1.2,
            max_crowds_per_user: 120,
            targetings_per_campaign_exponent: 1.3,
            max_targetings_per_campaign: 30,
            mean_visits_per_day: 8.2,
            regular_user_share: 0.6,
            regular_daily_activity: 0.97,
            occasional_daily_activity: 0.2,
            advertiser_events_per_hour: 120.0,
            user_events_per_hour: 60.0,
            history_days: 7,
            days: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.users == 0 {
            return fail("users must be >= 1".into());
        }
        if self.crowds == 0 && self.campaigns > 0 {
            return fail("campaigns need at least one crowd to target".into());
        }
        for (name, v) in [
            ("crowd_size_exponent", self.crowd_size_exponent),
            ("crowds_per_user_exponent", self.crowds_per_user_exponent),
            ("targetings_per_campaign_exponent", self.targetings_per_campaign_exponent),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.max_crowds_per_user == 0 || self.max_targetings_per_campaign == 0 {
            return fail("per-user and per-campaign maxima must be >= 1".into());
        }
        if !(self.mean_visits_per_day.is_finite() && self.mean_visits_per_day >= 1.0) {
            return fail(format!(
                "mean_visits_per_day must be >= 1, got {}",
                self.mean_visits_per_day
            ));
        }
        for (name, v) in [
            ("regular_user_share", self.regular_user_share),
            ("regular_daily_activity", self.regular_daily_activity),
            ("occasional_daily_activity", self.occasional_daily_activity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("advertiser_events_per_hour", self.advertiser_events_per_hour),
            ("user_events_per_hour", self.user_events_per_hour),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.days == 0 {
            return fail("days must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn horizon(&self) -> Timestamp {
        (self.history_days + self.days) * DAY
    }

    pub fn measure_start(&self) -> Timestamp {
        self.history_days * DAY
    }

    /// Crowd types are fixed per crowd.
    pub fn crowd_kind(&self, crowd: CrowdId) -> TargetingType {
        TargetingType::ALL[(mix64(self.seed ^ 0x5bd1_e995 ^ crowd.0) % 3) as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub event: MutationEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum TrafficBody {
    Visit { user: UserId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub seq: u64,
    pub at: Timestamp,
    #[serde(flatten)]
    pub body: TrafficBody,
}

impl TrafficRecord {
    pub fn visit(&self) -> Visit {
        let TrafficBody::Visit { user } = self.body;
        Visit { at: self.at, user }
    }
}

/// An event log and a traffic log. `seq` is global across both and `at` is
/// non-decreasing in `seq` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub events: Vec<EventRecord>,
    pub traffic: Vec<TrafficRecord>,
}

/// One entry of the merged replay order.
#[derive(Debug, Clone, Copy)]
pub enum Item<'a> {
    Event(&'a EventRecord),
    Visit(&'a TrafficRecord),
}

impl Workload {
    pub fn events_jsonl(&self) -> String {
        to_jsonl(&self.events)
    }

    pub fn traffic_jsonl(&self) -> String {
        to_jsonl(&self.traffic)
    }

    /// CRC-64 over both serialized logs, hex encoded.
    pub fn checksum(&self) -> String {
        let mut bytes = self.events_jsonl().into_bytes();
        bytes.extend_from_slice(self.traffic_jsonl().as_bytes());
        format!("{:016x}", checksum(&bytes))
    }

    pub fn visits(&self) -> Vec<Visit> {
        self.traffic.iter().map(TrafficRecord::visit).collect()
    }

    /// Both logs merged by `(at, seq)`.
    pub fn replay_order(&self) -> Vec<Item<'_>> {
        let mut items: Vec<(Timestamp, u64, Item<'_>)> = self
            .events
            .iter()
            .map(|e| (e.event.at, e.seq, Item::Event(e)))
            .chain(self.traffic.iter().map(|t| (t.at, t.seq, Item::Visit(t))))
            .collect();
        items.sort_by_key(|(at, seq, _)| (*at, *seq));
        items.into_iter().map(|(_, _, i)| i).collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
        for (name, body) in [(EVENTS_FILE, self.events_jsonl()), (TRAFFIC_FILE, self.traffic_jsonl())] {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).io_context(|| format!("creating {}", path.display()))?;
            f.write_all(body.as_bytes())
                .io_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let events: Vec<EventRecord> = read_jsonl(&dir.join(EVENTS_FILE))?;
        let traffic: Vec<TrafficRecord> = read_jsonl(&dir.join(TRAFFIC_FILE))?;
        let w = Workload { events, traffic };
        w.check_order()?;
        Ok(w)
    }

    fn check_order(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let order = self.replay_order();
        let mut last_seq: Option<u64> = None;
        for item in order {
            let (seq, file) = match item {
                Item::Event(e) => (e.seq, EVENTS_FILE),
                Item::Visit(t) => (t.seq, TRAFFIC_FILE),
            };
            if !seen.insert(seq) {
                return Err(Error::MalformedLog {
                    path: file.into(),
                    line: 0,
                    reason: format!("duplicate seq {seq}"),
                });
            }
            if last_seq.is_some_and(|l| seq < l) {
                return Err(Error::MalformedLog {
                    path: file.into(),
                    line: 0,
                    reason: format!("seq {seq} is out of time order"),
                });
            }
            last_seq = Some(seq);
        }
        Ok(())
    }
}

fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("log records serialize"));
        out.push('\n');
    }
    out
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).io_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.io_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::MalformedLog {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

struct Draws {
    rng: ChaCha8Rng,
    crowd_rank: Option<Zipf<f64>>,
    crowds_per_user: Zipf<f64>,
    targetings_per_campaign: Zipf<f64>,
    bid: LogNormal<f64>,
}

impl Draws {
    fn crowd(&mut self) -> CrowdId {
        let z = self.crowd_rank.as_ref().expect("crowds > 0");
        CrowdId(z.sample(&mut self.rng) as u64 - 1)
    }

    /// Up to `count` distinct popularity-weighted crowds.
    fn distinct_crowds(&mut self, count: u64, limit: u64) -> BTreeSet<CrowdId> {
        let count = count.min(limit);
        let mut out = BTreeSet::new();
        let mut attempts = 0;
        while (out.len() as u64) < count && attempts < count * 20 {
            out.insert(self.crowd());
            attempts += 1;
        }
        out
    }

    fn bid(&mut self) -> f64 {
        (self.bid.sample(&mut self.rng)).clamp(0.05, 20.0)
    }
}

/// Builds the world, advertiser/user mutations over the horizon, and the
/// visit stream.
pub fn generate(spec: &WorkloadSpec) -> Result<Workload> {
    spec.validate()?;
    let mut d = Draws {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        crowd_rank: (spec.crowds > 0)
            .then(|| Zipf::new(spec.crowds as f64, spec.crowd_size_exponent).expect("validated")),
        crowds_per_user: Zipf::new(spec.max_crowds_per_user as f64, spec.crowds_per_user_exponent)
            .expect("validated"),
        targetings_per_campaign: Zipf::new(
            spec.max_targetings_per_campaign as f64,
            spec.targetings_per_campaign_exponent,
        )
        .expect("validated"),
        bid: LogNormal::new(0.0, 0.6).expect("constant parameters"),
    };

    let mut events: Vec<MutationEvent> = Vec::new();
    let mut campaigns: BTreeMap<CampaignId, Campaign> = BTreeMap::new();
    for id in 0..spec.campaigns {
        let n = d.targetings_per_campaign.sample(&mut d.rng) as u64;
        let crowds = d.distinct_crowds(n, spec.crowds);
        let campaign = Campaign {
            id: CampaignId(id),
            ad: AdId(id),
            status: CampaignStatus::Active,
            budget_remaining: d.rng.random_range(100.0..1000.0),
            targetings: crowds
                .into_iter()
                .map(|c| Targeting {
                    crowd: c,
                    kind: spec.crowd_kind(c),
                    bid: d.bid(),
                })
                .collect(),
        };
        campaigns.insert(campaign.id, campaign.clone());
        events.push(MutationEvent {
            at: 0,
            body: EventBody::CampaignUpserted { campaign },
        });
    }

    let mut memberships = initial_memberships(spec, &mut d);
    for (user, crowds) in memberships.iter().enumerate() {
        if !crowds.is_empty() {
            events.push(MutationEvent {
                at: 0,
                body: EventBody::UserCrowdsChanged {
                    user: UserId(user as u64),
                    added: crowds
                        .iter()
                        .map(|&c| Membership {
                            crowd: c,
                            kind: spec.crowd_kind(c),
                        })
                        .collect(),
                    removed: vec![],
                },
            });
        }
    }

    events.extend(advertiser_events(spec, &mut d, &mut campaigns));
    events.extend(user_events(spec, &mut d, &mut memberships));
    events.sort_by_key(|e| e.at);

    let visits = traffic(spec, &mut d.rng);

    // global seq: events before visits at equal timestamps
    let mut merged: Vec<(Timestamp, u8, usize)> = events
        .iter()
        .enumerate()
        .map(|(i, e)| (e.at, 0, i))
        .chain(visits.iter().enumerate().map(|(i, v)| (v.at, 1, i)))
        .collect();
    merged.sort();
    let mut event_records: Vec<Option<EventRecord>> = vec![None; events.len()];
    let mut traffic_records: Vec<Option<TrafficRecord>> = vec![None; visits.len()];
    let mut events = events.into_iter().map(Some).collect::<Vec<_>>();
    for (seq, (_, kind, i)) in merged.into_iter().enumerate() {
        let seq = seq as u64;
        if kind == 0 {
            event_records[i] = Some(EventRecord {
                seq,
                event: events[i].take().expect("each event sequenced once"),
            });
        } else {
            traffic_records[i] = Some(TrafficRecord {
                seq,
                at: visits[i].at,
                body: TrafficBody::Visit { user: visits[i].user },
            });
        }
    }
    Ok(Workload {
        events: event_records.into_iter().map(|r| r.expect("sequenced")).collect(),
        traffic: traffic_records.into_iter().map(|r| r.expect("sequenced")).collect(),
    })
}

/// Crowd-first membership. Crowd `r` (0-based) gets an expected size
/// proportional to `(r + 1)^-crowd_size_exponent`, scaled so the total matches
/// the mean crowds-per-user draw, and capped at the user count. Members are a
/// weighted sample without replacement, weighted by a per-user appetite drawn
/// from the crowds-per-user law.
fn initial_memberships(spec: &WorkloadSpec, d: &mut Draws) -> Vec<BTreeSet<CrowdId>> {
    let users = spec.users as usize;
    let mut out = vec![BTreeSet::new(); users];
    if spec.crowds == 0 {
        return out;
    }
    let appetite: Vec<f64> = (0..users).map(|_| d.crowds_per_user.sample(&mut d.rng)).collect();
    let total: f64 = appetite.iter().sum();
    let harmonic: f64 = (1..=spec.crowds)
        .map(|r| (r as f64).powf(-spec.crowd_size_exponent))
        .sum();
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(users);
    for crowd in 0..spec.crowds {
        let expected = total / harmonic * ((crowd + 1) as f64).powf(-spec.crowd_size_exponent);
        let size = (expected.floor() as usize + usize::from(d.rng.random_bool(expected.fract())))
            .min(users);
        if size == 0 {
            continue;
        }
        // Efraimidis-Spirakis: the `size` largest `ln(u) / w` keys
        keys.clear();
        keys.extend(appetite.iter().enumerate().map(|(u, &w)| {
            let x: f64 = d.rng.random_range(f64::MIN_POSITIVE..1.0);
            (x.ln() / w, u)
        }));
        if size < users {
            keys.select_nth_unstable_by(size - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        }
        for &(_, u) in &keys[..size] {
            out[u].insert(CrowdId(crowd));
        }
    }
    out
}

fn poisson_times(rate_per_hour: f64, horizon: Timestamp, rng: &mut ChaCha8Rng) -> Vec<Timestamp> {
    if rate_per_hour <= 0.0 {
        return Vec::new();
    }
    let gap = Exp::new(rate_per_hour / HOUR as f64).expect("positive rate");
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += gap.sample(rng);
        // t = 0 is reserved for the initial world
        let at = (t.ceil() as Timestamp).max(1);
        if at >= horizon {
            return out;
        }
        out.push(at);
    }
}

fn advertiser_events(
    spec: &WorkloadSpec,
    d: &mut Draws,
    campaigns: &mut BTreeMap<CampaignId, Campaign>,
) -> Vec<MutationEvent> {
    let mut out = Vec::new();
    if spec.campaigns == 0 {
        return out;
    }
    let mut next_id = spec.campaigns;
    for at in poisson_times(spec.advertiser_events_per_hour, spec.horizon(), &mut d.rng) {
        let roll: f64 = d.rng.random();
        let id = CampaignId(d.rng.random_range(0..next_id));
        let Some(c) = campaigns.get(&id).cloned() else {
            continue;
        };
        if c.status == CampaignStatus::Canceled && roll >= 0.85 {
            continue;
        }
        let body = if roll < 0.45 {
            let Some(t) = c.targetings.choose(&mut d.rng).copied() else {
                continue;
            };
            let factor: f64 = d.rng.random_range(0.5..1.8);
            let bid = (t.bid * factor).clamp(0.05, 20.0);
            EventBody::BidChanged {
                campaign: id,
                crowd: t.crowd,
                bid,
            }
        } else if roll < 0.65 {
            let remaining = if d.rng.random_bool(0.3) {
                0.0
            } else {
                d.rng.random_range(50.0..1000.0)
            };
            EventBody::BudgetChanged {
                campaign: id,
                remaining,
            }
        } else if roll < 0.80 {
            if c.status == CampaignStatus::Canceled {
                continue;
            }
            let status = match (c.status, d.rng.random_range(0..10)) {
                (_, 0) => CampaignStatus::Canceled,
                (CampaignStatus::Active, _) => CampaignStatus::Paused,
                _ => CampaignStatus::Active,
            };
            EventBody::CampaignStatusChanged { campaign: id, status }
        } else {
            // new campaign, or a retarget of an existing one
            let mut updated = if d.rng.random_bool(0.5) {
                let id = CampaignId(next_id);
                next_id += 1;
                let n = d.targetings_per_campaign.sample(&mut d.rng) as u64;
                Campaign {
                    id,
                    ad: AdId(id.0),
                    status: CampaignStatus::Active,
                    budget_remaining: d.rng.random_range(100.0..1000.0),
                    targetings: d
                        .distinct_crowds(n, spec.crowds)
                        .into_iter()
                        .map(|crowd| Targeting {
                            crowd,
                            kind: spec.crowd_kind(crowd),
                            bid: d.bid(),
                        })
                        .collect(),
                }
            } else {
                let mut c = c;
                if c.targetings.len() > 1 && d.rng.random_bool(0.5) {
                    let i = d.rng.random_range(0..c.targetings.len());
                    c.targetings.remove(i);
                } else {
                    let crowd = d.crowd();
                    if c.targeting(crowd).is_none() {
                        c.targetings.push(Targeting {
                            crowd,
                            kind: spec.crowd_kind(crowd),
                            bid: d.bid(),
                        });
                    }
                }
                c
            };
            updated.targetings.sort_by_key(|t| t.crowd);
            EventBody::CampaignUpserted { campaign: updated }
        };
        apply_to_model(campaigns, &body);
        out.push(MutationEvent { at, body });
    }
    out
}

fn apply_to_model(campaigns: &mut BTreeMap<CampaignId, Campaign>, body: &EventBody) {
    match body {
        EventBody::CampaignUpserted { campaign } => {
            campaigns.insert(campaign.id, campaign.clone());
        }
        EventBody::CampaignStatusChanged { campaign, status } => {
            campaigns.get_mut(campaign).expect("generated for known campaign").status = *status;
        }
        EventBody::BidChanged { campaign, crowd, bid } => {
            let c = campaigns.get_mut(campaign).expect("generated for known campaign");
            c.targetings
                .iter_mut()
                .find(|t| t.crowd == *crowd)
                .expect("generated for existing targeting")
                .bid = *bid;
        }
        EventBody::BudgetChanged { campaign, remaining } => {
            campaigns.get_mut(campaign).expect("generated for known campaign").budget_remaining = *remaining;
        }
        EventBody::UserCrowdsChanged { .. } => {}
    }
}

fn user_events(
    spec: &WorkloadSpec,
    d: &mut Draws,
    memberships: &mut [BTreeSet<CrowdId>],
) -> Vec<MutationEvent> {
    let mut out = Vec::new();
    if spec.crowds == 0 {
        return out;
    }
    for at in poisson_times(spec.user_events_per_hour, spec.horizon(), &mut d.rng) {
        let user = d.rng.random_range(0..spec.users);
        let crowds = &mut memberships[user as usize];
        let leave = !crowds.is_empty() && d.rng.random_bool(0.4);
        let body = if leave {
            let i = d.rng.random_range(0..crowds.len());
            let crowd = *crowds.iter().nth(i).expect("in range");
            crowds.remove(&crowd);
            EventBody::UserCrowdsChanged {
                user: UserId(user),
                added: vec![],
                removed: vec![crowd],
            }
        } else {
            let crowd = d.crowd();
            if !crowds.insert(crowd) {
                continue;
            }
            EventBody::UserCrowdsChanged {
                user: UserId(user),
                added: vec![Membership {
                    crowd,
                    kind: spec.crowd_kind(crowd),
                }],
                removed: vec![],
            }
        };
        out.push(MutationEvent { at, body });
    }
    out
}

/// Daily visits. Each active user-day gets at least one visit; the remaining
/// `round(mean * active) - active` visits are apportioned by heavy-tailed
/// per-user weights (largest remainder), so the daily mean is exact up to
/// rounding.
fn traffic(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Vec<Visit> {
    let intensity = LogNormal::new(0.0, 1.0).expect("constant parameters");
    let users: Vec<(f64, f64)> = (0..spec.users)
        .map(|_| {
            let activity = if rng.random_bool(spec.regular_user_share) {
                spec.regular_daily_activity
            } else {
                spec.occasional_daily_activity
            };
            (activity, intensity.sample(rng))
        })
        .collect();

    let mut out = Vec::new();
    for day in 0..spec.history_days + spec.days {
        let active: Vec<usize> = (0..users.len())
            .filter(|&u| rng.random_bool(users[u].0))
            .collect();
        if active.is_empty() {
            continue;
        }
        let total = (spec.mean_visits_per_day * active.len() as f64).round() as u64;
        let extra = total.saturating_sub(active.len() as u64);
        let weight_sum: f64 = active.iter().map(|&u| users[u].1).sum();
        let mut counts: Vec<(u64, f64, usize)> = active
            .iter()
            .map(|&u| {
                let share = extra as f64 * users[u].1 / weight_sum;
                (1 + share.floor() as u64, share - share.floor(), u)
            })
            .collect();
        let assigned: u64 = counts.iter().map(|c| c.0).sum();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].1.total_cmp(&counts[a].1).then(a.cmp(&b)));
        for &i in order.iter().take(total.saturating_sub(assigned) as usize) {
            counts[i].0 += 1;
        }
        for (count, _, u) in counts {
            for _ in 0..count {
                out.push(Visit {
                    at: day * DAY + rng.random_range(0..DAY),
                    user: UserId(u as u64),
                });
            }
        }
    }
    out.sort();
    out
}
