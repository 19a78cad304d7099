//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfms_core::baseline::{averaged_reward, match_optimal, CostMeter, Limit, RuleScores, TruncationConfig, TwoStageMatcher};
use tfms_core::domain::{
    AdId, Campaign, CampaignId, CampaignStatus, CrowdId, Scorer, Targeting, TargetingType, UserId, ValuedPair, DAY,
};
use tfms_core::harness::{generate, run, SimConfig, SimReport, Workload, WorkloadSpec};
use tfms_core::index::{EventBody, Membership, MutationEvent, TargetingIndex};
use tfms_core::nearline::{fully_update, select_active_users, DeltaWindow, TopNCache};
use tfms_core::serving::fetch;

/// Cost identity: `tfms_full` must sit within 1% of `r / 8.2`.
const COST_IDENTITY_REL_TOL: f64 = 0.01;
/// Mean daily visits per active user the workload is built around.
const VISITS_PER_ACTIVE_USER: f64 = 8.2;
/// TFMS online scoring per request, as a share of the truncated matcher's.
const FETCH_WORK_SHARE: f64 = 0.05;
/// Event-stream length replayed for delta regime (a).
const DELTA_HORIZON: u64 = 6 * 3600;
/// Cache length large enough to hold every candidate of every user.
const UNBOUNDED_N: usize = 1 << 30;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// List equality on pair and score; `scored_at` is bookkeeping.
fn same_list(a: &[ValuedPair], b: &[ValuedPair]) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| x.pair == y.pair && x.score.to_bits() == y.score.to_bits())
}

fn replay(events: impl IntoIterator<Item = MutationEvent>) -> TargetingIndex {
    let mut index = TargetingIndex::new();
    for e in events {
        index.apply(&e).expect("generated events apply");
    }
    index
}

fn oracle_equivalence() -> Outcome {
    let spec = WorkloadSpec {
        users: 10_000,
        history_days: 0,
        advertiser_events_per_hour: 0.0,
        user_events_per_hour: 0.0,
        ..WorkloadSpec::default()
    };
    let w = generate(&spec).expect("valid spec");
    let index = replay(w.events.iter().map(|e| e.event.clone()));
    let scorer = Scorer::new(11);
    let n = 50;
    let matcher = TwoStageMatcher::new(scorer, RuleScores::new(11), TruncationConfig::unbounded(n));
    let meter = CostMeter::new();
    let users: Vec<UserId> = (0..spec.users).map(UserId).collect();
    let mismatched = users
        .iter()
        .filter(|&&u| {
            let a = matcher.match_truncated(&index, u, 0, &meter);
            let b = match_optimal(&index, &scorer, u, n, 0, &meter);
            a != b
        })
        .count();
    outcome(
        mismatched == 0,
        format!("{} users, {mismatched} lists differ", users.len()),
    )
}

fn fully_update_correctness() -> Outcome {
    let spec = WorkloadSpec::default();
    let w = generate(&spec).expect("valid spec");
    let refresh_at = spec.measure_start();
    let index = replay(
        w.events
            .iter()
            .filter(|e| e.event.at < refresh_at)
            .map(|e| e.event.clone()),
    );
    let active = select_active_users(&w.visits(), refresh_at, 7 * DAY);
    let scorer = Scorer::new(11);
    let n = 200;
    let serial = fully_update(&index, &scorer, &active, n, 1, refresh_at, &CostMeter::new());
    let parallel = fully_update(&index, &scorer, &active, n, 8, refresh_at, &CostMeter::new());
    let meter = CostMeter::new();
    let wrong = active
        .iter()
        .filter(|&&u| {
            let oracle = match_optimal(&index, &scorer, u, n, refresh_at, &meter);
            serial.list(u).is_none_or(|l| *l != oracle)
        })
        .count();
    let identical = serial == parallel;
    outcome(
        wrong == 0 && identical && serial.len() == active.len(),
        format!(
            "{} active users, {wrong} differ from oracle, parallelism 1 vs 8 identical: {identical}",
            active.len()
        ),
    )
}

fn delta_world() -> (WorkloadSpec, Workload) {
    let spec = WorkloadSpec {
        seed: 21,
        users: 500,
        crowds: 200,
        campaigns: 1_000,
        history_days: 0,
        days: 1,
        advertiser_events_per_hour: 400.0,
        user_events_per_hour: 150.0,
        ..WorkloadSpec::default()
    };
    let w = generate(&spec).expect("valid spec");
    (spec, w)
}

/// Regime (a): arbitrary events, a cache holding every candidate, compared
/// with the oracle after every window flush.
fn delta_exact_large_n() -> (bool, String) {
    let (_, w) = delta_world();
    let scorer = Scorer::new(11);
    let (initial, stream): (Vec<_>, Vec<_>) = w
        .events
        .iter()
        .map(|e| e.event.clone())
        .filter(|e| e.at < DELTA_HORIZON)
        .partition(|e| e.at == 0);
    let mut index = replay(initial);
    let users: BTreeSet<UserId> = index.users().collect();
    let mut cache = fully_update(&index, &scorer, &users, UNBOUNDED_N, 4, 0, &CostMeter::new());
    let window_len = 5 * 60;
    let mut window = DeltaWindow::new(window_len, 0);
    let meter = CostMeter::new();
    let (mut flushes, mut checks, mut failures) = (0u64, 0u64, 0u64);

    let mut check = |index: &TargetingIndex, cache: &TopNCache, at| {
        for u in cache.users() {
            let served = fetch(u, cache, index, at).served;
            let oracle = match_optimal(index, &scorer, u, UNBOUNDED_N, at, &meter);
            checks += 1;
            if !same_list(&served, &oracle) {
                failures += 1;
            }
        }
    };

    for e in &stream {
        while window.is_due(e.at) {
            let at = window.closes_at();
            window.flush(&mut cache, &index, &scorer, at, &meter);
            flushes += 1;
            check(&index, &cache, at);
        }
        let applied = index.apply(e).expect("generated events apply");
        window.ingest(&applied, &index, &cache);
    }
    let at = window.closes_at();
    window.flush(&mut cache, &index, &scorer, at, &meter);
    flushes += 1;
    check(&index, &cache, at);
    (
        failures == 0,
        format!("(a) {} events, {flushes} flushes, {failures}/{checks} user checks differ", stream.len()),
    )
}

/// Regime (b): zero-length window, events that can only raise scores, cache
/// top-n compared with the oracle after every event.
fn delta_exact_increasing() -> (bool, String) {
    let (spec, w) = delta_world();
    let scorer = Scorer::new(11);
    let n = 50;
    let mut index = replay(w.events.iter().filter(|e| e.event.at == 0).map(|e| e.event.clone()));
    let users: BTreeSet<UserId> = index.users().collect();
    let mut cache = fully_update(&index, &scorer, &users, n, 4, 0, &CostMeter::new());
    let meter = CostMeter::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut next_campaign = 1_000_000u64;
    let (mut events, mut checks, mut failures) = (0u64, 0u64, 0u64);

    for step in 1..=150u64 {
        let roll: f64 = rng.random();
        let body = if roll < 0.5 {
            let serving: Vec<&Campaign> = index.campaigns().filter(|c| c.is_serving()).collect();
            let c = serving.choose(&mut rng).expect("world has serving campaigns");
            let t = c.targetings.choose(&mut rng).expect("campaigns target something");
            EventBody::BidChanged {
                campaign: c.id,
                crowd: t.crowd,
                bid: t.bid * rng.random_range(1.05..2.0),
            }
        } else if roll < 0.75 {
            let id = next_campaign;
            next_campaign += 1;
            let crowds: BTreeSet<u64> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..spec.crowds)).collect();
            EventBody::CampaignUpserted {
                campaign: Campaign {
                    id: CampaignId(id),
                    ad: AdId(id),
                    status: CampaignStatus::Active,
                    budget_remaining: 100.0,
                    targetings: crowds
                        .into_iter()
                        .map(|c| Targeting {
                            crowd: CrowdId(c),
                            kind: spec.crowd_kind(CrowdId(c)),
                            bid: rng.random_range(0.5..8.0),
                        })
                        .collect(),
                },
            }
        } else {
            let crowd = CrowdId(rng.random_range(0..spec.crowds));
            EventBody::UserCrowdsChanged {
                user: UserId(rng.random_range(0..spec.users)),
                added: vec![Membership {
                    crowd,
                    kind: spec.crowd_kind(crowd),
                }],
                removed: vec![],
            }
        };
        let at = step * 60;
        let applied = index.apply(&MutationEvent { at, body }).expect("constructed events apply");
        let mut window = DeltaWindow::new(0, at);
        window.ingest(&applied, &index, &cache);
        window.flush(&mut cache, &index, &scorer, at, &meter);
        events += 1;
        for u in cache.users() {
            checks += 1;
            let cached = cache.list(u).expect("listed user is cached");
            if !same_list(&cached, &match_optimal(&index, &scorer, u, n, at, &meter)) {
                failures += 1;
            }
        }
    }
    (
        failures == 0,
        format!("(b) {events} events, {failures}/{checks} user checks differ"),
    )
}

fn delta_exactness() -> Outcome {
    let (a_ok, a) = delta_exact_large_n();
    let (b_ok, b) = delta_exact_increasing();
    outcome(a_ok && b_ok, format!("{a}; {b}"))
}

fn adversarial_instance() -> Outcome {
    // one channel, m = 1: only the rule-preferred crowd survives, and the
    // best pair sits in another crowd
    let rules = RuleScores::new(11);
    let scorer = Scorer::new(11);
    let user = UserId(7);
    let crowds = [CrowdId(0), CrowdId(1), CrowdId(2)];
    let preferred = *crowds
        .iter()
        .max_by(|a, b| rules.crowd_score(user, **a).total_cmp(&rules.crowd_score(user, **b)).then(b.cmp(a)))
        .expect("non-empty");
    let hidden = *crowds.iter().find(|&&c| c != preferred).expect("three crowds");

    let mut index = TargetingIndex::new();
    let mut events = vec![MutationEvent {
        at: 0,
        body: EventBody::UserCrowdsChanged {
            user,
            added: crowds
                .iter()
                .map(|&c| Membership {
                    crowd: c,
                    kind: TargetingType::Keywords,
                })
                .collect(),
            removed: vec![],
        },
    }];
    for (i, &crowd) in crowds.iter().enumerate() {
        let bid = if crowd == hidden { 50.0 } else { 1.0 };
        events.push(MutationEvent {
            at: 0,
            body: EventBody::CampaignUpserted {
                campaign: Campaign {
                    id: CampaignId(i as u64),
                    ad: AdId(i as u64),
                    status: CampaignStatus::Active,
                    budget_remaining: 10.0,
                    targetings: vec![Targeting {
                        crowd,
                        kind: TargetingType::Keywords,
                        bid,
                    }],
                },
            },
        });
    }
    for e in &events {
        index.apply(e).expect("constructed events apply");
    }
    let n = 1;
    let config = TruncationConfig {
        m: Limit::At(1),
        k: Limit::Unbounded,
        n,
    };
    let meter = CostMeter::new();
    let f1 = TwoStageMatcher::new(scorer, rules, config).match_truncated(&index, user, 0, &meter);
    let fopt = match_optimal(&index, &scorer, user, n, 0, &meter);
    let cache = fully_update(&index, &scorer, &[user].into(), n, 1, 0, &meter);
    let cached = cache.list(user).expect("refreshed user is cached");
    let (r1, ropt, rcache) = (
        averaged_reward(&f1, n),
        averaged_reward(&fopt, n),
        averaged_reward(&cached, n),
    );
    outcome(
        r1 < ropt && rcache == ropt,
        format!("R(f1) = {r1:.3}, R(fopt) = {ropt:.3}, R(cache) = {rcache:.3}"),
    )
}

fn cost_identity(report: &SimReport) -> Outcome {
    let t = &report.cost;
    let r = t.scale("online_parallel");
    let full = t.scale("tfms_full");
    let expected = r / VISITS_PER_ACTIVE_USER;
    let rel = (full - expected).abs() / expected;
    let visits_rel = (t.avg_visits - VISITS_PER_ACTIVE_USER).abs() / VISITS_PER_ACTIVE_USER;
    outcome(
        rel < COST_IDENTITY_REL_TOL && visits_rel < COST_IDENTITY_REL_TOL && t.identity_error < 1e-9,
        format!(
            "avg_visits {:.4}, online_parallel {r:.3}, tfms_full {full:.4}, r/8.2 {expected:.4}, rel err {rel:.2e} \
             (refresh counter {:.3}, delta counter {:.3})",
            t.avg_visits,
            t.scale("tfms_full_measured"),
            t.scale("tfms_delta"),
        ),
    )
}

fn revenue_lift(report: &SimReport) -> Outcome {
    let (o, t, f) = (
        &report.matchers["oracle"],
        &report.matchers["truncated"],
        &report.matchers["tfms"],
    );
    let share = f.pairs_scored_per_request / t.pairs_scored_per_request;
    let reads = f.serving.as_ref().map_or(u64::MAX, |s| s.fetch_index_reads);
    outcome(
        o.rpm > t.rpm && f.rpm >= t.rpm && share < FETCH_WORK_SHARE && reads == 0,
        format!(
            "rpm oracle {:.2} / tfms {:.2} / truncated {:.2} (lift {:+.2}%), tfms scoring {:.1}% of truncated, fetch index reads {reads}",
            o.rpm,
            f.rpm,
            t.rpm,
            (o.rpm - t.rpm) / t.rpm * 100.0,
            share * 100.0,
        ),
    )
}

fn validity_soundness() -> Outcome {
    let spec = WorkloadSpec {
        seed: 5,
        users: 600,
        history_days: 1,
        days: 1,
        advertiser_events_per_hour: 900.0,
        ..WorkloadSpec::default()
    };
    let w = generate(&spec).expect("valid spec");
    let config = SimConfig {
        warmup_days: 1,
        tfms: tfms_core::harness::TfmsConfig {
            lookback_hours: 24,
            ..Default::default()
        },
        ..SimConfig::default()
    };
    let r = run(&w, &config).expect("valid config");
    let s = r.matchers["tfms"].serving.clone().expect("tfms selected");
    outcome(
        s.invalid_served == 0 && s.accounting_violations == 0 && s.dropped_invalid > 0,
        format!(
            "{} fetches, {} dropped invalid, {} invalid served, {} accounting violations",
            s.cache_hits, s.dropped_invalid, s.invalid_served, s.accounting_violations
        ),
    )
}

fn determinism(first: &SimReport) -> Outcome {
    // second run goes through the on-disk logs
    let spec = WorkloadSpec::default();
    let dir = tempfile::tempdir().expect("temp dir");
    generate(&spec).expect("valid spec").write(dir.path()).expect("logs written");
    let w = Workload::read(dir.path()).expect("logs read back");
    let second = run(&w, &SimConfig::default()).expect("valid config");
    let (a, b) = (first.to_json(), second.to_json());
    outcome(a == b, format!("report.json {} bytes, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "[{verdict}] {id} {name:<28} {} ({:.1}s)",
            o.detail,
            started.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed += 1;
        }
    };

    report(1, "oracle equivalence", &mut oracle_equivalence);
    report(2, "fully-update correctness", &mut fully_update_correctness);
    report(3, "delta exactness", &mut delta_exactness);
    report(4, "adversarial truncation", &mut adversarial_instance);

    let default_run = run(&generate(&WorkloadSpec::default()).expect("valid spec"), &SimConfig::default())
        .expect("valid config");
    report(5, "cost identity", &mut || cost_identity(&default_run));
    report(6, "directional revenue lift", &mut || revenue_lift(&default_run));
    report(7, "validity soundness", &mut validity_soundness);
    report(8, "determinism", &mut || determinism(&default_run));

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
