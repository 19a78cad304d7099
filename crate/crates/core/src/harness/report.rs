//! Simulation reports, their flat CSV form, and report-to-report comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cost::{CostInputs, CostTable};
use super::sim::SimConfig;
use crate::domain::{TargetingType, Timestamp};
use crate::error::{Error, IoContext, Result};
use crate::nearline::FlushStats;

/// Summary of a sample of non-negative integers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: u64,
    pub mean: f64,
    pub p50: u64,
    pub p90: u64,
    pub max: u64,
}

impl Distribution {
    /// Nearest-rank percentiles.
    pub fn from_samples(mut samples: Vec<u64>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_unstable();
        let rank = |q: f64| {
            let r = (q * samples.len() as f64).ceil() as usize;
            samples[r.clamp(1, samples.len()) - 1]
        };
        Self {
            count: samples.len() as u64,
            mean: samples.iter().sum::<u64>() as f64 / samples.len() as f64,
            p50: rank(0.5),
            p90: rank(0.9),
            max: *samples.last().expect("non-empty"),
        }
    }
}

/// Near-line serving counters, present only for the TFMS matcher.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServingReport {
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub fallback_requests: u64,
    pub cached_pairs_read: u64,
    pub dropped_invalid: u64,
    /// Served pairs that an independent check finds invalid. Must be 0.
    pub invalid_served: u64,
    /// Fetches where `served + dropped_invalid` differs from the cached length.
    pub accounting_violations: u64,
    /// Crowd or ad map reads made inside fetch. Must be 0.
    pub fetch_index_reads: u64,
    /// `n - served` per cache hit.
    pub shortfall: Distribution,
    /// Seconds since the entry was last written, per cache hit.
    pub staleness: Distribution,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatcherReport {
    pub requests: u64,
    /// Requests with a winning pair.
    pub impressions: u64,
    /// Sum of winning eCPM.
    pub revenue: f64,
    /// Mean winning eCPM per request, `revenue / requests`. Requests without
    /// a winner count as zero.
    pub rpm: f64,
    /// User-ad pairs scored online.
    pub pairs_scored: u64,
    /// User-crowd pairs examined online.
    pub user_crowd_pairs: u64,
    pub pairs_scored_per_request: f64,
    pub user_crowd_pairs_per_request: f64,
    /// Mean share of the oracle's top-n present in this matcher's top-n, over
    /// requests with a nonempty oracle list.
    pub recall_at_n: f64,
    pub truncated_user_crowd_pct: f64,
    pub truncated_crowd_ad_pct: f64,
    /// Winning impressions by the channel of the winning pair's crowd.
    pub winning_impressions: BTreeMap<String, u64>,
    /// Served pairs that were no longer in the user's candidate set.
    pub ineligible_served: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub serving: Option<ServingReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NearlineReport {
    pub fully_updates: u64,
    pub users_refreshed: u64,
    pub full_pairs_scored: u64,
    pub full_user_crowd_pairs: u64,
    pub flushes: u64,
    pub flush_users: u64,
    pub delta_pairs_scored: u64,
    pub pairs_removed: u64,
    pub evicted: u64,
    pub downward_rescores: u64,
    pub invalidations_seen: u64,
}

impl NearlineReport {
    pub(crate) fn add_flush(&mut self, s: &FlushStats) {
        self.flushes += 1;
        self.flush_users += s.users as u64;
        self.pairs_removed += s.pairs_removed as u64;
        self.evicted += s.evicted as u64;
        self.downward_rescores += s.downward_rescores as u64;
        self.invalidations_seen += s.invalidations_seen as u64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// Checksum of the replayed logs.
    pub workload_checksum: String,
    pub config: SimConfig,
    pub measured_from: Timestamp,
    pub measured_until: Timestamp,
    pub rejected_events: u64,
    pub matchers: BTreeMap<String, MatcherReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nearline: Option<NearlineReport>,
    pub cost_inputs: CostInputs,
    pub cost: CostTable,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).io_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text)
    }

    /// The same report restricted to one matcher.
    pub fn only(&self, matcher: &str) -> Option<SimReport> {
        let m = self.matchers.get(matcher)?.clone();
        Some(SimReport {
            matchers: BTreeMap::from([(matcher.to_owned(), m)]),
            ..self.clone()
        })
    }

    /// One `matcher,metric,value` row per scalar metric, plus cost rows under
    /// the matcher name `cost`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("matcher,metric,value\n");
        for (name, m) in &self.matchers {
            for (metric, value) in m.metrics() {
                let _ = writeln!(out, "{name},{metric},{value}");
            }
        }
        for row in &self.cost.rows {
            let _ = writeln!(out, "cost,{}_pairs,{}", row.name, row.pairs);
            let _ = writeln!(out, "cost,{}_relative_scale,{}", row.name, row.relative_scale);
        }
        let _ = writeln!(out, "cost,avg_visits,{}", self.cost.avg_visits);
        out
    }
}

impl MatcherReport {
    /// Flattened scalar metrics in a fixed order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = vec![
            ("requests".into(), self.requests as f64),
            ("impressions".into(), self.impressions as f64),
            ("revenue".into(), self.revenue),
            ("rpm".into(), self.rpm),
            ("pairs_scored".into(), self.pairs_scored as f64),
            ("user_crowd_pairs".into(), self.user_crowd_pairs as f64),
            ("pairs_scored_per_request".into(), self.pairs_scored_per_request),
            ("user_crowd_pairs_per_request".into(), self.user_crowd_pairs_per_request),
            ("recall_at_n".into(), self.recall_at_n),
            ("truncated_user_crowd_pct".into(), self.truncated_user_crowd_pct),
            ("truncated_crowd_ad_pct".into(), self.truncated_crowd_ad_pct),
            ("ineligible_served".into(), self.ineligible_served as f64),
        ];
        for kind in TargetingType::ALL {
            let n = self.winning_impressions.get(kind.as_str()).copied().unwrap_or(0);
            v.push((format!("winning_impressions_{}", kind.as_str()), n as f64));
        }
        if let Some(s) = &self.serving {
            v.extend([
                ("cache_hits".into(), s.cache_hits as f64),
                ("cache_misses".into(), s.cache_misses as f64),
                ("fallback_requests".into(), s.fallback_requests as f64),
                ("dropped_invalid".into(), s.dropped_invalid as f64),
                ("invalid_served".into(), s.invalid_served as f64),
                ("fetch_index_reads".into(), s.fetch_index_reads as f64),
                ("shortfall_mean".into(), s.shortfall.mean),
                ("shortfall_p90".into(), s.shortfall.p90 as f64),
                ("staleness_mean".into(), s.staleness.mean),
                ("staleness_p90".into(), s.staleness.p90 as f64),
                ("staleness_max".into(), s.staleness.max as f64),
            ]);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `(a - b) / b` in percent; `None` when `b` is 0 and `a` is not.
    pub delta_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub rows: Vec<DeltaRow>,
}

impl Comparison {
    pub fn row(&self, metric: &str) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<36} {:>16} {:>16} {:>10}\n", "metric", self.a, self.b, "delta");
        for r in &self.rows {
            let delta = r.delta_pct.map_or("n/a".to_owned(), |d| format!("{d:+.2}%"));
            let _ = writeln!(out, "{:<36} {:>16.4} {:>16.4} {:>10}", r.metric, r.a, r.b, delta);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,metric,a_value,b_value,delta_pct\n");
        for r in &self.rows {
            let delta = r.delta_pct.map_or(String::new(), |d| d.to_string());
            let _ = writeln!(out, "{},{},{},{},{},{}", self.a, self.b, r.metric, r.a, r.b, delta);
        }
        out
    }
}

fn pct(a: f64, b: f64) -> Option<f64> {
    if b == 0.0 {
        (a == 0.0).then_some(0.0)
    } else {
        Some((a - b) / b * 100.0)
    }
}

fn pick<'r>(report: &'r SimReport, matcher: Option<&str>, side: &str) -> Result<(&'r str, &'r MatcherReport)> {
    match matcher {
        Some(name) => report
            .matchers
            .get_key_value(name)
            .map(|(k, v)| (k.as_str(), v))
            .ok_or_else(|| Error::InvalidConfig(format!("report {side} has no matcher {name:?}"))),
        None if report.matchers.len() == 1 => {
            let (k, v) = report.matchers.iter().next().expect("one matcher");
            Ok((k.as_str(), v))
        }
        None => Err(Error::InvalidConfig(format!(
            "report {side} holds {} matchers; name one",
            report.matchers.len()
        ))),
    }
}

/// Relative deltas of `a` over `b`. Both reports must come from the same
/// workload. A report holding several matchers needs an explicit name.
pub fn compare(
    a: &SimReport,
    b: &SimReport,
    a_matcher: Option<&str>,
    b_matcher: Option<&str>,
) -> Result<Comparison> {
    if a.workload_checksum != b.workload_checksum {
        return Err(Error::WorkloadMismatch {
            left: a.workload_checksum.clone(),
            right: b.workload_checksum.clone(),
        });
    }
    let (an, am) = pick(a, a_matcher, "A")?;
    let (bn, bm) = pick(b, b_matcher, "B")?;
    let mut metrics: Vec<(&str, f64, f64)> = vec![
        ("rpm", am.rpm, bm.rpm),
        ("pairs_scored_per_request", am.pairs_scored_per_request, bm.pairs_scored_per_request),
        ("user_crowd_pairs_per_request", am.user_crowd_pairs_per_request, bm.user_crowd_pairs_per_request),
        ("recall_at_n", am.recall_at_n, bm.recall_at_n),
    ];
    let names: Vec<String> = TargetingType::ALL
        .iter()
        .map(|k| format!("winning_impressions_{}", k.as_str()))
        .collect();
    for (kind, name) in TargetingType::ALL.iter().zip(&names) {
        let get = |m: &MatcherReport| m.winning_impressions.get(kind.as_str()).copied().unwrap_or(0) as f64;
        metrics.push((name, get(am), get(bm)));
    }
    Ok(Comparison {
        a: an.to_owned(),
        b: bn.to_owned(),
        rows: metrics
            .into_iter()
            .map(|(metric, a, b)| DeltaRow {
                metric: metric.to_owned(),
                a,
                b,
                delta_pct: pct(a, b),
            })
            .collect(),
    })
}
