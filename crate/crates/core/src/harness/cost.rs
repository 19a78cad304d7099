//! Pair-count cost accounting.
//!
//! Costs are counted in user-ad pairs scored. The online truncated matcher
//! scores `|O1(u)|` pairs per request and an untruncated online matcher would
//! score `|O(u)|`. A daily full refresh scores `|O(u)|` once per active user
//! instead of once per visit, so its cost is the online-parallel cost divided
//! by the mean visits per active user.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    /// Measured requests.
    pub requests: u64,
    /// Distinct (day, user) pairs among measured requests.
    pub active_user_days: u64,
    /// `sum |O1(u)|` over requests.
    pub truncated_pairs: u64,
    /// `sum |O(u)|` over requests.
    pub untruncated_pairs: u64,
    /// Pairs scored by the daily refreshes.
    pub full_update_pairs: u64,
    /// Pairs scored by delta flushes.
    pub delta_pairs: u64,
}

impl CostInputs {
    pub fn avg_visits(&self) -> f64 {
        ratio(self.requests as f64, self.active_user_days as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub pairs: f64,
    /// Relative to `base`.
    pub relative_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub avg_visits: f64,
    pub rows: Vec<CostRow>,
    /// `tfms_full / online_parallel`.
    pub full_to_parallel: f64,
    /// `|full_to_parallel * avg_visits - 1|`.
    pub identity_error: f64,
}

impl CostTable {
    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn scale(&self, name: &str) -> f64 {
        self.row(name).map_or(0.0, |r| r.relative_scale)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Builds the relative-scale table.
///
/// Rows: `base` (truncated online), `online_parallel` (untruncated online),
/// `tfms_full` (`mean|O(u)|` per active user, derived from the per-request
/// mean and `avg_visits`), `tfms_full_measured` (the refresh counter) and
/// `tfms_delta` (the flush counter).
pub fn cost_model(inputs: &CostInputs, avg_visits: f64) -> CostTable {
    let requests = inputs.requests as f64;
    let mean_o1 = ratio(inputs.truncated_pairs as f64, requests);
    let mean_o = ratio(inputs.untruncated_pairs as f64, requests);
    let base = mean_o1 * requests;
    let online_parallel = mean_o * requests;
    let tfms_full = ratio(online_parallel, avg_visits);

    let row = |name: &str, pairs: f64| CostRow {
        name: name.to_owned(),
        pairs,
        relative_scale: ratio(pairs, base),
    };
    let rows = vec![
        row("base", base),
        row("online_parallel", online_parallel),
        row("tfms_full", tfms_full),
        row("tfms_full_measured", inputs.full_update_pairs as f64),
        row("tfms_delta", inputs.delta_pairs as f64),
    ];
    let full_to_parallel = ratio(tfms_full, online_parallel);
    let identity_error = if online_parallel == 0.0 {
        0.0
    } else {
        (full_to_parallel * avg_visits - 1.0).abs()
    };
    CostTable {
        avg_visits,
        rows,
        full_to_parallel,
        identity_error,
    }
}
