//! Python bindings.
//!
//! Events, workload specs, sim configs and reports cross the boundary as
//! JSON or TOML text, matching the files the CLI reads and writes. Lists of
//! candidates come back as tuples.
//!
//! ```python
//! import tfms
//! w = tfms.generate('users = 200\ncrowds = 50\ncampaigns = 300\nhistory_days = 1')
//! report = json.loads(tfms.run(w, 'warmup_days = 1'))
//! ```

use std::collections::BTreeSet;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use tfms_core::baseline::{self, CostMeter, Limit, RuleScores, TruncationConfig, TwoStageMatcher};
use tfms_core::domain::{AdCrowdPair, AdId, CrowdId, UserId, ValuedPair};
use tfms_core::harness::{self, SimConfig, SimReport, WorkloadSpec};
use tfms_core::index::MutationEvent;
use tfms_core::{nearline, serving, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type Row = (u64, u64, f64);
type DeltaRow = (String, f64, f64, Option<f64>);

fn rows(list: &[ValuedPair]) -> Vec<Row> {
    list.iter().map(|v| (v.pair.ad.0, v.pair.crowd.0, v.score)).collect()
}

fn limit(v: Option<usize>) -> Limit {
    v.map_or(Limit::Unbounded, Limit::At)
}

/// Value measure: `ecpm = pctr * bid * 1000` with a seeded synthetic pCTR.
#[pyclass(name = "Scorer", from_py_object)]
#[derive(Clone, Copy)]
struct PyScorer(tfms_core::domain::Scorer);

#[pymethods]
impl PyScorer {
    #[new]
    #[pyo3(signature = (seed=11))]
    fn new(seed: u64) -> Self {
        Self(tfms_core::domain::Scorer::new(seed))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn pctr(&self, user: u64, ad: u64) -> f64 {
        self.0.pctr(UserId(user), AdId(ad))
    }

    fn value(&self, user: u64, ad: u64, crowd: u64, bid: f64) -> f64 {
        self.0.value_measure(UserId(user), AdCrowdPair::new(AdId(ad), CrowdId(crowd)), bid)
    }
}

/// The targeting index. Mutations are JSON events in the log format
/// (`{"at": .., "kind": .., "payload": ..}`).
#[pyclass(name = "TargetingIndex")]
struct PyIndex(tfms_core::index::TargetingIndex);

#[pymethods]
impl PyIndex {
    #[new]
    fn new() -> Self {
        Self(Default::default())
    }

    /// Applies one event. Returns the number of `(ad, crowd)` pairs it touched.
    fn apply(&mut self, event_json: &str) -> PyResult<usize> {
        let event: MutationEvent = serde_json::from_str(event_json).map_err(|e| to_py(e.into()))?;
        self.0.apply(&event).map(|a| a.pairs.len()).map_err(to_py)
    }

    /// Applies every line of a JSONL event log; returns the count applied.
    fn apply_jsonl(&mut self, text: &str) -> PyResult<usize> {
        let mut n = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            self.apply(line)?;
            n += 1;
        }
        Ok(n)
    }

    #[getter]
    fn version(&self) -> u64 {
        self.0.version()
    }

    fn crowds_of(&self, user: u64) -> Vec<(u64, &'static str)> {
        self.0
            .crowds_of(UserId(user))
            .into_iter()
            .map(|(c, k)| (c.0, k.as_str()))
            .collect()
    }

    fn ads_of(&self, crowd: u64) -> Vec<(u64, f64)> {
        self.0.ads_of(CrowdId(crowd)).into_iter().map(|(a, b)| (a.0, b)).collect()
    }

    fn users_of(&self, crowd: u64) -> Vec<u64> {
        self.0.users_of(CrowdId(crowd)).into_iter().map(|u| u.0).collect()
    }

    /// `O(u)` as `(ad, crowd, bid)`.
    fn candidates(&self, user: u64) -> Vec<Row> {
        self.0
            .candidates(UserId(user))
            .into_iter()
            .map(|(p, bid)| (p.ad.0, p.crowd.0, bid))
            .collect()
    }

    fn users(&self) -> Vec<u64> {
        self.0.users().map(|u| u.0).collect()
    }

    fn check_consistency(&self) -> PyResult<()> {
        self.0.check_consistency().map_err(PyValueError::new_err)
    }

    fn snapshot(&self, path: &str) -> PyResult<()> {
        self.0.snapshot(path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        tfms_core::index::TargetingIndex::load(path).map(Self).map_err(to_py)
    }
}

/// Exhaustive top-`n` over `O(u)` as `(ad, crowd, score)`.
#[pyfunction]
#[pyo3(signature = (index, scorer, user, n, at=0))]
fn match_optimal(index: &PyIndex, scorer: &PyScorer, user: u64, n: usize, at: u64) -> Vec<Row> {
    rows(&baseline::match_optimal(&index.0, &scorer.0, UserId(user), n, at, &CostMeter::new()))
}

/// Two-stage truncated matching. `m` and `k` of `None` disable that cut.
#[pyfunction]
#[pyo3(signature = (index, scorer, user, m, k, n, at=0, rule_seed=None))]
#[allow(clippy::too_many_arguments)]
fn match_truncated(
    index: &PyIndex,
    scorer: &PyScorer,
    user: u64,
    m: Option<usize>,
    k: Option<usize>,
    n: usize,
    at: u64,
    rule_seed: Option<u64>,
) -> PyResult<Vec<Row>> {
    let config = TruncationConfig {
        m: limit(m),
        k: limit(k),
        n,
    };
    config.validate().map_err(to_py)?;
    let matcher = TwoStageMatcher::new(scorer.0, RuleScores::new(rule_seed.unwrap_or(scorer.0.seed)), config);
    Ok(rows(&matcher.match_truncated(&index.0, UserId(user), at, &CostMeter::new())))
}

/// Per-user precomputed top-`n` lists.
#[pyclass(name = "TopNCache")]
struct PyCache(nearline::TopNCache);

#[pymethods]
impl PyCache {
    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __contains__(&self, user: u64) -> bool {
        self.0.contains(UserId(user))
    }

    fn users(&self) -> Vec<u64> {
        self.0.users().map(|u| u.0).collect()
    }

    fn list(&self, user: u64) -> Option<Vec<Row>> {
        self.0.list(UserId(user)).map(|l| rows(&l))
    }

    fn snapshot(&self, path: &str) -> PyResult<()> {
        self.0.snapshot(path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        nearline::TopNCache::load(path).map(Self).map_err(to_py)
    }
}

/// Rebuilds the cache for `users` from the untruncated candidate sets.
#[pyfunction]
#[pyo3(signature = (index, scorer, users, n, parallelism=1, at=0))]
fn fully_update(
    py: Python<'_>,
    index: &PyIndex,
    scorer: &PyScorer,
    users: Vec<u64>,
    n: usize,
    parallelism: usize,
    at: u64,
) -> PyCache {
    let users: BTreeSet<UserId> = users.into_iter().map(UserId).collect();
    let (idx, sc) = (&index.0, scorer.0);
    PyCache(py.detach(|| nearline::fully_update(idx, &sc, &users, n, parallelism, at, &CostMeter::new())))
}

#[pyclass(name = "FetchResult", get_all)]
struct PyFetch {
    served: Vec<Row>,
    dropped_invalid: usize,
    cache_miss: bool,
    staleness: u64,
}

#[pymethods]
impl PyFetch {
    fn __repr__(&self) -> String {
        format!(
            "FetchResult(served={}, dropped_invalid={}, cache_miss={}, staleness={})",
            self.served.len(),
            self.dropped_invalid,
            self.cache_miss,
            self.staleness
        )
    }
}

/// Online read of a cached list with validity filtering.
#[pyfunction]
fn fetch(user: u64, cache: &PyCache, index: &PyIndex, at: u64) -> PyFetch {
    let r = serving::fetch(UserId(user), &cache.0, &index.0, at);
    PyFetch {
        served: rows(&r.served),
        dropped_invalid: r.dropped_invalid,
        cache_miss: r.cache_miss,
        staleness: r.staleness,
    }
}

/// Generated event and traffic logs.
#[pyclass(name = "Workload")]
struct PyWorkload(harness::Workload);

#[pymethods]
impl PyWorkload {
    #[getter]
    fn checksum(&self) -> String {
        self.0.checksum()
    }

    #[getter]
    fn num_events(&self) -> usize {
        self.0.events.len()
    }

    #[getter]
    fn num_visits(&self) -> usize {
        self.0.traffic.len()
    }

    fn events_jsonl(&self) -> String {
        self.0.events_jsonl()
    }

    fn traffic_jsonl(&self) -> String {
        self.0.traffic_jsonl()
    }

    /// `(at, user)` per visit.
    fn visits(&self) -> Vec<(u64, u64)> {
        self.0.visits().into_iter().map(|v| (v.at, v.user.0)).collect()
    }

    fn write(&self, dir: &str) -> PyResult<()> {
        self.0.write(dir).map_err(to_py)
    }

    #[staticmethod]
    fn read(dir: &str) -> PyResult<Self> {
        harness::Workload::read(dir).map(Self).map_err(to_py)
    }
}

/// Generates a workload from a TOML spec; omitted keys take defaults.
#[pyfunction]
#[pyo3(signature = (spec_toml=""))]
fn generate(py: Python<'_>, spec_toml: &str) -> PyResult<PyWorkload> {
    let spec = WorkloadSpec::from_toml(spec_toml).map_err(to_py)?;
    py.detach(|| harness::generate(&spec)).map(PyWorkload).map_err(to_py)
}

/// Replays a workload and returns the report as JSON. `config_toml` holds
/// sim settings (`seed`, `warmup_days`, `matchers`, `[truncation]`, `[tfms]`).
#[pyfunction]
#[pyo3(signature = (workload, config_toml=""))]
fn run(py: Python<'_>, workload: &PyWorkload, config_toml: &str) -> PyResult<String> {
    let config = SimConfig::from_toml(config_toml).map_err(to_py)?;
    let w = &workload.0;
    py.detach(|| harness::run(w, &config)).map(|r| r.to_json()).map_err(to_py)
}

/// Relative deltas of report A over report B as `(metric, a, b, delta_pct)`.
#[pyfunction]
#[pyo3(signature = (report_a, report_b, a_matcher=None, b_matcher=None))]
fn compare(
    report_a: &str,
    report_b: &str,
    a_matcher: Option<&str>,
    b_matcher: Option<&str>,
) -> PyResult<Vec<DeltaRow>> {
    let a = SimReport::from_json(report_a).map_err(to_py)?;
    let b = SimReport::from_json(report_b).map_err(to_py)?;
    let c = harness::compare(&a, &b, a_matcher, b_matcher).map_err(to_py)?;
    Ok(c.rows.into_iter().map(|r| (r.metric, r.a, r.b, r.delta_pct)).collect())
}

#[pymodule]
fn tfms(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScorer>()?;
    m.add_class::<PyIndex>()?;
    m.add_class::<PyCache>()?;
    m.add_class::<PyFetch>()?;
    m.add_class::<PyWorkload>()?;
    m.add_function(wrap_pyfunction!(match_optimal, m)?)?;
    m.add_function(wrap_pyfunction!(match_truncated, m)?)?;
    m.add_function(wrap_pyfunction!(fully_update, m)?)?;
    m.add_function(wrap_pyfunction!(fetch, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
