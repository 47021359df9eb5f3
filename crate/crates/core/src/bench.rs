//! Evaluation harness: fixed test sets, greedy and sampling decoders, exact
//! references, gaps, and CSV/markdown reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{exact_dp, DP_DEFAULT_CAP};
use crate::env::{validate_tour, Tour};
use crate::error::{Error, Result};
use crate::instances::{generate_set, read_dataset, write_dataset, Distribution, PdpInstance};
use crate::numcore::Scalar;
use crate::policy::{best_tour, Ablation, Policy};
use crate::rng::{domain, stream};

/// Rollouts decoded together when sampling. Chunks always hold this many
/// rows so that sample `k` does not depend on how many samples were asked
/// for.
pub const SAMPLE_CHUNK: usize = 128;

/// Default root seed of test sets.
pub const DEFAULT_TEST_SEED: u64 = 1234;

/// Percentage excess of `obj` over `reference`, rounded to two decimals.
pub fn gap(obj: f64, reference: f64) -> Result<f64> {
    if !reference.is_finite() || reference <= 0.0 {
        return Err(Error::InvalidReference(reference));
    }
    Ok(((obj - reference) / reference * 100.0 * 100.0).round() / 100.0)
}

/// A frozen evaluation set, regenerated bit-identically from `(n,
/// distribution, seed)` on a seed stream disjoint from training.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub n: usize,
    pub distribution: Distribution,
    pub instances: Vec<PdpInstance>,
}

impl TestSet {
    pub fn generate(n: usize, distribution: Distribution, count: usize, seed: u64) -> Result<Self> {
        let instances = generate_set(n, distribution, count, seed, domain::TEST_INSTANCE)?;
        Ok(Self {
            n,
            distribution,
            instances,
        })
    }

    pub fn from_instances(instances: Vec<PdpInstance>) -> Result<Self> {
        let first = instances.first().ok_or_else(|| Error::InvalidSize("empty test set".into()))?;
        let (n, distribution) = (first.n(), first.distribution());
        if instances.iter().any(|i| i.n() != n) {
            return Err(Error::InvalidSize("test set mixes instance sizes".into()));
        }
        Ok(Self {
            n,
            distribution,
            instances,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_instances(read_dataset(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_dataset(path, &self.instances)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Decoding protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Decode {
    /// Greedy from every pickup, best tour kept.
    Greedy,
    /// Greedy from pickup 1 only.
    GreedySingle,
    /// Best of `k` sampled rollouts.
    Sample(usize),
    /// Exact dynamic programme.
    Exact,
}

impl fmt::Display for Decode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decode::Greedy => f.write_str("greedy"),
            Decode::GreedySingle => f.write_str("greedy1"),
            Decode::Sample(k) => write!(f, "sample{k}"),
            Decode::Exact => f.write_str("exact"),
        }
    }
}

impl FromStr for Decode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Decode::Greedy),
            "greedy1" => Ok(Decode::GreedySingle),
            "exact" => Ok(Decode::Exact),
            _ => s
                .strip_prefix("sample")
                .map(|k| k.trim_start_matches(':'))
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k > 0)
                .map(Decode::Sample)
                .ok_or_else(|| Error::Config(format!("unknown decode {s:?}; use greedy, greedy1 or sampleK"))),
        }
    }
}

/// One evaluated instance, as written to result files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub n: usize,
    pub dist: Distribution,
    pub decode: String,
    pub instance_id: usize,
    pub obj: f64,
    pub time_ms: f64,
    pub gap_pct: Option<f64>,
}

/// Results of one method/decode pair on one test set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<ResultRow>,
    pub tours: Vec<Tour>,
}

impl EvalReport {
    pub fn mean_obj(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.obj))
    }

    /// Mean decode time per instance, in seconds.
    pub fn mean_time_s(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.time_ms)) / 1e3
    }

    pub fn mean_gap(&self) -> Option<f64> {
        let gaps: Option<Vec<f64>> = self.rows.iter().map(|r| r.gap_pct).collect();
        gaps.map(|g| mean(g.into_iter()))
    }

    /// Fills `gap_pct` against per-instance reference objectives.
    pub fn set_reference(&mut self, reference: &[f64]) -> Result<()> {
        if reference.len() != self.rows.len() {
            return Err(Error::Shape(format!("{} references for {} rows", reference.len(), self.rows.len())));
        }
        for (row, &r) in self.rows.iter_mut().zip(reference) {
            row.gap_pct = Some(gap(row.obj, r)?);
        }
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

fn report_from(method: &str, set: &TestSet, decode: Decode, results: Vec<(Tour, f64)>) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(results.len());
    let mut tours = Vec::with_capacity(results.len());
    for (id, ((tour, ms), inst)) in results.into_iter().zip(&set.instances).enumerate() {
        if let Err(v) = validate_tour(inst, &tour.order) {
            return Err(Error::InvalidTour(format!("instance {id}: {v}")));
        }
        rows.push(ResultRow {
            method: method.to_string(),
            n: set.n,
            dist: set.distribution,
            decode: decode.to_string(),
            instance_id: id,
            obj: tour.length,
            time_ms: ms,
            gap_pct: None,
        });
        tours.push(tour);
    }
    Ok(EvalReport { rows, tours })
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64() * 1e3))
}

/// Greedy decoding of every instance; `multistart` keeps the best tour over
/// all pickup starts, otherwise only pickup 1 is used.
pub fn eval_greedy<T: Scalar>(policy: &Policy<T>, set: &TestSet, method: &str, multistart: bool) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(set.len());
    for inst in &set.instances {
        let one = std::slice::from_ref(inst);
        let (mut tours, ms) = timed(|| {
            if multistart {
                policy.greedy_multistart(one)
            } else {
                policy.greedy_single_start(one)
            }
        })?;
        results.push((tours.remove(0), ms));
    }
    let decode = if multistart { Decode::Greedy } else { Decode::GreedySingle };
    report_from(method, set, decode, results)
}

/// Lengths of the first `k` samples of one instance, in stream order.
/// Sample `j` starts at pickup `1 + j mod n` and draws from its own
/// generator keyed by `(seed, instance_id, j)`, so longer runs extend
/// shorter ones exactly.
pub fn sample_tours<T: Scalar>(
    policy: &Policy<T>,
    inst: &PdpInstance,
    instance_id: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Tour>> {
    let n = inst.n();
    let mut tours = Vec::with_capacity(k);
    let mut chunk_start = 0;
    while chunk_start < k {
        let ids: Vec<usize> = (chunk_start..chunk_start + SAMPLE_CHUNK).collect();
        let starts: Vec<usize> = ids.iter().map(|j| 1 + j % n).collect();
        let mut rngs: Vec<_> = ids
            .iter()
            .map(|&j| stream(seed, &[domain::EVAL_SAMPLE, instance_id as u64, j as u64]))
            .collect();
        let out = policy.sample(inst, &starts, &mut rngs)?;
        let take = (k - chunk_start).min(SAMPLE_CHUNK);
        tours.extend(out.into_iter().take(take).map(|(t, _)| t));
        chunk_start += SAMPLE_CHUNK;
    }
    Ok(tours)
}

/// Best of `k` sampled rollouts per instance.
pub fn eval_sampling<T: Scalar>(policy: &Policy<T>, set: &TestSet, method: &str, k: usize, seed: u64) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut results = Vec::with_capacity(set.len());
    for (id, inst) in set.instances.iter().enumerate() {
        let (tours, ms) = timed(|| sample_tours(policy, inst, id, k, seed))?;
        results.push((best_tour(tours), ms));
    }
    report_from(method, set, Decode::Sample(k), results)
}

/// Exact optima for every instance (requires `2n <= DP_DEFAULT_CAP`).
pub fn eval_oracle(set: &TestSet) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(set.len());
    for inst in &set.instances {
        let (res, ms) = timed(|| exact_dp(inst))?;
        results.push((res.tour(), ms));
    }
    let mut report = report_from("exact_dp", set, Decode::Exact, results)?;
    let objs: Vec<f64> = report.rows.iter().map(|r| r.obj).collect();
    report.set_reference(&objs)?;
    Ok(report)
}

pub fn oracle_available(n: usize) -> bool {
    2 * n <= DP_DEFAULT_CAP
}

pub fn evaluate<T: Scalar>(policy: &Policy<T>, set: &TestSet, method: &str, decode: Decode, seed: u64) -> Result<EvalReport> {
    match decode {
        Decode::Greedy => eval_greedy(policy, set, method, true),
        Decode::GreedySingle => eval_greedy(policy, set, method, false),
        Decode::Sample(k) => eval_sampling(policy, set, method, k, seed),
        Decode::Exact => eval_oracle(set),
    }
}

// ---------------------------------------------------------------------------
// Result files

pub fn write_rows(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Per `(method, n, dist, decode)` means of objective, gap and time.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub n: usize,
    pub dist: Distribution,
    pub decode: String,
    pub instances: usize,
    pub obj: f64,
    pub gap_pct: Option<f64>,
    pub time_s: f64,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, String, String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.n, r.dist.to_string(), r.method.clone(), r.decode.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let gaps: Option<Vec<f64>> = g.iter().map(|r| r.gap_pct).collect();
            SummaryRow {
                method: g[0].method.clone(),
                n: g[0].n,
                dist: g[0].dist,
                decode: g[0].decode.clone(),
                instances: g.len(),
                obj: mean(g.iter().map(|r| r.obj)),
                gap_pct: gaps.map(|v| mean(v.into_iter())),
                time_s: mean(g.iter().map(|r| r.time_ms)) / 1e3,
            }
        })
        .collect()
}

/// Human-readable table of [`summarize`] output.
pub fn markdown_table(rows: &[ResultRow]) -> String {
    let mut out = String::from("| method | n | dist | decode | instances | obj | gap (%) | time (s) |\n");
    out.push_str("|---|---:|---|---|---:|---:|---:|---:|\n");
    for s in summarize(rows) {
        let gap = s.gap_pct.map_or_else(|| "-".to_string(), |g| format!("{g:.2}"));
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.4} | {} | {:.4} |\n",
            s.method, s.n, s.dist, s.decode, s.instances, s.obj, gap, s.time_s
        ));
    }
    out
}

/// Fills missing gaps against the best objective any row reached on the
/// same instance (used where no exact reference exists).
pub fn fill_best_known_gaps(rows: &mut [ResultRow]) -> Result<()> {
    let mut best: BTreeMap<(usize, String, usize), f64> = BTreeMap::new();
    for r in rows.iter() {
        let e = best.entry((r.n, r.dist.to_string(), r.instance_id)).or_insert(f64::INFINITY);
        *e = e.min(r.obj);
    }
    for r in rows.iter_mut().filter(|r| r.gap_pct.is_none()) {
        r.gap_pct = Some(gap(r.obj, best[&(r.n, r.dist.to_string(), r.instance_id)])?);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation grids

/// One checkpoint evaluated on one test configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixCell {
    pub method: String,
    pub checkpoint: PathBuf,
    /// Test size; may differ from the training size.
    pub n: usize,
    pub distribution: Distribution,
    /// Decodes such as `greedy`, `greedy1`, `sample1280`.
    pub decodes: Vec<String>,
    /// Overrides the ablation switches stored in the checkpoint.
    #[serde(default)]
    pub ablation: Option<Ablation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Add exact references where the oracle is tractable.
    #[serde(default = "default_true")]
    pub oracle: bool,
    pub cells: Vec<MatrixCell>,
}

fn default_count() -> usize {
    100
}

fn default_seed() -> u64 {
    DEFAULT_TEST_SEED
}

fn default_true() -> bool {
    true
}

impl MatrixSpec {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MatrixReport {
    pub rows: Vec<ResultRow>,
    /// `(method, reason)` of cells that could not run.
    pub skipped: Vec<(String, String)>,
}

impl MatrixReport {
    pub fn markdown(&self) -> String {
        let mut out = markdown_table(&self.rows);
        for (method, reason) in &self.skipped {
            out.push_str(&format!("\nskipped {method}: {reason}"));
        }
        out
    }
}

/// Evaluates every cell. Cells whose checkpoint cannot be loaded are
/// reported as skipped rather than aborting the run.
pub fn run_matrix(spec: &MatrixSpec) -> Result<MatrixReport> {
    let mut report = MatrixReport::default();
    let mut sets: BTreeMap<(usize, String), TestSet> = BTreeMap::new();
    let mut exact: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for cell in &spec.cells {
        let key = (cell.n, cell.distribution.to_string());
        if !sets.contains_key(&key) {
            let set = TestSet::generate(cell.n, cell.distribution, spec.count, spec.seed)?;
            if spec.oracle && oracle_available(cell.n) {
                let oracle = eval_oracle(&set)?;
                exact.insert(key.clone(), oracle.rows.iter().map(|r| r.obj).collect());
                report.rows.extend(oracle.rows);
            }
            sets.insert(key.clone(), set);
        }
        let policy = match Policy::load(&cell.checkpoint) {
            Ok(p) => match cell.ablation {
                Some(a) => p.with_ablation(a),
                None => p,
            },
            Err(e) => {
                report.skipped.push((cell.method.clone(), format!("{}: {e}", cell.checkpoint.display())));
                continue;
            }
        };
        for d in &cell.decodes {
            let decode: Decode = d.parse()?;
            let mut r = evaluate(&policy, &sets[&key], &cell.method, decode, spec.seed)?;
            if let Some(reference) = exact.get(&key) {
                r.set_reference(reference)?;
            }
            report.rows.extend(r.rows);
        }
    }
    fill_best_known_gaps(&mut report.rows)?;
    Ok(report)
}
