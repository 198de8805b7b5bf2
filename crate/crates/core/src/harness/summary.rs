//! Per-seed statistics, cross-seed aggregates and ordering verdicts, all
//! computed from emitted tables so a summary can be rebuilt from CSVs alone.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::Experiment;
use super::table::{Schema, Table};
use crate::error::{LabError, Result};
use crate::linear_lab::ProbeCase;

/// Largest tolerated deviation of the closed-form consistency gradient.
pub const PROP1_TOL: f64 = 1e-10;
/// Relative gap allowed between the two sides of a one-term bound.
pub const ONE_TERM_TOL: f64 = 1e-12;
/// Half-width of the band around zero for "uncorrelated" cosine means.
pub const DIFFERENT_COS_BAND: f64 = 0.15;
pub const S_COS_BAND: f64 = 0.1;
/// Largest relative expected-gradient norm accepted at the covariance solution.
pub const COVARIANCE_RESIDUAL_TOL: f64 = 1e-2;

pub type Stats = BTreeMap<String, f64>;

/// Seeds that must agree for a verdict to pass: `ceil(0.8 n)`, i.e. 4 of 5.
/// This is the harness's own acceptance threshold.
pub fn required_seeds(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub holds_in: usize,
    pub seeds: usize,
    pub required: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: Experiment,
    /// Echo of the effective configuration (absent when rebuilt from CSVs).
    pub config: Option<serde_json::Value>,
    pub per_seed: BTreeMap<String, Stats>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub verdicts: Vec<Verdict>,
    pub verdict_rule: String,
    /// Hard-invariant breaches, seed failures and panics. Non-empty ⇒ nonzero exit.
    pub hard_failures: Vec<String>,
    pub failed_seeds: Vec<SeedFailure>,
    pub files: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunSummary {
    pub fn healthy(&self) -> bool {
        self.hard_failures.is_empty()
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn stat(&self, key: &str) -> Option<&Aggregate> {
        self.aggregates.get(key)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Statistics of one table, keys prefixed by its `variant` tag if any.
pub fn table_stats(table: &Table) -> Result<Stats> {
    let mut s = Stats::new();
    match table.schema {
        Schema::LinearTrace => {
            let step = table.numbers("step")?;
            s.insert("steps".into(), step.len() as f64);
            s.insert("max_prop1_delta".into(), max(&table.numbers("prop1_delta")?));
            let count_false = |col: &str| -> Result<f64> {
                Ok(table.numbers(col)?.iter().filter(|v| **v == 0.0).count() as f64)
            };
            s.insert("cons_violations".into(), count_false("cons_holds")?);
            s.insert("recon_violations".into(), count_false("recon_holds")?);
            // the first step's bounds each have a single term
            let gap = |l: &str, r: &str| -> Result<f64> {
                let (l, r) = (table.numbers(l)?, table.numbers(r)?);
                Ok(step
                    .iter()
                    .zip(l.iter().zip(&r))
                    .filter(|(t, _)| **t == 1.0)
                    .map(|(_, (a, b))| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
                    .fold(0.0, f64::max))
            };
            s.insert("one_term_gap".into(), gap("cons_lhs", "cons_rhs")?.max(gap("recon_lhs", "recon_rhs")?));
            s.insert("final_loss_r".into(), table.numbers("loss_r")?.last().copied().unwrap_or(f64::NAN));
        }
        Schema::Probe => {
            let cases = table.strings("case")?;
            for col in ["norm_recon", "norm_cons", "cos_prev_full_vs_cons", "cos_recon_vs_cons", "input_similarity"] {
                let vals = table.numbers(col)?;
                for case in ProbeCase::ALL {
                    let sel: Vec<f64> = vals
                        .iter()
                        .zip(&cases)
                        .filter(|(_, c)| **c == case.as_str())
                        .map(|(v, _)| *v)
                        .collect();
                    s.insert(format!("{}.{col}", case.as_str()), mean(&sel));
                }
            }
        }
        Schema::Training => {
            let burn_in: f64 = table.tags.get("burn_in").and_then(|b| b.parse().ok()).unwrap_or(0.0);
            let step = table.numbers("step")?;
            let cos = table.numbers("cos_recon_vs_cons")?;
            let kept: Vec<f64> = step.iter().zip(&cos).filter(|(t, _)| **t >= burn_in).map(|(_, c)| *c).collect();
            s.insert("mean_cos_recon_vs_cons".into(), mean(&kept));
            s.insert("steps".into(), step.len() as f64);
            let tail = (step.len() / 10).max(1);
            for col in ["loss_r", "loss_c"] {
                let v = table.numbers(col)?;
                s.insert(format!("initial_{col}"), mean(&v[..tail.min(v.len())]));
                s.insert(format!("final_{col}"), mean(&v[v.len().saturating_sub(tail)..]));
            }
        }
        Schema::Covariance => {
            let it = table.numbers("dist_iterate")?;
            let avg = table.numbers("dist_average")?;
            let norm = table.numbers("norm_s_star")?;
            s.insert("initial_distance".into(), it.first().copied().unwrap_or(f64::NAN));
            s.insert("final_distance_iterate".into(), it.last().copied().unwrap_or(f64::NAN));
            s.insert("final_distance_average".into(), avg.last().copied().unwrap_or(f64::NAN));
            let rel = avg.last().zip(norm.last()).map_or(f64::NAN, |(d, n)| d / n);
            s.insert("final_distance_average_rel".into(), rel);
        }
        Schema::CovarianceFit => {
            for col in ["samples", "residual_abs", "residual_rel", "pinv_truncated", "norm_s_star"] {
                s.insert(col.into(), table.numbers(col)?.first().copied().unwrap_or(f64::NAN));
            }
        }
    }
    Ok(match table.tags.get("variant") {
        Some(v) => s.into_iter().map(|(k, x)| (format!("{v}.{k}"), x)).collect(),
        None => s,
    })
}

fn get(stats: &Stats, key: &str) -> f64 {
    stats.get(key).copied().unwrap_or(f64::NAN)
}

type Predicate = (&'static str, fn(&Stats) -> bool);

fn probe_norm_ordering(s: &Stats) -> bool {
    get(s, "same.norm_cons") > get(s, "similar.norm_cons") && get(s, "similar.norm_cons") > get(s, "different.norm_cons")
}

fn probe_same_negative(s: &Stats) -> bool {
    get(s, "same.cos_prev_full_vs_cons") < 0.0
}

fn probe_different_near_zero(s: &Stats) -> bool {
    get(s, "different.cos_prev_full_vs_cons").abs() <= DIFFERENT_COS_BAND
}

fn predicates(experiment: Experiment) -> Vec<Predicate> {
    match experiment {
        Experiment::Prop1Verify => vec![("prop1_delta_le_1e-10", |s| get(s, "max_prop1_delta") <= PROP1_TOL)],
        Experiment::BoundsCheck => vec![
            ("cons_bound_every_step", |s| get(s, "cons_violations") == 0.0),
            ("recon_bound_every_step", |s| get(s, "recon_violations") == 0.0),
            ("one_term_equality", |s| get(s, "one_term_gap") <= ONE_TERM_TOL),
        ],
        Experiment::LinearProbeSuite | Experiment::ShallowProbeSuite => vec![
            ("norm_cons: same > similar > different", probe_norm_ordering),
            ("cos_prev: same < similar < different", |s| {
                get(s, "same.cos_prev_full_vs_cons") < get(s, "similar.cos_prev_full_vs_cons")
                    && get(s, "similar.cos_prev_full_vs_cons") < get(s, "different.cos_prev_full_vs_cons")
            }),
            ("cos_prev: same < 0", probe_same_negative),
            ("cos_prev: |different| <= 0.15", probe_different_near_zero),
        ],
        Experiment::RcmaeProbeSuite => vec![
            ("norm_cons: same > similar > different", probe_norm_ordering),
            ("cos_prev: same < 0", probe_same_negative),
            ("cos_prev: |different| <= 0.15", probe_different_near_zero),
        ],
        Experiment::CovarianceCheck => vec![
            ("residual_rel <= 1e-2", |s| get(s, "residual_rel") <= COVARIANCE_RESIDUAL_TOL),
            ("sgd approaches S* (10x closer)", |s| get(s, "final_distance_average") < 0.1 * get(s, "initial_distance")),
        ],
        Experiment::RcmaeTrain => vec![("loss_r decreases", |s| get(s, "final_loss_r") < get(s, "initial_loss_r"))],
        Experiment::SVsDCompare => vec![
            ("cos(d) > cos(s)", |s| {
                get(s, "rcmae_d.mean_cos_recon_vs_cons") > get(s, "rcmae_s.mean_cos_recon_vs_cons")
            }),
            ("|cos(s)| <= 0.1", |s| get(s, "rcmae_s.mean_cos_recon_vs_cons").abs() <= S_COS_BAND),
        ],
    }
}

/// Verdicts over per-seed statistics: each passes if it holds in at least
/// [`required_seeds`] of the seeds.
pub fn verdicts(experiment: Experiment, per_seed: &BTreeMap<String, Stats>) -> Vec<Verdict> {
    let n = per_seed.len();
    predicates(experiment)
        .into_iter()
        .map(|(name, pred)| {
            let holds_in = per_seed.values().filter(|s| pred(s)).count();
            let required = required_seeds(n);
            Verdict {
                name: name.to_string(),
                holds_in,
                seeds: n,
                required,
                pass: n > 0 && holds_in >= required,
            }
        })
        .collect()
}

/// Hard-invariant breaches visible in per-seed statistics.
pub fn hard_checks(experiment: Experiment, per_seed: &BTreeMap<String, Stats>) -> Vec<String> {
    let mut out = Vec::new();
    for (seed, s) in per_seed {
        if matches!(experiment, Experiment::Prop1Verify | Experiment::BoundsCheck) {
            let d = get(s, "max_prop1_delta");
            if !(d <= PROP1_TOL) {
                out.push(format!("seed {seed}: prop1 deviation {d:e} > {PROP1_TOL:e}"));
            }
            for key in ["cons_violations", "recon_violations"] {
                let v = get(s, key);
                if v != 0.0 {
                    out.push(format!("seed {seed}: {key} = {v}"));
                }
            }
        }
    }
    out
}

/// Cross-seed mean, sample std (0 for one seed), min and max of every key.
pub fn aggregates(per_seed: &BTreeMap<String, Stats>) -> BTreeMap<String, Aggregate> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in per_seed.values() {
        for (k, v) in s {
            cols.entry(k.clone()).or_default().push(*v);
        }
    }
    cols.into_iter()
        .map(|(k, v)| {
            let m = mean(&v);
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            let agg = Aggregate {
                mean: m,
                std,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: max(&v),
            };
            (k, agg)
        })
        .collect()
}

pub fn verdict_rule() -> String {
    "an ordering verdict passes when it holds in at least ceil(0.8 n) of n seeds (4 of 5); \
     this threshold is the harness's own acceptance rule"
        .to_string()
}

/// Builds a summary from tables alone. Tables are grouped by their `seed` tag.
pub fn summarize(experiment: Experiment, tables: &[Table]) -> Result<RunSummary> {
    let mut per_seed: BTreeMap<String, Stats> = BTreeMap::new();
    for t in tables {
        let seed = t.tags.get("seed").cloned().unwrap_or_else(|| "?".to_string());
        per_seed.entry(seed).or_default().extend(table_stats(t)?);
    }
    Ok(RunSummary {
        experiment,
        config: None,
        aggregates: aggregates(&per_seed),
        verdicts: verdicts(experiment, &per_seed),
        verdict_rule: verdict_rule(),
        hard_failures: hard_checks(experiment, &per_seed),
        per_seed,
        failed_seeds: Vec::new(),
        files: Vec::new(),
        wall_clock_secs: 0.0,
    })
}

/// Reads CSVs and summarises them. All files must share one schema and
/// one `experiment` tag.
pub fn aggregate(paths: &[PathBuf]) -> Result<RunSummary> {
    if paths.is_empty() {
        return Err(LabError::Config {
            key: "aggregate".into(),
            reason: "no input files".into(),
        });
    }
    let tables = paths.iter().map(|p| Table::read_file(p)).collect::<Result<Vec<_>>>()?;
    let first = &tables[0];
    let experiment: Experiment = first
        .tags
        .get("experiment")
        .and_then(|e| e.parse().ok())
        .ok_or_else(|| LabError::Schema {
            path: paths[0].display().to_string(),
            column: "<experiment tag>".into(),
        })?;
    for (t, p) in tables.iter().zip(paths) {
        let mismatch = |column: &str| LabError::Schema {
            path: p.display().to_string(),
            column: column.to_string(),
        };
        if t.tags.get("experiment") != first.tags.get("experiment") {
            return Err(mismatch("<experiment tag>"));
        }
        // the covariance check pairs a trace with its one-row fit
        let compatible = t.schema == first.schema
            || (experiment == Experiment::CovarianceCheck
                && matches!(t.schema, Schema::Covariance | Schema::CovarianceFit));
        if !compatible {
            let col = t
                .schema
                .columns()
                .iter()
                .zip(first.schema.columns())
                .find(|(a, b)| a != b)
                .map_or(t.schema.columns()[0], |(a, _)| *a);
            return Err(mismatch(col));
        }
    }
    let mut summary = summarize(experiment, &tables)?;
    summary.files = paths.to_vec();
    Ok(summary)
}
