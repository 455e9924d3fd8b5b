//! Timing and error comparison of NN inference, NN + refinement and
//! iterative retrieval on the same volumes, pinned to one thread.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{recon_error_weighted, split_object, ReconError, DEFAULT_PHASE_WEIGHT};
use crate::crystalgen::{mix_seed, TrainingSample};
use crate::error::{Error, Result};
use crate::nn::{predict, NetworkWeights};
use crate::refine::{refine, RefineConfig};
use crate::retrieval::{run_restarts, PRConfig, DEFAULT_RESTARTS};
use crate::volume::recombine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub restarts: usize,
    pub seed: u64,
    /// Weight of the phase error in the twin/shift selection score.
    pub phase_weight: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { restarts: DEFAULT_RESTARTS, seed: 0, phase_weight: DEFAULT_PHASE_WEIGHT }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nn,
    NnRefine,
    Retrieval,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Nn, Method::NnRefine, Method::Retrieval];
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub sample_id: String,
    pub method: Method,
    pub shape_mae: f64,
    pub phase_mae: f64,
    pub chi2: f64,
    pub twin_used: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    /// Linearly interpolated quartiles; `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self { q1: at(0.25), median: at(0.5), q3: at(0.75) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub count: usize,
    pub wall_ms: Quartiles,
    pub shape_mae: Quartiles,
    pub phase_mae: Quartiles,
    pub chi2: Quartiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub summary: Vec<MethodSummary>,
    pub retrieval_iterations: usize,
    pub restarts: usize,
    /// Median retrieval time over median NN time.
    pub nn_speedup: f64,
    /// Median retrieval time over median NN + refinement time.
    pub nn_refine_speedup: f64,
    /// Median NN forward time strictly below median retrieval time.
    pub ordering_holds: bool,
}

impl BenchmarkReport {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == m)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Everything but the per-row table.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct View<'a> {
            summary: &'a [MethodSummary],
            retrieval_iterations: usize,
            restarts: usize,
            nn_speedup: f64,
            nn_refine_speedup: f64,
            ordering_holds: bool,
        }
        Ok(serde_json::to_string_pretty(&View {
            summary: &self.summary,
            retrieval_iterations: self.retrieval_iterations,
            restarts: self.restarts,
            nn_speedup: self.nn_speedup,
            nn_refine_speedup: self.nn_refine_speedup,
            ordering_holds: self.ordering_holds,
        })?)
    }
}

fn row(id: &str, method: Method, e: &ReconError, ms: f64) -> BenchmarkRow {
    BenchmarkRow {
        sample_id: id.to_string(),
        method,
        shape_mae: e.shape_mae,
        phase_mae: e.phase_mae,
        chi2: e.chi2,
        twin_used: e.twin_used,
        wall_ms: ms,
    }
}

/// Runs the three inversion paths on every `(id, sample)` on a single
/// worker thread and records wall time and reconstruction error of each.
pub fn benchmark(
    samples: &[(String, TrainingSample)],
    weights: Option<&NetworkWeights<f32>>,
    pr_cfg: &PRConfig,
    refine_cfg: &RefineConfig,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    let weights = weights.ok_or_else(|| Error::InvalidArgument { op: "benchmark", msg: "missing weights".into() })?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    pr_cfg.validate()?;
    refine_cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidArgument { op: "benchmark", msg: e.to_string() })?;
    let restarts = cfg.restarts.max(1);
    let rows = pool.install(|| -> Result<Vec<BenchmarkRow>> {
        let mut rows = Vec::with_capacity(3 * samples.len());
        for (i, (id, s)) in samples.iter().enumerate() {
            let score = |shape, phase| recon_error_weighted(shape, phase, &s.shape, &s.phase, cfg.phase_weight);

            let start = Instant::now();
            let (pred, _) = predict(&s.magnitude, weights)?;
            let t_nn = start.elapsed();
            let rho0 = recombine(&pred.shape, &pred.phase)?;
            let refined = refine(&rho0, &s.magnitude, refine_cfg)?;
            let t_refine = start.elapsed();
            rows.push(row(id, Method::Nn, &score(&pred.shape, &pred.phase)?, t_nn.as_secs_f64() * 1e3));
            let (rs, rp) = split_object(&refined.object);
            rows.push(row(id, Method::NnRefine, &score(&rs, &rp)?, t_refine.as_secs_f64() * 1e3));

            let start = Instant::now();
            let res = run_restarts(&s.magnitude, pr_cfg, restarts, mix_seed(cfg.seed ^ i as u64))?;
            let t_pr = start.elapsed();
            let (ps, pp) = split_object(&res.object);
            rows.push(row(id, Method::Retrieval, &score(&ps, &pp)?, t_pr.as_secs_f64() * 1e3));
            log::info!(
                "benchmark {id}: nn {:.1} ms, nn+refine {:.1} ms, retrieval {:.1} ms",
                t_nn.as_secs_f64() * 1e3,
                t_refine.as_secs_f64() * 1e3,
                t_pr.as_secs_f64() * 1e3
            );
        }
        Ok(rows)
    })?;

    let summary: Vec<MethodSummary> = Method::ALL
        .iter()
        .map(|&m| {
            let sel: Vec<&BenchmarkRow> = rows.iter().filter(|r| r.method == m).collect();
            let q = |f: fn(&BenchmarkRow) -> f64| {
                Quartiles::of(&sel.iter().map(|r| f(r)).collect::<Vec<_>>()).expect("non-empty")
            };
            MethodSummary {
                method: m,
                count: sel.len(),
                wall_ms: q(|r| r.wall_ms),
                shape_mae: q(|r| r.shape_mae),
                phase_mae: q(|r| r.phase_mae),
                chi2: q(|r| r.chi2),
            }
        })
        .collect();
    let med = |m: Method| summary.iter().find(|s| s.method == m).expect("all methods").wall_ms.median;
    let (nn, nr, pr) = (med(Method::Nn), med(Method::NnRefine), med(Method::Retrieval));
    Ok(BenchmarkReport {
        rows,
        summary,
        retrieval_iterations: pr_cfg.total_iters,
        restarts,
        nn_speedup: pr / nn,
        nn_refine_speedup: pr / nr,
        ordering_holds: nn < pr,
    })
}
