//! Multivariate effective sample size and per-procedure summaries.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::MethodCombo;
use crate::output::fmt_opt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    pub multivariate_ess: f64,
    pub sample_covariance: Vec<Vec<f64>>,
    pub batch_means_covariance: Vec<Vec<f64>>,
    pub batch_size: usize,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// `n·(det Λ / det Σ)^{1/p}` with `Λ` the sample covariance and `Σ` the
/// batch-means estimate of the long-run covariance (batch size `⌊√n⌋`,
/// non-overlapping batches, remainder discarded).
pub fn multivariate_ess(samples: &[Vec<f64>]) -> Result<EssReport> {
    let n = samples.len();
    if n < 100 {
        return Err(Error::DegenerateChain(format!("{n} samples, need at least 100")));
    }
    let p = samples[0].len();
    if p == 0 || samples.iter().any(|r| r.len() != p) {
        return Err(Error::DegenerateChain("ragged or empty sample rows".into()));
    }
    let x = DMatrix::from_fn(n, p, |i, j| samples[i][j]);
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - mean[j]);
    let lambda = centred.transpose() * &centred / (n as f64 - 1.0);

    let b = (n as f64).sqrt().floor() as usize;
    let a = n / b;
    let used = a * b;
    let used_mean: Vec<f64> = (0..p).map(|j| (0..used).map(|i| x[(i, j)]).sum::<f64>() / used as f64).collect();
    let batch = DMatrix::from_fn(a, p, |k, j| {
        (k * b..(k + 1) * b).map(|i| x[(i, j)]).sum::<f64>() / b as f64 - used_mean[j]
    });
    let sigma = batch.transpose() * &batch * (b as f64 / (a as f64 - 1.0));

    let det_l = lambda.determinant();
    let det_s = sigma.determinant();
    if !(det_s > 0.0) || !det_s.is_finite() {
        return Err(Error::DegenerateChain(format!("singular batch-means covariance (det {det_s})")));
    }
    if !(det_l > 0.0) || !det_l.is_finite() {
        return Err(Error::DegenerateChain(format!("singular sample covariance (det {det_l})")));
    }
    Ok(EssReport {
        multivariate_ess: n as f64 * (det_l / det_s).powf(1.0 / p as f64),
        sample_covariance: to_rows(&lambda),
        batch_means_covariance: to_rows(&sigma),
        batch_size: b,
    })
}

/// Per-chain metrics entering the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainMetrics {
    pub combo: MethodCombo,
    pub m: usize,
    pub path_id: usize,
    pub ess: Option<f64>,
    pub param_accept_rate: f64,
    pub path_accept_rate: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation; `None` for no values, `sd = 0`
    /// for one.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub combo: MethodCombo,
    pub m: usize,
    pub chains: usize,
    pub ess: Option<MeanSd>,
    pub param_accept: Option<MeanSd>,
    pub path_accept: Option<MeanSd>,
    pub time_s: Option<MeanSd>,
}

/// Aggregates per `(combo, m)`, ordered by combo then `m`. Chain order does
/// not matter beyond floating-point summation order, which is fixed by
/// sorting on path id.
pub fn summarize_run(chains: &[ChainMetrics]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(MethodCombo, usize), Vec<&ChainMetrics>> = BTreeMap::new();
    for c in chains {
        groups.entry((c.combo, c.m)).or_default().push(c);
    }
    groups
        .into_iter()
        .map(|((combo, m), mut rows)| {
            rows.sort_by_key(|r| r.path_id);
            let ess: Vec<f64> = rows.iter().filter_map(|r| r.ess).collect();
            let pa: Vec<f64> = rows.iter().map(|r| r.param_accept_rate).collect();
            let xa: Vec<f64> = rows.iter().filter_map(|r| r.path_accept_rate).collect();
            let t: Vec<f64> = rows.iter().map(|r| r.wall_time_s).collect();
            SummaryRow {
                combo,
                m,
                chains: rows.len(),
                ess: MeanSd::of(&ess),
                param_accept: MeanSd::of(&pa),
                path_accept: MeanSd::of(&xa),
                time_s: MeanSd::of(&t),
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "proposal_method,proposal_density,likelihood_density,m,ess_mean,ess_sd,param_acc_mean,param_acc_sd,path_acc_mean,path_acc_sd,time_mean_s,time_sd_s";

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        let label = r.combo.label();
        let parts: Vec<&str> = label.split('/').collect();
        let pair = |x: Option<MeanSd>| format!("{},{}", fmt_opt(x.map(|v| v.mean)), fmt_opt(x.map(|v| v.sd)));
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            parts[0],
            parts[1],
            parts[2],
            r.m,
            pair(r.ess),
            pair(r.param_accept),
            pair(r.path_accept),
            pair(r.time_s)
        )?;
    }
    Ok(())
}
