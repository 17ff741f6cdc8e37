use serde::{Deserialize, Serialize};

use super::report::{evaluate_entries, EvalEntry, MetricSummary};
use crate::corpus::QuerySet;
use crate::pipeline::{run_queries, Retriever, SearchConfig, SearchEngine};
use crate::{Error, Result};

/// Least-squares line `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two (x, y) points".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("x values are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w: usize,
    pub reranked: MetricSummary,
    /// The same windows scored in embedding order.
    pub embedding_only: MetricSummary,
    pub mean_t_phi: f64,
    pub mean_t_sim: f64,
    pub mean_t_rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub ks: Vec<usize>,
    pub rows: Vec<SweepRow>,
    /// Mean re-ranking time against window size.
    pub t_rho_fit: Option<LinearFit>,
}

/// Evaluates the pipeline at each window size in `ws` (ascending).
/// Queries run sequentially so the per-query timings are not disturbed.
pub fn window_sweep(
    engine: &SearchEngine<'_>,
    retriever: Retriever<'_>,
    base: &SearchConfig,
    ws: &[usize],
    queries: &QuerySet,
    ks: &[usize],
) -> Result<SweepReport> {
    if ws.is_empty() || ws.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::InvalidArgument(
            "window sizes must be non-empty and strictly ascending".into(),
        ));
    }
    if queries.is_empty() {
        return Err(Error::InvalidArgument("empty query set".into()));
    }
    let mut rows = Vec::with_capacity(ws.len());
    let mut ks_out = Vec::new();
    for &w in ws {
        let cfg = SearchConfig { w, ..*base };
        let results = run_queries(engine, &[retriever], queries, &cfg, false)?;
        let n = results.len() as f64;
        let mean = |f: &dyn Fn(&crate::eval::TimingBreakdown) -> f64| {
            results.iter().map(|r| f(&r.timing)).sum::<f64>() / n
        };
        let reranked: Vec<EvalEntry> = results.iter().map(EvalEntry::reranked).collect();
        let plain: Vec<EvalEntry> = results.iter().map(EvalEntry::embedding_only).collect();
        let rr = evaluate_entries(&reranked, ks, None)?;
        let eo = evaluate_entries(&plain, ks, None)?;
        ks_out = rr.ks.clone();
        rows.push(SweepRow {
            w,
            reranked: rr.mean,
            embedding_only: eo.mean,
            mean_t_phi: mean(&|t| t.t_phi),
            mean_t_sim: mean(&|t| t.t_sim),
            mean_t_rho: mean(&|t| t.t_rho),
        });
    }
    let t_rho_fit = if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.w as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.mean_t_rho).collect();
        Some(fit_line(&xs, &ys)?)
    } else {
        None
    };
    Ok(SweepReport {
        ks: ks_out,
        rows,
        t_rho_fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let f = fit_line(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_line_r_squared() {
        // Residuals (0.5, -1, 0.5) around y = 2x: ss_res = 1.5, ss_tot = 33.5
        let f = fit_line(&[0.0, 2.0, 4.0], &[0.5, 3.0, 8.5]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.r_squared - (1.0 - 1.5 / 33.5)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(fit_line(&[1.0], &[1.0]).is_err());
        assert!(fit_line(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
