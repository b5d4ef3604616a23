//! Cross-sectional evaluation metrics. Every metric is computed per trading
//! day and then averaged over the days on which it is defined.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance below this counts as zero; the day is then undefined.
const VAR_FLOOR: f64 = 1e-24;

/// Pearson correlation with population moments. `None` when either side has
/// no variance, fewer than two points, or lengths differ.
pub fn daily_ic(pred: &[f64], y: &[f64]) -> Option<f64> {
    let n = pred.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let nf = n as f64;
    let mp = pred.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut cov, mut vp, mut vy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(y) {
        let (dp, dy) = (p - mp, t - my);
        cov += dp * dy;
        vp += dp * dp;
        vy += dy * dy;
    }
    if vp / nf <= VAR_FLOOR || vy / nf <= VAR_FLOOR {
        return None;
    }
    Some((cov / (vp * vy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn daily_rank_ic(pred: &[f64], y: &[f64]) -> Option<f64> {
    if pred.len() != y.len() {
        return None;
    }
    daily_ic(&average_ranks(pred), &average_ranks(y))
}

/// Indices of the top `n` by score, descending; ties keep index order.
pub fn top_n_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(n);
    idx
}

/// Percentage of the top `n` stocks by `pred` whose `y` is positive.
pub fn precision_at_n(pred: &[f64], y: &[f64], n: usize) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(Error::contract(format!(
            "precision: {} predictions for {} targets",
            pred.len(),
            y.len()
        )));
    }
    if n == 0 || n > pred.len() {
        return Err(Error::contract(format!(
            "precision@{n} needs 1..={} stocks",
            pred.len()
        )));
    }
    let hits = top_n_indices(pred, n)
        .iter()
        .filter(|&&i| y[i] > 0.0)
        .count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// Exact occurrence counts.
pub fn record_k(ks: &[usize]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for &k in ks {
        *hist.entry(k).or_insert(0) += 1;
    }
    hist
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ic: f64,
    pub rank_ic: f64,
    /// Across-day standard deviation, multiplied by 1e3.
    pub ic_std: f64,
    pub rank_ic_std: f64,
    /// Mean daily precision in percent, keyed by N.
    pub precision_at: BTreeMap<usize, f64>,
    pub k_histogram: BTreeMap<usize, usize>,
    pub days: usize,
}

/// Per-day values feeding [`aggregate`].
#[derive(Clone, Debug, Default)]
pub struct DailyMetrics {
    pub ic: Vec<f64>,
    pub rank_ic: Vec<f64>,
    pub precision: BTreeMap<usize, Vec<f64>>,
    pub ks: Vec<usize>,
}

impl DailyMetrics {
    /// Adds one cross-section; undefined correlations are skipped and
    /// precision@N only counts days with at least N stocks.
    pub fn push_day(&mut self, pred: &[f64], y: &[f64], ns: &[usize]) -> Result<()> {
        if let Some(v) = daily_ic(pred, y) {
            self.ic.push(v);
        }
        if let Some(v) = daily_rank_ic(pred, y) {
            self.rank_ic.push(v);
        }
        for &n in ns {
            if n >= 1 && n <= pred.len() {
                let p = precision_at_n(pred, y, n)?;
                self.precision.entry(n).or_default().push(p);
            }
        }
        Ok(())
    }
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn aggregate(daily: &DailyMetrics) -> Result<EvalReport> {
    if daily.ic.is_empty() || daily.rank_ic.is_empty() {
        return Err(Error::EmptyReport);
    }
    let (ic, ic_std) = mean_std(&daily.ic);
    let (rank_ic, rank_ic_std) = mean_std(&daily.rank_ic);
    Ok(EvalReport {
        ic,
        rank_ic,
        ic_std: ic_std * 1e3,
        rank_ic_std: rank_ic_std * 1e3,
        precision_at: daily
            .precision
            .iter()
            .map(|(&n, v)| (n, mean_std(v).0))
            .collect(),
        k_histogram: record_k(&daily.ks),
        days: daily.ic.len(),
    })
}

/// `k,count` rows.
pub fn write_k_histogram<W: std::io::Write>(hist: &BTreeMap<usize, usize>, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["k", "count"])?;
    for (k, c) in hist {
        out.write_record([k.to_string(), c.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("k histogram", e))?;
    Ok(())
}
