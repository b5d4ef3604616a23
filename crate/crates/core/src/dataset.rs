//! Per-day cross-sections ready for the network: one [`DayBatch`] per trading
//! day, holding every stock that has a full feature window, a next-day return
//! and a class label.

use std::ops::Range;

use chrono::NaiveDate;

use crate::data::{compute_return, zscore, StockPanel};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::momentum::{label_dataset_until, MomentumClass, MomentumConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum ClassTask {
    /// Five momentum-line classes.
    Momentum(MomentumConfig),
    /// Two classes: next-day return above zero or not.
    RiseFall,
}

impl ClassTask {
    pub fn n_classes(&self) -> usize {
        match self {
            ClassTask::Momentum(_) => MomentumClass::COUNT,
            ClassTask::RiseFall => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Days of history per sample, ending at the prediction day.
    pub window: usize,
    pub task: ClassTask,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window: 20,
            task: ClassTask::Momentum(MomentumConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DayBatch {
    pub date: NaiveDate,
    /// Row of the source panel.
    pub t: usize,
    /// Column index in the source panel of each row below.
    pub stocks: Vec<usize>,
    /// `n × window·features`, oldest day first.
    pub features: Tensor,
    /// Raw next-day return ratios.
    pub returns: Vec<f64>,
    /// Returns z-scored within the day; the regression target.
    pub target: Vec<f64>,
    pub levels: Vec<usize>,
}

impl DayBatch {
    pub fn len(&self) -> usize {
        self.stocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stocks.is_empty()
    }
}

/// Builds the batches for panel rows `range`.
///
/// Feature windows may reach back before `range.start` (past data only), but
/// returns and labels never read a close at or beyond `range.end`. Days with
/// fewer than two usable stocks are dropped.
pub fn build_days(
    panel: &StockPanel,
    range: Range<usize>,
    cfg: &DatasetConfig,
) -> Result<Vec<DayBatch>> {
    if cfg.window == 0 {
        return Err(Error::config("window", "must be >= 1"));
    }
    if range.end > panel.n_dates() || range.start >= range.end {
        return Err(Error::contract(format!(
            "date range {range:?} invalid for a panel of {} dates",
            panel.n_dates()
        )));
    }
    if range.end - range.start < 2 {
        return Ok(Vec::new());
    }
    let returns = compute_return(panel)?;
    let momentum = match &cfg.task {
        ClassTask::Momentum(m) => Some(label_dataset_until(panel, m, range.end)?),
        ClassTask::RiseFall => None,
    };
    let (w, nf) = (cfg.window, panel.n_features());
    let mut days = Vec::new();
    for t in range.start.max(w - 1)..range.end - 1 {
        let mut stocks = Vec::new();
        let mut raw = Vec::new();
        let mut levels = Vec::new();
        for i in 0..panel.n_tickers() {
            let Some(r) = returns.get(t, i) else { continue };
            if !(t + 1 - w..=t).all(|d| panel.valid[[d, i]]) {
                continue;
            }
            let level = match &momentum {
                Some(m) => match m[[t, i]] {
                    Some(c) => c.level(),
                    None => continue,
                },
                None => usize::from(r > 0.0),
            };
            stocks.push(i);
            raw.push(r);
            levels.push(level);
        }
        if stocks.len() < 2 {
            continue;
        }
        let mut feats = Vec::with_capacity(stocks.len() * w * nf);
        for &i in &stocks {
            for d in t + 1 - w..=t {
                feats.extend((0..nf).map(|c| panel.features[[d, i, c]]));
            }
        }
        days.push(DayBatch {
            date: panel.dates[t],
            t,
            features: Tensor::from_vec(stocks.len(), w * nf, feats)?,
            target: zscore(&raw),
            returns: raw,
            stocks,
            levels,
        });
    }
    Ok(days)
}
