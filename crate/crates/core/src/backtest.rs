//! Daily Top-N equal-weight strategy: buy the N best-scored stocks at the
//! close, sell at the next close, reinvest everything.

use chrono::NaiveDate;
use ndarray::Array2;

use crate::data::{compute_return, StockPanel};
use crate::error::{Error, Result};
use crate::metrics::top_n_indices;

#[derive(Clone, Debug, PartialEq)]
pub struct BacktestLedger {
    pub dates: Vec<NaiveDate>,
    /// Account value after each day's round trip; the account starts at 1.
    pub balance: Vec<f64>,
    pub holdings: Vec<Vec<String>>,
    pub daily_return: Vec<f64>,
}

/// Runs the strategy over every date that has a next-day return and at least
/// one scored candidate. NaN scores mark stocks as unscored. Ties go to the
/// earlier ticker.
pub fn run_topn(
    panel: &StockPanel,
    scores: &Array2<f64>,
    n: usize,
    cost_bps: f64,
) -> Result<BacktestLedger> {
    if scores.dim() != (panel.n_dates(), panel.n_tickers()) {
        return Err(Error::contract(format!(
            "scores {:?} do not match panel {}x{}",
            scores.dim(),
            panel.n_dates(),
            panel.n_tickers()
        )));
    }
    if n == 0 {
        return Err(Error::contract("top-N needs N >= 1"));
    }
    if !(cost_bps >= 0.0) {
        return Err(Error::contract(format!(
            "cost_bps must be >= 0, got {cost_bps}"
        )));
    }
    let labels = compute_return(panel)?;
    let cost = 2.0 * cost_bps / 1e4;
    let mut ledger = BacktestLedger {
        dates: Vec::new(),
        balance: Vec::new(),
        holdings: Vec::new(),
        daily_return: Vec::new(),
    };
    let mut balance = 1.0;
    for t in 0..panel.n_dates() {
        let cand: Vec<usize> = (0..panel.n_tickers())
            .filter(|&i| labels.defined[[t, i]] && !scores[[t, i]].is_nan())
            .collect();
        if cand.is_empty() {
            continue;
        }
        let s: Vec<f64> = cand.iter().map(|&i| scores[[t, i]]).collect();
        let picked: Vec<usize> = top_n_indices(&s, n).into_iter().map(|k| cand[k]).collect();
        let r = picked.iter().map(|&i| labels.y[[t, i]]).sum::<f64>() / picked.len() as f64 - cost;
        balance *= 1.0 + r;
        ledger.dates.push(panel.dates[t]);
        ledger.balance.push(balance);
        ledger
            .holdings
            .push(picked.iter().map(|&i| panel.tickers[i].clone()).collect());
        ledger.daily_return.push(r);
    }
    Ok(ledger)
}

/// Percent gain of the final balance over the starting 1.0.
pub fn cumulative_return(ledger: &BacktestLedger) -> Result<f64> {
    let last = ledger
        .balance
        .last()
        .ok_or_else(|| Error::contract("cumulative return of an empty ledger"))?;
    Ok(100.0 * (last - 1.0))
}

/// `date,balance,daily_return` rows.
pub fn write_ledger_csv<W: std::io::Write>(ledger: &BacktestLedger, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["date", "balance", "daily_return"])?;
    for ((d, b), r) in ledger
        .dates
        .iter()
        .zip(&ledger.balance)
        .zip(&ledger.daily_return)
    {
        out.write_record([d.to_string(), b.to_string(), r.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("ledger", e))?;
    Ok(())
}
