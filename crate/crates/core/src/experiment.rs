//! End-to-end runs driven by an [`ExperimentConfig`]: data preparation,
//! training, evaluation, backtesting and the ablation matrix.

use std::ops::Range;

use ndarray::Array2;
use serde::Serialize;

use crate::backbone::BackboneParams;
use crate::backtest::{run_topn, BacktestLedger};
use crate::config::{DataSource, ExperimentConfig};
use crate::cqb::{fit, predict_days, DepthRule, FitResult};
use crate::data::{gen_synthetic, load_csv, normalize_features, CsvSchema, SplitSpec, StockPanel};
use crate::dataset::{build_days, ClassTask, DayBatch};
use crate::error::{Error, Result};
use crate::losses::threshold_for;
use crate::metrics::{aggregate, DailyMetrics, EvalReport};
use crate::momentum::label_dataset;

pub fn load_panel(cfg: &ExperimentConfig) -> Result<StockPanel> {
    match &cfg.data {
        DataSource::Synthetic(spec) => gen_synthetic(spec),
        DataSource::Csv(path) => Ok(normalize_features(&load_csv(path, &CsvSchema::default())?)),
    }
}

/// A panel cut into chronological train / valid / test day batches.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub panel: StockPanel,
    pub ranges: [Range<usize>; 3],
    pub train: Vec<DayBatch>,
    pub valid: Vec<DayBatch>,
    pub test: Vec<DayBatch>,
}

pub fn prepare(cfg: &ExperimentConfig, panel: StockPanel) -> Result<Prepared> {
    let split = SplitSpec::by_fraction(&panel, cfg.split_train, cfg.split_valid)?;
    let ranges = split.index_ranges(&panel)?;
    let mut parts = Vec::with_capacity(3);
    for (name, r) in ["train", "valid", "test"].into_iter().zip(ranges.iter()) {
        let days = build_days(&panel, r.clone(), &cfg.dataset)?;
        if days.is_empty() {
            return Err(Error::data(format!(
                "{name} split (dates {}..={}) has no usable days; check window and split sizes",
                panel.dates[r.start],
                panel.dates[r.end - 1]
            )));
        }
        parts.push(days);
    }
    let test = parts.pop().expect("three parts");
    let valid = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(Prepared {
        panel,
        ranges,
        train,
        valid,
        test,
    })
}

/// Initialises and trains a model on `data`.
pub fn train_on(cfg: &ExperimentConfig, data: &Prepared) -> Result<FitResult> {
    let init = BackboneParams::init(&cfg.arch(data.panel.n_features()), cfg.init_seed())?;
    fit(init, &data.train, &data.valid, &cfg.train)
}

/// Metrics of the return head on `days`; the k histogram comes from `ks`.
pub fn evaluate_days(
    params: &BackboneParams,
    days: &[DayBatch],
    ns: &[usize],
    ks: &[usize],
) -> Result<EvalReport> {
    let preds = predict_days(params, days)?;
    let mut daily = DailyMetrics::default();
    for (p, d) in preds.iter().zip(days) {
        daily.push_day(p, &d.returns, ns)?;
    }
    daily.ks = ks.to_vec();
    aggregate(&daily)
}

/// Ranking depth of each training day under the configured rule.
pub fn training_ks(cfg: &ExperimentConfig, data: &Prepared) -> Result<Vec<usize>> {
    let classes = cfg.dataset.task.n_classes();
    data.train
        .iter()
        .map(|d| Ok(cfg.train.rank_batch(&d.levels, classes)?.k))
        .collect()
}

/// Panel-shaped scores: the return head's output where a day batch has the
/// stock, NaN elsewhere.
pub fn score_matrix(
    params: &BackboneParams,
    panel: &StockPanel,
    days: &[DayBatch],
) -> Result<Array2<f64>> {
    let mut scores = Array2::from_elem((panel.n_dates(), panel.n_tickers()), f64::NAN);
    for (d, p) in days.iter().zip(predict_days(params, days)?) {
        for (&i, v) in d.stocks.iter().zip(p) {
            scores[[d.t, i]] = v;
        }
    }
    Ok(scores)
}

/// Top-N backtest over the test split.
pub fn backtest_test(
    cfg: &ExperimentConfig,
    params: &BackboneParams,
    data: &Prepared,
) -> Result<BacktestLedger> {
    let scores = score_matrix(params, &data.panel, &data.test)?;
    run_topn(&data.panel, &scores, cfg.backtest_n, cfg.cost_bps)
}

/// `date,ticker,class,level` for every labelled cell of the panel.
pub fn write_labels<W: std::io::Write>(
    cfg: &ExperimentConfig,
    panel: &StockPanel,
    w: W,
) -> Result<usize> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["date", "ticker", "class", "level"])?;
    let mut n = 0;
    match &cfg.dataset.task {
        ClassTask::Momentum(m) => {
            let labels = label_dataset(panel, m)?;
            for ((t, i), c) in labels.indexed_iter() {
                if let Some(c) = c {
                    out.write_record([
                        panel.dates[t].to_string(),
                        panel.tickers[i].clone(),
                        c.name().to_string(),
                        c.level().to_string(),
                    ])?;
                    n += 1;
                }
            }
        }
        ClassTask::RiseFall => {
            let ret = crate::data::compute_return(panel)?;
            for ((t, i), lbl) in crate::momentum::rise_fall_label(&ret).indexed_iter() {
                if let Some(l) = lbl {
                    let name = if *l == 1 { "Rise" } else { "Fall" };
                    out.write_record([
                        panel.dates[t].to_string(),
                        panel.tickers[i].clone(),
                        name.to_string(),
                        l.to_string(),
                    ])?;
                    n += 1;
                }
            }
        }
    }
    out.flush().map_err(|e| Error::io("labels", e))?;
    Ok(n)
}

/// Cells of the ablation matrix, in table order.
pub const ABLATIONS: [&str; 8] = [
    "full",
    "ew",
    "stl",
    "rise_fall",
    "pairwise",
    "fixed_k",
    "fixed_beta",
    "fixed_decay",
];

/// The config for one ablation cell.
pub fn ablation_config(
    base: &ExperimentConfig,
    name: &str,
    n_tickers: usize,
) -> Result<ExperimentConfig> {
    let full = base.with("train.mode", "full")?;
    match name {
        "full" => Ok(full),
        "ew" => full.with("train.mode", "ew"),
        "stl" => full.with("train.mode", "stl"),
        "rise_fall" => full.with("task", "rise_fall"),
        "pairwise" => full.with("loss.objective", "pairwise"),
        "fixed_k" => {
            // Fixed depth at the adaptive rule's nominal threshold.
            let frac = match base.train.depth {
                DepthRule::AdaptiveFraction(f) => f,
                DepthRule::Fixed(_) => 0.2,
            };
            full.with("loss.k", &threshold_for(n_tickers, frac).to_string())
        }
        "fixed_beta" => full.with("train.mode", "fixed_beta"),
        "fixed_decay" => full.with("train.mode", "fixed_decay"),
        other => Err(Error::config("ablation", format!("unknown cell `{other}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub ic: f64,
    pub rank_ic: f64,
    pub ic_std: f64,
    pub rank_ic_std: f64,
    pub best_epoch: usize,
}

/// Trains every cell on the same panel and reports test-split metrics. Cells
/// run on separate threads; each is internally sequential, so results do not
/// depend on scheduling.
pub fn reproduce(base: &ExperimentConfig, cells: &[&str]) -> Result<Vec<AblationRow>> {
    let panel = load_panel(base)?;
    let configs: Vec<ExperimentConfig> = cells
        .iter()
        .map(|c| ablation_config(base, c, panel.n_tickers()))
        .collect::<Result<_>>()?;
    let results: Vec<Result<AblationRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = cells
            .iter()
            .zip(&configs)
            .map(|(name, cfg)| {
                let panel = panel.clone();
                s.spawn(move || -> Result<AblationRow> {
                    let data = prepare(cfg, panel)?;
                    let fit = train_on(cfg, &data)?;
                    let rep = evaluate_days(&fit.params, &data.test, &[], &[])?;
                    Ok(AblationRow {
                        name: name.to_string(),
                        ic: rep.ic,
                        rank_ic: rep.rank_ic,
                        ic_std: rep.ic_std,
                        rank_ic_std: rep.rank_ic_std,
                        best_epoch: fit.best_epoch,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::contract("ablation worker panicked")))
            })
            .collect()
    });
    results.into_iter().collect()
}

/// `ablation,ic,rank_ic,ic_std,rank_ic_std,best_epoch`.
pub fn write_ablation_table<W: std::io::Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "ablation",
        "ic",
        "rank_ic",
        "ic_std",
        "rank_ic_std",
        "best_epoch",
    ])?;
    for r in rows {
        out.write_record([
            r.name.clone(),
            format!("{:.4}", r.ic),
            format!("{:.4}", r.rank_ic),
            format!("{:.2}", r.ic_std),
            format!("{:.2}", r.rank_ic_std),
            r.best_epoch.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("ablation table", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::load(
            None,
            &[
                "synthetic.dates=90".into(),
                "synthetic.tickers=10".into(),
                "window=5".into(),
                "model.hidden=8".into(),
                "train.epochs=2".into(),
                "train.lr=1e-2".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn splits_are_chronological_and_disjoint() {
        let cfg = tiny();
        let data = prepare(&cfg, load_panel(&cfg).unwrap()).unwrap();
        let last_train = data.train.last().unwrap().t;
        let first_valid = data.valid.first().unwrap().t;
        assert!(last_train < first_valid);
        assert!(data.valid.last().unwrap().t < data.test.first().unwrap().t);
        // Labels never reach the next split.
        assert!(last_train + 1 < data.ranges[0].end);
    }

    #[test]
    fn ablation_cells_differ_as_named() {
        let cfg = tiny();
        let n = 10;
        assert_eq!(
            ablation_config(&cfg, "fixed_k", n).unwrap().train.depth,
            DepthRule::Fixed(2)
        );
        assert_eq!(
            ablation_config(&cfg, "rise_fall", n).unwrap().dataset.task,
            ClassTask::RiseFall
        );
        assert!(ablation_config(&cfg, "nope", n).is_err());
    }

    #[test]
    fn reproduce_emits_one_row_per_cell() {
        let cfg = tiny();
        let rows = reproduce(&cfg, &ABLATIONS).unwrap();
        assert_eq!(rows.len(), ABLATIONS.len());
        let mut buf = Vec::new();
        write_ablation_table(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ablation,ic,rank_ic"));
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn labels_and_backtest_run() {
        let cfg = tiny();
        let panel = load_panel(&cfg).unwrap();
        let mut buf = Vec::new();
        let n = write_labels(&cfg, &panel, &mut buf).unwrap();
        assert!(n > 0);
        let data = prepare(&cfg, panel).unwrap();
        let fit = train_on(&cfg, &data).unwrap();
        let ledger = backtest_test(&cfg, &fit.params, &data).unwrap();
        assert_eq!(ledger.dates.len(), data.test.len());
    }
}
