//! Stock panels: loading, cross-sectional normalization, splitting and a
//! seeded synthetic market.
//!
//! A [`StockPanel`] is a `date × ticker` grid. Cells that are missing or not
//! tradable are flagged invalid in `valid` and are never imputed; every
//! downstream consumer skips them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StockPanel {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    /// `[date, ticker]` closing prices; meaningful only where `valid`.
    pub close: Array2<f64>,
    /// `[date, ticker, channel]`.
    pub features: Array3<f64>,
    pub valid: Array2<bool>,
}

impl StockPanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        tickers: Vec<String>,
        close: Array2<f64>,
        features: Array3<f64>,
        valid: Array2<bool>,
    ) -> Result<Self> {
        let (nd, nt) = (dates.len(), tickers.len());
        if close.dim() != (nd, nt) || valid.dim() != (nd, nt) {
            return Err(Error::data(format!(
                "close {:?} / valid {:?} do not match {nd} dates x {nt} tickers",
                close.dim(),
                valid.dim()
            )));
        }
        if features.dim().0 != nd || features.dim().1 != nt {
            return Err(Error::data(format!(
                "features {:?} do not match {nd} dates x {nt} tickers",
                features.dim()
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::data(format!(
                "dates not strictly increasing: {} then {}",
                w[0], w[1]
            )));
        }
        let panel = Self {
            dates,
            tickers,
            close,
            features,
            valid,
        };
        for ((t, i), &ok) in panel.valid.indexed_iter() {
            if !ok {
                continue;
            }
            let c = panel.close[[t, i]];
            if !(c > 0.0) || !c.is_finite() {
                return Err(panel.cell_error(t, i, format!("close {c} must be positive")));
            }
            if panel
                .features
                .slice(s![t, i, ..])
                .iter()
                .any(|v| !v.is_finite())
            {
                return Err(panel.cell_error(t, i, "non-finite feature".into()));
            }
        }
        Ok(panel)
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.dim().2
    }

    pub(crate) fn cell_error(&self, t: usize, i: usize, msg: String) -> Error {
        Error::data(format!("{} {}: {msg}", self.dates[t], self.tickers[i]))
    }

    /// Rows `range` as a standalone panel.
    pub fn slice_dates(&self, range: Range<usize>) -> StockPanel {
        StockPanel {
            dates: self.dates[range.clone()].to_vec(),
            tickers: self.tickers.clone(),
            close: self.close.slice(s![range.clone(), ..]).to_owned(),
            features: self.features.slice(s![range.clone(), .., ..]).to_owned(),
            valid: self.valid.slice(s![range, ..]).to_owned(),
        }
    }
}

/// One-day return ratios `(close[t+1] - close[t]) / close[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnLabel {
    pub y: Array2<f64>,
    /// True where both `t` and `t+1` are valid. The last date is never defined.
    pub defined: Array2<bool>,
}

impl ReturnLabel {
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.defined[[t, i]].then(|| self.y[[t, i]])
    }
}

pub fn compute_return(panel: &StockPanel) -> Result<ReturnLabel> {
    let (nd, nt) = panel.close.dim();
    if nd < 2 {
        return Err(Error::contract(format!(
            "returns need at least 2 dates, panel has {nd}"
        )));
    }
    let mut y = Array2::from_elem((nd, nt), f64::NAN);
    let mut defined = Array2::from_elem((nd, nt), false);
    for t in 0..nd {
        for i in 0..nt {
            if !panel.valid[[t, i]] {
                continue;
            }
            let c0 = panel.close[[t, i]];
            if !(c0 > 0.0) {
                return Err(panel.cell_error(t, i, format!("close {c0} must be positive")));
            }
            if t + 1 < nd && panel.valid[[t + 1, i]] {
                let c1 = panel.close[[t + 1, i]];
                y[[t, i]] = (c1 - c0) / c0;
                defined[[t, i]] = true;
            }
        }
    }
    Ok(ReturnLabel { y, defined })
}

/// Column layout of a panel CSV.
#[derive(Clone, Debug)]
pub struct CsvSchema {
    pub date: String,
    pub ticker: String,
    pub close: String,
    /// Feature columns in channel order; `None` takes every column named
    /// `f<digits>`, ordered by the digits.
    pub features: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            date: "date".into(),
            ticker: "ticker".into(),
            close: "close".into(),
            features: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<StockPanel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<StockPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::data(format!("missing column `{name}`")))
    };
    let (date_col, ticker_col, close_col) = (
        col(&schema.date)?,
        col(&schema.ticker)?,
        col(&schema.close)?,
    );
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => {
            let mut numbered: Vec<(usize, usize)> = headers
                .iter()
                .enumerate()
                .filter_map(|(pos, h)| {
                    let digits = h.trim().strip_prefix('f')?;
                    digits.parse::<usize>().ok().map(|k| (k, pos))
                })
                .collect();
            numbered.sort();
            numbered.into_iter().map(|(_, pos)| pos).collect()
        }
    };

    struct Row {
        close: f64,
        features: Vec<f64>,
    }
    let mut rows: BTreeMap<(NaiveDate, String), Row> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |pos: usize| {
            record.get(pos).map(str::trim).ok_or_else(|| Error::Parse {
                line,
                msg: format!("missing field {pos}"),
            })
        };
        let parse_f = |pos: usize| -> Result<f64> {
            let raw = field(pos)?;
            raw.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("`{raw}` is not a number (column `{}`)", &headers[pos]),
            })
        };
        let raw_date = field(date_col)?;
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            msg: format!("bad date `{raw_date}`: {e}"),
        })?;
        let ticker = field(ticker_col)?.to_string();
        let close = parse_f(close_col)?;
        let features = feature_cols
            .iter()
            .map(|&c| parse_f(c))
            .collect::<Result<_>>()?;
        if rows
            .insert((date, ticker.clone()), Row { close, features })
            .is_some()
        {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate row for ({date}, {ticker})"),
            });
        }
    }

    let dates: Vec<NaiveDate> = rows
        .keys()
        .map(|(d, _)| *d)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tickers: Vec<String> = rows
        .keys()
        .map(|(_, t)| t.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let date_idx: HashMap<NaiveDate, usize> =
        dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let ticker_idx: HashMap<&str, usize> = tickers
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let nf = feature_cols.len();
    let mut close = Array2::from_elem((dates.len(), tickers.len()), f64::NAN);
    let mut features = Array3::zeros((dates.len(), tickers.len(), nf));
    let mut valid = Array2::from_elem((dates.len(), tickers.len()), false);
    for ((d, tk), row) in &rows {
        let (t, i) = (date_idx[d], ticker_idx[tk.as_str()]);
        close[[t, i]] = row.close;
        for (k, v) in row.features.iter().enumerate() {
            features[[t, i, k]] = *v;
        }
        valid[[t, i]] = true;
    }
    StockPanel::new(dates, tickers, close, features, valid)
}

/// Writes a panel in the same layout [`read_csv`] accepts; invalid cells are omitted.
pub fn write_csv<W: std::io::Write>(panel: &StockPanel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string(), "ticker".into(), "close".into()];
    header.extend((0..panel.n_features()).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for (t, date) in panel.dates.iter().enumerate() {
        for (i, ticker) in panel.tickers.iter().enumerate() {
            if !panel.valid[[t, i]] {
                continue;
            }
            let mut rec = vec![
                date.to_string(),
                ticker.clone(),
                format!("{}", panel.close[[t, i]]),
            ];
            rec.extend(
                panel
                    .features
                    .slice(s![t, i, ..])
                    .iter()
                    .map(|v| format!("{v}")),
            );
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Population z-score of `values`, or all zeros when the spread is below 1e-12.
pub(crate) fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Standardizes every feature channel within each date's valid cross-section.
pub fn normalize_features(panel: &StockPanel) -> StockPanel {
    let mut out = panel.clone();
    let (nd, nt, nf) = panel.features.dim();
    for t in 0..nd {
        let members: Vec<usize> = (0..nt).filter(|&i| panel.valid[[t, i]]).collect();
        for k in 0..nf {
            let vals: Vec<f64> = members.iter().map(|&i| panel.features[[t, i, k]]).collect();
            for (&i, z) in members.iter().zip(zscore(&vals)) {
                out.features[[t, i, k]] = z;
            }
        }
    }
    out
}

/// Parameters of the synthetic market.
///
/// Generation, all draws from one `ChaCha8Rng` stream seeded with `seed` and
/// consumed in this order:
///
/// 1. initial closes `U(10, 100)` per ticker;
/// 2. for each date `t = 1..n_dates`: a market shock `N(0, market_vol²)`, then per
///    ticker an idiosyncratic shock `N(0, idio_vol²)`; `close[t] = close[t-1]·exp(m + e)`;
/// 3. per date, ticker, channel (row-major): a standard normal noise draw;
/// 4. per cell, when `missing_rate > 0`: one `U(0,1)` draw, cell invalid if below the rate.
///
/// Channels `0..n_signal` carry `s·z(y[t]) + (1-s)·noise` where `z(y[t])` is the
/// cross-sectionally standardized next-day return and `s` is the signal
/// strength in force at `t`. The next two channels (when present) are the
/// standardized previous 1-day and 5-day returns; the rest are pure noise.
/// Features are finally z-scored per date.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_dates: usize,
    pub n_tickers: usize,
    pub n_features: usize,
    pub n_signal: usize,
    pub signal_strength: f64,
    /// From this date index on, the signal channels use `shift_strength` instead.
    pub shift_at: Option<usize>,
    pub shift_strength: f64,
    pub market_vol: f64,
    pub idio_vol: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_dates: usize, n_tickers: usize, signal_strength: f64, seed: u64) -> Self {
        Self {
            n_dates,
            n_tickers,
            n_features: 6,
            n_signal: 1,
            signal_strength,
            shift_at: None,
            shift_strength: signal_strength,
            market_vol: 0.01,
            idio_vol: 0.02,
            missing_rate: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_dates < 20 {
            return Err(Error::contract(format!(
                "n_dates must be >= 20, got {}",
                self.n_dates
            )));
        }
        if self.n_tickers < 5 {
            return Err(Error::contract(format!(
                "n_tickers must be >= 5, got {}",
                self.n_tickers
            )));
        }
        for (name, s) in [
            ("signal_strength", self.signal_strength),
            ("shift_strength", self.shift_strength),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::contract(format!(
                    "{name} must lie in [0, 1], got {s}"
                )));
            }
        }
        if self.n_signal > self.n_features || self.n_features == 0 {
            return Err(Error::contract(
                "need 1 <= n_features and n_signal <= n_features",
            ));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::contract("missing_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Business days (Mon-Fri) starting 2015-01-05.
pub fn business_days(n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = NaiveDate::from_ymd_opt(2015, 1, 5).expect("valid date");
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Seeded panel; see [`SyntheticSpec`] for the exact algorithm.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<StockPanel> {
    spec.validate()?;
    let (nd, nt, nf) = (spec.n_dates, spec.n_tickers, spec.n_features);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let mut close = Array2::zeros((nd, nt));
    for i in 0..nt {
        close[[0, i]] = rng.gen_range(10.0..100.0);
    }
    for t in 1..nd {
        let m = spec.market_vol * normal(&mut rng);
        for i in 0..nt {
            let e = spec.idio_vol * normal(&mut rng);
            close[[t, i]] = close[[t - 1, i]] * (m + e).exp();
        }
    }
    let mut noise = Array3::zeros((nd, nt, nf));
    for v in noise.iter_mut() {
        *v = normal(&mut rng);
    }
    let mut valid = Array2::from_elem((nd, nt), true);
    if spec.missing_rate > 0.0 {
        for v in valid.iter_mut() {
            *v = rng.gen::<f64>() >= spec.missing_rate;
        }
    }

    let ret = |t: usize, i: usize, back: usize| close[[t, i]] / close[[t - back, i]] - 1.0;
    let mut features = Array3::zeros((nd, nt, nf));
    for t in 0..nd {
        let strength = match spec.shift_at {
            Some(at) if t >= at => spec.shift_strength,
            _ => spec.signal_strength,
        };
        let next: Vec<f64> = if t + 1 < nd {
            zscore(&(0..nt).map(|i| ret(t + 1, i, 1)).collect::<Vec<_>>())
        } else {
            vec![0.0; nt]
        };
        let prev1 = if t >= 1 {
            zscore(&(0..nt).map(|i| ret(t, i, 1)).collect::<Vec<_>>())
        } else {
            vec![0.0; nt]
        };
        let prev5 = if t >= 5 {
            zscore(&(0..nt).map(|i| ret(t, i, 5)).collect::<Vec<_>>())
        } else {
            vec![0.0; nt]
        };
        for i in 0..nt {
            for k in 0..nf {
                let eps = noise[[t, i, k]];
                features[[t, i, k]] = if k < spec.n_signal {
                    strength * next[i] + (1.0 - strength) * eps
                } else if k == spec.n_signal {
                    prev1[i]
                } else if k == spec.n_signal + 1 {
                    prev5[i]
                } else {
                    eps
                };
            }
        }
    }
    let tickers = (0..nt).map(|i| format!("S{i:03}")).collect();
    let panel = StockPanel::new(business_days(nd), tickers, close, features, valid)?;
    Ok(normalize_features(&panel))
}

/// Inclusive calendar interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: DateRange,
    pub valid: DateRange,
    pub test: DateRange,
}

impl SplitSpec {
    /// Consecutive chronological blocks holding `train` and `valid` fractions
    /// of the dates; the test block takes the remainder.
    pub fn by_fraction(panel: &StockPanel, train: f64, valid: f64) -> Result<Self> {
        let n = panel.n_dates();
        if !(train > 0.0 && valid > 0.0 && train + valid < 1.0) {
            return Err(Error::contract(format!(
                "split fractions train={train} valid={valid} must be positive with sum < 1"
            )));
        }
        let n_train = (n as f64 * train).round() as usize;
        let n_valid = (n as f64 * valid).round() as usize;
        if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
            return Err(Error::contract(format!(
                "{n} dates cannot be split {train}/{valid}"
            )));
        }
        let d = &panel.dates;
        let range = |a: usize, b: usize| DateRange {
            start: d[a],
            end: d[b - 1],
        };
        Ok(Self {
            train: range(0, n_train),
            valid: range(n_train, n_train + n_valid),
            test: range(n_train + n_valid, n),
        })
    }

    /// Row ranges of each block within `panel`.
    pub fn index_ranges(&self, panel: &StockPanel) -> Result<[Range<usize>; 3]> {
        let parts = [
            ("train", self.train),
            ("valid", self.valid),
            ("test", self.test),
        ];
        for (name, r) in parts {
            if r.start > r.end {
                return Err(Error::contract(format!(
                    "{name} range {} > {}",
                    r.start, r.end
                )));
            }
        }
        for w in parts.windows(2) {
            if w[0].1.end >= w[1].1.start {
                return Err(Error::contract(format!(
                    "{} range (ends {}) overlaps or follows {} range (starts {})",
                    w[0].0, w[0].1.end, w[1].0, w[1].1.start
                )));
            }
        }
        let mut out: [Range<usize>; 3] = [0..0, 0..0, 0..0];
        for (slot, (name, r)) in out.iter_mut().zip(parts) {
            let lo = panel.dates.partition_point(|d| *d < r.start);
            let hi = panel.dates.partition_point(|d| *d <= r.end);
            if lo >= hi {
                return Err(Error::contract(format!(
                    "{name} range {}..={} contains no panel dates",
                    r.start, r.end
                )));
            }
            *slot = lo..hi;
        }
        Ok(out)
    }
}

/// Three chronological sub-panels. Labels computed on a sub-panel only see
/// prices inside it.
pub fn split(panel: &StockPanel, spec: &SplitSpec) -> Result<[StockPanel; 3]> {
    let [a, b, c] = spec.index_ranges(panel)?;
    Ok([
        panel.slice_dates(a),
        panel.slice_dates(b),
        panel.slice_dates(c),
    ])
}
