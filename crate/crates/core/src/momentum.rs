//! Momentum lines and their five trend levels.
//!
//! The momentum at day `T` is `close[T] - close[T-l]`; a line is the `s+1`
//! consecutive momenta ending at the anchor day. A line is classified by the
//! signs of its values, where a value inside the dead zone `[-ε, ε]` has
//! sign 0:
//!
//! | signs                                   | level          |
//! |-----------------------------------------|----------------|
//! | all `+`                                 | 3 Positive     |
//! | all `-`                                 | 1 Negative     |
//! | first nonzero `-`, last nonzero `+`     | 4 Bounce       |
//! | first nonzero `+`, last nonzero `-`     | 0 Sink         |
//! | anything else (including all zero)      | 2 Volatile     |

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{ReturnLabel, StockPanel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MomentumClass {
    Sink = 0,
    Negative = 1,
    Volatile = 2,
    Positive = 3,
    Bounce = 4,
}

impl MomentumClass {
    pub const COUNT: usize = 5;

    pub fn level(self) -> usize {
        self as usize
    }

    pub fn from_level(level: usize) -> Option<Self> {
        use MomentumClass::*;
        [Sink, Negative, Volatile, Positive, Bounce]
            .get(level)
            .copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MomentumClass::Sink => "Sink",
            MomentumClass::Negative => "Negative",
            MomentumClass::Volatile => "Volatile",
            MomentumClass::Positive => "Positive",
            MomentumClass::Bounce => "Bounce",
        }
    }
}

/// How the dead zone `ε` is chosen for a line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DeadZone {
    /// Fixed `ε` in price units.
    Absolute(f64),
    /// `ε = frac × population std` of the anchor day's momentum across valid tickers.
    CrossSectional(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentumConfig {
    /// Gap `l` in days between the two closes of one momentum value.
    pub gap: usize,
    /// Line length `s`; a line holds `s + 1` values.
    pub length: usize,
    pub dead_zone: DeadZone,
    /// The line for sample day `t` ends at `t + anchor_offset`.
    pub anchor_offset: usize,
}

impl Default for MomentumConfig {
    fn default() -> Self {
        Self {
            gap: 4,
            length: 6,
            dead_zone: DeadZone::CrossSectional(0.01),
            anchor_offset: 2,
        }
    }
}

impl MomentumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gap < 1 || self.length < 1 {
            return Err(Error::contract(format!(
                "momentum gap and length must be >= 1 (got l={}, s={})",
                self.gap, self.length
            )));
        }
        let eps = match self.dead_zone {
            DeadZone::Absolute(e) | DeadZone::CrossSectional(e) => e,
        };
        if !(eps >= 0.0) {
            return Err(Error::contract(format!(
                "dead zone must be >= 0, got {eps}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumLine {
    /// `m[T-s] ..= m[T]`, oldest first.
    pub values: Vec<f64>,
    pub anchor: usize,
}

/// `close[t] - close[t - gap]`.
pub fn momentum_value(close: &[f64], t: usize, gap: usize) -> Result<f64> {
    if t >= close.len() || t < gap {
        return Err(Error::contract(format!(
            "momentum at index {t} with gap {gap} is outside a series of length {}",
            close.len()
        )));
    }
    Ok(close[t] - close[t - gap])
}

/// Line of `length + 1` momenta ending at `anchor`.
pub fn momentum_line(close: &[f64], anchor: usize, cfg: &MomentumConfig) -> Result<MomentumLine> {
    if anchor < cfg.length + cfg.gap {
        return Err(Error::contract(format!(
            "line anchored at {anchor} needs {} days of history",
            cfg.length + cfg.gap
        )));
    }
    let values = (anchor - cfg.length..=anchor)
        .map(|t| momentum_value(close, t, cfg.gap))
        .collect::<Result<_>>()?;
    Ok(MomentumLine { values, anchor })
}

fn sign(v: f64, eps: f64) -> i8 {
    if v > eps {
        1
    } else if v < -eps {
        -1
    } else {
        0
    }
}

/// Classifies a line by its sign pattern under dead zone `eps`.
pub fn classify_line(values: &[f64], eps: f64) -> MomentumClass {
    let signs: Vec<i8> = values.iter().map(|&v| sign(v, eps)).collect();
    if !signs.is_empty() && signs.iter().all(|&s| s == 1) {
        return MomentumClass::Positive;
    }
    if !signs.is_empty() && signs.iter().all(|&s| s == -1) {
        return MomentumClass::Negative;
    }
    let first = signs.iter().find(|&&s| s != 0);
    let last = signs.iter().rev().find(|&&s| s != 0);
    match (first, last) {
        (Some(-1), Some(1)) => MomentumClass::Bounce,
        (Some(1), Some(-1)) => MomentumClass::Sink,
        _ => MomentumClass::Volatile,
    }
}

/// Level for every `(t, ticker)` whose line (anchored at `t + anchor_offset`)
/// fits in the panel and touches only valid closes; other cells are `None`.
pub fn label_dataset(
    panel: &StockPanel,
    cfg: &MomentumConfig,
) -> Result<Array2<Option<MomentumClass>>> {
    label_dataset_until(panel, cfg, panel.n_dates())
}

/// As [`label_dataset`], but no line may use a close at or after date index `end`.
pub fn label_dataset_until(
    panel: &StockPanel,
    cfg: &MomentumConfig,
    end: usize,
) -> Result<Array2<Option<MomentumClass>>> {
    cfg.validate()?;
    let (nd, nt) = (panel.n_dates(), panel.n_tickers());
    let end = end.min(nd);
    let history = cfg.length + cfg.gap;
    let mut out = Array2::from_elem((nd, nt), None);

    // Momentum per (date, ticker) where both closes are valid.
    let mom = Array2::from_shape_fn((nd, nt), |(t, i)| {
        (t >= cfg.gap && panel.valid[[t, i]] && panel.valid[[t - cfg.gap, i]])
            .then(|| panel.close[[t, i]] - panel.close[[t - cfg.gap, i]])
    });

    for t in 0..nd {
        let anchor = t + cfg.anchor_offset;
        if anchor >= end || anchor < history {
            continue;
        }
        let eps = match cfg.dead_zone {
            DeadZone::Absolute(e) => e,
            DeadZone::CrossSectional(frac) => {
                let vals: Vec<f64> = (0..nt).filter_map(|i| mom[[anchor, i]]).collect();
                frac * population_std(&vals)
            }
        };
        for i in 0..nt {
            let line: Option<Vec<f64>> = (anchor - cfg.length..=anchor)
                .map(|d| mom[[d, i]])
                .collect();
            if let Some(values) = line {
                out[[t, i]] = Some(classify_line(&values, eps));
            }
        }
    }
    Ok(out)
}

fn population_std(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Binary rise (1) / fall (0) labels; a zero return counts as a fall.
pub fn rise_fall_label(labels: &ReturnLabel) -> Array2<Option<u8>> {
    Array2::from_shape_fn(labels.y.dim(), |(t, i)| {
        labels.get(t, i).map(|y| u8::from(y > 0.0))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{business_days, compute_return};
    use ndarray::Array3;

    fn panel_from(series: &[Vec<f64>]) -> StockPanel {
        let nd = series[0].len();
        let nt = series.len();
        StockPanel::new(
            business_days(nd),
            (0..nt).map(|i| format!("T{i}")).collect(),
            Array2::from_shape_fn((nd, nt), |(t, i)| series[i][t]),
            Array3::zeros((nd, nt, 1)),
            Array2::from_elem((nd, nt), true),
        )
        .unwrap()
    }

    #[test]
    fn momentum_value_examples() {
        assert_eq!(momentum_value(&[10.; 5], 4, 4).unwrap(), 0.0);
        assert_eq!(
            momentum_value(&[10., 11., 12., 13., 14.], 4, 4).unwrap(),
            4.0
        );
        assert_eq!(
            momentum_value(&[14., 13., 12., 11., 10.], 4, 4).unwrap(),
            -4.0
        );
        assert!(momentum_value(&[1., 2.], 1, 4).is_err());
        assert!(momentum_value(&[1., 2.], 5, 1).is_err());
    }

    #[test]
    fn classify_examples() {
        assert_eq!(
            classify_line(&[-1.0, -0.5, 0.2, 1.0], 0.05),
            MomentumClass::Bounce
        );
        assert_eq!(classify_line(&[0.0; 4], 0.05), MomentumClass::Volatile);
        assert_eq!(classify_line(&[0.0; 4], 0.0), MomentumClass::Volatile);
        assert_eq!(
            classify_line(&[1.0, 2.0, 3.0, 4.0], 0.05),
            MomentumClass::Positive
        );
        assert_eq!(classify_line(&[-1.0, -2.0], 0.05), MomentumClass::Negative);
        assert_eq!(classify_line(&[1.0, 0.01, -1.0], 0.05), MomentumClass::Sink);
        assert_eq!(
            classify_line(&[1.0, -1.0, 1.0], 0.05),
            MomentumClass::Volatile
        );
    }

    #[test]
    fn line_is_oldest_first() {
        let close: Vec<f64> = (0..12).map(|t| (t * t) as f64).collect();
        let cfg = MomentumConfig {
            gap: 2,
            length: 3,
            ..Default::default()
        };
        let line = momentum_line(&close, 10, &cfg).unwrap();
        assert_eq!(line.values.len(), 4);
        assert_eq!(line.values[3], 100.0 - 64.0);
        assert_eq!(line.values[0], 49.0 - 25.0);
        assert!(momentum_line(&close, 4, &cfg).is_err());
    }

    #[test]
    fn short_panel_is_fully_masked() {
        let p = panel_from(&[vec![1.0; 10]]);
        let labels = label_dataset(&p, &MomentumConfig::default()).unwrap();
        assert!(labels.iter().all(Option::is_none));
    }

    #[test]
    fn monotone_series_label_uniformly() {
        let up: Vec<f64> = (0..40).map(|t| 10.0 + t as f64).collect();
        let down: Vec<f64> = (0..40).map(|t| 100.0 - t as f64).collect();
        let p = panel_from(&[up, down]);
        let labels = label_dataset(&p, &MomentumConfig::default()).unwrap();
        let rising: Vec<_> = labels.column(0).iter().flatten().copied().collect();
        let falling: Vec<_> = labels.column(1).iter().flatten().copied().collect();
        // Lines need s + l = 10 days of history and 2 future days.
        assert_eq!(rising.len(), 40 - 10 - 2 + 2);
        assert!(rising.iter().all(|&c| c == MomentumClass::Positive));
        assert!(falling.iter().all(|&c| c == MomentumClass::Negative));
        assert!(labels[[7, 0]].is_none() && labels[[8, 0]].is_some());
        assert!(labels[[37, 0]].is_some() && labels[[38, 0]].is_none());
    }

    #[test]
    fn until_bound_excludes_future_closes() {
        let up: Vec<f64> = (0..40).map(|t| 10.0 + t as f64).collect();
        let p = panel_from(&[up]);
        let labels = label_dataset_until(&p, &MomentumConfig::default(), 30).unwrap();
        assert!(labels[[27, 0]].is_some());
        assert!(labels[[28, 0]].is_none());
    }

    #[test]
    fn invalid_close_masks_the_lines_that_use_it() {
        let mut p = panel_from(&[(0..30).map(|t| 10.0 + t as f64).collect()]);
        p.valid[[15, 0]] = false;
        let labels = label_dataset(&p, &MomentumConfig::default()).unwrap();
        // Close 15 enters momenta at 15 and 19, which enter lines anchored at 15..=25.
        for t in 0..28 {
            let anchor = t + 2;
            let touches = (15..=25).contains(&anchor);
            if anchor >= 10 {
                assert_eq!(labels[[t, 0]].is_none(), touches, "t={t}");
            }
        }
    }

    #[test]
    fn rise_fall_examples() {
        let p = panel_from(&[vec![100.0, 110.0, 99.0, 99.0]]);
        let r = compute_return(&p).unwrap();
        let b = rise_fall_label(&r);
        assert_eq!(b[[0, 0]], Some(1));
        assert_eq!(b[[1, 0]], Some(0));
        assert_eq!(b[[2, 0]], Some(0));
        assert_eq!(b[[3, 0]], None);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MomentumConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.gap = 0;
        assert!(cfg.validate().is_err());
        cfg = MomentumConfig {
            dead_zone: DeadZone::Absolute(-1.0),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn mirror(c: MomentumClass) -> MomentumClass {
        MomentumClass::from_level(MomentumClass::COUNT - 1 - c.level()).unwrap()
    }

    proptest! {
        #[test]
        fn negation_mirrors_the_class(line in prop::collection::vec(-3.0..3.0f64, 1..12), eps in 0.0..1.0f64) {
            let neg: Vec<f64> = line.iter().map(|v| -v).collect();
            prop_assert_eq!(classify_line(&neg, eps), mirror(classify_line(&line, eps)));
        }

        #[test]
        fn dead_zone_lines_are_volatile(line in prop::collection::vec(-0.5..0.5f64, 1..12)) {
            prop_assert_eq!(classify_line(&line, 0.5), MomentumClass::Volatile);
        }
    }
}
