//! Flat `key = value` experiment configuration.
//!
//! Every key has a default; a config file and `key=value` overrides are
//! applied on top, in that order. The fully resolved key list is written at
//! the head of every artifact so a result can be re-run from its own file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backbone::{ArchSpec, TrunkKind};
use crate::cqb::{DepthRule, OptimizerKind, TrainConfig, TrainMode};
use crate::data::SyntheticSpec;
use crate::dataset::{ClassTask, DatasetConfig};
use crate::error::{Error, Result};
use crate::losses::{ClassLossConfig, GainKind, RankObjective};
use crate::momentum::{DeadZone, MomentumConfig};

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "data",
        "synthetic",
        "`synthetic` or a path to a long-format CSV",
    ),
    ("synthetic.dates", "250", "trading days"),
    ("synthetic.tickers", "50", "stocks"),
    ("synthetic.features", "6", "channels per day"),
    ("synthetic.signal", "0.6", "signal strength in [0, 1]"),
    (
        "synthetic.shift_at",
        "none",
        "date index where the signal strength changes, or `none`",
    ),
    (
        "synthetic.shift_signal",
        "0.6",
        "signal strength from `shift_at` on",
    ),
    ("synthetic.missing", "0", "fraction of cells marked missing"),
    (
        "split.train",
        "0.6",
        "fraction of dates in the training block",
    ),
    (
        "split.valid",
        "0.2",
        "fraction of dates in the validation block",
    ),
    ("window", "20", "days of features per sample"),
    (
        "task",
        "momentum",
        "`momentum` (5 classes) or `rise_fall` (2 classes)",
    ),
    (
        "momentum.l",
        "4",
        "gap between the closes of one momentum value",
    ),
    ("momentum.s", "6", "momentum line length"),
    ("momentum.eps", "0.01", "dead zone"),
    (
        "momentum.eps_mode",
        "cross_sectional",
        "`cross_sectional` (fraction of the anchor-day std) or `absolute`",
    ),
    (
        "momentum.anchor_offset",
        "2",
        "days from the sample to the line's last value",
    ),
    (
        "loss.threshold",
        "0.2",
        "adaptive-k threshold as a fraction of the day's stocks",
    ),
    ("loss.k", "adaptive", "`adaptive` or a fixed depth"),
    (
        "loss.gain",
        "exp2_minus_one",
        "`exp2_minus_one` or `exp2_shifted`",
    ),
    ("loss.ce_weight", "0.5", "cross-entropy weight"),
    ("loss.rank_weight", "0.5", "ranking term weight"),
    ("loss.objective", "ndcg", "`ndcg` or `pairwise`"),
    ("model.trunk", "mlp", "`mlp` or `rnn`"),
    ("model.hidden", "64,64", "comma-separated trunk widths"),
    (
        "train.mode",
        "full",
        "`full`, `ew`, `stl`, `fixed_beta` or `fixed_decay`",
    ),
    ("train.optimizer", "adamw", "`adamw` or `sgd`"),
    ("train.lr", "2e-4", "learning rate"),
    ("train.epochs", "100", "maximum epochs"),
    ("train.beta", "0.5", "initial forgetting rate"),
    ("train.decay", "1e-3", "initial weight decay"),
    ("train.b", "6", "converge-rate window"),
    (
        "train.patience",
        "30",
        "epochs without validation improvement before stopping",
    ),
    ("train.shuffle", "true", "shuffle training days each epoch"),
    (
        "seed",
        "0",
        "drives data generation, initialisation and shuffling",
    ),
    ("eval.precision", "1,5,10,20,50", "N values for precision@N"),
    ("backtest.n", "50", "stocks held per day"),
    ("backtest.cost_bps", "0", "one-way cost in basis points"),
];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split_train: f64,
    pub split_valid: f64,
    pub dataset: DatasetConfig,
    pub trunk: TrunkKind,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub seed: u64,
    pub precision_ns: Vec<usize>,
    pub backtest_n: usize,
    pub cost_bps: f64,
    resolved: BTreeMap<String, String>,
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = &map[key];
    raw.parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}")))
}

fn parse_list(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
    map[key]
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| Error::config(key, format!("cannot parse `{}`: {e}", s.trim())))
        })
        .collect()
}

fn choice<T: Copy>(map: &BTreeMap<String, String>, key: &str, options: &[(&str, T)]) -> Result<T> {
    let raw = map[key].as_str();
    options
        .iter()
        .find(|(n, _)| *n == raw)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::config(key, format!("`{raw}` is not one of {}", names.join(", ")))
        })
}

fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, msg))
    }
}

impl ExperimentConfig {
    pub fn defaults() -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|(k, v, _)| (k.to_string(), v.to_string()))
            .collect()
    }

    /// Applies `text` (config file syntax) on top of `map`.
    pub fn apply_text(map: &mut BTreeMap<String, String>, text: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", no + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), no + 1) {
                return Err(Error::config(
                    k,
                    format!("set twice (lines {prev} and {})", no + 1),
                ));
            }
            Self::apply_one(map, k, v.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(map: &mut BTreeMap<String, String>, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv, "override must look like `key=value`"))?;
        Self::apply_one(map, k.trim(), v.trim())
    }

    fn apply_one(map: &mut BTreeMap<String, String>, key: &str, value: &str) -> Result<()> {
        match map.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::config(key, "unknown key")),
        }
    }

    /// Defaults, then the file at `path` (if any), then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut map = Self::defaults();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Self::apply_text(&mut map, &text)?;
        }
        for o in overrides {
            Self::apply_override(&mut map, o)?;
        }
        Self::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        for k in map.keys() {
            if !KEYS.iter().any(|(name, _, _)| name == k) {
                return Err(Error::config(k.as_str(), "unknown key"));
            }
        }
        let mut full = Self::defaults();
        full.extend(map);
        let map = full;
        let seed: u64 = parse(&map, "seed")?;

        let data = if map["data"] == "synthetic" {
            let shift_at = match map["synthetic.shift_at"].as_str() {
                "none" => None,
                _ => Some(parse(&map, "synthetic.shift_at")?),
            };
            let mut s = SyntheticSpec::new(
                parse(&map, "synthetic.dates")?,
                parse(&map, "synthetic.tickers")?,
                parse(&map, "synthetic.signal")?,
                seed,
            );
            s.n_features = parse(&map, "synthetic.features")?;
            s.shift_at = shift_at;
            s.shift_strength = if shift_at.is_some() {
                parse(&map, "synthetic.shift_signal")?
            } else {
                s.signal_strength
            };
            s.missing_rate = parse(&map, "synthetic.missing")?;
            check(s.n_dates >= 20, "synthetic.dates", "must be >= 20")?;
            check(s.n_tickers >= 5, "synthetic.tickers", "must be >= 5")?;
            check(s.n_features >= 1, "synthetic.features", "must be >= 1")?;
            check(
                (0.0..=1.0).contains(&s.signal_strength),
                "synthetic.signal",
                "must lie in [0, 1]",
            )?;
            check(
                (0.0..=1.0).contains(&s.shift_strength),
                "synthetic.shift_signal",
                "must lie in [0, 1]",
            )?;
            check(
                (0.0..1.0).contains(&s.missing_rate),
                "synthetic.missing",
                "must lie in [0, 1)",
            )?;
            DataSource::Synthetic(s)
        } else {
            DataSource::Csv(PathBuf::from(&map["data"]))
        };

        let split_train: f64 = parse(&map, "split.train")?;
        let split_valid: f64 = parse(&map, "split.valid")?;
        check(
            split_train > 0.0 && split_train < 1.0,
            "split.train",
            "must lie in (0, 1)",
        )?;
        check(
            split_valid > 0.0 && split_train + split_valid < 1.0,
            "split.valid",
            "must be > 0 with split.train + split.valid < 1",
        )?;

        let eps: f64 = parse(&map, "momentum.eps")?;
        check(eps >= 0.0, "momentum.eps", "must be >= 0")?;
        let momentum = MomentumConfig {
            gap: parse(&map, "momentum.l")?,
            length: parse(&map, "momentum.s")?,
            dead_zone: choice(
                &map,
                "momentum.eps_mode",
                &[
                    ("cross_sectional", DeadZone::CrossSectional(eps)),
                    ("absolute", DeadZone::Absolute(eps)),
                ],
            )?,
            anchor_offset: parse(&map, "momentum.anchor_offset")?,
        };
        check(momentum.gap >= 1, "momentum.l", "must be >= 1")?;
        check(momentum.length >= 1, "momentum.s", "must be >= 1")?;
        let task = match map["task"].as_str() {
            "momentum" => ClassTask::Momentum(momentum),
            "rise_fall" => ClassTask::RiseFall,
            other => {
                return Err(Error::config(
                    "task",
                    format!("`{other}` is not one of momentum, rise_fall"),
                ))
            }
        };
        let window: usize = parse(&map, "window")?;
        check(window >= 1, "window", "must be >= 1")?;

        let hidden = parse_list(&map, "model.hidden")?;
        check(
            !hidden.is_empty() && hidden.iter().all(|&h| h > 0),
            "model.hidden",
            "widths must be >= 1",
        )?;

        let depth = match map["loss.k"].as_str() {
            "adaptive" => DepthRule::AdaptiveFraction(parse(&map, "loss.threshold")?),
            _ => DepthRule::Fixed(parse(&map, "loss.k")?),
        };
        let train = TrainConfig {
            lr: parse(&map, "train.lr")?,
            epochs: parse(&map, "train.epochs")?,
            beta: parse(&map, "train.beta")?,
            decay: parse(&map, "train.decay")?,
            b: parse(&map, "train.b")?,
            patience: parse(&map, "train.patience")?,
            mode: TrainMode::parse(&map["train.mode"]).ok_or_else(|| {
                Error::config(
                    "train.mode",
                    format!(
                        "`{}` is not one of full, ew, stl, fixed_beta, fixed_decay",
                        map["train.mode"]
                    ),
                )
            })?,
            optimizer: choice(
                &map,
                "train.optimizer",
                &[("adamw", OptimizerKind::AdamW), ("sgd", OptimizerKind::Sgd)],
            )?,
            depth,
            gain: choice(
                &map,
                "loss.gain",
                &[
                    ("exp2_minus_one", GainKind::Exp2MinusOne),
                    ("exp2_shifted", GainKind::Exp2Shifted),
                ],
            )?,
            class_loss: ClassLossConfig {
                ce_weight: parse(&map, "loss.ce_weight")?,
                rank_weight: parse(&map, "loss.rank_weight")?,
                objective: choice(
                    &map,
                    "loss.objective",
                    &[
                        ("ndcg", RankObjective::ApproxNdcg),
                        ("pairwise", RankObjective::Pairwise),
                    ],
                )?,
            },
            shuffle: parse(&map, "train.shuffle")?,
            seed: seed.wrapping_add(2),
        };
        // Map TrainConfig's own field names back to config keys.
        train.validate().map_err(|e| match e {
            Error::Config { field, msg } => {
                let key = match field.as_str() {
                    "threshold" => "loss.threshold".to_string(),
                    "fixed_k" => "loss.k".to_string(),
                    f => format!("train.{f}"),
                };
                Error::config(key, msg)
            }
            other => other,
        })?;
        for key in ["loss.ce_weight", "loss.rank_weight"] {
            let w: f64 = parse(&map, key)?;
            check(w >= 0.0 && w.is_finite(), key, "must be >= 0")?;
        }

        let precision_ns = parse_list(&map, "eval.precision")?;
        check(
            precision_ns.iter().all(|&n| n >= 1),
            "eval.precision",
            "values must be >= 1",
        )?;
        let backtest_n: usize = parse(&map, "backtest.n")?;
        check(backtest_n >= 1, "backtest.n", "must be >= 1")?;
        let cost_bps: f64 = parse(&map, "backtest.cost_bps")?;
        check(
            cost_bps >= 0.0 && cost_bps.is_finite(),
            "backtest.cost_bps",
            "must be >= 0",
        )?;

        Ok(Self {
            data,
            split_train,
            split_valid,
            dataset: DatasetConfig { window, task },
            trunk: choice(
                &map,
                "model.trunk",
                &[("mlp", TrunkKind::Mlp), ("rnn", TrunkKind::Rnn)],
            )?,
            hidden,
            train,
            seed,
            precision_ns,
            backtest_n,
            cost_bps,
            resolved: map,
        })
    }

    pub fn arch(&self, features: usize) -> ArchSpec {
        ArchSpec {
            trunk: self.trunk,
            features,
            window: self.dataset.window,
            hidden: self.hidden.clone(),
            classes: self.dataset.task.n_classes(),
        }
    }

    /// Seed for parameter initialisation.
    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    /// A copy with `key` set to `value`, re-validated.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut map = self.resolved.clone();
        Self::apply_one(&mut map, key, value)?;
        Self::from_map(map)
    }

    /// The resolved config in file syntax.
    pub fn to_text(&self) -> String {
        self.resolved
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// `# `-prefixed provenance lines for CSV and text artifacts.
    pub fn provenance_header(&self) -> String {
        let mut s = String::from("# stockrank resolved config\n");
        for (k, v) in &self.resolved {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        s
    }
}
