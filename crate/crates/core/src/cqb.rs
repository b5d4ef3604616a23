//! Multi-task trainer with converge-based gradient balancing.
//!
//! Each iteration is one trading day. The shared trunk receives a single
//! combined gradient built from both tasks' log-loss gradients: each is
//! smoothed by an EMA whose forgetting rate follows the task's relative
//! converge rate, then both are rescaled to the larger norm and summed. The
//! heads step on their own task's log-loss gradient. Weight decay is decoupled
//! and shrinks as the tasks generalise.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, ParamGroup};
use crate::dataset::DayBatch;
use crate::diffcore::{sigmoid, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, expected_level, mse_loss, threshold_for, ClassLossConfig, GainKind, KRule,
    RankBatch,
};
use crate::metrics::{daily_ic, daily_rank_ic};

/// Added to a loss before taking its log.
pub const LOG_EPS: f64 = 1e-8;
/// Norms at or below this are treated as zero when balancing.
pub const NORM_FLOOR: f64 = 1e-12;
/// Converge rates are clamped to `[-V_CLAMP, V_CLAMP]`.
pub const V_CLAMP: f64 = 5.0;

/// Gradients of `log(loss + 1e-8)` with respect to `params`.
pub fn log_grad<'g>(loss: Var<'g>, params: &[Var<'g>]) -> Result<Vec<Tensor>> {
    let l = loss.item();
    if !l.is_finite() {
        return Err(Error::Numeric(format!("loss is {l}")));
    }
    let grads = loss.graph().backward(loss.shift(LOG_EPS).log())?;
    Ok(params.iter().map(|&p| grads.get(p)).collect())
}

/// `beta·prev + (1 - beta)·g`; with no history the EMA starts at `g`.
pub fn ema_update(prev: Option<&[f64]>, g: &[f64], beta: f64) -> Vec<f64> {
    match prev {
        None => g.to_vec(),
        Some(p) => p
            .iter()
            .zip(g)
            .map(|(a, b)| beta * a + (1.0 - beta) * b)
            .collect(),
    }
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The two rescaled task gradients: each direction stretched to
/// `max(|gr|, |gc|)`. A side with norm at or below 1e-12 becomes zero.
pub fn balance_components(gr: &[f64], gc: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(gr.len(), gc.len(), "task gradients differ in length");
    let (nr, nc) = (l2(gr), l2(gc));
    let top = nr.max(nc);
    let scale = |n: f64| if n > NORM_FLOOR { top / n } else { 0.0 };
    let (sr, sc) = (scale(nr), scale(nc));
    (
        gr.iter().map(|a| sr * a).collect(),
        gc.iter().map(|b| sc * b).collect(),
    )
}

/// `max(|gr|, |gc|)·(gr/|gr| + gc/|gc|)`. A zero-norm side contributes
/// nothing; two zero sides give the zero vector.
pub fn balance_and_aggregate(gr: &[f64], gc: &[f64]) -> Vec<f64> {
    let (a, b) = balance_components(gr, gc);
    a.iter().zip(&b).map(|(x, y)| x + y).collect()
}

/// Relative converge rate for the epoch following `train`/`valid` history.
///
/// With `n = history + 1`, each split's change is its latest loss minus the
/// mean of epochs `max(1, n-2b) ..= n-b-1` (1-based). Before `2b` epochs of
/// history the rate is 1. The train change is floored at 1e-8 in magnitude,
/// keeping its sign, and the result is clamped to [-5, 5].
pub fn converge_rate(train: &[f64], valid: &[f64], b: usize) -> f64 {
    let n = train.len().min(valid.len()) + 1;
    if b == 0 || n < 2 * b {
        return 1.0;
    }
    let lo = (n.saturating_sub(2 * b)).max(1);
    let hi = n - b - 1;
    if hi < lo {
        return 1.0;
    }
    let delta = |h: &[f64]| {
        let window = &h[lo - 1..hi];
        h[n - 2] - window.iter().sum::<f64>() / window.len() as f64
    };
    let dv = delta(valid);
    let mut dt = delta(train);
    if dt.abs() < 1e-8 {
        dt = if dt < 0.0 { -1e-8 } else { 1e-8 };
    }
    (dv / dt).clamp(-V_CLAMP, V_CLAMP)
}

/// `beta^sigmoid(v)`.
pub fn beta_n(beta: f64, v: f64) -> f64 {
    beta.powf(sigmoid(v))
}

/// `decay·sigmoid(-(v_r + v_c)/2)`.
pub fn decay_n(decay: f64, v_r: f64, v_c: f64) -> f64 {
    decay * sigmoid(-0.5 * (v_r + v_c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Log-gradients, adaptive EMA, norm balancing, adaptive decay.
    Full,
    /// Plain joint training on `L_r + L_c` with constant decay.
    EqualWeight,
    /// Regression only; the classification head is never updated.
    SingleTask,
    /// As `Full` with the forgetting rate held at `beta`.
    FixedBeta,
    /// As `Full` with the decay held at `decay`.
    FixedDecay,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::EqualWeight => "ew",
            TrainMode::SingleTask => "stl",
            TrainMode::FixedBeta => "fixed_beta",
            TrainMode::FixedDecay => "fixed_decay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            TrainMode::Full,
            TrainMode::EqualWeight,
            TrainMode::SingleTask,
            TrainMode::FixedBeta,
            TrainMode::FixedDecay,
        ]
        .into_iter()
        .find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam moments with decoupled weight decay.
    AdamW,
    /// Plain gradient step with decoupled weight decay.
    Sgd,
}

/// How each day's ranking depth is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DepthRule {
    /// Adaptive k with threshold `ceil(frac · n)`.
    AdaptiveFraction(f64),
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub beta: f64,
    pub decay: f64,
    /// Converge-rate averaging window.
    pub b: usize,
    pub patience: usize,
    pub mode: TrainMode,
    pub optimizer: OptimizerKind,
    pub depth: DepthRule,
    pub gain: GainKind,
    pub class_loss: ClassLossConfig,
    /// Shuffle the day order each epoch.
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 100,
            beta: 0.5,
            decay: 1e-3,
            b: 6,
            patience: 30,
            mode: TrainMode::Full,
            optimizer: OptimizerKind::AdamW,
            depth: DepthRule::AdaptiveFraction(0.2),
            gain: GainKind::default(),
            class_loss: ClassLossConfig::default(),
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config(
                "beta",
                format!("must lie in (0, 1), got {}", self.beta),
            ));
        }
        if !(self.decay >= 0.0) || !self.decay.is_finite() {
            return Err(Error::config(
                "decay",
                format!("must be >= 0, got {}", self.decay),
            ));
        }
        if self.b == 0 {
            return Err(Error::config("b", "must be >= 1"));
        }
        match self.depth {
            DepthRule::AdaptiveFraction(f) if !(f > 0.0 && f <= 1.0) => Err(Error::config(
                "threshold",
                format!("fraction must lie in (0, 1], got {f}"),
            )),
            DepthRule::Fixed(0) => Err(Error::config("fixed_k", "must be >= 1")),
            _ => Ok(()),
        }
    }

    pub fn rank_batch(&self, levels: &[usize], n_classes: usize) -> Result<RankBatch> {
        let rule = match self.depth {
            DepthRule::AdaptiveFraction(f) => KRule::Adaptive {
                threshold: threshold_for(levels.len(), f),
            },
            DepthRule::Fixed(k) => KRule::Fixed(k),
        };
        RankBatch::new(levels.to_vec(), n_classes, rule, self.gain)
    }
}

/// Per-task loss histories and the balancing state carried across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct GradState {
    pub beta: f64,
    pub b: usize,
    pub ema_r: Option<Vec<f64>>,
    pub ema_c: Option<Vec<f64>>,
    pub v_r: f64,
    pub v_c: f64,
    pub train_r: Vec<f64>,
    pub train_c: Vec<f64>,
    pub valid_r: Vec<f64>,
    pub valid_c: Vec<f64>,
}

impl GradState {
    pub fn new(beta: f64, b: usize) -> Self {
        Self {
            beta,
            b,
            ema_r: None,
            ema_c: None,
            v_r: 1.0,
            v_c: 1.0,
            train_r: Vec::new(),
            train_c: Vec::new(),
            valid_r: Vec::new(),
            valid_c: Vec::new(),
        }
    }

    /// Appends one epoch of mean losses and refreshes both converge rates.
    pub fn record_epoch(&mut self, train: (f64, f64), valid: (f64, f64)) {
        self.train_r.push(train.0);
        self.train_c.push(train.1);
        self.valid_r.push(valid.0);
        self.valid_c.push(valid.1);
        self.v_r = converge_rate(&self.train_r, &self.valid_r, self.b);
        self.v_c = converge_rate(&self.train_c, &self.valid_c, self.b);
    }
}

/// First-order optimizer over a parameter list, decay decoupled from the
/// gradient: `p ← p - lr·decay·p - lr·step(g)`.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &BackboneParams) -> Self {
        let zeros: Vec<Tensor> = params
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            kind,
            lr,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Updates the parameters whose gradient is `Some`.
    pub fn step(&mut self, params: &mut BackboneParams, grads: &[Option<Tensor>], decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_B1.powi(self.t);
        let bc2 = 1.0 - ADAM_B2.powi(self.t);
        for (k, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.params[k].value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.iter_mut().zip(g.data()) {
                        *w -= self.lr * (decay * *w + gi);
                    }
                }
                OptimizerKind::AdamW => {
                    let m = self.m[k].data_mut();
                    let v = self.v[k].data_mut();
                    for (j, (w, gi)) in p.iter_mut().zip(g.data()).enumerate() {
                        m[j] = ADAM_B1 * m[j] + (1.0 - ADAM_B1) * gi;
                        v[j] = ADAM_B2 * v[j] + (1.0 - ADAM_B2) * gi * gi;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        *w -= self.lr * (decay * *w + mh / (vh.sqrt() + ADAM_EPS));
                    }
                }
            }
        }
    }
}

/// One split's epoch-end evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitEval {
    pub loss_r: f64,
    pub loss_c: f64,
    /// Mean daily IC / RankIC of the return head against raw returns.
    pub ic_r: f64,
    pub rank_ic_r: f64,
    /// Same, scoring by the classification head's expected level.
    pub ic_c: f64,
    pub rank_ic_c: f64,
}

/// One line of the epoch log. `v`, `beta` and `decay` are the values that
/// drove the epoch's updates; `beta` is NaN where no EMA is kept.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: &'static str,
    pub task: &'static str,
    pub loss: f64,
    pub v: f64,
    pub beta: f64,
    pub decay: f64,
    pub ic: f64,
    pub rank_ic: f64,
}

pub const EPOCH_LOG_HEADER: [&str; 9] = [
    "epoch", "split", "task", "loss", "V", "beta", "decay", "ic", "rank_ic",
];

pub fn write_epoch_log<W: std::io::Write>(rows: &[EpochRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(EPOCH_LOG_HEADER)?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            r.split.to_string(),
            r.task.to_string(),
            r.loss.to_string(),
            r.v.to_string(),
            r.beta.to_string(),
            r.decay.to_string(),
            r.ic.to_string(),
            r.rank_ic.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("epoch log", e))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters from the epoch with the best validation IC.
    pub params: BackboneParams,
    pub best_epoch: usize,
    pub best_valid_ic: f64,
    pub epochs_run: usize,
    pub log: Vec<EpochRow>,
    pub state: GradState,
    /// Ranking depth used on each training day.
    pub ks: Vec<usize>,
}

/// Regression-head scores for each day.
pub fn predict_days(params: &BackboneParams, days: &[DayBatch]) -> Result<Vec<Vec<f64>>> {
    days.iter()
        .map(|d| Ok(params.predict(&d.features)?.0))
        .collect()
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v.flatten() {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean losses and correlations over `days` with `params` held fixed.
pub fn evaluate_split(
    params: &BackboneParams,
    days: &[DayBatch],
    batches: &[RankBatch],
    cfg: &TrainConfig,
) -> Result<SplitEval> {
    if days.is_empty() {
        return Err(Error::contract("evaluating an empty split"));
    }
    let (mut lr, mut lc) = (0.0, 0.0);
    let mut scores_r = Vec::with_capacity(days.len());
    let mut scores_c = Vec::with_capacity(days.len());
    for (day, batch) in days.iter().zip(batches) {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = params
            .params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect();
        let out = params.forward(&g, &vars, &day.features)?;
        lr += mse_loss(out.pred_return, &day.target)?.item();
        lc += classification_loss(out.class_logits, &day.levels, batch, None, &cfg.class_loss)?
            .item();
        scores_r.push(out.pred_return.value().into_vec());
        scores_c.push(expected_level(out.class_logits)?.value().into_vec());
    }
    let n = days.len() as f64;
    let corr = |scores: &[Vec<f64>], f: fn(&[f64], &[f64]) -> Option<f64>| {
        mean_defined(scores.iter().zip(days).map(|(s, d)| f(s, &d.returns)))
    };
    Ok(SplitEval {
        loss_r: lr / n,
        loss_c: lc / n,
        ic_r: corr(&scores_r, daily_ic),
        rank_ic_r: corr(&scores_r, daily_rank_ic),
        ic_c: corr(&scores_c, daily_ic),
        rank_ic_c: corr(&scores_c, daily_rank_ic),
    })
}

fn flatten(grads: &[Tensor], idx: &[usize]) -> Vec<f64> {
    idx.iter()
        .flat_map(|&i| grads[i].data().iter().copied())
        .collect()
}

fn scatter(flat: &[f64], like: &BackboneParams, idx: &[usize], out: &mut [Option<Tensor>]) {
    let mut off = 0;
    for &i in idx {
        let (r, c) = like.params[i].value.shape();
        out[i] = Some(Tensor::from_vec(r, c, flat[off..off + r * c].to_vec()).expect("sized"));
        off += r * c;
    }
}

fn training_error(epoch: usize, iteration: usize, e: Error) -> Error {
    Error::Training {
        epoch,
        iteration,
        msg: e.to_string(),
    }
}

/// Trains `init` on `train`, early-stopping on the validation IC of the
/// return head, and returns the best parameters with the epoch log.
pub fn fit(
    init: BackboneParams,
    train: &[DayBatch],
    valid: &[DayBatch],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::contract(format!(
            "training needs non-empty splits (train {} days, valid {} days)",
            train.len(),
            valid.len()
        )));
    }
    let n_classes = init.arch.classes;
    let train_batches: Vec<RankBatch> = train
        .iter()
        .map(|d| cfg.rank_batch(&d.levels, n_classes))
        .collect::<Result<_>>()?;
    let valid_batches: Vec<RankBatch> = valid
        .iter()
        .map(|d| cfg.rank_batch(&d.levels, n_classes))
        .collect::<Result<_>>()?;
    let ks = train_batches.iter().map(|b| b.k).collect();

    let shared = init.indices(ParamGroup::Shared);
    let head_r = init.indices(ParamGroup::RegressionHead);
    let head_c = init.indices(ParamGroup::ClassificationHead);
    let mut params = init;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &params);
    let mut state = GradState::new(cfg.beta, cfg.b);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY);
    let mut stale = 0;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let (v_r, v_c) = (state.v_r, state.v_c);
        let (beta_r, beta_c) = match cfg.mode {
            TrainMode::Full | TrainMode::FixedDecay => {
                (beta_n(cfg.beta, v_r), beta_n(cfg.beta, v_c))
            }
            TrainMode::FixedBeta => (cfg.beta, cfg.beta),
            TrainMode::EqualWeight | TrainMode::SingleTask => (f64::NAN, f64::NAN),
        };
        let decay = match cfg.mode {
            TrainMode::Full | TrainMode::FixedBeta => decay_n(cfg.decay, v_r, v_c),
            _ => cfg.decay,
        };
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for (iteration, &d) in order.iter().enumerate() {
            let day = &train[d];
            let g = Graph::new();
            let vars = params.bind(&g);
            let out = params
                .forward(&g, &vars, &day.features)
                .map_err(|e| training_error(epoch, iteration, e))?;
            let loss_r = mse_loss(out.pred_return, &day.target)?;
            let loss_c = classification_loss(
                out.class_logits,
                &day.levels,
                &train_batches[d],
                None,
                &cfg.class_loss,
            )?;
            for (task, l) in [("regression", loss_r), ("classification", loss_c)] {
                if !l.item().is_finite() {
                    return Err(training_error(
                        epoch,
                        iteration,
                        Error::Numeric(format!("{task} loss is {}", l.item())),
                    ));
                }
            }
            let mut grads: Vec<Option<Tensor>> = vec![None; params.params.len()];
            match cfg.mode {
                TrainMode::EqualWeight => {
                    let all = g.backward(loss_r.add(loss_c)?)?;
                    for (k, v) in vars.iter().enumerate() {
                        grads[k] = Some(all.get(*v));
                    }
                }
                TrainMode::SingleTask => {
                    let gr = log_grad(loss_r, &vars)?;
                    for &k in shared.iter().chain(&head_r) {
                        grads[k] = Some(gr[k].clone());
                    }
                }
                _ => {
                    let gr = log_grad(loss_r, &vars)?;
                    let gc = log_grad(loss_c, &vars)?;
                    let ema_r = ema_update(state.ema_r.as_deref(), &flatten(&gr, &shared), beta_r);
                    let ema_c = ema_update(state.ema_c.as_deref(), &flatten(&gc, &shared), beta_c);
                    let combined = balance_and_aggregate(&ema_r, &ema_c);
                    scatter(&combined, &params, &shared, &mut grads);
                    state.ema_r = Some(ema_r);
                    state.ema_c = Some(ema_c);
                    for &k in &head_r {
                        grads[k] = Some(gr[k].clone());
                    }
                    for &k in &head_c {
                        grads[k] = Some(gc[k].clone());
                    }
                }
            }
            opt.step(&mut params, &grads, decay);
        }

        let tr = evaluate_split(&params, train, &train_batches, cfg)
            .map_err(|e| training_error(epoch, 0, e))?;
        let va = evaluate_split(&params, valid, &valid_batches, cfg)
            .map_err(|e| training_error(epoch, 0, e))?;
        if !(tr.loss_r.is_finite()
            && tr.loss_c.is_finite()
            && va.loss_r.is_finite()
            && va.loss_c.is_finite())
        {
            return Err(training_error(
                epoch,
                train.len(),
                Error::Numeric("epoch loss is not finite".into()),
            ));
        }
        for (split, ev) in [("train", &tr), ("valid", &va)] {
            log.push(EpochRow {
                epoch,
                split,
                task: "regression",
                loss: ev.loss_r,
                v: v_r,
                beta: beta_r,
                decay,
                ic: ev.ic_r,
                rank_ic: ev.rank_ic_r,
            });
            log.push(EpochRow {
                epoch,
                split,
                task: "classification",
                loss: ev.loss_c,
                v: v_c,
                beta: beta_c,
                decay,
                ic: ev.ic_c,
                rank_ic: ev.rank_ic_c,
            });
        }
        state.record_epoch((tr.loss_r, tr.loss_c), (va.loss_r, va.loss_c));

        if va.ic_r > best.2 {
            best = (params.clone(), epoch, va.ic_r);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(FitResult {
        params: best.0,
        best_epoch: best.1,
        best_valid_ic: best.2,
        epochs_run,
        log,
        state,
        ks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ArchSpec;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::dataset::{build_days, ClassTask, DatasetConfig};

    #[test]
    fn log_grad_examples() {
        let g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 0.0]));
        let w = g.constant(Tensor::row(vec![2.0, 0.0]));
        // L = 2·x0 at x0 = 1·0.5 → L=1, dL/dx = (2, 0)
        let loss = x.mul(w).unwrap().sum().scale(0.5);
        let gl = log_grad(loss, &[x]).unwrap();
        assert!((gl[0].data()[0] - 1.0).abs() < 1e-8);
        assert_eq!(gl[0].data()[1], 0.0);

        // L = 0: the epsilon guard turns a unit gradient into 1e8.
        let g = Graph::new();
        let z = g.param(Tensor::scalar(3.0));
        let gl = log_grad(z.shift(-3.0), &[z]).unwrap();
        assert!((gl[0].item() - 1e8).abs() < 1e-6);
    }

    #[test]
    fn log_grad_rejects_non_finite_loss() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(f64::INFINITY));
        assert!(log_grad(x, &[x]).is_err());
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_update(Some(&[2.0]), &[0.0], 0.5), vec![1.0]);
        assert_eq!(ema_update(None, &[3.0, 4.0], 0.5), vec![3.0, 4.0]);
        assert_eq!(ema_update(Some(&[2.0]), &[0.0], 1.0), vec![2.0]);
        assert_eq!(ema_update(Some(&[2.0]), &[5.0], 0.0), vec![5.0]);
    }

    #[test]
    fn balance_examples() {
        let g = [1.0, -2.0, 0.5];
        let out = balance_and_aggregate(&g, &g);
        for (o, x) in out.iter().zip(&g) {
            assert!((o - 2.0 * x).abs() < 1e-12);
        }
        assert_eq!(
            balance_and_aggregate(&[3.0, 4.0], &[0.0, 1.0]),
            vec![3.0, 9.0]
        );
        let c = balance_and_aggregate(&[1.0, 0.0], &[-1.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
        assert_eq!(
            balance_and_aggregate(&[0.0, 0.0], &[0.0, 0.0]),
            vec![0.0, 0.0]
        );
        assert_eq!(
            balance_and_aggregate(&[0.0, 0.0], &[0.0, 2.0]),
            vec![0.0, 2.0]
        );
    }

    #[test]
    fn converge_rate_examples() {
        let flat = vec![1.0; 4];
        assert_eq!(converge_rate(&flat, &flat, 6), 1.0);
        // 12 epochs of history with b = 6 → n = 13, window epochs 1..=6.
        let mut train = vec![1.0; 11];
        let mut valid = vec![1.0; 11];
        train.push(0.8);
        valid.push(0.9);
        assert!((converge_rate(&train, &valid, 6) - 0.5).abs() < 1e-12);
        let mut valid_up = vec![1.0; 11];
        valid_up.push(1.1);
        assert!((converge_rate(&train, &valid_up, 6) + 0.5).abs() < 1e-12);
        // Flat training loss: floor keeps the sign and the clamp bounds V.
        let mut v2 = vec![1.0; 11];
        v2.push(0.5);
        assert_eq!(converge_rate(&[1.0; 12], &v2, 6), -5.0);
    }

    #[test]
    fn beta_and_decay_examples() {
        assert!((beta_n(0.5, 0.0) - 0.5f64.sqrt()).abs() < 1e-12);
        let s1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((beta_n(0.5, 1.0) - 0.5f64.powf(s1)).abs() < 1e-15);
        assert!((beta_n(0.5, 1.0) - 0.602_462).abs() < 1e-6);
        assert!(beta_n(0.5, -40.0) > 0.999_999);
        assert_eq!(decay_n(1e-3, 0.0, 0.0), 5e-4);
        assert!(decay_n(1e-3, 50.0, 50.0) < 1e-20);
        assert!((decay_n(1e-3, -50.0, -50.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("lr"));
        let bad = TrainConfig {
            beta: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("beta"));
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let arch = ArchSpec::mlp(1, 1, vec![1], 2);
        let mut p = BackboneParams::init(&arch, 0).unwrap();
        let before = p.params[0].value.item();
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.1, &p);
        let mut grads = vec![None; p.params.len()];
        grads[0] = Some(Tensor::scalar(3.0));
        opt.step(&mut p, &grads, 0.0);
        assert!((p.params[0].value.item() - (before - 0.1)).abs() < 1e-9);
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, 0.1, &p);
        let w = p.params[0].value.item();
        sgd.step(&mut p, &grads, 0.5);
        assert!((p.params[0].value.item() - (w - 0.1 * (0.5 * w + 3.0))).abs() < 1e-15);
    }

    fn small_setup(task: ClassTask) -> (BackboneParams, Vec<DayBatch>, Vec<DayBatch>) {
        let panel = gen_synthetic(&SyntheticSpec::new(80, 12, 0.9, 4)).unwrap();
        let dc = DatasetConfig { window: 3, task };
        let train = build_days(&panel, 0..55, &dc).unwrap();
        let valid = build_days(&panel, 55..80, &dc).unwrap();
        let arch = ArchSpec::mlp(panel.n_features(), 3, vec![8], dc.task.n_classes());
        (BackboneParams::init(&arch, 1).unwrap(), train, valid)
    }

    #[test]
    fn fit_runs_every_mode_and_logs_four_rows_per_epoch() {
        for mode in [
            TrainMode::Full,
            TrainMode::EqualWeight,
            TrainMode::SingleTask,
            TrainMode::FixedBeta,
            TrainMode::FixedDecay,
        ] {
            let (p, tr, va) = small_setup(ClassTask::RiseFall);
            let cfg = TrainConfig {
                epochs: 3,
                lr: 1e-2,
                mode,
                ..Default::default()
            };
            let res = fit(p.clone(), &tr, &va, &cfg).unwrap();
            assert_eq!(res.log.len(), 12, "{mode:?}");
            assert_eq!(res.ks.len(), tr.len());
            if mode == TrainMode::SingleTask {
                for k in res.params.indices(ParamGroup::ClassificationHead) {
                    assert_eq!(res.params.params[k].value, p.params[k].value);
                }
            }
        }
    }

    #[test]
    fn fit_is_deterministic_and_learns_a_strong_signal() {
        let (p, tr, va) = small_setup(ClassTask::Momentum(Default::default()));
        let cfg = TrainConfig {
            epochs: 15,
            lr: 5e-3,
            ..Default::default()
        };
        let a = fit(p.clone(), &tr, &va, &cfg).unwrap();
        let b = fit(p, &tr, &va, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert!(a.best_valid_ic > 0.3, "valid IC {}", a.best_valid_ic);
    }

    #[test]
    fn patience_stops_early() {
        let (p, tr, va) = small_setup(ClassTask::RiseFall);
        let cfg = TrainConfig {
            epochs: 50,
            lr: 1e-300,
            patience: 2,
            ..Default::default()
        };
        let res = fit(p, &tr, &va, &cfg).unwrap();
        assert!(res.epochs_run < 50);
    }

    #[test]
    fn divergence_reports_epoch_and_iteration() {
        let (p, tr, va) = small_setup(ClassTask::RiseFall);
        let cfg = TrainConfig {
            epochs: 5,
            lr: 1e300,
            optimizer: OptimizerKind::Sgd,
            mode: TrainMode::EqualWeight,
            ..Default::default()
        };
        match fit(p, &tr, &va, &cfg) {
            Err(Error::Training { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected a training error, got {other:?}"),
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn beta_n_stays_between_beta_and_one(beta in 0.01..0.99f64, v in -V_CLAMP..V_CLAMP) {
            let b = beta_n(beta, v);
            prop_assert!(b > beta && b < 1.0);
        }

        #[test]
        fn decay_n_stays_below_decay(decay in 1e-6..1.0f64, vr in -V_CLAMP..V_CLAMP, vc in -V_CLAMP..V_CLAMP) {
            let d = decay_n(decay, vr, vc);
            prop_assert!(d > 0.0 && d < decay);
        }

        #[test]
        fn balanced_sides_share_the_larger_norm(
            gr in prop::collection::vec(-100.0..100.0f64, 1..30),
            k in 1e-3..1e3f64,
        ) {
            let gc: Vec<f64> = gr.iter().rev().map(|v| k * v + 0.5).collect();
            let (a, b) = balance_components(&gr, &gc);
            let top = l2(&gr).max(l2(&gc));
            if l2(&gr) > NORM_FLOOR && l2(&gc) > NORM_FLOOR {
                prop_assert!((l2(&a) - top).abs() <= 1e-9 * top.max(1.0));
                prop_assert!((l2(&b) - top).abs() <= 1e-9 * top.max(1.0));
            }
        }

        #[test]
        fn converge_rate_is_clamped(
            train in prop::collection::vec(0.0..10.0f64, 0..40),
            valid in prop::collection::vec(0.0..10.0f64, 0..40),
            b in 1usize..8,
        ) {
            let v = converge_rate(&train, &valid, b);
            prop_assert!((-V_CLAMP..=V_CLAMP).contains(&v));
        }
    }
}
