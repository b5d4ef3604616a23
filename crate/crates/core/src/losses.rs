//! Training objectives.
//!
//! The ranking objective is a smoothed NDCG@k: exact ranks are replaced by
//!
//! ```text
//! rank(i) = 1 + Σ_{j≠i} 1 / (1 + exp(f(i) - f(j)))
//! ```
//!
//! and the truncation depth `k` is chosen per day by accumulating whole
//! label groups from the highest level down until `k ≥ threshold`, so a
//! level is never cut in half. An item enters the smoothed DCG when its
//! smoothed rank is at most `k + 0.5`; the rank value itself stays inside the
//! log discount, which is where the gradient flows.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tensor, Var};
use crate::error::{Error, Result};

/// Gain applied to an integer relevance level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GainKind {
    /// `2^w - 1`; level 0 carries no gain.
    #[default]
    Exp2MinusOne,
    /// `2^(w - 1)`.
    Exp2Shifted,
}

impl GainKind {
    pub fn gain(self, level: usize) -> f64 {
        match self {
            GainKind::Exp2MinusOne => 2f64.powi(level as i32) - 1.0,
            GainKind::Exp2Shifted => 2f64.powi(level as i32 - 1),
        }
    }
}

/// Truncation depth rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KRule {
    /// Whole groups from the top level down until `k >= threshold`.
    Adaptive { threshold: usize },
    /// Constant depth, capped at the day's size.
    Fixed(usize),
}

/// Depth covering whole groups, `group_sizes` ordered from the highest level
/// down. A threshold of 0 is treated as 1. When every group is needed,
/// `k` is the batch size.
pub fn adaptive_k(group_sizes: &[usize], threshold: usize) -> Result<usize> {
    let n: usize = group_sizes.iter().sum();
    if n == 0 {
        return Err(Error::contract("adaptive k on an empty batch"));
    }
    let threshold = threshold.max(1);
    let mut k = 0;
    for &size in group_sizes {
        k += size;
        if k >= threshold {
            return Ok(k);
        }
    }
    Ok(n)
}

/// One day's ranking problem: the relevance level of every item and the
/// depth `k` derived from the level groups.
#[derive(Clone, Debug, PartialEq)]
pub struct RankBatch {
    pub levels: Vec<usize>,
    /// `group_sizes[j]` = number of items at level `j`.
    pub group_sizes: Vec<usize>,
    pub k: usize,
    pub gain: GainKind,
}

impl RankBatch {
    pub fn new(levels: Vec<usize>, n_levels: usize, rule: KRule, gain: GainKind) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::contract("rank batch needs at least one item"));
        }
        let mut group_sizes = vec![0; n_levels];
        for &l in &levels {
            *group_sizes
                .get_mut(l)
                .ok_or_else(|| Error::contract(format!("level {l} outside 0..{n_levels}")))? += 1;
        }
        let k = match rule {
            KRule::Adaptive { threshold } => {
                let desc: Vec<usize> = group_sizes.iter().rev().copied().collect();
                adaptive_k(&desc, threshold)?
            }
            KRule::Fixed(k) => k.clamp(1, levels.len()),
        };
        Ok(Self {
            levels,
            group_sizes,
            k,
            gain,
        })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    fn gains(&self) -> Vec<f64> {
        self.levels.iter().map(|&l| self.gain.gain(l)).collect()
    }

    /// DCG@k of the gain-sorted order (stable for ties).
    pub fn ideal_dcg(&self) -> f64 {
        let mut g = self.gains();
        g.sort_by(|a, b| b.total_cmp(a));
        g.iter()
            .take(self.k)
            .enumerate()
            .map(|(pos, gain)| gain / (2.0 + pos as f64).log2())
            .sum()
    }
}

/// Threshold for adaptive k: `ceil(frac × pool_size)`, at least 1.
pub fn threshold_for(pool_size: usize, frac: f64) -> usize {
    ((frac * pool_size as f64).ceil() as usize).max(1)
}

/// Smoothed ranks of an `n×1` score column.
pub fn approx_rank<'g>(scores: Var<'g>) -> Result<Var<'g>> {
    let (n, c) = scores.shape();
    if c != 1 {
        return Err(Error::Shape {
            op: "approx_rank",
            lhs: (n, c),
            rhs: (n, 1),
        });
    }
    // diff[i][j] = f(i) - f(j); indicator = sigmoid(-diff). The diagonal
    // contributes exactly 0.5, so rank = 1 + rowsum - 0.5.
    let diff = scores.sub(scores.transpose())?;
    Ok(diff.neg().sigmoid().row_sums().shift(0.5))
}

/// Smoothed ranks as plain numbers.
pub fn approx_rank_values(scores: &[f64]) -> Vec<f64> {
    let g = crate::diffcore::Graph::new();
    let s = g.constant(Tensor::column(scores.to_vec()));
    approx_rank(s).expect("column input").value().into_vec()
}

/// DCG over items whose rank is at most `k + 0.5`.
pub fn dcg_at_k(ranks: &[f64], levels: &[usize], k: usize, gain: GainKind) -> f64 {
    ranks
        .iter()
        .zip(levels)
        .filter(|(&r, _)| r <= k as f64 + 0.5)
        .map(|(&r, &l)| gain.gain(l) / (1.0 + r).log2())
        .sum()
}

/// Smoothed NDCG@k of `scores` against the batch levels. Defined as 1 (a
/// constant, so no gradient) when the day carries no ranking information:
/// the ideal DCG is zero or every item has the same level.
pub fn approx_ndcg_at_k<'g>(scores: Var<'g>, batch: &RankBatch) -> Result<Var<'g>> {
    let g = scores.graph();
    if scores.shape() != (batch.len(), 1) {
        return Err(Error::Shape {
            op: "approx_ndcg_at_k",
            lhs: scores.shape(),
            rhs: (batch.len(), 1),
        });
    }
    let ideal = batch.ideal_dcg();
    let uniform = batch.levels.iter().all(|&l| l == batch.levels[0]);
    if ideal <= 0.0 || uniform {
        return Ok(g.scalar(1.0));
    }
    let ranks = approx_rank(scores)?;
    let cutoff = batch.k as f64 + 0.5;
    let inside: Vec<bool> = ranks.value().data().iter().map(|&r| r <= cutoff).collect();
    let gains = g.constant(Tensor::column(batch.gains()));
    let discount = ranks.shift(1.0).log().scale(1.0 / std::f64::consts::LN_2);
    let dcg = gains.div(discount)?.mask(&inside)?.sum();
    Ok(dcg.scale(1.0 / ideal))
}

/// `exp(-NDCG)`, in `[e^-1, 1]` for NDCG in `[0, 1]`.
pub fn ndcg_loss<'g>(scores: Var<'g>, batch: &RankBatch) -> Result<Var<'g>> {
    Ok(approx_ndcg_at_k(scores, batch)?.neg().exp())
}

fn log_softmax<'g>(logits: Var<'g>) -> Result<Var<'g>> {
    // Shifting by a detached row max leaves the value and gradient unchanged.
    let g = logits.graph();
    let shift = g.constant(logits.row_max().value());
    let z = logits.sub(shift)?;
    let lse = z.exp().row_sums().log();
    z.sub(lse)
}

pub fn softmax<'g>(logits: Var<'g>) -> Result<Var<'g>> {
    Ok(log_softmax(logits)?.exp())
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Vec<bool>> {
    let mut out = vec![false; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::contract(format!("label {l} outside 0..{classes}")));
        }
        out[r * classes + l] = true;
    }
    Ok(out)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{} labels for {n} rows of logits",
            labels.len()
        )));
    }
    let picked = log_softmax(logits)?.mask(&one_hot(labels, c)?)?;
    Ok(picked.row_sums().mean().neg())
}

/// `Σ_c c·softmax(logits)_c` per row, an `n×1` score.
pub fn expected_level<'g>(logits: Var<'g>) -> Result<Var<'g>> {
    let (_, c) = logits.shape();
    let levels = logits
        .graph()
        .constant(Tensor::column((0..c).map(|l| l as f64).collect()));
    softmax(logits)?.matmul(levels)
}

pub fn mse_loss<'g>(pred: Var<'g>, y: &[f64]) -> Result<Var<'g>> {
    let (n, c) = pred.shape();
    if c != 1 || n != y.len() {
        return Err(Error::contract(format!(
            "mse needs matching lengths, got prediction {:?} and {} targets",
            (n, c),
            y.len()
        )));
    }
    let target = pred.graph().constant(Tensor::column(y.to_vec()));
    Ok(pred.sub(target)?.powf(2.0).mean())
}

/// Hinge on every discordant pair: `Σ_{i<j} max(0, -(f_i - f_j)(y_i - y_j)) / n²`.
pub fn pairwise_loss<'g>(scores: Var<'g>, y: &[f64]) -> Result<Var<'g>> {
    let n = y.len();
    if n < 2 || scores.shape() != (n, 1) {
        return Err(Error::contract(format!(
            "pairwise loss needs n >= 2 matching scores, got {:?} and {n} labels",
            scores.shape()
        )));
    }
    let g = scores.graph();
    let dy = Tensor::from_vec(n, n, (0..n * n).map(|k| y[k / n] - y[k % n]).collect())?;
    let neg_prod = scores.sub(scores.transpose())?.mul(g.constant(dy))?.neg();
    let active: Vec<bool> = neg_prod
        .value()
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| k / n < k % n && v > 0.0)
        .collect();
    Ok(neg_prod.mask(&active)?.sum().scale(1.0 / (n * n) as f64))
}

/// Which list-wise term accompanies cross-entropy in the classification loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankObjective {
    #[default]
    ApproxNdcg,
    /// Pairwise hinge against the class levels.
    Pairwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLossConfig {
    pub ce_weight: f64,
    pub rank_weight: f64,
    pub objective: RankObjective,
}

impl Default for ClassLossConfig {
    fn default() -> Self {
        Self {
            ce_weight: 0.5,
            rank_weight: 0.5,
            objective: RankObjective::ApproxNdcg,
        }
    }
}

/// `ce_weight·CE(logits, labels) + rank_weight·rank_term(scores)`.
///
/// `scores` defaults to the expected level of the logits.
pub fn classification_loss<'g>(
    logits: Var<'g>,
    labels: &[usize],
    batch: &RankBatch,
    scores: Option<Var<'g>>,
    cfg: &ClassLossConfig,
) -> Result<Var<'g>> {
    let ce = cross_entropy(logits, labels)?.scale(cfg.ce_weight);
    let scores = match scores {
        Some(s) => s,
        None => expected_level(logits)?,
    };
    let rank = match cfg.objective {
        RankObjective::ApproxNdcg => ndcg_loss(scores, batch)?,
        RankObjective::Pairwise => {
            let y: Vec<f64> = batch.levels.iter().map(|&l| l as f64).collect();
            pairwise_loss(scores, &y)?
        }
    };
    ce.add(rank.scale(cfg.rank_weight))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{check_gradient, Graph};

    fn col<'g>(g: &'g Graph, v: &[f64]) -> Var<'g> {
        g.param(Tensor::column(v.to_vec()))
    }

    #[test]
    fn approx_rank_examples() {
        assert_eq!(approx_rank_values(&[1.0, 1.0]), vec![1.5, 1.5]);
        let r = approx_rank_values(&[10.0, 0.0, -10.0]);
        let expect = 1.0 + 1.0 / (1.0 + 10f64.exp()) + 1.0 / (1.0 + 20f64.exp());
        assert!((r[0] - expect).abs() < 1e-15);
        assert!((r[0] - 1.000_045_4).abs() < 1e-7);
        let sum: f64 = approx_rank_values(&[0.3, -2.0, 5.0, 0.1]).iter().sum();
        assert!((sum - 10.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_k_examples() {
        assert_eq!(adaptive_k(&[10, 30, 0, 0, 0], 20).unwrap(), 40);
        assert_eq!(adaptive_k(&[25, 0, 0, 0, 0], 20).unwrap(), 25);
        assert_eq!(adaptive_k(&[0, 0, 5, 0, 0], 1).unwrap(), 5);
        assert_eq!(adaptive_k(&[0, 0, 5, 0, 0], 0).unwrap(), 5);
        assert_eq!(adaptive_k(&[1, 1, 1, 1, 1], 100).unwrap(), 5);
        assert!(adaptive_k(&[0; 5], 3).is_err());
    }

    #[test]
    fn rank_batch_groups_and_threshold() {
        let b = RankBatch::new(
            vec![4, 4, 3, 0, 2, 3],
            5,
            KRule::Adaptive { threshold: 3 },
            GainKind::default(),
        )
        .unwrap();
        assert_eq!(b.group_sizes, vec![1, 0, 1, 2, 2]);
        assert_eq!(b.k, 4);
        assert!(RankBatch::new(vec![5], 5, KRule::Fixed(1), GainKind::default()).is_err());
        let f = RankBatch::new(vec![1, 0, 1], 5, KRule::Fixed(50), GainKind::default()).unwrap();
        assert_eq!(f.k, 3);
        assert_eq!(threshold_for(50, 0.2), 10);
        assert_eq!(threshold_for(7, 0.2), 2);
        assert_eq!(threshold_for(0, 0.2), 1);
    }

    #[test]
    fn dcg_examples() {
        assert_eq!(dcg_at_k(&[1.0], &[0], 1, GainKind::Exp2MinusOne), 0.0);
        let ideal = dcg_at_k(&[1.0, 2.0, 3.0], &[2, 1, 0], 3, GainKind::Exp2MinusOne);
        assert!((ideal - (3.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((ideal - 3.63093).abs() < 1e-5);
        assert_eq!(GainKind::Exp2Shifted.gain(0), 0.5);
        assert_eq!(GainKind::Exp2Shifted.gain(3), 4.0);
    }

    #[test]
    fn ndcg_ideal_and_degenerate_cases() {
        let g = Graph::new();
        let b = RankBatch::new(
            vec![4, 3, 2, 1, 0],
            5,
            KRule::Adaptive { threshold: 5 },
            GainKind::default(),
        )
        .unwrap();
        let ideal = approx_ndcg_at_k(col(&g, &[40.0, 30.0, 20.0, 10.0, 0.0]), &b)
            .unwrap()
            .item();
        assert!((0.99..=1.0).contains(&ideal), "{ideal}");

        let flat = RankBatch::new(
            vec![2; 4],
            5,
            KRule::Adaptive { threshold: 1 },
            GainKind::default(),
        )
        .unwrap();
        let v = approx_ndcg_at_k(col(&g, &[0.3, -1.0, 2.0, 0.0]), &flat)
            .unwrap()
            .item();
        assert!((v - 1.0).abs() < 1e-12, "{v}");

        let zero = RankBatch::new(
            vec![0; 4],
            5,
            KRule::Adaptive { threshold: 1 },
            GainKind::default(),
        )
        .unwrap();
        let s = col(&g, &[0.3, -1.0, 2.0, 0.0]);
        let v = approx_ndcg_at_k(s, &zero).unwrap();
        assert_eq!(v.item(), 1.0);
        assert_eq!(g.backward(v).unwrap().get(s).data(), &[0.0; 4]);
    }

    #[test]
    fn ndcg_loss_range_and_monotonicity() {
        let g = Graph::new();
        let b = RankBatch::new(
            vec![4, 3, 2, 1, 0],
            5,
            KRule::Adaptive { threshold: 5 },
            GainKind::default(),
        )
        .unwrap();
        let good = ndcg_loss(col(&g, &[40.0, 30.0, 20.0, 10.0, 0.0]), &b)
            .unwrap()
            .item();
        let bad = ndcg_loss(col(&g, &[0.0, 10.0, 20.0, 30.0, 40.0]), &b)
            .unwrap()
            .item();
        assert!((good - (-1f64).exp()).abs() < 0.01);
        assert!(good < bad && bad <= 1.0);
        let n1 = g.scalar(1.0).neg().exp().item();
        let n0 = g.scalar(0.0).neg().exp().item();
        assert!((n1 - 0.367_879).abs() < 1e-6 && n0 == 1.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::new();
        let uniform = g.param(Tensor::zeros(3, 5));
        let ce = cross_entropy(uniform, &[0, 2, 4]).unwrap().item();
        assert!((ce - 5f64.ln()).abs() < 1e-12);
        let mut confident = Tensor::full(2, 5, -200.0);
        confident.set(0, 1, 200.0);
        confident.set(1, 3, 200.0);
        let ce = cross_entropy(g.param(confident), &[1, 3]).unwrap().item();
        assert!(ce.abs() < 1e-12);
        assert!(cross_entropy(g.param(Tensor::zeros(1, 5)), &[5]).is_err());
    }

    #[test]
    fn classification_loss_examples() {
        let g = Graph::new();
        let labels = [4, 3, 2, 1, 0];
        let mut logits = Tensor::full(5, 5, -300.0);
        for (r, &l) in labels.iter().enumerate() {
            logits.set(r, l, 300.0);
        }
        let b = RankBatch::new(
            labels.to_vec(),
            5,
            KRule::Adaptive { threshold: 1 },
            GainKind::default(),
        )
        .unwrap();
        let cfg = ClassLossConfig::default();
        let logits = g.param(logits);
        // Expected levels are exactly 4,3,2,1,0 (gap 1), so the smoothed NDCG
        // stays below 1; compare against the same term computed separately.
        let loss = classification_loss(logits, &labels, &b, None, &cfg)
            .unwrap()
            .item();
        let ndcg_term = ndcg_loss(expected_level(logits).unwrap(), &b)
            .unwrap()
            .item();
        assert!((loss - 0.5 * ndcg_term).abs() < 1e-12);
        // With large-gap external scores the ideal order gives 0.5·e^-1.
        let wide = col(&g, &[400.0, 300.0, 200.0, 100.0, 0.0]);
        let loss = classification_loss(logits, &labels, &b, Some(wide), &cfg)
            .unwrap()
            .item();
        assert!((loss - 0.5 * (-1f64).exp()).abs() < 1e-9);
        assert!((loss - 0.18394).abs() < 1e-5);

        let uniform = g.param(Tensor::zeros(5, 5));
        let loss = classification_loss(uniform, &labels, &b, None, &cfg)
            .unwrap()
            .item();
        let rank = ndcg_loss(expected_level(uniform).unwrap(), &b)
            .unwrap()
            .item();
        assert!((loss - 0.5 * 5f64.ln() - 0.5 * rank).abs() < 1e-12);
        assert!((0.5 * 5f64.ln() - 0.80472).abs() < 1e-5);
    }

    #[test]
    fn mse_examples() {
        let g = Graph::new();
        assert_eq!(
            mse_loss(col(&g, &[1.0, 2.0]), &[1.0, 2.0]).unwrap().item(),
            0.0
        );
        let v = mse_loss(col(&g, &[1.5, 2.5, -0.5]), &[1.0, 2.0, -1.0])
            .unwrap()
            .item();
        assert!((v - 0.25).abs() < 1e-15);
        assert!(mse_loss(col(&g, &[1.0]), &[1.0, 2.0]).is_err());
        let p = col(&g, &[1.0, 4.0]);
        let grad = g
            .backward(mse_loss(p, &[0.0, 0.0]).unwrap())
            .unwrap()
            .get(p);
        assert_eq!(grad.data(), &[1.0, 4.0]);
    }

    #[test]
    fn pairwise_examples() {
        let g = Graph::new();
        let y = [0.3, 0.1, -0.2];
        assert_eq!(
            pairwise_loss(col(&g, &[3.0, 2.0, 1.0]), &y).unwrap().item(),
            0.0
        );
        let v = pairwise_loss(col(&g, &[0.0, 1.0]), &[1.0, 0.0])
            .unwrap()
            .item();
        assert!((v - 0.25).abs() < 1e-15);
        let s = [0.4, -1.0, 2.0];
        let a = pairwise_loss(col(&g, &s), &y).unwrap().item();
        let doubled: Vec<f64> = s.iter().map(|v| v * 2.0).collect();
        let b = pairwise_loss(col(&g, &doubled), &y).unwrap().item();
        assert!(a > 0.0 && (b - 2.0 * a).abs() < 1e-15);
        assert!(pairwise_loss(col(&g, &[1.0]), &[1.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let b = RankBatch::new(
            vec![4, 0, 2, 3, 1, 2],
            5,
            KRule::Adaptive { threshold: 2 },
            GainKind::default(),
        )
        .unwrap();
        let p = [0.3, -0.7, 1.1, 0.05, -1.4, 0.6];
        let err = check_gradient(|_, x| ndcg_loss(x, &b), &p, 1e-6).unwrap();
        assert!(err < 1e-4, "ndcg {err}");
        let err = check_gradient(
            |_, x| pairwise_loss(x, &[0.1, 0.5, -0.2, 0.3, 0.0, -1.0]),
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "pairwise {err}");
        let logits: Vec<f64> = (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let b3 = RankBatch::new(
            vec![4, 1, 2],
            5,
            KRule::Adaptive { threshold: 1 },
            GainKind::default(),
        )
        .unwrap();
        let err = check_gradient(
            |g, x| {
                let l = x.transpose();
                let m = reshape_rows(g, l, 3)?;
                classification_loss(m, &[4, 1, 2], &b3, None, &ClassLossConfig::default())
            },
            &logits,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "classification {err}");
    }

    /// `1×(r·c)` row into an `r×c` matrix via selector matmuls.
    fn reshape_rows<'g>(g: &'g Graph, row: Var<'g>, r: usize) -> Result<Var<'g>> {
        let n = row.shape().1;
        let c = n / r;
        let mut out: Option<Var<'g>> = None;
        for i in 0..r {
            let mut sel = Tensor::zeros(n, c);
            for j in 0..c {
                sel.set(i * c + j, j, 1.0);
            }
            let mut put = Tensor::zeros(r, 1);
            put.set(i, 0, 1.0);
            let piece = g.constant(put).matmul(row.matmul(g.constant(sel))?)?;
            out = Some(match out {
                None => piece,
                Some(acc) => acc.add(piece)?,
            });
        }
        Ok(out.expect("r >= 1"))
    }
}
