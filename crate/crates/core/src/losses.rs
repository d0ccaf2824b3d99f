//! Retrieval (InfoNCE with easy and hard negatives) and ranking (pointwise
//! plus pairwise) objectives.
//!
//! The free functions return summed losses over a batch. The `*_tape`
//! variants record the same quantities averaged per token, which is what the
//! optimizer consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sigmoid, logsumexp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub tau: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, tau: 0.085, lambda: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.tau > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("loss weights out of range: {self:?}")));
        }
        Ok(())
    }
}

fn sim(a: &[f64], b: &[f64]) -> Result<f64> {
    crate::decoder::dot(a, b)
}

/// `-log softmax` of the positive among `[positive, negatives...]` with
/// dot-product similarities scaled by `1/tau`.
pub fn infonce(h: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let pos = sim(h, positive)? / tau;
    let mut logits = vec![pos];
    for n in negatives {
        logits.push(sim(h, n)? / tau);
    }
    Ok(logsumexp(&logits) - pos)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalExample {
    pub h: Vec<f64>,
    pub positive: Vec<f64>,
    pub easy: Vec<Vec<f64>>,
    pub hard: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalBatch {
    pub examples: Vec<RetrievalExample>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RetrievalLoss {
    pub easy: f64,
    pub hard: f64,
    pub total: f64,
    /// Tokens without impressed negatives; they only enter the easy term.
    pub skipped_hard: usize,
}

pub fn retrieval_loss(batch: &RetrievalBatch, w: &LossWeights) -> Result<RetrievalLoss> {
    let mut out = RetrievalLoss::default();
    for ex in &batch.examples {
        out.easy += infonce(&ex.h, &ex.positive, &ex.easy, w.tau)?;
        if ex.hard.is_empty() {
            out.skipped_hard += 1;
        } else {
            out.hard += infonce(&ex.h, &ex.positive, &ex.hard, w.tau)?;
        }
    }
    if out.skipped_hard > 0 {
        log::debug!("{} retrieval tokens had no hard negatives", out.skipped_hard);
    }
    out.total = w.alpha * out.easy + (1.0 - w.alpha) * out.hard;
    Ok(out)
}

/// Binary cross-entropy on a raw logit.
pub fn pointwise_bce(s: f64, y: bool) -> f64 {
    if y {
        -log_sigmoid(s)
    } else {
        -log_sigmoid(-s)
    }
}

/// `sum -log sigmoid(s_pos - s_neg)` over `(pos, neg)` index pairs.
pub fn pairwise_loss(pairs: &[(usize, usize)], logits: &[f64]) -> f64 {
    pairs.iter().map(|&(i, j)| -log_sigmoid(logits[i] - logits[j])).sum()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankBatch {
    pub logits: Vec<f64>,
    pub labels: Vec<bool>,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RankingLoss {
    pub point: f64,
    pub pair: f64,
    pub total: f64,
}

pub fn ranking_loss(batch: &RankBatch, w: &LossWeights) -> Result<RankingLoss> {
    if batch.logits.len() != batch.labels.len() {
        return Err(Error::shape("ranking_loss", format!("{} logits, {} labels", batch.logits.len(), batch.labels.len())));
    }
    if batch.pairs.iter().any(|&(i, j)| i >= batch.logits.len() || j >= batch.logits.len()) {
        return Err(Error::shape("ranking_loss", "pair index out of range"));
    }
    let point = batch.logits.iter().zip(&batch.labels).map(|(&s, &y)| pointwise_bce(s, y)).sum();
    let pair = pairwise_loss(&batch.pairs, &batch.logits);
    Ok(RankingLoss { point, pair, total: point + w.lambda * pair })
}

pub fn total_loss(retrieval: f64, ranking: f64) -> f64 {
    retrieval + ranking
}

/// Per-token InfoNCE averaged over rows of `scores` (`[rows x candidates]`,
/// raw dot products). `candidates[r]` lists column indices with the positive
/// first. Rows with no negatives are skipped; returns `None` if none remain.
pub fn infonce_tape(tape: &mut Tape, scores: Var, candidates: &[Vec<usize>], tau: f64) -> Result<Option<Var>> {
    let mut picks = Vec::new();
    let mut pos = Vec::new();
    let mut segments = Vec::new();
    for (r, cols) in candidates.iter().enumerate() {
        if cols.len() < 2 {
            continue;
        }
        segments.push((picks.len(), cols.len()));
        pos.push((r, cols[0]));
        picks.extend(cols.iter().map(|&c| (r, c)));
    }
    if segments.is_empty() {
        return Ok(None);
    }
    let scaled = tape.scale(scores, 1.0 / tau)?;
    let all = tape.gather_entries(scaled, &picks)?;
    let lse = tape.segment_logsumexp(all, &segments)?;
    let p = tape.gather_entries(scaled, &pos)?;
    let per = tape.sub(lse, p)?;
    let s = tape.sum(per)?;
    Ok(Some(tape.scale(s, 1.0 / segments.len() as f64)?))
}

/// Mean binary cross-entropy of a `[n x 1]` logit column.
pub fn pointwise_tape(tape: &mut Tape, logits: Var, labels: &[bool]) -> Result<Option<Var>> {
    if labels.is_empty() {
        return Ok(None);
    }
    let signs: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { -1.0 }).collect();
    let signs = tape.constant(Tensor::matrix(labels.len(), 1, signs)?)?;
    let z = tape.mul(logits, signs)?;
    let ls = tape.log_sigmoid(z)?;
    let s = tape.sum(ls)?;
    Ok(Some(tape.scale(s, -1.0 / labels.len() as f64)?))
}

/// Mean pairwise logistic loss over `(pos, neg)` rows of a logit column.
pub fn pairwise_tape(tape: &mut Tape, logits: Var, pairs: &[(usize, usize)]) -> Result<Option<Var>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let pos: Vec<(usize, usize)> = pairs.iter().map(|&(i, _)| (i, 0)).collect();
    let neg: Vec<(usize, usize)> = pairs.iter().map(|&(_, j)| (j, 0)).collect();
    let a = tape.gather_entries(logits, &pos)?;
    let b = tape.gather_entries(logits, &neg)?;
    let d = tape.sub(a, b)?;
    let ls = tape.log_sigmoid(d)?;
    let s = tape.sum(ls)?;
    Ok(Some(tape.scale(s, -1.0 / pairs.len() as f64)?))
}

/// Mean-normalized loss components of one batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub easy: Option<Var>,
    pub hard: Option<Var>,
    pub point: Option<Var>,
    pub pair: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub rel_easy: f64,
    pub rel_hard: f64,
    pub point: f64,
    pub pair: f64,
}

impl LossTerms {
    /// `alpha*easy + (1-alpha)*hard + point + lambda*pair`, skipping absent terms.
    pub fn combine(&self, tape: &mut Tape, w: &LossWeights) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for (term, weight) in [(self.easy, w.alpha), (self.hard, 1.0 - w.alpha), (self.point, 1.0), (self.pair, w.lambda)] {
            if let Some(t) = term {
                let t = tape.scale(t, weight)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, t)?,
                    None => t,
                });
            }
        }
        Ok(acc)
    }

    pub fn values(&self, tape: &Tape, total: Option<Var>) -> LossValues {
        let v = |t: Option<Var>| t.map_or(0.0, |t| tape.value(t).item());
        LossValues {
            total: v(total),
            rel_easy: v(self.easy),
            rel_hard: v(self.hard),
            point: v(self.point),
            pair: v(self.pair),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sigmoid, ParamId};
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn uniform_similarities_give_log_n_plus_one() {
        let h = vec![0.0, 0.0];
        let e = vec![1.0, 2.0];
        let negs = vec![vec![3.0, -1.0]; 3];
        assert!((infonce(&h, &e, &negs, 0.085).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((4f64.ln() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn saturated_positive_vanishes() {
        let h = vec![1.0];
        let l = infonce(&h, &[3.0], &[vec![0.0], vec![-1.0]], 0.1).unwrap();
        assert!(l < 1e-8);
    }

    #[test]
    fn empty_negatives_error() {
        assert!(matches!(infonce(&[1.0], &[1.0], &[], 1.0), Err(Error::EmptyNegatives)));
    }

    #[test]
    fn infonce_matches_direct_formula() {
        let h = [0.3, -0.2, 0.5];
        let pos = [0.1, 0.4, -0.3];
        let negs: Vec<Vec<f64>> = vec![
            vec![0.2, 0.2, 0.2],
            vec![-0.5, 0.1, 0.0],
            vec![0.9, -0.4, 0.3],
            vec![0.0, 0.0, 1.0],
            vec![-0.1, -0.7, 0.2],
        ];
        let tau = 0.5;
        let d = |a: &[f64]| h.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() / tau;
        let num = d(&pos).exp();
        let den = num + negs.iter().map(|n| d(n).exp()).sum::<f64>();
        let direct = -(num / den).ln();
        assert!((infonce(&h, &pos, &negs, tau).unwrap() - direct).abs() < 1e-12);
    }

    fn batch() -> RetrievalBatch {
        RetrievalBatch {
            examples: vec![
                RetrievalExample {
                    h: vec![1.0, 0.5],
                    positive: vec![0.2, 0.1],
                    easy: vec![vec![0.0, 0.3], vec![0.5, -0.5]],
                    hard: vec![vec![0.1, 0.1]],
                },
                RetrievalExample { h: vec![-0.3, 0.2], positive: vec![0.4, 0.4], easy: vec![vec![0.1, 0.0]], hard: vec![] },
            ],
        }
    }

    #[test]
    fn alpha_boundaries_and_mix() {
        let b = batch();
        let w = |alpha| LossWeights { alpha, tau: 0.2, lambda: 1.0 };
        let easy = retrieval_loss(&b, &w(1.0)).unwrap();
        let hard = retrieval_loss(&b, &w(0.0)).unwrap();
        assert_eq!(easy.total, easy.easy);
        assert_eq!(hard.total, hard.hard);
        assert_eq!(hard.skipped_hard, 1);
        let mixed = retrieval_loss(&b, &w(0.1)).unwrap();
        let e0 = infonce(&b.examples[0].h, &b.examples[0].positive, &b.examples[0].easy, 0.2).unwrap();
        let e1 = infonce(&b.examples[1].h, &b.examples[1].positive, &b.examples[1].easy, 0.2).unwrap();
        let h0 = infonce(&b.examples[0].h, &b.examples[0].positive, &b.examples[0].hard, 0.2).unwrap();
        assert!((mixed.total - (0.1 * (e0 + e1) + 0.9 * h0)).abs() < 1e-12);
    }

    #[test]
    fn bce_closed_forms() {
        assert!((pointwise_bce(0.0, true) - LN2).abs() < 1e-12);
        assert!((pointwise_bce(0.0, false) - LN2).abs() < 1e-12);
        for s in [50.0, -50.0, 1e3, -1e3] {
            assert!(pointwise_bce(s, true).is_finite() && pointwise_bce(s, false).is_finite());
        }
        assert!((pointwise_bce(-50.0, true) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_closed_forms() {
        assert!((pairwise_loss(&[(0, 1)], &[0.7, 0.7]) - LN2).abs() < 1e-12);
        assert!((pairwise_loss(&[(0, 1), (0, 2)], &[1.0, 1.0, 1.0]) - 2.0 * LN2).abs() < 1e-12);
        let v = pairwise_loss(&[(0, 1)], &[20.0, 0.0]);
        assert!((v - 2.061_153_6e-9).abs() < 1e-15);
        assert!(pairwise_loss(&[(1, 0)], &[2.0, 1.0]) > pairwise_loss(&[(0, 1)], &[2.0, 1.0]));
        assert_eq!(pairwise_loss(&[], &[1.0]), 0.0);
    }

    #[test]
    fn ranking_composites() {
        let b = RankBatch { logits: vec![0.0], labels: vec![true], pairs: vec![] };
        assert!((ranking_loss(&b, &LossWeights::default()).unwrap().total - LN2).abs() < 1e-12);
        let b = RankBatch { logits: vec![1.2, -0.3, 0.4], labels: vec![true, false, false], pairs: vec![(0, 1), (0, 2)] };
        let w0 = LossWeights { lambda: 0.0, ..LossWeights::default() };
        let r0 = ranking_loss(&b, &w0).unwrap();
        assert_eq!(r0.total, r0.point);
        let w = LossWeights { lambda: 0.7, ..LossWeights::default() };
        let r = ranking_loss(&b, &w).unwrap();
        let hand = pointwise_bce(1.2, true)
            + pointwise_bce(-0.3, false)
            + pointwise_bce(0.4, false)
            + 0.7 * (-(sigmoid(1.5)).ln() - (sigmoid(0.8)).ln());
        assert!((r.total - hand).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 2.5), 2.5);
        assert_eq!(total_loss(1.25, 2.5), 3.75);
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_label() {
        for &(s, y) in &[(0.3, true), (-2.0, false), (4.0, false), (-7.5, true)] {
            let mut tape = Tape::new();
            let x = tape.param(ParamId(0), &Tensor::scalar(s)).unwrap();
            let l = pointwise_tape(&mut tape, x, &[y]).unwrap().unwrap();
            let g = tape.backward(l).unwrap().get(ParamId(0)).unwrap().grad.item();
            let want = sigmoid(s) - if y { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-10);
        }
    }

    #[test]
    fn tape_versions_match_means() {
        let b = batch();
        let tau = 0.3;
        let mut tape = Tape::new();
        // Candidate columns: positive, easy..., hard...
        let mut rows = Vec::new();
        let mut cand = Vec::new();
        for ex in &b.examples {
            let mut cols: Vec<Vec<f64>> = vec![ex.positive.clone()];
            cols.extend(ex.easy.iter().cloned());
            rows.push(cols.iter().map(|c| c.iter().zip(&ex.h).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>());
            cand.push((0..cols.len()).collect::<Vec<_>>());
        }
        let width = rows.iter().map(Vec::len).max().unwrap();
        let padded: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().copied().chain(std::iter::repeat(0.0)).take(width).collect()).collect();
        let s = tape.constant(Tensor::from_rows(&padded).unwrap()).unwrap();
        let v = infonce_tape(&mut tape, s, &cand, tau).unwrap().unwrap();
        let w = LossWeights { alpha: 1.0, tau, lambda: 0.0 };
        let want = retrieval_loss(&b, &w).unwrap().easy / 2.0;
        assert!((tape.value(v).item() - want).abs() < 1e-12);

        let logits = [1.2, -0.3, 0.4];
        let lv = tape.constant(Tensor::matrix(3, 1, logits.to_vec()).unwrap()).unwrap();
        let pairs = [(0, 1), (0, 2)];
        let p = pairwise_tape(&mut tape, lv, &pairs).unwrap().unwrap();
        assert!((tape.value(p).item() - pairwise_loss(&pairs, &logits) / 2.0).abs() < 1e-12);
        let labels = [true, false, false];
        let q = pointwise_tape(&mut tape, lv, &labels).unwrap().unwrap();
        let want: f64 = logits.iter().zip(&labels).map(|(&s, &y)| pointwise_bce(s, y)).sum::<f64>() / 3.0;
        assert!((tape.value(q).item() - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let p = Tensor::matrix(3, 1, vec![0.4, -0.2, 1.1]).unwrap();
        let grad = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.param(ParamId(0), &p).unwrap();
            let a = pointwise_tape(&mut tape, x, &[true, false, true]).unwrap().unwrap();
            let b = pairwise_tape(&mut tape, x, &[(0, 1), (2, 1)]).unwrap().unwrap();
            let l = match which {
                0 => a,
                1 => b,
                _ => tape.add(a, b).unwrap(),
            };
            tape.backward(l).unwrap().get(ParamId(0)).unwrap().grad.clone().into_data()
        };
        let (ga, gb, gs) = (grad(0), grad(1), grad(2));
        for i in 0..3 {
            assert!((ga[i] + gb[i] - gs[i]).abs() < 1e-14);
        }
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, n)
    }

    proptest! {
        #[test]
        fn infonce_properties(h in vec_strategy(4), pos in vec_strategy(4), negs in prop::collection::vec(vec_strategy(4), 1..6), tau in 0.05f64..2.0) {
            let base = infonce(&h, &pos, &negs, tau).unwrap();
            prop_assert!(base >= 0.0);
            let mut rev = negs.clone();
            rev.reverse();
            prop_assert!((infonce(&h, &pos, &rev, tau).unwrap() - base).abs() < 1e-10);
            let mut dup = negs.clone();
            dup.push(pos.clone());
            let with_dup = infonce(&h, &pos, &dup, tau).unwrap();
            // Beyond ~30 nats the added positive term is below f64 resolution.
            if base < 30.0 {
                prop_assert!(with_dup > base);
            } else {
                prop_assert!(with_dup >= base);
            }
        }

        #[test]
        fn pairwise_translation_invariant(logits in prop::collection::vec(-1e3f64..1e3, 2..8), shift in -100.0f64..100.0) {
            let pairs: Vec<(usize, usize)> = (1..logits.len()).map(|j| (0, j)).collect();
            let a = pairwise_loss(&pairs, &logits);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = pairwise_loss(&pairs, &shifted);
            prop_assert!(a.is_finite());
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn losses_finite_on_wide_logits(s in -1e3f64..1e3, y in any::<bool>(), scale in 1.0f64..300.0) {
            prop_assert!(pointwise_bce(s, y).is_finite());
            let h = [scale, -scale];
            let l = infonce(&h, &[1.0, 1.0], &[vec![3.0, -3.0], vec![-3.0, 3.0]], 0.085).unwrap();
            prop_assert!(l.is_finite());
        }
    }
}
