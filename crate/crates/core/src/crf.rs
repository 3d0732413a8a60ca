//! Exact linear-chain CRF.
//!
//! A sequence `y` over emissions `E (m × c)` scores
//! `start[y₀] + Σₜ E[t][yₜ] + Σₜ₌₁ A[yₜ₋₁][yₜ] + end[y_{m−1}]`, and
//! `p(y|x) = exp(score(y) − log Z)`. Everything is computed in log space.

use crate::autodiff::graph::{CustomOp, Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};
use crate::tensor::Tensor;

/// Optional hard constraints; a `false` entry scores `-inf`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionMask {
    pub num_tags: usize,
    /// `allowed[i * c + j]`: may tag `j` follow tag `i`.
    pub allowed: Vec<bool>,
    pub start_allowed: Vec<bool>,
}

impl TransitionMask {
    /// BIO2 constraints: `I-X` may only follow `B-X` or `I-X`, and may not start a sequence.
    pub fn bio(tags: &[String]) -> Self {
        let c = tags.len();
        let inside = |t: &str| t.strip_prefix("I-").map(str::to_string);
        let ty = |t: &str| {
            t.strip_prefix("B-")
                .or_else(|| t.strip_prefix("I-"))
                .map(str::to_string)
        };
        let mut allowed = vec![true; c * c];
        let mut start_allowed = vec![true; c];
        for (j, tj) in tags.iter().enumerate() {
            if let Some(x) = inside(tj) {
                start_allowed[j] = false;
                for (i, ti) in tags.iter().enumerate() {
                    allowed[i * c + j] = ty(ti).as_deref() == Some(x.as_str());
                }
            }
        }
        TransitionMask {
            num_tags: c,
            allowed,
            start_allowed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrfParams<T> {
    /// `transitions[i][j]`: score of tag `j` following tag `i`.
    pub transitions: Tensor<T>,
    pub start: Tensor<T>,
    pub end: Tensor<T>,
    pub mask: Option<TransitionMask>,
}

impl<T: Scalar> CrfParams<T> {
    pub fn zeros(c: usize) -> Self {
        CrfParams {
            transitions: Tensor::zeros(&[c, c]),
            start: Tensor::zeros(&[c]),
            end: Tensor::zeros(&[c]),
            mask: None,
        }
    }

    pub fn new(transitions: Tensor<T>, start: Tensor<T>, end: Tensor<T>) -> Result<Self> {
        let c = start.len();
        if c == 0 || end.len() != c || transitions.shape() != [c, c] {
            return Err(Error::Shape(format!(
                "crf: transitions {:?}, start {}, end {}",
                transitions.shape(),
                c,
                end.len()
            )));
        }
        Ok(CrfParams {
            transitions,
            start,
            end,
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: TransitionMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    #[inline]
    fn trans(&self, i: usize, j: usize) -> T {
        let c = self.num_tags();
        match &self.mask {
            Some(m) if !m.allowed[i * c + j] => T::neg_infinity(),
            _ => self.transitions.data()[i * c + j],
        }
    }

    #[inline]
    fn start_score(&self, j: usize) -> T {
        match &self.mask {
            Some(m) if !m.start_allowed[j] => T::neg_infinity(),
            _ => self.start.data()[j],
        }
    }

    fn check(&self, emissions: &Tensor<T>) -> Result<(usize, usize)> {
        let c = self.num_tags();
        if emissions.shape().len() != 2 || emissions.cols() != c {
            return Err(Error::Shape(format!(
                "emissions {:?} for {c} tags",
                emissions.shape()
            )));
        }
        if emissions.rows() == 0 {
            return Err(Error::Empty);
        }
        Ok((emissions.rows(), c))
    }
}

pub fn score_sequence<T: Scalar>(emissions: &Tensor<T>, crf: &CrfParams<T>, tags: &[usize]) -> Result<T> {
    let (m, c) = crf.check(emissions)?;
    if tags.len() != m {
        return Err(Error::Shape(format!("{} tags for {m} positions", tags.len())));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= c) {
        return Err(Error::OutOfRange(format!("tag {bad} (of {c})")));
    }
    let mut s = crf.start_score(tags[0]);
    for (t, &y) in tags.iter().enumerate() {
        s += emissions.at(t, y);
        if t > 0 {
            s += crf.trans(tags[t - 1], y);
        }
    }
    Ok(s + crf.end.data()[tags[m - 1]])
}

fn forward_table<T: Scalar>(em: &Tensor<T>, crf: &CrfParams<T>, m: usize, c: usize) -> Vec<Vec<T>> {
    let mut alpha = Vec::with_capacity(m);
    alpha.push((0..c).map(|j| crf.start_score(j) + em.at(0, j)).collect::<Vec<_>>());
    let mut buf = vec![T::zero(); c];
    for t in 1..m {
        let prev = &alpha[t - 1];
        let row = (0..c)
            .map(|j| {
                for i in 0..c {
                    buf[i] = prev[i] + crf.trans(i, j);
                }
                log_sum_exp(&buf) + em.at(t, j)
            })
            .collect();
        alpha.push(row);
    }
    alpha
}

fn backward_table<T: Scalar>(em: &Tensor<T>, crf: &CrfParams<T>, m: usize, c: usize) -> Vec<Vec<T>> {
    let mut beta = vec![vec![T::zero(); c]; m];
    beta[m - 1] = crf.end.data().to_vec();
    let mut buf = vec![T::zero(); c];
    for t in (0..m - 1).rev() {
        for i in 0..c {
            for j in 0..c {
                buf[j] = crf.trans(i, j) + em.at(t + 1, j) + beta[t + 1][j];
            }
            beta[t][i] = log_sum_exp(&buf);
        }
    }
    beta
}

/// `log Σ_y exp(score(y))` by the forward recursion.
pub fn log_partition<T: Scalar>(emissions: &Tensor<T>, crf: &CrfParams<T>) -> Result<T> {
    let (m, c) = crf.check(emissions)?;
    let alpha = forward_table(emissions, crf, m, c);
    let last: Vec<T> = (0..c).map(|j| alpha[m - 1][j] + crf.end.data()[j]).collect();
    Ok(log_sum_exp(&last))
}

/// Posterior marginals used for the likelihood gradient.
pub struct Marginals<T> {
    pub log_z: T,
    /// `unary[t][j] = p(yₜ = j)`
    pub unary: Vec<Vec<T>>,
    /// `pairwise[i * c + j] = Σₜ p(yₜ₋₁ = i, yₜ = j)`
    pub pairwise: Vec<T>,
}

pub fn marginals<T: Scalar>(emissions: &Tensor<T>, crf: &CrfParams<T>) -> Result<Marginals<T>> {
    let (m, c) = crf.check(emissions)?;
    let alpha = forward_table(emissions, crf, m, c);
    let beta = backward_table(emissions, crf, m, c);
    let last: Vec<T> = (0..c).map(|j| alpha[m - 1][j] + crf.end.data()[j]).collect();
    let log_z = log_sum_exp(&last);
    let unary = (0..m)
        .map(|t| (0..c).map(|j| (alpha[t][j] + beta[t][j] - log_z).exp()).collect())
        .collect();
    let mut pairwise = vec![T::zero(); c * c];
    for t in 1..m {
        for i in 0..c {
            for j in 0..c {
                let lp = alpha[t - 1][i] + crf.trans(i, j) + emissions.at(t, j) + beta[t][j] - log_z;
                pairwise[i * c + j] += lp.exp();
            }
        }
    }
    Ok(Marginals {
        log_z,
        unary,
        pairwise,
    })
}

/// Negative log-likelihood of `gold`: `log Z − score(gold)`.
pub fn nll_loss<T: Scalar>(emissions: &Tensor<T>, crf: &CrfParams<T>, gold: &[usize]) -> Result<T> {
    let s = score_sequence(emissions, crf, gold)?;
    Ok(log_partition(emissions, crf)? - s)
}

/// Highest-scoring sequence and its score.
///
/// Among equal-score sequences the lexicographically smallest wins (smallest
/// tag at the earliest differing position): best-suffix scores are computed
/// right to left, then tags are chosen left to right taking the first maximum.
pub fn viterbi_decode<T: Scalar>(emissions: &Tensor<T>, crf: &CrfParams<T>) -> Result<(Vec<usize>, T)> {
    let (m, c) = crf.check(emissions)?;
    // suffix[t][j]: best score of positions t+1.. given yₜ = j, including the end score.
    let mut suffix = vec![vec![T::zero(); c]; m];
    suffix[m - 1] = crf.end.data().to_vec();
    for t in (0..m - 1).rev() {
        for i in 0..c {
            suffix[t][i] = (0..c)
                .map(|j| crf.trans(i, j) + emissions.at(t + 1, j) + suffix[t + 1][j])
                .fold(T::neg_infinity(), T::max);
        }
    }
    let argmax_first = |scores: &mut dyn Iterator<Item = T>| {
        let mut best = (0, T::neg_infinity());
        for (j, s) in scores.enumerate() {
            if s > best.1 {
                best = (j, s);
            }
        }
        best.0
    };
    let mut tags = Vec::with_capacity(m);
    tags.push(argmax_first(
        &mut (0..c).map(|j| crf.start_score(j) + emissions.at(0, j) + suffix[0][j]),
    ));
    for t in 1..m {
        let prev = tags[t - 1];
        tags.push(argmax_first(
            &mut (0..c).map(|j| crf.trans(prev, j) + emissions.at(t, j) + suffix[t][j]),
        ));
    }
    let score = score_sequence(emissions, crf, &tags)?;
    Ok((tags, score))
}

pub const BRUTE_FORCE_LIMIT: f64 = 1e6;

/// Exhaustive `p(y|x)` for every sequence, in lexicographic order.
pub fn brute_force_distribution<T: Scalar>(
    emissions: &Tensor<T>,
    crf: &CrfParams<T>,
) -> Result<Vec<(Vec<usize>, T)>> {
    let (m, c) = crf.check(emissions)?;
    let total = (c as f64).powi(m as i32);
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(total));
    }
    let mut seqs = Vec::with_capacity(total as usize);
    let mut scores = Vec::with_capacity(total as usize);
    let mut y = vec![0usize; m];
    loop {
        scores.push(score_sequence(emissions, crf, &y)?);
        seqs.push(y.clone());
        // odometer increment, last position fastest
        let mut pos = m;
        loop {
            if pos == 0 {
                let log_z = log_sum_exp(&scores);
                return Ok(seqs
                    .into_iter()
                    .zip(scores)
                    .map(|(s, sc)| (s, (sc - log_z).exp()))
                    .collect());
            }
            pos -= 1;
            y[pos] += 1;
            if y[pos] < c {
                break;
            }
            y[pos] = 0;
        }
    }
}

/// Graph op: inputs `[emissions (m×c), transitions (c×c), start (c), end (c)]`, output the NLL.
struct CrfNll {
    gold: Vec<usize>,
    mask: Option<TransitionMask>,
}

impl CrfNll {
    fn params<T: Scalar>(&self, inputs: &[&Tensor<T>]) -> Result<CrfParams<T>> {
        let mut p = CrfParams::new(inputs[1].clone(), inputs[2].clone(), inputs[3].clone())?;
        p.mask = self.mask.clone();
        Ok(p)
    }
}

impl<T: Scalar> CustomOp<T> for CrfNll {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let crf = self.params(inputs)?;
        Ok(Tensor::scalar(nll_loss(inputs[0], &crf, &self.gold)?))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>> {
        let g = grad.item();
        let crf = self.params(inputs).expect("validated in forward");
        let mg = marginals(inputs[0], &crf).expect("validated in forward");
        let (m, c) = (inputs[0].rows(), crf.num_tags());
        let mut d_em = Tensor::zeros(&[m, c]);
        for t in 0..m {
            for j in 0..c {
                d_em.row_mut(t)[j] = mg.unary[t][j];
            }
            d_em.row_mut(t)[self.gold[t]] -= T::one();
        }
        let mut d_tr = Tensor::new(vec![c, c], mg.pairwise).expect("c×c");
        for t in 1..m {
            d_tr.data_mut()[self.gold[t - 1] * c + self.gold[t]] -= T::one();
        }
        let mut d_start = Tensor::new(inputs[2].shape().to_vec(), mg.unary[0].clone()).expect("c");
        d_start.data_mut()[self.gold[0]] -= T::one();
        let mut d_end = Tensor::new(inputs[3].shape().to_vec(), mg.unary[m - 1].clone()).expect("c");
        d_end.data_mut()[self.gold[m - 1]] -= T::one();
        for d in [&mut d_em, &mut d_tr, &mut d_start, &mut d_end] {
            d.scale_assign(g);
        }
        vec![d_em, d_tr, d_start, d_end]
    }
}

/// Records the CRF negative log-likelihood of `gold` on the graph.
pub fn nll_node<T: Scalar>(
    g: &mut Graph<'_, T>,
    emissions: NodeId,
    transitions: NodeId,
    start: NodeId,
    end: NodeId,
    gold: &[usize],
    mask: Option<&TransitionMask>,
) -> Result<NodeId> {
    g.custom(
        Box::new(CrfNll {
            gold: gold.to_vec(),
            mask: mask.cloned(),
        }),
        &[emissions, transitions, start, end],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![x.len()], x.to_vec()).unwrap()
    }

    #[test]
    fn zero_params_score_zero_and_uniform_partition() {
        let crf = CrfParams::<f64>::zeros(3);
        let em = Tensor::zeros(&[4, 3]);
        assert_eq!(score_sequence(&em, &crf, &[0, 2, 1, 1]).unwrap(), 0.0);
        let lz = log_partition(&em, &crf).unwrap();
        assert!((lz - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_position_has_no_transition() {
        let crf = CrfParams::new(t2(&[&[9.0, 9.0], &[9.0, 9.0]]), v(&[0.5, -1.0]), v(&[0.25, 2.0])).unwrap();
        let em = t2(&[&[1.0, 3.0]]);
        assert_eq!(score_sequence(&em, &crf, &[1]).unwrap(), -1.0 + 3.0 + 2.0);
    }

    #[test]
    fn hand_computed_two_by_two() {
        // start (0.1, 0.2), end (0.3, -0.4), A = [[0.5, -0.6], [0.7, 0.8]]
        // E = [[1, 2], [3, 4]], y = (1, 0):
        // 0.2 + 2 + 0.7 + 3 + 0.3 = 6.2
        let crf = CrfParams::new(t2(&[&[0.5, -0.6], &[0.7, 0.8]]), v(&[0.1, 0.2]), v(&[0.3, -0.4])).unwrap();
        let em = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert!((score_sequence(&em, &crf, &[1, 0]).unwrap() - 6.2).abs() < 1e-12);
        // The four sequence scores: (0,0) 4.9, (0,1) 4.1, (1,0) 6.2, (1,1) 6.6
        let lz = [4.9f64, 4.1, 6.2, 6.6].iter().map(|s| s.exp()).sum::<f64>().ln();
        assert!((log_partition(&em, &crf).unwrap() - lz).abs() < 1e-12);
        let (best, score) = viterbi_decode(&em, &crf).unwrap();
        assert_eq!(best, vec![1, 1]);
        assert!((score - 6.6).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_and_bad_tag() {
        let crf = CrfParams::<f64>::zeros(2);
        let em = Tensor::zeros(&[2, 2]);
        assert!(score_sequence(&em, &crf, &[0]).is_err());
        assert!(score_sequence(&em, &crf, &[0, 2]).is_err());
    }

    #[test]
    fn single_tag_loss_is_zero() {
        let crf = CrfParams::new(t2(&[&[0.3]]), v(&[1.0]), v(&[-2.0])).unwrap();
        let em = t2(&[&[0.5], &[-1.5], &[2.0]]);
        assert!(nll_loss(&em, &crf, &[0, 0, 0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dominant_emissions_decode_per_step() {
        let crf = CrfParams::<f64>::zeros(3);
        let em = t2(&[&[5.0, 0.0, 0.0], &[0.0, 0.0, 5.0], &[0.0, 5.0, 0.0]]);
        assert_eq!(viterbi_decode(&em, &crf).unwrap().0, vec![0, 2, 1]);
    }

    #[test]
    fn ties_prefer_smallest_index_first() {
        let crf = CrfParams::<f64>::zeros(2);
        let em = Tensor::zeros(&[3, 2]);
        assert_eq!(viterbi_decode(&em, &crf).unwrap().0, vec![0, 0, 0]);
    }

    #[test]
    fn brute_force_size_limit() {
        let crf = CrfParams::<f64>::zeros(10);
        let em = Tensor::zeros(&[7, 10]);
        assert!(matches!(brute_force_distribution(&em, &crf), Err(Error::TooLarge(_))));
        let small = brute_force_distribution(&Tensor::zeros(&[2, 2]), &CrfParams::<f64>::zeros(2)).unwrap();
        assert_eq!(small.len(), 4);
        for (_, p) in &small {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn bio_mask_blocks_inside_after_outside() {
        let tags: Vec<String> = ["O", "B-PER", "I-PER"].iter().map(|s| s.to_string()).collect();
        let mask = TransitionMask::bio(&tags);
        assert!(!mask.start_allowed[2]);
        assert!(!mask.allowed[2]);
        assert!(mask.allowed[3 + 2]);
        let crf = CrfParams::<f64>::zeros(3).with_mask(mask);
        // I-PER has a huge emission at position 0 but cannot start the sequence.
        let em = t2(&[&[0.0, 0.0, 50.0], &[0.0, 0.0, 0.0]]);
        let (best, _) = viterbi_decode(&em, &crf).unwrap();
        assert_ne!(best[0], 2);
        let bf = brute_force_distribution(&em, &crf).unwrap();
        let total: f64 = bf.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (y, p) in bf {
            if y[0] == 2 || (y[0] == 0 && y[1] == 2) {
                assert_eq!(p, 0.0);
            }
        }
    }
}
