//! Exact Plackett-Luce machinery over full rankings.
//!
//! A ranking of `K` items is drawn by repeatedly picking one of the remaining
//! items with probability proportional to `exp(score)`. Everything here works
//! in log space: suffix log-sum-exp is accumulated right to left with a running
//! maximum, so scores in the tens never overflow.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `K` accepted by [`enumerate_probabilities`].
pub const MAX_ENUMERATE: usize = 8;

/// Per-item log-strengths of a Plackett-Luce distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("score vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k.max(1)])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Subtract the mean so the entries sum to zero.
    pub fn centered(&self) -> Self {
        let mean = self.0.iter().sum::<f64>() / self.0.len() as f64;
        Self(self.0.iter().map(|v| v - mean).collect())
    }

    /// The permutation listing items by descending score (ties by lower index).
    pub fn argsort_descending(&self) -> Permutation {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        Permutation(order)
    }
}

/// A full ranking stored rank-to-item: `order[i]` is the item placed at rank `i`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        if order.is_empty() {
            return Err(Error::Empty("permutation"));
        }
        let mut seen = vec![false; order.len()];
        for &item in &order {
            if item >= order.len() || seen[item] {
                return Err(Error::InvalidPermutation(format!("{order:?}")));
            }
            seen[item] = true;
        }
        Ok(Self(order))
    }

    pub fn identity(k: usize) -> Self {
        Self((0..k.max(1)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    /// Item-to-rank view: `inverse()[item]` is the rank position of `item`.
    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (rank, &item) in self.0.iter().enumerate() {
            inv[item] = rank;
        }
        Permutation(inv)
    }

    /// Number of positions at which the two rankings differ.
    pub fn hamming(&self, other: &Permutation) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    /// Uniformly random permutation of `k` items (Fisher-Yates).
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..k.max(1)).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        Self(order)
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, item) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{item}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlFitConfig {
    pub max_iters: usize,
    pub step_size: f64,
    /// Stop once the gradient norm falls below this value.
    pub tolerance: f64,
    pub centering: bool,
}

impl Default for PlFitConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            step_size: 1.0,
            tolerance: 1e-9,
            centering: true,
        }
    }
}

fn check(s: &ScoreVector, r: &Permutation) -> Result<()> {
    if s.len() != r.len() {
        return Err(Error::DimensionMismatch {
            expected: s.len(),
            got: r.len(),
        });
    }
    if s.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score vector"));
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `out[i] = logsumexp(s[r(i)], ..., s[r(K-1)])`, built right to left.
pub(crate) fn suffix_logsumexp(scores: &[f64], order: &[usize]) -> Vec<f64> {
    let k = order.len();
    let mut out = vec![0.0; k];
    let mut running = f64::NEG_INFINITY;
    for i in (0..k).rev() {
        running = log_add(running, scores[order[i]]);
        out[i] = running;
    }
    out
}

/// `log P(r | s)`.
pub fn log_likelihood(s: &ScoreVector, r: &Permutation) -> Result<f64> {
    check(s, r)?;
    Ok(-nll_unchecked(&s.0, &r.0))
}

pub(crate) fn nll_unchecked(scores: &[f64], order: &[usize]) -> f64 {
    let tails = suffix_logsumexp(scores, order);
    order
        .iter()
        .zip(&tails)
        .map(|(&item, &lse)| lse - scores[item])
        .sum::<f64>()
        .max(0.0)
}

/// Negative log-likelihood of the target ranking; the ranking loss used by
/// every listwise objective in this crate.
pub fn nll(s: &ScoreVector, r_star: &Permutation) -> Result<f64> {
    check(s, r_star)?;
    Ok(nll_unchecked(&s.0, &r_star.0))
}

pub(crate) fn nll_grad_unchecked(scores: &[f64], order: &[usize]) -> Vec<f64> {
    let k = order.len();
    let tails = suffix_logsumexp(scores, order);
    let mut grad = vec![0.0; k];
    // prefix = logsumexp(-tails[0..=p]); every term exp(s_m - tails[i]) <= 1
    let mut prefix = f64::NEG_INFINITY;
    for (p, &item) in order.iter().enumerate() {
        prefix = log_add(prefix, -tails[p]);
        grad[item] = (scores[item] + prefix).exp() - 1.0;
    }
    grad
}

/// Gradient of [`nll`] with respect to the scores, indexed by item.
pub fn nll_grad(s: &ScoreVector, r_star: &Permutation) -> Result<Vec<f64>> {
    check(s, r_star)?;
    Ok(nll_grad_unchecked(&s.0, &r_star.0))
}

/// Draw a ranking by sequential choice without replacement.
pub fn sample<R: Rng + ?Sized>(s: &ScoreVector, rng: &mut R) -> Permutation {
    let mut remaining: Vec<usize> = (0..s.len()).collect();
    let mut order = Vec::with_capacity(s.len());
    while remaining.len() > 1 {
        let max = remaining
            .iter()
            .map(|&i| s.0[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = remaining.iter().map(|&i| (s.0[i] - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (slot, w) in weights.iter().enumerate() {
            if u < *w {
                pick = slot;
                break;
            }
            u -= w;
        }
        order.push(remaining.remove(pick));
    }
    order.extend(remaining);
    Permutation(order)
}

/// All `K!` rankings in lexicographic order.
pub fn all_permutations(k: usize) -> Vec<Permutation> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        out.push(Permutation(current.clone()));
        // next lexicographic permutation
        let Some(i) = (1..k).rev().find(|&i| current[i - 1] < current[i]) else {
            break;
        };
        let j = (i..k).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
    }
    out
}

/// Exact probability of every ranking; refuses `K > 8`.
pub fn enumerate_probabilities(s: &ScoreVector) -> Result<BTreeMap<Permutation, f64>> {
    if s.len() > MAX_ENUMERATE {
        return Err(Error::TooManyItems(s.len()));
    }
    Ok(all_permutations(s.len())
        .into_iter()
        .map(|p| {
            let prob = (-nll_unchecked(&s.0, &p.0)).exp();
            (p, prob)
        })
        .collect())
}

/// Maximum-likelihood scores for a sample of rankings by gradient descent on
/// the mean negative log-likelihood.
pub fn fit_mle(observations: &[Permutation], k: usize, config: &PlFitConfig) -> Result<ScoreVector> {
    if observations.is_empty() {
        return Err(Error::Empty("observations"));
    }
    if !(config.step_size > 0.0) || !(config.tolerance > 0.0) {
        return Err(Error::config("fit", "step_size and tolerance must be positive"));
    }
    let mut counts: BTreeMap<&Permutation, f64> = BTreeMap::new();
    for obs in observations {
        if obs.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: obs.len(),
            });
        }
        *counts.entry(obs).or_default() += 1.0;
    }
    let n = observations.len() as f64;
    let mut scores = vec![0.0; k];
    for _ in 0..config.max_iters {
        let mut grad = vec![0.0; k];
        for (perm, count) in &counts {
            for (g, gi) in grad.iter_mut().zip(nll_grad_unchecked(&scores, &perm.0)) {
                *g += count * gi / n;
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < config.tolerance {
            break;
        }
        for (s, g) in scores.iter_mut().zip(&grad) {
            *s -= config.step_size * g;
        }
        if config.centering {
            let mean = scores.iter().sum::<f64>() / k as f64;
            scores.iter_mut().for_each(|s| *s -= mean);
        }
    }
    ScoreVector::new(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec()).unwrap()
    }

    fn perm(v: &[usize]) -> Permutation {
        Permutation::new(v.to_vec()).unwrap()
    }

    fn random_scores(rng: &mut ChaCha8Rng, k: usize, spread: f64) -> ScoreVector {
        sv(&(0..k)
            .map(|_| rng.random_range(-spread..spread))
            .collect::<Vec<_>>())
    }

    /// Central differences of `nll` around `s`.
    fn fd_grad(s: &[f64], r: &Permutation, h: f64) -> Vec<f64> {
        (0..s.len())
            .map(|m| {
                let mut plus = s.to_vec();
                let mut minus = s.to_vec();
                plus[m] += h;
                minus[m] -= h;
                (nll(&sv(&plus), r).unwrap() - nll(&sv(&minus), r).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn uniform_scores_give_uniform_likelihood() {
        let s = sv(&[0.0, 0.0, 0.0]);
        for p in all_permutations(3) {
            assert_abs_diff_eq!(log_likelihood(&s, &p).unwrap(), (1.0f64 / 6.0).ln(), epsilon = 1e-12);
            assert_abs_diff_eq!(nll(&s, &p).unwrap(), 6f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn two_item_hand_values() {
        let s = sv(&[2f64.ln(), 0.0]);
        let r = perm(&[0, 1]);
        assert_abs_diff_eq!(log_likelihood(&s, &r).unwrap(), (2.0f64 / 3.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(nll(&s, &r).unwrap(), 0.405_465_108_108_164_4, epsilon = 1e-12);
        let probs = enumerate_probabilities(&s).unwrap();
        assert_abs_diff_eq!(probs[&perm(&[0, 1])], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[&perm(&[1, 0])], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn single_item_is_trivial() {
        let s = sv(&[3.7]);
        let r = Permutation::identity(1);
        assert_eq!(log_likelihood(&s, &r).unwrap(), 0.0);
        assert_eq!(nll_grad(&s, &r).unwrap(), vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample(&s, &mut rng), r);
    }

    #[test]
    fn certain_ranking_has_vanishing_loss() {
        let s = sv(&[40.0, 20.0, 0.0]);
        assert!(nll(&s, &perm(&[0, 1, 2])).unwrap() < 1e-8);
    }

    #[test]
    fn errors_on_bad_inputs() {
        assert!(matches!(
            nll(&sv(&[0.0, 1.0]), &perm(&[0, 1, 2])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(ScoreVector::new(vec![f64::NAN]).is_err());
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(matches!(
            enumerate_probabilities(&ScoreVector::zeros(9)),
            Err(Error::TooManyItems(9))
        ));
        assert!(fit_mle(&[], 3, &PlFitConfig::default()).is_err());
    }

    #[test]
    fn gradient_hand_value_and_finite_differences() {
        let g = nll_grad(&sv(&[0.0, 0.0]), &perm(&[0, 1])).unwrap();
        assert_abs_diff_eq!(g[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 0.5, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let k = rng.random_range(2..=8);
            let s = random_scores(&mut rng, k, 3.0);
            let r = Permutation::random(k, &mut rng);
            let analytic = nll_grad(&s, &r).unwrap();
            let numeric = fd_grad(s.values(), &r, 1e-6);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-5, "{a} vs {n}");
            }
            assert!(analytic.iter().sum::<f64>().abs() <= 1e-10);
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k = rng.random_range(1..=7);
            let s = random_scores(&mut rng, k, 5.0);
            let r = Permutation::random(k, &mut rng);
            let c = rng.random_range(-100.0..100.0);
            let shifted = sv(&s.values().iter().map(|v| v + c).collect::<Vec<_>>());
            let a = log_likelihood(&s, &r).unwrap();
            let b = log_likelihood(&shifted, &r).unwrap();
            assert!((a - b).abs() <= 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn enumeration_normalizes_and_mode_is_sorted_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let k = rng.random_range(1..=6);
            let s = random_scores(&mut rng, k, 2.0);
            let probs = enumerate_probabilities(&s).unwrap();
            assert_eq!(probs.len(), (1..=k).product::<usize>());
            let total: f64 = probs.values().sum();
            assert!((total - 1.0).abs() < 1e-9);
            let mode = probs
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(p, _)| p.clone())
                .unwrap();
            assert_eq!(mode, s.argsort_descending());
        }
    }

    #[test]
    fn sampler_matches_symmetry() {
        let s = ScoreVector::zeros(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts: BTreeMap<Permutation, usize> = BTreeMap::new();
        let draws = 60_000;
        for _ in 0..draws {
            *counts.entry(sample(&s, &mut rng)).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for c in counts.values() {
            assert!((*c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn sampler_matches_enumeration() {
        let s = sv(&[10.0, 0.0, -10.0]);
        let exact = enumerate_probabilities(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 10_000;
        let hits = (0..draws)
            .filter(|_| sample(&s, &mut rng) == perm(&[0, 1, 2]))
            .count();
        assert!((hits as f64 / draws as f64 - exact[&perm(&[0, 1, 2])]).abs() < 0.01);

        // 3 standard errors on a non-degenerate distribution
        let s = sv(&[1.0, 0.2, -0.7]);
        let exact = enumerate_probabilities(&s).unwrap();
        let draws = 20_000;
        let mut counts: BTreeMap<Permutation, usize> = BTreeMap::new();
        for _ in 0..draws {
            *counts.entry(sample(&s, &mut rng)).or_default() += 1;
        }
        for (p, prob) in exact {
            let freq = *counts.get(&p).unwrap_or(&0) as f64 / draws as f64;
            let se = (prob * (1.0 - prob) / draws as f64).sqrt();
            assert!((freq - prob).abs() <= 3.0 * se, "{p}: {freq} vs {prob}");
        }
    }

    #[test]
    fn fit_on_repeated_ranking_orders_scores() {
        let target = perm(&[2, 0, 3, 1]);
        let obs = vec![target.clone(); 500];
        let cfg = PlFitConfig {
            max_iters: 300,
            ..PlFitConfig::default()
        };
        let fitted = fit_mle(&obs, 4, &cfg).unwrap();
        let v = fitted.values();
        for w in target.order().windows(2) {
            assert!(v[w[0]] > v[w[1]]);
        }
        assert!(v.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn fit_on_all_permutations_is_flat() {
        let obs = all_permutations(3);
        let fitted = fit_mle(&obs, 3, &PlFitConfig::default()).unwrap();
        for v in fitted.values() {
            assert!(v.abs() < 1e-3);
        }
    }

    #[test]
    fn fit_recovers_sampled_scores() {
        let truth = sv(&[2.0, 0.0, -2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let obs: Vec<_> = (0..20_000).map(|_| sample(&truth, &mut rng)).collect();
        let fitted = fit_mle(&obs, 3, &PlFitConfig::default()).unwrap();
        assert_eq!(fitted.argsort_descending(), perm(&[0, 1, 2]));
        for (f, t) in fitted.values().iter().zip(truth.values()) {
            assert!((f - t).abs() < 0.1, "{f} vs {t}");
        }
    }

    #[test]
    fn all_permutations_is_complete() {
        let perms = all_permutations(4);
        assert_eq!(perms.len(), 24);
        let unique: std::collections::BTreeSet<_> = perms.iter().collect();
        assert_eq!(unique.len(), 24);
    }
}
