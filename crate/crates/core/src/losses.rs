//! Training objectives: the two listwise ranking losses, the masked-regression
//! proxy, the pairwise and permutation-classification baselines, and the
//! weighted total.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pl::{self, Permutation, ScoreVector};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Temporal ranking.
    pub lambda1: f64,
    /// Masked modeling.
    pub lambda2: f64,
    /// Jigsaw ranking.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.4,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("loss_weights.{name}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Clip ranking loss: the clip arrives in chronological order, so the target
/// ranking is the identity.
pub fn vid_loss(s_clip: &ScoreVector) -> Result<f64> {
    pl::nll(s_clip, &Permutation::identity(s_clip.len()))
}

/// Jigsaw ranking loss; `restore` lists the shuffled positions in raster order.
pub fn jigsaw_loss(s_jigsaw: &ScoreVector, restore: &Permutation) -> Result<f64> {
    pl::nll(s_jigsaw, restore)
}

/// Mean squared error over the masked rows only.
pub fn mim_proxy_loss(predicted: &Tensor, target: &Tensor, mask: &[bool]) -> Result<f64> {
    if predicted.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            context: "mim_proxy_loss",
            expected: predicted.shape(),
            got: target.shape(),
        });
    }
    if mask.len() != predicted.rows() {
        return Err(Error::DimensionMismatch {
            expected: predicted.rows(),
            got: mask.len(),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("mask"));
    }
    Ok(masked_mse_value(predicted, target, mask))
}

pub(crate) fn masked_mse_value(predicted: &Tensor, target: &Tensor, mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (p, t) in predicted.row(r).iter().zip(target.row(r)) {
            total += (p - t) * (p - t);
        }
        count += predicted.cols();
    }
    total / count as f64
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic pairwise ranking loss averaged over all `k(k-1)/2` ordered pairs;
/// earlier positions should score higher.
pub fn pairwise_baseline(s_clip: &ScoreVector) -> Result<f64> {
    if s_clip.len() < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: s_clip.len(),
        });
    }
    Ok(pairwise_value(s_clip.values()))
}

pub(crate) fn pairwise_value(s: &[f64]) -> f64 {
    let k = s.len();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += softplus(s[j] - s[i]);
        }
    }
    total * 2.0 / (k * (k - 1)) as f64
}

pub(crate) fn pairwise_grad(s: &[f64]) -> Vec<f64> {
    let k = s.len();
    let mut grad = vec![0.0; k];
    if k < 2 {
        return grad;
    }
    let norm = 2.0 / (k * (k - 1)) as f64;
    for i in 0..k {
        for j in i + 1..k {
            let p = sigmoid(s[j] - s[i]);
            grad[i] -= norm * p;
            grad[j] += norm * p;
        }
    }
    grad
}

/// Softmax cross-entropy of `logits` against class `true_index`.
pub fn perm_ce_baseline(logits: &[f64], true_index: usize) -> Result<f64> {
    if true_index >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: true_index,
            len: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(cross_entropy_value(logits, true_index))
}

pub(crate) fn cross_entropy_value(logits: &[f64], target: usize) -> f64 {
    // logsumexp relative to the target logit, so confident predictions keep precision
    let zt = logits[target];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= zt {
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target)
            .map(|(_, z)| (z - zt).exp())
            .sum();
        return rest.ln_1p();
    }
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    (lse - zt).max(0.0)
}

/// `λ₁·L_vid + λ₂·L_mim + λ₃·L_jigsaw`.
pub fn total_loss(w: &LossWeights, l_vid: f64, l_mim: f64, l_jigsaw: f64) -> Result<f64> {
    if !(l_vid.is_finite() && l_mim.is_finite() && l_jigsaw.is_finite()) {
        return Err(Error::NonFinite("branch loss"));
    }
    Ok(w.lambda1 * l_vid + w.lambda2 * l_mim + w.lambda3 * l_jigsaw)
}

/// Fixed permutation alphabet for the shuffle-classification baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermDictionary {
    perms: Vec<Permutation>,
}

impl PermDictionary {
    /// Greedy max-min Hamming selection of up to `size` permutations of `k`
    /// items from a seeded candidate pool. Capped at `k!` entries.
    pub fn build(k: usize, size: usize, seed: u64) -> Result<Self> {
        if k == 0 || size == 0 {
            return Err(Error::Empty("permutation dictionary"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<Permutation> = if k <= 6 {
            pl::all_permutations(k)
        } else {
            let mut seen = std::collections::BTreeSet::new();
            let mut pool = Vec::new();
            while pool.len() < 2000 {
                let p = Permutation::random(k, &mut rng);
                if seen.insert(p.clone()) {
                    pool.push(p);
                }
            }
            pool
        };
        let target = size.min(pool.len());
        // start from a random pool member so different seeds give different alphabets
        let first = rand::Rng::random_range(&mut rng, 0..pool.len());
        let mut perms = vec![pool.swap_remove(first)];
        let mut min_dist: Vec<usize> = pool.iter().map(|p| p.hamming(&perms[0])).collect();
        while perms.len() < target {
            let (best, _) = min_dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("pool exhausted");
            let chosen = pool.swap_remove(best);
            min_dist.swap_remove(best);
            for (d, p) in min_dist.iter_mut().zip(&pool) {
                *d = (*d).min(p.hamming(&chosen));
            }
            perms.push(chosen);
        }
        Ok(Self { perms })
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn get(&self, index: usize) -> &Permutation {
        &self.perms[index]
    }

    pub fn perms(&self) -> &[Permutation] {
        &self.perms
    }

    /// Smallest pairwise Hamming distance in the alphabet.
    pub fn min_hamming(&self) -> usize {
        let mut best = usize::MAX;
        for i in 0..self.perms.len() {
            for j in i + 1..self.perms.len() {
                best = best.min(self.perms[i].hamming(&self.perms[j]));
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn vid_loss_values() {
        let ln_8_fact = (1..=8).map(|i| (i as f64).ln()).sum::<f64>();
        assert_abs_diff_eq!(vid_loss(&ScoreVector::zeros(8)).unwrap(), ln_8_fact, epsilon = 1e-12);
        assert_abs_diff_eq!(ln_8_fact, 10.6046, epsilon = 1e-4);
        let steep: Vec<f64> = (0..4).map(|i| -20.0 * i as f64).collect();
        assert!(vid_loss(&sv(&steep)).unwrap() < 1e-8);
        // k = 8: seven choices each lose about exp(-20)
        let steep: Vec<f64> = (0..8).map(|i| -20.0 * i as f64).collect();
        assert_abs_diff_eq!(vid_loss(&sv(&steep)).unwrap(), 7.0 * (-20.0f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(vid_loss(&sv(&[2f64.ln(), 0.0])).unwrap(), 1.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn jigsaw_loss_delegates() {
        assert_abs_diff_eq!(
            jigsaw_loss(&ScoreVector::zeros(4), &Permutation::identity(4)).unwrap(),
            24f64.ln(),
            epsilon = 1e-12
        );
        let restore = Permutation::new(vec![2, 0, 1]).unwrap();
        let mut scores = vec![0.0; 3];
        for (rank, &item) in restore.order().iter().enumerate() {
            scores[item] = -20.0 * rank as f64;
        }
        assert!(jigsaw_loss(&sv(&scores), &restore).unwrap() < 1e-8);
        let s = sv(&[0.3, -1.2, 0.8]);
        assert_eq!(jigsaw_loss(&s, &restore).unwrap(), pl::nll(&s, &restore).unwrap());
    }

    #[test]
    fn mim_proxy_values() {
        let t = Tensor::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let all = [true; 4];
        assert_eq!(mim_proxy_loss(&t, &t, &all).unwrap(), 0.0);
        assert_eq!(mim_proxy_loss(&t.map(|v| v + 1.0), &t, &all).unwrap(), 1.0);
        // residuals on masked rows 0 and 2: (1, -1) and (3, 0) -> (1 + 1 + 9 + 0) / 4
        let mut pred = t.clone();
        pred.row_mut(0).copy_from_slice(&[2.0, 1.0]);
        pred.row_mut(2).copy_from_slice(&[8.0, 6.0]);
        pred.row_mut(1).copy_from_slice(&[100.0, 100.0]);
        assert_abs_diff_eq!(
            mim_proxy_loss(&pred, &t, &[true, false, true, false]).unwrap(),
            2.75,
            epsilon = 1e-15
        );
        assert!(matches!(mim_proxy_loss(&t, &t, &[false; 4]), Err(Error::Empty(_))));
    }

    #[test]
    fn pairwise_values() {
        assert_abs_diff_eq!(pairwise_baseline(&sv(&[0.0, 0.0])).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let neg_log_sig_20 = (-20.0f64).exp().ln_1p();
        assert_abs_diff_eq!(pairwise_baseline(&sv(&[20.0, 0.0])).unwrap(), neg_log_sig_20, epsilon = 1e-20);
        assert_abs_diff_eq!(neg_log_sig_20, 2.06e-9, epsilon = 1e-11);
        // pairs (1,0), (1,-1), (0,-1): differences 1, 2, 1
        let expected = (2.0 * (1.0 + (-1.0f64).exp()).ln() + (1.0 + (-2.0f64).exp()).ln()) / 3.0;
        assert_abs_diff_eq!(pairwise_baseline(&sv(&[1.0, 0.0, -1.0])).unwrap(), expected, epsilon = 1e-15);
        assert!(pairwise_baseline(&sv(&[1.0])).is_err());
    }

    #[test]
    fn pairwise_equals_pl_for_two_items_and_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let s = sv(&[rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]);
            assert!((pairwise_baseline(&s).unwrap() - vid_loss(&s).unwrap()).abs() < 1e-12);
            let k = rng.random_range(2..9);
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = rng.random_range(-10.0..10.0);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            assert!((pairwise_value(&v) - pairwise_value(&shifted)).abs() < 1e-12);
        }
    }

    #[test]
    fn perm_ce_values() {
        assert_abs_diff_eq!(perm_ce_baseline(&[0.0; 24], 5).unwrap(), 24f64.ln(), epsilon = 1e-12);
        let mut favored = vec![0.0; 24];
        favored[3] = 20.0;
        let loss = perm_ce_baseline(&favored, 3).unwrap();
        assert_abs_diff_eq!(loss, (23.0 * (-20.0f64).exp()).ln_1p(), epsilon = 1e-20);
        assert!(loss < 5e-8);
        favored[3] = 25.0;
        assert!(perm_ce_baseline(&favored, 3).unwrap() < 1e-8);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(
            perm_ce_baseline(&[1.0, 0.0, 0.0], 0).unwrap(),
            -(e / (e + 2.0)).ln(),
            epsilon = 1e-12
        );
        assert!(perm_ce_baseline(&[0.0; 3], 3).is_err());
    }

    #[test]
    fn perm_ce_bounded_by_log_m_plus_slack() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let m = rng.random_range(2..30);
            let logits: Vec<f64> = (0..m).map(|_| rng.random_range(-4.0..4.0)).collect();
            let t = rng.random_range(0..m);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let loss = perm_ce_baseline(&logits, t).unwrap();
            assert!(loss >= 0.0);
            assert!(loss <= (m as f64).ln() + (max - logits[t]) + 1e-12);
        }
    }

    #[test]
    fn total_loss_values() {
        let w = LossWeights::default();
        assert_abs_diff_eq!(total_loss(&w, 1.0, 1.0, 1.0).unwrap(), 2.4, epsilon = 1e-15);
        let mim_only = LossWeights::new(0.0, 1.0, 0.0).unwrap();
        assert_eq!(total_loss(&mim_only, 3.3, 0.7123, 9.1).unwrap(), 0.7123);
        assert_eq!(total_loss(&w, 0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!(total_loss(&w, f64::NAN, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn total_loss_is_linear() {
        let w = LossWeights::new(0.5, 2.0, 0.4).unwrap();
        let base = total_loss(&w, 1.0, 2.0, 3.0).unwrap();
        let bumped = total_loss(&w, 2.0, 2.0, 3.0).unwrap();
        assert_abs_diff_eq!(bumped - base, 0.5, epsilon = 1e-12);
        let doubled = total_loss(&w, 2.0, 4.0, 6.0).unwrap();
        assert_abs_diff_eq!(doubled, 2.0 * base, epsilon = 1e-12);
    }

    #[test]
    fn dictionary_is_diverse_and_seeded() {
        let d = PermDictionary::build(8, 24, 0).unwrap();
        assert_eq!(d.len(), 24);
        assert!(d.min_hamming() >= 6, "min hamming {}", d.min_hamming());
        assert_eq!(d, PermDictionary::build(8, 24, 0).unwrap());
        assert_ne!(d, PermDictionary::build(8, 24, 1).unwrap());
        // small k is capped at k!
        assert_eq!(PermDictionary::build(3, 24, 0).unwrap().len(), 6);
    }
}
