//! Attribute-direction discovery with linear max-margin separators.
//!
//! Populations are taken from the two extremes of an attribute score
//! distribution (or from categorical label pools) and separated by an
//! L2-regularised hinge-loss SVM trained with seeded subgradient descent.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{signed_distance, AttributeBoundary, BoundaryMeta, LatentVector};
use crate::scalar::{self, Scalar};
use crate::seeding;

#[derive(Debug, Clone)]
pub struct LabeledPool<T> {
    attribute: String,
    latents: Vec<LatentVector<T>>,
    scores: Vec<T>,
}

impl<T: Scalar> LabeledPool<T> {
    pub fn new(attribute: impl Into<String>, latents: Vec<LatentVector<T>>, scores: Vec<T>) -> Result<Self> {
        if latents.len() != scores.len() {
            return Err(Error::input(format!(
                "pool has {} latents but {} scores",
                latents.len(),
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::input(format!("score {i} is not finite")));
        }
        Ok(LabeledPool {
            attribute: attribute.into(),
            latents,
            scores,
        })
    }

    /// A class-membership pool: every latent scores 1.
    pub fn members(attribute: impl Into<String>, latents: Vec<LatentVector<T>>) -> Self {
        let scores = vec![T::one(); latents.len()];
        LabeledPool {
            attribute: attribute.into(),
            latents,
            scores,
        }
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn latents(&self) -> &[LatentVector<T>] {
        &self.latents
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub max_train: usize,
    pub holdout_fraction: f64,
    pub l2_lambda: f64,
    pub epochs: usize,
    /// Initial step; decays as `learning_rate / (1 + epoch)`.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            max_train: 100_000,
            holdout_fraction: 0.1,
            l2_lambda: 1e-4,
            epochs: 50,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5) {
            return Err(Error::config(format!(
                "holdout_fraction {} must lie in (0, 0.5)",
                self.holdout_fraction
            )));
        }
        if self.max_train < 2 {
            return Err(Error::config("max_train must be >= 2"));
        }
        if !(self.l2_lambda >= 0.0) || !(self.learning_rate > 0.0) || self.epochs == 0 {
            return Err(Error::config(
                "l2_lambda must be >= 0, learning_rate > 0 and epochs >= 1",
            ));
        }
        Ok(())
    }

    /// Default extreme-population size: a quarter of the pool per side,
    /// capped at half the training budget.
    pub fn default_per_side(&self, pool_len: usize) -> usize {
        (pool_len / 4).min(self.max_train / 2).max(1)
    }
}

/// Indices of the `per_side` highest-scoring (positives) and lowest-scoring
/// (negatives) latents. Ties go to the lower pool index; the two sets are
/// disjoint.
pub fn select_extremes<T: Scalar>(pool: &LabeledPool<T>, per_side: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if per_side == 0 {
        return Err(Error::input("per_side must be >= 1"));
    }
    if per_side.saturating_mul(2) > pool.len() {
        return Err(Error::input(format!(
            "cannot take {per_side} per side from a pool of {}",
            pool.len()
        )));
    }
    let s = &pool.scores;
    let mut desc: Vec<usize> = (0..pool.len()).collect();
    desc.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let positives: Vec<usize> = desc[..per_side].to_vec();

    let mut rest: Vec<usize> = desc[per_side..].to_vec();
    rest.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap().then(a.cmp(&b)));
    let negatives = rest[..per_side].to_vec();
    Ok((positives, negatives))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEvaluation {
    pub accuracy: f64,
    pub average_distance: f64,
}

/// Positives are correct when strictly on the positive side, negatives when
/// strictly on the negative side.
pub fn evaluate_boundary<T: Scalar>(
    b: &AttributeBoundary<T>,
    pos: &[LatentVector<T>],
    neg: &[LatentVector<T>],
) -> Result<BoundaryEvaluation> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::input("evaluation sets must be nonempty"));
    }
    let mut correct = 0usize;
    let mut dist = 0.0f64;
    for w in pos {
        let d = signed_distance(w, b)?;
        correct += usize::from(d > T::zero());
        dist += d.abs().as_f64();
    }
    for w in neg {
        let d = signed_distance(w, b)?;
        correct += usize::from(d < T::zero());
        dist += d.abs().as_f64();
    }
    let n = (pos.len() + neg.len()) as f64;
    Ok(BoundaryEvaluation {
        accuracy: correct as f64 / n,
        average_distance: dist / n,
    })
}

struct Split<'a, T> {
    train: Vec<&'a LatentVector<T>>,
    holdout: Vec<&'a LatentVector<T>>,
}

fn shuffled_split<'a, T>(side: &'a [LatentVector<T>], cap: usize, holdout_fraction: f64, seed: u64) -> Split<'a, T> {
    let mut idx: Vec<usize> = (0..side.len()).collect();
    idx.shuffle(&mut seeding::rng(seed));
    idx.truncate(cap);
    let n = idx.len();
    let holdout = ((holdout_fraction * n as f64).floor() as usize).min(n.saturating_sub(1));
    let (train, held) = idx.split_at(n - holdout);
    Split {
        train: train.iter().map(|&i| &side[i]).collect(),
        holdout: held.iter().map(|&i| &side[i]).collect(),
    }
}

/// Trains a unit-normal boundary separating `pos` from `neg`.
///
/// Each side is shuffled with a seeded RNG, truncated to `max_train / 2`,
/// and its last `holdout_fraction` is held out for validation (at least one
/// point per side stays in training). `meta.n_train` counts every vector
/// used, both splits; `meta.average_distance` is the mean absolute signed
/// distance of the training split under the unit normal.
pub fn train_linear_boundary<T: Scalar>(
    attribute: &str,
    pos: &[LatentVector<T>],
    neg: &[LatentVector<T>],
    cfg: &SvmConfig,
) -> Result<AttributeBoundary<T>> {
    cfg.validate()?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::input("both populations must be nonempty"));
    }
    let dim = pos[0].dim();
    if let Some(w) = pos.iter().chain(neg).find(|w| w.dim() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            found: w.dim(),
        });
    }

    let cap = cfg.max_train / 2;
    let p = shuffled_split(pos, cap, cfg.holdout_fraction, seeding::derive(cfg.seed, "svm-pos", 0));
    let n = shuffled_split(neg, cap, cfg.holdout_fraction, seeding::derive(cfg.seed, "svm-neg", 0));

    let first = p.train[0].as_slice();
    let all_same = p
        .train
        .iter()
        .chain(&n.train)
        .chain(&p.holdout)
        .chain(&n.holdout)
        .all(|w| w.as_slice() == first);
    if all_same {
        return Err(Error::Training(format!(
            "`{attribute}`: every training point is identical"
        )));
    }

    let samples: Vec<(&[T], T)> = p
        .train
        .iter()
        .map(|w| (w.as_slice(), T::one()))
        .chain(n.train.iter().map(|w| (w.as_slice(), -T::one())))
        .collect();

    let lambda = T::of(cfg.l2_lambda);
    let mut weights = vec![T::zero(); dim];
    let mut bias = T::zero();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = seeding::derived_rng(cfg.seed, "svm-order", 0);
    for epoch in 0..cfg.epochs {
        let eta = T::of(cfg.learning_rate / (1.0 + epoch as f64));
        let shrink = T::one() - eta * lambda;
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = samples[i];
            let margin = y * (scalar::dot(&weights, x) + bias);
            weights.iter_mut().for_each(|wj| *wj = *wj * shrink);
            if margin < T::one() {
                let step = eta * y;
                weights.iter_mut().zip(x).for_each(|(wj, &xj)| *wj = *wj + step * xj);
                bias = bias + step;
            }
        }
    }

    let mut boundary = AttributeBoundary::new(attribute, weights, bias)
        .map_err(|_| Error::Training(format!("`{attribute}`: weights collapsed to zero")))?;

    let mean_side = |set: &[&LatentVector<T>]| -> Result<f64> {
        let mut acc = 0.0;
        for w in set {
            acc += signed_distance(w, &boundary)?.as_f64();
        }
        Ok(acc / set.len() as f64)
    };
    if mean_side(&p.train)? < mean_side(&n.train)? {
        let flipped: Vec<T> = boundary.normal().iter().map(|&v| -v).collect();
        boundary = AttributeBoundary::new(attribute, flipped, -boundary.bias())?;
    }

    let mut dist = 0.0;
    for w in p.train.iter().chain(&n.train) {
        dist += signed_distance(w, &boundary)?.abs().as_f64();
    }
    let average_distance = dist / (p.train.len() + n.train.len()) as f64;

    let (val_pos, val_neg) = if p.holdout.is_empty() && n.holdout.is_empty() {
        (&p.train, &n.train)
    } else {
        (&p.holdout, &n.holdout)
    };
    let mut correct = 0usize;
    for w in val_pos.iter() {
        correct += usize::from(signed_distance(w, &boundary)? > T::zero());
    }
    for w in val_neg.iter() {
        correct += usize::from(signed_distance(w, &boundary)? < T::zero());
    }
    let validation_accuracy = correct as f64 / (val_pos.len() + val_neg.len()) as f64;

    boundary.with_meta(BoundaryMeta {
        n_train: p.train.len() + p.holdout.len() + n.train.len() + n.holdout.len(),
        validation_accuracy,
        average_distance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Binary,
    OneVsOneVsNeutral,
    OneVsAll,
}

pub const NEUTRAL: &str = "neutral";

fn subsample<T: Clone>(items: &[T], k: usize, seed: u64) -> Vec<T> {
    if items.len() <= k {
        return items.to_vec();
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut seeding::rng(seed));
    idx.truncate(k);
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Trains every boundary a scheme calls for. Boundaries are returned in
/// pool-name order and named after their positive pool.
pub fn train_attribute_suite<T: Scalar>(
    pools: &BTreeMap<String, LabeledPool<T>>,
    scheme: Scheme,
    cfg: &SvmConfig,
) -> Result<Vec<AttributeBoundary<T>>> {
    match scheme {
        Scheme::Binary => {
            if pools.len() != 1 {
                return Err(Error::config(format!(
                    "binary scheme takes exactly one pool, got {}",
                    pools.len()
                )));
            }
            let (name, pool) = pools.iter().next().expect("one pool");
            let per_side = cfg.default_per_side(pool.len());
            let (pi, ni) = select_extremes(pool, per_side)?;
            let pos: Vec<_> = pi.iter().map(|&i| pool.latents[i].clone()).collect();
            let neg: Vec<_> = ni.iter().map(|&i| pool.latents[i].clone()).collect();
            Ok(vec![train_linear_boundary(name, &pos, &neg, cfg)?])
        }
        Scheme::OneVsOneVsNeutral => {
            let neutral = pools
                .get(NEUTRAL)
                .ok_or_else(|| Error::config("one_vs_one_vs_neutral requires a pool named `neutral`"))?;
            pools
                .iter()
                .filter(|(name, _)| name.as_str() != NEUTRAL)
                .enumerate()
                .map(|(k, (name, pool))| {
                    let size = pool.len().min(neutral.len());
                    let seed = seeding::derive(cfg.seed, "suite-ovn", k as u64);
                    let pos = subsample(&pool.latents, size, seed);
                    let neg = subsample(&neutral.latents, size, seed.wrapping_add(1));
                    train_linear_boundary(name, &pos, &neg, cfg)
                })
                .collect()
        }
        Scheme::OneVsAll => {
            if pools.len() < 2 {
                return Err(Error::config("one_vs_all requires at least two pools"));
            }
            pools
                .iter()
                .enumerate()
                .map(|(k, (name, pool))| {
                    let others: Vec<LatentVector<T>> = pools
                        .iter()
                        .filter(|(other, _)| *other != name)
                        .flat_map(|(_, p)| p.latents.iter().cloned())
                        .collect();
                    let size = pool.len().min(others.len());
                    let seed = seeding::derive(cfg.seed, "suite-ova", k as u64);
                    let pos = subsample(&pool.latents, size, seed);
                    let neg = subsample(&others, size, seed.wrapping_add(1));
                    train_linear_boundary(name, &pos, &neg, cfg)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f64]) -> LatentVector<f64> {
        LatentVector::new(v.to_vec()).unwrap()
    }

    fn pool(scores: &[f64]) -> LabeledPool<f64> {
        let latents = scores.iter().map(|&s| lv(&[s])).collect();
        LabeledPool::new("a", latents, scores.to_vec()).unwrap()
    }

    #[test]
    fn extremes_order_statistics() {
        let (p, n) = select_extremes(&pool(&[0.1, 0.9, 0.5, 0.2, 0.8]), 2).unwrap();
        assert_eq!(p, vec![1, 4]);
        assert_eq!(n, vec![0, 3]);
    }

    #[test]
    fn extremes_tie_break_by_index() {
        let (p, n) = select_extremes(&pool(&[0.5; 4]), 1).unwrap();
        assert_eq!(p, vec![0]);
        assert_eq!(n, vec![1]);
    }

    #[test]
    fn extremes_too_large() {
        assert!(matches!(select_extremes(&pool(&[0.0; 5]), 3), Err(Error::Input(_))));
        assert!(matches!(select_extremes(&pool(&[0.0; 5]), 0), Err(Error::Input(_))));
    }

    #[test]
    fn pool_length_mismatch() {
        assert!(LabeledPool::new("a", vec![lv(&[1.0])], vec![]).is_err());
        assert!(LabeledPool::new("a", vec![lv(&[1.0])], vec![f64::NAN]).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let b = AttributeBoundary::new("a", vec![0., 1.], 0.).unwrap();
        let e = evaluate_boundary(&b, &[lv(&[0., 2.])], &[lv(&[0., -2.])]).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.average_distance, 2.0);
        let e = evaluate_boundary(&b, &[lv(&[0., -1.])], &[lv(&[0., 1.])]).unwrap();
        assert_eq!(e.accuracy, 0.0);
        let e = evaluate_boundary(
            &b,
            &[lv(&[0., 1.]), lv(&[0., -1.])],
            &[lv(&[0., -1.]), lv(&[0., 1.])],
        )
        .unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert!(matches!(evaluate_boundary(&b, &[], &[lv(&[0., 1.])]), Err(Error::Input(_))));
    }

    fn cluster(center: f64, n: usize, seed: u64) -> Vec<LatentVector<f64>> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seeding::rng(seed);
        (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..4).map(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
                v[0] += center;
                lv(&v)
            })
            .collect()
    }

    #[test]
    fn separable_clusters_validate_perfectly() {
        let pos = cluster(3.0, 100, 1);
        let neg = cluster(-3.0, 100, 2);
        let b = train_linear_boundary("yaw", &pos, &neg, &SvmConfig::default()).unwrap();
        assert_eq!(b.meta.validation_accuracy, 1.0);
        assert_eq!(b.meta.n_train, 200);
        assert!(b.normal()[0] > 0.9);
        let mean_pos: f64 = pos.iter().map(|w| signed_distance(w, &b).unwrap()).sum::<f64>() / 100.0;
        assert!(mean_pos > 0.0);
    }

    #[test]
    fn swapped_sides_flip_orientation() {
        let pos = cluster(-3.0, 50, 1);
        let neg = cluster(3.0, 50, 2);
        let b = train_linear_boundary("a", &pos, &neg, &SvmConfig::default()).unwrap();
        assert!(b.normal()[0] < -0.9);
    }

    #[test]
    fn degenerate_single_point() {
        let w = lv(&[1.0, 2.0]);
        assert!(matches!(
            train_linear_boundary("a", std::slice::from_ref(&w), std::slice::from_ref(&w), &SvmConfig::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            train_linear_boundary("a", &[lv(&[1.0, 2.0])], &[lv(&[1.0])], &SvmConfig::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cap_limits_vectors_touched() {
        let pos = cluster(3.0, 500, 3);
        let neg = cluster(-3.0, 500, 4);
        let cfg = SvmConfig { max_train: 40, ..SvmConfig::default() };
        let b = train_linear_boundary("a", &pos, &neg, &cfg).unwrap();
        assert_eq!(b.meta.n_train, 40);
    }

    #[test]
    fn config_validation() {
        let bad = SvmConfig { holdout_fraction: 0.5, ..SvmConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SvmConfig { max_train: 1, ..SvmConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let pos = cluster(1.0, 200, 5);
        let neg = cluster(-1.0, 200, 6);
        let cfg = SvmConfig { seed: 9, ..SvmConfig::default() };
        let a = train_linear_boundary("a", &pos, &neg, &cfg).unwrap();
        let b = train_linear_boundary("a", &pos, &neg, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn suite_requires_neutral() {
        let mut pools = BTreeMap::new();
        pools.insert("happy".to_string(), LabeledPool::members("happy", cluster(1.0, 10, 1)));
        assert!(matches!(
            train_attribute_suite(&pools, Scheme::OneVsOneVsNeutral, &SvmConfig::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train_attribute_suite(&pools, Scheme::OneVsAll, &SvmConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
