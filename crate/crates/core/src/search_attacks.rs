//! Query-based attacks (single pixel, greedy local search) and the Jacobian
//! saliency map attack.
//!
//! The two black-box attacks only see a [`QueryModel`], which answers logits
//! and has no gradient path. Every row submitted to it counts as one query.
//! JSMA is white-box but uses nothing beyond the Jacobian of the logits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack_api::PredictFn;
use crate::autodiff::{softmax, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows evaluated per model call by the black-box attacks.
const QUERY_CHUNK: usize = 64;

/// Logit oracle for black-box attacks.
pub trait QueryModel {
    fn query(&self, x: &Tensor) -> Result<Tensor>;
}

/// Exposes any predictor as a query-only oracle.
pub struct Queries<'a, P: ?Sized>(pub &'a P);

impl<P: PredictFn + ?Sized> QueryModel for Queries<'_, P> {
    fn query(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.0.predict(&tape.constant(x.clone()))?.single()?.value())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchBudget {
    pub max_queries: usize,
    pub clip_min: f64,
    pub clip_max: f64,
    /// Per-pixel perturbation magnitude for local search.
    pub p: f64,
}

impl SearchBudget {
    pub fn validate_params(&self) -> Result<()> {
        if self.max_queries == 0 {
            return Err(Error::contract("search budget needs at least one query"));
        }
        if !(self.clip_min < self.clip_max) || !(self.p.is_finite() && self.p >= 0.0) {
            return Err(Error::contract(format!("invalid search budget {self:?}")));
        }
        Ok(())
    }

    fn validate(&self, x: &Tensor) -> Result<()> {
        self.validate_params()?;
        check_single_image(x, self.clip_min, self.clip_max)
    }
}

fn check_single_image(x: &Tensor, lo: f64, hi: f64) -> Result<()> {
    if x.ndim() != 2 || x.batch_size() != 1 {
        return Err(Error::contract(format!(
            "search attacks take a single 1×D image, got {:?}",
            x.shape()
        )));
    }
    if x.data().iter().any(|v| !(*v >= lo && *v <= hi)) {
        return Err(Error::contract("image outside clip range"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub x_adv: Tensor,
    pub success: bool,
    pub queries: usize,
}

struct Counter<'a> {
    model: &'a dyn QueryModel,
    used: usize,
    max: usize,
}

impl Counter<'_> {
    fn remaining(&self) -> usize {
        self.max - self.used
    }

    fn query(&mut self, rows: &[Vec<f64>]) -> Result<Tensor> {
        debug_assert!(rows.len() <= self.remaining());
        self.used += rows.len();
        let d = rows[0].len();
        let data = rows.iter().flatten().copied().collect();
        self.model.query(&Tensor::new(vec![rows.len(), d], data)?)
    }
}

fn misclassified(logits: &[f64], label: usize) -> bool {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = k;
        }
    }
    best != label
}

fn seeded_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Tries saturating one pixel at a time (to `clip_min`, then `clip_max`) in a
/// seeded random pixel order; returns the first misclassified variant.
pub fn single_pixel_attack(
    x: &Tensor,
    label: usize,
    model: &dyn QueryModel,
    budget: &SearchBudget,
    seed: u64,
) -> Result<SearchOutcome> {
    budget.validate(x)?;
    let mut counter = Counter {
        model,
        used: 0,
        max: budget.max_queries,
    };
    let base = x.data().to_vec();
    let clean = counter.query(std::slice::from_ref(&base))?;
    if misclassified(clean.row(0), label) {
        return Ok(SearchOutcome {
            x_adv: x.clone(),
            success: true,
            queries: counter.used,
        });
    }

    let candidates: Vec<(usize, f64)> = seeded_order(base.len(), seed)
        .into_iter()
        .flat_map(|i| [(i, budget.clip_min), (i, budget.clip_max)])
        .filter(|&(i, v)| base[i] != v)
        .collect();

    for chunk in candidates.chunks(QUERY_CHUNK) {
        let take = chunk.len().min(counter.remaining());
        if take == 0 {
            break;
        }
        let rows: Vec<Vec<f64>> = chunk[..take]
            .iter()
            .map(|&(i, v)| {
                let mut r = base.clone();
                r[i] = v;
                r
            })
            .collect();
        let logits = counter.query(&rows)?;
        if let Some(hit) = (0..take).find(|&r| misclassified(logits.row(r), label)) {
            return Ok(SearchOutcome {
                x_adv: Tensor::new(x.shape().to_vec(), rows[hit].clone())?,
                success: true,
                queries: counter.used,
            });
        }
    }
    Ok(SearchOutcome {
        x_adv: x.clone(),
        success: false,
        queries: counter.used,
    })
}

/// Score of one pixel: the largest drop in true-class probability among the
/// `±p` variants, and the signed change that achieves it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelScore {
    pub pixel: usize,
    pub drop: f64,
    pub delta: f64,
}

/// Scores pixels in `order` until the query budget runs out.
fn score_pixels(
    current: &[f64],
    p_true: f64,
    label: usize,
    order: &[usize],
    budget: &SearchBudget,
    counter: &mut Counter<'_>,
) -> Result<Vec<PixelScore>> {
    let variants: Vec<(usize, f64)> = order
        .iter()
        .flat_map(|&i| [(i, budget.p), (i, -budget.p)])
        .filter(|&(i, d)| (current[i] + d).clamp(budget.clip_min, budget.clip_max) != current[i])
        .collect();
    let mut best: Vec<Option<PixelScore>> = vec![None; current.len()];
    for chunk in variants.chunks(QUERY_CHUNK) {
        let take = chunk.len().min(counter.remaining());
        if take == 0 {
            break;
        }
        let rows: Vec<Vec<f64>> = chunk[..take]
            .iter()
            .map(|&(i, d)| {
                let mut r = current.to_vec();
                r[i] = (r[i] + d).clamp(budget.clip_min, budget.clip_max);
                r
            })
            .collect();
        let probs = softmax(&counter.query(&rows)?);
        for (r, &(i, d)) in chunk[..take].iter().enumerate() {
            let drop = p_true - probs.row(r)[label];
            if best[i].is_none_or(|s| drop > s.drop) {
                best[i] = Some(PixelScore {
                    pixel: i,
                    drop,
                    delta: d,
                });
            }
        }
    }
    // Ranking order: larger drop first, then earlier position in `order`.
    let position: std::collections::HashMap<usize, usize> =
        order.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let mut scored: Vec<PixelScore> = best.into_iter().flatten().collect();
    scored.sort_by(|a, b| {
        b.drop
            .total_cmp(&a.drop)
            .then(position[&a.pixel].cmp(&position[&b.pixel]))
    });
    Ok(scored)
}

/// Greedy local search: each round scores every pixel by the drop in
/// true-class probability under a `±p` change and applies the best
/// `neighborhood_size` changes, until misclassification or until rounds or
/// queries run out.
pub fn local_search_attack(
    x: &Tensor,
    label: usize,
    model: &dyn QueryModel,
    budget: &SearchBudget,
    neighborhood_size: usize,
    rounds: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    budget.validate(x)?;
    if neighborhood_size == 0 {
        return Err(Error::contract("neighborhood size must be positive"));
    }
    let mut counter = Counter {
        model,
        used: 0,
        max: budget.max_queries,
    };
    let mut current = x.data().to_vec();
    let logits = counter.query(std::slice::from_ref(&current))?;
    if misclassified(logits.row(0), label) {
        return Ok(SearchOutcome {
            x_adv: x.clone(),
            success: true,
            queries: counter.used,
        });
    }
    let mut p_true = softmax(&logits).row(0)[label];
    let order = seeded_order(current.len(), seed);

    for _ in 0..rounds {
        // Leave room for the verification query.
        if counter.remaining() < 2 {
            break;
        }
        counter.max -= 1;
        let scores = score_pixels(&current, p_true, label, &order, budget, &mut counter)?;
        counter.max += 1;
        let chosen: Vec<&PixelScore> = scores
            .iter()
            .filter(|s| s.drop > 0.0)
            .take(neighborhood_size)
            .collect();
        if chosen.is_empty() {
            break;
        }
        for s in chosen {
            current[s.pixel] =
                (current[s.pixel] + s.delta).clamp(budget.clip_min, budget.clip_max);
        }
        let logits = counter.query(std::slice::from_ref(&current))?;
        if misclassified(logits.row(0), label) {
            return Ok(SearchOutcome {
                x_adv: Tensor::new(x.shape().to_vec(), current)?,
                success: true,
                queries: counter.used,
            });
        }
        p_true = softmax(&logits).row(0)[label];
    }
    Ok(SearchOutcome {
        x_adv: Tensor::new(x.shape().to_vec(), current)?,
        success: false,
        queries: counter.used,
    })
}

/// Pixel ranking used by the first local-search round (exposed for analysis).
pub fn rank_pixels(
    x: &Tensor,
    label: usize,
    model: &dyn QueryModel,
    budget: &SearchBudget,
    seed: u64,
) -> Result<Vec<PixelScore>> {
    budget.validate(x)?;
    let mut counter = Counter {
        model,
        used: 0,
        max: budget.max_queries,
    };
    let p_true = softmax(&counter.query(&[x.data().to_vec()])?).row(0)[label];
    let order = seeded_order(x.numel(), seed);
    score_pixels(x.data(), p_true, label, &order, budget, &mut counter)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsmaConfig {
    /// Change applied to both pixels of the chosen pair; the sign selects
    /// increasing or decreasing mode.
    pub theta: f64,
    /// Maximum fraction of pixels that may be changed.
    pub gamma: f64,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl JsmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta == 0.0 || !self.theta.is_finite() {
            return Err(Error::contract("jsma theta must be nonzero"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::contract(format!("jsma gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::contract("jsma clip range is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JsmaOutcome {
    pub x_adv: Tensor,
    pub success: bool,
    pub changed_pixels: usize,
}

/// `K × D` Jacobian of the logits of a single image, one backward pass per class.
pub fn logit_jacobian(x: &Tensor, predict: &dyn PredictFn) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = predict.predict(&xv)?;
    let z = *out.single()?;
    let logits = z.value();
    let k = logits.row_len();
    let mut rows = Vec::with_capacity(k * x.numel());
    for class in 0..k {
        let zk = z.gather(&[class])?.sum();
        let g = tape.backward(zk)?;
        rows.extend_from_slice(g.wrt(&xv).expect("input is a leaf").data());
    }
    Ok((Tensor::new(vec![k, x.numel()], rows)?, logits))
}

/// Best admissible pixel pair under the saliency rule, or `None`.
///
/// With `α = ∂Z_t/∂p + ∂Z_t/∂q` and `β = Σ_{k≠t}(∂Z_k/∂p + ∂Z_k/∂q)`, a pair is
/// admissible when `α > 0, β < 0` (increasing mode) or `α < 0, β > 0`
/// (decreasing mode); its value is `|α|·|β|`. Ties keep the lexicographically
/// smallest pair. `allowed(p, q)` filters pairs, e.g. by the pixel budget.
pub fn select_pair(
    jacobian: &Tensor,
    target: usize,
    domain: &[usize],
    increasing: bool,
    allowed: impl Fn(usize, usize) -> bool,
) -> Option<(usize, usize)> {
    let d = jacobian.row_len();
    let k = jacobian.batch_size();
    let alpha: Vec<f64> = jacobian.row(target).to_vec();
    let beta: Vec<f64> = (0..d)
        .map(|i| (0..k).filter(|&c| c != target).map(|c| jacobian.row(c)[i]).sum())
        .collect();

    let mut sorted = domain.to_vec();
    sorted.sort_unstable();
    let mut best: Option<((usize, usize), f64)> = None;
    for (a, &p) in sorted.iter().enumerate() {
        for &q in &sorted[a + 1..] {
            let al = alpha[p] + alpha[q];
            let be = beta[p] + beta[q];
            let ok = if increasing {
                al > 0.0 && be < 0.0
            } else {
                al < 0.0 && be > 0.0
            };
            if !ok || !allowed(p, q) {
                continue;
            }
            let value = al.abs() * be.abs();
            if best.is_none_or(|(_, v)| value > v) {
                best = Some(((p, q), value));
            }
        }
    }
    best.map(|(pair, _)| pair)
}

/// Targeted Jacobian saliency map attack on a single `1×D` image.
pub fn jsma(
    x: &Tensor,
    target: usize,
    predict: &dyn PredictFn,
    cfg: &JsmaConfig,
) -> Result<JsmaOutcome> {
    cfg.validate()?;
    check_single_image(x, cfg.clip_min, cfg.clip_max)?;
    let n = x.numel();
    let max_changed = (cfg.gamma * n as f64).ceil() as usize;
    let increasing = cfg.theta > 0.0;
    let saturated = |v: f64| {
        if increasing {
            v >= cfg.clip_max
        } else {
            v <= cfg.clip_min
        }
    };

    let mut current = x.data().to_vec();
    let mut changed = vec![false; n];
    let mut n_changed = 0;
    let mut domain: Vec<usize> = (0..n).filter(|&i| !saturated(current[i])).collect();

    loop {
        let xt = Tensor::new(x.shape().to_vec(), current.clone())?;
        let (jac, logits) = logit_jacobian(&xt, predict)?;
        if target >= logits.row_len() {
            return Err(Error::Index {
                op: "jsma",
                index: target,
                bound: logits.row_len(),
            });
        }
        if logits.argmax_rows()[0] == target {
            return Ok(JsmaOutcome {
                x_adv: xt,
                success: true,
                changed_pixels: n_changed,
            });
        }
        let room = max_changed - n_changed;
        let fits = |p: usize, q: usize| (!changed[p] as usize + !changed[q] as usize) <= room;
        let Some((p, q)) = select_pair(&jac, target, &domain, increasing, fits) else {
            return Ok(JsmaOutcome {
                x_adv: xt,
                success: false,
                changed_pixels: n_changed,
            });
        };
        for i in [p, q] {
            current[i] = (current[i] + cfg.theta).clamp(cfg.clip_min, cfg.clip_max);
            if !changed[i] {
                changed[i] = true;
                n_changed += 1;
            }
        }
        domain.retain(|&i| !saturated(current[i]));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, Model};
    use std::cell::Cell;

    struct Counting<'a> {
        model: &'a Model,
        rows: Cell<usize>,
    }

    impl QueryModel for Counting<'_> {
        fn query(&self, x: &Tensor) -> Result<Tensor> {
            self.rows.set(self.rows.get() + x.batch_size());
            self.model.logits(x)
        }
    }

    fn linear(w: &[&[f64]], b: &[f64]) -> Model {
        let cols = w[0].len();
        Model::from_params(
            Architecture::mlp(&[w.len(), cols]).unwrap(),
            vec![Tensor::from_rows(w).unwrap(), Tensor::new(vec![cols], b.to_vec()).unwrap()],
        )
        .unwrap()
    }

    fn budget(max_queries: usize) -> SearchBudget {
        SearchBudget {
            max_queries,
            clip_min: 0.0,
            clip_max: 1.0,
            p: 0.5,
        }
    }

    #[test]
    fn single_pixel_on_constant_classifier_fails() {
        let m = Model::zeros(Architecture::mlp(&[4, 3]).unwrap()).unwrap();
        let x = Tensor::from_rows(&[&[0.2, 0.4, 0.6, 0.8]]).unwrap();
        let q = Counting { model: &m, rows: Cell::new(0) };
        let out = single_pixel_attack(&x, 0, &q, &budget(100), 1).unwrap();
        assert!(!out.success);
        assert_eq!(out.x_adv, x);
        // 1 clean query + 2 variants per pixel.
        assert_eq!(out.queries, 9);
        assert_eq!(q.rows.get(), out.queries);
    }

    #[test]
    fn single_pixel_threshold_model() {
        // Class 1 wins iff 3·x₂ > 1.5 + ... : logits (0.9, x₂·2).
        let m = linear(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 2.0]], &[0.9, 0.0]);
        let x = Tensor::from_rows(&[&[0.3, 0.7, 0.2]]).unwrap();
        assert_eq!(m.predict_classes(&x).unwrap(), vec![0]);
        let q = Queries(&m);
        let out = single_pixel_attack(&x, 0, &q, &budget(100), 4).unwrap();
        assert!(out.success);
        let changed: Vec<usize> = (0..3).filter(|&i| out.x_adv.data()[i] != x.data()[i]).collect();
        assert_eq!(changed, vec![2]);
        assert_eq!(out.x_adv.data()[2], 1.0);
    }

    #[test]
    fn single_pixel_changes_at_most_one_pixel_and_respects_budget() {
        let m = Model::init(Architecture::mlp(&[9, 5, 3]).unwrap(), 2).unwrap();
        for seed in 0..20 {
            let x = Tensor::new(vec![1, 9], (0..9).map(|i| ((i * 7 + seed) % 10) as f64 / 10.0).collect()).unwrap();
            let label = m.predict_classes(&x).unwrap()[0];
            let q = Counting { model: &m, rows: Cell::new(0) };
            let out = single_pixel_attack(&x, label, &q, &budget(7), seed as u64).unwrap();
            let l0 = x.data().iter().zip(out.x_adv.data()).filter(|(a, b)| a != b).count();
            assert!(l0 <= 1);
            assert!(out.queries <= 7 && q.rows.get() == out.queries);
            if out.success {
                assert_ne!(m.predict_classes(&out.x_adv).unwrap()[0], label);
            }
        }
    }

    #[test]
    fn seeded_order_is_deterministic() {
        let m = Model::init(Architecture::mlp(&[16, 4]).unwrap(), 8).unwrap();
        let x = Tensor::full(vec![1, 16], 0.5);
        let label = m.predict_classes(&x).unwrap()[0];
        let a = single_pixel_attack(&x, label, &Queries(&m), &budget(40), 3).unwrap();
        let b = single_pixel_attack(&x, label, &Queries(&m), &budget(40), 3).unwrap();
        assert_eq!(a, b);
        let c = local_search_attack(&x, label, &Queries(&m), &budget(200), 2, 3, 3).unwrap();
        let d = local_search_attack(&x, label, &Queries(&m), &budget(200), 2, 3, 3).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn local_search_already_misclassified() {
        let m = linear(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let x = Tensor::from_rows(&[&[0.2, 0.8]]).unwrap();
        let out = local_search_attack(&x, 0, &Queries(&m), &budget(10), 5, 10, 0).unwrap();
        assert!(out.success);
        assert_eq!(out.x_adv, x);
        assert_eq!(out.queries, 1);
    }

    #[test]
    fn local_search_respects_query_budget() {
        let m = Model::init(Architecture::mlp(&[25, 6, 4]).unwrap(), 5).unwrap();
        let x = Tensor::new(vec![1, 25], (0..25).map(|i| (i % 5) as f64 / 4.0).collect()).unwrap();
        let label = m.predict_classes(&x).unwrap()[0];
        for max in [1, 2, 3, 17, 60, 500] {
            let q = Counting { model: &m, rows: Cell::new(0) };
            let out = local_search_attack(&x, label, &q, &budget(max), 5, 10, 1).unwrap();
            assert!(out.queries <= max, "{} > {max}", out.queries);
            assert_eq!(q.rows.get(), out.queries);
            assert!(out.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn local_search_ranking_follows_weight_magnitude() {
        // Only the true-class logit depends on the input, so the probability
        // drop from a ±p change grows with |w_i|.
        let w: [f64; 5] = [0.4, -1.5, 0.9, -0.2, 2.2];
        let rows: Vec<[f64; 2]> = w.iter().map(|&wi| [wi, 0.0]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = linear(&refs, &[0.0, 0.5]);
        let x = Tensor::full(vec![1, 5], 0.5);
        let mut b = budget(100);
        b.p = 0.25;
        let ranked: Vec<usize> = rank_pixels(&x, 0, &Queries(&m), &b, 9)
            .unwrap()
            .iter()
            .map(|s| s.pixel)
            .collect();
        let mut by_weight: Vec<usize> = (0..5).collect();
        by_weight.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()));
        assert_eq!(ranked, by_weight);
    }

    #[test]
    fn local_search_can_flip_a_linear_model() {
        let m = linear(&[&[1.0, 0.0], &[-1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0]], &[0.0, 0.3]);
        let x = Tensor::full(vec![1, 4], 0.5);
        assert_eq!(m.predict_classes(&x).unwrap(), vec![1]);
        let out = local_search_attack(&x, 1, &Queries(&m), &budget(100), 2, 5, 0).unwrap();
        assert!(out.success);
        assert_eq!(m.predict_classes(&out.x_adv).unwrap(), vec![0]);
    }

    /// Exhaustive oracle over all pairs, written directly from the weight matrix
    /// (the Jacobian of a linear model is Wᵀ).
    fn brute_force_pair(w: &[Vec<f64>], target: usize, increasing: bool) -> Option<(usize, usize)> {
        let d = w.len();
        let k = w[0].len();
        let mut best = None;
        let mut best_val = f64::NEG_INFINITY;
        for p in 0..d {
            for q in 0..d {
                if q <= p {
                    continue;
                }
                let a = w[p][target] + w[q][target];
                let b: f64 = (0..k).filter(|&c| c != target).map(|c| w[p][c] + w[q][c]).sum();
                let admissible = if increasing { a > 0.0 && b < 0.0 } else { a < 0.0 && b > 0.0 };
                if admissible && a.abs() * b.abs() > best_val {
                    best_val = a.abs() * b.abs();
                    best = Some((p, q));
                }
            }
        }
        best
    }

    #[test]
    fn jsma_first_pair_matches_exhaustive_enumeration() {
        let w = vec![
            vec![0.5, -0.2, 0.1],
            vec![-0.3, 0.8, -0.4],
            vec![0.9, -0.6, -0.1],
            vec![0.2, 0.3, -0.65],
        ];
        let refs: Vec<&[f64]> = w.iter().map(|r| r.as_slice()).collect();
        let m = linear(&refs, &[0.0, 1.0, 0.0]);
        let x = Tensor::full(vec![1, 4], 0.3);
        let (jac, _) = logit_jacobian(&x, &m).unwrap();
        for target in 0..3 {
            for increasing in [true, false] {
                let domain: Vec<usize> = (0..4).collect();
                assert_eq!(
                    select_pair(&jac, target, &domain, increasing, |_, _| true),
                    brute_force_pair(&w, target, increasing),
                    "target {target}, increasing {increasing}"
                );
            }
        }
        // The full attack applies that pair first (gamma allows one pair only).
        let cfg = JsmaConfig { theta: 0.2, gamma: 0.5, clip_min: 0.0, clip_max: 1.0 };
        let out = jsma(&x, 0, &m, &cfg).unwrap();
        let (p, q) = brute_force_pair(&w, 0, true).unwrap();
        let changed: Vec<usize> = (0..4).filter(|&i| out.x_adv.data()[i] != 0.3).collect();
        assert_eq!(changed, vec![p, q]);
    }

    #[test]
    fn jsma_already_at_target_changes_nothing() {
        let m = linear(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let x = Tensor::from_rows(&[&[0.2, 0.8]]).unwrap();
        let cfg = JsmaConfig { theta: 1.0, gamma: 1.0, clip_min: 0.0, clip_max: 1.0 };
        let out = jsma(&x, 1, &m, &cfg).unwrap();
        assert!(out.success);
        assert_eq!(out.changed_pixels, 0);
        assert_eq!(out.x_adv, x);
    }

    #[test]
    fn jsma_pixel_budget_and_success_flag() {
        let m = Model::init(Architecture::mlp(&[16, 8, 4]).unwrap(), 13).unwrap();
        for (seed, gamma) in [(0u64, 0.1), (1, 0.25), (2, 0.5), (3, 1.0)] {
            let x = Tensor::new(
                vec![1, 16],
                (0..16).map(|i| ((i as u64 * 5 + seed) % 7) as f64 / 7.0).collect(),
            )
            .unwrap();
            let clean = m.predict_classes(&x).unwrap()[0];
            let target = (clean + 1) % 4;
            for theta in [1.0, -1.0] {
                let cfg = JsmaConfig { theta, gamma, clip_min: 0.0, clip_max: 1.0 };
                let out = jsma(&x, target, &m, &cfg).unwrap();
                let diff = x.data().iter().zip(out.x_adv.data()).filter(|(a, b)| a != b).count();
                assert!(diff <= out.changed_pixels);
                assert!(out.changed_pixels <= (gamma * 16.0_f64).ceil() as usize);
                assert!(out.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
                if out.success {
                    assert_eq!(m.predict_classes(&out.x_adv).unwrap()[0], target);
                }
            }
        }
    }

    #[test]
    fn jsma_rejects_bad_parameters() {
        let m = linear(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let x = Tensor::from_rows(&[&[0.2, 0.8]]).unwrap();
        let mut cfg = JsmaConfig { theta: 0.0, gamma: 0.5, clip_min: 0.0, clip_max: 1.0 };
        assert!(jsma(&x, 0, &m, &cfg).is_err());
        cfg.theta = 1.0;
        cfg.gamma = 0.0;
        assert!(jsma(&x, 0, &m, &cfg).is_err());
    }
}
