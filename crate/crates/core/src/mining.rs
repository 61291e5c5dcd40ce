//! Positive-instance discovery in weakly labelled bags.
//!
//! For each weak category the representation is held fixed, every positive
//! bag's regions are scored, the best `top_k` become candidates, and a
//! latent-SVM alternation picks one candidate per bag: select the best
//! candidate under the current detector, refit the detector with selections
//! fixed, repeat until the selections stop changing.
//!
//! The refit minimises
//!
//! ```text
//! Γ(w) + α [ Σ_selected ℓ(+1, s) + Σ_other weak regions ℓ(−1, s) ]
//! ```
//!
//! starting from the current detector and returning the best iterate seen, so
//! the surrogate never increases across alternations.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Bag, Dataset, Label};
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::model::{score, Model, Slot};
use crate::objective::{hinge_loss, hinge_subgradient, regularizer, regularizer_grad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningAssignment {
    pub bag_id: String,
    pub category: String,
    pub region_index: usize,
    pub score: f64,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub top_k: usize,
    pub max_latent_iters: usize,
    pub use_background_margin: bool,
    /// Step cap of the inner detector refit.
    pub inner_max_steps: usize,
    /// Relative objective improvement below which the refit stops.
    pub inner_tolerance: f64,
    /// Initial step length of the normalised subgradient refit.
    pub inner_step: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            top_k: 10,
            max_latent_iters: 20,
            use_background_margin: true,
            inner_max_steps: 500,
            inner_tolerance: 1e-6,
            inner_step: 0.5,
        }
    }
}

impl MiningConfig {
    pub fn check(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("mining.top_k must be at least 1".into()));
        }
        if self.max_latent_iters == 0 {
            return Err(Error::InvalidConfig(
                "mining.max_latent_iters must be at least 1".into(),
            ));
        }
        if self.inner_max_steps == 0 || !(self.inner_step > 0.0) || !(self.inner_tolerance >= 0.0) {
            return Err(Error::InvalidConfig(
                "mining inner-fit settings must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-region detector scores, optionally as a margin over the background detector.
pub fn score_regions(model: &Model, bag: &Bag, category: &str, use_background_margin: bool) -> Result<Vec<f64>> {
    let slot = model.slot(category)?;
    bag.regions
        .iter()
        .map(|r| {
            let phi = model.repr.forward(&r.feature)?;
            Ok(margin_score(model, slot, &phi, use_background_margin))
        })
        .collect()
}

fn margin_score(model: &Model, slot: Slot, phi: &[f64], use_background_margin: bool) -> f64 {
    let s = model.score_feature(slot, phi);
    if use_background_margin {
        s - model.score_feature(Slot::Background, phi)
    } else {
        s
    }
}

/// Indices of the `k` highest scores, best first, ties to the lower index.
pub fn narrow_candidates(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("cannot narrow an empty score vector".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("candidate count must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Representation outputs for every weak region, `[bag][region]`.
pub fn weak_features(model: &Model, d: &Dataset) -> Result<Vec<Vec<Vec<f64>>>> {
    d.weak_bags
        .par_iter()
        .map(|b| b.regions.iter().map(|r| model.repr.forward(&r.feature)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub category: String,
    pub assignments: Vec<MiningAssignment>,
    /// Refined local detector; the model itself is not modified.
    pub detector: Vec<f64>,
    /// Surrogate value after each selection step and after each refit, in order.
    pub surrogate_trace: Vec<f64>,
    /// Number of selection steps performed.
    pub alternations: usize,
    /// Whether the selections reached a fixed point.
    pub fixed_point: bool,
    pub warnings: Vec<String>,
}

/// Latent-SVM refinement for one category. `candidates` maps weak-bag index
/// to its candidate regions; bags positive for `category` that are missing
/// from the map use all their regions.
pub fn latent_refine(
    model: &Model,
    d: &Dataset,
    category: &str,
    candidates: Option<&BTreeMap<usize, Vec<usize>>>,
    cfg: &MiningConfig,
    round: usize,
) -> Result<RefineOutcome> {
    model.check_covers(d)?;
    cfg.check()?;
    let feats = weak_features(model, d)?;
    refine_with_features(model, d, &feats, category, candidates, cfg, round)
}

struct Problem<'a> {
    feats: &'a [Vec<Vec<f64>>],
    /// Positive bags and their candidate regions.
    positives: Vec<(usize, Vec<usize>)>,
    alpha: f64,
    lambda: f64,
}

impl Problem<'_> {
    fn is_selected(&self, sel: &[usize], pos_slot: Option<usize>, region: usize) -> bool {
        pos_slot.is_some_and(|p| sel[p] == region)
    }

    /// Surrogate value and, optionally, its subgradient.
    fn eval(&self, w: &[f64], sel: &[usize], pos_of_bag: &[Option<usize>], want_grad: bool) -> (f64, Vec<f64>) {
        let f = w.len() - 1;
        let mut loss = 0.0;
        let mut grad = vec![0.0; if want_grad { w.len() } else { 0 }];
        for (bi, regions) in self.feats.iter().enumerate() {
            let pos_slot = pos_of_bag[bi];
            for (ri, phi) in regions.iter().enumerate() {
                let y = Label::from_bool(self.is_selected(sel, pos_slot, ri));
                let s = score(w, phi);
                loss += hinge_loss(y, s);
                if want_grad {
                    let ds = hinge_subgradient(y, s);
                    if ds != 0.0 {
                        for (g, p) in grad[..f].iter_mut().zip(phi) {
                            *g += ds * p;
                        }
                        grad[f] += ds;
                    }
                }
            }
        }
        let value = regularizer(w, self.lambda) + self.alpha * loss;
        if want_grad {
            let rg = regularizer_grad(w, self.lambda);
            for (g, r) in grad.iter_mut().zip(rg) {
                *g = self.alpha * *g + r;
            }
        }
        (value, grad)
    }

    fn select(&self, w: &[f64]) -> Vec<usize> {
        self.positives
            .iter()
            .map(|(bi, cands)| {
                let regions = &self.feats[*bi];
                let mut best = cands[0];
                let mut best_score = score(w, &regions[best]);
                for &c in &cands[1..] {
                    let s = score(w, &regions[c]);
                    if s > best_score || (s == best_score && c < best) {
                        best = c;
                        best_score = s;
                    }
                }
                best
            })
            .collect()
    }

    /// Normalised subgradient descent from `w0`; returns the best iterate and
    /// whether the relative improvement fell under the tolerance.
    fn refit(
        &self,
        w0: &[f64],
        sel: &[usize],
        pos_of_bag: &[Option<usize>],
        cfg: &MiningConfig,
    ) -> (Vec<f64>, f64, bool) {
        const PATIENCE: usize = 50;
        let (mut best_val, _) = self.eval(w0, sel, pos_of_bag, false);
        let mut best_w = w0.to_vec();
        let mut w = w0.to_vec();
        let mut checkpoint = best_val;
        for t in 1..=cfg.inner_max_steps {
            let (val, g) = self.eval(&w, sel, pos_of_bag, true);
            if val < best_val {
                best_val = val;
                best_w.clone_from(&w);
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return (best_w, best_val, true);
            }
            if t % PATIENCE == 0 {
                if checkpoint - best_val <= cfg.inner_tolerance * checkpoint.abs().max(f64::MIN_POSITIVE) {
                    return (best_w, best_val, true);
                }
                checkpoint = best_val;
            }
            let step = cfg.inner_step / (t as f64).sqrt() / norm;
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= step * gi;
            }
        }
        let (val, _) = self.eval(&w, sel, pos_of_bag, false);
        if val < best_val {
            best_val = val;
            best_w = w;
        }
        (best_w, best_val, false)
    }
}

pub(crate) fn refine_with_features(
    model: &Model,
    d: &Dataset,
    feats: &[Vec<Vec<f64>>],
    category: &str,
    candidates: Option<&BTreeMap<usize, Vec<usize>>>,
    cfg: &MiningConfig,
    round: usize,
) -> Result<RefineOutcome> {
    let slot = model.slot(category)?;
    let mut positives = Vec::new();
    let mut pos_of_bag = vec![None; d.weak_bags.len()];
    for (bi, bag) in d.weak_bags.iter().enumerate() {
        if !bag.weak_label(category).is_pos() {
            continue;
        }
        let cands = match candidates.and_then(|c| c.get(&bi)) {
            Some(c) => c.clone(),
            None => (0..bag.regions.len()).collect(),
        };
        if cands.is_empty() || cands.iter().any(|&c| c >= bag.regions.len()) {
            return Err(Error::EmptyInput(format!("bag {}: invalid candidate set", bag.id)));
        }
        pos_of_bag[bi] = Some(positives.len());
        positives.push((bi, cands));
    }
    let problem = Problem {
        feats,
        positives,
        alpha: model.hyper.alpha,
        lambda: model.hyper.lambda,
    };

    let mut w = model.weights(slot).to_vec();
    let mut warnings = Vec::new();
    let mut trace = Vec::new();
    let mut sel = problem.select(&w);
    trace.push(problem.eval(&w, &sel, &pos_of_bag, false).0);
    let mut alternations = 1;
    let mut fixed_point = problem.positives.is_empty();
    while !fixed_point && alternations < cfg.max_latent_iters {
        let (w_new, val, converged) = problem.refit(&w, &sel, &pos_of_bag, cfg);
        if !converged {
            let msg = format!(
                "category {category}: inner refit hit {} steps without converging (alternation {alternations})",
                cfg.inner_max_steps
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        w = w_new;
        trace.push(val);
        let next = problem.select(&w);
        trace.push(problem.eval(&w, &next, &pos_of_bag, false).0);
        alternations += 1;
        fixed_point = next == sel;
        sel = next;
    }

    let assignments = problem
        .positives
        .iter()
        .zip(&sel)
        .map(|((bi, _), &ri)| MiningAssignment {
            bag_id: d.weak_bags[*bi].id.clone(),
            category: category.to_string(),
            region_index: ri,
            score: score(&w, &feats[*bi][ri]),
            round,
        })
        .collect();
    Ok(RefineOutcome {
        category: category.to_string(),
        assignments,
        detector: w,
        surrogate_trace: trace,
        alternations,
        fixed_point,
        warnings,
    })
}

/// Candidate sets for every bag positive for `category`.
fn candidate_sets(
    model: &Model,
    d: &Dataset,
    feats: &[Vec<Vec<f64>>],
    category: &str,
    cfg: &MiningConfig,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let slot = model.slot(category)?;
    let mut out = BTreeMap::new();
    for (bi, bag) in d.weak_bags.iter().enumerate() {
        if bag.weak_label(category).is_pos() {
            let scores: Vec<f64> = feats[bi]
                .iter()
                .map(|phi| margin_score(model, slot, phi, cfg.use_background_margin))
                .collect();
            out.insert(bi, narrow_candidates(&scores, cfg.top_k)?);
        }
    }
    Ok(out)
}

/// Mines one region per (weak bag, positive weak category), with full
/// per-category refinement details.
pub fn mine_dataset_detailed(
    model: &Model,
    d: &Dataset,
    cfg: &MiningConfig,
    round: usize,
) -> Result<Vec<RefineOutcome>> {
    model.check_covers(d)?;
    cfg.check()?;
    let feats = weak_features(model, d)?;
    let cats: Vec<&String> = d.categories_weak.iter().collect();
    cats.par_iter()
        .map(|k| {
            let cands = candidate_sets(model, d, &feats, k, cfg)?;
            refine_with_features(model, d, &feats, k, Some(&cands), cfg, round)
        })
        .collect()
}

/// Mines one region per (weak bag, positive weak category), ordered by
/// category then bag.
pub fn mine_dataset(model: &Model, d: &Dataset, cfg: &MiningConfig, round: usize) -> Result<Vec<MiningAssignment>> {
    Ok(mine_dataset_detailed(model, d, cfg, round)?
        .into_iter()
        .flat_map(|o| o.assignments)
        .collect())
}

/// Background labels for strong regions: positive iff the region overlaps
/// every positively labelled box of its bag by less than `iou_threshold`.
pub fn assign_background_strong(d: &Dataset, iou_threshold: f64) -> Vec<Vec<Label>> {
    d.strong_bags
        .iter()
        .map(|bag| {
            let positives: Vec<_> = bag
                .regions
                .iter()
                .filter(|r| r.is_strong_positive())
                .map(|r| r.bbox)
                .collect();
            bag.regions
                .iter()
                .map(|r| {
                    let max_iou = positives.iter().map(|p| iou(&r.bbox, p)).fold(0.0, f64::max);
                    Label::from_bool(max_iou < iou_threshold)
                })
                .collect()
        })
        .collect()
}

/// Copy of `d` with background labels written onto every strong region.
pub fn with_background_labels(d: &Dataset, iou_threshold: f64) -> Dataset {
    let labels = assign_background_strong(d, iou_threshold);
    let mut out = d.clone();
    for (bag, labels) in out.strong_bags.iter_mut().zip(labels) {
        for (r, l) in bag.regions.iter_mut().zip(labels) {
            r.background = Some(l);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, Region, Source};
    use crate::model::HyperParams;
    use crate::repr::ReprParams;

    fn weak_bag(id: &str, feats: &[[f64; 2]], pos: bool) -> Bag {
        Bag {
            id: id.into(),
            source: Source::Weak,
            weak_labels: BTreeMap::from([("p".to_string(), Label::from_bool(pos))]),
            whole_image_feature: None,
            regions: feats
                .iter()
                .map(|f| Region::new(BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), f.to_vec()))
                .collect(),
        }
    }

    fn dataset(bags: Vec<Bag>) -> Dataset {
        let mut d = Dataset::new(2, Vec::<String>::new(), ["p".to_string()]);
        bags.into_iter().for_each(|b| d.push_bag(b));
        d
    }

    fn model(d: &Dataset, w: Vec<f64>) -> Model {
        let mut m = Model::new(ReprParams::identity(2), d, HyperParams::default()).unwrap();
        m.detectors[0] = w;
        m
    }

    #[test]
    fn scores_are_dot_products() {
        let d = dataset(vec![weak_bag("a", &[[1.0, 0.0], [0.0, 1.0]], true)]);
        let mut m = model(&d, vec![1.0, 0.0, 0.0]);
        assert_eq!(score_regions(&m, &d.weak_bags[0], "p", false).unwrap(), vec![1.0, 0.0]);
        m.background = m.detectors[0].clone();
        assert_eq!(score_regions(&m, &d.weak_bags[0], "p", true).unwrap(), vec![0.0, 0.0]);
        assert!(score_regions(&m, &d.weak_bags[0], "q", false).is_err());
    }

    #[test]
    fn narrowing_orders_and_clamps() {
        assert_eq!(narrow_candidates(&[0.1, 0.9, 0.3], 2).unwrap(), vec![1, 2]);
        assert_eq!(narrow_candidates(&[0.1, 0.9, 0.3], 10).unwrap(), vec![1, 2, 0]);
        assert_eq!(narrow_candidates(&[0.5, 0.5], 1).unwrap(), vec![0]);
        assert!(narrow_candidates(&[], 1).is_err());
    }

    #[test]
    fn single_candidate_is_forced() {
        let d = dataset(vec![weak_bag("a", &[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]], true)]);
        let m = model(&d, vec![1.0, 0.0, 0.0]);
        let cands = BTreeMap::from([(0, vec![2])]);
        let out = latent_refine(&m, &d, "p", Some(&cands), &MiningConfig::default(), 0).unwrap();
        assert_eq!(out.assignments.len(), 1);
        assert_eq!(out.assignments[0].region_index, 2);
        assert!(out.fixed_point);
    }

    #[test]
    fn fixed_point_is_stable() {
        let d = dataset(vec![
            weak_bag("a", &[[3.0, 0.0], [0.0, 0.1], [0.1, -0.1]], true),
            weak_bag("b", &[[0.0, 0.1], [2.8, 0.2]], true),
            weak_bag("c", &[[0.0, 0.0], [-0.1, 0.2]], false),
        ]);
        let m = model(&d, vec![0.5, 0.0, 0.0]);
        let cfg = MiningConfig::default();
        let first = latent_refine(&m, &d, "p", None, &cfg, 0).unwrap();
        assert!(first.fixed_point);
        let idx: Vec<_> = first.assignments.iter().map(|a| a.region_index).collect();
        assert_eq!(idx, vec![0, 1]);
        let mut m2 = m.clone();
        m2.detectors[0] = first.detector.clone();
        let second = latent_refine(&m2, &d, "p", None, &cfg, 0).unwrap();
        assert_eq!(
            second.assignments.iter().map(|a| a.region_index).collect::<Vec<_>>(),
            idx
        );
        assert_eq!(second.alternations, 2);
        for w in first.surrogate_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-8);
        }
    }

    #[test]
    fn full_narrowing_equals_unrestricted() {
        let d = dataset(vec![
            weak_bag("a", &[[1.0, 0.2], [0.3, 0.9], [0.1, 0.1]], true),
            weak_bag("b", &[[0.4, 0.4], [1.1, -0.3]], true),
            weak_bag("c", &[[0.2, 0.0]], false),
        ]);
        let m = model(&d, vec![0.3, 0.2, -0.1]);
        let cfg = MiningConfig::default();
        let mut cands = BTreeMap::new();
        for (bi, b) in d.weak_bags.iter().enumerate().take(2) {
            let s = score_regions(&m, b, "p", false).unwrap();
            cands.insert(bi, narrow_candidates(&s, s.len()).unwrap());
        }
        let a = latent_refine(&m, &d, "p", Some(&cands), &cfg, 0).unwrap();
        let b = latent_refine(&m, &d, "p", None, &cfg, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mine_empty_weak_set() {
        let d = dataset(vec![]);
        let m = model(&d, vec![0.0; 3]);
        assert!(mine_dataset(&m, &d, &MiningConfig::default(), 1).unwrap().is_empty());
    }

    #[test]
    fn top_one_mining_is_global_argmax() {
        let d = dataset(vec![weak_bag("a", &[[0.2, 0.0], [0.9, 0.0], [0.5, 0.0]], true)]);
        let m = model(&d, vec![1.0, 0.0, 0.0]);
        let cfg = MiningConfig {
            top_k: 1,
            ..Default::default()
        };
        let a = mine_dataset(&m, &d, &cfg, 3).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].region_index, a[0].round), (1, 3));
    }

    #[test]
    fn background_labels_follow_overlap() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let mut pos = Region::new(gt, vec![0.0, 0.0]);
        pos.strong_labels = Some(BTreeMap::from([("a".to_string(), Label::Pos)]));
        let mut far = Region::new(BBox::new(50.0, 50.0, 60.0, 60.0).unwrap(), vec![0.0, 0.0]);
        far.strong_labels = Some(BTreeMap::new());
        // (0,0,10,10) vs (0,5,10,15): IoU exactly 1/3
        let mut edge = Region::new(BBox::new(0.0, 5.0, 10.0, 15.0).unwrap(), vec![0.0, 0.0]);
        edge.strong_labels = Some(BTreeMap::new());
        let mut d = Dataset::new(2, ["a".to_string()], Vec::<String>::new());
        d.push_bag(Bag {
            id: "s".into(),
            source: Source::Strong,
            weak_labels: BTreeMap::from([("a".to_string(), Label::Pos)]),
            whole_image_feature: None,
            regions: vec![pos, far, edge],
        });
        let labels = assign_background_strong(&d, 1.0 / 3.0);
        assert_eq!(labels, vec![vec![Label::Neg, Label::Pos, Label::Neg]]);
        let labels = assign_background_strong(&d, 0.34);
        assert_eq!(labels[0][2], Label::Pos);
    }
}
