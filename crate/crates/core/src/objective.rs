//! Loss terms and the staged objectives, with exact subgradients.
//!
//! All objectives share one shape: a sum of `Γ(w_k)` over the detectors they
//! train plus `α` times a sum of hinge losses `ℓ(y, w_kᵀ[φ(x); 1])`. The
//! classification, strong and joint objectives are built as lists of
//! [`Instance`]s (one raw input with its labelled detector targets) and
//! evaluated by one engine. The weak objective scores each bag by its best
//! region and is evaluated separately.
//!
//! Sums are reduced over fixed-size chunks in a fixed order so results are
//! bit-identical for any number of worker threads.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::mining::MiningAssignment;
use crate::model::{score, Model, ModelGrad, Slot};
use crate::repr::axpy;

/// Instances per reduction chunk. Fixed so the summation order never depends
/// on the thread count.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub regularization: f64,
    pub data_loss: f64,
    /// `Γ(w_k) + α·loss_k` for every detector the objective trains.
    pub per_category: BTreeMap<String, f64>,
}

/// One raw input with the detectors it is labelled for.
#[derive(Debug, Clone)]
pub struct Instance<'a> {
    pub input: Cow<'a, [f64]>,
    pub targets: Vec<(Slot, Label)>,
}

/// Which objective to differentiate.
#[derive(Debug, Clone, Copy)]
pub enum ObjectiveKind<'a> {
    Classification,
    Strong,
    Weak(&'a str),
    Joint(&'a [MiningAssignment]),
}

pub fn hinge_loss(y: Label, s: f64) -> f64 {
    (1.0 - y.sign() * s).max(0.0)
}

/// Subgradient of the hinge loss with respect to the score.
pub fn hinge_subgradient(y: Label, s: f64) -> f64 {
    if y.sign() * s < 1.0 {
        -y.sign()
    } else {
        0.0
    }
}

/// `(λ/2)‖w‖²` over every coordinate but the trailing bias.
pub fn regularizer(w: &[f64], lambda: f64) -> f64 {
    let head = &w[..w.len().saturating_sub(1)];
    0.5 * lambda * head.iter().map(|v| v * v).sum::<f64>()
}

pub fn regularizer_grad(w: &[f64], lambda: f64) -> Vec<f64> {
    let mut g: Vec<f64> = w.iter().map(|v| lambda * v).collect();
    if let Some(b) = g.last_mut() {
        *b = 0.0;
    }
    g
}

fn slot_index(model: &Model, slot: Slot) -> usize {
    match slot {
        Slot::Category(i) => i,
        Slot::Background => model.categories.len(),
    }
}

fn category_slots(model: &Model, names: impl IntoIterator<Item = impl AsRef<str>>) -> Result<Vec<Slot>> {
    names.into_iter().map(|n| model.slot(n.as_ref())).collect()
}

/// Detectors trained by the classification objective: every category.
pub fn classification_slots(model: &Model, d: &Dataset) -> Result<Vec<Slot>> {
    category_slots(model, d.all_categories())
}

/// Detectors trained by the strong objective: background and the strong
/// categories that have no weakly labelled data. Every C_W detector is held out.
pub fn strong_slots(model: &Model, d: &Dataset) -> Result<Vec<Slot>> {
    let mut s = category_slots(model, d.categories_strong.difference(&d.categories_weak))?;
    s.push(Slot::Background);
    Ok(s)
}

/// Detectors trained by the joint objective: every category and background.
pub fn joint_slots(model: &Model, d: &Dataset) -> Result<Vec<Slot>> {
    let mut s = classification_slots(model, d)?;
    s.push(Slot::Background);
    Ok(s)
}

/// One instance per bag (strong and weak), fed the whole-image feature and
/// labelled with the image-level label of every category.
pub fn classification_instances<'a>(model: &Model, d: &'a Dataset) -> Result<Vec<Instance<'a>>> {
    model.check_covers(d)?;
    let cats = d.all_categories();
    let slots = category_slots(model, &cats)?;
    Ok(d.bags()
        .map(|bag| Instance {
            input: Cow::Owned(bag.whole_image_feature()),
            targets: cats.iter().zip(&slots).map(|(k, &s)| (s, bag.weak_label(k))).collect(),
        })
        .collect())
}

/// One instance per strong region, labelled for the [`strong_slots`].
pub fn strong_instances<'a>(model: &Model, d: &'a Dataset) -> Result<Vec<Instance<'a>>> {
    model.check_covers(d)?;
    let slots = category_slots(model, &d.categories_strong)?;
    let trained = strong_slots(model, d)?;
    let mut out = Vec::new();
    for bag in &d.strong_bags {
        for (i, r) in bag.regions.iter().enumerate() {
            let mut targets = strong_targets(d, &slots, bag.id.as_str(), i, r)?;
            targets.retain(|(s, _)| trained.contains(s));
            out.push(Instance {
                input: Cow::Borrowed(&r.feature),
                targets,
            });
        }
    }
    Ok(out)
}

fn strong_targets(
    d: &Dataset,
    slots: &[Slot],
    bag_id: &str,
    index: usize,
    r: &crate::data::Region,
) -> Result<Vec<(Slot, Label)>> {
    let labels = r
        .strong_labels
        .as_ref()
        .ok_or_else(|| Error::InvalidDataset(format!("bag {bag_id}: region {index} lacks strong labels")))?;
    let bg = r.background.ok_or_else(|| {
        Error::InvalidDataset(format!(
            "bag {bag_id}: region {index} lacks a background label; assign background labels first"
        ))
    })?;
    let mut t: Vec<(Slot, Label)> = d
        .categories_strong
        .iter()
        .zip(slots)
        .map(|(k, &s)| (s, labels.get(k).copied().unwrap_or(Label::Neg)))
        .collect();
    t.push((Slot::Background, bg));
    Ok(t)
}

/// Lookup from (weak bag index, category) to the mined region.
pub(crate) fn assignment_table(
    d: &Dataset,
    assignments: &[MiningAssignment],
) -> Result<HashMap<(usize, String), usize>> {
    let index: HashMap<&str, usize> = d
        .weak_bags
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id.as_str(), i))
        .collect();
    let mut table = HashMap::new();
    for a in assignments {
        let &bi = index.get(a.bag_id.as_str()).ok_or_else(|| {
            Error::IncompleteAssignments(format!("assignment refers to unknown weak bag `{}`", a.bag_id))
        })?;
        let bag = &d.weak_bags[bi];
        if !d.categories_weak.contains(&a.category) {
            return Err(Error::IncompleteAssignments(format!(
                "bag {}: category `{}` is not a weak category",
                a.bag_id, a.category
            )));
        }
        if a.region_index >= bag.regions.len() {
            return Err(Error::IncompleteAssignments(format!(
                "bag {}: region index {} out of range",
                a.bag_id, a.region_index
            )));
        }
        if !bag.weak_label(&a.category).is_pos() {
            return Err(Error::IncompleteAssignments(format!(
                "bag {}: assignment for `{}` on a negative bag",
                a.bag_id, a.category
            )));
        }
        if table.insert((bi, a.category.clone()), a.region_index).is_some() {
            return Err(Error::IncompleteAssignments(format!(
                "bag {}: duplicate assignment for `{}`",
                a.bag_id, a.category
            )));
        }
    }
    for (bi, bag) in d.weak_bags.iter().enumerate() {
        for k in &d.categories_weak {
            if bag.weak_label(k).is_pos() && !table.contains_key(&(bi, k.clone())) {
                return Err(Error::IncompleteAssignments(format!(
                    "bag {}: no assignment for positive category `{k}`",
                    bag.id
                )));
            }
        }
    }
    Ok(table)
}

/// Region instances over S and W. Strong regions use their labels for C_S and
/// background. Weak regions are positive for a weak category only where mined,
/// and positive for background when no category selected them.
pub fn joint_instances<'a>(
    model: &Model,
    d: &'a Dataset,
    assignments: &[MiningAssignment],
) -> Result<Vec<Instance<'a>>> {
    let mut out = strong_instances(model, d)?;
    let table = assignment_table(d, assignments)?;
    let weak: Vec<(&String, Slot)> = d
        .categories_weak
        .iter()
        .map(|k| Ok((k, model.slot(k)?)))
        .collect::<Result<_>>()?;
    for (bi, bag) in d.weak_bags.iter().enumerate() {
        let selected: Vec<Option<usize>> = weak
            .iter()
            .map(|(k, _)| table.get(&(bi, (*k).clone())).copied())
            .collect();
        for (i, r) in bag.regions.iter().enumerate() {
            let mut targets = Vec::with_capacity(weak.len() + 1);
            let mut any = false;
            for (&(_, slot), sel) in weak.iter().zip(&selected) {
                let pos = *sel == Some(i);
                any |= pos;
                targets.push((slot, Label::from_bool(pos)));
            }
            targets.push((Slot::Background, Label::from_bool(!any)));
            out.push(Instance {
                input: Cow::Borrowed(&r.feature),
                targets,
            });
        }
    }
    Ok(out)
}

/// Unweighted data term over a set of instances.
#[derive(Debug, Clone)]
pub struct DataTerm {
    /// Summed hinge loss per detector, indexed categories-then-background.
    pub loss: Vec<f64>,
    pub grad: Option<ModelGrad>,
}

/// Sums hinge losses (and optionally their gradients) over `instances`.
pub fn data_term(model: &Model, instances: &[&Instance<'_>], want_grad: bool) -> Result<DataTerm> {
    let n_slots = model.categories.len() + 1;
    let parts: Vec<Result<DataTerm>> = instances
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = vec![0.0; n_slots];
            let mut grad = want_grad.then(|| ModelGrad::zeros(model));
            for inst in chunk {
                accumulate_instance(model, inst, &mut loss, grad.as_mut())?;
            }
            Ok(DataTerm { loss, grad })
        })
        .collect();
    let mut total = DataTerm {
        loss: vec![0.0; n_slots],
        grad: want_grad.then(|| ModelGrad::zeros(model)),
    };
    for part in parts {
        let part = part?;
        total.loss.iter_mut().zip(&part.loss).for_each(|(a, b)| *a += b);
        if let (Some(g), Some(pg)) = (total.grad.as_mut(), part.grad.as_ref()) {
            g.add_assign(pg);
        }
    }
    Ok(total)
}

fn accumulate_instance(
    model: &Model,
    inst: &Instance<'_>,
    loss: &mut [f64],
    grad: Option<&mut ModelGrad>,
) -> Result<()> {
    let Some(grad) = grad else {
        let phi = model.repr.forward(&inst.input)?;
        for &(slot, y) in &inst.targets {
            loss[slot_index(model, slot)] += hinge_loss(y, model.score_feature(slot, &phi));
        }
        return Ok(());
    };
    let tape = model.repr.forward_tape(&inst.input)?;
    let phi = tape.output();
    let f = phi.len();
    let mut upstream = vec![0.0; f];
    let mut active = false;
    for &(slot, y) in &inst.targets {
        let w = model.weights(slot);
        let s = score(w, phi);
        loss[slot_index(model, slot)] += hinge_loss(y, s);
        let ds = hinge_subgradient(y, s);
        if ds != 0.0 {
            active = true;
            let g = grad.slot_mut(slot);
            axpy(ds, phi, &mut g[..f]);
            g[f] += ds;
            axpy(ds, &w[..f], &mut upstream);
        }
    }
    if active && !model.repr.layers.is_empty() {
        model.repr.backward_into(&tape, &upstream, &mut grad.repr)?;
    }
    Ok(())
}

/// Adds `weight · ∇Γ(w_s)` for every slot in `slots`.
pub fn add_regularizer_grad(model: &Model, slots: &[Slot], weight: f64, grad: &mut ModelGrad) {
    for &s in slots {
        let g = regularizer_grad(model.weights(s), model.hyper.lambda);
        axpy(weight, &g, grad.slot_mut(s));
    }
}

/// Full objective value and optional gradient for one instance set.
pub fn evaluate(
    model: &Model,
    instances: &[Instance<'_>],
    slots: &[Slot],
    want_grad: bool,
) -> Result<(ObjectiveValue, Option<ModelGrad>)> {
    let refs: Vec<&Instance> = instances.iter().collect();
    let term = data_term(model, &refs, want_grad)?;
    let value = assemble(model, slots, &term.loss);
    let grad = term.grad.map(|mut g| {
        g.scale(model.hyper.alpha);
        add_regularizer_grad(model, slots, 1.0, &mut g);
        g
    });
    Ok((value, grad))
}

fn assemble(model: &Model, slots: &[Slot], loss: &[f64]) -> ObjectiveValue {
    let alpha = model.hyper.alpha;
    let mut per_category = BTreeMap::new();
    let mut regularization = 0.0;
    let mut data_loss = 0.0;
    for &s in slots {
        let reg = regularizer(model.weights(s), model.hyper.lambda);
        let l = loss[slot_index(model, s)];
        regularization += reg;
        data_loss += l;
        per_category.insert(model.slot_name(s).to_string(), reg + alpha * l);
    }
    ObjectiveValue {
        total: regularization + alpha * data_loss,
        regularization,
        data_loss,
        per_category,
    }
}

pub fn classification_objective(model: &Model, d: &Dataset) -> Result<ObjectiveValue> {
    let inst = classification_instances(model, d)?;
    Ok(evaluate(model, &inst, &classification_slots(model, d)?, false)?.0)
}

pub fn strong_objective(model: &Model, d: &Dataset) -> Result<ObjectiveValue> {
    let inst = strong_instances(model, d)?;
    Ok(evaluate(model, &inst, &strong_slots(model, d)?, false)?.0)
}

pub fn joint_objective(model: &Model, d: &Dataset, assignments: &[MiningAssignment]) -> Result<ObjectiveValue> {
    let inst = joint_instances(model, d, assignments)?;
    Ok(evaluate(model, &inst, &joint_slots(model, d)?, false)?.0)
}

/// Index of the maximum, lowest index on ties. `None` for an empty slice.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Image-level label of a weak bag for the MI objective. Every image is taken
/// to contain background, so the background label is always positive.
fn weak_bag_label(model: &Model, bag: &crate::data::Bag, slot: Slot) -> Label {
    match slot {
        Slot::Background => Label::Pos,
        Slot::Category(i) => bag.weak_label(&model.categories[i]),
    }
}

/// `Γ(w_p) + α Σ_{I∈W} ℓ(Y_I^p, max_i w_pᵀφ(x_i))` for one detector.
pub fn weak_objective(model: &Model, d: &Dataset, category: &str) -> Result<f64> {
    Ok(weak_objective_full(model, d, category, false)?.0.total)
}

/// The weak objective summed over every weak category.
pub fn weak_objective_all(model: &Model, d: &Dataset) -> Result<f64> {
    d.categories_weak.iter().map(|k| weak_objective(model, d, k)).sum()
}

fn weak_objective_full(
    model: &Model,
    d: &Dataset,
    category: &str,
    want_grad: bool,
) -> Result<(ObjectiveValue, Option<ModelGrad>)> {
    model.check_covers(d)?;
    let slot = model.slot(category)?;
    let parts: Vec<Result<(f64, Option<ModelGrad>)>> = d
        .weak_bags
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut grad = want_grad.then(|| ModelGrad::zeros(model));
            for bag in chunk {
                let y = weak_bag_label(model, bag, slot);
                let phis = bag
                    .regions
                    .iter()
                    .map(|r| model.repr.forward(&r.feature))
                    .collect::<Result<Vec<_>>>()?;
                let scores: Vec<f64> = phis.iter().map(|p| model.score_feature(slot, p)).collect();
                let Some(best) = argmax(&scores) else {
                    return Err(Error::InvalidDataset(format!("bag {}: regions empty", bag.id)));
                };
                loss += hinge_loss(y, scores[best]);
                if let Some(g) = grad.as_mut() {
                    let ds = hinge_subgradient(y, scores[best]);
                    if ds != 0.0 {
                        let phi = &phis[best];
                        let f = phi.len();
                        let w = model.weights(slot);
                        let gs = g.slot_mut(slot);
                        axpy(ds, phi, &mut gs[..f]);
                        gs[f] += ds;
                        let upstream: Vec<f64> = w[..f].iter().map(|v| ds * v).collect();
                        let tape = model.repr.forward_tape(&bag.regions[best].feature)?;
                        model.repr.backward_into(&tape, &upstream, &mut g.repr)?;
                    }
                }
            }
            Ok((loss, grad))
        })
        .collect();
    let mut loss = vec![0.0; model.categories.len() + 1];
    let mut grad = want_grad.then(|| ModelGrad::zeros(model));
    for part in parts {
        let (l, pg) = part?;
        loss[slot_index(model, slot)] += l;
        if let (Some(g), Some(pg)) = (grad.as_mut(), pg.as_ref()) {
            g.add_assign(pg);
        }
    }
    let value = assemble(model, &[slot], &loss);
    let grad = grad.map(|mut g| {
        g.scale(model.hyper.alpha);
        add_regularizer_grad(model, &[slot], 1.0, &mut g);
        g
    });
    Ok((value, grad))
}

/// Value and exact subgradient of the named objective with respect to all
/// model parameters.
pub fn gradients(kind: ObjectiveKind<'_>, model: &Model, d: &Dataset) -> Result<(ObjectiveValue, ModelGrad)> {
    let (value, grad) = match kind {
        ObjectiveKind::Classification => {
            let inst = classification_instances(model, d)?;
            evaluate(model, &inst, &classification_slots(model, d)?, true)?
        }
        ObjectiveKind::Strong => {
            let inst = strong_instances(model, d)?;
            evaluate(model, &inst, &strong_slots(model, d)?, true)?
        }
        ObjectiveKind::Joint(assignments) => {
            let inst = joint_instances(model, d, assignments)?;
            evaluate(model, &inst, &joint_slots(model, d)?, true)?
        }
        ObjectiveKind::Weak(category) => weak_objective_full(model, d, category, true)?,
    };
    Ok((value, grad.expect("gradient requested")))
}
