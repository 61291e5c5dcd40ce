//! Central-difference checks of every analytic gradient on random fixtures.
//!
//! Fixtures whose parameters sit within `kink_guard` of a non-differentiable
//! point (a ReLU pre-activation at 0, a hinge margin at 1, a tied weak-bag
//! argmax) are resampled, so the finite differences never straddle a kink.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Bag, Dataset, Label, Region, Source};
use crate::error::{Error, Result};
use crate::mining::MiningAssignment;
use crate::model::{HyperParams, Model};
use crate::objective::{gradients, ObjectiveKind};
use crate::repr::{init_repr, Activation, ReprParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub fixtures: usize,
    pub step: f64,
    pub tolerance: f64,
    pub kink_guard: f64,
    /// Floor of the relative-error denominator; entries whose true gradient is
    /// smaller than this are compared absolutely.
    pub scale_floor: f64,
    pub max_resamples: usize,
    /// Representation widths, input first. Drawn at random per fixture when absent.
    pub dims: Option<Vec<usize>>,
    /// Perturb each analytic gradient before comparing (negative control).
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            fixtures: 20,
            step: 1e-5,
            tolerance: 1e-4,
            kink_guard: 1e-3,
            scale_floor: 1e-3,
            max_resamples: 200,
            dims: None,
            corrupt: false,
        }
    }
}

/// Worst entry of one gradient on one fixture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub target: String,
    pub fixture: usize,
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
    pub resamples: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| r.max_rel_error >= self.tolerance)
    }

    /// Worst error per target name.
    pub fn worst_by_target(&self) -> BTreeMap<&str, &CheckResult> {
        let mut out: BTreeMap<&str, &CheckResult> = BTreeMap::new();
        for r in &self.results {
            let e = out.entry(r.target.as_str()).or_insert(r);
            if r.max_rel_error > e.max_rel_error {
                *e = r;
            }
        }
        out
    }
}

/// A small random dataset and model exercising every objective.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub dataset: Dataset,
    pub model: Model,
    pub assignments: Vec<MiningAssignment>,
    pub upstream: Vec<f64>,
    pub probe_input: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

fn any_box(i: usize) -> BBox {
    let o = 10.0 * i as f64;
    BBox::from([o, o, o + 50.0, o + 40.0])
}

/// Builds fixture `index` for the given seed and resample attempt.
pub fn make_fixture(seed: u64, index: usize, attempt: usize, dims: Option<&[usize]>) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index as u64) << 20 | attempt as u64);
    let dims = match dims {
        Some(d) => d.to_vec(),
        None => {
            let depth = rng.random_range(0..=2);
            (0..=depth).map(|_| rng.random_range(3..=5)).collect()
        }
    };
    let dim = *dims
        .first()
        .ok_or_else(|| Error::InvalidConfig("dims must name the input width".into()))?;
    let acts: Vec<Activation> = dims[1..]
        .iter()
        .map(|_| {
            if rng.random_bool(0.75) {
                Activation::RectifiedLinear
            } else {
                Activation::Identity
            }
        })
        .collect();
    let mut repr = init_repr(rng.random(), &dims, &acts)?;
    for layer in &mut repr.layers {
        layer.bias = random_vec(&mut rng, layer.out_dim, 0.3);
    }

    let strong_cats = ["a", "b"];
    let weak_cats = ["b", "c"];
    let mut d = Dataset::new(dim, strong_cats.map(String::from), weak_cats.map(String::from));
    for b in 0..3 {
        let mut regions = Vec::new();
        let mut image = BTreeMap::new();
        for i in 0..3 {
            let mut r = Region::new(any_box(i), random_vec(&mut rng, dim, 1.0));
            let labels: BTreeMap<String, Label> = strong_cats
                .iter()
                .map(|k| (k.to_string(), Label::from_bool(rng.random_bool(0.3))))
                .collect();
            for (k, y) in &labels {
                let e = image.entry(k.clone()).or_insert(Label::Neg);
                if y.is_pos() {
                    *e = Label::Pos;
                }
            }
            r.background = Some(Label::from_bool(labels.values().all(|y| !y.is_pos())));
            r.strong_labels = Some(labels);
            regions.push(r);
        }
        d.push_bag(Bag {
            id: format!("s{b}"),
            source: Source::Strong,
            weak_labels: image,
            whole_image_feature: None,
            regions,
        });
    }
    let mut assignments = Vec::new();
    for b in 0..4 {
        let n = 3;
        let regions = (0..n)
            .map(|i| Region::new(any_box(i), random_vec(&mut rng, dim, 1.0)))
            .collect();
        let weak_labels: BTreeMap<String, Label> = weak_cats
            .iter()
            .map(|k| (k.to_string(), Label::from_bool(rng.random_bool(0.5))))
            .collect();
        let id = format!("w{b}");
        for (k, y) in &weak_labels {
            if y.is_pos() {
                assignments.push(MiningAssignment {
                    bag_id: id.clone(),
                    category: k.clone(),
                    region_index: rng.random_range(0..n),
                    score: 0.0,
                    round: 1,
                });
            }
        }
        d.push_bag(Bag {
            id,
            source: Source::Weak,
            weak_labels,
            whole_image_feature: None,
            regions,
        });
    }
    d.ensure_valid()?;

    let hyper = HyperParams {
        alpha: rng.random_range(0.5..2.0),
        lambda: rng.random_range(1e-3..0.5),
    };
    let mut model = Model::new(repr, &d, hyper)?;
    let width = model.detector_width();
    for w in model.detectors.iter_mut().chain(std::iter::once(&mut model.background)) {
        *w = random_vec(&mut rng, width, 0.7);
    }
    let out = model.repr.output_dim();
    Ok(Fixture {
        upstream: random_vec(&mut rng, out, 1.0),
        probe_input: random_vec(&mut rng, dim, 1.0),
        dataset: d,
        model,
        assignments,
    })
}

fn min_relu_margin(repr: &ReprParams, x: &[f64]) -> Result<f64> {
    let tape = repr.forward_tape(x)?;
    let mut m = f64::INFINITY;
    for (layer, pre) in repr.layers.iter().zip(&tape.pre_activations) {
        if layer.activation == Activation::RectifiedLinear {
            m = pre.iter().fold(m, |acc, z| acc.min(z.abs()));
        }
    }
    Ok(m)
}

/// Distance of the fixture from the nearest non-differentiable point.
pub fn kink_distance(f: &Fixture) -> Result<f64> {
    let m = &f.model;
    let mut inputs: Vec<Vec<f64>> = vec![f.probe_input.clone()];
    for bag in f.dataset.bags() {
        inputs.push(bag.whole_image_feature());
        inputs.extend(bag.regions.iter().map(|r| r.feature.clone()));
    }
    let mut dist = f64::INFINITY;
    for x in &inputs {
        dist = dist.min(min_relu_margin(&m.repr, x)?);
        let phi = m.repr.forward(x)?;
        for slot in m.slots() {
            let s = m.score_feature(slot, &phi);
            dist = dist.min((s - 1.0).abs()).min((s + 1.0).abs());
        }
    }
    for bag in &f.dataset.weak_bags {
        let phis = bag
            .regions
            .iter()
            .map(|r| m.repr.forward(&r.feature))
            .collect::<Result<Vec<_>>>()?;
        for slot in m.slots() {
            let mut s: Vec<f64> = phis.iter().map(|p| m.score_feature(slot, p)).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            if s.len() > 1 {
                dist = dist.min(s[0] - s[1]);
            }
        }
    }
    Ok(dist)
}

struct Compared {
    max_rel_error: f64,
    worst: usize,
    analytic: f64,
    numeric: f64,
}

fn compare(cfg: &GradCheckConfig, analytic: &[f64], numeric: &[f64]) -> Compared {
    let mut out = Compared {
        max_rel_error: 0.0,
        worst: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = (a - n).abs() / a.abs().max(n.abs()).max(cfg.scale_floor);
        if e > out.max_rel_error || e.is_nan() {
            out = Compared {
                max_rel_error: if e.is_nan() { f64::INFINITY } else { e },
                worst: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    out
}

fn corrupt(g: &mut [f64]) {
    if let Some(i) = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())) {
        g[i] = g[i] * 1.01 + 0.01;
    }
}

fn central_difference(theta: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut t = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = t[i];
        t[i] = orig + step;
        let plus = f(&t)?;
        t[i] = orig - step;
        let minus = f(&t)?;
        t[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

fn param_name(model: &Model, i: usize) -> String {
    let layout = model.layout();
    if layout.repr.contains(&i) {
        return format!("repr[{i}]");
    }
    if layout.background.contains(&i) {
        return format!("background[{}]", i - layout.background.start);
    }
    for (k, r) in layout.detectors.iter().enumerate() {
        if r.contains(&i) {
            return format!("detector[{}][{}]", model.categories[k], i - r.start);
        }
    }
    format!("param[{i}]")
}

fn check_repr(cfg: &GradCheckConfig, fx: &Fixture, index: usize) -> Result<CheckResult> {
    let repr = &fx.model.repr;
    let x = &fx.probe_input;
    let (g, dx) = repr.backward(x, &fx.upstream)?;
    let mut analytic: Vec<f64> = g.iter().copied().collect();
    analytic.extend_from_slice(&dx);
    if cfg.corrupt {
        corrupt(&mut analytic);
    }
    let mut theta = Vec::new();
    repr.write_flat(&mut theta);
    let n_params = theta.len();
    theta.extend_from_slice(x);
    let mut work = repr.clone();
    let numeric = central_difference(&theta, cfg.step, |t| {
        work.read_flat(&t[..n_params]);
        let phi = work.forward(&t[n_params..])?;
        Ok(phi.iter().zip(&fx.upstream).map(|(a, b)| a * b).sum())
    })?;
    let c = compare(cfg, &analytic, &numeric);
    let worst_param = if c.worst < n_params {
        format!("repr[{}]", c.worst)
    } else {
        format!("input[{}]", c.worst - n_params)
    };
    Ok(CheckResult {
        target: "repr".into(),
        fixture: index,
        params: theta.len(),
        max_rel_error: c.max_rel_error,
        worst_param,
        analytic: c.analytic,
        numeric: c.numeric,
    })
}

fn check_objective(
    cfg: &GradCheckConfig,
    fx: &Fixture,
    index: usize,
    target: &str,
    kinds: &[ObjectiveKind<'_>],
) -> Result<CheckResult> {
    let mut worst: Option<CheckResult> = None;
    for kind in kinds {
        let (_, g) = gradients(*kind, &fx.model, &fx.dataset)?;
        let mut analytic = g.to_flat();
        if cfg.corrupt {
            corrupt(&mut analytic);
        }
        let theta = fx.model.to_flat();
        let mut work = fx.model.clone();
        let numeric = central_difference(&theta, cfg.step, |t| {
            work.set_flat(t);
            Ok(gradients(*kind, &work, &fx.dataset)?.0.total)
        })?;
        let c = compare(cfg, &analytic, &numeric);
        let label = match kind {
            ObjectiveKind::Weak(k) => format!("{target}[{k}]"),
            _ => target.to_string(),
        };
        let r = CheckResult {
            target: target.to_string(),
            fixture: index,
            params: theta.len(),
            max_rel_error: c.max_rel_error,
            worst_param: format!("{label}:{}", param_name(&fx.model, c.worst)),
            analytic: c.analytic,
            numeric: c.numeric,
        };
        if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
            worst = Some(r);
        }
    }
    worst.ok_or_else(|| Error::EmptyInput(format!("no {target} objectives to check")))
}

/// Checks the representation and all four objectives on `cfg.fixtures` fixtures.
pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0 && cfg.kink_guard >= 0.0 && cfg.scale_floor > 0.0) {
        return Err(Error::InvalidConfig(
            "step, tolerance and scale_floor must be positive, kink_guard non-negative".into(),
        ));
    }
    let mut results = Vec::new();
    let mut resamples = 0;
    for index in 0..cfg.fixtures {
        let mut attempt = 0;
        let fx = loop {
            let fx = make_fixture(cfg.seed, index, attempt, cfg.dims.as_deref())?;
            if kink_distance(&fx)? >= cfg.kink_guard {
                break fx;
            }
            attempt += 1;
            resamples += 1;
            if attempt > cfg.max_resamples {
                return Err(Error::Numerical(format!(
                    "fixture {index}: no sample at least {} from a kink after {attempt} attempts",
                    cfg.kink_guard
                )));
            }
        };
        let weak: Vec<ObjectiveKind<'_>> = fx
            .dataset
            .categories_weak
            .iter()
            .map(|k| ObjectiveKind::Weak(k.as_str()))
            .collect();
        results.push(check_repr(cfg, &fx, index)?);
        results.push(check_objective(
            cfg,
            &fx,
            index,
            "classification",
            &[ObjectiveKind::Classification],
        )?);
        results.push(check_objective(cfg, &fx, index, "strong", &[ObjectiveKind::Strong])?);
        results.push(check_objective(cfg, &fx, index, "weak", &weak)?);
        results.push(check_objective(
            cfg,
            &fx,
            index,
            "joint",
            &[ObjectiveKind::Joint(&fx.assignments)],
        )?);
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        results,
        resamples,
    })
}
