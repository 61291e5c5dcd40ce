//! Synthetic bags with planted positives.
//!
//! Every category k gets a mean μ_k with `‖μ_k‖ = cluster_separation` and
//! pairwise distances of at least `cluster_separation`. Object regions are
//! drawn from N(μ_k, σ²I), background regions from N(0, σ²I). Each bag holds
//! one object of one category; its planted region's box overlaps the object's
//! ground-truth box by IoU ≥ 0.7 and every background box overlaps it by
//! less than 0.3, on a 1000×1000 canvas.
//!
//! The optional transform `T` maps features of the weak training split as
//! `x ↦ T x`, modelling classification-style images whose features differ
//! from detection-style ones. Strong bags and, by default, the held-out test
//! bags keep the untransformed features.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Bag, Dataset, Label, Region, Source};
use crate::error::{Error, Result};
use crate::eval::{iou, GroundTruth};

const CANVAS: f64 = 1000.0;
const PLANTED_MIN_IOU: f64 = 0.7;
const BACKGROUND_MAX_IOU: f64 = 0.3;

/// How the weak-split transform is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    /// Explicit row-major `D × D` matrix.
    Matrix { rows: Vec<Vec<f64>> },
    /// Seeded random shift `T = I + strength · G / √D` with `G` standard normal.
    Random { strength: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_categories_strong: usize,
    pub num_categories_weak: usize,
    pub strong_bags_per_category: usize,
    pub weak_bags_per_category: usize,
    pub test_bags_per_category: usize,
    pub regions_per_bag: usize,
    pub feature_dim: usize,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    pub transform: Option<TransformSpec>,
    /// Apply the transform to the test split as well as the weak split.
    pub transform_test: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_categories_strong: 5,
            num_categories_weak: 5,
            strong_bags_per_category: 40,
            weak_bags_per_category: 40,
            test_bags_per_category: 20,
            regions_per_bag: 20,
            feature_dim: 16,
            cluster_separation: 4.0,
            noise_sigma: 0.5,
            transform: None,
            transform_test: false,
        }
    }
}

impl SynthConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_categories_strong + self.num_categories_weak == 0 {
            return bad("at least one category is required".into());
        }
        if self.regions_per_bag < 2 {
            return bad(format!(
                "regions_per_bag must be at least 2, got {}",
                self.regions_per_bag
            ));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return bad(format!(
                "cluster_separation must be positive, got {}",
                self.cluster_separation
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be positive, got {}", self.noise_sigma));
        }
        if let Some(TransformSpec::Matrix { rows }) = &self.transform {
            if rows.len() != self.feature_dim || rows.iter().any(|r| r.len() != self.feature_dim) {
                return bad(format!("transform must be {0}x{0}", self.feature_dim));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Strong,
    Weak,
    Test,
}

/// Generating parameters, enough to evaluate the exact class-conditional densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub means: BTreeMap<String, Vec<f64>>,
    pub noise_sigma: f64,
    pub transform: Option<Vec<Vec<f64>>>,
    pub transformed_splits: Vec<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagTruth {
    pub split: Split,
    /// Planted region index per positive category.
    pub planted: BTreeMap<String, usize>,
    pub boxes: BTreeMap<String, Vec<BBox>>,
}

/// Hidden ground truth written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub params: GenParams,
    pub bags: BTreeMap<String, BagTruth>,
}

impl SynthTruth {
    /// Ground-truth boxes of the bags in `splits`.
    pub fn ground_truth(&self, splits: &[Split]) -> GroundTruth {
        GroundTruth {
            boxes: self
                .bags
                .iter()
                .filter(|(_, t)| splits.contains(&t.split))
                .map(|(id, t)| (id.clone(), t.boxes.clone()))
                .collect(),
        }
    }

    pub fn oracle(&self) -> Result<BayesOracle<'_>> {
        let inverse = match &self.params.transform {
            None => None,
            Some(rows) => {
                let n = rows.len();
                let m = DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied());
                let inv = m
                    .try_inverse()
                    .ok_or_else(|| Error::InvalidConfig("transform is not invertible".into()))?;
                Some(inv)
            }
        };
        Ok(BayesOracle { truth: self, inverse })
    }
}

/// Exact log-density-ratio scorer built from the generating parameters.
pub struct BayesOracle<'a> {
    truth: &'a SynthTruth,
    inverse: Option<DMatrix<f64>>,
}

impl BayesOracle<'_> {
    /// `log N(x; category) − log N(x; background)` per region. For transformed
    /// bags both densities are pulled back through the transform, which shifts
    /// both by the same Jacobian term.
    pub fn log_ratios(&self, bag: &Bag, category: &str) -> Result<Vec<f64>> {
        let mu = self
            .truth
            .params
            .means
            .get(category)
            .ok_or_else(|| Error::UnknownCategory(category.to_string()))?;
        let split = self.truth.bags.get(&bag.id).map(|t| t.split);
        let transformed = split.is_some_and(|s| self.truth.params.transformed_splits.contains(&s));
        let var = self.truth.params.noise_sigma.powi(2);
        let half_norm = 0.5 * mu.iter().map(|v| v * v).sum::<f64>();
        bag.regions
            .iter()
            .map(|r| {
                let z: Vec<f64> = match (&self.inverse, transformed) {
                    (Some(inv), true) => {
                        let x = nalgebra::DVector::from_column_slice(&r.feature);
                        (inv * x).iter().copied().collect()
                    }
                    _ => r.feature.clone(),
                };
                if z.len() != mu.len() {
                    return Err(Error::dims("oracle feature", mu.len(), z.len()));
                }
                let proj: f64 = z.iter().zip(mu).map(|(a, b)| a * b).sum();
                Ok((proj - half_norm) / var)
            })
            .collect()
    }

    /// Region with the highest log-density ratio, lowest index on ties.
    pub fn pick(&self, bag: &Bag, category: &str) -> Result<usize> {
        let r = self.log_ratios(bag, category)?;
        crate::objective::argmax(&r).ok_or_else(|| Error::EmptyInput(format!("bag {} has no regions", bag.id)))
    }
}

/// Convenience wrapper around [`BayesOracle::pick`].
pub fn bayes_oracle(truth: &SynthTruth, bag: &Bag, category: &str) -> Result<usize> {
    truth.oracle()?.pick(bag, category)
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Training data: strong and weak splits.
    pub train: Dataset,
    /// Held-out weak-category bags for detection evaluation.
    pub test: Dataset,
    pub truth: SynthTruth,
}

fn category_names(prefix: char, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}")).collect()
}

fn place_means(cfg: &SynthConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    const ATTEMPTS: usize = 20_000;
    let sep = cfg.cluster_separation;
    let dim = cfg.feature_dim;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..ATTEMPTS {
        if means.len() == n {
            break;
        }
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        v.iter_mut().for_each(|x| *x *= sep / norm);
        let far = means.iter().all(|m| {
            let d2: f64 = m.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= sep
        });
        if far {
            means.push(v);
        }
    }
    if means.len() < n {
        return Err(Error::InvalidConfig(format!(
            "infeasible geometry: cannot place {n} category means at norm {sep} with pairwise distance >= cluster_separation ({sep}) in {dim} dimensions"
        )));
    }
    Ok(means)
}

fn build_transform(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<f64>>> {
    let d = cfg.feature_dim;
    match &cfg.transform {
        None => None,
        Some(TransformSpec::Matrix { rows }) => Some(rows.clone()),
        Some(TransformSpec::Random { strength }) => {
            let scale = strength / (d as f64).sqrt();
            Some(
                (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| {
                                let g: f64 = rng.sample(StandardNormal);
                                (if i == j { 1.0 } else { 0.0 }) + scale * g
                            })
                            .collect()
                    })
                    .collect(),
            )
        }
    }
}

fn random_box(rng: &mut ChaCha8Rng, min: f64, max: f64) -> BBox {
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x = rng.random_range(0.0..CANVAS - w);
    let y = rng.random_range(0.0..CANVAS - h);
    BBox {
        x_min: x,
        y_min: y,
        x_max: x + w,
        y_max: y + h,
    }
}

fn jittered(rng: &mut ChaCha8Rng, gt: &BBox) -> BBox {
    loop {
        let (w, h) = (gt.width(), gt.height());
        let j = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-0.06 * s..0.06 * s);
        let b = BBox {
            x_min: (gt.x_min + j(rng, w)).max(0.0),
            y_min: (gt.y_min + j(rng, h)).max(0.0),
            x_max: (gt.x_max + j(rng, w)).min(CANVAS),
            y_max: (gt.y_max + j(rng, h)).min(CANVAS),
        };
        if b.is_valid() && iou(&b, gt) >= PLANTED_MIN_IOU {
            return b;
        }
    }
}

fn background_box(rng: &mut ChaCha8Rng, gts: &[BBox]) -> BBox {
    loop {
        let b = random_box(rng, 40.0, 350.0);
        if gts.iter().all(|g| iou(&b, g) < BACKGROUND_MAX_IOU) {
            return b;
        }
    }
}

struct BagSpec<'a> {
    id: String,
    split: Split,
    category: &'a str,
    mean: &'a [f64],
    transform: Option<&'a [Vec<f64>]>,
    strong_categories: &'a [String],
    weak_categories: &'a [String],
}

fn apply(t: Option<&[Vec<f64>]>, z: Vec<f64>) -> Vec<f64> {
    match t {
        None => z,
        Some(rows) => rows
            .iter()
            .map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect(),
    }
}

fn make_bag(cfg: &SynthConfig, spec: &BagSpec<'_>, rng: &mut ChaCha8Rng) -> (Bag, BagTruth) {
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma checked positive");
    let n = cfg.regions_per_bag;
    let planted = rng.random_range(0..n);
    let gt = random_box(rng, 150.0, 400.0);
    let mut regions = Vec::with_capacity(n);
    for i in 0..n {
        let is_obj = i == planted;
        let z: Vec<f64> = (0..cfg.feature_dim)
            .map(|j| {
                let centre = if is_obj { spec.mean[j] } else { 0.0 };
                centre + noise.sample(rng)
            })
            .collect();
        let bbox = if is_obj {
            jittered(rng, &gt)
        } else {
            background_box(rng, &[gt])
        };
        let mut r = Region::new(bbox, apply(spec.transform, z));
        if spec.split == Split::Strong {
            r.strong_labels = Some(
                spec.strong_categories
                    .iter()
                    .map(|k| (k.clone(), Label::from_bool(is_obj && k == spec.category)))
                    .collect(),
            );
        }
        regions.push(r);
    }
    let universe = match spec.split {
        Split::Strong => spec.strong_categories,
        _ => spec.weak_categories,
    };
    let weak_labels = universe
        .iter()
        .map(|k| (k.clone(), Label::from_bool(k == spec.category)))
        .collect();
    let bag = Bag {
        id: spec.id.clone(),
        source: if spec.split == Split::Strong {
            Source::Strong
        } else {
            Source::Weak
        },
        weak_labels,
        whole_image_feature: None,
        regions,
    };
    let truth = BagTruth {
        split: spec.split,
        planted: BTreeMap::from([(spec.category.to_string(), planted)]),
        boxes: BTreeMap::from([(spec.category.to_string(), vec![gt])]),
    };
    (bag, truth)
}

/// Generates training and test datasets plus hidden ground truth.
/// Deterministic per seed; each bag draws from its own RNG stream.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let strong = category_names('s', cfg.num_categories_strong);
    let weak = category_names('w', cfg.num_categories_weak);
    let all: Vec<&String> = strong.iter().chain(&weak).collect();
    let means = place_means(cfg, all.len(), &mut rng)?;
    let transform = build_transform(cfg, &mut rng);
    let mut transformed_splits = Vec::new();
    if transform.is_some() {
        transformed_splits.push(Split::Weak);
        if cfg.transform_test {
            transformed_splits.push(Split::Test);
        }
    }
    let mean_of: BTreeMap<String, Vec<f64>> = all.iter().map(|k| (*k).clone()).zip(means).collect();

    let mut train = Dataset::new(cfg.feature_dim, strong.clone(), weak.clone());
    let mut test = Dataset::new(cfg.feature_dim, strong.clone(), weak.clone());
    let mut bags = BTreeMap::new();
    let mut stream = 0u64;
    let plan = [
        (Split::Strong, &strong, cfg.strong_bags_per_category),
        (Split::Weak, &weak, cfg.weak_bags_per_category),
        (Split::Test, &weak, cfg.test_bags_per_category),
    ];
    for (split, cats, per_cat) in plan {
        let t = transform.as_deref().filter(|_| transformed_splits.contains(&split));
        for i in 0..per_cat {
            for k in cats.iter() {
                stream += 1;
                let mut bag_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                bag_rng.set_stream(stream);
                let prefix = match split {
                    Split::Strong => "strong",
                    Split::Weak => "weak",
                    Split::Test => "test",
                };
                let spec = BagSpec {
                    id: format!("{prefix}-{k}-{i:04}"),
                    split,
                    category: k,
                    mean: &mean_of[k],
                    transform: t,
                    strong_categories: &strong,
                    weak_categories: &weak,
                };
                let (bag, truth) = make_bag(cfg, &spec, &mut bag_rng);
                bags.insert(bag.id.clone(), truth);
                match split {
                    Split::Test => test.push_bag(bag),
                    _ => train.push_bag(bag),
                }
            }
        }
    }
    Ok(SynthOutput {
        train,
        test,
        truth: SynthTruth {
            params: GenParams {
                means: mean_of,
                noise_sigma: cfg.noise_sigma,
                transform,
                transformed_splits,
            },
            bags,
        },
    })
}
