//! Bags, regions, labels and datasets.
//!
//! A [`Bag`] is one image seen as a set of region proposals. Strong bags carry
//! region-level labels, weak bags only image-level ones. Category labels are
//! stored sparsely: a category missing from a label map reads as negative.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Reserved detector name for the background detector.
pub const BACKGROUND: &str = "__background__";

/// A binary label, serialized as `1` / `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Pos,
    Neg,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    pub fn is_pos(self) -> bool {
        self == Label::Pos
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Pos
        } else {
            Label::Neg
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(match self {
            Label::Pos => 1,
            Label::Neg => -1,
        })
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match i8::deserialize(d)? {
            1 => Ok(Label::Pos),
            -1 => Ok(Label::Neg),
            other => Err(serde::de::Error::custom(format!("label must be 1 or -1, got {other}"))),
        }
    }
}

/// Axis-aligned box in pixel coordinates, serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidDataset(format!("degenerate box {b:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x_min: v[0],
            y_min: v[1],
            x_max: v[2],
            y_max: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Strong,
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong_labels: Option<BTreeMap<String, Label>>,
    /// Background label, only meaningful on strong regions once assigned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<Label>,
}

impl Region {
    pub fn new(bbox: BBox, feature: Vec<f64>) -> Self {
        Region {
            bbox,
            feature,
            strong_labels: None,
            background: None,
        }
    }

    pub fn strong_label(&self, category: &str) -> Option<Label> {
        self.strong_labels
            .as_ref()
            .map(|m| m.get(category).copied().unwrap_or(Label::Neg))
    }

    pub fn is_strong_positive(&self) -> bool {
        self.strong_labels
            .as_ref()
            .is_some_and(|m| m.values().any(|l| l.is_pos()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    pub source: Source,
    pub weak_labels: BTreeMap<String, Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whole_image_feature: Option<Vec<f64>>,
    pub regions: Vec<Region>,
}

impl Bag {
    /// Image-level label; absent categories are negative.
    pub fn weak_label(&self, category: &str) -> Label {
        self.weak_labels.get(category).copied().unwrap_or(Label::Neg)
    }

    /// The feature standing in for the whole image: the explicit one when
    /// present, else the mean of the region features.
    pub fn whole_image_feature(&self) -> Vec<f64> {
        if let Some(f) = &self.whole_image_feature {
            return f.clone();
        }
        let dim = self.regions.first().map_or(0, |r| r.feature.len());
        let mut mean = vec![0.0; dim];
        for r in &self.regions {
            for (m, v) in mean.iter_mut().zip(&r.feature) {
                *m += v;
            }
        }
        let n = self.regions.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub categories_strong: BTreeSet<String>,
    pub categories_weak: BTreeSet<String>,
    pub strong_bags: Vec<Bag>,
    pub weak_bags: Vec<Bag>,
}

impl Dataset {
    pub fn new(
        feature_dim: usize,
        categories_strong: impl IntoIterator<Item = String>,
        categories_weak: impl IntoIterator<Item = String>,
    ) -> Self {
        Dataset {
            feature_dim,
            categories_strong: categories_strong.into_iter().collect(),
            categories_weak: categories_weak.into_iter().collect(),
            strong_bags: Vec::new(),
            weak_bags: Vec::new(),
        }
    }

    /// C_S ∪ C_W in sorted order.
    pub fn all_categories(&self) -> Vec<String> {
        self.categories_strong.union(&self.categories_weak).cloned().collect()
    }

    pub fn bags(&self) -> impl Iterator<Item = &Bag> {
        self.strong_bags.iter().chain(&self.weak_bags)
    }

    pub fn push_bag(&mut self, bag: Bag) {
        match bag.source {
            Source::Strong => self.strong_bags.push(bag),
            Source::Weak => self.weak_bags.push(bag),
        }
    }

    pub fn weak_bag(&self, id: &str) -> Option<(usize, &Bag)> {
        self.weak_bags.iter().enumerate().find(|(_, b)| b.id == id)
    }

    pub fn find_bag(&self, id: &str) -> Option<&Bag> {
        self.bags().find(|b| b.id == id)
    }

    /// Copy of the dataset without its strong split.
    pub fn without_strong(&self) -> Dataset {
        Dataset {
            strong_bags: Vec::new(),
            categories_strong: BTreeSet::new(),
            ..self.clone()
        }
    }

    /// Returns `Ok(())` when [`validate_dataset`] finds nothing, otherwise the
    /// first few violations as an error.
    pub fn ensure_valid(&self) -> Result<()> {
        let violations = validate_dataset(self);
        if violations.is_empty() {
            Ok(())
        } else {
            let shown: Vec<_> = violations.iter().take(5).cloned().collect();
            let more = violations.len().saturating_sub(shown.len());
            let mut msg = shown.join("; ");
            if more > 0 {
                msg.push_str(&format!("; and {more} more"));
            }
            Err(Error::InvalidDataset(msg))
        }
    }
}

/// Checks every dataset invariant and returns one description per violation.
pub fn validate_dataset(d: &Dataset) -> Vec<String> {
    let mut out = Vec::new();
    if d.feature_dim == 0 {
        out.push("dataset: feature_dim must be positive".to_string());
    }
    let known: BTreeSet<&str> = d
        .categories_strong
        .iter()
        .chain(&d.categories_weak)
        .map(String::as_str)
        .collect();
    if known.contains(BACKGROUND) {
        out.push(format!("dataset: category name `{BACKGROUND}` is reserved"));
    }

    let mut seen = HashSet::new();
    for (expected_source, bags) in [(Source::Strong, &d.strong_bags), (Source::Weak, &d.weak_bags)] {
        for bag in bags {
            let id = &bag.id;
            if !seen.insert(id.as_str()) {
                out.push(format!("bag {id}: duplicate id"));
            }
            if bag.source != expected_source {
                out.push(format!("bag {id}: source does not match its split"));
            }
            if bag.regions.is_empty() {
                out.push(format!("bag {id}: regions empty"));
            }
            for k in bag.weak_labels.keys() {
                if !known.contains(k.as_str()) {
                    out.push(format!("bag {id}: unknown category `{k}` in weak labels"));
                }
            }
            if let Some(f) = &bag.whole_image_feature {
                check_feature(&mut out, id, "whole-image feature", f, d.feature_dim);
            }
            for (i, r) in bag.regions.iter().enumerate() {
                if !r.bbox.is_valid() {
                    out.push(format!("bag {id}: region {i} has an invalid box"));
                }
                check_feature(&mut out, id, &format!("region {i} feature"), &r.feature, d.feature_dim);
                match (&r.strong_labels, bag.source) {
                    (None, Source::Strong) => {
                        out.push(format!("bag {id}: region {i} of a strong bag lacks strong labels"))
                    }
                    (Some(_), Source::Weak) => {
                        out.push(format!("bag {id}: region {i} of a weak bag has strong labels"))
                    }
                    (Some(m), Source::Strong) => {
                        for k in m.keys() {
                            if !known.contains(k.as_str()) {
                                out.push(format!("bag {id}: region {i} has unknown category `{k}`"));
                            }
                        }
                    }
                    (None, Source::Weak) => {}
                }
            }
            if bag.source == Source::Strong {
                for k in &known {
                    let any_pos = bag.regions.iter().any(|r| r.strong_label(k) == Some(Label::Pos));
                    if bag.weak_label(k).is_pos() != any_pos {
                        out.push(format!(
                            "bag {id}: image label for `{k}` inconsistent with region labels"
                        ));
                    }
                }
            }
        }
    }
    out
}

fn check_feature(out: &mut Vec<String>, id: &str, what: &str, f: &[f64], dim: usize) {
    if f.len() != dim {
        out.push(format!("bag {id}: {what} has length {}, expected {dim}", f.len()));
    } else if f.iter().any(|v| !v.is_finite()) {
        out.push(format!("bag {id}: {what} is not finite"));
    }
}
