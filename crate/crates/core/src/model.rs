//! Representation plus one linear detector per category and a background
//! detector. Detector vectors carry a trailing bias coordinate.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, BACKGROUND};
use crate::error::{Error, Result};
use crate::repr::{dot, ReprGrad, ReprParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 1.0,
            lambda: 1e-3,
        }
    }
}

impl HyperParams {
    pub fn check(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Addresses one detector of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Category(usize),
    Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub repr: ReprParams,
    /// Sorted category names; `detectors[i]` belongs to `categories[i]`.
    pub categories: Vec<String>,
    pub detectors: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    pub hyper: HyperParams,
}

impl Model {
    /// Zero detectors for every category of `d` plus background.
    pub fn new(repr: ReprParams, d: &Dataset, hyper: HyperParams) -> Result<Self> {
        repr.check()?;
        hyper.check()?;
        if repr.input_dim != d.feature_dim {
            return Err(Error::dims(
                "representation input vs dataset",
                d.feature_dim,
                repr.input_dim,
            ));
        }
        let categories = d.all_categories();
        let width = repr.output_dim() + 1;
        Ok(Model {
            detectors: vec![vec![0.0; width]; categories.len()],
            background: vec![0.0; width],
            repr,
            categories,
            hyper,
        })
    }

    pub fn detector_width(&self) -> usize {
        self.repr.output_dim() + 1
    }

    pub fn slot(&self, name: &str) -> Result<Slot> {
        if name == BACKGROUND {
            return Ok(Slot::Background);
        }
        self.categories
            .binary_search_by(|c| c.as_str().cmp(name))
            .map(Slot::Category)
            .map_err(|_| Error::UnknownCategory(name.to_string()))
    }

    pub fn slot_name(&self, slot: Slot) -> &str {
        match slot {
            Slot::Category(i) => &self.categories[i],
            Slot::Background => BACKGROUND,
        }
    }

    pub fn weights(&self, slot: Slot) -> &[f64] {
        match slot {
            Slot::Category(i) => &self.detectors[i],
            Slot::Background => &self.background,
        }
    }

    pub fn weights_mut(&mut self, slot: Slot) -> &mut Vec<f64> {
        match slot {
            Slot::Category(i) => &mut self.detectors[i],
            Slot::Background => &mut self.background,
        }
    }

    /// Every slot in flat-layout order: categories then background.
    pub fn slots(&self) -> impl Iterator<Item = Slot> {
        (0..self.categories.len())
            .map(Slot::Category)
            .chain(std::iter::once(Slot::Background))
    }

    pub fn check(&self) -> Result<()> {
        self.repr.check()?;
        self.hyper.check()?;
        let width = self.detector_width();
        if self.categories.len() != self.detectors.len() {
            return Err(Error::InvalidConfig("category and detector counts differ".into()));
        }
        if self.categories.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("categories must be sorted and unique".into()));
        }
        for slot in self.slots() {
            let w = self.weights(slot);
            if w.len() != width {
                return Err(Error::dims(
                    format!("detector `{}`", self.slot_name(slot)),
                    width,
                    w.len(),
                ));
            }
        }
        Ok(())
    }

    /// The model must carry a detector for every category of the dataset.
    pub fn check_covers(&self, d: &Dataset) -> Result<()> {
        if self.repr.input_dim != d.feature_dim {
            return Err(Error::dims(
                "model input vs dataset",
                d.feature_dim,
                self.repr.input_dim,
            ));
        }
        for k in d.all_categories() {
            self.slot(&k)?;
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let repr = 0..self.repr.num_params();
        let width = self.detector_width();
        let mut at = repr.end;
        let mut detectors = Vec::with_capacity(self.detectors.len());
        for _ in &self.detectors {
            detectors.push(at..at + width);
            at += width;
        }
        let background = at..at + width;
        ParamLayout {
            repr,
            detectors,
            background,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().len());
        self.repr.write_flat(&mut out);
        for w in &self.detectors {
            out.extend_from_slice(w);
        }
        out.extend_from_slice(&self.background);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let layout = self.layout();
        self.repr.read_flat(&flat[layout.repr.clone()]);
        for (w, r) in self.detectors.iter_mut().zip(&layout.detectors) {
            w.copy_from_slice(&flat[r.clone()]);
        }
        self.background.copy_from_slice(&flat[layout.background]);
    }

    /// `wᵀ[φ; 1]` for an already-computed representation output.
    pub fn score_feature(&self, slot: Slot, phi: &[f64]) -> f64 {
        score(self.weights(slot), phi)
    }
}

/// Linear score with trailing bias: `w[..F]·phi + w[F]`.
pub fn score(w: &[f64], phi: &[f64]) -> f64 {
    let (bias, head) = w.split_last().expect("detector has a bias slot");
    dot(head, phi) + bias
}

/// Where each parameter group lives in [`Model::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub repr: Range<usize>,
    pub detectors: Vec<Range<usize>>,
    pub background: Range<usize>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.background.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot(&self, slot: Slot) -> Range<usize> {
        match slot {
            Slot::Category(i) => self.detectors[i].clone(),
            Slot::Background => self.background.clone(),
        }
    }
}

/// Gradient with respect to every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub repr: ReprGrad,
    pub detectors: Vec<Vec<f64>>,
    pub background: Vec<f64>,
}

impl ModelGrad {
    pub fn zeros(model: &Model) -> Self {
        ModelGrad {
            repr: model.repr.zero_grad(),
            detectors: vec![vec![0.0; model.detector_width()]; model.detectors.len()],
            background: vec![0.0; model.detector_width()],
        }
    }

    pub fn slot(&self, slot: Slot) -> &[f64] {
        match slot {
            Slot::Category(i) => &self.detectors[i],
            Slot::Background => &self.background,
        }
    }

    pub fn slot_mut(&mut self, slot: Slot) -> &mut [f64] {
        match slot {
            Slot::Category(i) => &mut self.detectors[i],
            Slot::Background => &mut self.background,
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrad) {
        self.repr.add_assign(&other.repr);
        for (a, b) in self.detectors.iter_mut().zip(&other.detectors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.background
            .iter_mut()
            .zip(&other.background)
            .for_each(|(x, y)| *x += y);
    }

    pub fn scale(&mut self, s: f64) {
        self.repr.scale(s);
        for v in self.detectors.iter_mut().flatten().chain(self.background.iter_mut()) {
            *v *= s;
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.repr
            .iter()
            .chain(self.detectors.iter().flatten())
            .chain(&self.background)
            .copied()
            .collect()
    }

    /// Detector gradients keyed by detector name.
    pub fn detector_map(&self, model: &Model) -> BTreeMap<String, Vec<f64>> {
        model
            .slots()
            .map(|s| (model.slot_name(s).to_string(), self.slot(s).to_vec()))
            .collect()
    }
}
