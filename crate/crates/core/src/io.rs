//! On-disk formats.
//!
//! Datasets and assignments are JSON lines. A dataset file starts with a
//! header object naming the feature dimension and category splits, followed
//! by one bag per line. Checkpoints and ground truth are single JSON objects.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Bag, Dataset};
use crate::error::{Error, Result};
use crate::mining::MiningAssignment;
use crate::model::{HyperParams, Model};
use crate::repr::ReprParams;
use crate::synth::SynthTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    feature_dim: usize,
    categories_strong: BTreeSet<String>,
    categories_weak: BTreeSet<String>,
}

pub fn write_dataset<W: Write>(d: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        feature_dim: d.feature_dim,
        categories_strong: d.categories_strong.clone(),
        categories_weak: d.categories_weak.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for bag in d.bags() {
        serde_json::to_writer(&mut w, bag)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a dataset without validating its contents.
pub fn read_dataset_unchecked<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let (n, first) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| Error::Parse {
        line: n,
        message: format!("header: {e}"),
    })?;
    let mut d = Dataset::new(header.feature_dim, header.categories_strong, header.categories_weak);
    for (n, line) in lines {
        let bag: Bag = serde_json::from_str(&line?).map_err(|e| Error::Parse {
            line: n,
            message: e.to_string(),
        })?;
        d.push_bag(bag);
    }
    Ok(d)
}

/// Parses and validates a dataset.
pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let d = read_dataset_unchecked(r)?;
    d.ensure_valid()?;
    Ok(d)
}

pub fn dataset_to_string(d: &Dataset) -> Result<String> {
    let mut buf = Vec::new();
    write_dataset(d, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    write_dataset(d, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Serialized form of a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub repr_params: ReprParams,
    pub detectors: BTreeMap<String, Vec<f64>>,
    pub background: Vec<f64>,
    pub hyperparams: HyperParams,
}

impl From<&Model> for Checkpoint {
    fn from(m: &Model) -> Self {
        Checkpoint {
            repr_params: m.repr.clone(),
            detectors: m.categories.iter().cloned().zip(m.detectors.iter().cloned()).collect(),
            background: m.background.clone(),
            hyperparams: m.hyper,
        }
    }
}

impl TryFrom<Checkpoint> for Model {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Model> {
        let (categories, detectors) = c.detectors.into_iter().unzip();
        let m = Model {
            repr: c.repr_params,
            categories,
            detectors,
            background: c.background,
            hyper: c.hyperparams,
        };
        m.check()?;
        Ok(m)
    }
}

pub fn model_to_string(m: &Model) -> Result<String> {
    let mut s = serde_json::to_string(&Checkpoint::from(m))?;
    s.push('\n');
    Ok(s)
}

pub fn model_from_str(s: &str) -> Result<Model> {
    let c: Checkpoint = serde_json::from_str(s)?;
    c.try_into()
}

pub fn save_model(m: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_string(m)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_str(&std::fs::read_to_string(path)?)
}

pub fn write_assignments<W: Write>(assignments: &[MiningAssignment], mut w: W) -> Result<()> {
    for a in assignments {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignments<R: BufRead>(r: R) -> Result<Vec<MiningAssignment>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_assignments(assignments: &[MiningAssignment], path: &Path) -> Result<()> {
    write_assignments(assignments, BufWriter::new(File::create(path)?))
}

pub fn load_assignments(path: &Path) -> Result<Vec<MiningAssignment>> {
    read_assignments(BufReader::new(File::open(path)?))
}

pub fn save_truth(t: &SynthTruth, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string(t)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn load_truth(path: &Path) -> Result<SynthTruth> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
