//! Bags, instances, synthetic MIL generators and the JSON-Lines dataset format.
//!
//! A dataset file starts with a header line followed by one bag per line:
//!
//! ```text
//! {"schema":"ins-mil/v1","d_raw":4,"metadata":{"generator":"gaussian"}}
//! {"bag_id":0,"label":1,"instances":[[0.1,0.2,0.3,0.4],...],"truth":[0,1,...]}
//! {"bag_id":1,"label":0,"instances":[[...],...],"truth":null}
//! ```
//!
//! Floats are written in shortest round-trip form, so `load(save(ds)) == ds`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA: &str = "ins-mil/v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    /// Ground truth, for evaluation only. Training never reads it.
    pub truth_label: Option<u8>,
    pub bag_index: usize,
    pub index_in_bag: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub bag_id: u64,
    pub label: u8,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    pub fn truth(&self) -> Option<Vec<u8>> {
        self.instances.iter().map(|i| i.truth_label).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilDataset {
    pub bags: Vec<Bag>,
    pub d_raw: usize,
    pub has_instance_truth: bool,
    pub metadata: BTreeMap<String, String>,
}

impl MilDataset {
    /// Builds a dataset from `(bag_id, label, features, truth)` records,
    /// filling in instance positions and the truth flag.
    pub fn from_records<I>(d_raw: usize, records: I) -> Self
    where
        I: IntoIterator<Item = (u64, u8, Vec<Vec<f64>>, Option<Vec<u8>>)>,
    {
        let bags: Vec<Bag> = records
            .into_iter()
            .enumerate()
            .map(|(bag_index, (bag_id, label, feats, truth))| Bag {
                bag_id,
                label,
                instances: feats
                    .into_iter()
                    .enumerate()
                    .map(|(j, features)| Instance {
                        features,
                        truth_label: truth.as_ref().and_then(|t| t.get(j).copied()),
                        bag_index,
                        index_in_bag: j,
                    })
                    .collect(),
            })
            .collect();
        let mut ds = MilDataset {
            bags,
            d_raw,
            has_instance_truth: false,
            metadata: BTreeMap::new(),
        };
        ds.refresh_truth_flag();
        ds
    }

    pub fn num_instances(&self) -> usize {
        self.bags.iter().map(|b| b.instances.len()).sum()
    }

    /// Instances in dataset order; the position in this iterator is the
    /// global instance id used by the trainer and the pseudo-label store.
    pub fn instances(&self) -> impl Iterator<Item = &Instance> + '_ {
        self.bags.iter().flat_map(|b| b.instances.iter())
    }

    /// Per-instance truth labels in global instance order, if every instance has one.
    pub fn instance_truth(&self) -> Option<Vec<u8>> {
        if !self.has_instance_truth {
            return None;
        }
        self.instances().map(|i| i.truth_label).collect()
    }

    /// Per-instance bag label in global instance order.
    pub fn instance_bag_labels(&self) -> Vec<u8> {
        self.bags
            .iter()
            .flat_map(|b| std::iter::repeat_n(b.label, b.instances.len()))
            .collect()
    }

    /// A copy without any instance truth labels.
    pub fn strip_truth(&self) -> MilDataset {
        let mut ds = self.clone();
        for inst in ds.bags.iter_mut().flat_map(|b| b.instances.iter_mut()) {
            inst.truth_label = None;
        }
        ds.has_instance_truth = false;
        ds
    }

    pub fn grid_side(&self) -> Option<usize> {
        self.metadata.get("grid_side").and_then(|s| s.parse().ok())
    }

    fn refresh_truth_flag(&mut self) {
        self.has_instance_truth = self.num_instances() > 0
            && self.instances().all(|i| i.truth_label.is_some());
    }
}

/// Parameters of the synthetic Gaussian MIL generator.
///
/// Class means sit at `∓ class_separation / 2` along the unit diagonal
/// `(1, …, 1) / √d_raw`, independent of the seed, so datasets generated with
/// different seeds share one class geometry and can serve as train/test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_pos_bags: usize,
    pub n_neg_bags: usize,
    pub instances_per_bag: usize,
    pub positive_ratio: f64,
    pub d_raw: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_pos_bags: 100,
            n_neg_bags: 100,
            instances_per_bag: 50,
            positive_ratio: 0.2,
            d_raw: 32,
            class_separation: 3.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Number of truth-positive instances placed in every positive bag.
    pub fn positives_per_bag(&self) -> usize {
        ((self.positive_ratio * self.instances_per_bag as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pos_bags + self.n_neg_bags == 0 {
            return Err(Error::config("n_pos_bags", "and n_neg_bags are both zero"));
        }
        if self.instances_per_bag == 0 {
            return Err(Error::config("instances_per_bag", "must be at least 1"));
        }
        if !(self.positive_ratio > 0.0 && self.positive_ratio <= 1.0) {
            return Err(Error::config(
                "positive_ratio",
                format!("must lie in (0, 1], got {}", self.positive_ratio),
            ));
        }
        if self.d_raw == 0 {
            return Err(Error::config("d_raw", "must be at least 1"));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::config(
                "class_separation",
                format!("must be finite and >= 0, got {}", self.class_separation),
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "noise_sigma",
                format!("must be finite and > 0, got {}", self.noise_sigma),
            ));
        }
        Ok(())
    }

    /// `(mean_neg, mean_pos)`, separated by exactly `class_separation`.
    pub fn class_means(&self) -> (Vec<f64>, Vec<f64>) {
        let half = 0.5 * self.class_separation / (self.d_raw as f64).sqrt();
        (vec![-half; self.d_raw], vec![half; self.d_raw])
    }

    fn metadata(&self, generator: &str) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("generator".into(), generator.into());
        m.insert("n_pos_bags".into(), self.n_pos_bags.to_string());
        m.insert("n_neg_bags".into(), self.n_neg_bags.to_string());
        m.insert("instances_per_bag".into(), self.instances_per_bag.to_string());
        m.insert("positive_ratio".into(), self.positive_ratio.to_string());
        m.insert("class_separation".into(), self.class_separation.to_string());
        m.insert("noise_sigma".into(), self.noise_sigma.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }
}

/// Gaussian class-conditional MIL data with a fixed number of positives per positive bag.
pub fn generate_gaussian_mil(cfg: &SyntheticConfig) -> Result<MilDataset> {
    cfg.validate()?;
    let n = cfg.instances_per_bag;
    let k = cfg.positives_per_bag();
    generate_with(cfg, "gaussian", |rng| {
        let mut mask = vec![false; n];
        for i in index::sample(rng, n, k) {
            mask[i] = true;
        }
        mask
    })
}

/// Like [`generate_gaussian_mil`] but instances are laid out on a
/// `grid_side × grid_side` grid (index `r * grid_side + c`) and the positives
/// of a positive bag fill a contiguous block at a seeded location.
///
/// The block has side `ceil(sqrt(k))` for `k` positives and is filled in
/// row-major order, so it is an exact square whenever `k` is a perfect square.
pub fn generate_grid_mil(cfg: &SyntheticConfig, grid_side: usize) -> Result<MilDataset> {
    cfg.validate()?;
    if grid_side == 0 || cfg.instances_per_bag != grid_side * grid_side {
        return Err(Error::config(
            "instances_per_bag",
            format!(
                "must equal grid_side² = {}, got {}",
                grid_side * grid_side,
                cfg.instances_per_bag
            ),
        ));
    }
    let k = cfg.positives_per_bag();
    let side = (1..=grid_side).find(|s| s * s >= k).unwrap_or(grid_side);
    let mut ds = generate_with(cfg, "grid", |rng| {
        let r0 = rng.random_range(0..=grid_side - side);
        let c0 = rng.random_range(0..=grid_side - side);
        let mut mask = vec![false; grid_side * grid_side];
        for t in 0..k {
            let (dr, dc) = (t / side, t % side);
            mask[(r0 + dr) * grid_side + c0 + dc] = true;
        }
        mask
    })?;
    ds.metadata.insert("grid_side".into(), grid_side.to_string());
    Ok(ds)
}

fn generate_with<F>(cfg: &SyntheticConfig, generator: &str, mut place: F) -> Result<MilDataset>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<bool>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let (mean_neg, mean_pos) = cfg.class_means();
    let n = cfg.instances_per_bag;

    let mut records = Vec::with_capacity(cfg.n_pos_bags + cfg.n_neg_bags);
    for b in 0..cfg.n_pos_bags + cfg.n_neg_bags {
        let positive = b < cfg.n_pos_bags;
        let mask = if positive { place(&mut rng) } else { vec![false; n] };
        let feats: Vec<Vec<f64>> = mask
            .iter()
            .map(|&pos| {
                let mean = if pos { &mean_pos } else { &mean_neg };
                mean.iter().map(|m| m + noise.sample(&mut rng)).collect()
            })
            .collect();
        let truth = mask.iter().map(|&p| p as u8).collect();
        records.push((b as u64, positive as u8, feats, Some(truth)));
    }

    let mut ds = MilDataset::from_records(cfg.d_raw, records);
    ds.metadata = cfg.metadata(generator);
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    EmptyBag,
    FeatureLength,
    NonFiniteFeature,
    LabelRange,
    TruthRange,
    /// A bag is positive iff at least one of its instances is positive.
    BagLabel,
    TruthFlag,
    InstancePosition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub bag_id: Option<u64>,
    /// Position of the bag in `ds.bags`.
    pub bag_position: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bag_id {
            Some(id) => write!(f, "bag {id}: {:?}: {}", self.rule, self.detail),
            None => write!(f, "{:?}: {}", self.rule, self.detail),
        }
    }
}

/// Checks every dataset invariant. An empty result means the dataset is valid.
pub fn validate_dataset(ds: &MilDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |pos: Option<usize>, rule, detail: String| {
        out.push(Violation {
            bag_id: pos.map(|p| ds.bags[p].bag_id),
            bag_position: pos,
            rule,
            detail,
        })
    };

    for (p, bag) in ds.bags.iter().enumerate() {
        if bag.instances.is_empty() {
            push(Some(p), Rule::EmptyBag, "bag has no instances".into());
        }
        if bag.label > 1 {
            push(Some(p), Rule::LabelRange, format!("label {} not in {{0,1}}", bag.label));
        }
        for (j, inst) in bag.instances.iter().enumerate() {
            if inst.features.len() != ds.d_raw {
                push(
                    Some(p),
                    Rule::FeatureLength,
                    format!("instance {j} has {} features, d_raw is {}", inst.features.len(), ds.d_raw),
                );
            }
            if inst.features.iter().any(|v| !v.is_finite()) {
                push(Some(p), Rule::NonFiniteFeature, format!("instance {j} has a non-finite feature"));
            }
            if matches!(inst.truth_label, Some(t) if t > 1) {
                push(Some(p), Rule::TruthRange, format!("instance {j} truth label not in {{0,1}}"));
            }
            if inst.bag_index != p || inst.index_in_bag != j {
                push(
                    Some(p),
                    Rule::InstancePosition,
                    format!(
                        "instance {j} records position ({}, {})",
                        inst.bag_index, inst.index_in_bag
                    ),
                );
            }
        }
        if let Some(truth) = bag.truth() {
            let any_pos = truth.contains(&1);
            if bag.label == 0 && any_pos {
                push(
                    Some(p),
                    Rule::BagLabel,
                    "negative bag contains a truth-positive instance".into(),
                );
            } else if bag.label == 1 && !truth.is_empty() && !any_pos {
                push(
                    Some(p),
                    Rule::BagLabel,
                    "positive bag has no truth-positive instance".into(),
                );
            }
        }
    }

    let all_truth = ds.num_instances() > 0 && ds.instances().all(|i| i.truth_label.is_some());
    if ds.has_instance_truth != all_truth {
        push(
            None,
            Rule::TruthFlag,
            format!("has_instance_truth = {} but every-instance truth is {all_truth}", ds.has_instance_truth),
        );
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    d_raw: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct BagRecordOut<'a> {
    bag_id: u64,
    label: u8,
    instances: Vec<&'a [f64]>,
    truth: Option<Vec<u8>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BagRecordIn {
    bag_id: u64,
    label: u8,
    instances: Vec<Vec<f64>>,
    truth: Option<Vec<u8>>,
}

pub fn save_dataset(ds: &MilDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(|e| match e {
        Error::Json(j) if j.is_io() => Error::io(path, j.into()),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset<W: Write>(ds: &MilDataset, mut w: W) -> Result<()> {
    let header = Header {
        schema: SCHEMA.into(),
        d_raw: ds.d_raw,
        metadata: ds.metadata.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(serde_json::Error::io)?;
    for bag in &ds.bags {
        let rec = BagRecordOut {
            bag_id: bag.bag_id,
            label: bag.label,
            instances: bag.instances.iter().map(|i| i.features.as_slice()).collect(),
            truth: bag.truth(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(serde_json::Error::io)?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<MilDataset> {
    load_dataset_with(path, false)
}

/// Loads a dataset; with `strip_truth` every instance truth label is dropped.
pub fn load_dataset_with(path: impl AsRef<Path>, strip_truth: bool) -> Result<MilDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ds = read_dataset(BufReader::new(file)).map_err(|e| match e {
        Error::Json(j) if j.is_io() => Error::io(path, j.into()),
        other => other,
    })?;
    Ok(if strip_truth { ds.strip_truth() } else { ds })
}

/// Parses the JSON-Lines format. Record numbers in errors are 1-based line numbers.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<MilDataset> {
    let mut header: Option<Header> = None;
    let mut records = Vec::new();
    let mut lines_of_bags = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let record = idx + 1;
        let line = line.map_err(serde_json::Error::io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            record,
            reason: e.to_string(),
        };
        match &header {
            None => {
                let h: Header = serde_json::from_str(&line).map_err(parse_err)?;
                if h.schema != SCHEMA {
                    return Err(Error::Schema {
                        record,
                        reason: format!("unknown schema {:?}, expected {SCHEMA:?}", h.schema),
                    });
                }
                header = Some(h);
            }
            Some(h) => {
                let rec: BagRecordIn = serde_json::from_str(&line).map_err(parse_err)?;
                if let Some(bad) = rec.instances.iter().position(|f| f.len() != h.d_raw) {
                    return Err(Error::Schema {
                        record,
                        reason: format!(
                            "instance {bad} has {} features, header d_raw is {}",
                            rec.instances[bad].len(),
                            h.d_raw
                        ),
                    });
                }
                if let Some(t) = &rec.truth {
                    if t.len() != rec.instances.len() {
                        return Err(Error::Schema {
                            record,
                            reason: format!(
                                "{} truth labels for {} instances",
                                t.len(),
                                rec.instances.len()
                            ),
                        });
                    }
                }
                lines_of_bags.push(record);
                records.push((rec.bag_id, rec.label, rec.instances, rec.truth));
            }
        }
    }

    let header = header.ok_or(Error::Parse {
        record: 1,
        reason: "missing header line".into(),
    })?;
    let mut ds = MilDataset::from_records(header.d_raw, records);
    ds.metadata = header.metadata;
    if let Some(v) = validate_dataset(&ds).into_iter().next() {
        let record = v.bag_position.map(|p| lines_of_bags[p]).unwrap_or(1);
        return Err(Error::Schema {
            record,
            reason: v.to_string(),
        });
    }
    Ok(ds)
}
