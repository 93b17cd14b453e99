//! Deterministic two-domain, group-structured, multi-label benchmark.
//!
//! The union label space has 21 labels: 7 shared, 7 unique to domain A and
//! 7 unique to domain B; every sample carries annotations for exactly the 14
//! labels present in its domain. Domain B features pass through an invertible
//! affine shift (a rotation mixing a fraction of the coordinates plus a
//! translation). Shared labels are sampled from pre-shift coordinates in both
//! domains, so the shared concepts stay comparable; domain-unique labels are
//! sampled from the coordinates the model actually sees.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::distributions::Uniform;
use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::LabelMask;
use crate::optim::TrainSet;
use crate::rng::sub_rng;

pub const NUM_SHARED: usize = 7;
pub const NUM_UNIQUE: usize = 7;
pub const NUM_LABELS: usize = 21;

/// Sample ids and group ids of domain B start here; domain A starts at 0.
pub const DOMAIN_B_ID_OFFSET: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    /// The 14 labels annotated in this domain: the shared block plus the
    /// domain's unique block.
    pub fn mask(self) -> LabelMask {
        let mut active = vec![false; NUM_LABELS];
        for a in active.iter_mut().take(NUM_SHARED) {
            *a = true;
        }
        let unique = match self {
            Domain::A => NUM_SHARED..NUM_SHARED + NUM_UNIQUE,
            Domain::B => NUM_SHARED + NUM_UNIQUE..NUM_LABELS,
        };
        for l in unique {
            active[l] = true;
        }
        LabelMask::new(active)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::A => write!(f, "A"),
            Domain::B => write!(f, "B"),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Domain::A),
            "B" => Ok(Domain::B),
            other => Err(Error::integrity(format!("unknown domain {other:?}"))),
        }
    }
}

/// Mask with only the 7 shared labels active (cross-domain evaluation).
pub fn shared_label_mask() -> LabelMask {
    LabelMask::from_indices(NUM_LABELS, &(0..NUM_SHARED).collect::<Vec<_>>())
}

/// Canonical label names in union order.
pub fn label_names() -> Vec<String> {
    let mut names = Vec::with_capacity(NUM_LABELS);
    for i in 1..=NUM_SHARED {
        names.push(format!("shared_{i}"));
    }
    for i in 1..=NUM_UNIQUE {
        names.push(format!("uniq_a_{i}"));
    }
    for i in 1..=NUM_UNIQUE {
        names.push(format!("uniq_b_{i}"));
    }
    names
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub group_id: u32,
    pub domain: Domain,
    pub features: Vec<f64>,
    /// 0/1 over the 21-label union; entries outside `mask` are 0 and are
    /// never read by losses or metrics.
    pub labels: Vec<f64>,
    pub mask: LabelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub seed: u64,
    pub spec_hash: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Unique group ids in ascending order.
    pub fn group_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.samples.iter().map(|s| s.group_id).collect();
        set.into_iter().collect()
    }

    pub fn subset_by_groups(&self, groups: &BTreeSet<u32>) -> Dataset {
        Dataset {
            feature_dim: self.feature_dim,
            seed: self.seed,
            spec_hash: self.spec_hash.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| groups.contains(&s.group_id))
                .cloned()
                .collect(),
        }
    }

    /// Row-major views for training; each row keeps its own domain mask.
    pub fn to_train_set(&self) -> Result<TrainSet> {
        let inputs =
            Matrix::from_rows(&self.samples.iter().map(|s| s.features.clone()).collect::<Vec<_>>())?;
        let targets =
            Matrix::from_rows(&self.samples.iter().map(|s| s.labels.clone()).collect::<Vec<_>>())?;
        Ok(TrainSet {
            inputs,
            targets,
            masks: self.samples.iter().map(|s| s.mask.clone()).collect(),
            sample_ids: self.samples.iter().map(|s| s.id).collect(),
        })
    }

    /// Input and label matrices for evaluation.
    pub fn eval_matrices(&self) -> Result<(Matrix, Matrix)> {
        let set = self.to_train_set()?;
        Ok((set.inputs, set.targets))
    }
}

/// Generator configuration; everything is derived from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub feature_dim: usize,
    pub groups_per_domain: usize,
    pub samples_per_group: (usize, usize),
    /// Fraction of feature variance shared within a group.
    pub group_corr: f64,
    /// Approximate norm of each ground-truth label weight row.
    pub label_scale: f64,
    /// Label biases are uniform in `[-bias_range, bias_range]`.
    pub bias_range: f64,
    /// Fraction of coordinates mixed by the domain-B rotation.
    pub shift_mix_fraction: f64,
    /// Largest rotation angle (radians) of a single coordinate-pair mix;
    /// pairs draw their angle uniformly from half this value to this value.
    pub shift_max_angle: f64,
    /// Euclidean norm of the domain-B translation.
    pub shift_translation: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            feature_dim: 32,
            groups_per_domain: 600,
            samples_per_group: (1, 3),
            group_corr: 0.3,
            label_scale: 1.5,
            bias_range: 0.6,
            shift_mix_fraction: 0.5,
            shift_max_angle: 0.6,
            shift_translation: 1.0,
            seed: 2024,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        if self.groups_per_domain == 0 {
            return Err(Error::config("groups_per_domain must be positive"));
        }
        let (lo, hi) = self.samples_per_group;
        if lo == 0 || hi < lo {
            return Err(Error::config("samples_per_group must satisfy 1 <= min <= max"));
        }
        if !(0.0..1.0).contains(&self.group_corr) {
            return Err(Error::config("group_corr must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.shift_mix_fraction)
            || !self.shift_translation.is_finite()
            || self.shift_translation < 0.0
            || !(0.0..=std::f64::consts::PI).contains(&self.shift_max_angle)
        {
            return Err(Error::config(
                "shift parameters out of range; the shift must stay invertible",
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_string(&digest[..8])
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Ground truth resolved from a config: label weights, biases and the
/// domain-B affine shift.
struct ResolvedBenchmark {
    weights: Vec<Vec<f64>>, // 21 x d
    biases: Vec<f64>,
    rotation: Matrix, // d x d orthogonal
    translation: Vec<f64>,
}

fn resolve(cfg: &BenchmarkConfig) -> ResolvedBenchmark {
    let d = cfg.feature_dim;
    let mut rng = sub_rng(cfg.seed, "ground-truth");
    let per_entry = cfg.label_scale / (d as f64).sqrt();
    let weights: Vec<Vec<f64>> = (0..NUM_LABELS)
        .map(|_| {
            (0..d)
                .map(|_| per_entry * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let biases: Vec<f64> = (0..NUM_LABELS)
        .map(|_| rng.sample(Uniform::new_inclusive(-cfg.bias_range, cfg.bias_range)))
        .collect();

    let mut rng = sub_rng(cfg.seed, "shift");
    let mixed = ((d as f64) * cfg.shift_mix_fraction).round() as usize;
    let mut rotation = identity(d);
    // two rounds of random pairings; each pair gets a Givens rotation with a
    // substantial angle, so the product is orthogonal and genuinely mixes
    for _ in 0..2 {
        let mut coords: Vec<usize> = (0..d).collect();
        coords.shuffle(&mut rng);
        let coords = &coords[..mixed];
        for pair in coords.chunks(2) {
            if let [a, b] = *pair {
                let angle = if cfg.shift_max_angle > 0.0 {
                    rng.sample(Uniform::new_inclusive(
                        cfg.shift_max_angle / 2.0,
                        cfg.shift_max_angle,
                    ))
                } else {
                    0.0
                };
                apply_givens(&mut rotation, a, b, angle);
            }
        }
    }
    let translation = if cfg.shift_translation > 0.0 {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        dir.into_iter()
            .map(|v| v / norm * cfg.shift_translation)
            .collect()
    } else {
        // keep the rng stream aligned whether or not a translation is used
        let _: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        vec![0.0; d]
    };
    ResolvedBenchmark {
        weights,
        biases,
        rotation,
        translation,
    }
}

fn identity(d: usize) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        m.set(i, i, 1.0);
    }
    m
}

/// Left-multiplies `m` by the Givens rotation in the `(a, b)` plane.
fn apply_givens(m: &mut Matrix, a: usize, b: usize, angle: f64) {
    let (sin, cos) = angle.sin_cos();
    for j in 0..m.cols() {
        let ra = m.get(a, j);
        let rb = m.get(b, j);
        m.set(a, j, cos * ra - sin * rb);
        m.set(b, j, sin * ra + cos * rb);
    }
}

fn mat_vec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Generates both domains deterministically from the config seed.
pub fn generate(cfg: &BenchmarkConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let resolved = resolve(cfg);
    let spec_hash = cfg.hash();
    let a = generate_domain(cfg, &resolved, Domain::A, &spec_hash);
    let b = generate_domain(cfg, &resolved, Domain::B, &spec_hash);
    Ok((a, b))
}

fn generate_domain(
    cfg: &BenchmarkConfig,
    resolved: &ResolvedBenchmark,
    domain: Domain,
    spec_hash: &str,
) -> Dataset {
    let d = cfg.feature_dim;
    let tag = match domain {
        Domain::A => "domain-a",
        Domain::B => "domain-b",
    };
    let (id_base, group_base) = match domain {
        Domain::A => (0, 0u32),
        Domain::B => (DOMAIN_B_ID_OFFSET, DOMAIN_B_ID_OFFSET as u32),
    };
    let mask = domain.mask();
    let mut rng = sub_rng(cfg.seed, tag);
    let group_sd = cfg.group_corr.sqrt();
    let noise_sd = (1.0 - cfg.group_corr).sqrt();
    let (min_s, max_s) = cfg.samples_per_group;

    let mut samples = Vec::new();
    let mut next_id = id_base;
    for g in 0..cfg.groups_per_domain {
        let offset: Vec<f64> = (0..d)
            .map(|_| group_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let count = rng.gen_range(min_s..=max_s);
        for _ in 0..count {
            let pre: Vec<f64> = offset
                .iter()
                .map(|o| o + noise_sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let features = match domain {
                Domain::A => pre.clone(),
                Domain::B => {
                    let mut x = mat_vec(&resolved.rotation, &pre);
                    for (v, t) in x.iter_mut().zip(&resolved.translation) {
                        *v += t;
                    }
                    x
                }
            };
            let mut labels = vec![0.0; NUM_LABELS];
            for l in 0..NUM_LABELS {
                if !mask.is_active(l) {
                    continue;
                }
                // shared concepts live in pre-shift coordinates; unique
                // labels in the coordinates the model observes
                let coords = if l < NUM_SHARED { &pre } else { &features };
                let p = sigmoid(dot(&resolved.weights[l], coords) + resolved.biases[l]);
                if rng.gen_bool(p) {
                    labels[l] = 1.0;
                }
            }
            samples.push(Sample {
                id: next_id,
                group_id: group_base + g as u32,
                domain,
                features,
                labels,
                mask: mask.clone(),
            });
            next_id += 1;
        }
    }
    Dataset {
        feature_dim: d,
        seed: cfg.seed,
        spec_hash: spec_hash.to_string(),
        samples,
    }
}

/// Group-level split fractions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Fraction of groups held out as the fixed test split.
    pub test_fraction: f64,
    /// Fraction of the remaining training groups used for validation,
    /// resampled per repetition.
    pub val_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.2,
            val_fraction: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.test_fraction && self.test_fraction < 1.0)
            || !(0.0 < self.val_fraction && self.val_fraction < 1.0)
        {
            return Err(Error::config("split fractions must lie strictly in (0, 1)"));
        }
        Ok(())
    }
}

/// Splits by group. The test set depends only on the dataset's own seed, so
/// it is identical across repetitions; validation groups are resampled from
/// the training pool with `repetition_seed`.
pub fn split(
    dataset: &Dataset,
    spec: &SplitSpec,
    repetition_seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let groups = dataset.group_ids();
    if groups.len() < 10 {
        return Err(Error::config(format!(
            "need at least 10 groups to split, got {}",
            groups.len()
        )));
    }

    let mut order = groups.clone();
    order.shuffle(&mut sub_rng(dataset.seed, "test-split"));
    let num_test = ((groups.len() as f64) * spec.test_fraction).round() as usize;
    let test_groups: BTreeSet<u32> = order[..num_test].iter().copied().collect();
    let mut pool: Vec<u32> = order[num_test..].to_vec();
    pool.sort_unstable();

    pool.shuffle(&mut sub_rng(repetition_seed, "val-split"));
    let num_val = ((pool.len() as f64) * spec.val_fraction).round() as usize;
    let val_groups: BTreeSet<u32> = pool[..num_val].iter().copied().collect();
    let train_groups: BTreeSet<u32> = pool[num_val..].iter().copied().collect();

    if train_groups.is_empty() || val_groups.is_empty() || test_groups.is_empty() {
        return Err(Error::config("split fractions leave an empty part"));
    }

    Ok((
        dataset.subset_by_groups(&train_groups),
        dataset.subset_by_groups(&val_groups),
        dataset.subset_by_groups(&test_groups),
    ))
}

const DATASET_MAGIC: &str = "# clbench-dataset v1";

/// Writes the dataset as CSV. The first line records seed, spec hash and a
/// checksum of the payload; any edit or truncation fails the load.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut body = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        let mut header: Vec<String> = vec!["sample_id".into(), "group_id".into(), "domain".into()];
        for i in 0..dataset.feature_dim {
            header.push(format!("f_{i}"));
        }
        for i in 0..NUM_LABELS {
            header.push(format!("y_{i}"));
        }
        for i in 0..NUM_LABELS {
            header.push(format!("m_{i}"));
        }
        w.write_record(&header)?;
        for s in &dataset.samples {
            let mut record: Vec<String> =
                vec![s.id.to_string(), s.group_id.to_string(), s.domain.to_string()];
            for f in &s.features {
                record.push(f.to_string());
            }
            for y in &s.labels {
                record.push(((*y > 0.5) as u8).to_string());
            }
            for &m in s.mask.active() {
                record.push((m as u8).to_string());
            }
            w.write_record(&record)?;
        }
        w.flush()?;
    }
    let checksum = hex_string(&Sha256::digest(&body));
    let mut out = format!(
        "{DATASET_MAGIC} seed={} spec={} checksum={checksum}\n",
        dataset.seed, dataset.spec_hash
    )
    .into_bytes();
    out.extend_from_slice(&body);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let raw = std::fs::read_to_string(path)?;
    let (meta, body) = raw
        .split_once('\n')
        .ok_or_else(|| Error::integrity("dataset file has no header line"))?;
    if !meta.starts_with(DATASET_MAGIC) {
        return Err(Error::integrity("not a clbench dataset file"));
    }
    let mut seed = None;
    let mut spec_hash = None;
    let mut checksum = None;
    for field in meta.trim_start_matches(DATASET_MAGIC).split_whitespace() {
        match field.split_once('=') {
            Some(("seed", v)) => seed = v.parse::<u64>().ok(),
            Some(("spec", v)) => spec_hash = Some(v.to_string()),
            Some(("checksum", v)) => checksum = Some(v.to_string()),
            _ => {}
        }
    }
    let seed = seed.ok_or_else(|| Error::integrity("dataset header lacks a seed"))?;
    let spec_hash = spec_hash.ok_or_else(|| Error::integrity("dataset header lacks a spec hash"))?;
    let checksum = checksum.ok_or_else(|| Error::integrity("dataset header lacks a checksum"))?;
    if hex_string(&Sha256::digest(body.as_bytes())) != checksum {
        return Err(Error::integrity("dataset payload fails its checksum"));
    }

    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let headers = reader.headers()?.clone();
    let feature_dim = headers.iter().filter(|h| h.starts_with("f_")).count();
    let expected_cols = 3 + feature_dim + 2 * NUM_LABELS;
    if headers.len() != expected_cols {
        return Err(Error::integrity(format!(
            "dataset header has {} columns, expected {expected_cols}",
            headers.len()
        )));
    }

    let parse_err = |what: &str| Error::integrity(format!("unparsable {what} field"));
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record?;
        let id: usize = record[0].parse().map_err(|_| parse_err("sample_id"))?;
        let group_id: u32 = record[1].parse().map_err(|_| parse_err("group_id"))?;
        let domain: Domain = record[2].parse()?;
        let mut features = Vec::with_capacity(feature_dim);
        for i in 0..feature_dim {
            features.push(record[3 + i].parse::<f64>().map_err(|_| parse_err("feature"))?);
        }
        let mut labels = Vec::with_capacity(NUM_LABELS);
        for i in 0..NUM_LABELS {
            let v: u8 = record[3 + feature_dim + i].parse().map_err(|_| parse_err("label"))?;
            labels.push(v as f64);
        }
        let mut active = Vec::with_capacity(NUM_LABELS);
        for i in 0..NUM_LABELS {
            let v: u8 = record[3 + feature_dim + NUM_LABELS + i]
                .parse()
                .map_err(|_| parse_err("mask"))?;
            active.push(v != 0);
        }
        samples.push(Sample {
            id,
            group_id,
            domain,
            features,
            labels,
            mask: LabelMask::new(active),
        });
    }
    Ok(Dataset {
        feature_dim,
        seed,
        spec_hash,
        samples,
    })
}
