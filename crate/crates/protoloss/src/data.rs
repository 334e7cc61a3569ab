//! Dataset generation, CSV ingestion, and mini-batch assembly.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled feature matrix. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("dataset must hold at least one sample".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|y| **y >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Contract("non-finite feature value".into()));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Synthetic benchmark: class centers drawn uniformly on the
/// radius-`center_scale` sphere in the input space, samples scattered
/// around them with isotropic Gaussian noise, split 80/20 per class.
pub fn gaussian_blobs(
    num_classes: usize,
    input_dim: usize,
    n_per_class: usize,
    center_scale: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if num_classes == 0 || input_dim == 0 || n_per_class == 0 {
        return Err(Error::Config(
            "blob generator sizes must be positive".into(),
        ));
    }
    if !(center_scale > 0.0) || noise_sigma < 0.0 {
        return Err(Error::Config(
            "center_scale must be positive and noise_sigma non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-30);
        for x in &mut v {
            *x *= center_scale / norm;
        }
        centers.push(v);
    }

    let n_train = (n_per_class * 4) / 5;
    let mut train_feats = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_feats = Vec::new();
    let mut test_labels = Vec::new();
    for (class, center) in centers.iter().enumerate() {
        for i in 0..n_per_class {
            let sample: Vec<f64> = center
                .iter()
                .map(|c| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    c + noise_sigma * noise
                })
                .collect();
            if i < n_train {
                train_feats.extend(sample);
                train_labels.push(class);
            } else {
                test_feats.extend(sample);
                test_labels.push(class);
            }
        }
    }
    let train = Dataset::new(
        Tensor::from_vec(vec![train_labels.len(), input_dim], train_feats),
        train_labels,
        num_classes,
        Split::Train,
    )?;
    let test = Dataset::new(
        Tensor::from_vec(vec![test_labels.len(), input_dim], test_feats),
        test_labels,
        num_classes,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Loads `label,feat0,...,feat{D-1}` rows. Lines are 1-indexed in errors;
/// a leading `label,...` header row is accepted and skipped.
pub fn load_csv(path: &Path, num_classes: usize, rescale: bool, split: Split) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut features: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 && trimmed.starts_with("label") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: lineno,
                message: "expected label,feat0,... row".into(),
            });
        }
        let label: usize = fields[0].trim().parse().map_err(|e| Error::Parse {
            line: lineno,
            message: format!("bad label: {e}"),
        })?;
        if label >= num_classes {
            return Err(Error::Parse {
                line: lineno,
                message: format!("label {label} out of range for {num_classes} classes"),
            });
        }
        let row: std::result::Result<Vec<f64>, _> =
            fields[1..].iter().map(|f| f.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::Parse {
            line: lineno,
            message: format!("bad feature: {e}"),
        })?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("row holds {} features, expected {w}", row.len()),
                })
            }
            _ => {}
        }
        labels.push(label);
        features.extend(row);
    }
    let width = width.ok_or(Error::Contract("CSV holds no data rows".into()))?;
    let mut features = Tensor::from_vec(vec![labels.len(), width], features);
    if rescale {
        rescale_unit(&mut features);
    }
    Dataset::new(features, labels, num_classes, split)
}

/// Per-column min-max rescale to [0, 1]; constant columns map to 0.
fn rescale_unit(features: &mut Tensor) {
    let (n, d) = (features.rows(), features.cols());
    for j in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            lo = lo.min(features.row(i)[j]);
            hi = hi.max(features.row(i)[j]);
        }
        let span = hi - lo;
        for i in 0..n {
            let v = &mut features.row_mut(i)[j];
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
}

/// Writes the CSV format [`load_csv`] reads, with a header row.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for j in 0..data.input_dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..data.len() {
        out.push_str(&data.labels[i].to_string());
        for v in data.features.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Sidecar metadata written next to generated train/test CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// One shuffled pass over the dataset. The final partial batch is kept.
pub fn batches(data: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut feats = Vec::with_capacity(chunk.len() * data.input_dim());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                feats.extend_from_slice(data.features.row(i));
                labels.push(data.labels[i]);
            }
            Batch {
                features: Tensor::from_vec(vec![chunk.len(), data.input_dim()], feats),
                labels,
            }
        })
        .collect()
}
