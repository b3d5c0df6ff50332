use std::io::Read;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Matrix;

const STREAM_DATA: u64 = 30;
const STREAM_WEIGHTS: u64 = 31;

/// Labelled classification set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Input(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        features.ensure_finite("dataset features")?;
        Ok(Self { features, labels })
    }

    /// One isotropic Gaussian cluster per class; sample `i` has label `i % classes`.
    pub fn gaussian_clusters(
        n_samples: usize,
        n_features: usize,
        classes: usize,
        spread: f64,
        seed: u64,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Parameter("need at least one class".into()));
        }
        let mut g = rng::stream(seed, STREAM_DATA, 0);
        let centers = rng::gaussian_matrix(&mut g, classes, n_features, 1.5)?;
        let labels: Vec<usize> = (0..n_samples).map(|i| i % classes).collect();
        let features = Matrix::from_fn(n_samples, n_features, |i, j| {
            let z: f64 = StandardNormal.sample(&mut g);
            centers[(labels[i], j)] + spread * z
        })?;
        Self::new(features, labels)
    }

    /// CSV with header `feature_0,...,feature_{d-1},label`.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
        let d = headers.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
            Error::Csv("header needs at least one feature column and a label".into())
        })?;
        for (j, h) in headers.iter().enumerate() {
            let expected = if j == d {
                "label".to_string()
            } else {
                format!("feature_{j}")
            };
            if h.trim() != expected {
                return Err(Error::Csv(format!("column {j} is `{h}`, expected `{expected}`")));
            }
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            if rec.len() != d + 1 {
                return Err(Error::Csv(format!("row {} has {} fields", line + 1, rec.len())));
            }
            for j in 0..d {
                let x: f64 = rec[j]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Csv(format!("row {}: bad float `{}`", line + 1, &rec[j])))?;
                data.push(x);
            }
            let label: usize = rec[d]
                .trim()
                .parse()
                .map_err(|_| Error::Csv(format!("row {}: bad label `{}`", line + 1, &rec[d])))?;
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(Error::Csv("no data rows".into()));
        }
        Self::new(Matrix::from_vec(labels.len(), d, data)?, labels)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Reorder samples by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let d = self.features.cols();
        let features = Matrix::from_fn(self.len(), d, |i, j| self.features[(perm[i], j)])?;
        Self::new(features, perm.iter().map(|&p| self.labels[p]).collect())
    }
}

/// Fully connected tanh network with a softmax cross-entropy head.
///
/// Layer `l` has weights of shape `layer_dims[l] × layer_dims[l+1]`;
/// there are no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpTask {
    layer_dims: Vec<usize>,
    dataset: Dataset,
    seed: u64,
}

impl MlpTask {
    pub fn new(layer_dims: Vec<usize>, dataset: Dataset, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Parameter("an MLP needs input and output dimensions".into()));
        }
        if let Some(pos) = layer_dims.iter().position(|&d| d == 0) {
            return Err(Error::Parameter(format!("layer {pos} has zero units")));
        }
        if dataset.features.cols() != layer_dims[0] {
            return Err(Error::Parameter(format!(
                "dataset has {} features, network expects {}",
                dataset.features.cols(),
                layer_dims[0]
            )));
        }
        let classes = *layer_dims.last().expect("len >= 2");
        if let Some(&bad) = dataset.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Parameter(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            layer_dims,
            dataset,
            seed,
        })
    }

    /// Gaussian-cluster task with `classes = layer_dims.last()`.
    pub fn synthetic(layer_dims: Vec<usize>, n_samples: usize, seed: u64) -> Result<Self> {
        let d = *layer_dims.first().ok_or_else(|| Error::Parameter("empty layer_dims".into()))?;
        let classes = *layer_dims.last().expect("non-empty");
        if d == 0 || classes == 0 {
            return Err(Error::Parameter("zero-width input or output layer".into()));
        }
        let data = Dataset::gaussian_clusters(n_samples, d, classes, 0.7, seed)?;
        Self::new(layer_dims, data, seed)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// Glorot-scaled Gaussian weights.
    pub fn init_weights(&self) -> Result<Vec<Matrix>> {
        let mut g = rng::stream(self.seed, STREAM_WEIGHTS, 0);
        self.layer_dims
            .windows(2)
            .map(|w| rng::gaussian_matrix(&mut g, w[0], w[1], (2.0 / (w[0] + w[1]) as f64).sqrt()))
            .collect()
    }

    fn check_weights(&self, weights: &[Matrix]) -> Result<()> {
        if weights.len() != self.layer_dims.len() - 1 {
            return Err(Error::Parameter(format!(
                "{} weight matrices for {} layers",
                weights.len(),
                self.layer_dims.len() - 1
            )));
        }
        for (w, dims) in weights.iter().zip(self.layer_dims.windows(2)) {
            if w.shape() != (dims[0], dims[1]) {
                return Err(Error::Parameter(format!(
                    "layer weight has shape {:?}, expected {:?}",
                    w.shape(),
                    (dims[0], dims[1])
                )));
            }
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds the logits.
    fn forward(&self, weights: &[Matrix]) -> Result<Vec<Matrix>> {
        let mut acts = vec![self.dataset.features.clone()];
        for (l, w) in weights.iter().enumerate() {
            let z = acts[l].matmul(w)?;
            let a = if l + 1 == weights.len() { z } else { z.map(f64::tanh) };
            acts.push(a);
        }
        Ok(acts)
    }

    pub fn logits(&self, weights: &[Matrix]) -> Result<Matrix> {
        self.check_weights(weights)?;
        Ok(self.forward(weights)?.pop().expect("at least one layer"))
    }

    pub fn loss(&self, weights: &[Matrix]) -> Result<f64> {
        self.check_weights(weights)?;
        let logits = self.forward(weights)?.pop().expect("non-empty");
        Ok(softmax_xent(&logits, &self.dataset.labels).0)
    }

    pub fn accuracy(&self, weights: &[Matrix]) -> Result<f64> {
        let logits = self.logits(weights)?;
        let correct = (0..logits.rows())
            .filter(|&i| {
                let row = logits.row(i);
                let best = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .expect("non-empty row");
                best == self.dataset.labels[i]
            })
            .count();
        Ok(correct as f64 / logits.rows() as f64)
    }
}

/// Mean cross-entropy and `∂loss/∂logits`.
fn softmax_xent(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let (n, c) = logits.shape();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[labels[i]];
        for j in 0..c {
            let p = (logits[(i, j)] - log_z).exp();
            grad[(i, j)] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Cross-entropy loss and per-layer gradients by backpropagation.
pub fn mlp_loss_grad(task: &MlpTask, weights: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
    task.check_weights(weights)?;
    let acts = task.forward(weights)?;
    let (loss, mut delta) = softmax_xent(acts.last().expect("non-empty"), &task.dataset.labels);
    let mut grads = vec![None; weights.len()];
    for l in (0..weights.len()).rev() {
        grads[l] = Some(acts[l].t_matmul(&delta)?);
        if l > 0 {
            let back = delta.matmul(&weights[l].transpose())?;
            // tanh' = 1 − a²
            delta = back.zip_map(&acts[l], |d, a| d * (1.0 - a * a))?;
        }
    }
    Ok((loss, grads.into_iter().map(|g| g.expect("filled")).collect()))
}
