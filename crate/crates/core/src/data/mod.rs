//! Datasets, the task metric, and deterministic fixture generation.

mod fixtures;
mod io;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use fixtures::{gen_fixture, small_kernel_fixture, Arch, DEAD_CHANNEL, OUTLIER_FACTOR, OUTLIER_LAYER};
pub use io::{load_dataset, save_dataset, DATASET_VERSION};

use crate::error::{Error, Result};
use crate::graph::{hex16, NetworkGraph};
use crate::rng::Rng;
use crate::tensor::{tensor_to_bytes, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// Reference outputs for regression-style scoring.
    Targets(Vec<Tensor>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Targets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn take(&self, n: usize) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(c[..n].to_vec()),
            Labels::Targets(t) => Labels::Targets(t[..n].to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Tensor>,
    labels: Labels,
    id: String,
}

impl Dataset {
    pub fn new(samples: Vec<Tensor>, labels: Labels) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if samples.len() != labels.len() {
            return Err(Error::Dataset(format!("{} samples but {} labels", samples.len(), labels.len())));
        }
        let shape = samples[0].shape();
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.shape() != shape) {
            return Err(Error::Dataset(format!("sample {i} has shape {:?}, expected {shape:?}", s.shape())));
        }
        let id = content_id(&samples, &labels);
        Ok(Dataset { samples, labels, id })
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    /// First 16 hex digits of a SHA-256 over samples and labels.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples[0].shape()
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::Dataset(format!("cannot take {n} of {} samples", self.len())));
        }
        Dataset::new(self.samples[..n].to_vec(), self.labels.take(n))
    }
}

fn content_id(samples: &[Tensor], labels: &Labels) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(tensor_to_bytes(s));
    }
    match labels {
        Labels::Classes(c) => {
            h.update(b"classes");
            for &l in c {
                h.update((l as u64).to_le_bytes());
            }
        }
        Labels::Targets(t) => {
            h.update(b"targets");
            for s in t {
                h.update(tensor_to_bytes(s));
            }
        }
    }
    hex16(&h.finalize())
}

/// Task metric. Higher is better for both kinds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Top1Accuracy,
    /// Negative mean squared L2 distance to the reference.
    NegL2,
}

impl Metric {
    /// Score of one output against label `index` of `labels`.
    pub fn sample_score(self, output: &Tensor, labels: &Labels, index: usize) -> Result<f64> {
        match (self, labels) {
            (Metric::Top1Accuracy, Labels::Classes(c)) => Ok(f64::from(u8::from(argmax(output.data()) == c[index]))),
            (Metric::Top1Accuracy, Labels::Targets(_)) => {
                Err(Error::Dataset("top1_accuracy needs class labels".into()))
            }
            (Metric::NegL2, Labels::Targets(t)) => {
                let target = &t[index];
                if target.len() != output.len() {
                    return Err(Error::Dataset(format!(
                        "target {index} has {} values, output has {}",
                        target.len(),
                        output.len()
                    )));
                }
                Ok(-sq_dist(output.data(), target.data()))
            }
            (Metric::NegL2, Labels::Classes(c)) => {
                let label = c[index];
                let d = output
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let e = f64::from(v) - f64::from(u8::from(i == label));
                        e * e
                    })
                    .sum::<f64>();
                Ok(-d)
            }
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Mean per-sample score of `outputs` against the dataset's labels.
pub fn evaluate(outputs: &[Tensor], dataset: &Dataset, metric: Metric) -> Result<f64> {
    if outputs.len() != dataset.len() {
        return Err(Error::Dataset(format!("{} outputs for {} samples", outputs.len(), dataset.len())));
    }
    let mut total = 0.0;
    for (i, out) in outputs.iter().enumerate() {
        total += metric.sample_score(out, dataset.labels(), i)?;
    }
    Ok(total / outputs.len() as f64)
}

/// `n` inputs uniform in `[0, 1)`, labelled with the argmax of `graph`'s
/// output.
pub fn gen_dataset(graph: &NetworkGraph, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Dataset("sample count must be at least 1".into()));
    }
    let shape = graph.input_shape().to_vec();
    let count: usize = shape.iter().product();
    let mut rng = Rng::derive(seed, "dataset");
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let data = (0..count).map(|_| rng.uniform_f32()).collect();
        samples.push(Tensor::new(shape.clone(), data)?);
    }
    let labels = samples.iter().map(|s| Ok(argmax(graph.forward(s)?.data()))).collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, Labels::Classes(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(labels: Vec<usize>) -> Dataset {
        let samples = labels.iter().map(|_| Tensor::zeros(&[1, 2]).unwrap()).collect();
        Dataset::new(samples, Labels::Classes(labels)).unwrap()
    }

    #[test]
    fn one_hot_outputs_score_one() {
        let d = ds(vec![0, 2, 1]);
        let outs: Vec<Tensor> = [0, 2, 1]
            .iter()
            .map(|&l| {
                let mut v = vec![0.0; 3];
                v[l] = 1.0;
                Tensor::new(vec![1, 3], v).unwrap()
            })
            .collect();
        assert_eq!(evaluate(&outs, &d, Metric::Top1Accuracy).unwrap(), 1.0);
        assert_eq!(evaluate(&outs, &d, Metric::NegL2).unwrap(), 0.0);
    }

    #[test]
    fn uniform_outputs_pick_class_zero() {
        let d = ds(vec![0, 1, 0, 2]);
        let outs = vec![Tensor::full(&[1, 3], 0.5).unwrap(); 4];
        assert_eq!(evaluate(&outs, &d, Metric::Top1Accuracy).unwrap(), 0.5);
    }

    #[test]
    fn neg_l2_of_identical_targets_is_zero() {
        let t = Tensor::new(vec![1, 2], vec![0.3, -7.0]).unwrap();
        let d = Dataset::new(vec![t.clone()], Labels::Targets(vec![t.clone()])).unwrap();
        assert_eq!(evaluate(std::slice::from_ref(&t), &d, Metric::NegL2).unwrap(), 0.0);
        let off = Tensor::new(vec![1, 2], vec![1.3, -7.0]).unwrap();
        assert!((evaluate(&[off], &d, Metric::NegL2).unwrap() + 1.0).abs() < 1e-6);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(evaluate(&[], &ds(vec![0]), Metric::Top1Accuracy).is_err());
    }

    #[test]
    fn take_and_validation() {
        let d = ds(vec![0, 1, 2]);
        let t = d.take(2).unwrap();
        assert_eq!(t.labels(), &Labels::Classes(vec![0, 1]));
        assert_ne!(t.id(), d.id());
        assert!(d.take(4).is_err());
        assert!(Dataset::new(vec![], Labels::Classes(vec![])).is_err());
        let mixed = vec![Tensor::zeros(&[1, 2]).unwrap(), Tensor::zeros(&[1, 3]).unwrap()];
        assert!(Dataset::new(mixed, Labels::Classes(vec![0, 0])).is_err());
    }
}
