use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::graph::{NetworkGraph, NoTap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActRange {
    pub min: f32,
    pub max: f32,
    pub samples: usize,
}

/// Observed output range of every layer (including the network input).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub samples: usize,
    pub layers: BTreeMap<String, ActRange>,
}

impl CalibrationRecord {
    pub fn range(&self, id: &str) -> Result<ActRange> {
        self.layers.get(id).copied().ok_or_else(|| Error::MissingCalibration(id.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self).expect("record serializes");
        json.push(b'\n');
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }
}

/// Exact min/max of every layer output over the first `n_samples` samples.
pub fn calibrate(graph: &NetworkGraph, calib_set: &Dataset, n_samples: usize) -> Result<CalibrationRecord> {
    if n_samples == 0 || n_samples > calib_set.len() {
        return Err(Error::Dataset(format!(
            "calibration needs 1..={} samples, got {n_samples}",
            calib_set.len()
        )));
    }
    let mut lo = vec![f32::INFINITY; graph.layers().len()];
    let mut hi = vec![f32::NEG_INFINITY; graph.layers().len()];
    for sample in &calib_set.samples()[..n_samples] {
        for (i, out) in graph.forward_all(sample, &NoTap)?.iter().enumerate() {
            let (a, b) = out.min_max();
            lo[i] = lo[i].min(a);
            hi[i] = hi[i].max(b);
        }
    }
    let layers = graph
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.id.clone(), ActRange { min: lo[i], max: hi[i], samples: n_samples }))
        .collect();
    Ok(CalibrationRecord { samples: n_samples, layers })
}
