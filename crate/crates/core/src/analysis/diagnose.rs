use serde::{Deserialize, Serialize};

use super::FpReference;
use crate::data::{Dataset, Metric};
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::quant::{CalibrationRecord, LayerQuantConfig, WeightClip};

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSummary {
    pub layer_id: String,
    pub weight_count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub k_sigma: f64,
    /// Weights outside `mean +- k_sigma * std`.
    pub outlier_count: usize,
    pub max_abs: f64,
    /// `max_abs / (k_sigma * std)`; infinite when `std` is zero.
    #[serde(with = "inf_as_string")]
    pub ratio: f64,
    #[serde(skip)]
    pub histogram: Vec<HistogramBin>,
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("unexpected ratio `{s}`"))),
        }
    }
}

/// Weight statistics of a conv/dense layer, with a 64-bin histogram whose
/// edges span exactly `[min, max]`.
pub fn diagnose_outliers(graph: &NetworkGraph, layer_id: &str, k_sigma: f64) -> Result<OutlierSummary> {
    if !(k_sigma > 0.0 && k_sigma.is_finite()) {
        return Err(Error::Config(format!("k_sigma must be positive, got {k_sigma}")));
    }
    if !graph.node(layer_id)?.kind.has_weights() {
        return Err(Error::Weightless(layer_id.to_string()));
    }
    let (w, _) = graph.layer_params(layer_id)?;
    let values: Vec<f64> = w.data().iter().map(|&v| f64::from(v)).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let band = k_sigma * std;
    let outlier_count = values.iter().filter(|v| (*v - mean).abs() > band).count();
    let ratio = if band > 0.0 { max_abs / band } else { f64::INFINITY };

    let width = (max - min) / HISTOGRAM_BINS as f64;
    let mut counts = [0usize; HISTOGRAM_BINS];
    for v in &values {
        let idx = if width > 0.0 { (((v - min) / width) as usize).min(HISTOGRAM_BINS - 1) } else { 0 };
        counts[idx] += 1;
    }
    let histogram = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramBin {
            bin_lo: min + width * i as f64,
            bin_hi: if i + 1 == HISTOGRAM_BINS { max } else { min + width * (i + 1) as f64 },
            count,
        })
        .collect();
    Ok(OutlierSummary {
        layer_id: layer_id.to_string(),
        weight_count: values.len(),
        mean,
        std,
        min,
        max,
        k_sigma,
        outlier_count,
        max_abs,
        ratio,
        histogram,
    })
}

/// Full-network accuracy under naive, global and local clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixReport {
    pub target: String,
    pub method: WeightClip,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub fp: f64,
    /// Every layer min/max.
    pub naive: f64,
    /// Every layer clipped with `method`.
    pub global_clip: f64,
    /// Only `target` clipped with `method`.
    pub local_clip: f64,
    /// `(local_clip - naive) / (fp - naive)`, when naive loses anything.
    pub recovered_fraction: Option<f64>,
}

impl FixReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[allow(clippy::too_many_arguments)]
pub fn compare_fixes(
    graph: &NetworkGraph,
    target_layer: &str,
    calib: &CalibrationRecord,
    eval_set: &Dataset,
    metric: Metric,
    weight_bits: u32,
    act_bits: u32,
    method: WeightClip,
) -> Result<FixReport> {
    let fp = FpReference::new(graph, eval_set, metric)?;
    compare_fixes_with(&fp, target_layer, calib, weight_bits, act_bits, method)
}

/// [`compare_fixes`] against an existing full-precision reference.
pub fn compare_fixes_with(
    fp: &FpReference<'_>,
    target_layer: &str,
    calib: &CalibrationRecord,
    weight_bits: u32,
    act_bits: u32,
    method: WeightClip,
) -> Result<FixReport> {
    let layers = fp.graph().compute_layers();
    if !layers.iter().any(|l| l == target_layer) {
        return Err(Error::UnknownLayer(target_layer.to_string()));
    }
    let score = |clip: &dyn Fn(&str) -> WeightClip| -> Result<f64> {
        let configs: Vec<LayerQuantConfig> = layers
            .iter()
            .map(|id| LayerQuantConfig::new(id, Some(weight_bits), Some(act_bits)).with_clip(clip(id)))
            .collect();
        Ok(fp.measure_network(&configs, calib)?.score)
    };
    let naive = score(&|_| WeightClip::Minmax)?;
    let global_clip = score(&|_| method)?;
    let local_clip = score(&|id| if id == target_layer { method } else { WeightClip::Minmax })?;
    let fp_score = fp.fp_score();
    let lost = fp_score - naive;
    Ok(FixReport {
        target: target_layer.to_string(),
        method,
        weight_bits,
        act_bits,
        fp: fp_score,
        naive,
        global_clip,
        local_clip,
        recovered_fraction: (lost > 0.0).then(|| (local_clip - naive) / lost),
    })
}
