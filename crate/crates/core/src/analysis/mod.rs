//! Layer-wise sensitivity: quantize one layer at a time and measure how far
//! the network output moves and how much the task score drops.

mod additivity;
mod diagnose;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use additivity::{check_additivity, check_additivity_with, pearson, AdditivityResult, AdditivitySummary, TrialRecord};
pub use diagnose::{compare_fixes, compare_fixes_with, diagnose_outliers, HISTOGRAM_BINS, FixReport, HistogramBin, OutlierSummary};
pub use report::{heatmap_csv, histogram_csv, scatter_csv};

use crate::data::{Dataset, Metric};
use crate::error::{Error, Result};
use crate::graph::{Interceptor, NetworkGraph, NoTap};
use crate::quant::{make_layer_quantizer, quantize_network, CalibrationRecord, Granularity, LayerQuantConfig, WeightClip};
use crate::tensor::Tensor;

/// Effect of quantizing one layer at one weight bit-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer_id: String,
    pub weight_bits: u32,
    /// Mean over samples of `||y - y_hat||^2`.
    pub noise: f64,
    /// `noise` divided by the number of output elements.
    pub noise_per_element: f64,
    /// `H(y) - H(y_hat)`; negative when quantization happens to help.
    pub degradation: f64,
    /// Mean over samples of the mean of `y - y_hat`.
    pub mean_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedLayer {
    pub layer_id: String,
    pub degradation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankGroup {
    pub weight_bits: u32,
    pub layers: Vec<RankedLayer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub network: String,
    pub dataset: String,
    pub samples: usize,
    pub act_bits: u32,
    pub weight_clip: WeightClip,
    pub granularity: Granularity,
    pub fp_score: f64,
    /// Grouped by weight bit-width, layers in topological order.
    pub entries: Vec<LayerSensitivity>,
    #[serde(default)]
    pub rank: Vec<RankGroup>,
}

impl SensitivityReport {
    pub fn entry(&self, layer_id: &str, weight_bits: u32) -> Option<&LayerSensitivity> {
        self.entries.iter().find(|e| e.layer_id == layer_id && e.weight_bits == weight_bits)
    }

    /// Bit-widths in the order they were swept.
    pub fn weight_bits(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.weight_bits) {
                out.push(e.weight_bits);
            }
        }
        out
    }

    /// Layer ids in topological order.
    pub fn layer_ids(&self) -> Vec<String> {
        let first = self.entries.first().map(|e| e.weight_bits);
        self.entries.iter().filter(|e| Some(e.weight_bits) == first).map(|e| e.layer_id.clone()).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))
    }
}

/// Result of one quantized pass over the evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub noise: f64,
    pub noise_per_element: f64,
    pub score: f64,
    pub degradation: f64,
    pub mean_shift: f64,
}

/// Full-precision activations of every layer for every evaluation sample,
/// computed once and shared by all measurements.
pub struct FpReference<'a> {
    graph: &'a NetworkGraph,
    data: &'a Dataset,
    metric: Metric,
    activations: Vec<Vec<Tensor>>,
    output_pos: usize,
    fp_score: f64,
}

impl<'a> FpReference<'a> {
    pub fn new(graph: &'a NetworkGraph, data: &'a Dataset, metric: Metric) -> Result<Self> {
        let activations = data
            .samples()
            .par_iter()
            .map(|x| graph.forward_all(x, &NoTap))
            .collect::<Result<Vec<_>>>()?;
        let output_pos = graph.position(&graph.output_node().id).expect("validated");
        let mut total = 0.0;
        for (i, acts) in activations.iter().enumerate() {
            total += metric.sample_score(&acts[output_pos], data.labels(), i)?;
        }
        let fp_score = total / data.len() as f64;
        Ok(FpReference { graph, data, metric, activations, output_pos, fp_score })
    }

    pub fn graph(&self) -> &NetworkGraph {
        self.graph
    }

    pub fn dataset(&self) -> &Dataset {
        self.data
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn fp_score(&self) -> f64 {
        self.fp_score
    }

    pub fn output(&self, sample: usize) -> &Tensor {
        &self.activations[sample][self.output_pos]
    }

    /// Runs every sample with `tap`, reusing the cached activations of all
    /// layers before position `from`.
    pub fn measure(&self, tap: &dyn Interceptor, from: usize) -> Result<Measurement> {
        let per_sample = (0..self.data.len())
            .into_par_iter()
            .map(|i| {
                let y_hat = self.graph.forward_resume(&self.activations[i], from, tap)?;
                let y = self.output(i);
                let mut sq = 0.0f64;
                let mut diff = 0.0f64;
                for (&a, &b) in y.data().iter().zip(y_hat.data()) {
                    let d = f64::from(a) - f64::from(b);
                    sq += d * d;
                    diff += d;
                }
                let score = self.metric.sample_score(&y_hat, self.data.labels(), i)?;
                Ok((sq, diff / y.len() as f64, score))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_sample.len() as f64;
        let (mut noise, mut shift, mut score) = (0.0, 0.0, 0.0);
        for (sq, d, s) in per_sample {
            noise += sq;
            shift += d;
            score += s;
        }
        let noise = noise / n;
        let score = score / n;
        let out_len = self.output(0).len() as f64;
        Ok(Measurement {
            noise,
            noise_per_element: noise / out_len,
            score,
            degradation: self.fp_score - score,
            mean_shift: shift / n,
        })
    }

    /// Quantizes only `config.layer_id`.
    pub fn measure_layer(&self, config: &LayerQuantConfig, calib: &CalibrationRecord) -> Result<Measurement> {
        let q = make_layer_quantizer(self.graph, &config.layer_id, config, calib)?;
        let from = self.graph.position(&config.layer_id).ok_or_else(|| Error::UnknownLayer(config.layer_id.clone()))?;
        self.measure(&q, from)
    }

    /// Quantizes every compute layer at once.
    pub fn measure_network(&self, configs: &[LayerQuantConfig], calib: &CalibrationRecord) -> Result<Measurement> {
        let q = quantize_network(self.graph, configs, calib)?;
        let from = self
            .graph
            .layers()
            .iter()
            .position(|l| l.kind.is_compute())
            .expect("graph has compute layers");
        self.measure(&q, from)
    }

    pub fn analyze_layer(&self, config: &LayerQuantConfig, calib: &CalibrationRecord) -> Result<LayerSensitivity> {
        let m = self.measure_layer(config, calib)?;
        Ok(LayerSensitivity {
            layer_id: config.layer_id.clone(),
            weight_bits: config.weight_bits.unwrap_or(0),
            noise: m.noise,
            noise_per_element: m.noise_per_element,
            degradation: m.degradation,
            mean_shift: m.mean_shift,
        })
    }
}

fn check_analyzable(graph: &NetworkGraph) -> Result<()> {
    if graph.has_batch_norm() {
        return Err(Error::Config("graph has unfolded batch norm; fold it before analysis".into()));
    }
    Ok(())
}

/// Single-layer sensitivity of `layer_id` over `eval_set`.
pub fn analyze_layer(
    graph: &NetworkGraph,
    layer_id: &str,
    config: &LayerQuantConfig,
    calib: &CalibrationRecord,
    eval_set: &Dataset,
    metric: Metric,
) -> Result<LayerSensitivity> {
    check_analyzable(graph)?;
    if config.layer_id != layer_id {
        return Err(Error::Config(format!("config for `{}` used for `{layer_id}`", config.layer_id)));
    }
    FpReference::new(graph, eval_set, metric)?.analyze_layer(config, calib)
}

/// Settings shared by every layer in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepOptions {
    pub act_bits: u32,
    pub weight_clip: WeightClip,
    pub granularity: Granularity,
    /// Accept graphs that still carry batch norm.
    pub allow_unfolded: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { act_bits: 8, weight_clip: WeightClip::Minmax, granularity: Granularity::PerTensor, allow_unfolded: false }
    }
}

impl SweepOptions {
    pub fn config(&self, layer_id: &str, weight_bits: u32) -> LayerQuantConfig {
        LayerQuantConfig::new(layer_id, Some(weight_bits), Some(self.act_bits))
            .with_clip(self.weight_clip)
            .with_granularity(self.granularity)
    }
}

/// Every compute layer at every bit-width in `weight_bits`.
pub fn sweep(
    graph: &NetworkGraph,
    weight_bits: &[u32],
    calib: &CalibrationRecord,
    eval_set: &Dataset,
    metric: Metric,
    opts: SweepOptions,
) -> Result<SensitivityReport> {
    if !opts.allow_unfolded {
        check_analyzable(graph)?;
    }
    let fp = FpReference::new(graph, eval_set, metric)?;
    sweep_with(&fp, weight_bits, calib, opts)
}

/// [`sweep`] against an existing full-precision reference.
pub fn sweep_with(
    fp: &FpReference<'_>,
    weight_bits: &[u32],
    calib: &CalibrationRecord,
    opts: SweepOptions,
) -> Result<SensitivityReport> {
    if weight_bits.is_empty() {
        return Err(Error::Config("no weight bit-widths requested".into()));
    }
    crate::quant::check_bits(opts.act_bits)?;
    let layers = fp.graph().compute_layers();
    let mut entries = Vec::with_capacity(weight_bits.len() * layers.len());
    for &bits in weight_bits {
        crate::quant::check_bits(bits)?;
        for id in &layers {
            entries.push(fp.analyze_layer(&opts.config(id, bits), calib)?);
        }
    }
    let mut report = SensitivityReport {
        network: fp.graph().fingerprint(),
        dataset: fp.dataset().id().to_string(),
        samples: fp.dataset().len(),
        act_bits: opts.act_bits,
        weight_clip: opts.weight_clip,
        granularity: opts.granularity,
        fp_score: fp.fp_score(),
        entries,
        rank: Vec::new(),
    };
    report.rank = report
        .weight_bits()
        .into_iter()
        .map(|b| {
            let layers = rank_layers(&report, b)?
                .into_iter()
                .map(|(layer_id, degradation)| RankedLayer { layer_id, degradation })
                .collect();
            Ok(RankGroup { weight_bits: b, layers })
        })
        .collect::<Result<_>>()?;
    Ok(report)
}

/// Layers at `weight_bits`, by descending degradation, then descending
/// noise, then topological order.
pub fn rank_layers(report: &SensitivityReport, weight_bits: u32) -> Result<Vec<(String, f64)>> {
    let mut rows: Vec<(usize, &LayerSensitivity)> =
        report.entries.iter().filter(|e| e.weight_bits == weight_bits).enumerate().collect();
    if rows.is_empty() {
        return Err(Error::Report(format!("no entries at {weight_bits} weight bits")));
    }
    rows.sort_by(|(ia, a), (ib, b)| {
        b.degradation.total_cmp(&a.degradation).then(b.noise.total_cmp(&a.noise)).then(ia.cmp(ib))
    });
    Ok(rows.into_iter().map(|(_, e)| (e.layer_id.clone(), e.degradation)).collect())
}
