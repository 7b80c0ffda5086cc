use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{FpReference, SensitivityReport, SweepOptions};
use crate::data::{Dataset, Metric};
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::quant::{CalibrationRecord, LayerQuantConfig};
use crate::rng::Rng;

/// Mean-shift heuristic: a trial is suspect when the squared sum of the
/// single-layer mean shifts exceeds this fraction of the summed
/// per-element noise.
const SHIFT_SUSPECT_RATIO: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// Layers quantized at the low bit-width, in topological order.
    pub low_layers: Vec<String>,
    pub expected_degradation: f64,
    pub measured_degradation: f64,
    pub expected_noise: f64,
    pub measured_noise: f64,
    pub bias_shift_suspect: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditivitySummary {
    pub trials: usize,
    /// `None` when either side has zero variance.
    pub pearson_degradation: Option<f64>,
    pub pearson_noise: Option<f64>,
    /// Largest `|expected_noise - measured_noise| / measured_noise` over the
    /// trials.
    pub max_relative_noise_error: Option<f64>,
    /// `|expected - measured| / measured` noise with every layer at the
    /// high bit-width.
    pub high_bits_noise_relative_error: Option<f64>,
    pub bias_shift_suspects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditivityResult {
    pub network: String,
    pub dataset: String,
    pub seed: u64,
    pub low_bits: u32,
    pub high_bits: u32,
    pub act_bits: u32,
    /// Every layer at `high_bits`.
    pub baseline: TrialRecord,
    pub trial_records: Vec<TrialRecord>,
    pub summary: AdditivitySummary,
}

impl AdditivityResult {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serializes");
        s.push('\n');
        s
    }
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

fn relative_error(expected: f64, measured: f64) -> Option<f64> {
    (measured > 0.0).then(|| (expected - measured).abs() / measured)
}

struct Expectation {
    degradation: f64,
    noise: f64,
    suspect: bool,
}

fn expected(report: &SensitivityReport, layers: &[String], low: &BTreeSet<&str>, low_bits: u32, high_bits: u32) -> Result<Expectation> {
    let (mut degradation, mut noise, mut shift, mut npe) = (0.0, 0.0, 0.0, 0.0);
    for id in layers {
        let bits = if low.contains(id.as_str()) { low_bits } else { high_bits };
        let e = report
            .entry(id, bits)
            .ok_or_else(|| Error::Report(format!("report has no entry for `{id}` at {bits} bits")))?;
        degradation += e.degradation;
        noise += e.noise;
        shift += e.mean_shift;
        npe += e.noise_per_element;
    }
    Ok(Expectation { degradation, noise, suspect: shift * shift > SHIFT_SUSPECT_RATIO * npe })
}

/// Random low/high bit assignments: the expected values are sums of the
/// report's single-layer entries, the measured ones come from quantizing the
/// whole network at once.
#[allow(clippy::too_many_arguments)]
pub fn check_additivity(
    graph: &NetworkGraph,
    report: &SensitivityReport,
    trials: usize,
    seed: u64,
    low_bits: u32,
    high_bits: u32,
    calib: &CalibrationRecord,
    eval_set: &Dataset,
    metric: Metric,
) -> Result<AdditivityResult> {
    let fp = FpReference::new(graph, eval_set, metric)?;
    check_additivity_with(&fp, report, trials, seed, low_bits, high_bits, calib)
}

/// [`check_additivity`] against an existing full-precision reference.
pub fn check_additivity_with(
    fp: &FpReference<'_>,
    report: &SensitivityReport,
    trials: usize,
    seed: u64,
    low_bits: u32,
    high_bits: u32,
    calib: &CalibrationRecord,
) -> Result<AdditivityResult> {
    let graph = fp.graph();
    let layers = graph.compute_layers();
    let opts = SweepOptions {
        act_bits: report.act_bits,
        weight_clip: report.weight_clip,
        granularity: report.granularity,
        allow_unfolded: true,
    };
    // fail before any measurement if the report cannot cover a trial
    for id in &layers {
        for bits in [low_bits, high_bits] {
            if report.entry(id, bits).is_none() {
                return Err(Error::Report(format!("report has no entry for `{id}` at {bits} bits")));
            }
        }
    }

    let run = |low: &BTreeSet<&str>| -> Result<TrialRecord> {
        let exp = expected(report, &layers, low, low_bits, high_bits)?;
        let configs: Vec<LayerQuantConfig> = layers
            .iter()
            .map(|id| opts.config(id, if low.contains(id.as_str()) { low_bits } else { high_bits }))
            .collect();
        let m = fp.measure_network(&configs, calib)?;
        Ok(TrialRecord {
            low_layers: layers.iter().filter(|id| low.contains(id.as_str())).cloned().collect(),
            expected_degradation: exp.degradation,
            measured_degradation: m.degradation,
            expected_noise: exp.noise,
            measured_noise: m.noise,
            bias_shift_suspect: exp.suspect,
        })
    };

    let baseline = run(&BTreeSet::new())?;
    let mut rng = Rng::derive(seed, "additivity");
    let mut records = Vec::with_capacity(trials);
    for _ in 0..trials {
        let k = rng.below(layers.len() + 1);
        let mut order: Vec<&str> = layers.iter().map(String::as_str).collect();
        rng.shuffle(&mut order);
        let low: BTreeSet<&str> = order[..k].iter().copied().collect();
        records.push(run(&low)?);
    }

    let col = |f: fn(&TrialRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let summary = AdditivitySummary {
        trials,
        pearson_degradation: pearson(&col(|r| r.expected_degradation), &col(|r| r.measured_degradation)),
        pearson_noise: pearson(&col(|r| r.expected_noise), &col(|r| r.measured_noise)),
        max_relative_noise_error: records
            .iter()
            .filter_map(|r| relative_error(r.expected_noise, r.measured_noise))
            .reduce(f64::max),
        high_bits_noise_relative_error: relative_error(baseline.expected_noise, baseline.measured_noise),
        bias_shift_suspects: records.iter().filter(|r| r.bias_shift_suspect).count(),
    };
    Ok(AdditivityResult {
        network: report.network.clone(),
        dataset: report.dataset.clone(),
        seed,
        low_bits,
        high_bits,
        act_bits: report.act_bits,
        baseline,
        trial_records: records,
        summary,
    })
}
