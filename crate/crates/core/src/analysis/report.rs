//! Plot-ready CSV emitters.

use super::{AdditivityResult, HistogramBin, SensitivityReport};
use crate::error::{Error, Result};

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(e.to_string())
}

/// Rows are weight bit-widths, columns layer ids in topological order,
/// cells the degradation.
pub fn heatmap_csv(report: &SensitivityReport) -> Result<String> {
    let layers = report.layer_ids();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["weight_bits".to_string()];
    header.extend(layers.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for bits in report.weight_bits() {
        let mut row = vec![bits.to_string()];
        for id in &layers {
            let e = report
                .entry(id, bits)
                .ok_or_else(|| Error::Report(format!("no entry for `{id}` at {bits} bits")))?;
            row.push(e.degradation.to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}

/// One row per trial: expected versus measured degradation and noise.
pub fn scatter_csv(result: &AdditivityResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "trial",
        "low_layers",
        "expected_degradation",
        "measured_degradation",
        "expected_noise",
        "measured_noise",
        "bias_shift_suspect",
    ])
    .map_err(csv_err)?;
    for (i, r) in result.trial_records.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.low_layers.join(";"),
            r.expected_degradation.to_string(),
            r.measured_degradation.to_string(),
            r.expected_noise.to_string(),
            r.measured_noise.to_string(),
            r.bias_shift_suspect.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn histogram_csv(bins: &[HistogramBin]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_lo", "bin_hi", "count"]).map_err(csv_err)?;
    for b in bins {
        w.write_record([b.bin_lo.to_string(), b.bin_hi.to_string(), b.count.to_string()]).map_err(csv_err)?;
    }
    finish(w)
}
