//! Asymmetric affine fake quantization, range selection, and the per-layer
//! configuration it is driven by.

mod calib;
mod correct;
mod quantizer;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use calib::{calibrate, ActRange, CalibrationRecord};
pub use correct::{bias_correct, equalization_scales, equalize_pair, preact_mean_shift};
pub use quantizer::{make_layer_quantizer, quantize_network, LayerQuantizer, NetworkQuantizer};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::graph::NetworkGraph;
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;
pub const DEFAULT_GRID: usize = 128;

/// Affine quantization parameters. `range_lo = -zero_point * scale` and
/// `range_hi = (2^bits - 1 - zero_point) * scale`, so zero is always on the
/// grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub scale: f32,
    pub zero_point: u32,
    pub range_lo: f32,
    pub range_hi: f32,
}

pub fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]")))
    }
}

impl QuantParams {
    /// Parameters covering `[lo, hi]`, widened to contain zero and nudged so
    /// that the zero point is an integer.
    pub fn from_range(lo: f32, hi: f32, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::Config(format!("invalid range [{lo}, {hi}]")));
        }
        let qmax = (1u32 << bits) - 1;
        let lo = f64::from(lo.min(0.0));
        let hi = f64::from(hi.max(0.0));
        if hi - lo <= 0.0 {
            return Ok(QuantParams { bits, scale: 1.0, zero_point: 0, range_lo: 0.0, range_hi: qmax as f32 });
        }
        let scale = ((hi - lo) / f64::from(qmax)) as f32;
        if !scale.is_normal() {
            return Ok(QuantParams { bits, scale: 1.0, zero_point: 0, range_lo: 0.0, range_hi: qmax as f32 });
        }
        let s = f64::from(scale);
        let zero_point = (-lo / s).round().clamp(0.0, f64::from(qmax)) as u32;
        Ok(QuantParams {
            bits,
            scale,
            zero_point,
            range_lo: (-f64::from(zero_point) * s) as f32,
            range_hi: (f64::from(qmax - zero_point) * s) as f32,
        })
    }

    pub fn qmax(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Integer code of `x`: `clamp(round(x / scale + zero_point), 0, qmax)`,
    /// rounding half away from zero.
    pub fn code(&self, x: f32) -> u32 {
        let v = (f64::from(x) / f64::from(self.scale) + f64::from(self.zero_point)).round();
        v.clamp(0.0, f64::from(self.qmax())) as u32
    }

    pub fn dequantize(&self, code: u32) -> f32 {
        ((f64::from(code) - f64::from(self.zero_point)) * f64::from(self.scale)) as f32
    }

    pub fn apply(&self, x: f32) -> f32 {
        self.dequantize(self.code(x))
    }
}

/// Fake quantization: quantize then dequantize every element.
pub fn quantize_dequantize(x: &Tensor, qp: &QuantParams) -> Tensor {
    x.map(|v| qp.apply(v))
}

pub fn weight_range_minmax(w: &Tensor) -> (f32, f32) {
    w.min_max()
}

fn quant_sq_error(values: &[f32], qp: &QuantParams) -> f64 {
    values
        .iter()
        .map(|&v| {
            let d = f64::from(v) - f64::from(qp.apply(v));
            d * d
        })
        .sum()
}

/// Searches `t * (min, max)` for `t = k / grid_size`, `k = 1..=grid_size`,
/// and returns the pair with the smallest squared quantization error.
/// Ties keep the wider range, so a grid of one reproduces min/max.
pub fn weight_range_mse_grid(w: &Tensor, bits: u32, grid_size: usize) -> Result<(f32, f32)> {
    range_mse_grid(w.data(), bits, grid_size)
}

pub(crate) fn range_mse_grid(values: &[f32], bits: u32, grid_size: usize) -> Result<(f32, f32)> {
    check_bits(bits)?;
    if grid_size == 0 {
        return Err(Error::Config("grid size must be at least 1".into()));
    }
    let (mn, mx) = min_max(values);
    let mut best = (mn, mx);
    let mut best_err = f64::INFINITY;
    for k in (1..=grid_size).rev() {
        let t = k as f64 / grid_size as f64;
        let lo = (f64::from(mn) * t) as f32;
        let hi = (f64::from(mx) * t) as f32;
        let err = quant_sq_error(values, &QuantParams::from_range(lo, hi, bits)?);
        if err < best_err {
            best_err = err;
            best = (lo, hi);
        }
    }
    Ok(best)
}

fn min_max(values: &[f32]) -> (f32, f32) {
    values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightClip {
    #[default]
    Minmax,
    MseGrid,
}

impl std::str::FromStr for WeightClip {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "minmax" => Ok(WeightClip::Minmax),
            "mse_grid" => Ok(WeightClip::MseGrid),
            _ => Err(Error::Config(format!("unknown clip method `{s}` (expected minmax or mse-grid)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerTensor,
    /// One range per output channel (axis 0 of the weight).
    PerChannel,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "per_tensor" => Ok(Granularity::PerTensor),
            "per_channel" => Ok(Granularity::PerChannel),
            _ => Err(Error::Config(format!("unknown granularity `{s}` (expected per-tensor or per-channel)"))),
        }
    }
}

/// How one layer is quantized. `act_bits` covers both the layer's inputs and
/// its output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantConfig {
    pub layer_id: String,
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
    #[serde(default)]
    pub weight_clip: WeightClip,
    #[serde(default)]
    pub granularity: Granularity,
    /// Resolved weight ranges, one per tensor or per channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_bounds: Option<Vec<(f32, f32)>>,
}

impl LayerQuantConfig {
    pub fn new(layer_id: &str, weight_bits: Option<u32>, act_bits: Option<u32>) -> Self {
        LayerQuantConfig {
            layer_id: layer_id.to_string(),
            weight_bits,
            act_bits,
            weight_clip: WeightClip::Minmax,
            granularity: Granularity::PerTensor,
            clip_bounds: None,
        }
    }

    pub fn with_clip(mut self, clip: WeightClip) -> Self {
        self.weight_clip = clip;
        self.clip_bounds = None;
        self
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self.clip_bounds = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for b in [self.weight_bits, self.act_bits].into_iter().flatten() {
            check_bits(b)?;
        }
        Ok(())
    }

    /// Weight ranges for this layer's weights, computed from `weight`
    /// unless already resolved.
    pub fn weight_ranges(&self, weight: &Tensor) -> Result<Vec<(f32, f32)>> {
        if let Some(bounds) = &self.clip_bounds {
            return Ok(bounds.clone());
        }
        let bits = self.weight_bits.ok_or_else(|| Error::Config(format!("`{}` has no weight bits", self.layer_id)))?;
        let range = |values: &[f32]| match self.weight_clip {
            WeightClip::Minmax => Ok(min_max(values)),
            WeightClip::MseGrid => range_mse_grid(values, bits, DEFAULT_GRID),
        };
        match self.granularity {
            Granularity::PerTensor => Ok(vec![range(weight.data())?]),
            Granularity::PerChannel => {
                let per = weight.len() / weight.shape()[0];
                weight.data().chunks_exact(per).map(range).collect()
            }
        }
    }

    /// Copy with `clip_bounds` filled in from the graph's weights.
    pub fn resolved(&self, graph: &NetworkGraph) -> Result<Self> {
        let mut out = self.clone();
        if self.weight_bits.is_some() && graph.node(&self.layer_id)?.kind.has_weights() {
            out.clip_bounds = Some(self.weight_ranges(graph.layer_params(&self.layer_id)?.0)?);
        }
        Ok(out)
    }
}

/// Fake-quantizes `weight` with the config's bits, clip method and
/// granularity.
pub fn quantize_weights(weight: &Tensor, config: &LayerQuantConfig) -> Result<Tensor> {
    let bits = config.weight_bits.ok_or_else(|| Error::Config(format!("`{}` has no weight bits", config.layer_id)))?;
    let ranges = config.weight_ranges(weight)?;
    let params =
        ranges.iter().map(|&(lo, hi)| QuantParams::from_range(lo, hi, bits)).collect::<Result<Vec<_>>>()?;
    let per = match params.len() {
        1 => weight.len(),
        n if n == weight.shape()[0] => weight.len() / n,
        n => {
            return Err(Error::Config(format!(
                "`{}`: {n} clip bounds for {} output channels",
                config.layer_id,
                weight.shape()[0]
            )))
        }
    };
    let mut data = weight.data().to_vec();
    for (chunk, qp) in data.chunks_exact_mut(per).zip(&params) {
        for v in chunk {
            *v = qp.apply(*v);
        }
    }
    Tensor::new(weight.shape().to_vec(), data)
}

pub fn save_configs(configs: &[LayerQuantConfig], path: &Path) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(configs).expect("configs serialize");
    json.push(b'\n');
    write_atomic(path, &json)
}

pub fn load_configs(path: &Path) -> Result<Vec<LayerQuantConfig>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let configs: Vec<LayerQuantConfig> =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    configs.iter().try_for_each(LayerQuantConfig::validate)?;
    Ok(configs)
}
