use std::collections::{BTreeMap, BTreeSet};

use super::{quantize_weights, CalibrationRecord, LayerQuantConfig, QuantParams};
use crate::error::{Error, Result};
use crate::graph::{Interceptor, LayerCall, NetworkGraph};
use crate::tensor::Tensor;

/// Precomputed quantization of one layer.
#[derive(Clone, Debug)]
struct LayerPlan {
    /// Quantized `(weight, bias)` for conv/dense layers with weight bits.
    params: Option<(Tensor, Tensor)>,
    /// One entry per layer input; `None` leaves that input untouched.
    inputs: Vec<Option<QuantParams>>,
    output: Option<QuantParams>,
}

fn act_params(calib: &CalibrationRecord, id: &str, bits: u32) -> Result<QuantParams> {
    let r = calib.range(id)?;
    QuantParams::from_range(r.min, r.max, bits)
}

fn plan_layer(
    graph: &NetworkGraph,
    config: &LayerQuantConfig,
    calib: &CalibrationRecord,
    skip_input: impl Fn(&str) -> bool,
) -> Result<LayerPlan> {
    config.validate()?;
    let node = graph.node(&config.layer_id)?;
    if !node.kind.is_compute() {
        return Err(Error::Config(format!("`{}` is not a compute layer", node.id)));
    }
    let params = match (config.weight_bits, node.kind.has_weights()) {
        (Some(_), true) => {
            let (w, b) = graph.layer_params(&node.id)?;
            Some((quantize_weights(w, config)?, b.clone()))
        }
        _ => None,
    };
    let (inputs, output) = match config.act_bits {
        Some(bits) => {
            let inputs = node
                .inputs
                .iter()
                .map(|i| if skip_input(i) { Ok(None) } else { act_params(calib, i, bits).map(Some) })
                .collect::<Result<Vec<_>>>()?;
            (inputs, Some(act_params(calib, &node.id, bits)?))
        }
        None => (vec![None; node.inputs.len()], None),
    };
    Ok(LayerPlan { params, inputs, output })
}

fn run_plan(plan: &LayerPlan, call: &LayerCall<'_>) -> Result<Tensor> {
    let quantized: Vec<Option<Tensor>> =
        call.inputs.iter().zip(&plan.inputs).map(|(x, qp)| qp.map(|qp| super::quantize_dequantize(x, &qp))).collect();
    let inputs: Vec<&Tensor> =
        call.inputs.iter().zip(&quantized).map(|(x, q)| q.as_ref().unwrap_or(x)).collect();
    let params = plan.params.as_ref().map(|(w, b)| (w, b));
    let out = call.recompute(&inputs, params)?;
    Ok(match &plan.output {
        Some(qp) => super::quantize_dequantize(&out, qp),
        None => out,
    })
}

/// Interceptor quantizing a single layer's weights, inputs and output while
/// the rest of the network stays in full precision.
#[derive(Clone, Debug)]
pub struct LayerQuantizer {
    layer_id: String,
    plan: LayerPlan,
}

impl LayerQuantizer {
    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }
}

impl Interceptor for LayerQuantizer {
    fn evaluate(&self, call: &LayerCall<'_>) -> Result<Option<Tensor>> {
        if call.id() != self.layer_id {
            return Ok(None);
        }
        run_plan(&self.plan, call).map(Some)
    }
}

/// Inputs are quantized with the producer's calibrated range; weights by the
/// configured clip method; the post-activation output with the layer's own
/// range. Weightless layers get only the activation steps.
pub fn make_layer_quantizer(
    graph: &NetworkGraph,
    layer_id: &str,
    config: &LayerQuantConfig,
    calib: &CalibrationRecord,
) -> Result<LayerQuantizer> {
    if config.layer_id != layer_id {
        return Err(Error::Config(format!("config for `{}` used for `{layer_id}`", config.layer_id)));
    }
    Ok(LayerQuantizer { layer_id: layer_id.to_string(), plan: plan_layer(graph, config, calib, |_| false)? })
}

/// Interceptor quantizing every compute layer at once.
#[derive(Clone, Debug)]
pub struct NetworkQuantizer {
    plans: BTreeMap<String, LayerPlan>,
}

impl Interceptor for NetworkQuantizer {
    fn evaluate(&self, call: &LayerCall<'_>) -> Result<Option<Tensor>> {
        match self.plans.get(call.id()) {
            Some(plan) => run_plan(plan, call).map(Some),
            None => Ok(None),
        }
    }
}

/// A tensor shared by two configured layers is quantized once, at its
/// producer's output; the consumer reads it as is.
pub fn quantize_network(
    graph: &NetworkGraph,
    configs: &[LayerQuantConfig],
    calib: &CalibrationRecord,
) -> Result<NetworkQuantizer> {
    let mut by_id: BTreeMap<&str, &LayerQuantConfig> = BTreeMap::new();
    for c in configs {
        if by_id.insert(&c.layer_id, c).is_some() {
            return Err(Error::Config(format!("duplicate config for `{}`", c.layer_id)));
        }
    }
    let compute: BTreeSet<String> = graph.compute_layers().into_iter().collect();
    for id in by_id.keys() {
        if !compute.contains(*id) {
            return Err(Error::Config(format!("`{id}` is not a compute layer of this graph")));
        }
    }
    if let Some(missing) = compute.iter().find(|id| !by_id.contains_key(id.as_str())) {
        return Err(Error::Config(format!("no config for compute layer `{missing}`")));
    }
    let quantizes_output = |id: &str| -> bool {
        graph
            .effective_producer(id)
            .ok()
            .and_then(|p| by_id.get(p.id.as_str()))
            .is_some_and(|c| c.act_bits.is_some())
    };
    let plans = by_id
        .values()
        .map(|c| Ok((c.layer_id.clone(), plan_layer(graph, c, calib, quantizes_output)?)))
        .collect::<Result<_>>()?;
    Ok(NetworkQuantizer { plans })
}
