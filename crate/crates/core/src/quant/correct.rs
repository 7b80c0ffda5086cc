use super::{quantize_weights, LayerQuantConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerNode, NetworkGraph, NoTap};
use crate::tensor::Tensor;

fn weighted_layer<'g>(graph: &'g NetworkGraph, id: &str) -> Result<&'g LayerNode> {
    let node = graph.node(id)?;
    if !node.kind.has_weights() {
        return Err(Error::Weightless(id.to_string()));
    }
    if node.bn.is_some() {
        return Err(Error::Config(format!("`{id}` still has batch norm; fold it first")));
    }
    Ok(node)
}

fn samples(data: &Dataset, n: usize) -> Result<&[Tensor]> {
    if n == 0 || n > data.len() {
        return Err(Error::Dataset(format!("need 1..={} samples, got {n}", data.len())));
    }
    Ok(&data.samples()[..n])
}

/// Per-output-channel mean of `reference` pre-activation minus the
/// pre-activation of the same layer in `quantized` with its weights
/// fake-quantized per `config`. Both layers see the full-precision inputs
/// of `reference`.
pub fn preact_mean_shift(
    reference: &NetworkGraph,
    quantized: &NetworkGraph,
    config: &LayerQuantConfig,
    data: &Dataset,
    n_samples: usize,
) -> Result<Vec<f64>> {
    let id = &config.layer_id;
    let node = weighted_layer(reference, id)?;
    let (w, b) = quantized.layer_params(id)?;
    let qw = if config.weight_bits.is_some() { quantize_weights(w, config)? } else { w.clone() };
    let channels = reference.output_shape(id)?[1];
    let mut sums = vec![0.0f64; channels];
    let mut count = 0usize;
    for x in samples(data, n_samples)? {
        let outs = reference.forward_all(x, &NoTap)?;
        let inputs: Vec<&Tensor> =
            node.inputs.iter().map(|i| &outs[reference.position(i).expect("validated")]).collect();
        let fp = reference.eval_pre_activation(node, &inputs, None)?;
        let q = reference.eval_pre_activation(node, &inputs, Some((&qw, b)))?;
        let inner = fp.len() / channels;
        for (i, (a, b)) in fp.data().chunks_exact(inner).zip(q.data().chunks_exact(inner)).enumerate() {
            sums[i % channels] += a.iter().zip(b).map(|(&x, &y)| f64::from(x) - f64::from(y)).sum::<f64>();
        }
        count += fp.len() / channels;
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Adds to each weight-quantized layer's bias the mean pre-activation shift
/// its weight quantization causes on the first `n_samples` samples. Each
/// layer is measured in isolation on full-precision inputs; quantization
/// parameters still derive from the unchanged weights.
pub fn bias_correct(
    graph: &NetworkGraph,
    configs: &[LayerQuantConfig],
    calib_set: &Dataset,
    n_samples: usize,
) -> Result<NetworkGraph> {
    let mut out = graph.clone();
    for config in configs {
        if config.weight_bits.is_none() || !graph.node(&config.layer_id)?.kind.has_weights() {
            continue;
        }
        let shift = preact_mean_shift(graph, graph, config, calib_set, n_samples)?;
        let (w, b) = graph.layer_params(&config.layer_id)?;
        let bias: Vec<f32> = b.data().iter().zip(&shift).map(|(&v, &d)| (f64::from(v) + d) as f32).collect();
        out = out.with_layer_params(&config.layer_id, w.clone(), Tensor::new(b.shape().to_vec(), bias)?)?;
    }
    Ok(out)
}

/// Walks from `consumer` back to `producer` through channelwise,
/// positively homogeneous layers that have a single consumer each.
fn check_path(graph: &NetworkGraph, producer: &str, consumer: &LayerNode) -> Result<()> {
    if consumer.inputs.len() != 1 {
        return Err(Error::Equalize(format!("`{}` must have exactly one input", consumer.id)));
    }
    let mut id = consumer.inputs[0].as_str();
    loop {
        let consumers = graph.consumers(id);
        if consumers.len() != 1 {
            return Err(Error::Equalize(format!(
                "`{id}` feeds {} layers; rescaling it would change the others",
                consumers.len()
            )));
        }
        if id == producer {
            return Ok(());
        }
        let node = graph.node(id)?;
        match node.kind {
            LayerKind::Maxpool | LayerKind::Avgpool | LayerKind::GlobalAvgPool | LayerKind::Flatten => {
                id = node.inputs[0].as_str();
            }
            _ => {
                return Err(Error::Equalize(format!(
                    "`{id}` ({}) between `{producer}` and `{}` is not channelwise",
                    node.kind.as_str(),
                    consumer.id
                )))
            }
        }
    }
}

/// Multiplies the producer's output channel `c` (weights and bias) by
/// `scales[c]` and divides the consumer's matching input weights by it.
/// ReLU and the pooling layers allowed in between commute with positive
/// scaling, so the network function is unchanged.
pub fn equalize_pair(graph: &NetworkGraph, producer_id: &str, consumer_id: &str, scales: &[f32]) -> Result<NetworkGraph> {
    let producer = weighted_layer(graph, producer_id)?;
    let consumer = weighted_layer(graph, consumer_id)?;
    check_path(graph, &producer.id, consumer)?;
    let (pw, pb) = graph.layer_params(producer_id)?;
    let channels = pw.shape()[0];
    if scales.len() != channels {
        return Err(Error::Equalize(format!("{} scales for {channels} channels of `{producer_id}`", scales.len())));
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Equalize(format!("scale {s} is not strictly positive")));
    }

    let per = pw.len() / channels;
    let mut new_pw = pw.data().to_vec();
    for (chunk, &s) in new_pw.chunks_exact_mut(per).zip(scales) {
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    let new_pb: Vec<f32> = pb.data().iter().zip(scales).map(|(v, s)| v * s).collect();

    let (cw, cb) = graph.layer_params(consumer_id)?;
    let fan_in = cw.shape()[1];
    if fan_in % channels != 0 {
        return Err(Error::Equalize(format!(
            "`{consumer_id}` reads {fan_in} features, not a multiple of {channels} channels"
        )));
    }
    // features per channel: 1 for conv, H*W when a flatten sits in between
    let group = fan_in / channels;
    let inner: usize = cw.shape()[2..].iter().product();
    let mut new_cw = cw.data().to_vec();
    for row in new_cw.chunks_exact_mut(fan_in * inner) {
        for (f, chunk) in row.chunks_exact_mut(inner).enumerate() {
            let s = scales[f / group];
            chunk.iter_mut().for_each(|v| *v /= s);
        }
    }

    graph
        .with_layer_params(producer_id, Tensor::new(pw.shape().to_vec(), new_pw)?, Tensor::new(pb.shape().to_vec(), new_pb)?)?
        .with_layer_params(consumer_id, Tensor::new(cw.shape().to_vec(), new_cw)?, cb.clone())
}

/// `s_c = sqrt(consumer_range_c / producer_range_c)`, with ranges taken as the
/// largest absolute weight per channel. After [`equalize_pair`] both layers
/// then share the range `sqrt(producer_range_c * consumer_range_c)`.
pub fn equalization_scales(graph: &NetworkGraph, producer_id: &str, consumer_id: &str) -> Result<Vec<f32>> {
    let (pw, _) = graph.layer_params(producer_id)?;
    let (cw, _) = graph.layer_params(consumer_id)?;
    let channels = pw.shape()[0];
    let fan_in = cw.shape()[1];
    if fan_in % channels != 0 {
        return Err(Error::Equalize(format!("`{consumer_id}` fan-in {fan_in} does not match {channels} channels")));
    }
    let p_range: Vec<f32> =
        pw.data().chunks_exact(pw.len() / channels).map(|c| c.iter().fold(0.0f32, |m, v| m.max(v.abs()))).collect();
    let mut c_range = vec![0.0f32; channels];
    let group = fan_in / channels;
    let inner: usize = cw.shape()[2..].iter().product();
    for row in cw.data().chunks_exact(fan_in * inner) {
        for (f, chunk) in row.chunks_exact(inner).enumerate() {
            let r = &mut c_range[f / group];
            *r = chunk.iter().fold(*r, |m, v| m.max(v.abs()));
        }
    }
    Ok(p_range
        .iter()
        .zip(&c_range)
        .map(|(&p, &c)| if p > 0.0 && c > 0.0 { (f64::from(c) / f64::from(p)).sqrt() as f32 } else { 1.0 })
        .collect())
}
