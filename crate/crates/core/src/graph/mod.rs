//! Layer graphs: a topologically ordered DAG of compute layers plus the
//! parameter store they reference.

mod builder;
mod fold;
mod forward;
mod model_io;

pub use builder::GraphBuilder;
pub use fold::fold_batch_norms;
pub use forward::{Interceptor, LayerCall, NoTap};
pub use model_io::{load_model, resolve_model_path, save_model, ModelFile, MODEL_VERSION};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{tensor_to_bytes, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv2d,
    Dense,
    Maxpool,
    Avgpool,
    GlobalAvgPool,
    Add,
    Flatten,
    Output,
}

impl LayerKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "input" => Self::Input,
            "conv2d" => Self::Conv2d,
            "dense" => Self::Dense,
            "maxpool" => Self::Maxpool,
            "avgpool" => Self::Avgpool,
            "global_avg_pool" => Self::GlobalAvgPool,
            "add" => Self::Add,
            "flatten" => Self::Flatten,
            "output" => Self::Output,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Input => "input",
            Self::Conv2d => "conv2d",
            Self::Dense => "dense",
            Self::Maxpool => "maxpool",
            Self::Avgpool => "avgpool",
            Self::GlobalAvgPool => "global_avg_pool",
            Self::Add => "add",
            Self::Flatten => "flatten",
            Self::Output => "output",
        }
    }

    pub fn has_weights(self) -> bool {
        matches!(self, Self::Conv2d | Self::Dense)
    }

    /// Layers that take part in layer-wise analysis. Input, output and
    /// flatten nodes do no arithmetic.
    pub fn is_compute(self) -> bool {
        !matches!(self, Self::Input | Self::Output | Self::Flatten)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAttrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[usize; 2]>,
}

impl LayerAttrs {
    pub fn stride(&self) -> [usize; 2] {
        self.stride.unwrap_or([1, 1])
    }

    pub fn padding(&self) -> [usize; 2] {
        self.padding.unwrap_or([0, 0])
    }

    /// Pooling stride defaults to the window.
    pub fn pool_stride(&self) -> [usize; 2] {
        self.stride.or(self.window).unwrap_or([1, 1])
    }
}

/// References into the parameter store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRefs {
    pub weight: String,
    pub bias: String,
}

impl ParamRefs {
    pub fn for_layer(id: &str) -> Self {
        ParamRefs { weight: format!("{id}.weight.qt"), bias: format!("{id}.bias.qt") }
    }
}

/// Inference-mode batch norm applied per output channel after a conv/dense.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNorm {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` so that `bn(z) = scale * z + shift`.
    pub fn affine(&self, layer: &str) -> Result<Vec<(f32, f32)>> {
        (0..self.channels())
            .map(|c| {
                let denom = self.running_var[c] + self.epsilon;
                if denom.is_nan() || denom <= 0.0 {
                    return Err(Error::NonPositiveVariance { layer: layer.to_string(), channel: c });
                }
                let scale = self.gamma[c] / denom.sqrt();
                Ok((scale, self.beta[c] - self.running_mean[c] * scale))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub attrs: LayerAttrs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamRefs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<BatchNorm>,
    #[serde(default)]
    pub inputs: Vec<String>,
}

/// A validated network: layers in topological order, exactly one input and
/// one output node, every parameter reference resolved and every shape
/// consistent.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerNode>,
    params: BTreeMap<String, Tensor>,
    index: HashMap<String, usize>,
    shapes: Vec<Vec<usize>>,
}

impl NetworkGraph {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerNode>,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(layers.len());
        for (pos, layer) in layers.iter().enumerate() {
            if index.insert(layer.id.clone(), pos).is_some() {
                return Err(Error::DuplicateLayer(layer.id.clone()));
            }
        }
        for (pos, layer) in layers.iter().enumerate() {
            for input in &layer.inputs {
                match index.get(input) {
                    None => {
                        return Err(Error::DanglingInput { layer: layer.id.clone(), input: input.clone() })
                    }
                    Some(&p) if p >= pos => {
                        return Err(Error::DagViolation { layer: layer.id.clone(), input: input.clone() })
                    }
                    _ => {}
                }
            }
        }
        let count = |k| layers.iter().filter(|l| l.kind == k).count();
        if count(LayerKind::Input) != 1 || count(LayerKind::Output) != 1 {
            return Err(Error::InvalidGraph(format!(
                "expected exactly one input and one output node, found {} and {}",
                count(LayerKind::Input),
                count(LayerKind::Output)
            )));
        }
        let mut graph = NetworkGraph { input_shape, layers, params, index, shapes: Vec::new() };
        graph.shapes = graph.infer_shapes()?;
        if graph.compute_layers().is_empty() {
            return Err(Error::InvalidGraph("graph has no compute layers".into()));
        }
        Ok(graph)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn node(&self, id: &str) -> Result<&LayerNode> {
        self.position(id).map(|p| &self.layers[p]).ok_or_else(|| Error::UnknownLayer(id.to_string()))
    }

    pub fn output_shape(&self, id: &str) -> Result<&[usize]> {
        Ok(&self.shapes[self.position(id).ok_or_else(|| Error::UnknownLayer(id.to_string()))?])
    }

    pub fn input_node(&self) -> &LayerNode {
        self.layers.iter().find(|l| l.kind == LayerKind::Input).expect("validated")
    }

    pub fn output_node(&self) -> &LayerNode {
        self.layers.iter().find(|l| l.kind == LayerKind::Output).expect("validated")
    }

    /// Ids of the layers subject to analysis, in topological order.
    pub fn compute_layers(&self) -> Vec<String> {
        self.layers.iter().filter(|l| l.kind.is_compute()).map(|l| l.id.clone()).collect()
    }

    /// Ids of the layers that read `id`'s output.
    pub fn consumers(&self, id: &str) -> Vec<&LayerNode> {
        self.layers.iter().filter(|l| l.inputs.iter().any(|i| i == id)).collect()
    }

    /// Follows flatten nodes back to the layer that actually produced a
    /// tensor.
    pub fn effective_producer(&self, id: &str) -> Result<&LayerNode> {
        let mut node = self.node(id)?;
        while node.kind == LayerKind::Flatten {
            node = self.node(&node.inputs[0])?;
        }
        Ok(node)
    }

    /// `(weight, bias)` of a conv/dense layer.
    pub fn layer_params(&self, id: &str) -> Result<(&Tensor, &Tensor)> {
        let node = self.node(id)?;
        let refs = node.params.as_ref().ok_or_else(|| Error::Weightless(id.to_string()))?;
        let get = |r: &String| {
            self.params
                .get(r)
                .ok_or_else(|| Error::MissingParameter { layer: id.to_string(), reference: r.clone() })
        };
        Ok((get(&refs.weight)?, get(&refs.bias)?))
    }

    /// Copy of the graph with `id`'s weight and bias replaced.
    pub fn with_layer_params(&self, id: &str, weight: Tensor, bias: Tensor) -> Result<NetworkGraph> {
        let node = self.node(id)?;
        let refs = node.params.clone().ok_or_else(|| Error::Weightless(id.to_string()))?;
        let mut params = self.params.clone();
        params.insert(refs.weight, weight);
        params.insert(refs.bias, bias);
        NetworkGraph::new(self.input_shape.clone(), self.layers.clone(), params)
    }

    /// Same graph with its layers listed in `order`, which must name every
    /// layer exactly once and be a valid topological order.
    pub fn reordered(&self, order: &[&str]) -> Result<NetworkGraph> {
        if order.len() != self.layers.len() {
            return Err(Error::InvalidGraph(format!(
                "order names {} layers, graph has {}",
                order.len(),
                self.layers.len()
            )));
        }
        let layers = order.iter().map(|id| self.node(id).cloned()).collect::<Result<Vec<_>>>()?;
        NetworkGraph::new(self.input_shape.clone(), layers, self.params.clone())
    }

    pub(crate) fn into_parts(self) -> (Vec<usize>, Vec<LayerNode>, BTreeMap<String, Tensor>) {
        (self.input_shape, self.layers, self.params)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.bn.is_some())
    }

    /// Content-derived identifier (first 16 hex digits of a SHA-256 over
    /// the graph structure and parameter bytes).
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&(&self.input_shape, &self.layers)).expect("serializable"));
        for (name, tensor) in &self.params {
            hasher.update(name.as_bytes());
            hasher.update(tensor_to_bytes(tensor));
        }
        hex16(&hasher.finalize())
    }

    fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for node in &self.layers {
            let inputs: Vec<&[usize]> =
                node.inputs.iter().map(|i| shapes[self.index[i]].as_slice()).collect();
            shapes.push(self.infer_node(node, &inputs)?);
        }
        Ok(shapes)
    }

    fn infer_node(&self, node: &LayerNode, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let id = node.id.as_str();
        let arity = |n: usize| {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::layer(id, format!("{} expects {n} input(s), got {}", node.kind.as_str(), inputs.len())))
            }
        };
        let shape_err = |detail: String| Error::LayerShape { layer: id.to_string(), detail };
        if node.kind.has_weights() != node.params.is_some() {
            return Err(Error::layer(
                id,
                if node.kind.has_weights() { "conv2d/dense layers need params" } else { "only conv2d/dense layers carry params" },
            ));
        }
        if node.bn.is_some() && !node.kind.has_weights() {
            return Err(Error::layer(id, "batch norm can only be attached to conv2d/dense layers"));
        }
        if node.activation != Activation::None
            && matches!(node.kind, LayerKind::Input | LayerKind::Output | LayerKind::Flatten)
        {
            return Err(Error::layer(id, "input/output/flatten nodes cannot have an activation"));
        }
        let rank4 = |s: &[usize]| -> Result<[usize; 4]> {
            match *s {
                [n, c, h, w] => Ok([n, c, h, w]),
                _ => Err(shape_err(format!("expected NCHW input, got {s:?}"))),
            }
        };
        let out = match node.kind {
            LayerKind::Input => {
                arity(0)?;
                if self.input_shape.is_empty() || self.input_shape.contains(&0) {
                    return Err(shape_err(format!("invalid input shape {:?}", self.input_shape)));
                }
                self.input_shape.clone()
            }
            LayerKind::Output | LayerKind::Flatten => {
                arity(1)?;
                if node.kind == LayerKind::Flatten {
                    let s = inputs[0];
                    vec![s[0], s[1..].iter().product::<usize>().max(1)]
                } else {
                    inputs[0].to_vec()
                }
            }
            LayerKind::Add => {
                if inputs.len() < 2 {
                    return Err(Error::layer(id, "add expects at least 2 inputs"));
                }
                if inputs.iter().any(|s| *s != inputs[0]) {
                    return Err(shape_err(format!("add inputs differ: {inputs:?}")));
                }
                inputs[0].to_vec()
            }
            LayerKind::GlobalAvgPool => {
                arity(1)?;
                let [n, c, _, _] = rank4(inputs[0])?;
                vec![n, c, 1, 1]
            }
            LayerKind::Maxpool | LayerKind::Avgpool => {
                arity(1)?;
                let [n, c, h, w] = rank4(inputs[0])?;
                let win = node.attrs.window.ok_or_else(|| Error::layer(id, "pooling needs a window"))?;
                let st = node.attrs.pool_stride();
                if win.contains(&0) || st.contains(&0) || win[0] > h || win[1] > w {
                    return Err(shape_err(format!("window {win:?} / stride {st:?} invalid for {h}x{w} input")));
                }
                vec![n, c, (h - win[0]) / st[0] + 1, (w - win[1]) / st[1] + 1]
            }
            LayerKind::Conv2d | LayerKind::Dense => {
                arity(1)?;
                let (weight, bias) = self.layer_params(id)?;
                let out_channels = weight.shape()[0];
                if bias.shape() != [out_channels] {
                    return Err(shape_err(format!(
                        "bias shape {:?} does not match {out_channels} output channels",
                        bias.shape()
                    )));
                }
                if let Some(bn) = &node.bn {
                    let c = bn.channels();
                    if c != out_channels
                        || bn.beta.len() != c
                        || bn.running_mean.len() != c
                        || bn.running_var.len() != c
                    {
                        return Err(shape_err(format!("batch norm vectors must all have {out_channels} entries")));
                    }
                }
                if node.kind == LayerKind::Conv2d {
                    let [n, c, h, w] = rank4(inputs[0])?;
                    let [_, wi, kh, kw] = match *weight.shape() {
                        [o, i, kh, kw] => [o, i, kh, kw],
                        _ => return Err(shape_err(format!("conv weight must be OIHW, got {:?}", weight.shape()))),
                    };
                    if wi != c {
                        return Err(shape_err(format!("input channels {c} != weight input channels {wi}")));
                    }
                    let st = node.attrs.stride();
                    let pd = node.attrs.padding();
                    if st.contains(&0) || h + 2 * pd[0] < kh || w + 2 * pd[1] < kw {
                        return Err(shape_err(format!("kernel {kh}x{kw} / stride {st:?} invalid for {h}x{w} input")));
                    }
                    vec![n, out_channels, (h + 2 * pd[0] - kh) / st[0] + 1, (w + 2 * pd[1] - kw) / st[1] + 1]
                } else {
                    let [n, f] = match *inputs[0] {
                        [n, f] => [n, f],
                        ref s => return Err(shape_err(format!("dense expects N x F input, got {s:?}"))),
                    };
                    match *weight.shape() {
                        [_, wf] if wf == f => {}
                        ref s => return Err(shape_err(format!("input features {f} do not match weight shape {s:?}"))),
                    }
                    vec![n, out_channels]
                }
            }
        };
        Ok(out)
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_net() -> GraphBuilder {
        let mut b = GraphBuilder::new(vec![1, 2]);
        b.input("in");
        b.dense(
            "fc",
            "in",
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(&[2]).unwrap(),
            Activation::None,
        );
        b.output("out", "fc");
        b
    }

    #[test]
    fn minimal_graph_has_one_compute_layer() {
        let g = dense_net().build().unwrap();
        assert_eq!(g.compute_layers(), vec!["fc".to_string()]);
        assert_eq!(g.output_shape("fc").unwrap(), &[1, 2]);
    }

    #[test]
    fn rejects_forward_reference_and_dangling() {
        let g = dense_net().build().unwrap();
        let (shape, mut layers, params) = g.into_parts();
        layers.swap(1, 2);
        let err = NetworkGraph::new(shape.clone(), layers.clone(), params.clone()).unwrap_err();
        assert!(matches!(err, Error::DagViolation { .. }), "{err}");
        layers.swap(1, 2);
        layers[2].inputs = vec!["nope".into()];
        let err = NetworkGraph::new(shape, layers, params).unwrap_err();
        assert!(matches!(err, Error::DanglingInput { ref layer, .. } if layer == "out"), "{err}");
    }

    #[test]
    fn rejects_shape_inconsistent_params() {
        let mut b = GraphBuilder::new(vec![1, 3]);
        b.input("in");
        b.dense("fc", "in", Tensor::zeros(&[2, 2]).unwrap(), Tensor::zeros(&[2]).unwrap(), Activation::None);
        b.output("out", "fc");
        let err = b.build().unwrap_err();
        assert!(matches!(err, Error::LayerShape { ref layer, .. } if layer == "fc"), "{err}");
    }

    #[test]
    fn rejects_bn_on_pool_and_params_on_add() {
        let g = dense_net().build().unwrap();
        let (shape, mut layers, params) = g.into_parts();
        layers[2].params = Some(ParamRefs::for_layer("out"));
        assert!(NetworkGraph::new(shape, layers, params).is_err());
    }

    #[test]
    fn requires_single_input_and_output() {
        let g = dense_net().build().unwrap();
        let (shape, mut layers, params) = g.into_parts();
        layers.pop();
        assert!(matches!(NetworkGraph::new(shape, layers, params), Err(Error::InvalidGraph(_))));
    }
}
