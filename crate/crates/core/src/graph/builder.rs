use std::collections::BTreeMap;

use super::{Activation, BatchNorm, LayerAttrs, LayerKind, LayerNode, NetworkGraph, ParamRefs};
use crate::error::Result;
use crate::tensor::Tensor;

/// Incremental construction of a [`NetworkGraph`]. Layers must be added in
/// topological order; everything is validated by [`GraphBuilder::build`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    input_shape: Vec<usize>,
    layers: Vec<LayerNode>,
    params: BTreeMap<String, Tensor>,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        GraphBuilder { input_shape, ..Default::default() }
    }

    fn push(&mut self, id: &str, kind: LayerKind, inputs: &[&str]) -> &mut LayerNode {
        self.layers.push(LayerNode {
            id: id.to_string(),
            kind,
            activation: Activation::None,
            attrs: LayerAttrs::default(),
            params: None,
            bn: None,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        self.layers.last_mut().expect("just pushed")
    }

    fn set_params(&mut self, id: &str, weight: Tensor, bias: Tensor) -> ParamRefs {
        let refs = ParamRefs::for_layer(id);
        self.params.insert(refs.weight.clone(), weight);
        self.params.insert(refs.bias.clone(), bias);
        refs
    }

    pub fn input(&mut self, id: &str) -> &mut Self {
        self.push(id, LayerKind::Input, &[]);
        self
    }

    pub fn output(&mut self, id: &str, from: &str) -> &mut Self {
        self.push(id, LayerKind::Output, &[from]);
        self
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        id: &str,
        from: &str,
        weight: Tensor,
        bias: Tensor,
        stride: [usize; 2],
        padding: [usize; 2],
        activation: Activation,
    ) -> &mut Self {
        let refs = self.set_params(id, weight, bias);
        let node = self.push(id, LayerKind::Conv2d, &[from]);
        node.params = Some(refs);
        node.activation = activation;
        node.attrs.stride = Some(stride);
        node.attrs.padding = Some(padding);
        self
    }

    pub fn dense(&mut self, id: &str, from: &str, weight: Tensor, bias: Tensor, activation: Activation) -> &mut Self {
        let refs = self.set_params(id, weight, bias);
        let node = self.push(id, LayerKind::Dense, &[from]);
        node.params = Some(refs);
        node.activation = activation;
        self
    }

    /// Attaches batch norm to an already added conv/dense layer.
    pub fn batch_norm(&mut self, id: &str, bn: BatchNorm) -> &mut Self {
        if let Some(node) = self.layers.iter_mut().find(|l| l.id == id) {
            node.bn = Some(bn);
        }
        self
    }

    pub fn maxpool(&mut self, id: &str, from: &str, window: [usize; 2], stride: [usize; 2]) -> &mut Self {
        let node = self.push(id, LayerKind::Maxpool, &[from]);
        node.attrs.window = Some(window);
        node.attrs.stride = Some(stride);
        self
    }

    pub fn avgpool(&mut self, id: &str, from: &str, window: [usize; 2], stride: [usize; 2]) -> &mut Self {
        let node = self.push(id, LayerKind::Avgpool, &[from]);
        node.attrs.window = Some(window);
        node.attrs.stride = Some(stride);
        self
    }

    pub fn global_avg_pool(&mut self, id: &str, from: &str) -> &mut Self {
        self.push(id, LayerKind::GlobalAvgPool, &[from]);
        self
    }

    pub fn add(&mut self, id: &str, inputs: &[&str], activation: Activation) -> &mut Self {
        self.push(id, LayerKind::Add, inputs).activation = activation;
        self
    }

    pub fn flatten(&mut self, id: &str, from: &str) -> &mut Self {
        self.push(id, LayerKind::Flatten, &[from]);
        self
    }

    pub fn build(self) -> Result<NetworkGraph> {
        NetworkGraph::new(self.input_shape, self.layers, self.params)
    }
}
