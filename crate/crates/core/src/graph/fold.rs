use super::NetworkGraph;
use crate::error::Result;
use crate::tensor::Tensor;

/// Absorbs every attached batch norm into its conv/dense layer.
///
/// Per output channel `c` with `s = gamma / sqrt(var + eps)`:
/// `W'[c] = s * W[c]` and `b'[c] = (b[c] - mean[c]) * s + beta[c]`.
/// Graphs without batch norm come back unchanged.
pub fn fold_batch_norms(graph: &NetworkGraph) -> Result<NetworkGraph> {
    let (input_shape, mut layers, mut params) = graph.clone().into_parts();
    for node in &mut layers {
        let Some(bn) = node.bn.take() else { continue };
        let affine = bn.affine(&node.id)?;
        let refs = node.params.as_ref().expect("bn only on conv/dense");
        let weight = &params[&refs.weight];
        let bias = &params[&refs.bias];

        let per_channel = weight.len() / weight.shape()[0];
        let mut w = weight.data().to_vec();
        for (c, chunk) in w.chunks_exact_mut(per_channel).enumerate() {
            let scale = affine[c].0;
            for v in chunk {
                *v *= scale;
            }
        }
        let b: Vec<f32> = bias
            .data()
            .iter()
            .enumerate()
            .map(|(c, &b)| (b - bn.running_mean[c]) * affine[c].0 + bn.beta[c])
            .collect();
        let new_weight = Tensor::new(weight.shape().to_vec(), w)?;
        let new_bias = Tensor::new(bias.shape().to_vec(), b)?;
        params.insert(refs.weight.clone(), new_weight);
        params.insert(refs.bias.clone(), new_bias);
    }
    NetworkGraph::new(input_shape, layers, params)
}
