use std::borrow::Cow;

use super::{Activation, LayerKind, LayerNode, NetworkGraph};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Per-layer hook for [`NetworkGraph::forward_with`].
pub trait Interceptor: Sync {
    /// Called before a layer is evaluated. `Some` is used as the layer's
    /// output and skips both the graph's own evaluation and
    /// [`Interceptor::intercept`].
    fn evaluate(&self, _call: &LayerCall<'_>) -> Result<Option<Tensor>> {
        Ok(None)
    }

    /// Called after a layer has been evaluated. `Some` replaces its output
    /// for every downstream consumer.
    fn intercept(&self, _call: &LayerCall<'_>, _output: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

impl<F> Interceptor for F
where
    F: Fn(&LayerCall<'_>, &Tensor) -> Result<Option<Tensor>> + Sync,
{
    fn intercept(&self, call: &LayerCall<'_>, output: &Tensor) -> Result<Option<Tensor>> {
        self(call, output)
    }
}

/// Interceptor that never substitutes anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoTap;

impl Interceptor for NoTap {}

/// What an interceptor sees for one layer.
pub struct LayerCall<'a> {
    pub graph: &'a NetworkGraph,
    pub node: &'a LayerNode,
    pub inputs: &'a [&'a Tensor],
}

impl LayerCall<'_> {
    pub fn id(&self) -> &str {
        &self.node.id
    }

    /// Evaluates this layer on other inputs and, for conv/dense, other
    /// `(weight, bias)`; the result includes batch norm and activation.
    pub fn recompute(&self, inputs: &[&Tensor], params: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
        self.graph.eval_layer(self.node, inputs, params)
    }

    /// Like [`LayerCall::recompute`] but stops before the activation.
    pub fn recompute_pre_activation(
        &self,
        inputs: &[&Tensor],
        params: Option<(&Tensor, &Tensor)>,
    ) -> Result<Tensor> {
        self.graph.eval_pre_activation(self.node, inputs, params)
    }
}

impl NetworkGraph {
    /// Full-precision forward pass.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_with(input, &NoTap)
    }

    /// Forward pass with a per-layer interceptor.
    pub fn forward_with(&self, input: &Tensor, tap: &dyn Interceptor) -> Result<Tensor> {
        self.check_input(input)?;
        let outputs = self.run(&[], Some(input), tap)?;
        Ok(self.take_output(outputs))
    }

    /// Every layer's (possibly substituted) output, indexed like
    /// [`NetworkGraph::layers`].
    pub fn forward_all(&self, input: &Tensor, tap: &dyn Interceptor) -> Result<Vec<Tensor>> {
        self.check_input(input)?;
        Ok(self.run(&[], Some(input), tap)?.into_iter().map(Cow::into_owned).collect())
    }

    /// Re-runs the graph from layer position `from`, reusing `cached`
    /// outputs (as returned by [`NetworkGraph::forward_all`]) for every
    /// earlier layer. The interceptor only sees layers at `from` or later.
    pub fn forward_resume(&self, cached: &[Tensor], from: usize, tap: &dyn Interceptor) -> Result<Tensor> {
        if cached.len() != self.layers().len() || from == 0 || from > cached.len() {
            return Err(Error::InvalidGraph(format!(
                "cannot resume at {from} from {} cached outputs of {} layers",
                cached.len(),
                self.layers().len()
            )));
        }
        let outputs = self.run(&cached[..from], None, tap)?;
        Ok(self.take_output(outputs))
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape() {
            return Err(Error::LayerShape {
                layer: self.input_node().id.clone(),
                detail: format!("expected input shape {:?}, got {:?}", self.input_shape(), input.shape()),
            });
        }
        Ok(())
    }

    fn take_output(&self, outputs: Vec<Cow<'_, Tensor>>) -> Tensor {
        let pos = self.position(&self.output_node().id).expect("validated");
        outputs.into_iter().nth(pos).expect("one output per layer").into_owned()
    }

    fn run<'a>(
        &'a self,
        prefix: &'a [Tensor],
        input: Option<&'a Tensor>,
        tap: &dyn Interceptor,
    ) -> Result<Vec<Cow<'a, Tensor>>> {
        let mut outputs: Vec<Cow<'a, Tensor>> = prefix.iter().map(Cow::Borrowed).collect();
        outputs.reserve(self.layers().len() - prefix.len());
        for node in &self.layers()[prefix.len()..] {
            let inputs: Vec<&Tensor> =
                node.inputs.iter().map(|i| outputs[self.position(i).expect("validated")].as_ref()).collect();
            let call = LayerCall { graph: self, node, inputs: &inputs };
            let expected = self.output_shape(&node.id)?;
            let out = match tap.evaluate(&call)? {
                Some(t) => check_replacement(node, t, expected)?,
                None => {
                    let out = if node.kind == LayerKind::Input {
                        input.expect("input layer is never cached").clone()
                    } else {
                        self.eval_layer(node, &inputs, None)?
                    };
                    match tap.intercept(&call, &out)? {
                        Some(t) => check_replacement(node, t, out.shape())?,
                        None => out,
                    }
                }
            };
            drop(inputs);
            outputs.push(Cow::Owned(out));
        }
        Ok(outputs)
    }

    pub(crate) fn eval_layer(
        &self,
        node: &LayerNode,
        inputs: &[&Tensor],
        params: Option<(&Tensor, &Tensor)>,
    ) -> Result<Tensor> {
        let pre = self.eval_pre_activation(node, inputs, params)?;
        Ok(match node.activation {
            Activation::None => pre,
            Activation::Relu => tensor::relu(&pre),
        })
    }

    pub(crate) fn eval_pre_activation(
        &self,
        node: &LayerNode,
        inputs: &[&Tensor],
        params: Option<(&Tensor, &Tensor)>,
    ) -> Result<Tensor> {
        let wrap = |e: Error| match e {
            Error::ShapeMismatch { op, detail } => {
                Error::LayerShape { layer: node.id.clone(), detail: format!("{op}: {detail}") }
            }
            other => other,
        };
        let first = || {
            inputs.first().copied().ok_or_else(|| Error::layer(&node.id, "missing input tensor"))
        };
        let out = match node.kind {
            LayerKind::Input => first()?.clone(),
            LayerKind::Output => first()?.clone(),
            LayerKind::Flatten => tensor::flatten(first()?),
            LayerKind::Maxpool => tensor::maxpool2d(
                first()?,
                node.attrs.window.unwrap_or([1, 1]),
                node.attrs.pool_stride(),
            )
            .map_err(wrap)?,
            LayerKind::Avgpool => tensor::avgpool2d(
                first()?,
                node.attrs.window.unwrap_or([1, 1]),
                node.attrs.pool_stride(),
            )
            .map_err(wrap)?,
            LayerKind::GlobalAvgPool => tensor::global_avg_pool(first()?).map_err(wrap)?,
            LayerKind::Add => {
                let (head, rest) = inputs.split_first().ok_or_else(|| Error::layer(&node.id, "add has no inputs"))?;
                let mut acc = (*head).clone();
                for t in rest {
                    acc = tensor::add(&acc, t).map_err(wrap)?;
                }
                acc
            }
            LayerKind::Conv2d | LayerKind::Dense => {
                let (weight, bias) = match params {
                    Some(p) => p,
                    None => self.layer_params(&node.id)?,
                };
                let z = if node.kind == LayerKind::Conv2d {
                    tensor::conv2d(first()?, weight, bias, node.attrs.stride(), node.attrs.padding())
                } else {
                    tensor::dense(first()?, weight, bias)
                }
                .map_err(wrap)?;
                match &node.bn {
                    Some(bn) => apply_batch_norm(&z, &bn.affine(&node.id)?),
                    None => z,
                }
            }
        };
        Ok(out)
    }
}

fn check_replacement(node: &LayerNode, t: Tensor, expected: &[usize]) -> Result<Tensor> {
    if t.shape() != expected {
        return Err(Error::LayerShape {
            layer: node.id.clone(),
            detail: format!("interceptor returned shape {:?}, layer produces {:?}", t.shape(), expected),
        });
    }
    Ok(t)
}

/// Applies per-channel `scale * z + shift` along axis 1.
fn apply_batch_norm(z: &Tensor, affine: &[(f32, f32)]) -> Tensor {
    let channels = z.shape()[1];
    let inner: usize = z.shape()[2..].iter().product();
    let mut out = z.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
        let (scale, shift) = affine[i % channels];
        for v in chunk {
            *v = scale * *v + shift;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    fn two_layer() -> NetworkGraph {
        let mut b = GraphBuilder::new(vec![1, 3]);
        b.input("in");
        b.dense(
            "a",
            "in",
            Tensor::new(vec![3, 3], vec![1., -2., 0.5, 0.3, 1., -1., 2., 0., 1.]).unwrap(),
            Tensor::vector(vec![0.1, -0.2, 0.3]).unwrap(),
            Activation::Relu,
        );
        b.dense(
            "b",
            "a",
            Tensor::new(vec![2, 3], vec![1., 1., 1., -1., 0.5, 2.]).unwrap(),
            Tensor::vector(vec![0.0, 1.0]).unwrap(),
            Activation::None,
        );
        b.output("out", "b");
        b.build().unwrap()
    }

    #[test]
    fn identity_dense_network() {
        let mut b = GraphBuilder::new(vec![1, 3]);
        b.input("in");
        b.dense(
            "fc",
            "in",
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
            Tensor::zeros(&[3]).unwrap(),
            Activation::None,
        );
        b.output("out", "fc");
        let g = b.build().unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.25, -1.5, 9.0]).unwrap();
        assert_eq!(g.forward(&x).unwrap(), x);
    }

    #[test]
    fn noop_tap_matches_plain_forward() {
        let g = two_layer();
        let x = Tensor::new(vec![1, 3], vec![0.5, 1.0, -0.25]).unwrap();
        let tap = |_: &LayerCall<'_>, _: &Tensor| Ok(None);
        assert!(g.forward_with(&x, &tap).unwrap().bit_eq(&g.forward(&x).unwrap()));
    }

    #[test]
    fn zeroing_tap_matches_hard_zeroed_graph() {
        let g = two_layer();
        let x = Tensor::new(vec![1, 3], vec![0.5, 1.0, -0.25]).unwrap();
        let tap = |call: &LayerCall<'_>, out: &Tensor| Ok((call.id() == "a").then(|| Tensor::zeros(out.shape()).unwrap()));
        let tapped = g.forward_with(&x, &tap).unwrap();
        // zero weights and bias make layer `a` emit zeros
        let edited = g.with_layer_params("a", Tensor::zeros(&[3, 3]).unwrap(), Tensor::zeros(&[3]).unwrap()).unwrap();
        assert!(tapped.bit_eq(&edited.forward(&x).unwrap()));
        assert_eq!(tapped.data(), &[0.0, 1.0]);
    }

    #[test]
    fn resume_matches_full_run() {
        let g = two_layer();
        let x = Tensor::new(vec![1, 3], vec![0.5, 1.0, -0.25]).unwrap();
        let all = g.forward_all(&x, &NoTap).unwrap();
        let tap = |call: &LayerCall<'_>, out: &Tensor| Ok((call.id() == "b").then(|| out.map(|v| v * 2.0)));
        let full = g.forward_with(&x, &tap).unwrap();
        for from in 1..=all.len() {
            let resumed = g.forward_resume(&all, from, &tap).unwrap();
            if from <= g.position("b").unwrap() {
                assert!(resumed.bit_eq(&full));
            } else {
                assert!(resumed.bit_eq(&all[g.position("out").unwrap()]));
            }
        }
    }

    #[test]
    fn wrong_input_shape_names_layer() {
        let g = two_layer();
        let err = g.forward(&Tensor::zeros(&[1, 4]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("`in`"), "{err}");
    }

    #[test]
    fn tap_with_wrong_shape_is_rejected() {
        let g = two_layer();
        let x = Tensor::zeros(&[1, 3]).unwrap();
        let tap = |call: &LayerCall<'_>, _: &Tensor| Ok((call.id() == "a").then(|| Tensor::zeros(&[1, 1]).unwrap()));
        assert!(matches!(g.forward_with(&x, &tap), Err(Error::LayerShape { ref layer, .. }) if layer == "a"));
    }
}
