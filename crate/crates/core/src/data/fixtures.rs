//! Seeded fixture networks.
//!
//! Weights are He-scaled normals drawn per layer from `Rng::derive(seed,
//! "weights/<id>")`. Batch-norm statistics are measured on 32 probe inputs
//! so that every normalized channel starts near zero mean and unit variance.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Activation, BatchNorm, GraphBuilder, NetworkGraph};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Layer carrying the injected outliers in `outlier_resnet_tiny`.
pub const OUTLIER_LAYER: &str = "mid_conv";
pub const OUTLIER_FACTOR: f32 = 50.0;
/// Channel of `mid_expand` that is forced to zero by its batch norm.
pub const DEAD_CHANNEL: usize = 0;

const MID_WIDTH: usize = 1024;
/// Output classes of the resnet fixtures.
const RESNET_CLASSES: usize = 2;
const BN_PROBES: usize = 32;
const BN_EPSILON: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    MlpSmall,
    ConvSmall,
    ResnetTiny,
    OutlierResnetTiny,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::MlpSmall, Arch::ConvSmall, Arch::ResnetTiny, Arch::OutlierResnetTiny];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::MlpSmall => "mlp_small",
            Arch::ConvSmall => "conv_small",
            Arch::ResnetTiny => "resnet_tiny",
            Arch::OutlierResnetTiny => "outlier_resnet_tiny",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    /// Accepts `resnet_tiny` as well as `resnet-tiny`.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Arch::ALL.into_iter().find(|a| a.as_str() == norm).ok_or_else(|| Error::UnknownArch(s.to_string()))
    }
}

pub fn gen_fixture(arch: Arch, seed: u64) -> Result<NetworkGraph> {
    match arch {
        Arch::MlpSmall => mlp_small(seed),
        Arch::ConvSmall => conv_small(seed),
        Arch::ResnetTiny => resnet_tiny(seed),
        Arch::OutlierResnetTiny => inject_outliers(&resnet_tiny(seed)?),
    }
}

struct Net {
    b: GraphBuilder,
    seed: u64,
    bn: Vec<String>,
}

impl Net {
    fn new(input_shape: Vec<usize>, seed: u64) -> Self {
        let mut b = GraphBuilder::new(input_shape);
        b.input("input");
        Net { b, seed, bn: Vec::new() }
    }

    fn draw(&self, id: &str, shape: &[usize], fan_in: usize) -> (Tensor, Tensor) {
        let mut rng = Rng::derive(self.seed, &format!("weights/{id}"));
        let std = (2.0 / fan_in as f64).sqrt();
        let count: usize = shape.iter().product();
        let w = (0..count).map(|_| (rng.normal() * std) as f32).collect();
        let b = (0..shape[0]).map(|_| (rng.normal() * 0.05) as f32).collect();
        (Tensor::new(shape.to_vec(), w).expect("valid shape"), Tensor::new(vec![shape[0]], b).expect("valid shape"))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, id: &str, from: &str, cin: usize, cout: usize, k: usize, stride: usize, act: Activation, bn: bool) {
        let (w, b) = self.draw(id, &[cout, cin, k, k], cin * k * k);
        self.b.conv(id, from, w, b, [stride, stride], [k / 2, k / 2], act);
        if bn {
            self.b.batch_norm(id, identity_bn(cout));
            self.bn.push(id.to_string());
        }
    }

    fn dense(&mut self, id: &str, from: &str, fin: usize, fout: usize, act: Activation, bn: bool) {
        let (w, b) = self.draw(id, &[fout, fin], fin);
        self.b.dense(id, from, w, b, act);
        if bn {
            self.b.batch_norm(id, identity_bn(fout));
            self.bn.push(id.to_string());
        }
    }

    fn finish(self, last: &str) -> Result<NetworkGraph> {
        let Net { mut b, seed, bn } = self;
        b.output("output", last);
        let mut graph = b.build()?;
        for id in &bn {
            graph = calibrate_bn(&graph, id, seed)?;
        }
        Ok(graph)
    }
}

fn identity_bn(c: usize) -> BatchNorm {
    BatchNorm {
        gamma: vec![1.0; c],
        beta: vec![0.0; c],
        running_mean: vec![0.0; c],
        running_var: vec![1.0; c],
        epsilon: 0.0,
    }
}

fn probes(graph: &NetworkGraph, seed: u64) -> Vec<Tensor> {
    let mut rng = Rng::derive(seed, "bn-probe");
    let count: usize = graph.input_shape().iter().product();
    (0..BN_PROBES)
        .map(|_| {
            Tensor::new(graph.input_shape().to_vec(), (0..count).map(|_| rng.uniform_f32()).collect())
                .expect("input shape is valid")
        })
        .collect()
}

/// Replaces layer `id`'s identity batch norm with statistics measured on the
/// probe inputs. Expects every earlier batch norm to be calibrated already.
fn calibrate_bn(graph: &NetworkGraph, id: &str, seed: u64) -> Result<NetworkGraph> {
    let node = graph.node(id)?;
    let channels = graph.output_shape(id)?[1];
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0usize;
    for probe in probes(graph, seed) {
        let outs = graph.forward_all(&probe, &crate::graph::NoTap)?;
        let inputs: Vec<&Tensor> =
            node.inputs.iter().map(|i| &outs[graph.position(i).expect("validated")]).collect();
        // identity batch norm: the pre-activation is the raw layer output
        let z = graph.eval_pre_activation(node, &inputs, None)?;
        let inner = z.len() / channels;
        for (i, chunk) in z.data().chunks_exact(inner).enumerate() {
            for &v in chunk {
                sum[i % channels] += f64::from(v);
                sq[i % channels] += f64::from(v) * f64::from(v);
            }
        }
        count += inner;
    }
    let mut rng = Rng::derive(seed, &format!("bn/{id}"));
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let var: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / count as f64 - m * m).max(1e-6)).collect();
    let mut bn = BatchNorm {
        gamma: (0..channels).map(|_| rng.uniform_range(0.8, 1.2) as f32).collect(),
        beta: (0..channels).map(|_| (rng.normal() * 0.1) as f32).collect(),
        running_mean: mean.iter().map(|&m| m as f32).collect(),
        running_var: var.iter().map(|&v| v as f32).collect(),
        epsilon: BN_EPSILON,
    };
    if id == "mid_expand" {
        bn.beta[DEAD_CHANNEL] = -100.0;
    }
    if id == OUTLIER_LAYER {
        bn.beta.iter_mut().for_each(|b| *b = 0.0);
    }
    set_bn(graph, id, bn)
}

fn set_bn(graph: &NetworkGraph, id: &str, bn: BatchNorm) -> Result<NetworkGraph> {
    let (input_shape, mut layers, params) = graph.clone().into_parts();
    for node in &mut layers {
        if node.id == id {
            node.bn = Some(bn.clone());
        }
    }
    NetworkGraph::new(input_shape, layers, params)
}

fn mlp_small(seed: u64) -> Result<NetworkGraph> {
    let mut n = Net::new(vec![1, 16], seed);
    n.dense("fc1", "input", 16, 32, Activation::Relu, true);
    n.dense("fc2", "fc1", 32, 32, Activation::Relu, true);
    n.dense("fc3", "fc2", 32, 10, Activation::None, true);
    n.finish("fc3")
}

fn conv_small(seed: u64) -> Result<NetworkGraph> {
    let mut n = Net::new(vec![1, 3, 8, 8], seed);
    n.conv("conv1", "input", 3, 8, 3, 1, Activation::Relu, true);
    n.b.maxpool("pool", "conv1", [2, 2], [2, 2]);
    n.conv("conv2", "pool", 8, 16, 3, 1, Activation::Relu, true);
    n.b.global_avg_pool("gap", "conv2");
    n.b.flatten("flatten", "gap");
    n.dense("fc", "flatten", 16, 10, Activation::None, true);
    n.finish("fc")
}

fn resnet_tiny(seed: u64) -> Result<NetworkGraph> {
    let relu = Activation::Relu;
    let mut n = Net::new(vec![1, 3, 16, 16], seed);
    n.conv("stem", "input", 3, 8, 3, 1, relu, true);
    n.conv("b1_conv1", "stem", 8, 8, 3, 1, relu, true);
    n.conv("b1_conv2", "b1_conv1", 8, 8, 3, 1, Activation::None, true);
    n.b.add("b1_add", &["stem", "b1_conv2"], relu);
    n.b.maxpool("pool", "b1_add", [2, 2], [2, 2]);
    n.conv("b2_conv1", "pool", 8, 16, 3, 2, relu, true);
    n.conv("b2_conv2", "b2_conv1", 16, 16, 3, 1, Activation::None, true);
    n.conv("b2_proj", "pool", 8, 16, 1, 2, Activation::None, true);
    n.b.add("b2_add", &["b2_proj", "b2_conv2"], relu);
    n.b.maxpool("pool2", "b2_add", [2, 2], [2, 2]);
    n.conv("mid_expand", "pool2", 16, MID_WIDTH, 1, 1, relu, true);
    n.conv(OUTLIER_LAYER, "mid_expand", MID_WIDTH, MID_WIDTH, 1, 1, Activation::None, true);
    n.b.global_avg_pool("gap", OUTLIER_LAYER);
    n.b.flatten("flatten", "gap");
    n.dense("fc", "flatten", MID_WIDTH, RESNET_CLASSES, Activation::None, true);
    n.finish("fc")
}

/// Multiplies the largest and the smallest weight reading the dead channel
/// of the designated conv by [`OUTLIER_FACTOR`].
fn inject_outliers(graph: &NetworkGraph) -> Result<NetworkGraph> {
    let (w, b) = graph.layer_params(OUTLIER_LAYER)?;
    let [o, i, kh, kw] = w.dims4("inject_outliers")?;
    let per_in = kh * kw;
    let column: Vec<usize> =
        (0..o).flat_map(|oc| (0..per_in).map(move |k| (oc * i + DEAD_CHANNEL) * per_in + k)).collect();
    let data = w.data();
    let hi = *column.iter().max_by(|&&a, &&b| data[a].total_cmp(&data[b])).expect("non-empty");
    let lo = *column.iter().min_by(|&&a, &&b| data[a].total_cmp(&data[b])).expect("non-empty");
    let mut new = data.to_vec();
    new[hi] *= OUTLIER_FACTOR;
    new[lo] *= OUTLIER_FACTOR;
    graph.with_layer_params(OUTLIER_LAYER, Tensor::new(w.shape().to_vec(), new)?, b.clone())
}

/// Two-layer net whose first conv is 1x1 over two input channels, so each
/// output channel sums only two weights. Used for bias-correction checks.
pub fn small_kernel_fixture(seed: u64) -> Result<NetworkGraph> {
    let mut n = Net::new(vec![1, 2, 4, 4], seed);
    n.conv("sk_conv", "input", 2, 4, 1, 1, Activation::Relu, false);
    n.b.global_avg_pool("gap", "sk_conv");
    n.b.flatten("flatten", "gap");
    n.dense("fc", "flatten", 4, 3, Activation::None, false);
    n.finish("fc")
}
