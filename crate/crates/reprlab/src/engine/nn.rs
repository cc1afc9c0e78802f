//! Network specifications, parameter containers and the forward pass.
//!
//! A [`NetworkSpec`] is a flat layer list (the same representation the
//! experiment config uses). Parameters live in a [`NetworkParams`]: an
//! ordered sequence of named tensors whose layout hash gates every
//! arithmetic pairing of two parameter sets.

use serde::{Deserialize, Serialize};

use crate::engine::graph::{Graph, Var};
use crate::engine::tensor::{ConvGeom, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One layer of a feed-forward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Fully connected. Input is flattened. `out_shape`, when present,
    /// reshapes the output (e.g. a projection feeding a deconvolution
    /// stack); its product must equal `units`.
    Dense {
        units: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        out_shape: Option<Vec<usize>>,
    },
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
    },
    Deconv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
        #[serde(default)]
        output_padding: [usize; 2],
    },
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Softmax,
    BatchNorm {
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
        #[serde(default = "default_bn_epsilon")]
        epsilon: f64,
    },
}

fn default_bn_momentum() -> f64 {
    0.9
}

fn default_bn_epsilon() -> f64 {
    1e-5
}

impl LayerSpec {
    fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Deconv2d { .. } => "deconv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::LeakyRelu { .. } => "leaky-relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Softmax => "softmax",
            LayerSpec::BatchNorm { .. } => "batch-norm",
        }
    }
}

/// A network: named input shape (without the batch axis) plus layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec { input, layers }
    }

    /// Shape after each layer (without batch axis); errors on any
    /// impossible geometry.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let name = format!("l{i}:{}", layer.kind_name());
            cur = match layer {
                LayerSpec::Dense { units, out_shape } => {
                    if let Some(os) = out_shape {
                        let p: usize = os.iter().product();
                        if p != *units {
                            return Err(Error::config(format!(
                                "{name}: out_shape {:?} product {} != units {}",
                                os, p, units
                            )));
                        }
                        os.clone()
                    } else {
                        vec![*units]
                    }
                }
                LayerSpec::Conv2d { filters, kernel, stride, padding } => {
                    let (c, h, w) = chw(&cur, &name)?;
                    let _ = c;
                    if h + 2 * padding[0] < kernel[0] || w + 2 * padding[1] < kernel[1] {
                        return Err(Error::config(format!("{name}: kernel larger than padded input")));
                    }
                    let geom = ConvGeom { stride: (stride[0], stride[1]), pad: (padding[0], padding[1]) };
                    let (ho, wo) = geom.out_hw((h, w), (kernel[0], kernel[1]));
                    vec![*filters, ho, wo]
                }
                LayerSpec::Deconv2d { filters, kernel, stride, padding, output_padding } => {
                    let (_, h, w) = chw(&cur, &name)?;
                    if output_padding[0] >= stride[0] || output_padding[1] >= stride[1] {
                        return Err(Error::config(format!("{name}: output_padding must be < stride")));
                    }
                    let ho = (h - 1) * stride[0] + kernel[0] + output_padding[0];
                    let wo = (w - 1) * stride[1] + kernel[1] + output_padding[1];
                    if ho < 2 * padding[0] || wo < 2 * padding[1] {
                        return Err(Error::config(format!("{name}: padding exceeds output extent")));
                    }
                    vec![*filters, ho - 2 * padding[0], wo - 2 * padding[1]]
                }
                LayerSpec::BatchNorm { .. } => {
                    if cur.is_empty() {
                        return Err(Error::config(format!("{name}: needs a shaped input")));
                    }
                    cur
                }
                LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh => cur,
                LayerSpec::Softmax => {
                    if cur.len() != 1 {
                        return Err(Error::config(format!("{name}: softmax wants a vector input, got {:?}", cur)));
                    }
                    cur
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.last().cloned().unwrap_or_else(|| self.input.clone()))
    }
}

fn chw(shape: &[usize], name: &str) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::config(format!("{name}: wants [C,H,W] input, got {:?}", shape)));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// One named tensor within a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub tensor: Tensor,
    /// Running batch-norm statistics are carried here but never optimised.
    pub trainable: bool,
}

/// Ordered, named parameter vector with a layout hash.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    segments: Vec<Segment>,
}

impl NetworkParams {
    pub fn from_segments(segments: Vec<Segment>) -> Self {
        NetworkParams { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [Segment] {
        &mut self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Hash of (names, shapes). Two parameter sets may be combined
    /// arithmetically iff their layout ids match.
    pub fn layout_id(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for s in &self.segments {
            eat(s.name.as_bytes());
            eat(&[s.trainable as u8]);
            for &d in s.tensor.shape() {
                eat(&(d as u64).to_le_bytes());
            }
        }
        h
    }

    pub fn check_layout(&self, other: &NetworkParams) -> Result<()> {
        if self.layout_id() == other.layout_id() {
            Ok(())
        } else {
            Err(Error::contract("parameter layouts differ"))
        }
    }

    pub fn num_values(&self) -> usize {
        self.segments.iter().map(|s| s.tensor.numel()).sum()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.segments.iter().filter(|s| s.trainable).map(|s| s.tensor.numel()).sum()
    }

    /// Global Euclidean norm over trainable segments.
    pub fn global_norm(&self) -> f64 {
        self.segments
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.tensor.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Flat copy of all trainable values, in segment order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable_values());
        for s in self.segments.iter().filter(|s| s.trainable) {
            out.extend_from_slice(s.tensor.data());
        }
        out
    }
}

/// Truncated-normal weight initialisation: draws outside two standard
/// deviations are re-drawn, not clamped.
pub fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Standard bias initial value.
pub const BIAS_INIT: f64 = 0.01;

/// Fresh parameters for `spec`: weights ~ truncated Normal(0, std), biases
/// at 0.01, batch-norm gamma/beta at 1/0 with zero-mean unit-variance
/// running statistics.
pub fn init_params(spec: &NetworkSpec, init_std: f64, rng: &mut Rng) -> Result<NetworkParams> {
    let shapes = spec.shapes()?;
    let mut segments = Vec::new();
    let mut cur = spec.input.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Dense { units, .. } => {
                let fan_in: usize = cur.iter().product();
                let w: Vec<f64> = (0..fan_in * units).map(|_| truncated_normal(rng, init_std)).collect();
                segments.push(Segment {
                    name: format!("l{i}.w"),
                    tensor: Tensor::new(vec![fan_in, *units], w),
                    trainable: true,
                });
                segments.push(Segment {
                    name: format!("l{i}.b"),
                    tensor: Tensor::full(&[*units], BIAS_INIT),
                    trainable: true,
                });
            }
            LayerSpec::Conv2d { filters, kernel, .. } => {
                let (c, _, _) = chw(&cur, "conv2d")?;
                let n = filters * c * kernel[0] * kernel[1];
                let w: Vec<f64> = (0..n).map(|_| truncated_normal(rng, init_std)).collect();
                segments.push(Segment {
                    name: format!("l{i}.w"),
                    tensor: Tensor::new(vec![*filters, c, kernel[0], kernel[1]], w),
                    trainable: true,
                });
                segments.push(Segment {
                    name: format!("l{i}.b"),
                    tensor: Tensor::full(&[*filters], BIAS_INIT),
                    trainable: true,
                });
            }
            LayerSpec::Deconv2d { filters, kernel, .. } => {
                let (c, _, _) = chw(&cur, "deconv2d")?;
                // Stored as [C_in, C_out, kh, kw]: directly usable as the
                // kernel of the adjoint convolution.
                let n = c * filters * kernel[0] * kernel[1];
                let w: Vec<f64> = (0..n).map(|_| truncated_normal(rng, init_std)).collect();
                segments.push(Segment {
                    name: format!("l{i}.w"),
                    tensor: Tensor::new(vec![c, *filters, kernel[0], kernel[1]], w),
                    trainable: true,
                });
                segments.push(Segment {
                    name: format!("l{i}.b"),
                    tensor: Tensor::full(&[*filters], BIAS_INIT),
                    trainable: true,
                });
            }
            LayerSpec::BatchNorm { .. } => {
                let c = cur[if cur.len() >= 2 { 0 } else { 0 }];
                segments.push(Segment { name: format!("l{i}.gamma"), tensor: Tensor::full(&[c], 1.0), trainable: true });
                segments.push(Segment { name: format!("l{i}.beta"), tensor: Tensor::zeros(&[c]), trainable: true });
                segments.push(Segment { name: format!("l{i}.running_mean"), tensor: Tensor::zeros(&[c]), trainable: false });
                segments.push(Segment { name: format!("l{i}.running_var"), tensor: Tensor::full(&[c], 1.0), trainable: false });
            }
            _ => {}
        }
        cur = shapes[i].clone();
    }
    Ok(NetworkParams { segments })
}

/// Forward mode: batch statistics (training) or running statistics
/// (inference) for batch-norm layers. Always explicit, never global state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Parameters bound into a graph as variables, aligned with the segment
/// order of the `NetworkParams` they came from.
pub struct BoundParams {
    pub vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl BoundParams {
    /// Bind every segment: trainable segments as differentiable leaves,
    /// the rest as constants.
    pub fn bind(graph: &Graph, params: &NetworkParams) -> Self {
        let vars = params
            .segments()
            .iter()
            .map(|s| {
                if s.trainable {
                    graph.leaf(s.tensor.clone())
                } else {
                    graph.constant(s.tensor.clone())
                }
            })
            .collect();
        BoundParams { vars, trainable: params.segments().iter().map(|s| s.trainable).collect() }
    }

    /// Bind every segment as a constant (frozen teacher networks).
    pub fn bind_frozen(graph: &Graph, params: &NetworkParams) -> Self {
        let vars = params.segments().iter().map(|s| graph.constant(s.tensor.clone())).collect();
        BoundParams { vars, trainable: params.segments().iter().map(|s| s.trainable).collect() }
    }

    pub fn trainable_vars(&self) -> Vec<&Var> {
        self.vars.iter().zip(&self.trainable).filter(|(_, &t)| t).map(|(v, _)| v).collect()
    }
}

/// Batch statistics produced by batch-norm layers in training mode,
/// aligned by segment name; the trainer folds them into running stats.
pub struct BnBatchStats {
    pub updates: Vec<(String, Tensor, Tensor, f64)>, // (layer prefix, mean, var, momentum)
}

impl BnBatchStats {
    /// running <- momentum * running + (1 - momentum) * batch.
    pub fn apply(&self, params: &mut NetworkParams) {
        for (prefix, mean, var, momentum) in &self.updates {
            for seg in params.segments_mut() {
                let (stat, is_mean) = if seg.name == format!("{prefix}.running_mean") {
                    (mean, true)
                } else if seg.name == format!("{prefix}.running_var") {
                    (var, false)
                } else {
                    continue;
                };
                let _ = is_mean;
                let updated = seg.tensor.zip(stat, |r, b| momentum * r + (1.0 - momentum) * b);
                seg.tensor = updated;
            }
        }
    }
}

/// Graph forward pass. `input` must be `[N, ...input shape]`. Checks every
/// intermediate for finiteness and names the offending layer on failure.
pub fn forward_graph(
    spec: &NetworkSpec,
    bound: &BoundParams,
    input: &Var,
    mode: Mode,
) -> Result<(Var, BnBatchStats)> {
    let in_shape = input.shape();
    if in_shape.len() < 2 || in_shape[1..] != spec.input[..] {
        return Err(Error::config(format!(
            "input shape {:?} does not match network input {:?}",
            &in_shape[1..],
            spec.input
        )));
    }
    let batch = in_shape[0];
    let mut seg_idx = 0usize;
    let mut x = input.clone();
    let mut bn = BnBatchStats { updates: Vec::new() };

    for (i, layer) in spec.layers.iter().enumerate() {
        let name = format!("l{i}:{}", layer.kind_name());
        match layer {
            LayerSpec::Dense { units, out_shape } => {
                let w = &bound.vars[seg_idx];
                let b = &bound.vars[seg_idx + 1];
                seg_idx += 2;
                let flat_in: usize = x.shape()[1..].iter().product();
                let x2 = if x.shape().len() != 2 { x.reshape(&[batch, flat_in]) } else { x.clone() };
                if w.shape()[0] != flat_in {
                    return Err(Error::config(format!(
                        "{name}: weight expects {} inputs, activation has {}",
                        w.shape()[0],
                        flat_in
                    )));
                }
                let mut y = x2.matmul(w);
                y = y.add(&b.chan_broadcast(&[batch, *units]));
                x = match out_shape {
                    Some(os) => {
                        let mut s = vec![batch];
                        s.extend(os);
                        y.reshape(&s)
                    }
                    None => y,
                };
            }
            LayerSpec::Conv2d { filters, kernel: _, stride, padding } => {
                let w = &bound.vars[seg_idx];
                let b = &bound.vars[seg_idx + 1];
                seg_idx += 2;
                if x.shape().len() != 4 {
                    return Err(Error::config(format!("{name}: wants [N,C,H,W], got {:?}", x.shape())));
                }
                let geom = ConvGeom { stride: (stride[0], stride[1]), pad: (padding[0], padding[1]) };
                let y = x.conv2d(w, geom);
                let mut s = y.shape();
                s[1] = *filters;
                x = y.add(&b.chan_broadcast(&s));
            }
            LayerSpec::Deconv2d { filters, kernel, stride, padding, output_padding } => {
                let w = &bound.vars[seg_idx];
                let b = &bound.vars[seg_idx + 1];
                seg_idx += 2;
                if x.shape().len() != 4 {
                    return Err(Error::config(format!("{name}: wants [N,C,H,W], got {:?}", x.shape())));
                }
                let (h, wd) = (x.shape()[2], x.shape()[3]);
                let ho = (h - 1) * stride[0] + kernel[0] + output_padding[0] - 2 * padding[0];
                let wo = (wd - 1) * stride[1] + kernel[1] + output_padding[1] - 2 * padding[1];
                let geom = ConvGeom { stride: (stride[0], stride[1]), pad: (padding[0], padding[1]) };
                let y = x.conv2d_transposed(w, geom, (ho, wo));
                let s = vec![x.shape()[0], *filters, ho, wo];
                x = y.add(&b.chan_broadcast(&s));
            }
            LayerSpec::Relu => x = x.relu(),
            LayerSpec::LeakyRelu { slope } => x = x.leaky_relu(*slope),
            LayerSpec::Tanh => x = x.tanh(),
            LayerSpec::Softmax => x = softmax_rows(&x),
            LayerSpec::BatchNorm { momentum, epsilon } => {
                let gamma = &bound.vars[seg_idx];
                let beta = &bound.vars[seg_idx + 1];
                let run_mean = &bound.vars[seg_idx + 2];
                let run_var = &bound.vars[seg_idx + 3];
                seg_idx += 4;
                let shape = x.shape();
                let m: usize = shape.iter().product::<usize>() / shape[1];
                match mode {
                    Mode::Train => {
                        let mean = x.chan_sum().scale(1.0 / m as f64);
                        let centered = x.sub(&mean.chan_broadcast(&shape));
                        let var = centered.square().chan_sum().scale(1.0 / m as f64);
                        let denom = var.add_scalar(*epsilon).sqrt().chan_broadcast(&shape);
                        let norm = centered.div(&denom);
                        x = norm.mul(&gamma.chan_broadcast(&shape)).add(&beta.chan_broadcast(&shape));
                        bn.updates.push((format!("l{i}"), mean.value(), var.value(), *momentum));
                    }
                    Mode::Infer => {
                        let centered = x.sub(&run_mean.chan_broadcast(&shape));
                        let denom = run_var.add_scalar(*epsilon).sqrt().chan_broadcast(&shape);
                        let norm = centered.div(&denom);
                        x = norm.mul(&gamma.chan_broadcast(&shape)).add(&beta.chan_broadcast(&shape));
                    }
                }
            }
        }
        x.value().check_finite(&name)?;
    }
    Ok((x, bn))
}

/// Row-wise numerically-stabilised softmax of `[N,A]`. The row maximum is
/// treated as a constant shift, which leaves gradients exact.
pub fn softmax_rows(x: &Var) -> Var {
    log_softmax_rows(x).exp()
}

/// Row-wise log-softmax of `[N,A]`.
pub fn log_softmax_rows(x: &Var) -> Var {
    let t = x.value();
    let n = t.shape()[0];
    let maxes: Vec<f64> = (0..n).map(|r| t.max_row(r)).collect();
    let shift = x.graph().constant(Tensor::from_vec(maxes)).row_broadcast(&x.shape());
    let shifted = x.sub(&shift);
    let lse = shifted.exp().row_sum().ln().row_broadcast(&x.shape());
    shifted.sub(&lse)
}

/// Plain inference: build a throwaway graph, run in the given mode,
/// discard batch statistics.
pub fn forward_tensor(spec: &NetworkSpec, params: &NetworkParams, input: &Tensor, mode: Mode) -> Result<Tensor> {
    let g = Graph::new();
    let bound = BoundParams::bind_frozen(&g, params);
    let x = g.constant(input.clone());
    let (out, _) = forward_graph(spec, &bound, &x, mode)?;
    Ok(out.value())
}

/// Gradients re-wrapped in the parameter layout: trainable segments carry
/// their gradients, non-trainable segments carry zeros.
pub fn grads_as_params(params: &NetworkParams, bound: &BoundParams, loss: &Var) -> Result<NetworkParams> {
    let trainable: Vec<&Var> = bound.trainable_vars();
    let grads = crate::engine::graph::backward(loss, &trainable)?;
    let mut gi = 0usize;
    let segments = params
        .segments()
        .iter()
        .map(|s| {
            let tensor = if s.trainable {
                let t = grads[gi].value();
                gi += 1;
                t
            } else {
                Tensor::zeros(s.tensor.shape())
            };
            Segment { name: s.name.clone(), tensor, trainable: s.trainable }
        })
        .collect();
    Ok(NetworkParams::from_segments(segments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn dense_net(input: usize, out: usize) -> NetworkSpec {
        NetworkSpec::new(vec![input], vec![LayerSpec::Dense { units: out, out_shape: None }])
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let spec = dense_net(3, 3);
        let mut params = init_params(&spec, 0.01, &mut SeedStream::new(0).rng()).unwrap();
        // weights = identity, bias = 0
        params.segments_mut()[0].tensor =
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        params.segments_mut()[1].tensor = Tensor::zeros(&[3]);
        let v = Tensor::new(vec![1, 3], vec![0.5, -1.5, 2.0]);
        let out = forward_tensor(&spec, &params, &v, Mode::Infer).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn leaky_relu_matches_paper_leakage() {
        let spec = NetworkSpec::new(vec![1], vec![LayerSpec::LeakyRelu { slope: 0.2 }]);
        let params = init_params(&spec, 0.01, &mut SeedStream::new(0).rng()).unwrap();
        let out = forward_tensor(&spec, &params, &Tensor::new(vec![1, 1], vec![-1.0]), Mode::Infer).unwrap();
        assert_eq!(out.data(), &[-0.2]);
    }

    /// Straight-line (loop-based, non-graph) reimplementation of a 2-layer
    /// net agrees with the graph forward to 1e-10.
    #[test]
    fn two_layer_forward_matches_straight_line_oracle() {
        use rand::Rng as _;
        let spec = NetworkSpec::new(
            vec![4],
            vec![
                LayerSpec::Dense { units: 5, out_shape: None },
                LayerSpec::Tanh,
                LayerSpec::Dense { units: 3, out_shape: None },
            ],
        );
        let mut rng = SeedStream::new(11).rng();
        let params = init_params(&spec, 0.5, &mut rng).unwrap();
        let input: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = forward_tensor(&spec, &params, &Tensor::new(vec![1, 4], input.clone()), Mode::Infer).unwrap();

        let w0 = params.segment("l0.w").unwrap().tensor.clone();
        let b0 = params.segment("l0.b").unwrap().tensor.clone();
        let w2 = params.segment("l2.w").unwrap().tensor.clone();
        let b2 = params.segment("l2.b").unwrap().tensor.clone();
        let mut hidden = vec![0.0; 5];
        for j in 0..5 {
            let mut acc = b0.data()[j];
            for (i, &x) in input.iter().enumerate() {
                acc += x * w0.data()[i * 5 + j];
            }
            hidden[j] = acc.tanh();
        }
        let mut expect = vec![0.0; 3];
        for j in 0..3 {
            let mut acc = b2.data()[j];
            for (i, &h) in hidden.iter().enumerate() {
                acc += h * w2.data()[i * 3 + j];
            }
            expect[j] = acc;
        }
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "graph {} vs oracle {}", a, b);
        }
    }

    #[test]
    fn truncated_init_respects_bounds() {
        let spec = dense_net(50, 40);
        let params = init_params(&spec, 0.01, &mut SeedStream::new(5).rng()).unwrap();
        let w = &params.segments()[0].tensor;
        assert!(w.data().iter().all(|v| v.abs() <= 0.02 + 1e-12));
        assert!(w.data().iter().any(|v| *v != 0.0));
        let b = &params.segments()[1].tensor;
        assert!(b.data().iter().all(|&v| v == BIAS_INIT));
    }

    #[test]
    fn layout_ids_gate_compatibility() {
        let a = init_params(&dense_net(3, 2), 0.01, &mut SeedStream::new(0).rng()).unwrap();
        let b = init_params(&dense_net(3, 2), 0.01, &mut SeedStream::new(9).rng()).unwrap();
        let c = init_params(&dense_net(4, 2), 0.01, &mut SeedStream::new(0).rng()).unwrap();
        assert_eq!(a.layout_id(), b.layout_id());
        assert_ne!(a.layout_id(), c.layout_id());
        assert!(a.check_layout(&c).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let spec = dense_net(3, 2);
        let params = init_params(&spec, 0.01, &mut SeedStream::new(0).rng()).unwrap();
        let err = forward_tensor(&spec, &params, &Tensor::new(vec![1, 4], vec![0.0; 4]), Mode::Infer).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_finite_intermediate_names_the_layer() {
        let spec = NetworkSpec::new(vec![1], vec![LayerSpec::Dense { units: 1, out_shape: None }]);
        let mut params = init_params(&spec, 0.01, &mut SeedStream::new(0).rng()).unwrap();
        params.segments_mut()[0].tensor = Tensor::new(vec![1, 1], vec![f64::INFINITY]);
        let err = forward_tensor(&spec, &params, &Tensor::new(vec![1, 1], vec![1.0]), Mode::Infer).unwrap_err();
        match err {
            Error::Numeric { at, .. } => assert!(at.contains("l0:dense"), "got {at}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn batch_norm_train_normalises_batch() {
        let spec = NetworkSpec::new(vec![2], vec![LayerSpec::BatchNorm { momentum: 0.9, epsilon: 1e-5 }]);
        let params = init_params(&spec, 0.01, &mut SeedStream::new(0).rng()).unwrap();
        let x = Tensor::new(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &params);
        let (out, _) = forward_graph(&spec, &bound, &g.constant(x), Mode::Train).unwrap();
        let o = out.value();
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| o.data()[r * 2 + c]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3); // epsilon slightly shrinks it
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let s = softmax_rows(&x).value();
        for r in 0..2 {
            let sum: f64 = s.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
