//! Static layer graph with explicit forward and backward passes.
//!
//! Architectures are built once as a topologically ordered node list; the
//! weight tensors live outside the graph in a named map so that masking,
//! checkpointing and optimizers can treat them uniformly.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array4, ArrayD, Ix2, Ix4};

use super::ops::{self, ConvShape};
use crate::error::{Error, Result};

pub type TensorMap = IndexMap<String, ArrayD<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or fully-connected weight; subject to pruning masks.
    PrunableWeight,
    Bias,
    BnGamma,
    BnBeta,
    /// Running statistics: state, not trained by gradient descent.
    BnRunningMean,
    BnRunningVar,
}

#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        running_mean: usize,
        running_var: usize,
    },
    Relu {
        input: usize,
    },
    MaxPool {
        input: usize,
        size: usize,
        stride: usize,
    },
    GlobalAvgPool {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
}

/// A feed-forward network: nodes in topological order, parameters by index.
#[derive(Debug, Clone)]
pub struct Network {
    pub nodes: Vec<Op>,
    pub params: Vec<ParamDef>,
    /// (C, H, W) of a single input image.
    pub input_shape: (usize, usize, usize),
}

impl Network {
    /// Ordered names of mask-eligible weight tensors (conv + linear weights).
    pub fn prunable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::PrunableWeight)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Ordered names of gradient-trained tensors (everything except running stats).
    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| !matches!(p.kind, ParamKind::BnRunningMean | ParamKind::BnRunningVar))
            .map(|p| p.name.clone())
            .collect()
    }

    /// Index of the last convolution node, if any.
    pub fn last_conv_node(&self) -> Option<usize> {
        self.nodes
            .iter()
            .enumerate()
            .rev()
            .find_map(|(i, op)| matches!(op, Op::Conv2d { .. }).then_some(i))
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !matches!(p.kind, ParamKind::BnRunningMean | ParamKind::BnRunningVar))
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    fn resolve<'w>(&self, weights: &'w TensorMap) -> Result<Vec<&'w ArrayD<f64>>> {
        self.params
            .iter()
            .map(|p| {
                let t = weights
                    .get(&p.name)
                    .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor `{}`", p.name)))?;
                if t.shape() != p.shape.as_slice() {
                    return Err(Error::ShapeMismatch(format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.shape
                    )));
                }
                Ok(t)
            })
            .collect()
    }
}

/// Per-node data kept by the forward pass for use in backward.
pub enum NodeAux {
    None,
    MaxPool { idx: Vec<u32> },
    Bn { mean: Array1<f64>, var: Array1<f64> },
}

/// Activations may be image-shaped (N,C,H,W) or flat (N,D).
#[derive(Clone)]
pub enum Act {
    Image(Array4<f64>),
    Flat(Array2<f64>),
}

impl Act {
    pub fn image(&self) -> &Array4<f64> {
        match self {
            Act::Image(a) => a,
            Act::Flat(_) => panic!("expected image activation"),
        }
    }
    pub fn flat(&self) -> &Array2<f64> {
        match self {
            Act::Flat(a) => a,
            Act::Image(_) => panic!("expected flat activation"),
        }
    }
}

pub struct ForwardTrace {
    pub acts: Vec<Act>,
    pub aux: Vec<NodeAux>,
    /// Batch statistics per BatchNorm node (training mode only), keyed by the
    /// running-stat tensor names; committed by the caller.
    pub bn_batch_stats: Vec<(String, Array1<f64>, String, Array1<f64>)>,
}

impl ForwardTrace {
    /// Logits of the final node.
    pub fn logits(&self) -> &Array2<f64> {
        self.acts.last().expect("non-empty network").flat()
    }
}

#[derive(Default)]
pub struct ForwardOpts {
    /// Batch norm uses batch statistics (and reports updates) when true.
    pub training: bool,
    /// Multiply the output of node `.0` by a per-channel mask (defense hook).
    pub channel_mask: Option<(usize, Array1<f64>)>,
}

pub struct BackwardResult {
    /// Gradients for every trainable tensor, aligned with `trainable_names`.
    pub param_grads: TensorMap,
    /// Gradient with respect to the input batch.
    pub input_grad: Array4<f64>,
    /// Gradient at the probe node, if one was requested.
    pub probe_grad: Option<Array4<f64>>,
}

/// Run the network on a batch. `weights` must contain every tensor named by
/// the graph with matching shapes.
pub fn forward(
    net: &Network,
    weights: &TensorMap,
    x: &Array4<f64>,
    opts: &ForwardOpts,
) -> Result<ForwardTrace> {
    let p = net.resolve(weights)?;
    let (c, h, w) = net.input_shape;
    if x.dim().1 != c || x.dim().2 != h || x.dim().3 != w {
        return Err(Error::ShapeMismatch(format!(
            "input batch {:?} does not match model input ({c}, {h}, {w})",
            x.dim()
        )));
    }

    let mut acts: Vec<Act> = Vec::with_capacity(net.nodes.len());
    let mut aux: Vec<NodeAux> = Vec::with_capacity(net.nodes.len());
    let mut bn_batch_stats = Vec::new();

    for (i, op) in net.nodes.iter().enumerate() {
        let (act, ax) = match op {
            Op::Input => (Act::Image(x.clone()), NodeAux::None),
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let xin = acts[*input].image();
                let wt = p[*weight];
                let oc = wt.shape()[0];
                let flat = wt
                    .view()
                    .into_shape_with_order((oc, wt.len() / oc))
                    .unwrap();
                let b = bias.map(|bi| {
                    p[bi].view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned()
                });
                let cs = ConvShape { kernel: wt.shape()[2], stride: *stride, pad: *pad };
                let y = ops::conv2d_forward(&xin.view(), &flat, b.as_ref(), &cs);
                (Act::Image(y), NodeAux::None)
            }
            Op::BatchNorm { input, gamma, beta, running_mean, running_var } => {
                let xin = acts[*input].image();
                let g = to_vec1(p[*gamma]);
                let b = to_vec1(p[*beta]);
                let rm = to_vec1(p[*running_mean]);
                let rv = to_vec1(p[*running_var]);
                let out = ops::batchnorm_forward(&xin.view(), &g, &b, &rm, &rv, opts.training);
                if opts.training {
                    bn_batch_stats.push((
                        net.params[*running_mean].name.clone(),
                        out.mean.clone(),
                        net.params[*running_var].name.clone(),
                        out.var.clone(),
                    ));
                }
                (Act::Image(out.y), NodeAux::Bn { mean: out.mean, var: out.var })
            }
            Op::Relu { input } => {
                let y = match &acts[*input] {
                    Act::Image(a) => Act::Image(a.mapv(|v| v.max(0.0))),
                    Act::Flat(a) => Act::Flat(a.mapv(|v| v.max(0.0))),
                };
                (y, NodeAux::None)
            }
            Op::MaxPool { input, size, stride } => {
                let xin = acts[*input].image();
                let (y, idx) = ops::maxpool_forward(&xin.view(), *size, *stride);
                (Act::Image(y), NodeAux::MaxPool { idx })
            }
            Op::GlobalAvgPool { input } => {
                let xin = acts[*input].image();
                let (n, c, h, w) = xin.dim();
                let mut y = Array2::<f64>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        y[(ni, ci)] =
                            xin.slice(ndarray::s![ni, ci, .., ..]).sum() / (h * w) as f64;
                    }
                }
                (Act::Flat(y), NodeAux::None)
            }
            Op::Linear { input, weight, bias } => {
                let xin = acts[*input].flat();
                let wt = p[*weight].view().into_dimensionality::<Ix2>().unwrap();
                let b = to_vec1(p[*bias]);
                (Act::Flat(ops::linear_forward(&xin.view(), &wt, &b)), NodeAux::None)
            }
            Op::Add { lhs, rhs } => {
                let y = acts[*lhs].image() + acts[*rhs].image();
                (Act::Image(y), NodeAux::None)
            }
        };
        let act = match (&opts.channel_mask, act) {
            (Some((node, mask)), Act::Image(mut a)) if *node == i => {
                for (ci, &m) in mask.iter().enumerate() {
                    let mut ch = a.slice_mut(ndarray::s![.., ci, .., ..]);
                    ch *= m;
                }
                Act::Image(a)
            }
            (_, act) => act,
        };
        acts.push(act);
        aux.push(ax);
    }

    Ok(ForwardTrace { acts, aux, bn_batch_stats })
}

/// Backpropagate `dlogits` through a recorded forward pass.
///
/// `training` must match the forward call so batch-norm gradients use the
/// same statistics. `probe_node` optionally captures the gradient flowing
/// into that node's output (used by attention-map inspection).
pub fn backward(
    net: &Network,
    weights: &TensorMap,
    trace: &ForwardTrace,
    dlogits: &Array2<f64>,
    training: bool,
    probe_node: Option<usize>,
) -> Result<BackwardResult> {
    let p = net.resolve(weights)?;
    let n_nodes = net.nodes.len();
    let mut grads: Vec<Option<Act>> = vec![None; n_nodes];
    grads[n_nodes - 1] = Some(Act::Flat(dlogits.clone()));

    let mut param_grads: TensorMap = IndexMap::new();
    for def in &net.params {
        if !matches!(def.kind, ParamKind::BnRunningMean | ParamKind::BnRunningVar) {
            param_grads.insert(def.name.clone(), ArrayD::zeros(def.shape.clone()));
        }
    }
    let mut input_grad: Option<Array4<f64>> = None;
    let mut probe_grad: Option<Array4<f64>> = None;

    fn add_image(slot: &mut Option<Act>, g: Array4<f64>) {
        match slot {
            Some(Act::Image(acc)) => *acc += &g,
            None => *slot = Some(Act::Image(g)),
            Some(Act::Flat(_)) => panic!("mixed activation kinds in gradient"),
        }
    }
    fn add_flat(slot: &mut Option<Act>, g: Array2<f64>) {
        match slot {
            Some(Act::Flat(acc)) => *acc += &g,
            None => *slot = Some(Act::Flat(g)),
            Some(Act::Image(_)) => panic!("mixed activation kinds in gradient"),
        }
    }

    for i in (0..n_nodes).rev() {
        let Some(grad) = grads[i].take() else { continue };
        if probe_node == Some(i) {
            probe_grad = Some(grad.image().clone());
        }
        match &net.nodes[i] {
            Op::Input => {
                input_grad = Some(grad.image().clone());
            }
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let dout = grad.image();
                let xin = trace.acts[*input].image();
                let wt = p[*weight];
                let oc = wt.shape()[0];
                let flat = wt.view().into_shape_with_order((oc, wt.len() / oc)).unwrap();
                let cs = ConvShape { kernel: wt.shape()[2], stride: *stride, pad: *pad };
                let g = ops::conv2d_backward(&xin.view(), &flat, bias.is_some(), &cs, &dout.view());
                let dweight = g
                    .dweight
                    .into_shape_with_order(wt.shape().to_vec())
                    .expect("conv grad reshapes to weight shape");
                accumulate(&mut param_grads, &net.params[*weight].name, dweight);
                if let (Some(bi), Some(db)) = (bias, g.dbias) {
                    accumulate(&mut param_grads, &net.params[*bi].name, db.into_dyn());
                }
                add_image(&mut grads[*input], g.dx);
            }
            Op::BatchNorm { input, gamma, beta, .. } => {
                let dout = grad.image();
                let xin = trace.acts[*input].image();
                let NodeAux::Bn { mean, var } = &trace.aux[i] else {
                    unreachable!("bn node without aux")
                };
                let g = ops::batchnorm_backward(
                    &xin.view(),
                    &to_vec1(p[*gamma]),
                    mean,
                    var,
                    training,
                    &dout.view(),
                );
                accumulate(&mut param_grads, &net.params[*gamma].name, g.dgamma.into_dyn());
                accumulate(&mut param_grads, &net.params[*beta].name, g.dbeta.into_dyn());
                add_image(&mut grads[*input], g.dx);
            }
            Op::Relu { input } => match (&grad, &trace.acts[*input]) {
                (Act::Image(d), Act::Image(xin)) => {
                    let dx = ndarray::Zip::from(d)
                        .and(xin)
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    add_image(&mut grads[*input], dx);
                }
                (Act::Flat(d), Act::Flat(xin)) => {
                    let dx = ndarray::Zip::from(d)
                        .and(xin)
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    add_flat(&mut grads[*input], dx);
                }
                _ => unreachable!("relu input/grad kind mismatch"),
            },
            Op::MaxPool { input, .. } => {
                let NodeAux::MaxPool { idx } = &trace.aux[i] else {
                    unreachable!("maxpool node without aux")
                };
                let xin = trace.acts[*input].image();
                let dx = ops::maxpool_backward(&grad.image().view(), idx, xin.dim());
                add_image(&mut grads[*input], dx);
            }
            Op::GlobalAvgPool { input } => {
                let d = grad.flat();
                let xin = trace.acts[*input].image();
                let (n, c, h, w) = xin.dim();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let scale = 1.0 / (h * w) as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(d[(ni, ci)] * scale);
                    }
                }
                add_image(&mut grads[*input], dx);
            }
            Op::Linear { input, weight, bias } => {
                let d = grad.flat();
                let xin = trace.acts[*input].flat();
                let wt = p[*weight].view().into_dimensionality::<Ix2>().unwrap();
                let g = ops::linear_backward(&xin.view(), &wt, &d.view());
                accumulate(&mut param_grads, &net.params[*weight].name, g.dweight.into_dyn());
                accumulate(&mut param_grads, &net.params[*bias].name, g.dbias.into_dyn());
                add_flat(&mut grads[*input], g.dx);
            }
            Op::Add { lhs, rhs } => {
                let d = grad.image();
                add_image(&mut grads[*lhs], d.clone());
                add_image(&mut grads[*rhs], d.clone());
            }
        }
    }

    Ok(BackwardResult {
        param_grads,
        input_grad: input_grad.expect("network without input node"),
        probe_grad,
    })
}

fn accumulate(grads: &mut TensorMap, name: &str, g: ArrayD<f64>) {
    let slot = grads.get_mut(name).expect("grad slot exists for trainable param");
    *slot += &g;
}

fn to_vec1(t: &ArrayD<f64>) -> Array1<f64> {
    t.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned()
}

/// Incremental construction of a [`Network`]: each helper appends a node
/// (and its parameter definitions) and returns the node id for wiring.
pub struct NetworkBuilder {
    nodes: Vec<Op>,
    params: Vec<ParamDef>,
    input_shape: (usize, usize, usize),
}

impl NetworkBuilder {
    /// Start a graph whose input node (id 0) takes (C, H, W) images.
    pub fn new(input_shape: (usize, usize, usize)) -> Self {
        NetworkBuilder { nodes: vec![Op::Input], params: Vec::new(), input_shape }
    }

    fn param(&mut self, name: &str, shape: Vec<usize>, kind: ParamKind) -> usize {
        self.params.push(ParamDef { name: name.to_string(), shape, kind });
        self.params.len() - 1
    }

    pub fn conv(
        &mut self,
        input: usize,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> usize {
        let w = self.param(
            &format!("{name}.weight"),
            vec![out_c, in_c, k, k],
            ParamKind::PrunableWeight,
        );
        self.nodes.push(Op::Conv2d { input, weight: w, bias: None, stride, pad });
        self.nodes.len() - 1
    }

    pub fn bn(&mut self, input: usize, name: &str, c: usize) -> usize {
        let gamma = self.param(&format!("{name}.gamma"), vec![c], ParamKind::BnGamma);
        let beta = self.param(&format!("{name}.beta"), vec![c], ParamKind::BnBeta);
        let rm = self.param(&format!("{name}.running_mean"), vec![c], ParamKind::BnRunningMean);
        let rv = self.param(&format!("{name}.running_var"), vec![c], ParamKind::BnRunningVar);
        self.nodes.push(Op::BatchNorm { input, gamma, beta, running_mean: rm, running_var: rv });
        self.nodes.len() - 1
    }

    pub fn relu(&mut self, input: usize) -> usize {
        self.nodes.push(Op::Relu { input });
        self.nodes.len() - 1
    }

    pub fn maxpool(&mut self, input: usize, size: usize, stride: usize) -> usize {
        self.nodes.push(Op::MaxPool { input, size, stride });
        self.nodes.len() - 1
    }

    pub fn gap(&mut self, input: usize) -> usize {
        self.nodes.push(Op::GlobalAvgPool { input });
        self.nodes.len() - 1
    }

    pub fn linear(&mut self, input: usize, name: &str, in_d: usize, out_d: usize) -> usize {
        let w = self.param(
            &format!("{name}.weight"),
            vec![out_d, in_d],
            ParamKind::PrunableWeight,
        );
        let b = self.param(&format!("{name}.bias"), vec![out_d], ParamKind::Bias);
        self.nodes.push(Op::Linear { input, weight: w, bias: b });
        self.nodes.len() - 1
    }

    pub fn add(&mut self, lhs: usize, rhs: usize) -> usize {
        self.nodes.push(Op::Add { lhs, rhs });
        self.nodes.len() - 1
    }

    pub fn finish(self) -> Network {
        Network { nodes: self.nodes, params: self.params, input_shape: self.input_shape }
    }
}

/// Commit batch-norm running statistics recorded by a training-mode forward.
pub fn commit_bn_stats(weights: &mut TensorMap, trace: &ForwardTrace, momentum: f64) {
    for (mean_name, mean, var_name, var) in &trace.bn_batch_stats {
        let rm = weights.get_mut(mean_name).expect("running mean tensor");
        *rm *= 1.0 - momentum;
        *rm += &(mean.clone() * momentum).into_dyn();
        let rv = weights.get_mut(var_name).expect("running var tensor");
        *rv *= 1.0 - momentum;
        *rv += &(var.clone() * momentum).into_dyn();
    }
}

/// Cumulative-average commit for statistics recalibration: after `i`
/// previous commits, the new batch gets weight 1/(i+1), so `k` commits
/// leave the plain mean of the `k` batch statistics (the initial values
/// are wiped by the first commit).
pub fn commit_bn_stats_cumulative(weights: &mut TensorMap, trace: &ForwardTrace, i: usize) {
    let momentum = 1.0 / (i as f64 + 1.0);
    commit_bn_stats(weights, trace, momentum);
}

/// Convenience: strongly-typed image view of an input batch gradient.
pub fn as_image(a: &ArrayD<f64>) -> Array4<f64> {
    a.view().into_dimensionality::<Ix4>().unwrap().to_owned()
}
