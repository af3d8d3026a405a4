//! Runs a compiled graph against a weight store: forward classification and one SGD
//! training step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{ComputeGraph, LayerOp};
use crate::tensor::{sgd_nesterov_step, BatchStats, BnMode, Tape, Tensor, TensorError, Var};
use crate::weights::{Part, WeightError, WeightKey, WeightStore};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error("input batch {got:?} does not match graph input (N, {expected:?})")]
    InputShape { expected: [usize; 3], got: Vec<usize> },
    #[error("{labels} labels for a batch of {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error("non-finite {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, ExecError>;

/// Optimizer settings for [`ChildModel::train_step`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Weight of the old value in running BN statistics.
    pub bn_momentum: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, grad_clip: 5.0, bn_momentum: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
}

/// Recorded forward pass.
pub struct Trace {
    pub tape: Tape,
    /// Value of every graph layer.
    pub values: Vec<Var>,
    /// One tape leaf per distinct weight key.
    pub params: BTreeMap<WeightKey, Var>,
    /// Batch statistics per BN application, keyed by the running-mean key.
    pub bn_stats: Vec<(WeightKey, BatchStats)>,
}

impl Trace {
    pub fn logits(&self) -> Var {
        *self.values.last().expect("graph has layers")
    }
}

fn param(
    tape: &mut Tape,
    params: &mut BTreeMap<WeightKey, Var>,
    store: &WeightStore,
    key: &WeightKey,
    track: bool,
) -> Result<Var> {
    if let Some(v) = params.get(key) {
        return Ok(*v);
    }
    let t = store.require(key)?.clone();
    let v = if track { tape.param(t) } else { tape.constant(t) };
    params.insert(*key, v);
    Ok(v)
}

/// Evaluates `graph` on a (N, C, H, W) batch. With `track`, weights are recorded as
/// differentiable leaves.
pub fn trace(graph: &ComputeGraph, store: &WeightStore, input: &Tensor, mode: BnMode, track: bool) -> Result<Trace> {
    let expected = graph.config.input_shape;
    if input.shape().len() != 4 || input.shape()[1..] != expected {
        return Err(ExecError::InputShape { expected, got: input.shape().to_vec() });
    }
    let mut tape = Tape::new();
    let mut params = BTreeMap::new();
    let mut values: Vec<Var> = Vec::with_capacity(graph.layers.len());
    let mut bn_stats = Vec::new();
    for layer in &graph.layers {
        let x = |i: usize| values[layer.inputs[i]];
        let mut p = |tape: &mut Tape, i: usize| param(tape, &mut params, store, &layer.weights[i], track);
        let out = match layer.op {
            LayerOp::Input => tape.constant(input.clone()),
            LayerOp::Conv { stride, .. } => {
                let w = if layer.weights.len() == 1 {
                    p(&mut tape, 0)?
                } else {
                    let blocks = (0..layer.weights.len()).map(|i| p(&mut tape, i)).collect::<Result<Vec<_>>>()?;
                    tape.concat(&blocks)?
                };
                tape.conv2d(x(0), w, stride)?
            }
            LayerOp::BatchNorm => {
                let (g, b) = (p(&mut tape, 0)?, p(&mut tape, 1)?);
                let (y, stats) = batch_norm(&mut tape, store, x(0), g, b, &layer.weights[2..4], mode)?;
                if let Some(s) = stats {
                    bn_stats.push((layer.weights[2], s));
                }
                y
            }
            LayerOp::SepConv { stride, .. } => {
                let r = tape.relu(x(0));
                let dw = p(&mut tape, 0)?;
                let d = tape.depthwise_conv2d(r, dw, stride)?;
                let pw = p(&mut tape, 1)?;
                let c = tape.conv2d(d, pw, 1)?;
                let (g, b) = (p(&mut tape, 2)?, p(&mut tape, 3)?);
                let (y, stats) = batch_norm(&mut tape, store, c, g, b, &layer.weights[4..6], mode)?;
                if let Some(s) = stats {
                    bn_stats.push((layer.weights[4], s));
                }
                y
            }
            LayerOp::Relu => tape.relu(x(0)),
            LayerOp::MaxPool { stride } => tape.max_pool(x(0), 3, stride)?,
            LayerOp::AvgPool { stride } => tape.avg_pool(x(0), 3, stride)?,
            LayerOp::Identity => tape.identity(x(0)),
            LayerOp::Add => tape.add(x(0), x(1))?,
            LayerOp::Concat => {
                let parts: Vec<Var> = layer.inputs.iter().map(|&i| values[i]).collect();
                tape.concat(&parts)?
            }
            LayerOp::GlobalAvgPool => tape.global_avg_pool(x(0))?,
            LayerOp::Affine => {
                let (w, b) = (p(&mut tape, 0)?, p(&mut tape, 1)?);
                tape.affine(x(0), w, Some(b))?
            }
        };
        values.push(out);
    }
    Ok(Trace { tape, values, params, bn_stats })
}

fn batch_norm(
    tape: &mut Tape,
    store: &WeightStore,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &[WeightKey],
    mode: BnMode,
) -> Result<(Var, Option<BatchStats>)> {
    let mean = store.require(&running[0])?.data();
    let var = store.require(&running[1])?.data();
    Ok(tape.batch_norm(x, gamma, beta, Some((mean, var)), mode, BN_EPS)?)
}

/// Logits (N, classes) without recording gradients.
pub fn forward_classify(graph: &ComputeGraph, store: &WeightStore, input: &Tensor, mode: BnMode) -> Result<Tensor> {
    let t = trace(graph, store, input, mode, false)?;
    let v = t.tape.value(t.logits());
    Ok(Tensor::new(v.shape().to_vec(), v.data().to_vec())?)
}

/// Fraction of rows of `logits` whose arg-max equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits.data().chunks(k).zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A graph bound to a store whose keys it has initialized.
pub struct ChildModel<'a> {
    graph: &'a ComputeGraph,
    store: &'a mut WeightStore,
}

/// Initializes every key of `graph` that the store lacks and binds the two.
pub fn activate<'a>(store: &'a mut WeightStore, graph: &'a ComputeGraph) -> Result<ChildModel<'a>> {
    for (key, spec) in &graph.params {
        store.get_or_init(key, spec)?;
    }
    Ok(ChildModel { graph, store })
}

impl<'a> ChildModel<'a> {
    pub fn graph(&self) -> &ComputeGraph {
        self.graph
    }

    pub fn store(&self) -> &WeightStore {
        self.store
    }

    pub fn forward(&self, input: &Tensor, mode: BnMode) -> Result<Tensor> {
        forward_classify(self.graph, self.store, input, mode)
    }

    /// Mean cross-entropy loss and accuracy on one batch.
    pub fn evaluate(&self, input: &Tensor, labels: &[usize], mode: BnMode) -> Result<(f64, f64)> {
        let logits = self.forward(input, mode)?;
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let loss = tape.softmax_cross_entropy(l, labels)?;
        Ok((tape.data(loss)[0], accuracy(&logits, labels)))
    }

    /// Loss and gradient for every trainable key, without updating anything.
    pub fn gradients(&self, input: &Tensor, labels: &[usize]) -> Result<(f64, BTreeMap<WeightKey, Vec<f64>>)> {
        let (loss, grads, _, _) = self.backprop(input, labels)?;
        Ok((loss, grads))
    }

    #[allow(clippy::type_complexity)]
    fn backprop(
        &self,
        input: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, BTreeMap<WeightKey, Vec<f64>>, Vec<(WeightKey, BatchStats)>, Tensor)> {
        let n = input.shape().first().copied().unwrap_or(0);
        if labels.len() != n {
            return Err(ExecError::LabelCount { labels: labels.len(), batch: n });
        }
        let mut t = trace(self.graph, self.store, input, BnMode::Train, true)?;
        let logits = t.logits();
        let loss = t.tape.softmax_cross_entropy(logits, labels)?;
        t.tape.backward(loss)?;
        let loss_value = t.tape.data(loss)[0];
        let mut grads = BTreeMap::new();
        for (key, var) in &t.params {
            if key.part.is_trainable() {
                let g = t.tape.grad(*var).expect("tracked parameter has a gradient").to_vec();
                grads.insert(*key, g);
            }
        }
        let lv = t.tape.value(logits);
        let logits = Tensor::new(lv.shape().to_vec(), lv.data().to_vec())?;
        Ok((loss_value, grads, t.bn_stats, logits))
    }

    /// One Nesterov SGD step on a batch. Updates only this graph's keys; a non-finite
    /// loss or gradient aborts before any mutation.
    pub fn train_step(&mut self, input: &Tensor, labels: &[usize], cfg: &StepConfig) -> Result<StepStats> {
        let (loss, mut grads, bn_stats, logits) = self.backprop(input, labels)?;
        if !loss.is_finite() {
            return Err(ExecError::NonFinite(format!("training loss {loss}")));
        }
        for (k, g) in &grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(ExecError::NonFinite(format!("gradient for {k}")));
            }
        }
        let norm = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
        }
        for (k, g) in &grads {
            let (value, velocity) = self.store.slot_mut(k)?;
            sgd_nesterov_step(value, g, velocity, cfg.lr, cfg.momentum)?;
        }
        let m = cfg.bn_momentum;
        for (mean_key, stats) in bn_stats {
            for (key, batch) in [(mean_key, &stats.mean), (mean_key.with_part(Part::RunningVar), &stats.var)] {
                let run = self.store.data_mut(&key)?;
                run.iter_mut().zip(batch).for_each(|(r, b)| *r = m * *r + (1.0 - m) * b);
            }
        }
        Ok(StepStats { loss, accuracy: accuracy(&logits, labels), grad_norm: norm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::{build_graph, ArchConfig};
    use crate::cell::{CellSpec, Genotype, NodeSpec, OpKind};

    fn small() -> (ComputeGraph, Tensor, Vec<usize>) {
        let cell = CellSpec::new(vec![
            NodeSpec::new(0, OpKind::SepConv3x3, 1, OpKind::MaxPool3x3),
            NodeSpec::new(2, OpKind::SkipConnect, 0, OpKind::AvgPool3x3),
        ]);
        let g = Genotype { conv_cell: cell.clone(), enh_cell: cell };
        let cfg = ArchConfig { c0: 2, num_classes: 3, input_shape: [1, 6, 6], u: 2, k: 1, v: 1, ..Default::default() };
        let graph = build_graph(&g, &cfg).unwrap();
        let x = Tensor::from_fn([4, 1, 6, 6], |i| ((i * 37) % 11) as f64 / 11.0 - 0.4);
        (graph, x, vec![0, 1, 2, 1])
    }

    #[test]
    fn logits_shape_and_inference_determinism() {
        let (graph, x, _) = small();
        let mut store = WeightStore::new(3);
        let m = activate(&mut store, &graph).unwrap();
        let a = m.forward(&x, BnMode::Inference).unwrap();
        assert_eq!(a.shape(), &[4, 3]);
        assert_eq!(a, m.forward(&x, BnMode::Inference).unwrap());
    }

    #[test]
    fn train_step_reduces_loss_on_fixed_batch() {
        let (graph, x, y) = small();
        let mut store = WeightStore::new(3);
        let mut m = activate(&mut store, &graph).unwrap();
        let cfg = StepConfig { lr: 0.05, ..Default::default() };
        let first = m.train_step(&x, &y, &cfg).unwrap().loss;
        let mut last = first;
        for _ in 0..30 {
            last = m.train_step(&x, &y, &cfg).unwrap().loss;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn missing_key_is_reported() {
        let (graph, x, _) = small();
        let store = WeightStore::new(0);
        assert!(matches!(forward_classify(&graph, &store, &x, BnMode::BatchOnly), Err(ExecError::Weight(_))));
    }
}
