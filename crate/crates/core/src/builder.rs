//! Compiles a genotype into a broad network compute graph.
//!
//! Layout for `u` convolution blocks, `k` deep cells per block and `v` enhancement
//! blocks:
//!
//! * a 3x3 stem convolution with `c0` channels;
//! * convolution block `i` runs `k` deep cells of width `c0 * 2^(i-1)` followed by one
//!   broad cell of twice that width and half the spatial size. Within a block, cell
//!   `h` reads the outputs of cells `h-2` and `h-1`; the first two entries of each
//!   block are the last two outputs of the previous block (the stem twice for block 1);
//! * enhancement blocks with `c0 * 2^u` channels at the final spatial size, wired per
//!   [`Variant`];
//! * a global-average-pooling head over an importance-weighted concatenation of every
//!   block's output, followed by a linear classifier.
//!
//! A cell preprocesses each input with ReLU, a (possibly strided) 1x1 convolution and
//! batch normalization, evaluates its computed nodes, concatenates the loose ends and
//! maps the concatenation back to the cell width with ReLU, a 1x1 convolution and
//! batch normalization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{loose_end_nodes, CellSpec, Genotype, OpKind, Slot, Violation, INPUT_NODES};
use crate::tensor::same_out;
use crate::weights::{CellRole, Consumer, Init, ParamSpec, Part, PositionClass, Scope, Site, WeightKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Every enhancement block reads the down-sampled early blocks and the last
    /// convolution block.
    Bnas,
    /// Every enhancement block reads the last two outputs of the last convolution
    /// block.
    Ccle,
    /// Enhancement blocks are chained, each reading the two previous outputs.
    Cce,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Bnas => "bnas",
            Variant::Ccle => "ccle",
            Variant::Cce => "cce",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bnas" => Ok(Variant::Bnas),
            "ccle" => Ok(Variant::Ccle),
            "cce" => Ok(Variant::Cce),
            _ => Err(format!("unknown variant `{s}` (expected bnas, ccle or cce)")),
        }
    }
}

/// Whether deep cells of one block share weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    /// Deep cells within a block share one weight set (search time).
    #[default]
    OneShot,
    /// Every cell owns its weights (final training).
    Standalone,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub variant: Variant,
    /// Convolution blocks.
    pub u: usize,
    /// Deep cells per convolution block.
    pub k: usize,
    /// Enhancement blocks.
    pub v: usize,
    /// Stem channels.
    pub c0: usize,
    pub num_classes: usize,
    /// (channels, height, width) of one input image.
    pub input_shape: [usize; 3],
    /// Channel budget of the down-sampling projection; `c0 * 2^(u-1)` when unset.
    #[serde(default)]
    pub delta_channels: Option<usize>,
    /// GAP budget for convolution-block sources; `c0 * (2^u - 1)` when unset.
    #[serde(default)]
    pub gap_conv_channels: Option<usize>,
    /// GAP budget for projected enhancement sources; half the enhancement width per
    /// projected source when unset.
    #[serde(default)]
    pub gap_enh_channels: Option<usize>,
    #[serde(default)]
    pub sharing: Sharing,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Bnas,
            u: 2,
            k: 0,
            v: 2,
            c0: 16,
            num_classes: 10,
            input_shape: [3, 32, 32],
            delta_channels: None,
            gap_conv_channels: None,
            gap_enh_channels: None,
            sharing: Sharing::OneShot,
        }
    }
}

impl ArchConfig {
    /// Width of the deep cells in block `i` (1-based).
    pub fn block_width(&self, i: usize) -> usize {
        self.c0 << (i - 1)
    }

    pub fn enh_width(&self) -> usize {
        self.c0 << self.u
    }

    /// Spatial size after `level` halvings.
    pub fn spatial(&self, level: usize) -> (usize, usize) {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for _ in 0..level {
            h = same_out(h, 2);
            w = same_out(w, 2);
        }
        (h, w)
    }

    pub fn delta_budget(&self) -> usize {
        self.delta_channels.unwrap_or(self.c0 << (self.u - 1))
    }

    pub fn gap_conv_budget(&self) -> usize {
        self.gap_conv_channels.unwrap_or(self.c0 * ((1 << self.u) - 1))
    }

    pub fn projected_enh_sources(&self) -> usize {
        match self.variant {
            Variant::Cce => self.v - 1,
            Variant::Bnas | Variant::Ccle => self.v,
        }
    }

    pub fn gap_enh_budget(&self) -> usize {
        self.gap_enh_channels.unwrap_or(self.projected_enh_sources() * self.enh_width() / 2)
    }

    pub fn validate(&self) -> Result<(), BuildError> {
        let bad = |m: &str| Err(BuildError::InvalidConfig(m.to_string()));
        if self.u == 0 || self.v == 0 {
            return bad("u and v must be at least 1");
        }
        if self.u > 8 || self.k > 64 || self.v > 64 {
            return bad("u must be at most 8, k and v at most 64");
        }
        if self.c0 == 0 || self.num_classes == 0 {
            return bad("c0 and num_classes must be positive");
        }
        if self.input_shape.contains(&0) {
            return bad("input dimensions must be positive");
        }
        Ok(())
    }
}

/// Named points of the graph that wiring rules refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tap {
    Stem,
    /// Output of deep cell `index` (1-based) in convolution block `block`.
    Deep {
        block: usize,
        index: usize,
    },
    /// Output of the broad cell ending convolution block `block`.
    Broad {
        block: usize,
    },
    /// Concatenated down-sampling projection feeding the enhancement blocks.
    Delta,
    Enh {
        block: usize,
    },
    Logits,
}

impl std::fmt::Display for Tap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tap::Stem => write!(f, "stem"),
            Tap::Deep { block, index } => write!(f, "deep{block}.{index}"),
            Tap::Broad { block } => write!(f, "broad{block}"),
            Tap::Delta => write!(f, "delta"),
            Tap::Enh { block } => write!(f, "enh{block}"),
            Tap::Logits => write!(f, "logits"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerOp {
    Input,
    /// Weights are blocks concatenated along the input-channel axis.
    Conv {
        kernel: usize,
        stride: usize,
    },
    /// Weights: gamma, beta, running mean, running variance.
    BatchNorm,
    Relu,
    /// ReLU, depthwise, pointwise, batch norm. Weights: depthwise, pointwise, gamma,
    /// beta, running mean, running variance.
    SepConv {
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        stride: usize,
    },
    AvgPool {
        stride: usize,
    },
    Identity,
    Add,
    /// Channel concatenation.
    Concat,
    GlobalAvgPool,
    /// Weights: matrix, bias.
    Affine,
}

impl LayerOp {
    pub fn name(&self) -> &'static str {
        match self {
            LayerOp::Input => "input",
            LayerOp::Conv { .. } => "conv",
            LayerOp::BatchNorm => "bn",
            LayerOp::Relu => "relu",
            LayerOp::SepConv { .. } => "sep_conv",
            LayerOp::MaxPool { .. } => "max_pool",
            LayerOp::AvgPool { .. } => "avg_pool",
            LayerOp::Identity => "identity",
            LayerOp::Add => "add",
            LayerOp::Concat => "concat",
            LayerOp::GlobalAvgPool => "gap",
            LayerOp::Affine => "affine",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub op: LayerOp,
    pub inputs: Vec<usize>,
    pub weights: Vec<WeightKey>,
    /// Per-sample (channels, height, width); the logits layer uses (classes, 1, 1).
    pub shape: [usize; 3],
    pub tap: Option<Tap>,
}

/// Layer ids belonging to one cell instance.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRecord {
    pub tap: Tap,
    pub site: Site,
    /// Layers feeding input nodes 0 and 1, before preprocessing.
    pub inputs: [usize; 2],
    /// Layer holding each node's value, indexed by node.
    pub nodes: Vec<usize>,
    pub loose: Vec<usize>,
    /// Concatenation of the loose ends.
    pub concat: usize,
    pub output: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BuildError {
    #[error("invalid architecture config: {0}")]
    InvalidConfig(String),
    #[error("invalid {cell} cell: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidCell { cell: &'static str, violations: Vec<Violation> },
    #[error("{consumer}: budget of {budget} channels cannot cover {sources} sources")]
    BudgetTooSmall { consumer: String, budget: usize, sources: usize },
    #[error("{consumer}: source {index} ({tap}) has {available} channels, {allocated} allocated")]
    ChannelOverflow { consumer: String, index: usize, tap: Tap, allocated: usize, available: usize },
    #[error("weight `{key}` declared with shapes {first:?} and {second:?}")]
    KeyConflict { key: String, first: Vec<usize>, second: Vec<usize> },
}

/// One source of an importance-weighted concatenation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanEntry {
    pub tap: Tap,
    /// Channels contributed after projection.
    pub channels: usize,
    /// `false` when the source enters the concatenation unchanged.
    pub projected: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImportancePlan {
    pub consumer: Consumer,
    pub entries: Vec<PlanEntry>,
}

impl ImportancePlan {
    pub fn total_channels(&self) -> usize {
        self.entries.iter().map(|e| e.channels).sum()
    }

    pub fn allocations(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.channels).collect()
    }
}

fn consumer_name(c: Consumer) -> &'static str {
    match c {
        Consumer::Delta => "down-sampling projection",
        Consumer::Gap => "GAP head",
    }
}

/// Splits `budget` over `n` sources whose importance doubles with depth. Rounds down;
/// the remainder goes to the deepest source.
pub fn split_doubling(budget: usize, n: usize) -> Option<Vec<usize>> {
    if n == 0 || n >= usize::BITS as usize {
        return (n == 0).then(Vec::new);
    }
    let total = (1usize << n) - 1;
    let mut out: Vec<usize> = (0..n).map(|i| budget * (1 << i) / total).collect();
    let rem = budget - out.iter().sum::<usize>();
    *out.last_mut().expect("n > 0") += rem;
    out.iter().all(|&c| c > 0).then_some(out)
}

/// Splits `budget` evenly over `n` sources, remainder to the last.
pub fn split_equal(budget: usize, n: usize) -> Option<Vec<usize>> {
    if n == 0 {
        return Some(Vec::new());
    }
    let mut out = vec![budget / n; n];
    out[n - 1] += budget % n;
    out.iter().all(|&c| c > 0).then_some(out)
}

/// Source tap and its channel count.
#[derive(Clone, Copy, Debug)]
struct Source {
    tap: Tap,
    channels: usize,
}

fn conv_output(cfg: &ArchConfig, i: usize) -> Source {
    if cfg.k == 0 {
        Source { tap: Tap::Broad { block: i }, channels: 2 * cfg.block_width(i) }
    } else {
        Source { tap: Tap::Deep { block: i, index: cfg.k }, channels: cfg.block_width(i) }
    }
}

fn delta_sources(cfg: &ArchConfig) -> Vec<Source> {
    if cfg.u == 1 {
        vec![Source { tap: Tap::Stem, channels: cfg.c0 }]
    } else {
        (1..cfg.u).map(|i| Source { tap: Tap::Broad { block: i }, channels: 2 * cfg.block_width(i) }).collect()
    }
}

fn uses_delta(cfg: &ArchConfig) -> bool {
    cfg.variant != Variant::Ccle
}

fn plan_sources(cfg: &ArchConfig, consumer: Consumer) -> Result<(Vec<Source>, Vec<usize>, Vec<bool>), BuildError> {
    let name = consumer_name(consumer).to_string();
    let split = |budget: usize, n: usize, doubling: bool| {
        let r = if doubling { split_doubling(budget, n) } else { split_equal(budget, n) };
        r.ok_or(BuildError::BudgetTooSmall { consumer: name.clone(), budget, sources: n })
    };
    match consumer {
        Consumer::Delta => {
            let sources = delta_sources(cfg);
            let alloc = split(cfg.delta_budget(), sources.len(), true)?;
            let projected = vec![true; sources.len()];
            Ok((sources, alloc, projected))
        }
        Consumer::Gap => {
            let mut sources: Vec<Source> = (1..=cfg.u).map(|i| conv_output(cfg, i)).collect();
            let mut alloc = split(cfg.gap_conv_budget(), cfg.u, true)?;
            let mut projected = vec![true; cfg.u];
            let ce = cfg.enh_width();
            let np = cfg.projected_enh_sources();
            alloc.extend(split(cfg.gap_enh_budget(), np, false)?);
            for j in 1..=cfg.v {
                sources.push(Source { tap: Tap::Enh { block: j }, channels: ce });
                if j <= np {
                    projected.push(true);
                } else {
                    projected.push(false);
                    alloc.push(ce);
                }
            }
            Ok((sources, alloc, projected))
        }
    }
}

/// Channel allocation for a concatenating consumer. Errors when the budget cannot give
/// every source at least one channel or a source would receive more channels than it
/// has.
pub fn importance_plan(cfg: &ArchConfig, consumer: Consumer) -> Result<ImportancePlan, BuildError> {
    cfg.validate()?;
    let (sources, alloc, projected) = plan_sources(cfg, consumer)?;
    let mut entries = Vec::with_capacity(sources.len());
    for (idx, ((s, a), p)) in sources.iter().zip(&alloc).zip(&projected).enumerate() {
        if *a > s.channels {
            return Err(BuildError::ChannelOverflow {
                consumer: consumer_name(consumer).to_string(),
                index: idx,
                tap: s.tap,
                allocated: *a,
                available: s.channels,
            });
        }
        entries.push(PlanEntry { tap: s.tap, channels: *a, projected: *p });
    }
    Ok(ImportancePlan { consumer, entries })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComputeGraph {
    pub config: ArchConfig,
    pub genotype: Genotype,
    pub layers: Vec<Layer>,
    pub params: BTreeMap<WeightKey, ParamSpec>,
    pub cells: Vec<CellRecord>,
    /// Channel allocations of the down-sampling projection (empty when unused) and of
    /// the GAP head.
    pub delta_plan: Option<ImportancePlan>,
    pub gap_plan: ImportancePlan,
}

impl ComputeGraph {
    pub fn output(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn tap(&self, tap: Tap) -> Option<usize> {
        self.layers.iter().position(|l| l.tap == Some(tap))
    }

    pub fn cell(&self, tap: Tap) -> Option<&CellRecord> {
        self.cells.iter().find(|c| c.tap == tap)
    }

    /// Trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|(k, _)| k.part.is_trainable()).map(|(_, s)| s.numel()).sum()
    }

    /// Deterministic text listing of every layer.
    pub fn dump(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let [ci, h, w] = c.input_shape;
        let _ = writeln!(
            s,
            "# variant={} u={} k={} v={} c0={} classes={} input={ci}x{h}x{w} sharing={:?}",
            c.variant.name(),
            c.u,
            c.k,
            c.v,
            c.c0,
            c.num_classes,
            c.sharing
        );
        let _ = writeln!(s, "# parameters={}", self.parameter_count());
        for line in self.genotype.to_string().lines() {
            let _ = writeln!(s, "# {line}");
        }
        for (id, l) in self.layers.iter().enumerate() {
            let _ = write!(s, "L{id} {}", l.op.name());
            match l.op {
                LayerOp::Conv { kernel, stride } | LayerOp::SepConv { kernel, stride } => {
                    let _ = write!(s, " k{kernel} s{stride}");
                }
                LayerOp::MaxPool { stride } | LayerOp::AvgPool { stride } => {
                    let _ = write!(s, " k3 s{stride}");
                }
                _ => {}
            }
            let inputs: Vec<String> = l.inputs.iter().map(|i| format!("L{i}")).collect();
            let _ = write!(s, " ({})", inputs.join(" "));
            if !l.weights.is_empty() {
                let w: Vec<String> = l.weights.iter().map(|k| k.to_string()).collect();
                let _ = write!(s, " [{}]", w.join(" "));
            }
            let _ = write!(s, " -> {}x{}x{}", l.shape[0], l.shape[1], l.shape[2]);
            if let Some(t) = l.tap {
                let _ = write!(s, " @{t}");
            }
            s.push('\n');
        }
        s
    }

    /// Checks acyclicity and shape agreement of every layer against its inputs.
    pub fn check(&self) -> Result<(), String> {
        for (id, l) in self.layers.iter().enumerate() {
            if l.inputs.iter().any(|&i| i >= id) {
                return Err(format!("L{id} reads a later layer"));
            }
            let ins: Vec<[usize; 3]> = l.inputs.iter().map(|&i| self.layers[i].shape).collect();
            let ok = match l.op {
                LayerOp::Input => ins.is_empty(),
                LayerOp::Concat => {
                    !ins.is_empty()
                        && ins.iter().all(|s| s[1..] == l.shape[1..])
                        && ins.iter().map(|s| s[0]).sum::<usize>() == l.shape[0]
                }
                LayerOp::Add => ins.len() == 2 && ins[0] == ins[1] && ins[0] == l.shape,
                LayerOp::Conv { stride, .. }
                | LayerOp::SepConv { stride, .. }
                | LayerOp::MaxPool { stride }
                | LayerOp::AvgPool { stride } => {
                    ins.len() == 1
                        && l.shape[1] == same_out(ins[0][1], stride)
                        && l.shape[2] == same_out(ins[0][2], stride)
                }
                LayerOp::BatchNorm | LayerOp::Relu | LayerOp::Identity => ins.len() == 1 && ins[0] == l.shape,
                LayerOp::GlobalAvgPool => ins.len() == 1 && l.shape == [ins[0][0], 1, 1],
                LayerOp::Affine => ins.len() == 1 && ins[0][1..] == [1, 1],
            };
            if !ok {
                return Err(format!("L{id} {} has shape {:?} with inputs {ins:?}", l.op.name(), l.shape));
            }
            for k in &l.weights {
                if !self.params.contains_key(k) {
                    return Err(format!("L{id} uses undeclared weight {k}"));
                }
            }
        }
        match self.layers.last() {
            Some(l) if l.tap == Some(Tap::Logits) => Ok(()),
            _ => Err("graph does not end in the logits layer".into()),
        }
    }
}

struct Builder<'a> {
    cfg: &'a ArchConfig,
    layers: Vec<Layer>,
    params: BTreeMap<WeightKey, ParamSpec>,
    cells: Vec<CellRecord>,
}

fn bn_params() -> [(Part, Init); 4] {
    [
        (Part::Gamma, Init::Ones),
        (Part::Beta, Init::Zeros),
        (Part::RunningMean, Init::Zeros),
        (Part::RunningVar, Init::Ones),
    ]
}

impl<'a> Builder<'a> {
    fn shape(&self, id: usize) -> [usize; 3] {
        self.layers[id].shape
    }

    fn push(&mut self, op: LayerOp, inputs: Vec<usize>, weights: Vec<WeightKey>, shape: [usize; 3]) -> usize {
        self.layers.push(Layer { op, inputs, weights, shape, tap: None });
        self.layers.len() - 1
    }

    fn declare(&mut self, scope: Scope, part: Part, shape: Vec<usize>, init: Init) -> Result<WeightKey, BuildError> {
        let key = WeightKey::new(scope, part);
        if let Some(prev) = self.params.get(&key) {
            if prev.shape != shape {
                return Err(BuildError::KeyConflict { key: key.to_string(), first: prev.shape.clone(), second: shape });
            }
        } else {
            self.params.insert(key, ParamSpec { shape, init });
        }
        Ok(key)
    }

    fn conv(&mut self, x: usize, scope: Scope, co: usize, kernel: usize, stride: usize) -> Result<usize, BuildError> {
        let [ci, h, w] = self.shape(x);
        let key = self.declare(
            scope,
            Part::Weight,
            vec![co, ci, kernel, kernel],
            Init::KaimingNormal { fan_in: ci * kernel * kernel },
        )?;
        Ok(self.push(
            LayerOp::Conv { kernel, stride },
            vec![x],
            vec![key],
            [co, same_out(h, stride), same_out(w, stride)],
        ))
    }

    fn bn(&mut self, x: usize, scope: Scope) -> Result<usize, BuildError> {
        let c = self.shape(x)[0];
        let mut keys = Vec::with_capacity(4);
        for (part, init) in bn_params() {
            keys.push(self.declare(scope, part, vec![c], init)?);
        }
        Ok(self.push(LayerOp::BatchNorm, vec![x], keys, self.shape(x)))
    }

    fn relu(&mut self, x: usize) -> usize {
        self.push(LayerOp::Relu, vec![x], vec![], self.shape(x))
    }

    fn concat(&mut self, parts: Vec<usize>) -> usize {
        let [_, h, w] = self.shape(parts[0]);
        let c = parts.iter().map(|&p| self.shape(p)[0]).sum();
        self.push(LayerOp::Concat, parts, vec![], [c, h, w])
    }

    /// Stride that maps `x` onto the spatial size of `level`.
    fn stride_to(&self, x: usize, level: usize) -> usize {
        let [_, h, w] = self.shape(x);
        let (th, tw) = self.cfg.spatial(level);
        let mut s = 1;
        while same_out(h, s) != th || same_out(w, s) != tw {
            s *= 2;
            assert!(s <= h.max(w) * 2, "no stride maps {h}x{w} onto {th}x{tw}");
        }
        s
    }

    fn tag(&mut self, id: usize, tap: Tap) {
        self.layers[id].tap = Some(tap);
    }

    fn edge(
        &mut self,
        site: Site,
        node: usize,
        slot: Slot,
        source: usize,
        op: OpKind,
        x: usize,
        stride: usize,
    ) -> Result<usize, BuildError> {
        let scope = Scope::Edge { site, node: node as u8, slot, source: source as u8, op };
        let [c, h, w] = self.shape(x);
        let out = [c, same_out(h, stride), same_out(w, stride)];
        Ok(match op {
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = op.kernel().expect("separable op has a kernel");
                let mut keys = vec![
                    self.declare(scope, Part::Depthwise, vec![c, 1, k, k], Init::KaimingNormal { fan_in: k * k })?,
                    self.declare(scope, Part::Pointwise, vec![c, c, 1, 1], Init::KaimingNormal { fan_in: c })?,
                ];
                for (part, init) in bn_params() {
                    keys.push(self.declare(scope, part, vec![c], init)?);
                }
                self.push(LayerOp::SepConv { kernel: k, stride }, vec![x], keys, out)
            }
            OpKind::MaxPool3x3 => self.push(LayerOp::MaxPool { stride }, vec![x], vec![], out),
            OpKind::AvgPool3x3 => self.push(LayerOp::AvgPool { stride }, vec![x], vec![], out),
            OpKind::SkipConnect if stride == 1 => self.push(LayerOp::Identity, vec![x], vec![], out),
            OpKind::SkipConnect => {
                let y = self.conv(x, scope, c, 1, stride)?;
                self.bn(y, scope)?
            }
        })
    }

    /// Builds one cell computing at spatial `level` (before its own reduction).
    #[allow(clippy::too_many_arguments)]
    fn cell(
        &mut self,
        site: Site,
        spec: &CellSpec,
        inputs: [usize; 2],
        width: usize,
        level: usize,
        reduce: bool,
        tap: Tap,
    ) -> Result<usize, BuildError> {
        let mut nodes = Vec::with_capacity(spec.last_node() + 1);
        for (slot, &x) in [Slot::A, Slot::B].iter().zip(&inputs) {
            let stride = self.stride_to(x, level);
            let scope =
                Scope::CellInput { site, slot: *slot, in_channels: self.shape(x)[0] as u32, stride: stride as u8 };
            let r = self.relu(x);
            let c = self.conv(r, scope, width, 1, stride)?;
            nodes.push(self.bn(c, scope)?);
        }
        for (n, ns) in spec.computed() {
            let mut outs = [0usize; 2];
            for (i, (slot, (src, op))) in [Slot::A, Slot::B].into_iter().zip(ns.inputs()).enumerate() {
                let stride = if reduce && src < INPUT_NODES { 2 } else { 1 };
                outs[i] = self.edge(site, n, slot, src, op, nodes[src], stride)?;
            }
            let shape = self.shape(outs[0]);
            nodes.push(self.push(LayerOp::Add, outs.to_vec(), vec![], shape));
        }
        let loose = loose_end_nodes(spec);
        let concat = self.concat(loose.iter().map(|&n| nodes[n]).collect());
        let r = self.relu(concat);
        let [_, h, w] = self.shape(r);
        let mut keys = Vec::with_capacity(loose.len());
        for &n in &loose {
            let scope = Scope::CellOutput { site, node: n as u8 };
            keys.push(self.declare(
                scope,
                Part::Weight,
                vec![width, width, 1, 1],
                Init::KaimingNormal { fan_in: width },
            )?);
        }
        let conv = self.push(LayerOp::Conv { kernel: 1, stride: 1 }, vec![r], keys, [width, h, w]);
        let output = self.bn(conv, Scope::CellOutputNorm { site })?;
        self.tag(output, tap);
        self.cells.push(CellRecord { tap, site, inputs, nodes, loose, concat, output });
        Ok(output)
    }

    /// 1x1 projections of `sources` onto the final spatial size, concatenated.
    fn projections(
        &mut self,
        consumer: Consumer,
        plan: &ImportancePlan,
        sources: &[usize],
    ) -> Result<Vec<usize>, BuildError> {
        let mut out = Vec::with_capacity(sources.len());
        for (idx, (e, &x)) in plan.entries.iter().zip(sources).enumerate() {
            if !e.projected {
                out.push(x);
                continue;
            }
            let scope = Scope::Projection { consumer, source: idx as u8 };
            let stride = self.stride_to(x, self.cfg.u);
            let c = self.conv(x, scope, e.channels, 1, stride)?;
            out.push(self.bn(c, scope)?);
        }
        Ok(out)
    }
}

fn check_cell(cell: &'static str, spec: &CellSpec) -> Result<(), BuildError> {
    let v = spec.structural_violations();
    if v.is_empty() {
        Ok(())
    } else {
        Err(BuildError::InvalidCell { cell, violations: v })
    }
}

/// Compiles `genotype` under `cfg`. Cells may have any number of computed nodes.
pub fn build_graph(genotype: &Genotype, cfg: &ArchConfig) -> Result<ComputeGraph, BuildError> {
    cfg.validate()?;
    check_cell("convolution", &genotype.conv_cell)?;
    check_cell("enhancement", &genotype.enh_cell)?;
    let delta_plan = if uses_delta(cfg) { Some(importance_plan(cfg, Consumer::Delta)?) } else { None };
    let gap_plan = importance_plan(cfg, Consumer::Gap)?;

    let mut b = Builder { cfg, layers: Vec::new(), params: BTreeMap::new(), cells: Vec::new() };
    let [ci, h, w] = cfg.input_shape;
    let input = b.push(LayerOp::Input, vec![], vec![], [ci, h, w]);
    let stem = b.conv(input, Scope::Stem, cfg.c0, 3, 1)?;
    let stem = b.bn(stem, Scope::Stem)?;
    b.tag(stem, Tap::Stem);

    // hist[h + 1] holds Z_h of the current block
    let mut prev = vec![stem, stem];
    let mut broad = Vec::with_capacity(cfg.u);
    for i in 1..=cfg.u {
        let mut hist = vec![prev[prev.len() - 2], prev[prev.len() - 1]];
        let width = cfg.block_width(i);
        for hh in 1..=cfg.k {
            let instance = match cfg.sharing {
                Sharing::OneShot => 0,
                Sharing::Standalone => hh as u16,
            };
            let site = Site { role: CellRole::Conv, position: PositionClass::Normal, stage: i as u16, instance };
            let out = b.cell(
                site,
                &genotype.conv_cell,
                [hist[hh - 1], hist[hh]],
                width,
                i - 1,
                false,
                Tap::Deep { block: i, index: hh },
            )?;
            hist.push(out);
        }
        let site = Site { role: CellRole::Conv, position: PositionClass::Reduce, stage: i as u16, instance: 0 };
        let n = hist.len();
        let out = b.cell(
            site,
            &genotype.conv_cell,
            [hist[n - 2], hist[n - 1]],
            2 * width,
            i - 1,
            true,
            Tap::Broad { block: i },
        )?;
        hist.push(out);
        broad.push(out);
        prev = hist;
    }
    // prev = [Z_-1, Z_0, Z_1 .. Z_k, Z_(k+1)] of block u
    let z_k = prev[prev.len() - 2];
    let z_k1 = prev[prev.len() - 1];

    let delta = match &delta_plan {
        Some(plan) => {
            let sources: Vec<usize> = if cfg.u == 1 { vec![stem] } else { broad[..cfg.u - 1].to_vec() };
            let parts = b.projections(Consumer::Delta, plan, &sources)?;
            let d = b.concat(parts);
            b.tag(d, Tap::Delta);
            Some(d)
        }
        None => None,
    };

    let ce = cfg.enh_width();
    let mut enh: Vec<usize> = Vec::with_capacity(cfg.v);
    for j in 1..=cfg.v {
        let inputs = match cfg.variant {
            Variant::Bnas => [delta.expect("delta built for this variant"), z_k1],
            Variant::Ccle => [z_k, z_k1],
            Variant::Cce => match j {
                1 => [delta.expect("delta built for this variant"), z_k1],
                2 => [z_k1, enh[0]],
                _ => [enh[j - 3], enh[j - 2]],
            },
        };
        let site = Site { role: CellRole::Enh, position: PositionClass::Normal, stage: j as u16, instance: 0 };
        enh.push(b.cell(site, &genotype.enh_cell, inputs, ce, cfg.u, false, Tap::Enh { block: j })?);
    }

    let mut gap_sources = Vec::with_capacity(cfg.u + cfg.v);
    for i in 1..=cfg.u {
        let tap = conv_output(cfg, i).tap;
        gap_sources.push(b.layers.iter().position(|l| l.tap == Some(tap)).expect("tap built"));
    }
    gap_sources.extend(&enh);
    let parts = b.projections(Consumer::Gap, &gap_plan, &gap_sources)?;
    let cat = b.concat(parts);
    let d = b.shape(cat)[0];
    let pooled = b.push(LayerOp::GlobalAvgPool, vec![cat], vec![], [d, 1, 1]);
    let nc = cfg.num_classes;
    let wk = b.declare(Scope::Classifier, Part::Weight, vec![nc, d], Init::KaimingNormal { fan_in: d })?;
    let bk = b.declare(Scope::Classifier, Part::Bias, vec![nc], Init::Zeros)?;
    let logits = b.push(LayerOp::Affine, vec![pooled], vec![wk, bk], [nc, 1, 1]);
    b.tag(logits, Tap::Logits);

    Ok(ComputeGraph {
        config: cfg.clone(),
        genotype: genotype.clone(),
        layers: b.layers,
        params: b.params,
        cells: b.cells,
        delta_plan,
        gap_plan,
    })
}

/// Trainable parameter count of the compiled network.
pub fn count_parameters(genotype: &Genotype, cfg: &ArchConfig) -> Result<usize, BuildError> {
    Ok(build_graph(genotype, cfg)?.parameter_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::NodeSpec;

    fn chain(n: usize) -> CellSpec {
        CellSpec::new((0..n).map(|j| NodeSpec::new(j + 1, OpKind::SepConv3x3, j, OpKind::SkipConnect)).collect())
    }

    fn geno() -> Genotype {
        Genotype { conv_cell: chain(5), enh_cell: chain(5) }
    }

    #[test]
    fn splits() {
        assert_eq!(split_doubling(48, 2), Some(vec![16, 32]));
        assert_eq!(split_doubling(50, 2), Some(vec![16, 34]));
        assert_eq!(split_doubling(7, 1), Some(vec![7]));
        assert_eq!(split_doubling(2, 2), None);
        assert_eq!(split_equal(40, 2), Some(vec![20, 20]));
        assert_eq!(split_equal(41, 2), Some(vec![20, 21]));
        assert_eq!(split_equal(1, 2), None);
    }

    #[test]
    fn graphs_check_for_every_variant() {
        for variant in [Variant::Bnas, Variant::Ccle, Variant::Cce] {
            for (u, k, v) in [(1, 0, 1), (2, 0, 2), (2, 1, 3), (3, 2, 1)] {
                let cfg = ArchConfig { variant, u, k, v, c0: 4, input_shape: [3, 15, 17], ..ArchConfig::default() };
                let g = build_graph(&geno(), &cfg).unwrap();
                g.check().unwrap_or_else(|e| panic!("{variant:?} {u} {k} {v}: {e}"));
                let (h, w) = cfg.spatial(u);
                for j in 1..=v {
                    assert_eq!(g.layers[g.tap(Tap::Enh { block: j }).unwrap()].shape, [cfg.enh_width(), h, w]);
                }
            }
        }
    }

    #[test]
    fn broad_cell_doubles_channels_and_halves_space() {
        let cfg = ArchConfig { u: 3, k: 1, c0: 4, input_shape: [3, 9, 9], ..ArchConfig::default() };
        let g = build_graph(&geno(), &cfg).unwrap();
        let mut input = [cfg.c0, 9, 9];
        for i in 1..=3 {
            let out = g.layers[g.tap(Tap::Broad { block: i }).unwrap()].shape;
            assert_eq!(out, [2 * input[0], input[1].div_ceil(2), input[2].div_ceil(2)]);
            input = out;
        }
    }

    #[test]
    fn overflow_and_small_budget_are_errors() {
        let cfg = ArchConfig { gap_conv_channels: Some(1), ..ArchConfig::default() };
        assert!(matches!(build_graph(&geno(), &cfg), Err(BuildError::BudgetTooSmall { .. })));
        let cfg = ArchConfig { delta_channels: Some(1000), ..ArchConfig::default() };
        assert!(matches!(build_graph(&geno(), &cfg), Err(BuildError::ChannelOverflow { .. })));
    }

    #[test]
    fn dump_is_deterministic() {
        let cfg = ArchConfig { c0: 4, input_shape: [3, 8, 8], ..ArchConfig::default() };
        let a = build_graph(&geno(), &cfg).unwrap().dump();
        let b = build_graph(&geno(), &cfg).unwrap().dump();
        assert_eq!(a, b);
        assert!(a.contains("@logits"));
    }
}
