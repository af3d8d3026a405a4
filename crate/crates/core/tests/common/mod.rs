//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use broadnas::builder::{ArchConfig, ComputeGraph, LayerOp, Sharing, Tap, Variant};
use broadnas::cell::{CellSpec, Genotype, OpKind, INPUT_NODES};
use broadnas::tensor::{apply_primitive, Attr, Attrs, PrimitiveKind, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

pub fn rand_pos(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.5..2.0))
}

// ---------------------------------------------------------------------------
// finite differences

/// One primitive application with randomized inputs. `diff[i]` marks inputs the
/// gradient is checked for; the rest enter the tape as constants.
pub struct GradCase {
    pub name: String,
    pub kind: PrimitiveKind,
    pub inputs: Vec<Tensor>,
    pub diff: Vec<bool>,
    pub attrs: Attrs,
}

impl GradCase {
    pub fn new(name: &str, kind: PrimitiveKind, inputs: Vec<Tensor>, diff: Vec<bool>) -> Self {
        Self { name: name.into(), kind, inputs, diff, attrs: Attrs::new() }
    }

    pub fn attr(mut self, k: &str, v: Attr) -> Self {
        self.attrs.insert(k.into(), v);
        self
    }
}

/// Scalar probe `sum(y * r)` (or `y` itself when scalar) for fixed random `r`.
fn probe(case: &GradCase, inputs: &[Tensor], weights: &[f64], track: bool) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .zip(&case.diff)
        .map(|(t, &d)| if d && track { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let y = apply_primitive(&mut tape, case.kind, &vars, &case.attrs).expect("primitive applies");
    let loss = if tape.value(y).numel() == 1 {
        y
    } else {
        let r = tape.constant(Tensor::new(tape.shape(y).to_vec(), weights.to_vec()).unwrap());
        let m = tape.mul(y, r).unwrap();
        tape.sum(m)
    };
    let value = tape.data(loss)[0];
    if !track {
        return (value, vec![]);
    }
    tape.backward(loss).unwrap();
    let grads = vars.iter().zip(&case.diff).map(|(v, &d)| d.then(|| tape.grad(*v).unwrap().to_vec())).collect();
    (value, grads)
}

/// Largest norm-wise relative error between analytic and central-difference
/// gradients over the differentiable inputs.
pub fn grad_check(case: &GradCase, seed: u64, h: f64) -> f64 {
    let mut r = rng(seed);
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<_> = case.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = apply_primitive(&mut tape, case.kind, &vars, &case.attrs).unwrap();
        tape.value(y).numel()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| r.sample(StandardNormal)).collect();
    let (_, analytic) = probe(case, &case.inputs, &weights, true);
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let Some(a) = a else { continue };
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fp = probe(case, &plus, &weights, false).0;
            let fm = probe(case, &minus, &weights, false).0;
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(rel_err(a, &numeric));
    }
    worst
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One randomized case per primitive kind (two for strided kinds and batch-norm modes).
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    use PrimitiveKind as K;
    let mut r = rng(seed);
    let r = &mut r;
    let int = Attr::Int;
    let mut v = Vec::new();
    for s in [1, 2] {
        v.push(
            GradCase::new(
                &format!("conv2d s{s}"),
                K::Conv2d,
                vec![randn(&[2, 3, 5, 5], r), randn(&[4, 3, 3, 3], r)],
                vec![true, true],
            )
            .attr("stride", int(s)),
        );
        v.push(
            GradCase::new(
                &format!("depthwise_conv2d s{s}"),
                K::DepthwiseConv2d,
                vec![randn(&[2, 3, 6, 6], r), randn(&[3, 1, 5, 5], r)],
                vec![true, true],
            )
            .attr("stride", int(s)),
        );
        for kind in [K::MaxPool, K::AvgPool] {
            v.push(
                GradCase::new(&format!("{} s{s}", kind.name()), kind, vec![randn(&[2, 3, 5, 5], r)], vec![true])
                    .attr("stride", int(s)),
            );
        }
        v.push(
            GradCase::new(
                &format!("sep_conv s{s}"),
                K::SepConv,
                vec![
                    randn(&[3, 2, 5, 5], r),
                    randn(&[2, 1, 3, 3], r),
                    randn(&[4, 2, 1, 1], r),
                    rand_pos(&[4], r),
                    randn(&[4], r),
                    randn(&[4], r),
                    rand_pos(&[4], r),
                ],
                vec![true, true, true, true, true, false, false],
            )
            .attr("stride", int(s)),
        );
    }
    v.push(
        GradCase::new(
            "conv1x1 s2",
            K::Conv1x1,
            vec![randn(&[2, 3, 5, 5], r), randn(&[4, 3, 1, 1], r)],
            vec![true, true],
        )
        .attr("stride", int(2)),
    );
    for mode in ["train", "batch", "inference"] {
        v.push(
            GradCase::new(
                &format!("batch_norm {mode}"),
                K::BatchNorm,
                vec![randn(&[4, 3, 2, 2], r), rand_pos(&[3], r), randn(&[3], r), randn(&[3], r), rand_pos(&[3], r)],
                vec![true, true, true, false, false],
            )
            .attr("mode", Attr::Str(mode.into())),
        );
    }
    for kind in [K::Identity, K::Relu, K::Sigmoid, K::Tanh, K::Exp, K::Sum, K::GlobalAvgPool] {
        v.push(GradCase::new(kind.name(), kind, vec![randn(&[2, 3, 3, 2], r)], vec![true]));
    }
    for kind in [K::Add, K::Mul] {
        v.push(GradCase::new(kind.name(), kind, vec![randn(&[2, 3, 4], r), randn(&[2, 3, 4], r)], vec![true, true]));
    }
    v.push(GradCase::new("scale", K::Scale, vec![randn(&[2, 5], r)], vec![true]).attr("factor", Attr::Float(-1.7)));
    v.push(GradCase::new(
        "concat",
        K::Concat,
        vec![randn(&[2, 1, 3, 3], r), randn(&[2, 2, 3, 3], r), randn(&[2, 3, 3, 3], r)],
        vec![true, true, true],
    ));
    v.push(GradCase::new(
        "affine+bias",
        K::Affine,
        vec![randn(&[3, 5], r), randn(&[4, 5], r), randn(&[4], r)],
        vec![true; 3],
    ));
    v.push(GradCase::new("affine", K::Affine, vec![randn(&[3, 5], r), randn(&[4, 5], r)], vec![true; 2]));
    v.push(
        GradCase::new("softmax_cross_entropy", K::SoftmaxCrossEntropy, vec![randn(&[4, 5], r)], vec![true])
            .attr("labels", Attr::Ints(vec![0, 4, 2, 2])),
    );
    v.push(GradCase::new("log_softmax", K::LogSoftmax, vec![randn(&[3, 6], r)], vec![true]));
    v.push(
        GradCase::new("pick", K::Pick, vec![randn(&[4, 3], r)], vec![true])
            .attr("indices", Attr::Ints(vec![2, 0, 1, 1])),
    );
    v.push(
        GradCase::new("gather_rows", K::GatherRows, vec![randn(&[4, 3], r)], vec![true])
            .attr("indices", Attr::Ints(vec![3, 0, 3, 1, 3])),
    );
    v
}

// ---------------------------------------------------------------------------
// topology

/// Spatial level (number of halvings) and channel count of a tap under `cfg`.
pub fn tap_level_channels(cfg: &ArchConfig, tap: Tap) -> (usize, usize) {
    let w = |i: usize| cfg.c0 * (1 << (i - 1));
    match tap {
        Tap::Stem => (0, cfg.c0),
        Tap::Deep { block, .. } => (block - 1, w(block)),
        Tap::Broad { block } => (block, 2 * w(block)),
        Tap::Delta => (cfg.u, cfg.delta_channels.unwrap_or(cfg.c0 << (cfg.u - 1))),
        Tap::Enh { .. } => (cfg.u, cfg.c0 << cfg.u),
        Tap::Logits => (cfg.u, cfg.num_classes),
    }
}

pub fn side_at(n: usize, level: usize) -> usize {
    (0..level).fold(n, |s, _| s.div_ceil(2))
}

/// Ordered input taps of every cell, from the block/variant rules.
pub fn expected_cell_inputs(cfg: &ArchConfig) -> BTreeMap<Tap, [Tap; 2]> {
    let mut out = BTreeMap::new();
    // seq[h + 1] is Z_h of the current block
    let mut prev = vec![Tap::Stem, Tap::Stem];
    for i in 1..=cfg.u {
        let mut seq = vec![prev[prev.len() - 2], prev[prev.len() - 1]];
        for h in 1..=cfg.k + 1 {
            let tap = if h <= cfg.k { Tap::Deep { block: i, index: h } } else { Tap::Broad { block: i } };
            out.insert(tap, [seq[h - 1], seq[h]]);
            seq.push(tap);
        }
        prev = seq;
    }
    let z_k = prev[prev.len() - 2];
    let z_k1 = Tap::Broad { block: cfg.u };
    for j in 1..=cfg.v {
        let e = Tap::Enh { block: j };
        let ins = match (cfg.variant, j) {
            (Variant::Bnas, _) => [Tap::Delta, z_k1],
            (Variant::Ccle, _) => [z_k, z_k1],
            (Variant::Cce, 1) => [Tap::Delta, z_k1],
            (Variant::Cce, 2) => [z_k1, Tap::Enh { block: 1 }],
            (Variant::Cce, _) => [Tap::Enh { block: j - 2 }, Tap::Enh { block: j - 1 }],
        };
        out.insert(e, ins);
    }
    out
}

pub fn expected_delta_sources(cfg: &ArchConfig) -> Option<Vec<Tap>> {
    let uses = match cfg.variant {
        Variant::Bnas | Variant::Cce => true,
        Variant::Ccle => false,
    };
    uses.then(|| if cfg.u == 1 { vec![Tap::Stem] } else { (1..cfg.u).map(|i| Tap::Broad { block: i }).collect() })
}

pub fn expected_gap_sources(cfg: &ArchConfig) -> Vec<Tap> {
    let mut v: Vec<Tap> = (1..=cfg.u)
        .map(|i| if cfg.k == 0 { Tap::Broad { block: i } } else { Tap::Deep { block: i, index: cfg.k } })
        .collect();
    v.extend((1..=cfg.v).map(|j| Tap::Enh { block: j }));
    v
}

/// Nearest tagged ancestors of `layer`, found by walking inputs through untagged
/// layers. The network input is reported as `None`.
pub fn tagged_ancestors(g: &ComputeGraph, layer: usize) -> BTreeSet<Option<Tap>> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<usize> = g.layers[layer].inputs.clone();
    let mut seen = BTreeSet::new();
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        let l = &g.layers[id];
        if let Some(t) = l.tap {
            out.insert(Some(t));
        } else if l.op == LayerOp::Input {
            out.insert(None);
        } else {
            stack.extend(&l.inputs);
        }
    }
    out
}

/// Which of the two cell inputs some node actually reads; an unread input
/// contributes no data edge.
pub fn used_inputs(spec: &CellSpec) -> [bool; 2] {
    let mut used = [false; 2];
    for node in &spec.nodes {
        for (src, _) in node.inputs() {
            if src < 2 {
                used[src] = true;
            }
        }
    }
    used
}

/// Checks every wiring, shape and fan-in rule on `g`; returns the failures.
pub fn topology_violations(g: &ComputeGraph) -> Vec<String> {
    let cfg = &g.config;
    let mut bad = Vec::new();
    if let Err(e) = g.check() {
        bad.push(format!("graph check: {e}"));
    }
    let tap_of = |id: usize| g.layers[id].tap;

    // Tap-level edge set from brute-force enumeration of every layer edge.
    let mut found: BTreeSet<(Option<Tap>, Tap)> = BTreeSet::new();
    for (id, l) in g.layers.iter().enumerate() {
        if let Some(t) = l.tap {
            for a in tagged_ancestors(g, id) {
                found.insert((a, t));
            }
        }
    }
    let cells = expected_cell_inputs(cfg);
    let mut expected: BTreeSet<(Option<Tap>, Tap)> = BTreeSet::new();
    expected.insert((None, Tap::Stem));
    for (t, ins) in &cells {
        let spec = if matches!(t, Tap::Enh { .. }) { &g.genotype.enh_cell } else { &g.genotype.conv_cell };
        let used = used_inputs(spec);
        for (slot, i) in ins.iter().enumerate() {
            if used[slot] {
                expected.insert((Some(*i), *t));
            }
        }
    }
    if let Some(ds) = expected_delta_sources(cfg) {
        for s in ds {
            expected.insert((Some(s), Tap::Delta));
        }
    }
    for s in expected_gap_sources(cfg) {
        expected.insert((Some(s), Tap::Logits));
    }
    if found != expected {
        let extra: Vec<_> = found.difference(&expected).collect();
        let missing: Vec<_> = expected.difference(&found).collect();
        bad.push(format!("tap edges differ: extra {extra:?}, missing {missing:?}"));
    }

    // Ordered cell inputs.
    if g.cells.len() != cells.len() {
        bad.push(format!("{} cells, expected {}", g.cells.len(), cells.len()));
    }
    for c in &g.cells {
        let got = [tap_of(c.inputs[0]), tap_of(c.inputs[1])];
        match cells.get(&c.tap) {
            Some(want) if got == [Some(want[0]), Some(want[1])] => {}
            want => bad.push(format!("cell {} reads {got:?}, expected {want:?}", c.tap)),
        }
    }

    // Shapes of every tap, including the broad-cell halve/double rule.
    let [_, h, w] = cfg.input_shape;
    for l in &g.layers {
        let Some(t) = l.tap else { continue };
        let (level, ch) = tap_level_channels(cfg, t);
        let want = if t == Tap::Logits { [ch, 1, 1] } else { [ch, side_at(h, level), side_at(w, level)] };
        if l.shape != want {
            bad.push(format!("{t} has shape {:?}, expected {want:?}", l.shape));
        }
        if let Tap::Broad { block } = t {
            let entry = cfg.c0 << (block - 1);
            let (eh, ew) = (side_at(h, block - 1), side_at(w, block - 1));
            if l.shape != [2 * entry, eh.div_ceil(2), ew.div_ceil(2)] {
                bad.push(format!("{t} breaks the halve/double rule: {:?}", l.shape));
            }
        }
    }

    // GAP fan-in.
    let gap = g.layers.iter().position(|l| l.op == LayerOp::GlobalAvgPool);
    match gap {
        Some(id) => {
            let cat = g.layers[id].inputs[0];
            let fan_in = g.layers[cat].inputs.len();
            if g.layers[cat].op != LayerOp::Concat || fan_in != cfg.u + cfg.v {
                bad.push(format!("GAP fan-in {fan_in}, expected {}", cfg.u + cfg.v));
            }
            for &src in &g.layers[cat].inputs {
                let [_, sh, sw] = g.layers[src].shape;
                if (sh, sw) != (side_at(h, cfg.u), side_at(w, cfg.u)) {
                    bad.push(format!("GAP source L{src} at {sh}x{sw}"));
                }
            }
        }
        None => bad.push("no GAP layer".into()),
    }
    bad
}

// ---------------------------------------------------------------------------
// parameter counts

fn loose_ends(spec: &CellSpec) -> usize {
    let n = spec.nodes.len() + INPUT_NODES;
    let mut used = vec![false; n];
    for node in &spec.nodes {
        used[node.input_a] = true;
        used[node.input_b] = true;
    }
    (INPUT_NODES..n).filter(|&i| !used[i]).count()
}

fn edge_params(op: OpKind, c: usize, reduce_from_input: bool) -> usize {
    match op {
        OpKind::SepConv3x3 => c * 9 + c * c + 2 * c,
        OpKind::SepConv5x5 => c * 25 + c * c + 2 * c,
        OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => 0,
        OpKind::SkipConnect if reduce_from_input => c * c + 2 * c,
        OpKind::SkipConnect => 0,
    }
}

/// Parameters inside one cell of width `c`, excluding input preprocessing.
fn cell_body(spec: &CellSpec, c: usize, reduce: bool) -> usize {
    let mut n = 0;
    for node in &spec.nodes {
        for (src, op) in node.inputs() {
            n += edge_params(op, c, reduce && src < INPUT_NODES);
        }
    }
    n + loose_ends(spec) * c * c + 2 * c
}

/// Trainable parameter count from per-layer arithmetic on the architecture rules.
pub fn param_count_oracle(g: &Genotype, cfg: &ArchConfig) -> usize {
    let level_ch = |t: Tap| tap_level_channels(cfg, t);
    let mut total = 3 * 3 * cfg.input_shape[0] * cfg.c0 + 2 * cfg.c0;
    let cells = expected_cell_inputs(cfg);
    // distinct (slot, input channels, level gap) triples own one preprocessing each
    let preprocess = |t: Tap, level: usize, set: &mut BTreeSet<(usize, usize, usize)>| {
        for (slot, src) in cells[&t].iter().enumerate() {
            let (sl, sc) = level_ch(*src);
            set.insert((slot, sc, level - sl));
        }
    };
    for i in 1..=cfg.u {
        let width = cfg.c0 << (i - 1);
        // deep cells: shared body in one-shot mode, one body per cell otherwise
        if cfg.k > 0 {
            let bodies = if cfg.sharing == Sharing::OneShot { 1 } else { cfg.k };
            total += bodies * cell_body(&g.conv_cell, width, false);
            let mut shared = BTreeSet::new();
            for h in 1..=cfg.k {
                let mut own = BTreeSet::new();
                let set = if cfg.sharing == Sharing::OneShot { &mut shared } else { &mut own };
                preprocess(Tap::Deep { block: i, index: h }, i - 1, set);
                if cfg.sharing == Sharing::Standalone {
                    total += own.iter().map(|(_, c, _)| c * width + 2 * width).sum::<usize>();
                }
            }
            total += shared.iter().map(|(_, c, _)| c * width + 2 * width).sum::<usize>();
        }
        let bw = 2 * width;
        total += cell_body(&g.conv_cell, bw, true);
        let mut set = BTreeSet::new();
        preprocess(Tap::Broad { block: i }, i - 1, &mut set);
        total += set.iter().map(|(_, c, _)| c * bw + 2 * bw).sum::<usize>();
    }
    let ce = cfg.c0 << cfg.u;
    for j in 1..=cfg.v {
        total += cell_body(&g.enh_cell, ce, false);
        let mut set = BTreeSet::new();
        preprocess(Tap::Enh { block: j }, cfg.u, &mut set);
        total += set.iter().map(|(_, c, _)| c * ce + 2 * ce).sum::<usize>();
    }
    // projections: 1x1 conv + batch-norm per projected source
    let proj = |alloc: &[usize], sources: &[Tap]| -> usize {
        alloc.iter().zip(sources).map(|(a, s)| level_ch(*s).1 * a + 2 * a).sum()
    };
    if let Some(ds) = expected_delta_sources(cfg) {
        let alloc = doubling(cfg.delta_channels.unwrap_or(cfg.c0 << (cfg.u - 1)), ds.len());
        total += proj(&alloc, &ds);
    }
    let conv_src: Vec<Tap> = expected_gap_sources(cfg)[..cfg.u].to_vec();
    let conv_alloc = doubling(cfg.gap_conv_channels.unwrap_or(cfg.c0 * ((1 << cfg.u) - 1)), cfg.u);
    total += proj(&conv_alloc, &conv_src);
    let projected = if cfg.variant == Variant::Cce { cfg.v - 1 } else { cfg.v };
    let enh_budget = cfg.gap_enh_channels.unwrap_or(projected * ce / 2);
    let enh_alloc = equal(enh_budget, projected);
    let enh_src: Vec<Tap> = (1..=projected).map(|j| Tap::Enh { block: j }).collect();
    total += proj(&enh_alloc, &enh_src);
    let gap_width: usize =
        conv_alloc.iter().sum::<usize>() + enh_alloc.iter().sum::<usize>() + (cfg.v - projected) * ce;
    total + gap_width * cfg.num_classes + cfg.num_classes
}

/// 1:2:4... split, floor, remainder to the last.
pub fn doubling(budget: usize, n: usize) -> Vec<usize> {
    let denom = (1usize << n) - 1;
    let mut v: Vec<usize> = (0..n).map(|i| budget * (1 << i) / denom).collect();
    let rem = budget - v.iter().sum::<usize>();
    *v.last_mut().unwrap() += rem;
    v
}

pub fn equal(budget: usize, n: usize) -> Vec<usize> {
    if n == 0 {
        return vec![];
    }
    let mut v = vec![budget / n; n];
    v[n - 1] += budget % n;
    v
}
