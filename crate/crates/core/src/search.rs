//! The search loop, derivation and final training.
//!
//! Each search epoch trains the shared weights for one pass over the training split,
//! sampling a fresh child genotype per mini-batch, then trains the controller on
//! rewards measured with the inherited weights. All randomness of epoch `e` comes from
//! substreams named by `(seed, purpose, e)`, so a run resumed from a checkpoint
//! continues exactly as an uninterrupted one.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::builder::{build_graph, ArchConfig, BuildError, Sharing, Variant};
use crate::cell::{CellError, CellSpec, Genotype, Grammar, NodeSpec, OpKind, INPUT_NODES};
use crate::checkpoint::{CheckpointError, Container};
use crate::controller::{Controller, ControllerConfig, ControllerError};
use crate::data::{augment, batches, epoch_order, make_batch, AugmentSpec, DataError, Dataset, Normalization};
use crate::exec::{accuracy, activate, forward_classify, ExecError, StepConfig};
use crate::rng::substream;
use crate::tensor::{BnMode, LrSchedule, Tensor};
use crate::weights::{WeightError, WeightStore};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("phase isolation violated: {0}")]
    Isolation(String),
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("search log: {0}")]
    Log(String),
}

pub type Result<T> = std::result::Result<T, SearchError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SearchError + '_ {
    move |source| SearchError::Io { path: path.display().to_string(), source }
}

/// Search-phase enhancement count `v_s` and derivation shape `(v_d, k_d)` of the
/// best-performing setting per variant.
pub fn variant_defaults(variant: Variant) -> (usize, usize, usize) {
    match variant {
        Variant::Bnas | Variant::Ccle => (2, 1, 1),
        Variant::Cce => (2, 2, 2),
    }
}

/// Small search on 16×16 inputs: `c0 = 8`, 20 epochs, batch 64, one controller
/// update per 5 episodes.
pub fn desk_search_config(variant: Variant, classes: usize, seed: u64) -> SearchConfig {
    let (v_s, _, _) = variant_defaults(variant);
    SearchConfig {
        arch: ArchConfig {
            variant,
            u: 2,
            k: 0,
            v: v_s,
            c0: 8,
            num_classes: classes,
            input_shape: [3, 16, 16],
            ..ArchConfig::default()
        },
        epochs: 20,
        batch_size: 64,
        episodes_per_update: 5,
        seed,
        ..SearchConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Search-phase architecture; `k` is normally 0.
    pub arch: ArchConfig,
    pub controller: ControllerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub grad_clip: f64,
    pub bn_momentum: f64,
    /// Episodes sampled per controller phase.
    pub controller_episodes: usize,
    /// Episodes per controller update; the phase performs
    /// `ceil(controller_episodes / episodes_per_update)` updates.
    pub episodes_per_update: usize,
    /// Search-phase augmentation (cutout must stay disabled).
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            controller: ControllerConfig::default(),
            epochs: 150,
            batch_size: 128,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            grad_clip: 5.0,
            bn_momentum: 0.9,
            controller_episodes: 30,
            episodes_per_update: 30,
            augment: AugmentSpec::standard(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |m: &str| Err(SearchError::Config(m.into()));
        if self.augment.cutout.is_some() {
            return bad("cutout is not used during search");
        }
        if self.batch_size == 0 || self.controller_episodes == 0 || self.episodes_per_update == 0 {
            return bad("batch_size, controller_episodes and episodes_per_update must be positive");
        }
        if self.arch.sharing != Sharing::OneShot {
            return bad("search shares weights (arch.sharing = \"oneshot\")");
        }
        Ok(())
    }

    fn step(&self, lr: f64) -> StepConfig {
        StepConfig { lr, momentum: self.momentum, grad_clip: self.grad_clip, bn_momentum: self.bn_momentum }
    }
}

/// SHA-256 prefix over every tensor of a store, in key order.
pub fn store_hash(store: &WeightStore) -> String {
    let mut h = Sha256::new();
    for k in store.keys() {
        h.update(k.to_string().as_bytes());
        for v in store.get(k).expect("listed key").data() {
            h.update(v.to_le_bytes());
        }
    }
    hex16(h)
}

pub fn controller_hash(c: &Controller) -> String {
    let mut h = Sha256::new();
    for (n, t) in c.params() {
        h.update(n.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex16(h)
}

fn hex16(h: Sha256) -> String {
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Genotypes whose union of weight keys covers every choice of the grammar: for each
/// operation and each `t`, node `n` reads `min(t, n - 1)` on both slots.
pub fn covering_genotypes(grammar: Grammar) -> Vec<Genotype> {
    let mut out = Vec::new();
    for op in OpKind::ALL.into_iter().take(grammar.ops) {
        for t in 0..INPUT_NODES + grammar.nodes - 1 {
            let cell = CellSpec::new(
                (INPUT_NODES..INPUT_NODES + grammar.nodes)
                    .map(|n| {
                        let src = t.min(n - 1);
                        NodeSpec::new(src, op, src, op)
                    })
                    .collect(),
            );
            out.push(Genotype { conv_cell: cell.clone(), enh_cell: cell });
        }
    }
    out
}

/// Initializes every weight any genotype of `grammar` can use under `arch`.
pub fn init_supernet(store: &mut WeightStore, arch: &ArchConfig, grammar: Grammar) -> Result<()> {
    for g in covering_genotypes(grammar) {
        let graph = build_graph(&g, arch)?;
        activate(store, &graph)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChildPhaseStats {
    pub batches: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr_first: f64,
    pub lr_last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub tokens: Vec<usize>,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerPhaseStats {
    pub episodes: Vec<EpisodeRecord>,
    pub mean_reward: f64,
    /// Baseline after the last update of the phase.
    pub baseline: f64,
    pub mean_entropy: f64,
    pub updates: usize,
}

/// Validation records used for the reward of one episode.
pub fn reward_batch_indices(n_val: usize, batch_size: usize, seed: u64, epoch: usize, episode: usize) -> Vec<usize> {
    let mut rng = substream(seed, &format!("reward-batch-{epoch}"), episode as u64);
    let k = batch_size.min(n_val);
    sample(&mut rng, n_val, k).into_vec()
}

/// Accuracy of `genotype` with inherited weights on the given validation records.
/// Batch statistics come from the evaluated batch; the store is only read.
pub fn score(
    store: &WeightStore,
    genotype: &Genotype,
    arch: &ArchConfig,
    val: &Dataset,
    norm: &Normalization,
    indices: &[usize],
    chunk: usize,
) -> Result<f64> {
    let graph = build_graph(genotype, arch)?;
    let mut hits = 0.0;
    for idx in indices.chunks(chunk.max(1)) {
        let (x, y) = make_batch(val, idx, norm);
        let logits = forward_classify(&graph, store, &x, BnMode::BatchOnly)?;
        hits += accuracy(&logits, &y) * idx.len() as f64;
    }
    Ok(hits / indices.len().max(1) as f64)
}

/// One pass over `train`: a fresh child per mini-batch, one SGD step each. The
/// controller is only read.
pub fn train_one_shot_epoch(
    store: &mut WeightStore,
    controller: &Controller,
    train: &Dataset,
    norm: &Normalization,
    cfg: &SearchConfig,
    epoch: usize,
) -> Result<ChildPhaseStats> {
    let order = epoch_order(train.len(), cfg.seed, epoch as u64);
    let nb = train.len().div_ceil(cfg.batch_size);
    let mut arch_rng = substream(cfg.seed, "child-arch", epoch as u64);
    let mut aug_rng = substream(cfg.seed, "child-augment", epoch as u64);
    let grammar = controller.grammar();
    let (mut loss, mut acc, mut seen) = (0.0, 0.0, 0usize);
    let (mut lr_first, mut lr_last) = (f64::NAN, f64::NAN);
    for (b, idx) in batches(&order, cfg.batch_size).enumerate() {
        let lr = cfg.schedule.lr(epoch as f64 + b as f64 / nb as f64);
        if b == 0 {
            lr_first = lr;
        }
        lr_last = lr;
        let episode = controller.sample(&mut arch_rng)?;
        let genotype = grammar.decode(&episode.tokens)?;
        let graph = build_graph(&genotype, &cfg.arch)?;
        let (mut x, y) = make_batch(train, idx, norm);
        augment(&mut x, &cfg.augment, &mut aug_rng);
        let mut model = activate(store, &graph)?;
        let stats = match model.train_step(&x, &y, &cfg.step(lr)) {
            Ok(s) => s,
            Err(ExecError::NonFinite(d)) | Err(ExecError::Tensor(crate::tensor::TensorError::NonFinite(d))) => {
                return Err(SearchError::Diverged { epoch, batch: b, detail: format!("{d}; genotype:\n{genotype}") })
            }
            Err(e) => return Err(e.into()),
        };
        loss += stats.loss * idx.len() as f64;
        acc += stats.accuracy * idx.len() as f64;
        seen += idx.len();
    }
    Ok(ChildPhaseStats { batches: nb, loss: loss / seen as f64, accuracy: acc / seen as f64, lr_first, lr_last })
}

/// Samples `controller_episodes` children, rewards each with its accuracy on one
/// validation mini-batch under the inherited weights, and updates the controller.
pub fn train_controller_phase(
    store: &WeightStore,
    controller: &mut Controller,
    val: &Dataset,
    norm: &Normalization,
    cfg: &SearchConfig,
    epoch: usize,
) -> Result<ControllerPhaseStats> {
    if val.is_empty() {
        return Err(SearchError::EmptyValidation);
    }
    let mut rng = substream(cfg.seed, "controller", epoch as u64);
    let grammar = controller.grammar();
    let mut episodes = Vec::with_capacity(cfg.controller_episodes);
    let mut group: Vec<(crate::cell::TokenSequence, f64)> = Vec::new();
    let (mut entropy, mut updates, mut baseline) = (0.0, 0, controller.baseline().unwrap_or(0.0));
    for e in 0..cfg.controller_episodes {
        let ep = controller.sample(&mut rng)?;
        let genotype = grammar.decode(&ep.tokens)?;
        let idx = reward_batch_indices(val.len(), cfg.batch_size, cfg.seed, epoch, e);
        let reward = score(store, &genotype, &cfg.arch, val, norm, &idx, cfg.batch_size)?;
        episodes.push(EpisodeRecord { tokens: ep.tokens.as_slice().to_vec(), reward });
        group.push((ep.tokens, reward));
        if group.len() == cfg.episodes_per_update || e + 1 == cfg.controller_episodes {
            let stats = controller.update(&group)?;
            entropy += stats.mean_entropy * group.len() as f64;
            updates += 1;
            group.clear();
            baseline = controller.baseline().expect("set by update");
        }
    }
    let n = episodes.len() as f64;
    Ok(ControllerPhaseStats {
        mean_reward: episodes.iter().map(|e| e.reward).sum::<f64>() / n,
        episodes,
        baseline,
        mean_entropy: entropy / n,
        updates,
    })
}

/// One line of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub schema: u32,
    pub epoch: usize,
    pub child: ChildPhaseStats,
    pub controller: ControllerPhaseStats,
    pub best_reward: f64,
    /// Best genotype seen in any controller phase so far, in text form.
    pub best_genotype: String,
    pub store_hash: String,
    pub controller_hash: String,
    /// Seconds since the run (or the resumed segment) started. Excluded from
    /// determinism comparisons.
    pub wall_clock: f64,
}

impl EpochRecord {
    /// Copy with timing zeroed, for bitwise comparisons between runs.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock: 0.0, ..self.clone() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub records: Vec<EpochRecord>,
}

impl SearchLog {
    pub fn push(&mut self, r: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.epoch != last.epoch + 1 {
                return Err(SearchError::Log(format!("epoch {} after {}", r.epoch, last.epoch)));
            }
        } else if r.epoch != 0 {
            return Err(SearchError::Log(format!("first record has epoch {}", r.epoch)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = Self::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: EpochRecord =
                serde_json::from_str(line).map_err(|e| SearchError::Log(format!("line {}: {e}", i + 1)))?;
            if r.schema != LOG_SCHEMA_VERSION {
                return Err(SearchError::Log(format!("line {}: schema {} unsupported", i + 1, r.schema)));
            }
            log.push(r)?;
        }
        Ok(log)
    }

    pub fn without_timing(&self) -> Vec<EpochRecord> {
        self.records.iter().map(EpochRecord::without_timing).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SearchState {
    config: SearchConfig,
    log: SearchLog,
    best: Option<(f64, Vec<usize>)>,
}

const SEARCH_TAG: &[u8; 4] = b"SRCH";
const CONTROLLER_TAG: &[u8; 4] = b"CTRL";

/// A resumable search run.
pub struct Search {
    cfg: SearchConfig,
    train: Dataset,
    val: Dataset,
    norm: Normalization,
    pub store: WeightStore,
    pub controller: Controller,
    log: SearchLog,
    best: Option<(f64, Vec<usize>)>,
    started: Instant,
}

impl Search {
    /// Fresh run: shared weights from the `"weights"` substream, controller from the
    /// `"controller-init"` substream.
    pub fn new(cfg: SearchConfig, train: Dataset, val: Dataset, norm: Normalization) -> Result<Self> {
        cfg.validate()?;
        if val.is_empty() {
            return Err(SearchError::EmptyValidation);
        }
        let mut store = WeightStore::new(derive_seed(cfg.seed, "weights"));
        init_supernet(&mut store, &cfg.arch, cfg.controller.grammar)?;
        let controller = Controller::new(cfg.controller.clone(), derive_seed(cfg.seed, "controller-init"));
        Ok(Self {
            cfg,
            train,
            val,
            norm,
            store,
            controller,
            log: SearchLog::default(),
            best: None,
            started: Instant::now(),
        })
    }

    pub fn resume(container: &Container, train: Dataset, val: Dataset, norm: Normalization) -> Result<Self> {
        let state: SearchState = serde_json::from_slice(container.section(SEARCH_TAG)?)
            .map_err(|e| CheckpointError::Malformed(format!("search state: {e}")))?;
        let store = WeightStore::from_container(container)?;
        let controller = Controller::from_section(container.section(CONTROLLER_TAG)?)?;
        Ok(Self {
            cfg: state.config,
            train,
            val,
            norm,
            store,
            controller,
            log: state.log,
            best: state.best,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn log(&self) -> &SearchLog {
        &self.log
    }

    pub fn next_epoch(&self) -> usize {
        self.log.records.len()
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch() >= self.cfg.epochs
    }

    pub fn best(&self) -> Option<(f64, Genotype)> {
        let (r, t) = self.best.as_ref()?;
        let g = self.cfg.controller.grammar.decode(&crate::cell::TokenSequence::new(t.clone())).ok()?;
        Some((*r, g))
    }

    pub fn checkpoint(&self) -> Container {
        let mut c = Container::default();
        self.store.add_to_container(&mut c);
        c.push(CONTROLLER_TAG, self.controller.to_section());
        let state = SearchState { config: self.cfg.clone(), log: self.log.clone(), best: self.best.clone() };
        c.push(SEARCH_TAG, serde_json::to_vec(&state).expect("state serializes"));
        c
    }

    /// Runs the next epoch and appends its record.
    pub fn step_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.next_epoch();
        let theta = controller_hash(&self.controller);
        let child = train_one_shot_epoch(&mut self.store, &self.controller, &self.train, &self.norm, &self.cfg, epoch)?;
        if controller_hash(&self.controller) != theta {
            return Err(SearchError::Isolation("controller changed during weight training".into()));
        }
        let weights = store_hash(&self.store);
        let ctrl = train_controller_phase(&self.store, &mut self.controller, &self.val, &self.norm, &self.cfg, epoch)?;
        if store_hash(&self.store) != weights {
            return Err(SearchError::Isolation("shared weights changed during controller training".into()));
        }
        for e in &ctrl.episodes {
            if self.best.as_ref().is_none_or(|(r, _)| e.reward > *r) {
                self.best = Some((e.reward, e.tokens.clone()));
            }
        }
        let (best_reward, best_genotype) = match self.best() {
            Some((r, g)) => (r, g.to_string()),
            None => (0.0, String::new()),
        };
        let record = EpochRecord {
            schema: LOG_SCHEMA_VERSION,
            epoch,
            child,
            controller: ctrl,
            best_reward,
            best_genotype,
            store_hash: weights,
            controller_hash: controller_hash(&self.controller),
            wall_clock: self.started.elapsed().as_secs_f64(),
        };
        self.log.push(record)?;
        Ok(self.log.records.last().expect("just pushed"))
    }

    /// Runs until `cfg.epochs`, calling `on_epoch` after each one.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Search, &EpochRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let r = self.step_epoch()?.clone();
            on_epoch(self, &r)?;
        }
        Ok(())
    }
}

/// Seed of a named component stream.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    use rand::RngCore;
    substream(seed, name, 0).next_u64()
}

/// Writes the search log, the latest checkpoint and (optionally) a per-epoch
/// checkpoint into `dir`.
pub fn write_search_artifacts(dir: &Path, search: &Search, epoch_checkpoint: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let log = dir.join("search_log.jsonl");
    std::fs::write(&log, search.log().to_jsonl()).map_err(io(&log))?;
    let c = search.checkpoint();
    c.save(&dir.join("checkpoint.bin"))?;
    if epoch_checkpoint {
        c.save(&dir.join(format!("checkpoint_epoch{:04}.bin", search.next_epoch())))?;
    }
    if let Some((r, g)) = search.best() {
        let p = dir.join("best_genotype.txt");
        let mut f = std::fs::File::create(&p).map_err(io(&p))?;
        write!(f, "# best reward {r:.6}\n{g}").map_err(io(&p))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub genotype: Genotype,
    pub score: f64,
}

/// Samples `n` genotypes from the controller and ranks them by inherited-weight
/// accuracy on the full validation split, best first (ties keep sampling order).
#[allow(clippy::too_many_arguments)]
pub fn derive(
    controller: &Controller,
    store: &WeightStore,
    arch: &ArchConfig,
    val: &Dataset,
    norm: &Normalization,
    n: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Candidate>> {
    let mut rng = substream(seed, "derive", 0);
    let all: Vec<usize> = (0..val.len()).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let ep = controller.sample(&mut rng)?;
        let genotype = controller.grammar().decode(&ep.tokens)?;
        let s = score(store, &genotype, arch, val, norm, &all, batch_size)?;
        out.push(Candidate { genotype, score: s });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Scores of `n` uniformly random genotypes under the same weights and split.
#[allow(clippy::too_many_arguments)]
pub fn random_scores(
    grammar: Grammar,
    store: &WeightStore,
    arch: &ArchConfig,
    val: &Dataset,
    norm: &Normalization,
    n: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = substream(seed, "random-genotypes", 0);
    let all: Vec<usize> = (0..val.len()).collect();
    (0..n).map(|_| score(store, &grammar.random_genotype(&mut rng), arch, val, norm, &all, batch_size)).collect()
}

/// Rewards of `n` uniformly random genotypes, each measured like a controller
/// episode: accuracy on one validation mini-batch under the given weights.
#[allow(clippy::too_many_arguments)]
pub fn random_rewards(
    grammar: Grammar,
    store: &WeightStore,
    arch: &ArchConfig,
    val: &Dataset,
    norm: &Normalization,
    n: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = substream(seed, "random-genotypes", 1);
    (0..n)
        .map(|i| {
            let idx = reward_batch_indices(val.len(), batch_size, seed ^ 0x5eed, usize::MAX, i);
            score(store, &grammar.random_genotype(&mut rng), arch, val, norm, &idx, batch_size)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Derivation architecture; `sharing` is forced to standalone.
    pub arch: ArchConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub grad_clip: f64,
    pub bn_momentum: f64,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let (_, v_d, k_d) = variant_defaults(Variant::Bnas);
        Self {
            arch: ArchConfig { k: k_d, v: v_d, sharing: Sharing::Standalone, ..ArchConfig::default() },
            epochs: 630,
            batch_size: 128,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            grad_clip: 5.0,
            bn_momentum: 0.9,
            augment: AugmentSpec::standard().with_cutout(16),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<TrainEpoch>,
    /// Accuracy on the un-augmented training split with running statistics.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub parameters: usize,
}

/// Accuracy and mean loss over a whole split with running BN statistics.
pub fn evaluate(
    graph: &crate::builder::ComputeGraph,
    store: &WeightStore,
    ds: &Dataset,
    norm: &Normalization,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let (mut hits, mut loss) = (0.0, 0.0);
    for idx in all.chunks(batch_size.max(1)) {
        let (x, y) = make_batch(ds, idx, norm);
        let logits = forward_classify(graph, store, &x, BnMode::Inference)?;
        hits += accuracy(&logits, &y) * idx.len() as f64;
        loss += mean_cross_entropy(&logits, &y) * idx.len() as f64;
    }
    let n = ds.len() as f64;
    Ok((hits / n, loss / n))
}

fn mean_cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lz = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        total += lz - row[y];
    }
    total / labels.len().max(1) as f64
}

/// Trains `genotype` from fresh, unshared weights and reports test metrics.
pub fn final_train(
    genotype: &Genotype,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    norm: &Normalization,
    mut on_epoch: impl FnMut(&TrainEpoch),
) -> Result<(WeightStore, TrainReport)> {
    let arch = ArchConfig { sharing: Sharing::Standalone, ..cfg.arch.clone() };
    let graph = build_graph(genotype, &arch)?;
    let mut store = WeightStore::new(derive_seed(cfg.seed, "final-weights"));
    let nb = train.len().div_ceil(cfg.batch_size.max(1));
    let step = |lr| StepConfig { lr, momentum: cfg.momentum, grad_clip: cfg.grad_clip, bn_momentum: cfg.bn_momentum };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    {
        let mut model = activate(&mut store, &graph)?;
        for epoch in 0..cfg.epochs {
            let order = epoch_order(train.len(), derive_seed(cfg.seed, "final-order"), epoch as u64);
            let mut aug_rng = substream(cfg.seed, "final-augment", epoch as u64);
            let (mut loss, mut acc) = (0.0, 0.0);
            let lr0 = cfg.schedule.lr(epoch as f64);
            for (b, idx) in batches(&order, cfg.batch_size).enumerate() {
                let lr = cfg.schedule.lr(epoch as f64 + b as f64 / nb as f64);
                let (mut x, y) = make_batch(train, idx, norm);
                augment(&mut x, &cfg.augment, &mut aug_rng);
                let s = model.train_step(&x, &y, &step(lr)).map_err(|e| match e {
                    ExecError::NonFinite(d) => SearchError::Diverged { epoch, batch: b, detail: d },
                    e => e.into(),
                })?;
                loss += s.loss * idx.len() as f64;
                acc += s.accuracy * idx.len() as f64;
            }
            let rec =
                TrainEpoch { epoch, lr: lr0, loss: loss / train.len() as f64, accuracy: acc / train.len() as f64 };
            on_epoch(&rec);
            epochs.push(rec);
        }
    }
    let (train_accuracy, _) = evaluate(&graph, &store, train, norm, cfg.batch_size)?;
    let (test_accuracy, test_loss) = evaluate(&graph, &store, test, norm, cfg.batch_size)?;
    let report = TrainReport { epochs, train_accuracy, test_accuracy, test_loss, parameters: graph.parameter_count() };
    Ok((store, report))
}

const MODEL_TAG: &[u8; 4] = b"MODL";

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    arch: ArchConfig,
    genotype: String,
}

/// Checkpoint of a trained standalone model: weights plus architecture.
pub fn model_checkpoint(store: &WeightStore, arch: &ArchConfig, genotype: &Genotype) -> Container {
    let mut c = Container::default();
    store.add_to_container(&mut c);
    let meta = ModelMeta { arch: arch.clone(), genotype: genotype.to_string() };
    c.push(MODEL_TAG, serde_json::to_vec(&meta).expect("meta serializes"));
    c
}

pub fn load_model(c: &Container) -> Result<(WeightStore, ArchConfig, Genotype)> {
    let meta: ModelMeta = serde_json::from_slice(c.section(MODEL_TAG)?)
        .map_err(|e| CheckpointError::Malformed(format!("model metadata: {e}")))?;
    let g = crate::cell::parse_genotype(&meta.genotype)?;
    Ok((WeightStore::from_container(c)?, meta.arch, g))
}

/// Parameter counts keyed by genotype text, for reports.
pub fn parameter_table(genotypes: &[Genotype], arch: &ArchConfig) -> Result<BTreeMap<String, usize>> {
    genotypes.iter().map(|g| Ok((g.to_string(), build_graph(g, arch)?.parameter_count()))).collect()
}
