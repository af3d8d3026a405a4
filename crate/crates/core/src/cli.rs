//! Command-line front end: run configuration, presets, subcommands and reports.
//!
//! A run configuration is assembled in layers: the preset (or built-in defaults),
//! then the TOML file given with `--config`, then each `--set key=value`. The merged
//! document is validated against the schema and written back to the run directory
//! as `config.toml` with every effective value, together with a `seed` file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{build_graph, ArchConfig, Sharing, Variant};
use crate::cell::{parse_genotype, serialize_genotype, Genotype};
use crate::checkpoint::Container;
use crate::controller::ControllerConfig;
use crate::data::{
    load_cifar10_binary, synthetic_dataset_with, AugmentSpec, Dataset, Normalization, Split, SyntheticSpec,
};
use crate::search::{
    self, derive, derive_seed, evaluate, final_train, load_model, model_checkpoint, variant_defaults, Candidate,
    Search, SearchConfig, SearchError, SearchLog, TrainConfig,
};
use crate::tensor::LrSchedule;

/// Environment variable naming the default CIFAR-10 directory.
pub const DATA_ENV: &str = "BROADNAS_DATA";
pub const PRESETS: [&str; 5] = ["cifar10-bnas", "cifar10-ccle", "cifar10-cce", "desk-synthetic", "desk-cifar-subset"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifacts in {dir}: expected {expected:?}")]
    MissingArtifacts { dir: String, expected: Vec<String> },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Search(_) => "runtime",
            CliError::Io { .. } => "io",
            CliError::MissingArtifacts { .. } => "missing_artifacts",
            CliError::Invalid(_) => "invalid",
        }
    }

    /// One-line JSON error report.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::json!({ "error": self.kind(), "message": self.to_string() });
        if let CliError::Config { path, .. } = self {
            v["path"] = path.clone().into();
        }
        if let CliError::MissingArtifacts { expected, .. } = self {
            v["expected"] = expected.clone().into();
        }
        v.to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

fn cfg_err(path: &str, message: impl ToString) -> CliError {
    CliError::Config { path: path.into(), message: message.to_string() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 binary directory; empty means `$BROADNAS_DATA`, then `data/cifar-10-batches-bin`.
    pub dir: String,
    /// Training records; 0 keeps every record not held out for validation.
    pub train_size: usize,
    /// Validation records, held out from the end of the training files.
    pub val_size: usize,
    /// Test records; 0 keeps all.
    pub test_size: usize,
    pub synthetic_classes: usize,
    pub synthetic_side: usize,
    pub synthetic_noise: f64,
    pub synthetic_jitter: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            dir: String::new(),
            train_size: 2000,
            val_size: 500,
            test_size: 500,
            synthetic_classes: 10,
            synthetic_side: 16,
            synthetic_noise: crate::data::DEFAULT_NOISE,
            synthetic_jitter: crate::data::DEFAULT_JITTER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub grad_clip: f64,
    pub bn_momentum: f64,
    pub controller_episodes: usize,
    pub episodes_per_update: usize,
    pub augment: AugmentSpec,
    /// Also keep `checkpoint_epochNNNN.bin` every this many epochs; 0 keeps only the latest.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeriveSection {
    /// Enhancement blocks of the derived architecture.
    pub v: usize,
    /// Deep cells per convolution block of the derived architecture.
    pub k: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub grad_clip: f64,
    pub bn_momentum: f64,
    pub augment: AugmentSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub v: Vec<usize>,
    pub k: Vec<usize>,
}

/// Everything a run needs. `arch` describes the search-phase network; `derive`
/// overrides its `v` and `k` for derivation and final training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub controller: ControllerConfig,
    pub search: SearchSection,
    pub derive: DeriveSection,
    pub train: TrainSection,
    pub grid: GridSection,
}

impl RunConfig {
    /// Named configuration. `cifar10-*` presets carry the search/derivation shape of the
    /// best setting per variant and full-length schedules; desk presets are small.
    pub fn preset(name: &str) -> Option<Self> {
        let full = |variant: Variant| {
            let (v_s, v_d, k_d) = variant_defaults(variant);
            let s = SearchConfig::default();
            let t = TrainConfig::default();
            RunConfig {
                preset: name.into(),
                seed: 0,
                data: DataConfig {
                    source: DataSource::Cifar10,
                    train_size: 0,
                    val_size: 5000,
                    test_size: 0,
                    ..DataConfig::default()
                },
                arch: ArchConfig { variant, u: 2, k: 0, v: v_s, c0: 16, ..ArchConfig::default() },
                controller: ControllerConfig::default(),
                search: SearchSection {
                    epochs: s.epochs,
                    batch_size: s.batch_size,
                    schedule: s.schedule,
                    momentum: s.momentum,
                    grad_clip: s.grad_clip,
                    bn_momentum: s.bn_momentum,
                    controller_episodes: s.controller_episodes,
                    episodes_per_update: s.episodes_per_update,
                    augment: s.augment,
                    checkpoint_every: 10,
                },
                derive: DeriveSection { v: v_d, k: k_d, candidates: 10 },
                train: TrainSection {
                    epochs: t.epochs,
                    batch_size: t.batch_size,
                    schedule: t.schedule,
                    momentum: t.momentum,
                    grad_clip: t.grad_clip,
                    bn_momentum: t.bn_momentum,
                    augment: t.augment,
                },
                grid: GridSection { v: vec![1, 2, 3], k: vec![0, 1, 2] },
            }
        };
        let desk = |source: DataSource| {
            let mut c = full(Variant::Bnas);
            let s = search::desk_search_config(Variant::Bnas, 10, 0);
            c.preset = name.into();
            c.data = DataConfig { source, ..DataConfig::default() };
            c.arch = s.arch;
            c.search.epochs = s.epochs;
            c.search.batch_size = s.batch_size;
            c.search.controller_episodes = s.controller_episodes;
            c.search.episodes_per_update = s.episodes_per_update;
            c.search.checkpoint_every = 0;
            c.train.epochs = 10;
            c.train.batch_size = 64;
            c.train.schedule.t0 = 10.0;
            c.train.augment = AugmentSpec::standard().with_cutout(8);
            if source == DataSource::Cifar10 {
                c.arch.input_shape = [3, 32, 32];
                c.train.augment = AugmentSpec::standard().with_cutout(16);
            }
            c
        };
        Some(match name {
            "cifar10-bnas" => full(Variant::Bnas),
            "cifar10-ccle" => full(Variant::Ccle),
            "cifar10-cce" => full(Variant::Cce),
            "desk-synthetic" => desk(DataSource::Synthetic),
            "desk-cifar-subset" => desk(DataSource::Cifar10),
            _ => return None,
        })
    }

    pub fn search_config(&self) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            arch: ArchConfig { sharing: Sharing::OneShot, ..self.arch.clone() },
            controller: self.controller.clone(),
            epochs: s.epochs,
            batch_size: s.batch_size,
            schedule: s.schedule,
            momentum: s.momentum,
            grad_clip: s.grad_clip,
            bn_momentum: s.bn_momentum,
            controller_episodes: s.controller_episodes,
            episodes_per_update: s.episodes_per_update,
            augment: s.augment,
            seed: self.seed,
        }
    }

    /// Derivation-phase architecture.
    pub fn derived_arch(&self, v: usize, k: usize) -> ArchConfig {
        ArchConfig { v, k, sharing: Sharing::Standalone, ..self.arch.clone() }
    }

    pub fn train_config(&self, v: usize, k: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            arch: self.derived_arch(v, k),
            epochs: t.epochs,
            batch_size: t.batch_size,
            schedule: t.schedule,
            momentum: t.momentum,
            grad_clip: t.grad_clip,
            bn_momentum: t.bn_momentum,
            augment: t.augment,
            seed: self.seed,
        }
    }

    /// Cross-field validation applied after loading.
    pub fn check(&self) -> Result<()> {
        self.search_config().validate().map_err(|e| cfg_err("search", e))?;
        self.derived_arch(self.derive.v, self.derive.k).validate().map_err(|e| cfg_err("derive", e))?;
        if self.data.val_size == 0 {
            return Err(cfg_err("data.val_size", "must be positive"));
        }
        if self.derive.candidates == 0 {
            return Err(cfg_err("derive.candidates", "must be positive"));
        }
        if self.train.batch_size == 0 {
            return Err(cfg_err("train.batch_size", "must be positive"));
        }
        if self.data.source == DataSource::Synthetic {
            let [c, h, w] = self.arch.input_shape;
            let side = self.data.synthetic_side;
            if c != 3 || h != side || w != side {
                return Err(cfg_err("arch.input_shape", format!("synthetic images are [3, {side}, {side}]")));
            }
            if self.arch.num_classes != self.data.synthetic_classes {
                return Err(cfg_err("arch.num_classes", "must equal data.synthetic_classes"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("x = {text}"))
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(text.into()))
}

fn apply_set(doc: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, value) = assignment.split_once('=').ok_or_else(|| cfg_err(assignment, "expected key=value"))?;
    let mut slot = &mut *doc;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = slot.as_table_mut().ok_or_else(|| cfg_err(&parts[..i].join("."), "not a table"))?;
        slot = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    *slot = parse_scalar(value.trim());
    Ok(())
}

/// Builds the effective configuration from a preset name, an optional TOML file and
/// `key=value` overrides.
pub fn load_config(preset: Option<&str>, file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let file_doc = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            let doc: toml::Table = toml::from_str(&text).map_err(|e| cfg_err(&p.display().to_string(), e))?;
            Some(doc)
        }
        None => None,
    };
    let name = preset
        .map(str::to_string)
        .or_else(|| file_doc.as_ref().and_then(|d| d.get("preset")).and_then(|v| v.as_str()).map(str::to_string))
        .unwrap_or_else(|| "desk-synthetic".into());
    let base = RunConfig::preset(&name)
        .ok_or_else(|| cfg_err("preset", format!("unknown preset `{name}`; known: {}", PRESETS.join(", "))))?;
    let mut doc = toml::Value::try_from(&base).expect("preset serializes");
    if let Some(d) = file_doc {
        merge(&mut doc, toml::Value::Table(d));
    }
    for s in sets {
        apply_set(&mut doc, s)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        cfg_err(&path, inner.lines().next().unwrap_or_default())
    })?;
    cfg.check()?;
    Ok(cfg)
}

/// Train, validation and test splits plus the normalization they use.
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub norm: Normalization,
}

pub fn data_dir(cfg: &DataConfig) -> PathBuf {
    if !cfg.dir.is_empty() {
        return PathBuf::from(&cfg.dir);
    }
    std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/cifar-10-batches-bin"))
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let seed = derive_seed(cfg.seed, "data");
    let wrap = |e: crate::data::DataError| CliError::Search(e.into());
    match d.source {
        DataSource::Synthetic => {
            let spec = SyntheticSpec {
                classes: d.synthetic_classes,
                n: d.train_size.max(1),
                side: d.synthetic_side,
                noise: d.synthetic_noise,
                jitter: d.synthetic_jitter,
                seed,
            };
            let train = synthetic_dataset_with(&spec, Split::Train).map_err(wrap)?;
            let val = synthetic_dataset_with(&SyntheticSpec { n: d.val_size, ..spec }, Split::Val).map_err(wrap)?;
            let test =
                synthetic_dataset_with(&SyntheticSpec { n: d.test_size.max(1), ..spec }, Split::Test).map_err(wrap)?;
            let norm = Normalization::from_dataset(&train);
            Ok(Splits { train, val, test, norm })
        }
        DataSource::Cifar10 => {
            let (full, test) = load_cifar10_binary(&data_dir(d)).map_err(wrap)?;
            let (train, val) = full.split_last(d.val_size).map_err(wrap)?;
            let train = if d.train_size > 0 { train.take(d.train_size, Split::Train).map_err(wrap)? } else { train };
            let test = if d.test_size > 0 { test.take(d.test_size, Split::Test).map_err(wrap)? } else { test };
            Ok(Splits { train, val, test, norm: Normalization::cifar10() })
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "broadnas", version, about = "Broad convolutional architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset to start from (default: the file's `preset` key, else desk-synthetic).
    #[arg(long)]
    pub preset: Option<String>,
    /// Override one field, e.g. `--set search.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train shared weights and the controller.
    Search {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/checkpoint.bin` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Rank controller samples by validation accuracy under the shared weights.
    Derive {
        #[command(flatten)]
        common: Common,
        /// Search checkpoint (default `<out>/checkpoint.bin`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a genotype from scratch and report test accuracy.
    Train {
        #[command(flatten)]
        common: Common,
        /// Genotype file (default `<out>/derived_genotype.txt`).
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Evaluate a trained model checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint (default `<out>/model.bin`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Build a genotype's graph and report its layers and parameter count.
    Compile {
        #[command(flatten)]
        common: Common,
        /// Genotype file (default: a random genotype drawn from the run seed).
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Train a genotype for every (v, k) pair of the grid.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses arguments, runs the command and returns the process exit status. Errors
/// go to stderr as one JSON line; runtime failures also leave `diagnostics.json`
/// in the run directory.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let out = match &cli.command {
        Command::Search { common, .. }
        | Command::Derive { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Compile { common, .. }
        | Command::Grid { common, .. } => common.out.clone(),
        Command::Report { out } => out.clone(),
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            if e.exit_code() == 1 && std::fs::create_dir_all(&out).is_ok() {
                let mut chain = Vec::new();
                let mut src: Option<&dyn std::error::Error> = Some(&e);
                while let Some(s) = src {
                    chain.push(s.to_string());
                    src = s.source();
                }
                let diag = serde_json::json!({
                    "error": e.kind(),
                    "message": e.to_string(),
                    "chain": chain,
                });
                let _ = std::fs::write(out.join("diagnostics.json"), format!("{diag:#}\n"));
            }
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Search { common, resume } => cmd_search(&common, resume),
        Command::Derive { common, checkpoint } => cmd_derive(&common, checkpoint),
        Command::Train { common, genotype } => cmd_train(&common, genotype),
        Command::Eval { common, checkpoint } => cmd_eval(&common, checkpoint),
        Command::Compile { common, genotype } => cmd_compile(&common, genotype),
        Command::Grid { common, genotype } => cmd_grid(&common, genotype),
        Command::Report { out } => {
            let text = report(&out)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Loads the config and writes the snapshot and seed into `out`.
fn prepare(common: &Common) -> Result<RunConfig> {
    let cfg = load_config(common.preset.as_deref(), common.config.as_deref(), &common.sets)?;
    snapshot(&cfg, &common.out)?;
    Ok(cfg)
}

pub fn snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    write(&out.join("seed"), &format!("{}\n", cfg.seed))
}

fn read_genotype(path: &Path) -> Result<Genotype> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let body: String = text.lines().filter(|l| !l.trim_start().starts_with('#')).collect::<Vec<_>>().join("\n");
    parse_genotype(&body).map_err(|e| CliError::Search(e.into()))
}

fn cmd_search(common: &Common, resume: bool) -> Result<()> {
    let cfg = prepare(common)?;
    let splits = load_splits(&cfg)?;
    let ckpt = common.out.join("checkpoint.bin");
    let mut search = if resume && ckpt.exists() {
        let c = Container::load(&ckpt).map_err(SearchError::from)?;
        let s = Search::resume(&c, splits.train, splits.val, splits.norm)?;
        if *s.config() != cfg.search_config() {
            return Err(CliError::Invalid("checkpoint was written with a different configuration".into()));
        }
        s
    } else {
        Search::new(cfg.search_config(), splits.train, splits.val, splits.norm)?
    };
    let every = cfg.search.checkpoint_every;
    search.run(|s, r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.3}  reward {:.3}  baseline {:.3}",
            r.epoch, r.child.loss, r.child.accuracy, r.controller.mean_reward, r.controller.baseline
        );
        search::write_search_artifacts(&common.out, s, every > 0 && s.next_epoch() % every == 0)
    })?;
    search::write_search_artifacts(&common.out, &search, false)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DeriveReport {
    v: usize,
    k: usize,
    candidates: Vec<RankedCandidate>,
}

#[derive(Serialize, Deserialize)]
struct RankedCandidate {
    rank: usize,
    score: f64,
    search_parameters: usize,
    derived_parameters: usize,
    genotype: String,
}

fn cmd_derive(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = prepare(common)?;
    let path = checkpoint.unwrap_or_else(|| common.out.join("checkpoint.bin"));
    let c = Container::load(&path).map_err(SearchError::from)?;
    let splits = load_splits(&cfg)?;
    let search = Search::resume(&c, splits.train, splits.val.clone(), splits.norm.clone())?;
    let scfg = search.config();
    let ranked: Vec<Candidate> = derive(
        &search.controller,
        &search.store,
        &scfg.arch,
        &splits.val,
        &splits.norm,
        cfg.derive.candidates,
        scfg.batch_size,
        derive_seed(cfg.seed, "derive"),
    )?;
    let derived = cfg.derived_arch(cfg.derive.v, cfg.derive.k);
    let mut rows = Vec::new();
    for (i, cand) in ranked.iter().enumerate() {
        rows.push(RankedCandidate {
            rank: i + 1,
            score: cand.score,
            search_parameters: build_graph(&cand.genotype, &scfg.arch).map_err(SearchError::from)?.parameter_count(),
            derived_parameters: build_graph(&cand.genotype, &derived).map_err(SearchError::from)?.parameter_count(),
            genotype: cand.genotype.to_string(),
        });
    }
    let rep = DeriveReport { v: cfg.derive.v, k: cfg.derive.k, candidates: rows };
    write(&common.out.join("derive.json"), &(serde_json::to_string_pretty(&rep).expect("serializes") + "\n"))?;
    write(&common.out.join("derived_genotype.txt"), &serialize_genotype(&ranked[0].genotype))?;
    for r in &rep.candidates {
        println!("{:>2}  {:.4}  {:>8} params", r.rank, r.score, r.derived_parameters);
    }
    Ok(())
}

fn train_into(
    cfg: &RunConfig,
    genotype: &Genotype,
    v: usize,
    k: usize,
    out: &Path,
    splits: &Splits,
) -> Result<search::TrainReport> {
    let tcfg = cfg.train_config(v, k);
    let mut log = String::new();
    let (store, rep) = final_train(genotype, &tcfg, &splits.train, &splits.test, &splits.norm, |e| {
        eprintln!("[v={v} k={k}] epoch {:>3}  lr {:.5}  loss {:.4}  acc {:.3}", e.epoch, e.lr, e.loss, e.accuracy);
        log.push_str(&serde_json::to_string(e).expect("serializes"));
        log.push('\n');
    })?;
    write(&out.join("train_log.jsonl"), &log)?;
    let metrics = serde_json::json!({
        "v": v,
        "k": k,
        "parameters": rep.parameters,
        "train_accuracy": rep.train_accuracy,
        "test_accuracy": rep.test_accuracy,
        "test_loss": rep.test_loss,
        "genotype": genotype.to_string(),
    });
    write(&out.join("train_metrics.json"), &format!("{metrics:#}\n"))?;
    model_checkpoint(&store, &tcfg.arch, genotype).save(&out.join("model.bin")).map_err(SearchError::from)?;
    Ok(rep)
}

fn cmd_train(common: &Common, genotype: Option<PathBuf>) -> Result<()> {
    let cfg = prepare(common)?;
    let g = read_genotype(&genotype.unwrap_or_else(|| common.out.join("derived_genotype.txt")))?;
    let splits = load_splits(&cfg)?;
    let rep = train_into(&cfg, &g, cfg.derive.v, cfg.derive.k, &common.out, &splits)?;
    println!("test accuracy {:.4}  parameters {}", rep.test_accuracy, rep.parameters);
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = prepare(common)?;
    let path = checkpoint.unwrap_or_else(|| common.out.join("model.bin"));
    let c = Container::load(&path).map_err(SearchError::from)?;
    let (store, arch, genotype) = load_model(&c)?;
    let graph = build_graph(&genotype, &arch).map_err(SearchError::from)?;
    let splits = load_splits(&cfg)?;
    let (acc, loss) = evaluate(&graph, &store, &splits.test, &splits.norm, cfg.train.batch_size)?;
    let v = serde_json::json!({
        "test_accuracy": acc,
        "test_loss": loss,
        "parameters": graph.parameter_count(),
        "records": splits.test.len(),
    });
    write(&common.out.join("eval.json"), &format!("{v:#}\n"))?;
    println!("test accuracy {acc:.4}  loss {loss:.4}");
    Ok(())
}

fn genotype_or_random(cfg: &RunConfig, path: Option<PathBuf>) -> Result<Genotype> {
    match path {
        Some(p) => read_genotype(&p),
        None => {
            let mut rng = crate::rng::substream(cfg.seed, "compile-genotype", 0);
            Ok(cfg.controller.grammar.random_genotype(&mut rng))
        }
    }
}

fn cmd_compile(common: &Common, genotype: Option<PathBuf>) -> Result<()> {
    let cfg = prepare(common)?;
    let g = genotype_or_random(&cfg, genotype)?;
    let search_graph = build_graph(&g, &cfg.search_config().arch).map_err(SearchError::from)?;
    let derived_graph = build_graph(&g, &cfg.derived_arch(cfg.derive.v, cfg.derive.k)).map_err(SearchError::from)?;
    write(&common.out.join("graph.txt"), &derived_graph.dump())?;
    write(&common.out.join("genotype.txt"), &serialize_genotype(&g))?;
    let v = serde_json::json!({
        "variant": cfg.arch.variant.name(),
        "v_s": cfg.arch.v,
        "v_d": cfg.derive.v,
        "k_d": cfg.derive.k,
        "search_parameters": search_graph.parameter_count(),
        "derived_parameters": derived_graph.parameter_count(),
        "layers": derived_graph.layers.len(),
    });
    write(&common.out.join("compile.json"), &format!("{v:#}\n"))?;
    println!("variant {}", cfg.arch.variant.name());
    println!("(v_s, v_d, k_d) = ({}, {}, {})", cfg.arch.v, cfg.derive.v, cfg.derive.k);
    println!("parameters: search {}  derived {}", search_graph.parameter_count(), derived_graph.parameter_count());
    Ok(())
}

/// Name of the run directory of one grid cell.
pub fn grid_cell_dir(v: usize, k: usize) -> String {
    format!("v{v}_k{k}")
}

fn cmd_grid(common: &Common, genotype: Option<PathBuf>) -> Result<()> {
    let cfg = prepare(common)?;
    let g = genotype_or_random(&cfg, genotype)?;
    let splits = load_splits(&cfg)?;
    let mut csv = String::from("v,k,parameters,train_accuracy,test_accuracy\n");
    for &v in &cfg.grid.v {
        for &k in &cfg.grid.k {
            let dir = common.out.join(grid_cell_dir(v, k));
            let mut cell = cfg.clone();
            cell.derive.v = v;
            cell.derive.k = k;
            cell.check()?;
            snapshot(&cell, &dir)?;
            write(&dir.join("genotype.txt"), &serialize_genotype(&g))?;
            let rep = train_into(&cell, &g, v, k, &dir, &splits)?;
            writeln!(csv, "{v},{k},{},{:.6},{:.6}", rep.parameters, rep.train_accuracy, rep.test_accuracy)
                .expect("string write");
        }
    }
    write(&common.out.join("grid.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Files `report` needs in a run directory.
pub const REPORT_REQUIRED: [&str; 2] = ["config.toml", "search_log.jsonl"];

/// Writes `report.md` and `reward_curve.csv` into `dir` and returns the report text.
/// Output depends only on the artifacts, so repeated calls produce identical files.
pub fn report(dir: &Path) -> Result<String> {
    let missing: Vec<String> =
        REPORT_REQUIRED.iter().filter(|f| !dir.join(f).is_file()).map(|f| f.to_string()).collect();
    if !missing.is_empty() {
        return Err(CliError::MissingArtifacts {
            dir: dir.display().to_string(),
            expected: REPORT_REQUIRED.iter().map(|s| s.to_string()).collect(),
        });
    }
    let log_path = dir.join("search_log.jsonl");
    let text = std::fs::read_to_string(&log_path).map_err(io_err(&log_path))?;
    let log = SearchLog::from_jsonl(&text)?;
    if log.records.is_empty() {
        return Err(CliError::Invalid(format!("{} has no records", log_path.display())));
    }
    let cfg_path = dir.join("config.toml");
    let cfg_text = std::fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let cfg: RunConfig = toml::from_str(&cfg_text).map_err(|e| cfg_err(&cfg_path.display().to_string(), e))?;

    let mut csv = String::from("epoch,child_loss,child_accuracy,mean_reward,baseline,best_reward\n");
    for r in &log.records {
        writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.child.loss, r.child.accuracy, r.controller.mean_reward, r.controller.baseline, r.best_reward
        )
        .expect("string write");
    }
    write(&dir.join("reward_curve.csv"), &csv)?;

    let last = log.records.last().expect("non-empty");
    let mut md = String::new();
    writeln!(md, "# Run report\n").unwrap();
    writeln!(md, "- preset: {}", cfg.preset).unwrap();
    writeln!(md, "- variant: {}", cfg.arch.variant.name()).unwrap();
    writeln!(md, "- seed: {}", cfg.seed).unwrap();
    writeln!(md, "- (v_s, v_d, k_d): ({}, {}, {})", cfg.arch.v, cfg.derive.v, cfg.derive.k).unwrap();
    writeln!(md, "- epochs: {}", log.records.len()).unwrap();
    writeln!(md, "- final mean reward: {:.4}", last.controller.mean_reward).unwrap();
    writeln!(md, "- best reward: {:.4}", last.best_reward).unwrap();
    if let Ok(g) = parse_genotype(&last.best_genotype) {
        let s = build_graph(&g, &cfg.search_config().arch).map(|g| g.parameter_count());
        let d = build_graph(&g, &cfg.derived_arch(cfg.derive.v, cfg.derive.k)).map(|g| g.parameter_count());
        if let (Ok(s), Ok(d)) = (s, d) {
            writeln!(md, "- best genotype parameters: search {s}, derived {d}").unwrap();
        }
    }
    writeln!(md, "\n## Best genotype\n\n```\n{}\n```", last.best_genotype.trim_end()).unwrap();
    let derive_path = dir.join("derive.json");
    if let Ok(t) = std::fs::read_to_string(&derive_path) {
        if let Ok(rep) = serde_json::from_str::<DeriveReport>(&t) {
            writeln!(md, "\n## Derived candidates\n\n| rank | score | parameters |\n|---|---|---|").unwrap();
            for c in &rep.candidates {
                writeln!(md, "| {} | {:.4} | {} |", c.rank, c.score, c.derived_parameters).unwrap();
            }
        }
    }
    if let Ok(t) = std::fs::read_to_string(dir.join("train_metrics.json")) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&t) {
            writeln!(md, "\n## Final training\n").unwrap();
            writeln!(md, "- test accuracy: {}", v["test_accuracy"]).unwrap();
            writeln!(md, "- parameters: {}", v["parameters"]).unwrap();
        }
    }
    writeln!(md, "\n## Reward curve\n\n| epoch | mean reward | baseline |\n|---|---|---|").unwrap();
    for r in &log.records {
        writeln!(md, "| {} | {:.4} | {:.4} |", r.epoch, r.controller.mean_reward, r.controller.baseline).unwrap();
    }
    write(&dir.join("report.md"), &md)?;
    Ok(md)
}
