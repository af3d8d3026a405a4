//! Structured weight keys and the shared weight store.
//!
//! Every trainable tensor of any architecture in the search space is addressed by a
//! [`WeightKey`]. Two architectures that place the same operation at the same position
//! of the same cell site produce the same key and therefore share the tensor.
//!
//! Keys have a canonical text form used in checkpoints and graph dumps, for example
//! `conv1.normal.0/edge/n3/b/src1/sep3:dw` or `proj/gap/src0:gamma`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cell::{OpKind, Slot};
use crate::checkpoint::{self, CheckpointError, Container, TableEntry, Writer};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellRole {
    Conv,
    Enh,
}

/// Whether the cell keeps spatial size (`Normal`) or halves it (`Reduce`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PositionClass {
    Normal,
    Reduce,
}

/// A cell position class. `stage` is the convolution block index for convolution
/// cells and the enhancement block index for enhancement cells, both 1-based.
/// `instance` separates cells that would otherwise share weights; it is 0 whenever
/// sharing is intended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub role: CellRole,
    pub position: PositionClass,
    pub stage: u16,
    pub instance: u16,
}

/// Consumers that own importance-weighted projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Consumer {
    /// The down-sampled input shared by the enhancement blocks.
    Delta,
    Gap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    Stem,
    /// 1x1 preprocessing of a cell input. Channel count and stride are part of the key
    /// because one site can receive inputs of different shapes.
    CellInput {
        site: Site,
        slot: Slot,
        in_channels: u32,
        stride: u8,
    },
    Edge {
        site: Site,
        node: u8,
        slot: Slot,
        source: u8,
        op: OpKind,
    },
    /// Weight block of the output 1x1 convolution that reads loose node `node`.
    CellOutput {
        site: Site,
        node: u8,
    },
    CellOutputNorm {
        site: Site,
    },
    Projection {
        consumer: Consumer,
        source: u8,
    },
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Weight,
    Bias,
    Depthwise,
    Pointwise,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl Part {
    const ALL: [Part; 8] = [
        Part::Weight,
        Part::Bias,
        Part::Depthwise,
        Part::Pointwise,
        Part::Gamma,
        Part::Beta,
        Part::RunningMean,
        Part::RunningVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Part::Weight => "w",
            Part::Bias => "b",
            Part::Depthwise => "dw",
            Part::Pointwise => "pw",
            Part::Gamma => "gamma",
            Part::Beta => "beta",
            Part::RunningMean => "mean",
            Part::RunningVar => "var",
        }
    }

    /// Running statistics are state, not parameters.
    pub fn is_trainable(self) -> bool {
        !matches!(self, Part::RunningMean | Part::RunningVar)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WeightKey {
    pub scope: Scope,
    pub part: Part,
}

impl WeightKey {
    pub fn new(scope: Scope, part: Part) -> Self {
        Self { scope, part }
    }

    pub fn with_part(self, part: Part) -> Self {
        Self { part, ..self }
    }

    pub fn site(&self) -> Option<Site> {
        match self.scope {
            Scope::CellInput { site, .. }
            | Scope::Edge { site, .. }
            | Scope::CellOutput { site, .. }
            | Scope::CellOutputNorm { site } => Some(site),
            _ => None,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let role = match self.role {
            CellRole::Conv => "conv",
            CellRole::Enh => "enh",
        };
        let pos = match self.position {
            PositionClass::Normal => "normal",
            PositionClass::Reduce => "reduce",
        };
        write!(f, "{role}{}.{pos}.{}", self.stage, self.instance)
    }
}

impl fmt::Display for WeightKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scope {
            Scope::Stem => write!(f, "stem")?,
            Scope::CellInput { site, slot, in_channels, stride } => {
                write!(f, "{site}/in/{slot}/c{in_channels}/s{stride}")?
            }
            Scope::Edge { site, node, slot, source, op } => write!(f, "{site}/edge/n{node}/{slot}/src{source}/{op}")?,
            Scope::CellOutput { site, node } => write!(f, "{site}/out/n{node}")?,
            Scope::CellOutputNorm { site } => write!(f, "{site}/outbn")?,
            Scope::Projection { consumer, source } => match consumer {
                Consumer::Delta => write!(f, "proj/delta/src{source}")?,
                Consumer::Gap => write!(f, "proj/gap/src{source}")?,
            },
            Scope::Classifier => write!(f, "classifier")?,
        }
        write!(f, ":{}", self.part.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed weight key `{0}`")]
pub struct KeyParseError(pub String);

fn num<T: FromStr>(s: &str, prefix: &str) -> Option<T> {
    s.strip_prefix(prefix)?.parse().ok()
}

fn parse_site(s: &str) -> Option<Site> {
    let mut it = s.split('.');
    let head = it.next()?;
    let (role, stage) = if let Some(r) = head.strip_prefix("conv") {
        (CellRole::Conv, r)
    } else {
        (CellRole::Enh, head.strip_prefix("enh")?)
    };
    let position = match it.next()? {
        "normal" => PositionClass::Normal,
        "reduce" => PositionClass::Reduce,
        _ => return None,
    };
    let instance = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some(Site { role, position, stage: stage.parse().ok()?, instance })
}

fn parse_slot(s: &str) -> Option<Slot> {
    match s {
        "a" => Some(Slot::A),
        "b" => Some(Slot::B),
        _ => None,
    }
}

fn parse_scope(s: &str) -> Option<Scope> {
    let parts: Vec<&str> = s.split('/').collect();
    Some(match parts.as_slice() {
        ["stem"] => Scope::Stem,
        ["classifier"] => Scope::Classifier,
        ["proj", consumer, src] => {
            let consumer = match *consumer {
                "gap" => Consumer::Gap,
                "delta" => Consumer::Delta,
                _ => return None,
            };
            Scope::Projection { consumer, source: num(src, "src")? }
        }
        [site, "in", slot, c, st] => Scope::CellInput {
            site: parse_site(site)?,
            slot: parse_slot(slot)?,
            in_channels: num(c, "c")?,
            stride: num(st, "s")?,
        },
        [site, "edge", n, slot, src, op] => Scope::Edge {
            site: parse_site(site)?,
            node: num(n, "n")?,
            slot: parse_slot(slot)?,
            source: num(src, "src")?,
            op: op.parse().ok()?,
        },
        [site, "out", n] => Scope::CellOutput { site: parse_site(site)?, node: num(n, "n")? },
        [site, "outbn"] => Scope::CellOutputNorm { site: parse_site(site)? },
        _ => return None,
    })
}

impl FromStr for WeightKey {
    type Err = KeyParseError;

    fn from_str(s: &str) -> Result<Self, KeyParseError> {
        let err = || KeyParseError(s.to_string());
        let (scope, part) = s.rsplit_once(':').ok_or_else(err)?;
        let part = Part::ALL.into_iter().find(|p| p.name() == part).ok_or_else(err)?;
        let scope = parse_scope(scope).ok_or_else(err)?;
        Ok(Self { scope, part })
    }
}

/// How a tensor is initialized on first use.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
    KaimingNormal {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

/// Shape and initializer of one parameter as declared by a compute graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("weight `{key}` has shape {stored:?}, requested {requested:?}")]
    ShapeConflict { key: String, stored: Vec<usize>, requested: Vec<usize> },
    #[error("weight `{0}` is not in the store")]
    Missing(String),
    #[error(transparent)]
    Key(#[from] KeyParseError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// A tensor plus its optimizer momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry {
    pub value: Tensor,
    pub momentum: Vec<f64>,
}

/// Map from weight key to tensor, created lazily with deterministic per-key
/// initialization derived from the store seed.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    seed: u64,
    entries: BTreeMap<WeightKey, StoreEntry>,
}

/// RNG for one key: SHA-256 of the seed and the canonical key text seeds a ChaCha8
/// stream, so a tensor's initial value does not depend on creation order.
pub fn key_rng(seed: u64, key: &WeightKey) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.to_string().as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

fn initial_value(seed: u64, key: &WeightKey, spec: &ParamSpec) -> Tensor {
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::full(spec.shape.clone(), 1.0),
        Init::KaimingNormal { fan_in } => {
            let mut rng = key_rng(seed, key);
            let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
            Tensor::from_fn(spec.shape.clone(), |_| normal.sample(&mut rng))
        }
    }
}

const STORE_TAG: &[u8; 4] = b"STOR";

impl WeightStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, entries: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &WeightKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &WeightKey> {
        self.entries.keys()
    }

    /// Returns the tensor for `key`, creating it on first request.
    pub fn get_or_init(&mut self, key: &WeightKey, spec: &ParamSpec) -> Result<&Tensor, WeightError> {
        if let Some(slot) = self.entries.get(key) {
            if slot.value.shape() != spec.shape.as_slice() {
                return Err(WeightError::ShapeConflict {
                    key: key.to_string(),
                    stored: slot.value.shape().to_vec(),
                    requested: spec.shape.clone(),
                });
            }
        } else {
            let value = initial_value(self.seed, key, spec);
            let momentum = vec![0.0; value.numel()];
            self.entries.insert(*key, StoreEntry { value, momentum });
        }
        Ok(&self.entries[key].value)
    }

    pub fn get(&self, key: &WeightKey) -> Option<&Tensor> {
        self.entries.get(key).map(|s| &s.value)
    }

    pub fn require(&self, key: &WeightKey) -> Result<&Tensor, WeightError> {
        self.get(key).ok_or_else(|| WeightError::Missing(key.to_string()))
    }

    /// Value and momentum buffers for an optimizer update.
    pub fn slot_mut(&mut self, key: &WeightKey) -> Result<(&mut [f64], &mut [f64]), WeightError> {
        let slot = self.entries.get_mut(key).ok_or_else(|| WeightError::Missing(key.to_string()))?;
        Ok((slot.value.data_mut(), &mut slot.momentum))
    }

    pub fn data_mut(&mut self, key: &WeightKey) -> Result<&mut [f64], WeightError> {
        Ok(self.slot_mut(key)?.0)
    }

    /// Trainable scalar count over all stored keys.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().filter(|(k, _)| k.part.is_trainable()).map(|(_, s)| s.value.numel()).sum()
    }

    pub fn to_section(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.seed);
        let table: Vec<TableEntry> = self
            .entries
            .iter()
            .map(|(k, s)| TableEntry {
                name: k.to_string(),
                shape: s.value.shape().to_vec(),
                data: s.value.data().to_vec(),
                aux: vec![s.momentum.clone()],
            })
            .collect();
        checkpoint::write_table(&mut w, &table);
        w.into_bytes()
    }

    pub fn from_section(payload: &[u8]) -> Result<Self, WeightError> {
        let mut r = checkpoint::section_reader(payload);
        let seed = r.u64()?;
        let mut entries = BTreeMap::new();
        for e in checkpoint::read_table(&mut r)? {
            let key: WeightKey = e.name.parse()?;
            let value =
                Tensor::new(e.shape, e.data).map_err(|err| CheckpointError::Malformed(format!("{}: {err}", e.name)))?;
            let momentum = match e.aux.into_iter().next() {
                Some(m) => m,
                None => vec![0.0; value.numel()],
            };
            entries.insert(key, StoreEntry { value, momentum });
        }
        r.finish()?;
        Ok(Self { seed, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), WeightError> {
        let mut c = Container::default();
        c.push(STORE_TAG, self.to_section());
        Ok(c.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, WeightError> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn from_container(c: &Container) -> Result<Self, WeightError> {
        Self::from_section(c.section(STORE_TAG)?)
    }

    pub fn add_to_container(&self, c: &mut Container) {
        c.push(STORE_TAG, self.to_section());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site() -> Site {
        Site { role: CellRole::Conv, position: PositionClass::Normal, stage: 1, instance: 0 }
    }

    #[test]
    fn key_text_round_trip() {
        let keys = [
            WeightKey::new(Scope::Stem, Part::Weight),
            WeightKey::new(Scope::Classifier, Part::Bias),
            WeightKey::new(Scope::Projection { consumer: Consumer::Delta, source: 1 }, Part::Gamma),
            WeightKey::new(Scope::Projection { consumer: Consumer::Gap, source: 3 }, Part::RunningVar),
            WeightKey::new(Scope::CellInput { site: site(), slot: Slot::B, in_channels: 32, stride: 2 }, Part::Weight),
            WeightKey::new(
                Scope::Edge { site: site(), node: 4, slot: Slot::A, source: 1, op: OpKind::SepConv5x5 },
                Part::Depthwise,
            ),
            WeightKey::new(Scope::CellOutput { site: site(), node: 6 }, Part::Weight),
            WeightKey::new(
                Scope::CellOutputNorm {
                    site: Site { role: CellRole::Enh, position: PositionClass::Reduce, stage: 3, instance: 7 },
                },
                Part::Beta,
            ),
        ];
        for k in keys {
            let text = k.to_string();
            assert_eq!(text.parse::<WeightKey>().unwrap(), k, "{text}");
        }
        assert!("stem".parse::<WeightKey>().is_err());
        assert!("conv1.sideways.0/outbn:gamma".parse::<WeightKey>().is_err());
    }

    #[test]
    fn init_is_order_independent() {
        let a = WeightKey::new(Scope::Stem, Part::Weight);
        let b = WeightKey::new(Scope::Classifier, Part::Weight);
        let spec = ParamSpec { shape: vec![4, 3], init: Init::KaimingNormal { fan_in: 3 } };
        let mut s1 = WeightStore::new(9);
        s1.get_or_init(&a, &spec).unwrap();
        s1.get_or_init(&b, &spec).unwrap();
        let mut s2 = WeightStore::new(9);
        s2.get_or_init(&b, &spec).unwrap();
        s2.get_or_init(&a, &spec).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1.get(&a).unwrap().data(), s1.get(&b).unwrap().data());
    }

    #[test]
    fn same_key_same_buffer_and_shape_conflict() {
        let k = WeightKey::new(Scope::Stem, Part::Weight);
        let spec = ParamSpec { shape: vec![2, 2], init: Init::KaimingNormal { fan_in: 2 } };
        let mut s = WeightStore::new(1);
        let p1 = s.get_or_init(&k, &spec).unwrap().data().as_ptr();
        let p2 = s.get_or_init(&k, &spec).unwrap().data().as_ptr();
        assert_eq!(p1, p2);
        let other = ParamSpec { shape: vec![4], init: Init::Zeros };
        assert!(matches!(s.get_or_init(&k, &other), Err(WeightError::ShapeConflict { .. })));
    }
}
