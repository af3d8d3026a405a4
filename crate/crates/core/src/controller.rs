//! LSTM policy over genotype token sequences, trained with REINFORCE.
//!
//! At step `t` the LSTM reads the embedding of token `t-1` (a start token at `t = 0`)
//! and a linear head maps the hidden state to logits over the legal values of token
//! `t`. Input tokens of node `n` use a head with `n` outputs owned by that node;
//! operation tokens use one head per cell type. Sampling is autoregressive.
//!
//! One recording path serves sampling, log-probabilities and gradients, so the three
//! always agree.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{Grammar, TokenClass, TokenSequence, INPUT_NODES};
use crate::checkpoint::{self, CheckpointError, TableEntry, Writer};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub hidden: usize,
    /// Logits are divided by this before the softmax.
    pub temperature: f64,
    /// Weight of the entropy bonus in the update.
    pub entropy_weight: f64,
    /// Decay of the moving-average reward baseline.
    pub baseline_decay: f64,
    /// Parameters start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    pub adam: AdamConfig,
    pub grammar: Grammar,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            temperature: 1.0,
            entropy_weight: 1e-4,
            baseline_decay: 0.99,
            init_range: 0.1,
            adam: AdamConfig::default(),
            grammar: Grammar::FULL,
        }
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token sequence has length {got}, the grammar needs {expected}")]
    Length { expected: usize, got: usize },
    #[error("token {value} at position {position} is outside [0, {range})")]
    OutOfRange { position: usize, value: usize, range: usize },
    #[error("reward {0} outside [0, 1]")]
    RewardRange(f64),
    #[error("update needs at least one episode")]
    Empty,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("controller checkpoint: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ControllerError>;

/// One sampled sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub tokens: TokenSequence,
    pub log_prob: f64,
    pub entropy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_reward: f64,
    /// Baseline used for the advantages of this update.
    pub baseline: f64,
    pub mean_entropy: f64,
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

#[derive(Clone, Debug, PartialEq)]
pub struct Controller {
    cfg: ControllerConfig,
    params: BTreeMap<String, Tensor>,
    adam: BTreeMap<String, AdamState>,
    baseline: Option<f64>,
}

/// Parameter vars recorded on a tape.
struct Bound {
    p: BTreeMap<String, Var>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        self.p[name]
    }
}

impl Controller {
    /// Parameter names and shapes for a configuration.
    pub fn param_shapes(cfg: &ControllerConfig) -> Vec<(String, Vec<usize>)> {
        let h = cfg.hidden;
        let g = cfg.grammar;
        let vocab = 1 + (INPUT_NODES + g.nodes - 1) + g.ops;
        let mut out = vec![("embed".to_string(), vec![vocab, h])];
        for gate in GATES {
            out.push((format!("lstm.wx.{gate}"), vec![h, h]));
            out.push((format!("lstm.wh.{gate}"), vec![h, h]));
            out.push((format!("lstm.b.{gate}"), vec![h]));
        }
        for cell in 0..2 {
            for n in INPUT_NODES..INPUT_NODES + g.nodes {
                out.push((format!("head.in.{cell}.{n}"), vec![n, h]));
            }
            out.push((format!("head.op.{cell}"), vec![g.ops, h]));
        }
        out
    }

    pub fn new(cfg: ControllerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cfg.init_range;
        let params = Self::param_shapes(&cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = Tensor::from_fn(shape, |_| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 });
                (name, t)
            })
            .collect();
        Self::from_params(cfg, params)
    }

    /// All parameters zero: every legal token is equally likely.
    pub fn zeros(cfg: ControllerConfig) -> Self {
        let params = Self::param_shapes(&cfg).into_iter().map(|(n, s)| (n, Tensor::zeros(s))).collect();
        Self::from_params(cfg, params)
    }

    fn from_params(cfg: ControllerConfig, params: BTreeMap<String, Tensor>) -> Self {
        let adam = params.iter().map(|(n, t)| (n.clone(), AdamState::new(t.numel()))).collect();
        Self { cfg, params, adam, baseline: None }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn grammar(&self) -> Grammar {
        self.cfg.grammar
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        let p = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if track { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        Bound { p }
    }

    fn embed_row(&self, prev: Option<(usize, usize)>) -> usize {
        // rows: start, input values, operation codes
        match prev {
            None => 0,
            Some((position, value)) => match self.cfg.grammar.token_class(position) {
                TokenClass::Input { .. } => 1 + value,
                TokenClass::Op => 1 + INPUT_NODES + self.cfg.grammar.nodes - 1 + value,
            },
        }
    }

    fn head_name(&self, position: usize) -> String {
        let cell = position / self.cfg.grammar.tokens_per_cell();
        match self.cfg.grammar.token_class(position) {
            TokenClass::Input { node } => format!("head.in.{cell}.{node}"),
            TokenClass::Op => format!("head.op.{cell}"),
        }
    }

    /// One LSTM step for a batch of rows. Returns (h, c).
    fn lstm(&self, tape: &mut Tape, b: &Bound, x: Var, state: Option<(Var, Var)>) -> Result<(Var, Var)> {
        let gate = |tape: &mut Tape, name: &str| -> Result<Var> {
            let mut z = tape.affine(x, b.get(&format!("lstm.wx.{name}")), Some(b.get(&format!("lstm.b.{name}"))))?;
            if let Some((h, _)) = state {
                let zh = tape.affine(h, b.get(&format!("lstm.wh.{name}")), None)?;
                z = tape.add(z, zh)?;
            }
            Ok(z)
        };
        let (zi, zf, zg, zo) = (gate(tape, "i")?, gate(tape, "f")?, gate(tape, "g")?, gate(tape, "o")?);
        let i = tape.sigmoid(zi);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let mut c = tape.mul(i, g)?;
        if let Some((_, c_prev)) = state {
            let f = tape.sigmoid(zf);
            let fc = tape.mul(f, c_prev)?;
            c = tape.add(c, fc)?;
        }
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    /// Log-softmax over the legal values at `position` for a batch of hidden states.
    fn log_probs(&self, tape: &mut Tape, b: &Bound, h: Var, position: usize) -> Result<Var> {
        let logits = tape.affine(h, b.get(&self.head_name(position)), None)?;
        let scaled = if self.cfg.temperature == 1.0 { logits } else { tape.scale(logits, 1.0 / self.cfg.temperature) };
        Ok(tape.log_softmax(scaled)?)
    }

    /// Entropy per row of a log-softmax output, shape (N).
    fn entropy(tape: &mut Tape, lsm: Var) -> Result<Var> {
        let p = tape.exp(lsm);
        let plogp = tape.mul(p, lsm)?;
        let s = tape.shape(plogp).to_vec();
        // row sums through a ones vector
        let ones = tape.constant(Tensor::full([1, s[1]], 1.0));
        let rows = tape.affine(plogp, ones, None)?;
        let rows = tape.scale(rows, -1.0);
        let n = s[0];
        Ok(tape.pick(rows, &vec![0; n])?)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Episode> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let len = self.cfg.grammar.sequence_len();
        let mut tokens = Vec::with_capacity(len);
        let mut state = None;
        let (mut log_prob, mut entropy) = (0.0, 0.0);
        for t in 0..len {
            let prev = t.checked_sub(1).map(|p| (p, tokens[p]));
            let x = tape.gather_rows(b.get("embed"), &[self.embed_row(prev)])?;
            let s = self.lstm(&mut tape, &b, x, state)?;
            state = Some(s);
            let lsm = self.log_probs(&mut tape, &b, s.0, t)?;
            let lp = tape.data(lsm).to_vec();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut choice = lp.len() - 1;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    choice = i;
                    break;
                }
            }
            log_prob += lp[choice];
            entropy -= lp.iter().map(|l| l.exp() * l).sum::<f64>();
            tokens.push(choice);
        }
        Ok(Episode { tokens: TokenSequence::new(tokens), log_prob, entropy })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let g = self.cfg.grammar;
        if tokens.len() != g.sequence_len() {
            return Err(ControllerError::Length { expected: g.sequence_len(), got: tokens.len() });
        }
        for (position, &value) in tokens.iter().enumerate() {
            let range = g.range(position);
            if value >= range {
                return Err(ControllerError::OutOfRange { position, value, range });
            }
        }
        Ok(())
    }

    /// Records the teacher-forced pass over a batch of sequences. Returns per-sequence
    /// log-probability and entropy vars, each of shape (M).
    fn record(&self, tape: &mut Tape, b: &Bound, batch: &[&[usize]]) -> Result<(Var, Var)> {
        for t in batch {
            self.check_tokens(t)?;
        }
        let len = self.cfg.grammar.sequence_len();
        let mut state = None;
        let mut lp_total: Option<Var> = None;
        let mut ent_total: Option<Var> = None;
        for t in 0..len {
            let rows: Vec<usize> = batch.iter().map(|s| self.embed_row(t.checked_sub(1).map(|p| (p, s[p])))).collect();
            let x = tape.gather_rows(b.get("embed"), &rows)?;
            let s = self.lstm(tape, b, x, state)?;
            state = Some(s);
            let lsm = self.log_probs(tape, b, s.0, t)?;
            let picked: Vec<usize> = batch.iter().map(|s| s[t]).collect();
            let lp = tape.pick(lsm, &picked)?;
            let ent = Self::entropy(tape, lsm)?;
            lp_total = Some(match lp_total {
                Some(a) => tape.add(a, lp)?,
                None => lp,
            });
            ent_total = Some(match ent_total {
                Some(a) => tape.add(a, ent)?,
                None => ent,
            });
        }
        Ok((lp_total.expect("non-empty sequence"), ent_total.expect("non-empty sequence")))
    }

    pub fn log_prob(&self, tokens: &TokenSequence) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let (lp, _) = self.record(&mut tape, &b, &[tokens.as_slice()])?;
        Ok(tape.data(lp)[0])
    }

    /// Distribution over the legal values of every position, conditioned on the given
    /// prefix of `tokens`.
    pub fn distributions(&self, tokens: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens.as_slice())?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let mut state = None;
        let mut out = Vec::with_capacity(tokens.len());
        let t_all = tokens.as_slice();
        for t in 0..t_all.len() {
            let x = tape.gather_rows(b.get("embed"), &[self.embed_row(t.checked_sub(1).map(|p| (p, t_all[p])))])?;
            let s = self.lstm(&mut tape, &b, x, state)?;
            state = Some(s);
            let lsm = self.log_probs(&mut tape, &b, s.0, t)?;
            out.push(tape.data(lsm).iter().map(|l| l.exp()).collect());
        }
        Ok(out)
    }

    /// Surrogate loss `-(1/M) sum_m (adv_m log pi(a_m) + beta H_m)` and its gradient
    /// with respect to every parameter.
    pub fn surrogate_gradient(
        &self,
        batch: &[TokenSequence],
        advantages: &[f64],
        entropy_weight: f64,
    ) -> Result<(f64, f64, BTreeMap<String, Vec<f64>>)> {
        if batch.is_empty() {
            return Err(ControllerError::Empty);
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, true);
        let seqs: Vec<&[usize]> = batch.iter().map(|s| s.as_slice()).collect();
        let (lp, ent) = self.record(&mut tape, &b, &seqs)?;
        let m = batch.len() as f64;
        let adv = tape.constant(Tensor::new([batch.len()], advantages.iter().map(|a| -a / m).collect())?);
        let weighted = tape.mul(lp, adv)?;
        let pg = tape.sum(weighted);
        let ent_sum = tape.sum(ent);
        let bonus = tape.scale(ent_sum, -entropy_weight / m);
        let loss = tape.add(pg, bonus)?;
        tape.backward(loss)?;
        let mean_entropy = tape.data(ent_sum)[0] / m;
        let grads = b.p.iter().map(|(n, v)| (n.clone(), tape.grad(*v).expect("tracked").to_vec())).collect();
        Ok((tape.data(loss)[0], mean_entropy, grads))
    }

    /// One REINFORCE step on `(sequence, reward)` pairs with the moving-average
    /// baseline. The baseline starts at the first batch's mean reward and is updated
    /// after the advantages are formed.
    pub fn update(&mut self, batch: &[(TokenSequence, f64)]) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(ControllerError::Empty);
        }
        if let Some((_, r)) = batch.iter().find(|(_, r)| !(0.0..=1.0).contains(r)) {
            return Err(ControllerError::RewardRange(*r));
        }
        let mean_reward = batch.iter().map(|(_, r)| r).sum::<f64>() / batch.len() as f64;
        let baseline = self.baseline.unwrap_or(mean_reward);
        let advantages: Vec<f64> = batch.iter().map(|(_, r)| r - baseline).collect();
        let seqs: Vec<TokenSequence> = batch.iter().map(|(s, _)| s.clone()).collect();
        let (loss, mean_entropy, grads) = self.surrogate_gradient(&seqs, &advantages, self.cfg.entropy_weight)?;
        for (name, g) in &grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite(format!("controller gradient {name}")).into());
            }
        }
        for (name, g) in &grads {
            let p = self.params.get_mut(name).expect("gradient names match parameters");
            let st = self.adam.get_mut(name).expect("optimizer state per parameter");
            adam_step(p.data_mut(), g, &self.cfg.adam, st)?;
        }
        // b += (1 - decay) * (r - b) keeps b exact when the reward equals it
        self.baseline = Some(baseline + (1.0 - self.cfg.baseline_decay) * (mean_reward - baseline));
        Ok(UpdateStats { loss, mean_reward, baseline, mean_entropy })
    }

    pub fn to_section(&self) -> Vec<u8> {
        let mut w = Writer::new();
        let cfg = serde_json::to_vec(&self.cfg).expect("config serializes");
        w.bytes(&cfg);
        match self.baseline {
            Some(b) => {
                w.u8(1);
                w.f64(b);
            }
            None => {
                w.u8(0);
                w.f64(0.0);
            }
        }
        let entries: Vec<TableEntry> = self
            .params
            .iter()
            .map(|(n, t)| {
                let st = &self.adam[n];
                w.u64(st.step);
                TableEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                    aux: vec![st.m.clone(), st.v.clone()],
                }
            })
            .collect();
        checkpoint::write_table(&mut w, &entries);
        w.into_bytes()
    }

    pub fn from_section(payload: &[u8]) -> Result<Self> {
        let mut r = checkpoint::section_reader(payload);
        let cfg: ControllerConfig =
            serde_json::from_slice(r.bytes()?).map_err(|e| ControllerError::Format(e.to_string()))?;
        let has_baseline = r.u8()? == 1;
        let b = r.f64()?;
        let n = Self::param_shapes(&cfg).len();
        let steps = (0..n).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let entries = checkpoint::read_table(&mut r)?;
        r.finish()?;
        if entries.len() != n {
            return Err(ControllerError::Format(format!("{} tensors, expected {n}", entries.len())));
        }
        let mut params = BTreeMap::new();
        let mut adam = BTreeMap::new();
        for (e, step) in entries.into_iter().zip(steps) {
            let [m, v]: [Vec<f64>; 2] =
                e.aux.try_into().map_err(|_| ControllerError::Format(format!("{} lacks optimizer state", e.name)))?;
            params.insert(e.name.clone(), Tensor::new(e.shape, e.data)?);
            adam.insert(e.name, AdamState { m, v, step });
        }
        let expected: Vec<(String, Vec<usize>)> = Self::param_shapes(&cfg);
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(ControllerError::Format(format!("parameter {name} missing or misshapen"))),
            }
        }
        Ok(Self { cfg, params, adam, baseline: has_baseline.then_some(b) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ControllerConfig {
        ControllerConfig { hidden: 8, grammar: Grammar::new(1, 3), ..Default::default() }
    }

    #[test]
    fn sample_log_prob_agree() {
        let c = Controller::new(small_cfg(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let e = c.sample(&mut rng).unwrap();
            assert!((c.log_prob(&e.tokens).unwrap() - e.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn section_round_trip() {
        let mut c = Controller::new(small_cfg(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = c.sample(&mut rng).unwrap();
        c.update(&[(e.tokens, 0.5)]).unwrap();
        let bytes = c.to_section();
        let d = Controller::from_section(&bytes).unwrap();
        assert_eq!(c, d);
        assert_eq!(bytes, d.to_section());
    }

    #[test]
    fn rejects_bad_tokens() {
        let c = Controller::new(small_cfg(), 4);
        assert!(matches!(c.log_prob(&TokenSequence::new(vec![0; 3])), Err(ControllerError::Length { .. })));
        assert!(matches!(
            c.log_prob(&TokenSequence::new(vec![2, 0, 0, 0, 0, 0, 0, 0])),
            Err(ControllerError::OutOfRange { position: 0, .. })
        ));
    }
}
