//! Cell grammar: candidate operations, token encoding, validation and the genotype text
//! format.
//!
//! A cell has two input nodes (0 and 1) followed by computed nodes. Computed node `n`
//! reads two earlier nodes, applies one operation to each, and sums the results. The
//! cell output concatenates every computed node that no other node consumes.
//!
//! Text format, one line per computed node (comments start with `#`):
//!
//! ```text
//! conv n2 = sep3(0) + skip(1)
//! enh n6 = max3(2) + avg3(5)
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum OpKind {
    SepConv3x3 = 0,
    SepConv5x5 = 1,
    MaxPool3x3 = 2,
    AvgPool3x3 = 3,
    SkipConnect = 4,
}

impl OpKind {
    pub const ALL: [OpKind; 5] =
        [OpKind::SepConv3x3, OpKind::SepConv5x5, OpKind::MaxPool3x3, OpKind::AvgPool3x3, OpKind::SkipConnect];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep3",
            OpKind::SepConv5x5 => "sep5",
            OpKind::MaxPool3x3 => "max3",
            OpKind::AvgPool3x3 => "avg3",
            OpKind::SkipConnect => "skip",
        }
    }

    pub fn kernel(self) -> Option<usize> {
        match self {
            OpKind::SepConv3x3 => Some(3),
            OpKind::SepConv5x5 => Some(5),
            _ => None,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|o| o.name() == s).ok_or_else(|| s.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeSpec {
    pub input_a: usize,
    pub op_a: OpKind,
    pub input_b: usize,
    pub op_b: OpKind,
}

impl NodeSpec {
    pub fn new(input_a: usize, op_a: OpKind, input_b: usize, op_b: OpKind) -> Self {
        Self { input_a, op_a, input_b, op_b }
    }

    pub fn inputs(&self) -> [(usize, OpKind); 2] {
        [(self.input_a, self.op_a), (self.input_b, self.op_b)]
    }
}

/// Computed nodes of a cell; `nodes[j]` describes node `j + 2`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellSpec {
    pub nodes: Vec<NodeSpec>,
}

pub const INPUT_NODES: usize = 2;

impl CellSpec {
    pub fn new(nodes: Vec<NodeSpec>) -> Self {
        Self { nodes }
    }

    /// Index of the last node (input nodes included).
    pub fn last_node(&self) -> usize {
        self.nodes.len() + INPUT_NODES - 1
    }

    pub fn node(&self, index: usize) -> &NodeSpec {
        &self.nodes[index - INPUT_NODES]
    }

    /// `(node index, spec)` pairs in evaluation order.
    pub fn computed(&self) -> impl Iterator<Item = (usize, &NodeSpec)> {
        self.nodes.iter().enumerate().map(|(j, n)| (j + INPUT_NODES, n))
    }

    /// Structural checks independent of node count.
    pub fn structural_violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            out.push(Violation::NodeCount { expected: 1, got: 0 });
        }
        for (n, spec) in self.computed() {
            for (slot, input) in [(Slot::A, spec.input_a), (Slot::B, spec.input_b)] {
                if input >= n {
                    out.push(Violation::ForwardReference { node: n, slot, input });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Slot::A => "a",
            Slot::B => "b",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NodeCount { expected: usize, got: usize },
    ForwardReference { node: usize, slot: Slot, input: usize },
    OpOutOfGrammar { node: usize, slot: Slot, op: OpKind },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NodeCount { expected, got } => {
                write!(f, "expected {expected} computed nodes, found {got}")
            }
            Violation::ForwardReference { node, slot, input } => {
                write!(f, "node {node} slot {slot} reads node {input}, which is not earlier")
            }
            Violation::OpOutOfGrammar { node, slot, op } => {
                write!(f, "node {node} slot {slot} uses {op}, outside the grammar")
            }
        }
    }
}

/// Sizes of the search space: computed nodes per cell and number of operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grammar {
    pub nodes: usize,
    pub ops: usize,
}

impl Grammar {
    /// Five computed nodes (seven in total) over the five operations.
    pub const FULL: Grammar = Grammar { nodes: 5, ops: 5 };

    pub fn new(nodes: usize, ops: usize) -> Self {
        assert!(nodes >= 1 && (1..=OpKind::ALL.len()).contains(&ops));
        Self { nodes, ops }
    }

    pub fn tokens_per_cell(&self) -> usize {
        4 * self.nodes
    }

    pub fn sequence_len(&self) -> usize {
        2 * self.tokens_per_cell()
    }

    /// What the token at `position` encodes.
    pub fn token_class(&self, position: usize) -> TokenClass {
        let within = position % self.tokens_per_cell();
        let node = within / 4 + INPUT_NODES;
        if within.is_multiple_of(2) {
            TokenClass::Input { node }
        } else {
            TokenClass::Op
        }
    }

    /// Number of legal values at `position`.
    pub fn range(&self, position: usize) -> usize {
        match self.token_class(position) {
            TokenClass::Input { node } => node,
            TokenClass::Op => self.ops,
        }
    }

    pub fn ranges(&self) -> Vec<usize> {
        (0..self.sequence_len()).map(|p| self.range(p)).collect()
    }

    /// Closed-form count of distinct token sequences.
    pub fn sequence_count(&self) -> u128 {
        let per_cell: u128 = (INPUT_NODES..INPUT_NODES + self.nodes).map(|n| ((n * self.ops) as u128).pow(2)).product();
        per_cell * per_cell
    }

    pub fn validate(&self, spec: &CellSpec) -> Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        if spec.nodes.len() != self.nodes {
            v.push(Violation::NodeCount { expected: self.nodes, got: spec.nodes.len() });
        }
        v.extend(spec.structural_violations().into_iter().filter(|x| !matches!(x, Violation::NodeCount { .. })));
        for (n, s) in spec.computed() {
            for (slot, op) in [(Slot::A, s.op_a), (Slot::B, s.op_b)] {
                if op.code() >= self.ops {
                    v.push(Violation::OpOutOfGrammar { node: n, slot, op });
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    pub fn decode(&self, tokens: &TokenSequence) -> Result<Genotype, CellError> {
        let t = tokens.as_slice();
        if t.len() != self.sequence_len() {
            return Err(CellError::WrongLength { expected: self.sequence_len(), got: t.len() });
        }
        for (position, &value) in t.iter().enumerate() {
            let range = self.range(position);
            if value >= range {
                return Err(CellError::TokenOutOfRange { position, value, range });
            }
        }
        let cell = |chunk: &[usize]| {
            CellSpec::new(
                chunk
                    .chunks(4)
                    .map(|q| {
                        NodeSpec::new(
                            q[0],
                            OpKind::from_code(q[1]).expect("range-checked"),
                            q[2],
                            OpKind::from_code(q[3]).expect("range-checked"),
                        )
                    })
                    .collect(),
            )
        };
        let per = self.tokens_per_cell();
        Ok(Genotype { conv_cell: cell(&t[..per]), enh_cell: cell(&t[per..]) })
    }

    pub fn encode(&self, g: &Genotype) -> Result<TokenSequence, CellError> {
        for cell in [&g.conv_cell, &g.enh_cell] {
            self.validate(cell).map_err(CellError::Invalid)?;
        }
        Ok(encode_genotype(g))
    }

    pub fn random_genotype<R: Rng + ?Sized>(&self, rng: &mut R) -> Genotype {
        let tokens = TokenSequence::new(self.ranges().into_iter().map(|r| rng.gen_range(0..r)).collect());
        self.decode(&tokens).expect("sampled within range")
    }

    /// Visits every legal token sequence in lexicographic order.
    pub fn for_each_sequence(&self, mut f: impl FnMut(&[usize])) {
        let ranges = self.ranges();
        let mut t = vec![0usize; ranges.len()];
        loop {
            f(&t);
            let mut p = t.len();
            loop {
                if p == 0 {
                    return;
                }
                p -= 1;
                t[p] += 1;
                if t[p] < ranges[p] {
                    break;
                }
                t[p] = 0;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Input { node: usize },
    Op,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    pub conv_cell: CellSpec,
    pub enh_cell: CellSpec,
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_genotype(self))
    }
}

/// Controller output `a_1..a_T`, grouped per node as (input_a, op_a, input_b, op_b),
/// convolution cell first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CellError {
    #[error("token sequence has length {got}, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("token {value} at position {position} is outside [0, {range})")]
    TokenOutOfRange { position: usize, value: usize, range: usize },
    #[error("invalid cell: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
}

pub fn decode_tokens(tokens: &TokenSequence) -> Result<Genotype, CellError> {
    Grammar::FULL.decode(tokens)
}

pub fn encode_genotype(g: &Genotype) -> TokenSequence {
    let mut t = Vec::with_capacity(4 * (g.conv_cell.nodes.len() + g.enh_cell.nodes.len()));
    for cell in [&g.conv_cell, &g.enh_cell] {
        for n in &cell.nodes {
            t.extend([n.input_a, n.op_a.code(), n.input_b, n.op_b.code()]);
        }
    }
    TokenSequence(t)
}

/// All violations of the full seven-node grammar.
pub fn validate_cell(spec: &CellSpec) -> Result<(), Vec<Violation>> {
    Grammar::FULL.validate(spec)
}

/// Computed nodes that feed no other node, ascending. The last node is always included.
pub fn loose_end_nodes(spec: &CellSpec) -> Vec<usize> {
    let mut used = vec![false; spec.last_node() + 1];
    for (_, n) in spec.computed() {
        used[n.input_a] = true;
        used[n.input_b] = true;
    }
    (INPUT_NODES..=spec.last_node()).filter(|&i| !used[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CellRole {
    Conv,
    Enh,
}

pub fn serialize_genotype(g: &Genotype) -> String {
    let mut s = String::new();
    for (tag, cell) in [("conv", &g.conv_cell), ("enh", &g.enh_cell)] {
        for (n, spec) in cell.computed() {
            s.push_str(&format!("{tag} n{n} = {}({}) + {}({})\n", spec.op_a, spec.input_a, spec.op_b, spec.input_b));
        }
    }
    s
}

struct Cursor<'a> {
    line: usize,
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, column: usize, message: impl Into<String>) -> CellError {
        CellError::Parse { line: self.line, column: column + 1, message: message.into() }
    }

    fn skip_ws(&mut self) {
        while self.text[self.pos..].starts_with([' ', '\t']) {
            self.pos += 1;
        }
    }

    fn word(&mut self) -> (usize, &'a str) {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.text[start..];
        let len = rest.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(rest.len());
        self.pos += len;
        (start, &self.text[start..start + len])
    }

    fn expect(&mut self, c: char) -> Result<(), CellError> {
        self.skip_ws();
        if self.text[self.pos..].starts_with(c) {
            self.pos += 1;
            Ok(())
        } else {
            let found = self.text[self.pos..].chars().next().map_or("end of line".to_string(), |c| format!("`{c}`"));
            Err(self.err(self.pos, format!("expected `{c}`, found {found}")))
        }
    }

    fn number(&mut self) -> Result<(usize, usize), CellError> {
        let (col, w) = self.word();
        w.parse::<usize>().map(|v| (col, v)).map_err(|_| self.err(col, format!("expected a node index, found `{w}`")))
    }

    fn operand(&mut self) -> Result<(OpKind, usize), CellError> {
        let (col, name) = self.word();
        let op = name.parse::<OpKind>().map_err(|t| self.err(col, format!("unknown operation `{t}`")))?;
        self.expect('(')?;
        let (_, idx) = self.number()?;
        self.expect(')')?;
        Ok((op, idx))
    }
}

/// Parses the genotype text format. Nodes may appear in any order but each computed
/// node of each cell must appear exactly once, numbered contiguously from 2.
pub fn parse_genotype(text: &str) -> Result<Genotype, CellError> {
    let mut cells: [Vec<Option<NodeSpec>>; 2] = [Vec::new(), Vec::new()];
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        last_line = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut c = Cursor { line: i + 1, text: line, pos: 0 };
        let (col, tag) = c.word();
        let role = match tag {
            "conv" => CellRole::Conv,
            "enh" => CellRole::Enh,
            other => return Err(c.err(col, format!("expected `conv` or `enh`, found `{other}`"))),
        };
        let (col, node_tok) = c.word();
        let node = node_tok
            .strip_prefix('n')
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&n| n >= INPUT_NODES)
            .ok_or_else(|| c.err(col, format!("expected a computed node like `n2`, found `{node_tok}`")))?;
        c.expect('=')?;
        let (op_a, input_a) = c.operand()?;
        c.expect('+')?;
        let (op_b, input_b) = c.operand()?;
        c.skip_ws();
        if c.pos != line.len() {
            return Err(c.err(c.pos, "unexpected trailing text"));
        }
        let slots = &mut cells[role as usize];
        let j = node - INPUT_NODES;
        if slots.len() <= j {
            slots.resize(j + 1, None);
        }
        if slots[j].is_some() {
            return Err(c.err(col, format!("node n{node} defined twice")));
        }
        slots[j] = Some(NodeSpec::new(input_a, op_a, input_b, op_b));
    }
    let mut out = Vec::with_capacity(2);
    for (tag, slots) in ["conv", "enh"].iter().zip(cells) {
        if slots.is_empty() {
            return Err(CellError::Parse { line: last_line.max(1), column: 1, message: format!("no `{tag}` nodes") });
        }
        let nodes = slots
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.ok_or_else(|| CellError::Parse {
                    line: last_line.max(1),
                    column: 1,
                    message: format!("`{tag}` node n{} missing", j + INPUT_NODES),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let cell = CellSpec::new(nodes);
        let v = cell.structural_violations();
        if !v.is_empty() {
            return Err(CellError::Invalid(v));
        }
        out.push(cell);
    }
    let enh_cell = out.pop().expect("two cells");
    let conv_cell = out.pop().expect("two cells");
    Ok(Genotype { conv_cell, enh_cell })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain() -> CellSpec {
        CellSpec::new((2..7).map(|n| NodeSpec::new(n - 1, OpKind::SepConv3x3, n - 1, OpKind::SkipConnect)).collect())
    }

    fn star() -> CellSpec {
        CellSpec::new((2..7).map(|n| NodeSpec::new(0, OpKind::MaxPool3x3, n % 2, OpKind::AvgPool3x3)).collect())
    }

    #[test]
    fn op_codes_stable() {
        assert_eq!(OpKind::ALL.len(), 5);
        for (i, op) in OpKind::ALL.iter().enumerate() {
            assert_eq!(op.code(), i);
        }
        assert_eq!(OpKind::from_code(5), None);
    }

    #[test]
    fn all_zero_sequence_decodes_to_sep3_on_node_zero() {
        let g = decode_tokens(&TokenSequence::new(vec![0; 40])).unwrap();
        for cell in [&g.conv_cell, &g.enh_cell] {
            assert_eq!(cell.nodes.len(), 5);
            for n in &cell.nodes {
                assert_eq!(*n, NodeSpec::new(0, OpKind::SepConv3x3, 0, OpKind::SepConv3x3));
            }
        }
    }

    #[test]
    fn out_of_range_op_token_cites_position() {
        let mut t = vec![0; 40];
        t[5] = 7;
        assert_eq!(
            decode_tokens(&TokenSequence::new(t)),
            Err(CellError::TokenOutOfRange { position: 5, value: 7, range: 5 })
        );
        assert_eq!(
            decode_tokens(&TokenSequence::new(vec![0; 39])),
            Err(CellError::WrongLength { expected: 40, got: 39 })
        );
        // node 2 can only read nodes 0 and 1
        let mut t = vec![0; 40];
        t[22] = 2;
        assert_eq!(
            decode_tokens(&TokenSequence::new(t)),
            Err(CellError::TokenOutOfRange { position: 22, value: 2, range: 2 })
        );
    }

    #[test]
    fn validate_reports_forward_reference_and_count() {
        let mut c = chain();
        assert_eq!(validate_cell(&c), Ok(()));
        c.nodes[1].input_b = 5; // node 3 reads node 5
        assert_eq!(validate_cell(&c), Err(vec![Violation::ForwardReference { node: 3, slot: Slot::B, input: 5 }]));
        let mut short = chain();
        short.nodes.pop();
        assert_eq!(validate_cell(&short), Err(vec![Violation::NodeCount { expected: 5, got: 4 }]));
    }

    #[test]
    fn loose_ends_chain_and_star() {
        assert_eq!(loose_end_nodes(&chain()), vec![6]);
        assert_eq!(loose_end_nodes(&star()), vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn loose_ends_match_consumer_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let g = Grammar::FULL.random_genotype(&mut rng);
            let cell = &g.conv_cell;
            // brute force: node i is loose iff no (node, slot) reads it
            let mut expect = Vec::new();
            for i in 2..=6 {
                let consumed = cell.nodes.iter().any(|n| n.input_a == i || n.input_b == i);
                if !consumed {
                    expect.push(i);
                }
            }
            let loose = loose_end_nodes(cell);
            assert_eq!(loose, expect);
            assert!(loose.contains(&6));
            let per_node = 8;
            assert_eq!(loose.len() * per_node, expect.len() * per_node);
        }
    }

    #[test]
    fn reduced_grammar_count_matches_enumeration() {
        let g = Grammar::new(2, 2);
        let mut count = 0u128;
        g.for_each_sequence(|_| count += 1);
        assert_eq!(count, g.sequence_count());
        assert_eq!(count, (16u128 * 36).pow(2));
        let full: u128 = [2u128, 3, 4, 5, 6].iter().map(|n| (n * 5).pow(2)).product();
        assert_eq!(Grammar::FULL.sequence_count(), full * full);
    }

    #[test]
    fn serialize_is_deterministic_and_readable() {
        let g = Genotype { conv_cell: chain(), enh_cell: star() };
        let a = serialize_genotype(&g);
        assert_eq!(a, serialize_genotype(&g));
        assert!(a.starts_with("conv n2 = sep3(1) + skip(1)\n"));
        assert_eq!(parse_genotype(&a).unwrap(), g);
    }

    #[test]
    fn parse_unknown_op_names_token() {
        let text = "conv n2 = sep3(0) + conv7(1)\n";
        match parse_genotype(text) {
            Err(CellError::Parse { line, column, message }) => {
                assert_eq!((line, column), (1, 21));
                assert!(message.contains("conv7"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_reports_line_and_column() {
        let g = Genotype { conv_cell: chain(), enh_cell: star() };
        let mut text = serialize_genotype(&g);
        text = text.replacen("enh n4 = max3(0) +", "enh n4 = max3(0) -", 1);
        match parse_genotype(&text) {
            Err(CellError::Parse { line, column, .. }) => assert_eq!((line, column), (8, 18)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_genotype("conv n2 = sep3(0) + skip(1)\n"), Err(CellError::Parse { .. })));
    }

    fn arb_genotype() -> impl Strategy<Value = Genotype> {
        let ranges = Grammar::FULL.ranges();
        ranges
            .into_iter()
            .map(|r| 0..r)
            .collect::<Vec<_>>()
            .prop_map(|t| decode_tokens(&TokenSequence::new(t)).unwrap())
    }

    proptest! {
        #[test]
        fn token_round_trip(g in arb_genotype()) {
            let t = encode_genotype(&g);
            prop_assert_eq!(decode_tokens(&t).unwrap(), g.clone());
            prop_assert_eq!(encode_genotype(&decode_tokens(&t).unwrap()), t);
        }

        #[test]
        fn text_round_trip(g in arb_genotype()) {
            prop_assert_eq!(parse_genotype(&serialize_genotype(&g)).unwrap(), g);
        }
    }

    #[test]
    fn thousand_random_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let g = Grammar::FULL.random_genotype(&mut rng);
            assert_eq!(decode_tokens(&encode_genotype(&g)).unwrap(), g);
        }
    }
}
