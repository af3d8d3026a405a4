//! Name-addressed entry point to the tape's primitives.
//!
//! | kind | inputs | attrs | shape rule |
//! |------|--------|-------|------------|
//! | `conv2d` | x, w (Co,Ci,k,k) | stride | (N,Ci,H,W) -> (N,Co,⌈H/s⌉,⌈W/s⌉) |
//! | `conv1x1` | x, w (Co,Ci,1,1) | stride | as conv2d |
//! | `depthwise_conv2d` | x, w (C,1,k,k) | stride | (N,C,H,W) -> (N,C,⌈H/s⌉,⌈W/s⌉) |
//! | `sep_conv` | x, dw (Ci,1,k,k), pw (Co,Ci,1,1), gamma, beta, mean, var | stride, mode, eps | relu → depthwise → pointwise → batch-norm |
//! | `max_pool` / `avg_pool` | x | size (3), stride | (N,C,⌈H/s⌉,⌈W/s⌉) |
//! | `identity` | x | | unchanged |
//! | `batch_norm` | x, gamma, beta, mean, var | mode, eps | unchanged |
//! | `relu`, `sigmoid`, `tanh`, `exp` | x | | unchanged |
//! | `add`, `mul` | a, b | | equal shapes |
//! | `scale` | x | factor | unchanged |
//! | `concat` | x1..xn | | sum along axis 1 |
//! | `global_avg_pool` | x | | (N,C,H,W) -> (N,C) |
//! | `affine` | x (N,D), w (O,D) [, b (O)] | | (N,O) |
//! | `softmax_cross_entropy` | logits (N,K) | labels | (1) |
//! | `log_softmax` | x (N,K) | | (N,K) |
//! | `pick` | x (N,K) | indices | (N) |
//! | `gather_rows` | x (R,D) | indices | (len,D) |
//! | `sum` | x | | (1) |
//!
//! `mode` is one of `train`, `batch`, `inference`; running statistics are not updated
//! through this entry point.

use std::collections::BTreeMap;
use std::str::FromStr;

use super::{BnMode, Result, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Conv2d,
    Conv1x1,
    DepthwiseConv2d,
    SepConv,
    MaxPool,
    AvgPool,
    Identity,
    BatchNorm,
    Relu,
    Add,
    Mul,
    Scale,
    Concat,
    GlobalAvgPool,
    Affine,
    SoftmaxCrossEntropy,
    Sigmoid,
    Tanh,
    Exp,
    LogSoftmax,
    Pick,
    GatherRows,
    Sum,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 23] = [
        Self::Conv2d,
        Self::Conv1x1,
        Self::DepthwiseConv2d,
        Self::SepConv,
        Self::MaxPool,
        Self::AvgPool,
        Self::Identity,
        Self::BatchNorm,
        Self::Relu,
        Self::Add,
        Self::Mul,
        Self::Scale,
        Self::Concat,
        Self::GlobalAvgPool,
        Self::Affine,
        Self::SoftmaxCrossEntropy,
        Self::Sigmoid,
        Self::Tanh,
        Self::Exp,
        Self::LogSoftmax,
        Self::Pick,
        Self::GatherRows,
        Self::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Conv2d => "conv2d",
            Self::Conv1x1 => "conv1x1",
            Self::DepthwiseConv2d => "depthwise_conv2d",
            Self::SepConv => "sep_conv",
            Self::MaxPool => "max_pool",
            Self::AvgPool => "avg_pool",
            Self::Identity => "identity",
            Self::BatchNorm => "batch_norm",
            Self::Relu => "relu",
            Self::Add => "add",
            Self::Mul => "mul",
            Self::Scale => "scale",
            Self::Concat => "concat",
            Self::GlobalAvgPool => "global_avg_pool",
            Self::Affine => "affine",
            Self::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Exp => "exp",
            Self::LogSoftmax => "log_softmax",
            Self::Pick => "pick",
            Self::GatherRows => "gather_rows",
            Self::Sum => "sum",
        }
    }
}

impl FromStr for PrimitiveKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| TensorError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Attr {
    Int(usize),
    Float(f64),
    Ints(Vec<usize>),
    Str(String),
}

pub type Attrs = BTreeMap<String, Attr>;

fn int(attrs: &Attrs, kind: &'static str, key: &str, default: Option<usize>) -> Result<usize> {
    match (attrs.get(key), default) {
        (Some(Attr::Int(v)), _) => Ok(*v),
        (None, Some(d)) => Ok(d),
        _ => Err(TensorError::BadAttr { kind, attr: key.to_string() }),
    }
}

fn float(attrs: &Attrs, kind: &'static str, key: &str, default: f64) -> Result<f64> {
    match attrs.get(key) {
        Some(Attr::Float(v)) => Ok(*v),
        None => Ok(default),
        _ => Err(TensorError::BadAttr { kind, attr: key.to_string() }),
    }
}

fn ints<'a>(attrs: &'a Attrs, kind: &'static str, key: &str) -> Result<&'a [usize]> {
    match attrs.get(key) {
        Some(Attr::Ints(v)) => Ok(v),
        _ => Err(TensorError::BadAttr { kind, attr: key.to_string() }),
    }
}

fn mode(attrs: &Attrs, kind: &'static str) -> Result<BnMode> {
    match attrs.get("mode") {
        None => Ok(BnMode::Train),
        Some(Attr::Str(s)) => match s.as_str() {
            "train" => Ok(BnMode::Train),
            "batch" => Ok(BnMode::BatchOnly),
            "inference" => Ok(BnMode::Inference),
            _ => Err(TensorError::BadAttr { kind, attr: "mode".into() }),
        },
        _ => Err(TensorError::BadAttr { kind, attr: "mode".into() }),
    }
}

fn arity(kind: PrimitiveKind, inputs: &[Var], expected: usize) -> Result<()> {
    if inputs.len() != expected {
        return Err(TensorError::Arity { kind: kind.name(), expected, got: inputs.len() });
    }
    Ok(())
}

/// Applies `kind` to `inputs`, recording on `tape`.
pub fn apply_primitive(tape: &mut Tape, kind: PrimitiveKind, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
    use PrimitiveKind as K;
    let name = kind.name();
    match kind {
        K::Conv2d | K::Conv1x1 | K::DepthwiseConv2d => {
            arity(kind, inputs, 2)?;
            let stride = int(attrs, name, "stride", Some(1))?;
            match kind {
                K::DepthwiseConv2d => tape.depthwise_conv2d(inputs[0], inputs[1], stride),
                K::Conv1x1 if tape.shape(inputs[1]).get(2..) != Some(&[1, 1][..]) => Err(TensorError::ShapeMismatch {
                    kind: name,
                    detail: format!("weight {:?} is not 1x1", tape.shape(inputs[1])),
                }),
                _ => tape.conv2d(inputs[0], inputs[1], stride),
            }
        }
        K::SepConv => {
            arity(kind, inputs, 7)?;
            let stride = int(attrs, name, "stride", Some(1))?;
            let eps = float(attrs, name, "eps", 1e-5)?;
            let m = mode(attrs, name)?;
            let r = tape.relu(inputs[0]);
            let d = tape.depthwise_conv2d(r, inputs[1], stride)?;
            let p = tape.conv2d(d, inputs[2], 1)?;
            let (rm, rv) = (tape.data(inputs[5]).to_vec(), tape.data(inputs[6]).to_vec());
            Ok(tape.batch_norm(p, inputs[3], inputs[4], Some((&rm, &rv)), m, eps)?.0)
        }
        K::BatchNorm => {
            arity(kind, inputs, 5)?;
            let eps = float(attrs, name, "eps", 1e-5)?;
            let m = mode(attrs, name)?;
            let (rm, rv) = (tape.data(inputs[3]).to_vec(), tape.data(inputs[4]).to_vec());
            Ok(tape.batch_norm(inputs[0], inputs[1], inputs[2], Some((&rm, &rv)), m, eps)?.0)
        }
        K::MaxPool | K::AvgPool => {
            arity(kind, inputs, 1)?;
            let size = int(attrs, name, "size", Some(3))?;
            let stride = int(attrs, name, "stride", Some(1))?;
            if kind == K::MaxPool {
                tape.max_pool(inputs[0], size, stride)
            } else {
                tape.avg_pool(inputs[0], size, stride)
            }
        }
        K::Identity => {
            arity(kind, inputs, 1)?;
            Ok(tape.identity(inputs[0]))
        }
        K::Relu | K::Sigmoid | K::Tanh | K::Exp | K::Sum => {
            arity(kind, inputs, 1)?;
            let x = inputs[0];
            Ok(match kind {
                K::Relu => tape.relu(x),
                K::Sigmoid => tape.sigmoid(x),
                K::Tanh => tape.tanh(x),
                K::Exp => tape.exp(x),
                _ => tape.sum(x),
            })
        }
        K::Add | K::Mul => {
            arity(kind, inputs, 2)?;
            if kind == K::Add {
                tape.add(inputs[0], inputs[1])
            } else {
                tape.mul(inputs[0], inputs[1])
            }
        }
        K::Scale => {
            arity(kind, inputs, 1)?;
            let f = float(attrs, name, "factor", f64::NAN)?;
            if f.is_nan() {
                return Err(TensorError::BadAttr { kind: name, attr: "factor".into() });
            }
            Ok(tape.scale(inputs[0], f))
        }
        K::Concat => tape.concat(inputs),
        K::GlobalAvgPool => {
            arity(kind, inputs, 1)?;
            tape.global_avg_pool(inputs[0])
        }
        K::Affine => match inputs {
            [x, w] => tape.affine(*x, *w, None),
            [x, w, b] => tape.affine(*x, *w, Some(*b)),
            _ => arity(kind, inputs, 3).map(|_| unreachable!()),
        },
        K::SoftmaxCrossEntropy => {
            arity(kind, inputs, 1)?;
            tape.softmax_cross_entropy(inputs[0], ints(attrs, name, "labels")?)
        }
        K::LogSoftmax => {
            arity(kind, inputs, 1)?;
            tape.log_softmax(inputs[0])
        }
        K::Pick | K::GatherRows => {
            arity(kind, inputs, 1)?;
            let idx = ints(attrs, name, "indices")?.to_vec();
            if kind == K::Pick {
                tape.pick(inputs[0], &idx)
            } else {
                tape.gather_rows(inputs[0], &idx)
            }
        }
    }
}
