//! Named parameter sets and the layer building blocks shared by the
//! tokenizer, the restorer language model, and the GCN.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::glorot;

/// Ordered, named collection of parameter matrices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> &Mat {
        let i = self.position(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.values[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let i = self.position(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.values[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, true)
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars, names: self.names.clone() }
    }

    /// Gradients for every parameter, in order, zero-filled where absent.
    pub fn grads(&self, bound: &Bound, grads: &Grads) -> Vec<Mat> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.get_or_zeros(v, p.dim()))
            .collect()
    }

    /// `self += scale · delta`
    pub fn apply(&mut self, delta: &[Mat], scale: f64) {
        assert_eq!(delta.len(), self.values.len());
        for (p, d) in self.values.iter_mut().zip(delta) {
            p.scaled_add(scale, d);
        }
    }

    /// Euclidean norm of the difference to `other` over all parameters.
    pub fn distance(&self, other: &ParamSet) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).mapv(|x| x * x).sum())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Schema("parameter names differ".into()));
        }
        for (name, (a, b)) in self.names.iter().zip(self.values.iter().zip(&other.values)) {
            if a.dim() != b.dim() {
                return Err(Error::Schema(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of a [`ParamSet`] placed on a tape.
pub struct Bound {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn init_linear(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    ps.insert(format!("{name}.w"), glorot(rng, fan_in, fan_out));
    ps.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
}

pub fn linear(t: &mut Tape, b: &Bound, name: &str, x: Var) -> Var {
    let w = b.get(&format!("{name}.w"));
    let bias = b.get(&format!("{name}.b"));
    let y = t.matmul(x, w);
    t.add_row(y, bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, t: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => t.relu(x),
            Activation::Gelu => t.gelu(x),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
            }
        }
    }
}

/// Two-layer perceptron `name.0` → activation → `name.1`.
pub fn init_mlp(ps: &mut ParamSet, name: &str, dims: (usize, usize, usize), rng: &mut impl Rng) {
    init_linear(ps, &format!("{name}.0"), dims.0, dims.1, rng);
    init_linear(ps, &format!("{name}.1"), dims.1, dims.2, rng);
}

pub fn mlp(t: &mut Tape, b: &Bound, name: &str, x: Var, act: Activation) -> Var {
    let h = linear(t, b, &format!("{name}.0"), x);
    let h = act.apply(t, h);
    linear(t, b, &format!("{name}.1"), h)
}

pub fn init_layer_norm(ps: &mut ParamSet, name: &str, dim: usize) {
    ps.insert(format!("{name}.g"), Array2::ones((1, dim)));
    ps.insert(format!("{name}.b"), Array2::zeros((1, dim)));
}

pub fn layer_norm(t: &mut Tape, b: &Bound, name: &str, x: Var) -> Var {
    let y = t.layer_norm(x, 1e-5);
    let y = t.mul_row(y, b.get(&format!("{name}.g")));
    t.add_row(y, b.get(&format!("{name}.b")))
}

/// Query/key/value/output projections for multi-head attention of width `dim`.
pub fn init_attention(ps: &mut ParamSet, name: &str, dim: usize, rng: &mut impl Rng) {
    for proj in ["q", "k", "v", "o"] {
        ps.insert(format!("{name}.w{proj}"), glorot(rng, dim, dim));
    }
}

/// Scaled dot-product attention of `queries` over `keys_values`. `mask`, when
/// given, is an additive `n_q × n_kv` constant (large negative to block).
pub fn attention(
    t: &mut Tape,
    b: &Bound,
    name: &str,
    queries: Var,
    keys_values: Var,
    heads: usize,
    mask: Option<Var>,
) -> Var {
    let dim = t.shape(queries).1;
    assert_eq!(dim % heads, 0, "width {dim} not divisible by {heads} heads");
    let head_dim = dim / heads;
    let q = t.matmul(queries, b.get(&format!("{name}.wq")));
    let k = t.matmul(keys_values, b.get(&format!("{name}.wk")));
    let v = t.matmul(keys_values, b.get(&format!("{name}.wv")));
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                t.slice_cols(q, h * head_dim, head_dim),
                t.slice_cols(k, h * head_dim, head_dim),
                t.slice_cols(v, h * head_dim, head_dim),
            )
        };
        let scores = t.matmul_t(qh, kh);
        let mut scores = t.scale(scores, scale);
        if let Some(m) = mask {
            scores = t.add(scores, m);
        }
        let weights = t.softmax(scores);
        outs.push(t.matmul(weights, vh));
    }
    let joined = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
    t.matmul(joined, b.get(&format!("{name}.wo")))
}

/// Sinusoidal embedding of a scalar position, as a `1×dim` row.
pub fn sinusoidal(position: f64, dim: usize) -> Mat {
    let half = dim / 2;
    Array2::from_shape_fn((1, dim), |(_, j)| {
        let k = (j % half.max(1)) as f64;
        let freq = (-(10_000f64).ln() * k / half.max(1) as f64).exp();
        if j < half {
            (position * freq).sin()
        } else {
            (position * freq).cos()
        }
    })
}
