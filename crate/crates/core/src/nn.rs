//! Parameter storage and the handful of layers the networks are built from.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::derive;
use crate::tensor::{finite_difference_check_at, seeded_init, GradCheckReport, InitScheme, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Flat, ordered list of named parameter tensors. Each tensor is initialised
/// from a seed derived from the store seed and its name, so adding or
/// removing one module never shifts the initial values of another.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], scheme: InitScheme) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        let value = seeded_init(shape, scheme, derive(self.seed, name));
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Ids whose name starts with any of `prefixes`.
    pub fn ids_with_prefix<'a>(&'a self, prefixes: &'a [&'a str]) -> impl Iterator<Item = ParamId> + 'a {
        self.ids()
            .filter(move |&id| prefixes.iter().any(|p| self.name(id).starts_with(p)))
    }
}

/// Per-parameter gradients, indexed by [`ParamId`].
#[derive(Debug, Default)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    pub fn global_norm(&self) -> f64 {
        let ss: f64 = self
            .0
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum();
        libm::sqrt(ss)
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    trainable: Vec<bool>,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    /// Every parameter receives gradients.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, vec![true; store.len()])
    }

    /// No parameter receives gradients.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, vec![false; store.len()])
    }

    pub fn with_trainable(store: &'a ParamStore, trainable: Vec<bool>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses `v` (a node on this session's tape) as the value of parameter `id`.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Backward from `loss`; parameters never touched by the forward pass get `None`.
    pub fn backward(mut self, loss: Var) -> Result<ParamGrads> {
        let mut grads = self.tape.backward(loss)?;
        Ok(ParamGrads(
            self.bound
                .iter()
                .zip(&self.trainable)
                .map(|(b, &t)| b.filter(|_| t).and_then(|v| grads.take(v)))
                .collect(),
        ))
    }
}

/// Finite-difference check of the scalar built by `f` with respect to parameter `id`.
pub fn param_grad_check<F>(store: &ParamStore, id: ParamId, eps: f64, coords: &[usize], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    finite_difference_check_at(
        |tape, p| {
            let mut s = Session::inference(store);
            core::mem::swap(&mut s.tape, tape);
            s.bind(id, p);
            let out = f(&mut s);
            core::mem::swap(&mut s.tape, tape);
            out
        },
        store.get(id),
        eps,
        coords,
    )
}

/// Fully connected layer acting on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        Self::with_init(store, name, inp, out, bias, InitScheme::UniformFanIn)
    }

    pub fn with_init(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool, scheme: InitScheme) -> Self {
        let w = store.add(&alloc::format!("{name}.w"), &[inp, out], scheme);
        let b = bias.then(|| store.add(&alloc::format!("{name}.b"), &[out], InitScheme::Zeros));
        Self { w, b }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let y = s.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Square-kernel NHWC convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let w = store.add(&alloc::format!("{name}.w"), &[k, k, cin, cout], InitScheme::UniformFanIn);
        let b = store.add(&alloc::format!("{name}.b"), &[cout], InitScheme::Zeros);
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        let y = s.tape.conv2d(x, w, self.stride, self.pad)?;
        s.tape.add(y, b)
    }
}

/// 3x3 depthwise convolution with bias.
#[derive(Clone, Debug)]
pub struct DwConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl DwConv {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let w = store.add(&alloc::format!("{name}.w"), &[3, 3, c], InitScheme::Normal { std: 1.0 / 3.0 });
        let b = store.add(&alloc::format!("{name}.b"), &[c], InitScheme::Zeros);
        Self { w, b }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        let y = s.tape.depthwise_conv2d(x, w, 1)?;
        s.tape.add(y, b)
    }
}

/// Layer norm over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
    pub eps: f64,
}

pub const NORM_EPS: f64 = 1e-6;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let g = store.add(&alloc::format!("{name}.g"), &[c], InitScheme::Ones);
        let b = store.add(&alloc::format!("{name}.b"), &[c], InitScheme::Zeros);
        Self { g, b, eps: NORM_EPS }
    }

    pub fn with_eps(store: &mut ParamStore, name: &str, c: usize, eps: f64) -> Self {
        Self { eps, ..Self::new(store, name, c) }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = s.tape.layer_norm(x, self.eps);
        self.affine(s, y)
    }

    /// Normalises each sample over all of its trailing axes, then applies
    /// the per-channel gain and bias.
    pub fn forward_sample(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        let n = shape.first().copied().unwrap_or(1);
        let flat = s.tape.reshape(x, &[n, shape.iter().skip(1).product()])?;
        let y = s.tape.layer_norm(flat, self.eps);
        let y = s.tape.reshape(y, &shape)?;
        self.affine(s, y)
    }

    fn affine(&self, s: &mut Session, y: Var) -> Result<Var> {
        let (g, b) = (s.param(self.g), s.param(self.b));
        let y = s.tape.mul(y, g)?;
        s.tape.add(y, b)
    }
}
