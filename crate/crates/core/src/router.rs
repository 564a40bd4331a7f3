//! Hyperspherical routing: per-site unit routing rows, cosine gating against a
//! shared bank of unit expert centers, and the center clustering update.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::nn::{Linear, ParamStore, Session};
use crate::rng::rng_from_seed;
use crate::tensor::{Tape, Tensor, Var};

/// Pre-normalisation row norms below this are rejected as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Two-layer MLP from the degradation token to `sites` unit rows of width `dim`.
#[derive(Clone, Debug)]
pub struct Router {
    fc1: Linear,
    fc2: Linear,
    pub sites: usize,
    pub dim: usize,
}

impl Router {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, sites: usize, dim: usize) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, sites * dim, true),
            fc2: Linear::new(store, &format!("{name}.fc2"), sites * dim, sites * dim, true),
            sites,
            dim,
        }
    }

    /// Raw (un-normalised) routing rows, `[N, sites, dim]`.
    pub fn raw(&self, s: &mut Session, deg: Var) -> Result<Var> {
        let n = s.tape.shape(deg)[0];
        let h = self.fc1.forward(s, deg)?;
        let h = s.tape.gelu(h);
        let o = self.fc2.forward(s, h)?;
        s.tape.reshape(o, &[n, self.sites, self.dim])
    }

    /// Unit routing rows, `[N, sites, dim]`. Fails if any raw row is (numerically) zero.
    pub fn forward(&self, s: &mut Session, deg: Var) -> Result<Var> {
        let raw = self.raw(s, deg)?;
        check_rows(s.tape.value(raw), self.dim)?;
        Ok(s.tape.l2_normalize(raw))
    }
}

fn check_rows(raw: &Tensor, dim: usize) -> Result<()> {
    let sites = raw.shape()[1];
    for (r, row) in raw.data().chunks(dim).enumerate() {
        let norm = libm::sqrt(row.iter().map(|v| v * v).sum());
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::DegenerateEmbedding {
                sample: r / sites,
                site: r % sites,
                norm,
            });
        }
    }
    Ok(())
}

/// Cosine gates `softmax(f · Cᵀ / temperature)` for `f: [N, K, d]`, `centers: [C, d]` → `[N, K, C]`.
/// Both operands are re-normalised, so un-normalised rows gate identically to their unit versions.
pub fn gate_probabilities(tape: &mut Tape, f: Var, centers: Var, temperature: f64) -> Result<Var> {
    let sim = cosine_similarity(tape, f, centers)?;
    let sim = if temperature == 1.0 { sim } else { tape.mul_scalar(sim, 1.0 / temperature) };
    Ok(tape.softmax(sim))
}

/// `[..., d] x [C, d] → [..., C]` cosine similarities.
pub fn cosine_similarity(tape: &mut Tape, f: Var, centers: Var) -> Result<Var> {
    let (fs, cs) = (tape.shape(f).to_vec(), tape.shape(centers).to_vec());
    if cs.len() != 2 || fs.last() != cs.last() {
        return Err(mismatch("gate_probabilities", &fs, &cs));
    }
    let f = tape.l2_normalize(f);
    let c = tape.l2_normalize(centers);
    let ct = tape.transpose(c)?;
    tape.matmul(f, ct)
}

/// Row-wise argmax over the last axis of `p`; the lowest index wins ties.
pub fn hard_route(p: &Tensor) -> Vec<usize> {
    let c = *p.shape().last().unwrap_or(&1);
    p.data().chunks(c).map(argmax).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Unit expert centers shared by every routing site, `[C, d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterBank {
    centers: Tensor,
}

impl CenterBank {
    /// Gaussian directions projected to the sphere.
    pub fn random(experts: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let data = (0..experts * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self::from_tensor(Tensor::new(&[experts, dim], data).expect("bank shape"))
            .expect("gaussian rows are non-zero")
    }

    /// Normalises the rows of `centers`.
    pub fn from_tensor(mut centers: Tensor) -> Result<Self> {
        if centers.rank() != 2 || centers.shape()[0] == 0 || centers.shape()[1] == 0 {
            return Err(invalid("center_bank", format!("expected [C, d], got {:?}", centers.shape())));
        }
        let d = centers.shape()[1];
        for row in centers.data_mut().chunks_mut(d) {
            let n = libm::sqrt(row.iter().map(|v| v * v).sum());
            if !(n >= DEGENERATE_NORM) {
                return Err(invalid("center_bank", "zero-norm center"));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { centers })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.centers
    }

    pub fn experts(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn center(&self, j: usize) -> &[f64] {
        self.centers.row(j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterUpdateConfig {
    /// Weight of the uniformity term.
    pub mu: f64,
    /// Sharpness of the pairwise repulsion kernel.
    pub t: f64,
    pub step: f64,
    pub samples: usize,
}

impl Default for CenterUpdateConfig {
    fn default() -> Self {
        Self {
            mu: 0.1,
            t: 2.0,
            step: 0.01,
            samples: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterUpdateInfo {
    pub loss: f64,
    pub used: usize,
    /// Fewer embeddings than the configured subsample were available, so all were used.
    pub short_sample: bool,
}

/// One projected gradient step on `attract + mu * uniform`, where `attract` is
/// minus the mean cosine of a random embedding subsample to its nearest center
/// and `uniform = log mean_{j≠k} exp(t cos(c_j, c_k))`. `embeddings` is
/// `[M, d]`; with `M = 0` only the uniformity term acts.
pub fn update_centers_uniform(
    bank: &mut CenterBank,
    embeddings: &Tensor,
    cfg: &CenterUpdateConfig,
    seed: u64,
) -> Result<CenterUpdateInfo> {
    let (c, d) = (bank.experts(), bank.dim());
    if embeddings.rank() != 2 || (embeddings.shape()[0] > 0 && embeddings.shape()[1] != d) {
        return Err(mismatch("update_centers_uniform", embeddings.shape(), bank.tensor().shape()));
    }
    let m = embeddings.shape()[0];
    let used = m.min(cfg.samples);
    let short_sample = m < cfg.samples;

    let mut tape = Tape::new();
    let raw = tape.leaf(bank.centers.clone(), true);
    let cn = tape.l2_normalize(raw);
    let mut terms = Vec::new();
    if used > 0 {
        let picked: Vec<usize> = if short_sample {
            (0..m).collect()
        } else {
            let mut rng = rng_from_seed(seed);
            let mut v = sample_indices(&mut rng, m, used).into_vec();
            v.sort_unstable();
            v
        };
        let mut sub = Vec::with_capacity(used * d);
        for &i in &picked {
            sub.extend_from_slice(embeddings.row(i));
        }
        let e = tape.constant(Tensor::new(&[used, d], sub)?);
        let ct = tape.transpose(cn)?;
        let sims = tape.matmul(e, ct)?;
        let mut mask = vec![0.0; used * c];
        for (i, row) in tape.value(sims).data().chunks(c).enumerate() {
            mask[i * c + argmax(row)] = 1.0;
        }
        let mask = tape.constant(Tensor::new(&[used, c], mask)?);
        let nearest = tape.mul(sims, mask)?;
        let s = tape.sum(nearest);
        terms.push(tape.mul_scalar(s, -1.0 / used as f64));
    }
    if c > 1 && cfg.mu != 0.0 {
        let ct = tape.transpose(cn)?;
        let g = tape.matmul(cn, ct)?;
        let g = tape.mul_scalar(g, cfg.t);
        let g = tape.exp(g);
        let mut off = vec![1.0; c * c];
        for j in 0..c {
            off[j * c + j] = 0.0;
        }
        let off = tape.constant(Tensor::new(&[c, c], off)?);
        let g = tape.mul(g, off)?;
        let s = tape.sum(g);
        let mean = tape.mul_scalar(s, 1.0 / (c * (c - 1)) as f64);
        let u = tape.log(mean);
        terms.push(tape.mul_scalar(u, cfg.mu));
    }
    let Some(&first) = terms.first() else {
        return Ok(CenterUpdateInfo {
            loss: 0.0,
            used,
            short_sample,
        });
    };
    let loss = match terms.get(1) {
        Some(&second) => tape.add(first, second)?,
        None => first,
    };
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let g = grads.get(raw).expect("bank is a gradient leaf");
    let mut next = bank.centers.clone();
    for (v, gv) in next.data_mut().iter_mut().zip(g.data()) {
        *v -= cfg.step * gv;
    }
    *bank = CenterBank::from_tensor(next)?;
    Ok(CenterUpdateInfo {
        loss: loss_value,
        used,
        short_sample,
    })
}

/// `(min pairwise angle in degrees, mean pairwise cosine)` over distinct center pairs.
pub fn center_uniformity_stat(bank: &CenterBank) -> (f64, f64) {
    let c = bank.experts();
    let (mut min_angle, mut sum, mut pairs) = (f64::INFINITY, 0.0, 0usize);
    for j in 0..c {
        for k in j + 1..c {
            let cos: f64 = bank.center(j).iter().zip(bank.center(k)).map(|(a, b)| a * b).sum();
            let cos = cos.clamp(-1.0, 1.0);
            min_angle = min_angle.min(libm::acos(cos).to_degrees());
            sum += cos;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return (180.0, 0.0);
    }
    (min_angle, sum / pairs as f64)
}

/// Number of distinct routes through `sites` sites of `experts` experts each.
pub fn path_count(sites: u32, experts: u64) -> u64 {
    experts.pow(sites)
}
