//! Margin contrastive loss over unit routing rows and the combined training loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: 0.2, alpha: 1.0 }
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub hc_per_layer: Vec<f64>,
    pub hc: f64,
    pub total: f64,
}

/// Pairwise cosines per site: `f: [N, K, d]` (unit rows) → `[K, N, N]`.
pub fn similarity_matrix(tape: &mut Tape, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 {
        return Err(invalid("similarity_matrix", format!("expected [N, K, d], got {:?}", s)));
    }
    if s[0] < 2 {
        return Err(invalid("similarity_matrix", "need at least two samples"));
    }
    let per_site = tape.permute(f, &[1, 0, 2])?;
    let t = tape.transpose(per_site)?;
    tape.matmul(per_site, t)
}

/// Same-label and different-label masks over ordered pairs `i != j`, with their counts.
pub fn pair_masks(labels: &[usize]) -> Result<(Tensor, Tensor, usize, usize)> {
    let n = labels.len();
    let (mut pos, mut neg) = (vec![0.0; n * n], vec![0.0; n * n]);
    let (mut np, mut nn) = (0, 0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                pos[i * n + j] = 1.0;
                np += 1;
            } else {
                neg[i * n + j] = 1.0;
                nn += 1;
            }
        }
    }
    if np == 0 {
        return Err(Error::MissingPairs("positive"));
    }
    if nn == 0 {
        return Err(Error::MissingPairs("negative"));
    }
    Ok((Tensor::new(&[n, n], pos)?, Tensor::new(&[n, n], neg)?, np, nn))
}

/// Per-site `(positive, negative)`: mean similarity over positive and negative ordered pairs. `s: [K, N, N]`.
pub fn pair_means(tape: &mut Tape, s: Var, labels: &[usize]) -> Result<(Var, Var)> {
    let shape = tape.shape(s).to_vec();
    if shape.len() != 3 || shape[1] != labels.len() || shape[2] != labels.len() {
        return Err(mismatch("hc_loss", &shape, &[labels.len(), labels.len()]));
    }
    let (pos, neg, np, nn) = pair_masks(labels)?;
    let mut masked_mean = |mask: Tensor, count: usize| -> Result<Var> {
        let m = tape.constant(mask);
        let x = tape.mul(s, m)?;
        let x = tape.sum_axis(x, 2)?;
        let x = tape.sum_axis(x, 1)?;
        Ok(tape.mul_scalar(x, 1.0 / count as f64))
    };
    let ep = masked_mean(pos, np)?;
    let en = masked_mean(neg, nn)?;
    Ok((ep, en))
}

/// Hinge `max(negative - positive + margin, 0)` per site (`[K]`) and its mean over sites (scalar).
pub fn hc_loss(tape: &mut Tape, s: Var, labels: &[usize], margin: f64) -> Result<(Var, Var)> {
    let (ep, en) = pair_means(tape, s, labels)?;
    let gap = tape.sub(en, ep)?;
    let gap = tape.add_scalar(gap, margin);
    let per_layer = tape.relu(gap);
    let mean = tape.mean(per_layer);
    Ok((per_layer, mean))
}

/// Mean absolute error between `restored` and `clean`.
pub fn l1_loss(tape: &mut Tape, restored: Var, clean: Var) -> Result<Var> {
    if tape.shape(restored) != tape.shape(clean) {
        return Err(mismatch("total_loss", tape.shape(restored), tape.shape(clean)));
    }
    let d = tape.sub(restored, clean)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// `l1 + alpha * hc`. With `alpha = 0` or no contrastive term the total is the L1 node itself.
pub fn total_loss(tape: &mut Tape, restored: Var, clean: Var, hc: Option<Var>, alpha: f64) -> Result<(Var, Var)> {
    let l1 = l1_loss(tape, restored, clean)?;
    let total = match hc {
        Some(h) if alpha != 0.0 => {
            let w = tape.mul_scalar(h, alpha);
            tape.add(l1, w)?
        }
        _ => l1,
    };
    Ok((l1, total))
}

/// Mean over sites of positive minus negative similarity for unit rows `f: [N, K, d]`. Evaluation helper, no tape.
pub fn embedding_gap(f: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let s = similarity_matrix(&mut tape, fv)?;
    let (ep, en) = pair_means(&mut tape, s, labels)?;
    let g = tape.sub(ep, en)?;
    let g = tape.mean(g);
    Ok(tape.value(g).item())
}
