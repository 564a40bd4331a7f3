//! Two-stage training. Stage one trains everything under soft routing with
//! the restoration and contrastive losses and moves the expert centers by
//! clustering; stage two freezes the routing path and trains the rest under
//! hard routes with L1 only.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::Routing;
use crate::contrastive::{hc_loss, similarity_matrix, total_loss, LossConfig, LossReport};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{ParamStore, Session};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig};
use crate::rng::{derive, derive_indexed};
use crate::router::{update_centers_uniform, CenterBank, CenterUpdateConfig, CenterUpdateInfo};
use crate::synth::{sample_batch, Batch, Family, ImageSample};
use crate::tensor::Var;

pub const PAPER_STAGE1_EPOCHS: usize = 15;
pub const PAPER_STAGE1_BATCH: usize = 10;
pub const PAPER_STAGE2_EPOCHS: usize = 80;
pub const PAPER_STAGE2_BATCH: usize = 20;
pub const PAPER_LR: f64 = 2e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossConfig,
    /// Block gradient through experts that are not a sample's top choice.
    pub mask_gradients: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    /// Patches drawn per epoch; an epoch is `ceil(patches / batch)` steps.
    pub patches_per_epoch: usize,
    pub patch_size: usize,
    pub adam: AdamConfig,
    pub centers: CenterUpdateConfig,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub desk_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config {
                epochs: 3,
                batch_size: 6,
                lr: PAPER_LR,
                loss: LossConfig::default(),
                mask_gradients: true,
            },
            stage2: Stage2Config {
                epochs: 10,
                batch_size: 6,
                lr: PAPER_LR,
            },
            patches_per_epoch: 1000,
            patch_size: 48,
            adam: AdamConfig::default(),
            centers: CenterUpdateConfig::default(),
            clip_norm: Some(1.0),
            seed: 0,
            desk_scale: true,
        }
    }
}

impl TrainConfig {
    /// Schedule constants as published, for scaled-up runs.
    pub fn paper() -> Self {
        let d = Self::default();
        Self {
            stage1: Stage1Config {
                epochs: PAPER_STAGE1_EPOCHS,
                batch_size: PAPER_STAGE1_BATCH,
                ..d.stage1
            },
            stage2: Stage2Config {
                epochs: PAPER_STAGE2_EPOCHS,
                batch_size: PAPER_STAGE2_BATCH,
                lr: PAPER_LR,
            },
            clip_norm: None,
            desk_scale: false,
            ..d
        }
    }

    pub fn steps_per_epoch(&self, stage: Stage) -> u64 {
        let bs = self.batch_size(stage).max(1);
        self.patches_per_epoch.div_ceil(bs) as u64
    }

    pub fn total_steps(&self, stage: Stage) -> u64 {
        let epochs = match stage {
            Stage::One => self.stage1.epochs,
            Stage::Two => self.stage2.epochs,
        };
        epochs as u64 * self.steps_per_epoch(stage)
    }

    pub fn batch_size(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.stage1.batch_size,
            Stage::Two => self.stage2.batch_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Steps completed within the current stage.
    pub step: u64,
    pub store: ParamStore,
    pub bank: CenterBank,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(model: &ModelConfig, store: ParamStore, cfg: &TrainConfig) -> Self {
        let bank = CenterBank::random(model.experts(), model.routing_dim, derive(cfg.seed, "centers"));
        let adam = Adam::new(cfg.adam, &store);
        Self {
            stage: Stage::One,
            step: 0,
            store,
            bank,
            adam,
        }
    }

    /// Switches to stage two with fresh optimizer moments.
    pub fn begin_stage2(mut self, cfg: &TrainConfig) -> Self {
        self.stage = Stage::Two;
        self.step = 0;
        self.adam = Adam::new(cfg.adam, &self.store);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub stage: Stage,
    /// Zero-based index of the step just taken.
    pub step: u64,
    pub loss: LossReport,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub center: Option<CenterUpdateInfo>,
}

pub fn family_index(f: Family) -> usize {
    Family::ALL.iter().position(|&g| g == f).expect("family listed in ALL")
}

pub fn labels(batch: &Batch) -> Vec<usize> {
    batch.labels.iter().map(|&f| family_index(f)).collect()
}

/// Builds the stage-one objective on `s`. Returns the total-loss node, the
/// unit routing rows and the scalar report.
pub fn stage1_objective(model: &Model, s: &mut Session, bank: &CenterBank, batch: &Batch, cfg: &Stage1Config) -> Result<(Var, Var, LossReport)> {
    let x = s.input(batch.degraded.clone());
    let y = s.input(batch.clean.clone());
    let out = model.forward_soft(s, x, bank, cfg.mask_gradients)?;
    let sim = similarity_matrix(&mut s.tape, out.f)?;
    // with alpha = 0 the contrastive term is only logged, never differentiated
    let sim = if cfg.loss.alpha == 0.0 { s.tape.detach(sim) } else { sim };
    let (per, hc) = hc_loss(&mut s.tape, sim, &labels(batch), cfg.loss.margin)?;
    let (l1, total) = total_loss(&mut s.tape, out.restored, y, Some(hc), cfg.loss.alpha)?;
    let report = LossReport {
        l1: s.tape.value(l1).item(),
        hc_per_layer: s.tape.value(per).data().to_vec(),
        hc: s.tape.value(hc).item(),
        total: s.tape.value(total).item(),
    };
    Ok((total, out.f, report))
}

/// Builds the stage-two objective (hard routes, L1 only) on `s`.
pub fn stage2_objective(model: &Model, s: &mut Session, bank: &CenterBank, batch: &Batch) -> Result<(Var, LossReport)> {
    let x = s.input(batch.degraded.clone());
    let y = s.input(batch.clean.clone());
    let (routes, _) = model.route(s, x, bank)?;
    let restored = model.restore(s, x, Routing::Hard { y: &routes })?;
    let (l1, total) = total_loss(&mut s.tape, restored, y, None, 0.0)?;
    let v = s.tape.value(l1).item();
    Ok((
        total,
        LossReport {
            l1: v,
            hc_per_layer: Vec::new(),
            hc: 0.0,
            total: s.tape.value(total).item(),
        },
    ))
}

/// Seed of the batch drawn at `step` of `stage`.
pub fn batch_seed(cfg: &TrainConfig, stage: Stage, step: u64) -> u64 {
    let label = match stage {
        Stage::One => "stage1.batch",
        Stage::Two => "stage2.batch",
    };
    derive_indexed(cfg.seed, label, step)
}

fn check_finite(step: u64, r: &LossReport) -> Result<()> {
    if r.total.is_finite() && r.l1.is_finite() && r.hc.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step: step as usize,
            l1: r.l1,
            hc: r.hc,
        })
    }
}

pub fn stage1_step(model: &Model, state: &mut TrainState, cfg: &TrainConfig, train: &[ImageSample]) -> Result<StepReport> {
    let step = state.step;
    let batch = sample_batch(train, cfg.stage1.batch_size, cfg.patch_size, batch_seed(cfg, Stage::One, step))?;
    let mut s = Session::new(&state.store);
    let (total, f, loss) = stage1_objective(model, &mut s, &state.bank, &batch, &cfg.stage1)?;
    check_finite(step, &loss)?;
    let f = s.tape.value(f).clone();
    let mut grads = s.backward(total)?;
    let grad_norm = match cfg.clip_norm {
        Some(c) => clip_grad_norm(&mut grads, c),
        None => grads.global_norm(),
    };
    let lr = cosine_lr(step, cfg.total_steps(Stage::One), cfg.stage1.lr);
    state.adam.step(&mut state.store, &grads, lr);
    let d = *f.shape().last().unwrap_or(&1);
    let rows = f.numel() / d;
    let emb = f.reshaped(&[rows, d])?;
    let center = update_centers_uniform(&mut state.bank, &emb, &cfg.centers, derive_indexed(cfg.seed, "stage1.centers", step))?;
    state.step += 1;
    Ok(StepReport {
        stage: Stage::One,
        step,
        loss,
        lr,
        grad_norm,
        center: Some(center),
    })
}

pub fn stage2_step(model: &Model, state: &mut TrainState, cfg: &TrainConfig, train: &[ImageSample]) -> Result<StepReport> {
    let step = state.step;
    let batch = sample_batch(train, cfg.stage2.batch_size, cfg.patch_size, batch_seed(cfg, Stage::Two, step))?;
    let mut s = Session::with_trainable(&state.store, Model::stage2_trainable(&state.store));
    let (total, loss) = stage2_objective(model, &mut s, &state.bank, &batch)?;
    check_finite(step, &loss)?;
    let mut grads = s.backward(total)?;
    let grad_norm = match cfg.clip_norm {
        Some(c) => clip_grad_norm(&mut grads, c),
        None => grads.global_norm(),
    };
    let lr = cosine_lr(step, cfg.total_steps(Stage::Two), cfg.stage2.lr);
    state.adam.step(&mut state.store, &grads, lr);
    state.step += 1;
    Ok(StepReport {
        stage: Stage::Two,
        step,
        loss,
        lr,
        grad_norm,
        center: None,
    })
}

/// Runs the current stage from `state.step` up to its configured length, or
/// up to `until` steps if given. `on_step` sees every report and the state
/// right after the step.
pub fn run_stage<F>(model: &Model, state: &mut TrainState, cfg: &TrainConfig, train: &[ImageSample], until: Option<u64>, mut on_step: F) -> Result<()>
where
    F: FnMut(&StepReport, &TrainState) -> Result<()>,
{
    let total = cfg.total_steps(state.stage);
    let end = until.map_or(total, |u| u.min(total));
    while state.step < end {
        let r = match state.stage {
            Stage::One => stage1_step(model, state, cfg, train)?,
            Stage::Two => stage2_step(model, state, cfg, train)?,
        };
        on_step(&r, state)?;
    }
    Ok(())
}
