//! A run directory and the commands that operate on it.
//!
//! ```text
//! <dir>/config.json
//! <dir>/manifest.json
//! <dir>/losses.csv
//! <dir>/checkpoints/stage{1,2}_epoch{N}.ckpt
//! <dir>/routes/test.jsonl, routes/purity.json
//! <dir>/eval/report.json, eval/<id>.png
//! <dir>/diag/bias.json, diag/dsp/<id>.png
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sphroute_core::metrics::{embedding_bias_report, psnr, routing_purity, ssim};
use sphroute_core::model::Model;
use sphroute_core::nn::Session;
use sphroute_core::optim::cosine_lr;
use sphroute_core::synth::{generate_dataset, stack, Dataset, Family, ImageSample};
use sphroute_core::trainer::{run_stage, Stage, TrainState};
use sphroute_core::Tensor;

use crate::artifacts::{
    read_json, read_losses, write_json, write_traces, BiasDiagnostic, FamilyMetrics, LossLog, LossRow, Manifest,
    MetricReport, Purity, RouteTrace, ROUTE_SCHEMA_VERSION,
};
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::imageio::{load_png, save_png};

/// Images per inference batch.
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub cfg: RunConfig,
}

/// Called at the end of every epoch with the stage, the 1-based epoch and
/// the checkpoint just written.
pub type EpochHook<'a> = &'a mut dyn FnMut(Stage, u64, &Path);

impl Run {
    /// Creates `dir` if needed and writes `config.json`.
    pub fn create(dir: impl Into<PathBuf>, cfg: RunConfig) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        cfg.save(&dir.join("config.json"))?;
        Ok(Self { dir, cfg })
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let path = dir.join("config.json");
        if !path.exists() {
            return Err(Error::Missing(format!("run configuration {}", path.display())));
        }
        let cfg = RunConfig::load(&path)?;
        Ok(Self { dir, cfg })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn checkpoint_path(&self, stage: Stage, epoch: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("stage{}_epoch{epoch}.ckpt", stage.number()))
    }

    /// Highest-epoch checkpoint of `stage` present on disk.
    pub fn latest_checkpoint(&self, stage: Stage) -> Option<PathBuf> {
        let prefix = format!("stage{}_epoch", stage.number());
        let entries = fs::read_dir(self.dir.join("checkpoints")).ok()?;
        entries
            .filter_map(|e| {
                let name = e.ok()?.file_name().into_string().ok()?;
                let epoch: u64 = name.strip_prefix(&prefix)?.strip_suffix(".ckpt")?.parse().ok()?;
                Some(epoch)
            })
            .max()
            .map(|e| self.checkpoint_path(stage, e))
    }

    /// Latest stage-two checkpoint, else latest stage-one checkpoint.
    pub fn final_checkpoint(&self) -> Option<PathBuf> {
        self.latest_checkpoint(Stage::Two).or_else(|| self.latest_checkpoint(Stage::One))
    }

    fn synth_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.cfg.synth).expect("configs serialise");
        hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&bytes))
    }

    /// Clean base scenes from `base_images`, in file-name order; empty when unset.
    fn bases(&self) -> Result<Vec<Tensor>> {
        let Some(dir) = &self.cfg.base_images else {
            return Ok(Vec::new());
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Missing(format!("PNG images in {}", dir.display())));
        }
        paths.iter().map(|p| load_png(p)).collect()
    }

    /// Regenerates the dataset from the configuration, checking it against
    /// `manifest.json` when one exists.
    pub fn dataset(&self) -> Result<Dataset> {
        let ds = generate_dataset(&self.cfg.synth, &self.bases()?)?;
        let path = self.path("manifest.json");
        if path.exists() {
            let m: Manifest = read_json(&path)?;
            m.verify(&ds)?;
        }
        Ok(ds)
    }

    /// Builds the dataset, writes `manifest.json` and, if asked, PNG
    /// previews under `data/`.
    pub fn synth(&self, previews: bool) -> Result<Manifest> {
        let ds = generate_dataset(&self.cfg.synth, &self.bases()?)?;
        let m = Manifest::of(&ds, self.synth_hash());
        write_json(&self.path("manifest.json"), &m)?;
        if previews {
            for s in ds.train.iter().chain(&ds.test) {
                let base = self.dir.join("data").join(s.split.name());
                save_png(&base.join(format!("{}_clean.png", s.id)), &s.clean)?;
                save_png(&base.join(format!("{}_degraded.png", s.id)), &s.degraded)?;
            }
        }
        Ok(m)
    }

    /// The model and a training state: from `ckpt` if given, otherwise
    /// freshly initialised.
    pub fn load(&self, ckpt: Option<&Path>) -> Result<(Model, TrainState)> {
        let (model, store) = Model::build(&self.cfg.model, self.cfg.train.seed)?;
        let state = match ckpt {
            Some(p) => checkpoint::load(p, &self.cfg)?.state,
            None => TrainState::new(&self.cfg.model, store, &self.cfg.train),
        };
        Ok((model, state))
    }

    /// Trains one stage to completion (or to `until` steps), writing a
    /// checkpoint at the end of every epoch. Stage one starts fresh unless
    /// `resume` names a stage-one checkpoint; stage two starts from the final
    /// stage-one checkpoint unless `resume` names a stage-two checkpoint.
    pub fn train(&self, stage: Stage, resume: Option<&Path>, until: Option<u64>, hook: Option<EpochHook>) -> Result<TrainState> {
        let cfg = &self.cfg;
        let ds = self.dataset()?;
        let (model, mut state) = match resume {
            Some(p) => {
                let (model, state) = self.load(Some(p))?;
                if state.stage != stage {
                    return Err(Error::Missing(format!("stage-{} checkpoint, got stage {}", stage.number(), state.stage.number())));
                }
                (model, state)
            }
            None => match stage {
                Stage::One => self.load(None)?,
                Stage::Two => {
                    let epochs = cfg.train.stage1.epochs as u64;
                    let p = self.checkpoint_path(Stage::One, epochs);
                    if !p.exists() {
                        return Err(Error::Missing(format!("stage-1 checkpoint {}", p.display())));
                    }
                    let (model, state) = self.load(Some(&p))?;
                    if state.stage != Stage::One || state.step != cfg.train.total_steps(Stage::One) {
                        return Err(Error::Missing(format!("completed stage-1 state in {}", p.display())));
                    }
                    (model, state.begin_stage2(&cfg.train))
                }
            },
        };

        let log_path = self.path("losses.csv");
        let cut = (stage.number(), state.step);
        let keep: Vec<LossRow> = if log_path.exists() {
            read_losses(&log_path)?.into_iter().filter(|r| (r.stage, r.step) < cut).collect()
        } else {
            Vec::new()
        };
        let mut log = LossLog::create(&log_path, &keep)?;
        let spe = cfg.train.steps_per_epoch(stage);
        let total = cfg.train.total_steps(stage);
        let mut hook = hook;
        let mut failure = None;
        let mut record = |r: &sphroute_core::trainer::StepReport, st: &TrainState| -> Result<()> {
            log.push(&LossRow {
                stage: stage.number(),
                step: r.step,
                l1: r.loss.l1,
                hc: r.loss.hc,
                total: r.loss.total,
                lr: r.lr,
            })?;
            let done = r.step + 1;
            if done % spe == 0 || done == total {
                log.flush()?;
                let epoch = done.div_ceil(spe);
                let path = self.checkpoint_path(stage, epoch);
                checkpoint::save(&path, &Checkpoint::new(cfg, st.clone()))?;
                if let Some(h) = hook.as_mut() {
                    h(stage, epoch, &path);
                }
            }
            Ok(())
        };
        let res = run_stage(&model, &mut state, &cfg.train, &ds.train, until, |r, st| {
            record(r, st).map_err(|e| {
                failure = Some(e);
                sphroute_core::Error::Data("run artifacts could not be written".into())
            })
        });
        if let Some(e) = failure {
            return Err(e);
        }
        res?;
        log.flush()?;
        Ok(state)
    }

    /// Hard-routed restoration of the test split.
    fn restore_test(&self, ckpt: Option<&Path>) -> Result<(Vec<ImageSample>, Vec<Tensor>, Vec<RouteTrace>)> {
        let ds = self.dataset()?;
        let (model, state) = self.load(ckpt)?;
        let k = self.cfg.model.sites();
        let c = self.cfg.model.experts();
        let (mut restored, mut traces) = (Vec::new(), Vec::new());
        for chunk in ds.test.chunks(EVAL_BATCH) {
            let x = stack(&chunk.iter().map(|s| &s.degraded).collect::<Vec<_>>())?;
            let out = model.infer(&state.store, &state.bank, &x)?;
            let hw = out.restored.numel() / chunk.len();
            let shape = chunk[0].degraded.shape();
            for (i, s) in chunk.iter().enumerate() {
                restored.push(Tensor::new(shape, out.restored.data()[i * hw..(i + 1) * hw].to_vec())?);
                let g = &out.gates.data()[i * k * c..(i + 1) * k * c];
                traces.push(RouteTrace {
                    schema_version: ROUTE_SCHEMA_VERSION,
                    id: s.id.clone(),
                    label: s.label,
                    y: out.routes[i * k..(i + 1) * k].to_vec(),
                    p: g.chunks(c).map(<[f64]>::to_vec).collect(),
                });
            }
        }
        Ok((ds.test, restored, traces))
    }

    /// PSNR and SSIM per family on the test split; writes `eval/report.json`
    /// and, if asked, restored PNGs.
    pub fn eval(&self, ckpt: Option<&Path>, pngs: bool) -> Result<MetricReport> {
        let (test, restored, _) = self.restore_test(ckpt)?;
        let mut acc: BTreeMap<Family, [f64; 5]> = BTreeMap::new();
        for (s, r) in test.iter().zip(&restored) {
            let e = acc.entry(s.label).or_default();
            e[0] += 1.0;
            e[1] += psnr(r, &s.clean)?;
            e[2] += ssim(r, &s.clean)?;
            e[3] += psnr(&s.degraded, &s.clean)?;
            e[4] += ssim(&s.degraded, &s.clean)?;
            if pngs {
                save_png(&self.dir.join("eval").join(format!("{}.png", s.id)), r)?;
            }
        }
        let families = acc
            .into_iter()
            .map(|(family, [n, p, q, ip, iq])| FamilyMetrics {
                family,
                count: n as usize,
                psnr: p / n,
                ssim: q / n,
                input_psnr: ip / n,
                input_ssim: iq / n,
            })
            .collect();
        let report = MetricReport::new(hex::encode(self.cfg.hash()), families);
        write_json(&self.path("eval/report.json"), &report)?;
        Ok(report)
    }

    /// Route traces of the test split and their purity; writes
    /// `routes/test.jsonl` and `routes/purity.json`.
    pub fn routes(&self, ckpt: Option<&Path>) -> Result<(Vec<RouteTrace>, Purity)> {
        let (_, _, traces) = self.restore_test(ckpt)?;
        let purity = purity_of(&traces)?;
        write_traces(&self.path("routes/test.jsonl"), &traces)?;
        write_json(&self.path("routes/purity.json"), &purity)?;
        Ok((traces, purity))
    }

    /// Centroid dispersion of test-split routing rows at every site; writes
    /// `diag/bias.json`.
    pub fn diag(&self, ckpt: Option<&Path>) -> Result<BiasDiagnostic> {
        let ds = self.dataset()?;
        let (model, state) = self.load(ckpt)?;
        let x = stack(&ds.test.iter().map(|s| &s.degraded).collect::<Vec<_>>())?;
        let labels: Vec<Family> = ds.test.iter().map(|s| s.label).collect();
        let unit = model.embed(&state.store, &x)?;
        let raw = model.embed_raw(&state.store, &x)?;
        let k = self.cfg.model.sites();
        let (mut angular, mut linear) = (Vec::with_capacity(k), Vec::with_capacity(k));
        for site in 0..k {
            angular.push(embedding_bias_report(&site_rows(&unit, site)?, &labels)?);
            linear.push(embedding_bias_report(&site_rows(&raw, site)?, &labels)?);
        }
        let mean = |v: &[sphroute_core::metrics::BiasReport], f: fn(&sphroute_core::metrics::BiasReport) -> f64| {
            v.iter().map(f).sum::<f64>() / v.len() as f64
        };
        let d = BiasDiagnostic {
            mean_angular_ratio: mean(&angular, |r| r.angular_ratio),
            mean_linear_ratio: mean(&linear, |r| r.linear_ratio),
            angular,
            linear,
        };
        write_json(&self.path("diag/bias.json"), &d)?;
        Ok(d)
    }

    /// Writes `diag/dsp/<id>.png` for every test image: the norm of each
    /// token of the upsampled degradation map, scaled by the largest norm
    /// over the split and enlarged to the image size.
    pub fn dsp_heatmaps(&self, ckpt: Option<&Path>) -> Result<usize> {
        let ds = self.dataset()?;
        let (model, state) = self.load(ckpt)?;
        let glgf = model.glgf.as_ref().ok_or_else(|| Error::Missing("restoration prior (disabled in this configuration)".into()))?;
        let mut maps = Vec::with_capacity(ds.test.len());
        for s in &ds.test {
            let mut sess = Session::inference(&state.store);
            let x = sess.input(stack(&[&s.degraded])?);
            let tokens = model.content.forward(&mut sess, x)?;
            let sh = sess.tape.shape(tokens.patches).to_vec();
            let (_, dsp) = glgf.build_dsp(&mut sess, &model.deg, x, sh[1], sh[2])?;
            let d = *sess.tape.shape(dsp).last().expect("rank-3 map");
            let norms: Vec<f64> = sess.tape.value(dsp).data().chunks(d).map(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            maps.push((sh[1], sh[2], norms));
        }
        let top = maps.iter().flat_map(|m| m.2.iter().copied()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        for (s, (hp, wp, norms)) in ds.test.iter().zip(&maps) {
            let (h, w) = (s.degraded.shape()[0], s.degraded.shape()[1]);
            let mut px = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    let v = norms[(y * hp / h) * wp + x * wp / w] / top;
                    px.extend([v; 3]);
                }
            }
            save_png(&self.dir.join("diag/dsp").join(format!("{}.png", s.id)), &Tensor::new(&[h, w, 3], px)?)?;
        }
        Ok(maps.len())
    }

    /// Losses logged so far.
    pub fn losses(&self) -> Result<Vec<LossRow>> {
        read_losses(&self.path("losses.csv"))
    }

    /// Maximum deviation of the logged learning rates from the cosine schedule.
    pub fn lr_schedule_error(&self) -> Result<f64> {
        let t = &self.cfg.train;
        Ok(self
            .losses()?
            .iter()
            .map(|r| {
                let (stage, lr0) = if r.stage == 1 { (Stage::One, t.stage1.lr) } else { (Stage::Two, t.stage2.lr) };
                (r.lr - cosine_lr(r.step, t.total_steps(stage), lr0)).abs()
            })
            .fold(0.0, f64::max))
    }
}

pub fn purity_of(traces: &[RouteTrace]) -> Result<Purity> {
    let pairs: Vec<(Family, Vec<usize>)> = traces.iter().map(|t| (t.label, t.y.clone())).collect();
    Ok(routing_purity(&pairs)?)
}

/// Rows `[N, d]` of one site from `[N, K, d]`.
pub fn site_rows(f: &Tensor, site: usize) -> Result<Tensor> {
    let (n, k, d) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut v = Vec::with_capacity(n * d);
    for i in 0..n {
        let o = (i * k + site) * d;
        v.extend_from_slice(&f.data()[o..o + d]);
    }
    Ok(Tensor::new(&[n, d], v)?)
}
