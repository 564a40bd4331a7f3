//! Desk-scale training behaviour: what a few hundred steps must already show.

use std::sync::OnceLock;

use sphroute_core::backbone::ArchConfig;
use sphroute_core::contrastive::embedding_gap;
use sphroute_core::encoders::EncoderConfig;
use sphroute_core::glgf::GlgfConfig;
use sphroute_core::model::{Model, ModelConfig};
use sphroute_core::nn::Session;
use sphroute_core::synth::{add_gaussian_noise, add_rain_streaks, darken, generate_dataset, procedural_image, stack, Dataset, Family, ImageSample, ParamRanges, SynthConfig};
use sphroute_core::tensor::Tensor;
use sphroute_core::trainer::{family_index, run_stage, Stage, TrainConfig, TrainState};

const IMAGE: usize = 40;

fn model_cfg() -> ModelConfig {
    let enc = EncoderConfig::new(vec![8, 16, 32], 32);
    ModelConfig {
        content: enc.clone(),
        degradation: enc,
        routing_dim: 32,
        temperature: 1.0,
        arch: ArchConfig {
            widths: vec![8, 16, 16, 32],
            blocks: vec![1, 1, 1, 1],
            experts: 3,
            ffn_expansion: 2,
        },
        glgf: GlgfConfig::default(),
    }
}

fn train_cfg(stage1_steps: usize, stage2_steps: usize) -> TrainConfig {
    let mut t = TrainConfig {
        patch_size: 32,
        patches_per_epoch: 1200,
        ..TrainConfig::default()
    };
    t.stage1.lr = 1e-3;
    t.stage2.lr = 1e-3;
    t.stage1.batch_size = 6;
    t.stage2.batch_size = 6;
    // one epoch of 200 steps; `until` cuts shorter runs
    t.stage1.epochs = stage1_steps.div_ceil(200);
    t.stage2.epochs = stage2_steps.div_ceil(200);
    t
}

fn dataset(families: &[Family]) -> Dataset {
    let cfg = SynthConfig {
        image_size: IMAGE,
        patch_size: 32,
        families: families.to_vec(),
        train_per_family: 100,
        test_per_family: 20,
        seed: 0,
        ranges: ParamRanges {
            noise_sigmas: vec![25.0],
            ..ParamRanges::default()
        },
    };
    generate_dataset(&cfg, &[]).unwrap()
}

fn images(samples: &[ImageSample], degraded: bool) -> Tensor {
    let imgs: Vec<&Tensor> = samples.iter().map(|s| if degraded { &s.degraded } else { &s.clean }).collect();
    stack(&imgs).unwrap()
}

fn labels(samples: &[ImageSample]) -> Vec<usize> {
    samples.iter().map(|s| family_index(s.label)).collect()
}

fn stage1(families: &[Family], steps: u64) -> (Model, TrainState, Dataset) {
    let cfg = train_cfg(steps as usize, 0);
    let (model, store) = Model::build(&model_cfg(), 1).unwrap();
    let mut state = TrainState::new(&model.cfg, store, &cfg);
    let ds = dataset(families);
    run_stage(&model, &mut state, &cfg, &ds.train, Some(steps), |_, _| Ok(())).unwrap();
    (model, state, ds)
}

/// One three-family stage-one run shared by the tests below.
fn trained() -> &'static (Model, TrainState, Dataset) {
    static RUN: OnceLock<(Model, TrainState, Dataset)> = OnceLock::new();
    RUN.get_or_init(|| stage1(&[Family::Noise, Family::Rain, Family::LowLight], 400))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    unit(a).iter().zip(unit(b)).map(|(x, y)| x * y).sum()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

/// Degradation tokens `[N, d]` for each image.
fn deg_tokens(model: &Model, state: &TrainState, x: &Tensor) -> Vec<Vec<f64>> {
    let mut s = Session::inference(&state.store);
    let v = s.input(x.clone());
    let t = model.deg.forward(&mut s, v).unwrap();
    rows(s.tape.value(t))
}

/// Crop tokens in row-major crop order for one `[H, W, 3]` image.
fn crop_tokens(model: &Model, state: &TrainState, img: &Tensor) -> Vec<Vec<f64>> {
    let glgf = model.glgf.as_ref().unwrap();
    let mut s = Session::inference(&state.store);
    let x = s.input(stack(&[img]).unwrap());
    let (coarse, _) = glgf.build_dsp(&mut s, &model.deg, x, 5, 5).unwrap();
    rows(s.tape.value(coarse))
}

fn mean_pairwise_cos(a: &[Vec<f64>], b: &[Vec<f64>], same: bool) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if same && i == j {
                continue;
            }
            sum += cos(x, y);
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn contrastive_training_separates_two_families() {
    let (model, store) = Model::build(&model_cfg(), 1).unwrap();
    let ds = dataset(&[Family::Noise, Family::Rain]);
    let x = images(&ds.test, true);
    let before = embedding_gap(&model.embed(&store, &x).unwrap(), &labels(&ds.test)).unwrap();
    let (model, state, _) = stage1(&[Family::Noise, Family::Rain], 200);
    let after = embedding_gap(&model.embed(&state.store, &x).unwrap(), &labels(&ds.test)).unwrap();
    assert!(after > before, "held-out gap {before} -> {after}");
}

#[test]
fn degradation_tokens_cluster_by_family() {
    let (model, state, ds) = trained();
    let toks = deg_tokens(model, state, &images(&ds.test, true));
    let lab = labels(&ds.test);
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..toks.len() {
        for j in i + 1..toks.len() {
            let c = cos(&toks[i], &toks[j]);
            let acc = if lab[i] == lab[j] { &mut intra } else { &mut inter };
            acc.0 += c;
            acc.1 += 1;
        }
    }
    let (intra, inter) = (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64);
    assert!(intra > inter, "intra {intra} inter {inter}");
}

#[test]
fn uniform_noise_crops_agree_more_than_crops_of_different_families() {
    let (model, state, _) = trained();
    let clean = procedural_image(IMAGE, 77);
    let noisy = add_gaussian_noise(&clean, 25.0, 5).unwrap();
    let dark = darken(&clean, 2.0, 0.45, 0.005, 6).unwrap();
    let a = crop_tokens(model, state, &noisy);
    let b = crop_tokens(model, state, &dark);
    let within = mean_pairwise_cos(&a, &a, true);
    let across = mean_pairwise_cos(&a, &b, false);
    assert!(within >= across, "within {within} across {across}");
}

#[test]
fn rain_on_the_left_half_shows_in_the_left_crop_columns() {
    let (model, state, _) = trained();
    let clean = procedural_image(IMAGE, 78);
    let rained = add_rain_streaks(&clean, 60, 10.0, 0.1, 0.5, 9);
    let mut img = clean.clone();
    let row = IMAGE * 3;
    for y in 0..IMAGE {
        let half = y * row..y * row + row / 2;
        img.data_mut()[half.clone()].copy_from_slice(&rained.data()[half]);
    }
    let toks = crop_tokens(model, state, &img);
    let grid = 4;
    let (left, right): (Vec<_>, Vec<_>) = toks.iter().enumerate().partition(|(i, _)| i % grid < grid / 2);
    let left: Vec<&Vec<f64>> = left.into_iter().map(|(_, t)| t).collect();
    let right: Vec<&Vec<f64>> = right.into_iter().map(|(_, t)| t).collect();
    let mean = |g: &[&Vec<f64>]| -> Vec<f64> {
        let d = g[0].len();
        (0..d).map(|k| g.iter().map(|t| t[k]).sum::<f64>() / g.len() as f64).collect()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let (ml, mr) = (mean(&left), mean(&right));
    let between = dist(&ml, &mr);
    let spread = |g: &[&Vec<f64>], m: &[f64]| g.iter().map(|t| dist(t, m)).sum::<f64>() / g.len() as f64;
    let within = 0.5 * (spread(&left, &ml) + spread(&right, &mr));
    assert!(between > within, "between {between} within {within}");
}

fn held_out_l1(model: &Model, state: &TrainState, test: &[ImageSample]) -> f64 {
    let r = model.infer(&state.store, &state.bank, &images(test, true)).unwrap();
    let clean = images(test, false);
    r.restored.data().iter().zip(clean.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / clean.numel() as f64
}

#[test]
fn stage_two_on_noise_lowers_held_out_l1() {
    let (model, state, ds) = trained();
    let noise_train: Vec<ImageSample> = ds.train.iter().filter(|s| s.label == Family::Noise).cloned().collect();
    let noise_test: Vec<ImageSample> = ds.test.iter().filter(|s| s.label == Family::Noise).cloned().collect();
    let before = held_out_l1(model, state, &noise_test);
    let cfg = train_cfg(400, 500);
    let mut s2 = state.clone().begin_stage2(&cfg);
    run_stage(model, &mut s2, &cfg, &noise_train, Some(500), |_, st| {
        assert_eq!(st.stage, Stage::Two);
        Ok(())
    })
    .unwrap();
    let after = held_out_l1(model, &s2, &noise_test);
    assert!(after < before, "held-out L1 {before} -> {after}");
}
