//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `cargo test --release --test acceptance` runs all ten; trailing numbers
//! (`-- 1 4 10`) select a subset. Desk runs are written under the cargo target
//! temp directory and shared between criteria.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;
use sphroute::artifacts::MetricReport;
use sphroute::run::purity_of;
use sphroute::{Run, RunConfig};
use sphroute_core::backbone::{enumerate_routes, ArchConfig, Backbone};
use sphroute_core::contrastive::embedding_gap;
use sphroute_core::gradsuite::{loss_suite, op_suite};
use sphroute_core::metrics::{embedding_bias_report, psnr, ssim};
use sphroute_core::model::Model;
use sphroute_core::nn::{ParamStore, Session};
use sphroute_core::rng::rng_from_seed;
use sphroute_core::router::{center_uniformity_stat, gate_probabilities, hard_route, path_count, update_centers_uniform, CenterBank, CenterUpdateConfig};
use sphroute_core::synth::{stack, Family};
use sphroute_core::tensor::{Tape, Tensor};
use sphroute_core::trainer::{family_index, run_stage, Stage, TrainState};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

struct DeskRun {
    run: Run,
    stage1_time: Duration,
}

/// Synthesises and trains a desk configuration from scratch in `name`.
fn desk_run(name: &str, cfg: RunConfig, stage2: bool) -> DeskRun {
    let dir = root().join(name);
    let _ = fs::remove_dir_all(&dir);
    let run = Run::create(&dir, cfg).unwrap();
    run.synth(false).unwrap();
    let t = Instant::now();
    run.train(Stage::One, None, None, None).unwrap();
    let stage1_time = t.elapsed();
    if stage2 {
        run.train(Stage::Two, None, None, None).unwrap();
    }
    DeskRun { run, stage1_time }
}

fn main_run() -> &'static DeskRun {
    static R: OnceLock<DeskRun> = OnceLock::new();
    R.get_or_init(|| desk_run("main", RunConfig::desk(), true))
}

fn alpha0_run() -> &'static DeskRun {
    static R: OnceLock<DeskRun> = OnceLock::new();
    R.get_or_init(|| {
        let mut cfg = RunConfig::desk();
        cfg.train.stage1.loss.alpha = 0.0;
        desk_run("alpha0", cfg, false)
    })
}

fn no_prior_run() -> &'static DeskRun {
    static R: OnceLock<DeskRun> = OnceLock::new();
    R.get_or_init(|| {
        let mut cfg = RunConfig::desk();
        cfg.model.glgf.enabled = false;
        desk_run("no_glgf", cfg, true)
    })
}

fn stage1_final(r: &DeskRun) -> PathBuf {
    r.run.latest_checkpoint(Stage::One).unwrap()
}

fn report(r: &DeskRun) -> &'static MetricReport {
    // one report per run, computed once
    static MAIN: OnceLock<MetricReport> = OnceLock::new();
    static NO_PRIOR: OnceLock<MetricReport> = OnceLock::new();
    let cell = if r.run.cfg.model.glgf.enabled { &MAIN } else { &NO_PRIOR };
    cell.get_or_init(|| r.run.eval(r.run.final_checkpoint().as_deref(), false).unwrap())
}

/// Held-out embedding gap of the routing rows under `ckpt`, or at initialisation.
fn held_out_gap(run: &Run, ckpt: Option<&Path>) -> f64 {
    let ds = run.dataset().unwrap();
    let (model, state) = run.load(ckpt).unwrap();
    let x = stack(&ds.test.iter().map(|s| &s.degraded).collect::<Vec<_>>()).unwrap();
    let labels: Vec<usize> = ds.test.iter().map(|s| family_index(s.label)).collect();
    embedding_gap(&model.embed(&state.store, &x).unwrap(), &labels).unwrap()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let seeds = 0..20;
    let mut cases = op_suite(seeds.clone()).map_err(|e| e.to_string())?;
    cases.extend(loss_suite(seeds).map_err(|e| e.to_string())?);
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<String> = cases.iter().filter(|c| !c.passed()).map(|c| format!("{}@{}={:.2e}", c.name, c.seed, c.max_rel_error)).collect();
    let skipped = cases.iter().filter(|c| c.skipped).count();
    let worst_op = cases.iter().filter(|c| c.tolerance == 1e-4).map(|c| c.max_rel_error).fold(0.0, f64::max);
    let worst_e2e = cases.iter().filter(|c| c.tolerance == 1e-3).map(|c| c.max_rel_error).fold(0.0, f64::max);
    check(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} cases over 20 seeds ({skipped} skipped at kinks), worst op {worst_op:.2e} <= 1e-4, worst end-to-end {worst_e2e:.2e} <= 1e-3, {secs:.1}s{}",
            cases.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    )
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut cfg = RunConfig::toy();
    cfg.train.patches_per_epoch = 1200;
    cfg.train.stage1.epochs = 1;
    let steps = cfg.train.total_steps(Stage::One);
    let ds = sphroute_core::synth::generate_dataset(&cfg.synth, &[]).map_err(|e| e.to_string())?;
    let (model, store) = Model::build(&cfg.model, 0).map_err(|e| e.to_string())?;
    let mut state = TrainState::new(&model.cfg, store, &cfg.train);
    let probe = stack(&ds.test.iter().map(|s| &s.degraded).collect::<Vec<_>>()).unwrap();
    let (mut worst_norm, mut worst_sum, mut checked) = (0.0f64, 0.0f64, 0u64);
    run_stage(&model, &mut state, &cfg.train, &ds.train, None, |_, st| {
        let d = st.bank.dim();
        for j in 0..st.bank.experts() {
            worst_norm = worst_norm.max((norm(st.bank.center(j)) - 1.0).abs());
        }
        let mut s = Session::inference(&st.store);
        let x = s.input(probe.clone());
        let f = model.routing(&mut s, x)?;
        let p = model.gates(&mut s, f, &st.bank)?;
        for row in s.tape.value(f).data().chunks(d) {
            worst_norm = worst_norm.max((norm(row) - 1.0).abs());
        }
        for row in s.tape.value(p).data().chunks(st.bank.experts()) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        checked += 1;
        Ok(())
    })
    .map_err(|e| e.to_string())?;

    let mut rng = rng_from_seed(2);
    let mut same = 0;
    for case in 0..1000u64 {
        let (k, c, d) = (rng.random_range(1..9), rng.random_range(2..5), rng.random_range(2..17));
        let raw: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale: Vec<f64> = (0..k).map(|_| 10f64.powf(rng.random_range(-3.0..3.0))).collect();
        let scaled: Vec<f64> = raw.iter().enumerate().map(|(i, v)| v * scale[i / d]).collect();
        let bank = CenterBank::random(c, d, case);
        let route = |rows: Vec<f64>| {
            let mut t = Tape::new();
            let f = t.constant(Tensor::new(&[1, k, d], rows).unwrap());
            let f = t.l2_normalize(f);
            let cv = t.constant(bank.tensor().clone());
            let p = gate_probabilities(&mut t, f, cv, 1.0).unwrap();
            hard_route(t.value(p))
        };
        same += usize::from(route(raw) == route(scaled));
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        checked == steps && steps >= 200 && worst_norm <= 1e-9 && worst_sum <= 1e-9 && same == 1000 && secs < 60.0,
        format!("{checked} steps: max |norm-1| {worst_norm:.1e}, max |sum p - 1| {worst_sum:.1e}; rescaled rows kept the hard route in {same}/1000 cases; {secs:.1}s"),
    )
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let count = path_count(8, 3);
    let arch = |levels: usize, experts: usize| ArchConfig {
        widths: [4, 6, 8, 8][..levels].to_vec(),
        blocks: vec![1; levels],
        experts,
        ffn_expansion: 2,
    };
    let x = sphroute_core::tensor::seeded_init(&[1, 8, 8, 3], sphroute_core::tensor::InitScheme::Normal { std: 0.3 }, 3);
    let mut store = ParamStore::new(8);
    let bb = Backbone::new(&mut store, "bb", &arch(1, 2)).map_err(|e| e.to_string())?;
    let routes = enumerate_routes(bb.num_sites(), bb.experts());
    let outs: Vec<Tensor> = routes
        .iter()
        .map(|r| {
            let mut s = Session::inference(&store);
            let xv = s.input(x.clone());
            let o = bb.forward_hard(&mut s, xv, r, None).unwrap();
            s.tape.value(o).clone()
        })
        .collect();
    let mut distinct = 0;
    for i in 0..outs.len() {
        if (0..i).all(|j| outs[i].max_abs_diff(&outs[j]) > 1e-9) {
            distinct += 1;
        }
    }
    let x16 = sphroute_core::tensor::seeded_init(&[1, 16, 16, 3], sphroute_core::tensor::InitScheme::Normal { std: 0.3 }, 4);
    let flops: Vec<u64> = [2, 3, 4, 8]
        .iter()
        .map(|&c| {
            let mut store = ParamStore::new(1);
            let bb = Backbone::new(&mut store, "bb", &arch(4, c)).unwrap();
            let mut s = Session::inference(&store);
            let xv = s.input(x16.clone());
            bb.forward_hard(&mut s, xv, &[1; 8], None).unwrap();
            s.tape.flops()
        })
        .collect();
    let secs = t.elapsed().as_secs_f64();
    check(
        count == 6561 && bb.num_sites() == 2 && distinct == 4 && flops.iter().all(|&f| f == flops[0] && f > 0) && secs < 60.0,
        format!("path_count(8,3) = {count}; K=2 C=2 toy gives {distinct} distinct outputs of {}; hard-routed flops for C=2,3,4,8: {flops:?}; {secs:.1}s", routes.len()),
    )
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let mut bank = CenterBank::random(3, 64, 0);
    let cfg = CenterUpdateConfig {
        mu: 1.0,
        ..CenterUpdateConfig::default()
    };
    let empty = Tensor::zeros(&[0, 64]);
    let mut last = center_uniformity_stat(&bank).1;
    let mut worst_rise = f64::NEG_INFINITY;
    let mut steps = 0;
    while center_uniformity_stat(&bank).0 < 119.0 && steps < 20_000 {
        update_centers_uniform(&mut bank, &empty, &cfg, steps).map_err(|e| e.to_string())?;
        let cos = center_uniformity_stat(&bank).1;
        worst_rise = worst_rise.max(cos - last);
        last = cos;
        steps += 1;
    }
    let (angle, mean_cos) = center_uniformity_stat(&bank);
    let secs = t.elapsed().as_secs_f64();
    check(
        angle >= 110.0 && worst_rise <= 1e-8 && secs < 30.0,
        format!("min angle {angle:.3} deg after {steps} steps (mean cosine {mean_cos:.4}); largest per-step rise of mean cosine {worst_rise:.1e}; {secs:.1}s"),
    )
}

fn criterion_5() -> Outcome {
    let main = main_run();
    let control = alpha0_run();
    let init = held_out_gap(&main.run, None);
    let init_control = held_out_gap(&control.run, None);
    let gain = held_out_gap(&main.run, Some(&stage1_final(main))) - init;
    let gain_control = held_out_gap(&control.run, Some(&stage1_final(control))) - init_control;
    let secs = main.stage1_time.as_secs_f64();
    check(
        gain >= 0.2 && gain_control < gain && secs < 900.0,
        format!(
            "held-out embedding gap gain {gain:+.4} (from {init:.4}), alpha=0 control {gain_control:+.4}; stage 1 {} steps in {secs:.0}s",
            main.run.cfg.train.total_steps(Stage::One)
        ),
    )
}

fn criterion_6() -> Outcome {
    let main = main_run();
    let (traces, purity) = main.run.routes(main.run.final_checkpoint().as_deref()).map_err(|e| e.to_string())?;
    let again = purity_of(&traces).map_err(|e| e.to_string())?;
    let shares: Vec<String> = purity.labels.iter().map(|l| format!("{} {:.2}", l.label.name(), l.share)).collect();
    let families = purity.labels.len();
    check(
        families == 3 && purity.labels.iter().all(|l| l.share >= 0.9) && purity.distinct_modal_paths >= 2 && again == purity,
        format!("per-family purity [{}], {} distinct modal paths over {families} families", shares.join(", "), purity.distinct_modal_paths),
    )
}

fn criterion_7() -> Outcome {
    let with = report(main_run());
    let without = report(no_prior_run());
    let noise = with.family(Family::Noise).ok_or("no noise samples")?;
    let gain = noise.psnr - noise.input_psnr;
    check(
        gain >= 1.0 && without.psnr <= with.psnr,
        format!(
            "noise sigma=25: {:.2} dB -> {:.2} dB ({gain:+.2}); average PSNR with prior {:.3} dB, without {:.3} dB (margin {:+.3})",
            noise.input_psnr,
            noise.psnr,
            with.psnr,
            without.psnr,
            with.psnr - without.psnr
        ),
    )
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let line = Tensor::new(&[3, 2], vec![1.0, 0.0, 2.0, 0.0, 11.0, 0.0]).unwrap();
    let constructed = embedding_bias_report(&line, &["A", "B", "C"]).map_err(|e| e.to_string())?.linear_ratio;
    let main = main_run();
    let control = alpha0_run();
    let trained = main.run.diag(Some(&stage1_final(main))).map_err(|e| e.to_string())?;
    let baseline = control.run.diag(Some(&stage1_final(control))).map_err(|e| e.to_string())?;
    let per_site: Vec<String> = trained.angular.iter().map(|r| format!("{:.1}", r.angular_ratio)).collect();
    let secs = t.elapsed().as_secs_f64();
    check(
        constructed == 10.0 && trained.mean_angular_ratio <= baseline.mean_linear_ratio && secs < 60.0,
        format!(
            "constructed linear ratio {constructed}; trained angular ratio {:.2} (per site [{}]) vs alpha=0 linear baseline {:.2}; {secs:.1}s",
            trained.mean_angular_ratio,
            per_site.join(", "),
            baseline.mean_linear_ratio
        ),
    )
}

fn criterion_9() -> Outcome {
    let main = main_run();
    let repeat = desk_run("repeat", RunConfig::desk(), true);
    let bytes = |r: &Run, s: Stage| fs::read(r.latest_checkpoint(s).unwrap()).unwrap();
    let identical = bytes(&main.run, Stage::Two) == bytes(&repeat.run, Stage::Two) && bytes(&main.run, Stage::One) == bytes(&repeat.run, Stage::One);

    let dir = root().join("resume");
    let _ = fs::remove_dir_all(&dir);
    let resumed = Run::create(&dir, main.run.cfg.clone()).map_err(|e| e.to_string())?;
    resumed.synth(false).map_err(|e| e.to_string())?;
    let mid = resumed.checkpoint_path(Stage::One, 1);
    fs::create_dir_all(mid.parent().unwrap()).unwrap();
    fs::copy(main.run.checkpoint_path(Stage::One, 1), &mid).unwrap();
    let from = resumed.load(Some(&mid)).map_err(|e| e.to_string())?.1.step;
    resumed.train(Stage::One, Some(&mid), Some(from + 50), None).map_err(|e| e.to_string())?;
    let reference = main.run.losses().map_err(|e| e.to_string())?;
    let rows = resumed.losses().map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for r in &rows {
        let u = reference.iter().find(|u| u.stage == r.stage && u.step == r.step).ok_or("step missing from uninterrupted log")?;
        worst = worst.max((u.total - r.total).abs()).max((u.l1 - r.l1).abs()).max((u.hc - r.hc).abs());
    }
    check(
        identical && rows.len() == 50 && worst <= 1e-12,
        format!(
            "repeat run checkpoints {}; resume at stage-1 step {from}: {} steps, max loss difference {worst:.1e}",
            if identical { "bit-identical" } else { "DIFFER" },
            rows.len()
        ),
    )
}

/// Straight-from-the-definition oracles: per-window loops, no separable filtering.
fn psnr_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        100.0
    } else {
        (-10.0 * mse.log10()).min(100.0)
    }
}

fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let k = 11;
    let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let at = |t: &Tensor, y: usize, x: usize| t.data()[(y * w + x) * c + ch];
        let mut acc = 0.0;
        let mut windows = 0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i] * g[j] / (gs * gs);
                        let (p, q) = (at(a, y0 + i, x0 + j), at(b, y0 + i, x0 + j));
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
        total += acc / windows as f64;
    }
    total / c as f64
}

fn criterion_10() -> Outcome {
    let mut rng = rng_from_seed(10);
    let (mut worst_p, mut worst_s) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(11..24), rng.random_range(11..24));
        let n = h * w * 3;
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let amp = rng.random_range(0.0..0.5);
        let b: Vec<f64> = a.iter().map(|v| (v + amp * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0)).collect();
        let (a, b) = (Tensor::new(&[h, w, 3], a).unwrap(), Tensor::new(&[h, w, 3], b).unwrap());
        worst_p = worst_p.max((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs());
        worst_s = worst_s.max((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
    }
    check(worst_p <= 1e-10 && worst_s <= 1e-6, format!("100 random pairs: max |psnr - oracle| {worst_p:.1e} <= 1e-10, max |ssim - oracle| {worst_s:.1e} <= 1e-6"))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient suite", criterion_1),
        (2, "spherical invariants", criterion_2),
        (3, "path combinatorics", criterion_3),
        (4, "center uniformity", criterion_4),
        (5, "contrastive efficacy", criterion_5),
        (6, "routing specialization", criterion_6),
        (7, "restoration gain", criterion_7),
        (8, "bias diagnostic", criterion_8),
        (9, "determinism and persistence", criterion_9),
        (10, "metric oracles", criterion_10),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS {name}: {d}"),
            Err(d) => {
                failures += 1;
                println!("criterion {n:>2} FAIL {name}: {d}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
