//! Paired clean/degraded image synthesis for five degradation families,
//! procedural base images, and patch batching.
//!
//! Images are `[H, W, 3]` tensors with values in `[0, 1]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive, derive_indexed, rng_from_seed};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Noise,
    Rain,
    Haze,
    Blur,
    #[serde(rename = "lowlight")]
    LowLight,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Noise, Family::Rain, Family::Haze, Family::Blur, Family::LowLight];

    pub fn name(self) -> &'static str {
        match self {
            Family::Noise => "noise",
            Family::Rain => "rain",
            Family::Haze => "haze",
            Family::Blur => "blur",
            Family::LowLight => "lowlight",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlurKind {
    Gaussian { sigma: f64 },
    Motion { length: f64, angle: f64 },
}

/// Parameters a degraded image was synthesised with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum SynthParams {
    /// `sigma` in 8-bit units.
    Noise { sigma: f64 },
    Rain {
        count: usize,
        length: f64,
        angle: f64,
        intensity: f64,
    },
    Haze { transmission: f64, airlight: f64, depth_ramp: bool },
    Blur { kernel_size: usize, kind: BlurKind },
    #[serde(rename = "lowlight")]
    LowLight { gamma: f64, gain: f64, read_noise: f64 },
}

impl SynthParams {
    pub fn family(&self) -> Family {
        match self {
            SynthParams::Noise { .. } => Family::Noise,
            SynthParams::Rain { .. } => Family::Rain,
            SynthParams::Haze { .. } => Family::Haze,
            SynthParams::Blur { .. } => Family::Blur,
            SynthParams::LowLight { .. } => Family::LowLight,
        }
    }

    pub fn apply(&self, img: &Tensor, seed: u64) -> Result<Tensor> {
        match *self {
            SynthParams::Noise { sigma } => add_gaussian_noise(img, sigma, seed),
            SynthParams::Rain {
                count,
                length,
                angle,
                intensity,
            } => Ok(add_rain_streaks(img, count, length, angle, intensity, seed)),
            SynthParams::Haze {
                transmission,
                airlight,
                depth_ramp,
            } => {
                if depth_ramp {
                    apply_haze_ramp(img, transmission, airlight)
                } else {
                    apply_haze(img, transmission, airlight)
                }
            }
            SynthParams::Blur { kernel_size, kind } => {
                let k = match kind {
                    BlurKind::Gaussian { sigma } => gaussian_kernel(kernel_size, sigma)?,
                    BlurKind::Motion { length, angle } => motion_kernel(kernel_size, length, angle)?,
                };
                apply_blur(img, &k)
            }
            SynthParams::LowLight { gamma, gain, read_noise } => darken(img, gamma, gain, read_noise, seed),
        }
    }
}

/// Applies several degradations in order. Evaluation-time only.
pub fn apply_chain(img: &Tensor, chain: &[SynthParams], seed: u64) -> Result<Tensor> {
    let mut out = img.clone();
    for (i, p) in chain.iter().enumerate() {
        out = p.apply(&out, derive_indexed(seed, "chain", i as u64))?;
    }
    Ok(out)
}

fn check_image(op: &'static str, img: &Tensor) -> Result<(usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(invalid(op, format!("expected an HxWx3 image, got {:?}", s)));
    }
    Ok((s[0], s[1]))
}

fn clamp01(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    t
}

/// Zero-mean Gaussian field with standard deviation `sigma / 255`, before any clamping.
pub fn gaussian_noise_field(shape: &[usize], sigma: f64, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let s = sigma / 255.0;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * s
        })
        .collect();
    Tensor::new(shape, data).expect("field length matches shape")
}

/// `clamp(img + n)`, `n ~ N(0, (sigma/255)^2)` per channel. `sigma = 0` is the identity.
pub fn add_gaussian_noise(img: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    check_image("add_gaussian_noise", img)?;
    if !(sigma >= 0.0) {
        return Err(invalid("add_gaussian_noise", format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let field = gaussian_noise_field(img.shape(), sigma, seed);
    let mut out = img.clone();
    for (o, n) in out.data_mut().iter_mut().zip(field.data()) {
        *o += n;
    }
    Ok(clamp01(out))
}

/// Additive streak field (single channel, `h*w`) used by [`add_rain_streaks`].
pub fn rain_mask(h: usize, w: usize, count: usize, length: f64, angle: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let mut mask = vec![0.0; h * w];
    let width = 0.6;
    for _ in 0..count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let len = length * rng.random_range(0.7..1.3);
        let a = angle + rng.random_range(-0.05..0.05);
        let (dx, dy) = (libm::sin(a), libm::cos(a));
        let half = len / 2.0;
        let reach = half + 3.0 * width;
        let (x0, x1) = ((cx - reach).max(0.0) as usize, ((cx + reach) as usize + 1).min(w));
        let (y0, y1) = ((cy - reach).max(0.0) as usize, ((cy + reach) as usize + 1).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let along = (px * dx + py * dy).clamp(-half, half);
                let (ex, ey) = (px - along * dx, py - along * dy);
                let d2 = ex * ex + ey * ey;
                mask[y * w + x] += libm::exp(-d2 / (2.0 * width * width));
            }
        }
    }
    mask
}

/// Bright line segments with a Gaussian cross-section. `angle` is measured
/// from vertical in radians. `count = 0` is the identity.
pub fn add_rain_streaks(img: &Tensor, count: usize, length: f64, angle: f64, intensity: f64, seed: u64) -> Tensor {
    if count == 0 {
        return img.clone();
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mask = rain_mask(h, w, count, length, angle, seed);
    let mut out = img.clone();
    for (px, m) in out.data_mut().chunks_mut(3).zip(&mask) {
        for v in px {
            *v += intensity * m.min(1.0);
        }
    }
    clamp01(out)
}

/// Atmospheric scattering `t * img + (1 - t) * A` with constant transmission.
pub fn apply_haze(img: &Tensor, transmission: f64, airlight: f64) -> Result<Tensor> {
    check_haze(transmission, airlight)?;
    let mut out = img.clone();
    let add = (1.0 - transmission) * airlight;
    for v in out.data_mut() {
        *v = transmission * *v + add;
    }
    Ok(clamp01(out))
}

/// Haze whose transmission falls linearly from 1 at the bottom row to
/// `transmission` at the top (a crude depth ramp).
pub fn apply_haze_ramp(img: &Tensor, transmission: f64, airlight: f64) -> Result<Tensor> {
    check_haze(transmission, airlight)?;
    let (h, w) = check_image("apply_haze", img)?;
    let mut out = img.clone();
    for y in 0..h {
        let frac = if h > 1 { y as f64 / (h - 1) as f64 } else { 1.0 };
        let t = transmission + (1.0 - transmission) * frac;
        for v in &mut out.data_mut()[y * w * 3..(y + 1) * w * 3] {
            *v = t * *v + (1.0 - t) * airlight;
        }
    }
    Ok(clamp01(out))
}

fn check_haze(t: f64, a: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid("apply_haze", format!("transmission must lie in (0, 1], got {t}")));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(invalid("apply_haze", format!("airlight must lie in [0, 1], got {a}")));
    }
    Ok(())
}

/// Square blur kernel, normalised to sum 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(invalid("apply_blur", format!("kernel size must be odd, got {size}")));
        }
        if weights.len() != size * size {
            return Err(invalid("apply_blur", "kernel weights do not match size"));
        }
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) {
            return Err(invalid("apply_blur", "kernel weights must have a positive sum"));
        }
        Ok(Self {
            size,
            weights: weights.into_iter().map(|v| v / s).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<BlurKernel> {
    let r = (size / 2) as f64;
    let mut w = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - r, x as f64 - r);
            w.push(if sigma > 0.0 {
                libm::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
            } else if dx == 0.0 && dy == 0.0 {
                1.0
            } else {
                0.0
            });
        }
    }
    BlurKernel::new(size, w)
}

/// Linear motion kernel of the given length (pixels) and angle (radians).
pub fn motion_kernel(size: usize, length: f64, angle: f64) -> Result<BlurKernel> {
    let r = (size / 2) as f64;
    let (dx, dy) = (libm::cos(angle), libm::sin(angle));
    let half = length / 2.0;
    let mut w = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 - r, y as f64 - r);
            let along = (px * dx + py * dy).clamp(-half, half);
            let (ex, ey) = (px - along * dx, py - along * dy);
            w.push((1.0 - libm::sqrt(ex * ex + ey * ey)).max(0.0));
        }
    }
    BlurKernel::new(size, w)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// 2-D convolution with symmetric (mirror) padding.
pub fn apply_blur(img: &Tensor, kernel: &BlurKernel) -> Result<Tensor> {
    let (h, w) = check_image("apply_blur", img)?;
    let k = kernel.size;
    let r = (k / 2) as isize;
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * 3;
            for ky in 0..k {
                let iy = reflect(y as isize + ky as isize - r, h);
                for kx in 0..k {
                    let wt = kernel.weights[ky * k + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    let ix = reflect(x as isize + kx as isize - r, w);
                    let i = (iy * w + ix) * 3;
                    for c in 0..3 {
                        out[o + c] += wt * src[i + c];
                    }
                }
            }
        }
    }
    Ok(clamp01(Tensor::new(img.shape(), out)?))
}

/// `gain * img^gamma`, plus Gaussian read noise of standard deviation `read_noise` (in `[0,1]` units).
pub fn darken(img: &Tensor, gamma: f64, gain: f64, read_noise: f64, seed: u64) -> Result<Tensor> {
    if !(gamma >= 1.0) || !(gain > 0.0 && gain <= 1.0) || !(read_noise >= 0.0) {
        return Err(invalid(
            "darken",
            format!("need gamma >= 1, gain in (0, 1], read_noise >= 0; got {gamma}, {gain}, {read_noise}"),
        ));
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = gain * libm::pow(*v, gamma);
    }
    if read_noise > 0.0 {
        let field = gaussian_noise_field(img.shape(), read_noise * 255.0, seed);
        for (v, n) in out.data_mut().iter_mut().zip(field.data()) {
            *v += n;
        }
    }
    Ok(clamp01(out))
}

/// Smooth two-colour gradient, a few flat shapes, and a faint sinusoidal texture.
pub fn procedural_image(size: usize, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let color = |rng: &mut crate::rng::Rng| -> [f64; 3] {
        [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
    };
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let theta = rng.random_range(0.0..2.0 * PI);
    let (gx, gy) = (libm::cos(theta), libm::sin(theta));
    let n = size as f64;
    let mut data = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let u = ((x as f64 / n - 0.5) * gx + (y as f64 / n - 0.5) * gy + 0.75) / 1.5;
            let u = u.clamp(0.0, 1.0);
            for c in 0..3 {
                data[(y * size + x) * 3 + c] = c0[c] * (1.0 - u) + c1[c] * u;
            }
        }
    }
    let shapes = rng.random_range(2..5);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cx = rng.random_range(0.0..n);
        let cy = rng.random_range(0.0..n);
        let rad = rng.random_range(0.1 * n..0.3 * n);
        let circle = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if circle {
                    dx * dx + dy * dy <= rad * rad
                } else {
                    dx.abs() <= rad && dy.abs() <= 0.6 * rad
                };
                if inside {
                    data[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&col);
                }
            }
        }
    }
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.2..1.2),
                rng.random_range(0.2..1.2),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| libm::sin(fx * x as f64 + fy * y as f64 + ph))
                .sum::<f64>()
                * 0.01;
            for c in 0..3 {
                let v = &mut data[(y * size + x) * 3 + c];
                *v = (*v + t).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[size, size, 3], data).expect("image length matches shape")
}

/// Per-family parameter ranges. Ranges are inclusive `(lo, hi)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub noise_sigmas: Vec<f64>,
    pub rain_count: (usize, usize),
    pub rain_length: (f64, f64),
    pub rain_angle: (f64, f64),
    pub rain_intensity: (f64, f64),
    pub haze_transmission: (f64, f64),
    pub haze_airlight: (f64, f64),
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
    pub lowlight_gamma: (f64, f64),
    pub lowlight_gain: (f64, f64),
    pub lowlight_read_noise: f64,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            noise_sigmas: vec![15.0, 25.0, 50.0],
            rain_count: (20, 60),
            rain_length: (6.0, 14.0),
            rain_angle: (-0.3, 0.3),
            rain_intensity: (0.3, 0.6),
            haze_transmission: (0.4, 0.7),
            haze_airlight: (0.7, 0.95),
            blur_kernel: 7,
            blur_sigma: (1.0, 2.0),
            lowlight_gamma: (1.5, 2.5),
            lowlight_gain: (0.3, 0.6),
            lowlight_read_noise: 0.005,
        }
    }
}

impl ParamRanges {
    fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo <= hi;
        let valid = !self.noise_sigmas.is_empty()
            && self.rain_count.0 <= self.rain_count.1
            && ok(self.rain_length)
            && ok(self.rain_angle)
            && ok(self.rain_intensity)
            && ok(self.haze_transmission)
            && ok(self.haze_airlight)
            && ok(self.blur_sigma)
            && ok(self.lowlight_gamma)
            && ok(self.lowlight_gain)
            && self.blur_kernel % 2 == 1;
        if valid {
            Ok(())
        } else {
            Err(invalid("synth", "empty or inverted parameter range"))
        }
    }

    pub fn sample(&self, family: Family, rng: &mut crate::rng::Rng) -> SynthParams {
        fn pick(rng: &mut crate::rng::Rng, (lo, hi): (f64, f64)) -> f64 {
            if lo < hi {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        }
        match family {
            Family::Noise => {
                let i = rng.random_range(0..self.noise_sigmas.len());
                SynthParams::Noise {
                    sigma: self.noise_sigmas[i],
                }
            }
            Family::Rain => SynthParams::Rain {
                count: rng.random_range(self.rain_count.0..=self.rain_count.1),
                length: pick(rng, self.rain_length),
                angle: pick(rng, self.rain_angle),
                intensity: pick(rng, self.rain_intensity),
            },
            Family::Haze => SynthParams::Haze {
                transmission: pick(rng, self.haze_transmission),
                airlight: pick(rng, self.haze_airlight),
                depth_ramp: false,
            },
            Family::Blur => SynthParams::Blur {
                kernel_size: self.blur_kernel,
                kind: BlurKind::Gaussian {
                    sigma: pick(rng, self.blur_sigma),
                },
            },
            Family::LowLight => SynthParams::LowLight {
                gamma: pick(rng, self.lowlight_gamma),
                gain: pick(rng, self.lowlight_gain),
                read_noise: self.lowlight_read_noise,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub families: Vec<Family>,
    pub train_per_family: usize,
    pub test_per_family: usize,
    pub seed: u64,
    pub ranges: ParamRanges,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 48,
            families: Family::ALL.to_vec(),
            train_per_family: 200,
            test_per_family: 50,
            seed: 0,
            ranges: ParamRanges::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub label: Family,
    pub split: Split,
    pub params: SynthParams,
    pub clean: Tensor,
    pub degraded: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ImageSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

pub fn sample_id(split: Split, family: Family, index: usize) -> String {
    format!("{}-{}-{:04}", split.name(), family.name(), index)
}

/// Rebuilds one sample from its id alone. `bases`, when non-empty, supplies
/// clean images (cropped to `image_size`) in place of procedural ones.
pub fn generate_sample(cfg: &SynthConfig, split: Split, family: Family, index: usize, bases: &[Tensor]) -> Result<ImageSample> {
    cfg.ranges.validate()?;
    let id = sample_id(split, family, index);
    let seed = derive(cfg.seed, &id);
    let mut rng = rng_from_seed(seed);
    let clean = if bases.is_empty() {
        procedural_image(cfg.image_size, derive(seed, "clean"))
    } else {
        let base = &bases[rng.random_range(0..bases.len())];
        random_crop(base, cfg.image_size, &mut rng)?
    };
    let params = cfg.ranges.sample(family, &mut rng);
    let degraded = params.apply(&clean, derive(seed, "degrade"))?;
    Ok(ImageSample {
        id,
        label: family,
        split,
        params,
        clean,
        degraded,
    })
}

fn random_crop(img: &Tensor, size: usize, rng: &mut crate::rng::Rng) -> Result<Tensor> {
    let (h, w) = check_image("synth", img)?;
    if h < size || w < size {
        return Err(invalid("synth", format!("base image {h}x{w} smaller than {size}")));
    }
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    Ok(crop(img, y, x, size, size, false))
}

/// Generates the whole dataset. Output order is fixed: split, family, index.
pub fn generate_dataset(cfg: &SynthConfig, bases: &[Tensor]) -> Result<Dataset> {
    if cfg.families.is_empty() {
        return Err(invalid("synth", "no degradation families configured"));
    }
    if cfg.patch_size > cfg.image_size {
        return Err(invalid("synth", "patch_size exceeds image_size"));
    }
    let mut ds = Dataset::default();
    for (split, count) in [(Split::Train, cfg.train_per_family), (Split::Test, cfg.test_per_family)] {
        for &family in &cfg.families {
            for i in 0..count {
                let s = generate_sample(cfg, split, family, i, bases)?;
                match split {
                    Split::Train => ds.train.push(s),
                    Split::Test => ds.test.push(s),
                }
            }
        }
    }
    Ok(ds)
}

/// Crop (and optionally mirror horizontally) an `[H, W, 3]` image.
pub fn crop(img: &Tensor, y: usize, x: usize, h: usize, w: usize, flip: bool) -> Tensor {
    let iw = img.shape()[1];
    let src = img.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let cx = if flip { x + w - 1 - c } else { x + c };
            let i = ((y + r) * iw + cx) * 3;
            out.extend_from_slice(&src[i..i + 3]);
        }
    }
    Tensor::new(&[h, w, 3], out).expect("crop length matches shape")
}

/// A training batch of patches, stacked `[B, P, P, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub degraded: Tensor,
    pub clean: Tensor,
    pub labels: Vec<Family>,
    pub ids: Vec<String>,
}

/// Stacks `[H, W, 3]` images into `[N, H, W, 3]`.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| invalid("stack", "no images"))?;
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != first.shape() {
            return Err(crate::error::mismatch("stack", first.shape(), im.shape()));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

/// Family-stratified sampling: families are visited round-robin from a random
/// offset, so every family gets an equal share of each batch. Within a family
/// a sample, crop position and flip are drawn uniformly; the same crop/flip is
/// applied to the clean and degraded image.
pub fn sample_batch(samples: &[ImageSample], batch_size: usize, patch_size: usize, seed: u64) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Data("cannot sample from an empty split".into()));
    }
    let mut by_family: Vec<(Family, Vec<usize>)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match by_family.iter_mut().find(|(f, _)| *f == s.label) {
            Some((_, v)) => v.push(i),
            None => by_family.push((s.label, vec![i])),
        }
    }
    by_family.sort_by_key(|(f, _)| *f);
    let mut rng = rng_from_seed(seed);
    let offset = rng.random_range(0..by_family.len());
    let (mut deg, mut cln) = (Vec::with_capacity(batch_size), Vec::with_capacity(batch_size));
    let (mut labels, mut ids) = (Vec::new(), Vec::new());
    for k in 0..batch_size {
        let (fam, members) = &by_family[(offset + k) % by_family.len()];
        let s = &samples[members[rng.random_range(0..members.len())]];
        let (h, w) = check_image("sample_batch", &s.clean)?;
        if patch_size > h || patch_size > w {
            return Err(invalid("sample_batch", format!("patch {patch_size} larger than image {h}x{w}")));
        }
        let y = rng.random_range(0..=h - patch_size);
        let x = rng.random_range(0..=w - patch_size);
        let flip = rng.random_bool(0.5);
        deg.push(crop(&s.degraded, y, x, patch_size, patch_size, flip));
        cln.push(crop(&s.clean, y, x, patch_size, patch_size, flip));
        labels.push(*fam);
        ids.push(s.id.clone());
    }
    Ok(Batch {
        degraded: stack(&deg.iter().collect::<Vec<_>>())?,
        clean: stack(&cln.iter().collect::<Vec<_>>())?,
        labels,
        ids,
    })
}
