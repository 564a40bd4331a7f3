//! Small convolutional encoders: a content encoder giving a summary token
//! plus a patch-token grid, and a size-agnostic degradation encoder.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{Conv, Linear, Norm, ParamStore, Session};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Output width of each stride-2 stage.
    pub widths: Vec<usize>,
    /// Token width.
    pub dim: usize,
    /// Layer-norm epsilon inside the conv stack. Flat or dark crops have
    /// near-zero channel variance, so a tiny value makes the gradient explode.
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub norm_scope: NormScope,
}

/// Statistics used by the stack's layer norms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormScope {
    /// Across channels, separately at every pixel.
    #[default]
    Pixel,
    /// Across the whole feature map of each sample, so the spatial
    /// distribution of activation energy survives.
    Sample,
}

pub const ENCODER_NORM_EPS: f64 = 0.1;

fn default_norm_eps() -> f64 {
    ENCODER_NORM_EPS
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: alloc::vec![16, 32, 64, 64],
            dim: 64,
            norm_eps: ENCODER_NORM_EPS,
            norm_scope: NormScope::default(),
        }
    }
}

impl EncoderConfig {
    pub fn new(widths: Vec<usize>, dim: usize) -> Self {
        Self {
            widths,
            dim,
            norm_eps: ENCODER_NORM_EPS,
            norm_scope: NormScope::default(),
        }
    }

    /// Spatial reduction factor of the conv stack.
    pub fn factor(&self) -> usize {
        1 << self.widths.len()
    }
}

/// Stride-2 3x3 convolutions, each followed by layer norm and GELU.
#[derive(Clone, Debug)]
pub struct ConvStack {
    stages: Vec<(Conv, Norm)>,
    scope: NormScope,
}

impl ConvStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Self {
        let mut cin = 3;
        let stages = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv::new(store, &format!("{name}.s{i}.conv"), cin, w, 3, 2);
                let norm = Norm::with_eps(store, &format!("{name}.s{i}.norm"), w, cfg.norm_eps);
                cin = w;
                (conv, norm)
            })
            .collect();
        Self {
            stages,
            scope: cfg.norm_scope,
        }
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        for (conv, norm) in &self.stages {
            x = conv.forward(s, x)?;
            x = match self.scope {
                NormScope::Pixel => norm.forward(s, x)?,
                NormScope::Sample => norm.forward_sample(s, x)?,
            };
            x = s.tape.gelu(x);
        }
        Ok(x)
    }
}

fn check_input(op: &'static str, s: &Session, x: Var) -> Result<(usize, usize, usize)> {
    let sh = s.tape.shape(x);
    if sh.len() != 4 || sh[3] != 3 {
        return Err(invalid(op, format!("expected [N, H, W, 3], got {:?}", sh)));
    }
    Ok((sh[0], sh[1], sh[2]))
}

/// Content tokens: `cls: [N, dim]`, `patches: [N, Hp, Wp, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct ContentTokens {
    pub cls: Var,
    pub patches: Var,
}

#[derive(Clone, Debug)]
pub struct ContentEncoder {
    stack: ConvStack,
    proj: Linear,
    cls: Linear,
    factor: usize,
    pub dim: usize,
}

impl ContentEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Self {
        let last = *cfg.widths.last().unwrap_or(&3);
        Self {
            stack: ConvStack::new(store, &format!("{name}.stack"), cfg),
            proj: Linear::new(store, &format!("{name}.proj"), last, cfg.dim, true),
            cls: Linear::new(store, &format!("{name}.cls"), cfg.dim, cfg.dim, true),
            factor: cfg.factor(),
            dim: cfg.dim,
        }
    }

    /// Patch grid size for an `h x w` input.
    pub fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.factor, w / self.factor)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<ContentTokens> {
        let (n, h, w) = check_input("encode_content", s, x)?;
        if h % self.factor != 0 || w % self.factor != 0 || h == 0 || w == 0 {
            return Err(invalid(
                "encode_content",
                format!("{h}x{w} input is not divisible by {}; pad the image first", self.factor),
            ));
        }
        let f = self.stack.forward(s, x)?;
        let patches = self.proj.forward(s, f)?;
        let (hp, wp) = self.grid(h, w);
        let flat = s.tape.reshape(patches, &[n, hp * wp, self.dim])?;
        let pooled = s.tape.mean_axis(flat, 1)?;
        let cls = self.cls.forward(s, pooled)?;
        Ok(ContentTokens { cls, patches })
    }
}

/// Conv stack, global average pool and a linear map to one token per image.
#[derive(Clone, Debug)]
pub struct DegradationEncoder {
    stack: ConvStack,
    head: Linear,
    min_size: usize,
    pub dim: usize,
}

impl DegradationEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Self {
        let last = *cfg.widths.last().unwrap_or(&3);
        Self {
            stack: ConvStack::new(store, &format!("{name}.stack"), cfg),
            head: Linear::new(store, &format!("{name}.head"), last, cfg.dim, true),
            min_size: cfg.factor(),
            dim: cfg.dim,
        }
    }

    pub fn min_size(&self) -> usize {
        self.min_size
    }

    /// `[N, h, w, 3]` → `[N, dim]` for any `h, w` at least [`Self::min_size`].
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (n, h, w) = check_input("encode_degradation", s, x)?;
        if h < self.min_size || w < self.min_size {
            return Err(invalid(
                "encode_degradation",
                format!("{h}x{w} input is smaller than the {0}x{0} minimum", self.min_size),
            ));
        }
        let f = self.stack.forward(s, x)?;
        let sh = s.tape.shape(f).to_vec();
        let flat = s.tape.reshape(f, &[n, sh[1] * sh[2], sh[3]])?;
        let pooled = s.tape.mean_axis(flat, 1)?;
        self.head.forward(s, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_grad_check;
    use crate::tensor::Tensor;

    fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        crate::tensor::seeded_init(&[n, h, w, 3], crate::tensor::InitScheme::Normal { std: 0.3 }, seed)
    }

    #[test]
    fn content_shapes_and_determinism() {
        let mut store = ParamStore::new(0);
        let enc = ContentEncoder::new(&mut store, "content", &EncoderConfig::default());
        let mut s = Session::inference(&store);
        let x = s.input(image(1, 64, 64, 1));
        let a = enc.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(a.patches), &[1, 4, 4, 64]);
        assert_eq!(s.tape.shape(a.cls), &[1, 64]);
        let b = enc.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.value(a.cls), s.tape.value(b.cls));
        assert_eq!(s.tape.value(a.patches), s.tape.value(b.patches));
        let bad = s.input(image(1, 40, 64, 1));
        let err = enc.forward(&mut s, bad).unwrap_err();
        assert!(format!("{err}").contains("pad"));
    }

    #[test]
    fn degradation_token_is_size_agnostic() {
        let mut store = ParamStore::new(0);
        let enc = DegradationEncoder::new(&mut store, "deg", &EncoderConfig::default());
        let mut s = Session::inference(&store);
        let full = s.input(image(2, 64, 64, 3));
        let crop = s.input(image(2, 16, 16, 3));
        let a = enc.forward(&mut s, full).unwrap();
        let b = enc.forward(&mut s, crop).unwrap();
        assert_eq!(s.tape.shape(a), &[2, 64]);
        assert_eq!(s.tape.shape(b), &[2, 64]);
        let again = enc.forward(&mut s, full).unwrap();
        assert_eq!(s.tape.value(a), s.tape.value(again));
        let tiny = s.input(image(1, 8, 16, 3));
        assert!(enc.forward(&mut s, tiny).is_err());
    }

    #[test]
    fn content_cls_separates_constant_images_after_a_step() {
        let cfg = EncoderConfig::new(alloc::vec![4, 8], 8);
        let mut store = ParamStore::new(5);
        let enc = ContentEncoder::new(&mut store, "content", &cfg);
        let batch = {
            let mut d = alloc::vec![0.0; 16 * 3];
            d.extend(core::iter::repeat(1.0).take(16 * 3));
            Tensor::new(&[2, 4, 4, 3], d).unwrap()
        };
        let mut s = Session::new(&store);
        let x = s.input(batch.clone());
        let t = enc.forward(&mut s, x).unwrap();
        let sq = s.tape.mul(t.cls, t.cls).unwrap();
        let loss = s.tape.mean(sq);
        let g = s.backward(loss).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = g.get(id).cloned() {
                for (v, d) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *v -= 0.1 * d;
                }
            }
        }
        let mut s = Session::inference(&store);
        let x = s.input(batch);
        let t = enc.forward(&mut s, x).unwrap();
        let cls = s.tape.value(t.cls);
        assert!(cls.row(0).iter().zip(cls.row(1)).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn encoders_pass_gradient_checks_to_parameters() {
        let cfg = EncoderConfig::new(alloc::vec![3, 4], 5);
        for seed in 0..3 {
            let mut store = ParamStore::new(seed);
            let content = ContentEncoder::new(&mut store, "content", &cfg);
            let deg = DegradationEncoder::new(&mut store, "deg", &cfg);
            let x = image(2, 8, 8, 100 + seed);
            for id in store.ids() {
                let n = store.get(id).numel();
                let coords: Vec<usize> = (0..n).step_by((n / 4).max(1)).collect();
                let report = param_grad_check(&store, id, 1e-6, &coords, |s| {
                    let xv = s.input(x.clone());
                    let t = content.forward(s, xv)?;
                    let d = deg.forward(s, xv)?;
                    let a = s.tape.mean(t.patches);
                    let c = s.tape.mul(t.cls, t.cls)?;
                    let c = s.tape.mean(c);
                    let d = s.tape.mul(d, d)?;
                    let d = s.tape.mean(d);
                    let l = s.tape.add(a, c)?;
                    s.tape.add(l, d)
                })
                .unwrap();
                assert!(report.max_rel_error <= 1e-3, "{}: {:?}", store.name(id), report);
            }
        }
    }
}
