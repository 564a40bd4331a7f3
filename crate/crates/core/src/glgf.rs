//! Global–local prior: content patch tokens modulated by the content summary
//! token, fused by cross-attention with a grid of crop-wise degradation
//! tokens, then injected into backbone features.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{ArchConfig, Injector};
use crate::encoders::{ContentEncoder, ContentTokens, DegradationEncoder};
use crate::error::{invalid, mismatch, Result};
use crate::nn::{Linear, Norm, ParamStore, Session};
use crate::tensor::{bilinear_matrix, InitScheme, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlgfConfig {
    pub enabled: bool,
    /// Sites whose output receives the prior.
    pub inject_sites: Vec<usize>,
    /// Crops per side for the coarse degradation map.
    pub grid: usize,
    /// Layer-norm epsilon after modulation.
    pub film_eps: f64,
}

impl Default for GlgfConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            inject_sites: vec![4, 5, 6, 7],
            grid: 4,
            film_eps: 1e-10,
        }
    }
}

/// Per-site cross-attention from the prior grid into a feature map.
#[derive(Clone, Debug)]
struct SiteInjector {
    site: usize,
    align: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct Glgf {
    pub cfg: GlgfConfig,
    film1: Linear,
    film2: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    norm: Norm,
    ffn1: Linear,
    ffn2: Linear,
    injectors: Vec<SiteInjector>,
    content_dim: usize,
}

/// Prior map `[N, Hp * Wp, d_c]` on an `Hp x Wp` grid.
#[derive(Clone, Copy, Debug)]
pub struct Prior {
    pub map: Var,
    pub hp: usize,
    pub wp: usize,
}

impl Glgf {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GlgfConfig, content_dim: usize, deg_dim: usize, arch: &ArchConfig) -> Result<Self> {
        if cfg.grid == 0 {
            return Err(invalid("glgf", "grid must be positive"));
        }
        if let Some(&bad) = cfg.inject_sites.iter().find(|&&s| s >= arch.sites()) {
            return Err(invalid("glgf", format!("injection site {bad} out of range")));
        }
        let d = content_dim;
        let film1 = Linear::new(store, &format!("{name}.film1"), d, d, true);
        let film2 = Linear::with_init(store, &format!("{name}.film2"), d, 2 * d, true, InitScheme::Normal { std: 0.01 });
        // start near the identity modulation: gamma = 1, beta = 0
        if let Some(b) = film2.b {
            store.get_mut(b).data_mut()[..d].iter_mut().for_each(|v| *v = 1.0);
        }
        let injectors = cfg
            .inject_sites
            .iter()
            .map(|&site| {
                let c = arch.widths[arch.site_level(site)];
                let p = format!("{name}.inject{site}");
                SiteInjector {
                    site,
                    align: Linear::new(store, &format!("{p}.align"), d, c, true),
                    q: Linear::new(store, &format!("{p}.q"), c, c, false),
                    k: Linear::new(store, &format!("{p}.k"), c, c, false),
                    v: Linear::new(store, &format!("{p}.v"), c, c, false),
                    out: Linear::with_init(store, &format!("{p}.out"), c, c, true, InitScheme::Zeros),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            film1,
            film2,
            q: Linear::new(store, &format!("{name}.q"), d, d, false),
            k: Linear::new(store, &format!("{name}.k"), deg_dim, d, false),
            v: Linear::new(store, &format!("{name}.v"), deg_dim, d, false),
            norm: Norm::new(store, &format!("{name}.norm"), d),
            ffn1: Linear::new(store, &format!("{name}.ffn1"), d, 2 * d, true),
            ffn2: Linear::new(store, &format!("{name}.ffn2"), 2 * d, d, true),
            injectors,
            content_dim,
        })
    }

    /// `(gamma, beta)`, each `[N, d_c]`, from the content summary token.
    pub fn film_params(&self, s: &mut Session, cls: Var) -> Result<(Var, Var)> {
        let h = self.film1.forward(s, cls)?;
        let h = s.tape.gelu(h);
        let gb = self.film2.forward(s, h)?;
        let d = self.content_dim;
        Ok((s.tape.slice(gb, 1, 0, d)?, s.tape.slice(gb, 1, d, d)?))
    }

    /// `LN(gamma * T + beta)` per patch, returned flattened `[N, Hp * Wp, d_c]`.
    pub fn modulate(&self, s: &mut Session, patches: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sh = s.tape.shape(patches).to_vec();
        if sh.len() != 4 || sh[3] != self.content_dim {
            return Err(mismatch("film_modulate", &sh, &[self.content_dim]));
        }
        let (n, d) = (sh[0], sh[3]);
        let flat = s.tape.reshape(patches, &[n, sh[1] * sh[2], d])?;
        let g = s.tape.reshape(gamma, &[n, 1, d])?;
        let b = s.tape.reshape(beta, &[n, 1, d])?;
        let y = s.tape.mul(flat, g)?;
        let y = s.tape.add(y, b)?;
        Ok(s.tape.layer_norm(y, self.cfg.film_eps))
    }

    pub fn film_modulate(&self, s: &mut Session, tokens: ContentTokens) -> Result<Var> {
        let (g, b) = self.film_params(s, tokens.cls)?;
        self.modulate(s, tokens.patches, g, b)
    }

    /// Coarse map `[N, grid², d_g]` of crop tokens in row-major crop order,
    /// and its bilinear resampling `[N, hp * wp, d_g]` onto the patch grid.
    pub fn build_dsp(&self, s: &mut Session, deg: &DegradationEncoder, x: Var, hp: usize, wp: usize) -> Result<(Var, Var)> {
        let sh = s.tape.shape(x).to_vec();
        let g = self.cfg.grid;
        if sh.len() != 4 || sh[1] % g != 0 || sh[2] % g != 0 {
            return Err(invalid("build_dsp", format!("image {:?} is not divisible into a {g}x{g} grid", sh)));
        }
        let (n, ch, cw) = (sh[0], sh[1] / g, sh[2] / g);
        let mut crops = Vec::with_capacity(g * g);
        for r in 0..g {
            let band = s.tape.slice(x, 1, r * ch, ch)?;
            for c in 0..g {
                crops.push(s.tape.slice(band, 2, c * cw, cw)?);
            }
        }
        let all = s.tape.concat(&crops, 0)?;
        let tokens = deg.forward(s, all)?;
        let tokens = s.tape.reshape(tokens, &[g * g, n, deg.dim])?;
        let coarse = s.tape.permute(tokens, &[1, 0, 2])?;
        let map = Tensor::new(&[hp * wp, g * g], bilinear_matrix(g, g, hp, wp))?;
        let dsp = s.tape.row_map(coarse, &map)?;
        Ok((coarse, dsp))
    }

    /// `F = csp + Attn(csp, dsp, dsp)` followed by `F + FFN(LN(F))`.
    pub fn fuse(&self, s: &mut Session, csp: Var, dsp: Var) -> Result<Var> {
        let (cs, ds) = (s.tape.shape(csp).to_vec(), s.tape.shape(dsp).to_vec());
        if cs.len() != 3 || ds.len() != 3 || cs[..2] != ds[..2] {
            return Err(mismatch("cgdf_fuse", &cs, &ds));
        }
        let q = self.q.forward(s, csp)?;
        let k = self.k.forward(s, dsp)?;
        let v = self.v.forward(s, dsp)?;
        let a = s.tape.attention(q, k, v)?;
        let f = s.tape.add(csp, a)?;
        let h = self.norm.forward(s, f)?;
        let h = self.ffn1.forward(s, h)?;
        let h = s.tape.gelu(h);
        let h = self.ffn2.forward(s, h)?;
        s.tape.add(f, h)
    }

    /// Full prior for a batch of images.
    pub fn prior(&self, s: &mut Session, content: &ContentEncoder, deg: &DegradationEncoder, x: Var) -> Result<Prior> {
        let tokens = content.forward(s, x)?;
        let sh = s.tape.shape(tokens.patches).to_vec();
        let (hp, wp) = (sh[1], sh[2]);
        let csp = self.film_modulate(s, tokens)?;
        let (_, dsp) = self.build_dsp(s, deg, x, hp, wp)?;
        Ok(Prior {
            map: self.fuse(s, csp, dsp)?,
            hp,
            wp,
        })
    }

    /// Injects `prior` into the feature map produced at `site`, if that site is configured.
    pub fn inject(&self, s: &mut Session, site: usize, f: Var, prior: &Prior) -> Result<Var> {
        let Some(inj) = self.injectors.iter().find(|i| i.site == site) else {
            return Ok(f);
        };
        let sh = s.tape.shape(f).to_vec();
        let (n, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        let a = inj.align.forward(s, prior.map)?;
        let q = inj.q.forward(s, a)?;
        let flat = s.tape.reshape(f, &[n, h * w, c])?;
        let k = inj.k.forward(s, flat)?;
        let v = inj.v.forward(s, flat)?;
        let upd = s.tape.attention(q, k, v)?;
        let map = Tensor::new(&[h * w, prior.hp * prior.wp], bilinear_matrix(prior.hp, prior.wp, h, w))?;
        let upd = s.tape.row_map(upd, &map)?;
        let upd = inj.out.forward(s, upd)?;
        let upd = s.tape.reshape(upd, &[n, h, w, c])?;
        s.tape.add(f, upd)
    }
}

/// Binds a computed prior to the backbone's injection hook.
pub struct PriorInjection<'a> {
    pub glgf: &'a Glgf,
    pub prior: Prior,
}

impl Injector for PriorInjection<'_> {
    fn inject(&self, s: &mut Session, site: usize, features: Var) -> Result<Var> {
        self.glgf.inject(s, site, features, &self.prior)
    }
}
