//! The assembled restoration model: encoders, router, routed backbone and prior.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{ArchConfig, Backbone, Injector, Routing};
use crate::encoders::{ContentEncoder, DegradationEncoder, EncoderConfig};
use crate::error::{invalid, Result};
use crate::glgf::{Glgf, GlgfConfig, PriorInjection};
use crate::nn::{ParamStore, Session};
use crate::router::{gate_probabilities, hard_route, CenterBank, Router};
use crate::tensor::{Tensor, Var};

/// Parameter-name prefixes of the routing path, frozen in the second stage.
pub const ROUTING_PREFIXES: [&str; 2] = ["deg_enc.", "router."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub content: EncoderConfig,
    pub degradation: EncoderConfig,
    /// Width of each routing row and expert center.
    pub routing_dim: usize,
    pub temperature: f64,
    pub arch: ArchConfig,
    pub glgf: GlgfConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            content: EncoderConfig::default(),
            degradation: EncoderConfig::default(),
            routing_dim: 64,
            temperature: 1.0,
            arch: ArchConfig::default(),
            glgf: GlgfConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn sites(&self) -> usize {
        self.arch.sites()
    }

    pub fn experts(&self) -> usize {
        self.arch.experts
    }

    /// Smallest side length multiple every input must satisfy.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.content.factor().max(self.arch.factor());
        if h % f != 0 || w % f != 0 {
            return Err(invalid("model", alloc::format!("{h}x{w} input is not divisible by {f}")));
        }
        if self.glgf.enabled {
            let g = self.glgf.grid;
            let min = self.degradation.factor();
            if h % g != 0 || w % g != 0 || h / g < min || w / g < min {
                return Err(invalid(
                    "model",
                    alloc::format!("{h}x{w} input does not split into {g}x{g} crops of at least {min} pixels"),
                ));
            }
        }
        Ok(())
    }
}

/// Forward products of one soft-routed pass.
#[derive(Clone, Copy, Debug)]
pub struct SoftOutput {
    /// Unit routing rows `[N, K, d]`.
    pub f: Var,
    /// Gates `[N, K, C]`.
    pub p: Var,
    pub restored: Var,
}

/// Inference result for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Restoration {
    /// Clamped to `[0, 1]`.
    pub restored: Tensor,
    /// `N * K` expert indices.
    pub routes: Vec<usize>,
    /// `[N, K, C]`.
    pub gates: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub content: ContentEncoder,
    pub deg: DegradationEncoder,
    pub router: Router,
    pub backbone: Backbone,
    pub glgf: Option<Glgf>,
}

impl Model {
    /// Builds the model and its freshly initialised parameters.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        if cfg.routing_dim == 0 || !(cfg.temperature > 0.0) {
            return Err(invalid("model", "routing_dim and temperature must be positive"));
        }
        let mut store = ParamStore::new(seed);
        let content = ContentEncoder::new(&mut store, "content", &cfg.content);
        let deg = DegradationEncoder::new(&mut store, "deg_enc", &cfg.degradation);
        let router = Router::new(&mut store, "router", cfg.degradation.dim, cfg.sites(), cfg.routing_dim);
        let backbone = Backbone::new(&mut store, "bb", &cfg.arch)?;
        let glgf = if cfg.glgf.enabled {
            Some(Glgf::new(&mut store, "glgf", &cfg.glgf, cfg.content.dim, cfg.degradation.dim, &cfg.arch)?)
        } else {
            None
        };
        Ok((
            Self {
                cfg: cfg.clone(),
                content,
                deg,
                router,
                backbone,
                glgf,
            },
            store,
        ))
    }

    /// Unit routing rows `[N, K, d]` for images `x`.
    pub fn routing(&self, s: &mut Session, x: Var) -> Result<Var> {
        let token = self.deg.forward(s, x)?;
        self.router.forward(s, token)
    }

    pub fn gates(&self, s: &mut Session, f: Var, bank: &CenterBank) -> Result<Var> {
        let c = s.input(bank.tensor().clone());
        gate_probabilities(&mut s.tape, f, c, self.cfg.temperature)
    }

    /// Backbone pass with the prior injected when enabled.
    pub fn restore(&self, s: &mut Session, x: Var, routing: Routing) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        if sh.len() != 4 {
            return Err(invalid("model", alloc::format!("expected [N, H, W, 3], got {:?}", sh)));
        }
        self.cfg.check_input(sh[1], sh[2])?;
        match &self.glgf {
            Some(g) => {
                let prior = g.prior(s, &self.content, &self.deg, x)?;
                let inj = PriorInjection { glgf: g, prior };
                self.backbone.forward(s, x, routing, Some(&inj as &dyn Injector))
            }
            None => self.backbone.forward(s, x, routing, None),
        }
    }

    pub fn forward_soft(&self, s: &mut Session, x: Var, bank: &CenterBank, mask: bool) -> Result<SoftOutput> {
        let f = self.routing(s, x)?;
        let p = self.gates(s, f, bank)?;
        let restored = self.restore(s, x, Routing::Soft { p, mask })?;
        Ok(SoftOutput { f, p, restored })
    }

    /// Hard routes and gates for `x`, computed on the session's tape.
    pub fn route(&self, s: &mut Session, x: Var, bank: &CenterBank) -> Result<(Vec<usize>, Tensor)> {
        let f = self.routing(s, x)?;
        let p = self.gates(s, f, bank)?;
        let p = s.tape.value(p).clone();
        Ok((hard_route(&p), p))
    }

    /// Hard-routed restoration of `[N, H, W, 3]` images, clamped to `[0, 1]`.
    pub fn infer(&self, store: &ParamStore, bank: &CenterBank, images: &Tensor) -> Result<Restoration> {
        let mut s = Session::inference(store);
        let x = s.input(images.clone());
        let (routes, gates) = self.route(&mut s, x, bank)?;
        let out = self.restore(&mut s, x, Routing::Hard { y: &routes })?;
        let mut restored = s.tape.value(out).clone();
        restored.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Restoration { restored, routes, gates })
    }

    /// Unit routing rows `[N, K, d]` without building gradients.
    pub fn embed(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut s = Session::inference(store);
        let x = s.input(images.clone());
        let f = self.routing(&mut s, x)?;
        Ok(s.tape.value(f).clone())
    }

    /// Routing rows `[N, K, d]` before the unit projection.
    pub fn embed_raw(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut s = Session::inference(store);
        let x = s.input(images.clone());
        let token = self.deg.forward(&mut s, x)?;
        let f = self.router.raw(&mut s, token)?;
        Ok(s.tape.value(f).clone())
    }

    /// Trainable mask for the second stage: everything except the routing path.
    pub fn stage2_trainable(store: &ParamStore) -> Vec<bool> {
        store
            .ids()
            .map(|id| !ROUTING_PREFIXES.iter().any(|p| store.name(id).starts_with(p)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_init, InitScheme};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            content: EncoderConfig::new(alloc::vec![4, 6], 6),
            degradation: EncoderConfig::new(alloc::vec![4, 6], 6),
            routing_dim: 5,
            temperature: 1.0,
            arch: ArchConfig {
                widths: alloc::vec![4, 6],
                blocks: alloc::vec![1, 1],
                experts: 3,
                ffn_expansion: 2,
            },
            glgf: GlgfConfig {
                inject_sites: alloc::vec![2, 3],
                ..GlgfConfig::default()
            },
        }
    }

    fn images(n: usize, side: usize, seed: u64) -> Tensor {
        let mut t = seeded_init(&[n, side, side, 3], InitScheme::Normal { std: 0.2 }, seed);
        t.data_mut().iter_mut().for_each(|v| *v = (*v + 0.5).clamp(0.0, 1.0));
        t
    }

    #[test]
    fn disabled_prior_matches_model_built_without_it() {
        let cfg = tiny_config();
        let (with, store) = Model::build(&cfg, 3).unwrap();
        let off = ModelConfig {
            glgf: GlgfConfig {
                enabled: false,
                ..cfg.glgf.clone()
            },
            ..cfg.clone()
        };
        let (without, store_off) = Model::build(&off, 3).unwrap();
        let bank = CenterBank::random(3, 5, 1);
        let x = images(2, 16, 4);
        // zero-initialised output projections: the prior is a no-op at init
        let a = with.infer(&store, &bank, &x).unwrap();
        let b = without.infer(&store_off, &bank, &x).unwrap();
        assert_eq!(a, b);
        // shared parameters are identical regardless of the prior's presence
        for p in store_off.params() {
            assert_eq!(store.get(store.find(&p.name).unwrap()), &p.value);
        }
    }

    #[test]
    fn prior_gradient_reaches_modulation_mlp() {
        let cfg = tiny_config();
        let (model, mut store) = Model::build(&cfg, 5).unwrap();
        for id in store.ids_with_prefix(&["glgf.inject"]).collect::<Vec<_>>() {
            if store.name(id).contains(".out.w") {
                *store.get_mut(id) = seeded_init(store.get(id).shape(), InitScheme::Normal { std: 0.1 }, 1);
            }
        }
        let bank = CenterBank::random(3, 5, 2);
        let mut s = Session::new(&store);
        let x = s.input(images(2, 16, 1));
        let out = model.forward_soft(&mut s, x, &bank, true).unwrap();
        let loss = s.tape.mean(out.restored);
        let g = s.backward(loss).unwrap();
        let film: f64 = store
            .ids_with_prefix(&["glgf.film"])
            .filter_map(|id| g.get(id))
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum();
        assert!(film > 0.0);
    }

    #[test]
    fn soft_and_hard_agree_for_confident_routes() {
        let cfg = tiny_config();
        let (model, store) = Model::build(&cfg, 7).unwrap();
        let bank = CenterBank::random(3, 5, 3);
        let x = images(2, 16, 2);
        let r = model.infer(&store, &bank, &x).unwrap();
        assert_eq!(r.routes.len(), 2 * 4);
        assert_eq!(r.routes, hard_route(&r.gates));
        assert_eq!(r.restored.shape(), x.shape());
        assert!(r.restored.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_inputs_the_prior_cannot_split() {
        let cfg = tiny_config();
        let (model, store) = Model::build(&cfg, 7).unwrap();
        let bank = CenterBank::random(3, 5, 3);
        assert!(model.infer(&store, &bank, &images(1, 12, 2)).is_err());
        assert!(model.infer(&store, &bank, &images(1, 8, 2)).is_err());
    }
}
