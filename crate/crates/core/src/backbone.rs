//! Encoder–decoder restoration network whose routing sites each hold several
//! parameter-independent experts.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::nn::{Conv, DwConv, Linear, Norm, ParamStore, Session};
use crate::router::argmax;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Channel width per level, finest first.
    pub widths: Vec<usize>,
    /// Blocks per expert at each level.
    pub blocks: Vec<usize>,
    pub experts: usize,
    /// Hidden width multiplier of the gated feed-forward.
    pub ffn_expansion: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            widths: vec![24, 48, 96, 192],
            blocks: vec![1, 1, 2, 2],
            experts: 3,
            ffn_expansion: 2,
        }
    }
}

impl ArchConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Routing sites: one per encoder level and one per decoder level.
    pub fn sites(&self) -> usize {
        2 * self.levels()
    }

    /// Input sides must be multiples of this.
    pub fn factor(&self) -> usize {
        1 << (self.levels().max(1) - 1)
    }

    /// Level a site runs at.
    pub fn site_level(&self, site: usize) -> usize {
        let l = self.levels();
        if site < l {
            site
        } else {
            2 * l - 1 - site
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return Err(invalid("build_backbone", "widths and blocks must be non-empty and equally long"));
        }
        if self.widths.contains(&0) || self.blocks.contains(&0) || self.ffn_expansion == 0 {
            return Err(invalid("build_backbone", "widths, blocks and ffn_expansion must be positive"));
        }
        if self.experts < 2 {
            return Err(invalid("build_backbone", format!("need at least 2 experts per site, got {}", self.experts)));
        }
        Ok(())
    }
}

/// Conv mixer with simplified channel attention, then a gated feed-forward; both residual.
#[derive(Clone, Debug)]
struct Block {
    n1: Norm,
    pw1: Linear,
    dw: DwConv,
    ca: Linear,
    pw2: Linear,
    n2: Norm,
    ffn_in: Linear,
    ffn_dw: DwConv,
    ffn_out: Linear,
    hidden: usize,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, c: usize, expansion: usize) -> Self {
        let hidden = c * expansion;
        Self {
            n1: Norm::new(store, &format!("{name}.n1"), c),
            pw1: Linear::new(store, &format!("{name}.pw1"), c, c, true),
            dw: DwConv::new(store, &format!("{name}.dw"), c),
            ca: Linear::new(store, &format!("{name}.ca"), c, c, true),
            pw2: Linear::new(store, &format!("{name}.pw2"), c, c, true),
            n2: Norm::new(store, &format!("{name}.n2"), c),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), c, 2 * hidden, true),
            ffn_dw: DwConv::new(store, &format!("{name}.ffn_dw"), 2 * hidden),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), hidden, c, true),
            hidden,
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        let (n, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        let y = self.n1.forward(s, x)?;
        let y = self.pw1.forward(s, y)?;
        let y = self.dw.forward(s, y)?;
        let y = s.tape.gelu(y);
        let flat = s.tape.reshape(y, &[n, h * w, c])?;
        let g = s.tape.mean_axis(flat, 1)?;
        let g = self.ca.forward(s, g)?;
        let g = s.tape.reshape(g, &[n, 1, 1, c])?;
        let y = s.tape.mul(y, g)?;
        let y = self.pw2.forward(s, y)?;
        let x = s.tape.add(x, y)?;

        let z = self.n2.forward(s, x)?;
        let z = self.ffn_in.forward(s, z)?;
        let z = self.ffn_dw.forward(s, z)?;
        let a = s.tape.slice(z, 3, 0, self.hidden)?;
        let b = s.tape.slice(z, 3, self.hidden, self.hidden)?;
        let a = s.tape.gelu(a);
        let z = s.tape.mul(a, b)?;
        let z = self.ffn_out.forward(s, z)?;
        s.tape.add(x, z)
    }
}

#[derive(Clone, Debug)]
struct Expert {
    blocks: Vec<Block>,
}

impl Expert {
    fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(s, x)?;
        }
        Ok(x)
    }
}

/// How experts are selected at every site.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'a> {
    /// Probability-weighted mixture, `p: [N, K, C]`. With `mask`, an expert's
    /// branch only passes gradient for the samples where it has the highest probability.
    Soft { p: Var, mask: bool },
    /// One expert per sample and site; `y` is `N * K` row-major.
    Hard { y: &'a [usize] },
}

/// Hook run on a site's output feature map.
pub trait Injector {
    fn inject(&self, s: &mut Session, site: usize, features: Var) -> Result<Var>;
}

/// Name prefix shared by every parameter of one expert.
pub fn expert_prefix(name: &str, site: usize, expert: usize) -> String {
    format!("{name}.site{site}.expert{expert}.")
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: ArchConfig,
    patch_embed: Conv,
    down: Vec<Conv>,
    up: Vec<Linear>,
    reduce: Vec<Linear>,
    sites: Vec<Vec<Expert>>,
    head: Conv,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let l = cfg.levels();
        let patch_embed = Conv::new(store, &format!("{name}.patch_embed"), 3, w[0], 3, 1);
        let down = (1..l)
            .map(|i| Conv::new(store, &format!("{name}.down{i}"), w[i - 1], w[i], 3, 2))
            .collect();
        let up = (0..l - 1)
            .map(|i| Linear::new(store, &format!("{name}.up{i}"), w[i + 1], w[i], true))
            .collect();
        let reduce = (0..l - 1)
            .map(|i| Linear::new(store, &format!("{name}.reduce{i}"), 2 * w[i], w[i], true))
            .collect();
        let sites = (0..cfg.sites())
            .map(|site| {
                let lv = cfg.site_level(site);
                (0..cfg.experts)
                    .map(|j| Expert {
                        blocks: (0..cfg.blocks[lv])
                            .map(|b| {
                                let prefix = expert_prefix(name, site, j);
                                Block::new(store, &format!("{prefix}block{b}"), w[lv], cfg.ffn_expansion)
                            })
                            .collect(),
                    })
                    .collect()
            })
            .collect();
        let head = Conv::new(store, &format!("{name}.head"), w[0], 3, 3, 1);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            down,
            up,
            reduce,
            sites,
            head,
        })
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn experts(&self) -> usize {
        self.cfg.experts
    }

    fn run_site(&self, s: &mut Session, site: usize, x: Var, routing: Routing) -> Result<Var> {
        let n = s.tape.shape(x)[0];
        let (k, c) = (self.num_sites(), self.cfg.experts);
        let experts = &self.sites[site];
        match routing {
            Routing::Soft { p, mask } => {
                let pl = s.tape.slice(p, 1, site, 1)?;
                let pl = s.tape.reshape(pl, &[n, c])?;
                let winners: Vec<usize> = s.tape.value(pl).data().chunks(c).map(argmax).collect();
                let mut acc: Option<Var> = None;
                for (j, e) in experts.iter().enumerate() {
                    let mut out = e.forward(s, x)?;
                    if mask {
                        let m: Vec<f64> = winners.iter().map(|&w| if w == j { 1.0 } else { 0.0 }).collect();
                        out = s.tape.grad_mask0(out, &m)?;
                    }
                    let pj = s.tape.slice(pl, 1, j, 1)?;
                    let pj = s.tape.reshape(pj, &[n, 1, 1, 1])?;
                    let term = s.tape.mul(out, pj)?;
                    acc = Some(match acc {
                        Some(a) => s.tape.add(a, term)?,
                        None => term,
                    });
                }
                Ok(acc.expect("at least one expert"))
            }
            Routing::Hard { y } => {
                let mut groups: Vec<Vec<usize>> = vec![Vec::new(); c];
                for i in 0..n {
                    groups[y[i * k + site]].push(i);
                }
                let mut parts = Vec::new();
                for (j, rows) in groups.into_iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    // rows are ascending, so a full group is the identity gather
                    if rows.len() == n {
                        return experts[j].forward(s, x);
                    }
                    let xi = s.tape.gather0(x, &rows)?;
                    let out = experts[j].forward(s, xi)?;
                    parts.push((out, rows));
                }
                s.tape.assemble0(&parts, n)
            }
        }
    }

    fn check_routing(&self, s: &Session, n: usize, routing: &Routing) -> Result<()> {
        let (k, c) = (self.num_sites(), self.cfg.experts);
        match routing {
            Routing::Soft { p, .. } => {
                if s.tape.shape(*p) != [n, k, c] {
                    return Err(mismatch("forward_soft", s.tape.shape(*p), &[n, k, c]));
                }
            }
            Routing::Hard { y } => {
                if y.len() != n * k {
                    return Err(mismatch("forward_hard", &[y.len()], &[n * k]));
                }
                if let Some(bad) = y.iter().find(|&&v| v >= c) {
                    return Err(invalid("forward_hard", format!("expert index {bad} out of range for {c} experts")));
                }
            }
        }
        Ok(())
    }

    /// `x: [N, H, W, 3]` → restored image of the same shape (unclamped).
    pub fn forward(&self, s: &mut Session, x: Var, routing: Routing, inject: Option<&dyn Injector>) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        if sh.len() != 4 || sh[3] != 3 {
            return Err(invalid("backbone", format!("expected [N, H, W, 3], got {:?}", sh)));
        }
        let f = self.cfg.factor();
        if sh[1] % f != 0 || sh[2] % f != 0 {
            return Err(invalid("backbone", format!("{}x{} input is not divisible by {f}", sh[1], sh[2])));
        }
        self.check_routing(s, sh[0], &routing)?;
        let levels = self.cfg.levels();
        let mut skips = Vec::with_capacity(levels);
        let mut h = self.patch_embed.forward(s, x)?;
        for lv in 0..levels {
            if lv > 0 {
                h = self.down[lv - 1].forward(s, h)?;
            }
            h = self.run_site(s, lv, h, routing)?;
            if let Some(inj) = inject {
                h = inj.inject(s, lv, h)?;
            }
            skips.push(h);
        }
        for i in 0..levels {
            let site = levels + i;
            let lv = levels - 1 - i;
            if i > 0 {
                let u = s.tape.upsample2x(h)?;
                let u = self.up[lv].forward(s, u)?;
                let cat = s.tape.concat(&[u, skips[lv]], 3)?;
                h = self.reduce[lv].forward(s, cat)?;
            }
            h = self.run_site(s, site, h, routing)?;
            if let Some(inj) = inject {
                h = inj.inject(s, site, h)?;
            }
        }
        let r = self.head.forward(s, h)?;
        s.tape.add(x, r)
    }

    pub fn forward_soft(&self, s: &mut Session, x: Var, p: Var, inject: Option<&dyn Injector>) -> Result<Var> {
        self.forward(s, x, Routing::Soft { p, mask: true }, inject)
    }

    pub fn forward_hard(&self, s: &mut Session, x: Var, y: &[usize], inject: Option<&dyn Injector>) -> Result<Var> {
        self.forward(s, x, Routing::Hard { y }, inject)
    }
}

/// Every route through `sites` sites with `experts` choices, in lexicographic order.
pub fn enumerate_routes(sites: usize, experts: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; sites]];
    for site in 0..sites {
        out = out
            .into_iter()
            .flat_map(|r| {
                (0..experts).map(move |j| {
                    let mut r = r.clone();
                    r[site] = j;
                    r
                })
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;
    use crate::tensor::{seeded_init, InitScheme, Tensor};

    fn tiny(levels: usize, experts: usize) -> ArchConfig {
        ArchConfig {
            widths: [4, 6, 8, 8][..levels].to_vec(),
            blocks: vec![1; levels],
            experts,
            ffn_expansion: 2,
        }
    }

    fn image(n: usize, side: usize, seed: u64) -> Tensor {
        let mut t = seeded_init(&[n, side, side, 3], InitScheme::Normal { std: 0.2 }, seed);
        t.data_mut().iter_mut().for_each(|v| *v = (*v + 0.5).clamp(0.0, 1.0));
        t
    }

    fn hard(store: &ParamStore, bb: &Backbone, x: &Tensor, y: &[usize]) -> Tensor {
        let mut s = Session::inference(store);
        let xv = s.input(x.clone());
        let out = bb.forward_hard(&mut s, xv, y, None).unwrap();
        s.tape.value(out).clone()
    }

    fn soft(store: &ParamStore, bb: &Backbone, x: &Tensor, p: &Tensor) -> Tensor {
        let mut s = Session::inference(store);
        let xv = s.input(x.clone());
        let pv = s.input(p.clone());
        let out = bb.forward_soft(&mut s, xv, pv, None).unwrap();
        s.tape.value(out).clone()
    }

    /// `[N, 8, c]` gates from an `N * 8` route.
    fn one_hot(y: &[usize], c: usize) -> Tensor {
        let mut d = vec![0.0; y.len() * c];
        for (i, &j) in y.iter().enumerate() {
            d[i * c + j] = 1.0;
        }
        Tensor::new(&[y.len() / 8, 8, c], d).unwrap()
    }

    fn expert_ids(store: &ParamStore, site: usize, j: usize) -> Vec<ParamId> {
        let p = expert_prefix("bb", site, j);
        store.ids_with_prefix(&[p.as_str()]).collect()
    }

    #[test]
    fn default_build_counts() {
        let mut store = ParamStore::new(0);
        let bb = Backbone::new(&mut store, "bb", &ArchConfig::default()).unwrap();
        assert_eq!(bb.num_sites(), 8);
        let sets: usize = (0..8).map(|l| (0..3).filter(|&j| !expert_ids(&store, l, j).is_empty()).count()).sum();
        assert_eq!(sets, 24);
        let mut again = ParamStore::new(0);
        Backbone::new(&mut again, "bb", &ArchConfig::default()).unwrap();
        assert_eq!(store, again);
        for c in [2, 4] {
            let cfg = ArchConfig {
                experts: c,
                ..ArchConfig::default()
            };
            assert!(Backbone::new(&mut ParamStore::new(0), "bb", &cfg).is_ok());
        }
        let bad = ArchConfig {
            experts: 1,
            ..ArchConfig::default()
        };
        assert!(Backbone::new(&mut ParamStore::new(0), "bb", &bad).is_err());
    }

    #[test]
    fn one_hot_soft_equals_hard() {
        let mut store = ParamStore::new(3);
        let bb = Backbone::new(&mut store, "bb", &tiny(4, 3)).unwrap();
        let x = image(2, 16, 7);
        let y: Vec<usize> = (0..16).map(|i| (i * 7 + 1) % 3).collect();
        let a = hard(&store, &bb, &x, &y);
        let b = soft(&store, &bb, &x, &one_hot(&y, 3));
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn near_one_hot_soft_is_close_to_hard() {
        let mut store = ParamStore::new(3);
        let bb = Backbone::new(&mut store, "bb", &tiny(4, 3)).unwrap();
        let x = image(1, 16, 2);
        let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let mut p = one_hot(&y, 3);
        for (i, v) in p.data_mut().iter_mut().enumerate() {
            *v = if *v == 1.0 { 1.0 - 1e-9 } else { 0.5e-9 + 1e-12 * (i % 2) as f64 };
        }
        let d = hard(&store, &bb, &x, &y).max_abs_diff(&soft(&store, &bb, &x, &p));
        assert!(d <= 1e-6, "{d}");
    }

    #[test]
    fn identical_experts_under_uniform_gates() {
        let mut store = ParamStore::new(4);
        let bb = Backbone::new(&mut store, "bb", &tiny(2, 3)).unwrap();
        for site in 0..4 {
            let src = expert_ids(&store, site, 0);
            for j in 1..3 {
                for (a, b) in src.iter().zip(expert_ids(&store, site, j)) {
                    *store.get_mut(b) = store.get(*a).clone();
                }
            }
        }
        let x = image(1, 8, 9);
        let single = hard(&store, &bb, &x, &[2, 1, 0, 2]);
        let mixed = soft(&store, &bb, &x, &Tensor::full(&[1, 4, 3], 1.0 / 3.0));
        assert!(single.max_abs_diff(&mixed) <= 1e-12);
    }

    #[test]
    fn masked_soft_step_leaves_losing_experts_untouched() {
        let mut store = ParamStore::new(5);
        let bb = Backbone::new(&mut store, "bb", &tiny(2, 3)).unwrap();
        let x = image(2, 8, 1);
        // expert 2 never wins anywhere, experts 0/1 split the samples
        let mut p = Tensor::full(&[2, 4, 3], 0.2);
        for l in 0..4 {
            p.data_mut()[l * 3] = 0.6;
            p.data_mut()[12 + l * 3 + 1] = 0.6;
        }
        let mut s = Session::new(&store);
        let xv = s.input(x.clone());
        let pv = s.tape.leaf(p, true);
        let out = bb.forward_soft(&mut s, xv, pv, None).unwrap();
        let loss = s.tape.mean(out);
        let g = s.backward(loss).unwrap();
        for site in 0..4 {
            for id in expert_ids(&store, site, 2) {
                assert!(g.get(id).unwrap().data().iter().all(|&v| v == 0.0));
            }
            assert!(expert_ids(&store, site, 0).iter().any(|&id| g.get(id).unwrap().data().iter().any(|&v| v != 0.0)));
        }
    }

    #[test]
    fn gate_gradient_flows_to_every_expert_probability() {
        let mut store = ParamStore::new(5);
        let bb = Backbone::new(&mut store, "bb", &tiny(1, 2)).unwrap();
        let x = image(1, 4, 1);
        let mut s = Session::new(&store);
        let xv = s.input(x);
        let pv = s.tape.leaf(Tensor::new(&[1, 2, 2], vec![0.7, 0.3, 0.4, 0.6]).unwrap(), true);
        let out = bb.forward_soft(&mut s, xv, pv, None).unwrap();
        let sq = s.tape.mul(out, out).unwrap();
        let loss = s.tape.mean(sq);
        let mut g = s.tape.backward(loss).unwrap();
        let gp = g.take(pv).unwrap();
        assert!(gp.data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn hard_routes_isolate_gradients_and_differ() {
        let mut store = ParamStore::new(6);
        let bb = Backbone::new(&mut store, "bb", &tiny(2, 3)).unwrap();
        let x = image(2, 8, 2);
        let y = [0, 1, 0, 1, 0, 0, 0, 1];
        let mut s = Session::new(&store);
        let xv = s.input(x.clone());
        let out = bb.forward_hard(&mut s, xv, &y, None).unwrap();
        let loss = s.tape.mean(out);
        let g = s.backward(loss).unwrap();
        for site in 0..4 {
            for id in expert_ids(&store, site, 2) {
                assert!(g.get(id).is_none());
            }
        }
        assert_ne!(hard(&store, &bb, &x, &[0; 8]), hard(&store, &bb, &x, &[1; 8]));
        let mut s = Session::inference(&store);
        let xv = s.input(x);
        assert!(bb.forward_hard(&mut s, xv, &[3; 8], None).is_err());
    }

    #[test]
    fn hard_compute_does_not_depend_on_expert_count() {
        let x = image(1, 16, 3);
        let flops: Vec<u64> = [2, 3, 4]
            .iter()
            .map(|&c| {
                let mut store = ParamStore::new(1);
                let bb = Backbone::new(&mut store, "bb", &tiny(4, c)).unwrap();
                let mut s = Session::inference(&store);
                let xv = s.input(x.clone());
                bb.forward_hard(&mut s, xv, &[1; 8], None).unwrap();
                s.tape.flops()
            })
            .collect();
        assert!(flops.iter().all(|&f| f == flops[0] && f > 0));
    }

    #[test]
    fn toy_routes_are_all_distinct() {
        let mut store = ParamStore::new(8);
        let bb = Backbone::new(&mut store, "bb", &tiny(1, 2)).unwrap();
        let x = image(1, 4, 4);
        let routes = enumerate_routes(2, 2);
        assert_eq!(routes.len(), crate::router::path_count(2, 2) as usize);
        let outs: Vec<Tensor> = routes.iter().map(|r| hard(&store, &bb, &x, r)).collect();
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                assert!(outs[i].max_abs_diff(&outs[j]) > 1e-9);
            }
        }
    }

    #[test]
    fn swapping_experts_and_route_indices_is_a_symmetry() {
        let mut store = ParamStore::new(9);
        let bb = Backbone::new(&mut store, "bb", &tiny(2, 3)).unwrap();
        let x = image(1, 8, 5);
        let before = hard(&store, &bb, &x, &[0, 2, 1, 0]);
        for (a, b) in expert_ids(&store, 1, 2).into_iter().zip(expert_ids(&store, 1, 0)) {
            let (ta, tb) = (store.get(a).clone(), store.get(b).clone());
            *store.get_mut(a) = tb;
            *store.get_mut(b) = ta;
        }
        assert_eq!(before, hard(&store, &bb, &x, &[0, 0, 1, 0]));
    }

    #[test]
    fn shape_round_trip_and_errors() {
        let mut store = ParamStore::new(2);
        let bb = Backbone::new(&mut store, "bb", &tiny(4, 2)).unwrap();
        let x = image(1, 24, 1);
        assert_eq!(hard(&store, &bb, &x, &[0; 8]).shape(), &[1, 24, 24, 3]);
        let mut s = Session::inference(&store);
        let bad = s.input(image(1, 12, 1));
        assert!(bb.forward_hard(&mut s, bad, &[0; 8], None).is_err());
        let xv = s.input(x);
        let p = s.input(Tensor::full(&[1, 7, 2], 0.5));
        assert!(bb.forward_soft(&mut s, xv, p, None).is_err());
    }
}
