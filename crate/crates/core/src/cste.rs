//! Cross-scale transformer encoder: patch tokens of the image attend (through
//! a stride-2 query path) to locally refined wavelet tokens, the result is
//! fused back into the patch tokens and encoded by a pre-norm transformer.

use rand::Rng;
use rand_distr::Uniform;

use crate::error::{Error, Result};
use crate::hwm::{grid_to_tokens, tokens_to_grid, TokenGrid};
use crate::layers::{fan_in_uniform, Conv, LayerNorm, Linear};
use crate::numcore::{BnMode, BnStats, Bound, Conv2dOpts, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsteConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_expansion: usize,
}

impl CsteConfig {
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("cste_config", msg));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("patch {} must divide {}x{}", self.patch, self.height, self.width));
        }
        let (gh, gw) = self.patch_grid();
        if gh % 2 != 0 || gw % 2 != 0 || gh < 2 || gw < 2 {
            return bad(format!("patch grid {gh}x{gw} must have even extents"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        Ok(())
    }
}

/// One pre-norm transformer layer with multi-head self-attention.
#[derive(Clone, Copy, Debug)]
pub struct VitLayer {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub up: Linear,
    pub down: Linear,
    pub heads: usize,
}

impl VitLayer {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize, expansion: usize) -> Self {
        let grp = ParamGroup::Backbone;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), grp, dim),
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), grp, dim, 3 * dim, true),
            proj: Linear::new(store, rng, &format!("{name}.proj"), grp, dim, dim, true),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), grp, dim),
            up: Linear::new(store, rng, &format!("{name}.up"), grp, dim, expansion * dim, true),
            down: Linear::new(store, rng, &format!("{name}.down"), grp, expansion * dim, dim, true),
            heads,
        }
    }

    fn attention(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let qkv = self.qkv.forward(g, p, x)?;
        let qkv = g.reshape(qkv, &[b, l, 3, self.heads, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3 * b * self.heads, l, dh])?;
        let n = b * self.heads;
        let q = g.slice(qkv, 0, 0, n)?;
        let k = g.slice(qkv, 0, n, n)?;
        let v = g.slice(qkv, 0, 2 * n, n)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores, 2)?;
        let out = g.matmul(attn, v)?;
        let out = g.reshape(out, &[b, self.heads, l, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, l, d])?;
        self.proj.forward(g, p, out)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = self.attention(g, p, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.up.forward(g, p, h)?;
        let h = g.relu(h)?;
        let h = self.down.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Eq.-7 style cascade on the coarsest wavelet grid.
#[derive(Clone, Copy, Debug)]
pub struct LocalRefine {
    pub compress: Conv,
    pub smooth: Conv,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
}

/// Running-statistics update produced by a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BnStats,
}

impl LocalRefine {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize) -> Self {
        let grp = ParamGroup::Backbone;
        let pad1 = Conv2dOpts {
            stride: 1,
            pad: 1,
            groups: 1,
        };
        Self {
            compress: Conv::new(store, rng, "cste.local.compress", grp, dim, dim, 1, Conv2dOpts::default()),
            smooth: Conv::new(store, rng, "cste.local.smooth", grp, dim, dim, 3, pad1),
            bn_gamma: store.add("cste.local.bn.gamma", grp, Tensor::ones(&[dim])),
            bn_beta: store.add("cste.local.bn.beta", grp, Tensor::zeros(&[dim])),
            bn_mean: store.add("cste.local.bn.running_mean", ParamGroup::Buffer, Tensor::zeros(&[dim])),
            bn_var: store.add("cste.local.bn.running_var", ParamGroup::Buffer, Tensor::ones(&[dim])),
        }
    }

    /// `[B, D, h, w]` grid → `[B, D, h/2, w/2]`.
    pub fn forward_grid(&self, g: &mut Graph, p: &Bound, grid: Var, mode: BnMode) -> Result<(Var, Option<BnUpdate>)> {
        let y = self.compress.forward(g, p, grid)?;
        let y = self.smooth.forward(g, p, y)?;
        let running = BnStats {
            mean: g.value(p.var(self.bn_mean)).data().to_vec(),
            var: g.value(p.var(self.bn_var)).data().to_vec(),
        };
        let (y, stats) = g.batch_norm(y, p.var(self.bn_gamma), p.var(self.bn_beta), &running, mode)?;
        let y = g.relu(y)?;
        let y = g.avg_pool2d(y, 2, 2)?;
        let update = stats.map(|stats| BnUpdate {
            mean: self.bn_mean,
            var: self.bn_var,
            stats,
        });
        Ok((y, update))
    }
}

#[derive(Clone, Debug)]
pub struct Cste {
    pub cfg: CsteConfig,
    pub patch: Conv,
    pub pos: ParamId,
    pub query_norm: LayerNorm,
    pub query_conv: Conv,
    pub local: LocalRefine,
    pub key: ParamId,
    pub value: ParamId,
    pub fuse: Linear,
    pub vit: Vec<VitLayer>,
    pub out: Linear,
}

impl Cste {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: CsteConfig) -> Result<Self> {
        cfg.validate()?;
        let grp = ParamGroup::Backbone;
        let (gh, gw) = cfg.patch_grid();
        let patch_opts = Conv2dOpts {
            stride: cfg.patch,
            pad: 0,
            groups: 1,
        };
        let patch = Conv::new(store, rng, "cste.patch", grp, cfg.in_channels, cfg.embed_dim, cfg.patch, patch_opts);
        let pos_dist = Uniform::new_inclusive(-0.02, 0.02);
        let pos = Tensor::new(
            &[gh * gw, cfg.embed_dim],
            (0..gh * gw * cfg.embed_dim).map(|_| rng.sample(pos_dist)).collect(),
        )?;
        let pos = store.add("cste.pos", grp, pos);
        let query_norm = LayerNorm::new(store, "cste.query.norm", grp, cfg.embed_dim);
        let stride2 = Conv2dOpts {
            stride: 2,
            pad: 0,
            groups: 1,
        };
        let query_conv = Conv::new(store, rng, "cste.query.conv", grp, cfg.embed_dim, cfg.dim, 3, stride2);
        let local = LocalRefine::new(store, rng, cfg.dim);
        let key = store.add("cste.attn.key", grp, fan_in_uniform(rng, &[cfg.dim, cfg.dim], cfg.dim));
        let value = store.add("cste.attn.value", grp, fan_in_uniform(rng, &[cfg.dim, cfg.dim], cfg.dim));
        let fuse = Linear::new(store, rng, "cste.fuse", grp, cfg.dim, cfg.embed_dim, true);
        let vit = (0..cfg.layers)
            .map(|i| VitLayer::new(store, rng, &format!("cste.vit{i}"), cfg.embed_dim, cfg.heads, cfg.ffn_expansion))
            .collect();
        let out = Linear::new(store, rng, "cste.out", grp, cfg.embed_dim, cfg.dim, true);
        Ok(Self {
            cfg,
            patch,
            pos,
            query_norm,
            query_conv,
            local,
            key,
            value,
            fuse,
            vit,
            out,
        })
    }

    /// Image `[B, C, H, W]` → patch tokens `[B, (H/p)(W/p), D_p]` plus positions.
    pub fn patch_embed(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let e = self.patch_tokens(g, p, image)?;
        g.add(e, p.var(self.pos))
    }

    /// Patch tokens before the positional embedding is added.
    pub fn patch_tokens(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1..] != [self.cfg.in_channels, self.cfg.height, self.cfg.width] {
            return Err(Error::shape(
                "patch_embed",
                &[0, self.cfg.in_channels, self.cfg.height, self.cfg.width],
                &s,
            ));
        }
        let y = self.patch.forward(g, p, image)?;
        grid_to_tokens(g, y)
    }

    /// Layer norm, reflect pad 1, 3×3 stride-2 conv: `[B, Lp, D_p] → [B, Lq, D]`.
    pub fn query_downsample(&self, g: &mut Graph, p: &Bound, e: Var) -> Result<Var> {
        let (gh, gw) = self.cfg.patch_grid();
        let x = self.query_norm.forward(g, p, e)?;
        let grid = tokens_to_grid(g, x, 0, gh, gw)?;
        let padded = g.pad_reflect(grid, 1)?;
        let q = self.query_conv.forward(g, p, padded)?;
        grid_to_tokens(g, q)
    }

    /// Refines the coarsest-level wavelet tokens: `[B, L, D] → [B, L_loc, D]`.
    pub fn local_refine(
        &self,
        g: &mut Graph,
        p: &Bound,
        f_final: Var,
        grid: &TokenGrid,
        mode: BnMode,
    ) -> Result<(Var, Option<BnUpdate>)> {
        let (o, h, w) = grid.coarsest();
        if h < 2 || w < 2 {
            return Err(Error::invalid("local_refine", format!("coarsest grid {h}x{w} too small to pool")));
        }
        let img = tokens_to_grid(g, f_final, o, h, w)?;
        let (y, upd) = self.local.forward_grid(g, p, img, mode)?;
        Ok((grid_to_tokens(g, y)?, upd))
    }

    /// `A = softmax(Q′Kᵀ/√D)·V` with `K = F·W_k`, `V = F·W_v`.
    pub fn cross_attention(&self, g: &mut Graph, p: &Bound, q: Var, local: Var) -> Result<Var> {
        cross_attention(g, q, local, p.var(self.key), p.var(self.value))
    }

    /// Mean-pooled transformer encoding of fused tokens, projected to `D`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for layer in &self.vit {
            x = layer.forward(g, p, x)?;
        }
        let pooled = g.mean_axis(x, 1)?;
        self.out.forward(g, p, pooled)
    }

    /// Projects `A` to `D_p`, upsamples it 2× on the query grid and adds it
    /// to the patch tokens.
    pub fn fuse(&self, g: &mut Graph, p: &Bound, attn: Var, e: Var) -> Result<Var> {
        let (gh, gw) = self.cfg.patch_grid();
        let a = self.fuse.forward(g, p, attn)?;
        let a = tokens_to_grid(g, a, 0, gh / 2, gw / 2)?;
        let a = g.upsample_nearest(a, 2)?;
        let a = grid_to_tokens(g, a)?;
        if g.shape(a) != g.shape(e) {
            return Err(Error::shape("fuse", g.shape(a), g.shape(e)));
        }
        g.add(e, a)
    }

    /// Image and wavelet tokens → global embedding `[B, D]` (before FiLM).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        image: Var,
        f_final: Var,
        grid: &TokenGrid,
        mode: BnMode,
    ) -> Result<(Var, Option<BnUpdate>)> {
        let e = self.patch_embed(g, p, image)?;
        let q = self.query_downsample(g, p, e)?;
        let (local, upd) = self.local_refine(g, p, f_final, grid, mode)?;
        let a = self.cross_attention(g, p, q, local)?;
        let fused = self.fuse(g, p, a, e)?;
        Ok((self.encode(g, p, fused)?, upd))
    }
}

/// Single-head scaled dot-product attention of `q: [B, Lq, D]` over keys
/// and values projected from `f: [B, Lk, D]`.
pub fn cross_attention(g: &mut Graph, q: Var, f: Var, w_k: Var, w_v: Var) -> Result<Var> {
    let (qs, fs) = (g.shape(q).to_vec(), g.shape(f).to_vec());
    if qs.len() != 3 || fs.len() != 3 || qs[0] != fs[0] || qs[2] != fs[2] {
        return Err(Error::shape("cross_attention", &qs, &fs));
    }
    let k = g.matmul(f, w_k)?;
    let v = g.matmul(f, w_v)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (qs[2] as f64).sqrt())?;
    let attn = g.softmax(logits, 2)?;
    g.matmul(attn, v)
}
