//! Wavelet branch: multi-level Haar pyramid → per-level token projection →
//! four selective-scan streams with convolutional feed-forward refinement.

mod haar;
mod scan;

use rand::Rng;

pub use haar::{
    check_divisible, crop, haar_dwt_level, haar_idwt_level, haar_level, multiscale_decompose, reconstruct,
    reflect_pad_to_multiple, subband, Padding, WaveletPyramid, SUBBANDS,
};
pub use scan::{selective_scan_core, SsmBlock};

use crate::error::{Error, Result};
use crate::layers::{Conv, Linear};
use crate::numcore::{Bound, Conv2dOpts, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub const STREAMS: usize = 4;

/// Token positions of each pyramid level inside the flattened sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    /// `(offset, height, width)` per level, finest first.
    pub levels: Vec<(usize, usize, usize)>,
}

/// Origin of one token: pyramid level and position on that level's grid.
/// Each token summarizes all four subbands at that position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, levels: usize) -> Result<Self> {
        check_divisible(height, width, levels)?;
        let mut offset = 0;
        let levels = (1..=levels)
            .map(|s| {
                let (h, w) = (height >> s, width >> s);
                let entry = (offset, h, w);
                offset += h * w;
                entry
            })
            .collect();
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.last().map_or(0, |&(o, h, w)| o + h * w)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn provenance(&self, token: usize) -> Option<Provenance> {
        self.levels
            .iter()
            .enumerate()
            .find(|(_, &(o, h, w))| token >= o && token < o + h * w)
            .map(|(level, &(o, _, w))| Provenance {
                level,
                row: (token - o) / w,
                col: (token - o) % w,
            })
    }

    pub fn token_index(&self, p: Provenance) -> Option<usize> {
        let &(o, h, w) = self.levels.get(p.level)?;
        (p.row < h && p.col < w).then_some(o + p.row * w + p.col)
    }

    pub fn coarsest(&self) -> (usize, usize, usize) {
        *self.levels.last().expect("at least one level")
    }
}

/// `[B, L, D]` tokens of one level → `[B, D, h, w]` grid.
pub fn tokens_to_grid(g: &mut Graph, x: Var, offset: usize, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || offset + h * w > s[1] {
        return Err(Error::invalid(
            "tokens_to_grid",
            format!("level at offset {offset} with {h}x{w} tokens does not fit {s:?}"),
        ));
    }
    let lvl = g.slice(x, 1, offset, h * w)?;
    let t = g.permute(lvl, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], h, w])
}

/// `[B, D, h, w]` grid → `[B, h·w, D]` tokens, row-major.
pub fn grid_to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("grid_to_tokens", format!("expected NCHW, got {s:?}")));
    }
    let t = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(t, &[0, 2, 1])
}

/// Depthwise 3×3 convolution on every level grid, then a pointwise
/// two-layer relu MLP, added back to the input.
#[derive(Clone, Copy, Debug)]
pub struct ConvFfn {
    pub depthwise: Conv,
    pub up: Linear,
    pub down: Linear,
}

impl ConvFfn {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, expansion: usize) -> Self {
        let grp = ParamGroup::Backbone;
        let opts = Conv2dOpts {
            stride: 1,
            pad: 1,
            groups: dim,
        };
        Self {
            depthwise: Conv::new(store, rng, &format!("{name}.dw"), grp, dim, dim, 3, opts),
            up: Linear::new(store, rng, &format!("{name}.up"), grp, dim, expansion * dim, true),
            down: Linear::new(store, rng, &format!("{name}.down"), grp, expansion * dim, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, grid: &TokenGrid) -> Result<Var> {
        if g.shape(x).get(1) != Some(&grid.len()) {
            return Err(Error::invalid(
                "conv_ffn",
                format!("token grid covers {} tokens, input is {:?}", grid.len(), g.shape(x)),
            ));
        }
        let mut parts = Vec::with_capacity(grid.levels.len());
        for &(o, h, w) in &grid.levels {
            let img = tokens_to_grid(g, x, o, h, w)?;
            let conv = self.depthwise.forward(g, p, img)?;
            parts.push(grid_to_tokens(g, conv)?);
        }
        let mixed = g.concat(&parts, 1)?;
        let hid = self.up.forward(g, p, mixed)?;
        let hid = g.relu(hid)?;
        let out = self.down.forward(g, p, hid)?;
        g.add(x, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HwmConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub levels: usize,
    pub dim: usize,
    pub state: usize,
    pub ffn_expansion: usize,
}

#[derive(Clone, Debug)]
pub struct Hwm {
    pub cfg: HwmConfig,
    pub grid: TokenGrid,
    pub level_proj: Vec<Conv>,
    pub split: Linear,
    pub scans: Vec<SsmBlock>,
    pub ffns: Vec<ConvFfn>,
    pub merge: ParamId,
}

/// Intermediate values of one forward pass, for inspection and tests.
pub struct HwmTrace {
    pub tokens: Var,
    pub streams: Vec<Var>,
    pub refined: Vec<Var>,
    pub output: Var,
}

impl Hwm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: HwmConfig) -> Result<Self> {
        let grid = TokenGrid::new(cfg.height, cfg.width, cfg.levels)?;
        let grp = ParamGroup::Backbone;
        let level_proj = (0..cfg.levels)
            .map(|s| {
                Conv::new(
                    store,
                    rng,
                    &format!("hwm.level{s}.proj"),
                    grp,
                    4 * cfg.in_channels,
                    cfg.dim,
                    1,
                    Conv2dOpts::default(),
                )
            })
            .collect();
        let eye = Tensor::eye(cfg.dim);
        let mut split_w = Vec::with_capacity(cfg.dim * STREAMS * cfg.dim);
        for r in 0..cfg.dim {
            for _ in 0..STREAMS {
                split_w.extend_from_slice(&eye.data()[r * cfg.dim..(r + 1) * cfg.dim]);
            }
        }
        let split = Linear {
            w: store.add("hwm.split.weight", grp, Tensor::new(&[cfg.dim, STREAMS * cfg.dim], split_w)?),
            b: Some(store.add("hwm.split.bias", grp, Tensor::zeros(&[STREAMS * cfg.dim]))),
            fan_in: cfg.dim,
            fan_out: STREAMS * cfg.dim,
        };
        let scans = (0..STREAMS)
            .map(|i| SsmBlock::new(store, rng, &format!("hwm.stream{i}.scan"), cfg.dim, cfg.state))
            .collect();
        let ffns = (0..STREAMS)
            .map(|i| ConvFfn::new(store, rng, &format!("hwm.stream{i}.ffn"), cfg.dim, cfg.ffn_expansion))
            .collect();
        let merge = store.add("hwm.merge", grp, Tensor::full(&[STREAMS], 1.0 / STREAMS as f64));
        Ok(Self {
            cfg,
            grid,
            level_proj,
            split,
            scans,
            ffns,
            merge,
        })
    }

    /// Pyramid levels as graph nodes; the image may itself be a graph var.
    pub fn decompose(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1..] != [self.cfg.in_channels, self.cfg.height, self.cfg.width] {
            return Err(Error::shape(
                "hwm",
                &[0, self.cfg.in_channels, self.cfg.height, self.cfg.width],
                &s,
            ));
        }
        let mut cur = image;
        let mut levels = Vec::with_capacity(self.cfg.levels);
        for _ in 0..self.cfg.levels {
            let bands = haar_level(g, cur)?;
            cur = g.slice(bands, 1, 0, self.cfg.in_channels)?;
            levels.push(bands);
        }
        Ok(levels)
    }

    /// Projects each level's stacked subbands to `D` channels and flattens
    /// level-major, row-major: `[B, L, D]`.
    pub fn flatten_concat(&self, g: &mut Graph, p: &Bound, levels: &[Var]) -> Result<Var> {
        let parts = levels
            .iter()
            .zip(&self.level_proj)
            .map(|(&lvl, proj)| {
                let y = proj.forward(g, p, lvl)?;
                grid_to_tokens(g, y)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat(&parts, 1)
    }

    /// Learned `D → 4D` projection cut into four `[B, L, D]` streams.
    pub fn split_subsequences(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Vec<Var>> {
        let all = self.split.forward(g, p, tokens)?;
        (0..STREAMS)
            .map(|i| g.slice(all, 2, i * self.cfg.dim, self.cfg.dim))
            .collect()
    }

    pub fn trace(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<HwmTrace> {
        let levels = self.decompose(g, image)?;
        let tokens = self.flatten_concat(g, p, &levels)?;
        let streams = self.split_subsequences(g, p, tokens)?;
        let mut refined = Vec::with_capacity(STREAMS);
        let mut output = None;
        for (i, &s) in streams.iter().enumerate() {
            let scanned = self.scans[i].forward(g, p, s)?;
            let r = self.ffns[i].forward(g, p, scanned, &self.grid)?;
            refined.push(r);
            let wi = g.slice(p.var(self.merge), 0, i, 1)?;
            let term = g.mul(r, wi)?;
            output = Some(match output {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok(HwmTrace {
            tokens,
            streams,
            refined,
            output: output.expect("four streams"),
        })
    }

    /// Image `[B, C, H, W]` → refined tokens `[B, L, D]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        Ok(self.trace(g, p, image)?.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> HwmConfig {
        HwmConfig {
            height: 16,
            width: 16,
            in_channels: 3,
            levels: 2,
            dim: 4,
            state: 2,
            ffn_expansion: 2,
        }
    }

    #[test]
    fn token_counts() {
        assert_eq!(TokenGrid::new(64, 64, 2).unwrap().len(), 1280);
        let grid = TokenGrid::new(16, 8, 2).unwrap();
        let mut seen = std::collections::HashSet::new();
        for t in 0..grid.len() {
            let p = grid.provenance(t).unwrap();
            assert_eq!(grid.token_index(p), Some(t));
            assert!(seen.insert(p));
        }
        assert!(grid.provenance(grid.len()).is_none());
    }

    #[test]
    fn split_replicates_at_init() {
        let mut store = ParamStore::new();
        let hwm = Hwm::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), toy()).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let x = g.constant(Tensor::new(&[2, 5, 4], (0..40).map(|i| i as f64 * 0.1).collect()).unwrap());
        let streams = hwm.split_subsequences(&mut g, &p, x).unwrap();
        assert_eq!(streams.len(), STREAMS);
        for s in streams {
            assert_eq!(g.value(s), g.value(x));
        }
    }

    #[test]
    fn zero_ffn_is_residual_identity() {
        let mut store = ParamStore::new();
        let hwm = Hwm::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), toy()).unwrap();
        let ffn = hwm.ffns[0];
        for id in [ffn.depthwise.w, ffn.depthwise.b, ffn.up.w, ffn.up.b.unwrap(), ffn.down.w, ffn.down.b.unwrap()] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let x = g.constant(Tensor::new(&[1, 80, 4], (0..320).map(|i| (i as f64).sin()).collect()).unwrap());
        let y = ffn.forward(&mut g, &p, x, &hwm.grid).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn output_shape() {
        let mut store = ParamStore::new();
        let hwm = Hwm::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), toy()).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let img = g.constant(Tensor::new(&[2, 3, 16, 16], (0..1536).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap());
        let y = hwm.forward(&mut g, &p, img).unwrap();
        assert_eq!(g.shape(y), &[2, 80, 4]);
    }
}
