//! The assembled network: wavelet branch, cross-scale encoder, demographic
//! modulation and the alignment head.

use serde::{Deserialize, Serialize};

use crate::asam::{total_loss, AlignParams, AsamConfig, LossTerms, LossWeights, Projected, TextEmbedder};
use crate::cste::{BnUpdate, Cste, CsteConfig};
use crate::error::{Error, Result};
use crate::hwm::{Hwm, HwmConfig};
use crate::numcore::{BnMode, Bound, Graph, ParamStore, Tensor, Var};
use crate::rftg::FilmLayer;
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub dim: usize,
    pub state: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub text_dim: usize,
    pub align_dim: usize,
    pub heads: usize,
    pub vit_layers: usize,
    pub ffn_expansion: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            levels: 2,
            dim: 32,
            state: 8,
            patch: 8,
            embed_dim: 32,
            text_dim: 32,
            align_dim: 16,
            heads: 4,
            vit_layers: 4,
            ffn_expansion: 4,
            classifier_hidden: 32,
        }
    }
}

impl ModelConfig {
    /// Reduced widths on a 32×32 canvas for single-core training runs.
    pub fn desk() -> Self {
        Self {
            height: 32,
            width: 32,
            dim: 16,
            patch: 4,
            embed_dim: 16,
            text_dim: 16,
            align_dim: 8,
            ..Self::default()
        }
    }

    /// 16×16 canvas with tiny widths for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            height: 16,
            width: 16,
            levels: 2,
            dim: 4,
            state: 2,
            patch: 4,
            embed_dim: 4,
            text_dim: 4,
            align_dim: 3,
            heads: 2,
            vit_layers: 4,
            ffn_expansion: 2,
            classifier_hidden: 4,
        }
    }

    pub fn hwm(&self) -> HwmConfig {
        HwmConfig {
            height: self.height,
            width: self.width,
            in_channels: 3,
            levels: self.levels,
            dim: self.dim,
            state: self.state,
            ffn_expansion: self.ffn_expansion,
        }
    }

    pub fn cste(&self) -> CsteConfig {
        CsteConfig {
            height: self.height,
            width: self.width,
            in_channels: 3,
            patch: self.patch,
            embed_dim: self.embed_dim,
            dim: self.dim,
            heads: self.heads,
            layers: self.vit_layers,
            ffn_expansion: self.ffn_expansion,
        }
    }

    pub fn asam(&self) -> AsamConfig {
        AsamConfig {
            dim: self.dim,
            text_dim: self.text_dim,
            align_dim: self.align_dim,
            hidden: self.classifier_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.dim,
            self.state,
            self.embed_dim,
            self.text_dim,
            self.align_dim,
            self.heads,
            self.vit_layers,
            self.ffn_expansion,
            self.classifier_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("model_config", format!("all widths must be positive: {self:?}")));
        }
        crate::hwm::check_divisible(self.height, self.width, self.levels)?;
        let coarse = (self.height >> self.levels, self.width >> self.levels);
        if coarse.0 < 2 || coarse.1 < 2 || coarse.0 % 2 != 0 || coarse.1 % 2 != 0 {
            return Err(Error::invalid(
                "model_config",
                format!("coarsest wavelet grid {coarse:?} must be even and at least 2x2 for pooling"),
            ));
        }
        self.cste().validate()
    }
}

/// One mini-batch: images `[B, 3, H, W]`, demographics `[B, 3]`, token
/// embeddings `[B, D_t]` and class indices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub demographics: Tensor,
    pub text: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub logits: Var,
    pub z: Var,
    pub proj: Projected,
    pub bn_update: Option<BnUpdate>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub hwm: Hwm,
    pub cste: Cste,
    pub film_tokens: FilmLayer,
    pub film_z: FilmLayer,
    pub align: AlignParams,
    pub embedder: TextEmbedder,
}

impl Model {
    /// Registers all parameters in `store` in a fixed declaration order.
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, &[0x3d_e1]);
        let hwm = Hwm::new(store, &mut rng, cfg.hwm())?;
        let cste = Cste::new(store, &mut rng, cfg.cste())?;
        let film_tokens = FilmLayer::new(store, &mut rng, "film.tokens", cfg.dim);
        let film_z = FilmLayer::new(store, &mut rng, "film.z", cfg.dim);
        let align = AlignParams::new(store, &mut rng, cfg.asam());
        Ok(Self {
            cfg,
            hwm,
            cste,
            film_tokens,
            film_z,
            align,
            embedder: TextEmbedder::new(cfg.text_dim),
        })
    }

    /// Forward pass on graph vars (so inputs may themselves be leaves).
    pub fn forward_vars(&self, g: &mut Graph, p: &Bound, image: Var, demo: Var, text: Var, mode: BnMode) -> Result<ForwardOut> {
        let f = self.hwm.forward(g, p, image)?;
        let f = self.film_tokens.modulate(g, p, f, demo)?;
        let (z, bn_update) = self.cste.forward(g, p, image, f, &self.hwm.grid, mode)?;
        let z = self.film_z.modulate(g, p, z, demo)?;
        let proj = self.align.project(g, p, z, text)?;
        let logits = self.align.classify(g, p, proj)?;
        Ok(ForwardOut {
            logits,
            z,
            proj,
            bn_update,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &Batch, mode: BnMode) -> Result<ForwardOut> {
        let image = g.constant(batch.images.clone());
        let demo = g.constant(batch.demographics.clone());
        let text = g.constant(batch.text.clone());
        self.forward_vars(g, p, image, demo, text, mode)
    }

    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        weights: LossWeights,
        mode: BnMode,
    ) -> Result<(LossTerms, ForwardOut)> {
        let out = self.forward(g, p, batch, mode)?;
        let terms = total_loss(
            g,
            out.logits,
            &batch.labels,
            out.proj,
            p.var(self.align.w_z),
            p.var(self.align.w_t),
            weights,
        )?;
        Ok((terms, out))
    }
}

/// Softmax probability of the patient class for each row of `[B, 2]` logits.
pub fn patient_probabilities(logits: &Tensor) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|r| {
            let m = r[0].max(r[1]);
            let (e0, e1) = ((r[0] - m).exp(), (r[1] - m).exp());
            e1 / (e0 + e1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::default(), ModelConfig::desk(), ModelConfig::toy()] {
            cfg.validate().unwrap();
        }
        assert!(ModelConfig { levels: 4, ..ModelConfig::toy() }.validate().is_err());
    }

    #[test]
    fn declaration_order_is_stable() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Model::new(&mut a, ModelConfig::toy(), 42).unwrap();
        Model::new(&mut b, ModelConfig::toy(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn toy_forward_shapes() {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, cfg, 1).unwrap();
        let batch = Batch {
            images: Tensor::new(&[2, 3, 16, 16], (0..1536).map(|i| (i as f64 * 0.13).sin()).collect()).unwrap(),
            demographics: Tensor::new(&[2, 3], vec![0.5, 1.0, 0.0, -0.5, 0.0, 1.0]).unwrap(),
            text: Tensor::new(&[2, 4], vec![0.1, -0.2, 0.3, 0.4, -0.1, 0.2, 0.0, 0.5]).unwrap(),
            labels: vec![0, 1],
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| true);
        let (terms, out) = model.loss(&mut g, &p, &batch, LossWeights::default(), BnMode::Train).unwrap();
        assert_eq!(g.shape(out.logits), &[2, 2]);
        assert_eq!(g.shape(out.z), &[2, 4]);
        assert!(g.value(terms.total).item().is_finite());
        assert!(out.bn_update.is_some());
    }
}
