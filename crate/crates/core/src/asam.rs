//! Shared-space alignment of image and token embeddings, the diagnosis
//! head, and the three-term training objective.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{fan_in_uniform, Linear};
use crate::numcore::{Bound, Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::rftg::{vocabulary, RoiTokenSeq};

/// Frozen token-embedding table; row values come from an RNG seeded by a
/// hash of the token string, so they do not depend on vocabulary order.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

pub fn token_row(token: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl TextEmbedder {
    pub fn new(dim: usize) -> Self {
        let table = vocabulary().into_iter().map(|t| {
            let row = token_row(&t, dim);
            (t, row)
        });
        Self {
            dim,
            table: table.collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, token: &str) -> Result<&[f64]> {
        self.table
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid("embed_tokens", format!("out-of-vocabulary token {token:?}")))
    }

    /// Mean of the token rows.
    pub fn embed(&self, seq: &RoiTokenSeq) -> Result<Vec<f64>> {
        if seq.tokens.is_empty() {
            return Err(Error::invalid("embed_tokens", "empty token stream"));
        }
        let mut acc = vec![0.0; self.dim];
        for t in &seq.tokens {
            for (a, v) in acc.iter_mut().zip(self.row(t)?) {
                *a += v;
            }
        }
        let n = seq.tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.8, beta: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::invalid(
                "loss_weights",
                format!("alpha and beta must be finite and ≥ 0, got ({}, {})", self.alpha, self.beta),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AsamConfig {
    pub dim: usize,
    pub text_dim: usize,
    pub align_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AlignParams {
    pub w_z: ParamId,
    pub w_t: ParamId,
    pub hidden: Linear,
    pub out: Linear,
}

/// Projected embeddings `u = Z·W_z`, `t = T·W_t` (both `[B, D_a]`).
#[derive(Clone, Copy, Debug)]
pub struct Projected {
    pub u: Var,
    pub t: Var,
}

impl AlignParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: AsamConfig) -> Self {
        let grp = ParamGroup::Head;
        let w_z = store.add("asam.w_z", grp, fan_in_uniform(rng, &[cfg.dim, cfg.align_dim], cfg.dim));
        let w_t = store.add("asam.w_t", grp, fan_in_uniform(rng, &[cfg.text_dim, cfg.align_dim], cfg.text_dim));
        let input = 2 * cfg.align_dim + 1;
        Self {
            w_z,
            w_t,
            hidden: Linear::new(store, rng, "asam.mlp.hidden", grp, input, cfg.hidden, true),
            out: Linear::new(store, rng, "asam.mlp.out", grp, cfg.hidden, 2, true),
        }
    }

    pub fn project(&self, g: &mut Graph, p: &Bound, z: Var, text: Var) -> Result<Projected> {
        Ok(Projected {
            u: g.matmul(z, p.var(self.w_z))?,
            t: g.matmul(text, p.var(self.w_t))?,
        })
    }

    /// Two class logits from `[u; t; cos(u, t)]`.
    pub fn classify(&self, g: &mut Graph, p: &Bound, proj: Projected) -> Result<Var> {
        let b = g.shape(proj.u)[0];
        let c = g.cosine_similarity(proj.u, proj.t)?;
        let c = g.reshape(c, &[b, 1])?;
        let x = g.concat(&[proj.u, proj.t, c], 1)?;
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, p, h)
    }

    pub fn reg_loss(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        reg_loss(g, p.var(self.w_z), p.var(self.w_t))
    }
}

/// `1 − mean_i cos(u_i, t_i)`.
pub fn align_loss(g: &mut Graph, u: Var, t: Var) -> Result<Var> {
    let c = g.cosine_similarity(u, t)?;
    let m = g.mean(c)?;
    let neg = g.neg(m)?;
    g.add_scalar(neg, 1.0)
}

/// `‖W_zᵀW_z − W_tᵀW_t‖²_F`.
pub fn reg_loss(g: &mut Graph, w_z: Var, w_t: Var) -> Result<Var> {
    let zt = g.transpose(w_z)?;
    let gz = g.matmul(zt, w_z)?;
    let tt = g.transpose(w_t)?;
    let gt = g.matmul(tt, w_t)?;
    let diff = g.sub(gz, gt)?;
    let sq = g.mul(diff, diff)?;
    g.sum(sq)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub align: Var,
    pub reg: Var,
}

/// Cross-entropy plus weighted alignment and regularization terms.
pub fn total_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    proj: Projected,
    w_z: Var,
    w_t: Var,
    weights: LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid("total_loss", format!("label {bad} outside {{0, 1}}")));
    }
    let ce = g.cross_entropy(logits, labels)?;
    let align = align_loss(g, proj.u, proj.t)?;
    let reg = reg_loss(g, w_z, w_t)?;
    let a = g.scale(align, weights.alpha)?;
    let r = g.scale(reg, weights.beta)?;
    let total = g.add(ce, a)?;
    let total = g.add(total, r)?;
    Ok(LossTerms { total, ce, align, reg })
}
