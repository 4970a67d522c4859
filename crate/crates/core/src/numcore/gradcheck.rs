//! Central finite-difference verification of reverse-mode gradients.
//!
//! A stencil whose ±step evaluations take a different branch at any relu
//! than the base point (including inputs sitting exactly at 0) is skipped
//! and counted rather than compared: the function is not differentiable
//! there.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOpts {
    pub step: f64,
    pub tol: f64,
    /// Magnitudes below this are compared in absolute terms.
    pub floor: f64,
    /// Sample at most this many entries per leaf (all entries when `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_entries: None,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub leaves: Vec<LeafReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_error < self.tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `build` with central differences for
/// every named leaf. `build` must be a pure function of the leaf values.
pub fn grad_check<F>(build: F, leaves: &[(String, Tensor)], opts: GradCheckOpts) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let l = g.value(loss).item();
        if !l.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok((l, g.kink_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let base_sig = g.kink_signature();
    let mut grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, (name, t)) in leaves.iter().enumerate() {
        let analytic = grads
            .take(vars[li])
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < t.len() => {
                let mut e = sample(&mut rng, t.len(), k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..t.len()).collect(),
        };
        let mut rep = LeafReport {
            name: name.clone(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for &e in &entries {
            let orig = t.data()[e];
            values[li].data_mut()[e] = orig + opts.step;
            let (lp, sp) = eval(&values)?;
            values[li].data_mut()[e] = orig - opts.step;
            let (lm, sm) = eval(&values)?;
            values[li].data_mut()[e] = orig;
            if sp != base_sig || sm != base_sig {
                rep.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let a = analytic.data()[e];
            rep.checked += 1;
            rep.max_abs_error = rep.max_abs_error.max((a - numeric).abs());
            rep.max_rel_error = rep.max_rel_error.max(relative_error(a, numeric, opts.floor));
        }
        reports.push(rep);
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        leaves: reports,
    })
}
