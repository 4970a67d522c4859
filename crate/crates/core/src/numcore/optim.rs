use std::collections::BTreeMap;

use super::params::{ParamGroup, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Moment buffers and per-parameter step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub groups: BTreeMap<ParamGroup, GroupHyper>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamWConfig, groups: BTreeMap<ParamGroup, GroupHyper>) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        Self {
            config,
            groups,
            m: zeros(()),
            v: zeros(()),
            steps: vec![0; store.len()],
        }
    }

    pub fn steps(&self, index: usize) -> u64 {
        self.steps[index]
    }

    /// First and second moment buffers of parameter `index`.
    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.m[index], &self.v[index])
    }

    pub fn restore(&mut self, index: usize, m: &[f64], v: &[f64], steps: u64) -> Result<()> {
        if m.len() != self.m[index].len() || v.len() != self.v[index].len() {
            return Err(Error::shape("optim_restore", &[self.m[index].len()], &[m.len(), v.len()]));
        }
        self.m[index].copy_from_slice(m);
        self.v[index].copy_from_slice(v);
        self.steps[index] = steps;
        Ok(())
    }
}

/// One decoupled-weight-decay Adam update of a single tensor.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamWConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] *= 1.0 - lr * weight_decay;
        param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Applies one AdamW step to every parameter that has a gradient. Each
/// group's rate is its base rate times `lr_scale`. Parameters with `None`
/// gradients (frozen or buffers) are left bit-identical.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut OptimState,
    lr_scale: f64,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::shape("adamw_step", &[store.len()], &[grads.len()]));
    }
    for ((id, p), grad) in store.iter_mut().zip(grads) {
        let Some(grad) = grad else { continue };
        if grad.shape() != p.value.shape() {
            return Err(Error::shape("adamw_step", p.value.shape(), grad.shape()));
        }
        let Some(h) = state.groups.get(&p.group).copied() else {
            continue;
        };
        let i = id.index();
        state.steps[i] += 1;
        adamw_update(
            p.value.data_mut(),
            grad.data(),
            &mut state.m[i],
            &mut state.v[i],
            state.steps[i],
            h.lr * lr_scale,
            h.weight_decay,
            &state.config,
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut param = [p];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut param, &[g], &mut m, &mut v, 1, lr, wd, &AdamWConfig::default());
        param[0]
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        assert_eq!(single(0.7, 0.0, 1e-3, 0.0), 0.7);
    }

    #[test]
    fn first_step_closed_form() {
        // after bias correction m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + ε)
        for &g in &[0.3, -2.5, 1e-3] {
            let got = single(1.0, g, 1e-2, 0.0);
            let want = 1.0 - 1e-2 * g / (g.abs() + 1e-8);
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn decay_only_shrinks() {
        let got = single(2.0, 0.0, 1e-2, 1e-1);
        assert_eq!(got, 2.0 * (1.0 - 1e-2 * 1e-1));
    }

    #[test]
    fn step_is_deterministic_and_checks_shapes() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Head, Tensor::from_vec(vec![0.1, -0.2, 0.3]));
        let groups = BTreeMap::from([(ParamGroup::Head, GroupHyper { lr: 1e-2, weight_decay: 1e-4 })]);
        let mut s1 = OptimState::new(&store, AdamWConfig::default(), groups.clone());
        let mut s2 = OptimState::new(&store, AdamWConfig::default(), groups);
        let mut a = store.clone();
        let mut b = store.clone();
        let g = vec![Some(Tensor::from_vec(vec![0.5, -1.0, 2.0]))];
        for _ in 0..3 {
            adamw_step(&mut a, &g, &mut s1, 0.7).unwrap();
            adamw_step(&mut b, &g, &mut s2, 0.7).unwrap();
        }
        let bits = |s: &ParamStore| s.iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let bad = vec![Some(Tensor::zeros(&[2]))];
        assert!(adamw_step(&mut a, &bad, &mut s1, 1.0).is_err());
    }
}
