//! Parameterised building blocks shared by the encoder branches.

use rand::Rng;
use rand_distr::Uniform;

use crate::error::Result;
use crate::numcore::{Bound, Conv2dOpts, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Uniform(−1/√fan_in, 1/√fan_in) fill.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(dist)).collect()).expect("positive extents")
}

/// `x · W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), group, fan_in_uniform(rng, &[fan_in, fan_out], fan_in));
        let b = bias.then(|| store.add(format!("{name}.bias"), group, fan_in_uniform(rng, &[fan_out], fan_in)));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

/// 2-D convolution weights `[out, in/groups, k, k]` plus bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub opts: Conv2dOpts,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: Conv2dOpts,
    ) -> Self {
        let fan_in = cin / opts.groups * kernel * kernel;
        let w = store.add(
            format!("{name}.weight"),
            group,
            fan_in_uniform(rng, &[cout, cin / opts.groups, kernel, kernel], fan_in),
        );
        let b = store.add(format!("{name}.bias"), group, fan_in_uniform(rng, &[cout], fan_in));
        Self { w, b, opts }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.opts)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}
