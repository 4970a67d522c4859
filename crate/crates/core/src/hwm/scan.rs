use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numcore::{Bound, CustomOp, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Diagonal selective state-space recurrence, fused as one tape node.
///
/// Inputs: `x, dt: [B, L, D]`, `a: [D, n]`, `b, c: [B, L, n]`. Per batch
/// entry and channel `d` the state `h ∈ ℝⁿ` evolves as
/// `h ← exp(dt·a_d) ⊙ h + dt·x·b` and the output is `y = c · h`.
struct ScanOp {
    dims: [usize; 4],
    states: Vec<f64>,
}

fn scan_forward(x: &[f64], dt: &[f64], a: &[f64], b: &[f64], c: &[f64], [bs, l, d, n]: [usize; 4]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut y = vec![0.0; bs * l * d];
    let mut states = vec![0.0; bs * l * d * n];
    let mut h = vec![0.0; n];
    for s in 0..bs {
        for ch in 0..d {
            h.fill(0.0);
            let ad = &a[ch * n..(ch + 1) * n];
            for t in 0..l {
                let i = (s * l + t) * d + ch;
                let (bt, ct) = (&b[(s * l + t) * n..][..n], &c[(s * l + t) * n..][..n]);
                let mut acc = 0.0;
                for k in 0..n {
                    h[k] = (dt[i] * ad[k]).exp() * h[k] + dt[i] * bt[k] * x[i];
                    acc += ct[k] * h[k];
                }
                if !acc.is_finite() || h.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "selective_scan" });
                }
                y[i] = acc;
                states[i * n..(i + 1) * n].copy_from_slice(&h);
            }
        }
    }
    Ok((y, states))
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let [bs, l, d, n] = self.dims;
        let (x, dt, a, b, c) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let mut gx = vec![0.0; x.len()];
        let mut gdt = vec![0.0; dt.len()];
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; b.len()];
        let mut gc = vec![0.0; c.len()];
        let mut gh = vec![0.0; n];
        let hs = &self.states;
        for s in 0..bs {
            for ch in 0..d {
                gh.fill(0.0);
                let ad = &a[ch * n..(ch + 1) * n];
                for t in (0..l).rev() {
                    let i = (s * l + t) * d + ch;
                    let row = (s * l + t) * n;
                    let h_t = &hs[i * n..(i + 1) * n];
                    for k in 0..n {
                        // gh currently holds decay_{t+1} ⊙ dL/dh_{t+1}.
                        gc[row + k] += gy[i] * h_t[k];
                        gh[k] += c[row + k] * gy[i];
                    }
                    for k in 0..n {
                        let decay = (dt[i] * ad[k]).exp();
                        let h_prev = if t == 0 { 0.0 } else { hs[(i - d) * n + k] };
                        let g_decay = gh[k] * h_prev * decay;
                        gdt[i] += g_decay * ad[k] + gh[k] * b[row + k] * x[i];
                        ga[ch * n + k] += g_decay * dt[i];
                        gb[row + k] += gh[k] * dt[i] * x[i];
                        gx[i] += gh[k] * dt[i] * b[row + k];
                        gh[k] *= decay;
                    }
                }
            }
        }
        vec![Some(gx), Some(gdt), Some(ga), Some(gb), Some(gc)]
    }
}

/// Differentiable fused recurrence; see [`ScanOp`] for the argument layout.
pub fn selective_scan_core(g: &mut Graph, x: Var, dt: Var, a: Var, b: Var, c: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let an = g.shape(a).to_vec();
    if xs.len() != 3 || an.len() != 2 || an[0] != xs[2] {
        return Err(Error::shape("selective_scan", &xs, &an));
    }
    let dims = [xs[0], xs[1], xs[2], an[1]];
    if g.shape(dt) != xs.as_slice() {
        return Err(Error::shape("selective_scan", &xs, g.shape(dt)));
    }
    for v in [b, c] {
        if g.shape(v) != [dims[0], dims[1], dims[3]] {
            return Err(Error::shape("selective_scan", &[dims[0], dims[1], dims[3]], g.shape(v)));
        }
    }
    let (y, states) = scan_forward(
        g.value(x).data(),
        g.value(dt).data(),
        g.value(a).data(),
        g.value(b).data(),
        g.value(c).data(),
        dims,
    )?;
    let out = Tensor::new(&[dims[0], dims[1], dims[2]], y)?;
    g.custom(Box::new(ScanOp { dims, states }), &[x, dt, a, b, c], out)
}

/// Selective-scan block: input-dependent step, input/readout projections,
/// negative-real diagonal dynamics, skip connection and a sigmoid gate.
#[derive(Clone, Copy, Debug)]
pub struct SsmBlock {
    pub step: Linear,
    pub input_proj: Linear,
    pub readout: Linear,
    /// `log(−A)`, `[D, n]`.
    pub a_log: ParamId,
    pub skip: ParamId,
    pub gate: Linear,
    pub dim: usize,
    pub state: usize,
}

impl SsmBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, state: usize) -> Self {
        let grp = ParamGroup::Backbone;
        let step = Linear::new(store, rng, &format!("{name}.step"), grp, dim, dim, true);
        let input_proj = Linear::new(store, rng, &format!("{name}.in"), grp, dim, state, true);
        let readout = Linear::new(store, rng, &format!("{name}.out"), grp, dim, state, true);
        // |A| log-spaced over [1e-3, 1] along the state axis.
        let a_log: Vec<f64> = (0..dim)
            .flat_map(|_| {
                (0..state).map(move |k| {
                    let frac = if state == 1 { 0.0 } else { k as f64 / (state - 1) as f64 };
                    1e-3f64.ln() * (1.0 - frac)
                })
            })
            .collect();
        let a_log = store.add(format!("{name}.a_log"), grp, Tensor::new(&[dim, state], a_log).expect("shape"));
        let skip = store.add(format!("{name}.skip"), grp, Tensor::ones(&[dim]));
        let gate = Linear::new(store, rng, &format!("{name}.gate"), grp, dim, dim, true);
        Self {
            step,
            input_proj,
            readout,
            a_log,
            skip,
            gate,
            dim,
            state,
        }
    }

    /// `x: [B, L, D] → [B, L, D]`, causal in token order.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let dt = self.step.forward(g, p, x)?;
        let dt = g.softplus(dt)?;
        let bm = self.input_proj.forward(g, p, x)?;
        let cm = self.readout.forward(g, p, x)?;
        let neg_a = g.exp(p.var(self.a_log))?;
        let a = g.neg(neg_a)?;
        let core = selective_scan_core(g, x, dt, a, bm, cm)?;
        let skip = g.mul(x, p.var(self.skip))?;
        let y = g.add(core, skip)?;
        let gate = self.gate.forward(g, p, x)?;
        let gate = g.sigmoid(gate)?;
        g.mul(y, gate)
    }
}
