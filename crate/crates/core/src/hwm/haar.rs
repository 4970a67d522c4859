//! Orthonormal 2-D Haar analysis/synthesis on NCHW tensors.
//!
//! One analysis level maps `[N, C, h, w]` to `[N, 4C, h/2, w/2]` with the
//! channel blocks ordered LL, LH, HL, HH. For a 2×2 block `[a b; c d]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2     LH = (a − b + c − d) / 2
//! HL = (a + b − c − d) / 2     HH = (a − b − c + d) / 2
//! ```
//!
//! The transform matrix is orthonormal and symmetric, so synthesis applies
//! the same butterfly and the backward pass of analysis is synthesis.

use crate::error::{Error, Result};
use crate::numcore::{CustomOp, Graph, Tensor, Var};

pub const SUBBANDS: [&str; 4] = ["LL", "LH", "HL", "HH"];

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid(op, format!("expected NCHW tensor, got {shape:?}"))),
    }
}

#[inline]
fn butterfly(a: f64, b: f64, c: f64, d: f64) -> [f64; 4] {
    [
        0.5 * (a + b + c + d),
        0.5 * (a - b + c - d),
        0.5 * (a + b - c - d),
        0.5 * (a - b - c + d),
    ]
}

fn analysis_raw(src: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; src.len()];
    for s in 0..n {
        for ch in 0..c {
            let plane = &src[(s * c + ch) * h * w..][..h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let a = plane[2 * i * w + 2 * j];
                    let b = plane[2 * i * w + 2 * j + 1];
                    let cc = plane[(2 * i + 1) * w + 2 * j];
                    let d = plane[(2 * i + 1) * w + 2 * j + 1];
                    for (band, v) in butterfly(a, b, cc, d).into_iter().enumerate() {
                        out[((s * 4 * c + band * c + ch) * oh + i) * ow + j] = v;
                    }
                }
            }
        }
    }
    out
}

fn synthesis_raw(src: &[f64], [n, c4, oh, ow]: [usize; 4]) -> Vec<f64> {
    let c = c4 / 4;
    let (h, w) = (2 * oh, 2 * ow);
    let mut out = vec![0.0; src.len()];
    for s in 0..n {
        for ch in 0..c {
            let plane = &mut out[(s * c + ch) * h * w..][..h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let at = |band: usize| src[((s * c4 + band * c + ch) * oh + i) * ow + j];
                    let [a, b, cc, d] = butterfly(at(0), at(1), at(2), at(3));
                    plane[2 * i * w + 2 * j] = a;
                    plane[2 * i * w + 2 * j + 1] = b;
                    plane[(2 * i + 1) * w + 2 * j] = cc;
                    plane[(2 * i + 1) * w + 2 * j + 1] = d;
                }
            }
        }
    }
    out
}

/// One analysis level: `[N, C, h, w] → [N, 4C, h/2, w/2]`.
pub fn haar_dwt_level(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4("haar_dwt_level", x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "haar_dwt_level",
            format!("spatial extents {h}x{w} must be even; pad the input first"),
        ));
    }
    Tensor::new(&[n, 4 * c, h / 2, w / 2], analysis_raw(x.data(), [n, c, h, w]))
}

/// Inverse of [`haar_dwt_level`].
pub fn haar_idwt_level(bands: &Tensor) -> Result<Tensor> {
    let [n, c4, oh, ow] = dims4("haar_idwt_level", bands.shape())?;
    if c4 % 4 != 0 {
        return Err(Error::invalid("haar_idwt_level", format!("channel count {c4} not a multiple of 4")));
    }
    Tensor::new(&[n, c4 / 4, 2 * oh, 2 * ow], synthesis_raw(bands.data(), [n, c4, oh, ow]))
}

/// Selects channel block `band` (0 = LL … 3 = HH) from `[N, 4C, h, w]`.
pub fn subband(bands: &Tensor, band: usize) -> Result<Tensor> {
    let [n, c4, h, w] = dims4("subband", bands.shape())?;
    if band >= 4 || c4 % 4 != 0 {
        return Err(Error::invalid("subband", format!("band {band} of {c4} channels")));
    }
    let c = c4 / 4;
    let mut out = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        let start = (s * c4 + band * c) * h * w;
        out.extend_from_slice(&bands.data()[start..start + c * h * w]);
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Per-level subband stacks; level `s` (0-based) has extent `H/2^(s+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    pub levels: Vec<Tensor>,
}

impl WaveletPyramid {
    pub fn deepest_ll(&self) -> Result<Tensor> {
        subband(self.levels.last().expect("at least one level"), 0)
    }

    /// Energy of all detail bands of every level plus the deepest LL.
    pub fn retained_energy(&self) -> Result<f64> {
        let mut e = self.deepest_ll()?.sum_squares();
        for lvl in &self.levels {
            for band in 1..4 {
                e += subband(lvl, band)?.sum_squares();
            }
        }
        Ok(e)
    }
}

pub fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    let m = 1usize << levels;
    if levels == 0 || h % m != 0 || w % m != 0 {
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        return Err(Error::invalid(
            "multiscale_decompose",
            format!(
                "{h}x{w} must be divisible by 2^{levels} = {m}; pad by {ph} rows and {pw} columns (see reflect_pad_to_multiple)"
            ),
        ));
    }
    Ok(())
}

/// Recursive analysis on the LL band, keeping every level's four bands.
pub fn multiscale_decompose(x: &Tensor, levels: usize) -> Result<WaveletPyramid> {
    let [_, _, h, w] = dims4("multiscale_decompose", x.shape())?;
    check_divisible(h, w, levels)?;
    let mut out = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for _ in 0..levels {
        let bands = haar_dwt_level(&cur)?;
        cur = subband(&bands, 0)?;
        out.push(bands);
    }
    Ok(WaveletPyramid { levels: out })
}

/// Rebuilds the input from the deepest level's bands and the detail bands
/// of every level.
pub fn reconstruct(pyr: &WaveletPyramid) -> Result<Tensor> {
    let mut cur = haar_idwt_level(pyr.levels.last().ok_or_else(|| Error::invalid("reconstruct", "empty pyramid"))?)?;
    for lvl in pyr.levels.iter().rev().skip(1) {
        let [n, c4, h, w] = dims4("reconstruct", lvl.shape())?;
        let c = c4 / 4;
        if cur.shape() != [n, c, h, w] {
            return Err(Error::shape("reconstruct", cur.shape(), lvl.shape()));
        }
        let mut bands = lvl.clone();
        for s in 0..n {
            let start = s * c4 * h * w;
            bands.data_mut()[start..start + c * h * w].copy_from_slice(&cur.data()[s * c * h * w..(s + 1) * c * h * w]);
        }
        cur = haar_idwt_level(&bands)?;
    }
    Ok(cur)
}

/// Padding applied by [`reflect_pad_to_multiple`], as (top, bottom, left, right).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

fn symmetric(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Symmetric (edge-repeating) reflect padding so both spatial extents
/// become multiples of `multiple`, split as evenly as possible.
pub fn reflect_pad_to_multiple(x: &Tensor, multiple: usize) -> Result<(Tensor, Padding)> {
    let [n, c, h, w] = dims4("reflect_pad", x.shape())?;
    let (ph, pw) = ((multiple - h % multiple) % multiple, (multiple - w % multiple) % multiple);
    let pad = Padding {
        top: ph / 2,
        bottom: ph - ph / 2,
        left: pw / 2,
        right: pw - pw / 2,
    };
    let (oh, ow) = (h + ph, w + pw);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for i in 0..oh {
            let si = symmetric(i as isize - pad.top as isize, h);
            for j in 0..ow {
                let sj = symmetric(j as isize - pad.left as isize, w);
                out[(p * oh + i) * ow + j] = x.data()[(p * h + si) * w + sj];
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, pad))
}

pub fn crop(x: &Tensor, pad: Padding) -> Result<Tensor> {
    let [n, c, h, w] = dims4("crop", x.shape())?;
    let (oh, ow) = (h - pad.top - pad.bottom, w - pad.left - pad.right);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for i in 0..oh {
            let row = (p * h + i + pad.top) * w + pad.left;
            out.extend_from_slice(&x.data()[row..row + ow]);
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

struct HaarAnalysisOp {
    out_shape: [usize; 4],
}

impl CustomOp for HaarAnalysisOp {
    fn name(&self) -> &'static str {
        "haar_dwt"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(synthesis_raw(grad, self.out_shape))]
    }
}

/// Differentiable single analysis level.
pub fn haar_level(g: &mut Graph, x: Var) -> Result<Var> {
    let out = haar_dwt_level(g.value(x))?;
    let out_shape = dims4("haar_dwt", out.shape())?;
    g.custom(Box::new(HaarAnalysisOp { out_shape }), &[x], out)
}
