//! Minimal float64 building blocks with hand-written backward passes:
//! 2-D convolution, dense layers, and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FeatureGrid;

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named tensors. Gradients and optimizer moments
/// use the same layout as the parameters they belong to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor { name: name.into(), shape, data });
        self.tensors.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), shape: t.shape.clone(), data: vec![0.0; t.data.len()] })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// `self += scale * other` (same layout).
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} tensors", self.tensors.len()),
                got: format!("{} tensors", other.tensors.len()),
            });
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} {:?}", a.name, a.shape),
                    got: format!("{} {:?}", b.name, b.shape),
                });
            }
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.kernel) / self.stride + 1, (w + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    /// Output index range `[lo, hi)` whose input tap `o*s + k - p` lies in `[0, n)`.
    #[inline]
    fn valid_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o*s + off >= 0  ->  o >= ceil(-off / s)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= n_in - 1
        let hi_num = n_in as isize - 1 - off;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        (lo.max(0) as usize, (hi.max(0) as usize).min(n_out))
    }
}

pub fn conv2d_forward(spec: &ConvSpec, weight: &[f64], bias: &[f64], input: &FeatureGrid) -> FeatureGrid {
    debug_assert_eq!(input.channels, spec.in_ch);
    let (oh, ow) = spec.out_dims(input.height, input.width);
    let mut out = FeatureGrid::zeros(spec.out_ch, oh, ow, input.stride * spec.stride);
    let (ih, iw) = (input.height, input.width);
    let k = spec.kernel;
    let s = spec.stride;
    for co in 0..spec.out_ch {
        let oplane = &mut out.data[co * oh * ow..(co + 1) * oh * ow];
        oplane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..spec.in_ch {
            let iplane = &input.data[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..k {
                let (oy0, oy1) = spec.valid_range(ky, ih, oh);
                for kx in 0..k {
                    let wv = weight[((co * spec.in_ch + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = spec.valid_range(kx, iw, ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - spec.pad;
                        let orow = &mut oplane[oy * ow + ox0..oy * ow + ox1];
                        let ix0 = ox0 * s + kx - spec.pad;
                        if s == 1 {
                            axpy(orow, wv, &iplane[iy * iw + ix0..iy * iw + ix0 + orow.len()]);
                        } else {
                            let irow = &iplane[iy * iw..(iy + 1) * iw];
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += wv * irow[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and, when requested, the input gradient.
pub fn conv2d_backward(
    spec: &ConvSpec,
    weight: &[f64],
    input: &FeatureGrid,
    grad_out: &FeatureGrid,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let (oh, ow) = (grad_out.height, grad_out.width);
    let (ih, iw) = (input.height, input.width);
    let k = spec.kernel;
    let s = spec.stride;
    let mut gather = vec![0.0; ow];
    for co in 0..spec.out_ch {
        let gplane = &grad_out.data[co * oh * ow..(co + 1) * oh * ow];
        grad_b[co] += gplane.iter().sum::<f64>();
        for ci in 0..spec.in_ch {
            let iplane = &input.data[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..k {
                let (oy0, oy1) = spec.valid_range(ky, ih, oh);
                for kx in 0..k {
                    let widx = ((co * spec.in_ch + ci) * k + ky) * k + kx;
                    let (ox0, ox1) = spec.valid_range(kx, iw, ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let n = ox1 - ox0;
                    let ix0 = ox0 * s + kx - spec.pad;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - spec.pad;
                        let grow = &gplane[oy * ow + ox0..oy * ow + ox1];
                        if s == 1 {
                            acc += dot(grow, &iplane[iy * iw + ix0..iy * iw + ix0 + n]);
                            if let Some(gi) = grad_in.as_deref_mut() {
                                axpy(&mut gi[ci * ih * iw + iy * iw + ix0..ci * ih * iw + iy * iw + ix0 + n], wv, grow);
                            }
                        } else {
                            let irow = &iplane[iy * iw..(iy + 1) * iw];
                            for (j, g) in gather[..n].iter_mut().enumerate() {
                                *g = irow[ix0 + j * s];
                            }
                            acc += dot(grow, &gather[..n]);
                            if let Some(gi) = grad_in.as_deref_mut() {
                                let base = ci * ih * iw + iy * iw;
                                for (j, g) in grow.iter().enumerate() {
                                    gi[base + ix0 + j * s] += wv * g;
                                }
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Zero the gradient wherever the post-activation output was not positive.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, o) in grad.iter_mut().zip(output) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy on a logit, and d/dz.
#[inline]
pub fn bce_with_logit(z: f64, target: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - target)
}

/// `y = W x + b` with `W` stored row-major as `out x in`.
pub fn linear_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        *y = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
    }
}

pub fn linear_backward(w: &[f64], x: &[f64], grad_y: &[f64], grad_w: &mut [f64], grad_b: &mut [f64], grad_x: Option<&mut [f64]>) {
    let n_in = x.len();
    for (o, &g) in grad_y.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad_b[o] += g;
        axpy(&mut grad_w[o * n_in..(o + 1) * n_in], g, x);
    }
    if let Some(gx) = grad_x {
        for (o, &g) in grad_y.iter().enumerate() {
            if g != 0.0 {
                axpy(gx, g, &w[o * n_in..(o + 1) * n_in]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn update(&mut self, cfg: &AdamConfig, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut())
            .zip(self.v.tensors.iter_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i] + cfg.weight_decay * p.data[i];
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(c: usize, h: usize, w: usize, seed: u64) -> FeatureGrid {
        let mut g = FeatureGrid::zeros(c, h, w, 1);
        let mut s = seed;
        for v in g.data.iter_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5;
        }
        g
    }

    fn naive_conv(spec: &ConvSpec, w: &[f64], b: &[f64], x: &FeatureGrid) -> FeatureGrid {
        let (oh, ow) = spec.out_dims(x.height, x.width);
        let mut out = FeatureGrid::zeros(spec.out_ch, oh, ow, spec.stride);
        for co in 0..spec.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..spec.in_ch {
                        for ky in 0..spec.kernel {
                            for kx in 0..spec.kernel {
                                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                acc += w[((co * spec.in_ch + ci) * spec.kernel + ky) * spec.kernel + kx]
                                    * x.at(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        for spec in [
            ConvSpec { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, pad: 1 },
            ConvSpec { in_ch: 3, out_ch: 2, kernel: 4, stride: 4, pad: 0 },
            ConvSpec { in_ch: 2, out_ch: 2, kernel: 3, stride: 2, pad: 1 },
            ConvSpec { in_ch: 1, out_ch: 1, kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = grid(spec.in_ch, 9, 8, 3);
            let w = grid(1, 1, spec.weight_len(), 5).data;
            let b = vec![0.1; spec.out_ch];
            let fast = conv2d_forward(&spec, &w, &b, &x);
            let slow = naive_conv(&spec, &w, &b, &x);
            assert_eq!((fast.height, fast.width), (slow.height, slow.width));
            for (a, c) in fast.data.iter().zip(&slow.data) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for spec in [
            ConvSpec { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, pad: 1 },
            ConvSpec { in_ch: 3, out_ch: 2, kernel: 4, stride: 4, pad: 0 },
            ConvSpec { in_ch: 2, out_ch: 2, kernel: 3, stride: 2, pad: 1 },
        ] {
            let x = grid(spec.in_ch, 8, 8, 11);
            let w = grid(1, 1, spec.weight_len(), 7).data;
            let b = vec![0.05; spec.out_ch];
            let out = conv2d_forward(&spec, &w, &b, &x);
            let g = grid(out.channels, out.height, out.width, 13);
            // L = <conv(x), g>
            let loss = |w: &[f64], b: &[f64], x: &FeatureGrid| dot(&conv2d_forward(&spec, w, b, x).data, &g.data);
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; b.len()];
            let mut gx = vec![0.0; x.data.len()];
            conv2d_backward(&spec, &w, &x, &g, &mut gw, &mut gb, Some(&mut gx));
            let eps = 1e-6;
            for i in 0..w.len() {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[i] += eps;
                wm[i] -= eps;
                let fd = (loss(&wp, &b, &x) - loss(&wm, &b, &x)) / (2.0 * eps);
                assert!((fd - gw[i]).abs() < 1e-7, "w[{i}] {fd} vs {}", gw[i]);
            }
            for i in 0..x.data.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data[i] += eps;
                xm.data[i] -= eps;
                let fd = (loss(&w, &b, &xp) - loss(&w, &b, &xm)) / (2.0 * eps);
                assert!((fd - gx[i]).abs() < 1e-7);
            }
            let sum_g: f64 = (0..spec.out_ch).map(|c| g.plane(c).iter().sum::<f64>()).sum();
            assert!((gb.iter().sum::<f64>() - sum_g).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_values() {
        let (l, g) = bce_with_logit(0.0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g + 0.5).abs() < 1e-15);
        assert!(bce_with_logit(40.0, 1.0).0 < 1e-15);
        assert!(bce_with_logit(-40.0, 0.0).0 < 1e-15);
        assert!(bce_with_logit(-800.0, 1.0).0.is_finite());
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = ParamSet::default();
        p.push("w", vec![2], vec![1.0, -1.0]);
        let mut g = p.zeros_like();
        g.tensors[0].data = vec![0.5, -0.5];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        st.update(&cfg, &mut p, &g);
        assert!((p.tensors[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p.tensors[0].data[1] + 0.9).abs() < 1e-6);
    }
}
