//! Dense tensor primitives for the EPW networks: same-padding convolution,
//! 2x2 max pooling, 2x2 stride-2 transpose convolution, and channel concat,
//! each with its hand-derived backward pass.

use crate::real::Real;

/// (channels, height, width) tensor, row-major within each channel plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T> {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(ch: usize, h: usize, w: usize) -> Self {
        Self { ch, h, w, data: vec![T::zero(); ch * h * w] }
    }

    pub fn from_data(ch: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), ch * h * w);
        Self { ch, h, w, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

/// Same-padding stride-1 convolution with a k x k kernel (k odd). Weights are
/// laid out `[out_ch][in_ch][k][k]`, output gets `bias` then optional ReLU.
pub(crate) fn conv2d<T: Real>(
    x: &Tensor3<T>,
    w: &[T],
    bias: &[T],
    out_ch: usize,
    k: usize,
    relu: bool,
) -> Tensor3<T> {
    let (in_ch, h, wd) = (x.ch, x.h, x.w);
    debug_assert_eq!(w.len(), out_ch * in_ch * k * k);
    let pad = k / 2;
    let plane = h * wd;
    let mut out = Tensor3::zeros(out_ch, h, wd);
    for oc in 0..out_ch {
        let off = oc * plane;
        out.data[off..off + plane].fill(bias[oc]);
        for ic in 0..in_ch {
            let xp = x.plane(ic);
            for ky in 0..k {
                let y_lo = pad.saturating_sub(ky);
                let y_hi = (h + pad - ky).min(h);
                for kx in 0..k {
                    let wv = w[((oc * in_ch + ic) * k + ky) * k + kx];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (wd + pad - kx).min(wd);
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let dst = &mut out.data[off + y * wd + x_lo..off + y * wd + x_hi];
                        let src = &xp[iy * wd + x_lo + kx - pad..iy * wd + x_hi + kx - pad];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
        if relu {
            for v in &mut out.data[off..off + plane] {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d`. `out` is the forward output (post-ReLU) used for
/// the activation mask. Returns `(dx, dw, db)`.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor3<T>,
    w: &[T],
    out: &Tensor3<T>,
    grad_out: &Tensor3<T>,
    out_ch: usize,
    k: usize,
    relu: bool,
) -> (Tensor3<T>, Vec<T>, Vec<T>) {
    let (in_ch, h, wd) = (x.ch, x.h, x.w);
    let pad = k / 2;
    let plane = h * wd;
    let g = mask_relu(out, grad_out, relu);
    let mut dx = Tensor3::zeros(in_ch, h, wd);
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); out_ch];
    for oc in 0..out_ch {
        let gp = g.plane(oc);
        db[oc] = gp.iter().copied().sum();
        for ic in 0..in_ch {
            let xp = x.plane(ic);
            let dxp_off = ic * plane;
            for ky in 0..k {
                let y_lo = pad.saturating_sub(ky);
                let y_hi = (h + pad - ky).min(h);
                for kx in 0..k {
                    let widx = ((oc * in_ch + ic) * k + ky) * k + kx;
                    let wv = w[widx];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (wd + pad - kx).min(wd);
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let grow = &gp[y * wd + x_lo..y * wd + x_hi];
                        let xrow = &xp[iy * wd + x_lo + kx - pad..iy * wd + x_hi + kx - pad];
                        let dxrow = &mut dx.data
                            [dxp_off + iy * wd + x_lo + kx - pad..dxp_off + iy * wd + x_hi + kx - pad];
                        for ((gv, xv), dv) in grow.iter().zip(xrow).zip(dxrow) {
                            acc += *gv * *xv;
                            *dv += wv * *gv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

fn mask_relu<T: Real>(out: &Tensor3<T>, grad_out: &Tensor3<T>, relu: bool) -> Tensor3<T> {
    if !relu {
        return grad_out.clone();
    }
    let mut g = grad_out.clone();
    for (gv, ov) in g.data.iter_mut().zip(&out.data) {
        if *ov <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// 2x2 stride-2 max pooling. Returns the pooled tensor and, per output cell,
/// the linear index of the winning input cell within its plane (first-found
/// on ties, scan order).
pub(crate) fn maxpool2<T: Real>(x: &Tensor3<T>) -> (Tensor3<T>, Vec<u32>) {
    let (ch, h, w) = (x.ch, x.h, x.w);
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(ch, oh, ow);
    let mut argmax = vec![0u32; ch * oh * ow];
    for c in 0..ch {
        let xp = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dxx in 0..2 {
                        let i = (2 * oy + dy) * w + 2 * ox + dxx;
                        if xp[i] > best {
                            best = xp[i];
                            best_i = i;
                        }
                    }
                }
                out.set(c, oy, ox, best);
                argmax[(c * oh + oy) * ow + ox] = best_i as u32;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool2_backward<T: Real>(
    grad_out: &Tensor3<T>,
    argmax: &[u32],
    in_dims: (usize, usize, usize),
) -> Tensor3<T> {
    let (ch, h, w) = in_dims;
    let mut dx = Tensor3::zeros(ch, h, w);
    let plane = h * w;
    for c in 0..ch {
        let gp = grad_out.plane(c);
        for (i, &g) in gp.iter().enumerate() {
            let src = argmax[c * gp.len() + i] as usize;
            dx.data[c * plane + src] += g;
        }
    }
    dx
}

/// 2x2 stride-2 transpose convolution doubling both spatial dims. Weights are
/// laid out `[in_ch][out_ch][2][2]`.
pub(crate) fn tconv2<T: Real>(
    x: &Tensor3<T>,
    w: &[T],
    bias: &[T],
    out_ch: usize,
    relu: bool,
) -> Tensor3<T> {
    let (in_ch, h, wd) = (x.ch, x.h, x.w);
    debug_assert_eq!(w.len(), in_ch * out_ch * 4);
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = Tensor3::zeros(out_ch, oh, ow);
    for oc in 0..out_ch {
        let off = oc * oh * ow;
        out.data[off..off + oh * ow].fill(bias[oc]);
        for ic in 0..in_ch {
            let xp = x.plane(ic);
            for dy in 0..2 {
                for dxx in 0..2 {
                    let wv = w[(ic * out_ch + oc) * 4 + dy * 2 + dxx];
                    for y in 0..h {
                        let orow = off + (2 * y + dy) * ow + dxx;
                        let xrow = &xp[y * wd..(y + 1) * wd];
                        for (xi, &xv) in xrow.iter().enumerate() {
                            out.data[orow + 2 * xi] += wv * xv;
                        }
                    }
                }
            }
        }
        if relu {
            for v in &mut out.data[off..off + oh * ow] {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
    }
    out
}

pub(crate) fn tconv2_backward<T: Real>(
    x: &Tensor3<T>,
    w: &[T],
    out: &Tensor3<T>,
    grad_out: &Tensor3<T>,
    out_ch: usize,
    relu: bool,
) -> (Tensor3<T>, Vec<T>, Vec<T>) {
    let (in_ch, h, wd) = (x.ch, x.h, x.w);
    let ow = 2 * wd;
    let g = mask_relu(out, grad_out, relu);
    let mut dx = Tensor3::zeros(in_ch, h, wd);
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); out_ch];
    for oc in 0..out_ch {
        let gp = g.plane(oc);
        db[oc] = gp.iter().copied().sum();
        for ic in 0..in_ch {
            let xp = x.plane(ic);
            let dxp_off = ic * h * wd;
            for dy in 0..2 {
                for dxx in 0..2 {
                    let widx = (ic * out_ch + oc) * 4 + dy * 2 + dxx;
                    let wv = w[widx];
                    let mut acc = T::zero();
                    for y in 0..h {
                        let grow = &gp[(2 * y + dy) * ow + dxx..];
                        let xrow = &xp[y * wd..(y + 1) * wd];
                        for (xi, &xv) in xrow.iter().enumerate() {
                            let gv = grow[2 * xi];
                            acc += gv * xv;
                            dx.data[dxp_off + y * wd + xi] += wv * gv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Stack `a`'s channels above `b`'s.
pub(crate) fn concat<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> Tensor3<T> {
    debug_assert!(a.h == b.h && a.w == b.w);
    let mut data = Vec::with_capacity((a.ch + b.ch) * a.h * a.w);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor3::from_data(a.ch + b.ch, a.h, a.w, data)
}

/// Split a gradient of `concat(a, b)` back into the two parts.
pub(crate) fn split<T: Real>(g: &Tensor3<T>, a_ch: usize) -> (Tensor3<T>, Tensor3<T>) {
    let plane = g.h * g.w;
    let ga = Tensor3::from_data(a_ch, g.h, g.w, g.data[..a_ch * plane].to_vec());
    let gb = Tensor3::from_data(g.ch - a_ch, g.h, g.w, g.data[a_ch * plane..].to_vec());
    (ga, gb)
}
