//! Forward and backward kernels. The tape decides when to call them.

use super::{Real, Tensor4};

/// How a same-size convolution fills taps that fall outside the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Out-of-bounds taps read zero.
    #[default]
    Zero,
    /// Out-of-bounds taps read the nearest in-bounds pixel.
    Replicate,
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Output columns `ox` whose tap `kj` lands inside the row, and the
    /// matching input offset. Only meaningful for zero padding.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let pw = self.kw / 2;
        let lo = pw.saturating_sub(kj);
        let hi = (self.w + pw).saturating_sub(kj).min(self.w);
        (lo, hi.max(lo))
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Unfold one sample `[cin, h, w]` into `cols[cin·kh·kw, h·w]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, hw) = (g.h, g.w, g.hw());
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    for ci in 0..g.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * hw..][..hw];
                match g.padding {
                    Padding::Zero => {
                        let (lo, hi) = g.valid_cols(kj);
                        for oy in 0..h {
                            let out = &mut row[oy * w..(oy + 1) * w];
                            let iy = oy as isize + ki as isize - ph as isize;
                            if iy < 0 || iy >= h as isize || lo >= hi {
                                out.fill(T::zero());
                                continue;
                            }
                            let src = &plane[iy as usize * w..];
                            out[..lo].fill(T::zero());
                            out[hi..].fill(T::zero());
                            let shift = lo + kj - pw;
                            out[lo..hi].copy_from_slice(&src[shift..shift + (hi - lo)]);
                        }
                    }
                    Padding::Replicate => {
                        for oy in 0..h {
                            let iy = clamp_index(oy as isize + ki as isize - ph as isize, h);
                            let src = &plane[iy * w..(iy + 1) * w];
                            for ox in 0..w {
                                row[oy * w + ox] = src[clamp_index(ox as isize + kj as isize - pw as isize, w)];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back onto `dx`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, hw) = (g.h, g.w, g.hw());
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    for ci in 0..g.cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * hw..][..hw];
                match g.padding {
                    Padding::Zero => {
                        let (lo, hi) = g.valid_cols(kj);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..h {
                            let iy = oy as isize + ki as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let shift = lo + kj - pw;
                            let dst = &mut plane[iy as usize * w + shift..][..hi - lo];
                            for (d, &s) in dst.iter_mut().zip(&row[oy * w + lo..oy * w + hi]) {
                                *d += s;
                            }
                        }
                    }
                    Padding::Replicate => {
                        for oy in 0..h {
                            let iy = clamp_index(oy as isize + ki as isize - ph as isize, h);
                            for ox in 0..w {
                                let ix = clamp_index(ox as isize + kj as isize - pw as isize, w);
                                plane[iy * w + ix] += row[oy * w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geom<T: Real>(x: &Tensor4<T>, weight: &Tensor4<T>, padding: Padding) -> ConvGeom {
    let [_, cin, h, w] = x.dims();
    let [_, _, kh, kw] = weight.dims();
    ConvGeom { cin, h, w, kh, kw, padding }
}

/// Same-size cross-correlation plus per-channel bias.
pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
    padding: Padding,
) -> Tensor4<T> {
    let [n, _, h, w] = x.dims();
    let cout = weight.dims()[0];
    let g = geom(x, weight, padding);
    let (k, hw) = (g.k(), g.hw());

    let mut out = Tensor4::zeros([n, cout, h, w]);
    let mut cols = vec![T::zero(); k * hw];
    for s in 0..n {
        im2col(x.sample(s), &g, &mut cols);
        let y = &mut out.data_mut()[s * cout * hw..(s + 1) * cout * hw];
        for (co, plane) in y.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias.data()[co]);
        }
        T::gemm(cout, k, hw, T::one(), (weight.data(), k, 1), (&cols, hw, 1), T::one(), (y, hw, 1));
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weight: Tensor4<T>,
    pub bias: Tensor4<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    dy: &Tensor4<T>,
    padding: Padding,
    need_input: bool,
) -> ConvGrads<T> {
    let [n, _, _, _] = x.dims();
    let cout = weight.dims()[0];
    let g = geom(x, weight, padding);
    let (k, hw) = (g.k(), g.hw());

    let mut dw = Tensor4::zeros(weight.dims());
    let mut db = Tensor4::zeros([1, cout, 1, 1]);
    let mut dx = need_input.then(|| Tensor4::zeros(x.dims()));
    let mut cols = vec![T::zero(); k * hw];
    let chw_in = g.cin * hw;

    for s in 0..n {
        let dys = dy.sample(s);
        im2col(x.sample(s), &g, &mut cols);
        // dW += dY · colsᵀ
        T::gemm(cout, hw, k, T::one(), (dys, hw, 1), (&cols, 1, hw), T::one(), (dw.data_mut(), k, 1));
        for (co, plane) in dys.chunks_exact(hw).enumerate() {
            db.data_mut()[co] += plane.iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dY, reusing the column buffer.
            T::gemm(k, cout, hw, T::one(), (weight.data(), 1, k), (dys, hw, 1), T::zero(), (&mut cols, hw, 1));
            col2im(&cols, &g, &mut dx.data_mut()[s * chw_in..(s + 1) * chw_in]);
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

/// 2×2 stride-2 max pooling. Returns the output and, per output element,
/// the flat input index of the winning element (first in row-major order on ties).
pub(crate) fn maxpool2_forward<T: Real>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<u32>) {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let xd = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out.data_mut()[o] = xd[best];
                argmax[o] = best as u32;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool2_backward<T: Real>(in_dims: [usize; 4], argmax: &[u32], dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(in_dims);
    for (&src, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[src as usize] += g;
    }
    dx
}

pub(crate) fn upsample2_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let row = &mut dst[2 * y * ow..(2 * y + 1) * ow];
            for (xcol, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                row[2 * xcol] = v;
                row[2 * xcol + 1] = v;
            }
            dst.copy_within(2 * y * ow..(2 * y + 1) * ow, (2 * y + 1) * ow);
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(in_dims: [usize; 4], dy: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = in_dims;
    let ow = 2 * w;
    let mut dx = Tensor4::zeros(in_dims);
    let g = dy.data();
    for p in 0..n * c {
        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for xcol in 0..w {
                let t = 2 * y * ow + 2 * xcol;
                dx.data_mut()[(p * h + y) * w + xcol] = gp[t] + gp[t + 1] + gp[t + ow] + gp[t + ow + 1];
            }
        }
    }
    dx
}

pub(crate) fn concat_forward<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Tensor4<T> {
    let [n, ca, h, w] = a.dims();
    let cb = b.dims()[1];
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for s in 0..n {
        data.extend_from_slice(a.sample(s));
        data.extend_from_slice(b.sample(s));
    }
    Tensor4::new([n, ca + cb, h, w], data).expect("concat dims")
}

pub(crate) fn concat_backward<T: Real>(
    a_dims: [usize; 4],
    b_dims: [usize; 4],
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let [n, ca, h, w] = a_dims;
    let cb = b_dims[1];
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut da = Vec::with_capacity(n * la);
    let mut db = Vec::with_capacity(n * lb);
    for s in 0..n {
        let g = dy.sample(s);
        da.extend_from_slice(&g[..la]);
        db.extend_from_slice(&g[la..]);
    }
    (Tensor4::new(a_dims, da).expect("concat grad"), Tensor4::new(b_dims, db).expect("concat grad"))
}
