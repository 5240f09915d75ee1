//! Raw loops behind the convolution family. Direct cross-correlation only.

use super::{Scalar, Shape, Tensor};

/// Output positions `o` in `0..out_len` whose source index
/// `o * stride + offset` falls inside `0..in_len`, as a half-open range.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = (hi as usize).min(out_len);
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub(crate) fn conv_out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeom,
    out_shape: Shape,
) -> Tensor<T> {
    let xs = x.shape();
    let [cout, cin_g, k, _] = w.shape().dims();
    let cout_g = cout / geom.groups;
    let (ho, wo) = (out_shape.h(), out_shape.w());
    let (hi, wi) = (xs.h(), xs.w());
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); out_shape.numel()];
    let pad = geom.pad as isize;
    let s = geom.stride;

    for n in 0..xs.n() {
        for co in 0..cout {
            let grp = co / cout_g;
            let obase = out_shape.index(n, co, 0, 0);
            let oplane = &mut out[obase..obase + ho * wo];
            if let Some(b) = b {
                let bv = b.data()[co];
                oplane.iter_mut().for_each(|v| *v = bv);
            }
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let xbase = xs.index(n, ci, 0, 0);
                let xplane = &xd[xbase..xbase + hi * wi];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ho, hi, s, ky as isize - pad);
                    for kx in 0..k {
                        let wv = wd[((co * cin_g + cil) * k + ky) * k + kx];
                        let xoff = kx as isize - pad;
                        let (ox0, ox1) = valid_range(wo, wi, s, xoff);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = (oy * s) as isize + ky as isize - pad;
                            let xrow = &xplane[iy as usize * wi..(iy as usize + 1) * wi];
                            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let ix0 = (ox0 as isize + xoff) as usize;
                                let src = &xrow[ix0..ix0 + (ox1 - ox0)];
                                for (o, &xv) in orow[ox0..ox1].iter_mut().zip(src) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ((ox * s) as isize + xoff) as usize;
                                    orow[ox] += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    geom: ConvGeom,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let xs = x.shape();
    let os = gout.shape();
    let [cout, cin_g, k, _] = w.shape().dims();
    let cout_g = cout / geom.groups;
    let (ho, wo) = (os.h(), os.w());
    let (hi, wi) = (xs.h(), xs.w());
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    let pad = geom.pad as isize;
    let s = geom.stride;

    let mut dx = need[0].then(|| vec![T::zero(); xs.numel()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.numel()]);

    if dx.is_some() || dw.is_some() {
        for n in 0..xs.n() {
            for co in 0..cout {
                let grp = co / cout_g;
                let obase = os.index(n, co, 0, 0);
                let gplane = &gd[obase..obase + ho * wo];
                for cil in 0..cin_g {
                    let ci = grp * cin_g + cil;
                    let xbase = xs.index(n, ci, 0, 0);
                    for ky in 0..k {
                        let (oy0, oy1) = valid_range(ho, hi, s, ky as isize - pad);
                        for kx in 0..k {
                            let widx = ((co * cin_g + cil) * k + ky) * k + kx;
                            let wv = wd[widx];
                            let xoff = kx as isize - pad;
                            let (ox0, ox1) = valid_range(wo, wi, s, xoff);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = ((oy * s) as isize + ky as isize - pad) as usize;
                                let xrow0 = xbase + iy * wi;
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                if s == 1 {
                                    let ix0 = (ox0 as isize + xoff) as usize;
                                    let len = ox1 - ox0;
                                    if let Some(dx) = dx.as_mut() {
                                        let dst = &mut dx[xrow0 + ix0..xrow0 + ix0 + len];
                                        for (d, &g) in dst.iter_mut().zip(&grow[ox0..ox1]) {
                                            *d += wv * g;
                                        }
                                    }
                                    if dw.is_some() {
                                        let src = &xd[xrow0 + ix0..xrow0 + ix0 + len];
                                        for (&xv, &g) in src.iter().zip(&grow[ox0..ox1]) {
                                            acc += xv * g;
                                        }
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        let ix = ((ox * s) as isize + xoff) as usize;
                                        let g = grow[ox];
                                        if let Some(dx) = dx.as_mut() {
                                            dx[xrow0 + ix] += wv * g;
                                        }
                                        acc += xd[xrow0 + ix] * g;
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    let db = need[2].then(|| {
        let mut db = vec![T::zero(); cout];
        for n in 0..os.n() {
            for (co, d) in db.iter_mut().enumerate() {
                let base = os.index(n, co, 0, 0);
                *d += gd[base..base + ho * wo].iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        Tensor::from_parts(Shape([cout, 1, 1, 1]), db)
    });

    (
        dx.map(|d| Tensor::from_parts(xs, d)),
        dw.map(|d| Tensor::from_parts(w.shape(), d)),
        db,
    )
}

/// Per-pixel channel mixing, `out[co] = b[co] + sum_ci w[co, ci] * x[ci]`.
/// The accumulation order matches [`conv_forward`] with a 1x1 kernel.
pub(crate) fn pointwise_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let xs = x.shape();
    let [cout, cin, _, _] = w.shape().dims();
    let plane = xs.plane();
    let out_shape = Shape([xs.n(), cout, xs.h(), xs.w()]);
    let mut out = vec![T::zero(); out_shape.numel()];
    let xd = x.data();
    let wd = w.data();
    for n in 0..xs.n() {
        for co in 0..cout {
            let ob = out_shape.index(n, co, 0, 0);
            let op = &mut out[ob..ob + plane];
            if let Some(b) = b {
                let bv = b.data()[co];
                op.iter_mut().for_each(|v| *v = bv);
            }
            for ci in 0..cin {
                let wv = wd[co * cin + ci];
                let xb = xs.index(n, ci, 0, 0);
                for (o, &xv) in op.iter_mut().zip(&xd[xb..xb + plane]) {
                    *o += wv * xv;
                }
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn pointwise_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let xs = x.shape();
    let os = gout.shape();
    let [cout, cin, _, _] = w.shape().dims();
    let plane = xs.plane();
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();

    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); xs.numel()];
        for n in 0..xs.n() {
            for ci in 0..cin {
                let xb = xs.index(n, ci, 0, 0);
                let dst = &mut dx[xb..xb + plane];
                for co in 0..cout {
                    let wv = wd[co * cin + ci];
                    let gb = os.index(n, co, 0, 0);
                    for (d, &g) in dst.iter_mut().zip(&gd[gb..gb + plane]) {
                        *d += wv * g;
                    }
                }
            }
        }
        Tensor::from_parts(xs, dx)
    });

    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); cout * cin];
        for n in 0..xs.n() {
            for co in 0..cout {
                let gb = os.index(n, co, 0, 0);
                let gp = &gd[gb..gb + plane];
                for ci in 0..cin {
                    let xb = xs.index(n, ci, 0, 0);
                    let dot = gp.iter().zip(&xd[xb..xb + plane]).fold(T::zero(), |a, (&g, &x)| a + g * x);
                    dw[co * cin + ci] += dot;
                }
            }
        }
        Tensor::from_parts(w.shape(), dw)
    });

    let db = need[2].then(|| {
        let mut db = vec![T::zero(); cout];
        for n in 0..os.n() {
            for (co, d) in db.iter_mut().enumerate() {
                let gb = os.index(n, co, 0, 0);
                *d += gd[gb..gb + plane].iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        Tensor::from_parts(Shape([cout, 1, 1, 1]), db)
    });

    (dx, dw, db)
}
