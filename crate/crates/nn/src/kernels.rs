//! Raw loops behind the tape ops. Everything here works on flat slices with
//! NCHW layout and accumulates in a fixed order.

use crate::Scalar;

/// Dot product with eight fixed partial sums, combined pairwise.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let a8 = &a[c * 8..c * 8 + 8];
        let b8 = &b[c * 8..c * 8 + 8];
        for k in 0..8 {
            acc[k] += a8[k] * b8[k];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Geometry of one strided kernel application, resolved to concrete extents.
#[derive(Debug, Clone, Copy)]
pub struct Plan {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Valid range of output indices `o` for which `o*stride + kk - pad` lies in `[0, len)`.
#[inline]
fn conv_range(out_len: usize, in_len: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + kk >= pad
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    // o*stride + kk - pad <= in_len - 1
    let hi_num = in_len + pad - 1;
    let hi = if hi_num < kk {
        0
    } else {
        ((hi_num - kk) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Valid range of input indices `i` for which `i*stride + kk - pad` lies in `[0, out_len)`.
#[inline]
fn deconv_range(in_len: usize, out_len: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    conv_range(in_len, out_len, kk, stride, pad)
}

pub fn conv_forward<T: Scalar>(p: &Plan, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let (ih, iw, oh, ow, k, s, pad) = (p.in_h, p.in_w, p.out_h, p.out_w, p.k, p.stride, p.pad);
    for n in 0..p.batch {
        for co in 0..p.cout {
            let o_plane = &mut out[(n * p.cout + co) * oh * ow..][..oh * ow];
            o_plane.fill(b[co]);
            for ci in 0..p.cin {
                let x_plane = &x[(n * p.cin + ci) * ih * iw..][..ih * iw];
                for ky in 0..k {
                    let (oy0, oy1) = conv_range(oh, ih, ky, s, pad);
                    for kx in 0..k {
                        let wv = w[((co * p.cin + ci) * k + ky) * k + kx];
                        let (ox0, ox1) = conv_range(ow, iw, kx, s, pad);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - pad;
                            let x_row = &x_plane[iy * iw..][..iw];
                            let o_row = &mut o_plane[oy * ow..][..ow];
                            for ox in ox0..ox1 {
                                o_row[ox] += wv * x_row[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution. Any of the output buffers may be skipped.
pub fn conv_backward<T: Scalar>(
    p: &Plan,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ih, iw, oh, ow, k, s, pad) = (p.in_h, p.in_w, p.out_h, p.out_w, p.k, p.stride, p.pad);
    if let Some(db) = db {
        for co in 0..p.cout {
            let mut acc = T::zero();
            for n in 0..p.batch {
                for &v in &dout[(n * p.cout + co) * oh * ow..][..oh * ow] {
                    acc += v;
                }
            }
            db[co] += acc;
        }
    }
    for n in 0..p.batch {
        for co in 0..p.cout {
            let d_plane = &dout[(n * p.cout + co) * oh * ow..][..oh * ow];
            for ci in 0..p.cin {
                let x_off = (n * p.cin + ci) * ih * iw;
                for ky in 0..k {
                    let (oy0, oy1) = conv_range(oh, ih, ky, s, pad);
                    for kx in 0..k {
                        let widx = ((co * p.cin + ci) * k + ky) * k + kx;
                        let (ox0, ox1) = conv_range(ow, iw, kx, s, pad);
                        if let Some(dw) = dw.as_deref_mut() {
                            let x_plane = &x[x_off..][..ih * iw];
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - pad;
                                let x_row = &x_plane[iy * iw..][..iw];
                                let d_row = &d_plane[oy * ow..][..ow];
                                for ox in ox0..ox1 {
                                    acc += d_row[ox] * x_row[ox * s + kx - pad];
                                }
                            }
                            dw[widx] += acc;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let wv = w[widx];
                            let dx_plane = &mut dx[x_off..][..ih * iw];
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - pad;
                                let dx_row = &mut dx_plane[iy * iw..][..iw];
                                let d_row = &d_plane[oy * ow..][..ow];
                                for ox in ox0..ox1 {
                                    dx_row[ox * s + kx - pad] += wv * d_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution; `w` is laid out `[cin, cout, k, k]`.
pub fn deconv_forward<T: Scalar>(p: &Plan, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let (ih, iw, oh, ow, k, s, pad) = (p.in_h, p.in_w, p.out_h, p.out_w, p.k, p.stride, p.pad);
    for n in 0..p.batch {
        for co in 0..p.cout {
            let o_plane = &mut out[(n * p.cout + co) * oh * ow..][..oh * ow];
            o_plane.fill(b[co]);
            for ci in 0..p.cin {
                let x_plane = &x[(n * p.cin + ci) * ih * iw..][..ih * iw];
                for ky in 0..k {
                    let (iy0, iy1) = deconv_range(ih, oh, ky, s, pad);
                    for kx in 0..k {
                        let wv = w[((ci * p.cout + co) * k + ky) * k + kx];
                        let (ix0, ix1) = deconv_range(iw, ow, kx, s, pad);
                        for iy in iy0..iy1 {
                            let oy = iy * s + ky - pad;
                            let x_row = &x_plane[iy * iw..][..iw];
                            let o_row = &mut o_plane[oy * ow..][..ow];
                            for ix in ix0..ix1 {
                                o_row[ix * s + kx - pad] += wv * x_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn deconv_backward<T: Scalar>(
    p: &Plan,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ih, iw, oh, ow, k, s, pad) = (p.in_h, p.in_w, p.out_h, p.out_w, p.k, p.stride, p.pad);
    if let Some(db) = db {
        for co in 0..p.cout {
            let mut acc = T::zero();
            for n in 0..p.batch {
                for &v in &dout[(n * p.cout + co) * oh * ow..][..oh * ow] {
                    acc += v;
                }
            }
            db[co] += acc;
        }
    }
    for n in 0..p.batch {
        for co in 0..p.cout {
            let d_plane = &dout[(n * p.cout + co) * oh * ow..][..oh * ow];
            for ci in 0..p.cin {
                let x_off = (n * p.cin + ci) * ih * iw;
                for ky in 0..k {
                    let (iy0, iy1) = deconv_range(ih, oh, ky, s, pad);
                    for kx in 0..k {
                        let widx = ((ci * p.cout + co) * k + ky) * k + kx;
                        let (ix0, ix1) = deconv_range(iw, ow, kx, s, pad);
                        if let Some(dw) = dw.as_deref_mut() {
                            let x_plane = &x[x_off..][..ih * iw];
                            let mut acc = T::zero();
                            for iy in iy0..iy1 {
                                let oy = iy * s + ky - pad;
                                let x_row = &x_plane[iy * iw..][..iw];
                                let d_row = &d_plane[oy * ow..][..ow];
                                for ix in ix0..ix1 {
                                    acc += x_row[ix] * d_row[ix * s + kx - pad];
                                }
                            }
                            dw[widx] += acc;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let wv = w[widx];
                            let dx_plane = &mut dx[x_off..][..ih * iw];
                            for iy in iy0..iy1 {
                                let oy = iy * s + ky - pad;
                                let dx_row = &mut dx_plane[iy * iw..][..iw];
                                let d_row = &d_plane[oy * ow..][..ow];
                                for ix in ix0..ix1 {
                                    dx_row[ix] += wv * d_row[ix * s + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
