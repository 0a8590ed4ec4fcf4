//! Structured ops: convolutions (im2col + GEMM), layer norm, nearest
//! upsampling, and bilinear plane sampling.

use std::sync::Arc;

use crate::nn::var::Var;
use crate::nn::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

struct Conv2dGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Conv2dGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col2d<S: Scalar>(x: &[S], g: &Conv2dGeom) -> Vec<S> {
    let mut cols = vec![S::ZERO; g.positions() * g.patch()];
    let (h, w) = (g.h as isize, g.w as isize);
    for oi in 0..g.oh {
        for oj in 0..g.ow {
            let p = oi * g.ow + oj;
            let row = &mut cols[p * g.patch()..(p + 1) * g.patch()];
            let i0 = (oi * g.stride) as isize - g.pad as isize;
            let j0 = (oj * g.stride) as isize - g.pad as isize;
            for c in 0..g.cin {
                let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                for u in 0..g.kh {
                    let i = i0 + u as isize;
                    if i < 0 || i >= h {
                        continue;
                    }
                    for v in 0..g.kw {
                        let j = j0 + v as isize;
                        if j < 0 || j >= w {
                            continue;
                        }
                        row[c * g.kh * g.kw + u * g.kw + v] = src[(i * w + j) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im2d<S: Scalar>(dcols: &[S], g: &Conv2dGeom) -> Vec<S> {
    let mut dx = vec![S::ZERO; g.cin * g.h * g.w];
    let (h, w) = (g.h as isize, g.w as isize);
    for oi in 0..g.oh {
        for oj in 0..g.ow {
            let p = oi * g.ow + oj;
            let row = &dcols[p * g.patch()..(p + 1) * g.patch()];
            let i0 = (oi * g.stride) as isize - g.pad as isize;
            let j0 = (oj * g.stride) as isize - g.pad as isize;
            for c in 0..g.cin {
                let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
                for u in 0..g.kh {
                    let i = i0 + u as isize;
                    if i < 0 || i >= h {
                        continue;
                    }
                    for v in 0..g.kw {
                        let j = j0 + v as isize;
                        if j < 0 || j >= w {
                            continue;
                        }
                        dst[(i * w + j) as usize] += row[c * g.kh * g.kw + u * g.kw + v];
                    }
                }
            }
        }
    }
    dx
}

impl<S: Scalar> Var<S> {
    /// 2-D cross-correlation: input `[cin,h,w]`, kernel `[cout,cin,kh,kw]`,
    /// zero padding, output `[cout,oh,ow]`.
    pub fn conv2d(&self, kernel: &Var<S>, stride: usize, pad: usize) -> Var<S> {
        let xs = self.shape();
        let ks = kernel.shape();
        assert_eq!(xs.len(), 3, "conv2d input must be [cin,h,w]");
        assert_eq!(ks.len(), 4, "conv2d kernel must be [cout,cin,kh,kw]");
        assert_eq!(xs[0], ks[1], "conv2d channel mismatch");
        assert!(stride >= 1);
        let g = Conv2dGeom {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            oh: conv_out_len(xs[1], ks[2], stride, pad),
            ow: conv_out_len(xs[2], ks[3], stride, pad),
        };
        let cols = im2col2d(self.value().data(), &g);
        let mut out = vec![S::ZERO; g.cout * g.positions()];
        let (p, k, n) = (g.positions(), g.patch(), g.cout);
        unsafe {
            // out[co][pos] laid out channel-major via output strides.
            S::gemm(
                p,
                k,
                n,
                S::ONE,
                cols.as_ptr(),
                k as isize,
                1,
                kernel.value().data().as_ptr(),
                1,
                k as isize,
                S::ZERO,
                out.as_mut_ptr(),
                1,
                p as isize,
            );
        }
        let geom = Arc::new(g);
        let gb = Arc::clone(&geom);
        Var::from_op(
            Tensor::raw(&[geom.cout, geom.oh, geom.ow], out),
            vec![self.clone(), kernel.clone()],
            Box::new(move |grad, parents| {
                let g = &*gb;
                let (p, k, n) = (g.positions(), g.patch(), g.cout);
                let cols = im2col2d(parents[0].value().data(), g);
                // dW[co][patch] = sum_pos dOut[co][pos] * cols[pos][patch]
                let mut dw = vec![S::ZERO; n * k];
                unsafe {
                    S::gemm(
                        n,
                        p,
                        k,
                        S::ONE,
                        grad.data().as_ptr(),
                        p as isize,
                        1,
                        cols.as_ptr(),
                        k as isize,
                        1,
                        S::ZERO,
                        dw.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
                // dCols[pos][patch] = sum_co dOut[co][pos] * W[co][patch]
                let mut dcols = vec![S::ZERO; p * k];
                unsafe {
                    S::gemm(
                        p,
                        n,
                        k,
                        S::ONE,
                        grad.data().as_ptr(),
                        1,
                        p as isize,
                        parents[1].value().data().as_ptr(),
                        k as isize,
                        1,
                        S::ZERO,
                        dcols.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
                let dx = col2im2d(&dcols, g);
                vec![
                    Some(Tensor::raw(&[g.cin, g.h, g.w], dx)),
                    Some(Tensor::raw(&[g.cout, g.cin, g.kh, g.kw], dw)),
                ]
            }),
        )
    }

    /// 3-D cross-correlation: input `[cin,d,h,w]`, kernel
    /// `[cout,cin,kd,kh,kw]`, per-axis strides and zero padding.
    pub fn conv3d(&self, kernel: &Var<S>, stride: [usize; 3], pad: [usize; 3]) -> Var<S> {
        let xs = self.shape().to_vec();
        let ks = kernel.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv3d input must be [cin,d,h,w]");
        assert_eq!(ks.len(), 5, "conv3d kernel must be [cout,cin,kd,kh,kw]");
        assert_eq!(xs[0], ks[1], "conv3d channel mismatch");
        let od = conv_out_len(xs[1], ks[2], stride[0], pad[0]);
        let oh = conv_out_len(xs[2], ks[3], stride[1], pad[1]);
        let ow = conv_out_len(xs[3], ks[4], stride[2], pad[2]);
        let (cin, cout) = (xs[0], ks[0]);
        let patch = cin * ks[2] * ks[3] * ks[4];
        let positions = od * oh * ow;

        let cols = im2col3d(self.value().data(), &xs, &ks, stride, pad, od, oh, ow);
        let mut out = vec![S::ZERO; cout * positions];
        unsafe {
            S::gemm(
                positions,
                patch,
                cout,
                S::ONE,
                cols.as_ptr(),
                patch as isize,
                1,
                kernel.value().data().as_ptr(),
                1,
                patch as isize,
                S::ZERO,
                out.as_mut_ptr(),
                1,
                positions as isize,
            );
        }
        let xs_b = xs.clone();
        let ks_b = ks.clone();
        Var::from_op(
            Tensor::raw(&[cout, od, oh, ow], out),
            vec![self.clone(), kernel.clone()],
            Box::new(move |grad, parents| {
                let cols = im2col3d(
                    parents[0].value().data(),
                    &xs_b,
                    &ks_b,
                    stride,
                    pad,
                    od,
                    oh,
                    ow,
                );
                let mut dw = vec![S::ZERO; cout * patch];
                unsafe {
                    S::gemm(
                        cout,
                        positions,
                        patch,
                        S::ONE,
                        grad.data().as_ptr(),
                        positions as isize,
                        1,
                        cols.as_ptr(),
                        patch as isize,
                        1,
                        S::ZERO,
                        dw.as_mut_ptr(),
                        patch as isize,
                        1,
                    );
                }
                let mut dcols = vec![S::ZERO; positions * patch];
                unsafe {
                    S::gemm(
                        positions,
                        cout,
                        patch,
                        S::ONE,
                        grad.data().as_ptr(),
                        1,
                        positions as isize,
                        parents[1].value().data().as_ptr(),
                        patch as isize,
                        1,
                        S::ZERO,
                        dcols.as_mut_ptr(),
                        patch as isize,
                        1,
                    );
                }
                let dx = col2im3d(&dcols, &xs_b, &ks_b, stride, pad, od, oh, ow);
                vec![
                    Some(Tensor::raw(&xs_b, dx)),
                    Some(Tensor::raw(&ks_b, dw)),
                ]
            }),
        )
    }

    /// Layer norm over the last axis of `[n,d]`, with affine `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Var<S>, beta: &Var<S>) -> Var<S> {
        let (n, d) = (self.shape()[0], self.shape()[1]);
        assert_eq!(gamma.shape(), &[d]);
        assert_eq!(beta.shape(), &[d]);
        let eps = S::from_f64(LN_EPS);
        let inv_d = S::ONE / S::from_f64(d as f64);
        let x = self.value().data();
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_sigma = Vec::with_capacity(n);
        for row in x.chunks_exact(d) {
            let mu: S = row.iter().copied().sum::<S>() * inv_d;
            let var: S = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_d;
            let is = S::ONE / (var + eps).sqrt();
            inv_sigma.push(is);
            xhat.extend(row.iter().map(|&v| (v - mu) * is));
        }
        let gam = gamma.value().data();
        let bet = beta.value().data();
        let mut out = Vec::with_capacity(n * d);
        for row in xhat.chunks_exact(d) {
            out.extend(
                row.iter()
                    .zip(gam.iter().zip(bet))
                    .map(|(&h, (&g, &b))| h * g + b),
            );
        }
        let xhat = Tensor::raw(&[n, d], xhat);
        let inv_sigma = Arc::new(inv_sigma);
        Var::from_op(
            Tensor::raw(&[n, d], out),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |grad, parents| {
                let gam = parents[1].value().data();
                let gd = grad.data();
                let hd = xhat.data();
                let mut dgamma = vec![S::ZERO; d];
                let mut dbeta = vec![S::ZERO; d];
                let mut dx = Vec::with_capacity(n * d);
                for (r, (grow, hrow)) in gd.chunks_exact(d).zip(hd.chunks_exact(d)).enumerate() {
                    let mut mean_dy = S::ZERO;
                    let mut mean_dyh = S::ZERO;
                    for j in 0..d {
                        let dyj = grow[j] * gam[j];
                        mean_dy += dyj;
                        mean_dyh += dyj * hrow[j];
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                    mean_dy = mean_dy * inv_d;
                    mean_dyh = mean_dyh * inv_d;
                    let is = inv_sigma[r];
                    for j in 0..d {
                        let dyj = grow[j] * gam[j];
                        dx.push(is * (dyj - mean_dy - hrow[j] * mean_dyh));
                    }
                }
                vec![
                    Some(Tensor::raw(&[n, d], dx)),
                    Some(Tensor::raw(&[d], dgamma)),
                    Some(Tensor::raw(&[d], dbeta)),
                ]
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of `[c,h,w]` to a target extent
    /// (`th`, `tw` must satisfy `h == ceil(th/2)`, same for `w`).
    pub fn upsample2(&self, th: usize, tw: usize) -> Var<S> {
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        assert_eq!(h, th.div_ceil(2), "upsample2 height pairing");
        assert_eq!(w, tw.div_ceil(2), "upsample2 width pairing");
        let x = self.value().data();
        let mut out = Vec::with_capacity(c * th * tw);
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            for i in 0..th {
                for j in 0..tw {
                    out.push(src[(i / 2) * w + j / 2]);
                }
            }
        }
        Var::from_op(
            Tensor::raw(&[c, th, tw], out),
            vec![self.clone()],
            Box::new(move |grad, _| {
                let gd = grad.data();
                let mut dx = vec![S::ZERO; c * h * w];
                for ch in 0..c {
                    let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
                    let base = ch * th * tw;
                    for i in 0..th {
                        for j in 0..tw {
                            dst[(i / 2) * w + j / 2] += gd[base + i * tw + j];
                        }
                    }
                }
                vec![Some(Tensor::raw(&[c, h, w], dx))]
            }),
        )
    }

    /// Bilinear sampling of a `[c,a,b]` plane at continuous `(i,j)` points,
    /// clamp-to-edge; output `[n,c]`. Only the plane values carry gradient.
    pub fn bilinear_plane(&self, pts: &Arc<Vec<(f64, f64)>>) -> Var<S> {
        let (c, a, b) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = pts.len();
        let corners = bilinear_corners(pts, a, b);
        let x = self.value().data();
        let mut out = vec![S::ZERO; n * c];
        for (p, cs) in corners.iter().enumerate() {
            for &(off, wgt) in cs.iter() {
                let wgt = S::from_f64(wgt);
                for ch in 0..c {
                    out[p * c + ch] += x[ch * a * b + off] * wgt;
                }
            }
        }
        let corners = Arc::new(corners);
        Var::from_op(
            Tensor::raw(&[n, c], out),
            vec![self.clone()],
            Box::new(move |grad, _| {
                let gd = grad.data();
                let mut dx = vec![S::ZERO; c * a * b];
                for (p, cs) in corners.iter().enumerate() {
                    for &(off, wgt) in cs.iter() {
                        let wgt = S::from_f64(wgt);
                        for ch in 0..c {
                            dx[ch * a * b + off] += gd[p * c + ch] * wgt;
                        }
                    }
                }
                vec![Some(Tensor::raw(&[c, a, b], dx))]
            }),
        )
    }
}

/// Corner offsets and weights for each sample point (clamp-to-edge).
fn bilinear_corners(pts: &[(f64, f64)], a: usize, b: usize) -> Vec<[(usize, f64); 4]> {
    pts.iter()
        .map(|&(pi, pj)| {
            let pi = pi.clamp(0.0, (a - 1) as f64);
            let pj = pj.clamp(0.0, (b - 1) as f64);
            let i0 = pi.floor() as usize;
            let j0 = pj.floor() as usize;
            let i1 = (i0 + 1).min(a - 1);
            let j1 = (j0 + 1).min(b - 1);
            let fi = pi - i0 as f64;
            let fj = pj - j0 as f64;
            [
                (i0 * b + j0, (1.0 - fi) * (1.0 - fj)),
                (i0 * b + j1, (1.0 - fi) * fj),
                (i1 * b + j0, fi * (1.0 - fj)),
                (i1 * b + j1, fi * fj),
            ]
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col3d<S: Scalar>(
    x: &[S],
    xs: &[usize],
    ks: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
    od: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let (cin, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kd, kh, kw) = (ks[2], ks[3], ks[4]);
    let patch = cin * kd * kh * kw;
    let mut cols = vec![S::ZERO; od * oh * ow * patch];
    let (di, hi, wi) = (d as isize, h as isize, w as isize);
    let mut p = 0usize;
    for oz in 0..od {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = &mut cols[p * patch..(p + 1) * patch];
                let z0 = (oz * stride[0]) as isize - pad[0] as isize;
                let i0 = (oi * stride[1]) as isize - pad[1] as isize;
                let j0 = (oj * stride[2]) as isize - pad[2] as isize;
                for c in 0..cin {
                    let src = &x[c * d * h * w..(c + 1) * d * h * w];
                    for uz in 0..kd {
                        let z = z0 + uz as isize;
                        if z < 0 || z >= di {
                            continue;
                        }
                        for ui in 0..kh {
                            let i = i0 + ui as isize;
                            if i < 0 || i >= hi {
                                continue;
                            }
                            for uj in 0..kw {
                                let j = j0 + uj as isize;
                                if j < 0 || j >= wi {
                                    continue;
                                }
                                row[((c * kd + uz) * kh + ui) * kw + uj] =
                                    src[((z * hi + i) * wi + j) as usize];
                            }
                        }
                    }
                }
                p += 1;
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im3d<S: Scalar>(
    dcols: &[S],
    xs: &[usize],
    ks: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
    od: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let (cin, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kd, kh, kw) = (ks[2], ks[3], ks[4]);
    let patch = cin * kd * kh * kw;
    let mut dx = vec![S::ZERO; cin * d * h * w];
    let (di, hi, wi) = (d as isize, h as isize, w as isize);
    let mut p = 0usize;
    for oz in 0..od {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = &dcols[p * patch..(p + 1) * patch];
                let z0 = (oz * stride[0]) as isize - pad[0] as isize;
                let i0 = (oi * stride[1]) as isize - pad[1] as isize;
                let j0 = (oj * stride[2]) as isize - pad[2] as isize;
                for c in 0..cin {
                    let dst = &mut dx[c * d * h * w..(c + 1) * d * h * w];
                    for uz in 0..kd {
                        let z = z0 + uz as isize;
                        if z < 0 || z >= di {
                            continue;
                        }
                        for ui in 0..kh {
                            let i = i0 + ui as isize;
                            if i < 0 || i >= hi {
                                continue;
                            }
                            for uj in 0..kw {
                                let j = j0 + uj as isize;
                                if j < 0 || j >= wi {
                                    continue;
                                }
                                dst[((z * hi + i) * wi + j) as usize] +=
                                    row[((c * kd + uz) * kh + ui) * kw + uj];
                            }
                        }
                    }
                }
                p += 1;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_scalar_kernel_scales() {
        // 1x2x2 input, 1x1x1x1 kernel of value 2 -> doubled
        let x = Var::leaf(Tensor::new(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap());
        let k = Var::leaf(Tensor::new(&[1, 1, 1, 1], vec![2.0f64]).unwrap());
        let y = x.conv2d(&k, 1, 0);
        assert_eq!(y.value().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv2d_all_ones_sums() {
        let x = Var::leaf(Tensor::new(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap());
        let k = Var::leaf(Tensor::ones(&[1, 1, 2, 2]));
        let y = x.conv2d(&k, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.value().item(), 10.0);
    }

    #[test]
    fn conv2d_shape_formula() {
        let x = Var::constant(Tensor::<f64>::zeros(&[8, 32, 32]));
        let k = Var::constant(Tensor::<f64>::zeros(&[16, 8, 3, 3]));
        let y = x.conv2d(&k, 2, 1);
        assert_eq!(y.shape(), &[16, 16, 16]);
    }

    #[test]
    fn conv2d_identity_1x1_kernel() {
        // c-channel 1x1 identity kernel is exactly the identity map
        let c = 3;
        let x = Tensor::<f64>::from_fn(&[c, 4, 5], |i| (i as f64) * 0.37 - 2.0);
        let mut kd = vec![0.0f64; c * c];
        for i in 0..c {
            kd[i * c + i] = 1.0;
        }
        let k = Var::constant(Tensor::new(&[c, c, 1, 1], kd).unwrap());
        let y = Var::constant(x.clone()).conv2d(&k, 1, 0);
        assert_eq!(y.value().data(), x.data());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Var::leaf(Tensor::<f64>::full(&[1, 5], 3.7));
        let g = Var::leaf(Tensor::ones(&[5]));
        let b = Var::leaf(Tensor::zeros(&[5]));
        let y = x.layer_norm(&g, &b);
        for &v in y.value().data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let x = Tensor::new(&[1, 4], vec![0.3f64, -1.2, 2.4, 0.9]).unwrap();
        let y = Var::constant(x.clone())
            .layer_norm(&Var::constant(Tensor::ones(&[4])), &Var::constant(Tensor::zeros(&[4])));
        // oracle: explicit two-pass mean/variance
        let d = x.data();
        let mu: f64 = d.iter().sum::<f64>() / 4.0;
        let var: f64 = d.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
        for (got, &v) in y.value().data().iter().zip(d) {
            let want = (v - mu) / (var + 1e-5).sqrt();
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn bilinear_center_and_midpoint() {
        // 1-channel 1x3 plane: values 10, 20, 40
        let plane = Var::constant(Tensor::new(&[1, 1, 3], vec![10.0f64, 20.0, 40.0]).unwrap());
        let pts = Arc::new(vec![(0.0, 1.0), (0.0, 1.5)]);
        let y = plane.bilinear_plane(&pts);
        assert_eq!(y.value().data()[0], 20.0); // exact grid point
        assert_eq!(y.value().data()[1], 30.0); // midpoint = average of neighbors
    }

    #[test]
    fn upsample2_even_and_odd() {
        let x = Var::constant(Tensor::new(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap());
        let y = x.upsample2(4, 3);
        assert_eq!(y.shape(), &[1, 4, 3]);
        assert_eq!(
            y.value().data(),
            &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0, 3.0, 3.0, 4.0]
        );
    }
}
