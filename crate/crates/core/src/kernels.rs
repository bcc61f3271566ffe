//! Convolution kernels on planar `C×H×W` buffers (forward and adjoint).
//!
//! Regular convolutions go through im2col + GEMM; the transposed convolution
//! only supports `kernel == stride` (non-overlapping taps), which is all the
//! decoder needs.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn valid(&self) -> bool {
        self.groups > 0
            && self.cin.is_multiple_of(self.groups)
            && self.cout.is_multiple_of(self.groups)
            && self.stride > 0
            && self.h + 2 * self.pad >= self.k
            && self.w + 2 * self.pad >= self.k
    }

    pub fn macs(&self) -> u64 {
        let (oh, ow) = self.out_hw();
        (self.cout * (self.cin / self.groups) * self.k * self.k * oh * ow) as u64
    }
}

fn im2col(x: &[f64], g: &ConvGeom, c0: usize, cg: usize, cols: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let k = g.k;
    let npix = oh * ow;
    for c in 0..cg {
        let plane = &x[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, c0: usize, cg: usize, gx: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let k = g.k;
    let npix = oh * ow;
    for c in 0..cg {
        let plane = &mut gx[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with optional transposes given as strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut().take(m * n) {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass buffers of at least the sizes implied by the
    // dimensions and strides; `c` is contiguous row-major `m×n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut c);
    c
}

/// `a^T · b` for `a[k×m]`, `b[k×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), 0.0, &mut c);
    c
}

/// `a · b^T` for `a[m×k]`, `b[n×k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), 0.0, &mut c);
    c
}

/// Weight layout `[cout, cin/groups, k, k]`; zero padding.
pub fn conv2d(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let npix = oh * ow;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kk = cin_g * g.k * g.k;
    let mut out = vec![0.0; g.cout * npix];
    let mut cols = vec![0.0; kk * npix];
    for grp in 0..g.groups {
        im2col(x, g, grp * cin_g, cin_g, &mut cols);
        let wg = &weight[grp * cout_g * kk..(grp + 1) * cout_g * kk];
        let og = &mut out[grp * cout_g * npix..(grp + 1) * cout_g * npix];
        gemm(
            cout_g,
            kk,
            npix,
            wg,
            (kk as isize, 1),
            &cols,
            (npix as isize, 1),
            0.0,
            og,
        );
    }
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            for v in &mut out[co * npix..(co + 1) * npix] {
                *v += bv;
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`]: returns `(grad_x, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (oh, ow) = g.out_hw();
    let npix = oh * ow;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kk = cin_g * g.k * g.k;
    let mut gx = want_x.then(|| vec![0.0; g.cin * g.h * g.w]);
    let mut gw = want_w.then(|| vec![0.0; weight.len()]);
    let mut cols = vec![0.0; kk * npix];
    for grp in 0..g.groups {
        let gog = &gout[grp * cout_g * npix..(grp + 1) * cout_g * npix];
        if let Some(gw) = gw.as_mut() {
            im2col(x, g, grp * cin_g, cin_g, &mut cols);
            let gwg = &mut gw[grp * cout_g * kk..(grp + 1) * cout_g * kk];
            // gw[cout_g×kk] = gout[cout_g×npix] · cols^T
            gemm(
                cout_g,
                npix,
                kk,
                gog,
                (npix as isize, 1),
                &cols,
                (1, npix as isize),
                0.0,
                gwg,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let wg = &weight[grp * cout_g * kk..(grp + 1) * cout_g * kk];
            // cols[kk×npix] = w^T · gout
            gemm(
                kk,
                cout_g,
                npix,
                wg,
                (1, kk as isize),
                gog,
                (npix as isize, 1),
                0.0,
                &mut cols,
            );
            col2im(&cols, g, grp * cin_g, cin_g, gx);
        }
    }
    let gb = (0..g.cout)
        .map(|co| gout[co * npix..(co + 1) * npix].iter().sum())
        .collect();
    (gx, gw, gb)
}

/// Transposed convolution with `kernel == stride`; weight layout `[cin, cout, k, k]`.
pub fn conv_transpose2d(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let (oh, ow) = (h * k, w * k);
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let b = bias.map_or(0.0, |b| b[co]);
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(b);
        for ci in 0..cin {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let wk = &weight[(ci * cout + co) * k * k..(ci * cout + co + 1) * k * k];
            for y in 0..h {
                for xx in 0..w {
                    let v = xin[y * w + xx];
                    for ky in 0..k {
                        let row = &mut plane[(y * k + ky) * ow + xx * k..][..k];
                        for (kx, o) in row.iter_mut().enumerate() {
                            *o += v * wk[ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    weight: &[f64],
    gout: &[f64],
    cout: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (h * k, w * k);
    let mut gx = vec![0.0; cin * h * w];
    let mut gw = vec![0.0; weight.len()];
    for co in 0..cout {
        let gplane = &gout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let wk = &weight[(ci * cout + co) * k * k..(ci * cout + co + 1) * k * k];
            let gwk = &mut gw[(ci * cout + co) * k * k..(ci * cout + co + 1) * k * k];
            let gxi = &mut gx[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let v = xin[y * w + xx];
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let row = &gplane[(y * k + ky) * ow + xx * k..][..k];
                        for (kx, &go) in row.iter().enumerate() {
                            acc += go * wk[ky * k + kx];
                            gwk[ky * k + kx] += go * v;
                        }
                    }
                    gxi[y * w + xx] += acc;
                }
            }
        }
    }
    let gb = (0..cout)
        .map(|co| gout[co * oh * ow..(co + 1) * oh * ow].iter().sum())
        .collect();
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = g.out_hw();
        let cin_g = g.cin / g.groups;
        let cout_g = g.cout / g.groups;
        let mut out = vec![0.0; g.cout * oh * ow];
        for co in 0..g.cout {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin_g {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xv =
                                    x[((grp * cin_g + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = w[((co * cin_g + ci) * g.k + ky) * g.k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gemm_conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in [
            ConvGeom {
                cin: 3,
                h: 7,
                w: 5,
                cout: 4,
                k: 3,
                stride: 1,
                pad: 1,
                groups: 1,
            },
            ConvGeom {
                cin: 4,
                h: 8,
                w: 8,
                cout: 6,
                k: 4,
                stride: 2,
                pad: 1,
                groups: 2,
            },
            ConvGeom {
                cin: 5,
                h: 6,
                w: 9,
                cout: 5,
                k: 5,
                stride: 1,
                pad: 2,
                groups: 5,
            },
        ] {
            let x = random(&mut rng, g.cin * g.h * g.w);
            let w = random(&mut rng, g.cout * g.cin / g.groups * g.k * g.k);
            let b = random(&mut rng, g.cout);
            let fast = conv2d(&x, &w, Some(&b), &g);
            let slow = naive_conv(&x, &w, Some(&b), &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), y> == <x, conv^T(y)> and similarly for the weights.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = ConvGeom {
            cin: 4,
            h: 6,
            w: 7,
            cout: 6,
            k: 3,
            stride: 2,
            pad: 1,
            groups: 2,
        };
        let (oh, ow) = g.out_hw();
        let x = random(&mut rng, g.cin * g.h * g.w);
        let w = random(&mut rng, g.cout * 2 * 9);
        let y = random(&mut rng, g.cout * oh * ow);
        let fx = conv2d(&x, &w, None, &g);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let (gx, gw, _) = conv2d_backward(&x, &w, &y, &g, true, true);
        let rhs_x: f64 = gx.unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = gw.unwrap().iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cin, h, w, cout, k) = (3, 4, 5, 2, 2);
        let x = random(&mut rng, cin * h * w);
        let wt = random(&mut rng, cin * cout * k * k);
        let y = random(&mut rng, cout * h * k * w * k);
        let fx = conv_transpose2d(&x, (cin, h, w), &wt, None, cout, k);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let (gx, gw, _) = conv_transpose2d_backward(&x, (cin, h, w), &wt, &y, cout, k);
        let rx: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let rw: f64 = gw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-10);
        assert!((lhs - rw).abs() < 1e-10);
    }
}
