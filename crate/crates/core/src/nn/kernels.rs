//! Raw volumetric kernels operating on flat slices.
//!
//! Convolutions go through im2col + GEMM; the transposed convolution is
//! restricted to kernel 2 / stride 2, which is all the decoders need.

/// `C = A·B + beta·C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: bounds on every operand were asserted above; C is densely
    // row-major with leading dimension n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dims: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self) -> [usize; 3] {
        self.dims.map(|d| (d + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn kvol(&self) -> usize {
        self.k * self.k * self.k
    }
}

/// Output positions `[lo, hi)` along one axis whose input index
/// `o * stride + offset` falls inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, stride: isize, offset: isize) -> (usize, usize) {
    let mut lo = 0;
    while lo < out_len && (lo as isize) * stride + offset < 0 {
        lo += 1;
    }
    let mut hi = out_len;
    while hi > lo && ((hi - 1) as isize) * stride + offset >= len as isize {
        hi -= 1;
    }
    (lo, hi)
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let [d, h, w] = g.dims;
    let [od, oh, ow] = g.out_dims();
    let p = od * oh * ow;
    let (k, s, pad) = (g.k, g.stride as isize, g.pad as isize);
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let out = &mut cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = z as isize * s + kd as isize - pad;
                        if iz < 0 || iz >= d as isize {
                            out[idx..idx + oh * ow].fill(0.0);
                            idx += oh * ow;
                            continue;
                        }
                        for y in 0..oh {
                            let iy = y as isize * s + kh as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                out[idx..idx + ow].fill(0.0);
                                idx += ow;
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            let (lo, hi) = valid_range(ow, w, s, kw as isize - pad);
                            let row = &mut out[idx..idx + ow];
                            row[..lo].fill(0.0);
                            row[hi..].fill(0.0);
                            if s == 1 {
                                let start = (lo as isize + kw as isize - pad) as usize;
                                row[lo..hi].copy_from_slice(&xc[base + start..base + start + hi - lo]);
                            } else {
                                for (xo, r) in row.iter_mut().enumerate().take(hi).skip(lo) {
                                    *r = xc[base + (xo as isize * s + kw as isize - pad) as usize];
                                }
                            }
                            idx += ow;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let [d, h, w] = g.dims;
    let [od, oh, ow] = g.out_dims();
    let p = od * oh * ow;
    let (k, s, pad) = (g.k, g.stride as isize, g.pad as isize);
    for ci in 0..g.cin {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = z as isize * s + kd as isize - pad;
                        if iz < 0 || iz >= d as isize {
                            idx += oh * ow;
                            continue;
                        }
                        for y in 0..oh {
                            let iy = y as isize * s + kh as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                idx += ow;
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            let (lo, hi) = valid_range(ow, w, s, kw as isize - pad);
                            for xo in lo..hi {
                                xc[base + (xo as isize * s + kw as isize - pad) as usize] += src[idx + xo];
                            }
                            idx += ow;
                        }
                    }
                }
            }
        }
    }
}

/// Forward 3D convolution over a batch. `x` is `[N, cin, D, H, W]`,
/// `weight` is `[cout, cin, k, k, k]`.
pub fn conv3d_forward(x: &[f64], batch: usize, g: &ConvGeom, weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let in_per = g.cin * g.dims.iter().product::<usize>();
    let p: usize = g.out_dims().iter().product();
    let kk = g.cin * g.kvol();
    let mut out = vec![0.0; batch * g.cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * p]
    };
    for n in 0..batch {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let on = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(b) = bias {
            for (co, chunk) in on.chunks_mut(p).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(g.cout, kk, p, weight, (kk, 1), src, (p, 1), beta, on);
    }
    out
}

/// Gradients of [`conv3d_forward`]. Returns `(dx, dweight, dbias)`, skipping
/// the pieces the caller does not need.
#[allow(clippy::type_complexity)]
pub fn conv3d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    dout: &[f64],
    need: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_per = g.cin * g.dims.iter().product::<usize>();
    let p: usize = g.out_dims().iter().product();
    let kk = g.cin * g.kvol();
    let mut dx = need.0.then(|| vec![0.0; batch * in_per]);
    let mut dw = need.1.then(|| vec![0.0; g.cout * kk]);
    let mut db = need.2.then(|| vec![0.0; g.cout]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { kk * p }];
    let mut dcols = vec![0.0; if need.0 && !g.is_pointwise() { kk * p } else { 0 }];
    for n in 0..batch {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let dn = &dout[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dn.chunks(p).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[f64] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dW[co, K] += dout[co, P] · cols[K, P]^T
            gemm(g.cout, p, kk, dn, (p, 1), src, (1, p), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                gemm(kk, g.cout, p, weight, (1, kk), dn, (p, 1), 1.0, dxn);
            } else {
                gemm(kk, g.cout, p, weight, (1, kk), dn, (p, 1), 0.0, &mut dcols);
                col2im(&dcols, g, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2× upsampling).
/// `weight` is `[cin, cout, 2, 2, 2]`.
pub fn convt2_forward(
    x: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let [d, h, w] = dims;
    let s = d * h * w;
    let m = cout * 8;
    let mut y = vec![0.0; m * s];
    let mut out = vec![0.0; batch * cout * s * 8];
    for n in 0..batch {
        let xn = &x[n * cin * s..(n + 1) * cin * s];
        gemm(m, cin, s, weight, (1, m), xn, (s, 1), 0.0, &mut y);
        let on = &mut out[n * cout * s * 8..(n + 1) * cout * s * 8];
        for co in 0..cout {
            let b = bias.map_or(0.0, |b| b[co]);
            for a in 0..8 {
                let (oa, ob, oc) = (a >> 2, (a >> 1) & 1, a & 1);
                let row = &y[(co * 8 + a) * s..(co * 8 + a + 1) * s];
                for z in 0..d {
                    for yy in 0..h {
                        for xx in 0..w {
                            let o = ((co * 2 * d + 2 * z + oa) * 2 * h + 2 * yy + ob) * 2 * w + 2 * xx + oc;
                            on[o] = row[(z * h + yy) * w + xx] + b;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub fn convt2_backward(
    x: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    weight: &[f64],
    dout: &[f64],
    need: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let [d, h, w] = dims;
    let s = d * h * w;
    let m = cout * 8;
    let mut dx = need.0.then(|| vec![0.0; batch * cin * s]);
    let mut dw = need.1.then(|| vec![0.0; cin * m]);
    let mut db = need.2.then(|| vec![0.0; cout]);
    let mut dy = vec![0.0; m * s];
    for n in 0..batch {
        let dn = &dout[n * cout * s * 8..(n + 1) * cout * s * 8];
        for co in 0..cout {
            for a in 0..8 {
                let (oa, ob, oc) = (a >> 2, (a >> 1) & 1, a & 1);
                let row = &mut dy[(co * 8 + a) * s..(co * 8 + a + 1) * s];
                for z in 0..d {
                    for yy in 0..h {
                        for xx in 0..w {
                            let o = ((co * 2 * d + 2 * z + oa) * 2 * h + 2 * yy + ob) * 2 * w + 2 * xx + oc;
                            row[(z * h + yy) * w + xx] = dn[o];
                        }
                    }
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dy.chunks(8 * s).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        let xn = &x[n * cin * s..(n + 1) * cin * s];
        if let Some(dw) = dw.as_mut() {
            gemm(cin, s, m, xn, (s, 1), &dy, (1, s), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                cin,
                m,
                s,
                weight,
                (m, 1),
                &dy,
                (s, 1),
                1.0,
                &mut dx[n * cin * s..(n + 1) * cin * s],
            );
        }
    }
    (dx, dw, db)
}
