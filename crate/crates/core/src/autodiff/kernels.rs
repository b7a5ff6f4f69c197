//! Numeric kernels behind the tape ops. Row-major throughout.

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `trans_a` means `a` is stored as `k x m`; `trans_b` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the kernel touches given
    // these strides; `c` does not alias `a` or `b` (distinct borrows).
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub ksize: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.ksize / 2) as isize
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.ksize * self.ksize
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (h, w, ks, pad) = (g.h as isize, g.w as isize, g.ksize, g.pad());
    let hw = g.hw();
    for c in 0..g.c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = (c * ks + ky) * ks + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy + ky as isize - pad;
                    let out_row = &mut dst[(oy * w) as usize..((oy + 1) * w) as usize];
                    if iy < 0 || iy >= h {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    for ox in 0..w {
                        let ix = ox + kx as isize - pad;
                        out_row[ox as usize] = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (h, w, ks, pad) = (g.h as isize, g.w as isize, g.ksize, g.pad());
    let hw = g.hw();
    for c in 0..g.c_in {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = (c * ks + ky) * ks + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            plane[(iy * w + ix) as usize] += src[(oy * w + ox) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution over a batch laid out as `[B, C_in, H, W]`.
pub(crate) fn conv2d_forward(g: &ConvGeom, batch: usize, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = g.hw();
    let in_len = g.c_in * hw;
    let out_len = g.c_out * hw;
    let mut out = vec![0.0; batch * out_len];
    let mut cols = vec![0.0; g.col_rows() * hw];
    for b in 0..batch {
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (co, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(bias[co]);
        }
        gemm(g.c_out, g.col_rows(), hw, kernel, false, &cols, false, dst, 1.0);
    }
    out
}

/// Returns `(dx, dkernel, dbias)`; the parts not requested are `None`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = g.hw();
    let in_len = g.c_in * hw;
    let out_len = g.c_out * hw;
    let rows = g.col_rows();
    let mut dx = want_dx.then(|| vec![0.0; batch * in_len]);
    let mut dk = want_dk.then(|| vec![0.0; g.c_out * rows]);
    let mut db = want_dk.then(|| vec![0.0; g.c_out]);
    let mut cols = vec![0.0; rows * hw];
    for b in 0..batch {
        let d = &dout[b * out_len..(b + 1) * out_len];
        if let (Some(dk), Some(db)) = (dk.as_mut(), db.as_mut()) {
            im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
            gemm(g.c_out, hw, rows, d, false, &cols, true, dk, 1.0);
            for (co, plane) in d.chunks(hw).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, g.c_out, hw, kernel, true, d, false, &mut cols, 0.0);
            col2im_add(g, &cols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dk, db)
}

/// 2x2 stride-2 max pooling over `[N, H, W]` planes; odd trailing rows/columns are dropped.
/// Ties resolve to the first maximum in row-major window order.
pub(crate) fn maxpool2_forward(planes: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// `-log softmax(z)[label]` with max subtraction.
pub(crate) fn xent_row(z: &[f64], label: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

#[inline]
pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpositions() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let g = ConvGeom { c_in: 1, c_out: 1, h: 3, w: 3, ksize: 3 };
        let out = conv2d_forward(&g, 1, &[1.0; 9], &[1.0; 9], &[0.0]);
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(-800.0)).is_finite());
    }
}
