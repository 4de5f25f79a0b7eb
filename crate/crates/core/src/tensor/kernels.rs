// Dense kernels shared by forward and backward passes. All loops run in a
// fixed order so results are bit-reproducible.

/// `c += op(a) · op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of shape
/// `[k, n]`. `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let c_row = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    for (cv, bv) in c_row.iter_mut().zip(b_row) {
                        *cv += aip * bv;
                    }
                }
            }
        }
        (false, true) if k < 16 => {
            // short rows: transpose b once and use the streaming path
            let mut bt = vec![0.0; k * n];
            for j in 0..n {
                for p in 0..k {
                    bt[p * n + j] = b[j * k + p];
                }
            }
            gemm(false, false, m, n, k, a, &bt, c);
        }
        (false, true) => {
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let b_row = &b[j * k..(j + 1) * k];
                    c[i * n + j] += dot(a_row, b_row);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let b_row = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == 0.0 {
                        continue;
                    }
                    let c_row = &mut c[i * n..(i + 1) * n];
                    for (cv, bv) in c_row.iter_mut().zip(b_row) {
                        *cv += api * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators, fixed combination order
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for (l, slot) in acc.iter_mut().enumerate() {
            *slot += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of one 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub len_out: usize,
}

impl ConvGeom {
    /// Output positions `t` in `[lo, hi)` read an in-bounds input sample
    /// for kernel tap `k`.
    #[inline]
    fn valid_range(&self, k: usize) -> (usize, usize) {
        // idx = t*stride + k - padding must lie in [0, len)
        let lo = if k >= self.padding {
            0
        } else {
            (self.padding - k).div_ceil(self.stride)
        };
        let hi = if self.len + self.padding > k {
            ((self.len + self.padding - k - 1) / self.stride + 1).min(self.len_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub(crate) fn conv1d_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    for n in 0..g.n {
        for co in 0..g.c_out {
            let o = &mut out[(n * g.c_out + co) * g.len_out..][..g.len_out];
            for ci in 0..g.c_in {
                let xr = &x[(n * g.c_in + ci) * g.len..][..g.len];
                let wr = &w[(co * g.c_in + ci) * g.kernel..][..g.kernel];
                for (k, &wv) in wr.iter().enumerate() {
                    let (lo, hi) = g.valid_range(k);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * g.stride + k - g.padding;
                    if g.stride == 1 {
                        for (ov, xv) in o[lo..hi].iter_mut().zip(&xr[start..start + hi - lo]) {
                            *ov += wv * xv;
                        }
                    } else {
                        for (j, ov) in o[lo..hi].iter_mut().enumerate() {
                            *ov += wv * xr[start + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and kernel gradients for [`conv1d_forward`].
pub(crate) fn conv1d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for n in 0..g.n {
            for co in 0..g.c_out {
                let d = &dout[(n * g.c_out + co) * g.len_out..][..g.len_out];
                for ci in 0..g.c_in {
                    let dxr = &mut dx[(n * g.c_in + ci) * g.len..][..g.len];
                    let wr = &w[(co * g.c_in + ci) * g.kernel..][..g.kernel];
                    for (k, &wv) in wr.iter().enumerate() {
                        let (lo, hi) = g.valid_range(k);
                        if lo >= hi {
                            continue;
                        }
                        let start = lo * g.stride + k - g.padding;
                        if g.stride == 1 {
                            for (xv, dv) in dxr[start..start + hi - lo].iter_mut().zip(&d[lo..hi]) {
                                *xv += wv * dv;
                            }
                        } else {
                            for (j, dv) in d[lo..hi].iter().enumerate() {
                                dxr[start + j * g.stride] += wv * dv;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for n in 0..g.n {
            for co in 0..g.c_out {
                let d = &dout[(n * g.c_out + co) * g.len_out..][..g.len_out];
                for ci in 0..g.c_in {
                    let xr = &x[(n * g.c_in + ci) * g.len..][..g.len];
                    let dwr = &mut dw[(co * g.c_in + ci) * g.kernel..][..g.kernel];
                    for (k, dwv) in dwr.iter_mut().enumerate() {
                        let (lo, hi) = g.valid_range(k);
                        if lo >= hi {
                            continue;
                        }
                        let start = lo * g.stride + k - g.padding;
                        if g.stride == 1 {
                            *dwv += dot(&d[lo..hi], &xr[start..start + hi - lo]);
                        } else {
                            let mut s = 0.0;
                            for (j, dv) in d[lo..hi].iter().enumerate() {
                                s += dv * xr[start + j * g.stride];
                            }
                            *dwv += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        a: &[f64],
        b: &[f64],
    ) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn gemm_all_transpose_variants() {
        for (m, n, k) in [(3, 5, 4), (4, 3, 20)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            for ta in [false, true] {
                for tb in [false, true] {
                    let mut c = vec![0.0; m * n];
                    gemm(ta, tb, m, n, k, &a, &b, &mut c);
                    let want = naive_gemm(ta, tb, m, n, k, &a, &b);
                    for (x, y) in c.iter().zip(&want) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn valid_range_matches_bounds_check() {
        for &(len, kernel, stride, padding) in
            &[(16, 3, 1, 1), (16, 5, 2, 2), (7, 3, 3, 0), (5, 5, 1, 4)]
        {
            let len_out = (len + 2 * padding - kernel) / stride + 1;
            let g = ConvGeom {
                n: 1,
                c_in: 1,
                c_out: 1,
                len,
                kernel,
                stride,
                padding,
                len_out,
            };
            for k in 0..kernel {
                let (lo, hi) = g.valid_range(k);
                for t in 0..len_out {
                    let idx = (t * stride + k) as isize - padding as isize;
                    let inside = idx >= 0 && (idx as usize) < len;
                    assert_eq!(inside, t >= lo && t < hi, "len={len} k={k} t={t}");
                }
            }
        }
    }
}
