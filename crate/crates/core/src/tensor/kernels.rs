//! Slice-level numerical kernels shared by the forward and backward passes.

use super::Real;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (row-major, `shape`) into the layout given by axis permutation `perm`.
pub(crate) fn permute<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_stride[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_stride[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `[m, k] x [k, n]` (or `[n, k]` transposed) into a fresh buffer.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, trans_b: bool) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    T::gemm(m, k, n, T::ONE, a, k, 1, b, rsb, csb, T::ZERO, &mut c, n, 1);
    c
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Output extent and (leading, trailing) zero padding for SAME convolution.
pub(crate) fn same_padding(input: usize, stride: usize, kernel: usize) -> (usize, usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    let lead = total / 2;
    (out, lead, total - lead)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub sh: usize,
    pub sw: usize,
    pub pt: usize,
    pub pl: usize,
}

pub(crate) const KSIZE: usize = 3;
const CONV_BLOCK: usize = 2048;

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * KSIZE * KSIZE
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Fills `col[k_row * blk + j]` for output positions `p0..p0+blk` of one image.
    fn im2col<T: Real>(&self, x: &[T], p0: usize, blk: usize, col: &mut [T]) {
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..KSIZE {
                for kx in 0..KSIZE {
                    let r = (ci * KSIZE + ky) * KSIZE + kx;
                    let dst = &mut col[r * blk..(r + 1) * blk];
                    for (j, slot) in dst.iter_mut().enumerate() {
                        let p = p0 + j;
                        let iy = (p / self.wo) * self.sh + ky;
                        let ix = (p % self.wo) * self.sw + kx;
                        *slot = if iy < self.pt || ix < self.pl {
                            T::ZERO
                        } else {
                            let (iy, ix) = (iy - self.pt, ix - self.pl);
                            if iy < self.h && ix < self.w {
                                plane[iy * self.w + ix]
                            } else {
                                T::ZERO
                            }
                        };
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], p0: usize, blk: usize, dx: &mut [T]) {
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..KSIZE {
                for kx in 0..KSIZE {
                    let r = (ci * KSIZE + ky) * KSIZE + kx;
                    let src = &col[r * blk..(r + 1) * blk];
                    for (j, &v) in src.iter().enumerate() {
                        let p = p0 + j;
                        let iy = (p / self.wo) * self.sh + ky;
                        let ix = (p % self.wo) * self.sw + kx;
                        if iy >= self.pt && ix >= self.pl {
                            let (iy, ix) = (iy - self.pt, ix - self.pl);
                            if iy < self.h && ix < self.w {
                                plane[iy * self.w + ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (k, p) = (self.k(), self.positions());
        let mut out = vec![T::ZERO; self.n * self.c_out * p];
        let mut col = vec![T::ZERO; k * CONV_BLOCK.min(p)];
        for b in 0..self.n {
            let xb = &x[b * self.c_in * self.h * self.w..(b + 1) * self.c_in * self.h * self.w];
            let ob = &mut out[b * self.c_out * p..(b + 1) * self.c_out * p];
            let mut p0 = 0;
            while p0 < p {
                let blk = CONV_BLOCK.min(p - p0);
                self.im2col(xb, p0, blk, &mut col);
                T::gemm(
                    self.c_out,
                    k,
                    blk,
                    T::ONE,
                    w,
                    k,
                    1,
                    &col,
                    blk,
                    1,
                    T::ZERO,
                    &mut ob[p0..],
                    p,
                    1,
                );
                p0 += blk;
            }
        }
        out
    }

    /// Accumulates into `dx` and `dw` when requested.
    pub fn backward<T: Real>(
        &self,
        x: &[T],
        w: &[T],
        dy: &[T],
        mut dx: Option<&mut [T]>,
        mut dw: Option<&mut [T]>,
    ) {
        let (k, p) = (self.k(), self.positions());
        let cap = CONV_BLOCK.min(p);
        let mut col = vec![T::ZERO; k * cap];
        let mut dcol = vec![T::ZERO; k * cap];
        for b in 0..self.n {
            let img = self.c_in * self.h * self.w;
            let xb = &x[b * img..(b + 1) * img];
            let dyb = &dy[b * self.c_out * p..(b + 1) * self.c_out * p];
            let mut p0 = 0;
            while p0 < p {
                let blk = cap.min(p - p0);
                if let Some(dw) = dw.as_deref_mut() {
                    self.im2col(xb, p0, blk, &mut col);
                    // dw[c_out, k] += dy[c_out, blk] * col[k, blk]^T
                    T::gemm(
                        self.c_out,
                        blk,
                        k,
                        T::ONE,
                        &dyb[p0..],
                        p,
                        1,
                        &col,
                        1,
                        blk,
                        T::ONE,
                        dw,
                        k,
                        1,
                    );
                }
                if let Some(dx) = dx.as_deref_mut() {
                    // dcol[k, blk] = w^T[k, c_out] * dy[c_out, blk]
                    T::gemm(
                        k,
                        self.c_out,
                        blk,
                        T::ONE,
                        w,
                        1,
                        k,
                        &dyb[p0..],
                        p,
                        1,
                        T::ZERO,
                        &mut dcol,
                        blk,
                        1,
                    );
                    self.col2im(&dcol, p0, blk, &mut dx[b * img..(b + 1) * img]);
                }
                p0 += blk;
            }
        }
    }
}

/// Row softmax with optional key masking. Masked entries come out exactly zero.
/// Returns `None` if some row has no admissible finite entry.
pub(crate) fn softmax_rows<T: Real>(
    x: &[T],
    cols: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Option<Vec<T>> {
    let mut out = vec![T::ZERO; x.len()];
    for (r, (xr, yr)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let mut max = T::NEG_INFINITY;
        for (c, &v) in xr.iter().enumerate() {
            if allowed(r, c) && v > max {
                max = v;
            }
        }
        if !max.is_finite() {
            return None;
        }
        let mut sum = T::ZERO;
        for (c, (&v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
            if allowed(r, c) {
                let e = (v - max).exp();
                *y = e;
                sum += e;
            }
        }
        for y in yr.iter_mut() {
            *y /= sum;
        }
    }
    Some(out)
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], dy: &[T], cols: usize, dx: &mut [T]) {
    for ((yr, gr), dr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (g - dot);
        }
    }
}

/// Normalizes each group of values given by `members(group)`; returns (xhat, rstd, mean, biased var).
pub(crate) fn normalize_groups<T: Real>(
    x: &[T],
    groups: usize,
    members: impl Fn(usize) -> Vec<usize>,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = Vec::with_capacity(groups);
    let mut means = Vec::with_capacity(groups);
    let mut vars = Vec::with_capacity(groups);
    for g in 0..groups {
        let idx = members(g);
        let n = T::from_f64(idx.len() as f64);
        let mean = idx.iter().map(|&i| x[i]).sum::<T>() / n;
        let var = idx
            .iter()
            .map(|&i| {
                let d = x[i] - mean;
                d * d
            })
            .sum::<T>()
            / n;
        let r = T::ONE / (var + T::from_f64(eps)).sqrt();
        for &i in &idx {
            xhat[i] = (x[i] - mean) * r;
        }
        rstd.push(r);
        means.push(mean);
        vars.push(var);
    }
    (xhat, rstd, means, vars)
}

/// Backward of `xhat = (x - mean) * rstd` given `g = dL/dxhat`, per contiguous group of size `len`.
pub(crate) fn normalize_backward_rows<T: Real>(
    xhat: &[T],
    g: &[T],
    rstd: &[T],
    len: usize,
    dx: &mut [T],
) {
    let n = T::from_f64(len as f64);
    for (r, ((xh, gr), dr)) in xhat
        .chunks(len)
        .zip(g.chunks(len))
        .zip(dx.chunks_mut(len))
        .enumerate()
    {
        let mg = gr.iter().copied().sum::<T>() / n;
        let mgx = gr.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((d, &gv), &xv) in dr.iter_mut().zip(gr).zip(xh) {
            *d += rstd[r] * (gv - mg - xv * mgx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_naive_transpose() {
        let src: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let out = permute(&src, &[2, 3, 4], &[2, 0, 1]);
        // out[k][i][j] = src[i][j][k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], src[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = permute(&out, &[4, 2, 3], &inverse_perm(&[2, 0, 1]));
        assert_eq!(back, src);
    }

    #[test]
    fn same_padding_ceiling_rule() {
        for input in 1..=8 {
            for stride in 1..=8 {
                let (out, lead, trail) = same_padding(input, stride, 3);
                assert_eq!(out, input.div_ceil(stride));
                assert!(trail >= lead && trail - lead <= 1);
            }
        }
    }
}
