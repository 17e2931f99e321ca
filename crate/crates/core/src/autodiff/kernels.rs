//! Slice-level numeric kernels shared by the forward and backward passes.

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of a 1-D convolution: `x[B,C_in,N] ⋆ w[C_out,C_in,K]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn len_out(&self) -> usize {
        self.len_in + 2 * self.padding + 1 - self.kernel
    }

    /// Output positions `t` for which tap `j` reads an in-bounds input.
    fn valid_range(&self, j: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(j);
        let hi = (self.len_in + self.padding)
            .saturating_sub(j)
            .min(self.len_out());
        (lo, hi.max(lo))
    }
}

/// Cross-correlation with zero padding.
pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: ConvDims) -> Vec<f64> {
    let n_out = d.len_out();
    let mut out = vec![0.0; d.batch * d.c_out * n_out];
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let orow = &mut out[(b * d.c_out + o) * n_out..(b * d.c_out + o + 1) * n_out];
            if let Some(bias) = bias {
                orow.iter_mut().for_each(|v| *v = bias[o]);
            }
            for c in 0..d.c_in {
                let xrow = &x[(b * d.c_in + c) * d.len_in..(b * d.c_in + c + 1) * d.len_in];
                for j in 0..d.kernel {
                    let wv = w[(o * d.c_in + c) * d.kernel + j];
                    let (lo, hi) = d.valid_range(j);
                    let shift = j as isize - d.padding as isize;
                    for t in lo..hi {
                        orow[t] += wv * xrow[(t as isize + shift) as usize];
                    }
                }
            }
        }
    }
    out
}

/// Gradients of the convolution w.r.t. input, weight and bias.
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    d: ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n_out = d.len_out();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; d.c_out];
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let grow = &gout[(b * d.c_out + o) * n_out..(b * d.c_out + o + 1) * n_out];
            gb[o] += grow.iter().sum::<f64>();
            for c in 0..d.c_in {
                let base = (b * d.c_in + c) * d.len_in;
                for j in 0..d.kernel {
                    let widx = (o * d.c_in + c) * d.kernel + j;
                    let wv = w[widx];
                    let (lo, hi) = d.valid_range(j);
                    let shift = j as isize - d.padding as isize;
                    let mut acc = 0.0;
                    for t in lo..hi {
                        let xi = base + (t as isize + shift) as usize;
                        acc += grow[t] * x[xi];
                        gx[xi] += wv * grow[t];
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |r: usize| (o * len + r) * inner + i;
            let m = (0..len).map(|r| x[at(r)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in 0..len {
                let e = (x[at(r)] - m).exp();
                y[at(r)] = e;
                z += e;
            }
            for r in 0..len {
                y[at(r)] /= z;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(
    y: &[f64],
    g: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |r: usize| (o * len + r) * inner + i;
            let s: f64 = (0..len).map(|r| g[at(r)] * y[at(r)]).sum();
            for r in 0..len {
                gx[at(r)] = y[at(r)] * (g[at(r)] - s);
            }
        }
    }
    gx
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x · Φ(x)`.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        assert_eq!(c.len(), naive.len());
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // b transposed to [n,k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c2, m, k, n);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ·c where a is [m,k]
        let mut at_c = vec![0.0; k * n];
        gemm_tn(&a, &naive, &mut at_c, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * naive[i * n + j]).sum();
                assert!((at_c[p * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
