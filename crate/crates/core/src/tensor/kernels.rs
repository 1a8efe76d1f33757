//! Dense row-major kernels shared by the tape and the cached sampler.
//!
//! Every output element of a product is accumulated in ascending order of the
//! contraction index with separate multiply and add, so a row's result never
//! depends on how many other rows are computed alongside it.

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        orow.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n, out);
}

/// `out[k×n] += a[m×k]ᵀ · c[m×n]`
pub fn matmul_tn_acc(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let crow = &c[r * n..(r + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += ap * cv;
            }
        }
    }
}

/// Numerically stable softmax of each row of length `cols`.
pub fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }
}

pub fn log_softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = xr.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

/// Layer normalization over rows; writes per-row mean and reciprocal std.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    cols: usize,
    out: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
) {
    for (r, (xr, or)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let mu = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for ((o, &v), (&g, &b)) in or.iter_mut().zip(xr).zip(gain.iter().zip(bias)) {
            *o = (v - mu) * rs * g + b;
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

/// `y[r, :] += bias`
pub fn add_bias(y: &mut [f64], bias: &[f64]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn relu_inplace(y: &mut [f64]) {
    for v in y {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let m = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        matmul(&eye, &m, 2, 2, 2, &mut out);
        assert_eq!(out, m);
    }

    #[test]
    fn rows_independent_of_batch() {
        let k = 7;
        let n = 5;
        let a: Vec<f64> = (0..3 * k).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 17) as f64).cos()).collect();
        let mut full = vec![0.0; 3 * n];
        matmul(&a, &b, 3, k, n, &mut full);
        let mut single = vec![0.0; n];
        matmul(&a[2 * k..], &b, 1, k, n, &mut single);
        assert_eq!(&full[2 * n..], &single[..]);
    }

    #[test]
    fn softmax_stability() {
        let mut out = [0.0; 2];
        softmax_rows(&[0.0, 0.0], 2, &mut out);
        assert_eq!(out, [0.5, 0.5]);
        softmax_rows(&[1000.0, 1000.0], 2, &mut out);
        assert_eq!(out, [0.5, 0.5]);
        softmax_rows(&[0.0, f64::NEG_INFINITY], 2, &mut out);
        assert_eq!(out, [1.0, 0.0]);
    }

    #[test]
    fn layer_norm_unit_input() {
        let mut out = [0.0; 2];
        let mut mean = [0.0];
        let mut rstd = [0.0];
        layer_norm_rows(
            &[1.0, -1.0],
            &[1.0, 1.0],
            &[0.0, 0.0],
            1e-5,
            2,
            &mut out,
            &mut mean,
            &mut rstd,
        );
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out[0] - expected).abs() < 1e-15);
        assert!((out[1] + expected).abs() < 1e-15);
        assert!((out[0] - 0.99999).abs() < 1e-5);
    }
}
