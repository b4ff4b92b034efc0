//! Raw numeric kernels behind the graph ops.
//!
//! Each differentiable primitive keeps its forward and backward rule
//! here as plain slice functions; the graph records which kernel to
//! replay. Backward kernels accumulate (`+=`) into their output so
//! fan-out gradients sum naturally. Matrix products go through
//! `matrixmultiply::dgemm`.

use statrs::function::erf::erf;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// C := A·B + beta·C for row-major buffers, with optional logical
/// transposes. With `ta` the `a` buffer is stored [k, m]; with `tb` the
/// `b` buffer is stored [n, k].
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
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

/// Batched C_s := A_s·B_s + beta·C_s over `s` leading blocks.
#[allow(clippy::too_many_arguments)]
pub fn bmm(
    batches: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (sa, sb, sc) = (m * k, k * n, m * n);
    for s in 0..batches {
        gemm(
            m,
            k,
            n,
            &a[s * sa..(s + 1) * sa],
            ta,
            &b[s * sb..(s + 1) * sb],
            tb,
            beta,
            &mut c[s * sc..(s + 1) * sc],
        );
    }
}

/// Row softmax over the last dimension after dividing by `scale`.
/// With `causal_rows = Some(m)` the rows are treated as m×n blocks and
/// entry (i, j) with j > i within a block is masked out.
pub fn softmax_fwd(x: &[f64], rows: usize, cols: usize, scale: f64, causal_rows: Option<usize>, y: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out = &mut y[r * cols..(r + 1) * cols];
        let visible = match causal_rows {
            Some(m) => (r % m + 1).min(cols),
            None => cols,
        };
        let mut max = f64::NEG_INFINITY;
        for &v in &row[..visible] {
            max = max.max(v / scale);
        }
        let mut sum = 0.0;
        for j in 0..visible {
            let e = (row[j] / scale - max).exp();
            out[j] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for v in &mut out[..visible] {
            *v *= inv;
        }
        for v in &mut out[visible..] {
            *v = 0.0;
        }
    }
}

/// dx += (y ⊙ (dy − <dy, y>)) / scale, rowwise. Masked entries have
/// y = 0 and therefore receive no gradient.
pub fn softmax_bwd(y: &[f64], dy: &[f64], rows: usize, cols: usize, scale: f64, dx: &mut [f64]) {
    let inv_scale = 1.0 / scale;
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            dxr[j] += yr[j] * (dyr[j] - dot) * inv_scale;
        }
    }
}

/// Exact-erf GELU: x · Φ(x) with Φ the standard normal CDF.
pub fn gelu_fwd(x: &[f64], y: &mut [f64]) {
    for (out, &v) in y.iter_mut().zip(x) {
        *out = 0.5 * v * (1.0 + erf(v * INV_SQRT_2));
    }
}

/// dx += dy ⊙ (Φ(x) + x·φ(x)).
pub fn gelu_bwd(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for i in 0..x.len() {
        let v = x[i];
        let cdf = 0.5 * (1.0 + erf(v * INV_SQRT_2));
        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
        dx[i] += dy[i] * (cdf + v * pdf);
    }
}

/// Normalizes each row to zero mean and unit variance with fixed unit
/// gain and zero bias. Returns 1/sqrt(var + eps) per row for backward.
pub fn layer_norm_fwd(x: &[f64], rows: usize, cols: usize, eps: f64, y: &mut [f64], inv_std: &mut Vec<f64>) {
    inv_std.clear();
    inv_std.reserve(rows);
    let nf = cols as f64;
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / nf;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let out = &mut y[r * cols..(r + 1) * cols];
        for j in 0..cols {
            out[j] = (row[j] - mean) * is;
        }
    }
}

/// dx += inv_std ⊙ (dy − mean(dy) − y·mean(dy ⊙ y)), rowwise.
pub fn layer_norm_bwd(y: &[f64], inv_std: &[f64], dy: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    let nf = cols as f64;
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        let mean_dy = dyr.iter().sum::<f64>() / nf;
        let mean_dyy = dyr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
        let is = inv_std[r];
        for j in 0..cols {
            dxr[j] += is * (dyr[j] - mean_dy - yr[j] * mean_dyy);
        }
    }
}

/// Weighted mean negative log-softmax-probability of the target column
/// per row. Returns the loss and stores the row softmax in `probs`.
pub fn cross_entropy_fwd(
    logits: &[f64],
    rows: usize,
    cols: usize,
    targets: &[u32],
    weights: Option<&[f64]>,
    probs: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let out = &mut probs[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..cols {
            let e = (row[j] - max).exp();
            out[j] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for v in out.iter_mut() {
            *v *= inv;
        }
        let w = weights.map_or(1.0, |w| w[r]);
        // -log p(target) = log(sum) + max - logit(target)
        total += w * (sum.ln() + max - row[targets[r] as usize]);
        weight_sum += w;
    }
    total / weight_sum
}

/// dlogits += dloss · w_r/(sum w) · (softmax(row) − onehot(target)).
pub fn cross_entropy_bwd(
    probs: &[f64],
    rows: usize,
    cols: usize,
    targets: &[u32],
    weights: Option<&[f64]>,
    dloss: f64,
    dlogits: &mut [f64],
) {
    let weight_sum = weights.map_or(rows as f64, |w| w.iter().sum());
    for r in 0..rows {
        let w = weights.map_or(1.0, |w| w[r]);
        if w == 0.0 {
            continue;
        }
        let coeff = dloss * w / weight_sum;
        let pr = &probs[r * cols..(r + 1) * cols];
        let dr = &mut dlogits[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dr[j] += coeff * pr[j];
        }
        dr[targets[r] as usize] -= coeff;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // Aᵀ path: stored 3x2 read as 2x3.
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c2, c);

        // Bᵀ path: stored 2x3 read as 3x2.
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c3 = [0.0; 4];
        gemm(2, 3, 2, &a, false, &bt, true, 0.0, &mut c3);
        assert_eq!(c3, c);
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = [2.0];
        let b = [3.0];
        let mut c = [10.0];
        gemm(1, 1, 1, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c, [16.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
        let mut y = [0.0; 6];
        softmax_fwd(&x, 2, 3, 2.0, None, &mut y);
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let x = [0.0; 9];
        let mut y = [0.0; 9];
        softmax_fwd(&x, 3, 3, 1.0, Some(3), &mut y);
        assert_eq!(&y[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&y[3..6], &[0.5, 0.5, 0.0]);
        for v in &y[6..9] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_known_values() {
        let x = [0.0, 10.0, -10.0];
        let mut y = [0.0; 3];
        gelu_fwd(&x, &mut y);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-6);
        assert!(y[2].abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = [5.0, 5.0, 5.0, 5.0];
        let mut y = [0.0; 4];
        let mut inv_std = Vec::new();
        layer_norm_fwd(&x, 1, 4, 1e-5, &mut y, &mut inv_std);
        for v in y {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_t() {
        let logits = vec![0.25; 128];
        let mut probs = vec![0.0; 128];
        let loss = cross_entropy_fwd(&logits, 1, 128, &[17], None, &mut probs);
        assert!((loss - (128.0f64).ln()).abs() < 1e-12);
    }
}
