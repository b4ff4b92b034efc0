//! Negative-binomial maximum likelihood for epochs-to-shatter counts.

use statrs::function::gamma::ln_gamma;

/// Fitted NB(r, p) with P(X = k) = C(k+r−1, k)·(1−p)^k·p^r.
///
/// `p` is profiled out: for fixed r the MLE is p = r/(r + mean), which
/// pins the fitted mean to the sample mean exactly. `degenerate` marks
/// samples the family cannot represent (under-dispersed or constant
/// counts, where the likelihood pushes r to the Poisson limit).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NbFit {
    pub r: f64,
    pub p: f64,
    pub mean: f64,
    pub log_likelihood: f64,
    pub degenerate: bool,
}

const LN_R_LO: f64 = -7.0; // r ≈ 9e-4
const LN_R_HI: f64 = 16.0; // r ≈ 8.9e6

pub fn fit_negative_binomial(counts: &[u32]) -> Option<NbFit> {
    if counts.is_empty() {
        return None;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    if mean == 0.0 {
        // All-zero counts: point mass at zero, p → 1.
        return Some(NbFit { r: 1.0, p: 1.0, mean, log_likelihood: 0.0, degenerate: true });
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;

    let loglik = |ln_r: f64| -> f64 {
        let r = ln_r.exp();
        let p = r / (r + mean);
        let mut ll = 0.0;
        for &k in counts {
            let kf = k as f64;
            ll += ln_gamma(kf + r) - ln_gamma(r) - ln_gamma(kf + 1.0);
            ll += r * p.ln() + kf * (1.0 - p).ln();
        }
        ll
    };

    // Golden-section search on ln r; the profile likelihood is unimodal.
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (LN_R_LO, LN_R_HI);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (loglik(x1), loglik(x2));
    for _ in 0..200 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = loglik(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = loglik(x1);
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    let ln_r = 0.5 * (lo + hi);
    let r = ln_r.exp();
    let p = r / (r + mean);

    // Constant or under-dispersed counts push r to the upper boundary.
    let degenerate = var <= mean || ln_r > LN_R_HI - 0.5 || counts.len() < 2;
    Some(NbFit { r, p, mean, log_likelihood: loglik(ln_r), degenerate })
}
