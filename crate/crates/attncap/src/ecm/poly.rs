//! Degree-5 polynomial baseline in (H, N, B): all 56 monomials of
//! total degree <= 5, least-squares fitted on standardized inputs.

use nalgebra::{DMatrix, DVector};

use crate::ecm::CapacityPoint;
use crate::error::{Error, Result};

/// Monomials of total degree <= 5 in three variables: C(8, 3) = 56.
pub const POLY5_TERMS: usize = 56;

/// Exponent triples (i, j, k) for h^i · n^j · b^k, ordered by total
/// degree then lexicographically. The coefficient vector follows this
/// order.
pub fn monomial_exponents() -> Vec<(u32, u32, u32)> {
    let mut out = Vec::with_capacity(POLY5_TERMS);
    for degree in 0..=5u32 {
        for i in 0..=degree {
            for j in 0..=(degree - i) {
                out.push((i, j, degree - i - j));
            }
        }
    }
    debug_assert_eq!(out.len(), POLY5_TERMS);
    out
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Poly5Model {
    /// 56 coefficients over standardized monomials, in
    /// `monomial_exponents` order.
    pub coefficients: Vec<f64>,
    pub h_mean: f64,
    pub h_std: f64,
    pub n_mean: f64,
    pub n_std: f64,
    pub b_mean: f64,
    pub b_std: f64,
    /// The plain least-squares system was rank deficient and a ridge
    /// term was added.
    pub ridge_used: bool,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

fn features(z_h: f64, z_n: f64, z_b: f64, exponents: &[(u32, u32, u32)]) -> Vec<f64> {
    exponents
        .iter()
        .map(|&(i, j, k)| z_h.powi(i as i32) * z_n.powi(j as i32) * z_b.powi(k as i32))
        .collect()
}

/// Least-squares fit of the 56-term polynomial. Inputs are standardized
/// (z = (x − mean)/std) before the monomials are formed; predictions
/// re-apply the same transform, so the model is usable on raw (H, N, B).
pub fn fit_poly5(points: &[CapacityPoint]) -> Result<Poly5Model> {
    if points.len() < POLY5_TERMS {
        return Err(Error::Coverage(format!(
            "polynomial baseline needs >= {POLY5_TERMS} measurements, got {}",
            points.len()
        )));
    }
    let (h_mean, h_std) = mean_std(points.iter().map(|p| p.h));
    let (n_mean, n_std) = mean_std(points.iter().map(|p| p.n));
    let (b_mean, b_std) = mean_std(points.iter().map(|p| p.b));
    let exponents = monomial_exponents();

    let rows = points.len();
    let mut design = DMatrix::<f64>::zeros(rows, POLY5_TERMS);
    let mut target = DVector::<f64>::zeros(rows);
    for (r, p) in points.iter().enumerate() {
        let row = features(
            (p.h - h_mean) / h_std,
            (p.n - n_mean) / n_std,
            (p.b - b_mean) / b_std,
            &exponents,
        );
        for (c, v) in row.into_iter().enumerate() {
            design[(r, c)] = v;
        }
        target[r] = p.c;
    }

    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = max_sv * 1e-10;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();

    let (solution, ridge_used) = if rank == POLY5_TERMS {
        let sol = svd
            .solve(&target, cutoff)
            .map_err(|e| Error::FitFailure(format!("polynomial solve: {e}")))?;
        (sol, false)
    } else {
        // Rank-deficient design: fall back to a ridge-regularized
        // normal-equation solve.
        let gamma = (max_sv * max_sv) * 1e-10 + 1e-12;
        let mut normal = design.transpose() * &design;
        for i in 0..POLY5_TERMS {
            normal[(i, i)] += gamma;
        }
        let rhs = design.transpose() * &target;
        let sol = normal
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::FitFailure("ridge-regularized solve failed".into()))?;
        (sol, true)
    };

    Ok(Poly5Model {
        coefficients: solution.iter().cloned().collect(),
        h_mean,
        h_std,
        n_mean,
        n_std,
        b_mean,
        b_std,
        ridge_used,
    })
}

impl Poly5Model {
    pub fn predict(&self, h: f64, n: f64, b: f64) -> f64 {
        let exponents = monomial_exponents();
        let row = features(
            (h - self.h_mean) / self.h_std,
            (n - self.n_mean) / self.n_std,
            (b - self.b_mean) / self.b_std,
            &exponents,
        );
        row.iter().zip(&self.coefficients).map(|(x, c)| x * c).sum()
    }
}
