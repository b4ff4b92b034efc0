//! Slope-function fitting: damped Gauss–Newton (Levenberg-style) with
//! seeded multi-starts, plus ordinary least squares for the saturation
//! line.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::ecm::{slope_fn, EcmParams, SlopeSample};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub starts: usize,
    pub max_iterations: usize,
    /// Relative step/objective change below which a start has converged.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { starts: 32, max_iterations: 400, tolerance: 1e-12, seed: 0xEC4 }
    }
}

#[derive(Debug, Clone)]
pub struct EcmFit {
    pub params: EcmParams,
    /// Per-sample slope residuals (fit − observed) at the optimum.
    pub residuals: Vec<f64>,
    pub residual_norm: f64,
    /// False when no start met the tolerance; the returned params are
    /// then best-effort and should be flagged by callers.
    pub converged: bool,
    pub best_start: usize,
}

/// Start ranges for the multi-start draw; a is log-uniform, the rest
/// uniform.
const A_RANGE: (f64, f64) = (1e-2, 1e3);
const B_RANGE: (f64, f64) = (-1.5, 0.5);
const C_RANGE: (f64, f64) = (-1.0, 3.0);
const D_RANGE: (f64, f64) = (-0.9, 10.0);
const E_RANGE: (f64, f64) = (-50.0, 50.0);

fn slope_value(theta: &[f64; 5], n: f64, h: f64) -> Option<f64> {
    let denom = n.powf(theta[1] * h + theta[2]) + theta[3];
    if !denom.is_finite() || denom.abs() < super::POLE_EPSILON {
        return None;
    }
    let v = theta[0] / denom + theta[4];
    v.is_finite().then_some(v)
}

fn residuals(theta: &[f64; 5], samples: &[SlopeSample]) -> Option<Vec<f64>> {
    samples
        .iter()
        .map(|s| slope_value(theta, s.n, s.h).map(|v| v - s.slope))
        .collect()
}

fn sse(residuals: &[f64]) -> f64 {
    residuals.iter().map(|r| r * r).sum()
}

/// Analytic Jacobian row for one sample.
fn jacobian_row(theta: &[f64; 5], n: f64, h: f64) -> Option<[f64; 5]> {
    let ln_n = n.ln();
    let u = n.powf(theta[1] * h + theta[2]);
    let denom = u + theta[3];
    if !denom.is_finite() || denom.abs() < super::POLE_EPSILON {
        return None;
    }
    let inv = 1.0 / denom;
    let a_over_d2 = theta[0] * inv * inv;
    Some([
        inv,                      // ∂f/∂a
        -a_over_d2 * u * ln_n * h, // ∂f/∂b
        -a_over_d2 * u * ln_n,     // ∂f/∂c
        -a_over_d2,                // ∂f/∂d
        1.0,                       // ∂f/∂e
    ])
}

struct StartOutcome {
    theta: [f64; 5],
    sse: f64,
    converged: bool,
}

fn run_start(theta0: [f64; 5], samples: &[SlopeSample], opts: &FitOptions) -> Option<StartOutcome> {
    let mut theta = theta0;
    let mut res = residuals(&theta, samples)?;
    let mut current_sse = sse(&res);
    if !current_sse.is_finite() {
        return None;
    }
    let mut lambda = 1e-3;
    let mut converged = false;

    for _ in 0..opts.max_iterations {
        let mut jtj = [[0.0f64; 5]; 5];
        let mut jtr = [0.0f64; 5];
        for (sample, r) in samples.iter().zip(&res) {
            let row = jacobian_row(&theta, sample.n, sample.h)?;
            for i in 0..5 {
                jtr[i] += row[i] * r;
                for j in 0..5 {
                    jtj[i][j] += row[i] * row[j];
                }
            }
        }

        // Levenberg damping on the normal equations, retried with a
        // stiffer lambda until a step reduces the objective.
        let mut stepped = false;
        for _ in 0..16 {
            let mut m = DMatrix::<f64>::zeros(5, 5);
            for i in 0..5 {
                for j in 0..5 {
                    m[(i, j)] = jtj[i][j];
                }
                m[(i, i)] += lambda * jtj[i][i].max(1e-12);
            }
            let rhs = DVector::from_iterator(5, jtr.iter().map(|v| -v));
            let Some(delta) = m.lu().solve(&rhs) else {
                lambda *= 5.0;
                continue;
            };
            let candidate = [
                theta[0] + delta[0],
                theta[1] + delta[1],
                theta[2] + delta[2],
                theta[3] + delta[3],
                theta[4] + delta[4],
            ];
            match residuals(&candidate, samples) {
                Some(cand_res) => {
                    let cand_sse = sse(&cand_res);
                    if cand_sse.is_finite() && cand_sse <= current_sse {
                        let step_norm: f64 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let theta_norm: f64 = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let improvement = current_sse - cand_sse;
                        theta = candidate;
                        res = cand_res;
                        current_sse = cand_sse;
                        lambda = (lambda / 3.0).max(1e-12);
                        stepped = true;
                        if step_norm <= opts.tolerance * (1.0 + theta_norm)
                            || improvement <= opts.tolerance * (1.0 + current_sse)
                        {
                            converged = true;
                        }
                        break;
                    }
                    lambda *= 5.0;
                }
                None => lambda *= 5.0,
            }
        }
        if converged || !stepped {
            converged = converged || !stepped && current_sse.is_finite();
            break;
        }
    }
    Some(StartOutcome { theta, sse: current_sse, converged })
}

/// Ordinary least squares for the saturation line c_sat = α·H + β.
fn fit_saturation_line(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::Coverage(format!(
            "saturation fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let sum_h: f64 = points.iter().map(|p| p.0).sum();
    let sum_c: f64 = points.iter().map(|p| p.1).sum();
    let sum_hh: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sum_hc: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sum_hh - sum_h * sum_h;
    if denom.abs() < 1e-12 {
        return Err(Error::Coverage(
            "saturation points cover a single head count; the line is undetermined".into(),
        ));
    }
    let alpha = (n * sum_hc - sum_h * sum_c) / denom;
    let beta = (sum_c - alpha * sum_h) / n;
    Ok((alpha, beta))
}

/// Fits the five slope constants by damped Gauss–Newton over seeded
/// multi-starts (lowest final objective wins, ties to the lowest start
/// index) and the saturation line by ordinary least squares.
pub fn fit_ecm(
    samples: &[SlopeSample],
    saturations: &[(f64, f64)],
    layers: u32,
    opts: &FitOptions,
) -> Result<EcmFit> {
    let distinct_h: std::collections::HashSet<u64> =
        samples.iter().map(|s| s.h.to_bits()).collect();
    if samples.len() < 5 || distinct_h.len() < 2 {
        return Err(Error::Coverage(format!(
            "slope fit needs >= 5 samples over >= 2 head counts, got {} over {}",
            samples.len(),
            distinct_h.len()
        )));
    }
    let (alpha, beta) = fit_saturation_line(saturations)?;

    let starts: Vec<[f64; 5]> = {
        let mut stream = rng::stream(rng::mix(opts.seed, rng::tag::FIT_START));
        let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng::uniform(&mut stream);
        (0..opts.starts.max(1))
            .map(|_| {
                [
                    uniform(A_RANGE.0.ln(), A_RANGE.1.ln()).exp(),
                    uniform(B_RANGE.0, B_RANGE.1),
                    uniform(C_RANGE.0, C_RANGE.1),
                    uniform(D_RANGE.0, D_RANGE.1),
                    uniform(E_RANGE.0, E_RANGE.1),
                ]
            })
            .collect()
    };

    let outcomes: Vec<Option<StartOutcome>> = starts
        .par_iter()
        .map(|theta0| run_start(*theta0, samples, opts))
        .collect();

    let mut best: Option<(usize, StartOutcome)> = None;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let Some(outcome) = outcome else { continue };
        let better = match &best {
            None => true,
            Some((_, b)) => outcome.sse < b.sse,
        };
        if better {
            best = Some((i, outcome));
        }
    }
    let Some((best_start, outcome)) = best else {
        return Err(Error::FitFailure(
            "every start diverged or hit a pole; no usable fit".into(),
        ));
    };

    let params = EcmParams {
        a: outcome.theta[0],
        b: outcome.theta[1],
        c: outcome.theta[2],
        d: outcome.theta[3],
        e: outcome.theta[4],
        alpha,
        beta,
        layers,
    };
    let final_residuals = residuals(&outcome.theta, samples).unwrap_or_default();
    Ok(EcmFit {
        residual_norm: sse(&final_residuals).sqrt(),
        residuals: final_residuals,
        params,
        converged: outcome.converged,
        best_start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::preset;

    fn samples_from(p: &EcmParams, noise: f64, seed: u64) -> Vec<SlopeSample> {
        let mut stream = rng::stream(seed);
        let mut out = Vec::new();
        for h in [1.0, 2.0, 3.0, 4.0] {
            for n in [16.0, 32.0, 64.0, 128.0] {
                let s = slope_fn(n, h, p).unwrap();
                let mut buf = [0.0];
                rng::fill_normal(&mut stream, &mut buf, 1.0);
                out.push(SlopeSample { h, n, slope: s * (1.0 + noise * buf[0]), source: vec![] });
            }
        }
        out
    }

    #[test]
    fn noiseless_fit_interpolates() {
        let truth = preset(1).unwrap();
        let samples = samples_from(&truth, 0.0, 1);
        let sats = vec![(1.0, truth.alpha + truth.beta), (4.0, truth.alpha * 4.0 + truth.beta)];
        let fit = fit_ecm(&samples, &sats, 1, &FitOptions::default()).unwrap();
        assert!(fit.residual_norm < 1e-6, "residual norm {}", fit.residual_norm);
        // Two saturation points: the line passes through them exactly.
        assert!((fit.params.alpha - truth.alpha).abs() < 1e-9);
        assert!((fit.params.beta - truth.beta).abs() < 1e-9);
        // The fitted slope surface matches everywhere on the grid.
        for s in &samples {
            let v = slope_fn(s.n, s.h, &fit.params).unwrap();
            assert!((v - s.slope).abs() < 1e-6);
        }
    }

    #[test]
    fn noisy_fit_recovers_the_surface_within_tolerance() {
        let truth = preset(1).unwrap();
        let samples = samples_from(&truth, 0.01, 7);
        let sats = vec![
            (1.0, truth.alpha + truth.beta),
            (2.0, truth.alpha * 2.0 + truth.beta),
            (4.0, truth.alpha * 4.0 + truth.beta),
        ];
        let fit = fit_ecm(&samples, &sats, 1, &FitOptions::default()).unwrap();
        let mut err_sum = 0.0;
        let mut count = 0;
        for h in [1.0, 2.0, 3.0, 4.0] {
            for n in [16.0, 32.0, 64.0, 128.0] {
                let want = slope_fn(n, h, &truth).unwrap();
                let got = slope_fn(n, h, &fit.params).unwrap();
                err_sum += ((got - want) / want).abs();
                count += 1;
            }
        }
        let grid_mape = err_sum / count as f64;
        assert!(grid_mape < 0.05, "grid MAPE {grid_mape}");
    }

    #[test]
    fn insufficient_coverage_is_rejected() {
        let truth = preset(1).unwrap();
        let few = samples_from(&truth, 0.0, 1).into_iter().take(4).collect::<Vec<_>>();
        let sats = vec![(1.0, 1.0), (2.0, 2.0)];
        assert!(matches!(
            fit_ecm(&few, &sats, 1, &FitOptions::default()),
            Err(Error::Coverage(_))
        ));

        // One head count only.
        let one_h: Vec<SlopeSample> = samples_from(&truth, 0.0, 1)
            .into_iter()
            .filter(|s| s.h == 1.0)
            .collect();
        assert!(matches!(
            fit_ecm(&one_h, &sats, 1, &FitOptions::default()),
            Err(Error::Coverage(_))
        ));

        // One saturation point.
        let samples = samples_from(&truth, 0.0, 1);
        assert!(matches!(
            fit_ecm(&samples, &[(1.0, 1.0)], 1, &FitOptions::default()),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn saturation_line_through_two_points_is_exact() {
        let (alpha, beta) = fit_saturation_line(&[(1.0, 10.0), (3.0, 16.0)]).unwrap();
        assert!((alpha - 3.0).abs() < 1e-12);
        assert!((beta - 7.0).abs() < 1e-12);
        assert!(fit_saturation_line(&[(2.0, 5.0), (2.0, 6.0)]).is_err());
    }
}
