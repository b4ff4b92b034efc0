//! The empirical capacity model.
//!
//! Capacity rises linearly in the token-vector dimension B with a slope
//! set by the sequence length and head count, then saturates at a
//! ceiling linear in the head count:
//!
//!   slope(N, H) = a / (N^(b·H + c) + d) + e
//!   capacity(B, H, N) = min(slope(N, H) · B, α·H + β)
//!
//! The seven constants {a, b, c, d, e, α, β} are fitted per layer count
//! from measured capacities; built-in presets carry the published
//! values for L = 1 and L = 2. A 56-coefficient degree-5 polynomial in
//! (H, N, B) serves as the baseline the seven-parameter model is
//! compared against.
//!
//! The capacity law is written here as a minimum: the linear rise holds
//! until the ceiling and the ceiling caps it afterwards. Both branch
//! values are always reported alongside the chosen one.

mod fit;
mod poly;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_trainable_params, ModelConfig};

pub use fit::{fit_ecm, EcmFit, FitOptions};
pub use poly::{fit_poly5, monomial_exponents, Poly5Model, POLY5_TERMS};

/// How close to zero the slope denominator may get before the
/// evaluation is rejected as a pole.
pub const POLE_EPSILON: f64 = 1e-9;

/// One capacity measurement as consumed by the fitting pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityPoint {
    pub b: f64,
    pub h: f64,
    pub n: f64,
    pub l: u32,
    pub c: f64,
}

/// Slope constants {a..e}, saturation line {alpha, beta}, and the layer
/// count the set applies to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcmParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub alpha: f64,
    pub beta: f64,
    pub layers: u32,
}

/// Built-in fitted constants per layer count.
pub fn preset(layers: u32) -> Option<EcmParams> {
    match layers {
        1 => Some(EcmParams {
            a: 145.27,
            b: -0.13,
            c: 1.29,
            d: 0.13,
            e: 0.20,
            alpha: 3762.70,
            beta: 8741.00,
            layers: 1,
        }),
        2 => Some(EcmParams {
            a: 2.45,
            b: -0.002,
            c: 0.02,
            d: -0.99,
            e: -29.08,
            alpha: 4413.10,
            beta: 14787.00,
            layers: 2,
        }),
        _ => None,
    }
}

/// Caveat attached to a preset, if any. The two-layer constants have a
/// small negative offset `e` and no stated validity region, so the
/// slope goes negative over much of the (N, H) plane.
pub fn preset_warning(layers: u32) -> Option<&'static str> {
    match layers {
        2 => Some(
            "the two-layer constants have e < 0 and an unstated validity region; \
             slope values can be negative outside the fitted range",
        ),
        _ => None,
    }
}

/// The (H, N) region the presets were fitted over; evaluations outside
/// it are extrapolations and should carry a warning.
pub const PRESET_DOMAIN_H: (f64, f64) = (1.0, 4.0);
pub const PRESET_DOMAIN_N: (f64, f64) = (16.0, 128.0);

/// Pre-saturation capacity slope: a / (N^(b·H + c) + d) + e.
pub fn slope_fn(n: f64, h: f64, p: &EcmParams) -> Result<f64> {
    let denom = n.powf(p.b * h + p.c) + p.d;
    if !denom.is_finite() || denom.abs() < POLE_EPSILON {
        return Err(Error::SlopePole { denom, n, h });
    }
    Ok(p.a / denom + p.e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Linear,
    Ceiling,
}

/// Capacity with both branch values exposed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcmCapacity {
    pub capacity: f64,
    /// slope(N, H) · B.
    pub linear: f64,
    /// α·H + β.
    pub ceiling: f64,
    pub branch: Branch,
}

/// Predicted capacity: the lesser of the linear-rise term and the
/// saturation ceiling.
pub fn ecm_capacity(b: f64, h: f64, n: f64, p: &EcmParams) -> Result<EcmCapacity> {
    let linear = slope_fn(n, h, p)? * b;
    let ceiling = p.alpha * h + p.beta;
    let (capacity, branch) = if linear < ceiling {
        (linear, Branch::Linear)
    } else {
        (ceiling, Branch::Ceiling)
    };
    Ok(EcmCapacity { capacity, linear, ceiling, branch })
}

// ── Slope and saturation extraction ──────────────────────────────────

/// Thresholds for saturation detection: a point is saturated when its
/// capacity reaches `ceiling_frac` of the group maximum and the local
/// slope dC/dB falls below `slope_frac` of the initial slope.
#[derive(Debug, Clone, Copy)]
pub struct SaturationOptions {
    pub ceiling_frac: f64,
    pub slope_frac: f64,
}

impl Default for SaturationOptions {
    fn default() -> Self {
        SaturationOptions { ceiling_frac: 0.9, slope_frac: 0.1 }
    }
}

/// Memorized-sequences-per-unit-B rate for one (H, N) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeSample {
    pub h: f64,
    pub n: f64,
    pub slope: f64,
    /// Indices into the measurement list this sample came from.
    pub source: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct SlopeExtraction {
    pub samples: Vec<SlopeSample>,
    /// (H, N, L) groups skipped because every point was saturated (or
    /// the group had no usable rise).
    pub excluded_groups: Vec<(f64, f64, u32)>,
}

fn group_key(p: &CapacityPoint) -> (u64, u64, u32) {
    (p.h.to_bits(), p.n.to_bits(), p.l)
}

/// Per-(H, N, L) group: averages duplicate B values, sorts by B, marks
/// saturated points, and returns (B-sorted points, index of the first
/// saturated point). `None` group result means the group is unusable.
fn analyze_group(
    points: &[(usize, &CapacityPoint)],
    opts: &SaturationOptions,
) -> (Vec<(f64, f64, Vec<usize>)>, Option<usize>) {
    // Average duplicates per B.
    let mut by_b: Vec<(f64, f64, f64, Vec<usize>)> = Vec::new(); // (b, c_sum, count, sources)
    for &(idx, p) in points {
        match by_b.iter_mut().find(|(b, ..)| *b == p.b) {
            Some((_, c_sum, count, sources)) => {
                *c_sum += p.c;
                *count += 1.0;
                sources.push(idx);
            }
            None => by_b.push((p.b, p.c, 1.0, vec![idx])),
        }
    }
    by_b.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let curve: Vec<(f64, f64, Vec<usize>)> =
        by_b.into_iter().map(|(b, c_sum, count, src)| (b, c_sum / count, src)).collect();

    let max_c = curve.iter().map(|&(_, c, _)| c).fold(f64::NEG_INFINITY, f64::max);
    let initial_slope = curve[0].1 / curve[0].0;
    if !(initial_slope > 0.0) || max_c <= 0.0 {
        return (curve, Some(0)); // no usable rise
    }
    // Local slope = the flatter of the segments on either side, so the
    // point straddling the rise-to-ceiling kink is still caught.
    let mut first_saturated = None;
    for i in 1..curve.len() {
        let backward = (curve[i].1 - curve[i - 1].1) / (curve[i].0 - curve[i - 1].0);
        let local = match curve.get(i + 1) {
            Some(next) => backward.min((next.1 - curve[i].1) / (next.0 - curve[i].0)),
            None => backward,
        };
        if curve[i].1 >= opts.ceiling_frac * max_c && local < opts.slope_frac * initial_slope {
            first_saturated = Some(i);
            break;
        }
    }
    // A group flat from the start: the first point already sits at the
    // detected ceiling level.
    if first_saturated == Some(1) && curve[0].1 >= opts.ceiling_frac * max_c {
        return (curve, Some(0));
    }
    (curve, first_saturated)
}

/// Slope per (H, N, L) group: capacity over B at the highest B before
/// saturation, a line through the origin. Groups that are saturated
/// everywhere are excluded.
pub fn extract_slopes(points: &[CapacityPoint], opts: &SaturationOptions) -> Result<SlopeExtraction> {
    let mut groups: Vec<((u64, u64, u32), Vec<(usize, &CapacityPoint)>)> = Vec::new();
    for (idx, p) in points.iter().enumerate() {
        let key = group_key(p);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push((idx, p)),
            None => groups.push((key, vec![(idx, p)])),
        }
    }

    let mut out = SlopeExtraction::default();
    for (_, members) in &groups {
        let (h, n, l) = (members[0].1.h, members[0].1.n, members[0].1.l);
        let distinct_b: std::collections::HashSet<u64> =
            members.iter().map(|(_, p)| p.b.to_bits()).collect();
        if distinct_b.len() < 2 {
            return Err(Error::Coverage(format!(
                "group (H={h}, N={n}, L={l}) has {} distinct B value(s); need at least 2",
                distinct_b.len()
            )));
        }
        let (curve, first_saturated) = analyze_group(members, opts);
        let pick = match first_saturated {
            Some(0) => {
                out.excluded_groups.push((h, n, l));
                continue;
            }
            Some(i) => i - 1,
            None => curve.len() - 1,
        };
        let (b, c, sources) = &curve[pick];
        out.samples.push(SlopeSample { h, n, slope: c / b, source: sources.clone() });
    }
    Ok(out)
}

/// Saturation level per H: the mean capacity over all saturated points
/// with that head count. Only H values with saturated evidence appear.
pub fn extract_saturations(points: &[CapacityPoint], opts: &SaturationOptions) -> Vec<(f64, f64)> {
    let mut groups: Vec<((u64, u64, u32), Vec<(usize, &CapacityPoint)>)> = Vec::new();
    for (idx, p) in points.iter().enumerate() {
        let key = group_key(p);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push((idx, p)),
            None => groups.push((key, vec![(idx, p)])),
        }
    }
    let mut per_h: Vec<(f64, f64, usize)> = Vec::new(); // (h, c_sum, count)
    for (_, members) in &groups {
        if members.iter().map(|(_, p)| p.b.to_bits()).collect::<std::collections::HashSet<_>>().len() < 2 {
            continue;
        }
        let h = members[0].1.h;
        let (curve, first_saturated) = analyze_group(members, opts);
        let from = match first_saturated {
            Some(i) => i.max(1),
            None => continue,
        };
        for (_, c, _) in &curve[from..] {
            match per_h.iter_mut().find(|(hh, ..)| *hh == h) {
                Some((_, sum, count)) => {
                    *sum += c;
                    *count += 1;
                }
                None => per_h.push((h, *c, 1)),
            }
        }
    }
    per_h.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    per_h.into_iter().map(|(h, sum, count)| (h, sum / count as f64)).collect()
}

// ── Error metrics and analysis ───────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapeSummary {
    /// Mean of |pred − actual| / actual over the used pairs.
    pub value: f64,
    pub used: usize,
    /// Pairs skipped because the actual value was zero.
    pub excluded_zero_actual: usize,
}

/// Mean absolute percentage error; zero actuals are excluded and
/// counted.
pub fn mape(pred: &[f64], actual: &[f64]) -> Result<MapeSummary> {
    if pred.len() != actual.len() {
        return Err(Error::Contract(format!(
            "mape needs equal lengths, got {} and {}",
            pred.len(),
            actual.len()
        )));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (&p, &a) in pred.iter().zip(actual) {
        if a == 0.0 {
            excluded += 1;
        } else {
            sum += (p - a).abs() / a.abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Contract("mape has no usable pairs (all actuals zero)".into()));
    }
    Ok(MapeSummary { value: sum / used as f64, used, excluded_zero_actual: excluded })
}

/// Memory per parameter: predicted capacity over the trainable
/// parameter count of the configuration.
pub fn mpp(cfg: &ModelConfig, p: &EcmParams) -> Result<f64> {
    if cfg.layers as u32 != p.layers {
        return Err(Error::PresetMismatch(format!(
            "parameter set is for {} layer(s), config has {}",
            p.layers, cfg.layers
        )));
    }
    let cap = ecm_capacity(cfg.embed_dim as f64, cfg.heads as f64, cfg.seq_len as f64, p)?;
    Ok(cap.capacity / count_trainable_params(cfg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeCapacityPoint {
    pub h: usize,
    pub b: usize,
    pub params: u64,
    pub capacity: f64,
}

/// Capacity as a function of total trainable parameters: sweeps B for
/// each head count, pairing the parameter count of the resulting
/// configuration with its predicted capacity. The `template` supplies
/// N, L and the parameter-counting convention (head_dim, ffn flags).
pub fn size_capacity_curve(
    template: &ModelConfig,
    h_list: &[usize],
    p: &EcmParams,
    b_grid: Option<&[usize]>,
) -> Result<Vec<SizeCapacityPoint>> {
    if template.layers as u32 != p.layers {
        return Err(Error::PresetMismatch(format!(
            "parameter set is for {} layer(s), template has {}",
            p.layers, template.layers
        )));
    }
    let default_grid: Vec<usize> = (1..=1024).map(|i| i * 8).collect();
    let grid = b_grid.unwrap_or(&default_grid);
    let mut out = Vec::with_capacity(h_list.len() * grid.len());
    for &h in h_list {
        for &b in grid {
            let cfg = ModelConfig { embed_dim: b, heads: h, ..template.clone() };
            let cap = ecm_capacity(b as f64, h as f64, template.seq_len as f64, p)?;
            out.push(SizeCapacityPoint {
                h,
                b,
                params: count_trainable_params(&cfg),
                capacity: cap.capacity,
            });
        }
    }
    Ok(out)
}

/// Real-valued B at which the configuration reaches `target_params`
/// trainable parameters, and the predicted capacity there. Used to
/// compare head counts at matched model size.
pub fn capacity_at_matched_params(
    template: &ModelConfig,
    h: usize,
    target_params: f64,
    p: &EcmParams,
) -> Result<(f64, EcmCapacity)> {
    if template.layers as u32 != p.layers {
        return Err(Error::PresetMismatch(format!(
            "parameter set is for {} layer(s), template has {}",
            p.layers, template.layers
        )));
    }
    let l = template.layers as f64;
    let qkv = if template.omit_wv { 2.0 } else { 3.0 };
    let attn_linear = l * (qkv + 1.0) * h as f64 * template.head_dim as f64;
    let (quad, linear) = if template.freeze_ffn {
        (0.0, attn_linear)
    } else {
        let m = template.ffn_mult as f64;
        (l * 2.0 * m, attn_linear + l * (m + 1.0))
    };
    let b = if quad > 0.0 {
        (-linear + (linear * linear + 4.0 * quad * target_params).sqrt()) / (2.0 * quad)
    } else {
        target_params / linear
    };
    let cap = ecm_capacity(b, h as f64, template.seq_len as f64, p)?;
    Ok((b, cap))
}

// ── Parameter files ──────────────────────────────────────────────────

/// Fit provenance stored alongside saved constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// "builtin" for shipped presets, "fit" for fitted parameters.
    pub source: String,
    pub toolkit_version: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spec_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub slope_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub converged: Option<bool>,
}

impl Provenance {
    pub fn builtin() -> Self {
        Provenance {
            source: "builtin".into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            spec_hash: None,
            slope_samples: None,
            residual_norm: None,
            converged: None,
        }
    }
}

/// Fitted (H, N) region; evaluations outside it warrant a warning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub h: [f64; 2],
    pub n: [f64; 2],
}

impl Default for Domain {
    fn default() -> Self {
        Domain {
            h: [PRESET_DOMAIN_H.0, PRESET_DOMAIN_H.1],
            n: [PRESET_DOMAIN_N.0, PRESET_DOMAIN_N.1],
        }
    }
}

impl Domain {
    pub fn contains(&self, h: f64, n: f64) -> bool {
        (self.h[0]..=self.h[1]).contains(&h) && (self.n[0]..=self.n[1]).contains(&n)
    }
}

/// Human-readable key-value parameter file (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub layers: u32,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub alpha: f64,
    pub beta: f64,
    pub provenance: Provenance,
    pub domain: Domain,
}

impl ParamsFile {
    pub fn new(params: &EcmParams, provenance: Provenance, domain: Domain) -> Self {
        ParamsFile {
            layers: params.layers,
            a: params.a,
            b: params.b,
            c: params.c,
            d: params.d,
            e: params.e,
            alpha: params.alpha,
            beta: params.beta,
            provenance,
            domain,
        }
    }

    pub fn params(&self) -> EcmParams {
        EcmParams {
            a: self.a,
            b: self.b,
            c: self.c,
            d: self.d,
            e: self.e,
            alpha: self.alpha,
            beta: self.beta,
            layers: self.layers,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("parameter serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamsFile> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l1() -> EcmParams {
        preset(1).unwrap()
    }

    #[test]
    fn slope_anchors_from_the_table() {
        // a/(1+d)+e and the N=32 value, derived by hand from the
        // constants.
        let s11 = slope_fn(1.0, 1.0, &l1()).unwrap();
        assert!((s11 - 128.7575221238938).abs() < 1e-9, "{s11}");
        assert!((s11 - 128.76).abs() < 5e-3);

        let s321 = slope_fn(32.0, 1.0, &l1()).unwrap();
        assert!((s321 - 2.801296194136575).abs() < 1e-9, "{s321}");
        assert!((s321 - 2.80).abs() < 1e-2);
    }

    #[test]
    fn slope_is_positive_and_decreasing_in_n() {
        for h in 1..=4 {
            let mut prev = f64::INFINITY;
            let mut n = 8.0;
            while n <= 1024.0 {
                let s = slope_fn(n, h as f64, &l1()).unwrap();
                assert!(s > 0.0, "slope({n},{h}) = {s}");
                assert!(s < prev, "slope not decreasing at ({n},{h})");
                prev = s;
                n *= 1.25;
            }
        }
    }

    #[test]
    fn pole_is_an_error() {
        // b=0, c=0 makes N^(bH+c) = 1; d = −1 puts the denominator at 0.
        let bad = EcmParams { a: 1.0, b: 0.0, c: 0.0, d: -1.0, e: 0.0, alpha: 0.0, beta: 0.0, layers: 1 };
        assert!(matches!(slope_fn(8.0, 1.0, &bad), Err(Error::SlopePole { .. })));
    }

    #[test]
    fn capacity_branches_and_anchors() {
        let p = l1();
        // Ceiling for one head.
        let cap = ecm_capacity(8192.0, 1.0, 32.0, &p).unwrap();
        assert_eq!(cap.ceiling, 3762.70 + 8741.00);
        assert!((cap.ceiling - 12503.70).abs() < 1e-9);
        assert_eq!(cap.branch, Branch::Ceiling);
        assert_eq!(cap.capacity, cap.ceiling);

        // Pre-saturation branch at B=128.
        let cap = ecm_capacity(128.0, 1.0, 32.0, &p).unwrap();
        assert_eq!(cap.branch, Branch::Linear);
        assert!((cap.capacity - 358.5659128494816).abs() < 1e-9);
        assert!((cap.capacity - 358.5).abs() < 0.1);

        // Exactly at the switch the two branches agree.
        let switch_b = cap.ceiling / slope_fn(32.0, 1.0, &p).unwrap();
        let at = ecm_capacity(switch_b, 1.0, 32.0, &p).unwrap();
        assert_eq!(at.branch, Branch::Ceiling);
        assert!((at.linear - at.ceiling).abs() < 1e-9);
        let below = ecm_capacity(switch_b * (1.0 - 1e-12), 1.0, 32.0, &p).unwrap();
        assert_eq!(below.branch, Branch::Linear);
    }

    #[test]
    fn capacity_is_nondecreasing_in_b() {
        let p = l1();
        let mut prev = 0.0;
        for b in (8..=16384).step_by(64) {
            let cap = ecm_capacity(b as f64, 2.0, 32.0, &p).unwrap().capacity;
            assert!(cap >= prev);
            prev = cap;
        }
    }

    #[test]
    fn extract_slopes_roundtrips_noiseless_data() {
        let p = l1();
        let mut points = Vec::new();
        for h in [1.0, 2.0, 4.0] {
            for n in [16.0, 32.0, 64.0] {
                for exp in 4..=15 {
                    let b = (1u64 << exp) as f64;
                    let c = ecm_capacity(b, h, n, &p).unwrap().capacity;
                    points.push(CapacityPoint { b, h, n, l: 1, c });
                }
            }
        }
        let extraction = extract_slopes(&points, &SaturationOptions::default()).unwrap();
        assert!(extraction.excluded_groups.is_empty());
        assert_eq!(extraction.samples.len(), 9);
        for s in &extraction.samples {
            let want = slope_fn(s.n, s.h, &p).unwrap();
            assert!(
                ((s.slope - want) / want).abs() < 1e-9,
                "slope({},{}) {} vs {}",
                s.n,
                s.h,
                s.slope,
                want
            );
        }

        // Saturation levels recovered per H.
        let sats = extract_saturations(&points, &SaturationOptions::default());
        assert_eq!(sats.len(), 3);
        for &(h, c_sat) in &sats {
            let want = p.alpha * h + p.beta;
            assert!((c_sat - want).abs() < 1e-9, "ceiling({h}) {c_sat} vs {want}");
        }
    }

    #[test]
    fn fully_saturated_group_is_excluded() {
        let points: Vec<CapacityPoint> = [16.0, 32.0, 64.0, 128.0]
            .iter()
            .map(|&b| CapacityPoint { b, h: 1.0, n: 32.0, l: 1, c: 500.0 })
            .collect();
        let extraction = extract_slopes(&points, &SaturationOptions::default()).unwrap();
        assert!(extraction.samples.is_empty());
        assert_eq!(extraction.excluded_groups, vec![(1.0, 32.0, 1)]);
    }

    #[test]
    fn kinked_group_takes_the_last_linear_point() {
        // C = min(2B, 256): linear up to the kink at B = 128, flat after.
        let points: Vec<CapacityPoint> = [16.0, 32.0, 64.0, 128.0, 256.0, 512.0]
            .iter()
            .map(|&b| CapacityPoint { b, h: 2.0, n: 16.0, l: 1, c: (2.0 * b).min(256.0) })
            .collect();
        let extraction = extract_slopes(&points, &SaturationOptions::default()).unwrap();
        assert_eq!(extraction.samples.len(), 1);
        assert_eq!(extraction.samples[0].slope, 2.0);
    }

    #[test]
    fn single_b_group_is_a_coverage_error() {
        let points = vec![
            CapacityPoint { b: 64.0, h: 1.0, n: 32.0, l: 1, c: 100.0 },
            CapacityPoint { b: 64.0, h: 1.0, n: 32.0, l: 1, c: 110.0 },
        ];
        assert!(matches!(
            extract_slopes(&points, &SaturationOptions::default()),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn mape_basics() {
        let m = mape(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.value, 0.0);
        let m = mape(&[2.0, 4.0], &[1.0, 2.0]).unwrap();
        assert_eq!(m.value, 1.0);
        let m = mape(&[2.0, 5.0], &[1.0, 0.0]).unwrap();
        assert_eq!(m.excluded_zero_actual, 1);
        assert_eq!(m.used, 1);
        assert!(mape(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mape(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn mpp_is_capacity_over_parameter_count() {
        // Ceiling pinned at 1000 and a config with exactly 1e6
        // trainable parameters.
        let p = EcmParams { a: 1e6, b: 0.0, c: 0.0, d: 0.0, e: 0.0, alpha: 0.0, beta: 1000.0, layers: 1 };
        let cfg = ModelConfig {
            freeze_ffn: true,
            ..ModelConfig::new(128, 8, 500, 1, 1).with_head_dim(500)
        };
        assert_eq!(count_trainable_params(&cfg), 1_000_000);
        let v = mpp(&cfg, &p).unwrap();
        assert!((v - 1e-3).abs() < 1e-15);

        // Layer mismatch is a preset error.
        let cfg2 = ModelConfig::new(128, 8, 64, 1, 2);
        assert!(matches!(mpp(&cfg2, &p), Err(Error::PresetMismatch(_))));
    }

    #[test]
    fn size_capacity_curve_is_monotone_until_ceiling() {
        let p = l1();
        let template = ModelConfig::new(128, 64, 8, 1, 1);
        let points = size_capacity_curve(&template, &[2], &p, None).unwrap();
        let mut prev = (0u64, 0.0f64);
        for pt in &points {
            assert!(pt.params >= prev.0);
            assert!(pt.capacity >= prev.1 - 1e-9);
            prev = (pt.params, pt.capacity);
        }
        let ceiling = p.alpha * 2.0 + p.beta;
        assert!((points.last().unwrap().capacity - ceiling).abs() < 1e-9);

        assert!(size_capacity_curve(&template, &[], &p, None).unwrap().is_empty());
    }

    #[test]
    fn matched_params_lookup_inverts_the_count() {
        let p = l1();
        let template = ModelConfig::new(128, 64, 8, 1, 1);
        let (b, cap) = capacity_at_matched_params(&template, 4, 2e6, &p).unwrap();
        // Check the parameter formula at the returned (real) B.
        let count = 1.0 * 4.0 * 4.0 * 128.0 * b + 1.0 * (2.0 * 4.0 * b * b + 5.0 * b);
        assert!((count - 2e6).abs() < 1.0, "count {count}");
        assert!(cap.capacity > 0.0);
    }

    #[test]
    fn params_file_roundtrip_and_presets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.toml");
        let file = ParamsFile::new(&l1(), Provenance::builtin(), Domain::default());
        file.save(&path).unwrap();
        let loaded = ParamsFile::load(&path).unwrap();
        assert_eq!(loaded, file);
        assert_eq!(loaded.params(), l1());

        assert!(preset(3).is_none());
        assert!(preset_warning(2).is_some());
        assert!(preset_warning(1).is_none());
    }
}
