//! Training loop and capacity protocols.
//!
//! Capacity of a model on a library is the number of sequences whose
//! final token the model predicts correctly from the other N−1. The MAC
//! protocol trains against one large library and reports the best
//! restart; the MLS protocol searches for the largest library that can
//! be memorized completely. Chance-level statistics come from the exact
//! binomial guessing bound.

mod adam;
mod negbin;
pub mod records;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::datagen::{self, LibraryDescriptor, SequenceLibrary};
use crate::error::{Error, Result};
use crate::model::{argmax_lowest, count_trainable_params, init_model, ModelConfig, ModelParams};
use crate::numerics::{Graph, Tensor};
use crate::rng;

pub use adam::Adam;
pub use negbin::{fit_negative_binomial, NbFit};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Sequences evaluated per forward batch when measuring capacity.
const EVAL_BATCH: usize = 1024;

/// Optimizer and schedule settings. The Adam defaults are the
/// optimizer's stock settings; early stopping watches measured capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without a capacity improvement before stopping.
    pub patience: usize,
    /// Independent restarts; protocols report the best.
    pub restarts: usize,
    pub seed: u64,
    /// Train on every next-token position instead of only the final one.
    pub full_sequence_loss: bool,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            batch_size: 512,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 500,
            patience: 20,
            restarts: 5,
            seed,
            full_sequence_loss: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    Mac,
    Mls,
}

/// A raw correct count with its chance-level statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityMeasurement {
    /// Correctly predicted final tokens.
    pub r: u64,
    pub k: u64,
    pub t: u64,
    /// Expected correct guesses K/T of an untrained model.
    pub c_offset: f64,
    /// r − K/T.
    pub r_adjusted: f64,
    /// Probability of r or more correct under pure guessing.
    pub p_chance: f64,
    pub protocol: Option<Protocol>,
}

impl CapacityMeasurement {
    pub fn from_r(r: u64, k: u64, t: u64, protocol: Option<Protocol>) -> Self {
        let c_offset = k as f64 / t as f64;
        CapacityMeasurement {
            r,
            k,
            t,
            c_offset,
            r_adjusted: r as f64 - c_offset,
            p_chance: guess_tail(r, k, t),
            protocol,
        }
    }
}

/// One training run: the persistence unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub library: LibraryDescriptor,
    /// Which restart this run was within its protocol.
    pub restart: u32,
    /// Measured capacity after each completed epoch.
    pub trace: Vec<u64>,
    pub epochs_run: usize,
    /// First epoch at which the whole library was memorized.
    pub shatter_epoch: Option<u32>,
    /// Training diverged (non-finite loss).
    pub failed: bool,
    pub wall_time_secs: f64,
    pub final_capacity: CapacityMeasurement,
}

impl RunRecord {
    /// Identical content modulo wall-clock time; the form determinism
    /// checks compare.
    pub fn canonical(&self) -> RunRecord {
        RunRecord { wall_time_secs: 0.0, ..self.clone() }
    }
}

// ── Guessing statistics ──────────────────────────────────────────────

fn ln_binom_term(r: u64, k: u64, ln_p: f64, ln_q: f64) -> f64 {
    let (rf, kf) = (r as f64, k as f64);
    ln_gamma(kf + 1.0) - ln_gamma(rf + 1.0) - ln_gamma(kf - rf + 1.0) + rf * ln_p + (kf - rf) * ln_q
}

fn log_space_sum(terms: impl Iterator<Item = f64>) -> f64 {
    // Log-sum-exp against the running maximum.
    let ln_terms: Vec<f64> = terms.collect();
    let max = ln_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return 0.0;
    }
    let sum: f64 = ln_terms.iter().map(|&t| (t - max).exp()).sum();
    (max + sum.ln()).exp()
}

/// P(X < r_threshold) for X ~ Binomial(k, 1/t): the probability an
/// untrained guesser scores fewer than `r_threshold` correct. Exact
/// summation in log space.
pub fn guess_bound(r_threshold: u64, k: u64, t: u64) -> f64 {
    if r_threshold == 0 {
        return 0.0;
    }
    if r_threshold > k {
        return 1.0;
    }
    let p = 1.0 / t as f64;
    let (ln_p, ln_q) = (p.ln(), (-p).ln_1p());
    let sum = log_space_sum((0..r_threshold).map(|r| ln_binom_term(r, k, ln_p, ln_q)));
    sum.clamp(0.0, 1.0)
}

/// P(X >= r_threshold): the upper tail, summed directly so extreme
/// tails keep full precision instead of cancelling against 1.
pub fn guess_tail(r_threshold: u64, k: u64, t: u64) -> f64 {
    if r_threshold == 0 {
        return 1.0;
    }
    if r_threshold > k {
        return 0.0;
    }
    let p = 1.0 / t as f64;
    let (ln_p, ln_q) = (p.ln(), (-p).ln_1p());
    let sum = log_space_sum((r_threshold..=k).map(|r| ln_binom_term(r, k, ln_p, ln_q)));
    sum.clamp(0.0, 1.0)
}

// ── Capacity measurement ─────────────────────────────────────────────

/// Correct final-token predictions over the whole library.
pub(crate) fn count_correct(params: &ModelParams, lib: &SequenceLibrary) -> Result<u64> {
    let n = lib.n();
    let t = params.cfg.vocab_size;
    let mut correct = 0u64;
    let indices: Vec<usize> = (0..lib.k()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|&i| lib.sequence(i)).collect();
        let logits = params.position_logits_batch(&seqs, n - 2)?;
        for (row, &i) in chunk.iter().enumerate() {
            let scores = &logits.data()[row * t..(row + 1) * t];
            if argmax_lowest(scores) == lib.final_token(i) {
                correct += 1;
            }
        }
    }
    Ok(correct)
}

/// Capacity of the model on a library, with chance statistics.
pub fn measure_capacity(params: &ModelParams, lib: &SequenceLibrary) -> Result<CapacityMeasurement> {
    let r = count_correct(params, lib)?;
    Ok(CapacityMeasurement::from_r(r, lib.k() as u64, lib.t() as u64, None))
}

/// Capacity of an arbitrary prefix→token predictor; the seam used to
/// test the measurement itself against stub predictors.
pub fn capacity_of_predictor<F>(mut predict: F, lib: &SequenceLibrary) -> u64
where
    F: FnMut(&[u32]) -> u32,
{
    (0..lib.k())
        .filter(|&i| predict(lib.prefix(i)) == lib.final_token(i))
        .count() as u64
}

// ── Training ─────────────────────────────────────────────────────────

/// Minimizes final-token cross-entropy with Adam over shuffled batches,
/// measuring capacity after every epoch. Stops at `max_epochs`, on
/// `patience` epochs without improvement, or as soon as the library is
/// shattered. The parameters end at the best-capacity epoch.
pub fn train(params: &mut ModelParams, lib: &SequenceLibrary, tcfg: &TrainConfig) -> Result<RunRecord> {
    tcfg.validate()?;
    if lib.n() > params.cfg.seq_len {
        return Err(Error::Contract(format!(
            "library sequences of length {} exceed the model's {}",
            lib.n(),
            params.cfg.seq_len
        )));
    }
    if lib.t() > params.cfg.vocab_size {
        return Err(Error::Contract(format!(
            "library vocabulary {} exceeds the model's {}",
            lib.t(),
            params.cfg.vocab_size
        )));
    }
    let started = Instant::now();
    let k = lib.k() as u64;

    let sizes: Vec<usize> = params.trainable_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.epsilon, &sizes);
    let mut dropout_rng = (params.cfg.dropout > 0.0)
        .then(|| rng::stream(rng::mix(tcfg.seed, rng::tag::DROPOUT)));

    let mut trace: Vec<u64> = Vec::new();
    let mut best_r = 0u64;
    let mut best_params: Option<ModelParams> = None;
    let mut stale_epochs = 0usize;
    let mut failed = false;
    let mut shatter_epoch = None;

    'training: for epoch in 1..=tcfg.max_epochs {
        for batch in datagen::batches(lib, tcfg.batch_size, tcfg.seed, (epoch - 1) as u64) {
            let seqs: Vec<&[u32]> = batch.iter().map(|&i| lib.sequence(i)).collect();
            let loss = train_step(params, &seqs, lib.n(), tcfg, &mut adam, dropout_rng.as_mut())?;
            if !loss.is_finite() {
                failed = true;
                break 'training;
            }
        }
        let r = count_correct(params, lib)?;
        trace.push(r);
        if r > best_r || best_params.is_none() {
            best_r = r;
            best_params = Some(params.clone());
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
        }
        if r == k {
            shatter_epoch = Some(epoch as u32);
            break;
        }
        if stale_epochs >= tcfg.patience {
            break;
        }
    }

    if let Some(best) = best_params {
        *params = best;
    }
    let final_r = if trace.is_empty() { count_correct(params, lib)? } else { best_r };
    Ok(RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        model: params.cfg.clone(),
        train: tcfg.clone(),
        library: lib.descriptor(),
        restart: 0,
        epochs_run: trace.len(),
        trace,
        shatter_epoch,
        failed,
        wall_time_secs: started.elapsed().as_secs_f64(),
        final_capacity: CapacityMeasurement::from_r(final_r, k, lib.t() as u64, None),
    })
}

/// One optimizer step on a batch. Returns the loss (possibly
/// non-finite, in which case no update was applied).
fn train_step(
    params: &mut ModelParams,
    seqs: &[&[u32]],
    n: usize,
    tcfg: &TrainConfig,
    adam: &mut Adam,
    dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<f64> {
    let x = params.embed_sequences(seqs)?;
    let mut g = Graph::new();
    let xid = g.constant(x);
    let bound = params.bind(&mut g, true);
    let h = params.hidden(&mut g, xid, &bound, dropout_rng)?;

    let loss_id = if tcfg.full_sequence_loss {
        // Every position i < N−1 predicts token i+1; the final position
        // has nothing to predict and gets weight 0.
        let logits = g.matmul(h, bound.output_head)?;
        let mut targets = Vec::with_capacity(seqs.len() * n);
        let mut weights = Vec::with_capacity(seqs.len() * n);
        for seq in seqs {
            for i in 0..n {
                if i + 1 < n {
                    targets.push(seq[i + 1]);
                    weights.push(1.0);
                } else {
                    targets.push(0);
                    weights.push(0.0);
                }
            }
        }
        g.cross_entropy_mean(logits, &targets, Some(weights))?
    } else {
        let read_out = g.take_position(h, n - 2)?;
        let logits = g.matmul(read_out, bound.output_head)?;
        let targets: Vec<u32> = seqs.iter().map(|s| s[n - 1]).collect();
        g.cross_entropy_mean(logits, &targets, None)?
    };

    let loss = g.value(loss_id).item();
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = g.backward(loss_id)?;
    let grad_tensors: Vec<Tensor> = bound.leaves.iter().map(|&id| grads.dense(&g, id)).collect();
    drop(grads);
    drop(g);
    let mut tensors = params.trainable_tensors_mut();
    adam.update(&mut tensors, &grad_tensors);
    Ok(loss)
}

// ── Protocols ────────────────────────────────────────────────────────

/// Outcome of a best-of-restarts protocol run.
#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub measurement: CapacityMeasurement,
    pub records: Vec<RunRecord>,
    /// Restart index of the winner.
    pub winner: usize,
}

fn restart_seed(base: u64, restart: usize) -> u64 {
    rng::mix(base, rng::mix(rng::tag::RESTART, restart as u64))
}

/// Maximum attainable capacity: train against one large library and
/// report the restart with the most memorized sequences.
pub fn run_mac(mcfg: &ModelConfig, tcfg: &TrainConfig, k_large: usize) -> Result<ProtocolResult> {
    let lib = generate_protocol_library(mcfg, tcfg, k_large)?;
    run_mac_on(mcfg, tcfg, &lib)
}

pub(crate) fn generate_protocol_library(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    k: usize,
) -> Result<SequenceLibrary> {
    datagen::generate_library(k, mcfg.seq_len, mcfg.vocab_size, rng::mix(tcfg.seed, rng::tag::LIBRARY))
}

/// MAC against a caller-provided library.
pub fn run_mac_on(mcfg: &ModelConfig, tcfg: &TrainConfig, lib: &SequenceLibrary) -> Result<ProtocolResult> {
    tcfg.validate()?;
    let mut records = (0..tcfg.restarts)
        .into_par_iter()
        .map(|i| {
            let seed = restart_seed(tcfg.seed, i);
            let mut params = init_model(mcfg, seed)?;
            let rcfg = TrainConfig { seed, ..tcfg.clone() };
            let mut record = train(&mut params, lib, &rcfg)?;
            record.restart = i as u32;
            Ok(record)
        })
        .collect::<Result<Vec<RunRecord>>>()?;

    let winner = records
        .iter()
        .enumerate()
        .max_by_key(|(i, r)| (!r.failed, r.final_capacity.r, std::cmp::Reverse(*i)))
        .map(|(i, _)| i)
        .expect("restarts >= 1");
    let mut measurement = records[winner].final_capacity;
    measurement.protocol = Some(Protocol::Mac);
    for record in &mut records {
        record.final_capacity.protocol = Some(Protocol::Mac);
    }
    Ok(ProtocolResult { measurement, records, winner })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MlsProbe {
    pub k: usize,
    pub shattered: bool,
}

/// Outcome of the maximum-library-size search.
#[derive(Debug, Clone)]
pub struct MlsResult {
    /// Largest library size fully memorized within the budget.
    pub k_max: u64,
    pub probes: Vec<MlsProbe>,
    /// Records of the runs at k_max.
    pub boundary_success: Vec<RunRecord>,
    /// Records at the smallest failing size probed, if any.
    pub boundary_failure: Vec<RunRecord>,
}

/// Maximum library size: doubling search on K until shattering fails,
/// then bisection to the largest fully memorized K. Each probe draws a
/// fresh K-sized library (seeded by K) and shatters with restarts;
/// remaining restarts are skipped once one of them shatters.
pub fn run_mls(mcfg: &ModelConfig, tcfg: &TrainConfig, max_k: Option<usize>) -> Result<MlsResult> {
    tcfg.validate()?;
    let feasible = datagen::feasible_library_size(mcfg.vocab_size, mcfg.seq_len);
    let cap = max_k.map_or(feasible, |m| (m as u128).min(feasible)) as usize;

    let mut probes = Vec::new();
    let mut records_at: std::collections::HashMap<usize, Vec<RunRecord>> = Default::default();
    let mut probe = |k: usize, records_at: &mut std::collections::HashMap<usize, Vec<RunRecord>>| -> Result<bool> {
        let lib = datagen::generate_library(
            k,
            mcfg.seq_len,
            mcfg.vocab_size,
            rng::mix(tcfg.seed, rng::mix(rng::tag::LIBRARY, k as u64)),
        )?;
        let mut runs = Vec::new();
        let mut shattered = false;
        for i in 0..tcfg.restarts {
            let seed = restart_seed(tcfg.seed, i);
            let mut params = init_model(mcfg, seed)?;
            let rcfg = TrainConfig { seed, ..tcfg.clone() };
            let mut record = train(&mut params, &lib, &rcfg)?;
            record.restart = i as u32;
            record.final_capacity.protocol = Some(Protocol::Mls);
            shattered = record.shatter_epoch.is_some();
            runs.push(record);
            if shattered {
                break;
            }
        }
        probes.push(MlsProbe { k, shattered });
        records_at.insert(k, runs);
        Ok(shattered)
    };

    if cap == 0 || !probe(1, &mut records_at)? {
        return Ok(MlsResult {
            k_max: 0,
            probes,
            boundary_success: Vec::new(),
            boundary_failure: records_at.remove(&1).unwrap_or_default(),
        });
    }
    let mut lo = 1usize;
    let mut hi: Option<usize> = None;
    let mut next = 2usize;
    while next <= cap {
        if probe(next, &mut records_at)? {
            lo = next;
            if next > cap / 2 {
                break;
            }
            next *= 2;
        } else {
            hi = Some(next);
            break;
        }
    }
    if let Some(mut hi) = hi {
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if probe(mid, &mut records_at)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let boundary_failure = records_at.remove(&hi).unwrap_or_default();
        Ok(MlsResult {
            k_max: lo as u64,
            boundary_success: records_at.remove(&lo).unwrap_or_default(),
            boundary_failure,
            probes,
        })
    } else {
        // Never failed within the cap.
        Ok(MlsResult {
            k_max: lo as u64,
            boundary_success: records_at.remove(&lo).unwrap_or_default(),
            boundary_failure: Vec::new(),
            probes,
        })
    }
}

/// Epochs-to-shatter distribution over independent trials.
#[derive(Debug, Clone)]
pub struct ShatterTrials {
    /// Shatter epoch per uncensored trial, in trial order.
    pub epochs: Vec<u32>,
    /// Trials that never shattered within the budget.
    pub censored: usize,
    pub records: Vec<RunRecord>,
    /// NB fit over the uncensored epochs (censored trials excluded).
    pub fit: Option<NbFit>,
}

/// Repeats the shatter experiment `trials` times with independent
/// seeds (fresh library and fresh weights per trial; one run each, no
/// restarts) and fits a negative binomial to the epoch counts.
pub fn epochs_to_shatter_trials(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    k: usize,
    trials: usize,
) -> Result<ShatterTrials> {
    if trials == 0 {
        return Err(Error::Contract("at least one trial is required".into()));
    }
    let records = (0..trials)
        .into_par_iter()
        .map(|t| {
            let seed = rng::mix(tcfg.seed, rng::mix(rng::tag::TRIAL, t as u64));
            let lib = datagen::generate_library(
                k,
                mcfg.seq_len,
                mcfg.vocab_size,
                rng::mix(seed, rng::tag::LIBRARY),
            )?;
            let mut params = init_model(mcfg, seed)?;
            let rcfg = TrainConfig { seed, restarts: 1, ..tcfg.clone() };
            let mut record = train(&mut params, &lib, &rcfg)?;
            record.restart = t as u32;
            Ok(record)
        })
        .collect::<Result<Vec<RunRecord>>>()?;

    let epochs: Vec<u32> = records.iter().filter_map(|r| r.shatter_epoch).collect();
    let censored = records.len() - epochs.len();
    let fit = fit_negative_binomial(&epochs);
    Ok(ShatterTrials { epochs, censored, records, fit })
}

/// One point of the batch-size sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub batch_size: usize,
    pub epoch_budget: usize,
    pub measurement: CapacityMeasurement,
    pub records: Vec<RunRecord>,
}

/// MAC capacity per batch size on a shared library. Budgets are
/// normalized to an equal total optimizer-step count: the reference is
/// `max_epochs` epochs at the configured batch size, and every sweep
/// point gets the epoch count that spends the same number of steps.
pub fn batch_size_sweep(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    k_large: usize,
    sizes: &[usize],
) -> Result<Vec<SweepPoint>> {
    if sizes.is_empty() {
        return Err(Error::Contract("batch-size sweep needs at least one size".into()));
    }
    let lib = generate_protocol_library(mcfg, tcfg, k_large)?;
    let steps_per_epoch = |bs: usize| k_large.div_ceil(bs);
    let step_budget = tcfg.max_epochs * steps_per_epoch(tcfg.batch_size);

    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 {
            return Err(Error::InvalidConfig("batch size 0 in sweep".into()));
        }
        let epochs = (step_budget / steps_per_epoch(size)).max(1);
        let point_cfg = TrainConfig { batch_size: size, max_epochs: epochs, ..tcfg.clone() };
        let result = run_mac_on(mcfg, &point_cfg, &lib)?;
        out.push(SweepPoint {
            batch_size: size,
            epoch_budget: epochs,
            measurement: result.measurement,
            records: result.records,
        });
    }
    Ok(out)
}

/// Quick structural summary used by reports: capacity and parameter
/// count for a config.
pub fn capacity_per_parameter(measurement: &CapacityMeasurement, mcfg: &ModelConfig) -> f64 {
    measurement.r_adjusted / count_trainable_params(mcfg) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{Binomial, DiscreteCDF};
    use std::collections::HashMap;

    fn shatter_cfg() -> ModelConfig {
        ModelConfig::new(128, 8, 16, 1, 1).with_head_dim(16)
    }

    fn quick_tcfg(seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: 300,
            patience: 40,
            restarts: 1,
            ..TrainConfig::new(seed)
        }
    }

    #[test]
    fn guess_bound_boundaries_are_exact() {
        assert_eq!(guess_bound(0, 2048, 128), 0.0);
        assert_eq!(guess_bound(2049, 2048, 128), 1.0);
        assert_eq!(guess_tail(0, 2048, 128), 1.0);
        assert_eq!(guess_tail(2049, 2048, 128), 0.0);
    }

    #[test]
    fn guess_bound_matches_independent_binomial_cdf() {
        let binom = Binomial::new(1.0 / 128.0, 2048).unwrap();
        for r in [1u64, 5, 16, 25, 40, 100] {
            let ours = guess_bound(r, 2048, 128);
            let reference = binom.cdf(r - 1);
            assert!((ours - reference).abs() < 1e-12, "r={r}: {ours} vs {reference}");
        }
    }

    #[test]
    fn guess_bound_matches_reported_values() {
        // T=128, K=2048: P(r<25) close to 0.96 and the complement of
        // P(r<40) within a factor of 3 of 2.8e-7.
        let p25 = guess_bound(25, 2048, 128);
        assert!((p25 - 0.96).abs() <= 0.03, "P(r<25) = {p25}");
        let tail40 = guess_tail(40, 2048, 128);
        assert!(tail40 / 2.8e-7 < 3.0 && 2.8e-7 / tail40 < 3.0, "tail = {tail40:e}");
        // The two routes are complements.
        assert!((guess_bound(40, 2048, 128) + tail40 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn measurement_fields_follow_from_r() {
        let m = CapacityMeasurement::from_r(32_000, 32_000, 128, None);
        assert_eq!(m.c_offset, 250.0);
        assert_eq!(m.r_adjusted, 32_000.0 - 250.0);
        assert!(m.p_chance < 1e-100);

        let chance = CapacityMeasurement::from_r(250, 32_000, 128, None);
        assert!(chance.p_chance > 0.4 && chance.p_chance < 0.6);
    }

    #[test]
    fn stub_predictors_measure_as_expected() {
        let lib = datagen::generate_library(512, 6, 64, 3).unwrap();

        // Perfect memorizer: looks the answer up by prefix.
        let answers: HashMap<Vec<u32>, u32> = (0..lib.k())
            .map(|i| (lib.prefix(i).to_vec(), lib.final_token(i)))
            .collect();
        let r = capacity_of_predictor(|prefix| answers[prefix], &lib);
        assert_eq!(r, 512);

        // Constant guesser lands near K/T.
        let r0 = capacity_of_predictor(|_| 0, &lib);
        let expect = 512.0 / 64.0;
        let sd = (512.0_f64 * (1.0 / 64.0) * (63.0 / 64.0)).sqrt();
        assert!((r0 as f64 - expect).abs() < 4.0 * sd, "r0 = {r0}");
    }

    #[test]
    fn untrained_capacity_sits_in_the_chance_interval() {
        // Central 99.99% interval of Binomial(K, 1/T) over fixed seeds.
        let cfg = shatter_cfg();
        let k = 4096;
        for seed in 0..5u64 {
            let lib = datagen::generate_library(k, cfg.seq_len, cfg.vocab_size, 900 + seed).unwrap();
            let params = init_model(&cfg, 900 + seed).unwrap();
            let m = measure_capacity(&params, &lib).unwrap();
            let (mut lo, mut hi) = (0u64, k as u64);
            while guess_bound(lo + 1, k as u64, 128) < 5e-5 {
                lo += 1;
            }
            while guess_tail(hi, k as u64, 128) < 5e-5 {
                hi -= 1;
            }
            assert!(
                (lo..=hi).contains(&m.r),
                "seed {seed}: r = {} outside [{lo}, {hi}]",
                m.r
            );
        }
    }

    #[test]
    fn zero_epoch_budget_is_chance_level() {
        let cfg = shatter_cfg();
        let lib = datagen::generate_library(2048, cfg.seq_len, cfg.vocab_size, 17).unwrap();
        let mut params = init_model(&cfg, 17).unwrap();
        let tcfg = TrainConfig { max_epochs: 0, ..quick_tcfg(17) };
        let record = train(&mut params, &lib, &tcfg).unwrap();
        assert!(record.trace.is_empty());
        // Chance gives ~16 of 2048; far below even 1% memorization.
        assert!(record.final_capacity.r < 40, "r = {}", record.final_capacity.r);
        assert!(record.final_capacity.p_chance > 1e-6);
    }

    #[test]
    fn training_shatters_the_small_library() {
        // 16 sequences of length 8 at B = d_h = 16.
        let cfg = shatter_cfg();
        let lib = datagen::generate_library(16, 8, 128, 5).unwrap();
        let mut params = init_model(&cfg, 5).unwrap();
        let frozen_before: Vec<Tensor> =
            params.frozen_tensors().iter().map(|(_, t)| (*t).clone()).collect();

        let tcfg = TrainConfig { batch_size: 16, max_epochs: 500, patience: 100, ..quick_tcfg(5) };
        let record = train(&mut params, &lib, &tcfg).unwrap();
        assert!(!record.failed);
        assert_eq!(record.final_capacity.r, 16, "trace: {:?}", record.trace);
        assert!(record.shatter_epoch.is_some());
        assert!(record.shatter_epoch.unwrap() <= 500);

        // Frozen tensors did not move.
        for ((_, after), before) in params.frozen_tensors().iter().zip(&frozen_before) {
            assert_eq!(*after, before);
        }

        // The trained model now answers every prefix.
        for i in 0..lib.k() {
            assert_eq!(params.predict_next(lib.prefix(i)).unwrap(), lib.final_token(i));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = shatter_cfg();
        let lib = datagen::generate_library(32, 8, 128, 6).unwrap();
        let tcfg = TrainConfig { batch_size: 16, max_epochs: 12, ..quick_tcfg(6) };
        let mut a = init_model(&cfg, 6).unwrap();
        let mut b = init_model(&cfg, 6).unwrap();
        let ra = train(&mut a, &lib, &tcfg).unwrap();
        let rb = train(&mut b, &lib, &tcfg).unwrap();
        assert_eq!(ra.canonical(), rb.canonical());
        assert_eq!(ra.trace, rb.trace);
        for (ta, tb) in a.trainable_tensors().iter().zip(b.trainable_tensors()) {
            assert_eq!(ta.1, tb.1, "weights diverged at {}", ta.0);
        }
    }

    #[test]
    fn divergence_marks_the_run_failed() {
        let cfg = shatter_cfg();
        let lib = datagen::generate_library(16, 8, 128, 7).unwrap();
        let mut params = init_model(&cfg, 7).unwrap();
        params.layers[0].heads[0].w_q.data_mut()[0] = f64::NAN;
        let tcfg = TrainConfig { batch_size: 16, max_epochs: 3, ..quick_tcfg(7) };
        let record = train(&mut params, &lib, &tcfg).unwrap();
        assert!(record.failed);
    }

    #[test]
    fn best_of_restarts_takes_the_max() {
        let cfg = shatter_cfg();
        let tcfg = TrainConfig {
            batch_size: 16,
            max_epochs: 6,
            restarts: 3,
            ..quick_tcfg(8)
        };
        let result = run_mac(&cfg, &tcfg, 64).unwrap();
        assert_eq!(result.records.len(), 3);
        for record in &result.records {
            assert!(result.measurement.r >= record.final_capacity.r);
        }
        assert_eq!(
            result.measurement.r,
            result.records[result.winner].final_capacity.r
        );
        assert_eq!(result.measurement.protocol, Some(Protocol::Mac));
    }

    #[test]
    fn record_jsonl_roundtrip() {
        let cfg = shatter_cfg();
        let lib = datagen::generate_library(16, 8, 128, 9).unwrap();
        let mut params = init_model(&cfg, 9).unwrap();
        let tcfg = TrainConfig { batch_size: 16, max_epochs: 2, ..quick_tcfg(9) };
        let record = train(&mut params, &lib, &tcfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        records::append_records(&path, &[record.clone()]).unwrap();
        records::append_records(&path, &[record.clone()]).unwrap();
        let back = records::read_records(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], record);
        assert_eq!(back[1], record);
    }

    #[test]
    fn sweep_emits_one_point_per_size_with_equal_steps() {
        let cfg = shatter_cfg();
        let tcfg = TrainConfig {
            batch_size: 16,
            max_epochs: 4,
            restarts: 1,
            ..quick_tcfg(10)
        };
        let points = batch_size_sweep(&cfg, &tcfg, 64, &[8, 16]).unwrap();
        assert_eq!(points.len(), 2);
        // 4 epochs × 4 steps at the reference size = 16 steps; size 8
        // runs 8 steps/epoch → 2 epochs.
        assert_eq!(points[0].epoch_budget, 2);
        assert_eq!(points[1].epoch_budget, 4);
        assert!(batch_size_sweep(&cfg, &tcfg, 64, &[]).is_err());
    }
}
