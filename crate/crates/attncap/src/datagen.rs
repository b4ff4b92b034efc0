//! Deterministic synthetic sequence libraries.
//!
//! A library holds K sequences of N uniform i.i.d. tokens over a
//! vocabulary of T. Prefixes (the first N−1 tokens) are kept unique by
//! rejection sampling: two sequences sharing a prefix but differing in
//! the final token would make perfect memorization impossible by
//! construction. Rejected draws are redrawn whole, so the accepted
//! libraries stay uniform over prefix-unique libraries.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// K × N token array with its generation parameters; immutable after
/// generation and bit-identically reproducible from (K, N, T, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLibrary {
    k: usize,
    n: usize,
    t: usize,
    seed: u64,
    /// Row-major K × N token ids.
    tokens: Vec<u32>,
}

/// The (K, N, T, seed) identity of a library, as stored in run records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibraryDescriptor {
    pub k: usize,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
}

/// Number of distinct length-`len` prefixes, saturating at u128::MAX.
fn prefix_space(t: usize, len: usize) -> u128 {
    let mut space: u128 = 1;
    for _ in 0..len {
        space = space.saturating_mul(t as u128);
    }
    space
}

/// Largest feasible library size for (T, N): the count of distinct
/// (N−1)-prefixes.
pub fn feasible_library_size(t: usize, n: usize) -> u128 {
    prefix_space(t, n.saturating_sub(1))
}

/// Uniform i.i.d. token sequences with unique (N−1)-prefixes.
pub fn generate_library(k: usize, n: usize, t: usize, seed: u64) -> Result<SequenceLibrary> {
    if n < 2 {
        return Err(Error::InvalidConfig("sequence length must be >= 2".into()));
    }
    if t < 2 {
        return Err(Error::InvalidConfig("vocabulary must have >= 2 tokens".into()));
    }
    let available = prefix_space(t, n - 1);
    if (k as u128) > available {
        return Err(Error::InfeasibleLibrary {
            requested: k as u64,
            available,
            prefix_len: n - 1,
        });
    }

    let mut stream = rng::stream(rng::mix(seed, rng::tag::LIBRARY));
    let mut tokens = Vec::with_capacity(k * n);
    let mut seen: HashSet<Box<[u32]>> = HashSet::with_capacity(k);
    let mut draw = vec![0u32; n];
    while seen.len() < k {
        for slot in draw.iter_mut() {
            *slot = rng::below(&mut stream, t as u64) as u32;
        }
        if seen.insert(draw[..n - 1].to_vec().into_boxed_slice()) {
            tokens.extend_from_slice(&draw);
        }
    }
    Ok(SequenceLibrary { k, n, t, seed, tokens })
}

impl SequenceLibrary {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn descriptor(&self) -> LibraryDescriptor {
        LibraryDescriptor { k: self.k, n: self.n, t: self.t, seed: self.seed }
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.n..(i + 1) * self.n]
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks(self.n)
    }

    pub fn prefix(&self, i: usize) -> &[u32] {
        &self.sequence(i)[..self.n - 1]
    }

    pub fn final_token(&self, i: usize) -> u32 {
        self.sequence(i)[self.n - 1]
    }

    /// True when every (N−1)-prefix is unique.
    pub fn prefixes_unique(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.k);
        self.sequences().all(|s| seen.insert(&s[..self.n - 1]))
    }

    // Library file: magic, u32 version, u64 K/N/T/seed, then row-major
    // u32 little-endian token ids.

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(LIB_MAGIC)?;
        w.write_all(&LIB_VERSION.to_le_bytes())?;
        for v in [self.k as u64, self.n as u64, self.t as u64, self.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &tok in &self.tokens {
            w.write_all(&tok.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SequenceLibrary> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != LIB_MAGIC {
            return Err(Error::Format("not a sequence library (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != LIB_VERSION {
            return Err(Error::Format(format!("unsupported library version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next = || -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let (k, n, t, seed) = (next()? as usize, next()? as usize, next()? as usize, next()?);
        let mut tokens = vec![0u32; k * n];
        for tok in &mut tokens {
            r.read_exact(&mut b4)?;
            *tok = u32::from_le_bytes(b4);
            if *tok as usize >= t {
                return Err(Error::Format(format!("token {tok} exceeds vocabulary {t}")));
            }
        }
        Ok(SequenceLibrary { k, n, t, seed, tokens })
    }
}

/// One epoch's batches: a seeded permutation of 0..K cut into
/// `batch_size` chunks (the last may be short). Deterministic per
/// (seed, epoch).
pub fn batches(lib: &SequenceLibrary, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..lib.k).collect();
    let mut stream = rng::stream(rng::mix(rng::mix(seed, rng::tag::SHUFFLE), epoch));
    rng::shuffle(&mut stream, &mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

const LIB_MAGIC: &[u8; 8] = b"SEQLIB01";
const LIB_VERSION: u32 = 1;
