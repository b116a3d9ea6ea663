//! Seeded robustness perturbations of retrieved document lists.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::DocumentRecord;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PerturbError {
    #[error("distractor pool has {available} documents, {requested} requested")]
    PoolTooSmall { available: usize, requested: usize },
    #[error("distractor {0:?} is already among the retrieved documents")]
    PoolOverlap(String),
}

/// SplitMix64 generator. The output sequence is fixed by the seed on every platform.
#[derive(Debug, Clone)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// `next_u64() mod bound`; `bound` must be non-zero.
    pub fn below(&mut self, bound: usize) -> usize {
        (self.next_u64() % bound as u64) as usize
    }

    /// Fisher–Yates: for i from n−1 down to 1, swap i with `below(i + 1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Per-query seed, independent of scheduling order.
pub fn query_seed(run_seed: u64, query_id: &str) -> u64 {
    run_seed ^ fnv1a64(query_id.as_bytes())
}

pub fn shuffle_docs<S: Clone>(docs: &[DocumentRecord<S>], seed: u64) -> Vec<DocumentRecord<S>> {
    let mut out = docs.to_vec();
    Prng::new(seed).shuffle(&mut out);
    out
}

/// Where each distractor ended up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Insertion {
    pub doc_id: String,
    /// Index in the list at the moment of insertion.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDocs<S> {
    pub documents: Vec<DocumentRecord<S>>,
    pub insertions: Vec<Insertion>,
}

/// Inserts `n` distinct pool documents at seeded positions.
///
/// Pool indices are drawn first (rejecting repeats), then each drawn document
/// is inserted in draw order at a position uniform over `[0, current_len]`.
pub fn inject_noise<S: Clone>(
    docs: &[DocumentRecord<S>],
    pool: &[DocumentRecord<S>],
    n: usize,
    seed: u64,
) -> Result<NoisyDocs<S>, PerturbError> {
    if n == 0 {
        return Ok(NoisyDocs {
            documents: docs.to_vec(),
            insertions: Vec::new(),
        });
    }
    if pool.len() < n {
        return Err(PerturbError::PoolTooSmall {
            available: pool.len(),
            requested: n,
        });
    }
    let present: HashSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
    if let Some(dup) = pool.iter().find(|p| present.contains(p.doc_id.as_str())) {
        return Err(PerturbError::PoolOverlap(dup.doc_id.clone()));
    }

    let mut rng = Prng::new(seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    while chosen.len() < n {
        let idx = rng.below(pool.len());
        if !chosen.contains(&idx) {
            chosen.push(idx);
        }
    }

    let mut documents = docs.to_vec();
    let mut insertions = Vec::with_capacity(n);
    for idx in chosen {
        let position = rng.below(documents.len() + 1);
        let distractor = pool[idx].clone();
        insertions.push(Insertion {
            doc_id: distractor.doc_id.clone(),
            position,
        });
        documents.insert(position, distractor);
    }
    Ok(NoisyDocs { documents, insertions })
}
