//! Partition of the training split into a sample space (human-labeled
//! context pool) and annotation targets, plus random context draws.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("fraction must lie strictly between 0 and 1, got {0}")]
    Fraction(f64),
    #[error("training split needs at least 2 sentences, got {0}")]
    TooSmall(usize),
    #[error("fraction {fraction} of {train_size} sentences leaves the {side} empty")]
    EmptySide {
        fraction: f64,
        train_size: usize,
        side: &'static str,
    },
    #[error("context size m = {m} exceeds sample space size x = {x}")]
    ContextTooLarge { m: usize, x: usize },
    #[error("context size must be at least 1")]
    EmptyContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(fraction: f64, seed: u64) -> Result<Self, SplitError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(SplitError::Fraction(fraction));
        }
        Ok(SplitSpec { fraction, seed })
    }

    /// Sample-space size: `round(fraction * n)`, halves rounded up.
    pub fn sample_size(&self, train_size: usize) -> usize {
        (self.fraction * train_size as f64 + 0.5).floor() as usize
    }
}

/// Persisted as `{fraction, seed, sample_space, targets}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub fraction: f64,
    pub seed: u64,
    /// Sample space ids, ascending.
    pub sample_space: Vec<usize>,
    /// Annotation target ids, ascending.
    pub targets: Vec<usize>,
}

impl SplitResult {
    pub fn x(&self) -> usize {
        self.sample_space.len()
    }

    pub fn t(&self) -> usize {
        self.targets.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Random,
    Retrieved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSet {
    pub example_ids: Vec<usize>,
    pub selection: Selection,
}

pub fn split_sample_space(train_size: usize, spec: SplitSpec) -> Result<SplitResult, SplitError> {
    SplitSpec::new(spec.fraction, spec.seed)?;
    if train_size < 2 {
        return Err(SplitError::TooSmall(train_size));
    }
    let x = spec.sample_size(train_size);
    let side = if x == 0 {
        Some("sample space")
    } else if x >= train_size {
        Some("target set")
    } else {
        None
    };
    if let Some(side) = side {
        return Err(SplitError::EmptySide {
            fraction: spec.fraction,
            train_size,
            side,
        });
    }

    let mut ids: Vec<usize> = (0..train_size).collect();
    SeededRng::new(spec.seed).partial_shuffle(&mut ids, x);
    let mut sample_space = ids[..x].to_vec();
    let mut targets = ids[x..].to_vec();
    sample_space.sort_unstable();
    targets.sort_unstable();
    Ok(SplitResult {
        fraction: spec.fraction,
        seed: spec.seed,
        sample_space,
        targets,
    })
}

/// Draws `m` distinct ids from the sample space, in draw order.
pub fn sample_random_context(split: &SplitResult, m: usize, seed: u64) -> Result<ContextSet, SplitError> {
    if m == 0 {
        return Err(SplitError::EmptyContext);
    }
    if m > split.x() {
        return Err(SplitError::ContextTooLarge { m, x: split.x() });
    }
    let mut pool = split.sample_space.clone();
    SeededRng::new(seed).partial_shuffle(&mut pool, m);
    pool.truncate(m);
    Ok(ContextSet {
        example_ids: pool,
        selection: Selection::Random,
    })
}

/// Seed for a per-target random draw when ICL resampling is enabled:
/// one SplitMix64 step over `seed ^ target_id`.
pub fn per_target_seed(seed: u64, target_id: usize) -> u64 {
    SeededRng::new(seed ^ target_id as u64).next_u64()
}
