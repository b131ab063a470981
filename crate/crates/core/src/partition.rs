//! Compositional-complexity profiling and validation-bucket assignment.
//!
//! A sample's complexity is the word count of its longest annotated phrase.
//! The training set is split into `k` ordered buckets so that (a) all samples
//! sharing a longest-phrase length land in the same bucket, (b) bucket index
//! is nondecreasing in length, and (c) bucket sizes track the ideal `n/k`
//! quantiles as closely as whole length classes allow. The closed-form rule:
//! a length class with cumulative count `c` goes to bucket
//! `min(k, ⌊(c−1)·k/n⌋ + 1)`.

use crate::synth::Sample;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum PartitionError {
    #[error("sample {id} carries no phrase annotations")]
    MissingPhrases { id: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("bucket count must be at least 1")]
    InvalidK,
    #[error("sample with length {length} has no bucket assignment")]
    Unassigned { length: usize },
}

pub type Result<T> = std::result::Result<T, PartitionError>;

/// Longest-phrase word count of one sample. For synthetic queries this is
/// the longest descriptor's item count.
pub fn longest_phrase_length(sample: &Sample) -> Result<usize> {
    sample
        .phrase_lengths
        .iter()
        .copied()
        .max()
        .filter(|&l| l > 0)
        .ok_or_else(|| PartitionError::MissingPhrases { id: sample.id.clone() })
}

/// Per-sample lengths plus the length histogram and its cumulative form.
#[derive(Clone, Debug)]
pub struct ComplexityProfile {
    /// `(sample id, longest-phrase length)` in dataset order.
    sample_lengths: Vec<(String, usize)>,
    counts: BTreeMap<usize, usize>,
}

impl ComplexityProfile {
    /// Number of samples per longest-phrase length.
    pub fn counts(&self) -> &BTreeMap<usize, usize> {
        &self.counts
    }

    /// Cumulative counts `c(L) = Σ_{j ≤ L} S(j)`.
    pub fn cumulative(&self) -> BTreeMap<usize, usize> {
        let mut acc = 0;
        self.counts
            .iter()
            .map(|(&l, &n)| {
                acc += n;
                (l, acc)
            })
            .collect()
    }

    pub fn total(&self) -> usize {
        self.sample_lengths.len()
    }

    pub fn sample_lengths(&self) -> &[(String, usize)] {
        &self.sample_lengths
    }
}

/// Builds the complexity profile of a dataset in one pass.
pub fn count_by_length(samples: &[Sample]) -> Result<ComplexityProfile> {
    if samples.is_empty() {
        return Err(PartitionError::EmptyDataset);
    }
    let mut sample_lengths = Vec::with_capacity(samples.len());
    let mut counts = BTreeMap::new();
    for s in samples {
        let l = longest_phrase_length(s)?;
        *counts.entry(l).or_insert(0) += 1;
        sample_lengths.push((s.id.clone(), l));
    }
    Ok(ComplexityProfile { sample_lengths, counts })
}

/// One validation bucket: the ids and dataset positions of its samples and
/// the (closed) range of lengths it holds, `None` when empty.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Bucket {
    pub ids: Vec<String>,
    pub indices: Vec<usize>,
    pub length_range: Option<(usize, usize)>,
}

/// The `k` ordered buckets. Disjoint, covering, and ordered by complexity.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ValidationPartition {
    pub buckets: Vec<Bucket>,
}

impl ValidationPartition {
    pub fn k(&self) -> usize {
        self.buckets.len()
    }

    /// Bucket index (0-based) per dataset position.
    pub fn bucket_of_sample(&self) -> Vec<usize> {
        let total: usize = self.buckets.iter().map(|b| b.indices.len()).sum();
        let mut out = vec![usize::MAX; total];
        for (bi, b) in self.buckets.iter().enumerate() {
            for &i in &b.indices {
                out[i] = bi;
            }
        }
        out
    }
}

/// Assigns every length class to a bucket by the closed-form quantile rule
/// and materializes the per-bucket sample lists.
pub fn assign_buckets(profile: &ComplexityProfile, k: usize) -> Result<ValidationPartition> {
    if k < 1 {
        return Err(PartitionError::InvalidK);
    }
    let n = profile.total();
    let mut bucket_of_length: BTreeMap<usize, usize> = BTreeMap::new();
    for (&length, &cum) in &profile.cumulative() {
        let i = (((cum - 1) * k) / n + 1).min(k);
        bucket_of_length.insert(length, i - 1);
    }

    let mut buckets: Vec<Bucket> = (0..k)
        .map(|_| Bucket { ids: Vec::new(), indices: Vec::new(), length_range: None })
        .collect();
    for (idx, (id, length)) in profile.sample_lengths().iter().enumerate() {
        let &bi = bucket_of_length
            .get(length)
            .ok_or(PartitionError::Unassigned { length: *length })?;
        let b = &mut buckets[bi];
        b.ids.push(id.clone());
        b.indices.push(idx);
        b.length_range = Some(match b.length_range {
            Some((lo, hi)) => (lo.min(*length), hi.max(*length)),
            None => (*length, *length),
        });
    }

    for (bi, b) in buckets.iter().enumerate() {
        if b.indices.is_empty() {
            log::warn!(
                "validation bucket {} of {} is empty (fewer distinct lengths than buckets); its weight generator will receive no meta updates",
                bi + 1,
                k
            );
        }
    }
    Ok(ValidationPartition { buckets })
}
