//! Synthetic classification tasks and label-preserving data augmentation.
//!
//! The vocabulary is partitioned into contiguous token groups; every label
//! rule reads only the group sequence, so swapping a token for another from
//! the same group provably never changes the label. The augmenter's synonym
//! table is built from exactly those groups.

use crate::error::{Error, Result};
use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Label 1 iff a token of group 0 is immediately followed by one of
    /// group 1. Binary only.
    PatternPresence,
    /// Count of group-0 tokens modulo the class count.
    TokenParity,
    /// The class whose marker group (groups `0..c`) occurs most often; ties
    /// go to the smaller class.
    MajorityClass,
}

impl std::str::FromStr for LabelRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pattern_presence" => Ok(LabelRule::PatternPresence),
            "token_parity" => Ok(LabelRule::TokenParity),
            "majority_class" => Ok(LabelRule::MajorityClass),
            other => Err(Error::config(format!("unknown label rule: {other}"))),
        }
    }
}

/// Specification of a synthetic task; fully seeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub rule: LabelRule,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Token equivalence groups; label rules see group ids only.
    pub num_groups: usize,
    pub seed: u64,
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.seq_len == 0 || self.train_size == 0 || self.val_size == 0
        {
            return Err(Error::config("task sizes must all be >= 1"));
        }
        if self.num_groups == 0 || self.vocab_size % self.num_groups != 0 {
            return Err(Error::config(format!(
                "vocab_size {} must be a positive multiple of num_groups {}",
                self.vocab_size, self.num_groups
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.num_classes > self.num_groups {
            return Err(Error::config(format!(
                "num_classes {} exceeds num_groups {}",
                self.num_classes, self.num_groups
            )));
        }
        if self.rule == LabelRule::PatternPresence && self.num_classes != 2 {
            return Err(Error::config("pattern_presence is a binary rule"));
        }
        Ok(())
    }

    pub fn group_of(&self, token: u32) -> usize {
        token as usize / (self.vocab_size / self.num_groups)
    }

    /// Deterministic label of a token sequence under the task rule.
    pub fn label_of(&self, tokens: &[u32]) -> usize {
        match self.rule {
            LabelRule::PatternPresence => {
                let hit = tokens
                    .windows(2)
                    .any(|w| self.group_of(w[0]) == 0 && self.group_of(w[1]) == 1);
                usize::from(hit)
            }
            LabelRule::TokenParity => {
                let count = tokens.iter().filter(|&&t| self.group_of(t) == 0).count();
                count % self.num_classes
            }
            LabelRule::MajorityClass => {
                let mut counts = vec![0usize; self.num_classes];
                for &t in tokens {
                    let g = self.group_of(t);
                    if g < self.num_classes {
                        counts[g] += 1;
                    }
                }
                counts
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap()
            }
        }
    }
}

/// Fixed-length token sequences with labels, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub tokens: Vec<u32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> (&[u32], usize) {
        (
            &self.tokens[i * self.seq_len..(i + 1) * self.seq_len],
            self.labels[i],
        )
    }

    /// Flattened tokens and labels for the given example indices.
    pub fn gather(&self, indices: &[usize]) -> (Vec<u32>, Vec<usize>) {
        let mut toks = Vec::with_capacity(indices.len() * self.seq_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (t, l) = self.example(i);
            toks.extend_from_slice(t);
            labels.push(l);
        }
        (toks, labels)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Generates disjoint train/val splits with classes balanced to the example
/// (quota split; at most one example of slack per class).
pub fn generate_dataset(spec: &ToyTaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if spec.train_size < spec.num_classes || spec.val_size < spec.num_classes {
        return Err(Error::generation(format!(
            "cannot balance {} classes within splits of {}/{} examples",
            spec.num_classes, spec.train_size, spec.val_size
        )));
    }
    let mut rng = stream(spec.seed, "data");
    let mut seen: HashSet<Vec<u32>> = HashSet::new();

    let mut fill = |size: usize, rng: &mut crate::rng::Rng, seen: &mut HashSet<Vec<u32>>| -> Result<Dataset> {
        let mut quotas = vec![size / spec.num_classes; spec.num_classes];
        for q in quotas.iter_mut().take(size % spec.num_classes) {
            *q += 1;
        }
        let mut tokens = Vec::with_capacity(size * spec.seq_len);
        let mut labels = Vec::with_capacity(size);
        let mut remaining = size;
        let max_attempts = 500usize.saturating_mul(size).max(100_000);
        let mut attempts = 0usize;
        while remaining > 0 {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::generation(format!(
                    "class balance infeasible: {remaining} slots left after {attempts} draws (quotas {quotas:?})"
                )));
            }
            let seq: Vec<u32> = (0..spec.seq_len)
                .map(|_| rng.gen_range(0..spec.vocab_size as u32))
                .collect();
            let label = spec.label_of(&seq);
            if quotas[label] == 0 || seen.contains(&seq) {
                continue;
            }
            quotas[label] -= 1;
            remaining -= 1;
            seen.insert(seq.clone());
            tokens.extend_from_slice(&seq);
            labels.push(label);
        }
        Ok(Dataset {
            vocab_size: spec.vocab_size,
            seq_len: spec.seq_len,
            num_classes: spec.num_classes,
            tokens,
            labels,
        })
    };

    let train = fill(spec.train_size, &mut rng, &mut seen)?;
    let val = fill(spec.val_size, &mut rng, &mut seen)?;
    Ok((train, val))
}

/// Synonym-table augmenter. The table maps each token to its label-equivalent
/// replacements (same group, self excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmenterSpec {
    pub table: BTreeMap<u32, Vec<u32>>,
    pub substitution_prob: f32,
    /// Output size = factor x input size; originals are retained.
    pub factor: usize,
}

impl AugmenterSpec {
    /// Builds the within-group synonym table for a task.
    pub fn label_safe(task: &ToyTaskSpec, substitution_prob: f32, factor: usize) -> Result<Self> {
        task.validate()?;
        if !(0.0..=1.0).contains(&substitution_prob) {
            return Err(Error::config(format!(
                "substitution probability {substitution_prob} outside [0, 1]"
            )));
        }
        if factor == 0 {
            return Err(Error::config("augmentation factor must be >= 1"));
        }
        let group_size = task.vocab_size / task.num_groups;
        let mut table = BTreeMap::new();
        for t in 0..task.vocab_size as u32 {
            let g = task.group_of(t);
            let start = (g * group_size) as u32;
            let syns: Vec<u32> = (start..start + group_size as u32)
                .filter(|&s| s != t)
                .collect();
            table.insert(t, syns);
        }
        Ok(AugmenterSpec {
            table,
            substitution_prob,
            factor,
        })
    }

    /// Checks the table against a task: tokens in range and synonyms within
    /// the same equivalence group.
    pub fn validate_for(&self, task: &ToyTaskSpec) -> Result<()> {
        for (&t, syns) in &self.table {
            if t as usize >= task.vocab_size {
                return Err(Error::config(format!(
                    "synonym-table token {t} outside vocab {}",
                    task.vocab_size
                )));
            }
            for &s in syns {
                if s as usize >= task.vocab_size {
                    return Err(Error::config(format!(
                        "synonym {s} of token {t} outside vocab {}",
                        task.vocab_size
                    )));
                }
                if task.group_of(s) != task.group_of(t) {
                    return Err(Error::config(format!(
                        "synonym {s} of token {t} crosses equivalence groups"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Expands a dataset to `factor` times its size by token substitution.
/// Labels are re-derived under the rule and must survive unchanged.
pub fn augment(
    dataset: &Dataset,
    aug: &AugmenterSpec,
    task: &ToyTaskSpec,
    seed: u64,
) -> Result<Dataset> {
    aug.validate_for(task)?;
    let mut rng = stream(seed, "augment");
    let mut tokens = dataset.tokens.clone();
    let mut labels = dataset.labels.clone();
    for _copy in 1..aug.factor {
        for i in 0..dataset.len() {
            let (orig, label) = dataset.example(i);
            let mut seq = orig.to_vec();
            for slot in seq.iter_mut() {
                if rng.gen::<f32>() < aug.substitution_prob {
                    if let Some(syns) = aug.table.get(slot) {
                        if let Some(&pick) = syns.choose(&mut rng) {
                            *slot = pick;
                        }
                    }
                }
            }
            let new_label = task.label_of(&seq);
            if new_label != label {
                return Err(Error::config(format!(
                    "synonym table is not label-preserving: example {i} flipped {label} -> {new_label}"
                )));
            }
            tokens.extend_from_slice(&seq);
            labels.push(new_label);
        }
    }
    Ok(Dataset {
        vocab_size: dataset.vocab_size,
        seq_len: dataset.seq_len,
        num_classes: dataset.num_classes,
        tokens,
        labels,
    })
}
