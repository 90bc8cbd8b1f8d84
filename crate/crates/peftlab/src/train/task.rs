//! Synthetic sequence tasks standing in for domain-shift adaptation:
//! pretraining always copies, while the adaptation splits apply the
//! task's rule. The remap task rewrites every payload token through a
//! fixed permutation; its out-of-domain split uses a second permutation
//! never seen in training.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::PAYLOAD_BASE;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    #[default]
    Remap,
}

fn default_payload() -> usize {
    32
}
fn default_min_len() -> usize {
    4
}
fn default_max_len() -> usize {
    16
}
fn default_n_train() -> usize {
    512
}
fn default_n_eval() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default)]
    pub kind: TaskKind,
    /// Number of payload tokens; ids start after the reserved specials.
    #[serde(default = "default_payload")]
    pub payload_vocab: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Size of the pretrain split and of the adaptation split.
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    /// Size of each evaluation split.
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// Seed of the remap permutations.
    #[serde(default)]
    pub remap_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::default(),
            payload_vocab: default_payload(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            n_train: default_n_train(),
            n_eval: default_n_eval(),
            remap_seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.payload_vocab < 2 {
            return Err(Error::Validation("payload_vocab must be at least 2".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Validation(format!(
                "invalid length range {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Validation("split sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// The four deterministic, pairwise-disjoint splits.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub pretrain: Vec<Sample>,
    pub adapt_train: Vec<Sample>,
    pub in_domain_eval: Vec<Sample>,
    pub ood_eval: Vec<Sample>,
    /// In-domain payload permutation (identity for copy/reverse).
    pub permutation: Vec<u32>,
    /// Out-of-domain payload permutation.
    pub ood_permutation: Vec<u32>,
}

/// Target rule of a task kind under a payload permutation.
pub fn apply_kind(kind: TaskKind, perm: &[u32], src: &[u32]) -> Vec<u32> {
    match kind {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::Remap => src
            .iter()
            .map(|&t| perm[(t - PAYLOAD_BASE) as usize] + PAYLOAD_BASE)
            .collect(),
    }
}

fn identity_perm(n: usize) -> Vec<u32> {
    (0..n as u32).collect()
}

fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    let mut p = identity_perm(n);
    p.shuffle(rng);
    p
}

/// Generates the splits. Source sequences are unique across all four
/// splits, so the splits are disjoint as (src, tgt) multisets.
pub fn make_task(spec: &TaskSpec, seed: u64) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();

    let mut draw_src = |rng: &mut ChaCha8Rng| -> Result<Vec<u32>> {
        for _ in 0..10_000 {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let src: Vec<u32> = (0..len)
                .map(|_| PAYLOAD_BASE + rng.gen_range(0..spec.payload_vocab as u32))
                .collect();
            if seen.insert(src.clone()) {
                return Ok(src);
            }
        }
        Err(Error::Validation(
            "task space too small to draw disjoint splits; enlarge lengths or vocab".into(),
        ))
    };

    let (permutation, ood_permutation) = match spec.kind {
        TaskKind::Remap => {
            let mut perm_rng = ChaCha8Rng::seed_from_u64(spec.remap_seed);
            let p1 = permutation(&mut perm_rng, spec.payload_vocab);
            let mut p2 = permutation(&mut perm_rng, spec.payload_vocab);
            while p2 == p1 {
                p2 = permutation(&mut perm_rng, spec.payload_vocab);
            }
            (p1, p2)
        }
        _ => (identity_perm(spec.payload_vocab), identity_perm(spec.payload_vocab)),
    };

    let mut split = |rng: &mut ChaCha8Rng, n: usize, perm: &[u32], copy_rule: bool| -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| {
                let src = draw_src(rng)?;
                let tgt = if copy_rule {
                    src.clone()
                } else {
                    apply_kind(spec.kind, perm, &src)
                };
                Ok(Sample { src, tgt })
            })
            .collect()
    };

    Ok(TaskData {
        pretrain: split(&mut rng, spec.n_train, &permutation, true)?,
        adapt_train: split(&mut rng, spec.n_train, &permutation, false)?,
        in_domain_eval: split(&mut rng, spec.n_eval, &permutation, false)?,
        ood_eval: split(&mut rng, spec.n_eval, &ood_permutation, false)?,
        permutation,
        ood_permutation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_task_sources_equal_targets() {
        let spec = TaskSpec { kind: TaskKind::Copy, n_train: 16, n_eval: 8, ..TaskSpec::default() };
        let data = make_task(&spec, 1).unwrap();
        for s in data.pretrain.iter().chain(&data.adapt_train) {
            assert_eq!(s.src, s.tgt);
        }
    }

    #[test]
    fn remap_with_identity_permutation_is_copy() {
        let src = vec![3, 7, 5, 3];
        let id = identity_perm(32);
        assert_eq!(apply_kind(TaskKind::Remap, &id, &src), apply_kind(TaskKind::Copy, &id, &src));
    }

    #[test]
    fn reverse_reverses() {
        let id = identity_perm(32);
        assert_eq!(apply_kind(TaskKind::Reverse, &id, &[3, 4, 5]), vec![5, 4, 3]);
    }

    #[test]
    fn splits_are_disjoint_as_multisets() {
        let spec = TaskSpec { n_train: 64, n_eval: 32, ..TaskSpec::default() };
        let data = make_task(&spec, 9).unwrap();
        let mut seen = HashSet::new();
        let all = data
            .pretrain
            .iter()
            .chain(&data.adapt_train)
            .chain(&data.in_domain_eval)
            .chain(&data.ood_eval);
        for s in all {
            assert!(seen.insert((s.src.clone(), s.tgt.clone())), "duplicate pair {:?}", s.src);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TaskSpec::default();
        let a = make_task(&spec, 4).unwrap();
        let b = make_task(&spec, 4).unwrap();
        assert_eq!(a.pretrain, b.pretrain);
        assert_eq!(a.ood_eval, b.ood_eval);
        assert_eq!(a.permutation, b.permutation);
    }

    #[test]
    fn ood_permutation_differs_from_in_domain() {
        let data = make_task(&TaskSpec::default(), 2).unwrap();
        assert_ne!(data.permutation, data.ood_permutation);
        // Both are permutations of the payload alphabet.
        for p in [&data.permutation, &data.ood_permutation] {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, identity_perm(32));
        }
    }

    #[test]
    fn remap_targets_apply_the_permutation_tokenwise() {
        let data = make_task(&TaskSpec::default(), 3).unwrap();
        for s in &data.adapt_train {
            for (a, b) in s.src.iter().zip(&s.tgt) {
                assert_eq!(data.permutation[(a - PAYLOAD_BASE) as usize] + PAYLOAD_BASE, *b);
            }
        }
    }
}
