//! Trainable adapter state, one struct per method family.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FfmSharing;
use crate::model::{ModuleGroup, Role, WeightSite};
use crate::real::Real;
use crate::tensor::{Param, Tensor};
use crate::{Error, Result};

pub(crate) fn normal_param<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Param<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect();
    Param::trainable(Tensor::new(shape, data).expect("state shape"))
}

pub(crate) fn zero_param<T: Real>(shape: Vec<usize>) -> Param<T> {
    Param::trainable(Tensor::zeros(shape))
}

/// LoRA factors for one site; `alpha` present only for the scaled
/// variant. Initialization keeps the delta exactly zero at step 0:
/// plain LoRA zeroes B, the alpha variant zeroes the scalar instead and
/// draws both factors from a normal.
#[derive(Debug, Clone)]
pub struct LoraState<T> {
    pub b: Param<T>,
    pub a: Param<T>,
    pub alpha: Option<Param<T>>,
}

impl<T: Real> LoraState<T> {
    pub fn init(rng: &mut ChaCha8Rng, site: &WeightSite, rank: usize, std: f64, scaled: bool) -> Self {
        if scaled {
            LoraState {
                b: normal_param(rng, vec![site.out_dim, rank], std),
                a: normal_param(rng, vec![rank, site.in_dim], std),
                alpha: Some(zero_param(vec![])),
            }
        } else {
            LoraState {
                b: zero_param(vec![site.out_dim, rank]),
                a: normal_param(rng, vec![rank, site.in_dim], std),
                alpha: None,
            }
        }
    }
}

/// SVD-form factors for one site: delta is `B diag(lambda ⊙ mask) A`.
/// Masked triplets contribute nothing and receive no gradient through
/// lambda; their values are retained so allocation can revive them.
#[derive(Debug, Clone)]
pub struct AdaLoraState<T> {
    pub b: Param<T>,
    pub a: Param<T>,
    pub lambda: Param<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> AdaLoraState<T> {
    pub fn init(rng: &mut ChaCha8Rng, site: &WeightSite, initial_rank: usize, std: f64) -> Self {
        AdaLoraState {
            b: normal_param(rng, vec![site.out_dim, initial_rank], std),
            a: normal_param(rng, vec![initial_rank, site.in_dim], std),
            lambda: zero_param(vec![initial_rank]),
            mask: vec![true; initial_rank],
        }
    }

    pub fn active_rank(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Key of a shared basis pair: the owning module group plus the shape
/// signature the pair was created for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BasisKey {
    pub group: ModuleGroup,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl BasisKey {
    pub fn name(&self) -> String {
        format!("{}/{}x{}", self.group.label().to_lowercase(), self.out_dim, self.in_dim)
    }
}

#[derive(Debug, Clone)]
pub struct BasisPair<T> {
    pub b: Param<T>,
    pub a: Param<T>,
}

/// The group-shared basis pairs. No pair is ever shared across groups.
#[derive(Debug, Clone)]
pub struct SharedBasisStore<T> {
    pub sharing: FfmSharing,
    pub rank: usize,
    pairs: BTreeMap<BasisKey, BasisPair<T>>,
}

impl<T: Real> SharedBasisStore<T> {
    pub fn new(sharing: FfmSharing, rank: usize) -> Self {
        SharedBasisStore { sharing, rank, pairs: BTreeMap::new() }
    }

    /// Where a site reads its pair from, and whether it uses the pair
    /// transposed (fc2 under transpose_tied sharing).
    pub fn key_for(&self, site: &WeightSite) -> (BasisKey, bool) {
        let group = site.group;
        match (self.sharing, site.role) {
            (FfmSharing::TransposeTied, Role::Fc2) => {
                // Reuse the fc1-signature pair transposed.
                (BasisKey { group, out_dim: site.in_dim, in_dim: site.out_dim }, true)
            }
            _ => (BasisKey { group, out_dim: site.out_dim, in_dim: site.in_dim }, false),
        }
    }

    pub fn ensure_pair(&mut self, rng: &mut ChaCha8Rng, key: BasisKey, std: f64) -> &BasisPair<T> {
        let rank = self.rank;
        self.pairs.entry(key).or_insert_with(|| BasisPair {
            b: normal_param(rng, vec![key.out_dim, rank], std),
            a: normal_param(rng, vec![rank, key.in_dim], std),
        })
    }

    pub fn pair(&self, key: &BasisKey) -> Result<&BasisPair<T>> {
        self.pairs.get(key).ok_or_else(|| {
            Error::Contract(format!("no shared basis pair for key {}", key.name()))
        })
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&BasisKey, &BasisPair<T>)> {
        self.pairs.iter()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn insert_pair(&mut self, key: BasisKey, pair: BasisPair<T>) {
        self.pairs.insert(key, pair);
    }

    pub fn groups(&self) -> Vec<ModuleGroup> {
        let mut groups: Vec<ModuleGroup> = self.pairs.keys().map(|k| k.group).collect();
        groups.dedup();
        groups
    }
}

/// Per-site rank coefficients for the shared-basis method.
#[derive(Debug, Clone)]
pub struct S2State<T> {
    pub coeffs: Param<T>,
    pub key: BasisKey,
    pub transposed: bool,
}

impl<T: Real> S2State<T> {
    pub fn init(rank: usize, key: BasisKey, transposed: bool) -> Self {
        S2State { coeffs: zero_param(vec![rank]), key, transposed }
    }
}

/// Generalized low-rank factors for one site. The weight delta is
/// `W A_g + B_g` with both matrices rank-decomposed (`A_g = a1 a2`,
/// `B_g = b1 b2`); the bias delta is `W c + d b + e`. The second factor
/// of each product and all bias factors start at zero so the adapted
/// forward equals the base forward at step 0.
#[derive(Debug, Clone)]
pub struct GloraState<T> {
    pub a1: Param<T>,
    pub a2: Param<T>,
    pub b1: Param<T>,
    pub b2: Param<T>,
    /// Row vector [1, in_dim] producing the `W c` bias term.
    pub c: Param<T>,
    /// Scalar multiplier on the base bias.
    pub d: Param<T>,
    /// Additive bias vector [1, out_dim].
    pub e: Param<T>,
}

impl<T: Real> GloraState<T> {
    pub fn init(rng: &mut ChaCha8Rng, site: &WeightSite, rank: usize, std: f64) -> Self {
        GloraState {
            a1: normal_param(rng, vec![site.in_dim, rank], std),
            a2: zero_param(vec![rank, site.in_dim]),
            b1: normal_param(rng, vec![site.out_dim, rank], std),
            b2: zero_param(vec![rank, site.in_dim]),
            c: zero_param(vec![1, site.in_dim]),
            d: zero_param(vec![]),
            e: zero_param(vec![1, site.out_dim]),
        }
    }

    pub fn params(&self) -> [(&'static str, &Param<T>); 7] {
        [
            ("a1", &self.a1),
            ("a2", &self.a2),
            ("b1", &self.b1),
            ("b2", &self.b2),
            ("c", &self.c),
            ("d", &self.d),
            ("e", &self.e),
        ]
    }
}
