//! The seven adapter methods: per-method trainable state, attachment to
//! a model, forward deltas, lossless merging, and exact trainable
//! parameter counting.

mod adapted;
mod count;
mod merge;
mod state;

pub use adapted::{attach, AdaptedModel, MethodStates};
pub use count::{count_trainable, TrainableCount};
pub use merge::merge;
pub use state::{AdaLoraState, BasisKey, BasisPair, GloraState, LoraState, S2State, SharedBasisStore};

use serde::{Deserialize, Serialize};

use crate::model::{ArchSpec, ModuleGroup, Role};
use crate::{Error, Result};

/// Adapter family. `full_ft` is the no-adapter baseline where every base
/// parameter trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    AlphaLora,
    AdaLora,
    S2Lora,
    BitFit,
    Ia3,
    Glora,
    FullFt,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Lora,
        Method::AlphaLora,
        Method::AdaLora,
        Method::S2Lora,
        Method::BitFit,
        Method::Ia3,
        Method::Glora,
        Method::FullFt,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::AlphaLora => "alpha_lora",
            Method::AdaLora => "adalora",
            Method::S2Lora => "s2lora",
            Method::BitFit => "bitfit",
            Method::Ia3 => "ia3",
            Method::Glora => "glora",
            Method::FullFt => "full_ft",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.label()).collect();
                Error::Validation(format!("unknown method {s:?}; valid: {}", names.join(", ")))
            })
    }

    /// Whether the method carries a per-site low-rank state keyed by
    /// `target_roles`.
    pub fn uses_rank(self) -> bool {
        matches!(
            self,
            Method::Lora | Method::AlphaLora | Method::AdaLora | Method::S2Lora | Method::Glora
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// How the FFM groups share a basis pair when fc1 and fc2 shapes differ:
/// `transpose_tied` stores one pair keyed by the fc1 signature and lets
/// fc2 reuse it transposed; `per_shape` stores two pairs per FFM group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FfmSharing {
    #[default]
    TransposeTied,
    PerShape,
}

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA1: f64 = 0.05;
pub const DEFAULT_ALPHA2: f64 = 0.1;
pub const DEFAULT_INITIAL_RANK: usize = 12;
/// Initial rank used when the target rank is 32.
pub const WIDE_INITIAL_RANK: usize = 48;
pub const DEFAULT_TARGET_RANK: usize = 8;

fn default_method() -> Method {
    Method::Lora
}
fn default_rank() -> usize {
    DEFAULT_RANK
}
fn default_alpha1() -> f64 {
    DEFAULT_ALPHA1
}
fn default_alpha2() -> f64 {
    DEFAULT_ALPHA2
}
fn default_epsilon() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}

/// Per-method hyperparameters. `rank` doubles as AdaLoRA's target rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// None means the method's default target set.
    #[serde(default)]
    pub target_roles: Option<Vec<Role>>,
    #[serde(default = "default_alpha1")]
    pub alpha1: f64,
    #[serde(default = "default_alpha2")]
    pub alpha2: f64,
    /// Nominal bound on `||s||_1`; recorded for provenance only, the
    /// training objective realizes the constraint as the alpha1 penalty.
    #[serde(default = "default_epsilon")]
    pub epsilon_nominal: f64,
    /// AdaLoRA initial rank; None resolves to 12, or 48 when rank is 32.
    #[serde(default)]
    pub initial_rank: Option<usize>,
    /// AdaLoRA orthogonality penalty on/off (the "w/o orth" ablation).
    #[serde(default = "default_true")]
    pub orth_on: bool,
    /// AdaLoRA rank allocation on/off (the "w/o alloc" ablation).
    #[serde(default = "default_true")]
    pub alloc_on: bool,
    #[serde(default)]
    pub ffm_sharing: FfmSharing,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec::new(Method::Lora)
    }
}

impl AdapterSpec {
    pub fn new(method: Method) -> Self {
        AdapterSpec {
            method,
            rank: DEFAULT_RANK,
            target_roles: None,
            alpha1: DEFAULT_ALPHA1,
            alpha2: DEFAULT_ALPHA2,
            epsilon_nominal: default_epsilon(),
            initial_rank: None,
            orth_on: true,
            alloc_on: true,
            ffm_sharing: FfmSharing::default(),
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    /// The roles this method's per-site state attaches to. BitFit and
    /// IA3 have fixed target sets; full fine-tuning has none.
    pub fn resolved_roles(&self) -> Vec<Role> {
        if let Some(roles) = &self.target_roles {
            return roles.clone();
        }
        match self.method {
            Method::S2Lora => Role::ALL.to_vec(),
            Method::Ia3 => vec![Role::K, Role::V, Role::Fc2],
            Method::BitFit | Method::FullFt => vec![],
            _ => vec![Role::Q, Role::V],
        }
    }

    /// AdaLoRA's starting rank before allocation prunes down to `rank`.
    pub fn resolved_initial_rank(&self) -> usize {
        self.initial_rank.unwrap_or(if self.rank == 32 {
            WIDE_INITIAL_RANK
        } else {
            DEFAULT_INITIAL_RANK
        })
    }

    /// Registry indices of the targeted sites.
    pub fn target_site_indices(&self, arch: &ArchSpec) -> Vec<usize> {
        arch.site_indices_filtered(&self.resolved_roles(), &ModuleGroup::ALL)
    }

    pub fn validate_for(&self, arch: &ArchSpec) -> Result<()> {
        arch.validate()?;
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::Validation("alpha1 and alpha2 must be non-negative".into()));
        }
        if self.epsilon_nominal <= 0.0 {
            return Err(Error::Validation("epsilon_nominal must be positive".into()));
        }
        match self.method {
            Method::FullFt | Method::BitFit | Method::Ia3 => Ok(()),
            _ => {
                if self.rank == 0 {
                    return Err(Error::Validation("rank must be positive".into()));
                }
                let effective = if self.method == Method::AdaLora {
                    let init = self.resolved_initial_rank();
                    if init < self.rank {
                        return Err(Error::Validation(format!(
                            "initial rank {init} below target rank {}",
                            self.rank
                        )));
                    }
                    init
                } else {
                    self.rank
                };
                let sites = self.target_site_indices(arch);
                if sites.is_empty() {
                    return Err(Error::Validation("no sites match the target roles".into()));
                }
                let all = arch.sites();
                for idx in sites {
                    let s = &all[idx];
                    let min_dim = s.out_dim.min(s.in_dim);
                    if effective >= min_dim {
                        return Err(Error::Validation(format!(
                            "rank {effective} >= min dimension {min_dim} of site {}",
                            s.name()
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}
