//! Closed-form trainable-parameter budgets, computed from the
//! architecture dimensions without instantiating any tensors. Each
//! formula mirrors exactly what `attach` creates, and the test suite
//! pins that identity against the runtime census.

use std::collections::BTreeSet;

use super::state::BasisKey;
use super::{AdapterSpec, FfmSharing, Method};
use crate::model::{ArchSpec, Role};
use crate::Result;

/// Exact trainable-scalar count and its share of the base parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainableCount {
    pub count: u64,
    pub fraction: f64,
}

impl TrainableCount {
    /// Percentage rounded to two decimals, e.g. "0.31%".
    pub fn percent_string(&self) -> String {
        format!("{:.2}%", self.fraction * 100.0)
    }
}

pub fn count_trainable(spec: &AdapterSpec, arch: &ArchSpec) -> Result<TrainableCount> {
    spec.validate_for(arch)?;
    let sites = arch.sites();
    let targets = spec.target_site_indices(arch);
    let r = spec.rank as u64;

    let count: u64 = match spec.method {
        Method::FullFt => arch.total_params(),
        Method::BitFit => arch.bias_params(),
        Method::Ia3 => targets.iter().map(|&i| sites[i].out_dim as u64).sum(),
        Method::Lora => targets
            .iter()
            .map(|&i| (sites[i].out_dim as u64 + sites[i].in_dim as u64) * r)
            .sum(),
        Method::AlphaLora => {
            let lora: u64 = targets
                .iter()
                .map(|&i| (sites[i].out_dim as u64 + sites[i].in_dim as u64) * r)
                .sum();
            lora + targets.len() as u64
        }
        Method::AdaLora => {
            let ri = spec.resolved_initial_rank() as u64;
            targets
                .iter()
                .map(|&i| (sites[i].out_dim as u64 + sites[i].in_dim as u64) * ri + ri)
                .sum()
        }
        Method::S2Lora => {
            let mut keys: BTreeSet<BasisKey> = BTreeSet::new();
            for &i in &targets {
                let s = &sites[i];
                let key = match (spec.ffm_sharing, s.role) {
                    (FfmSharing::TransposeTied, Role::Fc2) => BasisKey {
                        group: s.group,
                        out_dim: s.in_dim,
                        in_dim: s.out_dim,
                    },
                    _ => BasisKey { group: s.group, out_dim: s.out_dim, in_dim: s.in_dim },
                };
                keys.insert(key);
            }
            let bases: u64 =
                keys.iter().map(|k| (k.out_dim as u64 + k.in_dim as u64) * r).sum();
            bases + targets.len() as u64 * r
        }
        Method::Glora => targets
            .iter()
            .map(|&i| {
                let (d2, d1) = (sites[i].out_dim as u64, sites[i].in_dim as u64);
                // a1 + a2 + b1 + b2 + c + d + e
                d1 * r + r * d1 + d2 * r + r * d1 + d1 + 1 + d2
            })
            .sum(),
    };

    Ok(TrainableCount { count, fraction: count as f64 / arch.total_params() as f64 })
}
