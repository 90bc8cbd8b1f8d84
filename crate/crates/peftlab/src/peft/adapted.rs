//! Attachment of an adapter to a model and the adapted forward pass.
//!
//! Every method keeps the base projection untouched and adds its delta
//! on top, so a freshly attached model reproduces the base forward
//! bitwise. Base weights are frozen on attach; only the method's own
//! state (or, for BitFit / full fine-tuning, the chosen base tensors)
//! requires grad.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::state::{
    AdaLoraState, GloraState, LoraState, S2State, SharedBasisStore,
};
use super::{AdapterSpec, Method};
use crate::model::{Model, SiteProjector};
use crate::real::Real;
use crate::tensor::{kernels, Param, Tape, Tensor, Var};
use crate::Result;

const ADAPTER_INIT_STD: f64 = 0.02;

/// Per-method trainable state attached to site registry indices.
#[derive(Debug)]
pub enum MethodStates<T: Real> {
    FullFt,
    BitFit,
    /// Shared by lora and alpha_lora; the latter carries the scalar.
    Lora(BTreeMap<usize, LoraState<T>>),
    AdaLora(BTreeMap<usize, AdaLoraState<T>>),
    S2Lora { store: SharedBasisStore<T>, sites: BTreeMap<usize, S2State<T>> },
    Ia3(BTreeMap<usize, Param<T>>),
    Glora(BTreeMap<usize, GloraState<T>>),
}

/// A model plus attached adapter state.
pub struct AdaptedModel<T: Real> {
    pub model: Model<T>,
    pub spec: AdapterSpec,
    pub states: MethodStates<T>,
}

/// Freezes the base model and creates the method's trainable state.
pub fn attach<T: Real>(model: Model<T>, spec: AdapterSpec, seed: u64) -> Result<AdaptedModel<T>> {
    spec.validate_for(&model.arch)?;
    model.set_all_requires_grad(false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites = model.arch.sites();
    let targets = spec.target_site_indices(&model.arch);

    let states = match spec.method {
        Method::FullFt => {
            model.set_all_requires_grad(true);
            MethodStates::FullFt
        }
        Method::BitFit => {
            for (_, p) in model.bias_named_params() {
                p.set_requires_grad(true);
            }
            MethodStates::BitFit
        }
        Method::Lora | Method::AlphaLora => {
            let scaled = spec.method == Method::AlphaLora;
            let map = targets
                .into_iter()
                .map(|idx| {
                    (idx, LoraState::init(&mut rng, &sites[idx], spec.rank, ADAPTER_INIT_STD, scaled))
                })
                .collect();
            MethodStates::Lora(map)
        }
        Method::AdaLora => {
            let init_rank = spec.resolved_initial_rank();
            let map = targets
                .into_iter()
                .map(|idx| (idx, AdaLoraState::init(&mut rng, &sites[idx], init_rank, ADAPTER_INIT_STD)))
                .collect();
            MethodStates::AdaLora(map)
        }
        Method::S2Lora => {
            let mut store = SharedBasisStore::new(spec.ffm_sharing, spec.rank);
            let mut map = BTreeMap::new();
            for idx in targets {
                let (key, transposed) = store.key_for(&sites[idx]);
                store.ensure_pair(&mut rng, key, ADAPTER_INIT_STD);
                map.insert(idx, S2State::init(spec.rank, key, transposed));
            }
            MethodStates::S2Lora { store, sites: map }
        }
        Method::Ia3 => {
            let map = targets
                .into_iter()
                .map(|idx| {
                    let dim = sites[idx].out_dim;
                    let ones = Tensor::new(vec![dim], vec![T::one(); dim]).expect("ia3 vector");
                    (idx, Param::trainable(ones))
                })
                .collect();
            MethodStates::Ia3(map)
        }
        Method::Glora => {
            let map = targets
                .into_iter()
                .map(|idx| (idx, GloraState::init(&mut rng, &sites[idx], spec.rank, ADAPTER_INIT_STD)))
                .collect();
            MethodStates::Glora(map)
        }
    };

    Ok(AdaptedModel { model, spec, states })
}

impl<T: Real> AdaptedModel<T> {
    pub fn forward(&self, src: &[u32], tgt: &[u32]) -> Result<Tensor<T>> {
        self.model.forward_with(src, None, tgt, self)
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        src: &[u32],
        src_valid: Option<&[bool]>,
        tgt: &[u32],
    ) -> Result<Var> {
        self.model.forward_on_tape(tape, src, src_valid, tgt, self)
    }

    pub fn greedy_decode(&self, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
        self.model.greedy_decode_with(src, None, max_len, self)
    }

    /// Adapter-owned trainable arrays in deterministic order, named
    /// under `adapter/<method>/...`. Empty for full_ft and bitfit, whose
    /// trainables are base tensors.
    pub fn adapter_params(&self) -> Vec<(String, Param<T>)> {
        let method = self.spec.method.label();
        let site_name = |idx: &usize| self.model.site(*idx).spec.name();
        let mut out = Vec::new();
        match &self.states {
            MethodStates::FullFt | MethodStates::BitFit => {}
            MethodStates::Lora(map) => {
                for (idx, st) in map {
                    let base = format!("adapter/{method}/{}", site_name(idx));
                    out.push((format!("{base}/b"), st.b.clone()));
                    out.push((format!("{base}/a"), st.a.clone()));
                    if let Some(alpha) = &st.alpha {
                        out.push((format!("{base}/alpha"), alpha.clone()));
                    }
                }
            }
            MethodStates::AdaLora(map) => {
                for (idx, st) in map {
                    let base = format!("adapter/{method}/{}", site_name(idx));
                    out.push((format!("{base}/b"), st.b.clone()));
                    out.push((format!("{base}/a"), st.a.clone()));
                    out.push((format!("{base}/lambda"), st.lambda.clone()));
                }
            }
            MethodStates::S2Lora { store, sites } => {
                for (key, pair) in store.pairs() {
                    let base = format!("adapter/{method}/shared/{}", key.name());
                    out.push((format!("{base}/b"), pair.b.clone()));
                    out.push((format!("{base}/a"), pair.a.clone()));
                }
                for (idx, st) in sites {
                    out.push((format!("adapter/{method}/{}/s", site_name(idx)), st.coeffs.clone()));
                }
            }
            MethodStates::Ia3(map) => {
                for (idx, vec) in map {
                    out.push((format!("adapter/{method}/{}/l", site_name(idx)), vec.clone()));
                }
            }
            MethodStates::Glora(map) => {
                for (idx, st) in map {
                    let base = format!("adapter/{method}/{}", site_name(idx));
                    for (field, p) in st.params() {
                        out.push((format!("{base}/{field}"), (*p).clone()));
                    }
                }
            }
        }
        out
    }

    /// Every tensor that currently requires grad: base tensors first
    /// (full_ft / bitfit), then adapter arrays.
    pub fn trainable_params(&self) -> Vec<(String, Param<T>)> {
        let mut out: Vec<(String, Param<T>)> = self
            .model
            .named_params()
            .into_iter()
            .filter(|(_, p)| p.requires_grad())
            .collect();
        out.extend(self.adapter_params());
        out
    }

    pub fn trainable_count(&self) -> u64 {
        self.trainable_params().iter().map(|(_, p)| p.numel() as u64).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.trainable_params() {
            p.zero_grad();
        }
    }
}

impl<T: Real> SiteProjector<T> for AdaptedModel<T> {
    fn project(
        &self,
        tape: &mut Tape<T>,
        model: &Model<T>,
        site_idx: usize,
        x: Var,
    ) -> Result<Var> {
        let base = model.project_base(tape, site_idx, x)?;
        match &self.states {
            MethodStates::FullFt | MethodStates::BitFit => Ok(base),
            MethodStates::Lora(map) => match map.get(&site_idx) {
                None => Ok(base),
                Some(st) => {
                    let a = tape.param(&st.a);
                    let b = tape.param(&st.b);
                    let u = tape.matmul_nt(x, a)?;
                    let mut delta = tape.matmul_nt(u, b)?;
                    if let Some(alpha) = &st.alpha {
                        let av = tape.param(alpha);
                        delta = tape.scale_var(delta, av)?;
                    }
                    tape.add(base, delta)
                }
            },
            MethodStates::AdaLora(map) => match map.get(&site_idx) {
                None => Ok(base),
                Some(st) => {
                    let a = tape.param(&st.a);
                    let b = tape.param(&st.b);
                    let lam = tape.param(&st.lambda);
                    let mask: Vec<T> = st
                        .mask
                        .iter()
                        .map(|&m| if m { T::one() } else { T::zero() })
                        .collect();
                    let mask_v = tape.constant(vec![mask.len()], mask)?;
                    let gated = tape.mul(lam, mask_v)?;
                    let u = tape.matmul_nt(x, a)?;
                    let u = tape.col_scale(u, gated)?;
                    let delta = tape.matmul_nt(u, b)?;
                    tape.add(base, delta)
                }
            },
            MethodStates::S2Lora { store, sites } => match sites.get(&site_idx) {
                None => Ok(base),
                Some(st) => {
                    let pair = store.pair(&st.key)?;
                    let bp = tape.param(&pair.b);
                    let ap = tape.param(&pair.a);
                    let s = tape.param(&st.coeffs);
                    let delta = if st.transposed {
                        // Delta is (B diag(s) A)^T, so x runs through B first.
                        let u = tape.matmul(x, bp)?;
                        let u = tape.col_scale(u, s)?;
                        tape.matmul(u, ap)?
                    } else {
                        let u = tape.matmul_nt(x, ap)?;
                        let u = tape.col_scale(u, s)?;
                        tape.matmul_nt(u, bp)?
                    };
                    tape.add(base, delta)
                }
            },
            MethodStates::Ia3(map) => match map.get(&site_idx) {
                None => Ok(base),
                Some(vec) => {
                    let l = tape.param(vec);
                    tape.mul_row_vec(base, l)
                }
            },
            MethodStates::Glora(map) => match map.get(&site_idx) {
                None => Ok(base),
                Some(st) => {
                    let site = model.site(site_idx);
                    let d2 = site.spec.out_dim;
                    let w = tape.param(&site.weight);
                    // x (W a1 a2)^T
                    let a2 = tape.param(&st.a2);
                    let a1 = tape.param(&st.a1);
                    let u = tape.matmul_nt(x, a2)?;
                    let v = tape.matmul_nt(u, a1)?;
                    let wa_term = tape.matmul_nt(v, w)?;
                    // x (b1 b2)^T
                    let b2 = tape.param(&st.b2);
                    let b1 = tape.param(&st.b1);
                    let u2 = tape.matmul_nt(x, b2)?;
                    let bg_term = tape.matmul_nt(u2, b1)?;
                    let y = tape.add(base, wa_term)?;
                    let y = tape.add(y, bg_term)?;
                    // bias delta: W c + d b + e, as a [1, d2] row
                    let c = tape.param(&st.c);
                    let wc = tape.matmul_nt(c, w)?;
                    let e = tape.param(&st.e);
                    let mut db = tape.add(wc, e)?;
                    if let Some(bias) = &site.bias {
                        let bv = tape.param(bias);
                        let brow = tape.reshape(bv, vec![1, d2])?;
                        let dv = tape.param(&st.d);
                        let scaled = tape.scale_var(brow, dv)?;
                        db = tape.add(db, scaled)?;
                    }
                    let db_vec = tape.reshape(db, vec![d2])?;
                    tape.add_row_vec(y, db_vec)
                }
            },
        }
    }
}

// ---- dense delta materialization ------------------------------------------

/// `delta W = B A`.
pub fn delta_lora<T: Real>(st: &LoraState<T>) -> Tensor<T> {
    let b = st.b.borrow();
    let a = st.a.borrow();
    let (d2, r) = (b.shape()[0], b.shape()[1]);
    let d1 = a.shape()[1];
    let data = kernels::matmul(b.data(), a.data(), d2, r, d1);
    Tensor::new(vec![d2, d1], data).expect("delta shape")
}

/// `delta W = alpha * B A`.
pub fn delta_alpha_lora<T: Real>(st: &LoraState<T>) -> Tensor<T> {
    let mut delta = delta_lora(st);
    let alpha = st.alpha.as_ref().map_or(T::one(), |a| a.borrow().data()[0]);
    for v in delta.data_mut() {
        *v *= alpha;
    }
    delta
}

/// `delta W = B diag(lambda ⊙ mask) A`.
pub fn delta_adalora<T: Real>(st: &AdaLoraState<T>) -> Tensor<T> {
    let b = st.b.borrow();
    let a = st.a.borrow();
    let lam = st.lambda.borrow();
    let (d2, r) = (b.shape()[0], b.shape()[1]);
    let d1 = a.shape()[1];
    let mut scaled_b = b.data().to_vec();
    for i in 0..d2 {
        for k in 0..r {
            let gate = if st.mask[k] { lam.data()[k] } else { T::zero() };
            scaled_b[i * r + k] *= gate;
        }
    }
    let data = kernels::matmul(&scaled_b, a.data(), d2, r, d1);
    Tensor::new(vec![d2, d1], data).expect("delta shape")
}

/// `delta W = B diag(s) A` using the site's shared pair; fc2 sites under
/// transpose-tied sharing get the transposed product.
pub fn delta_s2lora<T: Real>(store: &SharedBasisStore<T>, st: &S2State<T>) -> Result<Tensor<T>> {
    let pair = store.pair(&st.key)?;
    let b = pair.b.borrow();
    let a = pair.a.borrow();
    let s = st.coeffs.borrow();
    let (out_dim, r) = (b.shape()[0], b.shape()[1]);
    let in_dim = a.shape()[1];
    let mut scaled_b = b.data().to_vec();
    for i in 0..out_dim {
        for k in 0..r {
            scaled_b[i * r + k] *= s.data()[k];
        }
    }
    let product = kernels::matmul(&scaled_b, a.data(), out_dim, r, in_dim);
    if st.transposed {
        let t = kernels::transpose(&product, out_dim, in_dim);
        Tensor::new(vec![in_dim, out_dim], t)
    } else {
        Tensor::new(vec![out_dim, in_dim], product)
    }
}
