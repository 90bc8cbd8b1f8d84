//! Folding trained adapters back into plain base weights. The merged
//! model's forward agrees with the adapted forward, so inference pays
//! nothing for having adapted.

use super::adapted::{delta_adalora, delta_alpha_lora, delta_lora, delta_s2lora};
use super::{AdaptedModel, MethodStates};
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Param;
use crate::{Error, Result};

fn add_into<T: Real>(target: &Param<T>, delta: &[T], what: &str) -> Result<()> {
    let mut t = target.borrow_mut();
    if t.numel() != delta.len() {
        return Err(Error::Shape {
            primitive: "merge",
            detail: format!("{what}: {} vs {}", t.numel(), delta.len()),
        });
    }
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite delta while merging {what}")));
    }
    for (o, &d) in t.data_mut().iter_mut().zip(delta) {
        *o += d;
    }
    Ok(())
}

/// Returns an independent plain model with every adapter effect folded
/// into the weights and biases.
pub fn merge<T: Real>(adapted: &AdaptedModel<T>) -> Result<Model<T>> {
    let merged = adapted.model.deep_clone();
    match &adapted.states {
        // Trainables are base tensors; the clone already carries them.
        MethodStates::FullFt | MethodStates::BitFit => {}
        MethodStates::Lora(map) => {
            for (idx, st) in map {
                let delta = if st.alpha.is_some() {
                    delta_alpha_lora(st)
                } else {
                    delta_lora(st)
                };
                let site = merged.site(*idx);
                add_into(&site.weight, delta.data(), &site.spec.name())?;
            }
        }
        MethodStates::AdaLora(map) => {
            for (idx, st) in map {
                let delta = delta_adalora(st);
                let site = merged.site(*idx);
                add_into(&site.weight, delta.data(), &site.spec.name())?;
            }
        }
        MethodStates::S2Lora { store, sites } => {
            for (idx, st) in sites {
                let delta = delta_s2lora(store, st)?;
                let site = merged.site(*idx);
                add_into(&site.weight, delta.data(), &site.spec.name())?;
            }
        }
        MethodStates::Ia3(map) => {
            // y = (x W^T + b) ⊙ l folds as W <- diag(l) W, b <- l ⊙ b.
            for (idx, vec) in map {
                let site = merged.site(*idx);
                let l = vec.borrow();
                if l.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite scaling vector while merging {}",
                        site.spec.name()
                    )));
                }
                {
                    let mut w = site.weight.borrow_mut();
                    let (d2, d1) = (site.spec.out_dim, site.spec.in_dim);
                    let data = w.data_mut();
                    for i in 0..d2 {
                        for j in 0..d1 {
                            data[i * d1 + j] *= l.data()[i];
                        }
                    }
                }
                if let Some(bias) = &site.bias {
                    let mut b = bias.borrow_mut();
                    for (bv, &lv) in b.data_mut().iter_mut().zip(l.data()) {
                        *bv *= lv;
                    }
                }
            }
        }
        MethodStates::Glora(map) => {
            for (idx, st) in map {
                let site = merged.site(*idx);
                let (d2, d1) = (site.spec.out_dim, site.spec.in_dim);
                let rank = st.a1.shape()[1];
                let w_orig = site.weight.data_vec();

                // Bias delta uses the original weight and bias.
                let c = st.c.data_vec();
                let mut wc = vec![T::zero(); d2];
                for i in 0..d2 {
                    let mut acc = T::zero();
                    for j in 0..d1 {
                        acc += w_orig[i * d1 + j] * c[j];
                    }
                    wc[i] = acc;
                }
                let e = st.e.data_vec();
                let d_scalar = st.d.data_vec()[0];
                if let Some(bias) = &site.bias {
                    let b_orig = bias.data_vec();
                    let delta_b: Vec<T> = (0..d2)
                        .map(|i| wc[i] + d_scalar * b_orig[i] + e[i])
                        .collect();
                    add_into(bias, &delta_b, &format!("{} bias", site.spec.name()))?;
                }

                // W <- W + W (a1 a2) + b1 b2
                let a1 = st.a1.data_vec();
                let a2 = st.a2.data_vec();
                let mut a_g = vec![T::zero(); d1 * d1];
                crate::tensor::kernels::matmul_acc(&a1, &a2, &mut a_g, d1, rank, d1);
                let mut delta_w = vec![T::zero(); d2 * d1];
                crate::tensor::kernels::matmul_acc(&w_orig, &a_g, &mut delta_w, d2, d1, d1);
                let b1 = st.b1.data_vec();
                let b2 = st.b2.data_vec();
                crate::tensor::kernels::matmul_acc(&b1, &b2, &mut delta_w, d2, rank, d1);
                add_into(&site.weight, &delta_w, &site.spec.name())?;
            }
        }
    }
    merged.set_all_requires_grad(false);
    Ok(merged)
}
