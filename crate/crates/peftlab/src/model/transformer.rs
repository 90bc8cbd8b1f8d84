//! The trainable model: a pre-layer-norm encoder-decoder transformer
//! whose every linear projection is registered as a [`WeightSite`].
//!
//! Adapters interpose through [`SiteProjector`]: the forward pass asks
//! the projector for each site's output, so the same graph-building code
//! serves the plain model, every adapted variant, and merged models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ArchSpec, Frontend, WeightSite, BOS, EOS};
use crate::real::Real;
use crate::tensor::{kernels, Param, Tape, Tensor, Var};
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub(crate) struct LnPair<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Real> LnPair<T> {
    fn new(dim: usize) -> Self {
        let gamma = Tensor::new(vec![dim], vec![T::one(); dim]).expect("ln gamma");
        let beta = Tensor::zeros(vec![dim]);
        LnPair { gamma: Param::new(gamma), beta: Param::new(beta) }
    }

    fn deep_clone(&self) -> Self {
        LnPair { gamma: self.gamma.deep_clone(), beta: self.beta.deep_clone() }
    }

    fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// One registered projection matrix with its optional bias.
#[derive(Debug, Clone)]
pub struct SiteTensors<T> {
    pub spec: WeightSite,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> SiteTensors<T> {
    fn deep_clone(&self) -> Self {
        SiteTensors {
            spec: self.spec.clone(),
            weight: self.weight.deep_clone(),
            bias: self.bias.as_ref().map(Param::deep_clone),
        }
    }
}

/// Supplies the output of each weight site during a forward pass.
pub trait SiteProjector<T: Real> {
    fn project(&self, tape: &mut Tape<T>, model: &Model<T>, site_idx: usize, x: Var)
        -> Result<Var>;
}

/// Plain projection: `x W^T + b`.
pub struct BaseProjector;

impl<T: Real> SiteProjector<T> for BaseProjector {
    fn project(
        &self,
        tape: &mut Tape<T>,
        model: &Model<T>,
        site_idx: usize,
        x: Var,
    ) -> Result<Var> {
        model.project_base(tape, site_idx, x)
    }
}

/// A built model: arch, site registry with backing tensors, embeddings,
/// positions, and layer norms.
#[derive(Debug)]
pub struct Model<T: Real> {
    pub arch: ArchSpec,
    pub(crate) enc_embed: Param<T>,
    pub(crate) dec_embed: Param<T>,
    pub(crate) dec_pos: Param<T>,
    enc_pos: Vec<T>,
    sites: Vec<SiteTensors<T>>,
    enc_attn_ln: Vec<LnPair<T>>,
    enc_mlp_ln: Vec<LnPair<T>>,
    enc_ln_post: LnPair<T>,
    dec_attn_ln: Vec<LnPair<T>>,
    dec_cross_ln: Vec<LnPair<T>>,
    dec_mlp_ln: Vec<LnPair<T>>,
    dec_ln: LnPair<T>,
}

fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("normal tensor shape")
}

impl<T: Real> Model<T> {
    /// Builds and initializes the model: weights normal with std 0.02,
    /// biases zero, layer norms identity.
    pub fn build(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        if arch.frontend == Frontend::ConvStub {
            return Err(Error::Validation(
                "conv-stub archs are counting-only presets and cannot be instantiated".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = arch.d_model;
        let enc_embed = Param::new(normal_tensor(&mut rng, vec![arch.vocab_size, d], INIT_STD));
        let dec_embed = Param::new(normal_tensor(&mut rng, vec![arch.vocab_size, d], INIT_STD));
        let dec_pos = Param::new(normal_tensor(&mut rng, vec![arch.max_tgt_len, d], INIT_STD));
        let enc_pos = kernels::sinusoid_table(arch.max_src_len, d);

        let sites = arch
            .sites()
            .into_iter()
            .map(|spec| {
                let weight =
                    Param::new(normal_tensor(&mut rng, vec![spec.out_dim, spec.in_dim], INIT_STD));
                let bias =
                    spec.has_bias.then(|| Param::new(Tensor::zeros(vec![spec.out_dim])));
                SiteTensors { spec, weight, bias }
            })
            .collect();

        Ok(Model {
            enc_embed,
            dec_embed,
            dec_pos,
            enc_pos,
            sites,
            enc_attn_ln: (0..arch.n_enc_layers).map(|_| LnPair::new(d)).collect(),
            enc_mlp_ln: (0..arch.n_enc_layers).map(|_| LnPair::new(d)).collect(),
            enc_ln_post: LnPair::new(d),
            dec_attn_ln: (0..arch.n_dec_layers).map(|_| LnPair::new(d)).collect(),
            dec_cross_ln: (0..arch.n_dec_layers).map(|_| LnPair::new(d)).collect(),
            dec_mlp_ln: (0..arch.n_dec_layers).map(|_| LnPair::new(d)).collect(),
            dec_ln: LnPair::new(d),
            arch,
        })
    }

    pub fn sites(&self) -> &[SiteTensors<T>] {
        &self.sites
    }

    pub fn site(&self, idx: usize) -> &SiteTensors<T> {
        &self.sites[idx]
    }

    /// Independent copy: no tensor is shared with the original.
    pub fn deep_clone(&self) -> Model<T> {
        Model {
            arch: self.arch.clone(),
            enc_embed: self.enc_embed.deep_clone(),
            dec_embed: self.dec_embed.deep_clone(),
            dec_pos: self.dec_pos.deep_clone(),
            enc_pos: self.enc_pos.clone(),
            sites: self.sites.iter().map(SiteTensors::deep_clone).collect(),
            enc_attn_ln: self.enc_attn_ln.iter().map(LnPair::deep_clone).collect(),
            enc_mlp_ln: self.enc_mlp_ln.iter().map(LnPair::deep_clone).collect(),
            enc_ln_post: self.enc_ln_post.deep_clone(),
            dec_attn_ln: self.dec_attn_ln.iter().map(LnPair::deep_clone).collect(),
            dec_cross_ln: self.dec_cross_ln.iter().map(LnPair::deep_clone).collect(),
            dec_mlp_ln: self.dec_mlp_ln.iter().map(LnPair::deep_clone).collect(),
            dec_ln: self.dec_ln.deep_clone(),
        }
    }

    /// All persistent tensors in stable registry order.
    pub fn named_params(&self) -> Vec<(String, Param<T>)> {
        let mut out: Vec<(String, Param<T>)> = vec![
            ("enc/embed".into(), self.enc_embed.clone()),
            ("dec/embed".into(), self.dec_embed.clone()),
            ("dec/pos".into(), self.dec_pos.clone()),
        ];
        let ln = |name: String, pair: &LnPair<T>, out: &mut Vec<(String, Param<T>)>| {
            out.push((format!("{name}/gamma"), pair.gamma.clone()));
            out.push((format!("{name}/beta"), pair.beta.clone()));
        };
        let site = |idx: usize, out: &mut Vec<(String, Param<T>)>| {
            let s = &self.sites[idx];
            let base = s.spec.name();
            out.push((format!("{base}/weight"), s.weight.clone()));
            if let Some(b) = &s.bias {
                out.push((format!("{base}/bias"), b.clone()));
            }
        };
        for l in 0..self.arch.n_enc_layers {
            ln(format!("enc/{l}/attn_ln"), &self.enc_attn_ln[l], &mut out);
            for r in 0..4 {
                site(l * 6 + r, &mut out);
            }
            ln(format!("enc/{l}/mlp_ln"), &self.enc_mlp_ln[l], &mut out);
            site(l * 6 + 4, &mut out);
            site(l * 6 + 5, &mut out);
        }
        ln("enc/ln_post".into(), &self.enc_ln_post, &mut out);
        let dec_base = self.arch.n_enc_layers * 6;
        for l in 0..self.arch.n_dec_layers {
            let base = dec_base + l * 10;
            ln(format!("dec/{l}/attn_ln"), &self.dec_attn_ln[l], &mut out);
            for r in 0..4 {
                site(base + r, &mut out);
            }
            ln(format!("dec/{l}/cross_ln"), &self.dec_cross_ln[l], &mut out);
            for r in 4..8 {
                site(base + r, &mut out);
            }
            ln(format!("dec/{l}/mlp_ln"), &self.dec_mlp_ln[l], &mut out);
            site(base + 8, &mut out);
            site(base + 9, &mut out);
        }
        ln("dec/ln".into(), &self.dec_ln, &mut out);
        out
    }

    /// Runtime parameter census; equals `arch.total_params()` for
    /// token-embedding frontends.
    pub fn param_census(&self) -> u64 {
        self.named_params().iter().map(|(_, p)| p.numel() as u64).sum()
    }

    /// Every bias tensor: projection biases and layer-norm betas.
    pub fn bias_named_params(&self) -> Vec<(String, Param<T>)> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| n.ends_with("/bias") || n.ends_with("/beta"))
            .collect()
    }

    /// Sets `requires_grad` on every parameter.
    pub fn set_all_requires_grad(&self, rg: bool) {
        for (_, p) in self.named_params() {
            p.set_requires_grad(rg);
        }
    }

    pub(crate) fn project_base(&self, tape: &mut Tape<T>, site_idx: usize, x: Var) -> Result<Var> {
        let s = &self.sites[site_idx];
        let w = tape.param(&s.weight);
        let mut y = tape.matmul_nt(x, w)?;
        if let Some(b) = &s.bias {
            let bv = tape.param(b);
            y = tape.add_row_vec(y, bv)?;
        }
        Ok(y)
    }

    fn validate_tokens(&self, tokens: &[u32], max_len: usize, what: &str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Validation(format!("{what} sequence is empty")));
        }
        if tokens.len() > max_len {
            return Err(Error::Validation(format!(
                "{what} length {} exceeds maximum {max_len}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.arch.vocab_size) {
            return Err(Error::Validation(format!(
                "{what} token {bad} out of range for vocab {}",
                self.arch.vocab_size
            )));
        }
        Ok(())
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        proj: &dyn SiteProjector<T>,
        q_in: Var,
        kv_in: Var,
        site_base: usize,
        causal: bool,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let d = self.arch.d_model;
        let n_heads = self.arch.n_heads;
        let hd = d / n_heads;
        let tq = tape.shape(q_in)[0];
        let tk = tape.shape(kv_in)[0];

        let q = proj.project(tape, self, site_base, q_in)?;
        let k = proj.project(tape, self, site_base + 1, kv_in)?;
        let v = proj.project(tape, self, site_base + 2, kv_in)?;

        let mask: Option<Vec<bool>> = if causal || key_valid.is_some() {
            let mut m = vec![true; tq * tk];
            for i in 0..tq {
                for j in 0..tk {
                    let keep = (!causal || j <= i) && key_valid.map_or(true, |kv| kv[j]);
                    m[i * tk + j] = keep;
                }
            }
            Some(m)
        } else {
            None
        };

        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut head_outs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled, mask.clone())?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        proj.project(tape, self, site_base + 3, merged)
    }

    fn ffm(
        &self,
        tape: &mut Tape<T>,
        proj: &dyn SiteProjector<T>,
        x: Var,
        fc1_idx: usize,
    ) -> Result<Var> {
        let h = proj.project(tape, self, fc1_idx, x)?;
        let h = tape.gelu(h);
        proj.project(tape, self, fc1_idx + 1, h)
    }

    /// Encoder stack over the source tokens. `src_valid[j] == false`
    /// positions are excluded as attention keys everywhere.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<T>,
        src: &[u32],
        src_valid: Option<&[bool]>,
        proj: &dyn SiteProjector<T>,
    ) -> Result<Var> {
        self.validate_tokens(src, self.arch.max_src_len, "source")?;
        if let Some(valid) = src_valid {
            if valid.len() != src.len() {
                return Err(Error::Validation(format!(
                    "source mask length {} vs sequence length {}",
                    valid.len(),
                    src.len()
                )));
            }
            if !valid.iter().any(|&v| v) {
                return Err(Error::Validation("source mask excludes every position".into()));
            }
        }
        let d = self.arch.d_model;
        let ids: Vec<usize> = src.iter().map(|&t| t as usize).collect();
        let table = tape.param(&self.enc_embed);
        let emb = tape.embed(table, &ids)?;
        let pos = tape.constant(vec![src.len(), d], self.enc_pos[..src.len() * d].to_vec())?;
        let mut x = tape.add(emb, pos)?;

        for l in 0..self.arch.n_enc_layers {
            let h = self.enc_attn_ln[l].apply(tape, x)?;
            let attn = self.attention(tape, proj, h, h, l * 6, false, src_valid)?;
            x = tape.add(x, attn)?;
            let h = self.enc_mlp_ln[l].apply(tape, x)?;
            let ff = self.ffm(tape, proj, h, l * 6 + 4)?;
            x = tape.add(x, ff)?;
        }
        self.enc_ln_post.apply(tape, x)
    }

    /// Decoder stack under teacher forcing; returns logits
    /// `[len(tgt), vocab]`. Decoder self-attention is causal.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<T>,
        tgt: &[u32],
        enc_out: Var,
        src_valid: Option<&[bool]>,
        proj: &dyn SiteProjector<T>,
    ) -> Result<Var> {
        self.validate_tokens(tgt, self.arch.max_tgt_len, "target")?;
        let ids: Vec<usize> = tgt.iter().map(|&t| t as usize).collect();
        let table = tape.param(&self.dec_embed);
        let emb = tape.embed(table, &ids)?;
        let pos_table = tape.param(&self.dec_pos);
        let pos_ids: Vec<usize> = (0..tgt.len()).collect();
        let pos = tape.embed(pos_table, &pos_ids)?;
        let mut x = tape.add(emb, pos)?;

        let dec_base = self.arch.n_enc_layers * 6;
        for l in 0..self.arch.n_dec_layers {
            let base = dec_base + l * 10;
            let h = self.dec_attn_ln[l].apply(tape, x)?;
            let attn = self.attention(tape, proj, h, h, base, true, None)?;
            x = tape.add(x, attn)?;
            let h = self.dec_cross_ln[l].apply(tape, x)?;
            let cross = self.attention(tape, proj, h, enc_out, base + 4, false, src_valid)?;
            x = tape.add(x, cross)?;
            let h = self.dec_mlp_ln[l].apply(tape, x)?;
            let ff = self.ffm(tape, proj, h, base + 8)?;
            x = tape.add(x, ff)?;
        }
        let x = self.dec_ln.apply(tape, x)?;
        let out_table = tape.param(&self.dec_embed);
        tape.matmul_nt(x, out_table)
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        src: &[u32],
        src_valid: Option<&[bool]>,
        tgt: &[u32],
        proj: &dyn SiteProjector<T>,
    ) -> Result<Var> {
        let enc = self.encode_on_tape(tape, src, src_valid, proj)?;
        self.decode_on_tape(tape, tgt, enc, src_valid, proj)
    }

    /// Teacher-forced forward with the base weights; returns logits.
    pub fn forward(&self, src: &[u32], tgt: &[u32]) -> Result<Tensor<T>> {
        self.forward_with(src, None, tgt, &BaseProjector)
    }

    pub fn forward_with(
        &self,
        src: &[u32],
        src_valid: Option<&[bool]>,
        tgt: &[u32],
        proj: &dyn SiteProjector<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let logits = self.forward_on_tape(&mut tape, src, src_valid, tgt, proj)?;
        Ok(tape.to_tensor(logits))
    }

    /// Greedy decoding from BOS: each emitted token is the argmax of the
    /// last step's logits; stops at EOS or after `max_len` tokens.
    pub fn greedy_decode(&self, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
        self.greedy_decode_with(src, None, max_len, &BaseProjector)
    }

    pub fn greedy_decode_with(
        &self,
        src: &[u32],
        src_valid: Option<&[bool]>,
        max_len: usize,
        proj: &dyn SiteProjector<T>,
    ) -> Result<Vec<u32>> {
        if max_len == 0 {
            return Err(Error::Validation("max_len must be at least 1".into()));
        }
        let mut tape = Tape::new();
        let enc = self.encode_on_tape(&mut tape, src, src_valid, proj)?;
        let budget = max_len.min(self.arch.max_tgt_len - 1);
        let mut tokens = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..budget {
            let logits = self.decode_on_tape(&mut tape, &tokens, enc, src_valid, proj)?;
            let vocab = self.arch.vocab_size;
            let row = &tape.value(logits)[(tokens.len() - 1) * vocab..tokens.len() * vocab];
            let next = argmax(row) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
