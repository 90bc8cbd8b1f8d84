//! Encoder-decoder transformer anatomy: architecture presets, the
//! weight-site registry that adapters attach to, and exact parameter
//! censuses derived from the dimensions alone.

mod transformer;

pub use transformer::{BaseProjector, Model, SiteProjector};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reserved token ids used by every synthetic task.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// First payload token id.
pub const PAYLOAD_BASE: u32 = 3;

/// The five sharing scopes a weight matrix can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleGroup {
    EncSam,
    EncFfm,
    DecSam,
    DecCam,
    DecFfm,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 5] = [
        ModuleGroup::EncSam,
        ModuleGroup::EncFfm,
        ModuleGroup::DecSam,
        ModuleGroup::DecCam,
        ModuleGroup::DecFfm,
    ];

    pub fn is_attention(self) -> bool {
        !matches!(self, ModuleGroup::EncFfm | ModuleGroup::DecFfm)
    }

    pub fn label(self) -> &'static str {
        match self {
            ModuleGroup::EncSam => "Enc-SAM",
            ModuleGroup::EncFfm => "Enc-FFM",
            ModuleGroup::DecSam => "Dec-SAM",
            ModuleGroup::DecCam => "Dec-CAM",
            ModuleGroup::DecFfm => "Dec-FFM",
        }
    }
}

impl std::fmt::Display for ModuleGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Projection role within a layer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Q, Role::K, Role::V, Role::O, Role::Fc1, Role::Fc2];
    pub const ATTENTION: [Role; 4] = [Role::Q, Role::K, Role::V, Role::O];

    pub fn is_attention(self) -> bool {
        !matches!(self, Role::Fc1 | Role::Fc2)
    }

    pub fn label(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::Fc1 => "fc1",
            Role::Fc2 => "fc2",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "q" => Some(Role::Q),
            "k" => Some(Role::K),
            "v" => Some(Role::V),
            "o" => Some(Role::O),
            "fc1" => Some(Role::Fc1),
            "fc2" => Some(Role::Fc2),
            _ => None,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Encoder input handling. `ConvStub` exists for parameter counting of
/// the audio-style preset; such models are never instantiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frontend {
    TokenEmbedding,
    ConvStub,
}

const CONV_STUB_IN_CHANNELS: u64 = 80;
const CONV_KERNEL: u64 = 3;

/// Identity of one adaptable projection matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightSite {
    pub layer_index: usize,
    pub group: ModuleGroup,
    pub role: Role,
    /// Output dimension (rows of the weight matrix).
    pub out_dim: usize,
    /// Input dimension (columns of the weight matrix).
    pub in_dim: usize,
    pub has_bias: bool,
}

impl WeightSite {
    /// Stable path-style name, e.g. `dec/3/cam/v`.
    pub fn name(&self) -> String {
        let (half, block) = match self.group {
            ModuleGroup::EncSam => ("enc", "sam"),
            ModuleGroup::EncFfm => ("enc", "ffm"),
            ModuleGroup::DecSam => ("dec", "sam"),
            ModuleGroup::DecCam => ("dec", "cam"),
            ModuleGroup::DecFfm => ("dec", "ffm"),
        };
        format!("{half}/{}/{block}/{}", self.layer_index, self.role)
    }

    pub fn weight_params(&self) -> u64 {
        self.out_dim as u64 * self.in_dim as u64
    }

    pub fn bias_params(&self) -> u64 {
        if self.has_bias {
            self.out_dim as u64
        } else {
            0
        }
    }
}

fn default_d_model() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_ffn() -> usize {
    256
}
fn default_vocab() -> usize {
    64
}
fn default_max_len() -> usize {
    32
}
fn default_frontend() -> Frontend {
    Frontend::TokenEmbedding
}

/// Transformer dimensions. Defaults to the `toy-small` preset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub n_enc_layers: usize,
    #[serde(default = "default_layers")]
    pub n_dec_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_ffn")]
    pub d_ffn: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_max_len")]
    pub max_src_len: usize,
    #[serde(default = "default_max_len")]
    pub max_tgt_len: usize,
    #[serde(default = "default_frontend")]
    pub frontend: Frontend,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec::toy_small()
    }
}

impl ArchSpec {
    pub fn toy_small() -> Self {
        ArchSpec {
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: 64,
            max_src_len: 32,
            max_tgt_len: 32,
            frontend: Frontend::TokenEmbedding,
        }
    }

    /// Dimension preset of the 769M-class encoder-decoder; used for
    /// parameter counting only.
    pub fn whisper_medium_dims() -> Self {
        ArchSpec {
            d_model: 1024,
            n_enc_layers: 24,
            n_dec_layers: 24,
            n_heads: 16,
            d_ffn: 4096,
            vocab_size: 51865,
            max_src_len: 1500,
            max_tgt_len: 448,
            frontend: Frontend::ConvStub,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy-small" => Ok(ArchSpec::toy_small()),
            "whisper-medium-dims" => Ok(ArchSpec::whisper_medium_dims()),
            other => Err(Error::Validation(format!(
                "unknown arch preset {other:?} (expected toy-small or whisper-medium-dims)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Validation("d_model must be even".into()));
        }
        if self.vocab_size <= PAYLOAD_BASE as usize {
            return Err(Error::Validation(format!(
                "vocab_size {} leaves no room for payload tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn site(&self, layer_index: usize, group: ModuleGroup, role: Role) -> WeightSite {
        let (out_dim, in_dim) = match role {
            Role::Fc1 => (self.d_ffn, self.d_model),
            Role::Fc2 => (self.d_model, self.d_ffn),
            _ => (self.d_model, self.d_model),
        };
        WeightSite {
            layer_index,
            group,
            role,
            out_dim,
            in_dim,
            has_bias: role != Role::K,
        }
    }

    /// Full site registry in stable enumeration order: encoder layers
    /// first (SAM then FFM per layer), then decoder layers (SAM, CAM,
    /// FFM per layer).
    pub fn sites(&self) -> Vec<WeightSite> {
        let mut out = Vec::with_capacity(self.n_enc_layers * 6 + self.n_dec_layers * 10);
        for l in 0..self.n_enc_layers {
            for role in Role::ATTENTION {
                out.push(self.site(l, ModuleGroup::EncSam, role));
            }
            out.push(self.site(l, ModuleGroup::EncFfm, Role::Fc1));
            out.push(self.site(l, ModuleGroup::EncFfm, Role::Fc2));
        }
        for l in 0..self.n_dec_layers {
            for role in Role::ATTENTION {
                out.push(self.site(l, ModuleGroup::DecSam, role));
            }
            for role in Role::ATTENTION {
                out.push(self.site(l, ModuleGroup::DecCam, role));
            }
            out.push(self.site(l, ModuleGroup::DecFfm, Role::Fc1));
            out.push(self.site(l, ModuleGroup::DecFfm, Role::Fc2));
        }
        out
    }

    /// Registry indices of the sites whose role and group are both in
    /// the given sets.
    pub fn site_indices_filtered(&self, roles: &[Role], groups: &[ModuleGroup]) -> Vec<usize> {
        self.sites()
            .iter()
            .enumerate()
            .filter(|(_, s)| roles.contains(&s.role) && groups.contains(&s.group))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sites_filtered(&self, roles: &[Role], groups: &[ModuleGroup]) -> Vec<WeightSite> {
        let all = self.sites();
        self.site_indices_filtered(roles, groups).into_iter().map(|i| all[i].clone()).collect()
    }

    // ---- parameter census ------------------------------------------------

    fn frontend_params(&self) -> u64 {
        match self.frontend {
            Frontend::TokenEmbedding => (self.vocab_size * self.d_model) as u64,
            Frontend::ConvStub => {
                let d = self.d_model as u64;
                // Two 1-D convolutions with biases: in_ch -> d and d -> d.
                CONV_KERNEL * CONV_STUB_IN_CHANNELS * d + d + CONV_KERNEL * d * d + d
            }
        }
    }

    fn frontend_bias_params(&self) -> u64 {
        match self.frontend {
            Frontend::TokenEmbedding => 0,
            Frontend::ConvStub => 2 * self.d_model as u64,
        }
    }

    /// Number of layer-norm instances (each has a gamma and a beta of
    /// size d_model).
    pub fn layer_norm_count(&self) -> u64 {
        (self.n_enc_layers * 2 + 1 + self.n_dec_layers * 3 + 1) as u64
    }

    /// Total base parameters derived from the dimensions: frontend,
    /// decoder embedding (tied to the output projection), learned decoder
    /// positions, all projection weights and biases, and layer norms.
    /// Encoder positions are sinusoidal and carry no parameters.
    pub fn total_params(&self) -> u64 {
        let d = self.d_model as u64;
        let mut total = self.frontend_params();
        total += (self.vocab_size * self.d_model) as u64; // decoder embedding
        total += (self.max_tgt_len * self.d_model) as u64; // learned decoder positions
        for site in self.sites() {
            total += site.weight_params() + site.bias_params();
        }
        total += self.layer_norm_count() * 2 * d;
        total
    }

    /// Every bias scalar in the model: projection biases, layer-norm
    /// betas, and frontend stub biases. Embeddings carry no bias.
    pub fn bias_params(&self) -> u64 {
        let mut total = self.frontend_bias_params();
        for site in self.sites() {
            total += site.bias_params();
        }
        total += self.layer_norm_count() * self.d_model as u64;
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_small_has_32_sites() {
        assert_eq!(ArchSpec::toy_small().sites().len(), 32);
    }

    #[test]
    fn medium_dims_has_384_sites() {
        assert_eq!(ArchSpec::whisper_medium_dims().sites().len(), 384);
    }

    #[test]
    fn qv_filter_counts() {
        let toy = ArchSpec::toy_small();
        assert_eq!(toy.sites_filtered(&[Role::Q, Role::V], &ModuleGroup::ALL).len(), 12);
        let med = ArchSpec::whisper_medium_dims();
        assert_eq!(med.sites_filtered(&[Role::Q, Role::V], &ModuleGroup::ALL).len(), 144);
    }

    #[test]
    fn empty_filter_gives_empty_list() {
        let toy = ArchSpec::toy_small();
        assert!(toy.sites_filtered(&[], &ModuleGroup::ALL).is_empty());
    }

    #[test]
    fn medium_total_within_2_percent_of_769m() {
        let total = ArchSpec::whisper_medium_dims().total_params();
        assert_eq!(total, 762_321_920);
        let rel = (total as f64 - 769e6).abs() / 769e6;
        assert!(rel < 0.02, "relative deviation {rel}");
    }

    #[test]
    fn every_site_belongs_to_exactly_one_group_with_matching_roles() {
        for site in ArchSpec::toy_small().sites() {
            assert_eq!(site.role.is_attention(), site.group.is_attention());
            assert_eq!(site.has_bias, site.role != Role::K);
            if site.role == Role::Fc1 {
                assert_eq!((site.out_dim, site.in_dim), (256, 64));
            }
            if site.role == Role::Fc2 {
                assert_eq!((site.out_dim, site.in_dim), (64, 256));
            }
        }
    }

    #[test]
    fn arch_validation_rejects_bad_dims() {
        let mut arch = ArchSpec::toy_small();
        arch.n_heads = 5;
        assert!(matches!(arch.validate(), Err(Error::Validation(_))));
        let mut arch = ArchSpec::toy_small();
        arch.d_ffn = 0;
        assert!(arch.validate().is_err());
    }
}
