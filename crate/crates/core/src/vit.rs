//! Token sequences, the pre-norm self-attention encoder and the multi-label head.
//!
//! In ensemble mode every spatial position of the fused feature map becomes
//! one token (a 7×7 map gives 49 tokens, 50 with the class token). In raw mode
//! the image is cut into non-overlapping P×P patches instead.

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ModelConfig, ModelMode};
use crate::model::{Graph, Init, ParamSpec};
use crate::tensor::{Tape, Var};
use crate::{Error, Result};

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_labels() -> usize {
    6
}

fn default_true() -> bool {
    true
}

fn default_patch() -> usize {
    16
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub depth: usize,
    pub latent_dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_labels")]
    pub num_labels: usize,
    #[serde(default = "default_true")]
    pub use_class_token: bool,
    /// Patch edge in raw-image mode.
    #[serde(default = "default_patch")]
    pub patch_size: usize,
}

impl VitConfig {
    pub fn validate(&self, field: &str) -> Result<(), ConfigError> {
        let bad = |name: &str, msg: String| ConfigError::Invalid {
            field: format!("{field}.{name}"),
            msg,
        };
        if self.depth == 0 {
            return Err(bad("depth", "must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(bad("latent_dim", "must be at least 1".into()));
        }
        if self.heads == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return Err(bad(
                "heads",
                format!("must divide latent_dim {}", self.latent_dim),
            ));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_hidden() == 0 {
            return Err(bad("mlp_ratio", "must give a positive hidden width".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad("dropout", "must lie in [0, 1)".into()));
        }
        if self.num_labels == 0 {
            return Err(bad("num_labels", "must be at least 1".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.latent_dim as f64).round() as usize
    }
}

/// Token layout entering the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGeometry {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Width of one token before projection.
    pub in_features: usize,
    pub class_token: bool,
}

impl TokenGeometry {
    pub fn spatial_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn tokens(&self) -> usize {
        self.spatial_tokens() + usize::from(self.class_token)
    }
}

/// Token geometry implied by a model config, without touching any weights.
pub fn token_geometry(cfg: &ModelConfig) -> Result<TokenGeometry> {
    match cfg.mode {
        ModelMode::NCnnVit => {
            let ens = cfg
                .ensemble()
                .ok_or_else(|| Error::Geometry("n_cnn_vit mode needs a backbone".into()))?;
            ens.validate_geometry()?;
            let side = ens.backbones[0].output_extent(cfg.image_size)?;
            Ok(TokenGeometry {
                grid_h: side,
                grid_w: side,
                in_features: ens.fused_channels(),
                class_token: cfg.vit.use_class_token,
            })
        }
        ModelMode::RawVit => {
            let p = cfg.vit.patch_size;
            if p == 0 || !cfg.image_size.is_multiple_of(p) {
                return Err(Error::Indivisible {
                    extent: cfg.image_size,
                    stride: p,
                });
            }
            Ok(TokenGeometry {
                grid_h: cfg.image_size / p,
                grid_w: cfg.image_size / p,
                in_features: p * p * cfg.in_channels,
                class_token: cfg.vit.use_class_token,
            })
        }
    }
}

pub fn param_specs(cfg: &VitConfig, geom: &TokenGeometry) -> Vec<ParamSpec> {
    let d = cfg.latent_dim;
    let hidden = cfg.mlp_hidden();
    let mut specs = vec![
        ParamSpec::new("vit.proj", &[geom.in_features, d], Init::FanIn(geom.in_features)),
        ParamSpec::new("vit.pos", &[geom.tokens(), d], Init::Uniform(0.02)),
    ];
    if geom.class_token {
        specs.push(ParamSpec::new("vit.cls", &[d], Init::Uniform(0.02)));
    }
    for i in 0..cfg.depth {
        let p = format!("vit.block{i}");
        specs.extend([
            ParamSpec::new(format!("{p}.ln1.g"), &[d], Init::Ones),
            ParamSpec::new(format!("{p}.ln1.b"), &[d], Init::Zeros),
            ParamSpec::new(format!("{p}.attn.wq"), &[d, d], Init::FanIn(d)),
            ParamSpec::new(format!("{p}.attn.wk"), &[d, d], Init::FanIn(d)),
            ParamSpec::new(format!("{p}.attn.wv"), &[d, d], Init::FanIn(d)),
            ParamSpec::new(format!("{p}.attn.wo"), &[d, d], Init::FanIn(d)),
            ParamSpec::new(format!("{p}.ln2.g"), &[d], Init::Ones),
            ParamSpec::new(format!("{p}.ln2.b"), &[d], Init::Zeros),
            ParamSpec::new(format!("{p}.mlp.w1"), &[d, hidden], Init::FanIn(d)),
            ParamSpec::new(format!("{p}.mlp.b1"), &[hidden], Init::Zeros),
            ParamSpec::new(format!("{p}.mlp.w2"), &[hidden, d], Init::FanIn(hidden)),
            ParamSpec::new(format!("{p}.mlp.b2"), &[d], Init::Zeros),
        ]);
    }
    specs.extend([
        ParamSpec::new("vit.norm.g", &[d], Init::Ones),
        ParamSpec::new("vit.norm.b", &[d], Init::Zeros),
        ParamSpec::new("head.w", &[d, cfg.num_labels], Init::FanIn(d)),
        ParamSpec::new("head.b", &[cfg.num_labels], Init::Zeros),
    ]);
    specs
}

/// Projects a feature map to tokens: `fmap[b,i,j,:]·proj + pos[t]`, with the
/// class token (when given) prepended at index 0 and taking `pos[0]`.
pub fn tokenize_project(
    tape: &mut Tape,
    fmap: Var,
    proj: Var,
    pos: Var,
    cls: Option<Var>,
) -> Result<Var> {
    let sf = tape.shape(fmap).to_vec();
    let sp = tape.shape(proj).to_vec();
    if sf.len() != 4 || sp.len() != 2 || sp[0] != sf[3] {
        return Err(Error::Geometry(format!(
            "projection {sp:?} does not match feature map {sf:?}"
        )));
    }
    let (b, spatial, d) = (sf[0], sf[1] * sf[2], sp[1]);
    let flat = tape.reshape(fmap, &[b, spatial, sf[3]])?;
    let mut tokens = tape.linear(flat, proj)?;
    if let Some(cls) = cls {
        if tape.shape(cls) != [d] {
            return Err(Error::Geometry(format!(
                "class token {:?} does not match latent dim {d}",
                tape.shape(cls)
            )));
        }
        let row = tape.reshape(cls, &[1, d])?;
        let rows = tape.expand_leading(row, &[b])?;
        tokens = tape.concat(&[rows, tokens], 1)?;
    }
    let t = tape.shape(tokens)[1];
    if tape.shape(pos) != [t, d] {
        return Err(Error::Geometry(format!(
            "positional table {:?} does not match {t} tokens of width {d}",
            tape.shape(pos)
        )));
    }
    Ok(tape.add_trailing(tokens, pos)?)
}

/// `[B, H, W, C]` to `[B, (H/P)·(W/P), P·P·C]`, patches in row-major grid
/// order, each flattened row-major over `(dy, dx, c)`.
pub fn patchify(tape: &mut Tape, images: Var, patch: usize) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 {
        return Err(Error::Geometry(format!("patchify expects [B,H,W,C], got {s:?}")));
    }
    for extent in [s[1], s[2]] {
        if patch == 0 || extent % patch != 0 {
            return Err(Error::Indivisible {
                extent,
                stride: patch,
            });
        }
    }
    let (b, gh, gw, c) = (s[0], s[1] / patch, s[2] / patch, s[3]);
    let x = tape.reshape(images, &[b, gh, patch, gw, patch, c])?;
    let x = tape.transpose(x, &[0, 1, 3, 2, 4, 5])?;
    Ok(tape.reshape(x, &[b, gh * gw, patch * patch * c])?)
}

fn token_params(g: &mut Graph<'_>, cfg: &VitConfig) -> Result<(Var, Var, Option<Var>)> {
    let proj = g.param("vit.proj")?;
    let pos = g.param("vit.pos")?;
    let cls = if cfg.use_class_token {
        Some(g.param("vit.cls")?)
    } else {
        None
    };
    Ok((proj, pos, cls))
}

pub fn tokenize_feature_map(g: &mut Graph<'_>, cfg: &VitConfig, fmap: Var) -> Result<Var> {
    let (proj, pos, cls) = token_params(g, cfg)?;
    tokenize_project(g.tape, fmap, proj, pos, cls)
}

pub fn tokenize_patches(g: &mut Graph<'_>, cfg: &VitConfig, images: Var) -> Result<Var> {
    let s = g.tape.shape(images).to_vec();
    let patches = patchify(g.tape, images, cfg.patch_size)?;
    let features = g.tape.shape(patches)[2];
    let (gh, gw) = (s[1] / cfg.patch_size, s[2] / cfg.patch_size);
    let grid = g.tape.reshape(patches, &[s[0], gh, gw, features])?;
    tokenize_feature_map(g, cfg, grid)
}

/// Query/key/value/output projections of one attention layer, each `[D, D]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head self-attention with scale `1/sqrt(D/heads)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    dim: usize,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(ConfigError::Invalid {
                field: "heads".into(),
                msg: format!("{heads} heads do not divide dimension {dim}"),
            }
            .into());
        }
        Ok(Self { dim, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Returns the output `[B, T, D]` and the attention weights `[B, heads, T, T]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, w: &AttentionWeights) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::Geometry(format!(
                "attention expects [B, T, {}], got {s:?}",
                self.dim
            )));
        }
        let (b, t, h, dh) = (s[0], s[1], self.heads, self.head_dim());
        let split = |tape: &mut Tape, weight: Var, perm: &[usize]| -> Result<Var> {
            let y = tape.linear(x, weight)?;
            let y = tape.reshape(y, &[b, t, h, dh])?;
            Ok(tape.transpose(y, perm)?)
        };
        let q = split(tape, w.wq, &[0, 2, 1, 3])?;
        let kt = split(tape, w.wk, &[0, 2, 3, 1])?;
        let v = split(tape, w.wv, &[0, 2, 1, 3])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, self.dim])?;
        Ok((tape.linear(ctx, w.wo)?, attn))
    }
}

fn layer_norm(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.g"))?;
    let beta = g.param(&format!("{prefix}.b"))?;
    Ok(g.tape.layer_norm(x, gamma, beta, LN_EPS)?)
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))` with GELU.
pub fn encoder_block(g: &mut Graph<'_>, cfg: &VitConfig, prefix: &str, x: Var) -> Result<Var> {
    let mha = MultiHeadAttention::new(cfg.latent_dim, cfg.heads)?;
    let weights = AttentionWeights {
        wq: g.param(&format!("{prefix}.attn.wq"))?,
        wk: g.param(&format!("{prefix}.attn.wk"))?,
        wv: g.param(&format!("{prefix}.attn.wv"))?,
        wo: g.param(&format!("{prefix}.attn.wo"))?,
    };
    let h = layer_norm(g, &format!("{prefix}.ln1"), x)?;
    let (a, attn) = mha.forward(g.tape, h, &weights)?;
    if let Some(probe) = g.attention_probe.as_mut() {
        probe.push(g.tape.value(attn).clone());
    }
    let a = g.dropout(a, cfg.dropout)?;
    let x = g.tape.add(x, a)?;

    let h = layer_norm(g, &format!("{prefix}.ln2"), x)?;
    let w1 = g.param(&format!("{prefix}.mlp.w1"))?;
    let b1 = g.param(&format!("{prefix}.mlp.b1"))?;
    let w2 = g.param(&format!("{prefix}.mlp.w2"))?;
    let b2 = g.param(&format!("{prefix}.mlp.b2"))?;
    let h = g.tape.linear(h, w1)?;
    let h = g.tape.add_trailing(h, b1)?;
    let h = g.tape.gelu(h);
    let h = g.dropout(h, cfg.dropout)?;
    let h = g.tape.linear(h, w2)?;
    let h = g.tape.add_trailing(h, b2)?;
    let h = g.dropout(h, cfg.dropout)?;
    Ok(g.tape.add(x, h)?)
}

/// Runs every encoder block over already positioned tokens `[B, T, D]`.
pub fn encode(g: &mut Graph<'_>, cfg: &VitConfig, tokens: Var) -> Result<Var> {
    let mut x = tokens;
    for i in 0..cfg.depth {
        x = encoder_block(g, cfg, &format!("vit.block{i}"), x)?;
    }
    Ok(x)
}

/// Encoder plus head: final layer norm on the class token (or the token mean
/// when there is none), then a linear map to `num_labels` logits.
pub fn vit_forward(g: &mut Graph<'_>, cfg: &VitConfig, tokens: Var) -> Result<Var> {
    let x = encode(g, cfg, tokens)?;
    let s = g.tape.shape(x).to_vec();
    let pooled = if cfg.use_class_token {
        let first = g.tape.slice(x, 1, 0, 1)?;
        g.tape.reshape(first, &[s[0], s[2]])?
    } else {
        g.tape.mean(x, 1)?
    };
    let pooled = layer_norm(g, "vit.norm", pooled)?;
    let w = g.param("head.w")?;
    let b = g.param("head.b")?;
    let logits = g.tape.linear(pooled, w)?;
    Ok(g.tape.add_trailing(logits, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn construction_rejects_indivisible_heads() {
        assert!(MultiHeadAttention::new(1456, 8).is_ok());
        assert_eq!(MultiHeadAttention::new(1456, 8).unwrap().head_dim(), 182);
        assert!(MultiHeadAttention::new(10, 3).is_err());
    }

    #[test]
    fn patchify_matches_manual_slice() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(&[1, 4, 6, 2], |i| i as f64);
        let x = tape.constant(img.clone());
        let p = patchify(&mut tape, x, 2).unwrap();
        assert_eq!(tape.shape(p), &[1, 6, 8]);
        // Patch (1, 2) is grid index 5; its elements in (dy, dx, c) order.
        let mut expected = Vec::new();
        for dy in 0..2 {
            for dx in 0..2 {
                for c in 0..2 {
                    expected.push(img.get(&[0, 2 + dy, 4 + dx, c]));
                }
            }
        }
        assert_eq!(&tape.value(p).data()[5 * 8..6 * 8], expected.as_slice());
    }

    #[test]
    fn zero_map_tokens_are_positions() {
        let mut tape = Tape::new();
        let fmap = tape.constant(Tensor::zeros(&[2, 2, 2, 3]));
        let proj = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64));
        let pos = tape.constant(Tensor::from_fn(&[5, 4], |i| i as f64 * 0.5));
        let cls = tape.constant(Tensor::zeros(&[4]));
        let t = tokenize_project(&mut tape, fmap, proj, pos, Some(cls)).unwrap();
        assert_eq!(tape.shape(t), &[2, 5, 4]);
        let pos_data = tape.value(pos).data().to_vec();
        for b in 0..2 {
            assert_eq!(&tape.value(t).data()[b * 20..(b + 1) * 20], pos_data.as_slice());
        }
    }

    #[test]
    fn positional_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let fmap = tape.constant(Tensor::zeros(&[1, 2, 2, 3]));
        let proj = tape.constant(Tensor::zeros(&[3, 4]));
        let pos = tape.constant(Tensor::zeros(&[4, 4]));
        let cls = tape.constant(Tensor::zeros(&[4]));
        assert!(tokenize_project(&mut tape, fmap, proj, pos, Some(cls)).is_err());
    }
}
