//! Static shape and size report for a config; allocates no weights.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::vit;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapePlan {
    /// `[h, w, C]` of each backbone's output (before reduction).
    pub backbone_maps: Vec<[usize; 3]>,
    /// `[h, w, C]` entering tokenization (after reduction and fusion).
    pub fused: [usize; 3],
    pub tokens: usize,
    pub latent_dim: usize,
    pub backbone_params: usize,
    pub vit_params: usize,
}

impl ShapePlan {
    pub fn total_params(&self) -> usize {
        self.backbone_params + self.vit_params
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, m) in self.backbone_maps.iter().enumerate() {
            out.push_str(&format!("backbone {i}: {}x{}x{}\n", m[0], m[1], m[2]));
        }
        let f = self.fused;
        out.push_str(&format!("fused: {}x{}x{}\n", f[0], f[1], f[2]));
        out.push_str(&format!("tokens: {}x{}\n", self.tokens, self.latent_dim));
        out.push_str(&format!("params: backbone {} vit {} total {}\n", self.backbone_params, self.vit_params, self.total_params()));
        out
    }
}

pub fn plan(cfg: &ModelConfig) -> Result<ShapePlan> {
    let cfg = cfg.clone().canonical()?;
    let geom = vit::token_geometry(&cfg)?;
    let mut backbone_maps = Vec::new();
    let mut backbone_params = 0;
    if let Some(ens) = cfg.ensemble() {
        for (i, b) in ens.backbones.iter().enumerate() {
            let side = b.output_extent(cfg.image_size)?;
            backbone_maps.push([side, side, b.out_channels()]);
            backbone_params += ens.member_specs(i).iter().map(|s| s.numel()).sum::<usize>();
        }
    }
    let vit_params = vit::param_specs(&cfg.vit, &geom).iter().map(|s| s.numel()).sum();
    Ok(ShapePlan {
        backbone_maps,
        fused: [geom.grid_h, geom.grid_w, geom.in_features],
        tokens: geom.tokens(),
        latent_dim: cfg.vit.latent_dim,
        backbone_params,
        vit_params,
    })
}
