//! Xception-style feature extractors and their n-way fusion.
//!
//! A backbone is a regular k×k stem followed by stages of separable residual
//! blocks. Each block is `Add(residual, affine(pointwise(depthwise(relu(x)))))`,
//! and the backbone's feature map is the output of its last block, i.e. an Add
//! node. The ensemble feeds the same image to every backbone, optionally
//! shrinks each map with a 1×1 convolution and concatenates along channels in
//! backbone order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{materialize, Graph, Init, ParamSpec, ParamStore};
use crate::tensor::{Padding, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub out_channels: usize,
    pub stride: usize,
    pub blocks_per_stage: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    pub input_channels: usize,
    pub kernel_size: usize,
    pub seed: u64,
    /// Provenance label ("imagenet", "gan", ...). Metadata only.
    pub pretraining_tag: String,
    pub trainable: bool,
}

/// One separable residual block in a flattened backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

impl BackboneConfig {
    pub fn cumulative_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.input_channels, |s| s.out_channels)
    }

    /// Output extent for input extent `h`, failing unless the stride divides it.
    pub fn output_extent(&self, h: usize) -> Result<usize> {
        let stride = self.cumulative_stride();
        if !h.is_multiple_of(stride) {
            return Err(Error::Indivisible { extent: h, stride });
        }
        Ok(h / stride)
    }

    /// Blocks in execution order. The first stage's stride is taken by the
    /// stem, so its blocks run at stride 1.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut blocks = Vec::new();
        let mut channels = self.stages.first().map_or(self.input_channels, |s| s.out_channels);
        for (i, stage) in self.stages.iter().enumerate() {
            for j in 0..stage.blocks_per_stage {
                let stride = if i > 0 && j == 0 { stage.stride } else { 1 };
                blocks.push(BlockSpec {
                    name: format!("s{i}.b{j}"),
                    in_channels: channels,
                    out_channels: stage.out_channels,
                    stride,
                });
                channels = stage.out_channels;
            }
        }
        blocks
    }

    /// Parameter specs under `prefix`, in initialisation order.
    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let k = self.kernel_size;
        let stem_out = self.stages.first().map_or(self.input_channels, |s| s.out_channels);
        let mut specs = vec![
            ParamSpec::new(
                format!("{prefix}.stem.w"),
                &[k, k, self.input_channels, stem_out],
                Init::FanIn(k * k * self.input_channels),
            ),
            ParamSpec::new(format!("{prefix}.stem.scale"), &[stem_out], Init::Ones),
            ParamSpec::new(format!("{prefix}.stem.shift"), &[stem_out], Init::Zeros),
        ];
        for b in self.blocks() {
            let p = format!("{prefix}.{}", b.name);
            let (cin, cout) = (b.in_channels, b.out_channels);
            specs.push(ParamSpec::new(format!("{p}.dw"), &[k, k, cin], Init::FanIn(k * k)));
            specs.push(ParamSpec::new(format!("{p}.pw"), &[1, 1, cin, cout], Init::FanIn(cin)));
            specs.push(ParamSpec::new(format!("{p}.scale"), &[cout], Init::Ones));
            specs.push(ParamSpec::new(format!("{p}.shift"), &[cout], Init::Zeros));
            if b.has_projection() {
                specs.push(ParamSpec::new(format!("{p}.proj"), &[1, 1, cin, cout], Init::FanIn(cin)));
            }
        }
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub backbones: Vec<BackboneConfig>,
    /// 1×1 reduction width applied to each backbone before fusion; 0 disables it.
    pub reduce_channels: usize,
}

pub fn backbone_prefix(i: usize) -> String {
    format!("bb{i}")
}

impl EnsembleConfig {
    pub fn n(&self) -> usize {
        self.backbones.len()
    }

    /// Checks that every backbone shares the first one's spatial geometry.
    pub fn validate_geometry(&self) -> Result<()> {
        let Some(first) = self.backbones.first() else {
            return Err(Error::Geometry("ensemble has no backbones".into()));
        };
        let strides = |b: &BackboneConfig| b.stages.iter().map(|s| s.stride).collect::<Vec<_>>();
        for (i, b) in self.backbones.iter().enumerate().skip(1) {
            if strides(b) != strides(first) || b.input_channels != first.input_channels {
                return Err(Error::Geometry(format!(
                    "backbone {i} geometry (strides {:?}, {} input channels) differs from backbone 0 ({:?}, {})",
                    strides(b),
                    b.input_channels,
                    strides(first),
                    first.input_channels
                )));
            }
        }
        if let Some(b) = self
            .backbones
            .iter()
            .find(|b| self.reduce_channels > b.out_channels())
        {
            return Err(Error::Geometry(format!(
                "reduction width {} exceeds backbone width {}",
                self.reduce_channels,
                b.out_channels()
            )));
        }
        Ok(())
    }

    /// Width of one backbone's contribution to the fused map.
    pub fn member_channels(&self, i: usize) -> usize {
        if self.reduce_channels > 0 {
            self.reduce_channels
        } else {
            self.backbones[i].out_channels()
        }
    }

    pub fn fused_channels(&self) -> usize {
        (0..self.n()).map(|i| self.member_channels(i)).sum()
    }

    /// Specs of backbone `i` including its reduction, in initialisation order.
    pub fn member_specs(&self, i: usize) -> Vec<ParamSpec> {
        let b = &self.backbones[i];
        let prefix = backbone_prefix(i);
        let mut specs = b.param_specs(&prefix);
        if self.reduce_channels > 0 {
            let c = b.out_channels();
            specs.push(ParamSpec::new(
                format!("{prefix}.reduce"),
                &[1, 1, c, self.reduce_channels],
                Init::FanIn(c),
            ));
        }
        specs
    }
}

/// Initialises every backbone from its own seed; equal seeds give equal weights.
pub fn init_ensemble(store: &mut ParamStore, cfg: &EnsembleConfig) -> Result<()> {
    cfg.validate_geometry()?;
    for (i, b) in cfg.backbones.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(b.seed);
        materialize(store, &cfg.member_specs(i), &mut rng, b.trainable);
    }
    Ok(())
}

fn affine(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let scale = g.param(&format!("{prefix}.scale"))?;
    let shift = g.param(&format!("{prefix}.shift"))?;
    let y = g.tape.mul_trailing(x, scale)?;
    Ok(g.tape.add_trailing(y, shift)?)
}

/// `Add(residual, affine(pointwise(depthwise(relu(x)))))`; the returned node is the Add.
pub fn separable_block(
    g: &mut Graph<'_>,
    prefix: &str,
    block: &BlockSpec,
    x: Var,
) -> Result<Var> {
    let dw = g.param(&format!("{prefix}.dw"))?;
    let pw = g.param(&format!("{prefix}.pw"))?;
    let h = g.tape.relu(x);
    let h = g.tape.depthwise_conv2d(h, dw, block.stride, Padding::Same)?;
    let h = g.tape.conv2d(h, pw, 1, Padding::Valid)?;
    let h = affine(g, prefix, h)?;
    let residual = if block.has_projection() {
        let proj = g.param(&format!("{prefix}.proj"))?;
        g.tape.conv2d(x, proj, block.stride, Padding::Valid)?
    } else {
        x
    };
    Ok(g.tape.add(residual, h)?)
}

/// Images `[B, H, W, C_in]` to the final Add feature map `[B, H/s, W/s, C]`.
pub fn backbone_forward(
    g: &mut Graph<'_>,
    cfg: &BackboneConfig,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let shape = g.tape.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != cfg.input_channels {
        return Err(Error::Geometry(format!(
            "backbone expects [B, H, W, {}] input, got {shape:?}",
            cfg.input_channels
        )));
    }
    cfg.output_extent(shape[1])?;
    cfg.output_extent(shape[2])?;
    let stem_stride = cfg.stages.first().map_or(1, |s| s.stride);
    let w = g.param(&format!("{prefix}.stem.w"))?;
    let h = g.tape.conv2d(x, w, stem_stride, Padding::Same)?;
    let h = affine(g, &format!("{prefix}.stem"), h)?;
    let mut h = g.tape.relu(h);
    for block in cfg.blocks() {
        h = separable_block(g, &format!("{prefix}.{}", block.name), &block, h)?;
    }
    Ok(h)
}

/// Pointwise channel reduction `[B, h, w, C] → [B, h, w, C_r]`.
pub fn reduce_1x1(tape: &mut Tape, fmap: Var, w: Var) -> Result<Var> {
    let (sf, sw) = (tape.shape(fmap).to_vec(), tape.shape(w).to_vec());
    if sw.len() != 4 || sw[0] != 1 || sw[1] != 1 || sf.len() != 4 || sw[2] != sf[3] {
        return Err(Error::Geometry(format!(
            "reduction weight {sw:?} does not match feature map {sf:?}"
        )));
    }
    Ok(tape.conv2d(fmap, w, 1, Padding::Valid)?)
}

/// Runs every backbone on the same `x` and concatenates along channels.
pub fn ensemble_forward(g: &mut Graph<'_>, cfg: &EnsembleConfig, x: Var) -> Result<Var> {
    cfg.validate_geometry()?;
    let mut maps = Vec::with_capacity(cfg.n());
    for (i, b) in cfg.backbones.iter().enumerate() {
        let prefix = backbone_prefix(i);
        let mut f = backbone_forward(g, b, &prefix, x)?;
        if cfg.reduce_channels > 0 {
            let w = g.param(&format!("{prefix}.reduce"))?;
            f = reduce_1x1(g.tape, f, w)?;
        }
        maps.push(f);
    }
    if maps.len() == 1 {
        return Ok(maps[0]);
    }
    Ok(g.tape.concat(&maps, 3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::tensor::{OpKind, Tensor};

    fn toy(seed: u64, widths: &[usize]) -> BackboneConfig {
        BackboneConfig {
            stages: widths
                .iter()
                .map(|&c| StageConfig {
                    out_channels: c,
                    stride: 2,
                    blocks_per_stage: 1,
                })
                .collect(),
            input_channels: 3,
            kernel_size: 3,
            seed,
            pretraining_tag: "test".into(),
            trainable: true,
        }
    }

    fn image(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 37 % 101) as f64) / 101.0)
    }

    fn run_backbone(cfg: &BackboneConfig, x: &Tensor) -> Result<Tensor> {
        let ens = EnsembleConfig {
            backbones: vec![cfg.clone()],
            reduce_channels: 0,
        };
        let mut store = ParamStore::new();
        init_ensemble(&mut store, &ens)?;
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, Mode::Eval);
        let xv = g.tape.constant(x.clone());
        let y = backbone_forward(&mut g, cfg, "bb0", xv)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn five_halvings_of_sixty_four() {
        let cfg = toy(1, &[8, 8, 16, 16, 32]);
        let out = run_backbone(&cfg, &image(&[2, 64, 64, 3])).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2, 32]);
    }

    #[test]
    fn indivisible_extent_is_reported() {
        let cfg = toy(1, &[4, 4, 4]);
        let err = run_backbone(&cfg, &image(&[1, 12, 12, 3])).unwrap_err();
        assert!(matches!(err, Error::Indivisible { extent: 12, stride: 8 }), "{err}");
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let cfg = toy(3, &[4, 8]);
        let out = run_backbone(&cfg, &Tensor::zeros(&[1, 8, 8, 3])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_block_ends_in_add() {
        let cfg = BackboneConfig {
            stages: vec![
                StageConfig { out_channels: 4, stride: 2, blocks_per_stage: 2 },
                StageConfig { out_channels: 6, stride: 1, blocks_per_stage: 1 },
                StageConfig { out_channels: 6, stride: 2, blocks_per_stage: 2 },
            ],
            ..toy(5, &[])
        };
        let ens = EnsembleConfig { backbones: vec![cfg.clone()], reduce_channels: 0 };
        let mut store = ParamStore::new();
        init_ensemble(&mut store, &ens).unwrap();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, Mode::Eval);
        let x = g.tape.constant(image(&[1, 8, 8, 3]));
        let mut h = g.tape.relu(x);
        let w = g.param("bb0.stem.w").unwrap();
        h = g.tape.conv2d(h, w, 2, Padding::Same).unwrap();
        let mut adds = Vec::new();
        for b in cfg.blocks() {
            h = separable_block(&mut g, &format!("bb0.{}", b.name), &b, h).unwrap();
            adds.push(h);
        }
        assert_eq!(adds.len(), 5);
        for v in adds {
            assert_eq!(tape.op_kind(v), OpKind::Add);
        }
    }

    #[test]
    fn projection_only_where_geometry_changes() {
        let cfg = BackboneConfig {
            stages: vec![
                StageConfig { out_channels: 4, stride: 2, blocks_per_stage: 2 },
                StageConfig { out_channels: 4, stride: 2, blocks_per_stage: 1 },
                StageConfig { out_channels: 8, stride: 1, blocks_per_stage: 1 },
            ],
            ..toy(5, &[])
        };
        let proj: Vec<bool> = cfg.blocks().iter().map(BlockSpec::has_projection).collect();
        assert_eq!(proj, vec![false, false, true, true]);
    }

    #[test]
    fn distinct_seeds_distinct_weights_equal_seeds_equal_weights() {
        let ens = EnsembleConfig {
            backbones: vec![toy(1, &[4, 4]), toy(2, &[4, 4]), toy(1, &[4, 4])],
            reduce_channels: 2,
        };
        let mut store = ParamStore::new();
        init_ensemble(&mut store, &ens).unwrap();
        let differs = |a: usize, b: usize| {
            ens.member_specs(a).iter().zip(ens.member_specs(b)).any(|(sa, sb)| {
                store.value(&sa.name).unwrap() != store.value(&sb.name).unwrap()
            })
        };
        assert!(differs(0, 1));
        assert!(!differs(0, 2));
    }

    #[test]
    fn mismatched_geometry_rejected() {
        let mut other = toy(2, &[4, 4]);
        other.stages[1].stride = 1;
        let ens = EnsembleConfig {
            backbones: vec![toy(1, &[4, 4]), other],
            reduce_channels: 0,
        };
        assert!(matches!(ens.validate_geometry(), Err(Error::Geometry(_))));
    }

    #[test]
    fn reduce_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[1, 2, 2, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(reduce_1x1(&mut tape, f, w).is_err());
    }
}
