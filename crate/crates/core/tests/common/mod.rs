#![allow(dead_code)]

use std::path::{Path, PathBuf};

use scopeformer::backbone::StageConfig;
use scopeformer::config::{
    BackboneSpec, DataConfig, LossConfig, MemberSpec, ModelConfig, ModelMode, OptimizerConfig, RunConfig,
    TrainConfig,
};
use scopeformer::data::{CtSlice, FixtureOptions};
use scopeformer::vit::VitConfig;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn vit(depth: usize, dim: usize, heads: usize) -> VitConfig {
    serde_json::from_value(serde_json::json!({"depth": depth, "latent_dim": dim, "heads": heads, "mlp_ratio": 2}))
        .expect("vit config")
}

/// Two-stage backbones ending at 8 channels, `image / 4` spatial side.
pub fn toy_model(n: usize, member_seeds: Option<&[u64]>, reduce: usize, image: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        mode: ModelMode::NCnnVit,
        image_size: image,
        in_channels: 3,
        n_backbones: n,
        backbone: Some(BackboneSpec {
            stages: vec![
                StageConfig {
                    out_channels: 4,
                    stride: 2,
                    blocks_per_stage: 1,
                },
                StageConfig {
                    out_channels: 8,
                    stride: 2,
                    blocks_per_stage: 1,
                },
            ],
            kernel_size: 3,
        }),
        members: member_seeds
            .map(|s| {
                s.iter()
                    .map(|&seed| MemberSpec {
                        seed,
                        pretraining_tag: "default".into(),
                        trainable: true,
                    })
                    .collect()
            })
            .unwrap_or_default(),
        reduce_channels: reduce,
        vit: vit(2, 16, 2),
        seed,
    }
}

pub fn run_config(model: ModelConfig, out_dir: &Path, steps: u64, lr: f64, batch_size: usize) -> RunConfig {
    RunConfig {
        model,
        train: TrainConfig {
            optimizer: OptimizerConfig {
                lr,
                ..Default::default()
            },
            batch_size,
            steps,
            seed: 0,
            eval_every: 0,
            ckpt_every: 0,
            grad_clip: None,
            out_dir: out_dir.to_path_buf(),
        },
        data: DataConfig::default(),
        loss: LossConfig::default(),
    }
}

/// What parsing a fixture must produce.
pub enum Expect {
    Slice(CtSlice),
    UnsupportedFormat,
    Unsupported,
    Corrupt,
}

pub struct Fixture {
    pub file: &'static str,
    pub bytes: Vec<u8>,
    pub expect: Expect,
}

fn slice(rows: usize, cols: usize, values: Vec<i32>, slope: f64, intercept: f64, signed: bool) -> CtSlice {
    let mut s = if signed {
        CtSlice::new_signed(rows, cols, values, slope, intercept)
    } else {
        CtSlice::new(rows, cols, values, slope, intercept)
    }
    .expect("valid fixture slice");
    s.source_id = "fixture".into();
    s
}

fn write(s: &CtSlice, opts: &FixtureOptions) -> Vec<u8> {
    scopeformer::data::write_dicom_lite(s, opts).expect("fixture writes")
}

/// The checked-in DICOM fixtures, rebuilt from their definitions.
pub fn fixtures() -> Vec<Fixture> {
    let std = FixtureOptions::default();
    let basic = slice(2, 2, vec![0, 100, 200, 300], 1.0, -1024.0, false);
    let signed = slice(3, 4, (0..12).map(|i| i * 250 - 1500).collect(), 0.5, 10.0, true);
    let mut no_rescale = slice(2, 3, vec![1, 2, 3, 4, 5, 6], 1.0, 0.0, false);
    no_rescale.rescale_defaulted = true;
    let seq = slice(4, 4, (0..16).map(|i| 1000 + i * 7).collect(), 1.0, -1024.0, false);
    let wide = slice(8, 8, (0..64).map(|i| (i * 1031) % 4096).collect(), 1.0, -1024.0, false);

    let mut bad_magic = write(&basic, &std);
    bad_magic[128..132].copy_from_slice(b"XXXX");
    let jpeg = write(
        &basic,
        &FixtureOptions {
            transfer_syntax: "1.2.840.10008.1.2.4.50".into(),
            ..Default::default()
        },
    );
    let full = write(&wide, &std);
    let truncated = full[..full.len() - 10].to_vec();

    vec![
        Fixture {
            file: "ct_2x2_basic.dcm",
            bytes: write(&basic, &std),
            expect: Expect::Slice(basic),
        },
        Fixture {
            file: "ct_3x4_signed.dcm",
            bytes: write(&signed, &std),
            expect: Expect::Slice(signed),
        },
        Fixture {
            file: "ct_2x3_no_rescale.dcm",
            bytes: write(
                &no_rescale,
                &FixtureOptions {
                    include_rescale: false,
                    ..Default::default()
                },
            ),
            expect: Expect::Slice(no_rescale),
        },
        Fixture {
            file: "ct_4x4_sequence.dcm",
            bytes: write(
                &seq,
                &FixtureOptions {
                    include_sequence: true,
                    ..Default::default()
                },
            ),
            expect: Expect::Slice(seq),
        },
        Fixture {
            file: "ct_8x8_wide.dcm",
            bytes: full,
            expect: Expect::Slice(wide),
        },
        Fixture {
            file: "bad_magic.dcm",
            bytes: bad_magic,
            expect: Expect::UnsupportedFormat,
        },
        Fixture {
            file: "jpeg_baseline.dcm",
            bytes: jpeg,
            expect: Expect::Unsupported,
        },
        Fixture {
            file: "truncated_pixels.dcm",
            bytes: truncated,
            expect: Expect::Corrupt,
        },
    ]
}

pub fn fixture_dir() -> PathBuf {
    workspace_root().join("fixtures").join("dicom")
}
