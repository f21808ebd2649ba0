//! Named finite-difference checks for every differentiable op and for a tiny
//! end-to-end model. Each case reduces its op's output to a scalar through a
//! fixed random projection so that no gradient component is trivially zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::loss::{weighted_log_loss, LabelWeights, DEFAULT_EPS};
use crate::model::{Graph, Mode, Scopeformer};
use crate::tensor::{grad_check, GradReport, Padding, Tape, Tensor, Var};
use crate::vit::{AttentionWeights, MultiHeadAttention};
use crate::{Error, Result};

/// Finite-difference step used by the suite.
pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Every case name, in report order.
pub const CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "relu",
    "gelu",
    "sigmoid",
    "scale",
    "matmul",
    "matmul_shared_rhs",
    "linear",
    "linear_weight",
    "conv2d_same",
    "conv2d_valid_stride2",
    "conv2d_weight",
    "depthwise_conv2d",
    "depthwise_conv2d_stride2",
    "depthwise_weight",
    "softmax",
    "layer_norm",
    "layer_norm_gamma",
    "dropout",
    "concat",
    "reshape",
    "transpose",
    "slice",
    "sum",
    "mean",
    "mean_all",
    "add_trailing",
    "mul_trailing",
    "expand_leading",
    "weighted_log_loss",
    "attention",
    "scopeformer_input",
    "scopeformer_backbone_weight",
    "scopeformer_attention_weight",
];

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradReport,
}

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// `Σ y ⊙ r` for a fixed random `r`.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let c = tape.constant(r.clone());
    let m = tape.mul(y, c)?;
    Ok(tape.sum_all(m)?)
}

/// Checks `op` at a random input of shape `shape`.
fn check_op<F>(shape: &[usize], out_shape: &[usize], rng: &mut ChaCha8Rng, h: f64, tol: f64, op: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let x = rand(shape, rng);
    let r = rand(out_shape, rng);
    grad_check(
        |tape: &mut Tape, xv: Var| -> Result<Var> {
            let y = op(tape, xv)?;
            project(tape, y, &r)
        },
        &x,
        h,
        tol,
    )
}

/// The tiny end-to-end model: 8×8 images, two 2-stage backbones, 4 tokens
/// plus the class token, a depth-2 encoder of width 8.
pub fn tiny_model_config() -> ModelConfig {
    let json = r#"{
        "mode": "n_cnn_vit",
        "image_size": 8,
        "n_backbones": 2,
        "backbone": {"stages": [
            {"out_channels": 4, "stride": 2, "blocks_per_stage": 1},
            {"out_channels": 8, "stride": 2, "blocks_per_stage": 1}
        ]},
        "reduce_channels": 4,
        "vit": {"depth": 2, "latent_dim": 8, "heads": 2, "mlp_ratio": 2},
        "seed": 11
    }"#;
    serde_json::from_str(json).expect("tiny config parses")
}

enum Probe {
    Input,
    Param(&'static str),
}

fn check_model(seed: u64, h: f64, tol: f64, probe: Probe) -> Result<GradReport> {
    let model = Scopeformer::new(tiny_model_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::uniform(&[2, 8, 8, 3], 1.0, &mut rng).map(|v| 0.5 + 0.5 * v);
    let labels = Tensor::new(vec![2, 6], vec![1., 0., 1., 0., 0., 1., 0., 0., 0., 0., 0., 0.])?;
    let weights = LabelWeights::standard(6)?;
    let x = match probe {
        Probe::Input => images.clone(),
        Probe::Param(name) => model.params.value(name)?.clone(),
    };
    let f = |tape: &mut Tape, xv: Var| -> Result<Var> {
        let mut g = Graph::new(tape, &model.params, Mode::Eval);
        let input = match probe {
            Probe::Input => xv,
            Probe::Param(name) => {
                g.bind(name, xv);
                g.tape.constant(images.clone())
            }
        };
        let logits = model.forward(&mut g, input)?;
        let probs = g.tape.sigmoid(logits);
        Ok(weighted_log_loss(g.tape, probs, &labels, &weights, DEFAULT_EPS)?)
    };
    grad_check(f, &x, h, tol)
}

/// Runs one named case.
pub fn run_case(name: &str, seed: u64, h: f64, tol: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let s = [2, 3, 4];
    match name {
        "add" => {
            let c = rand(&s, rng);
            check_op(&s, &s, rng, h, tol, |t, x| {
                let c = t.constant(c.clone());
                Ok(t.add(x, c)?)
            })
        }
        "sub" => {
            let c = rand(&s, rng);
            check_op(&s, &s, rng, h, tol, |t, x| {
                let c = t.constant(c.clone());
                Ok(t.sub(c, x)?)
            })
        }
        "mul" => {
            let c = rand(&s, rng);
            check_op(&s, &s, rng, h, tol, |t, x| {
                let c = t.constant(c.clone());
                let y = t.mul(x, c)?;
                Ok(t.mul(y, x)?)
            })
        }
        "relu" => check_op(&s, &s, rng, h, tol, |t, x| Ok(t.relu(x))),
        "gelu" => check_op(&s, &s, rng, h, tol, |t, x| Ok(t.gelu(x))),
        "sigmoid" => check_op(&s, &s, rng, h, tol, |t, x| Ok(t.sigmoid(x))),
        "scale" => check_op(&s, &s, rng, h, tol, |t, x| Ok(t.scale(x, -1.7))),
        "matmul" => {
            let c = rand(&[2, 4, 5], rng);
            check_op(&s, &[2, 3, 5], rng, h, tol, |t, x| {
                let c = t.constant(c.clone());
                Ok(t.matmul(x, c)?)
            })
        }
        "matmul_shared_rhs" => {
            let c = rand(&s, rng);
            check_op(&[4, 5], &[2, 3, 5], rng, h, tol, |t, x| {
                let c = t.constant(c.clone());
                Ok(t.matmul(c, x)?)
            })
        }
        "linear" => {
            let w = rand(&[4, 5], rng);
            check_op(&s, &[2, 3, 5], rng, h, tol, |t, x| {
                let w = t.constant(w.clone());
                Ok(t.linear(x, w)?)
            })
        }
        "linear_weight" => {
            let a = rand(&s, rng);
            check_op(&[4, 5], &[2, 3, 5], rng, h, tol, |t, w| {
                let a = t.constant(a.clone());
                Ok(t.linear(a, w)?)
            })
        }
        "conv2d_same" => {
            let w = rand(&[3, 3, 2, 3], rng);
            check_op(&[2, 5, 5, 2], &[2, 5, 5, 3], rng, h, tol, |t, x| {
                let w = t.constant(w.clone());
                Ok(t.conv2d(x, w, 1, Padding::Same)?)
            })
        }
        "conv2d_valid_stride2" => {
            let w = rand(&[3, 3, 2, 3], rng);
            check_op(&[1, 7, 6, 2], &[1, 3, 2, 3], rng, h, tol, |t, x| {
                let w = t.constant(w.clone());
                Ok(t.conv2d(x, w, 2, Padding::Valid)?)
            })
        }
        "conv2d_weight" => {
            let x = rand(&[2, 4, 4, 2], rng);
            check_op(&[3, 3, 2, 3], &[2, 2, 2, 3], rng, h, tol, |t, w| {
                let x = t.constant(x.clone());
                Ok(t.conv2d(x, w, 2, Padding::Same)?)
            })
        }
        "depthwise_conv2d" => {
            let w = rand(&[3, 3, 3], rng);
            check_op(&[2, 5, 4, 3], &[2, 5, 4, 3], rng, h, tol, |t, x| {
                let w = t.constant(w.clone());
                Ok(t.depthwise_conv2d(x, w, 1, Padding::Same)?)
            })
        }
        "depthwise_conv2d_stride2" => {
            let w = rand(&[3, 3, 3], rng);
            check_op(&[1, 6, 6, 3], &[1, 3, 3, 3], rng, h, tol, |t, x| {
                let w = t.constant(w.clone());
                Ok(t.depthwise_conv2d(x, w, 2, Padding::Same)?)
            })
        }
        "depthwise_weight" => {
            let x = rand(&[2, 4, 4, 3], rng);
            check_op(&[3, 3, 3], &[2, 4, 4, 3], rng, h, tol, |t, w| {
                let x = t.constant(x.clone());
                Ok(t.depthwise_conv2d(x, w, 1, Padding::Same)?)
            })
        }
        "softmax" => check_op(&s, &s, rng, h, tol, |t, x| Ok(t.softmax(x, 2)?)),
        "layer_norm" => {
            let (g, b) = (rand(&[4], rng), rand(&[4], rng));
            check_op(&s, &s, rng, h, tol, |t, x| {
                let g = t.constant(g.clone());
                let b = t.constant(b.clone());
                Ok(t.layer_norm(x, g, b, 1e-5)?)
            })
        }
        "layer_norm_gamma" => {
            let (x, b) = (rand(&s, rng), rand(&[4], rng));
            check_op(&[4], &s, rng, h, tol, |t, g| {
                let x = t.constant(x.clone());
                let b = t.constant(b.clone());
                Ok(t.layer_norm(x, g, b, 1e-5)?)
            })
        }
        "dropout" => check_op(&s, &s, rng, h, tol, |t, x| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            Ok(t.dropout(x, 0.3, &mut mask_rng)?)
        }),
        "concat" => {
            let c = rand(&[2, 3, 2], rng);
            check_op(&s, &[2, 3, 6], rng, h, tol, |t, x| {
                let c = t.constant(c.clone());
                Ok(t.concat(&[c, x], 2)?)
            })
        }
        "reshape" => check_op(&s, &[6, 4], rng, h, tol, |t, x| Ok(t.reshape(x, &[6, 4])?)),
        "transpose" => check_op(&s, &[4, 2, 3], rng, h, tol, |t, x| Ok(t.transpose(x, &[2, 0, 1])?)),
        "slice" => check_op(&s, &[2, 2, 4], rng, h, tol, |t, x| Ok(t.slice(x, 1, 1, 3)?)),
        "sum" => check_op(&s, &[2, 4], rng, h, tol, |t, x| Ok(t.sum(x, 1)?)),
        "mean" => check_op(&s, &[3, 4], rng, h, tol, |t, x| Ok(t.mean(x, 0)?)),
        "mean_all" => check_op(&s, &[1], rng, h, tol, |t, x| Ok(t.mean_all(x)?)),
        "add_trailing" => {
            let a = rand(&s, rng);
            check_op(&[4], &s, rng, h, tol, |t, b| {
                let a = t.constant(a.clone());
                Ok(t.add_trailing(a, b)?)
            })
        }
        "mul_trailing" => {
            let a = rand(&s, rng);
            check_op(&[4], &s, rng, h, tol, |t, g| {
                let a = t.constant(a.clone());
                let y = t.mul_trailing(a, g)?;
                Ok(t.mul_trailing(y, g)?)
            })
        }
        "expand_leading" => check_op(&[3, 4], &[2, 3, 4], rng, h, tol, |t, x| Ok(t.expand_leading(x, &[2])?)),
        "weighted_log_loss" => {
            let labels = Tensor::from_fn(&[4, 6], |i| ((i * 7 + 3) % 5 < 2) as u8 as f64);
            let w = LabelWeights::standard(6)?;
            let x = rand(&[4, 6], rng);
            grad_check(
                |t: &mut Tape, x: Var| -> Result<Var> {
                    let p = t.sigmoid(x);
                    Ok(weighted_log_loss(t, p, &labels, &w, DEFAULT_EPS)?)
                },
                &x,
                h,
                tol,
            )
        }
        "attention" => {
            let ws: Vec<Tensor> = (0..4).map(|_| rand(&[6, 6], rng)).collect();
            let mha = MultiHeadAttention::new(6, 2)?;
            check_op(&[2, 4, 6], &[2, 4, 6], rng, h, tol, |t, x| {
                let v: Vec<Var> = ws.iter().map(|w| t.constant(w.clone())).collect();
                let w = AttentionWeights {
                    wq: v[0],
                    wk: v[1],
                    wv: v[2],
                    wo: v[3],
                };
                Ok(mha.forward(t, x, &w)?.0)
            })
        }
        "scopeformer_input" => check_model(seed, h, tol, Probe::Input),
        "scopeformer_backbone_weight" => check_model(seed, h, tol, Probe::Param("bb1.s1.b0.dw")),
        "scopeformer_attention_weight" => check_model(seed, h, tol, Probe::Param("vit.block0.attn.wq")),
        other => Err(Error::Geometry(format!("unknown gradcheck case `{other}`"))),
    }
}

/// Runs every case in [`CASES`].
pub fn run_all(seed: u64, h: f64, tol: f64) -> Result<Vec<CaseResult>> {
    CASES
        .iter()
        .map(|&name| Ok(CaseResult {
            name,
            report: run_case(name, seed, h, tol)?,
        }))
        .collect()
}
