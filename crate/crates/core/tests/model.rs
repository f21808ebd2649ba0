mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scopeformer::config::{MemberSpec, ModelConfig, ModelMode, RunConfig};
use scopeformer::data::synth_generate;
use scopeformer::loss::{weighted_log_loss, LabelWeights};
use scopeformer::model::{plan, Graph, Mode, Scopeformer};
use scopeformer::tensor::{Tape, Tensor};
use scopeformer::train::Trainer;

fn images(b: usize, side: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[b, side, side, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| 0.5 + 0.5 * v)
}

fn labels(b: usize) -> Tensor {
    Tensor::from_fn(&[b, 6], |i| ((i * 7 + 3) % 3 == 0) as u8 as f64)
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let model = Scopeformer::new(common::toy_model(2, None, 4, 16, 3)).unwrap();
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &model.params, Mode::Train).with_dropout_seed(1);
    let x = g.tape.constant(images(3, 16, 0));
    let logits = model.forward(&mut g, x).unwrap();
    let probs = g.tape.sigmoid(logits);
    let loss = weighted_log_loss(g.tape, probs, &labels(3), &LabelWeights::standard(6).unwrap(), 1e-7).unwrap();
    let bindings = g.into_bindings();
    tape.backward(loss).unwrap();

    let names: Vec<&str> = model.params.names().collect();
    assert_eq!(bindings.len(), names.len(), "every parameter is used in the forward pass");
    for name in names {
        let grad = tape.grad(bindings[name]).unwrap();
        let norm: f64 = grad.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0 && norm.is_finite(), "{name}: {norm}");
    }
}

#[test]
fn forward_shapes_and_probability_range() {
    let model = Scopeformer::new(common::toy_model(3, None, 0, 16, 0)).unwrap();
    let p = model.predict(&images(2, 16, 1)).unwrap();
    assert_eq!(p.shape(), &[2, 6]);
    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    // Eval mode is deterministic.
    assert!(p.bit_eq(&model.predict(&images(2, 16, 1)).unwrap()));
}

#[test]
fn raw_vit_runs_on_patches() {
    let cfg = ModelConfig {
        mode: ModelMode::RawVit,
        n_backbones: 0,
        backbone: None,
        reduce_channels: 0,
        vit: serde_json::from_value(serde_json::json!({
            "depth": 1, "latent_dim": 8, "heads": 2, "patch_size": 4
        }))
        .unwrap(),
        ..common::toy_model(1, None, 0, 16, 0)
    };
    let pl = plan(&cfg).unwrap();
    assert_eq!(pl.fused, [4, 4, 48]);
    assert_eq!(pl.tokens, 17);
    assert!(pl.backbone_maps.is_empty());
    let model = Scopeformer::new(cfg).unwrap();
    assert_eq!(model.params.numel(), pl.total_params());
    assert_eq!(model.predict(&images(2, 16, 2)).unwrap().shape(), &[2, 6]);
}

#[test]
fn equal_member_seeds_give_identical_backbones() {
    let model = Scopeformer::new(common::toy_model(2, Some(&[9, 9]), 0, 16, 0)).unwrap();
    for (name, p) in model.params.iter().filter(|(n, _)| n.starts_with("bb0.")) {
        let twin = model.params.value(&name.replacen("bb0.", "bb1.", 1)).unwrap();
        assert!(p.value.bit_eq(twin), "{name}");
    }
    let diverse = Scopeformer::new(common::toy_model(2, Some(&[9, 10]), 0, 16, 0)).unwrap();
    assert!(!diverse.params.value("bb0.stem.w").unwrap().bit_eq(diverse.params.value("bb1.stem.w").unwrap()));
}

#[test]
fn frozen_member_is_unchanged_by_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_generate(8, 16, 0, &dir.path().join("data")).unwrap();
    let mut model = common::toy_model(2, Some(&[1, 2]), 4, 16, 0);
    model.members[1] = MemberSpec {
        trainable: false,
        ..model.members[1].clone()
    };
    let cfg: RunConfig = common::run_config(model, &dir.path().join("run"), 3, 1e-2, 4);
    let mut t = Trainer::with_data(cfg, data, None).unwrap();
    let before = t.model.params.clone();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    let mut moved_live = false;
    for (name, p) in t.model.params.iter() {
        let old = before.get(name).unwrap();
        if name.starts_with("bb1.") {
            assert!(!p.trainable);
            assert!(p.value.bit_eq(&old.value), "{name} moved");
        } else if name.starts_with("bb0.") && !p.value.bit_eq(&old.value) {
            moved_live = true;
        }
    }
    assert!(moved_live);
}

#[test]
fn plan_counts_match_materialized_parameters() {
    for (n, reduce) in [(1, 0), (2, 4), (3, 8)] {
        let cfg = common::toy_model(n, None, reduce, 16, 0);
        let pl = plan(&cfg).unwrap();
        let model = Scopeformer::new(cfg).unwrap();
        assert_eq!(pl.total_params(), model.params.numel());
        assert_eq!(pl.backbone_maps, vec![[4, 4, 8]; n]);
        let c = if reduce == 0 { 8 } else { reduce };
        assert_eq!(pl.fused, [4, 4, n * c]);
    }
}

/// Hand count for the two-backbone 224px configuration shipped in `configs/`.
#[test]
fn paper_scale_plan_matches_hand_count() {
    let path = common::workspace_root().join("configs/paper_scale.json");
    let cfg = RunConfig::load(&path).unwrap();
    let pl = plan(&cfg.model).unwrap();

    let block = |cin: usize, cout: usize, proj: bool| 9 * cin + cin * cout + 2 * cout + if proj { cin * cout } else { 0 };
    let one_backbone = (9 * 3 * 32 + 2 * 32)
        + block(32, 32, false)
        + block(32, 128, true)
        + block(128, 256, true)
        + block(256, 728, true)
        + block(728, 728, false)
        + block(728, 1024, true);
    let d = 1456;
    let layer = 4 * d + 4 * d * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
    let vit = 2048 * d + 50 * d + d + 12 * layer + 2 * d + d * 6 + 6;

    assert_eq!(pl.backbone_maps, vec![[7, 7, 1024]; 2]);
    assert_eq!(pl.fused, [7, 7, 2048]);
    assert_eq!((pl.tokens, pl.latent_dim), (50, 1456));
    assert_eq!(pl.backbone_params, 2 * one_backbone);
    assert_eq!(pl.vit_params, vit);
}
