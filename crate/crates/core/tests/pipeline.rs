//! End-to-end run on a tiny dataset: generate, store, train, segment, fine-tune.

use groundlab::data::{gen_shapes, load_dataset, save_dataset, ShapesConfig};
use groundlab::flow::{fm_validation_loss, LossReport, OptimizerConfig, Trainer};
use groundlab::magnet::{finetune, MagnetConfig};
use groundlab::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelState};
use groundlab::segment::{evaluate_unsup, rank_expert_layers, sweep, SegmentConfig};

fn tiny_data(n: usize) -> groundlab::data::Dataset {
    gen_shapes(&ShapesConfig {
        image_size: 24,
        num_samples: n,
        text_len: 8,
        seed: 11,
        ..ShapesConfig::default()
    })
    .unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        num_layers: 3,
        num_heads: 2,
        model_dim: 16,
        head_dim: 8,
        grid_h: 12,
        grid_w: 12,
        text_len: 8,
        vocab_size: 16,
        ..ModelConfig::default()
    }
}

#[test]
fn tiny_pipeline() {
    let data = tiny_data(12);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.samples, data.samples);
    assert_eq!(loaded.manifest, data.manifest);

    let state = ModelState::<f64>::init(&tiny_model(), 3).unwrap();
    let examples = data.train_examples::<f64>();
    let opt = OptimizerConfig {
        batch_size: 4,
        ..OptimizerConfig::default()
    };
    let mut trainer = Trainer::new(state, opt, 3).unwrap();
    let mut report = LossReport::default();
    trainer.train_steps(&examples, 4, &mut report).unwrap();
    assert_eq!(report.records.len(), 4);
    assert!(report.records.iter().all(|r| r.loss.is_finite()));

    let ckpt = dir.path().join("ckpt.s4dt");
    save_checkpoint(&trainer.state, &ckpt).unwrap();
    let state = load_checkpoint::<f64>(&ckpt).unwrap();
    assert_eq!(state, trainer.state);
    assert!(fm_validation_loss(&state, &examples, 0).unwrap().is_finite());

    let seg = SegmentConfig::default();
    let rows = sweep(&state, &data, &[0, 1, 2], &[0.2, 0.5], true, &seg).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 3);
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.scores.miou));
    }
    let ranking = rank_expert_layers(&state, &data, &seg).unwrap();
    assert_eq!(ranking.ranking.len(), 3);
    assert!(ranking.ranking.windows(2).all(|w| w[0].miou >= w[1].miou));

    let unsup = evaluate_unsup(&state, &data, ranking.expert, 0.5, &seg).unwrap();
    assert!((0.0..=1.0).contains(&unsup.miou));

    let cfg = MagnetConfig {
        expert_layer: ranking.expert,
        ..MagnetConfig::default()
    };
    let (tuned, rep) = finetune(state.clone(), &data, &cfg, 2).unwrap();
    assert_eq!(rep.records.len(), 2);
    assert_eq!(tuned.params, state.params, "base weights stay frozen");
    assert!(!tuned.lora.is_empty());
}
