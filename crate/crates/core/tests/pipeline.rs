use qdnn_core::checkpoint::{load_checkpoint, save_checkpoint};
use qdnn_core::eval::{evaluate_accuracy, predict_map};
use qdnn_core::experiment::{finetune_model, pretrain_model, retrain_model, Recipe};
use qdnn_core::{DatasetSpec, EvalSet, LabeledDataset, ModelConfig, QuantSpec, Window};

fn small() -> (LabeledDataset, EvalSet, Recipe) {
    let spec = DatasetSpec {
        ring_count: 1,
        points_per_semicircle: 60,
        subsamples_per_core: 4,
        ..DatasetSpec::default()
    };
    let data = LabeledDataset::generate(&spec).unwrap();
    let eval = EvalSet::generate(&spec, 40.0).unwrap();
    let mut recipe = Recipe::desk();
    recipe.pretrain.epochs = 60;
    recipe.pretrain.batch_size = 32;
    recipe.retrain.epochs = 10;
    recipe.retrain.batch_size = 32;
    recipe.clr_cycle_epochs = 1;
    recipe.clr_cycles = 2;
    (data, eval, recipe)
}

#[test]
fn train_quantize_finetune_and_reload() {
    let (data, eval, recipe) = small();
    let (float, log) = pretrain_model(ModelConfig::new(16, 3), 0, &recipe, &data, &eval).unwrap();
    assert_eq!(log.rows().len(), 60);
    let float_acc = evaluate_accuracy(&float, &eval, false).unwrap();
    assert!(float_acc > 85.0, "float accuracy {float_acc}");

    let (quant, _) = retrain_model(&float, QuantSpec::both(4, 4), 0.0, 0, &recipe, &data, &eval).unwrap();
    let q = quant.quant.as_ref().unwrap();
    assert_eq!(q.layers.len(), 3);
    assert!(q.layers.iter().all(|l| l.delta > 0.0));
    assert!(q.layers[..2].iter().all(|l| l.alpha > 0.0));
    let quant_acc = evaluate_accuracy(&quant, &eval, true).unwrap();

    let (tuned, clr_log) = finetune_model(quant.clone(), 1e-4, 0, &recipe, &data, &eval).unwrap();
    assert_eq!(clr_log.rows().len(), 2);
    assert!(clr_log.rows().iter().all(|r| r.lip_loss > 0.0));
    assert!(evaluate_accuracy(&tuned, &eval, true).unwrap() >= quant_acc);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tuned.json");
    save_checkpoint(&tuned, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, tuned);
    let window = Window::full();
    let a = predict_map(&tuned, window, (30, 30), true).unwrap();
    let b = predict_map(&back, window, (30, 30), true).unwrap();
    assert_eq!(a.labels, b.labels);
}

#[test]
fn same_seed_same_model() {
    let (data, eval, mut recipe) = small();
    recipe.pretrain.epochs = 3;
    let a = pretrain_model(ModelConfig::new(8, 3).residual(true), 4, &recipe, &data, &eval).unwrap();
    let b = pretrain_model(ModelConfig::new(8, 3).residual(true), 4, &recipe, &data, &eval).unwrap();
    assert_eq!(a.0, b.0);
    let c = pretrain_model(ModelConfig::new(8, 3).residual(true), 5, &recipe, &data, &eval).unwrap();
    assert_ne!(a.0, c.0);
}
