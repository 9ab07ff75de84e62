mod common;

use common::glyph_dataset;
use fine_core::data::{Dataset, SplitSide};
use fine_core::model::{load_checkpoint, save_checkpoint, FineModel, ModelConfig};
use fine_core::seed::derive_seed;
use fine_core::train::{
    evaluate, export_phi, read_phi, run_ablation, train, AblationGrid, TrainConfig, TrainError,
};
use fine_core::transform::{Family, OodSide, SampleMode};

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        image_side: 8,
        embed_dim: 16,
        memories: 4,
        nice_layers: 2,
        seed,
        ..ModelConfig::default()
    }
}

fn translation_set(dir: &std::path::Path, name: &str, count: usize, split: SplitSide) -> Dataset {
    glyph_dataset(
        dir,
        name,
        &[Family::Translation],
        SampleMode::Constrained(OodSide::Train),
        count,
        8,
        split,
        7,
    )
}

#[test]
fn checkpoint_roundtrip_preserves_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = translation_set(dir.path(), "tr.json", 48, SplitSide::Train);
    let test_set = translation_set(dir.path(), "te.json", 40, SplitSide::Test);
    let mut model = FineModel::new(small_config(1)).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size_train: 16, ..TrainConfig::default() };
    train(&mut model, &train_set, &cfg).unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let a = evaluate(&model, &test_set, 7, 1).unwrap();
    let b = evaluate(&loaded, &test_set, 7, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn loss_curves_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = translation_set(dir.path(), "tr.json", 40, SplitSide::Train);
    let cfg = TrainConfig { epochs: 3, batch_size_train: 8, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut m = FineModel::new(small_config(2)).unwrap();
        let curve = train(&mut m, &data, &cfg).unwrap();
        (curve, m)
    };
    let (c1, m1) = run();
    let (c2, m2) = run();
    assert_eq!(c1, c2);
    assert_eq!(m1, m2);
    let other = {
        let mut m = FineModel::new(small_config(2)).unwrap();
        train(&mut m, &data, &TrainConfig { seed: 10, ..cfg.clone() }).unwrap()
    };
    assert_ne!(other, c1, "the shuffle seed should matter");
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data = translation_set(dir.path(), "tr.json", 10, SplitSide::Train);
    let mut model = FineModel::new(small_config(3)).unwrap();
    let before = model.clone();
    let curve = train(&mut model, &data, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
    assert!(curve.is_empty());
    assert_eq!(model, before);
}

#[test]
fn single_batch_overfits() {
    let dir = tempfile::tempdir().unwrap();
    let data = glyph_dataset(
        dir.path(),
        "easy.json",
        &[Family::Translation],
        SampleMode::Constrained(OodSide::Train),
        8,
        8,
        SplitSide::Train,
        21,
    );
    let mut model = FineModel::new(small_config(5)).unwrap();
    let cfg = TrainConfig { epochs: 500, batch_size_train: 8, lr: 1e-3, ..TrainConfig::default() };
    train(&mut model, &data, &cfg).unwrap();
    let rep = evaluate(&model, &data, 8, 0).unwrap();
    assert_eq!(rep.accuracy, 1.0, "{:?}", rep.predictions);
}

#[test]
fn evaluation_is_repeatable_and_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = translation_set(dir.path(), "te.json", 30, SplitSide::Test);
    let model = FineModel::new(small_config(6)).unwrap();
    let before = model.clone();
    let a = evaluate(&model, &data, 4, 0).unwrap();
    let b = evaluate(&model, &data, 30, 0).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(model, before);
}

#[test]
fn fresh_model_predicts_first_choice_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let data = glyph_dataset(dir.path(), "d.json", &Family::ALL, SampleMode::PaperGrid, 1000, 8, SplitSide::Test, 2);
    let model = FineModel::new(small_config(8)).unwrap();
    let rep = evaluate(&model, &data, 100, 0).unwrap();
    assert!(rep.predictions.iter().all(|&p| p == 0));
    assert!((rep.accuracy - 0.25).abs() <= 0.03, "{}", rep.accuracy);
    assert!((rep.loss_mean - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn identical_hints_give_identical_phi_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = translation_set(dir.path(), "d.json", 6, SplitSide::Train);
    let (x, y) = (data.tasks[0].x.clone(), data.tasks[0].y.clone());
    data.tasks[3].x = x;
    data.tasks[3].y = y;
    let mut model = FineModel::new(small_config(4)).unwrap();
    train(&mut model, &data, &TrainConfig { epochs: 1, batch_size_train: 3, ..TrainConfig::default() }).unwrap();
    let path = dir.path().join("phi.bin");
    assert_eq!(export_phi(&model, &data, &path, 4).unwrap(), 6);
    let rows = read_phi(&path).unwrap();
    assert_eq!(rows[0].phi, rows[3].phi);
    assert_ne!(rows[0].phi, rows[1].phi);
    assert_eq!(rows[0].phi.len(), model.config().phi_len());
}

#[test]
fn one_cell_grid_matches_a_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let tr = translation_set(dir.path(), "tr.json", 24, SplitSide::Train);
    let te = translation_set(dir.path(), "te.json", 20, SplitSide::Test);
    let base = small_config(0);
    let tcfg = TrainConfig { epochs: 2, batch_size_train: 8, seed: 3, ..TrainConfig::default() };
    let grid = AblationGrid { memories: vec![4], layers: vec![2], train_sizes: vec![24], repeats: 1 };
    let rows = run_ablation(&grid, &base, &tcfg, &tr, &te).unwrap();
    assert_eq!(rows.len(), 1);

    let seed = derive_seed(3, 0);
    let mut model = FineModel::new(ModelConfig { seed, ..base }).unwrap();
    train(&mut model, &tr, &TrainConfig { seed, ..tcfg }).unwrap();
    let rep = evaluate(&model, &te, 100, seed).unwrap();
    assert_eq!(rows[0].accuracy, rep.accuracy);
    assert_eq!(rows[0].cell_std, 0.0);
}

#[test]
fn divergence_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = translation_set(dir.path(), "tr.json", 16, SplitSide::Train);
    let mut model = FineModel::new(small_config(1)).unwrap();
    let err = train(&mut model, &data, &TrainConfig { epochs: 3, lr: 1e300, ..TrainConfig::default() }).unwrap_err();
    assert!(matches!(err, TrainError::Diverged { .. }), "{err:?}");
}
