use csvit_core::tokenizer::{build_mask, gather, IndexTable};
use csvit_nn::data::planted_signal;
use csvit_nn::train::cross_validate;
use csvit_nn::{ModelConfig, SynthSpec, TrainConfig};

fn problem(subjects: usize, seed: u64) -> (csvit_core::PaddedBatch, Vec<u8>, ModelConfig) {
    let rows: Vec<Vec<usize>> = (0..20).map(|r| (4 * r..4 * r + 3 + r % 2).collect()).collect();
    let table = IndexTable::from_rows(&rows, None).unwrap();
    let spec = SynthSpec { subjects, seed, ..SynthSpec::default() };
    let ds = planted_signal(&table, 80, &spec).unwrap();
    let batch = gather(&ds.features, &table, &build_mask(&table)).unwrap();
    let cfg = ModelConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        channels: 2,
        num_tokens: 20,
        v_max: table.v_max(),
        dropout: 0.0,
        ..ModelConfig::default()
    };
    (batch, ds.labels, cfg)
}

fn train_cfg() -> TrainConfig {
    TrainConfig { epochs: 30, batch_size: 16, patience: 10, ..TrainConfig::default() }
}

#[test]
fn learns_planted_signal() {
    let (batch, labels, cfg) = problem(200, 1);
    let cv = cross_validate(&batch, &labels, &cfg, &train_cfg()).unwrap();
    assert_eq!(cv.report.folds.len(), 4);
    assert!(cv.report.auroc.mean > 0.9, "{}", cv.report.table());
}

#[test]
fn cross_validation_is_reproducible() {
    let (batch, labels, cfg) = problem(60, 2);
    let tc = TrainConfig { epochs: 4, ..train_cfg() };
    let a = cross_validate(&batch, &labels, &cfg, &tc).unwrap();
    let b = cross_validate(&batch, &labels, &cfg, &tc).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.fold_of, b.fold_of);
}

#[test]
fn single_class_folds_are_skipped() {
    let (batch, mut labels, cfg) = problem(40, 3);
    // Only two positives: at most two of four test folds contain one.
    let mut seen = 0;
    for y in labels.iter_mut() {
        if *y == 1 {
            seen += 1;
            if seen > 2 {
                *y = 0;
            }
        }
    }
    let tc = TrainConfig { epochs: 2, ..train_cfg() };
    let cv = cross_validate(&batch, &labels, &cfg, &tc).unwrap();
    assert!(cv.report.skipped_folds.len() >= 2);
    assert_eq!(cv.report.folds.len() + cv.report.skipped_folds.len(), 4);
}
