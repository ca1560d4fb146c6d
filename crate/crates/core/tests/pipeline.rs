//! End-to-end pipeline integration: pretrain, decompose, fine-tune with QR
//! and fading, reparameterize, and check the stitched-together archives.

use emtal_core::archive::{archive_bytes, read_archive_bytes};
use emtal_core::config::{DataSource, ModelDims, RunConfig};
use emtal_core::linalg::{Matrix, Rng};
use emtal_core::model::{
    bank_from_tensors, bank_tensors, evaluate, train, ClusterFeatures, PartitionStrategy, Phase,
    ToyNet,
};
use emtal_core::taskdata::{generate_synthetic, load_dataset};

fn small_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelDims {
        d_in: 8,
        d: 16,
        h: 32,
        blocks: 2,
    };
    cfg.k = 4;
    cfg.rank = 2;
    cfg.optimizer.epochs = 16;
    cfg.optimizer.warmup_epochs = 2;
    cfg.fading = Some(emtal_core::config::FadingConfig {
        start_epoch: 8,
        end_epoch: 16,
    });
    cfg.qr.enabled_after_epoch = Some(8);
    if let DataSource::Synthetic(spec) = &mut cfg.data.source {
        for t in &mut spec.tasks {
            t.train_per_class = 8;
            t.test_per_class = 6;
        }
    }
    cfg.seed = seed;
    cfg
}

#[test]
fn full_pipeline_through_archives() {
    let cfg = small_cfg(5);
    let (train_set, test_set, space) = load_dataset(&cfg.data, cfg.model.d_in, cfg.seed).unwrap();

    // pretrain
    let mut pre_cfg = cfg.clone();
    pre_cfg.qr.enabled_after_epoch = Some(pre_cfg.optimizer.epochs);
    let mut dense: ToyNet<f32> = {
        let mut rng = Rng::substream(cfg.seed, "init");
        ToyNet::init_dense(&cfg.model, space.n_class(), &mut rng)
    };
    train(&mut dense, &train_set, &space, &pre_cfg).unwrap();
    let dense_bytes = archive_bytes(&dense.to_tensors(), &dense.meta()).unwrap();

    // moefy from the archive
    let (tensors, meta) = read_archive_bytes(&dense_bytes).unwrap();
    let loaded: ToyNet<f32> = ToyNet::from_tensors(&tensors, &meta).unwrap();
    assert!(!loaded.embed_trainable);
    let mole = loaded
        .moefy(
            cfg.k,
            cfg.rank,
            cfg.tau,
            PartitionStrategy::BalancedKmeans,
            ClusterFeatures::Stacked,
            15,
            cfg.seed,
        )
        .unwrap();
    let moefied_bytes = archive_bytes(&mole.to_tensors(), &mole.meta()).unwrap();

    // train from the moefied archive
    let (tensors, meta) = read_archive_bytes(&moefied_bytes).unwrap();
    let mut trainee: ToyNet<f32> = ToyNet::from_tensors(&tensors, &meta).unwrap();
    let report = train(&mut trainee, &train_set, &space, &cfg).unwrap();
    assert_eq!(report.final_alpha, 0.0);
    assert_eq!(trainee.alpha(), Some(0.0));

    // bank round-trips alongside the weights
    let mut trained_tensors = trainee.to_tensors();
    for (name, t) in bank_tensors(&report.bank) {
        trained_tensors.insert(name, t);
    }
    let trained_bytes = archive_bytes(&trained_tensors, &trainee.meta()).unwrap();
    let (tensors, meta) = read_archive_bytes(&trained_bytes).unwrap();
    let bank_back = bank_from_tensors::<f32>(&tensors, cfg.qr.momentum).unwrap();
    assert_eq!(bank_back, report.bank);

    // reparameterize and compare logits on the full test set
    let reloaded: ToyNet<f32> = ToyNet::from_tensors(&tensors, &meta).unwrap();
    assert_eq!(reloaded.alpha(), Some(0.0));
    let dense_final = reloaded.reparameterize().unwrap();
    assert_eq!(dense_final.phase(), Phase::Dense);
    let all: Vec<usize> = (0..test_set.len()).collect();
    let (x, _, _) = test_set.gather::<f32>(&all);
    let delta = reloaded
        .forward(&x)
        .unwrap()
        .max_abs_diff(&dense_final.forward(&x).unwrap());
    assert!(delta < 1e-5, "reparameterized logits diverge: {delta}");

    // the reparameterized net still evaluates sensibly
    let acc = evaluate(&dense_final, &test_set, &space).unwrap();
    assert_eq!(acc.len(), space.n_tasks());
    assert!(acc.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn contiguous_and_up_only_paths_preserve_the_identity() {
    let cfg = small_cfg(9);
    let spec = match &cfg.data.source {
        DataSource::Synthetic(s) => s.clone(),
        _ => unreachable!(),
    };
    let (_, test_set, space) = generate_synthetic(&spec, cfg.model.d_in, cfg.seed).unwrap();
    let mut rng = Rng::substream(cfg.seed, "init");
    let dense: ToyNet<f32> = ToyNet::init_dense(&cfg.model, space.n_class(), &mut rng);
    let all: Vec<usize> = (0..test_set.len()).collect();
    let (x, _, _) = test_set.gather::<f32>(&all);
    let reference = dense.forward(&x).unwrap();

    for (strategy, features) in [
        (PartitionStrategy::Contiguous, ClusterFeatures::Stacked),
        (PartitionStrategy::BalancedKmeans, ClusterFeatures::UpOnly),
    ] {
        let mole = dense
            .moefy(cfg.k, cfg.rank, cfg.tau, strategy, features, 10, cfg.seed)
            .unwrap();
        let out = mole.forward(&x).unwrap();
        assert!(
            emtal_core::linalg::rel_err_rows(&reference, &out) < 1e-5,
            "{strategy:?}/{features:?}"
        );
        if strategy == PartitionStrategy::Contiguous {
            for block in &mole.blocks {
                if let emtal_core::model::BlockKind::Mole(m) = block {
                    let h = m.k() * m.cluster_size();
                    assert_eq!(m.partition.permutation, (0..h).collect::<Vec<_>>());
                }
            }
        }
    }
}

#[test]
fn training_rejects_mismatched_configs() {
    let cfg = small_cfg(3);
    let (train_set, _, space) = load_dataset(&cfg.data, cfg.model.d_in, cfg.seed).unwrap();
    // head sized for the wrong class count
    let mut rng = Rng::new(0);
    let mut wrong: ToyNet<f32> = ToyNet::init_dense(&cfg.model, space.n_class() + 1, &mut rng);
    assert!(train(&mut wrong, &train_set, &space, &cfg).is_err());

    // K not dividing H
    let mut bad_cfg = cfg.clone();
    bad_cfg.k = 5;
    assert!(bad_cfg.validate().is_err());
}

#[test]
fn csv_data_source_feeds_training() {
    let dir = std::env::temp_dir().join(format!("emtal-pipe-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    // two tiny tasks, 3 features each
    let t0_train = dir.join("t0_train.csv");
    let t0_test = dir.join("t0_test.csv");
    let t1_train = dir.join("t1_train.csv");
    let t1_test = dir.join("t1_test.csv");
    std::fs::write(&t0_train, "1.0,0.0,0.0,0\n0.9,0.1,0.0,0\n0.0,1.0,0.0,1\n0.1,0.9,0.0,1\n")
        .unwrap();
    std::fs::write(&t0_test, "0.95,0.0,0.0,0\n0.0,0.95,0.0,1\n").unwrap();
    std::fs::write(&t1_train, "0.0,0.0,1.0,0\n0.0,0.1,0.9,0\n1.0,1.0,1.0,1\n0.9,1.0,1.1,1\n")
        .unwrap();
    std::fs::write(&t1_test, "0.0,0.0,1.05,0\n1.0,0.95,1.0,1\n").unwrap();

    let cfg_json = format!(
        r#"{{
        "model": {{"d_in": 3, "D": 8, "H": 16, "blocks": 1}},
        "K": 4, "rank": 1, "tau": 5.0,
        "fading": {{"start_epoch": 4, "end_epoch": 8}},
        "qr": {{"momentum": 0.9, "weight_clamp": 0.05}},
        "optimizer": {{"lr": 0.01, "betas": [0.9, 0.999], "weight_decay": 0.0,
                      "epochs": 8, "warmup_epochs": 1}},
        "data": {{"batch_size": 4, "csv": {{"tasks": [
            {{"classes": 2, "train": "{}", "test": "{}"}},
            {{"classes": 2, "train": "{}", "test": "{}"}}
        ]}}}},
        "seed": 4
    }}"#,
        t0_train.display(),
        t0_test.display(),
        t1_train.display(),
        t1_test.display()
    );
    let cfg = RunConfig::from_json(&cfg_json).unwrap();
    let (train_set, test_set, space) = load_dataset(&cfg.data, cfg.model.d_in, cfg.seed).unwrap();
    assert_eq!(train_set.len(), 8);
    assert_eq!(test_set.len(), 4);
    assert_eq!(space.n_class(), 4);

    let mut rng = Rng::substream(cfg.seed, "init");
    let mut net: ToyNet<f32> = ToyNet::init_dense(&cfg.model, space.n_class(), &mut rng);
    let report = train(&mut net, &train_set, &space, &cfg).unwrap();
    assert_eq!(report.metrics.len(), 8);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn metrics_csv_shape_is_stable() {
    let cfg = small_cfg(7);
    let (train_set, _, space) = load_dataset(&cfg.data, cfg.model.d_in, cfg.seed).unwrap();
    let mut rng = Rng::substream(cfg.seed, "init");
    let mut net: ToyNet<f32> = ToyNet::init_dense(&cfg.model, space.n_class(), &mut rng);
    let report = train(&mut net, &train_set, &space, &cfg).unwrap();
    let csv = emtal_core::model::metrics_to_csv(&report.metrics, space.n_tasks());
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "epoch,lr,alpha,ce_t0,ce_t1,ce_t2,ce_t3,acc_t0,acc_t1,acc_t2,acc_t3,qr_loss,mean_acc"
    );
    let n_cols = header.split(',').count();
    for line in lines {
        assert_eq!(line.split(',').count(), n_cols);
    }
    // one row per epoch
    assert_eq!(csv.lines().count(), 1 + cfg.optimizer.epochs);
}

#[test]
fn matrix_and_svd_agree_with_independent_oracles_in_f64() {
    // Random 8x8 multiply against the naive j-outer triple loop.
    let mut rng = Rng::new(50);
    for _ in 0..10 {
        let a: Matrix<f64> = rng.normal_matrix(8, 8, 2.0);
        let b: Matrix<f64> = rng.normal_matrix(8, 8, 2.0);
        let c = a.matmul(&b).unwrap();
        for j in 0..8 {
            for i in 0..8 {
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }
    // Spectral energy preservation up to 64x64.
    for &(r, c) in &[(16usize, 16usize), (64, 64), (48, 64)] {
        let m: Matrix<f64> = rng.normal_matrix(r, c, 1.0);
        let sigma = emtal_core::linalg::svd_values(&m).unwrap();
        let energy: f64 = sigma.iter().map(|s| s * s).sum();
        let fro = m.frobenius_sq();
        assert!((energy - fro).abs() <= 1e-8 * fro);
    }
}
