use fedyoyo::config::{DataConfig, ExperimentConfig, Variant};
use fedyoyo::dataset::{dirichlet_partition, generate_synthetic, longtail_counts};
use fedyoyo::federation::run_experiment;
use proptest::prelude::*;

#[test]
fn concentrated_dirichlet_tracks_global_proportions() {
    let counts = longtail_counts(10, 500, 10.0).unwrap();
    let total: usize = counts.iter().sum();
    let global: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let seeds = 5;
    let mut mean = vec![vec![0.0; 10]; 5];
    for seed in 0..seeds {
        let ds = generate_synthetic(10, &counts, 4, 3.0, seed).unwrap();
        let part = dirichlet_partition(&ds, 5, 1000.0, seed).unwrap();
        for (k, row) in mean.iter_mut().enumerate() {
            let size = part.client_size(k) as f64;
            for (c, m) in row.iter_mut().enumerate() {
                *m += part.client_class_counts(k)[c] as f64 / size / seeds as f64;
            }
        }
    }
    for row in &mean {
        for (m, g) in row.iter().zip(&global) {
            assert!((m - g).abs() <= 0.2 * g, "client proportion {m} vs global {g}");
        }
    }
}

#[test]
fn well_separated_mixture_is_linearly_separable() {
    let mut cfg = ExperimentConfig::default();
    cfg.data = DataConfig {
        class_sep: 10.0,
        n_max: 100,
        imbalance_factor: 1.0,
        test_per_class: 50,
        num_clients: 1,
        ..DataConfig::default()
    };
    cfg.model.extractor_dims = vec![];
    cfg.train.clients_per_round = 1;
    cfg.train.rounds = 5;
    let data = cfg.data.generate(3).unwrap();
    let res = run_experiment(&cfg.train_config(Variant::FedAvg).unwrap(), &data).unwrap();
    let acc = res.final_metrics().acc_all;
    assert!(acc > 0.95, "held-out linear probe accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partitions_conserve_class_counts(
        k in 1usize..8,
        alpha in 0.05f64..50.0,
        imbalance in 1.0f64..50.0,
        seed in 0u64..1000,
    ) {
        let counts = longtail_counts(5, 40, imbalance).unwrap();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        let ds = generate_synthetic(5, &counts, 3, 2.0, seed).unwrap();
        let part = dirichlet_partition(&ds, k, alpha, seed).unwrap();
        let mut seen = vec![false; ds.len()];
        for client in 0..k {
            for &i in part.client_indices(client) {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        for c in 0..5 {
            let sum: usize = (0..k).map(|client| part.client_class_counts(client)[c]).sum();
            prop_assert_eq!(sum, counts[c]);
        }
    }
}
