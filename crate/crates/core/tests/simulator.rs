use dpexplore::schema::{finest_division, validate_division, AttributeSchema, Column, Schema};
use dpexplore::simulator::{repair_psd, spearman, spearman_to_latent, SimulationModel};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn two_numeric() -> Schema {
    Schema::new(vec![
        AttributeSchema::numerical("x", 0.0, 10.0, 1.0, false).unwrap(),
        AttributeSchema::numerical("y", 0.0, 100.0, 10.0, false).unwrap(),
        AttributeSchema::categorical("g", &["p", "q", "r"], false).unwrap(),
    ])
    .unwrap()
}

fn finest_frequencies(data: &dpexplore::Dataset, attr: &str) -> Vec<f64> {
    let schema = data.schema();
    let layout = validate_division(&finest_division(&[attr], schema).unwrap(), schema).unwrap();
    let counts = dpexplore::schema::count_cells(data, &finest_division(&[attr], schema).unwrap()).unwrap();
    assert_eq!(counts.counts().len(), layout.n_cells());
    counts.counts().iter().map(|&c| c as f64 / data.n() as f64).collect()
}

#[test]
fn latent_correlation_for_spearman_half() {
    let r = spearman_to_latent(0.5);
    assert!((r - 0.517_638).abs() < 1e-6, "{r}");
    assert_eq!(spearman_to_latent(0.0), 0.0);
    assert!((spearman_to_latent(1.0) - 1.0).abs() < 1e-12);
}

#[test]
fn copula_reproduces_rank_correlation_and_marginals() {
    let schema = two_numeric();
    let x = vec![0.02, 0.05, 0.08, 0.15, 0.2, 0.2, 0.15, 0.08, 0.05, 0.02];
    let y = vec![0.3, 0.2, 0.15, 0.1, 0.08, 0.07, 0.04, 0.03, 0.02, 0.01];
    let g = vec![0.5, 0.3, 0.2];
    let model = SimulationModel::build(
        &schema,
        &[x.clone(), y.clone(), g.clone()],
        &[("x".into(), "y".into(), 0.5)],
        10_000,
        42,
    )
    .unwrap();
    assert!((model.latent_corr[0][1] - 0.517_638).abs() < 1e-6);
    let data = model.sample();
    assert_eq!(data.n(), 10_000);
    let (Column::Numerical(xs), Column::Numerical(ys)) = (data.column(0), data.column(1)) else { panic!() };
    let rho = spearman(xs, ys);
    assert!((rho - 0.5).abs() <= 0.05, "spearman {rho}");
    for (attr, target) in [("x", &x), ("y", &y), ("g", &g)] {
        let l1: f64 = finest_frequencies(&data, attr).iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 <= 0.03, "{attr}: L1 {l1}");
    }
    // Deterministic under the seed.
    assert_eq!(model.sample().column(0), data.column(0));
}

proptest! {
    #[test]
    fn repaired_matrices_are_valid_correlations(vals in prop::collection::vec(-1.0f64..=1.0, 6)) {
        let mut c = vec![vec![1.0; 4]; 4];
        let mut k = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                c[i][j] = vals[k];
                c[j][i] = vals[k];
                k += 1;
            }
        }
        let r = repair_psd(&c);
        let m = DMatrix::from_fn(4, 4, |i, j| r[i][j]);
        for i in 0..4 {
            prop_assert!((r[i][i] - 1.0).abs() < 1e-9);
            for j in 0..4 {
                prop_assert!((r[i][j] - r[j][i]).abs() < 1e-9);
                prop_assert!(r[i][j].abs() <= 1.0 + 1e-9);
            }
        }
        let min = m.symmetric_eigen().eigenvalues.min();
        prop_assert!(min > -1e-9, "min eigenvalue {min}");
    }

    #[test]
    fn default_models_sample_valid_records(seed in any::<u64>(), n in 0usize..300) {
        let model = SimulationModel::with_defaults(&two_numeric(), n, seed);
        let data = model.sample();
        prop_assert_eq!(data.n(), n);
        for m in &model.marginals {
            prop_assert!((m.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
