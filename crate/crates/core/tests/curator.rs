use std::sync::Arc;

use dpexplore::curator::{laplace_from_uniform, sample_instance, sample_laplace, Curator, DataRequest, NoisyResponse};
use dpexplore::schema::{count_cells, finest_division, AttributeSchema, Column, Dataset, Schema, ValueDivision, SetDivision, Partition};
use dpexplore::BudgetLedger;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quantile_abs(draws: &mut [f64], q: f64) -> f64 {
    draws.iter_mut().for_each(|x| *x = x.abs());
    draws.sort_by(f64::total_cmp);
    draws[((q * draws.len() as f64).ceil() as usize).min(draws.len()) - 1]
}

#[test]
fn inverse_cdf_matches_closed_form_quantiles() {
    // P(|X| > t) = exp(-t / b): the |X| = ln 20 · b point sits at u = 0.025 and 0.975.
    let b = 2.0;
    assert!((laplace_from_uniform(b, 0.975) - 20f64.ln() * b).abs() < 1e-12);
    assert!((laplace_from_uniform(b, 0.025) + 20f64.ln() * b).abs() < 1e-12);
    assert_eq!(laplace_from_uniform(b, 0.5), 0.0);
}

#[test]
fn laplace_quantiles_at_two_budgets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (eps, expected) in [(1.0, 2.995_732), (0.5, 5.991_465)] {
        let mut d: Vec<f64> = (0..100_000).map(|_| sample_laplace(1.0 / eps, &mut rng)).collect();
        let q = quantile_abs(&mut d, 0.95);
        assert!((q / expected - 1.0).abs() < 0.03, "eps {eps}: {q}");
    }
}

fn toy() -> Dataset {
    let schema = Schema::new(vec![
        AttributeSchema::numerical("x", 0.0, 4.0, 1.0, true).unwrap(),
        AttributeSchema::categorical("c", &["a", "b"], false).unwrap(),
    ])
    .unwrap();
    Dataset::new(
        schema,
        vec![Column::Numerical(vec![0.5, 1.5, 3.9, 4.0, 2.2, 0.1]), Column::Categorical(vec![0, 1, 1, 0, 0, 1])],
    )
    .unwrap()
}

#[test]
fn failed_charge_issues_nothing() {
    let data = Arc::new(toy());
    let mut curator = Curator::with_seed(data.clone(), 1);
    let mut ledger = BudgetLedger::new(1.0).unwrap();
    let req = DataRequest::new(finest_division(&["x"], data.schema()).unwrap(), 1.5);
    let before = ledger.clone();
    assert!(curator.execute(&req, &mut ledger, "r1").is_err());
    assert_eq!(ledger, before);
    // The noise stream was not advanced by the rejection.
    let ok = DataRequest::new(finest_division(&["x"], data.schema()).unwrap(), 0.5);
    let a = curator.execute(&ok, &mut ledger, "r2").unwrap();
    let mut fresh = Curator::with_seed(data, 1);
    let b = fresh.execute(&ok, &mut BudgetLedger::new(1.0).unwrap(), "r2").unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn invalid_division_charges_nothing() {
    let data = Arc::new(toy());
    let mut curator = Curator::with_seed(data, 1);
    let mut ledger = BudgetLedger::new(1.0).unwrap();
    let bad = DataRequest::new(
        SetDivision::new(vec![ValueDivision { attribute: "x".into(), partition: Partition::Intervals(vec![[0.0, 1.5], [1.5, 4.0]]) }]),
        0.5,
    );
    assert!(curator.execute(&bad, &mut ledger, "r1").is_err());
    assert_eq!(ledger.epsilon_remain(), 1.0);
}

#[test]
fn identical_requests_give_distinct_responses() {
    let data = Arc::new(toy());
    let mut curator = Curator::with_seed(data.clone(), 5);
    let mut ledger = BudgetLedger::new(1.0).unwrap();
    let req = DataRequest::new(finest_division(&["x", "c"], data.schema()).unwrap(), 0.4);
    let a = curator.execute(&req, &mut ledger, "r1").unwrap();
    let b = curator.execute(&req, &mut ledger, "r2").unwrap();
    assert_ne!(a.values, b.values);
    assert_eq!(a.shape, vec![4, 2]);
    assert!((ledger.epsilon_remain() - 0.2).abs() < 1e-12);
}

#[test]
fn noise_removed_instances_center_on_the_noisy_value() {
    let response = NoisyResponse {
        id: "r".into(),
        request: DataRequest::new(SetDivision::new(vec![]), 1.0),
        shape: vec![1],
        values: vec![50.0],
        issued_at: chrono::Utc::now(),
        simulated: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mean = (0..100_000).map(|_| sample_instance(&response, &mut rng)[0]).sum::<f64>() / 100_000.0;
    assert!((mean - 50.0).abs() < 0.05, "{mean}");
}

proptest! {
    /// Cell counts of any lattice-aligned division add up to the record count.
    #[test]
    fn counts_partition_the_records(
        xs in prop::collection::vec(0.0f64..=4.0, 0..200),
        cuts in prop::collection::btree_set(1usize..4, 0..3),
    ) {
        let schema = toy().schema().clone();
        let n = xs.len();
        let data = Dataset::new(schema.clone(), vec![Column::Numerical(xs), Column::Categorical(vec![0; n])]).unwrap();
        let mut bounds = vec![0.0];
        bounds.extend(cuts.iter().map(|&c| c as f64));
        bounds.push(4.0);
        let intervals = bounds.windows(2).map(|w| [w[0], w[1]]).collect();
        let div = SetDivision::new(vec![
            ValueDivision { attribute: "x".into(), partition: Partition::Intervals(intervals) },
            ValueDivision::finest(schema.get("c").unwrap()),
        ]);
        let counts = count_cells(&data, &div).unwrap();
        prop_assert_eq!(counts.total(), n as u64);
    }
}
