use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use dpexplore::demo;
use dpexplore::intent::IntentGraph;
use dpexplore::recommender::{budget_bonus, recommend, JobControl, PlannerInput, QConfig, RecommendError};
use dpexplore::schema::finest_division;
use dpexplore::session::{IntentSpec, Session};
use dpexplore::simulator::SimulationModel;
use dpexplore::{BudgetLedger, Curator, DataRequest, ProgressEstimate};

fn quick() -> QConfig {
    QConfig { episodes: 1500, ..QConfig::default() }
}

#[test]
fn budget_bonus_spot_values() {
    assert_eq!(budget_bonus(1.0, 1.0, 0.0, 1000, -0.1), 0.0);
    assert_eq!(budget_bonus(0.5, 2.0, 1.5, 1000, -0.1), -18.75);
    assert!(budget_bonus(1.0, 1.0, 0.5, 1000, -0.1) < 0.0);
}

#[test]
fn single_edge_takes_one_request_and_the_whole_budget() {
    let schema = demo::insurance_schema();
    let model = SimulationModel::with_defaults(&schema, 1000, 3);
    let intent = IntentGraph::from_parts::<&str>(&[], &[("claim_amount", "policy")], &schema).unwrap();
    let ledger = BudgetLedger::new(1.0).unwrap();
    let progress = ProgressEstimate::default();
    let input = PlannerInput { intent: &intent, model: &model, ledger: &ledger, progress: &progress };
    let top = recommend(input, &quick(), 1, JobControl::default()).unwrap();
    assert_eq!(top.len(), 1);
    let c = &top[0];
    assert_eq!(c.requests.len(), 1);
    assert_eq!(c.requests[0].division.attributes().collect::<Vec<_>>(), ["claim_amount", "policy"]);
    assert!((c.total_epsilon - 1.0).abs() < 1e-12);
    assert_eq!(c.budget_bonus, 0.0);
}

#[test]
fn planning_is_deterministic_under_the_seed() {
    let schema = demo::health_schema();
    let model = SimulationModel::with_defaults(&schema, demo::HEALTH_RECORDS, 9);
    let intent =
        IntentGraph::from_parts::<&str>(&[], &[("hepatitis_B", "family_c"), ("hepatitis_B", "elder_c")], &schema).unwrap();
    let ledger = BudgetLedger::new(2.0).unwrap();
    let progress = ProgressEstimate::default();
    let input = PlannerInput { intent: &intent, model: &model, ledger: &ledger, progress: &progress };
    let a = recommend(input, &quick(), 5, JobControl::default()).unwrap();
    let b = recommend(input, &quick(), 5, JobControl::default()).unwrap();
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0].score <= w[1].score));
    for c in &a {
        assert!(c.total_epsilon <= 2.0 + 1e-12);
        assert!(c.requests.iter().enumerate().all(|(i, r)| r.order == i));
    }
}

#[test]
fn empty_intent_and_spent_budget_are_errors() {
    let schema = demo::insurance_schema();
    let model = SimulationModel::with_defaults(&schema, 100, 0);
    let progress = ProgressEstimate::default();
    let empty = IntentGraph::new();
    let ledger = BudgetLedger::new(1.0).unwrap();
    let input = PlannerInput { intent: &empty, model: &model, ledger: &ledger, progress: &progress };
    assert_eq!(recommend(input, &quick(), 1, JobControl::default()), Err(RecommendError::EmptyIntent));

    let intent = IntentGraph::from_parts::<&str>(&["policy"], &[], &schema).unwrap();
    let mut spent = BudgetLedger::new(1.0).unwrap();
    spent.charge(1.0, "r1").unwrap();
    let input = PlannerInput { intent: &intent, model: &model, ledger: &spent, progress: &progress };
    assert!(matches!(recommend(input, &quick(), 1, JobControl::default()), Err(RecommendError::NoFeasibleAction { .. })));
}

#[test]
fn cancellation_stops_training() {
    let schema = demo::health_schema();
    let model = SimulationModel::with_defaults(&schema, 1000, 1);
    let intent = IntentGraph::from_parts::<&str>(&[], &[("hepatitis_B", "family_c")], &schema).unwrap();
    let ledger = BudgetLedger::new(1.0).unwrap();
    let progress = ProgressEstimate::default();
    let input = PlannerInput { intent: &intent, model: &model, ledger: &ledger, progress: &progress };
    let cancel = AtomicBool::new(true);
    let r = recommend(input, &quick(), 1, JobControl { cancel: Some(&cancel), on_progress: None });
    assert_eq!(r, Err(RecommendError::Cancelled));
}

#[test]
fn partial_progress_leaves_budget_unspent() {
    let schema = demo::insurance_schema();
    let model = SimulationModel::with_defaults(&schema, 1000, 3);
    let intent = IntentGraph::from_parts::<&str>(&[], &[("claim_amount", "policy")], &schema).unwrap();
    let ledger = BudgetLedger::new(1.0).unwrap();
    let mut progress = ProgressEstimate::default();
    progress.set(0.3).unwrap();
    let input = PlannerInput { intent: &intent, model: &model, ledger: &ledger, progress: &progress };
    let top = recommend(input, &quick(), 3, JobControl::default()).unwrap();
    assert!(top.iter().any(|c| c.total_epsilon < 1.0 - 1e-9), "{:?}", top.iter().map(|c| c.total_epsilon).collect::<Vec<_>>());
}

/// After spending 20% of the budget on the claim × lifetime-value grid, a
/// triangle intent gets a single three-attribute request with the rest.
#[test]
fn second_step_of_the_insurance_case() {
    let data = demo::synthetic_insurance(5000, 17);
    let schema = data.schema().clone();
    let mut session = Session::new("case1", "insurance", &schema, data.n(), 1.0, 17).unwrap();
    let mut curator = Curator::with_seed(Arc::new(data), 4);
    let first = DataRequest::new(finest_division(&["claim_amount", "cltv"], &schema).unwrap(), 0.2);
    session.execute(&mut curator, &first).unwrap();
    assert_eq!(session.responses[0].values.len(), 128);
    session
        .set_intent(&IntentSpec {
            nodes: vec![],
            edges: vec![
                ("claim_amount".into(), "policy".into()),
                ("claim_amount".into(), "cltv".into()),
                ("policy".into(), "cltv".into()),
            ],
        })
        .unwrap();
    let top = recommend(session.planner_input(), &QConfig::default(), 5, JobControl::default()).unwrap();
    assert!(
        top.iter().any(|c| c.requests.len() == 1
            && c.requests[0].division.divisions.len() == 3
            && (c.requests[0].epsilon - 0.8).abs() < 1e-9),
        "{top:#?}"
    );
}
