//! Bundled demo schemas and synthetic tables.
//!
//! Two scenarios ship with the crate: an insurance client table with two
//! sensitive numerical attributes and a public policy type, and a household
//! survey with a sensitive hepatitis B answer and four public household counts.
//! The generators produce synthetic records with plausible shapes; they are
//! not real data.

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, LogNormal};

use crate::schema::{AttributeSchema, Column, Dataset, Schema};

/// Record count of the household survey.
pub const HEALTH_RECORDS: usize = 7_824;

/// `claim_amount` (sensitive), `policy`, `cltv` (sensitive).
pub fn insurance_schema() -> Schema {
    Schema::new(vec![
        AttributeSchema::numerical("claim_amount", 0.0, 40_000.0, 5_000.0, true).unwrap(),
        AttributeSchema::categorical("policy", &["A", "B", "C"], false).unwrap(),
        AttributeSchema::numerical("cltv", 0.0, 800_000.0, 50_000.0, true).unwrap(),
    ])
    .unwrap()
}

/// `hepatitis_B` (sensitive) and four household counts.
pub fn health_schema() -> Schema {
    Schema::new(vec![
        AttributeSchema::categorical("hepatitis_B", &["Y", "N", "idk"], true).unwrap(),
        AttributeSchema::categorical("family_c", &["1", "2", "3", "4", "5", "6", "7+"], false).unwrap(),
        AttributeSchema::categorical("children_c", &["0", "1", "2", "3+"], false).unwrap(),
        AttributeSchema::categorical("teenager_c", &["0", "1", "2", "3", "4+"], false).unwrap(),
        AttributeSchema::categorical("elder_c", &["0", "1", "2", "3+"], false).unwrap(),
    ])
    .unwrap()
}

/// Long-tailed claims and lifetime values; policy B clients claim less.
pub fn synthetic_insurance(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = WeightedIndex::new([0.45, 0.35, 0.20]).unwrap();
    let cltv_dist = LogNormal::new(11.6, 0.8).unwrap();
    let (mut claims, mut policies, mut cltvs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let p = policy.sample(&mut rng);
        let cltv: f64 = cltv_dist.sample(&mut rng);
        let cltv = cltv.min(799_999.0);
        // Larger lifetime value, larger typical claim.
        let mean = if p == 1 { 1_500.0 } else { 3_000.0 } * (1.0 + cltv / 200_000.0);
        let claim: f64 = Exp::new(1.0 / mean).unwrap().sample(&mut rng);
        claims.push(claim.min(39_999.0));
        policies.push(p as u32);
        cltvs.push(cltv);
    }
    Dataset::new(
        insurance_schema(),
        vec![Column::Numerical(claims), Column::Categorical(policies), Column::Numerical(cltvs)],
    )
    .expect("generated values lie in range")
}

/// Household survey whose hepatitis B answers depend on the household makeup.
pub fn synthetic_health(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = WeightedIndex::new([0.16, 0.27, 0.18, 0.17, 0.11, 0.06, 0.05]).unwrap();
    let cols: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let f = family.sample(&mut rng) as u32 + 1;
            let children = (0..f.saturating_sub(1)).filter(|_| rng.random_bool(0.12)).count().min(3) as u32;
            let teens = (0..f.saturating_sub(1)).filter(|_| rng.random_bool(0.22)).count().min(4) as u32;
            let elders = (0..f.min(3)).filter(|_| rng.random_bool(0.25)).count().min(3) as u32;
            let p_yes = 0.03 + 0.02 * elders as f64 + if f >= 6 { 0.03 } else { 0.0 };
            let p_idk = 0.04 + 0.01 * children as f64;
            let u: f64 = rng.random();
            let hep = if u < p_yes { 0 } else if u < p_yes + p_idk { 2 } else { 1 };
            vec![hep, f - 1, children, teens, elders]
        })
        .collect();
    let columns = (0..5).map(|j| Column::Categorical(cols.iter().map(|r| r[j]).collect())).collect();
    Dataset::new(health_schema(), columns).expect("generated values lie in range")
}
