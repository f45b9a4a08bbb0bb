use std::collections::BTreeSet;

use dpexplore::intent::{betweenness, enumerate_prototypes, IntentGraph};
use dpexplore::schema::{AttributeSchema, Schema};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

fn schema() -> Schema {
    Schema::new(NAMES.iter().map(|n| AttributeSchema::categorical(n, &["0", "1"], false).unwrap()).collect()).unwrap()
}

fn graph(n: usize, edges: &[(usize, usize)]) -> IntentGraph {
    let nodes: Vec<&str> = NAMES[..n].to_vec();
    let e: Vec<(&str, &str)> = edges.iter().map(|&(i, j)| (NAMES[i], NAMES[j])).collect();
    IntentGraph::from_parts(&nodes, &e, &schema()).unwrap()
}

/// Every family of admissible sets, tested by brute force for covering and
/// for minimality (dropping any set uncovers something).
fn brute_force(n: usize, edges: &[(usize, usize)], k: usize) -> BTreeSet<Vec<Vec<String>>> {
    let adj = |i: usize, j: usize| edges.iter().any(|&(a, b)| (a, b) == (i, j) || (a, b) == (j, i));
    let degree = |i: usize| (0..n).filter(|&j| adj(i, j)).count();
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let ok = match members.len() {
            1 => degree(members[0]) == 0,
            s if s <= k => members.iter().all(|&i| members.iter().any(|&j| adj(i, j))),
            _ => false,
        };
        if ok {
            sets.push(members);
        }
    }
    let mut targets: Vec<Vec<usize>> = edges.iter().map(|&(i, j)| vec![i, j]).collect();
    targets.extend((0..n).filter(|&i| degree(i) == 0).map(|i| vec![i]));
    let covered = |family: &[&Vec<usize>]| {
        targets.iter().all(|t| family.iter().any(|s| t.iter().all(|x| s.contains(x))))
    };
    let mut out = BTreeSet::new();
    assert!(sets.len() <= 24, "oracle limited to small graphs");
    for pick in 1u32..(1 << sets.len()) {
        let family: Vec<&Vec<usize>> = (0..sets.len()).filter(|i| pick >> i & 1 == 1).map(|i| &sets[i]).collect();
        if family.len() > targets.len() || !covered(&family) {
            continue;
        }
        let minimal = (0..family.len()).all(|drop| {
            let rest: Vec<&Vec<usize>> = family.iter().enumerate().filter(|&(i, _)| i != drop).map(|(_, s)| *s).collect();
            !covered(&rest)
        });
        if minimal {
            let mut named: Vec<Vec<String>> =
                family.iter().map(|s| s.iter().map(|&i| NAMES[i].to_string()).collect()).collect();
            named.sort();
            out.insert(named);
        }
    }
    out
}

fn enumerated(n: usize, edges: &[(usize, usize)], k: usize) -> BTreeSet<Vec<Vec<String>>> {
    let protos = enumerate_prototypes(&graph(n, edges), k, usize::MAX);
    let set: BTreeSet<_> = protos.iter().map(|p| p.attribute_sets.clone()).collect();
    assert_eq!(set.len(), protos.len(), "duplicate prototypes");
    set
}

fn families(n: usize) -> Vec<(&'static str, Vec<(usize, usize)>)> {
    let star = (1..n).map(|i| (0, i)).collect();
    let path = (1..n).map(|i| (i - 1, i)).collect();
    let cycle = if n >= 3 { (0..n).map(|i| (i, (i + 1) % n)).collect() } else { Vec::new() };
    let complete = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    vec![("star", star), ("path", path), ("cycle", cycle), ("complete", complete)]
}

#[test]
fn prototypes_match_brute_force_on_graph_families() {
    for n in 1..=5 {
        for (name, edges) in families(n) {
            for k in 2..=3 {
                assert_eq!(enumerated(n, &edges, k), brute_force(n, &edges, k), "{name} n={n} k={k}");
            }
        }
    }
}

#[test]
fn prototypes_match_brute_force_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let n = rng.random_range(1..=5);
        let edges: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|_| rng.random_bool(0.5)).collect();
        assert_eq!(enumerated(n, &edges, 3), brute_force(n, &edges, 3), "edges {edges:?}");
    }
}

#[test]
fn star_includes_the_merged_three_attribute_shapes() {
    let protos = enumerate_prototypes(&graph(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]), 3, usize::MAX);
    let names = |v: &[&[&str]]| -> Vec<Vec<String>> {
        v.iter().map(|s| s.iter().map(|x| x.to_string()).collect()).collect()
    };
    assert!(protos.iter().any(|p| p.attribute_sets == names(&[&["a", "b", "c"], &["a", "d", "e"]])));
    assert!(protos.iter().any(|p| p.attribute_sets == names(&[&["a", "b"], &["a", "c"], &["a", "d"], &["a", "e"]])));
    // Fewest sets first.
    assert!(protos.windows(2).all(|w| w[0].attribute_sets.len() <= w[1].attribute_sets.len()));
}

/// Betweenness by listing every shortest path between every pair.
fn betweenness_oracle(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let adj = |i: usize, j: usize| edges.iter().any(|&(a, b)| (a, b) == (i, j) || (a, b) == (j, i));
    fn paths(n: usize, adj: &dyn Fn(usize, usize) -> bool, s: usize, t: usize) -> Vec<Vec<usize>> {
        // Iterative deepening over simple paths; the first depth that reaches t gives all shortest paths.
        for len in 1..n {
            let mut found = Vec::new();
            let mut stack = vec![vec![s]];
            while let Some(p) = stack.pop() {
                let last = *p.last().unwrap();
                if p.len() == len + 1 {
                    if last == t {
                        found.push(p);
                    }
                    continue;
                }
                for w in 0..n {
                    if adj(last, w) && !p.contains(&w) {
                        let mut q = p.clone();
                        q.push(w);
                        stack.push(q);
                    }
                }
            }
            if !found.is_empty() {
                return found;
            }
        }
        Vec::new()
    }
    let mut c = vec![0.0; n];
    for s in 0..n {
        for t in s + 1..n {
            let ps = paths(n, &adj, s, t);
            if ps.is_empty() {
                continue;
            }
            for (v, cv) in c.iter_mut().enumerate() {
                let through = ps.iter().filter(|p| p[1..p.len() - 1].contains(&v)).count();
                *cv += through as f64 / ps.len() as f64;
            }
        }
    }
    let norm = if n > 2 { ((n - 1) * (n - 2)) as f64 / 2.0 } else { 1.0 };
    c.iter().map(|x| if n > 2 { x / norm } else { 0.0 }).collect()
}

proptest! {
    #[test]
    fn betweenness_matches_path_enumeration(n in 1usize..=6, bits in any::<u32>()) {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let edges: Vec<(usize, usize)> = pairs.iter().enumerate().filter(|(k, _)| bits >> k & 1 == 1).map(|(_, &e)| e).collect();
        let got = betweenness(&graph(n, &edges));
        let want = betweenness_oracle(n, &edges);
        for (i, w) in want.iter().enumerate() {
            prop_assert!((got[NAMES[i]] - w).abs() < 1e-12, "node {} got {} want {}", NAMES[i], got[NAMES[i]], w);
        }
    }
}

#[test]
fn star_center_has_unit_betweenness() {
    let b = betweenness(&graph(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]));
    assert!((b["a"] - 1.0).abs() < 1e-12);
    assert_eq!(b["b"], 0.0);
}
