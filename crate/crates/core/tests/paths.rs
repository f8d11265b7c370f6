mod common;

use std::collections::BTreeSet;

use common::{oracle_shortest_paths, schema_from_edges};
use proptest::prelude::*;
use schema_linker::pathfinder::{
    select_path, CandidateSet, PathSelector, SelectionRequest, SelectorError,
};
use schema_linker::{all_shortest_paths, build_candidates, IdColumnRule, ModePreset, SchemaGraph};

fn graph_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1usize..=9).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect();
        let count = pairs.len();
        (
            Just(n),
            proptest::collection::vec(proptest::bool::weighted(0.35), count),
        )
            .prop_map(move |(n, keep)| {
                let edges = pairs
                    .iter()
                    .zip(keep)
                    .filter(|(_, k)| *k)
                    .map(|(p, _)| *p)
                    .collect();
                (n, edges)
            })
    })
}

fn as_set(paths: &[schema_linker::JoinPath]) -> BTreeSet<Vec<String>> {
    paths.iter().map(|p| p.tables.clone()).collect()
}

proptest! {
    #[test]
    fn matches_brute_force((n, edges) in graph_strategy()) {
        let schema = schema_from_edges(n, &edges);
        let graph = SchemaGraph::build(&schema);
        for s in 0..n {
            for d in 0..n {
                let got = all_shortest_paths(&graph, &format!("t{s}"), &format!("t{d}")).unwrap();
                prop_assert_eq!(as_set(&got), oracle_shortest_paths(n, &edges, s, d));
                prop_assert_eq!(got.len(), as_set(&got).len());
                let keys: Vec<Vec<String>> = got.iter().map(|p| p.tables.clone()).collect();
                let mut sorted = keys.clone();
                sorted.sort();
                prop_assert_eq!(keys, sorted);
            }
        }
    }

    #[test]
    fn paths_are_walks_of_equal_length((n, edges) in graph_strategy(), s in 0usize..9, d in 0usize..9) {
        let (s, d) = (s % n, d % n);
        let graph = SchemaGraph::build(&schema_from_edges(n, &edges));
        let paths = all_shortest_paths(&graph, &format!("t{s}"), &format!("t{d}")).unwrap();
        for p in &paths {
            prop_assert_eq!(p.tables.first().unwrap(), &format!("t{s}"));
            prop_assert_eq!(p.tables.last().unwrap(), &format!("t{d}"));
            prop_assert_eq!(p.len(), paths[0].len());
            for w in p.tables.windows(2) {
                prop_assert!(graph.has_edge(&w[0], &w[1]));
            }
        }
        let back = all_shortest_paths(&graph, &format!("t{d}"), &format!("t{s}")).unwrap();
        let reversed: BTreeSet<Vec<String>> = back
            .iter()
            .map(|p| p.tables.iter().rev().cloned().collect())
            .collect();
        prop_assert_eq!(as_set(&paths), reversed);
    }

    #[test]
    fn graph_shape((n, edges) in graph_strategy()) {
        let graph = SchemaGraph::build(&schema_from_edges(n, &edges));
        prop_assert_eq!(graph.node_count(), n);
        prop_assert_eq!(graph.edge_count(), edges.len());
        for i in 0..n {
            for &j in graph.neighbors(i) {
                prop_assert!(graph.neighbors(j).contains(&i));
                prop_assert!(i != j);
            }
        }
    }

    #[test]
    fn union_is_union_of_oracle_paths(
        (n, edges) in graph_strategy(),
        srcs in proptest::collection::vec(0usize..9, 1..4),
        dsts in proptest::collection::vec(0usize..9, 1..4),
    ) {
        let graph = SchemaGraph::build(&schema_from_edges(n, &edges));
        let name = |i: &usize| format!("t{}", i % n);
        let srcs: Vec<String> = srcs.iter().map(name).collect();
        let dsts: Vec<String> = dsts.iter().map(name).collect();
        let cands = build_candidates(&graph, &srcs, &dsts, &ModePreset::Mode7.config()).unwrap();

        let mut expected = BTreeSet::new();
        for s in &srcs {
            for d in &dsts {
                let si: usize = s[1..].parse().unwrap();
                let di: usize = d[1..].parse().unwrap();
                let found = oracle_shortest_paths(n, &edges, si, di);
                if found.is_empty() {
                    expected.insert(s.clone());
                    expected.insert(d.clone());
                }
                expected.extend(found.into_iter().flatten());
            }
        }
        prop_assert_eq!(&cands.union_tables, &expected);
        for s in &srcs {
            prop_assert!(cands.union_tables.contains(s));
        }
        for d in &dsts {
            prop_assert!(cands.union_tables.contains(d));
        }
        // No path appears in both orientations.
        let mut seen = BTreeSet::new();
        for p in &cands.paths {
            let mut rev = p.tables.clone();
            rev.reverse();
            prop_assert!(!seen.contains(&rev) || rev == p.tables);
            seen.insert(p.tables.clone());
        }
    }

    #[test]
    fn force_union_dominates_every_mode(
        (n, edges) in graph_strategy(),
        srcs in proptest::collection::vec(0usize..9, 1..4),
        dsts in proptest::collection::vec(0usize..9, 1..4),
        pick in 1usize..20,
    ) {
        let graph = SchemaGraph::build(&schema_from_edges(n, &edges));
        let name = |i: &usize| format!("t{}", i % n);
        let srcs: Vec<String> = srcs.iter().map(name).collect();
        let dsts: Vec<String> = dsts.iter().map(name).collect();
        let full = chosen(&graph, &srcs, &dsts, ModePreset::Mode7, pick);
        for mode in ModePreset::ALL {
            let tables = chosen(&graph, &srcs, &dsts, mode, pick);
            prop_assert!(tables.is_subset(&full), "{:?} not within force-union", mode);
            prop_assert!(!tables.is_empty());
        }
    }
}

struct Fixed(usize);

impl PathSelector for Fixed {
    fn select(&self, request: &SelectionRequest<'_>) -> Result<usize, SelectorError> {
        Ok((self.0 - 1) % request.options.len() + 1)
    }
}

fn chosen(
    graph: &SchemaGraph,
    srcs: &[String],
    dsts: &[String],
    mode: ModePreset,
    pick: usize,
) -> BTreeSet<String> {
    let cfg = mode.config();
    let cands: CandidateSet = build_candidates(graph, srcs, dsts, &cfg).unwrap();
    select_path(graph, &cands, &cfg, "q", None, &Fixed(pick))
        .unwrap()
        .chosen_tables
}

#[test]
fn augmentation_adds_id_edges_only_to_sparse_graphs() {
    use schema_linker::schema::{ColumnDef, TableDef};
    let table = |name: &str, cols: &[&str]| {
        TableDef::new(
            name,
            cols.iter()
                .map(|c| ColumnDef::new(*c, "TEXT", false))
                .collect(),
        )
    };
    let schema = schema_linker::Schema::new(
        "s",
        vec![
            table("a", &["customer_id", "video"]),
            table("b", &["CUSTOMER_ID"]),
            table("c", &["video"]),
        ],
        vec![],
    )
    .unwrap();
    let graph = SchemaGraph::build_augmented(&schema, IdColumnRule::TokenBoundary);
    assert_eq!(graph.edge_count(), 1);
    assert!(graph.has_edge("a", "b"));
    let sub = SchemaGraph::build_augmented(&schema, IdColumnRule::Substring);
    assert_eq!(sub.edge_count(), 2);
    assert!(sub.has_edge("a", "c"));

    let dense = schema_from_edges(4, &[(0, 1), (1, 2)]);
    let g = SchemaGraph::build_augmented(&dense, IdColumnRule::Substring);
    assert_eq!(g.edge_count(), 2);
}

#[test]
fn disconnected_pair_keeps_both_endpoints() {
    let graph = SchemaGraph::build(&schema_from_edges(4, &[(0, 1), (2, 3)]));
    let cands = build_candidates(
        &graph,
        &["t0".into()],
        &["t3".into()],
        &ModePreset::Mode7.config(),
    )
    .unwrap();
    assert_eq!(
        cands.union_tables,
        BTreeSet::from(["t0".to_string(), "t3".to_string()])
    );
    assert!(!cands.union_connected);
    assert!(!cands.diagnostics.is_empty());
}
