use proptest::prelude::*;

use reltopo_core::numerics::{read_checkpoint, write_checkpoint, Init};
use reltopo_core::pipeline::{
    average_precision, evaluate_rankings, generate_synthetic, rank_desc, rerank, Config, Dataset, SyntheticSpec,
};
use reltopo_core::relation::{adaptive_adjacency, build_skeleton, relation_similarity};
use reltopo_core::topology::bistochastic;
use reltopo_core::{ConfidenceVector, NodeFeatureSet, ParamStore, Stage, Tensor};

/// Precision at every relevant position, counted from scratch each time.
fn ap_oracle(relevant: &[bool]) -> f64 {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (pos, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
        let hits_so_far = relevant[..=pos].iter().filter(|&&r| r).count();
        sum += hits_so_far as f64 / (pos + 1) as f64;
    }
    sum / total as f64
}

fn node_set(rows: Vec<f64>, k: usize, c: usize, beta: Vec<f64>) -> NodeFeatureSet {
    NodeFeatureSet::new(
        Tensor::new(vec![k + 1, c], rows).unwrap(),
        ConfidenceVector::from_local(beta).unwrap(),
        Stage::Relation,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn average_precision_matches_oracle(relevant in prop::collection::vec(any::<bool>(), 1..40)) {
        prop_assert!((average_precision(&relevant) - ap_oracle(&relevant)).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_brute_force(
        scores in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 12), 1..6),
        labels in prop::collection::vec(0u32..3, 12),
    ) {
        let query_labels: Vec<u32> = (0..scores.len()).map(|q| labels[q % 12]).collect();
        let rankings: Vec<Vec<usize>> = scores.iter().map(|s| rank_desc(s)).collect();
        let m = evaluate_rankings(&rankings, &query_labels, &labels).unwrap();
        let mut cmc1 = 0.0;
        let mut map = 0.0;
        for (r, &q) in rankings.iter().zip(&query_labels) {
            let rel: Vec<bool> = r.iter().map(|&g| labels[g] == q).collect();
            cmc1 += rel[0] as u8 as f64;
            map += ap_oracle(&rel);
        }
        let n = rankings.len() as f64;
        prop_assert!((m.rank(1) - cmc1 / n).abs() < 1e-12);
        prop_assert!((m.map - map / n).abs() < 1e-12);
        prop_assert!(m.cmc.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sinkhorn_output_is_doubly_stochastic(k in 2usize..10, seed in any::<u64>()) {
        let data: Vec<f64> = (0..k * k)
            .map(|i| 0.05 + ((seed.wrapping_add(i as u64 * 7919) % 1000) as f64) / 1000.0)
            .collect();
        let m = bistochastic(&Tensor::new(vec![k, k], data).unwrap(), 100).unwrap();
        for s in m.row_sums().into_iter().chain(m.col_sums()) {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn adaptive_rows_sum_to_one(scores in prop::collection::vec(0.01f64..0.99, 14)) {
        let a = adaptive_adjacency(&build_skeleton(14).unwrap(), &scores).unwrap();
        for i in 0..14 {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relation_similarity_is_symmetric_and_bounded(
        a in prop::collection::vec(-2.0f64..2.0, 12),
        b in prop::collection::vec(-2.0f64..2.0, 12),
        ba in prop::collection::vec(0.0f64..=1.0, 3),
        bb in prop::collection::vec(0.0f64..=1.0, 3),
    ) {
        let (x, y) = (node_set(a, 3, 3, ba), node_set(b, 3, 3, bb));
        let s = relation_similarity(&x, &y).unwrap();
        prop_assert!((s - relation_similarity(&y, &x).unwrap()).abs() < 1e-15);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn rerank_moves_only_the_top_n(
        scores in prop::collection::vec(-1.0f64..1.0, 10),
        topo in prop::collection::vec(0.0f64..1.0, 10),
        gamma in 0.0f64..=1.0,
        n in 1usize..12,
    ) {
        let s = vec![scores.clone()];
        let stage1 = rank_desc(&scores);
        let cands = vec![stage1.iter().take(n).map(|&g| (g, topo[g])).collect()];
        let r = rerank(&s, &cands, gamma, n).unwrap();
        let top = n.min(10);
        let mut head = r.rankings[0][..top].to_vec();
        let mut expected = stage1[..top].to_vec();
        head.sort_unstable();
        expected.sort_unstable();
        prop_assert_eq!(head, expected);
        prop_assert_eq!(&r.rankings[0][top..], &stage1[top..]);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut store = ParamStore::new(9);
    store.init_linear("a", 5, 3, Init::Xavier).unwrap();
    store.init_standardize("bn", 4).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&store, &mut buf).unwrap();
    let back = read_checkpoint(&mut &buf[..]).unwrap();
    let names = |s: &ParamStore| s.iter().map(|(n, t)| (n.to_string(), t.data().to_vec(), t.requires_grad())).collect::<Vec<_>>();
    assert_eq!(names(&store), names(&back));
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn dataset_file_round_trip() {
    let spec = SyntheticSpec {
        num_ids: 4,
        samples_per_id: 3,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.hods");
    ds.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
    assert_eq!(generate_synthetic(&spec).unwrap(), ds);
}

#[test]
fn config_text_round_trip() {
    let cfg = Config {
        gamma: 0.25,
        top_n: 4,
        matching: false,
        ..Config::default()
    };
    assert_eq!(Config::parse(&cfg.to_string()).unwrap(), cfg);
    assert!(Config::parse("gamma=2").is_err());
    assert!(Config::parse("nope=1").is_err());
}
