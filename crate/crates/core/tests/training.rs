//! End-to-end training behaviors: determinism, persistence, logging, and
//! embedding contracts.

use hgmae_core::graph::{Csr, Graph, GraphDataset, SourceFormat};
use hgmae_core::masking::{masked_node_budget, recovery_count};
use hgmae_core::model::{PreppedGraph, ReadoutMode};
use hgmae_core::training::{
    embed, embed_prepped, log_to_csv, peek_precision, prepare_dataset, pretrain, Checkpoint,
    TrainConfig,
};

fn cycle(n: usize, label: i64) -> Graph {
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect();
    let mut g = Graph {
        adjacency: Csr::from_edges(n, &edges),
        features: vec![],
        d0: 0,
        graph_label: Some(label),
        node_labels: None,
    };
    hgmae_core::graph::degree_features(&mut g, 4);
    g
}

fn star(leaves: usize, label: i64) -> Graph {
    let edges: Vec<_> = (1..=leaves).map(|v| (0, v, 1.0)).collect();
    let mut g = Graph {
        adjacency: Csr::from_edges(leaves + 1, &edges),
        features: vec![],
        d0: 0,
        graph_label: Some(label),
        node_labels: None,
    };
    hgmae_core::graph::degree_features(&mut g, 4);
    g
}

fn toy_dataset() -> GraphDataset {
    let graphs = vec![
        cycle(6, 0),
        cycle(7, 0),
        cycle(8, 0),
        star(5, 1),
        star(6, 1),
        star(7, 1),
    ];
    let mut ds = GraphDataset {
        name: "toy".into(),
        graphs,
        d0: 5,
        num_classes: None,
        source_path: String::new(),
        format: SourceFormat::Synthetic,
    };
    ds.class_indices();
    ds
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 3,
        d: 8,
        gin_layers: 1,
        seed: 7,
        hierarchy_seed: 11,
        ..Default::default()
    }
}

#[test]
fn seeded_runs_produce_identical_loss_curves() {
    let ds = toy_dataset();
    let cfg = quick_config();
    let a = pretrain::<f32>(&ds, &cfg).unwrap();
    let b = pretrain::<f32>(&ds, &cfg).unwrap();
    assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
    assert!(a.log.iter().all(|row| row.loss.is_finite()));
}

#[test]
fn recovery_log_matches_closed_form() {
    let ds = toy_dataset();
    let mut cfg = quick_config();
    cfg.epochs = 6;
    cfg.recovery.t_e = Some(4);
    let out = pretrain::<f32>(&ds, &cfg).unwrap();
    let prepped = prepare_dataset::<f32>(&ds, &cfg);
    let sched = cfg.recovery.resolve(cfg.epochs);
    for row in &out.log {
        let expected: usize = prepped
            .iter()
            .map(|p| recovery_count(masked_node_budget(p.hierarchy.top().n(), cfg.r_m), &sched, row.epoch))
            .sum();
        assert_eq!(row.recovered_top, expected, "epoch {}", row.epoch);
    }
    // Past t_e the recovery column is all zero.
    assert!(out.log.iter().filter(|r| r.epoch >= 4).all(|r| r.recovered_top == 0));
}

#[test]
fn checkpoint_roundtrip_embeds_bit_identically() {
    let ds = toy_dataset();
    let cfg = quick_config();
    let out = pretrain::<f32>(&ds, &cfg).unwrap();
    let before = embed(&ds, &out.model, &cfg).unwrap();

    let ckpt = out.checkpoint(&cfg);
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[0..4], b"HGMK");
    assert_eq!(peek_precision(&bytes).unwrap(), hgmae_core::scalar::Precision::F32);

    let reloaded: Checkpoint<f32> = Checkpoint::from_bytes(&bytes).unwrap();
    let model = reloaded.into_model().unwrap();
    let after = embed(&ds, &model, &cfg).unwrap();
    for (a, b) in before.iter().zip(&after) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn checkpoint_rejects_wrong_precision() {
    let ds = toy_dataset();
    let cfg = quick_config();
    let out = pretrain::<f32>(&ds, &cfg).unwrap();
    let bytes = out.checkpoint(&cfg).to_bytes();
    assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
}

#[test]
fn embedding_matrix_shape_and_determinism() {
    let ds = toy_dataset();
    let mut cfg = quick_config();
    let out = pretrain::<f32>(&ds, &cfg).unwrap();
    let rows = embed(&ds, &out.model, &cfg).unwrap();
    assert_eq!(rows.len(), ds.len());
    // Aggregate readout: scales * d wide.
    assert!(rows.iter().all(|r| r.len() == cfg.scales * cfg.d));
    let again = embed(&ds, &out.model, &cfg).unwrap();
    assert_eq!(rows, again);

    cfg.readout_mode = ReadoutMode::FirstScale;
    let first = embed(&ds, &out.model, &cfg).unwrap();
    assert!(first.iter().all(|r| r.len() == cfg.d));
}

#[test]
fn embed_rejects_feature_width_mismatch() {
    let ds = toy_dataset();
    let cfg = quick_config();
    let out = pretrain::<f32>(&ds, &cfg).unwrap();
    let mut wrong = ds.clone();
    for g in &mut wrong.graphs {
        hgmae_core::graph::degree_features(g, 7);
    }
    wrong.d0 = 8;
    let err = embed(&wrong, &out.model, &cfg).unwrap_err();
    assert!(err.to_string().contains("does not match"), "{err}");
}

#[test]
fn relabeled_graph_embeds_identically_under_matched_hierarchy() {
    // Isomorphic pair with identical hierarchies/partitions, built by
    // explicit relabeling of graph 0.
    let ds = toy_dataset();
    let cfg = quick_config();
    let out = pretrain::<f32>(&ds, &cfg).unwrap();
    let prepped = prepare_dataset::<f32>(&ds, &cfg);

    let g = &ds.graphs[0];
    let n = g.n();
    let perm: Vec<usize> = (0..n).map(|i| (i + 2) % n).collect();
    let edges: Vec<_> = g
        .adjacency
        .undirected_edges()
        .iter()
        .map(|&(u, v, w)| (perm[u], perm[v], w))
        .collect();
    let mut features = vec![0.0; n * g.d0];
    for i in 0..n {
        features[perm[i] * g.d0..(perm[i] + 1) * g.d0]
            .copy_from_slice(&g.features[i * g.d0..(i + 1) * g.d0]);
    }
    let relabeled = Graph {
        adjacency: Csr::from_edges(n, &edges),
        features,
        d0: g.d0,
        graph_label: g.graph_label,
        node_labels: None,
    };

    let base = &prepped[0];
    let asg = base.hierarchy.levels[0].assignment.as_ref().unwrap();
    let mut cluster_p = vec![0usize; n];
    for i in 0..n {
        cluster_p[perm[i]] = asg.cluster_of()[i];
    }
    let hier_p = hgmae_core::hierarchy::Hierarchy {
        levels: vec![
            hgmae_core::hierarchy::CoarseLevel {
                scale: 1,
                adj: relabeled.adjacency.clone(),
                assignment: Some(hgmae_core::hierarchy::Assignment::new(
                    cluster_p,
                    asg.n_clusters(),
                )),
            },
            base.hierarchy.levels[1].clone(),
        ],
    };
    let model_cfg = cfg.model_config(ds.d0);
    let prepped_p = PreppedGraph::new(hier_p, &model_cfg);

    let pair_ds = GraphDataset {
        name: "pair".into(),
        graphs: vec![g.clone(), relabeled],
        d0: g.d0,
        num_classes: None,
        source_path: String::new(),
        format: SourceFormat::Synthetic,
    };
    let rows = embed_prepped(
        &pair_ds,
        &out.model,
        &[base.clone(), prepped_p],
        ReadoutMode::Aggregate,
    )
    .unwrap();
    for (a, b) in rows[0].iter().zip(&rows[1]) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn empty_dataset_is_a_config_error() {
    let ds = GraphDataset {
        name: "empty".into(),
        graphs: vec![],
        d0: 3,
        num_classes: None,
        source_path: String::new(),
        format: SourceFormat::Synthetic,
    };
    assert!(pretrain::<f32>(&ds, &quick_config()).is_err());
}

#[test]
fn parallel_flag_still_trains() {
    let ds = toy_dataset();
    let mut cfg = quick_config();
    cfg.parallel = true;
    let out = pretrain::<f32>(&ds, &cfg).unwrap();
    assert_eq!(out.log.len(), cfg.epochs);
}

#[test]
fn csv_log_format() {
    let ds = toy_dataset();
    let mut cfg = quick_config();
    cfg.epochs = 2;
    let out = pretrain::<f32>(&ds, &cfg).unwrap();
    let csv = log_to_csv(&out.log);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,loss,recovered_S"));
    assert_eq!(lines.count(), 2);
}
