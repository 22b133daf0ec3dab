use super::*;
use crate::graph::{make_split, synth_dataset, SplitName, SynthConfig, Vocabulary};
use crate::model::ModelConfig;

fn tiny_dataset(n: usize, seed: u64, with_positions: bool) -> Dataset {
    synth_dataset(&SynthConfig {
        num_graphs: n,
        min_nodes: 3,
        max_nodes: 7,
        vocab: Vocabulary::toy(),
        with_positions,
        with_targets: true,
        seed,
        ..SynthConfig::default()
    })
}

fn quick_train_cfg(seed: u64, max_steps: u64) -> TrainConfig {
    TrainConfig {
        seed,
        max_steps,
        total_epochs: 50,
        warmup_epochs: 2,
        peak_lr: 1e-3,
        pack_max_nodes: 30,
        pack_max_edges: 60,
        pack_max_graphs: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_bit_identical_metric_logs() {
    let ds = tiny_dataset(12, 1, true);
    let split = make_split(ds.len(), 4, SplitName::Original, 0).unwrap();
    let mcfg = ModelConfig::toy();
    let tcfg = quick_train_cfg(9, 8);
    let a = train(&ds, &split, &mcfg, &tcfg).unwrap();
    let b = train(&ds, &split, &mcfg, &tcfg).unwrap();
    assert_eq!(a.metrics_csv, b.metrics_csv);
    assert_eq!(a.summary.steps, b.summary.steps);
    for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb);
    }
    // a different seed changes the log
    let c = train(&ds, &split, &mcfg, &quick_train_cfg(10, 8)).unwrap();
    assert_ne!(a.metrics_csv, c.metrics_csv);
}

#[test]
fn evaluation_never_reads_positions_when_absent() {
    let ds = tiny_dataset(3, 2, false);
    let mcfg = ModelConfig::toy();
    let enc = mcfg.encoding_config();
    let feats = crate::encodings::featurize_dataset(&ds.graphs, &enc).unwrap();
    let params = crate::model::ParamStore::init(&mcfg, &ds.vocab, 1);
    let items = crate::model::items_from_pack(
        &crate::pack::pack_stream(
            &graph_sizes(&ds.graphs, &[0, 1, 2]).unwrap(),
            crate::pack::PackSpec::default(),
        )
        .unwrap()[0],
        &ds.graphs,
        &feats,
    );
    let batch = PackedBatch::assemble(crate::pack::PackSpec::default(), &items, &enc).unwrap();
    let preds = predict_batch(&mcfg, &params, &batch).unwrap();
    assert_eq!(preds.len(), 3);
    assert_eq!(batch.position_reads(), 0);
}

#[test]
fn plain_mae_when_auxiliary_weights_are_zero() {
    let ds = tiny_dataset(4, 3, true);
    let mcfg = ModelConfig::toy();
    let enc = mcfg.encoding_config();
    let feats = crate::encodings::featurize_dataset(&ds.graphs, &enc).unwrap();
    let params = crate::model::ParamStore::init(&mcfg, &ds.vocab, 2);
    let spec = crate::pack::PackSpec::default();
    let pack = &crate::pack::pack_stream(&graph_sizes(&ds.graphs, &[0, 1, 2, 3]).unwrap(), spec).unwrap()[0];
    let items = crate::model::items_from_pack(pack, &ds.graphs, &feats);
    let batch = PackedBatch::assemble(spec, &items, &enc).unwrap();

    let weights = LossWeights {
        homo_lumo: 1.0,
        noisy_nodes: 0.0,
        noisy_edges: 0.0,
    };
    let (fwd, loss) = loss_of_batch(&mcfg, &params, &batch, MaskingGroup::NoMask, weights).unwrap();

    // independent oracle: MAE from the raw predictions
    let preds = fwd.tape.value(fwd.pred);
    let mut expect = 0.0;
    for g in 0..batch.n_graphs {
        expect += (preds.at2(g, 0) - ds.graphs[g].target.unwrap()).abs();
    }
    expect /= batch.n_graphs as f64;
    assert_eq!(loss.total_value, loss.mae);
    assert!((loss.total_value - expect).abs() <= 1e-12);
}

#[test]
fn uniform_logits_cost_ln_vocab_per_entry() {
    let ds = tiny_dataset(3, 4, true);
    let mcfg = ModelConfig::toy();
    let enc = mcfg.encoding_config();
    let feats = crate::encodings::featurize_dataset(&ds.graphs, &enc).unwrap();
    let mut params = crate::model::ParamStore::init(&mcfg, &ds.vocab, 3);
    // zero all reconstruction heads -> uniform logits
    for c in 0..ds.vocab.node.len() {
        for t in ["w", "b"] {
            for v in params.get_mut(&format!("heads/node{c}/{t}")).unwrap().data_mut() {
                *v = 0.0;
            }
        }
    }
    for c in 0..ds.vocab.edge.len() {
        for t in ["w", "b"] {
            for v in params.get_mut(&format!("heads/edge{c}/{t}")).unwrap().data_mut() {
                *v = 0.0;
            }
        }
    }
    let spec = crate::pack::PackSpec::default();
    let pack = &crate::pack::pack_stream(&graph_sizes(&ds.graphs, &[0, 1, 2]).unwrap(), spec).unwrap()[0];
    let items = crate::model::items_from_pack(pack, &ds.graphs, &feats);
    let batch = PackedBatch::assemble(spec, &items, &enc).unwrap();
    let weights = LossWeights {
        homo_lumo: 0.0,
        noisy_nodes: 1.0,
        noisy_edges: 1.0,
    };
    let (_, loss) = loss_of_batch(&mcfg, &params, &batch, MaskingGroup::NoMask, weights).unwrap();
    // closed form: mean over columns of ln(vocab size)
    let expect_nodes: f64 =
        ds.vocab.node.iter().map(|&v| (v as f64).ln()).sum::<f64>() / ds.vocab.node.len() as f64;
    let expect_edges: f64 =
        ds.vocab.edge.iter().map(|&v| (v as f64).ln()).sum::<f64>() / ds.vocab.edge.len() as f64;
    assert!((loss.ce_nodes - expect_nodes).abs() <= 1e-12, "{}", loss.ce_nodes);
    assert!((loss.ce_edges - expect_edges).abs() <= 1e-12, "{}", loss.ce_edges);
}

#[test]
fn composite_loss_matches_a_scripted_oracle() {
    let ds = tiny_dataset(2, 5, true);
    let mcfg = ModelConfig::toy();
    let enc = mcfg.encoding_config();
    let feats = crate::encodings::featurize_dataset(&ds.graphs, &enc).unwrap();
    let params = crate::model::ParamStore::init(&mcfg, &ds.vocab, 4);
    let spec = crate::pack::PackSpec::default();
    let pack = &crate::pack::pack_stream(&graph_sizes(&ds.graphs, &[0, 1]).unwrap(), spec).unwrap()[0];
    let items = crate::model::items_from_pack(pack, &ds.graphs, &feats);
    let batch = PackedBatch::assemble(spec, &items, &enc).unwrap();
    let weights = LossWeights {
        homo_lumo: 1.0,
        noisy_nodes: 1.2,
        noisy_edges: 1.2,
    };
    let (fwd, loss) = loss_of_batch(&mcfg, &params, &batch, MaskingGroup::NoMask, weights).unwrap();

    // scripted oracle over the raw forward outputs
    let preds = fwd.tape.value(fwd.pred);
    let mut mae = 0.0;
    for g in 0..batch.n_graphs {
        mae += (preds.at2(g, 0) - ds.graphs[g].target.unwrap()).abs();
    }
    mae /= batch.n_graphs as f64;

    let ce_of = |logits: &crate::tensor::Tensor, targets: &[usize], valid: &[bool]| -> (f64, usize) {
        let (n, v) = (logits.rows(), logits.cols());
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..n {
            if !valid[r] {
                continue;
            }
            let row: Vec<f64> = (0..v).map(|c| logits.at2(r, c)).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
            count += 1;
        }
        (total, count)
    };
    let mut node_total = 0.0;
    let mut node_count = 0;
    for (c, &lv) in fwd.node_logits.iter().enumerate() {
        let (t, n) = ce_of(fwd.tape.value(lv), &batch.clean_node_cats[c], &batch.node_valid);
        node_total += t;
        node_count += n;
    }
    let mut edge_total = 0.0;
    let mut edge_count = 0;
    for (c, &lv) in fwd.edge_logits.iter().enumerate() {
        let (t, n) = ce_of(fwd.tape.value(lv), &batch.clean_edge_cats[c], &batch.edge_valid);
        edge_total += t;
        edge_count += n;
    }
    let expect = 1.0 * mae + 1.2 * node_total / node_count as f64 + 1.2 * edge_total / edge_count as f64;
    assert!(
        (loss.total_value - expect).abs() <= 1e-10,
        "{} vs {expect}",
        loss.total_value
    );
}

#[test]
fn short_training_run_reduces_the_loss() {
    let ds = tiny_dataset(16, 6, true);
    let split = make_split(ds.len(), 0, SplitName::Original, 0).unwrap();
    let mut mcfg = ModelConfig::toy();
    mcfg.dropout_message = 0.0;
    mcfg.dropout_node = 0.0;
    mcfg.dropout_global = 0.0;
    mcfg.dropout_attention = 0.0;
    mcfg.dropout_encoder = 0.0;
    mcfg.graph_dropout_max = 0.0;
    let tcfg = TrainConfig {
        warmup_epochs: 1,
        peak_lr: 3e-3,
        p_corrupt: 0.0,
        w_noisy_nodes: 0.0,
        w_noisy_edges: 0.0,
        mask_ratio_spatial: 0.0,
        mask_ratio_topological: 0.0,
        mask_ratio_none: 1.0,
        ..quick_train_cfg(3, 150)
    };
    let out = train(&ds, &split, &mcfg, &tcfg).unwrap();
    let rows: Vec<&str> = out
        .metrics_csv
        .lines()
        .skip(1)
        .filter(|l| l.contains(",train,"))
        .collect();
    let mae_of = |line: &str| -> f64 { line.split(',').nth(2).unwrap().parse().unwrap() };
    let first = mae_of(rows[0]);
    let last = mae_of(rows[rows.len() - 1]);
    assert!(
        last < first * 0.8,
        "no progress: first {first}, last {last}"
    );
    assert!(out.summary.diverged_at_step.is_none());
}

#[test]
fn divergence_aborts_with_last_good_parameters() {
    let ds = tiny_dataset(8, 8, true);
    let split = make_split(ds.len(), 0, SplitName::Original, 0).unwrap();
    let mcfg = ModelConfig::toy();
    // an absurd learning rate overflows the parameters within a few steps
    let tcfg = TrainConfig {
        peak_lr: 1e18,
        warmup_epochs: 0,
        grad_clip: 0.0,
        ..quick_train_cfg(5, 50)
    };
    let out = train(&ds, &split, &mcfg, &tcfg).unwrap();
    assert!(out.summary.diverged_at_step.is_some());
    // returned parameters are finite (the last good snapshot, not the blown-up ones)
    for (name, t) in out.params.iter() {
        assert!(t.all_finite(), "{name}");
    }
}

#[test]
fn corruption_respects_weights_flag_interaction() {
    // with ce_corrupted_only and p_corrupt = 0 the CE terms contribute 0
    let ds = tiny_dataset(4, 7, true);
    let split = make_split(ds.len(), 0, SplitName::Original, 0).unwrap();
    let mcfg = ModelConfig::toy();
    let tcfg = TrainConfig {
        p_corrupt: 0.0,
        ce_corrupted_only: true,
        ..quick_train_cfg(4, 4)
    };
    let out = train(&ds, &split, &mcfg, &tcfg).unwrap();
    for line in out.metrics_csv.lines().skip(1).filter(|l| l.contains(",train,")) {
        let nodes: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
        let edges: f64 = line.split(',').nth(6).unwrap().parse().unwrap();
        assert_eq!(nodes, 0.0);
        assert_eq!(edges, 0.0);
    }
}
