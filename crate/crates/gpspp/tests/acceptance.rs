//! Acceptance suite. Each test pins one numbered criterion at its stated
//! tolerance and prints a `criterion N PASS` line (visible with
//! `cargo test --test acceptance -- --nocapture`).

use std::time::Instant;

use gpspp::diff::grad_check;
use gpspp::encodings::{
    featurize_dataset, featurize_graph, laplacian_features, random_walk_features, spd_map,
    symmetric_eigen, EncodingConfig, GraphFeatures, SpdMap,
};
use gpspp::ensemble::{combine, ensemble_eval, EnsembleSpec, MemberSpec};
use gpspp::graph::{
    make_split, synth_dataset, synth_graph, MolecularGraph, SplitName, SynthConfig, Vocabulary,
};
use gpspp::model::{
    collect_grads, count_params, forward, predict_batch, save_checkpoint, BatchItem, ForwardOptions,
    MaskingGroup, Mode, ModelConfig, PackedBatch, ParamStore,
};
use gpspp::pack::{pack_efficiency, pack_stream, GraphSize, PackSpec};
use gpspp::rng::RngStream;
use gpspp::tensor::Tensor;
use gpspp::train::{
    composite_loss, corrupt_features, sample_masking_group, train, LossWeights, TrainConfig,
};

fn random_graphs(count: usize, max_nodes: usize, seed: u64, with_positions: bool) -> Vec<MolecularGraph> {
    let cfg = SynthConfig {
        min_nodes: 2,
        max_nodes,
        with_positions,
        with_targets: true,
        vocab: Vocabulary::toy(),
        ..SynthConfig::default()
    };
    let mut rng = RngStream::new(seed, 77);
    (0..count).map(|_| synth_graph(&cfg, &mut rng)).collect()
}

fn exact_batch(cfg: &ModelConfig, graphs: &[&MolecularGraph], feats: &[&GraphFeatures]) -> PackedBatch {
    let spec = PackSpec {
        max_nodes: graphs.iter().map(|g| g.num_nodes).sum(),
        max_edges: graphs.iter().map(|g| g.num_edges()).sum::<usize>().max(1),
        max_graphs: graphs.len(),
    };
    let items: Vec<BatchItem> = graphs
        .iter()
        .zip(feats)
        .map(|(g, f)| BatchItem {
            graph: g,
            clean: g,
            features: f,
            sign_flips: None,
        })
        .collect();
    PackedBatch::assemble(spec, &items, &cfg.encoding_config()).unwrap()
}

#[test]
fn criterion_01_parameter_count_reproduction() {
    let start = Instant::now();
    let vocab = Vocabulary::reference_set1();
    let full_cfg = ModelConfig::default();
    let full = count_params(&full_cfg, &vocab);
    let no_mhsa_cfg = ModelConfig {
        use_mhsa: false,
        ..ModelConfig::default()
    };
    let no_mhsa = count_params(&no_mhsa_cfg, &vocab);
    let elapsed = start.elapsed();

    let full_target = 44.3e6;
    let no_mhsa_target = 40.0e6;
    assert!(
        (full as f64) >= full_target * 0.95 && (full as f64) <= full_target * 1.05,
        "full config {full} outside 44.3M +/- 5%"
    );
    assert!(
        (no_mhsa as f64) >= no_mhsa_target * 0.95 && (no_mhsa as f64) <= no_mhsa_target * 1.05,
        "no-MHSA config {no_mhsa} outside 40.0M +/- 5%"
    );
    assert!(elapsed.as_secs_f64() < 1.0, "counting took {elapsed:?}");
    println!(
        "criterion 1 PASS: full {full} (target 44.3M +/- 5%), no-MHSA {no_mhsa} (target 40.0M +/- 5%), {elapsed:?}"
    );
}

#[test]
fn criterion_02_ablation_parameter_deltas() {
    let vocab = Vocabulary::reference_set1();
    let full = count_params(&ModelConfig::default(), &vocab) as f64;
    type Toggle = fn(&mut ModelConfig);
    let cases: [(&str, Toggle, f64); 7] = [
        ("MPNN", |c| c.use_mpnn = false, 69.8),
        ("edge features", |c| c.use_edge_features = false, 26.3),
        ("global features", |c| c.use_global_features = false, 8.0),
        ("sender aggregation", |c| c.use_sender_aggregation = false, 14.2),
        (
            "adjacent-node aggregation",
            |c| c.use_adjacent_node_aggregation = false,
            18.9,
        ),
        ("MHSA", |c| c.use_mhsa = false, 9.5),
        ("FFN", |c| c.use_ffn = false, 19.0),
    ];
    let mut report = Vec::new();
    for (name, apply, expected_pp) in cases {
        let mut cfg = ModelConfig::default();
        apply(&mut cfg);
        let count = count_params(&cfg, &vocab) as f64;
        let delta_pp = 100.0 * (full - count) / full;
        assert!(
            (delta_pp - expected_pp).abs() <= 2.0,
            "{name}: -{delta_pp:.2} pp vs expected -{expected_pp} pp"
        );
        report.push(format!("{name} -{delta_pp:.1}pp (ref -{expected_pp}pp)"));
    }
    println!("criterion 2 PASS: {}", report.join(", "));
}

#[test]
fn criterion_03_gradient_correctness() {
    let start = Instant::now();
    // toy config, dropout off, one 5-node graph
    let mut cfg = ModelConfig::toy();
    cfg.dropout_message = 0.0;
    cfg.dropout_node = 0.0;
    cfg.dropout_global = 0.0;
    cfg.dropout_attention = 0.0;
    cfg.dropout_encoder = 0.0;
    cfg.dropout_ffn = 0.0;
    cfg.graph_dropout_max = 0.0;
    let vocab = Vocabulary::toy();

    let graph = {
        let synth = SynthConfig {
            min_nodes: 5,
            max_nodes: 5,
            vocab: vocab.clone(),
            ..SynthConfig::default()
        };
        let mut rng = RngStream::new(41, 0);
        synth_graph(&synth, &mut rng)
    };
    assert_eq!(graph.num_nodes, 5);
    let feats = featurize_graph(&graph, &cfg.encoding_config()).unwrap();
    let batch = exact_batch(&cfg, &[&graph], &[&feats]);

    // Check at a generic, well-conditioned point: the default 0.02-scale
    // embedding init leaves LayerNorm inputs nearly constant, which blows up
    // third derivatives and drowns an h = 1e-4 central difference in
    // truncation noise (the analytic gradient itself converges under
    // h-refinement). Feature-scale embeddings give generic conditioning.
    let mut store = ParamStore::init(&cfg, &vocab, 23);
    for spec in gpspp::model::param_specs(&cfg, &vocab) {
        if spec.init == gpspp::model::params::InitKind::Embedding {
            for v in store.get_mut(&spec.name).unwrap().data_mut() {
                *v *= 25.0;
            }
        }
    }
    let named: Vec<(String, Tensor)> = store
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let weights = LossWeights {
        homo_lumo: 1.0,
        noisy_nodes: 1.2,
        noisy_edges: 1.2,
    };

    let mut eval = |ps: &[(String, Tensor)],
                    want: bool|
     -> gpspp::Result<(f64, Option<Vec<Tensor>>)> {
        let mut work = ParamStore::init(&cfg, &vocab, 23);
        for (name, tensor) in ps {
            *work.get_mut(name).unwrap() = tensor.clone();
        }
        let mut fwd = forward(
            &cfg,
            &work,
            &batch,
            MaskingGroup::NoMask,
            &mut Mode::Eval,
            &ForwardOptions {
                want_grad: want,
                want_aux: true,
            },
        )?;
        let loss = composite_loss(&mut fwd, &batch, weights, None)?;
        if want {
            fwd.tape.backward(loss.total)?;
            Ok((loss.total_value, Some(collect_grads(&fwd, &work)?)))
        } else {
            Ok((loss.total_value, None))
        }
    };

    let mut rng = RngStream::new(59, 0);
    let report = grad_check(&named, &mut eval, 1e-4, 200, &mut rng).unwrap();
    let elapsed = start.elapsed();
    assert!(
        report.max_rel_err <= 1e-4,
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}");
    println!(
        "criterion 3 PASS: max rel err {:.3e} over {} coordinates across {} tensors, {elapsed:?}",
        report.max_rel_err,
        report.checked,
        named.len()
    );
}

fn permute_graph_and_features(
    g: &MolecularGraph,
    f: &GraphFeatures,
    perm: &[usize],
    k_lap: usize,
    k_rw: usize,
) -> (MolecularGraph, GraphFeatures) {
    let n = g.num_nodes;
    let mut node_cats = vec![Vec::new(); n];
    let mut positions = g.positions.as_ref().map(|_| vec![[0.0; 3]; n]);
    for i in 0..n {
        node_cats[perm[i]] = g.node_cats[i].clone();
        if let (Some(dst), Some(src)) = (positions.as_mut(), g.positions.as_ref()) {
            dst[perm[i]] = src[i];
        }
    }
    let h = MolecularGraph {
        num_nodes: n,
        edges: g.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect(),
        node_cats,
        edge_cats: g.edge_cats.clone(),
        positions,
        target: g.target,
    };
    // permute feature rows consistently; eigen-basis must move with it
    let mut vecs = Tensor::zeros(vec![n, k_lap]);
    let mut rw = Tensor::zeros(vec![n, k_rw]);
    let mut degrees = vec![0usize; n];
    for i in 0..n {
        for j in 0..k_lap {
            vecs.data_mut()[perm[i] * k_lap + j] = f.spectral.eig_vectors.at2(i, j);
        }
        for s in 0..k_rw {
            rw.data_mut()[perm[i] * k_rw + s] = f.random_walk.probs.at2(i, s);
        }
        degrees[perm[i]] = f.degree_buckets[i];
    }
    let mut buckets = vec![0usize; n * n];
    let mut dist = vec![0usize; n * n];
    for i in 0..n {
        for j in 0..n {
            buckets[perm[i] * n + perm[j]] = f.spd.buckets[i * n + j];
            dist[perm[i] * n + perm[j]] = f.spd.dist[i * n + j];
        }
    }
    let hf = GraphFeatures {
        spectral: gpspp::encodings::SpectralFeatures {
            eig_vectors: vecs,
            eig_values: f.spectral.eig_values.clone(),
        },
        random_walk: gpspp::encodings::RandomWalkFeatures { probs: rw },
        spd: SpdMap { n, buckets, dist },
        degree_buckets: degrees,
    };
    (h, hf)
}

fn random_rotation(rng: &mut RngStream) -> [[f64; 3]; 3] {
    let mut v: Vec<[f64; 3]> = (0..3)
        .map(|_| [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)])
        .collect();
    for i in 0..3 {
        for j in 0..i {
            let dot: f64 = (0..3).map(|k| v[i][k] * v[j][k]).sum();
            for k in 0..3 {
                v[i][k] -= dot * v[j][k];
            }
        }
        let norm: f64 = (0..3).map(|k| v[i][k] * v[i][k]).sum::<f64>().sqrt();
        for k in 0..3 {
            v[i][k] /= norm;
        }
    }
    [v[0], v[1], v[2]]
}

#[test]
fn criterion_04_equivariance_and_invariance_suite() {
    let cfg = ModelConfig::toy();
    let vocab = Vocabulary::toy();
    let params = ParamStore::init(&cfg, &vocab, 31);
    let enc = cfg.encoding_config();
    let graphs = random_graphs(100, 14, 4004, true);
    let feats = featurize_dataset(&graphs, &enc).unwrap();
    let mut rng = RngStream::new(4005, 0);
    let mut worst_perm: f64 = 0.0;
    let mut worst_rigid: f64 = 0.0;

    for (g, f) in graphs.iter().zip(&feats) {
        let n = g.num_nodes;
        let batch = exact_batch(&cfg, &[g], &[f]);
        let fwd = forward(
            &cfg,
            &params,
            &batch,
            MaskingGroup::NoMask,
            &mut Mode::Eval,
            &ForwardOptions {
                want_grad: false,
                want_aux: false,
            },
        )
        .unwrap();
        let pred = fwd.tape.value(fwd.pred).at2(0, 0);
        let x_final = fwd.tape.value(fwd.x_final).clone();

        // node permutation: equivariant states, invariant prediction
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let (h, hf) = permute_graph_and_features(g, f, &perm, enc.k_lap, enc.k_rw);
        let hbatch = exact_batch(&cfg, &[&h], &[&hf]);
        let hfwd = forward(
            &cfg,
            &params,
            &hbatch,
            MaskingGroup::NoMask,
            &mut Mode::Eval,
            &ForwardOptions {
                want_grad: false,
                want_aux: false,
            },
        )
        .unwrap();
        let hpred = hfwd.tape.value(hfwd.pred).at2(0, 0);
        worst_perm = worst_perm.max((hpred - pred).abs());
        let hx = hfwd.tape.value(hfwd.x_final);
        for i in 0..n {
            for c in 0..cfg.d_node {
                worst_perm = worst_perm.max((hx.at2(perm[i], c) - x_final.at2(i, c)).abs());
            }
        }

        // rigid motion invariance
        let rot = random_rotation(&mut rng);
        let shift = [
            rng.uniform(-5.0, 5.0),
            rng.uniform(-5.0, 5.0),
            rng.uniform(-5.0, 5.0),
        ];
        let mut moved = g.clone();
        if let Some(pos) = &mut moved.positions {
            for p in pos.iter_mut() {
                let mut out = shift;
                for r in 0..3 {
                    for c in 0..3 {
                        out[r] += rot[r][c] * p[c];
                    }
                }
                *p = out;
            }
        }
        let mbatch = exact_batch(&cfg, &[&moved], &[f]);
        let mpred = predict_batch(&cfg, &params, &mbatch).unwrap()[0];
        worst_rigid = worst_rigid.max((mpred - pred).abs());

        // exact position independence under the spatial mask
        let sp1 = forward(
            &cfg,
            &params,
            &batch,
            MaskingGroup::Spatial,
            &mut Mode::Eval,
            &ForwardOptions {
                want_grad: false,
                want_aux: false,
            },
        )
        .unwrap();
        let sp2 = forward(
            &cfg,
            &params,
            &mbatch,
            MaskingGroup::Spatial,
            &mut Mode::Eval,
            &ForwardOptions {
                want_grad: false,
                want_aux: false,
            },
        )
        .unwrap();
        assert_eq!(
            sp1.tape.value(sp1.pred).at2(0, 0).to_bits(),
            sp2.tape.value(sp2.pred).at2(0, 0).to_bits(),
            "spatial mask must be exactly position independent"
        );
    }
    assert!(worst_perm <= 1e-10, "permutation error {worst_perm}");
    assert!(worst_rigid <= 1e-9, "rigid-motion error {worst_rigid}");
    println!(
        "criterion 4 PASS: 100 graphs, permutation error {worst_perm:.3e} (<= 1e-10), rigid-motion error {worst_rigid:.3e} (<= 1e-9), spatial mask exact"
    );
}

#[test]
fn criterion_05_pack_vs_single_equivalence() {
    let cfg = ModelConfig::toy();
    let vocab = Vocabulary::toy();
    let params = ParamStore::init(&cfg, &vocab, 47);
    let enc = cfg.encoding_config();
    let spec = PackSpec::default();
    let graphs = random_graphs(450, 14, 5005, true);
    let feats = featurize_dataset(&graphs, &enc).unwrap();
    let sizes: Vec<GraphSize> = graphs
        .iter()
        .enumerate()
        .map(|(id, g)| GraphSize {
            id,
            nodes: g.num_nodes,
            edges: g.num_edges(),
        })
        .collect();
    let packs = pack_stream(&sizes, spec).unwrap();
    assert!(packs.len() >= 50, "only {} packs", packs.len());

    let mut worst: f64 = 0.0;
    let mut compared = 0usize;
    for pack in packs.iter().take(50) {
        let items: Vec<BatchItem> = pack
            .entries
            .iter()
            .map(|e| BatchItem {
                graph: &graphs[e.graph_id],
                clean: &graphs[e.graph_id],
                features: &feats[e.graph_id],
                sign_flips: None,
            })
            .collect();
        let batch = PackedBatch::assemble(spec, &items, &enc).unwrap();
        let packed = predict_batch(&cfg, &params, &batch).unwrap();
        for (k, entry) in pack.entries.iter().enumerate() {
            let g = &graphs[entry.graph_id];
            let f = &feats[entry.graph_id];
            let single = exact_batch(&cfg, &[g], &[f]);
            let alone = predict_batch(&cfg, &params, &single).unwrap()[0];
            worst = worst.max((alone - packed[k]).abs());
            compared += 1;
        }
    }
    assert!(worst <= 1e-10, "pack-vs-single error {worst}");
    println!(
        "criterion 5 PASS: {compared} graphs over 50 packs, max |packed - alone| = {worst:.3e} (<= 1e-10)"
    );
}

#[test]
fn criterion_06_oracle_equivalence() {
    let enc = EncodingConfig::default();
    let graphs = random_graphs(200, 14, 6006, false);

    // SPD vs Floyd-Warshall, exact
    for g in &graphs {
        let m = spd_map(g, &enc);
        let n = g.num_nodes;
        const INF: usize = usize::MAX / 4;
        let mut d = vec![INF; n * n];
        for i in 0..n {
            d[i * n + i] = 0;
        }
        for &(u, v) in &g.edges {
            d[u * n + v] = 1;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i * n + k].saturating_add(d[k * n + j]);
                    if via < d[i * n + j] {
                        d[i * n + j] = via;
                    }
                }
            }
        }
        let fw: Vec<usize> = d
            .iter()
            .map(|&x| if x >= INF { usize::MAX } else { x })
            .collect();
        assert_eq!(m.dist, fw, "BFS disagrees with Floyd-Warshall");
    }

    // random walks vs independent matrix powers, <= 1e-12
    let mut worst_rw: f64 = 0.0;
    for g in &graphs {
        let n = g.num_nodes;
        let f = random_walk_features(g, &enc);
        let deg = g.degrees();
        let mut p = vec![0.0; n * n];
        for &(u, v) in &g.edges {
            p[u * n + v] = 1.0 / deg[u] as f64;
        }
        let mut acc = vec![0.0; n * n];
        for i in 0..n {
            acc[i * n + i] = 1.0;
        }
        for s in 1..=enc.k_rw {
            let mut next = vec![0.0; n * n];
            for i in 0..n {
                for l in 0..n {
                    let a = acc[i * n + l];
                    if a == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        next[i * n + j] += a * p[l * n + j];
                    }
                }
            }
            acc = next;
            for i in 0..n {
                worst_rw = worst_rw.max((f.probs.at2(i, s - 1) - acc[i * n + i]).abs());
            }
        }
    }
    assert!(worst_rw <= 1e-12, "random-walk error {worst_rw}");

    // Laplacian eigen residuals, <= 1e-8 (both the raw solver output and
    // the truncated feature vectors via their Rayleigh quotients)
    let mut worst_resid: f64 = 0.0;
    for g in &graphs {
        let n = g.num_nodes;
        let deg = g.degrees();
        let mut lap = vec![0.0; n * n];
        for i in 0..n {
            lap[i * n + i] = deg[i] as f64;
        }
        for &(u, v) in &g.edges {
            lap[u * n + v] = -1.0;
        }
        let (vals, vecs) = symmetric_eigen(&lap, n).unwrap();
        for j in 0..n {
            for r in 0..n {
                let mut lv = 0.0;
                for c in 0..n {
                    lv += lap[r * n + c] * vecs[c * n + j];
                }
                let resid = (lv - vals[j] * vecs[r * n + j]).abs();
                worst_resid = worst_resid.max(resid / vals[j].abs().max(1.0));
            }
        }
        let f = laplacian_features(g, &enc).unwrap();
        let retained = (n - 1).min(enc.k_lap);
        for j in 0..retained {
            let v: Vec<f64> = (0..n).map(|r| f.eig_vectors.at2(r, j)).collect();
            let lam: f64 = (0..n)
                .map(|r| {
                    let lv: f64 = (0..n).map(|c| lap[r * n + c] * v[c]).sum();
                    v[r] * lv
                })
                .sum();
            for r in 0..n {
                let lv: f64 = (0..n).map(|c| lap[r * n + c] * v[c]).sum();
                let resid = (lv - lam * v[r]).abs();
                worst_resid = worst_resid.max(resid / lam.abs().max(1.0));
            }
        }
    }
    assert!(worst_resid <= 1e-8, "eigen residual {worst_resid}");
    println!(
        "criterion 6 PASS: SPD exact on 200 graphs, random-walk error {worst_rw:.3e} (<= 1e-12), eigen residual {worst_resid:.3e} (<= 1e-8)"
    );
}

fn overfit_configs() -> (ModelConfig, TrainConfig) {
    let mcfg = ModelConfig {
        d_node: 64,
        d_edge: 32,
        d_global: 16,
        layers: 4,
        heads: 8,
        num_kernels: 16,
        k_lap: 4,
        k_rw: 8,
        encoder_latent: 16,
        embed_dim: 16,
        max_spd: 10,
        max_degree: 8,
        dropout_message: 0.0,
        dropout_node: 0.0,
        dropout_global: 0.0,
        dropout_attention: 0.0,
        dropout_encoder: 0.0,
        dropout_ffn: 0.0,
        graph_dropout_max: 0.0,
        ..ModelConfig::default()
    };
    // the LR schedule must finish its decay inside the step budget for the
    // L1 objective to settle: 9 nominal packs/epoch x 222 epochs ~ 2000
    let tcfg = TrainConfig {
        seed: 7,
        peak_lr: 5e-3,
        warmup_epochs: 10,
        total_epochs: 222,
        max_steps: 2000,
        p_corrupt: 0.0,
        w_noisy_nodes: 0.0,
        w_noisy_edges: 0.0,
        mask_ratio_spatial: 0.0,
        mask_ratio_topological: 0.0,
        mask_ratio_none: 1.0,
        randomize_eig_signs: false,
        pack_max_nodes: 40,
        pack_max_edges: 80,
        pack_max_graphs: 8,
        ..TrainConfig::default()
    };
    (mcfg, tcfg)
}

#[test]
fn criterion_07_training_sanity() {
    let start = Instant::now();
    let dataset = synth_dataset(&SynthConfig {
        num_graphs: 64,
        min_nodes: 3,
        max_nodes: 7,
        vocab: Vocabulary::toy(),
        with_positions: true,
        with_targets: true,
        seed: 2024,
        ..SynthConfig::default()
    });
    let split = make_split(dataset.len(), 0, SplitName::Original, 0).unwrap();
    let (mcfg, tcfg) = overfit_configs();

    let a = train(&dataset, &split, &mcfg, &tcfg).unwrap();
    let b = train(&dataset, &split, &mcfg, &tcfg).unwrap();
    let elapsed = start.elapsed();

    assert_eq!(a.metrics_csv, b.metrics_csv, "logs must be bit-identical");
    assert!(a.summary.steps <= 2000);
    assert!(
        a.summary.final_train_mae < 0.01,
        "train MAE {} after {} steps",
        a.summary.final_train_mae,
        a.summary.steps
    );
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}");
    println!(
        "criterion 7 PASS: train MAE {:.5} after {} steps, bit-identical repeat logs, {elapsed:?}",
        a.summary.final_train_mae, a.summary.steps
    );
}

#[test]
fn criterion_08_stochastic_mechanism_frequencies() {
    // masking groups at ratio 1:3:1
    let mut rng = RngStream::new(88, 0);
    let n = 1_000_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        match sample_masking_group((1.0, 3.0, 1.0), &mut rng) {
            MaskingGroup::Spatial => counts[0] += 1,
            MaskingGroup::Topological => counts[1] += 1,
            MaskingGroup::NoMask => counts[2] += 1,
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    for (f, expect) in freqs.iter().zip([0.2, 0.6, 0.2]) {
        assert!((f - expect).abs() <= 0.005, "group frequencies {freqs:?}");
    }

    // corruption rate 0.01 over 1e6 entries
    let vocab = Vocabulary {
        node: vec![9],
        edge: vec![],
    };
    let g = MolecularGraph {
        num_nodes: 1_000_000,
        edges: vec![],
        node_cats: vec![vec![4]; 1_000_000],
        edge_cats: vec![],
        positions: None,
        target: None,
    };
    let mut rng = RngStream::new(89, 0);
    let (out, masks) = corrupt_features(&g, &vocab, 0.01, &mut rng);
    let changed = out
        .node_cats
        .iter()
        .zip(&masks.node_changed)
        .filter(|(row, m)| {
            assert_eq!(row[0] != 4, m[0]);
            row[0] != 4
        })
        .count();
    let rate = changed as f64 / 1e6;
    assert!((rate - 0.01).abs() <= 0.001, "corruption rate {rate}");
    println!(
        "criterion 8 PASS: masking frequencies ({:.4}, {:.4}, {:.4}) vs (0.2, 0.6, 0.2) +/- 0.005; corruption rate {rate:.5} vs 0.01 +/- 0.001",
        freqs[0], freqs[1], freqs[2]
    );
}

#[test]
fn criterion_09_packing_efficiency_on_reference_moments() {
    // synthetic sizes with the reference dataset's moments: about 14 atoms
    // and 15 bonds (30 directed edges) per molecule
    let mut rng = RngStream::new(99, 0);
    let mut sizes = Vec::with_capacity(4000);
    for id in 0..4000 {
        let nodes = (rng.normal(14.0, 2.5).round() as i64).clamp(8, 24) as usize;
        let bonds = nodes - 1 + (rng.normal(2.0, 1.0).round() as i64).clamp(0, 6) as usize;
        sizes.push(GraphSize {
            id,
            nodes,
            edges: 2 * bonds,
        });
    }
    let mean_nodes = sizes.iter().map(|s| s.nodes).sum::<usize>() as f64 / sizes.len() as f64;
    let mean_edges = sizes.iter().map(|s| s.edges).sum::<usize>() as f64 / sizes.len() as f64;
    assert!((mean_nodes - 14.0).abs() < 1.0, "mean nodes {mean_nodes}");
    assert!((mean_edges - 30.0).abs() < 2.5, "mean directed edges {mean_edges}");

    let spec = PackSpec::default();
    let packs = pack_stream(&sizes, spec).unwrap();

    // capacity and bijection invariants
    let mut seen = Vec::new();
    for p in &packs {
        assert!(p.nodes_used() <= spec.max_nodes);
        assert!(p.edges_used() <= spec.max_edges);
        assert!(p.graphs_used() <= spec.max_graphs);
        seen.extend(p.entries.iter().map(|e| e.graph_id));
    }
    assert_eq!(seen, (0..sizes.len()).collect::<Vec<_>>());

    let eff = pack_efficiency(&packs).unwrap();
    assert!(
        eff.node_efficiency >= 0.75 && eff.edge_efficiency >= 0.75,
        "efficiencies {eff:?}"
    );
    println!(
        "criterion 9 PASS: node efficiency {:.3}, edge efficiency {:.3}, {:.2} graphs/pack (reference reports ~0.87 and ~3.6)",
        eff.node_efficiency, eff.edge_efficiency, eff.mean_graphs_per_pack
    );
}

#[test]
fn criterion_10_ensemble_beats_mean_member() {
    let dataset = synth_dataset(&SynthConfig {
        num_graphs: 48,
        min_nodes: 3,
        max_nodes: 7,
        vocab: Vocabulary::toy(),
        with_positions: true,
        with_targets: true,
        seed: 555,
        ..SynthConfig::default()
    });
    let split = make_split(dataset.len(), 12, SplitName::Original, 0).unwrap();
    let mcfg = ModelConfig::toy();

    let dir = tempfile::tempdir().unwrap();
    let mut members = Vec::new();
    for seed in 0..5u64 {
        let tcfg = TrainConfig {
            seed: 1000 + seed,
            peak_lr: 1.5e-3,
            warmup_epochs: 2,
            total_epochs: 40,
            max_steps: 250,
            pack_max_nodes: 40,
            pack_max_edges: 80,
            pack_max_graphs: 6,
            ..TrainConfig::default()
        };
        let out = train(&dataset, &split, &mcfg, &tcfg).unwrap();
        let path = dir.path().join(format!("member{seed}.gpsc"));
        save_checkpoint(&path, &mcfg, &dataset.vocab, &out.params).unwrap();
        members.push(MemberSpec {
            checkpoint: Some(path),
            predictions: None,
            weight: 1.0,
        });
    }
    let spec = EnsembleSpec { members };
    let (report, _) = ensemble_eval(&spec, &dataset, &split).unwrap();
    let avg = report.avg_member_mae.unwrap();
    let ens = report.ensembled_mae.unwrap();
    let max_member = report
        .members
        .iter()
        .filter_map(|m| m.mae)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(ens <= max_member, "ensemble {ens} worse than worst member {max_member}");
    assert!(
        ens < avg,
        "ensembled MAE {ens} not below mean member MAE {avg}"
    );
    println!(
        "criterion 10 PASS: 5 members, mean member MAE {avg:.4}, ensembled MAE {ens:.4}"
    );
}

#[test]
fn full_config_forward_is_finite_and_deterministic() {
    // one 14-node molecule through the complete 16-layer configuration
    let cfg = ModelConfig::default();
    let vocab = Vocabulary::reference_set1();
    let synth = SynthConfig {
        min_nodes: 14,
        max_nodes: 14,
        vocab: vocab.clone(),
        with_positions: true,
        with_targets: true,
        ..SynthConfig::default()
    };
    let mut rng = RngStream::new(14, 0);
    let g = synth_graph(&synth, &mut rng);
    let f = featurize_graph(&g, &cfg.encoding_config()).unwrap();
    let params = ParamStore::init(&cfg, &vocab, 1);
    let batch = exact_batch(&cfg, &[&g], &[&f]);
    let a = predict_batch(&cfg, &params, &batch).unwrap();
    let b = predict_batch(&cfg, &params, &batch).unwrap();
    assert!(a[0].is_finite());
    assert_eq!(a[0].to_bits(), b[0].to_bits());
    println!("full-config forward: prediction {} (finite, repeat-run identical)", a[0]);
}

#[test]
fn weighted_mean_sanity_from_the_report_table() {
    // weights (1, 0.5) on predictions 2.0 and 5.0 average to 3.0
    let out = combine(&[(vec![2.0], 1.0), (vec![5.0], 0.5)]).unwrap();
    assert!((out[0] - 3.0).abs() < 1e-15);
}

#[test]
fn gradcheck_at_default_init_with_fine_step() {
    // the shipped 0.02-scale embedding init is poorly conditioned for an
    // h = 1e-4 difference; under h-refinement the analytic gradients match
    let mut cfg = ModelConfig::toy();
    cfg.dropout_message = 0.0;
    cfg.dropout_node = 0.0;
    cfg.dropout_global = 0.0;
    cfg.dropout_attention = 0.0;
    cfg.dropout_encoder = 0.0;
    cfg.graph_dropout_max = 0.0;
    let vocab = Vocabulary::toy();
    let graph = {
        let synth = SynthConfig {
            min_nodes: 5,
            max_nodes: 5,
            vocab: vocab.clone(),
            ..SynthConfig::default()
        };
        let mut rng = RngStream::new(41, 0);
        synth_graph(&synth, &mut rng)
    };
    let feats = featurize_graph(&graph, &cfg.encoding_config()).unwrap();
    let batch = exact_batch(&cfg, &[&graph], &[&feats]);
    let named: Vec<(String, Tensor)> = ParamStore::init(&cfg, &vocab, 23)
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let weights = LossWeights {
        homo_lumo: 1.0,
        noisy_nodes: 1.2,
        noisy_edges: 1.2,
    };
    let mut eval = |ps: &[(String, Tensor)],
                    want: bool|
     -> gpspp::Result<(f64, Option<Vec<Tensor>>)> {
        let mut work = ParamStore::init(&cfg, &vocab, 23);
        for (name, tensor) in ps {
            *work.get_mut(name).unwrap() = tensor.clone();
        }
        let mut fwd = forward(
            &cfg,
            &work,
            &batch,
            MaskingGroup::NoMask,
            &mut Mode::Eval,
            &ForwardOptions {
                want_grad: want,
                want_aux: true,
            },
        )?;
        let loss = composite_loss(&mut fwd, &batch, weights, None)?;
        if want {
            fwd.tape.backward(loss.total)?;
            Ok((loss.total_value, Some(collect_grads(&fwd, &work)?)))
        } else {
            Ok((loss.total_value, None))
        }
    };
    let mut rng = RngStream::new(60, 0);
    let report = grad_check(&named, &mut eval, 1e-6, 40, &mut rng).unwrap();
    assert!(
        report.max_rel_err <= 1e-4,
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
    println!(
        "default-init gradcheck: max rel err {:.3e} at step 1e-6 over {} coordinates",
        report.max_rel_err, report.checked
    );
}

#[test]
fn single_layer_gradcheck_at_64_dims() {
    use gpspp::diff::Tape;
    use gpspp::model::{gps_block, Binder, StreamState};

    // one block in isolation, 64-wide node states, gradients checked with
    // respect to the inputs and every layer tensor
    let cfg = ModelConfig {
        d_node: 64,
        d_edge: 32,
        d_global: 16,
        layers: 1,
        heads: 8,
        num_kernels: 8,
        k_lap: 4,
        k_rw: 6,
        encoder_latent: 8,
        embed_dim: 8,
        max_spd: 10,
        max_degree: 8,
        dropout_message: 0.0,
        dropout_node: 0.0,
        dropout_global: 0.0,
        dropout_attention: 0.0,
        dropout_encoder: 0.0,
        dropout_ffn: 0.0,
        graph_dropout_max: 0.0,
        ..ModelConfig::default()
    };
    let vocab = Vocabulary::toy();
    let graph = {
        let synth = SynthConfig {
            min_nodes: 5,
            max_nodes: 5,
            vocab: vocab.clone(),
            ..SynthConfig::default()
        };
        let mut rng = RngStream::new(43, 0);
        synth_graph(&synth, &mut rng)
    };
    let feats = featurize_graph(&graph, &cfg.encoding_config()).unwrap();
    let batch = exact_batch(&cfg, &[&graph], &[&feats]);

    let base = ParamStore::init(&cfg, &vocab, 29);
    let mut rng = RngStream::new(44, 0);
    let rand = |shape: Vec<usize>, rng: &mut RngStream| {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.uniform(-0.8, 0.8)).collect()).unwrap()
    };
    let mut named: Vec<(String, Tensor)> = base
        .iter()
        .filter(|(n, _)| n.starts_with("layer0/"))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    named.push(("input/x".into(), rand(vec![5, 64], &mut rng)));
    named.push(("input/e".into(), rand(vec![batch.cap_m, 32], &mut rng)));
    named.push(("input/g".into(), rand(vec![1, 16], &mut rng)));
    named.push(("input/bias".into(), rand(vec![25, 8], &mut rng)));

    let mut eval = |ps: &[(String, Tensor)],
                    want: bool|
     -> gpspp::Result<(f64, Option<Vec<Tensor>>)> {
        let mut work = ParamStore::init(&cfg, &vocab, 29);
        let mut inputs = std::collections::HashMap::new();
        for (name, tensor) in ps {
            if let Some(stripped) = name.strip_prefix("input/") {
                inputs.insert(stripped.to_string(), tensor.clone());
            } else {
                *work.get_mut(name).unwrap() = tensor.clone();
            }
        }
        let mut tape = Tape::new();
        let binder = Binder::bind(&mut tape, &work, want);
        let x = tape.leaf(inputs["x"].clone(), want);
        let e = tape.leaf(inputs["e"].clone(), want);
        let g = tape.leaf(inputs["g"].clone(), want);
        let bias = tape.leaf(inputs["bias"].clone(), want);
        let state = gps_block(
            &mut tape,
            &cfg,
            &binder,
            &batch,
            0,
            StreamState {
                x,
                e: Some(e),
                g: Some(g),
            },
            Some(bias),
            &mut Mode::Eval,
        )?;
        // weighted sums of all three output streams
        let proj = |tape: &mut Tape, v| -> gpspp::Result<gpspp::diff::Var> {
            let len = tape.value(v).len();
            let w: Vec<f64> = (0..len).map(|k| 0.4 + 0.3 * ((k as f64) * 0.61).sin()).collect();
            let m = tape.mul_const(v, w)?;
            Ok(tape.sum_all(m))
        };
        let mut obj = proj(&mut tape, state.x)?;
        for v in [state.e, state.g].into_iter().flatten() {
            let s = proj(&mut tape, v)?;
            obj = tape.add(obj, s)?;
        }
        let val = tape.value(obj).item();
        if want {
            tape.backward(obj)?;
            let grads = ps
                .iter()
                .map(|(name, tensor)| {
                    let var = if let Some(stripped) = name.strip_prefix("input/") {
                        match stripped {
                            "x" => x,
                            "e" => e,
                            "g" => g,
                            _ => bias,
                        }
                    } else {
                        binder.var(name)?
                    };
                    Ok(tape
                        .grad(var)
                        .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec())))
                })
                .collect::<gpspp::Result<Vec<_>>>()?;
            Ok((val, Some(grads)))
        } else {
            Ok((val, None))
        }
    };
    let mut sample_rng = RngStream::new(45, 0);
    let report = grad_check(&named, &mut eval, 1e-4, 120, &mut sample_rng).unwrap();
    assert!(
        report.max_rel_err <= 1e-5,
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
    println!(
        "single-layer gradcheck: max rel err {:.3e} over {} coordinates (<= 1e-5 at step 1e-4)",
        report.max_rel_err, report.checked
    );
}
