//! Noisy nodes / edges: categorical input corruption for the denoising
//! objective.

use crate::graph::{MolecularGraph, Vocabulary};
use crate::rng::RngStream;

/// Which entries were changed, indexed `[node_or_edge][column]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionMasks {
    pub node_changed: Vec<Vec<bool>>,
    pub edge_changed: Vec<Vec<bool>>,
}

impl CorruptionMasks {
    pub fn any(&self) -> bool {
        self.node_changed.iter().flatten().any(|&b| b)
            || self.edge_changed.iter().flatten().any(|&b| b)
    }
}

/// Replace each categorical entry, independently with probability
/// `p_corrupt`, by a uniformly drawn *different* category of its column.
/// Bonds are corrupted once and mirrored to both directed edges, keeping the
/// bidirectional-equality invariant. Columns with a single category are
/// never corrupted. Topology, positions and targets are untouched.
pub fn corrupt_features(
    g: &MolecularGraph,
    vocab: &Vocabulary,
    p_corrupt: f64,
    rng: &mut RngStream,
) -> (MolecularGraph, CorruptionMasks) {
    let mut out = g.clone();
    let mut node_changed = vec![vec![false; vocab.node.len()]; g.num_nodes];
    let mut edge_changed = vec![vec![false; vocab.edge.len()]; g.num_edges()];

    if p_corrupt > 0.0 {
        for (i, row) in out.node_cats.iter_mut().enumerate() {
            for (c, &size) in vocab.node.iter().enumerate() {
                if size < 2 {
                    continue;
                }
                if rng.next_f64() < p_corrupt {
                    let r = rng.next_below(size - 1);
                    let new = if r >= row[c] { r + 1 } else { r };
                    row[c] = new;
                    node_changed[i][c] = true;
                }
            }
        }

        // decide per bond, apply to both directions
        let mut decided: std::collections::HashMap<(usize, usize), Vec<Option<usize>>> =
            std::collections::HashMap::new();
        for (k, &(u, v)) in g.edges.iter().enumerate() {
            let key = (u.min(v), u.max(v));
            let plan = decided.entry(key).or_insert_with(|| {
                vocab
                    .edge
                    .iter()
                    .enumerate()
                    .map(|(c, &size)| {
                        if size < 2 || rng.next_f64() >= p_corrupt {
                            None
                        } else {
                            let old = g.edge_cats[k][c];
                            let r = rng.next_below(size - 1);
                            Some(if r >= old { r + 1 } else { r })
                        }
                    })
                    .collect()
            });
            for (c, slot) in plan.iter().enumerate() {
                if let Some(new) = slot {
                    out.edge_cats[k][c] = *new;
                    edge_changed[k][c] = true;
                }
            }
        }
    }

    (
        out,
        CorruptionMasks {
            node_changed,
            edge_changed,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synth_graph, SynthConfig};

    fn sample_graph(seed: u64) -> (MolecularGraph, Vocabulary) {
        let vocab = Vocabulary::toy();
        let cfg = SynthConfig {
            min_nodes: 5,
            max_nodes: 9,
            vocab: vocab.clone(),
            ..SynthConfig::default()
        };
        let mut rng = RngStream::new(seed, 0);
        (synth_graph(&cfg, &mut rng), vocab)
    }

    #[test]
    fn zero_probability_is_the_identity() {
        let (g, vocab) = sample_graph(1);
        let mut rng = RngStream::new(2, 0);
        let (out, masks) = corrupt_features(&g, &vocab, 0.0, &mut rng);
        assert_eq!(out, g);
        assert!(!masks.any());
    }

    #[test]
    fn probability_one_flips_every_binary_entry() {
        let vocab = Vocabulary {
            node: vec![2, 2],
            edge: vec![2],
        };
        let g = MolecularGraph {
            num_nodes: 3,
            edges: vec![(0, 1), (1, 0), (1, 2), (2, 1)],
            node_cats: vec![vec![0, 1], vec![1, 0], vec![0, 0]],
            edge_cats: vec![vec![0], vec![0], vec![1], vec![1]],
            positions: None,
            target: None,
        };
        let mut rng = RngStream::new(3, 0);
        let (out, masks) = corrupt_features(&g, &vocab, 1.0, &mut rng);
        for (i, row) in out.node_cats.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(v, 1 - g.node_cats[i][c], "forced flip");
                assert!(masks.node_changed[i][c]);
            }
        }
        for (k, row) in out.edge_cats.iter().enumerate() {
            assert_eq!(row[0], 1 - g.edge_cats[k][0]);
        }
    }

    #[test]
    fn corruption_preserves_topology_and_mirror_invariant() {
        let (g, vocab) = sample_graph(4);
        let mut rng = RngStream::new(5, 0);
        let (out, _) = corrupt_features(&g, &vocab, 0.4, &mut rng);
        assert_eq!(out.edges, g.edges);
        assert_eq!(out.positions, g.positions);
        assert_eq!(out.target, g.target);
        out.validate(&vocab).unwrap(); // includes reverse-edge equality
    }

    #[test]
    fn corrupted_fraction_matches_the_rate() {
        let vocab = Vocabulary {
            node: vec![7],
            edge: vec![],
        };
        let g = MolecularGraph {
            num_nodes: 100_000,
            edges: vec![],
            node_cats: vec![vec![3]; 100_000],
            edge_cats: vec![],
            positions: None,
            target: None,
        };
        let rng = RngStream::new(6, 0);
        let mut changed = 0usize;
        let mut total = 0usize;
        for rep in 0..10 {
            let mut r = rng.derive(&[rep]);
            let (out, masks) = corrupt_features(&g, &vocab, 0.01, &mut r);
            for (i, row) in out.node_cats.iter().enumerate() {
                total += 1;
                if row[0] != 3 {
                    changed += 1;
                    assert!(masks.node_changed[i][0]);
                    assert!(row[0] < 7);
                }
            }
        }
        let fraction = changed as f64 / total as f64;
        assert!((fraction - 0.01).abs() <= 0.001, "fraction {fraction}");
    }

    #[test]
    fn vocabulary_of_one_is_never_corrupted() {
        let vocab = Vocabulary {
            node: vec![1, 3],
            edge: vec![1],
        };
        let g = MolecularGraph {
            num_nodes: 50,
            edges: vec![(0, 1), (1, 0)],
            node_cats: vec![vec![0, 1]; 50],
            edge_cats: vec![vec![0], vec![0]],
            positions: None,
            target: None,
        };
        let mut rng = RngStream::new(7, 0);
        let (out, _) = corrupt_features(&g, &vocab, 1.0, &mut rng);
        for row in &out.node_cats {
            assert_eq!(row[0], 0); // column 0 untouched
            assert_ne!(row[1], 1); // column 1 forced different
        }
        assert_eq!(out.edge_cats, g.edge_cats);
    }
}
