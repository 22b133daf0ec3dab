//! Weighted ensembling of member predictions, from live checkpoints or
//! saved prediction files, with per-member and ensembled MAE reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encodings::featurize_dataset;
use crate::graph::{Dataset, DatasetSplit};
use crate::model::load_checkpoint;
use crate::train::predict_indices;
use crate::{Error, Result};

/// One ensemble member: exactly one of `checkpoint` or `predictions`, plus
/// a nonnegative weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSpec>,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.members.iter().any(|m| m.weight > 0.0) {
            return Err(Error::Config("at least one member needs a positive weight".into()));
        }
        for (i, m) in self.members.iter().enumerate() {
            if m.weight < 0.0 {
                return Err(Error::Config(format!("member {i} has negative weight")));
            }
            if m.checkpoint.is_some() == m.predictions.is_some() {
                return Err(Error::Config(format!(
                    "member {i} must name exactly one of checkpoint / predictions"
                )));
            }
        }
        Ok(())
    }
}

/// The spec file is a JSON list of members.
pub fn load_spec(path: impl AsRef<Path>) -> Result<EnsembleSpec> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let members: Vec<MemberSpec> =
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let spec = EnsembleSpec { members };
    spec.validate()?;
    Ok(spec)
}

/// Predictions CSV: `graph_id,value` with a header line.
pub fn save_predictions(path: impl AsRef<Path>, preds: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("graph_id,value\n");
    for (id, v) in preds {
        out.push_str(&format!("{id},{v}\n"));
    }
    std::fs::write(path.as_ref(), out)?;
    Ok(())
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.trim() == "graph_id,value" {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id: usize = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "bad graph_id".into(),
            })?;
        let value: f64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "bad value".into(),
            })?;
        out.push((id, value));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberReport {
    pub source: String,
    pub weight: f64,
    /// MAE over the labeled eval graphs, when any.
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleReport {
    pub members: Vec<MemberReport>,
    /// Plain mean of the member MAEs.
    pub avg_member_mae: Option<f64>,
    pub ensembled_mae: Option<f64>,
    pub eval_graphs: usize,
}

/// Per-member predictions for `indices` of the dataset, in index order.
fn member_predictions(
    member: &MemberSpec,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(String, Vec<f64>)> {
    if let Some(path) = &member.checkpoint {
        let (cfg, vocab, params) = load_checkpoint(path)?;
        if vocab != dataset.vocab {
            return Err(Error::Checkpoint(format!(
                "vocabulary of '{}' does not match the dataset",
                path.display()
            )));
        }
        let feats = featurize_dataset(&dataset.graphs, &cfg.encoding_config())?;
        let spec = crate::pack::PackSpec::default();
        let preds = predict_indices(&cfg, &params, &dataset.graphs, &feats, indices, spec)?;
        Ok((path.display().to_string(), preds))
    } else if let Some(path) = &member.predictions {
        let stored = load_predictions(path)?;
        let map: std::collections::HashMap<usize, f64> = stored.into_iter().collect();
        let preds = indices
            .iter()
            .map(|i| {
                map.get(i).copied().ok_or_else(|| {
                    Error::Config(format!(
                        "predictions file '{}' missing graph {i}",
                        path.display()
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((path.display().to_string(), preds))
    } else {
        Err(Error::Config("member names no source".into()))
    }
}

/// Weighted mean of member predictions: `Σ w·ŷ / Σ w` per graph.
pub fn combine(members: &[(Vec<f64>, f64)]) -> Result<Vec<f64>> {
    let total: f64 = members.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::Config("total ensemble weight is zero".into()));
    }
    let n = members.first().map_or(0, |(p, _)| p.len());
    let mut out = vec![0.0; n];
    for (preds, w) in members {
        if preds.len() != n {
            return Err(Error::Config("member prediction lengths disagree".into()));
        }
        for (o, p) in out.iter_mut().zip(preds) {
            *o += w * p;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

/// Ensemble predictions over `indices`, in index order.
pub fn ensemble_predict(
    spec: &EnsembleSpec,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut members = Vec::with_capacity(spec.members.len());
    for m in &spec.members {
        let (_, preds) = member_predictions(m, dataset, indices)?;
        members.push((preds, m.weight));
    }
    combine(&members)
}

/// Per-member and ensembled MAE over the split's eval indices.
pub fn ensemble_eval(
    spec: &EnsembleSpec,
    dataset: &Dataset,
    split: &DatasetSplit,
) -> Result<(EnsembleReport, Vec<f64>)> {
    spec.validate()?;
    let indices = &split.eval_indices;
    let targets: Vec<Option<f64>> = indices.iter().map(|&i| dataset.graphs[i].target).collect();
    let labeled: Vec<usize> = (0..indices.len()).filter(|&k| targets[k].is_some()).collect();

    let mae_of = |preds: &[f64]| -> Option<f64> {
        if labeled.is_empty() {
            return None;
        }
        let total: f64 = labeled
            .iter()
            .map(|&k| (preds[k] - targets[k].unwrap()).abs())
            .sum();
        Some(total / labeled.len() as f64)
    };

    let mut collected = Vec::with_capacity(spec.members.len());
    let mut reports = Vec::with_capacity(spec.members.len());
    for m in &spec.members {
        let (source, preds) = member_predictions(m, dataset, indices)?;
        reports.push(MemberReport {
            source,
            weight: m.weight,
            mae: mae_of(&preds),
        });
        collected.push((preds, m.weight));
    }
    let combined = combine(&collected)?;
    let member_maes: Vec<f64> = reports.iter().filter_map(|r| r.mae).collect();
    let avg = (!member_maes.is_empty())
        .then(|| member_maes.iter().sum::<f64>() / member_maes.len() as f64);
    let report = EnsembleReport {
        members: reports,
        avg_member_mae: avg,
        ensembled_mae: mae_of(&combined),
        eval_graphs: indices.len(),
    };
    Ok((report, combined))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_mean_values() {
        let out = combine(&[(vec![2.0], 1.0), (vec![5.0], 0.5)]).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_member_is_identity_and_duplicates_collapse() {
        let p = vec![1.5, -0.25, 7.0];
        let one = combine(&[(p.clone(), 1.0)]).unwrap();
        assert_eq!(one, p);
        let two = combine(&[(p.clone(), 0.7), (p.clone(), 2.3)]).unwrap();
        for (a, b) in two.iter().zip(&p) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn uniform_weight_rescaling_changes_nothing() {
        let members = vec![(vec![1.0, 2.0], 1.0), (vec![3.0, 0.0], 0.5)];
        let scaled: Vec<(Vec<f64>, f64)> = members
            .iter()
            .map(|(p, w)| (p.clone(), w * 77.0))
            .collect();
        let a = combine(&members).unwrap();
        let b = combine(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_weight_members_change_nothing() {
        let base = vec![(vec![1.0, 4.0], 2.0)];
        let with_zero = vec![(vec![1.0, 4.0], 2.0), (vec![100.0, -9.0], 0.0)];
        assert_eq!(combine(&base).unwrap(), combine(&with_zero).unwrap());
    }

    #[test]
    fn spec_validation() {
        let bad = EnsembleSpec {
            members: vec![MemberSpec {
                checkpoint: None,
                predictions: None,
                weight: 1.0,
            }],
        };
        assert!(bad.validate().is_err());
        let zero = EnsembleSpec {
            members: vec![MemberSpec {
                checkpoint: Some("x".into()),
                predictions: None,
                weight: 0.0,
            }],
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn predictions_file_round_trip() {
        let file = tempfile::NamedTempFile::new().unwrap();
        let preds = vec![(0, 1.25), (3, -0.5), (7, 2.0)];
        save_predictions(file.path(), &preds).unwrap();
        let back = load_predictions(file.path()).unwrap();
        assert_eq!(back, preds);
    }

    proptest::proptest! {
        // per-graph convexity of the weighted mean implies the ensembled
        // MAE never exceeds the worst member's MAE
        #[test]
        fn ensembled_mae_never_exceeds_worst_member(
            targets in proptest::collection::vec(-3.0_f64..3.0, 3..10),
            offsets in proptest::collection::vec(
                proptest::collection::vec(-2.0_f64..2.0, 3..10), 2..6),
            weights in proptest::collection::vec(0.01_f64..3.0, 2..6),
        ) {
            let n = targets.len();
            let members: Vec<(Vec<f64>, f64)> = offsets
                .iter()
                .zip(&weights)
                .map(|(off, &w)| {
                    let preds: Vec<f64> = (0..n)
                        .map(|i| targets[i] + off[i % off.len()])
                        .collect();
                    (preds, w)
                })
                .collect();
            let combined = combine(&members).unwrap();
            let mae = |preds: &[f64]| -> f64 {
                preds.iter().zip(&targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64
            };
            let worst = members.iter().map(|(p, _)| mae(p)).fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(mae(&combined) <= worst + 1e-12);
        }
    }
}
