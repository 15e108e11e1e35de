//! Report assembly: canonical JSON and a flat CSV, both deterministic.
//!
//! Accuracy cells are indexed by model, attack kind, and modality. The
//! delta rows mirror how the result tables compare groups: `delta_clean`
//! is the robust model minus the best standard (clean-trained) model per
//! cell, `delta_robust` the robust model minus the best robust-trained
//! baseline. All maps are ordered, so serializing the same report twice
//! yields identical bytes; the report hash is the SHA-256 of those bytes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::DetectionReport;

/// Names of the clean-trained standard fusion models.
pub const STANDARD_MODELS: [&str; 3] = ["concat", "mean", "early"];
/// Names of the robust-trained baseline fusion models.
pub const ROBUST_BASELINES: [&str; 2] = ["gated", "lel"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionSummary {
    pub conditions: Vec<String>,
    pub per_condition: Vec<f64>,
    pub pooled: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl From<DetectionReport> for DetectionSummary {
    fn from(r: DetectionReport) -> Self {
        DetectionSummary {
            conditions: r.conditions,
            per_condition: r.per_condition,
            pooled: r.pooled,
            confusion: r.confusion,
        }
    }
}

/// All metrics of one model under one seed (or averaged over seeds).
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ModelMetrics {
    /// Absent for the oracle pseudo-row, which is attack-conditional.
    pub clean_acc: Option<f64>,
    /// Attack kind -> per-modality accuracy.
    #[serde(default)]
    pub robust_acc: BTreeMap<String, Vec<f64>>,
    /// Per-modality success rate of the targeted attack, when evaluated.
    #[serde(default)]
    pub targeted_success: Option<Vec<f64>>,
    #[serde(default)]
    pub detection: Option<DetectionSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedReport {
    pub seed: u64,
    pub models: BTreeMap<String, ModelMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    /// Seed-mean metrics per model (confusions are summed across seeds).
    pub mean: BTreeMap<String, ModelMetrics>,
    /// Robust model minus best standard model, per cell; `None` when the
    /// comparison set is absent.
    pub delta_clean: Option<BTreeMap<String, f64>>,
    /// Robust model minus best robust-trained baseline, per cell.
    pub delta_robust: Option<BTreeMap<String, f64>>,
}

/// Aggregate per-seed results into the report, computing means and deltas.
pub fn build_report(config_hash: String, per_seed: Vec<SeedReport>) -> Result<EvalReport> {
    if per_seed.is_empty() || per_seed.iter().any(|s| s.models.is_empty()) {
        return Err(Error::validation("report needs at least one evaluated model"));
    }
    let seeds: Vec<u64> = per_seed.iter().map(|s| s.seed).collect();
    let model_names: Vec<String> = per_seed[0].models.keys().cloned().collect();
    for s in &per_seed {
        let names: Vec<String> = s.models.keys().cloned().collect();
        if names != model_names {
            return Err(Error::validation(
                "seed reports disagree on the model set",
            ));
        }
    }

    let mut mean = BTreeMap::new();
    for name in &model_names {
        let metrics: Vec<&ModelMetrics> = per_seed.iter().map(|s| &s.models[name]).collect();
        mean.insert(name.clone(), average_metrics(&metrics));
    }

    let (delta_clean, delta_robust) = if mean.contains_key("robust") {
        (
            delta_against(&mean, "robust", &STANDARD_MODELS),
            delta_against(&mean, "robust", &ROBUST_BASELINES),
        )
    } else {
        (None, None)
    };

    Ok(EvalReport {
        config_hash,
        seeds,
        per_seed,
        mean,
        delta_clean,
        delta_robust,
    })
}

fn average_metrics(metrics: &[&ModelMetrics]) -> ModelMetrics {
    let n = metrics.len() as f64;
    let clean_acc = if metrics.iter().all(|m| m.clean_acc.is_some()) {
        Some(metrics.iter().map(|m| m.clean_acc.unwrap()).sum::<f64>() / n)
    } else {
        None
    };
    let mut robust_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (kind, accs) in &metrics[0].robust_acc {
        let mut avg = vec![0.0; accs.len()];
        for m in metrics {
            for (a, v) in avg.iter_mut().zip(&m.robust_acc[kind]) {
                *a += v / n;
            }
        }
        robust_acc.insert(kind.clone(), avg);
    }
    let targeted_success = if metrics.iter().all(|m| m.targeted_success.is_some()) {
        let width = metrics[0].targeted_success.as_ref().unwrap().len();
        let mut avg = vec![0.0; width];
        for m in metrics {
            for (a, v) in avg.iter_mut().zip(m.targeted_success.as_ref().unwrap()) {
                *a += v / n;
            }
        }
        Some(avg)
    } else {
        None
    };
    let detection = if metrics.iter().all(|m| m.detection.is_some()) {
        let first = metrics[0].detection.as_ref().unwrap();
        let conditions = first.conditions.clone();
        let mut per_condition = vec![0.0; first.per_condition.len()];
        let mut pooled = 0.0;
        let mut confusion = vec![vec![0usize; first.confusion[0].len()]; first.confusion.len()];
        for m in metrics {
            let d = m.detection.as_ref().unwrap();
            for (a, v) in per_condition.iter_mut().zip(&d.per_condition) {
                *a += v / n;
            }
            pooled += d.pooled / n;
            for (row, drow) in confusion.iter_mut().zip(&d.confusion) {
                for (cell, v) in row.iter_mut().zip(drow) {
                    *cell += v;
                }
            }
        }
        Some(DetectionSummary {
            conditions,
            per_condition,
            pooled,
            confusion,
        })
    } else {
        None
    };
    ModelMetrics {
        clean_acc,
        robust_acc,
        targeted_success,
        detection,
    }
}

/// Per-cell difference between one model and the best of a competitor set.
fn delta_against(
    mean: &BTreeMap<String, ModelMetrics>,
    subject: &str,
    competitors: &[&str],
) -> Option<BTreeMap<String, f64>> {
    let subject_metrics = mean.get(subject)?;
    let present: Vec<&ModelMetrics> = competitors
        .iter()
        .filter_map(|c| mean.get(*c))
        .collect();
    if present.is_empty() {
        return None;
    }
    let mut deltas = BTreeMap::new();
    if let Some(subject_clean) = subject_metrics.clean_acc {
        let best = present
            .iter()
            .filter_map(|m| m.clean_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        if best.is_finite() {
            deltas.insert("clean".to_string(), subject_clean - best);
        }
    }
    for (kind, accs) in &subject_metrics.robust_acc {
        for (i, acc) in accs.iter().enumerate() {
            let best = present
                .iter()
                .filter_map(|m| m.robust_acc.get(kind).and_then(|v| v.get(i)))
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if best.is_finite() {
                deltas.insert(format!("{kind}/m{i}"), acc - best);
            }
        }
    }
    Some(deltas)
}

/// Canonical JSON bytes (sorted keys, stable layout).
pub fn report_json(report: &EvalReport) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)
        .map_err(|e| Error::Config(format!("report encode: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// SHA-256 of the canonical JSON.
pub fn report_hash(report: &EvalReport) -> Result<String> {
    Ok(sha256_hex(&report_json(report)?))
}

/// Lowercase hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Flat table: one row per model x attack-kind x modality x metric with the
/// seed mean, seed std, and per-seed values.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("model,attack_kind,modality,metric,mean,std");
    for s in &report.seeds {
        out.push_str(&format!(",seed{s}"));
    }
    out.push('\n');

    let mut push_row = |model: &str, kind: &str, modality: &str, metric: &str, values: Vec<Option<f64>>| {
        let present: Vec<f64> = values.iter().filter_map(|v| *v).collect();
        let mean = if present.is_empty() {
            String::new()
        } else {
            format!("{:.4}", present.iter().sum::<f64>() / present.len() as f64)
        };
        let std = if present.len() < 2 {
            String::new()
        } else {
            let m = present.iter().sum::<f64>() / present.len() as f64;
            let var =
                present.iter().map(|v| (v - m).powi(2)).sum::<f64>() / present.len() as f64;
            format!("{:.4}", var.sqrt())
        };
        out.push_str(&format!("{model},{kind},{modality},{metric},{mean},{std}"));
        for v in values {
            match v {
                Some(x) => out.push_str(&format!(",{x:.4}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    };

    for model in report.mean.keys() {
        let per_seed = |f: &dyn Fn(&ModelMetrics) -> Option<f64>| -> Vec<Option<f64>> {
            report
                .per_seed
                .iter()
                .map(|s| f(&s.models[model]))
                .collect()
        };
        push_row(
            model,
            "clean",
            "-",
            "accuracy",
            per_seed(&|m| m.clean_acc),
        );
        for kind in report.mean[model].robust_acc.keys() {
            let width = report.mean[model].robust_acc[kind].len();
            for i in 0..width {
                let kind_owned = kind.clone();
                push_row(
                    model,
                    kind,
                    &format!("m{i}"),
                    "accuracy",
                    per_seed(&|m| m.robust_acc.get(&kind_owned).and_then(|v| v.get(i)).copied()),
                );
            }
        }
        if let Some(ts) = &report.mean[model].targeted_success {
            for i in 0..ts.len() {
                push_row(
                    model,
                    "targeted",
                    &format!("m{i}"),
                    "success_rate",
                    per_seed(&|m| m.targeted_success.as_ref().and_then(|v| v.get(i)).copied()),
                );
            }
        }
        if let Some(det) = &report.mean[model].detection {
            for (c, condition) in det.conditions.iter().enumerate() {
                push_row(
                    model,
                    "adaptive",
                    condition,
                    "detection_rate",
                    per_seed(&|m| {
                        m.detection
                            .as_ref()
                            .and_then(|d| d.per_condition.get(c))
                            .copied()
                    }),
                );
            }
            push_row(
                model,
                "adaptive",
                "pooled",
                "detection_rate",
                per_seed(&|m| m.detection.as_ref().map(|d| d.pooled)),
            );
        }
    }

    let mut delta_rows = |label: &str, deltas: &Option<BTreeMap<String, f64>>| {
        if let Some(deltas) = deltas {
            for (cell, value) in deltas {
                let (kind, modality) = match cell.split_once('/') {
                    Some((k, m)) => (k.to_string(), m.to_string()),
                    None => (cell.clone(), "-".to_string()),
                };
                out.push_str(&format!(
                    "{label},{kind},{modality},accuracy_delta,{value:.4},",
                ));
                for _ in &report.seeds {
                    out.push(',');
                }
                out.push('\n');
            }
        }
    };
    delta_rows("delta-clean", &report.delta_clean);
    delta_rows("delta-robust", &report.delta_robust);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(clean: f64, adaptive: Vec<f64>) -> ModelMetrics {
        ModelMetrics {
            clean_acc: Some(clean),
            robust_acc: BTreeMap::from([("adaptive".to_string(), adaptive)]),
            targeted_success: None,
            detection: None,
        }
    }

    fn seed_report(seed: u64, shift: f64) -> SeedReport {
        let mut models = BTreeMap::new();
        models.insert("concat".to_string(), metrics(0.9 + shift, vec![0.1, 0.2]));
        models.insert("mean".to_string(), metrics(0.85 + shift, vec![0.2, 0.1]));
        models.insert("gated".to_string(), metrics(0.88 + shift, vec![0.5, 0.5]));
        models.insert("robust".to_string(), metrics(0.89 + shift, vec![0.8, 0.7]));
        SeedReport { seed, models }
    }

    #[test]
    fn empty_model_set_is_rejected() {
        assert!(build_report("h".into(), vec![]).is_err());
        let empty = SeedReport {
            seed: 0,
            models: BTreeMap::new(),
        };
        assert!(build_report("h".into(), vec![empty]).is_err());
    }

    #[test]
    fn single_model_report_has_no_deltas() {
        let mut models = BTreeMap::new();
        models.insert("concat".to_string(), metrics(0.9, vec![0.1]));
        let report =
            build_report("h".into(), vec![SeedReport { seed: 0, models }]).unwrap();
        assert!(report.delta_clean.is_none());
        assert!(report.delta_robust.is_none());
    }

    #[test]
    fn deltas_compare_against_the_best_competitor_per_cell() {
        let report = build_report("h".into(), vec![seed_report(0, 0.0)]).unwrap();
        let dc = report.delta_clean.as_ref().unwrap();
        // Best standard clean is concat's 0.9.
        assert!((dc["clean"] - (0.89 - 0.9)).abs() < 1e-12);
        // Per-modality robust cells pick each column's best standard value.
        assert!((dc["adaptive/m0"] - (0.8 - 0.2)).abs() < 1e-12);
        assert!((dc["adaptive/m1"] - (0.7 - 0.2)).abs() < 1e-12);
        let dr = report.delta_robust.as_ref().unwrap();
        assert!((dr["adaptive/m0"] - (0.8 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn means_average_over_seeds() {
        let report = build_report(
            "h".into(),
            vec![seed_report(0, 0.0), seed_report(1, 0.02)],
        )
        .unwrap();
        let concat = &report.mean["concat"];
        assert!((concat.clean_acc.unwrap() - 0.91).abs() < 1e-12);
    }

    #[test]
    fn json_serialization_is_deterministic() {
        let report = build_report(
            "h".into(),
            vec![seed_report(0, 0.0), seed_report(1, 0.01)],
        )
        .unwrap();
        assert_eq!(report_json(&report).unwrap(), report_json(&report).unwrap());
        assert_eq!(report_hash(&report).unwrap().len(), 64);
    }

    #[test]
    fn csv_contains_expected_rows() {
        let report = build_report("h".into(), vec![seed_report(3, 0.0)]).unwrap();
        let csv = report_csv(&report);
        assert!(csv.starts_with("model,attack_kind,modality,metric,mean,std,seed3\n"));
        assert!(csv.contains("concat,clean,-,accuracy,0.9000"));
        assert!(csv.contains("robust,adaptive,m1,accuracy,0.7000"));
        assert!(csv.contains("delta-clean,adaptive,m0,accuracy_delta,0.6000"));
    }

    #[test]
    fn mismatched_seed_model_sets_are_rejected() {
        let a = seed_report(0, 0.0);
        let mut b = seed_report(1, 0.0);
        b.models.remove("gated");
        assert!(build_report("h".into(), vec![a, b]).is_err());
    }
}
