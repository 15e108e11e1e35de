//! Scoring: clean accuracy, per-modality robust accuracy, detector
//! confusion, and oracle bounds.
//!
//! Attack payload generation and scoring are separate steps so the pipeline
//! can persist payloads between stages. Both fan out over fixed-size sample
//! chunks through [`par::map_indexed`] and reduce in sample order, so
//! results are identical across thread counts; per-sample attack seeds are
//! derived from global sample indices, so they are also chunk-invariant.

use serde::{Deserialize, Serialize};

use crate::attacks::{
    feature_attack, pgd_single_source, sample_targets, targeted_attack, AttackTemplate, Level,
    Objective,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::argmax_row;
use crate::models::{HeadKind, MultimodalModel};
use crate::nn::Scope;
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

/// Samples per parallel scoring chunk.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    /// White-box PGD through the full target model.
    Adaptive,
    /// PGD against a unimodal surrogate, applied to the target.
    Transfer,
    /// White-box PGD on the extracted features of one modality.
    Feature,
    /// White-box PGD toward a sampled wrong class.
    Targeted,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Adaptive => "adaptive",
            AttackKind::Transfer => "transfer",
            AttackKind::Feature => "feature",
            AttackKind::Targeted => "targeted",
        }
    }
}

/// Payloads for one (model, kind, modality) cell over the first `n` samples.
#[derive(Debug, Clone)]
pub struct PayloadSet {
    pub kind: AttackKind,
    pub modality: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// `[n × d_i]` (input-level) or `[n × m]` (feature-level) payloads.
    pub payload: Tensor,
    /// Target classes, for the targeted kind.
    pub targets: Option<Vec<u32>>,
    pub achieved_loss: Vec<f64>,
    pub initial_loss: Vec<f64>,
}

impl PayloadSet {
    pub fn len(&self) -> usize {
        self.payload.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scores of one model on one cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub accuracy: f64,
    pub correct: Vec<bool>,
    /// Detector argmax per sample, when the scored model has a detector.
    pub detector_arms: Option<Vec<usize>>,
    /// Fraction of samples predicted as the attack's target class.
    pub targeted_success: Option<f64>,
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(EVAL_CHUNK))
        .map(|c| (c * EVAL_CHUNK, ((c + 1) * EVAL_CHUNK).min(n)))
        .collect()
}

/// Fraction of correctly classified clean samples.
pub fn evaluate_clean(model: &MultimodalModel, data: &Dataset) -> Result<f64> {
    Ok(clean_outcome(model, data)?.accuracy)
}

/// Clean scoring with per-sample records (and detector arms, if any).
pub fn clean_outcome(model: &MultimodalModel, data: &Dataset) -> Result<CellOutcome> {
    let ranges = chunk_ranges(data.len());
    let per_chunk = par::map_indexed(ranges.len(), |c| -> Result<(Vec<bool>, Vec<usize>)> {
        let (lo, hi) = ranges[c];
        let indices: Vec<usize> = (lo..hi).collect();
        let batch = data.batch(&indices)?;
        let preds = model.predict_labels(&batch)?;
        let correct = preds.iter().zip(&batch.ys).map(|(p, y)| p == y).collect();
        let arms = if model.cfg.head == HeadKind::Robust {
            crate::training::detector_arms(model, &batch, None)?
        } else {
            Vec::new()
        };
        Ok((correct, arms))
    });
    let mut correct = Vec::with_capacity(data.len());
    let mut arms = Vec::new();
    for chunk in per_chunk {
        let (c, a) = chunk?;
        correct.extend(c);
        arms.extend(a);
    }
    let accuracy = correct.iter().filter(|&&x| x).count() as f64 / correct.len().max(1) as f64;
    Ok(CellOutcome {
        accuracy,
        correct,
        detector_arms: if arms.is_empty() { None } else { Some(arms) },
        targeted_success: None,
    })
}

/// Generate payloads for one attack cell over the first `n` samples of a
/// dataset. `surrogate` is required for (and only used by) transfer attacks.
#[allow(clippy::too_many_arguments)]
pub fn generate_payloads(
    target: &MultimodalModel,
    surrogate: Option<&MultimodalModel>,
    data: &Dataset,
    template: &AttackTemplate,
    kind: AttackKind,
    modality: usize,
    seed: u64,
    n: usize,
) -> Result<PayloadSet> {
    let n = n.min(data.len());
    if n == 0 {
        return Err(Error::validation("no samples to attack"));
    }
    let classes = data.spec.classes;
    let targets: Option<Vec<usize>> = match kind {
        AttackKind::Targeted => {
            let labels: Vec<usize> = data.labels[..n].iter().map(|&y| y as usize).collect();
            Some(sample_targets(
                &labels,
                classes,
                rng::derive(seed, "targets", 0),
            ))
        }
        _ => None,
    };
    let ranges = chunk_ranges(n);
    let chunks = par::map_indexed(ranges.len(), |c| -> Result<PayloadChunk> {
        let (lo, hi) = ranges[c];
        let indices: Vec<usize> = (lo..hi).collect();
        let batch = data.batch(&indices)?;
        let mut spec = template.spec(modality, seed);
        let outcome = match kind {
            AttackKind::Adaptive => pgd_single_source(target, &batch, &spec, &indices)?,
            AttackKind::Transfer => {
                let s = surrogate.ok_or_else(|| {
                    Error::validation("transfer attack needs a unimodal surrogate")
                })?;
                pgd_single_source(s, &batch, &spec, &indices)?
            }
            AttackKind::Feature => {
                spec.level = Level::Feature;
                feature_attack(target, &batch, &spec, &indices)?
            }
            AttackKind::Targeted => {
                let t = &targets.as_ref().unwrap()[lo..hi];
                spec.objective = Objective::Targeted(t[0]);
                targeted_attack(target, &batch, t, &spec, &indices)?
            }
        };
        Ok(PayloadChunk {
            payload: outcome.payload,
            achieved: outcome.results.iter().map(|r| r.achieved_loss).collect(),
            initial: outcome.results.iter().map(|r| r.initial_loss).collect(),
        })
    });
    let mut values = Vec::new();
    let mut achieved = Vec::with_capacity(n);
    let mut initial = Vec::with_capacity(n);
    let mut width = 0;
    for chunk in chunks {
        let chunk = chunk?;
        width = chunk.payload.last_dim();
        values.extend_from_slice(chunk.payload.values());
        achieved.extend(chunk.achieved);
        initial.extend(chunk.initial);
    }
    Ok(PayloadSet {
        kind,
        modality,
        epsilon: template.epsilon,
        seed,
        payload: Tensor::matrix(n, width, values)?,
        targets: targets.map(|t| t.into_iter().map(|x| x as u32).collect()),
        achieved_loss: achieved,
        initial_loss: initial,
    })
}

struct PayloadChunk {
    payload: Tensor,
    achieved: Vec<f64>,
    initial: Vec<f64>,
}

/// Score a model against a payload set. Unattacked modalities are fed
/// bit-identically from the dataset.
pub fn score_payloads(
    model: &MultimodalModel,
    data: &Dataset,
    payloads: &PayloadSet,
) -> Result<CellOutcome> {
    let n = payloads.len();
    if n > data.len() {
        return Err(Error::validation(format!(
            "{n} payload rows for {} samples",
            data.len()
        )));
    }
    let ranges = chunk_ranges(n);
    let per_chunk = par::map_indexed(ranges.len(), |c| -> Result<(Vec<usize>, Vec<usize>)> {
        let (lo, hi) = ranges[c];
        let indices: Vec<usize> = (lo..hi).collect();
        let mut batch = data.batch(&indices)?;
        let rows = payloads.payload.gather_rows(&indices)?;
        let preds = match payloads.kind {
            AttackKind::Feature => {
                feature_level_predictions(model, &batch, payloads.modality, &rows)?
            }
            _ => {
                batch.xs[payloads.modality] = rows.clone();
                model.predict_labels(&batch)?
            }
        };
        let arms = if model.cfg.head == HeadKind::Robust && payloads.kind != AttackKind::Feature {
            let clean = data.batch(&indices)?;
            crate::training::detector_arms(model, &clean, Some((payloads.modality, &rows)))?
        } else {
            Vec::new()
        };
        Ok((preds, arms))
    });
    let mut preds = Vec::with_capacity(n);
    let mut arms = Vec::new();
    for chunk in per_chunk {
        let (p, a) = chunk?;
        preds.extend(p);
        arms.extend(a);
    }
    let correct: Vec<bool> = preds
        .iter()
        .zip(&data.labels[..n])
        .map(|(&p, &y)| p == y as usize)
        .collect();
    let accuracy = correct.iter().filter(|&&x| x).count() as f64 / n as f64;
    let targeted_success = payloads.targets.as_ref().map(|t| {
        preds
            .iter()
            .zip(t)
            .filter(|(&p, &target)| p == target as usize)
            .count() as f64
            / n as f64
    });
    Ok(CellOutcome {
        accuracy,
        correct,
        detector_arms: if arms.is_empty() { None } else { Some(arms) },
        targeted_success,
    })
}

fn feature_level_predictions(
    model: &MultimodalModel,
    batch: &crate::data::Batch,
    modality: usize,
    feature_rows: &Tensor,
) -> Result<Vec<usize>> {
    let mut sess = model.session(Scope::Frozen);
    let xs: Vec<_> = batch
        .xs
        .iter()
        .map(|x| sess.graph.constant(x.clone()))
        .collect();
    let mut zs = model.extract(&mut sess, &xs)?;
    zs[modality] = sess.graph.constant(feature_rows.clone());
    let logits = model.head_from_features(&mut sess, &zs)?;
    let t = sess.graph.value(logits);
    Ok((0..t.rows()).map(|r| argmax_row(t.row(r))).collect())
}

/// Per-modality robust accuracy under the adaptive attack (one cell per
/// modality, full dataset).
pub fn evaluate_robust(
    model: &MultimodalModel,
    data: &Dataset,
    template: &AttackTemplate,
    seed: u64,
) -> Result<Vec<CellOutcome>> {
    (0..data.spec.modalities)
        .map(|i| {
            let payloads = generate_payloads(
                model,
                None,
                data,
                template,
                AttackKind::Adaptive,
                i,
                rng::derive(seed, "eval-adaptive", i as u64),
                data.len(),
            )?;
            score_payloads(model, data, &payloads)
        })
        .collect()
}

/// Detector confusion over the k+1 conditions (perturbed-0..k-1, clean).
/// Row = true condition, column = predicted arm; ties in the argmax resolve
/// to the lowest arm index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub conditions: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    pub per_condition: Vec<f64>,
    pub pooled: f64,
}

/// Detector confusion and rates for a model under the adaptive attack,
/// generating fresh payloads for every modality.
pub fn detection_rate(
    model: &MultimodalModel,
    data: &Dataset,
    template: &AttackTemplate,
    seed: u64,
) -> Result<DetectionReport> {
    let payloads = (0..model.cfg.modalities)
        .map(|i| {
            generate_payloads(
                model,
                None,
                data,
                template,
                AttackKind::Adaptive,
                i,
                rng::derive(seed, "detection", i as u64),
                data.len(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    detection_report(model, data, &payloads)
}

/// Build the detection report from clean detector arms plus one payload set
/// per modality (their order fixes the condition order).
pub fn detection_report(
    model: &MultimodalModel,
    data: &Dataset,
    adaptive_payloads: &[PayloadSet],
) -> Result<DetectionReport> {
    let k = model.cfg.modalities;
    if model.cfg.head != HeadKind::Robust {
        return Err(Error::validation("detection needs the robust head"));
    }
    if adaptive_payloads.len() != k {
        return Err(Error::validation(format!(
            "{} payload sets for {k} modalities",
            adaptive_payloads.len()
        )));
    }
    let n = adaptive_payloads
        .iter()
        .map(PayloadSet::len)
        .min()
        .unwrap_or(0)
        .min(data.len());
    let mut confusion = vec![vec![0usize; k + 1]; k + 1];

    for (i, ps) in adaptive_payloads.iter().enumerate() {
        if ps.modality != i {
            return Err(Error::validation("payload sets out of modality order"));
        }
        let sliced = PayloadSet {
            payload: ps.payload.gather_rows(&(0..n).collect::<Vec<_>>())?,
            ..ps.clone()
        };
        let outcome = score_payloads(model, data, &sliced)?;
        let arms = outcome
            .detector_arms
            .ok_or_else(|| Error::Contract("robust model produced no arms".into()))?;
        for arm in arms {
            confusion[i][arm] += 1;
        }
    }
    // Clean condition occupies the last row, matching arm k.
    let clean = clean_outcome(model, data)?;
    let clean_arms = clean
        .detector_arms
        .ok_or_else(|| Error::Contract("robust model produced no arms".into()))?;
    for arm in clean_arms.into_iter().take(n) {
        confusion[k][arm] += 1;
    }

    let per_condition: Vec<f64> = (0..=k)
        .map(|c| {
            let row_sum: usize = confusion[c].iter().sum();
            confusion[c][c] as f64 / row_sum.max(1) as f64
        })
        .collect();
    let pooled = per_condition.iter().sum::<f64>() / (k + 1) as f64;
    let mut conditions: Vec<String> = (0..k).map(|i| format!("perturbed-{i}")).collect();
    conditions.push("clean".to_string());
    Ok(DetectionReport {
        conditions,
        confusion,
        per_condition,
        pooled,
    })
}

/// Empirical per-modality upper bound: the leave-one-out oracle for
/// modality `i`, attacked on `i`. Its logits cannot depend on the attacked
/// input, so the attack is run honestly and lands exactly at clean accuracy.
pub fn oracle_bound(
    oracles: &[MultimodalModel],
    data: &Dataset,
    template: &AttackTemplate,
    seed: u64,
) -> Result<Vec<f64>> {
    oracles
        .iter()
        .enumerate()
        .map(|(i, oracle)| {
            match oracle.cfg.head {
                HeadKind::Oracle(excluded) if excluded == i => {}
                _ => {
                    return Err(Error::validation(format!(
                        "oracle {i} has head {:?}",
                        oracle.cfg.head
                    )))
                }
            }
            let payloads = generate_payloads(
                oracle,
                None,
                data,
                template,
                AttackKind::Adaptive,
                i,
                rng::derive(seed, "oracle-bound", i as u64),
                data.len(),
            )?;
            Ok(score_payloads(oracle, data, &payloads)?.accuracy)
        })
        .collect()
}
