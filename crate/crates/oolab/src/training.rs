//! Training loops: clean SGD, robust training of the detector and fusion
//! subnetwork over frozen extractors, and adversarial schedules for the
//! baseline heads.
//!
//! The robust update works per batch: extract clean features, add the
//! detector's all-clean term and the clean task term, then for each modality
//! regenerate an adaptive perturbation against the current model, feed the
//! perturbed features through the same detector/fusion parameters, and add
//! one detector term (labeled with the perturbed arm) and one task term.
//! One SGD step follows from the gradient of the summed loss; extractor
//! parameters stay byte-identical throughout.

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_single_source, AttackSpec, AttackTemplate};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::{argmax_row, VarId};
use crate::models::{HeadKind, MultimodalModel};
use crate::nn::{Scope, Session};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::par;
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Clean and per-modality perturbed batches interleave round-robin.
    Alternating,
    /// Every batch sums the clean term and all k perturbed terms.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    All,
    /// Fusion-side parameters only; extractor gradients are forbidden.
    FusionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Attack used to build perturbed inputs during robust training.
    pub inner_attack: Option<AttackTemplate>,
    pub scope: TrainScope,
    pub schedule: ScheduleKind,
    /// Optional global-l2 gradient clip applied before each step.
    pub grad_clip: Option<f64>,
}

impl TrainSpec {
    pub fn clean(lr: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainSpec {
            lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs,
            batch_size,
            seed,
            inner_attack: None,
            scope: TrainScope::All,
            schedule: ScheduleKind::Joint,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    fn scope_for(&self, model: &MultimodalModel) -> Scope {
        match self.scope {
            TrainScope::All => Scope::All,
            TrainScope::FusionOnly => model.fusion_scope(),
        }
    }

    fn inner(&self) -> Result<&AttackTemplate> {
        self.inner_attack
            .as_ref()
            .ok_or_else(|| Error::validation("robust training needs an inner attack"))
    }
}

/// Loss accounting for one robust update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Odd-one-out cross-entropy: one all-clean term plus k perturbed terms.
    pub l_odd: f64,
    /// Task cross-entropy: one clean term plus k perturbed terms.
    pub l_task: f64,
    pub total: f64,
    pub odd_terms: usize,
    pub task_terms: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub l_odd: Option<f64>,
    pub l_task: Option<f64>,
    pub detector_acc: Option<f64>,
}

/// Per-epoch records, written to a run-directory CSV by the pipeline.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Curves {
    pub rows: Vec<EpochRow>,
}

impl Curves {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,l_odd,l_task,detector_acc\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{},{},{}\n",
                r.epoch,
                r.loss,
                opt(r.l_odd),
                opt(r.l_task),
                opt(r.detector_acc)
            ));
        }
        out
    }
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng::rng(rng::derive(seed, "shuffle", epoch as u64)));
    indices
}

fn map_divergence(err: Error, epoch: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged { epoch },
        other => other,
    }
}

// ── Clean training ──────────────────────────────────────────────────────

/// Mini-batch SGD on the clean cross-entropy.
pub fn train_clean(
    model: &mut MultimodalModel,
    data: &Dataset,
    spec: &TrainSpec,
) -> Result<Curves> {
    spec.validate()?;
    let mut state = SgdState::new();
    let mut curves = Curves::default();
    for epoch in 0..spec.epochs {
        let indices = shuffled_indices(data.len(), spec.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in indices.chunks(spec.batch_size) {
            let batch = data.batch(chunk)?;
            let scope = spec.scope_for(model);
            let mut sess = model.session(scope);
            let xs: Vec<VarId> = batch
                .xs
                .iter()
                .map(|x| sess.graph.constant(x.clone()))
                .collect();
            let logits = model
                .predict(&mut sess, &xs)
                .map_err(|e| map_divergence(e, epoch))?;
            let loss = sess
                .graph
                .cross_entropy(logits, &batch.ys)
                .map_err(|e| map_divergence(e, epoch))?;
            loss_sum += sess.graph.value(loss).item() * chunk.len() as f64;
            sess.graph.backward(loss)?;
            let mut grads = sess.trainable_grads();
            drop(sess);
            if let Some(max_norm) = spec.grad_clip {
                crate::optim::clip_grads(&mut grads, max_norm);
            }
            sgd_step(&mut model.params, &grads, &mut state, &spec.sgd())?;
        }
        curves.rows.push(EpochRow {
            epoch,
            loss: loss_sum / data.len() as f64,
            l_odd: None,
            l_task: None,
            detector_acc: None,
        });
    }
    Ok(curves)
}

// ── Robust training of the detector + fusion subnetwork ────────────────

/// Forward of the robust head that also exposes the detector logits.
fn robust_forward(
    model: &MultimodalModel,
    sess: &mut Session,
    zs: &[VarId],
) -> Result<(VarId, VarId)> {
    let (det_logits, probs) = model.odd_one_out(sess, zs)?;
    let experts = model.expert_outputs(sess, zs)?;
    let fused = model.robust_fuse(sess, &experts, probs)?;
    let task_logits = model.tail_forward(sess, fused)?;
    Ok((task_logits, det_logits))
}

/// Build the summed robust loss for a batch given already-generated
/// perturbed payloads (one `[B × d_i]` tensor per modality). Returns the
/// session, the total-loss node, and the loss accounting. Kept separate
/// from the update so gradient checks can replay frozen payloads.
pub fn robust_losses_with_payloads<'m>(
    model: &'m MultimodalModel,
    batch: &Batch,
    payloads: &[Tensor],
    scope: Scope,
) -> Result<(Session<'m>, VarId, LossBreakdown)> {
    let k = model.cfg.modalities;
    if payloads.len() != k {
        return Err(Error::validation(format!(
            "{} payloads for {k} modalities",
            payloads.len()
        )));
    }
    let clean_arm = vec![k; batch.ys.len()];
    let mut sess = model.session(scope);
    let xs: Vec<VarId> = batch
        .xs
        .iter()
        .map(|x| sess.graph.constant(x.clone()))
        .collect();
    let zs = model.extract(&mut sess, &xs)?;

    let (task_logits, det_logits) = robust_forward(model, &mut sess, &zs)?;
    let mut odd_losses = vec![sess.graph.cross_entropy(det_logits, &clean_arm)?];
    let mut task_losses = vec![sess.graph.cross_entropy(task_logits, &batch.ys)?];

    for i in 0..k {
        let adv = sess.graph.constant(payloads[i].clone());
        let z_star = model.extract_one(&mut sess, i, adv)?;
        let mut z_mixed = zs.clone();
        z_mixed[i] = z_star;
        let arm = vec![i; batch.ys.len()];
        let (task_logits_i, det_logits_i) = robust_forward(model, &mut sess, &z_mixed)?;
        odd_losses.push(sess.graph.cross_entropy(det_logits_i, &arm)?);
        task_losses.push(sess.graph.cross_entropy(task_logits_i, &batch.ys)?);
    }

    let sum_chain = |sess: &mut Session, terms: &[VarId]| -> Result<VarId> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = sess.graph.add(acc, t)?;
        }
        Ok(acc)
    };
    let l_odd = sum_chain(&mut sess, &odd_losses)?;
    let l_task = sum_chain(&mut sess, &task_losses)?;
    let total = sess.graph.add(l_odd, l_task)?;
    let breakdown = LossBreakdown {
        l_odd: sess.graph.value(l_odd).item(),
        l_task: sess.graph.value(l_task).item(),
        total: sess.graph.value(total).item(),
        odd_terms: odd_losses.len(),
        task_terms: task_losses.len(),
    };
    Ok((sess, total, breakdown))
}

/// Adaptive per-modality payloads against the current model, generated
/// concurrently (the model is read-only) and reduced in modality order.
pub fn generate_inner_payloads(
    model: &MultimodalModel,
    batch: &Batch,
    template: &AttackTemplate,
    seed: u64,
    sample_indices: &[usize],
) -> Result<Vec<Tensor>> {
    let k = model.cfg.modalities;
    let outcomes = par::map_indexed(k, |i| {
        let spec: AttackSpec = template.spec(i, rng::derive(seed, "inner-attack", i as u64));
        pgd_single_source(model, batch, &spec, sample_indices).map(|o| o.payload)
    });
    outcomes.into_iter().collect()
}

/// One robust gradient update: regenerate per-modality attacks, accumulate
/// the odd-one-out and task losses (one clean plus k perturbed terms each),
/// and take one SGD step on the detector and fusion parameters.
pub fn robust_gradient_update(
    model: &mut MultimodalModel,
    batch: &Batch,
    spec: &TrainSpec,
    state: &mut SgdState,
    attack_seed: u64,
    sample_indices: &[usize],
) -> Result<LossBreakdown> {
    if spec.scope != TrainScope::FusionOnly {
        return Err(Error::validation(
            "robust training requires trainable_scope = fusion_only",
        ));
    }
    let before = model.params.byte_image("ext");
    let payloads =
        generate_inner_payloads(model, batch, spec.inner()?, attack_seed, sample_indices)?;
    let (mut sess, total, breakdown) =
        robust_losses_with_payloads(model, batch, &payloads, model.fusion_scope())?;
    sess.graph.backward(total)?;
    let mut grads = sess.trainable_grads();
    drop(sess);
    if let Some(max_norm) = spec.grad_clip {
        crate::optim::clip_grads(&mut grads, max_norm);
    }
    sgd_step(&mut model.params, &grads, state, &spec.sgd())?;
    if model.params.byte_image("ext") != before {
        return Err(Error::Contract(
            "extractor parameters changed during robust update".to_string(),
        ));
    }
    Ok(breakdown)
}

/// Robust training over shuffled mini-batches. Records loss components and,
/// when a probe set is given, the detector's pooled accuracy per epoch.
pub fn train_robust(
    model: &mut MultimodalModel,
    data: &Dataset,
    probe: Option<&Dataset>,
    spec: &TrainSpec,
) -> Result<Curves> {
    spec.validate()?;
    if model.cfg.head != HeadKind::Robust {
        return Err(Error::validation("train_robust wants the robust head"));
    }
    let mut state = SgdState::new();
    let mut curves = Curves::default();
    let mut batch_counter = 0u64;
    for epoch in 0..spec.epochs {
        let indices = shuffled_indices(data.len(), spec.seed, epoch);
        let (mut odd_sum, mut task_sum, mut n_batches) = (0.0, 0.0, 0usize);
        for chunk in indices.chunks(spec.batch_size) {
            let batch = data.batch(chunk)?;
            let attack_seed = rng::derive(spec.seed, "robust-batch", batch_counter);
            let bd = robust_gradient_update(model, &batch, spec, &mut state, attack_seed, chunk)
                .map_err(|e| map_divergence(e, epoch))?;
            odd_sum += bd.l_odd;
            task_sum += bd.l_task;
            n_batches += 1;
            batch_counter += 1;
        }
        let detector_acc = match probe {
            Some(p) => Some(detector_probe_accuracy(model, p, spec)?),
            None => None,
        };
        curves.rows.push(EpochRow {
            epoch,
            loss: (odd_sum + task_sum) / n_batches as f64,
            l_odd: Some(odd_sum / n_batches as f64),
            l_task: Some(task_sum / n_batches as f64),
            detector_acc,
        });
    }
    Ok(curves)
}

/// Pooled detector accuracy over the k+1 conditions on (a slice of) a probe
/// set, using the training-time inner attack.
fn detector_probe_accuracy(
    model: &MultimodalModel,
    probe: &Dataset,
    spec: &TrainSpec,
) -> Result<f64> {
    let n = probe.len().min(48);
    let indices: Vec<usize> = (0..n).collect();
    let batch = probe.batch(&indices)?;
    let k = model.cfg.modalities;
    let payloads = generate_inner_payloads(
        model,
        &batch,
        spec.inner()?,
        rng::derive(spec.seed, "detector-probe", 0),
        &indices,
    )?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for &arm in &detector_arms(model, &batch, None)? {
        correct += usize::from(arm == k);
        total += 1;
    }
    for (i, payload) in payloads.iter().enumerate() {
        for &arm in &detector_arms(model, &batch, Some((i, payload)))? {
            correct += usize::from(arm == i);
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Detector argmax arms for a batch, optionally substituting one modality's
/// input with a perturbed payload.
pub fn detector_arms(
    model: &MultimodalModel,
    batch: &Batch,
    perturbed: Option<(usize, &Tensor)>,
) -> Result<Vec<usize>> {
    let mut sess = model.session(Scope::Frozen);
    let xs: Vec<VarId> = batch
        .xs
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let t = match perturbed {
                Some((i, payload)) if i == j => payload.clone(),
                _ => x.clone(),
            };
            sess.graph.constant(t)
        })
        .collect();
    let zs = model.extract(&mut sess, &xs)?;
    let (_, probs) = model.odd_one_out(&mut sess, &zs)?;
    let pt = sess.graph.value(probs);
    Ok((0..pt.rows()).map(|r| argmax_row(pt.row(r))).collect())
}

// ── Baseline adversarial training ───────────────────────────────────────

/// Round-robin condition for the alternating schedule: batches cycle
/// through clean, modality 0, 1, ..., k-1.
pub fn alternating_condition(batch_idx: u64, modalities: usize) -> Option<usize> {
    let r = (batch_idx % (modalities as u64 + 1)) as usize;
    if r == 0 {
        None
    } else {
        Some(r - 1)
    }
}

/// Adversarial training for the baseline heads (and, with `scope = All`,
/// end-to-end adversarial training). Only task losses are involved; the
/// alternating schedule sees one condition per batch, the joint schedule
/// sums the clean and all k perturbed terms.
pub fn train_baseline_robust(
    model: &mut MultimodalModel,
    data: &Dataset,
    spec: &TrainSpec,
) -> Result<Curves> {
    spec.validate()?;
    let template = spec.inner()?.clone();
    let k = model.cfg.modalities;
    let mut state = SgdState::new();
    let mut curves = Curves::default();
    let mut batch_counter = 0u64;
    for epoch in 0..spec.epochs {
        let indices = shuffled_indices(data.len(), spec.seed, epoch);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in indices.chunks(spec.batch_size) {
            let batch = data.batch(chunk)?;
            let attack_seed = rng::derive(spec.seed, "baseline-batch", batch_counter);
            let loss_value = match spec.schedule {
                ScheduleKind::Alternating => {
                    let substitute = match alternating_condition(batch_counter, k) {
                        None => None,
                        Some(i) => {
                            let attack_spec =
                                template.spec(i, rng::derive(attack_seed, "alt", i as u64));
                            let payload =
                                pgd_single_source(model, &batch, &attack_spec, chunk)?.payload;
                            Some((i, payload))
                        }
                    };
                    one_task_step(model, &batch, substitute.as_ref(), spec, &mut state)
                        .map_err(|e| map_divergence(e, epoch))?
                }
                ScheduleKind::Joint => {
                    let payloads =
                        generate_inner_payloads(model, &batch, &template, attack_seed, chunk)?;
                    joint_task_step(model, &batch, &payloads, spec, &mut state)
                        .map_err(|e| map_divergence(e, epoch))?
                }
            };
            loss_sum += loss_value;
            n_batches += 1;
            batch_counter += 1;
        }
        curves.rows.push(EpochRow {
            epoch,
            loss: loss_sum / n_batches as f64,
            l_odd: None,
            l_task: None,
            detector_acc: None,
        });
    }
    Ok(curves)
}

/// End-to-end adversarial training: the joint schedule with every parameter
/// trainable, extractors included.
pub fn train_end_to_end_adversarial(
    model: &mut MultimodalModel,
    data: &Dataset,
    spec: &TrainSpec,
) -> Result<Curves> {
    if spec.scope != TrainScope::All || spec.schedule != ScheduleKind::Joint {
        return Err(Error::validation(
            "end-to-end adversarial training wants scope=all, schedule=joint",
        ));
    }
    train_baseline_robust(model, data, spec)
}

fn one_task_step(
    model: &mut MultimodalModel,
    batch: &Batch,
    substitute: Option<&(usize, Tensor)>,
    spec: &TrainSpec,
    state: &mut SgdState,
) -> Result<f64> {
    let scope = spec.scope_for(model);
    let mut sess = model.session(scope);
    let xs: Vec<VarId> = batch
        .xs
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let t = match substitute {
                Some((i, payload)) if *i == j => payload.clone(),
                _ => x.clone(),
            };
            sess.graph.constant(t)
        })
        .collect();
    let logits = model.predict(&mut sess, &xs)?;
    let loss = sess.graph.cross_entropy(logits, &batch.ys)?;
    let value = sess.graph.value(loss).item();
    sess.graph.backward(loss)?;
    let mut grads = sess.trainable_grads();
    drop(sess);
    if let Some(max_norm) = spec.grad_clip {
        crate::optim::clip_grads(&mut grads, max_norm);
    }
    sgd_step(&mut model.params, &grads, state, &spec.sgd())?;
    Ok(value)
}

fn joint_task_step(
    model: &mut MultimodalModel,
    batch: &Batch,
    payloads: &[Tensor],
    spec: &TrainSpec,
    state: &mut SgdState,
) -> Result<f64> {
    let scope = spec.scope_for(model);
    let mut sess = model.session(scope);
    let clean_xs: Vec<VarId> = batch
        .xs
        .iter()
        .map(|x| sess.graph.constant(x.clone()))
        .collect();
    let mut terms = Vec::with_capacity(payloads.len() + 1);
    let clean_logits = model.predict(&mut sess, &clean_xs)?;
    terms.push(sess.graph.cross_entropy(clean_logits, &batch.ys)?);
    for (i, payload) in payloads.iter().enumerate() {
        let mut xs = clean_xs.clone();
        xs[i] = sess.graph.constant(payload.clone());
        let logits = model.predict(&mut sess, &xs)?;
        terms.push(sess.graph.cross_entropy(logits, &batch.ys)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = sess.graph.add(total, t)?;
    }
    let value = sess.graph.value(total).item();
    sess.graph.backward(total)?;
    let mut grads = sess.trainable_grads();
    drop(sess);
    if let Some(max_norm) = spec.grad_clip {
        crate::optim::clip_grads(&mut grads, max_norm);
    }
    sgd_step(&mut model.params, &grads, state, &spec.sgd())?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, TaskSpec};
    use crate::models::{ModelConfig, ModelDims};

    fn task() -> TaskSpec {
        TaskSpec {
            modalities: 3,
            classes: 4,
            latent_dim: 6,
            private_dim: 3,
            input_dims: vec![10, 10, 10],
            redundancy: 0.9,
            noise_sigma: 0.1,
            n_train: 96,
            n_test: 48,
            seed: 4,
            shared_mixing: false,
        }
    }

    fn dims() -> ModelDims {
        ModelDims {
            feature_dim: 8,
            extractor_hidden: 12,
            tail_hidden: 10,
            expert_hidden: 10,
            fused_dim: 8,
            detector_hidden: 12,
        }
    }

    fn robust_spec(epochs: usize) -> TrainSpec {
        TrainSpec {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs,
            batch_size: 32,
            seed: 5,
            inner_attack: Some(AttackTemplate::new(0.4, 3)),
            scope: TrainScope::FusionOnly,
            schedule: ScheduleKind::Joint,
            grad_clip: Some(20.0),
        }
    }

    fn robust_model() -> MultimodalModel {
        MultimodalModel::init(ModelConfig::new(&task(), HeadKind::Robust, dims(), 8)).unwrap()
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let (train, _) = generate(&task()).unwrap();
        let mut model =
            MultimodalModel::init(ModelConfig::new(&task(), HeadKind::Concat, dims(), 8))
                .unwrap();
        let before = model.params.clone();
        let spec = TrainSpec::clean(0.1, 0, 32, 1);
        train_clean(&mut model, &train, &spec).unwrap();
        assert_eq!(before, model.params);
    }

    #[test]
    fn clean_training_is_seed_deterministic() {
        let (train, _) = generate(&task()).unwrap();
        let run = || {
            let mut model =
                MultimodalModel::init(ModelConfig::new(&task(), HeadKind::Concat, dims(), 8))
                    .unwrap();
            let spec = TrainSpec::clean(0.1, 3, 32, 1);
            train_clean(&mut model, &train, &spec).unwrap();
            model.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clean_training_fits_a_separable_toy() {
        // Two well-separated classes; verified linearly separable by a probe
        // before freezing this fixture.
        let toy = TaskSpec {
            modalities: 2,
            classes: 2,
            latent_dim: 4,
            private_dim: 2,
            input_dims: vec![6, 6],
            redundancy: 1.0,
            noise_sigma: 0.0,
            n_train: 60,
            n_test: 30,
            seed: 9,
            shared_mixing: false,
        };
        let (train, _) = generate(&toy).unwrap();
        let mut model =
            MultimodalModel::init(ModelConfig::new(&toy, HeadKind::Concat, dims(), 2)).unwrap();
        let mut spec = TrainSpec::clean(0.1, 200, 30, 3);
        spec.weight_decay = 0.0;
        train_clean(&mut model, &train, &spec).unwrap();
        let batch = train.full_batch().unwrap();
        let preds = model.predict_labels(&batch).unwrap();
        let acc = preds
            .iter()
            .zip(&batch.ys)
            .filter(|(a, b)| a == b)
            .count() as f64
            / preds.len() as f64;
        assert!(acc >= 0.99, "training accuracy {acc}");
    }

    #[test]
    fn robust_update_freezes_extractors_and_counts_terms() {
        let (train, _) = generate(&task()).unwrap();
        let mut model = robust_model();
        let before = model.params.byte_image("ext");
        let spec = robust_spec(1);
        let mut state = SgdState::new();
        let indices: Vec<usize> = (0..32).collect();
        let batch = train.batch(&indices).unwrap();
        let bd =
            robust_gradient_update(&mut model, &batch, &spec, &mut state, 77, &indices).unwrap();
        assert_eq!(model.params.byte_image("ext"), before);
        assert_eq!(bd.odd_terms, 4);
        assert_eq!(bd.task_terms, 4);
        assert!((bd.total - (bd.l_odd + bd.l_task)).abs() < 1e-12);
        assert!(bd.l_odd >= 0.0 && bd.l_task >= 0.0);
    }

    #[test]
    fn replayed_payload_gradient_matches_finite_differences() {
        let (train, _) = generate(&task()).unwrap();
        let model = robust_model();
        let indices: Vec<usize> = (0..8).collect();
        let batch = train.batch(&indices).unwrap();
        let payloads = generate_inner_payloads(
            &model,
            &batch,
            &AttackTemplate::new(0.4, 2),
            3,
            &indices,
        )
        .unwrap();

        let scope = model.fusion_scope();
        let (mut sess, total, _) =
            robust_losses_with_payloads(&model, &batch, &payloads, scope.clone()).unwrap();
        sess.graph.backward(total).unwrap();
        let grads = sess.trainable_grads();
        drop(sess);

        let loss_with = |m: &MultimodalModel| -> f64 {
            let (sess, total, _) =
                robust_losses_with_payloads(m, &batch, &payloads, Scope::Frozen).unwrap();
            sess.graph.value(total).item()
        };
        // Probe a handful of fusion parameters with central differences.
        let h = 1e-5;
        let mut checked = 0;
        for name in ["det.l0.w", "expert0.l1.w", "tail.l0.w"] {
            let base = model.params.get(name).unwrap().clone();
            for idx in [0, base.numel() / 2] {
                let mut plus = model.clone();
                let mut vals = base.values().to_vec();
                vals[idx] += h;
                plus.params
                    .set(name, Tensor::new(base.shape().to_vec(), vals.clone()).unwrap())
                    .unwrap();
                let mut minus = model.clone();
                vals[idx] -= 2.0 * h;
                minus
                    .params
                    .set(name, Tensor::new(base.shape().to_vec(), vals).unwrap())
                    .unwrap();
                let fd = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
                let analytic = grads[name][idx];
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    ((fd - analytic).abs() / denom) < 1e-4,
                    "{name}[{idx}]: fd {fd} vs analytic {analytic}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 6);
    }

    #[test]
    fn small_lr_step_on_replayed_payloads_descends() {
        let (train, _) = generate(&task()).unwrap();
        for fixture in 0..20 {
            let mut model = MultimodalModel::init(ModelConfig::new(
                &task(),
                HeadKind::Robust,
                dims(),
                100 + fixture,
            ))
            .unwrap();
            let indices: Vec<usize> = (0..16).collect();
            let batch = train.batch(&indices).unwrap();
            let payloads = generate_inner_payloads(
                &model,
                &batch,
                &AttackTemplate::new(0.4, 2),
                fixture,
                &indices,
            )
            .unwrap();
            let scope = model.fusion_scope();
            let (mut sess, total, bd) =
                robust_losses_with_payloads(&model, &batch, &payloads, scope).unwrap();
            sess.graph.backward(total).unwrap();
            let grads = sess.trainable_grads();
            drop(sess);
            let mut state = SgdState::new();
            let cfg = SgdConfig {
                lr: 1e-4,
                momentum: 0.0,
                weight_decay: 0.0,
            };
            sgd_step(&mut model.params, &grads, &mut state, &cfg).unwrap();
            let (sess, total, _) = robust_losses_with_payloads(
                &model,
                &batch,
                &payloads,
                Scope::Frozen,
            )
            .unwrap();
            let after = sess.graph.value(total).item();
            assert!(
                after <= bd.total + 1e-8,
                "fixture {fixture}: {} -> {after}",
                bd.total
            );
        }
    }

    #[test]
    fn detector_learns_on_redundant_task_but_not_at_zero_budget() {
        let mut big = task();
        big.n_train = 240;
        let (train, test) = generate(&big).unwrap();
        // Extractors are pretrained on the clean task, as in deployment;
        // the detector then learns over class-informative features.
        let mut concat =
            MultimodalModel::init(ModelConfig::new(&big, HeadKind::Concat, dims(), 8)).unwrap();
        train_clean(&mut concat, &train, &TrainSpec::clean(0.03, 12, 32, 2)).unwrap();

        let mut model = robust_model();
        model.adopt(&concat, "ext").unwrap();
        model.fit_feature_norm(&train, 512).unwrap();
        let mut spec = robust_spec(8);
        spec.lr = 0.03;
        spec.inner_attack = Some(AttackTemplate::new(0.5, 3));
        let curves = train_robust(&mut model, &train, Some(&test), &spec).unwrap();
        let last = curves.rows.last().unwrap().detector_acc.unwrap();
        assert!(last > 0.25 + 0.15, "detector accuracy {last}");

        // Zero-budget inner attack: perturbed terms carry no signal and the
        // detector stays near chance.
        let mut null_model = robust_model();
        null_model.adopt(&concat, "ext").unwrap();
        null_model.fit_feature_norm(&train, 512).unwrap();
        let mut null_spec = robust_spec(4);
        null_spec.inner_attack = Some(AttackTemplate::new(0.0, 3));
        let null_curves = train_robust(&mut null_model, &train, Some(&test), &null_spec).unwrap();
        let null_acc = null_curves.rows.last().unwrap().detector_acc.unwrap();
        assert!(
            (0.05..0.45).contains(&null_acc),
            "null detector accuracy {null_acc}"
        );
    }

    #[test]
    fn robust_training_is_seed_deterministic() {
        let (train, _) = generate(&task()).unwrap();
        let run = || {
            let mut model = robust_model();
            let spec = robust_spec(2);
            train_robust(&mut model, &train, None, &spec).unwrap();
            model.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn alternating_schedule_cycles_clean_then_each_modality() {
        assert_eq!(alternating_condition(0, 3), None);
        assert_eq!(alternating_condition(1, 3), Some(0));
        assert_eq!(alternating_condition(2, 3), Some(1));
        assert_eq!(alternating_condition(3, 3), Some(2));
        assert_eq!(alternating_condition(4, 3), None);
    }

    #[test]
    fn fusion_only_baselines_keep_extractors_and_e2e_moves_them() {
        let (train, _) = generate(&task()).unwrap();
        let mut gated =
            MultimodalModel::init(ModelConfig::new(&task(), HeadKind::Gated, dims(), 8)).unwrap();
        let ext_before = gated.params.byte_image("ext");
        let mut spec = robust_spec(1);
        spec.schedule = ScheduleKind::Alternating;
        train_baseline_robust(&mut gated, &train, &spec).unwrap();
        assert_eq!(gated.params.byte_image("ext"), ext_before);

        let mut concat =
            MultimodalModel::init(ModelConfig::new(&task(), HeadKind::Concat, dims(), 8))
                .unwrap();
        let ext_before = concat.params.byte_image("ext");
        let mut spec = robust_spec(1);
        spec.scope = TrainScope::All;
        spec.schedule = ScheduleKind::Joint;
        train_end_to_end_adversarial(&mut concat, &train, &spec).unwrap();
        assert_ne!(concat.params.byte_image("ext"), ext_before);
    }

    #[test]
    fn trained_lel_beats_untrained_lel_under_attack() {
        let (train, test) = generate(&task()).unwrap();
        let base =
            MultimodalModel::init(ModelConfig::new(&task(), HeadKind::Lel, dims(), 8)).unwrap();
        let mut trained = base.clone();
        let mut spec = robust_spec(6);
        spec.schedule = ScheduleKind::Alternating;
        spec.lr = 0.05;
        train_baseline_robust(&mut trained, &train, &spec).unwrap();

        let indices: Vec<usize> = (0..test.len()).collect();
        let batch = test.full_batch().unwrap();
        let robust_acc = |m: &MultimodalModel| -> f64 {
            let mut correct = 0usize;
            let attack = AttackSpec::untargeted(0, 0.4, 3, 6);
            let out = pgd_single_source(m, &batch, &attack, &indices).unwrap();
            let mut attacked = batch.clone();
            attacked.xs[0] = out.payload;
            let preds = m.predict_labels(&attacked).unwrap();
            for (p, y) in preds.iter().zip(&batch.ys) {
                correct += usize::from(p == y);
            }
            correct as f64 / batch.ys.len() as f64
        };
        assert!(robust_acc(&trained) > robust_acc(&base));
    }
}

