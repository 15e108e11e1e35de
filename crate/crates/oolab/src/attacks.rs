//! Single-source adversarial perturbations under an l-infinity budget.
//!
//! One projected-gradient-descent engine drives four fronts:
//!
//! - [`pgd_single_source`]: white-box adaptive attack on one input modality,
//!   ascending the task loss through the full (possibly defended) model.
//! - [`transfer_attack`]: the perturbation is computed against a unimodal
//!   surrogate only, then applied to the target model.
//! - [`feature_attack`]: perturbs extracted features of one modality after
//!   the extractor and before fusion.
//! - [`targeted_attack`]: descends `-log P(target)` instead.
//!
//! Attacks are batched: rows are independent (every model is row-wise), so
//! the sign of each row's gradient of the mean loss equals the sign of that
//! row's own loss gradient, and batched iterates match per-sample runs.
//! With `keep_best`, the returned iterate is the best-scoring one among the
//! clean input, the start point, and every PGD iterate.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::row_cross_entropy;
use crate::models::MultimodalModel;
use crate::nn::Scope;
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;

/// Perturbation norm. Only the supremum norm is implemented; the field
/// exists so other balls can slot in later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    LInf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Untargeted,
    /// Drive the prediction toward this class.
    Targeted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Input,
    Feature,
}

/// Budget and schedule for one attack cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    /// Attacked modality index.
    pub modality: usize,
    /// l-infinity budget in input (or feature) units.
    pub epsilon: f64,
    /// PGD iterations.
    pub steps: usize,
    /// Step size; `None` means `2.5 * epsilon / steps`.
    pub step_size: Option<f64>,
    pub norm: Norm,
    pub random_start: bool,
    pub objective: Objective,
    pub level: Level,
    pub keep_best: bool,
    /// Optional payload value range, for image-like data. Off by default.
    pub clip: Option<(f64, f64)>,
    pub seed: u64,
}

impl AttackSpec {
    pub fn untargeted(modality: usize, epsilon: f64, steps: usize, seed: u64) -> Self {
        AttackSpec {
            modality,
            epsilon,
            steps,
            step_size: None,
            norm: Norm::LInf,
            random_start: true,
            objective: Objective::Untargeted,
            level: Level::Input,
            keep_best: true,
            clip: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::validation(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::validation("steps must be >= 1".to_string()));
        }
        if let Some(a) = self.step_size {
            if a <= 0.0 {
                return Err(Error::validation(format!(
                    "step_size must be > 0, got {a}"
                )));
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon / self.steps as f64)
    }
}

/// Reusable attack settings without a bound modality or seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackTemplate {
    pub epsilon: f64,
    pub steps: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default = "default_true")]
    pub keep_best: bool,
    #[serde(default)]
    pub clip: Option<(f64, f64)>,
}

fn default_true() -> bool {
    true
}

impl AttackTemplate {
    pub fn new(epsilon: f64, steps: usize) -> Self {
        AttackTemplate {
            epsilon,
            steps,
            step_size: None,
            random_start: true,
            keep_best: true,
            clip: None,
        }
    }

    pub fn spec(&self, modality: usize, seed: u64) -> AttackSpec {
        AttackSpec {
            modality,
            epsilon: self.epsilon,
            steps: self.steps,
            step_size: self.step_size,
            norm: Norm::LInf,
            random_start: self.random_start,
            objective: Objective::Untargeted,
            level: Level::Input,
            keep_best: self.keep_best,
            clip: self.clip,
            seed,
        }
    }
}

/// One attacked sample.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Perturbed modality payload (input row or feature row).
    pub payload: Tensor,
    pub initial_loss: f64,
    pub achieved_loss: f64,
    pub iterations: usize,
    /// Detector arm chosen on the perturbed sample; filled in by evaluation.
    pub detector_arm: Option<usize>,
}

/// Batched outcome: per-sample results plus the payload matrix and the
/// per-iterate max-|delta| trace (for projection audits).
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub results: Vec<AttackResult>,
    pub payload: Tensor,
    pub delta_inf_trace: Vec<f64>,
}

/// Per-candidate scorer: returns the natural per-row loss and, when asked,
/// the gradient of the mean loss w.r.t. the candidate.
type EvalFn<'a> = dyn Fn(&Tensor, bool) -> Result<(Vec<f64>, Option<Tensor>)> + 'a;

fn run_pgd(
    x0: &Tensor,
    spec: &AttackSpec,
    maximize: bool,
    start_seeds: &[u64],
    warm_start: Option<&Tensor>,
    eval: &EvalFn,
) -> Result<BatchOutcome> {
    spec.validate()?;
    let rows = x0.rows();
    let cols = x0.last_dim();
    if start_seeds.len() != rows {
        return Err(Error::Contract(format!(
            "{} start seeds for {rows} rows",
            start_seeds.len()
        )));
    }

    let better = |a: f64, b: f64| if maximize { a > b } else { a < b };
    let project = |candidate: &mut Vec<f64>| {
        for (c, o) in candidate.iter_mut().zip(x0.values()) {
            *c = c.clamp(o - spec.epsilon, o + spec.epsilon);
            if let Some((lo, hi)) = spec.clip {
                *c = c.clamp(lo, hi);
            }
        }
    };
    let linf = |candidate: &[f64]| {
        candidate
            .iter()
            .zip(x0.values())
            .map(|(c, o)| (c - o).abs())
            .fold(0.0, f64::max)
    };

    // Score the clean input first: with keep_best it is always a candidate,
    // which makes "achieved >= initial" exact rather than probabilistic.
    let (initial_losses, _) =
        eval(x0, false).map_err(|e| Error::AttackNumeric { step: 0, source: Box::new(e) })?;
    let mut best_losses = initial_losses.clone();
    let mut best = x0.values().to_vec();

    let mut current: Vec<f64> = match warm_start {
        Some(w) => {
            if w.shape() != x0.shape() {
                return Err(Error::shape(
                    "pgd",
                    format!("warm start {:?} vs input {:?}", w.shape(), x0.shape()),
                ));
            }
            w.values().to_vec()
        }
        None if spec.random_start && spec.epsilon > 0.0 => {
            let mut v = Vec::with_capacity(rows * cols);
            for (r, &seed) in start_seeds.iter().enumerate() {
                let mut rr = rng::rng(seed);
                for j in 0..cols {
                    v.push(x0.values()[r * cols + j] + rr.random_range(-spec.epsilon..=spec.epsilon));
                }
            }
            v
        }
        None => x0.values().to_vec(),
    };
    project(&mut current);
    let mut trace = vec![linf(&current)];

    let consider = |candidate: &[f64],
                    losses: &[f64],
                    best: &mut Vec<f64>,
                    best_losses: &mut Vec<f64>| {
        for (r, &loss) in losses.iter().enumerate() {
            if better(loss, best_losses[r]) {
                best_losses[r] = loss;
                best[r * cols..(r + 1) * cols]
                    .copy_from_slice(&candidate[r * cols..(r + 1) * cols]);
            }
        }
    };

    let alpha = spec.alpha();
    let dir = if maximize { 1.0 } else { -1.0 };
    for step in 1..=spec.steps {
        let candidate = Tensor::new(x0.shape().to_vec(), current.clone())?;
        let (losses, grad) = eval(&candidate, true)
            .map_err(|e| Error::AttackNumeric { step, source: Box::new(e) })?;
        consider(&current, &losses, &mut best, &mut best_losses);
        let grad = grad.ok_or_else(|| Error::Contract("pgd scorer returned no gradient".into()))?;
        for (c, g) in current.iter_mut().zip(grad.values()) {
            *c += alpha * dir * sign(*g);
        }
        project(&mut current);
        trace.push(linf(&current));
    }
    let final_candidate = Tensor::new(x0.shape().to_vec(), current.clone())?;
    let (final_losses, _) = eval(&final_candidate, false).map_err(|e| Error::AttackNumeric {
        step: spec.steps,
        source: Box::new(e),
    })?;
    consider(&current, &final_losses, &mut best, &mut best_losses);

    let (payload_values, achieved) = if spec.keep_best {
        (best, best_losses)
    } else {
        (current, final_losses)
    };
    let payload = Tensor::new(x0.shape().to_vec(), payload_values)?;

    let mut results = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = payload.row(r);
        let delta_inf = row
            .iter()
            .zip(x0.row(r))
            .map(|(c, o)| (c - o).abs())
            .fold(0.0, f64::max);
        if delta_inf > spec.epsilon + 1e-12 {
            return Err(Error::Contract(format!(
                "payload escaped the epsilon ball: {delta_inf} > {}",
                spec.epsilon
            )));
        }
        results.push(AttackResult {
            payload: Tensor::vector(row)?,
            initial_loss: initial_losses[r],
            achieved_loss: achieved[r],
            iterations: spec.steps,
            detector_arm: None,
        });
    }
    Ok(BatchOutcome {
        results,
        payload,
        delta_inf_trace: trace,
    })
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-row seeds for random starts, derived from the attack seed and the
/// global sample indices so results do not depend on chunking.
pub fn start_seeds(spec_seed: u64, sample_indices: &[usize]) -> Vec<u64> {
    sample_indices
        .iter()
        .map(|&i| rng::derive(spec_seed, "pgd-start", i as u64))
        .collect()
}

fn input_attack_scorer<'a>(
    model: &'a MultimodalModel,
    batch: &'a Batch,
    labels: &'a [usize],
    modality: usize,
) -> Box<EvalFn<'a>> {
    Box::new(move |candidate: &Tensor, need_grad: bool| {
        let mut sess = model.session(Scope::Frozen);
        let xs: Vec<_> = batch
            .xs
            .iter()
            .enumerate()
            .map(|(j, x)| {
                if j == modality {
                    sess.graph.leaf(candidate.clone(), need_grad)
                } else {
                    sess.graph.constant(x.clone())
                }
            })
            .collect();
        let target = xs[modality];
        let logits = model.predict(&mut sess, &xs)?;
        let losses = row_cross_entropy(sess.graph.value(logits), labels)?;
        let grad = if need_grad {
            let mean = sess.graph.cross_entropy(logits, labels)?;
            sess.graph.backward(mean)?;
            let g = sess.graph.grad(target).expect("flagged leaf");
            Some(Tensor::new(candidate.shape().to_vec(), g.to_vec())?)
        } else {
            None
        };
        Ok((losses, grad))
    })
}

/// White-box adaptive attack on one input modality (maximizes task loss).
pub fn pgd_single_source(
    model: &MultimodalModel,
    batch: &Batch,
    spec: &AttackSpec,
    sample_indices: &[usize],
) -> Result<BatchOutcome> {
    if spec.level != Level::Input {
        return Err(Error::validation("pgd_single_source wants level=input"));
    }
    if spec.modality >= batch.xs.len() {
        return Err(Error::validation(format!(
            "attack modality {} out of range",
            spec.modality
        )));
    }
    let scorer = input_attack_scorer(model, batch, &batch.ys, spec.modality);
    run_pgd(
        &batch.xs[spec.modality],
        spec,
        true,
        &start_seeds(spec.seed, sample_indices),
        None,
        &scorer,
    )
}

/// Same as [`pgd_single_source`] but iterating from a caller-provided
/// payload (used by nested-budget monotonicity checks).
pub fn pgd_single_source_warm(
    model: &MultimodalModel,
    batch: &Batch,
    spec: &AttackSpec,
    sample_indices: &[usize],
    warm: &Tensor,
) -> Result<BatchOutcome> {
    let scorer = input_attack_scorer(model, batch, &batch.ys, spec.modality);
    run_pgd(
        &batch.xs[spec.modality],
        spec,
        true,
        &start_seeds(spec.seed, sample_indices),
        Some(warm),
        &scorer,
    )
}

/// Attack computed on a unimodal surrogate, blind to the fusion model and
/// to the other modalities' inputs. The payload is meant to be applied to a
/// multimodal model by the caller.
pub fn transfer_attack(
    surrogate: &MultimodalModel,
    batch: &Batch,
    spec: &AttackSpec,
    sample_indices: &[usize],
) -> Result<BatchOutcome> {
    pgd_single_source(surrogate, batch, spec, sample_indices)
}

/// White-box attack on the extracted features of one modality; the head is
/// evaluated with the perturbed feature block.
pub fn feature_attack(
    model: &MultimodalModel,
    batch: &Batch,
    spec: &AttackSpec,
    sample_indices: &[usize],
) -> Result<BatchOutcome> {
    if spec.level != Level::Feature {
        return Err(Error::validation("feature_attack wants level=feature"));
    }
    // Features of every modality under the frozen extractors.
    let zs_clean: Vec<Tensor> = {
        let mut sess = model.session(Scope::Frozen);
        let xs: Vec<_> = batch
            .xs
            .iter()
            .map(|x| sess.graph.constant(x.clone()))
            .collect();
        let zs = model.extract(&mut sess, &xs)?;
        zs.iter().map(|&z| sess.graph.value(z).clone()).collect()
    };
    let z0 = zs_clean[spec.modality].clone();
    let modality = spec.modality;
    let labels = &batch.ys;
    let scorer: Box<EvalFn> = Box::new(move |candidate: &Tensor, need_grad: bool| {
        let mut sess = model.session(Scope::Frozen);
        let zs: Vec<_> = zs_clean
            .iter()
            .enumerate()
            .map(|(j, z)| {
                if j == modality {
                    sess.graph.leaf(candidate.clone(), need_grad)
                } else {
                    sess.graph.constant(z.clone())
                }
            })
            .collect();
        let target = zs[modality];
        let logits = model.head_from_features(&mut sess, &zs)?;
        let losses = row_cross_entropy(sess.graph.value(logits), labels)?;
        let grad = if need_grad {
            let mean = sess.graph.cross_entropy(logits, labels)?;
            sess.graph.backward(mean)?;
            let g = sess.graph.grad(target).expect("flagged leaf");
            Some(Tensor::new(candidate.shape().to_vec(), g.to_vec())?)
        } else {
            None
        };
        Ok((losses, grad))
    });
    run_pgd(
        &z0,
        spec,
        true,
        &start_seeds(spec.seed, sample_indices),
        None,
        &scorer,
    )
}

/// Minimize `-log P(target)` per sample under the same projection. Reported
/// losses are in that minimized convention.
pub fn targeted_attack(
    model: &MultimodalModel,
    batch: &Batch,
    targets: &[usize],
    spec: &AttackSpec,
    sample_indices: &[usize],
) -> Result<BatchOutcome> {
    if targets.len() != batch.ys.len() {
        return Err(Error::validation(format!(
            "{} targets for {} samples",
            targets.len(),
            batch.ys.len()
        )));
    }
    let scorer = input_attack_scorer(model, batch, targets, spec.modality);
    run_pgd(
        &batch.xs[spec.modality],
        spec,
        false,
        &start_seeds(spec.seed, sample_indices),
        None,
        &scorer,
    )
}

/// Uniform target classes excluding each sample's true label.
pub fn sample_targets(labels: &[usize], classes: usize, seed: u64) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut r = rng::rng(rng::derive(seed, "target-class", i as u64));
            let draw = r.random_range(0..classes - 1);
            if draw >= y {
                draw + 1
            } else {
                draw
            }
        })
        .collect()
}
