//! The model zoo: per-modality feature extractors, fusion heads, unimodal
//! classifiers, the odd-one-out detector, and the expert-ensemble robust
//! fusion layer.
//!
//! All heads share the same extractor family (two hidden relu layers onto a
//! common feature dimension `m`), so checkpoints can hand pretrained
//! extractors from one head to another. The robust head replaces the plain
//! fusion with `k+1` leave-one-out expert networks whose outputs are mixed
//! by the detector's probability simplex: expert `i` never touches features
//! of modality `i`, and the last expert fuses everything.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::data::{Batch, TaskSpec};
use crate::error::{Error, Result};
use crate::graph::{argmax_row, VarId};
use crate::nn::{FeedForward, ParamSet, Scope, Session};
use crate::rng;
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 8] = b"OOLCKPT1";

/// Fusion head selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Concatenate features, then a classifier tail (standard mid fusion).
    Concat,
    /// Average per-modality unimodal logits (soft voting, late fusion).
    Mean,
    /// One network over the raw concatenated inputs.
    Early,
    /// Multiplicative sigmoid gate over concatenated features.
    Gated,
    /// Linear ensembling layer over concatenated features.
    Lel,
    /// Odd-one-out detector weighing leave-one-out experts.
    Robust,
    /// Leave-one-out upper bound: averages unimodal logits of every
    /// modality except the excluded one.
    Oracle(usize),
    /// Single-modality classifier on a shared extractor.
    Unimodal(usize),
}

impl HeadKind {
    pub fn name(&self) -> String {
        match self {
            HeadKind::Concat => "concat".into(),
            HeadKind::Mean => "mean".into(),
            HeadKind::Early => "early".into(),
            HeadKind::Gated => "gated".into(),
            HeadKind::Lel => "lel".into(),
            HeadKind::Robust => "robust".into(),
            HeadKind::Oracle(i) => format!("oracle-{i}"),
            HeadKind::Unimodal(i) => format!("uni-{i}"),
        }
    }
}

/// What the odd-one-out detector looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorMode {
    /// Raw extractor features, concatenated.
    Unaligned,
    /// Per-modality unimodal logits, concatenated.
    Aligned,
}

/// Width settings shared by every head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Extractor output dimension `m`, identical across modalities.
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "defaults::extractor_hidden")]
    pub extractor_hidden: usize,
    #[serde(default = "defaults::tail_hidden")]
    pub tail_hidden: usize,
    #[serde(default = "defaults::expert_hidden")]
    pub expert_hidden: usize,
    /// Fused feature dimension emitted by each expert.
    #[serde(default = "defaults::fused_dim")]
    pub fused_dim: usize,
    #[serde(default = "defaults::detector_hidden")]
    pub detector_hidden: usize,
}

mod defaults {
    pub fn feature_dim() -> usize {
        16
    }
    pub fn extractor_hidden() -> usize {
        48
    }
    pub fn tail_hidden() -> usize {
        32
    }
    pub fn expert_hidden() -> usize {
        32
    }
    pub fn fused_dim() -> usize {
        16
    }
    pub fn detector_hidden() -> usize {
        64
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            feature_dim: 16,
            extractor_hidden: 48,
            tail_hidden: 32,
            expert_hidden: 32,
            fused_dim: 16,
            detector_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub modalities: usize,
    pub classes: usize,
    pub input_dims: Vec<usize>,
    pub dims: ModelDims,
    pub detector_mode: DetectorMode,
    #[serde(with = "crate::rng::hex_seed")]
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(task: &TaskSpec, head: HeadKind, dims: ModelDims, init_seed: u64) -> Self {
        ModelConfig {
            head,
            modalities: task.modalities,
            classes: task.classes,
            input_dims: task.input_dims.clone(),
            dims,
            detector_mode: DetectorMode::Unaligned,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims.len() != self.modalities {
            return Err(Error::validation(format!(
                "{} input_dims for {} modalities",
                self.input_dims.len(),
                self.modalities
            )));
        }
        match self.head {
            HeadKind::Oracle(i) | HeadKind::Unimodal(i) if i >= self.modalities => {
                Err(Error::validation(format!(
                    "head refers to modality {i}, have {}",
                    self.modalities
                )))
            }
            _ => Ok(()),
        }
    }
}

/// A k-modality classifier with one of the fusion heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

/// Single-modality classifier; structurally a [`MultimodalModel`] with a
/// [`HeadKind::Unimodal`] head, kept as its own name for clarity at call
/// sites (transfer attacks use these as surrogates).
pub type UnimodalModel = MultimodalModel;

impl MultimodalModel {
    // ── Layer descriptors ───────────────────────────────────────────────

    fn extractor_ff(&self, i: usize) -> FeedForward {
        let d = self.cfg.dims.extractor_hidden;
        FeedForward::new(
            format!("ext{i}"),
            vec![self.cfg.input_dims[i], d, d, self.cfg.dims.feature_dim],
        )
    }

    fn trunk_ff(&self) -> FeedForward {
        let d = self.cfg.dims.extractor_hidden;
        let total: usize = self.cfg.input_dims.iter().sum();
        FeedForward::new("trunk", vec![total, d, d, self.cfg.dims.feature_dim])
    }

    fn tail_ff(&self) -> FeedForward {
        let m = self.cfg.dims.feature_dim;
        let k = self.cfg.modalities;
        let c = self.cfg.classes;
        let h = self.cfg.dims.tail_hidden;
        match self.cfg.head {
            HeadKind::Concat | HeadKind::Gated => {
                FeedForward::new("tail", vec![k * m, h, c])
            }
            HeadKind::Lel => FeedForward::new("tail", vec![k * m, c]),
            HeadKind::Early => FeedForward::new("tail", vec![m, h, c]),
            HeadKind::Robust => FeedForward::new("tail", vec![self.cfg.dims.fused_dim, h, c]),
            HeadKind::Mean | HeadKind::Oracle(_) | HeadKind::Unimodal(_) => {
                unreachable!("head has no shared tail")
            }
        }
    }

    fn unimodal_ff(&self, i: usize) -> FeedForward {
        FeedForward::new(
            format!("uni{i}"),
            vec![
                self.cfg.dims.feature_dim,
                self.cfg.dims.tail_hidden,
                self.cfg.classes,
            ],
        )
    }

    /// Single linear gating layer emitting one logit per fused feature.
    fn gate_ff(&self) -> FeedForward {
        let km = self.cfg.modalities * self.cfg.dims.feature_dim;
        FeedForward::new("gate", vec![km, km])
    }

    /// Expert `j < k` fuses every feature block except modality `j`;
    /// expert `k` fuses all of them.
    fn expert_ff(&self, j: usize) -> FeedForward {
        let m = self.cfg.dims.feature_dim;
        let k = self.cfg.modalities;
        let input = if j < k { (k - 1) * m } else { k * m };
        FeedForward::new(
            format!("expert{j}"),
            vec![input, self.cfg.dims.expert_hidden, self.cfg.dims.fused_dim],
        )
    }

    fn detector_ff(&self) -> FeedForward {
        let k = self.cfg.modalities;
        let input = match self.cfg.detector_mode {
            DetectorMode::Unaligned => k * self.cfg.dims.feature_dim,
            DetectorMode::Aligned => k * self.cfg.classes,
        };
        FeedForward::new("det", vec![input, self.cfg.dims.detector_hidden, k + 1])
    }

    fn component_layers(cfg: &ModelConfig) -> Vec<FeedForward> {
        let probe = MultimodalModel {
            cfg: cfg.clone(),
            params: ParamSet::new(),
        };
        let k = cfg.modalities;
        let mut layers = Vec::new();
        match cfg.head {
            HeadKind::Early => layers.push(probe.trunk_ff()),
            _ => {
                for i in 0..k {
                    layers.push(probe.extractor_ff(i));
                }
            }
        }
        match cfg.head {
            HeadKind::Concat | HeadKind::Lel | HeadKind::Early => layers.push(probe.tail_ff()),
            HeadKind::Gated => {
                layers.push(probe.gate_ff());
                layers.push(probe.tail_ff());
            }
            HeadKind::Mean | HeadKind::Oracle(_) => {
                for i in 0..k {
                    layers.push(probe.unimodal_ff(i));
                }
            }
            HeadKind::Unimodal(i) => layers.push(probe.unimodal_ff(i)),
            HeadKind::Robust => {
                for j in 0..=k {
                    layers.push(probe.expert_ff(j));
                }
                layers.push(probe.detector_ff());
                layers.push(probe.tail_ff());
                if cfg.detector_mode == DetectorMode::Aligned {
                    for i in 0..k {
                        layers.push(probe.unimodal_ff(i));
                    }
                }
            }
        }
        layers
    }

    /// Fresh model with Kaiming-uniform fan-in initialization. The robust
    /// head also carries frozen per-feature standardization slots for the
    /// detector and expert inputs (identity until
    /// [`MultimodalModel::fit_feature_norm`] runs).
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut r: ChaCha8Rng = rng::rng(rng::derive(cfg.init_seed, "model-init", 0));
        for layer in Self::component_layers(&cfg) {
            layer.init(&mut params, &mut r);
        }
        if cfg.head == HeadKind::Robust {
            let m = cfg.dims.feature_dim;
            for i in 0..cfg.modalities {
                params.insert(format!("norm{i}.shift"), Tensor::zeros(vec![m]));
                params.insert(
                    format!("norm{i}.scale"),
                    Tensor::matrix(1, m, vec![1.0; m])?,
                );
            }
        }
        Ok(MultimodalModel { cfg, params })
    }

    /// Fit the frozen standardization of detector/expert inputs from the
    /// extractor features of (a slice of) a dataset. Run this once after
    /// adopting pretrained extractors, before robust training.
    pub fn fit_feature_norm(&mut self, data: &crate::data::Dataset, max_rows: usize) -> Result<()> {
        if self.cfg.head != HeadKind::Robust {
            return Err(Error::validation("feature norm applies to the robust head"));
        }
        let n = data.len().min(max_rows);
        let indices: Vec<usize> = (0..n).collect();
        let batch = data.batch(&indices)?;
        let mut sess = self.session(Scope::Frozen);
        let xs: Vec<VarId> = batch
            .xs
            .iter()
            .map(|x| sess.graph.constant(x.clone()))
            .collect();
        let zs = self.extract(&mut sess, &xs)?;
        let m = self.cfg.dims.feature_dim;
        let mut fitted: Vec<(Tensor, Tensor)> = Vec::with_capacity(zs.len());
        for &z in &zs {
            let t = sess.graph.value(z);
            let mut shift = vec![0.0; m];
            let mut scale = vec![0.0; m];
            for j in 0..m {
                let mut mean = 0.0;
                for r in 0..n {
                    mean += t.values()[r * m + j];
                }
                mean /= n as f64;
                let mut var = 0.0;
                for r in 0..n {
                    var += (t.values()[r * m + j] - mean).powi(2);
                }
                let std = (var / n as f64).sqrt();
                shift[j] = -mean;
                scale[j] = 1.0 / (std + 1e-8);
            }
            fitted.push((Tensor::vector(&shift)?, Tensor::matrix(1, m, scale)?));
        }
        drop(sess);
        for (i, (shift, scale)) in fitted.into_iter().enumerate() {
            self.params.set(&format!("norm{i}.shift"), shift)?;
            self.params.set(&format!("norm{i}.scale"), scale)?;
        }
        Ok(())
    }

    /// Standardized feature blocks for the robust head's fresh subnetworks.
    fn normalized_features(&self, sess: &mut Session, zs: &[VarId]) -> Result<Vec<VarId>> {
        let rows = sess.graph.value(zs[0]).rows();
        let ones = sess
            .graph
            .constant(Tensor::matrix(rows, 1, vec![1.0; rows])?);
        zs.iter()
            .enumerate()
            .map(|(i, &z)| {
                let shift = sess.param(&format!("norm{i}.shift"))?;
                let scale = sess.param(&format!("norm{i}.scale"))?;
                let shifted = sess.graph.add(z, shift)?;
                let scale_wide = sess.graph.matmul(ones, scale)?;
                sess.graph.mul(shifted, scale_wide)
            })
            .collect()
    }

    pub fn session(&self, scope: Scope) -> Session<'_> {
        Session::new(&self.params, scope)
    }

    /// Trainable-name prefixes for fusion-side training (extractors frozen).
    pub fn fusion_scope(&self) -> Scope {
        let prefixes = match self.cfg.head {
            HeadKind::Concat | HeadKind::Lel | HeadKind::Early => vec!["tail.".to_string()],
            HeadKind::Gated => vec!["gate.".to_string(), "tail.".to_string()],
            HeadKind::Mean | HeadKind::Oracle(_) => vec!["uni".to_string()],
            HeadKind::Unimodal(i) => vec![format!("uni{i}.")],
            HeadKind::Robust => vec![
                "det.".to_string(),
                "expert".to_string(),
                "tail.".to_string(),
            ],
        };
        Scope::Prefixes(prefixes)
    }

    /// Copy every parameter under `prefix` from another model.
    pub fn adopt(&mut self, other: &MultimodalModel, prefix: &str) -> Result<()> {
        let names: Vec<String> = other
            .params
            .names()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        if names.is_empty() {
            return Err(Error::Contract(format!(
                "no parameters under prefix `{prefix}` to adopt"
            )));
        }
        for name in names {
            let tensor = other.params.get(&name)?.clone();
            self.params.set(&name, tensor)?;
        }
        Ok(())
    }

    // ── Forward pieces ──────────────────────────────────────────────────

    /// Per-modality features `z_i = g_i(x_i)`, each `[B × m]`.
    pub fn extract(&self, sess: &mut Session, xs: &[VarId]) -> Result<Vec<VarId>> {
        if matches!(self.cfg.head, HeadKind::Early) {
            return Err(Error::validation(
                "early-fusion head has no per-modality features".to_string(),
            ));
        }
        self.check_input_arity(sess, xs)?;
        (0..self.cfg.modalities)
            .map(|i| self.extractor_ff(i).forward(sess, xs[i]))
            .collect()
    }

    fn check_input_arity(&self, sess: &Session, xs: &[VarId]) -> Result<()> {
        if xs.len() != self.cfg.modalities {
            return Err(Error::shape(
                "predict",
                format!("{} inputs for {} modalities", xs.len(), self.cfg.modalities),
            ));
        }
        for (i, &x) in xs.iter().enumerate() {
            let got = sess.graph.value(x).last_dim();
            if got != self.cfg.input_dims[i] {
                return Err(Error::shape(
                    "predict",
                    format!("modality {i}: dim {got}, expected {}", self.cfg.input_dims[i]),
                ));
            }
        }
        Ok(())
    }

    /// Features of a single modality: `g_i(x_i)`.
    pub fn extract_one(&self, sess: &mut Session, i: usize, x_i: VarId) -> Result<VarId> {
        self.extractor_ff(i).forward(sess, x_i)
    }

    /// Apply the head's shared classifier tail.
    pub fn tail_forward(&self, sess: &mut Session, fused: VarId) -> Result<VarId> {
        self.tail_ff().forward(sess, fused)
    }

    /// Unimodal logits for modality `i` from its features.
    pub fn unimodal_logits(&self, sess: &mut Session, i: usize, z_i: VarId) -> Result<VarId> {
        self.unimodal_ff(i).forward(sess, z_i)
    }

    /// Detector logits and simplex over `k+1` arms. Arm `i < k` flags
    /// modality `i` as perturbed; arm `k` means all clean. The unaligned
    /// mode reads standardized raw features; the aligned mode reads the
    /// (pretrained, unstandardized) unimodal logits instead.
    pub fn odd_one_out(&self, sess: &mut Session, zs: &[VarId]) -> Result<(VarId, VarId)> {
        let input = match self.cfg.detector_mode {
            DetectorMode::Unaligned => {
                let normed = self.normalized_features(sess, zs)?;
                sess.graph.concat(&normed)?
            }
            DetectorMode::Aligned => {
                let logits = (0..self.cfg.modalities)
                    .map(|i| self.unimodal_logits(sess, i, zs[i]))
                    .collect::<Result<Vec<_>>>()?;
                sess.graph.concat(&logits)?
            }
        };
        let logits = self.detector_ff().forward(sess, input)?;
        let probs = sess.graph.softmax(logits)?;
        Ok((logits, probs))
    }

    /// All `k+1` expert outputs on standardized features, each
    /// `[B × fused_dim]`.
    pub fn expert_outputs(&self, sess: &mut Session, zs: &[VarId]) -> Result<Vec<VarId>> {
        let k = self.cfg.modalities;
        let normed = self.normalized_features(sess, zs)?;
        let mut outs = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let parts: Vec<VarId> = (0..k)
                .filter(|&i| j >= k || i != j)
                .map(|i| normed[i])
                .collect();
            let input = sess.graph.concat(&parts)?;
            outs.push(self.expert_ff(j).forward(sess, input)?);
        }
        Ok(outs)
    }

    /// Convex combination of expert outputs weighted by the detector simplex:
    /// `z_out = sum_j probs[:, j] * experts[j]`.
    pub fn robust_fuse(
        &self,
        sess: &mut Session,
        experts: &[VarId],
        probs: VarId,
    ) -> Result<VarId> {
        let arms = self.cfg.modalities + 1;
        let pt = sess.graph.value(probs);
        if pt.last_dim() != arms || experts.len() != arms {
            return Err(Error::shape(
                "robust_fuse",
                format!("{} experts, weight width {}", experts.len(), pt.last_dim()),
            ));
        }
        for r in 0..pt.rows() {
            let row = pt.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&w| !(-1e-6..=1.0 + 1e-6).contains(&w)) {
                return Err(Error::Contract(format!(
                    "expert weights not on the simplex: row {r} = {row:?}"
                )));
            }
        }
        let fused_dim = self.cfg.dims.fused_dim;
        let ones = sess
            .graph
            .constant(Tensor::matrix(1, fused_dim, vec![1.0; fused_dim])?);
        let mut acc: Option<VarId> = None;
        for (j, &e) in experts.iter().enumerate() {
            let w = sess.graph.slice(probs, j, 1)?;
            let w_wide = sess.graph.matmul(w, ones)?;
            let term = sess.graph.mul(w_wide, e)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => sess.graph.add(prev, term)?,
            });
        }
        Ok(acc.unwrap())
    }

    fn mean_logits(sess: &mut Session, logits: &[VarId]) -> Result<VarId> {
        let mut acc = logits[0];
        for &l in &logits[1..] {
            acc = sess.graph.add(acc, l)?;
        }
        sess.graph.scale(acc, 1.0 / logits.len() as f64)
    }

    /// Class logits from already-extracted features. Not defined for the
    /// early head, which consumes raw inputs only.
    pub fn head_from_features(&self, sess: &mut Session, zs: &[VarId]) -> Result<VarId> {
        let k = self.cfg.modalities;
        match self.cfg.head {
            HeadKind::Concat | HeadKind::Lel => {
                let fused = sess.graph.concat(zs)?;
                self.tail_ff().forward(sess, fused)
            }
            HeadKind::Gated => {
                let stacked = sess.graph.concat(zs)?;
                let gate_logits = self.gate_ff().forward(sess, stacked)?;
                let gate = sess.graph.sigmoid(gate_logits)?;
                let gated = sess.graph.mul(stacked, gate)?;
                self.tail_ff().forward(sess, gated)
            }
            HeadKind::Mean => {
                let logits = (0..k)
                    .map(|i| self.unimodal_logits(sess, i, zs[i]))
                    .collect::<Result<Vec<_>>>()?;
                Self::mean_logits(sess, &logits)
            }
            HeadKind::Oracle(excluded) => {
                let logits = (0..k)
                    .filter(|&i| i != excluded)
                    .map(|i| self.unimodal_logits(sess, i, zs[i]))
                    .collect::<Result<Vec<_>>>()?;
                Self::mean_logits(sess, &logits)
            }
            HeadKind::Unimodal(i) => self.unimodal_logits(sess, i, zs[i]),
            HeadKind::Robust => {
                let (_, probs) = self.odd_one_out(sess, zs)?;
                let experts = self.expert_outputs(sess, zs)?;
                let fused = self.robust_fuse(sess, &experts, probs)?;
                self.tail_ff().forward(sess, fused)
            }
            HeadKind::Early => Err(Error::validation(
                "early-fusion head has no feature-level interface".to_string(),
            )),
        }
    }

    /// Class logits from raw inputs.
    pub fn predict(&self, sess: &mut Session, xs: &[VarId]) -> Result<VarId> {
        match self.cfg.head {
            HeadKind::Early => {
                self.check_input_arity(sess, xs)?;
                let raw = sess.graph.concat(xs)?;
                let trunk = self.trunk_ff().forward(sess, raw)?;
                self.tail_ff().forward(sess, trunk)
            }
            HeadKind::Oracle(excluded) => {
                // The excluded modality never enters the graph.
                self.check_input_arity(sess, xs)?;
                let k = self.cfg.modalities;
                let logits = (0..k)
                    .filter(|&i| i != excluded)
                    .map(|i| {
                        let z = self.extractor_ff(i).forward(sess, xs[i])?;
                        self.unimodal_logits(sess, i, z)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::mean_logits(sess, &logits)
            }
            HeadKind::Unimodal(i) => {
                self.check_input_arity(sess, xs)?;
                let z = self.extractor_ff(i).forward(sess, xs[i])?;
                self.unimodal_logits(sess, i, z)
            }
            _ => {
                let zs = self.extract(sess, xs)?;
                self.head_from_features(sess, &zs)
            }
        }
    }

    /// Frozen-model logits for a batch.
    pub fn logits_for(&self, batch: &Batch) -> Result<Tensor> {
        let mut sess = self.session(Scope::Frozen);
        let xs: Vec<VarId> = batch
            .xs
            .iter()
            .map(|x| sess.graph.constant(x.clone()))
            .collect();
        let logits = self.predict(&mut sess, &xs)?;
        Ok(sess.graph.value(logits).clone())
    }

    /// Frozen-model argmax labels for a batch (lowest index wins ties).
    pub fn predict_labels(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.logits_for(batch)?;
        Ok((0..logits.rows())
            .map(|r| argmax_row(logits.row(r)))
            .collect())
    }

    // ── Checkpoints ─────────────────────────────────────────────────────

    /// Binary checkpoint: config header plus named little-endian parameter
    /// blobs; round trips are bit-exact.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let header = toml::to_string(&self.cfg)
            .map_err(|e| Error::Config(format!("checkpoint header encode: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        binio::put_text_block(&mut out, &header);
        binio::put_u32_le(&mut out, self.params.len() as u32);
        for (name, tensor) in self.params.iter() {
            binio::put_text_block(&mut out, name);
            binio::put_u32_le(&mut out, tensor.shape().len() as u32);
            for &d in tensor.shape() {
                binio::put_u32_le(&mut out, d as u32);
            }
            binio::put_f64_slice_le(&mut out, tensor.values());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        let mut r = Reader::new(&buf);
        let magic = r.take(8, "magic")?;
        if magic != CKPT_MAGIC {
            return Err(Error::format(0, format!("bad checkpoint magic {magic:?}")));
        }
        let header_at = r.offset();
        let header = r.text_block("header")?;
        let cfg: ModelConfig = toml::from_str(&header)
            .map_err(|e| Error::format(header_at, format!("header parse: {e}")))?;
        cfg.validate()?;
        let count = r.u32_le("param count")? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = r.text_block("param name")?;
            let ndims = r.u32_le("ndims")? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(r.u32_le("dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let values = r.f64_slice_le(numel, "param values")?;
            params.insert(name, Tensor::new(shape, values)?);
        }
        if !r.is_at_end() {
            return Err(Error::format(r.offset(), "trailing bytes".to_string()));
        }
        let model = MultimodalModel { cfg, params };
        model.check_complete()?;
        Ok(model)
    }

    /// Verify that every layer the head needs is present with right shapes.
    fn check_complete(&self) -> Result<()> {
        for layer in Self::component_layers(&self.cfg) {
            for (i, pair) in layer.dims.windows(2).enumerate() {
                let w = self.params.get(&format!("{}.l{i}.w", layer.prefix))?;
                if w.shape() != [pair[0], pair[1]] {
                    return Err(Error::validation(format!(
                        "{}.l{i}.w has shape {:?}, expected [{}, {}]",
                        layer.prefix,
                        w.shape(),
                        pair[0],
                        pair[1]
                    )));
                }
                let b = self.params.get(&format!("{}.l{i}.b", layer.prefix))?;
                if b.shape() != [pair[1]] {
                    return Err(Error::validation(format!(
                        "{}.l{i}.b has shape {:?}, expected [{}]",
                        layer.prefix,
                        b.shape(),
                        pair[1]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, TaskSpec};
    use crate::nn::Scope;
    use rand::Rng;

    fn spec() -> TaskSpec {
        TaskSpec {
            modalities: 3,
            classes: 4,
            latent_dim: 6,
            private_dim: 3,
            input_dims: vec![10, 10, 10],
            redundancy: 0.9,
            noise_sigma: 0.1,
            n_train: 48,
            n_test: 24,
            seed: 1,
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

    fn model(head: HeadKind) -> MultimodalModel {
        MultimodalModel::init(ModelConfig::new(&spec(), head, dims(), 7)).unwrap()
    }

    fn batch(n: usize) -> Batch {
        let (train, _) = generate(&spec()).unwrap();
        train.batch(&(0..n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn extract_is_pure_and_zero_under_zero_weights() {
        let mut m = model(HeadKind::Concat);
        let b = batch(3);
        // Zero out extractor 0.
        for name in m.extractor_ff(0).param_names() {
            let shape = m.params.get(&name).unwrap().shape().to_vec();
            m.params.set(&name, Tensor::zeros(shape)).unwrap();
        }
        let mut sess = m.session(Scope::Frozen);
        let xs: Vec<VarId> = b.xs.iter().map(|x| sess.graph.constant(x.clone())).collect();
        let zs = m.extract(&mut sess, &xs).unwrap();
        assert!(sess.graph.value(zs[0]).values().iter().all(|&v| v == 0.0));

        let mut sess2 = m.session(Scope::Frozen);
        let xs2: Vec<VarId> = b.xs.iter().map(|x| sess2.graph.constant(x.clone())).collect();
        let zs2 = m.extract(&mut sess2, &xs2).unwrap();
        assert_eq!(
            sess.graph.value(zs[1]).values(),
            sess2.graph.value(zs2[1]).values()
        );
    }

    #[test]
    fn extract_matches_independent_matrix_oracle() {
        let m = model(HeadKind::Concat);
        let b = batch(2);
        let mut sess = m.session(Scope::Frozen);
        let xs: Vec<VarId> = b.xs.iter().map(|x| sess.graph.constant(x.clone())).collect();
        let zs = m.extract(&mut sess, &xs).unwrap();

        // Hand-rolled forward for modality 1, written independently.
        let w = |name: &str| m.params.get(name).unwrap();
        let dense = |x: &[f64], wt: &Tensor, bt: &Tensor| -> Vec<f64> {
            let (input, output) = (wt.shape()[0], wt.shape()[1]);
            let mut out = bt.values().to_vec();
            for (j, &xi) in x.iter().enumerate().take(input) {
                for o in 0..output {
                    out[o] += xi * wt.values()[j * output + o];
                }
            }
            out
        };
        for row in 0..2 {
            let mut h = dense(b.xs[1].row(row), w("ext1.l0.w"), w("ext1.l0.b"));
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut h2 = dense(&h, w("ext1.l1.w"), w("ext1.l1.b"));
            h2.iter_mut().for_each(|v| *v = v.max(0.0));
            let expected = dense(&h2, w("ext1.l2.w"), w("ext1.l2.b"));
            let got = sess.graph.value(zs[1]).row(row);
            for (a, b) in got.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_tail_consumes_k_times_m_features() {
        let m = model(HeadKind::Concat);
        assert_eq!(m.tail_ff().input_dim(), 3 * 8);
    }

    #[test]
    fn concat_is_invariant_to_coordinated_permutation() {
        // Swapping modalities 0 and 1 together with their extractor params
        // and the corresponding row blocks of the tail input layer leaves
        // the logits unchanged.
        let m = model(HeadKind::Concat);
        let b = batch(4);
        let base = m.logits_for(&b).unwrap();

        let mut permuted = m.clone();
        for layer in 0..3 {
            for suffix in ["w", "b"] {
                let a = m.params.get(&format!("ext0.l{layer}.{suffix}")).unwrap().clone();
                let c = m.params.get(&format!("ext1.l{layer}.{suffix}")).unwrap().clone();
                permuted.params.set(&format!("ext0.l{layer}.{suffix}"), c).unwrap();
                permuted.params.set(&format!("ext1.l{layer}.{suffix}"), a).unwrap();
            }
        }
        // Swap feature blocks 0 and 1 in the tail's first weight matrix.
        let tail_w = m.params.get("tail.l0.w").unwrap();
        let (rows, cols) = (tail_w.shape()[0], tail_w.shape()[1]);
        let fdim = 8;
        let mut swapped = tail_w.values().to_vec();
        for r in 0..fdim {
            for c in 0..cols {
                swapped[r * cols + c] = tail_w.values()[(fdim + r) * cols + c];
                swapped[(fdim + r) * cols + c] = tail_w.values()[r * cols + c];
            }
        }
        permuted
            .params
            .set("tail.l0.w", Tensor::matrix(rows, cols, swapped).unwrap())
            .unwrap();

        let mut swapped_batch = b.clone();
        swapped_batch.xs.swap(0, 1);
        let got = permuted.logits_for(&swapped_batch).unwrap();
        assert!(base.max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn mean_head_averages_logits() {
        let params = ParamSet::new();
        let mut sess = Session::new(&params, Scope::Frozen);
        let a = sess.graph.constant(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap());
        let b = sess.graph.constant(Tensor::matrix(1, 2, vec![3.0, 1.0]).unwrap());
        let mean = MultimodalModel::mean_logits(&mut sess, &[a, b]).unwrap();
        assert_eq!(sess.graph.value(mean).values(), &[2.0, 2.0]);
        let same = MultimodalModel::mean_logits(&mut sess, &[a, a, a]).unwrap();
        assert_eq!(sess.graph.value(same).values(), &[1.0, 3.0]);
    }

    #[test]
    fn mean_argmax_brute_force_over_logit_triples() {
        // Brute force over random logit triples. Two findings, frozen here:
        // a unanimous per-modality argmax always survives averaging (sum of
        // strict inequalities), while a mere 2-of-3 majority can be escaped
        // by one outlier vector.
        let mut r = crate::rng::rng(99);
        let mut escapes_with_majority = 0;
        for _ in 0..2000 {
            let triple: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| r.random_range(-2.0..2.0)).collect())
                .collect();
            let mean: Vec<f64> = (0..3)
                .map(|j| triple.iter().map(|t| t[j]).sum::<f64>() / 3.0)
                .collect();
            let am: Vec<usize> = triple.iter().map(|t| argmax_row(t)).collect();
            let mean_am = argmax_row(&mean);
            if am[0] == am[1] && am[1] == am[2] {
                assert_eq!(mean_am, am[0], "unanimous argmax lost: {triple:?}");
            } else if !am.contains(&mean_am)
                && (0..3).any(|c| am.iter().filter(|&&a| a == c).count() >= 2)
            {
                escapes_with_majority += 1;
            }
        }
        // The enumeration does find majority escapes (48/2000 on this
        // seed), so averaging only guarantees unanimity, not majority.
        assert!(
            (1..100).contains(&escapes_with_majority),
            "{escapes_with_majority} escapes"
        );

        // One concrete escape, kept as a regression fixture: argmaxes are
        // {0, 0, 1} yet the mean prefers class 2.
        let fixture = [[5.0, 0.0, 4.9], [5.0, 0.0, 4.9], [0.0, 5.0, 4.9]];
        let mean: Vec<f64> = (0..3).map(|j| fixture.iter().map(|t| t[j]).sum::<f64>()).collect();
        assert_eq!(argmax_row(&mean), 2);
    }

    #[test]
    fn early_head_consumes_total_input_dim() {
        let m = model(HeadKind::Early);
        assert_eq!(m.trunk_ff().input_dim(), 30);
        let b = batch(2);
        assert_eq!(m.logits_for(&b).unwrap().shape(), &[2, 4]);
        assert!(matches!(
            {
                let mut sess = m.session(Scope::Frozen);
                let xs: Vec<VarId> =
                    b.xs.iter().map(|x| sess.graph.constant(x.clone())).collect();
                m.extract(&mut sess, &xs)
            },
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn saturated_gate_recovers_concat_and_zero_gate_halves() {
        let concat = model(HeadKind::Concat);
        let mut gated = model(HeadKind::Gated);
        gated.adopt(&concat, "ext").unwrap();
        gated.adopt(&concat, "tail").unwrap();

        // Gate logits forced to a large constant: sigmoid saturates at 1.
        let fix_gate = |m: &mut MultimodalModel, bias: f64| {
            for name in m.gate_ff().param_names() {
                let t = m.params.get(&name).unwrap();
                let shape = t.shape().to_vec();
                if name.ends_with(".b") {
                    let n = t.numel();
                    m.params
                        .set(&name, Tensor::new(shape, vec![bias; n]).unwrap())
                        .unwrap();
                } else {
                    m.params.set(&name, Tensor::zeros(shape)).unwrap();
                }
            }
        };
        fix_gate(&mut gated, 50.0);
        let b = batch(4);
        let diff = concat
            .logits_for(&b)
            .unwrap()
            .max_abs_diff(&gated.logits_for(&b).unwrap());
        assert!(diff < 1e-9, "saturated gate diff {diff}");

        // Gate logits zero: features are halved before the tail.
        fix_gate(&mut gated, 0.0);
        let mut sess = gated.session(Scope::Frozen);
        let xs: Vec<VarId> = b.xs.iter().map(|x| sess.graph.constant(x.clone())).collect();
        let zs = gated.extract(&mut sess, &xs).unwrap();
        let stacked = sess.graph.concat(&zs).unwrap();
        let halved = sess.graph.scale(stacked, 0.5).unwrap();
        let tail_on_halved = gated.tail_ff().forward(&mut sess, halved).unwrap();
        let direct = gated.predict(&mut sess, &xs).unwrap();
        let a = sess.graph.value(tail_on_halved).clone();
        let c = sess.graph.value(direct).clone();
        assert!(a.max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn detector_emits_a_simplex() {
        let m = model(HeadKind::Robust);
        let b = batch(5);
        let mut sess = m.session(Scope::Frozen);
        let xs: Vec<VarId> = b.xs.iter().map(|x| sess.graph.constant(x.clone())).collect();
        let zs = m.extract(&mut sess, &xs).unwrap();
        let (_, probs) = m.odd_one_out(&mut sess, &zs).unwrap();
        let pt = sess.graph.value(probs);
        assert_eq!(pt.shape(), &[5, 4]);
        for r in 0..5 {
            let row = pt.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn zero_detector_outputs_uniform_quarters() {
        let mut m = model(HeadKind::Robust);
        for name in m.detector_ff().param_names() {
            let shape = m.params.get(&name).unwrap().shape().to_vec();
            m.params.set(&name, Tensor::zeros(shape)).unwrap();
        }
        let b = batch(2);
        let mut sess = m.session(Scope::Frozen);
        let xs: Vec<VarId> = b.xs.iter().map(|x| sess.graph.constant(x.clone())).collect();
        let zs = m.extract(&mut sess, &xs).unwrap();
        let (_, probs) = m.odd_one_out(&mut sess, &zs).unwrap();
        for r in 0..2 {
            for &p in sess.graph.value(probs).row(r) {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_detector_outputs_remain_simplices() {
        let m = model(HeadKind::Robust);
        let mut r = crate::rng::rng(31);
        for _ in 0..1000 {
            let z: Vec<Tensor> = (0..3)
                .map(|_| {
                    Tensor::matrix(1, 8, (0..8).map(|_| r.random_range(-3.0..3.0)).collect())
                        .unwrap()
                })
                .collect();
            let mut sess = m.session(Scope::Frozen);
            let zs: Vec<VarId> = z.iter().map(|t| sess.graph.constant(t.clone())).collect();
            let (_, probs) = m.odd_one_out(&mut sess, &zs).unwrap();
            let row = sess.graph.value(probs).row(0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn one_hot_weights_collapse_to_selected_expert() {
        let m = model(HeadKind::Robust);
        let b = batch(3);
        let mut sess = m.session(Scope::Frozen);
        let xs: Vec<VarId> = b.xs.iter().map(|x| sess.graph.constant(x.clone())).collect();
        let zs = m.extract(&mut sess, &xs).unwrap();
        let experts = m.expert_outputs(&mut sess, &zs).unwrap();
        for hot in 0..4 {
            let mut w = vec![0.0; 3 * 4];
            for r in 0..3 {
                w[r * 4 + hot] = 1.0;
            }
            let probs = sess.graph.constant(Tensor::matrix(3, 4, w).unwrap());
            let fused = m.robust_fuse(&mut sess, &experts, probs).unwrap();
            assert_eq!(
                sess.graph.value(fused).values(),
                sess.graph.value(experts[hot]).values()
            );
        }
    }

    #[test]
    fn identical_experts_make_fusion_weight_free() {
        let m = model(HeadKind::Robust);
        let mut sess = m.session(Scope::Frozen);
        let e = sess
            .graph
            .constant(Tensor::matrix(1, 8, (1..=8).map(f64::from).collect()).unwrap());
        let experts = vec![e; 4];
        let w1 = sess
            .graph
            .constant(Tensor::matrix(1, 4, vec![0.7, 0.1, 0.1, 0.1]).unwrap());
        let w2 = sess
            .graph
            .constant(Tensor::matrix(1, 4, vec![0.25; 4]).unwrap());
        let f1 = m.robust_fuse(&mut sess, &experts, w1).unwrap();
        let f2 = m.robust_fuse(&mut sess, &experts, w2).unwrap();
        let d = sess.graph.value(f1).max_abs_diff(sess.graph.value(f2));
        assert!(d < 1e-12);
    }

    #[test]
    fn scalar_expert_combination_matches_hand_arithmetic() {
        // Experts valued (1, 2, 3) with weights (0.5, 0.25, 0.25) -> 1.75.
        let task = TaskSpec {
            modalities: 2,
            input_dims: vec![10, 10],
            ..spec()
        };
        let mut d = dims();
        d.fused_dim = 1;
        let m =
            MultimodalModel::init(ModelConfig::new(&task, HeadKind::Robust, d, 3)).unwrap();
        let mut sess = m.session(Scope::Frozen);
        let experts: Vec<VarId> = (1..=3)
            .map(|v| sess.graph.constant(Tensor::matrix(1, 1, vec![v as f64]).unwrap()))
            .collect();
        let probs = sess
            .graph
            .constant(Tensor::matrix(1, 3, vec![0.5, 0.25, 0.25]).unwrap());
        let fused = m.robust_fuse(&mut sess, &experts, probs).unwrap();
        assert_eq!(sess.graph.value(fused).item(), 1.75);
    }

    #[test]
    fn off_simplex_weights_are_a_contract_error() {
        let m = model(HeadKind::Robust);
        let mut sess = m.session(Scope::Frozen);
        let e = sess.graph.constant(Tensor::matrix(1, 8, vec![0.0; 8]).unwrap());
        let experts = vec![e; 4];
        let w = sess
            .graph
            .constant(Tensor::matrix(1, 4, vec![0.5, 0.5, 0.5, -0.5]).unwrap());
        assert!(matches!(
            m.robust_fuse(&mut sess, &experts, w),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn expert_excludes_its_modality_bit_exactly() {
        let m = model(HeadKind::Robust);
        let b = batch(1);
        let probe = |z0_shift: f64, expert: usize| -> Vec<f64> {
            let mut sess = m.session(Scope::Frozen);
            let xs: Vec<VarId> =
                b.xs.iter().map(|x| sess.graph.constant(x.clone())).collect();
            let mut zs = m.extract(&mut sess, &xs).unwrap();
            if z0_shift != 0.0 {
                let shift = sess
                    .graph
                    .constant(Tensor::matrix(1, 8, vec![z0_shift; 8]).unwrap());
                zs[0] = sess.graph.add(zs[0], shift).unwrap();
            }
            let outs = m.expert_outputs(&mut sess, &zs).unwrap();
            sess.graph.value(outs[expert]).values().to_vec()
        };
        // Expert 0 ignores modality 0 entirely; expert 3 (all) must move.
        assert_eq!(probe(0.0, 0), probe(17.5, 0));
        assert_ne!(probe(0.0, 3), probe(17.5, 3));
    }

    #[test]
    fn robust_logits_depend_on_every_modality() {
        // Even though expert i excludes z_i, the detector path keeps the
        // full model sensitive to each input; central differences on one
        // coordinate must be nonzero.
        let m = model(HeadKind::Robust);
        let b = batch(1);
        let loss_at = |shift: f64| -> f64 {
            let mut xs = b.xs.clone();
            let mut vals = xs[0].values().to_vec();
            vals[0] += shift;
            xs[0] = Tensor::matrix(1, 10, vals).unwrap();
            let shifted = Batch { xs, ys: b.ys.clone() };
            let logits = m.logits_for(&shifted).unwrap();
            crate::graph::row_cross_entropy(&logits, &[b.ys[0]]).unwrap()[0]
        };
        let h = 1e-5;
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        assert!(fd.abs() > 1e-8, "finite difference {fd}");
    }

    #[test]
    fn oracle_head_ignores_excluded_modality() {
        let m = model(HeadKind::Oracle(1));
        let b = batch(3);
        let base = m.logits_for(&b).unwrap();
        let mut perturbed = b.clone();
        let n = perturbed.xs[1].numel();
        perturbed.xs[1] = Tensor::matrix(3, 10, vec![123.0; n]).unwrap();
        let got = m.logits_for(&perturbed).unwrap();
        assert_eq!(base.values(), got.values());

        // Gradient w.r.t. the excluded input is exactly absent/zero.
        let mut sess = m.session(Scope::Frozen);
        let xs: Vec<VarId> = b
            .xs
            .iter()
            .map(|x| sess.graph.leaf(x.clone(), true))
            .collect();
        let logits = m.predict(&mut sess, &xs).unwrap();
        let root = sess.graph.sum(logits).unwrap();
        sess.graph.backward(root).unwrap();
        assert!(sess.graph.grad(xs[1]).unwrap().iter().all(|&g| g == 0.0));
        assert!(sess.graph.grad(xs[0]).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for head in [
            HeadKind::Concat,
            HeadKind::Mean,
            HeadKind::Early,
            HeadKind::Gated,
            HeadKind::Lel,
            HeadKind::Robust,
            HeadKind::Oracle(2),
            HeadKind::Unimodal(0),
        ] {
            let m = model(head);
            let path = dir.path().join(format!("{}.ckpt", head.name()));
            m.save(&path).unwrap();
            let back = MultimodalModel::load(&path).unwrap();
            assert_eq!(m, back, "{}", head.name());
        }
    }

    #[test]
    fn aligned_detector_reads_unimodal_logits() {
        let mut cfg = ModelConfig::new(&spec(), HeadKind::Robust, dims(), 5);
        cfg.detector_mode = DetectorMode::Aligned;
        let m = MultimodalModel::init(cfg).unwrap();
        assert_eq!(m.detector_ff().input_dim(), 3 * 4);
        let b = batch(2);
        assert_eq!(m.logits_for(&b).unwrap().shape(), &[2, 4]);
    }
}
