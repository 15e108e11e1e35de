//! Reproducible synthetic k-modality classification tasks.
//!
//! Every sample has a class-conditional shared latent and one private latent
//! per modality; modality `i` observes a fixed random linear mix of
//! `sqrt(rho)*shared ++ sqrt(1-rho)*private_i` plus Gaussian noise. The
//! `redundancy` knob `rho` moves class evidence between the shared latent
//! (all modalities see it) and the private ones (each modality on its own),
//! while keeping total signal variance constant. `rho = 1` makes all
//! modalities noisy views of one latent; `rho = 0` leaves only private
//! evidence.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"OOLDATA1";

/// Definition of one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Modality count `k`.
    pub modalities: usize,
    /// Class count.
    pub classes: usize,
    /// Dimension of the latent shared across modalities.
    pub latent_dim: usize,
    /// Dimension of each per-modality private latent.
    pub private_dim: usize,
    /// Observed input dimension per modality.
    pub input_dims: Vec<usize>,
    /// Share of class-evidence variance carried by the shared latent, in [0,1].
    pub redundancy: f64,
    /// Observation noise standard deviation.
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Reuse one mixing matrix across modalities (requires equal dims).
    #[serde(default)]
    pub shared_mixing: bool,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modalities < 2 {
            return Err(Error::validation("need at least 2 modalities".to_string()));
        }
        if self.classes < 2 {
            return Err(Error::validation("need at least 2 classes".to_string()));
        }
        if self.input_dims.len() != self.modalities {
            return Err(Error::validation(format!(
                "{} input_dims for {} modalities",
                self.input_dims.len(),
                self.modalities
            )));
        }
        if self.latent_dim == 0
            || self.private_dim == 0
            || self.input_dims.iter().any(|&d| d == 0)
        {
            return Err(Error::validation("all dimensions must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return Err(Error::validation(format!(
                "redundancy must lie in [0,1], got {}",
                self.redundancy
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::validation("noise_sigma must be >= 0".to_string()));
        }
        if self.shared_mixing && self.input_dims.iter().any(|&d| d != self.input_dims[0]) {
            return Err(Error::validation(
                "shared_mixing requires equal input dims".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A sampled split: per-modality feature matrices plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub split: Split,
    /// One `[n × d_i]` matrix per modality.
    pub features: Vec<Tensor>,
    pub labels: Vec<u32>,
}

/// A batch view: per-modality `[B × d_i]` tensors plus usize labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub xs: Vec<Tensor>,
    pub ys: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let xs = self
            .features
            .iter()
            .map(|f| f.gather_rows(indices))
            .collect::<Result<Vec<_>>>()?;
        let ys = indices.iter().map(|&i| self.labels[i] as usize).collect();
        Ok(Batch { xs, ys })
    }

    /// The whole split as one batch.
    pub fn full_batch(&self) -> Result<Batch> {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }
}

/// Class means and mixing matrices drawn once per task seed.
#[derive(Debug, Clone)]
pub struct TaskParams {
    /// `[classes × latent_dim]` shared-latent class means.
    pub class_means: Vec<Vec<f64>>,
    /// `[classes][modality]` private-latent class means.
    pub private_means: Vec<Vec<Vec<f64>>>,
    /// Per-modality `[d_i × (latent+private)]` mixing matrices, row-major.
    pub mixing: Vec<Vec<f64>>,
}

/// Deterministic task-level parameters for a spec.
pub fn task_params(spec: &TaskSpec) -> TaskParams {
    let mut r = rng::rng(rng::derive(spec.seed, "task-params", 0));
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let class_means = (0..spec.classes)
        .map(|_| (0..spec.latent_dim).map(|_| std_normal.sample(&mut r)).collect())
        .collect();
    let private_means = (0..spec.classes)
        .map(|_| {
            (0..spec.modalities)
                .map(|_| (0..spec.private_dim).map(|_| std_normal.sample(&mut r)).collect())
                .collect()
        })
        .collect();
    let latent_total = spec.latent_dim + spec.private_dim;
    let mix_scale = 1.0 / (latent_total as f64).sqrt();
    let mut mixing: Vec<Vec<f64>> = Vec::with_capacity(spec.modalities);
    for i in 0..spec.modalities {
        if spec.shared_mixing && i > 0 {
            mixing.push(mixing[0].clone());
            continue;
        }
        let d = spec.input_dims[i];
        mixing.push(
            (0..d * latent_total)
                .map(|_| std_normal.sample(&mut r) * mix_scale)
                .collect(),
        );
    }
    TaskParams {
        class_means,
        private_means,
        mixing,
    }
}

/// Sample train and test splits for a spec. Pure in the spec: the same spec
/// always produces byte-identical datasets.
pub fn generate(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let params = task_params(spec);
    let train = sample_split(spec, &params, Split::Train, spec.n_train, "train")?;
    let test = sample_split(spec, &params, Split::Test, spec.n_test, "test")?;
    Ok((train, test))
}

fn sample_split(
    spec: &TaskSpec,
    params: &TaskParams,
    split: Split,
    n: usize,
    tag: &str,
) -> Result<Dataset> {
    let mut r = rng::rng(rng::derive(spec.seed, tag, 1));
    let labels = stratified_labels(n, spec.classes, &mut r);

    let within = Normal::new(0.0, 0.5).unwrap();
    let obs_noise = Normal::new(0.0, 1.0).unwrap();
    let shared_gain = spec.redundancy.sqrt();
    let private_gain = (1.0 - spec.redundancy).sqrt();
    let latent_total = spec.latent_dim + spec.private_dim;

    let mut columns: Vec<Vec<f64>> = spec
        .input_dims
        .iter()
        .map(|&d| Vec::with_capacity(n * d))
        .collect();
    let mut latent = vec![0.0; latent_total];
    for &y in &labels {
        let y = y as usize;
        // Shared latent, then each modality's private latent and observation.
        let shared: Vec<f64> = params.class_means[y]
            .iter()
            .map(|m| m + within.sample(&mut r))
            .collect();
        for i in 0..spec.modalities {
            for (slot, s) in latent[..spec.latent_dim].iter_mut().zip(&shared) {
                *slot = shared_gain * s;
            }
            for (slot, m) in latent[spec.latent_dim..]
                .iter_mut()
                .zip(&params.private_means[y][i])
            {
                *slot = private_gain * (m + within.sample(&mut r));
            }
            let d = spec.input_dims[i];
            let mix = &params.mixing[i];
            for row in 0..d {
                let mut x = 0.0;
                for (a, v) in mix[row * latent_total..(row + 1) * latent_total]
                    .iter()
                    .zip(&latent)
                {
                    x += a * v;
                }
                if spec.noise_sigma > 0.0 {
                    x += spec.noise_sigma * obs_noise.sample(&mut r);
                }
                columns[i].push(x);
            }
        }
    }

    let features = columns
        .into_iter()
        .zip(&spec.input_dims)
        .map(|(vals, &d)| Tensor::matrix(n, d, vals))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        split,
        features,
        labels,
    })
}

/// Labels in round-robin class order, then shuffled: every class count lands
/// within one of `n / classes`.
fn stratified_labels(n: usize, classes: usize, r: &mut ChaCha8Rng) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    labels.shuffle(r);
    labels
}

// ── On-disk format ──────────────────────────────────────────────────────
//
// magic "OOLDATA1", u32-length-prefixed TOML header (task spec, split, n),
// then per sample: d_1..d_k little-endian f64 runs followed by a u32 label.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    split: Split,
    n: usize,
    task: TaskSpec,
}

pub fn save_dataset(ds: &Dataset, path: &std::path::Path) -> Result<()> {
    let header = FileHeader {
        split: ds.split,
        n: ds.len(),
        task: ds.spec.clone(),
    };
    let header_text =
        toml::to_string(&header).map_err(|e| Error::Config(format!("header encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    binio::put_text_block(&mut out, &header_text);
    for row in 0..ds.len() {
        for f in &ds.features {
            binio::put_f64_slice_le(&mut out, f.row(row));
        }
        binio::put_u32_le(&mut out, ds.labels[row]);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf);
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let header_at = r.offset();
    let header_text = r.text_block("header")?;
    let header: FileHeader = toml::from_str(&header_text)
        .map_err(|e| Error::format(header_at, format!("header parse: {e}")))?;
    header.task.validate()?;

    let k = header.task.modalities;
    let mut columns: Vec<Vec<f64>> = header
        .task
        .input_dims
        .iter()
        .map(|&d| Vec::with_capacity(header.n * d))
        .collect();
    let mut labels = Vec::with_capacity(header.n);
    for _ in 0..header.n {
        for i in 0..k {
            let d = header.task.input_dims[i];
            columns[i].extend(r.f64_slice_le(d, "sample block")?);
        }
        let label = r.u32_le("label")?;
        if label as usize >= header.task.classes {
            return Err(Error::validation(format!(
                "label {label} out of range for {} classes",
                header.task.classes
            )));
        }
        labels.push(label);
    }
    if !r.is_at_end() {
        return Err(Error::format(r.offset(), "trailing bytes".to_string()));
    }

    let features = columns
        .into_iter()
        .zip(&header.task.input_dims)
        .map(|(vals, &d)| Tensor::matrix(header.n, d, vals))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: header.task,
        split: header.split,
        features,
        labels,
    })
}
