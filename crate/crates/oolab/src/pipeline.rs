//! Run-directory orchestration: generate -> train -> attack -> evaluate,
//! with per-stage done-markers for cheap resume.
//!
//! Layout under the run directory:
//!
//! ```text
//! config.toml                      copied, validated snapshot
//! markers/<stage>.seed<s>.done     stage completion markers
//! data/seed<s>/{train,test}.bin    dataset files
//! ckpt/seed<s>/<model>.ckpt        model checkpoints
//! curves/seed<s>/<model>.csv       per-epoch loss/detection curves
//! attacks/seed<s>/<cell>.bin       attack payloads per evaluation cell
//! report.json, tables.csv          deterministic results
//! run_meta.json                    wall-clock and versions (not hashed)
//! ```
//!
//! Seeds run independently (and concurrently); every metric is reduced in
//! seed order, so reruns with the same configuration produce byte-identical
//! reports.

use std::path::{Path, PathBuf};

use crate::attacks::AttackTemplate;
use crate::binio::{self, Reader};
use crate::config::RunConfig;
use crate::data::{generate, load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    clean_outcome, detection_report, generate_payloads, score_payloads, AttackKind, PayloadSet,
};
use crate::models::{DetectorMode, HeadKind, ModelConfig, MultimodalModel};
use crate::par;
use crate::report::{build_report, report_csv, report_hash, report_json, EvalReport, ModelMetrics, SeedReport};
use crate::rng;
use crate::tensor::Tensor;
use crate::training::{
    train_baseline_robust, train_clean, train_end_to_end_adversarial, train_robust, Curves,
    ScheduleKind, TrainScope, TrainSpec,
};

const ATTACK_MAGIC: &[u8; 8] = b"OOLATTK1";

/// Report rows, in table order.
const REPORT_MODELS: [&str; 8] = [
    "concat",
    "mean",
    "early",
    "gated",
    "lel",
    "robust",
    "robust-aligned",
    "end2end-at",
];

pub struct Pipeline {
    pub cfg: RunConfig,
    dir: PathBuf,
}

impl Pipeline {
    /// Bind a configuration to a run directory, writing (or checking) the
    /// config snapshot.
    pub fn new(cfg: RunConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(dir)?;
        std::fs::create_dir_all(dir.join("markers"))?;
        let snapshot = dir.join("config.toml");
        let text = cfg.to_toml()?;
        if snapshot.exists() {
            let existing = RunConfig::load(&snapshot)?;
            if existing != cfg {
                return Err(Error::Config(
                    "run directory was created with a different config".to_string(),
                ));
            }
        } else {
            std::fs::write(&snapshot, &text)?;
            // The snapshot must re-parse to an equal config.
            let back = RunConfig::load(&snapshot)?;
            if back != cfg {
                return Err(Error::Config("config snapshot does not round-trip".into()));
            }
        }
        Ok(Pipeline {
            cfg,
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    // ── Stage bookkeeping ───────────────────────────────────────────────

    fn marker(&self, stage: &str, seed: u64) -> PathBuf {
        self.dir.join("markers").join(format!("{stage}.seed{seed}.done"))
    }

    fn stage_done(&self, stage: &str, seed: u64) -> bool {
        self.marker(stage, seed).exists()
    }

    fn mark_done(&self, stage: &str, seed: u64) -> Result<()> {
        std::fs::write(self.marker(stage, seed), b"done\n")?;
        Ok(())
    }

    fn seed_dir(&self, kind: &str, seed: u64) -> Result<PathBuf> {
        let p = self.dir.join(kind).join(format!("seed{seed}"));
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }

    // ── generate ────────────────────────────────────────────────────────

    /// Sample and persist the dataset files for every seed.
    pub fn cmd_generate(&self) -> Result<()> {
        let results = par::map_indexed(self.cfg.seeds.len(), |i| {
            self.generate_seed(self.cfg.seeds[i])
                .map_err(|e| e.in_stage("generate"))
        });
        results.into_iter().collect()
    }

    fn generate_seed(&self, seed: u64) -> Result<()> {
        if self.stage_done("generate", seed) {
            return Ok(());
        }
        let mut spec = self.cfg.task.clone();
        spec.seed = seed;
        let (train, test) = generate(&spec)?;
        let dir = self.seed_dir("data", seed)?;
        save_dataset(&train, &dir.join("train.bin"))?;
        save_dataset(&test, &dir.join("test.bin"))?;
        self.mark_done("generate", seed)
    }

    fn load_split(&self, seed: u64, split: &str) -> Result<Dataset> {
        let path = self.dir.join("data").join(format!("seed{seed}")).join(format!("{split}.bin"));
        load_dataset(&path)
    }

    // ── train ───────────────────────────────────────────────────────────

    /// Train every selected model for every seed, saving checkpoints and
    /// curve CSVs.
    pub fn cmd_train(&self) -> Result<()> {
        let results = par::map_indexed(self.cfg.seeds.len(), |i| {
            self.train_seed(self.cfg.seeds[i])
                .map_err(|e| e.in_stage("train"))
        });
        results.into_iter().collect()
    }

    fn model_config(&self, head: HeadKind, seed: u64, name: &str) -> ModelConfig {
        let mut task = self.cfg.task.clone();
        task.seed = seed;
        ModelConfig::new(
            &task,
            head,
            self.cfg.model.clone(),
            rng::derive(seed, "init", fnv(name)),
        )
    }

    fn clean_spec(&self, seed: u64, name: &str, scope: TrainScope) -> TrainSpec {
        let s = &self.cfg.train_clean;
        TrainSpec {
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            epochs: s.epochs,
            batch_size: s.batch_size,
            seed: rng::derive(seed, "train", fnv(name)),
            inner_attack: None,
            scope,
            schedule: ScheduleKind::Joint,
            grad_clip: s.grad_clip,
        }
    }

    fn inner_template(&self) -> AttackTemplate {
        let mut t = self.cfg.attack.clone();
        if let Some(steps) = self.cfg.train_robust.inner_steps {
            t.steps = steps;
        }
        t
    }

    fn robust_spec(&self, seed: u64, name: &str, scope: TrainScope, schedule: ScheduleKind) -> TrainSpec {
        let s = &self.cfg.train_robust;
        TrainSpec {
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            epochs: s.epochs,
            batch_size: s.batch_size,
            seed: rng::derive(seed, "train", fnv(name)),
            inner_attack: Some(self.inner_template()),
            scope,
            schedule,
            grad_clip: s.grad_clip,
        }
    }

    fn ckpt_path(&self, seed: u64, name: &str) -> Result<PathBuf> {
        Ok(self.seed_dir("ckpt", seed)?.join(format!("{name}.ckpt")))
    }

    fn save_trained(&self, seed: u64, name: &str, model: &MultimodalModel, curves: &Curves) -> Result<()> {
        model.save(&self.ckpt_path(seed, name)?)?;
        let curves_path = self.seed_dir("curves", seed)?.join(format!("{name}.csv"));
        std::fs::write(curves_path, curves.to_csv())?;
        Ok(())
    }

    fn load_model(&self, seed: u64, name: &str) -> Result<MultimodalModel> {
        MultimodalModel::load(&self.ckpt_path(seed, name)?)
    }

    fn train_seed(&self, seed: u64) -> Result<()> {
        if self.stage_done("train", seed) {
            return Ok(());
        }
        let train = self.load_split(seed, "train")?;
        let test = self.load_split(seed, "test")?;
        let k = self.cfg.task.modalities;

        // Pretrained extractors come from the clean concat model; unimodal
        // classifiers (also transfer surrogates) sit on top of them.
        let mut concat = MultimodalModel::init(self.model_config(HeadKind::Concat, seed, "concat"))?;
        let curves = train_clean(&mut concat, &train, &self.clean_spec(seed, "concat", TrainScope::All))?;
        self.save_trained(seed, "concat", &concat, &curves)?;

        let mut unimodals = Vec::with_capacity(k);
        for i in 0..k {
            let name = format!("uni-{i}");
            let mut uni = MultimodalModel::init(self.model_config(HeadKind::Unimodal(i), seed, &name))?;
            uni.adopt(&concat, "ext")?;
            let curves = train_clean(&mut uni, &train, &self.clean_spec(seed, &name, TrainScope::FusionOnly))?;
            self.save_trained(seed, &name, &uni, &curves)?;
            unimodals.push(uni);
        }

        if self.cfg.wants("mean") {
            // Mean fusion is the assembly of the unimodal classifiers.
            let mut mean = MultimodalModel::init(self.model_config(HeadKind::Mean, seed, "mean"))?;
            mean.adopt(&concat, "ext")?;
            for (i, uni) in unimodals.iter().enumerate() {
                mean.adopt(uni, &format!("uni{i}."))?;
            }
            self.save_trained(seed, "mean", &mean, &Curves::default())?;
        }

        if self.cfg.wants("early") {
            let mut early = MultimodalModel::init(self.model_config(HeadKind::Early, seed, "early"))?;
            let curves = train_clean(&mut early, &train, &self.clean_spec(seed, "early", TrainScope::All))?;
            self.save_trained(seed, "early", &early, &curves)?;
        }

        if self.cfg.wants("oracle") {
            for i in 0..k {
                let name = format!("oracle-{i}");
                let mut oracle = MultimodalModel::init(self.model_config(HeadKind::Oracle(i), seed, &name))?;
                oracle.adopt(&concat, "ext")?;
                for (j, uni) in unimodals.iter().enumerate() {
                    oracle.adopt(uni, &format!("uni{j}."))?;
                }
                // Joint fine-tuning of the remaining tails on the
                // leave-one-out objective.
                let curves = train_clean(&mut oracle, &train, &self.clean_spec(seed, &name, TrainScope::FusionOnly))?;
                self.save_trained(seed, &name, &oracle, &curves)?;
            }
        }

        let schedule = self.cfg.train_robust.schedule;
        if self.cfg.wants("lel") {
            let mut lel = MultimodalModel::init(self.model_config(HeadKind::Lel, seed, "lel"))?;
            lel.adopt(&concat, "ext")?;
            let spec = self.robust_spec(seed, "lel", TrainScope::FusionOnly, schedule);
            let curves = train_baseline_robust(&mut lel, &train, &spec)?;
            self.save_trained(seed, "lel", &lel, &curves)?;
        }

        if self.cfg.wants("gated") {
            let mut gated = MultimodalModel::init(self.model_config(HeadKind::Gated, seed, "gated"))?;
            gated.adopt(&concat, "ext")?;
            let spec = self.robust_spec(seed, "gated", TrainScope::FusionOnly, schedule);
            let curves = train_baseline_robust(&mut gated, &train, &spec)?;
            self.save_trained(seed, "gated", &gated, &curves)?;
        }

        if self.cfg.wants("robust") {
            let mut robust = MultimodalModel::init(self.model_config(HeadKind::Robust, seed, "robust"))?;
            robust.adopt(&concat, "ext")?;
            robust.fit_feature_norm(&train, 1024)?;
            let spec = self.robust_spec(seed, "robust", TrainScope::FusionOnly, ScheduleKind::Joint);
            let curves = train_robust(&mut robust, &train, Some(&test), &spec)?;
            self.save_trained(seed, "robust", &robust, &curves)?;
        }

        if self.cfg.wants("robust-aligned") {
            let mut cfg = self.model_config(HeadKind::Robust, seed, "robust-aligned");
            cfg.detector_mode = DetectorMode::Aligned;
            let mut aligned = MultimodalModel::init(cfg)?;
            aligned.adopt(&concat, "ext")?;
            for (i, uni) in unimodals.iter().enumerate() {
                aligned.adopt(uni, &format!("uni{i}."))?;
            }
            aligned.fit_feature_norm(&train, 1024)?;
            let spec = self.robust_spec(seed, "robust-aligned", TrainScope::FusionOnly, ScheduleKind::Joint);
            let curves = train_robust(&mut aligned, &train, Some(&test), &spec)?;
            self.save_trained(seed, "robust-aligned", &aligned, &curves)?;
        }

        if self.cfg.wants("end2end-at") {
            // Trained from scratch on the joint clean+perturbed objective,
            // extractors included.
            let cfg = self.model_config(HeadKind::Concat, seed, "end2end-at");
            let mut e2e = MultimodalModel::init(cfg)?;
            let spec = self.robust_spec(seed, "end2end-at", TrainScope::All, ScheduleKind::Joint);
            let curves = train_end_to_end_adversarial(&mut e2e, &train, &spec)?;
            self.save_trained(seed, "end2end-at", &e2e, &curves)?;
        }

        self.mark_done("train", seed)
    }

    // ── attack ──────────────────────────────────────────────────────────

    fn attack_path(&self, seed: u64, cell: &str) -> Result<PathBuf> {
        Ok(self.seed_dir("attacks", seed)?.join(format!("{cell}.bin")))
    }

    /// Generate and persist every attack payload cell for every seed.
    pub fn cmd_attack(&self) -> Result<()> {
        let results = par::map_indexed(self.cfg.seeds.len(), |i| {
            self.attack_seed(self.cfg.seeds[i])
                .map_err(|e| e.in_stage("attack"))
        });
        results.into_iter().collect()
    }

    fn attack_seed(&self, seed: u64) -> Result<()> {
        if self.stage_done("attack", seed) {
            return Ok(());
        }
        let test = self.load_split(seed, "test")?;
        let k = self.cfg.task.modalities;
        let template = &self.cfg.attack;
        let subset = self.cfg.eval.appendix_samples.min(test.len());

        let selected: Vec<&str> = REPORT_MODELS
            .iter()
            .copied()
            .filter(|m| self.cfg.wants(m))
            .collect();

        // Transfer payloads come from the unimodal surrogates and are
        // shared by every target model.
        for i in 0..k {
            let surrogate = self.load_model(seed, &format!("uni-{i}"))?;
            let ps = generate_payloads(
                &surrogate,
                Some(&surrogate),
                &test,
                template,
                AttackKind::Transfer,
                i,
                rng::derive(seed, "attack-transfer", i as u64),
                test.len(),
            )?;
            self.write_payloads(seed, &format!("transfer.m{i}"), &ps)?;
        }

        for name in &selected {
            let model = self.load_model(seed, name)?;
            for i in 0..k {
                let ps = generate_payloads(
                    &model,
                    None,
                    &test,
                    template,
                    AttackKind::Adaptive,
                    i,
                    rng::derive(seed, "attack-adaptive", fnv(name) ^ i as u64),
                    test.len(),
                )?;
                self.write_payloads(seed, &format!("{name}.adaptive.m{i}"), &ps)?;

                if model.cfg.head != HeadKind::Early {
                    let mut feature_template = template.clone();
                    feature_template.epsilon = self.cfg.eval.feature_epsilon;
                    let ps = generate_payloads(
                        &model,
                        None,
                        &test,
                        &feature_template,
                        AttackKind::Feature,
                        i,
                        rng::derive(seed, "attack-feature", fnv(name) ^ i as u64),
                        subset,
                    )?;
                    self.write_payloads(seed, &format!("{name}.feature.m{i}"), &ps)?;
                }

                let ps = generate_payloads(
                    &model,
                    None,
                    &test,
                    template,
                    AttackKind::Targeted,
                    i,
                    rng::derive(seed, "attack-targeted", fnv(name) ^ i as u64),
                    subset,
                )?;
                self.write_payloads(seed, &format!("{name}.targeted.m{i}"), &ps)?;
            }
        }

        if self.cfg.wants("oracle") {
            for i in 0..k {
                let oracle = self.load_model(seed, &format!("oracle-{i}"))?;
                let ps = generate_payloads(
                    &oracle,
                    None,
                    &test,
                    template,
                    AttackKind::Adaptive,
                    i,
                    rng::derive(seed, "attack-oracle", i as u64),
                    test.len(),
                )?;
                self.write_payloads(seed, &format!("oracle-{i}.adaptive.m{i}"), &ps)?;
            }
        }

        self.mark_done("attack", seed)
    }

    fn write_payloads(&self, seed: u64, cell: &str, ps: &PayloadSet) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(ATTACK_MAGIC);
        let header = format!(
            "kind = \"{}\"\nmodality = {}\nepsilon = {}\nseed = \"{:#018x}\"\nn = {}\nwidth = {}\nhas_targets = {}\n",
            ps.kind.name(),
            ps.modality,
            ps.epsilon,
            ps.seed,
            ps.len(),
            ps.payload.last_dim(),
            ps.targets.is_some(),
        );
        binio::put_text_block(&mut out, &header);
        binio::put_f64_slice_le(&mut out, ps.payload.values());
        binio::put_f64_slice_le(&mut out, &ps.achieved_loss);
        binio::put_f64_slice_le(&mut out, &ps.initial_loss);
        if let Some(targets) = &ps.targets {
            for &t in targets {
                binio::put_u32_le(&mut out, t);
            }
        }
        std::fs::write(self.attack_path(seed, cell)?, out)?;
        Ok(())
    }

    fn read_payloads(&self, seed: u64, cell: &str) -> Result<PayloadSet> {
        let buf = std::fs::read(self.attack_path(seed, cell)?)?;
        let mut r = Reader::new(&buf);
        let magic = r.take(8, "magic")?;
        if magic != ATTACK_MAGIC {
            return Err(Error::format(0, format!("bad attack magic {magic:?}")));
        }
        let header_at = r.offset();
        let header = r.text_block("header")?;
        let table: toml::Table = header
            .parse()
            .map_err(|e| Error::format(header_at, format!("header parse: {e}")))?;
        let get_int = |key: &str| -> Result<i64> {
            table
                .get(key)
                .and_then(|v| v.as_integer())
                .ok_or_else(|| Error::format(header_at, format!("missing {key}")))
        };
        let kind = match table.get("kind").and_then(|v| v.as_str()) {
            Some("adaptive") => AttackKind::Adaptive,
            Some("transfer") => AttackKind::Transfer,
            Some("feature") => AttackKind::Feature,
            Some("targeted") => AttackKind::Targeted,
            other => {
                return Err(Error::format(
                    header_at,
                    format!("unknown attack kind {other:?}"),
                ))
            }
        };
        let modality = get_int("modality")? as usize;
        let n = get_int("n")? as usize;
        let width = get_int("width")? as usize;
        let epsilon = table
            .get("epsilon")
            .and_then(|v| v.as_float().or_else(|| v.as_integer().map(|x| x as f64)))
            .ok_or_else(|| Error::format(header_at, "missing epsilon".to_string()))?;
        let seed_field = {
            let text = table
                .get("seed")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::format(header_at, "missing seed".to_string()))?;
            u64::from_str_radix(text.strip_prefix("0x").unwrap_or(text), 16)
                .map_err(|e| Error::format(header_at, format!("bad seed: {e}")))?
        };
        let has_targets = table
            .get("has_targets")
            .and_then(|v| v.as_bool())
            .unwrap_or(false);
        let payload = Tensor::matrix(n, width, r.f64_slice_le(n * width, "payload")?)?;
        let achieved_loss = r.f64_slice_le(n, "achieved")?;
        let initial_loss = r.f64_slice_le(n, "initial")?;
        let targets = if has_targets {
            let mut t = Vec::with_capacity(n);
            for _ in 0..n {
                t.push(r.u32_le("target")?);
            }
            Some(t)
        } else {
            None
        };
        if !r.is_at_end() {
            return Err(Error::format(r.offset(), "trailing bytes".to_string()));
        }
        Ok(PayloadSet {
            kind,
            modality,
            epsilon,
            seed: seed_field,
            payload,
            targets,
            achieved_loss,
            initial_loss,
        })
    }

    // ── evaluate ────────────────────────────────────────────────────────

    /// Score every model from persisted checkpoints and payloads, then
    /// write `report.json` and `tables.csv`.
    pub fn cmd_evaluate(&self) -> Result<EvalReport> {
        let per_seed: Result<Vec<SeedReport>> = par::map_indexed(self.cfg.seeds.len(), |i| {
            self.evaluate_seed(self.cfg.seeds[i])
                .map_err(|e| e.in_stage("evaluate"))
        })
        .into_iter()
        .collect();
        let report = build_report(self.cfg.hash()?, per_seed?)?;
        self.check_report_invariants(&report)?;
        std::fs::write(self.dir.join("report.json"), report_json(&report)?)?;
        std::fs::write(self.dir.join("tables.csv"), report_csv(&report))?;
        Ok(report)
    }

    fn evaluate_seed(&self, seed: u64) -> Result<SeedReport> {
        let test = self.load_split(seed, "test")?;
        let k = self.cfg.task.modalities;
        let mut models = std::collections::BTreeMap::new();

        for name in REPORT_MODELS.iter().filter(|m| self.cfg.wants(m)) {
            let model = self.load_model(seed, name)?;
            let mut metrics = ModelMetrics {
                clean_acc: Some(clean_outcome(&model, &test)?.accuracy),
                ..ModelMetrics::default()
            };

            let mut adaptive_sets = Vec::with_capacity(k);
            let mut adaptive = Vec::with_capacity(k);
            for i in 0..k {
                let ps = self.read_payloads(seed, &format!("{name}.adaptive.m{i}"))?;
                adaptive.push(score_payloads(&model, &test, &ps)?.accuracy);
                adaptive_sets.push(ps);
            }
            metrics.robust_acc.insert("adaptive".to_string(), adaptive);

            let mut transfer = Vec::with_capacity(k);
            for i in 0..k {
                let ps = self.read_payloads(seed, &format!("transfer.m{i}"))?;
                transfer.push(score_payloads(&model, &test, &ps)?.accuracy);
            }
            metrics.robust_acc.insert("transfer".to_string(), transfer);

            if model.cfg.head != HeadKind::Early {
                let mut feature = Vec::with_capacity(k);
                for i in 0..k {
                    let ps = self.read_payloads(seed, &format!("{name}.feature.m{i}"))?;
                    feature.push(score_payloads(&model, &test, &ps)?.accuracy);
                }
                metrics.robust_acc.insert("feature".to_string(), feature);
            }

            let mut targeted_acc = Vec::with_capacity(k);
            let mut targeted_success = Vec::with_capacity(k);
            for i in 0..k {
                let ps = self.read_payloads(seed, &format!("{name}.targeted.m{i}"))?;
                let outcome = score_payloads(&model, &test, &ps)?;
                targeted_acc.push(outcome.accuracy);
                targeted_success.push(outcome.targeted_success.unwrap_or(0.0));
            }
            metrics.robust_acc.insert("targeted".to_string(), targeted_acc);
            metrics.targeted_success = Some(targeted_success);

            if model.cfg.head == HeadKind::Robust {
                let det = detection_report(&model, &test, &adaptive_sets)?;
                metrics.detection = Some(det.into());
            }

            models.insert(name.to_string(), metrics);
        }

        if self.cfg.wants("oracle") {
            let mut bounds = Vec::with_capacity(k);
            for i in 0..k {
                let oracle = self.load_model(seed, &format!("oracle-{i}"))?;
                let ps = self.read_payloads(seed, &format!("oracle-{i}.adaptive.m{i}"))?;
                bounds.push(score_payloads(&oracle, &test, &ps)?.accuracy);
            }
            models.insert(
                "oracle".to_string(),
                ModelMetrics {
                    clean_acc: None,
                    robust_acc: std::collections::BTreeMap::from([(
                        "adaptive".to_string(),
                        bounds,
                    )]),
                    targeted_success: None,
                    detection: None,
                },
            );
        }

        Ok(SeedReport { seed, models })
    }

    /// Structural invariants checked before a report is written; a failure
    /// exits the pipeline with an error.
    fn check_report_invariants(&self, report: &EvalReport) -> Result<()> {
        for seed_report in &report.per_seed {
            for (name, m) in &seed_report.models {
                if let Some(c) = m.clean_acc {
                    if !(0.0..=1.0).contains(&c) {
                        return Err(Error::Contract(format!("{name} clean accuracy {c}")));
                    }
                }
                for accs in m.robust_acc.values() {
                    if accs.iter().any(|a| !(0.0..=1.0).contains(a)) {
                        return Err(Error::Contract(format!("{name} robust accuracy out of range")));
                    }
                }
                if let Some(d) = &m.detection {
                    for row in &d.confusion {
                        let sum: usize = row.iter().sum();
                        if sum == 0 {
                            return Err(Error::Contract(format!(
                                "{name} detection confusion has an empty row"
                            )));
                        }
                    }
                }
            }
        }
        // Serialization must be reproducible within the run.
        if report_json(report)? != report_json(report)? {
            return Err(Error::Contract("report serialization unstable".into()));
        }
        Ok(())
    }

    // ── reproduce ───────────────────────────────────────────────────────

    /// The whole pipeline: generate, train, attack, evaluate. Exits with an
    /// error (nonzero at the CLI) if any embedded invariant fails.
    pub fn cmd_reproduce(&self) -> Result<EvalReport> {
        let started = std::time::Instant::now();
        self.cmd_generate()?;
        self.cmd_train()?;
        self.cmd_attack()?;
        self.zero_budget_probe()?;
        let report = self.cmd_evaluate()?;
        let meta = format!(
            "{{\n  \"wall_clock_sec\": {:.1},\n  \"report_hash\": \"{}\"\n}}\n",
            started.elapsed().as_secs_f64(),
            report_hash(&report)?
        );
        std::fs::write(self.dir.join("run_meta.json"), meta)?;
        Ok(report)
    }

    /// Spot-check on a probe slice: a zero-budget attack scores exactly the
    /// clean accuracy.
    fn zero_budget_probe(&self) -> Result<()> {
        let seed = self.cfg.seeds[0];
        let test = self.load_split(seed, "test")?;
        let model = self.load_model(seed, "concat")?;
        let probe: Vec<usize> = (0..test.len().min(32)).collect();
        let sliced = Dataset {
            spec: test.spec.clone(),
            split: test.split,
            features: test
                .features
                .iter()
                .map(|f| f.gather_rows(&probe))
                .collect::<Result<Vec<_>>>()?,
            labels: test.labels[..probe.len()].to_vec(),
        };
        let mut zero = self.cfg.attack.clone();
        zero.epsilon = 0.0;
        let clean = clean_outcome(&model, &sliced)?;
        let ps = generate_payloads(
            &model,
            None,
            &sliced,
            &zero,
            AttackKind::Adaptive,
            0,
            0,
            sliced.len(),
        )?;
        let attacked = score_payloads(&model, &sliced, &ps)?;
        if attacked.correct != clean.correct {
            return Err(Error::Contract(
                "zero-budget attack changed predictions".to_string(),
            ));
        }
        Ok(())
    }

    /// Human-readable summary of an existing report.
    pub fn report_summary(&self) -> Result<String> {
        let bytes = std::fs::read(self.dir.join("report.json"))?;
        let report: EvalReport = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("report parse: {e}")))?;
        let mut out = String::new();
        out.push_str(&format!(
            "seeds: {:?}\nconfig hash: {}\n\n",
            report.seeds, report.config_hash
        ));
        out.push_str("model            clean   adaptive-per-modality\n");
        for (name, m) in &report.mean {
            let clean = m
                .clean_acc
                .map(|c| format!("{c:.3}"))
                .unwrap_or_else(|| "  -  ".to_string());
            let adaptive = m
                .robust_acc
                .get("adaptive")
                .map(|v| {
                    v.iter()
                        .map(|a| format!("{a:.3}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .unwrap_or_default();
            out.push_str(&format!("{name:<16} {clean}   {adaptive}\n"));
            if let Some(d) = &m.detection {
                out.push_str(&format!(
                    "{:<16} detection per condition: {} (pooled {:.3})\n",
                    "",
                    d.per_condition
                        .iter()
                        .map(|r| format!("{r:.3}"))
                        .collect::<Vec<_>>()
                        .join(" "),
                    d.pooled
                ));
            }
        }
        let deltas = |label: &str, d: &Option<std::collections::BTreeMap<String, f64>>| {
            let mut s = String::new();
            if let Some(d) = d {
                s.push_str(&format!("\n{label}:\n"));
                for (cell, v) in d {
                    s.push_str(&format!("  {cell:<14} {v:+.3}\n"));
                }
            }
            s
        };
        out.push_str(&deltas("delta-clean (robust vs best standard)", &report.delta_clean));
        out.push_str(&deltas("delta-robust (robust vs best robust baseline)", &report.delta_robust));
        Ok(out)
    }
}

/// Small stable string hash for seed derivation by model name.
fn fnv(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
