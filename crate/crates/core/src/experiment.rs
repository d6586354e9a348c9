//! Experiment front-end: configuration, data loading, and the runners behind
//! each CLI subcommand. Every runner writes its resolved configuration next
//! to its artifacts; metric files contain no timing data, so re-running from
//! the frozen config reproduces them byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{default_family, deformation_suite, TransformGroup, TransformSpec};
use crate::codes::{quantize, read_codes, write_codes, BinaryCode};
use crate::dataset::{
    generate_synthetic, load_split, read_labels, save_split, write_labels, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{AdamConfig, EncoderConfig, HashModel};
use crate::par;
use crate::retrieval::{build_index, evaluate, EvalReport};
use crate::trainer::{encode_all, EpochStats, Sample, TrainConfig, Trainer};

/// Where the three splits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files {
        train_features: PathBuf,
        train_labels: PathBuf,
        query_features: PathBuf,
        query_labels: PathBuf,
        database_features: PathBuf,
        database_labels: PathBuf,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![128]
}
fn default_code_length() -> usize {
    16
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    100
}
fn default_teacher_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_code_length")]
    pub code_length: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default = "default_teacher_scale")]
    pub teacher_scale: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_family")]
    pub transforms: Vec<TransformSpec>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            hidden_dims: default_hidden(),
            code_length: default_code_length(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            loss: LossWeights::default(),
            teacher_scale: default_teacher_scale(),
            adam: AdamConfig::default(),
            transforms: default_family(),
        }
    }
}

fn default_m() -> usize {
    100
}
fn default_ranks() -> Vec<usize> {
    vec![1, 10, 50, 100, 500]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_ranks")]
    pub top_ranks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            m: default_m(),
            top_ranks: default_ranks(),
        }
    }
}

/// Loss-term configurations compared by the ablation runners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Proxy loss only, trained on teacher views.
    Hp,
    /// Proxy + quantization, teacher views.
    HpBceq,
    /// Proxy + self-distillation.
    HpSdh,
    /// The full objective.
    HpSdhBceq,
    /// Proxy + quantization on a single strongly transformed view.
    HpStrong,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Hp,
        Variant::HpBceq,
        Variant::HpSdh,
        Variant::HpSdhBceq,
        Variant::HpStrong,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hp => "hp",
            Variant::HpBceq => "hp-bceq",
            Variant::HpSdh => "hp-sdh",
            Variant::HpSdhBceq => "hp-sdh-bceq",
            Variant::HpStrong => "hp-strong",
        }
    }

    /// `base` with the loss terms of this variant switched on or off.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let (sdh, bceq) = match self {
            Variant::Hp => (false, false),
            Variant::HpBceq | Variant::HpStrong => (false, true),
            Variant::HpSdh => (true, false),
            Variant::HpSdhBceq => (true, true),
        };
        if !sdh {
            c.loss.lambda1 = 0.0;
        }
        if !bceq {
            c.loss.lambda2 = 0.0;
        }
        if self == Variant::HpStrong {
            c.teacher_scale = 1.0;
        }
        c
    }
}

fn default_code_lengths() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn default_compare() -> Vec<Variant> {
    vec![Variant::HpSdhBceq, Variant::HpStrong, Variant::HpBceq]
}
fn default_scales() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default = "default_code_lengths")]
    pub code_lengths: Vec<usize>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    /// Variants compared in the s_T sweep and the deformation table.
    #[serde(default = "default_compare")]
    pub compare: Vec<Variant>,
    /// Training seeds averaged per cell; empty means the run seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_scales")]
    pub st_scales: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            code_lengths: default_code_lengths(),
            variants: default_variants(),
            compare: default_compare(),
            seeds: Vec::new(),
            st_scales: default_scales(),
        }
    }
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig {
            field: e
                .span()
                .map(|s| format!("config bytes {}..{}", s.start, s.end))
                .unwrap_or_else(|| "config".into()),
            reason: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Checks every field that can be checked before running.
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Synthetic(spec) => spec.validate()?,
            DataSource::Files {
                train_features,
                train_labels,
                query_features,
                query_labels,
                database_features,
                database_labels,
            } => {
                for (field, p) in [
                    ("data.train_features", train_features),
                    ("data.train_labels", train_labels),
                    ("data.query_features", query_features),
                    ("data.query_labels", query_labels),
                    ("data.database_features", database_features),
                    ("data.database_labels", database_labels),
                ] {
                    if !p.exists() {
                        return Err(Error::config(
                            field,
                            format!("{} does not exist", p.display()),
                        ));
                    }
                }
            }
        }
        if self.eval.m == 0 {
            return Err(Error::config("eval.m", "must be >= 1"));
        }
        if let Some(r) = self.eval.top_ranks.iter().find(|r| **r == 0) {
            return Err(Error::config(
                "eval.top_ranks",
                format!("rank {r} must be >= 1"),
            ));
        }
        if self
            .ablation
            .st_scales
            .iter()
            .any(|s| !(0.0..=1.0).contains(s))
        {
            return Err(Error::config(
                "ablation.st_scales",
                "scales must be in [0, 1]",
            ));
        }
        // Shape-independent training checks.
        let probe = TrainConfig {
            encoder: EncoderConfig {
                input_dim: 1,
                hidden_dims: self.train.hidden_dims.clone(),
                code_length: self.train.code_length,
            },
            n_classes: 1,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            loss: self.train.loss,
            teacher_scale: self.train.teacher_scale,
            adam: self.train.adam,
            seed: self.seed,
            transforms: self.train.transforms.clone(),
        };
        probe.validate().map_err(|e| match e {
            Error::InvalidConfig { field, reason } => Error::InvalidConfig {
                field: format!("train.{field}"),
                reason,
            },
            other => other,
        })
    }

    /// Training configuration for data of the given shape.
    pub fn train_config(&self, input_dim: usize, n_classes: usize) -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig {
                input_dim,
                hidden_dims: self.train.hidden_dims.clone(),
                code_length: self.train.code_length,
            },
            n_classes,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            loss: self.train.loss,
            teacher_scale: self.train.teacher_scale,
            adam: self.train.adam,
            seed: self.seed,
            transforms: self.train.transforms.clone(),
        }
    }

    fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }
    fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.dhdk")
    }
    fn codes_dir(&self) -> PathBuf {
        self.output_dir.join("codes")
    }
    fn eval_dir(&self) -> PathBuf {
        self.output_dir.join("eval")
    }
    fn ablation_dir(&self) -> PathBuf {
        self.output_dir.join("ablation")
    }
}

/// Train, query and database splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub n_classes: usize,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub database: Vec<Sample>,
}

impl Splits {
    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(0, |s| s.features.len())
    }
}

/// RNG for dataset generation; independent of the training stream.
pub fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Generates (synthetic) or reads (files) the three splits.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let d = generate_synthetic(spec, &mut data_rng(cfg.seed))?;
            Ok(Splits {
                n_classes: spec.n_clusters,
                train: d.train,
                query: d.query,
                database: d.database,
            })
        }
        DataSource::Files {
            train_features,
            train_labels,
            query_features,
            query_labels,
            database_features,
            database_labels,
        } => {
            let (n, train) = load_split(train_features, train_labels)?;
            let (nq, query) = load_split(query_features, query_labels)?;
            let (nd, database) = load_split(database_features, database_labels)?;
            if nq != n {
                return Err(Error::shape("query n_classes", n, nq));
            }
            if nd != n {
                return Err(Error::shape("database n_classes", n, nd));
            }
            Ok(Splits {
                n_classes: n,
                train,
                query,
                database,
            })
        }
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Writes `resolved_config.toml` into the output directory.
pub fn freeze_config(cfg: &ExperimentConfig) -> Result<PathBuf> {
    ensure_dir(&cfg.output_dir)?;
    let p = cfg.output_dir.join("resolved_config.toml");
    write_text(&p, &cfg.to_toml()?)?;
    Ok(p)
}

/// `gen-data`: writes the splits as feature/label tables under `data/`.
pub fn run_gen_data(cfg: &ExperimentConfig) -> Result<Splits> {
    cfg.validate()?;
    freeze_config(cfg)?;
    let splits = load_data(cfg)?;
    let dir = cfg.data_dir();
    ensure_dir(&dir)?;
    save_split(&dir, "train", splits.n_classes, &splits.train)?;
    save_split(&dir, "query", splits.n_classes, &splits.query)?;
    save_split(&dir, "database", splits.n_classes, &splits.database)?;
    Ok(splits)
}

fn epoch_row(s: &EpochStats) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        s.epoch, s.hp, s.sdh, s.bceq, s.proxy_bceq, s.total, s.lr
    )
}

const METRICS_HEADER: &str = "epoch,hp,sdh,bceq,proxy_bceq,total,lr\n";

/// `train`: trains to the configured epoch count, checkpointing after every
/// epoch. With `resume`, continues from an existing checkpoint.
pub fn run_train(cfg: &ExperimentConfig, resume: bool) -> Result<Trainer> {
    cfg.validate()?;
    freeze_config(cfg)?;
    let splits = load_data(cfg)?;
    let tc = cfg.train_config(splits.input_dim(), splits.n_classes);
    let ckpt = cfg.checkpoint_path();
    let metrics_path = cfg.output_dir.join("train_metrics.csv");
    let timing_path = cfg.output_dir.join("train_timing.csv");

    let mut trainer = Trainer::new(tc, splits.train.len())?;
    let (mut metrics, mut timing) = (
        METRICS_HEADER.to_string(),
        "epoch,wall_time_secs\n".to_string(),
    );
    if resume && ckpt.exists() {
        trainer.load_checkpoint(&ckpt)?;
        if let Ok(m) = std::fs::read_to_string(&metrics_path) {
            metrics = m
                .lines()
                .take(trainer.epochs_done + 1)
                .map(|l| format!("{l}\n"))
                .collect();
        }
        if let Ok(t) = std::fs::read_to_string(&timing_path) {
            timing = t
                .lines()
                .take(trainer.epochs_done + 1)
                .map(|l| format!("{l}\n"))
                .collect();
        }
    }
    trainer.fit(&splits.train, |t, s| {
        metrics.push_str(&epoch_row(s));
        let _ = writeln!(timing, "{},{}", s.epoch, s.wall_time_secs);
        log::info!(
            "epoch {} hp {:.5} sdh {:.5} bceq {:.5} total {:.5} lr {:.3e} ({:.2}s)",
            s.epoch,
            s.hp,
            s.sdh,
            s.bceq,
            s.total,
            s.lr,
            s.wall_time_secs
        );
        t.save_checkpoint(&ckpt)?;
        write_text(&metrics_path, &metrics)?;
        write_text(&timing_path, &timing)
    })?;
    if trainer.epochs_done == 0 || !ckpt.exists() {
        trainer.save_checkpoint(&ckpt)?;
        write_text(&metrics_path, &metrics)?;
    }
    Ok(trainer)
}

/// Sign codes of untransformed inputs.
pub fn encode_codes(model: &HashModel, samples: &[Sample]) -> Result<Vec<BinaryCode>> {
    let feats: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    encode_all(model, &feats)?
        .iter()
        .map(|h| quantize(h))
        .collect()
}

fn labels_of(samples: &[Sample]) -> Vec<Vec<u8>> {
    samples.iter().map(|s| s.label.clone()).collect()
}

/// `encode`: writes database and query codes plus label sidecars under `codes/`.
pub fn run_encode(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    freeze_config(cfg)?;
    let trainer = Trainer::restore(&cfg.checkpoint_path())?;
    let splits = load_data(cfg)?;
    let dir = cfg.codes_dir();
    ensure_dir(&dir)?;
    let k = trainer.model.code_length();
    for (stem, samples) in [("database", &splits.database), ("query", &splits.query)] {
        let codes = encode_codes(&trainer.model, samples)?;
        write_codes(&dir.join(format!("{stem}.dhdc")), k, &codes)?;
        write_labels(
            &dir.join(format!("{stem}.labels")),
            splits.n_classes,
            &labels_of(samples),
        )?;
    }
    Ok(())
}

/// `eval`: ranks query codes against database codes and writes the report.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    freeze_config(cfg)?;
    let dir = cfg.codes_dir();
    let (_, db_codes) = read_codes(&dir.join("database.dhdc"))?;
    let (_, db_labels) = read_labels(&dir.join("database.labels"))?;
    let (_, q_codes) = read_codes(&dir.join("query.dhdc"))?;
    let (_, q_labels) = read_labels(&dir.join("query.labels"))?;
    let index = build_index(db_codes, db_labels)?;
    let report = evaluate(&index, &q_codes, &q_labels, cfg.eval.m, &cfg.eval.top_ranks)?;
    ensure_dir(&cfg.eval_dir())?;
    report.write(&cfg.eval_dir())?;
    Ok(report)
}

/// Trains `config` on `train` for all configured epochs.
pub fn train_model(config: TrainConfig, train: &[Sample]) -> Result<Trainer> {
    let mut t = Trainer::new(config, train.len())?;
    t.fit(train, |_, _| Ok(()))?;
    Ok(t)
}

/// mAP@`m` of clean query codes against clean database codes.
pub fn retrieval_map(
    model: &HashModel,
    database: &[Sample],
    query: &[Sample],
    m: usize,
) -> Result<f64> {
    let index = build_index(encode_codes(model, database)?, labels_of(database))?;
    let q = encode_codes(model, query)?;
    Ok(evaluate(&index, &q, &labels_of(query), m, &[])?.map_at_m)
}

/// Per-sample RNG: stream `i` of `seed`, so draws do not depend on scheduling.
fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Applies one draw of `group` to every sample's features.
pub fn transform_samples(
    samples: &[Sample],
    group: &TransformGroup,
    seed: u64,
) -> Result<Vec<Sample>> {
    par::try_map(&(0..samples.len()).collect::<Vec<_>>(), |&i| {
        let s = &samples[i];
        let t = group.sample(s.features.len(), &mut sample_rng(seed, i));
        Ok(Sample {
            features: t.apply(&s.features)?,
            label: s.label.clone(),
        })
    })
}

/// Mean Hamming distance between codes of clean and transformed inputs.
pub fn hamming_shift(
    model: &HashModel,
    samples: &[Sample],
    group: &TransformGroup,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let clean = encode_codes(model, samples)?;
    let moved = encode_codes(model, &transform_samples(samples, group, seed)?)?;
    let total: u64 = clean
        .iter()
        .zip(&moved)
        .map(|(a, b)| u64::from(a.hamming_unchecked(b)))
        .sum();
    Ok(total as f64 / samples.len() as f64)
}

/// mAP@`m` when only the queries are deformed by `group`.
pub fn deformed_map(
    model: &HashModel,
    database: &[Sample],
    query: &[Sample],
    group: &TransformGroup,
    m: usize,
    seed: u64,
) -> Result<f64> {
    retrieval_map(model, database, &transform_samples(query, group, seed)?, m)
}

/// Distribution statistics of continuous codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitStats {
    /// Mean over bits of the binary entropy (in bits) of that bit's sign frequency.
    pub mean_bit_entropy: f64,
    /// Fraction of code elements with `|h| > 0.9`.
    pub saturated_fraction: f64,
}

pub fn bit_statistics(codes: &[Vec<f64>]) -> Result<BitStats> {
    let k = codes.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(Error::InvalidInput("no codes".into()));
    }
    let n = codes.len() as f64;
    let mut entropy = 0.0;
    for bit in 0..k {
        let p = codes.iter().filter(|c| c[bit] >= 0.0).count() as f64 / n;
        entropy += [p, 1.0 - p]
            .iter()
            .filter(|q| **q > 0.0)
            .map(|q| -q * q.log2())
            .sum::<f64>();
    }
    let saturated = codes.iter().flatten().filter(|v| v.abs() > 0.9).count() as f64;
    Ok(BitStats {
        mean_bit_entropy: entropy / k as f64,
        saturated_fraction: saturated / (n * k as f64),
    })
}

fn seeds_of(cfg: &ExperimentConfig) -> Vec<u64> {
    if cfg.ablation.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.ablation.seeds.clone()
    }
}

fn train_variant(
    cfg: &ExperimentConfig,
    splits: &Splits,
    v: Variant,
    k: usize,
    seed: u64,
) -> Result<Trainer> {
    let mut tc = cfg.train_config(splits.input_dim(), splits.n_classes);
    tc.encoder.code_length = k;
    tc.seed = seed;
    train_model(v.apply(&tc), &splits.train)
}

fn fmt_row(head: &str, values: &[f64]) -> String {
    let mut row = head.to_string();
    for v in values {
        let _ = write!(row, ",{v}");
    }
    row.push('\n');
    row
}

/// Loss-term ablation: mAP@M per variant (rows) and code length (columns),
/// averaged over seeds. Written to `ablation/loss_grid.csv`.
pub fn run_loss_grid(cfg: &ExperimentConfig, splits: &Splits) -> Result<String> {
    let seeds = seeds_of(cfg);
    let mut out = String::from("variant");
    for k in &cfg.ablation.code_lengths {
        let _ = write!(out, ",{k}");
    }
    out.push('\n');
    for &v in &cfg.ablation.variants {
        let mut row = Vec::new();
        for &k in &cfg.ablation.code_lengths {
            let mut sum = 0.0;
            for &s in &seeds {
                let t = train_variant(cfg, splits, v, k, s)?;
                sum += retrieval_map(&t.model, &splits.database, &splits.query, cfg.eval.m)?;
            }
            row.push(sum / seeds.len() as f64);
        }
        out.push_str(&fmt_row(v.name(), &row));
    }
    Ok(out)
}

fn compared_models(
    cfg: &ExperimentConfig,
    splits: &Splits,
) -> Result<Vec<(Variant, Vec<Trainer>)>> {
    let seeds = seeds_of(cfg);
    cfg.ablation
        .compare
        .iter()
        .map(|&v| {
            let ts = seeds
                .iter()
                .map(|&s| train_variant(cfg, splits, v, cfg.train.code_length, s))
                .collect::<Result<Vec<_>>>()?;
            Ok((v, ts))
        })
        .collect()
}

fn header(first: &str, models: &[(Variant, Vec<Trainer>)]) -> String {
    let mut h = first.to_string();
    for (v, _) in models {
        let _ = write!(h, ",{}", v.name());
    }
    h.push('\n');
    h
}

fn sweep_table(
    cfg: &ExperimentConfig,
    splits: &Splits,
    models: &[(Variant, Vec<Trainer>)],
) -> Result<String> {
    let family = TransformGroup::new(cfg.train.transforms.clone(), 1.0)?;
    let mut out = header("s_t", models);
    for &s in &cfg.ablation.st_scales {
        let group = family.with_scale(s);
        let row = models
            .iter()
            .map(|(_, ts)| {
                let mut sum = 0.0;
                for t in ts {
                    sum += hamming_shift(&t.model, &splits.query, &group, cfg.seed)?;
                }
                Ok(sum / ts.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push_str(&fmt_row(&s.to_string(), &row));
    }
    Ok(out)
}

fn deform_table(
    cfg: &ExperimentConfig,
    splits: &Splits,
    models: &[(Variant, Vec<Trainer>)],
) -> Result<String> {
    let mut out = header("deformation", models);
    let mut groups = vec![("none".to_string(), TransformGroup::identity())];
    groups.extend(deformation_suite());
    for (name, group) in groups {
        let row = models
            .iter()
            .map(|(_, ts)| {
                let mut sum = 0.0;
                for t in ts {
                    sum += deformed_map(
                        &t.model,
                        &splits.database,
                        &splits.query,
                        &group,
                        cfg.eval.m,
                        cfg.seed,
                    )?;
                }
                Ok(sum / ts.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push_str(&fmt_row(&name, &row));
    }
    Ok(out)
}

/// `sweep-st`: mean Hamming shift of query codes under the transform family
/// scaled by each s_T, for each compared variant.
pub fn run_sweep_st(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    freeze_config(cfg)?;
    let splits = load_data(cfg)?;
    let models = compared_models(cfg, &splits)?;
    let table = sweep_table(cfg, &splits, &models)?;
    ensure_dir(&cfg.ablation_dir())?;
    write_text(&cfg.ablation_dir().join("st_sweep.csv"), &table)?;
    Ok(table)
}

/// `deform-eval`: mAP@M under each held-out deformation of the queries.
pub fn run_deform_eval(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    freeze_config(cfg)?;
    let splits = load_data(cfg)?;
    let models = compared_models(cfg, &splits)?;
    let table = deform_table(cfg, &splits, &models)?;
    ensure_dir(&cfg.ablation_dir())?;
    write_text(&cfg.ablation_dir().join("deformations.csv"), &table)?;
    Ok(table)
}

/// `ablate`: the loss grid, the s_T sweep and the deformation table.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    freeze_config(cfg)?;
    let splits = load_data(cfg)?;
    let dir = cfg.ablation_dir();
    ensure_dir(&dir)?;
    write_text(&dir.join("loss_grid.csv"), &run_loss_grid(cfg, &splits)?)?;
    let models = compared_models(cfg, &splits)?;
    write_text(
        &dir.join("st_sweep.csv"),
        &sweep_table(cfg, &splits, &models)?,
    )?;
    write_text(
        &dir.join("deformations.csv"),
        &deform_table(cfg, &splits, &models)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            output_dir: PathBuf::from("unused"),
            data: DataSource::Synthetic(SyntheticSpec {
                n_clusters: 3,
                dim: 6,
                spread: 0.1,
                n_train: 30,
                n_query: 10,
                n_database: 30,
                co_occurrence: None,
            }),
            train: TrainSection {
                hidden_dims: vec![8],
                code_length: 8,
                epochs: 2,
                batch_size: 8,
                ..TrainSection::default()
            },
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = tiny();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            seed = 1
            output_dir = "out"
            [data]
            kind = "synthetic"
            n_clusters = 4
            dim = 8
            spread = 0.2
            n_train = 10
            n_query = 5
            n_database = 10
            "#,
        )
        .unwrap();
        assert_eq!(cfg.train.loss, LossWeights::default());
        assert_eq!(cfg.train.teacher_scale, 0.5);
        assert_eq!(cfg.eval.m, 100);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_names_offending_field() {
        let mut cfg = tiny();
        cfg.train.teacher_scale = 0.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("train.teacher_scale"), "{err}");

        let mut cfg = tiny();
        cfg.data = DataSource::Files {
            train_features: "/nonexistent/a".into(),
            train_labels: "/nonexistent/b".into(),
            query_features: "/nonexistent/c".into(),
            query_labels: "/nonexistent/d".into(),
            database_features: "/nonexistent/e".into(),
            database_labels: "/nonexistent/f".into(),
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("data.train_features"), "{err}");

        let err = ExperimentConfig::from_toml_str(
            "seed = 1\noutput_dir = 'x'\nbogus = 2\n[data]\nkind='synthetic'",
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { .. }));
    }

    #[test]
    fn variant_switches() {
        let cfg = tiny();
        let base = cfg.train_config(6, 3);
        let strong = Variant::HpStrong.apply(&base);
        assert_eq!(strong.loss.lambda1, 0.0);
        assert_eq!(strong.teacher_scale, 1.0);
        assert_eq!(Variant::Hp.apply(&base).loss.lambda2, 0.0);
        assert_eq!(Variant::HpSdhBceq.apply(&base), base);
    }

    #[test]
    fn zero_scale_sweep_has_no_shift() {
        let cfg = tiny();
        let splits = load_data(&cfg).unwrap();
        let t = train_model(cfg.train_config(6, 3), &splits.train).unwrap();
        let g = TransformGroup::new(default_family(), 0.0).unwrap();
        assert_eq!(hamming_shift(&t.model, &splits.query, &g, 1).unwrap(), 0.0);
    }

    #[test]
    fn bit_statistics_examples() {
        let codes = vec![vec![0.95, -0.2], vec![-0.95, -0.5]];
        let s = bit_statistics(&codes).unwrap();
        assert!((s.mean_bit_entropy - 0.5).abs() < 1e-15);
        assert_eq!(s.saturated_fraction, 0.5);
    }
}
