//! The training loop: two augmented views per sample through shared weights,
//! self-distillation with a detached teacher code, proxy and quantization
//! losses on the teacher code, and one joint Adam step per mini-batch.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{default_family, TransformGroup, TransformSpec};
use crate::error::{Error, Result};
use crate::losses::{
    bceq_loss, hp_loss, normalize_multilabel, proxy_bceq_loss, proxy_predictions,
    proxy_predictions_backward, sdh_loss, LossBundle, LossWeights, ProxyBank,
};
use crate::model::{AdamConfig, EncoderConfig, HashModel, ModelGrads, OptimizerState};
use crate::par;

/// A feature vector with its multi-hot label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Vec<u8>,
}

fn default_transforms() -> Vec<TransformSpec> {
    default_family()
}

fn default_teacher_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub n_classes: usize,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub loss: LossWeights,
    /// Occurrence scale of the teacher group; the student group uses 1.
    #[serde(default = "default_teacher_scale")]
    pub teacher_scale: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    /// Transform family shared by both groups.
    #[serde(default = "default_transforms")]
    pub transforms: Vec<TransformSpec>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        if self.n_classes == 0 {
            return Err(Error::config("n_classes", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.teacher_scale > 0.0 && self.teacher_scale <= 1.0) {
            return Err(Error::config(
                "teacher_scale",
                format!("must be in (0, 1], got {}", self.teacher_scale),
            ));
        }
        if !(self.adam.base_lr > 0.0 && self.adam.base_lr.is_finite()) {
            return Err(Error::config("adam.base_lr", "must be > 0"));
        }
        self.student_group().validate()
    }

    pub fn teacher_group(&self) -> TransformGroup {
        TransformGroup {
            transforms: self.transforms.clone(),
            scale: self.teacher_scale,
        }
    }

    pub fn student_group(&self) -> TransformGroup {
        TransformGroup {
            transforms: self.transforms.clone(),
            scale: 1.0,
        }
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }
}

/// Transformed inputs for one sample. `student` is `None` when the
/// self-distillation term is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainView {
    pub teacher: Vec<f64>,
    pub student: Option<Vec<f64>>,
    /// Label already divided by its L1 norm.
    pub label: Vec<f64>,
}

/// Gradients of the batch objective for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub model: ModelGrads,
    pub proxies: Vec<f64>,
}

struct SampleOutcome {
    hp: f64,
    sdh: f64,
    bceq: f64,
    model: ModelGrads,
    proxies: Vec<f64>,
}

/// Returns `h_t` with no gradient path back to the teacher branch. Values are
/// identical; the copy is only ever used as a constant in the SdH term.
pub fn stop_gradient(h_t: &[f64]) -> Vec<f64> {
    h_t.to_vec()
}

/// Parameter gradient of `scale · (1 - cos(teacher_code, h(student_input)))`
/// through the student branch only.
pub fn sdh_student_gradient(
    model: &HashModel,
    teacher_code: &[f64],
    student_input: &[f64],
    scale: f64,
) -> Result<(f64, ModelGrads)> {
    let (h_s, tape) = model.forward(student_input)?;
    let (loss, grad) = sdh_loss(teacher_code, &h_s)?;
    let g: Vec<f64> = grad.student.iter().map(|v| v * scale).collect();
    Ok((loss, model.backward(&tape, &g)?))
}

fn sample_outcome(
    model: &HashModel,
    proxies: &ProxyBank,
    view: &TrainView,
    w: &LossWeights,
    inv_n: f64,
) -> Result<SampleOutcome> {
    let (h_t, tape_t) = model.forward(&view.teacher)?;
    let preds = proxy_predictions(proxies, &h_t)?;
    let (hp, g_pred) = hp_loss(&view.label, &preds, w.tau)?;
    let (g_h_hp, g_proxy) = proxy_predictions_backward(proxies, &h_t, &g_pred)?;
    let (bceq, g_bceq) = bceq_loss(&h_t, w.sigma)?;
    let g_teacher: Vec<f64> = g_h_hp
        .iter()
        .zip(&g_bceq)
        .map(|(a, b)| (a + w.lambda2 * b) * inv_n)
        .collect();
    let mut grads = model.backward(&tape_t, &g_teacher)?;

    let mut sdh = 0.0;
    if let Some(student) = &view.student {
        let detached = stop_gradient(&h_t);
        let (loss, g) = sdh_student_gradient(model, &detached, student, w.lambda1 * inv_n)?;
        sdh = loss;
        grads.add_assign(&g);
    }
    Ok(SampleOutcome {
        hp,
        sdh,
        bceq,
        model: grads,
        proxies: g_proxy.into_iter().map(|v| v * inv_n).collect(),
    })
}

/// Batch objective and its gradients for fixed views. Per-sample work runs
/// in parallel; the reduction is sequential in sample order.
pub fn batch_objective(
    model: &HashModel,
    proxies: &ProxyBank,
    views: &[TrainView],
    w: &LossWeights,
) -> Result<(LossBundle, BatchGradients)> {
    if views.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if proxies.code_length() != model.code_length() {
        return Err(Error::shape(
            "proxy code_length",
            model.code_length(),
            proxies.code_length(),
        ));
    }
    let inv_n = 1.0 / views.len() as f64;
    let outcomes = par::try_map(views, |v| sample_outcome(model, proxies, v, w, inv_n))?;

    let mut model_grads = ModelGrads::zeros_like(model);
    let mut proxy_grads = vec![0.0; proxies.as_slice().len()];
    let (mut hp, mut sdh, mut bceq) = (0.0, 0.0, 0.0);
    for o in &outcomes {
        hp += o.hp;
        sdh += o.sdh;
        bceq += o.bceq;
        model_grads.add_assign(&o.model);
        for (a, b) in proxy_grads.iter_mut().zip(&o.proxies) {
            *a += b;
        }
    }
    let (proxy_bceq, g_pq) = proxy_bceq_loss(proxies, w.sigma)?;
    for (a, b) in proxy_grads.iter_mut().zip(&g_pq) {
        *a += w.lambda2 * b;
    }
    let bundle = LossBundle::assemble(hp * inv_n, sdh * inv_n, bceq * inv_n, proxy_bceq, w);
    Ok((
        bundle,
        BatchGradients {
            model: model_grads,
            proxies: proxy_grads,
        },
    ))
}

/// Mean loss terms over one epoch plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub hp: f64,
    pub sdh: f64,
    pub bceq: f64,
    pub proxy_bceq: f64,
    pub total: f64,
    pub lr: f64,
    pub steps: usize,
    /// Per-step bundles in order.
    #[serde(skip)]
    pub batches: Vec<LossBundle>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Draws the teacher (and, when `with_student`, student) views for a batch.
/// Teacher then student transforms are drawn per sample, in sample order.
pub fn draw_views(
    samples: &[&Sample],
    teacher: &TransformGroup,
    student: Option<&TransformGroup>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainView>> {
    samples
        .iter()
        .map(|s| {
            let dim = s.features.len();
            let t = teacher.sample(dim, rng).apply(&s.features)?;
            let st = match student {
                Some(g) => Some(g.sample(dim, rng).apply(&s.features)?),
                None => None,
            };
            Ok(TrainView {
                teacher: t,
                student: st,
                label: normalize_multilabel(&s.label)?,
            })
        })
        .collect()
}

/// Applies one Adam step to the model and proxies, then bounds proxies to [-1, 1].
pub fn apply_gradients(
    model: &mut HashModel,
    proxies: &mut ProxyBank,
    optimizer: &mut OptimizerState,
    grads: &BatchGradients,
) -> Result<f64> {
    let lr = {
        let mut params = model.tensors_mut();
        params.push(proxies.as_mut_slice());
        let mut g: Vec<&[f64]> = grads.model.tensors.iter().map(Vec::as_slice).collect();
        g.push(&grads.proxies);
        optimizer.step(&mut params, &g)?
    };
    proxies.clamp_to_unit();
    Ok(lr)
}

/// One shuffled pass over `data`.
pub fn train_epoch(
    model: &mut HashModel,
    proxies: &mut ProxyBank,
    optimizer: &mut OptimizerState,
    data: &[Sample],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let start = Instant::now();
    let teacher = config.teacher_group();
    let student_group = config.student_group();
    let student = (config.loss.lambda1 > 0.0).then_some(&student_group);

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);

    let mut batches = Vec::with_capacity(config.steps_per_epoch(data.len()));
    let (mut hp, mut sdh, mut bceq, mut pq, mut total) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut lr = optimizer.current_lr();
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let wrap = |e: Error| Error::Batch {
            batch: b,
            source: Box::new(e),
        };
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
        let views = draw_views(&samples, &teacher, student, rng).map_err(wrap)?;
        let (bundle, grads) =
            batch_objective(model, proxies, &views, &config.loss).map_err(wrap)?;
        lr = apply_gradients(model, proxies, optimizer, &grads).map_err(wrap)?;

        let w = chunk.len() as f64 / data.len() as f64;
        hp += w * bundle.hp;
        sdh += w * bundle.sdh;
        bceq += w * bundle.bceq;
        pq += w * bundle.proxy_bceq;
        total += w * bundle.total;
        batches.push(bundle);
    }
    let steps = batches.len();
    Ok(EpochStats {
        epoch: 0,
        hp,
        sdh,
        bceq,
        proxy_bceq: pq,
        total,
        lr,
        steps,
        batches,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Model, proxies, optimizer and RNG stream of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: HashModel,
    pub proxies: ProxyBank,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    pub epochs_done: usize,
}

impl Trainer {
    /// Initializes everything from `config.seed`; `n_train` fixes the length
    /// of the cosine schedule.
    pub fn new(config: TrainConfig, n_train: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = HashModel::new(config.encoder.clone(), &mut rng)?;
        let proxies = ProxyBank::random(config.n_classes, config.encoder.code_length, &mut rng);
        let mut sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        sizes.push(proxies.as_slice().len());
        let total_steps = (config.epochs * config.steps_per_epoch(n_train)) as u64;
        let optimizer = OptimizerState::new(config.adam, &sizes, total_steps);
        Ok(Self {
            config,
            model,
            proxies,
            optimizer,
            rng,
            epochs_done: 0,
        })
    }

    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<EpochStats> {
        self.check_data(data)?;
        let mut stats = train_epoch(
            &mut self.model,
            &mut self.proxies,
            &mut self.optimizer,
            data,
            &self.config,
            &mut self.rng,
        )?;
        stats.epoch = self.epochs_done;
        self.epochs_done += 1;
        Ok(stats)
    }

    /// Trains the remaining configured epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        data: &[Sample],
        mut on_epoch: impl FnMut(&Trainer, &EpochStats) -> Result<()>,
    ) -> Result<Vec<EpochStats>> {
        let mut all = Vec::new();
        while self.epochs_done < self.config.epochs {
            let stats = self.train_epoch(data)?;
            on_epoch(self, &stats)?;
            all.push(stats);
        }
        Ok(all)
    }

    fn check_data(&self, data: &[Sample]) -> Result<()> {
        for (i, s) in data.iter().enumerate() {
            if s.features.len() != self.config.encoder.input_dim {
                return Err(Error::shape(
                    format!("sample {i} features"),
                    self.config.encoder.input_dim,
                    s.features.len(),
                ));
            }
            if s.label.len() != self.config.n_classes {
                return Err(Error::shape(
                    format!("sample {i} label"),
                    self.config.n_classes,
                    s.label.len(),
                ));
            }
        }
        Ok(())
    }

    /// Codes for untransformed inputs.
    pub fn encode(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        encode_all(&self.model, features)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            epochs_done: self.epochs_done,
            optimizer_step: self.optimizer.step,
            total_steps: self.optimizer.total_steps,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            tensor_lengths: self.tensor_lengths(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::InvalidInput(format!("checkpoint header: {e}")))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
        put(CHECKPOINT_MAGIC)?;
        put(&CHECKPOINT_VERSION.to_le_bytes())?;
        put(&(json.len() as u64).to_le_bytes())?;
        put(&json)?;
        for t in self.all_tensors() {
            for v in t {
                put(&v.to_bits().to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Restores a trainer exactly as it was saved.
    pub fn restore(path: &Path) -> Result<Self> {
        let (header, values) = read_checkpoint(path)?;
        let mut t = Trainer::new(header.config.clone(), 1)?;
        t.install(header, values, path)?;
        Ok(t)
    }

    /// Loads a checkpoint into this trainer, which must have the same architecture.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let (header, values) = read_checkpoint(path)?;
        let (mine, theirs) = (&self.config.encoder, &header.config.encoder);
        if mine.code_length != theirs.code_length {
            return Err(Error::shape(
                "code_length",
                mine.code_length,
                theirs.code_length,
            ));
        }
        if mine.input_dim != theirs.input_dim {
            return Err(Error::shape("input_dim", mine.input_dim, theirs.input_dim));
        }
        if mine.hidden_dims != theirs.hidden_dims {
            return Err(Error::shape(
                "hidden_dims",
                mine.hidden_dims.len(),
                theirs.hidden_dims.len(),
            ));
        }
        if self.config.n_classes != header.config.n_classes {
            return Err(Error::shape(
                "n_classes",
                self.config.n_classes,
                header.config.n_classes,
            ));
        }
        self.config = header.config.clone();
        self.install(header, values, path)
    }

    fn tensor_lengths(&self) -> Vec<usize> {
        self.all_tensors().iter().map(|t| t.len()).collect()
    }

    fn all_tensors(&self) -> Vec<&[f64]> {
        let mut v = self.model.tensors();
        v.push(self.proxies.as_slice());
        v.extend(self.optimizer.first.iter().map(Vec::as_slice));
        v.extend(self.optimizer.second.iter().map(Vec::as_slice));
        v
    }

    fn install(&mut self, header: CheckpointHeader, values: Vec<f64>, path: &Path) -> Result<()> {
        let expected = self.tensor_lengths();
        if header.tensor_lengths != expected {
            let i = header
                .tensor_lengths
                .iter()
                .zip(&expected)
                .position(|(a, b)| a != b)
                .unwrap_or(expected.len().min(header.tensor_lengths.len()));
            return Err(Error::shape(
                format!("tensor {i}"),
                expected.get(i).copied().unwrap_or(0),
                header.tensor_lengths.get(i).copied().unwrap_or(0),
            ));
        }
        let mut it = values.into_iter();
        let mut fill = |dst: &mut [f64]| {
            for d in dst.iter_mut() {
                *d = it.next().unwrap_or(f64::NAN);
            }
        };
        for t in self.model.tensors_mut() {
            fill(t);
        }
        fill(self.proxies.as_mut_slice());
        for t in self.optimizer.first.iter_mut() {
            fill(t);
        }
        for t in self.optimizer.second.iter_mut() {
            fill(t);
        }
        self.optimizer.step = header.optimizer_step;
        self.optimizer.total_steps = header.total_steps;
        self.optimizer.config = header.config.adam;
        self.epochs_done = header.epochs_done;
        let word_pos: u128 = header.rng_word_pos.parse().map_err(|_| Error::Parse {
            path: path.into(),
            line: 0,
            reason: "bad rng word position".into(),
        })?;
        let mut rng = ChaCha8Rng::from_seed(header.rng_seed);
        rng.set_stream(header.rng_stream);
        rng.set_word_pos(word_pos);
        self.rng = rng;
        Ok(())
    }
}

/// Encodes every feature vector with no augmentation.
pub fn encode_all(model: &HashModel, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    par::try_map(features, |x| model.encode(x))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DHDK";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    epochs_done: usize,
    optimizer_step: u64,
    total_steps: u64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: String,
    tensor_lengths: Vec<usize>,
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut take = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| Error::io(path, e));
    let mut magic = [0u8; 4];
    take(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Version {
            path: path.into(),
            reason: format!("bad magic {magic:?}, expected DHDK"),
        });
    }
    let mut b2 = [0u8; 2];
    take(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            reason: format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let mut b8 = [0u8; 8];
    take(&mut b8)?;
    let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
    take(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| Error::Parse {
        path: path.into(),
        line: 0,
        reason: format!("checkpoint header: {e}"),
    })?;
    let n: usize = header.tensor_lengths.iter().sum();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        take(&mut b8)?;
        values.push(f64::from_bits(u64::from_le_bytes(b8)));
    }
    Ok((header, values))
}
