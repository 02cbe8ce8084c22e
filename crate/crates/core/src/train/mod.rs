//! Desk-scale training: an MLP embedder feeding the sharded margin-softmax
//! classifier, SGD with momentum and step decay, per-epoch mask augmentation,
//! mixed-precision emulation and the short high-mask-ratio finetune.

pub mod checkpoint;
pub mod embedder;
pub mod verify;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::matrix::Matrix;
use crate::precision::{fp16_round, fp16_round_saturating, LossScaler, Precision};
use crate::scalar::Scalar;
use crate::shard::{
    partition_classes, plan_negatives, sharded_backward_with, sharded_forward_with, CommLedger, InProcess,
    ShardOptions, ShardedWeights, WorkerSchedule,
};
use crate::synth::{mask_vector, SynthTask};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use embedder::Embedder;
pub use verify::{synth_pairs, verify_pairs, Pair, PairSet, SubsetMetrics, VerifyMetrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr_per_256: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout_ratio: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
    pub global_batch: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub loss: LossConfig,
    /// Probability that a sample is presented masked in a given epoch.
    pub mask_ratio: f64,
    /// Fraction of trailing input coordinates the mask hides.
    pub occlusion_fraction: f64,
    pub precision: Precision,
    pub loss_scale: f64,
    pub partial_fc_ratio: f64,
    pub shards: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr_per_256: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            dropout_ratio: 0.4,
            decay_epochs: vec![5, 9, 12, 15],
            decay_factor: 0.1,
            total_epochs: 17,
            global_batch: 64,
            hidden_dim: 256,
            embed_dim: 64,
            loss: LossConfig::cosface(0.4, 64.0),
            mask_ratio: 0.15,
            occlusion_fraction: 0.5,
            precision: Precision::Full,
            loss_scale: 1024.0,
            partial_fc_ratio: 1.0,
            shards: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.loss.validate()?;
        if let Some(&e) = self.decay_epochs.iter().find(|&&e| e >= self.total_epochs.max(1)) {
            return bad(format!("decay epoch {e} not below total_epochs {}", self.total_epochs));
        }
        for (name, v) in [("mask_ratio", self.mask_ratio), ("occlusion_fraction", self.occlusion_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return bad(format!("dropout_ratio = {} outside [0, 1)", self.dropout_ratio));
        }
        if !(self.partial_fc_ratio > 0.0 && self.partial_fc_ratio <= 1.0) {
            return Err(Error::InvalidRatio(self.partial_fc_ratio));
        }
        if self.global_batch == 0 || self.hidden_dim == 0 || self.embed_dim == 0 || self.shards == 0 {
            return bad("batch, dims and shards must be positive".into());
        }
        if !(self.base_lr_per_256 >= 0.0 && self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return bad("learning rate and weight decay must be non-negative, momentum in [0, 1)".into());
        }
        if !(self.loss_scale >= 1.0) {
            return bad(format!("loss_scale = {} below 1", self.loss_scale));
        }
        Ok(())
    }
}

/// Base rate scaled linearly with the batch, multiplied by `decay_factor`
/// once for every decay epoch already reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            total: cfg.total_epochs,
        });
    }
    let drops = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    Ok(cfg.base_lr_per_256 * (cfg.global_batch as f64 / 256.0) * cfg.decay_factor.powi(drops as i32))
}

/// Training inputs with their masked variants precomputed.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub inputs: Matrix<T>,
    pub masked: Matrix<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl<T: Scalar> TrainData<T> {
    pub fn new(inputs: Matrix<T>, labels: Vec<usize>, n_classes: usize, occlusion_fraction: f64) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::DimMismatch {
                expected: inputs.rows(),
                found: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: n_classes,
            });
        }
        let d = inputs.cols();
        let hidden = ((occlusion_fraction * d as f64).round() as usize).min(d.saturating_sub(1));
        let data = inputs.iter_rows().flat_map(|r| mask_vector(r, hidden)).collect();
        let masked = Matrix::from_vec(inputs.rows(), d, data)?;
        Ok(Self {
            inputs,
            masked,
            labels,
            n_classes,
        })
    }

    /// Uses the task's own occlusion model for the masked variants.
    pub fn from_task(task: &SynthTask<T>) -> Self {
        let inputs = task.dataset.features.clone();
        Self {
            masked: task.mask_rows(&inputs),
            inputs,
            labels: task.dataset.labels.clone(),
            n_classes: task.dataset.n_ids,
        }
    }

    pub fn n(&self) -> usize {
        self.inputs.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    /// Mean step loss.
    pub loss: f64,
    pub train_accuracy: f64,
    pub skipped_steps: u64,
    pub loss_scale: f64,
    pub comm_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    /// One JSON object per epoch, one per line.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Model, optimizer buffers and RNG streams of one run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub embedder: Embedder<T>,
    pub classifier: ShardedWeights<T>,
    pub schedule: WorkerSchedule,
    pub scaler: LossScaler,
    pub epochs_done: usize,
    pub steps_done: u64,
    emb_velocity: Embedder<T>,
    cls_velocity: Vec<Matrix<T>>,
    data_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub skipped: bool,
}

fn sgd<T: Scalar>(w: &mut [T], g: &[T], v: &mut [T], lr: T, mu: T, wd: T, unscale: T) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g * unscale + wd * *w;
        *w = *w - lr * *v;
    }
}

impl<T: Scalar> TrainState<T> {
    pub fn init(data: &TrainData<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, 0);
        let embedder = Embedder::init(data.inputs.cols(), cfg.hidden_dim, cfg.embed_dim, &mut rng);
        let full: Vec<T> = (0..data.n_classes * cfg.embed_dim)
            .map(|_| T::from_f64_lossy(0.01 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let full = Matrix::from_vec(data.n_classes, cfg.embed_dim, full)?;
        Self::from_parts(cfg.clone(), embedder, &full, 0)
    }

    pub fn from_parts(config: TrainConfig, embedder: Embedder<T>, classifier: &Matrix<T>, epochs_done: usize) -> Result<Self> {
        config.validate()?;
        let layout = partition_classes(classifier.rows(), config.shards)?;
        let classifier = ShardedWeights::from_full(layout, classifier)?;
        let cls_velocity = classifier
            .blocks()
            .iter()
            .map(|b| Matrix::zeros(b.rows(), b.cols()))
            .collect();
        Ok(Self {
            emb_velocity: embedder.zeros_like(),
            cls_velocity,
            scaler: LossScaler::new(config.loss_scale),
            data_rng: stream(config.seed ^ epochs_done as u64, 1),
            dropout_rng: stream(config.seed ^ epochs_done as u64, 2),
            schedule: WorkerSchedule::Sequential,
            epochs_done,
            steps_done: 0,
            embedder,
            classifier,
            config,
        })
    }

    /// Fraction of `inputs` whose nearest class by cosine is their label.
    pub fn accuracy(&self, inputs: &Matrix<T>, labels: &[usize]) -> Result<f64> {
        let emb = self.embedder.embed(inputs)?;
        let w = crate::loss::normalize_rows(&self.classifier.to_full())?;
        let cos = emb.matmul_t(&w)?;
        let hits = cos
            .iter_rows()
            .zip(labels)
            .filter(|(row, &y)| {
                let best = (0..row.len())
                    .reduce(|a, b| if row[b] > row[a] { b } else { a })
                    .unwrap_or(usize::MAX);
                best == y
            })
            .count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    pub fn train_accuracy(&self, data: &TrainData<T>) -> Result<f64> {
        self.accuracy(&data.inputs, &data.labels)
    }

    fn plan_seed(&self) -> u64 {
        self.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.steps_done)
    }

    /// One SGD step on a batch. Mixed precision rounds embedder weights,
    /// activations and gradients to half precision and scales the loss; an
    /// overflow skips the step and halves the scale.
    pub fn step(&mut self, x: &Matrix<T>, labels: &[usize], lr: f64, ledger: &mut CommLedger) -> Result<StepOutcome> {
        let cfg = &self.config;
        let mixed = cfg.precision == Precision::MixedEmulated;
        let opts = ShardOptions::<InProcess> {
            collective: InProcess,
            schedule: self.schedule,
        };
        let (act_round, grad_round): (fn(T) -> T, fn(T) -> T) = if mixed {
            (fp16_round_saturating, fp16_round)
        } else {
            (|x| x, |x| x)
        };
        let model = if mixed {
            self.embedder.map(fp16_round_saturating)
        } else {
            self.embedder.clone()
        };
        let x = if mixed { x.map(fp16_round_saturating) } else { x.clone() };
        let trace = model.forward(&x, cfg.dropout_ratio, Some(&mut self.dropout_rng), act_round)?;

        let plan = if cfg.partial_fc_ratio < 1.0 {
            Some(plan_negatives(self.classifier.layout(), labels, cfg.partial_fc_ratio, self.plan_seed())?)
        } else {
            None
        };
        let fwd = sharded_forward_with(&trace.output, &self.classifier, labels, &cfg.loss, plan.as_ref(), ledger, opts)?;
        let grads = sharded_backward_with(&fwd, &self.classifier, ledger, opts)?;
        let loss = fwd.loss.to_f64_exact();
        self.steps_done += 1;

        let scale = if mixed { self.scaler.scale } else { 1.0 };
        let d_emb = if mixed {
            let s = T::from_f64_lossy(scale);
            grads.d_features.map(|g| g * s)
        } else {
            grads.d_features.clone()
        };
        let emb_grads = model.backward(&trace, &d_emb, grad_round);
        if !loss.is_finite() || !emb_grads.is_finite() {
            if mixed {
                self.scaler.on_overflow();
                return Ok(StepOutcome { loss, skipped: true });
            }
            return Err(Error::NonFiniteLoss);
        }

        let (lr, mu, wd) = (
            T::from_f64_lossy(lr),
            T::from_f64_lossy(cfg.momentum),
            T::from_f64_lossy(cfg.weight_decay),
        );
        let unscale = T::from_f64_lossy(1.0 / scale);
        let v = self.emb_velocity.tensors_mut();
        for ((w, g), v) in self.embedder.tensors_mut().into_iter().zip(emb_grads.tensors()).zip(v) {
            sgd(w, g, v, lr, mu, wd, unscale);
        }
        for rank in 0..self.classifier.layout().shards() {
            let block = self.classifier.block_mut(rank);
            sgd(
                block.as_mut_slice(),
                grads.d_weights[rank].as_slice(),
                self.cls_velocity[rank].as_mut_slice(),
                lr,
                mu,
                wd,
                T::one(),
            );
        }
        Ok(StepOutcome { loss, skipped: false })
    }

    /// One pass over the data in a fresh random order; each sample is shown
    /// masked with probability `mask_ratio`.
    pub fn run_epoch(&mut self, data: &TrainData<T>, lr: f64, mask_ratio: f64, report: &mut TrainReport) -> Result<()> {
        if data.inputs.cols() != self.embedder.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.embedder.input_dim(),
                found: data.inputs.cols(),
            });
        }
        let n = data.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.data_rng);
        let masked: Vec<bool> = (0..n).map(|_| self.data_rng.random::<f64>() < mask_ratio).collect();
        let skipped_before = self.scaler.skipped_steps;
        let mut ledger = CommLedger::new();
        let mut losses = Vec::new();
        for batch in order.chunks(self.config.global_batch) {
            let rows: Vec<Vec<T>> = batch
                .iter()
                .map(|&i| {
                    let src = if masked[i] { &data.masked } else { &data.inputs };
                    src.row(i).to_vec()
                })
                .collect();
            let x = Matrix::from_rows(&rows)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let out = self.step(&x, &labels, lr, &mut ledger)?;
            losses.push(out.loss);
        }
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        report.step_losses.extend(&losses);
        report.epochs.push(EpochMetrics {
            epoch: self.epochs_done,
            lr,
            mask_ratio,
            loss: mean,
            train_accuracy: self.train_accuracy(data)?,
            skipped_steps: self.scaler.skipped_steps - skipped_before,
            loss_scale: self.scaler.scale,
            comm_bytes: ledger.total_bytes(),
        });
        self.epochs_done += 1;
        Ok(())
    }
}

/// Trains from a fresh initialization for `cfg.total_epochs` epochs.
pub fn train<T: Scalar>(data: &TrainData<T>, cfg: &TrainConfig) -> Result<(TrainState<T>, TrainReport)> {
    train_with(data, cfg, WorkerSchedule::Sequential)
}

pub fn train_with<T: Scalar>(
    data: &TrainData<T>,
    cfg: &TrainConfig,
    schedule: WorkerSchedule,
) -> Result<(TrainState<T>, TrainReport)> {
    let mut state = TrainState::init(data, cfg)?;
    state.schedule = schedule;
    let mut report = TrainReport::default();
    for epoch in 0..cfg.total_epochs {
        state.run_epoch(data, lr_at(epoch, cfg)?, cfg.mask_ratio, &mut report)?;
    }
    Ok((state, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    /// Constant learning rate for the whole finetune.
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.33,
            epochs: 3,
            lr: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub train_accuracy_before: f64,
    pub train_accuracy_after: f64,
    pub verify_before: Option<VerifyMetrics>,
    pub verify_after: Option<VerifyMetrics>,
    pub training: TrainReport,
}

/// Continues training at a constant rate with a different mask ratio.
pub fn finetune<T: Scalar>(
    state: &TrainState<T>,
    data: &TrainData<T>,
    ft: &FinetuneConfig,
    pairs: Option<&PairSet<T>>,
) -> Result<(TrainState<T>, FinetuneReport)> {
    if !(0.0..=1.0).contains(&ft.mask_ratio) || !(ft.lr >= 0.0) {
        return Err(Error::InvalidConfig("finetune mask_ratio in [0, 1] and lr ≥ 0 required".into()));
    }
    let verify = |s: &TrainState<T>| pairs.map(|p| verify_pairs(&s.embedder, p)).transpose();
    let mut next = state.clone();
    let mut training = TrainReport::default();
    for _ in 0..ft.epochs {
        next.run_epoch(data, ft.lr, ft.mask_ratio, &mut training)?;
    }
    let report = FinetuneReport {
        train_accuracy_before: state.train_accuracy(data)?,
        train_accuracy_after: next.train_accuracy(data)?,
        verify_before: verify(state)?,
        verify_after: verify(&next)?,
        training,
    };
    Ok((next, report))
}
