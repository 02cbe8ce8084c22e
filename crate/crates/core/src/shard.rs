//! Simulated model-parallel classification layer.
//!
//! The class dimension of the weight matrix is split into `k` contiguous
//! shards, one per virtual worker. Each worker scores the whole (gathered)
//! feature batch against its own classes; the softmax is made global with two
//! reductions of `N` values each (row maximum, then row sum of exponentials).
//! The backward pass reduces the per-shard feature gradients once more.
//!
//! Reductions go through a [`Collective`]. The in-process implementation
//! combines contributions in rank order; sums are carried as [`ExactSum`]
//! partials, so every `k` and every worker schedule yields the same bits as
//! [`crate::loss::classifier_pass`].

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::loss::{
    check_labels, class_grad, cos_grad, inv_batch, mean, normalize_backward, normalize_in_place,
    row_max, sample_loss, shifted_exp, LossConfig,
};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

/// Contiguous partition of `classes` over `k` workers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardLayout {
    classes: usize,
    ranges: Vec<Range<usize>>,
}

/// Splits `classes` into `shards` contiguous ranges whose sizes differ by at
/// most one; the first `classes % shards` ranges take the extra class.
pub fn partition_classes(classes: usize, shards: usize) -> Result<ShardLayout> {
    if shards < 1 || shards > classes {
        return Err(Error::InvalidShardCount { classes, shards });
    }
    let base = classes / shards;
    let extra = classes % shards;
    let mut ranges = Vec::with_capacity(shards);
    let mut start = 0;
    for rank in 0..shards {
        let len = base + usize::from(rank < extra);
        ranges.push(start..start + len);
        start += len;
    }
    Ok(ShardLayout { classes, ranges })
}

impl ShardLayout {
    pub fn shards(&self) -> usize {
        self.ranges.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn range(&self, rank: usize) -> Range<usize> {
        self.ranges[rank].clone()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    /// Rank owning `class`.
    pub fn owner(&self, class: usize) -> usize {
        self.ranges.partition_point(|r| r.end <= class)
    }
}

static NEXT_WEIGHTS_ID: AtomicU64 = AtomicU64::new(1);

/// Class weights split into per-worker blocks of shape `[|range| × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedWeights<T> {
    layout: ShardLayout,
    blocks: Vec<Matrix<T>>,
    dim: usize,
    id: u64,
    version: u64,
}

impl<T: Scalar> ShardedWeights<T> {
    pub fn from_full(layout: ShardLayout, full: &Matrix<T>) -> Result<Self> {
        if full.rows() != layout.classes() {
            return Err(Error::DimMismatch {
                expected: layout.classes(),
                found: full.rows(),
            });
        }
        let blocks = layout
            .ranges()
            .iter()
            .map(|r| full.slice_rows(r.clone()))
            .collect();
        Ok(Self {
            dim: full.cols(),
            layout,
            blocks,
            id: NEXT_WEIGHTS_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn from_blocks(layout: ShardLayout, blocks: Vec<Matrix<T>>) -> Result<Self> {
        if blocks.len() != layout.shards() {
            return Err(Error::DimMismatch {
                expected: layout.shards(),
                found: blocks.len(),
            });
        }
        let dim = blocks.first().map_or(0, Matrix::cols);
        for (b, r) in blocks.iter().zip(layout.ranges()) {
            if b.rows() != r.len() || b.cols() != dim {
                return Err(Error::DimMismatch {
                    expected: r.len(),
                    found: b.rows(),
                });
            }
        }
        Ok(Self {
            layout,
            blocks,
            dim,
            id: NEXT_WEIGHTS_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn layout(&self) -> &ShardLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block(&self, rank: usize) -> &Matrix<T> {
        &self.blocks[rank]
    }

    pub fn blocks(&self) -> &[Matrix<T>] {
        &self.blocks
    }

    /// Mutable access to one block; invalidates outstanding forward states.
    pub fn block_mut(&mut self, rank: usize) -> &mut Matrix<T> {
        self.version += 1;
        &mut self.blocks[rank]
    }

    pub fn to_full(&self) -> Matrix<T> {
        Matrix::vstack(&self.blocks).expect("blocks share the embedding dim")
    }

    fn stamp(&self) -> (u64, u64) {
        (self.id, self.version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveOp {
    AllReduceMax,
    AllReduceSum,
    AllGather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRound {
    pub op: CollectiveOp,
    pub scalars: u64,
    pub bytes: u64,
}

/// Byte accounting for simulated collectives, from one worker's point of view.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub bytes_allreduce: u64,
    pub bytes_allgather: u64,
    pub rounds: u64,
    log: Vec<CommRound>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, op: CollectiveOp, scalars: u64, width: u64) {
        let bytes = scalars * width;
        match op {
            CollectiveOp::AllReduceMax | CollectiveOp::AllReduceSum => {
                self.bytes_allreduce += bytes
            }
            CollectiveOp::AllGather => self.bytes_allgather += bytes,
        }
        self.rounds += 1;
        self.log.push(CommRound { op, scalars, bytes });
    }

    /// Every collective round charged so far, in order.
    pub fn per_round(&self) -> &[CommRound] {
        &self.log
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_allreduce + self.bytes_allgather
    }
}

/// Reduction primitives the sharded classifier needs. Contributions are
/// indexed by rank; every rank receives the same result.
pub trait Collective: Sync {
    fn all_reduce_max<T: Scalar>(&self, parts: Vec<Vec<T>>, ledger: &mut CommLedger) -> Vec<T>;

    fn all_reduce_sum<T: Scalar>(
        &self,
        parts: Vec<Vec<ExactSum>>,
        ledger: &mut CommLedger,
    ) -> Vec<ExactSum>;

    /// Features are replicated to every worker before scoring.
    fn all_gather_features<T: Scalar>(&self, features: &Matrix<T>, ledger: &mut CommLedger) {
        ledger.charge(
            CollectiveOp::AllGather,
            (features.rows() * features.cols()) as u64,
            T::BYTES,
        );
    }
}

/// In-process collective that combines contributions in ascending rank order.
#[derive(Debug, Clone, Copy, Default)]
pub struct InProcess;

impl Collective for InProcess {
    fn all_reduce_max<T: Scalar>(&self, parts: Vec<Vec<T>>, ledger: &mut CommLedger) -> Vec<T> {
        let mut it = parts.into_iter();
        let mut acc = it.next().unwrap_or_default();
        ledger.charge(CollectiveOp::AllReduceMax, acc.len() as u64, T::BYTES);
        for p in it {
            for (a, b) in acc.iter_mut().zip(p) {
                *a = a.max(b);
            }
        }
        acc
    }

    fn all_reduce_sum<T: Scalar>(
        &self,
        parts: Vec<Vec<ExactSum>>,
        ledger: &mut CommLedger,
    ) -> Vec<ExactSum> {
        let mut it = parts.into_iter();
        let mut acc = it.next().unwrap_or_default();
        ledger.charge(CollectiveOp::AllReduceSum, acc.len() as u64, T::BYTES);
        for p in it {
            for (a, b) in acc.iter_mut().zip(&p) {
                a.merge(b);
            }
        }
        acc
    }
}

/// Order in which simulated workers execute their local computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WorkerSchedule {
    #[default]
    Sequential,
    Reversed,
    /// A seeded random permutation of the ranks.
    Permuted(u64),
    /// Workers run on the rayon pool.
    Parallel,
}

fn run_workers<R, F>(k: usize, schedule: WorkerSchedule, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let order: Vec<usize> = match schedule {
        WorkerSchedule::Sequential => (0..k).collect(),
        WorkerSchedule::Reversed => (0..k).rev().collect(),
        WorkerSchedule::Permuted(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            index::sample(&mut rng, k, k).into_vec()
        }
        WorkerSchedule::Parallel => {
            return (0..k).into_par_iter().map(&f).collect();
        }
    };
    let mut slots: Vec<Option<R>> = (0..k).map(|_| None).collect();
    for rank in order {
        slots[rank] = Some(f(rank));
    }
    slots.into_iter().map(|s| s.expect("every rank ran")).collect()
}

/// Execution options for the sharded passes.
#[derive(Debug, Clone, Copy, Default)]
pub struct ShardOptions<C = InProcess> {
    pub collective: C,
    pub schedule: WorkerSchedule,
}

#[derive(Debug, Clone)]
struct ShardState<T> {
    // block-local row indices of the classes this worker scores
    rows: Vec<usize>,
    unit_w: Matrix<T>,
    w_norms: Vec<T>,
    cos: Matrix<T>,
    // logits on entry to the sum phase, probabilities afterwards
    probs: Matrix<T>,
    // margin logit of sample i's target, on the owning shard only
    target_logit: Vec<Option<T>>,
}

/// Result of a sharded forward pass; also the state the backward pass needs.
#[derive(Debug, Clone)]
pub struct ShardedForward<T> {
    pub loss: T,
    pub target_prob: Vec<T>,
    features: Matrix<T>,
    labels: Vec<usize>,
    cfg: LossConfig,
    stamp: (u64, u64),
    shards: Vec<ShardState<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedGrads<T> {
    /// Gradient with respect to the (unit) input features.
    pub d_features: Matrix<T>,
    /// Per-shard gradient with respect to the raw weight blocks.
    pub d_weights: Vec<Matrix<T>>,
}

impl<T: Scalar> ShardedGrads<T> {
    pub fn d_weights_full(&self) -> Matrix<T> {
        Matrix::vstack(&self.d_weights).expect("blocks share the embedding dim")
    }
}

/// Global softmax loss over all shards. `features` must be unit rows.
pub fn sharded_forward<T: Scalar>(
    features: &Matrix<T>,
    weights: &ShardedWeights<T>,
    labels: &[usize],
    cfg: &LossConfig,
    ledger: &mut CommLedger,
) -> Result<ShardedForward<T>> {
    sharded_forward_with(features, weights, labels, cfg, None, ledger, ShardOptions::<InProcess>::default())
}

pub fn sharded_backward<T: Scalar>(
    fwd: &ShardedForward<T>,
    weights: &ShardedWeights<T>,
    ledger: &mut CommLedger,
) -> Result<ShardedGrads<T>> {
    sharded_backward_with(fwd, weights, ledger, ShardOptions::<InProcess>::default())
}

/// Forward pass restricted to the classes of `plan` when given.
pub fn sharded_forward_with<T: Scalar, C: Collective>(
    features: &Matrix<T>,
    weights: &ShardedWeights<T>,
    labels: &[usize],
    cfg: &LossConfig,
    plan: Option<&SamplePlan>,
    ledger: &mut CommLedger,
    opts: ShardOptions<C>,
) -> Result<ShardedForward<T>> {
    cfg.validate()?;
    let layout = weights.layout();
    if features.cols() != weights.dim() {
        return Err(Error::DimMismatch {
            expected: weights.dim(),
            found: features.cols(),
        });
    }
    check_labels(labels, features.rows(), layout.classes())?;
    if let Some(plan) = plan {
        plan.check(layout, labels)?;
    }
    let n = features.rows();
    let k = layout.shards();
    opts.collective.all_gather_features(features, ledger);

    // local scoring and row maxima
    let local = run_workers(k, opts.schedule, |rank| -> Result<(ShardState<T>, Vec<T>)> {
        let range = layout.range(rank);
        let rows: Vec<usize> = match plan {
            Some(p) => p.kept[rank].iter().map(|c| c - range.start).collect(),
            None => (0..range.len()).collect(),
        };
        let block = weights.block(rank);
        let mut unit_w = block.select_rows(&rows);
        let mut w_norms = Vec::with_capacity(rows.len());
        for (j, &r) in rows.iter().enumerate() {
            let nrm = normalize_in_place(unit_w.row_mut(j)).ok_or(Error::ZeroRow {
                row: range.start + r,
            })?;
            w_norms.push(nrm);
        }
        let mut cos = Matrix::zeros(n, rows.len());
        let mut logits = Matrix::zeros(n, rows.len());
        let s = T::from_f64_lossy(cfg.scale);
        let mut maxes = Vec::with_capacity(n);
        let mut target_logit = vec![None; n];
        for i in 0..n {
            let f = features.row(i);
            for (j, &r) in rows.iter().enumerate() {
                let c = dot(f, unit_w.row(j)).max(-T::one()).min(T::one());
                cos[(i, j)] = c;
                logits[(i, j)] = if range.start + r == labels[i] {
                    let t = cfg.target_logit(c);
                    target_logit[i] = Some(t);
                    t
                } else {
                    s * c
                };
            }
            maxes.push(row_max(logits.row(i)));
        }
        Ok((
            ShardState {
                rows,
                unit_w,
                w_norms,
                cos,
                probs: logits,
                target_logit,
            },
            maxes,
        ))
    });
    let mut shards = Vec::with_capacity(k);
    let mut max_parts = Vec::with_capacity(k);
    for r in local {
        let (s, m) = r?;
        shards.push(s);
        max_parts.push(m);
    }
    let global_max = opts.collective.all_reduce_max(max_parts, ledger);

    // shifted exponentials and partial denominators
    let sum_parts = run_workers(k, opts.schedule, |rank| {
        let st = &shards[rank];
        let mut exps = Matrix::zeros(n, st.rows.len());
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = ExactSum::new();
            shifted_exp(st.probs.row(i), global_max[i], exps.row_mut(i), &mut acc);
            parts.push(acc);
        }
        (exps, parts)
    });
    let mut partials = Vec::with_capacity(k);
    for (st, (exps, parts)) in shards.iter_mut().zip(sum_parts) {
        st.probs = exps;
        partials.push(parts);
    }
    let sums = opts.collective.all_reduce_sum::<T>(partials, ledger);
    let denoms: Vec<T> = sums.iter().map(ExactSum::to_scalar).collect();

    let mut per_sample = vec![T::zero(); n];
    let mut target_prob = vec![T::zero(); n];
    for (rank, st) in shards.iter_mut().enumerate() {
        let range = layout.range(rank);
        for i in 0..n {
            for (j, &r) in st.rows.iter().enumerate() {
                let p = st.probs[(i, j)] / denoms[i];
                st.probs[(i, j)] = p;
                if range.start + r == labels[i] {
                    target_prob[i] = p;
                }
            }
            if let Some(t) = st.target_logit[i] {
                per_sample[i] = sample_loss(denoms[i], global_max[i], t);
            }
        }
    }

    Ok(ShardedForward {
        // per-sample losses are assembled on the host for reporting
        loss: mean(&per_sample),
        target_prob,
        features: features.clone(),
        labels: labels.to_vec(),
        cfg: *cfg,
        stamp: weights.stamp(),
        shards,
    })
}

pub fn sharded_backward_with<T: Scalar, C: Collective>(
    fwd: &ShardedForward<T>,
    weights: &ShardedWeights<T>,
    ledger: &mut CommLedger,
    opts: ShardOptions<C>,
) -> Result<ShardedGrads<T>> {
    if weights.stamp() != fwd.stamp {
        return Err(Error::StaleState);
    }
    let layout = weights.layout();
    let n = fwd.features.rows();
    let d = fwd.features.cols();
    let k = layout.shards();
    let inv_n = inv_batch::<T>(n);
    let cfg = &fwd.cfg;

    let local = run_workers(k, opts.schedule, |rank| {
        let st = &fwd.shards[rank];
        let range = layout.range(rank);
        let mut dcos = Matrix::zeros(n, st.rows.len());
        for i in 0..n {
            for (j, &r) in st.rows.iter().enumerate() {
                let is_target = range.start + r == fwd.labels[i];
                dcos[(i, j)] = cos_grad(cfg, st.probs[(i, j)], st.cos[(i, j)], is_target, inv_n);
            }
        }
        let mut parts = Vec::with_capacity(n * d);
        for i in 0..n {
            let mut accs = vec![ExactSum::new(); d];
            for j in 0..st.rows.len() {
                let g = dcos[(i, j)];
                for (acc, &w) in accs.iter_mut().zip(st.unit_w.row(j)) {
                    acc.add_scalar(g * w);
                }
            }
            parts.extend(accs);
        }
        let mut dw = Matrix::zeros(range.len(), d);
        for (j, &r) in st.rows.iter().enumerate() {
            let d_unit = class_grad(&dcos, &fwd.features, j);
            let g = normalize_backward(st.unit_w.row(j), &d_unit, st.w_norms[j]);
            dw.row_mut(r).copy_from_slice(&g);
        }
        (parts, dw)
    });
    let mut parts = Vec::with_capacity(k);
    let mut d_weights = Vec::with_capacity(k);
    for (p, dw) in local {
        parts.push(p);
        d_weights.push(dw);
    }
    let sums = opts.collective.all_reduce_sum::<T>(parts, ledger);
    let d_features = Matrix::from_vec(n, d, sums.iter().map(ExactSum::to_scalar).collect())?;
    Ok(ShardedGrads {
        d_features,
        d_weights,
    })
}

/// Per-shard class lists kept by Partial-FC negative sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub ratio: f64,
    pub seed: u64,
    /// Global class ids per shard, ascending.
    pub kept: Vec<Vec<usize>>,
}

impl SamplePlan {
    fn check(&self, layout: &ShardLayout, labels: &[usize]) -> Result<()> {
        if self.kept.len() != layout.shards() {
            return Err(Error::PlanMismatch(format!(
                "{} kept lists for {} shards",
                self.kept.len(),
                layout.shards()
            )));
        }
        for (rank, kept) in self.kept.iter().enumerate() {
            let range = layout.range(rank);
            if kept.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::PlanMismatch(format!("shard {rank} list not ascending")));
            }
            if kept.iter().any(|c| !range.contains(c)) {
                return Err(Error::PlanMismatch(format!(
                    "shard {rank} keeps a class outside {range:?}"
                )));
            }
        }
        for &y in labels {
            if self.kept[layout.owner(y)].binary_search(&y).is_err() {
                return Err(Error::PlanMismatch(format!("positive class {y} not kept")));
            }
        }
        Ok(())
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().map(Vec::len).sum()
    }
}

/// Keeps every positive class of the batch plus uniformly sampled negatives,
/// `⌈ratio·|range|⌉` classes per shard in total (more if the shard holds more
/// positives than that).
pub fn plan_negatives(
    layout: &ShardLayout,
    labels: &[usize],
    ratio: f64,
    seed: u64,
) -> Result<SamplePlan> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    check_labels(labels, labels.len(), layout.classes())?;
    let mut kept = Vec::with_capacity(layout.shards());
    for (rank, range) in layout.ranges().iter().enumerate() {
        let target = ((ratio * range.len() as f64).ceil() as usize).min(range.len());
        let mut positive = vec![false; range.len()];
        for &y in labels.iter().filter(|y| range.contains(y)) {
            positive[y - range.start] = true;
        }
        let mut classes: Vec<usize> = positive
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(|(j, _)| range.start + j)
            .collect();
        let negatives: Vec<usize> = positive
            .iter()
            .enumerate()
            .filter(|(_, &p)| !p)
            .map(|(j, _)| range.start + j)
            .collect();
        let want = target.saturating_sub(classes.len()).min(negatives.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rank as u64);
        classes.extend(
            index::sample(&mut rng, negatives.len(), want)
                .into_iter()
                .map(|j| negatives[j]),
        );
        classes.sort_unstable();
        kept.push(classes);
    }
    Ok(SamplePlan { ratio, seed, kept })
}

/// Loss and gradients of the Partial-FC step. Unsampled weight rows receive
/// exactly zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialStep<T> {
    pub loss: T,
    pub target_prob: Vec<T>,
    pub grads: ShardedGrads<T>,
}

pub fn partial_forward_backward<T: Scalar>(
    features: &Matrix<T>,
    weights: &ShardedWeights<T>,
    labels: &[usize],
    cfg: &LossConfig,
    plan: &SamplePlan,
    ledger: &mut CommLedger,
) -> Result<PartialStep<T>> {
    let opts = ShardOptions::<InProcess>::default();
    let fwd = sharded_forward_with(features, weights, labels, cfg, Some(plan), ledger, opts)?;
    let grads = sharded_backward_with(&fwd, weights, ledger, opts)?;
    Ok(PartialStep {
        loss: fwd.loss,
        target_prob: fwd.target_prob,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{classifier_pass, normalize_rows};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn instance(n: usize, c: usize, d: usize, seed: u64) -> (Matrix<f64>, Matrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = normalize_rows(&gaussian(n, d, &mut rng)).unwrap();
        let w = gaussian(c, d, &mut rng);
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        (f, w, labels)
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_classes(10, 3).unwrap().sizes(), vec![4, 3, 3]);
        let big = partition_classes(2_000_000, 32).unwrap();
        assert!(big.sizes().iter().all(|&s| s == 62_500));
        assert_eq!(partition_classes(5, 5).unwrap().sizes(), vec![1; 5]);
        assert!(matches!(partition_classes(5, 0), Err(Error::InvalidShardCount { .. })));
        assert!(matches!(partition_classes(5, 6), Err(Error::InvalidShardCount { .. })));
        let l = partition_classes(10, 3).unwrap();
        assert_eq!((0..10).map(|c| l.owner(c)).collect::<Vec<_>>(), [0, 0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn single_shard_is_monolithic_bitwise() {
        let (f, w, labels) = instance(8, 20, 16, 0);
        let cfg = LossConfig::cosface(0.4, 64.0);
        let mono = classifier_pass(&f, &w, &labels, &cfg).unwrap();
        for k in [1, 2, 3, 4, 8] {
            let sw = ShardedWeights::from_full(partition_classes(20, k).unwrap(), &w).unwrap();
            let mut ledger = CommLedger::new();
            let fwd = sharded_forward(&f, &sw, &labels, &cfg, &mut ledger).unwrap();
            let g = sharded_backward(&fwd, &sw, &mut ledger).unwrap();
            assert_eq!(fwd.loss.to_bits(), mono.loss.to_bits(), "k={k}");
            assert_eq!(fwd.target_prob, mono.target_prob);
            assert_eq!(g.d_features, mono.d_features);
            assert_eq!(g.d_weights_full(), mono.d_weights);
        }
    }

    #[test]
    fn two_shard_probabilities() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![0.5, 0.75f64.sqrt()], vec![1.0, 0.0]]).unwrap();
        let sw = ShardedWeights::from_full(partition_classes(2, 2).unwrap(), &w).unwrap();
        let cfg = LossConfig::plain(2.0);
        let mut ledger = CommLedger::new();
        let p1 = sharded_forward(&f, &sw, &[1], &cfg, &mut ledger).unwrap().target_prob[0];
        let p0 = sharded_forward(&f, &sw, &[0], &cfg, &mut ledger).unwrap().target_prob[0];
        // logits 1 and 2: 1/(1+e) and e/(1+e)
        let e = std::f64::consts::E;
        assert!((p0 - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((p1 - e / (1.0 + e)).abs() < 1e-12);
        assert!((p0 - 0.2689).abs() < 5e-5 && (p1 - 0.7311).abs() < 5e-5);
    }

    #[test]
    fn single_class_has_zero_gradient() {
        let f = Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let w = Matrix::from_rows(&[vec![0.3, -2.0]]).unwrap();
        let sw = ShardedWeights::from_full(partition_classes(1, 1).unwrap(), &w).unwrap();
        let mut ledger = CommLedger::new();
        let fwd = sharded_forward(&f, &sw, &[0], &LossConfig::default(), &mut ledger).unwrap();
        let g = sharded_backward(&fwd, &sw, &mut ledger).unwrap();
        assert!(g.d_weights[0].as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(fwd.loss, 0.0);
    }

    #[test]
    fn ledger_law_independent_of_k() {
        let (f, w, labels) = instance(6, 24, 5, 3);
        for k in [1, 2, 3, 4, 8] {
            let sw = ShardedWeights::from_full(partition_classes(24, k).unwrap(), &w).unwrap();
            let mut ledger = CommLedger::new();
            let fwd = sharded_forward(&f, &sw, &labels, &LossConfig::default(), &mut ledger).unwrap();
            assert_eq!(ledger.bytes_allreduce, 2 * 6 * 8);
            assert_eq!(ledger.bytes_allgather, 6 * 5 * 8);
            let before = ledger.bytes_allreduce;
            sharded_backward(&fwd, &sw, &mut ledger).unwrap();
            assert_eq!(ledger.bytes_allreduce - before, 6 * 5 * 8);
            assert_eq!(ledger.rounds, 4);
            let ops: Vec<_> = ledger.per_round().iter().map(|r| r.op).collect();
            assert_eq!(
                ops,
                [
                    CollectiveOp::AllGather,
                    CollectiveOp::AllReduceMax,
                    CollectiveOp::AllReduceSum,
                    CollectiveOp::AllReduceSum
                ]
            );
        }
        let f32f = f.cast::<f32>();
        let sw = ShardedWeights::from_full(partition_classes(24, 3).unwrap(), &w.cast::<f32>()).unwrap();
        let mut ledger = CommLedger::new();
        sharded_forward(&f32f, &sw, &labels, &LossConfig::default(), &mut ledger).unwrap();
        assert_eq!(ledger.bytes_allreduce, 2 * 6 * 4);
    }

    #[test]
    fn schedules_agree_bitwise() {
        let (f, w, labels) = instance(7, 30, 9, 11);
        let sw = ShardedWeights::from_full(partition_classes(30, 8).unwrap(), &w).unwrap();
        let cfg = LossConfig::arcface(0.5, 64.0);
        let run = |schedule| {
            let opts = ShardOptions { collective: InProcess, schedule };
            let mut ledger = CommLedger::new();
            let fwd =
                sharded_forward_with(&f, &sw, &labels, &cfg, None, &mut ledger, opts).unwrap();
            let g = sharded_backward_with(&fwd, &sw, &mut ledger, opts).unwrap();
            (fwd.loss, g)
        };
        let base = run(WorkerSchedule::Sequential);
        for s in [
            WorkerSchedule::Reversed,
            WorkerSchedule::Permuted(1),
            WorkerSchedule::Permuted(99),
            WorkerSchedule::Parallel,
        ] {
            assert_eq!(run(s), base, "{s:?}");
        }
    }

    #[test]
    fn stale_state_rejected() {
        let (f, w, labels) = instance(3, 6, 4, 5);
        let mut sw = ShardedWeights::from_full(partition_classes(6, 2).unwrap(), &w).unwrap();
        let mut ledger = CommLedger::new();
        let fwd = sharded_forward(&f, &sw, &labels, &LossConfig::default(), &mut ledger).unwrap();
        sw.block_mut(1)[(0, 0)] += 1.0;
        assert!(matches!(sharded_backward(&fwd, &sw, &mut ledger), Err(Error::StaleState)));
        let other = ShardedWeights::from_full(partition_classes(6, 2).unwrap(), &w).unwrap();
        assert!(matches!(sharded_backward(&fwd, &other, &mut ledger), Err(Error::StaleState)));
    }

    #[test]
    fn input_errors() {
        let (f, w, _) = instance(2, 4, 3, 0);
        let sw = ShardedWeights::from_full(partition_classes(4, 2).unwrap(), &w).unwrap();
        let mut ledger = CommLedger::new();
        let cfg = LossConfig::default();
        assert!(matches!(
            sharded_forward(&f, &sw, &[0, 4], &cfg, &mut ledger),
            Err(Error::LabelOutOfRange { label: 4, .. })
        ));
        let bad = Matrix::<f64>::zeros(2, 5);
        assert!(matches!(
            sharded_forward(&bad, &sw, &[0, 1], &cfg, &mut ledger),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn plan_examples() {
        let layout = partition_classes(1000, 4).unwrap();
        let full = plan_negatives(&layout, &[5, 950], 1.0, 0).unwrap();
        assert_eq!(full.kept_count(), 1000);

        let p = plan_negatives(&layout, &[5, 950], 0.1, 7).unwrap();
        assert!(p.kept[0].contains(&5));
        assert!(p.kept[3].contains(&950));
        assert!(p.kept.iter().all(|k| k.len() == 25));
        for (rank, k) in p.kept.iter().enumerate() {
            assert!(k.iter().all(|c| layout.range(rank).contains(c)));
            assert!(k.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(plan_negatives(&layout, &[5, 950], 0.1, 7).unwrap(), p);
        assert_ne!(plan_negatives(&layout, &[5, 950], 0.1, 8).unwrap(), p);

        assert!(matches!(plan_negatives(&layout, &[1], 0.0, 0), Err(Error::InvalidRatio(_))));
        assert!(matches!(plan_negatives(&layout, &[1], 1.5, 0), Err(Error::InvalidRatio(_))));
    }

    #[test]
    fn positives_exceeding_quota_are_all_kept() {
        let layout = partition_classes(10, 1).unwrap();
        let p = plan_negatives(&layout, &[0, 1, 2, 3], 0.1, 0).unwrap();
        assert_eq!(p.kept[0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn partial_full_ratio_is_bitwise_full_path() {
        let (f, w, labels) = instance(9, 40, 12, 21);
        let sw = ShardedWeights::from_full(partition_classes(40, 3).unwrap(), &w).unwrap();
        let cfg = LossConfig::cosface(0.4, 64.0);
        let plan = plan_negatives(sw.layout(), &labels, 1.0, 4).unwrap();
        let mut ledger = CommLedger::new();
        let part = partial_forward_backward(&f, &sw, &labels, &cfg, &plan, &mut ledger).unwrap();
        let fwd = sharded_forward(&f, &sw, &labels, &cfg, &mut ledger).unwrap();
        let g = sharded_backward(&fwd, &sw, &mut ledger).unwrap();
        assert_eq!(part.loss.to_bits(), fwd.loss.to_bits());
        assert_eq!(part.grads, g);
    }

    #[test]
    fn partial_unsampled_rows_get_zero_gradient() {
        let (f, w, labels) = instance(5, 40, 6, 2);
        let sw = ShardedWeights::from_full(partition_classes(40, 4).unwrap(), &w).unwrap();
        let plan = plan_negatives(sw.layout(), &labels, 0.3, 9).unwrap();
        let mut ledger = CommLedger::new();
        let step =
            partial_forward_backward(&f, &sw, &labels, &LossConfig::default(), &plan, &mut ledger)
                .unwrap();
        for (rank, dw) in step.grads.d_weights.iter().enumerate() {
            let range = sw.layout().range(rank);
            for r in 0..range.len() {
                let kept = plan.kept[rank].contains(&(range.start + r));
                let zero = dw.row(r).iter().all(|&x| x == 0.0);
                assert_eq!(zero, !kept, "class {}", range.start + r);
            }
        }
    }

    #[test]
    fn partial_loss_bounded_by_dropped_mass() {
        // every sample sits on its class direction, so nearly all mass is on the target
        let d = 16;
        let c = 16;
        let w = Matrix::<f64>::identity(c);
        let labels: Vec<usize> = (0..8).map(|i| (i * 5) % c).collect();
        let mut f = Matrix::zeros(8, d);
        for (i, &y) in labels.iter().enumerate() {
            f[(i, y)] = 0.9;
            f[(i, (y + 1) % c)] = 0.19f64.sqrt();
        }
        let sw = ShardedWeights::from_full(partition_classes(c, 2).unwrap(), &w).unwrap();
        let cfg = LossConfig::cosface(0.4, 64.0);
        let mut ledger = CommLedger::new();
        let full = sharded_forward(&f, &sw, &labels, &cfg, &mut ledger).unwrap();
        let plan = plan_negatives(sw.layout(), &labels, 0.5, 3).unwrap();
        let part = partial_forward_backward(&f, &sw, &labels, &cfg, &plan, &mut ledger).unwrap();
        // per sample, log(Z_full / Z_part) = -log(1 - dropped probability mass)
        let full_pass = classifier_pass(&f, &w, &labels, &cfg).unwrap();
        let cos = f.matmul_t(&w).unwrap();
        let mut bound = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: f64 = (0..c)
                .map(|j| if j == y { cfg.target_logit(cos[(i, j)]) } else { 64.0 * cos[(i, j)] })
                .map(f64::exp)
                .sum();
            let dropped: f64 = (0..c)
                .filter(|j| !plan.kept[sw.layout().owner(*j)].contains(j))
                .map(|j| (64.0 * cos[(i, j)]).exp() / z)
                .sum();
            bound += -(1.0 - dropped).ln() / labels.len() as f64;
        }
        assert!(full.loss >= part.loss);
        assert!(full.loss - part.loss <= bound * (1.0 + 1e-9) + 1e-15);
        assert!((full.loss - full_pass.loss).abs() < 1e-15);
    }
}
