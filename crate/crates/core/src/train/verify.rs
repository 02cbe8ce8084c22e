use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedder::Embedder;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;
use crate::synth::SynthTask;

/// False-positive rate at which the true-positive rate is reported.
pub const TARGET_FPR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
    pub masked: bool,
}

/// Verification pairs over the rows of `inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet<T> {
    pub inputs: Matrix<T>,
    pub pairs: Vec<Pair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub pairs: usize,
    /// Accuracy at the best threshold.
    pub accuracy: f64,
    /// Pairs scoring strictly above this are predicted "same".
    pub threshold: f64,
    pub tpr_at_fpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyMetrics {
    pub overall: SubsetMetrics,
    pub masked: Option<SubsetMetrics>,
    pub unmasked: Option<SubsetMetrics>,
}

/// Best-threshold accuracy and TPR at [`TARGET_FPR`] of cosine scores.
/// Candidate thresholds are the midpoints between consecutive distinct scores
/// plus one below the minimum and one above the maximum.
pub fn score_metrics(scores: &[f64], same: &[bool]) -> Result<SubsetMetrics> {
    let n = scores.len();
    let pos = same.iter().filter(|&&s| s).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegeneratePairs(format!("{pos} positive and {neg} negative pairs")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // threshold below everything: all predicted same
    let mut correct = pos;
    let mut best = (correct, scores[order[0]] - 1.0);
    let mut k = 0;
    while k < n {
        let v = scores[order[k]];
        while k < n && scores[order[k]] == v {
            correct = if same[order[k]] { correct - 1 } else { correct + 1 };
            k += 1;
        }
        let t = if k < n { 0.5 * (v + scores[order[k]]) } else { v + 1.0 };
        if correct > best.0 {
            best = (correct, t);
        }
    }

    let mut negs: Vec<f64> = (0..n).filter(|&i| !same[i]).map(|i| scores[i]).collect();
    negs.sort_by(|a, b| b.total_cmp(a));
    let allowed = (TARGET_FPR * neg as f64).floor() as usize;
    let t = negs[allowed.min(neg - 1)];
    let tp = (0..n).filter(|&i| same[i] && scores[i] > t).count();

    Ok(SubsetMetrics {
        pairs: n,
        accuracy: best.0 as f64 / n as f64,
        threshold: best.1,
        tpr_at_fpr: tp as f64 / pos as f64,
    })
}

fn subset(scores: &[f64], pairs: &[Pair], keep: impl Fn(&Pair) -> bool) -> Option<SubsetMetrics> {
    let (s, y): (Vec<f64>, Vec<bool>) = pairs
        .iter()
        .zip(scores)
        .filter(|(p, _)| keep(p))
        .map(|(p, &s)| (s, p.same))
        .unzip();
    score_metrics(&s, &y).ok()
}

/// Metrics from precomputed unit embeddings of `pairs.inputs`.
pub fn verify_embeddings<T: Scalar>(emb: &Matrix<T>, pairs: &[Pair]) -> Result<VerifyMetrics> {
    if pairs.is_empty() {
        return Err(Error::DegeneratePairs("no pairs".into()));
    }
    if pairs.iter().any(|p| p.a == p.b) {
        return Err(Error::DegeneratePairs("self-pairs are not allowed".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.a.max(p.b) >= emb.rows()) {
        return Err(Error::DegeneratePairs(format!("pair ({}, {}) out of range", p.a, p.b)));
    }
    let scores: Vec<f64> = pairs
        .iter()
        .map(|p| dot(emb.row(p.a), emb.row(p.b)).to_f64_exact())
        .collect();
    let same: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    Ok(VerifyMetrics {
        overall: score_metrics(&scores, &same)?,
        masked: subset(&scores, pairs, |p| p.masked),
        unmasked: subset(&scores, pairs, |p| !p.masked),
    })
}

/// Embeds the pair inputs with dropout off and scores every pair by cosine.
pub fn verify_pairs<T: Scalar>(model: &Embedder<T>, pairs: &PairSet<T>) -> Result<VerifyMetrics> {
    let emb = model.embed(&pairs.inputs)?;
    verify_embeddings(&emb, &pairs.pairs)
}

/// Held-out pairs for a synthetic task: `per_id` fresh samples per identity,
/// `count` unmasked pairs between clean samples and `count` masked pairs
/// between a masked probe and a clean sample; half of each set are positives.
pub fn synth_pairs<T: Scalar>(task: &SynthTask<T>, per_id: usize, count: usize, seed: u64) -> Result<PairSet<T>> {
    if per_id < 2 || task.spec.n_ids < 2 {
        return Err(Error::DegeneratePairs("need two samples per id and two ids".into()));
    }
    let (clean, ids) = task.holdout(per_id, seed);
    let masked = task.mask_rows(&clean);
    let n = clean.rows();
    let inputs = Matrix::vstack(&[clean, masked])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let n_ids = task.spec.n_ids;
    let mut pairs = Vec::with_capacity(2 * count);
    for masked in [false, true] {
        for k in 0..count {
            let same = k % 2 == 0;
            let (a, b) = if same {
                let id = rng.random_range(0..n_ids);
                let two = sample(&mut rng, per_id, 2);
                (id * per_id + two.index(0), id * per_id + two.index(1))
            } else {
                let two = sample(&mut rng, n_ids, 2);
                let (x, y) = (rng.random_range(0..per_id), rng.random_range(0..per_id));
                (two.index(0) * per_id + x, two.index(1) * per_id + y)
            };
            debug_assert_eq!(ids[a] == ids[b], same);
            let a = if masked { a + n } else { a };
            pairs.push(Pair { a, b, same, masked });
        }
    }
    Ok(PairSet { inputs, pairs })
}
