//! Synthetic identity task with planted label noise and a simple occlusion model.
//!
//! Every identity owns a random unit prototype; samples are noisy, renormalized
//! copies of it. Planted outliers are samples handed to the wrong label, and a
//! split identity has its samples spread over two labels.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::loss::normalize_in_place;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTaskSpec {
    pub n_ids: usize,
    pub samples_per_id: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub occlusion_fraction: f64,
    pub outlier_fraction: f64,
    pub split_id_count: usize,
    pub seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        Self {
            n_ids: 100,
            samples_per_id: 50,
            input_dim: 64,
            noise_sigma: 0.1,
            occlusion_fraction: 0.0,
            outlier_fraction: 0.0,
            split_id_count: 0,
            seed: 0,
        }
    }
}

impl SynthTaskSpec {
    /// The planted-noise cleaning benchmark: 100 ids × 50 samples, d = 64,
    /// σ = 0.1, 5% outliers and 5 split identities.
    pub fn cleaning_benchmark(seed: u64) -> Self {
        Self {
            outlier_fraction: 0.05,
            split_id_count: 5,
            seed,
            ..Self::default()
        }
    }

    /// The standard training task: 100 ids × 50 samples, input 128,
    /// σ = 0.15, masks hiding the trailing half of the input.
    pub fn training_standard(seed: u64) -> Self {
        Self {
            input_dim: 128,
            noise_sigma: 0.15,
            occlusion_fraction: 0.5,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.n_ids == 0 || self.samples_per_id == 0 || self.input_dim == 0 {
            return bad("n_ids, samples_per_id and input_dim must be positive".into());
        }
        for (name, f) in [
            ("occlusion_fraction", self.occlusion_fraction),
            ("outlier_fraction", self.outlier_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} = {f} outside [0, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma = {} must be a finite non-negative number", self.noise_sigma));
        }
        if self.split_id_count > self.n_ids {
            return bad(format!("cannot split {} of {} ids", self.split_id_count, self.n_ids));
        }
        if self.split_id_count > 0 && self.samples_per_id < 2 {
            return bad("split ids need at least two samples each".into());
        }
        if self.outlier_fraction > 0.0 && self.n_ids < 2 {
            return bad("outliers need a foreign id".into());
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_ids * self.samples_per_id
    }

    /// Number of trailing coordinates hidden by the mask; at least one stays visible.
    pub fn hidden_coords(&self) -> usize {
        let h = (self.occlusion_fraction * self.input_dim as f64).round() as usize;
        h.min(self.input_dim - 1)
    }
}

/// Bookkeeping of what the generator planted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseTruth {
    /// True identity of every sample.
    pub identity: Vec<usize>,
    /// Indices of samples whose label points to a foreign identity, ascending.
    pub outliers: Vec<usize>,
    /// `(original label, twin label)` for each split identity.
    pub split_pairs: Vec<(usize, usize)>,
}

impl NoiseTruth {
    pub fn is_outlier(&self) -> Vec<bool> {
        let mut flags = vec![false; self.identity.len()];
        for &i in &self.outliers {
            flags[i] = true;
        }
        flags
    }
}

#[derive(Debug, Clone)]
pub struct SynthTask<T> {
    pub spec: SynthTaskSpec,
    pub prototypes: Matrix<T>,
    pub dataset: EmbeddingDataset<T>,
    pub truth: NoiseTruth,
}

fn gaussian_unit<T: Scalar>(rng: &mut ChaCha8Rng, dim: usize) -> Vec<T> {
    loop {
        let mut v: Vec<T> = (0..dim)
            .map(|_| T::from_f64_lossy(rng.sample(StandardNormal)))
            .collect();
        if normalize_in_place(&mut v).is_some() {
            return v;
        }
    }
}

/// `normalize(prototype + N(0, σ²))`.
pub fn noisy_sample<T: Scalar>(rng: &mut ChaCha8Rng, prototype: &[T], sigma: f64) -> Vec<T> {
    loop {
        let mut v: Vec<T> = prototype
            .iter()
            .map(|&p| {
                let z: f64 = rng.sample(StandardNormal);
                p + T::from_f64_lossy(sigma * z)
            })
            .collect();
        if normalize_in_place(&mut v).is_some() {
            return v;
        }
    }
}

/// Zeroes the trailing `hidden` coordinates and renormalizes.
///
/// Falls back to the unmasked vector if every visible coordinate is zero.
pub fn mask_vector<T: Scalar>(x: &[T], hidden: usize) -> Vec<T> {
    if hidden == 0 {
        return x.to_vec();
    }
    let keep = x.len().saturating_sub(hidden);
    let mut v = x.to_vec();
    v[keep..].iter_mut().for_each(|c| *c = T::zero());
    match normalize_in_place(&mut v) {
        Some(_) => v,
        None => x.to_vec(),
    }
}

impl<T: Scalar> SynthTask<T> {
    pub fn generate(spec: &SynthTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.input_dim;
        let protos: Vec<T> = (0..spec.n_ids)
            .flat_map(|_| gaussian_unit::<T>(&mut rng, d))
            .collect();
        let prototypes = Matrix::from_vec(spec.n_ids, d, protos)?;

        let n = spec.n_samples();
        let mut data = Vec::with_capacity(n * d);
        let mut identity = Vec::with_capacity(n);
        for id in 0..spec.n_ids {
            for _ in 0..spec.samples_per_id {
                data.extend(noisy_sample(&mut rng, prototypes.row(id), spec.noise_sigma));
                identity.push(id);
            }
        }
        let features = Matrix::from_vec(n, d, data)?;
        let mut labels = identity.clone();

        // split ids: every second sample moves to a fresh twin label
        let mut split_ids = sample(&mut rng, spec.n_ids, spec.split_id_count).into_vec();
        split_ids.sort_unstable();
        let mut split_pairs = Vec::with_capacity(split_ids.len());
        for (j, &id) in split_ids.iter().enumerate() {
            let twin = spec.n_ids + j;
            split_pairs.push((id, twin));
            let base = id * spec.samples_per_id;
            for k in (1..spec.samples_per_id).step_by(2) {
                labels[base + k] = twin;
            }
        }
        let n_labels = spec.n_ids + split_ids.len();
        let label_identity: Vec<usize> = (0..n_labels)
            .map(|l| if l < spec.n_ids { l } else { split_ids[l - spec.n_ids] })
            .collect();

        let n_out = (spec.outlier_fraction * n as f64).round() as usize;
        let mut outliers = sample(&mut rng, n, n_out).into_vec();
        outliers.sort_unstable();
        for &i in &outliers {
            loop {
                let l = rng.random_range(0..n_labels);
                if label_identity[l] != identity[i] {
                    labels[i] = l;
                    break;
                }
            }
        }

        let dataset = EmbeddingDataset::new(features, labels, n_labels)?;
        Ok(Self {
            spec: spec.clone(),
            prototypes,
            dataset,
            truth: NoiseTruth {
                identity,
                outliers,
                split_pairs,
            },
        })
    }

    pub fn mask(&self, x: &[T]) -> Vec<T> {
        mask_vector(x, self.spec.hidden_coords())
    }

    /// Masked copy of every row of `m`.
    pub fn mask_rows(&self, m: &Matrix<T>) -> Matrix<T> {
        let hidden = self.spec.hidden_coords();
        let data: Vec<T> = m.iter_rows().flat_map(|r| mask_vector(r, hidden)).collect();
        Matrix::from_vec(m.rows(), m.cols(), data).expect("shape preserved")
    }

    /// Fresh samples of every identity drawn from an independent stream, labelled by identity.
    pub fn holdout(&self, per_id: usize, seed: u64) -> (Matrix<T>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut data = Vec::with_capacity(self.spec.n_ids * per_id * self.spec.input_dim);
        let mut ids = Vec::with_capacity(self.spec.n_ids * per_id);
        for id in 0..self.spec.n_ids {
            for _ in 0..per_id {
                data.extend(noisy_sample(&mut rng, self.prototypes.row(id), self.spec.noise_sigma));
                ids.push(id);
            }
        }
        let m = Matrix::from_vec(ids.len(), self.spec.input_dim, data).expect("shape");
        (m, ids)
    }
}
