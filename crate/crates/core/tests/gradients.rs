use facescale::loss::loss_grad;
use facescale::{LossConfig, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-6;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn loss(f: &Matrix<f64>, w: &Matrix<f64>, y: &[usize], cfg: &LossConfig) -> f64 {
    loss_grad(f, w, y, cfg).unwrap().loss
}

/// Worst `|fd − analytic| / max(|fd|, |analytic|, floor)` over every parameter.
fn worst_relative_error(seed: u64, cfg: &LossConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, d) = (rng.random_range(1..6), rng.random_range(2..9), rng.random_range(2..7));
    let f = gaussian(&mut rng, n, d);
    let w = gaussian(&mut rng, c, d);
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let g = loss_grad(&f, &w, &y, cfg).unwrap();
    let mut worst = 0.0f64;
    for which in 0..2 {
        let (base, an) = if which == 0 { (&f, &g.d_features) } else { (&w, &g.d_weights) };
        for k in 0..base.as_slice().len() {
            let bump = |delta: f64| {
                let mut m = base.clone();
                m.as_mut_slice()[k] += delta;
                if which == 0 {
                    loss(&m, &w, &y, cfg)
                } else {
                    loss(&f, &m, &y, cfg)
                }
            };
            let fd = (bump(H) - bump(-H)) / (2.0 * H);
            let a = an.as_slice()[k];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
        }
    }
    worst
}

#[test]
fn margin_gradients_match_finite_differences() {
    for seed in 0..100 {
        for cfg in [LossConfig::cosface(0.35, 30.0), LossConfig::arcface(0.5, 30.0)] {
            let e = worst_relative_error(seed, &cfg);
            assert!(e <= 1e-4, "seed {seed} {:?}: {e:e}", cfg.kind);
        }
    }
}

#[test]
fn plain_softmax_gradients_match_finite_differences() {
    for seed in 0..20 {
        let e = worst_relative_error(seed, &LossConfig::plain(16.0));
        assert!(e <= 1e-4, "seed {seed}: {e:e}");
    }
}
