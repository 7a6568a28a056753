use std::time::Instant;

use fgovd_core::composer::WeightTriplet;
use fgovd_core::embedding::Embedding;
use fgovd_core::fitter::{fit_batch, fit_loss, grad_triplet, FitConfig, FitSample, Objective, LOGIT_SCALE};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_embedding(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    Embedding::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_batch(rng: &mut ChaCha8Rng) -> Vec<FitSample> {
    let dim = rng.random_range(2..=16);
    let n = rng.random_range(2..=24);
    let mut batch: Vec<FitSample> = (0..n)
        .map(|i| {
            let region = random_embedding(rng, dim);
            let global = Embedding::new(
                region
                    .values()
                    .iter()
                    .map(|v| v + rng.random_range(-0.8..0.8))
                    .collect(),
            );
            FitSample {
                attri: random_embedding(rng, dim),
                global,
                skip: rng.random_bool(0.1),
                region,
                positive: i % 3 == 0,
            }
        })
        .collect();
    batch[0].positive = true;
    batch[1].positive = false;
    batch
}

fn random_objective(rng: &mut ChaCha8Rng, case: usize) -> Objective {
    let scale = if case.is_multiple_of(2) { LOGIT_SCALE } else { 10.0 };
    Objective::new(rng.random_range(0.0..0.1), scale, rng.random_range(-scale..0.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-6;
    for case in 0..100 {
        let batch = random_batch(&mut rng);
        let obj = random_objective(&mut rng, case);
        let t = WeightTriplet::new(
            rng.random_range(0.5..1.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.1..0.1),
        );
        let analytic = grad_triplet(&t, &batch, &obj);
        let numeric: Vec<f64> = (0..3)
            .map(|i| {
                let mut up = t.as_array();
                let mut down = t.as_array();
                up[i] += h;
                down[i] -= h;
                let f = |a: [f64; 3]| fit_loss(&WeightTriplet::from_array(a), &batch, &obj);
                (f(up) - f(down)) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        assert!(rel < 1e-4, "case {case}: analytic {analytic:?} numeric {numeric:?} rel {rel:e}");
    }
    assert!(started.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn skip_samples_have_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut batch = random_batch(&mut rng);
    batch.iter_mut().for_each(|s| s.skip = true);
    let g = grad_triplet(&WeightTriplet::new(0.9, 0.3, 0.05), &batch, &Objective::default());
    assert_eq!(g, [0.0; 3]);
}

#[test]
fn fitting_never_increases_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let batch = random_batch(&mut rng);
        let cfg = FitConfig {
            epochs: 30,
            ..FitConfig::default()
        };
        let trace = fit_batch(&batch, &cfg).unwrap();
        let mut prev = trace.initial_loss;
        for &loss in &trace.losses {
            assert!(loss <= prev, "{loss} > {prev}");
            prev = loss;
        }
        assert_eq!(trace.losses.len(), cfg.epochs);
        assert!(trace.final_triplet.is_finite());
    }
}

#[test]
fn fit_ignores_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = random_batch(&mut rng);
    let mut shuffled = batch.clone();
    shuffled.shuffle(&mut rng);
    let cfg = FitConfig {
        epochs: 25,
        ..FitConfig::default()
    };
    let a = fit_batch(&batch, &cfg).unwrap();
    let b = fit_batch(&shuffled, &cfg).unwrap();
    assert_eq!(a.final_triplet, b.final_triplet);
    assert_eq!(a.losses, b.losses);
}

#[test]
fn single_label_batch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut batch = random_batch(&mut rng);
    batch.iter_mut().for_each(|s| s.positive = false);
    assert!(fit_batch(&batch, &FitConfig::default()).is_err());
    assert!(fit_batch(&[], &FitConfig::default()).is_err());
}

#[test]
fn invalid_config_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = random_batch(&mut rng);
    for cfg in [
        FitConfig {
            learning_rate: 0.0,
            ..FitConfig::default()
        },
        FitConfig {
            l2: -1.0,
            ..FitConfig::default()
        },
        FitConfig {
            init: WeightTriplet::new(f64::NAN, 0.0, 0.0),
            ..FitConfig::default()
        },
    ] {
        assert!(fit_batch(&batch, &cfg).is_err());
    }
}
