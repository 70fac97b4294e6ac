use proptest::prelude::*;

use rshd::rng::{self, Purpose};
use rshd::sanitizer::{
    laplace_sample, sanitize, sanitize_pipeline, select_random, select_topk, selection_count, PerturbationMask,
    SanitizerConfig, SelectionMode,
};
use rshd::Tensor;

fn laplace_cdf(x: f64, b: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / b).exp()
    } else {
        1.0 - 0.5 * (-x / b).exp()
    }
}

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

fn variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

#[test]
fn laplace_matches_its_distribution() {
    for (eps, b) in [(4.0, 0.5), (1.0, 2.0)] {
        assert_eq!(rshd::sanitizer::laplace_scale(eps), b);
        let mut r = rng::stream(11, Purpose::Noise, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| laplace_sample(b, &mut r)).collect();
        let (_, var) = variance(&xs);
        assert!((var / (2.0 * b * b) - 1.0).abs() < 0.05, "b={b}: variance {var}");
        let ks = ks_statistic(xs, |x| laplace_cdf(x, b));
        assert!(ks < 0.01, "b={b}: KS {ks}");
    }
}

#[test]
fn full_mask_noise_moments() {
    // clipping 0 is a no-op, so the output is the noise itself
    let x = Tensor::zeros(1000, 1000);
    let mask = select_topk(&x, 100.0).unwrap();
    let cfg = SanitizerConfig {
        k_percent: 100.0,
        eps_priv: 1.0,
        ..SanitizerConfig::default()
    };
    let y = sanitize(&x, &mask, &cfg, &mut rng::stream(3, Purpose::Noise, 0)).unwrap();
    let (mean, var) = variance(y.data());
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var / 8.0 - 1.0).abs() < 0.05, "variance {var}");
}

#[test]
fn cardinality_on_reference_shapes() {
    for (t, d) in [(10, 8), (33, 7), (1, 768)] {
        let x = Tensor::matrix(t, d, (0..t * d).map(|i| ((i * 7919) % 1013) as f64).collect());
        for k in 0..=100 {
            let want = (k as f64 / 100.0 * (t * d) as f64).round_ties_even() as usize;
            assert_eq!(selection_count(t * d, k as f64), want);
            assert_eq!(
                select_topk(&x, k as f64).unwrap().count_selected(),
                want,
                "{t}x{d} k={k}"
            );
            assert_eq!(select_random(t, d, k as f64, k).unwrap().count_selected(), want);
        }
    }
}

#[test]
fn random_selection_is_uniform() {
    let mut hits = [0usize; 50];
    let draws = 10_000;
    for s in 0..draws {
        let m = select_random(5, 10, 20.0, s).unwrap();
        for (h, &sel) in hits.iter_mut().zip(m.as_slice()) {
            *h += sel as usize;
        }
    }
    for h in hits {
        let f = h as f64 / draws as f64;
        assert!((f - 0.2).abs() < 0.02, "frequency {f}");
    }
}

#[test]
fn pipeline_k_zero_is_identity() {
    let x = Tensor::matrix(9, 4, (0..36).map(|i| (i as f64 * 1.3).sin() * 3.0).collect());
    for eps in [0.1, 1.0, 8.0] {
        let cfg = SanitizerConfig {
            k_percent: 0.0,
            eps_priv: eps,
            selection_mode: SelectionMode::Random,
            ..SanitizerConfig::default()
        };
        assert!(sanitize_pipeline(&x, None, &cfg, 5).unwrap().bit_eq(&x));
    }
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..12, 1usize..12)
        .prop_flat_map(|(t, d)| prop::collection::vec(-5.0f64..5.0, t * d).prop_map(move |v| Tensor::matrix(t, d, v)))
}

proptest! {
    #[test]
    fn unselected_positions_are_untouched(x in tensor_strategy(), k in 0.0f64..=100.0, seed in any::<u64>()) {
        let mask = select_random(x.rows(), x.cols(), k, seed).unwrap();
        let cfg = SanitizerConfig { k_percent: k, ..SanitizerConfig::default() };
        let y = sanitize(&x, &mask, &cfg, &mut rng::stream(seed, Purpose::Noise, 0)).unwrap();
        for (i, (a, b)) in x.data().iter().zip(y.data()).enumerate() {
            if !mask.as_slice()[i] {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn topk_picks_the_largest_scores(x in tensor_strategy(), k in 0.0f64..=100.0) {
        let m = select_topk(&x, k).unwrap();
        let sel = |want: bool| x.data().iter().zip(m.as_slice()).filter(move |(_, &s)| s == want).map(|(v, _)| *v);
        let lowest_selected = sel(true).fold(f64::INFINITY, f64::min);
        let highest_unselected = sel(false).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lowest_selected >= highest_unselected);
        prop_assert_eq!(m.count_selected(), selection_count(x.numel(), k));
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 1..64), seed in any::<u64>()) {
        let n = a.len();
        let b = select_random(1, n, 50.0, seed).unwrap();
        let a = PerturbationMask::from_bools(1, n, a).unwrap();
        let j = a.jaccard(&b);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, b.jaccard(&a));
        prop_assert_eq!(a.jaccard(&a), 1.0);
    }
}
