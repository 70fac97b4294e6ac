use std::collections::BTreeSet;

use rand::Rng;

use rshd::eval::{cosine, eval_utility};
use rshd::nn::{
    embed, train_classifier, train_embedder, train_pse, train_sid, PooledClassifier, PseConfig, TrainConfig,
};
use rshd::rng::{self, Purpose};
use rshd::saliency::{build_saliency_dataset, smoothgrad, SmoothGradConfig};
use rshd::sanitizer::{sanitize_pipeline, SanitizerConfig, SelectionMode};
use rshd::synth::{generate, split, SplitMode, SynthConfig};
use rshd::Tensor;

fn small_corpus() -> SynthConfig {
    SynthConfig {
        n_speakers: 8,
        utterances_per_speaker: 30,
        t_range: (8, 12),
        ..SynthConfig::default()
    }
}

#[test]
fn pse_learns_saliency_maps() {
    let ds = generate(&small_corpus()).unwrap();
    let samples = ds.speaker_samples();
    let (sid, _) = train_sid(&samples, 8, &TrainConfig::default()).unwrap();
    let sal = build_saliency_dataset(&samples, &sid, &SmoothGradConfig::default(), "probe").unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        epochs: 15,
        ..TrainConfig::full_scale_pse()
    };
    let (_, report) = train_pse(&sal, &PseConfig::desk(32), &tc).unwrap();
    // the untrained estimator predicts zeros everywhere
    assert!(
        report.best_val_loss < 0.8 * report.initial_val_loss,
        "{} vs {}",
        report.best_val_loss,
        report.initial_val_loss
    );
}

#[test]
fn embeddings_separate_speakers() {
    let ds = generate(&small_corpus()).unwrap();
    let parts = split(&ds, &[0.6, 0.4], SplitMode::Utterance, 2).unwrap();
    let tc = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let (m, _) = train_embedder(&parts[0].speaker_samples(), &BTreeSet::new(), 32, 16, &tc).unwrap();
    let held: Vec<(Vec<f64>, usize)> = parts[1]
        .utterances
        .iter()
        .map(|u| (embed(&m, &u.x).unwrap(), u.speaker))
        .collect();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
    for (i, (a, sa)) in held.iter().enumerate() {
        for (b, sb) in &held[i + 1..] {
            if sa == sb {
                intra += cosine(a, b);
                ni += 1;
            } else {
                inter += cosine(a, b);
                nx += 1;
            }
        }
    }
    let (intra, inter) = (intra / ni as f64, inter / nx as f64);
    assert!(intra > inter + 0.3, "intra {intra} inter {inter}");
}

#[test]
fn heavy_noise_destroys_utility() {
    let cfg = small_corpus();
    let ds = generate(&cfg).unwrap();
    let samples = ds.content_samples();
    let (clf, _) = train_classifier(&samples, cfg.n_content_classes, &TrainConfig::default()).unwrap();
    let chance = 1.0 / cfg.n_content_classes as f64;
    let clean = eval_utility(&clf, &samples, |_, x| Ok(x.clone())).unwrap();
    let san = SanitizerConfig {
        k_percent: 100.0,
        eps_priv: 0.1,
        selection_mode: SelectionMode::Random,
        ..SanitizerConfig::default()
    };
    let noisy = eval_utility(&clf, &samples, |i, x| sanitize_pipeline(x, None, &san, i as u64)).unwrap();
    assert!(clean > 0.9, "clean {clean}");
    assert!(noisy <= chance + 0.1, "noisy {noisy} vs chance {chance}");
}

#[test]
fn saliency_is_non_negative() {
    let mut r = rng::stream(1, Purpose::Probe, 0);
    for i in 0..100 {
        let (t, d, classes) = (r.random_range(1..10), r.random_range(1..10), r.random_range(2..6));
        let m = PooledClassifier::random(d, classes, i);
        let x = Tensor::matrix(t, d, (0..t * d).map(|_| r.random_range(-3.0..3.0)).collect());
        let cfg = SmoothGradConfig {
            n_samples: 4,
            sigma: 0.5,
            seed: i,
        };
        let s = smoothgrad(&m, &x, i as usize % classes, &cfg, i).unwrap();
        assert_eq!(s.values().shape(), x.shape());
        assert!(s.values().data().iter().all(|v| *v >= 0.0 && v.is_finite()));
    }
}
