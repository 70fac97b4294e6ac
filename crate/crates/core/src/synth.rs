//! Synthetic speaker/content features with planted identity columns.
//!
//! Each utterance is Gaussian noise plus a per-speaker signature on the
//! identity columns and a per-content-class signature on the content columns,
//! both constant over frames. The identity columns are therefore exactly the
//! positions that carry speaker information, which gives an oracle mask.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::sanitizer::PerturbationMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Inclusive frame-count range.
    pub t_range: (usize, usize),
    pub d: usize,
    pub identity_positions: Vec<usize>,
    pub content_positions: Vec<usize>,
    pub n_content_classes: usize,
    pub identity_strength: f64,
    pub content_strength: f64,
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers: 20,
            utterances_per_speaker: 80,
            t_range: (12, 24),
            d: 32,
            identity_positions: vec![2, 7, 13, 18, 24, 29],
            content_positions: vec![4, 10, 15, 21, 26, 31],
            n_content_classes: 4,
            identity_strength: 1.0,
            content_strength: 1.0,
            noise_floor: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let id: BTreeSet<usize> = self.identity_positions.iter().copied().collect();
        let ct: BTreeSet<usize> = self.content_positions.iter().copied().collect();
        if id.len() != self.identity_positions.len() || ct.len() != self.content_positions.len() {
            return Err(Error::contract("duplicate column in identity or content positions"));
        }
        if let Some(c) = id.intersection(&ct).next() {
            return Err(Error::contract(format!(
                "identity and content positions overlap at column {c}"
            )));
        }
        if id.iter().chain(&ct).any(|&c| c >= self.d) {
            return Err(Error::contract(format!("planted column outside 0..{}", self.d)));
        }
        if self.n_speakers < 4 {
            return Err(Error::contract(format!(
                "need at least 4 speakers, got {}",
                self.n_speakers
            )));
        }
        if self.utterances_per_speaker == 0 || self.n_content_classes == 0 {
            return Err(Error::contract(
                "utterances_per_speaker and n_content_classes must be positive",
            ));
        }
        let (lo, hi) = self.t_range;
        if lo == 0 || lo > hi {
            return Err(Error::contract(format!("bad frame range {:?}", self.t_range)));
        }
        if !(self.identity_strength >= 0.0 && self.content_strength >= 0.0 && self.noise_floor >= 0.0) {
            return Err(Error::contract("strengths and noise floor must be non-negative"));
        }
        Ok(())
    }

    /// Stable short digest of the configuration.
    pub fn digest(&self) -> String {
        crate::io::digest_json(self)
    }
}

/// Column statistics applied to every matrix: `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Population statistics over all frames of `xs`; zero-variance columns keep std 1.
    pub fn fit<'a>(xs: impl IntoIterator<Item = &'a Tensor> + Clone, d: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; d];
        for x in xs.clone() {
            for r in 0..x.rows() {
                for (m, v) in mean.iter_mut().zip(x.row(r)) {
                    *m += v;
                }
                n += 1;
            }
        }
        for m in &mut mean {
            *m /= n.max(1) as f64;
        }
        let mut var = vec![0.0; d];
        for x in xs {
            for r in 0..x.rows() {
                for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let v = s / n.max(1) as f64;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardization { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::matrix(x.rows(), d, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub x: Tensor,
    pub speaker: usize,
    pub content: Option<usize>,
}

/// Labeled utterances plus the generating configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub standardization: Standardization,
    pub utterances: Vec<Utterance>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speakers(&self) -> BTreeSet<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }

    pub fn speaker_samples(&self) -> Vec<Sample> {
        self.utterances
            .iter()
            .map(|u| Sample::new(u.x.clone(), u.speaker))
            .collect()
    }

    /// Samples labeled by content class; utterances without one are skipped.
    pub fn content_samples(&self) -> Vec<Sample> {
        self.utterances
            .iter()
            .filter_map(|u| u.content.map(|c| Sample::new(u.x.clone(), c)))
            .collect()
    }

    fn subset(&self, idx: &[usize]) -> SynthDataset {
        SynthDataset {
            config: self.config.clone(),
            standardization: self.standardization.clone(),
            utterances: idx.iter().map(|&i| self.utterances[i].clone()).collect(),
        }
    }
}

/// Draws the dataset and standardizes every column over the generated corpus.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut srng = rng::stream(cfg.seed, Purpose::Synth, 0);
    let id_sig: Vec<Vec<f64>> = (0..cfg.n_speakers)
        .map(|_| {
            cfg.identity_positions
                .iter()
                .map(|_| cfg.identity_strength * Distribution::<f64>::sample(&StandardNormal, &mut srng))
                .collect()
        })
        .collect();
    let ct_sig: Vec<Vec<f64>> = (0..cfg.n_content_classes)
        .map(|_| {
            cfg.content_positions
                .iter()
                .map(|_| cfg.content_strength * Distribution::<f64>::sample(&StandardNormal, &mut srng))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_floor).map_err(|e| Error::Config(e.to_string()))?;

    let mut raw = Vec::with_capacity(cfg.n_speakers * cfg.utterances_per_speaker);
    for (spk, sig) in id_sig.iter().enumerate() {
        for u in 0..cfg.utterances_per_speaker {
            let index = (spk * cfg.utterances_per_speaker + u) as u64;
            let mut r = rng::stream(cfg.seed, Purpose::Synth, index + 1);
            let t = r.random_range(cfg.t_range.0..=cfg.t_range.1);
            let content = r.random_range(0..cfg.n_content_classes);
            let mut data: Vec<f64> = (0..t * cfg.d).map(|_| noise.sample(&mut r)).collect();
            for row in data.chunks_mut(cfg.d) {
                for (j, &c) in cfg.identity_positions.iter().enumerate() {
                    row[c] += sig[j];
                }
                for (j, &c) in cfg.content_positions.iter().enumerate() {
                    row[c] += ct_sig[content][j];
                }
            }
            raw.push(Utterance {
                id: format!("spk{spk:03}-utt{u:03}"),
                x: Tensor::matrix(t, cfg.d, data),
                speaker: spk,
                content: Some(content),
            });
        }
    }
    let standardization = Standardization::fit(raw.iter().map(|u| &u.x), cfg.d);
    for u in &mut raw {
        u.x = standardization.apply(&u.x);
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        standardization,
        utterances: raw,
    })
}

/// True on every frame of every planted identity column.
pub fn oracle_sensitive_mask(cfg: &SynthConfig, t: usize, d: usize) -> Result<PerturbationMask> {
    if d != cfg.d {
        return Err(Error::dim("oracle mask", &[cfg.d], &[d]));
    }
    let cols: BTreeSet<usize> = cfg.identity_positions.iter().copied().collect();
    let flags = (0..t).flat_map(|_| (0..d).map(|c| cols.contains(&c))).collect();
    PerturbationMask::from_bools(t, d, flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Partitions share no speaker.
    SpeakerDisjoint,
    /// Each speaker's utterances are divided across partitions.
    Utterance,
}

fn partition_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    // largest-remainder rounding so sizes always add up to n
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    sizes
}

/// Seeded partition of `dataset` by `fractions`, which must sum to 1.
pub fn split(dataset: &SynthDataset, fractions: &[f64], mode: SplitMode, seed: u64) -> Result<Vec<SynthDataset>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Split, 2);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, u) in dataset.utterances.iter().enumerate() {
        by_speaker.entry(u.speaker).or_default().push(i);
    }
    match mode {
        SplitMode::SpeakerDisjoint => {
            let mut speakers: Vec<usize> = by_speaker.keys().copied().collect();
            speakers.shuffle(&mut rng);
            let sizes = partition_sizes(speakers.len(), fractions);
            let mut it = speakers.into_iter();
            for (part, &n) in parts.iter_mut().zip(&sizes) {
                for spk in it.by_ref().take(n) {
                    part.extend_from_slice(&by_speaker[&spk]);
                }
            }
        }
        SplitMode::Utterance => {
            for idx in by_speaker.values_mut() {
                idx.shuffle(&mut rng);
                let mut sizes = partition_sizes(idx.len(), fractions);
                // every speaker appears in every non-empty-fraction partition when it has enough utterances
                for i in 0..sizes.len() {
                    if sizes[i] == 0 && fractions[i] > 0.0 {
                        let donor = (0..sizes.len())
                            .max_by_key(|&j| (sizes[j], usize::MAX - j))
                            .expect("non-empty");
                        if sizes[donor] > 1 {
                            sizes[donor] -= 1;
                            sizes[i] += 1;
                        }
                    }
                }
                let mut it = idx.iter();
                for (part, &n) in parts.iter_mut().zip(&sizes) {
                    part.extend(it.by_ref().take(n));
                }
            }
        }
    }
    Ok(parts
        .into_iter()
        .map(|mut p| {
            p.sort_unstable();
            dataset.subset(&p)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_speakers: 6,
            utterances_per_speaker: 5,
            t_range: (3, 6),
            ..Default::default()
        }
    }

    #[test]
    fn overlapping_planted_columns_rejected() {
        let cfg = SynthConfig {
            content_positions: vec![2, 3],
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.len(), 30);
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert!(x.x.bit_eq(&y.x));
            assert_eq!((x.speaker, x.content), (y.speaker, y.content));
        }
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert!(
            !a.utterances[0].x.bit_eq(&c.utterances[0].x) || a.utterances[0].x.shape() != c.utterances[0].x.shape()
        );
    }

    #[test]
    fn oracle_mask_counts() {
        let cfg = SynthConfig::default();
        let m = oracle_sensitive_mask(&cfg, 10, 32).unwrap();
        assert_eq!(m.count_selected(), 60);
        let other = oracle_sensitive_mask(
            &SynthConfig {
                seed: 99,
                ..cfg.clone()
            },
            10,
            32,
        )
        .unwrap();
        assert_eq!(m, other);
        for r in 0..10 {
            for &c in &cfg.content_positions {
                assert!(!m.is_selected(r, c));
            }
        }
    }

    #[test]
    fn speaker_disjoint_split() {
        let ds = generate(&SynthConfig::default()).unwrap();
        let parts = split(&ds, &[0.4, 0.6], SplitMode::SpeakerDisjoint, 3).unwrap();
        let (a, b) = (parts[0].speakers(), parts[1].speakers());
        assert_eq!((a.len(), b.len()), (8, 12));
        assert!(a.is_disjoint(&b));
        let again = split(&ds, &[0.4, 0.6], SplitMode::SpeakerDisjoint, 3).unwrap();
        assert_eq!(parts[0].speakers(), again[0].speakers());
    }

    #[test]
    fn utterance_split_keeps_all_speakers() {
        let ds = generate(&small()).unwrap();
        let parts = split(&ds, &[0.9, 0.1], SplitMode::Utterance, 1).unwrap();
        assert_eq!(parts[0].speakers(), ds.speakers());
        assert_eq!(parts[1].speakers(), ds.speakers());
        assert_eq!(parts[0].len() + parts[1].len(), ds.len());
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let ds = generate(&small()).unwrap();
        assert!(split(&ds, &[0.5, 0.4], SplitMode::Utterance, 0).is_err());
    }
}
