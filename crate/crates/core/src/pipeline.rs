//! Stage functions shared by the command line driver and the test suites.
//!
//! Data layout on the synthetic benchmark: the speakers are split into a
//! SID partition (SID model, saliency maps, PSE, utility classifier) and a
//! disjoint ASV partition, whose utterances are split again into embedder
//! training data and the evaluation set that gets sanitized.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{make_trials, run_sweep, SweepGrid, SweepHandles, UtilityTask, VerificationTrial};
use crate::nn::{
    train_classifier, train_embedder, train_pse, train_sid, ClassifierModel, EmbedderModel, PseConfig, PseModel,
    SidModel, TrainConfig, TrainReport,
};
use crate::rng::derive_seed;
use crate::saliency::{build_saliency_dataset, SaliencyDataset, SmoothGradConfig};
use crate::sanitizer::SelectionMode;
use crate::synth::{generate, split, SplitMode, SynthConfig, SynthDataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    /// Fraction of speakers in the SID partition.
    pub sid_fraction: f64,
    /// Fraction of each ASV speaker's utterances used to train the embedder.
    pub embedder_fraction: f64,
    pub sid: TrainConfig,
    pub classifier: TrainConfig,
    pub embedder: TrainConfig,
    pub embedder_hidden: usize,
    pub embedder_dim: usize,
    /// `sigma` is relative to the feature standard deviation.
    pub smoothgrad: SmoothGradConfig,
    pub pse: PseConfig,
    pub pse_train: TrainConfig,
    pub n_trials: usize,
    pub clip_bound: f64,
    pub k_list: Vec<f64>,
    pub eps_list: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        PipelineConfig {
            pse: PseConfig::desk(synth.d),
            synth,
            sid_fraction: 0.4,
            embedder_fraction: 0.5,
            sid: TrainConfig::default(),
            classifier: TrainConfig::default(),
            embedder: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            embedder_hidden: 64,
            embedder_dim: 32,
            smoothgrad: SmoothGradConfig::default(),
            pse_train: TrainConfig::full_scale_pse(),
            n_trials: 20000,
            clip_bound: 1.0,
            k_list: vec![20.0, 40.0, 60.0, 80.0, 100.0],
            eps_list: vec![0.5, 1.0, 2.0, 4.0, 8.0],
        }
    }
}

impl PipelineConfig {
    /// Replaces every stage seed with one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.sid.seed = derive_seed(seed, "train-sid");
        self.classifier.seed = derive_seed(seed, "train-classifier");
        self.embedder.seed = derive_seed(seed, "train-embedder");
        self.smoothgrad.seed = derive_seed(seed, "build-saliency");
        self.pse_train.seed = derive_seed(seed, "train-pse");
        self
    }

    pub fn seed(&self) -> u64 {
        self.synth.seed
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed(), "split")
    }

    pub fn trial_seed(&self) -> u64 {
        derive_seed(self.seed(), "trials")
    }

    pub fn sanitize_seed(&self) -> u64 {
        derive_seed(self.seed(), "sanitize")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))?;
        for t in [&self.sid, &self.classifier, &self.embedder, &self.pse_train] {
            t.validate()?;
        }
        self.pse.validate()?;
        if self.pse.d != self.synth.d {
            return Err(Error::Config(format!(
                "pse.d {} differs from synth.d {}",
                self.pse.d, self.synth.d
            )));
        }
        for f in [self.sid_fraction, self.embedder_fraction] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("split fraction {f} must lie in (0, 1)")));
            }
        }
        if self.n_trials < 2 || self.embedder_hidden == 0 || self.embedder_dim == 0 {
            return Err(Error::Config(
                "n_trials, embedder_hidden and embedder_dim must be positive".into(),
            ));
        }
        if !(self.clip_bound > 0.0 && self.clip_bound.is_finite()) {
            return Err(Error::Config(format!(
                "clip_bound {} must be positive",
                self.clip_bound
            )));
        }
        if self.k_list.iter().any(|k| !(0.0..=100.0).contains(k)) || self.eps_list.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config(
                "k values must lie in [0, 100] and eps values be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        crate::io::digest_json(self)
    }
}

/// The generated corpus and its three partitions.
#[derive(Debug, Clone)]
pub struct Partitions {
    pub all: SynthDataset,
    pub sid: SynthDataset,
    pub asv_train: SynthDataset,
    pub asv_eval: SynthDataset,
}

pub fn generate_partitions(cfg: &PipelineConfig) -> Result<Partitions> {
    let all = generate(&cfg.synth)?;
    let seed = cfg.split_seed();
    let mut parts = split(
        &all,
        &[cfg.sid_fraction, 1.0 - cfg.sid_fraction],
        SplitMode::SpeakerDisjoint,
        seed,
    )?;
    let asv = parts.pop().expect("two parts");
    let sid = parts.pop().expect("two parts");
    let mut asv_parts = split(
        &asv,
        &[cfg.embedder_fraction, 1.0 - cfg.embedder_fraction],
        SplitMode::Utterance,
        seed.wrapping_add(1),
    )?;
    let asv_eval = asv_parts.pop().expect("two parts");
    let asv_train = asv_parts.pop().expect("two parts");
    Ok(Partitions {
        all,
        sid,
        asv_train,
        asv_eval,
    })
}

/// Speaker-labeled samples with labels renumbered `0..n`; returns the
/// original speaker id of each class.
pub fn contiguous_speakers(samples: &[Sample]) -> (Vec<Sample>, Vec<usize>) {
    let speakers: Vec<usize> = samples
        .iter()
        .map(|s| s.label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let remapped = samples
        .iter()
        .map(|s| Sample::new(s.x.clone(), speakers.binary_search(&s.label).expect("present")))
        .collect();
    (remapped, speakers)
}

/// Renumbers speaker labels with an existing class map.
pub fn apply_speaker_map(samples: &[Sample], speakers: &[usize]) -> Result<Vec<Sample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| match speakers.binary_search(&s.label) {
            Ok(c) => Ok(Sample::new(s.x.clone(), c)),
            Err(_) => Err(Error::at_sample(
                i,
                Error::contract(format!("speaker {} is unknown to the SID model", s.label)),
            )),
        })
        .collect()
}

pub struct SidStage {
    pub model: SidModel,
    pub report: TrainReport,
    /// Original speaker id for each SID class.
    pub speakers: Vec<usize>,
}

pub fn stage_train_sid(cfg: &PipelineConfig, samples: &[Sample]) -> Result<SidStage> {
    let (remapped, speakers) = contiguous_speakers(samples);
    let (model, report) = train_sid(&remapped, speakers.len(), &cfg.sid)?;
    Ok(SidStage {
        model,
        report,
        speakers,
    })
}

pub fn stage_build_saliency(
    cfg: &PipelineConfig,
    samples: &[Sample],
    sid: &SidModel,
    speakers: &[usize],
    sid_checkpoint: &str,
) -> Result<SaliencyDataset> {
    let remapped = apply_speaker_map(samples, speakers)?;
    build_saliency_dataset(&remapped, sid, &cfg.smoothgrad, sid_checkpoint)
}

pub fn stage_train_pse(cfg: &PipelineConfig, saliency: &SaliencyDataset) -> Result<(PseModel, TrainReport)> {
    train_pse(saliency, &cfg.pse, &cfg.pse_train)
}

pub fn stage_train_embedder(
    cfg: &PipelineConfig,
    samples: &[Sample],
    sid_speakers: &BTreeSet<usize>,
) -> Result<(EmbedderModel, TrainReport)> {
    train_embedder(
        samples,
        sid_speakers,
        cfg.embedder_hidden,
        cfg.embedder_dim,
        &cfg.embedder,
    )
}

pub fn stage_train_classifier(
    cfg: &PipelineConfig,
    content_samples: &[Sample],
) -> Result<(ClassifierModel, TrainReport)> {
    train_classifier(content_samples, cfg.synth.n_content_classes, &cfg.classifier)
}

/// Frozen models plus the evaluation utterances.
pub struct EvalSet<'a> {
    pub pse: Option<&'a PseModel>,
    pub embedder: &'a EmbedderModel,
    pub classifier: &'a ClassifierModel,
    pub utterances: Vec<Tensor>,
    pub speakers: Vec<usize>,
    pub contents: Vec<usize>,
}

impl<'a> EvalSet<'a> {
    pub fn trials(&self, cfg: &PipelineConfig) -> Result<Vec<VerificationTrial>> {
        make_trials(&self.speakers, cfg.n_trials, cfg.trial_seed())
    }

    pub fn handles<'b>(&'b self, cfg: &PipelineConfig, trials: &'b [VerificationTrial]) -> SweepHandles<'b> {
        SweepHandles {
            pse: self.pse,
            embedder: self.embedder,
            utterances: &self.utterances,
            trials,
            tasks: vec![UtilityTask {
                name: "content".into(),
                classifier: self.classifier,
                labels: self.contents.clone(),
            }],
            clip_bound: cfg.clip_bound,
            seed: cfg.sanitize_seed(),
        }
    }

    pub fn sweep(&self, cfg: &PipelineConfig, modes: &[SelectionMode]) -> Result<SweepGrid> {
        let trials = self.trials(cfg)?;
        let mut grid = run_sweep(&cfg.k_list, &cfg.eps_list, modes, &self.handles(cfg, &trials))?;
        grid.provenance = vec![
            ("seed".into(), cfg.seed().to_string()),
            ("config_digest".into(), cfg.digest()),
        ];
        Ok(grid)
    }
}

/// Evaluation inputs from a labeled synthetic partition.
pub fn eval_inputs(ds: &SynthDataset) -> Result<(Vec<Tensor>, Vec<usize>, Vec<usize>)> {
    let mut xs = Vec::with_capacity(ds.len());
    let mut speakers = Vec::with_capacity(ds.len());
    let mut contents = Vec::with_capacity(ds.len());
    for u in &ds.utterances {
        let c = u
            .content
            .ok_or_else(|| Error::contract(format!("utterance {} has no content label", u.id)))?;
        xs.push(u.x.clone());
        speakers.push(u.speaker);
        contents.push(c);
    }
    Ok((xs, speakers, contents))
}

/// Every model of one pipeline run.
pub struct Trained {
    pub partitions: Partitions,
    pub sid: SidStage,
    pub saliency: SaliencyDataset,
    pub pse: PseModel,
    pub pse_report: TrainReport,
    pub embedder: EmbedderModel,
    pub classifier: ClassifierModel,
}

impl Trained {
    pub fn eval_set(&self) -> Result<EvalSet<'_>> {
        let (utterances, speakers, contents) = eval_inputs(&self.partitions.asv_eval)?;
        Ok(EvalSet {
            pse: Some(&self.pse),
            embedder: &self.embedder,
            classifier: &self.classifier,
            utterances,
            speakers,
            contents,
        })
    }
}

/// Runs every training stage in memory.
pub fn train_all(cfg: &PipelineConfig) -> Result<Trained> {
    cfg.validate()?;
    let partitions = generate_partitions(cfg)?;
    let sid_samples = partitions.sid.speaker_samples();
    let sid = stage_train_sid(cfg, &sid_samples)?;
    let sid_id = crate::io::digest_json(&sid.speakers);
    let saliency = stage_build_saliency(cfg, &sid_samples, &sid.model, &sid.speakers, &sid_id)?;
    let (pse, pse_report) = stage_train_pse(cfg, &saliency)?;
    let sid_set: BTreeSet<usize> = sid.speakers.iter().copied().collect();
    let (embedder, _) = stage_train_embedder(cfg, &partitions.asv_train.speaker_samples(), &sid_set)?;
    let (classifier, _) = stage_train_classifier(cfg, &partitions.sid.content_samples())?;
    Ok(Trained {
        partitions,
        sid,
        saliency,
        pse,
        pse_report,
        embedder,
        classifier,
    })
}
