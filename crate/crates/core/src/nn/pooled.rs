use std::collections::BTreeSet;

use crate::autodiff::{Graph, Var};
use crate::data::{common_dim, stratified_split, Sample};
use crate::error::{Error, Result};
use crate::nn::layers::{bind, linear, push_dense, Model};
use crate::nn::train::{fit, TrainConfig, TrainReport};
use crate::optim::ParamSet;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Mean pooling over time followed by one fully-connected layer `d -> classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledClassifier {
    d: usize,
    classes: usize,
    params: ParamSet,
}

/// Speaker identification model whose input gradients define privacy risk.
pub type SidModel = PooledClassifier;
/// Utility-task head trained on clean features.
pub type ClassifierModel = PooledClassifier;

impl PooledClassifier {
    /// Zero-initialized: the objective is convex, and weights on columns that
    /// carry no class signal then stay near zero instead of keeping their
    /// random start, which would leak into input-gradient saliency.
    pub fn new(d: usize, classes: usize) -> Self {
        let mut params = ParamSet::new();
        params.push("fc.weight", Tensor::zeros(d, classes));
        params.push("fc.bias", Tensor::zeros(1, classes));
        PooledClassifier { d, classes, params }
    }

    /// Glorot-initialized weights, for probing untrained models.
    pub fn random(d: usize, classes: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        push_dense(&mut params, &mut rng::stream(seed, Purpose::Init, 0), "fc", d, classes);
        PooledClassifier { d, classes, params }
    }

    pub fn from_params(d: usize, classes: usize, params: ParamSet) -> Result<Self> {
        PooledClassifier::new(d, classes).params.check_layout(&params)?;
        Ok(PooledClassifier { d, classes, params })
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    /// Logits `1 x classes` for `x: t x d`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let d = g.value(x).cols();
        if d != self.d {
            return Err(Error::dim("pooled classifier input", &[self.d], g.value(x).shape()));
        }
        let pooled = g.mean_pool_time(x)?;
        linear(g, pooled, p[0], p[1])
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = bind(&mut g, &self.params, false)?;
        let xv = g.constant(x.clone())?;
        let z = self.forward(&mut g, &p, xv)?;
        Ok(g.value(z).data().to_vec())
    }
}

impl Model for PooledClassifier {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Index of the largest logit (lowest index on ties).
pub fn classify(model: &PooledClassifier, x: &Tensor) -> Result<usize> {
    let z = model.logits(x)?;
    Ok(argmax(&z))
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

fn train_pooled(
    dataset: &[Sample],
    num_classes: usize,
    cfg: &TrainConfig,
    what: &str,
) -> Result<(PooledClassifier, TrainReport)> {
    let distinct: BTreeSet<usize> = dataset.iter().map(|s| s.label).collect();
    if distinct.len() < 2 {
        return Err(Error::contract(format!(
            "{what} training needs at least 2 classes, found {}",
            distinct.len()
        )));
    }
    if let Some(bad) = dataset.iter().find(|s| s.label >= num_classes) {
        return Err(Error::contract(format!(
            "label {} out of range for {num_classes} classes",
            bad.label
        )));
    }
    let d = common_dim(dataset.iter().map(|s| &s.x))?.expect("non-empty");
    let labels: Vec<usize> = dataset.iter().map(|s| s.label).collect();
    let (tr, va) = stratified_split(&labels, cfg.validation_fraction, cfg.seed);
    let train: Vec<&Sample> = tr.iter().map(|&i| &dataset[i]).collect();
    let val: Vec<&Sample> = va.iter().map(|&i| &dataset[i]).collect();
    let mut model = PooledClassifier::new(d, num_classes);
    let report = fit(
        &mut model,
        &train,
        &val,
        cfg,
        |m: &PooledClassifier, g: &mut Graph, p: &[Var], s: &&Sample, _train, _rng: &mut rng::StreamRng| {
            let x = g.constant(s.x.clone())?;
            let z = m.forward(g, p, x)?;
            g.cross_entropy(z, s.label)
        },
    )?;
    Ok((model, report))
}

/// Trains the speaker-identification model; returns the best-validation checkpoint.
pub fn train_sid(dataset: &[Sample], num_speakers: usize, cfg: &TrainConfig) -> Result<(SidModel, TrainReport)> {
    train_pooled(dataset, num_speakers, cfg, "SID")
}

pub fn train_classifier(
    dataset: &[Sample],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainReport)> {
    train_pooled(dataset, num_classes, cfg, "classifier")
}
