use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{common_dim, stratified_split, Sample};
use crate::error::{Error, Result};
use crate::nn::layers::{bind, linear, push_dense, Model};
use crate::nn::train::{fit, TrainConfig, TrainReport};
use crate::optim::ParamSet;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub d: usize,
    pub hidden: usize,
    pub dim: usize,
    pub classes: usize,
}

/// Speaker embedder: mean pooling, `d -> hidden` with ReLU, `hidden -> dim`
/// (the embedding), then a `dim -> classes` speaker head used only for training.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderModel {
    cfg: EmbedderConfig,
    params: ParamSet,
}

const HIDDEN: usize = 0;
const EMBED: usize = 2;
const HEAD: usize = 4;

impl EmbedderModel {
    pub fn new(cfg: EmbedderConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let mut params = ParamSet::new();
        push_dense(&mut params, &mut rng, "hidden", cfg.d, cfg.hidden);
        push_dense(&mut params, &mut rng, "embed", cfg.hidden, cfg.dim);
        push_dense(&mut params, &mut rng, "head", cfg.dim, cfg.classes);
        EmbedderModel { cfg, params }
    }

    pub fn from_params(cfg: EmbedderConfig, params: ParamSet) -> Result<Self> {
        EmbedderModel::new(cfg, 0).params.check_layout(&params)?;
        Ok(EmbedderModel { cfg, params })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    /// Un-normalized `1 x dim` embedding.
    pub fn embedding(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        if g.value(x).cols() != self.cfg.d {
            return Err(Error::dim("embedder input", &[self.cfg.d], g.value(x).shape()));
        }
        let pooled = g.mean_pool_time(x)?;
        let h = linear(g, pooled, p[HIDDEN], p[HIDDEN + 1])?;
        let h = g.relu(h)?;
        linear(g, h, p[EMBED], p[EMBED + 1])
    }

    /// Training logits over the embedder's own speakers.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let e = self.embedding(g, p, x)?;
        linear(g, e, p[HEAD], p[HEAD + 1])
    }
}

impl Model for EmbedderModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Unit-norm embedding of `x`.
pub fn embed(model: &EmbedderModel, x: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = bind(&mut g, &model.params, false)?;
    let xv = g.constant(x.clone())?;
    let e = model.embedding(&mut g, &p, xv)?;
    let v = g.value(e).data();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::NonFinite("embedding has zero norm".into()));
    }
    Ok(v.iter().map(|a| a / norm).collect())
}

/// Trains the embedder on speakers disjoint from `sid_speakers`.
///
/// Sample labels are speaker ids in any numbering; they are remapped to
/// contiguous classes internally.
pub fn train_embedder(
    dataset: &[Sample],
    sid_speakers: &BTreeSet<usize>,
    hidden: usize,
    dim: usize,
    cfg: &TrainConfig,
) -> Result<(EmbedderModel, TrainReport)> {
    let speakers: BTreeSet<usize> = dataset.iter().map(|s| s.label).collect();
    let overlap: Vec<usize> = speakers.intersection(sid_speakers).copied().collect();
    if !overlap.is_empty() {
        return Err(Error::contract(format!(
            "embedder speakers overlap the SID speakers: {overlap:?}"
        )));
    }
    if speakers.len() < 2 {
        return Err(Error::contract("embedder training needs at least 2 speakers"));
    }
    let d = common_dim(dataset.iter().map(|s| &s.x))?.expect("non-empty");
    let index: Vec<usize> = speakers.iter().copied().collect();
    let remapped: Vec<Sample> = dataset
        .iter()
        .map(|s| Sample::new(s.x.clone(), index.binary_search(&s.label).expect("known speaker")))
        .collect();
    let labels: Vec<usize> = remapped.iter().map(|s| s.label).collect();
    let (tr, va) = stratified_split(&labels, cfg.validation_fraction, cfg.seed);
    let train: Vec<&Sample> = tr.iter().map(|&i| &remapped[i]).collect();
    let val: Vec<&Sample> = va.iter().map(|&i| &remapped[i]).collect();
    let ecfg = EmbedderConfig {
        d,
        hidden,
        dim,
        classes: index.len(),
    };
    let mut model = EmbedderModel::new(ecfg, cfg.seed);
    let report = fit(
        &mut model,
        &train,
        &val,
        cfg,
        |m: &EmbedderModel, g: &mut Graph, p: &[Var], s: &&Sample, _train, _rng: &mut rng::StreamRng| {
            let x = g.constant(s.x.clone())?;
            let z = m.forward(g, p, x)?;
            g.cross_entropy(z, s.label)
        },
    )?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let m = EmbedderModel::new(
            EmbedderConfig {
                d: 5,
                hidden: 8,
                dim: 4,
                classes: 3,
            },
            11,
        );
        let x = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect());
        let a = embed(&m, &x).unwrap();
        let b = embed(&m, &x).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn overlapping_speakers_rejected() {
        let ds: Vec<Sample> = (0..6)
            .map(|i| Sample::new(Tensor::filled(2, 3, i as f64), i % 3))
            .collect();
        let sid: BTreeSet<usize> = [2, 9].into_iter().collect();
        let err = train_embedder(&ds, &sid, 4, 2, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("overlap"));
    }
}
