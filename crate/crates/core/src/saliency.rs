//! SmoothGrad privacy-risk saliency maps and the saliency-map dataset.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{bind, SidModel};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Non-negative per-position risk scores, same shape as the representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap(Tensor);

impl SaliencyMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if let Some(v) = values.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::contract(format!(
                "saliency entries must be finite and >= 0, found {v}"
            )));
        }
        Ok(SaliencyMap(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothGradConfig {
    /// Number of noisy copies averaged.
    pub n_samples: usize,
    /// Standard deviation of the Gaussian input noise. For
    /// [`build_saliency_dataset`] this is relative to the dataset's feature
    /// standard deviation; for [`smoothgrad`] it is absolute.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        SmoothGradConfig {
            n_samples: 25,
            sigma: 0.1,
            seed: 0,
        }
    }
}

impl SmoothGradConfig {
    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("invalid SmoothGrad config {self:?}")));
        }
        Ok(())
    }
}

/// Gradient of the cross-entropy loss on class `y` with respect to the input.
pub fn input_gradient(model: &SidModel, x: &Tensor, y: usize) -> Result<Tensor> {
    if y >= model.num_classes() {
        return Err(Error::contract(format!(
            "label {y} out of range for {} speakers",
            model.num_classes()
        )));
    }
    let mut g = Graph::new();
    let p = bind(&mut g, crate::nn::Model::params(model), false)?;
    let xv = g.param(x.clone())?;
    let z = model.forward(&mut g, &p, xv)?;
    let loss = g.cross_entropy(z, y)?;
    g.backward(loss)?;
    let grad = g.grad(xv).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec);
    Tensor::new(x.shape().to_vec(), grad)
}

/// Mean absolute loss gradient over `cfg.n_samples` Gaussian-perturbed copies of `x`,
/// each gradient taken at the perturbed point. `stream` selects the noise stream so
/// that each utterance of a dataset gets independent draws.
pub fn smoothgrad(model: &SidModel, x: &Tensor, y: usize, cfg: &SmoothGradConfig, stream: u64) -> Result<SaliencyMap> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Purpose::SmoothGrad, stream);
    let mut acc = vec![0.0; x.numel()];
    let mut noisy = x.clone();
    for _ in 0..cfg.n_samples {
        if cfg.sigma > 0.0 {
            for (n, &v) in noisy.data_mut().iter_mut().zip(x.data()) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *n = v + cfg.sigma * z;
            }
        }
        let grad = input_gradient(model, &noisy, y)?;
        for (a, gv) in acc.iter_mut().zip(grad.data()) {
            *a += gv.abs();
        }
    }
    let n = cfg.n_samples as f64;
    for a in &mut acc {
        *a /= n;
    }
    SaliencyMap::new(Tensor::new(x.shape().to_vec(), acc)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyPair {
    pub x: Tensor,
    pub s: SaliencyMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyProvenance {
    /// Digest of the SID checkpoint the maps were computed with.
    pub sid_checkpoint: String,
    pub smoothgrad: SmoothGradConfig,
    /// Absolute noise standard deviation actually used.
    pub sigma_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyDataset {
    pairs: Vec<SaliencyPair>,
    provenance: SaliencyProvenance,
}

impl SaliencyDataset {
    pub fn new(pairs: Vec<SaliencyPair>, provenance: SaliencyProvenance) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if p.x.shape() != p.s.values().shape() {
                return Err(Error::at_sample(
                    i,
                    Error::dim("saliency pair", p.x.shape(), p.s.values().shape()),
                ));
            }
        }
        Ok(SaliencyDataset { pairs, provenance })
    }

    pub fn pairs(&self) -> &[SaliencyPair] {
        &self.pairs
    }

    pub fn provenance(&self) -> &SaliencyProvenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Population standard deviation of every entry of every sample.
pub fn feature_std(samples: &[Sample]) -> f64 {
    let n: usize = samples.iter().map(|s| s.x.numel()).sum();
    if n == 0 {
        return 1.0;
    }
    let mean = samples.iter().flat_map(|s| s.x.data()).sum::<f64>() / n as f64;
    let var = samples
        .iter()
        .flat_map(|s| s.x.data())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    if var > 0.0 {
        var.sqrt()
    } else {
        1.0
    }
}

/// One saliency map per sample, in order. `cfg.sigma` is scaled by the
/// dataset's feature standard deviation. Sample `i` uses noise stream `i`,
/// so the result does not depend on thread count.
pub fn build_saliency_dataset(
    dataset: &[Sample],
    model: &SidModel,
    cfg: &SmoothGradConfig,
    sid_checkpoint: &str,
) -> Result<SaliencyDataset> {
    cfg.validate()?;
    let sigma_abs = cfg.sigma * feature_std(dataset);
    let provenance = SaliencyProvenance {
        sid_checkpoint: sid_checkpoint.to_string(),
        smoothgrad: *cfg,
        sigma_abs,
    };
    if dataset.is_empty() {
        log::warn!("building a saliency dataset from an empty dataset");
        return SaliencyDataset::new(Vec::new(), provenance);
    }
    let abs_cfg = SmoothGradConfig {
        sigma: sigma_abs,
        ..*cfg
    };
    let pairs = dataset
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let map = smoothgrad(model, &s.x, s.label, &abs_cfg, i as u64).map_err(|e| Error::at_sample(i, e))?;
            Ok(SaliencyPair { x: s.x.clone(), s: map })
        })
        .collect::<Result<Vec<_>>>()?;
    SaliencyDataset::new(pairs, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::PooledClassifier;

    fn probe(t: usize, d: usize, k: f64) -> Tensor {
        Tensor::matrix(t, d, (0..t * d).map(|i| ((i as f64) * k).sin()).collect())
    }

    #[test]
    fn degenerate_config_is_vanilla_gradient() {
        let m = PooledClassifier::random(5, 3, 2);
        let x = probe(4, 5, 0.7);
        let cfg = SmoothGradConfig {
            n_samples: 1,
            sigma: 0.0,
            seed: 9,
        };
        let s = smoothgrad(&m, &x, 1, &cfg, 0).unwrap();
        let g = input_gradient(&m, &x, 1).unwrap().map(f64::abs);
        assert!(s.values().bit_eq(&g));
    }

    #[test]
    fn label_out_of_range() {
        let m = PooledClassifier::random(5, 3, 2);
        let err = smoothgrad(&m, &probe(2, 5, 0.1), 3, &SmoothGradConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn negative_saliency_rejected() {
        assert!(SaliencyMap::new(Tensor::from_rows(&[&[0.0, -1.0]])).is_err());
    }

    #[test]
    fn empty_dataset_gives_empty_saliency_dataset() {
        let m = PooledClassifier::random(5, 3, 2);
        let ds = build_saliency_dataset(&[], &m, &SmoothGradConfig::default(), "x").unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn dataset_is_order_preserving_and_reproducible() {
        let m = PooledClassifier::random(4, 3, 5);
        let samples: Vec<Sample> = (0..12)
            .map(|i| Sample::new(probe(3 + i % 4, 4, 0.3 + i as f64), i % 3))
            .collect();
        let cfg = SmoothGradConfig {
            n_samples: 4,
            sigma: 0.2,
            seed: 1,
        };
        let a = build_saliency_dataset(&samples, &m, &cfg, "sid").unwrap();
        let b = build_saliency_dataset(&samples, &m, &cfg, "sid").unwrap();
        assert_eq!(a.len(), samples.len());
        for (i, (pa, pb)) in a.pairs().iter().zip(b.pairs()).enumerate() {
            assert!(pa.x.bit_eq(&samples[i].x));
            assert!(pa.s.values().bit_eq(pb.s.values()));
        }
    }
}
