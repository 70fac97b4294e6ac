//! Transformer-encoder regressor from representations to saliency estimates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::random_split;
use crate::error::{Error, Result};
use crate::nn::layers::{bind, linear, push_dense, Model};
use crate::nn::train::{fit, TrainConfig, TrainReport};
use crate::optim::ParamSet;
use crate::rng::{self, Purpose, StreamRng};
use crate::saliency::{SaliencyDataset, SaliencyPair};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseConfig {
    /// Feature dimension of the representation (input and output width).
    pub d: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
}

impl PseConfig {
    /// Small encoder used for the synthetic benchmark.
    pub fn desk(d: usize) -> Self {
        PseConfig {
            d,
            d_model: 64,
            layers: 2,
            heads: 4,
            ff: 128,
            dropout: 0.1,
        }
    }

    /// Full-size encoder for 768-dimensional upstream features.
    pub fn full_scale(d: usize) -> Self {
        PseConfig {
            d,
            d_model: 768,
            layers: 6,
            heads: 12,
            ff: 3072,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_model == 0 || self.heads == 0 || self.ff == 0 {
            return Err(Error::Config(format!("PSE dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

// Per-layer parameter slots, relative to the layer's first slot.
const WQ: usize = 0;
const WK: usize = 2;
const WV: usize = 4;
const WO: usize = 6;
const LN1: usize = 8;
const FF1: usize = 10;
const FF2: usize = 12;
const LN2: usize = 14;
const PER_LAYER: usize = 16;

/// Input projection, sinusoidal positions, post-norm encoder layers, output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PseModel {
    cfg: PseConfig,
    params: ParamSet,
}

/// Sinusoidal position table, `t x width`.
pub fn positional_encoding(t: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * width);
    for pos in 0..t {
        for j in 0..width {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(t, width, data)
}

impl PseModel {
    pub fn new(cfg: PseConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let mut params = ParamSet::new();
        let dm = cfg.d_model;
        push_dense(&mut params, &mut rng, "input", cfg.d, dm);
        for l in 0..cfg.layers {
            for name in ["q", "k", "v", "o"] {
                push_dense(&mut params, &mut rng, &format!("layer{l}.attn.{name}"), dm, dm);
            }
            params.push(format!("layer{l}.norm1.gain"), Tensor::filled(1, dm, 1.0));
            params.push(format!("layer{l}.norm1.bias"), Tensor::zeros(1, dm));
            push_dense(&mut params, &mut rng, &format!("layer{l}.ff1"), dm, cfg.ff);
            push_dense(&mut params, &mut rng, &format!("layer{l}.ff2"), cfg.ff, dm);
            params.push(format!("layer{l}.norm2.gain"), Tensor::filled(1, dm, 1.0));
            params.push(format!("layer{l}.norm2.bias"), Tensor::zeros(1, dm));
        }
        // zero output projection: estimates start at 0, the scale of the targets
        params.push("output.weight", Tensor::zeros(dm, cfg.d));
        params.push("output.bias", Tensor::zeros(1, cfg.d));
        Ok(PseModel { cfg, params })
    }

    pub fn from_params(cfg: PseConfig, params: ParamSet) -> Result<Self> {
        PseModel::new(cfg, 0)?.params.check_layout(&params)?;
        Ok(PseModel { cfg, params })
    }

    pub fn config(&self) -> &PseConfig {
        &self.cfg
    }

    fn attention(&self, g: &mut Graph, p: &[Var], x: Var, train: bool, rng: &mut StreamRng) -> Result<Var> {
        let dm = self.cfg.d_model;
        let dh = dm / self.cfg.heads;
        let q = linear(g, x, p[WQ], p[WQ + 1])?;
        let k = linear(g, x, p[WK], p[WK + 1])?;
        let v = linear(g, x, p[WV], p[WV + 1])?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scores)?;
            let attn = g.dropout(attn, self.cfg.dropout, rng, train)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        linear(g, merged, p[WO], p[WO + 1])
    }

    fn encoder_layer(&self, g: &mut Graph, p: &[Var], x: Var, train: bool, rng: &mut StreamRng) -> Result<Var> {
        let rate = self.cfg.dropout;
        let a = self.attention(g, p, x, train, rng)?;
        let a = g.dropout(a, rate, rng, train)?;
        let h = g.add(x, a)?;
        let h = g.layer_norm_rows(h, p[LN1], p[LN1 + 1])?;
        let f = linear(g, h, p[FF1], p[FF1 + 1])?;
        let f = g.relu(f)?;
        let f = g.dropout(f, rate, rng, train)?;
        let f = linear(g, f, p[FF2], p[FF2 + 1])?;
        let f = g.dropout(f, rate, rng, train)?;
        let out = g.add(h, f)?;
        g.layer_norm_rows(out, p[LN2], p[LN2 + 1])
    }

    /// `x: t x d -> t x d` on the tape.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, train: bool, rng: &mut StreamRng) -> Result<Var> {
        let (t, d) = (g.value(x).rows(), g.value(x).cols());
        if d != self.cfg.d {
            return Err(Error::dim("pse input", &[self.cfg.d], g.value(x).shape()));
        }
        let z = linear(g, x, p[0], p[1])?;
        let pe = g.constant(positional_encoding(t, self.cfg.d_model))?;
        let mut h = g.add(z, pe)?;
        h = g.dropout(h, self.cfg.dropout, rng, train)?;
        for l in 0..self.cfg.layers {
            let base = 2 + l * PER_LAYER;
            h = self.encoder_layer(g, &p[base..base + PER_LAYER], h, train, rng)?;
        }
        let out = 2 + self.cfg.layers * PER_LAYER;
        linear(g, h, p[out], p[out + 1])
    }
}

impl Model for PseModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Saliency estimate for one representation. The output is unconstrained real.
pub fn pse_forward(model: &PseModel, x: &Tensor, train: bool, rng: &mut StreamRng) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bind(&mut g, &model.params, false)?;
    let xv = g.constant(x.clone())?;
    let y = model.forward(&mut g, &p, xv, train, rng)?;
    Ok(g.value(y).clone())
}

/// Trains on `(x, s)` pairs with an L1 objective and returns the
/// lowest-validation-loss checkpoint.
pub fn train_pse(
    dataset: &SaliencyDataset,
    cfg: &PseConfig,
    train_cfg: &TrainConfig,
) -> Result<(PseModel, TrainReport)> {
    let pairs = dataset.pairs();
    if pairs.is_empty() {
        return Err(Error::contract("PSE training on an empty saliency dataset"));
    }
    if pairs.len() < 10 {
        return Err(Error::contract(format!(
            "PSE training needs at least 10 pairs, got {}",
            pairs.len()
        )));
    }
    for (i, pair) in pairs.iter().enumerate() {
        if pair.x.cols() != cfg.d {
            return Err(Error::at_sample(i, Error::dim("pse dataset", &[cfg.d], pair.x.shape())));
        }
    }
    let model_cfg = PseConfig {
        dropout: train_cfg.dropout,
        ..*cfg
    };
    let (tr, va) = random_split(pairs.len(), train_cfg.validation_fraction, train_cfg.seed);
    let train: Vec<&SaliencyPair> = tr.iter().map(|&i| &pairs[i]).collect();
    let val: Vec<&SaliencyPair> = va.iter().map(|&i| &pairs[i]).collect();
    let mut model = PseModel::new(model_cfg, train_cfg.seed)?;
    let report = fit(
        &mut model,
        &train,
        &val,
        train_cfg,
        |m: &PseModel, g: &mut Graph, p: &[Var], s: &&SaliencyPair, train, rng: &mut StreamRng| {
            let x = g.constant(s.x.clone())?;
            let target = g.constant(s.s.values().clone())?;
            let y = m.forward(g, p, x, train, rng)?;
            g.l1_loss(y, target)
        },
    )?;
    Ok((model, report))
}
