//! Top-k% position selection, clipping and Laplace noise.
//!
//! The mechanism clips the selected positions to `[-clip_bound, clip_bound]`
//! and adds `Lap(2 / eps)` noise to them (the scale assumes the default unit bound). Because only a
//! data-dependent subset of positions is perturbed, the output carries no
//! formal differential-privacy guarantee; `(k, eps)` are mechanism knobs.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{pse_forward, PseModel};
use crate::rng::{self, Purpose, StreamRng};
use crate::tensor::Tensor;

/// Positions selected for perturbation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationMask {
    rows: usize,
    cols: usize,
    selected: Vec<bool>,
    count: usize,
}

impl PerturbationMask {
    pub fn from_bools(rows: usize, cols: usize, selected: Vec<bool>) -> Result<Self> {
        if selected.len() != rows * cols {
            return Err(Error::dim("perturbation mask", &[rows, cols], &[selected.len()]));
        }
        let count = selected.iter().filter(|b| **b).count();
        Ok(PerturbationMask {
            rows,
            cols,
            selected,
            count,
        })
    }

    fn from_indices(rows: usize, cols: usize, idx: &[usize]) -> Self {
        let mut selected = vec![false; rows * cols];
        for &i in idx {
            selected[i] = true;
        }
        PerturbationMask {
            rows,
            cols,
            selected,
            count: idx.len(),
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn count_selected(&self) -> usize {
        self.count
    }

    pub fn is_selected(&self, r: usize, c: usize) -> bool {
        self.selected[r * self.cols + c]
    }

    /// Row-major flags.
    pub fn as_slice(&self) -> &[bool] {
        &self.selected
    }

    pub fn intersection_count(&self, other: &PerturbationMask) -> usize {
        self.selected
            .iter()
            .zip(&other.selected)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// Jaccard index; two empty masks count as identical.
    pub fn jaccard(&self, other: &PerturbationMask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count + other.count - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Number of positions selected out of `n` at `k_percent`: nearest integer, ties to even.
pub fn selection_count(n: usize, k_percent: f64) -> usize {
    let m = (k_percent / 100.0 * n as f64).round_ties_even() as usize;
    m.min(n)
}

fn check_k(k_percent: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&k_percent) {
        return Err(Error::Config(format!("k_percent {k_percent} outside [0, 100]")));
    }
    Ok(())
}

/// The `selection_count` largest entries of `scores`; equal scores are
/// taken in ascending row-major order.
pub fn select_topk(scores: &Tensor, k_percent: f64) -> Result<PerturbationMask> {
    check_k(k_percent)?;
    let (rows, cols) = (scores.rows(), scores.cols());
    let m = selection_count(scores.numel(), k_percent);
    let v = scores.data();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let by_score = |a: &usize, b: &usize| v[*b].total_cmp(&v[*a]).then(a.cmp(b));
    if m > 0 && m < idx.len() {
        idx.select_nth_unstable_by(m - 1, by_score);
    }
    idx.truncate(m);
    Ok(PerturbationMask::from_indices(rows, cols, &idx))
}

/// `selection_count` positions drawn uniformly without replacement.
///
/// The mask is a prefix of one seeded permutation, so masks for the same
/// seed and shape are nested as `k` grows.
pub fn select_random(rows: usize, cols: usize, k_percent: f64, seed: u64) -> Result<PerturbationMask> {
    select_random_with(rows, cols, k_percent, &mut rng::stream(seed, Purpose::Mask, 0))
}

pub fn select_random_with<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    k_percent: f64,
    rng: &mut R,
) -> Result<PerturbationMask> {
    check_k(k_percent)?;
    let n = rows * cols;
    let m = selection_count(n, k_percent);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(m);
    Ok(PerturbationMask::from_indices(rows, cols, &idx))
}

/// Laplace scale `2 / eps`: the width of the `[-1, 1]` clipping range over `eps`.
pub fn laplace_scale(eps_priv: f64) -> f64 {
    2.0 / eps_priv
}

/// Inverse-CDF Laplace draw with scale `b`: `u ~ U(-1/2, 1/2)`,
/// `-b * sign(u) * ln(1 - 2|u|)`.
pub fn laplace_sample<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    loop {
        let u = rng.random::<f64>() - 0.5;
        // u == -0.5 would map to an infinite draw
        if u > -0.5 {
            return -b * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// How perturbed positions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Top-k of the estimator's output.
    Pse,
    /// Uniformly random positions.
    Random,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Pse => "pse",
            SelectionMode::Random => "random",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pse" => Ok(SelectionMode::Pse),
            "random" => Ok(SelectionMode::Random),
            other => Err(Error::Config(format!(
                "unknown selection mode {other:?} (expected pse or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SanitizerConfig {
    pub k_percent: f64,
    pub eps_priv: f64,
    pub clip_bound: f64,
    pub seed: u64,
    pub selection_mode: SelectionMode,
}

impl Default for SanitizerConfig {
    fn default() -> Self {
        SanitizerConfig {
            k_percent: 20.0,
            eps_priv: 1.0,
            clip_bound: 1.0,
            seed: 0,
            selection_mode: SelectionMode::Pse,
        }
    }
}

impl SanitizerConfig {
    pub fn validate(&self) -> Result<()> {
        check_k(self.k_percent)?;
        if !(self.eps_priv > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.eps_priv
            )));
        }
        if !(self.clip_bound > 0.0) || !self.clip_bound.is_finite() {
            return Err(Error::Config(format!(
                "clip bound must be positive, got {}",
                self.clip_bound
            )));
        }
        Ok(())
    }

    pub fn laplace_scale(&self) -> f64 {
        laplace_scale(self.eps_priv)
    }
}

/// Clips and noises the selected positions; everything else is copied bit for bit.
///
/// One Laplace draw is taken per position in row-major order whether or not it
/// is selected, so a given `rng` state yields the same noise at a position for
/// every mask and the draws scale linearly with `1 / eps`.
pub fn sanitize<R: Rng + ?Sized>(
    x: &Tensor,
    mask: &PerturbationMask,
    cfg: &SanitizerConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    if mask.shape() != [x.rows(), x.cols()] {
        return Err(Error::dim("sanitize", x.shape(), &mask.shape()));
    }
    let b = cfg.laplace_scale();
    let c = cfg.clip_bound;
    let mut out = x.clone();
    for (v, &sel) in out.data_mut().iter_mut().zip(mask.as_slice()) {
        // always draw; see above
        let noise = laplace_sample(b, rng);
        if sel {
            *v = v.clamp(-c, c) + noise;
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("sanitized output".into()));
    }
    Ok(out)
}

/// Label-free inference path: estimate (or draw) the mask, then sanitize.
///
/// `stream` keys the per-utterance random streams; the PSE is only consulted in
/// [`SelectionMode::Pse`].
pub fn sanitize_pipeline(x: &Tensor, pse: Option<&PseModel>, cfg: &SanitizerConfig, stream: u64) -> Result<Tensor> {
    cfg.validate()?;
    let mask = match cfg.selection_mode {
        SelectionMode::Pse => {
            let pse = pse.ok_or_else(|| Error::Config("pse selection mode needs a PSE checkpoint".into()))?;
            let estimate = pse_forward(pse, x, false, &mut eval_rng())?;
            select_topk(&estimate, cfg.k_percent)?
        }
        SelectionMode::Random => select_random_with(
            x.rows(),
            x.cols(),
            cfg.k_percent,
            &mut rng::stream(cfg.seed, Purpose::Mask, stream),
        )?,
    };
    sanitize(x, &mask, cfg, &mut rng::stream(cfg.seed, Purpose::Noise, stream))
}

fn eval_rng() -> StreamRng {
    rng::stream(0, Purpose::Dropout, 0)
}
