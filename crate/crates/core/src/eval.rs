//! Privacy and utility measurement.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{classify, embed, pse_forward, ClassifierModel, EmbedderModel, PseModel};
use crate::rng::{self, Purpose};
use crate::saliency::SaliencyDataset;
use crate::sanitizer::{sanitize_pipeline, select_topk, selection_count, SanitizerConfig, SelectionMode};
use crate::tensor::Tensor;

/// A verification pair, by index into the evaluated utterance list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationTrial {
    pub a: usize,
    pub b: usize,
    pub is_genuine: bool,
}

/// Balanced trial list: `n_trials - n_trials / 2` genuine pairs and `n_trials / 2` impostor pairs.
pub fn make_trials(speakers: &[usize], n_trials: usize, seed: u64) -> Result<Vec<VerificationTrial>> {
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in speakers.iter().enumerate() {
        by_speaker.entry(s).or_default().push(i);
    }
    if by_speaker.len() < 2 {
        return Err(Error::contract("trials need at least 2 speakers"));
    }
    if let Some((s, u)) = by_speaker.iter().find(|(_, u)| u.len() < 2) {
        return Err(Error::contract(format!(
            "speaker {s} has {} utterance(s); trials need at least 2 per speaker",
            u.len()
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Trials, 0);
    let n_genuine = n_trials - n_trials / 2;
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_genuine {
        let a = rng.random_range(0..speakers.len());
        let same = &by_speaker[&speakers[a]];
        let b = loop {
            let b = same[rng.random_range(0..same.len())];
            if b != a {
                break b;
            }
        };
        trials.push(VerificationTrial { a, b, is_genuine: true });
    }
    for _ in n_genuine..n_trials {
        let a = rng.random_range(0..speakers.len());
        let b = loop {
            let b = rng.random_range(0..speakers.len());
            if speakers[b] != speakers[a] {
                break b;
            }
        };
        trials.push(VerificationTrial {
            a,
            b,
            is_genuine: false,
        });
    }
    Ok(trials)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of the two utterances' embeddings.
pub fn score_trial(embedder: &EmbedderModel, x_a: &Tensor, x_b: &Tensor) -> Result<f64> {
    Ok(cosine(&embed(embedder, x_a)?, &embed(embedder, x_b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate by threshold enumeration.
///
/// Candidates are `-inf`, `+inf` and the midpoints between consecutive distinct
/// scores. A trial is accepted when its score is `>= threshold`. The chosen
/// threshold minimizes `|FAR - FRR|` (lowest threshold on ties) and the EER is
/// `(FAR + FRR) / 2` there.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<Eer> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::contract("EER needs non-empty genuine and impostor score lists"));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("verification score".into()));
    }
    let (ng, ni) = (genuine.len() as u128, impostor.len() as u128);
    let mut scores: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    scores.sort_by(|a, b| a.0.total_cmp(&b.0));

    // threshold = -inf: everything accepted
    let (mut fa, mut fr) = (ni, 0u128);
    let gap = |fa: u128, fr: u128| (fa * ng).abs_diff(fr * ni);
    let mut best = (gap(fa, fr), fa, fr, f64::NEG_INFINITY);
    let mut i = 0;
    while i < scores.len() {
        let s = scores[i].0;
        while i < scores.len() && scores[i].0 == s {
            if scores[i].1 {
                fr += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
        let threshold = if i < scores.len() {
            s + (scores[i].0 - s) / 2.0
        } else {
            f64::INFINITY
        };
        let gp = gap(fa, fr);
        if gp < best.0 {
            best = (gp, fa, fr, threshold);
        }
    }
    let far = best.1 as f64 / ni as f64;
    let frr = best.2 as f64 / ng as f64;
    Ok(Eer {
        eer: (far + frr) / 2.0,
        threshold: best.3,
    })
}

/// EER of an embedder over already-computed unit embeddings.
pub fn trials_eer(embeddings: &[Vec<f64>], trials: &[VerificationTrial]) -> Result<Eer> {
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for t in trials {
        let s = cosine(&embeddings[t.a], &embeddings[t.b]);
        if t.is_genuine {
            genuine.push(s);
        } else {
            impostor.push(s);
        }
    }
    compute_eer(&genuine, &impostor)
}

/// Accuracy of a frozen classifier on `sanitize_fn(i, x_i)`.
pub fn eval_utility<F>(classifier: &ClassifierModel, dataset: &[Sample], sanitize_fn: F) -> Result<f64>
where
    F: Fn(usize, &Tensor) -> Result<Tensor> + Sync,
{
    if dataset.is_empty() {
        return Err(Error::contract("utility evaluation on an empty dataset"));
    }
    if let Some(s) = dataset.iter().find(|s| s.label >= classifier.num_classes()) {
        return Err(Error::contract(format!(
            "label {} outside the classifier's {} classes",
            s.label,
            classifier.num_classes()
        )));
    }
    let correct: Vec<bool> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let x = sanitize_fn(i, &s.x).map_err(|e| Error::at_sample(i, e))?;
            Ok(classify(classifier, &x)? == s.label)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseQuality {
    pub k_percent: f64,
    /// Mean Jaccard index between estimated and reference top-k masks.
    pub mean_jaccard: f64,
    /// Mean fraction of the estimated top-k that is in the reference top-k.
    pub mean_precision: f64,
    /// Mean over samples of the mean absolute error.
    pub mean_l1: f64,
    /// Expected Jaccard index of two independent uniform masks of the same sizes.
    pub chance_jaccard: f64,
    /// Expected precision of a uniform mask, `m / n`.
    pub chance_precision: f64,
}

/// Mask overlap and L1 error between estimates and reference saliency maps.
pub fn estimate_quality(estimates: &[Tensor], targets: &[Tensor], k_percent: f64) -> Result<PseQuality> {
    if estimates.len() != targets.len() || estimates.is_empty() {
        return Err(Error::dim("estimate quality", &[estimates.len()], &[targets.len()]));
    }
    let mut acc = [0.0; 5];
    for (i, (e, t)) in estimates.iter().zip(targets).enumerate() {
        if e.shape() != t.shape() {
            return Err(Error::at_sample(
                i,
                Error::dim("estimate quality", e.shape(), t.shape()),
            ));
        }
        let me = select_topk(e, k_percent)?;
        let mt = select_topk(t, k_percent)?;
        let m = me.count_selected();
        let n = e.numel() as f64;
        acc[0] += me.jaccard(&mt);
        acc[1] += if m == 0 {
            1.0
        } else {
            me.intersection_count(&mt) as f64 / m as f64
        };
        acc[2] += e.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let mf = selection_count(e.numel(), k_percent) as f64;
        let inter = mf * mf / n;
        acc[3] += if mf == 0.0 { 1.0 } else { inter / (2.0 * mf - inter) };
        acc[4] += if mf == 0.0 { 1.0 } else { mf / n };
    }
    let n = estimates.len() as f64;
    Ok(PseQuality {
        k_percent,
        mean_jaccard: acc[0] / n,
        mean_precision: acc[1] / n,
        mean_l1: acc[2] / n,
        chance_jaccard: acc[3] / n,
        chance_precision: acc[4] / n,
    })
}

/// Compares PSE estimates with the saliency maps they were trained to regress.
pub fn eval_pse_quality(pse: &PseModel, dataset: &SaliencyDataset, k_percent: f64) -> Result<PseQuality> {
    let estimates = dataset
        .pairs()
        .par_iter()
        .map(|p| pse_forward(pse, &p.x, false, &mut rng::stream(0, Purpose::Dropout, 0)))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Tensor> = dataset.pairs().iter().map(|p| p.s.values().clone()).collect();
    estimate_quality(&estimates, &targets, k_percent)
}

/// One named utility task: a frozen classifier and its labeled evaluation set.
pub struct UtilityTask<'a> {
    pub name: String,
    pub classifier: &'a ClassifierModel,
    pub labels: Vec<usize>,
}

/// Frozen evaluators and data shared by every sweep cell.
pub struct SweepHandles<'a> {
    pub pse: Option<&'a PseModel>,
    pub embedder: &'a EmbedderModel,
    /// Utterances that are sanitized and evaluated.
    pub utterances: &'a [Tensor],
    pub trials: &'a [VerificationTrial],
    pub tasks: Vec<UtilityTask<'a>>,
    pub clip_bound: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_percent: f64,
    pub epsilon: f64,
    pub mode: SelectionMode,
    pub eer: f64,
    pub task_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub task_names: Vec<String>,
    pub rows: Vec<SweepRow>,
    /// Free-form `key = value` provenance, written as comment lines.
    pub provenance: Vec<(String, String)>,
}

impl SweepGrid {
    pub fn header(&self) -> String {
        let mut h = String::from("k_percent,epsilon,mode,eer");
        for n in &self.task_names {
            let _ = write!(h, ",task_acc_{n}");
        }
        h
    }

    /// Comment lines (`# key=value`), the header, then one 6-decimal row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.provenance {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str(&self.header());
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:.6},{:.6},{},{:.6}", r.k_percent, r.epsilon, r.mode, r.eer);
            for a in &r.task_acc {
                let _ = write!(out, ",{a:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<SweepGrid> {
        let bad = |line: usize, reason: String| Error::Format {
            what: "sweep csv",
            offset: line as u64,
            reason,
        };
        let mut provenance = Vec::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((_, l)) = lines.peek() {
            let Some(rest) = l.strip_prefix("# ") else { break };
            let (k, v) = rest.split_once('=').unwrap_or((rest, ""));
            provenance.push((k.to_string(), v.to_string()));
            lines.next();
        }
        let (hl, header) = lines.next().ok_or_else(|| bad(0, "missing header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..4] != ["k_percent", "epsilon", "mode", "eer"] {
            return Err(bad(hl, format!("unexpected header {header:?}")));
        }
        let task_names = cols[4..]
            .iter()
            .map(|c| {
                c.strip_prefix("task_acc_")
                    .map(str::to_string)
                    .ok_or_else(|| bad(hl, format!("unexpected column {c:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for (ln, l) in lines {
            if l.is_empty() {
                continue;
            }
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != cols.len() {
                return Err(bad(ln, format!("expected {} fields, got {}", cols.len(), f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(ln, format!("{s:?}: {e}")));
            rows.push(SweepRow {
                k_percent: num(f[0])?,
                epsilon: num(f[1])?,
                mode: f[2].parse().map_err(|_| bad(ln, format!("bad mode {:?}", f[2])))?,
                eer: num(f[3])?,
                task_acc: f[4..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            });
        }
        Ok(SweepGrid {
            task_names,
            rows,
            provenance,
        })
    }

    pub fn row(&self, k: f64, eps: f64, mode: SelectionMode) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.k_percent == k && r.epsilon == eps && r.mode == mode)
    }
}

/// EER and task accuracies for one sanitizer setting.
pub fn evaluate_cell(h: &SweepHandles<'_>, cfg: &SanitizerConfig) -> Result<(f64, Vec<f64>)> {
    for t in &h.tasks {
        if t.labels.len() != h.utterances.len() {
            return Err(Error::dim("utility labels", &[h.utterances.len()], &[t.labels.len()]));
        }
        if let Some(l) = t.labels.iter().find(|l| **l >= t.classifier.num_classes()) {
            return Err(Error::contract(format!(
                "task {}: label {l} outside classifier range",
                t.name
            )));
        }
    }
    let sanitized: Vec<Tensor> = h
        .utterances
        .par_iter()
        .enumerate()
        .map(|(i, x)| sanitize_pipeline(x, h.pse, cfg, i as u64).map_err(|e| Error::at_sample(i, e)))
        .collect::<Result<_>>()?;
    let embeddings: Vec<Vec<f64>> = sanitized
        .par_iter()
        .map(|x| embed(h.embedder, x))
        .collect::<Result<_>>()?;
    let eer = trials_eer(&embeddings, h.trials)?.eer;
    let mut accs = Vec::with_capacity(h.tasks.len());
    for t in &h.tasks {
        let correct: Vec<bool> = sanitized
            .par_iter()
            .zip(&t.labels)
            .map(|(x, &l)| Ok(classify(t.classifier, x)? == l))
            .collect::<Result<_>>()?;
        accs.push(correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64);
    }
    Ok((eer, accs))
}

/// Evaluates every `(k, eps, mode)` cell with the same frozen evaluators.
/// Rows are ordered by k, then eps, then mode as given. Every cell uses the
/// same per-utterance random streams.
pub fn run_sweep(k_list: &[f64], eps_list: &[f64], modes: &[SelectionMode], h: &SweepHandles<'_>) -> Result<SweepGrid> {
    if k_list.is_empty() || eps_list.is_empty() || modes.is_empty() {
        return Err(Error::Config("sweep grid has an empty axis".into()));
    }
    if modes.contains(&SelectionMode::Pse) && h.pse.is_none() {
        return Err(Error::Config(
            "pse mode in the sweep but no PSE checkpoint given".into(),
        ));
    }
    let mut rows = Vec::with_capacity(k_list.len() * eps_list.len() * modes.len());
    for &k in k_list {
        for &eps in eps_list {
            for &mode in modes {
                let cfg = SanitizerConfig {
                    k_percent: k,
                    eps_priv: eps,
                    clip_bound: h.clip_bound,
                    seed: h.seed,
                    selection_mode: mode,
                };
                let (eer, task_acc) = evaluate_cell(h, &cfg)?;
                rows.push(SweepRow {
                    k_percent: k,
                    epsilon: eps,
                    mode,
                    eer,
                    task_acc,
                });
            }
        }
    }
    Ok(SweepGrid {
        task_names: h.tasks.iter().map(|t| t.name.clone()).collect(),
        rows,
        provenance: vec![("seed".into(), h.seed.to_string())],
    })
}
