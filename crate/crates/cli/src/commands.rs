use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use rshd::error::{Error, Result};
use rshd::eval::{estimate_quality, evaluate_cell, make_trials, run_sweep, SweepHandles, UtilityTask};
use rshd::io::{
    digest_bytes, load_saliency_dataset, save_saliency_dataset, write_matrix, Checkpoint, Manifest, ManifestHeader,
    ManifestRecord, Provenance, MANIFEST_VERSION,
};
use rshd::nn::{pse_forward, ClassifierModel, EmbedderModel, PseModel, TrainReport};
use rshd::pipeline::{self, PipelineConfig};
use rshd::rng::{self, Purpose};
use rshd::sanitizer::{sanitize_pipeline, SanitizerConfig, SelectionMode};
use rshd::synth::{SynthConfig, SynthDataset};
use rshd::Tensor;

use crate::{Common, SanitizeFlags};

pub const WORKERS_ENV: &str = "RSHD_NUM_WORKERS";

pub fn init_workers() -> Result<()> {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{}: {e}", path.display()));
            let user: toml::Table = toml::from_str(&text).map_err(|e: toml::de::Error| bad(&e.message()))?;
            let mut merged = toml::Table::try_from(PipelineConfig::default()).expect("defaults serialize");
            overlay(&mut merged, user);
            PipelineConfig::deserialize(merged).map_err(|e| bad(&e.message()))?
        }
        None => PipelineConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.synth.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Missing keys, at any depth, keep the value from `base`.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// An output being written. Everything goes to a hidden sibling that replaces
/// the target only on [`Staged::commit`], so a failed run neither leaves a
/// partial result nor destroys the previous one.
struct Staged {
    target: PathBuf,
    tmp: PathBuf,
    done: bool,
}

/// Refuses to replace an existing `out` unless forced.
fn stage_output(out: &Path, force: bool) -> Result<Staged> {
    if std::fs::symlink_metadata(out).is_ok() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to replace it",
            out.display()
        )));
    }
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no file name", out.display())))?;
    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    remove_path(&tmp)?;
    Ok(Staged {
        target: out.to_path_buf(),
        tmp,
        done: false,
    })
}

fn remove_path(p: &Path) -> Result<()> {
    match std::fs::symlink_metadata(p) {
        Err(_) => Ok(()),
        Ok(m) if m.is_dir() => std::fs::remove_dir_all(p).map_err(io_err(p)),
        Ok(_) => std::fs::remove_file(p).map_err(io_err(p)),
    }
}

impl Staged {
    fn path(&self) -> &Path {
        &self.tmp
    }

    fn commit(mut self) -> Result<()> {
        remove_path(&self.target)?;
        std::fs::rename(&self.tmp, &self.target).map_err(io_err(&self.target))?;
        self.done = true;
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.done {
            let _ = remove_path(&self.tmp);
        }
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(digest_bytes(&bytes))
}

fn read_manifest(path: &Path) -> Result<(Manifest, PathBuf, String)> {
    let m = Manifest::read(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((m, base, file_digest(path)?))
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    Checkpoint::load(path)
}

fn report_json(r: &TrainReport) -> Value {
    json!({
        "initial_val_loss": r.initial_val_loss,
        "best_epoch": r.best_epoch,
        "best_val_loss": r.best_val_loss,
        "final_train_loss": r.train_loss.last(),
    })
}

fn provenance(cfg: &PipelineConfig, report: &TrainReport, inputs: Vec<String>, extra: Value) -> Provenance {
    Provenance {
        seed: cfg.seed(),
        config_digest: cfg.digest(),
        validation_metric: report.best_val_loss,
        inputs,
        extra,
    }
}

fn sid_speakers(ck: &Checkpoint) -> Result<Vec<usize>> {
    serde_json::from_value(ck.provenance.extra["speakers"].clone())
        .map_err(|_| Error::Config("SID checkpoint carries no speaker map".into()))
}

fn write_partition(out: &Path, name: &str, ds: &SynthDataset, cfg: &PipelineConfig) -> Result<String> {
    let manifest = Manifest {
        header: ManifestHeader {
            version: MANIFEST_VERSION,
            seed: cfg.seed(),
            config_digest: cfg.digest(),
            config: json!({ "synth": ds.config, "partition": name }),
            standardization: Some(ds.standardization.clone()),
        },
        records: ds
            .utterances
            .iter()
            .map(|u| ManifestRecord {
                id: u.id.clone(),
                path: format!("mats/{}.rshd", u.id),
                speaker: u.speaker,
                content: u.content,
                t: u.x.rows(),
                d: u.x.cols(),
            })
            .collect(),
    };
    let path = out.join(format!("{name}.jsonl"));
    manifest.write(&path)?;
    file_digest(&path)
}

pub fn gen_data(common: &Common) -> Result<Value> {
    let cfg = load_config(common)?;
    let out = stage_output(&common.out, common.force)?;
    let parts = pipeline::generate_partitions(&cfg)?;
    for u in &parts.all.utterances {
        write_matrix(out.path().join(format!("mats/{}.rshd", u.id)), &u.x)?;
    }
    let mut files = serde_json::Map::new();
    for (name, ds) in [
        ("all", &parts.all),
        ("sid", &parts.sid),
        ("asv_train", &parts.asv_train),
        ("asv_eval", &parts.asv_eval),
    ] {
        let digest = write_partition(out.path(), name, ds, &cfg)?;
        files.insert(
            name.into(),
            json!({ "utterances": ds.len(), "speakers": ds.speakers().len(), "digest": digest }),
        );
    }
    out.commit()?;
    Ok(json!({
        "command": "gen-data",
        "out": common.out,
        "seed": cfg.seed(),
        "config_digest": cfg.digest(),
        "synth_digest": cfg.synth.digest(),
        "partitions": files,
    }))
}

pub fn train_sid(common: &Common, data: &Path) -> Result<Value> {
    let cfg = load_config(common)?;
    let (m, base, digest) = read_manifest(data)?;
    let out = stage_output(&common.out, common.force)?;
    let stage = pipeline::stage_train_sid(&cfg, &m.load_speaker_samples(&base)?)?;
    let ck = Checkpoint::sid(
        &stage.model,
        provenance(&cfg, &stage.report, vec![digest], json!({ "speakers": stage.speakers })),
    );
    let out_digest = ck.save(out.path())?;
    out.commit()?;
    Ok(json!({
        "command": "train-sid",
        "out": common.out,
        "digest": out_digest,
        "speakers": stage.speakers.len(),
        "training": report_json(&stage.report),
    }))
}

pub fn build_saliency(common: &Common, data: &Path, sid: &Path) -> Result<Value> {
    let cfg = load_config(common)?;
    let (m, base, _) = read_manifest(data)?;
    let (ck, sid_digest) = load_checkpoint(sid)?;
    let speakers = sid_speakers(&ck)?;
    let model = ck.into_sid()?;
    let out = stage_output(&common.out, common.force)?;
    let samples = m.load_speaker_samples(&base)?;
    let ds = pipeline::stage_build_saliency(&cfg, &samples, &model, &speakers, &sid_digest)?;
    let ids: Vec<String> = m.records.iter().map(|r| r.id.clone()).collect();
    save_saliency_dataset(out.path(), &ds, &ids, cfg.seed())?;
    let digest = file_digest(&out.path().join(rshd::io::SALIENCY_INDEX))?;
    out.commit()?;
    Ok(json!({
        "command": "build-saliency",
        "out": common.out,
        "pairs": ds.len(),
        "sid_checkpoint": sid_digest,
        "sigma_abs": ds.provenance().sigma_abs,
        "digest": digest,
    }))
}

pub fn train_pse(common: &Common, saliency: &Path) -> Result<Value> {
    let cfg = load_config(common)?;
    let (ds, _) = load_saliency_dataset(saliency)?;
    let index_digest = file_digest(&saliency.join(rshd::io::SALIENCY_INDEX))?;
    let out = stage_output(&common.out, common.force)?;
    let (model, report) = pipeline::stage_train_pse(&cfg, &ds)?;
    let ck = Checkpoint::pse(
        &model,
        provenance(
            &cfg,
            &report,
            vec![index_digest, ds.provenance().sid_checkpoint.clone()],
            Value::Null,
        ),
    );
    let digest = ck.save(out.path())?;
    out.commit()?;
    Ok(json!({
        "command": "train-pse",
        "out": common.out,
        "digest": digest,
        "pairs": ds.len(),
        "training": report_json(&report),
    }))
}

pub fn train_embedder(common: &Common, data: &Path, sid: &Path) -> Result<Value> {
    let cfg = load_config(common)?;
    let (m, base, digest) = read_manifest(data)?;
    let (ck, sid_digest) = load_checkpoint(sid)?;
    let sid_set: BTreeSet<usize> = sid_speakers(&ck)?.into_iter().collect();
    let out = stage_output(&common.out, common.force)?;
    let (model, report) = pipeline::stage_train_embedder(&cfg, &m.load_speaker_samples(&base)?, &sid_set)?;
    let ck = Checkpoint::embedder(&model, provenance(&cfg, &report, vec![digest, sid_digest], Value::Null));
    let out_digest = ck.save(out.path())?;
    out.commit()?;
    Ok(json!({
        "command": "train-embedder",
        "out": common.out,
        "digest": out_digest,
        "speakers": m.speakers().len(),
        "training": report_json(&report),
    }))
}

/// Class count from the manifest's generator config, falling back to the pipeline config.
fn content_classes(m: &Manifest, cfg: &PipelineConfig) -> usize {
    serde_json::from_value::<SynthConfig>(m.header.config["synth"].clone())
        .map(|s| s.n_content_classes)
        .unwrap_or(cfg.synth.n_content_classes)
}

pub fn train_classifier(common: &Common, data: &Path) -> Result<Value> {
    let mut cfg = load_config(common)?;
    let (m, base, digest) = read_manifest(data)?;
    cfg.synth.n_content_classes = content_classes(&m, &cfg);
    let out = stage_output(&common.out, common.force)?;
    let (model, report) = pipeline::stage_train_classifier(&cfg, &m.load_content_samples(&base)?)?;
    let ck = Checkpoint::classifier(&model, provenance(&cfg, &report, vec![digest], Value::Null));
    let out_digest = ck.save(out.path())?;
    out.commit()?;
    Ok(json!({
        "command": "train-classifier",
        "out": common.out,
        "digest": out_digest,
        "classes": model.num_classes(),
        "training": report_json(&report),
    }))
}

fn sanitizer_config(cfg: &PipelineConfig, flags: &SanitizeFlags) -> Result<SanitizerConfig> {
    let s = SanitizerConfig {
        k_percent: flags.k,
        eps_priv: flags.epsilon,
        clip_bound: flags.clip_bound.unwrap_or(cfg.clip_bound),
        seed: cfg.sanitize_seed(),
        selection_mode: flags.mode,
    };
    s.validate()?;
    Ok(s)
}

fn load_pse(path: Option<&Path>, mode: SelectionMode) -> Result<Option<(PseModel, String)>> {
    match path {
        Some(p) => {
            let (ck, digest) = load_checkpoint(p)?;
            Ok(Some((ck.into_pse()?, digest)))
        }
        None if mode == SelectionMode::Pse => Err(Error::Config("pse mode needs --pse <checkpoint>".into())),
        None => Ok(None),
    }
}

pub fn sanitize(common: &Common, flags: &SanitizeFlags, data: &Path, pse: Option<&Path>) -> Result<Value> {
    let cfg = load_config(common)?;
    let scfg = sanitizer_config(&cfg, flags)?;
    let (m, base, digest) = read_manifest(data)?;
    let pse = load_pse(pse, scfg.selection_mode)?;
    let out = stage_output(&common.out, common.force)?;
    let xs = m.load_matrices(&base)?;
    let model = pse.as_ref().map(|(p, _)| p);
    let sanitized: Vec<Tensor> = xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| sanitize_pipeline(x, model, &scfg, i as u64).map_err(|e| Error::at_sample(i, e)))
        .collect::<Result<_>>()?;
    let mut changed = 0usize;
    for ((r, x), y) in m.records.iter().zip(&xs).zip(&sanitized) {
        write_matrix(out.path().join(format!("mats/{}.rshd", r.id)), y)?;
        changed += x
            .data()
            .iter()
            .zip(y.data())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
    }
    let header = ManifestHeader {
        config: json!({
            "source": m.header.config,
            "source_digest": digest,
            "sanitizer": scfg,
            "pse_checkpoint": pse.as_ref().map(|(_, d)| d),
        }),
        ..m.header.clone()
    };
    let records = m
        .records
        .iter()
        .map(|r| ManifestRecord {
            path: format!("mats/{}.rshd", r.id),
            ..r.clone()
        })
        .collect();
    let path = out.path().join("manifest.jsonl");
    Manifest { header, records }.write(&path)?;
    let digest = file_digest(&path)?;
    out.commit()?;
    Ok(json!({
        "command": "sanitize",
        "out": common.out.join("manifest.jsonl"),
        "digest": digest,
        "utterances": sanitized.len(),
        "changed_positions": changed,
        "sanitizer": scfg,
    }))
}

struct EvalInputs {
    xs: Vec<Tensor>,
    speakers: Vec<usize>,
    contents: Vec<usize>,
    data_digest: String,
    embedder: (EmbedderModel, String),
    classifier: (ClassifierModel, String),
}

fn eval_inputs(data: &Path, embedder: &Path, classifier: &Path) -> Result<EvalInputs> {
    let (m, base, data_digest) = read_manifest(data)?;
    let samples = m.load_content_samples(&base)?;
    let (ek, ed) = load_checkpoint(embedder)?;
    let (ck, cd) = load_checkpoint(classifier)?;
    Ok(EvalInputs {
        speakers: m.records.iter().map(|r| r.speaker).collect(),
        contents: samples.iter().map(|s| s.label).collect(),
        xs: samples.into_iter().map(|s| s.x).collect(),
        data_digest,
        embedder: (ek.into_embedder()?, ed),
        classifier: (ck.into_classifier()?, cd),
    })
}

fn handles<'a>(
    cfg: &PipelineConfig,
    inputs: &'a EvalInputs,
    pse: Option<&'a PseModel>,
    trials: &'a [rshd::eval::VerificationTrial],
) -> SweepHandles<'a> {
    SweepHandles {
        pse,
        embedder: &inputs.embedder.0,
        utterances: &inputs.xs,
        trials,
        tasks: vec![UtilityTask {
            name: "content".into(),
            classifier: &inputs.classifier.0,
            labels: inputs.contents.clone(),
        }],
        clip_bound: cfg.clip_bound,
        seed: cfg.sanitize_seed(),
    }
}

pub fn evaluate(
    common: &Common,
    flags: &SanitizeFlags,
    data: &Path,
    embedder: &Path,
    classifier: &Path,
    pse: Option<&Path>,
    saliency: Option<&Path>,
) -> Result<Value> {
    let cfg = load_config(common)?;
    let scfg = sanitizer_config(&cfg, flags)?;
    let inputs = eval_inputs(data, embedder, classifier)?;
    let pse = load_pse(pse, scfg.selection_mode)?;
    let quality = match (saliency, &pse) {
        (Some(dir), Some((model, _))) => {
            let (ds, _) = load_saliency_dataset(dir)?;
            let estimates = ds
                .pairs()
                .par_iter()
                .map(|p| pse_forward(model, &p.x, false, &mut rng::stream(0, Purpose::Dropout, 0)))
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<Tensor> = ds.pairs().iter().map(|p| p.s.values().clone()).collect();
            let k = if scfg.k_percent > 0.0 { scfg.k_percent } else { 20.0 };
            Some(estimate_quality(&estimates, &targets, k)?)
        }
        (Some(_), None) => return Err(Error::Config("--saliency needs --pse".into())),
        _ => None,
    };
    let out = stage_output(&common.out, common.force)?;
    let trials = make_trials(&inputs.speakers, cfg.n_trials, cfg.trial_seed())?;
    let h = handles(&cfg, &inputs, pse.as_ref().map(|(p, _)| p), &trials);
    let (eer, acc) = evaluate_cell(&h, &scfg)?;
    let report = json!({
        "command": "evaluate",
        "seed": cfg.seed(),
        "config_digest": cfg.digest(),
        "data": inputs.data_digest,
        "embedder": inputs.embedder.1,
        "classifier": inputs.classifier.1,
        "pse": pse.as_ref().map(|(_, d)| d),
        "sanitizer": scfg,
        "trials": trials.len(),
        "eer": eer,
        "task_acc": { "content": acc[0] },
        "pse_quality": quality,
    });
    let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
    std::fs::write(out.path(), text).map_err(io_err(&common.out))?;
    out.commit()?;
    Ok(report)
}

pub fn sweep(
    common: &Common,
    data: &Path,
    embedder: &Path,
    classifier: &Path,
    pse: Option<&Path>,
    modes: &[SelectionMode],
    clip_bound: Option<f64>,
) -> Result<Value> {
    let mut cfg = load_config(common)?;
    if let Some(c) = clip_bound {
        cfg.clip_bound = c;
        cfg.validate()?;
    }
    let inputs = eval_inputs(data, embedder, classifier)?;
    let need_pse = if modes.contains(&SelectionMode::Pse) {
        SelectionMode::Pse
    } else {
        SelectionMode::Random
    };
    let pse = load_pse(pse, need_pse)?;
    let out = stage_output(&common.out, common.force)?;
    let trials = make_trials(&inputs.speakers, cfg.n_trials, cfg.trial_seed())?;
    let h = handles(&cfg, &inputs, pse.as_ref().map(|(p, _)| p), &trials);
    let mut grid = run_sweep(&cfg.k_list, &cfg.eps_list, modes, &h)?;
    grid.provenance = vec![
        ("seed".into(), cfg.seed().to_string()),
        ("config_digest".into(), cfg.digest()),
        ("data".into(), inputs.data_digest.clone()),
        ("embedder".into(), inputs.embedder.1.clone()),
        ("classifier".into(), inputs.classifier.1.clone()),
        (
            "pse".into(),
            pse.as_ref().map(|(_, d)| d.clone()).unwrap_or_else(|| "none".into()),
        ),
        ("trials".into(), trials.len().to_string()),
    ];
    let csv = grid.to_csv();
    std::fs::write(out.path(), &csv).map_err(io_err(&common.out))?;
    out.commit()?;
    Ok(json!({
        "command": "sweep",
        "out": common.out,
        "digest": digest_bytes(csv.as_bytes()),
        "rows": grid.rows.len(),
        "columns": grid.header(),
    }))
}
