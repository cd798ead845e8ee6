//! The command layer behind the CLI: each function reads its inputs from the
//! output directory, writes its artifacts there and records them in the run
//! manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{unix_now, OutLayout, RunConfig, RunManifest};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, write_evaluation, Confusion, Evaluation};
use crate::io::{read_json, write_atomic, write_json_atomic, DirLock};
use crate::phantom::{load_manifest, make_dataset_with, DatasetManifest, MANIFEST_FILE, MASK_DIR};
use crate::preproc::{preprocess, preprocess_mask};
use crate::scoring::{batch_score, classify, read_scores_csv, residual_map, write_scores_csv, ScoreRecord, TrainedModel};
use crate::training::{PipelineBundle, Stage, Trainer};
use crate::volume::{list_volumes, Volume};

/// A validated config bound to its output directory, holding the directory lock.
#[derive(Debug)]
pub struct Context {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: OutLayout,
    _lock: DirLock,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash()?;
        let root = cfg.out_dir()?;
        let lock = DirLock::acquire(&root)?;
        let out = OutLayout::new(&root);
        write_json_atomic(&out.config(), &cfg)?;
        Ok(Context {
            cfg,
            hash,
            out,
            _lock: lock,
        })
    }

    fn record(&self, name: &str, started: u64, outputs: &[PathBuf]) -> Result<()> {
        let rel = outputs
            .iter()
            .map(|p| p.strip_prefix(self.out.root()).unwrap_or(p).display().to_string())
            .collect();
        RunManifest::record(&self.out.manifest(), &self.hash, name, started, rel).map(|_| ())
    }
}

fn file_name(stem: &Path) -> String {
    stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn optional_manifest(dir: &Path) -> Result<Option<DatasetManifest>> {
    if dir.join(MANIFEST_FILE).exists() {
        load_manifest(dir).map(Some)
    } else {
        Ok(None)
    }
}

/// Writes the configured phantom dataset into the data directory.
pub fn generate_synthetic(ctx: &Context) -> Result<DatasetManifest> {
    let started = unix_now();
    let spec = ctx
        .cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("the config has no synthetic section".into()))?;
    let dir = ctx.cfg.data_dir()?;
    let ds = make_dataset_with(spec, ctx.cfg.seed)?;
    ds.save(&dir)?;
    log::info!("wrote {} phantoms to {}", ds.samples.len(), dir.display());
    ctx.record("generate-synthetic", started, &[dir])?;
    Ok(ds.manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutcome {
    pub done: Vec<String>,
    pub failures: Vec<FileFailure>,
}

fn preprocess_one(ctx: &Context, stem: &Path, masks_in: &Path, out: &Path) -> Result<()> {
    let raw = Volume::load(stem)?;
    let v = preprocess(&raw, &ctx.cfg.preproc)?;
    let id = file_name(stem);
    let mask_stem = masks_in.join(&id);
    if mask_stem.with_extension("vol").exists() {
        let mask = preprocess_mask(&Volume::load(&mask_stem)?, &raw, &ctx.cfg.preproc)?;
        mask.save(out.join(MASK_DIR).join(&id))?;
    }
    v.save(out.join(&id))
}

/// Preprocesses every volume of `input` (the data directory by default).
/// Per-file failures are collected into `errors.json` without stopping the batch.
pub fn preprocess_dir(ctx: &Context, input: Option<&Path>) -> Result<BatchOutcome> {
    let started = unix_now();
    let input = match input {
        Some(p) => p.to_path_buf(),
        None => ctx.cfg.data_dir()?,
    };
    let out = ctx.out.preprocessed();
    std::fs::create_dir_all(out.join(MASK_DIR)).map_err(|e| Error::io(&out, e))?;
    let stems = list_volumes(&input)?;
    if stems.is_empty() {
        log::warn!("no volumes found in {}", input.display());
    }
    let masks_in = input.join(MASK_DIR);
    let results: Vec<(String, Result<()>)> = stems
        .par_iter()
        .map(|s| (file_name(s), preprocess_one(ctx, s, &masks_in, &out)))
        .collect();
    let mut outcome = BatchOutcome::default();
    for (id, r) in results {
        match r {
            Ok(()) => outcome.done.push(id),
            Err(e) => {
                log::error!("{id}: {e}");
                outcome.failures.push(FileFailure {
                    id,
                    error: e.to_string(),
                })
            }
        }
    }
    if let Some(m) = optional_manifest(&input)? {
        write_json_atomic(&out.join(MANIFEST_FILE), &m)?;
    }
    write_json_atomic(&out.join("errors.json"), &outcome.failures)?;
    ctx.record("preprocess", started, &[out])?;
    Ok(outcome)
}

/// Training and held-out volume ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<String>,
    pub held_out: Vec<String>,
}

/// With a dataset manifest, trains on the leading normal volumes (manifest
/// order) and holds out `fraction` of them plus every abnormal one. Without
/// a manifest every volume is used for training and for scoring.
pub fn split(ids: &[String], manifest: Option<&DatasetManifest>, fraction: f64) -> Split {
    let Some(m) = manifest else {
        return Split {
            train: ids.to_vec(),
            held_out: ids.to_vec(),
        };
    };
    let normals: Vec<&String> = m
        .entries
        .iter()
        .filter(|e| e.label == crate::scoring::Label::Normal && ids.contains(&e.id))
        .map(|e| &e.id)
        .collect();
    let n_train = normals.len() - (normals.len() as f64 * fraction).round() as usize;
    let train: Vec<String> = normals[..n_train].iter().map(|s| s.to_string()).collect();
    let held_out = ids.iter().filter(|id| !train.contains(id)).cloned().collect();
    Split { train, held_out }
}

fn preprocessed_split(ctx: &Context) -> Result<(Split, Option<DatasetManifest>)> {
    let dir = ctx.out.preprocessed();
    if !dir.exists() {
        return Err(Error::InvalidArgument(format!("{} is missing; run preprocess first", dir.display())));
    }
    let ids: Vec<String> = list_volumes(&dir)?.iter().map(|s| file_name(s)).collect();
    let manifest = optional_manifest(&dir)?;
    Ok((split(&ids, manifest.as_ref(), ctx.cfg.split.holdout_fraction), manifest))
}

fn load_ids(dir: &Path, ids: &[String]) -> Result<Vec<Volume>> {
    ids.iter().map(|id| Volume::load(dir.join(id))).collect()
}

/// Runs one stage, or all remaining stages when `stage` is `None`.
pub fn train(ctx: &Context, stage: Option<Stage>) -> Result<()> {
    let started = unix_now();
    let (split, _) = preprocessed_split(ctx)?;
    let data = load_ids(&ctx.out.preprocessed(), &split.train)?;
    log::info!("training on {} volumes", data.len());
    let trainer = Trainer::new(&ctx.cfg.train_config())?
        .with_run_dir(&ctx.out.train())
        .with_config_hash(&ctx.hash);
    let name = match stage {
        Some(s) => {
            trainer.run_stage(s, &data)?;
            format!("train:{}", s.name())
        }
        None => {
            trainer.run_full_pipeline(&data)?;
            "train:all".to_string()
        }
    };
    ctx.record(&name, started, &[ctx.out.train()])
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreOutcome {
    pub records: Vec<ScoreRecord>,
    pub failures: Vec<FileFailure>,
}

/// Scores the held-out volumes with the trained bundle into `scores.csv`.
pub fn score(ctx: &Context, threshold: Option<f64>, residuals: bool) -> Result<ScoreOutcome> {
    let started = unix_now();
    let bundle = PipelineBundle::load(&ctx.out.train())?;
    let model = TrainedModel::new(&bundle)?;
    let (split, manifest) = preprocessed_split(ctx)?;
    let dir = ctx.out.preprocessed();
    let mut outcome = ScoreOutcome::default();
    let mut volumes = Vec::new();
    for id in &split.held_out {
        match Volume::load(dir.join(id)) {
            Ok(v) => volumes.push((id.clone(), v)),
            Err(e) => outcome.failures.push(FileFailure {
                id: id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let scored = batch_score(&volumes, &model, &ctx.cfg.scoring_loss());
    outcome.failures.extend(scored.failures.into_iter().map(|(id, error)| FileFailure { id, error }));
    for f in &outcome.failures {
        log::error!("{}: {}", f.id, f.error);
    }
    outcome.records = scored
        .records
        .into_iter()
        .map(|r| match manifest.as_ref().and_then(|m| m.entry(&r.volume_id)) {
            Some(e) => {
                let types = e.lesion_types.clone();
                r.labeled(e.label, &types)
            }
            None => r,
        })
        .collect();
    let mut outputs = vec![ctx.out.scores()];
    write_scores_csv(&ctx.out.scores(), &outcome.records)?;
    if let Some(t) = threshold {
        let mut csv = String::from("volume_id,score,prediction\n");
        for r in &outcome.records {
            writeln!(csv, "{},{},{}", r.volume_id, r.score, classify(r.score, t).name()).unwrap();
        }
        write_atomic(&ctx.out.predictions(), csv.as_bytes())?;
        outputs.push(ctx.out.predictions());
    }
    if residuals {
        let rdir = ctx.out.residuals();
        std::fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
        for (id, v) in &volumes {
            residual_map(v, &model)?.save(rdir.join(id))?;
        }
        outputs.push(rdir);
    }
    ctx.record("score", started, &outputs)?;
    Ok(outcome)
}

/// Metrics at a user-chosen threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub specificity: f64,
}

pub fn threshold_metrics(records: &[ScoreRecord], threshold: f64) -> Result<ThresholdMetrics> {
    let c = Confusion::at(records, threshold)?;
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    Ok(ThresholdMetrics {
        threshold,
        accuracy: c.accuracy(),
        recall: ratio(c.tp, c.fn_),
        specificity: ratio(c.tn, c.fp),
    })
}

/// Floor applied before taking `log10` of a score, so zero scores stay finite.
pub const LOG_SCORE_FLOOR: f64 = 1e-12;

pub fn log_score(score: f64) -> f64 {
    score.max(LOG_SCORE_FLOOR).log10()
}

/// ROC/PR artifacts from `scores.csv` into `evaluation/`.
pub fn evaluate_scores(ctx: &Context, threshold: Option<f64>, plot_data: bool) -> Result<Evaluation> {
    let started = unix_now();
    let records = read_scores_csv(&ctx.out.scores())?;
    let eval = evaluate(&records)?;
    let dir = ctx.out.evaluation();
    let mut outputs: Vec<PathBuf> = write_evaluation(&dir, &eval)?.into_iter().map(|f| dir.join(f)).collect();
    if let Some(t) = threshold {
        let path = dir.join("threshold.json");
        write_json_atomic(&path, &threshold_metrics(&records, t)?)?;
        outputs.push(path);
    }
    if plot_data {
        let path = dir.join("log_scores.csv");
        let mut csv = String::from("volume_id,label,log10_score\n");
        for r in &records {
            let label = r.label.map_or("", |l| l.name());
            writeln!(csv, "{},{label},{}", r.volume_id, log_score(r.score)).unwrap();
        }
        write_atomic(&path, csv.as_bytes())?;
        outputs.push(path);
    }
    ctx.record("evaluate", started, &outputs)?;
    Ok(eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub n: usize,
    pub mean_log10_score: f64,
    pub std_log10_score: f64,
    pub min_log10_score: f64,
    pub max_log10_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub groups: Vec<GroupSummary>,
}

impl Report {
    pub fn group(&self, name: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// Log-score summaries grouped by `group_of(record)`, sorted by group name.
pub fn group_log_scores(records: &[ScoreRecord], group_of: impl Fn(&ScoreRecord) -> String) -> Report {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(group_of(r)).or_default().push(log_score(r.score));
    }
    let groups = groups
        .into_iter()
        .map(|(group, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            GroupSummary {
                group,
                n,
                mean_log10_score: mean,
                std_log10_score: var.sqrt(),
                min_log10_score: v.iter().copied().fold(f64::INFINITY, f64::min),
                max_log10_score: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Report { groups }
}

/// Groups `scores.csv` by phantom category when a dataset manifest exists,
/// else by label.
pub fn report(ctx: &Context) -> Result<Report> {
    let started = unix_now();
    let records = read_scores_csv(&ctx.out.scores())?;
    let manifest = optional_manifest(&ctx.out.preprocessed())?;
    let rep = group_log_scores(&records, |r| {
        match manifest.as_ref().and_then(|m| m.entry(&r.volume_id)) {
            Some(e) => e.category.name().to_string(),
            None => r.label.map_or("UNLABELED".to_string(), |l| l.name().to_uppercase()),
        }
    });
    write_json_atomic(&ctx.out.report(), &rep)?;
    let mut csv = String::from("group,n,mean_log10_score,std_log10_score,min_log10_score,max_log10_score\n");
    for g in &rep.groups {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            g.group, g.n, g.mean_log10_score, g.std_log10_score, g.min_log10_score, g.max_log10_score
        )
        .unwrap();
    }
    write_atomic(&ctx.out.report_csv(), csv.as_bytes())?;
    ctx.record("report", started, &[ctx.out.report(), ctx.out.report_csv()])?;
    Ok(rep)
}

pub fn read_report(path: &Path) -> Result<Report> {
    read_json(path)
}
