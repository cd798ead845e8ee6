//! Three-stage training: WGAN-GP, encoder fitting with G and D frozen, and
//! joint refinement of E and G.
//!
//! Training runs in `f32` on one thread. Every random draw comes from a
//! ChaCha stream derived from the run seed and the stage, so a stage started
//! from the same checkpoint with the same config replays bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anodet3d_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::io::{canonical_hash, read_json, write_atomic, write_json_atomic};
use crate::losses::{
    critic_loss, encoder_objective, generator_loss, EncoderLossConfig, EncoderTargets, GanLossConfig,
};
use crate::networks::{init_params, NetworkParams, NetworkSpec, Role};
use crate::optim::{Adam, AdamConfig};
use crate::volume::{IntensityDomain, Volume};

/// Weights as trained and checkpointed.
pub type Params = NetworkParams<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gan,
    Encoder,
    Refine,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Gan, Stage::Encoder, Stage::Refine];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gan => "gan",
            Stage::Encoder => "encoder",
            Stage::Refine => "refine",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSteps {
    pub gan: u64,
    pub encoder: u64,
    pub refine: u64,
}

impl Default for StageSteps {
    fn default() -> Self {
        StageSteps {
            gan: 2000,
            encoder: 2000,
            refine: 500,
        }
    }
}

impl StageSteps {
    pub fn of(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Gan => self.gan,
            Stage::Encoder => self.encoder,
            Stage::Refine => self.refine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageOptimizers {
    pub gan: AdamConfig,
    pub encoder: AdamConfig,
    pub refine: AdamConfig,
}

impl Default for StageOptimizers {
    fn default() -> Self {
        StageOptimizers {
            gan: AdamConfig::new(1e-4, 0.0, 0.9),
            encoder: AdamConfig::new(1e-4, 0.9, 0.999),
            refine: AdamConfig::new(1e-5, 0.9, 0.999),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub network_spec: NetworkSpec,
    pub gan: GanLossConfig,
    pub enc: EncoderLossConfig,
    pub stage_steps: StageSteps,
    pub batch_size: usize,
    pub optimizer: StageOptimizers,
    pub seed: u64,
    /// Snapshot interval in steps within a stage; 0 keeps only stage-end checkpoints.
    pub checkpoint_every: u64,
    /// Networks updated during refinement.
    pub refine_targets: EncoderTargets,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network_spec: NetworkSpec::default(),
            gan: GanLossConfig::default(),
            enc: EncoderLossConfig::default(),
            stage_steps: StageSteps::default(),
            batch_size: 8,
            optimizer: StageOptimizers::default(),
            seed: 0,
            checkpoint_every: 0,
            refine_targets: EncoderTargets::EncoderGenerator,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network_spec.validate()?;
        self.gan.validate()?;
        self.enc.validate()?;
        self.optimizer.gan.validate()?;
        self.optimizer.encoder.validate()?;
        self.optimizer.refine.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        canonical_hash(self)
    }
}

/// Losses recorded after one step of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub curves: Vec<CurvePoint>,
    pub wall_time_s: f64,
    pub final_checkpoint: Option<PathBuf>,
    /// Parameter updates per network tag.
    pub updates: BTreeMap<String, u64>,
}

impl StageReport {
    fn new(stage: Stage) -> Self {
        StageReport {
            stage,
            curves: Vec::new(),
            wall_time_s: 0.0,
            final_checkpoint: None,
            updates: BTreeMap::new(),
        }
    }

    fn count(&mut self, role: Role) {
        *self.updates.entry(role.tag().to_string()).or_default() += 1;
    }

    pub fn updates_of(&self, role: Role) -> u64 {
        self.updates.get(role.tag()).copied().unwrap_or(0)
    }

    /// Values of one named loss in step order.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.curves.iter().filter_map(|p| p.values.get(name).copied()).collect()
    }

    /// `step,stage,loss_name,value` rows, without header.
    pub fn csv_rows(&self, out: &mut String) {
        for p in &self.curves {
            for (name, v) in &p.values {
                let _ = writeln!(out, "{},{},{},{}", p.step, self.stage.name(), name, v);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub generator: Params,
    pub encoder: Params,
    /// Unchanged unless the refinement targets include the critic.
    pub critic: Params,
    pub report: StageReport,
}

#[derive(Debug, Clone)]
pub struct PipelineBundle {
    pub generator: Params,
    pub critic: Params,
    pub encoder: Params,
    pub reports: Vec<StageReport>,
}

impl PipelineBundle {
    /// Loads the final networks of a completed run directory.
    pub fn load(run_dir: &Path) -> Result<Self> {
        let layout = RunLayout::new(run_dir);
        let mut reports = Vec::new();
        for stage in Stage::ALL {
            if !layout.is_complete(stage) {
                return Err(Error::UntrainedBundle(format!("stage {} has not completed", stage.name())));
            }
            reports.push(read_json(&layout.report(stage))?);
        }
        let (generator, _) = load_checkpoint(&layout.network(Stage::Refine, Role::Generator))?;
        let (encoder, _) = load_checkpoint(&layout.network(Stage::Refine, Role::Encoder))?;
        let critic_dir = layout.network(Stage::Refine, Role::Critic);
        let critic_dir = if critic_dir.exists() {
            critic_dir
        } else {
            layout.network(Stage::Gan, Role::Critic)
        };
        let (critic, _) = load_checkpoint(&critic_dir)?;
        Ok(PipelineBundle {
            generator,
            critic,
            encoder,
            reports,
        })
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        RunLayout {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(stage.name())
    }

    pub fn network(&self, stage: Stage, role: Role) -> PathBuf {
        self.stage_dir(stage).join(role.tag())
    }

    pub fn snapshot(&self, stage: Stage, role: Role) -> PathBuf {
        self.stage_dir(stage).join("snapshot").join(role.tag())
    }

    /// Written last; its presence marks the stage as complete.
    pub fn report(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("report.json")
    }

    pub fn diagnostic(&self, stage: Stage, role: Role) -> PathBuf {
        self.root.join("diagnostic").join(stage.name()).join(role.tag())
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.report(stage).exists()
    }
}

/// Row-major `f32` copies of the training volumes, served in shuffled batches.
struct Batches {
    data: Vec<f32>,
    per: usize,
    side: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(volumes: &[Volume], spec: &NetworkSpec, rng: ChaCha8Rng) -> Result<Self> {
        check_dataset(volumes, spec)?;
        let per = spec.volume_side.pow(3);
        let data = volumes.iter().flat_map(|v| v.data().iter().map(|&x| x as f32)).collect();
        Ok(Batches {
            data,
            per,
            side: spec.volume_side,
            order: (0..volumes.len()).collect(),
            pos: volumes.len(),
            rng,
        })
    }

    /// Next `n` volumes; the order is reshuffled at every epoch boundary.
    fn next(&mut self, n: usize) -> Tensor<f32> {
        let mut out = Vec::with_capacity(n * self.per);
        for _ in 0..n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let i = self.order[self.pos];
            self.pos += 1;
            out.extend_from_slice(&self.data[i * self.per..(i + 1) * self.per]);
        }
        let s = self.side;
        Tensor::new(vec![n, 1, s, s, s], out)
    }
}

fn check_dataset(volumes: &[Volume], spec: &NetworkSpec) -> Result<()> {
    if volumes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for v in volumes {
        if v.domain() != IntensityDomain::Normalized {
            return Err(Error::DomainMismatch {
                expected: IntensityDomain::Normalized.name(),
                found: v.domain().name(),
            });
        }
        if v.shape() != spec.volume_shape() {
            return Err(Error::shape(&spec.volume_shape(), &v.shape()));
        }
    }
    Ok(())
}

/// Independent stream for one purpose within one stage.
fn stage_rng(seed: u64, stage: Stage, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(16 + 4 * stage.index() + purpose);
    rng
}

const DATA_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

fn latents(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor<f32> {
    let data = (0..n * dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    Tensor::new(vec![n, dim], data)
}

fn apply(opt: &mut Adam<f32>, params: &mut Params, grads: &[Tensor<f32>]) {
    let mut refs: Vec<&mut Tensor<f32>> = params.tensors.iter_mut().map(|(_, t)| t).collect();
    opt.step(&mut refs, grads);
    params.step_count += 1;
}

fn progress_interval(steps: u64) -> u64 {
    (steps / 10).max(1)
}

/// Runs stages and writes checkpoints, reports and `metrics.csv` into an
/// optional run directory.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    layout: Option<RunLayout>,
    config_hash: String,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg: cfg.clone(),
            layout: None,
            config_hash: cfg.hash()?,
        })
    }

    pub fn with_run_dir(mut self, dir: &Path) -> Self {
        self.layout = Some(RunLayout::new(dir));
        self
    }

    /// Hash stamped into checkpoint manifests; defaults to the config's own.
    pub fn with_config_hash(mut self, hash: &str) -> Self {
        self.config_hash = hash.to_string();
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Checks a loss and the updated weights, writing a diagnostic
    /// checkpoint of `params` before aborting on a non-finite value.
    fn guard(&self, stage: Stage, step: u64, loss: &str, value: f64, params: &[&Params]) -> Result<()> {
        let bad_loss = !value.is_finite();
        let bad_params = params.iter().any(|p| !p.all_finite());
        if !bad_loss && !bad_params {
            return Ok(());
        }
        let mut diagnostic = None;
        if let Some(layout) = &self.layout {
            for p in params {
                let dir = layout.diagnostic(stage, p.role);
                fs::create_dir_all(dir.parent().unwrap()).map_err(|e| Error::io(&dir, e))?;
                save_checkpoint(p, &dir, &self.config_hash)?;
            }
            diagnostic = Some(layout.root().join("diagnostic").join(stage.name()));
        }
        Err(Error::NonFiniteLoss {
            stage: stage.name().to_string(),
            step,
            loss: if bad_loss { loss.to_string() } else { format!("parameters after {loss}") },
            diagnostic,
        })
    }

    fn snapshot(&self, stage: Stage, step: u64, params: &[&Params]) -> Result<()> {
        let (Some(layout), every) = (&self.layout, self.cfg.checkpoint_every) else {
            return Ok(());
        };
        if every == 0 || (step + 1) % every != 0 {
            return Ok(());
        }
        for p in params {
            let dir = layout.snapshot(stage, p.role);
            fs::create_dir_all(dir.parent().unwrap()).map_err(|e| Error::io(&dir, e))?;
            save_checkpoint(p, &dir, &self.config_hash)?;
        }
        Ok(())
    }

    /// Saves the stage's networks, then its report, then refreshes `metrics.csv`.
    fn finish(&self, report: &mut StageReport, params: &[&Params]) -> Result<()> {
        let Some(layout) = &self.layout else {
            return Ok(());
        };
        let dir = layout.stage_dir(report.stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for p in params {
            save_checkpoint(p, &layout.network(report.stage, p.role), &self.config_hash)?;
        }
        report.final_checkpoint = Some(dir);
        write_json_atomic(&layout.report(report.stage), report)?;
        self.write_metrics()
    }

    /// Rebuilds `metrics.csv` from the reports of all completed stages.
    pub fn write_metrics(&self) -> Result<()> {
        let Some(layout) = &self.layout else {
            return Ok(());
        };
        let mut out = String::from("step,stage,loss_name,value\n");
        for stage in Stage::ALL {
            if layout.is_complete(stage) {
                let report: StageReport = read_json(&layout.report(stage))?;
                report.csv_rows(&mut out);
            }
        }
        write_atomic(&layout.metrics(), out.as_bytes())
    }

    /// Stage 1: alternates `n_critic` critic updates with one generator update.
    pub fn train_gan(&self, data: &[Volume]) -> Result<(Params, Params, StageReport)> {
        let cfg = &self.cfg;
        let spec = &cfg.network_spec;
        let mut batches = Batches::new(data, spec, stage_rng(cfg.seed, Stage::Gan, DATA_STREAM))?;
        let mut rng = stage_rng(cfg.seed, Stage::Gan, NOISE_STREAM);
        let mut g: Params = init_params(spec, Role::Generator, cfg.seed)?;
        let mut d: Params = init_params(spec, Role::Critic, cfg.seed)?;
        let mut opt_g = Adam::new(cfg.optimizer.gan.clone());
        let mut opt_d = Adam::new(cfg.optimizer.gan.clone());
        let mut report = StageReport::new(Stage::Gan);
        let start = Instant::now();
        let steps = cfg.stage_steps.gan;
        let n = cfg.batch_size;

        for step in 0..steps {
            let mut last = None;
            for _ in 0..cfg.gan.n_critic {
                let real = batches.next(n);
                let z = latents(&mut rng, n, spec.latent_dim);
                let loss = critic_loss(&d, &g, &real, &z, &cfg.gan, &mut rng)?;
                self.guard(Stage::Gan, step, "critic_loss", loss.total, &[&g, &d])?;
                apply(&mut opt_d, &mut d, &loss.grads);
                self.guard(Stage::Gan, step, "critic_loss", loss.total, &[&g, &d])?;
                report.count(Role::Critic);
                last = Some(loss);
            }
            let z = latents(&mut rng, n, spec.latent_dim);
            let gl = generator_loss(&d, &g, &z)?;
            self.guard(Stage::Gan, step, "generator_loss", gl.total, &[&g, &d])?;
            apply(&mut opt_g, &mut g, &gl.grads);
            self.guard(Stage::Gan, step, "generator_loss", gl.total, &[&g, &d])?;
            report.count(Role::Generator);

            let cl = last.expect("n_critic >= 1");
            let values = BTreeMap::from([
                ("critic_loss".to_string(), cl.total),
                ("wasserstein".to_string(), cl.wasserstein()),
                ("gradient_penalty".to_string(), cl.penalty),
                ("generator_loss".to_string(), gl.total),
            ]);
            if (step + 1) % progress_interval(steps) == 0 {
                log::info!("gan step {}/{steps}: {values:?}", step + 1);
            }
            report.curves.push(CurvePoint { step, values });
            self.snapshot(Stage::Gan, step, &[&g, &d])?;
        }

        g.stage = Some(Stage::Gan);
        d.stage = Some(Stage::Gan);
        report.wall_time_s = start.elapsed().as_secs_f64();
        self.finish(&mut report, &[&g, &d])?;
        Ok((g, d, report))
    }

    /// Stage 2: fits E on the encoder loss with G and D frozen.
    pub fn train_encoder(&self, data: &[Volume], g: &Params, d: &Params) -> Result<(Params, StageReport)> {
        let cfg = &self.cfg;
        self.check_spec(&[g, d])?;
        let mut batches = Batches::new(data, &cfg.network_spec, stage_rng(cfg.seed, Stage::Encoder, DATA_STREAM))?;
        let mut e: Params = init_params(&cfg.network_spec, Role::Encoder, cfg.seed)?;
        let mut opt = Adam::new(cfg.optimizer.encoder.clone());
        let mut report = StageReport::new(Stage::Encoder);
        let start = Instant::now();
        let steps = cfg.stage_steps.encoder;

        for step in 0..steps {
            let x = batches.next(cfg.batch_size);
            let obj = encoder_objective(&x, g, d, &e, &cfg.enc, EncoderTargets::Encoder)?;
            self.guard(Stage::Encoder, step, "encoder_loss", obj.breakdown.total, &[&e])?;
            apply(&mut opt, &mut e, &obj.encoder_grads);
            self.guard(Stage::Encoder, step, "encoder_loss", obj.breakdown.total, &[&e])?;
            report.count(Role::Encoder);
            self.record_encoder(&mut report, step, steps, &obj.breakdown);
            self.snapshot(Stage::Encoder, step, &[&e])?;
        }

        e.stage = Some(Stage::Encoder);
        report.wall_time_s = start.elapsed().as_secs_f64();
        self.finish(&mut report, &[&e])?;
        Ok((e, report))
    }

    /// Stage 3: continues training on the encoder loss, updating the
    /// networks selected by `refine_targets`.
    pub fn refine_joint(&self, data: &[Volume], g: &Params, d: &Params, e: &Params) -> Result<RefineOutput> {
        let cfg = &self.cfg;
        self.check_spec(&[g, d, e])?;
        let targets = cfg.refine_targets;
        let mut batches = Batches::new(data, &cfg.network_spec, stage_rng(cfg.seed, Stage::Refine, DATA_STREAM))?;
        let (mut g, mut d, mut e) = (g.clone(), d.clone(), e.clone());
        let mut opt_e = Adam::new(cfg.optimizer.refine.clone());
        let mut opt_g = Adam::new(cfg.optimizer.refine.clone());
        let mut opt_d = Adam::new(cfg.optimizer.refine.clone());
        let mut report = StageReport::new(Stage::Refine);
        let start = Instant::now();
        let steps = cfg.stage_steps.refine;

        for step in 0..steps {
            let x = batches.next(cfg.batch_size);
            let obj = encoder_objective(&x, &g, &d, &e, &cfg.enc, targets)?;
            let loss = obj.breakdown.total;
            self.guard(Stage::Refine, step, "encoder_loss", loss, &[&g, &e])?;
            apply(&mut opt_e, &mut e, &obj.encoder_grads);
            report.count(Role::Encoder);
            if let Some(grads) = &obj.generator_grads {
                apply(&mut opt_g, &mut g, grads);
                report.count(Role::Generator);
            }
            if let Some(grads) = &obj.critic_grads {
                apply(&mut opt_d, &mut d, grads);
                report.count(Role::Critic);
            }
            self.guard(Stage::Refine, step, "encoder_loss", loss, &[&g, &e, &d])?;
            self.record_encoder(&mut report, step, steps, &obj.breakdown);
            self.snapshot(Stage::Refine, step, &[&g, &e])?;
        }

        g.stage = Some(Stage::Refine);
        e.stage = Some(Stage::Refine);
        let mut saved = vec![&g, &e];
        if targets == EncoderTargets::EncoderGeneratorCritic {
            d.stage = Some(Stage::Refine);
            saved.push(&d);
        }
        report.wall_time_s = start.elapsed().as_secs_f64();
        self.finish(&mut report, &saved)?;
        Ok(RefineOutput {
            generator: g,
            encoder: e,
            critic: d,
            report,
        })
    }

    fn record_encoder(&self, report: &mut StageReport, step: u64, steps: u64, b: &crate::losses::LossBreakdown) {
        let values = BTreeMap::from([
            ("encoder_loss".to_string(), b.total),
            ("image_loss".to_string(), b.l_img),
            ("feature_loss".to_string(), b.l_feat),
        ]);
        if (step + 1) % progress_interval(steps) == 0 {
            log::info!("{} step {}/{steps}: {values:?}", report.stage.name(), step + 1);
        }
        report.curves.push(CurvePoint { step, values });
    }

    fn check_spec(&self, params: &[&Params]) -> Result<()> {
        for p in params {
            if p.spec != self.cfg.network_spec {
                return Err(Error::ResumeMismatch(format!(
                    "{} was trained with a different network spec",
                    p.role.tag()
                )));
            }
        }
        Ok(())
    }

    fn load_stage(&self, stage: Stage, role: Role) -> Result<Params> {
        let layout = self.layout.as_ref().expect("loading needs a run directory");
        let dir = layout.network(stage, role);
        let (params, manifest) = load_checkpoint(&dir)?;
        if manifest.spec != self.cfg.network_spec {
            return Err(Error::ResumeMismatch(format!(
                "checkpoint {} has a different network spec than the config",
                dir.display()
            )));
        }
        if manifest.config_hash != self.config_hash {
            log::warn!("checkpoint {} was written under config {}", dir.display(), manifest.config_hash);
        }
        Ok(params)
    }

    fn load_report(&self, stage: Stage) -> Result<StageReport> {
        let layout = self.layout.as_ref().expect("loading needs a run directory");
        read_json(&layout.report(stage))
    }

    /// Runs one stage, loading its inputs from the run directory.
    pub fn run_stage(&self, stage: Stage, data: &[Volume]) -> Result<StageReport> {
        if self.layout.is_none() {
            return Err(Error::InvalidArgument("running a single stage needs a run directory".into()));
        }
        Ok(match stage {
            Stage::Gan => self.train_gan(data)?.2,
            Stage::Encoder => {
                let g = self.load_stage(Stage::Gan, Role::Generator)?;
                let d = self.load_stage(Stage::Gan, Role::Critic)?;
                self.train_encoder(data, &g, &d)?.1
            }
            Stage::Refine => {
                let g = self.load_stage(Stage::Gan, Role::Generator)?;
                let d = self.load_stage(Stage::Gan, Role::Critic)?;
                let e = self.load_stage(Stage::Encoder, Role::Encoder)?;
                self.refine_joint(data, &g, &d, &e)?.report
            }
        })
    }

    /// All three stages; with a run directory, completed stages are loaded
    /// from their checkpoints instead of retrained.
    pub fn run_full_pipeline(&self, data: &[Volume]) -> Result<PipelineBundle> {
        let done = |stage| self.layout.as_ref().is_some_and(|l| l.is_complete(stage));

        let (g, d, r1) = if done(Stage::Gan) {
            log::info!("stage gan already complete, loading checkpoints");
            (
                self.load_stage(Stage::Gan, Role::Generator)?,
                self.load_stage(Stage::Gan, Role::Critic)?,
                self.load_report(Stage::Gan)?,
            )
        } else {
            self.train_gan(data)?
        };
        let (e, r2) = if done(Stage::Encoder) {
            log::info!("stage encoder already complete, loading checkpoints");
            (self.load_stage(Stage::Encoder, Role::Encoder)?, self.load_report(Stage::Encoder)?)
        } else {
            self.train_encoder(data, &g, &d)?
        };
        let out = if done(Stage::Refine) {
            log::info!("stage refine already complete, loading checkpoints");
            let critic_dir = self.layout.as_ref().unwrap().network(Stage::Refine, Role::Critic);
            RefineOutput {
                generator: self.load_stage(Stage::Refine, Role::Generator)?,
                encoder: self.load_stage(Stage::Refine, Role::Encoder)?,
                critic: if critic_dir.exists() { self.load_stage(Stage::Refine, Role::Critic)? } else { d },
                report: self.load_report(Stage::Refine)?,
            }
        } else {
            self.refine_joint(data, &g, &d, &e)?
        };
        Ok(PipelineBundle {
            generator: out.generator,
            critic: out.critic,
            encoder: out.encoder,
            reports: vec![r1, r2, out.report],
        })
    }
}

pub fn train_gan(data: &[Volume], cfg: &TrainConfig) -> Result<(Params, Params, StageReport)> {
    Trainer::new(cfg)?.train_gan(data)
}

pub fn train_encoder(data: &[Volume], g: &Params, d: &Params, cfg: &TrainConfig) -> Result<(Params, StageReport)> {
    Trainer::new(cfg)?.train_encoder(data, g, d)
}

pub fn refine_joint(data: &[Volume], g: &Params, d: &Params, e: &Params, cfg: &TrainConfig) -> Result<RefineOutput> {
    Trainer::new(cfg)?.refine_joint(data, g, d, e)
}

pub fn run_full_pipeline(data: &[Volume], cfg: &TrainConfig) -> Result<PipelineBundle> {
    Trainer::new(cfg)?.run_full_pipeline(data)
}
