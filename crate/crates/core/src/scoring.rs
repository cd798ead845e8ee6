//! Anomaly scores, residual maps and threshold classification.

use std::fmt::Write as _;
use std::path::Path;

use anodet3d_autograd::{Real, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{EncoderLossConfig, LossBreakdown};
use crate::networks::{critique, encode, generate};
use crate::training::PipelineBundle;
use crate::volume::{IntensityDomain, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            _ => Err(Error::InvalidArgument(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionType {
    Epidural,
    Subdural,
    Intraparenchymal,
    Other,
}

impl LesionType {
    pub const ALL: [LesionType; 4] = [
        LesionType::Epidural,
        LesionType::Subdural,
        LesionType::Intraparenchymal,
        LesionType::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LesionType::Epidural => "epidural",
            LesionType::Subdural => "subdural",
            LesionType::Intraparenchymal => "intraparenchymal",
            LesionType::Other => "other",
        }
    }
}

impl std::str::FromStr for LesionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LesionType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown lesion type {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub volume_id: String,
    pub score: f64,
    pub l_img: f64,
    pub l_feat: f64,
    pub label: Option<Label>,
    /// Empty when unknown or not applicable.
    pub lesion_types: Vec<LesionType>,
}

impl ScoreRecord {
    pub fn new(volume_id: &str, b: &LossBreakdown) -> Self {
        ScoreRecord {
            volume_id: volume_id.to_string(),
            score: b.total,
            l_img: b.l_img,
            l_feat: b.l_feat,
            label: None,
            lesion_types: Vec::new(),
        }
    }

    pub fn labeled(mut self, label: Label, lesion_types: &[LesionType]) -> Self {
        self.label = Some(label);
        self.lesion_types = lesion_types.to_vec();
        self
    }
}

/// Reconstruction and critic features of a trained model.
pub trait AnomalyModel: Sync {
    fn volume_shape(&self) -> [usize; 3];

    /// `G(E(x))` for a `[n, 1, d, h, w]` batch.
    fn reconstruct(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;

    /// `[n, m]` critic features.
    fn features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Scoring view of a bundle whose three networks all finished training.
#[derive(Debug, Clone, Copy)]
pub struct TrainedModel<'a> {
    bundle: &'a PipelineBundle,
}

impl<'a> TrainedModel<'a> {
    pub fn new(bundle: &'a PipelineBundle) -> Result<Self> {
        for p in [&bundle.generator, &bundle.critic, &bundle.encoder] {
            if p.stage.is_none() {
                return Err(Error::UntrainedBundle(format!("{} has no finalized checkpoint", p.role.tag())));
            }
        }
        Ok(TrainedModel { bundle })
    }
}

impl AnomalyModel for TrainedModel<'_> {
    fn volume_shape(&self) -> [usize; 3] {
        self.bundle.encoder.spec.volume_shape()
    }

    fn reconstruct(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        generate(&self.bundle.generator, &encode(&self.bundle.encoder, x)?)
    }

    fn features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(critique(&self.bundle.critic, x)?.1)
    }
}

fn input_tensor<M: AnomalyModel + ?Sized>(model: &M, x: &Volume) -> Result<Tensor<f32>> {
    let shape = model.volume_shape();
    if x.shape() != shape {
        return Err(Error::shape(&shape, &x.shape()));
    }
    if x.domain() != IntensityDomain::Normalized {
        return Err(Error::DomainMismatch {
            expected: IntensityDomain::Normalized.name(),
            found: x.domain().name(),
        });
    }
    let [d, h, w] = shape;
    Ok(Tensor::new(vec![1, 1, d, h, w], x.data().iter().map(|&v| v as f32).collect()))
}

fn mean_sq_diff(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut n = 0;
    let sum = a
        .zip(b)
        .map(|(p, q)| {
            n += 1;
            (p - q) * (p - q)
        })
        .sum::<f64>();
    (sum / n as f64, n)
}

/// `L_img(x, G(E(x))) + kappa * L_feat(f(x), f(G(E(x))))`.
pub fn anomaly_score<M: AnomalyModel + ?Sized>(x: &Volume, model: &M, cfg: &EncoderLossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let xt = input_tensor(model, x)?;
    let rec = model.reconstruct(&xt)?;
    let (l_img, _) = mean_sq_diff(x.data().iter().copied(), rec.data().iter().map(|v| v.as_f64()));
    let fx = model.features(&xt)?;
    let frec = model.features(&rec)?;
    let (l_feat, _) = mean_sq_diff(fx.data().iter().map(|v| v.as_f64()), frec.data().iter().map(|v| v.as_f64()));
    Ok(LossBreakdown::new(l_img, l_feat, cfg.kappa))
}

/// `|x - G(E(x))|` per voxel, ARBITRARY domain.
pub fn residual_map<M: AnomalyModel + ?Sized>(x: &Volume, model: &M) -> Result<Volume> {
    let xt = input_tensor(model, x)?;
    let rec = model.reconstruct(&xt)?;
    let data = x.data().iter().zip(rec.data()).map(|(&a, &b)| (a - b.as_f64()).abs()).collect();
    x.with_data(IntensityDomain::Arbitrary, data)
}

/// Abnormal iff `score > threshold`.
pub fn classify(score: f64, threshold: f64) -> Label {
    if score > threshold {
        Label::Abnormal
    } else {
        Label::Normal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    /// Input order, failed volumes omitted.
    pub records: Vec<ScoreRecord>,
    /// `(volume_id, reason)` for every volume that could not be scored.
    pub failures: Vec<(String, String)>,
}

/// Scores every `(id, volume)` pair, in parallel, keeping input order.
pub fn batch_score<M: AnomalyModel + ?Sized>(
    volumes: &[(String, Volume)],
    model: &M,
    cfg: &EncoderLossConfig,
) -> BatchScores {
    let results: Vec<(String, Result<LossBreakdown>)> = volumes
        .par_iter()
        .map(|(id, v)| (id.clone(), anomaly_score(v, model, cfg)))
        .collect();
    let mut out = BatchScores {
        records: Vec::new(),
        failures: Vec::new(),
    };
    for (id, r) in results {
        match r {
            Ok(b) => out.records.push(ScoreRecord::new(&id, &b)),
            Err(e) => out.failures.push((id, e.to_string())),
        }
    }
    out
}

pub const SCORES_HEADER: &str = "volume_id,score,l_img,l_feat,label,lesion_types";

/// `scores.csv`; lesion types are `;`-separated.
pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut out = format!("{SCORES_HEADER}\n");
    for r in records {
        let label = r.label.map(Label::name).unwrap_or("");
        let types: Vec<&str> = r.lesion_types.iter().map(|t| t.name()).collect();
        let _ = writeln!(out, "{},{},{},{},{},{}", r.volume_id, r.score, r.l_img, r.l_feat, label, types.join(";"));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SCORES_HEADER => {}
        _ => return Err(bad(1, format!("expected header {SCORES_HEADER:?}"))),
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(i + 1, format!("expected 6 fields, found {}", fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
        let label = match fields[4] {
            "" => None,
            s => Some(s.parse().map_err(|e: Error| bad(i + 1, e.to_string()))?),
        };
        let lesion_types = fields[5]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e: Error| bad(i + 1, e.to_string())))
            .collect::<Result<_>>()?;
        records.push(ScoreRecord {
            volume_id: fields[0].to_string(),
            score: num(fields[1])?,
            l_img: num(fields[2])?,
            l_feat: num(fields[3])?,
            label,
            lesion_types,
        });
    }
    Ok(records)
}

/// Scores through the networks of a bundle; see [`TrainedModel`].
pub fn score_with_bundle(x: &Volume, bundle: &PipelineBundle, cfg: &EncoderLossConfig) -> Result<LossBreakdown> {
    anomaly_score(x, &TrainedModel::new(bundle)?, cfg)
}
