//! ROC/AUC, the Youden operating point and per-lesion precision-recall.
//!
//! Every curve sweeps thresholds over the unique scores, so tied records
//! always change class together. A point's `threshold` is the value that
//! reproduces it under [`classify`] (abnormal iff `score > threshold`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json_atomic};
use crate::scoring::{classify, Label, LesionType, ScoreRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YoudenPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    /// From `(0, 0)` at the highest threshold to `(1, 1)` below the lowest score.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub youden: YoudenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrResult {
    pub lesion_type: LesionType,
    /// One point per tie group, in order of decreasing threshold.
    pub points: Vec<PrPoint>,
    pub average_precision: f64,
}

/// `(score, positive)` pairs; rejects unlabeled records and non-finite scores.
fn labeled(records: &[ScoreRecord]) -> Result<Vec<(f64, bool)>> {
    records
        .iter()
        .map(|r| {
            if !r.score.is_finite() {
                return Err(Error::InvalidArgument(format!("{}: non-finite score {}", r.volume_id, r.score)));
            }
            match r.label {
                Some(l) => Ok((r.score, l == Label::Abnormal)),
                None => Err(Error::DegenerateLabels(format!("{} has no label", r.volume_id))),
            }
        })
        .collect()
}

fn check_both_classes(pairs: &[(f64, bool)], what: &str) -> Result<(usize, usize)> {
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{what} needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Tie groups by decreasing score: `(score, positives, negatives)`.
fn tie_groups(pairs: &[(f64, bool)]) -> Vec<(f64, usize, usize)> {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (s, pos) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == s => {}
            _ => groups.push((s, 0, 0)),
        }
        let g = groups.last_mut().unwrap();
        if pos {
            g.1 += 1;
        } else {
            g.2 += 1;
        }
    }
    groups
}

/// Threshold that includes groups `0..=k`: the next lower score, or just below the minimum.
fn threshold_after(groups: &[(f64, usize, usize)], k: usize) -> f64 {
    groups.get(k + 1).map_or_else(|| groups[k].0.next_down(), |g| g.0)
}

pub fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn roc_curve(records: &[ScoreRecord]) -> Result<RocResult> {
    let pairs = labeled(records)?;
    let (p, n) = check_both_classes(&pairs, "ROC")?;
    let groups = tie_groups(&pairs);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: groups[0].0,
    }];
    let (mut tp, mut fp) = (0, 0);
    for (k, g) in groups.iter().enumerate() {
        tp += g.1;
        fp += g.2;
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: threshold_after(&groups, k),
        });
    }
    let auc = trapezoid(&points);
    let youden = youden_point(&points, records)?;
    Ok(RocResult { points, auc, youden })
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn auc_pairwise(records: &[ScoreRecord]) -> Result<f64> {
    let pairs = labeled(records)?;
    let (p, n) = check_both_classes(&pairs, "AUC")?;
    let mut credit = 0.0;
    for &(sp, _) in pairs.iter().filter(|x| x.1) {
        for &(sn, _) in pairs.iter().filter(|x| !x.1) {
            if sp > sn {
                credit += 1.0;
            } else if sp == sn {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(records: &[ScoreRecord], threshold: f64) -> Result<Self> {
        let mut c = Confusion::default();
        for (score, pos) in labeled(records)? {
            match (classify(score, threshold) == Label::Abnormal, pos) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.tn + self.fp + self.fn_) as f64
    }
}

/// Maximizes `tpr - fpr`; among equal maxima the lowest threshold wins.
pub fn youden_point(points: &[RocPoint], records: &[ScoreRecord]) -> Result<YoudenPoint> {
    let best = points
        .iter()
        .fold(None::<&RocPoint>, |best, p| match best {
            Some(b) if b.tpr - b.fpr > p.tpr - p.fpr => Some(b),
            _ => Some(p),
        })
        .ok_or_else(|| Error::InvalidArgument("empty ROC".into()))?;
    let c = Confusion::at(records, best.threshold)?;
    Ok(YoudenPoint {
        threshold: best.threshold,
        tpr: best.tpr,
        fpr: best.fpr,
        accuracy: c.accuracy(),
        recall: best.tpr,
        specificity: 1.0 - best.fpr,
    })
}

/// Positives carry `lesion_type`; negatives are normal records. Abnormal
/// records without the type are left out.
pub fn pr_per_lesion(records: &[ScoreRecord], lesion_type: LesionType) -> Result<PrResult> {
    let mut pairs = Vec::new();
    for (r, (score, abnormal)) in records.iter().zip(labeled(records)?) {
        if !abnormal {
            pairs.push((score, false));
        } else if r.lesion_types.contains(&lesion_type) {
            pairs.push((score, true));
        }
    }
    let (p, _) = check_both_classes(&pairs, &format!("PR for {}", lesion_type.name()))?;
    let groups = tie_groups(&pairs);
    let mut points = Vec::with_capacity(groups.len());
    let (mut tp, mut fp) = (0, 0);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, g) in groups.iter().enumerate() {
        tp += g.1;
        fp += g.2;
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint {
            recall,
            precision,
            threshold: threshold_after(&groups, k),
        });
    }
    Ok(PrResult {
        lesion_type,
        points,
        average_precision: ap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub auc: f64,
    pub youden: YoudenPoint,
    pub ap_per_lesion: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub roc: RocResult,
    pub pr: Vec<PrResult>,
}

impl Evaluation {
    pub fn summary(&self) -> Summary {
        Summary {
            auc: self.roc.auc,
            youden: self.roc.youden,
            ap_per_lesion: self
                .pr
                .iter()
                .map(|p| (p.lesion_type.name().to_string(), p.average_precision))
                .collect(),
        }
    }
}

/// ROC over all records plus a PR curve for every lesion type that occurs.
pub fn evaluate(records: &[ScoreRecord]) -> Result<Evaluation> {
    let roc = roc_curve(records)?;
    let mut types: Vec<LesionType> = records
        .iter()
        .filter(|r| r.label == Some(Label::Abnormal))
        .flat_map(|r| r.lesion_types.iter().copied())
        .collect();
    types.sort();
    types.dedup();
    let pr = types
        .into_iter()
        .map(|t| pr_per_lesion(records, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { roc, pr })
}

pub const ROC_HEADER: &str = "fpr,tpr,threshold";
pub const PR_HEADER: &str = "recall,precision,threshold";

fn write_rows(path: &Path, header: &str, rows: impl Iterator<Item = [f64; 3]>) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for [a, b, c] in rows {
        writeln!(out, "{a},{b},{c}").unwrap();
    }
    write_atomic(path, out.as_bytes())
}

fn read_rows(path: &Path, header: &str) -> Result<Vec<[f64; 3]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(bad(format!("expected header {header:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            <[f64; 3]>::try_from(vals).map_err(|_| bad(format!("line {}: expected 3 fields", i + 2)))
        })
        .collect()
}

pub fn write_roc_csv(path: &Path, roc: &RocResult) -> Result<()> {
    write_rows(path, ROC_HEADER, roc.points.iter().map(|p| [p.fpr, p.tpr, p.threshold]))
}

pub fn read_roc_csv(path: &Path) -> Result<Vec<RocPoint>> {
    Ok(read_rows(path, ROC_HEADER)?
        .into_iter()
        .map(|[fpr, tpr, threshold]| RocPoint { fpr, tpr, threshold })
        .collect())
}

pub fn write_pr_csv(path: &Path, pr: &PrResult) -> Result<()> {
    write_rows(path, PR_HEADER, pr.points.iter().map(|p| [p.recall, p.precision, p.threshold]))
}

pub fn read_pr_csv(path: &Path) -> Result<Vec<PrPoint>> {
    Ok(read_rows(path, PR_HEADER)?
        .into_iter()
        .map(|[recall, precision, threshold]| PrPoint {
            recall,
            precision,
            threshold,
        })
        .collect())
}

pub fn pr_file_name(t: LesionType) -> String {
    format!("pr_{}.csv", t.name())
}

/// `roc.csv`, `pr_<lesion>.csv` and `summary.json` in `dir`; returns the file names.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec!["roc.csv".to_string()];
    write_roc_csv(&dir.join("roc.csv"), &eval.roc)?;
    for pr in &eval.pr {
        let name = pr_file_name(pr.lesion_type);
        write_pr_csv(&dir.join(&name), pr)?;
        files.push(name);
    }
    write_json_atomic(&dir.join("summary.json"), &eval.summary())?;
    files.push("summary.json".into());
    Ok(files)
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    read_json(path)
}
