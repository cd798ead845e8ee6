//! ROC and PR metrics against pairwise counting and hand sweeps.

use anodet3d::evaluation::{auc_pairwise, pr_per_lesion, roc_curve, trapezoid};
use anodet3d::scoring::{Label, LesionType, ScoreRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, Check};

pub const RANDOM_SETS: usize = 1000;

pub fn record(i: usize, score: f64, abnormal: bool, types: &[LesionType]) -> ScoreRecord {
    ScoreRecord {
        volume_id: format!("r{i}"),
        score,
        l_img: score,
        l_feat: 0.0,
        label: Some(if abnormal { Label::Abnormal } else { Label::Normal }),
        lesion_types: types.to_vec(),
    }
}

/// Between 2 and 200 records with both classes and scores drawn from a
/// small grid so ties are common.
pub fn random_set(rng: &mut ChaCha8Rng) -> Vec<ScoreRecord> {
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(1..=n.max(2));
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
    labels[0] = true;
    labels[1] = false;
    labels
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            let bump = if a { rng.random_range(0..=levels / 3) } else { 0 };
            let level = (rng.random_range(0..levels) + bump).min(levels);
            record(i, level as f64 / levels as f64, a, &[])
        })
        .collect()
}

/// Largest gap between the curve AUC and pairwise counting, and between the
/// curve AUC and a fresh trapezoid over its points.
pub fn worst_auc_disagreement(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pairwise, mut curve) = (0.0f64, 0.0f64);
    for _ in 0..RANDOM_SETS {
        let records = random_set(&mut rng);
        let roc = roc_curve(&records).unwrap();
        pairwise = pairwise.max((roc.auc - auc_pairwise(&records).unwrap()).abs());
        curve = curve.max((roc.auc - trapezoid(&roc.points)).abs());
    }
    (pairwise, curve)
}

pub fn run() -> Vec<Check> {
    let mut out = Vec::new();
    let (pairwise, curve) = worst_auc_disagreement(2024);
    out.push(check(
        "curve AUC equals pairwise AUC on random sets with ties",
        pairwise < 1e-9,
        format!("worst {pairwise:e} over {RANDOM_SETS} sets"),
    ));
    out.push(check("curve AUC equals the trapezoid of its points", curve < 1e-9, format!("worst {curve:e}")));

    let four: Vec<ScoreRecord> = [(0.1, false), (0.4, false), (0.35, true), (0.8, true)]
        .iter()
        .enumerate()
        .map(|(i, &(s, a))| record(i, s, a, &[]))
        .collect();
    let roc = roc_curve(&four).unwrap();
    out.push(check("four-record AUC is exactly 0.75", roc.auc == 0.75, format!("{}", roc.auc)));
    let pairs = auc_pairwise(&four).unwrap();
    out.push(check("four-record pairwise AUC is exactly 0.75", pairs == 0.75, format!("{pairs}")));
    let y = roc.youden;
    out.push(check(
        "four-record Youden point has recall 1, specificity 0.5, accuracy 0.75",
        (y.recall, y.specificity, y.accuracy) == (1.0, 0.5, 0.75),
        format!("{y:?}"),
    ));

    let t = LesionType::Subdural;
    let three = vec![record(0, 0.9, true, &[t]), record(1, 0.8, false, &[]), record(2, 0.7, true, &[t])];
    let ap = pr_per_lesion(&three, t).unwrap().average_precision;
    let hand = 1.0 * 0.5 + (2.0 / 3.0) * 0.5;
    out.push(check("three-record average precision matches the hand sweep", ap == hand, format!("{ap} vs {hand}")));
    out.push(check("three-record average precision is 0.8333", (ap - 0.8333).abs() < 1e-4, format!("{ap}")));
    out
}
