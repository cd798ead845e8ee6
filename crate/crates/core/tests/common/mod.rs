#![allow(dead_code)]

pub mod gradient_suite;
pub mod loss_suite;
pub mod metrics_suite;
pub mod preproc_suite;

use anodet3d::networks::{NetworkParams, NetworkSpec};
use anodet3d_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one named check inside a suite.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

/// Panics with every failed check of `suite`.
pub fn assert_suite(suite: &[Check]) {
    let failed: Vec<String> = suite
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    assert!(failed.is_empty(), "failed checks:\n{}", failed.join("\n"));
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        latent_dim: 8,
        volume_side: 16,
        channel_schedule: vec![8, 4],
        ..NetworkSpec::default()
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let len = n * 16 * 16 * 16;
    Tensor::new(vec![n, 1, 16, 16, 16], (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn random_latents(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::new(vec![n, 8], (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Relative errors are measured against `max(|a|, |b|, floor)`. The floor is
/// the gradient size at which the rounding noise of a central difference,
/// about `eps * |L| / STEP`, alone reaches `TOLERANCE`; smaller gradients are
/// compared in absolute terms.
pub const FLOOR: f64 = 1e-7;
pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

/// Compares `analytic` with central differences of `loss` at `count`
/// randomly chosen parameters and returns the worst relative error.
pub fn gradient_check<F>(params: &NetworkParams<f64>, analytic: &[Tensor<f64>], count: usize, seed: u64, loss: F) -> f64
where
    F: Fn(&NetworkParams<f64>) -> f64,
{
    gradient_check_among(params, analytic, count, seed, |_| true, loss)
}

/// As [`gradient_check`], sampling only tensors whose name passes `include`.
/// Returns NaN when every sampled gradient is exactly zero, since nothing
/// was compared.
pub fn gradient_check_among<F, I>(
    params: &NetworkParams<f64>,
    analytic: &[Tensor<f64>],
    count: usize,
    seed: u64,
    include: I,
    loss: F,
) -> f64
where
    F: Fn(&NetworkParams<f64>) -> f64,
    I: Fn(&str) -> bool,
{
    let sizes: Vec<usize> = params
        .tensors
        .iter()
        .map(|(name, t)| if include(name) { t.len() } else { 0 })
        .collect();
    let total: usize = sizes.iter().sum();
    assert!(total > 0, "no parameters selected");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = 4.0 * f64::EPSILON * loss(params).abs().max(1.0) / STEP;
    let floor = FLOOR.max(noise / TOLERANCE);
    let mut worst = 0.0f64;
    let mut informative = 0;
    for _ in 0..count {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let mut up = params.clone();
        up.tensors[which].1.data_mut()[flat] += STEP;
        let mut down = params.clone();
        down.tensors[which].1.data_mut()[flat] -= STEP;
        let numeric = (loss(&up) - loss(&down)) / (2.0 * STEP);
        let a = analytic[which].data()[flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if std::env::var_os("GRADCHECK_TRACE").is_some() {
            eprintln!("{} [{flat}] analytic {a:e} numeric {numeric:e} rel {rel:e}", params.tensors[which].0);
        }
        informative += usize::from(a != 0.0 || numeric != 0.0);
        worst = worst.max(rel);
    }
    if informative == 0 {
        return f64::NAN;
    }
    worst
}
