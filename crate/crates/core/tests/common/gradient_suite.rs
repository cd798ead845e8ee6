//! Analytic gradients of every loss against central finite differences.

use anodet3d::losses::{critic_loss_on_fakes, encoder_objective, generator_loss, EncoderLossConfig, EncoderTargets, GanLossConfig};
use anodet3d::networks::{generate, init_params, NetworkParams, NetworkSpec, Role};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradient_check, gradient_check_among, random_batch, random_latents};

pub const SAMPLED: usize = 25;

pub fn nets(spec: &NetworkSpec, seed: u64) -> (NetworkParams<f64>, NetworkParams<f64>, NetworkParams<f64>) {
    (
        init_params(spec, Role::Generator, seed).unwrap(),
        init_params(spec, Role::Critic, seed).unwrap(),
        init_params(spec, Role::Encoder, seed).unwrap(),
    )
}

/// Worst relative error of `dL_D / dD`.
pub fn critic_loss_error(spec: &NetworkSpec, seed: u64) -> f64 {
    let (g, d, _) = nets(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let real = random_batch(&mut rng, 2);
    let fake = generate(&g, &random_latents(&mut rng, 2)).unwrap();
    let cfg = GanLossConfig::default();
    let eps_rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let eval = |p: &NetworkParams<f64>| critic_loss_on_fakes(p, &real, &fake, &cfg, &mut eps_rng.clone()).unwrap();
    let analytic = eval(&d).grads;
    gradient_check(&d, &analytic, SAMPLED, seed, |p| eval(p).total)
}

/// Worst relative error of `dL_G / dG`.
pub fn generator_loss_error(spec: &NetworkSpec, seed: u64) -> f64 {
    let (g, d, _) = nets(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let z = random_latents(&mut rng, 2);
    let analytic = generator_loss(&d, &g, &z).unwrap().grads;
    gradient_check(&g, &analytic, SAMPLED, seed, |p| generator_loss(&d, p, &z).unwrap().total)
}

/// Whether critic tensor `name` sits at or below the feature tap, the only
/// critic parameters the encoder loss depends on.
pub fn feeds_feature_tap(spec: &NetworkSpec, name: &str) -> bool {
    name.strip_prefix("conv")
        .and_then(|rest| rest.split('.').next())
        .and_then(|level| level.parse::<usize>().ok())
        .is_some_and(|level| level <= spec.tap_level())
}

/// Worst relative errors of `dL_E` with respect to E, G and D.
pub fn encoder_loss_errors(spec: &NetworkSpec, seed: u64) -> [(&'static str, f64); 3] {
    let (g, d, e) = nets(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x = random_batch(&mut rng, 2);
    let cfg = EncoderLossConfig { kappa: 0.7 };
    let full = encoder_objective(&x, &g, &d, &e, &cfg, EncoderTargets::EncoderGeneratorCritic).unwrap();
    let total = |g: &NetworkParams<f64>, d: &NetworkParams<f64>, e: &NetworkParams<f64>| {
        encoder_objective(&x, g, d, e, &cfg, EncoderTargets::Encoder).unwrap().breakdown.total
    };
    [
        ("E", gradient_check(&e, &full.encoder_grads, SAMPLED, seed, |p| total(&g, &d, p))),
        ("G", gradient_check(&g, full.generator_grads.as_ref().unwrap(), SAMPLED, seed + 1, |p| total(p, &d, &e))),
        (
            "D",
            gradient_check_among(
                &d,
                full.critic_grads.as_ref().unwrap(),
                SAMPLED,
                seed + 2,
                |name| feeds_feature_tap(spec, name),
                |p| total(&g, p, &e),
            ),
        ),
    ]
}
