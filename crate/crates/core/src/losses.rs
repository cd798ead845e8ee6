//! Training objectives: WGAN-GP critic and generator losses, image and
//! feature reconstruction losses and the encoder loss built from them.
//!
//! The gradient penalty needs the critic's input gradient as a
//! differentiable quantity. It is obtained with a first call to
//! [`Graph::grad`] with respect to the interpolates; because every backward
//! rule is itself a graph op, the resulting norm is differentiated with
//! respect to the critic weights by a second, ordinary backward pass
//! (double backward).

use anodet3d_autograd::{Graph, NodeId, Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{
    critic_graph, encoder_graph, generate, generator_graph, CriticNodes, FeatureVector, NetworkParams, Role,
};
use crate::volume::Volume;

/// Added under the square root of the squared gradient norm so the penalty
/// stays differentiable when a critic is locally flat.
pub const NORM_FLOOR: f64 = 1e-16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanLossConfig {
    pub lambda_gp: f64,
    pub n_critic: usize,
}

impl Default for GanLossConfig {
    fn default() -> Self {
        GanLossConfig {
            lambda_gp: 10.0,
            n_critic: 5,
        }
    }
}

impl GanLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0 && self.lambda_gp.is_finite()) || self.n_critic == 0 {
            return Err(Error::InvalidArgument(format!("bad GAN loss config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderLossConfig {
    pub kappa: f64,
}

impl Default for EncoderLossConfig {
    fn default() -> Self {
        EncoderLossConfig { kappa: 1.0 }
    }
}

impl EncoderLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidArgument(format!("kappa {} must be finite and >= 0", self.kappa)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_img: f64,
    pub l_feat: f64,
}

impl LossBreakdown {
    pub fn new(l_img: f64, l_feat: f64, kappa: f64) -> Self {
        LossBreakdown {
            total: l_img + kappa * l_feat,
            l_img,
            l_feat,
        }
    }
}

/// A parameterized map whose weights can be placed in a graph.
pub trait Model<T: Real> {
    fn tensors(&self) -> Vec<&Tensor<T>>;

    fn check_role(&self, _role: Role) -> Result<()> {
        Ok(())
    }

    fn bind(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.tensors().into_iter().map(|t| g.leaf(t.clone())).collect()
    }
}

pub trait CriticModel<T: Real>: Model<T> {
    /// `x: [n, ..] -> score [n, 1]` plus feature activations `[n, m]`.
    fn critic(&self, g: &mut Graph<T>, params: &[NodeId], x: NodeId) -> CriticNodes;
}

pub trait GeneratorModel<T: Real>: Model<T> {
    fn generator(&self, g: &mut Graph<T>, params: &[NodeId], z: NodeId) -> NodeId;
}

pub trait EncoderModel<T: Real>: Model<T> {
    fn encoder(&self, g: &mut Graph<T>, params: &[NodeId], x: NodeId) -> NodeId;
}

impl<T: Real> Model<T> for NetworkParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.tensors.iter().map(|(_, t)| t).collect()
    }

    fn check_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                role.tag(),
                self.role.tag()
            )));
        }
        self.check_layout()
    }
}

impl<T: Real> CriticModel<T> for NetworkParams<T> {
    fn critic(&self, g: &mut Graph<T>, params: &[NodeId], x: NodeId) -> CriticNodes {
        critic_graph(g, &self.spec, params, x)
    }
}

impl<T: Real> GeneratorModel<T> for NetworkParams<T> {
    fn generator(&self, g: &mut Graph<T>, params: &[NodeId], z: NodeId) -> NodeId {
        generator_graph(g, &self.spec, params, z)
    }
}

impl<T: Real> EncoderModel<T> for NetworkParams<T> {
    fn encoder(&self, g: &mut Graph<T>, params: &[NodeId], x: NodeId) -> NodeId {
        encoder_graph(g, &self.spec, params, x)
    }
}

fn collect_grads<T: Real>(g: &mut Graph<T>, loss: NodeId, params: &[NodeId]) -> Vec<Tensor<T>> {
    let ids = g.grad(loss, params);
    ids.into_iter().map(|id| g.value(id).clone()).collect()
}

/// Per-sample interpolation weights, `Uniform[0, 1)`; the penalty draws
/// exactly `n` of them from the supplied generator before anything else.
pub fn sample_epsilons<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// `eps * real + (1 - eps) * fake`, one weight per sample.
pub fn interpolate<T: Real>(x_real: &Tensor<T>, x_fake: &Tensor<T>, eps: &[f64]) -> Tensor<T> {
    let n = x_real.shape()[0];
    let per = x_real.len() / n.max(1);
    let mut data = Vec::with_capacity(x_real.len());
    for (i, (r, f)) in x_real.data().chunks(per).zip(x_fake.data().chunks(per)).enumerate() {
        let e = T::of(eps[i]);
        data.extend(r.iter().zip(f).map(|(&a, &b)| e * a + (T::one() - e) * b));
    }
    Tensor::new(x_real.shape().to_vec(), data)
}

fn check_same_batch<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() || a.shape().is_empty() || a.shape()[0] == 0 {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Adds the penalty term for the interpolates `x_hat` to the graph:
/// `mean_i (||grad_x D(x_hat_i)|| - 1)^2`.
fn penalty_node<T: Real, C: CriticModel<T> + ?Sized>(
    g: &mut Graph<T>,
    critic: &C,
    params: &[NodeId],
    x_hat: Tensor<T>,
) -> NodeId {
    let n = x_hat.shape()[0];
    let xh = g.leaf(x_hat);
    let scores = critic.critic(g, params, xh).score;
    // samples are independent, so d(sum)/dx_i is the per-sample gradient
    let total = g.sum_all(scores);
    let gx = g.grad(total, &[xh])[0];
    let sq = g.square(gx);
    let per_sample = g.sum_inner(sq, n);
    let floored = g.add_scalar(per_sample, T::of(NORM_FLOOR));
    let norm = g.powf(floored, T::of(0.5));
    let dev = g.add_scalar(norm, -T::one());
    let dev2 = g.square(dev);
    g.mean_all(dev2)
}

/// Value of the gradient penalty on interpolates between two batches.
pub fn gradient_penalty<T: Real, C: CriticModel<T> + ?Sized, R: Rng + ?Sized>(
    critic: &C,
    x_real: &Tensor<T>,
    x_fake: &Tensor<T>,
    rng: &mut R,
) -> Result<f64> {
    critic.check_role(Role::Critic)?;
    check_same_batch(x_real, x_fake)?;
    let eps = sample_epsilons(rng, x_real.shape()[0]);
    let mut g = Graph::new();
    let params = critic.bind(&mut g);
    let pen = penalty_node(&mut g, critic, &params, interpolate(x_real, x_fake, &eps));
    Ok(g.value(pen).item().as_f64())
}

#[derive(Debug, Clone)]
pub struct CriticLoss<T> {
    pub total: f64,
    pub real_mean: f64,
    pub fake_mean: f64,
    pub penalty: f64,
    /// d total / d critic weights, in storage order.
    pub grads: Vec<Tensor<T>>,
}

impl<T> CriticLoss<T> {
    /// `E[D(real)] - E[D(fake)]`, the critic's Wasserstein estimate.
    pub fn wasserstein(&self) -> f64 {
        self.real_mean - self.fake_mean
    }
}

/// Critic loss against a fixed batch of generated samples.
pub fn critic_loss_on_fakes<T: Real, C: CriticModel<T> + ?Sized, R: Rng + ?Sized>(
    critic: &C,
    x_real: &Tensor<T>,
    x_fake: &Tensor<T>,
    cfg: &GanLossConfig,
    rng: &mut R,
) -> Result<CriticLoss<T>> {
    critic.check_role(Role::Critic)?;
    check_same_batch(x_real, x_fake)?;
    let n = x_real.shape()[0];
    let eps = sample_epsilons(rng, n);
    let x_hat = interpolate(x_real, x_fake, &eps);

    let mut g = Graph::new();
    let params = critic.bind(&mut g);

    let mut both_shape = x_real.shape().to_vec();
    both_shape[0] = 2 * n;
    let mut both = x_real.data().to_vec();
    both.extend_from_slice(x_fake.data());
    let both = g.leaf(Tensor::new(both_shape, both));
    let scores = critic.critic(&mut g, &params, both).score;
    let inv_n = 1.0 / n as f64;
    let weights: Vec<T> = (0..2 * n).map(|i| T::of(if i < n { -inv_n } else { inv_n })).collect();
    let w = g.leaf(Tensor::new(vec![2 * n, 1], weights));
    let weighted = g.mul(scores, w);
    let wasserstein_term = g.sum_all(weighted);

    let penalty = penalty_node(&mut g, critic, &params, x_hat);
    let scaled = g.scale(penalty, T::of(cfg.lambda_gp));
    let loss = g.add(wasserstein_term, scaled);

    let s = g.value(scores).data();
    let real_mean = s[..n].iter().map(|v| v.as_f64()).sum::<f64>() * inv_n;
    let fake_mean = s[n..].iter().map(|v| v.as_f64()).sum::<f64>() * inv_n;
    let penalty_value = g.value(penalty).item().as_f64();
    let total = g.value(loss).item().as_f64();
    let grads = collect_grads(&mut g, loss, &params);
    Ok(CriticLoss {
        total,
        real_mean,
        fake_mean,
        penalty: penalty_value,
        grads,
    })
}

/// `E[D(G(z))] - E[D(x_real)] + lambda * GP`, differentiated w.r.t. the critic.
pub fn critic_loss<T: Real, R: Rng + ?Sized>(
    critic: &NetworkParams<T>,
    generator: &NetworkParams<T>,
    x_real: &Tensor<T>,
    z: &Tensor<T>,
    cfg: &GanLossConfig,
    rng: &mut R,
) -> Result<CriticLoss<T>> {
    if z.shape()[0] != x_real.shape()[0] {
        return Err(Error::LengthMismatch {
            left: x_real.shape()[0],
            right: z.shape()[0],
        });
    }
    let fake = generate(generator, z)?;
    critic_loss_on_fakes(critic, x_real, &fake, cfg, rng)
}

#[derive(Debug, Clone)]
pub struct GeneratorLoss<T> {
    pub total: f64,
    /// d total / d generator weights, in storage order.
    pub grads: Vec<Tensor<T>>,
}

/// `-E[D(G(z))]`, differentiated w.r.t. the generator.
pub fn generator_loss<T: Real, C, G>(critic: &C, generator: &G, z: &Tensor<T>) -> Result<GeneratorLoss<T>>
where
    C: CriticModel<T> + ?Sized,
    G: GeneratorModel<T> + ?Sized,
{
    critic.check_role(Role::Critic)?;
    generator.check_role(Role::Generator)?;
    if z.shape().len() != 2 || z.shape()[0] == 0 {
        return Err(Error::shape(&[1, 0], z.shape()));
    }
    let mut g = Graph::new();
    let gp = generator.bind(&mut g);
    let dp = critic.bind(&mut g);
    let zi = g.leaf(z.clone());
    let fake = generator.generator(&mut g, &gp, zi);
    let scores = critic.critic(&mut g, &dp, fake).score;
    let mean = g.mean_all(scores);
    let loss = g.scale(mean, -T::one());
    let total = g.value(loss).item().as_f64();
    let grads = collect_grads(&mut g, loss, &gp);
    Ok(GeneratorLoss { total, grads })
}

/// `(1/n) * sum (x - x_rec)^2`.
pub fn image_loss(x: &Volume, x_rec: &Volume) -> Result<f64> {
    if x.shape() != x_rec.shape() {
        return Err(Error::shape(&x.shape(), &x_rec.shape()));
    }
    Ok(mean_squared(x.data(), x_rec.data()))
}

/// `(1/m) * sum (f_x - f_rec)^2`.
pub fn feature_loss(f_x: &FeatureVector, f_rec: &FeatureVector) -> Result<f64> {
    if f_x.len() != f_rec.len() {
        return Err(Error::LengthMismatch {
            left: f_x.len(),
            right: f_rec.len(),
        });
    }
    if f_x.is_empty() {
        return Err(Error::InvalidArgument("empty feature vectors".into()));
    }
    Ok(mean_squared(&f_x.values, &f_rec.values))
}

fn mean_squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
}

/// Which networks receive gradients from the encoder loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderTargets {
    #[default]
    Encoder,
    EncoderGenerator,
    EncoderGeneratorCritic,
}

#[derive(Debug, Clone)]
pub struct EncoderObjective<T> {
    /// Batch means of both terms.
    pub breakdown: LossBreakdown,
    pub encoder_grads: Vec<Tensor<T>>,
    pub generator_grads: Option<Vec<Tensor<T>>>,
    pub critic_grads: Option<Vec<Tensor<T>>>,
}

/// `L_img + kappa * L_feat` on `x -> E -> G -> x_rec`, averaged over the batch.
pub fn encoder_objective<T, G, C, E>(
    x: &Tensor<T>,
    generator: &G,
    critic: &C,
    encoder: &E,
    cfg: &EncoderLossConfig,
    targets: EncoderTargets,
) -> Result<EncoderObjective<T>>
where
    T: Real,
    G: GeneratorModel<T> + ?Sized,
    C: CriticModel<T> + ?Sized,
    E: EncoderModel<T> + ?Sized,
{
    generator.check_role(Role::Generator)?;
    critic.check_role(Role::Critic)?;
    encoder.check_role(Role::Encoder)?;
    if x.shape().is_empty() || x.shape()[0] == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut g = Graph::new();
    let gp = generator.bind(&mut g);
    let dp = critic.bind(&mut g);
    let ep = encoder.bind(&mut g);
    let xi = g.leaf(x.clone());
    let z = encoder.encoder(&mut g, &ep, xi);
    let rec = generator.generator(&mut g, &gp, z);
    if g.shape(rec) != x.shape() {
        return Err(Error::shape(x.shape(), g.shape(rec)));
    }
    let diff = g.sub(xi, rec);
    let d2 = g.square(diff);
    let l_img = g.mean_all(d2);

    let f_real = critic.critic(&mut g, &dp, xi).features;
    let f_rec = critic.critic(&mut g, &dp, rec).features;
    let fd = g.sub(f_real, f_rec);
    let fd2 = g.square(fd);
    let l_feat = g.mean_all(fd2);
    let weighted = g.scale(l_feat, T::of(cfg.kappa));
    let loss = g.add(l_img, weighted);

    let breakdown = LossBreakdown::new(
        g.value(l_img).item().as_f64(),
        g.value(l_feat).item().as_f64(),
        cfg.kappa,
    );
    let mut wrt = ep.clone();
    if targets != EncoderTargets::Encoder {
        wrt.extend(&gp);
    }
    if targets == EncoderTargets::EncoderGeneratorCritic {
        wrt.extend(&dp);
    }
    let mut grads = collect_grads(&mut g, loss, &wrt).into_iter();
    let encoder_grads = grads.by_ref().take(ep.len()).collect();
    let generator_grads = (targets != EncoderTargets::Encoder).then(|| grads.by_ref().take(gp.len()).collect());
    let critic_grads = (targets == EncoderTargets::EncoderGeneratorCritic).then(|| grads.collect());
    Ok(EncoderObjective {
        breakdown,
        encoder_grads,
        generator_grads,
        critic_grads,
    })
}

/// Encoder loss of a single volume; value only.
pub fn encoder_loss<T: Real>(
    x: &Volume,
    generator: &NetworkParams<T>,
    critic: &NetworkParams<T>,
    encoder: &NetworkParams<T>,
    cfg: &EncoderLossConfig,
) -> Result<LossBreakdown> {
    let xt = crate::networks::volumes_to_tensor(&encoder.spec, &[x])?;
    Ok(encoder_objective(&xt, generator, critic, encoder, cfg, EncoderTargets::Encoder)?.breakdown)
}
