//! Worked examples and invariants of the training objectives, each checked
//! against an independent hand or naive computation.

use anodet3d::losses::{
    critic_loss, critic_loss_on_fakes, encoder_loss, encoder_objective, feature_loss, generator_loss, gradient_penalty,
    image_loss, sample_epsilons, CriticModel, EncoderLossConfig, EncoderModel, EncoderTargets, GanLossConfig,
    GeneratorModel, Model,
};
use anodet3d::networks::{
    critic_graph, critique, discriminator_forward, encoder_forward, generator_forward, init_params, tensor_to_volumes,
    CriticNodes, FeatureVector, LatentCode, NetworkParams, NetworkSpec, Role,
};
use anodet3d::{IntensityDomain, Volume};
use anodet3d_autograd::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, close, random_batch, random_latents, tiny_spec, Check};

/// `D(x) = a * sum(x) + b * sum(x^2)` per sample; features are `sum(x)`.
pub struct QuadraticCritic {
    weights: Vec<Tensor<f64>>,
}

impl QuadraticCritic {
    pub fn new(a: f64, b: f64) -> Self {
        QuadraticCritic {
            weights: vec![Tensor::new(vec![1, 1], vec![a]), Tensor::new(vec![1, 1], vec![b])],
        }
    }

    /// The same critic evaluated by plain loops.
    pub fn score(&self, x: &[f64]) -> f64 {
        let (a, b) = (self.weights[0].data()[0], self.weights[1].data()[0]);
        x.iter().map(|v| a * v + b * v * v).sum()
    }

    pub fn input_gradient_norm(&self, x: &[f64]) -> f64 {
        let (a, b) = (self.weights[0].data()[0], self.weights[1].data()[0]);
        x.iter().map(|v| (a + 2.0 * b * v).powi(2)).sum::<f64>().sqrt()
    }
}

impl Model<f64> for QuadraticCritic {
    fn tensors(&self) -> Vec<&Tensor<f64>> {
        self.weights.iter().collect()
    }
}

impl CriticModel<f64> for QuadraticCritic {
    fn critic(&self, g: &mut Graph<f64>, p: &[NodeId], x: NodeId) -> CriticNodes {
        let n = g.shape(x)[0];
        let s1 = g.sum_inner(x, n);
        let s1 = g.reshape(s1, vec![n, 1]);
        let sq = g.square(x);
        let s2 = g.sum_inner(sq, n);
        let s2 = g.reshape(s2, vec![n, 1]);
        let lin = g.matmul(s1, p[0]);
        let quad = g.matmul(s2, p[1]);
        CriticNodes {
            score: g.add(lin, quad),
            features: s1,
        }
    }
}

/// Parameter-free `E` and `G` whose composition is the identity on 4^3 volumes.
pub struct Flatten;
pub struct Unflatten;

impl Model<f64> for Flatten {
    fn tensors(&self) -> Vec<&Tensor<f64>> {
        Vec::new()
    }
}

impl EncoderModel<f64> for Flatten {
    fn encoder(&self, g: &mut Graph<f64>, _: &[NodeId], x: NodeId) -> NodeId {
        let n = g.shape(x)[0];
        g.reshape(x, vec![n, 64])
    }
}

impl Model<f64> for Unflatten {
    fn tensors(&self) -> Vec<&Tensor<f64>> {
        Vec::new()
    }
}

impl GeneratorModel<f64> for Unflatten {
    fn generator(&self, g: &mut Graph<f64>, _: &[NodeId], z: NodeId) -> NodeId {
        let n = g.shape(z)[0];
        g.reshape(z, vec![n, 1, 4, 4, 4])
    }
}

fn batch4(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::new(vec![n, 1, 4, 4, 4], (0..n * 64).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Tiny critic with zero head weights and head bias `c`.
fn constant_critic(c: f64) -> NetworkParams<f64> {
    let mut d = init_params::<f64>(&tiny_spec(), Role::Critic, 3).unwrap();
    d.get_mut("head.weight").unwrap().data_mut().fill(0.0);
    d.get_mut("head.bias").unwrap().data_mut().fill(c);
    d
}

fn penalty_examples(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let real = random_batch(&mut rng, 3);
    let fake = random_batch(&mut rng, 3);

    let p = gradient_penalty(&constant_critic(0.7), &real, &fake, &mut rng).unwrap();
    out.push(check("penalty of a constant critic is 1", close(p, 1.0, 1e-6), format!("{p}")));

    // slope 1 makes the critic linear, so its input gradient is one fixed vector
    let spec = NetworkSpec {
        leaky_slope: 1.0,
        ..tiny_spec()
    };
    let mut d = init_params::<f64>(&spec, Role::Critic, 8).unwrap();
    let mut g = Graph::new();
    let p = d.bind(&mut g);
    let xi = g.leaf(random_batch(&mut rng, 1));
    let s = critic_graph(&mut g, &spec, &p, xi).score;
    let gx = g.grad(s, &[xi])[0];
    let norm = g.value(gx).data().iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in d.get_mut("head.weight").unwrap().data_mut() {
        *v /= norm;
    }
    let p = gradient_penalty(&d, &real, &fake, &mut rng).unwrap();
    out.push(check("penalty of a unit-gradient linear critic is 0", p.abs() < 1e-6, format!("{p:e}")));

    // finite-difference gradient norm of a random critic at one interpolate
    let d = init_params::<f64>(&tiny_spec(), Role::Critic, 13).unwrap();
    let x = random_batch(&mut rng, 1);
    let p = gradient_penalty(&d, &x, &x, &mut rng).unwrap();
    let score = |t: &Tensor<f64>| critique(&d, t).unwrap().0.data()[0];
    let h = 1e-5;
    let mut sq = 0.0;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        sq += ((score(&up) - score(&down)) / (2.0 * h)).powi(2);
    }
    let fd = (sq.sqrt() - 1.0).powi(2);
    let rel = (p - fd).abs() / fd.abs().max(1e-12);
    out.push(check("penalty matches finite-difference gradient norm", rel < 1e-3, format!("relative error {rel:e}")));

    let q = QuadraticCritic::new(0.3, -0.8);
    let mut min = f64::INFINITY;
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (batch4(&mut r, 2), batch4(&mut r, 2));
        min = min.min(gradient_penalty(&q, &a, &b, &mut r).unwrap());
    }
    out.push(check("penalty is never negative", min >= 0.0, format!("min {min}")));
}

fn critic_examples(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let gen = init_params::<f64>(&tiny_spec(), Role::Generator, 1).unwrap();
    let d = constant_critic(0.25);
    let x = random_batch(&mut rng, 2);
    let z = random_latents(&mut rng, 2);
    let cfg = GanLossConfig::default();
    let l = critic_loss(&d, &gen, &x, &z, &cfg, &mut rng).unwrap().total;
    out.push(check(
        "constant critic loss equals lambda",
        close(l, cfg.lambda_gp, 1e-6),
        format!("{l} vs {}", cfg.lambda_gp),
    ));
    let no_gp = GanLossConfig {
        lambda_gp: 0.0,
        ..cfg.clone()
    };
    let l0 = critic_loss(&d, &gen, &x, &z, &no_gp, &mut rng).unwrap().total;
    out.push(check("constant critic loss with lambda 0 is 0", l0.abs() < 1e-12, format!("{l0:e}")));

    // two-parameter critic on a batch of two 4^3 volumes, evaluated by hand
    let q = QuadraticCritic::new(0.05, 0.02);
    let real = batch4(&mut rng, 2);
    let fake = batch4(&mut rng, 2);
    let eps_rng = ChaCha8Rng::seed_from_u64(201);
    let got = critic_loss_on_fakes(&q, &real, &fake, &cfg, &mut eps_rng.clone()).unwrap().total;
    let eps = sample_epsilons(&mut eps_rng.clone(), 2);
    let mut expected = 0.0;
    for i in 0..2 {
        let r = &real.data()[i * 64..(i + 1) * 64];
        let f = &fake.data()[i * 64..(i + 1) * 64];
        let hat: Vec<f64> = r.iter().zip(f).map(|(a, b)| eps[i] * a + (1.0 - eps[i]) * b).collect();
        expected += (q.score(f) - q.score(r)) / 2.0;
        expected += cfg.lambda_gp * (q.input_gradient_norm(&hat) - 1.0).powi(2) / 2.0;
    }
    out.push(check(
        "two-parameter critic loss matches hand evaluation",
        close(got, expected, 1e-6),
        format!("{got} vs {expected}"),
    ));

    // swapping the batch order changes nothing; swapping real and fake flips the sign
    let spec = tiny_spec();
    let d = init_params::<f64>(&spec, Role::Critic, 1).unwrap();
    let a = random_batch(&mut rng, 2);
    let b = random_batch(&mut rng, 2);
    let swap = |t: &Tensor<f64>| {
        let half = t.len() / 2;
        let mut v = t.data()[half..].to_vec();
        v.extend_from_slice(&t.data()[..half]);
        Tensor::new(t.shape().to_vec(), v)
    };
    let l_ab = critic_loss_on_fakes(&d, &a, &b, &no_gp, &mut rng).unwrap().total;
    let l_swapped = critic_loss_on_fakes(&d, &swap(&a), &swap(&b), &no_gp, &mut rng).unwrap().total;
    let l_ba = critic_loss_on_fakes(&d, &b, &a, &no_gp, &mut rng).unwrap().total;
    out.push(check(
        "critic loss is permutation invariant",
        close(l_ab, l_swapped, 1e-12),
        format!("{l_ab} vs {l_swapped}"),
    ));
    out.push(check(
        "critic loss with lambda 0 is antisymmetric",
        close(l_ab, -l_ba, 1e-12),
        format!("{l_ab} vs {l_ba}"),
    ));
}

fn generator_examples(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let spec = tiny_spec();
    let gen = init_params::<f64>(&spec, Role::Generator, 2).unwrap();
    let z = random_latents(&mut rng, 2);
    let l = generator_loss(&constant_critic(0.4), &gen, &z).unwrap().total;
    out.push(check("generator loss of a constant critic is -c", l == -0.4, format!("{l}")));

    let d = init_params::<f64>(&spec, Role::Critic, 1).unwrap();
    let z1 = random_latents(&mut rng, 1);
    let z3 = Tensor::new(vec![3, 8], z1.data().repeat(3));
    let single = generator_loss(&d, &gen, &z1).unwrap().total;
    let tripled = generator_loss(&d, &gen, &z3).unwrap().total;
    out.push(check(
        "generator loss of duplicated rows equals the single value",
        close(single, tripled, 1e-12),
        format!("{single} vs {tripled}"),
    ));

    let v = generator_forward(&gen, &LatentCode { values: z1.data().to_vec() }).unwrap();
    let (score, _) = discriminator_forward(&d, &v).unwrap();
    out.push(check(
        "generator loss matches single-volume forward passes",
        close(single, -score, 1e-6),
        format!("{single} vs {}", -score),
    ));
}

fn reconstruction_examples(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let zeros = Volume::filled([5, 6, 7], IntensityDomain::Normalized, 0.0).unwrap();
    let ones = Volume::filled([5, 6, 7], IntensityDomain::Normalized, 1.0).unwrap();
    out.push(check("image loss of identical volumes is 0", image_loss(&ones, &ones).unwrap() == 0.0, ""));
    let unit = image_loss(&zeros, &ones).unwrap();
    out.push(check("image loss of a unit offset is 1", unit == 1.0, format!("{unit}")));

    let a = Volume::from_fn([8; 3], IntensityDomain::Normalized, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
    let b = Volume::from_fn([8; 3], IntensityDomain::Normalized, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
    let mut naive = 0.0;
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..8 {
                naive += (a.get(z, y, x) - b.get(z, y, x)).powi(2);
            }
        }
    }
    naive /= 512.0;
    let li = image_loss(&a, &b).unwrap();
    out.push(check("image loss matches a naive triple loop", close(li, naive, 1e-9), format!("{li} vs {naive}")));
    out.push(check("image loss is symmetric", li == image_loss(&b, &a).unwrap(), ""));

    let f = |v: Vec<f64>| FeatureVector { values: v };
    out.push(check(
        "feature loss of equal features is 0",
        feature_loss(&f(vec![0.3, -2.0]), &f(vec![0.3, -2.0])).unwrap() == 0.0,
        "",
    ));
    let lf = feature_loss(&f(vec![1.0, 0.0]), &f(vec![0.0, 1.0])).unwrap();
    out.push(check("feature loss of (1,0) and (0,1) is 1", lf == 1.0, format!("{lf}")));
    let p: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
    let q: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
    let mut naive = 0.0;
    for i in 0..100 {
        naive += (p[i] - q[i]) * (p[i] - q[i]);
    }
    naive /= 100.0;
    let lf = feature_loss(&f(p.clone()), &f(q.clone())).unwrap();
    out.push(check("feature loss matches a naive loop", close(lf, naive, 1e-9), format!("{lf} vs {naive}")));
    out.push(check("feature loss is symmetric", lf == feature_loss(&f(q), &f(p)).unwrap(), ""));
}

fn encoder_examples(out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let x = batch4(&mut rng, 3);
    let q = QuadraticCritic::new(0.5, 0.1);
    let mut worst: f64 = 0.0;
    for kappa in [0.0, 1.0, 7.5] {
        let o = encoder_objective(&x, &Unflatten, &q, &Flatten, &EncoderLossConfig { kappa }, EncoderTargets::Encoder)
            .unwrap();
        worst = worst.max(o.breakdown.total.abs());
    }
    out.push(check("perfect reconstruction gives encoder loss 0 for any kappa", worst == 0.0, format!("{worst:e}")));

    let spec = tiny_spec();
    let g = init_params::<f64>(&spec, Role::Generator, 1).unwrap();
    let d = init_params::<f64>(&spec, Role::Critic, 2).unwrap();
    let e = init_params::<f64>(&spec, Role::Encoder, 3).unwrap();
    let v = tensor_to_volumes(&random_batch(&mut rng, 1)).unwrap().remove(0);
    let zero = encoder_loss(&v, &g, &d, &e, &EncoderLossConfig { kappa: 0.0 }).unwrap();
    out.push(check("kappa 0 leaves only the image term", zero.total == zero.l_img, ""));

    let kappa = 0.7;
    let l = encoder_loss(&v, &g, &d, &e, &EncoderLossConfig { kappa }).unwrap();
    let rec = generator_forward(&g, &encoder_forward(&e, &v).unwrap()).unwrap();
    let li = image_loss(&v, &rec).unwrap();
    let lf = feature_loss(&discriminator_forward(&d, &v).unwrap().1, &discriminator_forward(&d, &rec).unwrap().1).unwrap();
    out.push(check(
        "encoder loss recomposes from independent terms",
        close(l.total, li + kappa * lf, 1e-9),
        format!("{} vs {}", l.total, li + kappa * lf),
    ));
    out.push(check(
        "breakdown total equals l_img + kappa * l_feat",
        close(l.total, l.l_img + kappa * l.l_feat, 1e-6) && l.l_img >= 0.0 && l.l_feat >= 0.0,
        "",
    ));

    let mut monotone = true;
    let mut prev = f64::NEG_INFINITY;
    for kappa in [0.0, 0.1, 0.5, 1.0, 3.0, 10.0] {
        let t = encoder_loss(&v, &g, &d, &e, &EncoderLossConfig { kappa }).unwrap().total;
        monotone &= t >= prev;
        prev = t;
    }
    out.push(check("encoder loss is non-decreasing in kappa", monotone, ""));
}

pub fn run() -> Vec<Check> {
    let mut out = Vec::new();
    penalty_examples(&mut out);
    critic_examples(&mut out);
    generator_examples(&mut out);
    reconstruction_examples(&mut out);
    encoder_examples(&mut out);
    out
}
