//! Generator, critic and encoder.
//!
//! All three networks are stacks of 4x4x4 stride-2 (transposed) convolutions:
//! the critic and encoder halve the resolution per block down to 4^3, the
//! generator mirrors that from a dense projection of the latent code. The
//! critic exposes the activations of one block as the feature vector used by
//! the feature-matching loss.

use anodet3d_autograd::{ConvGeometry, Graph, NodeId, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::Stage;
use crate::volume::{IntensityDomain, Volume};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;
/// Side length of the coarsest feature map.
pub const BASE_SIDE: usize = 4;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "G")]
    Generator,
    #[serde(rename = "D")]
    Critic,
    #[serde(rename = "E")]
    Encoder,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::Generator => "G",
            Role::Critic => "D",
            Role::Encoder => "E",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Role::Generator => 1,
            Role::Critic => 2,
            Role::Encoder => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NormKind {
    #[default]
    None,
    Instance,
    Layer,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormKinds {
    pub generator: NormKind,
    pub critic: NormKind,
    pub encoder: NormKind,
}

impl NormKinds {
    fn of(&self, role: Role) -> NormKind {
        match role {
            Role::Generator => self.generator,
            Role::Critic => self.critic,
            Role::Encoder => self.encoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub latent_dim: usize,
    pub volume_side: usize,
    /// Channels per resolution level, coarsest (4^3) first.
    pub channel_schedule: Vec<usize>,
    /// Critic block whose activations form the feature vector; defaults to
    /// the penultimate block.
    pub feature_tap_level: Option<usize>,
    pub norm: NormKinds,
    pub leaky_slope: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            latent_dim: 2500,
            volume_side: 64,
            channel_schedule: vec![512, 256, 128, 64],
            feature_tap_level: None,
            norm: NormKinds::default(),
            leaky_slope: 0.2,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if !self.volume_side.is_power_of_two() || self.volume_side < 16 {
            return bad(format!("volume_side {} must be a power of two >= 16", self.volume_side));
        }
        if self.channel_schedule.len() != self.levels() {
            return bad(format!(
                "channel_schedule has {} entries, volume_side {} needs {}",
                self.channel_schedule.len(),
                self.volume_side,
                self.levels()
            ));
        }
        if self.channel_schedule.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.tap_level() >= self.levels() {
            return bad(format!("feature_tap_level {} out of range", self.tap_level()));
        }
        if !(0.0..=1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky_slope {} must be in [0, 1]", self.leaky_slope));
        }
        Ok(())
    }

    /// Number of resolution levels, `log2(volume_side) - 2`.
    pub fn levels(&self) -> usize {
        self.volume_side.trailing_zeros() as usize - 2
    }

    pub fn tap_level(&self) -> usize {
        self.feature_tap_level
            .unwrap_or_else(|| self.levels().saturating_sub(2))
    }

    /// Critic/encoder block `i`: side `volume_side / 2^i` to half that.
    fn down_geometry(&self, i: usize) -> ConvGeometry {
        let levels = self.levels();
        let c_in = if i == 0 { 1 } else { self.channel_schedule[levels - i] };
        let c_out = self.channel_schedule[levels - 1 - i];
        let side = self.volume_side >> i;
        ConvGeometry::new(c_in, c_out, KERNEL, STRIDE, PADDING, [side; 3])
    }

    /// Generator block `i`: side `4 * 2^i` (strided side) up to twice that.
    fn up_geometry(&self, i: usize) -> ConvGeometry {
        let levels = self.levels();
        let c_small = self.channel_schedule[i];
        let c_big = if i + 1 == levels { 1 } else { self.channel_schedule[i + 1] };
        let big = BASE_SIDE << (i + 1);
        ConvGeometry::new(c_big, c_small, KERNEL, STRIDE, PADDING, [big; 3])
    }

    fn dense_width(&self) -> usize {
        self.channel_schedule[0] * BASE_SIDE.pow(3)
    }

    /// Length `m` of the critic feature vector.
    pub fn feature_len(&self) -> usize {
        let g = self.down_geometry(self.tap_level());
        g.out_channels * g.out_size.iter().product::<usize>()
    }

    pub fn volume_shape(&self) -> [usize; 3] {
        [self.volume_side; 3]
    }

    /// Name, shape and fan-in of every parameter tensor, in storage order.
    pub fn layout(&self, role: Role) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let levels = self.levels();
        let k3 = KERNEL.pow(3);
        match role {
            Role::Generator => {
                out.push(ParamInfo::new("fc.weight", vec![self.latent_dim, self.dense_width()], self.latent_dim, true));
                out.push(ParamInfo::new("fc.bias", vec![self.dense_width()], 0, false));
                for i in 0..levels {
                    let g = self.up_geometry(i);
                    // each output voxel sees (k / s)^3 taps per input channel
                    let fan_in = g.out_channels * k3 / STRIDE.pow(3);
                    let hidden = i + 1 < levels;
                    out.push(ParamInfo::new(&format!("up{i}.weight"), g.weight_shape(), fan_in, hidden));
                    out.push(ParamInfo::new(&format!("up{i}.bias"), vec![g.in_channels], 0, false));
                }
            }
            Role::Critic | Role::Encoder => {
                for i in 0..levels {
                    let g = self.down_geometry(i);
                    out.push(ParamInfo::new(&format!("conv{i}.weight"), g.weight_shape(), g.in_channels * k3, true));
                    out.push(ParamInfo::new(&format!("conv{i}.bias"), vec![g.out_channels], 0, false));
                }
                let width = if role == Role::Critic { 1 } else { self.latent_dim };
                out.push(ParamInfo::new("head.weight", vec![self.dense_width(), width], self.dense_width(), false));
                out.push(ParamInfo::new("head.bias", vec![width], 0, false));
            }
        }
        out
    }

    pub fn param_count(&self, role: Role) -> usize {
        self.layout(role)
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Zero for biases.
    pub fan_in: usize,
    /// Whether a leaky ReLU follows (affects the init gain).
    pub hidden: bool,
}

impl ParamInfo {
    fn new(name: &str, shape: Vec<usize>, fan_in: usize, hidden: bool) -> Self {
        ParamInfo {
            name: name.to_string(),
            shape,
            fan_in,
            hidden,
        }
    }
}

/// A point in the generator's input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub values: Vec<f64>,
}

/// Flattened critic activations at the feature tap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Weights of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub role: Role,
    pub spec: NetworkSpec,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub step_count: u64,
    pub seed: u64,
    /// Stage that produced these weights; `None` for a fresh initialization.
    pub stage: Option<Stage>,
}

/// Zero-mean Gaussian weights scaled by fan-in, zero biases.
pub fn init_params<T: Real>(spec: &NetworkSpec, role: Role, seed: u64) -> Result<NetworkParams<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role.stream());
    let slope = spec.leaky_slope;
    let tensors = spec
        .layout(role)
        .into_iter()
        .map(|info| {
            let n: usize = info.shape.iter().product();
            let data = if info.fan_in == 0 {
                vec![T::zero(); n]
            } else {
                let gain = if info.hidden { (2.0 / (1.0 + slope * slope)).sqrt() } else { 1.0 };
                let std = gain / (info.fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let s: f64 = StandardNormal.sample(&mut rng);
                        T::of(s * std)
                    })
                    .collect()
            };
            (info.name, Tensor::new(info.shape, data))
        })
        .collect();
    Ok(NetworkParams {
        role,
        spec: spec.clone(),
        tensors,
        step_count: 0,
        seed,
        stage: None,
    })
}

impl<T: Real> NetworkParams<T> {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.all_finite())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            role: self.role,
            spec: self.spec.clone(),
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            step_count: self.step_count,
            seed: self.seed,
            stage: self.stage,
        }
    }

    /// Checks names and shapes against the layout implied by `spec`.
    pub fn check_layout(&self) -> Result<()> {
        let layout = self.spec.layout(self.role);
        if layout.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} has {} tensors, layout needs {}",
                self.role.tag(),
                self.tensors.len(),
                layout.len()
            )));
        }
        for (info, (name, t)) in layout.iter().zip(&self.tensors) {
            if &info.name != name {
                return Err(Error::InvalidArgument(format!("expected tensor {}, found {name}", info.name)));
            }
            if info.shape != t.shape() {
                return Err(Error::shape(&info.shape, t.shape()));
            }
        }
        Ok(())
    }

    /// Inserts every tensor as a graph leaf, in storage order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.tensors.iter().map(|(_, t)| g.leaf(t.clone())).collect()
    }
}

fn normalize<T: Real>(g: &mut Graph<T>, x: NodeId, kind: NormKind) -> NodeId {
    let shape = g.shape(x).to_vec();
    let outer = match kind {
        NormKind::None => return x,
        NormKind::Instance => shape[0] * shape[1],
        NormKind::Layer => shape[0],
    };
    let inner = g.value(x).len() / outer;
    let inv_n = T::one() / T::of(inner as f64);
    let sum = g.sum_inner(x, outer);
    let mean = g.scale(sum, inv_n);
    let mean_b = g.broadcast_inner(mean, shape.clone());
    let centered = g.sub(x, mean_b);
    let sq = g.square(centered);
    let sq_sum = g.sum_inner(sq, outer);
    let var = g.scale(sq_sum, inv_n);
    let var_eps = g.add_scalar(var, T::of(NORM_EPS));
    let inv_std = g.powf(var_eps, T::of(-0.5));
    let inv_b = g.broadcast_inner(inv_std, shape);
    g.mul(centered, inv_b)
}

/// `z: [n, latent] -> [n, 1, side, side, side]`.
pub fn generator_graph<T: Real>(g: &mut Graph<T>, spec: &NetworkSpec, p: &[NodeId], z: NodeId) -> NodeId {
    let batch = g.shape(z)[0];
    let slope = T::of(spec.leaky_slope);
    let norm = spec.norm.of(Role::Generator);
    let h = g.matmul(z, p[0]);
    let h = g.add_channel_bias(h, p[1]);
    let c0 = spec.channel_schedule[0];
    let mut h = g.reshape(h, vec![batch, c0, BASE_SIDE, BASE_SIDE, BASE_SIDE]);
    h = normalize(g, h, norm);
    h = g.leaky_relu(h, slope);
    let levels = spec.levels();
    for i in 0..levels {
        let geom = spec.up_geometry(i);
        h = g.conv_transpose3d(h, p[2 + 2 * i], geom);
        h = g.add_channel_bias(h, p[3 + 2 * i]);
        if i + 1 < levels {
            h = normalize(g, h, norm);
            h = g.leaky_relu(h, slope);
        }
    }
    g.tanh(h)
}

/// Shared conv trunk of the critic and encoder. Returns the flattened output
/// of the last block and of the block at `tap`.
fn down_trunk<T: Real>(
    g: &mut Graph<T>,
    spec: &NetworkSpec,
    role: Role,
    p: &[NodeId],
    x: NodeId,
    tap: Option<usize>,
) -> (NodeId, Option<NodeId>) {
    let batch = g.shape(x)[0];
    let slope = T::of(spec.leaky_slope);
    let norm = spec.norm.of(role);
    let mut h = x;
    let mut tapped = None;
    for i in 0..spec.levels() {
        h = g.conv3d(h, p[2 * i], spec.down_geometry(i));
        h = g.add_channel_bias(h, p[2 * i + 1]);
        h = normalize(g, h, norm);
        h = g.leaky_relu(h, slope);
        if tap == Some(i) {
            let m = g.value(h).len() / batch;
            tapped = Some(g.reshape(h, vec![batch, m]));
        }
    }
    let flat = g.reshape(h, vec![batch, spec.dense_width()]);
    (flat, tapped)
}

pub struct CriticNodes {
    /// `[n, 1]` unbounded scores.
    pub score: NodeId,
    /// `[n, m]` feature-tap activations.
    pub features: NodeId,
}

pub fn critic_graph<T: Real>(g: &mut Graph<T>, spec: &NetworkSpec, p: &[NodeId], x: NodeId) -> CriticNodes {
    let (flat, tapped) = down_trunk(g, spec, Role::Critic, p, x, Some(spec.tap_level()));
    let n = p.len();
    let s = g.matmul(flat, p[n - 2]);
    let score = g.add_channel_bias(s, p[n - 1]);
    CriticNodes {
        score,
        features: tapped.expect("tap level validated"),
    }
}

/// `x: [n, 1, side, side, side] -> [n, latent]`, tanh-bounded.
pub fn encoder_graph<T: Real>(g: &mut Graph<T>, spec: &NetworkSpec, p: &[NodeId], x: NodeId) -> NodeId {
    let (flat, _) = down_trunk(g, spec, Role::Encoder, p, x, None);
    let n = p.len();
    let h = g.matmul(flat, p[n - 2]);
    let h = g.add_channel_bias(h, p[n - 1]);
    g.tanh(h)
}

fn expect_role<T>(p: &NetworkParams<T>, role: Role) -> Result<()> {
    if p.role != role {
        return Err(Error::InvalidArgument(format!(
            "expected {} parameters, got {}",
            role.tag(),
            p.role.tag()
        )));
    }
    Ok(())
}

/// Stacks volumes into a `[n, 1, side, side, side]` tensor.
pub fn volumes_to_tensor<T: Real>(spec: &NetworkSpec, volumes: &[&Volume]) -> Result<Tensor<T>> {
    let want = spec.volume_shape();
    let mut data = Vec::with_capacity(volumes.len() * spec.volume_side.pow(3));
    for v in volumes {
        if v.shape() != want {
            return Err(Error::shape(&want, &v.shape()));
        }
        data.extend(v.data().iter().map(|&x| T::of(x)));
    }
    let s = spec.volume_side;
    Ok(Tensor::new(vec![volumes.len(), 1, s, s, s], data))
}

/// Splits a `[n, 1, s, s, s]` tensor into normalized volumes.
pub fn tensor_to_volumes<T: Real>(t: &Tensor<T>) -> Result<Vec<Volume>> {
    let shape = t.shape();
    let per: usize = shape[2..].iter().product();
    t.data()
        .chunks(per)
        .map(|c| {
            Volume::new(
                [shape[2], shape[3], shape[4]],
                [1.0; 3],
                IntensityDomain::Normalized,
                c.iter().map(|v| v.as_f64()).collect(),
            )
        })
        .collect()
}

/// Batched `G(z)`, `z: [n, latent]`.
pub fn generate<T: Real>(params: &NetworkParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    expect_role(params, Role::Generator)?;
    let spec = &params.spec;
    if z.shape().len() != 2 || z.shape()[1] != spec.latent_dim {
        return Err(Error::shape(&[z.shape()[0], spec.latent_dim], z.shape()));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let zi = g.leaf(z.clone());
    let out = generator_graph(&mut g, spec, &p, zi);
    Ok(g.value(out).clone())
}

/// Batched critic: `[n]` scores and `[n, m]` features.
pub fn critique<T: Real>(params: &NetworkParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    expect_role(params, Role::Critic)?;
    check_volume_batch(&params.spec, x)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let xi = g.leaf(x.clone());
    let nodes = critic_graph(&mut g, &params.spec, &p, xi);
    Ok((g.value(nodes.score).clone(), g.value(nodes.features).clone()))
}

/// Batched `E(x)`.
pub fn encode<T: Real>(params: &NetworkParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_role(params, Role::Encoder)?;
    check_volume_batch(&params.spec, x)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let xi = g.leaf(x.clone());
    let out = encoder_graph(&mut g, &params.spec, &p, xi);
    Ok(g.value(out).clone())
}

pub(crate) fn check_volume_batch<T: Real>(spec: &NetworkSpec, x: &Tensor<T>) -> Result<()> {
    let s = spec.volume_side;
    let shape = x.shape();
    if shape.len() != 5 || shape[1..] != [1, s, s, s] {
        let n = shape.first().copied().unwrap_or(0);
        return Err(Error::shape(&[n, 1, s, s, s], shape));
    }
    Ok(())
}

pub fn generator_forward<T: Real>(params: &NetworkParams<T>, z: &LatentCode) -> Result<Volume> {
    let len = params.spec.latent_dim;
    if z.values.len() != len {
        return Err(Error::shape(&[len], &[z.values.len()]));
    }
    let zt = Tensor::new(vec![1, len], z.values.iter().map(|&v| T::of(v)).collect());
    let out = generate(params, &zt)?;
    Ok(tensor_to_volumes(&out)?.remove(0))
}

pub fn discriminator_forward<T: Real>(params: &NetworkParams<T>, x: &Volume) -> Result<(f64, FeatureVector)> {
    let xt = volumes_to_tensor(&params.spec, &[x])?;
    let (score, features) = critique(params, &xt)?;
    Ok((
        score.item().as_f64(),
        FeatureVector {
            values: features.data().iter().map(|v| v.as_f64()).collect(),
        },
    ))
}

pub fn encoder_forward<T: Real>(params: &NetworkParams<T>, x: &Volume) -> Result<LatentCode> {
    let xt = volumes_to_tensor(&params.spec, &[x])?;
    let z = encode(params, &xt)?;
    Ok(LatentCode {
        values: z.data().iter().map(|v| v.as_f64()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> NetworkSpec {
        NetworkSpec {
            latent_dim: 8,
            volume_side: 16,
            channel_schedule: vec![8, 4],
            ..NetworkSpec::default()
        }
    }

    fn random_volume(seed: u64, side: usize) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn([side; 3], IntensityDomain::Normalized, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn spec_validation() {
        NetworkSpec::default().validate().unwrap();
        tiny().validate().unwrap();
        let bad = NetworkSpec {
            channel_schedule: vec![8],
            ..tiny()
        };
        assert!(bad.validate().is_err());
        let bad = NetworkSpec {
            volume_side: 24,
            ..tiny()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_feature_length_is_penultimate_block() {
        // levels 64 -> 32 -> 16 -> 8 -> 4; penultimate block output is 8^3 x 256
        assert_eq!(NetworkSpec::default().feature_len(), 8 * 8 * 8 * 256);
        assert_eq!(tiny().feature_len(), 8 * 8 * 8 * 4);
    }

    #[test]
    fn shapes_and_ranges_on_tiny_spec() {
        let spec = tiny();
        let gp = init_params::<f64>(&spec, Role::Generator, 1).unwrap();
        let dp = init_params::<f64>(&spec, Role::Critic, 1).unwrap();
        let ep = init_params::<f64>(&spec, Role::Encoder, 1).unwrap();
        let x = random_volume(3, 16);
        let z = encoder_forward(&ep, &x).unwrap();
        assert_eq!(z.values.len(), 8);
        assert!(z.values.iter().all(|v| v.abs() < 1.0));
        let rec = generator_forward(&gp, &z).unwrap();
        assert_eq!(rec.shape(), x.shape());
        assert!(rec.data().iter().all(|v| v.abs() < 1.0));
        let (score, f) = discriminator_forward(&dp, &x).unwrap();
        assert!(score.is_finite());
        assert_eq!(f.len(), spec.feature_len());
        // m recomputed from the block arithmetic: 16 -> 8 with 4 channels
        assert_eq!(f.len(), (16 / 2usize).pow(3) * spec.channel_schedule[1]);
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let spec = tiny();
        let gp = init_params::<f64>(&spec, Role::Generator, 1).unwrap();
        let dp = init_params::<f64>(&spec, Role::Critic, 1).unwrap();
        let z = LatentCode { values: vec![0.0; 7] };
        assert!(matches!(generator_forward(&gp, &z), Err(Error::ShapeMismatch { .. })));
        let x = random_volume(0, 8);
        assert!(matches!(discriminator_forward(&dp, &x), Err(Error::ShapeMismatch { .. })));
        assert!(discriminator_forward(&gp, &random_volume(0, 16)).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let spec = tiny();
        let a = init_params::<f32>(&spec, Role::Critic, 5).unwrap();
        let b = init_params::<f32>(&spec, Role::Critic, 5).unwrap();
        let c = init_params::<f32>(&spec, Role::Critic, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.param_count(), spec.param_count(Role::Critic));
    }

    #[test]
    fn forward_passes_are_deterministic() {
        let spec = tiny();
        let dp = init_params::<f32>(&spec, Role::Critic, 2).unwrap();
        let x = random_volume(9, 16);
        assert_eq!(discriminator_forward(&dp, &x).unwrap(), discriminator_forward(&dp, &x).unwrap());
        let gp = init_params::<f32>(&spec, Role::Generator, 2).unwrap();
        let z = LatentCode { values: vec![0.0; 8] };
        let a = generator_forward(&gp, &z).unwrap();
        assert_eq!(a, generator_forward(&gp, &z).unwrap());
        assert!(a.data().iter().all(|v| v.is_finite() && v.abs() < 1.0));
    }

    #[test]
    fn fresh_generator_is_not_degenerate() {
        let spec = tiny();
        let gp = init_params::<f64>(&spec, Role::Generator, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z: Vec<f64> = (0..100 * 8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let out = generate(&gp, &Tensor::new(vec![100, 8], z)).unwrap();
        let n = out.len() as f64;
        let mean = out.sum() / n;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.5, "mean {mean}");
        assert!(var.sqrt() > 0.0);
    }

    #[test]
    fn encoder_is_locally_lipschitz() {
        let spec = tiny();
        let ep = init_params::<f64>(&spec, Role::Encoder, 4).unwrap();
        let x = random_volume(1, 16);
        let z0 = encoder_forward(&ep, &x).unwrap();
        let mut data = x.data().to_vec();
        data[1234] += 1e-3;
        let z1 = encoder_forward(&ep, &x.with_data(IntensityDomain::Arbitrary, data).unwrap()).unwrap();
        let dist: f64 = z0.values.iter().zip(&z1.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        // one voxel only reaches the head through a handful of 4x4x4 taps; with
        // unit-variance weights the change stays well below the perturbation
        assert!(dist > 0.0 && dist < 1e-2, "latent moved by {dist}");
    }

    #[test]
    fn norm_variants_keep_shapes() {
        for kind in [NormKind::Instance, NormKind::Layer] {
            let spec = NetworkSpec {
                norm: NormKinds {
                    generator: kind,
                    critic: kind,
                    encoder: kind,
                },
                ..tiny()
            };
            let gp = init_params::<f64>(&spec, Role::Generator, 1).unwrap();
            let ep = init_params::<f64>(&spec, Role::Encoder, 1).unwrap();
            let x = random_volume(2, 16);
            let rec = generator_forward(&gp, &encoder_forward(&ep, &x).unwrap()).unwrap();
            assert_eq!(rec.shape(), x.shape());
        }
    }
}
