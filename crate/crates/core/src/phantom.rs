//! Seeded synthetic head phantoms: an ellipsoidal brain with ventricles and
//! soft tissue blobs on a constant background, optionally with a hyperdense
//! lesion or an acquisition-style corruption.
//!
//! Every phantom is drawn from independent ChaCha streams of its seed
//! (anatomy, noise, lesion, corruption), so a lesioned or corrupted phantom
//! shares its anatomy and noise with the healthy phantom of the same seed.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{canonical_hash, read_json, write_json_atomic};
use crate::scoring::{Label, LesionType};
use crate::volume::{IntensityDomain, Volume};

/// Background value outside the brain.
pub const FILL_HU: f64 = -100.0;
const TISSUE_HU: f64 = 30.0;
const CORTEX_HU: f64 = 8.0;
const CSF_HU: f64 = 8.0;
const NOISE_HU: f64 = 1.0;
const STRIPE_PERIOD_VOX: f64 = 6.0;
const STRIPE_AMPLITUDE_HU: f64 = 20.0;
const MIN_SHIFT_VOX: usize = 5;

const ANATOMY_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const LESION_STREAM: u64 = 2;
const CORRUPTION_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    Healthy,
    Lesion,
    Artifact,
    PostsurgicalLike,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Healthy => "HEALTHY",
            Category::Lesion => "LESION",
            Category::Artifact => "ARTIFACT",
            Category::PostsurgicalLike => "POSTSURGICAL_LIKE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Corruption {
    Stripes,
    Truncation,
    Misalignment,
}

impl Corruption {
    pub const ALL: [Corruption; 3] = [Corruption::Stripes, Corruption::Truncation, Corruption::Misalignment];

    pub fn category(self) -> Category {
        match self {
            Corruption::Stripes | Corruption::Misalignment => Category::Artifact,
            Corruption::Truncation => Category::PostsurgicalLike,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesionSpec {
    pub radius_vox: f64,
    pub intensity_offset: f64,
    /// Radial push applied to ventricles and blobs near the lesion.
    pub mass_effect_shift_vox: f64,
    pub lesion_type: LesionType,
}

impl Default for LesionSpec {
    fn default() -> Self {
        LesionSpec {
            radius_vox: 5.0,
            intensity_offset: 50.0,
            mass_effect_shift_vox: 0.0,
            lesion_type: LesionType::Intraparenchymal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub n_tissue_blobs: usize,
    pub lesion: Option<LesionSpec>,
    pub corruption: Option<Corruption>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [40; 3],
            n_tissue_blobs: 6,
            lesion: None,
            corruption: None,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 16) {
            return Err(Error::InvalidArgument(format!("phantom shape {:?} must be >= 16 per axis", self.shape)));
        }
        if self.lesion.is_some() && self.corruption.is_some() {
            return Err(Error::InvalidArgument("a phantom has either a lesion or a corruption".into()));
        }
        if let Some(l) = &self.lesion {
            let limit = *self.shape.iter().min().unwrap() as f64 / 4.0;
            if !(l.radius_vox > 0.0 && l.radius_vox < limit) {
                return Err(Error::LesionOutOfBounds(format!(
                    "radius {} must be in (0, {limit})",
                    l.radius_vox
                )));
            }
            if !l.intensity_offset.is_finite() || !(l.mass_effect_shift_vox >= 0.0) {
                return Err(Error::InvalidArgument(format!("bad lesion spec {l:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    /// HU domain.
    pub volume: Volume,
    pub label: Label,
    /// 0/1 values in the ARBITRARY domain, same shape as `volume`.
    pub lesion_mask: Option<Volume>,
    pub category: Category,
    pub lesion_types: Vec<LesionType>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

#[derive(Debug, Clone)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radius; 1 on the surface.
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone)]
struct Anatomy {
    brain: Ellipsoid,
    ventricles: Vec<Ellipsoid>,
    blobs: Vec<Blob>,
}

fn smoothstep(lo: f64, hi: f64, t: f64) -> f64 {
    let u = ((t - lo) / (hi - lo)).clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

impl Anatomy {
    fn sample(shape: [usize; 3], n_blobs: usize, rng: &mut ChaCha8Rng) -> Self {
        let size = shape.map(|n| n as f64);
        let center = [0, 1, 2].map(|a| (size[a] - 1.0) / 2.0 + rng.random_range(-1.0..1.0));
        let axes = [0, 1, 2].map(|a| size[a] * rng.random_range(0.40..0.45));
        let brain = Ellipsoid { center, axes };

        let lateral = axes[2] * rng.random_range(0.14..0.20);
        let v_axes = [axes[0] * rng.random_range(0.22..0.30), axes[1] * rng.random_range(0.30..0.40), axes[2] * 0.10];
        let ventricles = [-1.0, 1.0]
            .into_iter()
            .map(|side| Ellipsoid {
                center: [center[0] + axes[0] * 0.05, center[1], center[2] + side * lateral],
                axes: v_axes.map(|a| a * rng.random_range(0.9..1.1)),
            })
            .collect();

        let blobs = (0..n_blobs)
            .map(|_| {
                // uniform inside 70% of the brain ellipsoid
                let p = loop {
                    let u = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0f64));
                    if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                        break u;
                    }
                };
                Blob {
                    center: [0, 1, 2].map(|a| center[a] + 0.7 * axes[a] * p[a]),
                    sigma: rng.random_range(1.5..3.0),
                    amplitude: rng.random_range(3.0..6.0) * if rng.random::<bool>() { 1.0 } else { -1.0 },
                }
            })
            .collect();
        Anatomy { brain, ventricles, blobs }
    }

    /// Pushes ventricles and blobs within `4 r` of `center` radially away from it.
    fn displaced(&self, center: [f64; 3], radius: f64, shift: f64) -> Anatomy {
        let push = |p: [f64; 3]| {
            let d = dist(p, center);
            let reach = 4.0 * radius;
            if shift == 0.0 || d >= reach || d == 0.0 {
                return p;
            }
            let s = shift * (1.0 - d / reach);
            [0, 1, 2].map(|a| p[a] + s * (p[a] - center[a]) / d)
        };
        Anatomy {
            brain: self.brain.clone(),
            ventricles: self
                .ventricles
                .iter()
                .map(|v| Ellipsoid {
                    center: push(v.center),
                    axes: v.axes,
                })
                .collect(),
            blobs: self
                .blobs
                .iter()
                .map(|b| Blob {
                    center: push(b.center),
                    ..b.clone()
                })
                .collect(),
        }
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        self.brain.radius(p) <= 1.0
    }

    fn tissue_hu(&self, p: [f64; 3]) -> f64 {
        let r = self.brain.radius(p);
        let mut hu = TISSUE_HU + CORTEX_HU * smoothstep(0.70, 0.95, r);
        for b in &self.blobs {
            let d2 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum::<f64>();
            hu += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        for v in &self.ventricles {
            let w = 1.0 - smoothstep(0.8, 1.0, v.radius(p));
            hu = hu * (1.0 - w) + CSF_HU * w;
        }
        hu
    }

    fn render(&self, shape: [usize; 3], noise: &[f64]) -> Result<Volume> {
        let mut i = 0;
        Volume::from_fn(shape, IntensityDomain::Hu, |z, y, x| {
            let p = [z as f64, y as f64, x as f64];
            let v = if self.inside(p) { self.tissue_hu(p) + noise[i] } else { FILL_HU };
            i += 1;
            v
        })
    }
}

fn noise_field(shape: [usize; 3], seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, NOISE_STREAM);
    let normal = Normal::new(0.0, NOISE_HU).unwrap();
    (0..shape.iter().product::<usize>()).map(|_| normal.sample(&mut rng)).collect()
}

fn sample_anatomy(spec: &PhantomSpec) -> Anatomy {
    Anatomy::sample(spec.shape, spec.n_tissue_blobs, &mut rng_for(spec.seed, ANATOMY_STREAM))
}

/// Healthy phantom for `spec.seed`; lesion and corruption fields are ignored.
pub fn make_healthy(spec: &PhantomSpec) -> Result<PhantomSample> {
    spec.validate()?;
    let volume = sample_anatomy(spec).render(spec.shape, &noise_field(spec.shape, spec.seed))?;
    Ok(PhantomSample {
        volume,
        label: Label::Normal,
        lesion_mask: None,
        category: Category::Healthy,
        lesion_types: Vec::new(),
    })
}

/// Lesion center at least `radius + 1.5` voxels inside the brain surface.
fn place_lesion(anatomy: &Anatomy, radius: f64, rng: &mut ChaCha8Rng) -> Result<[f64; 3]> {
    let e = &anatomy.brain;
    let margin = radius + 1.5;
    let shrink = e.axes.map(|a| a - margin);
    if shrink.iter().any(|&a| a <= 0.0) {
        return Err(Error::LesionOutOfBounds(format!("radius {radius} does not fit inside the brain")));
    }
    let inner = Ellipsoid {
        center: e.center,
        axes: shrink,
    };
    for _ in 0..1000 {
        let p = [0, 1, 2].map(|a| e.center[a] + rng.random_range(-1.0..1.0) * shrink[a]);
        // keep lesions off the midline ventricles so they sit in tissue
        if inner.radius(p) <= 1.0 && anatomy.ventricles.iter().all(|v| v.radius(p) > 1.5) {
            return Ok(p);
        }
    }
    Err(Error::LesionOutOfBounds(format!("no room for a lesion of radius {radius}")))
}

pub fn make_lesioned(spec: &PhantomSpec) -> Result<PhantomSample> {
    spec.validate()?;
    let lesion = spec
        .lesion
        .clone()
        .ok_or_else(|| Error::InvalidArgument("make_lesioned needs a lesion spec".into()))?;
    let anatomy = sample_anatomy(spec);
    let center = place_lesion(&anatomy, lesion.radius_vox, &mut rng_for(spec.seed, LESION_STREAM))?;
    let displaced = anatomy.displaced(center, lesion.radius_vox, lesion.mass_effect_shift_vox);
    let mut volume = displaced.render(spec.shape, &noise_field(spec.shape, spec.seed))?;

    let mask = Volume::from_fn(spec.shape, IntensityDomain::Arbitrary, |z, y, x| {
        let inside = dist([z as f64, y as f64, x as f64], center) <= lesion.radius_vox;
        if inside { 1.0 } else { 0.0 }
    })?;
    let mut data = volume.into_data();
    let mut marked = 0usize;
    for (v, &m) in data.iter_mut().zip(mask.data()) {
        if m > 0.0 {
            if *v == FILL_HU {
                return Err(Error::LesionOutOfBounds("lesion reaches outside the brain".into()));
            }
            *v += lesion.intensity_offset;
            marked += 1;
        }
    }
    if marked == 0 {
        return Err(Error::LesionOutOfBounds("lesion covers no voxel centers".into()));
    }
    volume = Volume::new(spec.shape, [1.0; 3], IntensityDomain::Hu, data)?;
    Ok(PhantomSample {
        volume,
        label: Label::Abnormal,
        lesion_mask: Some(mask),
        category: Category::Lesion,
        lesion_types: vec![lesion.lesion_type],
    })
}

pub fn make_corrupted(spec: &PhantomSpec) -> Result<PhantomSample> {
    spec.validate()?;
    let corruption = spec
        .corruption
        .ok_or_else(|| Error::InvalidArgument("make_corrupted needs a corruption".into()))?;
    let anatomy = sample_anatomy(spec);
    let healthy = anatomy.render(spec.shape, &noise_field(spec.shape, spec.seed))?;
    let mut rng = rng_for(spec.seed, CORRUPTION_STREAM);
    let [nz, ny, nx] = spec.shape;
    let src = healthy.data();
    let data: Vec<f64> = match corruption {
        Corruption::Stripes => {
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut out = src.to_vec();
            for z in 0..nz {
                let band = STRIPE_AMPLITUDE_HU * (2.0 * PI * z as f64 / STRIPE_PERIOD_VOX + phase).sin();
                for v in &mut out[z * ny * nx..(z + 1) * ny * nx] {
                    if *v != FILL_HU {
                        *v += band;
                    }
                }
            }
            out
        }
        Corruption::Truncation => {
            let e = &anatomy.brain;
            let thickness = (nz / 6).max(2);
            let lo = (e.center[0] - 0.5 * e.axes[0]).max(1.0) as usize;
            let hi = ((e.center[0] + 0.5 * e.axes[0]) as usize).saturating_sub(thickness).max(lo + 1);
            let z0 = rng.random_range(lo..hi);
            let mut out = src.to_vec();
            out[z0 * ny * nx..(z0 + thickness) * ny * nx].fill(FILL_HU);
            out
        }
        Corruption::Misalignment => {
            // large enough to push the brain across the field-of-view edge
            let shift = rng.random_range(MIN_SHIFT_VOX..=MIN_SHIFT_VOX + 3) as isize;
            let shift = if rng.random::<bool>() { shift } else { -shift };
            let mut out = vec![FILL_HU; src.len()];
            for row in 0..nz * ny {
                for x in 0..nx as isize {
                    let from = x - shift;
                    if (0..nx as isize).contains(&from) {
                        out[row * nx + x as usize] = src[row * nx + from as usize];
                    }
                }
            }
            out
        }
    };
    Ok(PhantomSample {
        volume: healthy.with_data(IntensityDomain::Hu, data)?,
        label: Label::Abnormal,
        lesion_mask: None,
        category: corruption.category(),
        lesion_types: Vec::new(),
    })
}

/// Dispatches on the spec: lesion, corruption or healthy.
pub fn make_phantom(spec: &PhantomSpec) -> Result<PhantomSample> {
    match (&spec.lesion, &spec.corruption) {
        (Some(_), _) => make_lesioned(spec),
        (None, Some(_)) => make_corrupted(spec),
        (None, None) => make_healthy(spec),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_healthy: usize,
    pub n_lesioned: usize,
    pub n_corrupted: usize,
    pub shape: [usize; 3],
    pub n_tissue_blobs: usize,
    /// Template; each lesioned phantom draws its radius within +-20% of it
    /// and its type round-robin over epidural, subdural, intraparenchymal.
    pub lesion: LesionSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_healthy: 0,
            n_lesioned: 0,
            n_corrupted: 0,
            shape: PhantomSpec::default().shape,
            n_tissue_blobs: PhantomSpec::default().n_tissue_blobs,
            lesion: LesionSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub label: Label,
    pub category: Category,
    pub lesion_types: Vec<LesionType>,
    pub corruption: Option<Corruption>,
    pub has_mask: bool,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub base_seed: u64,
    pub spec: DatasetSpec,
    /// In the shuffled dataset order.
    pub entries: Vec<ManifestEntry>,
    pub hash: String,
}

impl DatasetManifest {
    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<(String, PhantomSample)>,
    pub manifest: DatasetManifest,
}

pub fn make_dataset(n_healthy: usize, n_lesioned: usize, n_corrupted: usize, base_seed: u64) -> Result<Dataset> {
    let spec = DatasetSpec {
        n_healthy,
        n_lesioned,
        n_corrupted,
        ..DatasetSpec::default()
    };
    make_dataset_with(&spec, base_seed)
}

const ROUND_ROBIN: [LesionType; 3] = [LesionType::Epidural, LesionType::Subdural, LesionType::Intraparenchymal];

pub fn make_dataset_with(spec: &DatasetSpec, base_seed: u64) -> Result<Dataset> {
    let mut seeds = rng_for(base_seed, 64);
    let mut specs = Vec::new();
    let base = PhantomSpec {
        shape: spec.shape,
        n_tissue_blobs: spec.n_tissue_blobs,
        ..PhantomSpec::default()
    };
    for _ in 0..spec.n_healthy {
        specs.push(PhantomSpec {
            seed: seeds.next_u64(),
            ..base.clone()
        });
    }
    for i in 0..spec.n_lesioned {
        let seed = seeds.next_u64();
        let scale = rng_for(seed, LESION_STREAM + 16).random_range(0.8..1.2);
        specs.push(PhantomSpec {
            seed,
            lesion: Some(LesionSpec {
                radius_vox: spec.lesion.radius_vox * scale,
                lesion_type: ROUND_ROBIN[i % ROUND_ROBIN.len()],
                ..spec.lesion.clone()
            }),
            ..base.clone()
        });
    }
    for i in 0..spec.n_corrupted {
        specs.push(PhantomSpec {
            seed: seeds.next_u64(),
            corruption: Some(Corruption::ALL[i % Corruption::ALL.len()]),
            ..base.clone()
        });
    }
    specs.shuffle(&mut rng_for(base_seed, 65));

    let samples: Vec<(String, PhantomSample)> = {
        use rayon::prelude::*;
        specs
            .par_iter()
            .enumerate()
            .map(|(i, s)| Ok((format!("phantom_{i:04}"), make_phantom(s)?)))
            .collect::<Result<_>>()?
    };
    let entries: Vec<ManifestEntry> = samples
        .iter()
        .zip(&specs)
        .map(|((id, s), ps)| ManifestEntry {
            id: id.clone(),
            seed: ps.seed,
            label: s.label,
            category: s.category,
            lesion_types: s.lesion_types.clone(),
            corruption: ps.corruption,
            has_mask: s.lesion_mask.is_some(),
            content_hash: s.volume.content_hash(),
        })
        .collect();
    let hash = canonical_hash(&(base_seed, spec, &entries))?;
    Ok(Dataset {
        samples,
        manifest: DatasetManifest {
            base_seed,
            spec: spec.clone(),
            entries,
            hash,
        },
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MASK_DIR: &str = "masks";

impl Dataset {
    /// Volumes as `<dir>/<id>`, masks as `<dir>/masks/<id>`, plus the manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let masks = dir.join(MASK_DIR);
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        for (id, s) in &self.samples {
            s.volume.save(dir.join(id))?;
            if let Some(m) = &s.lesion_mask {
                m.save(masks.join(id))?;
            }
        }
        write_json_atomic(&dir.join(MANIFEST_FILE), &self.manifest)
    }
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}
