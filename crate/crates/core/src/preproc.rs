//! Deterministic intensity and geometry preprocessing of HU volumes:
//! crop, smooth, resize, window, normalize.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{IntensityDomain, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocSpec {
    pub window_lo_hu: f64,
    pub window_hi_hu: f64,
    pub target_shape: [usize; 3],
    /// Gaussian sigma in source voxels; `None` derives it from the resize ratio.
    pub smoothing_sigma_vox: Option<f64>,
    /// Crop keeps voxels strictly above this; `None` uses the volume minimum.
    pub crop_threshold: Option<f64>,
}

impl Default for PreprocSpec {
    fn default() -> Self {
        PreprocSpec {
            window_lo_hu: -20.0,
            window_hi_hu: 100.0,
            target_shape: [64, 64, 64],
            smoothing_sigma_vox: None,
            crop_threshold: None,
        }
    }
}

impl PreprocSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_lo_hu < self.window_hi_hu) {
            return Err(Error::InvalidArgument(format!(
                "window [{}, {}] is empty",
                self.window_lo_hu, self.window_hi_hu
            )));
        }
        if self.target_shape.iter().any(|&d| d < 4) {
            return Err(Error::InvalidArgument(format!(
                "target shape {:?} must be at least 4 per axis",
                self.target_shape
            )));
        }
        if let Some(s) = self.smoothing_sigma_vox {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("sigma {s} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Minimal bounding box of voxels strictly above `threshold`.
pub fn crop_black_boundaries(v: &Volume, threshold: f64) -> Result<Volume> {
    apply_crop(v, &crop_box(v, threshold)?)
}

/// Axis-aligned box, `lo` inclusive, in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub lo: [usize; 3],
    pub shape: [usize; 3],
}

/// Bounding box of the voxels strictly above `threshold`.
pub fn crop_box(v: &Volume, threshold: f64) -> Result<CropBox> {
    let [nz, ny, nx] = v.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if v.get(z, y, x) > threshold {
                    for (a, p) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(p);
                        hi[a] = hi[a].max(p);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::AllBelowThreshold { threshold });
    }
    Ok(CropBox {
        lo,
        shape: [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1],
    })
}

pub fn apply_crop(v: &Volume, b: &CropBox) -> Result<Volume> {
    let fits = (0..3).all(|a| b.shape[a] >= 1 && b.lo[a] + b.shape[a] <= v.shape()[a]);
    if !fits {
        return Err(Error::InvalidArgument(format!("crop box {b:?} outside volume {:?}", v.shape())));
    }
    let mut data = Vec::with_capacity(b.shape.iter().product());
    for z in b.lo[0]..b.lo[0] + b.shape[0] {
        for y in b.lo[1]..b.lo[1] + b.shape[1] {
            let row = v.index(z, y, b.lo[2]);
            data.extend_from_slice(&v.data()[row..row + b.shape[2]]);
        }
    }
    Volume::new(b.shape, v.spacing_mm(), v.domain(), data)
}

/// Normalized 1D Gaussian taps for offsets `-r..=r`, `r = ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn convolve_axis(data: &[f64], shape: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let strides = [shape[1] * shape[2], shape[2], 1];
    let n = shape[axis];
    let stride = strides[axis];
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; n];
    let [nz, ny, nx] = shape;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [z, y, x];
                if pos[axis] != 0 {
                    continue;
                }
                let base = z * strides[0] + y * strides[1] + x;
                for (i, l) in line.iter_mut().enumerate() {
                    *l = data[base + i * stride];
                }
                for i in 0..n {
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let src = reflect(i as isize + t as isize - radius, n);
                        acc += w * line[src];
                    }
                    out[base + i * stride] = acc;
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur with reflect boundaries; `sigma = 0` is the identity.
pub fn gaussian_smooth(v: &Volume, sigma_vox: f64) -> Result<Volume> {
    if !(sigma_vox >= 0.0 && sigma_vox.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma {sigma_vox} must be >= 0")));
    }
    if sigma_vox == 0.0 {
        return Ok(v.clone());
    }
    let kernel = gaussian_kernel(sigma_vox);
    let mut data = v.data().to_vec();
    for axis in 0..3 {
        data = convolve_axis(&data, v.shape(), axis, &kernel);
    }
    if v.domain() == IntensityDomain::Normalized {
        // rounding can push a convex combination a hair past the bounds
        data.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
    }
    v.with_data(v.domain(), data)
}

/// Corner-aligned sample positions: output `i` reads source `i * (n - 1) / (m - 1)`.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling with corner-aligned grids.
pub fn resize_trilinear(v: &Volume, target_shape: [usize; 3]) -> Result<Volume> {
    if target_shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "target shape {target_shape:?} has a zero axis"
        )));
    }
    let src = v.shape();
    let pz = sample_positions(src[0], target_shape[0]);
    let py = sample_positions(src[1], target_shape[1]);
    let px = sample_positions(src[2], target_shape[2]);
    let mut data = Vec::with_capacity(target_shape.iter().product());
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    for &(z0, z1, tz) in &pz {
        for &(y0, y1, ty) in &py {
            for &(x0, x1, tx) in &px {
                let c00 = lerp(v.get(z0, y0, x0), v.get(z0, y0, x1), tx);
                let c01 = lerp(v.get(z0, y1, x0), v.get(z0, y1, x1), tx);
                let c10 = lerp(v.get(z1, y0, x0), v.get(z1, y0, x1), tx);
                let c11 = lerp(v.get(z1, y1, x0), v.get(z1, y1, x1), tx);
                data.push(lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz));
            }
        }
    }
    let spacing = std::array::from_fn(|a| {
        let (n, m) = (src[a], target_shape[a]);
        if n > 1 && m > 1 {
            v.spacing_mm()[a] * (n - 1) as f64 / (m - 1) as f64
        } else {
            v.spacing_mm()[a] * n as f64 / m as f64
        }
    });
    Volume::new(target_shape, spacing, v.domain(), data)
}

/// Clamps HU values into `[lo, hi]`.
pub fn window_hu(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if v.domain() != IntensityDomain::Hu {
        return Err(Error::DomainMismatch {
            expected: IntensityDomain::Hu.name(),
            found: v.domain().name(),
        });
    }
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("window [{lo}, {hi}] is empty")));
    }
    let data = v.data().iter().map(|x| x.clamp(lo, hi)).collect();
    v.with_data(IntensityDomain::Hu, data)
}

/// Affine map of the fixed window `[lo, hi]` onto `[-1, 1]`.
pub fn normalize_global(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("window [{lo}, {hi}] is empty")));
    }
    if let Some(&value) = v.data().iter().find(|x| !(lo..=hi).contains(*x)) {
        return Err(Error::OutOfRange { value, lo, hi });
    }
    let scale = 2.0 / (hi - lo);
    let data = v
        .data()
        .iter()
        .map(|x| ((x - lo) * scale - 1.0).clamp(-1.0, 1.0))
        .collect();
    v.with_data(IntensityDomain::Normalized, data)
}

/// Inverse of [`normalize_global`]; the result is in the HU domain.
pub fn denormalize_global(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if v.domain() != IntensityDomain::Normalized {
        return Err(Error::DomainMismatch {
            expected: IntensityDomain::Normalized.name(),
            found: v.domain().name(),
        });
    }
    let half = (hi - lo) / 2.0;
    let data = v.data().iter().map(|x| (x + 1.0) * half + lo).collect();
    v.with_data(IntensityDomain::Hu, data)
}

/// Smoothing width used when `smoothing_sigma_vox` is unset: half the largest
/// source/target size ratio.
pub fn default_sigma(source: [usize; 3], target: [usize; 3]) -> f64 {
    (0..3)
        .map(|a| source[a] as f64 / target[a] as f64)
        .fold(0.0, f64::max)
        / 2.0
}

/// Crop box used by [`preprocess`] for `v`; `None` when nothing is cropped.
fn crop_for(v: &Volume, spec: &PreprocSpec) -> Result<Option<CropBox>> {
    Ok(match spec.crop_threshold {
        Some(t) => Some(crop_box(v, t)?),
        // a constant volume has no background to strip
        None if v.max() > v.min() => Some(crop_box(v, v.min())?),
        None => None,
    })
}

/// Full chain: crop, smooth, resize, window, normalize.
pub fn preprocess(v: &Volume, spec: &PreprocSpec) -> Result<Volume> {
    spec.validate()?;
    if v.domain() != IntensityDomain::Hu {
        return Err(Error::DomainMismatch {
            expected: IntensityDomain::Hu.name(),
            found: v.domain().name(),
        });
    }
    let cropped = match &crop_for(v, spec)? {
        Some(b) => apply_crop(v, b)?,
        None => v.clone(),
    };
    let sigma = spec
        .smoothing_sigma_vox
        .unwrap_or_else(|| default_sigma(cropped.shape(), spec.target_shape));
    let smoothed = gaussian_smooth(&cropped, sigma)?;
    let resized = resize_trilinear(&smoothed, spec.target_shape)?;
    let windowed = window_hu(&resized, spec.window_lo_hu, spec.window_hi_hu)?;
    normalize_global(&windowed, spec.window_lo_hu, spec.window_hi_hu)
}

/// Carries a binary mask drawn on `reference` into the preprocessed grid:
/// same crop, trilinear resize, then a 0.5 threshold.
pub fn preprocess_mask(mask: &Volume, reference: &Volume, spec: &PreprocSpec) -> Result<Volume> {
    if mask.shape() != reference.shape() {
        return Err(Error::shape(&reference.shape(), &mask.shape()));
    }
    let cropped = match crop_for(reference, spec)? {
        Some(b) => apply_crop(mask, &b)?,
        None => mask.clone(),
    };
    let resized = resize_trilinear(&cropped, spec.target_shape)?;
    let data = resized.data().iter().map(|&m| if m >= 0.5 { 1.0 } else { 0.0 }).collect();
    resized.with_data(IntensityDomain::Arbitrary, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hu(shape: [usize; 3], f: impl FnMut(usize, usize, usize) -> f64) -> Volume {
        Volume::from_fn(shape, IntensityDomain::Hu, f).unwrap()
    }

    #[test]
    fn crop_single_voxel() {
        let v = hu([8, 8, 8], |z, y, x| if (z, y, x) == (3, 4, 5) { 7.0 } else { 0.0 });
        let c = crop_black_boundaries(&v, 0.0).unwrap();
        assert_eq!(c.shape(), [1, 1, 1]);
        assert_eq!(c.data(), &[7.0]);
    }

    #[test]
    fn crop_nothing_above_threshold() {
        let v = hu([4, 4, 4], |_, _, _| -5.0);
        assert!(matches!(
            crop_black_boundaries(&v, 0.0),
            Err(Error::AllBelowThreshold { .. })
        ));
    }

    #[test]
    fn crop_block_matches_brute_force_scan() {
        let inside = |z: usize, y: usize, x: usize| {
            (5..11).contains(&z) && (2..7).contains(&y) && (9..13).contains(&x)
        };
        let v = hu([16, 16, 16], |z, y, x| {
            if inside(z, y, x) {
                1.0 + (z * 31 + y * 7 + x) as f64
            } else {
                0.0
            }
        });
        // oracle: per-axis min/max over the nonzero set
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    if v.get(z, y, x) != 0.0 {
                        for (a, p) in [z, y, x].into_iter().enumerate() {
                            lo[a] = lo[a].min(p);
                            hi[a] = hi[a].max(p);
                        }
                    }
                }
            }
        }
        let c = crop_black_boundaries(&v, 0.0).unwrap();
        assert_eq!(c.shape(), [6, 5, 4]);
        assert_eq!(c.shape(), [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1]);
        for z in 0..6 {
            for y in 0..5 {
                for x in 0..4 {
                    assert_eq!(c.get(z, y, x), v.get(z + lo[0], y + lo[1], x + lo[2]));
                }
            }
        }
    }

    #[test]
    fn smoothing_preserves_constants() {
        let v = hu([5, 7, 6], |_, _, _| 37.25);
        for sigma in [0.3, 1.0, 2.5, 6.0] {
            let s = gaussian_smooth(&v, sigma).unwrap();
            assert!(s.data().iter().all(|x| (x - 37.25).abs() < 1e-9));
        }
    }

    #[test]
    fn zero_sigma_is_bitwise_identity() {
        let v = hu([4, 5, 6], |z, y, x| ((z * 13 + y * 5 + x) as f64).sin() * 50.0);
        assert_eq!(gaussian_smooth(&v, 0.0).unwrap(), v);
        assert!(gaussian_smooth(&v, -1.0).is_err());
    }

    #[test]
    fn impulse_center_matches_direct_3d_kernel() {
        let v = hu([9, 9, 9], |z, y, x| if (z, y, x) == (4, 4, 4) { 1.0 } else { 0.0 });
        let s = gaussian_smooth(&v, 1.0).unwrap();
        // direct normalized 3D Gaussian over the truncated cube, radius 4
        let mut total = 0.0;
        for dz in -4i32..=4 {
            for dy in -4i32..=4 {
                for dx in -4i32..=4 {
                    total += (-((dz * dz + dy * dy + dx * dx) as f64) / 2.0).exp();
                }
            }
        }
        let want = 1.0 / total;
        assert!((s.get(4, 4, 4) - want).abs() < 1e-6);
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = hu([3, 4, 5], |_, _, _| 12.5);
        let r = resize_trilinear(&c, [7, 2, 9]).unwrap();
        assert_eq!(r.shape(), [7, 2, 9]);
        assert!(r.data().iter().all(|x| (x - 12.5).abs() < 1e-12));

        let v = hu([4, 5, 6], |z, y, x| ((z * 13 + y * 5 + x) as f64).cos());
        let same = resize_trilinear(&v, [4, 5, 6]).unwrap();
        for (a, b) in same.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_reproduces_linear_ramp() {
        let v = hu([2, 2, 2], |_, _, x| x as f64);
        let r = resize_trilinear(&v, [5, 5, 5]).unwrap();
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    assert!((r.get(z, y, x) - x as f64 / 4.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn window_examples() {
        let v = Volume::new(
            [1, 1, 5],
            [1.0; 3],
            IntensityDomain::Hu,
            vec![-500.0, -20.0, 0.0, 100.0, 3000.0],
        )
        .unwrap();
        let w = window_hu(&v, -20.0, 100.0).unwrap();
        assert_eq!(w.data(), &[-20.0, -20.0, 0.0, 100.0, 100.0]);
        let single = hu([1, 1, 2], |_, _, x| [150.0, 40.0][x]);
        assert_eq!(window_hu(&single, -20.0, 100.0).unwrap().data(), &[100.0, 40.0]);
    }

    #[test]
    fn window_rejects_other_domains() {
        let v = Volume::filled([1, 1, 1], IntensityDomain::Normalized, 0.0).unwrap();
        assert!(matches!(window_hu(&v, -20.0, 100.0), Err(Error::DomainMismatch { .. })));
    }

    #[test]
    fn normalize_endpoints() {
        let v = hu([1, 1, 3], |_, _, x| [-20.0, 100.0, 40.0][x]);
        let n = normalize_global(&v, -20.0, 100.0).unwrap();
        assert_eq!(n.domain(), IntensityDomain::Normalized);
        assert_eq!(n.data(), &[-1.0, 1.0, 0.0]);
        let bad = hu([1, 1, 1], |_, _, _| 101.0);
        assert!(matches!(normalize_global(&bad, -20.0, 100.0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn constant_40hu_preprocesses_to_zero() {
        let v = hu([10, 12, 9], |_, _, _| 40.0);
        let spec = PreprocSpec {
            target_shape: [8, 8, 8],
            ..PreprocSpec::default()
        };
        let p = preprocess(&v, &spec).unwrap();
        assert_eq!(p.shape(), [8, 8, 8]);
        assert!(p.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn preprocess_rejects_non_hu() {
        let v = Volume::filled([4, 4, 4], IntensityDomain::Arbitrary, 0.0).unwrap();
        assert!(preprocess(&v, &PreprocSpec::default()).is_err());
    }

    proptest! {
        #[test]
        fn smoothing_stays_within_input_range(
            seed in 0u64..1000, sigma in 0.0f64..3.0,
            nz in 1usize..6, ny in 1usize..6, nx in 1usize..6,
        ) {
            let v = hu([nz, ny, nx], |z, y, x| {
                (((z * 7919 + y * 104729 + x * 1299709) as u64 ^ seed) % 1000) as f64 - 500.0
            });
            let s = gaussian_smooth(&v, sigma).unwrap();
            prop_assert!(s.min() >= v.min() - 1e-6);
            prop_assert!(s.max() <= v.max() + 1e-6);
        }

        #[test]
        fn window_is_idempotent(vals in proptest::collection::vec(-2000.0f64..4000.0, 1..50)) {
            let n = vals.len();
            let v = Volume::new([1, 1, n], [1.0; 3], IntensityDomain::Hu, vals).unwrap();
            let once = window_hu(&v, -20.0, 100.0).unwrap();
            prop_assert_eq!(window_hu(&once, -20.0, 100.0).unwrap(), once);
        }

        #[test]
        fn normalize_roundtrip(vals in proptest::collection::vec(-20.0f64..=100.0, 1..64)) {
            let n = vals.len();
            let v = Volume::new([1, 1, n], [1.0; 3], IntensityDomain::Hu, vals).unwrap();
            let back = denormalize_global(&normalize_global(&v, -20.0, 100.0).unwrap(), -20.0, 100.0).unwrap();
            for (a, b) in back.data().iter().zip(v.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn resize_is_exact_on_trilinear_fields(
            c in proptest::array::uniform8(-5.0f64..5.0),
            src in proptest::array::uniform3(2usize..6),
            dst in proptest::array::uniform3(1usize..9),
        ) {
            // f = c0 + c1 z + c2 y + c3 x + c4 zy + c5 zx + c6 yx + c7 zyx in normalized coords
            let unit = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let field = |z: f64, y: f64, x: f64| {
                c[0] + c[1] * z + c[2] * y + c[3] * x + c[4] * z * y + c[5] * z * x
                    + c[6] * y * x + c[7] * z * y * x
            };
            let v = hu(src, |z, y, x| field(unit(z, src[0]), unit(y, src[1]), unit(x, src[2])));
            let r = resize_trilinear(&v, dst).unwrap();
            for z in 0..dst[0] {
                for y in 0..dst[1] {
                    for x in 0..dst[2] {
                        let want = field(unit(z, dst[0]), unit(y, dst[1]), unit(x, dst[2]));
                        prop_assert!((r.get(z, y, x) - want).abs() < 1e-5);
                    }
                }
            }
        }
    }
}
