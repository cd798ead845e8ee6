//! Intensity maps, resampling, smoothing and determinism of preprocessing.

use anodet3d::phantom::{make_phantom, LesionSpec, PhantomSpec};
use anodet3d::preproc::{
    denormalize_global, gaussian_kernel, gaussian_smooth, normalize_global, preprocess, resize_trilinear, window_hu,
    PreprocSpec,
};
use anodet3d::{IntensityDomain, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, close, Check};

fn hu(values: &[f64]) -> Volume {
    Volume::new([1, 1, values.len()], [1.0; 3], IntensityDomain::Hu, values.to_vec()).unwrap()
}

fn intensity_maps(out: &mut Vec<Check>) {
    let n = normalize_global(&hu(&[-20.0, 100.0, 40.0]), -20.0, 100.0).unwrap();
    out.push(check("-20 HU maps to -1", n.data()[0] == -1.0, format!("{}", n.data()[0])));
    out.push(check("100 HU maps to +1", n.data()[1] == 1.0, format!("{}", n.data()[1])));
    out.push(check("40 HU maps to 0", n.data()[2].abs() < 1e-12, format!("{}", n.data()[2])));

    let w = window_hu(&hu(&[-500.0, -20.0, 0.0, 40.0, 100.0, 150.0, 3000.0]), -20.0, 100.0).unwrap();
    let expected = [-20.0, -20.0, 0.0, 40.0, 100.0, 100.0, 100.0];
    out.push(check("window clamps into [-20, 100]", w.data() == expected, format!("{:?}", w.data())));
    let ww = window_hu(&w, -20.0, 100.0).unwrap();
    out.push(check("window is idempotent", ww.content_hash() == w.content_hash(), ""));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let raw: Vec<f64> = (0..1000).map(|_| rng.random_range(-20.0..=100.0)).collect();
    let back = denormalize_global(&normalize_global(&hu(&raw), -20.0, 100.0).unwrap(), -20.0, 100.0).unwrap();
    let worst = raw.iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(check("normalize round trip is the identity", worst < 1e-6, format!("worst {worst:e}")));
}

fn resampling(out: &mut Vec<Check>) {
    let ramp = Volume::from_fn([2, 2, 2], IntensityDomain::Hu, |_, _, x| 10.0 * x as f64).unwrap();
    let r = resize_trilinear(&ramp, [5, 5, 5]).unwrap();
    let mut worst = 0.0f64;
    for z in 0..5 {
        for y in 0..5 {
            for x in 0..5 {
                worst = worst.max((r.get(z, y, x) - 10.0 * x as f64 / 4.0).abs());
            }
        }
    }
    out.push(check("2^3 ramp resized to 5^3 stays a ramp", worst < 1e-6, format!("worst {worst:e}")));

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c: [f64; 8] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
    let f = |z: f64, y: f64, x: f64| {
        c[0] + c[1] * z + c[2] * y + c[3] * x + c[4] * z * y + c[5] * y * x + c[6] * z * x + c[7] * z * y * x
    };
    let src = Volume::from_fn([4, 5, 6], IntensityDomain::Arbitrary, |z, y, x| f(z as f64, y as f64, x as f64)).unwrap();
    let dst = resize_trilinear(&src, [7, 9, 11]).unwrap();
    let mut worst = 0.0f64;
    for z in 0..7 {
        for y in 0..9 {
            for x in 0..11 {
                let exact = f(z as f64 * 3.0 / 6.0, y as f64 * 4.0 / 8.0, x as f64 * 5.0 / 10.0);
                worst = worst.max((dst.get(z, y, x) - exact).abs());
            }
        }
    }
    out.push(check("trilinear fields are reproduced", worst < 1e-5, format!("worst {worst:e}")));

    let same = resize_trilinear(&src, [4, 5, 6]).unwrap();
    let worst = src.data().iter().zip(same.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(check("resize to the same shape is the identity", worst < 1e-6, format!("worst {worst:e}")));
}

fn smoothing(out: &mut Vec<Check>) {
    let flat = Volume::filled([6, 7, 8], IntensityDomain::Hu, 37.5).unwrap();
    let mut worst = 0.0f64;
    for sigma in [0.3, 1.0, 2.5, 6.0] {
        let s = gaussian_smooth(&flat, sigma).unwrap();
        worst = worst.max(s.data().iter().map(|v| (v - 37.5).abs()).fold(0.0, f64::max));
    }
    out.push(check("smoothing preserves constants", worst < 1e-9, format!("worst {worst:e}")));

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let noisy = Volume::from_fn([8; 3], IntensityDomain::Hu, |_, _, _| rng.random_range(-100.0..100.0)).unwrap();
    let zero = gaussian_smooth(&noisy, 0.0).unwrap();
    out.push(check("sigma 0 is bitwise identity", zero.data() == noisy.data(), ""));
    let s = gaussian_smooth(&noisy, 1.3).unwrap();
    let bounded = s.min() >= noisy.min() - 1e-6 && s.max() <= noisy.max() + 1e-6;
    out.push(check("smoothing stays within the input range", bounded, ""));

    // impulse response at the centre against a direct 3D Gaussian sum
    let impulse = Volume::from_fn([9; 3], IntensityDomain::Arbitrary, |z, y, x| {
        if (z, y, x) == (4, 4, 4) {
            1.0
        } else {
            0.0
        }
    })
    .unwrap();
    let centre = gaussian_smooth(&impulse, 1.0).unwrap().get(4, 4, 4);
    let r = 4i32;
    let mut total = 0.0;
    for z in -r..=r {
        for y in -r..=r {
            for x in -r..=r {
                total += (-((z * z + y * y + x * x) as f64) / 2.0).exp();
            }
        }
    }
    let direct = 1.0 / total;
    out.push(check(
        "impulse centre matches the normalized 3D kernel",
        close(centre, direct, 1e-6),
        format!("{centre} vs {direct}"),
    ));
    out.push(check("kernel sums to 1", close(gaussian_kernel(1.7).iter().sum(), 1.0, 1e-12), ""));
}

fn pipeline(out: &mut Vec<Check>) {
    let spec = PreprocSpec {
        target_shape: [16; 3],
        ..PreprocSpec::default()
    };
    let flat = Volume::filled([20; 3], IntensityDomain::Hu, 40.0).unwrap();
    let p = preprocess(&flat, &spec).unwrap();
    let worst = p.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    out.push(check("constant 40 HU preprocesses to 0", worst < 1e-9, format!("worst {worst:e}")));

    let phantom = make_phantom(&PhantomSpec {
        shape: [24; 3],
        lesion: Some(LesionSpec {
            radius_vox: 4.0,
            ..LesionSpec::default()
        }),
        seed: 9,
        ..PhantomSpec::default()
    })
    .unwrap();
    let a = preprocess(&phantom.volume, &spec).unwrap();
    let b = preprocess(&phantom.volume, &spec).unwrap();
    out.push(check("preprocessing a phantom twice gives equal hashes", a.content_hash() == b.content_hash(), ""));
    let in_range = a.domain() == IntensityDomain::Normalized && a.min() >= -1.0 && a.max() <= 1.0;
    out.push(check("preprocessed output is normalized to [-1, 1]", in_range && a.shape() == [16; 3], ""));

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path().join("p")).unwrap();
    let loaded = Volume::load(dir.path().join("p")).unwrap();
    out.push(check("saved volume reloads with the same hash", loaded.content_hash() == a.content_hash(), ""));
    a.save(dir.path().join("q")).unwrap();
    let same_bytes = std::fs::read(dir.path().join("p.vol")).unwrap() == std::fs::read(dir.path().join("q.vol")).unwrap();
    out.push(check("saving twice writes identical bytes", same_bytes, ""));
}

pub fn run() -> Vec<Check> {
    let mut out = Vec::new();
    intensity_maps(&mut out);
    resampling(&mut out);
    smoothing(&mut out);
    pipeline(&mut out);
    out
}
