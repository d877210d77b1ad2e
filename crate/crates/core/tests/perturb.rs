use micropatch::archzoo::{ArchKind, Model, ModelSpec};
use micropatch::datapipe::{Dataset, LabeledPatch, RgbImage};
use micropatch::perturb::{
    apply_blur_scheme, drop_slope, gaussian_blur, mean_image, planar_to_input, prepare_inputs, resize_bicubic,
    robustness_sweep, whiten, BlurScheme, BlurSpec, Planar, SIGMA_GRID,
};
use micropatch::tensor::Tensor;
use proptest::prelude::*;

fn texture(side: usize, seed: usize) -> RgbImage {
    RgbImage::from_fn(side, side, |x, y| {
        let v = (x * 31 + y * 17 + seed * 101) ^ (x * y + seed);
        [(v % 256) as u8, ((v / 3) % 256) as u8, ((x * 9 + seed) % 256) as u8]
    })
}

/// Normal equations in raw sums, then the slope by Cramer's rule.
fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(s, m) in points {
        let x = (1.0 + s).ln() / std::f64::consts::LN_2;
        sx += x;
        sy += m;
        sxx += x * x;
        sxy += x * m;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[test]
fn resnet_pre_blur_series_matches_least_squares() {
    // Macro-F1 and delta columns of the reference pre-blur rows; clean = value - delta.
    let rows = [
        (0.1f64, 0.553384f64, -0.000187f64),
        (0.2, 0.553114, -0.000457),
        (0.4, 0.548343, -0.005228),
        (0.8, 0.526534, -0.027037),
        (1.6, 0.435413, -0.118158),
    ];
    for &(_, f1, d) in &rows {
        assert!((f1 - d - 0.553571).abs() < 1e-9);
    }
    let mut pts = vec![(0.0, 0.553571)];
    pts.extend(rows.iter().map(|&(s, f1, _)| (s, f1)));
    let got = drop_slope(&pts).unwrap();
    let want = ols_slope(&pts);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert!(got < 0.0);
}

#[test]
fn constant_series_has_zero_slope() {
    let pts: Vec<(f64, f64)> = std::iter::once(0.0).chain(SIGMA_GRID).map(|s| (s, 0.917)).collect();
    assert_eq!(drop_slope(&pts).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn slope_is_offset_invariant_and_scales_linearly(
        ms in prop::collection::vec(0.0f64..1.0, 6),
        c in -1.0f64..1.0,
        k in 0.1f64..10.0,
    ) {
        let sig = [0.0, 0.1, 0.2, 0.4, 0.8, 1.6];
        let pts: Vec<(f64, f64)> = sig.iter().copied().zip(ms.iter().copied()).collect();
        let base = drop_slope(&pts).unwrap();
        prop_assert!((base - ols_slope(&pts)).abs() < 1e-9);
        let shifted: Vec<(f64, f64)> = pts.iter().map(|&(s, m)| (s, m + c)).collect();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(s, m)| (s, k * m)).collect();
        prop_assert!((drop_slope(&shifted).unwrap() - base).abs() < 1e-9);
        prop_assert!((drop_slope(&scaled).unwrap() - k * base).abs() < 1e-9 * k.max(1.0));
    }
}

#[test]
fn delta_blur_matches_analytic_kernel() {
    let (n, c, sigma) = (21usize, 10usize, 0.8f64);
    let mut p = Planar {
        width: n,
        height: n,
        data: vec![0.0; 3 * n * n],
    };
    for ch in 0..3 {
        p.data[ch * n * n + c * n + c] = 1.0;
    }
    let r = (3.0 * sigma).ceil() as i64;
    let g = |d: i64| if d.abs() > r { 0.0 } else { (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() };
    let z: f64 = (-r..=r).map(g).sum();
    let out = gaussian_blur(&p, sigma).unwrap();
    for ch in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let want = g(y as i64 - c as i64) * g(x as i64 - c as i64) / (z * z);
                assert!((out.data[ch * n * n + y * n + x] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn schemes_coincide_without_resizing() {
    let img = texture(40, 3);
    for s in SIGMA_GRID {
        let pre = apply_blur_scheme(&img, &BlurSpec::new(BlurScheme::Pre, s, 40, 40).unwrap()).unwrap();
        let post = apply_blur_scheme(&img, &BlurSpec::new(BlurScheme::Post, s, 40, 40).unwrap()).unwrap();
        assert_eq!(pre, post, "sigma {s}");
    }
}

#[test]
fn zero_sigma_is_plain_resize() {
    let img = texture(80, 5);
    let plain = resize_bicubic(&Planar::from_rgb(&img), 40).unwrap();
    for scheme in [BlurScheme::Pre, BlurScheme::Post] {
        let out = apply_blur_scheme(&img, &BlurSpec::new(scheme, 0.0, 80, 40).unwrap()).unwrap();
        assert_eq!(out.to_rgb(), plain.to_rgb());
        assert_eq!(out, plain);
    }
}

#[test]
fn pre_blur_uses_native_scale_sigma() {
    let img = texture(80, 9);
    let spec = BlurSpec::new(BlurScheme::Pre, 0.4, 80, 40).unwrap();
    assert_eq!(spec.pre_sigma(), 0.8);
    let manual = resize_bicubic(&gaussian_blur(&Planar::from_rgb(&img), 0.8).unwrap(), 40).unwrap();
    assert_eq!(apply_blur_scheme(&img, &spec).unwrap(), manual);
}

fn val_set(side: usize, per_class: usize, classes: usize) -> Dataset {
    let mut patches = Vec::new();
    for c in 0..classes {
        for i in 0..per_class {
            patches.push(LabeledPatch {
                image: texture(side, c * 10 + i),
                flag: format!("c{c}"),
                source_id: format!("{c}-{i}"),
                tags: Vec::new(),
            });
        }
    }
    Dataset::from_patches(patches)
}

#[test]
fn whitened_training_set_has_zero_mean() {
    let ds = val_set(40, 4, 3);
    let x = prepare_inputs::<f32>(&ds, None, 40).unwrap();
    let w = whiten(&x, &mean_image(&x).unwrap()).unwrap();
    let m = mean_image(&w).unwrap();
    assert!(m.data().iter().all(|v| v.abs() < 1e-5));
    // Planar inputs land on the unit scale.
    let one = planar_to_input::<f64>(&[Planar::from_rgb(&RgbImage::filled(2, 2, [255, 0, 51]))]).unwrap();
    assert_eq!(&one.data()[..4], &[1.0; 4]);
    assert!((one.data()[8] - 0.2).abs() < 1e-12);
}

fn cnn(classes: usize) -> Model<f32> {
    Model::build(ModelSpec::new(ArchKind::Cnn, classes, 4)).unwrap()
}

#[test]
fn constant_predictor_is_blur_invariant() {
    let mut m = cnn(3);
    let store = m.store_mut();
    let w = store.find("head.weight").unwrap();
    let b = store.find("head.bias").unwrap();
    let ws = store.get(w).shape().to_vec();
    *store.get_mut(w) = Tensor::zeros(&ws);
    *store.get_mut(b) = Tensor::from_f64(&[3], &[0.0, 5.0, 0.0]).unwrap();
    let val = val_set(80, 2, 3);
    let mean = Tensor::zeros(&[3, 40, 40]);
    let rep = robustness_sweep("const", &m, &val, &mean, &SIGMA_GRID, &[BlurScheme::Pre, BlurScheme::Post]).unwrap();
    assert_eq!(rep.rows.len(), 1 + 2 * SIGMA_GRID.len());
    for r in &rep.rows {
        assert_eq!(r.accuracy, 1.0 / 3.0);
        assert_eq!(r.delta_accuracy, 0.0);
    }
    for s in rep.slopes.values() {
        assert_eq!(s.accuracy, Some(0.0));
        assert_eq!(s.macro_f1, Some(0.0));
    }
    let csv = rep.to_csv();
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.lines().nth(1).unwrap().starts_with("const,clean,0,"));
}

#[test]
fn zero_sigma_sweep_reproduces_clean() {
    let m = cnn(2);
    let val = val_set(40, 3, 2);
    let x = prepare_inputs::<f32>(&val, None, 40).unwrap();
    let mean = mean_image(&x).unwrap();
    let rep = robustness_sweep("m", &m, &val, &mean, &[0.0], &[BlurScheme::Pre, BlurScheme::Post]).unwrap();
    let clean = rep.clean().clone();
    for r in &rep.rows[1..] {
        assert_eq!((r.accuracy, r.macro_f1), (clean.accuracy, clean.macro_f1));
        assert_eq!((r.delta_accuracy, r.delta_macro_f1), (0.0, 0.0));
    }
}
