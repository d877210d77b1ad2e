//! Resizing, Gaussian blur before or after the resize, whitening and
//! drop-slope robustness statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archzoo::Model;
use crate::datapipe::{Dataset, RgbImage};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const SIGMA_GRID: [f64; 5] = [0.1, 0.2, 0.4, 0.8, 1.6];

/// Three-channel float image in planar layout, values on the 0..255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Planar {
    pub width: usize,
    pub height: usize,
    /// `[3][height][width]`.
    pub data: Vec<f64>,
}

impl Planar {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let mut data = vec![0.0; 3 * w * h];
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f64;
            }
        }
        Self { width: w, height: h, data }
    }

    /// Rounds half away from zero and clamps to 8 bits.
    pub fn to_rgb(&self) -> RgbImage {
        let n = self.width * self.height;
        let mut data = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[3 * i + c] = self.data[c * n + i].round().clamp(0.0, 255.0) as u8;
            }
        }
        RgbImage::new(self.width, self.height, data).expect("sizes agree")
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Sampled Gaussian with radius `ceil(3 sigma)`, normalized to sum 1.
/// Returns the taps `k[0..=r]` of the symmetric kernel.
pub fn gaussian_half_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (0..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total = raw[0] + 2.0 * raw[1..].iter().sum::<f64>();
    raw.into_iter().map(|v| v / total).collect()
}

/// One separable pass along rows (`horizontal`) or columns with edge clamping.
/// Mirror-image taps are summed pairwise so flips commute exactly.
fn blur_pass(src: &[f64], w: usize, h: usize, k: &[f64], horizontal: bool) -> Vec<f64> {
    let r = k.len() as isize - 1;
    let mut out = vec![0.0; src.len()];
    let (len, lines) = if horizontal { (w, h) } else { (h, w) };
    let at = |line: usize, i: isize| -> f64 {
        let i = i.clamp(0, len as isize - 1) as usize;
        if horizontal {
            src[line * w + i]
        } else {
            src[i * w + line]
        }
    };
    for line in 0..lines {
        for i in 0..len {
            let ii = i as isize;
            let mut acc = k[0] * at(line, ii);
            for j in 1..=r {
                acc += k[j as usize] * (at(line, ii - j) + at(line, ii + j));
            }
            let idx = if horizontal { line * w + i } else { i * w + line };
            out[idx] = acc;
        }
    }
    out
}

pub fn gaussian_blur(img: &Planar, sigma: f64) -> Result<Planar> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("blur sigma must be a finite value >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_half_kernel(sigma);
    let (w, h) = (img.width, img.height);
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..3 {
        let p = img.plane(c);
        // Averaging both pass orders keeps blur(transpose) == transpose(blur).
        let hv = blur_pass(&blur_pass(p, w, h, &k, true), w, h, &k, false);
        let vh = blur_pass(&blur_pass(p, w, h, &k, false), w, h, &k, true);
        data.extend(hv.iter().zip(&vh).map(|(a, b)| 0.5 * (a + b)));
    }
    Ok(Planar { width: w, height: h, data })
}

pub fn gaussian_blur_rgb(img: &RgbImage, sigma: f64) -> Result<RgbImage> {
    Ok(gaussian_blur(&Planar::from_rgb(img), sigma)?.to_rgb())
}

fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per output index: first source index and normalized weights. The kernel
/// is stretched by the scale factor when downsampling (antialiasing) and the
/// window is clipped to the image.
fn resample_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor() as isize).max(0) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut w: Vec<f64> = (lo..hi).map(|j| catmull_rom((j as f64 + 0.5 - center) / stretch)).collect();
            let total: f64 = w.iter().sum();
            for v in &mut w {
                *v /= total;
            }
            (lo, w)
        })
        .collect()
}

/// Separable Catmull-Rom resize to `size`x`size`, center-aligned, clamped
/// to [0, 255]. Same-size input is returned unchanged.
pub fn resize_bicubic(img: &Planar, size: usize) -> Result<Planar> {
    if size == 0 {
        return Err(Error::Config("resize target must be at least 1".into()));
    }
    if img.width == size && img.height == size {
        return Ok(img.clone());
    }
    let (w, h) = (img.width, img.height);
    let wx = resample_weights(w, size);
    let wy = resample_weights(h, size);
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let p = img.plane(c);
        let mut tmp = vec![0.0; h * size];
        for y in 0..h {
            let row = &p[y * w..(y + 1) * w];
            for (x, (lo, ws)) in wx.iter().enumerate() {
                tmp[y * size + x] = ws.iter().enumerate().map(|(k, &v)| v * row[lo + k]).sum();
            }
        }
        for (lo, ws) in &wy {
            for x in 0..size {
                let v: f64 = ws.iter().enumerate().map(|(k, &v)| v * tmp[(lo + k) * size + x]).sum();
                data.push(v.clamp(0.0, 255.0));
            }
        }
    }
    Ok(Planar {
        width: size,
        height: size,
        data,
    })
}

pub fn resize_bicubic_rgb(img: &RgbImage, size: usize) -> Result<RgbImage> {
    Ok(resize_bicubic(&Planar::from_rgb(img), size)?.to_rgb())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlurScheme {
    /// Blur at native resolution, then resize.
    Pre,
    /// Resize, then blur.
    Post,
}

impl BlurScheme {
    pub fn name(self) -> &'static str {
        match self {
            BlurScheme::Pre => "pre",
            BlurScheme::Post => "post",
        }
    }
}

impl fmt::Display for BlurScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlurScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pre" => Ok(BlurScheme::Pre),
            "post" => Ok(BlurScheme::Post),
            _ => Err(Error::Config(format!("unknown blur scheme `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    pub scheme: BlurScheme,
    /// Strength in resized-pixel units.
    pub sigma: f64,
    pub target: usize,
    pub native: usize,
}

impl BlurSpec {
    pub fn new(scheme: BlurScheme, sigma: f64, native: usize, target: usize) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
        }
        if native < target {
            return Err(Error::Config(format!("native size {native} is below target {target}")));
        }
        Ok(Self {
            scheme,
            sigma,
            target,
            native,
        })
    }

    /// Native-resolution strength `sigma * S0 / S` used by the pre scheme.
    pub fn pre_sigma(&self) -> f64 {
        self.sigma * self.native as f64 / self.target as f64
    }
}

pub fn apply_blur_scheme(img: &RgbImage, spec: &BlurSpec) -> Result<Planar> {
    if img.width() != spec.native || img.height() != spec.native {
        return Err(Error::Data(format!(
            "image is {}x{}, blur spec expects {}x{}",
            img.width(),
            img.height(),
            spec.native,
            spec.native
        )));
    }
    let p = Planar::from_rgb(img);
    match spec.scheme {
        BlurScheme::Pre => resize_bicubic(&gaussian_blur(&p, spec.pre_sigma())?, spec.target),
        BlurScheme::Post => gaussian_blur(&resize_bicubic(&p, spec.target)?, spec.sigma),
    }
}

/// Model input scale: pixel values divided by 255.
pub fn planar_to_input<T: Scalar>(images: &[Planar]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Data("no images".into()));
    };
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for im in images {
        if (im.width, im.height) != (w, h) {
            return Err(Error::Data("images differ in size".into()));
        }
        data.extend(im.data.iter().map(|&v| T::lit(v / 255.0)));
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
}

/// Mean image `[3, H, W]` over a batch `[N, 3, H, W]`, accumulated in f64.
pub fn mean_image<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(TensorError::Dimension {
            op: "mean_image",
            detail: format!("expected non-empty [N, C, H, W], got {s:?}"),
        }
        .into());
    }
    let per = s[1] * s[2] * s[3];
    let mut acc = vec![0.0f64; per];
    for sample in x.data().chunks(per) {
        for (a, &v) in acc.iter_mut().zip(sample) {
            *a += v.to_f64_lossy();
        }
    }
    let n = s[0] as f64;
    Ok(Tensor::new(&s[1..], acc.into_iter().map(|v| T::lit(v / n)).collect())?)
}

/// Subtracts `mean[3, H, W]` from every sample of `x[..., 3, H, W]`.
pub fn whiten<T: Scalar>(x: &Tensor<T>, mean: &Tensor<T>) -> Result<Tensor<T>> {
    let (s, m) = (x.shape(), mean.shape());
    if s.len() < m.len() || s[s.len() - m.len()..] != *m {
        return Err(TensorError::Dimension {
            op: "whiten",
            detail: format!("mean {m:?} does not match input {s:?}"),
        }
        .into());
    }
    let mut out = x.clone();
    let per = mean.numel();
    for chunk in out.data_mut().chunks_mut(per) {
        for (v, &mu) in chunk.iter_mut().zip(mean.data()) {
            *v -= mu;
        }
    }
    Ok(out)
}

/// Least-squares slope of `metric` against `log2(1 + sigma)`.
pub fn drop_slope(points: &[(f64, f64)]) -> Result<f64> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Stats(format!(
            "drop slope needs at least 2 distinct sigmas, got {}",
            distinct.len()
        )));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| (1.0 + p.0).log2()).collect();
    // Offsetting by the first metric keeps constant series exactly flat.
    let y0 = points[0].1;
    let ys: Vec<f64> = points.iter().map(|p| p.1 - y0).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    /// `clean`, `pre` or `post`.
    pub scheme: String,
    pub sigma: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub delta_accuracy: f64,
    pub delta_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub model: String,
    pub rows: Vec<RobustnessRow>,
    pub slopes: BTreeMap<String, Slopes>,
}

pub const ROBUSTNESS_CSV_HEADER: &str = "model,scheme,sigma,accuracy,macro_f1,delta_accuracy,delta_macro_f1";

impl RobustnessReport {
    pub fn clean(&self) -> &RobustnessRow {
        &self.rows[0]
    }

    pub fn row(&self, scheme: BlurScheme, sigma: f64) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.scheme == scheme.name() && r.sigma == sigma)
    }

    /// Data rows without header.
    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                    self.model, r.scheme, r.sigma, r.accuracy, r.macro_f1, r.delta_accuracy, r.delta_macro_f1
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(ROBUSTNESS_CSV_HEADER);
        s.push('\n');
        for r in self.csv_rows() {
            s.push_str(&r);
            s.push('\n');
        }
        s
    }

    pub fn slopes_json(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.model, "slopes": self.slopes })
    }
}

/// Resizes every patch under `spec` (or plainly when `None`) and maps to
/// model inputs.
pub fn prepare_inputs<T: Scalar>(ds: &Dataset, spec: Option<&BlurSpec>, target: usize) -> Result<Tensor<T>> {
    let imgs = ds
        .patches
        .iter()
        .map(|p| match spec {
            Some(s) => apply_blur_scheme(&p.image, s),
            None => resize_bicubic(&Planar::from_rgb(&p.image), target),
        })
        .collect::<Result<Vec<_>>>()?;
    planar_to_input(&imgs)
}

/// Clean evaluation plus every `(scheme, sigma)` cell with identical whitening.
pub fn robustness_sweep<T: Scalar>(
    name: &str,
    model: &Model<T>,
    val: &Dataset,
    mean: &Tensor<T>,
    sigmas: &[f64],
    schemes: &[BlurScheme],
) -> Result<RobustnessReport> {
    let Some(first) = val.patches.first() else {
        return Err(Error::Data("empty validation set".into()));
    };
    let native = first.image.width();
    let target = model.spec().input_size;
    let labels = val.labels();
    let eval = |spec: Option<&BlurSpec>| -> Result<(f64, f64)> {
        let x = whiten(&prepare_inputs::<T>(val, spec, target)?, mean)?;
        let r = crate::trainer::evaluate_tensors(model, &x, &labels)?;
        Ok((r.accuracy, r.macro_f1))
    };
    let (acc0, f10) = eval(None)?;
    let mut rows = vec![RobustnessRow {
        scheme: "clean".into(),
        sigma: 0.0,
        accuracy: acc0,
        macro_f1: f10,
        delta_accuracy: 0.0,
        delta_macro_f1: 0.0,
    }];
    let mut slopes = BTreeMap::new();
    for &scheme in schemes {
        let mut pts_acc = vec![(0.0, acc0)];
        let mut pts_f1 = vec![(0.0, f10)];
        for &sigma in sigmas {
            let spec = BlurSpec::new(scheme, sigma, native, target)?;
            let (acc, f1) = eval(Some(&spec))?;
            rows.push(RobustnessRow {
                scheme: scheme.name().into(),
                sigma,
                accuracy: acc,
                macro_f1: f1,
                delta_accuracy: acc - acc0,
                delta_macro_f1: f1 - f10,
            });
            pts_acc.push((sigma, acc));
            pts_f1.push((sigma, f1));
        }
        slopes.insert(
            scheme.name().to_string(),
            Slopes {
                accuracy: drop_slope(&pts_acc).ok(),
                macro_f1: drop_slope(&pts_f1).ok(),
            },
        );
    }
    Ok(RobustnessReport {
        model: name.to_string(),
        rows,
        slopes,
    })
}
