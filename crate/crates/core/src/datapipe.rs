//! Dataset ingestion, class-balanced sampling, stratified splitting and the
//! geometric + color augmentation pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub const MIN_NATIVE_SIZE: usize = 40;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn remap(&self, width: usize, height: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        Self::from_fn(width, height, |x, y| {
            let (sx, sy) = src(x, y);
            self.pixel(sx, sy)
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        self.remap(w, self.height, |x, y| (w - 1 - x, y))
    }

    pub fn flip_vertical(&self) -> Self {
        let h = self.height;
        self.remap(self.width, h, |x, y| (x, h - 1 - y))
    }

    /// Reflection about the main diagonal.
    pub fn transpose(&self) -> Self {
        self.remap(self.height, self.width, |x, y| (y, x))
    }

    pub fn load_png(path: &Path) -> std::result::Result<Self, String> {
        let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
        match img {
            image::DynamicImage::ImageRgb8(buf) => {
                let (w, h) = buf.dimensions();
                Ok(Self {
                    width: w as usize,
                    height: h as usize,
                    data: buf.into_raw(),
                })
            }
            other => Err(format!(
                "{}: expected 8-bit RGB, found {:?}",
                path.display(),
                other.color()
            )),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentTag {
    RGamma12,
    BGamma12,
    RgbGamma12,
    HsvS08V11,
    HsvS07V11BGamma13,
    FlipH,
    FlipV,
    Transpose,
}

impl AugmentTag {
    pub fn code(self) -> &'static str {
        match self {
            AugmentTag::RGamma12 => "rg12",
            AugmentTag::BGamma12 => "bg12",
            AugmentTag::RgbGamma12 => "rgbg12",
            AugmentTag::HsvS08V11 => "hsv0811",
            AugmentTag::HsvS07V11BGamma13 => "hsv0711bg13",
            AugmentTag::FlipH => "fh",
            AugmentTag::FlipV => "fv",
            AugmentTag::Transpose => "tr",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        [
            AugmentTag::RGamma12,
            AugmentTag::BGamma12,
            AugmentTag::RgbGamma12,
            AugmentTag::HsvS08V11,
            AugmentTag::HsvS07V11BGamma13,
            AugmentTag::FlipH,
            AugmentTag::FlipV,
            AugmentTag::Transpose,
        ]
        .into_iter()
        .find(|t| t.code() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabeledPatch {
    pub image: RgbImage,
    pub flag: String,
    pub source_id: String,
    /// Transforms in application order; empty for originals.
    pub tags: Vec<AugmentTag>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub patches: Vec<LabeledPatch>,
    /// Flag to contiguous class id, in sorted flag order.
    pub class_index: BTreeMap<String, usize>,
}

impl Dataset {
    /// Indexes exactly the flags present.
    pub fn from_patches(patches: Vec<LabeledPatch>) -> Self {
        let flags: std::collections::BTreeSet<&str> = patches.iter().map(|p| p.flag.as_str()).collect();
        let class_index = flags.into_iter().enumerate().map(|(i, f)| (f.to_string(), i)).collect();
        Self { patches, class_index }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in &self.patches {
            *out.entry(p.flag.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn labels(&self) -> Vec<usize> {
        self.patches.iter().map(|p| self.class_index[&p.flag]).collect()
    }

    /// Flags ordered by class id.
    pub fn class_names(&self) -> Vec<String> {
        let mut v: Vec<(usize, String)> = self.class_index.iter().map(|(f, &i)| (i, f.clone())).collect();
        v.sort();
        v.into_iter().map(|(_, f)| f).collect()
    }

    /// SHA-256 over flags, provenance, tags and pixels in order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.patches {
            h.update(p.flag.as_bytes());
            h.update([0]);
            h.update(p.source_id.as_bytes());
            h.update([0]);
            for t in &p.tags {
                h.update(t.code().as_bytes());
                h.update([1]);
            }
            h.update((p.image.width as u64).to_le_bytes());
            h.update((p.image.height as u64).to_le_bytes());
            h.update(&p.image.data);
        }
        hex::encode(h.finalize())
    }

    fn with_patches(&self, patches: Vec<LabeledPatch>) -> Self {
        Self {
            patches,
            class_index: self.class_index.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    flag: String,
    source_id: String,
}

/// Reads `root/manifest.csv` (`path,flag,source_id`) and the referenced PNGs.
/// Row numbers in errors count data rows from 1.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = root.join("manifest.csv");
    let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Ingestion { row: 0, detail: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "flag", "source_id"] {
        return Err(Error::Ingestion {
            row: 0,
            detail: format!("header must be `path,flag,source_id`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut patches = Vec::new();
    for (i, rec) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingestion { row, detail: e.to_string() })?;
        if rec.flag.is_empty() {
            return Err(Error::Ingestion { row, detail: "empty flag".into() });
        }
        let image = RgbImage::load_png(&root.join(&rec.path)).map_err(|detail| Error::Ingestion { row, detail })?;
        if image.width != image.height {
            return Err(Error::Ingestion {
                row,
                detail: format!("{} is {}x{}, not square", rec.path, image.width, image.height),
            });
        }
        if image.width < MIN_NATIVE_SIZE {
            return Err(Error::Ingestion {
                row,
                detail: format!("{} is {}px, smaller than {MIN_NATIVE_SIZE}px", rec.path, image.width),
            });
        }
        patches.push(LabeledPatch {
            image,
            flag: rec.flag,
            source_id: rec.source_id,
            tags: Vec::new(),
        });
    }
    Ok(Dataset::from_patches(patches))
}

/// Writes PNGs named `{id}__{tags}.png` plus `manifest.csv` into `root`.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = root.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["path", "flag", "source_id"]).map_err(|e| Error::Data(e.to_string()))?;
    for (i, p) in ds.patches.iter().enumerate() {
        let tags: Vec<&str> = p.tags.iter().map(|t| t.code()).collect();
        let name = if tags.is_empty() {
            format!("{i:07}.png")
        } else {
            format!("{i:07}__{}.png", tags.join("-"))
        };
        p.image.save_png(&root.join(&name))?;
        w.write_record([name.as_str(), p.flag.as_str(), p.source_id.as_str()])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

/// Parses augmentation tags back out of a `{id}__{tags}.png` file name.
pub fn tags_from_filename(name: &str) -> Vec<AugmentTag> {
    let stem = name.strip_suffix(".png").unwrap_or(name);
    match stem.split_once("__") {
        Some((_, tags)) => tags.split('-').filter_map(AugmentTag::from_code).collect(),
        None => Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub flag_limit: usize,
    pub seed: u64,
}

pub const FLAG_LIMITS: [usize; 7] = [256, 512, 1024, 2048, 4096, 8192, 16384];

impl SamplingConfig {
    pub fn new(flag_limit: usize, seed: u64) -> Result<Self> {
        if flag_limit == 0 {
            return Err(Error::Config("flag_limit must be positive".into()));
        }
        Ok(Self { flag_limit, seed })
    }

    /// `ceil(0.05 * flag_limit)`.
    pub fn flag_min(&self) -> usize {
        (self.flag_limit * 5).div_ceil(100)
    }
}

/// Drops classes below `flag_min`, caps the rest at `flag_limit` by uniform
/// sampling without replacement. Output is grouped by class, original order.
pub fn class_balanced_sample(ds: &Dataset, cfg: &SamplingConfig) -> Result<Dataset> {
    let min = cfg.flag_min();
    let mut out = Vec::new();
    for (flag, &class) in &ds.class_index {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| &ds.patches[i].flag == flag).collect();
        if members.len() < min {
            continue;
        }
        let chosen = if members.len() > cfg.flag_limit {
            let mut r = rng::stream(cfg.seed, &[rng::SAMPLE, class as u64]);
            let mut pick = index::sample(&mut r, members.len(), cfg.flag_limit).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|k| members[k]).collect()
        } else {
            members
        };
        out.extend(chosen.into_iter().map(|i| ds.patches[i].clone()));
    }
    if out.is_empty() {
        return Err(Error::Sampling(format!(
            "every class has fewer than {min} samples (flag_limit {})",
            cfg.flag_limit
        )));
    }
    Ok(Dataset::from_patches(out))
}

/// Per class, `clamp(floor(frac * n), 1, n - 1)` shuffled samples go to
/// train and the rest to validation. Both halves keep the input's class index.
pub fn stratified_split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let groups = ds.class_index.iter().map(|(flag, &class)| {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| &ds.patches[i].flag == flag).collect();
        (flag.clone(), class, members)
    });
    let (tr, va) = split_groups(groups, train_fraction, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.patches[i].clone()).collect();
    Ok((ds.with_patches(pick(&tr)), ds.with_patches(pick(&va))))
}

/// Index-level version of [`stratified_split`] over integer labels; classes
/// that do not occur are skipped.
pub fn stratified_indices(labels: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    split_groups(
        by_class.into_iter().map(|(c, m)| (c.to_string(), c, m)),
        train_fraction,
        seed,
    )
}

fn split_groups(
    groups: impl Iterator<Item = (String, usize, Vec<usize>)>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (name, class, mut members) in groups {
        if members.len() < 2 {
            return Err(Error::Split {
                class: name,
                count: members.len(),
            });
        }
        let mut r = rng::stream(seed, &[rng::SPLIT, class as u64]);
        members.shuffle(&mut r);
        let n_train = ((members.len() as f64 * train_fraction + 1e-9).floor() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..]);
    }
    Ok((train, val))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    R = 0,
    G = 1,
    B = 2,
}

/// `out = round(255 * (in / 255)^gamma)` on the selected channels.
pub fn gamma_correct(img: &RgbImage, channels: &[Channel], gamma: f64) -> Result<RgbImage> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let lut: Vec<u8> = (0..256)
        .map(|i| (255.0 * (i as f64 / 255.0).powf(gamma)).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        for &c in channels {
            px[c as usize] = lut[px[c as usize] as usize];
        }
    }
    Ok(out)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Scales saturation and value in hexcone HSV, clamped to 1, then
/// quantizes with round-half-up.
pub fn hsv_transform(img: &RgbImage, alpha_s: f64, alpha_v: f64) -> Result<RgbImage> {
    if !(alpha_s > 0.0 && alpha_v > 0.0) {
        return Err(Error::Config(format!("HSV factors must be positive, got {alpha_s}, {alpha_v}")));
    }
    let q = |v: f64| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0);
        let (r, g, b) = hsv_to_rgb(h, (alpha_s * s).min(1.0), (alpha_v * v).min(1.0));
        px.copy_from_slice(&[q(r), q(g), q(b)]);
    }
    Ok(out)
}

/// The five color subsets as `(tag, percent of N)`.
pub const COLOR_SUBSETS: [(AugmentTag, usize); 5] = [
    (AugmentTag::RGamma12, 20),
    (AugmentTag::BGamma12, 30),
    (AugmentTag::RgbGamma12, 50),
    (AugmentTag::HsvS08V11, 20),
    (AugmentTag::HsvS07V11BGamma13, 20),
];

pub fn apply_color(img: &RgbImage, tag: AugmentTag) -> Result<RgbImage> {
    use Channel::*;
    match tag {
        AugmentTag::RGamma12 => gamma_correct(img, &[R], 1.2),
        AugmentTag::BGamma12 => gamma_correct(img, &[B], 1.2),
        AugmentTag::RgbGamma12 => gamma_correct(img, &[R, G, B], 1.2),
        AugmentTag::HsvS08V11 => hsv_transform(img, 0.8, 1.1),
        AugmentTag::HsvS07V11BGamma13 => gamma_correct(&hsv_transform(img, 0.7, 1.1)?, &[B], 1.3),
        AugmentTag::FlipH => Ok(img.flip_horizontal()),
        AugmentTag::FlipV => Ok(img.flip_vertical()),
        AugmentTag::Transpose => Ok(img.transpose()),
    }
}

/// Closed-form size of `augment` for `n` originals.
pub fn augmented_len(n: usize) -> usize {
    4 * (n + COLOR_SUBSETS.iter().map(|&(_, pct)| n * pct / 100).sum::<usize>())
}

/// Originals plus five independently drawn color subsets, each sample then
/// expanded by identity, horizontal flip, vertical flip and transpose.
pub fn augment(train: &Dataset, seed: u64) -> Result<Dataset> {
    let n = train.len();
    let mut base: Vec<LabeledPatch> = train.patches.clone();
    for (k, &(tag, pct)) in COLOR_SUBSETS.iter().enumerate() {
        let size = n * pct / 100;
        let mut r = rng::stream(seed, &[rng::AUGMENT, k as u64]);
        let mut pick = index::sample(&mut r, n, size).into_vec();
        pick.sort_unstable();
        for i in pick {
            let p = &train.patches[i];
            let mut tags = p.tags.clone();
            tags.push(tag);
            base.push(LabeledPatch {
                image: apply_color(&p.image, tag)?,
                flag: p.flag.clone(),
                source_id: p.source_id.clone(),
                tags,
            });
        }
    }
    let mut out = Vec::with_capacity(4 * base.len());
    for p in base {
        for geo in [None, Some(AugmentTag::FlipH), Some(AugmentTag::FlipV), Some(AugmentTag::Transpose)] {
            let mut q = p.clone();
            if let Some(g) = geo {
                q.image = apply_color(&p.image, g)?;
                q.tags.push(g);
            }
            out.push(q);
        }
    }
    Ok(train.with_patches(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(flag: &str, v: u8) -> LabeledPatch {
        LabeledPatch {
            image: RgbImage::filled(40, 40, [v, v, v]),
            flag: flag.to_string(),
            source_id: format!("{flag}-{v}"),
            tags: Vec::new(),
        }
    }

    fn ds(counts: &[(&str, usize)]) -> Dataset {
        let mut p = Vec::new();
        for &(f, n) in counts {
            for i in 0..n {
                p.push(patch(f, (i % 256) as u8));
            }
        }
        Dataset::from_patches(p)
    }

    #[test]
    fn flag_min_is_ceiling_of_five_percent() {
        assert_eq!(SamplingConfig::new(256, 0).unwrap().flag_min(), 13);
        assert_eq!(SamplingConfig::new(1024, 0).unwrap().flag_min(), 52);
        assert_eq!(SamplingConfig::new(20, 0).unwrap().flag_min(), 1);
        assert!(SamplingConfig::new(0, 0).is_err());
    }

    #[test]
    fn sampling_rule() {
        let d = ds(&[("a", 300), ("b", 10), ("c", 500)]);
        let s = class_balanced_sample(&d, &SamplingConfig::new(256, 1).unwrap()).unwrap();
        let c = s.counts();
        assert_eq!(c.get("a"), Some(&256));
        assert_eq!(c.get("b"), None);
        assert_eq!(c.get("c"), Some(&256));
        assert_eq!(s.num_classes(), 2);
        let again = class_balanced_sample(&d, &SamplingConfig::new(256, 1).unwrap()).unwrap();
        assert_eq!(s, again);
        let whole = class_balanced_sample(&ds(&[("a", 100)]), &SamplingConfig::new(256, 1).unwrap()).unwrap();
        assert_eq!(whole.len(), 100);
        assert!(matches!(
            class_balanced_sample(&ds(&[("a", 3)]), &SamplingConfig::new(256, 1).unwrap()),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn split_sizes() {
        let d = ds(&[("a", 10), ("b", 5), ("c", 2)]);
        let (t, v) = stratified_split(&d, 0.8, 42).unwrap();
        assert_eq!(t.counts(), BTreeMap::from([("a".into(), 8), ("b".into(), 4), ("c".into(), 1)]));
        assert_eq!(v.counts(), BTreeMap::from([("a".into(), 2), ("b".into(), 1), ("c".into(), 1)]));
        assert_eq!(stratified_split(&d, 0.8, 42).unwrap().0, t);
        let err = stratified_split(&ds(&[("a", 4), ("z", 1)]), 0.8, 42).unwrap_err();
        assert!(matches!(err, Error::Split { ref class, count: 1 } if class == "z"));
    }

    #[test]
    fn gamma_examples() {
        let img = RgbImage::new(3, 1, vec![0, 0, 0, 128, 128, 128, 255, 255, 255]).unwrap();
        let g = gamma_correct(&img, &[Channel::R], 1.2).unwrap();
        assert_eq!(g.pixel(1, 0), [112, 128, 128]);
        assert_eq!(g.pixel(0, 0), [0, 0, 0]);
        assert_eq!(g.pixel(2, 0), [255, 255, 255]);
        assert_eq!(gamma_correct(&img, &[Channel::R, Channel::G, Channel::B], 1.0).unwrap(), img);
    }

    #[test]
    fn hsv_examples() {
        let red = RgbImage::new(1, 1, vec![255, 0, 0]).unwrap();
        assert_eq!(hsv_transform(&red, 0.8, 1.1).unwrap().pixel(0, 0), [255, 51, 51]);
        let gray = RgbImage::new(1, 1, vec![100, 100, 100]).unwrap();
        assert_eq!(hsv_transform(&gray, 0.5, 1.1).unwrap().pixel(0, 0), [110, 110, 110]);
        let img = RgbImage::from_fn(16, 16, |x, y| [(x * 16) as u8, (y * 16) as u8, ((x * y) % 256) as u8]);
        let same = hsv_transform(&img, 1.0, 1.0).unwrap();
        for (a, b) in img.data().iter().zip(same.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn geometric_transforms() {
        let img = RgbImage::new(2, 2, (0..12).collect()).unwrap();
        let t = img.transpose();
        assert_eq!(t.pixel(1, 0), img.pixel(0, 1));
        assert_eq!(t.pixel(0, 1), img.pixel(1, 0));
        assert_eq!(t.pixel(0, 0), img.pixel(0, 0));
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
    }

    #[test]
    fn augment_size_and_tags() {
        let d = ds(&[("a", 60), ("b", 40)]);
        let a = augment(&d, 7).unwrap();
        assert_eq!(a.len(), 960);
        assert_eq!(augmented_len(100), 960);
        assert_eq!(a.patches[1].tags, vec![AugmentTag::FlipH]);
        assert_eq!(a.patches[400].tags.len(), 1);
        assert_eq!(a.patches[401].tags.len(), 2);
        assert_eq!(augment(&d, 7).unwrap(), a);
    }

    #[test]
    fn filename_tags() {
        assert_eq!(tags_from_filename("0000001__rg12-fh.png"), vec![AugmentTag::RGamma12, AugmentTag::FlipH]);
        assert!(tags_from_filename("0000001.png").is_empty());
    }
}
