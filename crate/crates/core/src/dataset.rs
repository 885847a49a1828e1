//! Image/label-map samples, on-disk loading, and the seeded synthetic scene
//! generator used for desk-scale training and tests.
//!
//! On-disk layout under a dataset root:
//!
//! ```text
//! images/<id>.png         8-bit RGB
//! labels/<id>.png         8-bit single channel, class index, 255 = VOID
//! channels/<id>_c<j>.png  optional 8-bit auxiliary channels (synthetic data)
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value marking unlabeled pixels.
pub const VOID: u8 = 255;

/// Smallest admissible image side.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major RGB pixels.
    pub pixels: Vec<[u8; 3]>,
    /// Row-major class indices; [`VOID`] for unlabeled pixels.
    pub labels: Vec<u8>,
    pub num_classes: usize,
    /// Auxiliary per-pixel channels (row-major, one `Vec` per channel).
    #[serde(default)]
    pub channels: Vec<Vec<u8>>,
}

impl ImageSample {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_SIDE || self.height < MIN_SIDE {
            return Err(Error::Validation(format!(
                "{}: image {}x{} is smaller than {MIN_SIDE}x{MIN_SIDE}",
                self.id, self.width, self.height
            )));
        }
        let n = self.len();
        if self.pixels.len() != n || self.labels.len() != n {
            return Err(Error::DimensionMismatch {
                id: self.id.clone(),
                expected: (self.height, self.width),
                found: (self.labels.len(), self.pixels.len()),
            });
        }
        if let Some(bad) = self
            .labels
            .iter()
            .find(|&&l| l != VOID && (l as usize) >= self.num_classes)
        {
            return Err(Error::Validation(format!(
                "{}: label {bad} out of range for {} classes",
                self.id, self.num_classes
            )));
        }
        if let Some(c) = self.channels.iter().position(|c| c.len() != n) {
            return Err(Error::Validation(format!(
                "{}: auxiliary channel {c} has wrong length",
                self.id
            )));
        }
        Ok(())
    }

    /// Histogram of labeled pixels per class.
    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &l in &self.labels {
            if l != VOID {
                counts[l as usize] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    /// One entry per sample.
    pub splits: Vec<Split>,
}

impl Dataset {
    /// Wraps samples with every sample assigned to the training split.
    pub fn new(samples: Vec<ImageSample>) -> Self {
        let splits = vec![Split::Train; samples.len()];
        Self { samples, splits }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, split: Split) -> Vec<&ImageSample> {
        self.indices(split)
            .into_iter()
            .map(|i| &self.samples[i])
            .collect()
    }
}

/// Normalized label frequencies over the labeled pixels of `samples`.
pub fn label_prior<'a>(samples: impl IntoIterator<Item = &'a ImageSample>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        for (c, n) in counts.iter_mut().zip(s.label_counts()) {
            *c += n;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![1.0 / num_classes as f64; num_classes];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

fn read_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            reason: "file not found".into(),
        });
    }
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_gray(path: &Path, id: &str, expected: (usize, usize)) -> Result<Vec<u8>> {
    let img = read_image(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::Validation(format!(
            "{}: expected 8-bit single-channel image, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let gray = img.into_luma8();
    let found = (gray.height() as usize, gray.width() as usize);
    if found != expected {
        return Err(Error::DimensionMismatch {
            id: id.to_string(),
            expected,
            found,
        });
    }
    Ok(gray.into_raw())
}

/// Loads every `images/<id>.png` + `labels/<id>.png` pair under `root`,
/// ordered by file name.
pub fn load_dataset(root: &Path, num_classes: usize) -> Result<Dataset> {
    let image_dir = root.join("images");
    let entries = fs::read_dir(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut ids: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&image_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();

    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let rgb = read_image(&image_dir.join(format!("{id}.png")))?.into_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let label_path = root.join("labels").join(format!("{id}.png"));
        if !label_path.exists() {
            return Err(Error::MissingFile {
                path: label_path,
                reason: format!("no label map paired with image {id}"),
            });
        }
        let labels = read_gray(&label_path, &id, (h, w))?;

        let mut channels = Vec::new();
        loop {
            let p = root
                .join("channels")
                .join(format!("{id}_c{}.png", channels.len()));
            if !p.exists() {
                break;
            }
            channels.push(read_gray(&p, &id, (h, w))?);
        }

        let pixels = rgb.pixels().map(|p| p.0).collect();
        let sample = ImageSample {
            id,
            width: w,
            height: h,
            pixels,
            labels,
            num_classes,
            channels,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(Dataset::new(samples))
}

fn write_png(path: &Path, result: image::ImageResult<()>) -> Result<()> {
    result.map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes a single-channel label map as an 8-bit PNG.
pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, labels.to_vec())
        .ok_or_else(|| Error::Validation("label buffer has wrong length".into()))?;
    write_png(path, img.save(path))
}

/// Writes a dataset in the layout accepted by [`load_dataset`].
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let dirs: [PathBuf; 3] = [root.join("images"), root.join("labels"), root.join("channels")];
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in &dataset.samples {
        let raw: Vec<u8> = s.pixels.iter().flatten().copied().collect();
        let rgb = RgbImage::from_raw(s.width as u32, s.height as u32, raw)
            .ok_or_else(|| Error::Validation(format!("{}: pixel buffer has wrong length", s.id)))?;
        let p = dirs[0].join(format!("{}.png", s.id));
        write_png(&p, rgb.save(&p))?;
        write_label_png(&dirs[1].join(format!("{}.png", s.id)), s.width, s.height, &s.labels)?;
        for (j, ch) in s.channels.iter().enumerate() {
            write_label_png(&dirs[2].join(format!("{}_c{j}.png", s.id)), s.width, s.height, ch)?;
        }
    }
    Ok(())
}

/// Deterministically shuffles samples into train/val/test partitions.
pub fn split_dataset(dataset: Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Validation(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let n = dataset.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);

    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(Dataset {
        samples: dataset.samples,
        splits,
    })
}

/// Parameters of the synthetic scene generator.
///
/// `informativeness` is indexed by generator channel: `[color, texture,
/// layout, aux_0, aux_1, ...]`. Every entry past the third adds one auxiliary
/// per-pixel channel to each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub noise_level: f64,
    pub informativeness: Vec<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            num_classes: 4,
            height: 64,
            width: 64,
            shapes_min: 2,
            shapes_max: 5,
            noise_level: 0.5,
            informativeness: vec![0.3, 0.6, 0.3, 0.95, 0.5],
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::Config("num_classes must be in 2..=254".into()));
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::Config(format!("canvas must be at least {MIN_SIDE}x{MIN_SIDE}")));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config("shapes_min exceeds shapes_max".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config("noise_level must be in [0,1]".into()));
        }
        if self.informativeness.len() < 3 {
            return Err(Error::Config(
                "informativeness needs at least [color, texture, layout]".into(),
            ));
        }
        if self.informativeness.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("informativeness entries must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn aux_channels(&self) -> usize {
        self.informativeness.len() - 3
    }
}

/// Per-class appearance shared by every image generated from one spec.
struct Appearance {
    colors: Vec<[f64; 3]>,
    layout_perm: Vec<usize>,
    channel_codes: Vec<Vec<f64>>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r * 255.0, g * 255.0, b * 255.0]
}

impl Appearance {
    fn new(spec: &SyntheticSpec) -> Self {
        let k = spec.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let offset: f64 = rng.gen();
        let colors = (0..k)
            .map(|c| {
                let value = if c % 2 == 0 { 0.9 } else { 0.6 };
                hsv_to_rgb((offset + c as f64 / k as f64).fract(), 0.85, value)
            })
            .collect();
        let mut layout_perm: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(layout_perm.as_mut_slice(), &mut rng);
        let channel_codes = (0..spec.aux_channels())
            .map(|_| {
                let mut perm: Vec<usize> = (0..k).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                perm.iter().map(|&p| p as f64 / (k - 1) as f64).collect()
            })
            .collect();
        Self {
            colors,
            layout_perm,
            channel_codes,
        }
    }
}

struct Shape {
    ellipse: bool,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        if self.ellipse {
            dx * dx + dy * dy <= 1.0
        } else {
            dx.abs() <= 1.0 && dy.abs() <= 1.0
        }
    }
}

fn generate_one(spec: &SyntheticSpec, appearance: &Appearance, index: usize) -> ImageSample {
    let (w, h, k) = (spec.width, spec.height, spec.num_classes);
    let inf = &spec.informativeness;
    let noise = spec.noise_level;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let mut classes = vec![rng.gen_range(0..k)];
    let mut owner = vec![0usize; w * h];
    let n_shapes = rng.gen_range(spec.shapes_min..=spec.shapes_max);
    let max_r = (w.min(h) as f64 / 4.0).max(4.0);
    for s in 1..=n_shapes {
        let shape = Shape {
            ellipse: rng.gen_bool(0.5),
            cx: rng.gen_range(0.0..w as f64),
            cy: rng.gen_range(0.0..h as f64),
            rx: rng.gen_range(3.0..max_r),
            ry: rng.gen_range(3.0..max_r),
        };
        let class = if rng.gen_bool(inf[2]) {
            let band = ((shape.cy * k as f64 / h as f64) as usize).min(k - 1);
            appearance.layout_perm[band]
        } else {
            rng.gen_range(0..k)
        };
        classes.push(class);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    owner[y * w + x] = s;
                }
            }
        }
    }

    let offset_dist = Normal::new(0.0, noise * 25.0 + 1e-12).unwrap();
    let offsets: Vec<[f64; 3]> = classes
        .iter()
        .map(|_| {
            [
                offset_dist.sample(&mut rng),
                offset_dist.sample(&mut rng),
                offset_dist.sample(&mut rng),
            ]
        })
        .collect();
    let phases: Vec<f64> = classes.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let pixel_noise = Normal::new(0.0, noise * 40.0 + 1e-12).unwrap();
    let channel_noise = Normal::new(0.0, noise * 0.35 + 1e-12).unwrap();
    let gray = 128.0;
    let amplitude = inf[1] * 20.0;

    let mut pixels = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    let mut channels = vec![Vec::with_capacity(w * h); spec.aux_channels()];
    for y in 0..h {
        for x in 0..w {
            let s = owner[y * w + x];
            let c = classes[s];
            labels.push(c as u8);
            let angle = PI * c as f64 / k as f64;
            let freq = 0.12 + 0.06 * (c % 3) as f64;
            let t = amplitude
                * (2.0 * PI * freq * (x as f64 * angle.cos() + y as f64 * angle.sin()) + phases[s]).sin();
            let mut px = [0u8; 3];
            for (ch, out) in px.iter_mut().enumerate() {
                let base = gray + inf[0] * (appearance.colors[c][ch] - gray);
                let v = base + offsets[s][ch] + t + if noise > 0.0 { pixel_noise.sample(&mut rng) } else { 0.0 };
                *out = v.round().clamp(0.0, 255.0) as u8;
            }
            pixels.push(px);
            for (j, chan) in channels.iter_mut().enumerate() {
                let a = inf[3 + j];
                let mut v = a * appearance.channel_codes[j][c] + (1.0 - a) * 0.5;
                if noise > 0.0 {
                    v += channel_noise.sample(&mut rng);
                }
                chan.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }

    ImageSample {
        id: format!("syn{index:05}"),
        width: w,
        height: h,
        pixels,
        labels,
        num_classes: k,
        channels,
    }
}

/// Generates `count` synthetic scenes; a pure function of `(spec, count)`.
pub fn generate_synthetic(spec: &SyntheticSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Validation("synthetic count must be at least 1".into()));
    }
    let appearance = Appearance::new(spec);
    let samples = (0..count).map(|i| generate_one(spec, &appearance, i)).collect();
    Ok(Dataset::new(samples))
}
