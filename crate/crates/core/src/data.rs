//! Image I/O, noise synthesis, patch sampling and batching.
//!
//! Pixel values live in `[0, 1]`; noise levels are quoted on the 0-255
//! scale. Noisy values are never clipped.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar (channel-major) image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub source_id: String,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) || data.len() != height * width * channels {
            return Err(Error::InvalidShape {
                shape: vec![channels, height, width],
                reason: format!("image buffer of {} values", data.len()),
            });
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            data,
            source_id: source_id.into(),
        })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Three-channel copy; gray images are replicated.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        ImageBuffer {
            channels: 3,
            data,
            ..self.clone()
        }
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone()).unwrap()
    }

    /// Image number `index` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor<f32>, index: usize, source_id: impl Into<String>) -> Result<Self> {
        let [n, c, h, w] = t.nchw()?;
        if index >= n {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("no image {index}"),
            });
        }
        let len = c * h * w;
        ImageBuffer::new(h, w, c, t.data()[index * len..(index + 1) * len].to_vec(), source_id)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageBuffer {
        ImageBuffer {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn format_of(path: &Path) -> Result<image::ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(image::ImageFormat::Png),
        Some("ppm") | Some("pgm") | Some("pnm") => Ok(image::ImageFormat::Pnm),
        _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Decodes an 8-bit gray or RGB PNG / binary PNM file, mapping `v` to
/// `v / 255`.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let format = format_of(path)?;
    let bytes = std::fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        image::DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        image::DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        other => return Err(image_error(path, format!("unsupported pixel layout {:?}", other.color()))),
    };
    if w == 0 || h == 0 {
        return Err(image_error(path, "zero-sized image"));
    }
    let mut data = vec![0.0f32; raw.len()];
    for (i, &v) in raw.iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        data[c * h * w + p] = v as f32 / 255.0;
    }
    ImageBuffer::new(h, w, channels, data, path.display().to_string())
}

/// Quantizes with `round(v * 255)`. Without `clip_for_display`, any value
/// outside `[0, 1]` is an error.
pub fn save_image(img: &ImageBuffer, path: &Path, clip_for_display: bool) -> Result<()> {
    let format = format_of(path)?;
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut raw = vec![0u8; img.data.len()];
    for (i, &v) in img.data.iter().enumerate() {
        let v = if clip_for_display {
            v.clamp(0.0, 1.0)
        } else if (0.0..=1.0).contains(&v) {
            v
        } else {
            return Err(image_error(path, format!("value {v} outside [0, 1]")));
        };
        let (ch, p) = (i / (h * w), i % (h * w));
        raw[p * c + ch] = (v * 255.0).round() as u8;
    }
    let color = if c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(path, &raw, w as u32, h as u32, color, format).map_err(|e| image_error(path, e))
}

/// Supported image files directly inside `dir`, in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && format_of(&p).is_ok() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: &Path) -> Result<Vec<ImageBuffer>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", dir.display())));
    }
    paths.iter().map(|p| load_image(p)).collect()
}

/// `y = x + n`, `n ~ N(0, (sigma/255)^2)` i.i.d. Values are not clipped.
pub fn add_awgn(clean: &ImageBuffer, sigma: f64, rng: &mut impl Rng) -> Result<ImageBuffer> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(clean.clone());
    }
    let normal = Normal::new(0.0, sigma / 255.0).unwrap();
    Ok(ImageBuffer {
        data: clean
            .data
            .iter()
            .map(|&v| (v as f64 + normal.sample(rng)) as f32)
            .collect(),
        ..clean.clone()
    })
}

/// Uniformly placed `size x size` window.
pub fn sample_patch(img: &ImageBuffer, size: usize, rng: &mut impl Rng) -> Result<ImageBuffer> {
    if size == 0 || size > img.height || size > img.width {
        return Err(Error::InvalidShape {
            shape: vec![img.channels, img.height, img.width],
            reason: format!("cannot crop a {size}x{size} patch"),
        });
    }
    let y0 = rng.random_range(0..=img.height - size);
    let x0 = rng.random_range(0..=img.width - size);
    Ok(crop(img, y0, x0, size))
}

pub fn crop(img: &ImageBuffer, y0: usize, x0: usize, size: usize) -> ImageBuffer {
    let mut data = Vec::with_capacity(img.channels * size * size);
    for c in 0..img.channels {
        for y in y0..y0 + size {
            let row = (c * img.height + y) * img.width;
            data.extend_from_slice(&img.data[row + x0..row + x0 + size]);
        }
    }
    ImageBuffer {
        height: size,
        width: size,
        channels: img.channels,
        data,
        source_id: format!("{}@{y0},{x0}", img.source_id),
    }
}

pub const BLIND_SIGMAS: [f64; 5] = [15.0, 25.0, 35.0, 50.0, 75.0];
pub const BLIND_RANGE: (f64, f64) = (15.0, 75.0);

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseMode {
    Fixed(f64),
    /// Uniform over a discrete set; the index is the class label.
    BlindSet(Vec<f64>),
    /// Uniform over a continuous interval.
    BlindRange(f64, f64),
}

impl NoiseMode {
    pub fn validate(&self) -> Result<()> {
        let check = |s: f64| {
            if s.is_finite() && s >= 0.0 {
                Ok(())
            } else {
                Err(Error::NegativeSigma(s))
            }
        };
        match self {
            NoiseMode::Fixed(s) => check(*s),
            NoiseMode::BlindSet(set) => {
                if set.is_empty() {
                    return Err(Error::Config("empty sigma set".into()));
                }
                set.iter().try_for_each(|&s| check(s))
            }
            NoiseMode::BlindRange(lo, hi) => {
                check(*lo)?;
                check(*hi)?;
                if lo > hi {
                    return Err(Error::Config(format!("sigma range {lo}..{hi} is empty")));
                }
                Ok(())
            }
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            NoiseMode::BlindSet(set) => Some(set.len()),
            _ => None,
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> (f64, Option<usize>) {
        match self {
            NoiseMode::Fixed(s) => (*s, None),
            NoiseMode::BlindSet(set) => {
                let k = rng.random_range(0..set.len());
                (set[k], Some(k))
            }
            NoiseMode::BlindRange(lo, hi) => (rng.random_range(*lo..=*hi), None),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { seed: u64, count: usize, size: usize },
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub patch_size: usize,
    pub noise: NoiseMode,
    /// Batches per epoch, used only for reporting.
    pub epoch_size: usize,
    pub shuffle_seed: u64,
}

/// Clean images ready for patch sampling.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub images: Vec<ImageBuffer>,
}

impl Dataset {
    pub fn open(spec: &DatasetSpec) -> Result<Self> {
        spec.noise.validate()?;
        let images = match &spec.source {
            DataSource::Synthetic { seed, count, size } => synth_corpus(*seed, *count, *size)?,
            DataSource::Directory(dir) => load_dir(dir)?,
        };
        Self::from_images(spec.clone(), images)
    }

    pub fn from_images(spec: DatasetSpec, images: Vec<ImageBuffer>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset("dataset has no images".into()));
        }
        let min_extent = images.iter().map(|i| i.height.min(i.width)).min().unwrap();
        if spec.patch_size == 0 || spec.patch_size > min_extent {
            return Err(Error::Config(format!(
                "patch size {} exceeds smallest image extent {min_extent}",
                spec.patch_size
            )));
        }
        Ok(Dataset {
            spec,
            images: images.iter().map(ImageBuffer::to_rgb).collect(),
        })
    }
}

/// Stacked noisy/clean pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub sigmas: Vec<f64>,
    /// Present only for [`NoiseMode::BlindSet`].
    pub class_index: Option<Vec<usize>>,
}

/// Stream `step` of a ChaCha generator keyed by `seed`; each training step
/// draws from its own stream so any step can be replayed in isolation.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One batch of `batch_size` patches, each from a uniformly chosen image
/// with its own noise draw.
pub fn make_batch(data: &Dataset, batch_size: usize, rng: &mut impl Rng, mode: &NoiseMode) -> Result<Batch> {
    if data.images.is_empty() {
        return Err(Error::EmptyDataset("dataset has no images".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    mode.validate()?;
    let p = data.spec.patch_size;
    let mut noisy = Vec::with_capacity(batch_size * 3 * p * p);
    let mut clean = Vec::with_capacity(batch_size * 3 * p * p);
    let mut sigmas = Vec::with_capacity(batch_size);
    let mut classes = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let img = &data.images[rng.random_range(0..data.images.len())];
        let patch = sample_patch(img, p, rng)?;
        let (sigma, class) = mode.draw(rng);
        let y = add_awgn(&patch, sigma, rng)?;
        clean.extend_from_slice(&patch.data);
        noisy.extend_from_slice(&y.data);
        sigmas.push(sigma);
        if let Some(k) = class {
            classes.push(k);
        }
    }
    Ok(Batch {
        noisy: Tensor::new(&[batch_size, 3, p, p], noisy)?,
        clean: Tensor::new(&[batch_size, 3, p, p], clean)?,
        sigmas,
        class_index: matches!(mode, NoiseMode::BlindSet(_)).then_some(classes),
    })
}

/// Procedural RGB images: a linear colour gradient, a few flat
/// rectangles, and a band-limited sinusoidal texture.
pub fn synth_corpus(seed: u64, count: usize, size: usize) -> Result<Vec<ImageBuffer>> {
    if count == 0 || size == 0 {
        return Err(Error::Config("synthetic corpus needs positive count and size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for idx in 0..count {
        let plane = size * size;
        let mut data = vec![0.0f32; 3 * plane];
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for c in 0..3 {
            lo[c] = rng.random_range(0.2..0.5);
            hi[c] = rng.random_range(0.5..0.8);
        }
        let mut waves = Vec::new();
        for _ in 0..4 {
            let f: f64 = rng.random_range(1.0..6.0) / size as f64 * std::f64::consts::TAU;
            let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let ph: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.random_range(0.02..0.08);
            waves.push((f * th.cos(), f * th.sin(), ph, amp));
        }
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / size as f64 - 0.5, y as f64 / size as f64 - 0.5);
                let t = ((u * dx + v * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
                let tex: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                    .sum();
                for c in 0..3 {
                    data[c * plane + y * size + x] = (lo[c] + (hi[c] - lo[c]) * t + tex) as f32;
                }
            }
        }
        let rects = rng.random_range(2..6);
        for _ in 0..rects {
            let h = rng.random_range(size / 8..=size / 2).max(1);
            let w = rng.random_range(size / 8..=size / 2).max(1);
            let y0 = rng.random_range(0..=size - h);
            let x0 = rng.random_range(0..=size - w);
            let colour: [f32; 3] = [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ];
            for c in 0..3 {
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        data[c * plane + y * size + x] = colour[c];
                    }
                }
            }
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        out.push(ImageBuffer::new(size, size, 3, data, format!("synth:{seed}:{idx}"))?);
    }
    Ok(out)
}
