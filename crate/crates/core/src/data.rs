//! Paired rainy/clean datasets, patch sampling and synthetic rain.
//!
//! A dataset is either a directory holding `rain/` and `norain/` with equal
//! filenames, or a JSON manifest listing the pairs explicitly:
//!
//! ```json
//! { "pairs": [ { "id": "0001", "rainy": "rain/0001.png", "clean": "norain/0001.png" } ] }
//! ```
//!
//! Manifest paths are relative to the manifest's directory. Images are
//! decoded as 8-bit RGB and scaled to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const RAIN_DIR: &str = "rain";
pub const CLEAN_DIR: &str = "norain";
pub const MANIFEST_FILE: &str = "manifest.json";

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

/// Decodes an image file into a `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn load_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
    }
    let img = image::open(path)
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let scale = T::lit(1.0 / 255.0);
    Tensor::from_vec(&[1, 3, h, w], {
        let mut data = vec![T::zero(); 3 * h * w];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = T::lit(px[c] as f64) * scale;
            }
        }
        data
    })
}

/// Clamps to `[0, 1]`, quantizes to 8 bits and writes a PNG.
pub fn save_image<T: Real>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let (b, c, h, w) = image.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::shape("save_image", &[1, 3, h, w], image.shape()));
    }
    let mut raw = vec![0u8; 3 * h * w];
    for (i, px) in raw.chunks_exact_mut(3).enumerate() {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = quantize(image.data()[ch * h * w + i].as_f64());
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer_with_format(path, &raw, w as u32, h as u32, image::ColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|e| {
            DataError::Encode {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
            .into()
        })
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by filename.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_file(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub rainy: PathBuf,
    pub clean: PathBuf,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PairManifest {
    pub pairs: Vec<PairEntry>,
    /// Generator settings when the set was synthesized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthRainConfig>,
}

#[derive(Clone, Debug)]
pub struct PairedDataset {
    root: PathBuf,
    pairs: Vec<PairEntry>,
}

impl PairedDataset {
    /// Opens a `rain/` + `norain/` directory, or a manifest file.
    pub fn open(root: &Path) -> Result<Self> {
        if root.is_file() {
            return Self::from_manifest(root);
        }
        let rain = root.join(RAIN_DIR);
        let clean = root.join(CLEAN_DIR);
        if !rain.is_dir() {
            return Err(Error::io(&rain, std::io::ErrorKind::NotFound.into()));
        }
        let mut pairs = Vec::new();
        for path in list_images(&rain)? {
            let name = path.file_name().expect("listed files have names");
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            let counterpart = clean.join(name);
            if !counterpart.is_file() {
                return Err(DataError::MissingCounterpart { id, expected: counterpart }.into());
            }
            pairs.push(PairEntry {
                id,
                rainy: path,
                clean: counterpart,
            });
        }
        if clean.is_dir() {
            for path in list_images(&clean)? {
                if !rain.join(path.file_name().unwrap()).is_file() {
                    let id = path.file_stem().unwrap().to_string_lossy().into_owned();
                    return Err(DataError::MissingCounterpart {
                        id,
                        expected: rain.join(path.file_name().unwrap()),
                    }
                    .into());
                }
            }
        }
        Self::from_pairs(root, pairs)
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: PairManifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut pairs: Vec<PairEntry> = manifest
            .pairs
            .into_iter()
            .map(|p| PairEntry {
                id: p.id,
                rainy: base.join(p.rainy),
                clean: base.join(p.clean),
            })
            .collect();
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        Self::from_pairs(path, pairs)
    }

    fn from_pairs(root: &Path, pairs: Vec<PairEntry>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(DataError::Empty(root.to_path_buf()).into());
        }
        Ok(PairedDataset {
            root: root.to_path_buf(),
            pairs,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[PairEntry] {
        &self.pairs
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.id.as_str())
    }

    pub fn load_pair<T: Real>(&self, id: &str) -> Result<(Tensor<T>, Tensor<T>)> {
        let entry = self
            .pairs
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| DataError::UnknownId(id.to_string()))?;
        load_entry(entry)
    }

    /// Decodes every pair; desk-scale sets fit in memory.
    pub fn load_all<T: Real>(&self) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        self.pairs.iter().map(load_entry).collect()
    }
}

fn load_entry<T: Real>(entry: &PairEntry) -> Result<(Tensor<T>, Tensor<T>)> {
    if !entry.clean.is_file() {
        return Err(DataError::MissingCounterpart {
            id: entry.id.clone(),
            expected: entry.clean.clone(),
        }
        .into());
    }
    let rainy = load_image::<T>(&entry.rainy)?;
    let clean = load_image::<T>(&entry.clean)?;
    if rainy.shape() != clean.shape() {
        return Err(DataError::DimensionMismatch {
            id: entry.id.clone(),
            rainy: (rainy.shape()[2], rainy.shape()[3]),
            clean: (clean.shape()[2], clean.shape()[3]),
        }
        .into());
    }
    Ok((rainy, clean))
}

/// Crops the same `size`×`size` window from both images.
pub fn random_crop_pair<T: Real, R: Rng + ?Sized>(
    rainy: &Tensor<T>,
    clean: &Tensor<T>,
    size: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    rainy.expect_same_shape(clean, "random_crop_pair")?;
    let (_, _, h, w) = rainy.dims4()?;
    if h < size || w < size || size == 0 {
        return Err(DataError::TooSmall {
            height: h,
            width: w,
            patch: size,
        }
        .into());
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    Ok((rainy.crop(y0, x0, size, size)?, clean.crop(y0, x0, size, size)?))
}

fn epoch_rng(seed: u64, salt: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(epoch as u64);
    rng
}

/// Visiting order of `n` items in `epoch`; a pure function of its inputs.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, 0x5348_5546, epoch));
    order
}

pub type Batch<T> = (Tensor<T>, Tensor<T>);

/// All batches of one epoch: shuffled, cropped, stacked. The last batch is
/// smaller when `batch_size` does not divide the set size.
pub fn epoch_batches<T: Real>(
    pairs: &[(Tensor<T>, Tensor<T>)],
    epoch: usize,
    batch_size: usize,
    patch: usize,
    seed: u64,
) -> Result<Vec<Batch<T>>> {
    if batch_size == 0 {
        return Err(Error::config("training.batch_size", "must be >= 1"));
    }
    let order = epoch_order(pairs.len(), seed, epoch);
    let mut rng = epoch_rng(seed, 0x4352_4f50, epoch);
    let mut out = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut rainy = Vec::with_capacity(chunk.len());
        let mut clean = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let (r, c) = random_crop_pair(&pairs[i].0, &pairs[i].1, patch, &mut rng)?;
            rainy.push(r);
            clean.push(c);
        }
        out.push((Tensor::stack_batch(&rainy)?, Tensor::stack_batch(&clean)?));
    }
    Ok(out)
}

/// Builds epochs on a worker thread, at most `depth` epochs ahead. Batches
/// depend only on `(seed, epoch)`, so the stream equals the unprefetched one.
pub struct Prefetcher<T> {
    rx: Receiver<(usize, Result<Vec<Batch<T>>>)>,
    handle: Option<JoinHandle<()>>,
}

impl<T: Real> Prefetcher<T> {
    pub fn spawn(
        pairs: std::sync::Arc<Vec<(Tensor<T>, Tensor<T>)>>,
        epochs: std::ops::Range<usize>,
        depth: usize,
        batch_size: usize,
        patch: usize,
        seed: u64,
    ) -> Self {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            for epoch in epochs {
                let batches = epoch_batches(&pairs, epoch, batch_size, patch, seed);
                if tx.send((epoch, batches)).is_err() {
                    break;
                }
            }
        });
        Prefetcher {
            rx,
            handle: Some(handle),
        }
    }

    pub fn next_epoch(&self, expected: usize) -> Result<Vec<Batch<T>>> {
        match self.rx.recv() {
            Ok((epoch, batches)) if epoch == expected => batches,
            Ok((epoch, _)) => Err(Error::config("prefetch", format!("expected epoch {expected}, got {epoch}"))),
            Err(_) => Err(Error::config("prefetch", "worker stopped early")),
        }
    }
}

impl<T> Drop for Prefetcher<T> {
    fn drop(&mut self) {
        // Unblock the worker before joining.
        let (_, rx) = mpsc::sync_channel(0);
        drop(std::mem::replace(&mut self.rx, rx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Parameters of the synthetic rain generator. Ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRainConfig {
    pub streak_count: (usize, usize),
    pub length: (f64, f64),
    /// Tilt from vertical, degrees.
    pub angle: (f64, f64),
    pub intensity: (f64, f64),
    pub width: f64,
    /// Veiling strength, in `[0, 1)`.
    pub veil: f64,
    /// Atmospheric light, in `[0, 1]`.
    pub atmospheric_light: f64,
    pub seed: u64,
}

impl Default for SynthRainConfig {
    fn default() -> Self {
        SynthRainConfig {
            streak_count: (12, 24),
            length: (8.0, 20.0),
            angle: (-15.0, 15.0),
            intensity: (0.3, 0.6),
            width: 1.0,
            veil: 0.1,
            atmospheric_light: 0.9,
            seed: 0,
        }
    }
}

impl SynthRainConfig {
    /// Settings under which synthesis is the identity.
    pub fn no_rain() -> Self {
        SynthRainConfig {
            streak_count: (0, 0),
            veil: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |field: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::config(format!("synth.{field}"), format!("empty range [{lo}, {hi}]")))
            }
        };
        if self.streak_count.0 > self.streak_count.1 {
            return Err(Error::config("synth.streak_count", "min exceeds max"));
        }
        range("length", self.length)?;
        range("angle", self.angle)?;
        range("intensity", self.intensity)?;
        if !(self.width > 0.0) {
            return Err(Error::config("synth.width", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.veil) {
            return Err(Error::config("synth.veil", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.atmospheric_light) {
            return Err(Error::config("synth.atmospheric_light", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn sample<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Single-channel streak layer in `[0, 1]`, antialiased by distance to
/// each streak's segment.
pub fn streak_mask(height: usize, width: usize, cfg: &SynthRainConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut mask = vec![0.0f64; height * width];
    let (lo, hi) = cfg.streak_count;
    let count = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let half_width = cfg.width / 2.0;
    for _ in 0..count {
        let cy = rng.gen_range(0.0..height as f64);
        let cx = rng.gen_range(0.0..width as f64);
        let len = sample(rng, cfg.length);
        let theta = sample(rng, cfg.angle).to_radians();
        let strength = sample(rng, cfg.intensity);
        let (dy, dx) = (theta.cos() * len / 2.0, theta.sin() * len / 2.0);
        let (ay, ax, by, bx) = (cy - dy, cx - dx, cy + dy, cx + dx);
        let pad = half_width + 1.0;
        let y_lo = (ay.min(by) - pad).floor().max(0.0) as usize;
        let y_hi = ((ay.max(by) + pad).ceil() as usize).min(height);
        let x_lo = (ax.min(bx) - pad).floor().max(0.0) as usize;
        let x_hi = ((ax.max(bx) + pad).ceil() as usize).min(width);
        let (vy, vx) = (by - ay, bx - ax);
        let seg2 = vy * vy + vx * vx;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (py, px) = (y as f64 + 0.5 - ay, x as f64 + 0.5 - ax);
                let t = if seg2 > 0.0 { ((py * vy + px * vx) / seg2).clamp(0.0, 1.0) } else { 0.0 };
                let dist = ((py - t * vy).powi(2) + (px - t * vx).powi(2)).sqrt();
                let coverage = (half_width + 0.5 - dist).clamp(0.0, 1.0);
                let m = &mut mask[y * width + x];
                *m = (*m).max(strength * coverage);
            }
        }
    }
    mask
}

/// Adds streaks (screen blend) and a veil to a clean `[1, 3, H, W]` image.
pub fn synthesize_rain<T: Real>(clean: &Tensor<T>, cfg: &SynthRainConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (b, c, h, w) = clean.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = clean.clone();
    let beta = T::lit(cfg.veil);
    let light = T::lit(cfg.atmospheric_light);
    for bi in 0..b {
        let mask = streak_mask(h, w, cfg, &mut rng);
        for ch in 0..c {
            for (i, &m) in mask.iter().enumerate() {
                let v = out.at_mut(bi, ch, i / w, i % w);
                let m = T::lit(m);
                let streaked = *v + m * (T::one() - *v);
                *v = (streaked * (T::one() - beta) + light * beta).max(T::zero()).min(T::one());
            }
        }
    }
    Ok(out)
}

/// Smooth procedural RGB scene in roughly `[0.05, 0.85]`: a colour gradient
/// plus a few low-frequency waves and soft blobs.
pub fn procedural_image<T: Real>(height: usize, width: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planes = vec![0.0f64; 3 * height * width];
    let (hf, wf) = (height as f64, width as f64);
    for c in 0..3 {
        let base = rng.gen_range(0.25..0.55);
        let gy = rng.gen_range(-0.15..0.15);
        let gx = rng.gen_range(-0.15..0.15);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.03..0.08),
                    rng.gen_range(0.5..2.5) * std::f64::consts::TAU / hf,
                    rng.gen_range(0.5..2.5) * std::f64::consts::TAU / wf,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let blobs: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(0.0..hf),
                    rng.gen_range(0.0..wf),
                    rng.gen_range(0.1..0.3) * hf.min(wf),
                )
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = base + gy * (yf / hf - 0.5) + gx * (xf / wf - 0.5);
                for &(a, ky, kx, phase) in &waves {
                    v += a * (ky * yf + kx * xf + phase).sin();
                }
                for &(a, by, bx, r) in &blobs {
                    v += a * (-((yf - by).powi(2) + (xf - bx).powi(2)) / (2.0 * r * r)).exp();
                }
                planes[c * height * width + y * width + x] = v.clamp(0.05, 0.85);
            }
        }
    }
    Tensor::from_vec(&[1, 3, height, width], planes.into_iter().map(T::lit).collect()).expect("sized above")
}

/// Writes `count` synthetic pairs as `rain/NNNN.png` and `norain/NNNN.png`
/// plus a manifest. Pair `i` uses seed `cfg.seed + i` for both the scene
/// and the rain.
pub fn write_synthetic_dataset(
    out: &Path,
    count: usize,
    height: usize,
    width: usize,
    cfg: &SynthRainConfig,
) -> Result<PairManifest> {
    cfg.validate()?;
    if count == 0 || height == 0 || width == 0 {
        return Err(Error::config("synth", "count, height and width must be >= 1"));
    }
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{:04}", i + 1);
        let seed = cfg.seed.wrapping_add(i as u64);
        let clean = procedural_image::<f64>(height, width, seed);
        let rainy = synthesize_rain(&clean, &SynthRainConfig { seed, ..cfg.clone() })?;
        let rel_rain = PathBuf::from(RAIN_DIR).join(format!("{id}.png"));
        let rel_clean = PathBuf::from(CLEAN_DIR).join(format!("{id}.png"));
        save_image(&rainy, &out.join(&rel_rain))?;
        save_image(&clean, &out.join(&rel_clean))?;
        pairs.push(PairEntry {
            id,
            rainy: rel_rain,
            clean: rel_clean,
        });
    }
    let manifest = PairManifest {
        pairs,
        synthesis: Some(cfg.clone()),
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
