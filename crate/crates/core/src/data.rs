//! Synthetic ultrasound-like data, dataset I/O, and intensity histograms.
//!
//! The generator produces grayscale images containing a single dark,
//! irregularly shaped lesion on a brighter, shaded background with
//! correlated multiplicative speckle and a few dark distractor blobs.
//! Lesion and background intensity distributions deliberately overlap,
//! so thresholding alone cannot solve the task. Every sample is drawn
//! from its own stream keyed by `(seed, index)`, which makes the corpus
//! deterministic and stable under changes to `count`.
//!
//! On disk a dataset is a flat directory of 8-bit grayscale pairs,
//! `<id>.png` next to `<id>_mask.png` (PGM works too). The loader
//! resizes to the requested extent — bilinear for images, nearest for
//! masks — binarizes masks at the 128 gray level, and reports a warning
//! for masks that were not already binary.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// One image/mask pair. Both tensors have shape `[h, w]`; image values
/// lie in `[0, 1]` and mask values are exactly 0 or 1.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub image: Tensor,
    pub mask: Tensor,
    /// Stable name, used as the filename stem when saved.
    pub id: String,
}

/// Tunable knobs of the synthetic generator. `standard()` is the
/// profile the training pipeline uses; `easy()` raises contrast and
/// removes distractors, `hard()` does the opposite.
#[derive(Clone, Debug)]
pub struct SynthProfile {
    /// Mean lesion intensity and per-sample jitter half-width.
    pub lesion_mean: f64,
    pub lesion_jitter: f64,
    /// Mean background intensity and per-sample jitter half-width.
    pub bg_mean: f64,
    pub bg_jitter: f64,
    /// Std of the correlated multiplicative speckle field.
    pub speckle: f64,
    /// Amplitude of the low-frequency illumination field.
    pub shading: f64,
    /// Inclusive range for the number of dark distractor blobs.
    pub distractors: (usize, usize),
    /// Peak darkening of a distractor blob.
    pub distractor_depth: f64,
    /// Sigmoid gain per pixel at the lesion boundary (lower = fuzzier).
    pub edge_softness: f64,
    /// Lesion semi-axis range as a fraction of the image extent.
    pub axis_range: (f64, f64),
    /// Maximum relative amplitude of the radial wobble harmonics.
    pub wobble: f64,
    /// Acceptable foreground fraction; geometry is redrawn until the
    /// mask lands inside this interval.
    pub fg_range: (f64, f64),
    /// Minimum background-minus-lesion intensity gap within one image.
    /// Per-sample draws are retried until the gap holds, so wide jitter
    /// creates pooled overlap without making any single lesion invisible.
    pub min_contrast: f64,
}

impl SynthProfile {
    pub fn standard() -> Self {
        SynthProfile {
            lesion_mean: 0.36,
            lesion_jitter: 0.08,
            bg_mean: 0.52,
            bg_jitter: 0.08,
            speckle: 0.16,
            shading: 0.10,
            distractors: (2, 4),
            distractor_depth: 0.18,
            edge_softness: 1.6,
            axis_range: (0.10, 0.26),
            wobble: 0.12,
            fg_range: (0.02, 0.40),
            min_contrast: 0.10,
        }
    }

    pub fn easy() -> Self {
        SynthProfile {
            lesion_mean: 0.25,
            lesion_jitter: 0.03,
            bg_mean: 0.62,
            bg_jitter: 0.03,
            speckle: 0.08,
            shading: 0.04,
            distractors: (0, 0),
            distractor_depth: 0.0,
            edge_softness: 3.0,
            min_contrast: 0.25,
            ..Self::standard()
        }
    }

    pub fn hard() -> Self {
        SynthProfile {
            lesion_mean: 0.40,
            lesion_jitter: 0.09,
            bg_mean: 0.52,
            bg_jitter: 0.09,
            speckle: 0.20,
            shading: 0.12,
            distractors: (3, 6),
            distractor_depth: 0.22,
            edge_softness: 1.0,
            min_contrast: 0.06,
            ..Self::standard()
        }
    }

    /// Profile by name: `easy`, `standard`, or `hard`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "easy" => Ok(Self::easy()),
            "standard" => Ok(Self::standard()),
            "hard" => Ok(Self::hard()),
            other => Err(Error::Config(format!(
                "unknown difficulty {other:?} (expected easy, standard, or hard)"
            ))),
        }
    }
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self::standard()
    }
}

/// Independent per-sample stream: a SplitMix64 hash of `(seed, index)`
/// seeds the sample's ChaCha8 generator, so sample `i` is identical no
/// matter how many samples are requested.
fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// One pass of a 3×3 binomial filter with clamped borders, in place.
fn smooth3(buf: &mut [f64], h: usize, w: usize) {
    let k = [0.25, 0.5, 0.25];
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x + i).saturating_sub(1).min(w - 1);
                acc += kv * buf[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y + i).saturating_sub(1).min(h - 1);
                acc += kv * tmp[yy * w + x];
            }
            buf[y * w + x] = acc;
        }
    }
}

struct Geometry {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    rot: f64,
    amps: [f64; 4],
    phases: [f64; 4],
}

impl Geometry {
    fn draw(rng: &mut ChaCha8Rng, extent: f64, profile: &SynthProfile) -> Self {
        let (lo, hi) = profile.axis_range;
        let mut amps = [0.0; 4];
        let mut phases = [0.0; 4];
        for (i, (a, p)) in amps.iter_mut().zip(phases.iter_mut()).enumerate() {
            // Harmonics 2..=5 with decaying amplitude keep the radius
            // function positive and the outline lesion-like.
            let k = (i + 2) as f64;
            *a = rng.gen_range(0.0..profile.wobble) * 2.0 / k;
            *p = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        Geometry {
            cy: rng.gen_range(0.34..0.66) * extent,
            cx: rng.gen_range(0.34..0.66) * extent,
            a: rng.gen_range(lo..hi) * extent,
            b: rng.gen_range(lo..hi) * extent,
            rot: rng.gen_range(0.0..std::f64::consts::PI),
            amps,
            phases,
        }
    }

    /// Signed distance-like field: positive inside the lesion, in
    /// roughly normalized-radius units.
    fn field(&self, y: f64, x: f64) -> f64 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (sin, cos) = self.rot.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        let p = u / self.a;
        let q = v / self.b;
        let r = (p * p + q * q).sqrt();
        let phi = q.atan2(p);
        let mut rad = 1.0;
        for (i, (&a, &ph)) in self.amps.iter().zip(&self.phases).enumerate() {
            rad += a * ((i + 2) as f64 * phi + ph).cos();
        }
        rad - r
    }

    /// Approximate minor semi-axis, used to convert the normalized
    /// field into pixel units at the boundary.
    fn scale(&self) -> f64 {
        self.a.min(self.b)
    }
}

fn generate_one(
    seed: u64,
    index: u64,
    extent: usize,
    profile: &SynthProfile,
) -> Result<SegSample> {
    let mut rng = sample_rng(seed, index);
    let e = extent as f64;
    let n = extent * extent;

    // Redraw geometry until the mask's foreground fraction is sensible.
    let mut chosen: Option<(Geometry, Vec<f64>, usize)> = None;
    for _ in 0..32 {
        let geo = Geometry::draw(&mut rng, e, profile);
        let mut field = vec![0.0; n];
        let mut fg = 0usize;
        for y in 0..extent {
            for x in 0..extent {
                let s = geo.field(y as f64 + 0.5, x as f64 + 0.5);
                field[y * extent + x] = s;
                if s >= 0.0 {
                    fg += 1;
                }
            }
        }
        let frac = fg as f64 / n as f64;
        if frac >= profile.fg_range.0 && frac <= profile.fg_range.1 {
            chosen = Some((geo, field, fg));
            break;
        }
    }
    let (geo, field, _) = chosen.ok_or_else(|| {
        Error::Data(format!(
            "sample {index}: no lesion geometry reached foreground fraction in {:?}",
            profile.fg_range
        ))
    })?;

    // Independent intensity draws, retried until the lesion is at least
    // `min_contrast` darker than its background in this image.
    let mut lesion = profile.lesion_mean;
    let mut bg = profile.bg_mean;
    for _ in 0..64 {
        lesion = rng.gen_range(
            profile.lesion_mean - profile.lesion_jitter
                ..=profile.lesion_mean + profile.lesion_jitter,
        );
        bg = rng
            .gen_range(profile.bg_mean - profile.bg_jitter..=profile.bg_mean + profile.bg_jitter);
        if bg - lesion >= profile.min_contrast {
            break;
        }
    }

    // Low-frequency illumination: two smooth cosine ramps.
    let mut waves = Vec::new();
    for _ in 0..2 {
        waves.push((
            rng.gen_range(0.3..1.0) * profile.shading * 0.5,
            rng.gen_range(-1.2..1.2),
            rng.gen_range(-1.2..1.2),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ));
    }

    // Dark distractor blobs that mimic lesion intensity.
    let n_blobs = rng.gen_range(profile.distractors.0..=profile.distractors.1);
    let mut blobs = Vec::new();
    for _ in 0..n_blobs {
        blobs.push((
            rng.gen_range(0.1..0.9) * e,
            rng.gen_range(0.1..0.9) * e,
            rng.gen_range(0.05..0.12) * e,
            rng.gen_range(0.4..1.0) * profile.distractor_depth,
        ));
    }

    let normal = Normal::new(0.0, 1.0).map_err(|err| Error::Data(err.to_string()))?;
    let mut speckle: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    smooth3(&mut speckle, extent, extent);
    smooth3(&mut speckle, extent, extent);
    // Smoothing attenuates the noise heavily; standardize so that
    // `profile.speckle` is the actual relative std of the field.
    let mean = speckle.iter().sum::<f64>() / n as f64;
    let var = speckle.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let inv = 1.0 / var.sqrt().max(1e-9);
    for v in speckle.iter_mut() {
        *v = (*v - mean) * inv;
    }

    let gain = profile.edge_softness * geo.scale();
    let mut img = vec![0.0; n];
    let mut mask = vec![0.0; n];
    for y in 0..extent {
        for x in 0..extent {
            let i = y * extent + x;
            let s = field[i];
            mask[i] = if s >= 0.0 { 1.0 } else { 0.0 };

            let mut base = bg;
            for &(amp, fy, fx, ph) in &waves {
                base += amp
                    * (std::f64::consts::TAU * (fy * y as f64 / e + fx * x as f64 / e) + ph).cos();
            }
            for &(by, bx, radius, depth) in &blobs {
                let dy = y as f64 + 0.5 - by;
                let dx = x as f64 + 0.5 - bx;
                base -= depth * (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp();
            }

            // Soft lesion boundary: blend over a couple of pixels.
            let alpha = 1.0 / (1.0 + (-s * gain).exp());
            img[i] = alpha * lesion + (1.0 - alpha) * base;
        }
    }

    for (v, sp) in img.iter_mut().zip(&speckle) {
        *v *= 1.0 + profile.speckle * sp;
    }
    smooth3(&mut img, extent, extent);

    let min = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min > 1e-12 {
        for v in img.iter_mut() {
            *v = (*v - min) / (max - min);
        }
    } else {
        img.fill(0.5);
    }

    Ok(SegSample {
        image: Tensor::from_vec(&[extent, extent], img),
        mask: Tensor::from_vec(&[extent, extent], mask),
        id: format!("synth-{seed}-{index:04}"),
    })
}

/// Generate `count` deterministic samples at `extent`×`extent`.
pub fn synthesize(
    count: usize,
    extent: usize,
    seed: u64,
    profile: &SynthProfile,
) -> Result<Vec<SegSample>> {
    if count == 0 {
        return Err(Error::Config("synthesize: count must be positive".into()));
    }
    if extent < 8 {
        return Err(Error::Config(format!("synthesize: extent {extent} below minimum 8")));
    }
    (0..count).map(|i| generate_one(seed, i as u64, extent, profile)).collect()
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write samples as `<id>.png` / `<id>_mask.png` 8-bit grayscale pairs.
pub fn save_samples(dir: &Path, samples: &[SegSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in samples {
        let [h, w] = s.image.shape() else {
            return Err(Error::shape("save_samples", format!("image {:?}", s.image.shape())));
        };
        let (h, w) = (*h as u32, *w as u32);
        let img = image::GrayImage::from_fn(w, h, |x, y| {
            image::Luma([to_u8(s.image.data()[(y * w + x) as usize])])
        });
        img.save(dir.join(format!("{}.png", s.id)))?;
        let msk = image::GrayImage::from_fn(w, h, |x, y| {
            image::Luma([if s.mask.data()[(y * w + x) as usize] >= 0.5 { 255 } else { 0 }])
        });
        msk.save(dir.join(format!("{}_mask.png", s.id)))?;
    }
    Ok(())
}

/// Write one `[h, w]` plane of values in `[0, 1]` as an 8-bit grayscale
/// PNG (values outside the range saturate).
pub fn save_gray(path: &Path, plane: &Tensor) -> Result<()> {
    let [h, w] = plane.shape() else {
        return Err(Error::shape("save_gray", format!("plane {:?}", plane.shape())));
    };
    let (h, w) = (*h as u32, *w as u32);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let img = image::GrayImage::from_fn(w, h, |x, y| {
        image::Luma([to_u8(plane.data()[(y * w + x) as usize])])
    });
    img.save(path)?;
    Ok(())
}

fn gray_to_tensor(img: &image::GrayImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_vec(
        &[h as usize, w as usize],
        img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
    )
}

/// Load every image/mask pair under `dir`, resized to `extent`×`extent`
/// (bilinear for images, nearest for masks; no resampling when the file
/// already matches). Returns the samples sorted by id plus one warning
/// line per mask that was not strictly binary before thresholding.
pub fn load_samples(dir: &Path, extent: usize) -> Result<(Vec<SegSample>, Vec<String>)> {
    if extent < 8 {
        return Err(Error::Config(format!("load_samples: extent {extent} below minimum 8")));
    }
    let mut images: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
    let mut masks: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else { continue };
        if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "pgm") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if let Some(base) = stem.strip_suffix("_mask") {
            masks.insert(base.to_string(), path);
        } else {
            images.insert(stem.to_string(), path);
        }
    }
    for id in masks.keys() {
        if !images.contains_key(id) {
            return Err(Error::Data(format!("mask {id}_mask has no matching image {id}")));
        }
    }

    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (id, img_path) in &images {
        let mask_path = masks
            .get(id)
            .ok_or_else(|| Error::Data(format!("image {id} has no matching mask {id}_mask")))?;
        let img = image::open(img_path)?.into_luma8();
        let msk = image::open(mask_path)?.into_luma8();
        if img.dimensions() != msk.dimensions() {
            return Err(Error::Data(format!(
                "pair {id}: image is {:?} but mask is {:?}",
                img.dimensions(),
                msk.dimensions()
            )));
        }

        let mut levels: Vec<u8> = msk.pixels().map(|p| p.0[0]).collect();
        levels.sort_unstable();
        levels.dedup();
        if levels.iter().any(|&v| v != 0 && v != 255) {
            warnings.push(format!(
                "mask {}: {} gray levels, binarizing at 128",
                mask_path.display(),
                levels.len()
            ));
        }

        let target = extent as u32;
        let img = if img.dimensions() == (target, target) {
            img
        } else {
            image::imageops::resize(&img, target, target, image::imageops::FilterType::Triangle)
        };
        let msk = if msk.dimensions() == (target, target) {
            msk
        } else {
            image::imageops::resize(&msk, target, target, image::imageops::FilterType::Nearest)
        };

        let mask = Tensor::from_vec(
            &[extent, extent],
            msk.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect(),
        );
        out.push(SegSample { image: gray_to_tensor(&img), mask, id: id.clone() });
    }
    Ok((out, warnings))
}

/// Stack samples into network-shaped batches: `([n,h,w,1], [n,h,w,1])`.
pub fn batch_tensors(samples: &[&SegSample]) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::Data("batch_tensors: empty batch".into()));
    }
    let shape = samples[0].image.shape().to_vec();
    let [h, w] = shape[..] else {
        return Err(Error::shape("batch_tensors", format!("sample shape {shape:?}")));
    };
    let mut imgs = Vec::with_capacity(samples.len() * h * w);
    let mut msks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != shape || s.mask.shape() != shape {
            return Err(Error::shape(
                "batch_tensors",
                format!("sample {} shape {:?} vs {:?}", s.id, s.image.shape(), shape),
            ));
        }
        imgs.extend_from_slice(s.image.data());
        msks.extend_from_slice(s.mask.data());
    }
    let n = samples.len();
    Ok((Tensor::from_vec(&[n, h, w, 1], imgs), Tensor::from_vec(&[n, h, w, 1], msks)))
}

/// Per-class intensity histogram over `[0, 1]` with equal-width bins.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FgBgHistogram {
    pub fg: Vec<u64>,
    pub bg: Vec<u64>,
}

impl FgBgHistogram {
    pub fn merge(&mut self, other: &FgBgHistogram) {
        assert_eq!(self.fg.len(), other.fg.len(), "histogram bin counts differ");
        for (a, b) in self.fg.iter_mut().zip(&other.fg) {
            *a += b;
        }
        for (a, b) in self.bg.iter_mut().zip(&other.bg) {
            *a += b;
        }
    }

    pub fn fg_total(&self) -> u64 {
        self.fg.iter().sum()
    }

    pub fn bg_total(&self) -> u64 {
        self.bg.iter().sum()
    }
}

/// Histogram of image intensities split by the mask. Values land in
/// `floor(v·bins)`, with 1.0 folded into the last bin.
pub fn fg_bg_histogram(sample: &SegSample, bins: usize) -> Result<FgBgHistogram> {
    if bins < 2 {
        return Err(Error::Config(format!("fg_bg_histogram: bins {bins} below minimum 2")));
    }
    if sample.image.shape() != sample.mask.shape() {
        return Err(Error::shape(
            "fg_bg_histogram",
            format!("image {:?} vs mask {:?}", sample.image.shape(), sample.mask.shape()),
        ));
    }
    let mut h = FgBgHistogram { fg: vec![0; bins], bg: vec![0; bins] };
    for (&v, &m) in sample.image.data().iter().zip(sample.mask.data()) {
        let idx = ((v * bins as f64) as usize).min(bins - 1);
        if m >= 0.5 {
            h.fg[idx] += 1;
        } else {
            h.bg[idx] += 1;
        }
    }
    Ok(h)
}

/// Intersection of the two class distributions: `Σ min(p_i, q_i)` after
/// normalizing each class to a probability vector. 1 means identical
/// histograms, 0 means disjoint support.
pub fn histogram_intersection(h: &FgBgHistogram) -> f64 {
    let (ft, bt) = (h.fg_total(), h.bg_total());
    if ft == 0 || bt == 0 {
        return 0.0;
    }
    h.fg
        .iter()
        .zip(&h.bg)
        .map(|(&f, &b)| (f as f64 / ft as f64).min(b as f64 / bt as f64))
        .sum()
}
