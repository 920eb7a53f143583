//! Synthetic data, parametric corruptions, and test-stream protocols.
//!
//! Images are single-channel, values in [0, 1]. Each class is an oriented
//! grating with a class-specific angle and frequency plus per-sample jitter,
//! which keeps the task learnable by a small ViT while leaving enough
//! per-class pixel structure for a nearest-centroid baseline to beat chance.
//!
//! Corruptions come in six kinds spanning noise, blur, photometric, and
//! digital families, with severity levels 0..=5. Severity 0 is the identity
//! for every kind. The per-severity parameter tables below are fixed
//! constants, tuned once so that severity 5 costs the toy source model a
//! double-digit accuracy drop.

use std::str::FromStr;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_container, write_container, DATA_MAGIC};
use crate::error::{DctError, DctResult};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    /// `[m, S, S, 1]` images in [0, 1].
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub classes: usize,
    pub image_size: usize,
    pub split: Split,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixels of one image.
    pub fn image(&self, idx: usize) -> &[f32] {
        let px = self.image_size * self.image_size;
        &self.images.data()[idx * px..(idx + 1) * px]
    }
}

fn split_rng(seed: u64, split: Split) -> StdRng {
    // disjoint train/test jitter streams from one dataset seed
    let salt = match split {
        Split::Train => 0x9E37_79B9_7F4A_7C15,
        Split::Test => 0xD1B5_4A32_D192_ED03,
    };
    StdRng::seed_from_u64(seed ^ salt)
}

fn gen_split(
    classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
    split: Split,
) -> SyntheticDataset {
    let mut rng = split_rng(seed, split);
    let normal_angle = Normal::new(0.0f64, 0.05).unwrap();
    let normal_phase = Normal::new(0.0f64, 0.25).unwrap();
    let normal_noise = Normal::new(0.0f64, 0.02).unwrap();
    let angles = classes.div_ceil(2).max(1);
    let px = image_size * image_size;
    let mut data = Vec::with_capacity(classes * per_class * px);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let base_angle = std::f64::consts::PI * (c % angles) as f64 / angles as f64;
        let freq = 2.0 + 1.5 * (c / angles) as f64;
        for _ in 0..per_class {
            let theta = base_angle + normal_angle.sample(&mut rng);
            let phase = normal_phase.sample(&mut rng);
            let amp = rng.gen_range(0.35f64..0.45);
            let (ct, st) = (theta.cos(), theta.sin());
            for y in 0..image_size {
                for x in 0..image_size {
                    let u = (x as f64 * ct + y as f64 * st) / image_size as f64;
                    let wave = 0.5 + amp * (2.0 * std::f64::consts::PI * freq * u + phase).sin();
                    let v = wave + normal_noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(c as u32);
        }
    }
    SyntheticDataset {
        images: Tensor::from_parts(vec![classes * per_class, image_size, image_size, 1], data),
        labels,
        classes,
        image_size,
        split,
    }
}

/// Generate the source-domain train split and the clean test split.
/// Deterministic given the seed; train and test use disjoint jitter streams.
pub fn gen_synthetic_dataset(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    image_size: usize,
    seed: u64,
) -> DctResult<(SyntheticDataset, SyntheticDataset)> {
    if classes < 2 {
        return Err(DctError::Config { message: "need at least 2 classes".into() });
    }
    if train_per_class == 0 || test_per_class == 0 || image_size == 0 {
        return Err(DctError::Config {
            message: "per-class counts and image_size must be positive".into(),
        });
    }
    Ok((
        gen_split(classes, train_per_class, image_size, seed, Split::Train),
        gen_split(classes, test_per_class, image_size, seed, Split::Test),
    ))
}

// ── corruptions ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    BoxBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = DctError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CorruptionKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| DctError::Config { message: format!("unknown corruption kind {s:?}") })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 0..=5; severity 0 is the identity.
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> DctResult<Self> {
        if severity > 5 {
            return Err(DctError::InvalidSeverity { severity });
        }
        Ok(CorruptionSpec { kind, severity })
    }
}

// Severity parameter tables, tuned once against the toy source model so that
// severity 5 costs it roughly 25-35 accuracy points, then frozen.

/// Additive Gaussian noise standard deviation per severity.
pub const GAUSSIAN_STD: [f64; 6] = [0.0, 0.05, 0.10, 0.15, 0.20, 0.26];
/// Per-pixel probability of a salt-or-pepper flip.
pub const IMPULSE_PROB: [f64; 6] = [0.0, 0.04, 0.08, 0.12, 0.16, 0.20];
/// Box blur: fixed 5x5 mean filter mixed with the original at this weight.
/// A kernel-size ladder is too coarse at 16x16 (3 is harmless, 5 is fatal),
/// so severity interpolates the blend instead.
pub const BLUR_BLEND: [f64; 6] = [0.0, 0.2, 0.4, 0.55, 0.7, 0.85];
/// Box blur kernel side used for severities >= 1.
pub const BLUR_KERNEL: usize = 5;
/// Contrast factor applied around 0.5.
pub const CONTRAST_FACTOR: [f64; 6] = [1.0, 0.8, 0.65, 0.5, 0.37, 0.25];
/// Brightness lightening strength: v' = v + t * (1 - v), a compressive
/// highlight push (no hard clipping).
pub const BRIGHTNESS_OFFSET: [f64; 6] = [0.0, 0.15, 0.3, 0.42, 0.52, 0.6];
/// Pixelation: 2x2 block averaging mixed with the original at this weight.
pub const PIXELATE_BLEND: [f64; 6] = [0.0, 0.18, 0.36, 0.54, 0.72, 0.9];
/// Block side used for pixelation at severities >= 1.
pub const PIXELATE_FACTOR: usize = 2;

fn image_dims(image: &Tensor) -> DctResult<(usize, usize)> {
    let s = image.shape();
    match s.len() {
        2 => Ok((s[0], s[1])),
        3 if s[2] == 1 => Ok((s[0], s[1])),
        _ => Err(DctError::DimMismatch {
            op: "corrupt",
            detail: format!("expected [H, W] or [H, W, 1] image, got {s:?}"),
        }),
    }
}

/// Apply one corruption to one image. Noise kinds are deterministic given the
/// seed; outputs are clamped to [0, 1]. Severity 0 returns the input bitwise.
pub fn corrupt(image: &Tensor, spec: &CorruptionSpec, seed: u64) -> DctResult<Tensor> {
    if spec.severity > 5 {
        return Err(DctError::InvalidSeverity { severity: spec.severity });
    }
    let (h, w) = image_dims(image)?;
    if spec.severity == 0 {
        return Ok(image.clone());
    }
    let s = spec.severity as usize;
    let src = image.data();
    let out: Vec<f32> = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = StdRng::seed_from_u64(seed);
            let normal = Normal::new(0.0f64, GAUSSIAN_STD[s]).unwrap();
            src.iter()
                .map(|&v| ((v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0)) as f32)
                .collect()
        }
        CorruptionKind::ImpulseNoise => {
            let mut rng = StdRng::seed_from_u64(seed);
            let p = IMPULSE_PROB[s];
            src.iter()
                .map(|&v| {
                    if rng.gen::<f64>() < p {
                        if rng.gen::<f64>() < 0.5 {
                            0.0
                        } else {
                            1.0
                        }
                    } else {
                        v
                    }
                })
                .collect()
        }
        CorruptionKind::BoxBlur => {
            let k = BLUR_KERNEL;
            let t = BLUR_BLEND[s];
            let r = (k / 2) as isize;
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0f64;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                            let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                            acc += src[yy * w + xx] as f64;
                        }
                    }
                    let blurred = acc / (k * k) as f64;
                    let orig = src[y as usize * w + x as usize] as f64;
                    out.push(((1.0 - t) * orig + t * blurred).clamp(0.0, 1.0) as f32);
                }
            }
            out
        }
        CorruptionKind::Contrast => {
            let f = CONTRAST_FACTOR[s];
            src.iter()
                .map(|&v| ((0.5 + f * (v as f64 - 0.5)).clamp(0.0, 1.0)) as f32)
                .collect()
        }
        CorruptionKind::Brightness => {
            let t = BRIGHTNESS_OFFSET[s];
            src.iter()
                .map(|&v| ((v as f64 + t * (1.0 - v as f64)).clamp(0.0, 1.0)) as f32)
                .collect()
        }
        CorruptionKind::Pixelate => {
            let f = PIXELATE_FACTOR.min(h).min(w);
            let t = PIXELATE_BLEND[s];
            let mut out = vec![0.0f32; h * w];
            let mut by = 0;
            while by < h {
                let bh = f.min(h - by);
                let mut bx = 0;
                while bx < w {
                    let bw = f.min(w - bx);
                    let mut acc = 0.0f64;
                    for y in by..by + bh {
                        for x in bx..bx + bw {
                            acc += src[y * w + x] as f64;
                        }
                    }
                    let mean = acc / (bh * bw) as f64;
                    for y in by..by + bh {
                        for x in bx..bx + bw {
                            let orig = src[y * w + x] as f64;
                            out[y * w + x] = ((1.0 - t) * orig + t * mean).clamp(0.0, 1.0) as f32;
                        }
                    }
                    bx += f;
                }
                by += f;
            }
            out
        }
    };
    Ok(Tensor::from_parts(image.shape().to_vec(), out))
}

// ── stream protocols ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Normal,
    Imbalanced,
    Bs1,
}

impl ProtocolKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProtocolKind::Normal => "normal",
            ProtocolKind::Imbalanced => "imbalanced",
            ProtocolKind::Bs1 => "bs1",
        }
    }
}

#[derive(Clone, Debug)]
pub struct StreamProtocol {
    pub kind: ProtocolKind,
    pub batch_size: usize,
    /// Dirichlet concentration for the imbalanced protocol; smaller means a
    /// stronger per-batch label skew.
    pub concentration: f64,
    pub seed: u64,
}

/// One batch of corrupted test images. Labels are hidden from adaptation and
/// used only for scoring.
#[derive(Clone, Debug)]
pub struct StreamBatch {
    pub index: usize,
    /// `[k, S, S, 1]`.
    pub images: Tensor,
    pub labels: Vec<u32>,
    /// Test-set indices of the samples, for conservation checks.
    pub ids: Vec<u32>,
    pub corruption: CorruptionSpec,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Emission order for the imbalanced protocol: per contiguous segment of
/// `seg` samples a symmetric Dirichlet(alpha) draw fixes the class mix, and
/// slots sample classes from the remaining pools proportionally. When the
/// Gamma draws all underflow to zero (alpha -> 0), slots fall back to the
/// smallest remaining class index, which degenerates to sorted-by-class
/// order.
fn imbalanced_order(
    labels: &[u32],
    classes: usize,
    seg: usize,
    alpha: f64,
    rng: &mut StdRng,
) -> Vec<usize> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        pools[c as usize].push(i);
    }
    for pool in pools.iter_mut() {
        // emit each class's samples in a seeded random order
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
    }
    let gamma = Gamma::new(alpha, 1.0).expect("validated concentration");
    let total = labels.len();
    let mut order = Vec::with_capacity(total);
    let mut weights = vec![0.0f64; classes];
    let mut emitted_in_seg = seg; // force a draw on the first slot
    while order.len() < total {
        if emitted_in_seg >= seg {
            for w in weights.iter_mut() {
                *w = gamma.sample(rng);
            }
            emitted_in_seg = 0;
        }
        let mass: f64 = weights
            .iter()
            .enumerate()
            .filter(|(c, _)| !pools[*c].is_empty())
            .map(|(_, &w)| w)
            .sum();
        let pick = if mass > 0.0 && mass.is_finite() {
            let mut u = rng.gen::<f64>() * mass;
            let mut chosen = None;
            for (c, &w) in weights.iter().enumerate() {
                if pools[c].is_empty() {
                    continue;
                }
                u -= w;
                if u <= 0.0 {
                    chosen = Some(c);
                    break;
                }
            }
            chosen.unwrap_or_else(|| {
                (0..classes).rev().find(|&c| !pools[c].is_empty()).unwrap()
            })
        } else {
            // degenerate draw: deterministic ascending-class fallback
            (0..classes).find(|&c| !pools[c].is_empty()).unwrap()
        };
        order.push(pools[pick].pop().unwrap());
        emitted_in_seg += 1;
    }
    order
}

/// Build the ordered corrupted stream for one protocol. Every test sample is
/// emitted exactly once; the byte content is fully determined by the dataset,
/// the corruption spec, and the protocol seed.
pub fn make_stream(
    test: &SyntheticDataset,
    spec: &CorruptionSpec,
    proto: &StreamProtocol,
) -> DctResult<Vec<StreamBatch>> {
    if spec.severity > 5 {
        return Err(DctError::InvalidSeverity { severity: spec.severity });
    }
    let batch_size = match proto.kind {
        ProtocolKind::Bs1 => 1,
        _ => proto.batch_size,
    };
    if batch_size == 0 {
        return Err(DctError::Config { message: "batch_size must be positive".into() });
    }
    let mut rng = StdRng::seed_from_u64(proto.seed);
    let order: Vec<usize> = match proto.kind {
        ProtocolKind::Normal | ProtocolKind::Bs1 => {
            let mut idx: Vec<usize> = (0..test.len()).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            idx
        }
        ProtocolKind::Imbalanced => {
            if !(proto.concentration > 0.0) {
                return Err(DctError::InvalidConcentration { value: proto.concentration });
            }
            imbalanced_order(&test.labels, test.classes, batch_size, proto.concentration, &mut rng)
        }
    };

    let corr_base = splitmix64(proto.seed ^ 0xC0FF_EE00_D00D_F00D);
    let side = test.image_size;
    let px = side * side;
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for (bi, chunk) in order.chunks(batch_size).enumerate() {
        let mut data = Vec::with_capacity(chunk.len() * px);
        let mut labels = Vec::with_capacity(chunk.len());
        let mut ids = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let img = Tensor::from_parts(vec![side, side, 1], test.image(idx).to_vec());
            let corrupted = corrupt(&img, spec, splitmix64(corr_base ^ idx as u64))?;
            data.extend_from_slice(corrupted.data());
            labels.push(test.labels[idx]);
            ids.push(idx as u32);
        }
        batches.push(StreamBatch {
            index: bi,
            images: Tensor::from_parts(vec![chunk.len(), side, side, 1], data),
            labels,
            ids,
            corruption: *spec,
        });
    }
    Ok(batches)
}

// ── dataset container ────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DataTensorRecord {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct DataHeader {
    classes: usize,
    image_size: usize,
    split: Split,
    tensors: Vec<DataTensorRecord>,
}

/// Export a dataset in the shared container format (magic `DCTDATA1`):
/// an f32 image block plus an i32 label block, both declared in the manifest.
pub fn save_dataset(ds: &SyntheticDataset, path: &std::path::Path) -> DctResult<()> {
    let mut payload: Vec<u8> = Vec::new();
    let images_offset = 0u64;
    for v in ds.images.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let labels_offset = payload.len() as u64;
    for &l in &ds.labels {
        payload.extend_from_slice(&(l as i32).to_le_bytes());
    }
    let header = DataHeader {
        classes: ds.classes,
        image_size: ds.image_size,
        split: ds.split,
        tensors: vec![
            DataTensorRecord {
                name: "images".into(),
                shape: ds.images.shape().to_vec(),
                byte_offset: images_offset,
                dtype: "f32".into(),
            },
            DataTensorRecord {
                name: "labels".into(),
                shape: vec![ds.labels.len()],
                byte_offset: labels_offset,
                dtype: "i32".into(),
            },
        ],
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| DctError::CorruptContainer {
        message: format!("header serialization failed: {e}"),
    })?;
    write_container(path, DATA_MAGIC, &header_json, &payload)
}

pub fn load_dataset(path: &std::path::Path) -> DctResult<SyntheticDataset> {
    let (header_bytes, payload) = read_container(path, DATA_MAGIC)?;
    let header: DataHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| DctError::CorruptContainer {
            message: format!("header is not valid JSON: {e}"),
        })?;
    let mut images = None;
    let mut labels = None;
    for rec in &header.tensors {
        let numel: usize = rec.shape.iter().product();
        let width = match rec.dtype.as_str() {
            "f32" | "i32" => 4,
            other => {
                return Err(DctError::TensorMismatch {
                    name: rec.name.clone(),
                    message: format!("unsupported dtype {other:?}"),
                })
            }
        };
        let start = rec.byte_offset as usize;
        let end = start + numel * width;
        if end > payload.len() {
            return Err(DctError::TensorMismatch {
                name: rec.name.clone(),
                message: "payload too short for declared shape".into(),
            });
        }
        let bytes = &payload[start..end];
        match rec.name.as_str() {
            "images" => {
                let data: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                images = Some(Tensor::new(rec.shape.clone(), data).map_err(|e| {
                    DctError::TensorMismatch { name: "images".into(), message: e.to_string() }
                })?);
            }
            "labels" => {
                labels = Some(
                    bytes
                        .chunks_exact(4)
                        .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as u32)
                        .collect::<Vec<u32>>(),
                );
            }
            other => {
                return Err(DctError::TensorMismatch {
                    name: other.into(),
                    message: "unknown tensor in dataset container".into(),
                })
            }
        }
    }
    match (images, labels) {
        (Some(images), Some(labels)) => Ok(SyntheticDataset {
            images,
            labels,
            classes: header.classes,
            image_size: header.image_size,
            split: header.split,
        }),
        _ => Err(DctError::CorruptContainer {
            message: "dataset container is missing images or labels".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec(kind: CorruptionKind, severity: u8) -> CorruptionSpec {
        CorruptionSpec::new(kind, severity).unwrap()
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let (tr1, te1) = gen_synthetic_dataset(10, 20, 100, 16, 5).unwrap();
        let (tr2, te2) = gen_synthetic_dataset(10, 20, 100, 16, 5).unwrap();
        assert_eq!(tr1.images.data(), tr2.images.data());
        assert_eq!(te1.images.data(), te2.images.data());
        assert_eq!(te1.len(), 1000);
        let mut counts = [0usize; 10];
        for &l in &te1.labels {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 100));
        // train and test jitter streams differ
        assert_ne!(tr1.image(0), te1.image(0));
    }

    #[test]
    fn nearest_centroid_beats_chance_on_clean_test() {
        let (train, test) = gen_synthetic_dataset(10, 30, 20, 16, 11).unwrap();
        let px = 16 * 16;
        let mut centroids = vec![vec![0.0f64; px]; 10];
        let mut counts = vec![0usize; 10];
        for i in 0..train.len() {
            let c = train.labels[i] as usize;
            for (j, &v) in train.image(i).iter().enumerate() {
                centroids[c][j] += v as f64;
            }
            counts[c] += 1;
        }
        for c in 0..10 {
            for v in centroids[c].iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        let mut correct = 0usize;
        for i in 0..test.len() {
            let img = test.image(i);
            let best = (0..10)
                .min_by(|&a, &b| {
                    let da: f64 = img
                        .iter()
                        .zip(&centroids[a])
                        .map(|(&v, &m)| (v as f64 - m) * (v as f64 - m))
                        .sum();
                    let db: f64 = img
                        .iter()
                        .zip(&centroids[b])
                        .map(|(&v, &m)| (v as f64 - m) * (v as f64 - m))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best as u32 == test.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.2, "nearest-centroid accuracy {acc} not above chance");
    }

    #[test]
    fn severity_zero_is_bitwise_identity_for_every_kind() {
        let (_, test) = gen_synthetic_dataset(4, 2, 2, 16, 3).unwrap();
        let img = Tensor::from_parts(vec![16, 16, 1], test.image(0).to_vec());
        for kind in CorruptionKind::ALL {
            let out = corrupt(&img, &toy_spec(kind, 0), 99).unwrap();
            assert_eq!(out.data(), img.data(), "{kind:?} severity 0 not identity");
        }
    }

    #[test]
    fn contrast_matches_closed_form() {
        let (_, test) = gen_synthetic_dataset(4, 2, 2, 16, 3).unwrap();
        let img = Tensor::from_parts(vec![16, 16, 1], test.image(1).to_vec());
        for s in 1..=5u8 {
            let out = corrupt(&img, &toy_spec(CorruptionKind::Contrast, s), 0).unwrap();
            let f = CONTRAST_FACTOR[s as usize];
            for (o, i) in out.data().iter().zip(img.data()) {
                let expect = (0.5 + f * (*i as f64 - 0.5)).clamp(0.0, 1.0) as f32;
                assert_eq!(*o, expect);
            }
        }
    }

    #[test]
    fn gaussian_noise_severity_3_empirical_std() {
        // statistical oracle over >= 10^4 pixels on a constant image
        let img = Tensor::filled(vec![128, 128, 1], 0.5);
        let out = corrupt(&img, &toy_spec(CorruptionKind::GaussianNoise, 3), 7).unwrap();
        let n = out.numel() as f64;
        let mean: f64 = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 =
            out.data().iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let target = GAUSSIAN_STD[3];
        assert!(
            (std - target).abs() / target < 0.1,
            "empirical std {std} not within 10% of {target}"
        );
    }

    #[test]
    fn noise_kinds_are_deterministic_given_seed() {
        let img = Tensor::filled(vec![16, 16, 1], 0.5);
        for kind in [CorruptionKind::GaussianNoise, CorruptionKind::ImpulseNoise] {
            let a = corrupt(&img, &toy_spec(kind, 4), 42).unwrap();
            let b = corrupt(&img, &toy_spec(kind, 4), 42).unwrap();
            let c = corrupt(&img, &toy_spec(kind, 4), 43).unwrap();
            assert_eq!(a.data(), b.data());
            assert_ne!(a.data(), c.data());
        }
    }

    #[test]
    fn corruption_distortion_is_monotone_in_severity() {
        let (_, test) = gen_synthetic_dataset(6, 2, 4, 16, 21).unwrap();
        for kind in CorruptionKind::ALL {
            let mut prev = -1.0f64;
            for s in 0..=5u8 {
                let mut dist = 0.0f64;
                for i in 0..test.len() {
                    let img = Tensor::from_parts(vec![16, 16, 1], test.image(i).to_vec());
                    let out = corrupt(&img, &toy_spec(kind, s), 1000 + i as u64).unwrap();
                    dist += img
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&a, &b)| (a as f64 - b as f64).abs())
                        .sum::<f64>();
                }
                dist /= (test.len() * 256) as f64;
                assert!(
                    dist >= prev - 1e-9,
                    "{kind:?}: distortion not monotone at severity {s}: {dist} < {prev}"
                );
                prev = dist;
            }
        }
    }

    #[test]
    fn invalid_severity_is_rejected() {
        assert!(CorruptionSpec::new(CorruptionKind::BoxBlur, 6).is_err());
        let img = Tensor::filled(vec![4, 4, 1], 0.5);
        let bad = CorruptionSpec { kind: CorruptionKind::BoxBlur, severity: 9 };
        assert!(matches!(
            corrupt(&img, &bad, 0),
            Err(DctError::InvalidSeverity { severity: 9 })
        ));
    }

    #[test]
    fn normal_stream_batch_arithmetic_and_conservation() {
        let (_, test) = gen_synthetic_dataset(10, 2, 100, 16, 9).unwrap();
        let spec = toy_spec(CorruptionKind::GaussianNoise, 2);
        let proto = StreamProtocol {
            kind: ProtocolKind::Normal,
            batch_size: 64,
            concentration: 1.0,
            seed: 17,
        };
        let stream = make_stream(&test, &spec, &proto).unwrap();
        assert_eq!(stream.len(), 16);
        assert!(stream[..15].iter().all(|b| b.labels.len() == 64));
        assert_eq!(stream[15].labels.len(), 40);
        // id multiset equals the test set exactly
        let mut ids: Vec<u32> = stream.iter().flat_map(|b| b.ids.iter().copied()).collect();
        ids.sort_unstable();
        let expect: Vec<u32> = (0..1000).collect();
        assert_eq!(ids, expect);
        // label histogram preserved
        let mut h = [0usize; 10];
        for b in &stream {
            for &l in &b.labels {
                h[l as usize] += 1;
            }
        }
        assert!(h.iter().all(|&c| c == 100));
    }

    #[test]
    fn bs1_protocol_forces_batch_size_one() {
        let (_, test) = gen_synthetic_dataset(4, 2, 5, 8, 9).unwrap();
        let spec = toy_spec(CorruptionKind::Contrast, 1);
        let proto =
            StreamProtocol { kind: ProtocolKind::Bs1, batch_size: 64, concentration: 1.0, seed: 3 };
        let stream = make_stream(&test, &spec, &proto).unwrap();
        assert_eq!(stream.len(), 20);
        assert!(stream.iter().all(|b| b.labels.len() == 1));
    }

    #[test]
    fn tiny_concentration_degenerates_to_sorted_by_class() {
        let (_, test) = gen_synthetic_dataset(5, 2, 20, 8, 13).unwrap();
        let spec = toy_spec(CorruptionKind::Brightness, 1);
        let proto = StreamProtocol {
            kind: ProtocolKind::Imbalanced,
            batch_size: 16,
            concentration: 1e-6,
            seed: 23,
        };
        let stream = make_stream(&test, &spec, &proto).unwrap();
        let labels: Vec<u32> = stream.iter().flat_map(|b| b.labels.iter().copied()).collect();
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        assert_eq!(labels, sorted, "label sequence not sorted by class");
        assert_eq!(labels.len(), 100);
    }

    #[test]
    fn imbalanced_stream_conserves_samples_and_skews_batches() {
        let (_, test) = gen_synthetic_dataset(10, 2, 40, 8, 31).unwrap();
        let spec = toy_spec(CorruptionKind::GaussianNoise, 1);
        let proto = StreamProtocol {
            kind: ProtocolKind::Imbalanced,
            batch_size: 40,
            concentration: 0.05,
            seed: 29,
        };
        let stream = make_stream(&test, &spec, &proto).unwrap();
        let mut ids: Vec<u32> = stream.iter().flat_map(|b| b.ids.iter().copied()).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..400).collect::<Vec<u32>>());
        // at this concentration a batch should be far from uniform:
        // its most frequent label should dominate
        let b = &stream[0];
        let mut h = [0usize; 10];
        for &l in &b.labels {
            h[l as usize] += 1;
        }
        let max = *h.iter().max().unwrap();
        assert!(max > 8, "expected a skewed batch, top class count {max}");
    }

    #[test]
    fn stream_bytes_are_deterministic() {
        let (_, test) = gen_synthetic_dataset(4, 2, 10, 8, 41).unwrap();
        let spec = toy_spec(CorruptionKind::ImpulseNoise, 3);
        let proto = StreamProtocol {
            kind: ProtocolKind::Normal,
            batch_size: 8,
            concentration: 1.0,
            seed: 55,
        };
        let s1 = make_stream(&test, &spec, &proto).unwrap();
        let s2 = make_stream(&test, &spec, &proto).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.images.data(), b.images.data());
            assert_eq!(a.ids, b.ids);
        }
        let other = StreamProtocol { seed: 56, ..proto };
        let s3 = make_stream(&test, &spec, &other).unwrap();
        assert_ne!(
            s1[0].images.data(),
            s3[0].images.data(),
            "different protocol seed should reorder/recorrupt"
        );
    }

    #[test]
    fn zero_concentration_is_rejected() {
        let (_, test) = gen_synthetic_dataset(4, 2, 5, 8, 2).unwrap();
        let spec = toy_spec(CorruptionKind::Contrast, 2);
        let proto = StreamProtocol {
            kind: ProtocolKind::Imbalanced,
            batch_size: 4,
            concentration: 0.0,
            seed: 1,
        };
        assert!(matches!(
            make_stream(&test, &spec, &proto),
            Err(DctError::InvalidConcentration { .. })
        ));
    }

    #[test]
    fn dataset_container_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.data");
        let (_, test) = gen_synthetic_dataset(4, 2, 6, 8, 77).unwrap();
        save_dataset(&test, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.images.data(), test.images.data());
        assert_eq!(loaded.labels, test.labels);
        assert_eq!(loaded.classes, 4);
        assert_eq!(loaded.split, Split::Test);
    }
}
