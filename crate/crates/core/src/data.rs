//! CIFAR-10/100 binary files, per-channel normalization and crop/flip
//! augmentation.
//!
//! A CIFAR-10 record is one label byte followed by 3072 pixel bytes (the R,
//! G and B planes, each 32x32 row-major). A CIFAR-100 record has a coarse
//! and a fine label byte before the pixels; the fine label is used.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Cifar10,
    Cifar100,
}

impl Variant {
    pub fn num_classes(self) -> usize {
        match self {
            Variant::Cifar10 => 10,
            Variant::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            Variant::Cifar10 => 1,
            Variant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn train_files(self) -> Vec<&'static str> {
        match self {
            Variant::Cifar10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            Variant::Cifar100 => vec!["train.bin"],
        }
    }

    pub fn test_file(self) -> &'static str {
        match self {
            Variant::Cifar10 => "test_batch.bin",
            Variant::Cifar100 => "test.bin",
        }
    }

    /// Subdirectory name used by the official archives.
    fn archive_dir(self) -> &'static str {
        match self {
            Variant::Cifar10 => "cifar-10-batches-bin",
            Variant::Cifar100 => "cifar-100-binary",
        }
    }
}

/// Raw images as bytes plus labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    /// The first `n` records.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Image `i` scaled to [0, 1] and normalized.
    pub fn sample(&self, i: usize, norm: &Normalization) -> Sample {
        let raw = self.image(i);
        let image = Tensor::from_fn([1, 3, SIDE, SIDE], |[_, c, y, x]| {
            let v = raw[c * SIDE * SIDE + y * SIDE + x] as f32 / 255.0;
            (v - norm.mean[c]) / norm.std[c]
        });
        Sample {
            image,
            label: self.labels[i],
        }
    }
}

/// Parse CIFAR records, failing on a partial trailing record or an
/// out-of-range label.
pub fn parse_records(bytes: &[u8], variant: Variant) -> Result<Dataset> {
    let len = variant.record_len();
    if !bytes.len().is_multiple_of(len) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {len}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / len;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(len) {
        let label = rec[variant.label_bytes() - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::Format(format!(
                "label {label} out of range for {variant:?}"
            )));
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[variant.label_bytes()..]);
    }
    Ok(Dataset {
        pixels,
        labels,
        num_classes: variant.num_classes(),
    })
}

pub fn encode_records(data: &Dataset, variant: Variant) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * variant.record_len());
    for (i, &label) in data.labels.iter().enumerate() {
        if variant == Variant::Cifar100 {
            out.push((label / 5) as u8);
        }
        out.push(label as u8);
        out.extend_from_slice(data.image(i));
    }
    out
}

pub fn read_files(files: &[PathBuf], variant: Variant) -> Result<Dataset> {
    let mut all = Dataset {
        pixels: Vec::new(),
        labels: Vec::new(),
        num_classes: variant.num_classes(),
    };
    for f in files {
        let bytes = fs::read(f).map_err(|e| Error::Format(format!("{}: {e}", f.display())))?;
        let part = parse_records(&bytes, variant)
            .map_err(|e| Error::Format(format!("{}: {e}", f.display())))?;
        all.pixels.extend(part.pixels);
        all.labels.extend(part.labels);
    }
    Ok(all)
}

fn resolve_dir(dir: &Path, variant: Variant) -> PathBuf {
    let nested = dir.join(variant.archive_dir());
    if nested.join(variant.test_file()).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Load the train and test splits from `dir` (or its official archive
/// subdirectory) without checking the record counts.
pub fn load_cifar_any(dir: &Path, variant: Variant) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir, variant);
    let train: Vec<PathBuf> = variant.train_files().iter().map(|f| dir.join(f)).collect();
    Ok((
        read_files(&train, variant)?,
        read_files(&[dir.join(variant.test_file())], variant)?,
    ))
}

/// Load the full dataset, requiring 50,000 training and 10,000 test images.
pub fn load_cifar(dir: &Path, variant: Variant) -> Result<(Dataset, Dataset)> {
    let (train, test) = load_cifar_any(dir, variant)?;
    if train.len() != 50_000 || test.len() != 10_000 {
        return Err(Error::Format(format!(
            "expected 50000/10000 images, found {}/{}",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

/// Write `train` and `test` under `dir` using the standard file names.
/// CIFAR-10 training records are spread over the five batch files.
pub fn write_cifar(dir: &Path, variant: Variant, train: &Dataset, test: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let files = variant.train_files();
    let per_file = train.len().div_ceil(files.len());
    for (k, name) in files.iter().enumerate() {
        let lo = (k * per_file).min(train.len());
        let hi = ((k + 1) * per_file).min(train.len());
        let part = Dataset {
            pixels: train.pixels[lo * PIXELS..hi * PIXELS].to_vec(),
            labels: train.labels[lo..hi].to_vec(),
            num_classes: train.num_classes,
        };
        fs::write(dir.join(name), encode_records(&part, variant))?;
    }
    fs::write(dir.join(variant.test_file()), encode_records(test, variant))?;
    Ok(())
}

/// Class-structured random images: each class has its own base colour and
/// stripe orientation/frequency, with per-pixel noise on top.
pub fn synthetic(num_classes: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<([f32; 3], f32, f32, f32)> = (0..num_classes)
        .map(|_| {
            let colour = [0, 1, 2].map(|_| rng.random_range(40.0..215.0));
            let angle = rng.random_range(0.0..std::f32::consts::PI);
            let freq = rng.random_range(0.15..0.6);
            let amp = rng.random_range(20.0..50.0);
            (colour, angle, freq, amp)
        })
        .collect();
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let (colour, angle, freq, amp) = protos[label];
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let (s, c) = angle.sin_cos();
        for (ch, base) in colour.iter().enumerate() {
            let sign = if ch == 1 { -1.0 } else { 1.0 };
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let t = (x as f32 * c + y as f32 * s) * freq + phase;
                    let v = base + sign * amp * t.sin() + rng.random_range(-30.0..30.0);
                    pixels.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(label);
    }
    Dataset {
        pixels,
        labels,
        num_classes,
    }
}

/// Per-channel mean and standard deviation of images scaled to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn from_dataset(data: &Dataset) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for img in data.pixels.chunks_exact(PIXELS) {
            for (c, plane) in img.chunks_exact(SIDE * SIDE).enumerate() {
                for &p in plane {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (data.len() * SIDE * SIDE).max(1) as f64;
        let mean = sum.map(|s| s / n);
        let std = [0, 1, 2].map(|c| ((sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt()).max(1e-6));
        Self {
            mean: mean.map(|m| m as f32),
            std: std.map(|s| s as f32),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Shape `(1, 3, 32, 32)`.
    pub image: Tensor<f32>,
    pub label: usize,
}

/// One draw of the augmentation: optional horizontal flip followed by a
/// 32x32 crop at `(dy, dx)` from the image zero-padded to 40x40.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub flip: bool,
    pub dy: usize,
    pub dx: usize,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        dy: PAD,
        dx: PAD,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        let flip = rng.random_bool(0.5);
        Self {
            flip,
            dy: rng.random_range(0..=2 * PAD),
            dx: rng.random_range(0..=2 * PAD),
        }
    }
}

pub fn augment_with(s: &Sample, p: AugmentParams) -> Sample {
    let src = &s.image;
    let image = Tensor::from_fn([1, 3, SIDE, SIDE], |[_, c, y, x]| {
        let (py, px) = (y + p.dy, x + p.dx);
        if py < PAD || px < PAD || py >= SIDE + PAD || px >= SIDE + PAD {
            return 0.0;
        }
        let (sy, mut sx) = (py - PAD, px - PAD);
        if p.flip {
            sx = SIDE - 1 - sx;
        }
        src.get(0, c, sy, sx)
    });
    Sample {
        image,
        label: s.label,
    }
}

pub fn augment(s: &Sample, rng: &mut impl Rng) -> Sample {
    augment_with(s, AugmentParams::sample(rng))
}

/// Stack samples into an `(N, 3, 32, 32)` batch.
pub fn collate(samples: &[Sample]) -> (Tensor<f32>, Vec<usize>) {
    let mut data = Vec::with_capacity(samples.len() * PIXELS);
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    let batch = Tensor::new([samples.len(), 3, SIDE, SIDE], data).expect("samples are 3x32x32");
    (batch, samples.iter().map(|s| s.label).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_records() -> Vec<u8> {
        let mut bytes = vec![7u8];
        bytes.extend(std::iter::repeat_n(255, PIXELS));
        bytes.push(3);
        bytes.extend(std::iter::repeat_n(0, PIXELS));
        bytes
    }

    #[test]
    fn parses_cifar10_labels_and_scales_pixels() {
        let d = parse_records(&two_records(), Variant::Cifar10).unwrap();
        assert_eq!(d.labels, vec![7, 3]);
        let s = d.sample(0, &Normalization::IDENTITY);
        assert!(s.image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut rec = vec![4u8, 42];
        rec.extend(std::iter::repeat_n(9, PIXELS));
        let d = parse_records(&rec, Variant::Cifar100).unwrap();
        assert_eq!(d.labels, vec![42]);
    }

    #[test]
    fn truncated_input_is_a_format_error() {
        let mut bytes = two_records();
        bytes.pop();
        assert!(matches!(
            parse_records(&bytes, Variant::Cifar10),
            Err(Error::Format(_))
        ));
        let mut bad = vec![10u8];
        bad.extend(std::iter::repeat_n(0, PIXELS));
        assert!(matches!(
            parse_records(&bad, Variant::Cifar10),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn write_and_reload_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for variant in [Variant::Cifar10, Variant::Cifar100] {
            let train = synthetic(variant.num_classes(), 23, 5);
            let test = synthetic(variant.num_classes(), 7, 6);
            let sub = dir.path().join(format!("{variant:?}"));
            write_cifar(&sub, variant, &train, &test).unwrap();
            let (a, b) = load_cifar_any(&sub, variant).unwrap();
            assert_eq!((a, b), (train, test));
            assert!(matches!(load_cifar(&sub, variant), Err(Error::Format(_))));
        }
    }

    #[test]
    fn centre_crop_without_flip_is_identity() {
        let d = synthetic(10, 1, 1);
        let s = d.sample(0, &Normalization::from_dataset(&d));
        assert_eq!(augment_with(&s, AugmentParams::IDENTITY), s);
    }

    #[test]
    fn flip_mirrors_columns() {
        let d = synthetic(10, 1, 2);
        let s = d.sample(0, &Normalization::IDENTITY);
        let f = augment_with(
            &s,
            AugmentParams {
                flip: true,
                ..AugmentParams::IDENTITY
            },
        );
        for c in 0..3 {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    assert_eq!(f.image.get(0, c, y, x), s.image.get(0, c, y, SIDE - 1 - x));
                }
            }
        }
    }

    #[test]
    fn shifted_crop_pads_with_zero() {
        let d = synthetic(10, 1, 3);
        let s = d.sample(0, &Normalization::IDENTITY);
        let a = augment_with(
            &s,
            AugmentParams {
                flip: false,
                dy: 0,
                dx: 8,
            },
        );
        assert_eq!(a.label, s.label);
        assert_eq!(a.image.get(0, 0, 0, 0), 0.0);
        assert_eq!(a.image.get(0, 1, 10, 27), s.image.get(0, 1, 6, 31));
        assert_eq!(a.image.get(0, 1, 10, 28), 0.0);
    }

    #[test]
    fn flip_frequency_is_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut flips = 0;
        let mut offsets = [0usize; 9];
        for _ in 0..10_000 {
            let p = AugmentParams::sample(&mut rng);
            flips += p.flip as usize;
            offsets[p.dx] += 1;
            assert!(p.dy <= 8);
        }
        assert!((4800..=5200).contains(&flips), "{flips}");
        assert!(offsets.iter().all(|&k| k > 900), "{offsets:?}");
    }

    #[test]
    fn normalization_standardizes() {
        let d = synthetic(10, 50, 4);
        let norm = Normalization::from_dataset(&d);
        let (batch, _) = collate(&(0..d.len()).map(|i| d.sample(i, &norm)).collect::<Vec<_>>());
        let (mean, var) = crate::tensor::batch_statistics(&batch);
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-4 && (var[c] - 1.0).abs() < 1e-3);
        }
    }
}
