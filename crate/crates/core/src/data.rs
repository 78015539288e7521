//! Dataset ingestion: CIFAR binaries, the procedural shape corpus, and the
//! split bookkeeping shared by both.
//!
//! Labels are deliberately gated behind a counting accessor. Unsupervised
//! pretraining must never look at them, and the cheapest way to prove that is
//! to count every read and assert the counter stood still.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::augment::{hsv_to_rgb, Image};
use crate::error::{Error, Result};
use crate::rng::RngKey;

const CIFAR10_RECORD: usize = 3073;
const CIFAR100_RECORD: usize = 3074;
const PIXELS: usize = 3072;

/// Which phase of the protocol a dataset feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::MetaTrain => "meta-train",
            Split::MetaVal => "meta-val",
            Split::MetaTest => "meta-test",
        })
    }
}

/// A labeled image collection. Labels are global class ids; a split may hold
/// any subset of the classes.
#[derive(Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    labels: Vec<usize>,
    /// Exclusive upper bound on label values.
    pub num_classes: usize,
    pub split: Split,
    label_reads: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            images: self.images.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
            label_reads: AtomicU64::new(0),
        }
    }
}

impl Dataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { images, labels, num_classes, split, label_reads: AtomicU64::new(0) })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Ground-truth class of image `i`. Every call is counted.
    pub fn label(&self, i: usize) -> usize {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.labels[i]
    }

    /// Number of label accesses since construction (or the last clone).
    pub fn label_reads(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Sorted distinct classes present in this split.
    pub fn classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for i in 0..self.len() {
            seen[self.label(i)] = true;
        }
        (0..self.num_classes).filter(|&c| seen[c]).collect()
    }

    /// Image indices belonging to `class`, in dataset order.
    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.label(i) == class).collect()
    }

    /// New dataset holding only the listed classes (labels keep global ids).
    pub fn subset_by_classes(&self, classes: &[usize], split: Split) -> Result<Self> {
        let keep: Vec<bool> = {
            let mut k = vec![false; self.num_classes];
            for &c in classes {
                if c >= self.num_classes {
                    return Err(Error::Data(format!(
                        "class {c} out of range for {} classes",
                        self.num_classes
                    )));
                }
                k[c] = true;
            }
            k
        };
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            let l = self.label(i);
            if keep[l] {
                images.push(self.images[i].clone());
                labels.push(l);
            }
        }
        Dataset::new(images, labels, self.num_classes, split)
    }
}

/// Stack images into a `[batch, 3, h, w]` tensor buffer.
pub fn images_to_batch(images: &[&Image]) -> Vec<f64> {
    let mut out = Vec::with_capacity(images.iter().map(|i| i.data.len()).sum());
    for img in images {
        out.extend_from_slice(&img.data);
    }
    out
}

fn pixels_from_record(pixels: &[u8]) -> Image {
    // 1024 red, 1024 green, 1024 blue bytes, each row-major 32x32.
    debug_assert_eq!(pixels.len(), PIXELS);
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_data(32, 32, data)
}

fn pixels_to_record(img: &Image, out: &mut Vec<u8>) {
    for &v in &img.data {
        out.push((v * 255.0).round() as u8);
    }
}

/// Parse raw CIFAR-10 bytes: records of one label byte + 3072 pixel bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<Image>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::Data(format!(
            "cifar-10 data is {} bytes, expected a positive multiple of {CIFAR10_RECORD}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR10_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (rec, chunk) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = chunk[0];
        if label > 9 {
            return Err(Error::Data(format!(
                "cifar-10 record {rec} has label byte {label}, expected 0..=9"
            )));
        }
        labels.push(label as usize);
        images.push(pixels_from_record(&chunk[1..]));
    }
    Ok((images, labels))
}

/// Inverse of [`parse_cifar10`]: byte-identical for any parsed file.
pub fn serialize_cifar10(images: &[Image], labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(images.len() * CIFAR10_RECORD);
    for (img, &label) in images.iter().zip(labels) {
        out.push(label as u8);
        pixels_to_record(img, &mut out);
    }
    out
}

/// Parse raw CIFAR-100 bytes: records of coarse byte, fine byte, 3072 pixels.
pub fn parse_cifar100(bytes: &[u8]) -> Result<(Vec<Image>, Vec<usize>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR100_RECORD != 0 {
        return Err(Error::Data(format!(
            "cifar-100 data is {} bytes, expected a positive multiple of {CIFAR100_RECORD}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR100_RECORD);
    let mut coarse = Vec::with_capacity(images.capacity());
    let mut fine = Vec::with_capacity(images.capacity());
    for (rec, chunk) in bytes.chunks_exact(CIFAR100_RECORD).enumerate() {
        if chunk[0] > 19 {
            return Err(Error::Data(format!(
                "cifar-100 record {rec} has coarse label byte {}, expected 0..=19",
                chunk[0]
            )));
        }
        if chunk[1] > 99 {
            return Err(Error::Data(format!(
                "cifar-100 record {rec} has fine label byte {}, expected 0..=99",
                chunk[1]
            )));
        }
        coarse.push(chunk[0] as usize);
        fine.push(chunk[1] as usize);
        images.push(pixels_from_record(&chunk[2..]));
    }
    Ok((images, coarse, fine))
}

/// Inverse of [`parse_cifar100`].
pub fn serialize_cifar100(images: &[Image], coarse: &[usize], fine: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(images.len() * CIFAR100_RECORD);
    for ((img, &c), &f) in images.iter().zip(coarse).zip(fine) {
        out.push(c as u8);
        out.push(f as u8);
        pixels_to_record(img, &mut out);
    }
    out
}

fn read_binary_files(path: &Path, pattern_hint: &str) -> Result<Vec<u8>> {
    if path.is_dir() {
        let mut names: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Data(format!(
                "no .bin files in {} (expected {pattern_hint})",
                path.display()
            )));
        }
        let mut bytes = Vec::new();
        for name in names {
            bytes.extend(std::fs::read(&name)?);
        }
        Ok(bytes)
    } else {
        Ok(std::fs::read(path)?)
    }
}

/// Load CIFAR-10 from a single batch file or a directory of `.bin` batches.
/// Used for meta-training only, so everything lands in one split.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let bytes = read_binary_files(path, "data_batch_*.bin")?;
    let (images, labels) = parse_cifar10(&bytes)?;
    Dataset::new(images, labels, 10, Split::MetaTrain)
}

/// Load CIFAR-100 and split its 100 fine classes 50/50 into meta-validation
/// and meta-test by a seeded shuffle.
pub fn load_cifar100(path: &Path, split_seed: u64) -> Result<(Dataset, Dataset)> {
    let bytes = read_binary_files(path, "train.bin")?;
    let (images, _coarse, fine) = parse_cifar100(&bytes)?;
    let full = Dataset::new(images, fine, 100, Split::MetaVal)?;

    let mut classes: Vec<usize> = (0..100).collect();
    let key = RngKey::from_seed(split_seed).child(crate::rng::tag::SPLIT);
    let mut rng = key.rng();
    use rand::seq::SliceRandom;
    classes.shuffle(&mut rng);
    let val = full.subset_by_classes(&classes[..50], Split::MetaVal)?;
    let test = full.subset_by_classes(&classes[50..], Split::MetaTest)?;
    Ok((val, test))
}

/// Partition a dataset's classes 50/25/25 into meta-train, meta-validation
/// and meta-test by a seeded shuffle. Class-disjoint by construction.
pub fn split_three_way(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let n = data.num_classes;
    if n < 4 {
        return Err(Error::Data(format!(
            "three-way class split needs at least 4 classes, got {n}"
        )));
    }
    let mut classes: Vec<usize> = (0..n).collect();
    let mut rng = RngKey::from_seed(seed).child(crate::rng::tag::SPLIT).rng();
    use rand::seq::SliceRandom;
    classes.shuffle(&mut rng);
    let n_train = n / 2;
    let n_val = (n - n_train) / 2;
    let train = data.subset_by_classes(&classes[..n_train], Split::MetaTrain)?;
    let val = data.subset_by_classes(&classes[n_train..n_train + n_val], Split::MetaVal)?;
    let test = data.subset_by_classes(&classes[n_train + n_val..], Split::MetaTest)?;
    Ok((train, val, test))
}

/// Parameters of the procedural shape corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Square image edge length.
    pub hw: usize,
    /// 0 = clean and centered; 1 = heavy jitter and noise.
    pub difficulty: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 12, per_class: 60, hw: 16, difficulty: 0.5 }
    }
}

/// Coverage of shape `class` at normalized coordinates `(u, v)` in `[-1, 1]`.
/// Classes are defined purely by geometry; color never identifies them.
fn shape_mask(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class % 12 {
        0 => r <= 0.8,                                               // disk
        1 => u.abs().max(v.abs()) <= 0.7,                            // square
        2 => v >= -0.75 && v <= 0.75 && u.abs() <= (v + 0.75) * 0.55, // triangle
        3 => u.abs() + v.abs() <= 0.9,                               // diamond
        4 => (0.45..=0.8).contains(&r),                              // ring
        5 => u.abs().max(v.abs()) <= 0.85 && (u.abs() <= 0.28 || v.abs() <= 0.28), // plus
        6 => u.abs().max(v.abs()) <= 0.85
            && ((u - v).abs() <= 0.38 || (u + v).abs() <= 0.38),     // diagonal cross
        7 => v.abs() <= 0.3 && u.abs() <= 0.9,                       // horizontal bar
        8 => u.abs() <= 0.3 && v.abs() <= 0.9,                       // vertical bar
        9 => {
            let m = u.abs().max(v.abs());
            (0.45..=0.8).contains(&m)                                // square frame
        }
        10 => {
            let d = |cx: f64| ((u - cx) * (u - cx) + v * v).sqrt();
            d(-0.45) <= 0.38 || d(0.45) <= 0.38                      // dot pair
        }
        _ => u.abs().max(v.abs()) <= 0.8 && (u > 0.0) == (v > 0.0),  // opposite quadrants
    }
}

/// Render one sample: a hue-randomized shape with jittered position and
/// scale, composited over per-pixel noise. 2x2 supersampling softens edges.
fn render_shape<R: Rng>(class: usize, hw: usize, difficulty: f64, rng: &mut R) -> Image {
    let jitter = 0.10 + 0.15 * difficulty;
    let noise_amp = 0.20 + 0.30 * difficulty;
    let scale = rng.random_range(0.60..=0.85);
    let cx = rng.random_range(-jitter..=jitter);
    let cy = rng.random_range(-jitter..=jitter);
    let hue = rng.random_range(0.0..1.0);
    let (sr, sg, sb) = hsv_to_rgb(hue, 0.9, 0.95);
    let shape_rgb = [sr, sg, sb];

    let mut img = Image::new(hw, hw);
    for y in 0..hw {
        for x in 0..hw {
            // Average the mask over 4 sub-pixel positions.
            let mut cov = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let v = ((y as f64 + oy) / hw as f64 * 2.0 - 1.0 - cy) / scale;
                let u = ((x as f64 + ox) / hw as f64 * 2.0 - 1.0 - cx) / scale;
                if shape_mask(class, u, v) {
                    cov += 0.25;
                }
            }
            for c in 0..3 {
                let bg = rng.random_range(0.0..=noise_amp);
                img.set(c, y, x, bg * (1.0 - cov) + shape_rgb[c] * cov);
            }
        }
    }
    img
}

/// Procedurally generate the shape corpus. The same `(spec, seed)` always
/// reproduces the same bytes; every image derives its own RNG stream from
/// `(class, index)`, so generation order cannot matter.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Dataset {
    let root = RngKey::from_seed(seed).child(crate::rng::tag::DATA);
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for class in 0..spec.classes {
        let class_key = root.child(class as u64);
        for idx in 0..spec.per_class {
            let mut rng = class_key.child(idx as u64).rng();
            images.push(render_shape(class, spec.hw, spec.difficulty, &mut rng));
            labels.push(class);
        }
    }
    Dataset::new(images, labels, spec.classes, Split::MetaTrain)
        .expect("generated labels are in range by construction")
}

/// Accuracy of a nearest-centroid pixel classifier fit on `train` and scored
/// on `test`. A sanity bound keeping the corpus honest: if raw pixel means
/// solved the task there would be nothing for a trunk to learn.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let classes = train.classes();
    let dim = train.images[0].data.len();
    let mut centroids = vec![vec![0.0; dim]; classes.len()];
    for (ci, &class) in classes.iter().enumerate() {
        let idxs = train.indices_of_class(class);
        for &i in &idxs {
            for (a, &b) in centroids[ci].iter_mut().zip(&train.images[i].data) {
                *a += b;
            }
        }
        let n = idxs.len().max(1) as f64;
        for a in &mut centroids[ci] {
            *a /= n;
        }
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        let img = &test.images[i].data;
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (ci, centroid) in centroids.iter().enumerate() {
            let d: f64 = centroid.iter().zip(img).map(|(&c, &p)| (c - p) * (c - p)).sum();
            if d < best_d {
                best_d = d;
                best = ci;
            }
        }
        if classes[best] == test.label(i) {
            correct += 1;
        }
    }
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn fixture_cifar10(records: usize, seed: u64) -> Vec<u8> {
        let mut rng = RngKey::from_seed(seed).rng();
        let mut bytes = Vec::with_capacity(records * CIFAR10_RECORD);
        for _ in 0..records {
            bytes.push((rng.next_u32() % 10) as u8);
            let mut pix = vec![0u8; PIXELS];
            rng.fill_bytes(&mut pix);
            bytes.extend(pix);
        }
        bytes
    }

    #[test]
    fn cifar10_known_bytes_parse_exactly() {
        // Two records: all-zero pixels with label 3, all-255 pixels label 9.
        let mut bytes = vec![3u8];
        bytes.extend(vec![0u8; PIXELS]);
        bytes.push(9);
        bytes.extend(vec![255u8; PIXELS]);
        let (images, labels) = parse_cifar10(&bytes).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert!(images[0].data.iter().all(|&v| v == 0.0));
        assert!(images[1].data.iter().all(|&v| v == 1.0));
        assert_eq!(images[0].h, 32);
    }

    #[test]
    fn cifar10_roundtrip_is_bit_exact() {
        let bytes = fixture_cifar10(7, 41);
        let (images, labels) = parse_cifar10(&bytes).unwrap();
        assert_eq!(serialize_cifar10(&images, &labels), bytes);
    }

    #[test]
    fn cifar10_rejects_malformed() {
        let mut bytes = fixture_cifar10(2, 42);
        bytes.pop(); // truncated
        let err = parse_cifar10(&bytes).unwrap_err().to_string();
        assert!(err.contains("3073"), "error should name the record size: {err}");

        let mut bytes = fixture_cifar10(2, 43);
        bytes[0] = 10; // label out of range
        assert!(parse_cifar10(&bytes).is_err());
    }

    #[test]
    fn cifar10_full_batch_histogram_matches_bytes() {
        // Histogram from the parser vs one computed straight off the bytes.
        let bytes = fixture_cifar10(10_000, 44);
        let (_, labels) = parse_cifar10(&bytes).unwrap();
        let mut parsed_hist = [0usize; 10];
        for &l in &labels {
            parsed_hist[l] += 1;
        }
        let mut byte_hist = [0usize; 10];
        for rec in 0..10_000 {
            byte_hist[bytes[rec * CIFAR10_RECORD] as usize] += 1;
        }
        assert_eq!(parsed_hist, byte_hist);
        assert_eq!(labels.len(), 10_000);
    }

    #[test]
    fn cifar100_roundtrip_and_validation() {
        let mut rng = RngKey::from_seed(50).rng();
        let mut bytes = Vec::new();
        for _ in 0..5 {
            bytes.push((rng.next_u32() % 20) as u8);
            bytes.push((rng.next_u32() % 100) as u8);
            let mut pix = vec![0u8; PIXELS];
            rng.fill_bytes(&mut pix);
            bytes.extend(pix);
        }
        let (images, coarse, fine) = parse_cifar100(&bytes).unwrap();
        assert_eq!(serialize_cifar100(&images, &coarse, &fine), bytes);

        let mut bad = bytes.clone();
        bad[0] = 20; // coarse label bound
        assert!(parse_cifar100(&bad).is_err());
    }

    #[test]
    fn cifar100_split_is_disjoint_and_seeded() {
        use std::io::Write;
        let mut rng = RngKey::from_seed(51).rng();
        let mut bytes = Vec::new();
        for i in 0..200usize {
            bytes.push((i % 20) as u8);
            bytes.push((i % 100) as u8);
            let mut pix = vec![0u8; PIXELS];
            rng.fill_bytes(&mut pix);
            bytes.extend(pix);
        }
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("train.bin");
        std::fs::File::create(&file).unwrap().write_all(&bytes).unwrap();

        let (val_a, test_a) = load_cifar100(&file, 9).unwrap();
        let (val_b, test_b) = load_cifar100(&file, 9).unwrap();
        assert_eq!(val_a.classes(), val_b.classes());
        assert_eq!(test_a.classes(), test_b.classes());

        let val_classes = val_a.classes();
        let test_classes = test_a.classes();
        assert_eq!(val_classes.len(), 50);
        assert_eq!(test_classes.len(), 50);
        assert!(val_classes.iter().all(|c| !test_classes.contains(c)));

        let (val_c, _) = load_cifar100(&file, 10).unwrap();
        assert_ne!(val_c.classes(), val_classes, "different seeds should split differently");
    }

    #[test]
    fn synthetic_generation_is_fast_and_deterministic() {
        let spec = SyntheticSpec { classes: 8, per_class: 100, hw: 16, difficulty: 0.5 };
        let start = std::time::Instant::now();
        let a = gen_synthetic(&spec, 1234);
        assert!(start.elapsed().as_secs() < 5, "generation took {:?}", start.elapsed());
        let b = gen_synthetic(&spec, 1234);
        assert_eq!(a.images, b.images);
        assert_eq!(a.len(), 800);

        let c = gen_synthetic(&spec, 1235);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_pixels_in_unit_range() {
        let data = gen_synthetic(&SyntheticSpec::default(), 7);
        for img in &data.images {
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn centroid_classifier_does_not_solve_the_corpus() {
        let spec = SyntheticSpec::default();
        let data = gen_synthetic(&spec, 99);
        // Odd-indexed images as train, even as test, same classes.
        let mut train_imgs = Vec::new();
        let mut train_labels = Vec::new();
        let mut test_imgs = Vec::new();
        let mut test_labels = Vec::new();
        for i in 0..data.len() {
            if i % 2 == 0 {
                test_imgs.push(data.images[i].clone());
                test_labels.push(data.label(i));
            } else {
                train_imgs.push(data.images[i].clone());
                train_labels.push(data.label(i));
            }
        }
        let train = Dataset::new(train_imgs, train_labels, 12, Split::MetaTrain).unwrap();
        let test = Dataset::new(test_imgs, test_labels, 12, Split::MetaTest).unwrap();
        let acc = nearest_centroid_accuracy(&train, &test);
        assert!(acc < 0.9, "pixel centroids should not solve the corpus: {acc}");
        assert!(acc > 1.0 / 12.0, "but they should beat chance: {acc}");
    }

    #[test]
    fn label_reads_are_counted() {
        let data = gen_synthetic(&SyntheticSpec { classes: 3, per_class: 4, hw: 8, difficulty: 0.3 }, 1);
        assert_eq!(data.label_reads(), 0);
        let _ = data.label(0);
        let _ = data.label(5);
        assert_eq!(data.label_reads(), 2);
        let fresh = data.clone();
        assert_eq!(fresh.label_reads(), 0);
    }

    #[test]
    fn subset_keeps_global_ids() {
        let data = gen_synthetic(&SyntheticSpec { classes: 6, per_class: 3, hw: 8, difficulty: 0.2 }, 2);
        let sub = data.subset_by_classes(&[4, 5], Split::MetaTest).unwrap();
        assert_eq!(sub.classes(), vec![4, 5]);
        assert_eq!(sub.len(), 6);
        assert!(data.subset_by_classes(&[9], Split::MetaTest).is_err());
    }

    #[test]
    fn three_way_split_is_disjoint_deterministic_and_covers_everything() {
        let data = gen_synthetic(&SyntheticSpec { classes: 9, per_class: 4, hw: 8, difficulty: 0.2 }, 3);
        let (train, val, test) = split_three_way(&data, 17).unwrap();
        assert_eq!(train.split, Split::MetaTrain);
        assert_eq!(val.split, Split::MetaVal);
        assert_eq!(test.split, Split::MetaTest);
        assert_eq!((train.classes().len(), val.classes().len(), test.classes().len()), (4, 2, 3));
        let mut all: Vec<usize> = [train.classes(), val.classes(), test.classes()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>(), "splits must partition the classes");
        assert_eq!(train.len() + val.len() + test.len(), data.len());

        let (train2, ..) = split_three_way(&data, 17).unwrap();
        assert_eq!(train.classes(), train2.classes());
        let (train3, ..) = split_three_way(&data, 18).unwrap();
        assert_ne!(train.classes(), train3.classes(), "seed must steer the partition");

        let tiny = gen_synthetic(&SyntheticSpec { classes: 3, per_class: 2, hw: 8, difficulty: 0.2 }, 3);
        assert!(split_three_way(&tiny, 0).is_err());
    }
}
