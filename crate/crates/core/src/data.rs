//! Datasets: MNIST-format IDX files, synthetic Gaussian blobs, and the
//! augmentation pipeline for contrastive pairs.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::Rng;

use crate::error::{contract, Result, UrkleError};
use crate::rng::{normal, seeded};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: String,
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: impl Into<String>,
        images: Tensor<f32>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(UrkleError::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(l) = &labels {
            if l.len() != images.batch() {
                return Err(UrkleError::Consistency(format!(
                    "{} images but {} labels",
                    images.batch(),
                    l.len()
                )));
            }
            if let Some(&label) = l.iter().find(|&&y| y >= num_classes) {
                return Err(UrkleError::InvalidLabel { label, num_classes });
            }
        }
        Ok(Self {
            name: name.into(),
            split: split.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn item_shape(&self) -> [usize; 3] {
        self.images.item_shape()
    }

    /// Images (and labels, when present) at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Option<Vec<usize>>) {
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        (self.images.gather(indices), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            name: self.name.clone(),
            split: self.split.clone(),
            images,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// The first `n` items.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// A class-balanced subset of at most `budget` labeled items, picked by
    /// a seeded shuffle. Items keep their original relative order.
    pub fn label_budget(&self, budget: usize, seed: u64) -> Result<Dataset> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| UrkleError::Config("a label budget needs labeled data".into()))?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        shuffle(&mut order, &mut seeded(seed));
        let per_class = budget / self.num_classes;
        let extra = budget % self.num_classes;
        let mut taken = vec![0usize; self.num_classes];
        let mut chosen = Vec::with_capacity(budget);
        for i in order {
            let y = labels[i];
            let quota = per_class + usize::from(y < extra);
            if taken[y] < quota {
                taken[y] += 1;
                chosen.push(i);
            }
        }
        chosen.sort_unstable();
        Ok(self.subset(&chosen))
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if let Some(&label) = self.labels.iter().flatten().find(|&&y| y >= num_classes) {
            return Err(UrkleError::InvalidLabel { label, num_classes });
        }
        self.num_classes = num_classes;
        Ok(self)
    }
}

/// Fisher–Yates shuffle.
pub fn shuffle<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| UrkleError::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(UrkleError::Parse {
                offset: self.bytes.len(),
                message: format!("{} truncated: needed {} more bytes", self.what, n - (self.bytes.len() - self.pos)),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(UrkleError::Format(format!(
                "{}: magic 0x{found:08x}, expected 0x{expected:08x}",
                self.what
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(UrkleError::Parse {
                offset: self.pos,
                message: format!("{}: {} trailing bytes", self.what, self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Decodes an IDX image file into (n, 1, rows, cols) pixels in [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = IdxReader {
        bytes,
        pos: 0,
        what: "image file",
    };
    r.magic(IDX_IMAGES_MAGIC)?;
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.take(n * rows * cols)?;
    r.finish()?;
    let pixels = data.iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::from_vec([n, 1, rows, cols], pixels)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = IdxReader {
        bytes,
        pos: 0,
        what: "label file",
    };
    r.magic(IDX_LABELS_MAGIC)?;
    let n = r.u32()? as usize;
    let data = r.take(n)?;
    r.finish()?;
    Ok(data.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image/label pair (plain or gzip-compressed). The class
/// count is at least 10 and covers every label present.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gzip(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gzip(labels_path)?)?;
    if images.batch() != labels.len() {
        return Err(UrkleError::Consistency(format!(
            "{} has {} images but {} has {} labels",
            images_path.display(),
            images.batch(),
            labels_path.display(),
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, "", images, Some(labels), num_classes)
}

/// Class means of a regular simplex with pairwise distance `separation`,
/// expressed in the first `num_classes - 1` coordinates of `dim`.
pub fn simplex_means(num_classes: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    if num_classes == 0 {
        return Err(UrkleError::InvalidArgument("num_classes must be positive".into()));
    }
    if dim + 1 < num_classes {
        return Err(UrkleError::InvalidArgument(format!(
            "{num_classes} equidistant means need dim >= {}",
            num_classes - 1
        )));
    }
    let c = num_classes;
    // Centered basis vectors lie in a (c-1)-dim subspace; express them in an
    // orthonormal basis of it.
    let centered: Vec<Vec<f64>> = (0..c)
        .map(|k| (0..c).map(|j| f64::from(u8::from(j == k)) - 1.0 / c as f64).collect())
        .collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in &centered {
        let mut u = v.clone();
        for b in &basis {
            let d: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 && basis.len() + 1 < c {
            u.iter_mut().for_each(|x| *x /= n);
            basis.push(u);
        }
    }
    let scale = separation / 2f64.sqrt();
    Ok(centered
        .iter()
        .map(|v| {
            let mut m = vec![0.0; dim];
            for (k, b) in basis.iter().enumerate() {
                m[k] = scale * v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
            m
        })
        .collect())
}

/// Factor mapping raw blob coordinates into pixel units:
/// `pixel = 0.5 + raw * blob_pixel_scale(separation)`.
pub fn blob_pixel_scale(separation: f64) -> f64 {
    1.0 / (2.0 * (separation / 2.0 + 4.0))
}

/// Unit-variance Gaussian clusters around regular-simplex means, mapped
/// into [0, 1] by [`blob_pixel_scale`] and laid out as (1, dim, 1) images.
/// Labels cycle through the classes.
pub fn synth_blobs(n: usize, num_classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(UrkleError::InvalidArgument("separation must be finite and non-negative".into()));
    }
    if dim == 0 {
        return Err(UrkleError::InvalidArgument("dim must be positive".into()));
    }
    let means = simplex_means(num_classes, dim, separation)?;
    let scale = blob_pixel_scale(separation);
    let mut rng = seeded(seed);
    let mut pixels = Vec::with_capacity(n * dim);
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    for &y in &labels {
        for m in &means[y] {
            let raw = m + normal::<f64, _>(&mut rng);
            pixels.push((0.5 + raw * scale).clamp(0.0, 1.0) as f32);
        }
    }
    let images = Tensor::from_vec([n, 1, dim, 1], pixels)?;
    Dataset::new("blobs", "", images, Some(labels), num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    pub crop: bool,
    pub crop_padding: usize,
    pub flip: bool,
    pub flip_probability: f64,
    pub jitter: bool,
    pub jitter_strength: f64,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            crop: false,
            crop_padding: 0,
            flip: false,
            flip_probability: 0.0,
            jitter: false,
            jitter_strength: 0.0,
        }
    }

    /// Pad-and-crop plus brightness/contrast jitter; no flips, since
    /// mirrored digits are different symbols.
    pub fn digits() -> Self {
        Self {
            crop: true,
            crop_padding: 2,
            flip: false,
            flip_probability: 0.0,
            jitter: true,
            jitter_strength: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) || !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(UrkleError::Config(
                "flip_probability and jitter_strength must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn augment_item<R: Rng + ?Sized>(item: &[f32], shape: [usize; 3], policy: &AugmentationPolicy, rng: &mut R) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = item.to_vec();
    if policy.crop && policy.crop_padding > 0 {
        let p = policy.crop_padding as i64;
        let oy = (rng.random_range(0..=2 * p) - p) as isize;
        let ox = (rng.random_range(0..=2 * p) - p) as isize;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + oy;
                    let sx = x as isize + ox;
                    out[(ch * h + y) * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        item[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    if policy.flip && policy.flip_probability > 0.0 && rng.random_bool(policy.flip_probability) {
        for row in out.chunks_mut(w) {
            row.reverse();
        }
    }
    if policy.jitter && policy.jitter_strength > 0.0 {
        let s = policy.jitter_strength;
        let brightness = rng.random_range(1.0 - s..=1.0 + s) as f32;
        let contrast = rng.random_range(1.0 - s..=1.0 + s) as f32;
        let mean = out.iter().sum::<f32>() / out.len() as f32;
        for v in &mut out {
            *v = (((*v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0);
        }
    }
    out
}

/// Two independently augmented views of every item of `x`.
pub fn make_pair<R: Rng + ?Sized>(
    x: &Tensor<f32>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    policy.validate()?;
    let shape = x.item_shape();
    let mut v1 = Vec::with_capacity(x.len());
    let mut v2 = Vec::with_capacity(x.len());
    for i in 0..x.batch() {
        v1.extend(augment_item(x.item(i), shape, policy, rng));
        v2.extend(augment_item(x.item(i), shape, policy, rng));
    }
    if x.is_empty() {
        return Err(contract("make_pair needs at least one input"));
    }
    Ok((Tensor::from_vec(x.shape(), v1)?, Tensor::from_vec(x.shape(), v2)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    // Bytes of a 2-image 2×2 set and its labels, as written by:
    //   struct.pack(">IIII", 0x803, 2, 2, 2) + bytes([0, 255, 128, 1, 10, 20, 30, 40])
    //   struct.pack(">II", 0x801, 2) + bytes([7, 3])
    const IMAGES: [u8; 24] = [
        0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 1, 10, 20, 30, 40,
    ];
    const LABELS: [u8; 10] = [0, 0, 8, 1, 0, 0, 0, 2, 7, 3];

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn hand_built_idx_pair() {
        let dir = tempfile::tempdir().unwrap();
        let d = load_idx(&write(dir.path(), "i", &IMAGES), &write(dir.path(), "l", &LABELS)).unwrap();
        assert_eq!(d.images().shape(), [2, 1, 2, 2]);
        let want = [0.0, 1.0, 128.0 / 255.0, 1.0 / 255.0, 10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0, 40.0 / 255.0];
        assert_eq!(d.images().data(), &want.map(|v: f64| v as f32));
        assert_eq!(d.images().data()[0], 0.0);
        assert_eq!(d.images().data()[1], 1.0);
        assert_eq!(d.labels().unwrap(), &[7, 3]);
        assert_eq!(d.num_classes(), 10);
    }

    #[test]
    fn gzip_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&IMAGES).unwrap();
        let zipped = gz.finish().unwrap();
        let a = load_idx(&write(dir.path(), "i.gz", &zipped), &write(dir.path(), "l", &LABELS)).unwrap();
        let b = load_idx(&write(dir.path(), "i", &IMAGES), &write(dir.path(), "l", &LABELS)).unwrap();
        assert_eq!(a.images(), b.images());
    }

    #[test]
    fn idx_failures() {
        let dir = tempfile::tempdir().unwrap();
        let i = write(dir.path(), "i", &IMAGES);
        let l = write(dir.path(), "l", &LABELS);
        let err = load_idx(&l, &i).unwrap_err();
        assert!(matches!(&err, UrkleError::Format(m) if m.contains("0x00000801")), "{err}");
        let short = write(dir.path(), "s", &IMAGES[..20]);
        assert!(matches!(load_idx(&short, &l), Err(UrkleError::Parse { offset: 20, .. })));
        let one = write(dir.path(), "one", &[0, 0, 8, 1, 0, 0, 0, 1, 5]);
        assert!(matches!(load_idx(&i, &one), Err(UrkleError::Consistency(_))));
        assert!(matches!(load_idx(&dir.path().join("missing"), &l), Err(UrkleError::Io(_))));
    }

    #[test]
    fn blobs_are_seeded_and_separable() {
        let a = synth_blobs(2000, 2, 2, 10.0, 5).unwrap();
        assert_eq!(a, synth_blobs(2000, 2, 2, 10.0, 5).unwrap());
        assert_eq!(a.item_shape(), [1, 2, 1]);
        // Nearest-mean oracle with the generating means.
        let scale = blob_pixel_scale(10.0);
        let means = simplex_means(2, 2, 10.0).unwrap();
        let dist = ((means[0][0] - means[1][0]).powi(2) + (means[0][1] - means[1][1]).powi(2)).sqrt();
        assert!((dist - 10.0).abs() < 1e-12);
        let labels = a.labels().unwrap();
        let correct = (0..a.len())
            .filter(|&i| {
                let x = a.images().item(i);
                let d = |m: &Vec<f64>| {
                    (0..2).map(|j| (f64::from(x[j]) - (0.5 + m[j] * scale)).powi(2)).sum::<f64>()
                };
                let pred = if d(&means[0]) <= d(&means[1]) { 0 } else { 1 };
                pred == labels[i]
            })
            .count();
        assert!(correct as f64 / a.len() as f64 >= 0.999);
    }

    #[test]
    fn simplex_means_are_equidistant() {
        for (c, dim) in [(2, 1), (3, 2), (4, 5), (10, 12)] {
            let m = simplex_means(c, dim, 3.0).unwrap();
            for i in 0..c {
                for j in 0..i {
                    let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!((d - 3.0).abs() < 1e-9, "{c} classes in {dim}: {d}");
                }
            }
        }
        assert!(simplex_means(4, 2, 1.0).is_err());
    }

    #[test]
    fn zero_separation_gives_identical_classes() {
        let d = synth_blobs(20_000, 2, 3, 0.0, 1).unwrap();
        let labels = d.labels().unwrap();
        for j in 0..3 {
            let mut sum = [0.0f64; 2];
            let mut sq = [0.0f64; 2];
            let mut cnt = [0.0f64; 2];
            for i in 0..d.len() {
                let v = f64::from(d.images().item(i)[j]);
                sum[labels[i]] += v;
                sq[labels[i]] += v * v;
                cnt[labels[i]] += 1.0;
            }
            let mean = |k: usize| sum[k] / cnt[k];
            let var = |k: usize| sq[k] / cnt[k] - mean(k).powi(2);
            let z = (mean(0) - mean(1)) / (var(0) / cnt[0] + var(1) / cnt[1]).sqrt();
            assert!(z.abs() < 4.0, "coordinate {j}: z = {z}");
        }
    }

    #[test]
    fn identity_policy_and_determinism() {
        let x = synth_blobs(3, 2, 4, 2.0, 0).unwrap().images().clone();
        let (a, b) = make_pair(&x, &AugmentationPolicy::identity(), &mut seeded(0)).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
        let img = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|v| v as f32 / 16.0).collect()).unwrap();
        let p1 = make_pair(&img, &AugmentationPolicy::digits(), &mut seeded(3)).unwrap();
        let p2 = make_pair(&img, &AugmentationPolicy::digits(), &mut seeded(3)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let (h, w, p) = (9usize, 9usize, 2usize);
        let mut img = vec![0.0f32; h * w];
        img[4 * w + 4] = 1.0;
        let policy = AugmentationPolicy {
            crop: true,
            crop_padding: p,
            ..AugmentationPolicy::identity()
        };
        let mut rng = seeded(17);
        let cells = (2 * p + 1) * (2 * p + 1);
        let mut hist = vec![0usize; cells];
        let draws = 10_000;
        for _ in 0..draws {
            let out = augment_item(&img, [1, h, w], &policy, &mut rng);
            let at = out.iter().position(|&v| v == 1.0).unwrap();
            let (y, x) = (at / w, at % w);
            hist[(y + p - 4) * (2 * p + 1) + (x + p - 4)] += 1;
        }
        let expected = draws as f64 / cells as f64;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // Upper 1% point of chi-square with 24 degrees of freedom.
        assert!(chi2 < 42.980, "chi2 = {chi2}");
    }

    #[test]
    fn label_budget_is_balanced() {
        let d = synth_blobs(100, 4, 3, 1.0, 0).unwrap();
        let s = d.label_budget(10, 1).unwrap();
        assert_eq!(s.len(), 10);
        let mut counts = [0; 4];
        s.labels().unwrap().iter().for_each(|&y| counts[y] += 1);
        assert_eq!(counts, [3, 3, 2, 2]);
        assert_eq!(s, d.label_budget(10, 1).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn augmented_pixels_stay_in_range(
            seed in 0u64..10_000,
            pixels in prop::collection::vec(0.0f32..=1.0, 2 * 16),
            pad in 0usize..4,
            flip in 0.0f64..=1.0,
            jitter in 0.0f64..=1.0,
        ) {
            let x = Tensor::from_vec([2, 1, 4, 4], pixels).unwrap();
            let policy = AugmentationPolicy {
                crop: true, crop_padding: pad, flip: true, flip_probability: flip, jitter: true, jitter_strength: jitter,
            };
            let (a, b) = make_pair(&x, &policy, &mut seeded(seed)).unwrap();
            prop_assert!(a.data().iter().chain(b.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
