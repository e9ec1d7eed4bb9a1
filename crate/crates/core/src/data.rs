//! Datasets, IDX parsing, synthetic clusters, label noise, splits and
//! augmentation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MAX_SHIFT_PX: usize = 4;

/// Images `N×C×H×W` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    clean_labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::invalid("images", "expected an N×C×H×W tensor"));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", &[images.shape()[0]], &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            clean_labels: None,
        })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Labels before noise injection, if any was applied.
    pub fn clean_labels(&self) -> Option<&[usize]> {
        self.clean_labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.batch(indices);
        Self {
            images,
            labels,
            num_classes: self.num_classes,
            clean_labels: self
                .clean_labels
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    /// Copy with the first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Applies symmetric label noise; returns the flip mask.
    pub fn with_noise(mut self, noise: &NoiseSpec) -> Result<(Self, Vec<bool>)> {
        noise.validate()?;
        let clean = self.clean_labels.take().unwrap_or_else(|| self.labels.clone());
        let mut rng = seed::stream(noise.seed, seed::STREAM_NOISE);
        let (noisy, flips) = inject_label_noise(&clean, noise.epsilon, self.num_classes, &mut rng)?;
        self.labels = noisy;
        self.clean_labels = (noise.epsilon > 0.0).then_some(clean);
        Ok((self, flips))
    }

    /// Replaces images with a transformed copy of the same shape.
    pub fn map_images(&self, f: impl FnOnce(&Tensor<f32>) -> Tensor<f32>) -> Result<Self> {
        let images = f(&self.images);
        if images.shape() != self.images.shape() {
            return Err(Error::shape("map_images", self.images.shape(), images.shape()));
        }
        Ok(Self {
            images,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub epsilon: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid("epsilon", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// With probability `epsilon` each label is replaced by a uniform draw over
/// the other `classes − 1` classes.
pub fn inject_label_noise<R: Rng + ?Sized>(
    labels: &[usize],
    epsilon: f64,
    classes: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid("epsilon", "must lie in [0, 1]"));
    }
    if epsilon > 0.0 && classes < 2 {
        return Err(Error::invalid("classes", "label noise needs at least two classes"));
    }
    let mut noisy = labels.to_vec();
    let mut flips = vec![false; labels.len()];
    if epsilon == 0.0 {
        return Ok((noisy, flips));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        // draw both values every time so the stream position never depends on ε
        let u: f64 = rng.random();
        let other = rng.random_range(0..classes - 1);
        if u < epsilon {
            noisy[i] = if other >= l { other + 1 } else { other };
            flips[i] = true;
        }
    }
    Ok((noisy, flips))
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("truncated header at byte {at}")))
}

/// Parses an IDX image file into `N×1×H×W` pixels scaled to [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx(format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let w = read_u32(bytes, 12)? as usize;
    let payload = &bytes[16..];
    let want = n * h * w;
    if payload.len() != want {
        return Err(Error::Idx(format!("image payload has {} bytes, header implies {want}", payload.len())));
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new([n, 1, h, w], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx(format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Idx(format!("label payload has {} bytes, header implies {n}", payload.len())));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn dataset_from_idx(image_bytes: &[u8], label_bytes: &[u8], num_classes: usize) -> Result<Dataset> {
    let images = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Idx(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    Dataset::new(images, labels, num_classes)
}

/// Serializes `N×1×H×W` pixels (rounded to u8) as an IDX image file.
pub fn encode_idx_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::invalid("images", "IDX holds single-channel N×1×H×W data"));
    }
    let mut out = Vec::with_capacity(16 + images.numel());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&p| libm::roundf(p.clamp(0.0, 1.0) * 255.0) as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::invalid("labels", "IDX labels are single bytes"))?;
        out.push(b);
    }
    Ok(out)
}

/// `C` Gaussian clusters with unit spread. Centres are `separation` times a
/// random unit vector, so `separation = 0` makes the classes identical.
pub fn synth_clusters(n: usize, classes: usize, sample_shape: &[usize], separation: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::invalid("n", "need at least one sample per class"));
    }
    let shape: Vec<usize> = match sample_shape.len() {
        1 => vec![1, 1, sample_shape[0]],
        3 => sample_shape.to_vec(),
        _ => return Err(Error::invalid("sample_shape", "expected [D] or [C, H, W]")),
    };
    let dim: usize = shape.iter().product();
    let mut rng = seed::stream(seed, seed::STREAM_DATA);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
            v.into_iter().map(|x| x / norm * separation).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for &m in &centres[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((m + z) as f32);
        }
    }
    let mut full = vec![n];
    full.extend_from_slice(&shape);
    Dataset::new(Tensor::new(full, data)?, labels, classes)
}

/// Seeded shuffle split into `(train, val)` with `round(N·val_fraction)`
/// validation samples.
pub fn split<R: Rng + ?Sized>(dataset: &Dataset, val_fraction: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid("val_fraction", "must lie in (0, 1)"));
    }
    let n = dataset.len();
    let n_val = libm::round(n as f64 * val_fraction) as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::invalid("val_fraction", "split leaves an empty side"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let (val, train) = idx.split_at(n_val);
    Ok((dataset.subset(train), dataset.subset(val)))
}

/// Per-channel affine normalisation `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Channel statistics of `images` (population std).
    pub fn fit(images: &Tensor<f32>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::EmptyDataset);
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for (i, chunk) in images.data().chunks(hw).enumerate() {
            let ch = i % c;
            for &v in chunk {
                mean[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        let count = (n * hw) as f64;
        let mut out = Self {
            mean: Vec::with_capacity(c),
            std: Vec::with_capacity(c),
        };
        for ch in 0..c {
            let m = mean[ch] / count;
            let var = (sq[ch] / count - m * m).max(0.0);
            out.mean.push(m as f32);
            out.std.push(libm::sqrt(var).max(1e-6) as f32);
        }
        Ok(out)
    }

    pub fn apply(&self, images: &mut Tensor<f32>) -> Result<()> {
        let s = images.shape().to_vec();
        if s.len() != 4 || s[1] != self.mean.len() {
            return Err(Error::shape("normalize", &[0, self.mean.len(), 0, 0], &s));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        for (i, chunk) in images.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            let (m, sd) = (self.mean[ch], self.std[ch]);
            for v in chunk {
                *v = (*v - m) / sd;
            }
        }
        Ok(())
    }
}

/// Training-time augmentation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentSpec {
    pub horizontal_flip: bool,
    /// Maximum absolute shift per axis, in pixels.
    pub shift_px: usize,
    pub normalize: Option<Normalization>,
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shift_px > MAX_SHIFT_PX {
            return Err(Error::invalid("shift_px", "at most 4 pixels"));
        }
        Ok(())
    }

    pub fn is_random(&self) -> bool {
        self.horizontal_flip || self.shift_px > 0
    }
}

/// Shifts one `H×W` plane by `(dy, dx)` with zero fill: `out[y][x] = in[y−dy][x−dx]`.
pub fn shift_plane(src: &[f32], dst: &mut [f32], h: usize, w: usize, dy: isize, dx: isize, flip: bool) {
    for y in 0..h {
        let sy = y as isize - dy;
        for x in 0..w {
            let sx = x as isize - dx;
            dst[y * w + x] = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                0.0
            } else {
                let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                src[sy as usize * w + sx]
            };
        }
    }
}

/// Per-sample random flip (p = 0.5) and shift in `[−shift_px, shift_px]` per
/// axis with zero padding, followed by normalisation.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor<f32>, spec: &AugmentSpec, rng: &mut R) -> Result<Tensor<f32>> {
    spec.validate()?;
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::invalid("batch", "expected an N×C×H×W tensor"));
    }
    let mut out = if spec.is_random() {
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut data = vec![0f32; batch.numel()];
        let k = spec.shift_px as isize;
        for i in 0..n {
            let flip = spec.horizontal_flip && rng.random_bool(0.5);
            let (dy, dx) = if k > 0 {
                (rng.random_range(-k as i64..=k as i64) as isize, rng.random_range(-k as i64..=k as i64) as isize)
            } else {
                (0, 0)
            };
            for ch in 0..c {
                let off = (i * c + ch) * h * w;
                shift_plane(&batch.data()[off..off + h * w], &mut data[off..off + h * w], h, w, dy, dx, flip);
            }
        }
        Tensor::new(s.to_vec(), data)?
    } else {
        batch.clone()
    };
    if let Some(norm) = &spec.normalize {
        norm.apply(&mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn noise_extremes() {
        let labels: Vec<usize> = (0..200).map(|i| i % 10).collect();
        let (same, flips) = inject_label_noise(&labels, 0.0, 10, &mut rng(1)).unwrap();
        assert_eq!(same, labels);
        assert!(flips.iter().all(|&f| !f));
        let (all, flips) = inject_label_noise(&labels, 1.0, 10, &mut rng(1)).unwrap();
        assert!(all.iter().zip(&labels).all(|(a, b)| a != b));
        assert!(flips.iter().all(|&f| f));
        assert!(all.iter().all(|&l| l < 10));
        assert!(inject_label_noise(&labels, 0.5, 1, &mut rng(1)).is_err());
        assert!(inject_label_noise(&labels, 1.5, 10, &mut rng(1)).is_err());
    }

    #[test]
    fn noise_rate_within_binomial_interval() {
        let labels = vec![3usize; 10_000];
        let (noisy, flips) = inject_label_noise(&labels, 0.2, 10, &mut rng(42)).unwrap();
        let count = flips.iter().filter(|&&f| f).count() as f64;
        // 99.9% normal interval: 2000 ± 3.29·sqrt(10000·0.2·0.8)
        let half = 3.29 * (10_000.0f64 * 0.16).sqrt();
        assert!((count - 2000.0).abs() <= half, "{count}");
        for (i, &f) in flips.iter().enumerate() {
            assert_eq!(f, noisy[i] != labels[i]);
        }
    }

    #[test]
    fn idx_fixture_round_trip() {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 4, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4, 255, 255, 0, 0, 10, 20, 30, 40]);
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, 4] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(&[7, 0, 9, 3]);
        let ds = dataset_from_idx(&img, &lab, 10).unwrap();
        assert_eq!(ds.images().shape(), &[4, 1, 2, 2]);
        assert_eq!(&ds.images().data()[..4], &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels(), &[7, 0, 9, 3]);
        assert_eq!(encode_idx_images(ds.images()).unwrap(), img);
        assert_eq!(encode_idx_labels(ds.labels()).unwrap(), lab);

        assert!(dataset_from_idx(&[], &lab, 10).is_err());
        assert!(dataset_from_idx(&img[..20], &lab, 10).is_err());
        let mut short = lab[..8 + 3].to_vec();
        short[7] = 3;
        assert!(matches!(dataset_from_idx(&img, &short, 10), Err(Error::Idx(_))));
        assert!(matches!(dataset_from_idx(&lab, &img, 10), Err(Error::Idx(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = synth_clusters(1000, 10, &[4], 1.0, 3).unwrap();
        let (tr, va) = split(&ds, 0.1, &mut rng(5)).unwrap();
        assert_eq!((tr.len(), va.len()), (900, 100));
        let (tr2, va2) = split(&ds, 0.1, &mut rng(5)).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        assert!(split(&ds, 0.0, &mut rng(5)).is_err());
        assert!(split(&ds.take(3), 0.1, &mut rng(5)).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_clusters(50, 5, &[1, 4, 4], 3.0, 9).unwrap();
        let b = synth_clusters(50, 5, &[1, 4, 4], 3.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images().shape(), &[50, 1, 4, 4]);
        assert!(synth_clusters(3, 5, &[4], 1.0, 0).is_err());
    }

    #[test]
    fn augmentation_semantics() {
        let x = Tensor::new([1, 1, 1, 5], vec![1.0f32, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(augment(&x, &AugmentSpec::default(), &mut rng(0)).unwrap(), x);

        let mut a = vec![0f32; 5];
        shift_plane(x.data(), &mut a, 1, 5, 0, 4, false);
        assert_eq!(a, [0.0, 0.0, 0.0, 0.0, 1.0]);
        let mut b = vec![0f32; 5];
        shift_plane(&a, &mut b, 1, 5, 0, -4, false);
        assert_eq!(b, [1.0, 0.0, 0.0, 0.0, 0.0]);
        shift_plane(x.data(), &mut b, 1, 5, 0, 0, true);
        assert_eq!(b, [5.0, 4.0, 3.0, 2.0, 1.0]);

        let bad = AugmentSpec {
            shift_px: 5,
            ..Default::default()
        };
        assert!(augment(&x, &bad, &mut rng(0)).is_err());
    }

    #[test]
    fn normalization_centres_channels() {
        let ds = synth_clusters(200, 4, &[3, 4, 4], 2.0, 1).unwrap();
        let norm = Normalization::fit(ds.images()).unwrap();
        let mut x = ds.images().clone();
        norm.apply(&mut x).unwrap();
        let again = Normalization::fit(&x).unwrap();
        for ch in 0..3 {
            assert!(again.mean[ch].abs() < 1e-3);
            assert!((again.std[ch] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn noise_records_clean_labels() {
        let ds = synth_clusters(100, 10, &[2], 1.0, 0).unwrap();
        let (clean, _) = ds.clone().with_noise(&NoiseSpec { epsilon: 0.0, seed: 1 }).unwrap();
        assert!(clean.clean_labels().is_none());
        let (noisy, flips) = ds.clone().with_noise(&NoiseSpec { epsilon: 0.5, seed: 1 }).unwrap();
        assert_eq!(noisy.clean_labels().unwrap(), ds.labels());
        assert!(flips.iter().any(|&f| f));
    }
}
