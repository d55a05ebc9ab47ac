//! Dataset ingestion: IDX container parsing (the MNIST/FashionMNIST binary
//! format), deterministic batch iteration, and a synthetic blob fixture for
//! fast tests.
//!
//! The IDX parsers treat file bytes as untrusted input: all counts are
//! validated against the actual payload length before allocation, and any
//! mismatch is a hard error rather than silent truncation.

use crate::error::Error;
use crate::model::{IMAGE_PIXELS, IMAGE_SIDE};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 2051; // 0x00000803
pub const IDX_LABELS_MAGIC: u32 = 2049; // 0x00000801

/// In-memory dataset: images normalized to `[-1, 1]`, one label byte per
/// image.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `count * 28*28*channels` floats, image-major.
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_width(&self) -> usize {
        IMAGE_PIXELS * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let w = self.image_width();
        &self.images[i * w..(i + 1) * w]
    }

    /// Copy of the first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_width()].to_vec(),
            labels: self.labels[..n].to_vec(),
            channels: self.channels,
            n_classes: self.n_classes,
        }
    }
}

fn be_u32(buf: &[u8], off: usize, what: &str) -> Result<u32, Error> {
    buf.get(off..off + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::Load(format!("truncated IDX file: {what} needs 4 bytes at offset {off}")))
}

/// Parse an IDX image file (magic 2051, dims `count x 28 x 28`). Pixels map
/// through `v/127.5 - 1` into `[-1, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f32>, usize), Error> {
    let magic = be_u32(bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Load(format!(
            "bad image magic {magic} (0x{magic:08x}) at offset 0, expected {IDX_IMAGES_MAGIC}"
        )));
    }
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::Load(format!(
            "unsupported image size {rows}x{cols} at offset 8, expected {IMAGE_SIDE}x{IMAGE_SIDE}"
        )));
    }
    let need = count
        .checked_mul(IMAGE_PIXELS)
        .ok_or_else(|| Error::Load("image count overflows".into()))?;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::Load(format!(
            "image payload is {} bytes at offset 16, header promises {need}",
            payload.len()
        )));
    }
    let images = payload.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
    Ok((images, count))
}

/// Parse an IDX label file (magic 2049).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, Error> {
    let magic = be_u32(bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Load(format!(
            "bad label magic {magic} (0x{magic:08x}) at offset 0, expected {IDX_LABELS_MAGIC}"
        )));
    }
    let count = be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Load(format!(
            "label payload is {} bytes at offset 8, header promises {count}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

/// Load a paired IDX image/label dataset from disk.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, Error> {
    let img_bytes = std::fs::read(images_path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", images_path.display())))?;
    let lbl_bytes = std::fs::read(labels_path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", labels_path.display())))?;
    let (images, n_images) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != n_images {
        return Err(Error::Load(format!(
            "{n_images} images but {} labels",
            labels.len()
        )));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    Ok(Dataset { images, labels, channels: 1, n_classes })
}

/// Deterministic per-epoch batch order: Fisher-Yates shuffle keyed by
/// `(seed, epoch)`, final short batch dropped.
pub fn batch_indices(len: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<u32>> {
    assert!(batch >= 1, "batch size must be at least 1");
    let mut order: Vec<u32> = (0..len as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch)
        .map(|c| c.to_vec())
        .collect()
}

/// Gather one batch into a dense `[batch, 28*28*ch]` buffer plus labels.
pub fn gather_batch(ds: &Dataset, idx: &[u32]) -> (Vec<f32>, Vec<u32>) {
    let w = ds.image_width();
    let mut out = Vec::with_capacity(idx.len() * w);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        out.extend_from_slice(ds.image(i as usize));
        labels.push(ds.labels[i as usize] as u32);
    }
    (out, labels)
}

/// Class-conditioned Gaussian blob images: class `k` is a blob at a fixed
/// position on a circle, with deterministic per-sample amplitude and width
/// jitter. Linearly separable by construction, so a trained extractor can
/// sanity-check the metrics plumbing.
pub fn synthetic_blobs(n: usize, n_classes: usize, seed: u64) -> Result<Dataset, Error> {
    if n_classes == 0 || n < n_classes {
        return Err(Error::Input(format!(
            "need at least one sample per class ({n} samples, {n_classes} classes)"
        )));
    }
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mid = (IMAGE_SIDE - 1) as f64 / 2.0;
    let radius = 8.0;
    for i in 0..n {
        let class = (i % n_classes) as u8;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / n_classes as f64;
        let cx = mid + radius * angle.cos();
        let cy = mid + radius * angle.sin();
        let amp: f64 = rng.random_range(0.75..1.0);
        let sigma: f64 = rng.random_range(2.2..2.8);
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = 2.0 * amp * (-d2 / (2.0 * sigma * sigma)).exp() - 1.0;
                images.push(v.clamp(-1.0, 1.0) as f32);
            }
        }
        labels.push(class);
    }
    Ok(Dataset { images, labels, channels: 1, n_classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_image_bytes(count: usize, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&(count as u32).to_be_bytes());
        b.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
        b.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
        b.extend((0..count * IMAGE_PIXELS).map(fill));
        b
    }

    pub(crate) fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn pixel_normalization_endpoints() {
        let bytes = idx_image_bytes(1, |i| if i == 0 { 255 } else { 0 });
        let (imgs, n) = parse_idx_images(&bytes).unwrap();
        assert_eq!(n, 1);
        assert_eq!(imgs[0], 1.0);
        assert_eq!(imgs[1], -1.0);
    }

    #[test]
    fn normalization_is_invertible() {
        let bytes = idx_image_bytes(1, |i| (i % 256) as u8);
        let (imgs, _) = parse_idx_images(&bytes).unwrap();
        for (i, &v) in imgs.iter().enumerate() {
            let back = ((v + 1.0) * 127.5).round() as u8;
            assert_eq!(back, (i % 256) as u8);
        }
    }

    #[test]
    fn bad_magic_rejected_with_offset() {
        let mut bytes = idx_image_bytes(1, |_| 0);
        bytes[3] = 0x99;
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(err.to_string().contains("offset 0"), "{err}");
    }

    #[test]
    fn short_payload_rejected() {
        let mut bytes = idx_image_bytes(2, |_| 0);
        bytes.truncate(bytes.len() - 10);
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(err.to_string().contains("promises"), "{err}");
    }

    #[test]
    fn count_mismatch_between_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, idx_image_bytes(3, |_| 0)).unwrap();
        std::fs::write(&lp, idx_label_bytes(&[1, 2])).unwrap();
        let err = read_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("3 images but 2 labels"), "{err}");
    }

    #[test]
    fn batching_drops_short_tail() {
        let batches = batch_indices(2000, 256, 7, 0);
        assert_eq!(batches.len(), 7);
        assert!(batches.iter().all(|b| b.len() == 256));
    }

    #[test]
    fn same_seed_epoch_same_order() {
        assert_eq!(batch_indices(100, 10, 3, 4), batch_indices(100, 10, 3, 4));
    }

    #[test]
    fn epochs_permute_differently() {
        let all: Vec<_> = (0..5).map(|e| batch_indices(512, 64, 9, e)).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(all[i], all[j], "epochs {i} and {j} shuffled identically");
            }
        }
    }

    #[test]
    fn blobs_have_distinct_centers_and_valid_range() {
        let ds = synthetic_blobs(10, 10, 1).unwrap();
        assert_eq!(ds.len(), 10);
        assert!(ds.images.iter().all(|v| (-1.0..=1.0).contains(v)));
        // one image per class; peak pixel position must differ per class
        let mut peaks = Vec::new();
        for i in 0..10 {
            let img = ds.image(i);
            let peak = img
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            peaks.push(peak);
        }
        peaks.sort_unstable();
        peaks.dedup();
        assert_eq!(peaks.len(), 10, "blob centers collide");
    }

    #[test]
    fn blobs_deterministic() {
        let a = synthetic_blobs(20, 10, 5).unwrap();
        let b = synthetic_blobs(20, 10, 5).unwrap();
        assert_eq!(a.images, b.images);
    }
}
