//! Dataset synthesis and IDX loading.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `(N, D)` or `(N, C, H, W)`; per-sample layout is row-major.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub split: String,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_numel(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            self.features.numel() / self.len()
        }
    }

    /// Gather a batch by sample index and reshape each sample to
    /// `per_sample_shape` (total element count must match).
    pub fn batch(&self, idxs: &[usize], per_sample_shape: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let stride = self.sample_numel();
        let want: usize = per_sample_shape.iter().product();
        if want != stride {
            return Err(Error::InvalidArg(format!(
                "per-sample shape {per_sample_shape:?} has {want} elements, dataset samples have {stride}"
            )));
        }
        let mut data = Vec::with_capacity(idxs.len() * stride);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            if i >= self.len() {
                return Err(Error::InvalidArg(format!(
                    "sample index {i} out of range ({} samples)",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.features.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idxs.len()];
        shape.extend_from_slice(per_sample_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }
}

#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
}

/// Gaussian class clusters: unit within-class variance, pairwise class-mean
/// separation exactly 4.0 (means sit at 2*sqrt(2) times distinct basis
/// vectors, so `dims >= classes` is required). Samples split 80/20 per class
/// into train/test. Regeneration from an equal seed is bit-identical.
pub fn gen_blobs(classes: usize, dims: usize, per_class: usize, seed: u64) -> Result<DataBundle> {
    if classes < 2 {
        return Err(Error::InvalidArg(format!("need at least 2 classes, got {classes}")));
    }
    if per_class == 0 {
        return Err(Error::InvalidArg("empty dataset: per_class must be positive".into()));
    }
    if dims < classes {
        return Err(Error::InvalidArg(format!(
            "need dims >= classes for exact mean separation, got {dims} < {classes}"
        )));
    }
    let scale = 2.0 * std::f64::consts::SQRT_2;
    let n_train_c = per_class * 4 / 5;
    let mut rng = Rng::for_data(seed);
    let mut train_feat = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_feat = Vec::new();
    let mut test_labels = Vec::new();
    for c in 0..classes {
        for s in 0..per_class {
            let (feat, labels) = if s < n_train_c {
                (&mut train_feat, &mut train_labels)
            } else {
                (&mut test_feat, &mut test_labels)
            };
            for d in 0..dims {
                let mean = if d == c { scale } else { 0.0 };
                feat.push(mean + rng.next_gauss());
            }
            labels.push(c);
        }
    }
    let mk = |feat: Vec<f64>, labels: Vec<usize>, split: &str| -> Result<Dataset> {
        let n = labels.len();
        Ok(Dataset {
            features: Tensor::new(vec![n, dims], feat)?,
            labels,
            split: split.into(),
            classes,
        })
    };
    Ok(DataBundle {
        train: mk(train_feat, train_labels, "train")?,
        test: mk(test_feat, test_labels, "test")?,
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct BeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> BeReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        if end > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte {} (wanted 4 more)",
                self.what, self.pos
            )));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.what, self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Load an IDX image/label pair (the canonical big-endian layout, magic
/// 0x00000803 for images and 0x00000801 for labels). Pixel values are scaled
/// to [0,1]; the result has shape `(N, 1, H, W)`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let mut ir = BeReader { bytes: &img_bytes, pos: 0, what: "idx images" };
    let magic = ir.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: bad magic {magic:#010x} at offset 0 (want {IDX_IMAGES_MAGIC:#010x})"
        )));
    }
    let n = ir.u32()? as usize;
    let h = ir.u32()? as usize;
    let w = ir.u32()? as usize;
    let pixels = ir.bytes(n * h * w)?;

    let mut lr = BeReader { bytes: &lbl_bytes, pos: 0, what: "idx labels" };
    let magic = lr.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: bad magic {magic:#010x} at offset 0 (want {IDX_LABELS_MAGIC:#010x})"
        )));
    }
    let nl = lr.u32()? as usize;
    if nl != n {
        return Err(Error::Format(format!("idx: {n} images but {nl} labels")));
    }
    let raw_labels = lr.bytes(n)?;

    let features: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(2);
    Ok(Dataset {
        features: Tensor::new(vec![n, 1, h, w], features)?,
        labels,
        split: "idx".into(),
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_seed_deterministic() {
        let a = gen_blobs(3, 5, 10, 42).unwrap();
        let b = gen_blobs(3, 5, 10, 42).unwrap();
        assert_eq!(a.train.features.data(), b.train.features.data());
        assert_eq!(a.test.labels, b.test.labels);
        let c = gen_blobs(3, 5, 10, 43).unwrap();
        assert_ne!(a.train.features.data(), c.train.features.data());
    }

    #[test]
    fn blobs_split_80_20() {
        let d = gen_blobs(4, 8, 100, 1).unwrap();
        assert_eq!(d.train.len(), 320);
        assert_eq!(d.test.len(), 80);
        for c in 0..4 {
            assert_eq!(d.test.labels.iter().filter(|&&l| l == c).count(), 20);
        }
    }

    #[test]
    fn blobs_mean_separation_is_four() {
        // Sample means of big clusters should sit ~4 apart pairwise.
        let d = gen_blobs(3, 6, 500, 5).unwrap();
        let dims = 6;
        let mut means = vec![vec![0.0; dims]; 3];
        let mut counts = [0usize; 3];
        for (i, &l) in d.train.labels.iter().enumerate() {
            for j in 0..dims {
                means[l][j] += d.train.features.data()[i * dims + j];
            }
            counts[l] += 1;
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        for a in 0..3 {
            for b in a + 1..3 {
                let dist: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!((dist - 4.0).abs() < 0.3, "classes {a},{b}: {dist}");
            }
        }
    }

    #[test]
    fn blobs_rejects_degenerate_inputs() {
        assert!(gen_blobs(2, 4, 0, 0).is_err());
        assert!(gen_blobs(1, 4, 10, 0).is_err());
        assert!(gen_blobs(5, 3, 10, 0).is_err());
    }

    #[test]
    fn batch_gathers_and_reshapes() {
        let d = gen_blobs(2, 4, 10, 0).unwrap();
        let (x, y) = d.train.batch(&[0, 9], &[4]).unwrap();
        assert_eq!(x.shape(), &[2, 4]);
        assert_eq!(y.len(), 2);
        assert_eq!(&x.data()[0..4], &d.train.features.data()[0..4]);
        assert!(d.train.batch(&[0], &[5]).is_err());
        assert!(d.train.batch(&[1000], &[4]).is_err());
    }

    fn write_idx_fixture(dir: &Path, pixels: &[u8], n: u32, h: u32, w: u32, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        let mut ib = Vec::new();
        ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        ib.extend_from_slice(&n.to_be_bytes());
        ib.extend_from_slice(&h.to_be_bytes());
        ib.extend_from_slice(&w.to_be_bytes());
        ib.extend_from_slice(pixels);
        std::fs::write(&ip, ib).unwrap();
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&n.to_be_bytes());
        lb.extend_from_slice(labels);
        std::fs::write(&lp, lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..4 * 2 * 3).map(|v| (v * 7 % 256) as u8).collect();
        let labels = [0u8, 1, 2, 1];
        let (ip, lp) = write_idx_fixture(dir.path(), &pixels, 4, 2, 3, &labels);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.features.shape(), &[4, 1, 2, 3]);
        assert_eq!(d.labels, vec![0, 1, 2, 1]);
        for (got, &raw) in d.features.data().iter().zip(&pixels) {
            assert_eq!(*got, raw as f64 / 255.0);
        }
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_fixture(dir.path(), &[0u8; 4], 2, 1, 2, &[0, 1]);

        let mut broken = std::fs::read(&ip).unwrap();
        broken[3] = 0x99;
        let bp = dir.path().join("bad.idx");
        std::fs::write(&bp, &broken).unwrap();
        let err = load_idx(&bp, &lp).unwrap_err().to_string();
        assert!(err.contains("bad magic") && err.contains("offset 0"), "{err}");

        let mut short = std::fs::read(&ip).unwrap();
        short.truncate(short.len() - 1);
        let sp = dir.path().join("short.idx");
        std::fs::write(&sp, &short).unwrap();
        let err = load_idx(&sp, &lp).unwrap_err().to_string();
        assert!(err.contains("truncated at byte"), "{err}");
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = write_idx_fixture(dir.path(), &[0u8; 4], 2, 1, 2, &[0, 1]);
        let lp = dir.path().join("three.idx");
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&3u32.to_be_bytes());
        lb.extend_from_slice(&[0, 1, 0]);
        std::fs::write(&lp, lb).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("2 images but 3 labels"), "{err}");
    }
}
