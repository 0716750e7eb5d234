//! Dataset ingestion: MNIST IDX files (raw or gzipped), CIFAR-10 binary
//! batches converted to grayscale, deterministic stratified subsets, exact
//! quarter-turn rotation, and the synthetic two-parameter toy set.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::network::Targets;
use crate::rng::{Purpose, Stream};
use crate::scalar::Scalar;
use crate::tensor::{rotate_stack, Batch, Shape};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

#[derive(Clone, Debug)]
pub enum Labels {
    Classes(Vec<u8>),
    Vectors { dim: usize, data: Vec<f32> },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Vectors { dim, data } => data.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Batch<f32>,
    pub labels: Labels,
    pub name: String,
    pub split: String,
    pub subset_seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.n
    }

    pub fn is_empty(&self) -> bool {
        self.images.n == 0
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.labels.len() != self.images.n {
            return Err(Error::Format(format!(
                "{} labels for {} images",
                self.labels.len(),
                self.images.n
            )));
        }
        if let Labels::Classes(v) = &self.labels {
            if let Some(bad) = v.iter().find(|&&c| c as usize >= class_count) {
                return Err(Error::Format(format!(
                    "label {bad} out of range for {class_count} classes"
                )));
            }
        }
        Ok(())
    }

    pub fn targets<F: Scalar>(&self) -> Targets<F> {
        match &self.labels {
            Labels::Classes(v) => Targets::Classes(v.iter().map(|&c| c as usize).collect()),
            Labels::Vectors { dim, data } => Targets::Vectors {
                dim: *dim,
                data: data.iter().map(|&v| F::from_f64(v as f64)).collect(),
            },
        }
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let len = self.images.shape.len();
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend_from_slice(self.images.sample(i));
        }
        let labels = match &self.labels {
            Labels::Classes(v) => Labels::Classes(idx.iter().map(|&i| v[i]).collect()),
            Labels::Vectors { dim, data: d } => {
                let mut out = Vec::with_capacity(idx.len() * dim);
                for &i in idx {
                    out.extend_from_slice(&d[i * dim..(i + 1) * dim]);
                }
                Labels::Vectors { dim: *dim, data: out }
            }
        };
        Dataset {
            images: Batch {
                n: idx.len(),
                shape: self.images.shape,
                data,
            },
            labels,
            name: self.name.clone(),
            split: self.split.clone(),
            subset_seed: self.subset_seed,
        }
    }

    /// Deterministic label-stratified subset of size `n`. Per-class quotas
    /// follow largest-remainder allocation; picks within a class and the
    /// final round-robin interleaving are reproducible from the seed.
    pub fn subset_stratified(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "subset of {n} from {} samples",
                self.len()
            )));
        }
        let classes = match &self.labels {
            Labels::Classes(v) => v,
            Labels::Vectors { .. } => {
                // no classes to stratify over; deterministic prefix of a shuffle
                let mut idx: Vec<usize> = (0..self.len()).collect();
                Stream::new(seed, 0, Purpose::Data).shuffle(&mut idx);
                idx.truncate(n);
                let mut out = self.select(&idx);
                out.subset_seed = Some(seed);
                return Ok(out);
            }
        };
        let k = 1 + *classes.iter().max().unwrap_or(&0) as usize;
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &c) in classes.iter().enumerate() {
            per_class[c as usize].push(i);
        }
        let total = self.len();
        let mut quota: Vec<usize> = per_class
            .iter()
            .map(|v| n * v.len() / total)
            .collect();
        let mut assigned: usize = quota.iter().sum();
        let mut frac: Vec<(usize, usize)> = per_class
            .iter()
            .enumerate()
            .map(|(c, v)| ((n * v.len()) % total, c))
            .collect();
        frac.sort_by(|a, b| b.cmp(a));
        let mut fi = 0;
        while assigned < n {
            let (_, c) = frac[fi % frac.len()];
            if quota[c] < per_class[c].len() {
                quota[c] += 1;
                assigned += 1;
            }
            fi += 1;
            if fi > 10 * frac.len() && assigned < n {
                // all fractional slots are exhausted; fill greedily
                for c in 0..k {
                    while assigned < n && quota[c] < per_class[c].len() {
                        quota[c] += 1;
                        assigned += 1;
                    }
                }
            }
        }
        let mut picks: Vec<Vec<usize>> = Vec::with_capacity(k);
        for (c, members) in per_class.iter().enumerate() {
            let mut m = members.clone();
            Stream::new(seed, c as u64, Purpose::Data).shuffle(&mut m);
            m.truncate(quota[c]);
            picks.push(m);
        }
        let mut idx = Vec::with_capacity(n);
        let mut round = 0;
        while idx.len() < n {
            let mut advanced = false;
            for p in &picks {
                if round < p.len() {
                    idx.push(p[round]);
                    advanced = true;
                }
            }
            round += 1;
            if !advanced {
                break;
            }
        }
        idx.truncate(n);
        let mut out = self.select(&idx);
        out.subset_seed = Some(seed);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn find_idx_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for suffix in ["", ".gz"] {
        let p = dir.join(format!("{stem}{suffix}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found under {}", dir.display()),
    )))
}

fn be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Loads the standard IDX pair for a split from a directory. Pixels are
/// scaled to [0, 1] as value / 255.
pub fn load_mnist_idx(dir: &Path, split: Split) -> Result<Dataset> {
    let img_path = find_idx_file(dir, &format!("{}-images-idx3-ubyte", split.prefix()))?;
    let lbl_path = find_idx_file(dir, &format!("{}-labels-idx1-ubyte", split.prefix()))?;

    let img = open_maybe_gz(&img_path)?;
    let magic = be_u32(&img, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x} in {}",
            img_path.display()
        )));
    }
    let count = be_u32(&img, 4)? as usize;
    let rows = be_u32(&img, 8)? as usize;
    let cols = be_u32(&img, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if img.len() != expected {
        return Err(Error::Format(format!(
            "image file has {} bytes, header implies {expected}",
            img.len()
        )));
    }

    let lbl = open_maybe_gz(&lbl_path)?;
    let magic = be_u32(&lbl, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x} in {}",
            lbl_path.display()
        )));
    }
    let lcount = be_u32(&lbl, 4)? as usize;
    if lbl.len() != 8 + lcount {
        return Err(Error::Format(format!(
            "label file has {} bytes, header implies {}",
            lbl.len(),
            8 + lcount
        )));
    }
    if lcount != count {
        return Err(Error::Format(format!(
            "{count} images but {lcount} labels"
        )));
    }

    let data: Vec<f32> = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let ds = Dataset {
        images: Batch {
            n: count,
            shape: Shape::new(1, rows, cols),
            data,
        },
        labels: Labels::Classes(lbl[8..].to_vec()),
        name: "mnist".into(),
        split: split.name().into(),
        subset_seed: None,
    };
    ds.validate(10)?;
    Ok(ds)
}

/// Loads a CIFAR-10 binary batch file (or `test_batch.bin` inside a
/// directory), converts to grayscale with the 0.299/0.587/0.114 luminance
/// weights, and center-crops 32x32 to 28x28.
pub fn load_cifar10_gray(path: &Path) -> Result<Dataset> {
    let file = if path.is_dir() {
        path.join("test_batch.bin")
    } else {
        path.to_path_buf()
    };
    let raw = open_maybe_gz(&file)?;
    if raw.is_empty() || raw.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{} has {} bytes; CIFAR-10 batches are multiples of {CIFAR_RECORD}",
            file.display(),
            raw.len()
        )));
    }
    let count = raw.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * 28 * 28);
    for rec in 0..count {
        let base = rec * CIFAR_RECORD;
        labels.push(raw[base]);
        let px = &raw[base + 1..base + CIFAR_RECORD];
        for y in 0..28 {
            for x in 0..28 {
                let sy = y + 2;
                let sx = x + 2;
                let r = px[sy * 32 + sx] as f32;
                let g = px[1024 + sy * 32 + sx] as f32;
                let b = px[2048 + sy * 32 + sx] as f32;
                data.push((0.299 * r + 0.587 * g + 0.114 * b) / 255.0);
            }
        }
    }
    let ds = Dataset {
        images: Batch {
            n: count,
            shape: Shape::new(1, 28, 28),
            data,
        },
        labels: Labels::Classes(labels),
        name: "cifar_gray".into(),
        split: "test".into(),
        subset_seed: None,
    };
    ds.validate(10)?;
    Ok(ds)
}

/// Exact quarter-turn rotation of every image; a pixel permutation, never
/// interpolation.
pub fn rotate_batch<F: Scalar>(images: &Batch<F>, quarter_turns: usize) -> Result<Batch<F>> {
    rotate_stack(images, quarter_turns)
}

/// Synthetic regression set for the two-parameter toy: inputs (x1, x2)
/// standard normal, target |x1| plus noise. The second input coordinate
/// carries no signal, and negating it maps the sample distribution to
/// itself.
pub fn make_c2_toy(n: usize, seed: u64) -> Dataset {
    let mut s = Stream::new(seed, 0, Purpose::Data);
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x1 = s.next_gaussian();
        let x2 = s.next_gaussian();
        let noise = s.next_gaussian();
        xs.push(x1 as f32);
        xs.push(x2 as f32);
        ys.push((x1.abs() + 0.1 * noise) as f32);
    }
    Dataset {
        images: Batch {
            n,
            shape: Shape::new(2, 1, 1),
            data: xs,
        },
        labels: Labels::Vectors { dim: 1, data: ys },
        name: "c2_toy".into(),
        split: "train".into(),
        subset_seed: Some(seed),
    }
}

/// Writers for the external binary formats. Used by tests and by the
/// synthetic out-of-distribution corpus; loaders above are exercised on
/// their own output bit-exactly.
pub mod synth {
    use super::*;
    use std::io::Write;

    pub fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: usize, cols: usize) -> Result<()> {
        let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&(images.len() as u32).to_be_bytes());
        out.extend_from_slice(&(rows as u32).to_be_bytes());
        out.extend_from_slice(&(cols as u32).to_be_bytes());
        for img in images {
            if img.len() != rows * cols {
                return Err(Error::ShapeMismatch("image size mismatch".into()));
            }
            out.extend_from_slice(img);
        }
        File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
        let mut out = Vec::with_capacity(8 + labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        File::create(path)?.write_all(&out)?;
        Ok(())
    }

    /// Writes `n` smooth random color textures in the CIFAR-10 binary
    /// record format. The images are deliberately unlike digit data; they
    /// serve as a deterministic out-of-distribution evaluation corpus when
    /// no real CIFAR files are available.
    pub fn write_ood_cifar(path: &Path, n: usize, seed: u64) -> Result<()> {
        let mut s = Stream::new(seed, 0, Purpose::Data);
        let mut out = Vec::with_capacity(n * CIFAR_RECORD);
        for _ in 0..n {
            out.push(s.next_index(10) as u8);
            // a few random plane waves per image, channel-tinted
            let waves: Vec<(f64, f64, f64, f64)> = (0..5)
                .map(|_| {
                    (
                        s.next_gaussian(),
                        s.next_f64() * 4.0 - 2.0,
                        s.next_f64() * 4.0 - 2.0,
                        s.next_f64() * std::f64::consts::TAU,
                    )
                })
                .collect();
            let tints: Vec<f64> = (0..3).map(|_| 0.5 + 0.5 * s.next_f64()).collect();
            for tint in &tints {
                for y in 0..32 {
                    for x in 0..32 {
                        let mut v = 0.0;
                        for &(a, fx, fy, ph) in &waves {
                            v += a * ((fx * x as f64 + fy * y as f64) * std::f64::consts::TAU / 32.0 + ph).sin();
                        }
                        let byte = (((v * tint * 0.2 + 0.5).clamp(0.0, 1.0)) * 255.0).round() as u8;
                        out.push(byte);
                    }
                }
            }
        }
        File::create(path)?.write_all(&out)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{FiniteGroup, UnitaryRep};
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn tiny_idx_fixture(dir: &Path) {
        let images: Vec<Vec<u8>> = (0..20)
            .map(|i| (0..16).map(|p| ((i * 16 + p) % 256) as u8).collect())
            .collect();
        let labels: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
        synth::write_idx_images(&dir.join("train-images-idx3-ubyte"), &images, 4, 4).unwrap();
        synth::write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &labels).unwrap();
    }

    #[test]
    fn idx_roundtrip_and_scaling() {
        let dir = tempdir().unwrap();
        let images = vec![vec![0u8, 255, 128, 64], vec![1, 2, 3, 4]];
        synth::write_idx_images(&dir.path().join("train-images-idx3-ubyte"), &images, 2, 2).unwrap();
        synth::write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[7, 3]).unwrap();
        let ds = load_mnist_idx(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images.sample(0)[0], 0.0);
        assert_eq!(ds.images.sample(0)[1], 1.0);
        match &ds.labels {
            Labels::Classes(v) => assert_eq!(v, &vec![7, 3]),
            _ => panic!(),
        }
    }

    #[test]
    fn idx_error_paths() {
        let dir = tempdir().unwrap();
        tiny_idx_fixture(dir.path());
        // bad magic
        let img_path = dir.path().join("train-images-idx3-ubyte");
        let mut bytes = std::fs::read(&img_path).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&img_path, &bytes).unwrap();
        assert!(load_mnist_idx(dir.path(), Split::Train).is_err());
        // truncation
        bytes[3] = 0x03;
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&img_path, &bytes).unwrap();
        assert!(load_mnist_idx(dir.path(), Split::Train).is_err());
        // count mismatch between images and labels
        tiny_idx_fixture(dir.path());
        synth::write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[1, 2, 3]).unwrap();
        assert!(load_mnist_idx(dir.path(), Split::Train).is_err());
    }

    #[test]
    fn stratified_subset_balanced_and_reproducible() {
        let dir = tempdir().unwrap();
        tiny_idx_fixture(dir.path());
        let ds = load_mnist_idx(dir.path(), Split::Train).unwrap();
        let a = ds.subset_stratified(10, 5).unwrap();
        let b = ds.subset_stratified(10, 5).unwrap();
        assert_eq!(a.images.data, b.images.data);
        let mut counts = [0usize; 10];
        match &a.labels {
            Labels::Classes(v) => {
                for &c in v {
                    counts[c as usize] += 1;
                }
            }
            _ => panic!(),
        }
        assert!(counts.iter().all(|&c| c == 1), "counts {counts:?}");
    }

    #[test]
    fn cifar_gray_loader() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("test_batch.bin");
        // two handmade records: pure white and constant mid-gray
        let mut bytes = Vec::new();
        bytes.push(3u8);
        bytes.extend(std::iter::repeat(255u8).take(3072));
        bytes.push(9u8);
        bytes.extend(std::iter::repeat(77u8).take(3072));
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_gray(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images.shape, Shape::new(1, 28, 28));
        // luminance of white is 1.0
        assert!(ds.images.sample(0).iter().all(|&v| (v - 1.0).abs() < 1e-6));
        // constant color stays constant after crop
        let first = ds.images.sample(1)[0];
        assert!(ds.images.sample(1).iter().all(|&v| (v - first).abs() < 1e-6));

        // record-size mismatch rejected
        std::fs::write(&path, &bytes[..CIFAR_RECORD + 5]).unwrap();
        assert!(load_cifar10_gray(&path).is_err());
    }

    #[test]
    fn ood_corpus_loads() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("test_batch.bin");
        synth::write_ood_cifar(&path, 8, 11).unwrap();
        let ds = load_cifar10_gray(&path).unwrap();
        assert_eq!(ds.len(), 8);
        assert!(ds.images.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rotation_agrees_with_representation_action() {
        let group = FiniteGroup::cyclic(4).unwrap();
        let rep = UnitaryRep::rotation(group, 2, 5, 5).unwrap();
        let mut s = Stream::new(3, 0, Purpose::Data);
        let batch = Batch::from_data(
            2,
            Shape::new(2, 5, 5),
            (0..100).map(|_| s.next_f64() as f32).collect::<Vec<f32>>(),
        )
        .unwrap();
        for g in 0..4 {
            let rotated = rotate_batch(&batch, g).unwrap();
            for n in 0..batch.n {
                let mut by_rep = vec![0.0f32; 50];
                rep.apply(g, batch.sample(n), &mut by_rep);
                assert_eq!(rotated.sample(n), &by_rep[..]);
            }
        }
    }

    #[test]
    fn toy_set_shapes() {
        let ds = make_c2_toy(50, 7);
        assert_eq!(ds.len(), 50);
        assert_eq!(ds.images.shape, Shape::new(2, 1, 1));
        assert_eq!(ds.labels.len(), 50);
    }

    proptest! {
        #[test]
        fn rotation_roundtrip(g in 0usize..4, n in 1usize..4, side in 1usize..7) {
            let mut s = Stream::new(9, 0, Purpose::Data);
            let batch = Batch::from_data(
                n,
                Shape::new(1, side, side),
                (0..n * side * side).map(|_| s.next_f64() as f32).collect::<Vec<f32>>(),
            ).unwrap();
            let there = rotate_batch(&batch, g).unwrap();
            let back = rotate_batch(&there, (4 - g) % 4).unwrap();
            prop_assert_eq!(back.data, batch.data);
        }
    }
}
