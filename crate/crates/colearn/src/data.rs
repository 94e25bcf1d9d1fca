//! Dataset acquisition: IDX parsing, synthetic Gaussian tasks, stratified
//! splitting, and train-time augmentation.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::Distribution;
use crate::nn::Volume;
use crate::seeds::{derive_seed, STREAM_SPLIT};
use crate::tensor::{Element, Tensor};

/// Padding used by the random-crop augmentation.
pub const CROP_PAD: usize = 4;

/// Labeled samples with inputs normalized to `[0, 1]` and one-hot labels.
#[derive(Debug, Clone)]
pub struct Dataset<E> {
    inputs: Tensor<E>, // (n, channels, height, width)
    labels: Vec<u32>,
    classes: usize,
    provenance: String,
    /// Horizontal flips are disabled for digit-like data where mirroring
    /// changes the label semantics.
    pub allow_flip: bool,
}

impl<E: Element> Dataset<E> {
    pub fn new(
        inputs: Tensor<E>,
        labels: Vec<u32>,
        classes: usize,
        provenance: impl Into<String>,
        allow_flip: bool,
    ) -> Result<Self> {
        if inputs.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "dataset inputs must be (n, c, h, w), got {:?}",
                inputs.shape()
            )));
        }
        let n = inputs.shape()[0];
        if n == 0 {
            return Err(Error::Config("dataset must contain at least one sample".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{n} inputs but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            provenance: provenance.into(),
            allow_flip,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn input_volume(&self) -> Volume {
        let s = self.inputs.shape();
        Volume::new(s[1], s[2], s[3])
    }

    fn sample_len(&self) -> usize {
        self.input_volume().elements()
    }

    /// Flat view of sample `i`'s input.
    pub fn input(&self, i: usize) -> &[E] {
        let v = self.sample_len();
        &self.inputs.data()[i * v..(i + 1) * v]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// The target `q(y|x)` of sample `i`, one-hot by construction.
    pub fn target(&self, i: usize) -> Distribution<E> {
        Distribution::one_hot(self.classes, self.label(i)).expect("label range checked on construction")
    }

    /// Copies a contiguous index range into a `(B, C, H, W)` batch tensor.
    pub fn gather_inputs(&self, range: Range<usize>) -> Tensor<E> {
        let v = self.sample_len();
        let vol = self.input_volume();
        let b = range.len();
        let mut out = Tensor::zeros(&[b, vol.channels, vol.height, vol.width]);
        out.data_mut()
            .copy_from_slice(&self.inputs.data()[range.start * v..range.end * v]);
        out
    }

    /// Assembles a batch from arbitrary indices: inputs (optionally
    /// augmented) and one-hot targets.
    pub fn gather_batch(
        &self,
        indices: &[usize],
        augment_rng: Option<&mut ChaCha8Rng>,
    ) -> (Tensor<E>, Tensor<E>) {
        let v = self.sample_len();
        let vol = self.input_volume();
        let b = indices.len();
        let mut inputs = Tensor::zeros(&[b, vol.channels, vol.height, vol.width]);
        let mut targets = Tensor::zeros(&[b, self.classes]);
        let one = E::one();
        match augment_rng {
            None => {
                for (row, &i) in indices.iter().enumerate() {
                    inputs.data_mut()[row * v..(row + 1) * v].copy_from_slice(self.input(i));
                    targets.data_mut()[row * self.classes + self.label(i)] = one;
                }
            }
            Some(rng) => {
                for (row, &i) in indices.iter().enumerate() {
                    let (oy, ox, flip) = sample_augment_params(rng, self.allow_flip);
                    augment_into(
                        self.input(i),
                        vol,
                        oy,
                        ox,
                        flip,
                        &mut inputs.data_mut()[row * v..(row + 1) * v],
                    );
                    targets.data_mut()[row * self.classes + self.label(i)] = one;
                }
            }
        }
        (inputs, targets)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            detail: format!("truncated header at byte {offset}"),
        })
}

/// Parses the big-endian IDX pair used by MNIST-style datasets: pixel bytes
/// scaled by 1/255, labels one-hot over 10 classes.
pub fn load_mnist_idx<E: Element>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset<E>> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img = read_file(images_path)?;
    let lbl = read_file(labels_path)?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            detail: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let expected = 16 + n * rows * cols;
    if img.len() != expected {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            detail: format!("file is {} bytes, header implies {expected}", img.len()),
        });
    }

    let lmagic = be_u32(&lbl, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            detail: format!("bad magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let ln = be_u32(&lbl, 4, labels_path)? as usize;
    if lbl.len() != 8 + ln {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            detail: format!("file is {} bytes, header implies {}", lbl.len(), 8 + ln),
        });
    }
    if ln != n {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            detail: format!("{ln} labels for {n} images"),
        });
    }

    let scale = E::from_f64(1.0 / 255.0);
    let data: Vec<E> = img[16..]
        .iter()
        .map(|&b| E::from_f64(b as f64) * scale)
        .collect();
    let inputs = Tensor::from_vec(&[n, 1, rows, cols], data)?;
    let labels: Vec<u32> = lbl[8..].iter().map(|&b| b as u32).collect();
    Dataset::new(
        inputs,
        labels,
        10,
        format!("idx:{}", images_path.display()),
        false,
    )
}

/// Directions of a regular simplex: `classes` unit vectors in
/// `R^(classes-1)` (padded with zeros up to `dim`), pairwise equiangular.
/// Built from the Helmert orthonormal basis, so fully deterministic.
fn simplex_directions(classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut dirs = vec![vec![0.0f64; dim]; classes];
    let norm = (1.0 - 1.0 / classes as f64).sqrt();
    for (i, dir) in dirs.iter_mut().enumerate() {
        for k in 1..classes {
            let denom = (k as f64 * (k + 1) as f64).sqrt();
            // Helmert row k applied to basis vector e_i.
            let h = if i < k {
                1.0 / denom
            } else if i == k {
                -(k as f64) / denom
            } else {
                0.0
            };
            dir[k - 1] = h / norm;
        }
    }
    dirs
}

/// Gaussian blobs at `separation * (unit simplex directions)` with isotropic
/// unit variance, affinely squashed to `[0, 1]`. Deterministic per seed.
pub fn synth_gaussian<E: Element>(
    classes: usize,
    dim: usize,
    separation: f64,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset<E>> {
    if classes < 2 {
        return Err(Error::Config("synthetic task needs at least 2 classes".into()));
    }
    if separation <= 0.0 {
        return Err(Error::Config(format!(
            "separation must be > 0, got {separation}"
        )));
    }
    if dim < classes - 1 {
        return Err(Error::Config(format!(
            "dim {dim} cannot embed {classes} equidistant class means (needs >= {})",
            classes - 1
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }

    let dirs = simplex_directions(classes, dim);
    let n = classes * n_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = vec![0.0f64; n * dim];
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        for s in 0..n_per_class {
            let row = class * n_per_class + s;
            for d in 0..dim {
                raw[row * dim + d] = separation * dirs[class][d] + gauss(&mut rng);
            }
            labels.push(class as u32);
            let _ = s;
        }
    }

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &raw {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data: Vec<E> = raw
        .iter()
        .map(|&v| E::from_f64((v - lo) / span))
        .collect();
    let inputs = Tensor::from_vec(&[n, dim, 1, 1], data)?;
    Dataset::new(
        inputs,
        labels,
        classes,
        format!("synthetic-gaussian(c={classes},dim={dim},sep={separation},seed={seed})"),
        false,
    )
}

/// Standard normal via Box-Muller; consumes two uniform draws.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Stratified split: per class, a seeded shuffle sends `round(fraction * n_c)`
/// samples to the test side. Disjoint, exhaustive, proportions within one
/// sample per class.
pub fn train_test_split<E: Element>(
    dataset: &Dataset<E>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset<E>, Dataset<E>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..dataset.classes() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.label(i) == class)
            .collect();
        let class_seed = derive_seed(&[seed, class as u64, STREAM_SPLIT]);
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(class_seed));
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        let n_test = n_test.min(idx.len());
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Config(format!(
            "split produced an empty side (test_fraction {test_fraction}, {} samples)",
            dataset.len()
        )));
    }
    Ok((subset(dataset, &train_idx, "train"), subset(dataset, &test_idx, "test")))
}

fn subset<E: Element>(dataset: &Dataset<E>, indices: &[usize], tag: &str) -> Dataset<E> {
    let v = dataset.sample_len();
    let vol = dataset.input_volume();
    let mut data = Vec::with_capacity(indices.len() * v);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(dataset.input(i));
        labels.push(dataset.labels[i]);
    }
    Dataset {
        inputs: Tensor::from_vec(&[indices.len(), vol.channels, vol.height, vol.width], data)
            .expect("subset volume consistent"),
        labels,
        classes: dataset.classes,
        provenance: format!("{}#{tag}", dataset.provenance),
        allow_flip: dataset.allow_flip,
    }
}

pub(crate) fn sample_augment_params(rng: &mut ChaCha8Rng, allow_flip: bool) -> (usize, usize, bool) {
    let oy = rng.gen_range(0..=2 * CROP_PAD);
    let ox = rng.gen_range(0..=2 * CROP_PAD);
    let flip = allow_flip && rng.gen_bool(0.5);
    (oy, ox, flip)
}

/// Deterministic augmentation core: zero-pad by [`CROP_PAD`], crop back to
/// the original size at offset `(oy, ox)`, then optionally mirror
/// horizontally. Offsets of exactly `CROP_PAD` with no flip are the identity.
pub fn augment_with<E: Element>(image: &Tensor<E>, oy: usize, ox: usize, flip: bool) -> Tensor<E> {
    let s = image.shape();
    debug_assert_eq!(s.len(), 3, "augment expects a (c, h, w) image");
    let vol = Volume::new(s[0], s[1], s[2]);
    let mut out = Tensor::zeros(s);
    augment_into(image.data(), vol, oy, ox, flip, out.data_mut());
    out
}

/// Random crop-and-flip augmentation of one `(c, h, w)` image.
pub fn augment<E: Element>(image: &Tensor<E>, rng: &mut ChaCha8Rng, allow_flip: bool) -> Tensor<E> {
    let (oy, ox, flip) = sample_augment_params(rng, allow_flip);
    augment_with(image, oy, ox, flip)
}

fn augment_into<E: Element>(
    image: &[E],
    vol: Volume,
    oy: usize,
    ox: usize,
    flip: bool,
    out: &mut [E],
) {
    let (c, h, w) = (vol.channels, vol.height, vol.width);
    out.fill(E::zero());
    // Reading the padded image at (oy + y, ox + x) maps back to source pixel
    // (oy + y - PAD, ox + x - PAD) when that lies inside the frame.
    for ch in 0..c {
        let plane = ch * h * w;
        for y in 0..h {
            let sy = (oy + y) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let src_row = plane + sy as usize * w;
            let dst_row = plane + y * w;
            for x in 0..w {
                let sx = (ox + x) as isize - CROP_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let dst_x = if flip { w - 1 - x } else { x };
                out[dst_row + dst_x] = image[src_row + sx as usize];
            }
        }
    }
}

/// Persists a vector dataset as CSV: one row per sample, flattened input
/// values then the label index.
pub fn save_csv<E: Element>(dataset: &Dataset<E>, path: impl AsRef<Path>) -> Result<()> {
    use std::io::Write;
    let mut out = String::new();
    let d = dataset.sample_len();
    for i in 0..d {
        out.push_str(&format!("x{i},"));
    }
    out.push_str("label\n");
    for s in 0..dataset.len() {
        for &v in dataset.input(s) {
            out.push_str(&format!("{},", v.to_f64()));
        }
        out.push_str(&format!("{}\n", dataset.label(s)));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Loads a CSV written by [`save_csv`].
pub fn load_csv<E: Element>(path: impl AsRef<Path>, classes: usize) -> Result<Dataset<E>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        detail: "empty file".into(),
    })?;
    let dim = header.split(',').count() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("line {}: {} fields, expected {}", lineno + 2, fields.len(), dim + 1),
            });
        }
        for f in &fields[..dim] {
            let v: f64 = f.parse().map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", lineno + 2),
            })?;
            data.push(E::from_f64(v));
        }
        labels.push(fields[dim].parse().map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("line {}: {e}", lineno + 2),
        })?);
    }
    let n = labels.len();
    let inputs = Tensor::from_vec(&[n, dim, 1, 1], data)?;
    Dataset::new(inputs, labels, classes, format!("csv:{}", path.display()), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_directions_are_unit_and_equiangular() {
        for classes in [2usize, 3, 5] {
            let dirs = simplex_directions(classes, classes + 1);
            for d in &dirs {
                let norm: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
            let expect = -1.0 / (classes as f64 - 1.0);
            for i in 0..classes {
                for j in 0..i {
                    let dot: f64 = dirs[i].iter().zip(&dirs[j]).map(|(a, b)| a * b).sum();
                    assert!((dot - expect).abs() < 1e-12, "dot({i},{j}) = {dot}");
                }
            }
        }
    }

    #[test]
    fn synth_gaussian_is_deterministic_and_in_range() {
        let a: Dataset<f64> = synth_gaussian(3, 4, 2.0, 50, 9).unwrap();
        let b: Dataset<f64> = synth_gaussian(3, 4, 2.0, 50, 9).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_eq!(a.labels, b.labels);
        assert!(a
            .inputs
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synth_gaussian_rejects_bad_configs() {
        assert!(synth_gaussian::<f64>(3, 1, 2.0, 10, 0).is_err()); // dim < classes-1
        assert!(synth_gaussian::<f64>(2, 4, 0.0, 10, 0).is_err()); // separation 0
        assert!(synth_gaussian::<f64>(2, 4, -1.0, 10, 0).is_err());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_stratified() {
        let ds: Dataset<f64> = synth_gaussian(4, 6, 3.0, 30, 5).unwrap();
        let (train, test) = train_test_split(&ds, 0.2, 11).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        for class in 0..4 {
            let t = test.labels.iter().filter(|&&l| l == class).count();
            assert_eq!(t, 6, "class {class} should give round(0.2*30)=6 test samples");
        }
        // Same seed, same split.
        let (train2, _) = train_test_split(&ds, 0.2, 11).unwrap();
        assert_eq!(train.inputs.data(), train2.inputs.data());
    }

    #[test]
    fn augment_identity_and_flip_behavior() {
        let img = Tensor::from_vec(&[1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let same = augment_with(&img, CROP_PAD, CROP_PAD, false);
        assert_eq!(same.data(), img.data());

        // Flip twice restores the image.
        let flipped = augment_with(&img, CROP_PAD, CROP_PAD, true);
        let back = augment_with(&flipped, CROP_PAD, CROP_PAD, true);
        assert_eq!(back.data(), img.data());

        // A corner marker moves as the crop offset predicts: reading the
        // padded image at offset (2*PAD, 2*PAD) shifts content up-left by PAD.
        let mut marked = Tensor::zeros(&[1, 6, 6]);
        marked.data_mut()[5 * 6 + 5] = 1.0; // bottom-right corner
        let moved = augment_with(&marked, 2 * CROP_PAD, 2 * CROP_PAD, false);
        assert_eq!(moved.data()[(5 - CROP_PAD) * 6 + (5 - CROP_PAD)], 1.0);
        let total: f64 = moved.data().iter().sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn csv_roundtrip() {
        let ds: Dataset<f64> = synth_gaussian(2, 3, 4.0, 5, 3).unwrap();
        let dir = std::env::temp_dir().join("colearn-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.csv");
        save_csv(&ds, &path).unwrap();
        let back: Dataset<f64> = load_csv(&path, 2).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.inputs.data().iter().zip(ds.inputs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
