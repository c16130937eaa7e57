//! Dataset ingestion: IDX image/label pairs, CSV, and a builtin synthetic
//! Gaussian-blobs generator. Inputs are normalized to `[0, 1]`; everything
//! is deterministic given the spec's seed.

use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::LabeledBatch;
use crate::rng::{role, stream};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One split of a dataset, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    /// `n × input_numel`, row-major.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: SplitData,
    pub test: SplitData,
    /// Per-example shape, e.g. `[1, 28, 28]` for images or `[d]` for flat rows.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Gather training examples by index into a batch.
    pub fn train_batch(&self, indices: &[usize]) -> LabeledBatch {
        gather(&self.train, indices, &self.input_shape)
    }

    /// The whole test split as one batch.
    pub fn test_batch(&self) -> LabeledBatch {
        let indices: Vec<usize> = (0..self.test.len()).collect();
        gather(&self.test, &indices, &self.input_shape)
    }

    /// Image geometry `(c, h, w)` when examples are image-shaped.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        match self.input_shape[..] {
            [c, h, w] => Some((c, h, w)),
            _ => None,
        }
    }
}

fn gather(split: &SplitData, indices: &[usize], input_shape: &[usize]) -> LabeledBatch {
    let per: usize = input_shape.iter().product();
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&split.inputs[i * per..(i + 1) * per]);
        labels.push(split.labels[i]);
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(input_shape);
    LabeledBatch::new(Tensor::new(shape, data).unwrap(), labels).unwrap()
}

// ---------------------------------------------------------------------------
// dataset specification
// ---------------------------------------------------------------------------

/// How class mean images are drawn by the blobs generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobStyle {
    /// Independent uniform coordinates.
    Iid,
    /// Smooth, horizontally symmetric random fields (image-like; requires a
    /// perfect-square dimension).
    Smooth,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs {
        n: usize,
        test: usize,
        dim: usize,
        num_classes: usize,
        seed: u64,
        noise: f64,
        style: BlobStyle,
    },
    Idx {
        images: String,
        labels: String,
        test_images: Option<String>,
        test_labels: Option<String>,
    },
    Csv {
        path: String,
        num_classes: Option<usize>,
        test_frac: f64,
        seed: u64,
    },
}

impl DatasetSpec {
    /// Parse `scheme:key=value,...` strings, e.g.
    /// `blobs:n=1000,d=16,z=4,seed=7` or `idx:images=a,labels=b`.
    pub fn parse(s: &str) -> Result<Self> {
        let (scheme, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = std::collections::BTreeMap::new();
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("dataset spec item `{part}` is not k=v")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get_usize = |kv: &std::collections::BTreeMap<String, String>, k: &str| -> Result<Option<usize>> {
            kv.get(k)
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| Error::Config(format!("dataset spec `{k}={v}` is not an integer")))
                })
                .transpose()
        };
        match scheme {
            "blobs" => {
                let n = get_usize(&kv, "n")?
                    .ok_or_else(|| Error::Config("blobs spec needs n=".into()))?;
                let dim = get_usize(&kv, "d")?
                    .ok_or_else(|| Error::Config("blobs spec needs d=".into()))?;
                let num_classes = get_usize(&kv, "z")?
                    .ok_or_else(|| Error::Config("blobs spec needs z=".into()))?;
                let seed = kv
                    .get("seed")
                    .map(|v| v.parse::<u64>())
                    .transpose()
                    .map_err(|_| Error::Config("blobs seed must be an integer".into()))?
                    .unwrap_or(0);
                let test = get_usize(&kv, "test")?.unwrap_or(n / 5);
                let noise = kv
                    .get("noise")
                    .map(|v| v.parse::<f64>())
                    .transpose()
                    .map_err(|_| Error::Config("blobs noise must be a float".into()))?
                    .unwrap_or(0.15);
                let style = match kv.get("style").map(String::as_str) {
                    None | Some("iid") => BlobStyle::Iid,
                    Some("smooth") => BlobStyle::Smooth,
                    Some(other) => {
                        return Err(Error::Config(format!("unknown blobs style `{other}`")))
                    }
                };
                Ok(DatasetSpec::Blobs {
                    n,
                    test,
                    dim,
                    num_classes,
                    seed,
                    noise,
                    style,
                })
            }
            "idx" => {
                let images = kv
                    .get("images")
                    .ok_or_else(|| Error::Config("idx spec needs images=".into()))?
                    .clone();
                let labels = kv
                    .get("labels")
                    .ok_or_else(|| Error::Config("idx spec needs labels=".into()))?
                    .clone();
                Ok(DatasetSpec::Idx {
                    images,
                    labels,
                    test_images: kv.get("test-images").cloned(),
                    test_labels: kv.get("test-labels").cloned(),
                })
            }
            "csv" => {
                let path = kv
                    .get("path")
                    .ok_or_else(|| Error::Config("csv spec needs path=".into()))?
                    .clone();
                let num_classes = get_usize(&kv, "z")?;
                let test_frac = kv
                    .get("test-frac")
                    .map(|v| v.parse::<f64>())
                    .transpose()
                    .map_err(|_| Error::Config("csv test-frac must be a float".into()))?
                    .unwrap_or(0.2);
                let seed = kv
                    .get("seed")
                    .map(|v| v.parse::<u64>())
                    .transpose()
                    .map_err(|_| Error::Config("csv seed must be an integer".into()))?
                    .unwrap_or(0);
                Ok(DatasetSpec::Csv {
                    path,
                    num_classes,
                    test_frac,
                    seed,
                })
            }
            other => Err(Error::Data(format!("unknown dataset format `{other}`"))),
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Blobs {
                n,
                test,
                dim,
                num_classes,
                seed,
                noise,
                style,
            } => write!(
                f,
                "blobs:n={n},test={test},d={dim},z={num_classes},seed={seed},noise={noise},style={}",
                match style {
                    BlobStyle::Iid => "iid",
                    BlobStyle::Smooth => "smooth",
                }
            ),
            DatasetSpec::Idx {
                images,
                labels,
                test_images,
                test_labels,
            } => {
                write!(f, "idx:images={images},labels={labels}")?;
                if let (Some(ti), Some(tl)) = (test_images, test_labels) {
                    write!(f, ",test-images={ti},test-labels={tl}")?;
                }
                Ok(())
            }
            DatasetSpec::Csv {
                path,
                num_classes,
                test_frac,
                seed,
            } => {
                write!(f, "csv:path={path}")?;
                if let Some(z) = num_classes {
                    write!(f, ",z={z}")?;
                }
                write!(f, ",test-frac={test_frac},seed={seed}")
            }
        }
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Blobs {
            n,
            test,
            dim,
            num_classes,
            seed,
            noise,
            style,
        } => generate_blobs(*n, *test, *dim, *num_classes, *seed, *noise, *style),
        DatasetSpec::Idx {
            images,
            labels,
            test_images,
            test_labels,
        } => {
            let (train, shape, zmax_train) = load_idx_pair(images, labels)?;
            let (test, z) = match (test_images, test_labels) {
                (Some(ti), Some(tl)) => {
                    let (t, tshape, zmax_test) = load_idx_pair(ti, tl)?;
                    if tshape != shape {
                        return Err(Error::Data(format!(
                            "test image geometry {tshape:?} differs from train {shape:?}"
                        )));
                    }
                    (t, zmax_train.max(zmax_test) + 1)
                }
                _ => (
                    SplitData {
                        inputs: vec![],
                        labels: vec![],
                    },
                    zmax_train + 1,
                ),
            };
            Ok(Dataset {
                train,
                test,
                input_shape: shape,
                num_classes: z,
            })
        }
        DatasetSpec::Csv {
            path,
            num_classes,
            test_frac,
            seed,
        } => load_csv(path, *num_classes, *test_frac, *seed),
    }
}

// ---------------------------------------------------------------------------
// blobs
// ---------------------------------------------------------------------------

fn generate_blobs(
    n: usize,
    test: usize,
    dim: usize,
    num_classes: usize,
    seed: u64,
    noise: f64,
    style: BlobStyle,
) -> Result<Dataset> {
    if n == 0 || dim == 0 || num_classes < 2 {
        return Err(Error::Data(format!(
            "blobs generator needs n > 0, d > 0, z >= 2 (got n={n}, d={dim}, z={num_classes})"
        )));
    }
    let side = (dim as f64).sqrt().round() as usize;
    let square = side * side == dim;
    if style == BlobStyle::Smooth && !square {
        return Err(Error::Data(format!(
            "smooth blobs need a perfect-square dimension, got d={dim}"
        )));
    }
    let mut rng = stream(seed, &[role::DATA_GEN]);

    // class mean images in [0.25, 0.75]
    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mean = match style {
            BlobStyle::Iid => (0..dim).map(|_| rng.gen_range(0.25..0.75)).collect(),
            BlobStyle::Smooth => smooth_field(side, &mut rng),
        };
        means.push(mean);
    }

    let normal = Normal::new(0.0, noise).unwrap();
    let mut draw_split = |count: usize| {
        let mut inputs = Vec::with_capacity(count * dim);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % num_classes;
            labels.push(class);
            for j in 0..dim {
                let v: f64 = means[class][j] + normal.sample(&mut rng);
                inputs.push(v.clamp(0.0, 1.0));
            }
        }
        SplitData { inputs, labels }
    };
    let train = draw_split(n);
    let test = draw_split(test);
    let input_shape = if square && style == BlobStyle::Smooth {
        vec![1, side, side]
    } else {
        vec![dim]
    };
    Ok(Dataset {
        train,
        test,
        input_shape,
        num_classes,
    })
}

/// Bilinearly upsampled 4×4 random grid, averaged with its mirror image so
/// horizontal flips are label-preserving in distribution.
fn smooth_field(side: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    const G: usize = 4;
    let grid: Vec<f64> = (0..G * G).map(|_| rng.gen_range(0.25..0.75)).collect();
    let mut img = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let gy = y as f64 * (G - 1) as f64 / (side - 1).max(1) as f64;
            let gx = x as f64 * (G - 1) as f64 / (side - 1).max(1) as f64;
            let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(G - 1), (x0 + 1).min(G - 1));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            img[y * side + x] = grid[y0 * G + x0] * (1.0 - fy) * (1.0 - fx)
                + grid[y0 * G + x1] * (1.0 - fy) * fx
                + grid[y1 * G + x0] * fy * (1.0 - fx)
                + grid[y1 * G + x1] * fy * fx;
        }
    }
    for y in 0..side {
        for x in 0..side / 2 {
            let a = img[y * side + x];
            let b = img[y * side + side - 1 - x];
            let m = 0.5 * (a + b);
            img[y * side + x] = m;
            img[y * side + side - 1 - x] = m;
        }
    }
    img
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("malformed IDX header ({what}): {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Returns (split, per-example shape, max label).
fn load_idx_pair(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(SplitData, Vec<usize>, usize)> {
    let mut f = std::fs::File::open(images_path.as_ref())?;
    let magic = read_u32_be(&mut f, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "unknown format: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&mut f, "image count")? as usize;
    let rows = read_u32_be(&mut f, "rows")? as usize;
    let cols = read_u32_be(&mut f, "cols")? as usize;
    let mut raw = vec![0u8; n * rows * cols];
    f.read_exact(&mut raw)
        .map_err(|e| Error::Data(format!("truncated IDX image data: {e}")))?;
    let inputs: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();

    let mut f = std::fs::File::open(labels_path.as_ref())?;
    let magic = read_u32_be(&mut f, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "unknown format: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_labels = read_u32_be(&mut f, "label count")? as usize;
    if n_labels != n {
        return Err(Error::Data(format!(
            "length mismatch: {n} images vs {n_labels} labels"
        )));
    }
    let mut raw = vec![0u8; n_labels];
    f.read_exact(&mut raw)
        .map_err(|e| Error::Data(format!("truncated IDX label data: {e}")))?;
    let labels: Vec<usize> = raw.iter().map(|&b| b as usize).collect();
    let zmax = labels.iter().copied().max().unwrap_or(0);
    Ok((
        SplitData { inputs, labels },
        vec![1, rows, cols],
        zmax,
    ))
}

/// Write an IDX image/label pair (big-endian headers, u8 payload scaled from
/// `[0,1]`). Handy for fixtures and for exporting synthetic data.
pub fn write_idx_pair(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: &SplitData,
    rows: usize,
    cols: usize,
) -> Result<()> {
    use std::io::Write;
    let n = split.len();
    let mut f = std::fs::File::create(images_path.as_ref())?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(rows as u32).to_be_bytes())?;
    f.write_all(&(cols as u32).to_be_bytes())?;
    let bytes: Vec<u8> = split
        .inputs
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    let mut f = std::fs::File::create(labels_path.as_ref())?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    let bytes: Vec<u8> = split.labels.iter().map(|&l| l as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Rows are `feature,...,feature,label`. Features are min-max normalized to
/// `[0,1]` when any value falls outside.
fn load_csv(
    path: &str,
    num_classes: Option<usize>,
    test_frac: f64,
    seed: u64,
) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Data(format!(
                "csv line {}: need at least one feature and a label",
                lineno + 1
            )));
        }
        let d = fields.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(Error::Data(format!(
                "csv line {}: length mismatch ({} features, expected {})",
                lineno + 1,
                d,
                dim.unwrap()
            )));
        }
        let mut row = Vec::with_capacity(d);
        for f in &fields[..d] {
            row.push(f.parse::<f64>().map_err(|_| {
                Error::Data(format!("csv line {}: malformed number `{f}`", lineno + 1))
            })?);
        }
        let label = fields[d].parse::<usize>().map_err(|_| {
            Error::Data(format!(
                "csv line {}: malformed label `{}`",
                lineno + 1,
                fields[d]
            ))
        })?;
        rows.push(row);
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| Error::Data("csv file has no data rows".into()))?;
    let z = num_classes.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) + 1);
    for (i, &l) in labels.iter().enumerate() {
        if l >= z {
            return Err(Error::Data(format!("csv row {i}: label {l} >= z {z}")));
        }
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in &rows {
        for &v in r {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo < 0.0 || hi > 1.0 {
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        for r in &mut rows {
            for v in r {
                *v = (*v - lo) / span;
            }
        }
    }

    // seeded shuffle, then carve off the test fraction from the tail
    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut stream(seed, &[role::DATA_GEN]));
    let n_test = ((n as f64) * test_frac.clamp(0.0, 0.9)).round() as usize;
    let n_train = n - n_test;
    let mk = |idx: &[usize]| {
        let mut inputs = Vec::with_capacity(idx.len() * dim);
        let mut labs = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(&rows[i]);
            labs.push(labels[i]);
        }
        SplitData {
            inputs,
            labels: labs,
        }
    };
    Ok(Dataset {
        train: mk(&order[..n_train]),
        test: mk(&order[n_train..]),
        input_shape: vec![dim],
        num_classes: z,
    })
}

/// Fisher–Yates with a fixed visit order.
pub fn shuffle(xs: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    /// Horizontal flip with probability ½ plus a random crop after 2-pixel
    /// zero padding.
    FlipCrop,
}

/// Apply flip-crop in place to an image batch `[n, c, h, w]`. One RNG draw
/// sequence per example, in index order.
pub fn augment_flip_crop(batch: &mut LabeledBatch, dims: (usize, usize, usize), rng: &mut rand_chacha::ChaCha8Rng) {
    const PAD: i64 = 2;
    let (c, h, w) = dims;
    let per = c * h * w;
    let n = batch.len();
    let data = batch.inputs.data_mut();
    let mut scratch = vec![0.0; per];
    for img in 0..n {
        let flip: bool = rng.gen_bool(0.5);
        let dy = rng.gen_range(-PAD..=PAD);
        let dx = rng.gen_range(-PAD..=PAD);
        let src = &mut data[img * per..(img + 1) * per];
        scratch.copy_from_slice(src);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as i64 + dx;
                    let sy = y as i64 + dy;
                    let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        scratch[ch * h * w + sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                    src[ch * h * w + y * w + x] = v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_generator_contract() {
        let spec = DatasetSpec::parse("blobs:n=1000,d=16,z=4,seed=7").unwrap();
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.train.len(), 1000);
        assert_eq!(ds.test.len(), 200);
        assert_eq!(ds.input_shape, vec![16]);
        assert!(ds.train.labels.iter().all(|&l| l < 4));
        assert!(ds.train.inputs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // determinism
        let ds2 = load_dataset(&spec).unwrap();
        assert_eq!(ds, ds2);
    }

    #[test]
    fn smooth_blobs_are_image_shaped_and_flip_symmetric() {
        let spec = DatasetSpec::parse("blobs:n=64,test=8,d=64,z=3,seed=1,style=smooth").unwrap();
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.input_shape, vec![1, 8, 8]);
        assert!(DatasetSpec::parse("blobs:n=8,d=10,z=2,style=smooth")
            .and_then(|s| load_dataset(&s))
            .is_err());
    }

    #[test]
    fn idx_round_trip_and_mismatch_detection() {
        let dir = std::env::temp_dir().join(format!("conadv-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let spec = DatasetSpec::parse("blobs:n=20,test=0,d=16,z=3,seed=2").unwrap();
        let ds = load_dataset(&spec).unwrap();
        let img = dir.join("train-images");
        let lab = dir.join("train-labels");
        write_idx_pair(&img, &lab, &ds.train, 4, 4).unwrap();
        let loaded = load_dataset(&DatasetSpec::Idx {
            images: img.to_str().unwrap().into(),
            labels: lab.to_str().unwrap().into(),
            test_images: None,
            test_labels: None,
        })
        .unwrap();
        assert_eq!(loaded.train.len(), 20);
        assert_eq!(loaded.input_shape, vec![1, 4, 4]);
        // quantization to u8 is the only loss
        for (a, b) in loaded.train.inputs.iter().zip(&ds.train.inputs) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        // corrupt: mismatched counts
        let lab2 = dir.join("short-labels");
        let short = SplitData {
            inputs: ds.train.inputs[..16 * 10].to_vec(),
            labels: ds.train.labels[..10].to_vec(),
        };
        write_idx_pair(dir.join("unused-images"), &lab2, &short, 4, 4).unwrap();
        let err = load_dataset(&DatasetSpec::Idx {
            images: img.to_str().unwrap().into(),
            labels: lab2.to_str().unwrap().into(),
            test_images: None,
            test_labels: None,
        })
        .unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_bad_magic_is_unknown_format() {
        let dir = std::env::temp_dir().join(format!("conadv-idxm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bogus");
        std::fs::write(&p, [0u8; 32]).unwrap();
        let err = load_dataset(&DatasetSpec::Idx {
            images: p.to_str().unwrap().into(),
            labels: p.to_str().unwrap().into(),
            test_images: None,
            test_labels: None,
        })
        .unwrap_err();
        assert!(err.to_string().contains("unknown format"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_parses_shapes_and_labels() {
        let dir = std::env::temp_dir().join(format!("conadv-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("data.csv");
        let mut text = String::from("# comment\n");
        for i in 0..10 {
            text.push_str(&format!("{}.0,{}.5,{}\n", i, i, i % 3));
        }
        std::fs::write(&p, text).unwrap();
        let ds = load_dataset(&DatasetSpec::Csv {
            path: p.to_str().unwrap().into(),
            num_classes: Some(10),
            test_frac: 0.2,
            seed: 3,
        })
        .unwrap();
        assert_eq!(ds.train.len() + ds.test.len(), 10);
        assert_eq!(ds.input_shape, vec![2]);
        assert_eq!(ds.num_classes, 10);
        assert!(ds.train.inputs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn spec_display_parse_round_trip() {
        for s in [
            "blobs:n=100,test=20,d=16,z=4,seed=7,noise=0.15,style=iid",
            "csv:path=/tmp/x.csv,z=3,test-frac=0.1,seed=2",
            "idx:images=a,labels=b",
        ] {
            let spec = DatasetSpec::parse(s).unwrap();
            let round = DatasetSpec::parse(&spec.to_string()).unwrap();
            assert_eq!(spec, round);
        }
    }

    #[test]
    fn flip_crop_keeps_domain_and_is_seeded() {
        let spec = DatasetSpec::parse("blobs:n=8,test=0,d=64,z=2,seed=5,style=smooth").unwrap();
        let ds = load_dataset(&spec).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let mut b1 = ds.train_batch(&idx);
        let mut b2 = ds.train_batch(&idx);
        let dims = ds.image_dims().unwrap();
        augment_flip_crop(&mut b1, dims, &mut stream(9, &[role::AUGMENT, 0]));
        augment_flip_crop(&mut b2, dims, &mut stream(9, &[role::AUGMENT, 0]));
        assert_eq!(b1.inputs.data(), b2.inputs.data());
        assert!(b1.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut b3 = ds.train_batch(&idx);
        augment_flip_crop(&mut b3, dims, &mut stream(9, &[role::AUGMENT, 1]));
        assert_ne!(b1.inputs.data(), b3.inputs.data());
    }
}
