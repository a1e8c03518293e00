use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::format::{
    header_get, header_parse, read_f64s, read_preamble, read_u32, read_u64, sha256_hex, write_f64s, write_preamble,
    write_u32, write_u64,
};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"SNVPTDAT";
pub const DATASET_VERSION: u32 = 1;

/// Shape families. The source families are used for backbone pretraining
/// and share no shape with the target families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Target,
    Source,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Target => "synthetic-shapes",
            ShapeKind::Source => "synthetic-shapes-source",
        }
    }

    pub fn family_names(self) -> [&'static str; 4] {
        match self {
            ShapeKind::Target => ["bar", "cross", "disk", "ring"],
            ShapeKind::Source => ["square", "triangle", "diagonal", "dots"],
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-shapes" => Ok(ShapeKind::Target),
            "synthetic-shapes-source" => Ok(ShapeKind::Source),
            _ => Err(Error::Parameter(format!("unknown dataset kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Parameter(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: ShapeKind,
    pub class_count: usize,
    pub count: usize,
    pub seed: u64,
    pub noise_floor: f64,
    pub image_size: usize,
    pub split: Split,
}

impl DatasetSpec {
    pub fn new(kind: ShapeKind, class_count: usize, count: usize, seed: u64, split: Split) -> Self {
        Self {
            kind,
            class_count,
            count,
            seed,
            noise_floor: 0.03,
            image_size: 32,
            split,
        }
    }

    fn stream_seed(&self) -> u64 {
        let split = match self.split {
            Split::Train => 0x7261_696e,
            Split::Test => 0x7465_7374,
        };
        let kind = match self.kind {
            ShapeKind::Target => 0,
            ShapeKind::Source => 0x5eed_0000_0000,
        };
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ split ^ kind
    }
}

/// Labelled `[1, H, W]` images in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub kind: ShapeKind,
    pub split: Split,
    pub seed: u64,
    pub noise_floor: f64,
}

fn render(kind: ShapeKind, class: usize, size: usize, rng: &mut ChaCha8Rng, noise_floor: f64) -> Tensor {
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.16..0.16) * s;
    let cy = s / 2.0 + rng.random_range(-0.16..0.16) * s;
    let scale = rng.random_range(0.16..0.28) * s;
    let thick = rng.random_range(0.045..0.075) * s;
    let fg = rng.random_range(0.6..0.9);
    let bg = rng.random_range(0.05..0.2);
    let inside = |dx: f64, dy: f64| -> bool {
        match (kind, class) {
            (ShapeKind::Target, 0) => dy.abs() <= thick && dx.abs() <= scale,
            (ShapeKind::Target, 1) => {
                (dy.abs() <= thick && dx.abs() <= scale) || (dx.abs() <= thick && dy.abs() <= scale)
            }
            (ShapeKind::Target, 2) => dx.hypot(dy) <= scale,
            (ShapeKind::Target, _) => (dx.hypot(dy) - scale).abs() <= thick,
            (ShapeKind::Source, 0) => dx.abs().max(dy.abs()) <= scale * 0.85,
            (ShapeKind::Source, 1) => dy.abs() <= scale && dx.abs() <= (dy + scale) / 2.0,
            (ShapeKind::Source, 2) => {
                (dx - dy).abs() <= thick * std::f64::consts::SQRT_2 && (dx + dy).abs() <= scale * 1.4
            }
            (ShapeKind::Source, _) => {
                let r = thick * 1.6;
                (dx - scale * 0.6).hypot(dy) <= r || (dx + scale * 0.6).hypot(dy) <= r
            }
        }
    };
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let base = if inside(dx, dy) { fg } else { bg };
            let z: f64 = rng.sample(StandardNormal);
            data.push((base + noise_floor * z).clamp(0.0, 1.0));
        }
    }
    Tensor::new(&[1, size, size], data).expect("rendered image shape")
}

/// Balanced, seeded synthetic shapes; image `i` has label `i % class_count`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.class_count == 0 || spec.class_count > 4 {
        return Err(Error::Parameter(format!(
            "{} has 4 shape families, asked for {} classes",
            spec.kind, spec.class_count
        )));
    }
    if spec.count < spec.class_count {
        return Err(Error::Parameter(format!(
            "count {} is smaller than class_count {}",
            spec.count, spec.class_count
        )));
    }
    if !(spec.noise_floor >= 0.0 && spec.noise_floor.is_finite()) {
        return Err(Error::Parameter(format!("noise_floor must be >= 0, got {}", spec.noise_floor)));
    }
    if spec.image_size < 8 {
        return Err(Error::Parameter(format!("image_size {} is too small", spec.image_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.stream_seed());
    let labels: Vec<usize> = (0..spec.count).map(|i| i % spec.class_count).collect();
    let images = labels
        .iter()
        .map(|&c| render(spec.kind, c, spec.image_size, &mut rng, spec.noise_floor))
        .collect();
    Ok(Dataset {
        images,
        labels,
        class_count: spec.class_count,
        kind: spec.kind,
        split: spec.split,
        seed: spec.seed,
        noise_floor: spec.noise_floor,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.class_count];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }

    /// The first `n` images (still balanced when `n` is a multiple of the
    /// class count).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Format("image and label counts differ".into()));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::Format(format!("label {l} >= class_count {}", self.class_count)));
        }
        if let Some(first) = self.images.first() {
            if self.images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::Format("images differ in shape".into()));
            }
        }
        Ok(())
    }

    fn header(&self) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        h.insert("class_count".into(), self.class_count.to_string());
        h.insert("count".into(), self.len().to_string());
        h.insert("kind".into(), self.kind.name().into());
        h.insert("noise_floor".into(), self.noise_floor.to_string());
        h.insert("seed".into(), self.seed.to_string());
        h.insert("split".into(), self.split.name().into());
        h
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        if self.is_empty() {
            return Err(Error::Format("refusing to write an empty dataset".into()));
        }
        write_preamble(w, DATASET_MAGIC, DATASET_VERSION, &self.header())?;
        let shape = self.images[0].shape();
        write_u32(w, shape.len() as u32 + 1)?;
        write_u64(w, self.len() as u64)?;
        for &d in shape {
            write_u64(w, d as u64)?;
        }
        for im in &self.images {
            write_f64s(w, im.data())?;
        }
        for &l in &self.labels {
            write_u32(w, l as u32)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let h = read_preamble(r, DATASET_MAGIC, DATASET_VERSION)?;
        let count: usize = header_parse(&h, "count")?;
        let rank = read_u32(r)? as usize;
        if !(2..=5).contains(&rank) {
            return Err(Error::Format(format!("dataset rank {rank} is implausible")));
        }
        let stored = read_u64(r)? as usize;
        if stored != count {
            return Err(Error::Format(format!("header count {count} but payload count {stored}")));
        }
        let dims = (1..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let per: usize = dims.iter().product();
        let images = (0..count)
            .map(|_| Tensor::new(&dims, read_f64s(r, per)?))
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..count)
            .map(|_| read_u32(r).map(|l| l as usize))
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            images,
            labels,
            class_count: header_parse(&h, "class_count")?,
            kind: header_get(&h, "kind")?.parse()?,
            split: header_get(&h, "split")?.parse()?,
            seed: header_parse(&h, "seed")?,
            noise_floor: header_parse(&h, "noise_floor")?,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// SHA-256 of the serialized container.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Accuracy of a nearest-class-mean classifier on raw pixels.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("nearest-centroid needs non-empty splits".into()));
    }
    let dim = train.images[0].len();
    let mut centroids = vec![vec![0.0; dim]; train.class_count];
    let counts = train.class_counts();
    for (im, &l) in train.images.iter().zip(&train.labels) {
        for (c, v) in centroids[l].iter_mut().zip(im.data()) {
            *c += v / counts[l] as f64;
        }
    }
    let correct = test
        .images
        .iter()
        .zip(&test.labels)
        .filter(|(im, &l)| {
            let dist = |c: &Vec<f64>| c.iter().zip(im.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..centroids.len())
                .filter(|&k| counts[k] > 0)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap_or(0);
            best == l
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}
