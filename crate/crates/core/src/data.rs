//! Labeled image datasets: directory loading, stratified splits, and a
//! synthetic generator with known discriminative regions.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::image::{self, encode_ppm, RgbImage};
use crate::tensor::Tensor;

pub const DEFAULT_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×S×S` in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Path relative to the dataset root, `/`-separated.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order, sharing the class table.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("png"))
}

/// Entries of `dir` sorted by file-name bytes.
fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry
            .file_name()
            .into_string()
            .map_err(|n| Error::Data(format!("{}: non-UTF-8 file name {n:?}", dir.display())))?;
        out.push((name, entry.path()));
    }
    out.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    Ok(out)
}

/// One class per subdirectory of `root`, images (`.ppm`, `.png`) resized to
/// `size×size`. Ordered by class name, then file name, both by byte order.
/// Files with other extensions and files directly under `root` are ignored.
pub fn load_dataset(root: &Path, size: usize) -> Result<Dataset> {
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for (class, dir) in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let label = class_names.len();
        let before = samples.len();
        for (file, path) in sorted_entries(&dir)? {
            if !path.is_file() || !is_image_file(&path) {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let image = image::preprocess(&bytes, size)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            samples.push(Sample {
                image,
                label,
                source: format!("{class}/{file}"),
            });
        }
        if samples.len() == before {
            return Err(Error::Data(format!("class directory {} has no images", dir.display())));
        }
        class_names.push(class);
    }
    if class_names.len() < 2 {
        return Err(Error::Data(format!(
            "{} needs at least 2 class subdirectories, found {}",
            root.display(),
            class_names.len()
        )));
    }
    Ok(Dataset { samples, class_names })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

/// Fractions of each class sent to train, val and test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub tags: Vec<Split>,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl SplitAssignment {
    /// Sample indices carrying `tag`, ascending.
    pub fn indices(&self, tag: Split) -> Vec<usize> {
        (0..self.tags.len()).filter(|&i| self.tags[i] == tag).collect()
    }
}

/// `⌊r·n⌋`, nudged so products like `0.1·70` that land a hair under an
/// integer in binary still floor to it.
fn floor_share(r: f64, n: usize) -> usize {
    (r * n as f64 + 1e-9).floor() as usize
}

/// Stratified split: each class is shuffled (one seeded stream, classes in
/// label order), its first `⌊test·n⌋` go to test, the next `⌊val·n⌋` to val,
/// the rest to train.
pub fn split(ds: &Dataset, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    let parts = [ratios.train, ratios.val, ratios.test];
    if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {parts:?} must be in [0, 1] and sum to 1")));
    }
    let mut by_class = vec![Vec::new(); ds.class_names.len()];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class
            .get_mut(s.label)
            .ok_or_else(|| Error::Data(format!("sample {} has label {} out of range", s.source, s.label)))?
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![Split::Train; ds.len()];
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            return Err(Error::Data(format!("class {:?} has no samples", ds.class_names[class])));
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = floor_share(ratios.test, n);
        let n_val = floor_share(ratios.val, n);
        for (pos, &i) in members.iter().enumerate() {
            tags[i] = if pos < n_test {
                Split::Test
            } else if pos < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    Ok(SplitAssignment { tags, ratios, seed })
}

/// Blob outlines the generator can draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlobShape {
    Square,
    Disk,
    Diamond,
}

const SHAPES: [BlobShape; 3] = [BlobShape::Square, BlobShape::Disk, BlobShape::Diamond];

const PALETTE: [[u8; 3]; 7] = [
    [220, 30, 30],
    [30, 60, 220],
    [240, 220, 40],
    [200, 40, 200],
    [40, 210, 220],
    [245, 245, 245],
    [20, 20, 20],
];

const BACKGROUND: [f32; 3] = [90.0, 140.0, 75.0];

/// Grid is `GRID×GRID` cells, matching the 4×4 feature map a three-block
/// trunk produces, so each blob sits in one feature cell.
const GRID: usize = 4;

/// Cell assignment order for classes, spreading early classes over rows
/// and columns.
const CELL_ORDER: [usize; GRID * GRID] = [0, 5, 10, 15, 3, 12, 6, 9, 1, 14, 7, 8, 2, 13, 4, 11];

/// What makes a class recognisable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlobSignature {
    /// Row-major cell index in the 4×4 grid.
    pub cell: usize,
    pub shape: BlobShape,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    /// Per-channel uniform noise half-width, in 0..=255 units.
    pub noise: f32,
    /// Maximum blob offset from its cell centre, in pixels.
    pub jitter: usize,
    pub seed: u64,
    /// One per class; [`SynthSpec::new`] derives them from the class index.
    pub signatures: Vec<BlobSignature>,
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        let signatures = (0..classes)
            .map(|k| BlobSignature {
                cell: CELL_ORDER[k % CELL_ORDER.len()],
                shape: SHAPES[k % SHAPES.len()],
                color: PALETTE[k % PALETTE.len()],
            })
            .collect();
        Self {
            classes,
            per_class,
            size,
            noise: 24.0,
            jitter: size / 32,
            seed,
            signatures,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.per_class == 0 {
            return Err(Error::Config("need at least 1 image per class".into()));
        }
        if self.size < 12 {
            return Err(Error::Config(format!("image size {} too small (minimum 12)", self.size)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be finite and nonnegative", self.noise)));
        }
        if self.signatures.len() != self.classes {
            return Err(Error::Config(format!(
                "{} blob signatures for {} classes",
                self.signatures.len(),
                self.classes
            )));
        }
        for (i, a) in self.signatures.iter().enumerate() {
            if a.cell >= GRID * GRID {
                return Err(Error::Config(format!("class {i}: grid cell {} out of range", a.cell)));
            }
            if let Some(j) = self.signatures[..i].iter().position(|b| b == a) {
                return Err(Error::Config(format!("classes {j} and {i} share a blob signature")));
            }
        }
        if self.jitter * 4 > self.size / GRID {
            return Err(Error::Config(format!(
                "jitter {} too large for {}px images",
                self.jitter, self.size
            )));
        }
        Ok(())
    }

    fn blob_radius(&self) -> usize {
        self.size / GRID / 2
    }

    /// Zero-padded so byte-order sorting keeps label order.
    pub fn class_name(&self, k: usize) -> String {
        let width = (self.classes - 1).to_string().len().max(2);
        format!("class_{k:0width$}")
    }
}

/// Ground-truth blob extent, pixel coordinates, inclusive-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    /// Grown about its centre so each side is `1 + fraction` times longer.
    pub fn dilate(&self, fraction: f64, width: usize, height: usize) -> BBox {
        let grow = |lo: usize, hi: usize, limit: usize| {
            let pad = (hi - lo) as f64 * fraction / 2.0;
            let lo = (lo as f64 - pad).floor().max(0.0) as usize;
            let hi = ((hi as f64 + pad).ceil() as usize).min(limit);
            (lo, hi)
        };
        let (x0, x1) = grow(self.x0, self.x1, width);
        let (y0, y1) = grow(self.y0, self.y1, height);
        BBox { x0, y0, x1, y1 }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub images: Vec<RgbImage>,
    pub boxes: Vec<BBox>,
}

fn inside(shape: BlobShape, dx: i64, dy: i64, r: i64) -> bool {
    match shape {
        BlobShape::Square => dx.abs() <= r && dy.abs() <= r,
        BlobShape::Disk => dx * dx + dy * dy <= r * r,
        BlobShape::Diamond => dx.abs() + dy.abs() <= r,
    }
}

fn render(spec: &SynthSpec, sig: &BlobSignature, rng: &mut ChaCha8Rng) -> (RgbImage, BBox) {
    let s = spec.size;
    let mut img = RgbImage::filled(s, s, [0; 3]);
    for y in 0..s {
        for x in 0..s {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let n = if spec.noise > 0.0 {
                    rng.random_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                *v = image::to_byte(BACKGROUND[c] + n);
            }
            img.set_pixel(x, y, px);
        }
    }
    let cell = s / GRID;
    let r = spec.blob_radius() as i64;
    let j = spec.jitter as i64;
    let mut offset = || if j > 0 { rng.random_range(-j..=j) } else { 0 };
    let cx = ((sig.cell % GRID) * cell + cell / 2) as i64 + offset();
    let cy = ((sig.cell / GRID) * cell + cell / 2) as i64 + offset();
    let (mut x0, mut y0, mut x1, mut y1) = (s, s, 0, 0);
    for y in (cy - r).max(0)..=(cy + r).min(s as i64 - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(s as i64 - 1) {
            if inside(sig.shape, x - cx, y - cy, r) {
                let (xu, yu) = (x as usize, y as usize);
                img.set_pixel(xu, yu, sig.color);
                x0 = x0.min(xu);
                y0 = y0.min(yu);
                x1 = x1.max(xu + 1);
                y1 = y1.max(yu + 1);
            }
        }
    }
    (img, BBox { x0, y0, x1, y1 })
}

/// Images in class order, `per_class` each. Noise and jitter come from one
/// seeded stream, so the result depends only on `spec`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let class_names: Vec<String> = (0..spec.classes).map(|k| spec.class_name(k)).collect();
    let n = spec.classes * spec.per_class;
    let (mut samples, mut images, mut boxes) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (k, sig) in spec.signatures.iter().enumerate() {
        for i in 0..spec.per_class {
            let (img, bbox) = render(spec, sig, &mut rng);
            samples.push(Sample {
                image: image::to_tensor(&img),
                label: k,
                source: format!("{0}/{0}_{i:05}.ppm", class_names[k]),
            });
            images.push(img);
            boxes.push(bbox);
        }
    }
    Ok(SynthDataset {
        dataset: Dataset { samples, class_names },
        images,
        boxes,
    })
}

#[derive(Serialize)]
struct BoxRow<'a> {
    file: &'a str,
    class: &'a str,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

/// `file,class,x0,y0,x1,y1` rows in sample order.
pub fn boxes_csv(synth: &SynthDataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (s, b) in synth.dataset.samples.iter().zip(&synth.boxes) {
        w.serialize(BoxRow {
            file: &s.source,
            class: &synth.dataset.class_names[s.label],
            x0: b.x0,
            y0: b.y0,
            x1: b.x1,
            y1: b.y1,
        })
        .map_err(|e| Error::Internal(format!("boxes.csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Internal(format!("boxes.csv: {e}")))
}

/// Writes `root/<class>/<file>.ppm` for every sample plus `root/boxes.csv`.
pub fn write_synth(synth: &SynthDataset, root: &Path) -> Result<()> {
    for name in &synth.dataset.class_names {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (s, img) in synth.dataset.samples.iter().zip(&synth.images) {
        write_atomic(&root.join(&s.source), &encode_ppm(img))?;
    }
    write_atomic(&root.join("boxes.csv"), &boxes_csv(synth)?)
}

/// Reads `boxes.csv` back as `(file, bbox)` pairs.
pub fn read_boxes(path: &Path) -> Result<Vec<(String, BBox)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let num = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad row {:?}", path.display(), rec)))
        };
        let file = rec.get(0).unwrap_or_default().to_string();
        out.push((
            file,
            BBox {
                x0: num(2)?,
                y0: num(3)?,
                x1: num(4)?,
                y1: num(5)?,
            },
        ));
    }
    Ok(out)
}
