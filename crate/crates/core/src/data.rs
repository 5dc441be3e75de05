//! Seeded synthetic bitemporal pairs.
//!
//! Each sample has a textured background and a few static shapes shared by
//! both dates. The second date inserts or removes `k` rectangles/discs and
//! may be shifted globally in brightness. Ground truth marks the pixels of
//! the inserted or removed shapes whose pre-jitter value actually differs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::imageio::Image;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Disc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// `(height, width)`, both multiples of 16.
    pub image_size: (usize, usize),
    pub n_samples: usize,
    /// Inclusive range of changed shapes per sample.
    pub shape_count_range: (usize, usize),
    /// Inclusive range of static shapes present on both dates.
    pub static_shape_range: (usize, usize),
    /// Inclusive range of disc radii and rectangle half-sides, in pixels.
    pub shape_size_range: (usize, usize),
    /// Largest global intensity shift of the second date, as a fraction of
    /// the full 0..255 range.
    pub brightness_jitter: f64,
    pub shape_kinds: Vec<ShapeKind>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            image_size: (64, 64),
            n_samples: 250,
            shape_count_range: (1, 3),
            static_shape_range: (0, 2),
            shape_size_range: (5, 12),
            brightness_jitter: 0.1,
            shape_kinds: vec![ShapeKind::Rect, ShapeKind::Disc],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!("image size {h}×{w} must be positive multiples of 16")));
        }
        let (lo, hi) = self.shape_size_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad shape size range ({lo}, {hi})")));
        }
        if 2 * hi + 1 > h.min(w) {
            return Err(Error::Config(format!(
                "shapes up to size {} do not fit a {h}×{w} frame",
                2 * hi + 1
            )));
        }
        for (name, (a, b)) in [("shape_count_range", self.shape_count_range), ("static_shape_range", self.static_shape_range)] {
            if a > b {
                return Err(Error::Config(format!("{name} ({a}, {b}) is empty")));
            }
        }
        if !(0.0..=1.0).contains(&self.brightness_jitter) {
            return Err(Error::Config("brightness_jitter must lie in [0, 1]".into()));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::Config("at least one shape kind is required".into()));
        }
        Ok(())
    }
}

/// One axis-aligned rectangle or disc, centred on a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cy: usize,
    pub cx: usize,
    /// Disc radius, or rectangle half-extent `(ry, rx)`.
    pub ry: usize,
    pub rx: usize,
    pub color: [u8; 3],
}

impl Shape {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let dy = y.abs_diff(self.cy);
        let dx = x.abs_diff(self.cx);
        match self.kind {
            ShapeKind::Rect => dy <= self.ry && dx <= self.rx,
            ShapeKind::Disc => dy * dy + dx * dx <= self.ry * self.ry,
        }
    }

    /// Row-major coverage mask; pixel centres inside the shape are set.
    pub fn rasterize(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|p| self.covers(p / w, p % w)).collect()
    }

    fn paint(&self, img: &mut [u8], h: usize, w: usize) {
        let y0 = self.cy.saturating_sub(self.ry);
        let x0 = self.cx.saturating_sub(self.rx);
        for y in y0..(self.cy + self.ry + 1).min(h) {
            for x in x0..(self.cx + self.rx + 1).min(w) {
                if self.covers(y, x) {
                    img[(y * w + x) * 3..][..3].copy_from_slice(&self.color);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Inserted,
    Removed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t1: Image,
    pub t2: Image,
    /// `0/1` per pixel.
    pub gt: Vec<u8>,
    pub changes: Vec<(ChangeKind, Shape)>,
    /// Global shift added to the second date, in 0..255 units.
    pub jitter: f64,
}

fn random_shape<R: Rng>(rng: &mut R, spec: &SyntheticSpec) -> Shape {
    let (h, w) = spec.image_size;
    let kind = spec.shape_kinds[rng.random_range(0..spec.shape_kinds.len())];
    let (lo, hi) = spec.shape_size_range;
    let ry = rng.random_range(lo..=hi);
    let rx = if kind == ShapeKind::Disc { ry } else { rng.random_range(lo..=hi) };
    // saturated colours, far from the mid-tone background in every channel
    let color = std::array::from_fn(|_| {
        if rng.random_bool(0.5) {
            rng.random_range(0..=40)
        } else {
            rng.random_range(200..=255)
        }
    });
    Shape {
        kind,
        cy: rng.random_range(ry..h - ry),
        cx: rng.random_range(rx..w - rx),
        ry,
        rx,
        color,
    }
}

fn background<R: Rng>(rng: &mut R, h: usize, w: usize) -> Vec<u8> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(90.0..150.0));
    let amp = rng.random_range(0.0..12.0);
    let (fy, fx) = (rng.random_range(0.05..0.4), rng.random_range(0.05..0.4));
    let (py, px) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let mut img = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let tex = amp * ((fy * y as f64 + py).sin() + (fx * x as f64 + px).sin()) / 2.0;
            for b in base {
                let noise = rng.random_range(-4.0..4.0);
                img.push((b + tex + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    img
}

/// Sample `index` of a spec; independent of every other sample.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let mut t1 = background(&mut rng, h, w);
    for _ in 0..rng.random_range(spec.static_shape_range.0..=spec.static_shape_range.1) {
        random_shape(&mut rng, spec).paint(&mut t1, h, w);
    }
    let k = rng.random_range(spec.shape_count_range.0..=spec.shape_count_range.1);
    let changes: Vec<(ChangeKind, Shape)> = (0..k)
        .map(|_| {
            let kind = if rng.random_bool(0.5) {
                ChangeKind::Inserted
            } else {
                ChangeKind::Removed
            };
            (kind, random_shape(&mut rng, spec))
        })
        .collect();
    let mut t2 = t1.clone();
    // removed shapes exist only in the first date, inserted only in the second
    for (kind, s) in &changes {
        match kind {
            ChangeKind::Removed => s.paint(&mut t1, h, w),
            ChangeKind::Inserted => s.paint(&mut t2, h, w),
        }
    }
    let mut gt = vec![0u8; h * w];
    for (p, g) in gt.iter_mut().enumerate() {
        let touched = changes.iter().any(|(_, s)| s.covers(p / w, p % w));
        *g = u8::from(touched && t1[p * 3..][..3] != t2[p * 3..][..3]);
    }
    let j = spec.brightness_jitter * 255.0;
    let jitter = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    if jitter != 0.0 {
        for v in &mut t2 {
            *v = (f64::from(*v) + jitter).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(Sample {
        t1: Image::rgb(w, h, t1)?,
        t2: Image::rgb(w, h, t2)?,
        gt,
        changes,
        jitter,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<Sample>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = crate::parallel::map_range(spec.n_samples, |i| generate_sample(spec, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub files: Vec<[String; 3]>,
    /// SHA-256 over every file's bytes in listing order, hex.
    pub sha256: String,
}

fn gt_image(s: &Sample) -> Image {
    Image {
        width: s.t1.width,
        height: s.t1.height,
        channels: 1,
        data: s.gt.iter().map(|&g| g * 255).collect(),
    }
}

impl Dataset {
    fn file_names(i: usize) -> [String; 3] {
        [format!("t1_{i:04}.ppm"), format!("t2_{i:04}.ppm"), format!("gt_{i:04}.pgm")]
    }

    fn encoded(&self) -> impl Iterator<Item = ([String; 3], [Vec<u8>; 3])> + '_ {
        self.samples.iter().enumerate().map(|(i, s)| {
            (
                Self::file_names(i),
                [s.t1.encode_pnm(), s.t2.encode_pnm(), gt_image(s).encode_pnm()],
            )
        })
    }

    /// Hash of the persisted bytes; identical specs hash identically.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, files) in self.encoded() {
            for f in files {
                h.update(&f);
            }
        }
        hex(&h.finalize())
    }

    /// Writes `t1_/t2_/gt_` files and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir)?;
        let mut h = Sha256::new();
        let mut names = Vec::new();
        for (n, files) in self.encoded() {
            for (name, bytes) in n.iter().zip(&files) {
                write_atomic(&dir.join(name), bytes)?;
                h.update(bytes);
            }
            names.push(n);
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            files: names,
            sha256: hex(&h.finalize()),
        };
        write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest)
    }

    /// Deterministic `(train, val)` index split under the spec seed.
    pub fn split(&self, val: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if val >= self.samples.len() {
            return Err(Error::Config(format!(
                "validation size {val} leaves no training samples out of {}",
                self.samples.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5EED_5B11));
        let train = idx.split_off(val);
        Ok((train, idx))
    }

    /// Stacked `(t1, t2, gt)` tensors for the given samples.
    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
        let (h, w) = self.spec.image_size;
        let stack = |f: &dyn Fn(&Sample) -> Tensor<F>, c: usize| {
            let mut data = Vec::with_capacity(indices.len() * c * h * w);
            for &i in indices {
                data.extend_from_slice(f(&self.samples[i]).data());
            }
            Tensor::new(&[indices.len(), c, h, w], data).expect("sample sizes agree")
        };
        (
            stack(&|s| s.t1.to_tensor(), 3),
            stack(&|s| s.t2.to_tensor(), 3),
            stack(&|s| Tensor::from_fn(&[1, 1, h, w], |p| F::from_usize(s.gt[p] as usize)), 1),
        )
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
