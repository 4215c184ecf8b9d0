//! Synthetic datasets: 2-D toy distributions and 16x16 ellipse phantoms.
//!
//! Generation is a pure function of (name, parameters, seed); regenerating
//! with the same triple is bit-identical. Phantom images come with binary
//! masks (union of ellipse interiors) and a 4-way class label: bit 1 of the
//! class selects one or two chambers, bit 0 selects the dilated or contracted
//! phase. Multiplicative speckle is the only corruption model.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Background mean intensity of phantom images; ellipse pixels are clamped
/// well above it so `mask == 1` implies `pixel >= PHANTOM_BG_MEAN`.
pub const PHANTOM_BG_MEAN: f64 = 0.18;
/// Background pixels never exceed this value.
pub const PHANTOM_BG_CEIL: f64 = 0.34;
/// Ellipse (mask == 1) pixels never fall below this value.
pub const PHANTOM_FG_FLOOR: f64 = 0.55;
/// Midpoint of the empty band between background and ellipse intensities.
/// Thresholding a clean phantom here recovers its mask exactly; the
/// background mean itself separates nothing, since half the background lies
/// above its own mean.
pub const PHANTOM_MASK_THRESHOLD: f64 = 0.5 * (PHANTOM_BG_CEIL + PHANTOM_FG_FLOOR);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toy2d {
    EightGaussians,
    TwoMoons,
    Checkerboard,
}

impl Toy2d {
    pub fn name(&self) -> &'static str {
        match self {
            Toy2d::EightGaussians => "eight_gaussians",
            Toy2d::TwoMoons => "two_moons",
            Toy2d::Checkerboard => "checkerboard",
        }
    }
}

/// In-memory dataset: equally shaped samples plus optional labels and masks.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub data_shape: Vec<usize>,
    samples: Vec<Tensor>,
    labels: Option<Vec<usize>>,
    masks: Option<Vec<Tensor>>,
    pub num_classes: Option<usize>,
}

impl Dataset {
    pub fn new(
        name: String,
        data_shape: Vec<usize>,
        samples: Vec<Tensor>,
        labels: Option<Vec<usize>>,
        masks: Option<Vec<Tensor>>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidDataset("dataset has no samples".into()));
        }
        for s in &samples {
            if s.shape() != data_shape.as_slice() {
                return Err(Error::InvalidDataset(format!(
                    "sample shape {:?} does not match dataset shape {:?}",
                    s.shape(),
                    data_shape
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(Error::InvalidDataset("label count != sample count".into()));
            }
        }
        if let Some(m) = &masks {
            if m.len() != samples.len() {
                return Err(Error::InvalidDataset("mask count != sample count".into()));
            }
        }
        Ok(Self {
            name,
            data_shape,
            samples,
            labels,
            masks,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &Tensor {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn mask(&self, i: usize) -> Option<&Tensor> {
        self.masks.as_ref().map(|m| &m[i])
    }

    pub fn has_masks(&self) -> bool {
        self.masks.is_some()
    }

    /// Deterministic 87.5 / 12.5 split by index: the first 7/8 train.
    pub fn split_indices(&self) -> (Range<usize>, Range<usize>) {
        let train = self.samples.len() * 7 / 8;
        (0..train, train..self.samples.len())
    }

    /// Clones the index range into a standalone dataset.
    pub fn subset(&self, range: Range<usize>) -> Result<Dataset> {
        if range.end > self.samples.len() || range.is_empty() {
            return Err(Error::InvalidDataset(format!(
                "subset range {range:?} invalid for {} samples",
                self.samples.len()
            )));
        }
        Dataset::new(
            self.name.clone(),
            self.data_shape.clone(),
            self.samples[range.clone()].to_vec(),
            self.labels.as_ref().map(|l| l[range.clone()].to_vec()),
            self.masks.as_ref().map(|m| m[range.clone()].to_vec()),
            self.num_classes,
        )
    }

    pub fn train_split(&self) -> Result<Dataset> {
        self.subset(self.split_indices().0)
    }

    pub fn val_split(&self) -> Result<Dataset> {
        self.subset(self.split_indices().1)
    }

    /// All samples stacked into one `[n, ...]` tensor.
    pub fn stacked(&self) -> Result<Tensor> {
        Tensor::stack(&self.samples)
    }
}

// ---- toy 2-D generators ----

/// Samples one of the three toy 2-D distributions. Labels are the mixture
/// component for `eight_gaussians` (8 classes) and the moon for `two_moons`
/// (2 classes); `checkerboard` is unlabelled.
pub fn gen_toy2d(which: Toy2d, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidDataset("n must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    match which {
        Toy2d::EightGaussians => {
            // Means on the radius-2 circle, isotropic sigma = 0.1.
            for _ in 0..n {
                let k: usize = rng.gen_range(0..8);
                let th = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
                let (cx, cy) = (2.0 * th.cos(), 2.0 * th.sin());
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                samples.push(Tensor::new(vec![2], vec![cx + 0.1 * dx, cy + 0.1 * dy])?);
                labels.push(k);
            }
            Dataset::new(
                Toy2d::EightGaussians.name().into(),
                vec![2],
                samples,
                Some(labels),
                None,
                Some(8),
            )
        }
        Toy2d::TwoMoons => {
            // Interleaved half circles with sigma = 0.1 jitter.
            for _ in 0..n {
                let k: usize = rng.gen_range(0..2);
                let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let (mut x, mut y) = if k == 0 {
                    (th.cos(), th.sin())
                } else {
                    (1.0 - th.cos(), 0.5 - th.sin())
                };
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                x += 0.1 * dx;
                y += 0.1 * dy;
                samples.push(Tensor::new(vec![2], vec![x, y])?);
                labels.push(k);
            }
            Dataset::new(
                Toy2d::TwoMoons.name().into(),
                vec![2],
                samples,
                Some(labels),
                None,
                Some(2),
            )
        }
        Toy2d::Checkerboard => {
            // Uniform over the 8 black cells of a 4x4 board on [-2, 2]^2.
            let black: Vec<(usize, usize)> = (0..4)
                .flat_map(|i| (0..4).map(move |j| (i, j)))
                .filter(|(i, j)| (i + j) % 2 == 0)
                .collect();
            for _ in 0..n {
                let (ci, cj) = black[rng.gen_range(0..black.len())];
                let x = -2.0 + ci as f64 + rng.gen_range(0.0..1.0);
                let y = -2.0 + cj as f64 + rng.gen_range(0.0..1.0);
                samples.push(Tensor::new(vec![2], vec![x, y])?);
            }
            Dataset::new(
                Toy2d::Checkerboard.name().into(),
                vec![2],
                samples,
                None,
                None,
                None,
            )
        }
    }
}

// ---- phantoms ----

struct EllipseSpec {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    phi: f64,
}

impl EllipseSpec {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (c, s) = (self.phi.cos(), self.phi.sin());
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Generates `n` grayscale ellipse phantoms of shape `[1, size, size]` with
/// binary masks. Class `2*c + p` has `c+1` chambers (`c` in 0..2) in phase `p`
/// (0 dilated, 1 contracted). Every mask is non-empty, masks of two-chamber
/// images have exactly two 4-connected components, and masked pixels always
/// sit above the background mean.
pub fn gen_phantoms(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidDataset("n must be positive".into()));
    }
    if !(8..=32).contains(&size) {
        return Err(Error::InvalidDataset(format!(
            "phantom size must be in [8, 32], got {size}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let scale = size as f64 / 16.0;

    for _ in 0..n {
        let class: usize = rng.gen_range(0..4);
        let chambers = class / 2 + 1;
        let contracted = class % 2 == 1;
        let mask = rasterize_chambers(size, chambers, contracted, scale, &mut rng);
        let mut img = vec![0.0; size * size];
        for (p, m) in img.iter_mut().zip(&mask) {
            let u: f64 = rng.sample(StandardNormal);
            *p = if *m == 0 {
                (PHANTOM_BG_MEAN * (1.0 + 0.35 * u)).clamp(0.02, PHANTOM_BG_CEIL)
            } else {
                (0.78 * (1.0 + 0.12 * u)).clamp(PHANTOM_FG_FLOOR, 0.98)
            };
        }
        samples.push(Tensor::new(vec![1, size, size], img)?);
        masks.push(Tensor::new(
            vec![1, size, size],
            mask.iter().map(|&m| m as f64).collect(),
        )?);
        labels.push(class);
    }
    Dataset::new(
        "phantoms".into(),
        vec![1, size, size],
        samples,
        Some(labels),
        Some(masks),
        Some(4),
    )
}

fn rasterize_chambers(size: usize, chambers: usize, contracted: bool, scale: f64, rng: &mut ChaCha12Rng) -> Vec<u8> {
    // Axis ranges sized so two chambers stay disjoint on a 16px canvas.
    let (a_lo, a_hi) = match (chambers, contracted) {
        (1, false) => (3.4, 4.5),
        (1, true) => (2.0, 2.8),
        (2, false) => (2.2, 2.9),
        _ => (1.5, 2.0),
    };
    loop {
        let mut specs = Vec::with_capacity(chambers);
        for c in 0..chambers {
            let a = rng.gen_range(a_lo..a_hi) * scale;
            let b = a * rng.gen_range(0.6..0.9);
            let phi = rng.gen_range(0.0..std::f64::consts::PI);
            let margin = a + 0.6;
            let (x_lo, x_hi) = if chambers == 1 {
                (margin, size as f64 - 1.0 - margin)
            } else if c == 0 {
                (margin, size as f64 / 2.0 - 1.2)
            } else {
                (size as f64 / 2.0 + 1.2, size as f64 - 1.0 - margin)
            };
            if x_lo >= x_hi {
                break;
            }
            let cx = rng.gen_range(x_lo..x_hi);
            let cy = rng.gen_range(margin..size as f64 - 1.0 - margin);
            specs.push(EllipseSpec { cx, cy, a, b, phi });
        }
        if specs.len() != chambers {
            continue;
        }
        let rasters: Vec<Vec<u8>> = specs.iter().map(|e| rasterize(size, e)).collect();
        if rasters.iter().any(|r| r.iter().all(|&v| v == 0)) {
            continue; // degenerate: ellipse missed every pixel centre
        }
        if chambers == 2 && !chebyshev_disjoint(&rasters[0], &rasters[1], size) {
            continue;
        }
        let mut mask = vec![0u8; size * size];
        for r in rasters {
            for (m, v) in mask.iter_mut().zip(r) {
                *m |= v;
            }
        }
        return mask;
    }
}

fn rasterize(size: usize, e: &EllipseSpec) -> Vec<u8> {
    let mut out = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            if e.contains(x as f64, y as f64) {
                out[y * size + x] = 1;
            }
        }
    }
    out
}

/// True when no pixel of `a` touches a pixel of `b`, diagonals included.
fn chebyshev_disjoint(a: &[u8], b: &[u8], size: usize) -> bool {
    for y in 0..size {
        for x in 0..size {
            if a[y * size + x] == 0 {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if (0..size as i64).contains(&ny)
                        && (0..size as i64).contains(&nx)
                        && b[ny as usize * size + nx as usize] == 1
                    {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Number of 4-connected components of the non-zero pixels of a mask of
/// shape `[1, h, w]` (or `[h, w]`).
pub fn count_mask_components(mask: &Tensor) -> Result<usize> {
    let (h, w) = match mask.shape() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => {
            return Err(Error::BadShape {
                op: "count_mask_components",
                expected: "a [1, h, w] or [h, w] mask",
                got: other.to_vec(),
            })
        }
    };
    let data = mask.data();
    let mut seen = vec![false; h * w];
    let mut components = 0;
    for start in 0..h * w {
        if seen[start] || data[start] == 0.0 {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut push = |ny: i64, nx: i64| {
                if (0..h as i64).contains(&ny) && (0..w as i64).contains(&nx) {
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && data[q] != 0.0 {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            };
            push(y as i64 - 1, x as i64);
            push(y as i64 + 1, x as i64);
            push(y as i64, x as i64 - 1);
            push(y as i64, x as i64 + 1);
        }
    }
    Ok(components)
}

// ---- speckle ----

/// A clean image with its speckle-corrupted counterpart.
#[derive(Debug, Clone)]
pub struct NoisePairing {
    pub clean: Tensor,
    pub noisy: Tensor,
    pub noise_power: f64,
}

/// Multiplicative speckle: `noisy = clip(clean * (1 + n), 0, 1)` with
/// `n ~ N(0, noise_power)` i.i.d. per pixel.
pub fn add_speckle<R: Rng + ?Sized>(clean: &Tensor, noise_power: f64, rng: &mut R) -> Result<NoisePairing> {
    if !(0.0..=4.0).contains(&noise_power) {
        return Err(Error::InvalidDataset(format!(
            "noise_power must be in [0, 4], got {noise_power}"
        )));
    }
    let sigma = noise_power.sqrt();
    let noisy: Vec<f64> = clean
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            (v * (1.0 + sigma * n)).clamp(0.0, 1.0)
        })
        .collect();
    Ok(NoisePairing {
        clean: clean.clone(),
        noisy: Tensor::new(clean.shape().to_vec(), noisy)?,
        noise_power,
    })
}

// ---- pixel intensity KDE ----

/// Gaussian kernel density of the pooled pixel values of `images`, evaluated
/// on `grid`. With a grid that extends a few bandwidths past the data range,
/// the trapezoid integral over the grid is ~1.
pub fn pixel_kde(images: &[Tensor], grid: &[f64], bandwidth: f64) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::InvalidDataset("pixel_kde needs at least one image".into()));
    }
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidMetric(
            "kde grid must be strictly increasing with >= 2 points".into(),
        ));
    }
    if bandwidth <= 0.0 || !bandwidth.is_finite() {
        return Err(Error::InvalidMetric(format!(
            "kde bandwidth must be positive, got {bandwidth}"
        )));
    }
    let total: usize = images.iter().map(|t| t.len()).sum();
    let norm = 1.0 / (total as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let mut density = vec![0.0; grid.len()];
    for img in images {
        for &px in img.data() {
            for (d, &g) in density.iter_mut().zip(grid) {
                let z = (g - px) / bandwidth;
                *d += (-0.5 * z * z).exp();
            }
        }
    }
    for d in &mut density {
        *d *= norm;
    }
    Ok(density)
}

/// Trapezoid integral of `values` over `grid`.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| 0.5 * (v[0] + v[1]) * (g[1] - g[0]))
        .sum()
}

// ---- file formats ----

#[derive(Debug, Serialize, Deserialize)]
struct ImageIndexEntry {
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageIndex {
    name: String,
    data_shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    generator: BTreeMap<String, serde_json::Value>,
    items: Vec<ImageIndexEntry>,
}

/// Writes an image dataset as one 16-bit binary PGM per image (plus one per
/// mask) and an `index.json` carrying labels and file references.
pub fn dump_images(ds: &Dataset, dir: &Path, generator: BTreeMap<String, serde_json::Value>) -> Result<()> {
    let (h, w) = match ds.data_shape.as_slice() {
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::InvalidDataset(format!(
                "dump_images expects [1, h, w] data, got {other:?}"
            )))
        }
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut items = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let image = format!("img_{i:05}.pgm");
        write_pgm(&dir.join(&image), w, h, ds.sample(i).data())?;
        let mask = match ds.mask(i) {
            Some(m) => {
                let name = format!("mask_{i:05}.pgm");
                write_pgm(&dir.join(&name), w, h, m.data())?;
                Some(name)
            }
            None => None,
        };
        items.push(ImageIndexEntry {
            image,
            label: ds.label(i),
            mask,
        });
    }
    let index = ImageIndex {
        name: ds.name.clone(),
        data_shape: ds.data_shape.clone(),
        num_classes: ds.num_classes,
        generator,
        items,
    };
    let path = dir.join("index.json");
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset written by [`dump_images`].
pub fn load_images(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.json");
    let raw = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: ImageIndex = serde_json::from_str(&raw)?;
    let (h, w) = match index.data_shape.as_slice() {
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::DatasetIo {
                path: index_path,
                detail: format!("unsupported data_shape {other:?} in index"),
            })
        }
    };
    let mut samples = Vec::with_capacity(index.items.len());
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    for item in &index.items {
        let img = read_pgm(&dir.join(&item.image), w, h)?;
        samples.push(Tensor::new(vec![1, h, w], img)?);
        if let Some(l) = item.label {
            labels.push(l);
        }
        if let Some(m) = &item.mask {
            let data = read_pgm(&dir.join(m), w, h)?;
            // masks are exact 0/1 after 16-bit quantisation
            let bin: Vec<f64> = data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
            masks.push(Tensor::new(vec![1, h, w], bin)?);
        }
    }
    let n = index.items.len();
    Dataset::new(
        index.name,
        index.data_shape,
        samples,
        (labels.len() == n).then_some(labels),
        (masks.len() == n).then_some(masks),
        index.num_classes,
    )
}

/// Binary PGM (P5), maxval 65535, big-endian samples per the Netpbm spec.
/// Values are clamped to [0, 1] before quantisation.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::DataLength {
            shape: vec![height, width],
            expected: width * height,
            got: data.len(),
        });
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{width} {height}\n65535\n").map_err(|e| Error::io(path, e))?;
    for &v in data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.write_all(&q.to_be_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a maxval-65535 binary PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path, width: usize, height: usize) -> Result<Vec<f64>> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::DatasetIo {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    // header: magic, width, height, maxval, single whitespace, then samples
    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> Result<String> {
        while pos < raw.len() && (raw[pos].is_ascii_whitespace() || raw[pos] == b'#') {
            if raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        String::from_utf8(raw[start..pos].to_vec())
            .map_err(|_| Error::DatasetIo {
                path: path.to_path_buf(),
                detail: "non-UTF8 header token".into(),
            })
    };
    if token(&raw)? != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let (fw, fh): (usize, usize) = (
        token(&raw)?.parse().map_err(|_| bad("bad width"))?,
        token(&raw)?.parse().map_err(|_| bad("bad height"))?,
    );
    if (fw, fh) != (width, height) {
        return Err(bad(&format!("expected {width}x{height}, file is {fw}x{fh}")));
    }
    let maxval: u32 = token(&raw)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 65535 {
        return Err(bad(&format!("expected maxval 65535, got {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    let need = width * height * 2;
    if raw.len() < pos + need {
        return Err(bad("truncated sample data"));
    }
    let body = &raw[pos..pos + need];
    Ok(body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect())
}

/// Toy 2-D CSV: header `x,y,label`, label empty when absent.
pub fn dump_toy2d(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.data_shape != [2] {
        return Err(Error::InvalidDataset(format!(
            "dump_toy2d expects 2-D data, got shape {:?}",
            ds.data_shape
        )));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "x,y,label").map_err(|e| Error::io(path, e))?;
    for i in 0..ds.len() {
        let d = ds.sample(i).data();
        match ds.label(i) {
            Some(l) => writeln!(out, "{},{},{l}", d[0], d[1]),
            None => writeln!(out, "{},{},", d[0], d[1]),
        }
        .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Loads a CSV written by [`dump_toy2d`].
pub fn load_toy2d(path: &Path, name: &str) -> Result<Dataset> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if lineno == 0 {
            continue; // header
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::DatasetIo {
                path: path.to_path_buf(),
                detail: format!("line {} has {} fields, expected 3", lineno + 1, parts.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::DatasetIo {
                path: path.to_path_buf(),
                detail: format!("bad number `{s}` on line {}", lineno + 1),
            })
        };
        samples.push(Tensor::new(vec![2], vec![parse(parts[0])?, parse(parts[1])?])?);
        if !parts[2].is_empty() {
            labels.push(parts[2].parse().map_err(|_| Error::DatasetIo {
                path: path.to_path_buf(),
                detail: format!("bad label `{}` on line {}", parts[2], lineno + 1),
            })?);
        }
    }
    let n = samples.len();
    let labels = (labels.len() == n).then_some(labels);
    let num_classes = labels.as_ref().map(|l| l.iter().max().copied().unwrap_or(0) + 1);
    Dataset::new(name.into(), vec![2], samples, labels, None, num_classes)
}
