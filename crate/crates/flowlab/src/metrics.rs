//! Distribution distances and image-quality scores used to compare sampler
//! outputs against held-out data.
//!
//! Sample sets are batched tensors: axis 0 indexes samples, the remaining
//! axes are flattened into feature rows. All metrics are pure functions,
//! deterministic given their seeds, so evaluation reports are reproducible
//! bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write as IoWrite;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::samplers::SamplerConfig;

// ---------------------------------------------------------------------------
// Kernels

/// Scale factors applied to the median pairwise distance to form the default
/// multi-scale kernel. One bandwidth is rarely right for every dataset; the
/// sum over scales keeps the statistic sensitive at several resolutions.
const MEDIAN_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Rbf,
}

/// A sum of RBF kernels, one term per bandwidth sigma:
/// k(a, b) = sum_s exp(-|a - b|^2 / (2 sigma_s^2)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidths: Vec<f64>,
}

impl KernelSpec {
    pub fn rbf(bandwidths: Vec<f64>) -> Result<Self> {
        let spec = KernelSpec {
            kind: KernelKind::Rbf,
            bandwidths,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::InvalidMetric(
                "kernel needs at least one bandwidth".into(),
            ));
        }
        if let Some(b) = self
            .bandwidths
            .iter()
            .find(|b| !b.is_finite() || **b <= 0.0)
        {
            return Err(Error::InvalidMetric(format!(
                "kernel bandwidths must be positive and finite, got {b}"
            )));
        }
        Ok(())
    }

    /// Multi-scale kernel centred on the data: the median pairwise distance
    /// over the pooled samples, scaled by {0.25, 0.5, 1, 2, 4}. Falls back
    /// to bandwidth 1 when every pooled point coincides.
    pub fn median_heuristic(x: &Tensor, y: &Tensor) -> Result<Self> {
        let (xr, dx) = rows_of(x, "median_heuristic")?;
        let (yr, dy) = rows_of(y, "median_heuristic")?;
        if dx != dy {
            return Err(Error::ShapeMismatch {
                op: "median_heuristic",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let pooled: Vec<&[f64]> = xr.iter().chain(yr.iter()).copied().collect();
        let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
        for i in 0..pooled.len() {
            for j in (i + 1)..pooled.len() {
                dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if dists.is_empty() {
            0.0
        } else if dists.len() % 2 == 1 {
            dists[dists.len() / 2]
        } else {
            0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
        };
        let base = if median > 0.0 { median } else { 1.0 };
        KernelSpec::rbf(MEDIAN_SCALES.iter().map(|s| s * base).collect())
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2 = sq_dist(a, b);
        self.bandwidths
            .iter()
            .map(|s| (-d2 / (2.0 * s * s)).exp())
            .sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Splits a batched tensor into per-sample feature rows.
fn rows_of<'t>(x: &'t Tensor, op: &'static str) -> Result<(Vec<&'t [f64]>, usize)> {
    if x.rank() == 0 || x.shape()[0] == 0 {
        return Err(Error::BadShape {
            op: "metrics",
            expected: "non-empty batched samples [n, ...]",
            got: x.shape().to_vec(),
        });
    }
    let n = x.shape()[0];
    let dim = x.len() / n;
    let _ = op;
    Ok((x.data().chunks_exact(dim).collect(), dim))
}

// ---------------------------------------------------------------------------
// MMD

/// Unbiased squared maximum mean discrepancy between two sample sets.
///
/// Equal counts use the paired two-sample U-statistic
///   1/(n(n-1)) sum_{i != j} [k(xi,xj) + k(yi,yj) - k(xi,yj) - k(xj,yi)],
/// which excludes every matched pairing; feeding the same set twice gives
/// exactly 0. Unequal counts use the general unbiased form with off-diagonal
/// within-set sums and the full cross sum. Both are unbiased, so small or
/// slightly negative values are ordinary estimator variance and are reported
/// as-is.
pub fn mmd2(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    kernel.validate()?;
    let (xr, dx) = rows_of(x, "mmd2")?;
    let (yr, dy) = rows_of(y, "mmd2")?;
    if dx != dy {
        return Err(Error::ShapeMismatch {
            op: "mmd2",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let (n, m) = (xr.len(), yr.len());
    if n < 2 || m < 2 {
        return Err(Error::InsufficientSamples {
            metric: "mmd2",
            need: "at least 2 samples per set".into(),
            got: n.min(m),
        });
    }
    if n == m {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                acc += kernel.eval(xr[i], xr[j]) + kernel.eval(yr[i], yr[j])
                    - kernel.eval(xr[i], yr[j])
                    - kernel.eval(xr[j], yr[i]);
            }
        }
        Ok(acc / (n as f64 * (n as f64 - 1.0)))
    } else {
        let mut xx = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += kernel.eval(xr[i], xr[j]);
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    yy += kernel.eval(yr[i], yr[j]);
                }
            }
        }
        let mut xy = 0.0;
        for xi in &xr {
            for yj in &yr {
                xy += kernel.eval(xi, yj);
            }
        }
        Ok(xx / (n as f64 * (n as f64 - 1.0)) + yy / (m as f64 * (m as f64 - 1.0))
            - 2.0 * xy / (n as f64 * m as f64))
    }
}

// ---------------------------------------------------------------------------
// Sliced Wasserstein

/// Mean 1-D Wasserstein-1 distance over random unit projection directions.
///
/// Each direction is drawn from the rotation-invariant distribution (a
/// normalised Gaussian vector), the two sample sets are projected and
/// compared with the exact quantile-coupling distance. Deterministic for a
/// fixed seed; symmetric in its arguments.
pub fn sliced_wasserstein(x: &Tensor, y: &Tensor, num_projections: usize, seed: u64) -> Result<f64> {
    if num_projections == 0 {
        return Err(Error::InvalidMetric(
            "sliced_wasserstein needs at least one projection".into(),
        ));
    }
    let (xr, dx) = rows_of(x, "sliced_wasserstein")?;
    let (yr, dy) = rows_of(y, "sliced_wasserstein")?;
    if dx != dy {
        return Err(Error::ShapeMismatch {
            op: "sliced_wasserstein",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..num_projections {
        let u = unit_direction(dx, &mut rng);
        let mut px: Vec<f64> = xr.iter().map(|r| dot(r, &u)).collect();
        let mut py: Vec<f64> = yr.iter().map(|r| dot(r, &u)).collect();
        px.sort_by(|a, b| a.partial_cmp(b).unwrap());
        py.sort_by(|a, b| a.partial_cmp(b).unwrap());
        total += wasserstein1_sorted(&px, &py);
    }
    Ok(total / num_projections as f64)
}

fn unit_direction(dim: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact W1 between two sorted empirical distributions, possibly of unequal
/// size: the quantile functions are piecewise constant with breakpoints at
/// integer multiples of 1/n and 1/m, so walking the merged breakpoints in
/// units of 1/(n m) integrates |Fx^-1 - Fy^-1| exactly. Equal sizes reduce to
/// the mean absolute difference of the sorted values.
fn wasserstein1_sorted(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as u64;
    let m = ys.len() as u64;
    let total = n * m;
    let (mut i, mut j) = (0usize, 0usize);
    let mut q: u64 = 0;
    let mut acc = 0.0;
    while q < total {
        let qx = (i as u64 + 1) * m;
        let qy = (j as u64 + 1) * n;
        let qn = qx.min(qy);
        acc += (qn - q) as f64 * (xs[i] - ys[j]).abs();
        q = qn;
        if qn == qx {
            i += 1;
        }
        if qn == qy {
            j += 1;
        }
    }
    acc / total as f64
}

// ---------------------------------------------------------------------------
// Image quality

const SSIM_C1: f64 = 1e-4; // (0.01)^2 on unit dynamic range
const SSIM_C2: f64 = 9e-4; // (0.03)^2

/// Views an image tensor as (h, w, data), accepting [h, w] or [1, h, w].
fn image_view<'t>(x: &'t Tensor, op: &'static str) -> Result<(usize, usize, &'t [f64])> {
    match x.shape() {
        [h, w] => Ok((*h, *w, x.data())),
        [1, h, w] => Ok((*h, *w, x.data())),
        other => Err(Error::BadShape {
            op,
            expected: "[h, w] or [1, h, w] image",
            got: other.to_vec(),
        }),
    }
}

/// Mean local structural similarity with a uniform square window.
///
/// Standard constants C1 = (0.01)^2 and C2 = (0.03)^2 for unit dynamic
/// range; the window slides over every position where it fits entirely.
/// Symmetric, 1 exactly for identical images, and negative for strongly
/// anticorrelated structure.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (h, w, da) = image_view(a, "ssim")?;
    let (_, _, db) = image_view(b, "ssim")?;
    if window == 0 {
        return Err(Error::InvalidMetric("ssim window must be positive".into()));
    }
    if h < window || w < window {
        return Err(Error::InvalidMetric(format!(
            "image {h}x{w} smaller than ssim window {window}"
        )));
    }
    for v in da.iter().chain(db) {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::InvalidMetric(format!(
                "ssim expects values in [0, 1], got {v}"
            )));
        }
    }
    let area = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=(h - window) {
        for left in 0..=(w - window) {
            let (mut sa, mut sb) = (0.0, 0.0);
            for r in top..top + window {
                for c in left..left + window {
                    sa += da[r * w + c];
                    sb += db[r * w + c];
                }
            }
            let (mua, mub) = (sa / area, sb / area);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for r in top..top + window {
                for c in left..left + window {
                    let xa = da[r * w + c] - mua;
                    let xb = db[r * w + c] - mub;
                    va += xa * xa;
                    vb += xb * xb;
                    cov += xa * xb;
                }
            }
            va /= area;
            vb /= area;
            cov /= area;
            let lum = (2.0 * mua * mub + SSIM_C1) / (mua * mua + mub * mub + SSIM_C1);
            let st = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
            total += lum * st;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio in dB against unit dynamic range:
/// -10 log10(MSE). Identical images report +infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mse = sq_dist(a.data(), b.data()) / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Signal-to-noise ratio in dB: 10 log10(|signal|^2 / |signal - noisy|^2).
/// Identical inputs report +infinity.
pub fn snr(signal: &Tensor, noisy: &Tensor) -> Result<f64> {
    if signal.shape() != noisy.shape() {
        return Err(Error::ShapeMismatch {
            op: "snr",
            left: signal.shape().to_vec(),
            right: noisy.shape().to_vec(),
        });
    }
    let power: f64 = signal.data().iter().map(|v| v * v).sum();
    let noise = sq_dist(signal.data(), noisy.data());
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (power / noise).log10())
}

// ---------------------------------------------------------------------------
// Intensity shift

/// Abramowitz-Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Silverman's rule-of-thumb KDE bandwidth, floored at 1e-3 so constant
/// populations still smooth.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    (1.06 * var.sqrt() * n.powf(-0.2)).max(1e-3)
}

/// Gaussian-KDE mass of the pooled pixel intensities inside [lo, hi].
/// Bandwidth by Silverman's rule on the pixel population.
fn kde_band_mass(pixels: &[f64], lo: f64, hi: f64) -> f64 {
    let n = pixels.len() as f64;
    let h = silverman_bandwidth(pixels);
    pixels
        .iter()
        .map(|&p| normal_cdf((hi - p) / h) - normal_cdf((lo - p) / h))
        .sum::<f64>()
        / n
}

/// Difference in smoothed intensity mass inside a band:
/// (generated mass) - (real mass). Positive means the generated images put
/// more of their pixels in the band, e.g. a bright-range bias.
pub fn intensity_shift(real: &Tensor, generated: &Tensor, band: [f64; 2]) -> Result<f64> {
    let [lo, hi] = band;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(Error::InvalidMetric(format!(
            "band [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1"
        )));
    }
    if real.len() == 0 || generated.len() == 0 {
        return Err(Error::InsufficientSamples {
            metric: "intensity_shift",
            need: "at least one pixel per set".into(),
            got: 0,
        });
    }
    Ok(kde_band_mass(generated.data(), lo, hi) - kde_band_mass(real.data(), lo, hi))
}

// ---------------------------------------------------------------------------
// Evaluation report

/// One metric result with the sample sizes that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricEntry {
    pub name: String,
    #[serde(with = "lossless_f64")]
    pub value: f64,
    pub n_real: usize,
    pub n_generated: usize,
    pub config_digest: String,
}

/// Where the evaluated samples came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub checkpoint: String,
    pub sampler: Option<SamplerConfig>,
    pub dataset: String,
}

/// A full evaluation: provenance plus one row per metric. Serializes to JSON
/// losslessly (infinities included) and exports to CSV for table assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub entries: Vec<MetricEntry>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// One metric per row; provenance in leading comment lines.
    pub fn write_csv<W: IoWrite>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# checkpoint: {}", self.provenance.checkpoint)?;
        writeln!(out, "# dataset: {}", self.provenance.dataset)?;
        if let Some(s) = &self.provenance.sampler {
            writeln!(
                out,
                "# sampler: {} steps={} seed={}",
                s.family.name(),
                s.steps,
                s.seed
            )?;
        }
        writeln!(out, "metric,value,n_real,n_generated,config_digest")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.name, e.value, e.n_real, e.n_generated, e.config_digest
            )?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        buf.flush().map_err(|e| Error::io(path, e))
    }
}

/// JSON has no literal for infinities, so finite values serialize as numbers
/// and the psnr/snr sentinels as the strings "inf" / "-inf".
mod lossless_f64 {
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(D::Error::custom(format!("bad float literal {other:?}"))),
            },
        }
    }
}

// ---------------------------------------------------------------------------
