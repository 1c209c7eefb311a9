//! Synthetic paired dataset: class-dependent sinusoids with warping and
//! uniform noise, and Gramian angular summation field (GASF) images.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::bin_range;
use crate::num::{Array, Rng};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("class {0} outside 1..={1}")]
    BadClass(usize, usize),
    #[error("length {0} too short")]
    BadLength(usize),
    #[error("series is constant; cannot rescale")]
    ConstantSeries,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Clean class signal `sin(0.05 * t / k)`, `t = 1..=n`.
pub fn clean_signal(k: usize, n: usize) -> Vec<f64> {
    (1..=n).map(|t| (0.05 * t as f64 / k as f64).sin()).collect()
}

/// Clean class-`k` sinusoid (1-based class) plus `U(0, noise_b)` noise.
pub fn gen_signal(
    k: usize,
    n: usize,
    noise_b: f64,
    classes: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>, SynthError> {
    if k == 0 || k > classes {
        return Err(SynthError::BadClass(k, classes));
    }
    if n < 2 {
        return Err(SynthError::BadLength(n));
    }
    if !(noise_b >= 0.0) {
        return Err(SynthError::InvalidConfig(format!(
            "noise bound {noise_b} is negative"
        )));
    }
    let mut x = clean_signal(k, n);
    add_uniform_noise(&mut x, noise_b, rng);
    Ok(x)
}

pub fn add_uniform_noise(x: &mut [f64], b: f64, rng: &mut Rng) {
    if b == 0.0 {
        return;
    }
    for v in x {
        *v += rng.uniform_range(0.0, b);
    }
}

/// Natural cubic spline through `(xs[i], ys[i])` with increasing `xs`,
/// evaluated at each of `at`.
pub fn natural_cubic_spline(xs: &[f64], ys: &[f64], at: &[f64]) -> Vec<f64> {
    let n = xs.len();
    assert!(n >= 2 && ys.len() == n, "spline needs matching knots");
    // Second derivatives m with m[0] = m[n-1] = 0 (tridiagonal solve).
    let mut m = vec![0.0; n];
    if n > 2 {
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let size = n - 2;
        let mut diag = vec![0.0; size];
        let mut rhs = vec![0.0; size];
        for i in 0..size {
            diag[i] = 2.0 * (h[i] + h[i + 1]);
            rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i]);
        }
        for i in 1..size {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * h[i];
            rhs[i] -= w * rhs[i - 1];
        }
        for i in (0..size).rev() {
            let upper = if i + 1 < size { h[i + 1] * m[i + 2] } else { 0.0 };
            m[i + 1] = (rhs[i] - upper) / diag[i];
        }
    }
    at.iter()
        .map(|&x| {
            let j = match xs.iter().rposition(|&k| k <= x) {
                Some(j) if j + 1 < n => j,
                Some(_) => n - 2,
                None => 0,
            };
            let h = xs[j + 1] - xs[j];
            let a = (xs[j + 1] - x) / h;
            let b = (x - xs[j]) / h;
            a * ys[j] + b * ys[j + 1] + ((a * a * a - a) * m[j] + (b * b * b - b) * m[j + 1]) * h * h / 6.0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    TimeWarp,
    MagnitudeWarp,
    /// Additive Gaussian noise with standard deviation sigma.
    Jitter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpConfig {
    pub sigma: f64,
    pub knots: usize,
    /// Applied in order to every time-series before the uniform noise.
    pub kinds: Vec<AugmentKind>,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            sigma: 0.2,
            knots: 4,
            kinds: vec![AugmentKind::TimeWarp, AugmentKind::MagnitudeWarp],
        }
    }
}

/// Smooth random curve over `0..n` through `knots` equally spaced knots
/// drawn from `N(1, sigma)`; the first and last knots are pinned to 1.
fn random_envelope(n: usize, knots: usize, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let knots = knots.max(2);
    let span = (n - 1) as f64;
    let xs: Vec<f64> = (0..knots).map(|i| span * i as f64 / (knots - 1) as f64).collect();
    let ys: Vec<f64> = (0..knots)
        .map(|i| {
            if i == 0 || i == knots - 1 {
                1.0
            } else {
                rng.normal(1.0, sigma)
            }
        })
        .collect();
    let at: Vec<f64> = (0..n).map(|i| i as f64).collect();
    natural_cubic_spline(&xs, &ys, &at)
}

/// Linear interpolation of `x` at fractional positions.
fn resample(x: &[f64], positions: &[f64]) -> Vec<f64> {
    let last = x.len() - 1;
    positions
        .iter()
        .map(|&p| {
            let p = p.clamp(0.0, last as f64);
            let i = (p.floor() as usize).min(last.saturating_sub(1));
            let f = p - i as f64;
            x[i] * (1.0 - f) + x[(i + 1).min(last)] * f
        })
        .collect()
}

/// One augmentation; `sigma == 0` leaves the signal unchanged.
pub fn augment(x: &[f64], kind: AugmentKind, sigma: f64, knots: usize, rng: &mut Rng) -> Vec<f64> {
    if sigma == 0.0 || x.len() < 2 {
        return x.to_vec();
    }
    let n = x.len();
    match kind {
        AugmentKind::MagnitudeWarp => {
            let env = random_envelope(n, knots, sigma, rng);
            x.iter().zip(&env).map(|(v, e)| v * e).collect()
        }
        AugmentKind::TimeWarp => {
            // Local speed from a positive envelope; cumulative time is
            // rescaled so the first and last samples stay in place.
            let speed: Vec<f64> = random_envelope(n, knots, sigma, rng)
                .into_iter()
                .map(|s| s.max(0.05))
                .collect();
            let mut tau = vec![0.0; n];
            for i in 1..n {
                tau[i] = tau[i - 1] + 0.5 * (speed[i - 1] + speed[i]);
            }
            let scale = (n - 1) as f64 / tau[n - 1];
            let positions: Vec<f64> = tau.iter().map(|t| t * scale).collect();
            resample(x, &positions)
        }
        AugmentKind::Jitter => x.iter().map(|v| v + rng.normal(0.0, sigma)).collect(),
    }
}

/// Affine map of `x` onto `[p, q]`.
pub fn rescale(x: &[f64], p: f64, q: f64) -> Result<Vec<f64>, SynthError> {
    if !(-1.0..=1.0).contains(&p) || !(-1.0..=1.0).contains(&q) || !(p < q) {
        return Err(SynthError::InvalidConfig(format!(
            "range [{p}, {q}] must satisfy -1 <= p < q <= 1"
        )));
    }
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(SynthError::ConstantSeries);
    }
    Ok(x.iter()
        .map(|v| {
            if *v == max {
                q
            } else {
                p + (q - p) * (v - min) / (max - min)
            }
        })
        .collect())
}

/// Piecewise aggregate approximation: mean over `out` contiguous segments.
pub fn paa(x: &[f64], out: usize) -> Vec<f64> {
    (0..out)
        .map(|j| {
            let (s, e) = bin_range(j, out, x.len());
            x[s..e].iter().sum::<f64>() / (e - s) as f64
        })
        .collect()
}

/// GASF of `x` aggregated to `size` points and rescaled to `[p, q]`:
/// `G[i][j] = cos(phi_i + phi_j)`, `phi = arccos(x_hat)`. Returned as a
/// row-major `[size, size]` array.
pub fn gasf(x: &[f64], p: f64, q: f64, size: usize) -> Result<Array, SynthError> {
    if size < 2 || size > x.len() {
        return Err(SynthError::InvalidConfig(format!(
            "image size {size} must be within 2..={}",
            x.len()
        )));
    }
    let xh = rescale(&paa(x, size), p, q)?;
    let sines: Vec<f64> = xh.iter().map(|v| (1.0 - v * v).max(0.0).sqrt()).collect();
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let g = xh[i] * xh[j] - sines[i] * sines[j];
            data.push(g.clamp(-1.0, 1.0));
        }
    }
    Ok(Array::new(vec![size, size], data).expect("square image"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub timesteps: usize,
    /// Samples per class across both splits.
    pub per_class: usize,
    pub val_per_class: usize,
    pub signal_noise: f64,
    pub image_noise: f64,
    pub image_size: usize,
    pub range: (f64, f64),
    pub warp: WarpConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            timesteps: 1000,
            per_class: 120,
            val_per_class: 20,
            signal_noise: 0.3,
            image_noise: 0.0,
            image_size: 100,
            range: (-1.0, 1.0),
            warp: WarpConfig::default(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.classes == 0 {
            return bad("classes must be positive".into());
        }
        if self.timesteps < 2 {
            return Err(SynthError::BadLength(self.timesteps));
        }
        if self.val_per_class == 0 || self.val_per_class >= self.per_class {
            return bad(format!(
                "val_per_class {} must be in 1..{}",
                self.val_per_class, self.per_class
            ));
        }
        if !(self.signal_noise >= 0.0) || !(self.image_noise >= 0.0) {
            return bad("noise bounds must be nonnegative".into());
        }
        if !(self.warp.sigma >= 0.0) || self.warp.knots < 2 {
            return bad("warp needs sigma >= 0 and at least 2 knots".into());
        }
        if self.image_size < 2 || self.image_size > self.timesteps {
            return bad(format!(
                "image size {} outside 2..={}",
                self.image_size, self.timesteps
            ));
        }
        let (p, q) = self.range;
        if !(-1.0 <= p && p < q && q <= 1.0) {
            return bad(format!("range [{p}, {q}] must satisfy -1 <= p < q <= 1"));
        }
        Ok(())
    }

    pub fn train_per_class(&self) -> usize {
        self.per_class - self.val_per_class
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
}

/// Samples of one split: signals `[N, timesteps, 1]`, images
/// `[N, size, size, 1]`, labels `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub signals: Array,
    pub images: Array,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` of a `[N, ...]` array.
    pub fn gather(array: &Array, indices: &[usize]) -> Array {
        let mut shape = array.shape().to_vec();
        let per = array.len() / shape[0];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(array.row(i));
        }
        shape[0] = indices.len();
        Array::new(shape, data).expect("gathered rows")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub train: Split,
    pub val: Split,
}

impl SyntheticDataset {
    pub fn split(&self, tag: SplitTag) -> &Split {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
        }
    }
}

/// One paired sample: warped noisy signal and the GASF of the clean
/// sinusoid with image noise. Streams are keyed by class and index so each
/// sample is independent of generation order.
fn gen_pair(
    config: &DatasetConfig,
    k: usize,
    index: usize,
    root: &Rng,
) -> Result<(Vec<f64>, Array), SynthError> {
    let key = (k as u64) << 32 | index as u64;
    let mut srng = root.split_named("signal").split(key);
    let mut irng = root.split_named("image").split(key);

    let mut x = clean_signal(k, config.timesteps);
    for &kind in &config.warp.kinds {
        x = augment(&x, kind, config.warp.sigma, config.warp.knots, &mut srng);
    }
    add_uniform_noise(&mut x, config.signal_noise, &mut srng);

    let mut src = clean_signal(k, config.timesteps);
    add_uniform_noise(&mut src, config.image_noise, &mut irng);
    let image = gasf(&src, config.range.0, config.range.1, config.image_size)?;
    Ok((x, image))
}

/// Deterministic stratified dataset: for each class the first
/// `train_per_class` samples go to train, the rest to val.
pub fn gen_dataset(config: &DatasetConfig) -> Result<SyntheticDataset, SynthError> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let (n, s) = (config.timesteps, config.image_size);
    let mut parts = [
        (Vec::new(), Vec::new(), Vec::new()),
        (Vec::new(), Vec::new(), Vec::new()),
    ];
    for k in 1..=config.classes {
        for index in 0..config.per_class {
            let (x, img) = gen_pair(config, k, index, &root)?;
            let part = &mut parts[usize::from(index >= config.train_per_class())];
            part.0.extend(x);
            part.1.extend_from_slice(img.data());
            part.2.push(k - 1);
        }
    }
    let [train, val] = parts.map(|(sig, img, labels)| Split {
        signals: Array::new(vec![labels.len(), n, 1], sig).expect("signal batch"),
        images: Array::new(vec![labels.len(), s, s, 1], img).expect("image batch"),
        labels,
    });
    Ok(SyntheticDataset {
        config: config.clone(),
        train,
        val,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub train_labels: Vec<usize>,
    pub val_labels: Vec<usize>,
}

fn write_f64(path: &Path, values: &[f64]) -> Result<(), SynthError> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_f64(path: &Path, expected: usize) -> Result<Vec<f64>, SynthError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected * 8 {
        return Err(SynthError::Malformed(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Binary PGM rendering of a `[-1, 1]` image.
pub fn to_pgm(image: &[f64], size: usize) -> Vec<u8> {
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend(
        image
            .iter()
            .map(|v| (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Writes `manifest.json` and per-sample `<split>/<index>.signal.f64` and
/// `.image.f64` files (little-endian), plus `.pgm` previews on request.
pub fn write_dataset(dir: &Path, data: &SyntheticDataset, pgm: bool) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = DatasetManifest {
        config: data.config.clone(),
        train_labels: data.train.labels.clone(),
        val_labels: data.val.labels.clone(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    let size = data.config.image_size;
    for (name, split) in [("train", &data.train), ("val", &data.val)] {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        for i in 0..split.len() {
            write_f64(&sub.join(format!("{i:06}.signal.f64")), split.signals.row(i))?;
            write_f64(&sub.join(format!("{i:06}.image.f64")), split.images.row(i))?;
            if pgm {
                let p = sub.join(format!("{i:06}.pgm"));
                fs::write(&p, to_pgm(split.images.row(i), size)).map_err(io_err(&p))?;
            }
        }
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, SynthError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| SynthError::Malformed(format!("{}: {e}", path.display())))
}

pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset, SynthError> {
    let manifest = read_manifest(dir)?;
    let config = manifest.config;
    config.validate()?;
    let (n, s) = (config.timesteps, config.image_size);
    let load = |name: &str, labels: Vec<usize>| -> Result<Split, SynthError> {
        let sub = dir.join(name);
        let mut sig = Vec::with_capacity(labels.len() * n);
        let mut img = Vec::with_capacity(labels.len() * s * s);
        for i in 0..labels.len() {
            sig.extend(read_f64(&sub.join(format!("{i:06}.signal.f64")), n)?);
            img.extend(read_f64(&sub.join(format!("{i:06}.image.f64")), s * s)?);
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= config.classes) {
            return Err(SynthError::Malformed(format!("label {l} out of range")));
        }
        Ok(Split {
            signals: Array::new(vec![labels.len(), n, 1], sig).expect("signal batch"),
            images: Array::new(vec![labels.len(), s, s, 1], img).expect("image batch"),
            labels,
        })
    };
    let train = load("train", manifest.train_labels)?;
    let val = load("val", manifest.val_labels)?;
    Ok(SyntheticDataset { config, train, val })
}
