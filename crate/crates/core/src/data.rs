//! ColorGrid: a procedurally generated image benchmark with a controllable
//! spurious correlation.
//!
//! Every sample is a small RGB grid showing one of `n_classes` fixed binary
//! glyphs (the shape determines the target `y`) drawn over a solid background
//! color (the protected attribute `t`). Each class has one *linked* color;
//! during training the background matches the linked color with probability
//! `q`, so at `q` near 1 color is an almost-perfect shortcut for the class
//! while the glyph remains the only causally valid signal. Evaluation uses a
//! color-uniform split and a split of only bias-conflicting samples.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {field} {detail}")]
    InvalidSpec { field: &'static str, detail: String },
    #[error("cannot place {n_classes} distinct glyphs on a {grid}x{grid} grid")]
    GlyphSpaceExhausted { n_classes: usize, grid: usize },
    #[error("empty sample collection")]
    EmptyInput,
    #[error("not a ColorGrid file: bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported ColorGrid file version {0}")]
    UnsupportedVersion(u32),
    #[error("file inconsistent with header: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Everything that determines a generated dataset. Two equal specs generate
/// bitwise-identical data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Number of target classes; also the number of background colors.
    pub n_classes: usize,
    /// Side length of the square image.
    pub grid: usize,
    /// Probability that a sample's background is its class's linked color.
    /// `1 / n_classes` makes color uniform (unbiased); 0 makes every sample
    /// bias-conflicting.
    pub q: f64,
    /// Samples generated per class (exact).
    pub n_per_class: usize,
    pub seed: u64,
    /// Std of Gaussian pixel noise, applied per channel then clamped to [0,1].
    pub noise_std: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_classes: 10,
            grid: 8,
            q: 0.99,
            n_per_class: 100,
            seed: 0,
            noise_std: 0.05,
        }
    }
}

impl DatasetSpec {
    /// One background color per class.
    pub fn n_colors(&self) -> usize {
        self.n_classes
    }

    pub fn n_samples(&self) -> usize {
        self.n_classes * self.n_per_class
    }

    /// Flattened feature dimension: grid × grid × RGB.
    pub fn input_dim(&self) -> usize {
        self.grid * self.grid * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(DataError::InvalidSpec {
                field: "n_classes",
                detail: format!("must be ≥ 2, got {}", self.n_classes),
            });
        }
        if self.grid < 4 {
            return Err(DataError::InvalidSpec {
                field: "grid",
                detail: format!("must be ≥ 4, got {}", self.grid),
            });
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(DataError::InvalidSpec {
                field: "q",
                detail: format!("must lie in [0,1], got {}", self.q),
            });
        }
        if self.n_per_class == 0 {
            return Err(DataError::InvalidSpec {
                field: "n_per_class",
                detail: "must be ≥ 1".into(),
            });
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::InvalidSpec {
                field: "noise_std",
                detail: format!("must be finite and ≥ 0, got {}", self.noise_std),
            });
        }
        Ok(())
    }

    /// The q value at which color carries no information about the class.
    pub fn unbiased_q(&self) -> f64 {
        1.0 / self.n_colors() as f64
    }
}

/// The color statistically linked to a class: a fixed identity bijection,
/// stable across runs.
pub fn linked_color(y: usize) -> usize {
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorGridSample {
    /// Row-major grid×grid×3 RGB values in [0,1], quantized to f32 precision
    /// so file round-trips are exact.
    pub pixels: Vec<f64>,
    pub y: usize,
    pub t: usize,
    /// Whether `t == linked_color(y)`.
    pub bias_aligned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorGridDataset {
    pub grid: usize,
    pub n_classes: usize,
    pub samples: Vec<ColorGridSample>,
}

impl ColorGridDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.grid * self.grid * 3
    }

    /// Stack the pixels of the given samples into a `[B, grid·grid·3]` matrix.
    pub fn feature_matrix(&self, indices: &[usize]) -> Tensor {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].pixels);
        }
        Tensor::new(vec![indices.len(), d], data).expect("consistent sample dimensions")
    }

    pub fn targets(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].y).collect()
    }

    pub fn attributes(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].t).collect()
    }
}

/// The three evaluation splits of one experiment.
#[derive(Debug, Clone)]
pub struct ProtocolSplits {
    /// Biased training data at the requested q.
    pub train: ColorGridDataset,
    /// Color drawn uniformly, independent of class (q = 1/n_colors).
    pub test_unbiased: ColorGridDataset,
    /// Only samples whose color differs from their class's linked color (q = 0).
    pub test_bias_conflict: ColorGridDataset,
}

// splitmix64: the standard 64-bit finalizer, used to derive independent
// per-sample and per-split seeds from one root seed.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

// Tiny deterministic PRNG for sample synthesis: splitmix64 stream.
struct SampleRng {
    state: u64,
}

impl SampleRng {
    fn new(seed: u64) -> Self {
        SampleRng { state: seed }
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in 0..n.
    fn next_below(&mut self, n: usize) -> usize {
        // n is tiny (colors), modulo bias is negligible but avoid it anyway
        let zone = u64::MAX - u64::MAX % n as u64;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n as u64) as usize;
            }
        }
    }

    /// Standard normal via Box–Muller.
    fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// HSV (h in degrees, s/v in [0,1]) to RGB in [0,1].
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// The fixed background palette: evenly spaced hues.
pub fn color_palette(n_colors: usize) -> Vec<[f64; 3]> {
    (0..n_colors)
        .map(|k| hsv_to_rgb(k as f64 * 360.0 / n_colors as f64, 0.85, 0.95))
        .collect()
}

// Fixed seed for glyph construction, independent of the dataset seed so the
// class shapes are a stable property of (n_classes, grid).
const GLYPH_SEED: u64 = 0x4744_4c59_5048_0001;

/// The fixed binary glyph of each class: pseudo-random sparse masks,
/// pairwise Hamming distance ≥ max(4, cells/8), mirrored left-right so they
/// read as coherent shapes rather than pure speckle. Sparsity is deliberate:
/// the background color must stay the visually dominant feature so that the
/// attribute shortcut is the path of least resistance.
pub fn class_glyphs(n_classes: usize, grid: usize) -> Result<Vec<Vec<bool>>> {
    let cells = grid * grid;
    let min_hamming = (cells / 8).max(4);
    let (lo, hi) = ((cells / 8).max(2), (cells / 4).max(4));
    let mut rng = SampleRng::new(splitmix64(
        GLYPH_SEED ^ ((n_classes as u64) << 32) ^ grid as u64,
    ));
    let mut glyphs: Vec<Vec<bool>> = Vec::with_capacity(n_classes);
    let mut attempts = 0usize;
    while glyphs.len() < n_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(DataError::GlyphSpaceExhausted { n_classes, grid });
        }
        let mut mask = vec![false; cells];
        for r in 0..grid {
            // fill the left half (plus center column when odd) and mirror;
            // fill probability 3/16 targets the sparse density window
            for c in 0..grid.div_ceil(2) {
                let bit = rng.next_u64() % 16 < 3;
                mask[r * grid + c] = bit;
                mask[r * grid + (grid - 1 - c)] = bit;
            }
        }
        let pop = mask.iter().filter(|&&b| b).count();
        if pop < lo || pop > hi {
            continue;
        }
        let distinct = glyphs.iter().all(|g| {
            let dist = g.iter().zip(&mask).filter(|(a, b)| a != b).count();
            dist >= min_hamming
        });
        if distinct {
            glyphs.push(mask);
        }
    }
    Ok(glyphs)
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// How far glyph cells are pushed from the background toward white, per
/// channel. Deliberately well below full contrast: the glyph has to stay
/// decodable only by pooling evidence across its cells, so that early in
/// training the background color is the path of least resistance and the
/// shortcut actually binds. At full contrast a handful of counter-examples
/// is enough for a small MLP to key on the glyph directly, and the bias
/// this benchmark exists to study evaporates.
const GLYPH_CONTRAST: f64 = 0.4;

fn synthesize_sample(
    y: usize,
    sample_seed: u64,
    q: f64,
    glyphs: &[Vec<bool>],
    palette: &[[f64; 3]],
    grid: usize,
    noise_std: f64,
) -> ColorGridSample {
    let n_colors = palette.len();
    let mut rng = SampleRng::new(sample_seed);
    let linked = linked_color(y);
    let t = if rng.next_f64() < q {
        linked
    } else {
        let pick = rng.next_below(n_colors - 1);
        if pick >= linked {
            pick + 1
        } else {
            pick
        }
    };
    let bg = palette[t];
    let fg = [
        bg[0] + GLYPH_CONTRAST * (1.0 - bg[0]),
        bg[1] + GLYPH_CONTRAST * (1.0 - bg[1]),
        bg[2] + GLYPH_CONTRAST * (1.0 - bg[2]),
    ];
    let mask = &glyphs[y];
    let mut pixels = Vec::with_capacity(grid * grid * 3);
    for &lit in mask.iter() {
        let base = if lit { fg } else { bg };
        for b in base {
            let v = b + noise_std * rng.next_gaussian();
            pixels.push(quantize(v.clamp(0.0, 1.0)));
        }
    }
    ColorGridSample {
        pixels,
        y,
        t,
        bias_aligned: t == linked,
    }
}

/// Generate the dataset a spec describes: `n_per_class` samples per class,
/// classes interleaved (`y = index mod n_classes`), each sample synthesized
/// from its own seed derived from `spec.seed` and its index.
pub fn generate(spec: &DatasetSpec) -> Result<ColorGridDataset> {
    spec.validate()?;
    let glyphs = class_glyphs(spec.n_classes, spec.grid)?;
    let palette = color_palette(spec.n_colors());
    let n = spec.n_samples();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % spec.n_classes;
        let sample_seed = splitmix64(spec.seed ^ splitmix64(i as u64));
        samples.push(synthesize_sample(
            y,
            sample_seed,
            spec.q,
            &glyphs,
            &palette,
            spec.grid,
            spec.noise_std,
        ));
    }
    Ok(ColorGridDataset {
        grid: spec.grid,
        n_classes: spec.n_classes,
        samples,
    })
}

/// Per-class test-split size: a tenth of the training allocation, floored at
/// 20 so accuracy estimates stay meaningful for tiny specs.
pub fn test_n_per_class(spec: &DatasetSpec) -> usize {
    (spec.n_per_class / 10).max(20)
}

/// Build the train/eval splits of one experiment from a single spec. The
/// evaluation splits draw from seed streams disjoint from training's.
pub fn split_for_protocol(spec: &DatasetSpec) -> Result<ProtocolSplits> {
    spec.validate()?;
    let train = generate(spec)?;
    let eval_n = test_n_per_class(spec);
    let unbiased_spec = DatasetSpec {
        q: spec.unbiased_q(),
        n_per_class: eval_n,
        seed: splitmix64(spec.seed ^ 0x756e_6269_6173_6564), // "unbiased"
        ..spec.clone()
    };
    let conflict_spec = DatasetSpec {
        q: 0.0,
        n_per_class: eval_n,
        seed: splitmix64(spec.seed ^ 0x636f_6e66_6c69_6374), // "conflict"
        ..spec.clone()
    };
    Ok(ProtocolSplits {
        train,
        test_unbiased: generate(&unbiased_spec)?,
        test_bias_conflict: generate(&conflict_spec)?,
    })
}

/// Fraction of samples whose background is their class's linked color.
pub fn empirical_bias_ratio(samples: &[ColorGridSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let aligned = samples.iter().filter(|s| s.bias_aligned).count();
    Ok(aligned as f64 / samples.len() as f64)
}

const MAGIC: [u8; 4] = *b"CGRD";
const FORMAT_VERSION: u32 = 1;

/// Write a dataset in the flat binary format: little-endian header
/// (magic "CGRD", version, n, grid, n_classes) then per-sample records
/// (f32 pixels, y u16, t u16, bias_aligned u8).
pub fn write_dataset(path: &Path, ds: &ColorGridDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    w.write_all(&(ds.grid as u32).to_le_bytes())?;
    w.write_all(&(ds.n_classes as u32).to_le_bytes())?;
    for s in &ds.samples {
        for &p in &s.pixels {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
        w.write_all(&(s.y as u16).to_le_bytes())?;
        w.write_all(&(s.t as u16).to_le_bytes())?;
        w.write_all(&[s.bias_aligned as u8])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<ColorGridDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    r.read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u32buf)?;
    let grid = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let n_classes = u32::from_le_bytes(u32buf) as usize;
    if grid == 0 || n_classes == 0 {
        return Err(DataError::Corrupt(format!(
            "grid {grid}, n_classes {n_classes}"
        )));
    }
    let dim = grid * grid * 3;
    let mut samples = Vec::with_capacity(n);
    let mut f32buf = [0u8; 4];
    let mut u16buf = [0u8; 2];
    let mut u8buf = [0u8; 1];
    for idx in 0..n {
        let mut pixels = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut f32buf).map_err(|e| truncated(e, idx))?;
            pixels.push(f32::from_le_bytes(f32buf) as f64);
        }
        r.read_exact(&mut u16buf).map_err(|e| truncated(e, idx))?;
        let y = u16::from_le_bytes(u16buf) as usize;
        r.read_exact(&mut u16buf).map_err(|e| truncated(e, idx))?;
        let t = u16::from_le_bytes(u16buf) as usize;
        r.read_exact(&mut u8buf).map_err(|e| truncated(e, idx))?;
        if y >= n_classes || t >= n_classes || u8buf[0] > 1 {
            return Err(DataError::Corrupt(format!(
                "sample {idx}: y={y} t={t} flag={}",
                u8buf[0]
            )));
        }
        samples.push(ColorGridSample {
            pixels,
            y,
            t,
            bias_aligned: u8buf[0] == 1,
        });
    }
    Ok(ColorGridDataset {
        grid,
        n_classes,
        samples,
    })
}

fn truncated(e: io::Error, idx: usize) -> DataError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        DataError::Corrupt(format!("truncated in sample {idx}"))
    } else {
        DataError::Io(e)
    }
}

/// Write an inspection manifest: one CSV row per sample (index, labels,
/// alignment), no pixels.
pub fn write_manifest(path: &Path, ds: &ColorGridDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "index,y,t,bias_aligned")?;
    for (i, s) in ds.samples.iter().enumerate() {
        writeln!(w, "{},{},{},{}", i, s.y, s.t, s.bias_aligned as u8)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_classes: 4,
            grid: 8,
            q: 0.9,
            n_per_class: 50,
            seed: 7,
            noise_std: 0.05,
        }
    }

    #[test]
    fn q_one_aligns_everything() {
        let ds = generate(&DatasetSpec {
            q: 1.0,
            ..small_spec()
        })
        .unwrap();
        assert!(ds.samples.iter().all(|s| s.bias_aligned));
        assert_eq!(empirical_bias_ratio(&ds.samples).unwrap(), 1.0);
    }

    #[test]
    fn q_zero_aligns_nothing() {
        let ds = generate(&DatasetSpec {
            q: 0.0,
            ..small_spec()
        })
        .unwrap();
        assert!(ds.samples.iter().all(|s| !s.bias_aligned));
        assert_eq!(empirical_bias_ratio(&ds.samples).unwrap(), 0.0);
    }

    #[test]
    fn unbiased_q_gives_uniform_colors_per_class() {
        let spec = DatasetSpec {
            n_classes: 10,
            q: 0.1,
            n_per_class: 1000,
            seed: 11,
            ..DatasetSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let ratio = empirical_bias_ratio(&ds.samples).unwrap();
        assert!((ratio - 0.1).abs() < 0.01, "alignment ratio {ratio}");
        // pooled color histogram: tight bound at 10k samples
        for color in 0..10 {
            let freq = ds.samples.iter().filter(|s| s.t == color).count() as f64 / ds.len() as f64;
            assert!(
                (freq - 0.1).abs() < 0.01,
                "color {color} pooled freq {freq}"
            );
        }
        // per-class cells have 1000 samples each: allow ~3.7 sigma
        for class in 0..10 {
            let of_class: Vec<_> = ds.samples.iter().filter(|s| s.y == class).collect();
            assert_eq!(of_class.len(), 1000);
            for color in 0..10 {
                let freq = of_class.iter().filter(|s| s.t == color).count() as f64 / 1000.0;
                assert!(
                    (freq - 0.1).abs() < 0.035,
                    "class {class} color {color} freq {freq}"
                );
            }
        }
    }

    #[test]
    fn high_q_leaves_expected_conflict_fraction() {
        let spec = DatasetSpec {
            n_classes: 10,
            q: 0.99,
            n_per_class: 2000,
            seed: 3,
            ..DatasetSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let ratio = empirical_bias_ratio(&ds.samples).unwrap();
        assert!((ratio - 0.99).abs() < 0.003, "alignment ratio {ratio}");
    }

    #[test]
    fn very_high_q_ratio() {
        let spec = DatasetSpec {
            n_classes: 10,
            q: 0.995,
            n_per_class: 2000,
            seed: 5,
            ..DatasetSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let ratio = empirical_bias_ratio(&ds.samples).unwrap();
        assert!((ratio - 0.995).abs() < 0.002, "alignment ratio {ratio}");
    }

    #[test]
    fn identical_specs_are_bitwise_identical() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_decorrelate() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&DatasetSpec {
            seed: 8,
            ..small_spec()
        })
        .unwrap();
        let differing = a
            .samples
            .iter()
            .zip(&b.samples)
            .filter(|(sa, sb)| sa.t != sb.t || sa.pixels != sb.pixels)
            .count();
        assert!(
            differing > a.len() / 2,
            "only {differing} of {} samples differ",
            a.len()
        );
    }

    #[test]
    fn classes_are_exactly_balanced() {
        let spec = small_spec();
        let ds = generate(&spec).unwrap();
        for class in 0..spec.n_classes {
            assert_eq!(
                ds.samples.iter().filter(|s| s.y == class).count(),
                spec.n_per_class
            );
        }
    }

    #[test]
    fn pixels_are_in_unit_range() {
        let ds = generate(&DatasetSpec {
            noise_std: 0.5,
            ..small_spec()
        })
        .unwrap();
        assert!(ds
            .samples
            .iter()
            .all(|s| s.pixels.iter().all(|&p| (0.0..=1.0).contains(&p))));
    }

    #[test]
    fn glyphs_are_distinct_sparse_and_stable() {
        let g1 = class_glyphs(10, 8).unwrap();
        let g2 = class_glyphs(10, 8).unwrap();
        assert_eq!(g1, g2);
        for (i, a) in g1.iter().enumerate() {
            let pop = a.iter().filter(|&&b| b).count();
            assert!((8..=16).contains(&pop), "glyph {i} density {pop}");
            for b in g1.iter().skip(i + 1) {
                let dist = a.iter().zip(b).filter(|(x, y)| x != y).count();
                assert!(dist >= 8, "glyphs too close: hamming {dist}");
            }
        }
    }

    #[test]
    fn conflict_split_has_no_aligned_samples() {
        let splits = split_for_protocol(&small_spec()).unwrap();
        assert!(splits
            .test_bias_conflict
            .samples
            .iter()
            .all(|s| !s.bias_aligned));
        assert!(!splits.test_bias_conflict.is_empty());
    }

    #[test]
    fn unbiased_split_is_color_uniform() {
        let spec = DatasetSpec {
            n_classes: 10,
            n_per_class: 2000,
            seed: 13,
            ..DatasetSpec::default()
        };
        let splits = split_for_protocol(&spec).unwrap();
        let ds = &splits.test_unbiased;
        let per_class = ds.len() / 10;
        assert_eq!(per_class, 200);
        let ratio = empirical_bias_ratio(&ds.samples).unwrap();
        assert!((ratio - 0.1).abs() < 0.03, "alignment ratio {ratio}");
        for class in 0..10 {
            let of_class: Vec<_> = ds.samples.iter().filter(|s| s.y == class).collect();
            assert_eq!(of_class.len(), per_class);
            for color in 0..10 {
                let freq =
                    of_class.iter().filter(|s| s.t == color).count() as f64 / per_class as f64;
                // 200 samples per class: allow ~4 sigma around uniform
                assert!(
                    (freq - 0.1).abs() < 0.085,
                    "class {class} color {color} freq {freq}"
                );
            }
        }
    }

    #[test]
    fn splits_are_deterministic_and_disjointly_seeded() {
        let s1 = split_for_protocol(&small_spec()).unwrap();
        let s2 = split_for_protocol(&small_spec()).unwrap();
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.test_unbiased, s2.test_unbiased);
        assert_eq!(s1.test_bias_conflict, s2.test_bias_conflict);
        // eval pixels must not replicate training pixels
        assert_ne!(
            s1.train.samples[0].pixels,
            s1.test_unbiased.samples[0].pixels
        );
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.cgrd");
        let ds = generate(&small_spec()).unwrap();
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not.cgrd");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(read_dataset(&path), Err(DataError::BadMagic(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.cgrd");
        let ds = generate(&small_spec()).unwrap();
        write_dataset(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_dataset(&path), Err(DataError::Corrupt(_))));
    }

    #[test]
    fn manifest_lists_every_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let ds = generate(&small_spec()).unwrap();
        write_manifest(&path, &ds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), ds.len() + 1);
        assert!(text.starts_with("index,y,t,bias_aligned"));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(
            generate(&DatasetSpec {
                n_classes: 1,
                ..small_spec()
            }),
            Err(DataError::InvalidSpec {
                field: "n_classes",
                ..
            })
        ));
        assert!(matches!(
            generate(&DatasetSpec {
                q: 1.5,
                ..small_spec()
            }),
            Err(DataError::InvalidSpec { field: "q", .. })
        ));
        assert!(matches!(
            generate(&DatasetSpec {
                noise_std: -0.1,
                ..small_spec()
            }),
            Err(DataError::InvalidSpec {
                field: "noise_std",
                ..
            })
        ));
    }

    #[test]
    fn feature_matrix_stacks_rows() {
        let ds = generate(&small_spec()).unwrap();
        let m = ds.feature_matrix(&[0, 3]);
        assert_eq!(m.shape, vec![2, ds.input_dim()]);
        assert_eq!(&m.data[..ds.input_dim()], ds.samples[0].pixels.as_slice());
        assert_eq!(ds.targets(&[0, 3]), vec![ds.samples[0].y, ds.samples[3].y]);
    }
}
