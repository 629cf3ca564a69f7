//! Dataset input/output, min-max normalization and the synthetic burst task.
//!
//! On disk a dataset is a directory holding `manifest.csv` (header
//! `path,label`, paths relative to the manifest) and one headerless CSV per
//! segment with `n` lines of `c` comma-separated values: rows are time
//! samples, columns are channels. In memory a segment is `(c, n)`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::write_atomic;
pub use crate::model::Segment;
use crate::numerics::{Matrix, Rng};

pub const MANIFEST: &str = "manifest.csv";

/// Pole of the AR(1) filter shaping the background noise.
pub const NOISE_POLE: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub c: usize,
    pub n: usize,
    pub segments: Vec<Segment>,
}

fn parse_label(raw: &str, path: &Path, line: u64) -> Result<u8> {
    match raw.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::data(path, Some(line), format!("label must be 0 or 1, got {other:?}"))),
    }
}

/// Reads one segment CSV and returns it as `(c, n)`.
pub fn read_segment_csv(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::data(path, None, e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(path, e.position().map(|p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if let Some(first) = rows.first() {
            if record.len() != first.len() {
                return Err(Error::data(
                    path,
                    Some(line),
                    format!("ragged row: {} fields, expected {}", record.len(), first.len()),
                ));
            }
        }
        let values = record
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::data(path, Some(line), format!("non-numeric value {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::data(path, None, "segment file is empty"));
    }
    Ok(Matrix::from_rows(&rows).transpose())
}

/// Loads every segment listed in `dir/manifest.csv`. Any failure aborts the whole load.
///
/// With `expected = None` the dimensions are taken from the first segment.
pub fn load_manifest(dir: impl AsRef<Path>, expected: Option<(usize, usize)>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&manifest)
        .map_err(|e| Error::data(&manifest, None, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::data(&manifest, Some(1), e.to_string()))?;
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["path", "label"] {
        return Err(Error::data(&manifest, Some(1), "header must be \"path,label\""));
    }

    let mut dims = expected;
    let mut segments = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(&manifest, e.position().map(|p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let rel = record.get(0).unwrap_or_default().trim().to_string();
        let label = parse_label(record.get(1).unwrap_or_default(), &manifest, line)?;
        let path = dir.join(&rel);
        if !path.is_file() {
            return Err(Error::data(&manifest, Some(line), format!("missing segment file {}", path.display())));
        }
        let data = read_segment_csv(&path)?;
        let want = *dims.get_or_insert(data.shape());
        if data.shape() != want {
            return Err(Error::data(
                &path,
                None,
                format!(
                    "shape (c={}, n={}) does not match declared (c={}, n={})",
                    data.rows(),
                    data.cols(),
                    want.0,
                    want.1
                ),
            ));
        }
        segments.push(Segment::new(rel, data, label));
    }
    let (c, n) = dims.ok_or_else(|| Error::data(&manifest, None, "manifest lists no segments"))?;
    Ok(Dataset { c, n, segments })
}

/// Segment CSV text: `n` lines of `c` values, shortest round-trip float formatting.
pub fn segment_to_csv(data: &Matrix) -> String {
    let mut out = String::with_capacity(data.rows() * data.cols() * 20);
    for t in 0..data.cols() {
        for ch in 0..data.rows() {
            if ch > 0 {
                out.push(',');
            }
            write!(out, "{}", data[(ch, t)]).expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Writes the segments and a manifest into `dir`. Segment ids become file names.
pub fn write_segments(dir: impl AsRef<Path>, segments: &[Segment]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("path,label\n");
    for seg in segments {
        let path: PathBuf = dir.join(&seg.id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&path, segment_to_csv(&seg.data).as_bytes())?;
        writeln!(manifest, "{},{}", seg.id, seg.label).expect("string write");
    }
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Per-channel min-max scaling into `[0, 1]`; constant channels become zeros.
pub fn minmax_normalize(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for ch in 0..out.rows() {
        let row = out.row_mut(ch);
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in row.iter_mut() {
            *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    out
}

pub fn normalize_all(segments: &mut [Segment]) {
    for seg in segments {
        seg.data = minmax_normalize(&seg.data);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub c: usize,
    pub n: usize,
    /// Segments generated for each class.
    pub count_per_class: usize,
    /// Burst frequency range in cycles per sample, inside `(0, 0.5)`.
    pub band: (f64, f64),
    /// Burst amplitude as a multiple of the channel's noise RMS.
    pub amplitude_ratio: f64,
    /// Standard deviation of the white innovations driving the noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            c: 16,
            n: 1024,
            count_per_class: 100,
            band: (0.24, 0.26),
            amplitude_ratio: 15.0,
            noise_level: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.band;
        if !(0.0 < lo && lo <= hi && hi < 0.5) {
            return Err(Error::Param(format!("burst band ({lo}, {hi}) must satisfy 0 < lo <= hi < 0.5")));
        }
        if !(self.amplitude_ratio > 1.0) {
            return Err(Error::Param(format!("amplitude ratio must exceed 1, got {}", self.amplitude_ratio)));
        }
        if !(self.noise_level > 0.0) {
            return Err(Error::Param(format!("noise level must be positive, got {}", self.noise_level)));
        }
        if self.c == 0 || self.n < 10 {
            return Err(Error::Param(format!("need c >= 1 and n >= 10, got c={}, n={}", self.c, self.n)));
        }
        if self.count_per_class == 0 {
            return Err(Error::Param("count must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One injected oscillation.
#[derive(Debug, Clone, PartialEq)]
pub struct Burst {
    pub onset: usize,
    pub duration: usize,
    /// Cycles per sample.
    pub frequency: f64,
    pub phase: f64,
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub segments: Vec<Segment>,
    /// Bursts of each segment, empty for class 0.
    pub bursts: Vec<Vec<Burst>>,
}

fn colored_noise(c: usize, n: usize, sigma: f64, rng: &mut Rng) -> Matrix {
    let mut x = Matrix::zeros(c, n);
    // start from the stationary distribution
    let stationary = sigma / (1.0 - NOISE_POLE * NOISE_POLE).sqrt();
    for ch in 0..c {
        let row = x.row_mut(ch);
        let mut prev = stationary * rng.normal();
        for v in row.iter_mut() {
            prev = NOISE_POLE * prev + sigma * rng.normal();
            *v = prev;
        }
    }
    x
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

fn draw_bursts(cfg: &SynthConfig, rng: &mut Rng) -> Vec<Burst> {
    let n = cfg.n;
    let count = rng.range(1, 4);
    let min_channels = cfg.c.div_ceil(2);
    (0..count)
        .map(|_| {
            let duration = rng.range((n as f64 * 0.10).ceil() as usize, (n as f64 * 0.25).floor() as usize + 1);
            let onset = rng.range(0, n - duration + 1);
            let frequency = rng.uniform(cfg.band.0, cfg.band.1);
            let phase = rng.uniform(0.0, 2.0 * PI);
            let mut channels: Vec<usize> = (0..cfg.c).collect();
            rng.shuffle(&mut channels);
            channels.truncate(rng.range(min_channels, cfg.c + 1));
            channels.sort_unstable();
            Burst {
                onset,
                duration,
                frequency,
                phase,
                channels,
            }
        })
        .collect()
}

/// Class 0: AR(1) colored noise. Class 1: the same kind of noise plus 1–3
/// Hann-tapered sinusoidal bursts covering 10–25% of the segment each, on at
/// least half of the channels. Segments alternate 0, 1, 0, 1, …
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = Rng::seed(cfg.seed);
    let width = (2 * cfg.count_per_class).to_string().len().max(4);
    let mut segments = Vec::with_capacity(2 * cfg.count_per_class);
    let mut bursts = Vec::with_capacity(2 * cfg.count_per_class);
    for k in 0..2 * cfg.count_per_class {
        let label = (k % 2) as u8;
        let mut x = colored_noise(cfg.c, cfg.n, cfg.noise_level, &mut rng);
        let mut injected = Vec::new();
        if label == 1 {
            let noise_rms: Vec<f64> = (0..cfg.c).map(|ch| rms(x.row(ch))).collect();
            injected = draw_bursts(cfg, &mut rng);
            for b in &injected {
                for &ch in &b.channels {
                    let amp = cfg.amplitude_ratio * noise_rms[ch];
                    let row = x.row_mut(ch);
                    for j in 0..b.duration {
                        let taper = 0.5 - 0.5 * (2.0 * PI * (j as f64 + 0.5) / b.duration as f64).cos();
                        let t = (b.onset + j) as f64;
                        row[b.onset + j] += amp * taper * (2.0 * PI * b.frequency * t + b.phase).sin();
                    }
                }
            }
        }
        segments.push(Segment::new(format!("seg_{k:0width$}.csv"), x, label));
        bursts.push(injected);
    }
    Ok(SynthDataset { segments, bursts })
}
