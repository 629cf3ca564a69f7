//! Cost model and timing harness for windowed versus full attention.
//!
//! FLOP convention: one multiply-add is two FLOPs and only matrix products
//! are counted (softmax, normalization and gating are excluded).
//!
//! * [`flops_full`]: `2·(3·c·n² + 2·c²·n)` for one attention over the whole segment
//!   with `(n, n)` projections.
//! * [`flops_arnn`]: `2·(3·c·n²/l + 2·c²·n/l)`, the windowed self-attention
//!   cost law, exactly inversely proportional to `l` in both terms.
//! * [`flops_arnn_tally`]: what the windowed kernels actually execute, summing the per-window
//!   cost `2·(3·c·m² + 2·c²·m)` over all `l` windows. The projection term
//!   equals the one in [`flops_arnn`]; the score/apply term sums to `4·c²·n`
//!   and does not shrink with `l`. The two coincide at `l = 1`.
//! * [`flops_arnn_cross`]: state projections plus both cross-attentions,
//!   reported separately from the self-attention comparison.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::cell::{self_attention, CellParams};
use crate::error::{Error, Result};
use crate::model::{window_segment, ArnnModel, ModelConfig};
use crate::numerics::{mac_count, reset_mac_count, Matrix, Rng};

/// Receives multiply-add tallies from the naive kernel.
pub trait MacCounter {
    fn add(&mut self, macs: u64);
}

/// Discards tallies; used for timing.
pub struct NoCount;

impl MacCounter for NoCount {
    #[inline(always)]
    fn add(&mut self, _: u64) {}
}

impl MacCounter for u64 {
    #[inline(always)]
    fn add(&mut self, macs: u64) {
        *self += macs;
    }
}

fn naive_matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize, counter: &mut impl MacCounter) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for k in 0..inner {
            let a_ik = a[i * inner + k];
            for j in 0..cols {
                out[i * cols + j] += a_ik * b[k * cols + j];
            }
            counter.add(cols as u64);
        }
    }
    out
}

/// `a · bᵀ` for row-major `a: (rows, inner)` and `b: (cols, inner)`.
fn naive_matmul_nt(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize, counter: &mut impl MacCounter) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for k in 0..inner {
                acc += a[i * inner + k] * b[j * inner + k];
            }
            out[i * cols + j] = acc;
            counter.add(inner as u64);
        }
    }
    out
}

/// Single-window attention over all `n` samples with `(n, n)` projections,
/// written directly against slices and sharing no code with the cell.
pub fn full_attention_forward_with(
    x: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    counter: &mut impl MacCounter,
) -> Result<Matrix> {
    let (c, n) = x.shape();
    for w in [wq, wk, wv] {
        if w.shape() != (n, n) {
            return Err(Error::dim("full_attention_forward", x.shape(), w.shape()));
        }
    }
    let q = naive_matmul(x.data(), wq.data(), c, n, n, counter);
    let k = naive_matmul(x.data(), wk.data(), c, n, n, counter);
    let v = naive_matmul(x.data(), wv.data(), c, n, n, counter);
    let mut scores = naive_matmul_nt(&q, &k, c, n, c, counter);
    let scale = 1.0 / (n as f64).sqrt();
    for row in scores.chunks_mut(c) {
        let mut max = f64::NEG_INFINITY;
        for s in row.iter_mut() {
            *s *= scale;
            max = max.max(*s);
        }
        let mut total = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in row.iter_mut() {
            *s /= total;
        }
    }
    let out = naive_matmul(&scores, &v, c, c, n, counter);
    Matrix::from_vec(c, n, out)
}

pub fn full_attention_forward(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Matrix> {
    full_attention_forward_with(x, wq, wk, wv, &mut NoCount)
}

/// Windowed self-attention through the cell's projection and attention code:
/// returns `u_x` for every window.
pub fn arnn_self_attention_path(x: &Matrix, l: usize, params: &CellParams) -> Result<Vec<Matrix>> {
    window_segment(x, l)?
        .iter()
        .map(|w| {
            let q = w.matmul(&params.wx_q.value)?;
            let k = w.matmul(&params.wx_k.value)?;
            let v = w.matmul(&params.wx_v.value)?;
            self_attention(&q, &k, &v)
        })
        .collect()
}

fn check_divides(n: usize, l: usize) -> Result<usize> {
    if l == 0 || n % l != 0 {
        return Err(Error::Config(format!("window count l={l} does not divide segment length n={n}")));
    }
    Ok(n / l)
}

pub fn flops_full(c: usize, n: usize) -> u64 {
    let (c, n) = (c as u64, n as u64);
    2 * (3 * c * n * n + 2 * c * c * n)
}

/// Windowed self-attention cost law, `2·(3·c·n²/l + 2·c²·n/l)`.
pub fn flops_arnn(c: usize, n: usize, l: usize) -> Result<u64> {
    let m = check_divides(n, l)? as u64;
    let (c, n) = (c as u64, n as u64);
    Ok(2 * (3 * c * n * m + 2 * c * c * m))
}

/// FLOPs the windowed self-attention kernels actually execute over all windows.
pub fn flops_arnn_tally(c: usize, n: usize, l: usize) -> Result<u64> {
    let m = check_divides(n, l)? as u64;
    let (c, l) = (c as u64, l as u64);
    Ok(2 * l * (3 * c * m * m + 2 * c * c * m))
}

/// State projections and both cross-attentions over all windows.
pub fn flops_arnn_cross(c: usize, n: usize, l: usize, s: usize) -> Result<u64> {
    let m = check_divides(n, l)? as u64;
    let (c, l, s) = (c as u64, l as u64, s as u64);
    Ok(2 * l * (3 * s * m * m + 2 * c * s * m + 2 * s * c * m))
}

/// Runs `f` and returns its result with the matrix-kernel MACs it executed on this thread.
pub fn count_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    reset_mac_count();
    let out = f();
    (out, mac_count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Arnn,
    FullAttention,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Arnn => "arnn",
            Mechanism::FullAttention => "full_attention",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridPoint {
    pub c: usize,
    pub n: usize,
    pub l: usize,
    pub s: usize,
}

impl GridPoint {
    pub fn validate(&self) -> Result<()> {
        ModelConfig::new(self.c, self.n, self.l, self.s, 0.0).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub c: usize,
    pub n: usize,
    pub l: usize,
    pub s: usize,
    pub flops: u64,
    /// Seconds per timed repeat, in run order.
    pub times: Vec<f64>,
}

impl BenchRecord {
    pub fn median(&self) -> f64 {
        median(&self.times)
    }

    pub fn median_ms(&self) -> f64 {
        self.median() * 1e3
    }

    /// Sample standard deviation of the repeats, in milliseconds.
    pub fn std_ms(&self) -> f64 {
        let n = self.times.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mean = self.times.iter().sum::<f64>() / n;
        (self.times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() * 1e3
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

pub const WARMUP: usize = 2;
pub const MIN_REPEATS: usize = 5;

fn time_runs(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..WARMUP {
        f()?;
    }
    (0..repeats)
        .map(|_| {
            let start = Instant::now();
            f()?;
            Ok(start.elapsed().as_secs_f64().max(1e-9))
        })
        .collect()
}

/// Times the eval-mode model forward (`arnn`) and the naive full attention at one point.
pub fn measure(point: GridPoint, repeats: usize, seed: u64) -> Result<[BenchRecord; 2]> {
    point.validate()?;
    if repeats < MIN_REPEATS {
        return Err(Error::Param(format!("at least {MIN_REPEATS} repeats required, got {repeats}")));
    }
    let GridPoint { c, n, l, s } = point;
    let mut rng = Rng::seed(seed);
    let x = Matrix::uniform(c, n, 1.0, &mut rng);

    let model = ArnnModel::new(ModelConfig::new(c, n, l, s, 0.0)?, seed);
    let mut fwd_rng = Rng::seed(0);
    let arnn_times = time_runs(repeats, || model.forward(&x, false, &mut fwd_rng).map(|_| ()))?;

    let bound = 1.0 / (n as f64).sqrt();
    let (wq, wk, wv) = (
        Matrix::uniform(n, n, bound, &mut rng),
        Matrix::uniform(n, n, bound, &mut rng),
        Matrix::uniform(n, n, bound, &mut rng),
    );
    let full_times = time_runs(repeats, || full_attention_forward(&x, &wq, &wk, &wv).map(|_| ()))?;

    Ok([
        BenchRecord {
            mechanism: Mechanism::Arnn,
            c,
            n,
            l,
            s,
            flops: flops_arnn(c, n, l)?,
            times: arnn_times,
        },
        BenchRecord {
            mechanism: Mechanism::FullAttention,
            c,
            n,
            l,
            s,
            flops: flops_full(c, n),
            times: full_times,
        },
    ])
}

/// Single-threaded sweep over `grid`, two records per point.
pub fn sweep(grid: &[GridPoint], repeats: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    for (i, p) in grid.iter().enumerate() {
        p.validate()
            .map_err(|e| Error::Config(format!("grid row {}: {e}", i + 1)))?;
    }
    let mut out = Vec::with_capacity(2 * grid.len());
    for p in grid {
        out.extend(measure(*p, repeats, seed)?);
    }
    Ok(out)
}

/// Window-count sweep at `n = 1024` plus a segment-length sweep at `l = 16`.
pub fn default_grid() -> Vec<GridPoint> {
    let (c, s) = (16, 32);
    let mut grid: Vec<GridPoint> = [2, 4, 8, 16, 32, 64]
        .into_iter()
        .map(|l| GridPoint { c, n: 1024, l, s })
        .collect();
    grid.extend([256, 512, 2048].into_iter().map(|n| GridPoint { c, n, l: 16, s }));
    grid
}

pub const BENCH_CSV_HEADER: &str = "mechanism,c,n,l,s,flops,median_ms,repeats";

pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.mechanism.as_str(),
            r.c,
            r.n,
            r.l,
            r.s,
            r.flops,
            r.median_ms(),
            r.times.len()
        )
        .expect("string write");
    }
    out
}

/// Parses a grid file with header `c,n,l,s`. Errors name the 1-based data row.
pub fn read_grid(path: &Path) -> Result<Vec<GridPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| Error::data(path, None, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::data(path, Some(1), e.to_string()))?;
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["c", "n", "l", "s"] {
        return Err(Error::data(path, Some(1), "grid header must be \"c,n,l,s\""));
    }
    let mut grid = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::data(path, None, format!("grid row {row}: {e}")))?;
        let vals: Vec<usize> = rec
            .iter()
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(path, None, format!("grid row {row}: {e}")))?;
        let [c, n, l, s] = vals[..] else {
            return Err(Error::data(path, None, format!("grid row {row}: expected 4 fields")));
        };
        let p = GridPoint { c, n, l, s };
        p.validate().map_err(|e| Error::data(path, None, format!("grid row {row}: {e}")))?;
        grid.push(p);
    }
    Ok(grid)
}
