//! The end-to-end classifier: a segment is cut into `l` windows, the cell
//! runs over them in order, and the mean of the final state vectors feeds an
//! affine head producing one logit.

use std::path::Path;

use crate::cell::{
    cell_step_backward, cell_step_recorded, CellConfig, CellParams, CellState, StepCache,
    CELL_PARAM_NAMES,
};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::{dropout, dropout_backward, DropoutMask, Matrix, Param, Rng};

pub const DEFAULT_DROPOUT: f64 = 0.3;

const MAGIC: &[u8; 4] = b"ARNN";
const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 5 + 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub c: usize,
    pub n: usize,
    /// Number of local windows ("time steps").
    pub l: usize,
    pub s: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    pub fn new(c: usize, n: usize, l: usize, s: usize, dropout_p: f64) -> Result<Self> {
        if c == 0 || n == 0 || l == 0 || s == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (c={c}, n={n}, l={l}, s={s})"
            )));
        }
        if n % l != 0 {
            return Err(Error::Config(format!(
                "window count l={l} does not divide segment length n={n}"
            )));
        }
        CellConfig::new(c, n / l, s, dropout_p)?;
        Ok(ModelConfig { c, n, l, s, dropout_p })
    }

    /// Window length `n / l`.
    pub fn m(&self) -> usize {
        self.n / self.l
    }

    pub fn cell(&self) -> CellConfig {
        CellConfig {
            c: self.c,
            m: self.m(),
            s: self.s,
            dropout_p: self.dropout_p,
        }
    }
}

/// Splits `(c, n)` into `l` consecutive `(c, n/l)` windows.
pub fn window_segment(x: &Matrix, l: usize) -> Result<Vec<Matrix>> {
    let n = x.cols();
    if l == 0 || n % l != 0 {
        return Err(Error::Config(format!(
            "window count l={l} does not divide segment length n={n}"
        )));
    }
    let m = n / l;
    Ok((0..l).map(|p| x.col_block(p * m..(p + 1) * m)).collect())
}

/// One labeled recording window, `(c, n)`; label 1 marks a seizure.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Where the segment came from, e.g. its path in a manifest.
    pub id: String,
    pub data: Matrix,
    pub label: u8,
}

impl Segment {
    pub fn new(id: impl Into<String>, data: Matrix, label: u8) -> Self {
        Segment {
            id: id.into(),
            data,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArnnModel {
    pub config: ModelConfig,
    pub cell: CellParams,
    pub head_w: Param,
    pub head_b: Param,
}

/// Intermediates kept by a recorded forward pass.
pub struct Trace {
    steps: Vec<StepCache>,
    feature: Matrix,
    feature_mask: DropoutMask,
}

pub struct Forward {
    pub logit: f64,
    pub prob: f64,
    /// `c_0 … c_l`.
    pub states: Vec<CellState>,
    trace: Option<Trace>,
}

impl std::fmt::Debug for Forward {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Forward")
            .field("logit", &self.logit)
            .field("prob", &self.prob)
            .field("states", &self.states.len())
            .field("recorded", &self.trace.is_some())
            .finish()
    }
}

impl Forward {
    pub fn is_recorded(&self) -> bool {
        self.trace.is_some()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ArnnModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::seed(seed);
        let cell = CellParams::init(&config.cell(), &mut rng);
        let m = config.m();
        let head_w = Param::new(Matrix::uniform(1, m, 1.0 / (m as f64).sqrt(), &mut rng));
        ArnnModel {
            config,
            cell,
            head_w,
            head_b: Param::zeros(1, 1),
        }
    }

    /// Every tensor zero except the layer-norm gain.
    pub fn zeros(config: ModelConfig) -> Self {
        ArnnModel {
            config,
            cell: CellParams::zeros(&config.cell()),
            head_w: Param::zeros(1, config.m()),
            head_b: Param::zeros(1, 1),
        }
    }

    /// Tensors in checkpoint order.
    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.cell.iter().chain([&self.head_w, &self.head_b])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.cell.iter_mut().chain([&mut self.head_w, &mut self.head_b])
    }

    pub fn param_names() -> impl Iterator<Item = &'static str> {
        CELL_PARAM_NAMES.into_iter().chain(["head_w", "head_b"])
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.data().len()).sum()
    }

    fn expected_shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
        let mut shapes = CellParams::shapes(&config.cell()).to_vec();
        shapes.extend([(1, config.m()), (1, 1)]);
        shapes
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }

    /// Inference-style pass: no intermediates are kept.
    pub fn forward(&self, x: &Matrix, training: bool, rng: &mut Rng) -> Result<Forward> {
        self.run(x, training, rng, false)
    }

    /// Forward pass that records everything [`ArnnModel::backward`] needs.
    pub fn forward_recorded(&self, x: &Matrix, training: bool, rng: &mut Rng) -> Result<Forward> {
        self.run(x, training, rng, true)
    }

    fn run(&self, x: &Matrix, training: bool, rng: &mut Rng, record: bool) -> Result<Forward> {
        let cfg = self.config;
        if x.shape() != (cfg.c, cfg.n) {
            return Err(Error::dim("forward", x.shape(), (cfg.c, cfg.n)));
        }
        let cell_cfg = cfg.cell();
        let mut states = Vec::with_capacity(cfg.l + 1);
        let mut steps = Vec::new();
        states.push(CellState::new(self.cell.c0.value.clone()));
        for window in window_segment(x, cfg.l)? {
            let prev = states.last().expect("initial state pushed");
            let (next, cache) = cell_step_recorded(&window, prev, &self.cell, &cell_cfg, training, rng)?;
            if record {
                steps.push(cache);
            }
            states.push(next);
        }
        let pooled = states.last().expect("non-empty").vectors.col_means();
        let (feature, feature_mask) = dropout(&pooled, cfg.dropout_p, training, rng)?;
        let logit = feature
            .data()
            .iter()
            .zip(self.head_w.value.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.head_b.value[(0, 0)];
        let trace = record.then_some(Trace {
            steps,
            feature,
            feature_mask,
        });
        Ok(Forward {
            logit,
            prob: sigmoid(logit),
            states,
            trace,
        })
    }

    /// Accumulates `∂L/∂θ` for every tensor given `∂L/∂logit`.
    pub fn backward(&mut self, fwd: &Forward, d_logit: f64) -> Result<()> {
        let trace = fwd.trace.as_ref().ok_or_else(|| {
            Error::State("backward requires a recorded forward pass (use forward_recorded)".into())
        })?;
        self.head_w.accumulate(&trace.feature.scale(d_logit));
        self.head_b.accumulate(&Matrix::filled(1, 1, d_logit));

        let d_feature = dropout_backward(&trace.feature_mask, &self.head_w.value.scale(d_logit))?;
        let s = self.config.s;
        let mut d_state = Matrix::zeros(s, self.config.m());
        for r in 0..s {
            for (d, g) in d_state.row_mut(r).iter_mut().zip(d_feature.data()) {
                *d = g / s as f64;
            }
        }
        for cache in trace.steps.iter().rev() {
            d_state = cell_step_backward(cache, &d_state, &mut self.cell)?;
        }
        self.cell.c0.accumulate(&d_state);
        Ok(())
    }

    /// Serializes to the little-endian checkpoint layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let ModelConfig { c, n, l, s, .. } = self.config;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for d in [c, n, l, s] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in self.params() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. The dropout probability is not stored and is set to [`DEFAULT_DROPOUT`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format("header", format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format("magic", format!("expected \"ARNN\", found {:?}", &bytes[..4])));
        }
        if bytes[4] != VERSION {
            return Err(Error::format("version", format!("unsupported version {}", bytes[4])));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (c, n, l, s) = (dim(0), dim(1), dim(2), dim(3));
        let config = ModelConfig::new(c, n, l, s, DEFAULT_DROPOUT)
            .map_err(|e| Error::format("dims", format!("c={c}, n={n}, l={l}, s={s}: {e}")))?;

        let shapes = Self::expected_shapes(&config);
        let floats: usize = shapes.iter().map(|(r, c)| r * c).sum();
        let expected = HEADER_LEN + 8 * floats;
        let mut model = ArnnModel::zeros(config);
        let mut offset = HEADER_LEN;
        for ((name, p), (rows, cols)) in Self::param_names().zip(model.params_mut()).zip(shapes) {
            let len = 8 * rows * cols;
            let chunk = bytes.get(offset..offset + len).ok_or_else(|| {
                Error::format(
                    name,
                    format!(
                        "file truncated: {} bytes, expected {expected} for dims c={c}, n={n}, l={l}, s={s}",
                        bytes.len()
                    ),
                )
            })?;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            p.value = Matrix::from_vec(rows, cols, data)?;
            offset += len;
        }
        if bytes.len() != expected {
            return Err(Error::format(
                "dims",
                format!(
                    "file has {} bytes but dims c={c}, n={n}, l={l}, s={s} imply {expected}",
                    bytes.len()
                ),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// 1 iff the model's probability reaches `threshold` (ties go to 1).
pub fn predict(model: &ArnnModel, x: &Matrix, threshold: f64) -> Result<u8> {
    let fwd = model.forward(x, false, &mut Rng::seed(0))?;
    Ok(decide(fwd.prob, threshold))
}

pub fn decide(prob: f64, threshold: f64) -> u8 {
    u8::from(prob >= threshold)
}
