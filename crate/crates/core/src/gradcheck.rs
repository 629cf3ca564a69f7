//! Central finite-difference verification of the analytic gradients.
//!
//! Every entry of every tensor is perturbed by `±eps` and the loss
//! difference is compared against the gradient accumulated by
//! [`ArnnModel::backward`]. Forward passes run in training mode with a
//! re-seeded generator, so dropout masks are identical across evaluations.

use crate::error::Result;
use crate::model::{ArnnModel, ModelConfig};
use crate::numerics::{Matrix, Rng};
use crate::training::{bce_grad_logit, bce_loss};

/// Denominator floor for the relative error, so entries whose true gradient is ~0 do not blow up.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preset {
    /// c=2, n=16, l=4, s=3
    Small,
    /// c=4, n=64, l=8, s=6
    Default,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        let (c, n, l, s) = match self {
            Preset::Small => (2, 16, 4, 3),
            Preset::Default => (4, 64, 8, 6),
        };
        ModelConfig::new(c, n, l, s, 0.3).expect("preset dimensions are valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorReport {
    pub name: &'static str,
    pub entries: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckProblem {
    pub model: ArnnModel,
    pub segment: Matrix,
    pub label: u8,
    pub seed: u64,
}

impl GradcheckProblem {
    /// A seeded model with non-trivial biases, gain and head so every path carries gradient.
    pub fn seeded(config: ModelConfig, seed: u64) -> Self {
        let mut model = ArnnModel::new(config, seed);
        let mut rng = Rng::seed(seed ^ 0x5eed);
        let m = config.m();
        for b in [&mut model.cell.b_z, &mut model.cell.b_i, &mut model.cell.b_f, &mut model.cell.ln_bias] {
            b.value = Matrix::uniform(1, m, 0.3, &mut rng);
        }
        model.cell.ln_gain.value = Matrix::uniform(1, m, 0.3, &mut rng).map(|v| 1.0 + v);
        model.cell.c0.value = Matrix::uniform(config.s, m, 0.5, &mut rng);
        model.head_w.value = Matrix::uniform(1, m, 1.0, &mut rng);
        model.head_b.value = Matrix::uniform(1, 1, 0.5, &mut rng);
        let segment = Matrix::uniform(config.c, config.n, 1.0, &mut rng).map(|v| 0.5 + 0.5 * v);
        GradcheckProblem {
            model,
            segment,
            label: 1,
            seed,
        }
    }

    pub fn loss(&self, model: &ArnnModel) -> Result<f64> {
        let fwd = model.forward(&self.segment, true, &mut Rng::seed(self.seed))?;
        Ok(bce_loss(fwd.prob, self.label))
    }

    /// Analytic gradients, one matrix per tensor in checkpoint order.
    pub fn analytic(&self) -> Result<Vec<Matrix>> {
        let mut model = self.model.clone();
        model.zero_grads();
        let fwd = model.forward_recorded(&self.segment, true, &mut Rng::seed(self.seed))?;
        model.backward(&fwd, bce_grad_logit(fwd.prob, self.label))?;
        Ok(model.params().map(|p| p.grad.clone()).collect())
    }

    /// Central differences, one matrix per tensor in checkpoint order.
    pub fn numeric(&self, eps: f64) -> Result<Vec<Matrix>> {
        let mut model = self.model.clone();
        let mut grads: Vec<Matrix> = model.params().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        let count = grads.len();
        for t in 0..count {
            for i in 0..grads[t].data().len() {
                let original = model.params().nth(t).expect("tensor index").value.data()[i];
                let mut eval = |v: f64| -> Result<f64> {
                    model.params_mut().nth(t).expect("tensor index").value.data_mut()[i] = v;
                    self.loss(&model)
                };
                let plus = eval(original + eps)?;
                let minus = eval(original - eps)?;
                eval(original)?;
                grads[t].data_mut()[i] = (plus - minus) / (2.0 * eps);
            }
        }
        Ok(grads)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Per-tensor worst-case agreement between two gradient sets.
pub fn compare(analytic: &[Matrix], numeric: &[Matrix]) -> Vec<TensorReport> {
    ArnnModel::param_names()
        .zip(analytic.iter().zip(numeric))
        .map(|(name, (a, n))| {
            let (mut worst_rel, mut worst_abs) = (0.0f64, 0.0f64);
            for (&x, &y) in a.data().iter().zip(n.data()) {
                worst_rel = worst_rel.max(relative_error(x, y));
                worst_abs = worst_abs.max((x - y).abs());
            }
            TensorReport {
                name,
                entries: a.data().len(),
                worst_rel,
                worst_abs,
            }
        })
        .collect()
}

/// Runs the full check on a seeded problem.
pub fn run(preset: Preset, eps: f64, seed: u64) -> Result<Vec<TensorReport>> {
    let problem = GradcheckProblem::seeded(preset.config(), seed);
    Ok(compare(&problem.analytic()?, &problem.numeric(eps)?))
}
