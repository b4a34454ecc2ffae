//! Central finite-difference auditing of recorded gradients.
//!
//! The numeric side only ever evaluates forward values on fresh tapes, so it
//! is independent of every backward rule it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::Result;
use crate::losses::{self, LossConfig, LossVariant};
use crate::matrix::DenseMatrix;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `‖a − n‖_F / max(‖a‖_F, ‖n‖_F, 1e-8)`.
pub fn relative_error(analytic: &DenseMatrix, numeric: &DenseMatrix) -> f64 {
    let diff = analytic.zip_map(numeric, |a, b| a - b).frobenius_norm();
    let scale = analytic
        .frobenius_norm()
        .max(numeric.frobenius_norm())
        .max(1e-8);
    diff / scale
}

/// Gradient of `f` at `x` by central differences.
pub fn central_difference(
    mut f: impl FnMut(&DenseMatrix) -> Result<f64>,
    x: &DenseMatrix,
    step: f64,
) -> Result<DenseMatrix> {
    let mut grad = DenseMatrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Compares the tape's gradients of a scalar function of several matrix
/// inputs against central differences. Returns the worst relative error
/// over the inputs.
pub fn check_gradients<F>(
    build: F,
    inputs: &[DenseMatrix],
    step: f64,
    corrupt: Option<OpKind>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = corrupt {
        tape.corrupt_backward_rule(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst = 0.0f64;
    for (idx, x) in inputs.iter().enumerate() {
        let numeric = central_difference(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, m)| t.leaf(if j == idx { probe.clone() } else { m.clone() }))
                    .collect();
                let r = build(&mut t, &vs)?;
                Ok(t.scalar(r).expect("scalar root"))
            },
            x,
            step,
        )?;
        worst = worst.max(relative_error(&grads.wrt(vars[idx]), &numeric));
    }
    Ok(worst)
}

/// Uniform `[−1, 1]` matrix.
pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// One audited objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AuditedLoss {
    SimAffinity,
    SimWhitening,
    SimTrace,
    Symmetry,
    UniclrComposite,
    InfoNce,
}

impl AuditedLoss {
    pub const ALL: [AuditedLoss; 6] = [
        AuditedLoss::SimAffinity,
        AuditedLoss::SimWhitening,
        AuditedLoss::SimTrace,
        AuditedLoss::Symmetry,
        AuditedLoss::UniclrComposite,
        AuditedLoss::InfoNce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AuditedLoss::SimAffinity => "sim_affinity",
            AuditedLoss::SimWhitening => "sim_whitening",
            AuditedLoss::SimTrace => "sim_trace",
            AuditedLoss::Symmetry => "symmetry",
            AuditedLoss::UniclrComposite => "uniclr_composite",
            AuditedLoss::InfoNce => "infonce",
        }
    }

    /// Whether the audit covers gradients through `Σ_ε`.
    pub fn through_sigma(self) -> bool {
        matches!(
            self,
            AuditedLoss::SimWhitening
                | AuditedLoss::SimTrace
                | AuditedLoss::Symmetry
                | AuditedLoss::UniclrComposite
        )
    }

    pub fn related_variant(self) -> Option<LossVariant> {
        match self {
            AuditedLoss::SimAffinity => Some(LossVariant::SimAffinity),
            AuditedLoss::SimWhitening => Some(LossVariant::SimWhitening),
            AuditedLoss::SimTrace => Some(LossVariant::SimTrace),
            AuditedLoss::InfoNce => Some(LossVariant::InfoNce),
            AuditedLoss::Symmetry | AuditedLoss::UniclrComposite => None,
        }
    }

    /// Scalar objectives this audit row evaluates, each as a function of
    /// `(Z, Z')`.
    fn objectives(self) -> Vec<Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>> {
        let eps = losses::DEFAULT_EPSILON_SCALE;
        match self {
            AuditedLoss::SimAffinity => vec![Box::new(|t, v| {
                let a = losses::build_affinity(t, v[0], v[1], &LossConfig::sim_affinity(Some(0.5), 0.0))?;
                losses::sim_affinity_loss(t, &a)
            })],
            AuditedLoss::SimWhitening => vec![Box::new(move |t, v| {
                let cfg = LossConfig::sim_whitening(Some(0.5), 0.0, eps);
                let a = losses::build_affinity(t, v[0], v[1], &cfg)?;
                losses::sim_affinity_loss(t, &a)
            })],
            AuditedLoss::SimTrace => vec![Box::new(move |t, v| {
                let a = losses::build_affinity(t, v[0], v[1], &LossConfig::sim_trace(eps))?;
                losses::sim_trace_loss(t, &a)
            })],
            AuditedLoss::Symmetry => vec![
                Box::new(|t, v| {
                    let a = losses::build_affinity(t, v[0], v[1], &LossConfig::sim_affinity(Some(0.5), 0.0))?;
                    losses::symmetry_loss(t, &a)
                }),
                Box::new(move |t, v| {
                    let cfg = LossConfig::sim_whitening(Some(0.5), 0.0, eps);
                    let a = losses::build_affinity(t, v[0], v[1], &cfg)?;
                    losses::symmetry_loss(t, &a)
                }),
            ],
            AuditedLoss::UniclrComposite => vec![
                Box::new(|t, v| {
                    let cfg = LossConfig::sim_affinity(Some(0.5), 0.01);
                    Ok(losses::uniclr_loss(t, v[0], v[1], &cfg)?.total)
                }),
                Box::new(move |t, v| {
                    let cfg = LossConfig::sim_whitening(Some(0.5), 0.01, eps);
                    Ok(losses::uniclr_loss(t, v[0], v[1], &cfg)?.total)
                }),
            ],
            AuditedLoss::InfoNce => vec![Box::new(|t, v| losses::infonce_loss(t, v[0], v[1], 0.5))],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditRow {
    pub loss: AuditedLoss,
    pub name: &'static str,
    pub through_sigma: bool,
    pub checks: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub tolerance: f64,
    pub step: f64,
    pub dims: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub seeds: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn worst(&self) -> Option<&AuditRow> {
        self.rows
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Plain-text table, one line per audited loss.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<18} {:>8} {:>7} {:>14}  {}\n",
            "loss", "via-Σ", "checks", "max-rel-err", "status"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<18} {:>8} {:>7} {:>14.3e}  {}\n",
                r.name,
                if r.through_sigma { "yes" } else { "no" },
                r.checks,
                r.max_rel_error,
                if r.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct AuditConfig {
    pub losses: Vec<AuditedLoss>,
    pub dims: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub seeds: u64,
    pub step: f64,
    pub tolerance: f64,
    pub corrupt: Option<OpKind>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            losses: AuditedLoss::ALL.to_vec(),
            dims: vec![3, 8],
            batch_sizes: vec![4, 16],
            seeds: 5,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

/// Runs every selected loss over every `(seed, D, N)` combination.
pub fn run_audit(cfg: &AuditConfig) -> Result<AuditReport> {
    let mut rows = Vec::new();
    for &loss in &cfg.losses {
        let mut worst = 0.0f64;
        let mut checks = 0;
        for objective in loss.objectives() {
            for seed in 0..cfg.seeds {
                for &d in &cfg.dims {
                    for &n in &cfg.batch_sizes {
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            seed.wrapping_mul(1_000_003) ^ ((d as u64) << 20) ^ n as u64,
                        );
                        let z = random_matrix(d, n, &mut rng);
                        let zp = random_matrix(d, n, &mut rng);
                        let err = check_gradients(&objective, &[z, zp], cfg.step, cfg.corrupt)?;
                        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
                        checks += 1;
                    }
                }
            }
        }
        rows.push(AuditRow {
            loss,
            name: loss.name(),
            through_sigma: loss.through_sigma(),
            checks,
            max_rel_error: worst,
            passed: worst <= cfg.tolerance,
        });
    }
    Ok(AuditReport {
        rows,
        tolerance: cfg.tolerance,
        step: cfg.step,
        dims: cfg.dims.clone(),
        batch_sizes: cfg.batch_sizes.clone(),
        seeds: cfg.seeds as usize,
    })
}
