//! Affinity-matrix contrastive losses and the doubled-batch InfoNCE baseline.
//!
//! Every loss is recorded on a [`Tape`] and returns a scalar node, so the
//! same code path serves training and gradient auditing. The affinity is
//! built once and scaled by the temperature once; the cross-entropy term and
//! the symmetry term both consume that same scaled matrix.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::whitening;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    SimAffinity,
    SimWhitening,
    SimTrace,
    InfoNce,
    /// Negative control: `−mean_i cos(z_i, z'_i)` with no negatives at all.
    /// Collapses by construction; not exposed on the command line.
    PositiveCosine,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::SimAffinity => "simaffinity",
            LossVariant::SimWhitening => "simwhitening",
            LossVariant::SimTrace => "simtrace",
            LossVariant::InfoNce => "infonce",
            LossVariant::PositiveCosine => "positive-cosine",
        }
    }

    /// Parses the four user-facing variant names.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simaffinity" => Some(LossVariant::SimAffinity),
            "simwhitening" => Some(LossVariant::SimWhitening),
            "simtrace" => Some(LossVariant::SimTrace),
            "infonce" => Some(LossVariant::InfoNce),
            _ => None,
        }
    }

    pub const USER_FACING: [LossVariant; 4] = [
        LossVariant::SimAffinity,
        LossVariant::SimWhitening,
        LossVariant::SimTrace,
        LossVariant::InfoNce,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// `None` disables temperature scaling.
    pub temperature: Option<f64>,
    pub gamma: f64,
    pub whitening: bool,
    pub epsilon_scale: f64,
    pub sigma_stop_grad: bool,
    /// SimWhitening only: ℓ2-normalize the whitened columns before the
    /// affinity. Turning it off exposes the bare `Zᵀ·Σ_ε⁻¹·Z'` form.
    pub normalize_whitened: bool,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 0.01;
pub const DEFAULT_EPSILON_SCALE: f64 = 1e-4;

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_variant(LossVariant::SimAffinity)
    }
}

impl LossConfig {
    /// Defaults for a variant: τ = 0.5 and γ = 0.01 where they apply,
    /// whitening as the variant requires.
    pub fn for_variant(variant: LossVariant) -> Self {
        let base = LossConfig {
            variant,
            temperature: Some(DEFAULT_TEMPERATURE),
            gamma: DEFAULT_GAMMA,
            whitening: false,
            epsilon_scale: DEFAULT_EPSILON_SCALE,
            sigma_stop_grad: false,
            normalize_whitened: true,
        };
        match variant {
            LossVariant::SimAffinity => base,
            LossVariant::SimWhitening => LossConfig {
                whitening: true,
                ..base
            },
            LossVariant::SimTrace => LossConfig {
                temperature: None,
                gamma: 0.0,
                whitening: true,
                ..base
            },
            LossVariant::InfoNce | LossVariant::PositiveCosine => LossConfig { gamma: 0.0, ..base },
        }
    }

    pub fn sim_affinity(temperature: Option<f64>, gamma: f64) -> Self {
        LossConfig {
            temperature,
            gamma,
            ..Self::for_variant(LossVariant::SimAffinity)
        }
    }

    pub fn sim_whitening(temperature: Option<f64>, gamma: f64, epsilon_scale: f64) -> Self {
        LossConfig {
            temperature,
            gamma,
            epsilon_scale,
            ..Self::for_variant(LossVariant::SimWhitening)
        }
    }

    pub fn sim_trace(epsilon_scale: f64) -> Self {
        LossConfig {
            epsilon_scale,
            ..Self::for_variant(LossVariant::SimTrace)
        }
    }

    pub fn info_nce(temperature: f64) -> Self {
        LossConfig {
            temperature: Some(temperature),
            ..Self::for_variant(LossVariant::InfoNce)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let Some(t) = self.temperature {
            if !(t > 0.0) || !t.is_finite() {
                return bad(format!("temperature must be positive, got {t}"));
            }
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if !(self.epsilon_scale >= 0.0) || !self.epsilon_scale.is_finite() {
            return bad(format!(
                "epsilon_scale must be nonnegative, got {}",
                self.epsilon_scale
            ));
        }
        let v = self.variant.name();
        match self.variant {
            LossVariant::SimTrace => {
                if self.gamma != 0.0 {
                    return bad(format!("{v}: the symmetry weight gamma must be 0"));
                }
                if self.temperature.is_some() {
                    return bad(format!("{v}: temperature must be disabled"));
                }
                if !self.whitening {
                    return bad(format!("{v}: whitening is required"));
                }
            }
            LossVariant::SimWhitening => {
                if !self.whitening {
                    return bad(format!("{v}: whitening is required"));
                }
            }
            LossVariant::SimAffinity => {
                if self.whitening {
                    return bad(format!("{v}: whitening must be off"));
                }
            }
            LossVariant::InfoNce | LossVariant::PositiveCosine => {
                if self.whitening {
                    return bad(format!("{v}: whitening must be off"));
                }
                if self.gamma != 0.0 {
                    return bad(format!("{v}: gamma must be 0"));
                }
                if self.variant == LossVariant::InfoNce && self.temperature.is_none() {
                    return bad(format!("{v}: a temperature is required"));
                }
            }
        }
        Ok(())
    }
}

/// An `N×N` affinity node on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AffinityMatrix {
    pub values: Var,
    pub variant: LossVariant,
    pub temperature_applied: bool,
    pub whitened: bool,
}

fn check_views(tape: &Tape, z: Var, z_prime: Var) -> Result<(usize, usize)> {
    let (a, b) = (tape.value(z).shape(), tape.value(z_prime).shape());
    if a != b {
        return Err(Error::dim(
            "build_affinity",
            format!("views are {}x{} and {}x{}", a.0, a.1, b.0, b.1),
        ));
    }
    if a.1 < 2 {
        return Err(Error::dim(
            "build_affinity",
            format!("need at least 2 samples, got {}", a.1),
        ));
    }
    Ok(a)
}

fn apply_temperature(tape: &mut Tape, a: Var, temperature: Option<f64>) -> (Var, bool) {
    match temperature {
        Some(t) => (tape.scale(a, 1.0 / t), true),
        None => (a, false),
    }
}

/// Builds the affinity for the configured variant.
pub fn build_affinity(
    tape: &mut Tape,
    z: Var,
    z_prime: Var,
    cfg: &LossConfig,
) -> Result<AffinityMatrix> {
    cfg.validate()?;
    check_views(tape, z, z_prime)?;
    match cfg.variant {
        LossVariant::SimAffinity | LossVariant::InfoNce | LossVariant::PositiveCosine => {
            let zn = tape.l2_normalize_cols(z)?;
            let zpn = tape.l2_normalize_cols(z_prime)?;
            let znt = tape.transpose(zn);
            let raw = tape.matmul(znt, zpn)?;
            let (values, temperature_applied) = apply_temperature(tape, raw, cfg.temperature);
            Ok(AffinityMatrix {
                values,
                variant: cfg.variant,
                temperature_applied,
                whitened: false,
            })
        }
        LossVariant::SimWhitening => {
            let nodes =
                whitening::covariance_on_tape(tape, z, z_prime, cfg.epsilon_scale, cfg.sigma_stop_grad)?;
            let (mut wz, mut wzp) = whitening::whiten_views_on_tape(tape, &nodes)?;
            if cfg.normalize_whitened {
                wz = tape.l2_normalize_cols(wz)?;
                wzp = tape.l2_normalize_cols(wzp)?;
            }
            let wzt = tape.transpose(wz);
            let raw = tape.matmul(wzt, wzp)?;
            let (values, temperature_applied) = apply_temperature(tape, raw, cfg.temperature);
            Ok(AffinityMatrix {
                values,
                variant: cfg.variant,
                temperature_applied,
                whitened: true,
            })
        }
        LossVariant::SimTrace => {
            let nodes =
                whitening::covariance_on_tape(tape, z, z_prime, cfg.epsilon_scale, cfg.sigma_stop_grad)?;
            let solved = tape.solve_spd(nodes.covariance, nodes.centered_z_prime)?;
            let zct = tape.transpose(nodes.centered_z);
            let values = tape.matmul(zct, solved)?;
            Ok(AffinityMatrix {
                values,
                variant: cfg.variant,
                temperature_applied: false,
                whitened: true,
            })
        }
    }
}

/// Cross-entropy of each row against its diagonal entry.
pub fn sim_affinity_loss(tape: &mut Tape, affinity: &AffinityMatrix) -> Result<Var> {
    let n = tape.value(affinity.values).rows();
    let targets: Vec<usize> = (0..n).collect();
    tape.softmax_cross_entropy(affinity.values, &targets)
}

/// `‖A − Aᵀ‖_F` (not squared).
pub fn symmetry_loss(tape: &mut Tape, affinity: &AffinityMatrix) -> Result<Var> {
    let (r, c) = tape.value(affinity.values).shape();
    if r != c {
        return Err(Error::dim("symmetry_loss", format!("{r}x{c} is not square")));
    }
    let t = tape.transpose(affinity.values);
    let diff = tape.sub(affinity.values, t)?;
    Ok(tape.frobenius_norm(diff))
}

/// `−trace(A)` of a trace-path affinity.
pub fn sim_trace_loss(tape: &mut Tape, affinity: &AffinityMatrix) -> Result<Var> {
    if affinity.variant != LossVariant::SimTrace || affinity.temperature_applied {
        return Err(Error::Contract(format!(
            "sim_trace_loss needs a whitened, unnormalized, untempered affinity; got a {} affinity",
            affinity.variant.name()
        )));
    }
    let tr = tape.trace(affinity.values)?;
    Ok(tape.scale(tr, -1.0))
}

/// Doubled-batch InfoNCE: each of the `2N` embeddings is an anchor whose
/// softmax runs over the other `2N − 1` embeddings (positive included).
pub fn infonce_loss(tape: &mut Tape, z: Var, z_prime: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (_, n) = check_views(tape, z, z_prime)?;
    let zn = tape.l2_normalize_cols(z)?;
    let zpn = tape.l2_normalize_cols(z_prime)?;
    let all = tape.hconcat(zn, zpn)?;
    let all_t = tape.transpose(all);
    let sims = tape.matmul(all_t, all)?;
    let logits = tape.scale(sims, 1.0 / temperature);
    let targets: Vec<usize> = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
    tape.softmax_cross_entropy_excluding_self(logits, &targets)
}

/// `−mean_i cos(z_i, z'_i)`.
pub fn positive_cosine_loss(tape: &mut Tape, affinity: &AffinityMatrix) -> Result<Var> {
    let n = tape.value(affinity.values).rows();
    let tr = tape.trace(affinity.values)?;
    Ok(tape.scale(tr, -1.0 / n as f64))
}

/// Scalar nodes of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub total: Var,
    /// The cross-entropy (or trace, or InfoNCE) term.
    pub main_term: Var,
    pub symmetry_term: Option<Var>,
    pub affinity: Option<AffinityMatrix>,
}

/// The full objective: the trace loss for SimTrace, otherwise
/// cross-entropy plus `γ·‖A − Aᵀ‖` on the same (scaled) affinity.
pub fn uniclr_loss(tape: &mut Tape, z: Var, z_prime: Var, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    match cfg.variant {
        LossVariant::InfoNce => {
            let t = cfg.temperature.expect("validated");
            let main = infonce_loss(tape, z, z_prime, t)?;
            Ok(LossOutput {
                total: main,
                main_term: main,
                symmetry_term: None,
                affinity: None,
            })
        }
        LossVariant::SimTrace => {
            let affinity = build_affinity(tape, z, z_prime, cfg)?;
            let main = sim_trace_loss(tape, &affinity)?;
            Ok(LossOutput {
                total: main,
                main_term: main,
                symmetry_term: None,
                affinity: Some(affinity),
            })
        }
        LossVariant::PositiveCosine => {
            let affinity = build_affinity(tape, z, z_prime, cfg)?;
            let main = positive_cosine_loss(tape, &affinity)?;
            Ok(LossOutput {
                total: main,
                main_term: main,
                symmetry_term: None,
                affinity: Some(affinity),
            })
        }
        LossVariant::SimAffinity | LossVariant::SimWhitening => {
            let affinity = build_affinity(tape, z, z_prime, cfg)?;
            let ce = sim_affinity_loss(tape, &affinity)?;
            if cfg.gamma == 0.0 {
                return Ok(LossOutput {
                    total: ce,
                    main_term: ce,
                    symmetry_term: None,
                    affinity: Some(affinity),
                });
            }
            let sym = symmetry_loss(tape, &affinity)?;
            let weighted = tape.scale(sym, cfg.gamma);
            let total = tape.add(ce, weighted)?;
            Ok(LossOutput {
                total,
                main_term: ce,
                symmetry_term: Some(sym),
                affinity: Some(affinity),
            })
        }
    }
}

/// Evaluates the objective on plain matrices.
pub fn loss_value(z: &DenseMatrix, z_prime: &DenseMatrix, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(z.clone());
    let b = tape.leaf(z_prime.clone());
    let out = uniclr_loss(&mut tape, a, b, cfg)?;
    Ok(tape.scalar(out.total).expect("scalar loss"))
}

/// Affinity values on plain matrices.
pub fn affinity_values(z: &DenseMatrix, z_prime: &DenseMatrix, cfg: &LossConfig) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let a = tape.leaf(z.clone());
    let b = tape.leaf(z_prime.clone());
    let aff = build_affinity(&mut tape, a, b, cfg)?;
    Ok(tape.value(aff.values).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1e2() -> DenseMatrix {
        DenseMatrix::identity(2)
    }

    fn leaf_affinity(tape: &mut Tape, m: DenseMatrix) -> AffinityMatrix {
        AffinityMatrix {
            values: tape.leaf(m),
            variant: LossVariant::SimAffinity,
            temperature_applied: true,
            whitened: false,
        }
    }

    #[test]
    fn orthonormal_affinity_with_temperature() {
        let a = affinity_values(&e1e2(), &e1e2(), &LossConfig::sim_affinity(Some(0.5), 0.0)).unwrap();
        assert_eq!(a, DenseMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]).unwrap());
    }

    #[test]
    fn affinity_ignores_column_scale() {
        let z = DenseMatrix::from_columns(&[&[1.0, 2.0], &[-0.5, 0.3]]).unwrap();
        let zp = DenseMatrix::from_columns(&[&[0.2, 1.0], &[1.0, 1.0]]).unwrap();
        let cfg = LossConfig::sim_affinity(Some(1.0), 0.0);
        let a = affinity_values(&z, &zp, &cfg).unwrap();
        let b = affinity_values(&z.scale(7.0), &zp, &cfg).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn sim_affinity_closed_forms() {
        let mut t = Tape::new();
        let a = leaf_affinity(&mut t, DenseMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]).unwrap());
        let l = sim_affinity_loss(&mut t, &a).unwrap();
        assert!((t.scalar(l).unwrap() - 0.126928).abs() < 1e-6);
        let z = leaf_affinity(&mut t, DenseMatrix::zeros(2, 2));
        let l = sim_affinity_loss(&mut t, &z).unwrap();
        assert!((t.scalar(l).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn symmetry_examples() {
        let mut t = Tape::new();
        let s = leaf_affinity(&mut t, DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap());
        let l = symmetry_loss(&mut t, &s).unwrap();
        assert_eq!(t.scalar(l), Some(0.0));
        let a = leaf_affinity(&mut t, DenseMatrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap());
        let l = symmetry_loss(&mut t, &a).unwrap();
        assert!((t.scalar(l).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn trace_loss_requires_trace_affinity() {
        let mut t = Tape::new();
        let a = leaf_affinity(&mut t, DenseMatrix::identity(3));
        assert!(matches!(sim_trace_loss(&mut t, &a), Err(Error::Contract(_))));
        let d = AffinityMatrix {
            values: t.leaf(DenseMatrix::from_fn(3, 3, |i, j| if i == j { (i + 1) as f64 } else { 0.0 })),
            variant: LossVariant::SimTrace,
            temperature_applied: false,
            whitened: true,
        };
        let l = sim_trace_loss(&mut t, &d).unwrap();
        assert_eq!(t.scalar(l), Some(-6.0));
    }

    #[test]
    fn infonce_closed_forms() {
        let v = loss_value(&e1e2(), &e1e2(), &LossConfig::info_nce(0.5)).unwrap();
        let expect = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((v - expect).abs() < 1e-14);
        assert!((v - 0.239545).abs() < 1e-6);

        let same = DenseMatrix::from_columns(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        let v = loss_value(&same, &same, &LossConfig::info_nce(0.5)).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn uniclr_gamma_composite() {
        let mut t = Tape::new();
        let a = leaf_affinity(&mut t, DenseMatrix::from_rows(&[&[2.0, 0.0], &[1.0, 2.0]]).unwrap());
        let ce = sim_affinity_loss(&mut t, &a).unwrap();
        let sym = symmetry_loss(&mut t, &a).unwrap();
        let total = t.scalar(ce).unwrap() + 0.01 * t.scalar(sym).unwrap();
        let e = std::f64::consts::E;
        let ce_expect = 0.5 * ((1.0 + (-2.0f64).exp()).ln() + (1.0 + 1.0 / e).ln());
        assert!((t.scalar(ce).unwrap() - ce_expect).abs() < 1e-14);
        assert!((t.scalar(ce).unwrap() - 0.220095).abs() < 1e-6);
        assert!((total - 0.234237).abs() < 1e-6);
    }

    #[test]
    fn uniclr_orthonormal_gamma_zero() {
        let v = loss_value(&e1e2(), &e1e2(), &LossConfig::sim_affinity(Some(0.5), 0.0)).unwrap();
        assert!((v - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn invariant_enforcement() {
        let mut c = LossConfig::sim_trace(0.0);
        c.gamma = 0.01;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = LossConfig::sim_trace(0.0);
        c.temperature = Some(0.5);
        assert!(c.validate().is_err());
        let mut c = LossConfig::sim_affinity(Some(0.5), 0.01);
        c.whitening = true;
        assert!(c.validate().is_err());
        let mut c = LossConfig::sim_whitening(Some(0.5), 0.01, 1e-4);
        c.whitening = false;
        assert!(c.validate().is_err());
        assert!(LossConfig::sim_affinity(Some(-1.0), 0.0).validate().is_err());
        for v in LossVariant::USER_FACING {
            LossConfig::for_variant(v).validate().unwrap();
            assert_eq!(LossVariant::parse(v.name()), Some(v));
        }
        assert_eq!(LossVariant::parse("simfoo"), None);
    }

    #[test]
    fn single_sample_rejected() {
        let z = DenseMatrix::from_columns(&[&[1.0, 0.0]]).unwrap();
        assert!(matches!(
            loss_value(&z, &z, &LossConfig::sim_affinity(Some(0.5), 0.0)),
            Err(Error::Dimension { .. })
        ));
    }
}
