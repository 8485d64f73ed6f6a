//! Envelope equations of dNLS type.
//!
//! Every variant has the shape `a' = -i (L a + kappa |a|^2 a)` with `L` a
//! symmetric circulant of range two, which is what makes the exact second
//! derivative a short chain-rule formula.

use log::warn;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lattice::{half_size, into_string, read_rows, wrap};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Complex envelope `a_j` together with its clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeState {
    pub tau: f64,
    pub a: Vec<Complex64>,
}

impl EnvelopeState {
    pub fn new(a: Vec<Complex64>, tau: f64) -> Result<Self> {
        half_size(a.len())?;
        if !tau.is_finite() || !a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(LabError::InvalidState("non-finite envelope entry".into()));
        }
        Ok(EnvelopeState { tau, a })
    }

    pub fn from_real(a: &[f64], tau: f64) -> Result<Self> {
        Self::new(a.iter().map(|&v| Complex64::new(v, 0.0)).collect(), tau)
    }

    pub fn n(&self) -> usize {
        (self.a.len() - 1) / 2
    }

    pub fn max_abs(&self) -> f64 {
        self.a.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> Result<String> {
        let n = self.n() as isize;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["j", "re", "im"])?;
        for (k, z) in self.a.iter().enumerate() {
            w.write_record([
                (k as isize - n).to_string(),
                z.re.to_string(),
                z.im.to_string(),
            ])?;
        }
        into_string(w)
    }

    pub fn from_csv(text: &str, tau: f64) -> Result<Self> {
        let rows = read_rows::<(isize, f64, f64)>(text)?;
        let m = rows.len();
        let n = half_size(m)? as isize;
        let mut a = vec![Complex64::new(f64::NAN, f64::NAN); m];
        for (j, re, im) in rows {
            if j < -n || j > n {
                return Err(LabError::InvalidState(format!(
                    "site {j} outside -{n}..={n}"
                )));
            }
            a[(j + n) as usize] = Complex64::new(re, im);
        }
        EnvelopeState::new(a, tau)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: EnvelopeState = serde_json::from_str(text)?;
        EnvelopeState::new(raw.a, raw.tau)
    }
}

/// Which clock a model evolves in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clock {
    /// `tau = eps t`.
    Slow,
    /// `t` itself.
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum DnlsModel {
    /// `2i a' + 3 nu |a|^2 a = a_{j+1} + a_{j-1}`
    Standard { nu: f64 },
    /// `2i a' + 3 eps delta |a|^2 a = a_{j+1} + a_{j-1} + eps/4 (a_{j+2} + 2a_j + a_{j-2})`
    Generalized { delta: f64, epsilon: f64 },
    /// `i psi' = Omega psi + b1 (psi_{j+1} + psi_{j-1}) + b2 (psi_{j+2} + psi_{j-2}) + 3/4 |psi|^2 psi`
    NormalForm {
        omega: f64,
        b1: f64,
        b2: Option<f64>,
    },
}

/// `a' = -i (c0 a_j + c1 (a_{j+1} + a_{j-1}) + c2 (a_{j+2} + a_{j-2}) + kappa |a_j|^2 a_j)`.
#[derive(Debug, Clone, Copy)]
struct CubicLattice {
    c0: f64,
    c1: f64,
    c2: f64,
    kappa: f64,
}

impl CubicLattice {
    fn linear(&self, a: &[Complex64], k: usize) -> Complex64 {
        let m = a.len();
        let mut v = a[k] * self.c0 + (a[wrap(k, 1, m)] + a[wrap(k, -1, m)]) * self.c1;
        if self.c2 != 0.0 {
            v += (a[wrap(k, 2, m)] + a[wrap(k, -2, m)]) * self.c2;
        }
        v
    }

    fn rhs(&self, a: &[Complex64]) -> Vec<Complex64> {
        (0..a.len())
            .map(|k| -I * (self.linear(a, k) + a[k] * (self.kappa * a[k].norm_sqr())))
            .collect()
    }

    fn second_derivative(&self, a: &[Complex64]) -> Vec<Complex64> {
        let adot = self.rhs(a);
        (0..a.len())
            .map(|k| {
                let z = a[k];
                // d/dt (|z|^2 z) = 2 |z|^2 z' + z^2 conj(z')
                let cubic_dot = adot[k] * (2.0 * z.norm_sqr()) + z * z * adot[k].conj();
                -I * (self.linear(&adot, k) + cubic_dot * self.kappa)
            })
            .collect()
    }
}

impl DnlsModel {
    /// Checks the parameter ranges. Out-of-regime but well-defined choices only warn.
    pub fn validate(&self) -> Result<()> {
        match *self {
            DnlsModel::Standard { nu } => {
                if !(nu > 0.0 && nu <= 1.0) {
                    return Err(LabError::domain(format!("nu = {nu} must lie in (0, 1]")));
                }
            }
            DnlsModel::Generalized { delta, epsilon } => {
                if !(delta > 0.0 && delta <= 1.0) {
                    return Err(LabError::domain(format!(
                        "delta = {delta} must lie in (0, 1]"
                    )));
                }
                if !(epsilon > 0.0 && epsilon < 0.5) {
                    return Err(LabError::domain(format!(
                        "epsilon = {epsilon} must lie in (0, 1/2)"
                    )));
                }
                if delta <= epsilon {
                    warn!("delta = {delta} <= epsilon = {epsilon}: outside the asymptotic range eps << delta");
                }
            }
            DnlsModel::NormalForm { omega, b1, b2 } => {
                if !omega.is_finite() {
                    return Err(LabError::domain("Omega must be finite"));
                }
                if !(b1 < 0.0) {
                    return Err(LabError::domain(format!("b1 = {b1} must be negative")));
                }
                if let Some(b2) = b2 {
                    if !(b2 < 0.0) {
                        return Err(LabError::domain(format!("b2 = {b2} must be negative")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate), plus a warning when `nu <= eps`.
    pub fn validate_against(&self, epsilon: f64) -> Result<()> {
        self.validate()?;
        if let DnlsModel::Standard { nu } = *self {
            if nu <= epsilon {
                warn!("nu = {nu} <= epsilon = {epsilon}: outside the asymptotic range eps << nu");
            }
        }
        Ok(())
    }

    pub fn clock(&self) -> Clock {
        match self {
            DnlsModel::Standard { .. } | DnlsModel::Generalized { .. } => Clock::Slow,
            DnlsModel::NormalForm { .. } => Clock::Fast,
        }
    }

    fn cubic(&self) -> CubicLattice {
        match *self {
            DnlsModel::Standard { nu } => CubicLattice {
                c0: 0.0,
                c1: 0.5,
                c2: 0.0,
                kappa: -1.5 * nu,
            },
            DnlsModel::Generalized { delta, epsilon } => CubicLattice {
                c0: 0.25 * epsilon,
                c1: 0.5,
                c2: 0.125 * epsilon,
                kappa: -1.5 * epsilon * delta,
            },
            DnlsModel::NormalForm { omega, b1, b2 } => CubicLattice {
                c0: omega,
                c1: b1,
                c2: b2.unwrap_or(0.0),
                kappa: 0.75,
            },
        }
    }

    pub fn rhs(&self, a: &[Complex64]) -> Vec<Complex64> {
        self.cubic().rhs(a)
    }
}

pub fn rhs_standard(a: &[Complex64], nu: f64) -> Vec<Complex64> {
    DnlsModel::Standard { nu }.rhs(a)
}

pub fn rhs_generalized(a: &[Complex64], delta: f64, epsilon: f64) -> Vec<Complex64> {
    DnlsModel::Generalized { delta, epsilon }.rhs(a)
}

pub fn rhs_normalform(psi: &[Complex64], omega: f64, b1: f64, b2: Option<f64>) -> Vec<Complex64> {
    DnlsModel::NormalForm { omega, b1, b2 }.rhs(psi)
}

/// Exact `a''` along the flow of `model`, by differentiating the right-hand side.
pub fn second_derivative(a: &[Complex64], model: &DnlsModel) -> Vec<Complex64> {
    model.cubic().second_derivative(a)
}

/// `||a||^2`, conserved by every variant.
pub fn l2_conserved(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}
