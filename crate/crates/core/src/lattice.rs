//! Periodic-chain state types, norms and the dKG Hamiltonian.
//!
//! A chain of half-size `N` has `2N+1` sites labelled `j = -N..=N`. Storage is
//! zero-based: site `j` lives at slot `j + N`. Neighbour access wraps
//! periodically, so slot `2N` and slot `0` are adjacent.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Number of sites of a chain with half-size `n`.
pub fn sites(n: usize) -> usize {
    2 * n + 1
}

/// Slot index of the site `k + offset` on a ring of `m` sites.
#[inline]
pub(crate) fn wrap(k: usize, offset: isize, m: usize) -> usize {
    (k as isize + offset).rem_euclid(m as isize) as usize
}

/// Half-size `N` from a sequence length `2N+1`.
pub fn half_size(len: usize) -> Result<usize> {
    if len < 3 || len.is_multiple_of(2) {
        return Err(LabError::InvalidState(format!(
            "sequence length {len} is not of the form 2N+1 with N >= 1"
        )));
    }
    Ok((len - 1) / 2)
}

/// Values that can live on a lattice site.
pub trait SiteValue: Copy {
    fn abs_sqr(self) -> f64;
    fn finite(self) -> bool;
}

impl SiteValue for f64 {
    fn abs_sqr(self) -> f64 {
        self * self
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl SiteValue for Complex64 {
    fn abs_sqr(self) -> f64 {
        self.norm_sqr()
    }
    fn finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// The l2 norm `sqrt(sum |s_j|^2)`.
pub fn l2_norm<T: SiteValue>(s: &[T]) -> Result<f64> {
    if !s.iter().all(|v| v.finite()) {
        return Err(LabError::domain("non-finite entry in sequence"));
    }
    Ok(s.iter().map(|v| v.abs_sqr()).sum::<f64>().sqrt())
}

/// Largest absolute entry.
pub fn sup_norm<T: SiteValue>(s: &[T]) -> f64 {
    s.iter().map(|v| v.abs_sqr().sqrt()).fold(0.0, f64::max)
}

/// Cyclic shift by `k` slots: `out[i] = s[i - k]`.
pub fn shift<T: Copy>(s: &[T], k: isize) -> Vec<T> {
    let m = s.len();
    (0..m).map(|i| s[wrap(i, -k, m)]).collect()
}

/// Coupling and anharmonic weight of the dKG chain
/// `x'' + x + rho x^3 = eps (x_{j+1} + x_{j-1})`.
///
/// Unlike [`ModelParams`] this carries no range checks, so the uncoupled and
/// linear limits can be evaluated directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dkg {
    pub epsilon: f64,
    pub rho: f64,
}

impl Dkg {
    pub fn new(epsilon: f64, rho: f64) -> Self {
        Dkg { epsilon, rho }
    }

    /// Force `-x_j - rho x_j^3 + eps (x_{j+1} + x_{j-1})` written into `out`.
    pub fn force_into(&self, x: &[f64], out: &mut [f64]) {
        let m = x.len();
        for k in 0..m {
            let left = x[wrap(k, -1, m)];
            let right = x[wrap(k, 1, m)];
            let xk = x[k];
            out[k] = -xk - self.rho * xk * xk * xk + self.epsilon * (left + right);
        }
    }

    pub fn force(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.force_into(x, &mut out);
        out
    }
}

/// Validated experiment parameters: `0 < eps < 1/2`, `0 < rho <= 1`, `N >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    epsilon: f64,
    rho: f64,
    n: usize,
}

impl ModelParams {
    pub fn new(epsilon: f64, rho: f64, n: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(LabError::domain(format!(
                "coupling epsilon = {epsilon} must lie in (0, 1/2)"
            )));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(LabError::domain(format!(
                "amplitude scale rho = {rho} must lie in (0, 1]"
            )));
        }
        if n < 1 {
            return Err(LabError::domain("half-size N must be at least 1"));
        }
        Ok(ModelParams { epsilon, rho, n })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sites(&self) -> usize {
        sites(self.n)
    }

    /// `nu = rho / eps`, the nonlinearity of the standard envelope equation.
    pub fn nu(&self) -> f64 {
        self.rho / self.epsilon
    }

    /// `delta = rho / eps^2`, the nonlinearity of the generalized envelope equation.
    pub fn delta(&self) -> f64 {
        self.rho / (self.epsilon * self.epsilon)
    }

    pub fn dkg(&self) -> Dkg {
        Dkg::new(self.epsilon, self.rho)
    }
}

/// Displacements `x`, velocities `y` and fast time `t` on a periodic chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeState {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl LatticeState {
    pub fn new(x: Vec<f64>, y: Vec<f64>, t: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(LabError::InvalidState(format!(
                "x has {} sites but y has {}",
                x.len(),
                y.len()
            )));
        }
        half_size(x.len())?;
        if !t.is_finite() || !x.iter().chain(&y).all(|v| v.is_finite()) {
            return Err(LabError::InvalidState("non-finite entry".into()));
        }
        Ok(LatticeState { t, x, y })
    }

    pub fn zeros(n: usize) -> Self {
        LatticeState {
            t: 0.0,
            x: vec![0.0; sites(n)],
            y: vec![0.0; sites(n)],
        }
    }

    pub fn n(&self) -> usize {
        (self.x.len() - 1) / 2
    }

    /// Displacement at paper index `j` (periodic).
    pub fn x_at(&self, j: isize) -> f64 {
        let m = self.x.len();
        self.x[wrap(self.n(), j, m)]
    }

    pub fn y_at(&self, j: isize) -> f64 {
        let m = self.y.len();
        self.y[wrap(self.n(), j, m)]
    }

    pub fn shifted(&self, k: isize) -> Self {
        LatticeState {
            t: self.t,
            x: shift(&self.x, k),
            y: shift(&self.y, k),
        }
    }

    pub fn max_abs(&self) -> f64 {
        sup_norm(&self.x).max(sup_norm(&self.y))
    }

    pub fn to_csv(&self) -> Result<String> {
        let n = self.n() as isize;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["j", "x", "y"])?;
        for (k, (x, y)) in self.x.iter().zip(&self.y).enumerate() {
            w.write_record([(k as isize - n).to_string(), x.to_string(), y.to_string()])?;
        }
        into_string(w)
    }

    /// Parses the `j,x,y` table; rows may come in any order.
    pub fn from_csv(text: &str, t: f64) -> Result<Self> {
        let rows = read_rows::<(isize, f64, f64)>(text)?;
        let m = rows.len();
        let n = half_size(m)? as isize;
        let mut x = vec![f64::NAN; m];
        let mut y = vec![f64::NAN; m];
        for (j, xv, yv) in rows {
            if j < -n || j > n {
                return Err(LabError::InvalidState(format!(
                    "site {j} outside -{n}..={n}"
                )));
            }
            x[(j + n) as usize] = xv;
            y[(j + n) as usize] = yv;
        }
        LatticeState::new(x, y, t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: LatticeState = serde_json::from_str(text)?;
        LatticeState::new(raw.x, raw.y, raw.t)
    }
}

pub(crate) fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| LabError::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| LabError::InvalidState(e.to_string()))
}

pub(crate) fn read_rows<R: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<R>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Conserved energy of the scaled dKG chain,
/// `1/2 sum (y^2 + x^2 - 2 eps x_{j+1} x_j) + rho/4 sum x^4`.
pub fn energy_dkg(state: &LatticeState, dkg: &Dkg) -> f64 {
    let m = state.x.len();
    let mut quad = 0.0;
    let mut quartic = 0.0;
    for k in 0..m {
        let x = state.x[k];
        let y = state.y[k];
        quad += y * y + x * x - 2.0 * dkg.epsilon * state.x[wrap(k, 1, m)] * x;
        quartic += x * x * x * x;
    }
    0.5 * quad + 0.25 * dkg.rho * quartic
}

/// Result of removing the diagonal part of the discrete Laplacian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescaling {
    pub epsilon: f64,
    pub amplitude_factor: f64,
    pub time_factor: f64,
}

/// Maps the Laplacian-coupled chain `x'' + x + x^3 = eps (x_{j+1} - 2x_j + x_{j-1})`
/// onto the diagonal-free form. `eps -> eps / (1 + 2 eps)` is a bijection of
/// `(0, inf)` onto `(0, 1/2)`.
pub fn rescale_to_standard(epsilon_raw: f64) -> Result<Rescaling> {
    if !(epsilon_raw > 0.0) || epsilon_raw.is_nan() {
        return Err(LabError::domain(format!(
            "raw coupling {epsilon_raw} must be positive"
        )));
    }
    let s = 1.0 + 2.0 * epsilon_raw;
    let epsilon = if epsilon_raw.is_infinite() {
        0.5
    } else {
        epsilon_raw / s
    };
    Ok(Rescaling {
        epsilon,
        amplitude_factor: s.powf(-0.5),
        time_factor: s.sqrt(),
    })
}
