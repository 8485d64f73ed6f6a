//! Linear normal form of the periodic dKG chain.
//!
//! The quadratic part `1/2 y.y + 1/2 x.A x` has the circulant
//! `A = I - eps (tau + tau^T)`. Its square root splits into a diagonal
//! `Omega` and off-diagonal entries `b_m` that decay like `(2 eps)^m`. Every
//! circulant here is handled through its Fourier symbol
//! `lambda_k = 1 - 2 eps cos(2 pi k / (2N+1))`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dnls::DnlsModel;
use crate::error::{LabError, Result};
use crate::lattice::{sites, wrap, LatticeState};

/// Entries below this (relative to `Omega`) are rounding noise and are left
/// out of decay fits.
pub const DECAY_NOISE_FLOOR: f64 = 1e-13;

fn check_eps(epsilon: f64) -> Result<()> {
    if !(0.0..0.5).contains(&epsilon) {
        return Err(LabError::domain(format!(
            "coupling eps = {epsilon} must lie in [0, 1/2)"
        )));
    }
    Ok(())
}

/// Symbol of `A` at Fourier index `k = 0..M`.
fn symbol(k: usize, m: usize, epsilon: f64) -> f64 {
    1.0 - 2.0 * epsilon * (2.0 * std::f64::consts::PI * k as f64 / m as f64).cos()
}

fn plans(m: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(m), planner.plan_fft_inverse(m))
}

/// First row (offsets `0..M`) of the circulant with symbol `f(lambda_k)`.
fn circulant_row(m: usize, epsilon: f64, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let (_, inverse) = plans(m);
    let mut buf: Vec<Complex64> = (0..m)
        .map(|k| Complex64::new(f(symbol(k, m, epsilon)), 0.0))
        .collect();
    inverse.process(&mut buf);
    buf.iter().map(|z| z.re / m as f64).collect()
}

/// `A^power` applied to `v`, through the Fourier symbol.
fn apply_power(v: &[f64], epsilon: f64, power: f64) -> Vec<f64> {
    let m = v.len();
    let (forward, inverse) = plans(m);
    let mut buf: Vec<Complex64> = v.iter().map(|&r| Complex64::new(r, 0.0)).collect();
    forward.process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        *z *= symbol(k, m, epsilon).powf(power);
    }
    inverse.process(&mut buf);
    buf.iter().map(|z| z.re / m as f64).collect()
}

/// Normal-mode frequencies `omega_j = sqrt(1 - 2 eps cos(2 pi j / (2N+1)))`
/// for `j = -N..=N`, stored at slot `j + N`.
pub fn mode_frequencies(n: usize, epsilon: f64) -> Result<Vec<f64>> {
    check_eps(epsilon)?;
    let m = sites(n);
    Ok((0..m)
        .map(|k| {
            let j = k as isize - n as isize;
            symbol(j.rem_euclid(m as isize) as usize, m, epsilon).sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalFormCoeffs {
    #[serde(rename = "N")]
    pub n: usize,
    pub epsilon: f64,
    #[serde(rename = "Omega")]
    pub omega: f64,
    /// `b[m-1] = b_m`, `m = 1..=N`.
    pub b: Vec<f64>,
    /// Mode frequencies in the order of [`mode_frequencies`].
    pub omega_modes: Vec<f64>,
}

impl NormalFormCoeffs {
    pub fn b_m(&self, m: usize) -> f64 {
        self.b[m - 1]
    }

    /// Full first row of `A^{1/2}` by offset `0..2N+1`.
    pub fn sqrt_row(&self) -> Vec<f64> {
        let m = sites(self.n);
        (0..m)
            .map(|d| match d {
                0 => self.omega,
                d if d <= self.n => self.b[d - 1],
                d => self.b[m - d - 1],
            })
            .collect()
    }

    /// Envelope model of the effective Hamiltonian of the given order.
    pub fn dnls_model(&self, order: u8) -> Result<DnlsModel> {
        check_order(order, self.n)?;
        Ok(DnlsModel::NormalForm {
            omega: self.omega,
            b1: self.b[0],
            b2: (order == 2).then(|| self.b[1]),
        })
    }

    /// `(m, b_m, (2 eps)^m)` rows for decay plots.
    pub fn decay_csv(&self, comment: Option<&str>) -> Result<String> {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["m", "b_m", "two_eps_pow_m"])?;
        for (i, b) in self.b.iter().enumerate() {
            let m = i + 1;
            w.write_record([
                m.to_string(),
                b.to_string(),
                (2.0 * self.epsilon).powi(m as i32).to_string(),
            ])?;
        }
        out.push_str(&crate::lattice::into_string(w)?);
        Ok(out)
    }
}

/// `Omega` and `b_m` from the first row of `A^{1/2}`, computed as the inverse
/// DFT of the mode frequencies.
pub fn sqrt_circulant(n: usize, epsilon: f64) -> Result<NormalFormCoeffs> {
    check_eps(epsilon)?;
    let m = sites(n);
    let row = circulant_row(m, epsilon, f64::sqrt);
    for d in 1..=n {
        debug_assert!((row[d] - row[m - d]).abs() <= 1e-14);
    }
    Ok(NormalFormCoeffs {
        n,
        epsilon,
        omega: row[0],
        b: row[1..=n].to_vec(),
        omega_modes: mode_frequencies(n, epsilon)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayCertificate {
    /// `max_m |b_m| / (2 eps)^m` over the entries above the noise floor.
    pub c_fit: f64,
    /// Offset at which `c_fit` is attained.
    pub argmax_m: usize,
    /// Largest `|b_{m+1}| / |b_m|` over consecutive entries above the floor.
    pub max_tail_ratio: f64,
    pub holds: bool,
}

/// Checks `|b_m| <= C (2 eps)^m`: the fitted constant must be attained at one
/// of the first three offsets and consecutive ratios must stay below
/// `2 eps (1 + tolerance)`.
pub fn decay_certificate(coeffs: &NormalFormCoeffs, tolerance: f64) -> DecayCertificate {
    let mu = 2.0 * coeffs.epsilon;
    let floor = DECAY_NOISE_FLOOR * coeffs.omega.abs().max(1.0);
    let mut c_fit = 0.0;
    let mut argmax_m = 0;
    for (i, b) in coeffs.b.iter().enumerate() {
        let m = i + 1;
        let scale = mu.powi(m as i32);
        if scale > 1e-300 && b.abs() > floor {
            let c = b.abs() / scale;
            if c > c_fit {
                c_fit = c;
                argmax_m = m;
            }
        }
    }
    let mut max_tail_ratio: f64 = 0.0;
    for w in coeffs.b.windows(2) {
        if w[0].abs() > floor && w[1].abs() > floor {
            max_tail_ratio = max_tail_ratio.max(w[1].abs() / w[0].abs());
        }
    }
    let holds = argmax_m <= 3 && max_tail_ratio <= mu * (1.0 + tolerance);
    DecayCertificate {
        c_fit,
        argmax_m,
        max_tail_ratio,
        holds,
    }
}

/// Seed-norm constant of the quadratic coupling: each component
/// `b_m [q_0 (q_m + q_-m) + p_0 (p_m + p_-m)]` has four unit monomials.
pub fn zeta0_constant(cert: &DecayCertificate) -> f64 {
    4.0 * cert.c_fit
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Inverse,
}

/// `(q, p) = (A^{1/4} x, A^{-1/4} y)` and its inverse.
pub fn linear_transform(
    state: &LatticeState,
    coeffs: &NormalFormCoeffs,
    direction: Direction,
) -> Result<LatticeState> {
    if state.n() != coeffs.n {
        return Err(LabError::domain(format!(
            "state has N = {} but coefficients were built for N = {}",
            state.n(),
            coeffs.n
        )));
    }
    let s = match direction {
        Direction::Forward => 1.0,
        Direction::Inverse => -1.0,
    };
    Ok(LatticeState {
        t: state.t,
        x: apply_power(&state.x, coeffs.epsilon, 0.25 * s),
        y: apply_power(&state.y, coeffs.epsilon, -0.25 * s),
    })
}

/// Dense `A^{1/2}`-weighted quadratic form `1/2 (p.A^{1/2} p + q.A^{1/2} q)`.
pub fn quadratic_energy_normal(state: &LatticeState, coeffs: &NormalFormCoeffs) -> f64 {
    let row = coeffs.sqrt_row();
    let form = |v: &[f64]| -> f64 {
        let m = v.len();
        (0..m)
            .map(|i| {
                v[i] * (0..m)
                    .map(|j| row[wrap(j, -(i as isize), m)] * v[j])
                    .sum::<f64>()
            })
            .sum()
    };
    0.5 * (form(&state.y) + form(&state.x))
}

fn check_order(order: u8, n: usize) -> Result<()> {
    match order {
        1 => Ok(()),
        2 if n >= 2 => Ok(()),
        2 => Err(LabError::domain(
            "second-order effective Hamiltonian needs N >= 2",
        )),
        _ => Err(LabError::domain(format!(
            "effective Hamiltonian order {order} is not 1 or 2"
        ))),
    }
}

/// Effective Hamiltonian
/// `(Omega + 2b1) sum |psi|^2 - b1 sum |psi_{j+1} - psi_j|^2 + 3/8 sum |psi|^4`;
/// order 2 adds `2 b2` to the first coefficient and `- b2 sum |psi_{j+2} - psi_j|^2`.
pub fn keff_energy(psi: &[Complex64], coeffs: &NormalFormCoeffs, order: u8) -> Result<f64> {
    check_order(order, coeffs.n)?;
    if psi.len() != sites(coeffs.n) {
        return Err(LabError::domain(
            "psi length does not match the coefficients",
        ));
    }
    let m = psi.len();
    let b1 = coeffs.b[0];
    let b2 = if order == 2 { coeffs.b[1] } else { 0.0 };
    let mut mass = 0.0;
    let mut near = 0.0;
    let mut next = 0.0;
    let mut quartic = 0.0;
    for k in 0..m {
        let n2 = psi[k].norm_sqr();
        mass += n2;
        quartic += n2 * n2;
        near += (psi[wrap(k, 1, m)] - psi[k]).norm_sqr();
        if order == 2 {
            next += (psi[wrap(k, 2, m)] - psi[k]).norm_sqr();
        }
    }
    Ok((coeffs.omega + 2.0 * b1 + 2.0 * b2) * mass - b1 * near - b2 * next + 0.375 * quartic)
}

/// `H_Omega = Omega sum |psi_j|^2`.
pub fn h_omega(psi: &[Complex64], omega: f64) -> f64 {
    omega * psi.iter().map(|z| z.norm_sqr()).sum::<f64>()
}

/// Norms of the centered-aligned components `h_1^(m)`, `m = 0..=max_m`, of the
/// quartic `1/4 sum x_j^4` written in the coordinates `x = A^{-1/4} q`.
///
/// Each translation class of monomials `q_s q_{s+d2} q_{s+d3} q_{s+D}`
/// belongs to the component `m = ceil(D / 2)`; the norm is the sum of absolute
/// coefficients. Requires `2 max_m <= N` so that offsets are unambiguous on
/// the ring.
pub fn quartic_seed_norms(n: usize, epsilon: f64, max_m: usize) -> Result<Vec<f64>> {
    check_eps(epsilon)?;
    if 2 * max_m > n {
        return Err(LabError::domain(format!(
            "quartic seed components up to m = {max_m} need N >= {}",
            2 * max_m
        )));
    }
    let m = sites(n);
    let row = circulant_row(m, epsilon, |l| l.powf(-0.25));
    let coef = |d: isize, j: usize| row[wrap(0, d - j as isize, m)];
    let factorial = [1.0, 1.0, 2.0, 6.0, 24.0];
    let mut norms = vec![0.0; max_m + 1];
    for span in 0..=(2 * max_m) as isize {
        let comp = ((span + 1) / 2) as usize;
        for d2 in 0..=span {
            for d3 in d2..=span {
                let offsets = [0, d2, d3, span];
                let mut mult = 24.0;
                let mut i = 0;
                while i < 4 {
                    let mut r = i;
                    while r + 1 < 4 && offsets[r + 1] == offsets[i] {
                        r += 1;
                    }
                    mult /= factorial[r - i + 1];
                    i = r + 1;
                }
                let sum: f64 = (0..m)
                    .map(|j| offsets.iter().map(|&d| coef(d, j)).product::<f64>())
                    .sum();
                norms[comp] += (0.25 * mult * sum).abs();
            }
        }
    }
    Ok(norms)
}

/// `max_m ||h_1^(m)|| / (2 eps)^m` over components above the noise floor.
pub fn quartic_seed_constant(norms: &[f64], epsilon: f64) -> f64 {
    let mu = 2.0 * epsilon;
    norms
        .iter()
        .enumerate()
        .filter(|(m, v)| **v > DECAY_NOISE_FLOOR && (*m == 0 || mu.powi(*m as i32) > 1e-300))
        .map(|(m, v)| v / mu.powi(m as i32))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConstants {
    pub c_zeta0: f64,
    pub c_h1: f64,
    pub f_eps: f64,
    pub gamma: f64,
    pub c_star: f64,
    pub rho_star: f64,
    /// The small-eps shorthand `2 Omega / (3 C_h1 (1 + e))`.
    pub rho_star_approx: f64,
}

/// Energy threshold of the first-order nonlinear normal form.
pub fn thresholds(c_zeta0: f64, c_h1: f64, epsilon: f64, omega: f64) -> Result<ThresholdConstants> {
    if !(c_zeta0 > 0.0 && c_h1 > 0.0 && omega > 0.0) {
        return Err(LabError::domain("C_zeta0, C_h1 and Omega must be positive"));
    }
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(LabError::domain(format!(
            "eps = {epsilon} must lie in (0, 1/2)"
        )));
    }
    let two_eps = 2.0 * epsilon;
    let shrink = (1.0 - two_eps) * (1.0 - two_eps.powf(0.75));
    let f_eps = 3.0 * omega / (64.0 * c_zeta0) * shrink / two_eps.sqrt();
    if !(f_eps > 1.0) {
        return Err(LabError::ThresholdViolated { f_eps });
    }
    let gamma = 2.0 * omega * (1.0 - 1.0 / (2.0 * f_eps));
    let c_star = 4.0 * c_h1 / (3.0 * gamma * shrink);
    let e = std::f64::consts::E;
    let rho_star = 1.0 / (96.0 * (1.0 + e) * c_star);
    let rho_star_approx = 2.0 * omega / (3.0 * c_h1 * (1.0 + e));
    Ok(ThresholdConstants {
        c_zeta0,
        c_h1,
        f_eps,
        gamma,
        c_star,
        rho_star,
        rho_star_approx,
    })
}

/// Thresholds with both constants fitted from the decay of `b_m` and of the
/// quartic seed components.
pub fn fitted_thresholds(n: usize, epsilon: f64) -> Result<ThresholdConstants> {
    let coeffs = sqrt_circulant(n, epsilon)?;
    let cert = decay_certificate(&coeffs, 0.1);
    let max_m = (n / 2).min(6);
    let c_h1 = quartic_seed_constant(&quartic_seed_norms(n, epsilon, max_m)?, epsilon);
    thresholds(zeta0_constant(&cert), c_h1, epsilon, coeffs.omega)
}
