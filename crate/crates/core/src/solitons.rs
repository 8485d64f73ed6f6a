//! Stationary dNLS solitons `a_j = A_j e^{i Omega_s tau}` and the approximate
//! dKG breathers built on them.
//!
//! Substituting the stationary form into the standard envelope equation gives
//! `-2 Omega_s A_j + 3 nu A_j^3 - A_{j+1} - A_{j-1} = 0`, solved here by Newton
//! iteration from compactly supported seeds.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::approximation::leading_order;
use crate::dnls::DnlsModel;
use crate::error::{LabError, Result};
use crate::integrators::{rk4_envelope, VerletStepper};
use crate::lattice::{l2_norm, sites, wrap, Dkg, LatticeState};

pub const NEWTON_TOLERANCE: f64 = 1e-10;
pub const NEWTON_MAX_ITERATIONS: usize = 50;

/// A seed site (paper index) with the sign of its uncoupled amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub site: isize,
    pub positive: bool,
}

impl Seed {
    pub fn plus(site: isize) -> Self {
        Seed {
            site,
            positive: true,
        }
    }

    pub fn minus(site: isize) -> Self {
        Seed {
            site,
            positive: false,
        }
    }
}

impl fmt::Display for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.site, if self.positive { '+' } else { '-' })
    }
}

impl FromStr for Seed {
    type Err = LabError;

    /// `"3"`, `"3:+"` or `"-1:-"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (site, sign) = match s.split_once(':') {
            Some((site, sign)) => (site, sign.trim()),
            None => (s, "+"),
        };
        let site = site
            .trim()
            .parse()
            .map_err(|_| LabError::Config(format!("bad seed site in {s:?}")))?;
        let positive = match sign {
            "+" => true,
            "-" => false,
            _ => {
                return Err(LabError::Config(format!(
                    "seed sign in {s:?} must be + or -"
                )))
            }
        };
        Ok(Seed { site, positive })
    }
}

/// Parses a comma-separated seed list such as `"0:+,1:-"`; blank means none.
pub fn parse_seeds(spec: &str) -> Result<Vec<Seed>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolitonProfile {
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "Omega_s")]
    pub omega_s: f64,
    pub nu: f64,
    pub newton_residual: f64,
    pub iterations: usize,
}

impl SolitonProfile {
    pub fn n(&self) -> usize {
        (self.a.len() - 1) / 2
    }

    /// `A_j` at paper index `j`.
    pub fn at(&self, j: isize) -> f64 {
        self.a[wrap(self.n(), j, self.a.len())]
    }

    /// Envelope at `tau = 0`.
    pub fn envelope(&self) -> Vec<Complex64> {
        self.a.iter().map(|&v| Complex64::new(v, 0.0)).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["j", "A"])?;
        let n = self.n() as isize;
        for (k, v) in self.a.iter().enumerate() {
            w.write_record([(k as isize - n).to_string(), v.to_string()])?;
        }
        crate::lattice::into_string(w)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: SolitonProfile = serde_json::from_str(text)?;
        if p.a.len().is_multiple_of(2) {
            return Err(LabError::InvalidState("profile length must be odd".into()));
        }
        Ok(p)
    }
}

/// `D_j = -2 Omega_s A_j + 3 nu A_j^3 - A_{j+1} - A_{j-1}` on the ring.
pub fn stationary_defect(a: &[f64], omega_s: f64, nu: f64) -> Vec<f64> {
    let m = a.len();
    (0..m)
        .map(|k| {
            -2.0 * omega_s * a[k] + 3.0 * nu * a[k].powi(3) - a[wrap(k, 1, m)] - a[wrap(k, -1, m)]
        })
        .collect()
}

fn jacobian(a: &[f64], omega_s: f64, nu: f64) -> DMatrix<f64> {
    let m = a.len();
    let mut jac = DMatrix::zeros(m, m);
    for k in 0..m {
        jac[(k, k)] += -2.0 * omega_s + 9.0 * nu * a[k] * a[k];
        jac[(k, wrap(k, 1, m))] -= 1.0;
        jac[(k, wrap(k, -1, m))] -= 1.0;
    }
    jac
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Newton solve of the stationary equation from the uncoupled seed
/// `+-sqrt(2 Omega_s / (3 nu))` on the seed sites.
pub fn solve_soliton(omega_s: f64, nu: f64, n: usize, seeds: &[Seed]) -> Result<SolitonProfile> {
    if !omega_s.is_finite() || omega_s.abs() <= 1.0 {
        return Err(LabError::domain(format!(
            "soliton frequency {omega_s} must lie outside the linear band [-1, 1]"
        )));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(LabError::domain(format!("nu = {nu} must be positive")));
    }
    let m = sites(n);
    let mut a = vec![0.0; m];
    let height = (2.0 * omega_s / (3.0 * nu)).abs().sqrt();
    for seed in seeds {
        if seed.site.unsigned_abs() > n {
            return Err(LabError::domain(format!(
                "seed site {} lies outside -{n}..={n}",
                seed.site
            )));
        }
        a[wrap(n, seed.site, m)] = if seed.positive { height } else { -height };
    }

    let mut defect = stationary_defect(&a, omega_s, nu);
    let mut residual = max_abs(&defect);
    let mut iteration = 0;
    while residual > NEWTON_TOLERANCE {
        if iteration == NEWTON_MAX_ITERATIONS || !residual.is_finite() {
            return Err(LabError::Divergence {
                iterations: iteration,
                defect: residual,
                last: a,
            });
        }
        iteration += 1;
        let step = jacobian(&a, omega_s, nu)
            .lu()
            .solve(&DVector::from_vec(defect))
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or(LabError::Degenerate { iteration })?;
        for (v, s) in a.iter_mut().zip(step.iter()) {
            *v -= s;
        }
        defect = stationary_defect(&a, omega_s, nu);
        residual = max_abs(&defect);
    }
    Ok(SolitonProfile {
        a,
        omega_s,
        nu,
        newton_residual: residual,
        iterations: iteration,
    })
}

/// Ratios `A_{m+1} / A_m` for `m = 0..` moving right from the central site.
pub fn tail_ratios(profile: &SolitonProfile) -> Vec<f64> {
    let n = profile.n() as isize;
    (0..n)
        .filter(|&j| profile.at(j) != 0.0)
        .map(|j| profile.at(j + 1) / profile.at(j))
        .collect()
}

fn standard_model(profile: &SolitonProfile, epsilon: f64, rho: f64) -> Result<DnlsModel> {
    let nu = rho / epsilon;
    if (nu - profile.nu).abs() > 1e-12 * profile.nu.abs().max(1.0) {
        return Err(LabError::domain(format!(
            "profile was solved for nu = {} but rho / eps = {nu}",
            profile.nu
        )));
    }
    Ok(DnlsModel::Standard { nu: profile.nu })
}

/// Ansatz state at `t = 0` built on the profile.
pub fn build_breather_initial(
    profile: &SolitonProfile,
    epsilon: f64,
    rho: f64,
) -> Result<LatticeState> {
    let model = standard_model(profile, epsilon, rho)?;
    let a = profile.envelope();
    let adot = model.rhs(&a);
    let x0 = leading_order(&a, &adot, rho, epsilon, 0.0);
    LatticeState::new(x0.x, x0.xdot, 0.0)
}

/// Slope of the unwrapped phase of the envelope at its largest site over
/// `tau in [0, window]`, from an RK4 run with step `dtau`.
pub fn fit_envelope_frequency(
    a0: &[Complex64],
    model: &DnlsModel,
    window: f64,
    dtau: f64,
) -> Result<f64> {
    let site = (0..a0.len())
        .max_by(|&i, &j| a0[i].norm().total_cmp(&a0[j].norm()))
        .ok_or_else(|| LabError::domain("empty envelope"))?;
    if a0[site].norm() == 0.0 {
        return Ok(0.0);
    }
    let steps = (window / dtau).round().max(1.0) as usize;
    let mut a = a0.to_vec();
    let mut phase = a[site].arg();
    let (mut st, mut sp, mut stt, mut stp) = (0.0, phase, 0.0, 0.0);
    for i in 1..=steps {
        a = rk4_envelope(&a, model, dtau);
        let raw = a[site].arg();
        let mut jump = raw - phase.rem_euclid(2.0 * std::f64::consts::PI);
        jump -= (jump / (2.0 * std::f64::consts::PI)).round() * 2.0 * std::f64::consts::PI;
        phase += jump;
        let tau = i as f64 * dtau;
        st += tau;
        sp += phase;
        stt += tau * tau;
        stp += tau * phase;
    }
    let count = (steps + 1) as f64;
    Ok((count * stp - st * sp) / (count * stt - st * st))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreatherReturn {
    /// Fitted envelope frequency on the slow clock.
    pub omega_fit: f64,
    pub period: f64,
    /// Step actually used: the period divided into a whole number of steps.
    pub dt: f64,
    /// `|xi(kT) - xi(0)| + |xi'(kT) - xi'(0)|`, `k = 1..=n_periods`.
    pub errors: Vec<f64>,
}

impl BreatherReturn {
    pub fn to_csv(&self, comment: Option<&str>) -> Result<String> {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["k", "t", "return_error"])?;
        for (i, e) in self.errors.iter().enumerate() {
            let k = i + 1;
            w.write_record([
                k.to_string(),
                (k as f64 * self.period).to_string(),
                e.to_string(),
            ])?;
        }
        out.push_str(&crate::lattice::into_string(w)?);
        Ok(out)
    }
}

/// Integrates the chain from the breather ansatz and measures how far it is
/// from its initial state after each of `n_periods` periods. The periods must
/// fit in `tau0 / rho`.
pub fn breather_return_error(
    profile: &SolitonProfile,
    epsilon: f64,
    rho: f64,
    n_periods: usize,
    dt: f64,
    tau0: f64,
) -> Result<BreatherReturn> {
    crate::lattice::ModelParams::new(epsilon, rho, profile.n())?;
    if !(dt > 0.0 && dt <= crate::integrators::MAX_DT) {
        return Err(LabError::domain(format!("dt = {dt} must lie in (0, 0.1]")));
    }
    let model = standard_model(profile, epsilon, rho)?;
    let omega_fit = fit_envelope_frequency(&profile.envelope(), &model, 1.0, 1e-3)?;
    let period = 2.0 * std::f64::consts::PI / (1.0 + epsilon * omega_fit);
    let allowed = tau0 / rho;
    let requested = n_periods as f64 * period;
    if requested > allowed {
        return Err(LabError::HorizonExceeded { requested, allowed });
    }
    let per_period = (period / dt).round().max(1.0) as usize;
    let dt_eff = period / per_period as f64;

    let start = build_breather_initial(profile, epsilon, rho)?;
    let dkg = Dkg::new(epsilon, rho);
    let mut state = start.clone();
    let mut stepper = VerletStepper::new(dkg, &state);
    let mut errors = Vec::with_capacity(n_periods);
    let mut dx = vec![0.0; start.x.len()];
    let mut dy = vec![0.0; start.x.len()];
    for _ in 0..n_periods {
        for _ in 0..per_period {
            stepper.step(&mut state, dt_eff);
        }
        let size = state.max_abs();
        if !size.is_finite() || size > crate::integrators::BLOW_UP_THRESHOLD {
            return Err(LabError::BlowUp {
                last_good_time: state.t - period,
            });
        }
        for k in 0..dx.len() {
            dx[k] = state.x[k] - start.x[k];
            dy[k] = state.y[k] - start.y[k];
        }
        errors.push(l2_norm(&dx)? + l2_norm(&dy)?);
    }
    Ok(BreatherReturn {
        omega_fit,
        period,
        dt: dt_eff,
        errors,
    })
}
