//! Two-harmonic modulation ansatz for the scaled dKG chain, its residual, the
//! error energy, and the harness that co-integrates chain and envelope to
//! measure how far they drift apart.
//!
//! The ansatz is
//!
//! ```text
//! X_j(t) = a_j e^{it} + c.c. + rho/8 (a_j^3 e^{3it} + c.c.),   a = a(eps t),
//! ```
//!
//! with `a` solving either the standard envelope equation (`rho ~ eps`) or the
//! generalized one (`rho ~ eps^2`).

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dnls::{second_derivative, DnlsModel};
use crate::error::{LabError, Result};
use crate::integrators::{rk4_envelope, VerletStepper, BLOW_UP_THRESHOLD};
use crate::lattice::{l2_norm, wrap, Dkg, LatticeState};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Edge amplitude above which the periodic chain is no longer a faithful
/// stand-in for the infinite one.
pub const BOUNDARY_TOLERANCE: f64 = 1e-12;

/// `X` and its exact time derivative at fast time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnsatzSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub xdot: Vec<f64>,
}

/// `2 Re z`.
#[inline]
fn twice_re(z: Complex64) -> f64 {
    2.0 * z.re
}

/// Evaluates the ansatz from the envelope `a` at `tau = eps t` and its slow
/// derivative `adot`.
pub fn leading_order(
    a: &[Complex64],
    adot: &[Complex64],
    rho: f64,
    epsilon: f64,
    t: f64,
) -> AnsatzSample {
    let e1 = Complex64::from_polar(1.0, t);
    let e3 = Complex64::from_polar(1.0, 3.0 * t);
    let mut x = Vec::with_capacity(a.len());
    let mut xdot = Vec::with_capacity(a.len());
    for (&z, &dz) in a.iter().zip(adot) {
        let z2 = z * z;
        let z3 = z2 * z;
        x.push(twice_re(z * e1) + rho / 8.0 * twice_re(z3 * e3));
        xdot.push(
            twice_re((I * z + dz * epsilon) * e1)
                + rho / 8.0 * twice_re((I * 3.0 * z3 + z2 * dz * (3.0 * epsilon)) * e3),
        );
    }
    AnsatzSample { t, x, xdot }
}

/// Exact `X''` from `a`, `a'` and `a''` (slow-time derivatives).
fn ansatz_second_derivative(
    a: &[Complex64],
    adot: &[Complex64],
    addot: &[Complex64],
    rho: f64,
    epsilon: f64,
    t: f64,
) -> Vec<f64> {
    let e1 = Complex64::from_polar(1.0, t);
    let e3 = Complex64::from_polar(1.0, 3.0 * t);
    let eps2 = epsilon * epsilon;
    a.iter()
        .zip(adot)
        .zip(addot)
        .map(|((&z, &dz), &ddz)| {
            let first = ddz * eps2 + I * dz * (2.0 * epsilon) - z;
            let z2 = z * z;
            let cube_d = z2 * dz * 3.0;
            let cube_dd = z * dz * dz * 6.0 + z2 * ddz * 3.0;
            let third = cube_dd * eps2 + I * cube_d * (6.0 * epsilon) - z2 * z * 9.0;
            twice_re(first * e1) + rho / 8.0 * twice_re(third * e3)
        })
        .collect()
}

fn check_envelope_model(model: &DnlsModel, epsilon: f64, rho: f64) -> Result<()> {
    let close = |u: f64, v: f64| (u - v).abs() <= 1e-12 * v.abs().max(1e-300);
    match *model {
        DnlsModel::Standard { nu } if close(nu, rho / epsilon) => Ok(()),
        DnlsModel::Generalized { delta, epsilon: e }
            if close(e, epsilon) && close(delta, rho / (epsilon * epsilon)) =>
        {
            Ok(())
        }
        DnlsModel::NormalForm { .. } => Err(LabError::domain(
            "the modulation ansatz is driven by the standard or generalized envelope equation",
        )),
        _ => Err(LabError::domain(format!(
            "envelope model {model:?} does not match eps = {epsilon}, rho = {rho}"
        ))),
    }
}

/// dKG defect `X'' + X + rho X^3 - eps (X_{j+1} + X_{j-1})` of the ansatz,
/// with `a'` and `a''` taken exactly from `model`.
pub fn residual_direct(
    a: &[Complex64],
    model: &DnlsModel,
    epsilon: f64,
    rho: f64,
    t: f64,
) -> Result<Vec<f64>> {
    check_envelope_model(model, epsilon, rho)?;
    let adot = model.rhs(a);
    let addot = second_derivative(a, model);
    let sample = leading_order(a, &adot, rho, epsilon, t);
    let xdd = ansatz_second_derivative(a, &adot, &addot, rho, epsilon, t);
    let x = &sample.x;
    let m = x.len();
    Ok((0..m)
        .map(|k| {
            xdd[k] + x[k] + rho * x[k] * x[k] * x[k]
                - epsilon * (x[wrap(k, 1, m)] + x[wrap(k, -1, m)])
        })
        .collect())
}

/// The residual written out as the sum of its resonant and non-resonant
/// groups, after the envelope equation has cancelled the `O(eps)` resonant
/// terms. Algebraically identical to [`residual_direct`].
pub fn residual_expanded(
    a: &[Complex64],
    model: &DnlsModel,
    epsilon: f64,
    rho: f64,
    t: f64,
) -> Result<Vec<f64>> {
    check_envelope_model(model, epsilon, rho)?;
    let adot = model.rhs(a);
    let addot = second_derivative(a, model);
    let e1 = Complex64::from_polar(1.0, t);
    let e3 = Complex64::from_polar(1.0, 3.0 * t);
    let eps2 = epsilon * epsilon;
    let m = a.len();
    let generalized = matches!(model, DnlsModel::Generalized { .. });
    Ok((0..m)
        .map(|k| {
            let z = a[k];
            let dz = adot[k];
            let ddz = addot[k];
            let z2 = z * z;
            let z3 = z2 * z;
            let f = twice_re(z * e1);
            let g = twice_re(z3 * e3);

            let resonant = if generalized {
                let spread = a[wrap(k, 2, m)] + z * 2.0 + a[wrap(k, -2, m)];
                0.25 * eps2 * twice_re((ddz * 4.0 + spread) * e1)
            } else {
                eps2 * twice_re(ddz * e1)
            };
            let right = a[wrap(k, 1, m)];
            let left = a[wrap(k, -1, m)];
            let coupling =
                -epsilon * rho / 8.0 * twice_re((right * right * right + left * left * left) * e3);
            let quintic = 3.0 / 8.0 * rho * rho * f * f * g;
            let slow_cubic = 9.0 / 4.0 * epsilon * rho * twice_re(I * z2 * dz * e3);
            let septic = 3.0 / 64.0 * rho.powi(3) * f * g * g;
            let cube_dd = z * dz * dz * 6.0 + z2 * ddz * 3.0;
            let cubic_accel = eps2 * rho / 8.0 * twice_re(cube_dd * e3);
            let nonic = rho.powi(4) / 512.0 * g * g * g;

            resonant + coupling + quintic + slow_cubic + septic + cubic_accel + nonic
        })
        .collect())
}

/// Error energy `E` and `Q = sqrt(E)` of the deviation `y = xi - X`.
///
/// Requires `eps < 1/4`, where `||y'||^2 + ||y||^2 <= 4 E`.
pub fn error_energy(
    y: &[f64],
    ydot: &[f64],
    x: &[f64],
    epsilon: f64,
    rho: f64,
) -> Result<(f64, f64)> {
    if !(epsilon < 0.25) {
        return Err(LabError::domain(format!(
            "error energy is coercive only for eps < 1/4 (got {epsilon})"
        )));
    }
    let m = y.len();
    let mut sum = 0.0;
    for k in 0..m {
        let yk = y[k];
        sum += ydot[k] * ydot[k] + yk * yk + 3.0 * rho * x[k] * x[k] * yk * yk
            - 2.0 * epsilon * yk * y[wrap(k, 1, m)];
    }
    let e = 0.5 * sum;
    Ok((e, e.max(0.0).sqrt()))
}

/// `dE/dt` along the error equation driven by `res`.
pub fn error_energy_rate(
    y: &[f64],
    ydot: &[f64],
    x: &[f64],
    xdot: &[f64],
    res: &[f64],
    rho: f64,
) -> f64 {
    (0..y.len())
        .map(|k| {
            let (yk, vk, xk) = (y[k], ydot[k], x[k]);
            -vk * res[k] + 3.0 * rho * xk * xdot[k] * yk * yk
                - 3.0 * rho * xk * yk * yk * vk
                - rho * yk * yk * yk * vk
        })
        .sum()
}

/// Which envelope equation drives the ansatz, and hence the predicted error
/// order `rho^{-1} eps^p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `eps^2 << rho <= eps`, `p = 2`.
    Standard,
    /// `eps^3 << rho <= eps^2`, `p = 3`.
    Generalized,
}

impl Regime {
    pub fn order(&self) -> i32 {
        match self {
            Regime::Standard => 2,
            Regime::Generalized => 3,
        }
    }

    pub fn model(&self, epsilon: f64, rho: f64) -> DnlsModel {
        match self {
            Regime::Standard => DnlsModel::Standard { nu: rho / epsilon },
            Regime::Generalized => DnlsModel::Generalized {
                delta: rho / (epsilon * epsilon),
                epsilon,
            },
        }
    }
}

/// Time span of a justification run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Horizon {
    /// `[0, tau0 / rho]`.
    T0 { tau0: f64 },
    /// `[0, A |ln rho| / rho]`, bound inflated by `rho^{-alpha}`.
    T0Star { a: f64, alpha: f64 },
}

impl Horizon {
    pub fn length(&self, rho: f64) -> f64 {
        match *self {
            Horizon::T0 { tau0 } => tau0 / rho,
            Horizon::T0Star { a, .. } => a * rho.ln().abs() / rho,
        }
    }

    /// `rho^{-1} eps^p`, or `rho^{-1-alpha} eps^p` on the extended span.
    pub fn bound_scale(&self, regime: Regime, epsilon: f64, rho: f64) -> f64 {
        let base = epsilon.powi(regime.order()) / rho;
        match *self {
            Horizon::T0 { .. } => base,
            Horizon::T0Star { alpha, .. } => base * rho.powf(-alpha),
        }
    }
}

/// Checks `(eps, rho)` against the asymptotic range of `regime` on `horizon`.
/// Strict inequalities are enforced; being within a factor 10 of the lower
/// edge only warns.
pub fn check_regime(regime: Regime, horizon: Horizon, epsilon: f64, rho: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 0.25) {
        return Err(LabError::Regime(format!(
            "eps = {epsilon} must lie in (0, 1/4) for the error energy to be coercive"
        )));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(LabError::Regime(format!("rho = {rho} must lie in (0, 1]")));
    }
    let (upper, upper_name) = match regime {
        Regime::Standard => (epsilon, "eps"),
        Regime::Generalized => (epsilon * epsilon, "eps^2"),
    };
    let p = regime.order() as f64;
    let (lower, lower_name) = match horizon {
        Horizon::T0 { tau0 } => {
            if !(tau0 > 0.0) {
                return Err(LabError::Regime(format!("tau0 = {tau0} must be positive")));
            }
            (epsilon.powf(p), format!("eps^{p}"))
        }
        Horizon::T0Star { a, alpha } => {
            let alpha_max = if regime == Regime::Standard { 1.0 } else { 0.5 };
            if !(alpha > 0.0 && alpha < alpha_max) {
                return Err(LabError::Regime(format!(
                    "alpha = {alpha} must lie in (0, {alpha_max}) for the {regime:?} extended horizon"
                )));
            }
            if !(a > 0.0) {
                return Err(LabError::Regime(format!("A = {a} must be positive")));
            }
            (
                epsilon.powf(p / (1.0 + alpha)),
                format!("eps^({p}/(1+alpha))"),
            )
        }
    };
    if rho > upper * (1.0 + 1e-12) {
        return Err(LabError::Regime(format!(
            "{regime:?} regime requires rho <= {upper_name} = {upper}, got rho = {rho}"
        )));
    }
    if rho <= lower {
        return Err(LabError::Regime(format!(
            "{regime:?} regime requires {lower_name} << rho; {lower_name} = {lower}, rho = {rho}"
        )));
    }
    if rho < 10.0 * lower {
        warn!("rho = {rho} is within a factor 10 of the lower edge {lower_name} = {lower}");
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JustificationConfig {
    pub epsilon: f64,
    pub rho: f64,
    pub regime: Regime,
    pub horizon: Horizon,
    /// dKG step in fast time; the envelope advances by `eps * dt` per step.
    pub dt: f64,
    /// Record every this many steps.
    pub sample_stride: usize,
    /// Envelope at `tau = 0`; its length `2N+1` fixes the chain.
    pub initial: Vec<Complex64>,
    /// Size of the initial deviation in units of `rho^{-1} eps^p`. Zero starts
    /// the chain exactly on the ansatz.
    pub perturbation: f64,
}

impl JustificationConfig {
    pub fn new(
        epsilon: f64,
        rho: f64,
        regime: Regime,
        horizon: Horizon,
        initial: Vec<Complex64>,
    ) -> Self {
        JustificationConfig {
            epsilon,
            rho,
            regime,
            horizon,
            dt: 1e-3,
            sample_stride: 10,
            initial,
            perturbation: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JustificationReport {
    pub epsilon: f64,
    pub rho: f64,
    pub regime: Regime,
    pub horizon: Horizon,
    pub t_end: f64,
    pub times: Vec<f64>,
    /// `Q = sqrt(E)` of the deviation.
    pub q: Vec<f64>,
    /// `||xi - X|| + ||xi' - X'||`.
    pub error_norm: Vec<f64>,
    /// `||Res||` of the ansatz at the sample times.
    pub residual_norm: Vec<f64>,
    pub bound_scale: f64,
    pub sup_error: f64,
    pub sup_q: f64,
    /// `sup_error / bound_scale`: the measured constant in front of the bound.
    pub ratio: f64,
}

impl JustificationReport {
    /// CSV with columns `t, error_norm, Q, bound_scale`.
    pub fn to_csv(&self, comment: Option<&str>) -> Result<String> {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "error_norm", "Q", "bound_scale"])?;
        for i in 0..self.times.len() {
            w.write_record([
                self.times[i].to_string(),
                self.error_norm[i].to_string(),
                self.q[i].to_string(),
                self.bound_scale.to_string(),
            ])?;
        }
        out.push_str(&crate::lattice::into_string(w)?);
        Ok(out)
    }

    pub fn summary(&self) -> JustificationSummary {
        JustificationSummary {
            epsilon: self.epsilon,
            rho: self.rho,
            regime: self.regime,
            horizon: self.horizon,
            t_end: self.t_end,
            sup_error: self.sup_error,
            sup_q: self.sup_q,
            bound_scale: self.bound_scale,
            ratio: self.ratio,
            slope_contribution: [self.epsilon.ln(), self.sup_error.ln()],
        }
    }
}

/// Scalar digest of one run; `slope_contribution` is its `(ln eps, ln sup_error)`
/// point on the log-log sweep plot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JustificationSummary {
    pub epsilon: f64,
    pub rho: f64,
    pub regime: Regime,
    pub horizon: Horizon,
    pub t_end: f64,
    pub sup_error: f64,
    pub sup_q: f64,
    pub bound_scale: f64,
    pub ratio: f64,
    pub slope_contribution: [f64; 2],
}

/// Fixed unit-norm profile used for the optional initial deviation.
fn perturbation_profile(m: usize) -> Vec<f64> {
    let n = (m as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..m)
        .map(|k| {
            let j = k as f64 - n;
            (-j * j / 8.0).exp() * (0.5 + 0.5 * (0.7 * j).cos())
        })
        .collect();
    let norm = l2_norm(&raw).unwrap_or(1.0);
    raw.into_iter().map(|v| v / norm).collect()
}

/// Co-integrates the dKG chain (Verlet, step `dt`) and the envelope (RK4,
/// step `eps dt`) and samples the deviation between the chain and the ansatz.
pub fn run_justification(config: &JustificationConfig) -> Result<JustificationReport> {
    let JustificationConfig {
        epsilon,
        rho,
        regime,
        horizon,
        dt,
        sample_stride,
        ..
    } = *config;
    check_regime(regime, horizon, epsilon, rho)?;
    if !(dt > 0.0 && dt <= crate::integrators::MAX_DT) {
        return Err(LabError::domain(format!("dt = {dt} must lie in (0, 0.1]")));
    }
    if sample_stride == 0 {
        return Err(LabError::domain("sample stride must be positive"));
    }
    let model = regime.model(epsilon, rho);
    model.validate_against(epsilon)?;
    let mut a = crate::dnls::EnvelopeState::new(config.initial.clone(), 0.0)?.a;
    let m = a.len();

    let t_end = horizon.length(rho);
    let steps = (t_end / dt).ceil() as usize;
    let bound_scale = horizon.bound_scale(regime, epsilon, rho);
    let dtau = epsilon * dt;

    let adot = model.rhs(&a);
    let x0 = leading_order(&a, &adot, rho, epsilon, 0.0);
    let mut xi = LatticeState::new(x0.x, x0.xdot, 0.0)?;
    if config.perturbation != 0.0 {
        let size = config.perturbation * epsilon.powi(regime.order()) / rho;
        for (x, u) in xi.x.iter_mut().zip(perturbation_profile(m)) {
            *x += size * u;
        }
    }
    let dkg = Dkg::new(epsilon, rho);
    let mut stepper = VerletStepper::new(dkg, &xi);

    let capacity = steps / sample_stride + 2;
    let mut report = JustificationReport {
        epsilon,
        rho,
        regime,
        horizon,
        t_end: steps as f64 * dt,
        times: Vec::with_capacity(capacity),
        q: Vec::with_capacity(capacity),
        error_norm: Vec::with_capacity(capacity),
        residual_norm: Vec::with_capacity(capacity),
        bound_scale,
        sup_error: 0.0,
        sup_q: 0.0,
        ratio: 0.0,
    };

    let mut y = vec![0.0; m];
    let mut ydot = vec![0.0; m];
    let mut sample =
        |xi: &LatticeState, a: &[Complex64], report: &mut JustificationReport| -> Result<()> {
            let adot = model.rhs(a);
            let ansatz = leading_order(a, &adot, rho, epsilon, xi.t);
            for k in 0..m {
                y[k] = xi.x[k] - ansatz.x[k];
                ydot[k] = xi.y[k] - ansatz.xdot[k];
            }
            let err = l2_norm(&y)? + l2_norm(&ydot)?;
            let (_, q) = error_energy(&y, &ydot, &ansatz.x, epsilon, rho)?;
            let res = residual_direct(a, &model, epsilon, rho, xi.t)?;
            report.times.push(xi.t);
            report.error_norm.push(err);
            report.q.push(q);
            report.residual_norm.push(l2_norm(&res)?);
            report.sup_error = report.sup_error.max(err);
            report.sup_q = report.sup_q.max(q);
            Ok(())
        };

    sample(&xi, &a, &mut report)?;
    for i in 1..=steps {
        let last_good = xi.t;
        stepper.step(&mut xi, dt);
        a = rk4_envelope(&a, &model, dtau);
        let size = xi.max_abs();
        if !size.is_finite() || size > BLOW_UP_THRESHOLD {
            return Err(LabError::BlowUp {
                last_good_time: last_good,
            });
        }
        // keep the clock free of accumulated rounding
        xi.t = i as f64 * dt;
        if i % sample_stride == 0 || i == steps {
            sample(&xi, &a, &mut report)?;
        }
    }

    let n = (m - 1) / 2;
    let edge = a[0].norm().max(a[2 * n].norm());
    if edge > BOUNDARY_TOLERANCE {
        warn!(
            "envelope amplitude {edge:e} at the chain edge exceeds {BOUNDARY_TOLERANCE:e}; \
             the periodic chain may not represent the infinite lattice"
        );
    }
    report.ratio = report.sup_error / bound_scale;
    Ok(report)
}

/// Runs independent sweep points on the rayon pool. Output order follows the
/// input order and each point is computed serially, so results do not depend
/// on the number of workers.
pub fn run_sweep(configs: &[JustificationConfig]) -> Result<Vec<JustificationReport>> {
    configs.par_iter().map(run_justification).collect()
}

/// Least-squares fit of `ln value = slope ln eps + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_scaling_exponent(pairs: &[(f64, f64)]) -> Result<ScalingFit> {
    if pairs.len() < 3 {
        return Err(LabError::domain(format!(
            "need at least 3 points for a scaling fit, got {}",
            pairs.len()
        )));
    }
    if pairs
        .iter()
        .any(|&(e, v)| !(e > 0.0 && v > 0.0 && e.is_finite() && v.is_finite()))
    {
        return Err(LabError::domain(
            "scaling fit requires positive finite data",
        ));
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LabError::domain(
            "scaling fit needs at least two distinct eps",
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(ScalingFit {
        slope,
        intercept,
        r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_envelope(seed: u64, m: usize) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn bump(n: usize, amp: f64) -> Vec<Complex64> {
        (0..2 * n + 1)
            .map(|k| {
                let j = k as f64 - n as f64;
                c(amp * (-(j * j) / 2.0).exp(), 0.0)
            })
            .collect()
    }

    #[test]
    fn ansatz_limits() {
        let z = vec![c(0.0, 0.0); 5];
        let s = leading_order(&z, &z, 0.1, 0.1, 1.3);
        assert!(s.x.iter().chain(&s.xdot).all(|v| *v == 0.0));

        let mut a = vec![c(0.0, 0.0); 5];
        a[2] = c(0.5, 0.0);
        let s = leading_order(&a, &z, 0.0, 0.1, 0.0);
        assert_eq!(s.x[2], 1.0);
        assert_eq!(s.xdot[2], 0.0);
    }

    #[test]
    fn ansatz_derivative_matches_finite_difference() {
        let (eps, rho) = (0.1, 0.1);
        let model = DnlsModel::Standard { nu: 1.0 };
        let a0 = random_envelope(5, 9);
        let t = 0.7;
        let h = 1e-5;
        let at = |s: f64| {
            // envelope at tau = eps (t + s), advanced from tau = eps t
            let a = rk4_envelope(&a0, &model, eps * s);
            let adot = model.rhs(&a);
            leading_order(&a, &adot, rho, eps, t + s)
        };
        let center = at(0.0);
        let plus = at(h);
        let minus = at(-h);
        for k in 0..9 {
            let fd = (plus.x[k] - minus.x[k]) / (2.0 * h);
            assert!(
                (fd - center.xdot[k]).abs() < 1e-8,
                "{fd} vs {}",
                center.xdot[k]
            );
        }
    }

    #[test]
    fn residual_routes_agree_on_random_envelopes() {
        let eps = 0.1;
        for seed in 0..10 {
            let a = random_envelope(seed, 15);
            let scale = l2_norm(&a).unwrap().powi(3).max(1.0);
            for (model, rho) in [
                (DnlsModel::Standard { nu: 1.0 }, eps),
                (
                    DnlsModel::Generalized {
                        delta: 1.0,
                        epsilon: eps,
                    },
                    eps * eps,
                ),
            ] {
                let t = 0.37 * seed as f64;
                let d = residual_direct(&a, &model, eps, rho, t).unwrap();
                let e = residual_expanded(&a, &model, eps, rho, t).unwrap();
                let diff = d
                    .iter()
                    .zip(&e)
                    .map(|(u, v)| (u - v).abs())
                    .fold(0.0, f64::max);
                assert!(diff <= 1e-11 * scale, "seed {seed}: {diff}");
            }
        }
    }

    #[test]
    fn residual_rejects_inconsistent_model() {
        let a = random_envelope(1, 7);
        assert!(residual_direct(&a, &DnlsModel::Standard { nu: 0.5 }, 0.1, 0.1, 0.0).is_err());
        let nf = DnlsModel::NormalForm {
            omega: 1.0,
            b1: -0.1,
            b2: None,
        };
        assert!(residual_expanded(&a, &nf, 0.1, 0.1, 0.0).is_err());
        let z = vec![c(0.0, 0.0); 7];
        let r = residual_expanded(&z, &DnlsModel::Standard { nu: 1.0 }, 0.1, 0.1, 0.3).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn residual_is_eps_squared_without_the_third_harmonic_correction() {
        // The direct defect of the full ansatz at a random envelope is O(eps^2)
        // when rho = eps: halving eps divides it by about four.
        let a = bump(6, 0.6);
        let size = |eps: f64| {
            let model = DnlsModel::Standard { nu: 1.0 };
            (0..40)
                .map(|i| {
                    let r = residual_direct(&a, &model, eps, eps, 0.17 * i as f64).unwrap();
                    l2_norm(&r).unwrap()
                })
                .fold(0.0, f64::max)
        };
        let ratio = size(0.02) / size(0.01);
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn error_energy_cases() {
        let z = [0.0; 5];
        assert_eq!(error_energy(&z, &z, &z, 0.1, 0.1).unwrap(), (0.0, 0.0));
        let y = [0.3, -0.1, 0.2, 0.5, 0.0];
        let v = [0.1, 0.1, -0.4, 0.0, 0.2];
        let (e, q) = error_energy(&y, &v, &[1.0; 5], 0.0, 0.0).unwrap();
        let expected =
            0.5 * (y.iter().map(|a| a * a).sum::<f64>() + v.iter().map(|a| a * a).sum::<f64>());
        assert!((e - expected).abs() < 1e-15);
        assert!((q * q - e).abs() < 1e-15);
        assert!(error_energy(&y, &v, &z, 0.25, 0.1).is_err());
    }

    #[test]
    fn error_energy_is_coercive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let y: Vec<f64> = (0..11).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..11).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..11).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (e, _) = error_energy(&y, &v, &x, 0.2, rng.gen_range(0.0..1.0)).unwrap();
            let lhs: f64 = y.iter().chain(&v).map(|a| a * a).sum();
            assert!(lhs <= 4.0 * e + 1e-14);
        }
    }

    #[test]
    fn energy_rate_trivial_cases() {
        let z = [0.0; 5];
        assert_eq!(error_energy_rate(&z, &z, &z, &z, &z, 0.3), 0.0);
        let y = [0.3, -0.1, 0.2, 0.5, 0.0];
        let x = [1.0, 0.5, -0.2, 0.3, 0.0];
        assert_eq!(error_energy_rate(&y, &y, &x, &x, &z, 0.0), 0.0);
    }

    #[test]
    fn energy_rate_matches_finite_difference_along_run() {
        let (eps, rho) = (0.1, 0.1);
        let model = DnlsModel::Standard { nu: 1.0 };
        let a0 = bump(8, 0.7);
        let dt = 1e-3;
        let adot = model.rhs(&a0);
        let x0 = leading_order(&a0, &adot, rho, eps, 0.0);
        // start off the ansatz so the deviation is not tiny
        let x_init: Vec<f64> =
            x0.x.iter()
                .enumerate()
                .map(|(k, v)| v + 0.05 * (k as f64).cos())
                .collect();
        let mut xi = LatticeState::new(x_init, x0.xdot, 0.0).unwrap();
        let mut stepper = VerletStepper::new(Dkg::new(eps, rho), &xi);
        let mut a = a0;
        let mut energies = Vec::new();
        let mut rates = Vec::new();
        for i in 0..=2000 {
            if i > 0 {
                stepper.step(&mut xi, dt);
                a = rk4_envelope(&a, &model, eps * dt);
            }
            let adot = model.rhs(&a);
            let s = leading_order(&a, &adot, rho, eps, xi.t);
            let y: Vec<f64> = xi.x.iter().zip(&s.x).map(|(u, v)| u - v).collect();
            let v: Vec<f64> = xi.y.iter().zip(&s.xdot).map(|(u, v)| u - v).collect();
            let res = residual_direct(&a, &model, eps, rho, xi.t).unwrap();
            energies.push(error_energy(&y, &v, &s.x, eps, rho).unwrap().0);
            rates.push(error_energy_rate(&y, &v, &s.x, &s.xdot, &res, rho));
        }
        let scale = rates.iter().map(|r| r.abs()).fold(0.0, f64::max);
        for i in 1..energies.len() - 1 {
            let fd = (energies[i + 1] - energies[i - 1]) / (2.0 * dt);
            assert!(
                (fd - rates[i]).abs() < 1e-4 * scale.max(1e-3),
                "step {i}: {fd} vs {}",
                rates[i]
            );
        }
    }

    #[test]
    fn regime_checks() {
        let h = Horizon::T0 { tau0: 1.0 };
        assert!(check_regime(Regime::Standard, h, 0.05, 0.05).is_ok());
        assert!(check_regime(Regime::Standard, h, 0.05, 0.05f64.powi(3)).is_err());
        assert!(check_regime(Regime::Standard, h, 0.05, 0.06).is_err());
        assert!(check_regime(Regime::Generalized, h, 0.05, 0.0025).is_ok());
        assert!(check_regime(Regime::Generalized, h, 0.05, 0.05).is_err());
        assert!(check_regime(Regime::Standard, h, 0.3, 0.3).is_err());
        let ext = Horizon::T0Star { a: 0.5, alpha: 0.5 };
        assert!(check_regime(Regime::Standard, ext, 0.05, 0.05).is_ok());
        assert!(check_regime(Regime::Generalized, ext, 0.05, 0.0025).is_err());
        let ext = Horizon::T0Star {
            a: 0.5,
            alpha: 0.25,
        };
        assert!(check_regime(Regime::Generalized, ext, 0.05, 0.0025).is_ok());
    }

    #[test]
    fn horizon_lengths_and_scales() {
        assert_eq!(Horizon::T0 { tau0: 2.0 }.length(0.5), 4.0);
        let ext = Horizon::T0Star { a: 0.5, alpha: 0.5 };
        assert!((ext.length(0.05) - 0.5 * 0.05f64.ln().abs() / 0.05).abs() < 1e-12);
        let s = Horizon::T0 { tau0: 1.0 }.bound_scale(Regime::Generalized, 0.1, 0.01);
        assert!((s - 0.1).abs() < 1e-14);
        let s = ext.bound_scale(Regime::Standard, 0.04, 0.04);
        assert!((s - 0.2).abs() < 1e-14);
    }

    #[test]
    fn zero_envelope_has_zero_error() {
        let cfg = JustificationConfig::new(
            0.1,
            0.1,
            Regime::Standard,
            Horizon::T0 { tau0: 0.5 },
            vec![c(0.0, 0.0); 9],
        );
        let r = run_justification(&cfg).unwrap();
        assert!(r.error_norm.iter().all(|e| *e == 0.0));
        assert!(r.q.iter().all(|e| *e == 0.0));
        assert_eq!(r.sup_error, 0.0);
        assert!((r.t_end - 5.0).abs() < 1e-12);
    }

    #[test]
    fn report_consistency() {
        let mut cfg = JustificationConfig::new(
            0.1,
            0.1,
            Regime::Standard,
            Horizon::T0 { tau0: 0.5 },
            bump(10, 0.8),
        );
        cfg.perturbation = 1.0;
        let r = run_justification(&cfg).unwrap();
        assert_eq!(r.times.len(), r.q.len());
        assert_eq!(r.times.len(), r.error_norm.len());
        assert!(r.times.windows(2).all(|w| w[1] > w[0]));
        // initial deviation has the requested size
        assert!((r.error_norm[0] - 0.1).abs() < 1e-12);
        for (e, q) in r.error_norm.iter().zip(&r.q) {
            assert!(*q >= 0.0);
            assert!(*e <= 2.0 * 2.0f64.sqrt() * q + 1e-14);
        }
        let csv = r.to_csv(Some("config_hash=x")).unwrap();
        assert!(csv.starts_with("# config_hash=x\nt,error_norm,Q,bound_scale\n"));
        assert_eq!(csv.lines().count(), r.times.len() + 2);
    }

    #[test]
    fn regime_violation_is_refused() {
        let cfg = JustificationConfig::new(
            0.1,
            0.001,
            Regime::Standard,
            Horizon::T0 { tau0: 1.0 },
            bump(5, 0.5),
        );
        assert!(matches!(run_justification(&cfg), Err(LabError::Regime(_))));
    }

    #[test]
    fn scaling_fits() {
        let eps = [0.1, 0.05, 0.025, 0.0125];
        let quad: Vec<(f64, f64)> = eps.iter().map(|&e| (e, e * e)).collect();
        let f = fit_scaling_exponent(&quad).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let lin: Vec<(f64, f64)> = eps.iter().map(|&e| (e, 7.5 * e)).collect();
        assert!((fit_scaling_exponent(&lin).unwrap().slope - 1.0).abs() < 1e-12);
        let wobbly: Vec<(f64, f64)> = (0..11)
            .map(|i| {
                let e = 0.1 * 10f64.powf(-(i as f64) / 10.0);
                (e, e * e * (1.0 + 0.1 * (1.0 / e).sin()))
            })
            .collect();
        assert!((fit_scaling_exponent(&wobbly).unwrap().slope - 2.0).abs() < 0.1);
        assert!(fit_scaling_exponent(&quad[..2]).is_err());
        assert!(fit_scaling_exponent(&[(0.1, 1.0), (0.2, 0.0), (0.3, 1.0)]).is_err());
        assert!(fit_scaling_exponent(&[(0.1, 1.0), (-0.2, 1.0), (0.3, 1.0)]).is_err());
    }
}
