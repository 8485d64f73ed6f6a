//! Time steppers and trajectory drivers.
//!
//! The dKG chain is advanced with kick-drift-kick Störmer–Verlet, the envelope
//! equations with classical RK4. Neither adapts its step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use num_complex::Complex64;

use crate::dnls::{DnlsModel, EnvelopeState};
use crate::error::{LabError, Result};
use crate::lattice::{Dkg, LatticeState};

/// Any entry above this magnitude is treated as a numerical failure.
pub const BLOW_UP_THRESHOLD: f64 = 1e6;

/// Largest admissible step: resolves the unit carrier frequency.
pub const MAX_DT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scheme {
    Verlet,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_end: f64,
    pub observer_stride: usize,
    pub scheme: Scheme,
}

impl IntegratorConfig {
    pub fn new(dt: f64, t_end: f64, observer_stride: usize, scheme: Scheme) -> Result<Self> {
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(LabError::domain(format!(
                "step dt = {dt} must lie in (0, {MAX_DT}]"
            )));
        }
        if !(t_end >= dt) || !t_end.is_finite() {
            return Err(LabError::domain(format!(
                "t_end = {t_end} must be at least dt = {dt}"
            )));
        }
        if observer_stride == 0 {
            return Err(LabError::domain("observer stride must be positive"));
        }
        Ok(IntegratorConfig {
            dt,
            t_end,
            observer_stride,
            scheme,
        })
    }

    /// Number of steps; `t_end` is rounded to the nearest multiple of `dt`.
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round().max(1.0) as usize
    }
}

/// Named per-snapshot values such as energies and norms.
pub type Diagnostics = BTreeMap<String, f64>;

/// Read-only hook called at every recorded snapshot.
pub type Observer<'a, S> = dyn FnMut(&S, &mut Diagnostics) + 'a;

#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub times: Vec<f64>,
    pub snapshots: Vec<S>,
    pub diagnostics: Vec<Diagnostics>,
}

impl<S> Trajectory<S> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Series of one named diagnostic (NaN where missing).
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.diagnostics
            .iter()
            .map(|d| d.get(name).copied().unwrap_or(f64::NAN))
            .collect()
    }
}

/// A one-step map together with the bookkeeping the drivers need.
pub trait Flow {
    type State: Clone;
    const SCHEME: Scheme;

    fn step(&self, state: &Self::State, dt: f64) -> Self::State;
    fn time(state: &Self::State) -> f64;
    fn max_abs(state: &Self::State) -> f64;
}

/// dKG chain flow in fast time.
#[derive(Debug, Clone, Copy)]
pub struct DkgFlow(pub Dkg);

/// Envelope flow in the model's own clock.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeFlow(pub DnlsModel);

impl Flow for DkgFlow {
    type State = LatticeState;
    const SCHEME: Scheme = Scheme::Verlet;

    fn step(&self, state: &LatticeState, dt: f64) -> LatticeState {
        step_dkg_verlet(state, &self.0, dt)
    }
    fn time(state: &LatticeState) -> f64 {
        state.t
    }
    fn max_abs(state: &LatticeState) -> f64 {
        state.max_abs()
    }
}

impl Flow for EnvelopeFlow {
    type State = EnvelopeState;
    const SCHEME: Scheme = Scheme::Rk4;

    fn step(&self, state: &EnvelopeState, dt: f64) -> EnvelopeState {
        step_envelope_rk4(state, &self.0, dt)
    }
    fn time(state: &EnvelopeState) -> f64 {
        state.tau
    }
    fn max_abs(state: &EnvelopeState) -> f64 {
        state.max_abs()
    }
}

/// One Störmer–Verlet step of `x'' = F(x)`.
pub fn step_dkg_verlet(state: &LatticeState, dkg: &Dkg, dt: f64) -> LatticeState {
    let mut next = state.clone();
    let mut force = dkg.force(&next.x);
    verlet_in_place(&mut next, dkg, dt, &mut force);
    next
}

/// In-place Verlet step. `force` must hold `F(state.x)` on entry and holds
/// `F` at the new positions on exit, so consecutive calls need one force
/// evaluation each.
pub fn verlet_in_place(state: &mut LatticeState, dkg: &Dkg, dt: f64, force: &mut [f64]) {
    let h = 0.5 * dt;
    for ((x, y), f) in state.x.iter_mut().zip(state.y.iter_mut()).zip(force.iter()) {
        *y += h * f;
        *x += dt * *y;
    }
    dkg.force_into(&state.x, force);
    for (y, f) in state.y.iter_mut().zip(force.iter()) {
        *y += h * f;
    }
    state.t += dt;
}

/// Stateful Verlet integrator reusing its force buffer between steps.
#[derive(Debug, Clone)]
pub struct VerletStepper {
    dkg: Dkg,
    force: Vec<f64>,
}

impl VerletStepper {
    pub fn new(dkg: Dkg, state: &LatticeState) -> Self {
        VerletStepper {
            dkg,
            force: dkg.force(&state.x),
        }
    }

    /// Advances `state`, which must be the state this stepper last saw.
    pub fn step(&mut self, state: &mut LatticeState, dt: f64) {
        verlet_in_place(state, &self.dkg, dt, &mut self.force);
    }
}

fn axpy(a: &[Complex64], h: f64, k: &[Complex64]) -> Vec<Complex64> {
    a.iter().zip(k).map(|(z, dz)| z + dz * h).collect()
}

/// One classical fourth-order Runge–Kutta step on raw envelope data.
pub fn rk4_envelope(a: &[Complex64], model: &DnlsModel, dt: f64) -> Vec<Complex64> {
    let k1 = model.rhs(a);
    let k2 = model.rhs(&axpy(a, 0.5 * dt, &k1));
    let k3 = model.rhs(&axpy(a, 0.5 * dt, &k2));
    let k4 = model.rhs(&axpy(a, dt, &k3));
    let w = dt / 6.0;
    (0..a.len())
        .map(|k| a[k] + (k1[k] + (k2[k] + k3[k]) * 2.0 + k4[k]) * w)
        .collect()
}

pub fn step_envelope_rk4(state: &EnvelopeState, model: &DnlsModel, dt: f64) -> EnvelopeState {
    EnvelopeState {
        tau: state.tau + dt,
        a: rk4_envelope(&state.a, model, dt),
    }
}

/// Advances `state0` to `config.t_end`, calling `sink` at the initial state and
/// every `observer_stride` steps (and always at the final step). Returns the
/// final state.
pub fn integrate_with<F, K>(
    flow: &F,
    state0: F::State,
    config: &IntegratorConfig,
    observers: &mut [&mut Observer<'_, F::State>],
    mut sink: K,
) -> Result<F::State>
where
    F: Flow,
    K: FnMut(f64, &F::State, &Diagnostics) -> Result<()>,
{
    if config.scheme != F::SCHEME {
        return Err(LabError::Config(format!(
            "scheme {:?} requested for a flow integrated with {:?}",
            config.scheme,
            F::SCHEME
        )));
    }
    let steps = config.steps();
    let mut state = state0;
    let mut record = |state: &F::State, sink: &mut K| -> Result<()> {
        let mut diag = Diagnostics::new();
        for obs in observers.iter_mut() {
            obs(state, &mut diag);
        }
        sink(F::time(state), state, &diag)
    };
    record(&state, &mut sink)?;
    for i in 1..=steps {
        let next = flow.step(&state, config.dt);
        let size = F::max_abs(&next);
        if !size.is_finite() || size > BLOW_UP_THRESHOLD {
            return Err(LabError::BlowUp {
                last_good_time: F::time(&state),
            });
        }
        state = next;
        if i % config.observer_stride == 0 || i == steps {
            record(&state, &mut sink)?;
        }
    }
    Ok(state)
}

/// Collects every recorded snapshot into memory.
pub fn integrate<F: Flow>(
    flow: &F,
    state0: F::State,
    config: &IntegratorConfig,
    observers: &mut [&mut Observer<'_, F::State>],
) -> Result<Trajectory<F::State>> {
    let mut traj = Trajectory {
        times: Vec::new(),
        snapshots: Vec::new(),
        diagnostics: Vec::new(),
    };
    integrate_with(flow, state0, config, observers, |t, s, d| {
        traj.times.push(t);
        traj.snapshots.push(s.clone());
        traj.diagnostics.push(d.clone());
        Ok(())
    })?;
    Ok(traj)
}

/// Serializes one snapshot for the optional side files.
pub trait SnapshotCsv {
    fn snapshot_csv(&self) -> Result<String>;
}

impl SnapshotCsv for LatticeState {
    fn snapshot_csv(&self) -> Result<String> {
        self.to_csv()
    }
}

impl SnapshotCsv for EnvelopeState {
    fn snapshot_csv(&self) -> Result<String> {
        self.to_csv()
    }
}

/// Streams `t, diagnostics...` rows as they are produced. The column set is
/// fixed by the first row. Full states optionally go to numbered side files.
pub struct CsvTrajectoryWriter<W: Write> {
    out: W,
    columns: Option<Vec<String>>,
    header_comment: Option<String>,
    state_dir: Option<PathBuf>,
    rows: usize,
}

impl<W: Write> CsvTrajectoryWriter<W> {
    pub fn new(out: W) -> Self {
        CsvTrajectoryWriter {
            out,
            columns: None,
            header_comment: None,
            state_dir: None,
            rows: 0,
        }
    }

    /// Line written as `# ...` before the header.
    pub fn with_comment(mut self, comment: impl Into<String>) -> Self {
        self.header_comment = Some(comment.into());
        self
    }

    pub fn with_state_dir(mut self, dir: PathBuf) -> Self {
        self.state_dir = Some(dir);
        self
    }

    pub fn write<S: SnapshotCsv>(&mut self, t: f64, state: &S, diag: &Diagnostics) -> Result<()> {
        if self.columns.is_none() {
            if let Some(c) = &self.header_comment {
                writeln!(self.out, "# {c}")?;
            }
            let cols: Vec<String> = diag.keys().cloned().collect();
            let mut header = String::from("t");
            for c in &cols {
                header.push(',');
                header.push_str(c);
            }
            writeln!(self.out, "{header}")?;
            self.columns = Some(cols);
        }
        let mut line = t.to_string();
        for c in self.columns.as_ref().unwrap() {
            line.push(',');
            match diag.get(c) {
                Some(v) => line.push_str(&v.to_string()),
                None => line.push_str("NaN"),
            }
        }
        writeln!(self.out, "{line}")?;
        if let Some(dir) = &self.state_dir {
            std::fs::write(
                dir.join(format!("state_{:06}.csv", self.rows)),
                state.snapshot_csv()?,
            )?;
        }
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnls::l2_conserved;
    use crate::lattice::energy_dkg;

    fn single_site(x: f64, y: f64) -> LatticeState {
        let mut s = LatticeState::zeros(1);
        s.x[1] = x;
        s.y[1] = y;
        s
    }

    fn run_dkg(mut s: LatticeState, dkg: Dkg, dt: f64, steps: usize) -> LatticeState {
        let mut st = VerletStepper::new(dkg, &s);
        for _ in 0..steps {
            st.step(&mut s, dt);
        }
        s
    }

    #[test]
    fn config_validation() {
        assert!(IntegratorConfig::new(0.0, 1.0, 1, Scheme::Verlet).is_err());
        assert!(IntegratorConfig::new(0.2, 1.0, 1, Scheme::Verlet).is_err());
        assert!(IntegratorConfig::new(1e-3, 1e-4, 1, Scheme::Verlet).is_err());
        assert!(IntegratorConfig::new(1e-3, 1.0, 0, Scheme::Verlet).is_err());
        assert_eq!(
            IntegratorConfig::new(1e-3, 1.0, 1, Scheme::Rk4)
                .unwrap()
                .steps(),
            1000
        );
    }

    #[test]
    fn zero_is_fixed() {
        let z = LatticeState::zeros(4);
        let next = step_dkg_verlet(&z, &Dkg::new(0.1, 1.0), 1e-2);
        assert_eq!(next.x, z.x);
        assert_eq!(next.y, z.y);
        let e = EnvelopeState::new(vec![Complex64::new(0.0, 0.0); 5], 0.0).unwrap();
        let next = step_envelope_rk4(&e, &DnlsModel::Standard { nu: 1.0 }, 1e-2);
        assert!(next.a.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn harmonic_oscillator_returns_after_one_period() {
        let steps = 6283;
        let dt = 2.0 * std::f64::consts::PI / steps as f64;
        let s = run_dkg(single_site(1.0, 0.0), Dkg::new(0.0, 0.0), dt, steps);
        assert!((s.x[1] - 1.0).abs() < 1e-5);
        assert!(s.y[1].abs() < 1e-5);
    }

    /// Duffing oscillator `x'' = -x - x^3` integrated with RK4 at dt = 1e-4 as
    /// the reference (local error ~1e-20, global ~1e-16 over t = 1).
    fn duffing_reference(t: f64, dt: f64) -> f64 {
        let f = |x: f64, v: f64| (v, -x - x * x * x);
        let (mut x, mut v) = (1.0, 0.0);
        let steps = (t / dt).round() as usize;
        for _ in 0..steps {
            let (a1, b1) = f(x, v);
            let (a2, b2) = f(x + 0.5 * dt * a1, v + 0.5 * dt * b1);
            let (a3, b3) = f(x + 0.5 * dt * a2, v + 0.5 * dt * b2);
            let (a4, b4) = f(x + dt * a3, v + dt * b3);
            x += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            v += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        }
        x
    }

    #[test]
    fn duffing_matches_reference() {
        let reference = duffing_reference(1.0, 1e-4);
        assert!((reference - duffing_reference(1.0, 2e-4)).abs() < 1e-13);
        let s = run_dkg(single_site(1.0, 0.0), Dkg::new(0.0, 1.0), 1e-5, 100_000);
        assert!(
            (s.x[1] - reference).abs() < 1e-8,
            "{} vs {}",
            s.x[1],
            reference
        );
    }

    #[test]
    fn verlet_is_time_reversible() {
        let dkg = Dkg::new(0.2, 0.8);
        let x: Vec<f64> = (0..9).map(|k| (k as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..9).map(|k| (k as f64 * 1.3).cos()).collect();
        let s0 = LatticeState::new(x, y, 0.0).unwrap();
        let mut s = s0.clone();
        for _ in 0..100 {
            s = step_dkg_verlet(&s, &dkg, 1e-2);
        }
        for _ in 0..100 {
            s = step_dkg_verlet(&s, &dkg, -1e-2);
        }
        for (a, b) in s.x.iter().zip(&s0.x).chain(s.y.iter().zip(&s0.y)) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn verlet_commutes_with_shift() {
        let dkg = Dkg::new(0.2, 0.8);
        let x: Vec<f64> = (0..7).map(|k| (k as f64).sin()).collect();
        let s = LatticeState::new(x, vec![0.1; 7], 0.0).unwrap();
        let a = step_dkg_verlet(&s.shifted(3), &dkg, 0.05);
        let b = step_dkg_verlet(&s, &dkg, 0.05).shifted(3);
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
    }

    fn max_energy_drift(dt: f64) -> f64 {
        let dkg = Dkg::new(0.1, 1.0);
        let x: Vec<f64> = (0..9).map(|k| 0.5 * (k as f64 * 0.9).sin()).collect();
        let mut s = LatticeState::new(x, vec![0.0; 9], 0.0).unwrap();
        let e0 = energy_dkg(&s, &dkg);
        let mut st = VerletStepper::new(dkg, &s);
        let steps = (20.0 / dt).round() as usize;
        let mut worst: f64 = 0.0;
        for _ in 0..steps {
            st.step(&mut s, dt);
            worst = worst.max((energy_dkg(&s, &dkg) - e0).abs());
        }
        worst
    }

    #[test]
    fn verlet_energy_error_is_second_order() {
        let ratio = max_energy_drift(0.02) / max_energy_drift(0.01);
        assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
    }

    fn plane_wave_error(dt: f64) -> f64 {
        let nu = 1.0;
        let c0 = Complex64::new(0.8, 0.1);
        let model = DnlsModel::Standard { nu };
        let mut s = EnvelopeState::new(vec![c0; 5], 0.0).unwrap();
        let steps = (1.0 / dt).round() as usize;
        for _ in 0..steps {
            s = step_envelope_rk4(&s, &model, dt);
        }
        let w = 1.0 - 1.5 * nu * c0.norm_sqr();
        let exact = c0 * Complex64::from_polar(1.0, -w * s.tau);
        s.a.iter().map(|z| (z - exact).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn rk4_plane_wave_accuracy_and_order() {
        assert!(plane_wave_error(1e-3) < 1e-10);
        let ratio = plane_wave_error(0.1) / plane_wave_error(0.05);
        assert!((ratio - 16.0).abs() < 1.5, "ratio {ratio}");
    }

    #[test]
    fn trajectory_bookkeeping() {
        let cfg = IntegratorConfig::new(1e-3, 1e-3, 1, Scheme::Verlet).unwrap();
        let flow = DkgFlow(Dkg::new(0.1, 0.1));
        let traj = integrate(&flow, single_site(0.3, 0.0), &cfg, &mut []).unwrap();
        assert_eq!(traj.len(), 2);
        assert!(traj.times[1] > traj.times[0]);

        let cfg = IntegratorConfig::new(0.01, 1.0, 7, Scheme::Verlet).unwrap();
        let mut energy = |s: &LatticeState, d: &mut Diagnostics| {
            d.insert("energy".into(), energy_dkg(s, &Dkg::new(0.1, 0.1)));
        };
        let traj = integrate(&flow, single_site(0.3, 0.0), &cfg, &mut [&mut energy]).unwrap();
        // 100 steps, stride 7: snapshots at 0, 7, ..., 98 and the final step
        assert_eq!(traj.len(), 1 + 14 + 1);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
        assert!(traj.series("energy").iter().all(|e| e.is_finite()));
    }

    #[test]
    fn scheme_mismatch_is_rejected() {
        let cfg = IntegratorConfig::new(1e-3, 1e-2, 1, Scheme::Rk4).unwrap();
        let flow = DkgFlow(Dkg::new(0.1, 0.1));
        assert!(integrate(&flow, single_site(0.3, 0.0), &cfg, &mut []).is_err());
    }

    #[test]
    fn blow_up_reports_last_good_time() {
        // negative rho makes the potential soft and the amplitude escapes
        let flow = DkgFlow(Dkg::new(0.0, -1.0));
        let cfg = IntegratorConfig::new(1e-2, 100.0, 1, Scheme::Verlet).unwrap();
        match integrate(&flow, single_site(3.0, 0.0), &cfg, &mut []) {
            Err(LabError::BlowUp { last_good_time }) => assert!(last_good_time > 0.0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn envelope_norm_drift_is_small() {
        let model = DnlsModel::Standard { nu: 1.0 };
        let a: Vec<Complex64> = (0..17)
            .map(|k| {
                Complex64::new(
                    (-(k as f64 - 8.0).powi(2) / 4.0).exp(),
                    0.1 * k as f64 / 17.0,
                )
            })
            .collect();
        let n0 = l2_conserved(&a);
        let cfg = IntegratorConfig::new(1e-3, 10.0, 1000, Scheme::Rk4).unwrap();
        let mut obs = |s: &EnvelopeState, d: &mut Diagnostics| {
            d.insert("l2sq".into(), l2_conserved(&s.a));
        };
        let traj = integrate(
            &EnvelopeFlow(model),
            EnvelopeState::new(a, 0.0).unwrap(),
            &cfg,
            &mut [&mut obs],
        )
        .unwrap();
        let drift = traj
            .series("l2sq")
            .iter()
            .map(|v| (v - n0).abs() / n0)
            .fold(0.0, f64::max);
        assert!(drift < 1e-8, "drift {drift}");
    }

    #[test]
    fn csv_writer_streams_rows() {
        let mut w = CsvTrajectoryWriter::new(Vec::new()).with_comment("config_hash=abc");
        let mut d = Diagnostics::new();
        d.insert("energy".into(), 0.5);
        d.insert("a".into(), 1.0);
        let s = single_site(0.0, 0.0);
        w.write(0.0, &s, &d).unwrap();
        w.write(0.1, &s, &d).unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        assert_eq!(text, "# config_hash=abc\nt,a,energy\n0,1,0.5\n0.1,1,0.5\n");
    }
}
