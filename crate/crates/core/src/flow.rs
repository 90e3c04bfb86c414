//! Fixed-step RK4 integration of Hamiltonian and open-loop systems with
//! switch location for piecewise-constant controls.

use crate::error::{PmpError, Result};
use crate::hamiltonian::{
    ambient_hamiltonian_at, local_model, maximize_ambient_at, tie_tolerance, AdjointState,
    Maximizer,
};
use crate::manifold::{Covector, PROJECTION_TOL};
use crate::system::{extended_field_at, extended_jacobian_at, AmbientPoint, ControlProblem};
use nalgebra::{DMatrix, DVector};

/// Default step as a fraction of the horizon.
pub const DEFAULT_STEP_FRACTION: f64 = 1e-3;
/// Switch instants are located to this accuracy.
pub const SWITCH_TOL: f64 = 1e-10;
/// Default bound on the step-halving error estimate when error control is on.
pub const DEFAULT_ERROR_TOL: f64 = 1e-8;

const MAX_SWITCHES_PER_STEP: usize = 8;

/// Piecewise-constant open-loop control: `controls[k]` applies on
/// `[switch_times[k-1], switch_times[k])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSchedule {
    pub switch_times: Vec<f64>,
    pub controls: Vec<DVector<f64>>,
}

impl ControlSchedule {
    pub fn constant(u: DVector<f64>) -> Self {
        Self {
            switch_times: Vec::new(),
            controls: vec![u],
        }
    }

    pub fn new(switch_times: Vec<f64>, controls: Vec<DVector<f64>>) -> Result<Self> {
        if controls.len() != switch_times.len() + 1 {
            return Err(PmpError::InvalidProblem(format!(
                "schedule with {} switch times needs {} controls, got {}",
                switch_times.len(),
                switch_times.len() + 1,
                controls.len()
            )));
        }
        if switch_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(PmpError::InvalidProblem(
                "switch times must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            switch_times,
            controls,
        })
    }

    pub fn control_at(&self, t: f64) -> &DVector<f64> {
        let k = self.switch_times.partition_point(|s| *s <= t);
        &self.controls[k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlPolicy {
    /// Closed-loop pointwise maximisation of the Hamiltonian.
    Argmax,
    Schedule(ControlSchedule),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOptions {
    /// Fixed step; `None` uses `step_fraction` of the horizon.
    pub step: Option<f64>,
    pub step_fraction: f64,
    /// Step-halving error bound; `None` disables the estimate.
    pub error_tol: Option<f64>,
    /// Project the state back onto `M` every `k` steps; off by default.
    pub reproject_every: Option<usize>,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            step: None,
            step_fraction: DEFAULT_STEP_FRACTION,
            error_tol: Some(DEFAULT_ERROR_TOL),
            reproject_every: None,
        }
    }
}

impl FlowOptions {
    pub fn fast() -> Self {
        Self {
            error_tol: None,
            ..Self::default()
        }
    }

    fn step_count(&self, horizon: f64) -> usize {
        let h = self.step.unwrap_or(self.step_fraction * horizon);
        ((horizon / h) - 1e-9).ceil().max(1.0) as usize
    }
}

/// A system `ẏ = Y(y, u)` integrated by `integrate`.
pub(crate) trait ControlledSystem {
    fn rhs(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    fn hamiltonian(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<f64>;

    fn maximize(&self, y: &DVector<f64>, previous: Option<&DVector<f64>>) -> Result<Maximizer>;

    fn tie_tolerance(&self, y: &DVector<f64>) -> f64;

    /// True when the maximiser moves continuously, so it is re-evaluated at every stage.
    fn smooth_control(&self, _y: &DVector<f64>) -> bool {
        false
    }

    /// Block ranges of the control vector that switch independently.
    fn control_blocks(&self) -> Vec<std::ops::Range<usize>>;

    /// Post-step checks and optional corrections.
    fn after_step(&self, t: f64, y: &mut DVector<f64>, reproject: bool) -> Result<()>;
}

#[derive(Debug, Clone, Default)]
pub(crate) struct RawFlow {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub degenerate: Vec<bool>,
    pub switches: Vec<f64>,
}

impl RawFlow {
    fn push(&mut self, t: f64, y: &DVector<f64>, u: &DVector<f64>, degenerate: bool) {
        self.times.push(t);
        self.states.push(y.clone());
        self.controls.push(u.clone());
        self.degenerate.push(degenerate);
    }
}

fn rk4<S: ControlledSystem>(
    sys: &S,
    y: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    let k1 = sys.rhs(y, u)?;
    let k2 = sys.rhs(&(y + &k1 * (0.5 * h)), u)?;
    let k3 = sys.rhs(&(y + &k2 * (0.5 * h)), u)?;
    let k4 = sys.rhs(&(y + &k3 * h), u)?;
    Ok(y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

/// RK4 with the maximiser re-evaluated at each stage.
fn rk4_smooth<S: ControlledSystem>(
    sys: &S,
    y: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    let stage = |yy: &DVector<f64>| -> Result<DVector<f64>> {
        let m = sys.maximize(yy, Some(u))?;
        sys.rhs(yy, &m.control)
    };
    let k1 = stage(y)?;
    let k2 = stage(&(y + &k1 * (0.5 * h)))?;
    let k3 = stage(&(y + &k2 * (0.5 * h)))?;
    let k4 = stage(&(y + &k3 * h))?;
    Ok(y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

struct Stepper<'a, S> {
    sys: &'a S,
    error_tol: Option<f64>,
    smooth: bool,
}

impl<S: ControlledSystem> Stepper<'_, S> {
    fn raw(&self, y: &DVector<f64>, u: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
        if self.smooth {
            rk4_smooth(self.sys, y, u, h)
        } else {
            rk4(self.sys, y, u, h)
        }
    }

    /// One accepted step; with error control the two-half-step result is kept.
    fn step(&self, t: f64, y: &DVector<f64>, u: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
        let full = self.raw(y, u, h)?;
        self.accept(t, y, u, h, full)
    }

    /// Applies error control to an already computed full step.
    fn accept(
        &self,
        t: f64,
        y: &DVector<f64>,
        u: &DVector<f64>,
        h: f64,
        full: DVector<f64>,
    ) -> Result<DVector<f64>> {
        let Some(tol) = self.error_tol else {
            return Ok(full);
        };
        let mid = self.raw(y, u, 0.5 * h)?;
        let half = self.raw(&mid, u, 0.5 * h)?;
        let estimate = (&half - &full).amax() / half.amax().max(1.0);
        if estimate > tol || !estimate.is_finite() {
            return Err(PmpError::StepTooLarge { t: t + h, estimate });
        }
        Ok(half)
    }
}

/// Integrates on the uniform grid of `options`, splitting steps at switches.
pub(crate) fn integrate<S: ControlledSystem>(
    sys: &S,
    y0: DVector<f64>,
    t_span: (f64, f64),
    policy: &ControlPolicy,
    options: &FlowOptions,
) -> Result<RawFlow> {
    let (t0, t1) = t_span;
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(PmpError::InvalidProblem(format!(
            "invalid time span [{t0}, {t1}]"
        )));
    }
    let n = options.step_count(t1 - t0);
    let h = (t1 - t0) / n as f64;
    let reproject = |k: usize| {
        options
            .reproject_every
            .is_some_and(|e| e > 0 && (k + 1) % e == 0)
    };
    match policy {
        ControlPolicy::Schedule(schedule) => {
            let stepper = Stepper {
                sys,
                error_tol: options.error_tol,
                smooth: false,
            };
            integrate_schedule(&stepper, y0, (t0, t1), h, n, schedule, reproject)
        }
        ControlPolicy::Argmax => {
            let smooth = sys.smooth_control(&y0);
            let stepper = Stepper {
                sys,
                error_tol: options.error_tol,
                smooth,
            };
            if smooth {
                integrate_smooth(&stepper, y0, (t0, t1), h, n, reproject)
            } else {
                integrate_bang(&stepper, y0, (t0, t1), h, n, reproject)
            }
        }
    }
}

fn node(t0: f64, h: f64, k: usize, n: usize, t1: f64) -> f64 {
    if k == n {
        t1
    } else {
        t0 + h * k as f64
    }
}

fn integrate_schedule<S: ControlledSystem>(
    st: &Stepper<'_, S>,
    mut y: DVector<f64>,
    (t0, t_end): (f64, f64),
    h: f64,
    n: usize,
    schedule: &ControlSchedule,
    reproject: impl Fn(usize) -> bool,
) -> Result<RawFlow> {
    let mut out = RawFlow::default();
    let mut t = t0;
    out.push(t, &y, schedule.control_at(t), false);
    let mut breaks = schedule
        .switch_times
        .iter()
        .copied()
        .filter(|s| *s > t0 && *s < t_end)
        .peekable();
    for k in 0..n {
        let target = node(t0, h, k + 1, n, t_end);
        while let Some(&s) = breaks.peek() {
            if s > target - SWITCH_TOL {
                break;
            }
            breaks.next();
            if s - t > SWITCH_TOL {
                let u = schedule.control_at(t).clone();
                y = st.step(t, &y, &u, s - t)?;
                st.sys.after_step(s, &mut y, false)?;
                t = s;
            }
            out.switches.push(s);
            out.push(t, &y, schedule.control_at(s), false);
        }
        let u = schedule.control_at(t).clone();
        y = st.step(t, &y, &u, target - t)?;
        st.sys.after_step(target, &mut y, reproject(k))?;
        t = target;
        // a break within SWITCH_TOL of the node is taken at the node
        if let Some(&s) = breaks.peek() {
            if (s - t).abs() <= SWITCH_TOL {
                breaks.next();
                out.switches.push(s);
            }
        }
        out.push(t, &y, schedule.control_at(t), false);
    }
    Ok(out)
}

fn integrate_smooth<S: ControlledSystem>(
    st: &Stepper<'_, S>,
    mut y: DVector<f64>,
    (t0, t_end): (f64, f64),
    h: f64,
    n: usize,
    reproject: impl Fn(usize) -> bool,
) -> Result<RawFlow> {
    let mut out = RawFlow::default();
    let mut m = st.sys.maximize(&y, None)?;
    out.push(t0, &y, &m.control, m.degenerate);
    for k in 0..n {
        let t = node(t0, h, k, n, t_end);
        let target = node(t0, h, k + 1, n, t_end);
        y = st.step(t, &y, &m.control, target - t)?;
        st.sys.after_step(target, &mut y, reproject(k))?;
        m = st.sys.maximize(&y, Some(&m.control))?;
        out.push(target, &y, &m.control, m.degenerate);
    }
    Ok(out)
}

fn with_block(
    u: &DVector<f64>,
    from: &DVector<f64>,
    block: &std::ops::Range<usize>,
) -> DVector<f64> {
    let mut w = u.clone();
    w.rows_mut(block.start, block.len())
        .copy_from(&from.rows(block.start, block.len()));
    w
}

fn integrate_bang<S: ControlledSystem>(
    st: &Stepper<'_, S>,
    mut y: DVector<f64>,
    (t0, t_end): (f64, f64),
    h: f64,
    n: usize,
    reproject: impl Fn(usize) -> bool,
) -> Result<RawFlow> {
    let sys = st.sys;
    let blocks = sys.control_blocks();
    let mut out = RawFlow::default();
    let first = sys.maximize(&y, None)?;
    let mut u = first.control;
    out.push(t0, &y, &u, first.degenerate);
    let mut t = t0;
    for k in 0..n {
        let target = node(t0, h, k + 1, n, t_end);
        let mut restarts = 0;
        let mut switches = 0;
        loop {
            let dt = target - t;
            let y_end = rk4(sys, &y, &u, dt)?;
            let m_end = sys.maximize(&y_end, Some(&u))?;
            if m_end.control == u || switches >= MAX_SWITCHES_PER_STEP {
                y = st.accept(t, &y, &u, dt, y_end)?;
                sys.after_step(target, &mut y, reproject(k))?;
                t = target;
                if m_end.control != u {
                    u = m_end.control.clone();
                    out.switches.push(t);
                }
                out.push(t, &y, &u, m_end.degenerate);
                break;
            }
            let tol = sys.tie_tolerance(&y);
            let h0 = sys.hamiltonian(&y, &u)?;
            let changed: Vec<_> = blocks
                .iter()
                .filter(|b| u.rows(b.start, b.len()) != m_end.control.rows(b.start, b.len()))
                .collect();
            // Blocks whose new value is already at least as good at the step start are
            // adopted there: a tie at a grid node is a switch at the node, while a strict
            // preference means the held value was a tie-break default and no switch occurred.
            let mut restarted = false;
            let mut switched_here = false;
            for b in &changed {
                let candidate = with_block(&u, &m_end.control, b);
                let d0 = sys.hamiltonian(&y, &candidate)? - h0;
                if d0 >= -tol {
                    switched_here |= d0 <= tol && t > t0;
                    u = candidate;
                    restarted = true;
                }
            }
            if restarted && restarts <= blocks.len() {
                restarts += 1;
                if switched_here && out.switches.last() != Some(&t) {
                    out.switches.push(t);
                }
                // the row at t records the control integrated from t
                *out.controls.last_mut().expect("row at t") = u.clone();
                if switched_here {
                    *out.degenerate.last_mut().expect("row at t") = false;
                }
                continue;
            }
            let mut earliest: Option<(f64, DVector<f64>)> = None;
            for b in &changed {
                let candidate = with_block(&u, &m_end.control, b);
                let delta = |tau: f64| -> Result<f64> {
                    let ys = rk4(sys, &y, &u, tau)?;
                    Ok(sys.hamiltonian(&ys, &candidate)? - sys.hamiltonian(&ys, &u)?)
                };
                let d1 = delta(dt)?;
                if d1 <= 0.0 {
                    continue;
                }
                let tau = locate_switch(delta, dt, d1)?;
                if earliest.as_ref().is_none_or(|(e, _)| tau < *e) {
                    earliest = Some((tau, candidate));
                }
            }
            let Some((tau, candidate)) = earliest else {
                // the changed blocks are not better over this step: keep the control
                y = st.step(t, &y, &u, dt)?;
                sys.after_step(target, &mut y, reproject(k))?;
                t = target;
                out.push(t, &y, &u, m_end.degenerate);
                break;
            };
            switches += 1;
            if tau >= dt - SWITCH_TOL {
                y = st.step(t, &y, &u, dt)?;
                sys.after_step(target, &mut y, reproject(k))?;
                t = target;
                u = candidate;
                out.switches.push(t);
                out.push(t, &y, &u, false);
                break;
            }
            if tau > SWITCH_TOL {
                y = st.step(t, &y, &u, tau)?;
                sys.after_step(t + tau, &mut y, false)?;
                t += tau;
                out.switches.push(t);
                u = candidate;
                out.push(t, &y, &u, false);
            } else {
                // the switch is at the step start: the row there takes the new control
                u = candidate;
                if t > t0 && out.switches.last() != Some(&t) {
                    out.switches.push(t);
                }
                *out.controls.last_mut().expect("row at t") = u.clone();
                *out.degenerate.last_mut().expect("row at t") = false;
            }
        }
    }
    Ok(out)
}

/// Root of `delta` on `(0, dt]` given `delta(dt) > 0 >= delta(0)`, by bisection
/// to `SWITCH_TOL` and a final secant interpolation inside the last bracket.
fn locate_switch<F: Fn(f64) -> Result<f64>>(delta: F, dt: f64, d_hi: f64) -> Result<f64> {
    let (mut lo, mut hi) = (0.0, dt);
    let mut f_lo = delta(0.0)?;
    let mut f_hi = d_hi;
    while hi - lo > SWITCH_TOL {
        let mid = 0.5 * (lo + hi);
        let f_mid = delta(mid)?;
        if f_mid > 0.0 {
            hi = mid;
            f_hi = f_mid;
        } else {
            lo = mid;
            f_lo = f_mid;
        }
    }
    let tau = if f_hi > f_lo {
        lo - f_lo * (hi - lo) / (f_hi - f_lo)
    } else {
        hi
    };
    Ok(tau.clamp(lo, hi))
}

/// Ambient extremal flow with `columns` costate columns. Column 0 carries the
/// `λ₀` source term and drives the control; the others are homogeneous.
pub(crate) struct AmbientSystem<'a> {
    pub problem: &'a ControlProblem,
    pub lambda0: f64,
    pub columns: usize,
}

impl AmbientSystem<'_> {
    fn n(&self) -> usize {
        self.problem.ambient_dim()
    }

    pub fn dim(&self) -> usize {
        self.n() * (1 + self.columns) + 1
    }

    pub fn pack(&self, z: &DVector<f64>, costates: &DMatrix<f64>) -> DVector<f64> {
        let n = self.n();
        let mut y = DVector::zeros(self.dim());
        y.rows_mut(0, n).copy_from(z);
        y.rows_mut(n, n * self.columns)
            .copy_from_slice(costates.as_slice());
        y
    }

    pub fn state<'b>(&self, y: &'b DVector<f64>) -> nalgebra::DVectorView<'b, f64> {
        y.rows(0, self.n())
    }

    pub fn costate(&self, y: &DVector<f64>) -> DVector<f64> {
        y.rows(self.n(), self.n()).into_owned()
    }

    pub fn costate_columns(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_column_slice(n, self.columns, y.rows(n, n * self.columns).as_slice())
    }

    pub fn cost(&self, y: &DVector<f64>) -> f64 {
        y[self.dim() - 1]
    }

    fn point(&self, y: &DVector<f64>, derivatives: bool) -> Result<AmbientPoint> {
        AmbientPoint::evaluate(
            &self.problem.manifold,
            &self.state(y).into_owned(),
            derivatives,
        )
    }
}

impl ControlledSystem for AmbientSystem<'_> {
    fn rhs(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n();
        let at = self.point(y, true)?;
        let mut dy = DVector::zeros(self.dim());
        dy.rows_mut(0, n)
            .copy_from(&extended_field_at(self.problem, &at, u));
        let jac_t = extended_jacobian_at(self.problem, &at, u).transpose();
        let cols = self.costate_columns(y);
        let mut dp = -(jac_t * cols);
        if self.lambda0 != 0.0 {
            let g = at.cost_gradient(self.problem, u) * self.lambda0;
            let mut c0 = dp.column_mut(0);
            c0 -= g;
        }
        dy.rows_mut(n, n * self.columns)
            .copy_from_slice(dp.as_slice());
        dy[self.dim() - 1] = self.problem.running_cost.eval(&at.retracted, u);
        Ok(dy)
    }

    fn hamiltonian(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let at = self.point(y, false)?;
        Ok(ambient_hamiltonian_at(
            self.problem,
            &at,
            &self.costate(y),
            self.lambda0,
            u,
        ))
    }

    fn maximize(&self, y: &DVector<f64>, previous: Option<&DVector<f64>>) -> Result<Maximizer> {
        let at = self.point(y, false)?;
        Ok(maximize_ambient_at(
            self.problem,
            &at,
            &self.costate(y),
            self.lambda0,
            previous,
        ))
    }

    fn tie_tolerance(&self, y: &DVector<f64>) -> f64 {
        tie_tolerance(&self.costate(y), self.lambda0)
    }

    fn smooth_control(&self, y: &DVector<f64>) -> bool {
        let Ok(at) = self.point(y, false) else {
            return false;
        };
        let p = self.costate(y);
        match local_model(self.problem, &at, &p, self.lambda0) {
            Some(model) => model.is_smooth(tie_tolerance(&p, self.lambda0)),
            None => !self.problem.control_set.is_finite(),
        }
    }

    fn control_blocks(&self) -> Vec<std::ops::Range<usize>> {
        self.problem
            .control_set
            .blocks()
            .iter()
            .map(|b| b.range())
            .collect()
    }

    fn after_step(&self, t: f64, y: &mut DVector<f64>, reproject: bool) -> Result<()> {
        check_finite(t, y)?;
        let z = self.state(y).into_owned();
        let distance = self.problem.manifold.tube_distance(&z);
        // beyond half the radius the bump drops below one and F no longer extends f
        if distance >= 0.5 * self.problem.manifold.tube_radius() {
            return Err(PmpError::LeftTube { t, distance });
        }
        if reproject {
            let x = self.problem.manifold.project(&z, PROJECTION_TOL)?;
            y.rows_mut(0, self.n()).copy_from(&x);
        }
        Ok(())
    }
}

fn check_finite(t: f64, y: &DVector<f64>) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(PmpError::StepTooLarge {
            t,
            estimate: f64::INFINITY,
        })
    }
}

/// Classical RK4 for `(z, p)` over a signed duration `h` in `substeps` steps;
/// `control(τ)` gives the control at offset `τ` from the start.
pub(crate) fn reintegrate<C: Fn(f64) -> DVector<f64>>(
    problem: &ControlProblem,
    lambda0: f64,
    z: &DVector<f64>,
    p: &DVector<f64>,
    control: C,
    h: f64,
    substeps: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let sys = AmbientSystem {
        problem,
        lambda0,
        columns: 1,
    };
    let mut y = sys.pack(z, &DMatrix::from_column_slice(p.len(), 1, p.as_slice()));
    let dt = h / substeps as f64;
    for k in 0..substeps {
        let tau = dt * k as f64;
        let k1 = sys.rhs(&y, &control(tau))?;
        let mid = control(tau + 0.5 * dt);
        let k2 = sys.rhs(&(&y + &k1 * (0.5 * dt)), &mid)?;
        let k3 = sys.rhs(&(&y + &k2 * (0.5 * dt)), &mid)?;
        let k4 = sys.rhs(&(&y + &k3 * dt), &control(tau + dt))?;
        y += (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
    }
    Ok((sys.state(&y).into_owned(), sys.costate(&y)))
}

/// Open-loop `ż = F(z, u)`.
struct StateSystem<'a> {
    problem: &'a ControlProblem,
}

impl ControlledSystem for StateSystem<'_> {
    fn rhs(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let at = AmbientPoint::evaluate(&self.problem.manifold, y, false)?;
        Ok(extended_field_at(self.problem, &at, u))
    }
    fn hamiltonian(&self, _y: &DVector<f64>, _u: &DVector<f64>) -> Result<f64> {
        Err(PmpError::InvalidProblem(
            "open-loop simulation has no Hamiltonian".into(),
        ))
    }
    fn maximize(&self, _y: &DVector<f64>, _previous: Option<&DVector<f64>>) -> Result<Maximizer> {
        Err(PmpError::InvalidProblem(
            "open-loop simulation requires a control schedule".into(),
        ))
    }
    fn tie_tolerance(&self, _y: &DVector<f64>) -> f64 {
        0.0
    }
    fn control_blocks(&self) -> Vec<std::ops::Range<usize>> {
        vec![0..self.problem.control_dim()]
    }
    fn after_step(&self, t: f64, y: &mut DVector<f64>, reproject: bool) -> Result<()> {
        check_finite(t, y)?;
        if reproject {
            let x = self.problem.manifold.project(y, PROJECTION_TOL)?;
            y.copy_from(&x);
        }
        Ok(())
    }
}

/// Result of an open-loop simulation of the extended field.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    /// `max_t |g(z(t))|`.
    pub max_drift: f64,
}

/// Integrates `ż = F(z, u(t))` under a control schedule. The start may lie
/// anywhere; outside the tube the field vanishes.
pub fn simulate(
    problem: &ControlProblem,
    z0: &DVector<f64>,
    schedule: &ControlSchedule,
    t_span: (f64, f64),
    options: &FlowOptions,
) -> Result<Simulation> {
    if z0.len() != problem.ambient_dim() {
        return Err(PmpError::DimensionMismatch(
            "initial state has the wrong dimension".into(),
        ));
    }
    for u in &schedule.controls {
        problem.ensure_control(u)?;
    }
    let sys = StateSystem { problem };
    let raw = integrate(
        &sys,
        z0.clone(),
        t_span,
        &ControlPolicy::Schedule(schedule.clone()),
        options,
    )?;
    let max_drift = raw
        .states
        .iter()
        .map(|z| problem.manifold.constraint_norm(z))
        .fold(0.0, f64::max);
    Ok(Simulation {
        times: raw.times,
        states: raw.states,
        controls: raw.controls,
        max_drift,
    })
}

/// A state–costate–control trajectory. Row `i`'s control applies on `[tᵢ, tᵢ₊₁)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Extremal {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Ambient costates `p(tᵢ)`.
    pub costates: Vec<DVector<f64>>,
    /// Restricted costates, in the basis `tangent_frame(states[i])`.
    pub intrinsic_costates: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub lambda0: f64,
    pub switching_times: Vec<f64>,
    /// Rows where the maximiser was not unique.
    pub degenerate: Vec<bool>,
    pub hamiltonian: Vec<f64>,
    /// `∫ f⁰ dt` along the trajectory.
    pub cost: f64,
}

impl Extremal {
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn initial_time(&self) -> f64 {
        self.times[0]
    }
    pub fn terminal_time(&self) -> f64 {
        *self.times.last().expect("nonempty extremal")
    }
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("nonempty extremal")
    }
    pub fn final_costate(&self) -> &DVector<f64> {
        self.costates.last().expect("nonempty extremal")
    }

    /// Copy with `(λ₀, p, λ)` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Extremal {
        let mut e = self.clone();
        e.lambda0 *= c;
        e.costates.iter_mut().for_each(|p| *p *= c);
        e.intrinsic_costates.iter_mut().for_each(|p| *p *= c);
        e.hamiltonian.iter_mut().for_each(|h| *h *= c);
        e
    }
}

/// Output of a flow carrying extra homogeneous costate columns.
pub(crate) struct ColumnFlow {
    pub extremal: Extremal,
}

pub(crate) fn flow_columns(
    problem: &ControlProblem,
    x0: &DVector<f64>,
    costates: &DMatrix<f64>,
    lambda0: f64,
    policy: &ControlPolicy,
    t_span: (f64, f64),
    options: &FlowOptions,
) -> Result<ColumnFlow> {
    let sys = AmbientSystem {
        problem,
        lambda0,
        columns: costates.ncols(),
    };
    let raw = integrate(&sys, sys.pack(x0, costates), t_span, policy, options)?;
    let mut ext = Extremal {
        times: raw.times,
        states: Vec::new(),
        costates: Vec::new(),
        intrinsic_costates: Vec::new(),
        controls: raw.controls,
        lambda0,
        switching_times: raw.switches,
        degenerate: raw.degenerate,
        hamiltonian: Vec::new(),
        cost: sys.cost(raw.states.last().expect("nonempty flow")),
    };
    for (y, u) in raw.states.iter().zip(&ext.controls) {
        let z = sys.state(y).into_owned();
        let p = sys.costate(y);
        ext.hamiltonian.push(sys.hamiltonian(y, u)?);
        let restricted = problem
            .manifold
            .restrict_covector(&Covector::ambient(z.clone(), p.clone()))?;
        ext.intrinsic_costates.push(restricted.components().clone());
        ext.states.push(z);
        ext.costates.push(p);
    }
    Ok(ColumnFlow { extremal: ext })
}

/// Integrates the ambient Hamiltonian system from `initial` over `t_span`.
pub fn flow_extremal(
    problem: &ControlProblem,
    initial: &AdjointState,
    policy: &ControlPolicy,
    t_span: (f64, f64),
    options: &FlowOptions,
) -> Result<Extremal> {
    if initial.x.len() != problem.ambient_dim() {
        return Err(PmpError::DimensionMismatch(
            "initial state has the wrong dimension".into(),
        ));
    }
    if let ControlPolicy::Schedule(s) = policy {
        for u in &s.controls {
            problem.ensure_control(u)?;
        }
    }
    let cols = DMatrix::from_column_slice(initial.p.len(), 1, initial.p.as_slice());
    flow_columns(
        problem,
        &initial.x,
        &cols,
        initial.lambda0,
        policy,
        t_span,
        options,
    )
    .map(|f| f.extremal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::EmbeddedManifold;
    use crate::system::{
        sphere_rotation_dynamics, BoundaryCondition, ControlSet, ExpressionDynamics, TerminalTime,
        TimeCost,
    };
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn sphere() -> ControlProblem {
        ControlProblem::new(
            EmbeddedManifold::unit_sphere(3),
            Arc::new(sphere_rotation_dynamics()),
            Arc::new(TimeCost),
            ControlSet::symmetric_box(2, 1.0),
            BoundaryCondition::Point(v(&[1.0, 0.0, 0.0])),
            BoundaryCondition::Point(v(&[0.0, 0.0, 1.0])),
            TerminalTime::Free,
        )
        .unwrap()
    }

    fn double_integrator() -> ControlProblem {
        ControlProblem::new(
            EmbeddedManifold::coordinate_plane(3),
            Arc::new(ExpressionDynamics::parse(3, 1, &["x2", "u1", "0"]).unwrap()),
            Arc::new(TimeCost),
            ControlSet::symmetric_box(1, 1.0),
            BoundaryCondition::Point(v(&[1.0, 0.0, 0.0])),
            BoundaryCondition::Point(v(&[0.0, 0.0, 0.0])),
            TerminalTime::Free,
        )
        .unwrap()
    }

    #[test]
    fn constant_control_rotates_e1_to_e3() {
        let pr = sphere();
        let sim = simulate(
            &pr,
            &v(&[1.0, 0.0, 0.0]),
            &ControlSchedule::constant(v(&[1.0, 1.0])),
            (0.0, PI / 2f64.sqrt()),
            &FlowOptions::default(),
        )
        .unwrap();
        assert!((sim.states.last().unwrap() - v(&[0.0, 0.0, 1.0])).amax() < 1e-6);
        assert!(sim.max_drift <= 1e-7);
        assert_eq!(sim.times.len(), 1001);
    }

    #[test]
    fn zero_control_is_stationary() {
        let pr = sphere();
        let x = v(&[0.0, 0.6, 0.8]);
        let sim = simulate(
            &pr,
            &x,
            &ControlSchedule::constant(v(&[0.0, 0.0])),
            (0.0, 2.0),
            &FlowOptions::default(),
        )
        .unwrap();
        assert!(sim.states.iter().all(|s| *s == x));
    }

    #[test]
    fn zero_dynamics_keep_costate() {
        let pr = ControlProblem {
            dynamics: Arc::new(ExpressionDynamics::parse(3, 2, &["0", "0", "0"]).unwrap()),
            running_cost: Arc::new(crate::system::ExpressionCost::parse(3, 2, "0").unwrap()),
            ..sphere()
        };
        let init = AdjointState::new(v(&[0.0, 1.0, 0.0]), v(&[0.2, -0.3, 0.4]), -1.0).unwrap();
        let e = flow_extremal(
            &pr,
            &init,
            &ControlPolicy::Argmax,
            (0.0, 1.0),
            &FlowOptions::default(),
        )
        .unwrap();
        assert!(e.states.iter().all(|s| *s == init.x));
        assert!(e.costates.iter().all(|p| *p == init.p));
    }

    #[test]
    fn hamiltonian_conserved_on_constant_arc() {
        let pr = sphere();
        let init = AdjointState::new(v(&[1.0, 0.0, 0.0]), v(&[0.3, -0.4, 0.9]), -0.5).unwrap();
        let e = flow_extremal(
            &pr,
            &init,
            &ControlPolicy::Schedule(ControlSchedule::constant(v(&[1.0, -1.0]))),
            (0.0, 2.0),
            &FlowOptions::default(),
        )
        .unwrap();
        let h0 = e.hamiltonian[0];
        assert!(e.hamiltonian.iter().all(|h| (h - h0).abs() <= 1e-8));
    }

    #[test]
    fn double_integrator_switches_once() {
        // p₁ = −1, p₂ = t − 1: u = −1 on [0, 1), +1 after
        let pr = double_integrator();
        let init = AdjointState::new(v(&[1.0, 0.0, 0.0]), v(&[-1.0, -1.0, 0.0]), -1.0).unwrap();
        let e = flow_extremal(
            &pr,
            &init,
            &ControlPolicy::Argmax,
            (0.0, 2.0),
            &FlowOptions::default(),
        )
        .unwrap();
        assert_eq!(e.switching_times.len(), 1);
        assert!((e.switching_times[0] - 1.0).abs() < 1e-9);
        assert!(e.final_state().amax() < 1e-9);
        assert!((e.final_costate() - v(&[-1.0, 1.0, 0.0])).amax() < 1e-12);
        assert!(e.hamiltonian.iter().all(|h| h.abs() < 1e-9));
        assert!((e.cost - 2.0).abs() < 1e-12);
        let k = e
            .times
            .iter()
            .position(|t| *t == e.switching_times[0])
            .unwrap();
        assert_eq!(e.controls[k - 1][0], -1.0);
        assert_eq!(e.controls[k][0], 1.0);
    }

    /// Max over rows of the mismatch between the next state and a re-integration
    /// of the interval with the recorded control.
    fn row_defect(pr: &ControlProblem, e: &Extremal) -> f64 {
        (0..e.len() - 1)
            .map(|i| {
                let h = e.times[i + 1] - e.times[i];
                let u = e.controls[i].clone();
                let (z, p) = reintegrate(
                    pr,
                    e.lambda0,
                    &e.states[i],
                    &e.costates[i],
                    |_| u.clone(),
                    h,
                    4,
                )
                .unwrap();
                (z - &e.states[i + 1])
                    .amax()
                    .max((p - &e.costates[i + 1]).amax())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn recorded_controls_are_the_integrated_ones() {
        // the switch at t = 1 falls exactly on a grid node
        let pr = double_integrator();
        let init = AdjointState::new(v(&[1.0, 0.0, 0.0]), v(&[-1.0, -1.0, 0.0]), -1.0).unwrap();
        let e = flow_extremal(
            &pr,
            &init,
            &ControlPolicy::Argmax,
            (0.0, 2.0),
            &FlowOptions::fast(),
        )
        .unwrap();
        assert!(row_defect(&pr, &e) < 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn sphere_rows_match_integrated_controls(a in -1.0f64..1.0, b in -1.0f64..1.0, t1 in 1.0f64..4.0) {
            let pr = sphere();
            let init = AdjointState::new(v(&[1.0, 0.0, 0.0]), v(&[0.0, a, b]), -0.5).unwrap();
            let e = flow_extremal(&pr, &init, &ControlPolicy::Argmax, (0.0, t1), &FlowOptions::fast()).unwrap();
            proptest::prop_assert!(row_defect(&pr, &e) < 1e-9);
        }
    }

    #[test]
    fn schedule_grid_includes_switches() {
        let pr = sphere();
        let sched =
            ControlSchedule::new(vec![0.3337], vec![v(&[1.0, 0.0]), v(&[0.0, -1.0])]).unwrap();
        let sim = simulate(
            &pr,
            &v(&[1.0, 0.0, 0.0]),
            &sched,
            (0.0, 1.0),
            &FlowOptions::default(),
        )
        .unwrap();
        let k = sim.times.iter().position(|t| *t == 0.3337).unwrap();
        assert_eq!(sim.controls[k], v(&[0.0, -1.0]));
        assert_eq!(sim.controls[k - 1], v(&[1.0, 0.0]));
        assert!(sim.times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn leaving_the_tube_is_reported() {
        // radial drift pushes the state outward through the tube
        let pr = ControlProblem {
            dynamics: Arc::new(ExpressionDynamics::parse(3, 2, &["x1", "x2", "x3"]).unwrap()),
            ..sphere()
        };
        let init = AdjointState::new(v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), -1.0).unwrap();
        let err = flow_extremal(
            &pr,
            &init,
            &ControlPolicy::Argmax,
            (0.0, 1.0),
            &FlowOptions::fast(),
        )
        .unwrap_err();
        assert!(matches!(err, PmpError::LeftTube { .. }), "{err:?}");
    }

    #[test]
    fn coarse_steps_trip_error_control() {
        let pr = sphere();
        let init = AdjointState::new(v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), -1.0).unwrap();
        let opts = FlowOptions {
            step: Some(0.5),
            error_tol: Some(1e-10),
            ..FlowOptions::default()
        };
        let err = flow_extremal(
            &pr,
            &init,
            &ControlPolicy::Schedule(ControlSchedule::constant(v(&[1.0, 1.0]))),
            (0.0, 2.0),
            &opts,
        )
        .unwrap_err();
        assert!(matches!(err, PmpError::StepTooLarge { .. }));
    }
}
