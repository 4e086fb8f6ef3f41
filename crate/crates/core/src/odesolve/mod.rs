//! Numerical integration of latent dynamics.
//!
//! Solvers are written against [`OdeSystem`], which abstracts over the state
//! representation. [`VecSystem`] integrates plain vectors; [`TapeSystem`]
//! integrates tensors on a recording [`Tape`], so every stage of every step
//! becomes part of the differentiated graph.

mod dopri5;
mod rk4;

pub use dopri5::{dopri5_step, interpolate, Dopri5Step};
pub use rk4::rk4_step;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMethod {
    Rk4Fixed,
    Dopri5,
}

impl SolverMethod {
    pub fn name(self) -> &'static str {
        match self {
            SolverMethod::Rk4Fixed => "rk4_fixed",
            SolverMethod::Dopri5 => "dopri5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rk4_fixed" | "rk4" => Ok(SolverMethod::Rk4Fixed),
            "dopri5" => Ok(SolverMethod::Dopri5),
            other => Err(Error::Input(format!("unknown solver method {other:?}"))),
        }
    }
}

/// Integration settings. For `Rk4Fixed`, `h_init` is the nominal step; each
/// grid interval is split into the fewest equal steps not exceeding it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
    pub safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::Dopri5,
            rtol: 1e-5,
            atol: 1e-6,
            h_init: 0.05,
            h_min: 1e-8,
            h_max: 0.5,
            max_steps: 10_000,
            safety: 0.9,
        }
    }
}

impl SolverConfig {
    pub fn rk4(h: f64) -> Self {
        SolverConfig {
            method: SolverMethod::Rk4Fixed,
            h_init: h,
            h_max: h.max(SolverConfig::default().h_max),
            ..Default::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            method: SolverMethod::Dopri5,
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.h_min > 0.0
            && self.h_min <= self.h_init
            && self.h_init <= self.h_max
            && self.rtol > 0.0
            && self.atol > 0.0
            && self.max_steps > 0
            && self.safety > 0.0
            && [self.h_min, self.h_init, self.h_max, self.rtol, self.atol]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid solver configuration {self:?}")))
        }
    }
}

/// Strictly increasing times in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Contract("time grid is empty".into()));
        }
        if let Some(bad) = times.iter().find(|t| !t.is_finite() || **t < 0.0 || **t > 1.0) {
            return Err(Error::Input(format!("time {bad} outside [0, 1]")));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Input(format!(
                "times must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(TimeGrid { times })
    }

    /// `n` evenly spaced times `i / (n - 1)`, `n ≥ 2`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Input(format!("uniform grid needs at least 2 points, got {n}")));
        }
        Self::new((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Same grid with `0.0` prepended when it does not already start there.
    pub fn anchored_at_zero(&self) -> (TimeGrid, usize) {
        if self.times[0] == 0.0 {
            (self.clone(), 0)
        } else {
            let mut t = vec![0.0];
            t.extend_from_slice(&self.times);
            (TimeGrid { times: t }, 1)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct OdeTrajectory<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
    pub stats: SolveStats,
}

/// A right-hand side `dy/dt = f(y, t)` together with the vector-space
/// operations the solvers need on its state type.
pub trait OdeSystem<T: Scalar> {
    type State: Clone;

    fn derivative(&self, y: &Self::State, t: T) -> Result<Self::State>;

    /// `y + Σ cᵢ·kᵢ`.
    fn combine(&self, y: &Self::State, terms: &[(T, &Self::State)]) -> Result<Self::State>;

    fn values<'a>(&self, y: &'a Self::State) -> &'a [T];
}

/// Plain vector state with a closure right-hand side.
pub struct VecSystem<F> {
    f: F,
}

impl<F> VecSystem<F> {
    pub fn new(f: F) -> Self {
        VecSystem { f }
    }
}

impl<T: Scalar, F: Fn(&[T], T) -> Vec<T>> OdeSystem<T> for VecSystem<F> {
    type State = Vec<T>;

    fn derivative(&self, y: &Vec<T>, t: T) -> Result<Vec<T>> {
        let d = (self.f)(y, t);
        if d.len() != y.len() {
            return Err(Error::dim(
                "ode_rhs",
                format!("derivative of length {} for state of {}", d.len(), y.len()),
            ));
        }
        Ok(d)
    }

    fn combine(&self, y: &Vec<T>, terms: &[(T, &Vec<T>)]) -> Result<Vec<T>> {
        let mut out = y.clone();
        for (c, k) in terms {
            for (o, &v) in out.iter_mut().zip(k.iter()) {
                *o += *c * v;
            }
        }
        Ok(out)
    }

    fn values<'a>(&self, y: &'a Vec<T>) -> &'a [T] {
        y
    }
}

/// Tensor state whose right-hand side is built from tape primitives.
pub struct TapeSystem<'t, T, F> {
    tape: &'t Tape<T>,
    f: F,
}

impl<'t, T, F> TapeSystem<'t, T, F> {
    pub fn new(tape: &'t Tape<T>, f: F) -> Self {
        TapeSystem { tape, f }
    }
}

impl<T, F> OdeSystem<T> for TapeSystem<'_, T, F>
where
    T: Scalar,
    F: Fn(&Tape<T>, &Tensor<T>, T) -> Result<Tensor<T>>,
{
    type State = Tensor<T>;

    fn derivative(&self, y: &Tensor<T>, t: T) -> Result<Tensor<T>> {
        let d = (self.f)(self.tape, y, t)?;
        if d.shape() != y.shape() {
            return Err(Error::dim(
                "ode_rhs",
                format!("derivative {:?} for state {:?}", d.shape(), y.shape()),
            ));
        }
        Ok(d)
    }

    fn combine(&self, y: &Tensor<T>, terms: &[(T, &Tensor<T>)]) -> Result<Tensor<T>> {
        let mut all = Vec::with_capacity(terms.len() + 1);
        all.push((T::one(), y));
        all.extend(terms.iter().map(|(c, k)| (*c, *k)));
        self.tape.lincomb(&all)
    }

    fn values<'a>(&self, y: &'a Tensor<T>) -> &'a [T] {
        y.data()
    }
}

pub(crate) fn ensure_finite<T: Scalar>(v: &[T], t: f64, h: f64, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            t,
            h,
            reason: format!("non-finite {what}"),
        })
    }
}

/// Integrates once across `grid`, returning the state at every grid time.
/// `y0` is the state at `grid[0]`. RK4 visits a fixed lattice; Dopri5 chooses
/// its steps towards the last grid time only and reads interior times from
/// the continuous extension, so in both cases the steps taken do not depend
/// on which interior times are requested.
pub fn solve_at<T: Scalar, S: OdeSystem<T>>(
    sys: &S,
    y0: &S::State,
    grid: &TimeGrid,
    cfg: &SolverConfig,
) -> Result<OdeTrajectory<S::State>> {
    if grid.is_empty() {
        return Err(Error::Contract("solve_at needs a non-empty grid".into()));
    }
    cfg.validate()?;
    ensure_finite(sys.values(y0), grid.times()[0], 0.0, "initial state")?;
    let mut traj = OdeTrajectory {
        times: grid.times().to_vec(),
        states: vec![y0.clone()],
        stats: SolveStats::default(),
    };
    match cfg.method {
        SolverMethod::Rk4Fixed => solve_rk4(sys, y0, grid, cfg, &mut traj)?,
        SolverMethod::Dopri5 => solve_dopri5(sys, y0, grid, cfg, &mut traj)?,
    }
    Ok(traj)
}

/// Lattice tolerance: a requested time this close to `k·h` is taken to be
/// that lattice point.
const LATTICE_SNAP: f64 = 1e-9;

/// Fixed-step RK4 on the lattice `k·h`. The main chain only ever visits
/// lattice points (after an initial partial step when `grid[0]` is off the
/// lattice). A requested time strictly between two lattice points gets a
/// branch step from the lattice point below it that does not advance the
/// chain. States at lattice times are therefore the same for every grid
/// that contains them.
fn solve_rk4<T: Scalar, S: OdeSystem<T>>(
    sys: &S,
    y0: &S::State,
    grid: &TimeGrid,
    cfg: &SolverConfig,
    traj: &mut OdeTrajectory<S::State>,
) -> Result<()> {
    let h = cfg.h_init;
    let lattice = |k: i64| k as f64 * h;
    let index_at_or_below = |t: f64| ((t + LATTICE_SNAP) / h).floor() as i64;
    let on_lattice = |t: f64| (t - lattice(index_at_or_below(t))).abs() <= LATTICE_SNAP;
    let mut y = y0.clone();
    let mut t = grid.times()[0];
    let mut steps = 0usize;
    let mut count = |t: f64, traj: &mut OdeTrajectory<S::State>| {
        steps += 1;
        traj.stats.evaluations += 4;
        traj.stats.accepted += 1;
        if steps > cfg.max_steps {
            Err(Error::Budget {
                max_steps: cfg.max_steps,
                t,
            })
        } else {
            Ok(())
        }
    };
    for &target in &grid.times()[1..] {
        loop {
            let k = index_at_or_below(t);
            let next = lattice(k + 1);
            if next > target + LATTICE_SNAP {
                break;
            }
            count(t, traj)?;
            let step = if on_lattice(t) { next - lattice(k) } else { next - t };
            let t_eval = if on_lattice(t) { lattice(k) } else { t };
            y = rk4_step(sys, &y, t_eval, step)?;
            t = next;
        }
        if (target - t).abs() <= LATTICE_SNAP {
            traj.states.push(y.clone());
        } else {
            count(t, traj)?;
            let t_eval = if on_lattice(t) { lattice(index_at_or_below(t)) } else { t };
            traj.states.push(rk4_step(sys, &y, t_eval, target - t_eval)?);
        }
    }
    Ok(())
}

fn solve_dopri5<T: Scalar, S: OdeSystem<T>>(
    sys: &S,
    y0: &S::State,
    grid: &TimeGrid,
    cfg: &SolverConfig,
    traj: &mut OdeTrajectory<S::State>,
) -> Result<()> {
    let times = grid.times();
    let end = times[times.len() - 1];
    let mut next = 1;
    let mut y = y0.clone();
    let mut t = times[0];
    let mut h = cfg.h_init;
    let mut k1: Option<S::State> = None;
    while next < times.len() {
        if traj.stats.accepted + traj.stats.rejected >= cfg.max_steps {
            return Err(Error::Budget {
                max_steps: cfg.max_steps,
                t,
            });
        }
        let last = h >= end - t;
        let h_try = if last { end - t } else { h };
        let fresh = k1.is_none();
        let step = dopri5_step(sys, &y, t, h_try, cfg, k1.take())?;
        traj.stats.evaluations += if fresh { 7 } else { 6 };
        if !step.accepted {
            traj.stats.rejected += 1;
            k1 = Some(step.k_first);
            h = step.h_next;
            continue;
        }
        traj.stats.accepted += 1;
        let t_new = if last { end } else { t + h_try };
        while next < times.len() && times[next] < t_new {
            let theta = (times[next] - t) / h_try;
            traj.states.push(interpolate(sys, &y, &step, h_try, theta)?);
            next += 1;
        }
        if next < times.len() && times[next] == t_new {
            traj.states.push(step.y_next.clone());
            next += 1;
        }
        t = t_new;
        y = step.y_next;
        k1 = Some(step.k_last);
        h = step.h_next;
    }
    Ok(())
}

/// Appends `extra` zero channels along axis 1 of `x[B, C, ...]`.
pub fn augment<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, extra: usize) -> Result<Tensor<T>> {
    if extra == 0 {
        return Ok(x.clone());
    }
    if x.rank() < 2 {
        return Err(Error::dim("augment", format!("input {:?}", x.shape())));
    }
    let mut shape = x.shape().to_vec();
    shape[1] = extra;
    tape.concat(&[x, &Tensor::zeros(&shape)], 1)
}

/// Drops augmentation channels, keeping the first `channels` of axis 1.
pub fn project<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    tape.narrow(x, 1, 0, channels)
}

pub(crate) fn to_scalar<T: Scalar>(v: f64) -> T {
    lit(v)
}
