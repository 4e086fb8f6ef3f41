use super::{ensure_finite, to_scalar, OdeSystem, SolverConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

/// Fifth-order minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Coefficients of the fourth-order continuous extension (Hairer, Nørsett
/// and Wanner); stage 2 does not contribute.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

const GROW_MAX: f64 = 5.0;
const SHRINK_MIN: f64 = 0.2;

pub struct Dopri5Step<S> {
    pub y_next: S,
    pub err_norm: f64,
    pub h_next: f64,
    pub accepted: bool,
    /// `f(y_next, t + h)`; the first stage of the following step.
    pub k_last: S,
    /// `f(y, t)`; reusable when the step is retried with a smaller `h`.
    pub k_first: S,
    /// Stages 2 to 6, kept for dense output.
    pub stages: Vec<S>,
}

/// One Dormand–Prince 5(4) step with error control.
///
/// `k1`, when given, must be `f(y, t)` (first-same-as-last reuse).
pub fn dopri5_step<T: Scalar, S: OdeSystem<T>>(
    sys: &S,
    y: &S::State,
    t: f64,
    h: f64,
    cfg: &SolverConfig,
    k1: Option<S::State>,
) -> Result<Dopri5Step<S::State>> {
    let k1 = match k1 {
        Some(k) => k,
        None => sys.derivative(y, to_scalar(t))?,
    };
    ensure_finite(sys.values(&k1), t, h, "stage 1")?;
    let mut ks: Vec<S::State> = vec![k1];
    for stage in 1..7 {
        let terms: Vec<(T, &S::State)> = A[stage]
            .iter()
            .zip(&ks)
            .filter(|(a, _)| **a != 0.0)
            .map(|(a, k)| (to_scalar(h * a), k))
            .collect();
        let ys = sys.combine(y, &terms)?;
        let k = sys.derivative(&ys, to_scalar(t + C[stage] * h))?;
        ensure_finite(sys.values(&k), t, h, &format!("stage {}", stage + 1))?;
        if stage == 6 {
            // stage 7 is evaluated at the fifth-order solution
            return finish(sys, y, ys, ks, k, t, h, cfg);
        }
        ks.push(k);
    }
    unreachable!("seven stages always return")
}

#[allow(clippy::too_many_arguments)]
fn finish<T: Scalar, S: OdeSystem<T>>(
    sys: &S,
    y: &S::State,
    y_next: S::State,
    mut ks: Vec<S::State>,
    k7: S::State,
    t: f64,
    h: f64,
    cfg: &SolverConfig,
) -> Result<Dopri5Step<S::State>> {
    let y0 = sys.values(y);
    let y1 = sys.values(&y_next);
    let stage_vals: Vec<&[T]> = ks.iter().map(|k| sys.values(k)).chain([sys.values(&k7)]).collect();
    let mut acc = 0.0;
    for i in 0..y0.len() {
        let mut e = 0.0;
        for (j, w) in E.iter().enumerate() {
            e += w * stage_vals[j][i].to_f64_lossy();
        }
        let e = h * e;
        let scale = cfg.atol + cfg.rtol * y0[i].to_f64_lossy().abs().max(y1[i].to_f64_lossy().abs());
        acc += (e / scale).powi(2);
    }
    let err_norm = if y0.is_empty() {
        0.0
    } else {
        (acc / y0.len() as f64).sqrt()
    };
    if !err_norm.is_finite() {
        return Err(Error::Integration {
            t,
            h,
            reason: "non-finite error estimate".into(),
        });
    }
    let accepted = err_norm <= 1.0;
    let factor = if err_norm == 0.0 {
        GROW_MAX
    } else {
        (cfg.safety * err_norm.powf(-0.2)).clamp(SHRINK_MIN, GROW_MAX)
    };
    let h_next = (h * factor).clamp(cfg.h_min, cfg.h_max);
    if !accepted && h <= cfg.h_min {
        return Err(Error::Stiffness { t, h });
    }
    let k_first = ks.remove(0);
    Ok(Dopri5Step {
        y_next,
        err_norm,
        h_next,
        accepted,
        k_last: k7,
        k_first,
        stages: ks,
    })
}

/// State at `t + θ·h` inside an accepted step from `y` at `t`, from the
/// continuous extension of the step. Exact at `θ = 0` and matches
/// `y_next` at `θ = 1` up to rounding.
pub fn interpolate<T: Scalar, S: OdeSystem<T>>(
    sys: &S,
    y: &S::State,
    step: &Dopri5Step<S::State>,
    h: f64,
    theta: f64,
) -> Result<S::State> {
    let b = theta * (1.0 - theta);
    let c_y = theta - b + 2.0 * b * theta;
    let tail = b * theta * (1.0 - theta) * h;
    let mut ks: Vec<&S::State> = vec![&step.k_first];
    ks.extend(step.stages.iter());
    ks.push(&step.k_last);
    let mut terms: Vec<(T, &S::State)> = vec![(to_scalar(c_y), &step.y_next), (to_scalar(-c_y), y)];
    for (j, k) in ks.into_iter().enumerate() {
        let mut c = tail * D[j];
        if j == 0 {
            c += h * (b - b * theta);
        }
        if j == 6 {
            c -= h * b * theta;
        }
        if c != 0.0 {
            terms.push((to_scalar(c), k));
        }
    }
    sys.combine(y, &terms)
}
