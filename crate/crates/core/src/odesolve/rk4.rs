use super::{ensure_finite, to_scalar, OdeSystem};
use crate::error::Result;
use crate::scalar::Scalar;

/// One classical four-stage Runge–Kutta step.
pub fn rk4_step<T: Scalar, S: OdeSystem<T>>(sys: &S, y: &S::State, t: f64, h: f64) -> Result<S::State> {
    let th = |dt: f64| to_scalar::<T>(t + dt);
    let half: T = to_scalar(h / 2.0);
    let k1 = sys.derivative(y, th(0.0))?;
    ensure_finite(sys.values(&k1), t, h, "stage 1")?;
    let y2 = sys.combine(y, &[(half, &k1)])?;
    let k2 = sys.derivative(&y2, th(h / 2.0))?;
    ensure_finite(sys.values(&k2), t, h, "stage 2")?;
    let y3 = sys.combine(y, &[(half, &k2)])?;
    let k3 = sys.derivative(&y3, th(h / 2.0))?;
    ensure_finite(sys.values(&k3), t, h, "stage 3")?;
    let y4 = sys.combine(y, &[(to_scalar(h), &k3)])?;
    let k4 = sys.derivative(&y4, th(h))?;
    ensure_finite(sys.values(&k4), t, h, "stage 4")?;
    let sixth: T = to_scalar(h / 6.0);
    let third: T = to_scalar(h / 3.0);
    sys.combine(y, &[(sixth, &k1), (third, &k2), (third, &k3), (sixth, &k4)])
}
