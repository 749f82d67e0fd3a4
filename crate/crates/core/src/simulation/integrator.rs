use nalgebra::DVector;
use thiserror::Error;

/// Any state component beyond this magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrationError<E> {
    #[error("step size must be finite and positive, got {0}")]
    BadStep(f64),
    #[error("state diverged at t = {t}: component {index} = {value}")]
    Diverged { t: f64, index: usize, value: f64 },
    #[error(transparent)]
    Vector(E),
}

/// One classical fourth-order Runge–Kutta step of `ẋ = f(t, x)`.
pub fn rk4_step<E, F>(f: &mut F, t: f64, x: &DVector<f64>, dt: f64) -> Result<DVector<f64>, IntegrationError<E>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, E>,
{
    let k1 = f(t, x).map_err(IntegrationError::Vector)?;
    rk4_step_from(f, t, x, dt, k1)
}

/// RK4 step reusing an already evaluated `k1 = f(t, x)`.
pub fn rk4_step_from<E, F>(
    f: &mut F,
    t: f64,
    x: &DVector<f64>,
    dt: f64,
    k1: DVector<f64>,
) -> Result<DVector<f64>, IntegrationError<E>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, E>,
{
    if !(dt.is_finite() && dt > 0.0) {
        return Err(IntegrationError::BadStep(dt));
    }
    let half = 0.5 * dt;
    let k2 = f(t + half, &(x + half * &k1)).map_err(IntegrationError::Vector)?;
    let k3 = f(t + half, &(x + half * &k2)).map_err(IntegrationError::Vector)?;
    let k4 = f(t + dt, &(x + dt * &k3)).map_err(IntegrationError::Vector)?;
    let next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    check_bounded(&next, t + dt)?;
    Ok(next)
}

pub fn check_bounded<E>(x: &DVector<f64>, t: f64) -> Result<(), IntegrationError<E>> {
    match x
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
    {
        Some((index, &value)) => Err(IntegrationError::Diverged { t, index, value }),
        None => Ok(()),
    }
}
