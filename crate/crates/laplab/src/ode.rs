//! Fixed-step RK4 integration with boundary localization.
//!
//! The trajectories integrated here are piecewise smooth: the derivative
//! field switches when a queue empties, a pool fills, or an occupancy hits
//! zero. Steps that cross a constraint are shortened by bisection so the
//! state lands on the boundary (within the boundary tolerance), is clipped
//! exactly onto it, and continues under the new regime.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("integration stalled near a boundary at t = {t}: suspected chattering")]
    Chattering { t: f64 },
    #[error("state left the feasible region by {violation:.3e} at t = {t}")]
    InvalidState { t: f64, violation: f64 },
}

/// Dynamics restricted to a polyhedral feasible region.
pub trait BoundedDynamics {
    fn dim(&self) -> usize;
    /// Derivative at `y`; must tolerate states within the clip tolerance of
    /// the boundary (including slightly outside).
    fn derivative(&self, y: &[f64], dy: &mut [f64]);
    /// Largest constraint violation at `y`; zero inside the region.
    fn violation(&self, y: &[f64]) -> f64;
    /// Snap small violations onto the boundary.
    fn clip(&self, y: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    /// Nominal step size.
    pub step: f64,
    /// Boundary tolerance: violations at most this large are clipped away.
    pub boundary_tol: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl {
            step: 1e-3,
            boundary_tol: 1e-9,
        }
    }
}

fn rk4_step<D: BoundedDynamics>(dynamics: &D, y: &[f64], h: f64, out: &mut Vec<f64>) {
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    dynamics.derivative(y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    dynamics.derivative(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    dynamics.derivative(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    dynamics.derivative(&tmp, &mut k4);
    out.clear();
    out.extend(
        (0..n).map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])),
    );
}

/// Integrate from `y0` to `horizon`, invoking `on_point(t, y)` at `t = 0` and
/// after every accepted step.
pub fn integrate<D: BoundedDynamics>(
    dynamics: &D,
    y0: &[f64],
    horizon: f64,
    ctrl: StepControl,
    mut on_point: impl FnMut(f64, &[f64]),
) -> Result<(), OdeError> {
    assert_eq!(y0.len(), dynamics.dim());
    let mut y = y0.to_vec();
    let initial_violation = dynamics.violation(&y);
    if initial_violation > ctrl.boundary_tol {
        return Err(OdeError::InvalidState {
            t: 0.0,
            violation: initial_violation,
        });
    }
    dynamics.clip(&mut y);
    let mut t = 0.0;
    on_point(t, &y);
    let mut trial = Vec::with_capacity(y.len());
    let mut stalls = 0u32;
    while t < horizon - 1e-12 {
        let full = ctrl.step.min(horizon - t);
        rk4_step(dynamics, &y, full, &mut trial);
        let mut taken = full;
        if dynamics.violation(&trial) > ctrl.boundary_tol {
            // Bisect the step length to land just past the boundary, then
            // clip onto it.
            let mut lo = 0.0;
            let mut hi = full;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                rk4_step(dynamics, &y, mid, &mut trial);
                if dynamics.violation(&trial) > ctrl.boundary_tol {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            rk4_step(dynamics, &y, hi, &mut trial);
            taken = hi;
        }
        let violation = dynamics.violation(&trial);
        if violation > 100.0 * ctrl.boundary_tol {
            return Err(OdeError::InvalidState {
                t: t + taken,
                violation,
            });
        }
        dynamics.clip(&mut trial);
        if taken < 1e-10 {
            stalls += 1;
            if stalls > 1000 {
                return Err(OdeError::Chattering { t });
            }
        } else {
            stalls = 0;
        }
        t += taken;
        std::mem::swap(&mut y, &mut trial);
        on_point(t, &y);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// dy/dt = -1 above zero, 0 at the boundary; feasible region y >= 0.
    struct DrainToZero;

    impl BoundedDynamics for DrainToZero {
        fn dim(&self) -> usize {
            1
        }
        fn derivative(&self, y: &[f64], dy: &mut [f64]) {
            dy[0] = if y[0] > 1e-9 { -1.0 } else { 0.0 };
        }
        fn violation(&self, y: &[f64]) -> f64 {
            (-y[0]).max(0.0)
        }
        fn clip(&self, y: &mut [f64]) {
            if y[0] < 0.0 {
                y[0] = 0.0;
            }
        }
    }

    #[test]
    fn drain_hits_zero_and_stays() {
        let mut last = (0.0, 1.0);
        integrate(
            &DrainToZero,
            &[0.25],
            1.0,
            StepControl::default(),
            |t, y| last = (t, y[0]),
        )
        .unwrap();
        assert!((last.0 - 1.0).abs() < 1e-9);
        assert!(last.1.abs() < 1e-9);
    }

    #[test]
    fn exponential_decay_accuracy() {
        struct Decay;
        impl BoundedDynamics for Decay {
            fn dim(&self) -> usize {
                1
            }
            fn derivative(&self, y: &[f64], dy: &mut [f64]) {
                dy[0] = -y[0];
            }
            fn violation(&self, _y: &[f64]) -> f64 {
                0.0
            }
            fn clip(&self, _y: &mut [f64]) {}
        }
        let mut last = 0.0;
        integrate(&Decay, &[1.0], 2.0, StepControl::default(), |_, y| {
            last = y[0]
        })
        .unwrap();
        assert!((last - (-2.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let err = integrate(
            &DrainToZero,
            &[-0.5],
            1.0,
            StepControl::default(),
            |_, _| {},
        )
        .unwrap_err();
        assert!(matches!(err, OdeError::InvalidState { .. }));
    }
}
