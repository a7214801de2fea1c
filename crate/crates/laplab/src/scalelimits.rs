//! Refined scaling limits of the deviation process around the equilibrium.
//!
//! Write `F^r(t) = (Psi_ij(t) - r psi*_ij, Q_i(t))` for the unscaled
//! deviation from the equilibrium center and pick a space scale
//! `h(r) = r^gamma` with `1/2 < gamma <= 1`. Two rescalings of `F^r` have
//! deterministic limits:
//!
//! * **Hydrodynamic**: space divided by `h(r)`, time compressed by
//!   `h(r)/r`. The limit keeps each class total `x_i` frozen, drains queues
//!   and fills under-occupied pools at piecewise-constant rates, and reaches
//!   a terminal state after finite time. The terminal state is a fixed
//!   linear image `L` of the initial deviation: queues empty, pool sums
//!   zero except at the lowest-priority pool, class totals preserved.
//! * **Local fluid**: space divided by `h(r)` at unscaled time. On the
//!   constraint manifold (the image of `L`) the occupancy deviations are a
//!   linear function `L'` of the class totals, which obey the linear ODE
//!   `dx/dt = -B x`; all eigenvalues of `B` have positive real part, giving
//!   a uniform exponential envelope `|f(t)| <= c1 e^(-c2 t) |f(0)|`.
//!
//! Both `L'` and the terminal map are computed by leaf elimination on the
//! activity tree: the constraint system has `I + J - 1` equations in the
//! `I + J - 1` per-activity unknowns and is triangular in tree order.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{ModelError, Network};
use crate::ode::{self, BoundedDynamics, OdeError, StepControl};
use crate::priority::{check_assumption3, compute_equilibrium, EquilibriumPoint, PriorityOrder};
use crate::rng::{run_rng, stream_rng};
use crate::simulator::{
    simulate_horizon_with, InitialState, SimConfig, SimError, SystemState,
};
use crate::stats::median;

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("slack assumption violated: {0}")]
    Assumption3(String),
    #[error("deviation spectrum does not decay: min real part {0}")]
    NonDecayingSpectrum(f64),
    #[error("scale exponent gamma = {0} outside (1/2, 1]")]
    InvalidScaleExponent(f64),
    #[error("deviation state violates invariants: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Integration(#[from] OdeError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Real-valued deviation from the equilibrium: occupancy components per
/// activity (centered at `psi*`), queue components per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationState {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
}

impl DeviationState {
    pub fn zero(net: &Network) -> Self {
        DeviationState {
            u: vec![0.0; net.num_activities()],
            w: vec![0.0; net.num_classes()],
        }
    }

    /// Class totals `z_i = w_i + sum_j u_ij`.
    pub fn z(&self, net: &Network) -> Vec<f64> {
        let mut z = self.w.clone();
        for (k, a) in net.activities().iter().enumerate() {
            z[a.class] += self.u[k];
        }
        z
    }

    /// Euclidean norm of the full deviation vector.
    pub fn norm(&self) -> f64 {
        self.u
            .iter()
            .chain(self.w.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn distance(&self, other: &DeviationState) -> f64 {
        let du = self
            .u
            .iter()
            .zip(&other.u)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        let dw = self
            .w
            .iter()
            .zip(&other.w)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        (du + dw).sqrt()
    }

    /// Check the centering invariants: nonnegative queues, nonpositive pool
    /// sums at every pool that is full at equilibrium.
    pub fn validate(&self, net: &Network, po: &PriorityOrder) -> Result<(), ScaleError> {
        if self.u.len() != net.num_activities() || self.w.len() != net.num_classes() {
            return Err(ScaleError::InvalidState(
                "deviation dimensions do not match the network".to_string(),
            ));
        }
        for (i, &wv) in self.w.iter().enumerate() {
            if wv < -1e-9 {
                return Err(ScaleError::InvalidState(format!(
                    "queue component of class {} is negative",
                    i + 1
                )));
            }
        }
        let slack_pool = po.lowest_priority_pool(net);
        for j in 0..net.num_pools() {
            if j == slack_pool {
                continue;
            }
            let sum: f64 = net.pool_activities(j).iter().map(|&k| self.u[k]).sum();
            if sum > 1e-9 {
                return Err(ScaleError::InvalidState(format!(
                    "occupancy deviations of pool {} sum to {sum:.3e} > 0",
                    j + 1
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The maps L and L', and the reduced generator B
// ---------------------------------------------------------------------------

/// Occupancy deviations with the given class totals: the unique solution of
/// `sum_j c_ij = z_i` per class and `sum_i c_ij = 0` per pool other than the
/// lowest-priority one, found by leaf elimination on the tree.
pub fn map_l_prime(z: &[f64], net: &Network, po: &PriorityOrder) -> Vec<f64> {
    let nc = net.num_classes();
    let np = net.num_pools();
    let slack_pool = po.lowest_priority_pool(net);

    let mut degree = vec![0usize; nc + np];
    let mut edge_alive = vec![true; net.num_activities()];
    for a in net.activities() {
        degree[a.class] += 1;
        degree[nc + a.pool] += 1;
    }
    let mut class_res = z.to_vec();
    let mut pool_res = vec![0.0; np];
    let mut c = vec![0.0; net.num_activities()];
    let mut remaining = net.num_activities();
    while remaining > 0 {
        let mut progressed = false;
        for k in 0..net.num_activities() {
            if !edge_alive[k] {
                continue;
            }
            let a = net.activity(k);
            let class_leaf = degree[a.class] == 1;
            let pool_leaf = degree[nc + a.pool] == 1 && a.pool != slack_pool;
            if class_leaf {
                c[k] = class_res[a.class];
                pool_res[a.pool] -= c[k];
            } else if pool_leaf {
                c[k] = pool_res[a.pool];
                class_res[a.class] -= c[k];
            } else {
                continue;
            }
            edge_alive[k] = false;
            degree[a.class] -= 1;
            degree[nc + a.pool] -= 1;
            remaining -= 1;
            progressed = true;
        }
        // A tree always exposes an eligible leaf.
        assert!(progressed, "leaf elimination stalled on a non-tree");
    }
    c
}

/// Project a deviation onto the post-transient manifold: queues empty, class
/// totals preserved, balanced pools except the lowest-priority one.
pub fn map_l(dev: &DeviationState, net: &Network, po: &PriorityOrder) -> DeviationState {
    DeviationState {
        u: map_l_prime(&dev.z(net), net, po),
        w: vec![0.0; net.num_classes()],
    }
}

/// Dense forms of the deviation maps.
#[derive(Debug, Clone)]
pub struct LinearMaps {
    /// Projection onto the manifold, acting on `(u, w)` stacked vectors.
    pub l: DMatrix<f64>,
    /// Class totals to occupancy deviations, `|E| x I`.
    pub l_prime: DMatrix<f64>,
    /// Reduced generator: `dz/dt = -B z` on the manifold, `I x I`.
    pub b: DMatrix<f64>,
}

/// Uniform exponential envelope for local-fluid trajectories.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayConstants {
    pub c1: f64,
    pub c2: f64,
}

/// Build `L`, `L'`, and the reduced generator `B`. Requires the slack
/// assumption: every activity used, exactly one slack pool.
pub fn lfm_matrix(net: &Network, po: &PriorityOrder) -> Result<LinearMaps, ScaleError> {
    let eq = compute_equilibrium(net, po);
    let a3 = check_assumption3(net, po, &eq);
    if !a3.holds {
        return Err(ScaleError::Assumption3(a3.diagnostic));
    }
    let nc = net.num_classes();
    let ne = net.num_activities();

    let mut l_prime = DMatrix::<f64>::zeros(ne, nc);
    for col in 0..nc {
        let mut z = vec![0.0; nc];
        z[col] = 1.0;
        let c = map_l_prime(&z, net, po);
        for (row, &v) in c.iter().enumerate() {
            l_prime[(row, col)] = v;
        }
    }

    // z = Z (u, w): class totals of a stacked deviation vector.
    let mut z_map = DMatrix::<f64>::zeros(nc, ne + nc);
    for (k, a) in net.activities().iter().enumerate() {
        z_map[(a.class, k)] = 1.0;
    }
    for i in 0..nc {
        z_map[(i, ne + i)] = 1.0;
    }
    let top = &l_prime * &z_map;
    let mut l = DMatrix::<f64>::zeros(ne + nc, ne + nc);
    l.view_mut((0, 0), (ne, ne + nc)).copy_from(&top);

    // B_ik = sum_j mu_ij [L' e_k]_ij.
    let mut b = DMatrix::<f64>::zeros(nc, nc);
    for col in 0..nc {
        for (k, a) in net.activities().iter().enumerate() {
            b[(a.class, col)] += a.mu * l_prime[(k, col)];
        }
    }

    Ok(LinearMaps { l, l_prime, b })
}

impl LinearMaps {
    /// Apply the projection to a deviation state.
    pub fn apply_l(&self, dev: &DeviationState) -> DeviationState {
        let ne = self.l_prime.nrows();
        let stacked: Vec<f64> = dev.u.iter().chain(dev.w.iter()).cloned().collect();
        let out = &self.l * DMatrix::from_column_slice(stacked.len(), 1, &stacked);
        DeviationState {
            u: (0..ne).map(|k| out[(k, 0)]).collect(),
            w: vec![0.0; stacked.len() - ne],
        }
    }

    /// JSON with dense row-major matrices and index legends.
    pub fn to_json(&self, net: &Network) -> String {
        #[derive(Serialize)]
        struct MapsFile {
            activities: Vec<(usize, usize)>,
            classes: usize,
            l: Vec<Vec<f64>>,
            l_prime: Vec<Vec<f64>>,
            b: Vec<Vec<f64>>,
        }
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
                .collect()
        };
        let file = MapsFile {
            activities: net
                .activities()
                .iter()
                .map(|a| (a.class + 1, a.pool + 1))
                .collect(),
            classes: net.num_classes(),
            l: rows(&self.l),
            l_prime: rows(&self.l_prime),
            b: rows(&self.b),
        };
        serde_json::to_string_pretty(&file).expect("maps serialization cannot fail")
    }
}

// ---------------------------------------------------------------------------
// Hydrodynamic integration
// ---------------------------------------------------------------------------

struct HydroDynamics<'a> {
    net: &'a Network,
    po: &'a PriorityOrder,
    /// Frozen freed-service budgets per pool.
    service: Vec<f64>,
    /// Drain rate per activity, `mu_ij psi*_ij`.
    drain: Vec<f64>,
    slack_pool: usize,
}

impl<'a> HydroDynamics<'a> {
    fn new(net: &'a Network, po: &'a PriorityOrder, eq: &EquilibriumPoint) -> Self {
        let drain: Vec<f64> = net
            .activities()
            .iter()
            .enumerate()
            .map(|(k, a)| a.mu * eq.psi_star[k])
            .collect();
        let service: Vec<f64> = (0..net.num_pools())
            .map(|j| net.pool_activities(j).iter().map(|&k| drain[k]).sum())
            .collect();
        HydroDynamics {
            net,
            po,
            service,
            drain,
            slack_pool: po.lowest_priority_pool(net),
        }
    }
}

const REGIME_TOL: f64 = 1e-9;
/// Queue classification threshold. Boundary clipping parks pool overshoot
/// in the queue components (preserving class totals); the coarser threshold
/// keeps those sub-1e-8 leftovers from registering as real queues.
const QUEUE_TOL: f64 = 1e-7;

impl BoundedDynamics for HydroDynamics<'_> {
    fn dim(&self) -> usize {
        self.net.num_activities() + self.net.num_classes()
    }

    fn derivative(&self, y: &[f64], dy: &mut [f64]) {
        let ne = self.net.num_activities();
        let (u, w) = y.split_at(ne);
        let mut inflow = self.net.lambda().to_vec();
        let mut freed = self.service.clone();
        let pool_sum: Vec<f64> = (0..self.net.num_pools())
            .map(|j| {
                self.net
                    .pool_activities(j)
                    .iter()
                    .map(|&k| u[k])
                    .sum::<f64>()
            })
            .collect();
        let mut starts = vec![0.0; ne];
        for &k in self.po.activities_by_rank() {
            let a = self.net.activity(k);
            // The slack pool keeps idle servers throughout the hydro window,
            // so it never blocks arrivals.
            let slack =
                a.pool == self.slack_pool || pool_sum[a.pool] < -REGIME_TOL;
            let queued = w[a.class] > QUEUE_TOL;
            let rate = if queued {
                let service = freed[a.pool];
                freed[a.pool] = 0.0;
                let arrival = if slack { inflow[a.class] } else { 0.0 };
                inflow[a.class] -= arrival;
                service + arrival
            } else if slack {
                let arrival = inflow[a.class];
                inflow[a.class] = 0.0;
                arrival
            } else {
                let rate = inflow[a.class].min(freed[a.pool]);
                inflow[a.class] -= rate;
                freed[a.pool] -= rate;
                rate
            };
            starts[k] = rate;
        }
        for k in 0..ne {
            dy[k] = starts[k] - self.drain[k];
        }
        for i in 0..self.net.num_classes() {
            dy[ne + i] = self.net.lambda()[i];
        }
        for (k, a) in self.net.activities().iter().enumerate() {
            dy[ne + a.class] -= starts[k];
        }
    }

    fn violation(&self, y: &[f64]) -> f64 {
        let ne = self.net.num_activities();
        let mut v: f64 = 0.0;
        for &wv in &y[ne..] {
            v = v.max(-wv);
        }
        for j in 0..self.net.num_pools() {
            if j == self.slack_pool {
                continue;
            }
            let sum: f64 = self.net.pool_activities(j).iter().map(|&k| y[k]).sum();
            v = v.max(sum);
        }
        v.max(0.0)
    }

    fn clip(&self, y: &mut [f64]) {
        // Projections shuffle mass between u and w so the class totals (and
        // with them the conserved x) are untouched.
        let ne = self.net.num_activities();
        for i in 0..self.net.num_classes() {
            if y[ne + i] < 0.0 {
                let k = self
                    .net
                    .class_activities(i)
                    .iter()
                    .copied()
                    .min_by_key(|&k| self.po.activity_rank(k))
                    .expect("class has an activity");
                y[k] += y[ne + i];
                y[ne + i] = 0.0;
            }
        }
        for j in 0..self.net.num_pools() {
            if j == self.slack_pool {
                continue;
            }
            let acts = self.net.pool_activities(j);
            let sum: f64 = acts.iter().map(|&k| y[k]).sum();
            if sum > 0.0 {
                let share = sum / acts.len() as f64;
                for &k in acts {
                    y[k] -= share;
                    y[ne + self.net.activity(k).class] += share;
                }
            }
        }
    }
}

/// Deviation trajectory sampled at every accepted step.
#[derive(Debug, Clone)]
pub struct DeviationTrajectory {
    pub times: Vec<f64>,
    states: Vec<Vec<f64>>,
    ne: usize,
}

impl DeviationTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, idx: usize) -> DeviationState {
        DeviationState {
            u: self.states[idx][..self.ne].to_vec(),
            w: self.states[idx][self.ne..].to_vec(),
        }
    }

    pub fn final_state(&self) -> DeviationState {
        self.state(self.states.len() - 1)
    }

    /// Linear interpolation at `t`, clamped to the trajectory range.
    pub fn sample(&self, t: f64) -> DeviationState {
        let raw = match self.times.binary_search_by(|probe| probe.total_cmp(&t)) {
            Ok(i) => self.states[i].clone(),
            Err(0) => self.states[0].clone(),
            Err(i) if i >= self.times.len() => self.states.last().unwrap().clone(),
            Err(i) => {
                let (t0, t1) = (self.times[i - 1], self.times[i]);
                let wgt = (t - t0) / (t1 - t0);
                self.states[i - 1]
                    .iter()
                    .zip(&self.states[i])
                    .map(|(a, b)| a + wgt * (b - a))
                    .collect()
            }
        };
        DeviationState {
            u: raw[..self.ne].to_vec(),
            w: raw[self.ne..].to_vec(),
        }
    }
}

/// Integrate the hydrodynamic model from `initial` over `[0, horizon]`
/// (hydrodynamic time units).
pub fn integrate_hydro(
    initial: &DeviationState,
    net: &Network,
    po: &PriorityOrder,
    horizon: f64,
    ctrl: StepControl,
) -> Result<DeviationTrajectory, ScaleError> {
    initial.validate(net, po)?;
    let eq = compute_equilibrium(net, po);
    let dynamics = HydroDynamics::new(net, po, &eq);
    let y0: Vec<f64> = initial.u.iter().chain(initial.w.iter()).cloned().collect();
    let mut times = Vec::new();
    let mut states = Vec::new();
    ode::integrate(&dynamics, &y0, horizon, ctrl, |t, y| {
        times.push(t);
        states.push(y.to_vec());
    })?;
    Ok(DeviationTrajectory {
        times,
        states,
        ne: net.num_activities(),
    })
}

// ---------------------------------------------------------------------------
// Local fluid model
// ---------------------------------------------------------------------------

/// Local-fluid trajectory: class totals and the implied occupancy
/// deviations on a fixed grid; queues are identically zero.
#[derive(Debug, Clone)]
pub struct LfmTrajectory {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
}

impl LfmTrajectory {
    pub fn state(&self, idx: usize, net: &Network) -> DeviationState {
        DeviationState {
            u: self.psi[idx].clone(),
            w: vec![0.0; net.num_classes()],
        }
    }
}

/// Evolve the local fluid model by the matrix exponential: the initial
/// deviation is projected through `L`, then `x(t) = exp(-B t) x(0)` and
/// `psi(t) = L' x(t)`.
pub fn integrate_lfm(
    initial: &DeviationState,
    maps: &LinearMaps,
    net: &Network,
    horizon: f64,
    dt: f64,
) -> LfmTrajectory {
    let projected = maps.apply_l(initial);
    let mut z = DMatrix::from_column_slice(net.num_classes(), 1, &{
        let mut z = vec![0.0; net.num_classes()];
        for (k, a) in net.activities().iter().enumerate() {
            z[a.class] += projected.u[k];
        }
        z
    });
    let stepper = (-(maps.b.clone()) * dt).exp();
    let mut traj = LfmTrajectory {
        times: Vec::new(),
        x: Vec::new(),
        psi: Vec::new(),
    };
    let steps = (horizon / dt).round() as usize;
    for s in 0..=steps {
        let xs: Vec<f64> = z.iter().cloned().collect();
        let psi = &maps.l_prime * &z;
        traj.times.push(s as f64 * dt);
        traj.x.push(xs);
        traj.psi.push(psi.iter().cloned().collect());
        z = &stepper * z;
    }
    traj
}

/// Independent route for the same trajectory: classical RK4 on
/// `dx/dt = -B x` with a fine internal step.
pub fn integrate_lfm_rk(
    initial: &DeviationState,
    maps: &LinearMaps,
    net: &Network,
    horizon: f64,
    dt: f64,
) -> LfmTrajectory {
    let projected = maps.apply_l(initial);
    let nc = net.num_classes();
    let mut x = vec![0.0; nc];
    for (k, a) in net.activities().iter().enumerate() {
        x[a.class] += projected.u[k];
    }
    let b = &maps.b;
    let deriv = |x: &[f64]| -> Vec<f64> {
        (0..nc)
            .map(|i| -(0..nc).map(|k| b[(i, k)] * x[k]).sum::<f64>())
            .collect()
    };
    let inner = 8usize;
    let h = dt / inner as f64;
    let mut traj = LfmTrajectory {
        times: Vec::new(),
        x: Vec::new(),
        psi: Vec::new(),
    };
    let steps = (horizon / dt).round() as usize;
    for s in 0..=steps {
        let psi: Vec<f64> = {
            let xv = DMatrix::from_column_slice(nc, 1, &x);
            (&maps.l_prime * xv).iter().cloned().collect()
        };
        traj.times.push(s as f64 * dt);
        traj.x.push(x.clone());
        traj.psi.push(psi);
        for _ in 0..inner {
            let k1 = deriv(&x);
            let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
            let k2 = deriv(&x2);
            let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * h * k).collect();
            let k3 = deriv(&x3);
            let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
            let k4 = deriv(&x4);
            for i in 0..nc {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
    traj
}

/// Derive the exponential envelope from the reduced generator: `c2` is the
/// slowest eigenvalue decay rate less a 1% margin; `c1` is the numerical
/// supremum of the semigroup transient growth against that envelope,
/// validated on sampled manifold trajectories.
pub fn decay_constants(maps: &LinearMaps, net: &Network) -> Result<DecayConstants, ScaleError> {
    let eigen = maps.b.complex_eigenvalues();
    let min_re = eigen.iter().map(|e| e.re).fold(f64::INFINITY, f64::min);
    if min_re <= 0.0 {
        return Err(ScaleError::NonDecayingSpectrum(min_re));
    }
    let c2 = 0.99 * min_re;

    let nc = net.num_classes();
    let ne = net.num_activities();
    // z = Z psi restricted to the manifold; the envelope tracks
    // psi(t) = L' exp(-B t) Z psi(0).
    let mut z_map = DMatrix::<f64>::zeros(nc, ne);
    for (k, a) in net.activities().iter().enumerate() {
        z_map[(a.class, k)] = 1.0;
    }
    let spectral_norm = |m: &DMatrix<f64>| -> f64 {
        m.clone().svd(false, false).singular_values[0]
    };
    let t_max = 40.0 / c2;
    let grid = 2000usize;
    let mut c1: f64 = 1.0;
    for s in 0..=grid {
        let t = t_max * s as f64 / grid as f64;
        let propagator = &maps.l_prime * (-(maps.b.clone()) * t).exp() * &z_map;
        c1 = c1.max(spectral_norm(&propagator) * (c2 * t).exp());
    }
    let mut c1 = c1 * 1.005;

    // Validate on sampled trajectories, inflating c1 if a sample exceeds it.
    let mut rng = run_rng(0x1f);
    for _ in 0..50 {
        let z: Vec<f64> = (0..nc).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let psi0 = map_l_prime_from_matrix(maps, &z);
        let dev0 = DeviationState {
            u: psi0,
            w: vec![0.0; nc],
        };
        let norm0 = dev0.norm();
        if norm0 < 1e-12 {
            continue;
        }
        let traj = integrate_lfm(&dev0, maps, net, t_max.min(60.0), 0.05);
        for (idx, t) in traj.times.iter().enumerate() {
            let n = traj.state(idx, net).norm();
            let bound = norm0 * (-c2 * t).exp();
            if n > c1 * bound {
                c1 = n / bound * 1.001;
            }
        }
    }
    Ok(DecayConstants { c1, c2 })
}

fn map_l_prime_from_matrix(maps: &LinearMaps, z: &[f64]) -> Vec<f64> {
    let zv = DMatrix::from_column_slice(z.len(), 1, z);
    (&maps.l_prime * zv).iter().cloned().collect()
}

// ---------------------------------------------------------------------------
// Simulation vs. limit-model comparison
// ---------------------------------------------------------------------------

/// One simulated replication compared against both limit models.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub r: u64,
    pub gamma: f64,
    /// Stream identifier of the replication, `r * 2^20 + replication`.
    pub seed: u64,
    pub sup_dist_lfm: f64,
    pub sup_dist_hydro: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingComparison {
    pub rows: Vec<ComparisonRow>,
    /// Per-r medians across replications, ordered like the input list.
    pub median_lfm: Vec<f64>,
    pub median_hydro: Vec<f64>,
}

impl ScalingComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,gamma,seed,sup_dist_lfm,sup_dist_hydro\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.r, row.gamma, row.seed, row.sup_dist_lfm, row.sup_dist_hydro
            ));
        }
        out
    }
}

/// Run the scaled chain from an `h(r)`-sized perturbation of the equilibrium
/// and measure the sup distance of the rescaled deviations to the local
/// fluid model (unscaled time) and to the hydrodynamic model (time
/// compressed by `h(r)/r`).
///
/// The perturbation direction `d0` must carry no queue mass: order-`h(r)`
/// queues cannot coexist with the idle servers the slack pool keeps at this
/// scale.
#[allow(clippy::too_many_arguments)]
pub fn compare_scalings(
    net: &Network,
    po: &PriorityOrder,
    eq: &EquilibriumPoint,
    r_values: &[u64],
    gamma: f64,
    replications: usize,
    base_seed: u64,
    d0: &DeviationState,
) -> Result<ScalingComparison, ScaleError> {
    if !(gamma > 0.5 && gamma <= 1.0) {
        return Err(ScaleError::InvalidScaleExponent(gamma));
    }
    d0.validate(net, po)?;
    if d0.w.iter().any(|&w| w.abs() > 1e-12) {
        return Err(ScaleError::InvalidState(
            "comparison perturbations must have empty queues".to_string(),
        ));
    }
    let maps = lfm_matrix(net, po)?;

    let lfm_horizon = 8.0;
    let hydro_horizon = 8.0;
    let grid_step = 0.25;
    let lfm_limit = integrate_lfm(d0, &maps, net, lfm_horizon, grid_step);
    let hydro_limit = integrate_hydro(d0, net, po, hydro_horizon, StepControl::default())?;

    let mut rows = Vec::new();
    for &r in r_values {
        for rep in 0..replications {
            let h = (r as f64).powf(gamma);
            let initial = perturbed_state(net, po, eq, r, h, d0);

            // Local-fluid window: unscaled time, samples past the fast
            // transient.
            let mut rng = stream_rng(base_seed, r, rep as u64);
            let cfg = SimConfig {
                seed: 0,
                horizon: lfm_horizon,
                warmup: 0.0,
                initial: InitialState::Explicit(Box::new(initial.clone())),
                sample_interval: grid_step,
            };
            let (trace, _) = simulate_horizon_with(net, po, eq, r, &cfg, &mut rng)?;
            let mut sup_lfm: f64 = 0.0;
            for (idx, &t) in trace.times.iter().enumerate() {
                if t < 0.5 {
                    continue;
                }
                let dev = trace_deviation(&trace, idx, eq, r, h, net);
                let lim_idx = (t / grid_step).round() as usize;
                let lim = lfm_limit.state(lim_idx.min(lfm_limit.times.len() - 1), net);
                sup_lfm = sup_lfm.max(dev.distance(&lim));
            }

            // Hydrodynamic window: real horizon h/r * T, compressed samples.
            let mut rng = stream_rng(base_seed ^ 0x9e37_79b9_7f4a_7c15, r, rep as u64);
            let compress = h / r as f64;
            let cfg = SimConfig {
                seed: 0,
                horizon: hydro_horizon * compress,
                warmup: 0.0,
                initial: InitialState::Explicit(Box::new(initial)),
                sample_interval: grid_step * compress,
            };
            let (trace, _) = simulate_horizon_with(net, po, eq, r, &cfg, &mut rng)?;
            let mut sup_hydro: f64 = 0.0;
            for (idx, &t) in trace.times.iter().enumerate() {
                let hydro_t = t / compress;
                let dev = trace_deviation(&trace, idx, eq, r, h, net);
                let lim = hydro_limit.sample(hydro_t);
                sup_hydro = sup_hydro.max(dev.distance(&lim));
            }

            rows.push(ComparisonRow {
                r,
                gamma,
                seed: (r << 20) | rep as u64,
                sup_dist_lfm: sup_lfm,
                sup_dist_hydro: sup_hydro,
            });
        }
    }

    let median_of = |f: &dyn Fn(&ComparisonRow) -> f64| -> Vec<f64> {
        r_values
            .iter()
            .map(|&r| {
                let vals: Vec<f64> = rows.iter().filter(|row| row.r == r).map(f).collect();
                median(&vals)
            })
            .collect()
    };
    Ok(ScalingComparison {
        median_lfm: median_of(&|row| row.sup_dist_lfm),
        median_hydro: median_of(&|row| row.sup_dist_hydro),
        rows,
    })
}

/// Integer state at `psi* r + u h`, clamped to capacities.
fn perturbed_state(
    net: &Network,
    po: &PriorityOrder,
    eq: &EquilibriumPoint,
    r: u64,
    h: f64,
    d0: &DeviationState,
) -> SystemState {
    let rf = r as f64;
    let mut psi: Vec<u64> = (0..net.num_activities())
        .map(|k| ((eq.psi_star[k] * rf + d0.u[k] * h).round()).max(0.0) as u64)
        .collect();
    let probe = SystemState::empty(net, r);
    for j in 0..net.num_pools() {
        let cap = probe.capacity(j);
        let mut used: u64 = net.pool_activities(j).iter().map(|&k| psi[k]).sum();
        while used > cap {
            let victim = net
                .pool_activities(j)
                .iter()
                .copied()
                .filter(|&k| psi[k] > 0)
                .max_by_key(|&k| po.activity_rank(k))
                .expect("occupied pool has an occupied activity");
            psi[victim] -= 1;
            used -= 1;
        }
    }
    SystemState::explicit(net, r, psi, vec![0; net.num_classes()])
        .expect("clamped perturbation is a valid state")
}

fn trace_deviation(
    trace: &crate::simulator::Trace,
    idx: usize,
    eq: &EquilibriumPoint,
    r: u64,
    h: f64,
    net: &Network,
) -> DeviationState {
    let rf = r as f64;
    DeviationState {
        u: (0..net.num_activities())
            .map(|k| (trace.psi[idx][k] as f64 - eq.psi_star[k] * rf) / h)
            .collect(),
        w: (0..net.num_classes())
            .map(|i| trace.q[idx][i] as f64 / h)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priority::{assign_priorities, TieBreak};

    fn net_1() -> Network {
        Network::new(vec![0.5], vec![1.0], vec![(0, 0, 1.0)])
    }

    fn net_n() -> Network {
        Network::new(
            vec![0.5, 1.2],
            vec![1.0, 1.0],
            vec![(0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)],
        )
    }

    fn net_w() -> Network {
        Network::new(vec![0.3, 0.4], vec![1.0], vec![(0, 0, 1.0), (1, 0, 2.0)])
    }

    fn po(net: &Network) -> PriorityOrder {
        assign_priorities(net, TieBreak::LowestIndex).unwrap()
    }

    #[test]
    fn map_l_zero_is_zero() {
        let net = net_n();
        let po = po(&net);
        let c = map_l_prime(&[0.0, 0.0], &net, &po);
        assert!(c.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn map_l_net_n_hand_solve() {
        // z = (0.3, -0.1): pool-1 balance forces c_21 = 0, so c_12 = 0.3 and
        // c_22 = -0.1.
        let net = net_n();
        let po = po(&net);
        let c = map_l_prime(&[0.3, -0.1], &net, &po);
        assert!((c[net.activity_index(0, 1).unwrap()] - 0.3).abs() < 1e-12);
        assert!(c[net.activity_index(1, 0).unwrap()].abs() < 1e-12);
        assert!((c[net.activity_index(1, 1).unwrap()] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn map_l_is_idempotent_and_linear() {
        let net = net_n();
        let po = po(&net);
        let mut rng = run_rng(3);
        for _ in 0..100 {
            let dev = DeviationState {
                u: (0..3)
                    .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                    .collect(),
                w: (0..2).map(|_| rng.random::<f64>()).collect(),
            };
            let once = map_l(&dev, &net, &po);
            let twice = map_l(&once, &net, &po);
            assert!(once.distance(&twice) < 1e-12);
            // Class totals are preserved.
            let z0 = dev.z(&net);
            let z1 = once.z(&net);
            for (a, b) in z0.iter().zip(&z1) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lfm_matrix_net_n_is_identity() {
        let net = net_n();
        let maps = lfm_matrix(&net, &po(&net)).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                let expected = if i == k { 1.0 } else { 0.0 };
                assert!((maps.b[(i, k)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lfm_matrix_net_1_and_w() {
        let net = net_1();
        let maps = lfm_matrix(&net, &po(&net)).unwrap();
        assert!((maps.b[(0, 0)] - 1.0).abs() < 1e-12);
        let net = net_w();
        let maps = lfm_matrix(&net, &po(&net)).unwrap();
        assert!((maps.b[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((maps.b[(1, 1)] - 2.0).abs() < 1e-12);
        assert!(maps.b[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn lfm_matrix_requires_slack_assumption() {
        let net = Network::new(
            vec![0.5, 0.8],
            vec![1.0, 1.0],
            vec![(0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)],
        );
        assert!(matches!(
            lfm_matrix(&net, &po(&net)),
            Err(ScaleError::Assumption3(_))
        ));
    }

    #[test]
    fn hydro_fixed_point_is_constant() {
        let net = net_n();
        let po = po(&net);
        let dev = DeviationState {
            u: map_l_prime(&[0.4, -0.2], &net, &po),
            w: vec![0.0, 0.0],
        };
        let traj = integrate_hydro(&dev, &net, &po, 10.0, StepControl::default()).unwrap();
        let max_dist = (0..traj.len())
            .map(|i| traj.state(i).distance(&dev))
            .fold(0.0, f64::max);
        assert!(max_dist < 1e-9, "drifted by {max_dist}");
    }

    #[test]
    fn hydro_freezes_at_the_projection() {
        let net = net_n();
        let po = po(&net);
        // Spec example: u = (0.3 on (1,2), -0.2 on (2,1), 0), w = 0.
        let mut dev = DeviationState::zero(&net);
        dev.u[net.activity_index(0, 1).unwrap()] = 0.3;
        dev.u[net.activity_index(1, 0).unwrap()] = -0.2;
        let traj = integrate_hydro(&dev, &net, &po, 20.0, StepControl::default()).unwrap();
        let expected = map_l(&dev, &net, &po);
        let end = traj.final_state();
        assert!(
            end.distance(&expected) < 1e-6,
            "terminal {end:?} vs {expected:?}"
        );
        assert!((end.u[net.activity_index(0, 1).unwrap()] - 0.3).abs() < 1e-6);
        assert!(end.u[net.activity_index(1, 0).unwrap()].abs() < 1e-6);
        assert!((end.u[net.activity_index(1, 1).unwrap()] + 0.2).abs() < 1e-6);
    }

    #[test]
    fn hydro_conserves_class_totals() {
        let net = net_n();
        let po = po(&net);
        let mut dev = DeviationState::zero(&net);
        dev.u[0] = -0.4;
        dev.w[0] = 0.3;
        dev.u[1] = -0.5;
        dev.w[1] = 0.7;
        let traj = integrate_hydro(&dev, &net, &po, 20.0, StepControl::default()).unwrap();
        let z0 = dev.z(&net);
        for idx in 0..traj.len() {
            let z = traj.state(idx).z(&net);
            for (a, b) in z.iter().zip(&z0) {
                assert!((a - b).abs() < 1e-9, "conservation broke at {idx}");
            }
        }
    }

    #[test]
    fn lfm_zero_stays_zero() {
        let net = net_1();
        let po = po(&net);
        let maps = lfm_matrix(&net, &po).unwrap();
        let traj = integrate_lfm(&DeviationState::zero(&net), &maps, &net, 5.0, 0.1);
        assert!(traj.x.iter().flatten().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn lfm_net_n_decays_like_exp_minus_t() {
        let net = net_n();
        let po = po(&net);
        let maps = lfm_matrix(&net, &po).unwrap();
        // x(0) = (1, 1) on the manifold: u = L'(1, 1).
        let dev = DeviationState {
            u: map_l_prime(&[1.0, 1.0], &net, &po),
            w: vec![0.0, 0.0],
        };
        let traj = integrate_lfm(&dev, &maps, &net, 6.0, 0.5);
        for (idx, t) in traj.times.iter().enumerate() {
            for i in 0..2 {
                assert!(
                    (traj.x[idx][i] - (-t).exp()).abs() < 1e-10,
                    "x_{i}({t}) = {}",
                    traj.x[idx][i]
                );
            }
        }
    }

    #[test]
    fn lfm_exp_and_rk_routes_agree() {
        for net in [net_1(), net_n(), net_w()] {
            let po = po(&net);
            let maps = lfm_matrix(&net, &po).unwrap();
            let mut rng = run_rng(8);
            let z: Vec<f64> = (0..net.num_classes())
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect();
            let dev = DeviationState {
                u: map_l_prime(&z, &net, &po),
                w: vec![0.0; net.num_classes()],
            };
            let a = integrate_lfm(&dev, &maps, &net, 20.0, 0.1);
            let b = integrate_lfm_rk(&dev, &maps, &net, 20.0, 0.1);
            let sup = a
                .psi
                .iter()
                .flatten()
                .zip(b.psi.iter().flatten())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(sup < 1e-8, "routes differ by {sup}");
        }
    }

    #[test]
    fn decay_constants_net_n() {
        let net = net_n();
        let po = po(&net);
        let maps = lfm_matrix(&net, &po).unwrap();
        let dc = decay_constants(&maps, &net).unwrap();
        assert!((dc.c2 - 0.99).abs() < 1e-9, "c2 = {}", dc.c2);
        assert!(dc.c1 >= 1.0);
    }

    #[test]
    fn decay_bound_holds_on_samples() {
        let net = net_w();
        let po = po(&net);
        let maps = lfm_matrix(&net, &po).unwrap();
        let dc = decay_constants(&maps, &net).unwrap();
        let mut rng = run_rng(99);
        for _ in 0..100 {
            let z: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let dev = DeviationState {
                u: map_l_prime(&z, &net, &po),
                w: vec![0.0, 0.0],
            };
            let n0 = dev.norm();
            let traj = integrate_lfm(&dev, &maps, &net, 15.0, 0.25);
            for (idx, t) in traj.times.iter().enumerate() {
                let n = traj.state(idx, &net).norm();
                assert!(
                    n <= dc.c1 * n0 * (-dc.c2 * t).exp() + 1e-12,
                    "bound violated at t = {t}"
                );
            }
        }
    }

    #[test]
    fn deviation_validation_rejects_positive_pool_sum() {
        let net = net_n();
        let po = po(&net);
        let mut dev = DeviationState::zero(&net);
        dev.u[net.activity_index(1, 0).unwrap()] = 0.5; // pool 1 is full at eq
        assert!(matches!(
            dev.validate(&net, &po),
            Err(ScaleError::InvalidState(_))
        ));
    }
}
