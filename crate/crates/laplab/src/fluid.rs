//! Fluid model: deterministic law-of-large-numbers dynamics under the
//! leaf-activity-priority discipline.
//!
//! The state carries real-valued occupancies `psi_ij` and queues `q_i`. At
//! every instant the service-start rates are allocated to activities in
//! priority order with two running budgets:
//!
//! * `R_i` — the class's remaining arrival inflow, starting at `lambda_i`;
//! * `S_j` — the pool's freed-server rate, starting at
//!   `sum_i mu_ij psi_ij` (the total completion rate at pool `j`).
//!
//! An activity whose class has a positive queue takes the whole remaining
//! freed-server budget of its pool (completions at the pool reschedule the
//! highest-priority queued class), plus the remaining inflow when the pool
//! has idle capacity (arrivals are routed to idle servers regardless of the
//! queue). An activity with an empty queue takes the remaining inflow when
//! the pool has room, and `min(R_i, S_j)` when the pool is exactly full.
//! Working through activities from highest to lowest priority makes the
//! blocking rules automatic: a starved budget is already zero.
//!
//! State derivatives follow as `dpsi_ij = dxi_ij - mu_ij psi_ij` and
//! `dq_i = lambda_i - sum_j dxi_ij`.

use rand::Rng;
use thiserror::Error;

use crate::model::Network;
use crate::ode::{self, BoundedDynamics, OdeError, StepControl};
use crate::priority::{EquilibriumPoint, PriorityOrder};
use crate::rng;

#[derive(Debug, Error)]
pub enum FluidError {
    #[error("fluid state violates invariants by {0:.3e}")]
    InvalidState(f64),
    #[error(transparent)]
    Integration(#[from] OdeError),
    #[error("trajectory from state {state} did not settle within {eps:.1e} of the equilibrium by t = {horizon}")]
    HorizonExceeded {
        state: usize,
        eps: f64,
        horizon: f64,
    },
}

/// Real-valued occupancies and queues; `x_i = q_i + sum_j psi_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidState {
    /// Per activity, indexed like `Network::activities`.
    pub psi: Vec<f64>,
    /// Per class.
    pub q: Vec<f64>,
}

impl FluidState {
    pub fn empty(net: &Network) -> Self {
        FluidState {
            psi: vec![0.0; net.num_activities()],
            q: vec![0.0; net.num_classes()],
        }
    }

    pub fn at_equilibrium(eq: &EquilibriumPoint, net: &Network) -> Self {
        FluidState {
            psi: eq.psi_star.clone(),
            q: vec![0.0; net.num_classes()],
        }
    }

    /// Total fluid per class.
    pub fn x(&self, net: &Network) -> Vec<f64> {
        let mut x = self.q.clone();
        for (k, a) in net.activities().iter().enumerate() {
            x[a.class] += self.psi[k];
        }
        x
    }

    /// Euclidean norm of the state vector.
    pub fn norm(&self) -> f64 {
        self.psi
            .iter()
            .chain(self.q.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance of `(psi - psi*, q)` from the equilibrium.
    pub fn distance_to_equilibrium(&self, eq: &EquilibriumPoint) -> f64 {
        let occ = self
            .psi
            .iter()
            .zip(&eq.psi_star)
            .map(|(p, s)| (p - s) * (p - s))
            .sum::<f64>();
        let queues = self.q.iter().map(|v| v * v).sum::<f64>();
        (occ + queues).sqrt()
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut y = self.psi.clone();
        y.extend_from_slice(&self.q);
        y
    }

    fn from_slice(y: &[f64], net: &Network) -> Self {
        let ne = net.num_activities();
        FluidState {
            psi: y[..ne].to_vec(),
            q: y[ne..].to_vec(),
        }
    }
}

/// Instantaneous service-start rates and the induced state derivatives.
#[derive(Debug, Clone)]
pub struct RateAllocation {
    /// `dxi_ij/dt` per activity.
    pub service_starts: Vec<f64>,
    pub psi_dot: Vec<f64>,
    pub q_dot: Vec<f64>,
}

/// Tolerance below which a queue counts as empty / a pool as exactly full.
const REGIME_TOL: f64 = 1e-9;

fn allocate_core(
    psi: &[f64],
    q: &[f64],
    net: &Network,
    po: &PriorityOrder,
) -> RateAllocation {
    let mut inflow = net.lambda().to_vec();
    let mut freed: Vec<f64> = (0..net.num_pools())
        .map(|j| {
            net.pool_activities(j)
                .iter()
                .map(|&k| net.activity(k).mu * psi[k].max(0.0))
                .sum()
        })
        .collect();
    let occupancy: Vec<f64> = (0..net.num_pools())
        .map(|j| {
            net.pool_activities(j)
                .iter()
                .map(|&k| psi[k])
                .sum::<f64>()
        })
        .collect();

    let mut starts = vec![0.0; net.num_activities()];
    for &k in po.activities_by_rank() {
        let a = net.activity(k);
        let slack = occupancy[a.pool] < net.beta()[a.pool] - REGIME_TOL;
        let queued = q[a.class] > REGIME_TOL;
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

    let mut q_dot = net.lambda().to_vec();
    let mut psi_dot = vec![0.0; net.num_activities()];
    for (k, a) in net.activities().iter().enumerate() {
        psi_dot[k] = starts[k] - a.mu * psi[k].max(0.0);
        q_dot[a.class] -= starts[k];
    }
    RateAllocation {
        service_starts: starts,
        psi_dot,
        q_dot,
    }
}

fn state_violation(psi: &[f64], q: &[f64], net: &Network) -> f64 {
    let mut v: f64 = 0.0;
    for &p in psi {
        v = v.max(-p);
    }
    for &qi in q {
        v = v.max(-qi);
    }
    for j in 0..net.num_pools() {
        let occ: f64 = net.pool_activities(j).iter().map(|&k| psi[k]).sum();
        v = v.max(occ - net.beta()[j]);
    }
    v.max(0.0)
}

/// Service-start rates and state derivatives at a feasible fluid state.
pub fn allocate_rates(
    state: &FluidState,
    net: &Network,
    po: &PriorityOrder,
) -> Result<RateAllocation, FluidError> {
    let violation = state_violation(&state.psi, &state.q, net);
    if violation > REGIME_TOL {
        return Err(FluidError::InvalidState(violation));
    }
    Ok(allocate_core(&state.psi, &state.q, net, po))
}

struct FluidDynamics<'a> {
    net: &'a Network,
    po: &'a PriorityOrder,
}

impl BoundedDynamics for FluidDynamics<'_> {
    fn dim(&self) -> usize {
        self.net.num_activities() + self.net.num_classes()
    }

    fn derivative(&self, y: &[f64], dy: &mut [f64]) {
        let ne = self.net.num_activities();
        let alloc = allocate_core(&y[..ne], &y[ne..], self.net, self.po);
        dy[..ne].copy_from_slice(&alloc.psi_dot);
        dy[ne..].copy_from_slice(&alloc.q_dot);
    }

    fn violation(&self, y: &[f64]) -> f64 {
        let ne = self.net.num_activities();
        state_violation(&y[..ne], &y[ne..], self.net)
    }

    fn clip(&self, y: &mut [f64]) {
        for v in y.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        for j in 0..self.net.num_pools() {
            let occ: f64 = self
                .net
                .pool_activities(j)
                .iter()
                .map(|&k| y[k])
                .sum();
            let beta = self.net.beta()[j];
            if occ > beta {
                let scale = beta / occ;
                for &k in self.net.pool_activities(j) {
                    y[k] *= scale;
                }
            }
        }
    }
}

/// A fluid trajectory sampled at every accepted integration step.
#[derive(Debug, Clone)]
pub struct FluidTrajectory {
    pub times: Vec<f64>,
    states: Vec<Vec<f64>>,
}

impl FluidTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, idx: usize, net: &Network) -> FluidState {
        FluidState::from_slice(&self.states[idx], net)
    }

    pub fn final_state(&self, net: &Network) -> FluidState {
        FluidState::from_slice(self.states.last().expect("nonempty trajectory"), net)
    }

    /// Linear interpolation at time `t` (clamped to the trajectory range).
    pub fn sample(&self, t: f64, net: &Network) -> FluidState {
        let raw = self.sample_raw(t);
        FluidState::from_slice(&raw, net)
    }

    fn sample_raw(&self, t: f64) -> Vec<f64> {
        match self.times.binary_search_by(|probe| probe.total_cmp(&t)) {
            Ok(i) => self.states[i].clone(),
            Err(0) => self.states[0].clone(),
            Err(i) if i >= self.times.len() => self.states.last().unwrap().clone(),
            Err(i) => {
                let (t0, t1) = (self.times[i - 1], self.times[i]);
                let w = (t - t0) / (t1 - t0);
                self.states[i - 1]
                    .iter()
                    .zip(&self.states[i])
                    .map(|(a, b)| a + w * (b - a))
                    .collect()
            }
        }
    }

    /// CSV rows `t, psi_<i>_<j>..., q_<i>..., dist_to_eq`, thinned to the
    /// given output interval.
    pub fn to_csv(&self, net: &Network, eq: &EquilibriumPoint, interval: f64) -> String {
        let mut out = String::from("t");
        for a in net.activities() {
            out.push_str(&format!(",psi_{}_{}", a.class + 1, a.pool + 1));
        }
        for i in 0..net.num_classes() {
            out.push_str(&format!(",q_{}", i + 1));
        }
        out.push_str(",dist_to_eq\n");
        let t_end = *self.times.last().unwrap();
        let mut t = 0.0;
        while t <= t_end + 1e-12 {
            let state = self.sample(t.min(t_end), net);
            out.push_str(&format!("{t}"));
            for v in state.psi.iter().chain(state.q.iter()) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", state.distance_to_equilibrium(eq)));
            t += interval;
        }
        out
    }

    /// First time after which the distance to the equilibrium stays below
    /// `eps` until the end of the trajectory, if it ever does.
    pub fn settle_time(&self, eq: &EquilibriumPoint, eps: f64, net: &Network) -> Option<f64> {
        let mut settle = None;
        for (idx, t) in self.times.iter().enumerate() {
            let d = self.state(idx, net).distance_to_equilibrium(eq);
            if d < eps {
                if settle.is_none() {
                    settle = Some(*t);
                }
            } else {
                settle = None;
            }
        }
        settle
    }
}

/// Integrate the fluid model from `initial` over `[0, horizon]`.
pub fn integrate_fluid(
    initial: &FluidState,
    net: &Network,
    po: &PriorityOrder,
    horizon: f64,
    ctrl: StepControl,
) -> Result<FluidTrajectory, FluidError> {
    let dynamics = FluidDynamics { net, po };
    let mut times = Vec::new();
    let mut states = Vec::new();
    ode::integrate(&dynamics, &initial.to_vec(), horizon, ctrl, |t, y| {
        times.push(t);
        states.push(y.to_vec());
    })?;
    Ok(FluidTrajectory { times, states })
}

/// Empirical drain time: the worst settle time into the `eps`-ball around the
/// equilibrium over a deterministic grid plus `num_random` sampled initial
/// states of norm at most `k_bound`.
#[derive(Debug, Clone)]
pub struct DrainReport {
    /// Worst settle time across all sampled initial states.
    pub max_settle_time: f64,
    /// Settle time per initial state.
    pub settle_times: Vec<f64>,
}

pub fn drain_time(
    k_bound: f64,
    eps: f64,
    net: &Network,
    po: &PriorityOrder,
    eq: &EquilibriumPoint,
    horizon: f64,
    num_random: usize,
    seed: u64,
) -> Result<DrainReport, FluidError> {
    let mut initial_states = drain_grid(k_bound, net, eq);
    let mut rng = rng::run_rng(seed);
    for _ in 0..num_random {
        initial_states.push(random_state(k_bound, net, &mut rng));
    }

    let ctrl = StepControl::default();
    let mut settle_times = Vec::with_capacity(initial_states.len());
    for (idx, state) in initial_states.iter().enumerate() {
        let traj = integrate_fluid(state, net, po, horizon, ctrl)?;
        match traj.settle_time(eq, eps, net) {
            Some(t) => settle_times.push(t),
            None => {
                return Err(FluidError::HorizonExceeded {
                    state: idx,
                    eps,
                    horizon,
                })
            }
        }
    }
    let max_settle_time = settle_times.iter().cloned().fold(0.0, f64::max);
    Ok(DrainReport {
        max_settle_time,
        settle_times,
    })
}

fn drain_grid(k_bound: f64, net: &Network, eq: &EquilibriumPoint) -> Vec<FluidState> {
    let nc = net.num_classes() as f64;
    let mut grid = vec![FluidState::empty(net)];
    // All mass queued, split evenly across classes.
    let mut queued = FluidState::empty(net);
    for qv in queued.q.iter_mut() {
        *qv = k_bound / nc.sqrt();
    }
    grid.push(queued);
    // The equilibrium scaled into the K-ball.
    let eq_state = FluidState::at_equilibrium(eq, net);
    let norm = eq_state.norm();
    if norm > 0.0 {
        let scale = (k_bound / norm).min(1.0);
        grid.push(FluidState {
            psi: eq_state.psi.iter().map(|p| p * scale).collect(),
            q: eq_state.q,
        });
    }
    grid
}

fn random_state(k_bound: f64, net: &Network, rng: &mut impl Rng) -> FluidState {
    let mut state = FluidState::empty(net);
    for j in 0..net.num_pools() {
        let beta = net.beta()[j];
        for &k in net.pool_activities(j) {
            state.psi[k] = rng.random::<f64>() * beta;
        }
        let occ: f64 = net.pool_activities(j).iter().map(|&k| state.psi[k]).sum();
        if occ > beta {
            for &k in net.pool_activities(j) {
                state.psi[k] *= beta / occ;
            }
        }
    }
    for qv in state.q.iter_mut() {
        *qv = rng.random::<f64>() * k_bound;
    }
    let norm = state.norm();
    if norm > k_bound {
        let scale = k_bound / norm;
        for v in state.psi.iter_mut().chain(state.q.iter_mut()) {
            *v *= scale;
        }
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Network;
    use crate::priority::{assign_priorities, compute_equilibrium, TieBreak};

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

    fn setup(net: &Network) -> (PriorityOrder, EquilibriumPoint) {
        let po = assign_priorities(net, TieBreak::LowestIndex).unwrap();
        let eq = compute_equilibrium(net, &po);
        (po, eq)
    }

    #[test]
    fn equilibrium_is_stationary_for_allocation() {
        let net = net_n();
        let (po, eq) = setup(&net);
        let state = FluidState::at_equilibrium(&eq, &net);
        let alloc = allocate_rates(&state, &net, &po).unwrap();
        let k12 = net.activity_index(0, 1).unwrap();
        let k21 = net.activity_index(1, 0).unwrap();
        let k22 = net.activity_index(1, 1).unwrap();
        assert!((alloc.service_starts[k12] - 0.5).abs() < 1e-12);
        assert!((alloc.service_starts[k21] - 1.0).abs() < 1e-12);
        assert!((alloc.service_starts[k22] - 0.2).abs() < 1e-12);
        for v in alloc.psi_dot.iter().chain(alloc.q_dot.iter()) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn empty_slack_pool_takes_full_inflow() {
        let net = net_1();
        let (po, _) = setup(&net);
        let state = FluidState::empty(&net);
        let alloc = allocate_rates(&state, &net, &po).unwrap();
        assert!((alloc.service_starts[0] - 0.5).abs() < 1e-15);
        assert!((alloc.psi_dot[0] - 0.5).abs() < 1e-15);
        assert!(alloc.q_dot[0].abs() < 1e-15);
    }

    #[test]
    fn queued_class_takes_freed_servers_and_blocks_lower_class() {
        let net = net_w();
        let (po, _) = setup(&net);
        let state = FluidState {
            psi: vec![0.6, 0.4],
            q: vec![1.0, 1.0],
        };
        let alloc = allocate_rates(&state, &net, &po).unwrap();
        assert!((alloc.service_starts[0] - 1.4).abs() < 1e-12);
        assert!(alloc.service_starts[1].abs() < 1e-15);
        assert!((alloc.q_dot[0] + 1.1).abs() < 1e-12);
        assert!((alloc.q_dot[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn invalid_state_is_rejected() {
        let net = net_1();
        let (po, _) = setup(&net);
        let state = FluidState {
            psi: vec![1.5],
            q: vec![0.0],
        };
        assert!(matches!(
            allocate_rates(&state, &net, &po),
            Err(FluidError::InvalidState(_))
        ));
    }

    #[test]
    fn trajectory_from_equilibrium_is_constant() {
        let net = net_n();
        let (po, eq) = setup(&net);
        let initial = FluidState::at_equilibrium(&eq, &net);
        let traj =
            integrate_fluid(&initial, &net, &po, 10.0, StepControl::default()).unwrap();
        let max_dist = (0..traj.len())
            .map(|i| traj.state(i, &net).distance_to_equilibrium(&eq))
            .fold(0.0, f64::max);
        assert!(max_dist < 1e-9, "drifted by {max_dist}");
    }

    #[test]
    fn net_1_matches_scalar_closed_form() {
        let net = net_1();
        let (po, _) = setup(&net);
        let initial = FluidState::empty(&net);
        let traj = integrate_fluid(&initial, &net, &po, 5.0, StepControl::default()).unwrap();
        for t in [0.5, 1.0, 2.0, 5.0] {
            let state = traj.sample(t, &net);
            let expected = 0.5 * (1.0 - (-t).exp());
            assert!(
                (state.psi[0] - expected).abs() < 1e-6,
                "psi({t}) = {} vs {expected}",
                state.psi[0]
            );
        }
    }

    #[test]
    fn net_n_drains_from_large_queues() {
        let net = net_n();
        let (po, eq) = setup(&net);
        let initial = FluidState {
            psi: vec![0.0; 3],
            q: vec![2.0, 2.0],
        };
        let traj =
            integrate_fluid(&initial, &net, &po, 60.0, StepControl::default()).unwrap();
        let settle = traj.settle_time(&eq, 1e-3, &net);
        assert!(settle.is_some(), "did not settle");
        assert!(settle.unwrap() < 60.0);
    }

    #[test]
    fn conservation_along_trajectories() {
        // x_i(t) - x_i(0) = lambda_i t - sum_j int mu_ij psi_ij.
        let net = net_n();
        let (po, _) = setup(&net);
        let initial = FluidState {
            psi: vec![0.2, 0.3, 0.1],
            q: vec![0.5, 0.0],
        };
        let horizon = 4.0;
        let traj = integrate_fluid(&initial, &net, &po, horizon, StepControl::default()).unwrap();
        // Trapezoidal service integral over the dense trajectory.
        let mut served = vec![0.0; net.num_classes()];
        for idx in 1..traj.len() {
            let dt = traj.times[idx] - traj.times[idx - 1];
            let a = traj.state(idx - 1, &net);
            let b = traj.state(idx, &net);
            for (k, act) in net.activities().iter().enumerate() {
                served[act.class] += 0.5 * dt * act.mu * (a.psi[k] + b.psi[k]);
            }
        }
        let x0 = initial.x(&net);
        let xt = traj.final_state(&net).x(&net);
        for i in 0..net.num_classes() {
            let expected = x0[i] + net.lambda()[i] * horizon - served[i];
            assert!(
                (xt[i] - expected).abs() < 1e-5,
                "class {i}: {} vs {expected}",
                xt[i]
            );
        }
    }

    #[test]
    fn drain_time_is_monotone_in_k() {
        let net = net_1();
        let (po, eq) = setup(&net);
        let t1 = drain_time(1.0, 1e-3, &net, &po, &eq, 40.0, 5, 11)
            .unwrap()
            .max_settle_time;
        let t2 = drain_time(2.0, 1e-3, &net, &po, &eq, 40.0, 5, 11)
            .unwrap()
            .max_settle_time;
        assert!(t1.is_finite() && t2.is_finite());
        assert!(t2 >= t1 - 1e-9, "t1 = {t1}, t2 = {t2}");
    }

    #[test]
    fn drain_terminal_state_net_w() {
        let net = net_w();
        let (po, eq) = setup(&net);
        let report = drain_time(2.0, 1e-3, &net, &po, &eq, 40.0, 10, 5).unwrap();
        assert!(report.max_settle_time < 40.0);
        // Spot-check a terminal state.
        let initial = FluidState {
            psi: vec![0.0, 0.0],
            q: vec![1.0, 1.0],
        };
        let traj = integrate_fluid(&initial, &net, &po, 40.0, StepControl::default()).unwrap();
        let end = traj.final_state(&net);
        assert!((end.psi[0] - 0.3).abs() < 1e-4);
        assert!((end.psi[1] - 0.2).abs() < 1e-4);
    }
}
