//! Brute-force stationary oracle on a truncated state space.
//!
//! For tiny instances the chain `(Psi_ij, Q_i)` can be enumerated outright:
//! queues are capped at `queue_cap` (arrivals that would overflow are
//! dropped), and only work-conserving states are kept — a queued class with
//! an idle compatible server is unreachable under the policy. Transitions
//! are generated by the same routing/scheduling code the simulator runs, so
//! the two can disagree only through sampling noise.
//!
//! The stationary distribution solves the balance equations directly (dense
//! LU) when the space is small and falls back to uniformized power iteration
//! otherwise.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::model::Network;
use crate::priority::{compute_equilibrium, EquilibriumPoint, PriorityOrder};
use crate::simulator::{apply_departure, route_arrival, SimError, SystemState};

/// Hard cap on the truncated state space.
pub const MAX_STATES: usize = 200_000;
/// Dense linear solves are used up to this size.
const DENSE_LIMIT: usize = 3_000;

/// Exact stationary moments of the truncated chain.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub num_states: usize,
    pub mean_psi: Vec<f64>,
    pub mean_q: Vec<f64>,
    pub mean_total: f64,
    /// Stationary mean L1 deviation norm from the equilibrium center.
    pub mean_norm1: f64,
    /// Stationary mean Euclidean deviation norm.
    pub mean_norm2: f64,
    /// Total stationary probability of states with all pools full.
    pub prob_all_busy: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Key {
    psi: Vec<u64>,
    q: Vec<u64>,
}

/// Enumerate the truncated chain, build its generator under the exact
/// routing/scheduling dynamics, and solve the stationary balance equations.
pub fn solve_ctmc_oracle(
    net: &Network,
    po: &PriorityOrder,
    r: u64,
    queue_cap: u64,
) -> Result<OracleSolution, SimError> {
    let states = enumerate_states(net, r, queue_cap)?;
    let index: HashMap<Key, usize> = states
        .iter()
        .enumerate()
        .map(|(idx, key)| (key.clone(), idx))
        .collect();
    let n = states.len();

    // Transition list per state.
    let mut transitions: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let rf = r as f64;
    for (from, key) in states.iter().enumerate() {
        let mut push = |state: &SystemState, rate: f64| {
            let to_key = Key {
                psi: state.psi().to_vec(),
                q: state.q().to_vec(),
            };
            let to = *index
                .get(&to_key)
                .expect("transition target stays inside the truncated space");
            if to != from {
                transitions[from].push((to, rate));
            }
        };
        for i in 0..net.num_classes() {
            let rate = net.lambda()[i] * rf;
            let mut state =
                SystemState::explicit(net, r, key.psi.clone(), key.q.clone()).unwrap();
            let would_queue = net.class_activities(i).iter().all(|&k| {
                let j = net.activity(k).pool;
                state.pool_in_service(j) >= state.capacity(j)
            });
            if would_queue && key.q[i] >= queue_cap {
                continue; // blocked arrival
            }
            route_arrival(&mut state, i, net, po);
            push(&state, rate);
        }
        for (k, a) in net.activities().iter().enumerate() {
            if key.psi[k] == 0 {
                continue;
            }
            let rate = a.mu * key.psi[k] as f64;
            let mut state =
                SystemState::explicit(net, r, key.psi.clone(), key.q.clone()).unwrap();
            apply_departure(&mut state, k, net, po);
            push(&state, rate);
        }
    }

    let pi = if n <= DENSE_LIMIT {
        solve_dense(&transitions)
    } else {
        solve_power(&transitions)
    };

    let eq = compute_equilibrium(net, po);
    Ok(moments(net, r, &states, &pi, &eq))
}

fn enumerate_states(net: &Network, r: u64, queue_cap: u64) -> Result<Vec<Key>, SimError> {
    // Per-pool occupancy splits with sum <= capacity.
    let mut pool_splits: Vec<Vec<Vec<u64>>> = Vec::new();
    for j in 0..net.num_pools() {
        let cap = SystemState::empty(net, r).capacity(j);
        let arity = net.pool_activities(j).len();
        let mut splits = Vec::new();
        let mut current = vec![0u64; arity];
        fill_splits(cap, 0, &mut current, &mut splits);
        if splits.len() > MAX_STATES {
            return Err(SimError::StateSpaceTooLarge(splits.len(), MAX_STATES));
        }
        pool_splits.push(splits);
    }

    let mut states = Vec::new();
    let mut psi_choice = vec![0usize; net.num_pools()];
    loop {
        // Assemble psi from the per-pool splits.
        let mut psi = vec![0u64; net.num_activities()];
        for j in 0..net.num_pools() {
            for (slot, &k) in net.pool_activities(j).iter().enumerate() {
                psi[k] = pool_splits[j][psi_choice[j]][slot];
            }
        }
        // Which classes may queue: all their pools are full.
        let capacities: Vec<u64> = {
            let probe = SystemState::empty(net, r);
            (0..net.num_pools()).map(|j| probe.capacity(j)).collect()
        };
        let pool_full: Vec<bool> = (0..net.num_pools())
            .map(|j| {
                let used: u64 = net.pool_activities(j).iter().map(|&k| psi[k]).sum();
                used >= capacities[j]
            })
            .collect();
        let queueable: Vec<bool> = (0..net.num_classes())
            .map(|i| {
                net.class_activities(i)
                    .iter()
                    .all(|&k| pool_full[net.activity(k).pool])
            })
            .collect();
        let mut q = vec![0u64; net.num_classes()];
        loop {
            states.push(Key {
                psi: psi.clone(),
                q: q.clone(),
            });
            if states.len() > MAX_STATES {
                return Err(SimError::StateSpaceTooLarge(states.len(), MAX_STATES));
            }
            // Odometer over queue vectors restricted to queueable classes.
            let mut carry = true;
            for i in 0..net.num_classes() {
                if !queueable[i] {
                    continue;
                }
                if carry {
                    if q[i] < queue_cap {
                        q[i] += 1;
                        carry = false;
                    } else {
                        q[i] = 0;
                    }
                }
            }
            if carry {
                break;
            }
        }
        // Odometer over pool splits.
        let mut carry = true;
        for j in 0..net.num_pools() {
            if carry {
                psi_choice[j] += 1;
                if psi_choice[j] < pool_splits[j].len() {
                    carry = false;
                } else {
                    psi_choice[j] = 0;
                }
            }
        }
        if carry {
            break;
        }
    }
    Ok(states)
}

fn fill_splits(cap: u64, slot: usize, current: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
    if slot == current.len() {
        out.push(current.clone());
        return;
    }
    let used: u64 = current[..slot].iter().sum();
    for v in 0..=(cap - used) {
        current[slot] = v;
        fill_splits(cap, slot + 1, current, out);
    }
    current[slot] = 0;
}

/// Balance equations with the normalization row appended: solve
/// `Q^T pi = 0`, `sum pi = 1` by replacing the last equation.
fn solve_dense(transitions: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let n = transitions.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (from, outs) in transitions.iter().enumerate() {
        let mut outflow = 0.0;
        for &(to, rate) in outs {
            a[(to, from)] += rate;
            outflow += rate;
        }
        a[(from, from)] -= outflow;
    }
    for col in 0..n {
        a[(n - 1, col)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let lu = a.lu();
    match lu.solve(&b) {
        Some(pi) => pi.iter().map(|v| v.max(0.0)).collect(),
        None => solve_power(transitions),
    }
}

/// Uniformized power iteration for larger spaces.
fn solve_power(transitions: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let n = transitions.len();
    let outflow: Vec<f64> = transitions
        .iter()
        .map(|outs| outs.iter().map(|(_, rate)| rate).sum())
        .collect();
    let uni = outflow.iter().cloned().fold(0.0, f64::max) * 1.05 + 1e-9;
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..2_000_000 {
        for v in next.iter_mut() {
            *v = 0.0;
        }
        for (from, outs) in transitions.iter().enumerate() {
            let stay = pi[from] * (1.0 - outflow[from] / uni);
            next[from] += stay;
            for &(to, rate) in outs {
                next[to] += pi[from] * rate / uni;
            }
        }
        let diff: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if diff < 1e-14 {
            break;
        }
    }
    pi
}

fn moments(
    net: &Network,
    r: u64,
    states: &[Key],
    pi: &[f64],
    eq: &EquilibriumPoint,
) -> OracleSolution {
    let total_mass: f64 = pi.iter().sum();
    let rf = r as f64;
    let capacities: Vec<u64> = {
        let probe = SystemState::empty(net, r);
        (0..net.num_pools()).map(|j| probe.capacity(j)).collect()
    };
    let mut mean_psi = vec![0.0; net.num_activities()];
    let mut mean_q = vec![0.0; net.num_classes()];
    let mut mean_total = 0.0;
    let mut mean_norm1 = 0.0;
    let mut mean_norm2 = 0.0;
    let mut prob_all_busy = 0.0;
    for (key, &p) in states.iter().zip(pi) {
        let w = p / total_mass;
        let mut l1 = 0.0;
        let mut sq = 0.0;
        let mut total = 0.0;
        for (k, &v) in key.psi.iter().enumerate() {
            mean_psi[k] += w * v as f64;
            total += v as f64;
            let d = v as f64 - eq.psi_star[k] * rf;
            l1 += d.abs();
            sq += d * d;
        }
        for (i, &v) in key.q.iter().enumerate() {
            mean_q[i] += w * v as f64;
            total += v as f64;
            l1 += v as f64;
            sq += (v as f64) * (v as f64);
        }
        mean_total += w * total;
        mean_norm1 += w * l1;
        mean_norm2 += w * sq.sqrt();
        let all_busy = (0..net.num_pools()).all(|j| {
            let used: u64 = net.pool_activities(j).iter().map(|&k| key.psi[k]).sum();
            used >= capacities[j]
        });
        if all_busy {
            prob_all_busy += w;
        }
    }
    OracleSolution {
        num_states: states.len(),
        mean_psi,
        mean_q,
        mean_total,
        mean_norm1,
        mean_norm2,
        prob_all_busy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priority::{assign_priorities, TieBreak};

    /// Mean number in system for M/M/N via the blocking-probability
    /// recursion; independent of the generator construction above.
    fn mm_n_mean_in_system(arrival: f64, mu: f64, servers: u64) -> f64 {
        let a = arrival / mu;
        let mut b = 1.0;
        for n in 1..=servers {
            b = a * b / (n as f64 + a * b);
        }
        let rho = a / servers as f64;
        let c = b / (1.0 - rho * (1.0 - b));
        c * rho / (1.0 - rho) + a
    }

    #[test]
    fn mm1_server_busy_probability() {
        // Single server, lambda 0.5, mu 1: P(busy) = 0.5.
        let net = Network::new(vec![0.5], vec![1.0], vec![(0, 0, 1.0)]);
        let po = assign_priorities(&net, TieBreak::LowestIndex).unwrap();
        let sol = solve_ctmc_oracle(&net, &po, 1, 100).unwrap();
        assert!((sol.mean_psi[0] - 0.5).abs() < 1e-10, "{}", sol.mean_psi[0]);
        assert!((sol.prob_all_busy - 0.5).abs() < 1e-10);
    }

    #[test]
    fn mm5_matches_closed_form() {
        let net = Network::new(vec![0.5], vec![1.0], vec![(0, 0, 1.0)]);
        let po = assign_priorities(&net, TieBreak::LowestIndex).unwrap();
        let sol = solve_ctmc_oracle(&net, &po, 5, 200).unwrap();
        let expected = mm_n_mean_in_system(2.5, 1.0, 5);
        assert!(
            (sol.mean_total - expected).abs() < 1e-8,
            "oracle {} vs closed form {expected}",
            sol.mean_total
        );
    }

    #[test]
    fn state_space_guard_fires() {
        let net = Network::new(vec![0.5], vec![1.0], vec![(0, 0, 1.0)]);
        let po = assign_priorities(&net, TieBreak::LowestIndex).unwrap();
        assert!(matches!(
            solve_ctmc_oracle(&net, &po, 1000, 1_000_000),
            Err(SimError::StateSpaceTooLarge(..))
        ));
    }
}
