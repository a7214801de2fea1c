//! Leaf-activity priorities and the resulting equilibrium point.
//!
//! The leaf-activity-priority (LAP) discipline is built from a total order on
//! customer classes and on activities, obtained by sequentially eliminating
//! leaves of the activity tree:
//!
//! 1. *Class priorities*: repeatedly pick a leaf of the tree; customer-class
//!    leaves receive the highest rank not yet assigned, pool leaves are just
//!    removed.
//! 2. *Activity priorities*: repeatedly take the highest-ranked class still
//!    in the tree; if it is a leaf, rank its unique edge and remove both,
//!    otherwise rank one of its edges leading to a pool leaf.
//!
//! Neither procedure is unique — the tie-break rule makes the outcome
//! deterministic, and every valid outcome is an acceptable priority order.
//!
//! The equilibrium occupancies follow from the priority order by a greedy
//! recursion over activities: each activity takes the smaller of the class's
//! remaining inflow and the pool's remaining service capacity,
//!
//! ```text
//! lambda_ij = min(lambda_i - sum_{(ij') before (ij)} lambda_ij',
//!                 mu_ij (beta_j - sum_{i' before i} lambda_i'j / mu_i'j)).
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Network};

/// Relative tolerance for "pool exactly full" decisions.
pub const FULL_TOL: f64 = 1e-9;

/// Deterministic rule for choosing among eligible leaves and edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TieBreak {
    /// Prefer the lowest class index, then the lowest pool index.
    #[default]
    LowestIndex,
    /// Prefer the highest class index, then the highest pool index.
    HighestIndex,
}

impl TieBreak {
    fn pick(&self, candidates: impl Iterator<Item = usize>) -> Option<usize> {
        match self {
            TieBreak::LowestIndex => candidates.min(),
            TieBreak::HighestIndex => candidates.max(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PriorityError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("priority order is inconsistent with the network: {0}")]
    Mismatch(String),
}

/// Total priority orders on classes and activities (rank 1 is highest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorityOrder {
    /// `class_rank[i]` in `1..=I`.
    class_rank: Vec<usize>,
    /// `activity_rank[k]` in `1..=|E|`, indexed like `Network::activities`.
    activity_rank: Vec<usize>,
    /// Activity indices sorted from highest to lowest priority.
    by_rank: Vec<usize>,
}

impl PriorityOrder {
    pub fn class_rank(&self, class: usize) -> usize {
        self.class_rank[class]
    }

    pub fn class_ranks(&self) -> &[usize] {
        &self.class_rank
    }

    pub fn activity_rank(&self, activity: usize) -> usize {
        self.activity_rank[activity]
    }

    /// Activity indices from highest priority (rank 1) to lowest.
    pub fn activities_by_rank(&self) -> &[usize] {
        &self.by_rank
    }

    /// The pool of the lowest-priority activity. Under the slack assumption
    /// this is the one pool left strictly under-occupied at equilibrium.
    pub fn lowest_priority_pool(&self, net: &Network) -> usize {
        net.activity(*self.by_rank.last().expect("at least one activity")).pool
    }

    pub fn to_json(&self, net: &Network) -> String {
        let file = PriorityOrderFile {
            class_rank: self.class_rank.clone(),
            activity_rank: self
                .by_rank
                .iter()
                .enumerate()
                .map(|(pos, &k)| {
                    let a = net.activity(k);
                    (a.class + 1, a.pool + 1, pos + 1)
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("priority order serialization cannot fail")
    }

    pub fn from_json(text: &str, net: &Network) -> Result<Self, PriorityError> {
        let file: PriorityOrderFile = serde_json::from_str(text)
            .map_err(|e| PriorityError::Mismatch(format!("malformed priority order: {e}")))?;
        if file.class_rank.len() != net.num_classes() {
            return Err(PriorityError::Mismatch(
                "class_rank length does not match the network".to_string(),
            ));
        }
        let mut activity_rank = vec![0usize; net.num_activities()];
        for (i, j, rank) in &file.activity_rank {
            let k = net
                .activity_index(i - 1, j - 1)
                .ok_or_else(|| PriorityError::Mismatch(format!("unknown activity ({i}, {j})")))?;
            activity_rank[k] = *rank;
        }
        let order = PriorityOrder::from_ranks(file.class_rank, activity_rank)?;
        order.check_against(net)?;
        Ok(order)
    }

    fn from_ranks(class_rank: Vec<usize>, activity_rank: Vec<usize>) -> Result<Self, PriorityError> {
        let mut by_rank: Vec<usize> = (0..activity_rank.len()).collect();
        by_rank.sort_by_key(|&k| activity_rank[k]);
        let order = PriorityOrder {
            class_rank,
            activity_rank,
            by_rank,
        };
        order.check_total()?;
        Ok(order)
    }

    fn check_total(&self) -> Result<(), PriorityError> {
        let mut seen = vec![false; self.class_rank.len()];
        for &r in &self.class_rank {
            if r == 0 || r > seen.len() || seen[r - 1] {
                return Err(PriorityError::Mismatch(
                    "class ranks are not a bijection onto 1..=I".to_string(),
                ));
            }
            seen[r - 1] = true;
        }
        let mut seen = vec![false; self.activity_rank.len()];
        for &r in &self.activity_rank {
            if r == 0 || r > seen.len() || seen[r - 1] {
                return Err(PriorityError::Mismatch(
                    "activity ranks are not a bijection onto 1..=|E|".to_string(),
                ));
            }
            seen[r - 1] = true;
        }
        Ok(())
    }

    /// Higher-priority classes must hold higher-priority activities.
    pub fn check_against(&self, net: &Network) -> Result<(), PriorityError> {
        for (ka, a) in net.activities().iter().enumerate() {
            for (kb, b) in net.activities().iter().enumerate() {
                if self.class_rank[a.class] < self.class_rank[b.class]
                    && self.activity_rank[ka] >= self.activity_rank[kb]
                {
                    return Err(PriorityError::Mismatch(format!(
                        "activity ({}, {}) of a higher-priority class ranks below ({}, {})",
                        a.class + 1,
                        a.pool + 1,
                        b.class + 1,
                        b.pool + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorityOrderFile {
    class_rank: Vec<usize>,
    /// `[class, pool, rank]`, 1-based.
    activity_rank: Vec<(usize, usize, usize)>,
}

/// Assign class and activity priorities by leaf elimination.
pub fn assign_priorities(net: &Network, tie_break: TieBreak) -> Result<PriorityOrder, ModelError> {
    let report = net.validate();
    if !report.is_empty() {
        return Err(ModelError::InvalidNetwork(report));
    }
    let nc = net.num_classes();
    let np = net.num_pools();

    // Degrees on the bipartite vertex set; vertices nc.. are pools.
    let mut degree = vec![0usize; nc + np];
    for a in net.activities() {
        degree[a.class] += 1;
        degree[nc + a.pool] += 1;
    }

    // Pass 1: class ranks. Rank an eligible class leaf when one exists,
    // otherwise strip the current pool leaves (their removal order cannot
    // affect which classes become leaves next).
    let mut class_rank = vec![0usize; nc];
    let mut removed = vec![false; nc + np];
    let mut deg = degree.clone();
    let mut next_rank = 1;
    while next_rank <= nc {
        let class_leaf = tie_break.pick(
            (0..nc).filter(|&i| !removed[i] && class_rank[i] == 0 && deg[i] <= 1),
        );
        if let Some(i) = class_leaf {
            class_rank[i] = next_rank;
            next_rank += 1;
            removed[i] = true;
            for &k in net.class_activities(i) {
                let a = net.activity(k);
                if !removed[nc + a.pool] {
                    deg[nc + a.pool] -= 1;
                }
            }
            continue;
        }
        let pool_leaves: Vec<usize> = (nc..nc + np)
            .filter(|&v| !removed[v] && deg[v] <= 1)
            .collect();
        assert!(
            !pool_leaves.is_empty(),
            "leaf elimination stalled; the activity set is not a tree"
        );
        for v in pool_leaves {
            removed[v] = true;
            for &k in net.pool_activities(v - nc) {
                let a = net.activity(k);
                if !removed[a.class] {
                    deg[a.class] -= 1;
                }
            }
        }
    }

    // Pass 2: activity ranks. Work down from the highest-priority class
    // remaining in the tree; a non-leaf class must have a pool-leaf neighbor.
    let mut classes_by_rank: Vec<usize> = (0..nc).collect();
    classes_by_rank.sort_by_key(|&i| class_rank[i]);
    let mut deg = degree;
    let mut edge_removed = vec![false; net.num_activities()];
    let mut activity_rank = vec![0usize; net.num_activities()];
    let mut next_rank = 1;
    for &i in &classes_by_rank {
        while deg[i] > 0 {
            let remaining: Vec<usize> = net
                .class_activities(i)
                .iter()
                .copied()
                .filter(|&k| !edge_removed[k])
                .collect();
            let k = if remaining.len() == 1 {
                remaining[0]
            } else {
                // The highest-priority class in the tree has at most one edge
                // to a non-leaf pool, so pool-leaf neighbors exist here.
                let leaf_edges = remaining
                    .iter()
                    .copied()
                    .filter(|&k| deg[nc + net.activity(k).pool] == 1);
                tie_break
                    .pick(leaf_edges.map(|k| net.activity(k).pool))
                    .and_then(|j| {
                        remaining
                            .iter()
                            .copied()
                            .find(|&k| net.activity(k).pool == j)
                    })
                    .expect("non-leaf class must have a pool-leaf neighbor")
            };
            activity_rank[k] = next_rank;
            next_rank += 1;
            edge_removed[k] = true;
            deg[i] -= 1;
            deg[nc + net.activity(k).pool] -= 1;
        }
    }

    Ok(PriorityOrder::from_ranks(class_rank, activity_rank)
        .expect("leaf elimination produces total orders"))
}

/// The LAP equilibrium: occupancies, empty queues, and the recursion rates.
#[derive(Debug, Clone)]
pub struct EquilibriumPoint {
    /// `psi*_ij = lambda_ij / mu_ij` per activity.
    pub psi_star: Vec<f64>,
    /// Recursion routing rates per activity (distinct from the SPP rates).
    pub lap_rates: Vec<f64>,
}

impl EquilibriumPoint {
    /// Equilibrium queues are identically zero.
    pub fn q_star(&self, net: &Network) -> Vec<f64> {
        vec![0.0; net.num_classes()]
    }

    /// Equilibrium occupancy of one pool.
    pub fn pool_occupancy(&self, net: &Network, pool: usize) -> f64 {
        net.pool_activities(pool)
            .iter()
            .map(|&k| self.psi_star[k])
            .sum()
    }
}

/// Run the equilibrium recursion in activity-priority order.
pub fn compute_equilibrium(net: &Network, po: &PriorityOrder) -> EquilibriumPoint {
    let mut remaining_inflow = net.lambda().to_vec();
    let mut remaining_space = net.beta().to_vec();
    let mut lap_rates = vec![0.0; net.num_activities()];
    let mut psi_star = vec![0.0; net.num_activities()];
    for &k in po.activities_by_rank() {
        let a = net.activity(k);
        let rate = (remaining_inflow[a.class]).min(a.mu * remaining_space[a.pool]);
        let rate = rate.max(0.0);
        lap_rates[k] = rate;
        psi_star[k] = rate / a.mu;
        remaining_inflow[a.class] -= rate;
        remaining_space[a.pool] -= rate / a.mu;
    }
    EquilibriumPoint { psi_star, lap_rates }
}

/// Outcome of the all-activities-needed check.
#[derive(Debug, Clone)]
pub struct Assumption3Report {
    pub holds: bool,
    pub diagnostic: String,
}

/// The equilibrium must use every activity, fill every pool except the
/// lowest-priority one, and leave that pool strictly slack.
pub fn check_assumption3(
    net: &Network,
    po: &PriorityOrder,
    eq: &EquilibriumPoint,
) -> Assumption3Report {
    let slack_pool = po.lowest_priority_pool(net);
    for j in 0..net.num_pools() {
        let occupancy = eq.pool_occupancy(net, j);
        let full = occupancy >= net.beta()[j] * (1.0 - FULL_TOL);
        if j == slack_pool {
            if full {
                return Assumption3Report {
                    holds: false,
                    diagnostic: format!(
                        "lowest-priority pool {} is full at equilibrium",
                        j + 1
                    ),
                };
            }
        } else if !full {
            return Assumption3Report {
                holds: false,
                diagnostic: format!(
                    "pool {} is not full at equilibrium ({} of {})",
                    j + 1,
                    occupancy,
                    net.beta()[j]
                ),
            };
        }
    }
    for (k, &rate) in eq.lap_rates.iter().enumerate() {
        if rate <= 0.0 {
            let a = net.activity(k);
            return Assumption3Report {
                holds: false,
                diagnostic: format!(
                    "activity ({}, {}) is unused at equilibrium",
                    a.class + 1,
                    a.pool + 1
                ),
            };
        }
    }
    Assumption3Report {
        holds: true,
        diagnostic: "all activities used; every pool full except the lowest-priority one"
            .to_string(),
    }
}
