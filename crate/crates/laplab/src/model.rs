//! Service-system instances and their static planning analysis.
//!
//! A [`Network`] is a bipartite graph on customer classes and server pools.
//! Each allowed (class, pool) pair is an *activity* carrying a positive
//! service rate; the activity set must form a tree spanning all classes and
//! pools. On top of a valid instance this module solves the *static planning
//! problem* (SPP)
//!
//! ```text
//! minimize rho
//! subject to  lambda_ij >= 0
//!             sum_j lambda_ij = lambda_i              (per class)
//!             sum_i lambda_ij / (beta_j mu_ij) <= rho (per pool)
//! ```
//!
//! and derives the dual variables `nu_i` (workload content of one class-`i`
//! customer) and `alpha_j` (share of total service effort at pool `j`), which
//! satisfy `nu_i mu_ij = alpha_j / beta_j` on every activity, `sum_j alpha_j
//! = 1`, and consequently `sum_i nu_i lambda_i = rho`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{self, LinearProgram, LpOutcome};

/// Tolerance for deciding whether two candidate optima have the same load.
pub const RHO_TOL: f64 = 1e-9;
/// Tolerance used when comparing routing-rate vectors for uniqueness.
const RATE_TOL: f64 = 1e-6;
/// A routing rate above this is counted as a basic activity.
const BASIC_TOL: f64 = 1e-9;

/// One allowed (class, pool) pair with its service rate. Indices are 0-based
/// internally; the JSON file format is 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activity {
    pub class: usize,
    pub pool: usize,
    pub mu: f64,
}

/// A multi-class multi-pool service instance with tree-structured activities.
///
/// Rates are fluid-scale: the system with scale parameter `r` sees class-`i`
/// arrivals at rate `lambda_i * r` and staffs pool `j` with
/// `floor(beta_j * r)` servers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    num_classes: usize,
    num_pools: usize,
    lambda: Vec<f64>,
    beta: Vec<f64>,
    activities: Vec<Activity>,
    /// Activity indices per class, i.e. the pools serving class `i`.
    class_activities: Vec<Vec<usize>>,
    /// Activity indices per pool, i.e. the classes pool `j` can serve.
    pool_activities: Vec<Vec<usize>>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network: {}", .0.join("; "))]
    InvalidNetwork(Vec<String>),
    #[error("static planning problem is infeasible")]
    InfeasibleLp,
    #[error("static planning optimum is degenerate: {0}")]
    DegenerateOptimum(String),
}

impl Network {
    /// Build a network; call [`Network::validate`] to check the invariants.
    pub fn new(
        lambda: Vec<f64>,
        beta: Vec<f64>,
        activities: Vec<(usize, usize, f64)>,
    ) -> Self {
        let num_classes = lambda.len();
        let num_pools = beta.len();
        let activities: Vec<Activity> = activities
            .into_iter()
            .map(|(class, pool, mu)| Activity { class, pool, mu })
            .collect();
        let mut class_activities = vec![Vec::new(); num_classes];
        let mut pool_activities = vec![Vec::new(); num_pools];
        for (k, a) in activities.iter().enumerate() {
            if a.class < num_classes {
                class_activities[a.class].push(k);
            }
            if a.pool < num_pools {
                pool_activities[a.pool].push(k);
            }
        }
        Network {
            num_classes,
            num_pools,
            lambda,
            beta,
            activities,
            class_activities,
            pool_activities,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pools(&self) -> usize {
        self.num_pools
    }

    pub fn num_activities(&self) -> usize {
        self.activities.len()
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn activities(&self) -> &[Activity] {
        &self.activities
    }

    pub fn activity(&self, k: usize) -> Activity {
        self.activities[k]
    }

    /// Activity indices of class `i` (the set `S(i)` as edges).
    pub fn class_activities(&self, class: usize) -> &[usize] {
        &self.class_activities[class]
    }

    /// Activity indices of pool `j` (the set `C(j)` as edges).
    pub fn pool_activities(&self, pool: usize) -> &[usize] {
        &self.pool_activities[pool]
    }

    /// Index of the activity (class, pool), if allowed.
    pub fn activity_index(&self, class: usize, pool: usize) -> Option<usize> {
        self.activities
            .iter()
            .position(|a| a.class == class && a.pool == pool)
    }

    /// Report every violated invariant; an empty report means valid.
    ///
    /// Messages use 1-based class/pool indices, matching the file format.
    pub fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.num_classes == 0 {
            report.push("network must have at least one class".to_string());
        }
        if self.num_pools == 0 {
            report.push("network must have at least one pool".to_string());
        }
        for (i, &l) in self.lambda.iter().enumerate() {
            if !(l > 0.0) || !l.is_finite() {
                report.push(format!("arrival rate of class {} must be positive", i + 1));
            }
        }
        for (j, &b) in self.beta.iter().enumerate() {
            if !(b > 0.0) || !b.is_finite() {
                report.push(format!("pool size of pool {} must be positive", j + 1));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for a in &self.activities {
            if a.class >= self.num_classes || a.pool >= self.num_pools {
                report.push(format!(
                    "activity ({}, {}) references an unknown class or pool",
                    a.class + 1,
                    a.pool + 1
                ));
                continue;
            }
            if !(a.mu > 0.0) || !a.mu.is_finite() {
                report.push(format!(
                    "activity ({}, {}) must have a positive service rate",
                    a.class + 1,
                    a.pool + 1
                ));
            }
            if !seen.insert((a.class, a.pool)) {
                report.push(format!(
                    "duplicate activity ({}, {})",
                    a.class + 1,
                    a.pool + 1
                ));
            }
        }
        if !report.is_empty() {
            // Structural checks below assume well-formed indices.
            return report;
        }
        for (i, acts) in self.class_activities.iter().enumerate() {
            if acts.is_empty() {
                report.push(format!("class {} touches no activity", i + 1));
            }
        }
        for (j, acts) in self.pool_activities.iter().enumerate() {
            if acts.is_empty() {
                report.push(format!("pool {} touches no activity", j + 1));
            }
        }
        if !self.is_tree() {
            report.push("activity set not a tree".to_string());
        }
        report
    }

    /// Connected and acyclic on the bipartite vertex set, i.e.
    /// `|E| = I + J - 1` plus connectivity.
    fn is_tree(&self) -> bool {
        let n = self.num_classes + self.num_pools;
        if self.activities.len() + 1 != n {
            return false;
        }
        // BFS over classes (0..I) and pools (I..I+J).
        let mut visited = vec![false; n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        visited[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            let neighbors: Vec<usize> = if v < self.num_classes {
                self.class_activities[v]
                    .iter()
                    .map(|&k| self.num_classes + self.activities[k].pool)
                    .collect()
            } else {
                self.pool_activities[v - self.num_classes]
                    .iter()
                    .map(|&k| self.activities[k].class)
                    .collect()
            };
            for w in neighbors {
                if !visited[w] {
                    visited[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == n
    }

    fn require_valid(&self) -> Result<(), ModelError> {
        let report = self.validate();
        if report.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidNetwork(report))
        }
    }
}

// ---------------------------------------------------------------------------
// JSON file format
// ---------------------------------------------------------------------------

/// On-disk form of [`Network`]: 1-based `[class, pool, mu]` activity triples.
#[derive(Debug, Serialize, Deserialize)]
struct NetworkFile {
    classes: usize,
    pools: usize,
    lambda: Vec<f64>,
    beta: Vec<f64>,
    activities: Vec<(usize, usize, f64)>,
}

impl Network {
    pub fn to_json(&self) -> String {
        let file = NetworkFile {
            classes: self.num_classes,
            pools: self.num_pools,
            lambda: self.lambda.clone(),
            beta: self.beta.clone(),
            activities: self
                .activities
                .iter()
                .map(|a| (a.class + 1, a.pool + 1, a.mu))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("network serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: NetworkFile = serde_json::from_str(text)?;
        Ok(Network::new(
            file.lambda,
            file.beta,
            file.activities
                .into_iter()
                .map(|(i, j, mu)| (i.wrapping_sub(1), j.wrapping_sub(1), mu))
                .collect(),
        ))
    }
}

// ---------------------------------------------------------------------------
// Static planning problem
// ---------------------------------------------------------------------------

/// Optimal solution of the static planning problem.
#[derive(Debug, Clone)]
pub struct SppSolution {
    /// Routing rate per activity (indexed like `Network::activities`).
    pub routing_rates: Vec<f64>,
    /// Minimized maximum pool load.
    pub rho: f64,
    /// Activity indices with strictly positive routing rate.
    pub basic_activities: Vec<usize>,
}

/// Unique positive duals of the planning problem on a tree.
#[derive(Debug, Clone)]
pub struct DualVariables {
    /// Workload carried by one customer of each class.
    pub nu: Vec<f64>,
    /// Per-pool service-effort shares, summing to one.
    pub alpha: Vec<f64>,
}

/// Outcome of the complete-resource-pooling check.
#[derive(Debug, Clone)]
pub struct CrpReport {
    pub holds: bool,
    pub diagnostic: String,
}

/// Assemble the planning LP in standard form. Variable layout:
/// `[lambda_e for e in E] ++ [rho] ++ [slack_j for j in pools]`.
fn planning_lp(net: &Network, rate_costs: Option<&[f64]>) -> LinearProgram {
    let ne = net.num_activities();
    let n = ne + 1 + net.num_pools();
    let mut rows = Vec::new();
    for i in 0..net.num_classes() {
        let mut row = vec![0.0; n];
        for &k in net.class_activities(i) {
            row[k] = 1.0;
        }
        rows.push((row, net.lambda()[i]));
    }
    for j in 0..net.num_pools() {
        let mut row = vec![0.0; n];
        for &k in net.pool_activities(j) {
            let a = net.activity(k);
            row[k] = 1.0 / (net.beta()[j] * a.mu);
        }
        row[ne] = -1.0;
        row[ne + 1 + j] = 1.0;
        rows.push((row, 0.0));
    }
    let mut objective = vec![0.0; n];
    objective[ne] = 1.0;
    if let Some(costs) = rate_costs {
        objective[..ne].copy_from_slice(costs);
    }
    LinearProgram {
        num_vars: n,
        objective,
        rows,
    }
}

fn max_pool_load(net: &Network, rates: &[f64]) -> f64 {
    (0..net.num_pools())
        .map(|j| {
            net.pool_activities(j)
                .iter()
                .map(|&k| rates[k] / (net.beta()[j] * net.activity(k).mu))
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn solve_planning(net: &Network, rate_costs: Option<&[f64]>) -> Result<Vec<f64>, ModelError> {
    match lp::solve(&planning_lp(net, rate_costs)) {
        LpOutcome::Optimal { x, .. } => Ok(x[..net.num_activities()].to_vec()),
        LpOutcome::Infeasible => Err(ModelError::InfeasibleLp),
        // rho >= 0 and slacks bounded by flows: cannot happen on valid nets.
        LpOutcome::Unbounded => Err(ModelError::InfeasibleLp),
    }
}

/// Solve the LP plus a uniqueness probe: re-solve under two small opposing
/// tie-breaking costs on the routing rates and compare the minimizers. If the
/// perturbed optima stay within [`RHO_TOL`] of the optimal load but select
/// materially different rates, the optimum is not unique.
fn solve_with_uniqueness(net: &Network) -> Result<(SppSolution, Option<String>), ModelError> {
    let base = solve_planning(net, None)?;
    let rho = max_pool_load(net, &base);

    let ne = net.num_activities();
    // Deterministic pseudo-random tie-breaking directions.
    let eps = 1e-7;
    let dir: Vec<f64> = (0..ne)
        .map(|k| eps * ((k as u64).wrapping_mul(2654435761) % 997 + 1) as f64 / 997.0)
        .collect();
    let opposite: Vec<f64> = dir.iter().map(|c| eps - c).collect();

    let mut witness = None;
    for costs in [&dir, &opposite] {
        let probed = solve_planning(net, Some(costs))?;
        let probed_rho = max_pool_load(net, &probed);
        if probed_rho > rho + RHO_TOL {
            // The perturbation overwhelmed the objective; with eps this small
            // that would mean the optimal face is huge. Treat as degenerate.
            witness = Some(format!(
                "tie-broken optimum drifted from load {rho:.12} to {probed_rho:.12}"
            ));
            break;
        }
        let max_diff = probed
            .iter()
            .zip(&base)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if max_diff > RATE_TOL {
            witness = Some(format!(
                "two optima with load within {RHO_TOL:.0e} differ by {max_diff:.3e} in routing rates"
            ));
            break;
        }
    }

    let basic_activities = (0..ne).filter(|&k| base[k] > BASIC_TOL).collect();
    Ok((
        SppSolution {
            routing_rates: base,
            rho,
            basic_activities,
        },
        witness,
    ))
}

/// Solve the static planning problem.
///
/// Fails on invalid networks, on infeasible data, and when the minimizer is
/// not unique (complete resource pooling violated).
pub fn solve_spp(net: &Network) -> Result<SppSolution, ModelError> {
    net.require_valid()?;
    let (solution, witness) = solve_with_uniqueness(net)?;
    match witness {
        Some(w) => Err(ModelError::DegenerateOptimum(w)),
        None => Ok(solution),
    }
}

/// Check complete resource pooling: the optimum must be unique and its basic
/// activities must span the whole activity tree.
pub fn check_crp(sol: &SppSolution, net: &Network) -> CrpReport {
    if let Err(ModelError::InvalidNetwork(report)) = net.require_valid() {
        return CrpReport {
            holds: false,
            diagnostic: report.join("; "),
        };
    }
    match solve_with_uniqueness(net) {
        Ok((_, Some(witness))) => CrpReport {
            holds: false,
            diagnostic: format!("optimum is not unique: {witness}"),
        },
        Ok((_, None)) => {
            if sol.basic_activities.len() == net.num_activities() {
                CrpReport {
                    holds: true,
                    diagnostic: "unique optimum; basic activities span the tree".to_string(),
                }
            } else {
                let zero: Vec<String> = (0..net.num_activities())
                    .filter(|k| !sol.basic_activities.contains(k))
                    .map(|k| {
                        let a = net.activity(k);
                        format!("({}, {})", a.class + 1, a.pool + 1)
                    })
                    .collect();
                CrpReport {
                    holds: false,
                    diagnostic: format!(
                        "activities {} carry zero flow at the optimum; basic activities do not span the tree",
                        zero.join(", ")
                    ),
                }
            }
        }
        Err(e) => CrpReport {
            holds: false,
            diagnostic: e.to_string(),
        },
    }
}

/// Compute the unique dual variables by propagating the edge relations
/// `nu_i mu_ij = alpha_j / beta_j` over the activity tree and normalizing
/// `sum_j alpha_j = 1`. Rooted at pool 1 for a deterministic traversal.
pub fn compute_duals(net: &Network) -> Result<DualVariables, ModelError> {
    net.require_valid()?;
    let nc = net.num_classes();
    let np = net.num_pools();
    let mut nu = vec![f64::NAN; nc];
    let mut alpha = vec![f64::NAN; np];
    alpha[0] = 1.0;
    let mut queue = std::collections::VecDeque::from([nc]); // vertex id: pools offset by nc
    let mut visited = vec![false; nc + np];
    visited[nc] = true;
    while let Some(v) = queue.pop_front() {
        if v < nc {
            // class vertex: set alpha on unvisited neighboring pools
            for &k in net.class_activities(v) {
                let a = net.activity(k);
                let w = nc + a.pool;
                if !visited[w] {
                    visited[w] = true;
                    alpha[a.pool] = nu[v] * a.mu * net.beta()[a.pool];
                    queue.push_back(w);
                }
            }
        } else {
            let j = v - nc;
            for &k in net.pool_activities(j) {
                let a = net.activity(k);
                if !visited[a.class] {
                    visited[a.class] = true;
                    nu[a.class] = alpha[j] / (net.beta()[j] * a.mu);
                    queue.push_back(a.class);
                }
            }
        }
    }
    let total: f64 = alpha.iter().sum();
    for a in alpha.iter_mut() {
        *a /= total;
    }
    for n in nu.iter_mut() {
        *n /= total;
    }
    Ok(DualVariables { nu, alpha })
}

/// `sum_i nu_i lambda_i`, which equals the optimal load under complete
/// resource pooling.
pub fn workload_rate(net: &Network, duals: &DualVariables) -> f64 {
    duals
        .nu
        .iter()
        .zip(net.lambda())
        .map(|(n, l)| n * l)
        .sum()
}
