//! Shared fixtures and independent oracles for the integration tests.
//!
//! Everything here deliberately avoids the library's own solvers: the LP
//! oracle enumerates basic solutions with its own Gaussian elimination, and
//! the queueing formulas come from the textbook recursions.

use laplab::model::Network;
use rand::Rng;

/// Single class, single pool: `lambda = 0.5`, unit service.
pub fn net_1() -> Network {
    Network::new(vec![0.5], vec![1.0], vec![(0, 0, 1.0)])
}

/// Two classes, two pools, N-shaped tree. All service rates 1,
/// `lambda = (0.5, 1.2)`, `rho = 0.85`.
pub fn net_n() -> Network {
    Network::new(
        vec![0.5, 1.2],
        vec![1.0, 1.0],
        vec![(0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)],
    )
}

/// Two classes sharing one pool with distinct service rates.
pub fn net_w() -> Network {
    Network::new(vec![0.3, 0.4], vec![1.0], vec![(0, 0, 1.0), (1, 0, 2.0)])
}

pub fn canonical_nets() -> Vec<(&'static str, Network)> {
    vec![("net_1", net_1()), ("net_n", net_n()), ("net_w", net_w())]
}

/// Mean number in system for M/M/N: Erlang blocking recursion, then the
/// waiting factor.
pub fn erlang_c_mean_in_system(arrival: f64, mu: f64, servers: u64) -> f64 {
    let a = arrival / mu;
    let mut b = 1.0;
    for n in 1..=servers {
        b = a * b / (n as f64 + a * b);
    }
    let rho = a / servers as f64;
    let c = b / (1.0 - rho * (1.0 - b));
    c * rho / (1.0 - rho) + a
}

/// Solve a square linear system by Gaussian elimination with partial
/// pivoting; `None` when singular.
fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                let delta = factor * a[col][k];
                a[row][k] -= delta;
            }
            b[row] -= factor * b[col];
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Brute-force LP oracle: enumerate every basis of the standard-form
/// planning problem and take the smallest feasible `rho`.
///
/// Variables are `[rate_e | rho | slack_j]`; constraints are per-class flow
/// conservation and per-pool load balance.
pub fn vertex_enumeration_rho(net: &Network) -> Option<f64> {
    let ne = net.num_activities();
    let nc = net.num_classes();
    let np = net.num_pools();
    let n = ne + 1 + np;
    let m = nc + np;
    assert!(n <= 20, "vertex enumeration only works on tiny instances");

    // Dense constraint matrix.
    let mut rows = vec![vec![0.0; n]; m];
    let mut rhs = vec![0.0; m];
    for i in 0..nc {
        for &k in net.class_activities(i) {
            rows[i][k] = 1.0;
        }
        rhs[i] = net.lambda()[i];
    }
    for j in 0..np {
        for &k in net.pool_activities(j) {
            rows[nc + j][k] = 1.0 / (net.beta()[j] * net.activity(k).mu);
        }
        rows[nc + j][ne] = -1.0;
        rows[nc + j][ne + 1 + j] = 1.0;
    }

    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let cols: Vec<usize> = (0..n).filter(|&c| mask & (1 << c) != 0).collect();
        let basis: Vec<Vec<f64>> = (0..m)
            .map(|r| cols.iter().map(|&c| rows[r][c]).collect())
            .collect();
        let Some(x_basis) = solve_square(basis, rhs.clone()) else {
            continue;
        };
        if x_basis.iter().any(|&v| v < -1e-9) {
            continue;
        }
        let rho = cols
            .iter()
            .position(|&c| c == ne)
            .map(|pos| x_basis[pos])
            .unwrap_or(0.0);
        best = Some(match best {
            Some(cur) => cur.min(rho),
            None => rho,
        });
    }
    best
}

/// Random bipartite spanning tree over `nc` classes and `np` pools.
fn random_tree_edges(nc: usize, np: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    // Grow a connected set, always joining a new vertex to an opposite-kind
    // vertex already in the set. Vertices 0..nc are classes.
    let total = nc + np;
    let mut in_set = vec![false; total];
    let mut order: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    // Seed with one class and one pool to keep the opposite-kind rule easy.
    let first_class = *order.iter().find(|&&v| v < nc).unwrap();
    let first_pool = *order.iter().find(|&&v| v >= nc).unwrap();
    let mut edges = vec![(first_class, first_pool - nc)];
    in_set[first_class] = true;
    in_set[first_pool] = true;
    for &v in &order {
        if in_set[v] {
            continue;
        }
        let partners: Vec<usize> = (0..total)
            .filter(|&u| in_set[u] && (u < nc) != (v < nc))
            .collect();
        let u = partners[rng.random_range(0..partners.len())];
        let (class, pool) = if v < nc { (v, u - nc) } else { (u, v - nc) };
        edges.push((class, pool));
        in_set[v] = true;
    }
    edges
}

/// Random valid tree networks with up to four classes and pools.
pub fn random_tree_network(rng: &mut impl Rng) -> Network {
    let nc = rng.random_range(1..=4);
    let np = rng.random_range(1..=4);
    let edges = random_tree_edges(nc, np, rng);
    let lambda: Vec<f64> = (0..nc).map(|_| 0.2 + 0.8 * rng.random::<f64>()).collect();
    let beta: Vec<f64> = (0..np).map(|_| 0.5 + 1.5 * rng.random::<f64>()).collect();
    let activities = edges
        .into_iter()
        .map(|(i, j)| (i, j, 0.5 + 1.5 * rng.random::<f64>()))
        .collect();
    Network::new(lambda, beta, activities)
}

/// Rejection-sample a tree network where the planning optimum is unique and
/// uses every activity (the setting all scaling results assume).
pub fn random_crp_network(rng: &mut impl Rng) -> Network {
    loop {
        let net = random_tree_network(rng);
        if !net.validate().is_empty() {
            continue;
        }
        let Ok(sol) = laplab::model::solve_spp(&net) else {
            continue;
        };
        if laplab::model::check_crp(&sol, &net).holds {
            return net;
        }
    }
}
