//! Exact continuous-time Markov chain simulation of the scaled system under
//! the leaf-activity-priority discipline.
//!
//! The system with scale parameter `r` sees class-`i` Poisson arrivals at
//! rate `lambda_i * r` and staffs pool `j` with `floor(beta_j * r)` servers;
//! a class-`i` service at pool `j` completes at rate `mu_ij`. The simulation
//! is event-driven with a single aggregated exponential clock: the total
//! event rate is recomputed after every transition and the event type is
//! drawn categorically, which keeps the chain exact at the cost of a linear
//! scan over the (tiny) rate vector.
//!
//! Routing and scheduling follow the priority order: an arrival starts
//! service at the highest-priority activity whose pool has an idle server
//! (queueing only when none has), and a server freed by a departure picks
//! the highest-priority class with a nonempty queue. No other control is
//! exercised, so the chain state is exactly `(Psi_ij, Q_i)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{compute_duals, Network};
use crate::priority::{EquilibriumPoint, PriorityOrder};
use crate::rng::{exp_sample, run_rng};
use crate::stats::{batch_means, Estimate, StatsError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("total event rate is zero; no transition possible")]
    ZeroTotalRate,
    #[error("initial state is invalid: {0}")]
    InvalidInitialState(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("truncated state space has {0} states, exceeding the {1} limit")]
    StateSpaceTooLarge(usize, usize),
}

/// Number of servers in pool `j` at scale `r`. The tiny guard keeps products
/// like `0.3 * 10` from flooring to 2 due to binary rounding.
pub fn pool_capacity(beta_j: f64, r: u64) -> u64 {
    (beta_j * r as f64 + 1e-9).floor() as u64
}

/// Integer occupancy/queue state of the scaled chain plus cumulative
/// counters.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    r: u64,
    /// In-service counts per activity.
    psi: Vec<u64>,
    /// Queue lengths per class.
    q: Vec<u64>,
    /// Simulation clock.
    t: f64,
    /// Cumulative arrivals per class.
    arrivals: Vec<u64>,
    /// Cumulative departures per activity.
    departures: Vec<u64>,
    /// Cumulative service starts per activity.
    service_starts: Vec<u64>,
    /// Cached occupancy per pool.
    pool_used: Vec<u64>,
    /// Server counts per pool at this scale.
    capacity: Vec<u64>,
}

impl SystemState {
    pub fn empty(net: &Network, r: u64) -> Self {
        SystemState {
            r,
            psi: vec![0; net.num_activities()],
            q: vec![0; net.num_classes()],
            t: 0.0,
            arrivals: vec![0; net.num_classes()],
            departures: vec![0; net.num_activities()],
            service_starts: vec![0; net.num_activities()],
            pool_used: vec![0; net.num_pools()],
            capacity: (0..net.num_pools())
                .map(|j| pool_capacity(net.beta()[j], r))
                .collect(),
        }
    }

    /// `Psi_ij = round(psi*_ij r)` clipped into pool capacity (shaving the
    /// lowest-priority activity on overflow), queues empty.
    pub fn equilibrium_rounded(
        net: &Network,
        po: &PriorityOrder,
        eq: &EquilibriumPoint,
        r: u64,
    ) -> Self {
        let mut state = SystemState::empty(net, r);
        for (k, &psi_star) in eq.psi_star.iter().enumerate() {
            state.psi[k] = (psi_star * r as f64).round().max(0.0) as u64;
        }
        for j in 0..net.num_pools() {
            let mut used: u64 = net.pool_activities(j).iter().map(|&k| state.psi[k]).sum();
            while used > state.capacity[j] {
                let victim = net
                    .pool_activities(j)
                    .iter()
                    .copied()
                    .filter(|&k| state.psi[k] > 0)
                    .max_by_key(|&k| po.activity_rank(k))
                    .expect("occupied pool has an occupied activity");
                state.psi[victim] -= 1;
                used -= 1;
            }
            state.pool_used[j] = used;
        }
        state
    }

    /// Build an explicit state, validating capacities and work conservation.
    pub fn explicit(
        net: &Network,
        r: u64,
        psi: Vec<u64>,
        q: Vec<u64>,
    ) -> Result<Self, SimError> {
        if psi.len() != net.num_activities() || q.len() != net.num_classes() {
            return Err(SimError::InvalidInitialState(
                "state dimensions do not match the network".to_string(),
            ));
        }
        let mut state = SystemState::empty(net, r);
        state.psi = psi;
        state.q = q;
        for j in 0..net.num_pools() {
            state.pool_used[j] = net.pool_activities(j).iter().map(|&k| state.psi[k]).sum();
        }
        state
            .check_invariants(net)
            .map_err(SimError::InvalidInitialState)?;
        Ok(state)
    }

    pub fn r(&self) -> u64 {
        self.r
    }

    pub fn psi(&self) -> &[u64] {
        &self.psi
    }

    pub fn q(&self) -> &[u64] {
        &self.q
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn arrivals(&self) -> &[u64] {
        &self.arrivals
    }

    pub fn departures(&self) -> &[u64] {
        &self.departures
    }

    pub fn service_starts(&self) -> &[u64] {
        &self.service_starts
    }

    pub fn pool_in_service(&self, pool: usize) -> u64 {
        self.pool_used[pool]
    }

    pub fn capacity(&self, pool: usize) -> u64 {
        self.capacity[pool]
    }

    pub fn total_in_system(&self) -> u64 {
        self.psi.iter().sum::<u64>() + self.q.iter().sum::<u64>()
    }

    /// Verify capacity bounds, cache consistency, and work conservation
    /// (a queued class never coexists with an idle compatible server).
    pub fn check_invariants(&self, net: &Network) -> Result<(), String> {
        for j in 0..net.num_pools() {
            let used: u64 = net.pool_activities(j).iter().map(|&k| self.psi[k]).sum();
            if used != self.pool_used[j] {
                return Err(format!("pool {} cache out of sync", j + 1));
            }
            if used > self.capacity[j] {
                return Err(format!(
                    "pool {} holds {} customers with only {} servers",
                    j + 1,
                    used,
                    self.capacity[j]
                ));
            }
        }
        for i in 0..net.num_classes() {
            if self.q[i] > 0 {
                for &k in net.class_activities(i) {
                    let j = net.activity(k).pool;
                    if self.pool_used[j] < self.capacity[j] {
                        return Err(format!(
                            "class {} queues while pool {} has an idle server",
                            i + 1,
                            j + 1
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Deviation from the equilibrium center `(psi* r, 0)`: L1 and Euclidean
    /// norms of `(Psi - psi* r, Q)`.
    pub fn deviation_norms(&self, eq: &EquilibriumPoint) -> (f64, f64) {
        let r = self.r as f64;
        let mut l1 = 0.0;
        let mut sq = 0.0;
        for (k, &p) in self.psi.iter().enumerate() {
            let d = p as f64 - eq.psi_star[k] * r;
            l1 += d.abs();
            sq += d * d;
        }
        for &qi in &self.q {
            let d = qi as f64;
            l1 += d;
            sq += d * d;
        }
        (l1, sq.sqrt())
    }
}

/// What happened at one transition of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Arrival { class: usize },
    Departure { class: usize, pool: usize },
}

/// Route an arriving class-`i` customer: start service at the
/// highest-priority activity with an idle server, otherwise queue.
pub fn route_arrival(state: &mut SystemState, class: usize, net: &Network, po: &PriorityOrder) {
    state.arrivals[class] += 1;
    let target = net
        .class_activities(class)
        .iter()
        .copied()
        .filter(|&k| {
            let j = net.activity(k).pool;
            state.pool_used[j] < state.capacity[j]
        })
        .min_by_key(|&k| po.activity_rank(k));
    match target {
        Some(k) => {
            state.psi[k] += 1;
            state.service_starts[k] += 1;
            state.pool_used[net.activity(k).pool] += 1;
        }
        None => state.q[class] += 1,
    }
}

/// Hand a freed pool-`j` server to the highest-priority queued class it can
/// serve; it idles when no compatible queue is nonempty.
pub fn schedule_server(state: &mut SystemState, pool: usize, net: &Network, po: &PriorityOrder) {
    let pick = net
        .pool_activities(pool)
        .iter()
        .copied()
        .filter(|&k| state.q[net.activity(k).class] > 0)
        .min_by_key(|&k| po.class_rank(net.activity(k).class));
    if let Some(k) = pick {
        state.q[net.activity(k).class] -= 1;
        state.psi[k] += 1;
        state.service_starts[k] += 1;
        state.pool_used[pool] += 1;
    }
}

/// Complete one class-`i` service at `activity`'s pool and immediately hand
/// the freed server to the scheduler.
pub fn apply_departure(
    state: &mut SystemState,
    activity: usize,
    net: &Network,
    po: &PriorityOrder,
) {
    let a = net.activity(activity);
    assert!(state.psi[activity] > 0, "departure from an empty activity");
    state.psi[activity] -= 1;
    state.departures[activity] += 1;
    state.pool_used[a.pool] -= 1;
    schedule_server(state, a.pool, net, po);
}

fn total_rate(state: &SystemState, net: &Network) -> f64 {
    let r = state.r as f64;
    let mut total: f64 = net.lambda().iter().map(|l| l * r).sum();
    for (k, a) in net.activities().iter().enumerate() {
        total += a.mu * state.psi[k] as f64;
    }
    total
}

/// Draw the event category proportionally to the rates and apply it.
fn pick_and_apply(
    state: &mut SystemState,
    net: &Network,
    po: &PriorityOrder,
    rng: &mut ChaCha8Rng,
    total: f64,
) -> Event {
    let r = state.r as f64;
    let mut pick = rng.random::<f64>() * total;
    for i in 0..net.num_classes() {
        let rate = net.lambda()[i] * r;
        if pick < rate {
            route_arrival(state, i, net, po);
            return Event::Arrival { class: i };
        }
        pick -= rate;
    }
    for (k, a) in net.activities().iter().enumerate() {
        let rate = a.mu * state.psi[k] as f64;
        if pick < rate {
            apply_departure(state, k, net, po);
            return Event::Departure {
                class: a.class,
                pool: a.pool,
            };
        }
        pick -= rate;
    }
    // Rounding pushed `pick` past the cumulative sum: take the last category
    // with a positive rate.
    if let Some((k, a)) = net
        .activities()
        .iter()
        .enumerate()
        .rev()
        .find(|(k, _)| state.psi[*k] > 0)
    {
        apply_departure(state, k, net, po);
        return Event::Departure {
            class: a.class,
            pool: a.pool,
        };
    }
    route_arrival(state, net.num_classes() - 1, net, po);
    Event::Arrival {
        class: net.num_classes() - 1,
    }
}

/// Advance the chain by one event: exponential holding time at the total
/// rate, category drawn proportionally to the individual rates.
pub fn step_event(
    state: &mut SystemState,
    net: &Network,
    po: &PriorityOrder,
    rng: &mut ChaCha8Rng,
) -> Result<Event, SimError> {
    let total = total_rate(state, net);
    if total <= 0.0 {
        return Err(SimError::ZeroTotalRate);
    }
    state.t += exp_sample(rng, total);
    Ok(pick_and_apply(state, net, po, rng, total))
}

/// How to initialize a run.
#[derive(Debug, Clone, Default)]
pub enum InitialState {
    #[default]
    Empty,
    /// `Psi_ij = round(psi*_ij r)` clipped to capacity, queues empty.
    EquilibriumRounded,
    Explicit(Box<SystemState>),
}

/// Configuration of one simulation run.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub horizon: f64,
    pub warmup: f64,
    pub initial: InitialState,
    pub sample_interval: f64,
}

impl SimConfig {
    pub fn new(seed: u64, horizon: f64, warmup: f64) -> Self {
        assert!(horizon > warmup && warmup >= 0.0);
        SimConfig {
            seed,
            horizon,
            warmup,
            initial: InitialState::Empty,
            sample_interval: (horizon - warmup) / 100.0,
        }
    }
}

/// States sampled on a fixed grid after warmup.
#[derive(Debug, Clone)]
pub struct Trace {
    pub times: Vec<f64>,
    pub psi: Vec<Vec<u64>>,
    pub q: Vec<Vec<u64>>,
    pub norm: Vec<f64>,
}

impl Trace {
    /// CSV rows `t, psi_<i>_<j>..., q_<i>..., norm_F` (Euclidean deviation).
    pub fn to_csv(&self, net: &Network) -> String {
        let mut out = String::from("t");
        for a in net.activities() {
            out.push_str(&format!(",psi_{}_{}", a.class + 1, a.pool + 1));
        }
        for i in 0..net.num_classes() {
            out.push_str(&format!(",q_{}", i + 1));
        }
        out.push_str(",norm_F\n");
        for row in 0..self.times.len() {
            out.push_str(&format!("{}", self.times[row]));
            for v in &self.psi[row] {
                out.push_str(&format!(",{v}"));
            }
            for v in &self.q[row] {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", self.norm[row]));
        }
        out
    }
}

/// Time averages over the post-warmup window.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SimSummary {
    pub time_avg_psi: Vec<f64>,
    pub time_avg_q: Vec<f64>,
    pub mean_total: f64,
    /// Time-average L1 deviation norm from the equilibrium center.
    pub mean_norm1: f64,
    /// Time-average Euclidean deviation norm.
    pub mean_norm2: f64,
    /// Time-average fluid-scaled workload `sum_i nu_i x_i / r`.
    pub mean_workload: f64,
    pub events: u64,
}

struct Accumulators {
    psi: Vec<f64>,
    q: Vec<f64>,
    total: f64,
    norm1: f64,
    norm2: f64,
    workload: f64,
    /// Time spent with the Euclidean deviation norm above the tail
    /// threshold, when one is tracked.
    tail: f64,
    weight: f64,
}

impl Accumulators {
    fn new(ne: usize, nc: usize) -> Self {
        Accumulators {
            psi: vec![0.0; ne],
            q: vec![0.0; nc],
            total: 0.0,
            norm1: 0.0,
            norm2: 0.0,
            workload: 0.0,
            tail: 0.0,
            weight: 0.0,
        }
    }

    fn summary(&self, events: u64) -> SimSummary {
        let w = self.weight.max(f64::MIN_POSITIVE);
        SimSummary {
            time_avg_psi: self.psi.iter().map(|v| v / w).collect(),
            time_avg_q: self.q.iter().map(|v| v / w).collect(),
            mean_total: self.total / w,
            mean_norm1: self.norm1 / w,
            mean_norm2: self.norm2 / w,
            mean_workload: self.workload / w,
            events,
        }
    }
}

fn initial_state(net: &Network, po: &PriorityOrder, eq: &EquilibriumPoint, r: u64, init: &InitialState) -> SystemState {
    match init {
        InitialState::Empty => SystemState::empty(net, r),
        InitialState::EquilibriumRounded => SystemState::equilibrium_rounded(net, po, eq, r),
        InitialState::Explicit(state) => (**state).clone(),
    }
}

/// Drive the chain to `cfg.horizon`, sampling a trace after `cfg.warmup` and
/// accumulating exact time averages over the post-warmup window.
pub fn simulate_horizon(
    net: &Network,
    po: &PriorityOrder,
    eq: &EquilibriumPoint,
    r: u64,
    cfg: &SimConfig,
) -> Result<(Trace, SimSummary), SimError> {
    let mut rng = run_rng(cfg.seed);
    simulate_horizon_with(net, po, eq, r, cfg, &mut rng)
}

/// As [`simulate_horizon`], drawing randomness from the supplied stream
/// (used by experiment fan-out; `cfg.seed` is ignored).
pub fn simulate_horizon_with(
    net: &Network,
    po: &PriorityOrder,
    eq: &EquilibriumPoint,
    r: u64,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Trace, SimSummary), SimError> {
    let duals = compute_duals(net).map_err(|e| SimError::InvalidInitialState(e.to_string()))?;
    let nu_by_class = duals.nu;
    let mut state = initial_state(net, po, eq, r, &cfg.initial);
    let mut acc = Accumulators::new(net.num_activities(), net.num_classes());
    let mut trace = Trace {
        times: Vec::new(),
        psi: Vec::new(),
        q: Vec::new(),
        norm: Vec::new(),
    };
    let mut next_sample = cfg.warmup;
    let mut events = 0u64;
    while state.t < cfg.horizon {
        let total = total_rate(&state, net);
        if total <= 0.0 {
            return Err(SimError::ZeroTotalRate);
        }
        let t_prev = state.t;
        let t_next = t_prev + exp_sample(rng, total);
        let t_new = t_next.min(cfg.horizon);
        // The pre-event state holds on [t_prev, t_new).
        while next_sample <= t_new + 1e-12 && next_sample <= cfg.horizon + 1e-12 {
            trace.times.push(next_sample);
            trace.psi.push(state.psi.clone());
            trace.q.push(state.q.clone());
            trace.norm.push(state.deviation_norms(eq).1);
            next_sample += cfg.sample_interval;
        }
        let lo = t_prev.max(cfg.warmup);
        if t_new > lo {
            acc_deposit(&mut acc, &state, eq, net, &nu_by_class, None, t_new - lo);
        }
        if t_next >= cfg.horizon {
            state.t = cfg.horizon;
            break;
        }
        state.t = t_next;
        pick_and_apply(&mut state, net, po, rng, total);
        events += 1;
    }
    Ok((trace, acc.summary(events)))
}

fn acc_deposit(
    acc: &mut Accumulators,
    state: &SystemState,
    eq: &EquilibriumPoint,
    net: &Network,
    nu: &[f64],
    tail_threshold: Option<f64>,
    dt: f64,
) {
    if dt <= 0.0 {
        return;
    }
    for (a, &v) in acc.psi.iter_mut().zip(&state.psi) {
        *a += v as f64 * dt;
    }
    for (a, &v) in acc.q.iter_mut().zip(&state.q) {
        *a += v as f64 * dt;
    }
    acc.total += state.total_in_system() as f64 * dt;
    let (l1, l2) = state.deviation_norms(eq);
    acc.norm1 += l1 * dt;
    acc.norm2 += l2 * dt;
    acc.workload += fluid_workload(state, net, nu) * dt;
    if let Some(thr) = tail_threshold {
        if l2 > thr {
            acc.tail += dt;
        }
    }
    acc.weight += dt;
}

/// Fluid-scaled workload `sum_i nu_i (Q_i + sum_j Psi_ij) / r`.
pub fn fluid_workload(state: &SystemState, net: &Network, nu: &[f64]) -> f64 {
    let mut x: Vec<f64> = state.q.iter().map(|&v| v as f64).collect();
    for (k, a) in net.activities().iter().enumerate() {
        x[a.class] += state.psi[k] as f64;
    }
    x.iter().zip(nu).map(|(xi, ni)| xi * ni).sum::<f64>() / state.r as f64
}

/// Advance the chain to `t_end` with no bookkeeping; returns the event count.
pub fn run_to(
    state: &mut SystemState,
    net: &Network,
    po: &PriorityOrder,
    rng: &mut ChaCha8Rng,
    t_end: f64,
) -> Result<u64, SimError> {
    let mut events = 0u64;
    while state.t < t_end {
        let total = total_rate(state, net);
        if total <= 0.0 {
            return Err(SimError::ZeroTotalRate);
        }
        let t_next = state.t + exp_sample(rng, total);
        if t_next >= t_end {
            state.t = t_end;
            break;
        }
        state.t = t_next;
        pick_and_apply(state, net, po, rng, total);
        events += 1;
    }
    Ok(events)
}

/// Batch-means stationary estimates over `num_batches` equal post-warmup
/// segments of a single long run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StationaryEstimate {
    pub psi: Vec<Estimate>,
    pub q: Vec<Estimate>,
    pub total: Estimate,
    pub norm1: Estimate,
    pub norm2: Estimate,
    pub workload: Estimate,
    /// Fraction of post-warmup time the Euclidean deviation norm exceeded
    /// the requested threshold, when one was given.
    pub tail_fraction: Option<Estimate>,
    pub events: u64,
}

pub fn estimate_stationary(
    net: &Network,
    po: &PriorityOrder,
    eq: &EquilibriumPoint,
    r: u64,
    cfg: &SimConfig,
    num_batches: usize,
) -> Result<StationaryEstimate, SimError> {
    let mut rng = run_rng(cfg.seed);
    estimate_stationary_with(net, po, eq, r, cfg, num_batches, None, &mut rng)
}

/// As [`estimate_stationary`], drawing randomness from the supplied stream
/// and optionally tracking the time fraction above a deviation threshold.
#[allow(clippy::too_many_arguments)]
pub fn estimate_stationary_with(
    net: &Network,
    po: &PriorityOrder,
    eq: &EquilibriumPoint,
    r: u64,
    cfg: &SimConfig,
    num_batches: usize,
    tail_threshold: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<StationaryEstimate, SimError> {
    if num_batches < 2 {
        return Err(SimError::Stats(StatsError::InsufficientData {
            needed: 2,
            got: num_batches,
        }));
    }
    let duals = compute_duals(net).map_err(|e| SimError::InvalidInitialState(e.to_string()))?;
    let nu = duals.nu;
    let mut state = initial_state(net, po, eq, r, &cfg.initial);
    let batch_len = (cfg.horizon - cfg.warmup) / num_batches as f64;
    let mut batches: Vec<Accumulators> = (0..num_batches)
        .map(|_| Accumulators::new(net.num_activities(), net.num_classes()))
        .collect();
    let mut events = 0u64;
    while state.t < cfg.horizon {
        let total = total_rate(&state, net);
        if total <= 0.0 {
            return Err(SimError::ZeroTotalRate);
        }
        let t_prev = state.t;
        let t_next = t_prev + exp_sample(rng, total);
        let t_new = t_next.min(cfg.horizon);
        deposit_batched(
            &mut batches,
            &state,
            eq,
            net,
            &nu,
            tail_threshold,
            cfg.warmup,
            batch_len,
            t_prev,
            t_new,
        );
        if t_next >= cfg.horizon {
            break;
        }
        state.t = t_next;
        pick_and_apply(&mut state, net, po, rng, total);
        events += 1;
    }
    let collect = |f: &dyn Fn(&Accumulators) -> f64| -> Result<Estimate, StatsError> {
        let values: Vec<f64> = batches
            .iter()
            .map(|b| f(b) / b.weight.max(f64::MIN_POSITIVE))
            .collect();
        batch_means(&values, 0.95)
    };
    let psi = (0..net.num_activities())
        .map(|k| collect(&move |b: &Accumulators| b.psi[k]))
        .collect::<Result<Vec<_>, _>>()?;
    let q = (0..net.num_classes())
        .map(|i| collect(&move |b: &Accumulators| b.q[i]))
        .collect::<Result<Vec<_>, _>>()?;
    let tail_fraction = if tail_threshold.is_some() {
        Some(collect(&|b| b.tail)?)
    } else {
        None
    };
    Ok(StationaryEstimate {
        psi,
        q,
        total: collect(&|b| b.total)?,
        norm1: collect(&|b| b.norm1)?,
        norm2: collect(&|b| b.norm2)?,
        workload: collect(&|b| b.workload)?,
        tail_fraction,
        events,
    })
}

#[allow(clippy::too_many_arguments)]
fn deposit_batched(
    batches: &mut [Accumulators],
    state: &SystemState,
    eq: &EquilibriumPoint,
    net: &Network,
    nu: &[f64],
    tail_threshold: Option<f64>,
    warmup: f64,
    batch_len: f64,
    t0: f64,
    t1: f64,
) {
    let n = batches.len();
    let mut lo = t0.max(warmup);
    let hi = t1;
    while lo < hi {
        let mut idx = (((lo - warmup) / batch_len).floor() as usize).min(n - 1);
        let mut boundary = warmup + (idx as f64 + 1.0) * batch_len;
        if boundary <= lo {
            // `lo` sits on a batch boundary that rounding floored backwards.
            idx = (idx + 1).min(n - 1);
            boundary = warmup + (idx as f64 + 1.0) * batch_len;
        }
        let seg_end = if idx == n - 1 { hi } else { hi.min(boundary) };
        acc_deposit(&mut batches[idx], state, eq, net, nu, tail_threshold, seg_end - lo);
        lo = seg_end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn pool_capacity_floor_guard() {
        assert_eq!(pool_capacity(1.0, 100), 100);
        assert_eq!(pool_capacity(0.3, 10), 3);
        assert_eq!(pool_capacity(0.75, 2), 1);
    }

    #[test]
    fn routing_prefers_highest_priority_idle_pool() {
        let net = net_n();
        let (po, _) = setup(&net);
        // Pool 1 full, pool 2 idle: a class-2 arrival is forced to (2,2).
        let mut state =
            SystemState::explicit(&net, 1, vec![0, 1, 0], vec![0, 0]).unwrap();
        route_arrival(&mut state, 1, &net, &po);
        assert_eq!(state.psi()[net.activity_index(1, 1).unwrap()], 1);
        // Both pools idle: class 2 prefers (2,1), which outranks (2,2).
        let mut state =
            SystemState::explicit(&net, 1, vec![0, 0, 0], vec![0, 0]).unwrap();
        route_arrival(&mut state, 1, &net, &po);
        assert_eq!(state.psi()[net.activity_index(1, 0).unwrap()], 1);
        // Both pools full: a class-1 arrival queues.
        let mut state =
            SystemState::explicit(&net, 1, vec![1, 1, 0], vec![0, 0]).unwrap();
        route_arrival(&mut state, 0, &net, &po);
        assert_eq!(state.q()[0], 1);
        assert_eq!(state.arrivals()[0], 1);
    }

    #[test]
    fn scheduling_prefers_highest_priority_queue() {
        let net = net_w();
        let (po, _) = setup(&net);
        // Two servers, both busy on class 1, queues (2, 3).
        let mut state =
            SystemState::explicit(&net, 2, vec![2, 0], vec![2, 3]).unwrap();
        apply_departure(&mut state, 0, &net, &po);
        assert_eq!(state.q(), &[1, 3]);
        // Queue (0, 1): the freed server takes class 2.
        let mut state =
            SystemState::explicit(&net, 2, vec![2, 0], vec![0, 1]).unwrap();
        apply_departure(&mut state, 0, &net, &po);
        assert_eq!(state.q(), &[0, 0]);
        assert_eq!(state.psi()[1], 1);
    }

    #[test]
    fn scheduling_net_n_pool_2_takes_queued_class_2() {
        let net = net_n();
        let (po, _) = setup(&net);
        let k12 = net.activity_index(0, 1).unwrap();
        let k22 = net.activity_index(1, 1).unwrap();
        // Pools full, class 2 queued; completion at pool 2 dequeues class 2
        // even though class 1 also feeds pool 2.
        let mut state =
            SystemState::explicit(&net, 1, vec![1, 1, 0], vec![0, 1]).unwrap();
        apply_departure(&mut state, k12, &net, &po);
        assert_eq!(state.q(), &[0, 0]);
        assert_eq!(state.psi()[k22], 1);
    }

    #[test]
    fn step_event_rates_net_1() {
        let net = net_1();
        let (po, eq) = setup(&net);
        let _ = eq;
        // Empty system: only arrivals possible, mean holding time 1/0.5 = 2.
        let mut rng = run_rng(123);
        let mut mean_dt = 0.0;
        let n = 20_000;
        for _ in 0..n {
            let mut state = SystemState::empty(&net, 1);
            let ev = step_event(&mut state, &net, &po, &mut rng).unwrap();
            assert!(matches!(ev, Event::Arrival { class: 0 }));
            mean_dt += state.t();
        }
        mean_dt /= n as f64;
        assert!((mean_dt - 2.0).abs() < 0.05, "mean holding time {mean_dt}");

        // One customer in service: total rate 1.5, P(departure) = 2/3.
        let mut departures = 0usize;
        for _ in 0..n {
            let mut state =
                SystemState::explicit(&net, 1, vec![1], vec![0]).unwrap();
            if matches!(
                step_event(&mut state, &net, &po, &mut rng).unwrap(),
                Event::Departure { .. }
            ) {
                departures += 1;
            }
        }
        let frac = departures as f64 / n as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.02, "departure fraction {frac}");
    }

    #[test]
    fn invariants_preserved_across_events() {
        let net = net_n();
        let (po, _) = setup(&net);
        let mut state = SystemState::empty(&net, 3);
        let mut rng = run_rng(9);
        for step in 0..50_000 {
            step_event(&mut state, &net, &po, &mut rng).unwrap();
            if step % 97 == 0 {
                state.check_invariants(&net).unwrap();
            }
        }
        state.check_invariants(&net).unwrap();
    }

    #[test]
    fn flow_identities_hold_exactly() {
        let net = net_w();
        let (po, _) = setup(&net);
        let mut state = SystemState::empty(&net, 5);
        let mut rng = run_rng(31);
        for _ in 0..20_000 {
            step_event(&mut state, &net, &po, &mut rng).unwrap();
        }
        for i in 0..net.num_classes() {
            let started: u64 = net
                .class_activities(i)
                .iter()
                .map(|&k| state.service_starts()[k])
                .sum();
            assert_eq!(state.q()[i], state.arrivals()[i] - started);
        }
        for (k, _) in net.activities().iter().enumerate() {
            assert_eq!(
                state.psi()[k],
                state.service_starts()[k] - state.departures()[k]
            );
        }
    }

    #[test]
    fn equilibrium_rounding_respects_capacity() {
        let net = net_n();
        let (po, eq) = setup(&net);
        for r in [1, 3, 7, 25, 100] {
            let state = SystemState::equilibrium_rounded(&net, &po, &eq, r);
            state.check_invariants(&net).unwrap();
        }
        // psi* = (0.5, 1.0, 0.2) at r = 2 rounds to (1, 2, 0); pool 1 would
        // overflow its 2 servers, so the lowest-priority activity is shaved.
        let state = SystemState::equilibrium_rounded(&net, &po, &eq, 2);
        assert!(state.pool_in_service(0) <= 2);
        assert!(state.pool_in_service(1) <= 2);
    }

    #[test]
    fn same_seed_gives_identical_traces() {
        let net = net_n();
        let (po, eq) = setup(&net);
        let cfg = SimConfig {
            seed: 77,
            horizon: 50.0,
            warmup: 5.0,
            initial: InitialState::EquilibriumRounded,
            sample_interval: 0.5,
        };
        let (trace_a, summary_a) = simulate_horizon(&net, &po, &eq, 20, &cfg).unwrap();
        let (trace_b, summary_b) = simulate_horizon(&net, &po, &eq, 20, &cfg).unwrap();
        assert_eq!(trace_a.times, trace_b.times);
        assert_eq!(trace_a.psi, trace_b.psi);
        assert_eq!(trace_a.q, trace_b.q);
        assert_eq!(summary_a.mean_norm2, summary_b.mean_norm2);
        assert_eq!(summary_a.events, summary_b.events);
    }

    #[test]
    fn estimate_stationary_requires_two_batches() {
        let net = net_1();
        let (po, eq) = setup(&net);
        let cfg = SimConfig::new(1, 10.0, 0.0);
        assert!(matches!(
            estimate_stationary(&net, &po, &eq, 5, &cfg, 1),
            Err(SimError::Stats(StatsError::InsufficientData { .. }))
        ));
    }

    #[test]
    fn half_widths_shrink_with_horizon() {
        let net = net_w();
        let (po, eq) = setup(&net);
        let short = SimConfig {
            seed: 5,
            horizon: 250.0,
            warmup: 50.0,
            initial: InitialState::EquilibriumRounded,
            sample_interval: 1.0,
        };
        let long = SimConfig {
            horizon: 850.0,
            ..short.clone()
        };
        let est_short = estimate_stationary(&net, &po, &eq, 50, &short, 8).unwrap();
        let est_long = estimate_stationary(&net, &po, &eq, 50, &long, 8).unwrap();
        // 4x the batch length: half-widths should drop by roughly 2; allow
        // a generous factor for noise.
        assert!(
            est_long.total.half_width < est_short.total.half_width * 1.2,
            "short {} vs long {}",
            est_short.total.half_width,
            est_long.total.half_width
        );
    }
}
