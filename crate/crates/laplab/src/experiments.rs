//! Scaling experiments: how do stationary deviations grow with the system
//! scale, and does the workload drift confirm stability?
//!
//! The sweep runs the chain at every scale in `r_values`, several
//! replications each, over a horizon proportional to `log r` from an
//! equilibrium-rounded start, and records the stationary mean deviation
//! norms. Under the priority discipline the deviations concentrate below
//! the `r^(1/2+eps)` scale for every `eps > 0`, so the fitted slope of
//! `log E|F^r|` against `log r` should sit near one half and the rescaled
//! norms `E|F^r| / r^(1/2+eps)` should fall as `r` grows.
//!
//! The drift check pads a queue until the fluid-scaled workload
//! `W = sum_i nu_i x_i` reaches a requested level and measures
//! `E[W(T) - W(0)]` over a window: while pools stay busy, work leaves at
//! rate 1 but arrives at rate `rho < 1`, so the drift must be negative.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{solve_spp, DualVariables, ModelError, Network};
use crate::priority::{check_assumption3, EquilibriumPoint, PriorityOrder};
use crate::rng::stream_rng;
use crate::simulator::{
    estimate_stationary_with, fluid_workload, run_to, InitialState, SimConfig, SimError,
    SystemState,
};
use crate::stats::{batch_means, median, ols, Estimate, OlsFit, StatsError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("system load rho = {0} is not strictly subcritical; refusing the sweep")]
    UnderloadRequired(f64),
    #[error("slack assumption fails ({0}); tightness experiments are unsupported")]
    Unsupported(String),
    #[error("invalid scaling config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Configuration of a scaling sweep.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingConfig {
    /// Increasing system scales; at least three for the exponent fit.
    pub r_values: Vec<u64>,
    /// Reporting exponent offset: rescaled norms use `r^(1/2+epsilon)`.
    pub epsilon: f64,
    /// Per-scale horizon is `horizon_multiplier * ln(r)`.
    pub horizon_multiplier: f64,
    /// Fraction of the horizon discarded as warmup.
    pub warmup_fraction: f64,
    pub replications: usize,
    /// Batch count inside each replication's batch-means estimate.
    pub batches: usize,
    pub base_seed: u64,
}

impl ScalingConfig {
    pub fn new(r_values: Vec<u64>, base_seed: u64) -> Self {
        ScalingConfig {
            r_values,
            epsilon: 0.25,
            horizon_multiplier: 40.0,
            warmup_fraction: 0.25,
            replications: 10,
            batches: 8,
            base_seed,
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if self.r_values.len() < 3 {
            return Err(ExperimentError::InvalidConfig(
                "need at least three r values for the exponent fit".to_string(),
            ));
        }
        if !self.r_values.windows(2).all(|w| w[0] < w[1]) {
            return Err(ExperimentError::InvalidConfig(
                "r values must be strictly increasing".to_string(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(ExperimentError::InvalidConfig(format!(
                "epsilon = {} outside (0, 1/2)",
                self.epsilon
            )));
        }
        if self.horizon_multiplier <= 0.0 {
            return Err(ExperimentError::InvalidConfig(
                "horizon multiplier must be positive".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(ExperimentError::InvalidConfig(
                "warmup fraction must lie in [0, 1)".to_string(),
            ));
        }
        if self.replications == 0 || self.batches < 2 {
            return Err(ExperimentError::InvalidConfig(
                "need at least one replication and two batches".to_string(),
            ));
        }
        Ok(())
    }
}

/// A horizon multiplier that gives the smallest scale at least twenty fluid
/// drain times of headroom.
pub fn suggested_horizon_multiplier(drain_time: f64, r_min: u64) -> f64 {
    20.0 * drain_time / (r_min.max(2) as f64).ln()
}

/// One replication at one scale.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub r: u64,
    pub replication: usize,
    /// Stationary mean Euclidean deviation norm of this replication.
    pub mean_norm_f: f64,
    /// Batch-means half-width of `mean_norm_f` within the replication.
    pub ci_halfwidth: f64,
    /// Stationary mean fluid-scaled workload.
    pub mean_w: f64,
    /// Stationary mean L1 deviation norm.
    pub mean_norm1_f: f64,
    /// Fraction of time the deviation norm exceeded `r^(1/2+epsilon)`.
    pub tail_fraction: f64,
}

/// Aggregates across replications at one scale.
#[derive(Debug, Clone, Serialize)]
pub struct PerScaleSummary {
    pub r: u64,
    /// Mean across replications of the per-replication means.
    pub mean_norm_f: Estimate,
    pub mean_norm1_f: Estimate,
    /// `mean_norm_f / r^(1/2+epsilon)`.
    pub scaled_norm: f64,
    /// Median across replications of the rescaled per-replication means.
    pub median_scaled_norm: f64,
    /// `mean_norm_f / r` (fluid-scale deviation).
    pub fluid_scaled_norm: f64,
    pub median_tail_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingResult {
    pub config: ScalingConfig,
    pub rows: Vec<SweepRow>,
    pub per_scale: Vec<PerScaleSummary>,
}

impl ScalingResult {
    /// CSV rows `r, replication, mean_normF, ci_halfwidth, mean_W`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,replication,mean_normF,ci_halfwidth,mean_W\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.r, row.replication, row.mean_norm_f, row.ci_halfwidth, row.mean_w
            ));
        }
        out
    }
}

/// Run the sweep: for each scale and replication, estimate the stationary
/// deviation norms over a `horizon_multiplier * ln r` window started from
/// the rounded equilibrium. Deterministic given the config.
pub fn run_scaling_sweep(
    net: &Network,
    po: &PriorityOrder,
    eq: &EquilibriumPoint,
    cfg: &ScalingConfig,
) -> Result<ScalingResult, ExperimentError> {
    cfg.validate()?;
    let spp = solve_spp(net)?;
    if spp.rho >= 1.0 {
        return Err(ExperimentError::UnderloadRequired(spp.rho));
    }
    let a3 = check_assumption3(net, po, eq);
    if !a3.holds {
        return Err(ExperimentError::Unsupported(a3.diagnostic));
    }

    let tasks: Vec<(u64, usize)> = cfg
        .r_values
        .iter()
        .flat_map(|&r| (0..cfg.replications).map(move |rep| (r, rep)))
        .collect();
    let rows: Vec<SweepRow> = tasks
        .par_iter()
        .map(|&(r, rep)| -> Result<SweepRow, ExperimentError> {
            let horizon = cfg.horizon_multiplier * (r as f64).ln();
            let sim_cfg = SimConfig {
                seed: 0,
                horizon,
                warmup: cfg.warmup_fraction * horizon,
                initial: InitialState::EquilibriumRounded,
                sample_interval: horizon,
            };
            let threshold = (r as f64).powf(0.5 + cfg.epsilon);
            let mut rng = stream_rng(cfg.base_seed, r, rep as u64);
            let est = estimate_stationary_with(
                net,
                po,
                eq,
                r,
                &sim_cfg,
                cfg.batches,
                Some(threshold),
                &mut rng,
            )?;
            Ok(SweepRow {
                r,
                replication: rep,
                mean_norm_f: est.norm2.mean,
                ci_halfwidth: est.norm2.half_width,
                mean_w: est.workload.mean,
                mean_norm1_f: est.norm1.mean,
                tail_fraction: est.tail_fraction.map(|e| e.mean).unwrap_or(0.0),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut per_scale = Vec::new();
    for &r in &cfg.r_values {
        let scale_rows: Vec<&SweepRow> = rows.iter().filter(|row| row.r == r).collect();
        let norms: Vec<f64> = scale_rows.iter().map(|row| row.mean_norm_f).collect();
        let norm1s: Vec<f64> = scale_rows.iter().map(|row| row.mean_norm1_f).collect();
        let tails: Vec<f64> = scale_rows.iter().map(|row| row.tail_fraction).collect();
        let denom = (r as f64).powf(0.5 + cfg.epsilon);
        let mean_norm_f = aggregate(&norms)?;
        per_scale.push(PerScaleSummary {
            r,
            scaled_norm: mean_norm_f.mean / denom,
            median_scaled_norm: median(&norms.iter().map(|n| n / denom).collect::<Vec<_>>()),
            fluid_scaled_norm: mean_norm_f.mean / r as f64,
            mean_norm_f,
            mean_norm1_f: aggregate(&norm1s)?,
            median_tail_fraction: median(&tails),
        });
    }

    Ok(ScalingResult {
        config: cfg.clone(),
        rows,
        per_scale,
    })
}

fn aggregate(values: &[f64]) -> Result<Estimate, ExperimentError> {
    if values.len() == 1 {
        return Ok(Estimate {
            mean: values[0],
            half_width: f64::NAN,
        });
    }
    Ok(batch_means(values, 0.95)?)
}

/// Least-squares slope of `log E|F^r|` against `log r`.
pub fn fit_tightness_exponent(res: &ScalingResult) -> Result<OlsFit, ExperimentError> {
    let x: Vec<f64> = res.per_scale.iter().map(|p| (p.r as f64).ln()).collect();
    let y: Vec<f64> = res
        .per_scale
        .iter()
        .map(|p| p.mean_norm_f.mean.max(f64::MIN_POSITIVE).ln())
        .collect();
    Ok(ols(&x, &y)?)
}

/// Estimated workload drift over one window.
#[derive(Debug, Clone, Serialize)]
pub struct DriftEstimate {
    /// `E[W(T) - W(0)]` across replications, with its half-width.
    pub drift: Estimate,
    /// Fluid-scaled workload actually reached by the padded initial state.
    pub initial_workload: f64,
    pub per_replication: Vec<f64>,
}

/// Pad the queue of the heaviest-workload class until the fluid-scaled
/// workload reaches `level`, run the chain for `window`, and measure the
/// change in workload across replications.
#[allow(clippy::too_many_arguments)]
pub fn lyapunov_drift_check(
    net: &Network,
    po: &PriorityOrder,
    eq: &EquilibriumPoint,
    duals: &DualVariables,
    r: u64,
    window: f64,
    level: f64,
    replications: usize,
    base_seed: u64,
) -> Result<DriftEstimate, ExperimentError> {
    if replications < 2 {
        return Err(ExperimentError::InvalidConfig(
            "need at least two replications for a confidence interval".to_string(),
        ));
    }
    let base = SystemState::equilibrium_rounded(net, po, eq, r);
    let w_base = fluid_workload(&base, net, &duals.nu);
    // Heaviest class by workload content, lowest index on ties.
    let target = (0..net.num_classes())
        .max_by(|&a, &b| duals.nu[a].total_cmp(&duals.nu[b]).then(b.cmp(&a)))
        .expect("at least one class");
    let mut psi = base.psi().to_vec();
    let mut q = base.q().to_vec();
    if level > w_base {
        // A queue can only coexist with fully occupied compatible pools:
        // top the target's pools up with target-class customers first.
        for &k in net.class_activities(target) {
            let j = net.activity(k).pool;
            let used: u64 = net.pool_activities(j).iter().map(|&a| psi[a]).sum();
            psi[k] += base.capacity(j) - used;
        }
        let filled = SystemState::explicit(net, r, psi.clone(), q.clone())
            .map_err(ExperimentError::Sim)?;
        let w_filled = fluid_workload(&filled, net, &duals.nu);
        let pad = ((level - w_filled).max(0.0) * r as f64 / duals.nu[target]).round() as u64;
        q[target] += pad;
    }
    let initial =
        SystemState::explicit(net, r, psi, q).map_err(ExperimentError::Sim)?;
    let w0 = fluid_workload(&initial, net, &duals.nu);

    let deltas: Vec<f64> = (0..replications)
        .into_par_iter()
        .map(|rep| -> Result<f64, ExperimentError> {
            let mut state = initial.clone();
            let mut rng = stream_rng(base_seed, r, rep as u64);
            run_to(&mut state, net, po, &mut rng, window)?;
            Ok(fluid_workload(&state, net, &duals.nu) - w0)
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(DriftEstimate {
        drift: batch_means(&deltas, 0.95)?,
        initial_workload: w0,
        per_replication: deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::compute_duals;
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

    fn setup(net: &Network) -> (PriorityOrder, EquilibriumPoint) {
        let po = assign_priorities(net, TieBreak::LowestIndex).unwrap();
        let eq = compute_equilibrium(net, &po);
        (po, eq)
    }

    #[test]
    fn exponent_fit_recovers_exact_power_law() {
        // Synthetic E|F^r| = 3 r^0.5.
        let (po, eq) = setup(&net_1());
        let _ = (po, eq);
        let fake = ScalingResult {
            config: ScalingConfig::new(vec![25, 50, 100, 200], 0),
            rows: Vec::new(),
            per_scale: vec![25u64, 50, 100, 200]
                .into_iter()
                .map(|r| PerScaleSummary {
                    r,
                    mean_norm_f: Estimate {
                        mean: 3.0 * (r as f64).sqrt(),
                        half_width: 0.0,
                    },
                    mean_norm1_f: Estimate {
                        mean: 0.0,
                        half_width: 0.0,
                    },
                    scaled_norm: 0.0,
                    median_scaled_norm: 0.0,
                    fluid_scaled_norm: 0.0,
                    median_tail_fraction: 0.0,
                })
                .collect(),
        };
        let fit = fit_tightness_exponent(&fake).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
        assert!((fit.intercept - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn config_validation_catches_misuse() {
        let (po, eq) = setup(&net_1());
        let net = net_1();
        let mut cfg = ScalingConfig::new(vec![10, 20], 1);
        assert!(matches!(
            run_scaling_sweep(&net, &po, &eq, &cfg),
            Err(ExperimentError::InvalidConfig(_))
        ));
        cfg = ScalingConfig::new(vec![10, 20, 30], 1);
        cfg.epsilon = 0.7;
        assert!(matches!(
            run_scaling_sweep(&net, &po, &eq, &cfg),
            Err(ExperimentError::InvalidConfig(_))
        ));
    }

    #[test]
    fn overloaded_network_is_refused() {
        let net = Network::new(vec![1.5], vec![1.0], vec![(0, 0, 1.0)]);
        let (po, eq) = setup(&net);
        let cfg = ScalingConfig::new(vec![5, 10, 20], 1);
        assert!(matches!(
            run_scaling_sweep(&net, &po, &eq, &cfg),
            Err(ExperimentError::UnderloadRequired(_))
        ));
    }

    #[test]
    fn assumption3_failure_is_unsupported() {
        let net = Network::new(
            vec![0.5, 0.8],
            vec![1.0, 1.0],
            vec![(0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)],
        );
        let (po, eq) = setup(&net);
        let cfg = ScalingConfig::new(vec![5, 10, 20], 1);
        assert!(matches!(
            run_scaling_sweep(&net, &po, &eq, &cfg),
            Err(ExperimentError::Unsupported(_))
        ));
    }

    #[test]
    fn small_sweep_is_deterministic() {
        let net = net_n();
        let (po, eq) = setup(&net);
        let mut cfg = ScalingConfig::new(vec![5, 10, 20], 7);
        cfg.replications = 2;
        cfg.horizon_multiplier = 10.0;
        let a = run_scaling_sweep(&net, &po, &eq, &cfg).unwrap();
        let b = run_scaling_sweep(&net, &po, &eq, &cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn drift_is_negative_from_high_workload() {
        let net = net_1();
        let (po, eq) = setup(&net);
        let duals = compute_duals(&net).unwrap();
        let est = lyapunov_drift_check(&net, &po, &eq, &duals, 50, 10.0, 3.0, 10, 3).unwrap();
        // rho = 0.5: the workload drains at roughly 1 - rho per unit time
        // while the padded queue lasts.
        assert!(
            est.drift.mean + est.drift.half_width < 0.0,
            "drift {:?}",
            est.drift
        );
        assert!((est.initial_workload - 3.0).abs() < 0.1);
    }

    #[test]
    fn drift_is_centered_at_equilibrium_start() {
        let net = net_n();
        let (po, eq) = setup(&net);
        let duals = compute_duals(&net).unwrap();
        let w_eq = 0.5 * 0.5 + 0.5 * 1.2;
        let est =
            lyapunov_drift_check(&net, &po, &eq, &duals, 100, 20.0, w_eq, 20, 11).unwrap();
        assert!(
            est.drift.mean.abs() < 3.0 * est.drift.half_width + 0.05,
            "drift {:?}",
            est.drift
        );
    }
}
