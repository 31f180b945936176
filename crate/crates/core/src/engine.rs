//! Closed-loop detection and mitigation.
//!
//! Every detector sample the engine routes the live measurements along the
//! active tree, estimates the fused abnormality, and compares it against the
//! calibrated threshold. A trigger freezes the secondary corrections at
//! their pre-trigger values, searches the candidate tree set for the first
//! topology whose estimate conforms, and enforces it once the hold budget
//! elapses (modeling search latency). Detection happens before the sampled
//! measurements are consumed by the controller, so corrupted data never
//! integrates into the corrections while a hold is pending.

use crate::comm::{route, Arborescence, AttackSpec, ReceivedMatrix, TreeSet};
use crate::control::{
    compute_tpr, consensus_rates, state_residuals, ControllerGains, ObjectiveResiduals,
    SecondaryRates,
};
use crate::error::{Error, Result};
use crate::estimator::{featurize, MlpParams};
use crate::grid::{GridConfig, GridState, SecondaryRateProvider, Trajectory};

/// Detection threshold and how it was derived.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ThresholdPolicy {
    pub sigma: f64,
    pub quantile: f64,
    pub safety_factor: f64,
}

/// A raised cyberattack indication.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Trigger {
    pub t: f64,
    pub estimate: f64,
    pub tree_index: usize,
}

/// Frozen secondary corrections while the topology search runs.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldState {
    pub frozen_delta_omega: Vec<f64>,
    pub frozen_delta_v: Vec<f64>,
    /// Simulated instant at which the hold releases.
    pub until: f64,
}

/// Outcome of one topology search.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SwitchDecision {
    pub chosen_index: usize,
    pub chosen_root: usize,
    /// Estimate per candidate, in tree-set order.
    pub estimates: Vec<f64>,
    /// Wall-clock search time (s).
    pub elapsed_s: f64,
    pub decided_at: f64,
    pub enforced_at: f64,
}

/// Runtime cadence and budgets of the detection loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    /// Detector sampling period (simulated seconds).
    pub detector_period: f64,
    /// Hold duration modeling search latency (simulated seconds).
    pub hold_budget: f64,
    /// Detection armed only after this much simulated time.
    pub warmup: f64,
    /// Detection pause after enforcing a switch, letting the consensus
    /// transient decay before the threshold applies again (simulated
    /// seconds).
    pub post_switch_blackout: f64,
    /// Frequency band defining recovery (Hz).
    pub recovery_band: f64,
    pub mitigation_enabled: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            detector_period: 0.01,
            hold_budget: 0.1,
            warmup: 2.5,
            post_switch_blackout: 0.25,
            recovery_band: 0.05,
            mitigation_enabled: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self, dt: f64) -> Result<()> {
        if self.detector_period < dt {
            return Err(Error::Config(format!(
                "detector period {} shorter than integration step {dt}",
                self.detector_period
            )));
        }
        if self.hold_budget < 0.0
            || self.warmup < 0.0
            || self.post_switch_blackout < 0.0
            || self.recovery_band <= 0.0
        {
            return Err(Error::Config("engine budgets must be non-negative".into()));
        }
        Ok(())
    }
}

/// Abnormality estimator interface shared by the analytic detector and the
/// trained network.
pub trait TprEstimator {
    fn estimate(&self, received: &ReceivedMatrix, tree: &Arborescence) -> Result<f64>;
    fn label(&self) -> &'static str;
}

/// Exact abnormality from the consensus equations; the oracle mode.
pub struct AnalyticEstimator {
    pub k1: f64,
    pub k2: f64,
    pub droop: Vec<crate::grid::DroopParams>,
}

impl TprEstimator for AnalyticEstimator {
    fn estimate(&self, received: &ReceivedMatrix, tree: &Arborescence) -> Result<f64> {
        let gains = ControllerGains::pinned(self.k1, self.k2, received.n, tree.root);
        Ok(compute_tpr(&consensus_rates(received, tree, &gains, &self.droop)?))
    }

    fn label(&self) -> &'static str {
        "analytic"
    }
}

/// Trained-network estimator.
pub struct NetworkEstimator {
    pub params: MlpParams,
}

impl TprEstimator for NetworkEstimator {
    fn estimate(&self, received: &ReceivedMatrix, _tree: &Arborescence) -> Result<f64> {
        self.params.predict(&featurize(received))
    }

    fn label(&self) -> &'static str {
        "ann"
    }
}

/// Trigger iff |estimate| strictly exceeds sigma; symmetric in sign, no
/// trigger at the boundary.
pub fn detect(estimate: f64, policy: &ThresholdPolicy, t: f64, tree_index: usize) -> Option<Trigger> {
    if estimate.abs() > policy.sigma {
        Some(Trigger {
            t,
            estimate,
            tree_index,
        })
    } else {
        None
    }
}

/// Derive sigma from attack-free estimates: `safety_factor` times the given
/// quantile of the absolute estimates, floored for degenerate all-zero data.
pub fn calibrate_sigma(
    clean_estimates: &[f64],
    quantile: f64,
    safety_factor: f64,
    floor: f64,
) -> Result<ThresholdPolicy> {
    if clean_estimates.len() < 1000 {
        return Err(Error::Calibration(format!(
            "need at least 1000 attack-free estimates, got {}",
            clean_estimates.len()
        )));
    }
    if !(0.0 < quantile && quantile < 1.0) || safety_factor <= 0.0 || floor <= 0.0 {
        return Err(Error::Calibration(
            "quantile must be in (0,1); factor and floor must be positive".into(),
        ));
    }
    let mut abs: Vec<f64> = clean_estimates.iter().map(|e| e.abs()).collect();
    if abs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Calibration("non-finite estimate in calibration data".into()));
    }
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((quantile * abs.len() as f64).ceil() as usize).clamp(1, abs.len()) - 1;
    let sigma = (safety_factor * abs[rank]).max(floor);
    Ok(ThresholdPolicy {
        sigma,
        quantile,
        safety_factor,
    })
}

/// Estimate every candidate tree against live measurements and choose the
/// first whose |estimate| conforms to the threshold.
pub fn search_topology<F>(
    trees: &TreeSet,
    estimator: &dyn TprEstimator,
    mut route_candidate: F,
    policy: &ThresholdPolicy,
) -> Result<(usize, Vec<f64>, f64)>
where
    F: FnMut(&Arborescence) -> Result<ReceivedMatrix>,
{
    if trees.is_empty() {
        return Err(Error::Topology("candidate tree set is empty".into()));
    }
    let started = std::time::Instant::now();
    let mut estimates = Vec::with_capacity(trees.len());
    let mut chosen = None;
    for (i, tree) in trees.trees.iter().enumerate() {
        let rx = route_candidate(tree)?;
        let est = estimator.estimate(&rx, tree)?;
        estimates.push(est);
        if chosen.is_none() && est.abs() <= policy.sigma {
            chosen = Some(i);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    match chosen {
        Some(i) => Ok((i, estimates, elapsed)),
        None => Err(Error::AllTreesCompromised),
    }
}

/// Everything a closed-loop run needs.
pub struct ClosedLoopInputs<'a> {
    pub grid: &'a GridConfig,
    pub trees: &'a TreeSet,
    pub attacks: &'a [AttackSpec],
    pub k1: f64,
    pub k2: f64,
    /// Reference frequency delivered to the active root (Hz).
    pub omega_ref: f64,
    pub estimator: &'a dyn TprEstimator,
    pub policy: &'a ThresholdPolicy,
    pub engine: &'a EngineConfig,
}

/// Result of a closed-loop case run.
#[derive(Debug)]
pub struct CaseReport {
    pub triggers: Vec<Trigger>,
    pub switches: Vec<SwitchDecision>,
    /// First trigger time minus earliest attack start.
    pub detection_latency: Option<f64>,
    /// First instant after attack onset from which the frequency error stays
    /// inside the recovery band to the horizon.
    pub recovery_time: Option<f64>,
    pub residuals: ObjectiveResiduals,
    pub all_trees_compromised: bool,
    /// Engine still holding at the horizon.
    pub held_at_end: bool,
    pub trajectory: Trajectory,
    /// Active tree index per recorded state.
    pub active_tree: Vec<usize>,
    pub estimator_label: &'static str,
}

enum Mode {
    Normal,
    Holding { hold: HoldState, chosen: usize },
    HeldIndefinitely,
}

struct ConsensusProvider<'a> {
    tree: &'a Arborescence,
    attacks: &'a [AttackSpec],
    gains: ControllerGains,
    droop: &'a [crate::grid::DroopParams],
    omega_ref: f64,
}

impl SecondaryRateProvider for ConsensusProvider<'_> {
    fn rates(&self, state: &GridState) -> Result<SecondaryRates> {
        let rx = route(
            &state.omega,
            &state.p_meas,
            &state.q_meas,
            self.omega_ref,
            self.tree,
            self.attacks,
            state.t,
        )?;
        consensus_rates(&rx, self.tree, &self.gains, self.droop)
    }
}

struct FrozenProvider {
    n: usize,
}

impl SecondaryRateProvider for FrozenProvider {
    fn rates(&self, _state: &GridState) -> Result<SecondaryRates> {
        Ok(SecondaryRates::zero(self.n))
    }
}

/// Run the plant under consensus control with the detection/mitigation loop.
pub fn run_closed_loop(inputs: &ClosedLoopInputs) -> Result<CaseReport> {
    let grid = inputs.grid;
    grid.validate()?;
    inputs.engine.validate(grid.dt)?;
    if inputs.trees.is_empty() {
        return Err(Error::Topology("candidate tree set is empty".into()));
    }
    for t in &inputs.trees.trees {
        if t.n() != grid.n {
            return Err(Error::Topology("tree size does not match grid size".into()));
        }
    }

    let stride = (inputs.engine.detector_period / grid.dt).round().max(1.0) as usize;
    let steps = grid.step_count();
    let mut state = GridState::initial(grid);
    let mut active_tree = 0usize;
    let mut mode = Mode::Normal;
    let mut triggers = Vec::new();
    let mut switches = Vec::new();
    let mut all_trees_compromised = false;

    let mut states = Vec::with_capacity(steps + 1);
    let mut tree_log = Vec::with_capacity(steps + 1);
    states.push(state.clone());
    tree_log.push(active_tree);
    let mut armed_from = inputs.engine.warmup;

    for k in 0..steps {
        let t = state.t;
        if inputs.engine.mitigation_enabled && k.is_multiple_of(stride) {
            // Release an expiring hold before anything else so the switch
            // takes effect at exactly trigger + hold budget.
            if let Mode::Holding { hold, chosen } = &mode {
                if t + 1e-9 >= hold.until {
                    active_tree = *chosen;
                    mode = Mode::Normal;
                    armed_from = t + inputs.engine.post_switch_blackout;
                }
            }
            if matches!(mode, Mode::Normal) && t + 1e-9 >= armed_from {
                let tree = &inputs.trees.trees[active_tree];
                let rx = route(
                    &state.omega,
                    &state.p_meas,
                    &state.q_meas,
                    inputs.omega_ref,
                    tree,
                    inputs.attacks,
                    t,
                )?;
                let est = inputs.estimator.estimate(&rx, tree)?;
                if let Some(trigger) = detect(est, inputs.policy, t, active_tree) {
                    triggers.push(trigger);
                    let hold = HoldState {
                        frozen_delta_omega: state.delta_omega.clone(),
                        frozen_delta_v: state.delta_v.clone(),
                        until: t + inputs.engine.hold_budget,
                    };
                    let search = search_topology(
                        inputs.trees,
                        inputs.estimator,
                        |cand| {
                            route(
                                &state.omega,
                                &state.p_meas,
                                &state.q_meas,
                                inputs.omega_ref,
                                cand,
                                inputs.attacks,
                                t,
                            )
                        },
                        inputs.policy,
                    );
                    match search {
                        Ok((chosen_index, estimates, elapsed)) => {
                            switches.push(SwitchDecision {
                                chosen_index,
                                chosen_root: inputs.trees.trees[chosen_index].root,
                                estimates,
                                elapsed_s: elapsed,
                                decided_at: t,
                                enforced_at: hold.until,
                            });
                            mode = Mode::Holding { hold, chosen: chosen_index };
                        }
                        Err(Error::AllTreesCompromised) => {
                            all_trees_compromised = true;
                            mode = Mode::HeldIndefinitely;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }

        state = match &mode {
            Mode::Normal => {
                let tree = &inputs.trees.trees[active_tree];
                let provider = ConsensusProvider {
                    tree,
                    attacks: inputs.attacks,
                    gains: ControllerGains::pinned(inputs.k1, inputs.k2, grid.n, tree.root),
                    droop: &grid.droop,
                    omega_ref: inputs.omega_ref,
                };
                crate::grid::step_rk4(&state, grid, &provider)?
            }
            Mode::Holding { .. } | Mode::HeldIndefinitely => {
                crate::grid::step_rk4(&state, grid, &FrozenProvider { n: grid.n })?
            }
        };
        // Track time as step_index * dt; summing dt drifts after thousands
        // of steps and detector samples must line up with attack starts.
        state.t = (k + 1) as f64 * grid.dt;
        states.push(state.clone());
        tree_log.push(active_tree);
    }

    let trajectory = Trajectory { states };
    let residuals = crate::control::objectives_residual(&trajectory, &grid.droop)?;
    let first_attack = inputs
        .attacks
        .iter()
        .map(|a| a.start)
        .fold(f64::INFINITY, f64::min);
    let detection_latency = triggers.first().map(|tr| tr.t - first_attack);
    let recovery_time = if first_attack.is_finite() {
        recovery_instant(&trajectory, &grid.droop, first_attack, inputs.engine.recovery_band)
    } else {
        None
    };
    Ok(CaseReport {
        triggers,
        switches,
        detection_latency,
        recovery_time,
        residuals,
        all_trees_compromised,
        held_at_end: !matches!(mode, Mode::Normal),
        trajectory,
        active_tree: tree_log,
        estimator_label: inputs.estimator.label(),
    })
}

/// Earliest instant at or after `from` such that the frequency error stays
/// below `band` through the horizon.
pub fn recovery_instant(
    traj: &Trajectory,
    droop: &[crate::grid::DroopParams],
    from: f64,
    band: f64,
) -> Option<f64> {
    let mut recovered_since: Option<f64> = None;
    for s in &traj.states {
        if s.t < from {
            continue;
        }
        let freq_err = state_residuals(&s.omega, &s.p_meas, &s.q_meas, droop).freq_err;
        if freq_err < band {
            recovered_since.get_or_insert(s.t);
        } else {
            recovered_since = None;
        }
    }
    recovered_since
}
