//! Leader-follower consensus secondary control and the fused abnormality
//! signal computed from its rate outputs.
//!
//! Each DG integrates a frequency correction driven by neighbor frequency
//! disagreement, droop-weighted active-power disagreement and (for the
//! pinned leader) the reference error, plus a voltage correction driven by
//! droop-weighted reactive-power disagreement. Neighbors are the in-edges
//! of the active arborescence, so the controller consumes exactly what the
//! communication layer routes to it.

use crate::comm::{Arborescence, ReceivedMatrix};
use crate::error::{Error, Result};
use crate::grid::{DroopParams, Trajectory};

/// Consensus loop gains and leader pinning.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    /// Frequency-loop gain (1/s).
    pub k1: f64,
    /// Voltage-loop gain (1/s).
    pub k2: f64,
    /// Pinning indicator; exactly one entry is true (the active root).
    pub pinning: Vec<bool>,
}

impl ControllerGains {
    /// Gains pinned at `root`.
    pub fn pinned(k1: f64, k2: f64, n: usize, root: usize) -> Self {
        let mut pinning = vec![false; n];
        pinning[root] = true;
        ControllerGains { k1, k2, pinning }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Config("controller gains must be positive".into()));
        }
        if self.pinning.iter().filter(|&&g| g).count() != 1 {
            return Err(Error::Config("exactly one node must be pinned".into()));
        }
        Ok(())
    }

    pub fn root(&self) -> usize {
        self.pinning.iter().position(|&g| g).unwrap_or(0)
    }
}

/// Integrator inputs for the secondary corrections.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondaryRates {
    /// Per-DG frequency correction rate (Hz/s).
    pub d_omega_dot: Vec<f64>,
    /// Per-DG voltage correction rate (V/s).
    pub d_v_dot: Vec<f64>,
}

impl SecondaryRates {
    pub fn zero(n: usize) -> Self {
        SecondaryRates {
            d_omega_dot: vec![0.0; n],
            d_v_dot: vec![0.0; n],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.d_omega_dot.iter().chain(&self.d_v_dot).all(|x| x.is_finite())
    }
}

/// Consensus correction rates from received measurements under `tree`.
///
/// For DG l with in-neighbors N(l):
/// `dω̇_l = K1·( Σ (ω_m - ω_l) + g_l(ω_ref - ω_l) + Σ (D_Pm·P_m - D_Pl·P_l) )`
/// `dv̇_l = K2·( Σ (D_Qm·Q_m - D_Ql·Q_l) )`
/// where neighbor values are the received (possibly corrupted) entries and
/// local values come from the trusted diagonal.
pub fn consensus_rates(
    received: &ReceivedMatrix,
    tree: &Arborescence,
    gains: &ControllerGains,
    droop: &[DroopParams],
) -> Result<SecondaryRates> {
    let n = received.n;
    if tree.n() != n || droop.len() != n || gains.pinning.len() != n {
        return Err(Error::Topology(format!(
            "dimension mismatch: received n={n}, tree n={}, droop {}, pinning {}",
            tree.n(),
            droop.len(),
            gains.pinning.len()
        )));
    }
    gains.validate()?;
    if gains.root() != tree.root {
        return Err(Error::Topology(format!(
            "pinned node {} differs from tree root {}",
            gains.root(),
            tree.root
        )));
    }
    // Received support must match the tree edge set.
    for l in 0..n {
        for m in 0..n {
            if l == m {
                continue;
            }
            let on_tree = tree.edges.binary_search(&(m, l)).is_ok();
            let present = received.omega(l, m) != 0.0
                || received.p(l, m) != 0.0
                || received.q(l, m) != 0.0;
            if present && !on_tree {
                return Err(Error::Topology(format!(
                    "received entry [{l}][{m}] populated but edge {m}->{l} is not in the tree"
                )));
            }
        }
    }
    let mut rates = SecondaryRates::zero(n);
    for l in 0..n {
        let omega_l = received.omega(l, l);
        let p_l = received.p(l, l);
        let q_l = received.q(l, l);
        let mut acc_w = 0.0;
        let mut acc_v = 0.0;
        for &(m, to) in &tree.edges {
            if to != l {
                continue;
            }
            acc_w += received.omega(l, m) - omega_l;
            acc_w += droop[m].d_p * received.p(l, m) - droop[l].d_p * p_l;
            acc_v += droop[m].d_q * received.q(l, m) - droop[l].d_q * q_l;
        }
        if gains.pinning[l] {
            acc_w += received.leader_ref - omega_l;
        }
        rates.d_omega_dot[l] = gains.k1 * acc_w;
        rates.d_v_dot[l] = gains.k2 * acc_v;
    }
    if !rates.all_finite() {
        return Err(Error::InvalidState("non-finite consensus rates".into()));
    }
    Ok(rates)
}

/// Fused abnormality: the sum of every secondary correction rate across the
/// microgrid. Approximately zero in healthy synchronized operation; offset
/// by the injected exogenous signal under attack.
pub fn compute_tpr(rates: &SecondaryRates) -> f64 {
    rates.d_omega_dot.iter().sum::<f64>() + rates.d_v_dot.iter().sum::<f64>()
}

/// Residuals of the three secondary-control objectives at the trajectory
/// horizon: frequency restoration, droop-weighted active-power sharing and
/// droop-weighted reactive-power sharing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ObjectiveResiduals {
    /// max_l |ω_l - ω_nom| (Hz).
    pub freq_err: f64,
    /// max_{l,m} |D_Pl·P_l - D_Pm·P_m| (Hz-equivalent).
    pub p_share_err: f64,
    /// max_{l,m} |D_Ql·Q_l - D_Qm·Q_m| (V-equivalent).
    pub q_share_err: f64,
}

pub fn objectives_residual(traj: &Trajectory, droop: &[DroopParams]) -> Result<ObjectiveResiduals> {
    let last = traj
        .states
        .last()
        .ok_or_else(|| Error::Data("empty trajectory".into()))?;
    Ok(state_residuals(
        &last.omega,
        &last.p_meas,
        &last.q_meas,
        droop,
    ))
}

/// Same residuals for a single state snapshot.
pub fn state_residuals(
    omega: &[f64],
    p: &[f64],
    q: &[f64],
    droop: &[DroopParams],
) -> ObjectiveResiduals {
    let n = omega.len();
    let mut freq_err: f64 = 0.0;
    let mut p_share_err: f64 = 0.0;
    let mut q_share_err: f64 = 0.0;
    for l in 0..n {
        freq_err = freq_err.max((omega[l] - droop[l].omega_nom).abs());
        for m in 0..n {
            p_share_err = p_share_err.max((droop[l].d_p * p[l] - droop[m].d_p * p[m]).abs());
            q_share_err = q_share_err.max((droop[l].d_q * q[l] - droop[m].d_q * q[m]).abs());
        }
    }
    ObjectiveResiduals {
        freq_err,
        p_share_err,
        q_share_err,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{
        complete_graph, enumerate_arborescences, route, AttackKind, AttackSpec, ChannelBias,
        Waveform,
    };
    use crate::grid::GridState;
    use proptest::prelude::*;

    fn droop(n: usize) -> Vec<DroopParams> {
        vec![
            DroopParams {
                omega_nom: 50.0,
                v_nom: 311.0,
                d_p: 1e-4,
                d_q: 1e-4,
                delta_omega_max: 1.5,
                delta_v_max: 10.0,
            };
            n
        ]
    }

    /// Synchronized received matrix: every entry consistent with nominal
    /// frequency and perfectly shared droop-weighted power.
    fn synchronized_rx(n: usize, tree: &Arborescence, p_each: f64, q_each: f64) -> ReceivedMatrix {
        let omega = vec![50.0; n];
        let p = vec![p_each; n];
        let q = vec![q_each; n];
        route(&omega, &p, &q, 50.0, tree, &[], 0.0).unwrap()
    }

    #[test]
    fn rates_vanish_when_synchronized() {
        let g = complete_graph(4);
        for tree in &enumerate_arborescences(&g, 0, 100).unwrap().trees {
            let rx = synchronized_rx(4, tree, 8000.0, 2000.0);
            let gains = ControllerGains::pinned(40.0, 20.0, 4, tree.root);
            let rates = consensus_rates(&rx, tree, &gains, &droop(4)).unwrap();
            for l in 0..4 {
                assert_eq!(rates.d_omega_dot[l], 0.0);
                assert_eq!(rates.d_v_dot[l], 0.0);
            }
        }
    }

    #[test]
    fn two_dg_chain_direct_substitution() {
        // Root 0 at 50 Hz, follower at 49.5 Hz, equal droop-weighted powers:
        // follower rate = K1*(50-49.5) = 20 Hz/s, root rate = 0.
        let tree = Arborescence::new(0, &[(0, 1)]);
        let rx = route(&[50.0, 49.5], &[8000.0, 8000.0], &[0.0, 0.0], 50.0, &tree, &[], 0.0).unwrap();
        let gains = ControllerGains::pinned(40.0, 20.0, 2, 0);
        let rates = consensus_rates(&rx, &tree, &gains, &droop(2)).unwrap();
        assert!((rates.d_omega_dot[1] - 20.0).abs() < 1e-12);
        assert_eq!(rates.d_omega_dot[0], 0.0);
    }

    /// Straight-line re-implementation for a fixed 4-DG tree, independent of
    /// the production loop structure.
    fn oracle_rates_4dg(
        rx: &ReceivedMatrix,
        tree: &Arborescence,
        k1: f64,
        k2: f64,
        dp: f64,
        dq: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut dw = vec![0.0; 4];
        let mut dv = vec![0.0; 4];
        for l in 0..4 {
            let mut aw = 0.0;
            let mut av = 0.0;
            for m in 0..4 {
                if tree.edges.contains(&(m, l)) {
                    aw += rx.omega(l, m) - rx.omega(l, l);
                    aw += dp * rx.p(l, m) - dp * rx.p(l, l);
                    av += dq * rx.q(l, m) - dq * rx.q(l, l);
                }
            }
            if l == tree.root {
                aw += rx.leader_ref - rx.omega(l, l);
            }
            dw[l] = k1 * aw;
            dv[l] = k2 * av;
        }
        (dw, dv)
    }

    #[test]
    fn rates_match_independent_oracle() {
        let g = complete_graph(4);
        let tree = enumerate_arborescences(&g, 1, 100).unwrap().trees[7].clone();
        let omega = [49.93, 50.08, 50.2, 49.88];
        let p = [7800.0, 8150.0, 8500.0, 7700.0];
        let q = [2100.0, 1950.0, 2020.0, 1890.0];
        let rx = route(&omega, &p, &q, 50.0, &tree, &[], 0.0).unwrap();
        let gains = ControllerGains::pinned(40.0, 20.0, 4, tree.root);
        let rates = consensus_rates(&rx, &tree, &gains, &droop(4)).unwrap();
        let (dw, dv) = oracle_rates_4dg(&rx, &tree, 40.0, 20.0, 1e-4, 1e-4);
        for l in 0..4 {
            assert!((rates.d_omega_dot[l] - dw[l]).abs() < 1e-12, "l={l}");
            assert!((rates.d_v_dot[l] - dv[l]).abs() < 1e-12, "l={l}");
        }
    }

    #[test]
    fn tpr_is_zero_for_zero_rates() {
        assert_eq!(compute_tpr(&SecondaryRates::zero(5)), 0.0);
    }

    #[test]
    fn tpr_shift_under_fdi_equals_clean_plus_injection_effect() {
        // Constant-bias FDI on a synchronized state: the corrupted abnormality
        // equals the clean one plus K1*(bias_w + dp*bias_p)*out_degree +
        // K2*dq*bias_q*out_degree, evaluated by differencing the two routes.
        let g = complete_graph(4);
        let tree = enumerate_arborescences(&g, 0, 100).unwrap().trees[0].clone();
        let attacked_node = tree.edges[0].0;
        let out_deg = tree.edges.iter().filter(|&&(f, _)| f == attacked_node).count() as f64;
        let bias = ChannelBias { omega: 0.4, p: 1500.0, q: 600.0 };
        let atk = AttackSpec {
            kind: AttackKind::Fdi { node: attacked_node },
            start: 0.0,
            waveform: Waveform::Constant,
            bias,
        };
        let omega = vec![50.0; 4];
        let p = vec![8000.0; 4];
        let q = vec![2000.0; 4];
        let gains = ControllerGains::pinned(40.0, 20.0, 4, tree.root);
        let clean = route(&omega, &p, &q, 50.0, &tree, &[], 1.0).unwrap();
        let dirty = route(&omega, &p, &q, 50.0, &tree, &[atk], 1.0).unwrap();
        let tpr_clean = compute_tpr(&consensus_rates(&clean, &tree, &gains, &droop(4)).unwrap());
        let tpr_dirty = compute_tpr(&consensus_rates(&dirty, &tree, &gains, &droop(4)).unwrap());
        let expected = out_deg * (40.0 * (bias.omega + 1e-4 * bias.p) + 20.0 * 1e-4 * bias.q);
        assert!((tpr_dirty - tpr_clean - expected).abs() < 1e-9);
    }

    #[test]
    fn omega_only_fdi_shifts_tpr_by_gain_times_outdegree_times_bias() {
        // Frequency-channel bias b from a node with out-degree d moves the
        // fused abnormality by exactly K1*d*b.
        let g = complete_graph(4);
        for tree in enumerate_arborescences(&g, 1, 100).unwrap().trees.iter().take(6) {
            let node = tree.edges[0].0;
            let d = tree.edges.iter().filter(|&&(f, _)| f == node).count() as f64;
            let b = 0.37;
            let atk = AttackSpec {
                kind: AttackKind::Fdi { node },
                start: 0.0,
                waveform: Waveform::Constant,
                bias: ChannelBias { omega: b, p: 0.0, q: 0.0 },
            };
            let omega = vec![50.0; 4];
            let p = vec![8000.0; 4];
            let q = vec![2000.0; 4];
            let gains = ControllerGains::pinned(40.0, 20.0, 4, tree.root);
            let clean = route(&omega, &p, &q, 50.0, tree, &[], 0.0).unwrap();
            let dirty = route(&omega, &p, &q, 50.0, tree, &[atk], 0.0).unwrap();
            let shift = compute_tpr(&consensus_rates(&dirty, tree, &gains, &droop(4)).unwrap())
                - compute_tpr(&consensus_rates(&clean, tree, &gains, &droop(4)).unwrap());
            assert!((shift - 40.0 * d * b).abs() < 1e-9, "d={d}");
        }
    }

    #[test]
    fn tpr_is_linear_in_rates() {
        let a = SecondaryRates {
            d_omega_dot: vec![1.0, -2.0, 3.0],
            d_v_dot: vec![0.5, 0.25, -1.0],
        };
        let b = SecondaryRates {
            d_omega_dot: vec![-0.5, 4.0, 1.5],
            d_v_dot: vec![2.0, -0.75, 0.1],
        };
        let sum = SecondaryRates {
            d_omega_dot: a.d_omega_dot.iter().zip(&b.d_omega_dot).map(|(x, y)| x + y).collect(),
            d_v_dot: a.d_v_dot.iter().zip(&b.d_v_dot).map(|(x, y)| x + y).collect(),
        };
        assert!((compute_tpr(&sum) - (compute_tpr(&a) + compute_tpr(&b))).abs() < 1e-12);
    }

    #[test]
    fn support_mismatch_is_rejected() {
        let tree = Arborescence::new(0, &[(0, 1)]);
        let mut rx = synchronized_rx(2, &tree, 8000.0, 2000.0);
        let i = rx.idx(0, 1);
        rx.r_omega[i] = 50.0; // edge 1->0 not in tree
        let gains = ControllerGains::pinned(40.0, 20.0, 2, 0);
        assert!(matches!(
            consensus_rates(&rx, &tree, &gains, &droop(2)),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn residuals_zero_for_synchronized_trajectory() {
        let cfg = crate::grid::default_grid(4);
        let mut s = GridState::initial(&cfg);
        s.p_meas = vec![8000.0; 4];
        s.q_meas = vec![2000.0; 4];
        let traj = Trajectory { states: vec![s] };
        let r = objectives_residual(&traj, &cfg.droop).unwrap();
        assert_eq!(r.freq_err, 0.0);
        assert_eq!(r.p_share_err, 0.0);
        assert_eq!(r.q_share_err, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Any synchronized state (uniform frequency matching the reference,
        /// equal droop-weighted powers) yields exactly zero rates on every
        /// candidate tree.
        #[test]
        fn synchronized_states_give_exactly_zero(
            tree_pick in 0usize..16,
            shared_p in 1000.0f64..15_000.0,
            shared_q in 100.0f64..4000.0,
        ) {
            let g = complete_graph(4);
            let trees = enumerate_arborescences(&g, 0, 100).unwrap();
            let tree = &trees.trees[tree_pick % trees.len()];
            let rx = synchronized_rx(4, tree, shared_p, shared_q);
            let gains = ControllerGains::pinned(40.0, 20.0, 4, tree.root);
            let rates = consensus_rates(&rx, tree, &gains, &droop(4)).unwrap();
            prop_assert_eq!(compute_tpr(&rates), 0.0);
        }

        /// Constant-bias attacks on a tree edge strictly raise |T_pr| from a
        /// synchronized state whenever any channel magnitude is >= 0.1 and
        /// all share a sign.
        #[test]
        fn attack_signature_raises_abnormality(
            tree_pick in 0usize..16,
            edge_pick in 0usize..3,
            use_mitm in proptest::bool::ANY,
            w in 0.1f64..2.0,
            p in 0.1f64..5000.0,
            q in 0.1f64..2000.0,
            negate in proptest::bool::ANY,
        ) {
            let g = complete_graph(4);
            let trees = enumerate_arborescences(&g, 2, 100).unwrap();
            let tree = trees.trees[tree_pick % trees.len()].clone();
            let (from, to) = tree.edges[edge_pick % tree.edges.len()];
            let sign = if negate { -1.0 } else { 1.0 };
            let bias = ChannelBias { omega: sign * w, p: sign * p, q: sign * q };
            let kind = if use_mitm {
                AttackKind::Mitm { link: (from, to) }
            } else {
                AttackKind::Fdi { node: from }
            };
            let atk = AttackSpec { kind, start: 0.0, waveform: Waveform::Constant, bias };
            let omega = vec![50.0; 4];
            let pw = vec![8000.0; 4];
            let qv = vec![2000.0; 4];
            let gains = ControllerGains::pinned(40.0, 20.0, 4, tree.root);
            let clean = route(&omega, &pw, &qv, 50.0, &tree, &[], 0.0).unwrap();
            let dirty = route(&omega, &pw, &qv, 50.0, &tree, &[atk], 0.0).unwrap();
            let d = droop(4);
            let tpr_clean = compute_tpr(&consensus_rates(&clean, &tree, &gains, &d).unwrap());
            let tpr_dirty = compute_tpr(&consensus_rates(&dirty, &tree, &gains, &d).unwrap());
            prop_assert!(tpr_dirty.abs() > tpr_clean.abs());
        }
    }
}
