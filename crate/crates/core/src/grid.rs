//! Reduced-order dynamic model of an N-DG islanded AC microgrid.
//!
//! Each distributed generator (DG) carries an electrical angle, a frequency
//! and voltage magnitude under droop control, first-order filtered power
//! measurements, and the secondary correction terms fed back by the
//! consensus layer. Inter-DG coupling is a lossless sinusoidal branch-flow
//! network; integration is fixed-step classical RK4.

use crate::control::SecondaryRates;
use crate::error::{Error, Result};

/// Droop-control parameters of one DG.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DroopParams {
    /// Frequency set-point (Hz).
    pub omega_nom: f64,
    /// Voltage set-point (V).
    pub v_nom: f64,
    /// Active-power droop gain (Hz/W).
    pub d_p: f64,
    /// Reactive-power droop gain (V/var).
    pub d_q: f64,
    /// Largest allowed frequency deviation (Hz).
    pub delta_omega_max: f64,
    /// Largest allowed voltage deviation (V).
    pub delta_v_max: f64,
}

impl DroopParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_p > 0.0 && self.d_q > 0.0 && self.omega_nom > 0.0) {
            return Err(Error::Config(format!(
                "droop gains and omega_nom must be positive (d_p={}, d_q={}, omega_nom={})",
                self.d_p, self.d_q, self.omega_nom
            )));
        }
        if !(self.delta_omega_max > 0.0 && self.delta_v_max > 0.0) {
            return Err(Error::Config(
                "delta_omega_max and delta_v_max must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Droop-rating condition: at rated power the droop-induced deviation
    /// stays inside the allowed band.
    pub fn supports_rating(&self, p_rated: f64, q_rated: f64) -> bool {
        self.d_p * p_rated <= self.delta_omega_max && self.d_q * q_rated <= self.delta_v_max
    }
}

/// Electrical tie-line between two DGs (reduced-order stand-in for line
/// impedance).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LineSpec {
    /// Endpoint DG indices (0-based).
    pub from: usize,
    pub to: usize,
    /// Active-power coupling strength (pu of `s_base`).
    pub susceptance: f64,
    /// Reactive-power coupling strength (var/V).
    pub conductance: f64,
}

impl LineSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.from == self.to {
            return Err(Error::Config(format!(
                "line {}-{} is a self-loop",
                self.from, self.to
            )));
        }
        if self.from >= n || self.to >= n {
            return Err(Error::Config(format!(
                "line {}-{} references a DG outside 0..{}",
                self.from, self.to, n
            )));
        }
        if self.susceptance <= 0.0 {
            return Err(Error::Config(format!(
                "line {}-{} must have positive susceptance",
                self.from, self.to
            )));
        }
        Ok(())
    }
}

/// Physical parameters of the whole microgrid plus integration settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridConfig {
    /// DG count.
    pub n: usize,
    /// Per-DG droop parameters.
    pub droop: Vec<DroopParams>,
    /// Tie-lines of the physical network.
    pub lines: Vec<LineSpec>,
    /// Per-DG active load (W).
    pub loads_p: Vec<f64>,
    /// Per-DG reactive load (var).
    pub loads_q: Vec<f64>,
    /// Power-measurement filter time constant (s).
    pub tau_p: f64,
    /// Integration step (s).
    pub dt: f64,
    /// Simulation horizon (s).
    pub t_total: f64,
    /// Base power scaling branch flows (W).
    pub s_base: f64,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("need at least 2 DGs, got {}", self.n)));
        }
        if self.droop.len() != self.n || self.loads_p.len() != self.n || self.loads_q.len() != self.n {
            return Err(Error::Config(format!(
                "per-DG arrays must have length n={} (droop={}, loads_p={}, loads_q={})",
                self.n,
                self.droop.len(),
                self.loads_p.len(),
                self.loads_q.len()
            )));
        }
        for d in &self.droop {
            d.validate()?;
        }
        for line in &self.lines {
            line.validate(self.n)?;
        }
        if self.dt.is_nan() || self.dt <= 0.0 {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.t_total < self.dt {
            return Err(Error::Config("t_total must be at least dt".into()));
        }
        if self.tau_p.is_nan() || self.tau_p <= 0.0 {
            return Err(Error::Config("tau_p must be positive".into()));
        }
        if self.s_base.is_nan() || self.s_base <= 0.0 {
            return Err(Error::Config("s_base must be positive".into()));
        }
        if !lines_connected(self.n, &self.lines) {
            return Err(Error::Topology("physical line graph is not connected".into()));
        }
        // Rating condition at equal-share load.
        let p_rated = self.loads_p.iter().sum::<f64>() / self.n as f64;
        let q_rated = self.loads_q.iter().sum::<f64>() / self.n as f64;
        for (l, d) in self.droop.iter().enumerate() {
            if !d.supports_rating(p_rated, q_rated) {
                return Err(Error::Config(format!(
                    "droop rating violated at DG {l}: d_p*P_rated={} > delta_omega_max={} or d_q*Q_rated={} > delta_v_max={}",
                    d.d_p * p_rated,
                    d.delta_omega_max,
                    d.d_q * q_rated,
                    d.delta_v_max
                )));
            }
        }
        Ok(())
    }

    /// Number of RK4 steps for the configured horizon.
    pub fn step_count(&self) -> usize {
        (self.t_total / self.dt).round() as usize
    }
}

/// Dynamic state of the microgrid at one instant.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridState {
    /// Electrical angle (rad).
    pub theta: Vec<f64>,
    /// Frequency (Hz).
    pub omega: Vec<f64>,
    /// Voltage magnitude (V).
    pub v: Vec<f64>,
    /// Filtered active-power measurement (W).
    pub p_meas: Vec<f64>,
    /// Filtered reactive-power measurement (var).
    pub q_meas: Vec<f64>,
    /// Secondary frequency correction (Hz).
    pub delta_omega: Vec<f64>,
    /// Secondary voltage correction (V).
    pub delta_v: Vec<f64>,
    /// Simulation time (s).
    pub t: f64,
}

impl GridState {
    /// Nominal initial condition: aligned angles, nominal frequency and
    /// voltage, measurements warmed to the local loads, zero corrections.
    pub fn initial(config: &GridConfig) -> Self {
        let n = config.n;
        GridState {
            theta: vec![0.0; n],
            omega: config.droop.iter().map(|d| d.omega_nom).collect(),
            v: config.droop.iter().map(|d| d.v_nom).collect(),
            p_meas: config.loads_p.clone(),
            q_meas: config.loads_q.clone(),
            delta_omega: vec![0.0; n],
            delta_v: vec![0.0; n],
            t: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }

    /// Index of the first non-finite entry in flattened order, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.to_vec().iter().position(|x| !x.is_finite())
    }

    pub(crate) fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(7 * self.n());
        out.extend_from_slice(&self.theta);
        out.extend_from_slice(&self.omega);
        out.extend_from_slice(&self.v);
        out.extend_from_slice(&self.p_meas);
        out.extend_from_slice(&self.q_meas);
        out.extend_from_slice(&self.delta_omega);
        out.extend_from_slice(&self.delta_v);
        out
    }

    pub(crate) fn from_vec(y: &[f64], n: usize, t: f64) -> Self {
        debug_assert_eq!(y.len(), 7 * n);
        GridState {
            theta: y[0..n].to_vec(),
            omega: y[n..2 * n].to_vec(),
            v: y[2 * n..3 * n].to_vec(),
            p_meas: y[3 * n..4 * n].to_vec(),
            q_meas: y[4 * n..5 * n].to_vec(),
            delta_omega: y[5 * n..6 * n].to_vec(),
            delta_v: y[6 * n..7 * n].to_vec(),
            t,
        }
    }
}

/// Time-ordered sequence of states at the integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<GridState>,
}

impl Trajectory {
    pub fn last(&self) -> &GridState {
        self.states.last().expect("trajectory is nonempty")
    }

    /// CSV export: `t` then per-DG `omega_i, v_i, p_i, q_i, delta_omega_i,
    /// delta_v_i` (1-based names). `tree_index`, when given, appends an
    /// `active_tree_index` column and must match the state count.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, tree_index: Option<&[usize]>) -> Result<()> {
        let n = self.states.first().map(|s| s.n()).unwrap_or(0);
        if let Some(idx) = tree_index {
            if idx.len() != self.states.len() {
                return Err(Error::Data(format!(
                    "tree index column has {} entries for {} states",
                    idx.len(),
                    self.states.len()
                )));
            }
        }
        let mut header = String::from("t");
        for i in 1..=n {
            header.push_str(&format!(
                ",omega_{i},v_{i},p_{i},q_{i},delta_omega_{i},delta_v_{i}"
            ));
        }
        if tree_index.is_some() {
            header.push_str(",active_tree_index");
        }
        writeln!(w, "{header}")?;
        for (k, s) in self.states.iter().enumerate() {
            let mut line = format!("{}", s.t);
            for l in 0..n {
                line.push_str(&format!(
                    ",{},{},{},{},{},{}",
                    s.omega[l], s.v[l], s.p_meas[l], s.q_meas[l], s.delta_omega[l], s.delta_v[l]
                ));
            }
            if let Some(idx) = tree_index {
                line.push_str(&format!(",{}", idx[k]));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Source of secondary correction rates, evaluated at every RK4 stage.
pub trait SecondaryRateProvider {
    fn rates(&self, state: &GridState) -> Result<SecondaryRates>;
}

/// Provider with identically zero rates (open-loop secondary).
pub struct ZeroSecondary;

impl SecondaryRateProvider for ZeroSecondary {
    fn rates(&self, state: &GridState) -> Result<SecondaryRates> {
        Ok(SecondaryRates::zero(state.n()))
    }
}

/// Droop set-point of one DG given its measured powers and corrections:
/// `omega* = omega_nom - d_p*p + d_omega`, `v* = v_nom - d_q*q + d_v`.
pub fn primary_setpoint(
    droop: &DroopParams,
    p: f64,
    q: f64,
    d_omega: f64,
    d_v: f64,
) -> Result<(f64, f64)> {
    droop.validate()?;
    if ![p, q, d_omega, d_v].iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidState(
            "non-finite input to primary_setpoint".into(),
        ));
    }
    let omega_star = droop.omega_nom - droop.d_p * p + d_omega;
    let v_star = droop.v_nom - droop.d_q * q + d_v;
    Ok((omega_star, v_star))
}

/// Lossless network coupling: each DG generates its local load plus the sum
/// of sinusoidal branch exports; reactive generation follows voltage
/// differences. Branch flows are antisymmetric, so total generation equals
/// total load.
pub fn power_flow(
    theta: &[f64],
    v: &[f64],
    lines: &[LineSpec],
    loads_p: &[f64],
    loads_q: &[f64],
    s_base: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = theta.len();
    if v.len() != n || loads_p.len() != n || loads_q.len() != n {
        return Err(Error::InvalidState("power_flow input length mismatch".into()));
    }
    if !lines_connected(n, lines) {
        return Err(Error::Topology("physical line graph is not connected".into()));
    }
    Ok(power_flow_unchecked(theta, v, lines, loads_p, loads_q, s_base))
}

fn power_flow_unchecked(
    theta: &[f64],
    v: &[f64],
    lines: &[LineSpec],
    loads_p: &[f64],
    loads_q: &[f64],
    s_base: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut p = loads_p.to_vec();
    let mut q = loads_q.to_vec();
    for line in lines {
        let (a, b) = (line.from, line.to);
        let transfer = line.susceptance * (theta[a] - theta[b]).sin() * s_base;
        p[a] += transfer;
        p[b] -= transfer;
        let q_transfer = line.conductance * (v[a] - v[b]);
        q[a] += q_transfer;
        q[b] -= q_transfer;
    }
    (p, q)
}

fn lines_connected(n: usize, lines: &[LineSpec]) -> bool {
    if n == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n];
    for line in lines {
        if line.from >= n || line.to >= n {
            return false;
        }
        adj[line.from].push(line.to);
        adj[line.to].push(line.from);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &w in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                stack.push(w);
            }
        }
    }
    count == n
}

/// Time derivative of the full state under droop tracking and the supplied
/// secondary rates. Angles integrate the frequency deviation in rad/s; the
/// frequency, voltage and measurement channels are first-order tracking
/// loops with time constant `tau_p`.
pub fn derivatives(
    state: &GridState,
    rates: &SecondaryRates,
    config: &GridConfig,
) -> Result<GridState> {
    let n = config.n;
    if state.n() != n || rates.d_omega_dot.len() != n || rates.d_v_dot.len() != n {
        return Err(Error::InvalidState("derivatives input length mismatch".into()));
    }
    if state.first_non_finite().is_some() {
        return Err(Error::InvalidState("non-finite state in derivatives".into()));
    }
    let (p, q) = power_flow_unchecked(
        &state.theta,
        &state.v,
        &config.lines,
        &config.loads_p,
        &config.loads_q,
        config.s_base,
    );
    let mut d = GridState {
        theta: vec![0.0; n],
        omega: vec![0.0; n],
        v: vec![0.0; n],
        p_meas: vec![0.0; n],
        q_meas: vec![0.0; n],
        delta_omega: rates.d_omega_dot.clone(),
        delta_v: rates.d_v_dot.clone(),
        t: 1.0,
    };
    for l in 0..n {
        let dr = &config.droop[l];
        let omega_star = dr.omega_nom - dr.d_p * state.p_meas[l] + state.delta_omega[l];
        let v_star = dr.v_nom - dr.d_q * state.q_meas[l] + state.delta_v[l];
        d.theta[l] = 2.0 * std::f64::consts::PI * (state.omega[l] - dr.omega_nom);
        d.omega[l] = (omega_star - state.omega[l]) / config.tau_p;
        d.v[l] = (v_star - state.v[l]) / config.tau_p;
        d.p_meas[l] = (p[l] - state.p_meas[l]) / config.tau_p;
        d.q_meas[l] = (q[l] - state.q_meas[l]) / config.tau_p;
    }
    Ok(d)
}

/// One classical RK4 step over a flat state vector.
pub fn rk4_vec<F>(y: &[f64], t: f64, dt: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    let k1 = f(y, t);
    let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, k)| a + 0.5 * dt * k).collect();
    let k2 = f(&y2, t + 0.5 * dt);
    let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, k)| a + 0.5 * dt * k).collect();
    let k3 = f(&y3, t + 0.5 * dt);
    let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, k)| a + dt * k).collect();
    let k4 = f(&y4, t + dt);
    y.iter()
        .enumerate()
        .map(|(i, a)| a + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Advance the grid one step of `config.dt` with classical RK4, querying the
/// provider for secondary rates at every stage.
pub fn step_rk4(
    state: &GridState,
    config: &GridConfig,
    provider: &dyn SecondaryRateProvider,
) -> Result<GridState> {
    let n = config.n;
    let mut provider_err = None;
    let y = state.to_vec();
    let next = rk4_vec(&y, state.t, config.dt, |yy, tt| {
        let stage = GridState::from_vec(yy, n, tt);
        if let Some(index) = stage.first_non_finite() {
            provider_err.get_or_insert(Error::NumericalDivergence { t: tt, index });
            return vec![0.0; 7 * n];
        }
        let rates = match provider.rates(&stage) {
            Ok(r) => r,
            Err(e) => {
                provider_err.get_or_insert(e);
                SecondaryRates::zero(n)
            }
        };
        match derivatives(&stage, &rates, config) {
            Ok(d) => d.to_vec(),
            Err(e) => {
                provider_err.get_or_insert(e);
                vec![0.0; 7 * n]
            }
        }
    });
    if let Some(e) = provider_err {
        return Err(e);
    }
    let out = GridState::from_vec(&next, n, state.t + config.dt);
    if let Some(index) = out.first_non_finite() {
        return Err(Error::NumericalDivergence { t: out.t, index });
    }
    Ok(out)
}

/// Run the plant from the nominal initial condition to the horizon,
/// recording every step.
pub fn simulate(config: &GridConfig, provider: &dyn SecondaryRateProvider) -> Result<Trajectory> {
    config.validate()?;
    let mut state = GridState::initial(config);
    let steps = config.step_count();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(state.clone());
    for k in 0..steps {
        state = step_rk4(&state, config, provider)?;
        // Step-indexed time; summing dt drifts over long horizons.
        state.t = (k + 1) as f64 * config.dt;
        states.push(state.clone());
    }
    Ok(Trajectory { states })
}

/// Default 4-DG ring configuration used by tests and shipped scenarios.
pub fn default_grid(n: usize) -> GridConfig {
    let droop = DroopParams {
        omega_nom: 50.0,
        v_nom: 311.0,
        d_p: 1e-4,
        d_q: 1e-4,
        delta_omega_max: 1.0,
        delta_v_max: 10.0,
    };
    let lines = (0..n)
        .map(|i| LineSpec {
            from: i,
            to: (i + 1) % n,
            susceptance: 0.5,
            conductance: 50.0,
        })
        .take(if n == 2 { 1 } else { n })
        .collect();
    GridConfig {
        n,
        droop: vec![droop; n],
        lines,
        loads_p: vec![8000.0; n],
        loads_q: vec![2000.0; n],
        tau_p: 0.05,
        dt: 1e-3,
        t_total: 10.0,
        s_base: 10_000.0,
    }
}
