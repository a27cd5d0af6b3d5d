//! Fixed-step closed loop: RK4 on the near-hover model, per-robot controllers
//! on their own clock, failure injection, logging and run metrics.

use crate::controller::{robot_command, storage_value, AsscParams, ControllerConfig, RobotControllerState};
use crate::dynamics::{
    error_state, fs, nonlinear_derivative, quadrant_average, quadrant_average_active, quadrant_expand, stationary_input,
    AttachmentLayout, ErrorState, FailureVector, FullState, PayloadDesign, PayloadModel,
};
use crate::error::{Error, Result};
use nalgebra::{DVector, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReferenceProfile {
    Constant,
    /// Constant-velocity ramp from `start` to the target over `duration` s.
    Ramp { duration: f64 },
}

/// World-frame references (X, Y, Z, ψ).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference {
    pub target: [f64; 4],
    pub start: [f64; 4],
    pub profile: ReferenceProfile,
}

impl Reference {
    pub fn constant(target: [f64; 4]) -> Self {
        Reference { target, start: target, profile: ReferenceProfile::Constant }
    }

    pub fn at(&self, t: f64) -> [f64; 4] {
        match self.profile {
            ReferenceProfile::Constant => self.target,
            ReferenceProfile::Ramp { duration } => {
                let s = if duration > 0.0 { (t / duration).clamp(0.0, 1.0) } else { 1.0 };
                std::array::from_fn(|k| self.start[k] + s * (self.target[k] - self.start[k]))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FailureEvent {
    /// Zero-based robot index.
    pub robot: usize,
    pub time: f64,
}

/// Zero-mean Gaussian measurement noise on the broadcast state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub position: f64,
    pub attitude: f64,
    pub velocity: f64,
    pub rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub design: PayloadDesign,
    pub layout: AttachmentLayout,
    pub mass: f64,
    pub com: (f64, f64),
    pub reference: Reference,
    pub initial: FullState,
    pub failure: Option<FailureEvent>,
    pub duration: f64,
    pub dt: f64,
    pub log_period: f64,
    pub controller: ControllerConfig,
    pub assc: AsscParams,
    pub noise: Option<NoiseSpec>,
    pub divergence_limit: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.duration >= 0.0) || !(self.log_period > 0.0) {
            return Err(Error::Contract("dt and log period must be positive, duration non-negative".into()));
        }
        if let Some(f) = self.failure {
            if f.robot >= self.layout.n_robots() || !(f.time >= 0.0 && f.time <= self.duration) {
                return Err(Error::Contract(format!("failure {f:?} outside the robot set or run")));
            }
        }
        self.controller.validate()?;
        self.assc.validate()?;
        self.control_every()?;
        self.log_every()?;
        Ok(())
    }

    fn ratio(&self, period: f64, what: &str) -> Result<usize> {
        let k = (period / self.dt).round();
        if k < 1.0 || ((k * self.dt) - period).abs() > 1e-9 * period.max(1.0) {
            return Err(Error::Contract(format!("{what} {period} s is not a multiple of dt {}", self.dt)));
        }
        Ok(k as usize)
    }

    pub fn control_every(&self) -> Result<usize> {
        self.ratio(self.controller.dt_c, "controller period")
    }

    pub fn log_every(&self) -> Result<usize> {
        self.ratio(self.log_period, "log period")
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// One RK4 step with thrusts held constant.
pub fn rk4_step(
    s: &FullState,
    thrusts: &[f64],
    model: &PayloadModel,
    layout: &AttachmentLayout,
    active: &[bool],
    dt: f64,
) -> Result<FullState> {
    let f = |x: &FullState| nonlinear_derivative(x, thrusts, model, layout, active);
    let k1 = f(s)?;
    let k2 = f(&(s + k1 * (dt / 2.0)))?;
    let k3 = f(&(s + k2 * (dt / 2.0)))?;
    let k4 = f(&(s + k3 * dt))?;
    Ok(s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogSample {
    pub t: f64,
    pub state: FullState,
    pub xi: ErrorState,
    pub thrusts: Vec<f64>,
    pub phi: Vec<f64>,
    pub eta: [f64; 4],
    pub v_c: f64,
    pub zeta_exact: [f64; 4],
    pub zeta_approx: [f64; 4],
    pub active_mask: u64,
    pub reference: [f64; 4],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PassivityStats {
    pub samples: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog {
    pub samples: Vec<LogSample>,
    pub n_robots: usize,
    pub failure_time: Option<f64>,
    pub passivity: PassivityStats,
}

/// Mutable closed-loop state.
pub struct Simulation<'a> {
    sc: &'a Scenario,
    model: PayloadModel,
    state: FullState,
    step_index: usize,
    control_every: usize,
    robots: Vec<RobotControllerState>,
    applied: Vec<f64>,
    commands: Vec<f64>,
    active: Vec<bool>,
    pending: Vec<FailureEvent>,
    rng: Option<(ChaCha8Rng, NoiseSpec)>,
    eta: [f64; 4],
    zeta_exact: [f64; 4],
    zeta_approx: [f64; 4],
    v_c: f64,
    xi: ErrorState,
    residual_sum: f64,
    residual_max: f64,
    residual_count: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(sc: &'a Scenario) -> Result<Self> {
        sc.validate()?;
        let model = sc.design.model(sc.mass, sc.com, &sc.layout)?;
        let n = sc.layout.n_robots();
        let robots = (0..n)
            .map(|i| RobotControllerState::new(sc.layout.quadrant_of(i), &sc.assc, &sc.controller))
            .collect();
        Ok(Simulation {
            sc,
            model,
            state: sc.initial,
            step_index: 0,
            control_every: sc.control_every()?,
            robots,
            applied: vec![0.0; n],
            commands: vec![0.0; n],
            active: vec![true; n],
            pending: Vec::new(),
            rng: sc.noise.map(|ns| (ChaCha8Rng::seed_from_u64(ns.seed), ns)),
            eta: [0.0; 4],
            zeta_exact: [0.0; 4],
            zeta_approx: [0.0; 4],
            v_c: 0.0,
            xi: ErrorState::zeros(),
            residual_sum: 0.0,
            residual_max: 0.0,
            residual_count: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.sc.dt
    }

    pub fn state(&self) -> &FullState {
        &self.state
    }

    pub fn applied_thrusts(&self) -> &[f64] {
        &self.applied
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    /// Schedules robot `robot` (zero-based) to stop producing thrust from `t`.
    /// Its controller keeps running; its commands are discarded.
    pub fn inject_failure(&mut self, robot: usize, t: f64) -> Result<()> {
        if robot >= self.active.len() {
            return Err(Error::Contract(format!("unknown robot {}", robot + 1)));
        }
        if !self.active[robot] || self.pending.iter().any(|f| f.robot == robot) {
            return Err(Error::Contract(format!("robot {} has already failed", robot + 1)));
        }
        self.pending.push(FailureEvent { robot, time: t });
        Ok(())
    }

    fn apply_due_failures(&mut self) {
        let t = self.time();
        let dt = self.sc.dt;
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].time <= t + 1e-9 * dt {
                let r = self.pending.remove(i).robot;
                self.active[r] = false;
                self.applied[r] = 0.0;
            } else {
                i += 1;
            }
        }
    }

    fn measured(&mut self) -> FullState {
        let mut m = self.state;
        if let Some((rng, ns)) = self.rng.as_mut() {
            let groups = [
                ([fs::X, fs::Y, fs::Z], ns.position),
                ([fs::ROLL, fs::PITCH, fs::YAW], ns.attitude),
                ([fs::VX, fs::VY, fs::VZ], ns.velocity),
                ([fs::P, fs::Q, fs::R], ns.rate),
            ];
            for (idx, std) in groups {
                if std > 0.0 {
                    let d = Normal::new(0.0, std).expect("finite std");
                    for k in idx {
                        m[k] += d.sample(rng);
                    }
                }
            }
        }
        m
    }

    fn control_tick(&mut self) -> Result<()> {
        let sc = self.sc;
        let meas = self.measured();
        let refs = sc.reference.at(self.time());
        let xi = error_state(&meas, refs);
        let rates = [meas[fs::Q], meas[fs::P], meas[fs::VZ], meas[fs::R]];
        let sigma = FailureVector::from_mask(&self.active);
        let u_r = stationary_input(&self.model, &sc.layout, &sigma).ok();
        let u_r_robots = u_r.map(|u| quadrant_expand(u.as_slice(), self.active.len())).transpose()?;
        let phi_before: Vec<f64> = self.robots.iter().map(|r| r.phi).collect();

        let mut u_s = vec![0.0; self.robots.len()];
        let mut u_f = [0.0; 4];
        for (i, robot) in self.robots.iter_mut().enumerate() {
            let cmd = robot_command(&xi, rates, robot, &sc.controller, &sc.assc, sc.layout.u_max)?;
            self.commands[i] = cmd.thrust;
            self.applied[i] = if self.active[i] { cmd.thrust } else { 0.0 };
            u_s[i] = cmd.u_s;
            u_f[robot.quadrant] = cmd.u_f;
            if i == 0 {
                self.eta = cmd.eta;
            }
        }

        let per = sc.layout.per_quadrant();
        let c0xi = &sc.controller.c0 * DVector::from_column_slice(xi.as_slice());
        let u_avg = quadrant_average_active(&self.applied, &self.active)?;
        let u_r4 = u_r.unwrap_or_else(Vector4::zeros);
        let gap = DVector::from_fn(4, |q, _| u_avg[q] - u_f[q] - u_r4[q]);
        let exact = &c0xi + &sc.controller.d0 * gap;
        self.zeta_exact = [exact[0], exact[1], exact[2], exact[3]];
        let g_inv = sc.controller.g.clone().try_inverse();
        self.zeta_approx = match g_inv {
            Some(gi) => {
                let z = gi * DVector::from_column_slice(&self.eta);
                [z[0], z[1], z[2], z[3]]
            }
            None => [f64::NAN; 4],
        };

        match &u_r_robots {
            Some(ur) => {
                let phi_after: Vec<f64> = self.robots.iter().map(|r| r.phi).collect();
                let v0 = storage_value(&phi_before, ur, &sc.assc, per);
                let v1 = storage_value(&phi_after, ur, &sc.assc, per);
                match (v0, v1) {
                    (Ok(v0), Ok(v1)) => {
                        let us = quadrant_average(&u_s)?;
                        let supply: f64 = (0..4).map(|q| self.eta[q] * (us[q] - u_r4[q])).sum();
                        let res = ((v1 - v0) / sc.controller.dt_c + supply).abs();
                        self.residual_sum += res;
                        self.residual_max = self.residual_max.max(res);
                        self.residual_count += 1;
                        self.v_c = v1;
                    }
                    _ => self.v_c = f64::NAN,
                }
            }
            None => self.v_c = f64::NAN,
        }
        self.xi = xi;
        Ok(())
    }

    /// Applies due failures and runs the controllers if a control tick falls
    /// on the current step.
    pub fn prepare(&mut self) -> Result<()> {
        self.apply_due_failures();
        if self.step_index % self.control_every == 0 {
            self.control_tick()?;
        }
        Ok(())
    }

    /// Integrates one physics step and checks for divergence.
    pub fn integrate(&mut self) -> Result<()> {
        let sc = self.sc;
        let next = rk4_step(&self.state, &self.applied, &self.model, &sc.layout, &self.active, sc.dt).map_err(|e| Error::Divergence {
            t: self.time(),
            reason: e.to_string(),
        })?;
        self.step_index += 1;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { t: self.time(), reason: "non-finite state".into() });
        }
        self.state = next;
        let r = sc.reference.at(self.time());
        let err = ((next[fs::X] - r[0]).powi(2) + (next[fs::Y] - r[1]).powi(2) + (next[fs::Z] - r[2]).powi(2)).sqrt();
        if err > sc.divergence_limit {
            return Err(Error::Divergence { t: self.time(), reason: format!("position error {err:.1} m exceeds {} m", sc.divergence_limit) });
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<()> {
        self.prepare()?;
        self.integrate()
    }

    fn sample(&self) -> LogSample {
        let mask = self.active.iter().enumerate().fold(0u64, |m, (i, &a)| if a { m | (1 << i) } else { m });
        LogSample {
            t: self.time(),
            state: self.state,
            xi: self.xi,
            thrusts: self.applied.clone(),
            phi: self.robots.iter().map(|r| r.phi).collect(),
            eta: self.eta,
            v_c: self.v_c,
            zeta_exact: self.zeta_exact,
            zeta_approx: self.zeta_approx,
            active_mask: mask,
            reference: self.sc.reference.at(self.time()),
        }
    }

    pub fn passivity(&self) -> PassivityStats {
        PassivityStats {
            samples: self.residual_count,
            mean_abs: if self.residual_count > 0 { self.residual_sum / self.residual_count as f64 } else { 0.0 },
            max_abs: self.residual_max,
        }
    }
}

/// Runs a scenario to completion.
pub fn run_scenario(sc: &Scenario) -> Result<TrajectoryLog> {
    let mut sim = Simulation::new(sc)?;
    if let Some(f) = sc.failure {
        sim.inject_failure(f.robot, f.time)?;
    }
    let steps = sc.steps();
    let log_every = sc.log_every()?;
    let mut samples = Vec::with_capacity(steps / log_every + 1);
    for k in 0..=steps {
        sim.prepare()?;
        if k % log_every == 0 {
            samples.push(sim.sample());
        }
        if k < steps {
            sim.integrate()?;
        }
    }
    Ok(TrajectoryLog {
        samples,
        n_robots: sc.layout.n_robots(),
        failure_time: sc.failure.map(|f| f.time),
        passivity: sim.passivity(),
    })
}

fn channel(s: &LogSample) -> [f64; 4] {
    [s.state[fs::X], s.state[fs::Y], s.state[fs::Z], s.state[fs::YAW]]
}

/// Band floors for (X, Y, Z, ψ): metres and radians.
pub const BAND_FLOORS: [f64; 4] = [0.05, 0.05, 0.05, 0.015];

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Time after which each channel stays inside its band; infinite if it
    /// never settles.
    pub settling: [f64; 4],
    pub band: [f64; 4],
    pub rms_final: [f64; 4],
    pub peak_post_failure: Option<[f64; 4]>,
}

pub fn metrics(log: &TrajectoryLog) -> Result<Metrics> {
    let samples = &log.samples;
    let last = samples.last().ok_or_else(|| Error::Contract("empty log".into()))?;
    let band: [f64; 4] = std::array::from_fn(|c| (0.05 * last.reference[c].abs()).max(BAND_FLOORS[c]));
    let err = |s: &LogSample, c: usize| channel(s)[c] - s.reference[c];
    let mut settling = [0.0; 4];
    let mut rms = [0.0; 4];
    let tail_start = samples.len() - ((samples.len() as f64 * 0.2).ceil() as usize).max(1);
    for c in 0..4 {
        settling[c] = match samples.iter().rposition(|s| err(s, c).abs() > band[c]) {
            None => samples[0].t,
            Some(i) if i + 1 == samples.len() => f64::INFINITY,
            Some(i) => samples[i + 1].t,
        };
        let tail = &samples[tail_start..];
        rms[c] = (tail.iter().map(|s| err(s, c).powi(2)).sum::<f64>() / tail.len() as f64).sqrt();
    }
    let peak_post_failure = log.failure_time.map(|tf| {
        let mut peak = [0.0f64; 4];
        for s in samples.iter().filter(|s| s.t >= tf) {
            for c in 0..4 {
                peak[c] = peak[c].max(err(s, c).abs());
            }
        }
        peak
    });
    Ok(Metrics { settling, band, rms_final: rms, peak_post_failure })
}

/// Largest per-channel deviation of a failure run from its failure-free twin
/// after the failure instant.
pub fn failure_induced_peak(with_failure: &TrajectoryLog, twin: &TrajectoryLog) -> Result<[f64; 4]> {
    let tf = with_failure.failure_time.ok_or_else(|| Error::Contract("log has no failure".into()))?;
    if with_failure.samples.len() != twin.samples.len() {
        return Err(Error::Contract("logs differ in length".into()));
    }
    let mut peak = [0.0f64; 4];
    for (a, b) in with_failure.samples.iter().zip(&twin.samples).filter(|(a, _)| a.t >= tf) {
        let (ca, cb) = (channel(a), channel(b));
        for c in 0..4 {
            peak[c] = peak[c].max((ca[c] - cb[c]).abs());
        }
    }
    Ok(peak)
}

/// Fraction of samples in the final 20% of the run where the exact and the
/// approximated ζ agree in sign, per channel, counting only samples where the
/// exact value exceeds `threshold`. `None` when no sample qualifies.
pub fn zeta_sign_agreement(log: &TrajectoryLog, threshold: f64) -> [Option<f64>; 4] {
    let n = log.samples.len();
    let tail = &log.samples[n - ((n as f64 * 0.2).ceil() as usize).max(1).min(n)..];
    std::array::from_fn(|c| {
        let relevant: Vec<&LogSample> = tail.iter().filter(|s| s.zeta_exact[c].abs() > threshold).collect();
        if relevant.is_empty() {
            None
        } else {
            let agree = relevant.iter().filter(|s| s.zeta_exact[c].signum() == s.zeta_approx[c].signum()).count();
            Some(agree as f64 / relevant.len() as f64)
        }
    })
}

const XI_NAMES: [&str; 12] = [
    "x_e", "xdot_e", "theta_e", "thetadot_e", "y_e", "ydot_e", "phi_e", "phidot_e", "z_e", "zdot_e", "psi_e", "psidot_e",
];

pub fn csv_header(n_robots: usize) -> String {
    let mut cols: Vec<String> = ["t", "X", "Y", "Z", "roll", "pitch", "yaw"].iter().map(|s| s.to_string()).collect();
    cols.extend(XI_NAMES.iter().map(|s| s.to_string()));
    cols.extend((1..=n_robots).map(|i| format!("u_{i}")));
    cols.extend((1..=n_robots).map(|i| format!("phi_{i}")));
    cols.extend((1..=4).map(|i| format!("eta_{i}")));
    cols.push("V_c".into());
    cols.extend((1..=4).map(|i| format!("zeta_exact_{i}")));
    cols.push("active_mask".into());
    cols.join(",")
}

/// CSV with 10 significant digits per float.
pub fn write_csv(log: &TrajectoryLog) -> String {
    let mut out = csv_header(log.n_robots);
    out.push('\n');
    let f = |v: f64| format!("{v:.9e}");
    for s in &log.samples {
        let mut row: Vec<String> = vec![f(s.t)];
        row.extend([fs::X, fs::Y, fs::Z, fs::ROLL, fs::PITCH, fs::YAW].iter().map(|&k| f(s.state[k])));
        row.extend(s.xi.iter().map(|&v| f(v)));
        row.extend(s.thrusts.iter().map(|&v| f(v)));
        row.extend(s.phi.iter().map(|&v| f(v)));
        row.extend(s.eta.iter().map(|&v| f(v)));
        row.push(f(s.v_c));
        row.extend(s.zeta_exact.iter().map(|&v| f(v)));
        row.push(s.active_mask.to_string());
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// `key: value` summary lines.
pub fn metrics_summary(m: &Metrics, log: &TrajectoryLog) -> String {
    let names = ["X", "Y", "Z", "yaw"];
    let mut s = String::new();
    for c in 0..4 {
        let _ = writeln!(s, "settling_{}: {:.3}", names[c], m.settling[c]);
    }
    for c in 0..4 {
        let _ = writeln!(s, "rms_final_{}: {:.6e}", names[c], m.rms_final[c]);
    }
    if let Some(p) = m.peak_post_failure {
        for c in 0..4 {
            let _ = writeln!(s, "peak_post_failure_{}: {:.6e}", names[c], p[c]);
        }
    }
    let _ = writeln!(s, "passivity_residual_mean: {:.6e}", log.passivity.mean_abs);
    let _ = writeln!(s, "passivity_residual_max: {:.6e}", log.passivity.max_abs);
    let _ = writeln!(s, "samples: {}", log.samples.len());
    s
}
