//! Per-robot decentralized controller: the robust feedback share, the output
//! η = Gζ built from estimated accelerations, and the ASSC switching law.

use crate::dynamics::{accel_block, build_b, AttachmentLayout, ErrorState, FailureVector, PayloadModel};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsscParams {
    pub k: f64,
    pub u_p: f64,
    pub u_n: f64,
    pub phi_p: f64,
    pub phi_0: f64,
    /// Optional clamp on φ.
    pub anti_windup: Option<(f64, f64)>,
}

impl AsscParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || !(self.u_p > self.u_n) || !(self.phi_p > 0.0) || !self.phi_0.is_finite() {
            return Err(Error::Contract(format!("invalid ASSC parameters {self:?}")));
        }
        if let Some((lo, hi)) = self.anti_windup {
            if !(lo < hi) {
                return Err(Error::Contract("anti-windup bounds must be ordered".into()));
            }
        }
        Ok(())
    }

    /// φ whose ramp output is `thrust`.
    pub fn phi_for_thrust(u_p: f64, phi_p: f64, thrust: f64) -> f64 {
        phi_p * thrust / u_p
    }
}

/// Switching function δ(φ).
pub fn switching(phi: f64, p: &AsscParams) -> f64 {
    if phi >= p.phi_p {
        p.u_p
    } else if phi >= 0.0 {
        p.u_p / p.phi_p * phi
    } else {
        p.u_n
    }
}

/// Explicit Euler step of φ̇ = −Kη.
pub fn assc_update(phi: f64, eta: f64, k: f64, dt: f64) -> f64 {
    phi - k * eta * dt
}

/// Backward difference of the rates (θ̇, φ̇, ż, ψ̇) through a one-pole
/// low-pass filter.
#[derive(Clone, Debug, PartialEq)]
pub struct AccelEstimator {
    pub cutoff_hz: f64,
    prev: Option<[f64; 4]>,
    filtered: [f64; 4],
}

impl AccelEstimator {
    pub fn new(cutoff_hz: f64) -> Self {
        AccelEstimator { cutoff_hz, prev: None, filtered: [0.0; 4] }
    }

    pub fn estimate(&mut self, rates: [f64; 4], dt: f64) -> Result<[f64; 4]> {
        if !(dt > 0.0) {
            return Err(Error::Contract("estimator step must be positive".into()));
        }
        let Some(prev) = self.prev.replace(rates) else {
            return Ok([0.0; 4]);
        };
        // Exact discretisation of the continuous one-pole filter.
        let a = 1.0 - (-2.0 * std::f64::consts::PI * self.cutoff_hz * dt).exp();
        for k in 0..4 {
            let raw = (rates[k] - prev[k]) / dt;
            self.filtered[k] += a * (raw - self.filtered[k]);
        }
        Ok(self.filtered)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerConfig {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    /// Design direct term; the robots use it to remove their own feedback
    /// share from the predicted output.
    pub d0: DMatrix<f64>,
    pub d0_hat: DMatrix<f64>,
    pub feedback_enabled: bool,
    pub dt_c: f64,
    pub accel_cutoff_hz: f64,
}

impl ControllerConfig {
    /// Feedback configuration from a synthesis result, with
    /// D̂0 = D0·B_acc⁻¹ at a nominal model.
    pub fn with_feedback(
        f: DMatrix<f64>,
        g: DMatrix<f64>,
        c0: DMatrix<f64>,
        d0: DMatrix<f64>,
        nominal: &PayloadModel,
        layout: &AttachmentLayout,
        dt_c: f64,
    ) -> Result<Self> {
        let bacc = accel_block(&build_b(nominal, layout, &FailureVector::nominal(layout.per_quadrant())));
        let inv = bacc.try_inverse().ok_or_else(|| Error::InvalidModel("nominal input map is singular".into()))?;
        let inv = DMatrix::from_fn(4, 4, |r, c| inv[(r, c)]);
        let d0_hat = &d0 * inv;
        let cfg = ControllerConfig { f, g, c0, d0, d0_hat, feedback_enabled: true, dt_c, accel_cutoff_hz: 20.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully decentralized configuration without shared geometry: F = 0, a
    /// sign mixer for G and a channel-aligned acceleration weight for D̂0.
    ///
    /// Row q of G is `(−w_x sgn r₁, w_y sgn r₂, w_z, w_ψ d_q)`, so a positive
    /// channel output lowers the thrust of the quadrants that push the error
    /// further. Each channel closes an integrator around its C0 chain, which
    /// is stable only for a small acceleration weight and a large enough gain;
    /// pitch and roll inertia can differ by an order of magnitude or more, so
    /// both are set per channel.
    pub fn decentralized(
        layout: &AttachmentLayout,
        c0: DMatrix<f64>,
        weight: [f64; 4],
        accel_weight: [f64; 4],
        dt_c: f64,
    ) -> Result<Self> {
        if weight.iter().chain(&accel_weight).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Contract("decentralized weights must be finite and non-negative".into()));
        }
        let mut g = DMatrix::zeros(4, 4);
        for q in 0..4 {
            let p = layout.quadrant_position(q);
            g[(q, 0)] = -p[0].signum() * weight[0];
            g[(q, 1)] = p[1].signum() * weight[1];
            g[(q, 2)] = weight[2];
            g[(q, 3)] = layout.quadrant_spin(q) * weight[3];
        }
        let cfg = ControllerConfig {
            f: DMatrix::zeros(4, c0.ncols()),
            g,
            c0,
            d0: DMatrix::zeros(4, 4),
            d0_hat: DMatrix::from_diagonal(&DVector::from_column_slice(&accel_weight)),
            feedback_enabled: false,
            dt_c,
            accel_cutoff_hz: 20.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.c0.ncols();
        if self.f.shape() != (4, n) || self.g.shape() != (4, 4) || self.c0.nrows() != 4 || self.d0.shape() != (4, 4) || self.d0_hat.shape() != (4, 4) {
            return Err(Error::Contract("controller matrices have inconsistent dimensions".into()));
        }
        if !(self.dt_c > 0.0) || !(self.accel_cutoff_hz > 0.0) {
            return Err(Error::Contract("controller period and filter cutoff must be positive".into()));
        }
        Ok(())
    }

    /// Quadrant feedback shares −F·ξ, or zero when feedback is disabled.
    pub fn feedback(&self, xi: &ErrorState) -> [f64; 4] {
        if !self.feedback_enabled {
            return [0.0; 4];
        }
        let v = -(&self.f * DVector::from_column_slice(xi.as_slice()));
        [v[0], v[1], v[2], v[3]]
    }
}

/// η = G·(C0·ξ + D̂0·â − D0·U_f).
///
/// The last term removes the feedback share from the predicted output, so η
/// approximates G·(C0·ξ + D0·(U_s − U_r)), the output the SPR certificate is
/// written for. With feedback disabled it vanishes.
pub fn compute_eta(xi: &ErrorState, accel_hat: &[f64; 4], u_f: &[f64; 4], cfg: &ControllerConfig) -> [f64; 4] {
    let zeta = &cfg.c0 * DVector::from_column_slice(xi.as_slice()) + &cfg.d0_hat * DVector::from_column_slice(accel_hat)
        - &cfg.d0 * DVector::from_column_slice(u_f);
    let eta = &cfg.g * zeta;
    [eta[0], eta[1], eta[2], eta[3]]
}

/// State owned by one robot.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotControllerState {
    pub phi: f64,
    pub quadrant: usize,
    pub estimator: AccelEstimator,
}

impl RobotControllerState {
    pub fn new(quadrant: usize, params: &AsscParams, cfg: &ControllerConfig) -> Self {
        RobotControllerState { phi: params.phi_0, quadrant, estimator: AccelEstimator::new(cfg.accel_cutoff_hz) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotCommand {
    /// Thrust after saturation, N.
    pub thrust: f64,
    /// Switching output δ(φ) before the update.
    pub u_s: f64,
    pub u_f: f64,
    pub eta: [f64; 4],
}

/// One control tick for one robot. Reads only the broadcast state and the
/// robot's own controller state.
pub fn robot_command(
    xi: &ErrorState,
    rates: [f64; 4],
    state: &mut RobotControllerState,
    cfg: &ControllerConfig,
    params: &AsscParams,
    u_max: f64,
) -> Result<RobotCommand> {
    let acc = state.estimator.estimate(rates, cfg.dt_c)?;
    let u_f = cfg.feedback(xi);
    let eta = compute_eta(xi, &acc, &u_f, cfg);
    let q = state.quadrant;
    let u_s = switching(state.phi, params);
    let thrust = (u_s + u_f[q]).clamp(0.0, u_max);
    let mut phi = assc_update(state.phi, eta[q], params.k, cfg.dt_c);
    if let Some((lo, hi)) = params.anti_windup {
        phi = phi.clamp(lo, hi);
    }
    state.phi = phi;
    Ok(RobotCommand { thrust, u_s, u_f: u_f[q], eta })
}

/// ∫₀^φ δ(s) ds in closed form.
pub fn switching_integral(phi: f64, p: &AsscParams) -> f64 {
    if phi >= p.phi_p {
        0.5 * p.u_p * p.phi_p + p.u_p * (phi - p.phi_p)
    } else if phi >= 0.0 {
        0.5 * p.u_p * phi * phi / p.phi_p
    } else {
        p.u_n * phi
    }
}

/// V = Σᵢ ∫₀^φᵢ (δ(s) − u_rᵢ) / (n_q·K) ds with n_q robots per quadrant.
pub fn storage_value(phi: &[f64], u_r: &[f64], params: &AsscParams, per_quadrant: usize) -> Result<f64> {
    if phi.len() != u_r.len() {
        return Err(Error::Contract("phi and u_r lengths differ".into()));
    }
    let mut v = 0.0;
    for (&ph, &ur) in phi.iter().zip(u_r) {
        if ur < params.u_n || ur > params.u_p {
            return Err(Error::Contract(format!("stationary input {ur} outside [{}, {}]", params.u_n, params.u_p)));
        }
        v += (switching_integral(ph, params) - ur * ph) / (per_quadrant as f64 * params.k);
    }
    Ok(v)
}
