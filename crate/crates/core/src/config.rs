//! TOML configuration shared by the CLI and the tests.
//!
//! Units: lengths in m, masses in kg, thrusts in N, angles in rad, times in s.
//! Robot numbers in the file are 1-based.

use crate::controller::{AsscParams, ControllerConfig};
use crate::dynamics::{build_a, default_c0, default_d0, AttachmentLayout, FailureVector, FullState, PayloadDesign, PayloadShape, Rect};
use crate::error::{Error, Result};
use crate::lmi::Method;
use crate::simulator::{FailureEvent, NoiseSpec, Reference, ReferenceProfile, Scenario};
use crate::synthesis::{check_stationary_inputs, enumerate_vertices, synthesize, FluctuationSpec, SynthesisOptions, SynthesisResult};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub payload: PayloadSection,
    pub layout: LayoutSection,
    pub fluctuation: FluctuationSection,
    pub controller: ControllerSection,
    pub assc: AsscSection,
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadSection {
    pub shape: PayloadShape,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    /// Point mass per robot lumped at its attachment; 0 disables.
    #[serde(default)]
    pub robot_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSection {
    pub robots_per_quadrant: usize,
    /// Quadrant attachment points relative to the footprint centroid.
    pub quadrant_positions: [[f64; 2]; 4],
    pub spins: [f64; 4],
    pub c_q: f64,
    pub u_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureSet {
    NominalOnly,
    SingleFailure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluctuationSection {
    pub mass_min: f64,
    pub mass_max: f64,
    /// COM extents relative to the centroid.
    pub com_x: [f64; 2],
    pub com_y: [f64; 2],
    pub failures: FailureSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    DouglasRachford,
    Pocs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub c0: Vec<Vec<f64>>,
    pub d0: Vec<Vec<f64>>,
    pub epsilon: f64,
    /// A + αI is used in the LMI so the certificate bounds the decay rate.
    pub decay_rate: f64,
    pub q_floor: f64,
    pub precondition: bool,
    pub method: SolverMethod,
    pub max_iter: usize,
    pub tol: f64,
    pub relaxation: f64,
    pub slack: f64,
    pub feedback_enabled: bool,
    pub dt_c: f64,
    pub accel_cutoff_hz: f64,
    /// Mass used for D̂0 and the default φ_0.
    pub nominal_mass: f64,
    /// Per-channel (x, y, z, ψ) G scale and acceleration weight of the fully
    /// decentralized mode.
    pub decentralized_gain: [f64; 4],
    pub decentralized_accel_weight: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsscSection {
    pub k: f64,
    pub u_p: f64,
    pub u_n: f64,
    pub phi_p: f64,
    /// Defaults to the φ giving δ(φ_0) = nominal_mass·g/N.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anti_windup: Option<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Constant,
    Ramp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSection {
    /// 1-based robot number.
    pub robot: usize,
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub position: f64,
    pub attitude: f64,
    pub velocity: f64,
    pub rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub mass: f64,
    pub com: [f64; 2],
    /// World-frame targets (X, Y, Z, ψ).
    pub reference: [f64; 4],
    pub profile: ProfileKind,
    /// Ramp duration; ignored for constant references.
    pub ramp_time: f64,
    pub initial_position: [f64; 3],
    pub initial_yaw: f64,
    pub duration: f64,
    pub dt: f64,
    pub divergence_limit: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub log_period: f64,
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { log_period: 0.2, dir: "out".into() }
    }
}

fn default_gravity() -> f64 {
    crate::dynamics::DEFAULT_GRAVITY
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], shape: (usize, usize), what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::Config(format!("{what} must be {}x{}", shape.0, shape.1)));
    }
    Ok(DMatrix::from_fn(shape.0, shape.1, |r, c| rows[r][c]))
}

pub const PRESETS: [&str; 4] = ["rectangle", "lshape", "prototype", "prototype-decentralized"];

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "rectangle" => include_str!("../configs/rectangle.toml"),
            "lshape" => include_str!("../configs/lshape.toml"),
            "prototype" => include_str!("../configs/prototype.toml"),
            "prototype-decentralized" => include_str!("../configs/prototype-decentralized.toml"),
            other => return Err(Error::Config(format!("unknown preset '{other}', expected one of {PRESETS:?}"))),
        };
        Self::from_toml(text)
    }

    /// Preset built in code; the shipped files are generated from these.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "rectangle" => Ok(Self::rectangle_default()),
            "lshape" => Ok(Self::lshape_default()),
            "prototype" => Ok(Self::prototype_default()),
            "prototype-decentralized" => Ok(Self::prototype_decentralized_default()),
            other => Err(Error::Config(format!("unknown preset '{other}', expected one of {PRESETS:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.fluctuation.mass_min > self.fluctuation.mass_max {
            return bad(format!("mass_min {} exceeds mass_max {}", self.fluctuation.mass_min, self.fluctuation.mass_max));
        }
        if self.fluctuation.mass_min <= 0.0 {
            return bad("mass_min must be positive".into());
        }
        if self.fluctuation.com_x[0] > self.fluctuation.com_x[1] || self.fluctuation.com_y[0] > self.fluctuation.com_y[1] {
            return bad("COM extents must be ordered".into());
        }
        if self.scenario.mass <= 0.0 || self.scenario.dt <= 0.0 || self.scenario.duration < 0.0 {
            return bad("scenario mass and dt must be positive, duration non-negative".into());
        }
        if let Some(f) = &self.scenario.failure {
            if f.robot == 0 || f.robot > 4 * self.layout.robots_per_quadrant {
                return bad(format!("failure robot {} out of range", f.robot));
            }
        }
        from_rows(&self.controller.c0, (4, 12), "controller.c0")?;
        from_rows(&self.controller.d0, (4, 4), "controller.d0")?;
        self.design().shape.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.layout().map_err(|e| Error::Config(e.to_string()))?;
        self.assc_params().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn design(&self) -> PayloadDesign {
        PayloadDesign { shape: self.payload.shape.clone(), gravity: self.payload.gravity, robot_mass: self.payload.robot_mass }
    }

    pub fn layout(&self) -> Result<AttachmentLayout> {
        let l = &self.layout;
        AttachmentLayout::from_quadrants(l.quadrant_positions, l.spins, l.robots_per_quadrant, l.c_q, l.u_max)
    }

    pub fn fluctuation(&self) -> FluctuationSpec {
        let per = self.layout.robots_per_quadrant;
        let f = &self.fluctuation;
        FluctuationSpec {
            mass: [f.mass_min, f.mass_max],
            com_x: f.com_x,
            com_y: f.com_y,
            failures: match f.failures {
                FailureSet::NominalOnly => vec![FailureVector::nominal(per)],
                FailureSet::SingleFailure => FailureVector::single_failures(per),
            },
        }
    }

    pub fn c0(&self) -> DMatrix<f64> {
        from_rows(&self.controller.c0, (4, 12), "c0").expect("validated")
    }

    pub fn d0(&self) -> DMatrix<f64> {
        from_rows(&self.controller.d0, (4, 4), "d0").expect("validated")
    }

    pub fn synthesis_options(&self) -> SynthesisOptions {
        let c = &self.controller;
        SynthesisOptions {
            epsilon: c.epsilon,
            decay_rate: c.decay_rate,
            q_floor: c.q_floor,
            precondition: c.precondition,
            max_iter: c.max_iter,
            tol: c.tol,
            method: match c.method {
                SolverMethod::DouglasRachford => Method::DouglasRachford,
                SolverMethod::Pocs => Method::Pocs,
            },
            relaxation: c.relaxation,
            slack: c.slack,
        }
    }

    /// Enumerates the vertices, checks that each can hover within the thrust
    /// range and solves the vertex LMIs.
    pub fn synthesize(&self) -> Result<SynthesisResult> {
        let design = self.design();
        let layout = self.layout()?;
        let vertices = enumerate_vertices(&design, &layout, &self.fluctuation())?;
        let upper = self.assc.u_p.min(self.layout.u_max);
        check_stationary_inputs(&design, &layout, &vertices, self.assc.u_n, upper)?;
        let bs: Vec<DMatrix<f64>> = vertices.into_iter().map(|v| v.b).collect();
        synthesize(&build_a(self.payload.gravity), &bs, &self.c0(), &self.d0(), &self.synthesis_options())
    }

    pub fn assc_params(&self) -> AsscParams {
        let a = &self.assc;
        let n = (4 * self.layout.robots_per_quadrant) as f64;
        let hover = self.controller.nominal_mass * self.payload.gravity / n;
        AsscParams {
            k: a.k,
            u_p: a.u_p,
            u_n: a.u_n,
            phi_p: a.phi_p,
            phi_0: a.phi_0.unwrap_or_else(|| AsscParams::phi_for_thrust(a.u_p, a.phi_p, hover)),
            anti_windup: a.anti_windup.map(|[lo, hi]| (lo, hi)),
        }
    }

    /// Controller matrices: the synthesized feedback when enabled, the
    /// decentralized mixer otherwise.
    pub fn controller_config(&self, synthesis: Option<&SynthesisResult>, feedback: bool) -> Result<ControllerConfig> {
        let c = &self.controller;
        let layout = self.layout()?;
        let mut cfg = if feedback {
            let s = synthesis.ok_or_else(|| Error::Config("feedback enabled but no synthesis result given".into()))?;
            let nominal = self.design().model(c.nominal_mass, (0.0, 0.0), &layout)?;
            ControllerConfig::with_feedback(s.f.clone(), s.g.clone(), s.c0.clone(), s.d0.clone(), &nominal, &layout, c.dt_c)?
        } else {
            ControllerConfig::decentralized(&layout, self.c0(), c.decentralized_gain, c.decentralized_accel_weight, c.dt_c)?
        };
        cfg.accel_cutoff_hz = c.accel_cutoff_hz;
        Ok(cfg)
    }

    pub fn scenario(&self, synthesis: Option<&SynthesisResult>, feedback: bool) -> Result<Scenario> {
        let s = &self.scenario;
        let mut initial = FullState::zeros();
        initial[0] = s.initial_position[0];
        initial[1] = s.initial_position[1];
        initial[2] = s.initial_position[2];
        initial[5] = s.initial_yaw;
        let start = [s.initial_position[0], s.initial_position[1], s.initial_position[2], s.initial_yaw];
        let reference = match s.profile {
            ProfileKind::Constant => Reference::constant(s.reference),
            ProfileKind::Ramp => Reference { target: s.reference, start, profile: ReferenceProfile::Ramp { duration: s.ramp_time } },
        };
        let scenario = Scenario {
            design: self.design(),
            layout: self.layout()?,
            mass: s.mass,
            com: (s.com[0], s.com[1]),
            reference,
            initial,
            failure: s.failure.as_ref().map(|f| FailureEvent { robot: f.robot - 1, time: f.time }),
            duration: s.duration,
            dt: s.dt,
            log_period: self.output.log_period,
            controller: self.controller_config(synthesis, feedback)?,
            assc: self.assc_params(),
            noise: s.noise.as_ref().map(|n| NoiseSpec { position: n.position, attitude: n.attitude, velocity: n.velocity, rate: n.rate, seed: n.seed }),
            divergence_limit: s.divergence_limit,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// The rectangle payload with the default weights, used as the base of
    /// every preset.
    pub fn rectangle_default() -> Self {
        Config {
            payload: PayloadSection {
                shape: PayloadShape::Rectangle { length_x: 0.2, length_y: 1.6 },
                gravity: default_gravity(),
                robot_mass: 0.0,
            },
            layout: LayoutSection {
                robots_per_quadrant: 2,
                quadrant_positions: [[0.3, 0.6], [-0.3, 0.6], [-0.3, -0.6], [0.3, -0.6]],
                spins: [1.0, -1.0, 1.0, -1.0],
                c_q: 0.02,
                u_max: 20.0,
            },
            fluctuation: FluctuationSection {
                mass_min: 1.0,
                mass_max: 3.0,
                com_x: [-0.05, 0.05],
                com_y: [-0.25, 0.25],
                failures: FailureSet::SingleFailure,
            },
            controller: ControllerSection {
                c0: to_rows(&default_c0()),
                d0: to_rows(&default_d0()),
                epsilon: 1e-3,
                decay_rate: 0.4,
                q_floor: 1.0,
                precondition: true,
                method: SolverMethod::DouglasRachford,
                max_iter: 50_000,
                tol: 1e-8,
                relaxation: 1.0,
                slack: 2.0,
                feedback_enabled: true,
                dt_c: 0.005,
                accel_cutoff_hz: 20.0,
                nominal_mass: 2.0,
                decentralized_gain: [0.25, 4.0, 0.5, 16.0],
                decentralized_accel_weight: [0.02, 0.03, 0.5, 0.1],
            },
            assc: AsscSection { k: 10.0, u_p: 20.0, u_n: 0.0, phi_p: 4.0, phi_0: None, anti_windup: None },
            scenario: ScenarioSection {
                mass: 2.0,
                com: [0.0, 0.0],
                reference: [3.0, 2.0, 1.0, 0.3],
                profile: ProfileKind::Constant,
                ramp_time: 0.0,
                initial_position: [0.0, 0.0, 1.0],
                initial_yaw: 0.0,
                duration: 30.0,
                dt: 0.001,
                divergence_limit: 100.0,
                failure: Some(FailureSection { robot: 8, time: 2.5 }),
                noise: None,
            },
            output: OutputSection::default(),
        }
    }

    /// Two 0.8 × 0.4 m rectangles joined in an L.
    pub fn lshape_default() -> Self {
        let mut c = Self::rectangle_default();
        c.payload.shape = PayloadShape::LShape {
            parts: [
                Rect { length_x: 0.8, length_y: 0.4, offset_x: 0.4, offset_y: 0.2 },
                Rect { length_x: 0.4, length_y: 0.8, offset_x: 0.2, offset_y: 0.8 },
            ],
        };
        c.layout.quadrant_positions = [[0.1, 0.7], [-0.3, 0.7], [-0.3, -0.5], [0.5, -0.5]];
        c.fluctuation.com_x = [-0.1, 0.1];
        c.fluctuation.com_y = [-0.1, 0.1];
        c.assc.k = 20.0;
        c
    }

    pub fn prototype_default() -> Self {
        let mut c = Self::rectangle_default();
        c.layout.u_max = 14.2;
        c.fluctuation = FluctuationSection {
            mass_min: 2.7,
            mass_max: 2.7,
            com_x: [0.0, 0.0],
            com_y: [-0.25, 0.25],
            failures: FailureSet::SingleFailure,
        };
        c.controller.nominal_mass = 2.7;
        c.assc.u_p = 14.2;
        c.scenario = ScenarioSection {
            mass: 2.7,
            com: [0.0, -0.25],
            reference: [3.0, 0.0, 0.5, 0.0],
            profile: ProfileKind::Ramp,
            ramp_time: 10.0,
            initial_position: [0.0, 0.0, 0.0],
            initial_yaw: 0.0,
            duration: 30.0,
            dt: 0.001,
            divergence_limit: 100.0,
            failure: Some(FailureSection { robot: 8, time: 5.0 }),
            noise: None,
        };
        c
    }

    pub fn prototype_decentralized_default() -> Self {
        let mut c = Self::prototype_default();
        c.controller.feedback_enabled = false;
        c.scenario.com = [0.0, 0.0];
        c.scenario.reference = [0.0, 0.0, 1.0, 0.0];
        c.scenario.profile = ProfileKind::Constant;
        c.scenario.initial_position = [0.0, 0.0, 1.0];
        c.scenario.failure = None;
        c
    }
}
