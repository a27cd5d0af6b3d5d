//! Near-hover payload model, its linearized 12-state error system and the
//! quadrant bookkeeping that links individual robots to averaged inputs.
//!
//! Full state ordering is `[X, Y, Z, roll, pitch, yaw, vx, vy, vz, p, q, r]`
//! with angular rates identified with Euler-angle rates (small-angle model).
//! Error state ordering is `[x, ẋ, θ, θ̇, y, ẏ, φ, φ̇, z, ż, ψ, ψ̇]`.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, Matrix3, Matrix4, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

pub const STATE_DIM: usize = 12;
pub const INPUT_DIM: usize = 4;
/// Error-state rows driven by the inputs: θ̈, φ̈, z̈, ψ̈.
pub const ACCEL_ROWS: [usize; 4] = [3, 7, 9, 11];
pub const DEFAULT_GRAVITY: f64 = 9.81;

pub type FullState = SVector<f64, 12>;
pub type ErrorState = SVector<f64, 12>;

/// Indices into [`FullState`].
pub mod fs {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const Z: usize = 2;
    pub const ROLL: usize = 3;
    pub const PITCH: usize = 4;
    pub const YAW: usize = 5;
    pub const VX: usize = 6;
    pub const VY: usize = 7;
    pub const VZ: usize = 8;
    pub const P: usize = 9;
    pub const Q: usize = 10;
    pub const R: usize = 11;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub length_x: f64,
    pub length_y: f64,
    #[serde(default)]
    pub offset_x: f64,
    #[serde(default)]
    pub offset_y: f64,
}

impl Rect {
    fn area(&self) -> f64 {
        self.length_x * self.length_y
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.offset_x).abs() <= 0.5 * self.length_x + 1e-12
            && (y - self.offset_y).abs() <= 0.5 * self.length_y + 1e-12
    }
}

/// Planar footprint of the payload. Offsets of the L-shape parts are in an
/// arbitrary drawing frame; everything downstream works relative to the
/// area centroid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadShape {
    Rectangle { length_x: f64, length_y: f64 },
    LShape { parts: [Rect; 2] },
}

impl PayloadShape {
    pub fn rects(&self) -> Vec<Rect> {
        match self {
            PayloadShape::Rectangle { length_x, length_y } => vec![Rect {
                length_x: *length_x,
                length_y: *length_y,
                offset_x: 0.0,
                offset_y: 0.0,
            }],
            PayloadShape::LShape { parts } => parts.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rects = self.rects();
        for r in &rects {
            let finite = [r.length_x, r.length_y, r.offset_x, r.offset_y].iter().all(|v| v.is_finite());
            if !finite || r.length_x <= 0.0 || r.length_y <= 0.0 {
                return Err(Error::InvalidModel(format!("degenerate rectangle {r:?}")));
            }
        }
        if let [a, b] = rects.as_slice() {
            let gap_x = (a.offset_x - b.offset_x).abs() - 0.5 * (a.length_x + b.length_x);
            let gap_y = (a.offset_y - b.offset_y).abs() - 0.5 * (a.length_y + b.length_y);
            if gap_x > 1e-12 || gap_y > 1e-12 {
                return Err(Error::InvalidModel("l_shape parts neither overlap nor touch".into()));
            }
        }
        Ok(())
    }

    /// Area centroid in the drawing frame.
    pub fn centroid(&self) -> (f64, f64) {
        let rects = self.rects();
        let area: f64 = rects.iter().map(Rect::area).sum();
        let cx = rects.iter().map(|r| r.area() * r.offset_x).sum::<f64>() / area;
        let cy = rects.iter().map(|r| r.area() * r.offset_y).sum::<f64>() / area;
        (cx, cy)
    }

    /// Whether a point given relative to the centroid lies on the footprint.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.centroid();
        self.rects().iter().any(|r| r.contains(x + cx, y + cy))
    }
}

/// Uniform thin-plate inertia about the area centroid.
pub fn build_inertia(shape: &PayloadShape, mass: f64) -> Result<Matrix3<f64>> {
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::InvalidModel(format!("mass must be positive, got {mass}")));
    }
    shape.validate()?;
    let rects = shape.rects();
    let area: f64 = rects.iter().map(Rect::area).sum();
    let (cx, cy) = shape.centroid();
    let (mut ixx, mut iyy, mut ixy) = (0.0, 0.0, 0.0);
    for r in &rects {
        let mi = mass * r.area() / area;
        let dx = r.offset_x - cx;
        let dy = r.offset_y - cy;
        ixx += mi * r.length_y * r.length_y / 12.0 + mi * dy * dy;
        iyy += mi * r.length_x * r.length_x / 12.0 + mi * dx * dx;
        ixy -= mi * dx * dy;
    }
    Ok(Matrix3::new(ixx, ixy, 0.0, ixy, iyy, 0.0, 0.0, 0.0, ixx + iyy))
}

/// Mass properties shared by every (m, COM) variant of one physical payload.
#[derive(Clone, Debug, PartialEq)]
pub struct PayloadDesign {
    pub shape: PayloadShape,
    pub gravity: f64,
    /// Optional point mass per robot, lumped at its attachment. Zero disables.
    pub robot_mass: f64,
}

impl PayloadDesign {
    pub fn new(shape: PayloadShape) -> Self {
        PayloadDesign { shape, gravity: DEFAULT_GRAVITY, robot_mass: 0.0 }
    }

    /// Builds the model for a payload mass and a COM offset from the centroid.
    ///
    /// The inertia stays the plate inertia about the centroid: a COM bias comes
    /// from a concentrated extra mass whose own distribution is unknown, and
    /// keeping J fixed keeps B affine in (1/m, COM).
    pub fn model(&self, mass: f64, com: (f64, f64), layout: &AttachmentLayout) -> Result<PayloadModel> {
        let mut inertia = build_inertia(&self.shape, mass)?;
        let mut total = mass;
        if self.robot_mass > 0.0 {
            for p in &layout.positions {
                let (x, y) = (p[0], p[1]);
                let mr = self.robot_mass;
                inertia += Matrix3::new(mr * y * y, -mr * x * y, 0.0, -mr * x * y, mr * x * x, 0.0, 0.0, 0.0, mr * (x * x + y * y));
                total += mr;
            }
        }
        PayloadModel::new(total, inertia, com, self.gravity, Some(&self.shape))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PayloadModel {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    pub inertia_inv: Matrix3<f64>,
    /// COM offset from the footprint centroid, m.
    pub com_offset: (f64, f64),
    pub gravity: f64,
}

impl PayloadModel {
    pub fn new(
        mass: f64,
        inertia: Matrix3<f64>,
        com_offset: (f64, f64),
        gravity: f64,
        footprint: Option<&PayloadShape>,
    ) -> Result<Self> {
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::InvalidModel(format!("mass must be positive, got {mass}")));
        }
        if (inertia - inertia.transpose()).amax() > 1e-12 * inertia.amax().max(1.0) {
            return Err(Error::InvalidModel("inertia not symmetric".into()));
        }
        let eig = inertia.symmetric_eigenvalues();
        if eig.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidModel(format!("inertia not positive definite: {eig:?}")));
        }
        if let Some(shape) = footprint {
            if !shape.contains(com_offset.0, com_offset.1) {
                return Err(Error::InvalidModel(format!("COM {com_offset:?} outside the footprint")));
            }
        }
        let inertia_inv = inertia
            .try_inverse()
            .ok_or_else(|| Error::InvalidModel("singular inertia".into()))?;
        Ok(PayloadModel { mass, inertia, inertia_inv, com_offset, gravity })
    }
}

/// Robot attachment points relative to the footprint centroid, grouped into
/// four quadrants of equal size. Robot `i` belongs to quadrant
/// `i / robots_per_quadrant`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttachmentLayout {
    pub positions: Vec<[f64; 2]>,
    pub spins: Vec<f64>,
    pub c_q: f64,
    pub u_max: f64,
}

impl AttachmentLayout {
    pub fn from_quadrants(
        quadrant_positions: [[f64; 2]; 4],
        quadrant_spins: [f64; 4],
        robots_per_quadrant: usize,
        c_q: f64,
        u_max: f64,
    ) -> Result<Self> {
        if robots_per_quadrant == 0 {
            return Err(Error::InvalidModel("robots_per_quadrant must be positive".into()));
        }
        let mut positions = Vec::new();
        let mut spins = Vec::new();
        for q in 0..4 {
            for _ in 0..robots_per_quadrant {
                positions.push(quadrant_positions[q]);
                spins.push(quadrant_spins[q]);
            }
        }
        let layout = AttachmentLayout { positions, spins, c_q, u_max };
        layout.validate()?;
        Ok(layout)
    }

    pub fn n_robots(&self) -> usize {
        self.positions.len()
    }

    pub fn per_quadrant(&self) -> usize {
        self.positions.len() / 4
    }

    pub fn quadrant_of(&self, robot: usize) -> usize {
        robot / self.per_quadrant()
    }

    pub fn quadrant_position(&self, q: usize) -> [f64; 2] {
        self.positions[q * self.per_quadrant()]
    }

    pub fn quadrant_spin(&self, q: usize) -> f64 {
        self.spins[q * self.per_quadrant()]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 || n % 4 != 0 || self.spins.len() != n {
            return Err(Error::InvalidModel(format!("robot count {n} must be a positive multiple of 4")));
        }
        if !(self.u_max > 0.0) || !(self.c_q >= 0.0) {
            return Err(Error::InvalidModel("u_max must be positive and c_q non-negative".into()));
        }
        for i in 0..n {
            let q = self.quadrant_of(i);
            if self.positions[i] != self.quadrant_position(q) || self.spins[i] != self.quadrant_spin(q) {
                return Err(Error::InvalidModel(format!("robot {} differs from its quadrant", i + 1)));
            }
            if self.spins[i].abs() != 1.0 {
                return Err(Error::InvalidModel("spin directions must be +1 or -1".into()));
            }
        }
        Ok(())
    }

    /// Attachment vectors from the COM for each quadrant.
    pub fn quadrant_arms(&self, com: (f64, f64)) -> [[f64; 2]; 4] {
        let mut out = [[0.0; 2]; 4];
        for (q, arm) in out.iter_mut().enumerate() {
            let p = self.quadrant_position(q);
            *arm = [p[0] - com.0, p[1] - com.1];
        }
        out
    }
}

/// Active robot count per quadrant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FailureVector(pub [usize; 4]);

impl FailureVector {
    pub fn nominal(per_quadrant: usize) -> Self {
        FailureVector([per_quadrant; 4])
    }

    /// The nominal vector followed by one failure in each quadrant.
    pub fn single_failures(per_quadrant: usize) -> Vec<Self> {
        let mut out = vec![Self::nominal(per_quadrant)];
        for q in 0..4 {
            let mut s = [per_quadrant; 4];
            s[q] -= 1;
            out.push(FailureVector(s));
        }
        out
    }

    pub fn from_mask(active: &[bool]) -> Self {
        let per = active.len() / 4;
        let mut s = [0; 4];
        for (i, &a) in active.iter().enumerate() {
            if a {
                s[i / per] += 1;
            }
        }
        FailureVector(s)
    }
}

/// Matrices of the error system. C0 and D0 are design weights carried along
/// with the plant matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorStateSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    pub d0: DMatrix<f64>,
}

impl ErrorStateSystem {
    pub fn with_outputs(mut self, c0: DMatrix<f64>, d0: DMatrix<f64>) -> Self {
        self.c0 = c0;
        self.d0 = d0;
        self
    }
}

pub fn build_a(g: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for k in (0..STATE_DIM).step_by(2) {
        a[(k, k + 1)] = 1.0;
    }
    a[(1, 2)] = g;
    a[(5, 6)] = -g;
    a
}

/// Input matrix for quadrant-averaged thrusts.
pub fn build_b(model: &PayloadModel, layout: &AttachmentLayout, sigma: &FailureVector) -> DMatrix<f64> {
    let arms = layout.quadrant_arms(model.com_offset);
    let mut b = DMatrix::zeros(STATE_DIM, INPUT_DIM);
    for q in 0..4 {
        let s = sigma.0[q] as f64;
        let moment = Vector3::new(s * arms[q][1], -s * arms[q][0], s * layout.quadrant_spin(q) * layout.c_q);
        let ang = model.inertia_inv * moment;
        b[(3, q)] = ang[1];
        b[(7, q)] = ang[0];
        b[(9, q)] = s / model.mass;
        b[(11, q)] = ang[2];
    }
    b
}

/// Default output weights pairing each channel with its error chain.
pub fn default_c0() -> DMatrix<f64> {
    let mut c = DMatrix::zeros(INPUT_DIM, STATE_DIM);
    for (k, w) in [1.0, 1.5, 2.0, 0.5].iter().enumerate() {
        c[(0, k)] = *w;
    }
    for (k, w) in [-1.0, -1.5, 2.0, 0.5].iter().enumerate() {
        c[(1, 4 + k)] = *w;
    }
    c[(2, 8)] = 1.0;
    c[(2, 9)] = 1.5;
    c[(3, 10)] = 1.0;
    c[(3, 11)] = 0.5;
    c
}

pub fn default_d0() -> DMatrix<f64> {
    DMatrix::identity(INPUT_DIM, INPUT_DIM) * 2.0
}

pub fn build_error_system(model: &PayloadModel, layout: &AttachmentLayout, sigma: &FailureVector) -> Result<ErrorStateSystem> {
    layout.validate()?;
    Ok(ErrorStateSystem { a: build_a(model.gravity), b: build_b(model, layout, sigma), c0: default_c0(), d0: default_d0() })
}

/// The four input-driven rows of B.
pub fn accel_block(b: &DMatrix<f64>) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| b[(ACCEL_ROWS[r], c)])
}

/// Quadrant input that holds the payload at hover: B_acc·U_r = (0, 0, g, 0).
pub fn stationary_input(model: &PayloadModel, layout: &AttachmentLayout, sigma: &FailureVector) -> Result<Vector4<f64>> {
    let bacc = accel_block(&build_b(model, layout, sigma));
    bacc.lu()
        .solve(&Vector4::new(0.0, 0.0, model.gravity, 0.0))
        .ok_or_else(|| Error::InvalidModel(format!("no stationary input for {sigma:?}")))
}

/// Body torque (roll, pitch, yaw) produced by the active robots.
pub fn body_torque(thrusts: &[f64], model: &PayloadModel, layout: &AttachmentLayout, active: &[bool]) -> Vector3<f64> {
    let mut tau = Vector3::zeros();
    for (i, &u) in thrusts.iter().enumerate() {
        if !active[i] {
            continue;
        }
        let p = layout.positions[i];
        let (r1, r2) = (p[0] - model.com_offset.0, p[1] - model.com_offset.1);
        tau += Vector3::new(r2 * u, -r1 * u, layout.spins[i] * layout.c_q * u);
    }
    tau
}

/// Time derivative of the near-hover model. Failed robots contribute no
/// thrust whatever their command.
pub fn nonlinear_derivative(
    state: &FullState,
    thrusts: &[f64],
    model: &PayloadModel,
    layout: &AttachmentLayout,
    active: &[bool],
) -> Result<FullState> {
    let n = layout.n_robots();
    if thrusts.len() != n || active.len() != n {
        return Err(Error::Contract(format!("expected {n} thrusts and mask entries")));
    }
    if state.iter().chain(thrusts.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dynamics input".into()));
    }
    let g = model.gravity;
    let (roll, pitch, yaw) = (state[fs::ROLL], state[fs::PITCH], state[fs::YAW]);
    let ab = [g * pitch, -g * roll];
    let (c, s) = (yaw.cos(), yaw.sin());
    let total: f64 = thrusts.iter().zip(active).filter(|(_, &a)| a).map(|(u, _)| u).sum();
    let w = model.inertia_inv * body_torque(thrusts, model, layout, active);
    let mut d = FullState::zeros();
    d[fs::X] = state[fs::VX];
    d[fs::Y] = state[fs::VY];
    d[fs::Z] = state[fs::VZ];
    d[fs::ROLL] = state[fs::P];
    d[fs::PITCH] = state[fs::Q];
    d[fs::YAW] = state[fs::R];
    d[fs::VX] = c * ab[0] - s * ab[1];
    d[fs::VY] = s * ab[0] + c * ab[1];
    d[fs::VZ] = total / model.mass - g;
    d[fs::P] = w[0];
    d[fs::Q] = w[1];
    d[fs::R] = w[2];
    Ok(d)
}

/// Rotates world references into the yawed body frame. Z and ψ pass through.
pub fn world_to_body_refs(refs: [f64; 4], yaw: f64) -> [f64; 4] {
    let (c, s) = (yaw.cos(), yaw.sin());
    [c * refs[0] + s * refs[1], -s * refs[0] + c * refs[1], refs[2], refs[3]]
}

/// Error state in the ξ ordering for world-frame references.
pub fn error_state(state: &FullState, refs_world: [f64; 4]) -> ErrorState {
    let yaw = state[fs::YAW];
    let r = world_to_body_refs(refs_world, yaw);
    let pos = world_to_body_refs([state[fs::X], state[fs::Y], 0.0, 0.0], yaw);
    let vel = world_to_body_refs([state[fs::VX], state[fs::VY], 0.0, 0.0], yaw);
    ErrorState::from_column_slice(&[
        pos[0] - r[0],
        vel[0],
        state[fs::PITCH],
        state[fs::Q],
        pos[1] - r[1],
        vel[1],
        state[fs::ROLL],
        state[fs::P],
        state[fs::Z] - r[2],
        state[fs::VZ],
        yaw - r[3],
        state[fs::R],
    ])
}

/// Maps a ξ index to the corresponding [`FullState`] index.
pub const XI_TO_FULL: [usize; 12] = [
    fs::X,
    fs::VX,
    fs::PITCH,
    fs::Q,
    fs::Y,
    fs::VY,
    fs::ROLL,
    fs::P,
    fs::Z,
    fs::VZ,
    fs::YAW,
    fs::R,
];

fn check_len(len: usize) -> Result<usize> {
    if len == 0 || len % 4 != 0 {
        return Err(Error::Contract(format!("length {len} is not a positive multiple of 4")));
    }
    Ok(len / 4)
}

pub fn quadrant_average(thrusts: &[f64]) -> Result<[f64; 4]> {
    let per = check_len(thrusts.len())?;
    let mut out = [0.0; 4];
    for (q, o) in out.iter_mut().enumerate() {
        *o = thrusts[q * per..(q + 1) * per].iter().sum::<f64>() / per as f64;
    }
    Ok(out)
}

/// Mean over the active robots of each quadrant; zero for a quadrant with none.
pub fn quadrant_average_active(thrusts: &[f64], active: &[bool]) -> Result<[f64; 4]> {
    let per = check_len(thrusts.len())?;
    if active.len() != thrusts.len() {
        return Err(Error::Contract("mask length mismatch".into()));
    }
    let mut out = [0.0; 4];
    for (q, o) in out.iter_mut().enumerate() {
        let range = q * per..(q + 1) * per;
        let n = active[range.clone()].iter().filter(|&&a| a).count();
        if n > 0 {
            *o = thrusts[range.clone()].iter().zip(&active[range]).filter(|(_, &a)| a).map(|(u, _)| u).sum::<f64>() / n as f64;
        }
    }
    Ok(out)
}

pub fn quadrant_expand(u: &[f64], n_robots: usize) -> Result<Vec<f64>> {
    let per = check_len(n_robots)?;
    if u.len() != 4 {
        return Err(Error::Contract(format!("expected 4 quadrant values, got {}", u.len())));
    }
    Ok((0..n_robots).map(|i| u[i / per]).collect())
}
