//! Robust SPR synthesis over the vertices of the (mass, COM, failure)
//! fluctuation set.
//!
//! The vertex LMIs are solved in a diagonally rescaled coordinate system
//! (see [`chain_scaling`]) because the raw integrator chains mix entries
//! from 1 to several hundred and the projection iterations stall on them.
//! A decay shift `α` replaces A by A + αI so that the certificate also bounds
//! the closed-loop decay rate.

use crate::dynamics::{
    build_b, stationary_input, AttachmentLayout, FailureVector, PayloadDesign,
};
use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigen, read_matrix, spectral_abscissa, symmetry_residual, write_matrix};
use crate::lmi::{solve_feasibility, AffineMatrixConstraint, Block, Method, Sense, SolverOptions, Term, VarBlocks};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct FluctuationSpec {
    pub mass: [f64; 2],
    pub com_x: [f64; 2],
    pub com_y: [f64; 2],
    pub failures: Vec<FailureVector>,
}

impl FluctuationSpec {
    pub fn validate(&self, design: &PayloadDesign, per_quadrant: usize) -> Result<()> {
        let ordered = |r: &[f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !(self.mass[0] > 0.0) || !ordered(&self.mass) {
            return Err(Error::Contract(format!("mass interval {:?} must satisfy 0 < min <= max", self.mass)));
        }
        if !ordered(&self.com_x) || !ordered(&self.com_y) {
            return Err(Error::Contract("COM extents must be ordered".into()));
        }
        for &x in &self.com_x {
            for &y in &self.com_y {
                if !design.shape.contains(x, y) {
                    return Err(Error::Contract(format!("COM corner ({x}, {y}) outside the footprint")));
                }
            }
        }
        if !self.failures.contains(&FailureVector::nominal(per_quadrant)) {
            return Err(Error::Contract("failure set must contain the nominal vector".into()));
        }
        Ok(())
    }

    /// Corner COM offsets in a fixed order.
    pub fn com_corners(&self) -> [(f64, f64); 4] {
        [
            (self.com_x[0], self.com_y[0]),
            (self.com_x[1], self.com_y[0]),
            (self.com_x[1], self.com_y[1]),
            (self.com_x[0], self.com_y[1]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub mass: f64,
    pub com: (f64, f64),
    pub sigma: FailureVector,
    pub b: DMatrix<f64>,
}

/// Builds the deduplicated vertex set {m_min, m_max} × COM corners × failures.
pub fn enumerate_vertices(design: &PayloadDesign, layout: &AttachmentLayout, spec: &FluctuationSpec) -> Result<Vec<Vertex>> {
    spec.validate(design, layout.per_quadrant())?;
    let mut out: Vec<Vertex> = Vec::new();
    for &mass in &spec.mass {
        for com in spec.com_corners() {
            let model = design.model(mass, com, layout)?;
            for sigma in &spec.failures {
                let b = build_b(&model, layout, sigma);
                if !out.iter().any(|v| v.b == b) {
                    out.push(Vertex { mass, com, sigma: *sigma, b });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Contract("empty vertex set".into()));
    }
    Ok(out)
}

/// Checks that every vertex can hover inside the actuator range, which the
/// switching law needs for a stationary input in [U_n, U_p].
pub fn check_stationary_inputs(
    design: &PayloadDesign,
    layout: &AttachmentLayout,
    vertices: &[Vertex],
    lower: f64,
    upper: f64,
) -> Result<()> {
    for (k, v) in vertices.iter().enumerate() {
        let model = design.model(v.mass, v.com, layout)?;
        let ur = stationary_input(&model, layout, &v.sigma)?;
        if ur.iter().any(|&u| u < lower || u > upper) {
            return Err(Error::SynthesisInfeasible {
                vertex: k,
                reason: format!(
                    "hover needs quadrant thrusts {:?} outside [{lower}, {upper}] N (m = {}, COM = {:?}, sigma = {:?})",
                    ur.as_slice(),
                    v.mass,
                    v.com,
                    v.sigma.0
                ),
            });
        }
    }
    Ok(())
}

fn stack_selectors(n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = n + m;
    let mut e1 = DMatrix::zeros(d, n);
    let mut e2 = DMatrix::zeros(d, m);
    for i in 0..n {
        e1[(i, i)] = 1.0;
    }
    for i in 0..m {
        e2[(n + i, i)] = 1.0;
    }
    (e1, e2)
}

/// The block constraint
/// `[[AQ + QAᵀ − BR − RᵀBᵀ, QC0ᵀ − BSᵀ], [C0Q − SBᵀ, −D0Sᵀ − SD0ᵀ]] ⪯ −εI`.
pub fn build_spr_lmi(a: &DMatrix<f64>, b: &DMatrix<f64>, c0: &DMatrix<f64>, d0: &DMatrix<f64>) -> AffineMatrixConstraint {
    build_spr_lmi_shifted(a, b, c0, d0, 0.0)
}

/// [`build_spr_lmi`] with A replaced by A + αI.
pub fn build_spr_lmi_shifted(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    d0: &DMatrix<f64>,
    alpha: f64,
) -> AffineMatrixConstraint {
    let n = a.nrows();
    let m = b.ncols();
    let (e1, e2) = stack_selectors(n, m);
    let a_shift = a + DMatrix::identity(n, n) * alpha;
    let term = |block, left, right| Term { block, left, right, symmetric: true };
    AffineMatrixConstraint {
        constant: DMatrix::zeros(n + m, n + m),
        terms: vec![
            term(Block::Q, &e1 * a_shift, e1.transpose()),
            term(Block::R, -(&e1 * b), e1.transpose()),
            term(Block::Q, e1.clone(), c0.transpose() * e2.transpose()),
            term(Block::S, -e2.clone(), b.transpose() * e1.transpose()),
            term(Block::S, -e2.clone(), d0.transpose() * e2.transpose()),
        ],
        sense: Sense::NegDef,
    }
}

/// `Q ⪰ floor·I`, written with margin ε.
fn q_floor_constraint(n: usize, floor: f64, eps: f64) -> AffineMatrixConstraint {
    AffineMatrixConstraint {
        constant: DMatrix::identity(n, n) * (eps - floor),
        terms: vec![Term { block: Block::Q, left: DMatrix::identity(n, n), right: DMatrix::identity(n, n), symmetric: false }],
        sense: Sense::PosDef,
    }
}

/// `S·D0ᵀ + D0·Sᵀ ⪰ εI`.
fn s_constraint(d0: &DMatrix<f64>) -> AffineMatrixConstraint {
    let m = d0.nrows();
    AffineMatrixConstraint {
        constant: DMatrix::zeros(m, m),
        terms: vec![Term { block: Block::S, left: DMatrix::identity(m, m), right: d0.transpose(), symmetric: true }],
        sense: Sense::PosDef,
    }
}

/// Diagonal state scaling that equalises the links of each integrator chain.
///
/// A chain is a maximal run of super-diagonal couplings `A[k, k+1] ≠ 0`. Its
/// links are those couplings plus the largest input gain into its last state.
/// After the congruence every link of a chain equals the chain's geometric
/// mean.
pub fn chain_scaling(a: &DMatrix<f64>, b_nom: &DMatrix<f64>) -> DVector<f64> {
    let n = a.nrows();
    let mut t = DVector::from_element(n, 1.0);
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && a[(end, end + 1)] != 0.0 {
            end += 1;
        }
        let mut links: Vec<f64> = (start..end).map(|k| a[(k, k + 1)].abs()).collect();
        let input = b_nom.row(end).amax();
        if input > 0.0 {
            links.push(input);
        }
        if !links.is_empty() {
            let gm = (links.iter().map(|l| l.ln()).sum::<f64>() / links.len() as f64).exp();
            for k in (start + 1)..=end {
                t[k] = t[k - 1] * links[k - 1 - start] / gm;
            }
        }
        start = end + 1;
    }
    t
}

#[derive(Clone, Debug)]
pub struct SynthesisOptions {
    pub epsilon: f64,
    pub decay_rate: f64,
    /// Lower bound on Q in the scaled coordinates; fixes the homogeneous scale.
    pub q_floor: f64,
    pub precondition: bool,
    pub max_iter: usize,
    pub tol: f64,
    pub method: Method,
    pub relaxation: f64,
    pub slack: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            epsilon: 1e-3,
            decay_rate: 0.4,
            q_floor: 1.0,
            precondition: true,
            max_iter: 50_000,
            tol: 1e-8,
            method: Method::DouglasRachford,
            relaxation: 1.0,
            slack: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisResult {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    pub d0: DMatrix<f64>,
    /// Largest eigenvalue of the (decay-shifted) vertex LMIs.
    pub margin: f64,
    /// Largest value of [`verify_spr`] over the vertices.
    pub spr_margin: f64,
    pub vertex_count: usize,
    pub epsilon: f64,
    pub decay_rate: f64,
    pub iterations: usize,
    /// Raw LMI variables, kept in memory for consistency checks.
    pub vars: VarBlocks,
}

/// Eigenvalue margin of every constraint in the original coordinates. Returns
/// the smallest clearance over the vertex LMIs, `Q ⪰ 0` and the S constraint,
/// ignoring ε.
fn homogeneous_clearance(cons: &[AffineMatrixConstraint], vars: &VarBlocks) -> f64 {
    cons.iter().map(|c| c.margin(vars, 0.0)).fold(f64::INFINITY, f64::min)
}

/// Solves the vertex LMIs and extracts F = R·Q⁻¹, G = S⁻¹, P = Q⁻¹.
pub fn synthesize(
    a: &DMatrix<f64>,
    vertices: &[DMatrix<f64>],
    c0: &DMatrix<f64>,
    d0: &DMatrix<f64>,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult> {
    if vertices.is_empty() {
        return Err(Error::Contract("no vertices".into()));
    }
    let n = a.nrows();
    let m = vertices[0].ncols();
    let eps = opts.epsilon;
    let mut b_nom = DMatrix::zeros(n, m);
    for b in vertices {
        b_nom += b;
    }
    b_nom /= vertices.len() as f64;
    let t = if opts.precondition { chain_scaling(a, &b_nom) } else { DVector::from_element(n, 1.0) };
    let t_mat = DMatrix::from_diagonal(&t);
    let t_inv = DMatrix::from_diagonal(&t.map(|x| 1.0 / x));

    let a_s = &t_mat * a * &t_inv;
    let c0_s = c0 * &t_inv;
    let mut scaled: Vec<AffineMatrixConstraint> = vertices
        .iter()
        .map(|b| build_spr_lmi_shifted(&a_s, &(&t_mat * b), &c0_s, d0, opts.decay_rate))
        .collect();
    scaled.push(q_floor_constraint(n, opts.q_floor, eps));
    scaled.push(s_constraint(d0));

    let solver = SolverOptions {
        epsilon: eps,
        max_iter: opts.max_iter,
        tol: opts.tol,
        method: opts.method,
        relaxation: opts.relaxation,
        slack: opts.slack,
        ..Default::default()
    };
    let sol = solve_feasibility(&scaled, n, m, &solver).map_err(|e| match e {
        Error::Infeasible { worst, residual, iterations } if worst < vertices.len() => Error::SynthesisInfeasible {
            vertex: worst,
            reason: format!("LMI residual {residual:.3e} after {iterations} iterations; shrink the fluctuation set or adjust C0/D0"),
        },
        Error::Infeasible { worst, residual, iterations } => Error::SynthesisInfeasible {
            vertex: worst,
            reason: format!("auxiliary constraint residual {residual:.3e} after {iterations} iterations"),
        },
        other => other,
    })?;

    let raw = VarBlocks {
        q: &t_inv * &sol.vars.q * &t_inv,
        r: &sol.vars.r * &t_inv,
        s: sol.vars.s.clone(),
    };

    // (Q, R, S) → c·(Q, R, S) scales the LMI clearance by c and the KYP
    // clearance by 1/c. Take the smallest c that restores the ε margin in the
    // original coordinates; the small factor absorbs round-off.
    let mut original: Vec<AffineMatrixConstraint> = vertices
        .iter()
        .map(|b| build_spr_lmi_shifted(a, b, c0, d0, opts.decay_rate))
        .collect();
    original.push(q_floor_constraint(n, 0.0, 0.0));
    original.push(s_constraint(d0));
    let clearance = homogeneous_clearance(&original, &raw);
    if !(clearance > 0.0) {
        return Err(Error::SynthesisInfeasible {
            vertex: 0,
            reason: format!("solution lost definiteness when mapped back (clearance {clearance:.3e})"),
        });
    }
    let c = eps / clearance * (1.0 + 1e-6);
    let vars = raw.scaled(c);
    let (f, g, p) = certificate(&vars)?;
    let margin = vertices
        .iter()
        .map(|b| *jacobi_eigen(&build_spr_lmi_shifted(a, b, c0, d0, opts.decay_rate).evaluate(&vars)).0.last().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let spr_margin = vertices
        .iter()
        .map(|b| verify_spr(a, b, &f, &g, c0, d0, &p))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SynthesisResult {
        f,
        g,
        p,
        c0: c0.clone(),
        d0: d0.clone(),
        margin,
        spr_margin,
        vertex_count: vertices.len(),
        epsilon: eps,
        decay_rate: opts.decay_rate,
        iterations: sol.iterations,
        vars,
    })
}

fn certificate(v: &VarBlocks) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let q_inv = v.q.clone().try_inverse().ok_or_else(|| Error::Certificate("Q is singular".into()))?;
    let g = v.s.clone().try_inverse().ok_or_else(|| Error::Certificate("S is singular".into()))?;
    let p = (&q_inv + q_inv.transpose()) * 0.5;
    Ok((&v.r * &q_inv, g, p))
}

/// Largest eigenvalue of
/// `P(A−BF) + (A−BF)ᵀP + (PB − (GC0)ᵀ)(GD0 + (GD0)ᵀ)⁻¹(PB − (GC0)ᵀ)ᵀ`.
/// Negative means (A − BF, B, GC0, GD0) is strictly positive real.
pub fn verify_spr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    d0: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    if symmetry_residual(p) > 1e-9 * p.amax().max(1.0) {
        return Err(Error::Contract("P is not symmetric".into()));
    }
    let gd = g * d0;
    let w = &gd + gd.transpose();
    let wev = SymmetricEigen::new(w.clone()).eigenvalues;
    let wmax = wev.amax();
    if wev.iter().map(|l| l.abs()).fold(f64::INFINITY, f64::min) <= 1e-13 * wmax.max(1e-300) {
        return Err(Error::Certificate("G·D0 + (G·D0)ᵀ is singular".into()));
    }
    let w_inv = w.try_inverse().ok_or_else(|| Error::Certificate("G·D0 + (G·D0)ᵀ is singular".into()))?;
    let acl = a - b * f;
    let h = p * b - (g * c0).transpose();
    let m = p * &acl + acl.transpose() * p + &h * w_inv * h.transpose();
    let m = (&m + m.transpose()) * 0.5;
    Ok(SymmetricEigen::new(m).eigenvalues.max())
}

/// Spectral abscissa of A − B·F.
pub fn closed_loop_abscissa(a: &DMatrix<f64>, b: &DMatrix<f64>, f: &DMatrix<f64>) -> f64 {
    spectral_abscissa(&(a - b * f))
}

/// Worst sample found by [`verify_interior`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    pub mass: f64,
    pub com: (f64, f64),
    pub sigma: FailureVector,
    pub spr_margin: f64,
    pub abscissa: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub checked: usize,
    pub worst_margin: SampleReport,
    pub worst_abscissa: SampleReport,
    /// First sample with a non-negative margin or abscissa.
    pub first_violation: Option<SampleReport>,
}

/// Samples (m, COM) uniformly inside the fluctuation region and checks the
/// certificate against every failure vector.
pub fn verify_interior(
    design: &PayloadDesign,
    layout: &AttachmentLayout,
    spec: &FluctuationSpec,
    result: &SynthesisResult,
    samples: usize,
    seed: u64,
) -> Result<VerifyReport> {
    use rand::{Rng, SeedableRng};
    if samples == 0 {
        return Err(Error::Contract("at least one sample is required".into()));
    }
    spec.validate(design, layout.per_quadrant())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..r[1]) } else { r[0] };
    let a = crate::dynamics::build_a(design.gravity);
    let mut reports = Vec::new();
    for _ in 0..samples {
        let mass = draw(spec.mass);
        let com = (draw(spec.com_x), draw(spec.com_y));
        let model = design.model(mass, com, layout)?;
        for sigma in &spec.failures {
            let b = build_b(&model, layout, sigma);
            let spr_margin = verify_spr(&a, &b, &result.f, &result.g, &result.c0, &result.d0, &result.p)?;
            let abscissa = closed_loop_abscissa(&a, &b, &result.f);
            reports.push(SampleReport { mass, com, sigma: *sigma, spr_margin, abscissa });
        }
    }
    let worst_margin = reports.iter().max_by(|x, y| x.spr_margin.total_cmp(&y.spr_margin)).cloned().expect("non-empty");
    let worst_abscissa = reports.iter().max_by(|x, y| x.abscissa.total_cmp(&y.abscissa)).cloned().expect("non-empty");
    let first_violation = reports.iter().find(|r| !(r.spr_margin < 0.0) || !(r.abscissa < 0.0)).cloned();
    Ok(VerifyReport { checked: reports.len(), worst_margin, worst_abscissa, first_violation })
}

impl SynthesisResult {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# ASSC synthesis result\n");
        s += &format!("vertices {}\n", self.vertex_count);
        s += &format!("epsilon {:.16e}\n", self.epsilon);
        s += &format!("margin {:.16e}\n", self.margin);
        s += &format!("spr_margin {:.16e}\n", self.spr_margin);
        s += &format!("decay_rate {:.16e}\n", self.decay_rate);
        s += &format!("iterations {}\n", self.iterations);
        write_matrix(&mut s, "F", &self.f);
        write_matrix(&mut s, "G", &self.g);
        write_matrix(&mut s, "P", &self.p);
        write_matrix(&mut s, "C0", &self.c0);
        write_matrix(&mut s, "D0", &self.d0);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| Error::Parse(format!("missing {key}")))?;
            let mut it = line.split_whitespace();
            match (it.next(), it.next()) {
                (Some(k), Some(v)) if k == key => Ok(v.to_string()),
                _ => Err(Error::Parse(format!("expected '{key}', got '{line}'"))),
            }
        };
        let num = |s: String| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number {s}")));
        let count = |s: String| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad count {s}")));
        let vertex_count = count(header("vertices")?)?;
        let epsilon = num(header("epsilon")?)?;
        let margin = num(header("margin")?)?;
        let spr_margin = num(header("spr_margin")?)?;
        let decay_rate = num(header("decay_rate")?)?;
        let iterations = count(header("iterations")?)?;
        let f = read_matrix(&mut lines, "F")?;
        let g = read_matrix(&mut lines, "G")?;
        let p = read_matrix(&mut lines, "P")?;
        let c0 = read_matrix(&mut lines, "C0")?;
        let d0 = read_matrix(&mut lines, "D0")?;
        let (n, m) = (p.nrows(), g.nrows());
        if f.shape() != (m, n) || g.shape() != (m, m) || c0.shape() != (m, n) || d0.shape() != (m, m) || !p.is_square() {
            return Err(Error::Parse("inconsistent matrix dimensions".into()));
        }
        let vars = VarBlocks::zeros(n, m);
        Ok(SynthesisResult { f, g, p, c0, d0, margin, spr_margin, vertex_count, epsilon, decay_rate, iterations, vars })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
