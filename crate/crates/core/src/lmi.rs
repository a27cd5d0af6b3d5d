//! Feasibility engine for affine symmetric-matrix inequalities in the
//! variables (Q, R, S).
//!
//! Each constraint is `C + Σ L·X·Rt (+ transpose)` with sense `⪯ −εI` or
//! `⪰ εI`. The solver vectorises the variables and searches for a point in
//! the intersection of the affine image and the product of shifted PSD cones
//! by Douglas–Rachford splitting (default) or plain alternating projections.

use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigen, symmetry_residual};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Q,
    R,
    S,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    /// `M ⪯ −εI`
    NegDef,
    /// `M ⪰ εI`
    PosDef,
}

/// One contribution `left · X · right`, plus its transpose when `symmetric`.
#[derive(Clone, Debug)]
pub struct Term {
    pub block: Block,
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
    pub symmetric: bool,
}

#[derive(Clone, Debug)]
pub struct AffineMatrixConstraint {
    pub constant: DMatrix<f64>,
    pub terms: Vec<Term>,
    pub sense: Sense,
}

/// Q is `n × n` symmetric, R is `m × n`, S is `m × m`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarBlocks {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

impl VarBlocks {
    pub fn zeros(n: usize, m: usize) -> Self {
        VarBlocks { q: DMatrix::zeros(n, n), r: DMatrix::zeros(m, n), s: DMatrix::zeros(m, m) }
    }

    pub fn block(&self, b: Block) -> &DMatrix<f64> {
        match b {
            Block::Q => &self.q,
            Block::R => &self.r,
            Block::S => &self.s,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        VarBlocks { q: &self.q * c, r: &self.r * c, s: &self.s * c }
    }
}

impl AffineMatrixConstraint {
    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    /// Assembles the constraint matrix at a variable assignment.
    pub fn evaluate(&self, vars: &VarBlocks) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for t in &self.terms {
            let x = &t.left * vars.block(t.block) * &t.right;
            if t.symmetric {
                m += &x + x.transpose();
            } else {
                m += x;
            }
        }
        m
    }

    /// Signed distance to the required side, using the independent Jacobi
    /// eigensolver: positive means the margin ε is cleared by that amount.
    pub fn margin(&self, vars: &VarBlocks, eps: f64) -> f64 {
        let w = jacobi_eigen(&self.evaluate(vars)).0;
        match self.sense {
            Sense::NegDef => -eps - w[w.len() - 1],
            Sense::PosDef => w[0] - eps,
        }
    }
}

/// Frobenius-nearest symmetric matrix with spectrum ≥ `floor`.
pub fn project_psd(m: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Contract("project_psd needs a square matrix".into()));
    }
    let scale = m.amax().max(1.0);
    if symmetry_residual(m) > 1e-10 * scale {
        return Err(Error::Contract("project_psd input is not symmetric".into()));
    }
    Ok(clamp_spectrum(m, floor, true))
}

fn clamp_spectrum(m: &DMatrix<f64>, bound: f64, lower: bool) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let w = eig.eigenvalues.map(|l| if lower { l.max(bound) } else { l.min(bound) });
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&w) * v.transpose()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    DouglasRachford,
    Pocs,
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub method: Method,
    /// Over-relaxation factor in (0, 2).
    pub relaxation: f64,
    /// Cones are shifted by `slack · ε` so iterates land strictly inside.
    pub slack: f64,
    /// Iterations between feasibility checks.
    pub check_every: usize,
    pub initial: Option<VarBlocks>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            epsilon: 1e-3,
            max_iter: 50_000,
            tol: 1e-8,
            method: Method::DouglasRachford,
            relaxation: 1.0,
            slack: 2.0,
            check_every: 5,
            initial: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub vars: VarBlocks,
    pub iterations: usize,
    /// Smallest per-constraint margin beyond ε (non-negative up to ε·tol).
    pub worst_margin: f64,
}

/// Basis of the vectorised variables.
struct VarSpace {
    n: usize,
    m: usize,
}

impl VarSpace {
    fn len(&self) -> usize {
        self.n * (self.n + 1) / 2 + self.m * self.n + self.m * self.m
    }

    fn unit(&self, k: usize) -> VarBlocks {
        let mut v = VarBlocks::zeros(self.n, self.m);
        let nq = self.n * (self.n + 1) / 2;
        if k < nq {
            let (i, j) = self.sym_index(k);
            v.q[(i, j)] = 1.0;
            v.q[(j, i)] = 1.0;
        } else if k < nq + self.m * self.n {
            let k = k - nq;
            v.r[(k / self.n, k % self.n)] = 1.0;
        } else {
            let k = k - nq - self.m * self.n;
            v.s[(k / self.m, k % self.m)] = 1.0;
        }
        v
    }

    fn sym_index(&self, mut k: usize) -> (usize, usize) {
        for i in 0..self.n {
            let row = self.n - i;
            if k < row {
                return (i, i + k);
            }
            k -= row;
        }
        unreachable!()
    }

    fn unpack(&self, x: &DVector<f64>) -> VarBlocks {
        let mut v = VarBlocks::zeros(self.n, self.m);
        for k in 0..self.len() {
            if x[k] != 0.0 {
                let u = self.unit(k);
                v.q += u.q * x[k];
                v.r += u.r * x[k];
                v.s += u.s * x[k];
            }
        }
        v
    }

    fn pack(&self, v: &VarBlocks) -> DVector<f64> {
        let mut x = DVector::zeros(self.len());
        let mut k = 0;
        for i in 0..self.n {
            for j in i..self.n {
                x[k] = if i == j { v.q[(i, i)] } else { 0.5 * (v.q[(i, j)] + v.q[(j, i)]) };
                k += 1;
            }
        }
        for i in 0..self.m {
            for j in 0..self.n {
                x[k] = v.r[(i, j)];
                k += 1;
            }
        }
        for i in 0..self.m {
            for j in 0..self.m {
                x[k] = v.s[(i, j)];
                k += 1;
            }
        }
        x
    }
}

/// Finds (Q, R, S) satisfying every constraint with margin ε·(1 − tol), or
/// reports the worst constraint when `max_iter` runs out.
pub fn solve_feasibility(
    constraints: &[AffineMatrixConstraint],
    n: usize,
    m: usize,
    opts: &SolverOptions,
) -> Result<Solution> {
    if !(opts.epsilon > 0.0) {
        return Err(Error::Contract("epsilon must be positive".into()));
    }
    if constraints.is_empty() {
        return Err(Error::Contract("no constraints".into()));
    }
    if !(opts.relaxation > 0.0 && opts.relaxation < 2.0) {
        return Err(Error::Contract("relaxation must lie in (0, 2)".into()));
    }
    let space = VarSpace { n, m };
    let nv = space.len();
    let zero = VarBlocks::zeros(n, m);

    // Stack every constraint's linear map into one operator.
    let dims: Vec<usize> = constraints.iter().map(|c| c.dim()).collect();
    let offsets: Vec<usize> = dims.iter().scan(0, |acc, d| {
        let o = *acc;
        *acc += d * d;
        Some(o)
    }).collect();
    let rows: usize = dims.iter().map(|d| d * d).sum();
    let mut lmat = DMatrix::<f64>::zeros(rows, nv);
    let mut cvec = DVector::<f64>::zeros(rows);
    for (ci, c) in constraints.iter().enumerate() {
        let base = c.evaluate(&zero);
        for (k, x) in base.iter().enumerate() {
            cvec[offsets[ci] + k] = *x;
        }
        for j in 0..nv {
            let col = c.evaluate(&space.unit(j)) - &base;
            for (k, x) in col.iter().enumerate() {
                lmat[(offsets[ci] + k, j)] = *x;
            }
        }
    }
    // Variables that no constraint touches make LᵀL singular; the
    // minimum-norm least-squares step leaves them at zero.
    let normal = lmat.tr_mul(&lmat);
    let solve_normal: Box<dyn Fn(DVector<f64>) -> DVector<f64>> = match normal.clone().cholesky() {
        Some(chol) => Box::new(move |r| chol.solve(&r)),
        None => {
            let tol = 1e-12 * normal.amax().max(1.0);
            let pinv = normal
                .pseudo_inverse(tol)
                .map_err(|e| Error::Contract(format!("normal equations: {e}")))?;
            Box::new(move |r| &pinv * r)
        }
    };

    let init = opts.initial.clone().unwrap_or_else(|| {
        let mut v = VarBlocks::zeros(n, m);
        v.q = DMatrix::identity(n, n);
        v.s = DMatrix::identity(m, m);
        v
    });
    let mut x = space.pack(&init);
    let mut z = &lmat * &x + &cvec;

    let eps = opts.epsilon;
    let shift = opts.slack * eps;
    let accept = eps * opts.tol;
    let block = |vec: &DVector<f64>, ci: usize| -> DMatrix<f64> {
        let d = dims[ci];
        DMatrix::from_column_slice(d, d, &vec.as_slice()[offsets[ci]..offsets[ci] + d * d])
    };
    let residual = |p: &DVector<f64>| -> (usize, f64) {
        let mut worst = (0, f64::NEG_INFINITY);
        for (ci, c) in constraints.iter().enumerate() {
            let w = SymmetricEigen::new(block(p, ci)).eigenvalues;
            let r = match c.sense {
                Sense::NegDef => w.max() + eps,
                Sense::PosDef => eps - w.min(),
            };
            if r > worst.1 {
                worst = (ci, r);
            }
        }
        worst
    };
    let project = |y: &DVector<f64>| -> DVector<f64> {
        let mut out = y.clone();
        for (ci, c) in constraints.iter().enumerate() {
            let mb = block(y, ci);
            let pb = match c.sense {
                Sense::NegDef => clamp_spectrum(&mb, -shift, false),
                Sense::PosDef => clamp_spectrum(&mb, shift, true),
            };
            out.as_mut_slice()[offsets[ci]..offsets[ci] + dims[ci] * dims[ci]].copy_from_slice(pb.as_slice());
        }
        out
    };

    let check_every = opts.check_every.max(1);
    let mut last = (0, f64::INFINITY);
    for it in 0..=opts.max_iter {
        // Least-squares point of the affine image closest to z.
        x = solve_normal(lmat.tr_mul(&(&z - &cvec)));
        let p = &lmat * &x + &cvec;
        if it % check_every == 0 || it == opts.max_iter {
            last = residual(&p);
            if last.1 <= accept {
                let vars = space.unpack(&x);
                return Ok(Solution { vars, iterations: it, worst_margin: -last.1 });
            }
        }
        if it == opts.max_iter {
            break;
        }
        match opts.method {
            Method::DouglasRachford => {
                let refl = &p * 2.0 - &z;
                let proj = project(&refl);
                z += (proj - &p) * opts.relaxation;
            }
            Method::Pocs => {
                let proj = project(&p);
                z = &p + (proj - &p) * opts.relaxation;
            }
        }
    }
    Err(Error::Infeasible { worst: last.0, residual: last.1, iterations: opts.max_iter })
}
