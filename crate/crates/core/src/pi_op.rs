//! 4-PI operators on `R^m × L2^n[a, b]`.
//!
//! An operator is parameterized by a matrix `P`, boundary kernels `Q1`, `Q2`,
//! a multiplier `R0` and Volterra kernels `R1` (lower) and `R2` (upper):
//!
//! ```text
//! [x; f] ↦ [ P x + ∫_a^b Q1(θ) f(θ) dθ ;
//!            Q2(s) x + R0(s) f(s) + ∫_a^s R1(s,θ) f(θ) dθ + ∫_s^b R2(s,θ) f(θ) dθ ]
//! ```
//!
//! Composition and adjoint are closed in this class; both are derived here by
//! splitting the inner integration range at `s` and `θ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{chebyshev_monomials, chebyshev_values, legendre_values};
use crate::poly::{Interval, Limit, PolyError, PolyMatrix, ThetaRange, Vars, MAX_DEGREE};
use crate::quadrature::{GaussLegendre, DEFAULT_NODES};

#[derive(Debug, Error)]
pub enum PiError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("operator is not coercive (smallest Ritz value {0:.3e})")]
    NotCoercive(f64),
    #[error("inversion residual {residual:.3e} exceeds tolerance {tol:.3e} (tried up to degree {degree})")]
    InversionResidual { residual: f64, tol: f64, degree: u32 },
    #[error("malformed operator data: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, PiError>;

/// Dimensions of `R^m × L2^n`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub m: usize,
    pub n: usize,
}

impl Dims {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n }
    }
}

/// Element of `R^m × L2^n[a, b]` with a polynomial distributed part.
#[derive(Debug, Clone, PartialEq)]
pub struct Rl2Function {
    pub finite: DVector<f64>,
    /// `n × 1` polynomial in `s`.
    pub dist: PolyMatrix,
}

impl Rl2Function {
    pub fn new(finite: DVector<f64>, dist: PolyMatrix) -> Result<Self> {
        if dist.rows() == 0 {
            return Ok(Self { finite, dist: PolyMatrix::zeros(0, 1, Vars::S, dist.domain()) });
        }
        if dist.cols() != 1 {
            return Err(PiError::DimensionMismatch(format!(
                "distributed part must be a column, got {}x{}",
                dist.rows(),
                dist.cols()
            )));
        }
        Ok(Self { finite, dist: dist.with_vars(Vars::S)? })
    }

    pub fn zero(dims: Dims, domain: Interval) -> Self {
        Self { finite: DVector::zeros(dims.m), dist: PolyMatrix::zeros(dims.n, 1, Vars::S, domain) }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.finite.len(), self.dist.rows())
    }

    pub fn domain(&self) -> Interval {
        self.dist.domain()
    }

    /// Random probe with coefficients in `[-1, 1]` on the Chebyshev basis up
    /// to `degree` (so probes are well scaled at any degree).
    pub fn random<R: Rng>(rng: &mut R, dims: Dims, degree: usize, domain: Interval) -> Self {
        let finite = DVector::from_fn(dims.m, |_, _| rng.gen_range(-1.0..1.0));
        let mono = crate::basis::chebyshev_monomials(degree, domain);
        let mut terms = Vec::new();
        for c in 0..dims.n {
            for k in 0..=degree {
                let w: f64 = rng.gen_range(-1.0..1.0);
                for i in 0..=k {
                    let mut m = DMatrix::zeros(dims.n, 1);
                    m[(c, 0)] = w * mono[(k, i)];
                    terms.push(((i as u32, 0u32), m));
                }
            }
        }
        let dist = PolyMatrix::from_terms(dims.n, 1, Vars::S, domain, terms).expect("probe within cap");
        Self { finite, dist }
    }

    /// Value of the distributed part at `s`.
    pub fn eval(&self, s: f64) -> DVector<f64> {
        let m = self.dist.eval_unchecked(s, s);
        DVector::from_column_slice(m.as_slice())
    }

    /// `x1ᵀ y1 + ⟨x2, y2⟩_{L2}` by Gauss–Legendre quadrature.
    pub fn inner(&self, other: &Self) -> f64 {
        let gl = GaussLegendre::new(DEFAULT_NODES, self.domain().a(), self.domain().b());
        self.finite.dot(&other.finite) + gl.integrate(|s| self.eval(s).dot(&other.eval(s)))
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).max(0.0).sqrt()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Ok(Self { finite: &self.finite - &other.finite, dist: self.dist.sub(&other.dist)? })
    }
}

/// A function sampled pointwise: finite part plus a closure for the
/// distributed part. Used where exact polynomial arithmetic would lose
/// precision (high degree) or does not apply.
pub trait DistributedFn {
    fn value(&self, s: f64) -> DVector<f64>;
}

impl<F: Fn(f64) -> DVector<f64>> DistributedFn for F {
    fn value(&self, s: f64) -> DVector<f64> {
        self(s)
    }
}

#[derive(Clone, PartialEq)]
pub struct PiOperator {
    domain: Interval,
    p: DMatrix<f64>,
    q1: PolyMatrix,
    q2: PolyMatrix,
    r0: PolyMatrix,
    r1: PolyMatrix,
    r2: PolyMatrix,
}

impl std::fmt::Debug for PiOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PiOperator")
            .field("in", &self.in_dims())
            .field("out", &self.out_dims())
            .field("P", &self.p.as_slice())
            .field("Q1", &self.q1)
            .field("Q2", &self.q2)
            .field("R0", &self.r0)
            .field("R1", &self.r1)
            .field("R2", &self.r2)
            .finish()
    }
}

fn const_poly(m: &DMatrix<f64>, domain: Interval) -> PolyMatrix {
    PolyMatrix::constant(m.clone(), domain)
}

fn dvec(m: DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

impl PiOperator {
    /// Assembles an operator from its six blocks; dimensions are inferred from
    /// `P` (`m_out × m_in`) and `R0` (`n_out × n_in`) and checked against the rest.
    pub fn new(
        domain: Interval,
        p: DMatrix<f64>,
        q1: PolyMatrix,
        q2: PolyMatrix,
        r0: PolyMatrix,
        r1: PolyMatrix,
        r2: PolyMatrix,
    ) -> Result<Self> {
        let (m_out, m_in) = p.shape();
        let (n_out, n_in) = (r0.rows(), r0.cols());
        let checks =
            [("Q1", &q1, m_out, n_in), ("Q2", &q2, n_out, m_in), ("R1", &r1, n_out, n_in), ("R2", &r2, n_out, n_in)];
        for (name, blk, r, c) in checks {
            if blk.rows() != r || blk.cols() != c {
                return Err(PiError::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    blk.rows(),
                    blk.cols()
                )));
            }
        }
        for blk in [&q1, &q2, &r0, &r1, &r2] {
            domain.check_same(&blk.domain())?;
        }
        Ok(Self {
            domain,
            p,
            q1: q1.with_vars(Vars::S)?,
            q2: q2.with_vars(Vars::S)?,
            r0: r0.with_vars(Vars::S)?,
            r1: r1.promote(Vars::STheta),
            r2: r2.promote(Vars::STheta),
        })
    }

    pub fn zero(domain: Interval, input: Dims, output: Dims) -> Self {
        Self {
            domain,
            p: DMatrix::zeros(output.m, input.m),
            q1: PolyMatrix::zeros(output.m, input.n, Vars::S, domain),
            q2: PolyMatrix::zeros(output.n, input.m, Vars::S, domain),
            r0: PolyMatrix::zeros(output.n, input.n, Vars::S, domain),
            r1: PolyMatrix::zeros(output.n, input.n, Vars::STheta, domain),
            r2: PolyMatrix::zeros(output.n, input.n, Vars::STheta, domain),
        }
    }

    pub fn identity(domain: Interval, dims: Dims) -> Self {
        let mut op = Self::zero(domain, dims, dims);
        op.p = DMatrix::identity(dims.m, dims.m);
        op.r0 = PolyMatrix::identity(dims.n, domain).promote(Vars::S);
        op
    }

    /// Matrix acting on `R^{cols}` (no distributed part).
    pub fn matrix(domain: Interval, p: DMatrix<f64>) -> Self {
        let mut op = Self::zero(domain, Dims::new(p.ncols(), 0), Dims::new(p.nrows(), 0));
        op.p = p;
        op
    }

    /// Multiplication by `R0(s)` on `L2^n`.
    pub fn multiplier(r0: PolyMatrix) -> Result<Self> {
        let d = r0.domain();
        Self::zero(d, Dims::new(0, r0.cols()), Dims::new(0, r0.rows())).with_r0(r0)
    }

    fn replace(mut self, slot: usize, blk: PolyMatrix) -> Result<Self> {
        let target = match slot {
            1 => &self.q1,
            2 => &self.q2,
            3 => &self.r0,
            4 => &self.r1,
            _ => &self.r2,
        };
        if blk.rows() != target.rows() || blk.cols() != target.cols() {
            return Err(PiError::DimensionMismatch(format!(
                "block is {}x{}, slot expects {}x{}",
                blk.rows(),
                blk.cols(),
                target.rows(),
                target.cols()
            )));
        }
        self.domain.check_same(&blk.domain())?;
        match slot {
            1 => self.q1 = blk.with_vars(Vars::S)?,
            2 => self.q2 = blk.with_vars(Vars::S)?,
            3 => self.r0 = blk.with_vars(Vars::S)?,
            4 => self.r1 = blk.promote(Vars::STheta),
            _ => self.r2 = blk.promote(Vars::STheta),
        }
        Ok(self)
    }

    pub fn with_p(mut self, p: DMatrix<f64>) -> Result<Self> {
        if p.shape() != self.p.shape() {
            return Err(PiError::DimensionMismatch(format!("P is {:?}, slot expects {:?}", p.shape(), self.p.shape())));
        }
        self.p = p;
        Ok(self)
    }

    pub fn with_q1(self, q1: PolyMatrix) -> Result<Self> {
        self.replace(1, q1)
    }

    pub fn with_q2(self, q2: PolyMatrix) -> Result<Self> {
        self.replace(2, q2)
    }

    pub fn with_r0(self, r0: PolyMatrix) -> Result<Self> {
        self.replace(3, r0)
    }

    pub fn with_r1(self, r1: PolyMatrix) -> Result<Self> {
        self.replace(4, r1)
    }

    pub fn with_r2(self, r2: PolyMatrix) -> Result<Self> {
        self.replace(5, r2)
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn in_dims(&self) -> Dims {
        Dims::new(self.p.ncols(), self.r0.cols())
    }

    pub fn out_dims(&self) -> Dims {
        Dims::new(self.p.nrows(), self.r0.rows())
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q1(&self) -> &PolyMatrix {
        &self.q1
    }

    pub fn q2(&self) -> &PolyMatrix {
        &self.q2
    }

    pub fn r0(&self) -> &PolyMatrix {
        &self.r0
    }

    pub fn r1(&self) -> &PolyMatrix {
        &self.r1
    }

    pub fn r2(&self) -> &PolyMatrix {
        &self.r2
    }

    /// The six blocks with `P` as a constant polynomial, in slot order.
    pub fn blocks(&self) -> [PolyMatrix; 6] {
        [
            const_poly(&self.p, self.domain),
            self.q1.clone(),
            self.q2.clone(),
            self.r0.clone(),
            self.r1.clone(),
            self.r2.clone(),
        ]
    }

    pub fn is_zero(&self) -> bool {
        self.p.iter().all(|&x| x == 0.0)
            && [&self.q1, &self.q2, &self.r0, &self.r1, &self.r2].iter().all(|b| b.is_zero())
    }

    /// Largest kernel degree over all blocks.
    pub fn degree(&self) -> u32 {
        [&self.q1, &self.q2, &self.r0, &self.r1, &self.r2].iter().map(|b| b.degree()).max().unwrap_or(0)
    }

    pub fn max_abs(&self) -> f64 {
        [&self.q1, &self.q2, &self.r0, &self.r1, &self.r2].iter().map(|b| b.max_abs()).fold(self.p.amax(), f64::max)
    }

    /// Drops coefficients of magnitude at most `tol`.
    pub fn pruned(&self, tol: f64) -> Self {
        let mut p = self.p.clone();
        p.apply(|x| {
            if x.abs() <= tol {
                *x = 0.0
            }
        });
        Self {
            domain: self.domain,
            p,
            q1: self.q1.pruned(tol),
            q2: self.q2.pruned(tol),
            r0: self.r0.pruned(tol),
            r1: self.r1.pruned(tol),
            r2: self.r2.pruned(tol),
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        self.domain.check_same(&other.domain)?;
        if self.in_dims() != other.in_dims() || self.out_dims() != other.out_dims() {
            return Err(PiError::DimensionMismatch(format!(
                "{:?}->{:?} vs {:?}->{:?}",
                self.in_dims(),
                self.out_dims(),
                other.in_dims(),
                other.out_dims()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            domain: self.domain,
            p: &self.p + &other.p,
            q1: self.q1.add(&other.q1)?,
            q2: self.q2.add(&other.q2)?,
            r0: self.r0.add(&other.r0)?,
            r1: self.r1.add(&other.r1)?,
            r2: self.r2.add(&other.r2)?,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.negate())
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            domain: self.domain,
            p: &self.p * c,
            q1: self.q1.scale(c),
            q2: self.q2.scale(c),
            r0: self.r0.scale(c),
            r1: self.r1.scale(c),
            r2: self.r2.scale(c),
        }
    }

    pub fn negate(&self) -> Self {
        self.scale(-1.0)
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &Self) -> Result<Self> {
        self.domain.check_same(&inner.domain)?;
        if self.in_dims() != inner.out_dims() {
            return Err(PiError::DimensionMismatch(format!(
                "compose: outer input {:?} vs inner output {:?}",
                self.in_dims(),
                inner.out_dims()
            )));
        }
        let d = self.domain;
        let (a, b) = (self, inner);
        let pa = const_poly(&a.p, d);
        let pb = const_poly(&b.p, d);
        let q1b_t = b.q1.swap_vars();
        let q2b_t = b.q2.swap_vars();
        let r0b_t = b.r0.swap_vars();
        let q1a_t = a.q1.swap_vars();
        let ip = PolyMatrix::integrate_product;

        let p = &a.p * &b.p + a.q1.mul(&b.q2)?.integrate_full_s()?;

        let q1 = pa
            .mul(&b.q1)?
            .add(&a.q1.mul(&b.r0)?)?
            .add(&ip(&q1a_t, &b.r1, Limit::Theta, Limit::B)?.swap_vars().with_vars(Vars::S)?)?
            .add(&ip(&q1a_t, &b.r2, Limit::A, Limit::Theta)?.swap_vars().with_vars(Vars::S)?)?;

        let q2 =
            a.q2.mul(&pb)?
                .add(&a.r0.mul(&b.q2)?)?
                .add(&a.r1.mul(&q2b_t)?.integrate(ThetaRange::LowerToS)?)?
                .add(&a.r2.mul(&q2b_t)?.integrate(ThetaRange::SToUpper)?)?;

        let r0 = a.r0.mul(&b.r0)?;

        let sep = a.q2.mul(&q1b_t)?;
        let r1 = sep
            .add(&a.r0.mul(&b.r1)?)?
            .add(&a.r1.mul(&r0b_t)?)?
            .add(&ip(&a.r1, &b.r1, Limit::Theta, Limit::S)?)?
            .add(&ip(&a.r1, &b.r2, Limit::A, Limit::Theta)?)?
            .add(&ip(&a.r2, &b.r1, Limit::S, Limit::B)?)?;
        let r2 = sep
            .add(&a.r0.mul(&b.r2)?)?
            .add(&a.r2.mul(&r0b_t)?)?
            .add(&ip(&a.r1, &b.r2, Limit::A, Limit::S)?)?
            .add(&ip(&a.r2, &b.r1, Limit::Theta, Limit::B)?)?
            .add(&ip(&a.r2, &b.r2, Limit::S, Limit::Theta)?)?;

        Self::new(d, p, q1, q2, r0, r1, r2)
    }

    /// Adjoint with respect to the `R L2` inner product.
    pub fn adjoint(&self) -> Self {
        Self {
            domain: self.domain,
            p: self.p.transpose(),
            q1: self.q2.transpose(),
            q2: self.q1.transpose(),
            r0: self.r0.transpose(),
            r1: self.r2.swap_vars().transpose(),
            r2: self.r1.swap_vars().transpose(),
        }
    }

    /// Largest coefficient of `self - self*`.
    pub fn asymmetry(&self) -> f64 {
        match self.sub(&self.adjoint()) {
            Ok(d) => d.max_abs(),
            Err(_) => f64::INFINITY,
        }
    }

    /// Stacks outputs: finite parts on top of each other, distributed parts
    /// on top of each other.
    pub fn vcat(&self, other: &Self) -> Result<Self> {
        self.domain.check_same(&other.domain)?;
        if self.in_dims() != other.in_dims() {
            return Err(PiError::DimensionMismatch(format!(
                "vcat inputs {:?} vs {:?}",
                self.in_dims(),
                other.in_dims()
            )));
        }
        let mut p = DMatrix::zeros(self.p.nrows() + other.p.nrows(), self.p.ncols());
        p.view_mut((0, 0), self.p.shape()).copy_from(&self.p);
        p.view_mut((self.p.nrows(), 0), other.p.shape()).copy_from(&other.p);
        Self::new(
            self.domain,
            p,
            self.q1.vcat(&other.q1)?,
            self.q2.vcat(&other.q2)?,
            self.r0.vcat(&other.r0)?,
            self.r1.vcat(&other.r1)?,
            self.r2.vcat(&other.r2)?,
        )
    }

    /// Concatenates inputs: `[A B]` acting on `([x_a; x_b], [f_a; f_b])`.
    pub fn hcat(&self, other: &Self) -> Result<Self> {
        Ok(self.adjoint().vcat(&other.adjoint())?.adjoint())
    }

    pub fn blockdiag(&self, other: &Self) -> Result<Self> {
        let d = self.domain;
        let top = self.hcat(&Self::zero(d, other.in_dims(), self.out_dims()))?;
        let bottom = Self::zero(d, self.in_dims(), other.out_dims()).hcat(other)?;
        top.vcat(&bottom)
    }

    /// Exact application to a polynomial function.
    pub fn apply(&self, f: &Rl2Function) -> Result<Rl2Function> {
        self.domain.check_same(&f.domain())?;
        if f.dims() != self.in_dims() {
            return Err(PiError::DimensionMismatch(format!(
                "apply: operator input {:?}, function {:?}",
                self.in_dims(),
                f.dims()
            )));
        }
        let d = self.domain;
        let x = DMatrix::from_column_slice(f.finite.len(), 1, f.finite.as_slice());
        let ft = f.dist.swap_vars();
        let finite = &self.p * &x + self.q1.mul(&f.dist)?.integrate_full_s()?;
        let dist = self
            .q2
            .mul(&const_poly(&x, d))?
            .add(&self.r0.mul(&f.dist)?)?
            .add(&self.r1.mul(&ft)?.integrate(ThetaRange::LowerToS)?)?
            .add(&self.r2.mul(&ft)?.integrate(ThetaRange::SToUpper)?)?;
        Rl2Function::new(dvec(finite), dist)
    }

    /// Applies the operator to `(x, f)` with `f` given pointwise, returning the
    /// finite output and the distributed output at each of `points`. Integrals
    /// are split at the evaluation point and computed by Gauss–Legendre.
    pub fn apply_fn<F: DistributedFn + ?Sized>(
        &self,
        x: &DVector<f64>,
        f: &F,
        points: &[f64],
    ) -> (DVector<f64>, Vec<DVector<f64>>) {
        let d = self.domain;
        let (a, b) = (d.a(), d.b());
        let n_in = self.in_dims().n;
        let full = GaussLegendre::new(DEFAULT_NODES, a, b);
        let sub = GaussLegendre::new(SUB_NODES, 0.0, 1.0);
        let mut finite = &self.p * x;
        if n_in > 0 && !self.q1.is_zero() {
            for (&t, &w) in full.nodes.iter().zip(&full.weights) {
                finite += (self.q1.eval_unchecked(t, t) * f.value(t)) * w;
            }
        }
        let n_out = self.out_dims().n;
        let has_r1 = !self.r1.is_zero();
        let has_r2 = !self.r2.is_zero();
        let dist = points
            .iter()
            .map(|&s| {
                let mut out = DVector::zeros(n_out);
                if n_out == 0 {
                    return out;
                }
                if !self.q2.is_zero() {
                    out += self.q2.eval_unchecked(s, s) * x;
                }
                if n_in > 0 {
                    if !self.r0.is_zero() {
                        out += self.r0.eval_unchecked(s, s) * f.value(s);
                    }
                    if has_r1 && s > a {
                        let h = s - a;
                        for (&u, &w) in sub.nodes.iter().zip(&sub.weights) {
                            let t = a + h * u;
                            out += (self.r1.eval_unchecked(s, t) * f.value(t)) * (w * h);
                        }
                    }
                    if has_r2 && s < b {
                        let h = b - s;
                        for (&u, &w) in sub.nodes.iter().zip(&sub.weights) {
                            let t = s + h * u;
                            out += (self.r2.eval_unchecked(s, t) * f.value(t)) * (w * h);
                        }
                    }
                }
                out
            })
            .collect();
        (finite, dist)
    }

    /// Projection `⟨φ_i, self ψ_j⟩` onto orthonormal Legendre bases of the
    /// output (`φ`) and input (`ψ`) spaces, each truncated at `degree`.
    pub fn ritz_matrix(&self, degree: usize) -> DMatrix<f64> {
        let basis_in = ProbeBasis::legendre(self.domain, self.in_dims(), degree);
        let basis_out = ProbeBasis::legendre(self.domain, self.out_dims(), degree);
        galerkin(self, &basis_out, &basis_in)
    }

    /// Smallest Ritz value of a self-adjoint operator on the Legendre
    /// subspace of the given degree. Upper bound on the true infimum of the
    /// spectrum; exact when the operator is a matrix.
    pub fn min_ritz_value(&self, degree: usize) -> f64 {
        let h = self.ritz_matrix(degree);
        if h.nrows() == 0 {
            return f64::INFINITY;
        }
        let sym = (&h + h.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }
}

const SUB_NODES: usize = 40;

/// Basis of a subspace of `R^m × L2^n`: unit vectors for the finite part
/// followed by per-channel polynomial functions.
#[derive(Debug, Clone)]
pub struct ProbeBasis {
    pub domain: Interval,
    pub dims: Dims,
    pub degree: usize,
    pub kind: BasisKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// Orthonormal shifted Legendre polynomials.
    Legendre,
    /// Chebyshev polynomials of the first kind.
    Chebyshev,
}

impl ProbeBasis {
    pub fn legendre(domain: Interval, dims: Dims, degree: usize) -> Self {
        Self { domain, dims, degree, kind: BasisKind::Legendre }
    }

    pub fn chebyshev(domain: Interval, dims: Dims, degree: usize) -> Self {
        Self { domain, dims, degree, kind: BasisKind::Chebyshev }
    }

    pub fn len(&self) -> usize {
        self.dims.m + self.dims.n * (self.degree + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scalar_values(&self, s: f64) -> Vec<f64> {
        match self.kind {
            BasisKind::Legendre => legendre_values(self.degree, self.domain, s),
            BasisKind::Chebyshev => chebyshev_values(self.degree, self.domain, s),
        }
    }

    /// Finite part and distributed value at `s` of the combination `Σ c_i φ_i`.
    pub fn combine(&self, coeffs: &DVector<f64>, s: f64) -> DVector<f64> {
        let vals = self.scalar_values(s);
        let k = self.degree + 1;
        DVector::from_fn(self.dims.n, |c, _| (0..k).map(|j| coeffs[self.dims.m + c * k + j] * vals[j]).sum())
    }

    /// Distributed values of every basis element at `s`, as an
    /// `n × len` matrix (finite elements have zero columns).
    pub fn dist_matrix(&self, s: f64) -> DMatrix<f64> {
        let vals = self.scalar_values(s);
        let k = self.degree + 1;
        let mut out = DMatrix::zeros(self.dims.n, self.len());
        for c in 0..self.dims.n {
            for j in 0..k {
                out[(c, self.dims.m + c * k + j)] = vals[j];
            }
        }
        out
    }

    /// Finite-part vector of basis element `idx`.
    pub fn finite_part(&self, idx: usize) -> DVector<f64> {
        DVector::from_fn(self.dims.m, |i, _| if i == idx { 1.0 } else { 0.0 })
    }
}

/// `G[i, j] = ⟨φ_i, op ψ_j⟩` for output basis `φ` and input basis `ψ`.
pub fn galerkin(op: &PiOperator, out: &ProbeBasis, inp: &ProbeBasis) -> DMatrix<f64> {
    let d = op.domain();
    let gl = GaussLegendre::new(DEFAULT_NODES, d.a(), d.b());
    let out_vals: Vec<DMatrix<f64>> = gl.nodes.iter().map(|&s| out.dist_matrix(s)).collect();
    let mut g = DMatrix::zeros(out.len(), inp.len());
    for j in 0..inp.len() {
        let x = inp.finite_part(j);
        let f = |s: f64| inp.dist_matrix(s).column(j).into_owned();
        let (fin, dist) = op.apply_fn(&x, &f, &gl.nodes);
        for i in 0..out.dims.m {
            g[(i, j)] += fin[i];
        }
        for (q, v) in dist.iter().enumerate() {
            if v.is_empty() {
                continue;
            }
            let proj = out_vals[q].transpose() * v;
            for i in 0..out.len() {
                g[(i, j)] += gl.weights[q] * proj[i];
            }
        }
    }
    g
}

/// Result of [`invert_pi`].
#[derive(Debug, Clone)]
pub struct Inverse {
    pub op: PiOperator,
    /// Worst relative residual `‖P̂ P f − f‖ / ‖f‖` over the probe set.
    pub residual: f64,
    /// Kernel degree at which the residual contract was met.
    pub degree: u32,
}

/// Numerical inverse of a self-adjoint coercive operator as a 4-PI operator
/// with kernels of degree at most `basis_degree`, escalating the degree
/// (doubling, capped at the polynomial degree limit) until the probe
/// residual is at most `tol`.
pub fn invert_pi(op: &PiOperator, basis_degree: u32, tol: f64) -> Result<Inverse> {
    if op.in_dims() != op.out_dims() {
        return Err(PiError::DimensionMismatch(format!(
            "invert: {:?} -> {:?} is not square",
            op.in_dims(),
            op.out_dims()
        )));
    }
    let dims = op.in_dims();
    let probe_degree = basis_degree.max(1) as usize;
    let min_ritz = op.min_ritz_value(probe_degree + 4);
    if min_ritz.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(PiError::NotCoercive(min_ritz));
    }
    if dims.n == 0 {
        let inv = op.p.clone().try_inverse().ok_or(PiError::NotCoercive(min_ritz))?;
        let inv = (&inv + inv.transpose()) * 0.5;
        let out = PiOperator::matrix(op.domain, inv);
        let residual = inversion_residual(op, &out, probe_degree);
        return Ok(Inverse { op: out, residual, degree: 0 });
    }
    let mut degree = basis_degree.max(1);
    let mut best: Option<Inverse> = None;
    loop {
        let fitted = fit_inverse(op, degree as usize)?;
        let residual = inversion_residual(op, &fitted, probe_degree);
        log::debug!("invert_pi: degree {degree} residual {residual:.3e}");
        let cand = Inverse { op: fitted, residual, degree };
        if residual <= tol {
            return Ok(cand);
        }
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(cand);
        }
        if degree >= MAX_DEGREE {
            break;
        }
        degree = (degree * 2).min(MAX_DEGREE);
    }
    let best = best.expect("at least one fit");
    Err(PiError::InversionResidual { residual: best.residual, tol, degree: MAX_DEGREE.min(best.degree.max(degree)) })
}

/// Like [`invert_pi`] but returns the best fit found even when the residual
/// contract fails, so callers can report it.
pub fn invert_pi_best_effort(op: &PiOperator, basis_degree: u32, tol: f64) -> Result<Inverse> {
    match invert_pi(op, basis_degree, tol) {
        Ok(inv) => Ok(inv),
        Err(PiError::InversionResidual { .. }) => {
            let mut best: Option<Inverse> = None;
            let mut degree = basis_degree.max(1);
            loop {
                let fitted = fit_inverse(op, degree as usize)?;
                let residual = inversion_residual(op, &fitted, basis_degree.max(1) as usize);
                if best.as_ref().is_none_or(|b| residual < b.residual) {
                    best = Some(Inverse { op: fitted, residual, degree });
                }
                if degree >= MAX_DEGREE {
                    break;
                }
                degree = (degree * 2).min(MAX_DEGREE);
            }
            Ok(best.expect("at least one fit"))
        }
        Err(e) => Err(e),
    }
}

/// Worst relative residual of `inv ∘ op` against the identity on
/// deterministic random probes of the given degree.
pub fn inversion_residual(op: &PiOperator, inv: &PiOperator, degree: usize) -> f64 {
    use rand::SeedableRng;
    let d = op.domain();
    let dims = op.in_dims();
    let gl = GaussLegendre::new(DEFAULT_NODES, d.a(), d.b());
    let cheb_pts = chebyshev_points(CHEB_SAMPLES, d);
    let basis = ProbeBasis::legendre(d, dims, degree);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let c = DVector::from_fn(basis.len(), |_, _| rng.gen_range(-1.0..1.0));
        let x = DVector::from_fn(dims.m, |i, _| c[i]);
        let f = |s: f64| basis.combine(&c, s);
        let (gx, gvals) = op.apply_fn(&x, &f, &cheb_pts);
        let g = ChebInterp::from_samples(&gvals, d);
        let (hx, hvals) = inv.apply_fn(&gx, &g, &gl.nodes);
        let mut err = (&hx - &x).norm_squared();
        let mut nrm = x.norm_squared();
        for (q, &s) in gl.nodes.iter().enumerate() {
            let fv = f(s);
            err += gl.weights[q] * (&hvals[q] - &fv).norm_squared();
            nrm += gl.weights[q] * fv.norm_squared();
        }
        worst = worst.max((err / nrm.max(f64::MIN_POSITIVE)).sqrt());
    }
    worst
}

const PROBES: usize = 24;
const CHEB_SAMPLES: usize = 64;

pub fn chebyshev_points(count: usize, d: Interval) -> Vec<f64> {
    let n = (count - 1) as f64;
    (0..count)
        .map(|k| {
            let x = (std::f64::consts::PI * k as f64 / n).cos();
            0.5 * (d.a() + d.b()) + 0.5 * d.len() * x
        })
        .collect()
}

/// Vector-valued Chebyshev interpolant through samples at
/// [`chebyshev_points`] (descending order in `s`).
pub struct ChebInterp {
    domain: Interval,
    /// `coeffs[k]` is the vector coefficient of `T_k`.
    coeffs: Vec<DVector<f64>>,
}

impl ChebInterp {
    pub fn from_samples(values: &[DVector<f64>], domain: Interval) -> Self {
        let count = values.len();
        let n = count - 1;
        let dim = values.first().map_or(0, |v| v.len());
        let coeffs = (0..count)
            .map(|k| {
                let mut c = DVector::zeros(dim);
                for (j, v) in values.iter().enumerate() {
                    let w = if j == 0 || j == n { 0.5 } else { 1.0 };
                    let ang = std::f64::consts::PI * (k * j) as f64 / n as f64;
                    c += v * (w * ang.cos());
                }
                let scale = if k == 0 || k == n { 1.0 / n as f64 } else { 2.0 / n as f64 };
                c * scale
            })
            .collect();
        Self { domain, coeffs }
    }

    pub fn coefficients(&self) -> &[DVector<f64>] {
        &self.coeffs
    }

    pub fn sample<F: DistributedFn + ?Sized>(f: &F, domain: Interval, count: usize) -> Self {
        let pts = chebyshev_points(count, domain);
        let vals: Vec<DVector<f64>> = pts.iter().map(|&s| f.value(s)).collect();
        Self::from_samples(&vals, domain)
    }
}

impl DistributedFn for ChebInterp {
    fn value(&self, s: f64) -> DVector<f64> {
        let x = 2.0 * (s - self.domain.a()) / self.domain.len() - 1.0;
        let dim = self.coeffs.first().map_or(0, |c| c.len());
        let mut b1 = DVector::zeros(dim);
        let mut b2 = DVector::zeros(dim);
        for c in self.coeffs.iter().skip(1).rev() {
            let b0 = c + &b1 * (2.0 * x) - &b2;
            b2 = b1;
            b1 = b0;
        }
        &self.coeffs[0] + &b1 * x - b2
    }
}

/// Least-squares fit of a degree-`k` 4-PI operator `P̂` with `P̂ (P f) ≈ f`
/// on Legendre probes. Unknown kernels are expanded in Chebyshev
/// polynomials during the fit and converted to monomials afterwards.
fn fit_inverse(op: &PiOperator, k: usize) -> Result<PiOperator> {
    let d = op.domain();
    let dims = op.in_dims();
    let (m, n) = (dims.m, dims.n);
    let probe_deg = k + 4;
    let basis = ProbeBasis::legendre(d, dims, probe_deg);
    let gl = GaussLegendre::new(DEFAULT_NODES, d.a(), d.b());
    let sub = GaussLegendre::new(SUB_NODES, 0.0, 1.0);
    let cheb_pts = chebyshev_points(CHEB_SAMPLES, d);
    let nq = gl.nodes.len();

    // parameter layout
    let biv: Vec<(usize, usize)> = (0..=k).flat_map(|i| (0..=(k - i)).map(move |l| (i, l))).collect();
    let n_p = m * m;
    let n_q1 = m * n * (k + 1);
    let n_q2 = n * m * (k + 1);
    let n_r0 = n * n * (k + 1);
    let n_r = n * n * biv.len();
    let off_q1 = n_p;
    let off_q2 = off_q1 + n_q1;
    let off_r0 = off_q2 + n_q2;
    let off_r1 = off_r0 + n_r0;
    let off_r2 = off_r1 + n_r;
    let n_params = off_r2 + n_r;

    let rows_per_probe = m + n * nq;
    let n_rows = basis.len() * rows_per_probe;
    let mut a_mat = DMatrix::<f64>::zeros(n_rows, n_params);
    let mut rhs = DVector::<f64>::zeros(n_rows);

    let cheb_at_nodes: Vec<Vec<f64>> = gl.nodes.iter().map(|&s| chebyshev_values(k, d, s)).collect();
    let sqrt_w: Vec<f64> = gl.weights.iter().map(|w| w.sqrt()).collect();

    for j in 0..basis.len() {
        let x = basis.finite_part(j);
        let f = |s: f64| basis.dist_matrix(s).column(j).into_owned();
        let (gx, gvals) = op.apply_fn(&x, &f, &cheb_pts);
        let g = ChebInterp::from_samples(&gvals, d);
        let row0 = j * rows_per_probe;

        // moments of g against T_l: full, lower [a, s_q], upper [s_q, b]
        let mut full = vec![DVector::<f64>::zeros(n); k + 1];
        for (&t, &w) in gl.nodes.iter().zip(&gl.weights) {
            let tv = chebyshev_values(k, d, t);
            let gv = g.value(t);
            for l in 0..=k {
                full[l] += &gv * (w * tv[l]);
            }
        }
        let mut lower = vec![vec![DVector::<f64>::zeros(n); k + 1]; nq];
        let mut upper = vec![vec![DVector::<f64>::zeros(n); k + 1]; nq];
        let mut g_at = Vec::with_capacity(nq);
        for (q, &s) in gl.nodes.iter().enumerate() {
            g_at.push(g.value(s));
            for (&u, &w) in sub.nodes.iter().zip(&sub.weights) {
                let h = s - d.a();
                let t = d.a() + h * u;
                let tv = chebyshev_values(k, d, t);
                let gv = g.value(t);
                for l in 0..=k {
                    lower[q][l] += &gv * (w * h * tv[l]);
                }
                let h = d.b() - s;
                let t = s + h * u;
                let tv = chebyshev_values(k, d, t);
                let gv = g.value(t);
                for l in 0..=k {
                    upper[q][l] += &gv * (w * h * tv[l]);
                }
            }
        }

        // finite rows
        for r in 0..m {
            rhs[row0 + r] = x[r];
            for c in 0..m {
                a_mat[(row0 + r, r * m + c)] = gx[c];
            }
            for c in 0..n {
                for i in 0..=k {
                    a_mat[(row0 + r, off_q1 + (r * n + c) * (k + 1) + i)] = full[i][c];
                }
            }
        }
        // distributed rows
        for q in 0..nq {
            let fv = f(gl.nodes[q]);
            let tv = &cheb_at_nodes[q];
            for r in 0..n {
                let row = row0 + m + q * n + r;
                let sw = sqrt_w[q];
                rhs[row] = sw * fv[r];
                for c in 0..m {
                    for i in 0..=k {
                        a_mat[(row, off_q2 + (r * m + c) * (k + 1) + i)] = sw * tv[i] * gx[c];
                    }
                }
                for c in 0..n {
                    for i in 0..=k {
                        a_mat[(row, off_r0 + (r * n + c) * (k + 1) + i)] = sw * tv[i] * g_at[q][c];
                    }
                    for (bi, &(i, l)) in biv.iter().enumerate() {
                        let col = (r * n + c) * biv.len() + bi;
                        a_mat[(row, off_r1 + col)] = sw * tv[i] * lower[q][l][c];
                        a_mat[(row, off_r2 + col)] = sw * tv[i] * upper[q][l][c];
                    }
                }
            }
        }
    }

    // column scaling for conditioning
    let scales: Vec<f64> = (0..n_params)
        .map(|c| {
            let nrm = a_mat.column(c).norm();
            if nrm > 0.0 {
                1.0 / nrm
            } else {
                1.0
            }
        })
        .collect();
    for (c, s) in scales.iter().enumerate() {
        a_mat.column_mut(c).scale_mut(*s);
    }
    let svd = a_mat.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    let mut sol = svd.solve(&rhs, tol).map_err(|e| PiError::Malformed(e.to_string()))?;
    for (c, s) in scales.iter().enumerate() {
        sol[c] *= s;
    }

    // convert to monomials
    let mono = chebyshev_monomials(k, d);
    let uni = |off: usize, rows: usize, cols: usize| -> Result<PolyMatrix> {
        let mut terms = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                for i in 0..=k {
                    let w = sol[off + (r * cols + c) * (k + 1) + i];
                    for e in 0..=i {
                        let coef = w * mono[(i, e)];
                        if coef != 0.0 {
                            let mut mat = DMatrix::zeros(rows, cols);
                            mat[(r, c)] = coef;
                            terms.push(((e as u32, 0), mat));
                        }
                    }
                }
            }
        }
        Ok(PolyMatrix::from_terms(rows, cols, Vars::S, d, terms)?)
    };
    let bi = |off: usize| -> Result<PolyMatrix> {
        let mut terms = Vec::new();
        for r in 0..n {
            for c in 0..n {
                for (b_idx, &(i, l)) in biv.iter().enumerate() {
                    let w = sol[off + (r * n + c) * biv.len() + b_idx];
                    for e in 0..=i {
                        for f in 0..=l {
                            let coef = w * mono[(i, e)] * mono[(l, f)];
                            if coef != 0.0 {
                                let mut mat = DMatrix::zeros(n, n);
                                mat[(r, c)] = coef;
                                terms.push(((e as u32, f as u32), mat));
                            }
                        }
                    }
                }
            }
        }
        Ok(PolyMatrix::from_terms(n, n, Vars::STheta, d, terms)?)
    };
    let p = DMatrix::from_fn(m, m, |r, c| sol[r * m + c]);
    let fitted =
        PiOperator::new(d, p, uni(off_q1, m, n)?, uni(off_q2, n, m)?, uni(off_r0, n, n)?, bi(off_r1)?, bi(off_r2)?)?;
    let sym = fitted.add(&fitted.adjoint())?.scale(0.5);
    Ok(sym)
}

// ---------------------------------------------------------------------------
// serialization

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermData {
    pub s: u32,
    pub theta: u32,
    /// Row-major coefficient matrix.
    pub coeffs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyData {
    pub rows: usize,
    pub cols: usize,
    pub terms: Vec<TermData>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimsData {
    pub m_in: usize,
    pub n_in: usize,
    pub m_out: usize,
    pub n_out: usize,
}

/// Text form of a [`PiOperator`]: domain, dimensions and the six blocks as
/// exponent → matrix maps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PiOperatorData {
    pub domain: [f64; 2],
    pub dims: DimsData,
    pub p: Vec<Vec<f64>>,
    pub q1: PolyData,
    pub q2: PolyData,
    pub r0: PolyData,
    pub r1: PolyData,
    pub r2: PolyData,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: usize, cols: usize, data: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if data.len() != rows || data.iter().any(|r| r.len() != cols) {
        return Err(PiError::Malformed(format!("expected a {rows}x{cols} matrix")));
    }
    Ok(DMatrix::from_fn(rows, cols, |r, c| data[r][c]))
}

impl PolyData {
    pub fn from_poly(p: &PolyMatrix) -> Self {
        Self {
            rows: p.rows(),
            cols: p.cols(),
            terms: p.coeffs().iter().map(|(&(s, theta), m)| TermData { s, theta, coeffs: matrix_rows(m) }).collect(),
        }
    }

    pub fn to_poly(&self, vars: Vars, domain: Interval) -> Result<PolyMatrix> {
        let terms = self
            .terms
            .iter()
            .map(|t| Ok(((t.s, t.theta), matrix_from_rows(self.rows, self.cols, &t.coeffs)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PolyMatrix::from_terms(self.rows, self.cols, vars, domain, terms)?)
    }
}

impl From<&PiOperator> for PiOperatorData {
    fn from(op: &PiOperator) -> Self {
        let (i, o) = (op.in_dims(), op.out_dims());
        Self {
            domain: [op.domain.a(), op.domain.b()],
            dims: DimsData { m_in: i.m, n_in: i.n, m_out: o.m, n_out: o.n },
            p: matrix_rows(&op.p),
            q1: PolyData::from_poly(&op.q1),
            q2: PolyData::from_poly(&op.q2),
            r0: PolyData::from_poly(&op.r0),
            r1: PolyData::from_poly(&op.r1),
            r2: PolyData::from_poly(&op.r2),
        }
    }
}

impl TryFrom<&PiOperatorData> for PiOperator {
    type Error = PiError;

    fn try_from(d: &PiOperatorData) -> Result<Self> {
        let domain = Interval::new(d.domain[0], d.domain[1])?;
        let dm = &d.dims;
        let p = matrix_from_rows(dm.m_out, dm.m_in, &d.p)?;
        let check = |name: &str, pd: &PolyData, r: usize, c: usize| {
            if pd.rows != r || pd.cols != c {
                Err(PiError::Malformed(format!("{name} declared {}x{}, expected {r}x{c}", pd.rows, pd.cols)))
            } else {
                Ok(())
            }
        };
        check("Q1", &d.q1, dm.m_out, dm.n_in)?;
        check("Q2", &d.q2, dm.n_out, dm.m_in)?;
        check("R0", &d.r0, dm.n_out, dm.n_in)?;
        check("R1", &d.r1, dm.n_out, dm.n_in)?;
        check("R2", &d.r2, dm.n_out, dm.n_in)?;
        PiOperator::new(
            domain,
            p,
            d.q1.to_poly(Vars::S, domain)?,
            d.q2.to_poly(Vars::S, domain)?,
            d.r0.to_poly(Vars::S, domain)?,
            d.r1.to_poly(Vars::STheta, domain)?,
            d.r2.to_poly(Vars::STheta, domain)?,
        )
    }
}

impl Serialize for PiOperator {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        PiOperatorData::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PiOperator {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let data = PiOperatorData::deserialize(deserializer)?;
        PiOperator::try_from(&data).map_err(serde::de::Error::custom)
    }
}

impl PiOperator {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("operator serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PiError::Malformed(e.to_string()))
    }
}
