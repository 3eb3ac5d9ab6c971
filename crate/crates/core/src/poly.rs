//! Polynomial matrices in one variable `s` or two variables `(s, θ)` on a
//! fixed interval `[a, b]`, stored as monomial coefficient matrices.
//!
//! Every value is kept in canonical form: a coefficient matrix that is
//! exactly zero is never stored, so two polynomial matrices are equal as
//! values iff they are equal as functions.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest total degree a polynomial matrix may carry.
pub const MAX_DEGREE: u32 = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("domain mismatch: [{0}, {1}] vs [{2}, {3}]")]
    DomainMismatch(f64, f64, f64, f64),
    #[error("degree {0} exceeds the cap of {MAX_DEGREE}")]
    DegreeOverflow(u32),
    #[error("operation requires variables {expected:?}, found {found:?}")]
    WrongVars { expected: Vars, found: Vars },
    #[error("point (s={s}, θ={theta}) lies outside [{a}, {b}]")]
    OutOfDomain { s: f64, theta: f64, a: f64, b: f64 },
    #[error("invalid interval [{0}, {1}]")]
    InvalidInterval(f64, f64),
}

pub type Result<T> = std::result::Result<T, PolyError>;

/// Closed interval `[a, b]` with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    a: f64,
    b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(PolyError::InvalidInterval(a, b));
        }
        Ok(Self { a, b })
    }

    pub fn unit() -> Self {
        Self { a: 0.0, b: 1.0 }
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn contains(&self, x: f64) -> bool {
        let slack = 1e-12 * self.len();
        x >= self.a - slack && x <= self.b + slack
    }

    pub(crate) fn check_same(&self, other: &Interval) -> Result<()> {
        if self != other {
            return Err(PolyError::DomainMismatch(self.a, self.b, other.a, other.b));
        }
        Ok(())
    }
}

/// Variable set a polynomial matrix depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Vars {
    None,
    S,
    STheta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    S,
    Theta,
}

/// Affine expression `s·coef_s + θ·coef_theta + constant`, used as the
/// right-hand side of a substitution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub s: f64,
    pub theta: f64,
    pub constant: f64,
}

impl Affine {
    pub fn s() -> Self {
        Self { s: 1.0, theta: 0.0, constant: 0.0 }
    }

    pub fn theta() -> Self {
        Self { s: 0.0, theta: 1.0, constant: 0.0 }
    }

    pub fn constant(c: f64) -> Self {
        Self { s: 0.0, theta: 0.0, constant: c }
    }

    fn vars(&self) -> Vars {
        if self.theta != 0.0 {
            Vars::STheta
        } else if self.s != 0.0 {
            Vars::S
        } else {
            Vars::None
        }
    }
}

/// Range of a definite integration in θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaRange {
    /// θ ∈ [a, s]
    LowerToS,
    /// θ ∈ [s, b]
    SToUpper,
    /// θ ∈ [a, b]
    Full,
}

/// Integration limit for [`PolyMatrix::integrate_product`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Limit {
    A,
    B,
    S,
    Theta,
}

#[derive(Clone, PartialEq)]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    vars: Vars,
    domain: Interval,
    coeffs: BTreeMap<(u32, u32), DMatrix<f64>>,
}

impl fmt::Debug for PolyMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PolyMatrix<{}x{}, {:?}>{{", self.rows, self.cols, self.vars)?;
        for ((i, j), m) in &self.coeffs {
            write!(f, " s^{i}θ^{j}: {:?};", m.as_slice())?;
        }
        write!(f, " }}")
    }
}

fn add_into(map: &mut BTreeMap<(u32, u32), DMatrix<f64>>, key: (u32, u32), m: &DMatrix<f64>) {
    match map.get_mut(&key) {
        Some(acc) => *acc += m,
        None => {
            map.insert(key, m.clone());
        }
    }
}

fn add_scaled_into(map: &mut BTreeMap<(u32, u32), DMatrix<f64>>, key: (u32, u32), m: &DMatrix<f64>, c: f64) {
    if c == 0.0 {
        return;
    }
    match map.get_mut(&key) {
        Some(acc) => axpy(acc, c, m),
        None => {
            map.insert(key, m * c);
        }
    }
}

/// `acc += c·m` for equally sized matrices.
pub(crate) fn axpy(acc: &mut DMatrix<f64>, c: f64, m: &DMatrix<f64>) {
    for (x, y) in acc.iter_mut().zip(m.iter()) {
        *x += c * y;
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

impl PolyMatrix {
    pub fn zeros(rows: usize, cols: usize, vars: Vars, domain: Interval) -> Self {
        Self { rows, cols, vars, domain, coeffs: BTreeMap::new() }
    }

    /// Constant polynomial matrix (no variable dependence).
    pub fn constant(m: DMatrix<f64>, domain: Interval) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols(), Vars::None, domain);
        if m.iter().any(|&x| x != 0.0) {
            out.coeffs.insert((0, 0), m);
        }
        out
    }

    pub fn identity(n: usize, domain: Interval) -> Self {
        Self::constant(DMatrix::identity(n, n), domain)
    }

    /// Builds a matrix from `(s-exponent, θ-exponent) → coefficient` terms.
    /// Repeated exponents are summed.
    pub fn from_terms<I>(rows: usize, cols: usize, vars: Vars, domain: Interval, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = ((u32, u32), DMatrix<f64>)>,
    {
        let mut out = Self::zeros(rows, cols, vars, domain);
        for ((i, j), m) in terms {
            if m.nrows() != rows || m.ncols() != cols {
                return Err(PolyError::DimensionMismatch(format!(
                    "coefficient is {}x{}, expected {rows}x{cols}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            let needed = if j > 0 {
                Vars::STheta
            } else if i > 0 {
                Vars::S
            } else {
                Vars::None
            };
            if needed > vars {
                return Err(PolyError::WrongVars { expected: needed, found: vars });
            }
            if i + j > MAX_DEGREE {
                return Err(PolyError::DegreeOverflow(i + j));
            }
            add_into(&mut out.coeffs, (i, j), &m);
        }
        out.prune_zeros();
        Ok(out)
    }

    /// 1×1 polynomial from `(s-exponent, θ-exponent, coefficient)` triples.
    pub fn scalar(vars: Vars, domain: Interval, terms: &[(u32, u32, f64)]) -> Result<Self> {
        Self::from_terms(1, 1, vars, domain, terms.iter().map(|&(i, j, c)| ((i, j), DMatrix::from_element(1, 1, c))))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn vars(&self) -> Vars {
        self.vars
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn coeffs(&self) -> &BTreeMap<(u32, u32), DMatrix<f64>> {
        &self.coeffs
    }

    pub fn coeff(&self, i: u32, j: u32) -> Option<&DMatrix<f64>> {
        self.coeffs.get(&(i, j))
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Total degree; zero for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.coeffs.keys().map(|&(i, j)| i + j).max().unwrap_or(0)
    }

    pub fn degree_s(&self) -> u32 {
        self.coeffs.keys().map(|&(i, _)| i).max().unwrap_or(0)
    }

    pub fn degree_theta(&self) -> u32 {
        self.coeffs.keys().map(|&(_, j)| j).max().unwrap_or(0)
    }

    /// Largest coefficient magnitude.
    pub fn max_abs(&self) -> f64 {
        self.coeffs.values().flat_map(|m| m.iter()).fold(0.0, |acc, &x| acc.max(x.abs()))
    }

    fn prune_zeros(&mut self) {
        self.coeffs.retain(|_, m| m.iter().any(|&x| x != 0.0));
    }

    /// Zeroes coefficients with magnitude at most `tol` and re-canonicalizes.
    pub fn pruned(&self, tol: f64) -> Self {
        let mut out = self.clone();
        for m in out.coeffs.values_mut() {
            m.apply(|x| {
                if x.abs() <= tol {
                    *x = 0.0
                }
            });
        }
        out.prune_zeros();
        out
    }

    /// Raises the declared variable set (never lowers it).
    pub fn promote(mut self, vars: Vars) -> Self {
        self.vars = self.vars.max(vars);
        self
    }

    /// Re-declares the variable set; fails if the content depends on a
    /// variable being dropped.
    pub fn with_vars(mut self, vars: Vars) -> Result<Self> {
        let needed = self.needed_vars();
        if needed > vars {
            return Err(PolyError::WrongVars { expected: needed, found: vars });
        }
        self.vars = vars;
        Ok(self)
    }

    /// Smallest variable set the coefficients actually use.
    pub fn needed_vars(&self) -> Vars {
        let mut v = Vars::None;
        for &(i, j) in self.coeffs.keys() {
            if j > 0 {
                return Vars::STheta;
            }
            if i > 0 {
                v = Vars::S;
            }
        }
        v
    }

    fn check_binary(&self, other: &Self) -> Result<()> {
        self.domain.check_same(&other.domain)
    }

    fn check_degree(self) -> Result<Self> {
        let d = self.degree();
        if d > MAX_DEGREE {
            return Err(PolyError::DegreeOverflow(d));
        }
        Ok(self)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_binary(other)?;
        if self.rows != other.rows || self.cols != other.cols {
            return Err(PolyError::DimensionMismatch(format!(
                "add {}x{} + {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = self.clone();
        out.vars = self.vars.max(other.vars);
        for (k, m) in &other.coeffs {
            add_into(&mut out.coeffs, *k, m);
        }
        out.prune_zeros();
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        for m in out.coeffs.values_mut() {
            *m *= c;
        }
        out.prune_zeros();
        out
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_binary(other)?;
        if self.cols != other.rows {
            return Err(PolyError::DimensionMismatch(format!(
                "mul {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols, self.vars.max(other.vars), self.domain);
        if self.cols == 0 {
            return Ok(out);
        }
        for (&(i1, j1), m1) in &self.coeffs {
            for (&(i2, j2), m2) in &other.coeffs {
                let prod = m1 * m2;
                add_into(&mut out.coeffs, (i1 + i2, j1 + j2), &prod);
            }
        }
        out.prune_zeros();
        out.check_degree()
    }

    pub fn transpose(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            vars: self.vars,
            domain: self.domain,
            coeffs: self.coeffs.iter().map(|(k, m)| (*k, m.transpose())).collect(),
        }
    }

    /// Evaluates at `(s, θ)`; both must lie in the domain.
    pub fn eval(&self, s: f64, theta: f64) -> Result<DMatrix<f64>> {
        if !self.domain.contains(s) || !self.domain.contains(theta) {
            return Err(PolyError::OutOfDomain { s, theta, a: self.domain.a, b: self.domain.b });
        }
        Ok(self.eval_unchecked(s, theta))
    }

    /// Evaluates a polynomial that does not depend on θ.
    pub fn eval_s(&self, s: f64) -> Result<DMatrix<f64>> {
        self.eval(s, self.domain.a)
    }

    pub(crate) fn eval_unchecked(&self, s: f64, theta: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for (&(i, j), m) in &self.coeffs {
            let c = s.powi(i as i32) * theta.powi(j as i32);
            axpy(&mut out, c, m);
        }
        out
    }

    /// Replaces one variable by an affine expression in `(s, θ)`.
    pub fn substitute(&self, var: Var, expr: Affine) -> Result<Self> {
        let kept = match (var, self.vars) {
            (Var::S, Vars::STheta) => Vars::STheta,
            (Var::S, _) => Vars::None,
            (Var::Theta, Vars::STheta) => Vars::S,
            (Var::Theta, v) => v,
        };
        let vars = kept.max(expr.vars());
        let mut out = Self::zeros(self.rows, self.cols, vars, self.domain);
        for (&(i, j), m) in &self.coeffs {
            let (power, other_key) = match var {
                Var::S => (i, (0, j)),
                Var::Theta => (j, (i, 0)),
            };
            // expand (α s + β θ + c)^power
            for p_s in 0..=power {
                for p_t in 0..=(power - p_s) {
                    let p_c = power - p_s - p_t;
                    let coef = binomial(power, p_s)
                        * binomial(power - p_s, p_t)
                        * expr.s.powi(p_s as i32)
                        * expr.theta.powi(p_t as i32)
                        * expr.constant.powi(p_c as i32);
                    if coef == 0.0 {
                        continue;
                    }
                    let key = (other_key.0 + p_s, other_key.1 + p_t);
                    add_scaled_into(&mut out.coeffs, key, m, coef);
                }
            }
        }
        out.prune_zeros();
        out.check_degree()
    }

    /// Exchanges the roles of `s` and `θ`.
    pub fn swap_vars(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            vars: if self.vars == Vars::None { Vars::None } else { Vars::STheta },
            domain: self.domain,
            coeffs: self.coeffs.iter().map(|(&(i, j), m)| ((j, i), m.clone())).collect(),
        }
    }

    /// Exact definite integral in θ over the given range.
    pub fn integrate(&self, range: ThetaRange) -> Result<Self> {
        if self.vars != Vars::STheta {
            return Err(PolyError::WrongVars { expected: Vars::STheta, found: self.vars });
        }
        let (a, b) = (self.domain.a, self.domain.b);
        let mut out = Self::zeros(self.rows, self.cols, Vars::S, self.domain);
        for (&(i, j), m) in &self.coeffs {
            let inv = 1.0 / (j + 1) as f64;
            match range {
                ThetaRange::LowerToS => {
                    add_scaled_into(&mut out.coeffs, (i + j + 1, 0), m, inv);
                    add_scaled_into(&mut out.coeffs, (i, 0), m, -inv * a.powi(j as i32 + 1));
                }
                ThetaRange::SToUpper => {
                    add_scaled_into(&mut out.coeffs, (i, 0), m, inv * b.powi(j as i32 + 1));
                    add_scaled_into(&mut out.coeffs, (i + j + 1, 0), m, -inv);
                }
                ThetaRange::Full => {
                    let w = inv * (b.powi(j as i32 + 1) - a.powi(j as i32 + 1));
                    add_scaled_into(&mut out.coeffs, (i, 0), m, w);
                }
            }
        }
        out.prune_zeros();
        out.check_degree()
    }

    /// Exact integral of a θ-free polynomial over `s ∈ [a, b]`.
    pub fn integrate_full_s(&self) -> Result<DMatrix<f64>> {
        if self.vars == Vars::STheta {
            return Err(PolyError::WrongVars { expected: Vars::S, found: self.vars });
        }
        let (a, b) = (self.domain.a, self.domain.b);
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for (&(i, _), m) in &self.coeffs {
            let w = (b.powi(i as i32 + 1) - a.powi(i as i32 + 1)) / (i + 1) as f64;
            axpy(&mut out, w, m);
        }
        Ok(out)
    }

    /// Computes `∫ left(s, η) · right(η, θ) dη` with η running from `lower`
    /// to `upper`. In `left` the θ slot plays η; in `right` the s slot plays η.
    /// The result is a function of `(s, θ)`.
    pub fn integrate_product(left: &Self, right: &Self, lower: Limit, upper: Limit) -> Result<Self> {
        left.check_binary(right)?;
        if left.cols != right.rows {
            return Err(PolyError::DimensionMismatch(format!(
                "kernel product {}x{} · {}x{}",
                left.rows, left.cols, right.rows, right.cols
            )));
        }
        let (a, b) = (left.domain.a, left.domain.b);
        let mut out = Self::zeros(left.rows, right.cols, Vars::STheta, left.domain);
        if left.cols == 0 {
            return Ok(out);
        }
        let mut apply_limit = |lim: Limit, sign: f64, i: u32, l: u32, p: u32, m: &DMatrix<f64>| {
            let inv = sign / (p + 1) as f64;
            match lim {
                Limit::A => add_scaled_into(&mut out.coeffs, (i, l), m, inv * a.powi(p as i32 + 1)),
                Limit::B => add_scaled_into(&mut out.coeffs, (i, l), m, inv * b.powi(p as i32 + 1)),
                Limit::S => add_scaled_into(&mut out.coeffs, (i + p + 1, l), m, inv),
                Limit::Theta => add_scaled_into(&mut out.coeffs, (i, l + p + 1), m, inv),
            }
        };
        for (&(i, j), ml) in &left.coeffs {
            for (&(k, l), mr) in &right.coeffs {
                let prod = ml * mr;
                let p = j + k;
                apply_limit(upper, 1.0, i, l, p, &prod);
                apply_limit(lower, -1.0, i, l, p, &prod);
            }
        }
        out.prune_zeros();
        out.check_degree()
    }

    /// Sub-block `[r0, r0+nr) × [c0, c0+nc)`.
    pub fn block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Self {
        let mut out = Self::zeros(nr, nc, self.vars, self.domain);
        for (k, m) in &self.coeffs {
            out.coeffs.insert(*k, m.view((r0, c0), (nr, nc)).into_owned());
        }
        out.prune_zeros();
        out
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hcat(&self, other: &Self) -> Result<Self> {
        self.check_binary(other)?;
        if self.rows != other.rows {
            return Err(PolyError::DimensionMismatch(format!("hcat rows {} vs {}", self.rows, other.rows)));
        }
        let cols = self.cols + other.cols;
        let mut out = Self::zeros(self.rows, cols, self.vars.max(other.vars), self.domain);
        for (k, m) in &self.coeffs {
            let e = out.coeffs.entry(*k).or_insert_with(|| DMatrix::zeros(self.rows, cols));
            e.view_mut((0, 0), (self.rows, self.cols)).copy_from(m);
        }
        for (k, m) in &other.coeffs {
            let e = out.coeffs.entry(*k).or_insert_with(|| DMatrix::zeros(self.rows, cols));
            e.view_mut((0, self.cols), (other.rows, other.cols)).copy_from(m);
        }
        Ok(out)
    }

    /// Vertical concatenation `[self; other]`.
    pub fn vcat(&self, other: &Self) -> Result<Self> {
        Ok(self.transpose().hcat(&other.transpose())?.transpose())
    }
}
