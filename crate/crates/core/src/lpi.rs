//! Linear PI inequalities: decision variables, affine operator expressions,
//! positivity through `Π* M Π` parameterizations, coefficient matching and
//! lowering to an SDP.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::basis::{chebyshev_monomials, monomial_chebyshev};
use crate::pi_op::{Dims, PiError, PiOperator};
use crate::poly::{Interval, PolyMatrix, Vars, MAX_DEGREE};
use crate::sdp::{BlockKind, SdpBackend, SdpBlock, SdpError, SdpInstance, SolveStatus};

pub type VarId = usize;

#[derive(Debug, Error)]
pub enum LpiError {
    #[error(transparent)]
    Pi(#[from] PiError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error("expression is not self-adjoint (asymmetry {0:.3e})")]
    NotSelfAdjoint(f64),
    #[error("degree {0} exceeds the polynomial cap")]
    DegreeTooHigh(u32),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, LpiError>;

/// Affine scalar expression `c + Σ a_k y_k`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub constant: f64,
    pub terms: BTreeMap<VarId, f64>,
}

impl LinExpr {
    pub fn var(id: VarId) -> Self {
        Self { constant: 0.0, terms: BTreeMap::from([(id, 1.0)]) }
    }

    pub fn constant(c: f64) -> Self {
        Self { constant: c, terms: BTreeMap::new() }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.constant += other.constant;
        for (&k, &v) in &other.terms {
            *out.terms.entry(k).or_insert(0.0) += v;
        }
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { constant: self.constant * c, terms: self.terms.iter().map(|(&k, &v)| (k, v * c)).collect() }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(&k, &v)| v * y[k]).sum::<f64>()
    }
}

/// Operator expression affine in scalar decision variables:
/// `constant + Σ y_k · op_k`.
#[derive(Debug, Clone)]
pub struct PiExpr {
    constant: PiOperator,
    terms: BTreeMap<VarId, PiOperator>,
}

fn dims_err(what: &str, a: (Dims, Dims), b: (Dims, Dims)) -> LpiError {
    LpiError::DimensionMismatch(format!("{what}: {:?}->{:?} vs {:?}->{:?}", a.0, a.1, b.0, b.1))
}

impl PiExpr {
    pub fn constant(op: PiOperator) -> Self {
        Self { constant: op, terms: BTreeMap::new() }
    }

    pub fn zero(domain: Interval, input: Dims, output: Dims) -> Self {
        Self::constant(PiOperator::zero(domain, input, output))
    }

    /// `y[id] · op`.
    pub fn from_term(id: VarId, op: PiOperator) -> Self {
        let constant = PiOperator::zero(op.domain(), op.in_dims(), op.out_dims());
        let mut terms = BTreeMap::new();
        terms.insert(id, op);
        Self { constant, terms }
    }

    pub fn domain(&self) -> Interval {
        self.constant.domain()
    }

    pub fn in_dims(&self) -> Dims {
        self.constant.in_dims()
    }

    pub fn out_dims(&self) -> Dims {
        self.constant.out_dims()
    }

    pub fn constant_part(&self) -> &PiOperator {
        &self.constant
    }

    pub fn terms(&self) -> &BTreeMap<VarId, PiOperator> {
        &self.terms
    }

    pub fn var_count(&self) -> usize {
        self.terms.len()
    }

    fn shape(&self) -> (Dims, Dims) {
        (self.in_dims(), self.out_dims())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(dims_err("add", self.shape(), other.shape()));
        }
        let mut terms = self.terms.clone();
        for (&k, op) in &other.terms {
            let v = match terms.remove(&k) {
                Some(mine) => mine.add(op)?,
                None => op.clone(),
            };
            if !v.is_zero() {
                terms.insert(k, v);
            }
        }
        Ok(Self { constant: self.constant.add(&other.constant)?, terms })
    }

    pub fn add_const(&self, op: &PiOperator) -> Result<Self> {
        Ok(Self { constant: self.constant.add(op)?, terms: self.terms.clone() })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { constant: self.constant.scale(c), terms: self.terms.iter().map(|(&k, o)| (k, o.scale(c))).collect() }
    }

    pub fn negate(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.negate())
    }

    fn map_ops<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&PiOperator) -> std::result::Result<PiOperator, PiError> + Sync,
    {
        let constant = f(&self.constant)?;
        let terms: Vec<(VarId, PiOperator)> =
            self.terms.par_iter().map(|(&k, op)| Ok((k, f(op)?))).collect::<std::result::Result<_, PiError>>()?;
        Ok(Self { constant, terms: terms.into_iter().filter(|(_, o)| !o.is_zero()).collect() })
    }

    /// `op ∘ self`.
    pub fn compose_left(&self, op: &PiOperator) -> Result<Self> {
        self.map_ops(|x| op.compose(x))
    }

    /// `self ∘ op`.
    pub fn compose_right(&self, op: &PiOperator) -> Result<Self> {
        self.map_ops(|x| x.compose(op))
    }

    pub fn adjoint(&self) -> Self {
        Self { constant: self.constant.adjoint(), terms: self.terms.iter().map(|(&k, o)| (k, o.adjoint())).collect() }
    }

    /// `self + self*`.
    pub fn plus_adjoint(&self) -> Result<Self> {
        self.add(&self.adjoint())
    }

    fn concat<F>(&self, other: &Self, f: F) -> Result<Self>
    where
        F: Fn(&PiOperator, &PiOperator) -> std::result::Result<PiOperator, PiError> + Sync,
    {
        let constant = f(&self.constant, &other.constant)?;
        let za = PiOperator::zero(self.domain(), self.in_dims(), self.out_dims());
        let zb = PiOperator::zero(other.domain(), other.in_dims(), other.out_dims());
        let mut keys: Vec<VarId> = self.terms.keys().chain(other.terms.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        let terms: Vec<(VarId, PiOperator)> = keys
            .par_iter()
            .map(|k| {
                let a = self.terms.get(k).unwrap_or(&za);
                let b = other.terms.get(k).unwrap_or(&zb);
                Ok((*k, f(a, b)?))
            })
            .collect::<std::result::Result<_, PiError>>()?;
        Ok(Self { constant, terms: terms.into_iter().collect() })
    }

    pub fn vcat(&self, other: &Self) -> Result<Self> {
        self.concat(other, |a, b| a.vcat(b))
    }

    pub fn hcat(&self, other: &Self) -> Result<Self> {
        self.concat(other, |a, b| a.hcat(b))
    }

    /// `[a11 a12; a21 a22]` with real and distributed parts grouped.
    pub fn block2(a11: &Self, a12: &Self, a21: &Self, a22: &Self) -> Result<Self> {
        a11.hcat(a12)?.vcat(&a21.hcat(a22)?)
    }

    /// Trace of the finite (`P`) block.
    pub fn trace_p(&self) -> LinExpr {
        LinExpr {
            constant: self.constant.p().trace(),
            terms: self.terms.iter().map(|(&k, o)| (k, o.p().trace())).filter(|(_, v)| *v != 0.0).collect(),
        }
    }

    pub fn eval(&self, y: &[f64]) -> PiOperator {
        let mut out = self.constant.clone();
        for (&k, op) in &self.terms {
            if y[k] != 0.0 {
                out = out.add(&op.scale(y[k])).expect("terms share the expression shape");
            }
        }
        out
    }

    /// Largest kernel degree over the constant and all terms.
    pub fn degree(&self) -> u32 {
        self.terms.values().map(|o| o.degree()).fold(self.constant.degree(), u32::max)
    }

    /// Largest asymmetry `‖X − X*‖` over the constant and all terms,
    /// relative to the largest coefficient.
    pub fn relative_asymmetry(&self) -> f64 {
        let scale = self.terms.values().map(|o| o.max_abs()).fold(self.constant.max_abs(), f64::max).max(1e-300);
        self.terms.values().map(|o| o.asymmetry()).fold(self.constant.asymmetry(), f64::max) / scale
    }
}

/// Which polynomial blocks of a free operator variable carry unknowns.
#[derive(Debug, Clone)]
pub struct FreeTemplate {
    pub domain: Interval,
    pub input: Dims,
    pub output: Dims,
    pub p: bool,
    pub q1: Option<u32>,
    pub q2: Option<u32>,
    pub r0: Option<u32>,
    pub r1: Option<u32>,
    pub r2: Option<u32>,
}

impl FreeTemplate {
    pub fn empty(domain: Interval, input: Dims, output: Dims) -> Self {
        Self { domain, input, output, p: false, q1: None, q2: None, r0: None, r1: None, r2: None }
    }
}

/// Monomial content of the map `Π` in a positive variable `Π* M Π`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosBasis {
    /// Finite channels enter as `T_k(s) x` for `k ≤ finite`.
    pub finite: u32,
    /// Degree of the multiplier part, `None` to omit it.
    pub multiplier: Option<u32>,
    /// Total degree of the two integral parts, `None` to omit them.
    pub volterra: Option<u32>,
}

impl PosBasis {
    pub fn full(degree: u32) -> Self {
        Self { finite: 0, multiplier: Some(degree), volterra: Some(degree) }
    }
}

/// Symmetric matrix variable, entries stored upper-triangle column-major.
#[derive(Debug, Clone)]
pub struct SymMatrixVar {
    pub size: usize,
    pub ids: Vec<VarId>,
}

impl SymMatrixVar {
    pub fn entry(&self, i: usize, j: usize) -> VarId {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.ids[j * (j + 1) / 2 + i]
    }

    pub fn trace(&self) -> LinExpr {
        let mut e = LinExpr::default();
        for i in 0..self.size {
            e.terms.insert(self.entry(i, i), 1.0);
        }
        e
    }

    pub fn value(&self, y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.size, self.size, |i, j| y[self.entry(i, j)])
    }

    /// The matrix as an operator on `R^size`.
    pub fn as_expr(&self, domain: Interval) -> PiExpr {
        let n = self.size;
        let mut e = PiExpr::zero(domain, Dims::new(n, 0), Dims::new(n, 0));
        for j in 0..n {
            for i in 0..=j {
                let mut m = DMatrix::zeros(n, n);
                m[(i, j)] = 1.0;
                m[(j, i)] = 1.0;
                e.terms.insert(self.entry(i, j), PiOperator::matrix(domain, m));
            }
        }
        e
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LpiOptions {
    /// Extra degree given to every positivity slack beyond the automatic
    /// choice.
    pub slack_boost: u32,
    /// Relative size below which matched coefficients are treated as zero.
    pub prune_tol: f64,
}

impl Default for LpiOptions {
    fn default() -> Self {
        Self { slack_boost: 0, prune_tol: 1e-11 }
    }
}

/// Relative pivot size below which an equality row counts as dependent.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
struct EqRow {
    coeffs: Vec<(VarId, f64)>,
    rhs: f64,
}

#[derive(Debug, Clone)]
pub struct PsdConstraintInfo {
    pub label: String,
    pub slack_size: usize,
    pub equalities: usize,
}

/// An LPI under construction.
#[derive(Debug, Clone, Default)]
pub struct LpiProgram {
    n_vars: usize,
    psd: Vec<SymMatrixVar>,
    equalities: Vec<EqRow>,
    /// Expressions constrained to be `≥ 0`.
    inequalities: Vec<LinExpr>,
    objective: LinExpr,
    conflict: Option<String>,
    pub options: LpiOptions,
    pub constraint_log: Vec<PsdConstraintInfo>,
}

#[derive(Debug, Clone)]
pub struct Assignment {
    pub status: SolveStatus,
    pub objective: f64,
    pub y: Vec<f64>,
    pub tolerance: f64,
    pub backend: String,
}

impl Assignment {
    pub fn value(&self, e: &LinExpr) -> f64 {
        e.eval(&self.y)
    }

    pub fn materialize(&self, e: &PiExpr) -> PiOperator {
        e.eval(&self.y)
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

impl LpiProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_options(options: LpiOptions) -> Self {
        Self { options, ..Self::default() }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_equalities(&self) -> usize {
        self.equalities.len()
    }

    /// Matrix variables constrained PSD, in declaration order. The Gram
    /// matrix of a positive operator variable is pushed when it is declared.
    pub fn psd_vars(&self) -> &[SymMatrixVar] {
        &self.psd
    }

    pub fn decl_scalar(&mut self) -> VarId {
        self.n_vars += 1;
        self.n_vars - 1
    }

    pub fn decl_sym_matrix(&mut self, size: usize) -> SymMatrixVar {
        let ids = (0..size * (size + 1) / 2).map(|_| self.decl_scalar()).collect();
        SymMatrixVar { size, ids }
    }

    pub fn decl_psd_matrix(&mut self, size: usize) -> SymMatrixVar {
        let v = self.decl_sym_matrix(size);
        if size > 0 {
            self.psd.push(v.clone());
        }
        v
    }

    /// Positive operator `Π* M Π` on `R^m × L2^n` with `M ⪰ 0` and `Π`
    /// carrying multiplier and integral terms up to `degree`.
    pub fn decl_pos_pi_var(&mut self, dims: Dims, domain: Interval, degree: u32) -> Result<PiExpr> {
        self.decl_pos_pi_var_with(dims, domain, PosBasis::full(degree))
    }

    pub fn decl_pos_pi_var_with(&mut self, dims: Dims, domain: Interval, basis: PosBasis) -> Result<PiExpr> {
        let rows = pos_basis_rows(dims, domain, basis)?;
        let q = rows.len();
        let m = self.decl_psd_matrix(q);
        let pairs: Vec<(usize, usize)> = (0..q).flat_map(|j| (0..=j).map(move |i| (i, j))).collect();
        let adjoints: Vec<PiOperator> = rows.iter().map(|r| r.adjoint()).collect();
        let ops: Vec<(VarId, PiOperator)> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let c = adjoints[i].compose(&rows[j])?;
                let op = if i == j { c } else { c.add(&c.adjoint())? };
                Ok((m.entry(i, j), op))
            })
            .collect::<std::result::Result<_, PiError>>()?;
        let mut e = PiExpr::zero(domain, dims, dims);
        e.terms = ops.into_iter().filter(|(_, o)| !o.is_zero()).collect();
        Ok(e)
    }

    /// Operator variable with unknown coefficients in the blocks named by the
    /// template.
    pub fn decl_free_pi_var(&mut self, t: &FreeTemplate) -> Result<PiExpr> {
        let d = t.domain;
        let (i, o) = (t.input, t.output);
        let zero = PiOperator::zero(d, i, o);
        let mut e = PiExpr::constant(zero.clone());
        if t.p {
            for r in 0..o.m {
                for c in 0..i.m {
                    let mut m = DMatrix::zeros(o.m, i.m);
                    m[(r, c)] = 1.0;
                    let id = self.decl_scalar();
                    e.terms.insert(id, zero.clone().with_p(m)?);
                }
            }
        }
        let slots: [(usize, Option<u32>, usize, usize, Vars); 5] = [
            (1, t.q1, o.m, i.n, Vars::S),
            (2, t.q2, o.n, i.m, Vars::S),
            (3, t.r0, o.n, i.n, Vars::S),
            (4, t.r1, o.n, i.n, Vars::STheta),
            (5, t.r2, o.n, i.n, Vars::STheta),
        ];
        for (slot, deg, rows, cols, vars) in slots {
            let Some(deg) = deg else { continue };
            if deg > MAX_DEGREE {
                return Err(LpiError::DegreeTooHigh(deg));
            }
            for r in 0..rows {
                for c in 0..cols {
                    for a in 0..=deg {
                        let bmax = if vars == Vars::STheta { deg - a } else { 0 };
                        for b in 0..=bmax {
                            let mut m = DMatrix::zeros(rows, cols);
                            m[(r, c)] = 1.0;
                            let poly =
                                PolyMatrix::from_terms(rows, cols, vars, d, [((a, b), m)]).map_err(PiError::from)?;
                            let op = match slot {
                                1 => zero.clone().with_q1(poly)?,
                                2 => zero.clone().with_q2(poly)?,
                                3 => zero.clone().with_r0(poly)?,
                                4 => zero.clone().with_r1(poly)?,
                                _ => zero.clone().with_r2(poly)?,
                            };
                            let id = self.decl_scalar();
                            e.terms.insert(id, op);
                        }
                    }
                }
            }
        }
        Ok(e)
    }

    /// `expr ⪰ ε I`.
    pub fn constrain_psd(&mut self, expr: &PiExpr, eps: f64) -> Result<()> {
        let w = PiOperator::identity(expr.domain(), expr.out_dims());
        self.constrain_psd_weighted(expr, eps, &w, "psd")
    }

    /// `expr ⪯ −ε I`.
    pub fn constrain_nsd(&mut self, expr: &PiExpr, eps: f64) -> Result<()> {
        self.constrain_psd(&expr.negate(), eps)
    }

    /// `expr ⪰ ε W` for a fixed positive semidefinite weight `W`: introduces
    /// a slack `Q ∈ Π4+` and matches `expr − ε W = Q` coefficientwise.
    pub fn constrain_psd_weighted(&mut self, expr: &PiExpr, eps: f64, weight: &PiOperator, label: &str) -> Result<()> {
        if expr.in_dims() != expr.out_dims() {
            return Err(dims_err("positivity needs a square expression", expr.shape(), expr.shape()));
        }
        let asym = expr.relative_asymmetry();
        if asym > 1e-9 {
            return Err(LpiError::NotSelfAdjoint(asym));
        }
        let target = expr.add_const(&weight.scale(-eps))?;
        let basis = self.slack_basis(&target)?;
        let slack = self.decl_pos_pi_var_with(target.in_dims(), target.domain(), basis)?;
        let before = self.equalities.len();
        let diff = target.sub(&slack)?;
        self.match_coefficients(&diff, true);
        let slack_size = self.psd.last().map_or(0, |m| m.size);
        log::debug!(
            "{label}: slack {:?} of size {slack_size}, {} equalities, expression degree {}",
            basis,
            self.equalities.len() - before,
            target.degree()
        );
        self.constraint_log.push(PsdConstraintInfo {
            label: label.to_string(),
            slack_size,
            equalities: self.equalities.len() - before,
        });
        Ok(())
    }

    /// `a = b`, one scalar equality per block entry and monomial.
    pub fn constrain_eq(&mut self, a: &PiExpr, b: &PiExpr) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(dims_err("constrain_eq", a.shape(), b.shape()));
        }
        self.match_coefficients(&a.sub(b)?, false);
        Ok(())
    }

    /// `e ≥ 0`.
    pub fn constrain_nonneg(&mut self, e: LinExpr) {
        self.inequalities.push(e);
    }

    /// `a ≤ b`.
    pub fn constrain_le(&mut self, a: &LinExpr, b: &LinExpr) {
        self.inequalities.push(b.sub(a));
    }

    pub fn constrain_scalar_eq(&mut self, e: &LinExpr) {
        let coeffs: Vec<(VarId, f64)> = e.terms.iter().map(|(&k, &v)| (k, v)).filter(|(_, v)| *v != 0.0).collect();
        self.push_row(coeffs, -e.constant);
    }

    pub fn minimize(&mut self, e: LinExpr) {
        self.objective = e;
    }

    fn slack_basis(&self, target: &PiExpr) -> Result<PosBasis> {
        let ops = std::iter::once(&target.constant).chain(target.terms.values());
        let (mut deg_r0, mut deg_q, mut deg_r) = (None::<u32>, 0u32, 0u32);
        let (mut has_q, mut has_r) = (false, false);
        for op in ops {
            if !op.r0().is_zero() {
                deg_r0 = Some(deg_r0.unwrap_or(0).max(op.r0().degree()));
            }
            if !op.q1().is_zero() || !op.q2().is_zero() {
                has_q = true;
                deg_q = deg_q.max(op.q1().degree()).max(op.q2().degree());
            }
            if !op.r1().is_zero() || !op.r2().is_zero() {
                has_r = true;
                deg_r = deg_r.max(op.r1().degree()).max(op.r2().degree());
            }
        }
        let boost = self.options.slack_boost;
        let n = target.in_dims().n;
        if n == 0 {
            return Ok(PosBasis { finite: 0, multiplier: None, volterra: None });
        }
        let multiplier = deg_r0.map(|d| d.div_ceil(2) + boost);
        let volterra =
            if has_r || multiplier.is_none() { Some(deg_r.saturating_sub(1).div_ceil(2).max(1) + boost) } else { None };
        let reach = multiplier.unwrap_or(0).max(volterra.map_or(0, |v| v + 1));
        let finite = if has_q && target.in_dims().m > 0 { deg_q.min(MAX_DEGREE - reach) } else { 0 };
        for d in [multiplier, volterra].into_iter().flatten() {
            if 2 * d + 1 > MAX_DEGREE {
                return Err(LpiError::DegreeTooHigh(2 * d + 1));
            }
        }
        Ok(PosBasis { finite, multiplier, volterra })
    }

    fn push_row(&mut self, coeffs: Vec<(VarId, f64)>, rhs: f64) {
        let scale = coeffs.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
        if scale == 0.0 {
            if rhs.abs() > 1e-9 {
                self.conflict.get_or_insert_with(|| format!("constant equality 0 = {rhs:.3e}"));
            }
            return;
        }
        let coeffs = coeffs.into_iter().map(|(k, v)| (k, v / scale)).collect();
        self.equalities.push(EqRow { coeffs, rhs: rhs / scale });
    }

    /// Emits `diff = 0` coefficientwise in the shifted Chebyshev basis. For
    /// self-adjoint differences only the independent coefficients are
    /// matched.
    fn match_coefficients(&mut self, diff: &PiExpr, symmetric: bool) {
        type Key = (u8, usize, usize, u32, u32);
        let mut rows: HashMap<Key, (Vec<(VarId, f64)>, f64)> = HashMap::new();
        let mut global: f64 = 0.0;
        let conv = monomial_chebyshev(MAX_DEGREE as usize, diff.domain());
        let mut visit = |op: &PiOperator, var: Option<VarId>, rows: &mut HashMap<Key, (Vec<(VarId, f64)>, f64)>| {
            let mut put = |key: Key, v: f64| {
                if v == 0.0 {
                    return;
                }
                global = global.max(v.abs());
                let row = rows.entry(key).or_insert_with(|| (Vec::new(), 0.0));
                match var {
                    Some(k) => row.0.push((k, v)),
                    None => row.1 -= v,
                }
            };
            let p = op.p();
            for c in 0..p.ncols() {
                for r in 0..p.nrows() {
                    if !symmetric || r <= c {
                        put((0, r, c, 0, 0), p[(r, c)]);
                    }
                }
            }
            let blocks: [(u8, &PolyMatrix, bool); 5] = [
                (1, op.q1(), true),
                (2, op.q2(), !symmetric),
                (3, op.r0(), true),
                (4, op.r1(), true),
                (5, op.r2(), !symmetric),
            ];
            for (slot, blk, keep) in blocks {
                if !keep {
                    continue;
                }
                for (&(i, j), m) in &to_chebyshev(blk, &conv) {
                    for c in 0..m.ncols() {
                        for r in 0..m.nrows() {
                            if symmetric && slot == 3 && r > c {
                                continue;
                            }
                            put((slot, r, c, i, j), m[(r, c)]);
                        }
                    }
                }
            }
        };
        visit(&diff.constant, None, &mut rows);
        for (&k, op) in &diff.terms {
            visit(op, Some(k), &mut rows);
        }
        let tol = self.options.prune_tol * global;
        let mut keys: Vec<Key> = rows.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let (coeffs, rhs) = rows.remove(&key).expect("key present");
            let coeffs: Vec<(VarId, f64)> = coeffs.into_iter().filter(|(_, v)| v.abs() > tol).collect();
            let rhs = if rhs.abs() > tol { rhs } else { 0.0 };
            self.push_row(coeffs, rhs);
        }
    }

    /// Indices of a maximal independent subset of the equality rows, and
    /// whether the dropped rows are consistent with it.
    fn independent_equalities(&self) -> (Vec<usize>, bool) {
        let n_eq = self.equalities.len();
        if n_eq == 0 {
            return (Vec::new(), true);
        }
        let mut at = DMatrix::<f64>::zeros(self.n_vars + 1, n_eq);
        for (r, row) in self.equalities.iter().enumerate() {
            for &(k, v) in &row.coeffs {
                at[(k, r)] += v;
            }
            at[(self.n_vars, r)] = row.rhs;
        }
        let rank_of = |m: DMatrix<f64>| -> (usize, Vec<usize>) {
            let qr = m.col_piv_qr();
            let r = qr.r();
            let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|k| r[(k, k)].abs()).collect();
            let top = diag.first().copied().unwrap_or(0.0);
            let rank = diag.iter().take_while(|&&d| d > RANK_TOL * top).count();
            let mut idx = DMatrix::from_fn(1, n_eq, |_, j| j as f64);
            qr.p().permute_columns(&mut idx);
            let mut kept: Vec<usize> = idx.iter().take(rank).map(|&v| v as usize).collect();
            kept.sort_unstable();
            (rank, kept)
        };
        let (rank, kept) = rank_of(at.rows(0, self.n_vars).into_owned());
        let (rank_aug, _) = rank_of(at);
        if rank < n_eq {
            log::debug!("dropped {} dependent equalities", n_eq - rank);
        }
        (kept, rank_aug == rank)
    }

    /// Lowers the program to an SDP in SDPA form.
    pub fn compile(&self) -> SdpInstance {
        self.compile_rows(&self.independent_equalities().0)
    }

    fn compile_rows(&self, kept: &[usize]) -> SdpInstance {
        let mut inst = SdpInstance::new(self.n_vars);
        for (&k, &v) in &self.objective.terms {
            inst.objective[k] += v;
        }
        if !kept.is_empty() {
            let mut b = SdpBlock::new(BlockKind::Zero, kept.len());
            for (r, row) in kept.iter().map(|&i| &self.equalities[i]).enumerate() {
                for &(k, v) in &row.coeffs {
                    b.push(k + 1, r, r, v);
                }
                if row.rhs != 0.0 {
                    b.push(0, r, r, row.rhs);
                }
            }
            inst.blocks.push(b);
        }
        if !self.inequalities.is_empty() {
            let mut b = SdpBlock::new(BlockKind::Nonneg, self.inequalities.len());
            for (r, e) in self.inequalities.iter().enumerate() {
                for (&k, &v) in &e.terms {
                    b.push(k + 1, r, r, v);
                }
                if e.constant != 0.0 {
                    b.push(0, r, r, -e.constant);
                }
            }
            inst.blocks.push(b);
        }
        for m in &self.psd {
            let mut b = SdpBlock::new(BlockKind::Psd, m.size);
            for j in 0..m.size {
                for i in 0..=j {
                    b.push(m.entry(i, j) + 1, i, j, 1.0);
                }
            }
            inst.blocks.push(b);
        }
        inst
    }

    pub fn solve(&self, backend: &dyn SdpBackend) -> Result<Assignment> {
        if let Some(reason) = &self.conflict {
            log::info!("program is structurally infeasible: {reason}");
            return Ok(Assignment {
                status: SolveStatus::Infeasible,
                objective: f64::NAN,
                y: vec![0.0; self.n_vars],
                tolerance: 0.0,
                backend: backend.name().to_string(),
            });
        }
        let (kept, consistent) = self.independent_equalities();
        if !consistent {
            log::info!("coefficient equalities are inconsistent");
            return Ok(Assignment {
                status: SolveStatus::Infeasible,
                objective: f64::NAN,
                y: vec![0.0; self.n_vars],
                tolerance: 0.0,
                backend: backend.name().to_string(),
            });
        }
        let inst = self.compile_rows(&kept);
        log::debug!(
            "solving SDP: {} variables, {} equalities, {} inequalities, PSD sizes {:?}",
            self.n_vars,
            self.equalities.len(),
            self.inequalities.len(),
            self.psd.iter().map(|m| m.size).collect::<Vec<_>>()
        );
        let sol = backend.solve(&inst)?;
        Ok(Assignment {
            status: sol.status,
            objective: sol.objective + self.objective.constant,
            y: sol.y,
            tolerance: sol.tolerance,
            backend: backend.name().to_string(),
        })
    }
}

/// Kernel coefficients with respect to `T_i(s) T_j(θ)`.
fn to_chebyshev(p: &PolyMatrix, conv: &DMatrix<f64>) -> BTreeMap<(u32, u32), DMatrix<f64>> {
    let mut out: BTreeMap<(u32, u32), DMatrix<f64>> = BTreeMap::new();
    for (&(e, f), m) in p.coeffs() {
        for i in 0..=e as usize {
            let ci = conv[(e as usize, i)];
            if ci == 0.0 {
                continue;
            }
            for j in 0..=f as usize {
                let cj = conv[(f as usize, j)];
                if cj == 0.0 {
                    continue;
                }
                let entry = out.entry((i as u32, j as u32)).or_insert_with(|| DMatrix::zeros(m.nrows(), m.ncols()));
                *entry += m * (ci * cj);
            }
        }
    }
    out
}

/// Rows of the map `Π : R^m × L2^n → L2^q` underlying a positive variable.
/// The finite part enters through Chebyshev polynomials `T_k(s) x / √L`;
/// the distributed part through Chebyshev multipliers `T_k(s)` and integral
/// kernels `T_i(s) T_j(θ)` on `[a, s]` and `[s, b]`.
pub fn pos_basis_rows(dims: Dims, domain: Interval, basis: PosBasis) -> Result<Vec<PiOperator>> {
    for d in [basis.multiplier, basis.volterra].into_iter().flatten() {
        if 2 * d + 1 > MAX_DEGREE {
            return Err(LpiError::DegreeTooHigh(2 * d + 1));
        }
    }
    let reach = basis.multiplier.unwrap_or(0).max(basis.volterra.map_or(0, |v| v + 1));
    if dims.m > 0 && basis.finite + reach > MAX_DEGREE {
        return Err(LpiError::DegreeTooHigh(basis.finite + reach));
    }
    let out = Dims::new(0, 1);
    let zero = PiOperator::zero(domain, dims, out);
    let mut rows = Vec::new();
    let inv_sqrt_len = 1.0 / domain.len().sqrt();
    let dmax = basis.multiplier.unwrap_or(0).max(basis.volterra.unwrap_or(0)).max(basis.finite) as usize;
    let mono = chebyshev_monomials(dmax, domain);
    for f in 0..=basis.finite as usize {
        for k in 0..dims.m {
            let terms = (0..=f).filter(|&e| mono[(f, e)] != 0.0).map(|e| {
                let mut m = DMatrix::zeros(1, dims.m);
                m[(0, k)] = inv_sqrt_len * mono[(f, e)];
                ((e as u32, 0), m)
            });
            let q2 = PolyMatrix::from_terms(1, dims.m, Vars::S, domain, terms).map_err(PiError::from)?;
            rows.push(zero.clone().with_q2(q2)?);
        }
    }
    let uni = |k: usize, var_theta: bool, c: usize| -> Vec<((u32, u32), DMatrix<f64>)> {
        (0..=k)
            .filter(|&e| mono[(k, e)] != 0.0)
            .map(|e| {
                let mut m = DMatrix::zeros(1, dims.n);
                m[(0, c)] = mono[(k, e)];
                let key = if var_theta { (0, e as u32) } else { (e as u32, 0) };
                (key, m)
            })
            .collect()
    };
    let poly = |terms: Vec<((u32, u32), DMatrix<f64>)>, vars: Vars| {
        PolyMatrix::from_terms(1, dims.n, vars, domain, terms).map_err(PiError::from)
    };
    if let Some(d1) = basis.multiplier {
        for k in 0..=d1 as usize {
            for c in 0..dims.n {
                rows.push(zero.clone().with_r0(poly(uni(k, false, c), Vars::S)?)?);
            }
        }
    }
    if let Some(d2) = basis.volterra {
        for lower in [true, false] {
            for i in 0..=d2 as usize {
                for j in 0..=(d2 as usize - i) {
                    for c in 0..dims.n {
                        let si = poly(uni(i, false, c), Vars::STheta)?;
                        let mut tj = DMatrix::zeros(dims.n, dims.n);
                        tj[(c, c)] = 1.0;
                        let tj = PolyMatrix::from_terms(
                            dims.n,
                            dims.n,
                            Vars::STheta,
                            domain,
                            (0..=j).filter(|&e| mono[(j, e)] != 0.0).map(|e| ((0, e as u32), &tj * mono[(j, e)])),
                        )
                        .map_err(PiError::from)?;
                        let kernel = si.mul(&tj).map_err(PiError::from)?;
                        let op = if lower { zero.clone().with_r1(kernel)? } else { zero.clone().with_r2(kernel)? };
                        rows.push(op);
                    }
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::ClarabelBackend;

    #[test]
    fn scalar_lower_bound() {
        let mut prog = LpiProgram::new();
        let g = prog.decl_scalar();
        prog.constrain_nonneg(LinExpr::var(g).sub(&LinExpr::constant(5.0)));
        prog.minimize(LinExpr::var(g));
        let sol = prog.solve(&ClarabelBackend::default()).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.objective - 5.0).abs() < 1e-6);
    }

    #[test]
    fn trace_of_matrix_above_diagonal() {
        let d = Interval::unit();
        let mut prog = LpiProgram::new();
        let w = prog.decl_sym_matrix(2);
        let lower = PiOperator::matrix(d, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
        let e = w.as_expr(d).add_const(&lower.negate()).unwrap();
        prog.constrain_psd(&e, 0.0).unwrap();
        prog.minimize(w.trace());
        let sol = prog.solve(&ClarabelBackend::default()).unwrap();
        assert!((sol.objective - 3.0).abs() < 1e-6, "{}", sol.objective);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let d = Interval::unit();
        let mut prog = LpiProgram::new();
        let t = FreeTemplate { p: true, ..FreeTemplate::empty(d, Dims::new(1, 0), Dims::new(1, 0)) };
        let x = prog.decl_free_pi_var(&t).unwrap();
        let one = PiOperator::identity(d, Dims::new(1, 0));
        prog.constrain_psd(&x.add_const(&one.negate()).unwrap(), 0.0).unwrap();
        prog.constrain_nsd(&x, 0.0).unwrap();
        let sol = prog.solve(&ClarabelBackend::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn free_template_counts() {
        let d = Interval::unit();
        let mut prog = LpiProgram::new();
        let t = FreeTemplate { p: true, q2: Some(3), ..FreeTemplate::empty(d, Dims::new(2, 0), Dims::new(1, 2)) };
        let z = prog.decl_free_pi_var(&t).unwrap();
        assert_eq!(z.var_count(), 2 + 2 * 2 * 4);
        let empty = prog.decl_free_pi_var(&FreeTemplate::empty(d, Dims::new(1, 1), Dims::new(1, 1))).unwrap();
        assert!(empty.var_count() == 0 && empty.constant_part().is_zero());
    }

    #[test]
    fn equality_matching_counts() {
        let d = Interval::unit();
        let mut prog = LpiProgram::new();
        let t = FreeTemplate { r1: Some(1), ..FreeTemplate::empty(d, Dims::new(0, 1), Dims::new(0, 1)) };
        let x = prog.decl_free_pi_var(&t).unwrap();
        let before = prog.n_equalities();
        prog.constrain_eq(&x, &x).unwrap();
        assert_eq!(prog.n_equalities(), before);
        // degree-1 bivariate kernel has 3 monomials
        let zero = PiExpr::zero(d, Dims::new(0, 1), Dims::new(0, 1));
        prog.constrain_eq(&x, &zero).unwrap();
        assert_eq!(prog.n_equalities(), before + 3);
    }
}
