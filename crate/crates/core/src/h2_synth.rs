//! H2-norm bounds and H2-optimal estimator synthesis as LPIs, gain
//! reconstruction and certificate re-verification.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::lpi::{FreeTemplate, LinExpr, LpiError, LpiProgram, PiExpr, SymMatrixVar, VarId};
use crate::pi_op::{chebyshev_points, invert_pi_best_effort, ChebInterp, Dims, PiError, PiOperator, ProbeBasis};
use crate::pie_model::{ObserverGain, PieSystem};
use crate::poly::{PolyError, PolyMatrix, ThetaRange, Vars};
use crate::quadrature::{GaussLegendre, DEFAULT_NODES};
use crate::sdp::{SdpBackend, SdpInstance, SolveStatus};

#[derive(Debug, Error)]
pub enum H2Error {
    #[error(transparent)]
    Lpi(#[from] LpiError),
    #[error(transparent)]
    Pi(#[from] PiError),
    #[error("no certificate found up to degree {degree}")]
    Infeasible { degree: u32 },
    #[error("solver failed with status {0}")]
    Solver(SolveStatus),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, H2Error>;

#[derive(Debug, Clone, Copy)]
pub struct H2Options {
    /// Degree of the positive operator variable.
    pub degree: u32,
    /// Degree tried when `degree` is infeasible.
    pub max_degree: u32,
    pub eps: f64,
    /// Relative residual accepted for the operator inverse.
    pub gain_tol: f64,
    /// Starting kernel degree of the operator inverse.
    pub inverse_degree: u32,
    /// Degree of the distributed block of `Z`; defaults to `2 d + 1`.
    pub z_degree: Option<u32>,
}

impl Default for H2Options {
    fn default() -> Self {
        Self { degree: 2, max_degree: 4, eps: 1e-4, gain_tol: 1e-4, inverse_degree: 8, z_degree: None }
    }
}

impl H2Options {
    fn degrees(&self) -> Vec<u32> {
        let mut d = vec![self.degree];
        if self.max_degree > self.degree {
            d.push(self.max_degree);
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gramian,
    Schur,
}

#[derive(Debug, Clone)]
pub struct NormCertificate {
    pub method: Method,
    /// Bound on the H2 norm (for the gramian form, the square root of the
    /// optimal trace bound).
    pub gamma: f64,
    pub p: PiOperator,
    /// `W` for the Schur form; `B1* P B1` for the gramian form.
    pub w: DMatrix<f64>,
    pub eps: f64,
    pub degree: u32,
    pub status: SolveStatus,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub gamma: f64,
    pub p: PiOperator,
    pub z: PiOperator,
    pub w: DMatrix<f64>,
    pub gain: ObserverGain,
    pub inversion_residual: f64,
    pub inversion_degree: u32,
    /// `‖P L u − Z u‖ / ‖Z u‖` over unit measurement directions.
    pub gain_residual: f64,
    /// False when the inverse missed `gain_tol`; the gain is still returned.
    pub residual_ok: bool,
    pub eps: f64,
    pub degree: u32,
    pub status: SolveStatus,
    pub tolerance: f64,
}

/// Weight for strict operator inequalities on a PIE with state `x`:
/// `blockdiag(I, T* T)`, so that `X ⪯ −ε W` bounds the decay of the
/// physical state `T x`. Equals the identity when `T = I`.
pub fn strictness_weight(sys: &PieSystem, nz: usize) -> Result<PiOperator> {
    let d = sys.domain();
    let tt = sys.t.adjoint().compose(&sys.t)?;
    Ok(PiOperator::identity(d, Dims::new(nz, 0)).blockdiag(&tt)?)
}

/// Handles into a built program.
pub struct Built {
    pub prog: LpiProgram,
    pub p: PiExpr,
    pub w: Option<SymMatrixVar>,
    pub gamma: VarId,
    pub z: Option<PiExpr>,
    pub gram: Option<PiExpr>,
    pub degree: u32,
}

impl Built {
    pub fn compile(&self) -> SdpInstance {
        self.prog.compile()
    }
}

fn positive_state_var(prog: &mut LpiProgram, sys: &PieSystem, degree: u32, opts: &H2Options) -> Result<PiExpr> {
    let d = sys.domain();
    let x = sys.state_dims();
    let p = prog.decl_pos_pi_var(x, d, degree)?;
    Ok(p.add_const(&PiOperator::identity(d, x).scale(opts.eps))?)
}

/// `trace(B1* P B1) ≤ g`, `A* P T + T* P A + C1* C1 ⪯ −ε W`, minimize `g`.
pub fn gramian_program(sys: &PieSystem, opts: &H2Options, degree: u32) -> Result<Built> {
    let mut prog = LpiProgram::new();
    let p = positive_state_var(&mut prog, sys, degree, opts)?;
    let g = prog.decl_scalar();
    let gram = p.compose_left(&sys.b1.adjoint())?.compose_right(&sys.b1)?;
    prog.constrain_le(&gram.trace_p(), &LinExpr::var(g));
    let tpa = p.compose_right(&sys.a)?.compose_left(&sys.t.adjoint())?;
    let c1c1 = sys.c1.adjoint().compose(&sys.c1)?;
    let lyap = tpa.plus_adjoint()?.add_const(&c1c1)?;
    let weight = strictness_weight(sys, 0)?;
    prog.constrain_psd_weighted(&lyap.negate(), opts.eps, &weight, "lyapunov")?;
    prog.minimize(LinExpr::var(g));
    Ok(Built { prog, p, w: None, gamma: g, z: None, gram: Some(gram), degree })
}

/// Block-operator form: `[−γI, C1; C1*, X] ⪯ −ε W`,
/// `[W, B*P; P B, P] ⪰ ε I`, `trace(W) ≤ γ`, where `X` and `B` depend on
/// whether an estimator gain is being designed.
fn block_program(sys: &PieSystem, opts: &H2Options, degree: u32, estimator: bool) -> Result<Built> {
    let d = sys.domain();
    let x = sys.state_dims();
    let (nw, nz, ny) = (sys.nw(), sys.nz(), sys.ny());
    let mut prog = LpiProgram::new();
    let p = positive_state_var(&mut prog, sys, degree, opts)?;
    let w = prog.decl_sym_matrix(nw);
    let gamma = prog.decl_scalar();

    let z = if estimator {
        if ny == 0 {
            return Err(H2Error::Invalid("estimator synthesis needs at least one measurement".into()));
        }
        let zd = opts.z_degree.unwrap_or(2 * degree + 1);
        let t = FreeTemplate { p: x.m > 0, q2: (x.n > 0).then_some(zd), ..FreeTemplate::empty(d, Dims::new(ny, 0), x) };
        Some(prog.decl_free_pi_var(&t)?)
    } else {
        None
    };

    // X = T* (P A + Z C2) + (..)*
    let mut inner = p.compose_right(&sys.a)?;
    if let Some(z) = &z {
        inner = inner.add(&z.compose_right(&sys.c2)?)?;
    }
    let x22 = inner.compose_left(&sys.t.adjoint())?.plus_adjoint()?;
    let c1 = PiExpr::constant(sys.c1.clone());
    let x11 = PiExpr::from_term(gamma, PiOperator::identity(d, Dims::new(nz, 0)).negate());
    let h1 = PiExpr::block2(&x11, &c1, &c1.adjoint(), &x22)?;
    let weight = strictness_weight(sys, nz)?;
    prog.constrain_psd_weighted(&h1.negate(), opts.eps, &weight, "performance")?;

    // P B1 (+ Z D21)
    let mut pb = p.compose_right(&sys.b1)?;
    if let Some(z) = &z {
        pb = pb.add(&z.compose_right(&PiOperator::matrix(d, sys.d21.clone()))?)?;
    }
    let h2 = PiExpr::block2(&w.as_expr(d), &pb.adjoint(), &pb, &p)?;
    let id = PiOperator::identity(d, h2.out_dims());
    prog.constrain_psd_weighted(&h2, opts.eps, &id, "gramian")?;

    prog.constrain_le(&w.trace(), &LinExpr::var(gamma));
    prog.minimize(LinExpr::var(gamma));
    Ok(Built { prog, p, w: Some(w), gamma, z, gram: None, degree })
}

pub fn schur_program(sys: &PieSystem, opts: &H2Options, degree: u32) -> Result<Built> {
    block_program(sys, opts, degree, false)
}

pub fn estimator_program(sys: &PieSystem, opts: &H2Options, degree: u32) -> Result<Built> {
    block_program(sys, opts, degree, true)
}

fn solve_escalating<F>(opts: &H2Options, backend: &dyn SdpBackend, build: F) -> Result<(Built, crate::lpi::Assignment)>
where
    F: Fn(u32) -> Result<Built>,
{
    let mut last_degree = opts.degree;
    let mut failure = None;
    for degree in opts.degrees() {
        last_degree = degree;
        let built = build(degree)?;
        let sol = built.prog.solve(backend)?;
        log::info!("degree {degree}: status {}, objective {:.6e}", sol.status, sol.objective);
        match sol.status {
            SolveStatus::Optimal => return Ok((built, sol)),
            SolveStatus::Infeasible => {}
            s => failure = Some(s),
        }
    }
    match failure {
        Some(s) => Err(H2Error::Solver(s)),
        None => Err(H2Error::Infeasible { degree: last_degree }),
    }
}

/// Margins at or below this count as "no certificate".
pub const MARGIN_TOL: f64 = 1e-4;

/// Largest `δ` with `P ⪰ δ I` and `T* (P A + Z C2) + (..)* ⪯ −δ W`
/// (`Z = 0` unless `estimator`), over `P = Π* M Π` of the given degree
/// with `trace(M) ≤ 1`. The program is always feasible and bounded, so
/// its sign decides whether a stability certificate exists at that degree.
pub fn certificate_margin(sys: &PieSystem, degree: u32, estimator: bool, backend: &dyn SdpBackend) -> Result<f64> {
    let d = sys.domain();
    let x = sys.state_dims();
    let mut prog = LpiProgram::new();
    let p = prog.decl_pos_pi_var(x, d, degree)?;
    let gram = prog.psd_vars().last().map(|m| m.trace());
    if let Some(tr) = gram {
        prog.constrain_le(&tr, &LinExpr::constant(1.0));
    }
    let delta = prog.decl_scalar();
    prog.constrain_le(&LinExpr::var(delta), &LinExpr::constant(1.0));
    let mut inner = p.compose_right(&sys.a)?;
    if estimator && sys.ny() > 0 {
        let t = FreeTemplate {
            p: x.m > 0,
            q2: (x.n > 0).then_some(2 * degree + 1),
            ..FreeTemplate::empty(d, Dims::new(sys.ny(), 0), x)
        };
        let z = prog.decl_free_pi_var(&t)?;
        inner = inner.add(&z.compose_right(&sys.c2)?)?;
    }
    let lyap = inner.compose_left(&sys.t.adjoint())?.plus_adjoint()?;
    let weight = strictness_weight(sys, 0)?;
    let id = PiOperator::identity(d, x);
    let lower = p.add(&PiExpr::from_term(delta, id.negate()))?;
    prog.constrain_psd(&lower, 0.0)?;
    let decay = lyap.negate().add(&PiExpr::from_term(delta, weight.negate()))?;
    prog.constrain_psd(&decay, 0.0)?;
    prog.minimize(LinExpr::var(delta).scale(-1.0));
    let sol = prog.solve(backend)?;
    log::info!("certificate margin at degree {degree}: status {}, delta {:.3e}", sol.status, -sol.objective);
    match sol.status {
        SolveStatus::Optimal => Ok(sol.value(&LinExpr::var(delta))),
        s => Err(H2Error::Solver(s)),
    }
}

/// Turns a solver failure into `Infeasible` when no stability certificate
/// exists at the largest attempted degree.
fn classify_failure<T>(
    res: Result<T>,
    sys: &PieSystem,
    opts: &H2Options,
    estimator: bool,
    backend: &dyn SdpBackend,
) -> Result<T> {
    match res {
        Err(H2Error::Solver(status)) => {
            let degree = opts.degree.max(opts.max_degree);
            match certificate_margin(sys, degree, estimator, backend) {
                Ok(m) if m <= MARGIN_TOL => {
                    log::info!("solver status {status}; margin {m:.3e} shows no certificate exists");
                    Err(H2Error::Infeasible { degree })
                }
                _ => Err(H2Error::Solver(status)),
            }
        }
        other => other,
    }
}

/// Minimizes `γ²` subject to the operator Lyapunov inequality with `P ⪰ εI`.
pub fn h2_bound_gramian(sys: &PieSystem, opts: &H2Options, backend: &dyn SdpBackend) -> Result<NormCertificate> {
    let solved = solve_escalating(opts, backend, |deg| gramian_program(sys, opts, deg));
    let (built, sol) = classify_failure(solved, sys, opts, false, backend)?;
    let gram = built.gram.as_ref().expect("gramian program");
    Ok(NormCertificate {
        method: Method::Gramian,
        gamma: sol.objective.max(0.0).sqrt(),
        p: sol.materialize(&built.p),
        w: sol.materialize(gram).p().clone(),
        eps: opts.eps,
        degree: built.degree,
        status: sol.status,
        tolerance: sol.tolerance,
    })
}

/// Minimizes `γ` subject to the block-operator inequalities.
pub fn h2_bound_schur(sys: &PieSystem, opts: &H2Options, backend: &dyn SdpBackend) -> Result<NormCertificate> {
    let solved = solve_escalating(opts, backend, |deg| schur_program(sys, opts, deg));
    let (built, sol) = classify_failure(solved, sys, opts, false, backend)?;
    let w = built.w.as_ref().expect("schur program");
    Ok(NormCertificate {
        method: Method::Schur,
        gamma: sol.value(&LinExpr::var(built.gamma)),
        p: sol.materialize(&built.p),
        w: w.value(&sol.y),
        eps: opts.eps,
        degree: built.degree,
        status: sol.status,
        tolerance: sol.tolerance,
    })
}

/// Minimizes the H2 bound of the estimator error dynamics over `P`, `Z`
/// and `W`, then reconstructs `L = P⁻¹ Z`.
pub fn synthesize_estimator(sys: &PieSystem, opts: &H2Options, backend: &dyn SdpBackend) -> Result<SynthesisResult> {
    let solved = solve_escalating(opts, backend, |deg| estimator_program(sys, opts, deg));
    let (built, sol) = classify_failure(solved, sys, opts, true, backend)?;
    let p = sol.materialize(&built.p);
    let z = sol.materialize(built.z.as_ref().expect("estimator program"));
    let rec = reconstruct_gain(&p, &z, opts.inverse_degree, opts.gain_tol)?;
    if !rec.residual_ok {
        log::warn!(
            "inverse residual {:.3e} above tolerance {:.1e}; gain returned anyway",
            rec.inversion_residual,
            opts.gain_tol
        );
    }
    Ok(SynthesisResult {
        gamma: sol.value(&LinExpr::var(built.gamma)),
        p,
        z,
        w: built.w.as_ref().expect("estimator program").value(&sol.y),
        gain: rec.gain,
        inversion_residual: rec.inversion_residual,
        inversion_degree: rec.inversion_degree,
        gain_residual: rec.gain_residual,
        residual_ok: rec.residual_ok,
        eps: opts.eps,
        degree: built.degree,
        status: sol.status,
        tolerance: sol.tolerance,
    })
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub gain: ObserverGain,
    pub inverse: PiOperator,
    pub inversion_residual: f64,
    pub inversion_degree: u32,
    pub gain_residual: f64,
    pub residual_ok: bool,
}

/// `L = P̂ Z` for `Z = [Z1 ∅; Z2 ∅]` with `P̂ ≈ P⁻¹`:
/// `L1 = P̂ Z1 + ∫ Q̂1 Z2`,
/// `L2 = Q̂2 Z1 + R̂0 Z2 + ∫_a^s R̂1 Z2 + ∫_s^b R̂2 Z2`.
pub fn reconstruct_gain(p: &PiOperator, z: &PiOperator, inverse_degree: u32, tol: f64) -> Result<Reconstruction> {
    if z.in_dims().n != 0 || z.out_dims() != p.in_dims() {
        return Err(H2Error::Invalid("Z must map R^ny into the state space of P".into()));
    }
    let inv = invert_pi_best_effort(p, inverse_degree, tol)?;
    let gain = gain_from_inverse(&inv.op, z)?;
    let gain_residual = gain_residual(p, z, &gain)?;
    Ok(Reconstruction {
        gain,
        inverse: inv.op,
        inversion_residual: inv.residual,
        inversion_degree: inv.degree,
        gain_residual,
        residual_ok: inv.residual <= tol,
    })
}

/// Applies the two closed-form gain formulas. Falls back to quadrature and
/// Chebyshev interpolation when exact products would exceed the degree cap.
pub fn gain_from_inverse(inv: &PiOperator, z: &PiOperator) -> Result<ObserverGain> {
    match gain_exact(inv, z) {
        Ok(g) => Ok(g),
        Err(H2Error::Pi(PiError::Poly(PolyError::DegreeOverflow(_)))) => gain_by_quadrature(inv, z),
        Err(e) => Err(e),
    }
}

fn gain_exact(inv: &PiOperator, z: &PiOperator) -> Result<ObserverGain> {
    let d = inv.domain();
    let z1 = z.p();
    let z2 = z.q2();
    let z2t = z2.swap_vars();
    let pe = |e: PolyError| H2Error::Pi(PiError::Poly(e));
    let l1 = inv.p() * z1 + inv.q1().mul(z2).map_err(pe)?.integrate_full_s().map_err(pe)?;
    let l2 = inv
        .q2()
        .mul(&PolyMatrix::constant(z1.clone(), d))
        .map_err(pe)?
        .add(&inv.r0().mul(z2).map_err(pe)?)
        .map_err(pe)?
        .add(&inv.r1().mul(&z2t).map_err(pe)?.integrate(ThetaRange::LowerToS).map_err(pe)?)
        .map_err(pe)?
        .add(&inv.r2().mul(&z2t).map_err(pe)?.integrate(ThetaRange::SToUpper).map_err(pe)?)
        .map_err(pe)?;
    Ok(ObserverGain { l1, l2: l2.with_vars(Vars::S).map_err(pe)? })
}

fn gain_by_quadrature(inv: &PiOperator, z: &PiOperator) -> Result<ObserverGain> {
    let d = inv.domain();
    let ny = z.in_dims().m;
    let x = inv.in_dims();
    let samples = crate::poly::MAX_DEGREE as usize + 1;
    let pts = chebyshev_points(samples, d);
    let mut l1 = DMatrix::zeros(x.m, ny);
    let mut cols: Vec<Vec<DVector<f64>>> = Vec::new();
    for k in 0..ny {
        let u = DVector::from_fn(ny, |i, _| if i == k { 1.0 } else { 0.0 });
        let zx = z.p() * &u;
        let zf = |s: f64| z.q2().eval(s, s).expect("in domain") * &u;
        let (fin, dist) = inv.apply_fn(&zx, &zf, &pts);
        l1.set_column(k, &fin);
        cols.push(dist);
    }
    // Chebyshev interpolation, then monomials
    let mono = crate::basis::chebyshev_monomials(samples - 1, d);
    let mut terms: Vec<((u32, u32), DMatrix<f64>)> = Vec::new();
    for (k, dist) in cols.iter().enumerate() {
        let interp = ChebInterp::from_samples(dist, d);
        let coeffs = interp.coefficients();
        for (j, c) in coeffs.iter().enumerate() {
            for e in 0..=j {
                let w = mono[(j, e)];
                if w == 0.0 {
                    continue;
                }
                let mut m = DMatrix::zeros(x.n, ny);
                m.set_column(k, &(c * w));
                terms.push(((e as u32, 0), m));
            }
        }
    }
    let l2 = PolyMatrix::from_terms(x.n, ny, Vars::S, d, terms).map_err(PiError::from)?;
    Ok(ObserverGain { l1, l2 })
}

/// `max_u ‖P L u − Z u‖ / ‖Z u‖` over unit measurement directions.
pub fn gain_residual(p: &PiOperator, z: &PiOperator, gain: &ObserverGain) -> Result<f64> {
    let d = p.domain();
    let gl = GaussLegendre::new(DEFAULT_NODES, d.a(), d.b());
    let ny = gain.ny();
    let mut worst: f64 = 0.0;
    for k in 0..ny {
        let u = DVector::from_fn(ny, |i, _| if i == k { 1.0 } else { 0.0 });
        let lx = &gain.l1 * &u;
        let lf = |s: f64| gain.l2.eval(s, s).expect("in domain") * &u;
        let (fin, dist) = p.apply_fn(&lx, &lf, &gl.nodes);
        let zx = z.p() * &u;
        let mut err = (&fin - &zx).norm_squared();
        let mut nrm = zx.norm_squared();
        for (q, &s) in gl.nodes.iter().enumerate() {
            let zv = z.q2().eval(s, s).expect("in domain") * &u;
            err += gl.weights[q] * (&dist[q] - &zv).norm_squared();
            nrm += gl.weights[q] * zv.norm_squared();
        }
        if nrm > 0.0 {
            worst = worst.max((err / nrm).sqrt());
        } else {
            worst = worst.max(err.sqrt());
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// block positivity diagnostics

/// Outcome of comparing `[P Q*; Q R] ≻ εI` with `P ≻ εI`,
/// `R − Q* P⁻¹ Q ≻ εI`.
#[derive(Debug, Clone)]
pub struct SchurReport {
    pub block_min: f64,
    pub p_min: f64,
    pub complement_min: f64,
    pub block_positive: bool,
    pub schur_positive: bool,
    pub inversion_residual: f64,
    pub conclusive: bool,
}

impl SchurReport {
    pub fn agree(&self) -> bool {
        self.block_positive == self.schur_positive
    }
}

/// Evaluates both sides of the block Schur-complement equivalence on a
/// Legendre subspace of the given degree (exact when all operators are
/// matrices).
pub fn schur_consistency_check(
    p: &PiOperator,
    q: &PiOperator,
    r: &PiOperator,
    eps: f64,
    degree: usize,
) -> Result<SchurReport> {
    let block = p.hcat(&q.adjoint())?.vcat(&q.hcat(r)?)?;
    let block_min = block.min_ritz_value(degree);
    let p_min = p.min_ritz_value(degree);
    let (complement_min, inversion_residual) = if p_min > 0.0 {
        let inv = invert_pi_best_effort(p, 8, 1e-8)?;
        let comp = r.sub(&q.compose(&inv.op.compose(&q.adjoint())?)?)?;
        (comp.min_ritz_value(degree), inv.residual)
    } else {
        (f64::NEG_INFINITY, 0.0)
    };
    Ok(SchurReport {
        block_min,
        p_min,
        complement_min,
        block_positive: block_min > eps,
        schur_positive: p_min > eps && complement_min > eps,
        inversion_residual,
        conclusive: inversion_residual < 1e-6,
    })
}

// ---------------------------------------------------------------------------
// certificate re-verification

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Smallest normalized quadratic form `⟨f, X f⟩ / ‖f‖²` seen; `X` is
    /// the operator that must be positive semidefinite.
    pub worst_margin: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
    pub threshold: f64,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Smallest `⟨f, X f⟩ / ‖f‖²` over random polynomial probes.
pub fn probe_min_quadratic(x: &PiOperator, probes: usize, degree: usize, seed: u64) -> f64 {
    let d = x.domain();
    let dims = x.in_dims();
    let gl = GaussLegendre::new(DEFAULT_NODES, d.a(), d.b());
    let basis = ProbeBasis::legendre(d, dims, degree);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..probes {
        let c = DVector::from_fn(basis.len(), |_, _| rng.gen_range(-1.0..1.0));
        let fx = DVector::from_fn(dims.m, |i, _| c[i]);
        let f = |s: f64| basis.combine(&c, s);
        let (yx, ydist) = x.apply_fn(&fx, &f, &gl.nodes);
        let mut q = fx.dot(&yx);
        let mut nrm = fx.norm_squared();
        for (k, &s) in gl.nodes.iter().enumerate() {
            let fv = f(s);
            q += gl.weights[k] * fv.dot(&ydist[k]);
            nrm += gl.weights[k] * fv.norm_squared();
        }
        if nrm > 0.0 {
            worst = worst.min(q / nrm);
        }
    }
    worst
}

const PROBE_DEGREE: usize = 6;

fn check(name: &str, x: &PiOperator, probes: usize, threshold: f64, seed: u64) -> CheckResult {
    let worst = probe_min_quadratic(x, probes, PROBE_DEGREE, seed);
    CheckResult { name: name.to_string(), worst_margin: worst, passed: worst >= -threshold }
}

fn scalar_check(name: &str, margin: f64, threshold: f64) -> CheckResult {
    CheckResult { name: name.to_string(), worst_margin: margin, passed: margin >= -threshold }
}

/// Re-evaluates the inequalities of a norm certificate with the solved
/// operators and probes them with random functions.
pub fn verify_norm_certificate(sys: &PieSystem, cert: &NormCertificate, probes: usize) -> Result<VerificationReport> {
    let d = sys.domain();
    let threshold = 10.0 * cert.tolerance;
    let x = sys.state_dims();
    let mut checks = Vec::new();
    let p_shift = cert.p.sub(&PiOperator::identity(d, x).scale(cert.eps))?;
    checks.push(check("P - eps I", &p_shift, probes, threshold, 1));
    let tpa = sys.t.adjoint().compose(&cert.p.compose(&sys.a)?)?;
    let lyap = tpa.add(&tpa.adjoint())?;
    match cert.method {
        Method::Gramian => {
            let c1c1 = sys.c1.adjoint().compose(&sys.c1)?;
            let w = strictness_weight(sys, 0)?.scale(cert.eps);
            let x1 = lyap.add(&c1c1)?.add(&w)?.negate();
            checks.push(check("-(A*PT + T*PA + C1*C1) - eps T*T", &x1, probes, threshold, 2));
            let gram = sys.b1.adjoint().compose(&cert.p.compose(&sys.b1)?)?;
            let margin = cert.gamma * cert.gamma - gram.p().trace();
            checks.push(scalar_check("gamma^2 - trace(B1*PB1)", margin, threshold));
        }
        Method::Schur => {
            let nz = sys.nz();
            let h1 = block_performance(sys, &lyap, cert.gamma, nz)?;
            let w = strictness_weight(sys, nz)?.scale(cert.eps);
            checks.push(check("-H1 - eps W", &h1.add(&w)?.negate(), probes, threshold, 2));
            let pb = cert.p.compose(&sys.b1)?;
            let h2 = block_gramian(d, &cert.w, &pb, &cert.p)?;
            let id = PiOperator::identity(d, h2.in_dims()).scale(cert.eps);
            checks.push(check("H2 - eps I", &h2.sub(&id)?, probes, threshold, 3));
            checks.push(scalar_check("gamma - trace(W)", cert.gamma - cert.w.trace(), threshold));
        }
    }
    Ok(VerificationReport { checks, threshold })
}

fn block_performance(sys: &PieSystem, x22: &PiOperator, gamma: f64, nz: usize) -> Result<PiOperator> {
    let d = sys.domain();
    let x11 = PiOperator::identity(d, Dims::new(nz, 0)).scale(-gamma);
    Ok(x11.hcat(&sys.c1)?.vcat(&sys.c1.adjoint().hcat(x22)?)?)
}

fn block_gramian(d: crate::poly::Interval, w: &DMatrix<f64>, pb: &PiOperator, p: &PiOperator) -> Result<PiOperator> {
    let w = PiOperator::matrix(d, w.clone());
    Ok(w.hcat(&pb.adjoint())?.vcat(&pb.hcat(p)?)?)
}

/// Re-evaluates the estimator inequalities with the solved `P`, `Z`, `W`
/// and `γ`, and the H2 bound of the error system with the reconstructed
/// gain.
pub fn verify_synthesis(sys: &PieSystem, res: &SynthesisResult, probes: usize) -> Result<VerificationReport> {
    let d = sys.domain();
    let threshold = 10.0 * res.tolerance;
    let x = sys.state_dims();
    let nz = sys.nz();
    let mut checks = Vec::new();
    let p_shift = res.p.sub(&PiOperator::identity(d, x).scale(res.eps))?;
    checks.push(check("P - eps I", &p_shift, probes, threshold, 11));
    let inner = res.p.compose(&sys.a)?.add(&res.z.compose(&sys.c2)?)?;
    let tx = sys.t.adjoint().compose(&inner)?;
    let x22 = tx.add(&tx.adjoint())?;
    let h1 = block_performance(sys, &x22, res.gamma, nz)?;
    let w = strictness_weight(sys, nz)?.scale(res.eps);
    checks.push(check("-H1 - eps W", &h1.add(&w)?.negate(), probes, threshold, 12));
    let pb = res.p.compose(&sys.b1)?.add(&res.z.compose(&PiOperator::matrix(d, sys.d21.clone()))?)?;
    let h2 = block_gramian(d, &res.w, &pb, &res.p)?;
    let id = PiOperator::identity(d, h2.in_dims()).scale(res.eps);
    checks.push(check("H2 - eps I", &h2.sub(&id)?, probes, threshold, 13));
    checks.push(scalar_check("gamma - trace(W)", res.gamma - res.w.trace(), threshold));
    Ok(VerificationReport { checks, threshold })
}

// ---------------------------------------------------------------------------
// reports

pub fn norm_report(cert: &NormCertificate, verification: Option<&VerificationReport>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method: {:?}", cert.method);
    let _ = writeln!(out, "status: {}", cert.status);
    let _ = writeln!(out, "gamma: {:.8}", cert.gamma);
    let _ = writeln!(out, "trace(W): {:.8}", cert.w.trace());
    let _ = writeln!(out, "eps: {:e}", cert.eps);
    let _ = writeln!(out, "degree: {}", cert.degree);
    let _ = writeln!(out, "solver tolerance: {:e}", cert.tolerance);
    if let Some(v) = verification {
        write_verification(&mut out, v);
    }
    out
}

pub fn synthesis_report(res: &SynthesisResult, verification: Option<&VerificationReport>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "status: {}", res.status);
    let _ = writeln!(out, "gamma: {:.8}", res.gamma);
    let _ = writeln!(out, "trace(W): {:.8}", res.w.trace());
    let _ = writeln!(out, "eps: {:e}", res.eps);
    let _ = writeln!(out, "degree: {}", res.degree);
    let _ = writeln!(out, "solver tolerance: {:e}", res.tolerance);
    let _ = writeln!(out, "inverse degree: {}", res.inversion_degree);
    let _ = writeln!(out, "inversion residual: {:.3e}", res.inversion_residual);
    let _ = writeln!(out, "gain residual: {:.3e}", res.gain_residual);
    let _ = writeln!(out, "residual within tolerance: {}", res.residual_ok);
    if res.gain.l1.nrows() > 0 {
        let _ = writeln!(out, "L1: {:?}", res.gain.l1.as_slice());
    }
    if let Some(v) = verification {
        write_verification(&mut out, v);
    }
    out
}

fn write_verification(out: &mut String, v: &VerificationReport) {
    let _ = writeln!(out, "re-verification (threshold {:.1e}):", v.threshold);
    for c in &v.checks {
        let _ = writeln!(out, "  {:<40} {:>+.3e} {}", c.name, c.worst_margin, if c.passed { "ok" } else { "FAIL" });
    }
}
