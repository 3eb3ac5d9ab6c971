//! Chebyshev–Galerkin projection of PIEs and fixed-step RK4 integration of
//! plants and Luenberger observers.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use plotters::prelude::*;
use thiserror::Error;

use crate::pi_op::{galerkin, Dims, PiError, PiOperator, ProbeBasis, Rl2Function};
use crate::pie_model::{InitialCondition, ObserverGain, PieSystem, Signal};
use crate::poly::PolyMatrix;
use crate::quadrature::{GaussLegendre, DEFAULT_NODES};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("mass matrix is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("solution blew up at t = {0}")]
    Blowup(f64),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Pi(#[from] PiError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("plotting failed: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub const DEFAULT_ORDER: usize = 8;
pub const MAX_CONDITION: f64 = 1e12;
const GRID_POINTS: usize = 41;
const BLOWUP: f64 = 1e150;
/// `|λ| dt` kept below this on every RK4 sub-step (the method's stability
/// interval on the imaginary axis ends at `2√2`).
const RK4_REACH: f64 = 2.5;

/// Galerkin matrices of a PIE on the span of `T_0 … T_N` per distributed
/// channel (plus unit vectors for the finite part).
#[derive(Debug, Clone)]
pub struct ProjectedSystem {
    pub order: usize,
    pub basis: ProbeBasis,
    pub mass: DMatrix<f64>,
    pub dynamics: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub d21: DMatrix<f64>,
    /// Uniform grid on which physical fields are reconstructed.
    pub grid: Vec<f64>,
    /// Rows: finite part of `T φ_j`, then channel `c` at grid point `k` in
    /// row `m + c · grid.len() + k`.
    pub field_map: DMatrix<f64>,
    pub mass_condition: f64,
    system: PieSystem,
    /// `M_T⁻¹ M_A` and `M_T⁻¹ M_B`, absent when the mass matrix is
    /// ill-conditioned.
    reduced: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

fn finite_basis(sys: &PieSystem, m: usize) -> ProbeBasis {
    ProbeBasis::chebyshev(sys.domain(), Dims::new(m, 0), 0)
}

fn condition(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn project(sys: &PieSystem, order: usize) -> ProjectedSystem {
    let d = sys.domain();
    let x = sys.state_dims();
    let basis = ProbeBasis::chebyshev(d, x, order);
    let mass = galerkin(&sys.t, &basis, &basis);
    let dynamics = galerkin(&sys.a, &basis, &basis);
    let input = galerkin(&sys.b1, &basis, &finite_basis(sys, sys.nw()));
    let c1 = galerkin(&sys.c1, &finite_basis(sys, sys.nz()), &basis);
    let c2 = galerkin(&sys.c2, &finite_basis(sys, sys.ny()), &basis);
    let grid: Vec<f64> = (0..GRID_POINTS).map(|k| d.a() + d.len() * k as f64 / (GRID_POINTS - 1) as f64).collect();
    let mut field_map = DMatrix::zeros(x.m + x.n * grid.len(), basis.len());
    for j in 0..basis.len() {
        let xf = basis.finite_part(j);
        let f = |s: f64| basis.dist_matrix(s).column(j).into_owned();
        let (fin, dist) = sys.t.apply_fn(&xf, &f, &grid);
        for i in 0..x.m {
            field_map[(i, j)] = fin[i];
        }
        for (k, v) in dist.iter().enumerate() {
            for c in 0..x.n {
                field_map[(x.m + c * grid.len() + k, j)] = v[c];
            }
        }
    }
    let mass_condition = condition(&mass);
    let reduced = if mass_condition <= MAX_CONDITION {
        let lu = mass.clone().lu();
        match (lu.solve(&dynamics), lu.solve(&input)) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        }
    } else {
        None
    };
    ProjectedSystem {
        order,
        basis,
        mass,
        dynamics,
        input,
        c1,
        c2,
        d21: sys.d21.clone(),
        grid,
        field_map,
        mass_condition,
        system: sys.clone(),
        reduced,
    }
}

impl ProjectedSystem {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn system(&self) -> &PieSystem {
        &self.system
    }

    fn reduced(&self) -> Result<&(DMatrix<f64>, DMatrix<f64>)> {
        self.reduced.as_ref().ok_or(SimError::IllConditioned(self.mass_condition))
    }

    /// Coefficients `c` minimizing `‖T Φ c − ξ‖` for a physical field `ξ`.
    pub fn fit_initial(&self, xi: &InitialCondition) -> Result<DVector<f64>> {
        let sys = &self.system;
        if xi.dims() != sys.state_dims() {
            return Err(SimError::Invalid(format!(
                "initial condition has dims {:?}, state has {:?}",
                xi.dims(),
                sys.state_dims()
            )));
        }
        let tt = sys.t.adjoint().compose(&sys.t)?;
        let gram = galerkin(&tt, &self.basis, &self.basis);
        let txi = sys.t.adjoint().apply(xi)?;
        let rhs = project_function(&self.basis, &txi);
        let svd = gram.svd(true, true);
        svd.solve(&rhs, 1e-14 * svd.singular_values.max()).map_err(|e| SimError::Invalid(e.to_string()))
    }

    /// `G` with `cᵀ G c = Σ_c w_c ‖(T Φ c)_c‖²`, weights per distributed
    /// channel; finite components get unit weight.
    pub fn energy_matrix(&self, weights: &[f64]) -> Result<DMatrix<f64>> {
        let sys = &self.system;
        let x = sys.state_dims();
        if weights.len() != x.n {
            return Err(SimError::Invalid(format!("{} weights for {} channels", weights.len(), x.n)));
        }
        let wd = DMatrix::from_diagonal(&DVector::from_row_slice(weights));
        let weight = PiOperator::zero(sys.domain(), x, x)
            .with_p(DMatrix::identity(x.m, x.m))?
            .with_r0(PolyMatrix::constant(wd, sys.domain()))?;
        let op = sys.t.adjoint().compose(&weight.compose(&sys.t)?)?;
        Ok(galerkin(&op, &self.basis, &self.basis))
    }

    /// Galerkin matrix of an observer gain, `⟨φ_i, L e_k⟩`.
    pub fn gain_matrix(&self, gain: &ObserverGain) -> Result<DMatrix<f64>> {
        let op = gain.to_operator()?;
        Ok(galerkin(&op, &self.basis, &finite_basis(&self.system, gain.ny())))
    }

    fn field(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.field_map * c
    }

    /// `‖T Φ c‖` in `R^m × L2^n`.
    fn field_norm(&self, gram: &DMatrix<f64>, c: &DVector<f64>) -> f64 {
        c.dot(&(gram * c)).max(0.0).sqrt()
    }
}

/// `⟨φ_i, f⟩` for an exact polynomial function.
fn project_function(basis: &ProbeBasis, f: &Rl2Function) -> DVector<f64> {
    let d = basis.domain;
    let gl = GaussLegendre::new(DEFAULT_NODES, d.a(), d.b());
    let mut out = DVector::zeros(basis.len());
    for i in 0..basis.dims.m {
        out[i] = f.finite[i];
    }
    for (&s, &w) in gl.nodes.iter().zip(&gl.weights) {
        out += (basis.dist_matrix(s).transpose() * f.eval(s)) * w;
    }
    out
}

fn rk4<F>(f: &F, t: f64, x: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * dt, &(x + &k1 * (0.5 * dt)));
    let k3 = f(t + 0.5 * dt, &(x + &k2 * (0.5 * dt)));
    let k4 = f(t + dt, &(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Number of equal RK4 sub-steps per output step so that `ρ(J) h` stays
/// inside the stability region.
pub fn substeps(jacobian: &DMatrix<f64>, dt: f64) -> usize {
    if jacobian.is_empty() {
        return 1;
    }
    let rho = jacobian.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !rho.is_finite() {
        return 1;
    }
    ((rho * dt / RK4_REACH).ceil() as usize).max(1)
}

fn advance<F>(f: &F, t: f64, x: &DVector<f64>, dt: f64, sub: usize) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let h = dt / sub as f64;
    let mut x = x.clone();
    for i in 0..sub {
        x = rk4(f, t + i as f64 * h, &x, h);
    }
    x
}

fn step_count(dt: f64, t_final: f64) -> Result<usize> {
    let valid = dt > 0.0 && t_final >= 0.0 && dt.is_finite() && t_final.is_finite();
    if !valid {
        return Err(SimError::Invalid(format!("invalid time grid dt = {dt}, T = {t_final}")));
    }
    Ok((t_final / dt).round() as usize)
}

fn check_finite(x: &DVector<f64>, t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite() && v.abs() < BLOWUP) {
        Ok(())
    } else {
        Err(SimError::Blowup(t))
    }
}

/// Estimator signals recorded alongside the plant.
#[derive(Debug, Clone, Default)]
pub struct ObserverTrace {
    pub state: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    /// `T x̃ − T x` in the layout of [`Trajectory::field`].
    pub error_field: Vec<DVector<f64>>,
    pub error_norm: Vec<f64>,
    pub e_z: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub grid: Vec<f64>,
    pub dims: Dims,
    /// PIE-state coefficients.
    pub state: Vec<DVector<f64>>,
    /// Physical state `T x`: finite part, then each channel on the grid.
    pub field: Vec<DVector<f64>>,
    /// `‖T x‖` in `R^m × L2^n`.
    pub field_norm: Vec<f64>,
    pub z: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub observer: Option<ObserverTrace>,
    /// RK4 sub-steps taken per recorded step.
    pub substeps: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Values of channel `c` of a field vector on the grid.
    pub fn channel<'a>(&self, field: &'a DVector<f64>, c: usize) -> &'a [f64] {
        let g = self.grid.len();
        let start = self.dims.m + c * g;
        &field.as_slice()[start..start + g]
    }

    /// `max_s |·|` over all distributed channels and the finite part.
    pub fn sup_norm(&self, field: &DVector<f64>) -> f64 {
        field.amax()
    }

    /// `cᵀ G c` at each recorded step.
    pub fn quadratic(&self, g: &DMatrix<f64>) -> Vec<f64> {
        self.state.iter().map(|c| c.dot(&(g * c))).collect()
    }

    fn interpolate(&self, field: &DVector<f64>, c: usize, s: f64) -> f64 {
        let vals = self.channel(field, c);
        let g = &self.grid;
        let n = g.len();
        if n == 1 {
            return vals[0];
        }
        let h = (g[n - 1] - g[0]) / (n - 1) as f64;
        let pos = ((s - g[0]) / h).clamp(0.0, (n - 1) as f64);
        let k = (pos.floor() as usize).min(n - 2);
        let frac = pos - k as f64;
        vals[k] * (1.0 - frac) + vals[k + 1] * frac
    }
}

/// Integrates `M_T ẋ = M_A x + M_B w(t)` from the least-squares fit of the
/// physical initial field. Outputs are recorded every `dt`; each step is
/// split into [`substeps`] fixed RK4 steps.
pub fn simulate(
    proj: &ProjectedSystem,
    w: &Signal,
    x0: &InitialCondition,
    dt: f64,
    t_final: f64,
) -> Result<Trajectory> {
    let (a, b) = proj.reduced()?;
    let steps = step_count(dt, t_final)?;
    let sys = proj.system();
    let nw = sys.nw();
    let gram = proj.energy_matrix(&vec![1.0; sys.state_dims().n])?;
    let f = |t: f64, x: &DVector<f64>| a * x + b * w.eval(t, nw);
    let sub = substeps(a, dt);
    let mut x = proj.fit_initial(x0)?;
    let mut traj = Trajectory { grid: proj.grid.clone(), dims: sys.state_dims(), substeps: sub, ..Default::default() };
    for k in 0..=steps {
        let t = k as f64 * dt;
        check_finite(&x, t)?;
        let wt = w.eval(t, nw);
        traj.times.push(t);
        traj.field.push(proj.field(&x));
        traj.field_norm.push(proj.field_norm(&gram, &x));
        traj.z.push(&proj.c1 * &x);
        traj.y.push(&proj.c2 * &x + &proj.d21 * &wt);
        traj.state.push(x.clone());
        if k < steps {
            x = advance(&f, t, &x, dt, sub);
        }
    }
    Ok(traj)
}

/// Co-integrates the plant (driven by `w`) and the observer
/// `∂t(T x̃) = A x̃ + L (C2 x̃ − y)` from `x̃(0) = 0`.
pub fn simulate_observer(
    plant: &PieSystem,
    gain: &ObserverGain,
    w: &Signal,
    plant_ic: &InitialCondition,
    order: usize,
    dt: f64,
    t_final: f64,
) -> Result<Trajectory> {
    if gain.ny() != plant.ny() || gain.l1.nrows() != plant.state_dims().m || gain.l2.rows() != plant.state_dims().n {
        return Err(SimError::Invalid("observer gain does not match the plant".into()));
    }
    let proj = project(plant, order);
    let (a, b) = proj.reduced()?;
    let lu = proj.mass.clone().lu();
    let l = lu.solve(&proj.gain_matrix(gain)?).ok_or(SimError::IllConditioned(proj.mass_condition))?;
    let steps = step_count(dt, t_final)?;
    let nw = plant.nw();
    let dim = proj.dim();
    let gram = proj.energy_matrix(&vec![1.0; plant.state_dims().n])?;
    let (c2, d21) = (&proj.c2, &proj.d21);
    let f = |t: f64, s: &DVector<f64>| {
        let x = s.rows(0, dim);
        let xe = s.rows(dim, dim);
        let wt = w.eval(t, nw);
        let y = c2 * x + d21 * &wt;
        let dx = a * x + b * &wt;
        let dxe = a * xe + &l * (c2 * xe - y);
        let mut out = DVector::zeros(2 * dim);
        out.rows_mut(0, dim).copy_from(&dx);
        out.rows_mut(dim, dim).copy_from(&dxe);
        out
    };
    let mut joint = DMatrix::zeros(2 * dim, 2 * dim);
    joint.view_mut((0, 0), (dim, dim)).copy_from(a);
    joint.view_mut((dim, 0), (dim, dim)).copy_from(&(-(&l * c2)));
    joint.view_mut((dim, dim), (dim, dim)).copy_from(&(a + &l * c2));
    let sub = substeps(&joint, dt);
    let x0 = proj.fit_initial(plant_ic)?;
    let mut s = DVector::zeros(2 * dim);
    s.rows_mut(0, dim).copy_from(&x0);
    let mut traj =
        Trajectory { grid: proj.grid.clone(), dims: plant.state_dims(), substeps: sub, ..Default::default() };
    let mut obs = ObserverTrace::default();
    for k in 0..=steps {
        let t = k as f64 * dt;
        check_finite(&s, t)?;
        let x: DVector<f64> = s.rows(0, dim).into_owned();
        let xe: DVector<f64> = s.rows(dim, dim).into_owned();
        let wt = w.eval(t, nw);
        let field = proj.field(&x);
        let z = &proj.c1 * &x;
        let ze = &proj.c1 * &xe;
        let e = &xe - &x;
        traj.times.push(t);
        traj.field_norm.push(proj.field_norm(&gram, &x));
        obs.error_field.push(proj.field(&xe) - &field);
        obs.error_norm.push(proj.field_norm(&gram, &e));
        obs.e_z.push(&ze - &z);
        obs.z.push(ze);
        obs.state.push(xe);
        traj.field.push(field);
        traj.y.push(&proj.c2 * &x + &proj.d21 * &wt);
        traj.z.push(z);
        traj.state.push(x);
        if k < steps {
            s = advance(&f, t, &s, dt, sub);
        }
    }
    traj.observer = Some(obs);
    Ok(traj)
}

/// `∫_0^T ‖z‖² dt` of the undisturbed system started from the PIE state
/// `x(0) = B1 v`, trapezoid rule on the output samples.
pub fn direction_energy(sys: &PieSystem, v: &DVector<f64>, order: usize, dt: f64, t_final: f64) -> Result<f64> {
    if v.len() != sys.nw() {
        return Err(SimError::Invalid(format!("direction has length {}, system has {} inputs", v.len(), sys.nw())));
    }
    let x0 = Rl2Function::new(v.clone(), crate::poly::PolyMatrix::zeros(0, 1, crate::poly::Vars::S, sys.domain()))?;
    let ic = sys.t.compose(&sys.b1)?.apply(&x0)?;
    let traj = simulate(&project(sys, order), &Signal::Zero, &ic, dt, t_final)?;
    let z = &traj.z;
    Ok((1..z.len()).map(|k| 0.5 * dt * (z[k].norm_squared() + z[k - 1].norm_squared())).sum())
}

/// `sup_{|v| = 1} (∫ ‖z‖²)^{1/2}` over the auxiliary initial-value
/// problems, with `v` on a uniform grid of `directions` points of the
/// half circle (`nw = 2`) or `v = 1` (`nw = 1`).
pub fn direction_supremum(sys: &PieSystem, directions: usize, order: usize, dt: f64, t_final: f64) -> Result<f64> {
    let dirs: Vec<DVector<f64>> = match sys.nw() {
        1 => vec![DVector::from_element(1, 1.0)],
        2 => (0..directions.max(1))
            .map(|k| {
                let th = std::f64::consts::PI * k as f64 / directions.max(1) as f64;
                DVector::from_vec(vec![th.cos(), th.sin()])
            })
            .collect(),
        nw => return Err(SimError::Invalid(format!("direction grid needs one or two inputs, got {nw}"))),
    };
    let mut best = 0.0f64;
    for v in &dirs {
        best = best.max(direction_energy(sys, v, order, dt, t_final)?);
    }
    Ok(best.sqrt())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.to_path_buf(), source }
}

/// Writes `t, z, z_est, e_z` and one column per station. Station columns
/// hold the error field when an observer was simulated, else the plant
/// field, of distributed channel `channel`. Multi-output signals use their
/// first component.
pub fn emit_csv(traj: &Trajectory, path: &Path, stations: &[f64], channel: usize) -> Result<()> {
    let csv_err = |e: csv::Error| SimError::Io { path: path.to_path_buf(), source: e.into() };
    let mut out = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t".to_string(), "z".into(), "z_est".into(), "e_z".into()];
    header.extend(stations.iter().map(|s| format!("s={s}")));
    out.write_record(&header).map_err(csv_err)?;
    let first = |v: Option<&DVector<f64>>| v.and_then(|v| v.get(0).copied());
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let obs = traj.observer.as_ref();
    for k in 0..traj.len() {
        let mut row = vec![
            fmt(Some(traj.times[k])),
            fmt(first(traj.z.get(k))),
            fmt(first(obs.and_then(|o| o.z.get(k)))),
            fmt(first(obs.and_then(|o| o.e_z.get(k)))),
        ];
        let field = obs.map_or(&traj.field[k], |o| &o.error_field[k]);
        for &s in stations {
            let v = (channel < traj.dims.n).then(|| traj.interpolate(field, channel, s));
            row.push(fmt(v));
        }
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush().map_err(io_err(path))?;
    Ok(())
}

/// Two SVG panels: `<prefix>_field.svg` (field, or estimation error, at
/// the stations over time) and `<prefix>_output.svg` (`z` against its
/// estimate). Returns the written paths.
pub fn emit_plots(traj: &Trajectory, prefix: &Path, stations: &[f64], channel: usize) -> Result<Vec<PathBuf>> {
    let with_suffix = |suffix: &str| {
        let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(suffix);
        prefix.with_file_name(name)
    };
    let field_path = with_suffix("_field.svg");
    let output_path = with_suffix("_output.svg");
    let obs = traj.observer.as_ref();
    let title = if obs.is_some() { "estimation error T e(t, s)" } else { "state T x(t, s)" };
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    if channel < traj.dims.n {
        for &s in stations {
            let pts = (0..traj.len())
                .map(|k| {
                    let field = obs.map_or(&traj.field[k], |o| &o.error_field[k]);
                    (traj.times[k], traj.interpolate(field, channel, s))
                })
                .collect();
            series.push((format!("s = {s}"), pts));
        }
    }
    line_plot(&field_path, title, &series)?;
    let mut outputs = vec![(
        "z".to_string(),
        (0..traj.len()).map(|k| (traj.times[k], traj.z[k].get(0).copied().unwrap_or(0.0))).collect(),
    )];
    if let Some(o) = obs {
        outputs.push((
            "z estimate".to_string(),
            (0..traj.len()).map(|k| (traj.times[k], o.z[k].get(0).copied().unwrap_or(0.0))).collect(),
        ));
    }
    line_plot(&output_path, "regulated output", &outputs)?;
    Ok(vec![field_path, output_path])
}

fn line_plot(path: &Path, title: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| SimError::Plot(format!("{}: {e}", path.display()));
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, -1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-12);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_err(&e))?;
    chart.configure_mesh().x_desc("t").draw().map_err(|e| plot_err(&e))?;
    for (i, (label, p)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(p.iter().copied(), color))
            .map_err(|e| plot_err(&e))?
            .label(label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pie_model::ode_system;
    use crate::poly::{Interval, Vars};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn unit_ic(sys: &PieSystem) -> InitialCondition {
        Rl2Function::new(DVector::from_element(1, 1.0), Rl2Function::zero(Dims::new(1, 0), sys.domain()).dist).unwrap()
    }

    #[test]
    fn volterra_projection_matches_independent_quadrature() {
        let d = Interval::unit();
        let x = Dims::new(0, 1);
        let r1 = PolyMatrix::constant(DMatrix::from_element(1, 1, 1.0), d).with_vars(Vars::STheta).unwrap();
        let volterra = PiOperator::zero(d, x, x).with_r1(r1).unwrap();
        let id = PiOperator::identity(d, x);
        let zero_in = PiOperator::zero(d, Dims::new(1, 0), x);
        let zero_out = PiOperator::zero(d, x, Dims::new(1, 0));
        let sys = PieSystem::new(id, volterra, zero_in, zero_out.clone(), zero_out, DMatrix::zeros(1, 1)).unwrap();
        let proj = project(&sys, 4);
        // composite Simpson on a fine grid, with the inner integral
        // accumulated by the trapezoid rule on a finer one
        let cheb = |k: usize, s: f64| (k as f64 * (2.0 * s - 1.0).clamp(-1.0, 1.0).acos()).cos();
        let n = 20_000;
        let h = 1.0 / n as f64;
        for j in 0..5 {
            let mut inner = vec![0.0; n + 1];
            for k in 1..=n {
                let (s0, s1) = ((k - 1) as f64 * h, k as f64 * h);
                let mid = 0.5 * (s0 + s1);
                inner[k] = inner[k - 1] + h / 6.0 * (cheb(j, s0) + 4.0 * cheb(j, mid) + cheb(j, s1));
            }
            for i in 0..5 {
                let mut acc = 0.0;
                for k in 0..=n {
                    let w = if k == 0 || k == n {
                        1.0
                    } else if k % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    acc += w * cheb(i, k as f64 * h) * inner[k];
                }
                acc *= h / 3.0;
                assert!((proj.dynamics[(i, j)] - acc).abs() < 1e-10, "({i}, {j}): {} vs {acc}", proj.dynamics[(i, j)]);
            }
        }
        let gram = &proj.mass;
        assert!((gram[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((gram[(1, 1)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_dynamics_keep_the_state() {
        let sys = ode_system(scalar(0.0), scalar(0.0), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
        let traj = simulate(&project(&sys, 2), &Signal::Zero, &unit_ic(&sys), 0.01, 1.0).unwrap();
        assert!(traj.state.iter().all(|x| (x[0] - 1.0).abs() < 1e-14));
    }

    #[test]
    fn zero_gain_on_a_resting_plant_gives_zero_error() {
        let sys = ode_system(scalar(-1.0), scalar(1.0), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
        let gain = ObserverGain::zero(Dims::new(1, 0), 1, sys.domain());
        let ic = Rl2Function::zero(Dims::new(1, 0), sys.domain());
        let traj = simulate_observer(&sys, &gain, &Signal::Zero, &ic, 2, 0.01, 1.0).unwrap();
        assert!(traj.observer.unwrap().e_z.iter().all(|e| e[0] == 0.0));
    }

    #[test]
    fn singular_mass_is_rejected() {
        let sys = ode_system(scalar(-1.0), scalar(1.0), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
        let mut proj = project(&sys, 2);
        proj.reduced = None;
        assert!(matches!(simulate(&proj, &Signal::Zero, &unit_ic(&sys), 0.01, 1.0), Err(SimError::IllConditioned(_))));
    }

    #[test]
    fn blowup_reports_time() {
        let sys = ode_system(scalar(400.0), scalar(0.0), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
        match simulate(&project(&sys, 2), &Signal::Zero, &unit_ic(&sys), 0.001, 5.0) {
            Err(SimError::Blowup(t)) => assert!(t > 0.5 && t < 1.0, "{t}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        emit_csv(&Trajectory::default(), &path, &[0.5], 0).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "t,z,z_est,e_z,s=0.5\n");
        let sys = ode_system(scalar(-1.0), scalar(1.0), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
        let traj = simulate(&project(&sys, 2), &Signal::Zero, &unit_ic(&sys), 0.1, 1.0).unwrap();
        let path = dir.path().join("run.csv");
        emit_csv(&traj, &path, &[0.1, 0.9], 0).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 12);
        assert!(text.lines().all(|l| l.split(',').count() == 3 + 2 + 1));
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let sys = ode_system(scalar(-1.0), scalar(0.0), scalar(1.0), scalar(1.0), scalar(0.0)).unwrap();
        let proj = project(&sys, 4);
        let traj = simulate(&proj, &Signal::Zero, &unit_ic(&sys), 0.002, 1.0).unwrap();
        let last = traj.state.last().unwrap()[0];
        assert!((last - (-1.0f64).exp()).abs() < 1e-6, "{last}");
    }

    #[test]
    fn scalar_observer_error_decays_exponentially() {
        let sys = ode_system(scalar(1.0), scalar(0.0), scalar(1.0), scalar(1.0), scalar(1.0)).unwrap();
        let mut gain = ObserverGain::zero(Dims::new(1, 0), 1, sys.domain());
        gain.l1[(0, 0)] = -2.0;
        let traj = simulate_observer(&sys, &gain, &Signal::Zero, &unit_ic(&sys), 2, 0.002, 2.0).unwrap();
        let obs = traj.observer.unwrap();
        for (k, &t) in traj.times.iter().enumerate() {
            let e = obs.state[k][0] - traj.state[k][0];
            assert!((e + (-t).exp()).abs() < 1e-8, "t = {t}: {e}");
        }
    }
}
