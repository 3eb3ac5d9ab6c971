//! PIE systems `∂t(T x) = A x + B1 w`, `z = C1 x`, `y = C2 x + D21 w`,
//! estimator error dynamics and the shipped example systems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::pi_op::{Dims, PiError, PiOperator, PiOperatorData, PolyData, Result, Rl2Function};
use crate::poly::{Interval, PolyMatrix, Vars};

#[derive(Debug, Clone, PartialEq)]
pub struct PieSystem {
    pub t: PiOperator,
    pub a: PiOperator,
    pub b1: PiOperator,
    pub c1: PiOperator,
    pub c2: PiOperator,
    pub d21: DMatrix<f64>,
}

/// Undisturbed system with the initial condition injected through `b`:
/// `∂t(T x) = A x`, `z = C1 x`, `x(0) = B x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliarySystem {
    pub t: PiOperator,
    pub a: PiOperator,
    pub c1: PiOperator,
    pub b: PiOperator,
}

/// `L = [L1 ∅; L2 ∅]` mapping measurements to state corrections.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverGain {
    pub l1: DMatrix<f64>,
    pub l2: PolyMatrix,
}

fn mismatch(msg: String) -> PiError {
    PiError::DimensionMismatch(msg)
}

impl PieSystem {
    pub fn new(
        t: PiOperator,
        a: PiOperator,
        b1: PiOperator,
        c1: PiOperator,
        c2: PiOperator,
        d21: DMatrix<f64>,
    ) -> Result<Self> {
        let d = t.domain();
        for op in [&a, &b1, &c1, &c2] {
            if op.domain() != d {
                return Err(mismatch("operators live on different intervals".into()));
            }
        }
        let x = t.in_dims();
        if t.out_dims() != x || a.in_dims() != x || a.out_dims() != x {
            return Err(mismatch(format!("T and A must act on the state space {x:?}")));
        }
        if b1.out_dims() != x || b1.in_dims().n != 0 {
            return Err(mismatch(format!("B1 must map R^nw into {x:?}")));
        }
        for (name, c) in [("C1", &c1), ("C2", &c2)] {
            if c.in_dims() != x || c.out_dims().n != 0 {
                return Err(mismatch(format!("{name} must map {x:?} into a finite space")));
            }
        }
        if d21.shape() != (c2.out_dims().m, b1.in_dims().m) {
            return Err(mismatch(format!("D21 is {:?}, expected {}x{}", d21.shape(), c2.out_dims().m, b1.in_dims().m)));
        }
        Ok(Self { t, a, b1, c1, c2, d21 })
    }

    pub fn domain(&self) -> Interval {
        self.t.domain()
    }

    pub fn state_dims(&self) -> Dims {
        self.t.in_dims()
    }

    pub fn nw(&self) -> usize {
        self.b1.in_dims().m
    }

    pub fn nz(&self) -> usize {
        self.c1.out_dims().m
    }

    pub fn ny(&self) -> usize {
        self.c2.out_dims().m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PieSystemData::from(self)).expect("system serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let data: PieSystemData = serde_json::from_str(text).map_err(|e| PiError::Malformed(e.to_string()))?;
        Self::try_from(&data)
    }
}

impl ObserverGain {
    pub fn zero(dims: Dims, ny: usize, domain: Interval) -> Self {
        Self { l1: DMatrix::zeros(dims.m, ny), l2: PolyMatrix::zeros(dims.n, ny, Vars::S, domain) }
    }

    pub fn ny(&self) -> usize {
        self.l1.ncols()
    }

    /// The gain as an operator from `R^ny` into the state space.
    pub fn to_operator(&self) -> Result<PiOperator> {
        let d = self.l2.domain();
        let dims_in = Dims::new(self.l1.ncols(), 0);
        let dims_out = Dims::new(self.l1.nrows(), self.l2.rows());
        PiOperator::zero(d, dims_in, dims_out).with_p(self.l1.clone())?.with_q2(self.l2.clone())
    }

    /// Reads `L1` and `L2` from an operator with only the `P` and `Q2` slots.
    pub fn from_operator(op: &PiOperator) -> Result<Self> {
        if op.in_dims().n != 0 {
            return Err(mismatch("gain must act on a finite-dimensional input".into()));
        }
        Ok(Self { l1: op.p().clone(), l2: op.q2().clone() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GainData::from(self)).expect("gain serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let data: GainData = serde_json::from_str(text).map_err(|e| PiError::Malformed(e.to_string()))?;
        Self::try_from(&data)
    }
}

/// Error dynamics of the Luenberger observer
/// `∂t(T x̃) = A x̃ + L (C2 x̃ − y)`:
/// `∂t(T e) = (A + L C2) e − (B1 + L D21) w`, `e_z = C1 e`.
pub fn error_system(plant: &PieSystem, gain: &ObserverGain) -> Result<PieSystem> {
    let d = plant.domain();
    let x = plant.state_dims();
    if gain.ny() != plant.ny() || gain.l1.nrows() != x.m || gain.l2.rows() != x.n {
        return Err(mismatch(format!(
            "gain {}x{} / {}x{} does not fit state {x:?} with ny={}",
            gain.l1.nrows(),
            gain.l1.ncols(),
            gain.l2.rows(),
            gain.l2.cols(),
            plant.ny()
        )));
    }
    let l = gain.to_operator()?;
    let a = plant.a.add(&l.compose(&plant.c2)?)?;
    let d21 = PiOperator::matrix(d, plant.d21.clone());
    let b = plant.b1.add(&l.compose(&d21)?)?.negate();
    let c2 = PiOperator::zero(d, x, Dims::new(0, 0));
    let d21 = DMatrix::zeros(0, plant.nw());
    PieSystem::new(plant.t.clone(), a, b, plant.c1.clone(), c2, d21)
}

pub fn auxiliary_system(sys: &PieSystem) -> AuxiliarySystem {
    AuxiliarySystem { t: sys.t.clone(), a: sys.a.clone(), c1: sys.c1.clone(), b: sys.b1.clone() }
}

// ---------------------------------------------------------------------------
// example systems

fn scalar(vars: Vars, d: Interval, terms: &[(u32, u32, f64)]) -> PolyMatrix {
    PolyMatrix::scalar(vars, d, terms).expect("low degree")
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Pure ODE `ẋ = A x + B1 w`, `z = C1 x`, `y = C2 x + D21 w`.
pub fn ode_system(
    a: DMatrix<f64>,
    b1: DMatrix<f64>,
    c1: DMatrix<f64>,
    c2: DMatrix<f64>,
    d21: DMatrix<f64>,
) -> Result<PieSystem> {
    let d = Interval::unit();
    let nx = a.nrows();
    PieSystem::new(
        PiOperator::matrix(d, DMatrix::identity(nx, nx)),
        PiOperator::matrix(d, a),
        PiOperator::matrix(d, b1),
        PiOperator::matrix(d, c1),
        PiOperator::matrix(d, c2),
        d21,
    )
}

/// `ẋ = −x + w`, `z = x`; H2 norm `√0.5`.
pub fn example_ode_test() -> PieSystem {
    ode_system(mat(1, 1, &[-1.0]), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]), mat(1, 1, &[0.0]))
        .expect("consistent dims")
}

/// `ẋ = x`, `z = x`, `y = x + w`.
pub fn example_ode_estimator() -> PieSystem {
    ode_system(mat(1, 1, &[1.0]), mat(1, 1, &[0.0]), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]))
        .expect("consistent dims")
}

/// Unstable reaction-diffusion equation with boundary measurement, PIE state
/// `x = ∂s² ξ` on `[0, 1]`.
pub fn example_reaction_diffusion() -> PieSystem {
    let d = Interval::unit();
    let st = Vars::STheta;
    let state = Dims::new(0, 1);
    let t = PiOperator::zero(d, state, state)
        .with_r1(scalar(st, d, &[(0, 1, -1.0)]))
        .and_then(|o| o.with_r2(scalar(st, d, &[(1, 0, -1.0)])))
        .expect("scalar kernels");
    let a = PiOperator::zero(d, state, state)
        .with_r0(scalar(Vars::S, d, &[(2, 0, 1.0), (0, 0, 0.2)]))
        .and_then(|o| o.with_r1(scalar(st, d, &[(0, 1, -2.0)])))
        .and_then(|o| o.with_r2(scalar(st, d, &[(1, 0, -3.0)])))
        .expect("scalar kernels");
    let b1 = PiOperator::zero(d, Dims::new(1, 0), state)
        .with_q2(scalar(Vars::S, d, &[(2, 0, -0.5)]))
        .expect("scalar kernel");
    let c1 = PiOperator::zero(d, state, Dims::new(1, 0))
        .with_q1(scalar(Vars::S, d, &[(2, 0, 0.5), (1, 0, -1.0)]))
        .expect("scalar kernel");
    let c2 = PiOperator::zero(d, state, Dims::new(1, 0))
        .with_q1(scalar(Vars::S, d, &[(1, 0, -1.0)]))
        .expect("scalar kernel");
    PieSystem::new(t, a, b1, c1, c2, mat(1, 1, &[1.0])).expect("consistent dims")
}

/// Cantilevered Euler–Bernoulli beam with tip-velocity measurement, PIE
/// state `x = ∂s² v` with `v = (∂t η, ∂s² η)`, with the published
/// operator parameters.
pub fn example_euler_bernoulli() -> PieSystem {
    beam(&[(2, 0.5)], &[(2, 0.5), (1, -1.0)], &[(1, -1.0)])
}

/// The same beam with `B1`, `C1` and `C2` derived from the PDE through `T`:
/// input `(s² − 2s)/2`, output `∫ ∂t η` and measurement `∂t η(1)`.
pub fn example_euler_bernoulli_derived() -> PieSystem {
    beam(&[(2, 0.5), (1, -1.0)], &[(2, 0.5), (1, -1.0), (0, 0.5)], &[(1, -1.0), (0, 1.0)])
}

fn beam(b1: &[(u32, f64)], c1: &[(u32, f64)], c2: &[(u32, f64)]) -> PieSystem {
    let d = Interval::unit();
    let st = Vars::STheta;
    let state = Dims::new(0, 2);
    let entry = |r: usize, c: usize, vars: Vars, terms: &[(u32, u32, f64)], rows: usize, cols: usize| {
        let t: Vec<((u32, u32), DMatrix<f64>)> = terms
            .iter()
            .map(|&(i, j, v)| {
                let mut m = DMatrix::zeros(rows, cols);
                m[(r, c)] = v;
                ((i, j), m)
            })
            .collect();
        PolyMatrix::from_terms(rows, cols, vars, d, t).expect("low degree")
    };
    let t = PiOperator::zero(d, state, state)
        .with_r1(entry(0, 0, st, &[(1, 0, 1.0), (0, 1, -1.0)], 2, 2))
        .and_then(|o| o.with_r2(entry(1, 1, st, &[(1, 0, -1.0), (0, 1, 1.0)], 2, 2)))
        .expect("beam kernels");
    let a = PiOperator::zero(d, state, state)
        .with_r0(PolyMatrix::constant(mat(2, 2, &[0.0, -0.1, 1.0, 0.0]), d))
        .expect("beam multiplier");
    let terms = |t: &[(u32, f64)]| t.iter().map(|&(e, v)| (e, 0, v)).collect::<Vec<_>>();
    let b1 = PiOperator::zero(d, Dims::new(1, 0), state)
        .with_q2(entry(0, 0, Vars::S, &terms(b1), 2, 1))
        .expect("beam input");
    let c1 = PiOperator::zero(d, state, Dims::new(1, 0))
        .with_q1(entry(0, 0, Vars::S, &terms(c1), 1, 2))
        .expect("beam output");
    let c2 = PiOperator::zero(d, state, Dims::new(1, 0))
        .with_q1(entry(0, 0, Vars::S, &terms(c2), 1, 2))
        .expect("beam measurement");
    PieSystem::new(t, a, b1, c1, c2, mat(1, 1, &[1.0])).expect("consistent dims")
}

// ---------------------------------------------------------------------------
// signals and initial conditions

/// Scalar disturbance signals, applied to every channel of `w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Signal {
    Zero,
    /// `amplitude · sin(frequency · t)`.
    Sine {
        amplitude: f64,
        frequency: f64,
    },
}

impl Signal {
    pub fn eval(&self, t: f64, nw: usize) -> DVector<f64> {
        match *self {
            Signal::Zero => DVector::zeros(nw),
            Signal::Sine { amplitude, frequency } => DVector::from_element(nw, amplitude * (frequency * t).sin()),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "zero" | "none" => Some(Signal::Zero),
            "sin100" => Some(Signal::Sine { amplitude: 1.0, frequency: 100.0 }),
            _ => None,
        }
    }
}

/// Initial condition of the physical state `T x(0)`: finite part plus a
/// polynomial field.
pub type InitialCondition = Rl2Function;

fn field(d: Interval, n: usize, channel: usize, terms: &[(u32, f64)]) -> PolyMatrix {
    let t: Vec<((u32, u32), DMatrix<f64>)> = terms
        .iter()
        .map(|&(i, v)| {
            let mut m = DMatrix::zeros(n, 1);
            m[(channel, 0)] = v;
            ((i, 0), m)
        })
        .collect();
    PolyMatrix::from_terms(n, 1, Vars::S, d, t).expect("low degree")
}

/// Named initial conditions for the shipped systems.
pub fn initial_condition(system: &str, name: &str) -> Option<InitialCondition> {
    let d = Interval::unit();
    let ic = |m: Vec<f64>, n: usize, channel: usize, terms: &[(u32, f64)]| {
        Rl2Function::new(DVector::from_vec(m), field(d, n, channel, terms)).expect("column field")
    };
    match (system, name) {
        ("reaction-diffusion", "neg-half-square") => Some(ic(vec![], 1, 0, &[(2, -0.5)])),
        ("reaction-diffusion", "linear") => Some(ic(vec![], 1, 0, &[(1, 1.0)])),
        ("beam", "neg-half-square") => Some(ic(vec![], 2, 0, &[(2, -0.5)])),
        ("ode-test" | "ode-estimator", "unit") => Some(ic(vec![1.0], 0, 0, &[])),
        _ => None,
    }
}

/// A shipped system together with its default simulation setup.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub system: PieSystem,
    pub signal: Signal,
    pub initial: InitialCondition,
    pub dt: f64,
    pub t_final: f64,
}

pub const PRESET_NAMES: [&str; 4] = ["ode-test", "ode-estimator", "reaction-diffusion", "beam"];

pub fn preset(name: &str) -> Option<Preset> {
    let p = match name {
        "ode-test" => Preset {
            name: "ode-test",
            system: example_ode_test(),
            signal: Signal::Zero,
            initial: initial_condition(name, "unit")?,
            dt: 0.002,
            t_final: 5.0,
        },
        "ode-estimator" => Preset {
            name: "ode-estimator",
            system: example_ode_estimator(),
            signal: Signal::Zero,
            initial: initial_condition(name, "unit")?,
            dt: 0.002,
            t_final: 5.0,
        },
        "reaction-diffusion" => Preset {
            name: "reaction-diffusion",
            system: example_reaction_diffusion(),
            signal: Signal::by_name("sin100")?,
            initial: initial_condition(name, "neg-half-square")?,
            dt: 0.002,
            t_final: 2.0,
        },
        "beam" => Preset {
            name: "beam",
            system: example_euler_bernoulli_derived(),
            signal: Signal::Zero,
            initial: initial_condition(name, "neg-half-square")?,
            dt: 0.01,
            t_final: 10.0,
        },
        _ => return None,
    };
    Some(p)
}

// ---------------------------------------------------------------------------
// serialization

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PieSystemData {
    #[serde(rename = "T")]
    pub t: PiOperatorData,
    #[serde(rename = "A")]
    pub a: PiOperatorData,
    #[serde(rename = "B1")]
    pub b1: PiOperatorData,
    #[serde(rename = "C1")]
    pub c1: PiOperatorData,
    #[serde(rename = "C2")]
    pub c2: PiOperatorData,
    #[serde(rename = "D21")]
    pub d21: Vec<Vec<f64>>,
    #[serde(default)]
    pub d21_shape: Option<[usize; 2]>,
}

impl From<&PieSystem> for PieSystemData {
    fn from(s: &PieSystem) -> Self {
        Self {
            t: (&s.t).into(),
            a: (&s.a).into(),
            b1: (&s.b1).into(),
            c1: (&s.c1).into(),
            c2: (&s.c2).into(),
            d21: (0..s.d21.nrows()).map(|r| s.d21.row(r).iter().copied().collect()).collect(),
            d21_shape: Some([s.d21.nrows(), s.d21.ncols()]),
        }
    }
}

impl TryFrom<&PieSystemData> for PieSystem {
    type Error = PiError;

    fn try_from(d: &PieSystemData) -> Result<Self> {
        let c2 = PiOperator::try_from(&d.c2)?;
        let b1 = PiOperator::try_from(&d.b1)?;
        let [rows, cols] = d.d21_shape.unwrap_or([c2.out_dims().m, b1.in_dims().m]);
        if d.d21.len() != rows || d.d21.iter().any(|r| r.len() != cols) {
            return Err(PiError::Malformed(format!("D21 must be {rows}x{cols}")));
        }
        PieSystem::new(
            PiOperator::try_from(&d.t)?,
            PiOperator::try_from(&d.a)?,
            b1,
            PiOperator::try_from(&d.c1)?,
            c2,
            DMatrix::from_fn(rows, cols, |r, c| d.d21[r][c]),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainData {
    pub domain: [f64; 2],
    #[serde(rename = "L1")]
    pub l1: Vec<Vec<f64>>,
    #[serde(rename = "L1_shape")]
    pub l1_shape: [usize; 2],
    #[serde(rename = "L2")]
    pub l2: PolyData,
}

impl From<&ObserverGain> for GainData {
    fn from(g: &ObserverGain) -> Self {
        let d = g.l2.domain();
        Self {
            domain: [d.a(), d.b()],
            l1: (0..g.l1.nrows()).map(|r| g.l1.row(r).iter().copied().collect()).collect(),
            l1_shape: [g.l1.nrows(), g.l1.ncols()],
            l2: PolyData::from_poly(&g.l2),
        }
    }
}

impl TryFrom<&GainData> for ObserverGain {
    type Error = PiError;

    fn try_from(g: &GainData) -> Result<Self> {
        let d = Interval::new(g.domain[0], g.domain[1])?;
        let [rows, cols] = g.l1_shape;
        if g.l1.len() != rows || g.l1.iter().any(|r| r.len() != cols) {
            return Err(PiError::Malformed(format!("L1 must be {rows}x{cols}")));
        }
        if g.l2.cols != cols {
            return Err(PiError::Malformed("L1 and L2 disagree on the measurement count".into()));
        }
        Ok(Self { l1: DMatrix::from_fn(rows, cols, |r, c| g.l1[r][c]), l2: g.l2.to_poly(Vars::S, d)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reaction_diffusion_t_on_constant() {
        let sys = example_reaction_diffusion();
        let one =
            Rl2Function::new(DVector::zeros(0), PolyMatrix::constant(mat(1, 1, &[1.0]), Interval::unit())).unwrap();
        let out = sys.t.apply(&one).unwrap();
        for &s in &[0.0, 0.4, 1.0] {
            assert!((out.eval(s)[0] - (s * s / 2.0 - s)).abs() < 1e-14);
        }
        assert_eq!(sys.b1.q2().eval_s(1.0).unwrap()[(0, 0)], -0.5);
        assert_eq!(sys.d21[(0, 0)], 1.0);
    }

    #[test]
    fn beam_blocks() {
        let sys = example_euler_bernoulli();
        assert!(sys.a.r1().is_zero() && sys.a.r2().is_zero() && sys.t.r0().is_zero());
        assert_eq!(sys.state_dims(), Dims::new(0, 2));
    }

    #[test]
    fn scalar_error_system() {
        let plant = example_ode_estimator();
        let gain = ObserverGain { l1: mat(1, 1, &[-2.0]), l2: PolyMatrix::zeros(0, 1, Vars::S, Interval::unit()) };
        let err = error_system(&plant, &gain).unwrap();
        assert_eq!(err.a.p()[(0, 0)], -1.0);
        assert_eq!(err.b1.p()[(0, 0)], 2.0);
        assert_eq!(err.t, plant.t);
    }

    #[test]
    fn system_and_gain_round_trip() {
        let sys = example_euler_bernoulli();
        assert_eq!(PieSystem::from_json(&sys.to_json()).unwrap(), sys);
        let g = ObserverGain {
            l1: DMatrix::zeros(0, 1),
            l2: PolyMatrix::scalar(Vars::S, Interval::unit(), &[(0, 0, 0.1), (3, 0, -1.0 / 3.0)]).unwrap(),
        };
        assert_eq!(ObserverGain::from_json(&g.to_json()).unwrap(), g);
    }
}
