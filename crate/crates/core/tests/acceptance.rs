//! Acceptance suite. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pie_h2::h2_synth::{
    gramian_program, h2_bound_gramian, h2_bound_schur, schur_consistency_check, schur_program, synthesize_estimator,
    verify_norm_certificate, verify_synthesis, H2Options, NormCertificate, SynthesisResult, VerificationReport,
};
use pie_h2::pi_op::{Dims, PiOperator, Rl2Function};
use pie_h2::pie_model::{example_ode_estimator, example_ode_test, ode_system, preset, PieSystem};
use pie_h2::poly::{Interval, PolyMatrix, Vars};
use pie_h2::sdp::ClarabelBackend;
use pie_h2::spectral_sim::{direction_supremum, project, simulate, simulate_observer};

const PROBES: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Solved certificates collected along the way for the re-verification
/// criterion.
#[derive(Default)]
struct Solved {
    norms: Vec<(String, PieSystem, NormCertificate)>,
    syntheses: Vec<(String, PieSystem, SynthesisResult)>,
}

// ---------------------------------------------------------------------------
// 1: operator algebra

fn rand_poly(rng: &mut ChaCha8Rng, rows: usize, cols: usize, vars: Vars, d: Interval) -> PolyMatrix {
    let mut terms = Vec::new();
    for i in 0..=2u32 {
        let jmax = if vars == Vars::STheta { 2 - i } else { 0 };
        for j in 0..=jmax {
            terms.push(((i, j), DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))));
        }
    }
    PolyMatrix::from_terms(rows, cols, vars, d, terms).unwrap()
}

fn rand_op(rng: &mut ChaCha8Rng, i: Dims, o: Dims, d: Interval) -> PiOperator {
    PiOperator::new(
        d,
        DMatrix::from_fn(o.m, i.m, |_, _| rng.gen_range(-1.0..1.0)),
        rand_poly(rng, o.m, i.n, Vars::S, d),
        rand_poly(rng, o.n, i.m, Vars::S, d),
        rand_poly(rng, o.n, i.n, Vars::S, d),
        rand_poly(rng, o.n, i.n, Vars::STheta, d),
        rand_poly(rng, o.n, i.n, Vars::STheta, d),
    )
    .unwrap()
}

fn rand_dims(rng: &mut ChaCha8Rng) -> Dims {
    Dims::new(rng.gen_range(0..3), rng.gen_range(1..3))
}

fn sample_points(d: Interval) -> Vec<f64> {
    (0..=12).map(|k| d.a() + d.len() * k as f64 / 12.0).collect()
}

/// Relative sup-distance between an exact function and pointwise values.
fn rel_err(exact: &Rl2Function, fin: &DVector<f64>, vals: &[DVector<f64>], pts: &[f64]) -> f64 {
    let mut diff = (&exact.finite - fin).amax();
    let mut scale = exact.finite.amax();
    for (v, &s) in vals.iter().zip(pts) {
        let e = exact.eval(s);
        diff = diff.max((&e - v).amax());
        scale = scale.max(e.amax());
    }
    diff / scale.max(1.0)
}

fn criterion_1(_: &mut Solved) -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = 200;
    let (mut comp, mut adj, mut cat) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let a0 = rng.gen_range(-1.0..0.5);
        let d = Interval::new(a0, a0 + rng.gen_range(0.5..2.0)).unwrap();
        let pts = sample_points(d);

        // composed operator (exact kernels) against nested quadrature
        let (di, dm, dout) = (rand_dims(&mut rng), rand_dims(&mut rng), rand_dims(&mut rng));
        let b = rand_op(&mut rng, di, dm, d);
        let a = rand_op(&mut rng, dm, dout, d);
        let f = Rl2Function::random(&mut rng, di, 3, d);
        let exact = a.compose(&b).unwrap().apply(&f).unwrap();
        let (bf, _) = b.apply_fn(&f.finite, &|s: f64| f.eval(s), &[]);
        let inner = |s: f64| b.apply_fn(&f.finite, &|t: f64| f.eval(t), &[s]).1.remove(0);
        let (fin, vals) = a.apply_fn(&bf, &inner, &pts);
        comp = comp.max(rel_err(&exact, &fin, &vals, &pts));

        // adjoint: <g, A f> = <A* g, f>
        let g = Rl2Function::random(&mut rng, dout, 3, d);
        let c = rand_op(&mut rng, di, dout, d);
        let lhs = g.inner(&c.apply(&f).unwrap());
        let rhs = c.adjoint().apply(&g).unwrap().inner(&f);
        adj = adj.max((lhs - rhs).abs() / lhs.abs().max(1.0));

        // concatenation: [A; B] f and [A, C] (f, h)
        let o2 = rand_dims(&mut rng);
        let a2 = rand_op(&mut rng, di, o2, d);
        let v = c.vcat(&a2).unwrap().apply(&f).unwrap();
        let (y1, y2) = (c.apply(&f).unwrap(), a2.apply(&f).unwrap());
        let mut fin: Vec<f64> = y1.finite.iter().chain(y2.finite.iter()).copied().collect();
        let vals: Vec<DVector<f64>> = pts
            .iter()
            .map(|&s| DVector::from_iterator(dout.n + o2.n, y1.eval(s).iter().chain(y2.eval(s).iter()).copied()))
            .collect();
        cat = cat.max(rel_err(&v, &DVector::from_vec(fin.clone()), &vals, &pts));
        let d2 = rand_dims(&mut rng);
        let h = Rl2Function::random(&mut rng, d2, 3, d);
        let e = rand_op(&mut rng, d2, dout, d);
        fin = f.finite.iter().chain(h.finite.iter()).copied().collect();
        let joint = Rl2Function::new(DVector::from_vec(fin), f.dist.vcat(&h.dist).unwrap()).unwrap();
        let sum = c.hcat(&e).unwrap().apply(&joint).unwrap();
        let (z1, z2) = (c.apply(&f).unwrap(), e.apply(&h).unwrap());
        let vals: Vec<DVector<f64>> = pts.iter().map(|&s| z1.eval(s) + z2.eval(s)).collect();
        cat = cat.max(rel_err(&sum, &(&z1.finite + &z2.finite), &vals, &pts));
    }
    let worst = comp.max(adj).max(cat);
    let elapsed = t0.elapsed();
    outcome(
        worst <= 1e-9 && elapsed < Duration::from_secs(120),
        format!(
            "{cases} cases each; max rel err composition {comp:.1e}, adjoint {adj:.1e}, concatenation {cat:.1e}; {:.1} s",
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------------------
// 2: scalar ODE norm

/// Observability gramian by the Kronecker form of `Aᵀ W + W A + Cᵀ C = 0`.
fn dense_gramian(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let k = id.kronecker(&a.transpose()) + a.transpose().kronecker(&id);
    let rhs = -(c.transpose() * c);
    let w = k.lu().solve(&DVector::from_column_slice(rhs.as_slice())).unwrap();
    DMatrix::from_column_slice(n, n, w.as_slice())
}

fn criterion_2(solved: &mut Solved) -> Outcome {
    let sys = example_ode_test();
    let one = DMatrix::from_element(1, 1, 1.0);
    let oracle = dense_gramian(&-&one, &one)[(0, 0)].sqrt();
    let opts = H2Options::default();
    let backend = ClarabelBackend::default();
    let t0 = Instant::now();
    let g = h2_bound_gramian(&sys, &opts, &backend).unwrap();
    let tg = t0.elapsed();
    let t1 = Instant::now();
    let s = h2_bound_schur(&sys, &opts, &backend).unwrap();
    let ts = t1.elapsed();
    let (eg, es) = ((g.gamma - oracle).abs() / oracle, (s.gamma - oracle).abs() / oracle);
    let pass = eg <= 0.02 && es <= 0.02 && tg < Duration::from_secs(60) && ts < Duration::from_secs(60);
    let detail = format!(
        "oracle {oracle:.5}; gramian {:.5} ({:.2}%, {:.2} s), schur {:.5} ({:.2}%, {:.2} s)",
        g.gamma,
        100.0 * eg,
        secs(tg),
        s.gamma,
        100.0 * es,
        secs(ts)
    );
    solved.norms.push(("scalar ODE, gramian".into(), sys.clone(), g));
    solved.norms.push(("scalar ODE, schur".into(), sys, s));
    outcome(pass, detail)
}

// ---------------------------------------------------------------------------
// 3: scalar estimator

fn criterion_3(solved: &mut Solved) -> Outcome {
    let sys = example_ode_estimator();
    let t0 = Instant::now();
    let res = synthesize_estimator(&sys, &H2Options::default(), &ClarabelBackend::default()).unwrap();
    let elapsed = t0.elapsed();
    // error dynamics ė = (1 + L) e − L w, z = e: H2² = L² / (−2 (1 + L))
    let (best_l, best) = (1..400_000)
        .map(|k| -1.0 - 1e-5 * k as f64)
        .map(|l: f64| (l, (l * l / (-2.0 * (1.0 + l))).sqrt()))
        .fold((0.0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
    let l = res.gain.l1[(0, 0)];
    let eg = (res.gamma - best).abs() / best;
    let el = (l - best_l).abs() / best_l.abs();
    let detail = format!(
        "gamma {:.5} vs brute force {best:.5} ({:.2}%), L {l:.4} vs {best_l:.4} ({:.2}%); {:.2} s",
        res.gamma,
        100.0 * eg,
        100.0 * el,
        secs(elapsed)
    );
    solved.syntheses.push(("scalar estimator".into(), sys, res));
    outcome(eg <= 0.05 && el <= 0.10 && elapsed < Duration::from_secs(120), detail)
}

// ---------------------------------------------------------------------------
// 4: Schur complement

fn criterion_4(_: &mut Solved) -> Outcome {
    let d = Interval::unit();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut agree = 0;
    let mut positive = 0;
    let cases = 100;
    for _ in 0..cases {
        let (m1, m2) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let mut rand_mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let x = rand_mat(m1, m1);
        let q = rand_mat(m2, m1);
        let y = rand_mat(m2, m2);
        let p = &x * x.transpose() + DMatrix::identity(m1, m1) * 0.2;
        let shift = rng.gen_range(-0.5..1.5);
        let r = &y * y.transpose() + DMatrix::identity(m2, m2) * shift;
        let mut block = DMatrix::zeros(m1 + m2, m1 + m2);
        block.view_mut((0, 0), (m1, m1)).copy_from(&p);
        block.view_mut((m1, 0), (m2, m1)).copy_from(&q);
        block.view_mut((0, m1), (m1, m2)).copy_from(&q.transpose());
        block.view_mut((m1, m1), (m2, m2)).copy_from(&r);
        let oracle = block.symmetric_eigenvalues().min() > 1e-6;
        positive += oracle as usize;
        let rep = schur_consistency_check(
            &PiOperator::matrix(d, p),
            &PiOperator::matrix(d, q),
            &PiOperator::matrix(d, r),
            1e-6,
            4,
        )
        .unwrap();
        if rep.block_positive == oracle && rep.schur_positive == oracle {
            agree += 1;
        }
    }
    outcome(agree == cases, format!("{agree}/{cases} agree with dense eigenvalues ({positive} positive definite)"))
}

// ---------------------------------------------------------------------------
// 5, 6: simulations

fn peak(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

fn criterion_5(solved: &mut Solved) -> Outcome {
    let t0 = Instant::now();
    let p = preset("reaction-diffusion").unwrap();
    let res = synthesize_estimator(&p.system, &H2Options::default(), &ClarabelBackend::default()).unwrap();
    let proj = project(&p.system, 8);
    let plant = simulate(&proj, &p.signal, &p.initial, p.dt, p.t_final).unwrap();
    let start = plant.times.iter().position(|&t| t >= 0.5 - 1e-12).unwrap();
    let norms = &plant.field_norm[start..];
    let monotone = norms.windows(2).all(|w| w[1] >= w[0]);
    let traj = simulate_observer(&p.system, &res.gain, &p.signal, &p.initial, 8, p.dt, p.t_final).unwrap();
    let obs = traj.observer.as_ref().unwrap();
    let sup: Vec<f64> = obs.error_field.iter().map(|f| f.amax()).collect();
    let ez: Vec<f64> = obs.e_z.iter().map(|e| e.amax()).collect();
    let (sup_ratio, ez_ratio) = (sup[sup.len() - 1] / peak(&sup), ez[ez.len() - 1] / peak(&ez));
    let elapsed = t0.elapsed();
    let detail = format!(
        "gamma {:.4}; open-loop |Tx| {:.3} -> {:.3} monotone after 0.5: {monotone}; sup|Te|(2)/peak {:.3}, |e_z|(2)/peak {:.3}; {:.1} s",
        res.gamma,
        norms[0],
        norms[norms.len() - 1],
        sup_ratio,
        ez_ratio,
        secs(elapsed)
    );
    solved.syntheses.push(("reaction-diffusion estimator".into(), p.system.clone(), res));
    outcome(monotone && sup_ratio <= 0.10 && ez_ratio <= 0.10 && elapsed < Duration::from_secs(300), detail)
}

fn criterion_6(solved: &mut Solved) -> Outcome {
    let t0 = Instant::now();
    let p = preset("beam").unwrap();
    let res = synthesize_estimator(&p.system, &H2Options::default(), &ClarabelBackend::default()).unwrap();
    let proj = project(&p.system, 8);
    let plant = simulate(&proj, &p.signal, &p.initial, p.dt, p.t_final).unwrap();
    let energy = plant.quadratic(&proj.energy_matrix(&[1.0, 0.1]).unwrap());
    let drift = energy.iter().map(|e| (e - energy[0]).abs()).fold(0.0, f64::max) / energy[0];
    let traj = simulate_observer(&p.system, &res.gain, &p.signal, &p.initial, 8, p.dt, p.t_final).unwrap();
    let ez: Vec<f64> = traj.observer.as_ref().unwrap().e_z.iter().map(|e| e.amax()).collect();
    let ratio = ez[ez.len() - 1] / peak(&ez);
    let elapsed = t0.elapsed();
    let detail = format!(
        "gamma {:.4}; energy drift {:.2e}; |e_z|(10)/peak {:.3}; {} RK4 sub-steps per dt; {:.1} s",
        res.gamma,
        drift,
        ratio,
        traj.substeps,
        secs(elapsed)
    );
    solved.syntheses.push(("beam estimator".into(), p.system.clone(), res));
    outcome(drift < 0.05 && ratio <= 0.10 && elapsed < Duration::from_secs(300), detail)
}

// ---------------------------------------------------------------------------
// 7: re-verification

fn criterion_7(solved: &mut Solved) -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut record = |name: &str, rep: &VerificationReport| {
        let worst = rep.checks.iter().map(|c| c.worst_margin).fold(f64::INFINITY, f64::min);
        pass &= rep.passed();
        lines.push(format!(
            "{name} {} (worst {worst:+.1e}, floor {:.0e})",
            if rep.passed() { "ok" } else { "FAIL" },
            -rep.threshold
        ));
    };
    for (name, sys, cert) in &solved.norms {
        record(name, &verify_norm_certificate(sys, cert, PROBES).unwrap());
    }
    for (name, sys, res) in &solved.syntheses {
        record(name, &verify_synthesis(sys, res, PROBES).unwrap());
    }
    let count = lines.len();
    outcome(pass && count > 0, format!("{count} certificates, {PROBES} probes per constraint: {}", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// 8: SDPA interop

fn external_objective(path: &std::path::Path) -> Result<f64, String> {
    let script = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scripts/solve_sdpa.py");
    let mut last = String::new();
    for solver in ["CVXOPT", "SCS"] {
        let out = Command::new("python3")
            .arg(&script)
            .arg(path)
            .args(["--solver", solver])
            .output()
            .map_err(|e| format!("python3: {e}"))?;
        if out.status.success() {
            let text = String::from_utf8_lossy(&out.stdout);
            return text.trim().parse::<f64>().map_err(|e| format!("{solver}: {e}"));
        }
        last = format!("{solver}: {}", String::from_utf8_lossy(&out.stderr).trim());
    }
    Err(last)
}

fn criterion_8(_: &mut Solved) -> Outcome {
    let sys = example_ode_test();
    let opts = H2Options::default();
    let backend = ClarabelBackend::default();
    let dir = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, built) in
        [("gramian", gramian_program(&sys, &opts, opts.degree)), ("schur", schur_program(&sys, &opts, opts.degree))]
    {
        let built = built.unwrap();
        let embedded = built.prog.solve(&backend).unwrap().objective;
        let path = dir.path().join(format!("{name}.dat-s"));
        std::fs::write(&path, built.compile().to_sdpa()).unwrap();
        match external_objective(&path) {
            Ok(ext) => {
                let rel = (ext - embedded).abs() / embedded.abs();
                pass &= rel <= 0.01;
                parts.push(format!("{name}: embedded {embedded:.6}, external {ext:.6} ({:.3}%)", 100.0 * rel));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: external solver unavailable ({e})"));
            }
        }
    }
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 9: direction supremum against the trace norm

fn criterion_9(solved: &mut Solved) -> Outcome {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]);
    let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 1.0]);
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
    let sys = ode_system(a.clone(), b.clone(), c.clone(), DMatrix::zeros(1, 2), DMatrix::zeros(1, 2)).unwrap();
    let wo = dense_gramian(&a, &c);
    let bwb = b.transpose() * &wo * &b;
    let trace_oracle = bwb.trace().sqrt();
    let sup_oracle = bwb.symmetric_eigenvalues().max().sqrt();
    let sup = direction_supremum(&sys, 180, 2, 0.01, 25.0).unwrap();
    let cert = h2_bound_gramian(&sys, &H2Options::default(), &ClarabelBackend::default()).unwrap();
    let tol = 1.02;
    let sandwich = sup <= cert.gamma * tol && cert.gamma <= 2f64.sqrt() * sup * tol;
    let sup_ok = (sup - sup_oracle).abs() / sup_oracle <= 0.02;
    let trace_ok = (cert.gamma - trace_oracle).abs() / trace_oracle <= 0.02;
    let detail = format!(
        "simulated sup {sup:.5} (dense {sup_oracle:.5}), trace norm {:.5} (dense {trace_oracle:.5}), sqrt(2) sup {:.5}",
        cert.gamma,
        2f64.sqrt() * sup
    );
    solved.norms.push(("two-input ODE, gramian".into(), sys, cert));
    outcome(sandwich && sup_ok && trace_ok, detail)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn(&mut Solved) -> Outcome); 9] = [
        ("operator algebra", criterion_1),
        ("scalar ODE H2 bound", criterion_2),
        ("scalar estimator", criterion_3),
        ("Schur complement", criterion_4),
        ("reaction-diffusion simulation", criterion_5),
        ("beam simulation", criterion_6),
        ("certificate re-verification", criterion_7),
        ("SDPA export", criterion_8),
        ("direction supremum sandwich", criterion_9),
    ];
    // re-verification runs last so that it sees every solved certificate
    let order = [0usize, 1, 2, 3, 4, 5, 7, 8, 6];
    let mut solved = Solved::default();
    let mut lines = vec![String::new(); criteria.len()];
    let mut failed = 0;
    for &i in &order {
        let (name, run) = criteria[i];
        let res = catch_unwind(AssertUnwindSafe(|| run(&mut solved)));
        let (pass, detail) = match res {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += !pass as usize;
        lines[i] = format!("criterion {} [{name}]: {} - {detail}", i + 1, if pass { "PASS" } else { "FAIL" });
        eprintln!("{}", lines[i]);
    }
    println!();
    for l in &lines {
        println!("{l}");
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
