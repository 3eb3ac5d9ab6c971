use std::sync::OnceLock;

use pie_h2::h2_synth::{synthesize_estimator, H2Options};
use pie_h2::pie_model::{preset, ObserverGain, Preset, Signal};
use pie_h2::sdp::ClarabelBackend;
use pie_h2::spectral_sim::{project, simulate, simulate_observer, Trajectory};

fn gain(name: &str) -> &'static ObserverGain {
    static RD: OnceLock<ObserverGain> = OnceLock::new();
    static BEAM: OnceLock<ObserverGain> = OnceLock::new();
    let cell = if name == "beam" { &BEAM } else { &RD };
    cell.get_or_init(|| {
        let p = preset(name).unwrap();
        synthesize_estimator(&p.system, &H2Options::default(), &ClarabelBackend::default()).unwrap().gain
    })
}

fn observer(p: &Preset, order: usize, dt: f64) -> Trajectory {
    simulate_observer(&p.system, gain(p.name), &p.signal, &p.initial, order, dt, p.t_final).unwrap()
}

/// `(∫ |e_z|² dt)^{1/2}` by the trapezoid rule.
fn output_error_l2(traj: &Trajectory) -> f64 {
    let e = &traj.observer.as_ref().unwrap().e_z;
    let t = &traj.times;
    let sum: f64 =
        (1..t.len()).map(|k| 0.5 * (t[k] - t[k - 1]) * (e[k].norm_squared() + e[k - 1].norm_squared())).sum();
    sum.sqrt()
}

fn error_field_l2(traj: &Trajectory) -> f64 {
    let e = &traj.observer.as_ref().unwrap().error_norm;
    let t = &traj.times;
    let sum: f64 = (1..t.len()).map(|k| 0.5 * (t[k] - t[k - 1]) * (e[k] * e[k] + e[k - 1] * e[k - 1])).sum();
    sum.sqrt()
}

#[test]
fn halving_the_step_barely_changes_the_output_error() {
    for name in ["reaction-diffusion", "beam"] {
        let p = preset(name).unwrap();
        let coarse = output_error_l2(&observer(&p, 8, p.dt));
        let fine = output_error_l2(&observer(&p, 8, p.dt / 2.0));
        let rel = (coarse - fine).abs() / fine;
        assert!(rel < 0.01, "{name}: {coarse} vs {fine}");
    }
}

#[test]
fn reaction_diffusion_error_is_resolved_at_order_eight() {
    let p = preset("reaction-diffusion").unwrap();
    let n8 = error_field_l2(&observer(&p, 8, p.dt));
    let n12 = error_field_l2(&observer(&p, 12, p.dt));
    assert!((n8 - n12).abs() / n12 < 0.02, "{n8} vs {n12}");
}

#[test]
fn undisturbed_beam_conserves_energy() {
    let p = preset("beam").unwrap();
    let proj = project(&p.system, 8);
    let traj = simulate(&proj, &Signal::Zero, &p.initial, p.dt, p.t_final).unwrap();
    // kinetic plus bending energy of the physical state (∂t η, ∂s² η)
    let energy = traj.quadratic(&proj.energy_matrix(&[1.0, 0.1]).unwrap());
    let e0 = energy[0];
    let drift = energy.iter().map(|e| (e - e0).abs() / e0).fold(0.0, f64::max);
    assert!(drift < 0.05, "drift {drift}");
    assert!(traj.substeps > 1);
}

#[test]
fn undisturbed_reaction_diffusion_grows() {
    let p = preset("reaction-diffusion").unwrap();
    let traj = simulate(&project(&p.system, 8), &Signal::Zero, &p.initial, p.dt, 4.0).unwrap();
    let n = &traj.field_norm;
    assert!(n[n.len() - 1] > 2.0 * n[0], "{} -> {}", n[0], n[n.len() - 1]);
    let half = n.len() / 4;
    assert!(n[half..].windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn initial_fit_reproduces_a_compatible_field() {
    // -s²/2 satisfies both boundary conditions of the beam's first channel
    let p = preset("beam").unwrap();
    let proj = project(&p.system, 8);
    let traj = simulate(&proj, &Signal::Zero, &p.initial, p.dt, 0.0).unwrap();
    for (k, &s) in traj.grid.iter().enumerate() {
        let v = traj.channel(&traj.field[0], 0)[k];
        assert!((v + 0.5 * s * s).abs() < 1e-8, "s = {s}: {v}");
    }
}
