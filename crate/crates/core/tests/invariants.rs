//! Cross-cutting invariants: transform round trips over random states,
//! bitwise determinism, monotonicity of the step-size criterion, and
//! weak convergence of the oscillatory corrections.

use fastslow::analysis::{determine_dt_max, windowed_average};
use fastslow::integrator::Trajectory;
use fastslow::model::ModelSpec;
use fastslow::systems::{
    correction_terms, default_resonance_tol, from_action_angle, run_full, run_second,
    to_action_angle, FullState, SlowState,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Action–angle transform and its inverse cancel on arbitrary states
    /// (away from the undefined zero-oscillation point).
    #[test]
    fn round_trip_on_random_states(
        y in prop::array::uniform2(-1.2f64..1.2),
        ydot in prop::array::uniform2(-2.0f64..2.0),
        z in prop::array::uniform2(0.05f64..0.5),
        zdot in prop::array::uniform2(-2.0f64..2.0),
        eps in 0.03f64..0.3,
    ) {
        let m = ModelSpec::builtin_test();
        let st = FullState {
            y: y.to_vec(),
            ydot: ydot.to_vec(),
            z: z.iter().map(|v| v * eps).collect(),
            zdot: zdot.to_vec(),
        };
        let aa = to_action_angle(&m, &st, eps).unwrap();
        let back = from_action_angle(&m, &aa, eps).unwrap();
        for (u, v) in st.y.iter().chain(&st.ydot).chain(&st.z).chain(&st.zdot)
            .zip(back.y.iter().chain(&back.ydot).chain(&back.z).chain(&back.zdot))
        {
            prop_assert!((u - v).abs() <= 1e-12, "round trip error {}", (u - v).abs());
        }
        // Actions are positive by construction.
        for th in &aa.theta {
            prop_assert!(*th > 0.0);
        }
    }
}

#[test]
fn integration_is_bitwise_deterministic() {
    let m = ModelSpec::builtin_test();
    let a = run_full(&m, 0.125, 0.25, 1e-3, 10).unwrap();
    let b = run_full(&m, 0.125, 0.25, 1e-3, 10).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.times, b.times);
}

#[test]
fn dt_max_monotone_under_threshold_tightening() {
    let dts: Vec<f64> = (0..12).map(|k| 0.1 / (1 << k) as f64).collect();
    let errors: Vec<f64> = dts.iter().map(|&dt| 1e-3 + 5.0 * dt * dt).collect();
    let mut prev = f64::INFINITY;
    for factor in [2.0, 1.5, 1.2, 1.05] {
        let (_, dt_max) = determine_dt_max(&dts, &errors, factor).unwrap();
        assert!(
            dt_max <= prev,
            "dt_max {dt_max} grew when tightening to {factor}"
        );
        prev = dt_max;
    }
}

#[test]
fn windowed_average_bound_for_pure_oscillation() {
    // sin(2 omega t / eps) with constant omega: the moving average over a
    // window w is bounded by eps / (omega w), the exact integral bound.
    let (omega, eps, window) = (3.0, 0.01, 0.25);
    let n = 8192;
    let times: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let states: Vec<f64> = times.iter().map(|&t| (2.0 * omega * t / eps).sin()).collect();
    let traj = Trajectory {
        times,
        dim: 1,
        states,
        labels: vec!["osc".into()],
    };
    let avg = windowed_average(&traj, "osc", window).unwrap();
    // Interior only: at the edges the window is one-sided.
    let lo = n / 4;
    let hi = 3 * n / 4;
    let bound = eps / (omega * window) + 2.0 / (n as f64 * window); // + Riemann-sum error
    for v in &avg.states[lo..hi] {
        assert!(v.abs() <= bound, "average {v} exceeds bound {bound}");
    }
}

#[test]
fn oscillatory_position_correction_average_shrinks_with_eps() {
    // The window-averaged magnitude of the oscillatory position correction
    // decreases as the scale separation sharpens (weak convergence to 0).
    let m = ModelSpec::builtin_test();
    let tol = default_resonance_tol(&m);
    let run = run_second(&m, 1.0, 1e-3, 1, tol).unwrap();
    let mut prev = f64::INFINITY;
    for eps in [0.125, 0.0625, 0.03125] {
        let mut states = Vec::with_capacity(run.traj.len());
        for i in 0..run.traj.len() {
            let s = SlowState::from_row(&m, run.traj.row(i));
            let c = correction_terms(&m, &s, eps, &run.init.c_theta, tol).unwrap();
            states.push(c.y2_osc[0]);
        }
        let traj = Trajectory {
            times: run.traj.times.clone(),
            dim: 1,
            states,
            labels: vec!["y2_osc1".into()],
        };
        let avg = windowed_average(&traj, "y2_osc1", 0.25).unwrap();
        let lo = avg.states.len() / 4;
        let hi = 3 * avg.states.len() / 4;
        let mag = avg.states[lo..hi]
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(
            mag < prev,
            "windowed magnitude {mag} did not shrink (previous {prev})"
        );
        prev = mag;
    }
}
