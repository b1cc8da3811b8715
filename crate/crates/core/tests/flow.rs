//! Oracle validation for the analytic fields and path construction: the
//! closed-form average velocities are checked against quadrature and ODE
//! references before they are trusted to validate anything else.

mod common;

use common::{rk4_solve, simpson};
use splitmeanflow::flow::{
    make_flow_sample, AnalyticField, AverageVelocityField, FlowSample, TimeDist,
};
use splitmeanflow::metrics::{isc_residual, make_probes};
use splitmeanflow::rng::substream;

use rand::Rng;

fn all_fields() -> Vec<AnalyticField> {
    vec![
        AnalyticField::Constant(vec![0.7, -0.3]),
        AnalyticField::TimePoly { dim: 2 },
        AnalyticField::LinearState { dim: 2 },
    ]
}

#[test]
fn sorted_uniform_gap_law() {
    // for two sorted U(0,1) draws, P(t - r > 1/2) = 1/4
    let mut rng = substream(21, "times");
    let n = 100_000;
    let mut hits = 0usize;
    for _ in 0..n {
        let (r, t) = TimeDist::SortedUniform.draw_pair(&mut rng);
        assert!(r <= t);
        if t - r > 0.5 {
            hits += 1;
        }
    }
    let p = hits as f64 / n as f64;
    assert!((p - 0.25).abs() < 0.01, "empirical gap probability {p}");
}

#[test]
fn lognormal_pairs_stay_in_unit_interval_and_sorted() {
    let mut rng = substream(22, "times");
    let dist = TimeDist::Lognormal { mu: -0.4, sigma: 1.0 };
    for _ in 0..10_000 {
        let (r, t) = dist.draw_pair(&mut rng);
        assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&t) && r <= t);
    }
}

#[test]
fn time_poly_average_matches_quadrature() {
    // u(., 0.2, 0.8) = 0.5 by the midpoint formula; cross-check by Simpson
    let field = AnalyticField::TimePoly { dim: 2 };
    let (r, t) = (0.2, 0.8);
    let integral = simpson(&|tau| field.velocity_at(&[0.0, 0.0], tau), r, t, 2000);
    let u = field.average_at(&[9.0, -9.0], r, t);
    for j in 0..2 {
        assert!((u[j] - integral[j] / (t - r)).abs() < 1e-10);
        assert!((u[j] - 0.5).abs() < 1e-12);
    }
}

#[test]
fn linear_state_average_matches_ode_plus_quadrature() {
    // average velocity along the field's own trajectory, from an RK4 solve of
    // the trajectory and Simpson quadrature of v over it
    let field = AnalyticField::LinearState { dim: 2 };
    let z_t = vec![0.8, -1.1];
    let (r, t) = (0.15, 0.85);
    // trajectory backward from t: z(tau) for tau in [r, t]
    let v_fn = |z: &[f64], tau: f64| field.velocity_at(z, tau);
    let z_at = |tau: f64| rk4_solve(&v_fn, &z_t, t, tau, 400);
    let integrand = |tau: f64| {
        let z = z_at(tau);
        field.velocity_at(&z, tau)
    };
    let integral = simpson(&integrand, r, t, 400);
    let u_closed = field.average_at(&z_t, r, t);
    for j in 0..2 {
        let u_ref = integral[j] / (t - r);
        assert!(
            (u_closed[j] - u_ref).abs() < 1e-6,
            "coord {j}: closed {} vs quadrature {}",
            u_closed[j],
            u_ref
        );
    }
}

#[test]
fn interval_splitting_identity_holds_exactly_for_closed_forms() {
    // (t-r) u(z_t,r,t) = (s-r) u(z_s,r,s) + (t-s) u(z_t,s,t) at random triples,
    // with z_s from the displacement map (the true trajectory point).
    let mut rng = substream(23, "probes");
    for field in all_fields() {
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let mut ts = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let [r, s, t] = ts;
            let z_t = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let u_full = field.average_at(&z_t, r, t);
            let u2 = field.average_at(&z_t, s, t);
            let z_s: Vec<f64> = z_t
                .iter()
                .zip(&u2)
                .map(|(zv, uv)| zv - (t - s) * uv)
                .collect();
            let u1 = field.average_at(&z_s, r, s);
            for j in 0..2 {
                let lhs = (t - r) * u_full[j];
                let rhs = (s - r) * u1[j] + (t - s) * u2[j];
                worst = worst.max((lhs - rhs).abs());
            }
        }
        assert!(worst < 1e-10, "{}: worst residual {worst}", field.name());
    }
}

#[test]
fn average_velocity_converges_to_instantaneous_as_r_approaches_t() {
    for field in all_fields() {
        let z = vec![0.9, -0.4];
        let t = 0.7;
        let r = t - 1e-6;
        let u = field.average_at(&z, r, t);
        let v = field.velocity_at(&z, t);
        let gap = u
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(gap < 1e-5, "{}: |u - v| = {gap}", field.name());
    }
}

#[test]
fn normalized_isc_residual_is_tiny_on_closed_forms() {
    let mut rng = substream(24, "probes");
    for field in all_fields() {
        let probes = make_probes(1000, &mut rng, |_, rng| {
            (
                vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                None,
            )
        });
        let stats = isc_residual(&field, &probes).unwrap();
        assert!(stats.max < 1e-10, "{}: max residual {}", field.name(), stats.max);
    }
}

#[test]
fn batched_average_velocity_matches_rowwise() {
    let field = AnalyticField::LinearState { dim: 2 };
    let z = splitmeanflow::autodiff::Tensor::from_rows(&[vec![0.1, 0.2], vec![-1.0, 0.5]]).unwrap();
    let batched = field.average_velocity(&z, 0.2, 0.9, None).unwrap();
    for i in 0..2 {
        let row = field.average_at(z.row(i), 0.2, 0.9);
        assert_eq!(batched.row(i), &row[..]);
    }
}

#[test]
fn flow_sample_rejects_bad_times() {
    assert!(FlowSample::new(vec![0.0], vec![0.0], 0.4, 0.6, 0.5, None).is_err());
    assert!(FlowSample::new(vec![0.0], vec![0.0], 1.4, 0.2, 0.5, None).is_err());
    assert!(FlowSample::new(vec![0.0], vec![0.0], 0.8, 0.2, 1.5, None).is_err());
    assert!(FlowSample::new(vec![0.0, 1.0], vec![0.0], 0.8, 0.2, 0.5, None).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        /// Invariants of the sample constructor for arbitrary admissible draws.
        #[test]
        fn flow_sample_invariants(
            t in 0.0f64..=1.0,
            frac in 0.0f64..=1.0,
            lambda in 0.0f64..=1.0,
            x in -3.0f64..3.0,
            eps in -3.0f64..3.0,
        ) {
            let r = t * frac;
            let s = FlowSample::new(vec![x], vec![eps], t, r, lambda, None).unwrap();
            prop_assert!(0.0 <= s.r && s.r <= s.s && s.s <= s.t && s.t <= 1.0);
            prop_assert_eq!(s.s, ((1.0 - lambda) * t + lambda * r).clamp(r, t));
            prop_assert_eq!(s.z_t[0], (1.0 - t) * x + t * eps);
        }

        /// make_flow_sample always satisfies the ordering invariants.
        #[test]
        fn drawn_samples_are_ordered(seed in 0u64..500) {
            let mut rng = substream(seed, "times");
            let s = make_flow_sample(vec![0.5], vec![-0.5], &mut rng, TimeDist::SortedUniform).unwrap();
            prop_assert!(0.0 <= s.r && s.r <= s.s && s.s <= s.t && s.t <= 1.0);
        }
    }
}
