//! Sampler oracles: exact endpoint recovery with closed-form average
//! velocities, first-order Euler convergence against an RK4 reference, and
//! evaluation counting.

mod common;

use common::rk4_solve;
use splitmeanflow::autodiff::Tensor;
use splitmeanflow::flow::{AnalyticField, AverageVelocityField};
use splitmeanflow::model::VelocityNet;
use splitmeanflow::rng::substream;
use splitmeanflow::sampler::{euler_sample, few_step_sample};

use rand::Rng;

fn l2_rows(a: &Tensor, b: &Tensor) -> f64 {
    let mut acc: f64 = 0.0;
    for i in 0..a.rows() {
        acc += a
            .row(i)
            .iter()
            .zip(b.row(i))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    (acc / a.rows() as f64).sqrt()
}

#[test]
fn exact_average_velocity_recovers_endpoints_for_k_1_2_5() {
    let mut rng = substream(51, "prior");
    let fields = [
        AnalyticField::Constant(vec![0.7, -0.3]),
        AnalyticField::TimePoly { dim: 2 },
        AnalyticField::LinearState { dim: 2 },
    ];
    for field in &fields {
        let eps_rows: Vec<Vec<f64>> = (0..16)
            .map(|_| vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)])
            .collect();
        let eps = Tensor::from_rows(&eps_rows).unwrap();
        // reference endpoints: high-accuracy RK4 along the true dynamics
        let v_fn = |z: &[f64], tau: f64| field.velocity_at(z, tau);
        let truth: Vec<Vec<f64>> = eps_rows
            .iter()
            .map(|row| rk4_solve(&v_fn, row, 1.0, 0.0, 4000))
            .collect();
        let truth = Tensor::from_rows(&truth).unwrap();
        for k in [1usize, 2, 5] {
            let got = few_step_sample(field, k, &eps, None).unwrap();
            let err = l2_rows(&got, &truth);
            assert!(err < 1e-6, "{} with k={k}: err {err}", field.name());
        }
    }
}

#[test]
fn euler_error_halves_when_steps_double() {
    let field = AnalyticField::LinearState { dim: 2 };
    let mut rng = substream(52, "prior");
    let eps_rows: Vec<Vec<f64>> = (0..32)
        .map(|_| vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)])
        .collect();
    let eps = Tensor::from_rows(&eps_rows).unwrap();
    let v_fn = |z: &[f64], tau: f64| field.velocity_at(z, tau);
    let truth = Tensor::from_rows(
        &eps_rows
            .iter()
            .map(|row| rk4_solve(&v_fn, row, 1.0, 0.0, 10_000))
            .collect::<Vec<_>>(),
    )
    .unwrap();

    let err100 = l2_rows(&euler_sample(&field, 100, &eps, None, None).unwrap(), &truth);
    let err200 = l2_rows(&euler_sample(&field, 200, &eps, None, None).unwrap(), &truth);
    let ratio = err100 / err200;
    assert!(
        (1.8..=2.2).contains(&ratio),
        "first-order convergence violated: err(100)={err100} err(200)={err200} ratio={ratio}"
    );
}

#[test]
fn forward_counter_equals_step_count() {
    let net = common::random_net(53, common::tiny_cfg(0));
    let eps = Tensor::from_rows(&[vec![0.3, -0.8], vec![1.0, 0.2]]).unwrap();

    net.counters().reset();
    few_step_sample(&net, 5, &eps, None).unwrap();
    assert_eq!(net.counters().snapshot().forwards, 5);

    net.counters().reset();
    euler_sample(&net, 7, &eps, None, None).unwrap();
    assert_eq!(net.counters().snapshot().forwards, 7);
}

#[test]
fn cfg_guided_euler_combines_null_and_conditional_fields() {
    let net = common::random_net(54, common::tiny_cfg(3));
    let eps = Tensor::from_rows(&[vec![0.1, 0.4]]).unwrap();
    let ids = [2usize];

    // one guided step must match the hand-built combination
    let w = 2.0;
    let z1 = euler_sample(&net, 1, &eps, Some(&ids), Some(w)).unwrap();
    let v_null = net.instantaneous_velocity(&eps, 1.0, None).unwrap();
    let v_cond = net.instantaneous_velocity(&eps, 1.0, Some(&ids)).unwrap();
    for j in 0..2 {
        let v = v_null.row(0)[j] + w * (v_cond.row(0)[j] - v_null.row(0)[j]);
        let want = eps.row(0)[j] - v;
        assert!((z1.row(0)[j] - want).abs() < 1e-12);
    }

    // guidance with w = 0 reduces to the unconditional field
    let z_w0 = euler_sample(&net, 4, &eps, Some(&ids), Some(0.0)).unwrap();
    let z_null = euler_sample(&net, 4, &eps, None, None).unwrap();
    assert_eq!(z_w0.data(), z_null.data());
}

#[test]
fn sampling_is_stateless_given_parameters() {
    let net: VelocityNet = common::random_net(55, common::tiny_cfg(0));
    let eps = Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap();
    let a = few_step_sample(&net, 3, &eps, None).unwrap();
    let b = few_step_sample(&net, 3, &eps, None).unwrap();
    assert_eq!(a.data(), b.data());
}
