//! Acceptance suite. One test per headline criterion; each prints a
//! `[PASS] criterion N` line (visible with `--nocapture`). Training-based
//! criteria share fixtures built once per process.
//!
//! Budgets are deliberately desk-scale: the full suite trains a 20k-step
//! teacher, a 30k-step student and six 8k-step flow-ratio runs, and finishes
//! in well under the 30-minute target on a laptop CPU.

use std::sync::LazyLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use splitmeanflow::autodiff::{self, Tape, Tensor};
use splitmeanflow::data::ToyDataset;
use splitmeanflow::flow::{AnalyticField, AverageVelocityField, FlowSample};
use splitmeanflow::meanflow::identity_residual_at;
use splitmeanflow::metrics::{
    default_deltas, limit_theorem_check, make_probes, median_heuristic_bandwidth, mmd_rbf,
};
use splitmeanflow::model::{NetConfig, VelocityNet};
use splitmeanflow::rng::substream;
use splitmeanflow::sampler::{euler_sample, few_step_sample};
use splitmeanflow::smf::{
    self, loss_with_branches, Branch, LossForm, Objective, TeacherHandle, TrainMode, TrainOutcome,
    TrainPlan,
};

// ---------------------------------------------------------------- fixtures

const MASTER_SEED: u64 = 20260808;
const EVAL_SEED: u64 = 100;

/// Architecture shared by every trained model in the suite.
fn arch() -> NetConfig {
    NetConfig {
        data_dim: 2,
        hidden_dim: 128,
        hidden_layers: 3,
        time_embed_dim: 32,
        num_classes: 8,
        cond_embed_dim: 32,
    }
}

fn dataset() -> ToyDataset {
    ToyDataset::GaussMixture8 { labeled: true }
}

const CFG_SCALE: f64 = 1.5;
const PRETRAIN_STEPS: usize = 20_000;
const DISTILL_STEPS: usize = 30_000;
const RATIO_STEPS: usize = 8_000;

/// Kernel bandwidth for the pipeline MMD gates. The ring's cluster sigma is
/// 0.1 and adjacent mode centers sit ~1.53 apart; 0.3 resolves both scales.
/// The median pairwise-distance heuristic on this dataset gives ~2.8, which
/// is blind to cluster-scale structure: a near-perfect sampler's MMD then
/// sits at the estimator noise floor (data-vs-data fluctuations at n=8000
/// are ~1e-4) and ratios against it are ill-posed. The fixture measures that
/// floor and criterion 5 asserts the teacher sits far above it.
const ACCEPT_MMD_BANDWIDTH: f64 = 0.3;

fn pretrain_plan(seed: u64) -> TrainPlan {
    TrainPlan {
        mode: TrainMode::FromScratch,
        flow_ratio_p: 1.0,
        cfg_dropout_pretrain: 0.1,
        cfg_scale_w: CFG_SCALE,
        batch_size: 64,
        steps: PRETRAIN_STEPS,
        lr: 3e-4,
        warmup_steps: 1000,
        seed,
        net: arch(),
        ..TrainPlan::default()
    }
}

fn distill_plan(seed: u64, p: f64, steps: usize) -> TrainPlan {
    TrainPlan {
        mode: TrainMode::Distill,
        flow_ratio_p: p,
        cfg_scale_w: CFG_SCALE,
        batch_size: 64,
        steps,
        lr: 1e-4,
        warmup_steps: 1000,
        seed,
        net: arch(),
        ..TrainPlan::default()
    }
}

struct Pipeline {
    teacher: TeacherHandle,
    teacher_history: Vec<smf::StepRecord>,
    student: TrainOutcome,
    bandwidth: f64,
    /// |MMD| between two independent data draws: the estimator noise scale.
    mmd_noise_floor: f64,
    mmd_teacher: f64,
    mmd_student_1: f64,
    mmd_student_2: f64,
}

fn eval_prior(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = substream(seed, "acc-prior");
    let eps: Vec<f64> = (0..n * 2).map(|_| rng.sample(StandardNormal)).collect();
    let mut crng = substream(seed, "acc-cond");
    let cond: Vec<usize> = (0..n).map(|_| crng.random_range(0..8)).collect();
    (Tensor::matrix(n, 2, eps).unwrap(), cond)
}

static PIPELINE: LazyLock<Pipeline> = LazyLock::new(|| {
    let ds = dataset();
    let pre = smf::train(
        &pretrain_plan(MASTER_SEED),
        &ds,
        None,
        Objective::SplitMeanFlow,
        None,
    )
    .expect("pretraining");
    let teacher_net = pre
        .eval_net()
        .with_param_blocks(&pre.eval_net().param_blocks())
        .expect("teacher snapshot");
    let teacher = TeacherHandle::new(teacher_net, CFG_SCALE);

    let student = smf::train(
        &distill_plan(MASTER_SEED + 1, 0.75, DISTILL_STEPS),
        &ds,
        Some(&teacher),
        Objective::SplitMeanFlow,
        None,
    )
    .expect("distillation");

    let n = 8000;
    let (held_out, _) = ds
        .sample_batch(n, &mut substream(EVAL_SEED, "acc-heldout"))
        .expect("held out");
    let bandwidth = ACCEPT_MMD_BANDWIDTH;
    let (fresh, _) = ds
        .sample_batch(n, &mut substream(EVAL_SEED, "acc-noise"))
        .expect("fresh draw");
    let mmd_noise_floor = mmd_rbf(&fresh, &held_out, bandwidth)
        .expect("noise floor")
        .abs();

    let (eps, cond) = eval_prior(n, EVAL_SEED);
    let teacher_points = euler_sample(teacher.net(), 10, &eps, Some(&cond), Some(CFG_SCALE))
        .expect("teacher sampling");
    let s1 = few_step_sample(student.eval_net(), 1, &eps, Some(&cond)).expect("1-step");
    let s2 = few_step_sample(student.eval_net(), 2, &eps, Some(&cond)).expect("2-step");

    Pipeline {
        mmd_teacher: mmd_rbf(&teacher_points, &held_out, bandwidth).expect("teacher mmd"),
        mmd_student_1: mmd_rbf(&s1, &held_out, bandwidth).expect("s1 mmd"),
        mmd_student_2: mmd_rbf(&s2, &held_out, bandwidth).expect("s2 mmd"),
        teacher,
        teacher_history: pre.history,
        student,
        bandwidth,
        mmd_noise_floor,
    }
});

/// Flow-ratio comparison runs: distillation against the shared teacher at
/// identical budgets, varying only the flow ratio.
struct RatioRuns {
    /// (seed, mmd at p = 0.25, mmd at p = 0.75)
    per_seed: Vec<(u64, f64, f64)>,
}

static RATIO_RUNS: LazyLock<RatioRuns> = LazyLock::new(|| {
    let ds = dataset();
    let n = 4000;
    let (held_out, _) = ds
        .sample_batch(n, &mut substream(EVAL_SEED, "acc-heldout-ratio"))
        .expect("held out");
    let bandwidth = ACCEPT_MMD_BANDWIDTH;
    let (eps, cond) = eval_prior(n, EVAL_SEED + 1);
    let teacher = &PIPELINE.teacher;

    let mut per_seed = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for seed in [31u64, 32, 33] {
            for p in [0.25, 0.75] {
                let (ds, held_out, eps, cond) = (&ds, &held_out, &eps, &cond);
                handles.push((seed, p, scope.spawn(move || {
                    let plan = distill_plan(seed, p, RATIO_STEPS);
                    let out = smf::train(&plan, ds, Some(teacher), Objective::SplitMeanFlow, None)
                        .expect("flow-ratio run");
                    let pts =
                        few_step_sample(out.eval_net(), 1, eps, Some(cond)).expect("1-step");
                    mmd_rbf(&pts, held_out, bandwidth).expect("mmd")
                })));
            }
        }
        let mut by_seed: std::collections::BTreeMap<u64, [f64; 2]> = Default::default();
        for (seed, p, h) in handles {
            let slot = if p < 0.5 { 0 } else { 1 };
            by_seed.entry(seed).or_default()[slot] = h.join().expect("ratio thread");
        }
        for (seed, mmds) in by_seed {
            per_seed.push((seed, mmds[0], mmds[1]));
        }
    });
    RatioRuns { per_seed }
});

// ----------------------------------------------------------- small oracles

fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / (want.abs() + 1e-6)
}

fn rk4_solve(
    v: &dyn Fn(&[f64], f64) -> Vec<f64>,
    z0: &[f64],
    t0: f64,
    t1: f64,
    n: usize,
) -> Vec<f64> {
    let h = (t1 - t0) / n as f64;
    let mut z = z0.to_vec();
    let mut t = t0;
    let axpy =
        |z: &[f64], k: &[f64], c: f64| -> Vec<f64> { z.iter().zip(k).map(|(a, b)| a + c * b).collect() };
    for _ in 0..n {
        let k1 = v(&z, t);
        let k2 = v(&axpy(&z, &k1, h / 2.0), t + h / 2.0);
        let k3 = v(&axpy(&z, &k2, h / 2.0), t + h / 2.0);
        let k4 = v(&axpy(&z, &k3, h), t + h);
        for i in 0..z.len() {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
    }
    z
}

fn tiny_cfg() -> NetConfig {
    NetConfig {
        data_dim: 2,
        hidden_dim: 6,
        hidden_layers: 2,
        time_embed_dim: 4,
        num_classes: 3,
        cond_embed_dim: 4,
    }
}

fn random_net(seed: u64, cfg: NetConfig) -> VelocityNet {
    let mut rng = substream(seed, "init");
    let mut net = VelocityNet::init(cfg, &mut rng).unwrap();
    let blocks: Vec<Vec<f64>> = net
        .param_blocks()
        .iter()
        .map(|b| b.iter().map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect();
    net.set_param_blocks(&blocks).unwrap();
    net
}

fn flat_params(net: &VelocityNet) -> Vec<f64> {
    net.param_blocks().into_iter().flatten().collect()
}

fn set_flat_params(net: &mut VelocityNet, flat: &[f64]) {
    let mut blocks = net.param_blocks();
    let mut off = 0;
    for b in blocks.iter_mut() {
        let n = b.len();
        b.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    net.set_param_blocks(&blocks).unwrap();
}

fn all_fields() -> Vec<AnalyticField> {
    vec![
        AnalyticField::Constant(vec![0.7, -0.3]),
        AnalyticField::TimePoly { dim: 2 },
        AnalyticField::LinearState { dim: 2 },
    ]
}

fn random_inputs(rng: &mut ChaCha8Rng, batch: usize) -> (Tensor, Tensor, Tensor, Vec<usize>) {
    let z = Tensor::matrix(
        batch,
        2,
        (0..batch * 2).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap();
    let pairs: Vec<(f64, f64)> = (0..batch)
        .map(|_| {
            let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect();
    let r = Tensor::vector(pairs.iter().map(|p| p.0).collect());
    let t = Tensor::vector(pairs.iter().map(|p| p.1).collect());
    let cond = (0..batch).map(|_| rng.random_range(0..=3)).collect();
    (z, r, t, cond)
}

// --------------------------------------------------------------- criteria

#[test]
fn criterion_1_autodiff_matches_finite_differences() {
    let started = Instant::now();
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    for seed in 0..100u64 {
        let net = random_net(10_000 + seed, tiny_cfg());
        let mut rng = substream(20_000 + seed, "acc-inputs");
        let (z, r, t, cond) = random_inputs(&mut rng, 2);

        // reverse mode vs central differences on every parameter
        let tape = Tape::new();
        let tracked = net.track(&tape);
        let out = tracked.forward(&z, &r, &t, Some(&cond)).unwrap();
        let loss = out.square().mean();
        let grads = autodiff::backward(&loss).unwrap();
        let grad: Vec<f64> = tracked
            .param_grads(&grads)
            .unwrap()
            .into_iter()
            .flatten()
            .collect();
        let flat = flat_params(&net);
        let mut f = |p: &[f64]| {
            let mut probe = net.with_param_blocks(&net.param_blocks()).unwrap();
            set_flat_params(&mut probe, p);
            probe.forward(&z, &r, &t, Some(&cond)).unwrap().square().mean().item()
        };
        let fd = central_diff(&mut f, &flat, H);
        for i in 0..flat.len() {
            assert!(
                rel_err(grad[i], fd[i]) < TOL,
                "net {seed} param {i}: reverse {} vs fd {}",
                grad[i],
                fd[i]
            );
        }

        // forward-mode JVP vs central differences along a random direction
        let tangent = Tensor::matrix(2, 2, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (dr, dt) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let (_, jvp) = net
            .forward_jvp(&z, &r, &t, Some(&cond), &tangent, dr, dt)
            .unwrap();
        let eval = |h: f64| -> Vec<f64> {
            let zs = z.add(&tangent.scale(h)).unwrap();
            let rs = Tensor::vector(r.data().iter().map(|v| v + h * dr).collect());
            let ts = Tensor::vector(t.data().iter().map(|v| v + h * dt).collect());
            net.forward(&zs, &rs, &ts, Some(&cond)).unwrap().data().to_vec()
        };
        let (fp, fm) = (eval(H), eval(-H));
        for (i, g) in jvp.data().iter().enumerate() {
            let d = (fp[i] - fm[i]) / (2.0 * H);
            assert!(rel_err(*g, d) < TOL, "net {seed} jvp {i}: {g} vs {d}");
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 1 runtime {secs:.1}s exceeds 1 minute");
    println!("[PASS] criterion 1: autodiff gradients and JVPs match h=1e-5 central differences on 100 random nets (rel err < 1e-4, {secs:.1}s)");
}

#[test]
fn criterion_2_exact_identity_suite() {
    let mut rng = substream(0xACCE2, "acc-probes");
    for field in all_fields() {
        // split-consistency in displacement form at 1000 random triples
        let mut worst_split: f64 = 0.0;
        for _ in 0..1000 {
            let mut ts = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let [r, s, t] = ts;
            let z_t: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u_full = field.average_at(&z_t, r, t);
            let u2 = field.average_at(&z_t, s, t);
            let z_s: Vec<f64> = z_t.iter().zip(&u2).map(|(zv, uv)| zv - (t - s) * uv).collect();
            let u1 = field.average_at(&z_s, r, s);
            for j in 0..2 {
                let res = (t - r) * u_full[j] - (s - r) * u1[j] - (t - s) * u2[j];
                worst_split = worst_split.max(res.abs());
            }
        }
        assert!(
            worst_split < 1e-10,
            "{}: split-consistency residual {worst_split}",
            field.name()
        );

        // differential-identity fixed point at 1000 random points
        let mut worst_diff: f64 = 0.0;
        for _ in 0..1000 {
            let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
            let (r, t) = if a <= b { (a, b) } else { (b, a) };
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            worst_diff = worst_diff.max(identity_residual_at(&field, &z, r, t));
        }
        assert!(
            worst_diff < 1e-8,
            "{}: differential identity residual {worst_diff}",
            field.name()
        );
    }
    println!("[PASS] criterion 2: closed-form fields satisfy the split identity (< 1e-10) and the differential identity (< 1e-8) at 1000 probes each");
}

#[test]
fn criterion_3_limit_theorem_slopes() {
    for field in [AnalyticField::TimePoly { dim: 2 }, AnalyticField::LinearState { dim: 2 }] {
        let table =
            limit_theorem_check(&field, &[0.8, -0.5], 0.02, 0.98, &default_deltas(), None).unwrap();
        let slope = table.slope.expect("errors above noise floor");
        assert!(
            (slope - 1.0).abs() <= 0.1,
            "{}: fitted slope {slope} (rows {:?})",
            field.name(),
            table.rows
        );
    }
    // the constant field's quotient is exact: every error at the noise floor
    let table = limit_theorem_check(
        &AnalyticField::Constant(vec![0.7, -0.3]),
        &[0.4, -0.2],
        0.02,
        0.98,
        &default_deltas(),
        None,
    )
    .unwrap();
    assert!(table.slope.is_none());
    println!("[PASS] criterion 3: shrinking-interval quotient converges to v with log-log slope 1.0 +/- 0.1 on the smooth fields (constant field exact)");
}

#[test]
fn criterion_4_sampler_oracles() {
    let started = Instant::now();
    let mut rng = substream(0xACCE4, "acc-prior");

    // exact average velocity recovers true endpoints for k in {1, 2, 5}
    for field in all_fields() {
        let eps_rows: Vec<Vec<f64>> = (0..16)
            .map(|_| vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)])
            .collect();
        let eps = Tensor::from_rows(&eps_rows).unwrap();
        let v_fn = |z: &[f64], tau: f64| field.velocity_at(z, tau);
        let truth = Tensor::from_rows(
            &eps_rows
                .iter()
                .map(|row| rk4_solve(&v_fn, row, 1.0, 0.0, 4000))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        for k in [1usize, 2, 5] {
            let got = few_step_sample(&field, k, &eps, None).unwrap();
            let mut worst: f64 = 0.0;
            for i in 0..eps.rows() {
                for j in 0..2 {
                    worst = worst.max((got.row(i)[j] - truth.row(i)[j]).abs());
                }
            }
            assert!(worst < 1e-6, "{} k={k}: endpoint error {worst}", field.name());
        }
    }

    // Euler halves its error when steps double (first order), vs RK4 reference
    let field = AnalyticField::LinearState { dim: 2 };
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
    let rms = |pts: &Tensor| -> f64 {
        let mut acc = 0.0;
        for i in 0..pts.rows() {
            for j in 0..2 {
                acc += (pts.row(i)[j] - truth.row(i)[j]).powi(2);
            }
        }
        (acc / pts.rows() as f64).sqrt()
    };
    let e100 = rms(&euler_sample(&field, 100, &eps, None, None).unwrap());
    let e200 = rms(&euler_sample(&field, 200, &eps, None, None).unwrap());
    let ratio = e100 / e200;
    assert!(
        (1.8..=2.2).contains(&ratio),
        "error ratio {ratio} outside [1.8, 2.2] (err100 {e100}, err200 {e200})"
    );

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 4 runtime {secs:.1}s exceeds 1 minute");
    println!("[PASS] criterion 4: exact-u sampling hits true endpoints (< 1e-6, k in {{1,2,5}}); Euler error ratio err(100)/err(200) = {ratio:.2} in [1.8, 2.2] ({secs:.1}s)");
}

#[test]
fn criterion_5_pipeline_mmd_gates() {
    let p = &*PIPELINE;
    let r1 = p.mmd_student_1 / p.mmd_teacher;
    let r2 = p.mmd_student_2 / p.mmd_teacher;
    println!(
        "pipeline MMDs (n=8000, bw {:.3}, noise floor {:.3e}): teacher(10-step CFG) {:.3e}, student 1-step {:.3e} (ratio {:.2}), 2-step {:.3e} (ratio {:.2})",
        p.bandwidth, p.mmd_noise_floor, p.mmd_teacher, p.mmd_student_1, r1, p.mmd_student_2, r2
    );
    assert!(
        p.mmd_teacher > 10.0 * p.mmd_noise_floor,
        "teacher MMD {:.3e} too close to the estimator noise floor {:.3e}; the ratio gate would be ill-posed",
        p.mmd_teacher,
        p.mmd_noise_floor
    );
    assert!(
        p.mmd_student_1 <= 1.5 * p.mmd_teacher,
        "1-step student MMD {:.3e} exceeds 1.5x teacher {:.3e}",
        p.mmd_student_1,
        p.mmd_teacher
    );
    assert!(
        p.mmd_student_2 <= 1.25 * p.mmd_teacher,
        "2-step student MMD {:.3e} exceeds 1.25x teacher {:.3e}",
        p.mmd_student_2,
        p.mmd_teacher
    );
    println!("[PASS] criterion 5: 1-step MMD <= 1.5x and 2-step MMD <= 1.25x of the 10-step CFG teacher");
}

#[test]
fn criterion_6_flow_ratio_comparison() {
    let runs = &*RATIO_RUNS;
    let mut wins = 0;
    for (seed, low_p, high_p) in &runs.per_seed {
        let ratio = low_p / high_p;
        println!(
            "flow-ratio seed {seed}: mmd(p=0.25) {low_p:.3e} vs mmd(p=0.75) {high_p:.3e} (ratio {ratio:.2})"
        );
        if low_p > high_p {
            wins += 1;
        }
    }
    if wins < 2 {
        println!(
            "[FAIL] criterion 6: the flow-ratio ordering does not transfer to this desk-scale setup; \
             p=0.25 beat p=0.75 on {}/3 seeds here (and in every probed regime: from-scratch and distill, \
             8k-30k steps). Quality does collapse as p -> 0 (p=0.05 and p=0.02 runs degrade sharply), so the \
             boundary anchor matters, but the crossover sits near p~0.1 at this scale, not 0.5.",
            3 - wins
        );
    }
    assert!(
        wins >= 2,
        "p=0.25 strictly worse than p=0.75 on only {wins}/3 seeds"
    );
    println!("[PASS] criterion 6: p=0.25 yields strictly worse 1-step MMD than p=0.75 on {wins}/3 seeds");
}

#[test]
fn criterion_7_isc_residual_reduction() {
    let p = &*PIPELINE;
    let ds = dataset();
    let mut rng = substream(0xACCE7, "acc-probes");
    let probes = make_probes(512, &mut rng, |t, rng| {
        let (x, labels) = ds.sample_batch(1, rng).expect("probe draw");
        let z: Vec<f64> = x
            .row(0)
            .iter()
            .map(|xv| (1.0 - t) * xv + t * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (z, Some(labels.expect("labeled")[0]))
    });
    // the pre-distillation model is the teacher-initialized student, i.e.
    // the teacher weights queried as a u-field
    let before = splitmeanflow::metrics::isc_residual(p.teacher.net(), &probes).unwrap();
    let after = splitmeanflow::metrics::isc_residual(p.student.eval_net(), &probes).unwrap();
    let ratio = before.mean / after.mean;
    println!(
        "ISC residual mean: pre-distillation {:.4}, student {:.4} (ratio {:.1})",
        before.mean, after.mean, ratio
    );
    assert!(
        ratio >= 5.0,
        "residual reduction {ratio:.2}x is below the required 5x"
    );
    println!("[PASS] criterion 7: distillation shrinks the mean ISC residual {ratio:.1}x (>= 5x) on shared probes");
}

#[test]
fn criterion_8_objective_cost_instrumentation() {
    // operation counts on the consistency branch
    let net = random_net(0xACCE8, tiny_cfg());
    let plan = TrainPlan {
        flow_ratio_p: 0.5,
        mode: TrainMode::FromScratch,
        cfg_dropout_pretrain: 0.0,
        loss_form: LossForm::Squared,
        net: net.config().clone(),
        ..TrainPlan::default()
    };
    let mut rng = substream(0xACCE8, "acc-batch");
    let make_batch = |rng: &mut ChaCha8Rng| -> Vec<FlowSample> {
        (0..8)
            .map(|_| {
                let x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let eps = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                FlowSample::new(x, eps, 0.9, 0.2, 0.5, Some(rng.random_range(0..3))).unwrap()
            })
            .collect()
    };
    let branches = vec![Branch::Consistency; 8];

    let mut counts = Vec::new();
    for objective in [Objective::SplitMeanFlow, Objective::MeanFlow] {
        let mut batch = make_batch(&mut rng);
        net.counters().reset();
        let tape = Tape::new();
        let tracked = net.track(&tape);
        let (loss, _) = loss_with_branches(
            &tracked,
            &mut batch,
            &branches,
            &plan,
            objective,
            None,
            &mut substream(1, "cfg-dropout"),
        )
        .unwrap();
        autodiff::backward(&loss).unwrap();
        net.counters().note_backward();
        counts.push(net.counters().snapshot());
    }
    assert_eq!(
        (counts[0].forwards, counts[0].jvps, counts[0].backwards),
        (3, 0, 1),
        "split-consistency branch cost"
    );
    assert_eq!(
        (counts[1].forwards, counts[1].jvps, counts[1].backwards),
        (1, 1, 1),
        "differential-identity branch cost"
    );

    // wall-clock comparison (reported, no threshold)
    let ds = dataset();
    let mut wall = Vec::new();
    for objective in [Objective::SplitMeanFlow, Objective::MeanFlow] {
        let plan = TrainPlan {
            steps: 200,
            warmup_steps: 50,
            ..distill_plan(MASTER_SEED + 9, 0.75, 200)
        };
        let teacher = &PIPELINE.teacher;
        let started = Instant::now();
        smf::train(&plan, &ds, Some(teacher), objective, None).unwrap();
        wall.push(started.elapsed().as_secs_f64() * 1e3 / plan.steps as f64);
    }
    println!(
        "wall clock per training step: split-consistency {:.2} ms, differential baseline {:.2} ms",
        wall[0], wall[1]
    );
    println!("[PASS] criterion 8: consistency branch = 3 forwards + 1 backward + 0 JVPs; baseline = 1 forward + 1 JVP + 1 backward");
}

#[test]
fn criterion_9_bitwise_deterministic_metrics() {
    let tmp = std::env::temp_dir().join(format!("smf-acc-det-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp).unwrap();

    let config_text = format!(
        "dataset = gauss_mixture_8\nlabeled = true\nsteps = 60\nbatch_size = 16\nhidden_dim = 16\nhidden_layers = 2\ntime_embed_dim = 8\ncond_embed_dim = 8\nseed = 5\nwarmup_steps = 10\nrun_id = det\nout = {}\n",
        tmp.join("a").display()
    );
    let cfg_a = smf_cli::config::resolve(
        smf_cli::Command::Pretrain,
        &config_text,
        &smf_cli::Overrides::default(),
    )
    .unwrap();
    let a = smf_cli::execute(&cfg_a).unwrap();

    let config_text_b = config_text.replace(
        &tmp.join("a").display().to_string(),
        &tmp.join("b").display().to_string(),
    );
    let cfg_b = smf_cli::config::resolve(
        smf_cli::Command::Pretrain,
        &config_text_b,
        &smf_cli::Overrides::default(),
    )
    .unwrap();
    let b = smf_cli::execute(&cfg_b).unwrap();

    let bytes_a = std::fs::read(a.run_dir.join("metrics.csv")).unwrap();
    let bytes_b = std::fs::read(b.run_dir.join("metrics.csv")).unwrap();
    assert!(!bytes_a.is_empty());
    assert_eq!(bytes_a, bytes_b, "metrics CSVs differ between identical runs");

    // the run directory carries the full fixed layout
    for item in ["config", "checkpoints/model.ckpt", "metrics.csv", "summary.json"] {
        assert!(a.run_dir.join(item).exists(), "missing {item}");
    }
    std::fs::remove_dir_all(&tmp).ok();
    println!("[PASS] criterion 9: identical config+seed reproduce metrics.csv byte for byte");
}

// ------------------------------------------------------ supporting checks

/// End-to-end CLI pipeline: pretrain -> distill -> sample writes a samples
/// CSV with one row per point.
#[test]
fn cli_pipeline_produces_samples_csv() {
    let tmp = std::env::temp_dir().join(format!("smf-acc-cli-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp).unwrap();
    let out = tmp.display().to_string();

    let pre = format!(
        "dataset = gauss_mixture_8\nsteps = 80\nbatch_size = 16\nhidden_dim = 16\nhidden_layers = 2\ntime_embed_dim = 8\ncond_embed_dim = 8\nseed = 3\nwarmup_steps = 10\nrun_id = pre\nout = {out}\n"
    );
    let cfg = smf_cli::config::resolve(smf_cli::Command::Pretrain, &pre, &Default::default()).unwrap();
    smf_cli::execute(&cfg).unwrap();

    let dis = format!(
        "dataset = gauss_mixture_8\nsteps = 80\nbatch_size = 16\nhidden_dim = 16\nhidden_layers = 2\ntime_embed_dim = 8\ncond_embed_dim = 8\nseed = 4\nwarmup_steps = 10\nrun_id = dis\nout = {out}\nteacher = {out}/pre/checkpoints/model.ckpt\n"
    );
    let cfg = smf_cli::config::resolve(smf_cli::Command::Distill, &dis, &Default::default()).unwrap();
    smf_cli::execute(&cfg).unwrap();

    let sample = format!(
        "dataset = gauss_mixture_8\nseed = 5\nrun_id = samp\nout = {out}\ncheckpoint = {out}/dis/checkpoints/model.ckpt\nk = 1\nn_samples = 64\n"
    );
    let cfg = smf_cli::config::resolve(smf_cli::Command::Sample, &sample, &Default::default()).unwrap();
    let executed = smf_cli::execute(&cfg).unwrap();
    let text = std::fs::read_to_string(executed.run_dir.join("samples.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 65, "header + 64 sample rows");
    assert_eq!(rows[0], "x0,x1,cond");
    std::fs::remove_dir_all(&tmp).ok();
    println!("[PASS] cli pipeline: pretrain -> distill -> sample produces the expected samples CSV");
}

/// The distilled student keeps the boundary anchored: relative gap between
/// u(z, t, t) and the teacher's guided velocity stays below 5%.
#[test]
fn supporting_boundary_consistency_of_student() {
    let p = &*PIPELINE;
    let ds = dataset();
    let m = 512;
    let (x, labels) = ds
        .sample_batch(m, &mut substream(0xACCEB, "acc-boundary"))
        .unwrap();
    let mut rng = substream(0xACCEB, "acc-boundary-eps");
    let mut z_rows = Vec::with_capacity(m);
    let mut ts = Vec::with_capacity(m);
    for i in 0..m {
        let t: f64 = rng.random();
        let z: Vec<f64> = x
            .row(i)
            .iter()
            .map(|xv| (1.0 - t) * xv + t * rng.sample::<f64, _>(StandardNormal))
            .collect();
        z_rows.push(z);
        ts.push(t);
    }
    let z = Tensor::from_rows(&z_rows).unwrap();
    let t_col = Tensor::matrix(m, 1, ts.clone()).unwrap();
    let ids = labels.unwrap();
    let v_ref = p.teacher.cfg_velocity(&z, &t_col, Some(&ids)).unwrap();
    let mut pred_rows = Vec::with_capacity(m);
    for i in 0..m {
        let zi = Tensor::from_rows(&[z_rows[i].clone()]).unwrap();
        let u = p
            .student
            .eval_net()
            .average_velocity(&zi, ts[i], ts[i], Some(&[ids[i]]))
            .unwrap();
        pred_rows.push(u.row(0).to_vec());
    }
    let pred = Tensor::from_rows(&pred_rows).unwrap();
    let gap = splitmeanflow::metrics::boundary_gap(&pred, &v_ref).unwrap();
    println!("student boundary gap: {gap:.4} (relative squared error vs teacher CFG velocity)");
    assert!(gap < 0.05, "boundary gap {gap} >= 5%");
}

/// Training-loss trend of the distillation run: 5k-step window means of the
/// consistency residual decrease monotonically.
#[test]
fn supporting_isc_residual_window_trend() {
    let p = &*PIPELINE;
    let window = 5000;
    let means: Vec<f64> = p
        .student
        .history
        .chunks(window)
        .map(|w| w.iter().map(|r| r.isc_residual).sum::<f64>() / w.len() as f64)
        .collect();
    println!("distillation ISC-residual window means: {means:?}");
    for i in 1..means.len() {
        assert!(
            means[i] < means[i - 1],
            "window {i} mean {:.5} did not decrease from {:.5}",
            means[i],
            means[i - 1]
        );
    }
}

/// From-scratch pretraining beats the zero-predictor loss floor measured on
/// the data before training.
#[test]
fn supporting_pretrain_beats_zero_predictor_floor() {
    let p = &*PIPELINE;
    // empirical E||eps - x||^2 under the data and prior
    let ds = dataset();
    let n = 20_000;
    let (x, _) = ds.sample_batch(n, &mut substream(0xACCEC, "acc-floor")).unwrap();
    let mut rng = substream(0xACCEC, "acc-floor-eps");
    let mut floor = 0.0;
    for i in 0..n {
        for xv in x.row(i) {
            let e: f64 = rng.sample(StandardNormal);
            floor += (e - xv) * (e - xv);
        }
    }
    floor /= n as f64;
    let hist = &p.teacher_history;
    let tail: f64 =
        hist[hist.len() - 500..].iter().map(|r| r.loss).sum::<f64>() / 500.0;
    println!("zero-predictor loss floor {floor:.3}; final pretrain loss {tail:.3}");
    assert!(tail < floor, "pretraining failed to beat the zero-predictor floor");
}
