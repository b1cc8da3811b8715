//! Run execution: directory layout, CSV/JSON emission, and the drivers
//! behind each subcommand.
//!
//! Every run owns `<out>/<run_id>/` with a fixed layout:
//!
//! ```text
//! config          normalized key = value snapshot
//! checkpoints/    model.ckpt (parameters + EMA + plan)
//! metrics.csv     long format: run_id,objective,step,metric,value
//! samples.csv     one row per generated point: dims then optional cond
//! summary.json    MetricReport plus run provenance (includes wall times)
//! ```
//!
//! Wall-clock numbers never enter metrics.csv, so reruns with one config and
//! seed reproduce it byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use splitmeanflow::autodiff::Tensor;
use splitmeanflow::checkpoint;
use splitmeanflow::error::{Error, Result};
use splitmeanflow::flow::{AnalyticField, AverageVelocityField};
use splitmeanflow::meanflow::identity_residual_at;
use splitmeanflow::metrics::{
    self, default_deltas, limit_theorem_check, make_probes, median_heuristic_bandwidth, mmd_rbf,
    MetricReport,
};
use splitmeanflow::model::VelocityNet;
use splitmeanflow::rng::substream;
use splitmeanflow::sampler::{euler_sample, few_step_sample};
use splitmeanflow::smf::{self, Objective, StepRecord, TeacherHandle, TrainOutcome};

use crate::config::{Command, RunConfig, SamplerKind};

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(cfg: &RunConfig) -> Result<RunDir> {
        let root = cfg.out_dir.join(&cfg.run_id);
        fs::create_dir_all(root.join("checkpoints"))?;
        let mut config_text = String::new();
        for (k, v) in &cfg.snapshot {
            config_text.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(root.join("config"), config_text)?;
        Ok(RunDir { root })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.root.join("checkpoints").join("model.ckpt")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn samples_path(&self) -> PathBuf {
        self.root.join("samples.csv")
    }

    fn write_metrics_csv(
        &self,
        run_id: &str,
        objective: &str,
        history: &[StepRecord],
        reports: &[MetricReport],
    ) -> Result<()> {
        let mut out = String::from("run_id,objective,step,metric,value\n");
        for rec in history {
            out.push_str(&format!(
                "{run_id},{objective},{},loss,{}\n",
                rec.step, rec.loss
            ));
            out.push_str(&format!(
                "{run_id},{objective},{},branch_mix,{}\n",
                rec.step, rec.branch_mix
            ));
            out.push_str(&format!(
                "{run_id},{objective},{},isc_residual,{}\n",
                rec.step, rec.isc_residual
            ));
        }
        for rep in reports {
            for (name, value) in &rep.scalars {
                out.push_str(&format!(
                    "{},{},{},{name},{value}\n",
                    rep.run_id, rep.objective, rep.step
                ));
            }
        }
        fs::write(self.metrics_path(), out)?;
        Ok(())
    }

    fn write_samples_csv(&self, points: &Tensor, cond: Option<&[usize]>) -> Result<()> {
        let dims = points.cols();
        let mut out = String::new();
        for j in 0..dims {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("x{j}"));
        }
        if cond.is_some() {
            out.push_str(",cond");
        }
        out.push('\n');
        for i in 0..points.rows() {
            for (j, v) in points.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&v.to_string());
            }
            if let Some(ids) = cond {
                out.push_str(&format!(",{}", ids[i]));
            }
            out.push('\n');
        }
        fs::write(self.samples_path(), out)?;
        Ok(())
    }

    fn write_summary(&self, summary: &serde_json::Value) -> Result<()> {
        fs::write(
            self.root.join("summary.json"),
            serde_json::to_string_pretty(summary).expect("serializable summary"),
        )?;
        Ok(())
    }
}

/// Load a checkpoint and pick the evaluation parameters (EMA when present
/// and enabled by the stored plan).
fn load_eval_net(path: &Path) -> Result<(VelocityNet, splitmeanflow::smf::TrainPlan)> {
    let (net, ema, plan) = checkpoint::load(path)?;
    let eval = if plan.use_ema {
        ema.unwrap_or(net)
    } else {
        net
    };
    Ok((eval, plan))
}

fn train_objective(cfg: &RunConfig) -> Objective {
    match cfg.command {
        Command::MeanflowDistill => Objective::MeanFlow,
        _ => Objective::SplitMeanFlow,
    }
}

/// Outcome of one CLI run, for callers that drive runs programmatically.
pub struct Executed {
    pub run_dir: PathBuf,
    pub report: Option<MetricReport>,
}

pub fn execute(cfg: &RunConfig) -> Result<Executed> {
    match cfg.command {
        Command::Pretrain | Command::Distill | Command::MeanflowDistill => run_training(cfg),
        Command::Sample => run_sample(cfg),
        Command::Eval => run_eval(cfg),
        Command::Verify => {
            let ok = verify_fields("all", &mut std::io::stdout())?;
            if !ok {
                return Err(Error::Config("identity verification failed".into()));
            }
            Ok(Executed {
                run_dir: PathBuf::new(),
                report: None,
            })
        }
    }
}

fn run_training(cfg: &RunConfig) -> Result<Executed> {
    let dir = RunDir::create(cfg)?;
    let objective = train_objective(cfg);
    let started = Instant::now();

    let teacher = match &cfg.teacher {
        Some(path) => {
            let (teacher_net, _) = load_eval_net(path)?;
            Some(TeacherHandle::new(teacher_net, cfg.plan.cfg_scale_w))
        }
        None => None,
    };

    // distillation inherits the teacher's architecture; keep the recorded
    // plan consistent with the weights actually trained
    let mut plan = cfg.plan.clone();
    if let Some(t) = &teacher {
        plan.net = t.net().config().clone();
    }

    let outcome: TrainOutcome = smf::train(&plan, &cfg.dataset, teacher.as_ref(), objective, None)?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;

    checkpoint::save(
        &outcome.net,
        outcome.ema.as_ref(),
        &plan,
        &dir.checkpoint_path(),
    )?;
    dir.write_metrics_csv(&cfg.run_id, objective.as_str(), &outcome.history, &[])?;

    let final_loss = outcome.history.last().map(|r| r.loss).unwrap_or(0.0);
    let mut report = MetricReport::new(&cfg.run_id, objective.as_str(), cfg.plan.steps);
    report.wall_ms = wall_ms;
    report.insert("final_loss", final_loss)?;
    report.insert(
        "final_isc_residual",
        outcome.history.last().map(|r| r.isc_residual).unwrap_or(0.0),
    )?;
    let summary = serde_json::json!({
        "run_id": cfg.run_id,
        "command": cfg.command.name(),
        "objective": objective.as_str(),
        "dataset": cfg.dataset.name(),
        "param_count": outcome.net.param_count(),
        "steps": cfg.plan.steps,
        "wall_ms": wall_ms,
        "ms_per_step": if plan.steps > 0 { wall_ms / plan.steps as f64 } else { 0.0 },
        "plan": plan,
        "report": report,
    });
    dir.write_summary(&summary)?;
    Ok(Executed {
        run_dir: dir.root,
        report: Some(report),
    })
}

/// Draw prior noise and (for conditional models) uniform class labels.
fn prior_draws(
    net: &VelocityNet,
    n: usize,
    seed: u64,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    let dim = net.config().data_dim;
    let mut rng = substream(seed, "eval-prior");
    let eps: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    let cond = net.config().is_conditional().then(|| {
        let mut crng = substream(seed, "eval-cond");
        (0..n)
            .map(|_| crng.random_range(0..net.config().num_classes))
            .collect()
    });
    Ok((Tensor::matrix(n, dim, eps)?, cond))
}

fn generate(cfg: &RunConfig, net: &VelocityNet) -> Result<(Tensor, Option<Vec<usize>>)> {
    let (eps, cond) = prior_draws(net, cfg.n_samples, cfg.plan.seed)?;
    let points = match cfg.sampler {
        SamplerKind::FewStep => few_step_sample(net, cfg.k, &eps, cond.as_deref())?,
        SamplerKind::Euler => euler_sample(
            net,
            cfg.euler_steps,
            &eps,
            cond.as_deref(),
            Some(cfg.plan.cfg_scale_w),
        )?,
    };
    Ok((points, cond))
}

fn run_sample(cfg: &RunConfig) -> Result<Executed> {
    let dir = RunDir::create(cfg)?;
    let (net, _) = load_eval_net(cfg.checkpoint.as_ref().expect("validated"))?;
    let (points, cond) = generate(cfg, &net)?;
    dir.write_samples_csv(&points, cond.as_deref())?;
    dir.write_metrics_csv(&cfg.run_id, "sample", &[], &[])?;
    let summary = serde_json::json!({
        "run_id": cfg.run_id,
        "command": cfg.command.name(),
        "n_samples": cfg.n_samples,
        "sampler": match cfg.sampler { SamplerKind::FewStep => "few_step", SamplerKind::Euler => "euler" },
        "k": cfg.k,
        "euler_steps": cfg.euler_steps,
    });
    dir.write_summary(&summary)?;
    Ok(Executed {
        run_dir: dir.root,
        report: None,
    })
}

/// Quality and identity metrics of a checkpoint against fresh data.
pub fn evaluate_net(cfg: &RunConfig, net: &VelocityNet, run_id: &str) -> Result<(MetricReport, Tensor, Option<Vec<usize>>)> {
    let started = Instant::now();
    let mut report = MetricReport::new(run_id, "eval", cfg.plan.steps);

    let (points, cond) = generate(cfg, net)?;
    let (held_out, _) = cfg
        .dataset
        .sample_batch(cfg.n_samples, &mut substream(cfg.plan.seed, "eval-heldout"))?;

    let bw = match cfg.bandwidth {
        Some(b) => b,
        None => median_heuristic_bandwidth(&held_out, &held_out)?,
    };
    report.insert("mmd_bandwidth", bw)?;
    report.insert("mmd_rbf", mmd_rbf(&points, &held_out, bw)?)?;
    if cfg.dataset.dim() == 1 {
        let a: Vec<f64> = points.data().to_vec();
        let b: Vec<f64> = held_out.data().to_vec();
        report.insert("w2_1d", metrics::w2_1d(&a, &b)?)?;
    }

    // split-consistency residual over path-shaped probes
    let mut probe_rng = substream(cfg.plan.seed, "eval-probes");
    let dataset = cfg.dataset.clone();
    let labeled = dataset.labeled() && net.config().is_conditional();
    let probes = make_probes(cfg.eval_probes, &mut probe_rng, |t, rng| {
        let (x, labels) = dataset.sample_batch(1, rng).expect("probe draw");
        let eps: Vec<f64> = (0..dataset.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let z: Vec<f64> = x
            .row(0)
            .iter()
            .zip(&eps)
            .map(|(xv, ev)| (1.0 - t) * xv + t * ev)
            .collect();
        (z, labeled.then(|| labels.expect("labeled")[0]))
    });
    let stats = metrics::isc_residual(net, &probes)?;
    report.insert("isc_residual_mean", stats.mean)?;
    report.insert("isc_residual_max", stats.max)?;

    // boundary gap against the teacher's guided velocity, when a teacher is given
    if let Some(teacher_path) = &cfg.teacher {
        let (teacher_net, _) = load_eval_net(teacher_path)?;
        let teacher = TeacherHandle::new(teacher_net, cfg.plan.cfg_scale_w);
        let m = cfg.eval_probes.max(64);
        let (x, labels) = cfg
            .dataset
            .sample_batch(m, &mut substream(cfg.plan.seed, "eval-boundary"))?;
        let mut brng = substream(cfg.plan.seed, "eval-boundary-eps");
        let dim = cfg.dataset.dim();
        let mut z_rows = Vec::with_capacity(m);
        let mut ts = Vec::with_capacity(m);
        for i in 0..m {
            let t: f64 = brng.random();
            let eps: Vec<f64> = (0..dim).map(|_| brng.sample(StandardNormal)).collect();
            z_rows.push(
                x.row(i)
                    .iter()
                    .zip(&eps)
                    .map(|(xv, ev)| (1.0 - t) * xv + t * ev)
                    .collect::<Vec<f64>>(),
            );
            ts.push(t);
        }
        let z = Tensor::from_rows(&z_rows)?;
        let t_col = Tensor::matrix(m, 1, ts)?;
        let ids = labels.filter(|_| labeled);
        let v_ref = teacher.cfg_velocity(&z, &t_col, ids.as_deref())?;
        let mut pred_rows = Vec::with_capacity(m);
        for i in 0..m {
            let zi = Tensor::from_rows(&[z_rows[i].clone()])?;
            let cond_i = ids.as_ref().map(|v| vec![v[i]]);
            let u = net.average_velocity(&zi, t_col.data()[i], t_col.data()[i], cond_i.as_deref())?;
            pred_rows.push(u.row(0).to_vec());
        }
        let pred = Tensor::from_rows(&pred_rows)?;
        report.insert("boundary_gap", metrics::boundary_gap(&pred, &v_ref)?)?;
    }

    // shrinking-interval behavior of the learned field
    let (x, labels) = cfg
        .dataset
        .sample_batch(1, &mut substream(cfg.plan.seed, "eval-limit"))?;
    let mut lrng = substream(cfg.plan.seed, "eval-limit-eps");
    let t_anchor = 0.9;
    let z_anchor: Vec<f64> = x
        .row(0)
        .iter()
        .map(|xv| (1.0 - t_anchor) * xv + t_anchor * lrng.sample::<f64, _>(StandardNormal))
        .collect();
    let cond_anchor = labels.filter(|_| labeled).map(|l| vec![l[0]]);
    let table = limit_theorem_check(
        net,
        &z_anchor,
        0.05,
        t_anchor,
        &default_deltas(),
        cond_anchor.as_deref(),
    )?;
    if let Some(slope) = table.slope {
        report.insert("limit_slope", slope)?;
    }
    if let (Some(first), Some(last)) = (table.rows.first(), table.rows.last()) {
        report.insert("limit_err_coarse", first.error)?;
        report.insert("limit_err_fine", last.error)?;
    }

    report.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok((report, points, cond))
}

fn run_eval(cfg: &RunConfig) -> Result<Executed> {
    let dir = RunDir::create(cfg)?;
    let (net, _) = load_eval_net(cfg.checkpoint.as_ref().expect("validated"))?;
    let (report, points, cond) = evaluate_net(cfg, &net, &cfg.run_id)?;
    dir.write_samples_csv(&points, cond.as_deref())?;
    dir.write_metrics_csv(&cfg.run_id, "eval", &[], &[report.clone()])?;
    let summary = serde_json::json!({
        "run_id": cfg.run_id,
        "command": cfg.command.name(),
        "dataset": cfg.dataset.name(),
        "report": report,
    });
    dir.write_summary(&summary)?;
    Ok(Executed {
        run_dir: dir.root,
        report: Some(report),
    })
}

/// Identity verification over the closed-form fields. Returns overall pass.
pub fn verify_fields(field_arg: &str, out: &mut dyn Write) -> Result<bool> {
    let fields: Vec<AnalyticField> = if field_arg == "all" {
        vec![
            AnalyticField::parse("constant")?,
            AnalyticField::parse("time_poly")?,
            AnalyticField::parse("linear_state")?,
        ]
    } else {
        vec![AnalyticField::parse(field_arg)?]
    };

    let mut all_ok = true;
    for field in &fields {
        let mut rng = substream(0xA11C, "verify");
        // split-consistency residual, weighted (displacement) form
        let mut worst_weighted: f64 = 0.0;
        for _ in 0..1000 {
            let mut ts = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            ts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let [r, s, t] = ts;
            let z_t: Vec<f64> = (0..field.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u_full = field.average_at(&z_t, r, t);
            let u2 = field.average_at(&z_t, s, t);
            let z_s: Vec<f64> = z_t
                .iter()
                .zip(&u2)
                .map(|(zv, uv)| zv - (t - s) * uv)
                .collect();
            let u1 = field.average_at(&z_s, r, s);
            for j in 0..field.dim() {
                let res = (t - r) * u_full[j] - (s - r) * u1[j] - (t - s) * u2[j];
                worst_weighted = worst_weighted.max(res.abs());
            }
        }
        // normalized residual via the metrics scanner
        let probes = make_probes(1000, &mut rng, |_, rng| {
            let z = (0..field.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            (z, None)
        });
        let stats = metrics::isc_residual(field, &probes)?;
        // differential identity
        let mut worst_diff: f64 = 0.0;
        for _ in 0..1000 {
            let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
            let (r, t) = if a <= b { (a, b) } else { (b, a) };
            let z: Vec<f64> = (0..field.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            worst_diff = worst_diff.max(identity_residual_at(field, &z, r, t));
        }
        // limit table
        let z_probe: Vec<f64> = (0..field.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let table = limit_theorem_check(field, &z_probe, 0.02, 0.98, &default_deltas(), None)?;

        let split_ok = worst_weighted < 1e-10 && stats.max < 1e-10;
        let diff_ok = worst_diff < 1e-8;
        let slope_ok = match table.slope {
            Some(s) => (s - 1.0).abs() <= 0.1,
            None => true, // exact at every delta
        };
        all_ok &= split_ok && diff_ok && slope_ok;

        writeln!(out, "field {}:", field.name())?;
        writeln!(
            out,
            "  split-consistency residual  max {:.3e} (weighted {:.3e})  [{}]",
            stats.max,
            worst_weighted,
            if split_ok { "ok" } else { "FAIL" }
        )?;
        writeln!(
            out,
            "  differential identity       max {:.3e}                  [{}]",
            worst_diff,
            if diff_ok { "ok" } else { "FAIL" }
        )?;
        match table.slope {
            Some(s) => writeln!(
                out,
                "  limit slope                 {:.4}                     [{}]",
                s,
                if slope_ok { "ok" } else { "FAIL" }
            )?,
            None => writeln!(out, "  limit slope                 exact (all errors at noise floor)")?,
        }
        for row in &table.rows {
            writeln!(out, "    delta {:>9.1e}  error {:.6e}", row.delta, row.error)?;
        }
    }
    Ok(all_ok)
}
