//! Python bindings: the main types and operations — toy datasets, the two
//! trainers, few-step/Euler sampling, checkpoints, quality metrics and the
//! analytic identity checks — exposed as the `splitmeanflow_py` module.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use splitmeanflow::autodiff::Tensor;
use splitmeanflow::checkpoint;
use splitmeanflow::data::ToyDataset;
use splitmeanflow::error::Error;
use splitmeanflow::flow::{AnalyticField, AverageVelocityField, TimeDist};
use splitmeanflow::meanflow::identity_residual_at;
use splitmeanflow::metrics::{
    default_deltas, limit_theorem_check, make_probes, median_heuristic_bandwidth,
};
use splitmeanflow::model::{NetConfig, VelocityNet};
use splitmeanflow::rng::substream;
use splitmeanflow::sampler::{euler_sample, few_step_sample};
use splitmeanflow::smf::{self, Objective, TeacherHandle, TrainMode, TrainPlan};

use rand::Rng;
use rand_distr::StandardNormal;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn dataset_of(name: &str, labeled: bool) -> PyResult<ToyDataset> {
    ToyDataset::parse(name, labeled, 0.1).map_err(py_err)
}

/// A trained average-velocity model plus its EMA shadow and plan.
#[pyclass]
struct Model {
    net: VelocityNet,
    ema: Option<VelocityNet>,
    plan: TrainPlan,
    objective: String,
}

impl Model {
    fn eval_net(&self) -> &VelocityNet {
        if self.plan.use_ema {
            self.ema.as_ref().unwrap_or(&self.net)
        } else {
            &self.net
        }
    }

    fn prior(&self, n: usize, seed: u64) -> (Tensor, Option<Vec<usize>>) {
        let dim = self.net.config().data_dim;
        let mut rng = substream(seed, "py-prior");
        let eps: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
        let cond = self.net.config().is_conditional().then(|| {
            let mut crng = substream(seed, "py-cond");
            (0..n)
                .map(|_| crng.random_range(0..self.net.config().num_classes))
                .collect()
        });
        (Tensor::matrix(n, dim, eps).expect("prior shape"), cond)
    }
}

#[pymethods]
impl Model {
    #[getter]
    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    #[getter]
    fn data_dim(&self) -> usize {
        self.net.config().data_dim
    }

    #[getter]
    fn objective(&self) -> String {
        self.objective.clone()
    }

    /// Draw n points with k average-velocity steps (no guidance).
    #[pyo3(signature = (n, k=1, seed=0))]
    fn sample(&self, n: usize, k: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let (eps, cond) = self.prior(n, seed);
        let out = few_step_sample(self.eval_net(), k, &eps, cond.as_deref()).map_err(py_err)?;
        Ok(rows_of(&out))
    }

    /// Draw n points by Euler integration of the instantaneous field,
    /// optionally with guidance scale w.
    #[pyo3(signature = (n, steps=10, seed=0, cfg_scale=None))]
    fn euler_sample(
        &self,
        n: usize,
        steps: usize,
        seed: u64,
        cfg_scale: Option<f64>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let (eps, cond) = self.prior(n, seed);
        let out = euler_sample(self.eval_net(), steps, &eps, cond.as_deref(), cfg_scale)
            .map_err(py_err)?;
        Ok(rows_of(&out))
    }

    /// u(z, r, t) for a batch of states.
    #[pyo3(signature = (z, r, t, cond=None))]
    fn average_velocity(
        &self,
        z: Vec<Vec<f64>>,
        r: f64,
        t: f64,
        cond: Option<Vec<usize>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let z = Tensor::from_rows(&z).map_err(py_err)?;
        let out = self
            .eval_net()
            .average_velocity(&z, r, t, cond.as_deref())
            .map_err(py_err)?;
        Ok(rows_of(&out))
    }

    /// Mean split-consistency residual over path-shaped probes.
    #[pyo3(signature = (dataset, n_probes=256, seed=0))]
    fn isc_residual(&self, dataset: &str, n_probes: usize, seed: u64) -> PyResult<f64> {
        let ds = dataset_of(dataset, self.net.config().is_conditional())?;
        let labeled = ds.labeled() && self.net.config().is_conditional();
        let mut rng = substream(seed, "py-probes");
        let probes = make_probes(n_probes, &mut rng, |t, rng| {
            let (x, labels) = ds.sample_batch(1, rng).expect("probe draw");
            let z: Vec<f64> = x
                .row(0)
                .iter()
                .map(|xv| (1.0 - t) * xv + t * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (z, labeled.then(|| labels.expect("labels")[0]))
        });
        let stats = splitmeanflow::metrics::isc_residual(self.eval_net(), &probes).map_err(py_err)?;
        Ok(stats.mean)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.net, self.ema.as_ref(), &self.plan, &PathBuf::from(path))
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let (net, ema, plan) = checkpoint::load(&PathBuf::from(path)).map_err(py_err)?;
        Ok(Model {
            net,
            ema,
            plan,
            objective: "loaded".into(),
        })
    }
}

fn base_plan(
    dataset: &ToyDataset,
    steps: usize,
    seed: u64,
    batch_size: usize,
    lr: f64,
    hidden_dim: usize,
) -> TrainPlan {
    TrainPlan {
        steps,
        seed,
        batch_size,
        lr,
        warmup_steps: (steps / 20).max(1),
        time_dist: TimeDist::SortedUniform,
        net: NetConfig {
            data_dim: dataset.dim(),
            hidden_dim,
            hidden_layers: 3,
            time_embed_dim: 32,
            num_classes: dataset.num_classes(),
            cond_embed_dim: 32,
        },
        ..TrainPlan::default()
    }
}

/// Flow matching pretraining (boundary-only objective) on a toy dataset.
#[pyfunction]
#[pyo3(signature = (dataset, steps, seed=0, labeled=true, batch_size=64, lr=3e-4, hidden_dim=128, cfg_dropout=0.1))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    dataset: &str,
    steps: usize,
    seed: u64,
    labeled: bool,
    batch_size: usize,
    lr: f64,
    hidden_dim: usize,
    cfg_dropout: f64,
) -> PyResult<Model> {
    let ds = dataset_of(dataset, labeled)?;
    let plan = TrainPlan {
        mode: TrainMode::FromScratch,
        flow_ratio_p: 1.0,
        cfg_dropout_pretrain: cfg_dropout,
        ..base_plan(&ds, steps, seed, batch_size, lr, hidden_dim)
    };
    let out = smf::train(&plan, &ds, None, Objective::SplitMeanFlow, None).map_err(py_err)?;
    Ok(Model {
        net: out.net,
        ema: out.ema,
        plan,
        objective: "flow_matching".into(),
    })
}

/// Distill an average-velocity student from a pretrained teacher. The
/// `objective` is "splitmeanflow" (default) or "meanflow".
#[pyfunction]
#[pyo3(signature = (teacher, dataset, steps, seed=0, p=0.75, cfg_scale=2.0, batch_size=64, lr=1e-4, objective="splitmeanflow"))]
#[allow(clippy::too_many_arguments)]
fn distill(
    teacher: &Model,
    dataset: &str,
    steps: usize,
    seed: u64,
    p: f64,
    cfg_scale: f64,
    batch_size: usize,
    lr: f64,
    objective: &str,
) -> PyResult<Model> {
    let labeled = teacher.net.config().is_conditional();
    let ds = dataset_of(dataset, labeled)?;
    let obj = match objective {
        "splitmeanflow" => Objective::SplitMeanFlow,
        "meanflow" => Objective::MeanFlow,
        other => return Err(PyValueError::new_err(format!("unknown objective `{other}`"))),
    };
    let plan = TrainPlan {
        mode: TrainMode::Distill,
        flow_ratio_p: p,
        cfg_scale_w: cfg_scale,
        net: teacher.net.config().clone(),
        ..base_plan(&ds, steps, seed, batch_size, lr, teacher.net.config().hidden_dim)
    };
    let handle = TeacherHandle::new(
        teacher
            .eval_net()
            .with_param_blocks(&teacher.eval_net().param_blocks())
            .map_err(py_err)?,
        cfg_scale,
    );
    let out = smf::train(&plan, &ds, Some(&handle), obj, None).map_err(py_err)?;
    Ok(Model {
        net: out.net,
        ema: out.ema,
        plan,
        objective: objective.into(),
    })
}

/// Exact sampler draws from a toy dataset: (points, labels-or-None).
#[pyfunction]
#[pyo3(signature = (name, n, seed=0, labeled=true))]
fn sample_dataset(
    name: &str,
    n: usize,
    seed: u64,
    labeled: bool,
) -> PyResult<(Vec<Vec<f64>>, Option<Vec<usize>>)> {
    let ds = dataset_of(name, labeled)?;
    let (points, labels) = ds
        .sample_batch(n, &mut substream(seed, "py-data"))
        .map_err(py_err)?;
    Ok((rows_of(&points), labels))
}

/// Unbiased squared-MMD with the RBF kernel; bandwidth defaults to the
/// median pairwise-distance heuristic.
#[pyfunction]
#[pyo3(signature = (a, b, bandwidth=None))]
fn mmd_rbf(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, bandwidth: Option<f64>) -> PyResult<f64> {
    let a = Tensor::from_rows(&a).map_err(py_err)?;
    let b = Tensor::from_rows(&b).map_err(py_err)?;
    let bw = match bandwidth {
        Some(v) => v,
        None => median_heuristic_bandwidth(&a, &b).map_err(py_err)?,
    };
    splitmeanflow::metrics::mmd_rbf(&a, &b, bw).map_err(py_err)
}

/// Exact empirical 1-D Wasserstein-2 distance.
#[pyfunction]
fn w2_1d(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    splitmeanflow::metrics::w2_1d(&a, &b).map_err(py_err)
}

/// Identity diagnostics of a closed-form field; returns a dict with the
/// worst split-consistency residual, worst differential-identity residual
/// and the fitted limit slope (NaN when the errors sit at the noise floor).
#[pyfunction]
fn verify_field(name: &str) -> PyResult<HashMap<String, f64>> {
    let field = AnalyticField::parse(name).map_err(py_err)?;
    let mut rng = substream(0xA11C, "py-verify");
    let probes = make_probes(1000, &mut rng, |_, rng| {
        let z = (0..field.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        (z, None)
    });
    let stats = splitmeanflow::metrics::isc_residual(&field, &probes).map_err(py_err)?;
    let mut worst_diff: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        let (r, t) = if a <= b { (a, b) } else { (b, a) };
        let z: Vec<f64> = (0..field.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        worst_diff = worst_diff.max(identity_residual_at(&field, &z, r, t));
    }
    let z_probe: Vec<f64> = (0..field.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let table =
        limit_theorem_check(&field, &z_probe, 0.02, 0.98, &default_deltas(), None).map_err(py_err)?;
    let mut out = HashMap::new();
    out.insert("isc_residual_max".to_string(), stats.max);
    out.insert("isc_residual_mean".to_string(), stats.mean);
    out.insert("meanflow_residual_max".to_string(), worst_diff);
    out.insert("limit_slope".to_string(), table.slope.unwrap_or(f64::NAN));
    Ok(out)
}

#[pymodule]
fn splitmeanflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(sample_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(mmd_rbf, m)?)?;
    m.add_function(wrap_pyfunction!(w2_1d, m)?)?;
    m.add_function(wrap_pyfunction!(verify_field, m)?)?;
    Ok(())
}
