//! Quality and identity diagnostics: kernel MMD, exact 1-D Wasserstein-2,
//! the split-consistency residual scanner, and the shrinking-interval limit
//! check that ties the algebraic identity to the differential one.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::flow::AverageVelocityField;

/// Named scalar results emitted per run. Scalars must be finite.
#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub run_id: String,
    pub objective: String,
    pub step: usize,
    pub wall_ms: f64,
    pub scalars: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(run_id: &str, objective: &str, step: usize) -> MetricReport {
        MetricReport {
            run_id: run_id.to_string(),
            objective: objective.to_string(),
            step,
            wall_ms: 0.0,
            scalars: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Poisoned {
                context: format!("metric {name}"),
            });
        }
        self.scalars.insert(name.to_string(), value);
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(name: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Median pairwise distance over the pooled sample, the default bandwidth.
pub fn median_heuristic_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_points("bandwidth", a, b)?;
    let mut d = Vec::new();
    let rows: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    // cap the pool so the heuristic stays O(10^6) even for large sets
    let cap = rows.len().min(512);
    for i in 0..cap {
        for j in (i + 1)..cap {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    d.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
    let m = d.len();
    if m == 0 {
        return Ok(1.0);
    }
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    Ok(if med > 0.0 { med } else { 1.0 })
}

/// Unbiased squared-MMD estimate with the RBF kernel
/// `k(x, y) = exp(-||x - y||^2 / (2 bw^2))`. May be slightly negative for
/// identical distributions.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    mmd_rbf_impl(a, b, bandwidth, false)
}

/// Biased (V-statistic) squared-MMD estimate; zero for identical point sets.
pub fn mmd_rbf_biased(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    mmd_rbf_impl(a, b, bandwidth, true)
}

fn mmd_rbf_impl(a: &Tensor, b: &Tensor, bandwidth: f64, biased: bool) -> Result<f64> {
    check_points("mmd_rbf", a, b)?;
    if bandwidth <= 0.0 {
        return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let (m, n) = (a.rows(), b.rows());
    if m < 2 || n < 2 {
        return Err(Error::Config("mmd_rbf needs at least 2 points per set".into()));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let kern = |x: &[f64], y: &[f64]| (-gamma * sq_dist(x, y)).exp();

    let mut kaa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if biased || i != j {
                kaa += kern(a.row(i), a.row(j));
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if biased || i != j {
                kbb += kern(b.row(i), b.row(j));
            }
        }
    }
    let mut kab = 0.0;
    for i in 0..m {
        for j in 0..n {
            kab += kern(a.row(i), b.row(j));
        }
    }
    let (na, nb) = if biased {
        ((m * m) as f64, (n * n) as f64)
    } else {
        ((m * (m - 1)) as f64, (n * (n - 1)) as f64)
    };
    Ok(kaa / na + kbb / nb - 2.0 * kab / ((m * n) as f64))
}

/// Exact empirical Wasserstein-2 distance between 1-D samples: the RMS gap
/// between sorted samples. Unequal sizes are aligned by evaluating both
/// empirical quantile functions at shared mid-quantiles.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("w2_1d needs nonempty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    if sa.len() == sb.len() {
        let n = sa.len() as f64;
        let ms: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        return Ok(ms.sqrt());
    }
    let k = sa.len().max(sb.len());
    let quantile = |s: &[f64], q: f64| -> f64 {
        // mid-point empirical quantile with linear interpolation
        let pos = q * s.len() as f64 - 0.5;
        let lo = pos.floor();
        let frac = pos - lo;
        let i = lo as isize;
        let get = |j: isize| s[j.clamp(0, s.len() as isize - 1) as usize];
        get(i) * (1.0 - frac) + get(i + 1) * frac
    };
    let ms: f64 = (0..k)
        .map(|i| {
            let q = (i as f64 + 0.5) / k as f64;
            let d = quantile(&sa, q) - quantile(&sb, q);
            d * d
        })
        .sum::<f64>()
        / k as f64;
    Ok(ms.sqrt())
}

/// One consistency probe: a state with an ordered time triple.
#[derive(Clone, Debug)]
pub struct Probe {
    pub z_t: Vec<f64>,
    pub r: f64,
    pub s: f64,
    pub t: f64,
    pub cond: Option<usize>,
}

/// Random probes: `z_t` from the supplied closure, (r, s, t) three sorted
/// uniforms redrawn until t - r is large enough for the split weight to be
/// well conditioned.
pub fn make_probes<F>(n: usize, rng: &mut ChaCha8Rng, mut z_at: F) -> Vec<Probe>
where
    F: FnMut(f64, &mut ChaCha8Rng) -> (Vec<f64>, Option<usize>),
{
    let mut probes = Vec::with_capacity(n);
    while probes.len() < n {
        let mut ts = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        ts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let [r, s, t] = ts;
        if t - r < 0.05 {
            continue;
        }
        let (z_t, cond) = z_at(t, rng);
        probes.push(Probe { z_t, r, s, t, cond });
    }
    probes
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualStats {
    pub mean: f64,
    pub max: f64,
}

/// Split-consistency residual of a field over probes, with the intermediate
/// state taken from the field's own displacement map
/// (`z_s = z_t - (t - s) u(z_t, s, t)`), exactly as the trainer builds it:
/// `|| u(z_t, r, t) - (1 - lambda) u(z_s, r, s) - lambda u(z_t, s, t) ||`.
pub fn isc_residual(field: &dyn AverageVelocityField, probes: &[Probe]) -> Result<ResidualStats> {
    if probes.is_empty() {
        return Err(Error::Config("isc_residual needs probes".into()));
    }
    let mut mean = 0.0;
    let mut max: f64 = 0.0;
    for p in probes {
        let cond_vec = p.cond.map(|c| vec![c]);
        let cond = cond_vec.as_deref();
        let z_t = Tensor::from_rows(&[p.z_t.clone()])?;
        let u_full = field.average_velocity(&z_t, p.r, p.t, cond)?;
        let u2 = field.average_velocity(&z_t, p.s, p.t, cond)?;
        let z_s_row: Vec<f64> = p
            .z_t
            .iter()
            .zip(u2.row(0))
            .map(|(zv, uv)| zv - (p.t - p.s) * uv)
            .collect();
        let z_s = Tensor::from_rows(&[z_s_row])?;
        let u1 = field.average_velocity(&z_s, p.r, p.s, cond)?;
        let lambda = (p.t - p.s) / (p.t - p.r);
        let res: Vec<f64> = (0..p.z_t.len())
            .map(|j| u_full.row(0)[j] - (1.0 - lambda) * u1.row(0)[j] - lambda * u2.row(0)[j])
            .collect();
        let norm = kernels::l2_norm(&res);
        mean += norm;
        max = max.max(norm);
    }
    Ok(ResidualStats {
        mean: mean / probes.len() as f64,
        max,
    })
}

/// One row of the limit table: interval length and quotient error.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LimitRow {
    pub delta: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LimitTable {
    pub rows: Vec<LimitRow>,
    /// Log-log slope of error vs delta, fitted by least squares over the
    /// rows above the floating-point noise floor. None when every error is
    /// at noise level (e.g. the constant field, where the quotient is exact).
    pub slope: Option<f64>,
}

/// Quotient errors at or below this are cancellation noise from the
/// `(g(t) - g(s)) / delta` difference, not signal.
pub const LIMIT_NOISE_FLOOR: f64 = 1e-9;

/// Default geometric ladder 1e-1 .. 1e-6.
pub fn default_deltas() -> Vec<f64> {
    (1..=6).map(|k| 10f64.powi(-k)).collect()
}

/// Shrinking-interval check: with `g(tau) = (tau - r) u(z_tau, r, tau)`
/// accumulated along the field's own displacement map, the quotient
/// `(g(t) - g(s)) / (t - s)` must converge to `v(z_t, t)` as `s -> t`.
/// Reports the error at each delta and the fitted convergence order.
pub fn limit_theorem_check(
    field: &dyn AverageVelocityField,
    z_t: &[f64],
    r: f64,
    t: f64,
    deltas: &[f64],
    cond: Option<&[usize]>,
) -> Result<LimitTable> {
    if !(r < t) {
        return Err(Error::Config(format!("limit check needs r < t, got r={r} t={t}")));
    }
    let z = Tensor::from_rows(&[z_t.to_vec()])?;
    let v = field.instantaneous_velocity(&z, t, cond)?;
    let u_full = field.average_velocity(&z, r, t, cond)?;
    let g_t: Vec<f64> = u_full.row(0).iter().map(|u| (t - r) * u).collect();

    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let s = t - delta;
        if s <= r {
            return Err(Error::Config(format!("delta {delta} leaves no room above r={r}")));
        }
        let u2 = field.average_velocity(&z, s, t, cond)?;
        let z_s_row: Vec<f64> = z_t
            .iter()
            .zip(u2.row(0))
            .map(|(zv, uv)| zv - delta * uv)
            .collect();
        let z_s = Tensor::from_rows(&[z_s_row])?;
        let u1 = field.average_velocity(&z_s, r, s, cond)?;
        let quotient: Vec<f64> = u1
            .row(0)
            .iter()
            .zip(&g_t)
            .map(|(u1v, gtv)| (gtv - (s - r) * u1v) / delta)
            .collect();
        let err: Vec<f64> = quotient.iter().zip(v.row(0)).map(|(q, vv)| q - vv).collect();
        rows.push(LimitRow {
            delta,
            error: kernels::l2_norm(&err),
        });
    }

    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.error > LIMIT_NOISE_FLOOR)
        .map(|r| (r.delta.ln(), r.error.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        Some((n * sxy - sx * sy) / (n * sxx - sx * sx))
    } else {
        None
    };
    Ok(LimitTable { rows, slope })
}

/// Relative boundary consistency gap
/// `E ||u(z, t, t) - v_target||^2 / E ||v_target||^2` over aligned rows.
pub fn boundary_gap(pred_boundary: &Tensor, target_v: &Tensor) -> Result<f64> {
    check_points("boundary_gap", pred_boundary, target_v)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..pred_boundary.rows() {
        num += sq_dist(pred_boundary.row(i), target_v.row(i));
        den += target_v.row(i).iter().map(|v| v * v).sum::<f64>();
    }
    if den == 0.0 {
        return Err(Error::Config("boundary_gap target has zero norm".into()));
    }
    Ok(num / den)
}
