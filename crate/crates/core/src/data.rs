//! Toy distributions with exact samplers. No data files: generation is a
//! pure function of (parameters, rng), which keeps every test hermetic.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const RING_RADIUS: f64 = 2.0;
const RING_SIGMA: f64 = 0.1;
const BIMODAL_SIGMA: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ToyDataset {
    /// Ring of 8 Gaussians, radius 2, sigma 0.1; component id as class.
    GaussMixture8 { labeled: bool },
    /// Two interleaved half-circles with Gaussian noise; moon id as class.
    TwoMoons { noise: f64, labeled: bool },
    /// Uniform over the 8 dark cells of a 4x4 board on [-2, 2]^2.
    Checkerboard { labeled: bool },
    /// 1-D mixture at +/-1 with sigma 0.2; mode id as class.
    OneDBimodal { labeled: bool },
}

impl ToyDataset {
    pub fn parse(name: &str, labeled: bool, noise: f64) -> Result<ToyDataset> {
        match name {
            "gauss_mixture_8" => Ok(ToyDataset::GaussMixture8 { labeled }),
            "two_moons" => Ok(ToyDataset::TwoMoons { noise, labeled }),
            "checkerboard" => Ok(ToyDataset::Checkerboard { labeled }),
            "one_d_bimodal" => Ok(ToyDataset::OneDBimodal { labeled }),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyDataset::GaussMixture8 { .. } => "gauss_mixture_8",
            ToyDataset::TwoMoons { .. } => "two_moons",
            ToyDataset::Checkerboard { .. } => "checkerboard",
            ToyDataset::OneDBimodal { .. } => "one_d_bimodal",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ToyDataset::OneDBimodal { .. } => 1,
            _ => 2,
        }
    }

    pub fn labeled(&self) -> bool {
        match self {
            ToyDataset::GaussMixture8 { labeled }
            | ToyDataset::TwoMoons { labeled, .. }
            | ToyDataset::Checkerboard { labeled }
            | ToyDataset::OneDBimodal { labeled } => *labeled,
        }
    }

    /// Number of class labels when labeled (0 otherwise).
    pub fn num_classes(&self) -> usize {
        if !self.labeled() {
            return 0;
        }
        match self {
            ToyDataset::GaussMixture8 { .. } => 8,
            ToyDataset::TwoMoons { .. } => 2,
            ToyDataset::Checkerboard { .. } => 8,
            ToyDataset::OneDBimodal { .. } => 2,
        }
    }

    /// `n` i.i.d. draws; labels present iff the dataset is labeled.
    pub fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Option<Vec<usize>>)> {
        if n == 0 {
            return Err(Error::Config("sample_batch needs n >= 1".into()));
        }
        let dim = self.dim();
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            match self {
                ToyDataset::GaussMixture8 { .. } => {
                    let kc = rng.random_range(0..8usize);
                    let angle = 2.0 * PI * kc as f64 / 8.0;
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    data.push(RING_RADIUS * angle.cos() + RING_SIGMA * nx);
                    data.push(RING_RADIUS * angle.sin() + RING_SIGMA * ny);
                    labels.push(kc);
                }
                ToyDataset::TwoMoons { noise, .. } => {
                    let moon = rng.random_range(0..2usize);
                    let theta = rng.random::<f64>() * PI;
                    let (mut px, mut py) = if moon == 0 {
                        (theta.cos(), theta.sin())
                    } else {
                        (1.0 - theta.cos(), 0.5 - theta.sin())
                    };
                    px += noise * rng.sample::<f64, _>(StandardNormal);
                    py += noise * rng.sample::<f64, _>(StandardNormal);
                    data.push(px);
                    data.push(py);
                    labels.push(moon);
                }
                ToyDataset::Checkerboard { .. } => {
                    // 8 dark cells of the 4x4 board, cell width 1 on [-2, 2]^2
                    let cell = rng.random_range(0..8usize);
                    let row = cell / 2;
                    let col_in_row = cell % 2;
                    let col = 2 * col_in_row + (row % 2);
                    let x = -2.0 + col as f64 + rng.random::<f64>();
                    let y = -2.0 + row as f64 + rng.random::<f64>();
                    data.push(x);
                    data.push(y);
                    labels.push(cell);
                }
                ToyDataset::OneDBimodal { .. } => {
                    let mode = rng.random_range(0..2usize);
                    let center = if mode == 0 { -1.0 } else { 1.0 };
                    data.push(center + BIMODAL_SIGMA * rng.sample::<f64, _>(StandardNormal));
                    labels.push(mode);
                }
            }
        }
        let points = Tensor::matrix(n, dim, data)?;
        Ok((points, self.labeled().then_some(labels)))
    }

    /// Write a CSV snapshot of `n` draws for external plotting. Columns are
    /// the point dimensions plus a label column when the dataset is labeled.
    pub fn export(&self, n: usize, rng: &mut ChaCha8Rng, path: &Path) -> Result<()> {
        let (points, labels) = self.sample_batch(n, rng)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for j in 0..self.dim() {
            if j > 0 {
                write!(out, ",")?;
            }
            write!(out, "x{j}")?;
        }
        if labels.is_some() {
            write!(out, ",label")?;
        }
        writeln!(out)?;
        for i in 0..n {
            for (j, v) in points.row(i).iter().enumerate() {
                if j > 0 {
                    write!(out, ",")?;
                }
                write!(out, "{v}")?;
            }
            if let Some(ls) = &labels {
                write!(out, ",{}", ls[i])?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn same_seed_gives_identical_batch() {
        let ds = ToyDataset::GaussMixture8 { labeled: true };
        let (a, la) = ds.sample_batch(64, &mut substream(5, "data")).unwrap();
        let (b, lb) = ds.sample_batch(64, &mut substream(5, "data")).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(la, lb);
    }

    #[test]
    fn ring_mean_norm_is_close_to_radius() {
        let ds = ToyDataset::GaussMixture8 { labeled: false };
        let n = 100_000;
        let (pts, labels) = ds.sample_batch(n, &mut substream(6, "data")).unwrap();
        assert!(labels.is_none());
        let mean_norm: f64 = (0..n)
            .map(|i| (pts.row(i)[0].powi(2) + pts.row(i)[1].powi(2)).sqrt())
            .sum::<f64>()
            / n as f64;
        assert!((mean_norm - 2.0).abs() < 0.05, "mean norm {mean_norm}");
    }

    #[test]
    fn bimodal_mean_is_near_zero() {
        let ds = ToyDataset::OneDBimodal { labeled: false };
        let n = 100_000;
        let (pts, _) = ds.sample_batch(n, &mut substream(7, "data")).unwrap();
        let mean: f64 = pts.data().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn export_writes_one_row_per_point() {
        let dir = std::env::temp_dir().join(format!("smf-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("snap.csv");
        let ds = ToyDataset::TwoMoons { noise: 0.05, labeled: true };
        ds.export(10, &mut substream(9, "data"), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[0], "x0,x1,label");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkerboard_stays_on_dark_cells() {
        let ds = ToyDataset::Checkerboard { labeled: true };
        let (pts, labels) = ds.sample_batch(4096, &mut substream(8, "data")).unwrap();
        for i in 0..4096 {
            let col = (pts.row(i)[0] + 2.0).floor() as i64;
            let row = (pts.row(i)[1] + 2.0).floor() as i64;
            assert!((0..4).contains(&col) && (0..4).contains(&row));
            assert_eq!((row + col) % 2, 0, "light cell hit at row {row} col {col}");
            assert!(labels.as_ref().unwrap()[i] < 8);
        }
    }
}
