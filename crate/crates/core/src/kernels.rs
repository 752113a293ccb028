//! Gaussian kernel, trajectory embedding and the unbiased squared-MMD estimator.

use serde::{Deserialize, Serialize};

use crate::dynamics::TrajectoryBatch;
use crate::error::{check_dim, check_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub lengthscale: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { lengthscale: 1.0 }
    }
}

impl KernelConfig {
    pub fn new(lengthscale: f64) -> Result<Self> {
        let cfg = Self { lengthscale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscale.is_finite() && self.lengthscale > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "kernel lengthscale must be finite and positive, got {}",
                self.lengthscale
            )))
        }
    }
}

/// `m >= 2` samples of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    samples: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "sample set needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let d = samples[0].len();
        for s in &samples {
            check_dim("sample dimension", d, s.len())?;
            check_finite("sample", s.iter())?;
        }
        Ok(Self { samples })
    }

    /// Splits a row-major `m x d` buffer into samples.
    pub fn from_flat(data: &[f64], m: usize, d: usize) -> Result<Self> {
        check_dim("flat sample buffer", m * d, data.len())?;
        Self::new(data.chunks(d.max(1)).take(m).map(<[f64]>::to_vec).collect())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }
}

/// Maps each run to the time series of state component `component`,
/// optionally shifted so that it starts at zero.
pub fn embed(batch: &TrajectoryBatch, component: usize, subtract_initial: bool) -> Result<SampleSet> {
    if component >= batch.state_dim() {
        return Err(Error::InvalidArgument(format!(
            "state index {component} out of range for {} states",
            batch.state_dim()
        )));
    }
    let samples = batch
        .runs()
        .iter()
        .map(|run| {
            let mut v = run.component(component);
            if subtract_initial {
                let x0 = v[0];
                v.iter_mut().for_each(|x| *x -= x0);
            }
            v
        })
        .collect();
    SampleSet::new(samples)
}

/// `exp(-|a - b|^2 / (2 l^2))`.
pub fn gaussian_kernel(a: &[f64], b: &[f64], cfg: &KernelConfig) -> Result<f64> {
    check_dim("kernel arguments", a.len(), b.len())?;
    Ok(kernel_unchecked(a, b, cfg.lengthscale))
}

fn kernel_unchecked(a: &[f64], b: &[f64], lengthscale: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
    (-sq / (2.0 * lengthscale * lengthscale)).exp()
}

/// Unbiased estimate of the squared MMD between two equally sized sample sets.
///
/// Sample `i` of `x` is paired with sample `i` of `y`; only cross terms with
/// `i != j` enter, so the value may be negative.
pub fn mmd2_unbiased(x: &SampleSet, y: &SampleSet, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    let m = x.len();
    check_dim("sample count", m, y.len())?;
    check_dim("sample dimension", x.dim(), y.dim())?;
    if m < 2 {
        return Err(Error::InvalidArgument("MMD needs at least 2 samples per set".into()));
    }
    let ell = cfg.lengthscale;
    let (xs, ys) = (x.samples(), y.samples());
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let kxx = kernel_unchecked(&xs[i], &xs[j], ell);
            let kyy = kernel_unchecked(&ys[i], &ys[j], ell);
            let kxy = kernel_unchecked(&xs[i], &ys[j], ell);
            let kyx = kernel_unchecked(&xs[j], &ys[i], ell);
            total += (kxx + kyy) - kxy - kyx;
        }
    }
    Ok(total / (m * (m - 1)) as f64)
}
