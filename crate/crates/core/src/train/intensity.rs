//! Histogram landmark standardisation followed by foreground z-scoring.
//! Background voxels (at or below the foreground threshold) are set to 0,
//! the value used to pad volumes at prediction time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StandardizeMode {
    /// Foreground threshold drawn uniformly between the minimum and the mean.
    Train,
    /// Foreground threshold fixed at the mean.
    Test,
}

pub const LANDMARKS: usize = 11;

/// Reference intensities for the foreground deciles (0th, 10th, ..., 100th
/// percentile). Foreground intensities are mapped piecewise linearly so that
/// each volume's deciles land on these values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationModel {
    pub reference: [f64; LANDMARKS],
}

impl Default for StandardizationModel {
    fn default() -> Self {
        let mut reference = [0.0; LANDMARKS];
        for (i, r) in reference.iter_mut().enumerate() {
            *r = 10.0 * i as f64;
        }
        StandardizationModel { reference }
    }
}

fn foreground(volume: &[f32], tau: f64) -> Vec<f64> {
    volume.iter().map(|&v| v as f64).filter(|&v| v > tau).collect()
}

fn mean_and_min(volume: &[f32]) -> (f64, f64) {
    let n = volume.len() as f64;
    let mean = volume.iter().map(|&v| v as f64).sum::<f64>() / n;
    let min = volume.iter().map(|&v| v as f64).fold(f64::INFINITY, f64::min);
    (mean, min)
}

/// Deciles of `values` by linear interpolation between order statistics.
fn deciles(values: &mut [f64]) -> [f64; LANDMARKS] {
    values.sort_by(|a, b| a.total_cmp(b));
    let last = (values.len() - 1) as f64;
    let mut out = [0.0; LANDMARKS];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = last * i as f64 / (LANDMARKS - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        *o = values[lo] + (values[hi] - values[lo]) * (pos - lo as f64);
    }
    out
}

/// Landmarks rescaled so the lowest maps to 0 and the highest to 100.
fn normalised_deciles(d: &[f64; LANDMARKS]) -> Option<[f64; LANDMARKS]> {
    let span = d[LANDMARKS - 1] - d[0];
    (span > 0.0).then(|| d.map(|v| 100.0 * (v - d[0]) / span))
}

impl StandardizationModel {
    /// Averages the normalised foreground deciles (test-mode threshold) of
    /// `volumes`.
    pub fn fit<'a>(volumes: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut acc = [0.0; LANDMARKS];
        let mut n = 0usize;
        for v in volumes {
            let (mean, _) = mean_and_min(v.data());
            let mut fg = foreground(v.data(), mean);
            if fg.len() < 2 {
                continue;
            }
            if let Some(d) = normalised_deciles(&deciles(&mut fg)) {
                for (a, x) in acc.iter_mut().zip(d) {
                    *a += x;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid("no volume with a non-constant foreground"));
        }
        Ok(StandardizationModel {
            reference: acc.map(|a| a / n as f64),
        })
    }

    fn map(&self, landmarks: &[f64; LANDMARKS], v: f64) -> f64 {
        let r = &self.reference;
        // Locate the segment; the first and last segments extend linearly.
        let mut seg = LANDMARKS - 2;
        for i in 0..LANDMARKS - 1 {
            if v <= landmarks[i + 1] {
                seg = i;
                break;
            }
        }
        let (x0, x1) = (landmarks[seg], landmarks[seg + 1]);
        if x1 <= x0 {
            return r[seg];
        }
        r[seg] + (v - x0) * (r[seg + 1] - r[seg]) / (x1 - x0)
    }

    /// Standardises a single-channel volume.
    pub fn apply(&self, volume: &Tensor<f32>, mode: StandardizeMode, rng: &mut Rng) -> Result<Tensor<f32>> {
        let data = volume.data();
        let (mean, min) = mean_and_min(data);
        if data.iter().all(|&v| v as f64 == min) {
            return Err(Error::invalid("constant volume cannot be standardised"));
        }
        let tau = match mode {
            StandardizeMode::Train => rng.uniform(min, mean),
            StandardizeMode::Test => mean,
        };
        let mut fg = foreground(data, tau);
        if fg.len() < 2 {
            return Err(Error::invalid("foreground has fewer than two voxels"));
        }
        let landmarks = deciles(&mut fg);
        let mapped: Vec<f64> = data.iter().map(|&v| self.map(&landmarks, v as f64)).collect();
        let fg_mapped: Vec<f64> = data
            .iter()
            .zip(&mapped)
            .filter(|(&v, _)| v as f64 > tau)
            .map(|(_, &m)| m)
            .collect();
        let n = fg_mapped.len() as f64;
        let fmean = fg_mapped.iter().sum::<f64>() / n;
        let fstd = (fg_mapped.iter().map(|m| (m - fmean).powi(2)).sum::<f64>() / n).sqrt();
        if fstd.is_nan() || fstd <= 0.0 {
            return Err(Error::invalid("foreground has zero spread"));
        }
        Tensor::from_vec(
            volume.dims().to_vec(),
            data.iter()
                .zip(&mapped)
                .map(|(&v, m)| if v as f64 > tau { ((m - fmean) / fstd) as f32 } else { 0.0 })
                .collect(),
        )
    }
}

/// [`StandardizationModel::apply`] with the default reference scale.
pub fn standardize_intensity(volume: &Tensor<f32>, mode: StandardizeMode, rng: &mut Rng) -> Result<Tensor<f32>> {
    StandardizationModel::default().apply(volume, mode, rng)
}
