use crate::autodiff::{convolve_same, kernel_average};
use crate::error::{Error, Result};

/// Normalized Gaussian kernel of odd size `s = 2M + 1`:
/// `K[m] = exp(-(m-M-1)^2 / 2 sigma^2) / sum_i exp(-(i-M-1)^2 / 2 sigma^2)`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("kernel std must be > 0, got {sigma}")));
    }
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|j| {
            let d = j as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Gaussian kernels paired index-wise from size and std lists.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    kernels: Vec<Vec<f64>>,
}

impl KernelBank {
    pub fn new(sizes: &[usize], stds: &[f64]) -> Result<Self> {
        if sizes.is_empty() || sizes.len() != stds.len() {
            return Err(Error::InvalidArgument(format!(
                "need equally many kernel sizes ({}) and stds ({}), at least one",
                sizes.len(),
                stds.len()
            )));
        }
        let kernels = sizes
            .iter()
            .zip(stds)
            .map(|(&s, &sd)| gaussian_kernel(s, sd))
            .collect::<Result<_>>()?;
        Ok(Self { kernels })
    }

    pub fn kernels(&self) -> &[Vec<f64>] {
        &self.kernels
    }

    pub fn max_len(&self) -> usize {
        self.kernels.iter().map(Vec::len).max().unwrap_or(1)
    }
}

/// `(1/m) sum_i delta (*) K_i`, zero-padded, same length as `delta`.
pub fn smooth_perturbation(delta: &[f64], bank: &KernelBank) -> Result<Vec<f64>> {
    if delta.len() < bank.max_len() {
        return Err(Error::InvalidArgument(format!(
            "perturbation length {} is shorter than the largest kernel ({})",
            delta.len(),
            bank.max_len()
        )));
    }
    Ok(kernel_average(delta, &bank.kernels))
}

/// Hanning window of odd length without the zero endpoints, normalized to sum 1.
pub fn hanning_window(len: usize) -> Result<Vec<f64>> {
    if len % 2 == 0 {
        return Err(Error::InvalidArgument(format!("window length must be odd, got {len}")));
    }
    let raw: Vec<f64> = (1..=len)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / (len + 1) as f64).cos()))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Low-pass filtering by convolution with a normalized Hanning window
/// (zero-padded edges).
pub fn hanning_filter(signal: &[f64], window: usize) -> Result<Vec<f64>> {
    let w = hanning_window(window)?;
    Ok(convolve_same(signal, &w))
}
