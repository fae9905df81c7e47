//! Up-sampling and smoothing of filtered frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InterpMethod {
    Nearest,
    Bilinear,
    #[default]
    Bicubic,
}

impl std::str::FromStr for InterpMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            "bicubic" => Ok(Self::Bicubic),
            other => Err(Error::Argument(format!("unknown interpolation method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub factor_y: usize,
    pub factor_x: usize,
    pub method: InterpMethod,
    /// Gaussian smoothing sigma in meters; 0 disables smoothing.
    pub smooth_sigma: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            factor_y: 12,
            factor_x: 12,
            method: InterpMethod::Bicubic,
            smooth_sigma: 30e-6,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor_y < 1 || self.factor_x < 1 {
            return Err(Error::Config(format!(
                "interpolation factors must be >= 1, got {}x{}",
                self.factor_y, self.factor_x
            )));
        }
        if !(self.smooth_sigma >= 0.0 && self.smooth_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing sigma must be >= 0, got {}",
                self.smooth_sigma
            )));
        }
        Ok(())
    }
}

/// Interpolates then smooths one frame.
pub fn preprocess_frame(frame: &Frame, cfg: &PreprocessConfig) -> Result<Frame> {
    cfg.validate()?;
    let up = interpolate_with(frame, cfg.factor_y, cfg.factor_x, cfg.method)?;
    gaussian_smooth(&up, cfg.smooth_sigma)
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Taps for resampling one axis of length `n` by `factor`: output sample
/// `o` sits at input coordinate `o / factor`.
fn axis_taps(n: usize, factor: usize, method: InterpMethod) -> Vec<Vec<(usize, f64)>> {
    let last = n as isize - 1;
    let clamp = |k: isize| k.clamp(0, last) as usize;
    (0..n * factor)
        .map(|o| {
            let pos = o as f64 / factor as f64;
            let base = pos.floor();
            let t = pos - base;
            let b = base as isize;
            match method {
                InterpMethod::Nearest => vec![(clamp(pos.round() as isize), 1.0)],
                InterpMethod::Bilinear => vec![(clamp(b), 1.0 - t), (clamp(b + 1), t)],
                InterpMethod::Bicubic => (-1..=2)
                    .map(|k| (clamp(b + k), cubic_weight(t - k as f64)))
                    .collect(),
            }
        })
        .collect()
}

pub fn interpolate(frame: &Frame, factor_y: usize, factor_x: usize) -> Result<Frame> {
    interpolate_with(frame, factor_y, factor_x, InterpMethod::Bicubic)
}

/// Separable resampling onto a grid `factor_y x factor_x` times finer, with
/// edge clamping. Input samples are reproduced at aligned output points.
pub fn interpolate_with(
    frame: &Frame,
    factor_y: usize,
    factor_x: usize,
    method: InterpMethod,
) -> Result<Frame> {
    if factor_y < 1 || factor_x < 1 {
        return Err(Error::Argument(format!(
            "interpolation factors must be >= 1, got {factor_y}x{factor_x}"
        )));
    }
    if factor_y == 1 && factor_x == 1 {
        return Ok(frame.clone());
    }
    let (ny, nx) = (frame.ny(), frame.nx());
    let (oy, ox) = (ny * factor_y, nx * factor_x);
    let tx = axis_taps(nx, factor_x, method);
    let ty = axis_taps(ny, factor_y, method);

    let mut rows = vec![0.0f64; ny * ox];
    for i in 0..ny {
        let src = &frame.data[i * nx..(i + 1) * nx];
        let dst = &mut rows[i * ox..(i + 1) * ox];
        for (d, taps) in dst.iter_mut().zip(&tx) {
            *d = taps.iter().map(|&(k, w)| w * src[k] as f64).sum();
        }
    }
    let mut data = vec![0.0f32; oy * ox];
    for (o, taps) in ty.iter().enumerate() {
        let dst = &mut data[o * ox..(o + 1) * ox];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = taps.iter().map(|&(k, w)| w * rows[k * ox + j]).sum::<f64>() as f32;
        }
    }
    Ok(Frame {
        geometry: frame.geometry.upsampled(factor_y, factor_x),
        data,
    })
}

/// Unit-sum Gaussian taps for a pixel sigma, truncated at `truncate * sigma`.
/// A zero sigma gives the identity kernel.
pub(crate) fn gaussian_kernel(sigma_px: f64, truncate: f64) -> Vec<f64> {
    if sigma_px <= 0.0 {
        return vec![1.0];
    }
    let radius = (truncate * sigma_px).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma_px * sigma_px)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// Separable convolution with edge replication, computed in f64.
pub(crate) fn convolve_separable(
    data: &[f32],
    ny: usize,
    nx: usize,
    ky: &[f64],
    kx: &[f64],
) -> Vec<f64> {
    let ry = (ky.len() / 2) as isize;
    let rx = (kx.len() / 2) as isize;
    let mut tmp = vec![0.0f64; ny * nx];
    for i in 0..ny {
        let row = &data[i * nx..(i + 1) * nx];
        for j in 0..nx {
            let mut acc = 0.0;
            for (t, &w) in kx.iter().enumerate() {
                let jj = (j as isize + t as isize - rx).clamp(0, nx as isize - 1) as usize;
                acc += w * row[jj] as f64;
            }
            tmp[i * nx + j] = acc;
        }
    }
    let mut out = vec![0.0f64; ny * nx];
    for i in 0..ny {
        for (t, &w) in ky.iter().enumerate() {
            let ii = (i as isize + t as isize - ry).clamp(0, ny as isize - 1) as usize;
            let src = &tmp[ii * nx..(ii + 1) * nx];
            for (o, &s) in out[i * nx..(i + 1) * nx].iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    out
}

/// Gaussian smoothing with a physical sigma: per-axis pixel sigmas are
/// `sigma_m / dy` and `sigma_m / dx`, kernels truncated at 3 sigma.
pub fn gaussian_smooth(frame: &Frame, sigma_m: f64) -> Result<Frame> {
    if !(sigma_m >= 0.0 && sigma_m.is_finite()) {
        return Err(Error::Argument(format!("sigma must be >= 0, got {sigma_m}")));
    }
    if sigma_m == 0.0 {
        return Ok(frame.clone());
    }
    let g = frame.geometry;
    let ky = gaussian_kernel(sigma_m / g.dy, 3.0);
    let kx = gaussian_kernel(sigma_m / g.dx, 3.0);
    let out = convolve_separable(&frame.data, g.ny, g.nx, &ky, &kx);
    Ok(Frame {
        geometry: g,
        data: out.into_iter().map(|v| v as f32).collect(),
    })
}
