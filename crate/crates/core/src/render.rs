//! Super-resolution density rendering, maximum-intensity projections, line
//! profiles and image export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Frame, FrameStack, GridGeometry};
use crate::localize::Localization;

/// Gaussians are evaluated out to this many sigmas.
pub const SR_TRUNCATE: f64 = 4.0;

/// Accumulated density map on a fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SRImage {
    pub geometry: GridGeometry,
    pub data: Vec<f64>,
    pub n_localizations: usize,
}

/// Read access shared by frames and SR images.
pub trait Raster {
    fn geometry(&self) -> GridGeometry;
    fn value(&self, i: usize, j: usize) -> f64;

    fn values(&self) -> Vec<f64> {
        let g = self.geometry();
        (0..g.ny)
            .flat_map(|i| (0..g.nx).map(move |j| (i, j)))
            .map(|(i, j)| self.value(i, j))
            .collect()
    }
}

impl Raster for Frame {
    fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    fn value(&self, i: usize, j: usize) -> f64 {
        self.get(i, j) as f64
    }
}

impl Raster for SRImage {
    fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    fn value(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.geometry.nx + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Every localization contributes a unit-peak Gaussian.
    #[default]
    Uniform,
    /// Peak scaled by the localization amplitude; for display only.
    Amplitude,
}

/// Sums one unit-peak isotropic Gaussian per localization, in list order.
pub fn accumulate_sr(locs: &[Localization], geometry: GridGeometry, sigma: f64) -> Result<SRImage> {
    accumulate_sr_with(locs, geometry, sigma, Weighting::Uniform)
}

pub fn accumulate_sr_with(
    locs: &[Localization],
    geometry: GridGeometry,
    sigma: f64,
    weighting: Weighting,
) -> Result<SRImage> {
    geometry.validate()?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("SR sigma must be positive, got {sigma}")));
    }
    let g = geometry;
    let mut data = vec![0.0f64; g.len()];
    let reach = SR_TRUNCATE * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for l in locs {
        let amp = match weighting {
            Weighting::Uniform => 1.0,
            Weighting::Amplitude => l.amplitude,
        };
        let (py, px) = g.to_pixel(l.y, l.x);
        let i0 = ((l.y - reach) / g.dy).ceil().max(0.0) as usize;
        let j0 = ((l.x - reach) / g.dx).ceil().max(0.0) as usize;
        let i1 = ((l.y + reach) / g.dy).floor().min((g.ny - 1) as f64);
        let j1 = ((l.x + reach) / g.dx).floor().min((g.nx - 1) as f64);
        if i1 < 0.0 || j1 < 0.0 {
            continue;
        }
        let (i1, j1) = (i1 as usize, j1 as usize);
        for i in i0..=i1 {
            let ey = (i as f64 - py) * g.dy;
            for j in j0..=j1 {
                let ex = (j as f64 - px) * g.dx;
                let r2 = ey * ey + ex * ex;
                if r2 <= reach * reach {
                    data[i * g.nx + j] += amp * (-r2 * inv).exp();
                }
            }
        }
    }
    Ok(SRImage {
        geometry: g,
        data,
        n_localizations: locs.len(),
    })
}

/// Per-pixel maximum over all frames.
pub fn max_intensity_projection(stack: &FrameStack) -> Frame {
    let mut out = stack.frames[0].clone();
    for f in &stack.frames[1..] {
        for (o, &v) in out.data.iter_mut().zip(&f.data) {
            *o = o.max(v);
        }
    }
    out
}

/// Bilinear sample at fractional pixel coordinates inside the grid.
pub fn bilinear<R: Raster + ?Sized>(image: &R, py: f64, px: f64) -> f64 {
    let g = image.geometry();
    let i0 = (py.floor().max(0.0) as usize).min(g.ny - 1);
    let j0 = (px.floor().max(0.0) as usize).min(g.nx - 1);
    let i1 = (i0 + 1).min(g.ny - 1);
    let j1 = (j0 + 1).min(g.nx - 1);
    let ty = py - i0 as f64;
    let tx = px - j0 as f64;
    let top = image.value(i0, j0) * (1.0 - tx) + image.value(i0, j1) * tx;
    let bottom = image.value(i1, j0) * (1.0 - tx) + image.value(i1, j1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// `n` evenly spaced bilinear samples on the segment from `p0` to `p1`
/// (both `(y, x)` in meters), as `(distance from p0, intensity)`.
pub fn line_profile<R: Raster + ?Sized>(
    image: &R,
    p0: (f64, f64),
    p1: (f64, f64),
    n: usize,
) -> Result<Vec<(f64, f64)>> {
    let g = image.geometry();
    if n < 2 {
        return Err(Error::Argument(format!("a profile needs at least 2 samples, got {n}")));
    }
    for p in [p0, p1] {
        if !g.contains(p.0, p.1) {
            return Err(Error::Argument(format!(
                "profile endpoint ({:.3e}, {:.3e}) m lies outside the image",
                p.0, p.1
            )));
        }
    }
    let len = ((p1.0 - p0.0).powi(2) + (p1.1 - p0.1).powi(2)).sqrt();
    Ok((0..n)
        .map(|k| {
            let t = k as f64 / (n - 1) as f64;
            let y = p0.0 + t * (p1.0 - p0.0);
            let x = p0.1 + t * (p1.1 - p0.1);
            let (py, px) = g.to_pixel(y, x);
            (t * len, bilinear(image, py, px))
        })
        .collect())
}

pub fn write_profile_csv(profile: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("distance_m,intensity\n");
    for (d, v) in profile {
        s.push_str(&format!("{d},{v}\n"));
    }
    fs::write(path.as_ref(), s).map_err(|e| Error::io(path.as_ref(), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub min: f64,
    pub max: f64,
    pub geometry: GridGeometry,
}

/// Binary 16-bit PGM (big-endian samples), scaled so the image maximum maps
/// to 65535; negative values clip to 0.
pub fn encode_pgm16<R: Raster + ?Sized>(image: &R) -> (Vec<u8>, ImageSidecar) {
    let g = image.geometry();
    let values = image.values();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut buf = format!("P5\n{} {}\n65535\n", g.nx, g.ny).into_bytes();
    for v in values {
        let q = if max > 0.0 {
            (v / max * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    (buf, ImageSidecar { min, max, geometry: g })
}

/// Writes `path` as PGM and `path` with a `.json` extension as the sidecar.
pub fn write_pgm16<R: Raster + ?Sized>(image: &R, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (bytes, sidecar) = encode_pgm16(image);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = path.with_extension("json");
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}
