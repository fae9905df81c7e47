//! Contrast-to-noise ratio, vessel-mask accuracy, the diffraction-limited
//! upper bound on separable sources and noise injection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Frame, FrameStack, VesselMask};
use crate::localize::Localization;
use crate::render::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cnr {
    pub linear: f64,
    /// `20 log10(linear)`, or negative infinity when `linear <= 0`.
    #[serde(with = "db_serde")]
    pub db: f64,
}

mod db_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

impl Cnr {
    pub fn from_linear(linear: f64) -> Self {
        let db = if linear > 0.0 {
            20.0 * linear.log10()
        } else {
            f64::NEG_INFINITY
        };
        Self { linear, db }
    }
}

/// Mean and sample standard deviation of the listed pixels.
fn mean_std<R: Raster + ?Sized>(image: &R, pixels: &[(usize, usize)]) -> (f64, f64) {
    let n = pixels.len() as f64;
    let mean = pixels.iter().map(|&(i, j)| image.value(i, j)).sum::<f64>() / n;
    let var = pixels
        .iter()
        .map(|&(i, j)| (image.value(i, j) - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    (mean, var.sqrt())
}

fn check_pixels(g: &crate::grid::GridGeometry, pixels: &[(usize, usize)], what: &str) -> Result<()> {
    if let Some(&(i, j)) = pixels.iter().find(|&&(i, j)| i >= g.ny || j >= g.nx) {
        return Err(Error::Argument(format!("{what} pixel ({i}, {j}) outside the image")));
    }
    Ok(())
}

/// `(mean ROI intensity - mean_bg) / std_bg`, with the sample standard
/// deviation of the background.
pub fn cnr<R: Raster + ?Sized>(image: &R, roi: &[(usize, usize)], bg: &[(usize, usize)]) -> Result<Cnr> {
    let g = image.geometry();
    check_pixels(&g, roi, "ROI")?;
    check_pixels(&g, bg, "background")?;
    if roi.is_empty() {
        return Err(Error::Argument("ROI is empty".into()));
    }
    if bg.len() < 2 {
        return Err(Error::Degenerate(format!(
            "background needs at least 2 pixels, got {}",
            bg.len()
        )));
    }
    let (mu, sigma) = mean_std(image, bg);
    if !(sigma > 0.0) {
        return Err(Error::Degenerate("background standard deviation is zero".into()));
    }
    let roi_mean = roi.iter().map(|&(i, j)| image.value(i, j)).sum::<f64>() / roi.len() as f64;
    Ok(Cnr::from_linear((roi_mean - mu) / sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnrSummary {
    pub median_db: Option<f64>,
    pub min_db: Option<f64>,
    pub max_db: Option<f64>,
    pub q25_db: Option<f64>,
    pub q75_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnrReport {
    pub values: Vec<Cnr>,
    pub background_pixels: usize,
    pub summary: CnrSummary,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// CNR at each ROI against one shared background, summarized in dB.
/// Summary statistics skip the `-inf` sentinel.
pub fn cnr_report<R: Raster + ?Sized>(
    image: &R,
    rois: &[Vec<(usize, usize)>],
    bg: &[(usize, usize)],
) -> Result<CnrReport> {
    let values = rois
        .iter()
        .map(|roi| cnr(image, roi, bg))
        .collect::<Result<Vec<_>>>()?;
    let mut finite: Vec<f64> = values.iter().map(|c| c.db).filter(|d| d.is_finite()).collect();
    finite.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let summary = if finite.is_empty() {
        CnrSummary {
            median_db: None,
            min_db: None,
            max_db: None,
            q25_db: None,
            q75_db: None,
        }
    } else {
        CnrSummary {
            median_db: Some(quantile(&finite, 0.5)),
            min_db: finite.first().copied(),
            max_db: finite.last().copied(),
            q25_db: Some(quantile(&finite, 0.25)),
            q75_db: Some(quantile(&finite, 0.75)),
        }
    };
    Ok(CnrReport {
        values,
        background_pixels: bg.len(),
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub n_total: usize,
    pub tolerances: Vec<f64>,
    pub n_within: Vec<usize>,
    /// `None` when there are no localizations.
    pub fraction_within: Vec<Option<f64>>,
}

impl AccuracyReport {
    pub fn fraction_at(&self, tolerance: f64) -> Option<f64> {
        self.tolerances
            .iter()
            .position(|&t| t == tolerance)
            .and_then(|k| self.fraction_within[k])
    }
}

/// Counts localizations whose mask distance is at most each tolerance.
/// A zero tolerance means strictly inside the mask support.
pub fn in_vessel_fraction(locs: &[Localization], mask: &VesselMask, tolerances: &[f64]) -> Result<AccuracyReport> {
    if let Some(t) = tolerances.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::Argument(format!("tolerance must be >= 0, got {t}")));
    }
    let distances: Vec<f64> = locs.par_iter().map(|l| mask.distance_at(l.y, l.x)).collect();
    let n_within: Vec<usize> = tolerances
        .iter()
        .map(|&t| distances.iter().filter(|&&d| d <= t).count())
        .collect();
    let n = locs.len();
    let fraction_within = n_within
        .iter()
        .map(|&k| (n > 0).then(|| k as f64 / n as f64))
        .collect();
    Ok(AccuracyReport {
        n_total: n,
        tolerances: tolerances.to_vec(),
        n_within,
        fraction_within,
    })
}

/// Mask area divided by the square wavelength.
pub fn upper_bound(mask: &VesselMask, wavelength: f64) -> Result<f64> {
    if !(wavelength > 0.0) {
        return Err(Error::Argument(format!("wavelength must be positive, got {wavelength}")));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::Degenerate("vessel mask is empty".into()));
    }
    let g = &mask.geometry;
    Ok(n as f64 * g.dy * g.dx / (wavelength * wavelength))
}

/// Adds zero-mean Gaussian noise with standard deviation
/// `amplitude_rel * mean(stack)` and clips at zero. Each frame draws from
/// its own stream of a seeded ChaCha generator.
pub fn add_noise(stack: &FrameStack, amplitude_rel: f64, seed: u64) -> Result<FrameStack> {
    if !(amplitude_rel >= 0.0 && amplitude_rel.is_finite()) {
        return Err(Error::Argument(format!(
            "noise amplitude must be >= 0, got {amplitude_rel}"
        )));
    }
    if amplitude_rel == 0.0 {
        return Ok(stack.clone());
    }
    let sigma = amplitude_rel * stack.mean().abs();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let frames = stack
        .frames
        .par_iter()
        .enumerate()
        .map(|(t, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            Frame {
                geometry: f.geometry,
                data: f
                    .data
                    .iter()
                    .map(|&v| ((v as f64 + normal.sample(&mut rng)).max(0.0)) as f32)
                    .collect(),
            }
        })
        .collect();
    Ok(FrameStack {
        geometry: stack.geometry,
        frames,
    })
}
