//! Peak-region segmentation, the retention rule, PSF-matched sub-pixel
//! localization and the fixed-threshold baseline.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Frame;
use crate::morphology::{hdome, neighbor_offsets, Connectivity, DomeImage, MarkerMode, StructuringElement};
use crate::preprocess::gaussian_kernel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    /// Dome offset in normalized intensity units.
    pub h: f64,
    pub mode: MarkerMode,
    pub connectivity: Connectivity,
    /// Regions whose peak is within this fraction of the frame's highest
    /// region peak are kept.
    pub retention_fraction: f64,
    /// Dome values below `region_floor * h` are dropped before labeling.
    pub region_floor: f64,
    /// PSF standard deviation in meters, per axis.
    pub psf_sigma: f64,
    /// Baseline: values below this fraction of the frame max are zeroed.
    pub baseline_threshold: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            h: 0.05,
            mode: MarkerMode::Subtractive,
            connectivity: Connectivity::Eight,
            retention_fraction: 0.10,
            region_floor: 0.5,
            psf_sigma: 30e-6,
            baseline_threshold: 0.90,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("h", self.h),
            ("retention_fraction", self.retention_fraction),
            ("region_floor", self.region_floor),
            ("baseline_threshold", self.baseline_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.psf_sigma > 0.0 && self.psf_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "psf_sigma must be positive, got {}",
                self.psf_sigma
            )));
        }
        Ok(())
    }

    fn structuring_element(&self) -> StructuringElement {
        StructuringElement::flat(self.connectivity)
    }
}

/// A connected set of pixels with its summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakRegion {
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
    pub area_px: usize,
    pub area_wavelengths2: f64,
    pub peak_value: f32,
    /// Value-weighted centroid (y, x) in meters.
    pub centroid: (f64, f64),
    /// Principal-axis angle from +x towards +y, in (-pi/2, pi/2].
    pub orientation_rad: f64,
    /// Inclusive bounding box (row0, col0, row1, col1).
    pub bbox: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub frame_index: usize,
    pub y: f64,
    pub x: f64,
    pub amplitude: f64,
    pub region_area_wl2: f64,
    pub orientation_rad: f64,
}

/// Connected components of a support mask, in raster order of their first
/// pixel.
pub fn label_components(support: &[bool], ny: usize, nx: usize, conn: Connectivity) -> Vec<Vec<usize>> {
    let offsets = neighbor_offsets(conn);
    let mut seen = vec![false; support.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..support.len() {
        if !support[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (i, j) = ((p / nx) as isize, (p % nx) as isize);
            for &(dy, dx) in offsets {
                let (a, b) = (i + dy, j + dx);
                if a < 0 || b < 0 || a >= ny as isize || b >= nx as isize {
                    continue;
                }
                let q = a as usize * nx + b as usize;
                if support[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_unstable();
        out.push(pixels);
    }
    out
}

/// Summary statistics of a labeled region using `values` as weights.
pub fn region_stats(pixels: Vec<usize>, values: &Frame) -> PeakRegion {
    let g = values.geometry;
    let nx = g.nx;
    let mut wsum = 0.0;
    let (mut sy, mut sx) = (0.0, 0.0);
    let mut peak = f32::NEG_INFINITY;
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for &p in &pixels {
        let (i, j) = (p / nx, p % nx);
        let v = values.data[p];
        peak = peak.max(v);
        let w = v.max(0.0) as f64;
        wsum += w;
        sy += w * i as f64 * g.dy;
        sx += w * j as f64 * g.dx;
        r0 = r0.min(i);
        r1 = r1.max(i);
        c0 = c0.min(j);
        c1 = c1.max(j);
    }
    let (cy, cx) = if wsum > 0.0 {
        (sy / wsum, sx / wsum)
    } else {
        let n = pixels.len() as f64;
        let my = pixels.iter().map(|&p| (p / nx) as f64 * g.dy).sum::<f64>() / n;
        let mx = pixels.iter().map(|&p| (p % nx) as f64 * g.dx).sum::<f64>() / n;
        (my, mx)
    };
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for &p in &pixels {
        let w = if wsum > 0.0 {
            values.data[p].max(0.0) as f64
        } else {
            1.0
        };
        let yy = (p / nx) as f64 * g.dy - cy;
        let xx = (p % nx) as f64 * g.dx - cx;
        m20 += w * xx * xx;
        m02 += w * yy * yy;
        m11 += w * xx * yy;
    }
    let orientation = 0.5 * (2.0 * m11).atan2(m20 - m02);
    let area_px = pixels.len();
    PeakRegion {
        area_px,
        area_wavelengths2: area_px as f64 * g.dy * g.dx / (g.wavelength * g.wavelength),
        peak_value: peak,
        centroid: (cy, cx),
        orientation_rad: if orientation <= -std::f64::consts::FRAC_PI_2 {
            std::f64::consts::FRAC_PI_2
        } else {
            orientation
        },
        bbox: (r0, c0, r1, c1),
        pixels,
    }
}

/// Labels the dome support (values at or above `region_floor * h`) into
/// regions ordered by (min row, min col).
pub fn segment_regions(dome: &DomeImage, cfg: &LocalizeConfig) -> Vec<PeakRegion> {
    let floor = (cfg.region_floor * dome.h as f64) as f32;
    let f = &dome.frame;
    let support: Vec<bool> = f.data.iter().map(|&v| v > 0.0 && v >= floor).collect();
    let mut regions: Vec<PeakRegion> = label_components(&support, f.ny(), f.nx(), cfg.connectivity)
        .into_iter()
        .map(|px| region_stats(px, f))
        .collect();
    regions.sort_by_key(|r| (r.bbox.0, r.bbox.1));
    regions
}

/// Keeps regions whose peak is at least `(1 - retention_fraction)` of the
/// highest region peak.
pub fn retain_peaks(regions: Vec<PeakRegion>, cfg: &LocalizeConfig) -> Vec<PeakRegion> {
    let Some(max) = regions.iter().map(|r| r.peak_value).reduce(f32::max) else {
        return regions;
    };
    let cut = (1.0 - cfg.retention_fraction) * max as f64;
    regions
        .into_iter()
        .filter(|r| r.peak_value as f64 >= cut)
        .collect()
}

/// Vertex offset of the parabola through three samples, or 0 when the
/// samples do not form a maximum.
fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

/// Convolves the region's neighborhood with the PSF and returns the
/// parabolically refined position of the strongest response among the
/// region's pixels.
pub fn superlocalize(region: &PeakRegion, frame: &Frame, cfg: &LocalizeConfig) -> Result<Localization> {
    if region.pixels.is_empty() {
        return Err(Error::Argument("cannot localize an empty region".into()));
    }
    let g = frame.geometry;
    let mut loc = Localization {
        frame_index: 0,
        y: 0.0,
        x: 0.0,
        amplitude: region.peak_value as f64,
        region_area_wl2: region.area_wavelengths2,
        orientation_rad: region.orientation_rad,
    };
    if region.area_px == 1 {
        let p = region.pixels[0];
        (loc.y, loc.x) = g.position(p / g.nx, p % g.nx);
        return Ok(loc);
    }

    let ky = gaussian_kernel(cfg.psf_sigma / g.dy, 3.0);
    let kx = gaussian_kernel(cfg.psf_sigma / g.dx, 3.0);
    let (ry, rx) = ((ky.len() / 2) as isize, (kx.len() / 2) as isize);
    let (ny, nx) = (g.ny as isize, g.nx as isize);
    let (r0, c0, r1, c1) = region.bbox;
    // response window: bounding box plus one pixel for the parabola
    let wr0 = (r0 as isize - 1).max(0);
    let wr1 = (r1 as isize + 1).min(ny - 1);
    let wc0 = (c0 as isize - 1).max(0);
    let wc1 = (c1 as isize + 1).min(nx - 1);
    let wh = (wr1 - wr0 + 1) as usize;
    let ww = (wc1 - wc0 + 1) as usize;
    // rows needed by the vertical pass, with clamped padding
    let pr0 = wr0 - ry;
    let ph = wh + 2 * ry as usize;
    let mut rowpass = vec![0.0f64; ph * ww];
    for a in 0..ph {
        let i = (pr0 + a as isize).clamp(0, ny - 1) as usize;
        let src = &frame.data[i * g.nx..(i + 1) * g.nx];
        for b in 0..ww {
            let j = wc0 + b as isize;
            let mut acc = 0.0;
            for (t, &w) in kx.iter().enumerate() {
                let jj = (j + t as isize - rx).clamp(0, nx - 1) as usize;
                acc += w * src[jj] as f64;
            }
            rowpass[a * ww + b] = acc;
        }
    }
    let mut resp = vec![0.0f64; wh * ww];
    for a in 0..wh {
        for (t, &w) in ky.iter().enumerate() {
            let src = &rowpass[(a + t) * ww..(a + t + 1) * ww];
            for (o, &s) in resp[a * ww..(a + 1) * ww].iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    let at = |i: usize, j: usize| resp[(i - wr0 as usize) * ww + (j - wc0 as usize)];

    // strongest response on the region; ties go to the pixel nearest the
    // region centroid
    let (cy, cx) = g.to_pixel(region.centroid.0, region.centroid.1);
    let mut best = region.pixels[0];
    let mut best_v = f64::NEG_INFINITY;
    let mut best_d = f64::INFINITY;
    for &p in &region.pixels {
        let (i, j) = (p / g.nx, p % g.nx);
        let v = at(i, j);
        let d = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
        if v > best_v || (v == best_v && d < best_d) {
            best = p;
            best_v = v;
            best_d = d;
        }
    }
    let (bi, bj) = (best / g.nx, best % g.nx);
    let oy = if bi as isize > wr0 && (bi as isize) < wr1 {
        parabolic_offset(at(bi - 1, bj), best_v, at(bi + 1, bj))
    } else {
        0.0
    };
    let ox = if bj as isize > wc0 && (bj as isize) < wc1 {
        parabolic_offset(at(bi, bj - 1), best_v, at(bi, bj + 1))
    } else {
        0.0
    };
    let py = (bi as f64 + oy).clamp(0.0, (g.ny - 1) as f64);
    let px = (bj as f64 + ox).clamp(0.0, (g.nx - 1) as f64);
    loc.y = py * g.dy;
    loc.x = px * g.dx;
    Ok(loc)
}

fn localize_regions(
    regions: &[PeakRegion],
    frame: &Frame,
    frame_index: usize,
    cfg: &LocalizeConfig,
) -> Result<Vec<Localization>> {
    regions
        .iter()
        .map(|r| {
            superlocalize(r, frame, cfg).map(|mut l| {
                l.frame_index = frame_index;
                l
            })
        })
        .collect()
}

/// h-dome, segmentation, retention and localization of one frame.
pub fn localize_frame(frame: &Frame, frame_index: usize, cfg: &LocalizeConfig) -> Result<Vec<Localization>> {
    cfg.validate()?;
    let dome = hdome(frame, cfg.h as f32, cfg.mode, &cfg.structuring_element())?;
    let regions = retain_peaks(segment_regions(&dome, cfg), cfg);
    localize_regions(&regions, frame, frame_index, cfg)
}

/// Fixed-threshold baseline: keeps values at or above
/// `baseline_threshold * max`, labels and localizes the components.
pub fn threshold_baseline(frame: &Frame, frame_index: usize, cfg: &LocalizeConfig) -> Result<Vec<Localization>> {
    cfg.validate()?;
    let max = frame.max();
    if !(max > 0.0) {
        return Ok(Vec::new());
    }
    let cut = (cfg.baseline_threshold * max as f64) as f32;
    let support: Vec<bool> = frame.data.iter().map(|&v| v >= cut).collect();
    let mut regions: Vec<PeakRegion> = label_components(&support, frame.ny(), frame.nx(), cfg.connectivity)
        .into_iter()
        .map(|px| region_stats(px, frame))
        .collect();
    regions.sort_by_key(|r| (r.bbox.0, r.bbox.1));
    localize_regions(&regions, frame, frame_index, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;

    fn fine(ny: usize, nx: usize) -> GridGeometry {
        GridGeometry::new(ny, nx, 15e-6, 7.5e-6, 2e-3, 60e-6).unwrap()
    }

    fn gaussian_frame(g: GridGeometry, blobs: &[(f64, f64, f64)], sigma: f64) -> Frame {
        Frame::from_fn(g, |i, j| {
            let (y, x) = g.position(i, j);
            blobs
                .iter()
                .map(|&(by, bx, a)| a * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * sigma * sigma)).exp())
                .sum::<f64>() as f32
        })
    }

    fn dome_from(frame: Frame, h: f32) -> DomeImage {
        DomeImage {
            frame,
            h,
            mode: MarkerMode::Subtractive,
        }
    }

    #[test]
    fn two_plateaus_two_regions() {
        let g = fine(10, 12);
        let f = Frame::from_fn(g, |i, j| {
            if (1..4).contains(&i) && (1..4).contains(&j) || (5..8).contains(&i) && (7..10).contains(&j) {
                0.05
            } else {
                0.0
            }
        });
        let regions = segment_regions(&dome_from(f, 0.05), &LocalizeConfig::default());
        assert_eq!(regions.len(), 2);
        assert!(regions.iter().all(|r| r.area_px == 9));
        assert_eq!(regions[0].bbox, (1, 1, 3, 3));
        assert!((regions[0].centroid.0 - 2.0 * 15e-6).abs() < 1e-15);
        let expected_wl2 = 9.0 * 15e-6 * 7.5e-6 / (60e-6f64).powi(2);
        assert!((regions[0].area_wavelengths2 - expected_wl2).abs() < 1e-12);
    }

    #[test]
    fn empty_dome_no_regions() {
        let f = Frame::zeros(fine(6, 6));
        assert!(segment_regions(&dome_from(f, 0.05), &LocalizeConfig::default()).is_empty());
    }

    #[test]
    fn diagonal_pixels_join_under_eight_connectivity() {
        let g = fine(4, 4);
        let mut f = Frame::zeros(g);
        f.set(0, 0, 0.05);
        f.set(1, 1, 0.05);
        let cfg = LocalizeConfig::default();
        assert_eq!(segment_regions(&dome_from(f.clone(), 0.05), &cfg).len(), 1);
        let four = LocalizeConfig {
            connectivity: Connectivity::Four,
            ..cfg
        };
        assert_eq!(segment_regions(&dome_from(f, 0.05), &four).len(), 2);
    }

    #[test]
    fn orientation_follows_elongation() {
        let g = GridGeometry::new(20, 20, 1e-6, 1e-6, 1.0, 1.0).unwrap();
        let horiz = Frame::from_fn(g, |i, j| if i == 10 && (5..15).contains(&j) { 0.05 } else { 0.0 });
        let vert = Frame::from_fn(g, |i, j| if j == 10 && (5..15).contains(&i) { 0.05 } else { 0.0 });
        let diag = Frame::from_fn(g, |i, j| if i == j && (5..15).contains(&i) { 0.05 } else { 0.0 });
        let cfg = LocalizeConfig::default();
        let o = |f: Frame| segment_regions(&dome_from(f, 0.05), &cfg)[0].orientation_rad;
        assert!(o(horiz).abs() < 1e-12);
        assert!((o(vert) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((o(diag) - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    fn region_with_peak(v: f32) -> PeakRegion {
        PeakRegion {
            pixels: vec![0],
            area_px: 1,
            area_wavelengths2: 0.0,
            peak_value: v,
            centroid: (0.0, 0.0),
            orientation_rad: 0.0,
            bbox: (0, 0, 0, 0),
        }
    }

    #[test]
    fn retention_rule() {
        let cfg = LocalizeConfig::default();
        let kept = retain_peaks(
            vec![region_with_peak(1.0), region_with_peak(0.95), region_with_peak(0.85)],
            &cfg,
        );
        let peaks: Vec<f32> = kept.iter().map(|r| r.peak_value).collect();
        assert_eq!(peaks, vec![1.0, 0.95]);
        assert_eq!(retain_peaks(vec![region_with_peak(0.01)], &cfg).len(), 1);
        assert!(retain_peaks(Vec::new(), &cfg).is_empty());
    }

    #[test]
    fn symmetric_blob_localizes_on_node() {
        let g = fine(41, 41);
        let (y0, x0) = g.position(20, 20);
        let f = gaussian_frame(g, &[(y0, x0, 1.0)], 30e-6);
        let cfg = LocalizeConfig::default();
        let locs = localize_frame(&f, 3, &cfg).unwrap();
        assert_eq!(locs.len(), 1);
        assert_eq!(locs[0].frame_index, 3);
        assert!((locs[0].y - y0).abs() < 1e-12 && (locs[0].x - x0).abs() < 1e-12);
    }

    #[test]
    fn sub_pixel_offset_is_recovered() {
        let g = fine(41, 41);
        let (y0, x0) = g.position(20, 20);
        for frac in [0.3, -0.3, 0.45, 0.1] {
            let xt = x0 + frac * g.dx;
            let yt = y0 - 0.5 * frac * g.dy;
            let f = gaussian_frame(g, &[(yt, xt, 1.0)], 30e-6);
            let locs = localize_frame(&f, 0, &LocalizeConfig::default()).unwrap();
            assert_eq!(locs.len(), 1);
            assert!((locs[0].x - xt).abs() < 0.1 * g.dx, "{frac}: {}", (locs[0].x - xt) / g.dx);
            assert!((locs[0].y - yt).abs() < 0.1 * g.dy);
        }
    }

    #[test]
    fn single_pixel_region_returns_pixel_center() {
        let g = fine(9, 9);
        let f = Frame::zeros(g);
        let mut r = region_with_peak(0.05);
        r.pixels = vec![g.index(4, 6)];
        r.bbox = (4, 6, 4, 6);
        let l = superlocalize(&r, &f, &LocalizeConfig::default()).unwrap();
        assert_eq!((l.y, l.x), g.position(4, 6));
    }

    #[test]
    fn border_region_is_clamped() {
        let g = fine(20, 20);
        let f = gaussian_frame(g, &[(0.0, 0.0, 1.0)], 30e-6);
        let locs = localize_frame(&f, 0, &LocalizeConfig::default()).unwrap();
        assert_eq!(locs.len(), 1);
        assert!(g.contains(locs[0].y, locs[0].x));
        assert!(locs[0].y.abs() < 0.5 * g.dy && locs[0].x.abs() < 0.5 * g.dx);
    }

    #[test]
    fn blank_frame_gives_nothing() {
        let f = Frame::zeros(fine(16, 16));
        let cfg = LocalizeConfig::default();
        assert!(localize_frame(&f, 0, &cfg).unwrap().is_empty());
        assert!(threshold_baseline(&f, 0, &cfg).unwrap().is_empty());
    }

    #[test]
    fn baseline_keeps_bright_peaks_only() {
        let g = fine(40, 120);
        let f = gaussian_frame(
            g,
            &[
                (20.0 * g.dy, 20.0 * g.dx, 1.0),
                (20.0 * g.dy, 60.0 * g.dx, 0.95),
                (20.0 * g.dy, 100.0 * g.dx, 0.5),
            ],
            30e-6,
        );
        let cfg = LocalizeConfig::default();
        assert_eq!(threshold_baseline(&f, 0, &cfg).unwrap().len(), 2);
        assert_eq!(localize_frame(&f, 0, &cfg).unwrap().len(), 3);
    }

    #[test]
    fn baseline_constant_frame_is_one_central_region() {
        let g = fine(11, 15);
        let f = Frame::filled(g, 0.4);
        let locs = threshold_baseline(&f, 0, &LocalizeConfig::default()).unwrap();
        assert_eq!(locs.len(), 1);
        assert!((locs[0].y - 5.0 * g.dy).abs() <= g.dy);
        assert!((locs[0].x - 7.0 * g.dx).abs() <= g.dx);
    }

    #[test]
    fn config_validation() {
        let mut cfg = LocalizeConfig::default();
        cfg.h = 1.5;
        assert!(cfg.validate().is_err());
        cfg = LocalizeConfig::default();
        cfg.psf_sigma = 0.0;
        assert!(cfg.validate().is_err());
    }
}
