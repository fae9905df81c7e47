//! Synthetic contrast-enhanced phantoms with known ground truth: straight
//! vessel segments carrying Gaussian point scatterers over a static
//! low-frequency clutter field, plus optional drift and noise.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::add_noise;
use crate::grid::{mask_from_image, Frame, FrameStack, GridGeometry, VesselMask};
use crate::localize::Localization;

const STREAM_BUBBLES: u64 = 0;
const STREAM_CLUTTER: u64 = 1;
const NOISE_SALT: u64 = 0x6e6f_6973_655f_7631;
const CLUTTER_TERMS: usize = 6;
/// Bubble footprints are cut at this many standard deviations.
const PSF_TRUNCATE: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselSpec {
    /// Inlet (y, x) in meters.
    pub start: (f64, f64),
    /// Outlet (y, x) in meters.
    pub end: (f64, f64),
    pub diameter: f64,
    /// Flow speed in m/s. Zero means bubbles are redrawn every frame.
    pub speed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_bubbles: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude_range: Option<(f64, f64)>,
}

impl VesselSpec {
    pub fn new(start: (f64, f64), end: (f64, f64), diameter: f64, speed: f64) -> Self {
        Self {
            start,
            end,
            diameter,
            speed,
            mean_bubbles: None,
            amplitude_range: None,
        }
    }

    pub fn length(&self) -> f64 {
        (self.end.0 - self.start.0).hypot(self.end.1 - self.start.1)
    }

    /// Unit vector from inlet to outlet.
    pub fn direction(&self) -> (f64, f64) {
        let l = self.length();
        ((self.end.0 - self.start.0) / l, (self.end.1 - self.start.1) / l)
    }

    /// Distance from a point to the centerline segment.
    pub fn distance_to_axis(&self, y: f64, x: f64) -> f64 {
        let (uy, ux) = self.direction();
        let t = ((y - self.start.0) * uy + (x - self.start.1) * ux).clamp(0.0, self.length());
        (y - self.start.0 - t * uy).hypot(x - self.start.1 - t * ux)
    }
}

/// Anisotropic Gaussian PSF for model-mismatch tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElongatedPsf {
    pub sigma_major: f64,
    pub sigma_minor: f64,
    /// Major axis angle from +x towards +y.
    pub angle_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub geometry: GridGeometry,
    pub vessels: Vec<VesselSpec>,
    /// Poisson mean of bubbles per vessel per frame.
    pub mean_bubbles: f64,
    pub amplitude_range: (f64, f64),
    pub psf_sigma: f64,
    pub psf_mismatch: Option<ElongatedPsf>,
    /// Peak value of the static clutter field.
    pub clutter_amplitude: f64,
    /// Tissue drift velocity (vy, vx) in m/s applied to the clutter field.
    pub clutter_drift: (f64, f64),
    /// Noise standard deviation relative to the stack mean.
    pub noise_rel: f64,
    pub nframes: usize,
    pub seed: u64,
    /// Refinement of the ground-truth mask grid over the frame grid.
    pub mask_upsample: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let mm = 1e-3;
        Self {
            geometry: GridGeometry::default(),
            vessels: vec![
                VesselSpec::new((1.0 * mm, 1.0 * mm), (17.5 * mm, 2.2 * mm), 150e-6, 10e-3),
                VesselSpec::new((1.0 * mm, 4.4 * mm), (17.5 * mm, 3.4 * mm), 100e-6, 6e-3),
                VesselSpec::new((6.0 * mm, 0.4 * mm), (6.5 * mm, 5.0 * mm), 80e-6, 4e-3),
                VesselSpec::new((12.0 * mm, 0.4 * mm), (14.0 * mm, 5.0 * mm), 60e-6, 3e-3),
            ],
            mean_bubbles: 3.0,
            amplitude_range: (0.1, 1.0),
            psf_sigma: 30e-6,
            psf_mismatch: None,
            clutter_amplitude: 1.0,
            clutter_drift: (0.0, 0.0),
            noise_rel: 0.0,
            nframes: 720,
            seed: 0,
            mask_upsample: 12,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.geometry
            .validate()
            .map_err(|e| Error::Config(format!("phantom geometry: {e}")))?;
        let cfg = |m: String| Err(Error::Config(m));
        if self.nframes == 0 {
            return cfg("phantom needs at least one frame".into());
        }
        if self.mask_upsample == 0 {
            return cfg("mask_upsample must be >= 1".into());
        }
        if !(self.psf_sigma > 0.0) {
            return cfg(format!("psf_sigma must be positive, got {}", self.psf_sigma));
        }
        if let Some(p) = self.psf_mismatch {
            if !(p.sigma_major > 0.0 && p.sigma_minor > 0.0) {
                return cfg("elongated PSF sigmas must be positive".into());
            }
        }
        for (name, v) in [
            ("clutter_amplitude", self.clutter_amplitude),
            ("noise_rel", self.noise_rel),
            ("mean_bubbles", self.mean_bubbles),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return cfg(format!("{name} must be >= 0, got {v}"));
            }
        }
        check_range(self.amplitude_range)?;
        let g = &self.geometry;
        let ymax = (g.ny - 1) as f64 * g.dy;
        let xmax = (g.nx - 1) as f64 * g.dx;
        for (k, v) in self.vessels.iter().enumerate() {
            if !(v.diameter > 0.0) || !(v.speed >= 0.0) || !(v.length() > 0.0) {
                return cfg(format!(
                    "vessel {k}: needs positive diameter and length and non-negative speed"
                ));
            }
            if let Some(m) = v.mean_bubbles {
                if !(m >= 0.0 && m.is_finite()) {
                    return cfg(format!("vessel {k}: mean_bubbles must be >= 0"));
                }
            }
            if let Some(r) = v.amplitude_range {
                check_range(r).map_err(|e| Error::Config(format!("vessel {k}: {e}")))?;
            }
            let r = 0.5 * v.diameter;
            for (y, x) in [v.start, v.end] {
                if y - r < 0.0 || x - r < 0.0 || y + r > ymax || x + r > xmax {
                    return cfg(format!(
                        "vessel {k} leaves the field of view at ({y:e}, {x:e}) m"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn mask_geometry(&self) -> GridGeometry {
        self.geometry.upsampled(self.mask_upsample, self.mask_upsample)
    }

    fn vessel_mean(&self, v: &VesselSpec) -> f64 {
        v.mean_bubbles.unwrap_or(self.mean_bubbles)
    }

    fn vessel_amplitudes(&self, v: &VesselSpec) -> (f64, f64) {
        v.amplitude_range.unwrap_or(self.amplitude_range)
    }
}

fn check_range((lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::Config(format!(
            "amplitude range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthBubble {
    pub frame: usize,
    pub y: f64,
    pub x: f64,
    pub amplitude: f64,
    pub vessel: usize,
    pub vy: f64,
    pub vx: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Sorted by frame, then by vessel and age.
    pub bubbles: Vec<TruthBubble>,
    pub mask: VesselMask,
}

impl GroundTruth {
    pub fn in_frame(&self, frame: usize) -> impl Iterator<Item = &TruthBubble> {
        self.bubbles.iter().filter(move |b| b.frame == frame)
    }

    /// Truth positions as localizations, for scoring with the evaluators.
    pub fn as_localizations(&self) -> Vec<Localization> {
        self.bubbles
            .iter()
            .map(|b| Localization {
                frame_index: b.frame,
                y: b.y,
                x: b.x,
                amplitude: b.amplitude,
                region_area_wl2: 0.0,
                orientation_rad: 0.0,
            })
            .collect()
    }
}

struct Bubble {
    vessel: usize,
    /// Distance travelled from the inlet along the axis.
    t: f64,
    offset: f64,
    amplitude: f64,
}

/// Largest lateral offset that keeps every mask pixel around the bubble
/// inside the tube.
fn lateral_limit(v: &VesselSpec, mask_geometry: &GridGeometry) -> f64 {
    (0.5 * v.diameter - mask_geometry.dy.hypot(mask_geometry.dx)).max(0.0)
}

/// Runs the bubble population forward and returns the truth list.
fn simulate_bubbles(spec: &PhantomSpec) -> Result<Vec<TruthBubble>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(STREAM_BUBBLES);
    let mg = spec.mask_geometry();
    let dt = spec.geometry.dt;
    let poisson = |mean: f64| -> Result<Option<Poisson<f64>>> {
        if mean == 0.0 {
            return Ok(None);
        }
        Poisson::new(mean)
            .map(Some)
            .map_err(|e| Error::Config(format!("bubble rate {mean}: {e}")))
    };
    let draw = |d: &Option<Poisson<f64>>, rng: &mut ChaCha8Rng| match d {
        Some(p) => p.sample(rng) as usize,
        None => 0,
    };

    struct VesselState {
        start: Option<Poisson<f64>>,
        inflow: Option<Poisson<f64>>,
        limit: f64,
        amps: (f64, f64),
        length: f64,
        step: f64,
    }
    let states = spec
        .vessels
        .iter()
        .map(|v| {
            let mean = spec.vessel_mean(v);
            let length = v.length();
            let step = v.speed * dt;
            Ok(VesselState {
                start: poisson(mean)?,
                inflow: poisson(mean * step / length)?,
                limit: lateral_limit(v, &mg),
                amps: spec.vessel_amplitudes(v),
                length,
                step,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let new_bubble = |rng: &mut ChaCha8Rng, k: usize, s: &VesselState, t: f64| Bubble {
        vessel: k,
        t,
        offset: if s.limit > 0.0 {
            rng.gen_range(-s.limit..=s.limit)
        } else {
            0.0
        },
        amplitude: if s.amps.1 > s.amps.0 {
            rng.gen_range(s.amps.0..s.amps.1)
        } else {
            s.amps.0
        },
    };

    let mut alive: Vec<Bubble> = Vec::new();
    let mut truth = Vec::new();
    for frame in 0..spec.nframes {
        if frame > 0 {
            for b in &mut alive {
                b.t += states[b.vessel].step;
            }
            alive.retain(|b| states[b.vessel].step > 0.0 && b.t <= states[b.vessel].length);
        }
        for (k, s) in states.iter().enumerate() {
            if frame == 0 || s.step == 0.0 {
                for _ in 0..draw(&s.start, &mut rng) {
                    let t = rng.gen_range(0.0..=s.length);
                    alive.push(new_bubble(&mut rng, k, s, t));
                }
            } else {
                for _ in 0..draw(&s.inflow, &mut rng) {
                    let t = rng.gen_range(0.0..s.step).min(s.length);
                    alive.push(new_bubble(&mut rng, k, s, t));
                }
            }
        }
        alive.sort_by_key(|b| b.vessel);
        for b in &alive {
            let v = &spec.vessels[b.vessel];
            let (uy, ux) = v.direction();
            truth.push(TruthBubble {
                frame,
                y: v.start.0 + b.t * uy - b.offset * ux,
                x: v.start.1 + b.t * ux + b.offset * uy,
                amplitude: b.amplitude,
                vessel: b.vessel,
                vy: v.speed * uy,
                vx: v.speed * ux,
            });
        }
    }
    Ok(truth)
}

/// Sum of random plane-wave cosines scaled onto [amplitude / 2, amplitude],
/// so tissue never goes dark.
struct ClutterField {
    terms: Vec<(f64, f64, f64)>,
    amplitude: f64,
}

impl ClutterField {
    fn new(spec: &PhantomSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(STREAM_CLUTTER);
        let g = &spec.geometry;
        let extent = (g.ny as f64 * g.dy).max(g.nx as f64 * g.dx);
        let terms = (0..CLUTTER_TERMS)
            .map(|_| {
                let period = extent * rng.gen_range(0.5..2.0);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / period;
                (k * theta.sin(), k * theta.cos(), rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self {
            terms,
            amplitude: spec.clutter_amplitude,
        }
    }

    fn value(&self, y: f64, x: f64) -> f64 {
        let s: f64 = self.terms.iter().map(|&(ky, kx, ph)| (ky * y + kx * x + ph).cos()).sum();
        self.amplitude * (0.75 + 0.25 * s / CLUTTER_TERMS as f64)
    }

    fn render(&self, g: &GridGeometry, shift: (f64, f64), out: &mut [f64]) {
        if self.amplitude == 0.0 {
            return;
        }
        for i in 0..g.ny {
            for j in 0..g.nx {
                let (y, x) = g.position(i, j);
                out[g.index(i, j)] += self.value(y - shift.0, x - shift.1);
            }
        }
    }
}

/// Gaussian point-spread function as an inverse covariance in physical
/// units.
#[derive(Debug, Clone, Copy)]
pub struct Psf {
    a: f64,
    b: f64,
    c: f64,
    reach: f64,
}

impl Psf {
    pub fn isotropic(sigma: f64) -> Self {
        Self::elongated(sigma, sigma, 0.0)
    }

    pub fn elongated(sigma_major: f64, sigma_minor: f64, angle_rad: f64) -> Self {
        let (s, c) = angle_rad.sin_cos();
        let (p, q) = (1.0 / (sigma_major * sigma_major), 1.0 / (sigma_minor * sigma_minor));
        // quadratic form in (x, y) with the major axis along (cos, sin)
        Self {
            a: p * c * c + q * s * s,
            b: (p - q) * s * c,
            c: p * s * s + q * c * c,
            reach: PSF_TRUNCATE * sigma_major.max(sigma_minor),
        }
    }

    pub fn eval(&self, dy: f64, dx: f64) -> f64 {
        (-0.5 * (self.a * dx * dx + 2.0 * self.b * dx * dy + self.c * dy * dy)).exp()
    }
}

/// Adds `amplitude * psf(r - r0)` onto `out` over the PSF's truncated
/// footprint.
pub fn splat(out: &mut [f64], g: &GridGeometry, y: f64, x: f64, amplitude: f64, psf: &Psf) {
    let lo = |c: f64, pitch: f64| ((c - psf.reach) / pitch).ceil().max(0.0) as usize;
    let hi = |c: f64, pitch: f64, n: usize| (((c + psf.reach) / pitch).floor()).min((n - 1) as f64);
    let (i1, j1) = (hi(y, g.dy, g.ny), hi(x, g.dx, g.nx));
    if i1 < 0.0 || j1 < 0.0 {
        return;
    }
    for i in lo(y, g.dy)..=i1 as usize {
        for j in lo(x, g.dx)..=j1 as usize {
            let (py, px) = g.position(i, j);
            out[g.index(i, j)] += amplitude * psf.eval(py - y, px - x);
        }
    }
}

/// Frame holding a single analytic Gaussian bubble.
pub fn render_bubble(g: GridGeometry, y: f64, x: f64, amplitude: f64, sigma: f64) -> Frame {
    let mut acc = vec![0.0; g.len()];
    splat(&mut acc, &g, y, x, amplitude, &Psf::isotropic(sigma));
    Frame {
        geometry: g,
        data: acc.into_iter().map(|v| v as f32).collect(),
    }
}

/// Mask pixels whose centers lie within `radius_scale * diameter / 2` of a
/// vessel axis.
pub fn tube_pixels(v: &VesselSpec, g: &GridGeometry, radius_scale: f64) -> Vec<(usize, usize)> {
    let r = radius_scale * 0.5 * v.diameter;
    let (y0, y1) = (v.start.0.min(v.end.0) - r, v.start.0.max(v.end.0) + r);
    let (x0, x1) = (v.start.1.min(v.end.1) - r, v.start.1.max(v.end.1) + r);
    let i0 = (y0 / g.dy).ceil().max(0.0) as usize;
    let j0 = (x0 / g.dx).ceil().max(0.0) as usize;
    let i1 = ((y1 / g.dy).floor() as usize).min(g.ny - 1);
    let j1 = ((x1 / g.dx).floor() as usize).min(g.nx - 1);
    let mut out = Vec::new();
    for i in i0..=i1 {
        for j in j0..=j1 {
            let (y, x) = g.position(i, j);
            if v.distance_to_axis(y, x) <= r {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn vessel_mask(spec: &PhantomSpec) -> Result<VesselMask> {
    let g = spec.mask_geometry();
    let mut bits = vec![false; g.len()];
    for v in &spec.vessels {
        for (i, j) in tube_pixels(v, &g, 1.0) {
            bits[g.index(i, j)] = true;
        }
    }
    mask_from_image(bits, g)
}

/// Renders the phantom stack and its ground truth.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(FrameStack, GroundTruth)> {
    spec.validate()?;
    if spec.vessels.is_empty() {
        return Err(Error::Config("phantom needs at least one vessel for a ground-truth mask".into()));
    }
    let truth = simulate_bubbles(spec)?;
    let stack = render_stack(spec, &truth)?;
    let mask = vessel_mask(spec)?;
    Ok((stack, GroundTruth { bubbles: truth, mask }))
}

/// Renders frames only; also accepts vessel-free specs (pure clutter).
pub fn generate_stack(spec: &PhantomSpec) -> Result<FrameStack> {
    spec.validate()?;
    let truth = simulate_bubbles(spec)?;
    render_stack(spec, &truth)
}

fn render_stack(spec: &PhantomSpec, truth: &[TruthBubble]) -> Result<FrameStack> {
    let g = spec.geometry;
    let psf = match spec.psf_mismatch {
        Some(p) => Psf::elongated(p.sigma_major, p.sigma_minor, p.angle_rad),
        None => Psf::isotropic(spec.psf_sigma),
    };
    let clutter = ClutterField::new(spec);
    let drifting = spec.clutter_drift != (0.0, 0.0);
    let mut base = vec![0.0; g.len()];
    if !drifting {
        clutter.render(&g, (0.0, 0.0), &mut base);
    }
    // frame boundaries within the frame-sorted truth list
    let mut starts = vec![0usize; spec.nframes + 1];
    for b in truth {
        starts[b.frame + 1] += 1;
    }
    for t in 0..spec.nframes {
        starts[t + 1] += starts[t];
    }
    let frames = (0..spec.nframes)
        .into_par_iter()
        .map(|t| {
            let mut acc = if drifting {
                let mut a = vec![0.0; g.len()];
                let s = t as f64 * g.dt;
                clutter.render(&g, (spec.clutter_drift.0 * s, spec.clutter_drift.1 * s), &mut a);
                a
            } else {
                base.clone()
            };
            for b in &truth[starts[t]..starts[t + 1]] {
                splat(&mut acc, &g, b.y, b.x, b.amplitude, &psf);
            }
            Frame {
                geometry: g,
                data: acc.into_iter().map(|v| v as f32).collect(),
            }
        })
        .collect();
    let stack = FrameStack::new(g, frames)?;
    if spec.noise_rel > 0.0 {
        add_noise(&stack, spec.noise_rel, spec.seed ^ NOISE_SALT)
    } else {
        Ok(stack)
    }
}

pub fn write_truth_csv(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    writeln!(buf, "frame,y_m,x_m,amplitude,vessel,vy_mps,vx_mps").unwrap();
    for b in &truth.bubbles {
        writeln!(
            buf,
            "{},{},{},{},{},{},{}",
            b.frame, b.y, b.x, b.amplitude, b.vessel, b.vy, b.vx
        )
        .unwrap();
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<PhantomSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: PhantomSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::in_vessel_fraction;
    use crate::localize::{localize_frame, LocalizeConfig};
    use crate::svd_filter::{svd_clutter_filter, SvdFilterConfig};

    fn small_spec() -> PhantomSpec {
        let g = GridGeometry::with_shape(40, 40);
        PhantomSpec {
            geometry: g,
            vessels: vec![
                VesselSpec::new((0.3e-3, 0.3e-3), (2.0e-3, 0.5e-3), 100e-6, 20e-3),
                VesselSpec::new((1.0e-3, 0.2e-3), (1.2e-3, 1.0e-3), 60e-6, 15e-3),
            ],
            mean_bubbles: 4.0,
            nframes: 16,
            mask_upsample: 4,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn same_seed_same_stack() {
        let mut spec = small_spec();
        spec.noise_rel = 0.1;
        let (a, ta) = generate_phantom(&spec).unwrap();
        let (b, tb) = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        spec.seed = 1;
        let (c, _) = generate_phantom(&spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pure_clutter_is_static_and_filtered_out() {
        let spec = PhantomSpec {
            geometry: GridGeometry::with_shape(24, 20),
            vessels: vec![],
            clutter_amplitude: 1.0,
            nframes: 32,
            ..PhantomSpec::default()
        };
        let stack = generate_stack(&spec).unwrap();
        assert!(stack.frames.iter().all(|f| f == &stack.frames[0]));
        assert!(stack.frames[0].max() > 0.0);
        let out = svd_clutter_filter(&stack, &SvdFilterConfig::default()).unwrap();
        let norm = |s: &FrameStack| {
            s.frames
                .iter()
                .flat_map(|f| f.data.iter())
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        assert!(norm(&out) < 1e-6 * norm(&stack));
    }

    #[test]
    fn single_bubble_matches_analytic_gaussian() {
        let g = GridGeometry::with_shape(30, 40);
        let mut spec = PhantomSpec {
            geometry: g,
            vessels: vec![VesselSpec::new((0.5e-3, 0.3e-3), (1.2e-3, 0.9e-3), 80e-6, 0.0)],
            mean_bubbles: 1.0,
            clutter_amplitude: 0.0,
            nframes: 1,
            mask_upsample: 4,
            ..PhantomSpec::default()
        };
        let (stack, truth) = (0..100)
            .find_map(|seed| {
                spec.seed = seed;
                let out = generate_phantom(&spec).unwrap();
                (out.1.bubbles.len() == 1).then_some(out)
            })
            .unwrap();
        let b = truth.bubbles[0];
        let sigma = spec.psf_sigma;
        let frame = &stack.frames[0];
        for i in 0..g.ny {
            for j in 0..g.nx {
                let (y, x) = g.position(i, j);
                let r2 = (y - b.y).powi(2) + (x - b.x).powi(2);
                let want = if r2.sqrt() <= PSF_TRUNCATE * sigma {
                    b.amplitude * (-r2 / (2.0 * sigma * sigma)).exp()
                } else {
                    0.0
                };
                assert!((frame.get(i, j) as f64 - want).abs() <= 1e-7 * b.amplitude.max(want));
            }
        }
        let cfg = LocalizeConfig::default();
        let pre = crate::preprocess::PreprocessConfig {
            factor_y: 4,
            factor_x: 4,
            ..Default::default()
        };
        let up = crate::preprocess::preprocess_frame(frame, &pre).unwrap();
        let locs = localize_frame(&up, 0, &cfg).unwrap();
        assert_eq!(locs.len(), 1);
        let err = (locs[0].y - b.y).hypot(locs[0].x - b.x);
        assert!(err < g.wavelength / 8.0, "error {err}");
    }

    #[test]
    fn truth_lies_inside_mask() {
        let mut spec = small_spec();
        spec.nframes = 64;
        let (_, truth) = generate_phantom(&spec).unwrap();
        assert!(!truth.bubbles.is_empty());
        let rep = in_vessel_fraction(&truth.as_localizations(), &truth.mask, &[0.0]).unwrap();
        assert_eq!(rep.fraction_at(0.0), Some(1.0));
    }

    #[test]
    fn mean_count_converges_to_poisson_mean() {
        let g = GridGeometry::with_shape(40, 40);
        let spec = PhantomSpec {
            geometry: g,
            vessels: vec![
                VesselSpec::new((0.3e-3, 0.3e-3), (1.3e-3, 0.3e-3), 60e-6, 50e-3),
                VesselSpec::new((0.5e-3, 0.5e-3), (0.5e-3, 1.0e-3), 60e-6, 40e-3),
                VesselSpec::new((1.5e-3, 0.2e-3), (2.0e-3, 1.0e-3), 60e-6, 0.0),
            ],
            mean_bubbles: 5.0,
            nframes: 2000,
            ..PhantomSpec::default()
        };
        let truth = simulate_bubbles(&spec).unwrap();
        let per_frame = truth.len() as f64 / spec.nframes as f64;
        let want = 5.0 * spec.vessels.len() as f64;
        assert!((per_frame / want - 1.0).abs() < 0.05, "{per_frame} vs {want}");
    }

    #[test]
    fn flow_moves_bubbles_at_vessel_speed() {
        let spec = PhantomSpec {
            geometry: GridGeometry::with_shape(40, 40),
            vessels: vec![VesselSpec::new((0.3e-3, 0.3e-3), (2.0e-3, 1.0e-3), 80e-6, 10e-3)],
            mean_bubbles: 1.0,
            nframes: 50,
            ..PhantomSpec::default()
        };
        let truth = simulate_bubbles(&spec).unwrap();
        let b = truth.iter().find(|b| b.frame == 0).unwrap();
        let next = truth
            .iter()
            .filter(|n| n.frame == 1)
            .map(|n| (n.y - b.y).hypot(n.x - b.x))
            .fold(f64::INFINITY, f64::min);
        assert!((next - 10e-3 * 2e-3).abs() < 1e-12);
        assert!((b.vy.hypot(b.vx) - 10e-3).abs() < 1e-15);
    }

    #[test]
    fn elongated_psf_reduces_to_isotropic() {
        let a = Psf::isotropic(30e-6);
        let b = Psf::elongated(30e-6, 30e-6, 0.7);
        for (dy, dx) in [(0.0, 0.0), (10e-6, -20e-6), (45e-6, 3e-6)] {
            assert!((a.eval(dy, dx) - b.eval(dy, dx)).abs() < 1e-12);
        }
        let c = Psf::elongated(60e-6, 20e-6, std::f64::consts::FRAC_PI_2);
        // major axis along +y
        assert!((c.eval(60e-6, 0.0) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((c.eval(0.0, 20e-6) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn vessel_outside_view_is_rejected() {
        let mut spec = small_spec();
        spec.vessels[0].end = (5.0e-3, 0.5e-3);
        assert!(matches!(generate_phantom(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = small_spec();
        let text = serde_json::to_string(&spec).unwrap();
        let back: PhantomSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
