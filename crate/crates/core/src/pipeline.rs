//! End-to-end driver: configuration, the frame-parallel localization run,
//! artifact I/O and the timing harness.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluate::{add_noise, in_vessel_fraction, upper_bound, AccuracyReport};
use crate::grid::{load_mask, load_stack, normalize_stack, save_mask, save_stack, Frame, FrameStack, GridGeometry, VesselMask};
use crate::localize::{localize_frame, threshold_baseline, LocalizeConfig, Localization};
use crate::morphology::{reconstruct_fast, reconstruct_naive, Connectivity, StructuringElement};
use crate::preprocess::{preprocess_frame, PreprocessConfig};
use crate::render::{accumulate_sr_with, write_pgm16, SRImage, Weighting};
use crate::svd_filter::{svd_clutter_filter, SvdFilterConfig};
use crate::synth::{generate_phantom, write_truth_csv, PhantomSpec};

/// A filtered stack whose largest magnitude is below this (in normalized
/// units) is treated as blank rather than re-normalized.
pub const BLANK_LEVEL: f32 = 1e-6;

const NOISE_SALT: u64 = 0x7069_7065_6e6f_6973;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// h-dome morphological reconstruction.
    #[default]
    Mr,
    /// Fixed fraction-of-max threshold.
    Baseline,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mr" => Ok(Self::Mr),
            "baseline" => Ok(Self::Baseline),
            other => Err(Error::Argument(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub svd: SvdFilterConfig,
    pub preprocess: PreprocessConfig,
    pub localize: LocalizeConfig,
    pub method: Method,
    /// SR Gaussian sigma in meters; `None` uses wavelength / 8.
    pub sr_sigma: Option<f64>,
    pub weighting: Weighting,
    pub tolerances_um: Vec<f64>,
    /// Extra noise added to the input before processing, relative to its
    /// mean.
    pub noise_rel: f64,
    /// Seeds the phantom (when one is configured) and the added noise.
    pub seed: u64,
    pub threads: Option<usize>,
    /// Generate the input instead of reading `input`.
    pub phantom: Option<PhantomSpec>,
    pub input: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Also write the filtered stack and, for phantoms, the truth files.
    pub persist_intermediates: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            svd: SvdFilterConfig::default(),
            preprocess: PreprocessConfig::default(),
            localize: LocalizeConfig::default(),
            method: Method::Mr,
            sr_sigma: None,
            weighting: Weighting::Uniform,
            tolerances_um: vec![0.0, 20.0, 50.0],
            noise_rel: 0.0,
            seed: 0,
            threads: None,
            phantom: None,
            input: None,
            mask: None,
            output_dir: None,
            persist_intermediates: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.svd.validate()?;
        self.preprocess.validate()?;
        self.localize.validate()?;
        if let Some(s) = self.sr_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sr_sigma must be positive, got {s}")));
            }
        }
        if self.tolerances_um.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("tolerances must be >= 0".into()));
        }
        if !(self.noise_rel >= 0.0 && self.noise_rel.is_finite()) {
            return Err(Error::Config(format!("noise_rel must be >= 0, got {}", self.noise_rel)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if let Some(p) = &self.phantom {
            p.validate()?;
        }
        Ok(())
    }

    pub fn sr_sigma_for(&self, geometry: &GridGeometry) -> f64 {
        self.sr_sigma.unwrap_or(geometry.wavelength / 8.0)
    }

    pub fn tolerances_m(&self) -> Vec<f64> {
        self.tolerances_um.iter().map(|t| t * 1e-6).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn zeros_like(stack: &FrameStack) -> FrameStack {
    FrameStack {
        geometry: stack.geometry,
        frames: stack.frames.iter().map(|f| Frame::zeros(f.geometry)).collect(),
    }
}

/// Normalize, remove clutter, normalize again. Constant input and blank
/// filter output both yield an all-zero stack.
pub fn filter_stack(stack: &FrameStack, cfg: &SvdFilterConfig) -> Result<FrameStack> {
    let (lo, hi) = stack.min_max();
    if lo == hi {
        return Ok(zeros_like(stack));
    }
    let norm = normalize_stack(stack).map_err(|e| e.in_stage("normalize", None))?;
    let filtered = svd_clutter_filter(&norm, cfg).map_err(|e| e.in_stage("svd_filter", None))?;
    let (lo, hi) = filtered.min_max();
    if lo.abs().max(hi.abs()) < BLANK_LEVEL || lo == hi {
        return Ok(zeros_like(&filtered));
    }
    normalize_stack(&filtered).map_err(|e| e.in_stage("normalize", None))
}

/// Preprocesses and localizes one filtered frame.
pub fn localize_one(frame: &Frame, index: usize, cfg: &PipelineConfig) -> Result<Vec<Localization>> {
    let pre = preprocess_frame(frame, &cfg.preprocess).map_err(|e| e.in_stage("preprocess", Some(index)))?;
    detect(&pre, index, cfg.method, &cfg.localize)
}

fn detect(pre: &Frame, index: usize, method: Method, cfg: &LocalizeConfig) -> Result<Vec<Localization>> {
    match method {
        Method::Mr => localize_frame(pre, index, cfg),
        Method::Baseline => threshold_baseline(pre, index, cfg),
    }
    .map_err(|e| e.in_stage("localize", Some(index)))
}

/// Frame-parallel localization; the result is ordered by frame index
/// whatever the worker count.
pub fn localize_stack(filtered: &FrameStack, cfg: &PipelineConfig) -> Result<Vec<Localization>> {
    let per_frame = filtered
        .frames
        .par_iter()
        .enumerate()
        .map(|(t, f)| localize_one(f, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

/// Localizations of already preprocessed frames.
pub fn localize_preprocessed(stack: &FrameStack, cfg: &PipelineConfig) -> Result<Vec<Localization>> {
    let per_frame = stack
        .frames
        .par_iter()
        .enumerate()
        .map(|(t, f)| detect(f, t, cfg.method, &cfg.localize))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

/// SR grid for a native acquisition grid.
pub fn sr_geometry(native: &GridGeometry, cfg: &PipelineConfig) -> GridGeometry {
    native.upsampled(cfg.preprocess.factor_y, cfg.preprocess.factor_x)
}

pub fn render_localizations(locs: &[Localization], native: &GridGeometry, cfg: &PipelineConfig) -> Result<SRImage> {
    let g = sr_geometry(native, cfg);
    accumulate_sr_with(locs, g, cfg.sr_sigma_for(&g), cfg.weighting).map_err(|e| e.in_stage("render", None))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub filter_s: f64,
    pub localize_s: f64,
    pub render_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub nframes: usize,
    pub n_localizations: usize,
    pub peaks_per_frame_mean: f64,
    pub peaks_per_frame_std: f64,
    pub timings: StageTimings,
    pub accuracy: Option<AccuracyReport>,
    /// Upper bound on separable localizations for the mask area.
    pub upper_bound: Option<f64>,
    pub peaks_sha256: String,
    pub sr_sha256: String,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub filtered: FrameStack,
    pub localizations: Vec<Localization>,
    pub sr: SRImage,
    pub report: PipelineReport,
}

/// Per-frame counts of a frame-sorted localization list.
pub fn peaks_per_frame(locs: &[Localization], nframes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; nframes];
    for l in locs {
        if l.frame_index < nframes {
            counts[l.frame_index] += 1;
        }
    }
    counts
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Filter, localize and render an in-memory stack, scoring against `mask`
/// when given.
pub fn process_stack(stack: &FrameStack, cfg: &PipelineConfig, mask: Option<&VesselMask>) -> Result<PipelineOutput> {
    cfg.validate()?;
    let t0 = Instant::now();
    let filtered = filter_stack(stack, &cfg.svd)?;
    let t1 = Instant::now();
    let localizations = localize_stack(&filtered, cfg)?;
    let t2 = Instant::now();
    let sr = render_localizations(&localizations, &stack.geometry, cfg)?;
    let t3 = Instant::now();

    let counts: Vec<f64> = peaks_per_frame(&localizations, stack.nframes())
        .into_iter()
        .map(|c| c as f64)
        .collect();
    let (ppf_mean, ppf_std) = mean_std(&counts);
    let (accuracy, bound) = match mask {
        Some(m) => (
            Some(in_vessel_fraction(&localizations, m, &cfg.tolerances_m()).map_err(|e| e.in_stage("evaluate", None))?),
            Some(upper_bound(m, stack.geometry.wavelength).map_err(|e| e.in_stage("evaluate", None))?),
        ),
        None => (None, None),
    };
    let report = PipelineReport {
        nframes: stack.nframes(),
        n_localizations: localizations.len(),
        peaks_per_frame_mean: ppf_mean,
        peaks_per_frame_std: ppf_std,
        timings: StageTimings {
            filter_s: (t1 - t0).as_secs_f64(),
            localize_s: (t2 - t1).as_secs_f64(),
            render_s: (t3 - t2).as_secs_f64(),
            total_s: (t3 - t0).as_secs_f64(),
        },
        accuracy,
        upper_bound: bound,
        peaks_sha256: sha256_hex(&encode_peaks_csv(&localizations)),
        sr_sha256: sha256_hex(&sr_bytes(&sr)),
    };
    Ok(PipelineOutput {
        filtered,
        localizations,
        sr,
        report,
    })
}

/// Input stack and optional mask named by the configuration, with the
/// configured noise added.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<(FrameStack, Option<VesselMask>, Option<crate::synth::GroundTruth>)> {
    let (stack, mask, truth) = match (&cfg.phantom, &cfg.input) {
        (Some(spec), _) => {
            let (stack, truth) = config_phantom(spec, cfg)?;
            (stack, Some(truth.mask.clone()), Some(truth))
        }
        (None, Some(path)) => (add_config_noise(load_stack(path)?, cfg)?, None, None),
        (None, None) => return Err(Error::Config("configuration names neither a phantom nor an input stack".into())),
    };
    let mask = match &cfg.mask {
        Some(p) => Some(load_mask(p)?),
        None => mask,
    };
    Ok((stack, mask, truth))
}

/// The phantom as a configured run sees it: the configuration's seed
/// replaces the spec's, and the configured noise is added.
pub fn config_phantom(spec: &PhantomSpec, cfg: &PipelineConfig) -> Result<(FrameStack, crate::synth::GroundTruth)> {
    let mut spec = spec.clone();
    spec.seed = cfg.seed;
    let (stack, truth) = generate_phantom(&spec).map_err(|e| e.in_stage("synth", None))?;
    Ok((add_config_noise(stack, cfg)?, truth))
}

fn add_config_noise(stack: FrameStack, cfg: &PipelineConfig) -> Result<FrameStack> {
    if cfg.noise_rel > 0.0 {
        add_noise(&stack, cfg.noise_rel, cfg.seed ^ NOISE_SALT)
    } else {
        Ok(stack)
    }
}

/// Full run as described by the configuration, writing artifacts to
/// `output_dir` when set.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    with_threads(cfg.threads, || {
        let (stack, mask, truth) = load_inputs(cfg)?;
        let out = process_stack(&stack, cfg, mask.as_ref())?;
        if let Some(dir) = &cfg.output_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_peaks_csv(&out.localizations, dir.join("peaks.csv"))?;
            write_pgm16(&out.sr, dir.join("sr.pgm"))?;
            write_json(&out.report, dir.join("report.json"))?;
            if cfg.persist_intermediates {
                save_stack(&out.filtered, dir.join("filtered.fst"))?;
                if let Some(t) = &truth {
                    write_truth_csv(t, dir.join("truth.csv"))?;
                    save_mask(&t.mask, dir.join("mask.fst"))?;
                }
            }
        }
        Ok(out)
    })?
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(format!("serializing JSON: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub const PEAKS_HEADER: &str = "frame,y_m,x_m,amplitude,area_wl2,orientation_rad";

pub fn encode_peaks_csv(locs: &[Localization]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 * locs.len() + 64);
    writeln!(buf, "{PEAKS_HEADER}").unwrap();
    for l in locs {
        writeln!(
            buf,
            "{},{},{},{},{},{}",
            l.frame_index, l.y, l.x, l.amplitude, l.region_area_wl2, l.orientation_rad
        )
        .unwrap();
    }
    buf
}

pub fn write_peaks_csv(locs: &[Localization], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_peaks_csv(locs)).map_err(|e| Error::io(path, e))
}

pub fn decode_peaks_csv(text: &str) -> Result<Vec<Localization>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len() as u64;
        let line = line.trim_end();
        if n == 0 {
            if line != PEAKS_HEADER {
                return Err(Error::format(start, format!("expected header `{PEAKS_HEADER}`")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::format(start, format!("line {}: expected 6 fields, got {}", n + 1, fields.len())));
        }
        let num = |k: usize| {
            fields[k]
                .parse::<f64>()
                .map_err(|e| Error::format(start, format!("line {}: field {}: {e}", n + 1, k + 1)))
        };
        out.push(Localization {
            frame_index: fields[0]
                .parse()
                .map_err(|e| Error::format(start, format!("line {}: frame: {e}", n + 1)))?,
            y: num(1)?,
            x: num(2)?,
            amplitude: num(3)?,
            region_area_wl2: num(4)?,
            orientation_rad: num(5)?,
        });
    }
    if offset == 0 {
        return Err(Error::format(0, "empty peaks file"));
    }
    Ok(out)
}

pub fn read_peaks_csv(path: impl AsRef<Path>) -> Result<Vec<Localization>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_peaks_csv(&text)
}

/// Little-endian f64 payload of an SR image.
pub fn sr_bytes(sr: &SRImage) -> Vec<u8> {
    sr.data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// --- timing harness ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub factor: usize,
    /// `None` for the baseline.
    pub h: Option<f64>,
    pub frames: usize,
    pub repeats: usize,
    pub preprocess_ms: Stat,
    pub localize_ms: Stat,
    /// Per-frame total, excluding clutter filtering.
    pub total_ms: Stat,
    pub peaks_per_frame: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructTiming {
    pub size: usize,
    pub peaks: usize,
    pub naive_ms: f64,
    pub fast_ms: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub svd_filter_ms: f64,
    pub rows: Vec<BenchRow>,
    pub reconstruct: Option<ReconstructTiming>,
}

fn bench_rows(
    filtered: &FrameStack,
    cfg: &PipelineConfig,
    method: Method,
    factor: usize,
    h: Option<f64>,
    repeats: usize,
) -> Result<BenchRow> {
    let mut c = cfg.clone();
    c.method = method;
    c.preprocess.factor_y = factor;
    c.preprocess.factor_x = factor;
    if let Some(h) = h {
        c.localize.h = h;
    }
    c.validate()?;
    let (mut pre_ms, mut loc_ms, mut tot_ms, mut peaks) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..repeats {
        for (t, f) in filtered.frames.iter().enumerate() {
            let a = Instant::now();
            let pre = preprocess_frame(f, &c.preprocess)?;
            let b = Instant::now();
            let locs = detect(&pre, t, method, &c.localize)?;
            let e = Instant::now();
            pre_ms.push((b - a).as_secs_f64() * 1e3);
            loc_ms.push((e - b).as_secs_f64() * 1e3);
            tot_ms.push((e - a).as_secs_f64() * 1e3);
            peaks.push(locs.len() as f64);
        }
    }
    Ok(BenchRow {
        method,
        factor,
        h,
        frames: filtered.nframes(),
        repeats,
        preprocess_ms: Stat::of(&pre_ms),
        localize_ms: Stat::of(&loc_ms),
        total_ms: Stat::of(&tot_ms),
        peaks_per_frame: Stat::of(&peaks),
    })
}

/// Per-frame timings of the localization stages, one row per
/// (factor, h) plus one baseline row per factor. Frames run one after
/// another on the calling thread so the timings are per-frame latencies.
pub fn bench(filtered: &FrameStack, cfg: &PipelineConfig, factors: &[usize], h_values: &[f64], repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(Error::Argument(format!("bench needs at least 3 repeats, got {repeats}")));
    }
    if factors.is_empty() || h_values.is_empty() {
        return Err(Error::Argument("bench needs at least one factor and one h".into()));
    }
    let mut rows = Vec::new();
    for &factor in factors {
        for &h in h_values {
            rows.push(bench_rows(filtered, cfg, Method::Mr, factor, Some(h), repeats)?);
        }
        rows.push(bench_rows(filtered, cfg, Method::Baseline, factor, None, repeats)?);
    }
    Ok(rows)
}

/// Image of `peaks` random Gaussian bumps on a `size x size` grid.
pub fn bump_image(size: usize, peaks: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..peaks)
        .map(|_| {
            (
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.1..1.0),
                rng.gen_range(1.5..4.0),
            )
        })
        .collect();
    let mut data = vec![0.0f64; size * size];
    for &(cy, cx, a, s) in &bumps {
        let r = (4.0 * s).ceil() as isize;
        let (iy, ix) = (cy.round() as isize, cx.round() as isize);
        for i in (iy - r).max(0)..(iy + r + 1).min(size as isize) {
            for j in (ix - r).max(0)..(ix + r + 1).min(size as isize) {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                data[i as usize * size + j as usize] += a * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
    let max = data.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    Frame {
        geometry: GridGeometry::with_shape(size, size),
        data: data.into_iter().map(|v| (v / max) as f32).collect(),
    }
}

/// Median wall-clock of naive and fast reconstruction of `I - h` under `I`.
pub fn reconstruct_timing(size: usize, peaks: usize, h: f32, repeats: usize, seed: u64) -> Result<ReconstructTiming> {
    let image = bump_image(size, peaks, seed);
    let marker = Frame {
        geometry: image.geometry,
        data: image.data.iter().map(|v| v - h).collect(),
    };
    let se = StructuringElement::flat(Connectivity::Eight);
    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let time = |f: &dyn Fn() -> Result<Frame>| -> Result<f64> {
        let mut ts = Vec::new();
        for _ in 0..repeats.max(1) {
            let a = Instant::now();
            std::hint::black_box(f()?);
            ts.push(a.elapsed().as_secs_f64() * 1e3);
        }
        Ok(median(ts))
    };
    let naive_ms = time(&|| reconstruct_naive(&image, &marker, &se))?;
    let fast_ms = time(&|| reconstruct_fast(&image, &marker, &se))?;
    Ok(ReconstructTiming {
        size,
        peaks,
        naive_ms,
        fast_ms,
        speedup: naive_ms / fast_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::VesselSpec;

    fn tiny_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.preprocess.factor_y = 2;
        cfg.preprocess.factor_x = 2;
        cfg
    }

    fn tiny_phantom(nframes: usize) -> PhantomSpec {
        PhantomSpec {
            geometry: GridGeometry::with_shape(32, 32),
            vessels: vec![VesselSpec::new((0.3e-3, 0.2e-3), (1.5e-3, 0.7e-3), 120e-6, 10e-3)],
            mean_bubbles: 2.0,
            nframes,
            mask_upsample: 2,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn blank_stack_gives_empty_output() {
        let g = GridGeometry::with_shape(12, 10);
        let stack = FrameStack::new(g, vec![Frame::zeros(g); 4]).unwrap();
        let out = process_stack(&stack, &tiny_config(), None).unwrap();
        assert!(out.localizations.is_empty());
        assert!(out.sr.data.iter().all(|&v| v == 0.0));
        // rank-one input is removed entirely by the filter
        let f = Frame::from_fn(g, |i, j| (i * 3 + j) as f32);
        let stack = FrameStack::new(g, vec![f; 6]).unwrap();
        let out = process_stack(&stack, &tiny_config(), None).unwrap();
        assert_eq!(out.report.n_localizations, 0);
    }

    #[test]
    fn config_round_trip_is_lossless() {
        let mut cfg = tiny_config();
        cfg.phantom = Some(tiny_phantom(8));
        cfg.sr_sigma = Some(7.5e-6);
        cfg.threads = Some(2);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let partial: PipelineConfig = serde_json::from_str(r#"{"localize": {"h": 0.1}}"#).unwrap();
        assert_eq!(partial.localize.h, 0.1);
        assert_eq!(partial.svd, SvdFilterConfig::default());
    }

    #[test]
    fn peaks_csv_round_trip_is_exact() {
        let locs = vec![
            Localization {
                frame_index: 3,
                y: 1.234_567_890_123e-3,
                x: 0.1 + 0.2,
                amplitude: 0.05,
                region_area_wl2: 1.0 / 3.0,
                orientation_rad: -std::f64::consts::FRAC_PI_3,
            };
            3
        ];
        let text = String::from_utf8(encode_peaks_csv(&locs)).unwrap();
        assert_eq!(decode_peaks_csv(&text).unwrap(), locs);
        let err = decode_peaks_csv(&text.replace("0.05", "x")).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset > 0));
        assert!(decode_peaks_csv("frame,y\n").is_err());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut cfg = tiny_config();
        cfg.phantom = Some(tiny_phantom(12));
        cfg.threads = Some(1);
        let a = run_pipeline(&cfg).unwrap();
        cfg.threads = Some(4);
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a.localizations, b.localizations);
        assert_eq!(a.report.sr_sha256, b.report.sr_sha256);
        assert!(a.report.n_localizations > 0);
    }

    #[test]
    fn bench_single_factor_row() {
        let spec = tiny_phantom(4);
        let (stack, _) = generate_phantom(&spec).unwrap();
        let filtered = filter_stack(&stack, &SvdFilterConfig::default()).unwrap();
        let rows = bench(&filtered, &tiny_config(), &[1], &[0.05], 3).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.total_ms.mean.is_finite() && r.total_ms.mean > 0.0);
            assert_eq!(r.factor, 1);
        }
        assert!(bench(&filtered, &tiny_config(), &[1], &[0.05], 2).is_err());
    }

    #[test]
    fn smaller_h_finds_at_least_as_many_peaks() {
        let spec = tiny_phantom(6);
        let (stack, _) = generate_phantom(&spec).unwrap();
        let filtered = filter_stack(&stack, &SvdFilterConfig::default()).unwrap();
        let rows = bench(&filtered, &tiny_config(), &[2], &[0.025, 0.05, 0.075], 3).unwrap();
        assert!(rows[0].peaks_per_frame.mean >= rows[1].peaks_per_frame.mean);
        assert!(rows[1].peaks_per_frame.mean >= rows[2].peaks_per_frame.mean);
    }

    #[test]
    fn stage_errors_name_the_frame() {
        let mut cfg = tiny_config();
        cfg.preprocess.factor_y = 0;
        let g = GridGeometry::with_shape(8, 8);
        let err = localize_one(&Frame::zeros(g), 5, &cfg).unwrap_err();
        assert!(err.to_string().contains("frame 5"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
