use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mrulm::error::{Error, Result};
use mrulm::evaluate::{cnr_report, in_vessel_fraction, upper_bound, AccuracyReport, CnrReport};
use mrulm::grid::{load_mask, load_stack, read_header, save_frame, save_mask, save_stack, FrameStack};
use mrulm::localize::Localization;
use mrulm::morphology::{hdome, Connectivity, MarkerMode, StructuringElement};
use mrulm::pipeline::{
    bench, config_phantom, filter_stack, localize_preprocessed, localize_stack, read_peaks_csv, reconstruct_timing,
    render_localizations, run_pipeline, with_threads, write_json, write_peaks_csv, BenchReport, Method,
    PipelineConfig,
};
use mrulm::preprocess::{preprocess_frame, InterpMethod};
use mrulm::render::{line_profile, max_intensity_projection, write_pgm16, write_profile_csv, Weighting};
use mrulm::synth::{generate_phantom, load_spec, write_truth_csv, PhantomSpec};
use mrulm::track::{track_all, write_velocity_csv};

#[derive(Parser)]
#[command(name = "mrulm", version, about = "Microbubble localization by morphological reconstruction")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Pipeline configuration JSON; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom stack with ground truth.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Normalize, remove clutter by SVD and normalize again.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rel_threshold: Option<f64>,
        #[arg(long)]
        keep_smallest: bool,
    },
    /// Interpolate and smooth every frame.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pre: PreFlags,
    },
    /// Dome image of one frame, for inspection.
    Hdome {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[command(flatten)]
        loc: LocFlags,
    },
    /// Localize bubbles in a filtered stack and write a peaks CSV.
    Localize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Input frames are already interpolated and smoothed.
        #[arg(long)]
        preprocessed: bool,
        #[command(flatten)]
        pre: PreFlags,
        #[command(flatten)]
        loc: LocFlags,
    },
    /// Render a super-resolved image from peaks, or a projection of a stack.
    Render {
        #[arg(long, required_unless_present = "mip")]
        peaks: Option<PathBuf>,
        /// Stack whose geometry defines the native grid.
        #[arg(long, required_unless_present = "mip")]
        reference: Option<PathBuf>,
        /// Render the maximum intensity projection of this stack instead.
        #[arg(long, conflicts_with = "peaks")]
        mip: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sigma_um: Option<f64>,
        #[arg(long)]
        weighting: Option<String>,
        /// Profile endpoints `y0,x0,y1,x1` in micrometers.
        #[arg(long, value_delimiter = ',')]
        profile: Option<Vec<f64>>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, requires = "profile")]
        profile_out: Option<PathBuf>,
        #[command(flatten)]
        pre: PreFlags,
    },
    /// Score peaks against a vessel mask.
    Evaluate {
        #[arg(long)]
        peaks: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_delimiter = ',')]
        tolerances_um: Option<Vec<f64>>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// CNR regions JSON `{"rois": [[[i, j], ...], ...], "background": [[i, j], ...]}`
        /// on the rendered grid; needs `--reference`.
        #[arg(long, requires = "reference")]
        cnr: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        pre: PreFlags,
    },
    /// Pair localizations in consecutive frames into velocity vectors.
    Track {
        #[arg(long)]
        peaks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        max_disp_um: f64,
        /// Frame interval in seconds; read from `--reference` when omitted.
        #[arg(long, required_unless_present = "reference")]
        dt: Option<f64>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Full pipeline as described by the configuration.
    Run {
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Per-frame timing of the localization stages.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        factors: Vec<usize>,
        #[arg(long = "h", value_delimiter = ',', default_value = "0.025,0.05,0.075")]
        h_values: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Use only the first N frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Also time naive vs fast reconstruction on an image of this size.
        #[arg(long)]
        reconstruct_size: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct PreFlags {
    /// Interpolation factors, `FYxFX` or a single factor.
    #[arg(long)]
    interp: Option<String>,
    #[arg(long)]
    interp_method: Option<String>,
    #[arg(long)]
    smooth_um: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct LocFlags {
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    connectivity: Option<u32>,
    #[arg(long)]
    psf_um: Option<f64>,
    /// Use the fixed-threshold baseline instead of reconstruction.
    #[arg(long)]
    baseline: bool,
}

fn parse_factors(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Argument(format!("interpolation must look like `12x12` or `4`, got `{s}`"));
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    match s.split_once(['x', 'X']) {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => {
            let f = parse(s)?;
            Ok((f, f))
        }
    }
}

impl PreFlags {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(s) = &self.interp {
            let (fy, fx) = parse_factors(s)?;
            cfg.preprocess.factor_y = fy;
            cfg.preprocess.factor_x = fx;
        }
        if let Some(m) = &self.interp_method {
            cfg.preprocess.method = m.parse::<InterpMethod>()?;
        }
        if let Some(s) = self.smooth_um {
            cfg.preprocess.smooth_sigma = s * 1e-6;
        }
        Ok(())
    }
}

impl LocFlags {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(h) = self.h {
            cfg.localize.h = h;
        }
        if let Some(m) = &self.mode {
            cfg.localize.mode = m.parse::<MarkerMode>()?;
        }
        if let Some(c) = self.connectivity {
            cfg.localize.connectivity = Connectivity::from_count(c)?;
        }
        if let Some(p) = self.psf_um {
            cfg.localize.psf_sigma = p * 1e-6;
        }
        if self.baseline {
            cfg.method = Method::Baseline;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct EvaluateReport {
    n_localizations: usize,
    accuracy: AccuracyReport,
    upper_bound: f64,
    cnr: Option<CnrReport>,
}

#[derive(serde::Deserialize)]
struct CnrRegions {
    rois: Vec<Vec<(usize, usize)>>,
    background: Vec<(usize, usize)>,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    // a closed pipe on stdout is not an error worth reporting
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

fn reference_geometry(path: &Path) -> Result<mrulm::grid::GridGeometry> {
    Ok(read_header(path)?.geometry)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    let threads = cfg.threads;
    with_threads(threads, move || dispatch(cli.command, cfg))?
}

fn dispatch(command: Command, mut cfg: PipelineConfig) -> Result<()> {
    match command {
        Command::Synth {
            spec,
            out,
            truth,
            mask,
            seed,
        } => {
            let (stack, gt) = match (spec, cfg.phantom.clone()) {
                // same seed and noise handling as `run`
                (None, Some(s)) => {
                    if let Some(v) = seed {
                        cfg.seed = v;
                    }
                    config_phantom(&s, &cfg)?
                }
                (spec, _) => {
                    let mut spec = match spec {
                        Some(p) => load_spec(p)?,
                        None => PhantomSpec::default(),
                    };
                    if let Some(s) = seed {
                        spec.seed = s;
                    }
                    generate_phantom(&spec)?
                }
            };
            save_stack(&stack, &out)?;
            if let Some(p) = truth {
                write_truth_csv(&gt, p)?;
            }
            if let Some(p) = mask {
                save_mask(&gt.mask, p)?;
            }
            eprintln!("wrote {} frames, {} bubbles", stack.nframes(), gt.bubbles.len());
        }
        Command::Filter {
            input,
            out,
            rel_threshold,
            keep_smallest,
        } => {
            if let Some(r) = rel_threshold {
                cfg.svd.rel_threshold = r;
            }
            if keep_smallest {
                cfg.svd.drop_smallest = false;
            }
            cfg.validate()?;
            let stack = load_stack(&input)?;
            save_stack(&filter_stack(&stack, &cfg.svd)?, &out)?;
        }
        Command::Preprocess { input, out, pre } => {
            pre.apply(&mut cfg)?;
            cfg.validate()?;
            let stack = load_stack(&input)?;
            let frames = {
                use rayon::prelude::*;
                stack
                    .frames
                    .par_iter()
                    .map(|f| preprocess_frame(f, &cfg.preprocess))
                    .collect::<Result<Vec<_>>>()?
            };
            save_stack(&FrameStack::from_frames(frames)?, &out)?;
        }
        Command::Hdome {
            input,
            out,
            frame,
            loc,
        } => {
            loc.apply(&mut cfg)?;
            cfg.validate()?;
            let stack = load_stack(&input)?;
            let f = stack.frames.get(frame).ok_or_else(|| {
                Error::Argument(format!("frame {frame} out of range (stack has {})", stack.nframes()))
            })?;
            let dome = hdome(
                f,
                cfg.localize.h as f32,
                cfg.localize.mode,
                &StructuringElement::flat(cfg.localize.connectivity),
            )?;
            save_frame(&dome.frame, &out)?;
        }
        Command::Localize {
            input,
            out,
            preprocessed,
            pre,
            loc,
        } => {
            pre.apply(&mut cfg)?;
            loc.apply(&mut cfg)?;
            cfg.validate()?;
            let stack = load_stack(&input)?;
            let locs = if preprocessed {
                localize_preprocessed(&stack, &cfg)?
            } else {
                localize_stack(&stack, &cfg)?
            };
            write_peaks_csv(&locs, &out)?;
            eprintln!(
                "{} localizations, {:.2} per frame",
                locs.len(),
                locs.len() as f64 / stack.nframes() as f64
            );
        }
        Command::Render {
            peaks,
            reference,
            mip,
            out,
            sigma_um,
            weighting,
            profile,
            samples,
            profile_out,
            pre,
        } => {
            pre.apply(&mut cfg)?;
            if let Some(s) = sigma_um {
                cfg.sr_sigma = Some(s * 1e-6);
            }
            if let Some(w) = weighting {
                cfg.weighting = match w.to_ascii_lowercase().as_str() {
                    "uniform" => Weighting::Uniform,
                    "amplitude" => Weighting::Amplitude,
                    other => return Err(Error::Argument(format!("unknown weighting `{other}`"))),
                };
            }
            cfg.validate()?;
            if let Some(p) = profile.as_ref().filter(|p| p.len() != 4) {
                return Err(Error::Argument(format!("--profile needs 4 values y0,x0,y1,x1, got {}", p.len())));
            }
            let profile_of = |image: &dyn mrulm::render::Raster| -> Result<()> {
                if let (Some(p), Some(path)) = (&profile, &profile_out) {
                    let prof = line_profile(image, (p[0] * 1e-6, p[1] * 1e-6), (p[2] * 1e-6, p[3] * 1e-6), samples)?;
                    write_profile_csv(&prof, path)?;
                }
                Ok(())
            };
            if let Some(m) = mip {
                let image = max_intensity_projection(&load_stack(&m)?);
                write_pgm16(&image, &out)?;
                profile_of(&image)?;
            } else {
                let (peaks, reference) = (peaks.unwrap(), reference.unwrap());
                let locs = read_peaks_csv(&peaks)?;
                let sr = render_localizations(&locs, &reference_geometry(&reference)?, &cfg)?;
                write_pgm16(&sr, &out)?;
                profile_of(&sr)?;
            }
        }
        Command::Evaluate {
            peaks,
            mask,
            tolerances_um,
            report,
            cnr,
            reference,
            pre,
        } => {
            pre.apply(&mut cfg)?;
            if let Some(t) = tolerances_um {
                cfg.tolerances_um = t;
            }
            cfg.validate()?;
            let locs: Vec<Localization> = read_peaks_csv(&peaks)?;
            let mask = load_mask(&mask)?;
            let accuracy = in_vessel_fraction(&locs, &mask, &cfg.tolerances_m())?;
            let bound = upper_bound(&mask, mask.geometry.wavelength)?;
            let cnr = match (cnr, reference) {
                (Some(path), Some(reference)) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    let regions: CnrRegions = serde_json::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    let sr = render_localizations(&locs, &reference_geometry(&reference)?, &cfg)?;
                    Some(cnr_report(&sr, &regions.rois, &regions.background)?)
                }
                _ => None,
            };
            let rep = EvaluateReport {
                n_localizations: locs.len(),
                accuracy,
                upper_bound: bound,
                cnr,
            };
            match report {
                Some(p) => write_json(&rep, p)?,
                None => print_json(&rep)?,
            }
        }
        Command::Track {
            peaks,
            out,
            max_disp_um,
            dt,
            reference,
        } => {
            let dt = match (dt, reference) {
                (Some(dt), _) => dt,
                (None, Some(r)) => reference_geometry(&r)?.dt,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let locs = read_peaks_csv(&peaks)?;
            let vels = track_all(&locs, dt, max_disp_um * 1e-6)?;
            write_velocity_csv(&vels, &out)?;
            eprintln!("{} velocity vectors", vels.len());
        }
        Command::Run { out_dir } => {
            if out_dir.is_some() {
                cfg.output_dir = out_dir;
            }
            let out = run_pipeline(&cfg)?;
            print_json(&out.report)?;
        }
        Command::Bench {
            factors,
            h_values,
            repeats,
            frames,
            reconstruct_size,
            report,
        } => {
            // without an input, time the default phantom
            if cfg.phantom.is_none() && cfg.input.is_none() {
                cfg.phantom = Some(PhantomSpec::default());
            }
            if let (Some(p), Some(n)) = (cfg.phantom.as_mut(), frames) {
                p.nframes = n.max(2);
            }
            let (mut stack, _, _) = mrulm::pipeline::load_inputs(&cfg)?;
            if let Some(n) = frames {
                stack.frames.truncate(n.max(1));
            }
            let t = std::time::Instant::now();
            let filtered = filter_stack(&stack, &cfg.svd)?;
            let svd_filter_ms = t.elapsed().as_secs_f64() * 1e3;
            let rows = bench(&filtered, &cfg, &factors, &h_values, repeats)?;
            let reconstruct = match reconstruct_size {
                Some(n) => Some(reconstruct_timing(n, 100, cfg.localize.h as f32, repeats, cfg.seed)?),
                None => None,
            };
            let rep = BenchReport {
                svd_filter_ms,
                rows,
                reconstruct,
            };
            match report {
                Some(p) => write_json(&rep, p)?,
                None => print_json(&rep)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
