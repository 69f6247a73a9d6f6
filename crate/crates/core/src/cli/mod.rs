//! The `ipf` command line: `encode`, `decode`, `eval` and `inspect`.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 for failures
//! while running a command.

mod rd;

pub use rd::{read_baseline_csv, write_gnuplot, write_rd_csv, RdPoint};

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use thiserror::Error;

use crate::bitstream::{inspect_report, Document};
use crate::media::{load_frame_sequence, psnr, save_frame, ImageTensor};
use crate::trainer::TrainConfig;
use crate::vidflow::{decode_stream, encode_video, CodecConfig, ResidualMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Working point used for single images when none is given.
pub const DEFAULT_IMAGE_PRESET: &str = "kodak-3";
/// Working point used for frame sequences when none is given.
pub const DEFAULT_VIDEO_PRESET: &str = "small";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "ipf", version, about = "Implicit pixel flow image and video codec")]
pub struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Worker threads for network evaluation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualArg {
    Auto,
    On,
    Off,
}

impl From<ResidualArg> for ResidualMode {
    fn from(r: ResidualArg) -> Self {
        match r {
            ResidualArg::Auto => ResidualMode::Auto,
            ResidualArg::On => ResidualMode::Always,
            ResidualArg::Off => ResidualMode::Never,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FrameFormat {
    Png,
    Ppm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a still image or a directory of frames.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Working point (kodak-1..kodak-7, clic, small, medium, large,
        /// usiren-small, usiren-medium, usiren-large).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gop: Option<usize>,
        /// Multiplier on every training schedule's step count, in (0, 1].
        #[arg(long)]
        steps_scale: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        residual: Option<ResidualArg>,
        /// TOML file with defaults for the options above and
        /// `[presets.<stage>]` schedule overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-frame metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Decode an .ipf file into numbered frames.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Fail instead of creating a missing output directory.
        #[arg(long)]
        no_create: bool,
        #[arg(long, value_enum, default_value = "png")]
        format: FrameFormat,
    },
    /// Rate-distortion points of decoded results against reference frames.
    Eval {
        /// Reference still or frame directory.
        reference: PathBuf,
        /// .ipf files, decoded frame directories or stills; one RD point each.
        #[arg(required = true)]
        decoded: Vec<PathBuf>,
        /// Series name for these points.
        #[arg(long, default_value = "ipf")]
        series: String,
        /// Baseline RD points to merge (CSV with series,bpp,psnr columns).
        #[arg(long)]
        baseline: Vec<PathBuf>,
        /// CSV output; standard output when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// gnuplot data file with one block per series.
        #[arg(long)]
        gnuplot: Option<PathBuf>,
    },
    /// Print header, learned bitwidths and byte budget of an .ipf file.
    Inspect { input: PathBuf },
}

/// Defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub beta: Option<f64>,
    pub gop: Option<usize>,
    pub steps_scale: Option<f64>,
    pub seed: Option<u64>,
    pub residual: Option<ResidualArg>,
    #[serde(default)]
    pub presets: BTreeMap<String, TrainConfig>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Flag values for [`codec_config`]; flags win over the config file.
#[derive(Debug, Default)]
pub struct EncodeFlags {
    pub preset: Option<String>,
    pub beta: Option<f64>,
    pub gop: Option<usize>,
    pub steps_scale: Option<f64>,
    pub seed: Option<u64>,
    pub residual: Option<ResidualArg>,
}

/// Resolves the codec configuration for `frames` input frames.
pub fn codec_config(
    flags: &EncodeFlags,
    file: &ConfigFile,
    frames: usize,
) -> Result<CodecConfig, CliError> {
    let default = if frames == 1 {
        DEFAULT_IMAGE_PRESET
    } else {
        DEFAULT_VIDEO_PRESET
    };
    let preset = flags
        .preset
        .as_deref()
        .or(file.preset.as_deref())
        .unwrap_or(default);
    let usage = |e: crate::vidflow::VidflowError| CliError::Usage(e.to_string());
    let mut cfg = CodecConfig::working_point(preset).map_err(usage)?;
    if let Some(b) = flags.beta.or(file.beta) {
        cfg.beta = b;
    }
    if let Some(g) = flags.gop.or(file.gop) {
        cfg.gop_size = g;
    }
    if let Some(s) = flags.steps_scale.or(file.steps_scale) {
        cfg.steps_scale = s;
    }
    if let Some(s) = flags.seed.or(file.seed) {
        cfg.seed = s;
    }
    if let Some(r) = flags.residual.or(file.residual) {
        cfg.residual_mode = r.into();
    }
    for (name, sched) in &file.presets {
        if !crate::vidflow::STAGES.contains(&name.as_str()) {
            return Err(CliError::Usage(format!("unknown schedule {name:?}")));
        }
        cfg.schedules.insert(name.clone(), sched.clone());
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// PSNR of what `decode` writes: reconstructions rounded to 8 bits.
pub fn exported_psnr(reconstructed: &ImageTensor, reference: &ImageTensor) -> Result<f64, CliError> {
    psnr(&reconstructed.to_8bit_levels(), reference).map_err(runtime)
}

fn frame_path(dir: &Path, index: usize, format: FrameFormat) -> PathBuf {
    let ext = match format {
        FrameFormat::Png => "png",
        FrameFormat::Ppm => "ppm",
    };
    dir.join(format!("frame_{index:05}.{ext}"))
}

fn cmd_encode(
    input: &Path,
    output: &Path,
    flags: EncodeFlags,
    config: Option<&Path>,
    metrics: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let file = match config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let frames = load_frame_sequence(input).map_err(runtime)?;
    let cfg = codec_config(&flags, &file, frames.len())?;
    let start = Instant::now();
    let result = encode_video(&frames, &cfg).map_err(runtime)?;
    let bytes = result.document.write_file(output).map_err(runtime)?;
    let psnrs = result
        .reconstructions
        .iter()
        .zip(&frames)
        .map(|(r, f)| exported_psnr(r, f))
        .collect::<Result<Vec<_>, _>>()?;
    let w = |e: std::io::Error| runtime(e);
    writeln!(out, "frame  type  bits  psnr_db  residual").map_err(w)?;
    for (m, p) in result.frames.iter().zip(&psnrs) {
        writeln!(
            out,
            "{:>5}  {:<4}  {}  {:.4}  {}",
            m.frame,
            m.kind,
            m.bits,
            p,
            if m.kind == 'I' { "-" } else if m.residual { "yes" } else { "no" }
        )
        .map_err(w)?;
    }
    for g in &result.gops {
        match g.choice {
            Some(c) => writeln!(
                out,
                "gop {}: residual {} (rd with {:.6e}, without {:.6e})",
                g.index,
                if c.include { "on" } else { "off" },
                c.rd_with,
                c.rd_without
            ),
            None if g.frames > 1 => writeln!(
                out,
                "gop {}: residual {}",
                g.index,
                if g.residual { "on" } else { "off" }
            ),
            None => Ok(()),
        }
        .map_err(w)?;
    }
    let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    writeln!(out, "total bytes {bytes}").map_err(w)?;
    writeln!(out, "bpp {:.6}", result.bpp()).map_err(w)?;
    writeln!(out, "mean psnr {mean:.6} dB").map_err(w)?;
    writeln!(out, "encode time {:.1} s", start.elapsed().as_secs_f64()).map_err(w)?;
    if let Some(path) = metrics {
        let file = std::fs::File::create(path).map_err(runtime)?;
        result.write_frame_csv(file).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_decode(
    input: &Path,
    output: &Path,
    no_create: bool,
    format: FrameFormat,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let bytes = std::fs::read(input).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    if !output.is_dir() {
        if no_create {
            return Err(CliError::Runtime(format!(
                "output directory {} does not exist",
                output.display()
            )));
        }
        std::fs::create_dir_all(output).map_err(runtime)?;
    }
    let mut t = Instant::now();
    let mut lines = Vec::new();
    decode_stream(&bytes, |index, frame| {
        let elapsed = t.elapsed();
        save_frame(&frame, frame_path(output, index, format))?;
        lines.push(format!("frame {index}: {:.1} ms", elapsed.as_secs_f64() * 1e3));
        t = Instant::now();
        Ok(())
    })
    .map_err(runtime)?;
    for l in lines {
        writeln!(out, "{l}").map_err(runtime)?;
    }
    Ok(())
}

fn cmd_eval(
    reference: &Path,
    decoded: &[PathBuf],
    series: &str,
    baselines: &[PathBuf],
    output: Option<&Path>,
    gnuplot: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let refs = load_frame_sequence(reference).map_err(runtime)?;
    let mut points = Vec::new();
    for path in decoded {
        points.push(rd::evaluate(&refs, path, series)?);
    }
    for b in baselines {
        points.extend(read_baseline_csv(b)?);
    }
    match output {
        Some(p) => {
            let f = std::fs::File::create(p).map_err(runtime)?;
            write_rd_csv(&points, f)?;
        }
        None => write_rd_csv(&points, &mut *out)?,
    }
    if let Some(p) = gnuplot {
        let f = std::fs::File::create(p).map_err(runtime)?;
        write_gnuplot(&points, f)?;
    }
    Ok(())
}

fn cmd_inspect(input: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let doc = Document::read_file(input).map_err(runtime)?;
    write!(out, "{}", inspect_report(&doc)).map_err(runtime)
}

/// Runs a parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        if let Err(e) = crate::par::set_workers(n) {
            log::warn!("worker pool unchanged: {e}");
        }
    }
    match cli.command {
        Command::Encode {
            input,
            output,
            preset,
            beta,
            gop,
            steps_scale,
            seed,
            residual,
            config,
            metrics,
        } => {
            let flags = EncodeFlags {
                preset,
                beta,
                gop,
                steps_scale,
                seed,
                residual,
            };
            cmd_encode(&input, &output, flags, config.as_deref(), metrics.as_deref(), out)
        }
        Command::Decode {
            input,
            output,
            no_create,
            format,
        } => cmd_decode(&input, &output, no_create, format, out),
        Command::Eval {
            reference,
            decoded,
            series,
            baseline,
            output,
            gnuplot,
        } => cmd_eval(
            &reference,
            &decoded,
            &series,
            &baseline,
            output.as_deref(),
            gnuplot.as_deref(),
            out,
        ),
        Command::Inspect { input } => cmd_inspect(&input, out),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit status.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match run(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
