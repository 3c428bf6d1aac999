//! Command-line surface of the tracker: track, evaluate, ablate, check
//! gradients, benchmark, generate sequences and dump template collections.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use bactrack::appearance::AdMode;
use bactrack::evalsim::{generate_sequence, FrameFormat, SyntheticConfig};
use bactrack::gradsuite::SuiteSizes;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::*;
use config::{parse_ad_mode, synthetic_config, tracker_config, Overrides, Precision, Preset};
use error::{CliError, CliResult, DataContext, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "bactrack", version, about = "Multi-template transformer tracker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track a sequence; writes telemetry.jsonl and summary.json.
    Track {
        #[arg(long)]
        sequence: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score telemetry against ground truth.
    Eval {
        #[arg(long)]
        telemetry: PathBuf,
        /// Ground-truth text file, sequence directory or manifest.
        #[arg(long)]
        groundtruth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare update strategies over seeded synthetic sequences.
    Ablate {
        /// Comma-separated arms: ac, au, rp, dp, n0 or MODE:N.
        #[arg(long, value_delimiter = ',', default_value = "ac,au,n0")]
        arms: Vec<ArmSpec>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Synthetic config keys overlaid on the drift benchmark.
        #[arg(long)]
        sim: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SuiteSizes::default().tokens)]
        tokens: usize,
        #[arg(long, default_value_t = SuiteSizes::default().channels)]
        channels: usize,
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time each tracking stage and count attention multiply-adds.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = MIN_BENCH_FRAMES)]
        frames: usize,
        #[arg(long)]
        sim: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic sequence to disk.
    Generate {
        #[arg(long)]
        sim: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FrameFormatArg::Pgm)]
        format: FrameFormatArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track the first frames of a sequence and dump the template collection.
    Snapshot {
        #[arg(long)]
        sequence: PathBuf,
        /// Frames to feed, including the first; all when omitted.
        #[arg(long)]
        frames: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FrameFormatArg {
    Pgm,
    Tensor,
}

impl From<FrameFormatArg> for FrameFormat {
    fn from(f: FrameFormatArg) -> Self {
        match f {
            FrameFormatArg::Pgm => FrameFormat::Pgm,
            FrameFormatArg::Tensor => FrameFormat::Tensor,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    /// Flat JSON whose keys are tracker config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    /// full, au, rp or dp.
    #[arg(long, value_parser = parse_ad_mode)]
    pub ad_mode: Option<AdMode>,
    #[arg(long)]
    pub n_templates: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
}

impl ModelArgs {
    pub fn tracker(&self) -> CliResult<bactrack::pipeline::TrackerConfig> {
        let flags = Overrides {
            seed: self.seed,
            ad_mode: self.ad_mode,
            n_templates: self.n_templates,
            groups: self.groups,
            heads: self.heads,
        };
        tracker_config(self.preset, self.config.as_deref(), &flags)
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes()).data_ctx(|| "cannot write to stdout".into())
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Track { sequence, model, out: dir } => {
            let cfg = model.tracker()?;
            let seq = read_sequence(&sequence)?;
            let run = track_sequence(&cfg, model.precision, &seq)?;
            if let Some(dir) = dir {
                write_track_outputs(&dir, &run)?;
            }
            emit(out, &pretty_json(&run.summary()))
        }
        Command::Eval { telemetry, groundtruth, out: dir } => {
            let text = std::fs::read_to_string(&telemetry).data_ctx(|| format!("cannot read {}", telemetry.display()))?;
            let records = parse_telemetry(&text)?;
            let truth = read_groundtruth(&groundtruth)?;
            let metrics = eval_records(&records, &truth)?;
            let json = pretty_json(&metrics);
            if let Some(dir) = dir {
                write_file(&dir.join("metrics.json"), &json)?;
            }
            emit(out, &json)
        }
        Command::Ablate { arms, seeds, first_seed, sim, model, out: dir } => {
            let cfg = model.tracker()?;
            let sim_base = synthetic_config(sim.as_deref(), first_seed)?;
            let seed_list: Vec<u64> = (first_seed..first_seed + seeds).collect();
            let make = |seed| SyntheticConfig { seed, ..sim_base.clone() };
            let report = ablate(&cfg, model.precision, &arms, &seed_list, &make)?;
            let table = render_table(&report);
            if let Some(dir) = dir {
                write_file(&dir.join("ablation.json"), pretty_json(&report))?;
                write_file(&dir.join("ablation.txt"), &table)?;
            }
            emit(out, &table)
        }
        Command::Gradcheck { seed, tokens, channels, corrupt_op, out: dir } => {
            let report = gradcheck(seed, SuiteSizes { tokens, channels }, corrupt_op.as_deref())?;
            let json = pretty_json(&report);
            if let Some(dir) = dir {
                write_file(&dir.join("gradcheck.json"), &json)?;
            }
            emit(out, &json)?;
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.op.as_str()).collect();
                Err(CliError::threshold(anyhow::anyhow!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Bench { model, frames, sim, out: dir } => {
            let cfg = model.tracker()?;
            let sim = synthetic_config(sim.as_deref(), cfg.seed)?;
            let report = bench(&cfg, model.precision, frames, &sim)?;
            let json = pretty_json(&report);
            if let Some(dir) = dir {
                write_file(&dir.join("bench.json"), &json)?;
            }
            emit(out, &json)
        }
        Command::Generate { sim, seed, format, out: dir } => {
            let cfg = synthetic_config(sim.as_deref(), seed)?;
            let cfg = SyntheticConfig { seed, ..cfg };
            let seq = generate_sequence(&cfg).map_err(CliError::usage)?;
            seq.write_dir(&dir, format.into())
                .data_ctx(|| format!("cannot write sequence to {}", dir.display()))?;
            emit(out, &format!("{} frames written to {}\n", seq.len(), dir.display()))
        }
        Command::Snapshot { sequence, frames, model, out: dir } => {
            let cfg = model.tracker()?;
            let seq = read_sequence(&sequence)?;
            let n = frames.unwrap_or(seq.len()).min(seq.len());
            if n == 0 {
                return Err(CliError::usage(anyhow::anyhow!("snapshot needs at least one frame")));
            }
            let run = track_frames(&cfg, model.precision, &seq.frames[..n], seq.groundtruth[0])?;
            run.snapshot
                .write_dir(&dir)
                .data_ctx(|| format!("cannot write snapshot to {}", dir.display()))?;
            emit(out, &pretty_json(&run.summary()))
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code
        }
    }
}
