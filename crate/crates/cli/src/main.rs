use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spatialflow::audio::{write_wav, BitDepth};
use spatialflow::pipeline::{self, PipelineConfig, MANIFEST_FILE};
use spatialflow::scene::{random_scene, synth_scene, RandomSceneOptions};
use spatialflow::spatial::{write_hrir_set, HrirSet};
use spatialflow::Error;

/// Stereo to 7.1.4 upmixing with a latent flow-matching model.
#[derive(Parser, Debug)]
#[command(name = "spatialflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Pipeline config file; the desk profile is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment 7.1.4 WAVs or scene files, downmix, cache latents, write a manifest.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Directory of .wav and .scene inputs.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the velocity network on a prepared dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Manifest path; defaults to the dataset's manifest.tsv.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate 7.1.4 audio from a stereo WAV.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Render a 7.1.4 WAV to binaural stereo.
    Binauralize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// HRIR set file; the built-in synthetic set is used when omitted.
        #[arg(long)]
        hrir: Option<PathBuf>,
    },
    /// Per-channel comparison of a generated 7.1.4 WAV against a reference.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        generated: PathBuf,
    },
    /// Fold a 7.1.4 WAV down to stereo.
    Downmix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Write seeded random scene files, or rendered 7.1.4 WAVs with --render.
    MakeScenes {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        render: bool,
    },
    /// Write the built-in synthetic HRIR set to a file.
    MakeHrir {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::desk(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn out_or(common: &Common, default: &Path) -> PathBuf {
    common.out.clone().unwrap_or_else(|| default.to_path_buf())
}

fn required_out(common: &Common) -> Result<PathBuf, Error> {
    common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Prepare { common, input } => {
            let cfg = load_config(&common)?;
            let out = out_or(&common, &cfg.paths.dataset);
            let m = pipeline::cmd_prepare(&cfg, &input, &out)?;
            let test = m.split(pipeline::Split::Test).count();
            println!(
                "prepared {} clips ({} train, {} test) in {}",
                m.entries.len(),
                m.entries.len() - test,
                test,
                out.display()
            );
        }
        Command::Train { common, manifest } => {
            let cfg = load_config(&common)?;
            let manifest = manifest.unwrap_or_else(|| cfg.paths.dataset.join(MANIFEST_FILE));
            let out = out_or(&common, &cfg.paths.checkpoints);
            let log_every = cfg.train.log_every.max(1);
            let s = pipeline::cmd_train(&cfg, &manifest, &out)?;
            for (step, loss) in s.history.iter().filter(|(st, _)| st % log_every == 0) {
                println!("step {step}\tloss {loss:.6}");
            }
            println!(
                "trained steps {}..{}; final checkpoint {}",
                s.start_step + 1,
                s.final_step,
                s.final_checkpoint.display()
            );
        }
        Command::Infer {
            common,
            checkpoint,
            input,
        } => {
            let cfg = load_config(&common)?;
            let out = required_out(&common)?;
            let s = pipeline::cmd_infer(&cfg, &checkpoint, &input, &out, common.seed.unwrap_or(0))?;
            println!(
                "wrote {} ({} frames, {} chunks, {} accepted, {} rejected, {} evaluations)",
                out.display(),
                s.frames,
                s.chunks,
                s.accepted,
                s.rejected,
                s.evaluations
            );
        }
        Command::Binauralize {
            common,
            input,
            hrir,
        } => {
            let cfg = load_config(&common)?;
            let out = required_out(&common)?;
            pipeline::cmd_binauralize(&cfg, &input, hrir.as_deref(), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            common,
            reference,
            generated,
        } => {
            let cfg = load_config(&common)?;
            let out = required_out(&common)?;
            let r = pipeline::cmd_eval(&cfg, &reference, &generated, &out)?;
            print!("{}", r.to_tsv());
        }
        Command::Downmix { common, input } => {
            let cfg = load_config(&common)?;
            let out = required_out(&common)?;
            pipeline::cmd_downmix(&cfg, &input, &out)?;
            println!("wrote {}", out.display());
        }
        Command::MakeScenes {
            common,
            count,
            render,
        } => {
            let cfg = load_config(&common)?;
            let out = required_out(&common)?;
            let opts = RandomSceneOptions {
                duration: cfg.clip_seconds,
                sample_rate: cfg.codec.sample_rate,
                max_freq: 0.45 * (cfg.codec.latent_dim * cfg.codec.frame_rate as usize) as f64,
            };
            if render {
                std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
                for i in 0..count {
                    let audio = synth_scene(&random_scene(cfg.seed.wrapping_add(i as u64), opts))?;
                    write_wav(&audio, out.join(format!("scene_{i:03}.wav")), BitDepth::Float32)?;
                }
            } else {
                pipeline::write_random_scenes(&out, count, cfg.seed, opts)?;
            }
            println!("wrote {count} scenes to {}", out.display());
        }
        Command::MakeHrir { common } => {
            let cfg = load_config(&common)?;
            let out = required_out(&common)?;
            write_hrir_set(&HrirSet::synthetic(cfg.codec.sample_rate), &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if matches!(e, Error::Config(_)) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
