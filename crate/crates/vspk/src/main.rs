//! Command-line front end. All logic lives in the library; this file only
//! parses flags, merges them over an optional key=value settings file, and
//! maps outcomes to exit codes: 0 success or accept, 1 reject (verify
//! only), 2 any error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vspk::commands::{cmd_enroll, cmd_eval, cmd_prepare, cmd_synth, cmd_train, cmd_verify};
use vspk::config::RunConfig;
use vspk::trainer::Optimizer;

#[derive(Parser)]
#[command(
    name = "vspk",
    version,
    about = "Few-shot text-independent speaker verification from raw waveforms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared across subcommands. Precedence: flag, then settings
/// file, then built-in default.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat key=value settings file ('#' starts a comment)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Utterances per training batch
    #[arg(long)]
    batch_size: Option<usize>,
    /// Optimizer step size
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    /// Center-loss weight in the combined objective
    #[arg(long)]
    lambda: Option<f64>,
    /// Master seed; every random choice derives from it
    #[arg(long)]
    seed: Option<u64>,
    /// Parameter update rule: sgd or adam
    #[arg(long)]
    optimizer: Option<Optimizer>,
    /// Frame length in samples
    #[arg(long)]
    window: Option<usize>,
    /// Frame step in samples
    #[arg(long)]
    hop: Option<usize>,
    /// Rows when folding a frame into a square patch
    #[arg(long)]
    patch_rows: Option<usize>,
    /// Enrollment clips per speaker (K)
    #[arg(long)]
    shots: Option<usize>,
    /// Clip length in seconds for training, enrollment, and probes
    #[arg(long = "duration")]
    duration_s: Option<f64>,
    /// Fraction of speakers assigned to the training split
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Genuine trials per evaluation speaker
    #[arg(long)]
    probes_per_speaker: Option<usize>,
    /// Impostor trials per genuine trial
    #[arg(long)]
    impostor_ratio: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> vspk::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        macro_rules! overlay {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        overlay!(
            epochs,
            batch_size,
            learning_rate,
            lambda,
            seed,
            optimizer,
            window,
            hop,
            patch_rows,
            shots,
            duration_s,
            train_fraction,
            probes_per_speaker,
            impostor_ratio
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker WAV corpus with a manifest
    Synth {
        /// Directory for the WAV files and manifest.csv
        #[arg(long)]
        out: PathBuf,
        /// Number of synthetic speakers
        #[arg(long)]
        speakers: usize,
        /// Utterances per speaker
        #[arg(long)]
        utterances: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Split a manifest by speaker and build a verification trial list
    Prepare {
        /// Corpus manifest (CSV: speaker_id, wav_path, duration_s)
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for train.csv, eval.csv, and trials.txt
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the embedding network on a training manifest
    Train {
        /// Training manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for model.ckpt and training_log.jsonl
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build a speaker model from a few enrollment WAVs
    Enroll {
        /// Trained checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Identifier stored in the speaker model
        #[arg(long)]
        speaker: String,
        /// Output JSON path for the speaker model
        #[arg(long)]
        out: PathBuf,
        /// Enrollment WAV files
        #[arg(required = true, value_name = "WAV")]
        wavs: Vec<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a probe WAV against enrollment WAVs and accept or reject
    Verify {
        /// Trained checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe WAV to verify
        #[arg(long)]
        probe: PathBuf,
        /// Decision threshold; score >= threshold accepts
        #[arg(long)]
        threshold: f64,
        /// Enrollment WAV files for the claimed speaker
        #[arg(required = true, value_name = "WAV")]
        wavs: Vec<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Enroll every claimed speaker and score a trial list
    Eval {
        /// Trained checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Trial list (label speaker probe per line)
        #[arg(long)]
        trials: PathBuf,
        /// Directory for scores.tsv, det.csv, and summary.txt
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(command: Command) -> vspk::Result<u8> {
    match command {
        Command::Synth {
            out,
            speakers,
            utterances,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let report = cmd_synth(&out, speakers, utterances, cfg.seed)?;
            println!(
                "wrote {} utterances from {} speakers; manifest {}",
                report.utterances,
                report.speakers,
                report.manifest.display()
            );
            Ok(0)
        }
        Command::Prepare { manifest, out, cfg } => {
            let cfg = cfg.resolve()?;
            let report = cmd_prepare(&manifest, &out, &cfg)?;
            println!(
                "split {} train / {} eval speakers; {} trials written to {}",
                report.train_speakers,
                report.eval_speakers,
                report.trials,
                out.display()
            );
            Ok(0)
        }
        Command::Train { manifest, out, cfg } => {
            let cfg = cfg.resolve()?;
            let report = cmd_train(&manifest, &out, &cfg)?;
            match report.final_total {
                Some(total) => println!(
                    "trained {} epochs, final loss {total}; checkpoint {}",
                    report.epochs,
                    report.checkpoint.display()
                ),
                None => println!(
                    "trained {} epochs; checkpoint {}",
                    report.epochs,
                    report.checkpoint.display()
                ),
            }
            Ok(0)
        }
        Command::Enroll {
            checkpoint,
            speaker,
            out,
            wavs,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let model = cmd_enroll(&checkpoint, &speaker, &wavs, &out, &cfg)?;
            println!(
                "enrolled {} from {} clips; model {}",
                model.speaker_id,
                wavs.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Verify {
            checkpoint,
            probe,
            threshold,
            wavs,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let outcome = cmd_verify(&checkpoint, &wavs, &probe, threshold, &cfg)?;
            println!("score {}", outcome.score);
            if outcome.accept {
                println!("accept");
                Ok(0)
            } else {
                println!("reject");
                Ok(1)
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            trials,
            out,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let report = cmd_eval(&checkpoint, &manifest, &trials, &out, &cfg)?;
            println!(
                "EER {}% at threshold {} over {} genuine / {} impostor trials",
                report.eer * 100.0,
                report.threshold,
                report.genuine,
                report.impostor
            );
            println!("reports written to {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
