//! The whole pipeline at desk scale: synthesize a corpus, split it by
//! speaker, train, enroll each held-out speaker from a few clips, score a
//! trial list, and read off the equal error rate.
//!
//! Run with `cargo run --release --example evaluate_eer`.

use vspk::commands::{cmd_eval, cmd_prepare, cmd_synth, cmd_train};
use vspk::config::RunConfig;

fn main() -> vspk::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");

    // Small clips and volumes keep this to seconds; the full-size settings
    // in RunConfig::default() follow the same path.
    let cfg = RunConfig {
        epochs: 6,
        batch_size: 8,
        seed: 17,
        window: 64,
        hop: 64,
        patch_rows: 8,
        duration_s: 0.064,
        shots: 3,
        probes_per_speaker: 6,
        impostor_ratio: 1.0,
        ..RunConfig::default()
    };

    let synth = cmd_synth(&corpus, 8, 6, cfg.seed)?;
    println!(
        "synthesized {} utterances from {} speakers",
        synth.utterances, synth.speakers
    );

    let prepare = cmd_prepare(&corpus.join("manifest.csv"), &run, &cfg)?;
    println!(
        "split {} train / {} eval speakers, {} trials",
        prepare.train_speakers, prepare.eval_speakers, prepare.trials
    );

    let trained = cmd_train(&run.join("train.csv"), &run, &cfg)?;
    println!(
        "trained {} epochs, final loss {:.5}",
        trained.epochs,
        trained.final_total.unwrap()
    );

    let report = cmd_eval(
        &run.join("model.ckpt"),
        &run.join("eval.csv"),
        &run.join("trials.txt"),
        &run,
        &cfg,
    )?;
    println!(
        "EER {:.2}% at threshold {:.4} ({} genuine / {} impostor trials)",
        report.eer * 100.0,
        report.threshold,
        report.genuine,
        report.impostor
    );
    println!(
        "score lines:\n{}",
        std::fs::read_to_string(&report.scores)
            .expect("scores file")
            .lines()
            .take(4)
            .collect::<Vec<_>>()
            .join("\n")
    );
    Ok(())
}
