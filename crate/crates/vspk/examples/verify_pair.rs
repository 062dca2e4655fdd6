//! Verification decisions on single probes: enroll a speaker from two
//! clips, then score a genuine probe and an impostor probe against the
//! model.
//!
//! Run with `cargo run --release --example verify_pair`.

use vspk::commands::{cmd_eval, cmd_prepare, cmd_synth, cmd_train, cmd_verify};
use vspk::config::RunConfig;
use vspk::fewshot::DatasetManifest;

fn main() -> vspk::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");

    let cfg = RunConfig {
        epochs: 8,
        batch_size: 8,
        seed: 29,
        window: 64,
        hop: 64,
        patch_rows: 8,
        duration_s: 0.064,
        shots: 3,
        ..RunConfig::default()
    };
    cmd_synth(&corpus, 8, 6, cfg.seed)?;
    cmd_prepare(&corpus.join("manifest.csv"), &run, &cfg)?;
    cmd_train(&run.join("train.csv"), &run, &cfg)?;

    // Two held-out speakers the model never trained on.
    let eval_m = DatasetManifest::read(&run.join("eval.csv"))?;
    let speakers = eval_m.speakers();
    let claimed = eval_m.entries_for(&speakers[0]);
    let impostor = eval_m.entries_for(&speakers[1]);

    let enrollment: Vec<_> = claimed.iter().take(2).map(|e| e.wav_path.clone()).collect();
    let checkpoint = run.join("model.ckpt");

    // Calibrate the decision threshold on the prepared trial list: the
    // equal-error-rate operating point is where false accepts and false
    // rejects balance.
    let calibration = cmd_eval(
        &checkpoint,
        &run.join("eval.csv"),
        &run.join("trials.txt"),
        &run,
        &cfg,
    )?;
    let threshold = calibration.threshold;
    println!(
        "calibrated threshold {threshold:.4} at EER {:.2}%",
        calibration.eer * 100.0
    );

    for (who, probe) in [
        ("genuine", &claimed.last().unwrap().wav_path),
        ("impostor", &impostor[0].wav_path),
    ] {
        let outcome = cmd_verify(&checkpoint, &enrollment, probe, threshold, &cfg)?;
        println!(
            "{who:8} probe {}: score {:+.4} -> {}",
            probe.file_name().unwrap().to_string_lossy(),
            outcome.score,
            if outcome.accept { "accept" } else { "reject" }
        );
    }
    println!("(scores live in [-2, 0], higher is closer)");
    Ok(())
}
