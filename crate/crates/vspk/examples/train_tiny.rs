//! Training in miniature: a four-speaker synthetic corpus, short clips,
//! narrow volumes, and a few epochs, with the per-epoch loss breakdown and
//! its exact recombination identity.
//!
//! Run with `cargo run --release --example train_tiny`.

use vspk::audio::Framing;
use vspk::network::NetConfig;
use vspk::synth::generate_corpus;
use vspk::trainer::{train, TrainConfig};

fn main() -> vspk::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = generate_corpus(dir.path(), 4, 4, 5)?;

    // 64-sample frames folded 8x8, one per hop, from 0.064 s clips: a
    // volume of [16, 8, 8, 1] instead of the full-size [298, 20, 20, 1].
    let framing = Framing {
        window: 64,
        hop: 64,
        patch_rows: 8,
    };
    let input = framing.volume_shape((0.064 * 16_000.0) as usize)?;
    let net_config = NetConfig::reduced(input, [4, 6, 8], 16);

    let config = TrainConfig {
        epochs: 4,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let output = train(&manifest, &framing, 0.064, net_config, &config)?;

    println!("epoch   l_ce      l_c       l_bs      total     accuracy");
    for r in &output.history {
        println!(
            "{:5}   {:.5}   {:.5}   {:.5}   {:.5}   {:.3}",
            r.epoch, r.l_ce, r.l_c, r.l_bs, r.total, r.train_accuracy
        );
        // The logged total is exactly the weighted sum, bit for bit.
        let recombined = (r.l_ce + config.lambda * r.l_c) + r.l_bs;
        assert_eq!(r.total.to_bits(), recombined.to_bits());
    }
    println!(
        "loss went {:.5} -> {:.5} over {} epochs",
        output.history.first().unwrap().total,
        output.history.last().unwrap().total,
        config.epochs
    );
    Ok(())
}
