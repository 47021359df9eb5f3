//! Desk-scale training run. Pass a JSON config to override the built-in one
//! and an output directory for checkpoints and metrics.
use pdpnet::decoder::DecoderConfig;
use pdpnet::encoder::EncoderConfig;
use pdpnet::trainer::{TrainConfig, Trainer};

fn main() -> pdpnet::Result<()> {
    let config = match std::env::args().nth(1) {
        Some(path) => TrainConfig::read(path)?,
        None => TrainConfig {
            epochs: 30,
            batches_per_epoch: 200,
            batch_size: 64,
            n: 5,
            seed: 1,
            encoder: EncoderConfig { d_h: 64, layers: 3, heads: 8, ffn_hidden: 256, cluster_attention: true },
            decoder: DecoderConfig { gate_hidden: 64, ..DecoderConfig::default() },
            ..TrainConfig::default()
        },
    };
    let out = std::env::args().nth(2).unwrap_or_else(|| "desk_run".into());
    let mut t = Trainer::new(config)?.output_dir(out);
    t.run(|e| println!("epoch {} train {:.4} val {:.4} {:.0} s", e.epoch, e.mean_len, e.val_greedy, e.wall_ms / 1e3))?;
    Ok(())
}
