//! Trains briefly at n = 5 and evaluates the same weights on larger
//! instances without retraining.
use pdpnet::bench::{eval_greedy, TestSet};
use pdpnet::decoder::DecoderConfig;
use pdpnet::encoder::EncoderConfig;
use pdpnet::instances::Distribution;
use pdpnet::trainer::{train, TrainConfig};

fn main() -> pdpnet::Result<()> {
    let config = TrainConfig {
        epochs: 2,
        batches_per_epoch: 10,
        batch_size: 16,
        n: 5,
        validation_size: 10,
        encoder: EncoderConfig { d_h: 32, layers: 2, heads: 4, ffn_hidden: 64, cluster_attention: true },
        decoder: DecoderConfig { gate_hidden: 32, ..DecoderConfig::default() },
        ..TrainConfig::default()
    };
    let (policy, _) = train(&config, None)?;
    for n in [5, 10, 20] {
        let set = TestSet::generate(n, Distribution::Clustered, 10, 1234)?;
        let report = eval_greedy(&policy, &set, "full", true)?;
        println!("n = {n:>2}: mean greedy objective {:.4}, {:.4} s per instance", report.mean_obj(), report.mean_time_s());
    }
    Ok(())
}
