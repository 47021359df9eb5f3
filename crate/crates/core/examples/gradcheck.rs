//! Compares the analytic policy-gradient loss gradient with central
//! differences on a small model.
use pdpnet::decoder::DecoderConfig;
use pdpnet::encoder::EncoderConfig;
use pdpnet::policy::ModelConfig;
use pdpnet::trainer::policy_gradcheck;

fn main() -> pdpnet::Result<()> {
    let config = ModelConfig {
        encoder: EncoderConfig { d_h: 16, layers: 1, heads: 2, ffn_hidden: 32, cluster_attention: true },
        decoder: DecoderConfig { gate_hidden: 16, ..DecoderConfig::default() },
    };
    for seed in 0..3 {
        let r = policy_gradcheck(config, 2, seed, 1e-6, 1e-6)?;
        println!(
            "seed {seed}: {} entries, max relative error {:.2e} ({} [{}]: analytic {:.3e} numeric {:.3e})",
            r.entries, r.max_relative_error, r.worst_param, r.worst_index, r.analytic, r.numeric
        );
    }
    Ok(())
}
