//! Shows how each ablation changes the first-step action distribution of a
//! shared set of weights.
use pdpnet::decoder::decode_step;
use pdpnet::encoder::encode;
use pdpnet::env::RouteState;
use pdpnet::instances::{Distribution, PdpInstance};
use pdpnet::policy::{Ablation, ModelConfig, Policy};

fn main() -> pdpnet::Result<()> {
    let inst = PdpInstance::generate(4, Distribution::Clustered, 3)?;
    let full = Policy::<f64>::init(ModelConfig::default(), 11)?;
    let mut state = RouteState::new(inst.n());
    state.push(1)?;
    for ablation in Ablation::ALL {
        let p = full.with_ablation(ablation);
        let cfg = p.config();
        let h = encode(&inst, p.params(), &cfg.encoder)?;
        let dist = decode_step(&state, &h, p.params(), &cfg.decoder, cfg.encoder.heads)?;
        let pi: Vec<String> = dist.pi.iter().map(|x| format!("{x:.3}")).collect();
        let stay = dist.p_stay.map_or_else(|| "-".to_string(), |s| format!("{s:.3}"));
        println!("{ablation:<11} p_stay {stay:<5} pi [{}]", pi.join(", "));
    }
    Ok(())
}
