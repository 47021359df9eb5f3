use pdpnet::baselines::exact_dp;
use pdpnet::bench::{eval_greedy, TestSet};
use pdpnet::decoder::DecoderConfig;
use pdpnet::encoder::EncoderConfig;
use pdpnet::env::validate_tour;
use pdpnet::instances::{Distribution, PdpInstance};
use pdpnet::policy::{Ablation, ModelConfig, Policy};
use pdpnet::rng::stream;
use pdpnet::trainer::{train, TrainConfig};
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { d_h: 16, layers: 1, heads: 2, ffn_hidden: 32, cluster_attention: true },
        decoder: DecoderConfig { gate_hidden: 16, ..DecoderConfig::default() },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampled_tours_are_feasible_and_bounded_by_the_optimum(
        n in 1usize..=5,
        clustered in any::<bool>(),
        inst_seed in any::<u64>(),
        policy_seed in 0u64..1000,
        ablation in prop::sample::select(Ablation::ALL.to_vec()),
    ) {
        let dist = if clustered { Distribution::Clustered } else { Distribution::Uniform };
        let inst = PdpInstance::generate(n, dist, inst_seed).unwrap();
        let policy = Policy::<f32>::init(ablation.apply(tiny()), policy_seed).unwrap();
        let starts: Vec<usize> = (1..=n).collect();
        let mut rngs: Vec<_> = starts.iter().map(|&s| stream(policy_seed, &[s as u64])).collect();
        let optimum = exact_dp(&inst).unwrap().tour().length;
        for (tour, log_prob) in policy.sample(&inst, &starts, &mut rngs).unwrap() {
            prop_assert!(validate_tour(&inst, &tour.order).is_ok());
            prop_assert!(tour.length >= optimum - 1e-9);
            prop_assert!(log_prob <= 1e-9 && log_prob.is_finite());
        }
    }
}

#[test]
fn checkpoint_resumes_identical_policy() {
    let config = TrainConfig {
        epochs: 1,
        batches_per_epoch: 3,
        batch_size: 4,
        n: 4,
        validation_size: 0,
        encoder: tiny().encoder,
        decoder: tiny().decoder,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (policy, log) = train(&config, Some(dir.path())).unwrap();
    assert_eq!(log.batches.len(), 3);
    let loaded = Policy::<f32>::load_expecting(dir.path().join("final.ckpt"), &config.model()).unwrap();
    let set = TestSet::generate(6, Distribution::Clustered, 4, 3).unwrap();
    let a = eval_greedy(&policy, &set, "full", true).unwrap();
    let b = eval_greedy(&loaded, &set, "full", true).unwrap();
    assert_eq!(a.tours, b.tours);
    assert!(Policy::<f32>::load_expecting(dir.path().join("final.ckpt"), &ModelConfig::default()).is_err());
}
