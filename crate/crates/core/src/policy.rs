//! The full policy: encoder and decoder configuration, parameter layout,
//! ablation switches, checkpoints, and batched decoding helpers.

use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, ActionSource, DecodeMode, DecoderConfig, NodeKeys, RolloutOutput};
use crate::encoder::{self, EncoderConfig};
use crate::env::{closed_length, validate_tour, Tour};
use crate::error::{Error, Result};
use crate::instances::PdpInstance;
use crate::numcore::checkpoint::CHECKPOINT_VERSION;
use crate::numcore::{load_checkpoint, save_checkpoint, CheckpointMeta, ParamStore, Scalar, Tape};
use crate::rng::{domain, stream};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    pub fn meta(&self, step: u64) -> CheckpointMeta {
        CheckpointMeta {
            version: CHECKPOINT_VERSION,
            d_h: self.encoder.d_h as u32,
            layers: self.encoder.layers as u32,
            heads: self.encoder.heads as u32,
            ffn_hidden: self.encoder.ffn_hidden as u32,
            gate_hidden: self.decoder.gate_hidden as u32,
            clip: self.decoder.clip as f32,
            cluster_attention: self.encoder.cluster_attention,
            dual_decoder: self.decoder.dual_decoder,
            step,
        }
    }

    pub fn from_meta(meta: &CheckpointMeta) -> Self {
        Self {
            encoder: EncoderConfig {
                d_h: meta.d_h as usize,
                layers: meta.layers as usize,
                heads: meta.heads as usize,
                ffn_hidden: meta.ffn_hidden as usize,
                cluster_attention: meta.cluster_attention,
            },
            decoder: DecoderConfig {
                clip: meta.clip as f64,
                dual_decoder: meta.dual_decoder,
                gate_hidden: meta.gate_hidden as usize,
            },
        }
    }
}

/// Model variants compared in the ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Cluster-aware encoder and dual decoder.
    #[default]
    Full,
    /// Global attention only in the encoder.
    NoEncoder,
    /// Single decoding pipeline without the gate.
    NoDecoder,
    /// Both components removed: a plain attention construction policy.
    Pomo,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoEncoder, Ablation::NoDecoder, Ablation::Pomo];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoEncoder => "no_encoder",
            Ablation::NoDecoder => "no_decoder",
            Ablation::Pomo => "pomo",
        }
    }

    pub fn apply(self, mut cfg: ModelConfig) -> ModelConfig {
        cfg.encoder.cluster_attention = matches!(self, Ablation::Full | Ablation::NoDecoder);
        cfg.decoder.dual_decoder = matches!(self, Ablation::Full | Ablation::NoEncoder);
        cfg
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Parameters plus the configuration that interprets them.
#[derive(Debug, Clone)]
pub struct Policy<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
}

fn template<T: Scalar>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    encoder::register_params(&mut store, &config.encoder, rng)?;
    decoder::register_params(&mut store, config.encoder.d_h, &config.decoder, rng)?;
    Ok(store)
}

impl<T: Scalar> Policy<T> {
    /// Fresh parameters drawn from the initialization stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = template(&config, &mut stream(seed, &[domain::INIT]))?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against the
    /// layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let expected = template::<T>(&config, &mut stream(0, &[domain::INIT]))?;
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, want), (got_name, got)) in expected.iter().zip(params.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name} {:?} does not match expected {name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Switches the ablation flags while keeping the weights.
    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        Self {
            config: ablation.apply(self.config),
            params: self.params.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Policy<U> {
        Policy {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Encodes equally sized instances and projects the node keys.
    pub fn encode_keys(&self, tape: &mut Tape<T>, insts: &[&PdpInstance]) -> Result<NodeKeys> {
        let h = encoder::encode_batch(tape, &self.params, &self.config.encoder, insts)?;
        decoder::project_nodes(tape, &self.params, h, insts.len())
    }

    /// Runs rows `starts` (grouped per instance in order) on a given tape.
    pub fn rollouts(
        &self,
        tape: &mut Tape<T>,
        keys: &NodeKeys,
        n: usize,
        starts: &[usize],
        source: ActionSource<'_>,
    ) -> Result<RolloutOutput> {
        decoder::rollout_batch(tape, &self.config.decoder, self.config.encoder.heads, keys, n, starts, source)
    }

    /// One rollout from pickup `start`.
    pub fn rollout(&self, inst: &PdpInstance, start: usize, mode: DecodeMode, rng: &mut ChaCha8Rng) -> Result<(Tour, f64)> {
        let mut tape = Tape::inference();
        let keys = self.encode_keys(&mut tape, &[inst])?;
        let mut rngs = [rng.clone()];
        let source = match mode {
            DecodeMode::Greedy => ActionSource::Greedy,
            DecodeMode::Sample => ActionSource::Sample(&mut rngs),
        };
        let out = self.rollouts(&mut tape, &keys, inst.n(), &[start], source)?;
        if mode == DecodeMode::Sample {
            *rng = rngs[0].clone();
        }
        let tour = finish_tour(inst, &out.orders[0])?;
        Ok((tour, out.log_probs[0]))
    }

    /// Greedy rollouts from every pickup of every instance. Returns the tours
    /// indexed `[instance][start - 1]`.
    pub fn greedy_all_starts(&self, insts: &[PdpInstance]) -> Result<Vec<Vec<Tour>>> {
        let Some(first) = insts.first() else { return Ok(Vec::new()) };
        let n = first.n();
        let refs: Vec<&PdpInstance> = insts.iter().collect();
        let mut tape = Tape::inference();
        let keys = self.encode_keys(&mut tape, &refs)?;
        let starts: Vec<usize> = (0..insts.len()).flat_map(|_| 1..=n).collect();
        let out = self.rollouts(&mut tape, &keys, n, &starts, ActionSource::Greedy)?;
        insts
            .iter()
            .enumerate()
            .map(|(i, inst)| out.orders[i * n..(i + 1) * n].iter().map(|o| finish_tour(inst, o)).collect())
            .collect()
    }

    /// Best greedy tour over all pickup starts, per instance (ties go to the
    /// lowest start).
    pub fn greedy_multistart(&self, insts: &[PdpInstance]) -> Result<Vec<Tour>> {
        Ok(self.greedy_all_starts(insts)?.into_iter().map(best_tour).collect())
    }

    /// Greedy rollout from pickup 1 only.
    pub fn greedy_single_start(&self, insts: &[PdpInstance]) -> Result<Vec<Tour>> {
        let Some(first) = insts.first() else { return Ok(Vec::new()) };
        let refs: Vec<&PdpInstance> = insts.iter().collect();
        let mut tape = Tape::inference();
        let keys = self.encode_keys(&mut tape, &refs)?;
        let starts = vec![1; insts.len()];
        let out = self.rollouts(&mut tape, &keys, first.n(), &starts, ActionSource::Greedy)?;
        insts.iter().zip(&out.orders).map(|(inst, o)| finish_tour(inst, o)).collect()
    }

    /// Sampled rollouts of one instance, one row per `(start, rng)` pair.
    pub fn sample(&self, inst: &PdpInstance, starts: &[usize], rngs: &mut [ChaCha8Rng]) -> Result<Vec<(Tour, f64)>> {
        let mut tape = Tape::inference();
        let keys = self.encode_keys(&mut tape, &[inst])?;
        let out = self.rollouts(&mut tape, &keys, inst.n(), starts, ActionSource::Sample(rngs))?;
        out.orders
            .iter()
            .zip(out.log_probs)
            .map(|(o, lp)| Ok((finish_tour(inst, o)?, lp)))
            .collect()
    }
}

impl Policy<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.config.meta(self.params.step_count()), &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, params) = load_checkpoint(path)?;
        Self::from_params(ModelConfig::from_meta(&meta), params)
    }

    /// Loads a checkpoint and insists on a specific architecture.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let policy = Self::load(path)?;
        let (a, b) = (policy.config.encoder, expected.encoder);
        if (a.d_h, a.layers, a.heads, a.ffn_hidden) != (b.d_h, b.layers, b.heads, b.ffn_hidden)
            || policy.config.decoder.gate_hidden != expected.decoder.gate_hidden
        {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {:?} does not match expected {:?}",
                policy.config, expected
            )));
        }
        Ok(policy)
    }
}

/// Validates a decoded order and attaches its length. Decoding only emits
/// feasible actions, so a failure here is a bug.
pub fn finish_tour(inst: &PdpInstance, order: &[usize]) -> Result<Tour> {
    validate_tour(inst, order).map_err(|v| Error::InvalidTour(v.to_string()))?;
    Ok(Tour::from_parts(order.to_vec(), closed_length(&inst.distance_matrix(), order)))
}

/// Shortest tour; ties keep the earliest.
pub fn best_tour(tours: Vec<Tour>) -> Tour {
    tours
        .into_iter()
        .reduce(|best, t| if t.length < best.length { t } else { best })
        .expect("at least one tour")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{gen_clustered, gen_uniform};
    use rand::SeedableRng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_h: 16,
                layers: 1,
                heads: 2,
                ffn_hidden: 32,
                cluster_attention: true,
            },
            decoder: DecoderConfig {
                gate_hidden: 16,
                ..DecoderConfig::default()
            },
        }
    }

    #[test]
    fn ablation_flags() {
        let base = ModelConfig::default();
        let pomo = Ablation::Pomo.apply(base);
        assert!(!pomo.encoder.cluster_attention && !pomo.decoder.dual_decoder);
        let ne = Ablation::NoEncoder.apply(base);
        assert!(!ne.encoder.cluster_attention && ne.decoder.dual_decoder);
        let nd = Ablation::NoDecoder.apply(base);
        assert!(nd.encoder.cluster_attention && !nd.decoder.dual_decoder);
        assert_eq!(Ablation::Full.apply(pomo), base);
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!("nope".parse::<Ablation>().is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let policy = Policy::<f32>::init(tiny(), 3).unwrap();
        policy.save(&path).unwrap();
        let loaded = Policy::load(&path).unwrap();
        assert_eq!(loaded.config(), policy.config());
        let inst = gen_clustered(4, 9).unwrap();
        let a = encoder::encode(&inst, policy.params(), &policy.config().encoder).unwrap();
        let b = encoder::encode(&inst, loaded.params(), &loaded.config().encoder).unwrap();
        assert_eq!(a, b);
        let mut other = tiny();
        other.encoder.d_h = 32;
        other.encoder.heads = 4;
        assert!(matches!(Policy::load_expecting(&path, &other), Err(Error::Checkpoint(_))));
        let (meta, params) = load_checkpoint(&path).unwrap();
        let mut wrong = ModelConfig::from_meta(&meta);
        wrong.encoder.layers = 2;
        assert!(matches!(Policy::from_params(wrong, params), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn size_agnostic_decoding() {
        let policy = Policy::<f32>::init(tiny(), 1).unwrap();
        for n in [1, 3, 7] {
            let insts: Vec<PdpInstance> = (0..3).map(|s| gen_uniform(n, s).unwrap()).collect();
            let all = policy.greedy_all_starts(&insts).unwrap();
            let best = policy.greedy_multistart(&insts).unwrap();
            for (tours, b) in all.iter().zip(&best) {
                assert_eq!(tours.len(), n);
                assert!(tours.iter().all(|t| t.length >= b.length));
            }
            assert_eq!(policy.greedy_single_start(&insts).unwrap()[0], all[0][0]);
        }
    }

    #[test]
    fn single_rollout_matches_sampling_helper() {
        let policy = Policy::<f64>::init(tiny(), 2).unwrap();
        let inst = gen_clustered(5, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (tour, lp) = policy.rollout(&inst, 2, DecodeMode::Sample, &mut rng.clone()).unwrap();
        let out = policy.sample(&inst, &[2], std::slice::from_mut(&mut rng)).unwrap();
        assert_eq!(out[0].0, tour);
        assert_eq!(out[0].1, lp);
        assert!(lp.exp() <= 1.0);
    }
}
