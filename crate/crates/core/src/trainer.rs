//! POMO-style REINFORCE training.
//!
//! Every instance is decoded `N = n` times, once from each pickup. The mean
//! reward of those rollouts is the baseline, so advantages are centred per
//! instance. One Adam step is taken per batch of `B` instances.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoder::ActionSource;
use crate::env::{closed_length, Tour};
use crate::error::{Error, Result};
use crate::instances::{generate_set, Distribution, PdpInstance};
use crate::numcore::gradcheck::{central_difference, compare, GradCheckReport};
use crate::numcore::{AdamConfig, ParamStore, Scalar, Tape, Var};
use crate::policy::{finish_tour, Ablation, ModelConfig, Policy};
use crate::rng::{derive_seed, domain, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n: usize,
    pub distribution: Distribution,
    pub ablation: Ablation,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: final checkpoint only).
    pub checkpoint_every: usize,
    /// Instances in the fixed validation set scored after every epoch.
    pub validation_size: usize,
    pub encoder: crate::encoder::EncoderConfig,
    pub decoder: crate::decoder::DecoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            batches_per_epoch: 100,
            batch_size: 512,
            lr: 1e-4,
            n: 20,
            distribution: Distribution::Clustered,
            ablation: Ablation::Full,
            seed: 0,
            checkpoint_every: 0,
            validation_size: 100,
            encoder: Default::default(),
            decoder: Default::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs, batches_per_epoch and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.n == 0 {
            return Err(Error::InvalidSize("n must be at least 1".into()));
        }
        self.model().validate()
    }

    /// Architecture after applying the ablation switches.
    pub fn model(&self) -> ModelConfig {
        self.ablation.apply(ModelConfig {
            encoder: self.encoder,
            decoder: self.decoder,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Mean-reward baseline and centred advantages.
pub fn advantages(rewards: &[f64]) -> (f64, Vec<f64>) {
    let baseline = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
    (baseline, rewards.iter().map(|r| r - baseline).collect())
}

/// The `N` rollouts of one instance.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub tours: Vec<Tour>,
    /// `-length`, including the return to the depot.
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub baseline: f64,
    pub advantages: Vec<f64>,
}

impl RolloutBatch {
    pub fn new(tours: Vec<Tour>, log_probs: Vec<f64>) -> Self {
        let rewards: Vec<f64> = tours.iter().map(|t| -t.length).collect();
        let (baseline, advantages) = advantages(&rewards);
        Self {
            tours,
            rewards,
            log_probs,
            baseline,
            advantages,
        }
    }

    /// `-(1/N) sum_j A_j log pi(tau_j)`.
    pub fn loss(&self) -> f64 {
        let n = self.tours.len().max(1) as f64;
        -self.advantages.iter().zip(&self.log_probs).map(|(a, l)| a * l).sum::<f64>() / n
    }
}

/// Sampled rollouts from each pickup of `inst`, row `j` seeded by
/// `(seed, j)`.
pub fn pomo_rollouts<T: Scalar>(inst: &PdpInstance, policy: &Policy<T>, seed: u64) -> Result<RolloutBatch> {
    let n = inst.n();
    let starts: Vec<usize> = (1..=n).collect();
    let mut rngs: Vec<_> = (0..n).map(|j| stream(seed, &[domain::TRAIN_ROLLOUT, j as u64])).collect();
    let sampled = policy.sample(inst, &starts, &mut rngs)?;
    let (tours, log_probs) = sampled.into_iter().unzip();
    Ok(RolloutBatch::new(tours, log_probs))
}

/// Scalar loss node `sum_r w_r * sum_t log pi_t(r)` over recorded step
/// columns. With `w_r = -A_r / (N B)` this is the batch loss.
pub fn weighted_log_likelihood<T: Scalar>(tape: &mut Tape<T>, step_log_probs: &[Var], row_weights: &[T]) -> Result<Var> {
    let column = tape.concat_rows(step_log_probs)?;
    let weights: Vec<T> = step_log_probs.iter().flat_map(|_| row_weights.iter().copied()).collect();
    tape.weighted_sum(column, &weights)
}

/// Loss node of one instance's rollouts (advantages are constants).
pub fn instance_loss<T: Scalar>(tape: &mut Tape<T>, step_log_probs: &[Var], batch: &RolloutBatch) -> Result<Var> {
    let n = batch.advantages.len() as f64;
    let w: Vec<T> = batch.advantages.iter().map(|a| T::from_f64(-a / n)).collect();
    weighted_log_likelihood(tape, step_log_probs, &w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub epoch: usize,
    pub batch: usize,
    pub mean_reward: f64,
    pub mean_len: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean length of the sampled training rollouts.
    pub mean_len: f64,
    /// Mean multi-start greedy length on the validation set.
    pub val_greedy: f64,
    pub wall_ms: f64,
}

pub const BATCH_HEADER: &str = "epoch,batch,mean_reward,mean_len,loss,wall_ms";
pub const EPOCH_HEADER: &str = "epoch,mean_len,val_greedy,wall_ms";

impl BatchMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.batch, self.mean_reward, self.mean_len, self.loss, self.wall_ms
        )
    }
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.3}", self.epoch, self.mean_len, self.val_greedy, self.wall_ms)
    }
}

/// Result of one optimisation step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub mean_len: f64,
    pub loss: f64,
    pub batches: Vec<RolloutBatch>,
}

/// Everything a caller needs to run, inspect and resume training.
pub struct Trainer {
    config: TrainConfig,
    policy: Policy<f32>,
    adam: AdamConfig,
    validation: Vec<PdpInstance>,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let policy = Policy::init(config.model(), config.seed)?;
        Self::with_policy(config, policy)
    }

    /// Continues from existing weights (for example a loaded checkpoint).
    pub fn with_policy(config: TrainConfig, policy: Policy<f32>) -> Result<Self> {
        config.validate()?;
        let validation = if config.validation_size > 0 {
            generate_set(config.n, config.distribution, config.validation_size, config.seed, domain::VALIDATION)?
        } else {
            Vec::new()
        };
        Ok(Self {
            adam: AdamConfig::with_lr(config.lr),
            config,
            policy,
            validation,
            out_dir: None,
        })
    }

    /// Directory receiving `metrics.csv`, `epochs.csv` and checkpoints.
    pub fn output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &Policy<f32> {
        &self.policy
    }

    pub fn into_policy(self) -> Policy<f32> {
        self.policy
    }

    /// Training instances of one batch.
    pub fn batch_instances(&self, epoch: usize, batch: usize) -> Result<Vec<PdpInstance>> {
        let c = &self.config;
        (0..c.batch_size)
            .map(|b| {
                let seed = derive_seed(c.seed, &[domain::TRAIN_INSTANCE, epoch as u64, batch as u64, b as u64]);
                PdpInstance::generate(c.n, c.distribution, seed)
            })
            .collect()
    }

    /// Samples POMO rollouts for `insts`, backpropagates the batch loss and
    /// applies one Adam step.
    pub fn step(&mut self, insts: &[PdpInstance], epoch: usize, batch: usize) -> Result<StepOutcome> {
        let n = self.config.n;
        let b = insts.len();
        let refs: Vec<&PdpInstance> = insts.iter().collect();
        let starts: Vec<usize> = (0..b).flat_map(|_| 1..=n).collect();
        let mut rngs: Vec<_> = (0..starts.len())
            .map(|r| stream(self.config.seed, &[domain::TRAIN_ROLLOUT, epoch as u64, batch as u64, r as u64]))
            .collect();
        let mut tape = Tape::new();
        let keys = self.policy.encode_keys(&mut tape, &refs)?;
        let out = self.policy.rollouts(&mut tape, &keys, n, &starts, ActionSource::Sample(&mut rngs))?;

        let mut batches = Vec::with_capacity(b);
        let mut weights = Vec::with_capacity(starts.len());
        for (i, inst) in insts.iter().enumerate() {
            let dist = inst.distance_matrix();
            let rows = i * n..(i + 1) * n;
            let tours = out.orders[rows.clone()]
                .iter()
                .map(|o| Ok(Tour { length: closed_length(&dist, o), order: o.clone() }))
                .collect::<Result<Vec<_>>>()?;
            let rb = RolloutBatch::new(tours, out.log_probs[rows].to_vec());
            weights.extend(rb.advantages.iter().map(|a| (-a / (n * b) as f64) as f32));
            batches.push(rb);
        }
        let loss_value = batches.iter().map(RolloutBatch::loss).sum::<f64>() / b as f64;
        let mean_len = batches.iter().flat_map(|rb| rb.tours.iter().map(|t| t.length)).sum::<f64>() / starts.len() as f64;
        if !loss_value.is_finite() {
            let dump = self.dump_diagnostics(insts, epoch, batch)?;
            return Err(Error::NonFiniteLoss { epoch, batch, dump });
        }
        let root = weighted_log_likelihood(&mut tape, &out.step_log_probs, &weights)?;
        let params = self.policy.params_mut();
        params.zero_grad();
        tape.backward(root, 1.0, params)?;
        drop(tape);
        params.adam_step(&self.adam)?;
        Ok(StepOutcome {
            mean_len,
            loss: loss_value,
            batches,
        })
    }

    fn dump_diagnostics(&self, insts: &[PdpInstance], epoch: usize, batch: usize) -> Result<PathBuf> {
        let dir = self.out_dir.clone().unwrap_or_else(std::env::temp_dir).join(format!("nonfinite_e{epoch}_b{batch}"));
        std::fs::create_dir_all(&dir)?;
        self.policy.save(dir.join("params.ckpt"))?;
        crate::instances::write_dataset(dir.join("instances.json"), insts)?;
        Ok(dir)
    }

    /// Mean multi-start greedy length on the validation set.
    pub fn validate_greedy(&self) -> Result<f64> {
        if self.validation.is_empty() {
            return Ok(f64::NAN);
        }
        let tours = self.policy.greedy_multistart(&self.validation)?;
        Ok(tours.iter().map(|t| t.length).sum::<f64>() / tours.len() as f64)
    }

    /// Runs every epoch, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let mut batch_csv = None;
        let mut epoch_csv = None;
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{BATCH_HEADER}")?;
            batch_csv = Some(f);
            let mut f = std::fs::File::create(dir.join("epochs.csv"))?;
            writeln!(f, "{EPOCH_HEADER}")?;
            epoch_csv = Some(f);
            std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        }
        for epoch in 1..=self.config.epochs {
            let started = Instant::now();
            let mut len_sum = 0.0;
            for batch in 0..self.config.batches_per_epoch {
                let t0 = Instant::now();
                let insts = self.batch_instances(epoch, batch)?;
                let outcome = self.step(&insts, epoch, batch)?;
                let m = BatchMetrics {
                    epoch,
                    batch,
                    mean_reward: -outcome.mean_len,
                    mean_len: outcome.mean_len,
                    loss: outcome.loss,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                };
                len_sum += m.mean_len;
                if let Some(f) = &mut batch_csv {
                    writeln!(f, "{}", m.csv_row())?;
                }
                log.batches.push(m);
            }
            let em = EpochMetrics {
                epoch,
                mean_len: len_sum / self.config.batches_per_epoch as f64,
                val_greedy: self.validate_greedy()?,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            log::info!(
                "epoch {epoch}: train len {:.4}, validation greedy {:.4} ({:.1} s)",
                em.mean_len,
                em.val_greedy,
                em.wall_ms / 1e3
            );
            if let Some(f) = &mut epoch_csv {
                writeln!(f, "{}", em.csv_row())?;
            }
            on_epoch(&em);
            log.epochs.push(em);
            if let Some(dir) = &self.out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && epoch % every == 0 {
                    self.policy.save(dir.join(format!("epoch_{epoch:04}.ckpt")))?;
                }
            }
        }
        if let Some(dir) = &self.out_dir {
            self.policy.save(dir.join("final.ckpt"))?;
        }
        Ok(log)
    }
}

/// Metrics collected by [`Trainer::run`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub batches: Vec<BatchMetrics>,
    pub epochs: Vec<EpochMetrics>,
}

/// Convenience wrapper: builds a trainer, runs it and returns the policy.
pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<(Policy<f32>, TrainLog)> {
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(dir) = out_dir {
        trainer = trainer.output_dir(dir);
    }
    let log = trainer.run(|_| {})?;
    Ok((trainer.into_policy(), log))
}

/// Replays fixed rollouts of `inst` and returns the instance-loss node.
fn replay_loss<T: Scalar>(
    tape: &mut Tape<T>,
    policy: &Policy<T>,
    inst: &PdpInstance,
    batch: &RolloutBatch,
    orders: &[Vec<usize>],
) -> Result<Var> {
    let keys = policy.encode_keys(tape, &[inst])?;
    let starts: Vec<usize> = orders.iter().map(|o| o[0]).collect();
    let out = policy.rollouts(tape, &keys, inst.n(), &starts, ActionSource::Replay(orders))?;
    if tape.is_recording() {
        instance_loss(tape, &out.step_log_probs, batch)
    } else {
        let n = batch.advantages.len() as f64;
        let value: f64 = batch.advantages.iter().zip(&out.log_probs).map(|(a, l)| -a * l / n).sum();
        Ok(tape.constant(crate::numcore::Tensor2::filled(1, 1, T::from_f64(value))))
    }
}

/// Analytic gradient of the instance loss against central differences, in
/// double precision. Rollouts are sampled once and then replayed so that
/// the perturbed losses share the same tours.
pub fn policy_gradcheck(config: ModelConfig, n: usize, seed: u64, h: f64, floor: f64) -> Result<GradCheckReport> {
    let mut policy = Policy::<f64>::init(config, seed)?;
    let inst = PdpInstance::generate(n, Distribution::Clustered, derive_seed(seed, &[domain::VALIDATION]))?;
    let batch = pomo_rollouts(&inst, &policy, seed)?;
    let orders: Vec<Vec<usize>> = batch.tours.iter().map(|t| t.order.clone()).collect();
    for o in &orders {
        finish_tour(&inst, o)?;
    }
    let mut tape = Tape::new();
    let root = replay_loss(&mut tape, &policy, &inst, &batch, &orders)?;
    let mut grads = ParamStore::clone(policy.params());
    grads.zero_grad();
    tape.backward(root, 1.0, &mut grads)?;
    drop(tape);
    *policy.params_mut() = grads;
    let numeric = central_difference(
        policy.params(),
        |p| {
            let probe = Policy::from_params(config, p.clone()).expect("same layout");
            let mut t = Tape::inference();
            let r = replay_loss(&mut t, &probe, &inst, &batch, &orders).expect("replay succeeds");
            t.value(r).get(0, 0)
        },
        h,
    );
    Ok(compare(policy.params(), &numeric, floor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batches_per_epoch: 3,
            batch_size: 4,
            lr: 1e-3,
            n: 3,
            validation_size: 5,
            seed: 11,
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
            ..TrainConfig::default()
        }
    }

    #[test]
    fn advantage_arithmetic() {
        let (b, a) = advantages(&[-3.0, -5.0]);
        assert_eq!(b, -4.0);
        assert_eq!(a, vec![1.0, -1.0]);
        let (_, a) = advantages(&[-2.5]);
        assert_eq!(a, vec![0.0]);
    }

    #[test]
    fn pomo_rollouts_use_distinct_starts() {
        let policy = Policy::<f32>::init(tiny_config().model(), 0).unwrap();
        let inst = PdpInstance::generate(4, Distribution::Clustered, 3).unwrap();
        let rb = pomo_rollouts(&inst, &policy, 5).unwrap();
        let starts: Vec<usize> = rb.tours.iter().map(|t| t.order[0]).collect();
        assert_eq!(starts, vec![1, 2, 3, 4]);
        assert!(rb.advantages.iter().sum::<f64>().abs() < 1e-9);
        let single = PdpInstance::generate(1, Distribution::Uniform, 3).unwrap();
        let rb = pomo_rollouts(&single, &policy, 5).unwrap();
        assert_eq!(rb.advantages, vec![0.0]);
        assert_eq!(rb.loss(), 0.0);
    }

    #[test]
    fn zero_advantage_leaves_parameters_unchanged() {
        let mut policy = Policy::<f32>::init(tiny_config().model(), 1).unwrap();
        let before = policy.params().clone();
        let inst = PdpInstance::generate(3, Distribution::Clustered, 0).unwrap();
        let mut tape = Tape::new();
        let keys = policy.encode_keys(&mut tape, &[&inst]).unwrap();
        let out = policy.rollouts(&mut tape, &keys, 3, &[1, 2, 3], ActionSource::Greedy).unwrap();
        let root = weighted_log_likelihood(&mut tape, &out.step_log_probs, &[0.0; 3]).unwrap();
        let params = policy.params_mut();
        params.zero_grad();
        tape.backward(root, 1.0, params).unwrap();
        drop(tape);
        params.adam_step(&AdamConfig::default()).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(policy.params().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn loss_sign() {
        let tours = vec![
            Tour { order: vec![1, 2], length: 1.0 },
            Tour { order: vec![1, 2], length: 3.0 },
        ];
        let base = RolloutBatch::new(tours.clone(), vec![-1.0, -1.0]);
        let better = RolloutBatch::new(tours, vec![-0.5, -1.0]);
        assert!(better.loss() < base.loss());
    }

    #[test]
    fn training_is_reproducible_and_writes_logs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let (p1, log1) = train(&cfg, Some(dir.path())).unwrap();
        let (p2, log2) = train(&cfg, None).unwrap();
        let strip = |l: &TrainLog| l.batches.iter().map(|b| (b.epoch, b.batch, b.mean_len, b.loss)).collect::<Vec<_>>();
        assert_eq!(strip(&log1), strip(&log2));
        assert_eq!(log1.epochs.len(), 2);
        for ((_, a), (_, b)) in p1.params().iter().zip(p2.params().iter()) {
            assert_eq!(a, b);
        }
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with(BATCH_HEADER));
        assert_eq!(metrics.lines().count(), 1 + 6);
        let loaded = Policy::load(dir.path().join("final.ckpt")).unwrap();
        assert_eq!(loaded.params().step_count(), 6);
    }

    #[test]
    fn pomo_ablation_wiring() {
        let cfg = TrainConfig {
            ablation: Ablation::Pomo,
            ..tiny_config()
        };
        let m = cfg.model();
        assert!(!m.encoder.cluster_attention && !m.decoder.dual_decoder);
        assert!(Trainer::new(cfg).is_ok());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = tiny_config();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        assert!(TrainConfig::from_json(r#"{"lr": -1.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let partial = TrainConfig::from_json(r#"{"n": 5, "encoder": {"d_h": 64}}"#).unwrap();
        assert_eq!(partial.encoder.layers, 6);
    }

    #[test]
    fn small_policy_gradient_check() {
        let cfg = tiny_config().model();
        let report = policy_gradcheck(cfg, 2, 3, 1e-4, 1e-6).unwrap();
        assert!(report.max_relative_error < 1e-3, "{report:?}");
    }
}
