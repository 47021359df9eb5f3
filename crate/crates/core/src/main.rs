use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use pdpnet::bench::{self, Decode, MatrixSpec, ResultRow, TestSet, DEFAULT_TEST_SEED};
use pdpnet::decoder::DecoderConfig;
use pdpnet::encoder::EncoderConfig;
use pdpnet::instances::Distribution;
use pdpnet::policy::{Ablation, ModelConfig, Policy};
use pdpnet::trainer::{policy_gradcheck, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "pdpnet", version, about = "Train and evaluate attention policies for the pickup and delivery problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a frozen test set.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "clustered")]
        dist: Distribution,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = DEFAULT_TEST_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a test set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        decode: DecodeArg,
        #[arg(long, default_value_t = 1280)]
        samples: usize,
        /// Greedy from pickup 1 only.
        #[arg(long)]
        single_start: bool,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long, default_value_t = DEFAULT_TEST_SEED)]
        seed: u64,
        #[arg(long)]
        method: Option<String>,
        /// Exact objectives used for the gap column.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a test set exactly.
    Oracle {
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check policy-loss gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-6)]
        floor: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Merge result files into one table.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
        /// Fill missing gaps against the best objective per instance.
        #[arg(long)]
        best_known: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an evaluation grid described by a JSON file.
    Matrix {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Gen { n, dist, count, seed, out } => {
            let set = TestSet::generate(n, dist, count, seed)?;
            set.write(&out)?;
            println!("wrote {} instances (n={n}, {dist}) to {}", set.len(), out.display());
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::read(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut trainer = Trainer::new(cfg)?.output_dir(&out);
            trainer.run(|e| {
                println!("epoch {:>4}  train {:.4}  val {:.4}  {:.1} s", e.epoch, e.mean_len, e.val_greedy, e.wall_ms / 1e3)
            })?;
            println!("checkpoints in {}", out.display());
        }
        Command::Eval {
            ckpt,
            testset,
            decode,
            samples,
            single_start,
            ablation,
            seed,
            method,
            reference,
            out,
        } => {
            let mut policy = Policy::<f32>::load(&ckpt)?;
            if let Some(a) = ablation {
                policy = policy.with_ablation(a);
            }
            let set = TestSet::read(&testset)?;
            let decode = match (decode, single_start) {
                (DecodeArg::Greedy, false) => Decode::Greedy,
                (DecodeArg::Greedy, true) => Decode::GreedySingle,
                (DecodeArg::Sample, _) => Decode::Sample(samples),
            };
            let method = method.unwrap_or_else(|| ablation.unwrap_or(Ablation::Full).to_string());
            let mut report = bench::evaluate(&policy, &set, &method, decode, seed)?;
            if let Some(path) = reference {
                let refs: Vec<f64> = bench::read_rows(&path)?.iter().map(|r| r.obj).collect();
                report.set_reference(&refs)?;
            }
            bench::write_rows(&out, &report.rows)?;
            print_summary(&report.rows);
        }
        Command::Oracle { testset, out } => {
            let set = TestSet::read(&testset)?;
            if !bench::oracle_available(set.n) {
                bail!("exact oracle supports at most {} customers", pdpnet::baselines::DP_DEFAULT_CAP);
            }
            let report = bench::eval_oracle(&set)?;
            bench::write_rows(&out, &report.rows)?;
            print_summary(&report.rows);
        }
        Command::Gradcheck {
            seeds,
            n,
            step,
            floor,
            tolerance,
        } => {
            let config = gradcheck_model();
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let r = policy_gradcheck(config, n, seed, step, floor)?;
                println!(
                    "seed {seed}: {} entries, max rel err {:.3e} at {}[{}]",
                    r.entries, r.max_relative_error, r.worst_param, r.worst_index
                );
                worst = worst.max(r.max_relative_error);
            }
            println!("worst {worst:.3e} (tolerance {tolerance:.0e})");
            if worst > tolerance {
                bail!("gradient check failed");
            }
        }
        Command::Report {
            inputs,
            format,
            best_known,
            out,
        } => {
            let mut rows: Vec<ResultRow> = Vec::new();
            for path in &inputs {
                rows.extend(bench::read_rows(path).with_context(|| format!("reading {}", path.display()))?);
            }
            if best_known {
                bench::fill_best_known_gaps(&mut rows)?;
            }
            let text = match format {
                Format::Csv => bench::rows_to_csv(&rows)?,
                Format::Md => bench::markdown_table(&rows),
            };
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
        }
        Command::Matrix { spec, out } => {
            let report = bench::run_matrix(&MatrixSpec::read(&spec)?)?;
            std::fs::create_dir_all(&out)?;
            bench::write_rows(out.join("results.csv"), &report.rows)?;
            let md = report.markdown();
            std::fs::write(out.join("results.md"), &md)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn gradcheck_model() -> ModelConfig {
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

fn print_summary(rows: &[ResultRow]) {
    for s in bench::summarize(rows) {
        let gap = s.gap_pct.map_or_else(|| "-".into(), |g| format!("{g:.2}%"));
        println!(
            "{} n={} {} {}: obj {:.4} gap {} time {:.4} s over {} instances",
            s.method, s.n, s.dist, s.decode, s.obj, gap, s.time_s, s.instances
        );
    }
}
