use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use rmldp::harness::{self, Baseline, ExperimentConfig};
use rmldp::meta::{self, Ablation};
use rmldp::relation;
use rmldp::synth;
use rmldp::tensor::{load_checkpoint, save_checkpoint, Dtype};
use rmldp::{Error, Result};

#[derive(Parser)]
#[command(name = "rmldp", about = "Relation-aware meta-learning for demand prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// flat key=value config file with dotted keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// world seed override
    #[arg(long)]
    seed: Option<u64>,
    /// ablation mode: full|no_d|no_g|szn|local
    #[arg(long)]
    ablation: Option<String>,
    /// baseline selection: stat|finetune|maml (comma-separated)
    #[arg(long)]
    baseline: Option<String>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.parse_file(&fs::read_to_string(path)?)?;
        }
        if let Some(seed) = self.seed {
            cfg.generator.seed = seed;
        }
        if let Some(ab) = &self.ablation {
            cfg.meta.ablation = Ablation::parse(ab)?;
            cfg.ablations = vec![cfg.meta.ablation];
        }
        if let Some(b) = &self.baseline {
            cfg.baselines =
                b.split(',').filter(|s| !s.is_empty()).map(Baseline::parse).collect::<Result<_>>()?;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write demand + orders files
    Gen(Common),
    /// Build the co-occurrence graph and node embeddings
    Graph(Common),
    /// Meta-train and write a checkpoint
    Train(Common),
    /// Adapt a trained checkpoint to the target segments and predict
    Adapt {
        #[command(flatten)]
        common: Common,
        /// checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run baselines, ablations, and metrics end to end
    Eval(Common),
    /// Sequence-length study
    Sweep {
        #[command(flatten)]
        common: Common,
        /// window lengths, comma-separated (default 15,30)
        #[arg(long, default_value = "15,30")]
        lens: String,
    },
    /// Merge per-seed run directories into one summary
    Report {
        /// output directory for the merged summary
        #[arg(long)]
        out: PathBuf,
        /// run directories holding methods.csv files
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(common) => {
            let cfg = common.config()?;
            let world = synth::generate_world(&cfg.generator)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let mut dw = BufWriter::new(fs::File::create(cfg.out_dir.join("demand.tsv"))?);
            synth::write_world(&mut dw, &world)?;
            let mut ow = BufWriter::new(fs::File::create(cfg.out_dir.join("orders.tsv"))?);
            relation::write_orders(&mut ow, &world.orders)?;
            println!(
                "wrote {} segments over {} days to {}",
                world.segments.len(),
                world.days,
                cfg.out_dir.display()
            );
        }
        Command::Graph(common) => {
            let cfg = common.config()?;
            let prep = harness::prepare(&cfg)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let mut w = BufWriter::new(fs::File::create(cfg.out_dir.join("embeddings.tsv"))?);
            prep.embedding.dump(&mut w)?;
            println!(
                "embedded {} segments into {} dims",
                prep.embedding.iter().count(),
                prep.embedding.dim
            );
        }
        Command::Train(common) => {
            let cfg = common.config()?;
            let prep = harness::prepare(&cfg)?;
            let (params, losses) = harness::train_meta(
                &prep.sources,
                &cfg.meta,
                &cfg.dims(),
                cfg.meta_steps,
                cfg.generator.seed,
            )?;
            fs::create_dir_all(&cfg.out_dir)?;
            let mut f = BufWriter::new(fs::File::create(cfg.out_dir.join("rmldp.ckpt"))?);
            save_checkpoint(&mut f, &params, Dtype::F64)?;
            let curve: String = losses
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{i},{l:.6}\n"))
                .collect();
            fs::write(cfg.out_dir.join("loss.csv"), format!("step,joint_loss\n{curve}"))?;
            println!(
                "trained {} steps; joint loss {:.4} -> {:.4}",
                losses.len(),
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Adapt { common, checkpoint } => {
            let cfg = common.config()?;
            let mut r = BufReader::new(fs::File::open(&checkpoint)?);
            let params = load_checkpoint(&mut r)?;
            let prep = harness::prepare(&cfg)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let mut csv = String::from("segment,category,t_c,prediction,actual\n");
            for ep in &prep.targets {
                let out = meta::meta_test_adapt(&params, ep, &cfg.meta)?;
                for ((w, p), a) in ep.d_te.iter().zip(&out.predictions).zip(&out.actuals) {
                    csv.push_str(&format!(
                        "{},{},{},{p:.6},{a:.6}\n",
                        ep.segment_id, ep.category, w.t_c
                    ));
                }
            }
            fs::write(cfg.out_dir.join("predictions.csv"), csv)?;
            println!("adapted to {} target segments", prep.targets.len());
        }
        Command::Eval(common) => {
            let cfg = common.config()?;
            let report = harness::run_experiment(&cfg)?;
            for m in &report.methods {
                println!("{}: mape {:.4}", m.method, m.overall);
            }
            println!("report written to {}", cfg.out_dir.display());
        }
        Command::Sweep { common, lens } => {
            let mut cfg = common.config()?;
            cfg.sweep_lens = lens
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|_| Error::Config(format!("bad length {s}"))))
                .collect::<Result<_>>()?;
            cfg.baselines.clear();
            let report = harness::run_experiment(&cfg)?;
            for (len, cat, m) in &report.sweep {
                println!("|T_c|={len} {cat}: {m:.4}");
            }
        }
        Command::Report { out, runs } => {
            merge_reports(&out, &runs)?;
            println!("merged {} runs into {}", runs.len(), out.display());
        }
    }
    Ok(())
}

fn merge_reports(out: &PathBuf, runs: &[PathBuf]) -> Result<()> {
    use std::collections::BTreeMap;
    // method -> (sum, count) over all seeds and segments
    let mut agg: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for dir in runs {
        let text = fs::read_to_string(dir.join("methods.csv"))?;
        for line in text.lines().skip(1) {
            let mut parts = line.split(',');
            let method = parts.next().unwrap_or_default().to_string();
            let value: f64 = parts
                .nth(2)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("malformed row in {}", dir.display())))?;
            let e = agg.entry(method).or_default();
            e.0 += value;
            e.1 += 1;
        }
    }
    fs::create_dir_all(out)?;
    let mut md = String::from("# Merged report\n\n| method | mean mape | rows |\n|---|---|---|\n");
    for (method, (sum, n)) in &agg {
        md.push_str(&format!("| {method} | {:.4} | {n} |\n", sum / *n as f64));
    }
    fs::write(out.join("summary.md"), md)?;
    Ok(())
}
