mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_assignment, resolve, RunConfig};

#[derive(Parser)]
#[command(name = "relso", version, about = "Train latent fitness models and optimize sequences in their latent space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config with dotted keys, e.g. `model.d_latent = 8`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Any config key, e.g. `--set bench.kt=0.05`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment, global = true)]
    set: Vec<(String, String)>,
    /// Global seed; falls back to RELSO_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `toy` or a CSV path with `sequence,fitness[,split]` columns.
    #[arg(long, global = true)]
    data: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.bin, metrics.csv and config.lock.
    Train {
        #[command(flatten)]
        common: Common,
        /// ae | jtae | relso-neg | relso-interp | relso
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Run the optimizer benchmark from bottom-quartile held-out seeds.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated: ga,hc,shc,mcmc-latent,mcmc-seq,de
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        n_seeds: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        threshold_pct: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Test-split metrics, smoothness indices and a PCA projection of the latent space.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Smoothness indices of one or more checkpoints plus the raw one-hot representation.
    Smoothness {
        #[command(flatten)]
        common: Common,
        /// Repeatable; `label=path` sets the row label.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Averaged, thresholded attention maps and positional pooling weights.
    Attention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        threshold_pct: Option<f64>,
    },
    /// All single-substitution variants of a sequence.
    Enumerate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sequence: Option<String>,
        /// Mutation alphabet; defaults to the 20 canonical amino acids.
        #[arg(long)]
        symbols: Option<String>,
        /// Adds predicted fitness when given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate a toy fitness landscape dataset.
    Toygen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        alphabet_size: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        epistatic_pairs: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
        /// Landscape seed (`toy.seed`); independent of the run seed.
        #[arg(long)]
        toy_seed: Option<u64>,
    },
}

fn quote(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn num<T: ToString>(&mut self, key: &str, v: Option<T>) {
        if let Some(v) = v {
            self.0.push((key.into(), v.to_string()));
        }
    }
    fn float(&mut self, key: &str, v: Option<f64>) {
        if let Some(v) = v {
            self.0.push((key.into(), format!("{v:?}")));
        }
    }
    fn text(&mut self, key: &str, v: Option<&str>) {
        if let Some(v) = v {
            self.0.push((key.into(), quote(v)));
        }
    }
}

type Runner = fn(&mut RunConfig) -> anyhow::Result<commands::Artifacts>;

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    let mut o = Overrides(Vec::new());
    let (name, common, run): (&str, Common, Runner) = match cmd {
        Command::Train { common, preset, steps, lr, batch_size, eval_every, checkpoint_every } => {
            o.text("train.preset", preset.as_deref());
            o.num("train.steps", steps);
            o.float("train.lr", lr);
            o.num("train.batch_size", batch_size);
            o.num("train.eval_every", eval_every);
            o.num("train.checkpoint_every", checkpoint_every);
            ("train", common, commands::train)
        }
        Command::Optimize { common, checkpoint, methods, n_seeds, budget, threshold_pct, threshold } => {
            o.text("optimize.checkpoint", checkpoint.as_ref().and_then(|p| p.to_str()));
            o.text("optimize.methods", methods.as_deref());
            o.num("bench.n_seeds", n_seeds);
            o.num("bench.budget", budget);
            o.float("bench.threshold_pct", threshold_pct);
            o.float("bench.threshold", threshold);
            ("optimize", common, commands::optimize)
        }
        Command::Eval { common, checkpoint, k } => {
            if let Some(c) = checkpoint {
                o.0.push(("eval.checkpoints".into(), format!("[{}]", quote(&c))));
            }
            o.num("eval.k", k);
            ("eval", common, commands::eval)
        }
        Command::Smoothness { common, checkpoints, k } => {
            if !checkpoints.is_empty() {
                let list: Vec<String> = checkpoints.iter().map(|c| quote(c)).collect();
                o.0.push(("eval.checkpoints".into(), format!("[{}]", list.join(", "))));
            }
            o.num("eval.k", k);
            ("smoothness", common, commands::smoothness)
        }
        Command::Attention { common, checkpoint, threshold_pct } => {
            if let Some(c) = checkpoint {
                o.0.push(("eval.checkpoints".into(), format!("[{}]", quote(&c))));
            }
            o.float("eval.threshold_pct", threshold_pct);
            ("attention", common, commands::attention)
        }
        Command::Enumerate { common, sequence, symbols, checkpoint } => {
            o.text("enumerate.sequence", sequence.as_deref());
            o.text("enumerate.symbols", symbols.as_deref());
            o.text("enumerate.checkpoint", checkpoint.as_ref().and_then(|p| p.to_str()));
            ("enumerate", common, commands::enumerate)
        }
        Command::Toygen { common, length, alphabet_size, samples, epistatic_pairs, noise_std, toy_seed } => {
            o.num("toy.length", length);
            o.num("toy.alphabet_size", alphabet_size);
            o.num("toy.samples", samples);
            o.num("toy.epistatic_pairs", epistatic_pairs);
            o.float("toy.noise_std", noise_std);
            o.num("toy.seed", toy_seed);
            ("toygen", common, commands::toygen)
        }
    };
    let out = common.out.ok_or_else(|| relso::Error::Config("--out DIR is required".into()))?;
    let mut overrides = common.set;
    o.num("seed", common.seed);
    o.text("data.source", common.data.as_deref());
    overrides.extend(o.0);
    let mut cfg = resolve(name, common.config.as_deref(), &overrides)?;
    let artifacts = run(&mut cfg)?;
    artifacts.write(&out)?;
    for p in artifacts.names() {
        println!("{}", out.join(p).display());
    }
    Ok(())
}

/// 2: configuration, 3: data, 4: numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<relso::Error>()) {
        Some(e) if e.is_numeric() => 4,
        Some(relso::Error::Config(_) | relso::Error::Version { .. }) => 2,
        Some(_) => 3,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
