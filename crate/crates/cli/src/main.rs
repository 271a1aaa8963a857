use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dva::config::RunConfig;
use dva::ica::Projector;
use dva::pipeline;
use dva::retrieval;
use dva::train::Objective;
use dva::Error;

/// Frozen-ViT adapters with object-view training for fine-grained retrieval.
#[derive(Debug, Parser)]
#[command(name = "dva", version)]
struct Cli {
    /// JSON run config; every key is optional and unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed; overrides the config's `seed`.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output root for all stage artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "run")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Ica,
    Dva,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Render the synthetic dataset into OUT/data.
    GenData {
        /// Number of classes [default: from config, 20].
        #[arg(long)]
        n_classes: Option<usize>,
        /// Images per class [default: from config, 40].
        #[arg(long)]
        n_per_class: Option<usize>,
        /// Image side in pixels [default: from config, 256].
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Build discriminative and background views of the training images into OUT/opa.
    PrepOpa {
        /// Background threshold in percent of image area [default: from config, 50].
        #[arg(long)]
        alpha: Option<f64>,
        /// Mean-filter side, odd [default: from config, 31].
        #[arg(long)]
        blur_kernel: Option<usize>,
    },
    /// Write seeded backbone weights to OUT/model/backbone.ntw.
    InitWeights,
    /// Train adapters and proxies; writes OUT/model/{adapters,proxies}.ntw and report.csv.
    Train {
        /// Weight of the transfer loss [default: from config, 3].
        #[arg(long)]
        beta: Option<f64>,
        /// Objective [default: from config, dva].
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        /// Epochs [default: from config, 10].
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many optimizer steps [default: from config, unlimited].
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Embed the test split into OUT/eval/embeddings.csv.
    Embed,
    /// Compute Recall@K from OUT/eval/embeddings.csv and print the table.
    Eval,
    /// Print backbone and adapter parameter counts.
    Params {
        /// Adapter projectors, comma separated [default: from config, q,k].
        #[arg(long, value_delimiter = ',')]
        projectors: Option<Vec<String>>,
        /// Adapter bottleneck width [default: from config, 16].
        #[arg(long)]
        d: Option<usize>,
    },
}

fn parse_projector(s: &str) -> Result<Projector, Error> {
    match s.trim() {
        "q" => Ok(Projector::Q),
        "k" => Ok(Projector::K),
        "v" => Ok(Projector::V),
        other => Err(Error::Config(format!(
            "unknown projector {other:?} (expected q, k or v)"
        ))),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_path();
    match cli.cmd {
        Cmd::GenData {
            n_classes,
            n_per_class,
            image_size,
        } => {
            if let Some(v) = n_classes {
                cfg.data.n_classes = v;
            }
            if let Some(v) = n_per_class {
                cfg.data.n_per_class = v;
            }
            if let Some(v) = image_size {
                cfg.data.image_size = v;
            }
            let g = pipeline::cmd_gen_data(&cfg, out)?;
            println!(
                "wrote {} images and {} detections to {}",
                g.manifest.len(),
                g.detections.len(),
                g.manifest.root.display()
            );
        }
        Cmd::PrepOpa { alpha, blur_kernel } => {
            if let Some(v) = alpha {
                cfg.opa.alpha_pct = v;
            }
            if let Some(v) = blur_kernel {
                cfg.opa.blur_kernel = v;
            }
            let d = pipeline::cmd_prep_opa(&cfg, out)?;
            let bg = d
                .manifest
                .rows
                .iter()
                .filter(|r| r.label_id == d.background_id)
                .count();
            println!(
                "wrote {} views ({} background, class {}), {} fallbacks",
                d.manifest.len(),
                bg,
                d.background_id,
                d.fallbacks.len()
            );
        }
        Cmd::InitWeights => {
            let w = pipeline::cmd_init_weights(&cfg, out)?;
            println!(
                "wrote backbone with {} parameters",
                pipeline::group_digits(w.param_count())
            );
        }
        Cmd::Train {
            beta,
            objective,
            epochs,
            max_steps,
        } => {
            if let Some(b) = beta {
                cfg.loss.beta = b;
            }
            if let Some(o) = objective {
                cfg.train.objective = match o {
                    ObjectiveArg::Ica => Objective::Ica,
                    ObjectiveArg::Dva => Objective::Dva,
                };
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = max_steps;
            }
            let t = pipeline::cmd_train(&cfg, out)?;
            print!("{}", t.report.to_csv());
        }
        Cmd::Embed => {
            let set = pipeline::cmd_embed(&cfg, out)?;
            println!("embedded {} images (D = {})", set.len(), set.dim());
        }
        Cmd::Eval => {
            let r = pipeline::cmd_eval(&cfg, out)?;
            print!("{}", retrieval::format_recall_table(&r));
        }
        Cmd::Params { projectors, d } => {
            if let Some(ps) = projectors {
                let ps = ps
                    .iter()
                    .map(|s| parse_projector(s))
                    .collect::<Result<Vec<_>, _>>()?;
                cfg.adapter.projectors = ps;
            }
            if let Some(d) = d {
                cfg.adapter.d = d;
            }
            println!("{}", pipeline::cmd_params(&cfg)?);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
