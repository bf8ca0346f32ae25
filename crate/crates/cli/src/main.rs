use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use depthforge::convnet::Preproc;
use depthforge::pipeline::{self, PipelineConfig, PipelineError};

/// Synthetic depth rendering, CNN feature learning and kernel fusion.
#[derive(Debug, Parser)]
#[command(name = "depthforge", version)]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the config file's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.output`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render every model, drop near-duplicates, write the manifest.
    Gen {
        #[arg(long)]
        models: Option<PathBuf>,
        /// Configurations per model.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        threshold: Option<u32>,
    },
    /// Recount near-duplicates of the last `gen` at another threshold.
    DedupReport {
        #[arg(long)]
        threshold: Option<u32>,
    },
    /// Train the net on the training split.
    Train,
    /// Write one layer's features for every manifest row.
    Extract {
        #[arg(long)]
        layer: String,
        #[arg(long, default_value = "raw")]
        preproc: Preproc,
    },
    /// MKL fusion of the two configured feature sources.
    Fuse {
        #[arg(long)]
        p: Option<f64>,
        #[arg(long = "C")]
        c: Option<f64>,
    },
    /// Linear SVM on the configured layer.
    Eval,
    /// Layer × preprocessing grid.
    Ablate,
    /// Primitive-shape benchmark from scratch.
    Demo,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match (&cli.config, cli.seed) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(seed)) => PipelineConfig::with_seed(seed),
        (None, None) => {
            return Err(PipelineError::Config(
                "seed: missing (pass --seed or a config file with `seed = N`)".into(),
            ))
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.paths.output = out.clone();
    }
    if let Command::Gen {
        models,
        count,
        threshold,
    } = &cli.command
    {
        if let Some(m) = models {
            cfg.paths.models = m.clone();
        }
        if let Some(c) = count {
            cfg.render.count = *c;
        }
        if let Some(t) = threshold {
            cfg.render.dedup_threshold = *t;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    pipeline::with_jobs(cli.jobs, || match &cli.command {
        Command::Gen { .. } => {
            let s = pipeline::gen(&cfg)?;
            println!("rendered {} images, kept {} in {}", s.rendered, s.kept, cfg.paths.output.display());
            Ok(())
        }
        Command::DedupReport { threshold } => {
            let t = threshold.unwrap_or(cfg.render.dedup_threshold);
            let rows = pipeline::dedup_report(&cfg, t)?;
            for r in rows {
                println!("{}: {}/{} kept ({:.3} near-duplicate)", r.model_id, r.kept, r.total, r.near_duplicate_fraction);
            }
            Ok(())
        }
        Command::Train => {
            let s = pipeline::train(&cfg)?;
            if let Some(last) = s.curve.last() {
                println!("trained {} epochs: loss {:.4}, train accuracy {:.4}", s.curve.len(), last.loss, last.train_acc);
            }
            Ok(())
        }
        Command::Extract { layer, preproc } => {
            let path = pipeline::extract(&cfg, layer, *preproc)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Fuse { p, c } => {
            let r = pipeline::fuse(&cfg, *p, *c)?;
            println!(
                "first {:.4}, second {:.4}, fused {:.4} (beta {:?}, C {}, p {})",
                r.first.overall_accuracy, r.second.overall_accuracy, r.fused.overall_accuracy, r.beta, r.mkl_c, r.mkl_p
            );
            Ok(())
        }
        Command::Eval => {
            let r = pipeline::eval(&cfg)?;
            println!("{} accuracy {:.4}", cfg.eval.layer, r.overall_accuracy);
            Ok(())
        }
        Command::Ablate => {
            let grid = pipeline::ablate(&cfg)?;
            for c in &grid.cells {
                println!("{:>10} {:>7}: {:.4}", c.layer, c.preprocessing.name(), c.report.overall_accuracy);
            }
            Ok(())
        }
        Command::Demo => {
            let s = pipeline::demo(&cfg)?;
            println!(
                "demo: {} kept of {} rendered, test accuracy {:.4}; see {}",
                s.gen.kept,
                s.gen.rendered,
                s.report.overall_accuracy,
                cfg.paths.output.join("final_report.csv").display()
            );
            Ok(())
        }
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEPTHFORGE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
