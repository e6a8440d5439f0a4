use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use speech_engine::experiment::{Data, Experiment};
use speech_engine::fixtures::{default_fixture_dir, regenerate_goldens, verify_implementation};
use speech_engine::{parse_config, run_experiment, Error, ExperimentConfig, Result, UpstreamModel};

#[derive(Parser)]
#[command(name = "speech-engine", version, about = "Pretrain, train, average and evaluate speech classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Select {
    /// Only this fold (default: every fold).
    #[arg(long)]
    fold: Option<usize>,
    /// Only this training-set size, a count or `full` (default: every
    /// configured sweep point).
    #[arg(long, value_name = "N|full")]
    n_per_class: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth(Common),
    /// Fit the cluster-target codebook.
    Kmeans(Common),
    /// Pretrain the upstream model.
    Pretrain(Common),
    /// Train task heads, writing every checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
    },
    /// Apply the averaging recipe to trained checkpoints.
    Average {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
    },
    /// Evaluate averaged checkpoints on their test folds.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        select: Select,
    },
    /// Train, average and evaluate every fold at every sweep point, then
    /// write the curves.
    Sweep(Common),
    /// Collect evaluation reports into curves.csv.
    Report(Common),
    /// The whole recipe.
    Run(Common),
    /// Regenerate golden fixtures from their oracles and check the library
    /// against them.
    Goldens {
        /// Fixture directory (default: the one shipped with the library).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment(common: &Common) -> Result<Experiment> {
    let exp = Experiment::new(load(common)?)?;
    exp.init()?;
    Ok(exp)
}

fn data_and_upstream(exp: &Experiment) -> Result<(Data, UpstreamModel)> {
    let data = exp.load_data(exp.corpus()?)?;
    let up = exp.upstream(&data)?;
    Ok((data, up))
}

fn points(exp: &Experiment, select: &Select) -> Result<Vec<(Option<usize>, usize)>> {
    let ns = match select.n_per_class.as_deref() {
        None => exp.cfg.protocol.sweep_points(),
        Some("full") => vec![None],
        Some(s) => vec![Some(s.parse().map_err(|_| Error::Range {
            field: "--n-per-class".into(),
            message: format!("`{s}` is neither a count nor `full`"),
        })?)],
    };
    let folds: Vec<usize> = match select.fold {
        Some(f) if f >= exp.cfg.protocol.folds => {
            return Err(Error::Range {
                field: "--fold".into(),
                message: format!("fold {f} of {}", exp.cfg.protocol.folds),
            })
        }
        Some(f) => vec![f],
        None => (0..exp.cfg.protocol.folds).collect(),
    };
    Ok(ns.iter().flat_map(|&n| folds.iter().map(move |&f| (n, f))).collect())
}

fn label(n: Option<usize>, fold: usize) -> String {
    format!("n_per_class={} fold={fold}", n.map_or("full".to_string(), |n| n.to_string()))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(c) => {
            let exp = experiment(&c)?;
            let m = exp.synth()?;
            println!("synth: {} utterances under {}", m.len(), m.root().display());
        }
        Command::Kmeans(c) => {
            let exp = experiment(&c)?;
            let data = exp.load_data(exp.corpus()?)?;
            let cb = exp.kmeans(&data)?;
            println!("kmeans: {} centroids of dimension {}", cb.k(), cb.dim());
        }
        Command::Pretrain(c) => {
            let exp = experiment(&c)?;
            let data = exp.load_data(exp.corpus()?)?;
            let cb_path = exp.out.path("codebook.ckpt")?;
            let cb = if cb_path.is_file() {
                speech_engine::container::load_codebook(&cb_path, Some(&exp.fingerprint))?
            } else {
                exp.kmeans(&data)?
            };
            let (_, log) = exp.pretrain(&data, &cb)?;
            let tail = &log.losses[log.losses.len().saturating_sub(20)..];
            let mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            println!("pretrain: {} steps, final loss {mean:.4}", log.losses.len());
        }
        Command::Train { common, select } => {
            let exp = experiment(&common)?;
            let (data, up) = data_and_upstream(&exp)?;
            let plan = exp.folds(&data.manifest)?;
            for (n, fold) in points(&exp, &select)? {
                let store = exp.train_point(&data, &up, &plan, fold, n)?;
                let best = store.best()?;
                println!(
                    "train {}: {} checkpoints, best dev accuracy {:.4} at step {}",
                    label(n, fold),
                    store.len(),
                    best.dev_metric.unwrap_or(f64::NAN),
                    best.step
                );
            }
        }
        Command::Average { common, select } => {
            let exp = experiment(&common)?;
            let (data, up) = data_and_upstream(&exp)?;
            for (n, fold) in points(&exp, &select)? {
                let store = exp.load_point_store(&data, &up, fold, n)?;
                exp.average_point(&store, fold, n)?;
                println!("average {}: {}", label(n, fold), exp.cfg.protocol.averaging);
            }
        }
        Command::Eval { common, select } => {
            let exp = experiment(&common)?;
            let (data, up) = data_and_upstream(&exp)?;
            let plan = exp.folds(&data.manifest)?;
            for (n, fold) in points(&exp, &select)? {
                let avg = exp.load_averaged(&data, &up, fold, n)?;
                let r = exp.eval_point(&data, &up, &plan, fold, n, &avg)?;
                let h = r.headline();
                println!(
                    "eval {}: accuracy {:.4}, eer {:.4}",
                    label(n, fold),
                    h.weighted_accuracy,
                    h.eer
                );
            }
        }
        Command::Sweep(c) => {
            let exp = experiment(&c)?;
            let (data, up) = data_and_upstream(&exp)?;
            let reports = exp.sweep(&data, &up)?;
            println!("sweep: {} reports, curves at {}", reports.len(), exp.report(&reports)?.display());
        }
        Command::Report(c) => {
            let exp = experiment(&c)?;
            let reports = exp.collect_reports()?;
            println!("report: {} reports, curves at {}", reports.len(), exp.report(&reports)?.display());
        }
        Command::Run(c) => {
            let s = run_experiment(&load(&c)?)?;
            println!("run: {} reports, curves at {}", s.reports.len(), s.curves.display());
        }
        Command::Goldens { dir } => {
            let dir = dir.unwrap_or_else(default_fixture_dir);
            let out = regenerate_goldens(&dir)?;
            let checked = verify_implementation(&dir)?;
            println!(
                "goldens: {} verified, {} filled, library matches {checked} cases",
                out.verified.len(),
                out.filled.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
