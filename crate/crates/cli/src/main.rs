//! `axis` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};

use axis_core::adapt::{self, history_csv, split_learnable, TrainConfig};
use axis_core::bench::{self, BenchConfig};
use axis_core::calibrate;
use axis_core::io::container::read_manifest;
use axis_core::io::{read_container, write_container, ContainerObject, KvConfig};
use axis_core::merge::{merge_pipeline, KBudget, MergeConfig, MergedDelta, SelectionStrategy, DEFAULT_RANK_TOL};
use axis_core::net::{evaluate, Dataset, MlpSpec};
use axis_core::params::{task_vector, ParamSet, TaskVector};
use axis_core::perturb::{gaussian_corrupt, magnitude_prune};
use axis_core::Error;

#[derive(Parser, Debug)]
#[command(name = "axis", version, about = "Multi-source task-vector merging and singular-value adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print a container's manifest summary.
    Inspect { container: PathBuf },
    /// Build a task vector `ft - pre`.
    Diff {
        pre: PathBuf,
        ft: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Source id stored with the task vector (defaults to the file stem of `ft`).
        #[arg(long)]
        id: Option<String>,
    },
    /// Merge task vectors into an orthogonal low-rank delta.
    Merge {
        #[arg(short = 'p', long = "pre")]
        pre: Option<PathBuf>,
        #[arg(short = 't', long = "tv", required = true, num_args = 1..)]
        task_vectors: Vec<PathBuf>,
        #[arg(long, default_value = "top")]
        strategy: SelectionStrategy,
        /// Integer count or fraction of min(rows, cols).
        #[arg(long, default_value = "0.1")]
        k: KBudget,
        #[arg(long)]
        skip_final_svd: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
        rank_tol: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Zero-shot accuracy along `pre + alpha * merged`.
    Calibrate {
        #[arg(short = 'p', long = "pre")]
        pre: PathBuf,
        #[arg(short = 'm', long = "merged")]
        merged: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long)]
        rescale: bool,
        #[arg(long)]
        eval_config: PathBuf,
        /// Report CSV; with --rescale the per-layer gammas go next to it.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the top singular values of a merged delta on a target task.
    Adapt {
        #[arg(short = 'p', long = "pre")]
        pre: PathBuf,
        #[arg(short = 'm', long = "merged")]
        merged: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        n_fraction: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        rescale: bool,
        #[arg(long)]
        data: PathBuf,
        /// Per-epoch loss and accuracy CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Corrupt or prune a task vector.
    #[command(group(ArgGroup::new("mode").required(true).args(["noise", "prune"])))]
    Perturb {
        tv: PathBuf,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        prune: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Full leave-one-out sweep on the synthetic task family.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=UsageError message=\"{}\"", one_line(first).replace('"', "'"));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message=\"{}\"", e.kind(), one_line(&e.to_string()).replace('"', "'"));
            ExitCode::from(1)
        }
    }
}

fn read_params(path: &Path) -> Result<ParamSet, Error> {
    match read_container(path)? {
        ContainerObject::ParamSet(p) => Ok(p),
        other => Err(wrong_type(path, "param_set", &other)),
    }
}

fn read_task_vector(path: &Path) -> Result<TaskVector, Error> {
    match read_container(path)? {
        ContainerObject::TaskVector(tv) => Ok(tv),
        other => Err(wrong_type(path, "task_vector", &other)),
    }
}

fn read_merged(path: &Path) -> Result<MergedDelta, Error> {
    match read_container(path)? {
        ContainerObject::MergedDelta(m) => Ok(m),
        other => Err(wrong_type(path, "merged_delta", &other)),
    }
}

fn wrong_type(path: &Path, want: &str, got: &ContainerObject) -> Error {
    Error::InvalidInput(format!(
        "{} holds {:?}, expected {want}",
        path.display(),
        got.object_type()
    ))
}

/// Network spec and target-task data described by a bench config file.
struct TargetData {
    spec: MlpSpec,
    train: Dataset,
    test: Dataset,
}

fn load_target(path: &Path) -> Result<TargetData, Error> {
    let cfg = BenchConfig::from_kv(&KvConfig::load(path)?)?;
    let family = bench::gen_tasks(&cfg.family)?;
    let task = &family.tasks[cfg.target];
    let n = ((cfg.sweep.train_fraction * task.train.len() as f64).ceil() as usize).clamp(1, task.train.len());
    let idx: Vec<usize> = (0..n).collect();
    Ok(TargetData {
        spec: cfg.mlp_spec()?,
        train: task.train.subset(&idx),
        test: task.test.clone(),
    })
}

fn write_text(path: &Path, text: String) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Inspect { container } => {
            let manifest = read_manifest(&container)?;
            println!("object_type: {}", object_type_name(&manifest.object_type));
            for (k, v) in &manifest.attrs {
                println!("attr {k}: {v}");
            }
            println!("tensors: {}", manifest.tensors.len());
            for t in &manifest.tensors {
                let shape: Vec<String> = t.shape.iter().map(ToString::to_string).collect();
                let flags = if t.flags.is_empty() {
                    String::new()
                } else {
                    format!(" [{}]", t.flags.join(","))
                };
                println!("  {} {:?} {} {}B{}", t.name, t.kind, shape.join("x"), t.byte_len, flags);
            }
        }
        Command::Diff { pre, ft, output, id } => {
            let id = id.unwrap_or_else(|| {
                ft.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "source".into())
            });
            let tv = task_vector(&read_params(&ft)?, &read_params(&pre)?, &id)?;
            write_container(&output, &tv.into())?;
        }
        Command::Merge {
            pre,
            task_vectors,
            strategy,
            k,
            skip_final_svd,
            seed,
            rank_tol,
            output,
        } => {
            let tvs = task_vectors
                .iter()
                .map(|p| read_task_vector(p))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(pre) = pre {
                let theta = read_params(&pre)?;
                for tv in &tvs {
                    theta.check_same_schema(&tv.deltas)?;
                }
            }
            let cfg = MergeConfig {
                strategy,
                k,
                rank_tol,
                skip_final_svd,
                seed,
            };
            let merged = merge_pipeline(&tvs, &cfg)?;
            for w in &merged.provenance.warnings {
                eprintln!("warning: {}", one_line(w));
            }
            write_container(&output, &merged.into())?;
        }
        Command::Calibrate {
            pre,
            merged,
            alphas,
            rescale,
            eval_config,
            output,
        } => {
            let theta = read_params(&pre)?;
            let merged = read_merged(&merged)?;
            let target = load_target(&eval_config)?;
            let (report, warnings) = calibrate::calibrate(&theta, &merged, &alphas, rescale, |p: &ParamSet| {
                evaluate(&target.spec, p, &target.test)
            })?;
            for w in &warnings {
                eprintln!("warning: {}", one_line(w));
            }
            write_text(&output, report.to_csv())?;
            if rescale {
                write_text(&output.with_extension("gammas.csv"), report.gammas_csv())?;
            }
            if let Some(best) = report.best() {
                println!("best {best}");
            }
        }
        Command::Adapt {
            pre,
            merged,
            n_fraction,
            epochs,
            lr,
            batch_size,
            seed,
            rescale,
            data,
            history,
            output,
        } => {
            let theta = read_params(&pre)?;
            let mut merged = read_merged(&merged)?;
            if rescale {
                merged = calibrate::spectral_rescale(&merged, &theta)?.merged;
            }
            let target = load_target(&data)?;
            target.spec.check_params(&theta)?;
            let (state, warnings) = split_learnable(&merged, n_fraction)?;
            for w in &warnings {
                eprintln!("warning: {}", one_line(w));
            }
            let cfg = TrainConfig {
                epochs,
                learning_rate: lr,
                batch_size,
                seed,
            };
            let (trained, hist) = adapt::train(&state, &theta, &target.spec, &target.train, Some(&target.test), &cfg)?;
            if let Some(path) = history {
                write_text(&path, history_csv(&hist))?;
            }
            if let Some(last) = hist.last() {
                println!(
                    "epoch {} loss {:.6} train_acc {:.4} test_acc {:.4} learnable {}",
                    last.epoch,
                    last.loss,
                    last.train_acc,
                    last.test_acc.unwrap_or(f64::NAN),
                    trained.learnable_count()
                );
            }
            write_container(&output, &trained.into())?;
        }
        Command::Perturb {
            tv,
            noise,
            prune,
            seed,
            output,
        } => {
            let tv = read_task_vector(&tv)?;
            let out = match (noise, prune) {
                (Some(ratio), None) => gaussian_corrupt(&tv, ratio, seed)?,
                (None, Some(sparsity)) => magnitude_prune(&tv, sparsity)?,
                _ => unreachable!("clap enforces exactly one mode"),
            };
            write_container(&output, &out.into())?;
        }
        Command::Bench { config, output } => {
            let kv = match config {
                Some(path) => KvConfig::load(path)?,
                None => KvConfig::default(),
            };
            let cfg = BenchConfig::from_kv(&kv)?;
            let (prepared, report) = bench::run_bench(&cfg)?;
            for id in &report.flagged_sources {
                eprintln!("warning: source {id} flagged during fine-tuning");
            }
            bench::write_outputs(&output, &report, &prepared, cfg.emit_artifacts)?;
            println!("{} rows written to {}", report.rows.len(), output.display());
        }
    }
    Ok(())
}

fn object_type_name(t: &axis_core::io::ObjectType) -> &'static str {
    use axis_core::io::ObjectType;
    match t {
        ObjectType::ParamSet => "param_set",
        ObjectType::TaskVector => "task_vector",
        ObjectType::MergedDelta => "merged_delta",
        ObjectType::AdaptState => "adapt_state",
    }
}
