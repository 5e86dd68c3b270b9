use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nireg::clustering::{build_subpopulations, make_ood_split, PairingRule};
use nireg::data::{load_csv, save_csv, ColumnRef, LabeledDataset};
use nireg::metrics::evaluate;
use nireg::model::{fit, fit_cluster_anchors, LogisticModel, RegularizerSpec};
use nireg::pipeline::{
    require_dir, run_pipeline, write_json, InputSource, KMeansSettings, OodSplit, PipelineConfig,
    Seeds,
};
use nireg::preprocess::{fit_pca, PcaTransform};
use nireg::selection::{tune_l2, tune_ni, tune_ni_random_folds};
use nireg::synthetic::{generate, GeneratorConfig};
use nireg::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(
    name = "nireg",
    version,
    about = "Subpopulation-invariant regularized logistic regression"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON); flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets the clustering, CV and generation seeds at once.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; must exist.
    #[arg(short, long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Label column, by header name or zero-based index.
    #[arg(long, default_value = "label")]
    label: ColumnRef,
    #[arg(long)]
    no_header: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Acceptance,
    Iid,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Kind {
    None,
    L2,
    Ni,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset: dataset.csv and envs.csv.
    Generate {
        #[arg(long, value_enum, default_value = "acceptance")]
        preset: Preset,
    },
    /// Withhold one combined cluster: train.csv, test.csv, split.json, cluster-report.json.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k_per_class: Option<usize>,
        #[arg(long)]
        test_cluster: Option<usize>,
        #[arg(long)]
        pairing: Option<PairingRule>,
    },
    /// Divide a training set into subpopulations: transform.json, clusters.csv, cluster-report.json.
    Cluster {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k_per_class: Option<usize>,
        #[arg(long)]
        pairing: Option<PairingRule>,
    },
    /// Fit one model on a training set: transform.json, model.json.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Subpopulations per class for the ni anchors.
        #[arg(long)]
        k_per_class: Option<usize>,
    },
    /// Cross-validate λ (l2) or α (ni): tuning-report.json.
    Tune {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        k_per_class: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Score a dataset with a saved model: eval-report.json, roc.csv.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        transform: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// The whole experiment; without --config or --data it runs the synthetic acceptance preset.
    Pipeline {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "label")]
        label: ColumnRef,
        #[arg(long)]
        no_header: bool,
        /// Clusters per class for the OOD split.
        #[arg(long)]
        ood_k_per_class: Option<usize>,
        #[arg(long)]
        test_cluster: Option<usize>,
        /// Subpopulations per class in the training set.
        #[arg(long)]
        k_per_class: Option<usize>,
        #[arg(long)]
        pairing: Option<PairingRule>,
        #[arg(long)]
        folds: Option<usize>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load(d: &DataArgs) -> Result<LabeledDataset> {
    load_csv(&d.data, &d.label, !d.no_header).map_err(|e| e.at("load"))
}

/// Config file if given, else the preset matching the input; then `--seed`.
fn base_config(common: &Common, data: Option<&DataArgs>) -> Result<PipelineConfig> {
    let seed = common.seed.unwrap_or(0);
    let mut config = match (&common.config, data) {
        (Some(path), _) => PipelineConfig::from_json(&read_text(path)?)?,
        (None, Some(d)) => PipelineConfig::cluster_protocol(&d.data, d.label.clone(), seed),
        (None, None) => PipelineConfig::acceptance(seed),
    };
    if let Some(d) = data {
        config.input = InputSource::Csv {
            path: d.data.clone(),
            label_column: d.label.clone(),
            has_header: !d.no_header,
        };
        if matches!(config.ood_split, OodSplit::Environment { .. }) {
            config.ood_split = OodSplit::Cluster {
                k_per_class: 5,
                test_cluster: 0,
            };
        }
    }
    if let Some(s) = common.seed {
        config.seeds = Seeds::all(s);
    }
    Ok(config)
}

struct Ctx {
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn kmeans_opts(
    k: &KMeansSettings,
    k_per_class: usize,
    seed: u64,
) -> nireg::clustering::KMeansOptions {
    nireg::clustering::KMeansOptions {
        k: k_per_class,
        seed,
        restarts: k.restarts,
        max_iter: k.max_iter,
        tol: k.tol,
    }
}

#[derive(Serialize)]
struct SplitFile<'a> {
    k_per_class: usize,
    test_cluster: usize,
    seed: u64,
    train_ids: &'a [String],
    test_ids: &'a [String],
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let ctx = Ctx {
        out: common.out.clone(),
        quiet: common.quiet,
    };
    require_dir(&ctx.out)?;

    match cli.command {
        Command::Generate { preset } => {
            let mut cfg = match (&common.config, preset) {
                (Some(p), _) => serde_json::from_str::<GeneratorConfig>(&read_text(p)?)
                    .map_err(|e| Error::Config(e.to_string()))?,
                (None, Preset::Acceptance) => GeneratorConfig::acceptance(0),
                (None, Preset::Iid) => GeneratorConfig::iid(0),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let synth = generate(&cfg).map_err(|e| e.at("generate"))?;
            save_csv(&synth.dataset, ctx.path("dataset.csv"))?;
            synth.write_envs_csv(ctx.path("envs.csv"))?;
            ctx.say(format!(
                "wrote {} rows in {} environments to {}",
                synth.dataset.len(),
                cfg.n_envs,
                ctx.out.display()
            ));
        }

        Command::Split {
            data,
            k_per_class,
            test_cluster,
            pairing,
        } => {
            let config = base_config(common, Some(&data))?;
            let (mut k, mut t) = match config.ood_split {
                OodSplit::Cluster {
                    k_per_class,
                    test_cluster,
                } => (k_per_class, test_cluster),
                OodSplit::Environment { .. } => unreachable!("replaced by base_config"),
            };
            k = k_per_class.unwrap_or(k);
            t = test_cluster.unwrap_or(t);
            let pairing = pairing.unwrap_or(config.pairing_rule);
            let seed = config.seeds.clustering;
            let full = load(&data)?;
            let transform =
                fit_pca(&full.features, config.rank_tolerance).map_err(|e| e.at("split"))?;
            let part = build_subpopulations(
                &full,
                &transform,
                k,
                &kmeans_opts(&config.kmeans, k, seed),
                pairing,
            )
            .map_err(|e| e.at("split"))?;
            let split = make_ood_split(&part, t).map_err(|e| e.at("split"))?;
            let train = full.subset(&split.train_indices)?;
            let test = full.subset(&split.test_indices)?;
            save_csv(&train, ctx.path("train.csv"))?;
            save_csv(&test, ctx.path("test.csv"))?;
            write_json(&ctx.path("cluster-report.json"), &part.report(seed))?;
            write_json(
                &ctx.path("split.json"),
                &SplitFile {
                    k_per_class: k,
                    test_cluster: t,
                    seed,
                    train_ids: &train.sample_ids,
                    test_ids: &test.sample_ids,
                },
            )?;
            ctx.say(format!(
                "train {} rows, test {} rows",
                train.len(),
                test.len()
            ));
        }

        Command::Cluster {
            data,
            k_per_class,
            pairing,
        } => {
            let config = base_config(common, Some(&data))?;
            let k = k_per_class.unwrap_or(config.train_k_per_class);
            let seed = config.seeds.clustering;
            let ds = load(&data)?;
            let transform =
                fit_pca(&ds.features, config.rank_tolerance).map_err(|e| e.at("transform"))?;
            let part = build_subpopulations(
                &ds,
                &transform,
                k,
                &kmeans_opts(&config.kmeans, k, seed),
                pairing.unwrap_or(config.pairing_rule),
            )
            .map_err(|e| e.at("cluster"))?;
            write_json(&ctx.path("transform.json"), &transform)?;
            write_json(&ctx.path("cluster-report.json"), &part.report(seed))?;
            let mut csv = String::from("sample_id,cluster\n");
            for (id, c) in ds.sample_ids.iter().zip(part.labels(ds.len())) {
                csv.push_str(&format!("{id},{c}\n"));
            }
            let p = ctx.path("clusters.csv");
            std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
            ctx.say(format!(
                "{} subpopulations, sizes {:?}",
                part.len(),
                part.report(seed)
                    .clusters
                    .iter()
                    .map(|c| c.size)
                    .collect::<Vec<_>>()
            ));
        }

        Command::Fit {
            data,
            kind,
            lambda,
            alpha,
            k_per_class,
        } => {
            let config = base_config(common, Some(&data))?;
            let ds = load(&data)?;
            let transform =
                fit_pca(&ds.features, config.rank_tolerance).map_err(|e| e.at("transform"))?;
            let pcs = transform.apply(&ds.features)?;
            let reg = match kind {
                Kind::None => RegularizerSpec::none(),
                Kind::L2 => RegularizerSpec::l2(lambda)?,
                Kind::Ni => {
                    let k = k_per_class.unwrap_or(config.train_k_per_class);
                    let seed = config.seeds.clustering;
                    let part = build_subpopulations(
                        &ds,
                        &transform,
                        k,
                        &kmeans_opts(&config.kmeans, k, seed),
                        config.pairing_rule,
                    )
                    .map_err(|e| e.at("subpopulations"))?;
                    let anchors = fit_cluster_anchors(
                        &pcs,
                        &ds.labels,
                        &part,
                        config.anchor_ridge,
                        &config.solver,
                    )
                    .map_err(|e| e.at("anchors"))?;
                    RegularizerSpec::ni(alpha, anchors)?
                }
            };
            let model = fit(&pcs, &ds.labels, &reg, &config.solver)
                .map_err(|e| e.at("fit"))?
                .with_transform(&transform);
            write_json(&ctx.path("transform.json"), &transform)?;
            write_json(&ctx.path("model.json"), &model)?;
            ctx.say(format!(
                "model {}: {:?} after {} iterations, loss {:.6}",
                model.id(),
                model.training_meta.termination,
                model.training_meta.iterations,
                model.training_meta.final_loss
            ));
        }

        Command::Tune {
            data,
            kind,
            k_per_class,
            folds,
        } => {
            let config = base_config(common, Some(&data))?;
            let folds = folds.unwrap_or(config.folds);
            let ds = load(&data)?;
            let transform =
                fit_pca(&ds.features, config.rank_tolerance).map_err(|e| e.at("transform"))?;
            let result = match kind {
                Kind::None => return Err(Error::Config("nothing to tune for kind none".into())),
                Kind::L2 => tune_l2(
                    &ds,
                    &transform,
                    &config.lambda_grid,
                    folds,
                    config.seeds.cv,
                    &config.solver,
                ),
                Kind::Ni => {
                    let k = k_per_class.unwrap_or(config.train_k_per_class);
                    let seed = config.seeds.clustering;
                    let part = build_subpopulations(
                        &ds,
                        &transform,
                        k,
                        &kmeans_opts(&config.kmeans, k, seed),
                        config.pairing_rule,
                    )
                    .map_err(|e| e.at("subpopulations"))?;
                    if part.len() >= 2 {
                        tune_ni(
                            &ds,
                            &transform,
                            &part,
                            &config.alpha_grid,
                            config.anchor_ridge,
                            &config.solver,
                        )
                    } else {
                        tune_ni_random_folds(
                            &ds,
                            &transform,
                            &config.alpha_grid,
                            folds,
                            config.seeds.cv,
                            config.anchor_ridge,
                            &config.solver,
                        )
                    }
                }
            }
            .map_err(|e| e.at("tune"))?;
            write_json(&ctx.path("tuning-report.json"), &result)?;
            ctx.say(format!("best value {:e}", result.best_value));
        }

        Command::Eval {
            data,
            model,
            transform,
            split,
        } => {
            let m = LogisticModel::from_json(&read_text(&model)?)?;
            let t = PcaTransform::from_json(&read_text(&transform)?)?;
            let ds = load(&data)?;
            let report = evaluate(&m, &t, &ds, &split).map_err(|e| e.at("evaluate"))?;
            write_json(&ctx.path("eval-report.json"), &report)?;
            report
                .curve
                .as_ref()
                .expect("evaluate attaches the curve")
                .write_csv(ctx.path("roc.csv"))?;
            ctx.say(format!(
                "auc {:.4} on {} positives, {} negatives",
                report.auc, report.n_pos, report.n_neg
            ));
        }

        Command::Pipeline {
            data,
            label,
            no_header,
            ood_k_per_class,
            test_cluster,
            k_per_class,
            pairing,
            folds,
        } => {
            let data = data.map(|data| DataArgs {
                data,
                label,
                no_header,
            });
            let mut config = base_config(common, data.as_ref())?;
            if let OodSplit::Cluster {
                k_per_class: k,
                test_cluster: t,
            } = &mut config.ood_split
            {
                *k = ood_k_per_class.unwrap_or(*k);
                *t = test_cluster.unwrap_or(*t);
            } else if ood_k_per_class.is_some() || test_cluster.is_some() {
                return Err(Error::Config(
                    "--ood-k-per-class and --test-cluster apply to a cluster split".into(),
                ));
            }
            config.train_k_per_class = k_per_class.unwrap_or(config.train_k_per_class);
            config.pairing_rule = pairing.unwrap_or(config.pairing_rule);
            config.folds = folds.unwrap_or(config.folds);
            let run = run_pipeline(&config, &ctx.out)?;
            let s = &run.summary;
            ctx.say(format!(
                "auc_ni {:.4}  auc_l2 {:.4}  gap {:+.4}  alpha {:e}  lambda {:e}",
                s.auc_ni, s.auc_l2, s.auc_gap, s.best_alpha, s.best_lambda
            ));
            for f in &s.flags {
                ctx.say(format!("note: {f}"));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.common.workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(Error::Config(format!("cannot start {n} workers: {e}"))),
        },
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
