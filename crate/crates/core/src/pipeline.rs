//! End-to-end experiment: carve an out-of-distribution test set, discover
//! training subpopulations, tune and fit the ni and l2 models, and compare
//! them on the withheld data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{
    build_subpopulations, make_ood_split, ClusterReport, KMeansOptions, PairingRule,
};
use crate::data::{load_csv, ColumnRef, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{fit, fit_cluster_anchors, AnchorRidge, LogisticModel, RegularizerSpec};
use crate::optim::SolverOptions;
use crate::preprocess::{fit_pca, PcaTransform, DEFAULT_RANK_TOLERANCE};
use crate::selection::{default_grid, tune_l2, tune_ni, tune_ni_random_folds, TuningResult};
use crate::synthetic::{generate, ood_protocol, GeneratorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSource {
    Csv {
        path: PathBuf,
        label_column: ColumnRef,
        #[serde(default = "default_true")]
        has_header: bool,
    },
    /// The generator's own seed is replaced by `seeds.generation`.
    Synthetic { generator: GeneratorConfig },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OodSplit {
    /// Cluster each class of the full dataset and withhold one combined cluster.
    Cluster {
        k_per_class: usize,
        test_cluster: usize,
    },
    /// Withhold a planted environment (synthetic input only).
    Environment { holdout_env: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub clustering: u64,
    pub cv: u64,
    pub generation: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            clustering: seed,
            cv: seed,
            generation: seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansSettings {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansSettings {
    fn default() -> Self {
        let d = KMeansOptions::new(1, 0);
        Self {
            restarts: d.restarts,
            max_iter: d.max_iter,
            tol: d.tol,
        }
    }
}

impl KMeansSettings {
    fn options(&self, k: usize, seed: u64) -> KMeansOptions {
        KMeansOptions {
            k,
            seed,
            restarts: self.restarts,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputSource,
    pub ood_split: OodSplit,
    /// Clusters per class when dividing the training set into subpopulations.
    pub train_k_per_class: usize,
    #[serde(default)]
    pub pairing_rule: PairingRule,
    #[serde(default = "default_rank_tolerance")]
    pub rank_tolerance: f64,
    #[serde(default)]
    pub anchor_ridge: AnchorRidge,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub seeds: Seeds,
    #[serde(default)]
    pub kmeans: KMeansSettings,
    #[serde(default)]
    pub solver: SolverOptions,
}

fn default_rank_tolerance() -> f64 {
    DEFAULT_RANK_TOLERANCE
}

fn default_folds() -> usize {
    5
}

impl PipelineConfig {
    /// Five clusters per class, the first combined cluster withheld, five
    /// training subpopulations per class.
    pub fn cluster_protocol(path: impl Into<PathBuf>, label_column: ColumnRef, seed: u64) -> Self {
        Self {
            input: InputSource::Csv {
                path: path.into(),
                label_column,
                has_header: true,
            },
            ood_split: OodSplit::Cluster {
                k_per_class: 5,
                test_cluster: 0,
            },
            train_k_per_class: 5,
            pairing_rule: PairingRule::default(),
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
            anchor_ridge: AnchorRidge::default(),
            lambda_grid: default_grid(),
            alpha_grid: default_grid(),
            folds: default_folds(),
            seeds: Seeds::all(seed),
            kmeans: KMeansSettings::default(),
            solver: SolverOptions::default(),
        }
    }

    /// Synthetic benchmark: the acceptance generator with its reversed
    /// environment withheld, the remaining environments as subpopulations.
    pub fn acceptance(seed: u64) -> Self {
        let generator = GeneratorConfig::acceptance(seed);
        Self {
            ood_split: OodSplit::Environment {
                holdout_env: generator.n_envs - 1,
            },
            train_k_per_class: generator.n_envs - 1,
            input: InputSource::Synthetic { generator },
            ..Self::cluster_protocol("", ColumnRef::Index(0), seed)
        }
    }

    /// Copies the generation seed into the generator, so the echoed config
    /// is self-contained.
    pub fn normalized(mut self) -> Self {
        if let InputSource::Synthetic { generator } = &mut self.input {
            generator.seed = self.seeds.generation;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lambda_grid.is_empty() || self.alpha_grid.is_empty() {
            return bad("hyperparameter grids must be non-empty");
        }
        if self.train_k_per_class == 0 {
            return bad("train_k_per_class must be at least 1");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.kmeans.restarts == 0 {
            return bad("kmeans.restarts must be at least 1");
        }
        match (&self.input, &self.ood_split) {
            (InputSource::Csv { .. }, OodSplit::Environment { .. }) => {
                bad("an environment holdout needs synthetic input")
            }
            (
                _,
                OodSplit::Cluster {
                    k_per_class,
                    test_cluster,
                },
            ) if *k_per_class < 2 || test_cluster >= k_per_class => {
                bad("cluster OOD split needs k_per_class >= 2 and test_cluster < k_per_class")
            }
            (InputSource::Synthetic { generator }, _) => generator.validate(),
            _ => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `cluster-report.json`: how the test set was carved and how the training
/// set was divided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReportBundle {
    pub ood: Option<ClusterReport>,
    pub ood_test_cluster: Option<usize>,
    pub ood_holdout_env: Option<usize>,
    pub training: ClusterReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub nireg: String,
    pub report_schema: u32,
}

/// `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub auc_ni: f64,
    pub auc_l2: f64,
    pub auc_gap: f64,
    pub best_alpha: f64,
    pub best_lambda: f64,
    pub config: PipelineConfig,
    pub seeds: Seeds,
    pub versions: Versions,
    pub flags: Vec<String>,
}

/// Everything a pipeline run produced, in memory.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub summary: Summary,
    pub clusters: ClusterReportBundle,
    pub transform: PcaTransform,
    pub tuning_ni: TuningResult,
    pub tuning_l2: TuningResult,
    pub model_ni: LogisticModel,
    pub model_l2: LogisticModel,
    pub eval_ni: EvalReport,
    pub eval_l2: EvalReport,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at(name))
}

/// Runs the experiment in memory.
pub fn run(config: &PipelineConfig) -> Result<PipelineRun> {
    let config = config.clone().normalized();
    stage("config", config.validate())?;
    let km = &config.kmeans;
    let mut flags = Vec::new();

    // 1. data and the out-of-distribution split
    let (train, test, ood, ood_test_cluster, ood_holdout_env) =
        match (&config.input, &config.ood_split) {
            (InputSource::Synthetic { generator }, OodSplit::Environment { holdout_env }) => {
                let (tr, te) = stage("split", ood_protocol(generator, *holdout_env))?;
                (tr.dataset, te.dataset, None, None, Some(*holdout_env))
            }
            (
                input,
                OodSplit::Cluster {
                    k_per_class,
                    test_cluster,
                },
            ) => {
                let full = stage(
                    "load",
                    match input {
                        InputSource::Csv {
                            path,
                            label_column,
                            has_header,
                        } => load_csv(path, label_column, *has_header),
                        InputSource::Synthetic { generator } => {
                            generate(generator).map(|s| s.dataset)
                        }
                    },
                )?;
                let t_full = stage("split", fit_pca(&full.features, config.rank_tolerance))?;
                let part = stage(
                    "split",
                    build_subpopulations(
                        &full,
                        &t_full,
                        *k_per_class,
                        &km.options(*k_per_class, config.seeds.clustering),
                        config.pairing_rule,
                    ),
                )?;
                let split = stage("split", make_ood_split(&part, *test_cluster))?;
                (
                    stage("split", full.subset(&split.train_indices))?,
                    stage("split", full.subset(&split.test_indices))?,
                    Some(part.report(config.seeds.clustering)),
                    Some(*test_cluster),
                    None,
                )
            }
            (InputSource::Csv { .. }, OodSplit::Environment { .. }) => {
                unreachable!("rejected by validate")
            }
        };

    // 2. transform fit on training rows only
    let transform = stage("transform", fit_pca(&train.features, config.rank_tolerance))?;
    let pcs = stage("transform", transform.apply(&train.features))?;

    // 3. training subpopulations and their anchors
    let partition = stage(
        "subpopulations",
        build_subpopulations(
            &train,
            &transform,
            config.train_k_per_class,
            &km.options(config.train_k_per_class, config.seeds.clustering),
            config.pairing_rule,
        ),
    )?;
    let anchors = stage(
        "anchors",
        fit_cluster_anchors(
            &pcs,
            &train.labels,
            &partition,
            config.anchor_ridge,
            &config.solver,
        ),
    )?;

    // 4. hyperparameters
    let tuning_ni = if partition.len() >= 2 {
        stage(
            "tune_ni",
            tune_ni(
                &train,
                &transform,
                &partition,
                &config.alpha_grid,
                config.anchor_ridge,
                &config.solver,
            ),
        )?
    } else {
        flags.push(
            "degenerate: one training subpopulation; alpha tuned on random folds".to_string(),
        );
        stage(
            "tune_ni",
            tune_ni_random_folds(
                &train,
                &transform,
                &config.alpha_grid,
                config.folds,
                config.seeds.cv,
                config.anchor_ridge,
                &config.solver,
            ),
        )?
    };
    let tuning_l2 = stage(
        "tune_l2",
        tune_l2(
            &train,
            &transform,
            &config.lambda_grid,
            config.folds,
            config.seeds.cv,
            &config.solver,
        ),
    )?;

    // 5. final fits on the whole training set
    let model_ni = stage(
        "fit_ni",
        RegularizerSpec::ni(tuning_ni.best_value, anchors)
            .and_then(|reg| fit(&pcs, &train.labels, &reg, &config.solver)),
    )?
    .with_transform(&transform);
    let model_l2 = stage(
        "fit_l2",
        RegularizerSpec::l2(tuning_l2.best_value)
            .and_then(|reg| fit(&pcs, &train.labels, &reg, &config.solver)),
    )?
    .with_transform(&transform);
    for (name, m) in [("ni", &model_ni), ("l2", &model_l2)] {
        if !m.training_meta.converged() {
            flags.push(format!(
                "{name} model stopped with {:?} at gradient norm {:e}",
                m.training_meta.termination, m.training_meta.gradient_norm
            ));
        }
    }

    // 6. evaluation on the withheld data
    let eval_ni = stage(
        "evaluate",
        evaluate(&model_ni, &transform, &test, "ood_test"),
    )?;
    let eval_l2 = stage(
        "evaluate",
        evaluate(&model_l2, &transform, &test, "ood_test"),
    )?;

    let summary = Summary {
        auc_ni: eval_ni.auc,
        auc_l2: eval_l2.auc,
        auc_gap: eval_ni.auc - eval_l2.auc,
        best_alpha: tuning_ni.best_value,
        best_lambda: tuning_l2.best_value,
        seeds: config.seeds,
        config,
        versions: Versions {
            nireg: env!("CARGO_PKG_VERSION").to_string(),
            report_schema: 1,
        },
        flags,
    };
    Ok(PipelineRun {
        clusters: ClusterReportBundle {
            ood,
            ood_test_cluster,
            ood_holdout_env,
            training: partition.report(summary.seeds.clustering),
        },
        summary,
        transform,
        tuning_ni,
        tuning_l2,
        model_ni,
        model_l2,
        eval_ni,
        eval_l2,
        train,
        test,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fails unless `dir` exists and is a directory.
pub fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "output directory {} does not exist",
            dir.display()
        )))
    }
}

/// File names of the report bundle, in write order.
pub const BUNDLE_FILES: [&str; 12] = [
    "cluster-report.json",
    "transform.json",
    "tuning-report-ni.json",
    "tuning-report-l2.json",
    "model-ni.json",
    "model-l2.json",
    "eval-report-ni.json",
    "eval-report-l2.json",
    "roc-ni.csv",
    "roc-l2.csv",
    "summary.json",
    "split.json",
];

#[derive(Serialize)]
struct SplitIds<'a> {
    train_ids: &'a [String],
    test_ids: &'a [String],
}

impl PipelineRun {
    pub fn write_bundle(&self, out_dir: &Path) -> Result<()> {
        require_dir(out_dir)?;
        let p = |name: &str| out_dir.join(name);
        write_json(&p("cluster-report.json"), &self.clusters)?;
        write_json(&p("transform.json"), &self.transform)?;
        write_json(&p("tuning-report-ni.json"), &self.tuning_ni)?;
        write_json(&p("tuning-report-l2.json"), &self.tuning_l2)?;
        write_json(&p("model-ni.json"), &self.model_ni)?;
        write_json(&p("model-l2.json"), &self.model_l2)?;
        write_json(&p("eval-report-ni.json"), &self.eval_ni)?;
        write_json(&p("eval-report-l2.json"), &self.eval_l2)?;
        for (name, report) in [("roc-ni.csv", &self.eval_ni), ("roc-l2.csv", &self.eval_l2)] {
            report
                .curve
                .as_ref()
                .expect("evaluate attaches the curve")
                .write_csv(p(name))?;
        }
        write_json(&p("summary.json"), &self.summary)?;
        write_json(
            &p("split.json"),
            &SplitIds {
                train_ids: &self.train.sample_ids,
                test_ids: &self.test.sample_ids,
            },
        )
    }
}

/// Runs the experiment and writes the report bundle into `out_dir`.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<PipelineRun> {
    stage("output", require_dir(out_dir))?;
    let run = run(config)?;
    stage("output", run.write_bundle(out_dir))?;
    Ok(run)
}
