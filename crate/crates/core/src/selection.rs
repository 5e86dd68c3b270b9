//! Hyperparameter selection: random stratified k-fold for the l2 strength,
//! cluster-holdout validation for the ni strength.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::SubpopulationPartition;
use crate::data::{FeatureMatrix, LabelVector, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::roc_curve;
use crate::model::{fit, fit_anchors, AnchorRidge, RegularizerSpec};
use crate::optim::SolverOptions;
use crate::preprocess::PcaTransform;

/// Grid values whose mean AUC is within this of the best count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// 13 log-spaced values, 1e-6 … 1e6.
pub fn default_grid() -> Vec<f64> {
    (-6..=6).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    RandomKfold,
    ClusterHoldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub value: f64,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
}

/// Index bookkeeping for one validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub holdout_rows: usize,
    pub fit_rows: usize,
    /// Rows used by anchor fits (0 for l2).
    pub anchor_rows: usize,
    /// Holdout rows appear in neither the fit nor any anchor fit.
    pub leak_free: bool,
}

/// `tuning-report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub protocol: Protocol,
    pub seed: u64,
    pub grid: Vec<f64>,
    pub per_value_scores: Vec<GridScore>,
    pub best_value: f64,
    pub audit: Vec<FoldAudit>,
    /// For ni: the held-out cluster's anchor is left out of the penalty.
    pub holdout_anchor_excluded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Highest mean AUC; among values within [`TIE_TOLERANCE`] of it, the largest.
pub fn select_best(scores: &[GridScore]) -> f64 {
    let best = scores
        .iter()
        .map(|s| s.mean_auc)
        .fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .filter(|s| s.mean_auc >= best - TIE_TOLERANCE)
        .map(|s| s.value)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Seeded stratified folds of near-equal size; each fold sorted.
pub fn stratified_folds(labels: &LabelVector, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    let (n0, n1) = labels.class_counts();
    if n0 < folds || n1 < folds {
        return Err(Error::single_class(format!(
            "class counts ({n0}, {n1}) cannot fill {folds} stratified folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(labels.len());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len())
            .filter(|&i| labels.as_slice()[i] == class)
            .collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in order.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}

/// Checks that `sets` are disjoint and cover `0..n` exactly.
pub fn check_partition(sets: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for set in sets {
        for &i in set {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidData(format!("row {i} appears in two folds")));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidData(format!("row {i} is in no fold")));
    }
    Ok(())
}

fn complement(n: usize, holdout: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    holdout.iter().for_each(|&i| mask[i] = false);
    (0..n).filter(|&i| mask[i]).collect()
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    if let Some(v) = grid.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Config(format!(
            "grid values must be finite and > 0, got {v}"
        )));
    }
    Ok(())
}

fn holdout_auc(
    model_weights: (f64, &[f64]),
    pcs: &FeatureMatrix,
    labels: &LabelVector,
    rows: &[usize],
) -> Result<f64> {
    let (bias, w) = model_weights;
    let scores: Vec<f64> = rows
        .iter()
        .map(|&i| bias + pcs.row(i).iter().zip(w).map(|(x, v)| x * v).sum::<f64>())
        .collect();
    Ok(roc_curve(&scores, &labels.select(rows)?)?.auc)
}

fn aggregate(grid: &[f64], cells: Vec<f64>, folds: usize) -> Vec<GridScore> {
    grid.iter()
        .zip(cells.chunks_exact(folds))
        .map(|(&value, aucs)| GridScore {
            value,
            fold_aucs: aucs.to_vec(),
            mean_auc: aucs.iter().sum::<f64>() / folds as f64,
        })
        .collect()
}

/// Random stratified k-fold cross-validation of the l2 strength λ.
pub fn tune_l2(
    dataset: &LabeledDataset,
    transform: &PcaTransform,
    grid: &[f64],
    folds: usize,
    seed: u64,
    solver: &SolverOptions,
) -> Result<TuningResult> {
    validate_grid(grid)?;
    let pcs = transform.apply(&dataset.features)?;
    let labels = &dataset.labels;
    let holdouts = stratified_folds(labels, folds, seed)?;
    check_partition(&holdouts, dataset.len())?;
    let train_sets: Vec<Vec<usize>> = holdouts
        .iter()
        .map(|h| complement(dataset.len(), h))
        .collect();

    let fold_data: Vec<(FeatureMatrix, LabelVector)> = train_sets
        .iter()
        .map(|rows| Ok((pcs.select_rows(rows)?, labels.select(rows)?)))
        .collect::<Result<_>>()?;

    let cells: Vec<f64> = (0..grid.len() * folds)
        .into_par_iter()
        .map(|cell| {
            let (g, f) = (cell / folds, cell % folds);
            let (x, y) = &fold_data[f];
            let m = fit(x, y, &RegularizerSpec::l2(grid[g])?, solver)?;
            holdout_auc((m.bias, &m.weights), &pcs, labels, &holdouts[f])
        })
        .collect::<Result<_>>()?;

    let audit = holdouts
        .iter()
        .zip(&train_sets)
        .enumerate()
        .map(|(f, (h, t))| FoldAudit {
            fold: f,
            holdout_rows: h.len(),
            fit_rows: t.len(),
            anchor_rows: 0,
            leak_free: disjoint(h, t, dataset.len()),
        })
        .collect::<Vec<_>>();
    if audit.iter().any(|a| !a.leak_free) {
        return Err(Error::InvalidData(
            "fold bookkeeping leaked holdout rows".into(),
        ));
    }

    let per_value_scores = aggregate(grid, cells, folds);
    Ok(TuningResult {
        protocol: Protocol::RandomKfold,
        seed,
        grid: grid.to_vec(),
        best_value: select_best(&per_value_scores),
        per_value_scores,
        audit,
        holdout_anchor_excluded: false,
        notes: Vec::new(),
    })
}

fn disjoint(holdout: &[usize], used: &[usize], n: usize) -> bool {
    let mut mask = vec![false; n];
    holdout.iter().for_each(|&i| mask[i] = true);
    used.iter().all(|&i| !mask[i])
}

/// One validation fold for the ni strength: which rows are scored, which
/// rows the joint fit sees, and the row groups that each produce an anchor.
struct NiFold {
    holdout: Vec<usize>,
    fit_rows: Vec<usize>,
    anchor_groups: Vec<Vec<usize>>,
}

fn run_ni_folds(
    dataset: &LabeledDataset,
    transform: &PcaTransform,
    folds: Vec<NiFold>,
    grid: &[f64],
    ridge: AnchorRidge,
    solver: &SolverOptions,
) -> Result<(Vec<GridScore>, Vec<FoldAudit>)> {
    validate_grid(grid)?;
    let n = dataset.len();
    let pcs = transform.apply(&dataset.features)?;
    let labels = &dataset.labels;

    let audit: Vec<FoldAudit> = folds
        .iter()
        .enumerate()
        .map(|(f, fold)| {
            let anchor_rows: Vec<usize> = fold.anchor_groups.concat();
            FoldAudit {
                fold: f,
                holdout_rows: fold.holdout.len(),
                fit_rows: fold.fit_rows.len(),
                anchor_rows: anchor_rows.len(),
                leak_free: disjoint(&fold.holdout, &fold.fit_rows, n)
                    && disjoint(&fold.holdout, &anchor_rows, n),
            }
        })
        .collect();
    if let Some(a) = audit.iter().find(|a| !a.leak_free) {
        return Err(Error::InvalidData(format!(
            "holdout {} leaked into training",
            a.fold
        )));
    }
    for (f, fold) in folds.iter().enumerate() {
        if !labels.select(&fold.holdout)?.has_both_classes() {
            return Err(Error::single_class(format!("holdout {f}")));
        }
    }

    // anchors depend on the fold only, not on α
    let prepared: Vec<(FeatureMatrix, LabelVector, Vec<Vec<f64>>)> = folds
        .par_iter()
        .map(|fold| {
            let anchors = fit_anchors(&pcs, labels, &fold.anchor_groups, ridge, solver)?;
            Ok((
                pcs.select_rows(&fold.fit_rows)?,
                labels.select(&fold.fit_rows)?,
                anchors,
            ))
        })
        .collect::<Result<_>>()?;

    let k = folds.len();
    let cells: Vec<f64> = (0..grid.len() * k)
        .into_par_iter()
        .map(|cell| {
            let (g, f) = (cell / k, cell % k);
            let (x, y, anchors) = &prepared[f];
            let reg = RegularizerSpec::ni(grid[g], anchors.clone())?;
            let m = fit(x, y, &reg, solver)?;
            holdout_auc((m.bias, &m.weights), &pcs, labels, &folds[f].holdout)
        })
        .collect::<Result<_>>()?;

    Ok((aggregate(grid, cells, k), audit))
}

/// Cluster-holdout validation of the ni strength α.
///
/// Each combined cluster is held out in turn. Anchors are fit on the
/// remaining clusters only, the penalty sums over those anchors, and the
/// joint model sees only the remaining rows; the held-out cluster is used
/// solely for scoring.
pub fn tune_ni(
    dataset: &LabeledDataset,
    transform: &PcaTransform,
    partition: &SubpopulationPartition,
    grid: &[f64],
    anchor_ridge: AnchorRidge,
    solver: &SolverOptions,
) -> Result<TuningResult> {
    if partition.len() < 2 {
        return Err(Error::Config(
            "cluster-holdout validation needs at least two clusters".into(),
        ));
    }
    check_partition(&partition.clusters, dataset.len())?;
    let folds = (0..partition.len())
        .map(|h| {
            let rest: Vec<Vec<usize>> = partition
                .clusters
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != h)
                .map(|(_, m)| m.clone())
                .collect();
            let mut fit_rows = rest.concat();
            fit_rows.sort_unstable();
            NiFold {
                holdout: partition.clusters[h].clone(),
                fit_rows,
                anchor_groups: rest,
            }
        })
        .collect();
    let (per_value_scores, audit) =
        run_ni_folds(dataset, transform, folds, grid, anchor_ridge, solver)?;
    Ok(TuningResult {
        protocol: Protocol::ClusterHoldout,
        seed: partition.per_class[0].seed,
        grid: grid.to_vec(),
        best_value: select_best(&per_value_scores),
        per_value_scores,
        audit,
        holdout_anchor_excluded: true,
        notes: Vec::new(),
    })
}

/// Fallback for a single training subpopulation: α is validated on random
/// stratified folds, each fold refitting its one anchor on its own training rows.
pub fn tune_ni_random_folds(
    dataset: &LabeledDataset,
    transform: &PcaTransform,
    grid: &[f64],
    folds: usize,
    seed: u64,
    anchor_ridge: AnchorRidge,
    solver: &SolverOptions,
) -> Result<TuningResult> {
    let holdouts = stratified_folds(&dataset.labels, folds, seed)?;
    check_partition(&holdouts, dataset.len())?;
    let ni_folds = holdouts
        .into_iter()
        .map(|h| {
            let rest = complement(dataset.len(), &h);
            NiFold {
                holdout: h,
                anchor_groups: vec![rest.clone()],
                fit_rows: rest,
            }
        })
        .collect();
    let (per_value_scores, audit) =
        run_ni_folds(dataset, transform, ni_folds, grid, anchor_ridge, solver)?;
    Ok(TuningResult {
        protocol: Protocol::RandomKfold,
        seed,
        grid: grid.to_vec(),
        best_value: select_best(&per_value_scores),
        per_value_scores,
        audit,
        holdout_anchor_excluded: true,
        notes: vec![
            "single training subpopulation: ni reduces to a ridge toward one anchor".into(),
        ],
    })
}
