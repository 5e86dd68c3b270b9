//! Logistic regression on principal-component scores with a pluggable
//! penalty on the weight vector (the bias is never penalized).
//!
//! Objective, summed over samples rather than averaged:
//!
//! ```text
//! L(w0, w) = −Σ_i [y_i log p_i + (1 − y_i) log(1 − p_i)] + R(w)
//! p_i      = 1 / (1 + exp(−w0 − w·x_i))
//! R_l2(w)  = λ ‖w‖²
//! R_ni(w)  = α Σ_c ‖w − w_c‖²
//! ```
//!
//! `w_c` are anchor weights fit on each subpopulation separately; the ni
//! penalty pulls the joint weights toward the ones those fits agree on.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::SubpopulationPartition;
use crate::data::{FeatureMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::optim::{minimize, SolverOptions, Termination};
use crate::preprocess::PcaTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    None,
    L2,
    Ni,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub alpha: f64,
    pub anchors: Vec<Vec<f64>>,
}

impl RegularizerSpec {
    pub fn none() -> Self {
        Self {
            kind: RegularizerKind::None,
            lambda: 0.0,
            alpha: 0.0,
            anchors: Vec::new(),
        }
    }

    pub fn l2(lambda: f64) -> Result<Self> {
        let spec = Self {
            kind: RegularizerKind::L2,
            lambda,
            ..Self::none()
        };
        spec.validate(None)?;
        Ok(spec)
    }

    pub fn ni(alpha: f64, anchors: Vec<Vec<f64>>) -> Result<Self> {
        let spec = Self {
            kind: RegularizerKind::Ni,
            alpha,
            anchors,
            ..Self::none()
        };
        spec.validate(None)?;
        Ok(spec)
    }

    /// Checks strengths, anchor count and (when given) anchor length.
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        match self.kind {
            RegularizerKind::None => Ok(()),
            RegularizerKind::L2 if !(self.lambda > 0.0 && self.lambda.is_finite()) => {
                Err(Error::Config(format!(
                    "l2 requires a finite lambda > 0, got {}",
                    self.lambda
                )))
            }
            RegularizerKind::L2 => Ok(()),
            RegularizerKind::Ni => {
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return Err(Error::Config(format!(
                        "ni requires a finite alpha > 0, got {}",
                        self.alpha
                    )));
                }
                if self.anchors.is_empty() {
                    return Err(Error::Config("ni requires at least one anchor".into()));
                }
                let len = dim.unwrap_or(self.anchors[0].len());
                if let Some(a) = self.anchors.iter().find(|a| a.len() != len) {
                    return Err(Error::DimensionMismatch {
                        expected: len,
                        actual: a.len(),
                    });
                }
                if self.anchors.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidData("non-finite anchor weight".into()));
                }
                Ok(())
            }
        }
    }

    /// `R(w)`.
    pub fn penalty(&self, w: &[f64]) -> f64 {
        match self.kind {
            RegularizerKind::None => 0.0,
            RegularizerKind::L2 => self.lambda * w.iter().map(|v| v * v).sum::<f64>(),
            RegularizerKind::Ni => {
                self.alpha
                    * self
                        .anchors
                        .iter()
                        .map(|a| w.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                        .sum::<f64>()
            }
        }
    }

    /// Adds `∇R(w)` into `grad`.
    pub fn add_gradient(&self, w: &[f64], grad: &mut [f64]) {
        match self.kind {
            RegularizerKind::None => {}
            RegularizerKind::L2 => {
                for (g, v) in grad.iter_mut().zip(w) {
                    *g += 2.0 * self.lambda * v;
                }
            }
            RegularizerKind::Ni => {
                for a in &self.anchors {
                    for ((g, v), c) in grad.iter_mut().zip(w).zip(a) {
                        *g += 2.0 * self.alpha * (v - c);
                    }
                }
            }
        }
    }

    /// Mean of the anchors (zero-length when there are none).
    pub fn anchor_mean(&self) -> Vec<f64> {
        let Some(first) = self.anchors.first() else {
            return Vec::new();
        };
        let mut mean = vec![0.0; first.len()];
        for a in &self.anchors {
            mean.iter_mut().zip(a).for_each(|(m, v)| *m += v);
        }
        let c = self.anchors.len() as f64;
        mean.iter_mut().for_each(|m| *m /= c);
        mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub iterations: usize,
    pub final_loss: f64,
    pub gradient_norm: f64,
    pub termination: Termination,
    /// Gradient tolerance the fit ran with.
    pub gtol: f64,
}

impl TrainingMeta {
    fn untrained() -> Self {
        Self {
            iterations: 0,
            final_loss: 0.0,
            gradient_norm: 0.0,
            termination: Termination::Converged,
            gtol: 0.0,
        }
    }

    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub bias: f64,
    pub weights: Vec<f64>,
    pub regularizer: RegularizerSpec,
    pub transform_id: String,
    pub training_meta: TrainingMeta,
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_shapes(weights: &[f64], pcs: &FeatureMatrix, labels: Option<&LabelVector>) -> Result<()> {
    if pcs.cols() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            actual: pcs.cols(),
        });
    }
    if let Some(y) = labels {
        if y.len() != pcs.rows() {
            return Err(Error::DimensionMismatch {
                expected: pcs.rows(),
                actual: y.len(),
            });
        }
    }
    Ok(())
}

/// Cross-entropy summed over samples; optionally accumulates the gradient
/// (bias first) into `grad`, which must be zeroed by the caller.
fn data_term(
    bias: f64,
    w: &[f64],
    pcs: &FeatureMatrix,
    labels: &LabelVector,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    // Neumaier-compensated sum keeps the objective's rounding floor low
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (i, row) in pcs.iter_rows().enumerate() {
        let z = bias + row.iter().zip(w).map(|(x, v)| x * v).sum::<f64>();
        let y = labels.value(i);
        let term = if y == 1.0 { softplus(-z) } else { softplus(z) };
        let t = sum + term;
        comp += if sum.abs() >= term.abs() {
            (sum - t) + term
        } else {
            (term - t) + sum
        };
        sum = t;
        if let Some(g) = grad.as_deref_mut() {
            let r = sigmoid(z) - y;
            g[0] += r;
            for (gj, x) in g[1..].iter_mut().zip(row) {
                *gj += r * x;
            }
        }
    }
    sum + comp
}

impl LogisticModel {
    /// Untrained model with the given parameters.
    pub fn new(bias: f64, weights: Vec<f64>, regularizer: RegularizerSpec) -> Self {
        Self {
            bias,
            weights,
            regularizer,
            transform_id: String::new(),
            training_meta: TrainingMeta::untrained(),
        }
    }

    pub fn with_transform(mut self, transform: &PcaTransform) -> Self {
        self.transform_id = transform.id();
        self
    }

    /// Logits `w0 + w·x_i`.
    pub fn decision_function(&self, pcs: &FeatureMatrix) -> Result<Vec<f64>> {
        check_shapes(&self.weights, pcs, None)?;
        Ok(pcs
            .iter_rows()
            .map(|row| {
                self.bias
                    + row
                        .iter()
                        .zip(&self.weights)
                        .map(|(x, v)| x * v)
                        .sum::<f64>()
            })
            .collect())
    }

    pub fn predict_proba(&self, pcs: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self
            .decision_function(pcs)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    pub fn loss(&self, pcs: &FeatureMatrix, labels: &LabelVector) -> Result<f64> {
        check_shapes(&self.weights, pcs, Some(labels))?;
        Ok(data_term(self.bias, &self.weights, pcs, labels, None)
            + self.regularizer.penalty(&self.weights))
    }

    /// `(∂L/∂w0, ∂L/∂w)`.
    pub fn gradient(&self, pcs: &FeatureMatrix, labels: &LabelVector) -> Result<(f64, Vec<f64>)> {
        check_shapes(&self.weights, pcs, Some(labels))?;
        let mut g = vec![0.0; self.weights.len() + 1];
        data_term(self.bias, &self.weights, pcs, labels, Some(&mut g));
        self.regularizer.add_gradient(&self.weights, &mut g[1..]);
        let bias_grad = g.remove(0);
        Ok((bias_grad, g))
    }

    /// Short content hash of the serialized model.
    pub fn id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model serializes");
        Sha256::digest(&bytes)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.regularizer.validate(Some(m.weights.len()))?;
        Ok(m)
    }
}

pub fn predict_proba(model: &LogisticModel, pcs: &FeatureMatrix) -> Result<Vec<f64>> {
    model.predict_proba(pcs)
}

pub fn loss(model: &LogisticModel, pcs: &FeatureMatrix, labels: &LabelVector) -> Result<f64> {
    model.loss(pcs, labels)
}

pub fn gradient(
    model: &LogisticModel,
    pcs: &FeatureMatrix,
    labels: &LabelVector,
) -> Result<(f64, Vec<f64>)> {
    model.gradient(pcs, labels)
}

/// Maximum-likelihood fit under `reg`, cold-started at zero.
pub fn fit(
    pcs: &FeatureMatrix,
    labels: &LabelVector,
    reg: &RegularizerSpec,
    opts: &SolverOptions,
) -> Result<LogisticModel> {
    let k = pcs.cols();
    check_shapes(&vec![0.0; k], pcs, Some(labels))?;
    reg.validate(Some(k))?;
    if !labels.has_both_classes() {
        return Err(Error::SingleClass { context: None });
    }

    // α Σ_c ‖w − w_c‖² = α C ‖w − w̄‖² + const; optimizing the centred form
    // keeps the large constant out of the line search's rounding floor.
    let centre = reg.anchor_mean();
    let pull = reg.alpha * reg.anchors.len() as f64;
    let objective = |x: &[f64], g: &mut [f64]| {
        g.iter_mut().for_each(|v| *v = 0.0);
        let (bias, w) = (x[0], &x[1..]);
        let mut f = data_term(bias, w, pcs, labels, Some(g));
        match reg.kind {
            RegularizerKind::Ni => {
                for ((gj, v), c) in g[1..].iter_mut().zip(w).zip(&centre) {
                    f += pull * (v - c) * (v - c);
                    *gj += 2.0 * pull * (v - c);
                }
            }
            _ => {
                f += reg.penalty(w);
                reg.add_gradient(w, &mut g[1..]);
            }
        }
        f
    };
    let min = minimize(objective, vec![0.0; k + 1], opts)?;

    let mut model = LogisticModel::new(min.x[0], min.x[1..].to_vec(), reg.clone());
    if model.weights.iter().any(|v| !v.is_finite()) || !min.value.is_finite() {
        return Err(Error::NonFiniteLoss {
            iterations: min.iterations,
        });
    }
    model.training_meta = TrainingMeta {
        iterations: min.iterations,
        final_loss: model.loss(pcs, labels)?,
        gradient_norm: min.gradient_norm,
        termination: min.termination,
        gtol: opts.gtol,
    };
    Ok(model)
}

/// Ridge strength used for the per-subpopulation anchor fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorRidge {
    /// The same λ for every cluster.
    Fixed(f64),
    /// λ = factor × cluster size.
    PerSample(f64),
}

impl Default for AnchorRidge {
    fn default() -> Self {
        AnchorRidge::PerSample(1e-4)
    }
}

impl AnchorRidge {
    pub fn strength(&self, cluster_size: usize) -> f64 {
        match *self {
            AnchorRidge::Fixed(l) => l,
            AnchorRidge::PerSample(f) => f * cluster_size as f64,
        }
    }

    fn regularizer(&self, cluster_size: usize) -> Result<RegularizerSpec> {
        let l = self.strength(cluster_size);
        if l == 0.0 {
            Ok(RegularizerSpec::none())
        } else {
            RegularizerSpec::l2(l)
        }
    }
}

/// Fits one anchor per row-index set. Clusters are fit concurrently; the
/// result order follows `clusters`.
pub fn fit_anchors(
    pcs: &FeatureMatrix,
    labels: &LabelVector,
    clusters: &[Vec<usize>],
    ridge: AnchorRidge,
    opts: &SolverOptions,
) -> Result<Vec<Vec<f64>>> {
    clusters
        .par_iter()
        .enumerate()
        .map(|(c, rows)| {
            let y = labels.select(rows)?;
            if !y.has_both_classes() {
                return Err(Error::single_class(format!("cluster {c}")));
            }
            let x = pcs.select_rows(rows)?;
            Ok(fit(&x, &y, &ridge.regularizer(rows.len())?, opts)?.weights)
        })
        .collect()
}

/// One anchor weight vector per combined cluster of `partition`.
pub fn fit_cluster_anchors(
    pcs: &FeatureMatrix,
    labels: &LabelVector,
    partition: &SubpopulationPartition,
    ridge: AnchorRidge,
    opts: &SolverOptions,
) -> Result<Vec<Vec<f64>>> {
    fit_anchors(pcs, labels, &partition.clusters, ridge, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (FeatureMatrix, LabelVector) {
        let x = FeatureMatrix::from_rows(&[
            vec![1.0, 0.5],
            vec![-1.0, 0.2],
            vec![0.3, -0.7],
            vec![-0.4, 1.1],
            vec![2.0, 0.1],
            vec![-1.5, -0.3],
        ])
        .unwrap();
        (x, LabelVector::new(vec![1, 0, 1, 0, 0, 1]).unwrap())
    }

    #[test]
    fn zero_model_is_half() {
        let (x, _) = tiny();
        let m = LogisticModel::new(0.0, vec![0.0, 0.0], RegularizerSpec::none());
        assert!(m.predict_proba(&x).unwrap().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn sigmoid_of_ln3() {
        let x = FeatureMatrix::from_rows(&[vec![3f64.ln(), 0.0]]).unwrap();
        let m = LogisticModel::new(0.0, vec![1.0, 0.0], RegularizerSpec::none());
        assert!((m.predict_proba(&x).unwrap()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let x = FeatureMatrix::from_rows(&[vec![-1000.0]]).unwrap();
        let m = LogisticModel::new(0.0, vec![1.0], RegularizerSpec::none());
        let p = m.predict_proba(&x).unwrap()[0];
        assert!(p.is_finite() && p >= 0.0);
        let l = m.loss(&x, &LabelVector::new(vec![1]).unwrap()).unwrap();
        assert!((l - 1000.0).abs() < 1e-12);
        let l = m.loss(&x, &LabelVector::new(vec![0]).unwrap()).unwrap();
        assert!(l.is_finite() && (0.0..1e-300).contains(&l));
    }

    #[test]
    fn balanced_zero_loss_is_n_ln2() {
        let (x, y) = tiny();
        let m = LogisticModel::new(0.0, vec![0.0, 0.0], RegularizerSpec::none());
        assert!((m.loss(&x, &y).unwrap() - 6.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ni_penalty_vanishes_at_single_anchor() {
        let w = vec![0.3, -1.2];
        let reg = RegularizerSpec::ni(5.0, vec![w.clone()]).unwrap();
        assert_eq!(reg.penalty(&w), 0.0);
        let reg = RegularizerSpec::ni(5.0, vec![vec![1.0, 2.0], vec![3.0, -2.0]]).unwrap();
        let mut g = vec![0.0; 2];
        reg.add_gradient(&reg.anchor_mean(), &mut g);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn regularizer_validation() {
        assert!(RegularizerSpec::l2(0.0).is_err());
        assert!(RegularizerSpec::ni(1.0, vec![]).is_err());
        assert!(RegularizerSpec::ni(0.0, vec![vec![1.0]]).is_err());
        assert!(RegularizerSpec::ni(1.0, vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        let (x, y) = tiny();
        let reg = RegularizerSpec::ni(1.0, vec![vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(fit(&x, &y, &reg, &SolverOptions::default()).is_err());
    }

    #[test]
    fn shape_errors() {
        let (x, y) = tiny();
        let m = LogisticModel::new(0.0, vec![0.0; 3], RegularizerSpec::none());
        assert!(matches!(
            m.predict_proba(&x),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(m.loss(&x, &y).is_err());
        let m = LogisticModel::new(0.0, vec![0.0; 2], RegularizerSpec::none());
        assert!(m
            .gradient(&x, &LabelVector::new(vec![1, 0]).unwrap())
            .is_err());
    }

    #[test]
    fn single_class_rejected() {
        let (x, _) = tiny();
        let y = LabelVector::new(vec![1; 6]).unwrap();
        assert!(matches!(
            fit(&x, &y, &RegularizerSpec::none(), &SolverOptions::default()),
            Err(Error::SingleClass { .. })
        ));
    }

    #[test]
    fn fit_converges_and_meta_recorded() {
        let (x, y) = tiny();
        let m = fit(
            &x,
            &y,
            &RegularizerSpec::l2(0.1).unwrap(),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(m.training_meta.converged());
        assert!(m.training_meta.gradient_norm <= 1e-6);
        let (gb, gw) = m.gradient(&x, &y).unwrap();
        let norm = (gb * gb + gw.iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!(norm <= 1e-6);
        assert!((m.training_meta.final_loss - m.loss(&x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_anchor_is_l2_fit() {
        let (x, y) = tiny();
        let opts = SolverOptions::default();
        let anchors =
            fit_anchors(&x, &y, &[(0..6).collect()], AnchorRidge::Fixed(0.3), &opts).unwrap();
        let direct = fit(&x, &y, &RegularizerSpec::l2(0.3).unwrap(), &opts).unwrap();
        assert_eq!(anchors[0], direct.weights);
    }

    #[test]
    fn anchor_single_class_cluster_named() {
        let (x, y) = tiny();
        let err = fit_anchors(
            &x,
            &y,
            &[vec![0, 1], vec![0, 2]],
            AnchorRidge::default(),
            &SolverOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("cluster 1"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let (x, y) = tiny();
        let reg = RegularizerSpec::ni(0.5, vec![vec![0.1, 0.2], vec![-0.3, 0.4]]).unwrap();
        let m = fit(&x, &y, &reg, &SolverOptions::default()).unwrap();
        let back = LogisticModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.id(), m.id());
    }
}
