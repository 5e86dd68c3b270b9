//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use nireg::data::{FeatureMatrix, LabelVector, LabeledDataset};
use nireg::model::{RegularizerKind, RegularizerSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| normal(rng)).collect())
        .collect()
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureMatrix {
    FeatureMatrix::from_rows(&gaussian_rows(rng, n, d)).unwrap()
}

/// Random 0/1 labels with both classes present.
pub fn mixed_labels(rng: &mut ChaCha8Rng, n: usize) -> LabelVector {
    assert!(n >= 2);
    let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    y[0] = 0;
    y[1] = 1;
    LabelVector::new(y).unwrap()
}

/// Linearly generated labels with logistic noise, so fits are non-separable.
pub fn logistic_dataset(seed: u64, n: usize, d: usize) -> LabeledDataset {
    let mut r = rng(seed);
    let rows = gaussian_rows(&mut r, n, d);
    let w: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
    let mut y: Vec<u8> = rows
        .iter()
        .map(|x| {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            u8::from(r.random::<f64>() < 1.0 / (1.0 + (-z).exp()))
        })
        .collect();
    y[0] = 0;
    y[1] = 1;
    LabeledDataset::with_row_ids(
        FeatureMatrix::from_rows(&rows).unwrap(),
        LabelVector::new(y).unwrap(),
    )
    .unwrap()
}

/// Negative log-likelihood written term by term from the textbook formula,
/// plus the penalty evaluated from its definition.
pub fn naive_objective(
    bias: f64,
    w: &[f64],
    x: &FeatureMatrix,
    y: &LabelVector,
    reg: &RegularizerSpec,
) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        let z = bias + x.row(i).iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        let p = 1.0 / (1.0 + (-z).exp());
        let yi = f64::from(y.as_slice()[i]);
        total -= yi * p.ln() + (1.0 - yi) * (1.0 - p).ln();
    }
    total + naive_penalty(w, reg)
}

pub fn naive_penalty(w: &[f64], reg: &RegularizerSpec) -> f64 {
    match reg.kind {
        RegularizerKind::None => 0.0,
        RegularizerKind::L2 => reg.lambda * w.iter().map(|v| v * v).sum::<f64>(),
        RegularizerKind::Ni => {
            let mut s = 0.0;
            for anchor in &reg.anchors {
                for (a, b) in w.iter().zip(anchor) {
                    s += (a - b) * (a - b);
                }
            }
            reg.alpha * s
        }
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|j| {
            p[j] = x[j] + h;
            let up = f(&p);
            p[j] = x[j] - h;
            let down = f(&p);
            p[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise `|a − b| / max(1, |a|, |b|)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

/// `(#concordant + ½·#tied) / (n_pos·n_neg)` over every positive/negative pair.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Fraction of rows on which `found` agrees with `truth` under the best
/// relabeling, searched over every permutation of `k` labels.
pub fn best_permutation_agreement(truth: &[usize], found: &[usize], k: usize) -> f64 {
    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }
    permutations(k)
        .into_iter()
        .map(|perm| {
            truth
                .iter()
                .zip(found)
                .filter(|&(&t, &f)| perm[f] == t)
                .count()
        })
        .max()
        .unwrap() as f64
        / truth.len() as f64
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Columns standardized with the population standard deviation.
pub fn standardize(x: &FeatureMatrix) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mean = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(1e-12);
        for i in 0..n {
            out[i][j] = (x.get(i, j) - mean) / sd;
        }
    }
    out
}
