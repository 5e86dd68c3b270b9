//! Seeded generator of datasets made of several subpopulations.
//!
//! Each environment (a latent variable the learner never sees) shares the
//! same invariant class signal, flips the sign of a spurious class signal
//! according to `spurious_signs`, and shifts a block of label-free noise
//! coordinates by its own offset so the environments are clusterable.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, LabelVector, LabeledDataset, SAMPLE_ID_COLUMN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_per_env: usize,
    pub n_envs: usize,
    pub d_inv: usize,
    pub d_sp: usize,
    pub d_noise: usize,
    pub mu_inv: f64,
    pub mu_sp: f64,
    /// `±1` per environment.
    pub spurious_signs: Vec<i8>,
    pub env_offset: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Four environments, the last with its spurious signal reversed.
    pub fn acceptance(seed: u64) -> Self {
        Self {
            n_per_env: 500,
            n_envs: 4,
            d_inv: 4,
            d_sp: 4,
            d_noise: 8,
            mu_inv: 1.0,
            mu_sp: 2.0,
            spurious_signs: vec![1, 1, 1, -1],
            env_offset: 8.0,
            noise_sd: 1.0,
            seed,
        }
    }

    /// Single environment, no spurious signal, no offsets.
    pub fn iid(seed: u64) -> Self {
        Self {
            n_envs: 1,
            mu_sp: 0.0,
            spurious_signs: vec![1],
            env_offset: 0.0,
            ..Self::acceptance(seed)
        }
    }

    pub fn dim(&self) -> usize {
        self.d_inv + self.d_sp + self.d_noise
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_per_env == 0 || self.n_envs == 0 || self.d_inv == 0 || self.d_sp == 0 {
            return bad("n_per_env, n_envs, d_inv and d_sp must be at least 1".into());
        }
        for (name, v) in [
            ("mu_inv", self.mu_inv),
            ("mu_sp", self.mu_sp),
            ("env_offset", self.env_offset),
            ("noise_sd", self.noise_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.spurious_signs.len() != self.n_envs {
            return bad(format!(
                "spurious_signs has {} entries for {} environments",
                self.spurious_signs.len(),
                self.n_envs
            ));
        }
        if self.spurious_signs.iter().any(|&s| s != 1 && s != -1) {
            return bad("spurious_signs entries must be +1 or -1".into());
        }
        Ok(())
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.d_inv)
            .map(|j| format!("inv{j}"))
            .chain((0..self.d_sp).map(|j| format!("sp{j}")))
            .chain((0..self.d_noise).map(|j| format!("noise{j}")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: LabeledDataset,
    /// Planted environment of each row; for evaluation only.
    pub env_labels: Vec<usize>,
}

impl SyntheticDataset {
    pub fn env_rows(&self, env: usize) -> Vec<usize> {
        (0..self.env_labels.len())
            .filter(|&i| self.env_labels[i] == env)
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        Ok(Self {
            dataset: self.dataset.subset(&rows)?,
            env_labels: rows.iter().map(|&i| self.env_labels[i]).collect(),
        })
    }

    /// `sample_id,env` with a header.
    pub fn write_envs_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("{SAMPLE_ID_COLUMN},env\n");
        for (id, env) in self.dataset.sample_ids.iter().zip(&self.env_labels) {
            out.push_str(&format!("{id},{env}\n"));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Offsets of length `env_offset`; orthogonal to each other while the
/// noise block has room for it.
fn environment_offsets(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = config.d_noise;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(config.n_envs);
    for e in 0..config.n_envs {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        if e < d {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * config.env_offset).collect())
        .collect()
}

/// Draws the dataset. Rows are grouped by environment; each environment
/// uses its own RNG stream derived from the seed.
pub fn generate(config: &GeneratorConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut offset_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let offsets = environment_offsets(config, &mut offset_rng);

    let d = config.dim();
    let n = config.n_per_env * config.n_envs;
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut env_labels = Vec::with_capacity(n);
    let sd = config.noise_sd;
    for (e, offset) in offsets.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(e as u64 + 1);
        let sign = f64::from(config.spurious_signs[e]);
        for _ in 0..config.n_per_env {
            let y: u8 = rng.random_bool(0.5).into();
            let s = 2.0 * f64::from(y) - 1.0;
            for _ in 0..config.d_inv {
                values.push(s * config.mu_inv + sd * normal(&mut rng));
            }
            for _ in 0..config.d_sp {
                values.push(s * config.mu_sp * sign + sd * normal(&mut rng));
            }
            for delta in offset {
                values.push(delta + sd * normal(&mut rng));
            }
            labels.push(y);
            env_labels.push(e);
        }
    }

    let features = FeatureMatrix::new(n, d, values)?.with_feature_names(config.feature_names())?;
    Ok(SyntheticDataset {
        dataset: LabeledDataset::with_row_ids(features, LabelVector::new(labels)?)?,
        env_labels,
    })
}

/// Environment `holdout_env` as the test set, every other environment as training.
pub fn ood_protocol(
    config: &GeneratorConfig,
    holdout_env: usize,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    config.validate()?;
    if holdout_env >= config.n_envs {
        return Err(Error::IndexOutOfRange {
            index: holdout_env,
            len: config.n_envs,
        });
    }
    let held_sign = config.spurious_signs[holdout_env];
    let differs = config
        .spurious_signs
        .iter()
        .enumerate()
        .any(|(e, &s)| e != holdout_env && s != held_sign);
    if config.n_envs > 1 && !differs && config.mu_sp > 0.0 {
        return Err(Error::Config(format!(
            "held-out environment {holdout_env} shares its spurious sign with every training environment"
        )));
    }
    let full = generate(config)?;
    let test = full.env_rows(holdout_env);
    if test.len() == full.env_labels.len() {
        return Err(Error::Config(
            "need at least two environments for an OOD split".into(),
        ));
    }
    let train: Vec<usize> = (0..full.env_labels.len())
        .filter(|&i| full.env_labels[i] != holdout_env)
        .collect();
    Ok((full.subset(&train)?, full.subset(&test)?))
}
