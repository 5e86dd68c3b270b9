//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Fully deterministic: no randomness, fixed evaluation order. Used for every
//! logistic-regression fit in the crate.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop once the Euclidean gradient norm is at most this.
    pub gtol: f64,
    pub max_iter: usize,
    /// Number of stored `(s, y)` correction pairs.
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub armijo_c1: f64,
    pub max_backtracks: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            gtol: 1e-6,
            max_iter: 1000,
            memory: 10,
            armijo_c1: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No step along the steepest-descent direction lowers the objective
    /// beyond its rounding floor.
    LineSearchStalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct History {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl History {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        // curvature condition; skip pairs that would break positive definiteness
        if sy <= 1e-12 * norm(&s) * norm(&y) || sy <= 0.0 {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion: returns `−H·g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

/// Rounding floor of an objective value.
fn noise_floor(f: f64) -> f64 {
    16.0 * f64::EPSILON * f.abs().max(1.0)
}

/// Minimizes `f`, which returns the objective and writes the gradient.
///
/// A trial step is accepted when it satisfies the Armijo condition, or, once
/// the objective change is below its rounding floor, when it still shrinks
/// the gradient norm. Accepted steps are therefore monotone up to that floor.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &SolverOptions) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return Err(Error::NonFiniteLoss { iterations: 0 });
    }

    let mut history = History {
        pairs: VecDeque::with_capacity(opts.memory),
        capacity: opts.memory.max(1),
    };
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;

    loop {
        let gnorm = norm(&g);
        if gnorm <= opts.gtol {
            return Ok(Minimum {
                x,
                value: fx,
                gradient_norm: gnorm,
                iterations,
                termination: Termination::Converged,
            });
        }
        if iterations >= opts.max_iter {
            return Ok(Minimum {
                x,
                value: fx,
                gradient_norm: gnorm,
                iterations,
                termination: Termination::MaxIterations,
            });
        }

        let mut accepted = None;
        // first try the quasi-Newton direction, then fall back to steepest descent
        for attempt in 0..2 {
            let steepest = attempt == 1 || history.pairs.is_empty();
            if attempt == 1 && history.pairs.is_empty() {
                break;
            }
            let (d, mut step) = if steepest {
                (
                    g.iter().map(|v| -v).collect::<Vec<_>>(),
                    (1.0 / gnorm).min(1.0),
                )
            } else {
                (history.direction(&g), 1.0)
            };
            let slope = dot(&g, &d);
            if slope.is_nan() || slope >= 0.0 {
                history.pairs.clear();
                continue;
            }
            for _ in 0..=opts.max_backtracks {
                x_new
                    .iter_mut()
                    .zip(&x)
                    .zip(&d)
                    .for_each(|((xn, xi), di)| *xn = xi + step * di);
                let f_trial = f(&x_new, &mut g_new);
                if f_trial.is_finite() {
                    let armijo = f_trial <= fx + opts.armijo_c1 * step * slope;
                    let at_floor = (f_trial - fx).abs() <= noise_floor(fx) && norm(&g_new) < gnorm;
                    if armijo || at_floor {
                        accepted = Some(f_trial);
                        break;
                    }
                }
                step *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            history.pairs.clear();
            if steepest {
                break;
            }
        }

        let Some(f_next) = accepted else {
            if !fx.is_finite() {
                return Err(Error::NonFiniteLoss { iterations });
            }
            return Ok(Minimum {
                x,
                value: fx,
                gradient_norm: gnorm,
                iterations,
                termination: Termination::LineSearchStalled,
            });
        };
        debug_assert!(
            f_next <= fx + noise_floor(fx),
            "objective increased: {fx} -> {f_next}"
        );

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        history.push(s, y);
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_next;
        iterations += 1;
    }
}
