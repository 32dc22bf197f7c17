//! Brute-force reference solvers and the self-check suite behind
//! `fedsca oracle-check`.
//!
//! The reference solvers enumerate every candidate support set of the
//! simplex-constrained problem and solve the equality-constrained stationarity
//! system on each. They share no code with the sort-based solver they check.

use serde::Serialize;

use crate::adapter_net::{grad_adapters, objective, Batch, ToyFM, ModelDims};
use crate::error::Result;
use crate::numerics::{finite_diff_grad, simplex_project, FlatParams, RngStream};
use crate::server::solve_row;

/// Minimizer of `||w - c||^2` over the simplex by support enumeration.
/// Exponential in `c.len()`; meant for N <= 12 or so.
pub fn kkt_simplex_projection(c: &[f64]) -> Vec<f64> {
    kkt_enumerate(c.len(), |support| {
        // stationarity on the support: w_j = c_j - lambda, sum w = 1
        let sum: f64 = support.iter().map(|&j| c[j]).sum();
        let lambda = (sum - 1.0) / support.len() as f64;
        support.iter().map(|&j| c[j] - lambda).collect()
    }, |w| w.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Minimizer of `sum_j (w_j - m)^2 - alpha * sum_j w_j s_j` over the simplex,
/// solved directly from the objective's KKT conditions.
pub fn kkt_collaboration_row(m: f64, s: &[f64], alpha: f64) -> Vec<f64> {
    kkt_enumerate(s.len(), |support| {
        // 2 (w_j - m) - alpha s_j + lambda = 0 on the support, sum w = 1
        let k = support.len() as f64;
        let sum_rhs: f64 = support.iter().map(|&j| 2.0 * m + alpha * s[j]).sum();
        let lambda = (sum_rhs - 2.0) / k;
        support
            .iter()
            .map(|&j| (2.0 * m + alpha * s[j] - lambda) / 2.0)
            .collect()
    }, |w| {
        w.iter()
            .zip(s)
            .map(|(wj, sj)| (wj - m).powi(2) - alpha * wj * sj)
            .sum()
    })
}

fn kkt_enumerate<S, O>(n: usize, solve_support: S, objective: O) -> Vec<f64>
where
    S: Fn(&[usize]) -> Vec<f64>,
    O: Fn(&[f64]) -> f64,
{
    assert!(n >= 1 && n < 24, "support enumeration needs 1 <= n < 24");
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let on_support = solve_support(&support);
        if on_support.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut w = vec![0.0; n];
        for (&j, &v) in support.iter().zip(&on_support) {
            w[j] = v;
        }
        let value = objective(&w);
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, w));
        }
    }
    best.expect("the vertex supports are always feasible").1
}

/// Outcome of one oracle comparison.
#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub worst_error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sort-based projection vs support enumeration on random vectors.
pub fn check_projection(seed: u64, cases: usize) -> Result<OracleCheck> {
    let mut rng = RngStream::new(seed, 0xA11);
    let mut worst = 0.0f64;
    for k in 0..cases {
        let n = 2 + k % 7;
        let scale = rng.uniform(0.01, 10.0);
        let c: Vec<f64> = rng.gaussian(n).iter().map(|x| x * scale).collect();
        worst = worst.max(max_abs_diff(&simplex_project(&c)?, &kkt_simplex_projection(&c)));
    }
    Ok(OracleCheck {
        name: "simplex projection vs KKT enumeration".into(),
        passed: worst <= 1e-9,
        worst_error: worst,
        tolerance: 1e-9,
        cases,
    })
}

/// Collaboration-row solver vs the objective-level KKT enumeration, with
/// N in 2..=8 and alpha in [0, 100].
pub fn check_collaboration_rows(seed: u64, cases: usize) -> Result<OracleCheck> {
    let mut rng = RngStream::new(seed, 0xB22);
    let mut worst = 0.0f64;
    for k in 0..cases {
        let n = 2 + k % 7;
        let m = rng.uniform(0.0, 1.0);
        let alpha = rng.uniform(0.0, 100.0);
        let s: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w = solve_row(m, &s, alpha)?;
        worst = worst.max(max_abs_diff(&w, &kkt_collaboration_row(m, &s, alpha)));
    }
    Ok(OracleCheck {
        name: "collaboration row vs KKT enumeration".into(),
        passed: worst <= 1e-9,
        worst_error: worst,
        tolerance: 1e-9,
        cases,
    })
}

/// Relative max-norm error between a gradient and its finite-difference
/// estimate: `max|g - fd| / max(max|fd|, tiny)`.
pub fn relative_max_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    max_abs_diff(analytic, numeric) / scale
}

/// A small random model, batch and reference vector for gradient checks.
pub struct GradFixture {
    pub model: ToyFM,
    pub batch: Batch,
    pub theta_ref: FlatParams,
    pub beta: f64,
    pub low_layers: usize,
}

impl GradFixture {
    /// Random fixture with non-zero up-projections so every adapter path is
    /// live, and a reference vector that is not parallel to the low layers.
    pub fn random(seed: u64, blocks: usize, feature_dim: usize, bottleneck_dim: usize) -> Result<Self> {
        let dims = ModelDims {
            blocks,
            feature_dim,
            bottleneck_dim,
        };
        let mut model = ToyFM::new(dims, seed, seed.wrapping_add(1))?;
        let mut rng = RngStream::new(seed, 0xC33);
        let all = model.adapter_params();
        let jittered: Vec<f64> = all
            .values()
            .iter()
            .map(|v| v + 0.05 * rng.standard_normal())
            .collect();
        model.set_adapter_params(&all.with_values(jittered)?)?;

        let batch_size = 3;
        let inputs = (0..batch_size)
            .map(|_| (0..feature_dim).map(|_| rng.uniform(0.0, 1.0)).collect())
            .collect();
        let targets = (0..batch_size)
            .map(|_| {
                (0..feature_dim)
                    .map(|_| if rng.uniform(0.0, 1.0) < 0.3 { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let low_layers = 1 + (seed as usize % blocks.min(2));
        let low = model.low_params(low_layers)?;
        let theta_ref = low.with_values(
            low.values()
                .iter()
                .map(|v| v + 0.1 * rng.standard_normal())
                .collect(),
        )?;
        Ok(GradFixture {
            model,
            batch: Batch::new(inputs, targets)?,
            theta_ref,
            beta: 0.5,
            low_layers,
        })
    }

    /// Relative error of the analytic adapter gradient against central
    /// differences with step `h`.
    pub fn gradient_error(&self, h: f64) -> Result<f64> {
        let analytic = grad_adapters(&self.batch, &self.model, &self.theta_ref, self.beta)?;
        let base = self.model.adapter_params();
        let mut probe_model = self.model.clone();
        let numeric = finite_diff_grad(
            |x| {
                let p = base.with_values(x.to_vec()).expect("finite probe");
                probe_model.set_adapter_params(&p).expect("same manifest");
                objective(&self.batch, &probe_model, &self.theta_ref, self.beta)
                    .unwrap_or(f64::NAN)
            },
            base.values(),
            h,
        )?;
        Ok(relative_max_error(analytic.values(), &numeric))
    }
}

/// Gradient check over `fixtures` random models with K cycling through
/// {2, 4, 6} and feature_dim alternating between 16 and 64.
pub fn check_gradients(seed: u64, fixtures: usize) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for k in 0..fixtures {
        let blocks = [2, 4, 6][k % 3];
        let feature_dim = [16, 64][(k / 3) % 2];
        let fixture = GradFixture::random(seed.wrapping_add(k as u64), blocks, feature_dim, 4)?;
        worst = worst.max(fixture.gradient_error(1e-5)?);
    }
    Ok(OracleCheck {
        name: "adapter gradient vs central differences".into(),
        passed: worst < 1e-4,
        worst_error: worst,
        tolerance: 1e-4,
        cases: fixtures,
    })
}

/// Everything `fedsca oracle-check` runs.
pub fn run_suite(seed: u64) -> Result<Vec<OracleCheck>> {
    Ok(vec![
        check_projection(seed, 1000)?,
        check_collaboration_rows(seed, 1000)?,
        check_gradients(seed, 20)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_oracle_small_cases() {
        assert_eq!(kkt_simplex_projection(&[0.5, -0.5]), vec![1.0, 0.0]);
        let w = kkt_simplex_projection(&[1.0, 1.0, 1.0, 1.0]);
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn collaboration_oracle_small_cases() {
        let w = kkt_collaboration_row(0.5, &[0.0, -1.0], 2.0);
        assert!(max_abs_diff(&w, &[1.0, 0.0]) < 1e-12, "{w:?}");
        let w = kkt_collaboration_row(1.0 / 3.0, &[0.0, -0.2, -0.8], 1.0);
        assert!(max_abs_diff(&w, &[0.5, 0.4, 0.1]) < 1e-12, "{w:?}");
    }
}
