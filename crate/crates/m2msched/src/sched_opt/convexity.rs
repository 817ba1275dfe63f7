//! Numeric verification that each subset subproblem is concave.
//!
//! Per class `i` the Hessian of `beta_i log U_i(l_i(alpha))` is the rank-one
//! outer product
//!
//! ```text
//! H^i = -beta_i a_i^2 theta_i / (1+theta_i)^2 * zeta_i zeta_i^T
//! ```
//!
//! so every first-order principal minor is strictly negative and every
//! higher-order principal minor vanishes. Both facts are checked at random
//! simplex points (and at the vertices), along with a finite-difference
//! Hessian of the summed objective whose eigenvalues must be non-positive.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_distr::Distribution;

use crate::model::{ClassSet, QosClass};
use crate::queueing::LatencyProvider;
use crate::utility::sigmoid;

use super::io::subset_zeta;
use super::kkt::{KktOptions, KktProblem, KktRow, SolveError};

#[derive(Debug, Clone)]
pub struct ConvexityReport {
    pub subset: ClassSet,
    pub trials: usize,
    /// Human-readable description of each violated check; empty means the
    /// negative semi-definiteness held everywhere.
    pub violations: Vec<String>,
}

impl ConvexityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check the subproblem on `subset` at `trials` random points of its simplex
/// plus the vertices and the barycenter.
pub fn verify_convexity(
    classes: &[QosClass],
    provider: &dyn LatencyProvider,
    subset: ClassSet,
    trials: usize,
    seed: u64,
) -> Result<ConvexityReport, SolveError> {
    assert!(trials >= 1);
    let (members, zeta) = subset_zeta(classes, provider, subset, &KktOptions::default())?;
    let r = members.len();
    let problem = KktProblem {
        rows: members
            .iter()
            .map(|&i| KktRow {
                a: classes[i].a,
                b: classes[i].b,
                beta: classes[i].beta,
                psi: 0.0,
                weight: 1.0,
            })
            .collect(),
        zeta: zeta.clone(),
    };

    let mut points: Vec<Vec<f64>> = Vec::new();
    points.push(vec![1.0 / r as f64; r]);
    for v in 0..r {
        let mut one_hot = vec![0.0; r];
        one_hot[v] = 1.0;
        points.push(one_hot);
    }
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let dir = rand_distr::Dirichlet::new(vec![1.0; r]).unwrap();
    while points.len() < trials + r + 1 {
        points.push(dir.sample(&mut rng));
    }

    let mut violations = Vec::new();
    for (pt_idx, alpha) in points.iter().enumerate() {
        // full latencies at this point
        let latencies: Vec<f64> = zeta
            .iter()
            .map(|zr| zr.iter().zip(alpha).map(|(z, a)| z * a).sum())
            .collect();

        for (n, &i) in members.iter().enumerate() {
            let c = &classes[i];
            let x = c.a * (latencies[n] - c.b);
            let scale = -c.beta * c.a * c.a * sigmoid(x) * sigmoid(-x);
            let h = DMatrix::from_fn(r, r, |j, k| scale * zeta[n][j] * zeta[n][k]);
            let hmax = h.amax();

            // first-order principal minors strictly negative
            for j in 0..r {
                if !(h[(j, j)] < 0.0) {
                    violations.push(format!(
                        "point {pt_idx}, class {}: diagonal entry {} not negative",
                        i + 1,
                        h[(j, j)]
                    ));
                }
            }
            // higher-order principal minors vanish (rank one)
            for mask in 1u32..(1 << r) {
                let k = mask.count_ones() as usize;
                if k < 2 {
                    continue;
                }
                let idx: Vec<usize> = (0..r).filter(|&j| mask & (1 << j) != 0).collect();
                let sub = DMatrix::from_fn(k, k, |p, q| h[(idx[p], idx[q])]);
                let det = sub.determinant();
                let tol = 1e-9 * hmax.powi(k as i32).max(f64::MIN_POSITIVE);
                if det.abs() > tol {
                    violations.push(format!(
                        "point {pt_idx}, class {}: order-{k} principal minor {det:.3e} beyond {tol:.3e}",
                        i + 1
                    ));
                }
            }
        }

        // finite-difference Hessian of the full objective must be NSD
        let h = 1e-5;
        let mut num = DMatrix::zeros(r, r);
        for j in 0..r {
            for k in 0..r {
                let mut pp = alpha.clone();
                let mut pm = alpha.clone();
                let mut mp = alpha.clone();
                let mut mm = alpha.clone();
                pp[j] += h;
                pp[k] += h;
                pm[j] += h;
                pm[k] -= h;
                mp[j] -= h;
                mp[k] += h;
                mm[j] -= h;
                mm[k] -= h;
                num[(j, k)] = (problem.objective(&pp) - problem.objective(&pm)
                    - problem.objective(&mp)
                    + problem.objective(&mm))
                    / (4.0 * h * h);
            }
        }
        let sym = (&num + num.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(sym);
        let max_eig = eig.eigenvalues.max();
        if max_eig > 1e-6 {
            violations.push(format!(
                "point {pt_idx}: numeric Hessian eigenvalue {max_eig:.3e} > 1e-6"
            ));
        }
    }

    Ok(ConvexityReport {
        subset,
        trials: points.len(),
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queueing::PreemptiveProvider;

    #[test]
    fn paper_scenario_has_no_violations() {
        let t = crate::scenario::paper_four_class(0.03);
        let st = t.as_station();
        let p = PreemptiveProvider { station: &st };
        let rep = verify_convexity(&t.classes, &p, ClassSet::full(4), 25, 42).unwrap();
        assert!(rep.passed(), "violations: {:?}", rep.violations);
    }

    #[test]
    fn pair_subset_with_higher_context_also_passes() {
        let t = crate::scenario::paper_four_class(0.02);
        let st = t.as_station();
        let p = PreemptiveProvider { station: &st };
        let rep =
            verify_convexity(&t.classes, &p, ClassSet::from_indices([0, 1]), 10, 7).unwrap();
        assert!(rep.passed(), "violations: {:?}", rep.violations);
    }
}
