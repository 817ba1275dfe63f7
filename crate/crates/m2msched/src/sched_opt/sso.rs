//! Single-stage optimizer: maximize the system utility directly over the
//! fractions of time spent under each of the `R!` priority orders.
//!
//! The stationarity system over all `R!` variables is massively degenerate
//! (latencies live in an R-dimensional space), so the optimum sits on a low
//! dimensional face of the simplex. Projected gradient ascent identifies
//! that face; the Newton active-set solver then polishes the support to the
//! full KKT tolerance. Two restarts from random interior points verify the
//! optimum; the best of the three runs is returned.

use rand::SeedableRng;
use rand_distr::Distribution;

use crate::model::{enumerate_priority_orders, QosClass, TimeSharingPolicy};
use crate::queueing::{LatencyMatrix, LatencyProvider};

use super::io::OptimizerReport;
use super::kkt::{solve_kkt, KktOptions, KktProblem, KktRow, SolveError};

/// Hard cap on the single-stage variable count: beyond this the subset
/// recursion is the only supported path.
pub const SSO_MAX_CLASSES: usize = 6;

pub struct SsoSolve {
    pub policy: TimeSharingPolicy,
    pub report: OptimizerReport,
}

pub fn solve_sso(
    classes: &[QosClass],
    provider: &dyn LatencyProvider,
    opts: &KktOptions,
) -> Result<SsoSolve, SolveError> {
    let r = classes.len();
    if r > SSO_MAX_CLASSES {
        return Err(SolveError::TooManyClasses {
            got: r,
            max: SSO_MAX_CLASSES,
        });
    }
    let orders = enumerate_priority_orders(r).expect("guarded above");

    if r == 1 {
        let l = provider.sojourn(0, crate::model::ClassSet::EMPTY)?;
        let objective = crate::utility::system_log_utility(classes, &[l]);
        return Ok(SsoSolve {
            policy: TimeSharingPolicy::new(1, vec![1.0]).unwrap(),
            report: OptimizerReport {
                latencies: vec![l],
                objective,
                iterations: 0,
                residual: 0.0,
                active_constraints: vec![],
                subproblems_solved: 1,
                memo_hits: 0,
            },
        });
    }

    let matrix = LatencyMatrix::build(provider, &orders)?;
    let n = orders.len();
    let problem = KktProblem {
        rows: classes
            .iter()
            .map(|c| KktRow {
                a: c.a,
                b: c.b,
                beta: c.beta,
                psi: 0.0,
                weight: 1.0,
            })
            .collect(),
        zeta: matrix.values.clone(),
    };

    let uniform = vec![1.0 / n as f64; n];
    let mut best: Option<(Vec<f64>, f64, f64, usize, Vec<usize>)> = None;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0x550);
    for attempt in 0..3 {
        let start = if attempt == 0 {
            uniform.clone()
        } else {
            rand_distr::Dirichlet::new(vec![1.0; n])
                .unwrap()
                .sample(&mut rng)
        };
        match run_from(&problem, start, opts) {
            Ok(run) => {
                let better = match &best {
                    None => true,
                    Some((_, obj, ..)) => run.1 > *obj,
                };
                if better {
                    best = Some(run);
                }
            }
            Err(e) => {
                if attempt == 2 && best.is_none() {
                    return Err(e);
                }
            }
        }
    }
    let (gamma, objective, residual, iterations, pinned) = best.expect("at least one run");

    let latencies: Vec<f64> = matrix
        .values
        .iter()
        .map(|row| row.iter().zip(&gamma).map(|(l, g)| l * g).sum())
        .collect();
    Ok(SsoSolve {
        policy: TimeSharingPolicy::new(r, gamma).expect("projected onto the simplex"),
        report: OptimizerReport {
            latencies,
            objective,
            iterations,
            residual,
            active_constraints: pinned,
            subproblems_solved: 1,
            memo_hits: 0,
        },
    })
}

type Run = (Vec<f64>, f64, f64, usize, Vec<usize>);

fn run_from(p: &KktProblem, start: Vec<f64>, opts: &KktOptions) -> Result<Run, SolveError> {
    let n = p.num_vars();
    let (gamma, pg_iters) = projected_gradient(p, start);

    // hand the support over to the Newton active-set polish
    let support_eps = 1e-9;
    let pinned: Vec<usize> = (0..n).filter(|&i| gamma[i] <= support_eps).collect();
    if pinned.len() == n {
        return Err(SolveError::AllPinned);
    }
    match solve_kkt(p, Some(&gamma), &pinned, opts) {
        Ok(sol) => Ok((
            sol.alpha,
            sol.objective,
            sol.residual,
            pg_iters + sol.iterations,
            sol.pinned,
        )),
        Err(_) => {
            // Degenerate optimal face: keep the projected-gradient point if
            // its own KKT residual is acceptable.
            let (resid, _) = simplex_kkt_residual(p, &gamma);
            if resid < 1e-7 {
                let obj = p.objective(&gamma);
                let pins = (0..n).filter(|&i| gamma[i] == 0.0).collect();
                Ok((gamma, obj, resid, pg_iters, pins))
            } else {
                Err(SolveError::NonConvergence {
                    restarts: 0,
                    residual: resid,
                    iterate: gamma,
                })
            }
        }
    }
}

/// Maximize over the simplex by projected gradient ascent with backtracking.
/// Returns when the simplex KKT residual is small or the step collapses.
fn projected_gradient(p: &KktProblem, mut x: Vec<f64>) -> (Vec<f64>, usize) {
    let mut fx = p.objective(&x);
    let mut step = 1.0;
    let mut iters = 0usize;
    for _ in 0..20_000 {
        iters += 1;
        let g = p.gradient(&x);
        let mut improved = false;
        while step > 1e-14 {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + step * gi).collect();
            let trial = project_simplex(&trial);
            let ft = p.objective(&trial);
            // reject -inf iterates outright; otherwise plain ascent test
            if ft.is_finite() && ft > fx + 1e-16 * fx.abs().max(1.0) {
                x = trial;
                fx = ft;
                improved = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
        if iters % 16 == 0 {
            let (resid, _) = simplex_kkt_residual(p, &x);
            if resid < 1e-11 {
                break;
            }
        }
    }
    (x, iters)
}

/// KKT residual of a feasible point over the simplex: on the support the
/// gradient must be constant (the multiplier), off the support it may only
/// point outward.
fn simplex_kkt_residual(p: &KktProblem, x: &[f64]) -> (f64, f64) {
    let g = p.gradient(x);
    let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 1e-12).collect();
    let eta = support.iter().map(|&i| g[i]).sum::<f64>() / support.len() as f64;
    let mut resid: f64 = 0.0;
    for i in 0..x.len() {
        if x[i] > 1e-12 {
            resid = resid.max((g[i] - eta).abs());
        } else {
            resid = resid.max((g[i] - eta).max(0.0));
        }
    }
    (resid, eta)
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut rho = 0usize;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            rho = j + 1;
            theta = t;
        }
    }
    debug_assert!(rho > 0);
    v.iter().map(|&vi| (vi - theta).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PriorityOrder, ServiceKind, Station};
    use crate::queueing::PreemptiveProvider;
    use rand::Rng;

    #[test]
    fn projection_lands_on_the_simplex() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..30);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = project_simplex(&v);
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn single_class_is_trivial() {
        let t = crate::scenario::paper_four_class(0.01);
        let one = vec![t.classes[0].clone()];
        let st = Station::for_node(&one, &[0.01], 800.0, ServiceKind::Deterministic);
        let p = PreemptiveProvider { station: &st };
        let sol = solve_sso(&one, &p, &KktOptions::default()).unwrap();
        assert_eq!(sol.policy.gamma(), &[1.0]);
        // M/D/1 sojourn at rho = 0.01*143*8/800
        let direct =
            crate::queueing::preemptive_sojourn(&st, 0, crate::model::ClassSet::EMPTY).unwrap();
        assert_eq!(sol.report.latencies[0], direct);
    }

    #[test]
    fn delay_sensitive_dominance_concentrates_gamma() {
        // class 2 far more delay-sensitive and far more important
        let classes = vec![
            QosClass::new(1, 0.05, 800.0, 0.2, 8.0, 0.01).unwrap(),
            QosClass::new(2, 0.05, 800.0, 4.0, 0.9, 2.0).unwrap(),
        ];
        let st = Station::for_node(
            &classes,
            &[0.05, 0.05],
            160.0,
            ServiceKind::Deterministic,
        );
        let p = PreemptiveProvider { station: &st };
        let sol = solve_sso(&classes, &p, &KktOptions::default()).unwrap();
        // orders: 12, 21 -> weight concentrates on 21
        assert!(
            sol.policy.gamma()[1] > 0.999,
            "gamma = {:?}",
            sol.policy.gamma()
        );
    }

    #[test]
    fn beats_every_one_hot_order_and_random_points() {
        use rand::SeedableRng;
        let t = crate::scenario::paper_four_class(0.04);
        let st = t.as_station();
        let p = PreemptiveProvider { station: &st };
        let sol = solve_sso(&t.classes, &p, &KktOptions::default()).unwrap();

        let orders = enumerate_priority_orders(4).unwrap();
        let matrix = LatencyMatrix::build(&p, &orders).unwrap();
        let obj_of = |gamma: &[f64]| {
            let l: Vec<f64> = matrix
                .values
                .iter()
                .map(|row| row.iter().zip(gamma).map(|(a, b)| a * b).sum())
                .collect();
            crate::utility::system_log_utility(&t.classes, &l)
        };

        for (j, o) in orders.iter().enumerate() {
            let one_hot = TimeSharingPolicy::one_hot(o).unwrap();
            assert!(
                sol.report.objective >= obj_of(one_hot.gamma()) - 1e-8,
                "order {j} beats the solver"
            );
        }
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        let dir = rand_distr::Dirichlet::new(vec![1.0; orders.len()]).unwrap();
        for _ in 0..500 {
            let g = dir.sample(&mut rng);
            assert!(sol.report.objective >= obj_of(&g) - 1e-8);
        }
    }

    #[test]
    fn too_many_classes_is_rejected() {
        let classes: Vec<QosClass> = (0..7)
            .map(|i| QosClass::new(i + 1, 0.01, 800.0, 0.5, 2.0, 0.5).unwrap())
            .collect();
        let rates = vec![0.01; 7];
        let st = Station::for_node(&classes, &rates, 8000.0, ServiceKind::Deterministic);
        let p = PreemptiveProvider { station: &st };
        match solve_sso(&classes, &p, &KktOptions::default()) {
            Err(SolveError::TooManyClasses { got: 7, max: 6 }) => {}
            other => panic!("expected the class cap, got {other:?}"),
        }
    }

    #[test]
    fn one_hot_dominated_order_is_found_exactly() {
        // With one completely dominant delay-sensitive class the optimal
        // policy is a vertex, exercising the pin-everything-else path.
        let t = crate::scenario::paper_four_class(0.01);
        let st = t.as_station();
        let p = PreemptiveProvider { station: &st };
        let sol = solve_sso(&t.classes, &p, &KktOptions::default()).unwrap();
        let sum: f64 = sol.policy.gamma().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(sol.report.residual < 1e-7);
    }
}
