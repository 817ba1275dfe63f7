//! Damped-Newton active-set solver for the stationarity system of one
//! utility-maximization subproblem.
//!
//! The problem is `max sum_j beta_j log U_j(l_j)` over a simplex of variables
//! `alpha`, with each class latency affine in alpha:
//!
//! ```text
//! l_j = psi_j + w_j * (zeta_j . alpha)
//! ```
//!
//! Writing `theta_j = e^{-a_j (l_j - b_j)}`, the optimum satisfies
//!
//! ```text
//! sum_j k_{j,i} / (1 + theta_j) + eta = 0   for every free variable i,
//! sum_i alpha_i = 1,
//! ```
//!
//! with `k_{j,i} = beta_j a_j w_j zeta_{j,i}`. `1/(1+theta_j)` is the
//! logistic `sigma(a_j (l_j - b_j))`, which is how it is evaluated here.
//! Negative iterates are pinned to zero and their stationarity rows dropped;
//! pinned variables whose multiplier test fails are released again, so the
//! exit point satisfies the full KKT conditions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::Distribution;
use thiserror::Error;

use crate::utility::{sigmoid, UtilityParams};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("no convergence after {restarts} damped restarts (residual {residual:.3e}, iterate {iterate:?})")]
    NonConvergence {
        restarts: usize,
        residual: f64,
        iterate: Vec<f64>,
    },
    #[error("subproblem for subset {subset} failed: {source}")]
    Subproblem {
        subset: String,
        #[source]
        source: Box<SolveError>,
    },
    #[error("every variable was pinned; problem is infeasible as posed")]
    AllPinned,
    #[error("single-stage solver accepts at most {max} classes, got {got}")]
    TooManyClasses { got: usize, max: usize },
    #[error(transparent)]
    Queueing(#[from] crate::queueing::QueueingError),
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
}

/// One class row of the system: utility shape, weight in the objective and
/// the affine latency wrapper.
#[derive(Debug, Clone, Copy)]
pub struct KktRow {
    pub a: f64,
    pub b: f64,
    pub beta: f64,
    /// Additive latency contribution from outside this problem.
    pub psi: f64,
    /// Multiplicative weight on the local latency combination.
    pub weight: f64,
}

/// The full subproblem: rows (classes) and the latency coefficients
/// `zeta[row][var]`.
#[derive(Debug, Clone)]
pub struct KktProblem {
    pub rows: Vec<KktRow>,
    pub zeta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct KktOptions {
    /// Infinity-norm of the KKT residual at exit.
    pub residual_tol: f64,
    /// Slack allowed on the multiplier test for pinned variables.
    pub release_tol: f64,
    pub max_newton_iters: usize,
    pub max_restarts: usize,
}

impl Default for KktOptions {
    fn default() -> Self {
        KktOptions {
            residual_tol: 1e-10,
            release_tol: 1e-8,
            max_newton_iters: 200,
            max_restarts: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KktSolution {
    pub alpha: Vec<f64>,
    pub eta: f64,
    /// Local latency combination `zeta_j . alpha` per row.
    pub local: Vec<f64>,
    /// Full latency `psi_j + w_j * local_j` per row.
    pub latencies: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub residual: f64,
    pub pinned: Vec<usize>,
}

impl KktProblem {
    pub fn num_vars(&self) -> usize {
        self.zeta.first().map_or(0, |r| r.len())
    }

    fn full_latencies(&self, alpha: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let local: Vec<f64> = self
            .zeta
            .iter()
            .map(|zr| zr.iter().zip(alpha).map(|(z, a)| z * a).sum())
            .collect();
        let full: Vec<f64> = self
            .rows
            .iter()
            .zip(&local)
            .map(|(r, &l)| r.psi + r.weight * l)
            .collect();
        (local, full)
    }

    /// Stationarity sums `S_i = sum_j k_{j,i} sigma(x_j)` for every variable.
    fn stationarity(&self, alpha: &[f64]) -> Vec<f64> {
        let (_, full) = self.full_latencies(alpha);
        let n = self.num_vars();
        let mut s = vec![0.0; n];
        for (j, row) in self.rows.iter().enumerate() {
            let sig = sigmoid(row.a * (full[j] - row.b));
            let k = row.beta * row.a * row.weight * sig;
            for (i, acc) in s.iter_mut().enumerate() {
                *acc += k * self.zeta[j][i];
            }
        }
        s
    }

    /// Objective `sum_j beta_j log U_j(l_j)` at a feasible alpha.
    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let (_, full) = self.full_latencies(alpha);
        self.rows
            .iter()
            .zip(&full)
            .map(|(r, &l)| {
                r.beta
                    * UtilityParams::new(r.a, r.b)
                        .log_utility(l.max(0.0))
                        .unwrap_or(f64::NEG_INFINITY)
            })
            .sum()
    }

    /// Gradient of the objective: `-S`.
    pub fn gradient(&self, alpha: &[f64]) -> Vec<f64> {
        self.stationarity(alpha).iter().map(|s| -s).collect()
    }
}

struct NewtonOutcome {
    alpha: Vec<f64>,
    eta: f64,
    residual: f64,
    iterations: usize,
    converged: bool,
}

/// Solve the equality-constrained system on the free variables, starting
/// from `alpha` (pinned entries already zero).
fn newton_on_free(
    p: &KktProblem,
    free: &[usize],
    mut alpha: Vec<f64>,
    opts: &KktOptions,
) -> NewtonOutcome {
    let nf = free.len();

    // least-squares fit of the stationarity equations for the initial eta
    let s0 = p.stationarity(&alpha);
    let mut eta = -free.iter().map(|&i| s0[i]).sum::<f64>() / nf as f64;

    let residual = |alpha: &[f64], eta: f64| -> (DVector<f64>, f64) {
        let s = p.stationarity(alpha);
        let mut f = DVector::zeros(nf + 1);
        for (r, &i) in free.iter().enumerate() {
            f[r] = s[i] + eta;
        }
        f[nf] = free.iter().map(|&i| alpha[i]).sum::<f64>() - 1.0;
        let norm = f.amax();
        (f, norm)
    };

    let (mut f, mut fnorm) = residual(&alpha, eta);
    let mut iterations = 0;
    while fnorm >= opts.residual_tol && iterations < opts.max_newton_iters {
        iterations += 1;
        // bordered Jacobian [dS/da  1; 1^T  0] on the free block
        let (_, full) = p.full_latencies(&alpha);
        let mut jac = DMatrix::zeros(nf + 1, nf + 1);
        for (j, row) in p.rows.iter().enumerate() {
            let x = row.a * (full[j] - row.b);
            let curv = row.beta * row.a * row.a * row.weight * row.weight
                * sigmoid(x)
                * sigmoid(-x);
            for (ri, &i) in free.iter().enumerate() {
                let zi = p.zeta[j][i];
                if zi == 0.0 {
                    continue;
                }
                for (rm, &m) in free.iter().enumerate() {
                    jac[(ri, rm)] += curv * zi * p.zeta[j][m];
                }
            }
        }
        for r in 0..nf {
            jac[(r, nf)] = 1.0;
            jac[(nf, r)] = 1.0;
        }

        let rhs = -&f;
        let step = match jac.clone().lu().solve(&rhs) {
            Some(d) if d.iter().all(|v| v.is_finite()) => d,
            _ => {
                // singular system: minimum-norm least-squares step
                let svd = jac.svd(true, true);
                match svd.solve(&rhs, 1e-12) {
                    Ok(d) => d,
                    Err(_) => break,
                }
            }
        };

        // backtracking on the residual norm
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let mut trial = alpha.clone();
            for (r, &i) in free.iter().enumerate() {
                trial[i] += t * step[r];
            }
            let trial_eta = eta + t * step[nf];
            let (tf, tn) = residual(&trial, trial_eta);
            if tn <= (1.0 - 1e-4 * t) * fnorm {
                alpha = trial;
                eta = trial_eta;
                f = tf;
                fnorm = tn;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    NewtonOutcome {
        alpha,
        eta,
        residual: fnorm,
        iterations,
        converged: fnorm < opts.residual_tol,
    }
}

/// Solve the subproblem. `initial_pinned` pre-pins variables (the
/// single-stage path uses this to hand over the support found by projected
/// gradient); the solver may release them again if their multiplier test
/// fails.
pub fn solve_kkt(
    p: &KktProblem,
    init: Option<&[f64]>,
    initial_pinned: &[usize],
    opts: &KktOptions,
) -> Result<KktSolution, SolveError> {
    let n = p.num_vars();
    assert!(n > 0 && p.rows.iter().all(|r| r.weight >= 0.0));

    let mut pinned = vec![false; n];
    for &i in initial_pinned {
        pinned[i] = true;
    }
    if pinned.iter().all(|&b| b) {
        return Err(SolveError::AllPinned);
    }

    let mut alpha: Vec<f64> = match init {
        Some(a) => {
            let mut a = a.to_vec();
            for (i, v) in a.iter_mut().enumerate() {
                if pinned[i] {
                    *v = 0.0;
                }
            }
            renormalize(&mut a, &pinned);
            a
        }
        None => {
            let mut a = vec![0.0; n];
            let nf = pinned.iter().filter(|&&b| !b).count();
            for (i, v) in a.iter_mut().enumerate() {
                if !pinned[i] {
                    *v = 1.0 / nf as f64;
                }
            }
            a
        }
    };

    let mut restarts = 0usize;
    let mut total_iters = 0usize;

    loop {
        let free: Vec<usize> = (0..n).filter(|&i| !pinned[i]).collect();
        if free.is_empty() {
            return Err(SolveError::AllPinned);
        }
        let out = newton_on_free(p, &free, alpha.clone(), opts);
        total_iters += out.iterations;

        if !out.converged {
            restarts += 1;
            if restarts > opts.max_restarts {
                return Err(SolveError::NonConvergence {
                    restarts,
                    residual: out.residual,
                    iterate: out.alpha,
                });
            }
            // damped restart from a random point of the free simplex
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0xD1CE ^ restarts as u64);
            let dir = rand_distr::Dirichlet::new(vec![1.0; free.len()]).unwrap();
            let draw = dir.sample(&mut rng);
            alpha = vec![0.0; n];
            for (r, &i) in free.iter().enumerate() {
                alpha[i] = draw[r];
            }
            continue;
        }

        alpha = out.alpha.clone();
        // enforce alpha >= 0: pin every negative variable and re-solve
        let negatives: Vec<usize> = free.iter().copied().filter(|&i| alpha[i] < 0.0).collect();
        if negatives
            .iter()
            .any(|&i| alpha[i] < -1e-12)
        {
            for &i in &negatives {
                pinned[i] = true;
                alpha[i] = 0.0;
            }
            renormalize(&mut alpha, &pinned);
            continue;
        }
        for &i in &negatives {
            alpha[i] = 0.0; // clear rounding-level negatives
        }

        // multiplier test for pinned variables: a pinned i must satisfy
        // dF/da_i = -S_i <= eta, i.e. S_i + eta >= 0
        let s = p.stationarity(&alpha);
        let violator = (0..n)
            .filter(|&i| pinned[i])
            .filter(|&i| s[i] + out.eta < -opts.release_tol)
            .min_by(|&x, &y| (s[x] + out.eta).partial_cmp(&(s[y] + out.eta)).unwrap());
        if let Some(i) = violator {
            pinned[i] = false;
            continue;
        }

        let (local, full) = p.full_latencies(&alpha);
        let objective = p.objective(&alpha);
        return Ok(KktSolution {
            alpha,
            eta: out.eta,
            local,
            latencies: full,
            objective,
            iterations: total_iters,
            residual: out.residual,
            pinned: (0..n).filter(|&i| pinned[i]).collect(),
        });
    }
}

fn renormalize(alpha: &mut [f64], pinned: &[bool]) {
    let sum: f64 = alpha
        .iter()
        .zip(pinned)
        .filter(|(_, &p)| !p)
        .map(|(a, _)| *a)
        .sum();
    let nf = pinned.iter().filter(|&&b| !b).count();
    if sum > 1e-12 {
        for (a, &p) in alpha.iter_mut().zip(pinned) {
            if !p {
                *a /= sum;
            }
        }
    } else {
        for (a, &p) in alpha.iter_mut().zip(pinned) {
            *a = if p { 0.0 } else { 1.0 / nf as f64 };
        }
    }
}
