//! Iterative subset optimizer: a downward recursion over class subsets that
//! replaces one problem in `R!` variables by `sum_{r=2..R} C(R,r)` problems
//! in at most `R` variables each.
//!
//! For a subset `A_r` (complement fixed above it), the latency of member `i`
//! is `alpha_i * l_{i,i} + sum_{j != i} alpha_j * l*_{i,j}` where `l*_{i,j}`
//! is member i's latency at the optimum of the subproblem on `A_r \ {j}`.
//! Subproblems are memoized by subset, which subsumes the "reuse if
//! `i < max(A_r^c)`" guard: a subset is solved exactly once no matter which
//! parent asks for it first.

use crate::model::{
    enumerate_priority_orders, AlphaTree, ClassSet, ModelError, QosClass, SubsetSolution,
    TimeSharingPolicy,
};
use crate::queueing::LatencyProvider;

use super::kkt::{solve_kkt, KktOptions, KktProblem, KktRow, SolveError};

/// What the optimizers report alongside a policy.
#[derive(Debug, Clone)]
pub struct OptimizerReport {
    /// Full per-class mean latency at the optimum (additive/multiplicative
    /// constants applied).
    pub latencies: Vec<f64>,
    /// `sum beta_i log U_i` at the optimum.
    pub objective: f64,
    /// Newton iterations summed over every subproblem.
    pub iterations: usize,
    /// KKT residual of the final (root) solve.
    pub residual: f64,
    /// Classes pinned at alpha = 0 in the root solve.
    pub active_constraints: Vec<usize>,
    pub subproblems_solved: usize,
    pub memo_hits: usize,
}

pub struct IoSolve {
    pub tree: AlphaTree,
    pub report: OptimizerReport,
}

struct Recursion<'a> {
    classes: &'a [QosClass],
    provider: &'a dyn LatencyProvider,
    psi: &'a [f64],
    weight: &'a [f64],
    opts: &'a KktOptions,
    tree: AlphaTree,
    solved: usize,
    hits: usize,
    iterations: usize,
    /// Residual of the most recent solve; after the root call this is the
    /// root residual, because the root is always solved last.
    last_residual: f64,
}

impl Recursion<'_> {
    fn solve_subset(&mut self, set: ClassSet) -> Result<(), SolveError> {
        if self.tree.contains(set) {
            self.hits += 1;
            return Ok(());
        }
        let members: Vec<usize> = set.iter().collect();
        let r = members.len();
        debug_assert!(r >= 2);
        let universe = self.classes.len();
        let above = set.complement(universe);

        // latency of member on top of the subset
        let mut zeta = vec![vec![0.0; r]; r];
        for (n, &i) in members.iter().enumerate() {
            zeta[n][n] = self.provider.sojourn(i, above)?;
        }
        if r == 2 {
            for n in 0..2 {
                let m = 1 - n;
                zeta[n][m] = self
                    .provider
                    .sojourn(members[n], above.insert(members[m]))?;
            }
        } else {
            for (m, &j) in members.iter().enumerate() {
                let sub = set.remove(j);
                self.solve_subset(sub)?;
                let sol = self.tree.get(sub).expect("just solved");
                for (n, &i) in members.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let pos = sub.iter().position(|c| c == i).unwrap();
                    zeta[n][m] = sol.latencies[pos];
                }
            }
        }

        let rows: Vec<KktRow> = members
            .iter()
            .map(|&i| KktRow {
                a: self.classes[i].a,
                b: self.classes[i].b,
                beta: self.classes[i].beta,
                psi: self.psi[i],
                weight: self.weight[i],
            })
            .collect();
        let problem = KktProblem { rows, zeta };
        let sol = solve_kkt(&problem, None, &[], self.opts).map_err(|e| {
            SolveError::Subproblem {
                subset: set.to_string(),
                source: Box::new(e),
            }
        })?;
        self.solved += 1;
        self.iterations += sol.iterations;
        self.last_residual = sol.residual;
        self.tree.insert(
            set,
            SubsetSolution {
                alpha: sol.alpha,
                latencies: sol.local,
            },
        );
        Ok(())
    }
}

/// Build the latency coefficient matrix of one subset subproblem without
/// solving it: diagonal entries price each member on top of the subset,
/// off-diagonal entries come from the memoized optima of the smaller
/// subproblems. Used by the convexity checker.
pub fn subset_zeta(
    classes: &[QosClass],
    provider: &dyn LatencyProvider,
    subset: ClassSet,
    opts: &KktOptions,
) -> Result<(Vec<usize>, Vec<Vec<f64>>), SolveError> {
    let universe = classes.len();
    let r = subset.len();
    assert!(r >= 2);
    let psi = vec![0.0; universe];
    let weight = vec![1.0; universe];
    let mut rec = Recursion {
        classes,
        provider,
        psi: &psi,
        weight: &weight,
        opts,
        tree: AlphaTree::new(),
        solved: 0,
        hits: 0,
        iterations: 0,
        last_residual: f64::NAN,
    };
    let members: Vec<usize> = subset.iter().collect();
    let above = subset.complement(universe);
    let mut zeta = vec![vec![0.0; r]; r];
    for (n, &i) in members.iter().enumerate() {
        zeta[n][n] = provider.sojourn(i, above)?;
    }
    if r == 2 {
        for n in 0..2 {
            let m = 1 - n;
            zeta[n][m] = provider.sojourn(members[n], above.insert(members[m]))?;
        }
    } else {
        for (m, &j) in members.iter().enumerate() {
            let sub = subset.remove(j);
            rec.solve_subset(sub)?;
            let sol = rec.tree.get(sub).expect("just solved");
            for (n, &i) in members.iter().enumerate() {
                if i == j {
                    continue;
                }
                let pos = sub.iter().position(|c| c == i).unwrap();
                zeta[n][m] = sol.latencies[pos];
            }
        }
    }
    Ok((members, zeta))
}

/// Run the subset recursion from the root `A_R = {all classes}` with
/// per-class additive (`psi`) and multiplicative (`weight`) latency
/// constants. Plain server-only problems pass zeros and ones.
pub fn solve_io_with_constants(
    classes: &[QosClass],
    provider: &dyn LatencyProvider,
    psi: &[f64],
    weight: &[f64],
    opts: &KktOptions,
) -> Result<IoSolve, SolveError> {
    let r = classes.len();
    assert!(r >= 2, "the subset recursion needs at least two classes");
    assert_eq!(psi.len(), r);
    assert_eq!(weight.len(), r);

    let mut rec = Recursion {
        classes,
        provider,
        psi,
        weight,
        opts,
        tree: AlphaTree::new(),
        solved: 0,
        hits: 0,
        iterations: 0,
        last_residual: f64::NAN,
    };
    let root = ClassSet::full(r);
    rec.solve_subset(root)?;

    let sol = rec.tree.get(root).unwrap();
    let latencies: Vec<f64> = sol
        .latencies
        .iter()
        .enumerate()
        .map(|(i, &l)| psi[i] + weight[i] * l)
        .collect();
    let objective: f64 = classes
        .iter()
        .zip(&latencies)
        .map(|(c, &l)| {
            c.beta
                * crate::utility::UtilityParams::from(c)
                    .log_utility(l)
                    .unwrap_or(f64::NEG_INFINITY)
        })
        .sum();

    let pinned: Vec<usize> = root
        .iter()
        .enumerate()
        .filter(|&(n, _)| sol.alpha[n] == 0.0)
        .map(|(_, i)| i)
        .collect();

    Ok(IoSolve {
        report: OptimizerReport {
            latencies,
            objective,
            iterations: rec.iterations,
            residual: rec.last_residual,
            active_constraints: pinned,
            subproblems_solved: rec.solved,
            memo_hits: rec.hits,
        },
        tree: rec.tree,
    })
}

/// Iterative optimizer for a single station: maximizes the system utility
/// over all work-conserving time-sharing policies.
pub fn solve_io(
    classes: &[QosClass],
    provider: &dyn LatencyProvider,
    opts: &KktOptions,
) -> Result<IoSolve, SolveError> {
    let r = classes.len();
    solve_io_with_constants(classes, provider, &vec![0.0; r], &vec![1.0; r], opts)
}

/// Collapse an alpha tree into the fraction of time spent under each of the
/// `R!` strict priority orders: the weight of an order is the product of the
/// alpha of its next-highest class along the shrinking subset chain.
pub fn aggregate_gamma(tree: &AlphaTree, r: usize) -> Result<TimeSharingPolicy, ModelError> {
    let orders = enumerate_priority_orders(r)?;
    if r == 1 {
        return TimeSharingPolicy::new(1, vec![1.0]);
    }
    let mut gamma = Vec::with_capacity(orders.len());
    for order in &orders {
        let mut g = 1.0;
        let mut set = ClassSet::full(r);
        for &top in &order.classes()[..r - 1] {
            let a = tree.alpha_of(set, top).ok_or_else(|| {
                ModelError::InvalidTopology(format!("alpha tree has no entry for {set}"))
            })?;
            g *= a;
            set = set.remove(top);
            if set.len() < 2 {
                break;
            }
        }
        gamma.push(g);
    }
    // the products telescope to exactly one; renormalize rounding dust only
    let sum: f64 = gamma.iter().sum();
    debug_assert!((sum - 1.0).abs() < 1e-9, "gamma sum {sum}");
    for g in &mut gamma {
        *g /= sum;
    }
    TimeSharingPolicy::new(r, gamma)
}
