//! Equation counts and information-exchange overhead for the two solver
//! routes and the two broadcast encodings.

/// Equation/variable counts for a system of `r` classes and `m` aggregators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityReport {
    pub r: usize,
    pub m: usize,
    /// Simultaneous nonlinear equations of the single-stage route: `R! + 1`.
    pub sso_equations: u64,
    /// Largest system the subset recursion ever solves: `R + 1`.
    pub io_max_equations: u64,
    /// Subproblems the recursion solves: `sum_{r=2..R} C(R,r) = 2^R - R - 1`.
    pub io_subproblem_count: u64,
    /// Free variables of a full alpha tree:
    /// `N_R = (R-1)(2^{R-1}-1) - 2^{R-1} + R`.
    pub n_r: u64,
    /// Values on the air per iteration when nodes broadcast alpha sets.
    pub n_case1: u64,
    /// Values on the air per iteration when nodes broadcast full gamma
    /// vectors: `(M+1)(R!-1)`.
    pub n_case2: u64,
}

pub fn complexity_report(r: usize, m: usize) -> ComplexityReport {
    assert!((2..=20).contains(&r), "factorials overflow past r = 20");
    assert!(m >= 1);
    let fact: u64 = (1..=r as u64).product();
    let pow = 1u64 << (r - 1);
    let n_r = (r as u64 - 1) * (pow - 1) - pow + r as u64;
    ComplexityReport {
        r,
        m,
        sso_equations: fact + 1,
        io_max_equations: r as u64 + 1,
        io_subproblem_count: (1u64 << r) - r as u64 - 1,
        n_r,
        n_case1: (m as u64 + 1) * n_r,
        n_case2: (m as u64 + 1) * (fact - 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_classes_need_5041_equations() {
        assert_eq!(complexity_report(7, 1).sso_equations, 5041);
    }

    #[test]
    fn closed_form_matches_the_sum() {
        fn binom(n: u64, k: u64) -> u64 {
            if k > n {
                return 0;
            }
            (1..=k).fold(1, |acc, i| acc * (n - i + 1) / i)
        }
        for r in 2..=10u64 {
            let direct: u64 = (2..=r).map(|k| binom(r, k) * (k - 1)).sum();
            assert_eq!(complexity_report(r as usize, 3).n_r, direct, "r = {r}");
            let count: u64 = (2..=r).map(|k| binom(r, k)).sum();
            assert_eq!(
                complexity_report(r as usize, 3).io_subproblem_count,
                count
            );
        }
    }

    #[test]
    fn encodings_agree_up_to_three_classes() {
        for m in [1, 4, 9] {
            let c = complexity_report(3, m);
            assert_eq!(c.n_case1, c.n_case2);
            assert_eq!(c.n_r, 5);
        }
        let c = complexity_report(4, 4);
        assert_eq!(c.n_r, 17);
        assert_eq!(c.n_case1, 85);
        assert!(c.n_case2 > c.n_case1);
    }

    #[test]
    fn eight_classes_ratio_near_fifty_two() {
        let c = complexity_report(8, 5);
        let ratio = c.n_case2 as f64 / c.n_case1 as f64;
        assert!((50.0..54.0).contains(&ratio), "ratio {ratio}");
    }
}
