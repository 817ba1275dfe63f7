//! Shared domain model: traffic classes, topologies, priority orders and
//! time-sharing policies.
//!
//! Conventions used throughout the crate:
//! - classes are indexed `0..R` internally; the 1-based `id` is only for
//!   display and file I/O,
//! - rates are packets/second, sizes are bits, capacities are bits/second
//!   (the scenario layer converts from bytes),
//! - every type here is an immutable value object once constructed.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on simplex sums (time-sharing fractions).
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Stability margin: total utilization must stay at or below `1 - STABILITY_MARGIN`.
/// The closed-form latencies diverge as the utilization approaches one, so
/// loads inside the margin are rejected as near-critical rather than accepted.
pub const STABILITY_MARGIN: f64 = 1e-6;

/// Any structure sized `R!` is refused beyond this many classes.
pub const MAX_FACTORIAL_CLASSES: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("factorial limit exceeded: R = {0} > {MAX_FACTORIAL_CLASSES}")]
    FactorialLimit(usize),
    #[error("policy is not on the simplex: {0}")]
    NotOnSimplex(String),
    #[error("invalid class parameter: {0}")]
    InvalidClass(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
}

/// One QoS traffic class: Poisson arrivals of fixed-size packets plus the
/// sigmoidal utility parameters `(a, b, beta)` scoring its mean latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosClass {
    /// 1-based id, used for display and file I/O only.
    pub id: usize,
    /// Arrival rate, packets/second (across all aggregators).
    pub lambda: f64,
    /// Packet size, bits.
    pub packet_size_bits: f64,
    /// Utility roll-off factor, 1/second.
    pub a: f64,
    /// Utility inflection latency, seconds.
    pub b: f64,
    /// Weight of this class in the system utility.
    pub beta: f64,
}

impl QosClass {
    pub fn new(
        id: usize,
        lambda: f64,
        packet_size_bits: f64,
        a: f64,
        b: f64,
        beta: f64,
    ) -> Result<Self, ModelError> {
        let c = Self {
            id,
            lambda,
            packet_size_bits,
            a,
            b,
            beta,
        };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("packet_size", self.packet_size_bits),
            ("a", self.a),
            ("b", self.b),
            ("beta", self.beta),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::InvalidClass(format!(
                    "class {}: {name} must be positive and finite, got {v}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Service-time distribution at a node. The rate is `capacity / packet_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Deterministic,
    Exponential,
}

/// Per-class service model at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceModel {
    pub kind: ServiceKind,
    /// Service rate mu, packets/second.
    pub rate: f64,
}

impl ServiceModel {
    pub fn new(kind: ServiceKind, rate: f64) -> Self {
        assert!(rate > 0.0 && rate.is_finite(), "service rate must be > 0");
        ServiceModel { kind, rate }
    }

    /// Second moment of the service time: `1/mu^2` deterministic,
    /// `2/mu^2` exponential.
    pub fn second_moment(&self) -> f64 {
        match self.kind {
            ServiceKind::Deterministic => 1.0 / (self.rate * self.rate),
            ServiceKind::Exponential => 2.0 / (self.rate * self.rate),
        }
    }
}

/// A set of class indices (0-based), packed in a bitmask. `R <= 16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassSet(pub u16);

impl ClassSet {
    pub const EMPTY: ClassSet = ClassSet(0);

    pub fn full(r: usize) -> Self {
        assert!(r <= 16);
        ClassSet(((1u32 << r) - 1) as u16)
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(it: I) -> Self {
        let mut s = 0u16;
        for i in it {
            assert!(i < 16);
            s |= 1 << i;
        }
        ClassSet(s)
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }

    pub fn insert(&self, i: usize) -> Self {
        ClassSet(self.0 | (1 << i))
    }

    pub fn remove(&self, i: usize) -> Self {
        ClassSet(self.0 & !(1 << i))
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// Complement within the universe `{0..r}`.
    pub fn complement(&self, r: usize) -> Self {
        ClassSet(!self.0 & Self::full(r).0)
    }

    /// Member indices in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        let bits = self.0;
        (0..16).filter(move |i| bits & (1 << i) != 0)
    }
}

impl fmt::Display for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, i) in self.iter().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", i + 1)?;
        }
        write!(f, "}}")
    }
}

/// A strict priority order over the classes; position 0 is the highest
/// priority. Stored 0-based; displayed with 1-based ids ("4321").
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PriorityOrder {
    perm: Vec<usize>,
}

impl PriorityOrder {
    pub fn new(perm: Vec<usize>) -> Result<Self, ModelError> {
        let r = perm.len();
        let mut seen = vec![false; r];
        for &p in &perm {
            if p >= r || seen[p] {
                return Err(ModelError::InvalidClass(format!(
                    "not a permutation of 0..{r}: {perm:?}"
                )));
            }
            seen[p] = true;
        }
        Ok(PriorityOrder { perm })
    }

    /// Order `p1 > p2 > ... > pR` from 1-based ids.
    pub fn from_ids(ids: &[usize]) -> Result<Self, ModelError> {
        Self::new(ids.iter().map(|&i| i - 1).collect())
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn classes(&self) -> &[usize] {
        &self.perm
    }

    /// The set of classes strictly above `class` in this order.
    pub fn higher_set(&self, class: usize) -> ClassSet {
        let mut s = ClassSet::EMPTY;
        for &p in &self.perm {
            if p == class {
                return s;
            }
            s = s.insert(p);
        }
        panic!("class {class} not in order {self}");
    }
}

impl fmt::Display for PriorityOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &p in &self.perm {
            write!(f, "{}", p + 1)?;
        }
        Ok(())
    }
}

/// All `R!` priority orders in lexicographic order. This fixes the canonical
/// order index `j` used by [`TimeSharingPolicy`] and every per-order matrix.
pub fn enumerate_priority_orders(r: usize) -> Result<Vec<PriorityOrder>, ModelError> {
    if r == 0 || r > MAX_FACTORIAL_CLASSES {
        return Err(ModelError::FactorialLimit(r));
    }
    let mut perm: Vec<usize> = (0..r).collect();
    let mut out = Vec::with_capacity(factorial(r));
    loop {
        out.push(PriorityOrder { perm: perm.clone() });
        // next lexicographic permutation
        let Some(i) = (0..r.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else {
            break;
        };
        let j = (i + 1..r).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
    Ok(out)
}

pub fn factorial(r: usize) -> usize {
    (1..=r).product()
}

/// Fractions of time spent under each of the `R!` priority orders, indexed by
/// the canonical lexicographic order index.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSharingPolicy {
    num_classes: usize,
    gamma: Vec<f64>,
}

impl TimeSharingPolicy {
    pub fn new(num_classes: usize, gamma: Vec<f64>) -> Result<Self, ModelError> {
        if num_classes == 0 || num_classes > MAX_FACTORIAL_CLASSES {
            return Err(ModelError::FactorialLimit(num_classes));
        }
        if gamma.len() != factorial(num_classes) {
            return Err(ModelError::NotOnSimplex(format!(
                "expected {}! = {} fractions, got {}",
                num_classes,
                factorial(num_classes),
                gamma.len()
            )));
        }
        if gamma.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
            return Err(ModelError::NotOnSimplex(
                "negative or non-finite fraction".into(),
            ));
        }
        let sum: f64 = gamma.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(ModelError::NotOnSimplex(format!("fractions sum to {sum}")));
        }
        Ok(TimeSharingPolicy { num_classes, gamma })
    }

    pub fn uniform(num_classes: usize) -> Result<Self, ModelError> {
        let n = factorial(num_classes);
        Self::new(num_classes, vec![1.0 / n as f64; n])
    }

    /// All weight on a single priority order.
    pub fn one_hot(order: &PriorityOrder) -> Result<Self, ModelError> {
        let r = order.len();
        let orders = enumerate_priority_orders(r)?;
        let j = orders
            .iter()
            .position(|o| o == order)
            .expect("order enumerable");
        let mut gamma = vec![0.0; orders.len()];
        gamma[j] = 1.0;
        Self::new(r, gamma)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }
}

/// Per-subset optimal time-share solutions from the iterative optimizer.
///
/// Keys are the subsets `A_r` (r >= 2); `alpha[n]` and `latencies[n]` are
/// aligned with the subset's members in ascending class order. Latencies are
/// in "local" units: the node's own sojourn contribution, before any
/// additive/multiplicative wrapping applied by a joint problem.
#[derive(Debug, Clone, Default)]
pub struct AlphaTree {
    entries: std::collections::BTreeMap<ClassSet, SubsetSolution>,
}

#[derive(Debug, Clone)]
pub struct SubsetSolution {
    pub alpha: Vec<f64>,
    pub latencies: Vec<f64>,
}

impl AlphaTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, set: ClassSet, sol: SubsetSolution) {
        debug_assert_eq!(sol.alpha.len(), set.len());
        debug_assert_eq!(sol.latencies.len(), set.len());
        self.entries.insert(set, sol);
    }

    pub fn get(&self, set: ClassSet) -> Option<&SubsetSolution> {
        self.entries.get(&set)
    }

    pub fn contains(&self, set: ClassSet) -> bool {
        self.entries.contains_key(&set)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClassSet, &SubsetSolution)> {
        self.entries.iter()
    }

    /// alpha of `class` inside `set`, if present.
    pub fn alpha_of(&self, set: ClassSet, class: usize) -> Option<f64> {
        let sol = self.get(set)?;
        let pos = set.iter().position(|i| i == class)?;
        Some(sol.alpha[pos])
    }
}

/// One node's queueing inputs: per-class arrival rates and service models.
#[derive(Debug, Clone)]
pub struct Station {
    pub arrival_rates: Vec<f64>,
    pub service: Vec<ServiceModel>,
}

impl Station {
    pub fn new(arrival_rates: Vec<f64>, service: Vec<ServiceModel>) -> Self {
        assert_eq!(arrival_rates.len(), service.len());
        Station {
            arrival_rates,
            service,
        }
    }

    /// Station for a node of capacity `capacity_bps` serving `classes` with
    /// the given per-class arrival rates.
    pub fn for_node(
        classes: &[QosClass],
        arrival_rates: &[f64],
        capacity_bps: f64,
        kind: ServiceKind,
    ) -> Self {
        let service = classes
            .iter()
            .map(|c| ServiceModel::new(kind, capacity_bps / c.packet_size_bits))
            .collect();
        Station::new(arrival_rates.to_vec(), service)
    }

    pub fn num_classes(&self) -> usize {
        self.arrival_rates.len()
    }

    pub fn rho(&self, i: usize) -> f64 {
        self.arrival_rates[i] / self.service[i].rate
    }

    pub fn total_rho(&self) -> f64 {
        (0..self.num_classes()).map(|i| self.rho(i)).sum()
    }
}

/// The whole uplink: `M` aggregators feeding one application server.
/// `M = 0` models a server-only scenario.
#[derive(Debug, Clone)]
pub struct Topology {
    pub classes: Vec<QosClass>,
    /// `arrival_matrix[i][k]` = rate of class `i` at aggregator `k`. Empty
    /// inner vectors when `M = 0`.
    pub arrival_matrix: Vec<Vec<f64>>,
    pub as_capacity_bps: f64,
    pub ma_capacities_bps: Vec<f64>,
    pub service: ServiceKind,
}

impl Topology {
    /// Server-only topology; class-level rates feed the AS directly.
    pub fn server_only(classes: Vec<QosClass>, as_capacity_bps: f64, service: ServiceKind) -> Self {
        let r = classes.len();
        Topology {
            classes,
            arrival_matrix: vec![vec![]; r],
            as_capacity_bps,
            ma_capacities_bps: vec![],
            service,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_aggregators(&self) -> usize {
        self.ma_capacities_bps.len()
    }

    /// Contribution weight `w_ik = lambda_ik / lambda_i`.
    pub fn weight(&self, class: usize, ma: usize) -> f64 {
        self.arrival_matrix[class][ma] / self.classes[class].lambda
    }

    pub fn as_station(&self) -> Station {
        let rates: Vec<f64> = self.classes.iter().map(|c| c.lambda).collect();
        Station::for_node(&self.classes, &rates, self.as_capacity_bps, self.service)
    }

    pub fn ma_station(&self, k: usize) -> Station {
        let rates: Vec<f64> = (0..self.num_classes())
            .map(|i| self.arrival_matrix[i][k])
            .collect();
        Station::for_node(
            &self.classes,
            &rates,
            self.ma_capacities_bps[k],
            self.service,
        )
    }

    /// Same topology with different aggregator capacities (used when the
    /// capacities follow from a subcarrier assignment).
    pub fn with_ma_capacities(&self, caps: Vec<f64>) -> Self {
        let mut t = self.clone();
        t.ma_capacities_bps = caps;
        t
    }
}

/// Where a stability/consistency check failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeRef {
    Server,
    Aggregator(usize),
    Class(usize),
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Server => write!(f, "AS"),
            NodeRef::Aggregator(k) => write!(f, "MA {}", k + 1),
            NodeRef::Class(i) => write!(f, "class {}", i + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub node: NodeRef,
    pub constraint: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.node, self.constraint)
    }
}

/// Diagnoses every topology invariant; returns one entry per failed
/// constraint and never errors. An empty list means the scenario is valid.
pub fn validate_scenario(t: &Topology) -> Vec<Violation> {
    let mut v = Vec::new();
    let r = t.num_classes();
    let m = t.num_aggregators();

    for c in &t.classes {
        if let Err(e) = c.check() {
            v.push(Violation {
                node: NodeRef::Class(c.id.saturating_sub(1)),
                constraint: e.to_string(),
            });
        }
    }
    if !(t.as_capacity_bps > 0.0) {
        v.push(Violation {
            node: NodeRef::Server,
            constraint: "capacity must be positive".into(),
        });
    }

    if m > 0 {
        if t.arrival_matrix.len() != r || t.arrival_matrix.iter().any(|row| row.len() != m) {
            v.push(Violation {
                node: NodeRef::Server,
                constraint: format!("arrival matrix must be {r}x{m}"),
            });
            return v;
        }
        for i in 0..r {
            let row_sum: f64 = t.arrival_matrix[i].iter().sum();
            // w_ik reconstruction must be exact: the class rate is defined as
            // the row sum, so anything beyond rounding noise is a data error.
            if (row_sum - t.classes[i].lambda).abs() > 1e-12 * t.classes[i].lambda.max(1.0) {
                v.push(Violation {
                    node: NodeRef::Class(i),
                    constraint: format!(
                        "lambda_i = {} but arrival matrix row sums to {row_sum}",
                        t.classes[i].lambda
                    ),
                });
            }
            if t.arrival_matrix[i].iter().any(|&x| x < 0.0) {
                v.push(Violation {
                    node: NodeRef::Class(i),
                    constraint: "negative arrival rate".into(),
                });
            }
        }
    }

    check_station(&t.as_station(), NodeRef::Server, &mut v);
    for k in 0..m {
        if !(t.ma_capacities_bps[k] > 0.0) {
            v.push(Violation {
                node: NodeRef::Aggregator(k),
                constraint: "capacity must be positive".into(),
            });
            continue;
        }
        check_station(&t.ma_station(k), NodeRef::Aggregator(k), &mut v);
    }
    v
}

fn check_station(st: &Station, node: NodeRef, v: &mut Vec<Violation>) {
    let rho = st.total_rho();
    if rho >= 1.0 {
        v.push(Violation {
            node,
            constraint: format!("unstable: total utilization {rho:.6} >= 1"),
        });
    } else if rho > 1.0 - STABILITY_MARGIN {
        v.push(Violation {
            node,
            constraint: format!(
                "near-critical: total utilization {rho:.9} within {STABILITY_MARGIN:e} of 1"
            ),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_class(lambda: f64, size_bits: f64) -> QosClass {
        QosClass::new(1, lambda, size_bits, 0.5, 1.0, 0.5).unwrap()
    }

    #[test]
    fn single_class_stability() {
        // lambda = 0.05 pkt/s of 100 B at 100 B/s: utilization 0.05.
        let t = Topology::server_only(
            vec![one_class(0.05, 800.0)],
            800.0,
            ServiceKind::Deterministic,
        );
        assert!(validate_scenario(&t).is_empty());
        assert!((t.as_station().total_rho() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn overloaded_server_is_flagged() {
        // lambda * s / C = 1.2
        let t = Topology::server_only(
            vec![one_class(1.2, 800.0)],
            800.0,
            ServiceKind::Deterministic,
        );
        let v = validate_scenario(&t);
        assert_eq!(v.len(), 1);
        assert!(v[0].constraint.contains("unstable"), "{}", v[0]);
        assert_eq!(v[0].node, NodeRef::Server);
    }

    #[test]
    fn near_critical_is_flagged_separately() {
        let t = Topology::server_only(
            vec![one_class(1.0 - 1e-8, 1.0)],
            1.0,
            ServiceKind::Deterministic,
        );
        let v = validate_scenario(&t);
        assert_eq!(v.len(), 1);
        assert!(v[0].constraint.contains("near-critical"), "{}", v[0]);
    }

    #[test]
    fn paper_four_class_scenario_is_valid() {
        // Sum lambda_i s_i / C_o = (0.01*143 + 0.02*111 + 0.04*83 + 0.05*67)/100
        //                        = (1.43 + 2.22 + 3.32 + 3.35)/100 = 0.1032 < 1.
        let t = crate::scenario::paper_four_class(0.01);
        assert!(validate_scenario(&t).is_empty());
        assert!((t.as_station().total_rho() - 0.1032).abs() < 1e-12);
    }

    #[test]
    fn weights_rebuild_row_sums() {
        let t = crate::scenario::paper_joint(ServiceKind::Exponential);
        assert!(validate_scenario(&t).is_empty());
        for i in 0..t.num_classes() {
            let rebuilt: f64 = (0..t.num_aggregators())
                .map(|k| t.weight(i, k) * t.classes[i].lambda)
                .sum();
            let row: f64 = t.arrival_matrix[i].iter().sum();
            assert_eq!(rebuilt, row);
            let wsum: f64 = (0..t.num_aggregators()).map(|k| t.weight(i, k)).sum();
            assert!((wsum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orders_are_lexicographic_and_complete() {
        let orders = enumerate_priority_orders(3).unwrap();
        let shown: Vec<String> = orders.iter().map(|o| o.to_string()).collect();
        assert_eq!(shown, vec!["123", "132", "213", "231", "312", "321"]);

        let orders = enumerate_priority_orders(4).unwrap();
        assert_eq!(orders.len(), 24);
        let mut uniq = orders.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 24);
        let mut sorted = orders.clone();
        sorted.sort_by_key(|o| o.classes().to_vec());
        assert_eq!(sorted, orders, "enumeration must be lexicographic");

        assert_eq!(
            enumerate_priority_orders(1).unwrap()[0].to_string(),
            "1"
        );
        assert_eq!(
            enumerate_priority_orders(9).unwrap_err(),
            ModelError::FactorialLimit(9)
        );
    }

    #[test]
    fn enumeration_is_deterministic() {
        assert_eq!(
            enumerate_priority_orders(5).unwrap(),
            enumerate_priority_orders(5).unwrap()
        );
    }

    #[test]
    fn higher_set_walks_the_prefix() {
        let o = PriorityOrder::from_ids(&[3, 1, 2]).unwrap();
        assert_eq!(o.higher_set(2), ClassSet::EMPTY);
        assert_eq!(o.higher_set(0), ClassSet::from_indices([2]));
        assert_eq!(o.higher_set(1), ClassSet::from_indices([0, 2]));
    }

    #[test]
    fn one_hot_policy_is_accepted() {
        let o = PriorityOrder::from_ids(&[2, 1]).unwrap();
        let p = TimeSharingPolicy::one_hot(&o).unwrap();
        assert_eq!(p.gamma(), &[0.0, 1.0]); // orders 12, 21
    }

    #[test]
    fn off_simplex_policies_are_rejected() {
        assert!(TimeSharingPolicy::new(2, vec![0.6, 0.6]).is_err());
        assert!(TimeSharingPolicy::new(2, vec![1.1, -0.1]).is_err());
        assert!(TimeSharingPolicy::new(2, vec![0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn class_set_basics() {
        let s = ClassSet::from_indices([0, 2, 3]);
        assert_eq!(s.len(), 3);
        assert_eq!(s.complement(5), ClassSet::from_indices([1, 4]));
        assert_eq!(s.to_string(), "{1,3,4}");
        assert_eq!(s.remove(2), ClassSet::from_indices([0, 3]));
    }
}
