//! Subset rate bounds and membership checks for candidate operating
//! points.
//!
//! On each dimension `p` the admissible description rates form a
//! contrapolymatroid: writing `c_k = (1 − e^{−2 r_k})/σ²_{N_k}` and
//! `s = 1/σ²_X`, every device subset `A` must satisfy
//!
//! ```text
//!     Σ_{k∈A} R_k  ≥  g(A) = Σ_{k∈A} r_k + ½ log(s + Σ_k c_k)
//!                             − ½ log(s + Σ_{k∉A} c_k).
//! ```
//!
//! `g` is normalized (`g(∅) = 0`, exactly, because both logs see the same
//! sum), monotone, and supermodular: adding a device to a larger set costs
//! more, since the complement's precision is smaller. Supermodularity is
//! what makes the corner-point construction below work: for any device
//! permutation, charging each device its marginal `g`-increment yields a
//! point that meets every subset constraint.
//!
//! A candidate point for the whole problem supplies per-device totals
//! `R_k` and is admissible when some split `R_{k,p}` with
//! `Σ_p R_{k,p} = R_k` lands inside every dimension's region. With the
//! split supplied, [`check_membership`] verifies all `P · (2^K − 1)`
//! constraints directly — an exact decision. Without one it searches:
//! greedy corner decompositions (all permutations for small `K`, the
//! ascending-budget permutation otherwise) prove membership when they fit
//! under the totals, and a violated *aggregate* bound
//! `Σ_{k∈A} R_k ≥ Σ_p g_p(A)` disproves membership outright. A point that
//! fails the search but passes every aggregate bound is reported as a
//! rejection with a [`SearchFailure`] attached: the search is a sound
//! accepter but an incomplete rejecter, and the report says which case
//! occurred.

use super::{rate_precision_sum, DistortionAllocation, RateAllocation, BALANCE_TOL};
use crate::problem::ProblemSpec;
use crate::rate_region::RatePoint;
use crate::unit::RateUnit;
use crate::{Error, Result};
use serde::Serialize;

/// Outcome of a membership check.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Accept => "ACCEPT",
            Verdict::Reject => "REJECT",
        })
    }
}

/// One violated subset constraint.
#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    /// Dimension whose bound failed; `None` for an *aggregate* bound
    /// (summed over all dimensions), which no decomposition of the totals
    /// can satisfy.
    pub dimension: Option<usize>,
    /// The violating device subset, ascending indices.
    pub subset: Vec<usize>,
    /// Required minimum for the subset's rate sum.
    pub bound: f64,
    /// What the candidate point actually supplies.
    pub supplied: f64,
}

/// Diagnostic attached when the decomposition search gives up without a
/// proof either way: the greedy corner charges exceeded some device's
/// budget, but no aggregate bound was violated.
#[derive(Clone, Debug, Serialize)]
pub struct SearchFailure {
    /// Device whose budget the best corner decomposition overshot.
    pub device: usize,
    /// How much rate that device was short by.
    pub deficit: f64,
}

/// Tunables for [`check_membership`].
#[derive(Clone, Debug)]
pub struct MembershipOptions {
    /// Numerical slack on every `≥` comparison, relative to
    /// `max(1, |bound|)`.
    pub slack: f64,
    /// Refuse to enumerate subsets for more devices than this unless
    /// `allow_large_k` is set (the cost is `2^K − 1` per dimension).
    pub max_devices: usize,
    /// Lift the device cap (within the hard mask width of 63).
    pub allow_large_k: bool,
    /// Search for a rate decomposition when the point supplies none;
    /// disabled means strict certificate checking
    /// ([`Error::CertificateMissing`] for totals-only points).
    pub search_decomposition: bool,
    /// Report every violated subset instead of stopping at the first.
    pub collect_all_violations: bool,
}

impl Default for MembershipOptions {
    fn default() -> Self {
        MembershipOptions {
            slack: 1e-9,
            max_devices: 20,
            allow_large_k: false,
            search_decomposition: true,
            collect_all_violations: false,
        }
    }
}

/// What [`check_membership`] found, with enough detail to act on.
#[derive(Clone, Debug, Serialize)]
pub struct MembershipReport {
    pub verdict: Verdict,
    /// Unit for every rate in the report (the rate allocation's unit).
    pub unit: RateUnit,
    /// Violated constraints (empty on accept; only the first one unless
    /// `collect_all_violations` was set). Any entry — per-dimension or
    /// aggregate — is a proof of non-membership.
    pub violations: Vec<Violation>,
    /// A per-dimension split `R_{k,p}` (rows = devices) certifying an
    /// accept; the supplied one, or the one the search constructed.
    pub decomposition: Option<Vec<Vec<f64>>>,
    /// Present when the verdict is a *heuristic* reject: the search found
    /// neither a fitting decomposition nor a violated aggregate bound.
    pub search_failure: Option<SearchFailure>,
}

/// Per-dimension bound evaluator: rates, their precision contributions,
/// and the shared log argument, precomputed once.
struct DimBound {
    rates: Vec<f64>,
    contrib: Vec<f64>,
    inv_sx: f64,
    sum_all: f64,
    unit: RateUnit,
}

impl DimBound {
    fn new(
        spec: &ProblemSpec,
        p: usize,
        rates_p: &[f64],
        d_p: f64,
        unit: RateUnit,
    ) -> Result<Self> {
        if !d_p.is_finite() || d_p <= 0.0 {
            return Err(Error::DistortionNonpositive { d: d_p });
        }
        // Validates lengths and signs, and fixes the summation order.
        let sum_all = rate_precision_sum(spec, p, rates_p, unit)?;
        let residual = (sum_all - 1.0 / d_p).abs();
        if residual > BALANCE_TOL {
            return Err(Error::InconsistentAllocation {
                dimension: p,
                residual,
                tolerance: BALANCE_TOL,
            });
        }
        let contrib = (0..spec.devices())
            .map(|k| (1.0 - unit.exp_neg2(rates_p[k])) / spec.sigma_n_sq(k, p))
            .collect();
        Ok(DimBound {
            rates: rates_p.to_vec(),
            contrib,
            inv_sx: 1.0 / spec.sigma_x_sq(p),
            sum_all,
            unit,
        })
    }

    /// `g(A)` for the subset encoded in `mask` (bit `k` ⇔ device `k`).
    ///
    /// The complement's precision is summed in the same ascending device
    /// order as `sum_all`, so the empty subset's two logs cancel *exactly*.
    fn bound_mask(&self, mask: u64) -> f64 {
        let mut rate_sum = 0.0;
        let mut comp = 0.0;
        for k in 0..self.rates.len() {
            if mask >> k & 1 == 1 {
                rate_sum += self.rates[k];
            } else {
                comp += self.contrib[k];
            }
        }
        rate_sum + 0.5 * self.unit.log(self.inv_sx + self.sum_all)
            - 0.5 * self.unit.log(self.inv_sx + comp)
    }

    /// Marginal cost of appending one device when the complement currently
    /// holds precision `comp` (telescoping term of the corner point).
    fn corner_increment(&self, k: usize, comp: f64) -> f64 {
        self.rates[k] + 0.5 * self.unit.log(self.inv_sx + comp)
            - 0.5 * self.unit.log(self.inv_sx + (comp - self.contrib[k]))
    }
}

/// Right-hand side of the subset constraint on dimension `p`:
/// `Σ_{k∈A} r_k + ½log(1/σ²_X + Σ_k c_k) − ½log(1/σ²_X + Σ_{k∉A} c_k)`
/// with `c_k = (1 − e^{−2 r_k})/σ²_{N_k}`, in `unit`.
///
/// Requires the rates to balance `d_p` within [`BALANCE_TOL`] (else
/// [`Error::InconsistentAllocation`]); under that equality the total
/// precision *is* `1/D`, and using it in both logs makes the empty-subset
/// bound exactly zero. `subset` lists device indices (any order, no
/// duplicates).
pub fn subset_rate_bound(
    spec: &ProblemSpec,
    p: usize,
    rates_p: &[f64],
    d_p: f64,
    subset: &[usize],
    unit: RateUnit,
) -> Result<f64> {
    let dim = DimBound::new(spec, p, rates_p, d_p, unit)?;
    let mut mask: u64 = 0;
    for &k in subset {
        if k >= spec.devices() {
            return Err(Error::InvalidInput(format!(
                "subset device index {k} out of range for {} devices",
                spec.devices()
            )));
        }
        if mask >> k & 1 == 1 {
            return Err(Error::InvalidInput(format!(
                "subset lists device {k} twice"
            )));
        }
        mask |= 1 << k;
    }
    Ok(dim.bound_mask(mask))
}

fn mask_to_subset(mask: u64, devices: usize) -> Vec<usize> {
    (0..devices).filter(|&k| mask >> k & 1 == 1).collect()
}

/// Scan one dimension's `2^K − 1` constraints against supplied rates.
/// Pushes violations; returns early after the first unless collecting.
fn scan_dimension(
    dim_index: usize,
    dim: &DimBound,
    supplied: &[f64],
    opts: &MembershipOptions,
    violations: &mut Vec<Violation>,
) {
    let devices = supplied.len();
    for mask in 1u64..(1u64 << devices) {
        let bound = dim.bound_mask(mask);
        let sum: f64 = (0..devices)
            .filter(|&k| mask >> k & 1 == 1)
            .map(|k| supplied[k])
            .sum();
        if bound - sum > opts.slack * bound.abs().max(1.0) {
            violations.push(Violation {
                dimension: Some(dim_index),
                subset: mask_to_subset(mask, devices),
                bound,
                supplied: sum,
            });
            if !opts.collect_all_violations {
                return;
            }
        }
    }
}

/// Corner-point charges for one dimension under a device permutation:
/// device `perm[i]` pays the `g`-increment of arriving `i`-th. The charges
/// telescope, so they sum exactly to `g(full set)` and satisfy every
/// subset bound (supermodularity).
fn corner_charges(dim: &DimBound, perm: &[usize]) -> Vec<f64> {
    let mut comp = dim.sum_all;
    let mut charges = vec![0.0; perm.len()];
    for &k in perm {
        charges[k] = dim.corner_increment(k, comp);
        comp -= dim.contrib[k];
    }
    charges
}

/// Greedy decomposition attempt for one permutation: per-device totals of
/// the per-dimension corner charges, and the worst budget deficit.
fn try_permutation(
    dims: &[DimBound],
    perm: &[usize],
    totals: &[f64],
) -> (Vec<Vec<f64>>, usize, f64) {
    let devices = totals.len();
    let mut split = vec![vec![0.0; dims.len()]; devices];
    for (p, dim) in dims.iter().enumerate() {
        let charges = corner_charges(dim, perm);
        for k in 0..devices {
            split[k][p] = charges[k];
        }
    }
    let mut worst_device = 0;
    let mut worst_deficit = f64::NEG_INFINITY;
    for k in 0..devices {
        let charged: f64 = split[k].iter().sum();
        let deficit = charged - totals[k];
        if deficit > worst_deficit {
            worst_deficit = deficit;
            worst_device = k;
        }
    }
    (split, worst_device, worst_deficit)
}

/// All permutations of `0..n` (used only for small `n`).
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    fn heap(k: usize, arr: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(arr.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, arr, out);
            if k % 2 == 0 {
                arr.swap(i, k - 1);
            } else {
                arr.swap(0, k - 1);
            }
        }
    }
    heap(n, &mut current, &mut out);
    out
}

/// Decide whether a candidate point lies in the achievable region
/// certified by `(allocation, rates)`.
///
/// With a supplied decomposition the decision is exact: every dimension's
/// subset bounds are enumerated and the first violation (or all of them)
/// is reported. For a totals-only point the decomposition search described
/// in the module docs runs instead — accepts and violation-carrying
/// rejects are proofs; a reject carrying only a [`SearchFailure`] is
/// heuristic. The point may be expressed in either unit; the report uses
/// the rate allocation's unit throughout.
pub fn check_membership(
    spec: &ProblemSpec,
    point: &RatePoint,
    allocation: &DistortionAllocation,
    rates: &RateAllocation,
    opts: &MembershipOptions,
) -> Result<MembershipReport> {
    let devices = spec.devices();
    let dims_n = spec.dims();
    if point.totals().len() != devices {
        return Err(Error::InvalidInput(format!(
            "point has {} device totals, spec has {devices} devices",
            point.totals().len()
        )));
    }
    if allocation.per_dim().len() != dims_n || rates.grid().len() != devices {
        return Err(Error::InvalidInput(
            "allocation/rates shapes do not match the spec".into(),
        ));
    }
    let cap = if opts.allow_large_k { 63 } else { opts.max_devices.min(63) };
    if devices > cap {
        return Err(Error::SubsetCapExceeded { k: devices, cap });
    }

    let unit = rates.unit();
    let dims: Vec<DimBound> = (0..dims_n)
        .map(|p| DimBound::new(spec, p, &rates.column(p), allocation.d(p), unit))
        .collect::<Result<_>>()?;

    let totals: Vec<f64> = point
        .totals()
        .iter()
        .map(|&r| point.unit().convert(r, unit))
        .collect();

    // Exact path: the point carries its own split.
    if let Some(r_kp) = point.decomposition() {
        if r_kp.iter().any(|row| row.len() != dims_n) {
            return Err(Error::InvalidInput(format!(
                "decomposition rows must have {dims_n} entries"
            )));
        }
        let split: Vec<Vec<f64>> = r_kp
            .iter()
            .map(|row| row.iter().map(|&r| point.unit().convert(r, unit)).collect())
            .collect();
        let mut violations = Vec::new();
        for (p, dim) in dims.iter().enumerate() {
            let column: Vec<f64> = split.iter().map(|row| row[p]).collect();
            scan_dimension(p, dim, &column, opts, &mut violations);
            if !violations.is_empty() && !opts.collect_all_violations {
                break;
            }
        }
        let verdict = if violations.is_empty() {
            Verdict::Accept
        } else {
            Verdict::Reject
        };
        return Ok(MembershipReport {
            verdict,
            unit,
            violations: violations.clone(),
            decomposition: (verdict == Verdict::Accept).then_some(split),
            search_failure: None,
        });
    }

    if !opts.search_decomposition {
        return Err(Error::CertificateMissing);
    }

    // Search path. Ascending-budget order puts the most expensive (last)
    // corner positions on the devices with the most rate to spend; for
    // small K simply try every order.
    let perms: Vec<Vec<usize>> = if devices <= 6 {
        permutations(devices)
    } else {
        let mut by_budget: Vec<usize> = (0..devices).collect();
        by_budget.sort_by(|&a, &b| totals[a].total_cmp(&totals[b]).then(a.cmp(&b)));
        vec![by_budget]
    };

    let mut best: Option<(Vec<Vec<f64>>, usize, f64)> = None;
    for perm in &perms {
        let attempt = try_permutation(&dims, perm, &totals);
        if best.as_ref().is_none_or(|b| attempt.2 < b.2) {
            best = Some(attempt);
        }
        if best.as_ref().unwrap().2 <= 0.0 {
            break;
        }
    }
    let (mut split, worst_device, worst_deficit) =
        best.expect("at least one permutation is always tried");

    if worst_deficit <= opts.slack {
        // Hand each device its leftover budget on dimension 0 — extra rate
        // never violates a lower bound — so the split sums back to the
        // totals exactly.
        for (k, row) in split.iter_mut().enumerate() {
            let leftover = totals[k] - row.iter().sum::<f64>();
            row[0] = (row[0] + leftover).max(0.0);
        }
        // Corner points satisfy their bounds by construction; re-verify to
        // catch any floating-point surprise rather than trust algebra.
        let mut violations = Vec::new();
        for (p, dim) in dims.iter().enumerate() {
            let column: Vec<f64> = split.iter().map(|row| row[p]).collect();
            scan_dimension(p, dim, &column, opts, &mut violations);
        }
        if violations.is_empty() {
            return Ok(MembershipReport {
                verdict: Verdict::Accept,
                unit,
                violations,
                decomposition: Some(split),
                search_failure: None,
            });
        }
        return Err(Error::SolverFailure(format!(
            "constructed corner decomposition failed re-verification on dimension {:?}",
            violations[0].dimension
        )));
    }

    // No fitting decomposition. Look for an aggregate-bound violation,
    // which rules out every decomposition at once.
    let mut violations = Vec::new();
    for mask in 1u64..(1u64 << devices) {
        let bound: f64 = dims.iter().map(|dim| dim.bound_mask(mask)).sum();
        let sum: f64 = (0..devices)
            .filter(|&k| mask >> k & 1 == 1)
            .map(|k| totals[k])
            .sum();
        if bound - sum > opts.slack * bound.abs().max(1.0) {
            violations.push(Violation {
                dimension: None,
                subset: mask_to_subset(mask, devices),
                bound,
                supplied: sum,
            });
            if !opts.collect_all_violations {
                break;
            }
        }
    }
    let search_failure = violations.is_empty().then_some(SearchFailure {
        device: worst_device,
        deficit: worst_deficit,
    });
    Ok(MembershipReport {
        verdict: Verdict::Reject,
        unit,
        violations,
        decomposition: None,
        search_failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// σ²_X = 1, σ²_N = (1, 4); rates (1.5, 0.5) bits balance D = 1.
    fn worked_spec() -> ProblemSpec {
        ProblemSpec::new(vec![1.0], vec![vec![1.0], vec![4.0]]).unwrap()
    }

    fn worked_bound(subset: &[usize]) -> f64 {
        subset_rate_bound(&worked_spec(), 0, &[1.5, 0.5], 1.0, subset, RateUnit::Bits).unwrap()
    }

    #[test]
    fn worked_subset_bounds() {
        assert!((worked_bound(&[0]) - 1.915_037_499_278_844).abs() < 1e-12);
        assert!((worked_bound(&[1]) - 0.546_554_702_195_740_7).abs() < 1e-12);
        assert_eq!(worked_bound(&[0, 1]), 2.5);
        assert_eq!(worked_bound(&[]), 0.0);
    }

    #[test]
    fn subset_bound_rejects_inconsistent_rates() {
        // (1 - 2^-2)/1 + (1 - 2^-1)/4 = 0.875 != 1/1.
        let err =
            subset_rate_bound(&worked_spec(), 0, &[1.0, 0.5], 1.0, &[0], RateUnit::Bits)
                .unwrap_err();
        assert!(matches!(err, Error::InconsistentAllocation { dimension: 0, .. }));
    }

    #[test]
    fn subset_bound_validates_indices() {
        assert!(subset_rate_bound(&worked_spec(), 0, &[1.5, 0.5], 1.0, &[2], RateUnit::Bits)
            .is_err());
        assert!(
            subset_rate_bound(&worked_spec(), 0, &[1.5, 0.5], 1.0, &[0, 0], RateUnit::Bits)
                .is_err()
        );
    }

    fn worked_certificate() -> (ProblemSpec, DistortionAllocation, RateAllocation) {
        let spec = worked_spec();
        let allocation = DistortionAllocation::new(&spec, vec![1.0], 1.0).unwrap();
        let rates =
            RateAllocation::new(&spec, vec![vec![1.5], vec![0.5]], RateUnit::Bits).unwrap();
        (spec, allocation, rates)
    }

    #[test]
    fn accepts_the_worked_point_with_decomposition() {
        let (spec, allocation, rates) = worked_certificate();
        let point = RatePoint::with_decomposition(
            vec![2.0, 1.0],
            vec![vec![2.0], vec![1.0]],
            RateUnit::Bits,
        )
        .unwrap();
        let report = check_membership(
            &spec,
            &point,
            &allocation,
            &rates,
            &MembershipOptions::default(),
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::Accept);
        assert!(report.violations.is_empty());
        assert_eq!(report.decomposition.as_deref(), Some(&[vec![2.0], vec![1.0]][..]));
    }

    #[test]
    fn rejects_at_the_first_violated_subset() {
        let (spec, allocation, rates) = worked_certificate();
        let point = RatePoint::with_decomposition(
            vec![1.0, 1.0],
            vec![vec![1.0], vec![1.0]],
            RateUnit::Bits,
        )
        .unwrap();
        let report = check_membership(
            &spec,
            &point,
            &allocation,
            &rates,
            &MembershipOptions::default(),
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::Reject);
        assert_eq!(report.violations.len(), 1);
        let v = &report.violations[0];
        assert_eq!(v.dimension, Some(0));
        assert_eq!(v.subset, vec![0]); // device 0 alone: 1.0 < 1.9150…
        assert!((v.bound - 1.915_037_499_278_844).abs() < 1e-12);
        assert_eq!(v.supplied, 1.0);

        let mut all = MembershipOptions::default();
        all.collect_all_violations = true;
        let report =
            check_membership(&spec, &point, &allocation, &rates, &all).unwrap();
        // {0} fails (1.0 < 1.9150) and {0,1} fails (2.0 < 2.5); {1} holds.
        assert_eq!(report.violations.len(), 2);
        assert_eq!(report.violations[1].subset, vec![0, 1]);
    }

    #[test]
    fn search_accepts_feasible_totals() {
        let (spec, allocation, rates) = worked_certificate();
        let point = RatePoint::totals_only(vec![2.0, 1.0], RateUnit::Bits).unwrap();
        let report = check_membership(
            &spec,
            &point,
            &allocation,
            &rates,
            &MembershipOptions::default(),
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::Accept);
        let split = report.decomposition.expect("accept carries a decomposition");
        // P = 1: the split must hand every device exactly its total.
        assert!((split[0][0] - 2.0).abs() < 1e-12);
        assert!((split[1][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn search_rejects_with_an_aggregate_proof() {
        let (spec, allocation, rates) = worked_certificate();
        let point = RatePoint::totals_only(vec![1.0, 1.0], RateUnit::Bits).unwrap();
        let report = check_membership(
            &spec,
            &point,
            &allocation,
            &rates,
            &MembershipOptions::default(),
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::Reject);
        assert!(report.search_failure.is_none(), "this reject is provable");
        let v = &report.violations[0];
        assert_eq!(v.dimension, None);
        assert_eq!(v.subset, vec![0]); // 1.0 < 1.9150 already as an aggregate
    }

    /// Two identical copies of the worked dimension: per-device corner
    /// charges double, so totals just above (2 × 1.9535, 2 × 0.5466) are
    /// accepted and a deficit on the small device is provably rejected.
    fn doubled_certificate() -> (ProblemSpec, DistortionAllocation, RateAllocation) {
        let spec =
            ProblemSpec::new(vec![1.0, 1.0], vec![vec![1.0, 1.0], vec![4.0, 4.0]]).unwrap();
        let allocation = DistortionAllocation::new(&spec, vec![1.0, 1.0], 2.0).unwrap();
        let rates = RateAllocation::new(
            &spec,
            vec![vec![1.5, 1.5], vec![0.5, 0.5]],
            RateUnit::Bits,
        )
        .unwrap();
        (spec, allocation, rates)
    }

    #[test]
    fn search_splits_across_dimensions() {
        let (spec, allocation, rates) = doubled_certificate();
        let point = RatePoint::totals_only(vec![3.95, 1.10], RateUnit::Bits).unwrap();
        let report = check_membership(
            &spec,
            &point,
            &allocation,
            &rates,
            &MembershipOptions::default(),
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::Accept);
        let split = report.decomposition.unwrap();
        for (k, row) in split.iter().enumerate() {
            let total: f64 = row.iter().sum();
            assert!(
                (total - point.totals()[k]).abs() < 1e-9,
                "device {k}: split sums to {total}"
            );
        }

        // Device 1 needs ~2 × 0.5466 = 1.0931 in total; 1.05 cannot work,
        // and the aggregate bound for {1} proves it.
        let short = RatePoint::totals_only(vec![3.95, 1.05], RateUnit::Bits).unwrap();
        let report = check_membership(
            &spec,
            &short,
            &allocation,
            &rates,
            &MembershipOptions::default(),
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::Reject);
        let v = &report.violations[0];
        assert_eq!(v.dimension, None);
        assert_eq!(v.subset, vec![1]);
        assert!((v.bound - 2.0 * 0.546_554_702_195_740_7).abs() < 1e-9);
    }

    #[test]
    fn strict_mode_requires_a_decomposition() {
        let (spec, allocation, rates) = worked_certificate();
        let point = RatePoint::totals_only(vec![2.0, 1.0], RateUnit::Bits).unwrap();
        let mut strict = MembershipOptions::default();
        strict.search_decomposition = false;
        let err = check_membership(&spec, &point, &allocation, &rates, &strict).unwrap_err();
        assert!(matches!(err, Error::CertificateMissing));
    }

    #[test]
    fn device_cap_is_enforced_and_liftable() {
        let k = 5;
        let spec = ProblemSpec::new(vec![1.0], vec![vec![1.0]; k]).unwrap();
        // All devices at r = 1 bit: precision k (1 - 1/4) = 3.75, D = 1/3.75.
        let d = 1.0 / 3.75;
        let allocation = DistortionAllocation::new(&spec, vec![d], d).unwrap();
        let rates = RateAllocation::new(&spec, vec![vec![1.0]; k], RateUnit::Bits).unwrap();
        let point = RatePoint::totals_only(vec![3.0; k], RateUnit::Bits).unwrap();

        let mut opts = MembershipOptions::default();
        opts.max_devices = 4;
        let err = check_membership(&spec, &point, &allocation, &rates, &opts).unwrap_err();
        assert!(matches!(err, Error::SubsetCapExceeded { k: 5, cap: 4 }));

        opts.allow_large_k = true;
        let report = check_membership(&spec, &point, &allocation, &rates, &opts).unwrap();
        assert_eq!(report.verdict, Verdict::Accept);
    }

    #[test]
    fn point_unit_is_normalized_to_the_rates_unit() {
        let (spec, allocation, rates) = worked_certificate();
        let in_nats = RatePoint::totals_only(
            vec![2.0 * std::f64::consts::LN_2, 1.0 * std::f64::consts::LN_2],
            RateUnit::Nats,
        )
        .unwrap();
        let report = check_membership(
            &spec,
            &in_nats,
            &allocation,
            &rates,
            &MembershipOptions::default(),
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::Accept);
        assert_eq!(report.unit, RateUnit::Bits);
    }

    /// Random consistent certificates for the property tests: rates drawn
    /// positive, distortion taken as the induced one so the balance holds
    /// bit-exactly.
    fn arb_certificate() -> impl Strategy<Value = (ProblemSpec, Vec<f64>, f64)> {
        (2usize..=5)
            .prop_flat_map(|k| {
                (
                    proptest::collection::vec(0.05f64..20.0, k),
                    proptest::collection::vec(0.05f64..3.0, k),
                    0.1f64..10.0,
                )
            })
            .prop_map(|(noise, rates, sx)| {
                let spec =
                    ProblemSpec::new(vec![sx], noise.iter().map(|&s| vec![s]).collect())
                        .unwrap();
                let d = super::super::induced_distortion(&spec, 0, &rates, RateUnit::Bits)
                    .unwrap();
                (spec, rates, d)
            })
    }

    proptest! {
        /// g is monotone and supermodular on random nested / crossing pairs.
        #[test]
        fn bound_is_monotone_and_supermodular(
            (spec, rates, d) in arb_certificate(),
            seed in 0u64..1_000,
        ) {
            let dim = DimBound::new(&spec, 0, &rates, d, RateUnit::Bits).unwrap();
            let k = spec.devices();
            let full = (1u64 << k) - 1;
            let a = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) & full;
            let b = (seed ^ 0x5555).wrapping_mul(0xBF58_476D_1CE4_E5B9) & full;
            // Monotone: A ⊆ A∪B.
            prop_assert!(dim.bound_mask(a) <= dim.bound_mask(a | b) + 1e-12);
            // Supermodular: g(A∪B) + g(A∩B) ≥ g(A) + g(B).
            let lhs = dim.bound_mask(a | b) + dim.bound_mask(a & b);
            let rhs = dim.bound_mask(a) + dim.bound_mask(b);
            prop_assert!(lhs >= rhs - 1e-9, "lhs {lhs} rhs {rhs}");
        }

        /// Every permutation's corner point satisfies all subset bounds
        /// and spends exactly g(full set) — the search's soundness core.
        #[test]
        fn corner_points_satisfy_every_bound(
            (spec, rates, d) in arb_certificate(),
            perm_seed in 0u64..720,
        ) {
            let dim = DimBound::new(&spec, 0, &rates, d, RateUnit::Bits).unwrap();
            let k = spec.devices();
            let mut perm: Vec<usize> = (0..k).collect();
            // Fisher–Yates driven by the seed.
            let mut state = perm_seed;
            for i in (1..k).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                let j = (state >> 33) as usize % (i + 1);
                perm.swap(i, j);
            }
            let charges = corner_charges(&dim, &perm);
            let full = (1u64 << k) - 1;
            let spent: f64 = charges.iter().sum();
            prop_assert!((spent - dim.bound_mask(full)).abs() <= 1e-9 * spent.abs().max(1.0));
            for mask in 1u64..=full {
                let got: f64 = (0..k).filter(|&i| mask >> i & 1 == 1).map(|i| charges[i]).sum();
                let need = dim.bound_mask(mask);
                prop_assert!(got >= need - 1e-9 * need.abs().max(1.0),
                    "mask {mask:b}: {got} < {need}");
            }
        }
    }
}
