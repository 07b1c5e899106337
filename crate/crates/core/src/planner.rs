//! Global planning: size bounds `(L, H)` and per-ROI supervertex counts.
//!
//! For a bound pair, ROI `r` with `n_r` vertices may receive any count in
//! `[ceil(n_r / H), floor(n_r / L)]`. Among allocations summing to
//! `K_total`, the planner picks one minimising
//! `sum_r (n_r / K_r - s)^2` with `s = sum_r n_r / K_total`. Candidate
//! bound pairs are tried from tight to loose.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::atlas::RoiId;
use crate::error::{Error, Result};

/// Closed integer interval of admissible supervertex counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub lo: usize,
    pub hi: usize,
}

impl CountRange {
    pub fn contains(&self, k: usize) -> bool {
        self.lo <= k && k <= self.hi
    }

    /// Range of counts achievable by several disjoint pieces together.
    fn sum(ranges: impl IntoIterator<Item = Option<CountRange>>) -> Option<CountRange> {
        let mut lo = 0;
        let mut hi = 0;
        for r in ranges {
            let r = r?;
            lo += r.lo;
            hi += r.hi;
        }
        Some(CountRange { lo, hi })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: usize,
    pub upper: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub lower: usize,
    pub upper: usize,
    pub counts: BTreeMap<RoiId, usize>,
    pub k_total: usize,
    /// Index of the candidate bound pair used (0 = tightest).
    pub relaxation_rank: usize,
}

impl PartitionPlan {
    pub fn bounds(&self) -> Bounds {
        Bounds {
            lower: self.lower,
            upper: self.upper,
        }
    }

    /// Checks the plan's structural invariants against ROI sizes.
    pub fn check(&self, sizes: &BTreeMap<RoiId, usize>) -> Result<()> {
        if self.lower < 1 || self.lower > self.upper {
            return Err(Error::Validation(format!(
                "bounds ({}, {}) are not ordered",
                self.lower, self.upper
            )));
        }
        let total: usize = self.counts.values().sum();
        if total != self.k_total {
            return Err(Error::Validation(format!(
                "counts sum to {total}, expected {}",
                self.k_total
            )));
        }
        if self.counts.len() != sizes.len() || self.counts.keys().ne(sizes.keys()) {
            return Err(Error::Validation("plan and sizes cover different ROIs".into()));
        }
        for (roi, &n) in sizes {
            let k = self.counts[roi];
            match feasible_range(n, self.lower, self.upper) {
                Some(r) if r.contains(k) => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "ROI {roi}: count {k} violates size bounds for {n} vertices"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// `[ceil(n / upper), floor(n / lower)]`, or `None` when empty.
pub fn feasible_range(n: usize, lower: usize, upper: usize) -> Option<CountRange> {
    assert!(lower >= 1 && lower <= upper, "invalid bounds ({lower}, {upper})");
    let lo = n.div_ceil(upper);
    let hi = n / lower;
    (lo <= hi).then_some(CountRange { lo, hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Initial half-width as a fraction of the mean size: `delta0 = ceil(f * s)`.
    pub initial_width_fraction: f64,
    /// Amount `L` drops and `H` grows per relaxation.
    pub relax_step: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            initial_width_fraction: 0.15,
            relax_step: 1,
        }
    }
}

fn mean_size(sizes: &BTreeMap<RoiId, usize>, k_total: usize) -> f64 {
    sizes.values().sum::<usize>() as f64 / k_total as f64
}

/// Candidate `(L, H)` pairs from tightest to loosest, ending at `(1, max n_r)`.
pub fn candidate_bounds(
    sizes: &BTreeMap<RoiId, usize>,
    k_total: usize,
    config: &PlannerConfig,
) -> Result<Vec<Bounds>> {
    if sizes.is_empty() {
        return Err(Error::Infeasible("no cortical ROIs to plan".into()));
    }
    if let Some((roi, _)) = sizes.iter().find(|(_, &n)| n == 0) {
        return Err(Error::Infeasible(format!("ROI {roi} is empty")));
    }
    if k_total < sizes.len() {
        return Err(Error::Infeasible(format!(
            "K_total {k_total} is below the ROI count {}",
            sizes.len()
        )));
    }
    let s = mean_size(sizes, k_total);
    let max_n = *sizes.values().max().unwrap();
    let delta0 = (config.initial_width_fraction * s).ceil() as usize;
    let step = config.relax_step.max(1);
    let lower0 = (s.floor() as usize).max(1);
    let upper0 = s.ceil() as usize + delta0;

    let mut out: Vec<Bounds> = Vec::new();
    for i in 0.. {
        let shift = i * step;
        let lower = lower0.saturating_sub(shift).max(1);
        let upper = (upper0 + shift).min(max_n).max(lower);
        let b = Bounds { lower, upper };
        if out.last() != Some(&b) {
            out.push(b);
        }
        if lower == 1 && upper >= max_n {
            break;
        }
    }
    Ok(out)
}

/// Per-ROI objective term, shared by the optimiser and [`allocation_objective`].
#[inline]
fn term(n: usize, k: usize, mean: f64) -> f64 {
    let d = n as f64 / k as f64 - mean;
    d * d
}

/// `sum_r (n_r / K_r - s)^2`, accumulated in ascending ROI order.
pub fn allocation_objective(
    sizes: &BTreeMap<RoiId, usize>,
    counts: &BTreeMap<RoiId, usize>,
    k_total: usize,
) -> f64 {
    let mean = mean_size(sizes, k_total);
    sizes
        .iter()
        .fold(0.0, |acc, (roi, &n)| acc + term(n, counts[roi], mean))
}

/// Exact minimiser of the imbalance objective over per-ROI ranges.
///
/// Dynamic programme over ROIs (ascending id) and running count. The
/// objective is accumulated left to right exactly as
/// [`allocation_objective`] does; floating-point addition is monotone in
/// each operand, so keeping the minimal prefix sum per state yields the
/// minimal final value. Equal values keep the lexicographically smallest
/// count vector.
pub(crate) fn optimal_allocation(
    sizes: &BTreeMap<RoiId, usize>,
    ranges: &BTreeMap<RoiId, CountRange>,
    k_total: usize,
) -> Option<BTreeMap<RoiId, usize>> {
    let mean = mean_size(sizes, k_total);
    // state[s] = (prefix objective, prefix counts) with counts summing to s.
    let mut state: Vec<Option<(f64, Vec<usize>)>> = vec![None; k_total + 1];
    state[0] = Some((0.0, Vec::new()));
    for (roi, &n) in sizes {
        let range = ranges[roi];
        let mut next: Vec<Option<(f64, Vec<usize>)>> = vec![None; k_total + 1];
        for (s, entry) in state.iter().enumerate() {
            let Some((acc, prefix)) = entry else { continue };
            for k in range.lo..=range.hi.min(k_total - s) {
                let value = acc + term(n, k, mean);
                let slot = &mut next[s + k];
                let better = match slot {
                    None => true,
                    Some((v, p)) => {
                        value < *v
                            || (value == *v
                                && (prefix.as_slice(), k) < (&p[..p.len() - 1], p[p.len() - 1]))
                    }
                };
                if better {
                    let mut p = prefix.clone();
                    p.push(k);
                    *slot = Some((value, p));
                }
            }
        }
        state = next;
    }
    let (_, counts) = state.pop()??;
    Some(sizes.keys().copied().zip(counts).collect())
}

/// Best allocation for fixed bounds, or an infeasibility error.
pub fn plan_allocation(
    sizes: &BTreeMap<RoiId, usize>,
    k_total: usize,
    bounds: Bounds,
) -> Result<PartitionPlan> {
    let ranges = eq_ranges(sizes, bounds)?;
    allocate_with_ranges(sizes, &ranges, k_total, bounds, 0)
}

fn eq_ranges(
    sizes: &BTreeMap<RoiId, usize>,
    bounds: Bounds,
) -> Result<BTreeMap<RoiId, CountRange>> {
    if bounds.lower < 1 || bounds.lower > bounds.upper {
        return Err(Error::Validation(format!("invalid bounds {bounds:?}")));
    }
    sizes
        .iter()
        .map(|(&roi, &n)| {
            feasible_range(n, bounds.lower, bounds.upper)
                .map(|r| (roi, r))
                .ok_or_else(|| {
                    Error::Infeasible(format!(
                        "ROI {roi} ({n} vertices) admits no count within ({}, {})",
                        bounds.lower, bounds.upper
                    ))
                })
        })
        .collect()
}

fn allocate_with_ranges(
    sizes: &BTreeMap<RoiId, usize>,
    ranges: &BTreeMap<RoiId, CountRange>,
    k_total: usize,
    bounds: Bounds,
    rank: usize,
) -> Result<PartitionPlan> {
    let lo: usize = ranges.values().map(|r| r.lo).sum();
    let hi: usize = ranges.values().map(|r| r.hi).sum();
    if k_total < lo || k_total > hi {
        return Err(Error::Infeasible(format!(
            "K_total {k_total} outside achievable [{lo}, {hi}] at ({}, {})",
            bounds.lower, bounds.upper
        )));
    }
    let counts = optimal_allocation(sizes, ranges, k_total)
        .ok_or_else(|| Error::Infeasible("no allocation sums to K_total".into()))?;
    Ok(PartitionPlan {
        lower: bounds.lower,
        upper: bounds.upper,
        counts,
        k_total,
        relaxation_rank: rank,
    })
}

/// Searches candidate bounds in order, resuming after a rejected plan.
#[derive(Debug, Clone)]
pub struct Planner {
    sizes: BTreeMap<RoiId, usize>,
    /// Connected-component sizes per ROI; when present, counts must be
    /// splittable across components with each piece inside the bounds.
    components: Option<BTreeMap<RoiId, Vec<usize>>>,
    k_total: usize,
    candidates: Vec<Bounds>,
}

impl Planner {
    pub fn new(sizes: BTreeMap<RoiId, usize>, k_total: usize, config: &PlannerConfig) -> Result<Self> {
        let candidates = candidate_bounds(&sizes, k_total, config)?;
        Ok(Planner {
            sizes,
            components: None,
            k_total,
            candidates,
        })
    }

    /// Like [`Planner::new`], but tightens each ROI's range to what its
    /// connected components can jointly realise.
    pub fn with_components(
        components: BTreeMap<RoiId, Vec<usize>>,
        k_total: usize,
        config: &PlannerConfig,
    ) -> Result<Self> {
        let sizes = components
            .iter()
            .map(|(&r, c)| (r, c.iter().sum()))
            .collect();
        let mut planner = Self::new(sizes, k_total, config)?;
        planner.components = Some(components);
        Ok(planner)
    }

    pub fn candidates(&self) -> &[Bounds] {
        &self.candidates
    }

    pub fn sizes(&self) -> &BTreeMap<RoiId, usize> {
        &self.sizes
    }

    fn ranges(&self, b: Bounds) -> Result<BTreeMap<RoiId, CountRange>> {
        let mut ranges = eq_ranges(&self.sizes, b)?;
        if let Some(components) = &self.components {
            for (roi, comps) in components {
                let joint = CountRange::sum(
                    comps.iter().map(|&c| feasible_range(c, b.lower, b.upper)),
                )
                .ok_or_else(|| {
                    Error::Infeasible(format!(
                        "ROI {roi} has a component outside ({}, {})",
                        b.lower, b.upper
                    ))
                })?;
                let r = ranges.get_mut(roi).expect("same ROI set");
                r.lo = r.lo.max(joint.lo);
                r.hi = r.hi.min(joint.hi);
                if r.lo > r.hi {
                    return Err(Error::Infeasible(format!("ROI {roi} components conflict")));
                }
            }
        }
        Ok(ranges)
    }

    /// First feasible plan at candidate index `start` or later.
    pub fn plan_from(&self, start: usize) -> Result<PartitionPlan> {
        let mut last_reason = String::from("no candidates left");
        for (rank, &b) in self.candidates.iter().enumerate().skip(start) {
            match self
                .ranges(b)
                .and_then(|r| allocate_with_ranges(&self.sizes, &r, self.k_total, b, rank))
            {
                Ok(plan) => return Ok(plan),
                Err(e) => last_reason = e.to_string(),
            }
        }
        Err(Error::Unpartitionable {
            trail: vec![format!("planner exhausted: {last_reason}"), self.range_diagnostic()],
        })
    }

    pub fn plan(&self) -> Result<PartitionPlan> {
        self.plan_from(0)
    }

    /// Resumes after `plan` was rejected downstream.
    pub fn plan_next(&self, plan: &PartitionPlan) -> Result<PartitionPlan> {
        self.plan_from(plan.relaxation_rank + 1)
    }

    fn range_diagnostic(&self) -> String {
        let Some(&b) = self.candidates.last() else {
            return String::new();
        };
        let parts: Vec<String> = self
            .sizes
            .iter()
            .map(|(roi, &n)| match feasible_range(n, b.lower, b.upper) {
                Some(r) => format!("{roi}:n={n}:[{},{}]", r.lo, r.hi),
                None => format!("{roi}:n={n}:empty"),
            })
            .collect();
        format!(
            "ranges at ({}, {}) with K_total {}: {}",
            b.lower,
            b.upper,
            self.k_total,
            parts.join(" ")
        )
    }
}

/// Plans with the default candidate schedule.
pub fn plan(sizes: &BTreeMap<RoiId, usize>, k_total: usize) -> Result<PartitionPlan> {
    Planner::new(sizes.clone(), k_total, &PlannerConfig::default())?.plan()
}
