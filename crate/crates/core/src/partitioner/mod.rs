//! ROI-preserving supervertex partitioning.
//!
//! The pipeline per hemisphere: plan bounds and per-ROI counts, split each
//! ROI's count over its connected components, seed by farthest-point
//! sampling (optionally refined), grow quota-sized supervertices, then
//! balance them into `[L, H]`. A plan that cannot be realised is rejected
//! and planning resumes with looser bounds.

mod balance;
mod face;
mod grow;
mod seeds;
mod validate;

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use balance::{balance, total_violation, BalanceConfig, BalanceFailure};
pub use face::{face_partition, FacePartition};
pub use grow::{cascade_repair, complete_assignment, grow, AbsorbRule, GrowFailure, UNASSIGNED};
pub use seeds::{
    fps_seeds, medoid, quotas, refine_seeds, BalancedPartitioner, ComponentGraph, GreedyGrowth,
    RefineOutcome,
};
pub use validate::{validate, validate_face_partition, CheckResult, ValidationReport};

use crate::atlas::{AtlasLabeling, RoiId};
use crate::binio::{self, looks_like_json};
use crate::error::{Error, Result};
use crate::mesh::{connected_components, one_ring, Adjacency, Mesh};
use crate::planner::{feasible_range, PartitionPlan, Planner, PlannerConfig};

const CSVMAP_MAGIC: &[u8; 7] = b"CSVMAP1";
const NONE_ID: u32 = u32::MAX;

/// Final partition of one hemisphere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvMap {
    /// Supervertex of each mesh vertex; `None` for excluded vertices.
    pub csv_of: Vec<Option<usize>>,
    /// Sorted member vertices of each supervertex.
    pub members: Vec<Vec<usize>>,
    pub roi_of_csv: Vec<RoiId>,
    pub v_max: usize,
    pub plan: PartitionPlan,
}

impl CsvMap {
    pub fn num_csvs(&self) -> usize {
        self.members.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.csv_of.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Rebuilds `members` and `v_max` from `csv_of`.
    fn from_assignment(
        csv_of: Vec<Option<usize>>,
        roi_of_csv: Vec<RoiId>,
        plan: PartitionPlan,
    ) -> Result<Self> {
        let mut members = vec![Vec::new(); roi_of_csv.len()];
        for (v, c) in csv_of.iter().enumerate() {
            if let Some(c) = *c {
                members
                    .get_mut(c)
                    .ok_or_else(|| Error::Format(format!("vertex {v} maps to unknown CSV {c}")))?
                    .push(v);
            }
        }
        let v_max = members.iter().map(Vec::len).max().unwrap_or(0);
        Ok(CsvMap {
            csv_of,
            members,
            roi_of_csv,
            v_max,
            plan,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(32 + self.csv_of.len() * 4 + self.roi_of_csv.len() * 4);
        buf.write_all(CSVMAP_MAGIC)?;
        binio::write_u32(&mut buf, self.plan.k_total as u32)?;
        binio::write_u32(&mut buf, self.v_max as u32)?;
        binio::write_u32(&mut buf, self.csv_of.len() as u32)?;
        for c in &self.csv_of {
            binio::write_u32(&mut buf, c.map_or(NONE_ID, |c| c as u32))?;
        }
        binio::write_u32(&mut buf, self.roi_of_csv.len() as u32)?;
        for r in &self.roi_of_csv {
            binio::write_u32(&mut buf, r.0)?;
        }
        // Plan trailer.
        binio::write_u32(&mut buf, self.plan.lower as u32)?;
        binio::write_u32(&mut buf, self.plan.upper as u32)?;
        binio::write_u32(&mut buf, self.plan.relaxation_rank as u32)?;
        binio::write_u32(&mut buf, self.plan.counts.len() as u32)?;
        for (roi, &k) in &self.plan.counts {
            binio::write_u32(&mut buf, roi.0)?;
            binio::write_u32(&mut buf, k as u32)?;
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const LIMIT: usize = 1 << 24;
        let mut r = Cursor::new(bytes);
        binio::expect_magic(&mut r, CSVMAP_MAGIC)?;
        let k_total = binio::read_u32(&mut r)? as usize;
        let v_max = binio::read_u32(&mut r)? as usize;
        let nv = binio::checked_len(binio::read_u32(&mut r)?, LIMIT, "vertex")?;
        let csv_of = (0..nv)
            .map(|_| binio::read_u32(&mut r).map(|c| (c != NONE_ID).then_some(c as usize)))
            .collect::<Result<Vec<_>>>()?;
        let nc = binio::checked_len(binio::read_u32(&mut r)?, LIMIT, "CSV")?;
        let roi_of_csv = (0..nc)
            .map(|_| binio::read_u32(&mut r).map(RoiId))
            .collect::<Result<Vec<_>>>()?;
        let lower = binio::read_u32(&mut r)? as usize;
        let upper = binio::read_u32(&mut r)? as usize;
        let relaxation_rank = binio::read_u32(&mut r)? as usize;
        let nr = binio::checked_len(binio::read_u32(&mut r)?, LIMIT, "plan entry")?;
        let mut counts = BTreeMap::new();
        for _ in 0..nr {
            let roi = RoiId(binio::read_u32(&mut r)?);
            counts.insert(roi, binio::read_u32(&mut r)? as usize);
        }
        let plan = PartitionPlan {
            lower,
            upper,
            counts,
            k_total,
            relaxation_rank,
        };
        let map = Self::from_assignment(csv_of, roi_of_csv, plan)?;
        if map.v_max != v_max {
            return Err(Error::Format(format!(
                "header v_max {v_max} disagrees with members ({})",
                map.v_max
            )));
        }
        Ok(map)
    }

    /// Writes the binary format, or JSON when the path ends in `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "json") {
            fs::write(path, serde_json::to_string(self)?)?;
        } else {
            fs::write(path, self.to_bytes()?)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if looks_like_json(&bytes) {
            Ok(serde_json::from_slice(&bytes)?)
        } else {
            Self::from_bytes(&bytes)
        }
    }
}

/// Supervertex adjacency: supervertices sharing at least one mesh edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvAdjacency {
    pub neighbors: Vec<Vec<usize>>,
}

pub fn sv_adjacency(csv_of: &[Option<usize>], num_svs: usize, adj: &Adjacency) -> SvAdjacency {
    let mut neighbors = vec![Vec::new(); num_svs];
    for (a, b) in adj.edges() {
        if let (Some(x), Some(y)) = (csv_of[a], csv_of[b]) {
            if x != y {
                neighbors[x].push(y);
                neighbors[y].push(x);
            }
        }
    }
    for n in &mut neighbors {
        n.sort_unstable();
        n.dedup();
    }
    SvAdjacency { neighbors }
}

/// Splits an ROI's count over its components: proportional by size
/// (largest remainder), then repaired into each component's feasible range.
pub fn distribute_counts(
    component_sizes: &[usize],
    k_roi: usize,
    lower: usize,
    upper: usize,
) -> Result<Vec<usize>> {
    let ranges = component_sizes
        .iter()
        .map(|&n| {
            feasible_range(n, lower, upper).ok_or_else(|| {
                Error::PlanRejected(format!(
                    "component of {n} vertices admits no count within ({lower}, {upper})"
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lo: usize = ranges.iter().map(|r| r.lo).sum();
    let hi: usize = ranges.iter().map(|r| r.hi).sum();
    if k_roi < lo || k_roi > hi {
        return Err(Error::PlanRejected(format!(
            "count {k_roi} cannot be split over components (achievable [{lo}, {hi}])"
        )));
    }
    let total: usize = component_sizes.iter().sum();
    let mut alloc: Vec<usize> = component_sizes.iter().map(|&n| k_roi * n / total).collect();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    // Largest remainder first; stable sort keeps earlier components on ties.
    order.sort_by_key(|&i| std::cmp::Reverse(k_roi * component_sizes[i] % total));
    let assigned: usize = alloc.iter().sum();
    for &i in order.iter().take(k_roi - assigned) {
        alloc[i] += 1;
    }
    for (a, r) in alloc.iter_mut().zip(&ranges) {
        *a = (*a).clamp(r.lo, r.hi);
    }
    // Repair: grow the component whose mean size stays largest after +1,
    // shrink the one whose mean size stays smallest after -1.
    loop {
        let sum: usize = alloc.iter().sum();
        if sum == k_roi {
            break;
        }
        let candidates = (0..alloc.len()).filter(|&i| {
            if sum < k_roi {
                alloc[i] < ranges[i].hi
            } else {
                alloc[i] > ranges[i].lo
            }
        });
        let pick = if sum < k_roi {
            candidates.reduce(|b, i| {
                let (ni, ki) = (component_sizes[i] as u128, alloc[i] as u128 + 1);
                let (nb, kb) = (component_sizes[b] as u128, alloc[b] as u128 + 1);
                if ni * kb > nb * ki {
                    i
                } else {
                    b
                }
            })
        } else {
            candidates.reduce(|b, i| {
                let (ni, ki) = (component_sizes[i] as u128, alloc[i] as u128 - 1);
                let (nb, kb) = (component_sizes[b] as u128, alloc[b] as u128 - 1);
                if ni * kb < nb * ki {
                    i
                } else {
                    b
                }
            })
        };
        let i = pick.expect("feasible totals guarantee a candidate");
        if sum < k_roi {
            alloc[i] += 1;
        } else {
            alloc[i] -= 1;
        }
    }
    Ok(alloc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub planner: PlannerConfig,
    /// Extra seed-grow attempts after a starved growth.
    pub max_retries: usize,
    pub max_passes: usize,
    pub first_improvement: bool,
    /// Refine FPS seeds with a balanced partition of each component.
    pub refine: bool,
    pub absorb: AbsorbRule,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            planner: PlannerConfig::default(),
            max_retries: 3,
            max_passes: 50,
            first_improvement: false,
            refine: false,
            absorb: AbsorbRule::MostNeighbors,
        }
    }
}

impl PartitionConfig {
    fn balance_config(&self) -> BalanceConfig {
        BalanceConfig {
            max_passes: self.max_passes,
            first_improvement: self.first_improvement,
        }
    }
}

/// A partition together with the per-stage notes gathered on the way.
#[derive(Debug, Clone)]
pub struct PartitionRun {
    pub map: CsvMap,
    pub trail: Vec<String>,
}

pub fn partition_hemisphere(
    mesh: &Mesh,
    atlas: &AtlasLabeling,
    k_total: usize,
    config: &PartitionConfig,
) -> Result<CsvMap> {
    partition_hemisphere_traced(mesh, atlas, k_total, config).map(|r| r.map)
}

/// [`partition_hemisphere`] that also returns rejected plans and fallbacks.
pub fn partition_hemisphere_traced(
    mesh: &Mesh,
    atlas: &AtlasLabeling,
    k_total: usize,
    config: &PartitionConfig,
) -> Result<PartitionRun> {
    let adj = one_ring(mesh)?;
    atlas.validate(mesh.num_vertices())?;
    let rois: Vec<(RoiId, Vec<Vec<usize>>)> = atlas
        .roi_members()
        .into_iter()
        .map(|(roi, m)| (roi, connected_components(&m, &adj)))
        .collect();
    if rois.is_empty() {
        return Err(Error::Validation("atlas has no cortical vertices".into()));
    }
    if k_total < rois.len() {
        return Err(Error::Validation(format!(
            "K_total {k_total} is below the cortical ROI count {}",
            rois.len()
        )));
    }
    let component_sizes = rois
        .iter()
        .map(|(roi, comps)| (*roi, comps.iter().map(Vec::len).collect()))
        .collect();
    let planner = Planner::with_components(component_sizes, k_total, &config.planner)?;

    let mut trail = Vec::new();
    let mut plan = planner.plan()?;
    loop {
        debug!(
            "stage=plan rank={} lower={} upper={}",
            plan.relaxation_rank, plan.lower, plan.upper
        );
        let results: Vec<Result<(Vec<Vec<usize>>, Vec<String>)>> = rois
            .par_iter()
            .map(|(roi, comps)| partition_roi(*roi, comps, &plan, mesh, &adj, config))
            .collect();
        let mut rejected = Vec::new();
        let mut svs: Vec<(RoiId, Vec<usize>)> = Vec::with_capacity(k_total);
        for ((roi, _), r) in rois.iter().zip(results) {
            match r {
                Ok((parts, notes)) => {
                    trail.extend(notes);
                    svs.extend(parts.into_iter().map(|p| (*roi, p)));
                }
                Err(e) => rejected.push(format!("ROI {roi}: {e}")),
            }
        }
        if rejected.is_empty() {
            let map = assemble(mesh.num_vertices(), svs, plan)?;
            let report = validate(&map, mesh, atlas);
            if !report.all_passed() {
                return Err(Error::Validation(format!(
                    "partition failed its own checks: {}",
                    report.failures().join(", ")
                )));
            }
            return Ok(PartitionRun { map, trail });
        }
        trail.push(format!(
            "plan rank {} ({}, {}) rejected: {}",
            plan.relaxation_rank,
            plan.lower,
            plan.upper,
            rejected.join("; ")
        ));
        plan = match planner.plan_next(&plan) {
            Ok(p) => p,
            Err(Error::Unpartitionable { trail: tail }) => {
                trail.extend(tail);
                return Err(Error::Unpartitionable { trail });
            }
            Err(e) => return Err(e),
        };
    }
}

/// Seeds, grows and balances every component of one ROI. Returns the
/// supervertices (global ids, sorted) in component then seed order.
fn partition_roi(
    roi: RoiId,
    comps: &[Vec<usize>],
    plan: &PartitionPlan,
    mesh: &Mesh,
    adj: &Adjacency,
    config: &PartitionConfig,
) -> Result<(Vec<Vec<usize>>, Vec<String>)> {
    let (lower, upper) = (plan.lower, plan.upper);
    let sizes: Vec<usize> = comps.iter().map(Vec::len).collect();
    let ks = distribute_counts(&sizes, plan.counts[&roi], lower, upper)?;
    let mut out = Vec::new();
    let mut notes = Vec::new();
    for (ci, (comp, &k)) in comps.iter().zip(&ks).enumerate() {
        let graph = ComponentGraph::new(comp, adj);
        let q = quotas(comp.len(), k);
        let mut seeds = fps_seeds(comp, k, &mesh.positions)?;
        if config.refine {
            let refined = refine_seeds(&graph, &seeds, &q, Some(&GreedyGrowth));
            if let Some(reason) = refined.fallback {
                notes.push(format!("ROI {roi} component {ci}: refinement fell back ({reason})"));
            }
            seeds = refined.seeds;
        }
        let local_seeds: Vec<usize> = seeds
            .iter()
            .map(|&s| graph.local(s).expect("seed inside component"))
            .collect();
        let mut assign = match grow(graph.adjacency(), &local_seeds, &q, config.max_retries, config.absorb) {
            Ok(a) => a,
            Err(failure) => {
                let mut a = failure.partial;
                complete_assignment(graph.adjacency(), &mut a);
                let repaired = cascade_repair(graph.adjacency(), &mut a, &q);
                notes.push(format!(
                    "ROI {roi} component {ci}: growth failed after {} attempts ({}); completed, repair {}",
                    failure.attempts,
                    failure.reason,
                    if repaired { "reached quotas" } else { "left residue for balancing" }
                ));
                a
            }
        };
        balance(graph.adjacency(), &mut assign, k, lower, upper, config.balance_config()).map_err(
            |f| {
                Error::PlanRejected(format!(
                    "component {ci}: residual violation {} after {} passes",
                    f.residual_violation, f.passes
                ))
            },
        )?;
        let mut parts = vec![Vec::new(); k];
        for (local, &s) in assign.iter().enumerate() {
            parts[s].push(graph.global(local));
        }
        out.extend(parts);
    }
    Ok((out, notes))
}

fn assemble(
    num_vertices: usize,
    svs: Vec<(RoiId, Vec<usize>)>,
    plan: PartitionPlan,
) -> Result<CsvMap> {
    let mut csv_of = vec![None; num_vertices];
    let mut roi_of_csv = Vec::with_capacity(svs.len());
    for (id, (roi, members)) in svs.iter().enumerate() {
        roi_of_csv.push(*roi);
        for &v in members {
            csv_of[v] = Some(id);
        }
    }
    CsvMap::from_assignment(csv_of, roi_of_csv, plan)
}
