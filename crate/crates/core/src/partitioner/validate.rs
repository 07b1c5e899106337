//! Invariant checks over a finished partition.

use serde::{Deserialize, Serialize};

use super::face::FacePartition;
use super::CsvMap;
use crate::atlas::{AtlasLabeling, RoiId};
use crate::mesh::{is_connected, one_ring, Adjacency, Mesh};
use crate::planner::PartitionPlan;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Offending CSV ids (vertex ids for `lossless`).
    pub offenders: Vec<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub num_csvs: usize,
    pub v_max: usize,
    /// `Σ|members| − |∪ members|`; zero for a proper vertex partition.
    pub duplicated_vertices: usize,
    /// Face-based partitions are reported, never failed.
    pub face_based: bool,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn exit_code(&self) -> i32 {
        if self.face_based || self.all_passed() {
            0
        } else {
            1
        }
    }
}

fn check(name: &str, offenders: Vec<usize>, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: offenders.is_empty() && detail.is_empty(),
        offenders,
        detail,
    }
}

/// Runs the six partition checks: lossless, disjoint, roi_pure, connected,
/// bounded, count.
pub fn validate(map: &CsvMap, mesh: &Mesh, atlas: &AtlasLabeling) -> ValidationReport {
    let mut report = member_checks(
        &map.members,
        &map.roi_of_csv,
        Some(&map.csv_of),
        mesh,
        atlas,
    );
    report.checks.push(bounded(&map.members, &map.plan, map.v_max));
    report.checks.push(count(&map.members, &map.roi_of_csv, &map.plan));
    report
}

/// Face-based ablation report: same checks where they apply, plus the
/// boundary duplication count. Always exits 0.
pub fn validate_face_partition(
    part: &FacePartition,
    mesh: &Mesh,
    atlas: &AtlasLabeling,
) -> ValidationReport {
    let mut report = member_checks(&part.members, &part.roi_of_csv, None, mesh, atlas);
    report.face_based = true;
    report
}

fn member_checks(
    members: &[Vec<usize>],
    roi_of_csv: &[RoiId],
    csv_of: Option<&[Option<usize>]>,
    mesh: &Mesh,
    atlas: &AtlasLabeling,
) -> ValidationReport {
    let nv = mesh.num_vertices();
    let mut checks = Vec::new();
    let mut shape = Vec::new();
    if atlas.labels.len() != nv {
        shape.push(format!("atlas has {} labels for {nv} vertices", atlas.labels.len()));
    }
    if roi_of_csv.len() != members.len() {
        shape.push(format!("{} ROI ids for {} CSVs", roi_of_csv.len(), members.len()));
    }
    if let Some(c) = csv_of {
        if c.len() != nv {
            shape.push(format!("csv_of has {} entries for {nv} vertices", c.len()));
        }
    }
    let cortical = |v: usize| atlas.labels.get(v).is_some_and(|&l| !atlas.is_excluded(l));

    // Lossless: every cortical vertex covered (and mapped), excluded ones never.
    let mut covered = vec![0usize; nv];
    let mut out_of_range = Vec::new();
    for m in members {
        for &v in m {
            match covered.get_mut(v) {
                Some(c) => *c += 1,
                None => out_of_range.push(v),
            }
        }
    }
    let mut lossless: Vec<usize> = (0..nv)
        .filter(|&v| {
            let mapped = csv_of.is_none_or(|c| c.get(v).copied().flatten().is_some());
            if cortical(v) {
                covered[v] == 0 || !mapped
            } else {
                covered[v] > 0 || (csv_of.is_some() && mapped)
            }
        })
        .collect();
    lossless.extend(&out_of_range);
    let mut detail = shape.join("; ");
    if !out_of_range.is_empty() {
        if !detail.is_empty() {
            detail.push_str("; ");
        }
        detail.push_str(&format!("{} member ids out of range", out_of_range.len()));
    }
    checks.push(check("lossless", lossless, detail));

    // Disjoint: no vertex in two CSVs, and csv_of agrees with members.
    let mut disjoint = Vec::new();
    for (c, m) in members.iter().enumerate() {
        let mut sorted = m.clone();
        sorted.sort_unstable();
        let dup_inside = sorted.windows(2).any(|w| w[0] == w[1]);
        let shared = m.iter().any(|&v| covered.get(v).is_some_and(|&n| n > 1));
        let mismatched = csv_of.is_some_and(|map| {
            m.iter().any(|&v| map.get(v).is_some_and(|&owner| owner != Some(c)))
        });
        if dup_inside || shared || mismatched {
            disjoint.push(c);
        }
    }
    let total: usize = members.iter().map(Vec::len).sum();
    let union = covered.iter().filter(|&&n| n > 0).count() + out_of_range.len();
    let duplicated_vertices = total.saturating_sub(union);
    checks.push(check("disjoint", disjoint, String::new()));

    let roi_pure = members
        .iter()
        .enumerate()
        .filter(|(c, m)| {
            let roi = roi_of_csv.get(*c);
            m.iter().any(|&v| atlas.labels.get(v) != roi)
        })
        .map(|(c, _)| c)
        .collect();
    checks.push(check("roi_pure", roi_pure, String::new()));

    let connected = match one_ring(mesh) {
        Ok(adj) => connected_check(members, &adj, nv),
        Err(e) => check("connected", Vec::new(), format!("mesh adjacency unavailable: {e}")),
    };
    checks.push(connected);

    ValidationReport {
        checks,
        num_csvs: members.len(),
        v_max: members.iter().map(Vec::len).max().unwrap_or(0),
        duplicated_vertices,
        face_based: false,
    }
}

fn connected_check(members: &[Vec<usize>], adj: &Adjacency, nv: usize) -> CheckResult {
    let offenders = members
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let mut m: Vec<usize> = m.iter().copied().filter(|&v| v < nv).collect();
            m.sort_unstable();
            m.dedup();
            m.is_empty() || !is_connected(&m, adj)
        })
        .map(|(c, _)| c)
        .collect();
    check("connected", offenders, String::new())
}

fn bounded(members: &[Vec<usize>], plan: &PartitionPlan, v_max: usize) -> CheckResult {
    let offenders = members
        .iter()
        .enumerate()
        .filter(|(_, m)| m.len() < plan.lower || m.len() > plan.upper)
        .map(|(c, _)| c)
        .collect();
    let actual = members.iter().map(Vec::len).max().unwrap_or(0);
    let detail = if v_max != actual || v_max > plan.upper {
        format!("v_max {v_max} (actual {actual}, H {})", plan.upper)
    } else {
        String::new()
    };
    check("bounded", offenders, detail)
}

fn count(members: &[Vec<usize>], roi_of_csv: &[RoiId], plan: &PartitionPlan) -> CheckResult {
    let mut detail = Vec::new();
    if members.len() != plan.k_total {
        detail.push(format!("{} CSVs, K_total {}", members.len(), plan.k_total));
    }
    for (roi, &k) in &plan.counts {
        let have = roi_of_csv.iter().filter(|&r| r == roi).count();
        if have != k {
            detail.push(format!("ROI {roi}: {have} CSVs, planned {k}"));
        }
    }
    check("count", Vec::new(), detail.join("; "))
}
