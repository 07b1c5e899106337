//! Per-vertex ROI labelings: a synthetic generator standing in for a real
//! cortical atlas, minor-fragment cleanup, and cortical-vertex selection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;
use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, looks_like_json};
use crate::error::{Error, Result};
use crate::mesh::{connected_components, distance, one_ring, Adjacency, Mesh};
use crate::sampling::farthest_point_sampling;

const ATLAS_MAGIC: &[u8; 6] = b"ATLAS1";

/// Atlas region identifier.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct RoiId(pub u32);

impl fmt::Display for RoiId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasLabeling {
    pub labels: Vec<RoiId>,
    #[serde(rename = "excluded")]
    pub excluded_labels: BTreeSet<RoiId>,
    #[serde(rename = "names", default, skip_serializing_if = "Option::is_none")]
    pub roi_names: Option<BTreeMap<RoiId, String>>,
}

/// A sub-threshold fragment that had no cortical neighbour to absorb it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentWarning {
    pub roi: RoiId,
    pub size: usize,
    pub min_vertex: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanupResult {
    pub labeling: AtlasLabeling,
    pub warnings: Vec<FragmentWarning>,
    /// Number of fragments relabeled.
    pub reassigned: usize,
}

impl AtlasLabeling {
    pub fn is_excluded(&self, label: RoiId) -> bool {
        self.excluded_labels.contains(&label)
    }

    pub fn validate(&self, num_vertices: usize) -> Result<()> {
        if self.labels.len() != num_vertices {
            return Err(Error::Validation(format!(
                "atlas has {} labels for a mesh of {num_vertices} vertices",
                self.labels.len()
            )));
        }
        if let Some(names) = &self.roi_names {
            if let Some(missing) = self.labels.iter().find(|l| !names.contains_key(l)) {
                return Err(Error::Validation(format!("label {missing} has no name")));
            }
        }
        Ok(())
    }

    /// Vertices per cortical ROI.
    pub fn roi_members(&self) -> BTreeMap<RoiId, Vec<usize>> {
        let mut out: BTreeMap<RoiId, Vec<usize>> = BTreeMap::new();
        for (v, &l) in self.labels.iter().enumerate() {
            if !self.is_excluded(l) {
                out.entry(l).or_default().push(v);
            }
        }
        out
    }

    /// Cortical vertex count per ROI.
    pub fn roi_sizes(&self) -> BTreeMap<RoiId, usize> {
        self.roi_members()
            .into_iter()
            .map(|(r, m)| (r, m.len()))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(16 + self.labels.len() * 4);
        buf.write_all(ATLAS_MAGIC)?;
        binio::write_u32(&mut buf, self.labels.len() as u32)?;
        for l in &self.labels {
            binio::write_u32(&mut buf, l.0)?;
        }
        binio::write_u32(&mut buf, self.excluded_labels.len() as u32)?;
        for l in &self.excluded_labels {
            binio::write_u32(&mut buf, l.0)?;
        }
        match &self.roi_names {
            None => binio::write_u32(&mut buf, u32::MAX)?,
            Some(names) => {
                binio::write_u32(&mut buf, names.len() as u32)?;
                for (id, name) in names {
                    binio::write_u32(&mut buf, id.0)?;
                    binio::write_u32(&mut buf, name.len() as u32)?;
                    buf.write_all(name.as_bytes())?;
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const LIMIT: usize = 1 << 24;
        let mut r = Cursor::new(bytes);
        binio::expect_magic(&mut r, ATLAS_MAGIC)?;
        let n = binio::checked_len(binio::read_u32(&mut r)?, LIMIT, "label")?;
        let labels = (0..n)
            .map(|_| binio::read_u32(&mut r).map(RoiId))
            .collect::<Result<Vec<_>>>()?;
        let ne = binio::checked_len(binio::read_u32(&mut r)?, LIMIT, "excluded")?;
        let excluded_labels = (0..ne)
            .map(|_| binio::read_u32(&mut r).map(RoiId))
            .collect::<Result<BTreeSet<_>>>()?;
        let nn = binio::read_u32(&mut r)?;
        let roi_names = if nn == u32::MAX {
            None
        } else {
            let nn = binio::checked_len(nn, LIMIT, "name")?;
            let mut names = BTreeMap::new();
            for _ in 0..nn {
                let id = RoiId(binio::read_u32(&mut r)?);
                let len = binio::checked_len(binio::read_u32(&mut r)?, 4096, "name byte")?;
                let mut s = vec![0u8; len];
                std::io::Read::read_exact(&mut r, &mut s)?;
                let s = String::from_utf8(s)
                    .map_err(|_| Error::Format("ROI name is not UTF-8".into()))?;
                names.insert(id, s);
            }
            Some(names)
        };
        Ok(AtlasLabeling {
            labels,
            excluded_labels,
            roi_names,
        })
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

/// Vertices whose label is not excluded, ascending.
pub fn cortical_vertices(labeling: &AtlasLabeling) -> Vec<usize> {
    labeling
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| !labeling.is_excluded(l))
        .map(|(v, _)| v)
        .collect()
}

#[derive(PartialEq)]
struct Frontier {
    dist: f64,
    seed: usize,
    vertex: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    // Reversed so the max-heap pops the nearest entry, then the lowest seed.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.seed.cmp(&self.seed))
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Generates a synthetic parcellation.
///
/// A connected cap of about `excluded_fraction · |V|` vertices becomes the
/// excluded "medial wall" label (id `num_rois`). Cortical ROIs `0..num_rois`
/// grow from farthest-point seeds by nearest-seed geodesic (edge-length)
/// distance over the whole sphere, so the wall can split an ROI into
/// fragments the way real atlas artifacts do.
pub fn synth_atlas(
    mesh: &Mesh,
    num_rois: usize,
    excluded_fraction: f64,
    rng_seed: u64,
) -> Result<AtlasLabeling> {
    if !(0.0..1.0).contains(&excluded_fraction) {
        return Err(Error::Validation(format!(
            "excluded fraction {excluded_fraction} outside [0, 1)"
        )));
    }
    let nv = mesh.num_vertices();
    let adj = one_ring(mesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let wall_size = (excluded_fraction * nv as f64).round() as usize;
    let center = rng.random_range(0..nv);
    let hops = bfs_hops(&adj, center);
    let mut by_closeness: Vec<usize> = (0..nv).collect();
    by_closeness.sort_by(|&a, &b| {
        hops[a]
            .cmp(&hops[b])
            .then_with(|| {
                let pc = &mesh.positions[center];
                distance(&mesh.positions[a], pc).total_cmp(&distance(&mesh.positions[b], pc))
            })
            .then_with(|| a.cmp(&b))
    });
    let mut is_wall = vec![false; nv];
    for &v in &by_closeness[..wall_size] {
        is_wall[v] = true;
    }
    let cortex: Vec<usize> = (0..nv).filter(|&v| !is_wall[v]).collect();
    if num_rois == 0 || num_rois > cortex.len() {
        return Err(Error::Validation(format!(
            "cannot place {num_rois} ROIs on {} cortical vertices",
            cortex.len()
        )));
    }

    let first = cortex[rng.random_range(0..cortex.len())];
    let seeds = farthest_point_sampling(&cortex, num_rois, &mesh.positions, first);

    let mut owner = vec![usize::MAX; nv];
    let mut best = vec![f64::INFINITY; nv];
    let mut heap = BinaryHeap::new();
    for (s, &v) in seeds.iter().enumerate() {
        best[v] = 0.0;
        heap.push(Frontier {
            dist: 0.0,
            seed: s,
            vertex: v,
        });
    }
    while let Some(Frontier { dist, seed, vertex }) = heap.pop() {
        if owner[vertex] != usize::MAX {
            continue;
        }
        owner[vertex] = seed;
        for &u in adj.neighbors(vertex) {
            if owner[u] != usize::MAX {
                continue;
            }
            let d = dist + distance(&mesh.positions[vertex], &mesh.positions[u]);
            if d <= best[u] {
                best[u] = d;
                heap.push(Frontier {
                    dist: d,
                    seed,
                    vertex: u,
                });
            }
        }
    }

    let wall = RoiId(num_rois as u32);
    let labels = (0..nv)
        .map(|v| {
            if is_wall[v] {
                wall
            } else {
                RoiId(owner[v] as u32)
            }
        })
        .collect();
    let mut names: BTreeMap<RoiId, String> = (0..num_rois)
        .map(|r| (RoiId(r as u32), format!("roi_{r:03}")))
        .collect();
    names.insert(wall, "medial_wall".to_string());
    Ok(AtlasLabeling {
        labels,
        excluded_labels: BTreeSet::from([wall]),
        roi_names: Some(names),
    })
}

fn bfs_hops(adj: &Adjacency, start: usize) -> Vec<usize> {
    let mut hops = vec![usize::MAX; adj.num_vertices()];
    hops[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        for &u in adj.neighbors(v) {
            if hops[u] == usize::MAX {
                hops[u] = hops[v] + 1;
                queue.push_back(u);
            }
        }
    }
    hops
}

/// Relabels small disconnected ROI fragments to the neighbouring cortical
/// ROI sharing the most boundary edges with them (ties to the smaller id).
///
/// The largest component of every ROI is kept. Any other component smaller
/// than `threshold` times the ROI's reference size moves; the reference is
/// the larger of the ROI's size before the pass and its current size, which
/// makes the pass idempotent. Iterates to a fixpoint.
pub fn reassign_minor_fragments(
    labeling: &AtlasLabeling,
    adj: &Adjacency,
    threshold: f64,
) -> Result<CleanupResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Validation(format!("threshold {threshold} outside (0, 1)")));
    }
    labeling.validate(adj.num_vertices())?;
    let mut labels = labeling.labels.clone();
    let pre_sizes = labeling.roi_sizes();
    let mut warnings: Vec<FragmentWarning> = Vec::new();
    let mut stuck: BTreeSet<(RoiId, usize)> = BTreeSet::new();
    let mut reassigned = 0;

    // Each move merges a fragment into another ROI, so the total component
    // count strictly drops; the bound is a backstop.
    let max_rounds = adj.num_vertices() + 1;
    for _ in 0..max_rounds {
        let mut changed = false;
        let current = AtlasLabeling {
            labels: labels.clone(),
            excluded_labels: labeling.excluded_labels.clone(),
            roi_names: None,
        };
        for (roi, members) in current.roi_members() {
            let reference = pre_sizes.get(&roi).copied().unwrap_or(0).max(members.len());
            let limit = threshold * reference as f64;
            let comps = connected_components(&members, adj);
            for frag in comps.iter().skip(1) {
                if frag.len() as f64 >= limit {
                    continue;
                }
                // Labels may have shifted earlier in this round.
                if frag.iter().any(|&v| labels[v] != roi) {
                    continue;
                }
                let mut contact: BTreeMap<RoiId, usize> = BTreeMap::new();
                for &v in frag {
                    for &u in adj.neighbors(v) {
                        let l = labels[u];
                        if l != roi && !labeling.is_excluded(l) {
                            *contact.entry(l).or_default() += 1;
                        }
                    }
                }
                // max_by_key returns the last maximum; iterate in reverse id order
                // so the smallest id wins ties.
                let target = contact
                    .iter()
                    .rev()
                    .max_by_key(|(_, &c)| c)
                    .map(|(&l, _)| l);
                match target {
                    Some(t) => {
                        for &v in frag {
                            labels[v] = t;
                        }
                        reassigned += 1;
                        changed = true;
                    }
                    None => {
                        if stuck.insert((roi, frag[0])) {
                            warnings.push(FragmentWarning {
                                roi,
                                size: frag.len(),
                                min_vertex: frag[0],
                                reason: "no cortical neighbour".into(),
                            });
                        }
                    }
                }
            }
            let main = comps.first().map_or(0, Vec::len);
            if !comps.is_empty() && (main as f64) < limit && stuck.insert((roi, usize::MAX)) {
                warnings.push(FragmentWarning {
                    roi,
                    size: main,
                    min_vertex: comps[0][0],
                    reason: "largest component below threshold; kept".into(),
                });
            }
        }
        if !changed {
            break;
        }
    }

    Ok(CleanupResult {
        labeling: AtlasLabeling {
            labels,
            excluded_labels: labeling.excluded_labels.clone(),
            roi_names: labeling.roi_names.clone(),
        },
        warnings,
        reassigned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_icosphere;

    fn labeling(labels: Vec<u32>, excluded: &[u32]) -> AtlasLabeling {
        AtlasLabeling {
            labels: labels.into_iter().map(RoiId).collect(),
            excluded_labels: excluded.iter().map(|&l| RoiId(l)).collect(),
            roi_names: None,
        }
    }

    #[test]
    fn single_roi_without_wall() {
        let mesh = build_icosphere(2).unwrap();
        let atlas = synth_atlas(&mesh, 1, 0.0, 3).unwrap();
        assert!(atlas.labels.iter().all(|&l| l == RoiId(0)));
        assert_eq!(cortical_vertices(&atlas).len(), mesh.num_vertices());
    }

    #[test]
    fn thirty_six_rois_on_ico4() {
        let mesh = build_icosphere(4).unwrap();
        let atlas = synth_atlas(&mesh, 36, 0.1, 11).unwrap();
        let sizes = atlas.roi_sizes();
        assert_eq!(sizes.len(), 36);
        assert!(sizes.values().all(|&n| n > 0));
        atlas.validate(mesh.num_vertices()).unwrap();
    }

    #[test]
    fn wall_is_connected_cap_of_expected_size() {
        let mesh = build_icosphere(3).unwrap();
        let adj = one_ring(&mesh).unwrap();
        for seed in 0..5 {
            let atlas = synth_atlas(&mesh, 10, 0.1, seed).unwrap();
            let wall: Vec<usize> = (0..mesh.num_vertices())
                .filter(|&v| atlas.is_excluded(atlas.labels[v]))
                .collect();
            assert_eq!(wall.len(), 64);
            assert_eq!(connected_components(&wall, &adj).len(), 1);
            assert_eq!(cortical_vertices(&atlas).len(), 642 - 64);
        }
    }

    #[test]
    fn too_many_rois() {
        let mesh = build_icosphere(0).unwrap();
        assert!(matches!(synth_atlas(&mesh, 13, 0.0, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn synth_is_deterministic() {
        let mesh = build_icosphere(3).unwrap();
        assert_eq!(
            synth_atlas(&mesh, 10, 0.1, 5).unwrap(),
            synth_atlas(&mesh, 10, 0.1, 5).unwrap()
        );
    }

    #[test]
    fn cortical_vertices_edge_cases() {
        let l = labeling(vec![0, 1, 1, 2], &[]);
        assert_eq!(cortical_vertices(&l), vec![0, 1, 2, 3]);
        let l = labeling(vec![0, 1, 1, 2], &[0, 1, 2]);
        assert!(cortical_vertices(&l).is_empty());
    }

    #[test]
    fn connected_rois_are_fixpoint() {
        // Path 0-1-2-3-4-5 with ROIs {0,1,2} and {3,4,5}.
        let adj = Adjacency::from_edges(6, (0..5).map(|i| (i, i + 1)));
        let l = labeling(vec![0, 0, 0, 1, 1, 1], &[]);
        let out = reassign_minor_fragments(&l, &adj, 0.1).unwrap();
        assert_eq!(out.labeling, l);
        assert_eq!(out.reassigned, 0);
    }

    #[test]
    fn island_goes_to_surrounding_roi() {
        // ROI 0: a 100-vertex path; ROI 1: a separate path enclosing a
        // 5-vertex island of ROI 0.
        let mut edges: Vec<(usize, usize)> = (0..99).map(|i| (i, i + 1)).collect();
        // ROI 1 occupies 100..120, island 120..125 sits in the middle of it.
        edges.extend((100..119).map(|i| (i, i + 1)));
        edges.extend((120..124).map(|i| (i, i + 1)));
        edges.push((110, 120));
        edges.push((124, 111));
        let adj = Adjacency::from_edges(125, edges);
        let mut labels = vec![0u32; 100];
        labels.extend(vec![1u32; 20]);
        labels.extend(vec![0u32; 5]);
        let out = reassign_minor_fragments(&labeling(labels, &[]), &adj, 0.1).unwrap();
        assert!((120..125).all(|v| out.labeling.labels[v] == RoiId(1)));
        assert!((0..100).all(|v| out.labeling.labels[v] == RoiId(0)));
        assert_eq!(out.reassigned, 1);
    }

    #[test]
    fn isolated_fragment_is_reported() {
        // Island of ROI 0 whose only neighbour is the excluded label 2.
        let mut edges: Vec<(usize, usize)> = (0..49).map(|i| (i, i + 1)).collect();
        edges.push((50, 51));
        edges.push((51, 52));
        let adj = Adjacency::from_edges(53, edges);
        let mut labels = vec![0u32; 50];
        labels.extend([2, 0, 2]);
        let l = labeling(labels, &[2]);
        let out = reassign_minor_fragments(&l, &adj, 0.1).unwrap();
        assert_eq!(out.labeling.labels, l.labels);
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.warnings[0].min_vertex, 51);
    }

    #[test]
    fn threshold_validated() {
        let adj = Adjacency::from_edges(2, [(0, 1)]);
        let l = labeling(vec![0, 0], &[]);
        assert!(reassign_minor_fragments(&l, &adj, 0.0).is_err());
        assert!(reassign_minor_fragments(&l, &adj, 1.0).is_err());
    }

    #[test]
    fn binary_and_json_formats() {
        let mesh = build_icosphere(2).unwrap();
        let atlas = synth_atlas(&mesh, 5, 0.1, 1).unwrap();
        assert_eq!(AtlasLabeling::from_bytes(&atlas.to_bytes().unwrap()).unwrap(), atlas);
        let json = serde_json::to_string(&atlas).unwrap();
        assert!(json.contains("\"excluded\""));
        assert_eq!(serde_json::from_str::<AtlasLabeling>(&json).unwrap(), atlas);
    }
}
