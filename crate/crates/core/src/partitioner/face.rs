//! Face-based partitioning, kept only as an ablation.
//!
//! Each mesh face goes to one CSV and a CSV's vertex set is the union of
//! its faces' vertices, so vertices on CSV borders land in several CSVs.

use serde::{Deserialize, Serialize};

use super::CsvMap;
use crate::atlas::{AtlasLabeling, RoiId};
use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacePartition {
    /// CSV of each face; `None` when the face has no cortical vertex.
    pub face_csv: Vec<Option<usize>>,
    /// Sorted cortical vertices of each CSV's faces (may overlap).
    pub members: Vec<Vec<usize>>,
    pub roi_of_csv: Vec<RoiId>,
    /// `Σ|members| − |∪ members|`.
    pub duplicated_vertices: usize,
}

/// Derives a face partition from a vertex partition: each face takes the
/// CSV holding most of its cortical vertices (ties to the smaller CSV id).
pub fn face_partition(map: &CsvMap, mesh: &Mesh, atlas: &AtlasLabeling) -> FacePartition {
    let mut face_csv = Vec::with_capacity(mesh.faces.len());
    let mut members = vec![Vec::new(); map.num_csvs()];
    let cortical = |v: usize| !atlas.is_excluded(atlas.labels[v]);
    for face in &mesh.faces {
        let mut votes: Vec<(usize, usize)> = Vec::with_capacity(3);
        for &v in face {
            if let Some(c) = map.csv_of[v as usize] {
                match votes.iter_mut().find(|(x, _)| *x == c) {
                    Some(e) => e.1 += 1,
                    None => votes.push((c, 1)),
                }
            }
        }
        let pick = votes
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c);
        if let Some(c) = pick {
            members[c].extend(face.iter().map(|&v| v as usize).filter(|&v| cortical(v)));
        }
        face_csv.push(pick);
    }
    for m in &mut members {
        m.sort_unstable();
        m.dedup();
    }
    let total: usize = members.iter().map(Vec::len).sum();
    let mut all: Vec<usize> = members.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    FacePartition {
        face_csv,
        duplicated_vertices: total - all.len(),
        members,
        roi_of_csv: map.roi_of_csv.clone(),
    }
}
