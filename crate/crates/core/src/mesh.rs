//! Icosphere construction and the 1-ring vertex graph.
//!
//! Meshes are built by repeated midpoint subdivision of the regular
//! icosahedron with every new vertex re-projected onto the unit sphere.
//! Base vertices come first, then each level's midpoints in the order their
//! edges are first met while walking the previous level's faces.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, looks_like_json};
use crate::error::{Error, Result};

/// Largest subdivision level accepted by [`build_icosphere`] (655,362 vertices).
pub const MAX_LEVEL: u32 = 8;

const MESH_MAGIC: &[u8; 8] = b"ICOMESH1";

/// Unit-sphere triangle mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub level: u32,
    pub positions: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

/// Expected `(vertices, faces, edges)` of an icosphere at `level`.
pub fn icosphere_counts(level: u32) -> (usize, usize, usize) {
    let p = 4usize.pow(level);
    (10 * p + 2, 20 * p, 30 * p)
}

/// Builds the icosphere obtained by `level` midpoint subdivisions.
pub fn build_icosphere(level: u32) -> Result<Mesh> {
    if level > MAX_LEVEL {
        return Err(Error::ResourceLimit(format!(
            "icosphere level {level} exceeds the guard of {MAX_LEVEL}"
        )));
    }
    let (mut positions, mut faces) = base_icosahedron();
    for _ in 0..level {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::with_capacity(faces.len() * 3 / 2);
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint_index(&mut positions, &mut midpoint, a, b);
            let bc = midpoint_index(&mut positions, &mut midpoint, b, c);
            let ca = midpoint_index(&mut positions, &mut midpoint, c, a);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    Ok(Mesh {
        level,
        positions,
        faces,
    })
}

fn base_icosahedron() -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let positions = raw.iter().map(|p| normalize(*p)).collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (positions, faces)
}

fn midpoint_index(
    positions: &mut Vec<[f64; 3]>,
    cache: &mut HashMap<(u32, u32), u32>,
    a: u32,
    b: u32,
) -> u32 {
    let key = if a < b { (a, b) } else { (b, a) };
    *cache.entry(key).or_insert_with(|| {
        let pa = positions[a as usize];
        let pb = positions[b as usize];
        positions.push(normalize([pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]]));
        (positions.len() - 1) as u32
    })
}

fn normalize(p: [f64; 3]) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / n, p[1] / n, p[2] / n]
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

impl Mesh {
    pub fn num_vertices(&self) -> usize {
        self.positions.len()
    }

    /// Checks the structural invariants of an icosphere of this level.
    pub fn validate(&self) -> Result<()> {
        if self.level > MAX_LEVEL {
            return Err(Error::Validation(format!("level {} above guard", self.level)));
        }
        let (nv, nf, _) = icosphere_counts(self.level);
        if self.positions.len() != nv || self.faces.len() != nf {
            return Err(Error::Validation(format!(
                "level {} expects {nv} vertices / {nf} faces, found {} / {}",
                self.level,
                self.positions.len(),
                self.faces.len()
            )));
        }
        for (i, p) in self.positions.iter().enumerate() {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if !((norm - 1.0).abs() <= 1e-9) {
                return Err(Error::Validation(format!("vertex {i} has norm {norm}")));
            }
        }
        check_faces(&self.faces, nv)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(20 + self.positions.len() * 24 + self.faces.len() * 12);
        buf.write_all(MESH_MAGIC)?;
        binio::write_u32(&mut buf, self.level)?;
        binio::write_u32(&mut buf, self.positions.len() as u32)?;
        binio::write_u32(&mut buf, self.faces.len() as u32)?;
        for p in &self.positions {
            for &c in p {
                binio::write_f64(&mut buf, c)?;
            }
        }
        for f in &self.faces {
            for &i in f {
                binio::write_u32(&mut buf, i)?;
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        binio::expect_magic(&mut r, MESH_MAGIC)?;
        let level = binio::read_u32(&mut r)?;
        let limit = icosphere_counts(MAX_LEVEL).1;
        let nv = binio::checked_len(binio::read_u32(&mut r)?, limit, "vertex")?;
        let nf = binio::checked_len(binio::read_u32(&mut r)?, limit, "face")?;
        let mut positions = Vec::with_capacity(nv);
        for _ in 0..nv {
            positions.push([
                binio::read_f64(&mut r)?,
                binio::read_f64(&mut r)?,
                binio::read_f64(&mut r)?,
            ]);
        }
        let mut faces = Vec::with_capacity(nf);
        for _ in 0..nf {
            faces.push([
                binio::read_u32(&mut r)?,
                binio::read_u32(&mut r)?,
                binio::read_u32(&mut r)?,
            ]);
        }
        Ok(Mesh {
            level,
            positions,
            faces,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Writes the binary format, or JSON when the path ends in `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "json") {
            fs::write(path, self.to_json()?)?;
        } else {
            fs::write(path, self.to_bytes()?)?;
        }
        Ok(())
    }

    /// Reads either format, detected from the leading bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mesh = if looks_like_json(&bytes) {
            serde_json::from_slice(&bytes)?
        } else {
            Self::from_bytes(&bytes)?
        };
        mesh.validate()?;
        Ok(mesh)
    }
}

fn check_faces(faces: &[[u32; 3]], nv: usize) -> Result<()> {
    for (i, f) in faces.iter().enumerate() {
        if f.iter().any(|&v| v as usize >= nv) {
            return Err(Error::Validation(format!("face {i} references a missing vertex")));
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(Error::Validation(format!("face {i} is degenerate: {f:?}")));
        }
    }
    Ok(())
}

/// 1-ring vertex adjacency stored in compressed rows; each row is sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Adjacency {
    /// Builds an adjacency from arbitrary undirected edges.
    pub fn from_edges(num_vertices: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut rows = vec![Vec::new(); num_vertices];
        for (a, b) in edges {
            if a == b {
                continue;
            }
            rows[a].push(b);
            rows[b].push(a);
        }
        Self::from_rows(rows)
    }

    fn from_rows(mut rows: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            targets.extend_from_slice(row);
            offsets.push(targets.len());
        }
        Adjacency { offsets, targets }
    }

    pub fn num_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len() / 2
    }

    #[inline]
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors(a).binary_search(&b).is_ok()
    }

    /// Iterates each undirected edge once as `(low, high)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_vertices()).flat_map(move |v| {
            self.neighbors(v)
                .iter()
                .filter(move |&&u| u > v)
                .map(move |&u| (v, u))
        })
    }
}

/// 1-ring graph of a triangle mesh.
pub fn one_ring(mesh: &Mesh) -> Result<Adjacency> {
    let nv = mesh.num_vertices();
    check_faces(&mesh.faces, nv)?;
    let edges = mesh.faces.iter().flat_map(|&[a, b, c]| {
        let (a, b, c) = (a as usize, b as usize, c as usize);
        [(a, b), (b, c), (c, a)]
    });
    Ok(Adjacency::from_edges(nv, edges))
}

/// Splits `vertices` into connected pieces of the induced subgraph.
///
/// Components come largest first, ties broken by the smallest contained
/// index; each component is sorted ascending.
pub fn connected_components(vertices: &[usize], adj: &Adjacency) -> Vec<Vec<usize>> {
    let mut members: Vec<usize> = vertices.to_vec();
    members.sort_unstable();
    members.dedup();
    let mut seen = vec![false; members.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..members.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            let v = members[i];
            comp.push(v);
            for &u in adj.neighbors(v) {
                if let Ok(j) = members.binary_search(&u) {
                    if !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    // Stable sort keeps discovery order (ascending min index) among equal sizes.
    out.sort_by_key(|c| std::cmp::Reverse(c.len()));
    out
}

/// True when the induced subgraph on `vertices` is connected (empty counts as connected).
pub fn is_connected(vertices: &[usize], adj: &Adjacency) -> bool {
    connected_components(vertices, adj).len() <= 1
}
