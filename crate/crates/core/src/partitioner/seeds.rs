//! Seed placement: farthest-point sampling, optional balanced-partition
//! refinement, and graph medoids.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mesh::Adjacency;
use crate::sampling::farthest_point_sampling;

/// Induced subgraph of one ROI component, re-indexed `0..len` in ascending
/// global-vertex order so local and global tie rules agree.
#[derive(Debug, Clone)]
pub struct ComponentGraph {
    vertices: Vec<usize>,
    adj: Adjacency,
}

impl ComponentGraph {
    pub fn new(component: &[usize], adj: &Adjacency) -> Self {
        let mut vertices = component.to_vec();
        vertices.sort_unstable();
        vertices.dedup();
        let edges: Vec<(usize, usize)> = vertices
            .iter()
            .enumerate()
            .flat_map(|(i, &v)| {
                let vertices = &vertices;
                adj.neighbors(v)
                    .iter()
                    .filter(move |&&u| u > v)
                    .filter_map(move |u| vertices.binary_search(u).ok().map(|j| (i, j)))
            })
            .collect();
        let adj = Adjacency::from_edges(vertices.len(), edges);
        ComponentGraph { vertices, adj }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adj
    }

    pub fn global(&self, local: usize) -> usize {
        self.vertices[local]
    }

    pub fn local(&self, global: usize) -> Option<usize> {
        self.vertices.binary_search(&global).ok()
    }

    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }
}

/// Farthest-point seeds on direction vectors, starting at the smallest index.
pub fn fps_seeds(component: &[usize], k: usize, positions: &[[f64; 3]]) -> Result<Vec<usize>> {
    if k > component.len() {
        return Err(Error::Validation(format!(
            "cannot place {k} seeds in a component of {} vertices",
            component.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let first = *component.iter().min().expect("non-empty component");
    Ok(farthest_point_sampling(component, k, positions, first))
}

/// Near-equal quotas: `floor(n / k)` each, the first `n mod k` get one more.
pub fn quotas(n: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1, "need at least one supervertex");
    let base = n / k;
    let extra = n % k;
    (0..k).map(|i| base + usize::from(i < extra)).collect()
}

/// Vertex of `members` minimising the summed hop distance to the others
/// inside the induced subgraph; ties to the smaller index.
pub fn medoid(adj: &Adjacency, members: &[usize]) -> Option<usize> {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() <= 2 {
        return sorted.first().copied();
    }
    let n = sorted.len();
    let mut best: Option<(usize, usize)> = None;
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        dist.fill(usize::MAX);
        dist[s] = 0;
        queue.clear();
        queue.push_back(s);
        let mut total = 0usize;
        let mut reached = 0usize;
        while let Some(i) = queue.pop_front() {
            total += dist[i];
            reached += 1;
            if best.is_some_and(|(_, b)| total > b) {
                break;
            }
            for &u in adj.neighbors(sorted[i]) {
                if let Ok(j) = sorted.binary_search(&u) {
                    if dist[j] == usize::MAX {
                        dist[j] = dist[i] + 1;
                        queue.push_back(j);
                    }
                }
            }
        }
        // Unreached members count as one hop beyond the set size.
        total += (n - reached) * (n + 1);
        if best.is_none_or(|(_, b)| total < b) {
            best = Some((sorted[s], total));
        }
    }
    best.map(|(v, _)| v)
}

/// Balanced k-way partitioner used to refine seed placement.
pub trait BalancedPartitioner: Sync {
    /// Returns a part index per local vertex, with part `i` grown from
    /// `seeds[i]` and holding exactly `quotas[i]` vertices.
    fn partition(
        &self,
        adj: &Adjacency,
        seeds: &[usize],
        quotas: &[usize],
    ) -> std::result::Result<Vec<usize>, String>;
}

/// Round-robin breadth-first growth with hard quotas.
#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyGrowth;

impl BalancedPartitioner for GreedyGrowth {
    fn partition(
        &self,
        adj: &Adjacency,
        seeds: &[usize],
        quotas: &[usize],
    ) -> std::result::Result<Vec<usize>, String> {
        let n = adj.num_vertices();
        if quotas.iter().sum::<usize>() != n {
            return Err("quotas do not cover the component".into());
        }
        let mut part = vec![usize::MAX; n];
        let mut size = vec![0usize; seeds.len()];
        let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); seeds.len()];
        for (i, &s) in seeds.iter().enumerate() {
            if part[s] != usize::MAX {
                return Err(format!("duplicate seed {s}"));
            }
            part[s] = i;
            size[i] = 1;
            queues[i].extend(adj.neighbors(s));
        }
        let mut assigned = seeds.len();
        while assigned < n {
            let mut progressed = false;
            for i in 0..seeds.len() {
                if size[i] >= quotas[i] {
                    continue;
                }
                while let Some(v) = queues[i].pop_front() {
                    if part[v] == usize::MAX {
                        part[v] = i;
                        size[i] += 1;
                        assigned += 1;
                        queues[i].extend(adj.neighbors(v).iter().filter(|&&u| part[u] == usize::MAX));
                        progressed = true;
                        break;
                    }
                }
            }
            if !progressed {
                return Err(format!("{} vertices unreachable under quotas", n - assigned));
            }
        }
        if size.iter().zip(quotas).any(|(s, q)| s != q) {
            return Err("a part missed its quota".into());
        }
        Ok(part)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineOutcome {
    /// Global seed vertices, in the original seed order.
    pub seeds: Vec<usize>,
    /// Why refinement fell back to the input seeds, if it did.
    pub fallback: Option<String>,
}

/// Replaces each seed with the medoid of its part in a balanced partition.
///
/// `refiner = None` disables refinement. Any refiner failure returns the
/// input seeds unchanged with the reason recorded.
pub fn refine_seeds(
    graph: &ComponentGraph,
    seeds: &[usize],
    quotas: &[usize],
    refiner: Option<&dyn BalancedPartitioner>,
) -> RefineOutcome {
    let unchanged = |reason: Option<String>| RefineOutcome {
        seeds: seeds.to_vec(),
        fallback: reason,
    };
    let Some(refiner) = refiner else {
        return unchanged(None);
    };
    if seeds.len() != quotas.len() {
        return unchanged(Some("seed and quota counts differ".into()));
    }
    let Some(local_seeds) = seeds.iter().map(|&s| graph.local(s)).collect::<Option<Vec<_>>>()
    else {
        return unchanged(Some("seed outside component".into()));
    };
    let parts = match refiner.partition(graph.adjacency(), &local_seeds, quotas) {
        Ok(p) => p,
        Err(e) => return unchanged(Some(e)),
    };
    let mut members = vec![Vec::new(); seeds.len()];
    for (v, &p) in parts.iter().enumerate() {
        match members.get_mut(p) {
            Some(m) => m.push(v),
            None => return unchanged(Some(format!("part index {p} out of range"))),
        }
    }
    let mut refined = Vec::with_capacity(seeds.len());
    for m in &members {
        match medoid(graph.adjacency(), m) {
            Some(v) => refined.push(graph.global(v)),
            None => return unchanged(Some("empty part".into())),
        }
    }
    RefineOutcome {
        seeds: refined,
        fallback: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> Adjacency {
        Adjacency::from_edges(n, (0..n - 1).map(|i| (i, i + 1)))
    }

    #[test]
    fn fps_first_seed_is_min_index() {
        let positions = vec![[1.0, 0.0, 0.0]; 10];
        assert_eq!(fps_seeds(&[7, 3, 9], 1, &positions).unwrap(), vec![3]);
    }

    #[test]
    fn fps_picks_antipode() {
        let positions = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]];
        assert_eq!(fps_seeds(&[0, 1, 2], 2, &positions).unwrap(), vec![0, 2]);
    }

    #[test]
    fn fps_rejects_too_many_seeds() {
        let positions = [[1.0, 0.0, 0.0]; 2];
        assert!(fps_seeds(&[0, 1], 3, &positions).is_err());
    }

    #[test]
    fn quotas_near_equal() {
        assert_eq!(quotas(10, 3), vec![4, 3, 3]);
        assert_eq!(quotas(9, 3), vec![3, 3, 3]);
        assert_eq!(quotas(5, 1), vec![5]);
    }

    #[test]
    fn medoid_of_path() {
        let adj = path(5);
        assert_eq!(medoid(&adj, &[0, 1, 2, 3, 4]), Some(2));
        assert_eq!(medoid(&adj, &[0, 1, 2, 3]), Some(1));
        assert_eq!(medoid(&adj, &[]), None);
    }

    #[test]
    fn refine_on_path_of_six() {
        let graph = ComponentGraph::new(&[0, 1, 2, 3, 4, 5], &path(6));
        let out = refine_seeds(&graph, &[0, 5], &[3, 3], Some(&GreedyGrowth));
        assert_eq!(out.seeds, vec![1, 4]);
        assert!(out.fallback.is_none());
    }

    #[test]
    fn refine_disabled_is_identity() {
        let graph = ComponentGraph::new(&[0, 1, 2, 3, 4, 5], &path(6));
        let out = refine_seeds(&graph, &[0, 5], &[3, 3], None);
        assert_eq!(out.seeds, vec![0, 5]);
    }

    struct Broken;
    impl BalancedPartitioner for Broken {
        fn partition(&self, _: &Adjacency, _: &[usize], _: &[usize]) -> std::result::Result<Vec<usize>, String> {
            Err("forced failure".into())
        }
    }

    #[test]
    fn refine_failure_falls_back() {
        let graph = ComponentGraph::new(&[0, 1, 2, 3, 4, 5], &path(6));
        let out = refine_seeds(&graph, &[0, 5], &[3, 3], Some(&Broken));
        assert_eq!(out.seeds, vec![0, 5]);
        assert_eq!(out.fallback.as_deref(), Some("forced failure"));
    }

    #[test]
    fn component_graph_reindexes() {
        let adj = path(10);
        let g = ComponentGraph::new(&[6, 4, 5], &adj);
        assert_eq!(g.vertices(), &[4, 5, 6]);
        assert_eq!(g.adjacency().neighbors(1), &[0, 2]);
        assert_eq!(g.local(6), Some(2));
        assert_eq!(g.local(7), None);
    }
}
