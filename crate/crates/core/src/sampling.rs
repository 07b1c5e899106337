//! Farthest-point sampling on unit direction vectors.

use crate::mesh::distance;

/// Greedy farthest-point sampling over `candidates`, starting from `first`.
///
/// Each new pick maximises the minimum Euclidean distance to the points
/// already chosen; ties go to the smaller vertex index. Runs in O(k·n).
/// `first` must be one of the candidates and `k <= candidates.len()`.
pub fn farthest_point_sampling(
    candidates: &[usize],
    k: usize,
    positions: &[[f64; 3]],
    first: usize,
) -> Vec<usize> {
    debug_assert!(k <= candidates.len());
    if k == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_unstable();
    order.dedup();

    let mut chosen = Vec::with_capacity(k);
    chosen.push(first);
    let mut min_dist: Vec<f64> = order
        .iter()
        .map(|&v| distance(&positions[v], &positions[first]))
        .collect();
    if let Ok(i) = order.binary_search(&first) {
        min_dist[i] = f64::NEG_INFINITY;
    }
    while chosen.len() < k {
        let mut best = None::<(usize, f64)>;
        for (i, &d) in min_dist.iter().enumerate() {
            // Strict comparison keeps the earliest (smallest-index) vertex on ties.
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k <= candidate count");
        let pick = order[i];
        chosen.push(pick);
        min_dist[i] = f64::NEG_INFINITY;
        for (j, &v) in order.iter().enumerate() {
            let d = distance(&positions[v], &positions[pick]);
            if d < min_dist[j] {
                min_dist[j] = d;
            }
        }
    }
    chosen
}
