//! Quota-driven supervertex growth inside one ROI component.
//!
//! All indices here are local to a [`ComponentGraph`](super::ComponentGraph).

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::balance::connected_without;
use super::seeds::medoid;
use crate::mesh::{connected_components, Adjacency};

pub const UNASSIGNED: usize = usize::MAX;

/// How a growing supervertex picks among its frontier vertices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsorbRule {
    /// Most neighbours already inside the supervertex, then smallest index.
    #[default]
    MostNeighbors,
    /// Smallest index only.
    LowestIndex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrowFailure {
    /// Best partial assignment seen (fewest unassigned vertices).
    pub partial: Vec<usize>,
    pub attempts: usize,
    pub reason: String,
}

/// Grows one supervertex per seed until every quota is met.
///
/// At each step the supervertex with the lowest fill ratio (ties to the
/// smaller index) that still has room absorbs one unassigned frontier
/// vertex. A supervertex with an empty frontier is starved. If any quota
/// is missed, seeds are updated from the current assignment (see
/// [`reseed`]) and growth restarts, up to `max_retries` extra attempts.
pub fn grow(
    adj: &Adjacency,
    seeds: &[usize],
    quotas: &[usize],
    max_retries: usize,
    rule: AbsorbRule,
) -> Result<Vec<usize>, GrowFailure> {
    assert_eq!(seeds.len(), quotas.len());
    debug_assert_eq!(quotas.iter().sum::<usize>(), adj.num_vertices());
    let mut seeds = seeds.to_vec();
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut reason = String::new();
    let mut attempts = 0;
    for attempt in 0..=max_retries {
        attempts += 1;
        let (assign, unassigned, starved) = grow_once(adj, &seeds, quotas, rule);
        if unassigned == 0 {
            return Ok(assign);
        }
        reason = format!(
            "attempt {}: {unassigned} vertices unassigned, {} supervertices starved",
            attempt + 1,
            starved.len()
        );
        let next = reseed(adj, &assign, &seeds, &starved);
        if best.as_ref().is_none_or(|(u, _)| unassigned < *u) {
            best = Some((unassigned, assign));
        }
        if next == seeds {
            break;
        }
        seeds = next;
    }
    Err(GrowFailure {
        partial: best.map(|(_, a)| a).unwrap_or_default(),
        attempts,
        reason,
    })
}

/// Next seeds after a failed attempt. Supervertices that grew normally move
/// to the medoid of their part; starved ones move, in index order, to the
/// medoids of the unassigned pockets, largest pocket first.
fn reseed(adj: &Adjacency, assign: &[usize], seeds: &[usize], starved: &[usize]) -> Vec<usize> {
    let mut parts = vec![Vec::new(); seeds.len()];
    let mut free = Vec::new();
    for (v, &s) in assign.iter().enumerate() {
        if s == UNASSIGNED {
            free.push(v);
        } else {
            parts[s].push(v);
        }
    }
    let mut next: Vec<usize> = parts
        .iter()
        .zip(seeds)
        .map(|(p, &s)| medoid(adj, p).unwrap_or(s))
        .collect();
    let pockets = connected_components(&free, adj);
    for (&s, pocket) in starved.iter().zip(&pockets) {
        if let Some(m) = medoid(adj, pocket) {
            next[s] = m;
        }
    }
    next
}

/// One growth attempt: `(assignment, unassigned count, starved supervertices)`.
fn grow_once(
    adj: &Adjacency,
    seeds: &[usize],
    quotas: &[usize],
    rule: AbsorbRule,
) -> (Vec<usize>, usize, Vec<usize>) {
    let n = adj.num_vertices();
    let k = seeds.len();
    let mut assign = vec![UNASSIGNED; n];
    let mut size = vec![0usize; k];
    let mut frontier: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); k];
    let mut remaining = n;

    for (s, &v) in seeds.iter().enumerate() {
        assign[v] = s;
        size[s] = 1;
        remaining -= 1;
    }
    for (s, &v) in seeds.iter().enumerate() {
        frontier[s].extend(adj.neighbors(v).iter().filter(|&&u| assign[u] == UNASSIGNED));
    }

    let mut active: Vec<bool> = (0..k).map(|s| size[s] < quotas[s]).collect();
    let mut starved = Vec::new();
    loop {
        // Lowest fill ratio size/quota, compared by cross-multiplication.
        let mut pick: Option<usize> = None;
        for s in (0..k).filter(|&s| active[s]) {
            if pick.is_none_or(|p| size[s] * quotas[p] < size[p] * quotas[s]) {
                pick = Some(s);
            }
        }
        let Some(s) = pick else { break };
        if frontier[s].is_empty() {
            active[s] = false;
            starved.push(s);
            continue;
        }
        let v = match rule {
            AbsorbRule::LowestIndex => *frontier[s].first().unwrap(),
            AbsorbRule::MostNeighbors => {
                let mut best = (0usize, UNASSIGNED);
                for &u in &frontier[s] {
                    let inside = adj.neighbors(u).iter().filter(|&&w| assign[w] == s).count();
                    if best.1 == UNASSIGNED || inside > best.0 {
                        best = (inside, u);
                    }
                }
                best.1
            }
        };
        assign[v] = s;
        size[s] += 1;
        remaining -= 1;
        for &u in adj.neighbors(v) {
            match assign[u] {
                UNASSIGNED => {
                    frontier[s].insert(u);
                }
                t => {
                    frontier[t].remove(&v);
                }
            }
        }
        frontier[s].remove(&v);
        if size[s] == quotas[s] {
            active[s] = false;
        }
    }
    starved.sort_unstable();
    (assign, remaining, starved)
}

/// Attaches every unassigned vertex to the adjacent supervertex holding
/// most of its neighbours (ties to the smaller index). Connectivity is
/// preserved because each vertex joins a part it touches.
pub fn complete_assignment(adj: &Adjacency, assign: &mut [usize]) {
    loop {
        let snapshot = assign.to_vec();
        let mut changed = false;
        let mut pending = false;
        for v in 0..assign.len() {
            if snapshot[v] != UNASSIGNED {
                continue;
            }
            let mut counts: Vec<(usize, usize)> = Vec::new();
            for &u in adj.neighbors(v) {
                let s = snapshot[u];
                if s == UNASSIGNED {
                    continue;
                }
                match counts.iter_mut().find(|(t, _)| *t == s) {
                    Some(c) => c.1 += 1,
                    None => counts.push((s, 1)),
                }
            }
            match counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))) {
                Some((s, _)) => {
                    assign[v] = s;
                    changed = true;
                }
                None => pending = true,
            }
        }
        if !pending || !changed {
            break;
        }
    }
}

/// Moves a completed assignment towards exact quotas by shifting one
/// vertex per hop along a shortest chain of adjacent supervertices, from a
/// part above quota to one below it. Every move keeps the donor connected,
/// so intermediate parts keep their size and shape. Returns true when all
/// sizes equal their quotas.
pub fn cascade_repair(adj: &Adjacency, assign: &mut [usize], quotas: &[usize]) -> bool {
    let k = quotas.len();
    let mut size = vec![0usize; k];
    for &s in assign.iter() {
        size[s] += 1;
    }
    let mut budget = 4 * assign.len();
    let mut stuck = vec![false; k];
    while budget > 0 {
        let Some(d) = (0..k).find(|&s| size[s] < quotas[s] && !stuck[s]) else {
            break;
        };
        // Donor graph: s -> r when s can hand r a boundary vertex.
        let mut prev = vec![usize::MAX; k];
        prev[d] = d;
        let mut queue = VecDeque::from([d]);
        let mut found = None;
        'bfs: while let Some(r) = queue.pop_front() {
            for s in donors(adj, assign, &size, r) {
                if prev[s] == usize::MAX {
                    prev[s] = r;
                    if size[s] > quotas[s] {
                        found = Some(s);
                        break 'bfs;
                    }
                    queue.push_back(s);
                }
            }
        }
        let Some(src) = found else {
            stuck[d] = true;
            continue;
        };
        let mut chain = vec![src];
        while *chain.last().unwrap() != d {
            chain.push(prev[*chain.last().unwrap()]);
        }
        // chain = src, ..., d; apply hops from the receiving end.
        for pair in chain.windows(2).rev() {
            let (from, to) = (pair[0], pair[1]);
            budget = budget.saturating_sub(1);
            match best_transfer(adj, assign, &size, from, to) {
                Some(v) => {
                    assign[v] = to;
                    size[from] -= 1;
                    size[to] += 1;
                }
                None => break,
            }
        }
        stuck.iter_mut().for_each(|x| *x = false);
    }
    size == quotas
}

/// Supervertices that can give `r` a vertex, in index order.
fn donors(adj: &Adjacency, assign: &[usize], size: &[usize], r: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for v in 0..assign.len() {
        let s = assign[v];
        if s == r || out.contains(&s) {
            continue;
        }
        if adj.neighbors(v).iter().any(|&u| assign[u] == r)
            && connected_without(adj, assign, s, v, size[s])
        {
            out.push(s);
        }
    }
    out.sort_unstable();
    out
}

/// Boundary vertex of `from` touching `to` whose removal keeps `from`
/// connected: most neighbours in `to`, then smallest index.
fn best_transfer(adj: &Adjacency, assign: &[usize], size: &[usize], from: usize, to: usize) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for v in 0..assign.len() {
        if assign[v] != from {
            continue;
        }
        let touching = adj.neighbors(v).iter().filter(|&&u| assign[u] == to).count();
        if touching == 0 || best.is_some_and(|(t, _)| touching <= t) {
            continue;
        }
        if connected_without(adj, assign, from, v, size[from]) {
            best = Some((touching, v));
        }
    }
    best.map(|(_, v)| v)
}
