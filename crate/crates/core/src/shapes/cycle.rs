//! Hamiltonian-style cycle and path constructions, and a bounded search
//! for simple cycles in the graph of free XPUs.

use std::collections::VecDeque;

use crate::topology::{ClusterState, LinkId};

/// Node expansions a single search may spend before giving up.
pub const DEFAULT_CYCLE_BUDGET: u64 = 1_000_000;

const NONE: u32 = u32::MAX;

/// Closed boustrophedon tour of a 2D or 3D grid.
///
/// Returns `None` unless at least two dimensions are given, each at least
/// two long, with an even product. Consecutive entries (and the last and
/// first) differ by one in exactly one coordinate; unused coordinates are 0.
pub fn grid_cycle(dims: &[usize]) -> Option<Vec<[usize; 3]>> {
    match *dims {
        [p, q] => (p >= 2 && q >= 2 && (p * q) % 2 == 0).then(|| two_d(p, q).into_iter().map(|(i, j)| [i, j, 0]).collect()),
        [p, q, r] => {
            if p < 2 || q < 2 || r < 2 || (p * q * r) % 2 != 0 {
                return None;
            }
            let snake: Vec<(usize, usize)> = (0..r)
                .flat_map(|b| {
                    let row: Vec<usize> = if b % 2 == 0 { (0..q).collect() } else { (0..q).rev().collect() };
                    row.into_iter().map(move |a| (a, b))
                })
                .collect();
            Some(two_d(p, q * r).into_iter().map(|(i, k)| [i, snake[k].0, snake[k].1]).collect())
        }
        _ => None,
    }
}

fn two_d(p: usize, q: usize) -> Vec<(usize, usize)> {
    if !p.is_multiple_of(2) {
        return two_d(q, p).into_iter().map(|(i, j)| (j, i)).collect();
    }
    let mut out = Vec::with_capacity(p * q);
    out.extend((0..q).map(|j| (0, j)));
    for r in 1..p {
        if r % 2 == 1 {
            out.extend((1..q).rev().map(|j| (r, j)));
        } else {
            out.extend((1..q).map(|j| (r, j)));
        }
    }
    out.extend((1..p).rev().map(|r| (r, 0)));
    out
}

/// Closed tour of a `p x q` grid whose second axis wraps (`q >= 3`).
/// Exists for any `p, q >= 2`, including odd `p * q`.
pub(crate) fn cylinder_cycle(p: usize, q: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(p * q);
    out.extend((0..p).map(|i| [i, 0, 0]));
    for k in 0..p {
        let r = p - 1 - k;
        if k % 2 == 0 {
            out.extend((1..q).rev().map(|j| [r, j, 0]));
        } else {
            out.extend((1..q).map(|j| [r, j, 0]));
        }
    }
    out
}

/// Induced subgraph of a cluster's link graph over selected XPUs.
#[derive(Debug, Clone)]
pub struct AvailGraph {
    xpus: Vec<usize>,
    adj: Vec<Vec<(u32, LinkId)>>,
}

impl AvailGraph {
    /// XPUs accepted by `include`, in index order, with every link of
    /// `state` joining two of them.
    pub fn from_state(state: &ClusterState, include: impl Fn(usize) -> bool) -> Self {
        let total = state.total_xpus();
        let mut pos = vec![NONE; total];
        let mut xpus = Vec::new();
        for i in 0..total {
            if include(i) {
                pos[i] = xpus.len() as u32;
                xpus.push(i);
            }
        }
        let adj = xpus
            .iter()
            .map(|&i| {
                let mut v = Vec::with_capacity(6);
                state.for_each_neighbor(i, |l, n| {
                    if pos[n] != NONE {
                        v.push((pos[n], l));
                    }
                });
                v
            })
            .collect();
        Self { xpus, adj }
    }

    /// All free XPUs and the links between them.
    pub fn free(state: &ClusterState) -> Self {
        Self::from_state(state, |i| state.is_free_at(i))
    }

    pub fn len(&self) -> usize {
        self.xpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xpus.is_empty()
    }

    /// Cluster index of node `pos`.
    pub fn xpu_index(&self, pos: usize) -> usize {
        self.xpus[pos]
    }

    pub fn neighbors(&self, pos: usize) -> impl Iterator<Item = (usize, LinkId)> + '_ {
        self.adj[pos].iter().map(|&(n, l)| (n as usize, l))
    }

    /// Component label per node plus, per component, its size and whether
    /// it is bipartite.
    fn components(&self) -> (Vec<u32>, Vec<(usize, bool)>) {
        let n = self.len();
        let mut label = vec![NONE; n];
        let mut color = vec![0u8; n];
        let mut info = Vec::new();
        let mut queue = VecDeque::new();
        for s in 0..n {
            if label[s] != NONE {
                continue;
            }
            let c = info.len() as u32;
            label[s] = c;
            queue.push_back(s);
            let (mut size, mut bip) = (0, true);
            while let Some(v) = queue.pop_front() {
                size += 1;
                for &(w, _) in &self.adj[v] {
                    let w = w as usize;
                    if label[w] == NONE {
                        label[w] = c;
                        color[w] = color[v] ^ 1;
                        queue.push_back(w);
                    } else if color[w] == color[v] {
                        bip = false;
                    }
                }
            }
            info.push((size, bip));
        }
        (label, info)
    }
}

struct Frame {
    node: usize,
    cands: Vec<usize>,
    next: usize,
}

/// Finds a simple cycle of exactly `len` nodes (node positions, in order).
///
/// Length 1 is any node and length 2 any adjacent pair. Components smaller
/// than `len` are skipped, as are bipartite components when `len` is odd.
/// Returns `None` when no cycle exists or `budget` expansions run out.
pub fn find_cycle(g: &AvailGraph, len: usize, budget: u64) -> Option<Vec<usize>> {
    if len == 0 || len > g.len() {
        return None;
    }
    if len == 1 {
        return Some(vec![0]);
    }
    if len == 2 {
        return (0..g.len()).find_map(|v| g.adj[v].first().map(|&(w, _)| vec![v, w as usize]));
    }
    let (label, info) = g.components();
    let mut spent = 0u64;
    let mut dist = vec![NONE; g.len()];
    let mut on_path = vec![false; g.len()];
    let mut queue = VecDeque::new();
    for s in 0..g.len() {
        let (size, bip) = info[label[s] as usize];
        if size < len || (bip && len % 2 == 1) {
            continue;
        }
        // Exact distances back to the start among nodes it may still use.
        dist.iter_mut().for_each(|d| *d = NONE);
        dist[s] = 0;
        queue.push_back(s);
        let mut reach = 0usize;
        while let Some(v) = queue.pop_front() {
            reach += 1;
            for &(w, _) in &g.adj[v] {
                let w = w as usize;
                if w > s && dist[w] == NONE {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        spent += reach as u64;
        if reach < len {
            continue;
        }
        if let Some(c) = cycle_from(g, s, len, bip, &dist, &mut on_path, &mut spent, budget) {
            return Some(c);
        }
        if spent >= budget {
            return None;
        }
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn cycle_from(
    g: &AvailGraph,
    s: usize,
    len: usize,
    bipartite: bool,
    dist: &[u32],
    on_path: &mut [bool],
    spent: &mut u64,
    budget: u64,
) -> Option<Vec<usize>> {
    let mut path = vec![s];
    on_path[s] = true;
    let mut stack = vec![Frame { node: s, cands: candidates(g, s, s, 1, len, bipartite, dist, on_path), next: 0 }];
    let result = loop {
        let Some(top) = stack.last_mut() else { break None };
        if top.next >= top.cands.len() {
            on_path[top.node] = false;
            path.pop();
            stack.pop();
            continue;
        }
        let w = top.cands[top.next];
        top.next += 1;
        *spent += 1;
        if *spent >= budget {
            break None;
        }
        path.push(w);
        on_path[w] = true;
        if path.len() == len {
            if g.adj[w].iter().any(|&(x, _)| x as usize == s) {
                break Some(path.clone());
            }
            on_path[w] = false;
            path.pop();
            continue;
        }
        let cands = candidates(g, s, w, path.len(), len, bipartite, dist, on_path);
        stack.push(Frame { node: w, cands, next: 0 });
    };
    for &v in &path {
        on_path[v] = false;
    }
    result
}

/// Unvisited neighbors of `v` that can still close a cycle of `len` nodes
/// when the path already holds `k` nodes, fewest onward options first.
#[allow(clippy::too_many_arguments)]
fn candidates(
    g: &AvailGraph,
    s: usize,
    v: usize,
    k: usize,
    len: usize,
    bipartite: bool,
    dist: &[u32],
    on_path: &[bool],
) -> Vec<usize> {
    let remaining = (len - k) as u32;
    let mut c: Vec<(usize, u32, usize)> = Vec::with_capacity(6);
    for &(w, _) in &g.adj[v] {
        let w = w as usize;
        if on_path[w] || dist[w] == NONE || c.iter().any(|e| e.2 == w) {
            continue;
        }
        let d = dist[w];
        if d > remaining || (bipartite && !(remaining - d).is_multiple_of(2)) {
            continue;
        }
        let onward = g.adj[w].iter().filter(|&&(x, _)| !on_path[x as usize] && dist[x as usize] != NONE).count();
        c.push((onward, u32::MAX - d, w));
    }
    let _ = s;
    c.sort_unstable();
    c.into_iter().map(|e| e.2).collect()
}

/// Finds a simple path of exactly `len` nodes.
pub fn find_path(g: &AvailGraph, len: usize, budget: u64) -> Option<Vec<usize>> {
    if len == 0 || len > g.len() {
        return None;
    }
    let (label, info) = g.components();
    let mut spent = 0u64;
    let mut on_path = vec![false; g.len()];
    for s in 0..g.len() {
        if info[label[s] as usize].0 < len {
            continue;
        }
        let mut path = vec![s];
        on_path[s] = true;
        let order = |v: usize, on_path: &[bool]| -> Vec<usize> {
            let mut c: Vec<(usize, usize)> = Vec::new();
            for &(w, _) in &g.adj[v] {
                let w = w as usize;
                if !on_path[w] && !c.iter().any(|e| e.1 == w) {
                    let onward = g.adj[w].iter().filter(|&&(x, _)| !on_path[x as usize]).count();
                    c.push((onward, w));
                }
            }
            c.sort_unstable();
            c.into_iter().map(|e| e.1).collect()
        };
        let mut stack = vec![Frame { node: s, cands: order(s, &on_path), next: 0 }];
        let mut found = len == 1;
        while !found {
            let Some(top) = stack.last_mut() else { break };
            if top.next >= top.cands.len() {
                on_path[top.node] = false;
                path.pop();
                stack.pop();
                continue;
            }
            let w = top.cands[top.next];
            top.next += 1;
            spent += 1;
            if spent >= budget {
                return None;
            }
            path.push(w);
            on_path[w] = true;
            if path.len() == len {
                found = true;
                break;
            }
            let cands = order(w, &on_path);
            stack.push(Frame { node: w, cands, next: 0 });
        }
        for &v in &path {
            on_path[v] = false;
        }
        if found {
            return Some(path);
        }
    }
    None
}
