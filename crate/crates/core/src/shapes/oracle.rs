//! Exhaustive embedding check for small shapes, used to cross-check the
//! fold catalogue and the placement policies.

use std::collections::HashMap;

use super::{comm_graph, RingMode};
use crate::error::{Error, Result};
use crate::workload::Shape;

/// Largest node count the oracle accepts by default.
pub const DEFAULT_ORACLE_BOUND: usize = 24;

struct Target {
    /// Multiplicity of links between each node pair (smaller index first).
    links: HashMap<(usize, usize), u8>,
    adj: Vec<Vec<usize>>,
}

fn target_graph(ext: [usize; 3], wrap: [bool; 3]) -> Target {
    let n = ext[0] * ext[1] * ext[2];
    let mut links: HashMap<(usize, usize), u8> = HashMap::new();
    let mut adj = vec![Vec::new(); n];
    let idx = |c: [usize; 3]| c[0] + ext[0] * (c[1] + ext[1] * c[2]);
    for i in 0..n {
        let c = super::node_coord(ext, i);
        for d in 0..3 {
            let e = ext[d];
            let mut next = c;
            if c[d] + 1 < e {
                next[d] = c[d] + 1;
            } else if wrap[d] && e >= 2 {
                next[d] = 0;
            } else {
                continue;
            }
            let j = idx(next);
            let key = (i.min(j), i.max(j));
            let m = links.entry(key).or_insert(0);
            *m += 1;
            if *m == 1 {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    Target { links, adj }
}

/// Whether `shape`'s rings embed edge-disjointly into a block of `target`
/// extents, wrapping along the flagged dimensions.
///
/// Ring-complete needs every ring closed. Line-complete lets each ring of
/// three or more members drop one hop. Shapes above `bound` nodes are
/// refused rather than searched.
pub fn brute_force_embeddable(shape: Shape, target: [usize; 3], wrap: [bool; 3], mode: RingMode, bound: usize) -> Result<bool> {
    let n = shape.size();
    if n > bound {
        return Err(Error::Refused(format!("shape {shape} has {n} nodes, above the oracle bound {bound}")));
    }
    let tn = target.iter().product::<usize>();
    if n > tn {
        return Ok(false);
    }
    let comm = comm_graph(shape);
    // Constraint edges: (node a, node b, ring).
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (r, ring) in comm.rings.iter().enumerate() {
        let l = ring.len();
        for i in 0..ring.hop_count() {
            let (a, b) = (ring.members[i], ring.members[(i + 1) % l]);
            edges[a].push((b, r));
            edges[b].push((a, r));
        }
    }
    // Breadth-first placement order keeps constrained nodes together.
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut q = std::collections::VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            order.push(v);
            for &(w, _) in &edges[v] {
                if !seen[w] {
                    seen[w] = true;
                    q.push_back(w);
                }
            }
        }
    }
    let mut search = Search {
        t: target_graph(target, wrap),
        tn,
        edges,
        ring_len: comm.rings.iter().map(|r| r.len()).collect(),
        order,
        place: vec![usize::MAX; n],
        used_t: vec![false; tn],
        used_links: HashMap::new(),
        open: vec![0; comm.rings.len()],
        line: mode == RingMode::LineComplete,
    };
    Ok(search.run(0))
}

struct Search {
    t: Target,
    tn: usize,
    edges: Vec<Vec<(usize, usize)>>,
    ring_len: Vec<usize>,
    order: Vec<usize>,
    place: Vec<usize>,
    used_t: Vec<bool>,
    used_links: HashMap<(usize, usize), u8>,
    open: Vec<u8>,
    line: bool,
}

enum Hop {
    Link((usize, usize)),
    Open(usize),
}

impl Search {
    fn run(&mut self, k: usize) -> bool {
        if k == self.order.len() {
            return true;
        }
        let v = self.order[k];
        let anchor = self.edges[v].iter().find(|&&(w, _)| self.place[w] != usize::MAX).map(|&(w, _)| self.place[w]);
        let cands: Vec<usize> = match anchor {
            Some(a) if !self.line => self.t.adj[a].clone(),
            _ => (0..self.tn).collect(),
        };
        for c in cands {
            if self.used_t[c] {
                continue;
            }
            if let Some(taken) = self.try_place(v, c) {
                self.place[v] = c;
                self.used_t[c] = true;
                if self.run(k + 1) {
                    return true;
                }
                self.place[v] = usize::MAX;
                self.used_t[c] = false;
                self.undo(taken);
            }
        }
        false
    }

    fn try_place(&mut self, v: usize, c: usize) -> Option<Vec<Hop>> {
        let mut taken = Vec::new();
        for i in 0..self.edges[v].len() {
            let (w, r) = self.edges[v][i];
            let pw = self.place[w];
            if pw == usize::MAX {
                continue;
            }
            let key = (c.min(pw), c.max(pw));
            let cap = self.t.links.get(&key).copied().unwrap_or(0);
            let used = self.used_links.get(&key).copied().unwrap_or(0);
            if used < cap {
                *self.used_links.entry(key).or_insert(0) += 1;
                taken.push(Hop::Link(key));
            } else if self.line && self.ring_len[r] >= 3 && self.open[r] == 0 {
                self.open[r] += 1;
                taken.push(Hop::Open(r));
            } else {
                self.undo(taken);
                return None;
            }
        }
        Some(taken)
    }

    fn undo(&mut self, taken: Vec<Hop>) {
        for h in taken {
            match h {
                Hop::Link(key) => *self.used_links.get_mut(&key).expect("taken link") -= 1,
                Hop::Open(r) => self.open[r] -= 1,
            }
        }
    }
}
