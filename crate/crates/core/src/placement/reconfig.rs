//! Decomposition of a target block into per-cube pieces and assignment of
//! pieces to physical cubes.

use std::collections::VecDeque;

use super::static_fit::BusyPrefix;
use crate::shapes::{FoldVariant, RingMode};
use crate::topology::ClusterState;

/// A fold variant with the number of ring hops crossing each coordinate
/// boundary of its target block.
#[derive(Debug, Clone)]
pub(crate) struct Candidate {
    pub variant: FoldVariant,
    /// `crossings[d][c]` counts hops between `c` and `c + 1` along `d`;
    /// the last entry counts wrap-around hops.
    pub crossings: [Vec<u32>; 3],
}

impl Candidate {
    pub(crate) fn new(variant: FoldVariant, comm: &crate::shapes::CommGraph) -> Self {
        let t = variant.target.0;
        let mut crossings = [vec![0u32; t[0]], vec![0u32; t[1]], vec![0u32; t[2]]];
        for path in variant.ring_paths(comm) {
            let n = path.len();
            let hops = match n {
                0 | 1 => 0,
                2 => 1,
                n => n,
            };
            for i in 0..hops {
                let (a, b) = (path[i], path[(i + 1) % n]);
                if let Some(d) = (0..3).find(|&d| a[d] != b[d]) {
                    let c = if a[d].abs_diff(b[d]) == 1 { a[d].min(b[d]) } else { t[d] - 1 };
                    crossings[d][c] += 1;
                }
            }
        }
        Self { variant, crossings }
    }

    pub(crate) fn target(&self) -> [usize; 3] {
        self.variant.target.0
    }

    pub(crate) fn mode(&self, n: usize) -> RingMode {
        let t = self.target();
        if (0..3).all(|d| !self.variant.needs_wrap[d] || t[d].is_multiple_of(n)) {
            RingMode::RingComplete
        } else {
            RingMode::LineComplete
        }
    }

    /// Whether the wrap-around hops of dimension `d` are realized as circuits.
    pub(crate) fn closes(&self, d: usize, n: usize) -> bool {
        let t = self.target()[d];
        t.is_multiple_of(n) && self.crossings[d][t - 1] > 0 && t > 1
    }

    pub(crate) fn cubes(&self, n: usize) -> usize {
        self.target().iter().map(|t| t.div_ceil(n)).product()
    }

    /// Ring hops that will run over circuits when laid out on cubes of size `n`.
    pub(crate) fn circuit_hops(&self, n: usize) -> usize {
        let t = self.target();
        let mut total = 0usize;
        for d in 0..3 {
            for c in 0..t[d].saturating_sub(1) {
                if (c + 1).is_multiple_of(n) {
                    total += self.crossings[d][c] as usize;
                }
            }
            if self.closes(d, n) {
                total += self.crossings[d][t[d] - 1] as usize;
            }
        }
        total
    }
}

/// Per-cube occupancy used while laying out pieces.
pub(crate) struct CubeView {
    pub n: usize,
    prefix: Vec<BusyPrefix>,
    free: Vec<usize>,
    /// Cubes most-utilized first (fewest free XPUs, then index), empty-free cubes dropped.
    pub order: Vec<usize>,
    sorted_free: Vec<usize>,
}

impl CubeView {
    pub(crate) fn new(state: &ClusterState) -> Self {
        let spec = state.spec();
        let n = spec.cube_size;
        let g = spec.cube_count;
        let vol = n * n * n;
        let free: Vec<usize> = (0..g).map(|c| vol - state.cube_busy(c)).collect();
        let prefix = (0..g)
            .map(|c| BusyPrefix::build([n, n, n], |x| !state.is_free_at(state.index_at(c, x))))
            .collect();
        let mut order: Vec<usize> = (0..g).filter(|&c| free[c] > 0).collect();
        order.sort_by_key(|&c| (free[c], c));
        let mut sorted_free = free.clone();
        sorted_free.sort_unstable();
        Self { n, prefix, free, order, sorted_free }
    }

    fn cubes_with_free_at_least(&self, v: usize) -> usize {
        self.sorted_free.len() - self.sorted_free.partition_point(|&f| f < v)
    }

    fn block_free(&self, cube: usize, lo: [usize; 3], len: [usize; 3]) -> bool {
        self.free[cube] >= len[0] * len[1] * len[2] && self.prefix[cube].count(lo, len) == 0
    }
}

/// Piece placement of a target block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub k: [usize; 3],
    /// Offset inside the cube along dimensions that fit in one partial cube.
    pub offset: [usize; 3],
    /// Physical cube of every virtual cell, x-fastest.
    pub cell_cube: Vec<usize>,
}

impl Layout {
    pub(crate) fn cell_index(&self, i: [usize; 3]) -> usize {
        i[0] + self.k[0] * (i[1] + self.k[1] * i[2])
    }

    pub(crate) fn cell_coord(&self, c: usize) -> [usize; 3] {
        [c % self.k[0], (c / self.k[0]) % self.k[1], c / (self.k[0] * self.k[1])]
    }

    /// Smallest (cube, corner) of any piece.
    pub(crate) fn anchor(&self, target: [usize; 3], n: usize) -> (usize, [usize; 3]) {
        (0..self.cell_cube.len())
            .map(|c| (self.cell_cube[c], piece(target, n, self.k, self.offset, self.cell_coord(c)).0))
            .min()
            .expect("layout has at least one cell")
    }
}

/// Start and length of the piece for cell `i`.
pub(crate) fn piece(t: [usize; 3], n: usize, k: [usize; 3], offset: [usize; 3], i: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let mut lo = [0; 3];
    let mut len = [0; 3];
    for d in 0..3 {
        if k[d] == 1 && t[d] < n {
            lo[d] = offset[d];
            len[d] = t[d];
        } else if i[d] + 1 < k[d] || t[d].is_multiple_of(n) {
            len[d] = n;
        } else {
            len[d] = t[d] % n;
        }
    }
    (lo, len)
}

/// Finds a layout of a `t` block: pieces on a virtual cube grid, each
/// assigned a distinct physical cube whose matching region is free.
/// Among in-cube offsets, the one whose cubes are most utilized wins,
/// then the first in scan order.
pub(crate) fn layout(view: &CubeView, t: [usize; 3]) -> Option<Layout> {
    let n = view.n;
    let k = t.map(|e| e.div_ceil(n));
    let cells = k[0] * k[1] * k[2];
    if cells > view.order.len() {
        return None;
    }
    // Piece types: same extents wherever the cell sits.
    let mut type_of = Vec::with_capacity(cells);
    let mut types: Vec<[usize; 3]> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for c in 0..cells {
        let i = [c % k[0], (c / k[0]) % k[1], c / (k[0] * k[1])];
        let (_, len) = piece(t, n, k, [0; 3], i);
        let ty = match types.iter().position(|&l| l == len) {
            Some(p) => p,
            None => {
                types.push(len);
                counts.push(0);
                types.len() - 1
            }
        };
        counts[ty] += 1;
        type_of.push(ty);
    }
    let vols: Vec<usize> = types.iter().map(|l| l[0] * l[1] * l[2]).collect();
    if (0..types.len()).any(|ty| view.cubes_with_free_at_least(vols[ty]) < counts[ty]) {
        return None;
    }
    let min_vol = *vols.iter().min().expect("at least one type");
    if view.cubes_with_free_at_least(min_vol) < cells {
        return None;
    }
    let ranges: [usize; 3] = std::array::from_fn(|d| if k[d] == 1 && t[d] < n { n - t[d] + 1 } else { 1 });
    let rank_of: std::collections::HashMap<usize, usize> = view.order.iter().enumerate().map(|(r, &c)| (c, r)).collect();
    let ideal: Vec<usize> = (0..cells).collect();
    let mut best: Option<(Vec<usize>, Layout)> = None;
    'offsets: for ox in 0..ranges[0] {
        for oy in 0..ranges[1] {
            for oz in 0..ranges[2] {
                let offset = [ox, oy, oz];
                let lo = piece(t, n, k, offset, [0; 3]).0;
                let masks: Vec<(usize, u8)> = view
                    .order
                    .iter()
                    .map(|&cube| {
                        let mut m = 0u8;
                        for (ty, len) in types.iter().enumerate() {
                            if view.block_free(cube, lo, *len) {
                                m |= 1 << ty;
                            }
                        }
                        (cube, m)
                    })
                    .filter(|&(_, m)| m != 0)
                    .collect();
                if masks.len() < cells {
                    continue;
                }
                let Some(per_type) = assign(&masks, &counts) else { continue };
                let mut next = vec![0usize; types.len()];
                let cell_cube: Vec<usize> = type_of
                    .iter()
                    .map(|&ty| {
                        let c = per_type[ty][next[ty]];
                        next[ty] += 1;
                        c
                    })
                    .collect();
                let mut score: Vec<usize> = cell_cube.iter().map(|c| rank_of[c]).collect();
                score.sort_unstable();
                if best.as_ref().is_none_or(|b| score < b.0) {
                    let done = score == ideal;
                    best = Some((score, Layout { k, offset, cell_cube }));
                    if done {
                        break 'offsets;
                    }
                }
            }
        }
    }
    best.map(|b| b.1)
}

/// Picks `counts[ty]` distinct cubes per type from cubes whose mask allows
/// it, preferring the given (most-utilized-first) order. Greedy by
/// scarcity first; falls back to an exact max-flow.
fn assign(masks: &[(usize, u8)], counts: &[usize]) -> Option<Vec<Vec<usize>>> {
    let nt = counts.len();
    let hosts = |ty: usize| masks.iter().filter(|&&(_, m)| m & (1 << ty) != 0).count();
    let mut by_scarcity: Vec<usize> = (0..nt).collect();
    by_scarcity.sort_by_key(|&ty| (hosts(ty), ty));
    let mut used = vec![false; masks.len()];
    let mut out = vec![Vec::new(); nt];
    let mut greedy_ok = true;
    for &ty in &by_scarcity {
        for (j, &(cube, m)) in masks.iter().enumerate() {
            if out[ty].len() == counts[ty] {
                break;
            }
            if !used[j] && m & (1 << ty) != 0 {
                used[j] = true;
                out[ty].push(cube);
            }
        }
        if out[ty].len() < counts[ty] {
            greedy_ok = false;
            break;
        }
    }
    if greedy_ok {
        return Some(out);
    }
    flow_assign(masks, counts)
}

/// Exact assignment by max-flow over (type -> cube class by mask).
fn flow_assign(masks: &[(usize, u8)], counts: &[usize]) -> Option<Vec<Vec<usize>>> {
    let nt = counts.len();
    let mut classes: Vec<(u8, Vec<usize>)> = Vec::new();
    for &(cube, m) in masks {
        match classes.iter_mut().find(|c| c.0 == m) {
            Some(c) => c.1.push(cube),
            None => classes.push((m, vec![cube])),
        }
    }
    let nc = classes.len();
    // Nodes: source 0, types 1..=nt, classes nt+1..=nt+nc, sink nt+nc+1.
    let nodes = nt + nc + 2;
    let sink = nodes - 1;
    let mut cap = vec![vec![0usize; nodes]; nodes];
    for ty in 0..nt {
        cap[0][1 + ty] = counts[ty];
        for (ci, c) in classes.iter().enumerate() {
            if c.0 & (1 << ty) != 0 {
                cap[1 + ty][1 + nt + ci] = usize::MAX / 2;
            }
        }
    }
    for (ci, c) in classes.iter().enumerate() {
        cap[1 + nt + ci][sink] = c.1.len();
    }
    let orig = cap.clone();
    let need: usize = counts.iter().sum();
    let mut flow = 0;
    loop {
        let mut prev = vec![usize::MAX; nodes];
        prev[0] = 0;
        let mut q = VecDeque::from([0usize]);
        while let Some(v) = q.pop_front() {
            for w in 0..nodes {
                if prev[w] == usize::MAX && cap[v][w] > 0 {
                    prev[w] = v;
                    q.push_back(w);
                }
            }
        }
        if prev[sink] == usize::MAX {
            break;
        }
        let mut aug = usize::MAX;
        let mut v = sink;
        while v != 0 {
            aug = aug.min(cap[prev[v]][v]);
            v = prev[v];
        }
        let mut v = sink;
        while v != 0 {
            cap[prev[v]][v] -= aug;
            cap[v][prev[v]] += aug;
            v = prev[v];
        }
        flow += aug;
    }
    if flow < need {
        return None;
    }
    let mut next = vec![0usize; nc];
    let mut out = vec![Vec::new(); nt];
    for ty in 0..nt {
        for ci in 0..nc {
            let a = 1 + ty;
            let b = 1 + nt + ci;
            if orig[a][b] == 0 {
                continue;
            }
            let f = orig[a][b] - cap[a][b];
            for _ in 0..f {
                out[ty].push(classes[ci].1[next[ci]]);
                next[ci] += 1;
            }
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::comm_graph;
    use crate::topology::{build_cluster, ClusterSpec, JobId};
    use crate::workload::Shape;

    fn cand(s: Shape) -> Candidate {
        Candidate::new(FoldVariant::identity(s), &comm_graph(s))
    }

    #[test]
    fn costs_of_chains() {
        let c = cand(Shape::new(4, 4, 32));
        assert_eq!(c.cubes(4), 8);
        assert_eq!(c.mode(4), RingMode::RingComplete);
        // X and Y close through self-wraps, Z through 8 chained boundaries.
        assert_eq!(c.circuit_hops(4), 8 * (16 + 16) + 8 * 16);
        let c = cand(Shape::new(4, 4, 34));
        assert_eq!(c.cubes(4), 9);
        assert_eq!(c.mode(4), RingMode::LineComplete);
        let c = cand(Shape::new(2, 2, 2));
        assert_eq!((c.cubes(4), c.circuit_hops(4), c.mode(4)), (1, 0, RingMode::RingComplete));
    }

    #[test]
    fn flow_solves_what_greedy_misses() {
        // Type 0 fits cubes 10 and 11, type 1 only cube 10: greedy by
        // scarcity handles it; the flow must agree.
        let masks = [(10, 0b11), (11, 0b01)];
        let got = assign(&masks, &[1, 1]).unwrap();
        assert_eq!(got, vec![vec![11], vec![10]]);
        assert_eq!(flow_assign(&masks, &[1, 1]).unwrap(), vec![vec![11], vec![10]]);
        assert!(flow_assign(&masks, &[2, 1]).is_none());
    }

    #[test]
    fn layout_prefers_busy_cubes_and_offsets() {
        let mut state = build_cluster(&ClusterSpec::reconfigurable(4, 4)).unwrap();
        let x = crate::topology::XpuId::new(2, [0, 0, 0]);
        state.allocate(JobId(1), &[x], &[]).unwrap();
        let view = CubeView::new(&state);
        assert_eq!(view.order, vec![2, 0, 1, 3]);
        let l = layout(&view, [2, 2, 2]).unwrap();
        assert_eq!(l.cell_cube, vec![2]);
        assert_eq!(l.offset, [0, 0, 1]);
        let l = layout(&view, [4, 4, 8]).unwrap();
        assert_eq!(l.cell_cube, vec![0, 1]);
        assert!(layout(&view, [4, 4, 16]).is_none());
    }
}
