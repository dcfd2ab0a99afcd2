//! Communication graphs of job shapes, homomorphic fold variants and
//! verification of physical mappings.
//!
//! A job of shape `A x B x C` runs one AllReduce ring per line along each
//! dimension whose extent exceeds one. A fold variant re-arranges the job's
//! logical coordinates into a different target block such that every ring
//! still walks a closed cycle of single hops inside that block.

mod cycle;
mod oracle;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::topology::{ClusterState, LinkId, XpuId};
use crate::workload::Shape;

pub use cycle::{find_cycle, find_path, grid_cycle, AvailGraph, DEFAULT_CYCLE_BUDGET};
pub use oracle::{brute_force_embeddable, DEFAULT_ORACLE_BOUND};

/// Row-major (x fastest) index of a logical coordinate.
pub fn node_index(extents: [usize; 3], c: [usize; 3]) -> usize {
    c[0] + extents[0] * (c[1] + extents[1] * c[2])
}

pub fn node_coord(extents: [usize; 3], i: usize) -> [usize; 3] {
    [i % extents[0], (i / extents[0]) % extents[1], i / (extents[0] * extents[1])]
}

/// Distinct coordinate permutations of a shape, first occurrence kept.
pub fn rotations(shape: Shape) -> Vec<Shape> {
    rotation_perms(shape).into_iter().map(|p| permute(shape, p)).collect()
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Permutations `p` with `rotated[d] = shape[p[d]]`, deduplicated by result.
pub fn rotation_perms(shape: Shape) -> Vec<[usize; 3]> {
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for p in PERMS {
        let r = permute(shape, p);
        if !seen.contains(&r) {
            seen.push(r);
            out.push(p);
        }
    }
    out
}

fn permute(shape: Shape, p: [usize; 3]) -> Shape {
    Shape([shape.0[p[0]], shape.0[p[1]], shape.0[p[2]]])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ring {
    pub dim: usize,
    /// Node indices in ring order (increasing coordinate along `dim`).
    pub members: Vec<usize>,
}

impl Ring {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Number of hops a closed realization needs.
    pub fn hop_count(&self) -> usize {
        match self.members.len() {
            0 | 1 => 0,
            2 => 1,
            n => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    pub shape: Shape,
    pub rings: Vec<Ring>,
}

impl CommGraph {
    pub fn node_count(&self) -> usize {
        self.shape.size()
    }

    pub fn rings_along(&self, dim: usize) -> impl Iterator<Item = &Ring> {
        self.rings.iter().filter(move |r| r.dim == dim)
    }
}

/// One ring per line along every dimension of extent greater than one.
pub fn comm_graph(shape: Shape) -> CommGraph {
    let ext = shape.0;
    let mut rings = Vec::new();
    for d in 0..3 {
        if ext[d] <= 1 {
            continue;
        }
        let (a, b) = match d {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..ext[b] {
            for i in 0..ext[a] {
                let members = (0..ext[d])
                    .map(|k| {
                        let mut c = [0; 3];
                        c[a] = i;
                        c[b] = j;
                        c[d] = k;
                        node_index(ext, c)
                    })
                    .collect();
                rings.push(Ring { dim: d, members });
            }
        }
    }
    CommGraph { shape, rings }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingMode {
    RingComplete,
    LineComplete,
}

impl RingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RingMode::RingComplete => "ring",
            RingMode::LineComplete => "line",
        }
    }
}

impl std::str::FromStr for RingMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "ring" | "ring_complete" => Ok(RingMode::RingComplete),
            "line" | "line_complete" => Ok(RingMode::LineComplete),
            _ => Err(crate::Error::Config(format!("invalid ring mode {s:?}, expected ring or line"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FoldKind {
    /// The shape itself or one of its rotations.
    Identity,
    /// A ring dimension laid out as a Hamiltonian cycle of a 2D/3D block.
    Serpentine,
    /// Two layers paired through the block's interior and its wrap links.
    Reflection,
}

/// Where fold variants will be embedded; decides which wrap-dependent
/// folds are worth emitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FoldContext {
    /// Keep everything (the variant's own wrap requirements still apply).
    Any,
    /// Reconfigurable cubes of this edge length: a target extent wraps
    /// when it is a multiple of the cube size.
    Reconfigurable { cube_size: usize },
    /// A static torus: a target extent wraps only when it spans the torus.
    Static { extents: [usize; 3] },
}

impl FoldContext {
    pub fn wrappable(&self, dim: usize, extent: usize) -> bool {
        match *self {
            FoldContext::Any => true,
            FoldContext::Reconfigurable { cube_size } => extent.is_multiple_of(cube_size),
            FoldContext::Static { extents } => extent == extents[dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Recipe {
    /// `target[d] = orig[perm[d]]`.
    Permute,
    /// Original dimension `src` walks `cycle` (target coordinates that are
    /// non-zero only on the cycle dimensions); `pass` copies the others.
    Cycle { src: usize, cycle: Vec<[usize; 3]>, pass: Vec<(usize, usize)> },
    /// Layers `c = 0, 1` of dimension `c` fold the `b` dimension in half.
    Reflect { b: usize, c: usize },
}

/// A homomorphic re-arrangement of a job shape.
///
/// The node map and ring paths are computed on demand; enumerating variants
/// only fixes the target block and which of its dimensions must wrap.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FoldVariant {
    pub kind: FoldKind,
    pub target: Shape,
    /// Target dimensions whose wrap-around hop some ring uses.
    pub needs_wrap: [bool; 3],
    source: Shape,
    recipe: Recipe,
    /// Final axis permutation applied after the recipe.
    perm: [usize; 3],
}

impl FoldVariant {
    pub fn identity(shape: Shape) -> Self {
        Self {
            kind: FoldKind::Identity,
            target: shape,
            needs_wrap: shape.0.map(|e| e > 2),
            source: shape,
            recipe: Recipe::Permute,
            perm: [0, 1, 2],
        }
    }

    pub fn source(&self) -> Shape {
        self.source
    }

    fn with_perm(&self, p: [usize; 3]) -> Self {
        let mut v = self.clone();
        v.perm = [self.perm[p[0]], self.perm[p[1]], self.perm[p[2]]];
        v.target = permute(self.target, p);
        v.needs_wrap = [self.needs_wrap[p[0]], self.needs_wrap[p[1]], self.needs_wrap[p[2]]];
        v
    }

    /// Target coordinate of original coordinate `c`.
    pub fn map_coord(&self, c: [usize; 3]) -> [usize; 3] {
        let base = match &self.recipe {
            Recipe::Permute => c,
            Recipe::Cycle { src, cycle, pass } => {
                let mut t = cycle[c[*src]];
                for &(o, td) in pass {
                    t[td] = c[o];
                }
                t
            }
            Recipe::Reflect { b, c: cd } => {
                let half = self.source.0[*b] / 2;
                let y = c[*b];
                let z = c[*cd];
                let mut t = c;
                let upper = y >= half;
                t[*b] = if upper { 2 * half - 1 - y } else { y };
                t[*cd] = match (z, upper) {
                    (0, false) => 1,
                    (0, true) => 2,
                    (_, false) => 0,
                    (_, true) => 3,
                };
                t
            }
        };
        [base[self.perm[0]], base[self.perm[1]], base[self.perm[2]]]
    }

    /// Target coordinate of every original node, indexed by node.
    pub fn node_map(&self) -> Vec<[usize; 3]> {
        (0..self.source.size()).map(|i| self.map_coord(node_coord(self.source.0, i))).collect()
    }

    /// The target-coordinate cycle each ring of `comm_graph(source)` walks.
    pub fn ring_paths(&self, comm: &CommGraph) -> Vec<Vec<[usize; 3]>> {
        let map = self.node_map();
        comm.rings.iter().map(|r| r.members.iter().map(|&n| map[n]).collect()).collect()
    }
}

/// Fold variants of `shape`: the identity and its rotations first, then
/// serpentine folds, then reflection folds, each followed by its rotations.
/// Duplicates (same target and wrap requirement) keep the first entry.
pub fn enumerate_folds(shape: Shape, ctx: FoldContext) -> Vec<FoldVariant> {
    let mut out: Vec<FoldVariant> = Vec::new();
    let mut seen: HashSet<(Shape, [bool; 3])> = HashSet::new();
    let mut push = |v: FoldVariant, out: &mut Vec<FoldVariant>| {
        for p in PERMS {
            let r = v.with_perm(p);
            if r.kind != FoldKind::Identity && !(0..3).all(|d| !r.needs_wrap[d] || ctx.wrappable(d, r.target.0[d])) {
                continue;
            }
            if let FoldContext::Static { extents } = ctx {
                if r.kind != FoldKind::Identity && (0..3).any(|d| r.target.0[d] > extents[d]) {
                    continue;
                }
            }
            if seen.insert((r.target, r.needs_wrap)) {
                out.push(r);
            }
        }
    };
    push(FoldVariant::identity(shape), &mut out);
    for v in serpentine_folds(shape) {
        push(v, &mut out);
    }
    for v in reflection_folds(shape) {
        push(v, &mut out);
    }
    out
}

fn ordered_pairs(s: usize) -> Vec<(usize, usize)> {
    (2..=s / 2).filter(|p| s.is_multiple_of(*p) && s / p >= 2).map(|p| (p, s / p)).collect()
}

fn serpentine_folds(shape: Shape) -> Vec<FoldVariant> {
    let ext = shape.0;
    let mut out = Vec::new();
    for src in 0..3 {
        let s = ext[src];
        if s < 4 {
            continue;
        }
        let others: Vec<usize> = (0..3).filter(|&d| d != src).collect();
        for &free in others.iter().filter(|&&d| ext[d] == 1) {
            let rest: Vec<usize> = others.iter().copied().filter(|&d| d != free).collect();
            let pass: Vec<(usize, usize)> = rest.iter().map(|&o| (o, o)).collect();
            let rest_wrap = |t: &mut [bool; 3]| {
                for &o in &rest {
                    t[o] = ext[o] > 2;
                }
            };
            for (p, q) in ordered_pairs(s) {
                let (cycle, wrap_dim) = if s.is_multiple_of(2) {
                    (grid_cycle(&[p, q]).expect("even grid has a cycle"), None)
                } else {
                    // Odd blocks only close with the second axis wrapping.
                    (cycle::cylinder_cycle(p, q), Some(free))
                };
                let cycle = cycle
                    .into_iter()
                    .map(|c| {
                        let mut t = [0; 3];
                        t[src] = c[0];
                        t[free] = c[1];
                        t
                    })
                    .collect();
                let mut target = ext;
                target[src] = p;
                target[free] = q;
                let mut needs_wrap = [false; 3];
                rest_wrap(&mut needs_wrap);
                if let Some(w) = wrap_dim {
                    needs_wrap[w] = true;
                }
                out.push(FoldVariant {
                    kind: FoldKind::Serpentine,
                    target: Shape(target),
                    needs_wrap,
                    source: shape,
                    recipe: Recipe::Cycle { src, cycle, pass: pass.clone() },
                    perm: [0, 1, 2],
                });
            }
        }
        if others.iter().all(|&d| ext[d] == 1) && s.is_multiple_of(2) {
            let [f1, f2] = [others[0], others[1]];
            for (p, rest) in ordered_pairs(s) {
                for (q, r) in ordered_pairs(rest) {
                    let cycle = grid_cycle(&[p, q, r]).expect("even 3D grid has a cycle");
                    let cycle = cycle
                        .into_iter()
                        .map(|c| {
                            let mut t = [0; 3];
                            t[src] = c[0];
                            t[f1] = c[1];
                            t[f2] = c[2];
                            t
                        })
                        .collect();
                    let mut target = [0; 3];
                    target[src] = p;
                    target[f1] = q;
                    target[f2] = r;
                    out.push(FoldVariant {
                        kind: FoldKind::Serpentine,
                        target: Shape(target),
                        needs_wrap: [false; 3],
                        source: shape,
                        recipe: Recipe::Cycle { src, cycle, pass: Vec::new() },
                        perm: [0, 1, 2],
                    });
                }
            }
        }
    }
    out
}

fn reflection_folds(shape: Shape) -> Vec<FoldVariant> {
    let ext = shape.0;
    let mut out = Vec::new();
    for b in 0..3 {
        for c in 0..3 {
            if b == c || ext[b] < 4 || !ext[b].is_multiple_of(2) || ext[c] != 2 {
                continue;
            }
            let a = 3 - b - c;
            let mut target = ext;
            target[b] = ext[b] / 2;
            target[c] = 4;
            let mut needs_wrap = [false; 3];
            needs_wrap[a] = ext[a] > 2;
            needs_wrap[c] = true;
            out.push(FoldVariant {
                kind: FoldKind::Reflection,
                target: Shape(target),
                needs_wrap,
                source: shape,
                recipe: Recipe::Reflect { b, c },
                perm: [0, 1, 2],
            });
        }
    }
    out
}

/// Whether consecutive target coordinates are one hop apart in a block of
/// `extents`, using wrap hops only along `wrap` dimensions.
pub fn grid_adjacent(extents: [usize; 3], wrap: [bool; 3], a: [usize; 3], b: [usize; 3]) -> bool {
    let mut diff = None;
    for d in 0..3 {
        if a[d] != b[d] {
            if diff.is_some() {
                return false;
            }
            diff = Some(d);
        }
    }
    let Some(d) = diff else { return false };
    let (lo, hi) = (a[d].min(b[d]), a[d].max(b[d]));
    hi - lo == 1 || (wrap[d] && lo == 0 && hi == extents[d] - 1)
}

/// Physical realization of one ring: `hops[i]` joins member `i` to member
/// `(i + 1) % len`. Length-2 rings have one hop, length-1 rings none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingRealization {
    pub hops: Vec<Option<LinkId>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementMapping {
    pub mode: RingMode,
    /// XPU hosting each logical node of the job's original shape.
    pub xpu_of: Vec<XpuId>,
    /// One entry per ring of the original shape's comm graph.
    pub rings: Vec<RingRealization>,
}

impl PlacementMapping {
    /// Realizes every ring hop over links of `state`, taking a link
    /// between each consecutive XPU pair that no earlier hop used
    /// (hardwired links before circuits).
    /// Hops without such a link are left open.
    pub fn realize(state: &ClusterState, comm: &CommGraph, xpu_index: &[usize], mode: RingMode) -> Self {
        let mut used: HashSet<LinkId> = HashSet::with_capacity(comm.rings.len() * 4);
        let rings = comm
            .rings
            .iter()
            .map(|ring| {
                let n = ring.members.len();
                let hops = (0..ring.hop_count())
                    .map(|i| {
                        let a = xpu_index[ring.members[i]];
                        let b = xpu_index[ring.members[(i + 1) % n]];
                        let l = state.preferred_link_between(a, b, |l| used.contains(&l));
                        if let Some(l) = l {
                            used.insert(l);
                        }
                        l
                    })
                    .collect();
                RingRealization { hops }
            })
            .collect();
        PlacementMapping { mode, xpu_of: xpu_index.iter().map(|&i| state.xpu_at(i)).collect(), rings }
    }

    pub fn links(&self) -> impl Iterator<Item = LinkId> + '_ {
        self.rings.iter().flat_map(|r| r.hops.iter().flatten().copied())
    }

    /// Whether every ring closed (the mapping could claim ring-complete mode).
    pub fn all_closed(&self) -> bool {
        self.rings.iter().all(|r| r.hops.iter().all(Option::is_some))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NodeCount { expected: usize, got: usize },
    RingCount { expected: usize, got: usize },
    HopCount { ring: usize },
    UnknownXpu(XpuId),
    NotInjective(XpuId),
    XpuBusy(XpuId),
    /// The recorded link does not join the two consecutive members.
    NotAdjacent { ring: usize, hop: usize },
    /// No link recorded for this hop.
    Open { ring: usize, hop: usize },
    /// More open hops than the mode permits.
    TooManyOpen { ring: usize },
    LinkReused(LinkId),
    LinkOwned(LinkId),
}

/// Checks a mapping against `state`; returns every violation found.
pub fn verify_mapping(mapping: &PlacementMapping, comm: &CommGraph, state: &ClusterState) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if mapping.xpu_of.len() != comm.node_count() {
        v.push(Violation::NodeCount { expected: comm.node_count(), got: mapping.xpu_of.len() });
    }
    if mapping.rings.len() != comm.rings.len() {
        v.push(Violation::RingCount { expected: comm.rings.len(), got: mapping.rings.len() });
    }
    if !v.is_empty() {
        return Err(v);
    }
    let mut index = Vec::with_capacity(mapping.xpu_of.len());
    let mut seen = HashSet::with_capacity(mapping.xpu_of.len());
    for &x in &mapping.xpu_of {
        match state.index_of(x) {
            Ok(i) => {
                if !seen.insert(i) {
                    v.push(Violation::NotInjective(x));
                }
                index.push(Some(i));
            }
            Err(_) => {
                v.push(Violation::UnknownXpu(x));
                index.push(None);
            }
        }
    }
    for (&x, i) in mapping.xpu_of.iter().zip(&index) {
        if let Some(i) = i {
            if !state.is_free_at(*i) {
                v.push(Violation::XpuBusy(x));
            }
        }
    }
    let mut open_per_ring = vec![0usize; comm.rings.len()];
    for (r, (ring, real)) in comm.rings.iter().zip(&mapping.rings).enumerate() {
        if real.hops.len() != ring.hop_count() {
            v.push(Violation::HopCount { ring: r });
            continue;
        }
        let n = ring.members.len();
        for (h, hop) in real.hops.iter().enumerate() {
            let (Some(a), Some(b)) = (index[ring.members[h]], index[ring.members[(h + 1) % n]]) else {
                continue;
            };
            match hop {
                Some(l) => {
                    let ok = state.link_info(*l).is_some_and(|info| {
                        let (f, t) = (state.index_of(info.from).ok(), state.index_of(info.to).ok());
                        (f == Some(a) && t == Some(b)) || (f == Some(b) && t == Some(a))
                    });
                    if !ok {
                        v.push(Violation::NotAdjacent { ring: r, hop: h });
                    }
                }
                None => {
                    open_per_ring[r] += 1;
                    if mapping.mode == RingMode::RingComplete && state.link_between(a, b, |_| false).is_none() {
                        v.push(Violation::NotAdjacent { ring: r, hop: h });
                    }
                }
            }
        }
    }
    for (r, ring) in comm.rings.iter().enumerate() {
        let open = open_per_ring[r];
        match mapping.mode {
            RingMode::RingComplete => {
                for (h, hop) in mapping.rings[r].hops.iter().enumerate() {
                    if hop.is_none() {
                        v.push(Violation::Open { ring: r, hop: h });
                    }
                }
            }
            RingMode::LineComplete => {
                if open > 1 || (open == 1 && ring.len() <= 2) {
                    v.push(Violation::TooManyOpen { ring: r });
                }
            }
        }
    }
    let mut used = HashSet::new();
    for l in mapping.links() {
        if !used.insert(l) {
            v.push(Violation::LinkReused(l));
        }
    }
    for l in used.iter().copied().collect::<std::collections::BTreeSet<_>>() {
        if state.link_owner(l).is_some() {
            v.push(Violation::LinkOwned(l));
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
