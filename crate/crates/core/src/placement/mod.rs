//! Placement policies: First-Fit and Folding on static tori, Reconfig and
//! RFold on OCS-reconfigurable cube clusters.
//!
//! Policies plan against a read-only view of the cluster. Only [`commit`]
//! mutates state, and it either applies a plan fully or not at all.

mod reconfig;
mod static_fit;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapes::{
    comm_graph, enumerate_folds, find_cycle, find_path, verify_mapping, AvailGraph, CommGraph, FoldContext, FoldKind,
    FoldVariant, PlacementMapping, RingMode, DEFAULT_CYCLE_BUDGET,
};
use crate::topology::{ClusterSpec, ClusterState, Dim, JobId, LinkId, PortId, Sign, XpuId};
use crate::workload::Shape;

use reconfig::{Candidate, CubeView, Layout};
use static_fit::FreeGrid;

/// Expansion budget for each per-cube cycle search in RFold.
const PER_CUBE_CYCLE_BUDGET: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "firstfit")]
    FirstFit,
    #[serde(rename = "folding")]
    Folding,
    #[serde(rename = "reconfig")]
    Reconfig,
    #[serde(rename = "rfold")]
    RFold,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::FirstFit, PolicyKind::Folding, PolicyKind::Reconfig, PolicyKind::RFold];

    pub fn requires_static(self) -> bool {
        matches!(self, PolicyKind::FirstFit | PolicyKind::Folding)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::FirstFit => "firstfit",
            PolicyKind::Folding => "folding",
            PolicyKind::Reconfig => "reconfig",
            PolicyKind::RFold => "rfold",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            PolicyKind::FirstFit => "FirstFit",
            PolicyKind::Folding => "Folding",
            PolicyKind::Reconfig => "Reconfig",
            PolicyKind::RFold => "RFold",
        }
    }

    /// Errors unless the policy runs on this kind of cluster.
    pub fn check_compatible(self, spec: &ClusterSpec) -> Result<()> {
        if self.requires_static() != spec.is_static() {
            let want = if self.requires_static() { "a static torus" } else { "a reconfigurable cluster" };
            return Err(Error::Config(format!("policy {} requires {want}, got {}", self.display_name(), spec.label())));
        }
        Ok(())
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "firstfit" => Ok(PolicyKind::FirstFit),
            "folding" => Ok(PolicyKind::Folding),
            "reconfig" => Ok(PolicyKind::Reconfig),
            "rfold" => Ok(PolicyKind::RFold),
            _ => Err(Error::Config(format!("unknown policy {s:?} (expected firstfit, folding, reconfig or rfold)"))),
        }
    }
}

/// Ranking key of a plan; smaller is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlanCost {
    pub mode: RingMode,
    pub cubes_used: usize,
    pub ocs_circuits_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanOrigin {
    /// A block holding a fold variant's target.
    Block(FoldKind),
    /// A free cycle found by search (single-ring shapes only).
    CycleSearch,
    /// A free path found by search (single-ring shapes only).
    PathSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct RawCircuit {
    dim: usize,
    from: usize,
    to: usize,
    cross: usize,
}

/// A candidate allocation, computed without mutating the cluster.
#[derive(Debug, Clone)]
pub struct PlacementPlan {
    pub shape: Shape,
    /// Block the job occupies (equals `shape` for searched cycles and paths).
    pub target: Shape,
    pub origin: PlanOrigin,
    pub mode: RingMode,
    pub mapping: PlacementMapping,
    /// Circuits to program before allocating, as (`d+` port, `d-` port).
    pub circuits_to_set: Vec<(PortId, PortId)>,
    pub cost: PlanCost,
    /// Smallest (cube, coordinate) of the plan's XPUs.
    pub anchor: (usize, [usize; 3]),
    xpus: Vec<usize>,
    raw: Vec<RawCircuit>,
    comm: Arc<CommGraph>,
}

impl PlacementPlan {
    pub fn rank_key(&self) -> (PlanCost, (usize, [usize; 3])) {
        (self.cost, self.anchor)
    }

    pub fn xpus(&self) -> &[XpuId] {
        &self.mapping.xpu_of
    }

    pub fn links(&self) -> Vec<LinkId> {
        self.mapping.links().collect()
    }

    pub fn comm(&self) -> &CommGraph {
        &self.comm
    }
}

/// The plan with the smallest `(mode, cubes, circuits, anchor)` key;
/// the earliest wins exact ties.
///
/// # Panics
/// On an empty list.
pub fn rank(plans: Vec<PlacementPlan>) -> PlacementPlan {
    try_rank(plans).expect("rank requires at least one plan")
}

pub fn try_rank(plans: Vec<PlacementPlan>) -> Option<PlacementPlan> {
    let mut best: Option<PlacementPlan> = None;
    for p in plans {
        if best.as_ref().is_none_or(|b| p.rank_key() < b.rank_key()) {
            best = Some(p);
        }
    }
    best
}

/// Programs the plan's circuits and allocates its XPUs and links to `job`.
/// Re-verifies against the current state first; on any failure returns
/// [`Error::StalePlan`] and leaves `state` untouched.
pub fn commit(state: &mut ClusterState, job: JobId, plan: &PlacementPlan) -> Result<()> {
    if plan.xpus.iter().any(|&i| i >= state.total_xpus() || !state.is_free_at(i)) {
        return Err(Error::StalePlan("an XPU of the plan is no longer free".into()));
    }
    let snapshot = (!plan.raw.is_empty()).then(|| state.circuit_snapshot());
    let fail = |state: &mut ClusterState, msg: String| {
        if let Some(s) = snapshot.clone() {
            state.restore_circuits(s);
        }
        Err(Error::StalePlan(msg))
    };
    for c in &plan.raw {
        if let Err(e) = state.set_circuit_raw(c.dim, c.from, c.to, c.cross) {
            return fail(state, format!("circuit no longer settable: {e}"));
        }
    }
    if let Err(v) = verify_mapping(&plan.mapping, &plan.comm, state) {
        return fail(state, format!("mapping no longer valid: {v:?}"));
    }
    let links: Vec<LinkId> = plan.mapping.links().collect();
    if let Err(e) = state.allocate_indices(job, plan.xpus.clone(), &links) {
        return fail(state, e.to_string());
    }
    Ok(())
}

/// Memoized empty-cluster feasibility, shareable across simulations.
#[derive(Debug, Default)]
pub struct FeasibilityCache {
    map: Mutex<HashMap<(PolicyKind, ClusterSpec, Shape), bool>>,
}

impl FeasibilityCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, policy: PolicyKind, spec: &ClusterSpec, shape: Shape) -> Option<bool> {
        self.map.lock().expect("feasibility cache poisoned").get(&(policy, spec.clone(), shape)).copied()
    }

    pub fn insert(&self, policy: PolicyKind, spec: &ClusterSpec, shape: Shape, ok: bool) {
        self.map.lock().expect("feasibility cache poisoned").insert((policy, spec.clone(), shape), ok);
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("feasibility cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A policy bound to one cluster spec, with per-shape caches.
pub struct Placer {
    policy: PolicyKind,
    spec: ClusterSpec,
    ctx: FoldContext,
    feasibility: Arc<FeasibilityCache>,
    pristine: Option<ClusterState>,
    comms: HashMap<Shape, Arc<CommGraph>>,
    candidates: HashMap<Shape, Arc<Vec<Candidate>>>,
    cycle_budget: u64,
}

impl Placer {
    pub fn new(policy: PolicyKind, spec: ClusterSpec) -> Result<Self> {
        Self::with_cache(policy, spec, Arc::new(FeasibilityCache::new()))
    }

    pub fn with_cache(policy: PolicyKind, spec: ClusterSpec, feasibility: Arc<FeasibilityCache>) -> Result<Self> {
        spec.validate()?;
        policy.check_compatible(&spec)?;
        let ctx = match spec.static_extents {
            Some(extents) => FoldContext::Static { extents },
            None => FoldContext::Reconfigurable { cube_size: spec.cube_size },
        };
        Ok(Self {
            policy,
            spec,
            ctx,
            feasibility,
            pristine: None,
            comms: HashMap::new(),
            candidates: HashMap::new(),
            cycle_budget: DEFAULT_CYCLE_BUDGET,
        })
    }

    pub fn policy(&self) -> PolicyKind {
        self.policy
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    /// Overrides the expansion budget of whole-cluster cycle and path searches.
    pub fn set_cycle_budget(&mut self, budget: u64) {
        self.cycle_budget = budget;
    }

    /// Whether the policy places `shape` on an empty cluster of this spec.
    pub fn feasible_on_empty(&mut self, shape: Shape) -> bool {
        if let Some(ok) = self.feasibility.get(self.policy, &self.spec, shape) {
            return ok;
        }
        let pristine = match self.pristine.take() {
            Some(s) => s,
            None => ClusterState::new(self.spec.clone()).expect("spec validated at construction"),
        };
        let ok = self.plan(&pristine, shape).is_some();
        self.pristine = Some(pristine);
        self.feasibility.insert(self.policy, &self.spec, shape, ok);
        ok
    }

    /// Plans `shape` against `state` without mutating it.
    pub fn plan(&mut self, state: &ClusterState, shape: Shape) -> Option<PlacementPlan> {
        debug_assert_eq!(state.spec(), &self.spec);
        if !shape.is_valid() || shape.size() > state.free_xpus() {
            return None;
        }
        match self.policy {
            PolicyKind::FirstFit => self.first_fit(state, shape),
            PolicyKind::Folding => self.folding(state, shape),
            PolicyKind::Reconfig => self.reconfig(state, shape, false),
            PolicyKind::RFold => self.reconfig(state, shape, true),
        }
    }

    fn comm(&mut self, shape: Shape) -> Arc<CommGraph> {
        self.comms.entry(shape).or_insert_with(|| Arc::new(comm_graph(shape))).clone()
    }

    fn candidates(&mut self, shape: Shape) -> Arc<Vec<Candidate>> {
        if let Some(c) = self.candidates.get(&shape) {
            return c.clone();
        }
        let comm = self.comm(shape);
        let list: Vec<Candidate> = enumerate_folds(shape, self.ctx).into_iter().map(|v| Candidate::new(v, &comm)).collect();
        let list = Arc::new(list);
        self.candidates.insert(shape, list.clone());
        list
    }

    fn static_mode(&self, v: &FoldVariant) -> RingMode {
        let l = self.spec.static_extents.expect("static policy");
        if (0..3).all(|d| !v.needs_wrap[d] || v.target.0[d] == l[d]) {
            RingMode::RingComplete
        } else {
            RingMode::LineComplete
        }
    }

    fn first_fit(&mut self, state: &ClusterState, shape: Shape) -> Option<PlacementPlan> {
        let cands = self.candidates(shape);
        let comm = self.comm(shape);
        let grid = FreeGrid::new(state);
        for c in cands.iter().filter(|c| c.variant.kind == FoldKind::Identity) {
            if let Some(anchor) = grid.scan(c.target()) {
                let mode = self.static_mode(&c.variant);
                return static_block_plan(state, &comm, &c.variant, anchor, mode);
            }
        }
        None
    }

    fn folding(&mut self, state: &ClusterState, shape: Shape) -> Option<PlacementPlan> {
        let cands = self.candidates(shape);
        let comm = self.comm(shape);
        let grid = FreeGrid::new(state);
        let mut scanned: HashMap<[usize; 3], Option<[usize; 3]>> = HashMap::new();
        let mut scan = |t: [usize; 3]| *scanned.entry(t).or_insert_with(|| grid.scan(t));
        for c in cands.iter() {
            let mode = self.static_mode(&c.variant);
            if mode == RingMode::RingComplete {
                if let Some(anchor) = scan(c.target()) {
                    return static_block_plan(state, &comm, &c.variant, anchor, mode);
                }
            }
        }
        let single_ring = shape.dims() == 1;
        if single_ring {
            let g = AvailGraph::free(state);
            if let Some(cycle) = find_cycle(&g, shape.size(), self.cycle_budget) {
                let xpus: Vec<usize> = cycle.iter().map(|&p| g.xpu_index(p)).collect();
                return search_plan(state, &comm, xpus, RingMode::RingComplete, PlanOrigin::CycleSearch);
            }
        }
        for c in cands.iter().filter(|c| c.variant.kind == FoldKind::Identity) {
            let mode = self.static_mode(&c.variant);
            if mode == RingMode::LineComplete {
                if let Some(anchor) = scan(c.target()) {
                    return static_block_plan(state, &comm, &c.variant, anchor, mode);
                }
            }
        }
        if single_ring {
            let g = AvailGraph::free(state);
            if let Some(path) = find_path(&g, shape.size(), self.cycle_budget) {
                let xpus: Vec<usize> = path.iter().map(|&p| g.xpu_index(p)).collect();
                return search_plan(state, &comm, xpus, RingMode::LineComplete, PlanOrigin::PathSearch);
            }
        }
        None
    }

    fn reconfig(&mut self, state: &ClusterState, shape: Shape, fold: bool) -> Option<PlacementPlan> {
        let cands = self.candidates(shape);
        let comm = self.comm(shape);
        let n = self.spec.cube_size;
        let view = CubeView::new(state);
        let mut keyed: Vec<(PlanCost, usize)> = cands
            .iter()
            .enumerate()
            .filter(|(_, c)| fold || c.variant.kind == FoldKind::Identity)
            .map(|(i, c)| {
                let cost = PlanCost { mode: c.mode(n), cubes_used: c.cubes(n), ocs_circuits_used: c.circuit_hops(n) };
                (cost, i)
            })
            .collect();
        keyed.sort();
        type Best = (PlanCost, (usize, [usize; 3]), usize, Layout);
        let mut best: Option<Best> = None;
        for &(cost, i) in &keyed {
            if best.as_ref().is_some_and(|b| cost > b.0) {
                break;
            }
            let c = &cands[i];
            if let Some(l) = reconfig::layout(&view, c.target()) {
                let anchor = l.anchor(c.target(), n);
                if best.as_ref().is_none_or(|b| (cost, anchor) < (b.0, b.1)) {
                    best = Some((cost, anchor, i, l));
                }
            }
        }
        let mut plans = Vec::new();
        if let Some((cost, _, i, l)) = &best {
            if let Some(p) = cube_block_plan(state, &comm, &cands[*i], l, n) {
                debug_assert_eq!(p.cost, *cost, "precomputed cost must match the realized mapping");
                plans.push(p);
            }
        }
        let ideal = PlanCost { mode: RingMode::RingComplete, cubes_used: 1, ocs_circuits_used: 0 };
        if fold && shape.dims() == 1 && plans.first().is_none_or(|p| p.cost > ideal) {
            if let Some(p) = self.cycle_in_one_cube(state, &comm, &view, shape.size()) {
                plans.push(p);
            } else if plans.is_empty() {
                let g = AvailGraph::free(state);
                if let Some(cycle) = find_cycle(&g, shape.size(), self.cycle_budget) {
                    let xpus: Vec<usize> = cycle.iter().map(|&p| g.xpu_index(p)).collect();
                    plans.extend(search_plan(state, &comm, xpus, RingMode::RingComplete, PlanOrigin::CycleSearch));
                }
            }
        }
        try_rank(plans)
    }

    fn cycle_in_one_cube(&self, state: &ClusterState, comm: &Arc<CommGraph>, view: &CubeView, len: usize) -> Option<PlacementPlan> {
        let vol = state.spec().cube_volume();
        for &cube in &view.order {
            if vol - state.cube_busy(cube) < len {
                continue;
            }
            let g = AvailGraph::from_state(state, |i| i / vol == cube && state.is_free_at(i));
            if let Some(cycle) = find_cycle(&g, len, PER_CUBE_CYCLE_BUDGET) {
                let xpus: Vec<usize> = cycle.iter().map(|&p| g.xpu_index(p)).collect();
                return search_plan(state, comm, xpus, RingMode::RingComplete, PlanOrigin::CycleSearch);
            }
        }
        None
    }
}

/// Builds a plan from XPU indices per node, after virtually programming
/// `raw`. Returns `None` (and trips a debug assertion) if the result fails
/// verification.
fn finish_plan(
    state: &ClusterState,
    comm: &Arc<CommGraph>,
    target: Shape,
    origin: PlanOrigin,
    xpus: Vec<usize>,
    raw: Vec<RawCircuit>,
    mode: RingMode,
) -> Option<PlacementPlan> {
    let virt;
    let view = if raw.is_empty() {
        state
    } else {
        let mut s = state.clone();
        for c in &raw {
            if s.set_circuit_raw(c.dim, c.from, c.to, c.cross).is_err() {
                debug_assert!(false, "planned circuit not settable");
                return None;
            }
        }
        virt = s;
        &virt
    };
    let mapping = PlacementMapping::realize(view, comm, &xpus, mode);
    if let Err(v) = verify_mapping(&mapping, comm, view) {
        debug_assert!(false, "planned mapping fails verification: {v:?}");
        return None;
    }
    let used: HashSet<LinkId> = mapping.links().collect();
    let n = state.spec().cube_size;
    let raw: Vec<RawCircuit> = raw
        .into_iter()
        .filter(|c| {
            let (a, b) = Dim::from_index(c.dim).cross();
            let mut coord = [0; 3];
            coord[a] = c.cross % n;
            coord[b] = c.cross / n;
            coord[c.dim] = n - 1;
            used.contains(&LinkId::new(view.index_at(c.from, coord), c.dim))
        })
        .collect();
    let circuits_to_set = raw
        .iter()
        .map(|c| {
            let (a, b) = Dim::from_index(c.dim).cross();
            let mut out = [0; 3];
            out[a] = c.cross % n;
            out[b] = c.cross / n;
            let mut inp = out;
            out[c.dim] = n - 1;
            inp[c.dim] = 0;
            let d = Dim::from_index(c.dim);
            (PortId::new(XpuId::new(c.from, out), d, Sign::Plus), PortId::new(XpuId::new(c.to, inp), d, Sign::Minus))
        })
        .collect();
    let mut cubes: Vec<usize> = mapping.xpu_of.iter().map(|x| x.cube).collect();
    cubes.sort_unstable();
    cubes.dedup();
    let circuits = used.iter().filter(|&&l| view.is_circuit_link(l)).count();
    let anchor = mapping.xpu_of.iter().map(|x| (x.cube, x.coord)).min().unwrap_or((0, [0; 3]));
    Some(PlacementPlan {
        shape: comm.shape,
        target,
        origin,
        mode,
        cost: PlanCost { mode, cubes_used: cubes.len(), ocs_circuits_used: circuits },
        anchor,
        mapping,
        circuits_to_set,
        xpus,
        raw,
        comm: comm.clone(),
    })
}

fn static_block_plan(state: &ClusterState, comm: &Arc<CommGraph>, v: &FoldVariant, anchor: [usize; 3], mode: RingMode) -> Option<PlacementPlan> {
    let l = state.extents();
    let xpus = v
        .node_map()
        .into_iter()
        .map(|t| state.index_at(0, [(anchor[0] + t[0]) % l[0], (anchor[1] + t[1]) % l[1], (anchor[2] + t[2]) % l[2]]))
        .collect();
    finish_plan(state, comm, v.target, PlanOrigin::Block(v.kind), xpus, Vec::new(), mode)
}

fn search_plan(state: &ClusterState, comm: &Arc<CommGraph>, xpus: Vec<usize>, mode: RingMode, origin: PlanOrigin) -> Option<PlacementPlan> {
    finish_plan(state, comm, comm.shape, origin, xpus, Vec::new(), mode)
}

fn cube_block_plan(state: &ClusterState, comm: &Arc<CommGraph>, c: &Candidate, l: &Layout, n: usize) -> Option<PlacementPlan> {
    let t = c.target();
    let k = l.k;
    let xpus = c
        .variant
        .node_map()
        .into_iter()
        .map(|tc| {
            let i = [tc[0] / n, tc[1] / n, tc[2] / n];
            let (lo, _) = reconfig::piece(t, n, k, l.offset, i);
            let local = [tc[0] % n + lo[0], tc[1] % n + lo[1], tc[2] % n + lo[2]];
            state.index_at(l.cell_cube[l.cell_index(i)], local)
        })
        .collect();
    let mut raw = Vec::new();
    for d in 0..3 {
        let closes = c.closes(d, n);
        let (a, b) = Dim::from_index(d).cross();
        for cell in 0..l.cell_cube.len() {
            let i = l.cell_coord(cell);
            let mut j = i;
            if i[d] + 1 < k[d] {
                j[d] += 1;
            } else if closes {
                j[d] = 0;
            } else {
                continue;
            }
            let boundary = if i[d] + 1 < k[d] { i[d] * n + n - 1 } else { t[d] - 1 };
            if c.crossings[d][boundary] == 0 {
                continue;
            }
            let (lo, len) = reconfig::piece(t, n, k, l.offset, i);
            let (from, to) = (l.cell_cube[cell], l.cell_cube[l.cell_index(j)]);
            for yb in lo[b]..lo[b] + len[b] {
                for ya in lo[a]..lo[a] + len[a] {
                    let cross = ya + n * yb;
                    if !state.has_circuit(d, from, to, cross) {
                        raw.push(RawCircuit { dim: d, from, to, cross });
                    }
                }
            }
        }
    }
    finish_plan(state, comm, c.variant.target, PlanOrigin::Block(c.variant.kind), xpus, raw, c.mode(n))
}

fn placer_for(policy: PolicyKind, state: &ClusterState) -> Option<Placer> {
    Placer::new(policy, state.spec().clone()).ok()
}

/// First free block of any rotation, identity mapping. Static tori only.
pub fn first_fit(state: &ClusterState, shape: Shape) -> Option<PlacementPlan> {
    placer_for(PolicyKind::FirstFit, state)?.plan(state, shape)
}

/// First success over ring-complete folds, cycle search, then open rings.
pub fn folding_place(state: &ClusterState, shape: Shape) -> Option<PlacementPlan> {
    placer_for(PolicyKind::Folding, state)?.plan(state, shape)
}

/// Cheapest rotation decomposed into cube pieces joined by circuits.
pub fn reconfig_place(state: &ClusterState, shape: Shape) -> Option<PlacementPlan> {
    placer_for(PolicyKind::Reconfig, state)?.plan(state, shape)
}

/// Cheapest plan over all fold variants and, for single rings, cycle search.
pub fn rfold_place(state: &ClusterState, shape: Shape) -> Option<PlacementPlan> {
    placer_for(PolicyKind::RFold, state)?.plan(state, shape)
}

/// Whether `policy` places `shape` on an empty `spec` cluster. Memoized
/// process-wide.
pub fn feasible_on_empty(policy: PolicyKind, shape: Shape, spec: &ClusterSpec) -> bool {
    static CACHE: std::sync::OnceLock<Arc<FeasibilityCache>> = std::sync::OnceLock::new();
    let cache = CACHE.get_or_init(|| Arc::new(FeasibilityCache::new())).clone();
    match Placer::with_cache(policy, spec.clone(), cache) {
        Ok(mut p) => p.feasible_on_empty(shape),
        Err(_) => false,
    }
}
