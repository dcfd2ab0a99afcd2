//! Physical fabric model: cubes of XPUs with hardwired intra-cube links and
//! OCS-programmable face circuits, or a single statically wired torus.
//!
//! Every link in the fabric joins the `d+` port of one XPU to the `d-` port
//! of another, so a link is named by the XPU that owns its `d+` end
//! together with the dimension `d`. This holds for intra-cube links, OCS
//! circuits and the hardwired wrap links of a static torus alike.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dim {
    X,
    Y,
    Z,
}

impl Dim {
    pub const ALL: [Dim; 3] = [Dim::X, Dim::Y, Dim::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Dim {
        Dim::ALL[i]
    }

    /// The two cross-section dimensions, in increasing order.
    pub fn cross(self) -> (usize, usize) {
        match self {
            Dim::X => (1, 2),
            Dim::Y => (0, 2),
            Dim::Z => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

/// Job identifier inside the engine. Traces map their string ids onto these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JobId(pub u32);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "J{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub cube_count: usize,
    pub cube_size: usize,
    /// `Some` selects a single hardwired torus with these extents and no OCS.
    pub static_extents: Option<[usize; 3]>,
    /// Permit `cube_size == 1` in reconfigurable mode.
    #[serde(default)]
    pub allow_unit_cube: bool,
}

impl ClusterSpec {
    pub fn reconfigurable(cube_count: usize, cube_size: usize) -> Self {
        Self { cube_count, cube_size, static_extents: None, allow_unit_cube: false }
    }

    pub fn static_torus(extents: [usize; 3]) -> Self {
        Self { cube_count: 1, cube_size: 0, static_extents: Some(extents), allow_unit_cube: false }
    }

    pub fn is_static(&self) -> bool {
        self.static_extents.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        match self.static_extents {
            Some(ext) => {
                if ext.contains(&0) {
                    return Err(Error::Config(format!("static extents must be positive, got {ext:?}")));
                }
            }
            None => {
                if self.cube_count == 0 {
                    return Err(Error::Config("cube_count must be positive".into()));
                }
                if self.cube_size == 0 {
                    return Err(Error::Config("cube_size must be positive".into()));
                }
                if self.cube_size < 2 && !self.allow_unit_cube {
                    return Err(Error::Config(
                        "cube_size must be at least 2 (set allow_unit_cube to override)".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Extents of one cube (the whole torus in static mode).
    pub fn cube_extents(&self) -> [usize; 3] {
        self.static_extents.unwrap_or([self.cube_size; 3])
    }

    pub fn cube_volume(&self) -> usize {
        self.cube_extents().iter().product()
    }

    pub fn cubes(&self) -> usize {
        if self.is_static() {
            1
        } else {
            self.cube_count
        }
    }

    pub fn total_xpus(&self) -> usize {
        self.cubes() * self.cube_volume()
    }

    pub fn ocs_count(&self) -> usize {
        if self.is_static() {
            0
        } else {
            3 * self.cube_size * self.cube_size
        }
    }

    /// Short label used in reports, e.g. `64x4^3` or `static-16x16x16`.
    pub fn label(&self) -> String {
        match self.static_extents {
            Some([x, y, z]) => format!("static-{x}x{y}x{z}"),
            None => format!("{}x{}^3", self.cube_count, self.cube_size),
        }
    }

    pub fn index_of(&self, xpu: XpuId) -> Option<usize> {
        let ext = self.cube_extents();
        if xpu.cube >= self.cubes() || (0..3).any(|d| xpu.coord[d] >= ext[d]) {
            return None;
        }
        Some(xpu.cube * self.cube_volume() + xpu.coord[0] + ext[0] * (xpu.coord[1] + ext[1] * xpu.coord[2]))
    }

    pub fn xpu_at(&self, index: usize) -> XpuId {
        let ext = self.cube_extents();
        let vol = self.cube_volume();
        let cube = index / vol;
        let rem = index % vol;
        XpuId { cube, coord: [rem % ext[0], (rem / ext[0]) % ext[1], rem / (ext[0] * ext[1])] }
    }
}

impl fmt::Display for ClusterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct XpuId {
    pub cube: usize,
    pub coord: [usize; 3],
}

impl XpuId {
    pub fn new(cube: usize, coord: [usize; 3]) -> Self {
        Self { cube, coord }
    }
}

impl fmt::Display for XpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [x, y, z] = self.coord;
        write!(f, "c{}({x},{y},{z})", self.cube)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PortId {
    pub xpu: XpuId,
    pub dim: Dim,
    pub sign: Sign,
}

impl PortId {
    pub fn new(xpu: XpuId, dim: Dim, sign: Sign) -> Self {
        Self { xpu, dim, sign }
    }

    pub fn is_face(&self, spec: &ClusterSpec) -> bool {
        let ext = spec.cube_extents()[self.dim.index()];
        match self.sign {
            Sign::Minus => self.xpu.coord[self.dim.index()] == 0,
            Sign::Plus => self.xpu.coord[self.dim.index()] + 1 == ext,
        }
    }

    /// Cross-section position `(i, j)` of this port within its face.
    pub fn face_pos(&self) -> (usize, usize) {
        let (a, b) = self.dim.cross();
        (self.xpu.coord[a], self.xpu.coord[b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OcsId {
    pub dim: Dim,
    pub face_pos: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Circuit {
    pub ocs: OcsId,
    pub out_port: PortId,
    pub in_port: PortId,
}

/// A link, named by the XPU holding its `dim+` end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId(u32);

impl LinkId {
    pub(crate) fn new(origin: usize, dim: usize) -> Self {
        LinkId((origin * 3 + dim) as u32)
    }

    pub(crate) fn slot(self) -> usize {
        self.0 as usize
    }

    pub(crate) fn origin(self) -> usize {
        self.0 as usize / 3
    }

    pub fn dim(self) -> Dim {
        Dim::from_index(self.0 as usize % 3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkKind {
    Intra,
    Circuit,
    /// Hardwired wrap-around link of a static torus.
    Wrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkInfo {
    pub id: LinkId,
    pub kind: LinkKind,
    pub from: XpuId,
    pub to: XpuId,
    pub circuit: Option<Circuit>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Allocation {
    xpus: Vec<usize>,
    links: Vec<LinkId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterState {
    spec: ClusterSpec,
    ext: [usize; 3],
    vol: usize,
    /// `plus_peer[(d * G + cube) * N^2 + cross]`: cube whose `d-` port receives this `d+` port.
    plus_peer: Vec<u32>,
    minus_peer: Vec<u32>,
    xpu_owner: Vec<Option<JobId>>,
    link_owner: Vec<Option<JobId>>,
    cube_busy: Vec<u32>,
    busy: usize,
    allocations: BTreeMap<JobId, Allocation>,
}

/// Builds a pristine fabric: all XPUs free, every face port self-wrapped.
pub fn build_cluster(spec: &ClusterSpec) -> Result<ClusterState> {
    ClusterState::new(spec.clone())
}

impl ClusterState {
    pub fn new(spec: ClusterSpec) -> Result<Self> {
        spec.validate()?;
        let ext = spec.cube_extents();
        let vol = spec.cube_volume();
        let total = spec.total_xpus();
        let (plus_peer, minus_peer) = if spec.is_static() {
            (Vec::new(), Vec::new())
        } else {
            let n2 = spec.cube_size * spec.cube_size;
            let mut table = vec![NONE; 3 * spec.cube_count * n2];
            for d in 0..3 {
                for cube in 0..spec.cube_count {
                    for cross in 0..n2 {
                        table[(d * spec.cube_count + cube) * n2 + cross] = cube as u32;
                    }
                }
            }
            (table.clone(), table)
        };
        Ok(Self {
            cube_busy: vec![0; spec.cubes()],
            spec,
            ext,
            vol,
            plus_peer,
            minus_peer,
            xpu_owner: vec![None; total],
            link_owner: vec![None; total * 3],
            busy: 0,
            allocations: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn total_xpus(&self) -> usize {
        self.xpu_owner.len()
    }

    pub fn busy_xpus(&self) -> usize {
        self.busy
    }

    pub fn free_xpus(&self) -> usize {
        self.total_xpus() - self.busy
    }

    pub fn utilization(&self) -> f64 {
        self.busy as f64 / self.total_xpus() as f64
    }

    pub fn cube_busy(&self, cube: usize) -> usize {
        self.cube_busy[cube] as usize
    }

    pub fn index_of(&self, xpu: XpuId) -> Result<usize> {
        self.spec.index_of(xpu).ok_or_else(|| Error::Lookup(format!("no such XPU {xpu}")))
    }

    pub fn xpu_at(&self, index: usize) -> XpuId {
        self.spec.xpu_at(index)
    }

    pub fn owner(&self, xpu: XpuId) -> Result<Option<JobId>> {
        Ok(self.xpu_owner[self.index_of(xpu)?])
    }

    pub(crate) fn is_free_at(&self, index: usize) -> bool {
        self.xpu_owner[index].is_none()
    }

    pub fn link_owner(&self, link: LinkId) -> Option<JobId> {
        self.link_owner.get(link.slot()).copied().flatten()
    }

    pub fn jobs(&self) -> impl Iterator<Item = JobId> + '_ {
        self.allocations.keys().copied()
    }

    pub fn job_xpus(&self, job: JobId) -> Option<Vec<XpuId>> {
        self.allocations.get(&job).map(|a| a.xpus.iter().map(|&i| self.xpu_at(i)).collect())
    }

    #[inline]
    fn cross_index(&self, coord: [usize; 3], d: usize) -> usize {
        let (a, b) = Dim::from_index(d).cross();
        coord[a] + self.spec.cube_size * coord[b]
    }

    #[inline]
    fn ocs_slot(&self, d: usize, cube: usize, cross: usize) -> usize {
        (d * self.spec.cube_count + cube) * self.spec.cube_size * self.spec.cube_size + cross
    }

    #[inline]
    pub(crate) fn coord_of(&self, index: usize) -> (usize, [usize; 3]) {
        let cube = index / self.vol;
        let rem = index % self.vol;
        (cube, [rem % self.ext[0], (rem / self.ext[0]) % self.ext[1], rem / (self.ext[0] * self.ext[1])])
    }

    #[inline]
    fn stride(&self, d: usize) -> usize {
        match d {
            0 => 1,
            1 => self.ext[0],
            _ => self.ext[0] * self.ext[1],
        }
    }

    /// Far end of the link on the `d+` port of `index`, if one exists.
    pub(crate) fn plus_neighbor(&self, index: usize, d: usize) -> Option<usize> {
        let (cube, coord) = self.coord_of(index);
        let target = if coord[d] + 1 < self.ext[d] {
            index + self.stride(d)
        } else if self.spec.is_static() {
            index - coord[d] * self.stride(d)
        } else {
            let peer = self.plus_peer[self.ocs_slot(d, cube, self.cross_index(coord, d))];
            if peer == NONE {
                return None;
            }
            let local = index - cube * self.vol - coord[d] * self.stride(d);
            peer as usize * self.vol + local
        };
        (target != index).then_some(target)
    }

    /// Origin of the link arriving on the `d-` port of `index`, if one exists.
    pub(crate) fn minus_neighbor(&self, index: usize, d: usize) -> Option<usize> {
        let (cube, coord) = self.coord_of(index);
        let origin = if coord[d] > 0 {
            index - self.stride(d)
        } else if self.spec.is_static() {
            index + (self.ext[d] - 1) * self.stride(d)
        } else {
            let peer = self.minus_peer[self.ocs_slot(d, cube, self.cross_index(coord, d))];
            if peer == NONE {
                return None;
            }
            let local = index - cube * self.vol + (self.ext[d] - 1) * self.stride(d);
            peer as usize * self.vol + local
        };
        (origin != index).then_some(origin)
    }

    /// Calls `f(link, neighbor)` for each link incident on `index`.
    #[inline]
    pub(crate) fn for_each_neighbor(&self, index: usize, mut f: impl FnMut(LinkId, usize)) {
        for d in 0..3 {
            if let Some(t) = self.plus_neighbor(index, d) {
                f(LinkId::new(index, d), t);
            }
            if let Some(o) = self.minus_neighbor(index, d) {
                f(LinkId::new(o, d), o);
            }
        }
    }

    /// All links incident on `xpu` with the XPU on the other end.
    pub fn neighbors(&self, xpu: XpuId) -> Result<Vec<(LinkId, XpuId)>> {
        let index = self.index_of(xpu)?;
        let mut out = Vec::with_capacity(6);
        self.for_each_neighbor(index, |l, n| out.push((l, self.xpu_at(n))));
        Ok(out)
    }

    /// Cube extents (the whole torus in static mode).
    pub(crate) fn extents(&self) -> [usize; 3] {
        self.ext
    }

    pub(crate) fn index_at(&self, cube: usize, coord: [usize; 3]) -> usize {
        cube * self.vol + coord[0] + self.ext[0] * (coord[1] + self.ext[1] * coord[2])
    }

    pub(crate) fn circuit_snapshot(&self) -> (Vec<u32>, Vec<u32>) {
        (self.plus_peer.clone(), self.minus_peer.clone())
    }

    pub(crate) fn restore_circuits(&mut self, snap: (Vec<u32>, Vec<u32>)) {
        self.plus_peer = snap.0;
        self.minus_peer = snap.1;
    }

    /// First link joining `a` and `b` not rejected by `skip`, preferring
    /// hardwired links over circuits.
    pub(crate) fn preferred_link_between(&self, a: usize, b: usize, mut skip: impl FnMut(LinkId) -> bool) -> Option<LinkId> {
        let mut circuit = None;
        let mut wired = None;
        self.for_each_neighbor(a, |l, n| {
            if n == b && wired.is_none() && !skip(l) {
                if self.is_circuit_link(l) {
                    circuit.get_or_insert(l);
                } else {
                    wired = Some(l);
                }
            }
        });
        wired.or(circuit)
    }

    /// First link joining `a` and `b` not rejected by `skip`.
    pub(crate) fn link_between(&self, a: usize, b: usize, mut skip: impl FnMut(LinkId) -> bool) -> Option<LinkId> {
        let mut found = None;
        self.for_each_neighbor(a, |l, n| {
            if found.is_none() && n == b && !skip(l) {
                found = Some(l);
            }
        });
        found
    }

    pub fn link_info(&self, link: LinkId) -> Option<LinkInfo> {
        let origin = link.origin();
        if origin >= self.total_xpus() {
            return None;
        }
        let d = link.dim().index();
        let to = self.plus_neighbor(origin, d)?;
        let (cube, coord) = self.coord_of(origin);
        let from_id = self.xpu_at(origin);
        let to_id = self.xpu_at(to);
        let kind = if coord[d] + 1 < self.ext[d] {
            LinkKind::Intra
        } else if self.spec.is_static() {
            LinkKind::Wrap
        } else {
            LinkKind::Circuit
        };
        let circuit = (kind == LinkKind::Circuit).then(|| {
            let _ = cube;
            let out_port = PortId::new(from_id, link.dim(), Sign::Plus);
            Circuit {
                ocs: OcsId { dim: link.dim(), face_pos: out_port.face_pos() },
                out_port,
                in_port: PortId::new(to_id, link.dim(), Sign::Minus),
            }
        });
        Some(LinkInfo { id: link, kind, from: from_id, to: to_id, circuit })
    }

    pub(crate) fn is_circuit_link(&self, link: LinkId) -> bool {
        if self.spec.is_static() {
            return false;
        }
        let (_, coord) = self.coord_of(link.origin());
        let d = link.dim().index();
        coord[d] + 1 == self.ext[d]
    }

    /// The current circuit table, in port order.
    pub fn circuits(&self) -> Vec<Circuit> {
        let mut out = Vec::new();
        if self.spec.is_static() {
            return out;
        }
        let n = self.spec.cube_size;
        for d in 0..3 {
            let (a, b) = Dim::from_index(d).cross();
            for cube in 0..self.spec.cube_count {
                for j in 0..n {
                    for i in 0..n {
                        let mut coord = [0; 3];
                        coord[a] = i;
                        coord[b] = j;
                        coord[d] = n - 1;
                        let peer = self.plus_peer[self.ocs_slot(d, cube, i + n * j)];
                        if peer == NONE {
                            continue;
                        }
                        let mut in_coord = coord;
                        in_coord[d] = 0;
                        let dim = Dim::from_index(d);
                        out.push(Circuit {
                            ocs: OcsId { dim, face_pos: (i, j) },
                            out_port: PortId::new(XpuId::new(cube, coord), dim, Sign::Plus),
                            in_port: PortId::new(XpuId::new(peer as usize, in_coord), dim, Sign::Minus),
                        });
                    }
                }
            }
        }
        out
    }

    /// Whether the `d+` port of cube `from` at `cross` currently feeds cube `to`.
    pub(crate) fn has_circuit(&self, d: usize, from: usize, to: usize, cross: usize) -> bool {
        self.plus_peer[self.ocs_slot(d, from, cross)] == to as u32
    }

    /// Programs a circuit between a `dim+` face port and a `dim-` face port
    /// served by the same OCS. Unowned circuits previously using either
    /// port are torn down.
    pub fn set_circuit(&mut self, out_port: PortId, in_port: PortId) -> Result<Circuit> {
        if self.spec.is_static() {
            return Err(Error::Unsupported("static torus has no OCS".into()));
        }
        self.index_of(out_port.xpu)?;
        self.index_of(in_port.xpu)?;
        if out_port.sign != Sign::Plus || in_port.sign != Sign::Minus {
            return Err(Error::Alignment("circuits join a dim+ port to a dim- port".into()));
        }
        if out_port.dim != in_port.dim {
            return Err(Error::Alignment(format!(
                "ports belong to different OCS groups ({:?} vs {:?})",
                out_port.dim, in_port.dim
            )));
        }
        if !out_port.is_face(&self.spec) || !in_port.is_face(&self.spec) {
            return Err(Error::Alignment("both ports must be cube face ports".into()));
        }
        if out_port.face_pos() != in_port.face_pos() {
            return Err(Error::Alignment(format!(
                "misaligned face positions {:?} and {:?}",
                out_port.face_pos(),
                in_port.face_pos()
            )));
        }
        let d = out_port.dim.index();
        let cross = self.cross_index(out_port.xpu.coord, d);
        self.set_circuit_raw(d, out_port.xpu.cube, in_port.xpu.cube, cross)?;
        Ok(Circuit { ocs: OcsId { dim: out_port.dim, face_pos: out_port.face_pos() }, out_port, in_port })
    }

    fn face_xpu(&self, cube: usize, d: usize, cross: usize, plus: bool) -> usize {
        let n = self.spec.cube_size;
        let (a, b) = Dim::from_index(d).cross();
        let mut coord = [0; 3];
        coord[a] = cross % n;
        coord[b] = cross / n;
        coord[d] = if plus { n - 1 } else { 0 };
        cube * self.vol + coord[0] + n * (coord[1] + n * coord[2])
    }

    /// Cube-level circuit install: `from`'s `d+` port at `cross` to `to`'s `d-` port.
    pub(crate) fn set_circuit_raw(&mut self, d: usize, from: usize, to: usize, cross: usize) -> Result<()> {
        let out_slot = self.ocs_slot(d, from, cross);
        let in_slot = self.ocs_slot(d, to, cross);
        if self.plus_peer[out_slot] == to as u32 {
            return Ok(());
        }
        let out_xpu = self.face_xpu(from, d, cross, true);
        if self.plus_peer[out_slot] != NONE && self.link_owner[LinkId::new(out_xpu, d).slot()].is_some() {
            return Err(Error::Busy(format!("{} {:?}+ carries an owned link", self.xpu_at(out_xpu), Dim::from_index(d))));
        }
        let prev_src = self.minus_peer[in_slot];
        if prev_src != NONE {
            let src_xpu = self.face_xpu(prev_src as usize, d, cross, true);
            if self.link_owner[LinkId::new(src_xpu, d).slot()].is_some() {
                let in_xpu = self.face_xpu(to, d, cross, false);
                return Err(Error::Busy(format!("{} {:?}- carries an owned link", self.xpu_at(in_xpu), Dim::from_index(d))));
            }
        }
        let prev_dst = self.plus_peer[out_slot];
        if prev_dst != NONE {
            let s = self.ocs_slot(d, prev_dst as usize, cross);
            self.minus_peer[s] = NONE;
        }
        if prev_src != NONE {
            let s = self.ocs_slot(d, prev_src as usize, cross);
            self.plus_peer[s] = NONE;
        }
        self.plus_peer[out_slot] = to as u32;
        self.minus_peer[in_slot] = from as u32;
        Ok(())
    }

    /// Grants `job` exclusive ownership of `xpus` and `links`, all or nothing.
    pub fn allocate(&mut self, job: JobId, xpus: &[XpuId], links: &[LinkId]) -> Result<()> {
        let indices = xpus.iter().map(|&x| self.index_of(x)).collect::<Result<Vec<_>>>()?;
        self.allocate_indices(job, indices, links)
    }

    pub(crate) fn allocate_indices(&mut self, job: JobId, mut xpus: Vec<usize>, links: &[LinkId]) -> Result<()> {
        if self.allocations.contains_key(&job) {
            return Err(Error::Exclusivity(format!("{job} already holds an allocation")));
        }
        xpus.sort_unstable();
        if xpus.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Exclusivity("duplicate XPU in allocation".into()));
        }
        if let Some(&i) = xpus.iter().find(|&&i| self.xpu_owner[i].is_some()) {
            return Err(Error::Exclusivity(format!("{} is owned by {}", self.xpu_at(i), self.xpu_owner[i].unwrap())));
        }
        let mut sorted_links = links.to_vec();
        sorted_links.sort_unstable();
        if sorted_links.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Exclusivity("duplicate link in allocation".into()));
        }
        for &l in &sorted_links {
            if l.origin() >= self.total_xpus() {
                return Err(Error::Lookup(format!("no such link {l:?}")));
            }
            if let Some(o) = self.link_owner[l.slot()] {
                return Err(Error::Exclusivity(format!("link {l:?} is owned by {o}")));
            }
            let Some(to) = self.plus_neighbor(l.origin(), l.dim().index()) else {
                return Err(Error::Lookup(format!("link {l:?} is not present")));
            };
            if xpus.binary_search(&l.origin()).is_err() || xpus.binary_search(&to).is_err() {
                return Err(Error::Exclusivity(format!("link {l:?} leaves the allocated XPU set")));
            }
        }
        for &i in &xpus {
            self.xpu_owner[i] = Some(job);
            self.cube_busy[i / self.vol] += 1;
        }
        for &l in &sorted_links {
            self.link_owner[l.slot()] = Some(job);
        }
        self.busy += xpus.len();
        self.allocations.insert(job, Allocation { xpus, links: sorted_links });
        Ok(())
    }

    /// Frees everything `job` holds. Circuits stay programmed.
    pub fn release(&mut self, job: JobId) -> Result<()> {
        let alloc = self
            .allocations
            .remove(&job)
            .ok_or_else(|| Error::Lookup(format!("{job} holds no allocation")))?;
        for &i in &alloc.xpus {
            self.xpu_owner[i] = None;
            self.cube_busy[i / self.vol] -= 1;
        }
        for &l in &alloc.links {
            self.link_owner[l.slot()] = None;
        }
        self.busy -= alloc.xpus.len();
        Ok(())
    }

    /// Full consistency scan: circuit matching, owned-link endpoints,
    /// conservation and per-job disjointness.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if !self.spec.is_static() {
            for (slot, &peer) in self.plus_peer.iter().enumerate() {
                if peer == NONE {
                    continue;
                }
                let n2 = self.spec.cube_size * self.spec.cube_size;
                let cross = slot % n2;
                let d = slot / n2 / self.spec.cube_count;
                let cube = slot / n2 % self.spec.cube_count;
                if self.minus_peer[self.ocs_slot(d, peer as usize, cross)] != cube as u32 {
                    return Err(format!("circuit table is not a matching at slot {slot}"));
                }
            }
            for (slot, &peer) in self.minus_peer.iter().enumerate() {
                if peer == NONE {
                    continue;
                }
                let n2 = self.spec.cube_size * self.spec.cube_size;
                let cross = slot % n2;
                let d = slot / n2 / self.spec.cube_count;
                let cube = slot / n2 % self.spec.cube_count;
                if self.plus_peer[self.ocs_slot(d, peer as usize, cross)] != cube as u32 {
                    return Err(format!("circuit table is not a matching at minus slot {slot}"));
                }
            }
        }
        let busy = self.xpu_owner.iter().filter(|o| o.is_some()).count();
        if busy != self.busy || busy + (self.total_xpus() - self.busy) != self.total_xpus() {
            return Err(format!("conservation broken: counted {busy}, tracked {}", self.busy));
        }
        let mut per_cube = vec![0u32; self.spec.cubes()];
        for (i, o) in self.xpu_owner.iter().enumerate() {
            if o.is_some() {
                per_cube[i / self.vol] += 1;
            }
        }
        if per_cube != self.cube_busy {
            return Err("per-cube busy counters drifted".into());
        }
        let mut held = 0;
        for (job, alloc) in &self.allocations {
            held += alloc.xpus.len();
            if alloc.xpus.iter().any(|&i| self.xpu_owner[i] != Some(*job)) {
                return Err(format!("{job} allocation disagrees with XPU owners"));
            }
            for &l in &alloc.links {
                if self.link_owner[l.slot()] != Some(*job) {
                    return Err(format!("{job} link ownership mismatch"));
                }
                let Some(to) = self.plus_neighbor(l.origin(), l.dim().index()) else {
                    return Err(format!("{job} owns a link that no longer exists"));
                };
                if self.xpu_owner[l.origin()] != Some(*job) || self.xpu_owner[to] != Some(*job) {
                    return Err(format!("{job} owns a link with a foreign endpoint"));
                }
            }
        }
        if held != self.busy {
            return Err("XPUs owned outside any allocation".into());
        }
        let owned_links = self.link_owner.iter().filter(|o| o.is_some()).count();
        let listed: usize = self.allocations.values().map(|a| a.links.len()).sum();
        if owned_links != listed {
            return Err("links owned outside any allocation".into());
        }
        Ok(())
    }
}
