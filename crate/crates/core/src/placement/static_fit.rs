//! Contiguous block scans over a static torus.

use crate::topology::ClusterState;

/// Busy-count prefix sums over a box, answering block queries in O(1).
#[derive(Debug, Clone)]
pub(crate) struct BusyPrefix {
    dims: [usize; 3],
    ps: Vec<u32>,
}

impl BusyPrefix {
    /// Prefix sums over a `dims` box where `busy(c)` marks occupied cells.
    pub(crate) fn build(dims: [usize; 3], busy: impl Fn([usize; 3]) -> bool) -> Self {
        let p = [dims[0] + 1, dims[1] + 1, dims[2] + 1];
        let mut ps = vec![0u32; p[0] * p[1] * p[2]];
        let at = |x: usize, y: usize, z: usize| x + p[0] * (y + p[1] * z);
        for z in 1..p[2] {
            for y in 1..p[1] {
                let mut row = 0u32;
                for x in 1..p[0] {
                    row += busy([x - 1, y - 1, z - 1]) as u32;
                    ps[at(x, y, z)] = row + ps[at(x, y - 1, z)] + ps[at(x, y, z - 1)] - ps[at(x, y - 1, z - 1)];
                }
            }
        }
        Self { dims: p, ps }
    }

    /// Busy cells in `[lo, lo + len)`.
    #[inline]
    pub(crate) fn count(&self, lo: [usize; 3], len: [usize; 3]) -> u32 {
        let p = self.dims;
        let at = |x: usize, y: usize, z: usize| self.ps[x + p[0] * (y + p[1] * z)];
        let (x0, y0, z0) = (lo[0], lo[1], lo[2]);
        let (x1, y1, z1) = (lo[0] + len[0], lo[1] + len[1], lo[2] + len[2]);
        (at(x1, y1, z1) + at(x0, y0, z1) + at(x0, y1, z0) + at(x1, y0, z0))
            - (at(x0, y1, z1) + at(x1, y0, z1) + at(x1, y1, z0) + at(x0, y0, z0))
    }
}

/// Free-block finder for a static torus; blocks may wrap around edges.
pub(crate) struct FreeGrid {
    ext: [usize; 3],
    prefix: BusyPrefix,
}

impl FreeGrid {
    pub(crate) fn new(state: &ClusterState) -> Self {
        let ext = state.extents();
        let doubled = ext.map(|e| 2 * e);
        let prefix = BusyPrefix::build(doubled, |c| {
            !state.is_free_at(state.index_at(0, [c[0] % ext[0], c[1] % ext[1], c[2] % ext[2]]))
        });
        Self { ext, prefix }
    }

    /// First anchor, scanning x, then y, then z, whose block of `len` is
    /// entirely free. Dimensions spanning the torus only try anchor 0.
    pub(crate) fn scan(&self, len: [usize; 3]) -> Option<[usize; 3]> {
        if (0..3).any(|d| len[d] == 0 || len[d] > self.ext[d]) {
            return None;
        }
        let range = |d: usize| if len[d] == self.ext[d] { 1 } else { self.ext[d] };
        for x in 0..range(0) {
            for y in 0..range(1) {
                for z in 0..range(2) {
                    if self.prefix.count([x, y, z], len) == 0 {
                        return Some([x, y, z]);
                    }
                }
            }
        }
        None
    }
}
