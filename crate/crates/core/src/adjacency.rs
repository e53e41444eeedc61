//! D3Q19 adjacency lists built from rank-local views plus one-cell halos.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{Coord, Decomposition, RankBox, VoxelGrid};
use crate::indexer::LocalIndexMap;

pub const DIRECTIONS: usize = 18;

/// Non-rest D3Q19 velocities; `STENCIL[i ^ 1] == -STENCIL[i]`.
pub const STENCIL: [[i32; 3]; DIRECTIONS] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
    [1, 1, 0],
    [-1, -1, 0],
    [1, -1, 0],
    [-1, 1, 0],
    [1, 0, 1],
    [-1, 0, -1],
    [1, 0, -1],
    [-1, 0, 1],
    [0, 1, 1],
    [0, -1, -1],
    [0, 1, -1],
    [0, -1, 1],
];

#[inline]
pub const fn opposite(dir: usize) -> usize {
    dir ^ 1
}

/// One fluid cell of the sparse representation.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SparseRecord {
    pub coord: [u32; 3],
    pub ic: u64,
    /// Contiguous index of the fluid neighbor per stencil direction, 0 if
    /// the neighbor is solid or outside a closed boundary.
    pub nbr: [u64; DIRECTIONS],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HaloCell {
    pub fluid: bool,
    pub ic: u64,
}

/// A rank's box widened by one cell on every side. Positions outside a
/// closed domain boundary hold `None`; wrapped positions hold the data of
/// the cell they wrap to.
#[derive(Clone, Debug)]
pub struct HaloView {
    rank_box: RankBox,
    periodic: [bool; 3],
    ext: [usize; 3],
    cells: Vec<Option<HaloCell>>,
    sources: BTreeSet<usize>,
}

impl HaloView {
    pub fn rank_box(&self) -> &RankBox {
        &self.rank_box
    }

    pub fn periodic(&self) -> [bool; 3] {
        self.periodic
    }

    /// Other ranks that supplied halo cells.
    pub fn source_ranks(&self) -> &BTreeSet<usize> {
        &self.sources
    }

    /// Number of filled positions outside the own box.
    pub fn halo_len(&self) -> usize {
        let e = self.rank_box.extent();
        self.positions()
            .filter(|&(p, _)| !inside_box(p, e))
            .filter(|&(_, k)| self.cells[k].is_some())
            .count()
    }

    /// Cell at box-local offset `p`, with `-1 <= p[a] <= extent[a]`.
    #[inline]
    pub fn at(&self, p: [isize; 3]) -> Option<HaloCell> {
        self.cells[self.slot(p)]
    }

    #[inline]
    fn slot(&self, p: [isize; 3]) -> usize {
        let [x, y, z] = p.map(|v| (v + 1) as usize);
        x + self.ext[0] * (y + self.ext[1] * z)
    }

    fn positions(&self) -> impl Iterator<Item = ([isize; 3], usize)> + '_ {
        let [ex, ey, ez] = self.ext;
        (0..ez).flat_map(move |z| {
            (0..ey).flat_map(move |y| {
                (0..ex).map(move |x| {
                    (
                        [x as isize - 1, y as isize - 1, z as isize - 1],
                        x + ex * (y + ey * z),
                    )
                })
            })
        })
    }
}

fn inside_box(p: [isize; 3], extent: [usize; 3]) -> bool {
    (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < extent[a])
}

/// Global coordinate of a box-local offset, wrapped on periodic axes.
fn resolve(b: &RankBox, p: [isize; 3], dims: [usize; 3], periodic: [bool; 3]) -> Option<Coord> {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let g = b.lo[a] as isize + p[a];
        let n = dims[a] as isize;
        c[a] = if (0..n).contains(&g) {
            g as usize
        } else if periodic[a] {
            g.rem_euclid(n) as usize
        } else {
            return None;
        };
    }
    Some(c)
}

/// Halo request from one rank to the owner of some of its halo cells.
#[derive(Clone, Debug)]
struct HaloRequest {
    from: usize,
    to: usize,
    cells: Vec<Coord>,
}

/// Cells an owner returns for one request.
type HaloReply = Vec<(Coord, HaloCell)>;

/// Exchange one-cell halos between all ranks.
///
/// Each rank lists the halo positions it needs, groups them by owner and
/// sends one request per owner; owners reply with `(flag, contiguous index)`
/// read from their own box only.
pub fn halo_exchange(
    grid: &VoxelGrid,
    decomposition: &Decomposition,
    maps: &[LocalIndexMap],
    periodic: [bool; 3],
    exec: Execution,
) -> Result<Vec<HaloView>> {
    let dims = grid.dims();
    let ranks = decomposition.ranks();
    if maps.len() != ranks {
        return Err(Error::Protocol(format!(
            "{} index maps for {ranks} ranks",
            maps.len()
        )));
    }

    // Requests, per requesting rank.
    let requests: Vec<Vec<HaloRequest>> = exec.map_range(0..ranks, |r| {
        let b = decomposition.rank_box(r);
        let e = b.extent();
        let mut by_owner: Vec<Vec<Coord>> = vec![Vec::new(); ranks];
        for z in -1..=e[2] as isize {
            for y in -1..=e[1] as isize {
                for x in -1..=e[0] as isize {
                    let p = [x, y, z];
                    if inside_box(p, e) {
                        continue;
                    }
                    if let Some(c) = resolve(b, p, dims, periodic) {
                        let owner = decomposition.owner_of(c);
                        if owner != r {
                            by_owner[owner].push(c);
                        }
                    }
                }
            }
        }
        by_owner
            .into_iter()
            .enumerate()
            .filter(|(_, cells)| !cells.is_empty())
            .map(|(to, cells)| HaloRequest { from: r, to, cells })
            .collect()
    });

    // Owners answer the requests addressed to them.
    let mut inbox: Vec<Vec<&HaloRequest>> = vec![Vec::new(); ranks];
    for req in requests.iter().flatten() {
        inbox[req.to].push(req);
    }
    let replies: Vec<Vec<(usize, usize, HaloReply)>> = exec.map_range(0..ranks, |q| {
        let own = &maps[q];
        inbox[q]
            .iter()
            .map(|req| {
                let cells = req
                    .cells
                    .iter()
                    .filter(|c| own.rank_box().contains(**c))
                    .map(|&c| {
                        (
                            c,
                            HaloCell {
                                fluid: grid.is_fluid(c),
                                ic: own.get(c),
                            },
                        )
                    })
                    .collect();
                (q, req.from, cells)
            })
            .collect()
    });
    let mut delivered: Vec<Vec<(usize, HaloReply)>> = vec![Vec::new(); ranks];
    for (from, to, cells) in replies.into_iter().flatten() {
        delivered[to].push((from, cells));
    }

    // Assemble each view from its own box and the replies.
    let views: Vec<Result<HaloView>> = exec.map_range(0..ranks, |r| {
        let b = *decomposition.rank_box(r);
        let e = b.extent();
        let ext = e.map(|v| v + 2);
        let mut view = HaloView {
            rank_box: b,
            periodic,
            ext,
            cells: vec![None; ext.iter().product()],
            sources: BTreeSet::new(),
        };
        let own = &maps[r];
        let mut received = std::collections::HashMap::new();
        for (from, cells) in &delivered[r] {
            view.sources.insert(*from);
            for &(c, cell) in cells {
                received.insert(c, cell);
            }
        }
        let positions: Vec<([isize; 3], usize)> = view.positions().collect();
        for (p, k) in positions {
            let Some(c) = resolve(&b, p, dims, periodic) else {
                continue;
            };
            let cell = if b.contains(c) {
                HaloCell {
                    fluid: grid.is_fluid(c),
                    ic: own.get(c),
                }
            } else {
                *received.get(&c).ok_or_else(|| {
                    Error::Protocol(format!("rank {r} is missing halo cell {c:?}"))
                })?
            };
            view.cells[k] = Some(cell);
        }
        Ok(view)
    });
    views.into_iter().collect()
}

/// Neighbor records of every fluid cell of the view's own box, in
/// box-local x-fastest order.
pub fn build_adjacency(view: &HaloView) -> Vec<SparseRecord> {
    let b = view.rank_box();
    let e = b.extent();
    let mut records = Vec::new();
    for z in 0..e[2] as isize {
        for y in 0..e[1] as isize {
            for x in 0..e[0] as isize {
                let Some(cell) = view.at([x, y, z]) else {
                    continue;
                };
                if !cell.fluid {
                    continue;
                }
                let mut nbr = [0u64; DIRECTIONS];
                for (d, v) in STENCIL.iter().enumerate() {
                    let p = [x + v[0] as isize, y + v[1] as isize, z + v[2] as isize];
                    nbr[d] = match view.at(p) {
                        Some(n) if n.fluid => n.ic,
                        _ => 0,
                    };
                }
                records.push(SparseRecord {
                    coord: [
                        (b.lo[0] as isize + x) as u32,
                        (b.lo[1] as isize + y) as u32,
                        (b.lo[2] as isize + z) as u32,
                    ],
                    ic: cell.ic,
                    nbr,
                });
            }
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{decompose_ranks, SplitMix64};
    use crate::indexer::{contiguous_index, serial_oracle};
    use crate::numbering::NumberingScheme;

    const LEX1: NumberingScheme = NumberingScheme::LexBlocked { block: 1 };

    fn records(
        grid: &VoxelGrid,
        s: &NumberingScheme,
        p: usize,
        periodic: [bool; 3],
    ) -> Vec<SparseRecord> {
        let idx = contiguous_index(grid, s, p, Execution::Parallel).unwrap();
        let views = halo_exchange(
            grid,
            &idx.decomposition,
            &idx.maps,
            periodic,
            Execution::Parallel,
        )
        .unwrap();
        let mut all: Vec<SparseRecord> = views.iter().flat_map(build_adjacency).collect();
        all.sort_by_key(|r| r.ic);
        all
    }

    /// Direct neighbor lookup on the dense oracle numbering.
    fn dense_reference(
        grid: &VoxelGrid,
        s: &NumberingScheme,
        periodic: [bool; 3],
    ) -> Vec<SparseRecord> {
        let ic = serial_oracle(grid, s);
        let dims = grid.dims();
        let mut out = Vec::new();
        for i in 0..grid.cell_count() {
            if !grid.flags()[i] {
                continue;
            }
            let c = grid.coord_of(i);
            let mut nbr = [0; DIRECTIONS];
            for (d, v) in STENCIL.iter().enumerate() {
                let mut n = [0usize; 3];
                let mut inside = true;
                for a in 0..3 {
                    let g = c[a] as i64 + v[a] as i64;
                    let len = dims[a] as i64;
                    if (0..len).contains(&g) {
                        n[a] = g as usize;
                    } else if periodic[a] {
                        n[a] = g.rem_euclid(len) as usize;
                    } else {
                        inside = false;
                    }
                }
                if inside {
                    nbr[d] = ic[grid.linear(n)];
                }
            }
            out.push(SparseRecord {
                coord: c.map(|v| v as u32),
                ic: ic[i],
                nbr,
            });
        }
        out.sort_by_key(|r| r.ic);
        out
    }

    #[test]
    fn stencil_shape() {
        let axis = STENCIL
            .iter()
            .filter(|v| v.iter().filter(|&&c| c != 0).count() == 1)
            .count();
        assert_eq!(axis, 6);
        for i in 0..DIRECTIONS {
            assert_eq!(STENCIL[opposite(i)], STENCIL[i].map(|c| -c));
            assert!(STENCIL[i].iter().all(|c| (-1..=1).contains(c)));
        }
    }

    #[test]
    fn two_cell_line() {
        let g = VoxelGrid::filled([2, 1, 1], true).unwrap();
        let recs = records(&g, &LEX1, 1, [false; 3]);
        let mut expect = [0u64; DIRECTIONS];
        expect[0] = 2;
        assert_eq!(recs[0].ic, 1);
        assert_eq!(recs[0].nbr, expect);
        // Same result when each cell sits on its own rank.
        assert_eq!(records(&g, &LEX1, 2, [false; 3]), recs);
    }

    #[test]
    fn isolated_cell_has_no_links() {
        let mut g = VoxelGrid::filled([3, 3, 3], false).unwrap();
        g.set([1, 1, 1], true);
        let recs = records(&g, &LEX1, 1, [false; 3]);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].nbr, [0; DIRECTIONS]);
    }

    #[test]
    fn periodic_single_cell_links_to_itself() {
        let g = VoxelGrid::filled([1, 1, 1], true).unwrap();
        let recs = records(&g, &LEX1, 1, [true, false, false]);
        assert_eq!(recs[0].nbr[0], 1);
        assert_eq!(recs[0].nbr[1], 1);
        assert_eq!(recs[0].nbr[2], 0);
    }

    #[test]
    fn halo_neighborhoods() {
        let g = VoxelGrid::filled([9, 9, 9], true).unwrap();
        let idx = contiguous_index(&g, &LEX1, 27, Execution::Parallel).unwrap();
        assert_eq!(idx.decomposition.factors(), [3, 3, 3]);
        let views = halo_exchange(
            &g,
            &idx.decomposition,
            &idx.maps,
            [false; 3],
            Execution::Parallel,
        )
        .unwrap();
        let center = idx.decomposition.rank_of_block([1, 1, 1]);
        assert_eq!(views[center].source_ranks().len(), 26);
        assert_eq!(views[center].halo_len(), 5 * 5 * 5 - 27);

        let idx = contiguous_index(&g, &LEX1, 1, Execution::Parallel).unwrap();
        let views = halo_exchange(
            &g,
            &idx.decomposition,
            &idx.maps,
            [false; 3],
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(views[0].halo_len(), 0);
        assert!(views[0].source_ranks().is_empty());
    }

    #[test]
    fn periodic_halo_wraps_to_first_slab() {
        let g = VoxelGrid::filled([6, 2, 2], true).unwrap();
        let d = decompose_ranks([6, 2, 2], 3).unwrap();
        assert_eq!(d.factors(), [3, 1, 1]);
        let idx = contiguous_index(&g, &LEX1, 3, Execution::Sequential).unwrap();
        let views = halo_exchange(
            &g,
            &idx.decomposition,
            &idx.maps,
            [true, false, false],
            Execution::Sequential,
        )
        .unwrap();
        let last = &views[2];
        assert!(last.source_ranks().contains(&0));
        // Offset x = extent maps to global x = 0.
        let cell = last.at([2, 0, 0]).unwrap();
        assert_eq!(cell.ic, idx.maps[0].get([0, 0, 0]));
        // Non-periodic y: outside positions are empty.
        assert!(last.at([0, -1, 0]).is_none());
    }

    #[test]
    fn symmetric_and_rank_invariant_on_random_grids() {
        let mut rng = SplitMix64::new(42);
        let schemes = [
            LEX1,
            NumberingScheme::LexBlocked { block: 4 },
            NumberingScheme::Morton { group: 1 },
            NumberingScheme::Morton { group: 2 },
        ];
        for trial in 0..4 {
            let dims = [6 + trial, 5, 4 + trial % 2];
            let g = VoxelGrid::from_fn(dims, |_| rng.below(4) > 0).unwrap();
            let periodic = [trial % 2 == 0, trial == 1, trial == 3];
            for s in &schemes {
                let one = records(&g, s, 1, periodic);
                assert_eq!(one, dense_reference(&g, s, periodic), "{s} {dims:?}");
                assert_eq!(records(&g, s, 8, periodic), one);
                let by_ic: Vec<&SparseRecord> = one.iter().collect();
                for a in &one {
                    for d in 0..DIRECTIONS {
                        if a.nbr[d] != 0 {
                            let b = by_ic[(a.nbr[d] - 1) as usize];
                            assert_eq!(b.nbr[opposite(d)], a.ic);
                        }
                    }
                }
            }
        }
    }
}
